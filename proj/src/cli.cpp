#include "stmem/cli.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>

#include <json.hpp>
#include <omp.h>

#include "stmem/eval.hpp"
#include "stmem/gmm.hpp"
#include "stmem/kernels.hpp"
#include "stmem/manifest.hpp"
#include "stmem/patchify.hpp"
#include "stmem/rng.hpp"
#include "stmem/signal.hpp"
#include "stmem/train.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace stmem {

namespace {

void ensure_out_dir(const RunConfig& cfg) {
    if (cfg.out_dir.empty()) fail("MissingInput", "out_dir must not be empty");
    fs::create_directories(cfg.out_dir);
}

std::string require(const std::string& value, const std::string& key) {
    if (value.empty()) fail("MissingInput", "config key '" + key + "' is required");
    return value;
}

void require_file(const std::string& path, const std::string& what) {
    if (!fs::exists(path)) fail("MissingInput", what + " not found: " + path);
}

json metrics_row_json(const MetricsRow& row) {
    json j;
    j["epoch"] = row.epoch;
    j["split"] = row.split;
    j["loss"] = row.loss;
    j["lr"] = row.lr;
    if (row.has_classification) {
        j["accuracy"] = row.accuracy;
        j["macro_f1"] = row.macro_f1;
        j["auroc"] = row.auroc;
    }
    return j;
}

void write_metrics_jsonl(const std::vector<MetricsRow>& rows, const std::string& path) {
    std::ofstream out(path);
    if (!out) fail("IoError", "cannot write " + path);
    for (const MetricsRow& row : rows) out << metrics_row_json(row).dump() << "\n";
}

// ---------------------------------------------------------------------------
// commands
// ---------------------------------------------------------------------------

int cmd_synth(const RunConfig& cfg) {
    ensure_out_dir(cfg);
    const int L = cfg.model.max_leads;
    const std::vector<std::string>& leads = cfg.model.lead_names;

    Manifest manifest;
    manifest.split = "all";
    for (int i = 0; i < cfg.synth_records; ++i) {
        const int cls = cfg.synth_classes > 1 ? i % cfg.synth_classes : -1;
        Rng rng(mix_seed(cfg.train.seed, 0x5e71, static_cast<std::uint64_t>(i)));

        SynthParams sp;
        sp.duration_s = cfg.synth_duration_s;
        sp.sample_rate = cfg.synth_sample_rate;
        sp.heart_rate_bpm = cfg.synth_heart_rate_bpm * (0.9 + 0.2 * rng.uniform());
        sp.noise_std = cfg.synth_noise_std;
        sp.seed = mix_seed(cfg.train.seed, 0xec6, static_cast<std::uint64_t>(i));
        sp.leads = leads;
        sp.lead_mixing.resize(L);
        // class identity lives in the lead gain pattern, not in overall energy
        const double phase = cls < 0 ? 0.0 : 2.0 * M_PI * cls / cfg.synth_classes;
        const double amp_scale = 0.9 + 0.2 * rng.uniform();
        for (int l = 0; l < L; ++l) {
            sp.lead_mixing[l] = amp_scale * (1.0 + 0.5 * std::sin(2.0 * M_PI * l / L + phase));
        }
        EcgRecord rec = synth_ecg(sp);
        rec.source_id = "synth-" + std::to_string(i);

        char name[64];
        std::snprintf(name, sizeof(name), "synth_%04d.stecg", i);
        write_record(rec, (fs::path(cfg.out_dir) / name).string());
        ManifestRow row;
        row.path = name;
        if (cls >= 0) row.label = "class" + std::to_string(cls);
        manifest.rows.push_back(std::move(row));
    }
    save_manifest(manifest, (fs::path(cfg.out_dir) / "synth.manifest").string());
    std::cerr << "synth: wrote " << cfg.synth_records << " records to " << cfg.out_dir << "\n";
    return 0;
}

int cmd_preprocess(const RunConfig& cfg) {
    const std::string manifest_path = require(cfg.data_manifest, "data_manifest");
    require_file(manifest_path, "data manifest");
    ensure_out_dir(cfg);
    const Manifest input = load_manifest(manifest_path);
    const std::vector<std::string> paths = resolved_paths(input, manifest_path);

    struct RowResult {
        bool dropped = false;
        std::vector<std::string> files;
        std::string label;
        std::string error;
    };
    std::vector<RowResult> results(input.rows.size());

    const int n = static_cast<int>(input.rows.size());
#pragma omp parallel for schedule(dynamic) num_threads(num_threads())
    for (int i = 0; i < n; ++i) {
        RowResult& rr = results[i];
        try {
            const auto labels = split_labels(input.rows[i].label);
            if (labels.size() > 1) {  // multi-label records are excluded here
                rr.dropped = true;
                continue;
            }
            rr.label = labels.empty() ? "" : labels[0];
            EcgRecord rec = read_record(paths[i]);
            if (rec.sample_rate != cfg.target_hz) rec = resample(rec, cfg.target_hz);
            rec = bandpass(rec, cfg.bandpass_lo, cfg.bandpass_hi);
            const std::vector<EcgRecord> segments = crop_segments(rec, cfg.segment_seconds);
            const std::string stem = fs::path(input.rows[i].path).stem().string();
            for (std::size_t s = 0; s < segments.size(); ++s) {
                const EcgRecord normalized = znorm(segments[s]);
                const std::string name = stem + "_seg" + std::to_string(s) + ".stecg";
                write_record(normalized, (fs::path(cfg.out_dir) / name).string());
                rr.files.push_back(name);
            }
        } catch (const Error& e) {
            rr.error = e.what();
        }
    }
    for (const RowResult& rr : results) {
        if (!rr.error.empty()) throw Error("PreprocessFailed", rr.error);
    }

    Manifest out;
    out.split = input.split;
    int dropped = 0, discarded = 0;
    for (const RowResult& rr : results) {  // input order regardless of scheduling
        if (rr.dropped) {
            ++dropped;
            continue;
        }
        if (rr.files.empty()) ++discarded;
        for (const std::string& f : rr.files) out.rows.push_back({f, rr.label});
    }
    save_manifest(out, (fs::path(cfg.out_dir) / "preprocessed.manifest").string());
    std::cerr << "preprocess: " << out.rows.size() << " segments, " << dropped
              << " multi-label rows dropped, " << discarded << " too-short records discarded\n";
    return 0;
}

int cmd_split(const RunConfig& cfg) {
    const std::string manifest_path = require(cfg.data_manifest, "data_manifest");
    require_file(manifest_path, "data manifest");
    ensure_out_dir(cfg);
    Manifest input = load_manifest(manifest_path);
    if (input.rows.empty()) fail("EmptyDataset", "manifest has no rows");

    Rng rng(mix_seed(cfg.train.seed, 0x59117));
    rng.shuffle(input.rows);
    const std::size_t n = input.rows.size();
    const std::size_t n_train = static_cast<std::size_t>(std::floor(0.7 * n));
    const std::size_t n_valid = static_cast<std::size_t>(std::floor(0.1 * n));

    auto emit = [&](const char* split, std::size_t begin, std::size_t end) {
        Manifest m;
        m.split = split;
        m.rows.assign(input.rows.begin() + begin, input.rows.begin() + end);
        save_manifest(m, (fs::path(cfg.out_dir) / (std::string(split) + ".manifest")).string());
        return end - begin;
    };
    emit("train", 0, n_train);
    emit("valid", n_train, n_train + n_valid);
    emit("test", n_train + n_valid, n);
    std::cerr << "split: " << n_train << "/" << n_valid << "/" << (n - n_train - n_valid) << "\n";
    return 0;
}

TrainMode command_mode(const std::string& command) {
    if (command == "pretrain") return TrainMode::Pretrain;
    if (command == "finetune") return TrainMode::Finetune;
    return TrainMode::LinearProbe;
}

void reconcile_mode(RunConfig& cfg, const std::string& command) {
    const TrainMode wanted = command_mode(command);
    if (cfg.was_set("mode") && cfg.train.mode != wanted) {
        fail("ModeMismatch", "config mode '" + std::string(train_mode_name(cfg.train.mode)) +
                                 "' conflicts with command '" + command + "'");
    }
    cfg.train.mode = wanted;
}

int cmd_pretrain(RunConfig cfg) {
    reconcile_mode(cfg, "pretrain");
    const std::string manifest_path = require(cfg.train_manifest, "train_manifest");
    require_file(manifest_path, "train manifest");
    ensure_out_dir(cfg);
    const Manifest manifest = load_manifest(manifest_path);
    if (manifest.rows.empty()) fail("EmptyDataset", "train manifest has no rows");
    const std::vector<EcgRecord> records = load_records(manifest, manifest_path);

    const TrainResult result = pretrain(records, cfg.model, cfg.train);
    const std::string ckpt = (fs::path(cfg.out_dir) / "checkpoint.stmc").string();
    save_checkpoint(result.params, cfg.model, cfg.train, ckpt);
    write_metrics_jsonl(result.metrics, (fs::path(cfg.out_dir) / "metrics.jsonl").string());
    std::cerr << "pretrain: loss " << result.first_epoch_loss << " -> " << result.last_epoch_loss
              << ", checkpoint " << ckpt << "\n";
    return 0;
}

int cmd_finetune(RunConfig cfg, const std::string& command) {
    reconcile_mode(cfg, command);
    const std::string manifest_path = require(cfg.train_manifest, "train_manifest");
    require_file(manifest_path, "train manifest");
    const std::string init = require(cfg.init_checkpoint, "init_checkpoint");
    require_file(init, "initial checkpoint");
    ensure_out_dir(cfg);

    const Manifest manifest = load_manifest(manifest_path);
    if (manifest.rows.empty()) fail("EmptyDataset", "train manifest has no rows");

    Checkpoint ckpt = load_checkpoint(init);
    ModelConfig mcfg = ckpt.model;
    const std::vector<std::string> labels = manifest.label_set();
    if (labels.size() < 2) fail("InvalidClassCount", "need at least two label names");
    mcfg.num_classes = static_cast<int>(labels.size());
    mcfg.label_names = labels;
    if (!cfg.model.active_leads.empty()) mcfg = restrict_leads(mcfg, cfg.model.active_leads);

    ModelParams<float> params = ckpt.params;
    if (params.head_w.empty() || params.head_w.shape[1] != mcfg.num_classes) {
        // fresh classifier head on top of the pretrained encoder
        const ModelParams<float> fresh =
            init_params<float>(mcfg, mix_seed(cfg.train.seed, 0xead));
        params.head_w = fresh.head_w;
        params.head_b = fresh.head_b;
    }

    const std::vector<EcgRecord> train_records =
        load_labeled_records(manifest, manifest_path, mcfg.label_names);
    std::vector<EcgRecord> valid_records;
    if (!cfg.valid_manifest.empty()) {
        require_file(cfg.valid_manifest, "valid manifest");
        const Manifest vm = load_manifest(cfg.valid_manifest);
        valid_records = load_labeled_records(vm, cfg.valid_manifest, mcfg.label_names);
    }

    const TrainResult result = finetune(train_records, valid_records, params, mcfg, cfg.train);
    const std::string out_ckpt = (fs::path(cfg.out_dir) / "checkpoint.stmc").string();
    save_checkpoint(result.params, mcfg, cfg.train, out_ckpt);
    write_metrics_jsonl(result.metrics, (fs::path(cfg.out_dir) / "metrics.jsonl").string());
    std::cerr << command << ": loss " << result.first_epoch_loss << " -> "
              << result.last_epoch_loss << ", checkpoint " << out_ckpt << "\n";
    return 0;
}

int cmd_eval(const RunConfig& cfg) {
    const std::string manifest_path = require(cfg.test_manifest, "test_manifest");
    require_file(manifest_path, "test manifest");
    const std::string ckpt_path = require(cfg.checkpoint, "checkpoint");
    require_file(ckpt_path, "checkpoint");
    ensure_out_dir(cfg);

    const Checkpoint ckpt = load_checkpoint(ckpt_path);
    ModelConfig mcfg = ckpt.model;
    if (!cfg.model.active_leads.empty()) mcfg = restrict_leads(mcfg, cfg.model.active_leads);
    if (mcfg.num_classes < 2) fail("MissingHead", "checkpoint has no classifier head");

    const Manifest manifest = load_manifest(manifest_path);
    const std::vector<EcgRecord> records =
        load_labeled_records(manifest, manifest_path, mcfg.label_names);
    if (records.empty()) fail("EmptyDataset", "test manifest has no rows");

    std::vector<std::vector<double>> scores;
    std::vector<int> labels;
    for (const EcgRecord& rec : records) {
        const PatchGrid grid = patchify(rec, PatchMode::SpatioTemporal, mcfg.patch_size);
        const auto out = forward_classify(grid, ckpt.params, mcfg);
        scores.emplace_back(out.probs.begin(), out.probs.end());
        labels.push_back(rec.label);
    }
    const MetricsReport report = compute_metrics(scores, labels, mcfg.num_classes);

    json j;
    j["accuracy"] = report.accuracy;
    j["macro_f1"] = report.macro_f1;
    j["ovr_auroc"] = report.ovr_auroc;
    j["per_class_f1"] = report.per_class_f1;
    j["n_samples"] = report.n_samples;
    const std::string out_path = (fs::path(cfg.out_dir) / "metrics.json").string();
    std::ofstream out(out_path);
    if (!out) fail("IoError", "cannot write " + out_path);
    out << j.dump(2) << "\n";
    std::cerr << "eval: " << j.dump() << "\n";
    return 0;
}

int cmd_embed(const RunConfig& cfg) {
    const std::string manifest_path = require(cfg.data_manifest, "data_manifest");
    require_file(manifest_path, "data manifest");
    const std::string ckpt_path = require(cfg.checkpoint, "checkpoint");
    require_file(ckpt_path, "checkpoint");
    ensure_out_dir(cfg);

    const Checkpoint ckpt = load_checkpoint(ckpt_path);
    const Manifest manifest = load_manifest(manifest_path);
    const std::vector<EcgRecord> records = load_records(manifest, manifest_path);
    if (records.empty()) fail("EmptyDataset", "data manifest has no rows");

    const auto rows = export_lead_embeddings(records, ckpt.params, ckpt.model);
    const std::string out_path = (fs::path(cfg.out_dir) / "embeddings.csv").string();
    write_embeddings_csv(rows, out_path);
    std::cerr << "embed: " << rows.size() << " rows -> " << out_path << "\n";
    return 0;
}

int cmd_attention(const RunConfig& cfg) {
    const std::string record_path = require(cfg.record_path, "record_path");
    require_file(record_path, "record");
    const std::string ckpt_path = require(cfg.checkpoint, "checkpoint");
    require_file(ckpt_path, "checkpoint");
    ensure_out_dir(cfg);

    const Checkpoint ckpt = load_checkpoint(ckpt_path);
    const EcgRecord rec = read_record(record_path);
    const PatchGrid grid = patchify(rec, PatchMode::SpatioTemporal, ckpt.model.patch_size);

    int query_lead = -1;
    for (int l = 0; l < grid.num_leads; ++l) {
        if (grid.leads[l] == cfg.query_lead) query_lead = l;
    }
    if (query_lead < 0) fail("UnknownLead", "record has no lead " + cfg.query_lead);

    std::vector<TokenTag> tags;
    const std::vector<float> weights =
        attention_maps(grid, ckpt.params, ckpt.model, query_lead, cfg.query_t, &tags);

    const std::string out_path = (fs::path(cfg.out_dir) / "attention.csv").string();
    std::ofstream out(out_path);
    if (!out) fail("IoError", "cannot write " + out_path);
    out << "lead,tpos,weight\n";
    for (std::size_t i = 0; i < weights.size(); ++i) {
        const TokenTag& tag = tags[i];
        out << grid.leads[tag.lead] << ",";
        if (tag.tpos == kSepStart) {
            out << "sep_start";
        } else if (tag.tpos == kSepEnd) {
            out << "sep_end";
        } else {
            out << tag.tpos;
        }
        out << "," << weights[i] << "\n";
    }
    std::cerr << "attention: " << weights.size() << " weights -> " << out_path << "\n";
    return 0;
}

int cmd_cluster(const RunConfig& cfg) {
    const std::string csv = cfg.embeddings_csv.empty()
                                ? (fs::path(cfg.out_dir) / "embeddings.csv").string()
                                : cfg.embeddings_csv;
    require_file(csv, "embeddings CSV");
    ensure_out_dir(cfg);

    const auto rows = read_embeddings_csv(csv);
    const int d = static_cast<int>(rows[0].vec.size());
    std::vector<double> points;
    for (const auto& row : rows) points.insert(points.end(), row.vec.begin(), row.vec.end());

    const GmmModel model = gmm_fit(points, static_cast<int>(rows.size()), d, 2, cfg.train.seed);
    const double acc = lead_cluster_accuracy(rows, model);
    const std::vector<int> assign = gmm_assign(model, points, static_cast<int>(rows.size()));
    std::vector<int> sizes(2, 0);
    for (int a : assign) ++sizes[a];

    json j;
    j["accuracy"] = acc;
    j["n_points"] = rows.size();
    j["component_sizes"] = sizes;
    const std::string out_path = (fs::path(cfg.out_dir) / "cluster.json").string();
    std::ofstream out(out_path);
    if (!out) fail("IoError", "cannot write " + out_path);
    out << j.dump(2) << "\n";
    std::cerr << "cluster: " << j.dump() << "\n";
    return 0;
}

}  // namespace

int run(const std::string& command, RunConfig config) {
    if (command == "preprocess") return cmd_preprocess(config);
    if (command == "synth") return cmd_synth(config);
    if (command == "split") return cmd_split(config);
    if (command == "pretrain") return cmd_pretrain(std::move(config));
    if (command == "finetune" || command == "probe") return cmd_finetune(std::move(config), command);
    if (command == "eval") return cmd_eval(config);
    if (command == "embed") return cmd_embed(config);
    if (command == "attention") return cmd_attention(config);
    if (command == "cluster") return cmd_cluster(config);
    fail("UnknownCommand", "no such command '" + command + "'");
}

}  // namespace stmem
