#include "stmem/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>

#include "stmem/config.hpp"
#include "stmem/eval.hpp"
#include "stmem/patchify.hpp"
#include "stmem/rng.hpp"

namespace stmem {

const char* train_mode_name(TrainMode mode) {
    switch (mode) {
        case TrainMode::Pretrain: return "pretrain";
        case TrainMode::Finetune: return "finetune";
        case TrainMode::LinearProbe: return "linear_probe";
    }
    return "?";
}

TrainMode train_mode_from_name(const std::string& name) {
    if (name == "pretrain") return TrainMode::Pretrain;
    if (name == "finetune") return TrainMode::Finetune;
    if (name == "linear_probe" || name == "probe") return TrainMode::LinearProbe;
    fail("TypeMismatch", "unknown training mode '" + name + "'");
}

void TrainConfig::validate() const {
    if (!(base_lr > 0.0)) fail("RangeError", "base_lr must be positive");
    if (batch_size < 1) fail("RangeError", "batch_size must be >= 1");
    if (epochs < 1) fail("RangeError", "epochs must be >= 1");
    if (warmup_epochs < 0.0 || warmup_epochs > epochs) {
        fail("RangeError", "warmup_epochs must lie in [0, epochs]");
    }
    if (weight_decay < 0.0) fail("RangeError", "weight_decay must be >= 0");
    if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0)) {
        fail("RangeError", "betas must lie in [0, 1)");
    }
    if (!(eps > 0.0)) fail("RangeError", "eps must be positive");
    if (!(mask_ratio >= 0.0 && mask_ratio <= 1.0)) fail("RangeError", "mask_ratio outside [0, 1]");
    if (!(rlm_prob >= 0.0 && rlm_prob < 1.0)) fail("RangeError", "rlm_prob outside [0, 1)");
    if (eval_every < 1) fail("RangeError", "eval_every must be >= 1");
}

double lr_at(std::int64_t step, std::int64_t total_steps, std::int64_t warmup_steps,
             double base_lr) {
    if (step < 0 || step > total_steps || warmup_steps > total_steps || warmup_steps < 0) {
        fail("RangeError", "invalid step bounds");
    }
    if (warmup_steps > 0 && step < warmup_steps) {
        return base_lr * static_cast<double>(step) / static_cast<double>(warmup_steps);
    }
    if (total_steps == warmup_steps) return base_lr;
    const double progress = static_cast<double>(step - warmup_steps) /
                            static_cast<double>(total_steps - warmup_steps);
    return base_lr * 0.5 * (1.0 + std::cos(M_PI * progress));
}

OptimizerState make_optimizer_state(const ModelParams<float>& params) {
    OptimizerState state;
    visit_params(params, [&state](const std::string&, const Tensor<float>& t, bool) {
        state.m.emplace_back(t.shape);
        state.v.emplace_back(t.shape);
    });
    return state;
}

TensorFilter filter_for_mode(TrainMode mode) {
    switch (mode) {
        case TrainMode::Pretrain:
            return [](const std::string&) { return true; };
        case TrainMode::Finetune:
            // the decoder is not part of the fine-tuning graph and must stay
            // bit-identical in the saved checkpoint
            return [](const std::string& name) {
                return name.rfind("dec", 0) != 0 && name.rfind("recon", 0) != 0;
            };
        case TrainMode::LinearProbe:
            return [](const std::string& name) { return name.rfind("head_", 0) == 0; };
    }
    return {};
}

void adamw_step(ModelParams<float>& params, const ModelParams<float>& grads, OptimizerState& state,
                double lr, const TrainConfig& config, const TensorFilter& update) {
    std::vector<const Tensor<float>*> gtensors;
    visit_params(grads, [&gtensors](const std::string&, const Tensor<float>& t, bool) {
        gtensors.push_back(&t);
    });

    // validate first so a bad batch leaves params and moments untouched
    {
        std::size_t i = 0;
        bool ok = true;
        std::string offender;
        visit_params(params, [&](const std::string& name, const Tensor<float>&, bool trainable) {
            const Tensor<float>* g = gtensors[i++];
            if (!trainable || (update && !update(name))) return;
            for (float x : g->v) {
                if (!std::isfinite(x) && ok) {
                    ok = false;
                    offender = name;
                }
            }
        });
        if (!ok) fail("NaNGradient", "non-finite gradient in " + offender);
    }

    state.t += 1;
    const double bc1 = 1.0 - std::pow(config.beta1, static_cast<double>(state.t));
    const double bc2 = 1.0 - std::pow(config.beta2, static_cast<double>(state.t));

    std::size_t i = 0;
    visit_params(params, [&](const std::string& name, Tensor<float>& t, bool trainable) {
        const std::size_t slot = i++;
        if (!trainable || (update && !update(name))) return;
        const Tensor<float>& g = *gtensors[slot];
        Tensor<float>& m = state.m[slot];
        Tensor<float>& v = state.v[slot];
        const float decay = static_cast<float>(1.0 - lr * config.weight_decay);
        for (std::int64_t j = 0; j < t.size(); ++j) {
            t.v[j] *= decay;
            m.v[j] = static_cast<float>(config.beta1 * m.v[j] + (1.0 - config.beta1) * g.v[j]);
            v.v[j] = static_cast<float>(config.beta2 * v.v[j] +
                                        (1.0 - config.beta2) * static_cast<double>(g.v[j]) * g.v[j]);
            const double mhat = m.v[j] / bc1;
            const double vhat = v.v[j] / bc2;
            t.v[j] -= static_cast<float>(lr * mhat / (std::sqrt(vhat) + config.eps));
        }
    });
}

// ---------------------------------------------------------------------------
// training loops
// ---------------------------------------------------------------------------

namespace {

std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, int epoch) {
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    Rng rng(mix_seed(seed, 0x0badf00d, static_cast<std::uint64_t>(epoch)));
    rng.shuffle(order);
    return order;
}

void check_dataset(const std::vector<EcgRecord>& records, const ModelConfig& config) {
    if (records.empty()) fail("EmptyDataset", "training needs at least one record");
    for (const EcgRecord& r : records) {
        if (r.num_samples < config.patch_size) {
            fail("ShapeMismatch", "record " + r.source_id + " shorter than one patch");
        }
        if (r.num_samples != records.front().num_samples) {
            fail("ShapeMismatch", "records have mixed lengths; preprocess first");
        }
    }
}

}  // namespace

TrainResult pretrain(const std::vector<EcgRecord>& records, const ModelConfig& model_config,
                     const TrainConfig& train_config, const ModelParams<float>* initial) {
    model_config.validate();
    train_config.validate();
    if (train_config.mode != TrainMode::Pretrain) fail("ModeMismatch", "config mode != pretrain");
    check_dataset(records, model_config);

    TrainResult result;
    result.params = initial != nullptr
                        ? *initial
                        : init_params<float>(model_config, mix_seed(train_config.seed, 0x1417));
    OptimizerState state = make_optimizer_state(result.params);
    const TensorFilter update = filter_for_mode(TrainMode::Pretrain);

    const std::size_t n = records.size();
    const std::int64_t steps_per_epoch =
        static_cast<std::int64_t>((n + train_config.batch_size - 1) / train_config.batch_size);
    const std::int64_t total_steps = steps_per_epoch * train_config.epochs;
    const std::int64_t warmup_steps =
        std::llround(train_config.warmup_epochs * static_cast<double>(steps_per_epoch));

    std::int64_t step = 0;
    for (int epoch = 0; epoch < train_config.epochs; ++epoch) {
        const std::vector<std::size_t> order = epoch_order(n, train_config.seed, epoch);
        double epoch_loss = 0.0;
        std::int64_t epoch_batches = 0;
        double lr = 0.0;
        for (std::size_t start = 0; start < n; start += train_config.batch_size, ++step) {
            const std::size_t stop = std::min(n, start + train_config.batch_size);
            const float scale = 1.0f / static_cast<float>(stop - start);
            ModelParams<float> grads = zeros_like(result.params);
            double batch_loss = 0.0;
            for (std::size_t b = start; b < stop; ++b) {
                const EcgRecord* rec = &records[order[b]];
                EcgRecord augmented;
                if (train_config.rlm_prob > 0.0) {
                    augmented = random_lead_mask(
                        *rec, train_config.rlm_prob,
                        mix_seed(train_config.seed, 0x1e4d, static_cast<std::uint64_t>(step) * 4096 + b));
                    rec = &augmented;
                }
                const PatchGrid grid = patchify(*rec, PatchMode::SpatioTemporal,
                                                model_config.patch_size);
                const MaskPlan plan = plan_mask(
                    grid.num_leads, grid.patches_per_lead, train_config.mask_ratio,
                    mix_seed(train_config.seed, static_cast<std::uint64_t>(step), b - start));
                const auto out = ssl_step(grid, plan, result.params, model_config, grads, scale);
                batch_loss += out.loss / static_cast<double>(stop - start);
            }
            lr = lr_at(step, total_steps, warmup_steps, train_config.base_lr);
            adamw_step(result.params, grads, state, lr, train_config, update);
            epoch_loss += batch_loss;
            ++epoch_batches;
        }
        epoch_loss /= static_cast<double>(epoch_batches);
        MetricsRow row;
        row.epoch = epoch;
        row.split = "train";
        row.loss = epoch_loss;
        row.lr = lr;
        result.metrics.push_back(row);
        if (epoch == 0) result.first_epoch_loss = epoch_loss;
        result.last_epoch_loss = epoch_loss;
    }
    return result;
}

namespace {

MetricsRow eval_classifier(const std::vector<EcgRecord>& records, const ModelParams<float>& params,
                           const ModelConfig& config, int epoch, const std::string& split) {
    std::vector<std::vector<double>> scores;
    std::vector<int> labels;
    double loss = 0.0;
    for (const EcgRecord& rec : records) {
        const PatchGrid grid = patchify(rec, PatchMode::SpatioTemporal, config.patch_size);
        const auto out = forward_classify(grid, params, config);
        scores.emplace_back(out.probs.begin(), out.probs.end());
        labels.push_back(rec.label);
        loss += -std::log(std::max(1e-30, scores.back()[rec.label])) / config.num_classes;
    }
    const MetricsReport report = compute_metrics(scores, labels, config.num_classes);
    MetricsRow row;
    row.epoch = epoch;
    row.split = split;
    row.loss = loss / static_cast<double>(records.size());
    row.has_classification = true;
    row.accuracy = report.accuracy;
    row.macro_f1 = report.macro_f1;
    row.auroc = report.ovr_auroc;
    return row;
}

}  // namespace

TrainResult finetune(const std::vector<EcgRecord>& train_records,
                     const std::vector<EcgRecord>& valid_records,
                     const ModelParams<float>& initial, const ModelConfig& model_config,
                     const TrainConfig& train_config) {
    model_config.validate();
    train_config.validate();
    if (train_config.mode != TrainMode::Finetune && train_config.mode != TrainMode::LinearProbe) {
        fail("ModeMismatch", "config mode must be finetune or linear_probe");
    }
    if (model_config.num_classes < 2) fail("InvalidClassCount", "fine-tuning needs K >= 2");
    check_dataset(train_records, model_config);
    for (const EcgRecord& r : train_records) {
        if (r.label < 0 || r.label >= model_config.num_classes) {
            fail("LabelRange", "record " + r.source_id + " label outside [0, K)");
        }
    }

    TrainResult result;
    result.params = initial;
    if (result.params.head_w.empty()) fail("MissingHead", "initial parameters lack a classifier head");
    OptimizerState state = make_optimizer_state(result.params);
    const TensorFilter update = filter_for_mode(train_config.mode);

    const std::size_t n = train_records.size();
    const std::int64_t steps_per_epoch =
        static_cast<std::int64_t>((n + train_config.batch_size - 1) / train_config.batch_size);
    const std::int64_t total_steps = steps_per_epoch * train_config.epochs;
    const std::int64_t warmup_steps =
        std::llround(train_config.warmup_epochs * static_cast<double>(steps_per_epoch));

    std::int64_t step = 0;
    for (int epoch = 0; epoch < train_config.epochs; ++epoch) {
        const std::vector<std::size_t> order = epoch_order(n, train_config.seed, epoch);
        double epoch_loss = 0.0;
        std::int64_t epoch_batches = 0;
        double lr = 0.0;
        for (std::size_t start = 0; start < n; start += train_config.batch_size, ++step) {
            const std::size_t stop = std::min(n, start + train_config.batch_size);
            const float scale = 1.0f / static_cast<float>(stop - start);
            ModelParams<float> grads = zeros_like(result.params);
            double batch_loss = 0.0;
            for (std::size_t b = start; b < stop; ++b) {
                const EcgRecord& rec = train_records[order[b]];
                const PatchGrid grid =
                    patchify(rec, PatchMode::SpatioTemporal, model_config.patch_size);
                batch_loss += classify_step(grid, rec.label, result.params, model_config, grads,
                                            scale) /
                              static_cast<double>(stop - start);
            }
            lr = lr_at(step, total_steps, warmup_steps, train_config.base_lr);
            adamw_step(result.params, grads, state, lr, train_config, update);
            epoch_loss += batch_loss;
            ++epoch_batches;
        }
        epoch_loss /= static_cast<double>(epoch_batches);
        MetricsRow row;
        row.epoch = epoch;
        row.split = "train";
        row.loss = epoch_loss;
        row.lr = lr;
        result.metrics.push_back(row);
        if (epoch == 0) result.first_epoch_loss = epoch_loss;
        result.last_epoch_loss = epoch_loss;

        if (!valid_records.empty() &&
            (epoch % train_config.eval_every == train_config.eval_every - 1 ||
             epoch == train_config.epochs - 1)) {
            MetricsRow vrow =
                eval_classifier(valid_records, result.params, model_config, epoch, "valid");
            vrow.lr = lr;
            result.metrics.push_back(vrow);
        }
    }
    return result;
}

// ---------------------------------------------------------------------------
// checkpoints
// ---------------------------------------------------------------------------

namespace {

constexpr char kCkptMagic[4] = {'S', 'T', 'M', 'C'};
constexpr std::uint32_t kCkptVersion = 1;

void put_u32(std::ostream& os, std::uint32_t v) {
    unsigned char b[4];
    for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
    os.write(reinterpret_cast<const char*>(b), 4);
}

void put_u16(std::ostream& os, std::uint16_t v) {
    const unsigned char b[2] = {static_cast<unsigned char>(v & 0xff),
                                static_cast<unsigned char>(v >> 8)};
    os.write(reinterpret_cast<const char*>(b), 2);
}

bool get_bytes(std::istream& is, void* dst, std::size_t n) {
    is.read(static_cast<char*>(dst), static_cast<std::streamsize>(n));
    return static_cast<std::size_t>(is.gcount()) == n;
}

std::uint32_t get_u32(std::istream& is) {
    unsigned char b[4];
    if (!get_bytes(is, b, 4)) fail("FormatError", "truncated checkpoint");
    return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
           (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

std::uint16_t get_u16(std::istream& is) {
    unsigned char b[2];
    if (!get_bytes(is, b, 2)) fail("FormatError", "truncated checkpoint");
    return static_cast<std::uint16_t>(b[0] | (b[1] << 8));
}

}  // namespace

void save_checkpoint(const ModelParams<float>& params, const ModelConfig& model_config,
                     const TrainConfig& train_config, const std::string& path) {
    RunConfig rc;
    rc.model = model_config;
    rc.train = train_config;
    const std::string config_text = canonical_config_text(rc, /*checkpoint_only=*/true);

    std::ofstream out(path, std::ios::binary);
    if (!out) fail("IoError", "cannot write " + path);
    out.write(kCkptMagic, 4);
    put_u32(out, kCkptVersion);
    put_u32(out, static_cast<std::uint32_t>(config_text.size()));
    out.write(config_text.data(), static_cast<std::streamsize>(config_text.size()));

    std::uint32_t count = 0;
    visit_params(params, [&count](const std::string&, const Tensor<float>&, bool) { ++count; });
    put_u32(out, count);
    visit_params(params, [&out](const std::string& name, const Tensor<float>& t, bool) {
        put_u16(out, static_cast<std::uint16_t>(name.size()));
        out.write(name.data(), static_cast<std::streamsize>(name.size()));
        out.put(static_cast<char>(t.shape.size()));
        for (int d : t.shape) put_u32(out, static_cast<std::uint32_t>(d));
        for (float v : t.v) {
            std::uint32_t bits;
            std::memcpy(&bits, &v, 4);
            put_u32(out, bits);
        }
    });
    if (!out) fail("IoError", "write failed: " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) fail("IoError", "cannot open " + path);
    char magic[4];
    if (!get_bytes(in, magic, 4) || std::memcmp(magic, kCkptMagic, 4) != 0) {
        fail("FormatError", "bad checkpoint magic in " + path);
    }
    const std::uint32_t version = get_u32(in);
    if (version != kCkptVersion) {
        fail("FormatError", "unsupported checkpoint version " + std::to_string(version));
    }
    const std::uint32_t text_len = get_u32(in);
    std::string config_text(text_len, '\0');
    if (text_len > 0 && !get_bytes(in, config_text.data(), text_len)) {
        fail("FormatError", "truncated checkpoint config block");
    }
    const RunConfig rc = parse_config_text(config_text);

    Checkpoint ckpt;
    ckpt.model = rc.model;
    ckpt.train = rc.train;
    ckpt.params = make_params<float>(ckpt.model);

    const std::uint32_t count = get_u32(in);
    std::vector<std::pair<std::string, Tensor<float>>> loaded;
    for (std::uint32_t i = 0; i < count; ++i) {
        const std::uint16_t name_len = get_u16(in);
        std::string name(name_len, '\0');
        if (!get_bytes(in, name.data(), name_len)) fail("FormatError", "truncated tensor name");
        unsigned char rank;
        if (!get_bytes(in, &rank, 1)) fail("FormatError", "truncated tensor rank");
        std::vector<int> shape(rank);
        for (unsigned char r = 0; r < rank; ++r) shape[r] = static_cast<int>(get_u32(in));
        Tensor<float> t(shape);
        for (std::int64_t j = 0; j < t.size(); ++j) {
            const std::uint32_t bits = get_u32(in);
            float v;
            std::memcpy(&v, &bits, 4);
            t.v[j] = v;
        }
        loaded.emplace_back(std::move(name), std::move(t));
    }

    visit_params(ckpt.params, [&loaded, &path](const std::string& name, Tensor<float>& t, bool) {
        for (auto& [lname, lt] : loaded) {
            if (lname != name) continue;
            if (lt.shape != t.shape) {
                fail("ShapeMismatch", "tensor " + name + " shape mismatch vs config in " + path);
            }
            t = lt;
            return;
        }
        fail("FormatError", "missing tensor " + name + " in " + path);
    });
    return ckpt;
}

}  // namespace stmem
