#include "stmem/config.hpp"

#include <charconv>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <sstream>
#include <vector>

namespace stmem {

namespace {

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

std::string format_real(double v) {
    char buf[64];
    const auto res = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, res.ptr);  // shortest round-trip form
}

double parse_real(const std::string& key, const std::string& value) {
    char* end = nullptr;
    const double v = std::strtod(value.c_str(), &end);
    if (end == value.c_str() || *end != '\0') {
        fail("TypeMismatch", key + " expects a real, got '" + value + "'");
    }
    return v;
}

long long parse_int(const std::string& key, const std::string& value) {
    char* end = nullptr;
    const long long v = std::strtoll(value.c_str(), &end, 10);
    if (end == value.c_str() || *end != '\0') {
        fail("TypeMismatch", key + " expects an integer, got '" + value + "'");
    }
    return v;
}

bool parse_bool(const std::string& key, const std::string& value) {
    if (value == "true" || value == "1") return true;
    if (value == "false" || value == "0") return false;
    fail("TypeMismatch", key + " expects true/false, got '" + value + "'");
}

std::vector<std::string> split_list(const std::string& value) {
    std::vector<std::string> out;
    std::stringstream ss(value);
    std::string item;
    while (std::getline(ss, item, ',')) {
        const std::string t = trim(item);
        if (!t.empty()) out.push_back(t);
    }
    return out;
}

std::string join_list(const std::vector<std::string>& items) {
    std::string out;
    for (std::size_t i = 0; i < items.size(); ++i) {
        if (i > 0) out += ",";
        out += items[i];
    }
    return out;
}

struct KeyDef {
    std::string name;
    bool in_checkpoint;
    std::function<void(RunConfig&, const std::string&)> set;
    std::function<std::string(const RunConfig&)> get;
};

void check_range(const std::string& key, double v, double lo, double hi, bool lo_open = false,
                 bool hi_open = false) {
    const bool ok = (lo_open ? v > lo : v >= lo) && (hi_open ? v < hi : v <= hi);
    if (!ok) fail("RangeError", key + " = " + format_real(v) + " outside valid range");
}

const std::vector<KeyDef>& schema() {
    static const std::vector<KeyDef> defs = [] {
        std::vector<KeyDef> d;
        auto add_int = [&d](const std::string& name, bool ckpt, int RunConfig::* field, int lo,
                            int hi) {
            d.push_back({name, ckpt,
                         [name, field, lo, hi](RunConfig& c, const std::string& v) {
                             const long long x = parse_int(name, v);
                             check_range(name, static_cast<double>(x), lo, hi);
                             c.*field = static_cast<int>(x);
                         },
                         [field](const RunConfig& c) { return std::to_string(c.*field); }});
        };
        auto add_real = [&d](const std::string& name, bool ckpt, double RunConfig::* field,
                             double lo, double hi, bool lo_open = false, bool hi_open = false) {
            d.push_back({name, ckpt,
                         [name, field, lo, hi, lo_open, hi_open](RunConfig& c, const std::string& v) {
                             const double x = parse_real(name, v);
                             check_range(name, x, lo, hi, lo_open, hi_open);
                             c.*field = x;
                         },
                         [field](const RunConfig& c) { return format_real(c.*field); }});
        };
        auto add_str = [&d](const std::string& name, bool ckpt, std::string RunConfig::* field) {
            d.push_back({name, ckpt,
                         [field](RunConfig& c, const std::string& v) { c.*field = v; },
                         [field](const RunConfig& c) { return c.*field; }});
        };

        // --- model ---
        auto add_mint = [&d](const std::string& name, int ModelConfig::* field, int lo, int hi) {
            d.push_back({name, true,
                         [name, field, lo, hi](RunConfig& c, const std::string& v) {
                             const long long x = parse_int(name, v);
                             check_range(name, static_cast<double>(x), lo, hi);
                             c.model.*field = static_cast<int>(x);
                         },
                         [field](const RunConfig& c) { return std::to_string(c.model.*field); }});
        };
        auto add_mbool = [&d](const std::string& name, bool ModelConfig::* field) {
            d.push_back({name, true,
                         [name, field](RunConfig& c, const std::string& v) {
                             c.model.*field = parse_bool(name, v);
                         },
                         [field](const RunConfig& c) {
                             return std::string(c.model.*field ? "true" : "false");
                         }});
        };
        auto add_mlist = [&d](const std::string& name,
                              std::vector<std::string> ModelConfig::* field) {
            d.push_back({name, true,
                         [field](RunConfig& c, const std::string& v) { c.model.*field = split_list(v); },
                         [field](const RunConfig& c) { return join_list(c.model.*field); }});
        };
        add_mint("embed_dim", &ModelConfig::embed_dim, 2, 1 << 14);
        add_mint("encoder_depth", &ModelConfig::encoder_depth, 1, 256);
        add_mint("encoder_heads", &ModelConfig::encoder_heads, 1, 256);
        add_mint("mlp_ratio", &ModelConfig::mlp_ratio, 1, 16);
        add_mint("decoder_dim", &ModelConfig::decoder_dim, 2, 1 << 14);
        add_mint("decoder_depth", &ModelConfig::decoder_depth, 1, 256);
        add_mint("decoder_heads", &ModelConfig::decoder_heads, 1, 256);
        add_mint("patch_size", &ModelConfig::patch_size, 1, 1 << 16);
        add_mint("max_leads", &ModelConfig::max_leads, 1, 1 << 10);
        add_mint("max_patches_per_lead", &ModelConfig::max_patches_per_lead, 1, 1 << 16);
        add_mbool("use_sep", &ModelConfig::use_sep);
        add_mbool("use_lead_embedding", &ModelConfig::use_lead_embedding);
        add_mint("num_classes", &ModelConfig::num_classes, 0, 1 << 16);
        add_mlist("lead_names", &ModelConfig::lead_names);
        add_mlist("active_leads", &ModelConfig::active_leads);
        add_mlist("label_names", &ModelConfig::label_names);

        // --- training ---
        d.push_back({"mode", true,
                     [](RunConfig& c, const std::string& v) {
                         c.train.mode = train_mode_from_name(v);
                     },
                     [](const RunConfig& c) { return std::string(train_mode_name(c.train.mode)); }});
        auto add_treal = [&d](const std::string& name, double TrainConfig::* field, double lo,
                              double hi, bool lo_open = false, bool hi_open = false) {
            d.push_back({name, true,
                         [name, field, lo, hi, lo_open, hi_open](RunConfig& c, const std::string& v) {
                             const double x = parse_real(name, v);
                             check_range(name, x, lo, hi, lo_open, hi_open);
                             c.train.*field = x;
                         },
                         [field](const RunConfig& c) { return format_real(c.train.*field); }});
        };
        auto add_tint = [&d](const std::string& name, int TrainConfig::* field, int lo, int hi) {
            d.push_back({name, true,
                         [name, field, lo, hi](RunConfig& c, const std::string& v) {
                             const long long x = parse_int(name, v);
                             check_range(name, static_cast<double>(x), lo, hi);
                             c.train.*field = static_cast<int>(x);
                         },
                         [field](const RunConfig& c) { return std::to_string(c.train.*field); }});
        };
        add_treal("base_lr", &TrainConfig::base_lr, 0.0, 1e6, /*lo_open=*/true);
        add_tint("batch_size", &TrainConfig::batch_size, 1, 1 << 20);
        add_tint("epochs", &TrainConfig::epochs, 1, 1 << 20);
        add_treal("warmup_epochs", &TrainConfig::warmup_epochs, 0.0, 1e9);
        add_treal("weight_decay", &TrainConfig::weight_decay, 0.0, 10.0);
        add_treal("beta1", &TrainConfig::beta1, 0.0, 1.0, false, /*hi_open=*/true);
        add_treal("beta2", &TrainConfig::beta2, 0.0, 1.0, false, /*hi_open=*/true);
        add_treal("eps", &TrainConfig::eps, 0.0, 1.0, /*lo_open=*/true);
        add_treal("mask_ratio", &TrainConfig::mask_ratio, 0.0, 1.0);
        add_treal("rlm_prob", &TrainConfig::rlm_prob, 0.0, 1.0, false, /*hi_open=*/true);
        d.push_back({"seed", true,
                     [](RunConfig& c, const std::string& v) {
                         char* end = nullptr;
                         c.train.seed = std::strtoull(v.c_str(), &end, 10);
                         if (end == v.c_str() || *end != '\0') {
                             fail("TypeMismatch", "seed expects an unsigned integer");
                         }
                     },
                     [](const RunConfig& c) { return std::to_string(c.train.seed); }});
        add_tint("eval_every", &TrainConfig::eval_every, 1, 1 << 20);

        // --- preprocessing ---
        add_real("target_hz", false, &RunConfig::target_hz, 0.0, 1e6, true);
        add_real("bandpass_lo", false, &RunConfig::bandpass_lo, 0.0, 1e6, true);
        add_real("bandpass_hi", false, &RunConfig::bandpass_hi, 0.0, 1e6, true);
        add_real("segment_seconds", false, &RunConfig::segment_seconds, 0.0, 1e6, true);
        add_real("csv_sample_rate", false, &RunConfig::csv_sample_rate, 0.0, 1e6, true);

        // --- synthetic corpus ---
        add_int("synth_records", false, &RunConfig::synth_records, 1, 1 << 20);
        add_int("synth_classes", false, &RunConfig::synth_classes, 1, 1 << 10);
        add_real("synth_duration_s", false, &RunConfig::synth_duration_s, 0.0, 1e6, true);
        add_real("synth_sample_rate", false, &RunConfig::synth_sample_rate, 0.0, 1e6, true);
        add_real("synth_heart_rate_bpm", false, &RunConfig::synth_heart_rate_bpm, 0.0, 1e4, true);
        add_real("synth_noise_std", false, &RunConfig::synth_noise_std, 0.0, 1e4);

        // --- paths ---
        add_str("data_manifest", false, &RunConfig::data_manifest);
        add_str("train_manifest", false, &RunConfig::train_manifest);
        add_str("valid_manifest", false, &RunConfig::valid_manifest);
        add_str("test_manifest", false, &RunConfig::test_manifest);
        add_str("checkpoint", false, &RunConfig::checkpoint);
        add_str("init_checkpoint", false, &RunConfig::init_checkpoint);
        add_str("out_dir", false, &RunConfig::out_dir);
        add_str("embeddings_csv", false, &RunConfig::embeddings_csv);
        add_str("record_path", false, &RunConfig::record_path);

        // --- attention query ---
        add_str("query_lead", false, &RunConfig::query_lead);
        add_int("query_t", false, &RunConfig::query_t, 0, 1 << 20);
        return d;
    }();
    return defs;
}

const KeyDef* find_key(const std::string& name) {
    for (const KeyDef& def : schema()) {
        if (def.name == name) return &def;
    }
    return nullptr;
}

}  // namespace

RunConfig parse_config_text(const std::string& text) {
    RunConfig cfg;
    std::stringstream ss(text);
    std::string line;
    int lineno = 0;
    while (std::getline(ss, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) {
            fail("ParseError", "line " + std::to_string(lineno) + ": expected key = value");
        }
        const std::string key = trim(line.substr(0, eq));
        const std::string value = trim(line.substr(eq + 1));
        const KeyDef* def = find_key(key);
        if (def == nullptr) fail("UnknownKey", "unknown config key '" + key + "'");
        if (cfg.explicit_keys.count(key) > 0) fail("DuplicateKey", "duplicate config key '" + key + "'");
        def->set(cfg, value);
        cfg.explicit_keys.insert(key);
    }
    return cfg;
}

RunConfig parse_config_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) fail("IoError", "cannot open config " + path);
    std::stringstream buf;
    buf << in.rdbuf();
    return parse_config_text(buf.str());
}

std::string canonical_config_text(const RunConfig& config, bool checkpoint_only) {
    std::string out;
    for (const KeyDef& def : schema()) {
        if (checkpoint_only && !def.in_checkpoint) continue;
        out += def.name;
        out += " = ";
        out += def.get(config);
        out += "\n";
    }
    return out;
}

}  // namespace stmem
