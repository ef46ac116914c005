#pragma once

#include <set>
#include <string>

#include "stmem/model.hpp"
#include "stmem/train.hpp"

namespace stmem {

// Flat `key = value` configuration covering model, training, preprocessing
// and paths. Unknown or duplicate keys are rejected; serialization is
// schema-ordered and round-trip stable.
struct RunConfig {
    ModelConfig model;
    TrainConfig train;

    // preprocessing
    double target_hz = 250.0;
    double bandpass_lo = 0.67;
    double bandpass_hi = 40.0;
    double segment_seconds = 10.0;
    double csv_sample_rate = 500.0;

    // synthetic corpus generation
    int synth_records = 16;
    int synth_classes = 1;
    double synth_duration_s = 10.0;
    double synth_sample_rate = 250.0;
    double synth_heart_rate_bpm = 60.0;
    double synth_noise_std = 0.02;

    // paths
    std::string data_manifest;
    std::string train_manifest;
    std::string valid_manifest;
    std::string test_manifest;
    std::string checkpoint;
    std::string init_checkpoint;
    std::string out_dir = "out";
    std::string embeddings_csv;
    std::string record_path;

    // attention query
    std::string query_lead = "II";
    int query_t = 0;

    std::set<std::string> explicit_keys;  // keys that appeared in the source

    bool was_set(const std::string& key) const { return explicit_keys.count(key) > 0; }
};

// line-oriented `key = value` with '#' comments; empty input = all defaults
RunConfig parse_config_text(const std::string& text);
RunConfig parse_config_file(const std::string& path);

// schema-ordered serialization; checkpoint_only restricts to the
// ModelConfig + TrainConfig keys stored inside checkpoints
std::string canonical_config_text(const RunConfig& config, bool checkpoint_only = false);

}  // namespace stmem
