#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "stmem/model.hpp"
#include "stmem/record.hpp"

namespace stmem {

enum class TrainMode { Pretrain, Finetune, LinearProbe };

const char* train_mode_name(TrainMode mode);
TrainMode train_mode_from_name(const std::string& name);

struct TrainConfig {
    TrainMode mode = TrainMode::Pretrain;
    double base_lr = 1e-3;
    int batch_size = 8;
    int epochs = 10;
    double warmup_epochs = 0.5;
    double weight_decay = 0.05;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double mask_ratio = 0.75;
    double rlm_prob = 0.0;  // 0 disables random lead masking
    std::uint64_t seed = 0;
    int eval_every = 1;

    void validate() const;
};

// linear warmup 0 -> base_lr over warmup_steps, then cosine decay to 0
double lr_at(std::int64_t step, std::int64_t total_steps, std::int64_t warmup_steps,
             double base_lr);

struct OptimizerState {
    std::vector<Tensor<float>> m, v;  // aligned with visit_params order
    std::int64_t t = 0;
};

OptimizerState make_optimizer_state(const ModelParams<float>& params);

// selects which tensors the optimizer touches; unselected tensors stay
// bit-identical (no decay, no moment update)
using TensorFilter = std::function<bool(const std::string&)>;

TensorFilter filter_for_mode(TrainMode mode);

// decoupled weight decay, then Adam with bias correction; throws
// Error("NaNGradient") before mutating anything when a gradient is non-finite
void adamw_step(ModelParams<float>& params, const ModelParams<float>& grads, OptimizerState& state,
                double lr, const TrainConfig& config, const TensorFilter& update = {});

struct MetricsRow {
    int epoch = 0;
    std::string split;
    double loss = 0.0;
    double lr = 0.0;
    bool has_classification = false;
    double accuracy = 0.0;
    double macro_f1 = 0.0;
    double auroc = 0.0;
};

struct TrainResult {
    ModelParams<float> params;
    std::vector<MetricsRow> metrics;
    double first_epoch_loss = 0.0;
    double last_epoch_loss = 0.0;
};

// Masked-autoencoding pretraining over fixed-length preprocessed records.
// Fully determined by (records, configs, seed): batch order, mask plans and
// the final parameters reproduce bit-for-bit.
TrainResult pretrain(const std::vector<EcgRecord>& records, const ModelConfig& model_config,
                     const TrainConfig& train_config,
                     const ModelParams<float>* initial = nullptr);

// Supervised fine-tuning / linear probing from pretrained parameters. Labels
// must lie in [0, num_classes). The decoder tensors are never touched; linear
// probing updates the classifier head only.
TrainResult finetune(const std::vector<EcgRecord>& train_records,
                     const std::vector<EcgRecord>& valid_records,
                     const ModelParams<float>& initial, const ModelConfig& model_config,
                     const TrainConfig& train_config);

// ---------------------------------------------------------------------------
// checkpoints
// ---------------------------------------------------------------------------

struct Checkpoint {
    ModelParams<float> params;
    ModelConfig model;
    TrainConfig train;
};

void save_checkpoint(const ModelParams<float>& params, const ModelConfig& model_config,
                     const TrainConfig& train_config, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

}  // namespace stmem
