#include "stmem/model.hpp"

#include <algorithm>

namespace stmem {

void ModelConfig::validate() const {
    if (embed_dim < 2 || embed_dim % 2 != 0) fail("InvalidConfig", "embed_dim must be even, >= 2");
    if (encoder_heads < 1 || embed_dim % encoder_heads != 0) {
        fail("InvalidConfig", "embed_dim must be divisible by encoder_heads");
    }
    if (decoder_heads < 1 || decoder_dim % decoder_heads != 0) {
        fail("InvalidConfig", "decoder_dim must be divisible by decoder_heads");
    }
    if (decoder_dim < 2 || decoder_dim % 2 != 0) fail("InvalidConfig", "decoder_dim must be even");
    if (encoder_depth < 1 || decoder_depth < 1) fail("InvalidConfig", "depths must be >= 1");
    if (mlp_ratio < 1) fail("InvalidConfig", "mlp_ratio must be >= 1");
    if (patch_size < 1) fail("InvalidConfig", "patch_size must be >= 1");
    if (max_leads < 1) fail("InvalidConfig", "max_leads must be >= 1");
    if (max_patches_per_lead < 1) fail("InvalidConfig", "max_patches_per_lead must be >= 1");
    if (num_classes == 1) fail("InvalidConfig", "num_classes must be 0 or >= 2");
    if (static_cast<int>(lead_names.size()) != max_leads) {
        fail("InvalidConfig", "lead_names must list exactly max_leads names");
    }
    for (std::size_t i = 0; i < lead_names.size(); ++i) {
        for (std::size_t j = i + 1; j < lead_names.size(); ++j) {
            if (lead_names[i] == lead_names[j]) {
                fail("InvalidConfig", "duplicate lead name " + lead_names[i]);
            }
        }
    }
    for (const std::string& name : active_leads) {
        if (std::find(lead_names.begin(), lead_names.end(), name) == lead_names.end()) {
            fail("UnknownLead", "active lead " + name + " not in lead_names");
        }
    }
    if (num_classes >= 2 && !label_names.empty() &&
        static_cast<int>(label_names.size()) != num_classes) {
        fail("InvalidConfig", "label_names size != num_classes");
    }
}

int ModelConfig::lead_row(const std::string& name) const {
    if (!active_leads.empty() &&
        std::find(active_leads.begin(), active_leads.end(), name) == active_leads.end()) {
        fail("UnknownLead", "lead " + name + " outside the restricted lead set");
    }
    for (std::size_t i = 0; i < lead_names.size(); ++i) {
        if (lead_names[i] == name) return static_cast<int>(i);
    }
    fail("UnknownLead", "lead " + name + " has no embedding row");
}

ModelConfig restrict_leads(const ModelConfig& config, const std::vector<std::string>& subset) {
    if (subset.empty()) fail("EmptyLeadSubset", "lead restriction needs at least one lead");
    for (const std::string& name : subset) {
        if (std::find(config.lead_names.begin(), config.lead_names.end(), name) ==
            config.lead_names.end()) {
            fail("UnknownLead", "lead " + name + " has no embedding row");
        }
    }
    ModelConfig out = config;
    out.active_leads = subset;
    return out;
}

}  // namespace stmem
