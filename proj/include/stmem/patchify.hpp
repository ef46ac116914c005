#pragma once

#include <cstdint>
#include <utility>
#include <vector>

#include "stmem/record.hpp"

namespace stmem {

enum class PatchMode { Temporal, Spatial, SpatioTemporal };

const char* patch_mode_name(PatchMode mode);
PatchMode patch_mode_from_name(const std::string& name);

// Patch layouts (n = floor(T/p), trailing remainder discarded):
//   SpatioTemporal: L*n patches of length p        (lead-major)
//   Temporal:       n patches of length L*p        (lead-major concat per step)
//   Spatial:        L patches of length n*p
struct PatchGrid {
    PatchMode mode = PatchMode::SpatioTemporal;
    int patch_size = 0;       // p
    int patches_per_lead = 0; // n
    int num_leads = 0;        // L
    std::vector<std::string> leads;
    double sample_rate = 0.0;
    std::vector<double> patches;

    int num_patches() const;
    int patch_len() const;
    const double* patch_ptr(int index) const {
        return patches.data() + static_cast<std::size_t>(index) * patch_len();
    }
    // spatio-temporal accessor: patch of (lead l, temporal index t)
    const double* st_patch(int l, int t) const {
        return patch_ptr(l * patches_per_lead + t);
    }
    void validate() const;  // Error("MetadataError") on inconsistency
};

PatchGrid patchify(const EcgRecord& record, PatchMode mode, int patch_size);
EcgRecord unpatchify(const PatchGrid& grid);

// Random mask over the L x n spatio-temporal patch positions.
struct MaskPlan {
    std::vector<std::pair<int, int>> masked;  // (lead, t), sorted lead-major
    double ratio = 0.0;
    std::uint64_t seed = 0;

    bool is_masked(int lead, int t) const;
    std::size_t count() const { return masked.size(); }
};

// exactly round_half_even(L*n*ratio) positions, uniform without replacement
MaskPlan plan_mask(int num_leads, int patches_per_lead, double ratio, std::uint64_t seed);

// Random Lead Masking: each lead zero-filled independently with probability
// prob; a draw that would mask every lead is redrawn.
EcgRecord random_lead_mask(const EcgRecord& record, double prob, std::uint64_t seed);

int round_half_even(double x);

}  // namespace stmem
