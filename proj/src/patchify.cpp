#include "stmem/patchify.hpp"

#include <algorithm>
#include <cmath>

#include "stmem/rng.hpp"

namespace stmem {

const char* patch_mode_name(PatchMode mode) {
    switch (mode) {
        case PatchMode::Temporal: return "temporal";
        case PatchMode::Spatial: return "spatial";
        case PatchMode::SpatioTemporal: return "spatio-temporal";
    }
    return "?";
}

PatchMode patch_mode_from_name(const std::string& name) {
    if (name == "temporal") return PatchMode::Temporal;
    if (name == "spatial") return PatchMode::Spatial;
    if (name == "spatio-temporal" || name == "spatiotemporal") return PatchMode::SpatioTemporal;
    fail("InvalidArgument", "unknown patch mode '" + name + "'");
}

int PatchGrid::num_patches() const {
    switch (mode) {
        case PatchMode::Temporal: return patches_per_lead;
        case PatchMode::Spatial: return num_leads;
        case PatchMode::SpatioTemporal: return num_leads * patches_per_lead;
    }
    return 0;
}

int PatchGrid::patch_len() const {
    switch (mode) {
        case PatchMode::Temporal: return num_leads * patch_size;
        case PatchMode::Spatial: return patches_per_lead * patch_size;
        case PatchMode::SpatioTemporal: return patch_size;
    }
    return 0;
}

void PatchGrid::validate() const {
    if (num_leads < 1 || patches_per_lead < 1 || patch_size < 1) {
        fail("MetadataError", "non-positive grid dimensions");
    }
    if (static_cast<int>(leads.size()) != num_leads) fail("MetadataError", "lead name count != L");
    const std::size_t expect =
        static_cast<std::size_t>(num_patches()) * static_cast<std::size_t>(patch_len());
    if (patches.size() != expect) {
        fail("MetadataError", "patch element count " + std::to_string(patches.size()) +
                                  " != declared " + std::to_string(expect));
    }
}

PatchGrid patchify(const EcgRecord& record, PatchMode mode, int patch_size) {
    record.validate();
    if (patch_size < 1) fail("InvalidArgument", "patch size must be >= 1");
    if (record.num_samples < patch_size) {
        fail("PatchTooLarge", "T=" + std::to_string(record.num_samples) + " < p=" +
                                  std::to_string(patch_size));
    }
    const int n = record.num_samples / patch_size;  // trailing remainder discarded
    const int L = record.num_leads;
    const int p = patch_size;

    PatchGrid grid;
    grid.mode = mode;
    grid.patch_size = p;
    grid.patches_per_lead = n;
    grid.num_leads = L;
    grid.leads = record.leads;
    grid.sample_rate = record.sample_rate;
    grid.patches.resize(static_cast<std::size_t>(L) * n * p);

    switch (mode) {
        case PatchMode::SpatioTemporal:
            for (int l = 0; l < L; ++l) {
                for (int t = 0; t < n; ++t) {
                    const double* src = record.lead_ptr(l) + static_cast<std::size_t>(t) * p;
                    std::copy(src, src + p,
                              grid.patches.begin() + (static_cast<std::size_t>(l) * n + t) * p);
                }
            }
            break;
        case PatchMode::Temporal:
            for (int t = 0; t < n; ++t) {
                for (int l = 0; l < L; ++l) {
                    const double* src = record.lead_ptr(l) + static_cast<std::size_t>(t) * p;
                    std::copy(src, src + p,
                              grid.patches.begin() +
                                  (static_cast<std::size_t>(t) * L + l) * p);
                }
            }
            break;
        case PatchMode::Spatial:
            for (int l = 0; l < L; ++l) {
                const double* src = record.lead_ptr(l);
                std::copy(src, src + static_cast<std::size_t>(n) * p,
                          grid.patches.begin() + static_cast<std::size_t>(l) * n * p);
            }
            break;
    }
    return grid;
}

EcgRecord unpatchify(const PatchGrid& grid) {
    grid.validate();
    const int L = grid.num_leads;
    const int n = grid.patches_per_lead;
    const int p = grid.patch_size;
    EcgRecord rec = make_record(L, n * p, grid.sample_rate, grid.leads);

    switch (grid.mode) {
        case PatchMode::SpatioTemporal:
            for (int l = 0; l < L; ++l) {
                for (int t = 0; t < n; ++t) {
                    const double* src = grid.st_patch(l, t);
                    std::copy(src, src + p, rec.lead_ptr(l) + static_cast<std::size_t>(t) * p);
                }
            }
            break;
        case PatchMode::Temporal:
            for (int t = 0; t < n; ++t) {
                for (int l = 0; l < L; ++l) {
                    const double* src = grid.patch_ptr(t) + static_cast<std::size_t>(l) * p;
                    std::copy(src, src + p, rec.lead_ptr(l) + static_cast<std::size_t>(t) * p);
                }
            }
            break;
        case PatchMode::Spatial:
            for (int l = 0; l < L; ++l) {
                const double* src = grid.patch_ptr(l);
                std::copy(src, src + static_cast<std::size_t>(n) * p, rec.lead_ptr(l));
            }
            break;
    }
    return rec;
}

int round_half_even(double x) {
    const double fl = std::floor(x);
    const double frac = x - fl;
    if (frac > 0.5) return static_cast<int>(fl) + 1;
    if (frac < 0.5) return static_cast<int>(fl);
    const long long i = static_cast<long long>(fl);
    return static_cast<int>(i % 2 == 0 ? i : i + 1);
}

bool MaskPlan::is_masked(int lead, int t) const {
    return std::binary_search(masked.begin(), masked.end(), std::make_pair(lead, t));
}

MaskPlan plan_mask(int num_leads, int patches_per_lead, double ratio, std::uint64_t seed) {
    if (!(ratio >= 0.0 && ratio <= 1.0)) fail("RangeError", "mask ratio outside [0, 1]");
    const std::int64_t total = static_cast<std::int64_t>(num_leads) * patches_per_lead;
    if (total < 1) fail("InvalidArgument", "L*n must be >= 1");

    const int k = round_half_even(static_cast<double>(total) * ratio);

    // partial Fisher-Yates: first k entries are a uniform sample w/o replacement
    std::vector<std::int64_t> idx(total);
    for (std::int64_t i = 0; i < total; ++i) idx[i] = i;
    Rng rng(seed);
    for (int i = 0; i < k; ++i) {
        const std::int64_t j = i + static_cast<std::int64_t>(rng.uniform_int(total - i));
        std::swap(idx[i], idx[j]);
    }

    MaskPlan plan;
    plan.ratio = ratio;
    plan.seed = seed;
    plan.masked.reserve(k);
    for (int i = 0; i < k; ++i) {
        plan.masked.emplace_back(static_cast<int>(idx[i] / patches_per_lead),
                                 static_cast<int>(idx[i] % patches_per_lead));
    }
    std::sort(plan.masked.begin(), plan.masked.end());
    return plan;
}

EcgRecord random_lead_mask(const EcgRecord& record, double prob, std::uint64_t seed) {
    record.validate();
    if (!(prob >= 0.0 && prob < 1.0)) {
        fail("InvalidProbability", "lead mask probability must be in [0, 1)");
    }
    Rng rng(seed);
    std::vector<bool> masked(record.num_leads, false);
    for (int attempt = 0; attempt < 100000; ++attempt) {
        int surviving = 0;
        for (int l = 0; l < record.num_leads; ++l) {
            masked[l] = rng.uniform() < prob;
            if (!masked[l]) ++surviving;
        }
        if (surviving > 0) break;  // redraw when everything got masked
    }
    EcgRecord out = record;
    for (int l = 0; l < record.num_leads; ++l) {
        if (masked[l]) std::fill_n(out.lead_ptr(l), out.num_samples, 0.0);
    }
    return out;
}

}  // namespace stmem
