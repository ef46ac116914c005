#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "stmem/errors.hpp"

namespace stmem {

inline const std::vector<std::string>& standard_12_leads() {
    static const std::vector<std::string> leads = {"I",  "II", "III", "aVR", "aVL", "aVF",
                                                   "V1", "V2", "V3",  "V4",  "V5",  "V6"};
    return leads;
}

bool is_limb_lead(const std::string& lead);
bool is_precordial_lead(const std::string& lead);

// Multichannel ECG: L x T row-major samples in millivolts.
struct EcgRecord {
    std::vector<double> signal;      // L*T, row-major (lead-major)
    int num_leads = 0;               // L
    int num_samples = 0;             // T per lead
    double sample_rate = 0.0;        // Hz
    std::vector<std::string> leads;  // length L, unique names
    int label = -1;                  // class index, -1 = unlabeled
    std::string source_id;

    double* lead_ptr(int l) { return signal.data() + static_cast<std::size_t>(l) * num_samples; }
    const double* lead_ptr(int l) const {
        return signal.data() + static_cast<std::size_t>(l) * num_samples;
    }
    double duration_s() const { return num_samples / sample_rate; }

    // throws Error("InvalidRecord", ...) on violated invariants
    void validate() const;
};

EcgRecord make_record(int num_leads, int num_samples, double sample_rate,
                      std::vector<std::string> leads = {});

// Synthetic generator parameters. One beat is the sum of five Gaussian bumps
// (P, Q, R, S, T) repeated at heart-rate spacing; the per-lead gain scales the
// waveform and its additive noise together.
struct SynthParams {
    double heart_rate_bpm = 60.0;
    double duration_s = 10.0;
    double sample_rate = 250.0;
    double wave_amplitudes[5] = {0.15, -0.15, 1.0, -0.25, 0.35};  // P Q R S T, mV
    double wave_widths_s[5] = {0.025, 0.010, 0.011, 0.012, 0.040};
    std::vector<double> lead_mixing;  // one gain per lead
    std::vector<std::string> leads;   // defaults to standard 12 when empty
    double noise_std = 0.0;
    std::uint64_t seed = 0;

    void validate() const;
};

}  // namespace stmem
