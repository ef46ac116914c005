#pragma once

#include <string>
#include <vector>

#include "stmem/record.hpp"

namespace stmem {

// Butterworth bandpass transfer function (4 poles: order-2 lowpass prototype
// through the bandpass transform, bilinear with prewarping). b and a are the
// 5-tap numerator/denominator, a[0] == 1.
struct FilterCoeffs {
    std::vector<double> b;
    std::vector<double> a;
};

FilterCoeffs butter_bandpass(double lo_hz, double hi_hz, double sample_rate);

// Zero-phase forward-backward filtering with odd-reflect edge padding of
// 3x filter order and step-matched initial conditions.
std::vector<double> filtfilt(const FilterCoeffs& f, const std::vector<double>& x);

// Band-limited rational resampling: polyphase windowed-sinc interpolation with
// anti-alias cutoff min(f_in, f_out)/2. Output length round(T * target / input).
EcgRecord resample(const EcgRecord& record, double target_hz);

// Per-lead zero-phase bandpass; shape unchanged.
EcgRecord bandpass(const EcgRecord& record, double lo_hz, double hi_hz);

// Per-lead, per-record Z-normalization (population std). Throws
// Error("NearConstantSignal") when a lead's std <= 1e-8.
EcgRecord znorm(const EcgRecord& record);

// Non-overlapping segments of exactly seconds*sample_rate samples; the
// trailing remainder is discarded, records shorter than `seconds` yield an
// empty list. Label and source_id are inherited.
std::vector<EcgRecord> crop_segments(const EcgRecord& record, double seconds);

// Deterministic synthetic ECG (pure function of SynthParams).
EcgRecord synth_ecg(const SynthParams& params);

// .stecg binary and CSV import (dispatch on extension ".csv", else binary).
EcgRecord read_record(const std::string& path);
void write_record(const EcgRecord& record, const std::string& path);

}  // namespace stmem
