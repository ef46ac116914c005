#include "stmem/signal.hpp"

#include <algorithm>
#include <cmath>
#include <complex>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>

#include <omp.h>

#include "stmem/kernels.hpp"
#include "stmem/rng.hpp"

namespace stmem {

namespace {

bool finite_all(const std::vector<double>& v) {
    for (double x : v) {
        if (!std::isfinite(x)) return false;
    }
    return true;
}

// ---------------------------------------------------------------------------
// Butterworth bandpass design
// ---------------------------------------------------------------------------

using cplx = std::complex<double>;

// expand monic polynomial from roots; returns real coefficients, highest power
// first (roots come in conjugate pairs)
std::vector<double> poly_from_roots(const std::vector<cplx>& roots) {
    std::vector<cplx> c = {cplx(1.0, 0.0)};
    for (const cplx& r : roots) {
        std::vector<cplx> next(c.size() + 1, cplx(0.0, 0.0));
        for (std::size_t i = 0; i < c.size(); ++i) {
            next[i] += c[i];
            next[i + 1] -= c[i] * r;
        }
        c = std::move(next);
    }
    std::vector<double> out(c.size());
    for (std::size_t i = 0; i < c.size(); ++i) out[i] = c[i].real();
    return out;
}

cplx eval_poly(const std::vector<double>& coeffs, cplx z) {
    cplx acc(0.0, 0.0);
    for (double c : coeffs) acc = acc * z + c;
    return acc;
}

// 4x4-ish dense solve, partial pivoting
std::vector<double> solve_linear(std::vector<double> A, std::vector<double> rhs, int n) {
    for (int col = 0; col < n; ++col) {
        int piv = col;
        for (int r = col + 1; r < n; ++r) {
            if (std::fabs(A[r * n + col]) > std::fabs(A[piv * n + col])) piv = r;
        }
        if (A[piv * n + col] == 0.0) fail("FilterDesign", "singular zi system");
        if (piv != col) {
            for (int c = 0; c < n; ++c) std::swap(A[col * n + c], A[piv * n + c]);
            std::swap(rhs[col], rhs[piv]);
        }
        const double inv = 1.0 / A[col * n + col];
        for (int r = col + 1; r < n; ++r) {
            const double f = A[r * n + col] * inv;
            if (f == 0.0) continue;
            for (int c = col; c < n; ++c) A[r * n + c] -= f * A[col * n + c];
            rhs[r] -= f * rhs[col];
        }
    }
    std::vector<double> x(n, 0.0);
    for (int r = n - 1; r >= 0; --r) {
        double s = rhs[r];
        for (int c = r + 1; c < n; ++c) s -= A[r * n + c] * x[c];
        x[r] = s / A[r * n + r];
    }
    return x;
}

// steady-state initial filter state for a unit step (lfilter_zi construction)
std::vector<double> step_initial_state(const FilterCoeffs& f) {
    const int n = static_cast<int>(f.a.size()) - 1;
    std::vector<double> IminusA(n * n, 0.0);
    for (int i = 0; i < n; ++i) {
        for (int j = 0; j < n; ++j) {
            // A = transposed companion matrix of a
            double aij = 0.0;
            if (j == 0) aij = -f.a[i + 1];
            if (i + 1 == j) aij = 1.0;
            // careful: companion(a) has first ROW -a[1:]; transposed has first COLUMN
            IminusA[i * n + j] = (i == j ? 1.0 : 0.0) - aij;
        }
    }
    std::vector<double> B(n);
    for (int i = 0; i < n; ++i) B[i] = f.b[i + 1] - f.a[i + 1] * f.b[0];
    return solve_linear(std::move(IminusA), std::move(B), n);
}

// direct form II transposed
void lfilter(const FilterCoeffs& f, const double* x, double* y, std::size_t len,
             std::vector<double> state) {
    const int order = static_cast<int>(f.a.size()) - 1;
    for (std::size_t i = 0; i < len; ++i) {
        const double xi = x[i];
        const double yi = f.b[0] * xi + state[0];
        for (int k = 0; k < order - 1; ++k) {
            state[k] = f.b[k + 1] * xi - f.a[k + 1] * yi + state[k + 1];
        }
        state[order - 1] = f.b[order] * xi - f.a[order] * yi;
        y[i] = yi;
    }
}

struct ZiCache {
    FilterCoeffs coeffs;
    std::vector<double> zi;
};

}  // namespace

FilterCoeffs butter_bandpass(double lo_hz, double hi_hz, double sample_rate) {
    if (!(lo_hz > 0.0) || !(lo_hz < hi_hz)) fail("InvalidBand", "need 0 < lo < hi");
    if (!(hi_hz < sample_rate / 2.0)) fail("InvalidBand", "hi edge at or above Nyquist");

    const double fs2 = 2.0 * sample_rate;
    const double wl = fs2 * std::tan(M_PI * lo_hz / sample_rate);
    const double wh = fs2 * std::tan(M_PI * hi_hz / sample_rate);
    const double w0 = std::sqrt(wl * wh);
    const double bw = wh - wl;

    // order-2 prototype poles, then the lowpass->bandpass substitution doubles
    // them: s^2 - p*bw*s + w0^2 = 0
    const cplx proto[2] = {cplx(-M_SQRT1_2, M_SQRT1_2), cplx(-M_SQRT1_2, -M_SQRT1_2)};
    std::vector<cplx> zpoles;
    for (const cplx& p : proto) {
        const cplx pb = p * bw;
        const cplx disc = std::sqrt(pb * pb - 4.0 * w0 * w0);
        for (const cplx& s : {(pb + disc) / 2.0, (pb - disc) / 2.0}) {
            zpoles.push_back((fs2 + s) / (fs2 - s));  // bilinear
        }
    }

    FilterCoeffs f;
    f.a = poly_from_roots(zpoles);
    f.b = {1.0, 0.0, -2.0, 0.0, 1.0};  // (z-1)^2 (z+1)^2

    // unit gain at the digital image of the analog center frequency
    const double theta0 = 2.0 * std::atan(w0 / fs2);
    const cplx z0 = std::polar(1.0, theta0);
    // evaluate with z^4 scaling cancelled between num and den
    const double mag = std::abs(eval_poly(f.b, z0) / eval_poly(f.a, z0));
    for (double& c : f.b) c /= mag;
    return f;
}

std::vector<double> filtfilt(const FilterCoeffs& f, const std::vector<double>& x) {
    const int order = static_cast<int>(f.a.size()) - 1;
    const std::size_t n = x.size();
    if (n < 2) fail("InvalidSignal", "filtfilt needs at least 2 samples");
    const std::size_t padlen = std::min<std::size_t>(3 * order, n - 1);

    std::vector<double> ext(n + 2 * padlen);
    for (std::size_t i = 0; i < padlen; ++i) ext[i] = 2.0 * x[0] - x[padlen - i];
    std::copy(x.begin(), x.end(), ext.begin() + padlen);
    for (std::size_t i = 0; i < padlen; ++i) ext[n + padlen + i] = 2.0 * x[n - 1] - x[n - 2 - i];

    const std::vector<double> zi = step_initial_state(f);
    std::vector<double> work(ext.size());

    auto scaled = [&](double x0) {
        std::vector<double> s(zi.size());
        for (std::size_t i = 0; i < zi.size(); ++i) s[i] = zi[i] * x0;
        return s;
    };

    lfilter(f, ext.data(), work.data(), ext.size(), scaled(ext.front()));
    std::reverse(work.begin(), work.end());
    lfilter(f, work.data(), ext.data(), ext.size(), scaled(work.front()));
    std::reverse(ext.begin(), ext.end());

    return std::vector<double>(ext.begin() + padlen, ext.begin() + padlen + n);
}

// ---------------------------------------------------------------------------
// record model
// ---------------------------------------------------------------------------

bool is_limb_lead(const std::string& lead) {
    static const std::vector<std::string> limb = {"I", "II", "III", "aVR", "aVL", "aVF"};
    return std::find(limb.begin(), limb.end(), lead) != limb.end();
}

bool is_precordial_lead(const std::string& lead) {
    static const std::vector<std::string> prec = {"V1", "V2", "V3", "V4", "V5", "V6"};
    return std::find(prec.begin(), prec.end(), lead) != prec.end();
}

void EcgRecord::validate() const {
    if (num_leads < 1 || num_samples < 1) fail("InvalidRecord", "need L >= 1 and T >= 1");
    if (!(sample_rate > 0.0)) fail("InvalidRecord", "non-positive sample rate");
    if (static_cast<int>(leads.size()) != num_leads) fail("InvalidRecord", "lead name count != L");
    for (std::size_t i = 0; i < leads.size(); ++i) {
        for (std::size_t j = i + 1; j < leads.size(); ++j) {
            if (leads[i] == leads[j]) fail("InvalidRecord", "duplicate lead name " + leads[i]);
        }
    }
    if (signal.size() != static_cast<std::size_t>(num_leads) * num_samples) {
        fail("InvalidRecord", "signal size != L*T");
    }
    if (!finite_all(signal)) fail("InvalidRecord", "non-finite sample");
}

EcgRecord make_record(int num_leads, int num_samples, double sample_rate,
                      std::vector<std::string> leads) {
    EcgRecord r;
    r.num_leads = num_leads;
    r.num_samples = num_samples;
    r.sample_rate = sample_rate;
    if (leads.empty()) {
        for (int l = 0; l < num_leads; ++l) leads.push_back("ch" + std::to_string(l));
    }
    r.leads = std::move(leads);
    r.signal.assign(static_cast<std::size_t>(num_leads) * num_samples, 0.0);
    return r;
}

// ---------------------------------------------------------------------------
// preprocessing ops
// ---------------------------------------------------------------------------

namespace {

// best rational approximation with bounded denominator (continued fractions)
void rationalize(double x, long max_den, long* num, long* den) {
    long p0 = 0, q0 = 1, p1 = 1, q1 = 0;
    double v = x;
    for (int iter = 0; iter < 64; ++iter) {
        const double fa = std::floor(v);
        const long a = static_cast<long>(fa);
        const long p2 = a * p1 + p0;
        const long q2 = a * q1 + q0;
        if (q2 > max_den || p2 > max_den) break;
        p0 = p1;
        q0 = q1;
        p1 = p2;
        q1 = q2;
        const double frac = v - fa;
        if (frac < 1e-12) break;
        v = 1.0 / frac;
    }
    if (q1 == 0 || p1 == 0) {
        *num = 1;
        *den = 1;
        return;
    }
    *num = p1;
    *den = q1;
}

double blackman(double u) {  // u in [-1, 1]
    return 0.42 + 0.5 * std::cos(M_PI * u) + 0.08 * std::cos(2.0 * M_PI * u);
}

}  // namespace

EcgRecord resample(const EcgRecord& record, double target_hz) {
    record.validate();
    if (!(target_hz > 0.0)) fail("InvalidRate", "non-positive target rate");
    const std::int64_t t_out =
        std::llround(record.num_samples * target_hz / record.sample_rate);
    if (t_out < 1) fail("EmptyOutput", "resampled length would be 0");
    if (target_hz == record.sample_rate) return record;

    // output grid as an exact rational of the input grid: tau_j = j * M / U
    long up = 1, down = 1;
    rationalize(target_hz / record.sample_rate, 1L << 13, &up, &down);

    const double cutoff = 0.5 * std::min(1.0, static_cast<double>(up) / down);
    const int zero_crossings = 16;
    const double half_width = zero_crossings / (2.0 * cutoff);
    const int reach = static_cast<int>(std::ceil(half_width));

    EcgRecord out = make_record(record.num_leads, static_cast<int>(t_out), target_hz, record.leads);
    out.label = record.label;
    out.source_id = record.source_id;

    const int t_in = record.num_samples;
#pragma omp parallel for schedule(static) num_threads(num_threads()) if (record.num_leads > 1)
    for (int l = 0; l < record.num_leads; ++l) {
        const double* x = record.lead_ptr(l);
        double* y = out.lead_ptr(l);
        for (std::int64_t j = 0; j < t_out; ++j) {
            const std::int64_t scaled = j * down;
            const std::int64_t base = scaled / up;
            const double frac = static_cast<double>(scaled % up) / up;
            const double tau = static_cast<double>(base) + frac;
            const int k0 = std::max<std::int64_t>(0, base - reach);
            const int k1 = std::min<std::int64_t>(t_in - 1, base + reach + 1);
            double acc = 0.0, wsum = 0.0;
            for (int k = k0; k <= k1; ++k) {
                const double t = tau - k;
                if (std::fabs(t) > half_width) continue;
                const double arg = 2.0 * cutoff * t;
                const double sinc = arg == 0.0 ? 1.0 : std::sin(M_PI * arg) / (M_PI * arg);
                const double w = sinc * blackman(t / half_width);
                acc += x[k] * w;
                wsum += w;
            }
            y[j] = acc / wsum;  // per-tap renormalization: exact unity DC gain
        }
    }
    return out;
}

EcgRecord bandpass(const EcgRecord& record, double lo_hz, double hi_hz) {
    record.validate();
    const FilterCoeffs f = butter_bandpass(lo_hz, hi_hz, record.sample_rate);
    EcgRecord out = record;
#pragma omp parallel for schedule(static) num_threads(num_threads()) if (record.num_leads > 1)
    for (int l = 0; l < record.num_leads; ++l) {
        std::vector<double> lead(record.lead_ptr(l), record.lead_ptr(l) + record.num_samples);
        const std::vector<double> filtered = filtfilt(f, lead);
        std::copy(filtered.begin(), filtered.end(), out.lead_ptr(l));
    }
    return out;
}

EcgRecord znorm(const EcgRecord& record) {
    record.validate();
    EcgRecord out = record;
    const int t = record.num_samples;
    for (int l = 0; l < record.num_leads; ++l) {
        const double* x = record.lead_ptr(l);
        double mean = 0.0;
        for (int i = 0; i < t; ++i) mean += x[i];
        mean /= t;
        double var = 0.0;
        for (int i = 0; i < t; ++i) var += (x[i] - mean) * (x[i] - mean);
        var /= t;  // population variance
        const double sd = std::sqrt(var);
        if (sd <= 1e-8) {
            fail("NearConstantSignal", "lead " + record.leads[l] + " std <= 1e-8");
        }
        double* y = out.lead_ptr(l);
        for (int i = 0; i < t; ++i) y[i] = (x[i] - mean) / sd;
    }
    return out;
}

std::vector<EcgRecord> crop_segments(const EcgRecord& record, double seconds) {
    record.validate();
    if (!(seconds > 0.0)) fail("InvalidArgument", "segment length must be positive");
    const std::int64_t seg_len = std::llround(seconds * record.sample_rate);
    if (seg_len < 1) fail("InvalidArgument", "segment shorter than one sample");

    std::vector<EcgRecord> out;
    const std::int64_t count = record.num_samples / seg_len;
    for (std::int64_t s = 0; s < count; ++s) {
        EcgRecord seg =
            make_record(record.num_leads, static_cast<int>(seg_len), record.sample_rate, record.leads);
        seg.label = record.label;
        seg.source_id = record.source_id.empty()
                            ? ""
                            : record.source_id + "#" + std::to_string(s);
        for (int l = 0; l < record.num_leads; ++l) {
            const double* src = record.lead_ptr(l) + s * seg_len;
            std::copy(src, src + seg_len, seg.lead_ptr(l));
        }
        out.push_back(std::move(seg));
    }
    return out;
}

// ---------------------------------------------------------------------------
// synthetic generator
// ---------------------------------------------------------------------------

void SynthParams::validate() const {
    if (!(heart_rate_bpm > 0.0)) fail("InvalidParams", "heart rate must be positive");
    if (!(duration_s > 0.0)) fail("InvalidParams", "duration must be positive");
    if (!(sample_rate > 0.0)) fail("InvalidParams", "sample rate must be positive");
    for (double w : wave_widths_s) {
        if (!(w > 0.0)) fail("InvalidParams", "wave widths must be positive");
    }
    for (double a : wave_amplitudes) {
        if (!std::isfinite(a)) fail("InvalidParams", "non-finite amplitude");
    }
    if (noise_std < 0.0 || !std::isfinite(noise_std)) fail("InvalidParams", "bad noise std");
    if (!leads.empty() && !lead_mixing.empty() && leads.size() != lead_mixing.size()) {
        fail("InvalidParams", "lead_mixing size != lead count");
    }
    for (double g : lead_mixing) {
        if (!std::isfinite(g)) fail("InvalidParams", "non-finite mixing gain");
    }
}

EcgRecord synth_ecg(const SynthParams& params) {
    params.validate();
    const std::vector<std::string>& leads =
        params.leads.empty() ? standard_12_leads() : params.leads;
    const int L = static_cast<int>(leads.size());
    const int T = static_cast<int>(std::llround(params.duration_s * params.sample_rate));
    if (T < 1) fail("InvalidParams", "duration shorter than one sample");

    std::vector<double> gains = params.lead_mixing;
    if (gains.empty()) gains.assign(L, 1.0);

    // bump centers relative to the R peak, seconds
    static const double offsets[5] = {-0.160, -0.030, 0.0, 0.035, 0.300};

    const double period = 60.0 / params.heart_rate_bpm;
    std::vector<double> base(T, 0.0);
    for (double center = 0.0; center < params.duration_s; center += period) {
        for (int w = 0; w < 5; ++w) {
            const double c = center + offsets[w];
            const double width = params.wave_widths_s[w];
            const double amp = params.wave_amplitudes[w];
            // restrict to the bump's 6-sigma support
            const int lo = std::max(0, static_cast<int>((c - 6.0 * width) * params.sample_rate));
            const int hi =
                std::min(T - 1, static_cast<int>((c + 6.0 * width) * params.sample_rate) + 1);
            for (int i = lo; i <= hi; ++i) {
                const double t = i / params.sample_rate - c;
                base[i] += amp * std::exp(-0.5 * t * t / (width * width));
            }
        }
    }

    EcgRecord rec = make_record(L, T, params.sample_rate, leads);
    rec.source_id = "synth-" + std::to_string(params.seed);
    Rng rng(params.seed);
    for (int l = 0; l < L; ++l) {
        double* y = rec.lead_ptr(l);
        for (int i = 0; i < T; ++i) {
            const double noise = params.noise_std > 0.0 ? rng.normal(0.0, params.noise_std) : 0.0;
            y[i] = gains[l] * (base[i] + noise);
        }
    }
    return rec;
}

// ---------------------------------------------------------------------------
// record I/O (.stecg binary, CSV import)
// ---------------------------------------------------------------------------

namespace {

constexpr char kMagic[4] = {'S', 'T', 'E', 'C'};
constexpr std::uint32_t kVersion = 1;

void put_u16(std::ostream& os, std::uint16_t v) {
    const unsigned char b[2] = {static_cast<unsigned char>(v & 0xff),
                                static_cast<unsigned char>(v >> 8)};
    os.write(reinterpret_cast<const char*>(b), 2);
}

void put_u32(std::ostream& os, std::uint32_t v) {
    unsigned char b[4];
    for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
    os.write(reinterpret_cast<const char*>(b), 4);
}

void put_f32(std::ostream& os, float v) {
    std::uint32_t bits;
    std::memcpy(&bits, &v, 4);
    put_u32(os, bits);
}

bool get_bytes(std::istream& is, void* dst, std::size_t n) {
    is.read(static_cast<char*>(dst), static_cast<std::streamsize>(n));
    return static_cast<std::size_t>(is.gcount()) == n;
}

std::uint16_t get_u16(std::istream& is) {
    unsigned char b[2];
    if (!get_bytes(is, b, 2)) fail("FormatError", "truncated payload");
    return static_cast<std::uint16_t>(b[0] | (b[1] << 8));
}

std::uint32_t get_u32(std::istream& is) {
    unsigned char b[4];
    if (!get_bytes(is, b, 4)) fail("FormatError", "truncated payload");
    return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
           (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

float get_f32(std::istream& is) {
    const std::uint32_t bits = get_u32(is);
    float v;
    std::memcpy(&v, &bits, 4);
    return v;
}

bool ends_with(const std::string& s, const std::string& suffix) {
    return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

EcgRecord read_csv(const std::string& path) {
    std::ifstream in(path);
    if (!in) fail("IoError", "cannot open " + path);
    std::string line;
    double rate = 500.0;  // overridable with a "# sample_rate = X" comment
    std::vector<std::string> leads;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        if (line[0] == '#') {
            const auto eq = line.find('=');
            if (line.find("sample_rate") != std::string::npos && eq != std::string::npos) {
                rate = std::stod(line.substr(eq + 1));
            }
            continue;
        }
        std::stringstream ss(line);
        std::string cell;
        while (std::getline(ss, cell, ',')) {
            // trim
            const auto b = cell.find_first_not_of(" \t\r");
            const auto e = cell.find_last_not_of(" \t\r");
            leads.push_back(b == std::string::npos ? "" : cell.substr(b, e - b + 1));
        }
        break;
    }
    if (leads.empty()) fail("FormatError", "empty CSV header in " + path);

    const std::size_t L = leads.size();
    std::vector<std::vector<double>> columns(L);
    while (std::getline(in, line)) {
        if (line.empty() || line[0] == '#') continue;
        std::stringstream ss(line);
        std::string cell;
        std::size_t col = 0;
        while (std::getline(ss, cell, ',')) {
            if (col >= L) fail("FormatError", "row wider than header in " + path);
            try {
                columns[col].push_back(std::stod(cell));
            } catch (const std::exception&) {
                fail("FormatError", "non-numeric cell '" + cell + "' in " + path);
            }
            ++col;
        }
        if (col != L) fail("FormatError", "row narrower than header in " + path);
    }
    const std::size_t T = columns[0].size();
    if (T == 0) fail("FormatError", "CSV has no sample rows: " + path);

    EcgRecord rec = make_record(static_cast<int>(L), static_cast<int>(T), rate, leads);
    for (std::size_t l = 0; l < L; ++l) {
        std::copy(columns[l].begin(), columns[l].end(), rec.lead_ptr(static_cast<int>(l)));
    }
    rec.source_id = path;
    rec.validate();
    return rec;
}

}  // namespace

void write_record(const EcgRecord& record, const std::string& path) {
    record.validate();
    std::ofstream out(path, std::ios::binary);
    if (!out) fail("IoError", "cannot write " + path);
    out.write(kMagic, 4);
    put_u32(out, kVersion);
    put_u16(out, static_cast<std::uint16_t>(record.num_leads));
    put_u32(out, static_cast<std::uint32_t>(record.num_samples));
    put_f32(out, static_cast<float>(record.sample_rate));
    for (const std::string& name : record.leads) {
        if (name.size() > 255) fail("FormatError", "lead name too long: " + name);
        const unsigned char len = static_cast<unsigned char>(name.size());
        out.write(reinterpret_cast<const char*>(&len), 1);
        out.write(name.data(), static_cast<std::streamsize>(name.size()));
    }
    for (double v : record.signal) put_f32(out, static_cast<float>(v));
    if (!out) fail("IoError", "write failed: " + path);
}

EcgRecord read_record(const std::string& path) {
    if (ends_with(path, ".csv")) return read_csv(path);

    std::ifstream in(path, std::ios::binary);
    if (!in) fail("IoError", "cannot open " + path);
    char magic[4];
    if (!get_bytes(in, magic, 4) || std::memcmp(magic, kMagic, 4) != 0) {
        fail("FormatError", "bad magic in " + path);
    }
    const std::uint32_t version = get_u32(in);
    if (version != kVersion) {
        fail("FormatError", "unsupported version " + std::to_string(version) + " in " + path);
    }
    const int L = get_u16(in);
    const int T = static_cast<int>(get_u32(in));
    const float rate = get_f32(in);
    std::vector<std::string> leads;
    for (int l = 0; l < L; ++l) {
        unsigned char len;
        if (!get_bytes(in, &len, 1)) fail("FormatError", "truncated lead table in " + path);
        std::string name(len, '\0');
        if (len > 0 && !get_bytes(in, name.data(), len)) {
            fail("FormatError", "truncated lead table in " + path);
        }
        leads.push_back(name);
    }
    EcgRecord rec = make_record(L, T, rate, leads);
    for (double& v : rec.signal) {
        const float f = get_f32(in);
        if (std::isnan(f)) fail("FormatError", "NaN payload in " + path);
        v = f;
    }
    rec.source_id = path;
    rec.validate();
    return rec;
}

}  // namespace stmem
