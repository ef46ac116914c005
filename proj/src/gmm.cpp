#include "stmem/gmm.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "stmem/rng.hpp"
#include "stmem/signal.hpp"

namespace stmem {

namespace {

constexpr double kCovReg = 1e-6;
constexpr double kTol = 1e-6;
constexpr int kMaxIters = 500;
constexpr int kRestarts = 10;

// in-place lower Cholesky; returns false when not positive definite
bool cholesky(std::vector<double>& a, int d) {
    for (int i = 0; i < d; ++i) {
        for (int j = 0; j <= i; ++j) {
            double s = a[static_cast<std::size_t>(i) * d + j];
            for (int k = 0; k < j; ++k) {
                s -= a[static_cast<std::size_t>(i) * d + k] * a[static_cast<std::size_t>(j) * d + k];
            }
            if (i == j) {
                if (s <= 0.0) return false;
                a[static_cast<std::size_t>(i) * d + j] = std::sqrt(s);
            } else {
                a[static_cast<std::size_t>(i) * d + j] = s / a[static_cast<std::size_t>(j) * d + j];
            }
        }
        for (int j = i + 1; j < d; ++j) a[static_cast<std::size_t>(i) * d + j] = 0.0;
    }
    return true;
}

struct ComponentDist {
    std::vector<double> chol;  // lower factor of the covariance
    double log_norm = 0.0;     // -0.5*(d*log(2pi) + logdet)
};

ComponentDist prepare(const double* cov, int d) {
    ComponentDist c;
    c.chol.assign(cov, cov + static_cast<std::size_t>(d) * d);
    double reg = kCovReg;
    while (!cholesky(c.chol, d)) {
        // escalate the ridge until the factorization succeeds
        c.chol.assign(cov, cov + static_cast<std::size_t>(d) * d);
        for (int i = 0; i < d; ++i) c.chol[static_cast<std::size_t>(i) * d + i] += reg;
        reg *= 10.0;
        if (reg > 1e6) fail("InvalidPoints", "covariance cannot be regularized");
    }
    double logdet = 0.0;
    for (int i = 0; i < d; ++i) logdet += std::log(c.chol[static_cast<std::size_t>(i) * d + i]);
    c.log_norm = -0.5 * d * std::log(2.0 * M_PI) - logdet;
    return c;
}

double log_pdf(const ComponentDist& c, const double* mean, const double* x, int d,
               std::vector<double>& scratch) {
    scratch.resize(d);
    // solve L y = x - mean
    for (int i = 0; i < d; ++i) {
        double s = x[i] - mean[i];
        for (int k = 0; k < i; ++k) s -= c.chol[static_cast<std::size_t>(i) * d + k] * scratch[k];
        scratch[i] = s / c.chol[static_cast<std::size_t>(i) * d + i];
    }
    double quad = 0.0;
    for (int i = 0; i < d; ++i) quad += scratch[i] * scratch[i];
    return c.log_norm - 0.5 * quad;
}

std::vector<double> kmeanspp_means(const std::vector<double>& x, int n, int d, int k, Rng& rng) {
    std::vector<double> means(static_cast<std::size_t>(k) * d);
    const int first = static_cast<int>(rng.uniform_int(n));
    std::copy(x.begin() + static_cast<std::size_t>(first) * d,
              x.begin() + static_cast<std::size_t>(first) * d + d, means.begin());
    std::vector<double> dist2(n, std::numeric_limits<double>::max());
    for (int c = 1; c < k; ++c) {
        double total = 0.0;
        for (int i = 0; i < n; ++i) {
            double s = 0.0;
            const double* xi = x.data() + static_cast<std::size_t>(i) * d;
            const double* mu = means.data() + static_cast<std::size_t>(c - 1) * d;
            for (int j = 0; j < d; ++j) s += (xi[j] - mu[j]) * (xi[j] - mu[j]);
            dist2[i] = std::min(dist2[i], s);
            total += dist2[i];
        }
        int pick = 0;
        if (total > 0.0) {
            const double r = rng.uniform() * total;
            double acc = 0.0;
            for (int i = 0; i < n; ++i) {
                acc += dist2[i];
                if (acc >= r) {
                    pick = i;
                    break;
                }
            }
        } else {
            pick = static_cast<int>(rng.uniform_int(n));  // all points coincide
        }
        std::copy(x.begin() + static_cast<std::size_t>(pick) * d,
                  x.begin() + static_cast<std::size_t>(pick) * d + d,
                  means.begin() + static_cast<std::size_t>(c) * d);
    }
    return means;
}

GmmModel em_run(const std::vector<double>& x, int n, int d, int k, Rng& rng) {
    GmmModel m;
    m.num_components = k;
    m.dim = d;
    m.means = kmeanspp_means(x, n, d, k, rng);
    m.weights.assign(k, 1.0 / k);

    // shared initial covariance: global diagonal variance
    std::vector<double> gmean(d, 0.0);
    for (int i = 0; i < n; ++i) {
        for (int j = 0; j < d; ++j) gmean[j] += x[static_cast<std::size_t>(i) * d + j];
    }
    for (double& v : gmean) v /= n;
    std::vector<double> gvar(d, 0.0);
    for (int i = 0; i < n; ++i) {
        for (int j = 0; j < d; ++j) {
            const double dd = x[static_cast<std::size_t>(i) * d + j] - gmean[j];
            gvar[j] += dd * dd;
        }
    }
    for (double& v : gvar) v = v / n + kCovReg;
    m.covs.assign(static_cast<std::size_t>(k) * d * d, 0.0);
    for (int c = 0; c < k; ++c) {
        for (int j = 0; j < d; ++j) {
            m.covs[(static_cast<std::size_t>(c) * d + j) * d + j] = gvar[j];
        }
    }

    std::vector<double> resp(static_cast<std::size_t>(n) * k);
    std::vector<double> scratch;
    double prev_ll = -std::numeric_limits<double>::max();

    for (int iter = 0; iter < kMaxIters; ++iter) {
        // E step
        std::vector<ComponentDist> dists(k);
        for (int c = 0; c < k; ++c) dists[c] = prepare(m.cov(c), d);
        double ll = 0.0;
        for (int i = 0; i < n; ++i) {
            const double* xi = x.data() + static_cast<std::size_t>(i) * d;
            double mx = -std::numeric_limits<double>::max();
            for (int c = 0; c < k; ++c) {
                const double lp = std::log(m.weights[c]) + log_pdf(dists[c], m.mean(c), xi, d, scratch);
                resp[static_cast<std::size_t>(i) * k + c] = lp;
                mx = std::max(mx, lp);
            }
            double sum = 0.0;
            for (int c = 0; c < k; ++c) {
                sum += std::exp(resp[static_cast<std::size_t>(i) * k + c] - mx);
            }
            const double lse = mx + std::log(sum);
            ll += lse;
            for (int c = 0; c < k; ++c) {
                resp[static_cast<std::size_t>(i) * k + c] =
                    std::exp(resp[static_cast<std::size_t>(i) * k + c] - lse);
            }
        }
        m.log_likelihood = ll;
        if (ll - prev_ll < kTol && iter > 0) break;
        prev_ll = ll;

        // M step
        for (int c = 0; c < k; ++c) {
            double nk = 0.0;
            for (int i = 0; i < n; ++i) nk += resp[static_cast<std::size_t>(i) * k + c];
            double* mu = m.means.data() + static_cast<std::size_t>(c) * d;
            if (nk < 1e-10) {
                // collapsed component: re-seed on a random point
                const int pick = static_cast<int>(rng.uniform_int(n));
                std::copy(x.begin() + static_cast<std::size_t>(pick) * d,
                          x.begin() + static_cast<std::size_t>(pick) * d + d, mu);
                m.weights[c] = 1.0 / n;
                double* cov = m.covs.data() + static_cast<std::size_t>(c) * d * d;
                std::fill(cov, cov + static_cast<std::size_t>(d) * d, 0.0);
                for (int j = 0; j < d; ++j) cov[static_cast<std::size_t>(j) * d + j] = gvar[j];
                continue;
            }
            m.weights[c] = nk / n;
            std::fill(mu, mu + d, 0.0);
            for (int i = 0; i < n; ++i) {
                const double r = resp[static_cast<std::size_t>(i) * k + c];
                const double* xi = x.data() + static_cast<std::size_t>(i) * d;
                for (int j = 0; j < d; ++j) mu[j] += r * xi[j];
            }
            for (int j = 0; j < d; ++j) mu[j] /= nk;
            double* cov = m.covs.data() + static_cast<std::size_t>(c) * d * d;
            std::fill(cov, cov + static_cast<std::size_t>(d) * d, 0.0);
            for (int i = 0; i < n; ++i) {
                const double r = resp[static_cast<std::size_t>(i) * k + c];
                const double* xi = x.data() + static_cast<std::size_t>(i) * d;
                for (int a = 0; a < d; ++a) {
                    const double da = xi[a] - mu[a];
                    for (int b = 0; b <= a; ++b) {
                        cov[static_cast<std::size_t>(a) * d + b] += r * da * (xi[b] - mu[b]);
                    }
                }
            }
            for (int a = 0; a < d; ++a) {
                for (int b = 0; b <= a; ++b) {
                    const double v = cov[static_cast<std::size_t>(a) * d + b] / nk;
                    cov[static_cast<std::size_t>(a) * d + b] = v;
                    cov[static_cast<std::size_t>(b) * d + a] = v;
                }
                cov[static_cast<std::size_t>(a) * d + a] += kCovReg;
            }
        }
        // renormalize weights (guards the collapsed-component branch)
        double wsum = 0.0;
        for (double w : m.weights) wsum += w;
        for (double& w : m.weights) w /= wsum;
    }
    return m;
}

}  // namespace

GmmModel gmm_fit(const std::vector<double>& points, int n, int dim, int num_components,
                 std::uint64_t seed) {
    if (num_components < 1) fail("InvalidArgument", "need at least one component");
    if (n < num_components) fail("TooFewPoints", "N < K");
    if (points.size() != static_cast<std::size_t>(n) * dim) {
        fail("InvalidPoints", "point buffer size != N*d");
    }
    for (double v : points) {
        if (!std::isfinite(v)) fail("InvalidPoints", "non-finite coordinate");
    }

    GmmModel best;
    best.log_likelihood = -std::numeric_limits<double>::max();
    for (int r = 0; r < kRestarts; ++r) {
        Rng rng(mix_seed(seed, r));
        GmmModel m = em_run(points, n, dim, num_components, rng);
        if (m.log_likelihood > best.log_likelihood) best = std::move(m);
    }
    return best;
}

std::vector<int> gmm_assign(const GmmModel& model, const std::vector<double>& points, int n) {
    if (points.size() != static_cast<std::size_t>(n) * model.dim) {
        fail("InvalidPoints", "point buffer size != N*d");
    }
    std::vector<ComponentDist> dists(model.num_components);
    for (int c = 0; c < model.num_components; ++c) dists[c] = prepare(model.cov(c), model.dim);
    std::vector<int> out(n, 0);
    std::vector<double> scratch;
    for (int i = 0; i < n; ++i) {
        const double* xi = points.data() + static_cast<std::size_t>(i) * model.dim;
        double bestlp = -std::numeric_limits<double>::max();
        for (int c = 0; c < model.num_components; ++c) {
            const double lp =
                std::log(model.weights[c]) + log_pdf(dists[c], model.mean(c), xi, model.dim, scratch);
            if (lp > bestlp) {
                bestlp = lp;
                out[i] = c;
            }
        }
    }
    return out;
}

double lead_cluster_accuracy(const std::vector<LeadEmbeddingRow>& rows, const GmmModel& model) {
    if (model.num_components != 2) fail("InvalidArgument", "plane clustering expects K = 2");
    if (rows.empty()) fail("EmptyInput", "no embedding rows");
    std::vector<double> points;
    std::vector<char> is_limb(rows.size());
    for (std::size_t i = 0; i < rows.size(); ++i) {
        if (is_limb_lead(rows[i].lead)) {
            is_limb[i] = 1;
        } else if (is_precordial_lead(rows[i].lead)) {
            is_limb[i] = 0;
        } else {
            fail("GenericLead", "lead '" + rows[i].lead + "' is neither limb nor precordial");
        }
        if (static_cast<int>(rows[i].vec.size()) != model.dim) {
            fail("InvalidPoints", "embedding dim != model dim");
        }
        points.insert(points.end(), rows[i].vec.begin(), rows[i].vec.end());
    }
    const std::vector<int> assign = gmm_assign(model, points, static_cast<int>(rows.size()));
    std::size_t match = 0;  // component 0 = limb
    for (std::size_t i = 0; i < rows.size(); ++i) {
        if ((assign[i] == 0) == (is_limb[i] != 0)) ++match;
    }
    const double acc = static_cast<double>(match) / rows.size();
    return std::max(acc, 1.0 - acc);  // label-permutation invariant
}

}  // namespace stmem
