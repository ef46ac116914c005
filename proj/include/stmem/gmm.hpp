#pragma once

#include <cstdint>
#include <vector>

#include "stmem/eval.hpp"

namespace stmem {

struct GmmModel {
    int num_components = 0;
    int dim = 0;
    std::vector<double> means;    // K x d
    std::vector<double> covs;     // K x d x d, full covariance
    std::vector<double> weights;  // K, positive, sums to 1
    double log_likelihood = 0.0;

    const double* mean(int k) const { return means.data() + static_cast<std::size_t>(k) * dim; }
    const double* cov(int k) const {
        return covs.data() + static_cast<std::size_t>(k) * dim * dim;
    }
};

// EM with k-means++ seeding, 10 restarts, convergence at log-likelihood gain
// < 1e-6, covariance regularization +1e-6*I; best-likelihood restart wins.
GmmModel gmm_fit(const std::vector<double>& points, int n, int dim, int num_components,
                 std::uint64_t seed);

// most-responsible component per point
std::vector<int> gmm_assign(const GmmModel& model, const std::vector<double>& points, int n);

// Fraction of rows whose GMM component matches their lead plane (limb vs
// precordial), maximized over the two component<->plane labelings. Requires a
// 2-component model and standard lead names.
double lead_cluster_accuracy(const std::vector<LeadEmbeddingRow>& rows, const GmmModel& model);

}  // namespace stmem
