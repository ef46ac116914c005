#pragma once

#include <string>
#include <vector>

#include "stmem/model.hpp"
#include "stmem/record.hpp"

namespace stmem {

// fraction of exact matches
double accuracy(const std::vector<int>& preds, const std::vector<int>& labels);

// unweighted mean of per-class F1; a class with an empty precision+recall
// denominator contributes 0
std::vector<double> per_class_f1(const std::vector<int>& preds, const std::vector<int>& labels,
                                 int num_classes);
double macro_f1(const std::vector<int>& preds, const std::vector<int>& labels, int num_classes);

// one-vs-rest AUROC (Mann-Whitney, ties get 0.5 credit), macro-averaged over
// the classes present in `labels`
double ovr_auroc(const std::vector<std::vector<double>>& scores, const std::vector<int>& labels,
                 int num_classes);
double binary_auroc(const std::vector<double>& scores, const std::vector<char>& is_positive);

struct MetricsReport {
    double accuracy = 0.0;
    double macro_f1 = 0.0;
    double ovr_auroc = 0.0;
    std::vector<double> per_class_f1;
    int n_samples = 0;
};

MetricsReport compute_metrics(const std::vector<std::vector<double>>& scores,
                              const std::vector<int>& labels, int num_classes);

// ---------------------------------------------------------------------------
// lead representations
// ---------------------------------------------------------------------------

struct LeadEmbeddingRow {
    std::string record_id;
    std::string lead;
    std::vector<double> vec;
};

// mean of each lead's encoded patch tokens, no masking; row order follows the
// record order, then the record's lead order
std::vector<LeadEmbeddingRow> export_lead_embeddings(const std::vector<EcgRecord>& records,
                                                     const ModelParams<float>& params,
                                                     const ModelConfig& config);

void write_embeddings_csv(const std::vector<LeadEmbeddingRow>& rows, const std::string& path);
std::vector<LeadEmbeddingRow> read_embeddings_csv(const std::string& path);

}  // namespace stmem
