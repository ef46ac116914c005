#include "stmem/eval.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include "stmem/patchify.hpp"

namespace stmem {

namespace {

void check_labels(const std::vector<int>& preds, const std::vector<int>& labels) {
    if (preds.size() != labels.size()) fail("LengthMismatch", "preds and labels differ in length");
    if (preds.empty()) fail("EmptyInput", "need at least one sample");
}

}  // namespace

double accuracy(const std::vector<int>& preds, const std::vector<int>& labels) {
    check_labels(preds, labels);
    std::size_t hits = 0;
    for (std::size_t i = 0; i < preds.size(); ++i) {
        if (preds[i] == labels[i]) ++hits;
    }
    return static_cast<double>(hits) / static_cast<double>(preds.size());
}

std::vector<double> per_class_f1(const std::vector<int>& preds, const std::vector<int>& labels,
                                 int num_classes) {
    check_labels(preds, labels);
    for (std::size_t i = 0; i < preds.size(); ++i) {
        if (preds[i] < 0 || preds[i] >= num_classes || labels[i] < 0 || labels[i] >= num_classes) {
            fail("LabelRange", "class index outside [0, K)");
        }
    }
    std::vector<std::int64_t> tp(num_classes, 0), fp(num_classes, 0), fn(num_classes, 0);
    for (std::size_t i = 0; i < preds.size(); ++i) {
        if (preds[i] == labels[i]) {
            ++tp[preds[i]];
        } else {
            ++fp[preds[i]];
            ++fn[labels[i]];
        }
    }
    std::vector<double> f1(num_classes, 0.0);
    for (int c = 0; c < num_classes; ++c) {
        const double denom = static_cast<double>(2 * tp[c] + fp[c] + fn[c]);
        f1[c] = denom > 0.0 ? 2.0 * tp[c] / denom : 0.0;
    }
    return f1;
}

double macro_f1(const std::vector<int>& preds, const std::vector<int>& labels, int num_classes) {
    const std::vector<double> f1 = per_class_f1(preds, labels, num_classes);
    return std::accumulate(f1.begin(), f1.end(), 0.0) / num_classes;
}

double binary_auroc(const std::vector<double>& scores, const std::vector<char>& is_positive) {
    if (scores.size() != is_positive.size() || scores.empty()) {
        fail("LengthMismatch", "scores and indicator differ in length");
    }
    const std::size_t n = scores.size();
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(),
              [&scores](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });

    // average ranks over tie groups -> exact 0.5 credit per tied pair
    std::vector<double> rank(n, 0.0);
    std::size_t i = 0;
    while (i < n) {
        std::size_t j = i;
        while (j + 1 < n && scores[order[j + 1]] == scores[order[i]]) ++j;
        const double avg = 0.5 * static_cast<double>(i + j) + 1.0;  // ranks are 1-based
        for (std::size_t k = i; k <= j; ++k) rank[order[k]] = avg;
        i = j + 1;
    }

    double rank_sum = 0.0;
    std::size_t n_pos = 0;
    for (std::size_t k = 0; k < n; ++k) {
        if (is_positive[k]) {
            rank_sum += rank[k];
            ++n_pos;
        }
    }
    const std::size_t n_neg = n - n_pos;
    if (n_pos == 0 || n_neg == 0) fail("DegenerateClass", "AUROC needs both classes present");
    const double u = rank_sum - 0.5 * static_cast<double>(n_pos) * (n_pos + 1);
    return u / (static_cast<double>(n_pos) * static_cast<double>(n_neg));
}

double ovr_auroc(const std::vector<std::vector<double>>& scores, const std::vector<int>& labels,
                 int num_classes) {
    if (scores.size() != labels.size() || scores.empty()) {
        fail("LengthMismatch", "scores and labels differ in length");
    }
    for (const auto& row : scores) {
        if (static_cast<int>(row.size()) != num_classes) {
            fail("LengthMismatch", "score row width != K");
        }
        for (double s : row) {
            if (!std::isfinite(s)) fail("InvalidScores", "non-finite score");
        }
    }
    double sum = 0.0;
    int evaluable = 0;
    std::vector<double> column(labels.size());
    std::vector<char> positive(labels.size());
    for (int c = 0; c < num_classes; ++c) {
        std::size_t n_pos = 0;
        for (std::size_t i = 0; i < labels.size(); ++i) {
            column[i] = scores[i][c];
            positive[i] = labels[i] == c ? 1 : 0;
            if (positive[i]) ++n_pos;
        }
        if (n_pos == 0 || n_pos == labels.size()) continue;  // class absent -> skipped
        sum += binary_auroc(column, positive);
        ++evaluable;
    }
    if (evaluable == 0) fail("NoEvaluableClass", "no class has both positives and negatives");
    return sum / evaluable;
}

MetricsReport compute_metrics(const std::vector<std::vector<double>>& scores,
                              const std::vector<int>& labels, int num_classes) {
    std::vector<int> preds(labels.size());
    for (std::size_t i = 0; i < scores.size(); ++i) {
        preds[i] = static_cast<int>(
            std::max_element(scores[i].begin(), scores[i].end()) - scores[i].begin());
    }
    MetricsReport report;
    report.n_samples = static_cast<int>(labels.size());
    report.accuracy = accuracy(preds, labels);
    report.per_class_f1 = per_class_f1(preds, labels, num_classes);
    report.macro_f1 =
        std::accumulate(report.per_class_f1.begin(), report.per_class_f1.end(), 0.0) / num_classes;
    report.ovr_auroc = ovr_auroc(scores, labels, num_classes);
    return report;
}

// ---------------------------------------------------------------------------
// lead representations
// ---------------------------------------------------------------------------

std::vector<LeadEmbeddingRow> export_lead_embeddings(const std::vector<EcgRecord>& records,
                                                     const ModelParams<float>& params,
                                                     const ModelConfig& config) {
    std::vector<LeadEmbeddingRow> rows;
    for (const EcgRecord& rec : records) {
        const PatchGrid grid = patchify(rec, PatchMode::SpatioTemporal, config.patch_size);
        const auto reps = lead_representations(grid, params, config);
        for (int l = 0; l < grid.num_leads; ++l) {
            LeadEmbeddingRow row;
            row.record_id = rec.source_id.empty() ? "record" : rec.source_id;
            row.lead = grid.leads[l];
            row.vec.assign(reps[l].begin(), reps[l].end());
            rows.push_back(std::move(row));
        }
    }
    return rows;
}

void write_embeddings_csv(const std::vector<LeadEmbeddingRow>& rows, const std::string& path) {
    if (rows.empty()) fail("EmptyInput", "no embedding rows to write");
    std::ofstream out(path);
    if (!out) fail("IoError", "cannot write " + path);
    out << "record_id,lead";
    for (std::size_t d = 0; d < rows[0].vec.size(); ++d) out << ",dim_" << d;
    out << "\n";
    char buf[64];
    for (const LeadEmbeddingRow& row : rows) {
        out << row.record_id << "," << row.lead;
        for (double v : row.vec) {
            const auto res = std::to_chars(buf, buf + sizeof(buf), v);
            out << ",";
            out.write(buf, res.ptr - buf);
        }
        out << "\n";
    }
}

std::vector<LeadEmbeddingRow> read_embeddings_csv(const std::string& path) {
    std::ifstream in(path);
    if (!in) fail("IoError", "cannot open " + path);
    std::string line;
    if (!std::getline(in, line)) fail("FormatError", "empty embeddings CSV");
    if (line.rfind("record_id,lead", 0) != 0) {
        fail("FormatError", "unexpected embeddings CSV header");
    }
    std::vector<LeadEmbeddingRow> rows;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::stringstream ss(line);
        std::string cell;
        LeadEmbeddingRow row;
        if (!std::getline(ss, row.record_id, ',') || !std::getline(ss, row.lead, ',')) {
            fail("FormatError", "short embeddings CSV row");
        }
        while (std::getline(ss, cell, ',')) {
            try {
                row.vec.push_back(std::stod(cell));
            } catch (const std::exception&) {
                fail("FormatError", "non-numeric embedding value '" + cell + "'");
            }
        }
        if (row.vec.empty()) fail("FormatError", "embeddings CSV row without values");
        rows.push_back(std::move(row));
    }
    if (rows.empty()) fail("FormatError", "embeddings CSV has no rows");
    return rows;
}

}  // namespace stmem
