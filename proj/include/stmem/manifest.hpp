#pragma once

#include <string>
#include <vector>

#include "stmem/record.hpp"

namespace stmem {

struct ManifestRow {
    std::string path;
    std::string label;  // empty = unlabeled; multi-label rows use '|' separators
};

// One split per file: a `split = ...` header line plus `path[,label]` rows.
struct Manifest {
    std::string split = "all";  // train | valid | test | all
    std::vector<ManifestRow> rows;

    // sorted unique label names over single-labeled rows
    std::vector<std::string> label_set() const;
};

std::vector<std::string> split_labels(const std::string& label);  // '|'-separated

Manifest load_manifest(const std::string& path);
void save_manifest(const Manifest& manifest, const std::string& path);

// row paths resolved relative to the manifest's directory
std::vector<std::string> resolved_paths(const Manifest& manifest, const std::string& manifest_path);

// label-aware record loading: resolves paths, reads records, assigns label
// indices from `label_names` (error on unknown or multi-label rows)
std::vector<EcgRecord> load_labeled_records(const Manifest& manifest,
                                            const std::string& manifest_path,
                                            const std::vector<std::string>& label_names);
std::vector<EcgRecord> load_records(const Manifest& manifest, const std::string& manifest_path);

}  // namespace stmem
