#include "stmem/manifest.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "stmem/signal.hpp"

namespace fs = std::filesystem;

namespace stmem {

std::vector<std::string> split_labels(const std::string& label) {
    std::vector<std::string> out;
    std::stringstream ss(label);
    std::string item;
    while (std::getline(ss, item, '|')) {
        if (!item.empty()) out.push_back(item);
    }
    return out;
}

std::vector<std::string> Manifest::label_set() const {
    std::set<std::string> names;
    for (const ManifestRow& row : rows) {
        const auto labels = split_labels(row.label);
        if (labels.size() == 1) names.insert(labels[0]);
    }
    return {names.begin(), names.end()};
}

Manifest load_manifest(const std::string& path) {
    std::ifstream in(path);
    if (!in) fail("IoError", "cannot open manifest " + path);
    Manifest m;
    std::string line;
    std::set<std::string> seen;
    while (std::getline(in, line)) {
        const auto hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        const auto b = line.find_first_not_of(" \t\r");
        if (b == std::string::npos) continue;
        const auto e = line.find_last_not_of(" \t\r");
        line = line.substr(b, e - b + 1);
        if (line.rfind("split", 0) == 0 && line.find('=') != std::string::npos) {
            const std::string v = line.substr(line.find('=') + 1);
            const auto vb = v.find_first_not_of(" \t");
            m.split = vb == std::string::npos ? "" : v.substr(vb);
            if (m.split != "train" && m.split != "valid" && m.split != "test" && m.split != "all") {
                fail("FormatError", "manifest split must be train/valid/test/all");
            }
            continue;
        }
        ManifestRow row;
        const auto comma = line.find(',');
        if (comma == std::string::npos) {
            row.path = line;
        } else {
            row.path = line.substr(0, comma);
            row.label = line.substr(comma + 1);
        }
        if (!seen.insert(row.path).second) {
            fail("DuplicatePath", "manifest lists " + row.path + " twice");
        }
        m.rows.push_back(std::move(row));
    }
    return m;
}

void save_manifest(const Manifest& manifest, const std::string& path) {
    std::ofstream out(path);
    if (!out) fail("IoError", "cannot write manifest " + path);
    out << "split = " << manifest.split << "\n";
    for (const ManifestRow& row : manifest.rows) {
        out << row.path;
        if (!row.label.empty()) out << "," << row.label;
        out << "\n";
    }
}

std::vector<std::string> resolved_paths(const Manifest& manifest,
                                        const std::string& manifest_path) {
    const fs::path base = fs::path(manifest_path).parent_path();
    std::vector<std::string> out;
    out.reserve(manifest.rows.size());
    for (const ManifestRow& row : manifest.rows) {
        fs::path p(row.path);
        out.push_back(p.is_absolute() ? p.string() : (base / p).string());
    }
    return out;
}

std::vector<EcgRecord> load_records(const Manifest& manifest, const std::string& manifest_path) {
    std::vector<EcgRecord> records;
    for (const std::string& path : resolved_paths(manifest, manifest_path)) {
        records.push_back(read_record(path));
    }
    return records;
}

std::vector<EcgRecord> load_labeled_records(const Manifest& manifest,
                                            const std::string& manifest_path,
                                            const std::vector<std::string>& label_names) {
    std::vector<EcgRecord> records = load_records(manifest, manifest_path);
    for (std::size_t i = 0; i < records.size(); ++i) {
        const auto labels = split_labels(manifest.rows[i].label);
        if (labels.empty()) {
            fail("LabelMissing", "row " + manifest.rows[i].path + " has no label");
        }
        if (labels.size() > 1) {
            fail("MultiLabelRow",
                 "row " + manifest.rows[i].path + " has multiple labels; run preprocess first");
        }
        const auto it = std::find(label_names.begin(), label_names.end(), labels[0]);
        if (it == label_names.end()) {
            fail("LabelRange", "label '" + labels[0] + "' not in the label map");
        }
        records[i].label = static_cast<int>(it - label_names.begin());
    }
    return records;
}

}  // namespace stmem
