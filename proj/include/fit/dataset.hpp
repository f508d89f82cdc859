#pragma once

// Labelled datasets and the CSV interchange format: d feature columns
// followed by one integer label column, optional header row.

#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "fit/errors.hpp"
#include "fit/matrix.hpp"

namespace fit {

struct LabelledDataset {
    Matrix features;          // N x d
    std::vector<int> labels;  // values in [0, num_classes)
    std::size_t num_classes = 0;

    std::size_t size() const { return labels.size(); }
    std::size_t dim() const { return features.cols; }

    void validate() const {
        if (features.rows != labels.size()) {
            throw DimensionMismatch("dataset: feature rows != label count");
        }
        for (std::size_t i = 0; i < labels.size(); ++i) {
            if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= num_classes) {
                throw Error("dataset: label " + std::to_string(labels[i]) + " at row " +
                            std::to_string(i) + " outside [0, " + std::to_string(num_classes) +
                            ")");
            }
        }
        for (double v : features.data) {
            if (!std::isfinite(v)) throw Error("dataset: non-finite feature value");
        }
    }

    std::vector<std::size_t> class_counts() const {
        std::vector<std::size_t> counts(num_classes);
        for (int y : labels) ++counts[static_cast<std::size_t>(y)];
        return counts;
    }

    LabelledDataset subset(const std::vector<std::size_t>& rows) const {
        LabelledDataset out;
        out.num_classes = num_classes;
        out.features = Matrix(rows.size(), dim());
        out.labels.reserve(rows.size());
        for (std::size_t i = 0; i < rows.size(); ++i) {
            for (std::size_t j = 0; j < dim(); ++j) out.features(i, j) = features(rows[i], j);
            out.labels.push_back(labels[rows[i]]);
        }
        return out;
    }

    // Keep only rows of the given classes and relabel them 0..k-1 in the
    // order given.  Used for client-local training and per-client
    // evaluation.
    LabelledDataset restrict_to(const std::vector<int>& classes) const {
        std::vector<int> local(num_classes, -1);
        for (std::size_t k = 0; k < classes.size(); ++k) {
            local[static_cast<std::size_t>(classes[k])] = static_cast<int>(k);
        }
        std::vector<std::size_t> rows;
        for (std::size_t i = 0; i < labels.size(); ++i) {
            if (local[static_cast<std::size_t>(labels[i])] >= 0) rows.push_back(i);
        }
        LabelledDataset out = subset(rows);
        for (int& y : out.labels) y = local[static_cast<std::size_t>(y)];
        out.num_classes = classes.size();
        return out;
    }

    static LabelledDataset concat(const LabelledDataset& a, const LabelledDataset& b) {
        if (a.dim() != b.dim()) throw DimensionMismatch("dataset concat: dimension mismatch");
        LabelledDataset out;
        out.num_classes = a.num_classes > b.num_classes ? a.num_classes : b.num_classes;
        out.features = Matrix(a.size() + b.size(), a.dim());
        for (std::size_t i = 0; i < a.size(); ++i)
            for (std::size_t j = 0; j < a.dim(); ++j) out.features(i, j) = a.features(i, j);
        for (std::size_t i = 0; i < b.size(); ++i)
            for (std::size_t j = 0; j < b.dim(); ++j) out.features(a.size() + i, j) = b.features(i, j);
        out.labels = a.labels;
        out.labels.insert(out.labels.end(), b.labels.begin(), b.labels.end());
        return out;
    }
};

namespace detail {

inline std::string trim(const std::string& s) {
    std::size_t b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    std::size_t e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

inline bool parse_double(const std::string& tok, double& out) {
    const char* begin = tok.data();
    const char* end = begin + tok.size();
    auto res = std::from_chars(begin, end, out);
    return res.ec == std::errc() && res.ptr == end;
}

}  // namespace detail

inline LabelledDataset load_csv(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open '" + path + "' for reading");

    LabelledDataset d;
    std::vector<std::vector<double>> rows;
    std::string line;
    std::size_t lineno = 0;
    std::size_t width = 0;
    bool maybe_header = true;
    int max_label = -1;

    while (std::getline(in, line)) {
        ++lineno;
        if (detail::trim(line).empty()) continue;
        std::vector<double> vals;
        std::stringstream ss(line);
        std::string tok;
        bool bad_token = false;
        std::size_t col = 0;
        while (std::getline(ss, tok, ',')) {
            ++col;
            double v;
            if (!detail::parse_double(detail::trim(tok), v)) {
                if (maybe_header) {
                    bad_token = true;
                    break;
                }
                throw ParseError("'" + path + "' line " + std::to_string(lineno) + " column " +
                                 std::to_string(col) + ": cannot parse '" + detail::trim(tok) +
                                 "'");
            }
            vals.push_back(v);
        }
        if (bad_token) {  // header row
            maybe_header = false;
            continue;
        }
        maybe_header = false;
        if (vals.size() < 2) {
            throw ParseError("'" + path + "' line " + std::to_string(lineno) +
                             ": need at least one feature column plus a label");
        }
        if (width == 0) {
            width = vals.size();
        } else if (vals.size() != width) {
            throw RaggedRows("'" + path + "' line " + std::to_string(lineno) + ": expected " +
                             std::to_string(width) + " columns, got " +
                             std::to_string(vals.size()));
        }
        double lv = vals.back();
        double r = std::nearbyint(lv);
        if (std::fabs(lv - r) > 1e-9 || r < 0) {
            throw ParseError("'" + path + "' line " + std::to_string(lineno) +
                             ": label column must be a nonnegative integer, got " +
                             std::to_string(lv));
        }
        int y = static_cast<int>(r);
        if (y > max_label) max_label = y;
        vals.back() = static_cast<double>(y);
        rows.push_back(std::move(vals));
    }
    if (rows.empty()) throw EmptyDataset("'" + path + "' contains no data rows");

    d.num_classes = static_cast<std::size_t>(max_label) + 1;
    d.features = Matrix(rows.size(), width - 1);
    d.labels.reserve(rows.size());
    for (std::size_t i = 0; i < rows.size(); ++i) {
        for (std::size_t j = 0; j + 1 < width; ++j) d.features(i, j) = rows[i][j];
        d.labels.push_back(static_cast<int>(rows[i].back()));
    }
    return d;
}

inline void save_csv(const LabelledDataset& d, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot open '" + path + "' for writing");
    char buf[40];
    for (std::size_t i = 0; i < d.size(); ++i) {
        std::string line;
        for (std::size_t j = 0; j < d.dim(); ++j) {
            std::snprintf(buf, sizeof buf, "%.17g", d.features(i, j));
            line += buf;
            line += ',';
        }
        line += std::to_string(d.labels[i]);
        line += '\n';
        out << line;
    }
    if (!out) throw IoError("write to '" + path + "' failed");
}

}  // namespace fit
