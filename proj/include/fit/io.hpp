#pragma once

// On-disk formats.  Numeric payloads are raw little-endian float64 blobs
// with a JSON sidecar describing the layout; small objects are plain JSON.
// Logs are JSON-lines, one object per line.

#include <bit>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "fit/backbone.hpp"
#include "fit/errors.hpp"
#include "fit/fed.hpp"
#include "fit/episodic.hpp"
#include "fit/head.hpp"
#include "fit/manifest.hpp"

static_assert(std::endian::native == std::endian::little,
              "blob format assumes a little-endian host");
static_assert(sizeof(double) == 8, "blob format assumes 8-byte doubles");

namespace fit {

inline void write_f64_blob(const std::string& path, const std::vector<double>& values) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open for writing: " + path);
    out.write(reinterpret_cast<const char*>(values.data()),
              static_cast<std::streamsize>(values.size() * sizeof(double)));
    if (!out) throw IoError("write failed: " + path);
}

inline std::vector<double> read_f64_blob(const std::string& path) {
    std::ifstream in(path, std::ios::binary | std::ios::ate);
    if (!in) throw IoError("cannot open: " + path);
    std::streamsize bytes = in.tellg();
    if (bytes < 0 || bytes % static_cast<std::streamsize>(sizeof(double)) != 0) {
        throw ParseError(path + ": size is not a multiple of 8 bytes");
    }
    std::vector<double> values(static_cast<std::size_t>(bytes) / sizeof(double));
    in.seekg(0);
    in.read(reinterpret_cast<char*>(values.data()), bytes);
    if (!in) throw IoError("read failed: " + path);
    return values;
}

namespace detail {

inline void check_format(const json& j, const std::string& expect, const std::string& path) {
    if (!j.contains("format") || j["format"] != expect) {
        throw ParseError(path + ": expected format '" + expect + "'");
    }
}

}  // namespace detail

// ---- FiLM parameters -------------------------------------------------------

inline void save_film_params(const std::string& bin_path, const std::string& json_path,
                             const FilmParams& psi) {
    write_f64_blob(bin_path, psi.flatten());
    json j;
    j["format"] = "fit-film-params";
    j["version"] = 1;
    j["widths"] = psi.widths();
    j["count"] = psi.count();
    save_json(json_path, j);
}

inline FilmParams load_film_params(const std::string& bin_path, const std::string& json_path) {
    json j = load_json(json_path);
    detail::check_format(j, "fit-film-params", json_path);
    std::vector<std::size_t> widths = j.at("widths").get<std::vector<std::size_t>>();
    FilmParams psi = FilmParams::identity(widths);
    std::vector<double> flat = read_f64_blob(bin_path);
    if (flat.size() != psi.count()) {
        throw ParseError(bin_path + ": expected " + std::to_string(psi.count()) +
                         " values, found " + std::to_string(flat.size()));
    }
    psi.assign_flat(flat);
    return psi;
}

// ---- backbone spec ---------------------------------------------------------
// Weights are not stored; they are regenerated from (kind, dims, seed).

inline json backbone_to_json(const BackboneSpec& spec) {
    json j;
    j["format"] = "fit-backbone";
    j["version"] = 1;
    j["kind"] = spec.kind == BackboneKind::Identity ? "identity" : "mlp";
    j["input_dim"] = spec.input_dim;
    j["hidden"] = spec.hidden;
    j["output_dim"] = spec.output_dim;
    j["seed"] = spec.seed;
    return j;
}

inline BackboneSpec backbone_from_json(const json& j, const std::string& path) {
    detail::check_format(j, "fit-backbone", path);
    std::string kind = j.at("kind").get<std::string>();
    if (kind == "identity") return BackboneSpec::identity(j.at("input_dim").get<std::size_t>());
    if (kind == "mlp") {
        return BackboneSpec::mlp(j.at("input_dim").get<std::size_t>(),
                                 j.at("hidden").get<std::vector<std::size_t>>(),
                                 j.at("output_dim").get<std::size_t>(),
                                 j.at("seed").get<std::uint64_t>());
    }
    throw ParseError(path + ": unknown backbone kind '" + kind + "'");
}

inline void save_backbone(const std::string& path, const BackboneSpec& spec) {
    save_json(path, backbone_to_json(spec));
}

inline BackboneSpec load_backbone(const std::string& path) {
    return backbone_from_json(load_json(path), path);
}

// ---- covariance weights ----------------------------------------------------

inline void save_cov_weights(const std::string& path, const CovarianceWeights& e) {
    json j;
    j["format"] = "fit-covariance-weights";
    j["version"] = 1;
    j["e1"] = e.e1;
    j["e2"] = e.e2;
    j["e3"] = e.e3;
    save_json(path, j);
}

inline CovarianceWeights load_cov_weights(const std::string& path) {
    json j = load_json(path);
    detail::check_format(j, "fit-covariance-weights", path);
    CovarianceWeights e;
    e.e1 = j.at("e1").get<double>();
    e.e2 = j.at("e2").get<double>();
    e.e3 = j.at("e3").get<double>();
    return e;
}

// ---- classifier cache ------------------------------------------------------

namespace detail {

inline void append_matrix(std::vector<double>& blob, json& sections, const char* name,
                          const Matrix& m) {
    sections.push_back(json{{"name", name}, {"offset", blob.size()}, {"count", m.size()}});
    blob.insert(blob.end(), m.data.begin(), m.data.end());
}

inline void append_values(std::vector<double>& blob, json& sections, const char* name,
                          const std::vector<double>& v) {
    sections.push_back(json{{"name", name}, {"offset", blob.size()}, {"count", v.size()}});
    blob.insert(blob.end(), v.begin(), v.end());
}

inline std::vector<double> take_section(const std::vector<double>& blob, const json& sections,
                                        const std::string& name, std::size_t expect,
                                        const std::string& path) {
    for (const auto& s : sections) {
        if (s.at("name") != name) continue;
        auto offset = s.at("offset").get<std::size_t>();
        auto count = s.at("count").get<std::size_t>();
        if (count != expect || offset + count > blob.size()) {
            throw ParseError(path + ": bad section '" + name + "'");
        }
        return std::vector<double>(blob.begin() + static_cast<std::ptrdiff_t>(offset),
                                   blob.begin() + static_cast<std::ptrdiff_t>(offset + count));
    }
    throw ParseError(path + ": missing section '" + name + "'");
}

inline Matrix matrix_from(const std::vector<double>& flat, std::size_t r, std::size_t c) {
    Matrix m(r, c);
    m.data = flat;
    return m;
}

}  // namespace detail

inline void save_cache(const std::string& bin_path, const std::string& json_path,
                       const ClassifierCache& cache) {
    std::vector<double> blob;
    json sections = json::array();
    detail::append_matrix(blob, sections, "means", cache.means);
    if (cache.variant != HeadVariant::Proto || cache.with_priors) {
        detail::append_values(blob, sections, "log_priors", cache.log_priors);
    }
    if (cache.variant == HeadVariant::Qda) {
        std::vector<double> chols;
        for (const auto& f : cache.chols) {
            chols.insert(chols.end(), f.l.data.begin(), f.l.data.end());
        }
        detail::append_values(blob, sections, "chol", chols);
        detail::append_values(blob, sections, "log_dets", cache.log_dets);
    } else if (cache.variant == HeadVariant::Lda) {
        detail::append_matrix(blob, sections, "lin", cache.lin);
        detail::append_values(blob, sections, "quad", cache.quad);
        detail::append_values(blob, sections, "chol", cache.chols[0].l.data);
        detail::append_values(blob, sections, "log_dets", cache.log_dets);
    }
    write_f64_blob(bin_path, blob);

    json j;
    j["format"] = "fit-classifier-cache";
    j["version"] = 1;
    j["variant"] = variant_name(cache.variant);
    j["classes"] = cache.classes;
    j["dim"] = cache.dim;
    j["with_priors"] = cache.with_priors;
    j["head_values"] = cache.stored_head_values();
    j["sections"] = sections;
    save_json(json_path, j);
}

inline ClassifierCache load_cache(const std::string& bin_path, const std::string& json_path) {
    json j = load_json(json_path);
    detail::check_format(j, "fit-classifier-cache", json_path);
    ClassifierCache cache;
    cache.variant = parse_variant(j.at("variant").get<std::string>());
    cache.classes = j.at("classes").get<std::size_t>();
    cache.dim = j.at("dim").get<std::size_t>();
    cache.with_priors = j.at("with_priors").get<bool>();
    const json& sections = j.at("sections");
    std::vector<double> blob = read_f64_blob(bin_path);
    const std::size_t c = cache.classes;
    const std::size_t d = cache.dim;

    cache.means = detail::matrix_from(
        detail::take_section(blob, sections, "means", c * d, bin_path), c, d);
    if (cache.variant != HeadVariant::Proto || cache.with_priors) {
        cache.log_priors = detail::take_section(blob, sections, "log_priors", c, bin_path);
    }
    if (cache.variant == HeadVariant::Qda) {
        std::vector<double> chols =
            detail::take_section(blob, sections, "chol", c * d * d, bin_path);
        for (std::size_t k = 0; k < c; ++k) {
            std::vector<double> one(chols.begin() + static_cast<std::ptrdiff_t>(k * d * d),
                                    chols.begin() + static_cast<std::ptrdiff_t>((k + 1) * d * d));
            cache.chols.push_back(CholeskyFactor{detail::matrix_from(one, d, d)});
        }
        cache.log_dets = detail::take_section(blob, sections, "log_dets", c, bin_path);
    } else if (cache.variant == HeadVariant::Lda) {
        cache.lin = detail::matrix_from(
            detail::take_section(blob, sections, "lin", c * d, bin_path), c, d);
        cache.quad = detail::take_section(blob, sections, "quad", c, bin_path);
        cache.chols.push_back(CholeskyFactor{
            detail::matrix_from(detail::take_section(blob, sections, "chol", d * d, bin_path),
                                d, d)});
        cache.log_dets = detail::take_section(blob, sections, "log_dets", 1, bin_path);
    }
    return cache;
}

// ---- JSON-lines ------------------------------------------------------------

inline json trace_entry_json(const TraceEntry& t, bool with_wall) {
    json j;
    j["iteration"] = t.iteration;
    j["loss"] = t.loss;
    if (with_wall) j["wall_ms"] = t.wall_ms;
    return j;
}

inline json round_log_json(const RoundLog& r) {
    json j;
    j["round"] = r.round;
    j["client_ids"] = r.client_ids;
    j["params_down"] = r.params_down;
    j["params_up"] = r.params_up;
    j["cum_cost"] = r.cum_cost;
    j["global_acc"] = r.global_acc;
    j["personalized_acc"] = r.personalized_acc;
    return j;
}

inline json eval_report_json(const EvalReport& r) {
    json j;
    j["count"] = r.count;
    j["accuracy"] = r.accuracy;
    j["mean_log_prob"] = r.mean_log_prob;
    j["per_class_counts"] = r.per_class_counts;
    j["per_class_accuracy"] = r.per_class_accuracy;
    return j;
}

inline void write_json_lines(const std::string& path, const std::vector<json>& lines) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open for writing: " + path);
    for (const json& j : lines) out << j.dump() << "\n";
    if (!out) throw IoError("write failed: " + path);
}

inline std::vector<json> read_json_lines(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open: " + path);
    std::vector<json> lines;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        try {
            lines.push_back(json::parse(line));
        } catch (const json::parse_error& e) {
            throw ParseError(path + " line " + std::to_string(lines.size() + 1) + ": " +
                             e.what());
        }
    }
    return lines;
}

}  // namespace fit
