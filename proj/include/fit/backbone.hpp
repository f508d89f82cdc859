#pragma once

// Frozen feature extractors with FiLM modulation.  Two desk-scale kinds:
//
//   identity : passes the input through one FiLM layer (d_b = input dim);
//              meant for precomputed or synthetic embeddings.
//   mlp      : a frozen randomly-initialized MLP.  Each hidden layer is
//              linear -> row standardization -> FiLM -> relu; the output
//              layer is linear -> FiLM.  Weights are regenerated from the
//              recorded seed, never stored.
//
// Only the FiLM scale/shift vectors (gamma, beta per layer) are
// trainable; everything else is frozen at construction.

#include <algorithm>
#include <cstdint>
#include <string>
#include <vector>

#include "fit/autodiff.hpp"
#include "fit/errors.hpp"
#include "fit/matrix.hpp"
#include "fit/rng.hpp"

namespace fit {

// Published constants for the reference ResNet-50 FiT configuration used
// in parameter and communication accounting.
inline constexpr std::uint64_t kResnet50FilmCount = 11648;
inline constexpr std::uint64_t kResnet50ThetaCount = 23500352;
inline constexpr std::uint64_t kResnet50EmbedDim = 2048;

// Feature-axis standardization epsilon (stand-in for group norm).
inline constexpr double kNormEps = 1e-5;

struct FilmLayer {
    std::vector<double> gamma;
    std::vector<double> beta;

    std::size_t width() const { return gamma.size(); }

    static FilmLayer identity(std::size_t width) {
        return FilmLayer{std::vector<double>(width, 1.0), std::vector<double>(width, 0.0)};
    }
};

// gamma * a + beta, elementwise per channel.
inline std::vector<double> film(const std::vector<double>& a, const FilmLayer& layer) {
    if (a.size() != layer.gamma.size() || layer.gamma.size() != layer.beta.size()) {
        throw DimensionMismatch("film: activation/parameter length mismatch");
    }
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) out[i] = layer.gamma[i] * a[i] + layer.beta[i];
    return out;
}

struct FilmParams {
    std::vector<FilmLayer> layers;

    std::size_t count() const {
        std::size_t n = 0;
        for (const FilmLayer& l : layers) n += 2 * l.width();
        return n;
    }

    std::vector<std::size_t> widths() const {
        std::vector<std::size_t> w;
        w.reserve(layers.size());
        for (const FilmLayer& l : layers) w.push_back(l.width());
        return w;
    }

    // Flat layout: layer 0 gamma, layer 0 beta, layer 1 gamma, ...  This
    // is the optimizer vector and the federated payload — one layout
    // everywhere.
    std::vector<double> flatten() const {
        std::vector<double> flat;
        flat.reserve(count());
        for (const FilmLayer& l : layers) {
            flat.insert(flat.end(), l.gamma.begin(), l.gamma.end());
            flat.insert(flat.end(), l.beta.begin(), l.beta.end());
        }
        return flat;
    }

    void assign_flat(const std::vector<double>& flat) {
        if (flat.size() != count()) {
            throw DimensionMismatch("film params: flat vector has wrong length");
        }
        std::size_t off = 0;
        for (FilmLayer& l : layers) {
            for (double& g : l.gamma) g = flat[off++];
            for (double& b : l.beta) b = flat[off++];
        }
    }

    static FilmParams identity(const std::vector<std::size_t>& widths) {
        FilmParams p;
        p.layers.reserve(widths.size());
        for (std::size_t w : widths) p.layers.push_back(FilmLayer::identity(w));
        return p;
    }
};

enum class BackboneKind { Identity, Mlp };

struct BackboneSpec {
    BackboneKind kind = BackboneKind::Identity;
    std::size_t input_dim = 0;
    std::vector<std::size_t> hidden;  // empty for identity
    std::size_t output_dim = 0;       // d_b
    std::uint64_t seed = 0;
    // Frozen state, regenerated deterministically from `seed`.
    std::vector<Matrix> weights;  // weights[k] is (in_k x out_k)
    std::vector<Matrix> biases;   // 1 x out_k rows

    static BackboneSpec identity(std::size_t dim) {
        BackboneSpec s;
        s.kind = BackboneKind::Identity;
        s.input_dim = dim;
        s.output_dim = dim;
        return s;
    }

    static BackboneSpec mlp(std::size_t input_dim, std::vector<std::size_t> hidden,
                            std::size_t output_dim, std::uint64_t seed) {
        if (input_dim == 0 || output_dim == 0) {
            throw ConfigError("mlp backbone: dimensions must be positive");
        }
        BackboneSpec s;
        s.kind = BackboneKind::Mlp;
        s.input_dim = input_dim;
        s.hidden = std::move(hidden);
        s.output_dim = output_dim;
        s.seed = seed;
        std::vector<std::size_t> dims;
        dims.push_back(input_dim);
        dims.insert(dims.end(), s.hidden.begin(), s.hidden.end());
        dims.push_back(output_dim);
        for (std::size_t k = 0; k + 1 < dims.size(); ++k) {
            std::size_t in = dims[k], out = dims[k + 1];
            Rng rng(derive_seed(seed, {0xB0D7u, k}));
            Matrix w(in, out);
            double g = std::sqrt(2.0 / static_cast<double>(in));
            for (double& v : w.data) v = g * rng.normal();
            s.weights.push_back(std::move(w));
            s.biases.emplace_back(1, out);  // zero bias; FiLM beta covers shifts
        }
        return s;
    }

    // Channel counts at FiLM placements: one per hidden layer plus one on
    // the output.
    std::vector<std::size_t> film_widths() const {
        if (kind == BackboneKind::Identity) return {output_dim};
        std::vector<std::size_t> w = hidden;
        w.push_back(output_dim);
        return w;
    }

    FilmParams identity_film() const { return FilmParams::identity(film_widths()); }
};

inline std::size_t film_param_count(const BackboneSpec& spec) {
    std::size_t n = 0;
    for (std::size_t w : spec.film_widths()) n += 2 * w;
    return n;
}

// ---- forward evaluation -------------------------------------------------
//
// The tape build and the plain evaluation call the same kernels in the
// same order, so embeddings agree bit-for-bit between the two paths.

struct FilmNodes {
    std::vector<ad::NodeId> gamma;  // each 1 x width
    std::vector<ad::NodeId> beta;
};

inline FilmNodes film_leaves(ad::Tape& t, const FilmParams& psi, bool trainable = true) {
    FilmNodes n;
    for (const FilmLayer& l : psi.layers) {
        Matrix g = Matrix::row_vector(l.gamma);
        Matrix b = Matrix::row_vector(l.beta);
        n.gamma.push_back(trainable ? t.leaf(std::move(g)) : t.constant(std::move(g)));
        n.beta.push_back(trainable ? t.leaf(std::move(b)) : t.constant(std::move(b)));
    }
    return n;
}

// x is a batch: one row per example.
inline ad::NodeId backbone_forward(ad::Tape& t, const BackboneSpec& spec, const FilmNodes& psi,
                                   ad::NodeId x) {
    std::size_t layers = spec.film_widths().size();
    if (psi.gamma.size() != layers || psi.beta.size() != layers) {
        throw DimensionMismatch("backbone forward: film layer count mismatch");
    }
    if (t.value(x).cols != spec.input_dim) {
        throw DimensionMismatch("backbone forward: input has " +
                                std::to_string(t.value(x).cols) + " columns, spec wants " +
                                std::to_string(spec.input_dim));
    }
    if (spec.kind == BackboneKind::Identity) {
        return ad::film(t, x, psi.gamma[0], psi.beta[0]);
    }
    ad::NodeId h = x;
    for (std::size_t k = 0; k < spec.weights.size(); ++k) {
        ad::NodeId z = t.add(t.matmul(h, t.constant(spec.weights[k])), t.constant(spec.biases[k]));
        bool last = (k + 1 == spec.weights.size());
        if (!last) z = ad::standardize_rows(t, z, kNormEps);
        z = ad::film(t, z, psi.gamma[k], psi.beta[k]);
        h = last ? z : t.relu(z);
    }
    return h;
}

inline Matrix backbone_forward(const BackboneSpec& spec, const FilmParams& psi, const Matrix& x) {
    std::size_t layers = spec.film_widths().size();
    if (psi.layers.size() != layers) {
        throw DimensionMismatch("backbone forward: film layer count mismatch");
    }
    if (x.cols != spec.input_dim) {
        throw DimensionMismatch("backbone forward: input has " + std::to_string(x.cols) +
                                " columns, spec wants " + std::to_string(spec.input_dim));
    }
    auto apply_film = [](const Matrix& z, const FilmLayer& l) {
        return ew_add(ew_mul(z, Matrix::row_vector(l.gamma)), Matrix::row_vector(l.beta));
    };
    if (spec.kind == BackboneKind::Identity) return apply_film(x, psi.layers[0]);
    Matrix h = x;
    for (std::size_t k = 0; k < spec.weights.size(); ++k) {
        Matrix z = ew_add(matmul(h, spec.weights[k]), spec.biases[k]);
        bool last = (k + 1 == spec.weights.size());
        if (!last) z = standardize_rows(z, kNormEps);
        z = apply_film(z, psi.layers[k]);
        h = last ? std::move(z) : map_relu(z);
    }
    return h;
}

// ---- magnitude summaries (box-plot data) --------------------------------

struct FilmLayerStats {
    std::size_t layer = 0;
    std::size_t width = 0;
    // five-number summaries of |gamma - 1| and |beta|
    double gamma_min = 0, gamma_q25 = 0, gamma_median = 0, gamma_q75 = 0, gamma_max = 0;
    double beta_min = 0, beta_q25 = 0, beta_median = 0, beta_q75 = 0, beta_max = 0;
};

// Linear-interpolation quantile on sorted data (the convention plotting
// stacks default to).
inline double quantile_sorted(const std::vector<double>& sorted, double q) {
    if (sorted.empty()) throw Error("quantile: empty sample");
    if (sorted.size() == 1) return sorted[0];
    double h = q * static_cast<double>(sorted.size() - 1);
    std::size_t lo = static_cast<std::size_t>(h);
    if (lo + 1 >= sorted.size()) return sorted.back();
    double frac = h - static_cast<double>(lo);
    return sorted[lo] + frac * (sorted[lo + 1] - sorted[lo]);
}

inline std::vector<FilmLayerStats> film_magnitude_stats(const FilmParams& psi) {
    std::vector<FilmLayerStats> out;
    out.reserve(psi.layers.size());
    for (std::size_t k = 0; k < psi.layers.size(); ++k) {
        const FilmLayer& l = psi.layers[k];
        std::vector<double> g, b;
        g.reserve(l.width());
        b.reserve(l.width());
        for (double v : l.gamma) g.push_back(std::fabs(v - 1.0));
        for (double v : l.beta) b.push_back(std::fabs(v));
        std::sort(g.begin(), g.end());
        std::sort(b.begin(), b.end());
        FilmLayerStats s;
        s.layer = k;
        s.width = l.width();
        s.gamma_min = g.front();
        s.gamma_q25 = quantile_sorted(g, 0.25);
        s.gamma_median = quantile_sorted(g, 0.5);
        s.gamma_q75 = quantile_sorted(g, 0.75);
        s.gamma_max = g.back();
        s.beta_min = b.front();
        s.beta_q25 = quantile_sorted(b, 0.25);
        s.beta_median = quantile_sorted(b, 0.5);
        s.beta_q75 = quantile_sorted(b, 0.75);
        s.beta_max = b.back();
        out.push_back(s);
    }
    return out;
}

}  // namespace fit
