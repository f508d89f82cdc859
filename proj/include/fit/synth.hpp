#pragma once

// Synthetic channel-distortion benchmark.  Latent classes live on a
// scaled simplex with Gaussian noise; every observed channel is passed
// through a fixed affine distortion x_j = s_j * z_j + t_j shared across
// classes.  A FiLM layer on an identity backbone can undo the distortion
// exactly with gamma_j = 1/s_j, beta_j = -t_j/s_j — that setting is
// returned as the oracle.

#include <cmath>
#include <cstdint>

#include "fit/backbone.hpp"
#include "fit/dataset.hpp"
#include "fit/errors.hpp"
#include "fit/rng.hpp"

namespace fit {

struct SynthSpec {
    std::size_t classes = 10;
    std::size_t latent_dim = 16;
    double separation = 4.0;        // simplex scale
    double cov_scale = 1.0;         // latent noise std
    double distortion_scale = 5.0;  // s_j log-uniform in [1/scale, scale]
    double shift_range = 2.0;       // t_j uniform in [-range, range]
    std::size_t train_per_class = 10;
    std::size_t test_per_class = 100;
    std::uint64_t seed = 0;

    void validate() const {
        if (classes < 2) throw ConfigError("synth: need at least 2 classes");
        if (latent_dim < classes) {
            throw ConfigError("synth: latent_dim must be >= classes (simplex means)");
        }
        if (distortion_scale < 1.0) {
            throw ConfigError("synth: distortion_scale must be >= 1");
        }
        if (train_per_class == 0 || test_per_class == 0) {
            throw ConfigError("synth: per-class sizes must be positive");
        }
    }
};

struct SynthData {
    LabelledDataset train;
    LabelledDataset test;
    FilmParams oracle_film;           // inverts the distortion on an identity backbone
    std::vector<double> scales;       // s_j
    std::vector<double> shifts;       // t_j
};

namespace detail {

inline LabelledDataset draw_split(const SynthSpec& spec, std::size_t per_class,
                                  const std::vector<double>& s, const std::vector<double>& t,
                                  Rng& rng) {
    LabelledDataset d;
    d.num_classes = spec.classes;
    d.features = Matrix(spec.classes * per_class, spec.latent_dim);
    d.labels.reserve(d.features.rows);
    std::size_t row = 0;
    for (std::size_t c = 0; c < spec.classes; ++c) {
        for (std::size_t i = 0; i < per_class; ++i, ++row) {
            for (std::size_t j = 0; j < spec.latent_dim; ++j) {
                double z = spec.cov_scale * rng.normal();
                if (j == c) z += spec.separation;
                d.features(row, j) = s[j] * z + t[j];
            }
            d.labels.push_back(static_cast<int>(c));
        }
    }
    return d;
}

}  // namespace detail

inline SynthData generate_synth(const SynthSpec& spec) {
    spec.validate();

    // Distortion first (own stream): s_j log-uniform, t_j uniform.
    Rng drng(derive_seed(spec.seed, {0xD157u}));
    std::vector<double> s(spec.latent_dim), t(spec.latent_dim);
    double log_scale = std::log(spec.distortion_scale);
    for (std::size_t j = 0; j < spec.latent_dim; ++j) {
        s[j] = std::exp(drng.uniform(-log_scale, log_scale));
        t[j] = drng.uniform(-spec.shift_range, spec.shift_range);
    }

    SynthData out;
    out.scales = s;
    out.shifts = t;
    Rng train_rng(derive_seed(spec.seed, {0x7124u}));
    Rng test_rng(derive_seed(spec.seed, {0x7357u}));
    out.train = detail::draw_split(spec, spec.train_per_class, s, t, train_rng);
    out.test = detail::draw_split(spec, spec.test_per_class, s, t, test_rng);

    FilmLayer layer;
    layer.gamma.resize(spec.latent_dim);
    layer.beta.resize(spec.latent_dim);
    for (std::size_t j = 0; j < spec.latent_dim; ++j) {
        layer.gamma[j] = 1.0 / s[j];
        layer.beta[j] = -t[j] / s[j];
    }
    out.oracle_film.layers.push_back(std::move(layer));
    return out;
}

}  // namespace fit
