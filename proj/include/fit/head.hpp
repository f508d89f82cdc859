#pragma once

// Gaussian Naive Bayes head: maximum-likelihood statistics, shrinkage
// covariance mixing (QDA / LDA / ProtoNets), prediction, the compact LDA
// cache, a linear-head baseline, and parameter accounting.
//
// Every plain function here has a tape twin built from the same matrix
// kernels in the same order, so episode losses computed on the tape agree
// with the straight-line pipeline to machine precision.

#include <cstdint>
#include <string>
#include <vector>

#include "fit/autodiff.hpp"
#include "fit/errors.hpp"
#include "fit/matrix.hpp"

namespace fit {

inline const double kLog2Pi = std::log(2.0 * 3.14159265358979323846);

enum class HeadVariant { Qda, Lda, Proto };

inline const char* variant_name(HeadVariant v) {
    switch (v) {
        case HeadVariant::Qda:
            return "qda";
        case HeadVariant::Lda:
            return "lda";
        case HeadVariant::Proto:
            return "protonets";
    }
    return "?";
}

inline HeadVariant parse_variant(const std::string& s) {
    if (s == "qda") return HeadVariant::Qda;
    if (s == "lda") return HeadVariant::Lda;
    if (s == "protonets" || s == "proto") return HeadVariant::Proto;
    throw ConfigError("unknown head variant '" + s + "' (expected qda, lda or protonets)");
}

// Shrinkage mixing weights.  Trained in log-space (positivity), exposed
// as positive reals; these are the canonical values.
struct CovarianceWeights {
    double e1 = 0.5;
    double e2 = 0.5;
    double e3 = 1.0;
};

struct HeadStatistics {
    std::size_t classes = 0;
    std::size_t dim = 0;
    std::size_t total = 0;
    std::vector<std::size_t> counts;
    std::vector<double> priors;      // counts / total
    Matrix means;                    // C x d
    std::vector<Matrix> class_covs;  // biased (1/N_c), d x d
    Matrix task_cov;                 // biased covariance about the global mean
};

// Indices of the rows belonging to each class, ascending.
inline std::vector<std::vector<std::size_t>> class_members(const std::vector<int>& labels,
                                                           std::size_t classes) {
    std::vector<std::vector<std::size_t>> m(classes);
    for (std::size_t i = 0; i < labels.size(); ++i) {
        int y = labels[i];
        if (y < 0 || static_cast<std::size_t>(y) >= classes) {
            throw Error("label " + std::to_string(y) + " outside [0, " + std::to_string(classes) +
                        ") at row " + std::to_string(i));
        }
        m[static_cast<std::size_t>(y)].push_back(i);
    }
    return m;
}

inline Matrix take_rows(const Matrix& a, const std::vector<std::size_t>& rows) {
    Matrix out(rows.size(), a.cols);
    for (std::size_t i = 0; i < rows.size(); ++i)
        for (std::size_t j = 0; j < a.cols; ++j) out(i, j) = a(rows[i], j);
    return out;
}

inline HeadStatistics estimate_stats(const Matrix& embeddings, const std::vector<int>& labels,
                                     std::size_t num_classes) {
    if (embeddings.rows == 0) throw EmptyDataset("estimate_stats: no embeddings");
    if (embeddings.rows != labels.size()) {
        throw DimensionMismatch("estimate_stats: row/label count mismatch");
    }
    if (num_classes == 0) throw EmptyClass("estimate_stats: zero classes");

    auto members = class_members(labels, num_classes);
    HeadStatistics s;
    s.classes = num_classes;
    s.dim = embeddings.cols;
    s.total = embeddings.rows;
    s.counts.resize(num_classes);
    s.priors.resize(num_classes);
    s.means = Matrix(num_classes, s.dim);
    s.class_covs.reserve(num_classes);

    double inv_total = 1.0 / static_cast<double>(s.total);
    for (std::size_t c = 0; c < num_classes; ++c) {
        if (members[c].empty()) {
            throw EmptyClass("estimate_stats: class " + std::to_string(c) + " has no examples");
        }
        s.counts[c] = members[c].size();
        s.priors[c] = static_cast<double>(s.counts[c]) * inv_total;

        Matrix mc = take_rows(embeddings, members[c]);
        double inv_n = 1.0 / static_cast<double>(mc.rows);
        Matrix mean = ew_mul(sum_rows(mc), Matrix::scalar(inv_n));
        for (std::size_t j = 0; j < s.dim; ++j) s.means(c, j) = mean(0, j);
        Matrix cent = ew_sub(mc, mean);
        s.class_covs.push_back(ew_mul(matmul(transpose(cent), cent), Matrix::scalar(inv_n)));
    }
    Matrix gmean = ew_mul(sum_rows(embeddings), Matrix::scalar(inv_total));
    Matrix gcent = ew_sub(embeddings, gmean);
    s.task_cov = ew_mul(matmul(transpose(gcent), gcent), Matrix::scalar(inv_total));
    return s;
}

// Mixed covariances: QDA -> one matrix per class; LDA -> a single shared
// matrix; ProtoNets -> empty (identity, never materialized).
inline std::vector<Matrix> mix_covariance(const HeadStatistics& stats,
                                          const CovarianceWeights& e, HeadVariant variant) {
    std::vector<Matrix> out;
    if (variant == HeadVariant::Proto) return out;
    if (!(e.e1 >= 0.0) || !(e.e2 >= 0.0) || !(e.e3 > 0.0)) {
        throw ConfigError("mix_covariance: weights must be positive");
    }
    Matrix eye = Matrix::identity(stats.dim);
    Matrix task_term = ew_mul(stats.task_cov, Matrix::scalar(e.e2));
    Matrix reg = ew_mul(eye, Matrix::scalar(e.e3));
    if (variant == HeadVariant::Lda) {
        out.push_back(ew_add(task_term, reg));
        return out;
    }
    out.reserve(stats.classes);
    for (std::size_t c = 0; c < stats.classes; ++c) {
        Matrix class_term = ew_mul(stats.class_covs[c], Matrix::scalar(e.e1));
        out.push_back(ew_add(ew_add(class_term, task_term), reg));
    }
    return out;
}

// ---- prediction-ready cache ---------------------------------------------

struct ClassifierCache {
    HeadVariant variant = HeadVariant::Proto;
    std::size_t classes = 0;
    std::size_t dim = 0;
    bool with_priors = false;       // ProtoNets drops the prior term by default
    std::vector<double> log_priors;  // size C when with_priors

    Matrix means;  // C x d, all variants

    // QDA: one factor/log-det per class.  LDA: a single shared factor for
    // the test-point quadratic term.
    std::vector<CholeskyFactor> chols;
    std::vector<double> log_dets;

    // Compact LDA vectors: lin row c = Sigma^{-1} mu_c, quad[c] =
    // mu_c^T Sigma^{-1} mu_c.
    Matrix lin;
    std::vector<double> quad;

    // Head values held by the cache (Table-1 style accounting; priors and
    // the shared factor are derived bookkeeping, not counted).
    std::uint64_t stored_head_values() const {
        std::uint64_t c = classes, d = dim;
        switch (variant) {
            case HeadVariant::Qda:
                return c * d + c * (d * (d + 1) / 2);  // means + triangular factors
            case HeadVariant::Lda:
                return c * (d + 1);  // v_c and s_c
            case HeadVariant::Proto:
                return c * d;
        }
        return 0;
    }
};

inline ClassifierCache compress_lda(const HeadStatistics& stats, const Matrix& sigma_lda) {
    ClassifierCache cache;
    cache.variant = HeadVariant::Lda;
    cache.classes = stats.classes;
    cache.dim = stats.dim;
    cache.with_priors = true;
    cache.log_priors.reserve(stats.classes);
    for (double p : stats.priors) cache.log_priors.push_back(std::log(p));
    cache.means = stats.means;

    CholeskyFactor f = cholesky(sigma_lda);
    // v_c = Sigma^{-1} mu_c for all classes at once.
    cache.lin = transpose(chol_solve(f, transpose(stats.means)));
    cache.quad.resize(stats.classes);
    for (std::size_t c = 0; c < stats.classes; ++c) {
        double s = 0.0;
        for (std::size_t j = 0; j < stats.dim; ++j) s += stats.means(c, j) * cache.lin(c, j);
        cache.quad[c] = s;
    }
    cache.log_dets.push_back(chol_logdet(f));
    cache.chols.push_back(std::move(f));
    return cache;
}

inline ClassifierCache build_cache(const HeadStatistics& stats, const CovarianceWeights& e,
                                   HeadVariant variant, bool proto_priors = false) {
    ClassifierCache cache;
    cache.variant = variant;
    cache.classes = stats.classes;
    cache.dim = stats.dim;
    cache.means = stats.means;
    switch (variant) {
        case HeadVariant::Proto: {
            cache.with_priors = proto_priors;
            if (proto_priors) {
                for (double p : stats.priors) cache.log_priors.push_back(std::log(p));
            }
            return cache;
        }
        case HeadVariant::Lda:
            return compress_lda(stats, mix_covariance(stats, e, variant)[0]);
        case HeadVariant::Qda: {
            cache.with_priors = true;
            for (double p : stats.priors) cache.log_priors.push_back(std::log(p));
            std::vector<Matrix> sigmas = mix_covariance(stats, e, variant);
            cache.chols.reserve(stats.classes);
            cache.log_dets.reserve(stats.classes);
            for (std::size_t c = 0; c < stats.classes; ++c) {
                CholeskyFactor f = cholesky(sigmas[c]);
                cache.log_dets.push_back(chol_logdet(f));
                cache.chols.push_back(std::move(f));
            }
            return cache;
        }
    }
    throw Error("build_cache: bad variant");
}

namespace detail {
inline Matrix row_of(const Matrix& m, std::size_t r) {
    Matrix out(1, m.cols);
    for (std::size_t j = 0; j < m.cols; ++j) out(0, j) = m(r, j);
    return out;
}
}  // namespace detail

// Unnormalized per-class scores (log joint for QDA/LDA, negative squared
// distance for ProtoNets).  Kept separate from the normalized posterior
// so the episode loss and prediction share one formula.
inline std::vector<double> class_logits(const ClassifierCache& cache, const Matrix& x) {
    if (x.rows != 1 || x.cols != cache.dim) {
        throw DimensionMismatch("class_logits: expected a 1x" + std::to_string(cache.dim) +
                                " embedding row, got " + x.shape_str());
    }
    std::vector<double> logits(cache.classes);
    double dterm = static_cast<double>(cache.dim) * kLog2Pi;
    for (std::size_t c = 0; c < cache.classes; ++c) {
        Matrix delta = ew_sub(x, detail::row_of(cache.means, c));
        double v = 0.0;
        switch (cache.variant) {
            case HeadVariant::Proto: {
                double q = matmul(delta, transpose(delta))(0, 0);
                v = -q;
                if (cache.with_priors) v += cache.log_priors[c];
                break;
            }
            case HeadVariant::Qda: {
                Matrix s = chol_solve(cache.chols[c], transpose(delta));
                double q = matmul(delta, s)(0, 0);
                v = cache.log_priors[c] - 0.5 * (q + cache.log_dets[c] + dterm);
                break;
            }
            case HeadVariant::Lda: {
                // Compact form plus the class-independent test-point terms
                // (they cancel under normalization but keep the scores
                // equal to full log joints).
                Matrix sx = chol_solve(cache.chols[0], transpose(x));
                double xq = matmul(x, sx)(0, 0);
                double xv = 0.0;
                for (std::size_t j = 0; j < cache.dim; ++j) xv += x(0, j) * cache.lin(c, j);
                v = cache.log_priors[c] + xv - 0.5 * cache.quad[c] -
                    0.5 * (xq + cache.log_dets[0] + dterm);
                break;
            }
        }
        logits[c] = v;
    }
    return logits;
}

inline std::vector<double> predict_log_probs(const ClassifierCache& cache, const Matrix& x) {
    if (cache.classes < 2) throw Error("predict_log_probs: cache needs >= 2 classes");
    std::vector<double> logits = class_logits(cache, x);
    Matrix lse = logsumexp_rows(Matrix::row_vector(logits));
    for (double& v : logits) v -= lse(0, 0);
    return logits;
}

// Lowest index wins ties.
inline int argmax_label(const std::vector<double>& scores) {
    std::size_t best = 0;
    for (std::size_t c = 1; c < scores.size(); ++c) {
        if (scores[c] > scores[best]) best = c;
    }
    return static_cast<int>(best);
}

inline double accuracy(const ClassifierCache& cache, const Matrix& embeddings,
                       const std::vector<int>& labels) {
    if (embeddings.rows == 0) throw EmptyDataset("accuracy: no examples");
    std::size_t hits = 0;
    for (std::size_t i = 0; i < embeddings.rows; ++i) {
        std::vector<double> logits = class_logits(cache, detail::row_of(embeddings, i));
        if (argmax_label(logits) == labels[i]) ++hits;
    }
    return static_cast<double>(hits) / static_cast<double>(embeddings.rows);
}

// ---- parameter accounting (Table-1 style) --------------------------------

enum class ModelKind { FitQda, FitLda, FitProto, BitLinear };

inline ModelKind parse_model_kind(const std::string& s) {
    if (s == "qda") return ModelKind::FitQda;
    if (s == "lda") return ModelKind::FitLda;
    if (s == "protonets" || s == "proto") return ModelKind::FitProto;
    if (s == "bit" || s == "bit-linear") return ModelKind::BitLinear;
    throw ConfigError("unknown model kind '" + s + "'");
}

// Updateable (per-task) parameter count.  `psi_or_theta` is |psi| for the
// FiT variants and |theta| for the full-fine-tuning linear baseline.
inline std::uint64_t count_updateable(ModelKind kind, std::uint64_t classes, std::uint64_t dim,
                                      std::uint64_t psi_or_theta) {
    switch (kind) {
        case ModelKind::FitQda:
            return psi_or_theta + classes * dim + classes * (dim * (dim + 1) / 2) + 3;
        case ModelKind::FitLda:
            return psi_or_theta + classes * (dim + 1) + 2;
        case ModelKind::FitProto:
            return psi_or_theta + classes * dim;
        case ModelKind::BitLinear:
            return psi_or_theta + classes * dim;
    }
    throw Error("count_updateable: bad kind");
}

inline std::uint64_t count_shared(ModelKind kind, std::uint64_t theta) {
    return kind == ModelKind::BitLinear ? 0 : theta;
}

inline double rmus(std::uint64_t updateable, std::uint64_t reference_updateable) {
    if (reference_updateable == 0) throw Error("rmus: reference count must be positive");
    return static_cast<double>(updateable) / static_cast<double>(reference_updateable);
}

// ---- linear-head baseline -------------------------------------------------

struct LinearHead {
    Matrix weight;             // d x C
    std::vector<double> bias;  // C

    static LinearHead zeros(std::size_t dim, std::size_t classes) {
        return LinearHead{Matrix(dim, classes), std::vector<double>(classes, 0.0)};
    }
};

inline Matrix linear_logits(const LinearHead& head, const Matrix& emb) {
    return ew_add(matmul(emb, head.weight), Matrix::row_vector(head.bias));
}

// Negative log-softmax at the label.
inline double linear_loss(const LinearHead& head, const Matrix& emb_row, int label) {
    Matrix logits = linear_logits(head, emb_row);
    if (label < 0 || static_cast<std::size_t>(label) >= logits.cols) {
        throw Error("linear_loss: label out of range");
    }
    Matrix lse = logsumexp_rows(logits);
    return lse(0, 0) - logits(0, static_cast<std::size_t>(label));
}

struct LinearLossGrad {
    double loss = 0.0;
    Matrix d_weight;
    std::vector<double> d_bias;
};

inline LinearLossGrad linear_loss_grad(const LinearHead& head, const Matrix& emb_row, int label) {
    ad::Tape t;
    ad::NodeId w = t.leaf(head.weight);
    ad::NodeId b = t.leaf(Matrix::row_vector(head.bias));
    ad::NodeId logits = t.add(t.matmul(t.constant(emb_row), w), b);
    Matrix onehot(1, head.bias.size());
    onehot(0, static_cast<std::size_t>(label)) = 1.0;
    ad::NodeId picked = t.sum_all(t.mul(logits, t.constant(onehot)));
    ad::NodeId loss = t.sub(t.sum_all(t.logsumexp_rows(logits)), picked);
    t.backward(loss);
    LinearLossGrad g;
    g.loss = t.value(loss)(0, 0);
    g.d_weight = t.grad(w);
    g.d_bias = t.grad(b).data;
    return g;
}

// ---- tape twins -----------------------------------------------------------
//
// Statistics and class scores rebuilt as tape ops.  Selector matrices are
// 0/1 constants, so sums run over class members in ascending row order —
// the same additions, in the same order, as the plain code above.

struct TapeStats {
    std::size_t classes = 0;
    std::size_t dim = 0;
    std::vector<std::size_t> counts;
    std::vector<double> log_priors;     // constants w.r.t. psi and e
    std::vector<ad::NodeId> means;      // 1 x d
    std::vector<ad::NodeId> class_covs;  // d x d
    ad::NodeId task_cov = -1;
};

inline TapeStats build_stats(ad::Tape& t, ad::NodeId embeddings, const std::vector<int>& labels,
                             std::size_t num_classes) {
    const Matrix& z = t.value(embeddings);
    if (z.rows != labels.size()) throw DimensionMismatch("build_stats: row/label count mismatch");
    auto members = class_members(labels, num_classes);

    TapeStats s;
    s.classes = num_classes;
    s.dim = z.cols;
    s.counts.resize(num_classes);
    double inv_total = 1.0 / static_cast<double>(z.rows);
    for (std::size_t c = 0; c < num_classes; ++c) {
        if (members[c].empty()) {
            throw EmptyClass("build_stats: class " + std::to_string(c) + " has no examples");
        }
        s.counts[c] = members[c].size();
        s.log_priors.push_back(
            std::log(static_cast<double>(members[c].size()) * inv_total));
        Matrix sel(members[c].size(), z.rows);
        for (std::size_t i = 0; i < members[c].size(); ++i) sel(i, members[c][i]) = 1.0;
        ad::NodeId rows = t.matmul(t.constant(std::move(sel)), embeddings);
        double inv_n = 1.0 / static_cast<double>(members[c].size());
        ad::NodeId mean = ad::scale(t, t.sum_rows(rows), inv_n);
        ad::NodeId cent = t.sub(rows, mean);
        s.means.push_back(mean);
        s.class_covs.push_back(ad::scale(t, t.matmul(t.transpose(cent), cent), inv_n));
    }
    ad::NodeId gmean = ad::scale(t, t.sum_rows(embeddings), inv_total);
    ad::NodeId gcent = t.sub(embeddings, gmean);
    s.task_cov = ad::scale(t, t.matmul(t.transpose(gcent), gcent), inv_total);
    return s;
}

// e exposed on the tape: one trainable 1x3 leaf holding log e, sliced
// into scalars after exponentiation.
struct TapeE {
    ad::NodeId log_e = -1;  // the leaf
    ad::NodeId e1 = -1, e2 = -1, e3 = -1;
};

inline TapeE e_leaf(ad::Tape& t, const CovarianceWeights& e, bool trainable = true) {
    Matrix le(1, 3);
    le(0, 0) = std::log(e.e1);
    le(0, 1) = std::log(e.e2);
    le(0, 2) = std::log(e.e3);
    TapeE out;
    out.log_e = trainable ? t.leaf(std::move(le)) : t.constant(std::move(le));
    ad::NodeId pos = t.exp(out.log_e);
    auto pick = [&](std::size_t i) {
        Matrix sel(3, 1);
        sel(i, 0) = 1.0;
        return t.matmul(pos, t.constant(std::move(sel)));
    };
    out.e1 = pick(0);
    out.e2 = pick(1);
    out.e3 = pick(2);
    return out;
}

inline std::vector<ad::NodeId> mix_covariance_nodes(ad::Tape& t, const TapeStats& stats,
                                                    const TapeE& e, HeadVariant variant) {
    std::vector<ad::NodeId> out;
    if (variant == HeadVariant::Proto) return out;
    ad::NodeId eye = t.constant(Matrix::identity(stats.dim));
    ad::NodeId task_term = t.mul(stats.task_cov, e.e2);
    ad::NodeId reg = t.mul(eye, e.e3);
    if (variant == HeadVariant::Lda) {
        out.push_back(t.add(task_term, reg));
        return out;
    }
    out.reserve(stats.classes);
    for (std::size_t c = 0; c < stats.classes; ++c) {
        ad::NodeId class_term = t.mul(stats.class_covs[c], e.e1);
        out.push_back(t.add(t.add(class_term, task_term), reg));
    }
    return out;
}

// Per-class scores for a query batch: (Q x C) node mirroring class_logits.
inline ad::NodeId build_logits(ad::Tape& t, const TapeStats& stats,
                               const std::vector<ad::NodeId>& sigmas, ad::NodeId query,
                               HeadVariant variant, bool proto_priors = false) {
    double dterm = static_cast<double>(stats.dim) * kLog2Pi;
    std::vector<ad::NodeId> cols;
    cols.reserve(stats.classes);
    for (std::size_t c = 0; c < stats.classes; ++c) {
        ad::NodeId delta = t.sub(query, stats.means[c]);
        ad::NodeId logit;
        switch (variant) {
            case HeadVariant::Proto: {
                ad::NodeId quad = t.sum_cols(t.mul(delta, delta));
                logit = ad::neg(t, quad);
                if (proto_priors) logit = t.add(logit, t.scalar(stats.log_priors[c]));
                break;
            }
            case HeadVariant::Qda: {
                ad::NodeId s = t.psd_solve(sigmas[c], t.transpose(delta));
                ad::NodeId quad = t.sum_cols(t.mul(delta, t.transpose(s)));
                ad::NodeId inner = t.add(quad, t.add(t.psd_logdet(sigmas[c]), t.scalar(dterm)));
                logit = t.add(ad::scale(t, inner, -0.5), t.scalar(stats.log_priors[c]));
                break;
            }
            case HeadVariant::Lda: {
                ad::NodeId s = t.psd_solve(sigmas[0], t.transpose(delta));
                ad::NodeId quad = t.sum_cols(t.mul(delta, t.transpose(s)));
                ad::NodeId inner = t.add(quad, t.add(t.psd_logdet(sigmas[0]), t.scalar(dterm)));
                logit = t.add(ad::scale(t, inner, -0.5), t.scalar(stats.log_priors[c]));
                break;
            }
        }
        cols.push_back(logit);
    }
    return t.concat_cols(cols);
}

// Sum over queries of the true-class log posterior (the episode objective,
// to be maximized).
inline ad::NodeId build_logprob_sum(ad::Tape& t, ad::NodeId logits,
                                    const std::vector<int>& labels) {
    const Matrix& lv = t.value(logits);
    if (lv.rows != labels.size()) {
        throw DimensionMismatch("build_logprob_sum: logit rows != label count");
    }
    Matrix onehot(lv.rows, lv.cols);
    for (std::size_t i = 0; i < labels.size(); ++i) {
        onehot(i, static_cast<std::size_t>(labels[i])) = 1.0;
    }
    ad::NodeId true_logit = t.sum_cols(t.mul(logits, t.constant(std::move(onehot))));
    ad::NodeId lse = t.logsumexp_rows(logits);
    return t.sum_all(t.sub(true_logit, lse));
}

}  // namespace fit
