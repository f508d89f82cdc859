#pragma once

// The episodic fine-tuning protocol: dataset splitting, task sampling,
// the episode objective (sum of query log posteriors, maximized), a
// small Adam, and the training loop with the 1-shot shortcut.

#include <chrono>
#include <cmath>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "fit/autodiff.hpp"
#include "fit/backbone.hpp"
#include "fit/dataset.hpp"
#include "fit/errors.hpp"
#include "fit/head.hpp"
#include "fit/rng.hpp"

namespace fit {

enum class SplitMode { Auto, Split, NoSplit, UseAll };

inline const char* split_mode_name(SplitMode m) {
    switch (m) {
        case SplitMode::Auto:
            return "auto";
        case SplitMode::Split:
            return "split";
        case SplitMode::NoSplit:
            return "no-split";
        case SplitMode::UseAll:
            return "use-all";
    }
    return "?";
}

inline SplitMode parse_split_mode(const std::string& s) {
    if (s == "auto") return SplitMode::Auto;
    if (s == "split") return SplitMode::Split;
    if (s == "no-split" || s == "nosplit") return SplitMode::NoSplit;
    if (s == "use-all" || s == "useall") return SplitMode::UseAll;
    throw ConfigError("unknown split mode '" + s + "'");
}

struct TrainConfig {
    double learning_rate = 0.0035;
    std::size_t iterations = 400;
    std::size_t support_set_size = 100;
    SplitMode split_mode = SplitMode::Auto;
    std::size_t no_split_threshold = 1000;  // auto: split below, no-split at/above
    std::uint64_t seed = 0;
    bool stop_gradient_support = false;
    bool shuffle_before_split = false;
    bool proto_priors = false;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_eps = 1e-8;
    CovarianceWeights e_init{};

    void validate() const {
        if (!(learning_rate > 0.0)) throw ConfigError("learning_rate must be > 0");
        if (support_set_size < 1) throw ConfigError("support_set_size must be >= 1");
        if (!(adam_beta1 >= 0 && adam_beta1 < 1) || !(adam_beta2 >= 0 && adam_beta2 < 1)) {
            throw ConfigError("adam decay rates must lie in [0, 1)");
        }
        if (!(e_init.e1 > 0 && e_init.e2 > 0 && e_init.e3 > 0)) {
            throw ConfigError("covariance weight initialization must be positive");
        }
    }
};

struct Task {
    LabelledDataset support;
    LabelledDataset query;
    std::vector<int> classes;  // global class ids, ascending; labels above are local
};

// Algorithm-A.1 style split: per class, the first ceil(N_c/2) examples in
// dataset order go to the train half, the rest to the test half.
inline std::pair<LabelledDataset, LabelledDataset> split_dataset(const LabelledDataset& d) {
    if (d.size() == 0) throw EmptyDataset("split_dataset: empty dataset");
    auto members = class_members(d.labels, d.num_classes);
    std::vector<std::size_t> train_rows, test_rows;
    for (std::size_t c = 0; c < d.num_classes; ++c) {
        std::size_t n = members[c].size();
        if (n < 2) {
            throw TooFewShots("split_dataset: class " + std::to_string(c) + " has " +
                              std::to_string(n) + " example(s); need at least 2");
        }
        std::size_t k = (n + 1) / 2;  // ceil(n/2)
        for (std::size_t i = 0; i < n; ++i) {
            (i < k ? train_rows : test_rows).push_back(members[c][i]);
        }
    }
    std::sort(train_rows.begin(), train_rows.end());
    std::sort(test_rows.begin(), test_rows.end());
    return {d.subset(train_rows), d.subset(test_rows)};
}

namespace detail {

inline LabelledDataset make_local(const LabelledDataset& d, const std::vector<std::size_t>& rows,
                                  const std::vector<int>& classes) {
    LabelledDataset out = d.subset(rows);
    std::vector<int> local(d.num_classes, -1);
    for (std::size_t k = 0; k < classes.size(); ++k) {
        local[static_cast<std::size_t>(classes[k])] = static_cast<int>(k);
    }
    for (int& y : out.labels) y = local[static_cast<std::size_t>(y)];
    out.num_classes = classes.size();
    return out;
}

}  // namespace detail

// Algorithm-A.2 style task sampler.  way is uniform on
// [min(C,5), min(C, support_set_size)]; support shots per class are
// min(available, max(round(support_set_size/way), 1)); query shots are
// min(available, max(1, floor(2000/way))).  All draws are without
// replacement and per-class-local.
inline Task sample_task(const LabelledDataset& d_train, const LabelledDataset& d_test,
                        std::size_t support_set_size, Rng& rng) {
    if (d_train.size() == 0 || d_test.size() == 0) {
        throw EmptyDataset("sample_task: empty split");
    }
    if (d_train.num_classes != d_test.num_classes) {
        throw DimensionMismatch("sample_task: splits disagree on the class vocabulary");
    }
    std::size_t c_total = d_train.num_classes;
    int lo = static_cast<int>(c_total < 5 ? c_total : 5);
    int hi = static_cast<int>(c_total < support_set_size ? c_total : support_set_size);
    if (lo > hi) lo = hi;
    int way = rng.randint(lo, hi);

    std::vector<int> classes = rng.choice(static_cast<int>(c_total), way);
    std::sort(classes.begin(), classes.end());

    long balanced = std::lround(static_cast<double>(support_set_size) / way);
    std::size_t support_shots = balanced < 1 ? 1 : static_cast<std::size_t>(balanced);
    std::size_t query_cap = 2000 / static_cast<std::size_t>(way);
    if (query_cap < 1) query_cap = 1;

    auto train_members = class_members(d_train.labels, c_total);
    auto test_members = class_members(d_test.labels, c_total);

    auto draw = [&rng](const std::vector<std::size_t>& members, std::size_t want) {
        std::size_t k = want < members.size() ? want : members.size();
        std::vector<int> picks = rng.choice(static_cast<int>(members.size()),
                                            static_cast<int>(k));
        std::sort(picks.begin(), picks.end());
        std::vector<std::size_t> rows;
        rows.reserve(k);
        for (int p : picks) rows.push_back(members[static_cast<std::size_t>(p)]);
        return rows;
    };

    std::vector<std::size_t> support_rows, query_rows;
    for (int c : classes) {
        const auto& m = train_members[static_cast<std::size_t>(c)];
        if (m.empty()) throw EmptyClass("sample_task: class " + std::to_string(c) + " empty");
        auto rows = draw(m, support_shots);
        support_rows.insert(support_rows.end(), rows.begin(), rows.end());
    }
    for (int c : classes) {
        const auto& m = test_members[static_cast<std::size_t>(c)];
        if (m.empty()) throw EmptyClass("sample_task: class " + std::to_string(c) +
                                        " missing from the query split");
        auto rows = draw(m, query_cap);
        query_rows.insert(query_rows.end(), rows.begin(), rows.end());
    }

    Task task;
    task.classes = std::move(classes);
    task.support = detail::make_local(d_train, support_rows, task.classes);
    task.query = detail::make_local(d_test, query_rows, task.classes);
    return task;
}

// ---- episode objective ----------------------------------------------------

// Sum over the query set of the true-class log posterior under the head
// configured from the support set.  This is the quantity the trainer
// maximizes; plain straight-line evaluation.
inline double episode_loss(const Task& task, const BackboneSpec& spec, const FilmParams& psi,
                           const CovarianceWeights& e, HeadVariant variant,
                           bool proto_priors = false) {
    Matrix semb = backbone_forward(spec, psi, task.support.features);
    HeadStatistics stats = estimate_stats(semb, task.support.labels, task.classes.size());
    ClassifierCache cache = build_cache(stats, e, variant, proto_priors);
    Matrix qemb = backbone_forward(spec, psi, task.query.features);
    double total = 0.0;
    for (std::size_t i = 0; i < qemb.rows; ++i) {
        std::vector<double> lp = predict_log_probs(cache, detail::row_of(qemb, i));
        total += lp[static_cast<std::size_t>(task.query.labels[i])];
    }
    return total;
}

// Tape twin of episode_loss; exposes the leaves so the trainer and the
// gradient tests can reach them.
struct EpisodeGraph {
    ad::Tape tape;
    ad::NodeId loss = -1;  // scalar, to be maximized
    FilmNodes film;
    ad::NodeId log_e = -1;  // -1 when the variant has no e
};

inline EpisodeGraph build_episode_graph(const Task& task, const BackboneSpec& spec,
                                        const FilmParams& psi, const CovarianceWeights& e,
                                        HeadVariant variant, bool stop_gradient_support = false,
                                        bool proto_priors = false) {
    EpisodeGraph g;
    ad::Tape& t = g.tape;
    g.film = film_leaves(t, psi, true);

    ad::NodeId semb;
    if (stop_gradient_support) {
        // Head statistics treated as constants: embed the support set
        // outside the tape.
        semb = t.constant(backbone_forward(spec, psi, task.support.features));
    } else {
        semb = backbone_forward(t, spec, g.film, t.constant(task.support.features));
    }
    TapeStats stats = build_stats(t, semb, task.support.labels, task.classes.size());

    std::vector<ad::NodeId> sigmas;
    if (variant != HeadVariant::Proto) {
        TapeE te = e_leaf(t, e, true);
        g.log_e = te.log_e;
        sigmas = mix_covariance_nodes(t, stats, te, variant);
    }
    ad::NodeId qemb = backbone_forward(t, spec, g.film, t.constant(task.query.features));
    ad::NodeId logits = build_logits(t, stats, sigmas, qemb, variant, proto_priors);
    g.loss = build_logprob_sum(t, logits, task.query.labels);
    return g;
}

// ---- optimizer --------------------------------------------------------------

struct AdamState {
    std::vector<double> m, v;
    std::size_t t = 0;

    explicit AdamState(std::size_t n) : m(n, 0.0), v(n, 0.0) {}

    // Ascent step: x += lr * mhat / (sqrt(vhat) + eps).
    void step(std::vector<double>& x, const std::vector<double>& g, double lr, double b1,
              double b2, double eps) {
        if (x.size() != m.size() || g.size() != m.size()) {
            throw DimensionMismatch("adam: parameter/gradient size mismatch");
        }
        ++t;
        double c1 = 1.0 - std::pow(b1, static_cast<double>(t));
        double c2 = 1.0 - std::pow(b2, static_cast<double>(t));
        for (std::size_t i = 0; i < x.size(); ++i) {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            double mh = m[i] / c1;
            double vh = v[i] / c2;
            x[i] += lr * mh / (std::sqrt(vh) + eps);
        }
    }
};

// ---- training loop -----------------------------------------------------------

struct TraceEntry {
    std::size_t iteration = 0;
    double loss = 0.0;     // episode objective at this step (pre-update)
    double wall_ms = 0.0;  // not deterministic; excluded from metric streams
};

struct FinetuneResult {
    FilmParams psi;
    CovarianceWeights e;
    std::vector<TraceEntry> trace;
    bool one_shot = false;
};

namespace detail {

[[noreturn]] inline void rethrow_with_iteration(const Error& err, std::size_t iteration) {
    std::string msg = std::string(err.what()) + " (iteration " + std::to_string(iteration) + ")";
    if (dynamic_cast<const NotPositiveDefinite*>(&err)) throw NotPositiveDefinite(msg);
    if (dynamic_cast<const TooFewShots*>(&err)) throw TooFewShots(msg);
    if (dynamic_cast<const EmptyClass*>(&err)) throw EmptyClass(msg);
    throw Error(msg);
}

}  // namespace detail

// Episodic fine-tuning from an explicit starting point.  `prox_anchor`
// (with prox_mu > 0) enables the proximal pull toward the anchor used by
// the federated simulator; passing mu == 0 is exactly the plain loop.
inline FinetuneResult finetune_from(const LabelledDataset& d, const BackboneSpec& spec,
                                    const TrainConfig& config, HeadVariant variant,
                                    FilmParams initial_psi,
                                    const FilmParams* prox_anchor = nullptr,
                                    double prox_mu = 0.0) {
    config.validate();
    if (d.size() == 0) throw EmptyDataset("finetune: empty dataset");
    if (prox_mu < 0.0) throw ConfigError("finetune: prox mu must be >= 0");

    FinetuneResult result;
    result.psi = std::move(initial_psi);
    result.e = config.e_init;

    // 1-shot rule: with a single example per class there is nothing to
    // split or sample; parameters stay at their starting values.
    bool all_single = true;
    for (std::size_t n : d.class_counts()) {
        if (n != 1) {
            all_single = false;
            break;
        }
    }
    if (all_single) {
        result.one_shot = true;
        return result;
    }

    SplitMode mode = config.split_mode;
    if (mode == SplitMode::Auto) {
        mode = d.size() < config.no_split_threshold ? SplitMode::Split : SplitMode::NoSplit;
    }

    LabelledDataset shuffled;
    const LabelledDataset* source = &d;
    if (mode == SplitMode::Split && config.shuffle_before_split) {
        Rng srng(derive_seed(config.seed, {0x5F1Eu}));
        std::vector<std::size_t> order(d.size());
        for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
        srng.shuffle(order);
        shuffled = d.subset(order);
        source = &shuffled;
    }

    LabelledDataset train, test;
    if (mode == SplitMode::Split) {
        std::tie(train, test) = split_dataset(*source);
    } else {
        train = *source;
        test = *source;
    }

    std::vector<int> all_classes;
    for (std::size_t c = 0; c < d.num_classes; ++c) all_classes.push_back(static_cast<int>(c));

    bool uses_e = variant != HeadVariant::Proto;
    std::size_t psi_count = result.psi.count();
    std::vector<double> params = result.psi.flatten();
    if (uses_e) {
        params.push_back(std::log(config.e_init.e1));
        params.push_back(std::log(config.e_init.e2));
        params.push_back(std::log(config.e_init.e3));
    }
    std::vector<double> anchor;
    if (prox_anchor != nullptr && prox_mu > 0.0) {
        anchor = prox_anchor->flatten();
        if (anchor.size() != psi_count) {
            throw DimensionMismatch("finetune: prox anchor shape mismatch");
        }
    }

    AdamState adam(params.size());
    Rng task_rng(derive_seed(config.seed, {0xE915u}));
    result.trace.reserve(config.iterations);

    FilmParams psi_work = result.psi;
    for (std::size_t iter = 0; iter < config.iterations; ++iter) {
        auto tick = std::chrono::steady_clock::now();
        try {
            Task task;
            if (mode == SplitMode::UseAll) {
                task.support = d;
                task.query = d;
                task.classes = all_classes;
            } else {
                task = sample_task(train, test, config.support_set_size, task_rng);
            }

            psi_work.assign_flat(
                std::vector<double>(params.begin(), params.begin() + psi_count));
            CovarianceWeights e_now = config.e_init;
            if (uses_e) {
                e_now.e1 = std::exp(params[psi_count + 0]);
                e_now.e2 = std::exp(params[psi_count + 1]);
                e_now.e3 = std::exp(params[psi_count + 2]);
            }

            EpisodeGraph g = build_episode_graph(task, spec, psi_work, e_now, variant,
                                                 config.stop_gradient_support,
                                                 config.proto_priors);
            g.tape.backward(g.loss);

            std::vector<double> grad;
            grad.reserve(params.size());
            for (std::size_t k = 0; k < g.film.gamma.size(); ++k) {
                const Matrix& gg = g.tape.grad(g.film.gamma[k]);
                grad.insert(grad.end(), gg.data.begin(), gg.data.end());
                const Matrix& gb = g.tape.grad(g.film.beta[k]);
                grad.insert(grad.end(), gb.data.begin(), gb.data.end());
            }
            if (uses_e) {
                const Matrix& ge = g.tape.grad(g.log_e);
                grad.insert(grad.end(), ge.data.begin(), ge.data.end());
            }

            adam.step(params, grad, config.learning_rate, config.adam_beta1, config.adam_beta2,
                      config.adam_eps);

            if (!anchor.empty()) {
                // Proximal pull toward the anchor (exact prox of
                // mu/2 ||psi - anchor||^2 at step size lr).
                double shrink = 1.0 / (1.0 + config.learning_rate * prox_mu);
                for (std::size_t i = 0; i < psi_count; ++i) {
                    params[i] = anchor[i] + (params[i] - anchor[i]) * shrink;
                }
            }

            double ms = std::chrono::duration<double, std::milli>(
                            std::chrono::steady_clock::now() - tick)
                            .count();
            result.trace.push_back(TraceEntry{iter, g.tape.value(g.loss)(0, 0), ms});
        } catch (const Error& err) {
            detail::rethrow_with_iteration(err, iter);
        }
    }

    result.psi.assign_flat(std::vector<double>(params.begin(), params.begin() + psi_count));
    if (uses_e) {
        result.e.e1 = std::exp(params[psi_count + 0]);
        result.e.e2 = std::exp(params[psi_count + 1]);
        result.e.e3 = std::exp(params[psi_count + 2]);
    }
    return result;
}

inline FinetuneResult finetune(const LabelledDataset& d, const BackboneSpec& spec,
                               const TrainConfig& config, HeadVariant variant) {
    return finetune_from(d, spec, config, variant, spec.identity_film());
}

// ---- prediction / evaluation ------------------------------------------------

struct Prediction {
    int label = -1;
    std::vector<double> log_probs;
};

inline ClassifierCache build_support_cache(const LabelledDataset& support,
                                           const BackboneSpec& spec, const FilmParams& psi,
                                           const CovarianceWeights& e, HeadVariant variant,
                                           bool proto_priors = false) {
    Matrix semb = backbone_forward(spec, psi, support.features);
    HeadStatistics stats = estimate_stats(semb, support.labels, support.num_classes);
    return build_cache(stats, e, variant, proto_priors);
}

inline Prediction predict(const LabelledDataset& support, const FilmParams& psi,
                          const CovarianceWeights& e, const BackboneSpec& spec,
                          HeadVariant variant, const Matrix& x_row,
                          bool proto_priors = false) {
    ClassifierCache cache = build_support_cache(support, spec, psi, e, variant, proto_priors);
    Matrix emb = backbone_forward(spec, psi, x_row);
    Prediction p;
    p.log_probs = predict_log_probs(cache, emb);
    p.label = argmax_label(p.log_probs);
    return p;
}

struct EvalReport {
    std::size_t count = 0;
    double accuracy = 0.0;
    double mean_log_prob = 0.0;  // of the true class
    std::vector<std::size_t> per_class_counts;
    std::vector<double> per_class_accuracy;  // 0 for classes without examples
};

inline EvalReport evaluate_cache(const ClassifierCache& cache, const BackboneSpec& spec,
                                 const FilmParams& psi, const LabelledDataset& test) {
    if (test.size() == 0) throw EmptyDataset("evaluate: empty test set");
    Matrix emb = backbone_forward(spec, psi, test.features);
    EvalReport r;
    r.count = test.size();
    r.per_class_counts.assign(cache.classes, 0);
    std::vector<std::size_t> hits(cache.classes, 0);
    double lp_sum = 0.0;
    for (std::size_t i = 0; i < emb.rows; ++i) {
        std::vector<double> lp = predict_log_probs(cache, detail::row_of(emb, i));
        auto y = static_cast<std::size_t>(test.labels[i]);
        ++r.per_class_counts[y];
        if (argmax_label(lp) == test.labels[i]) ++hits[y];
        lp_sum += lp[y];
    }
    std::size_t total_hits = 0;
    r.per_class_accuracy.resize(cache.classes, 0.0);
    for (std::size_t c = 0; c < cache.classes; ++c) {
        total_hits += hits[c];
        if (r.per_class_counts[c] > 0) {
            r.per_class_accuracy[c] = static_cast<double>(hits[c]) /
                                      static_cast<double>(r.per_class_counts[c]);
        }
    }
    r.accuracy = static_cast<double>(total_hits) / static_cast<double>(r.count);
    r.mean_log_prob = lp_sum / static_cast<double>(r.count);
    return r;
}

inline EvalReport evaluate(const LabelledDataset& support, const LabelledDataset& test,
                           const BackboneSpec& spec, const FilmParams& psi,
                           const CovarianceWeights& e, HeadVariant variant,
                           bool proto_priors = false) {
    ClassifierCache cache = build_support_cache(support, spec, psi, e, variant, proto_priors);
    return evaluate_cache(cache, spec, psi, test);
}

}  // namespace fit
