#pragma once

// Federated simulation over FiT models.  Clients hold small fixed class
// subsets; rounds transmit FiLM parameters only (ProtoNets head, no e).
// The server aggregates psi by unweighted averaging and builds a global
// classifier by averaging per-client class prototypes.  Includes the
// centralized upper bound, the one-shot-averaging lower bound, FedProx,
// and exact parameter-count accounting per round.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "fit/backbone.hpp"
#include "fit/dataset.hpp"
#include "fit/episodic.hpp"
#include "fit/errors.hpp"
#include "fit/head.hpp"
#include "fit/rng.hpp"

namespace fit {

enum class FedAlgorithm { FedAvg, FedProx };

inline const char* fed_algorithm_name(FedAlgorithm a) {
    return a == FedAlgorithm::FedAvg ? "fedavg" : "fedprox";
}

inline FedAlgorithm parse_fed_algorithm(const std::string& s) {
    if (s == "fedavg") return FedAlgorithm::FedAvg;
    if (s == "fedprox") return FedAlgorithm::FedProx;
    throw ConfigError("unknown federated algorithm '" + s + "'");
}

struct FedConfig {
    std::size_t num_clients = 20;
    std::size_t classes_per_client = 5;
    std::size_t shots_per_class = 5;
    std::size_t rounds = 60;
    std::size_t clients_per_round = 5;
    std::size_t local_steps = 10;
    double client_lr = 0.003;
    double lr_decay = 0.3;
    std::size_t lr_decay_every = 20;
    FedAlgorithm algorithm = FedAlgorithm::FedAvg;
    double prox_mu = 0.01;
    std::size_t support_set_size = 100;
    // Centralized / per-client baseline training budget.
    std::size_t baseline_iterations = 400;
    double baseline_lr = 0.003;
    bool weighted_prototypes = false;  // weight client prototypes by shot count
    std::uint64_t seed = 0;

    void validate() const {
        if (num_clients == 0) throw ConfigError("fed: need at least one client");
        if (clients_per_round == 0 || clients_per_round > num_clients) {
            throw ConfigError("fed: clients_per_round must be in [1, num_clients]");
        }
        if (classes_per_client == 0 || shots_per_class == 0) {
            throw ConfigError("fed: classes_per_client and shots_per_class must be positive");
        }
        if (!(client_lr > 0.0) || !(baseline_lr > 0.0)) {
            throw ConfigError("fed: learning rates must be positive");
        }
        if (!(lr_decay > 0.0) || lr_decay_every == 0) {
            throw ConfigError("fed: decay schedule must be positive");
        }
        if (prox_mu < 0.0) throw ConfigError("fed: prox mu must be >= 0");
    }
};

struct ClientState {
    int id = 0;
    LabelledDataset data;      // global labels
    std::vector<int> classes;  // ascending, distinct
};

inline std::vector<ClientState> partition_clients(const LabelledDataset& d,
                                                  const FedConfig& config, Rng& rng) {
    if (d.num_classes < config.classes_per_client) {
        throw InsufficientData("partition: dataset has " + std::to_string(d.num_classes) +
                               " classes, clients want " +
                               std::to_string(config.classes_per_client));
    }
    auto members = class_members(d.labels, d.num_classes);
    std::vector<ClientState> clients;
    clients.reserve(config.num_clients);
    for (std::size_t i = 0; i < config.num_clients; ++i) {
        ClientState c;
        c.id = static_cast<int>(i);
        c.classes = rng.choice(static_cast<int>(d.num_classes),
                               static_cast<int>(config.classes_per_client));
        std::sort(c.classes.begin(), c.classes.end());
        std::vector<std::size_t> rows;
        for (int cls : c.classes) {
            const auto& m = members[static_cast<std::size_t>(cls)];
            if (m.size() < config.shots_per_class) {
                throw InsufficientData("partition: class " + std::to_string(cls) + " has " +
                                       std::to_string(m.size()) + " examples, client " +
                                       std::to_string(i) + " wants " +
                                       std::to_string(config.shots_per_class));
            }
            std::vector<int> picks = rng.choice(static_cast<int>(m.size()),
                                                static_cast<int>(config.shots_per_class));
            std::sort(picks.begin(), picks.end());
            for (int p : picks) rows.push_back(m[static_cast<std::size_t>(p)]);
        }
        c.data = d.subset(rows);
        clients.push_back(std::move(c));
    }
    return clients;
}

// One client's local training pass: `local_steps` episodic updates from
// the received global psi with a fresh Adam state.  FedProx adds the
// proximal pull toward global psi.
inline FilmParams local_update(const ClientState& client, const FilmParams& global_psi,
                               const BackboneSpec& spec, const FedConfig& config, double lr,
                               std::uint64_t seed) {
    TrainConfig tc;
    tc.learning_rate = lr;
    tc.iterations = config.local_steps;
    tc.support_set_size = config.support_set_size;
    tc.seed = seed;
    try {
        LabelledDataset local = client.data.restrict_to(client.classes);
        bool prox = config.algorithm == FedAlgorithm::FedProx && config.prox_mu > 0.0;
        FinetuneResult r = finetune_from(local, spec, tc, HeadVariant::Proto, global_psi,
                                         prox ? &global_psi : nullptr,
                                         prox ? config.prox_mu : 0.0);
        return r.psi;
    } catch (const Error& err) {
        throw Error(std::string(err.what()) + " (client " + std::to_string(client.id) + ")");
    }
}

// Unweighted elementwise mean; callers pass updates in ascending client
// order so the summation order is fixed.
inline FilmParams aggregate_films(const std::vector<FilmParams>& updates) {
    if (updates.empty()) throw Error("aggregate: no updates");
    std::vector<double> sum = updates[0].flatten();
    for (std::size_t i = 1; i < updates.size(); ++i) {
        std::vector<double> u = updates[i].flatten();
        if (u.size() != sum.size()) throw DimensionMismatch("aggregate: shape mismatch");
        for (std::size_t j = 0; j < sum.size(); ++j) sum[j] += u[j];
    }
    double inv = 1.0 / static_cast<double>(updates.size());
    for (double& v : sum) v *= inv;
    FilmParams out = updates[0];
    out.assign_flat(sum);
    return out;
}

// Per-class mean embeddings of one client's data under psi, with the
// class ids they belong to.
struct ClientPrototypes {
    std::vector<int> classes;
    Matrix means;  // one row per class above
};

inline ClientPrototypes client_prototypes(const ClientState& client, const FilmParams& psi,
                                          const BackboneSpec& spec) {
    LabelledDataset local = client.data.restrict_to(client.classes);
    Matrix emb = backbone_forward(spec, psi, local.features);
    HeadStatistics stats = estimate_stats(emb, local.labels, local.num_classes);
    return ClientPrototypes{client.classes, stats.means};
}

inline ClassifierCache make_proto_cache(Matrix means) {
    ClassifierCache cache;
    cache.variant = HeadVariant::Proto;
    cache.classes = means.rows;
    cache.dim = means.cols;
    cache.with_priors = false;
    cache.means = std::move(means);
    return cache;
}

// Server-side global classifier: per class, the mean over the prototypes
// of the clients owning that class (optionally weighted by shot count).
inline ClassifierCache build_global_prototypes(const std::vector<ClientState>& clients,
                                               const FilmParams& psi, const BackboneSpec& spec,
                                               std::size_t num_classes,
                                               bool weighted = false) {
    Matrix sum(num_classes, spec.output_dim);
    std::vector<double> weight(num_classes, 0.0);
    for (const ClientState& client : clients) {
        ClientPrototypes protos = client_prototypes(client, psi, spec);
        auto counts = client.data.class_counts();
        for (std::size_t k = 0; k < protos.classes.size(); ++k) {
            auto c = static_cast<std::size_t>(protos.classes[k]);
            double w = weighted ? static_cast<double>(counts[c]) : 1.0;
            for (std::size_t j = 0; j < sum.cols; ++j) sum(c, j) += w * protos.means(k, j);
            weight[c] += w;
        }
    }
    for (std::size_t c = 0; c < num_classes; ++c) {
        if (weight[c] == 0.0) {
            throw UncoveredClass("global prototypes: no client owns class " + std::to_string(c));
        }
        for (std::size_t j = 0; j < sum.cols; ++j) sum(c, j) /= weight[c];
    }
    return make_proto_cache(std::move(sum));
}

// Mean over clients of the accuracy of (psi + that client's own
// prototypes) on the test examples of that client's classes.
inline double personalized_accuracy(const std::vector<ClientState>& clients,
                                    const FilmParams& psi, const BackboneSpec& spec,
                                    const LabelledDataset& test) {
    double acc_sum = 0.0;
    std::size_t counted = 0;
    for (const ClientState& client : clients) {
        LabelledDataset local_test = test.restrict_to(client.classes);
        if (local_test.size() == 0) continue;
        ClientPrototypes protos = client_prototypes(client, psi, spec);
        acc_sum += evaluate_cache(make_proto_cache(protos.means), spec, psi, local_test).accuracy;
        ++counted;
    }
    if (counted == 0) throw EmptyDataset("personalized eval: no client classes in the test set");
    return acc_sum / static_cast<double>(counted);
}

// Same, but prototypes taken from rows of a global C-way cache
// (restriction of the global classifier to the client's classes).
inline double personalized_accuracy_from_global(const std::vector<ClientState>& clients,
                                                const ClassifierCache& global_cache,
                                                const FilmParams& psi, const BackboneSpec& spec,
                                                const LabelledDataset& test) {
    double acc_sum = 0.0;
    std::size_t counted = 0;
    for (const ClientState& client : clients) {
        LabelledDataset local_test = test.restrict_to(client.classes);
        if (local_test.size() == 0) continue;
        Matrix means(client.classes.size(), global_cache.dim);
        for (std::size_t k = 0; k < client.classes.size(); ++k) {
            auto c = static_cast<std::size_t>(client.classes[k]);
            for (std::size_t j = 0; j < means.cols; ++j) means(k, j) = global_cache.means(c, j);
        }
        acc_sum += evaluate_cache(make_proto_cache(std::move(means)), spec, psi, local_test)
                       .accuracy;
        ++counted;
    }
    if (counted == 0) throw EmptyDataset("personalized eval: no client classes in the test set");
    return acc_sum / static_cast<double>(counted);
}

struct RoundLog {
    std::size_t round = 0;  // 0 is the pre-training baseline row
    std::vector<int> client_ids;
    std::uint64_t params_down = 0;
    std::uint64_t params_up = 0;
    std::uint64_t cum_cost = 0;
    double global_acc = 0.0;
    double personalized_acc = 0.0;
};

struct FederatedResult {
    std::vector<ClientState> clients;
    std::vector<RoundLog> rounds;
    FilmParams global_psi;
    ClassifierCache global_cache;
};

struct CommCost {
    std::uint64_t per_round = 0;
    std::uint64_t overall = 0;
};

// Exact ledger: each selected client receives the global parameters and
// sends its update back, so a round moves 2 * clients_per_round *
// params_per_message values.
inline CommCost communication_cost(std::uint64_t params_per_message,
                                   std::uint64_t clients_per_round, std::uint64_t rounds) {
    CommCost c;
    c.per_round = 2 * clients_per_round * params_per_message;
    c.overall = c.per_round * rounds;
    return c;
}

inline double round_learning_rate(const FedConfig& config, std::size_t round_index_zero_based) {
    double steps = static_cast<double>(round_index_zero_based / config.lr_decay_every);
    return config.client_lr * std::pow(config.lr_decay, steps);
}

inline FederatedResult run_federated(const LabelledDataset& d, const LabelledDataset& test,
                                     const BackboneSpec& spec, const FedConfig& config,
                                     const std::function<void(const RoundLog&)>& on_round = {}) {
    config.validate();
    FederatedResult res;
    Rng prng(derive_seed(config.seed, {0xC11E7u}));
    res.clients = partition_clients(d, config, prng);
    res.global_psi = spec.identity_film();

    std::uint64_t psi_count = film_param_count(spec);
    std::uint64_t cum = 0;

    auto log_state = [&](std::size_t round, std::vector<int> ids, std::uint64_t down,
                         std::uint64_t up) {
        res.global_cache = build_global_prototypes(res.clients, res.global_psi, spec,
                                                   d.num_classes, config.weighted_prototypes);
        RoundLog log;
        log.round = round;
        log.client_ids = std::move(ids);
        log.params_down = down;
        log.params_up = up;
        cum += down + up;
        log.cum_cost = cum;
        log.global_acc = evaluate_cache(res.global_cache, spec, res.global_psi, test).accuracy;
        log.personalized_acc = personalized_accuracy(res.clients, res.global_psi, spec, test);
        res.rounds.push_back(log);
        if (on_round) on_round(res.rounds.back());
    };

    log_state(0, {}, 0, 0);  // identity-psi baseline row

    for (std::size_t r = 1; r <= config.rounds; ++r) {
        double lr = round_learning_rate(config, r - 1);
        Rng rrng(derive_seed(config.seed, {0xF0u, r}));
        std::vector<int> ids = rrng.choice(static_cast<int>(config.num_clients),
                                           static_cast<int>(config.clients_per_round));
        std::sort(ids.begin(), ids.end());

        std::vector<FilmParams> updates;
        updates.reserve(ids.size());
        for (int id : ids) {
            std::uint64_t seed =
                derive_seed(config.seed, {0x10CA1u, r, static_cast<std::uint64_t>(id)});
            updates.push_back(local_update(res.clients[static_cast<std::size_t>(id)],
                                           res.global_psi, spec, config, lr, seed));
        }
        res.global_psi = aggregate_films(updates);
        std::uint64_t down = config.clients_per_round * psi_count;
        log_state(r, std::move(ids), down, down);
    }
    return res;
}

// ---- baselines -----------------------------------------------------------

struct FedBaseline {
    FilmParams psi;  // trained psi (centralized) or averaged psi (lower bound)
    double global_acc = 0.0;
    double personalized_acc = 0.0;
};

namespace detail {

inline TrainConfig baseline_train_config(const FedConfig& config, std::uint64_t seed) {
    TrainConfig tc;
    tc.learning_rate = config.baseline_lr;
    tc.iterations = config.baseline_iterations;
    tc.support_set_size = config.support_set_size;
    tc.seed = seed;
    return tc;
}

}  // namespace detail

// Centralized training on the union of client data.
inline FedBaseline upper_bound(const std::vector<ClientState>& clients,
                               const LabelledDataset& test, const BackboneSpec& spec,
                               const FedConfig& config) {
    if (clients.empty()) throw Error("upper_bound: no clients");
    LabelledDataset unioned = clients[0].data;
    for (std::size_t i = 1; i < clients.size(); ++i) {
        unioned = LabelledDataset::concat(unioned, clients[i].data);
    }
    TrainConfig tc = detail::baseline_train_config(config, derive_seed(config.seed, {0xBA5Eu, 0}));
    FinetuneResult r = finetune(unioned, spec, tc, HeadVariant::Proto);

    FedBaseline b;
    b.psi = r.psi;
    Matrix emb = backbone_forward(spec, b.psi, unioned.features);
    HeadStatistics stats = estimate_stats(emb, unioned.labels, unioned.num_classes);
    ClassifierCache global_cache = make_proto_cache(stats.means);
    b.global_acc = evaluate_cache(global_cache, spec, b.psi, test).accuracy;
    b.personalized_acc =
        personalized_accuracy_from_global(clients, global_cache, b.psi, spec, test);
    return b;
}

// Independent local training plus one-shot parameter averaging.
inline FedBaseline lower_bound(const std::vector<ClientState>& clients,
                               const LabelledDataset& test, const BackboneSpec& spec,
                               const FedConfig& config, std::size_t num_classes) {
    if (clients.empty()) throw Error("lower_bound: no clients");
    std::vector<FilmParams> psis;
    psis.reserve(clients.size());
    double pers_sum = 0.0;
    std::size_t counted = 0;
    for (const ClientState& client : clients) {
        TrainConfig tc = detail::baseline_train_config(
            config, derive_seed(config.seed, {0xBA5Eu, static_cast<std::uint64_t>(client.id)}));
        LabelledDataset local = client.data.restrict_to(client.classes);
        FinetuneResult r;
        try {
            r = finetune(local, spec, tc, HeadVariant::Proto);
        } catch (const Error& err) {
            throw Error(std::string(err.what()) + " (client " + std::to_string(client.id) + ")");
        }
        LabelledDataset local_test = test.restrict_to(client.classes);
        if (local_test.size() > 0) {
            ClientPrototypes protos = client_prototypes(client, r.psi, spec);
            pers_sum += evaluate_cache(make_proto_cache(protos.means), spec, r.psi, local_test)
                            .accuracy;
            ++counted;
        }
        psis.push_back(std::move(r.psi));
    }
    FedBaseline b;
    b.psi = aggregate_films(psis);
    ClassifierCache global_cache =
        build_global_prototypes(clients, b.psi, spec, num_classes, config.weighted_prototypes);
    b.global_acc = evaluate_cache(global_cache, spec, b.psi, test).accuracy;
    b.personalized_acc =
        counted > 0 ? pers_sum / static_cast<double>(counted) : 0.0;
    return b;
}

}  // namespace fit
