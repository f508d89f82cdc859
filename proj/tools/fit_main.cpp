// fit: FiLM-transfer few-shot classification toolkit.
//
// Subcommands: synth, finetune, eval, fedsim, paramcount, filmstats.
// Every subcommand accepts --config <json> (a config file or a manifest
// from a previous run); command-line flags override file values.  Output
// files land under --out-dir, which always receives a manifest.json that
// reproduces the run.

#include <cinttypes>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "fit/dataset.hpp"
#include "fit/episodic.hpp"
#include "fit/fed.hpp"
#include "fit/head.hpp"
#include "fit/io.hpp"
#include "fit/log.hpp"
#include "fit/manifest.hpp"
#include "fit/synth.hpp"

namespace fs = std::filesystem;
using fit::json;

namespace {

std::string join(const std::string& dir, const std::string& name) {
    return (fs::path(dir) / name).string();
}

void ensure_out_dir(const std::string& dir) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw fit::IoError("cannot create output directory: " + dir);
}

void require_file(const std::string& path) {
    std::error_code ec;
    if (!fs::exists(path, ec) || fs::file_size(path, ec) == 0) {
        if (fs::exists(path, ec) && fs::is_regular_file(path, ec)) return;  // empty ok if exists
        throw fit::IoError("expected output missing: " + path);
    }
}

std::string with_commas(std::uint64_t v) {
    std::string raw = std::to_string(v);
    std::string out;
    int c = 0;
    for (auto it = raw.rbegin(); it != raw.rend(); ++it) {
        if (c != 0 && c % 3 == 0) out.push_back(',');
        out.push_back(*it);
        ++c;
    }
    return std::string(out.rbegin(), out.rend());
}

std::string sidecar_for(const std::string& bin_path) {
    fs::path p(bin_path);
    p.replace_extension(".json");
    return p.string();
}

// Unknown keys in config files are errors; a typo must not silently fall
// back to a default.
class KeyChecker {
  public:
    explicit KeyChecker(const json& j, std::string where) : where_(std::move(where)) {
        if (!j.is_object()) throw fit::ConfigError(where_ + ": config must be a JSON object");
    }
    void claim(const std::string& key) { known_.push_back(key); }
    void finish(const json& j) const {
        for (const auto& item : j.items()) {
            bool ok = false;
            for (const auto& k : known_) {
                if (item.key() == k) {
                    ok = true;
                    break;
                }
            }
            if (!ok) throw fit::ConfigError(where_ + ": unknown config key '" + item.key() + "'");
        }
    }

  private:
    std::string where_;
    std::vector<std::string> known_;
};

template <typename T>
void take(KeyChecker& chk, const json& j, const char* key, T& out) {
    chk.claim(key);
    if (j.contains(key)) out = j.at(key).get<T>();
}

// If the file is a manifest from a previous run, descend into its config.
json load_config_file(const std::string& path, const std::string& command) {
    json j = fit::load_json(path);
    if (j.is_object() && j.contains("command") && j.contains("config")) {
        if (j["command"] != command) {
            throw fit::ConfigError(path + ": manifest is for '" +
                                   j["command"].get<std::string>() + "', not '" + command + "'");
        }
        return j["config"];
    }
    return j;
}

void write_manifest(const std::string& out_dir, const std::string& command, const json& config,
                    std::uint64_t seed) {
    fit::save_json(join(out_dir, "manifest.json"), fit::make_manifest(command, config, seed));
}

// ---- synth -----------------------------------------------------------------

struct SynthCmd {
    fit::SynthSpec spec;
    std::string out_dir = "out";

    void apply(const json& j) {
        KeyChecker chk(j, "synth");
        take(chk, j, "classes", spec.classes);
        take(chk, j, "latent_dim", spec.latent_dim);
        take(chk, j, "separation", spec.separation);
        take(chk, j, "cov_scale", spec.cov_scale);
        take(chk, j, "distortion_scale", spec.distortion_scale);
        take(chk, j, "shift_range", spec.shift_range);
        take(chk, j, "train_per_class", spec.train_per_class);
        take(chk, j, "test_per_class", spec.test_per_class);
        take(chk, j, "seed", spec.seed);
        chk.finish(j);
    }

    json to_json() const {
        return json{{"classes", spec.classes},
                    {"latent_dim", spec.latent_dim},
                    {"separation", spec.separation},
                    {"cov_scale", spec.cov_scale},
                    {"distortion_scale", spec.distortion_scale},
                    {"shift_range", spec.shift_range},
                    {"train_per_class", spec.train_per_class},
                    {"test_per_class", spec.test_per_class},
                    {"seed", spec.seed}};
    }

    int run() const {
        ensure_out_dir(out_dir);
        fit::SynthData data = fit::generate_synth(spec);
        fit::save_csv(data.train, join(out_dir, "train.csv"));
        fit::save_csv(data.test, join(out_dir, "test.csv"));
        fit::save_backbone(join(out_dir, "backbone.json"),
                           fit::BackboneSpec::identity(spec.latent_dim));
        fit::save_film_params(join(out_dir, "oracle_psi.bin"), join(out_dir, "oracle_psi.json"),
                              data.oracle_film);
        write_manifest(out_dir, "synth", to_json(), spec.seed);

        for (const char* f : {"train.csv", "test.csv", "backbone.json", "oracle_psi.bin",
                              "oracle_psi.json", "manifest.json"}) {
            require_file(join(out_dir, f));
        }
        fit::load_csv(join(out_dir, "train.csv"));
        fit::log::info("synth: wrote " + std::to_string(data.train.size()) + " train / " +
                       std::to_string(data.test.size()) + " test rows to " + out_dir);
        return 0;
    }
};

// ---- shared training plumbing ----------------------------------------------

fit::LabelledDataset subsample_shots(const fit::LabelledDataset& d, std::size_t shots,
                                     std::uint64_t seed) {
    if (shots == 0) return d;
    auto members = fit::class_members(d.labels, d.num_classes);
    fit::Rng rng(fit::derive_seed(seed, {0x5807u}));
    std::vector<std::size_t> rows;
    for (std::size_t c = 0; c < members.size(); ++c) {
        if (members[c].size() < shots) {
            throw fit::InsufficientData("subsample: class " + std::to_string(c) + " has " +
                                        std::to_string(members[c].size()) +
                                        " examples, want " + std::to_string(shots));
        }
        std::vector<int> picks =
            rng.choice(static_cast<int>(members[c].size()), static_cast<int>(shots));
        std::sort(picks.begin(), picks.end());
        for (int p : picks) rows.push_back(members[c][static_cast<std::size_t>(p)]);
    }
    return d.subset(rows);
}

// ---- finetune ---------------------------------------------------------------

struct FinetuneCmd {
    std::string train_path;
    std::string eval_path;  // optional
    std::string backbone_path;
    std::string variant = "lda";
    std::size_t shots = 0;  // 0 = use all
    fit::TrainConfig tc;
    std::string split = "auto";
    std::string out_dir = "out";

    void apply(const json& j) {
        KeyChecker chk(j, "finetune");
        take(chk, j, "train", train_path);
        take(chk, j, "eval", eval_path);
        take(chk, j, "backbone", backbone_path);
        take(chk, j, "variant", variant);
        take(chk, j, "shots", shots);
        take(chk, j, "learning_rate", tc.learning_rate);
        take(chk, j, "iterations", tc.iterations);
        take(chk, j, "support_set_size", tc.support_set_size);
        take(chk, j, "split", split);
        take(chk, j, "no_split_threshold", tc.no_split_threshold);
        take(chk, j, "stop_gradient_support", tc.stop_gradient_support);
        take(chk, j, "shuffle_before_split", tc.shuffle_before_split);
        take(chk, j, "proto_priors", tc.proto_priors);
        take(chk, j, "seed", tc.seed);
        chk.claim("e_init");
        if (j.contains("e_init")) {
            auto e = j.at("e_init").get<std::vector<double>>();
            if (e.size() != 3) throw fit::ConfigError("finetune: e_init needs 3 values");
            tc.e_init = fit::CovarianceWeights{e[0], e[1], e[2]};
        }
        chk.finish(j);
    }

    json to_json() const {
        return json{{"train", train_path},
                    {"eval", eval_path},
                    {"backbone", backbone_path},
                    {"variant", variant},
                    {"shots", shots},
                    {"learning_rate", tc.learning_rate},
                    {"iterations", tc.iterations},
                    {"support_set_size", tc.support_set_size},
                    {"split", split},
                    {"no_split_threshold", tc.no_split_threshold},
                    {"stop_gradient_support", tc.stop_gradient_support},
                    {"shuffle_before_split", tc.shuffle_before_split},
                    {"proto_priors", tc.proto_priors},
                    {"seed", tc.seed},
                    {"e_init", std::vector<double>{tc.e_init.e1, tc.e_init.e2, tc.e_init.e3}}};
    }

    int run() {
        if (train_path.empty() || backbone_path.empty()) {
            throw fit::ConfigError("finetune: --train and --backbone are required");
        }
        ensure_out_dir(out_dir);
        tc.split_mode = fit::parse_split_mode(split);
        fit::HeadVariant hv = fit::parse_variant(variant);
        fit::BackboneSpec spec = fit::load_backbone(backbone_path);
        fit::LabelledDataset train = fit::load_csv(train_path);
        train = subsample_shots(train, shots, tc.seed);

        fit::FinetuneResult result = fit::finetune(train, spec, tc, hv);

        fit::save_film_params(join(out_dir, "psi.bin"), join(out_dir, "psi.json"), result.psi);
        fit::save_cov_weights(join(out_dir, "e.json"), result.e);
        std::vector<json> trace_lines, metric_lines;
        for (const fit::TraceEntry& t : result.trace) {
            trace_lines.push_back(fit::trace_entry_json(t, true));
            metric_lines.push_back(fit::trace_entry_json(t, false));
        }
        fit::write_json_lines(join(out_dir, "trace.jsonl"), trace_lines);
        fit::write_json_lines(join(out_dir, "metrics.jsonl"), metric_lines);

        json report;
        if (!eval_path.empty()) {
            fit::LabelledDataset eval_set = fit::load_csv(eval_path);
            fit::ClassifierCache cache = fit::build_support_cache(
                train, spec, result.psi, result.e, hv, tc.proto_priors);
            fit::EvalReport r = fit::evaluate_cache(cache, spec, result.psi, eval_set);
            report = fit::eval_report_json(r);
            report["one_shot_rule"] = result.one_shot;
            fit::save_json(join(out_dir, "report.json"), report);
            std::printf("accuracy %.6f on %zu examples (mean log prob %.6f)\n", r.accuracy,
                        r.count, r.mean_log_prob);
        }
        write_manifest(out_dir, "finetune", to_json(), tc.seed);

        fit::FilmParams reread =
            fit::load_film_params(join(out_dir, "psi.bin"), join(out_dir, "psi.json"));
        if (reread.count() != result.psi.count()) {
            throw fit::IoError("finetune: psi round-trip count mismatch");
        }
        if (fit::read_json_lines(join(out_dir, "metrics.jsonl")).size() !=
            result.trace.size()) {
            throw fit::IoError("finetune: metrics.jsonl line count mismatch");
        }
        for (const char* f : {"psi.bin", "psi.json", "e.json", "trace.jsonl", "metrics.jsonl",
                              "manifest.json"}) {
            require_file(join(out_dir, f));
        }
        fit::log::info("finetune: wrote " + std::to_string(result.psi.count()) +
                       " film parameters to " + out_dir);
        return 0;
    }
};

// ---- eval -------------------------------------------------------------------

struct EvalCmd {
    std::string support_path;
    std::string test_path;
    std::string backbone_path;
    std::string params_path;
    std::string params_meta;  // default: params with .json extension
    std::string e_path;       // optional
    std::string variant = "lda";
    bool proto_priors = false;
    std::uint64_t seed = 0;
    std::string out_dir = "out";

    void apply(const json& j) {
        KeyChecker chk(j, "eval");
        take(chk, j, "support", support_path);
        take(chk, j, "test", test_path);
        take(chk, j, "backbone", backbone_path);
        take(chk, j, "params", params_path);
        take(chk, j, "params_meta", params_meta);
        take(chk, j, "e", e_path);
        take(chk, j, "variant", variant);
        take(chk, j, "proto_priors", proto_priors);
        take(chk, j, "seed", seed);
        chk.finish(j);
    }

    json to_json() const {
        return json{{"support", support_path}, {"test", test_path},
                    {"backbone", backbone_path}, {"params", params_path},
                    {"params_meta", params_meta}, {"e", e_path},
                    {"variant", variant}, {"proto_priors", proto_priors},
                    {"seed", seed}};
    }

    int run() const {
        if (support_path.empty() || test_path.empty() || backbone_path.empty() ||
            params_path.empty()) {
            throw fit::ConfigError("eval: --support, --test, --backbone, --params are required");
        }
        ensure_out_dir(out_dir);
        fit::HeadVariant hv = fit::parse_variant(variant);
        fit::BackboneSpec spec = fit::load_backbone(backbone_path);
        std::string meta = params_meta.empty() ? sidecar_for(params_path) : params_meta;
        fit::FilmParams psi = fit::load_film_params(params_path, meta);
        fit::CovarianceWeights e =
            e_path.empty() ? fit::CovarianceWeights{} : fit::load_cov_weights(e_path);
        fit::LabelledDataset support = fit::load_csv(support_path);
        fit::LabelledDataset test = fit::load_csv(test_path);

        fit::ClassifierCache cache =
            fit::build_support_cache(support, spec, psi, e, hv, proto_priors);
        fit::EvalReport r = fit::evaluate_cache(cache, spec, psi, test);

        fit::save_cache(join(out_dir, "cache.bin"), join(out_dir, "cache.json"), cache);
        fit::save_json(join(out_dir, "report.json"), fit::eval_report_json(r));
        write_manifest(out_dir, "eval", to_json(), seed);

        fit::load_cache(join(out_dir, "cache.bin"), join(out_dir, "cache.json"));
        for (const char* f : {"cache.bin", "cache.json", "report.json", "manifest.json"}) {
            require_file(join(out_dir, f));
        }
        std::printf("accuracy %.6f on %zu examples (mean log prob %.6f)\n", r.accuracy, r.count,
                    r.mean_log_prob);
        return 0;
    }
};

// ---- fedsim -----------------------------------------------------------------

struct FedsimCmd {
    std::string train_path;
    std::string test_path;
    std::string backbone_path;
    std::string algorithm = "fedavg";
    bool baselines = false;
    fit::FedConfig fc;
    std::string out_dir = "out";

    void apply(const json& j) {
        KeyChecker chk(j, "fedsim");
        take(chk, j, "train", train_path);
        take(chk, j, "test", test_path);
        take(chk, j, "backbone", backbone_path);
        take(chk, j, "algorithm", algorithm);
        take(chk, j, "baselines", baselines);
        take(chk, j, "num_clients", fc.num_clients);
        take(chk, j, "classes_per_client", fc.classes_per_client);
        take(chk, j, "shots_per_class", fc.shots_per_class);
        take(chk, j, "rounds", fc.rounds);
        take(chk, j, "clients_per_round", fc.clients_per_round);
        take(chk, j, "local_steps", fc.local_steps);
        take(chk, j, "client_lr", fc.client_lr);
        take(chk, j, "lr_decay", fc.lr_decay);
        take(chk, j, "lr_decay_every", fc.lr_decay_every);
        take(chk, j, "prox_mu", fc.prox_mu);
        take(chk, j, "support_set_size", fc.support_set_size);
        take(chk, j, "baseline_iterations", fc.baseline_iterations);
        take(chk, j, "baseline_lr", fc.baseline_lr);
        take(chk, j, "weighted_prototypes", fc.weighted_prototypes);
        take(chk, j, "seed", fc.seed);
        chk.finish(j);
    }

    json to_json() const {
        return json{{"train", train_path},
                    {"test", test_path},
                    {"backbone", backbone_path},
                    {"algorithm", algorithm},
                    {"baselines", baselines},
                    {"num_clients", fc.num_clients},
                    {"classes_per_client", fc.classes_per_client},
                    {"shots_per_class", fc.shots_per_class},
                    {"rounds", fc.rounds},
                    {"clients_per_round", fc.clients_per_round},
                    {"local_steps", fc.local_steps},
                    {"client_lr", fc.client_lr},
                    {"lr_decay", fc.lr_decay},
                    {"lr_decay_every", fc.lr_decay_every},
                    {"prox_mu", fc.prox_mu},
                    {"support_set_size", fc.support_set_size},
                    {"baseline_iterations", fc.baseline_iterations},
                    {"baseline_lr", fc.baseline_lr},
                    {"weighted_prototypes", fc.weighted_prototypes},
                    {"seed", fc.seed}};
    }

    int run() {
        if (train_path.empty() || test_path.empty() || backbone_path.empty()) {
            throw fit::ConfigError("fedsim: --train, --test, --backbone are required");
        }
        ensure_out_dir(out_dir);
        fc.algorithm = fit::parse_fed_algorithm(algorithm);
        fit::BackboneSpec spec = fit::load_backbone(backbone_path);
        fit::LabelledDataset train = fit::load_csv(train_path);
        fit::LabelledDataset test = fit::load_csv(test_path);

        // Stream round logs so a failed run still leaves its progress behind.
        std::ofstream rounds_out(join(out_dir, "rounds.jsonl"), std::ios::binary);
        if (!rounds_out) throw fit::IoError("cannot open rounds.jsonl for writing");
        std::size_t written = 0;
        auto on_round = [&](const fit::RoundLog& r) {
            rounds_out << fit::round_log_json(r).dump() << "\n";
            rounds_out.flush();
            ++written;
            fit::log::info("fedsim: round " + std::to_string(r.round) + " global " +
                           std::to_string(r.global_acc) + " personalized " +
                           std::to_string(r.personalized_acc));
        };

        fit::FederatedResult res = fit::run_federated(train, test, spec, fc, on_round);
        rounds_out.close();

        fit::save_film_params(join(out_dir, "psi.bin"), join(out_dir, "psi.json"),
                              res.global_psi);
        fit::save_cache(join(out_dir, "global_cache.bin"), join(out_dir, "global_cache.json"),
                        res.global_cache);

        const fit::RoundLog& last = res.rounds.back();
        json report;
        report["algorithm"] = algorithm;
        report["rounds"] = fc.rounds;
        report["baseline"] = json{{"global_acc", res.rounds.front().global_acc},
                                  {"personalized_acc", res.rounds.front().personalized_acc}};
        report["fl"] = json{{"global_acc", last.global_acc},
                            {"personalized_acc", last.personalized_acc},
                            {"cum_cost", last.cum_cost}};
        std::printf("fl      global %.6f personalized %.6f cost %s\n", last.global_acc,
                    last.personalized_acc, with_commas(last.cum_cost).c_str());

        if (baselines) {
            fit::FedBaseline up = fit::upper_bound(res.clients, test, spec, fc);
            fit::FedBaseline low =
                fit::lower_bound(res.clients, test, spec, fc, train.num_classes);
            report["upper"] = json{{"global_acc", up.global_acc},
                                   {"personalized_acc", up.personalized_acc}};
            report["lower"] = json{{"global_acc", low.global_acc},
                                   {"personalized_acc", low.personalized_acc}};
            std::printf("upper   global %.6f personalized %.6f\n", up.global_acc,
                        up.personalized_acc);
            std::printf("lower   global %.6f personalized %.6f\n", low.global_acc,
                        low.personalized_acc);
            std::printf("ladder  lower %.6f <= fl %.6f vs upper %.6f (global)\n", low.global_acc,
                        last.global_acc, up.global_acc);
        }
        fit::save_json(join(out_dir, "report.json"), report);
        write_manifest(out_dir, "fedsim", to_json(), fc.seed);

        if (fit::read_json_lines(join(out_dir, "rounds.jsonl")).size() != res.rounds.size() ||
            written != res.rounds.size()) {
            throw fit::IoError("fedsim: rounds.jsonl line count mismatch");
        }
        fit::load_cache(join(out_dir, "global_cache.bin"), join(out_dir, "global_cache.json"));
        for (const char* f : {"rounds.jsonl", "psi.bin", "psi.json", "global_cache.bin",
                              "global_cache.json", "report.json", "manifest.json"}) {
            require_file(join(out_dir, f));
        }
        return 0;
    }
};

// ---- paramcount -------------------------------------------------------------

struct ParamcountCmd {
    std::string variant = "lda";
    std::uint64_t classes = 0;
    std::uint64_t embed_dim = 0;
    std::uint64_t psi_count = 0;
    std::uint64_t theta = fit::kResnet50ThetaCount;

    int run() const {
        fit::ModelKind kind = fit::parse_model_kind(variant);
        std::uint64_t per_message =
            kind == fit::ModelKind::BitLinear ? theta : psi_count;
        std::uint64_t up = fit::count_updateable(kind, classes, embed_dim, per_message);
        std::uint64_t shared = fit::count_shared(kind, theta);
        std::uint64_t ref =
            fit::count_updateable(fit::ModelKind::BitLinear, classes, embed_dim, theta);
        double r = fit::rmus(up, ref);
        std::printf("model       %s\n", variant.c_str());
        std::printf("classes     %s\n", with_commas(classes).c_str());
        std::printf("embed_dim   %s\n", with_commas(embed_dim).c_str());
        std::printf("shared      %s\n", with_commas(shared).c_str());
        std::printf("updateable  %s\n", with_commas(up).c_str());
        std::printf("reference   %s  (full-model linear head, same classes)\n",
                    with_commas(ref).c_str());
        std::printf("rmus        %.4f\n", r);
        return 0;
    }
};

// ---- filmstats --------------------------------------------------------------

struct FilmstatsCmd {
    std::string params_path;
    std::string params_meta;
    std::string out_dir = "out";

    void apply(const json& j) {
        KeyChecker chk(j, "filmstats");
        take(chk, j, "params", params_path);
        take(chk, j, "params_meta", params_meta);
        chk.finish(j);
    }

    json to_json() const {
        return json{{"params", params_path}, {"params_meta", params_meta}};
    }

    int run() const {
        if (params_path.empty()) throw fit::ConfigError("filmstats: --params is required");
        ensure_out_dir(out_dir);
        std::string meta = params_meta.empty() ? sidecar_for(params_path) : params_meta;
        fit::FilmParams psi = fit::load_film_params(params_path, meta);
        std::vector<fit::FilmLayerStats> stats = fit::film_magnitude_stats(psi);

        std::string csv_path = join(out_dir, "film_stats.csv");
        std::ofstream out(csv_path, std::ios::binary);
        if (!out) throw fit::IoError("cannot open for writing: " + csv_path);
        out << "layer,width,gamma_dev_min,gamma_dev_q25,gamma_dev_median,gamma_dev_q75,"
               "gamma_dev_max,beta_abs_min,beta_abs_q25,beta_abs_median,beta_abs_q75,"
               "beta_abs_max\n";
        char buf[512];
        for (const fit::FilmLayerStats& s : stats) {
            std::snprintf(buf, sizeof(buf),
                          "%zu,%zu,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g\n",
                          s.layer, s.width, s.gamma_min, s.gamma_q25, s.gamma_median,
                          s.gamma_q75, s.gamma_max, s.beta_min, s.beta_q25, s.beta_median,
                          s.beta_q75, s.beta_max);
            out << buf;
            std::printf("layer %zu (width %zu): |gamma-1| median %.6g max %.6g, "
                        "|beta| median %.6g max %.6g\n",
                        s.layer, s.width, s.gamma_median, s.gamma_max, s.beta_median,
                        s.beta_max);
        }
        out.close();
        write_manifest(out_dir, "filmstats", to_json(), 0);
        require_file(csv_path);
        require_file(join(out_dir, "manifest.json"));
        return 0;
    }
};

std::string find_config_path(const std::vector<std::string>& args) {
    for (std::size_t i = 0; i < args.size(); ++i) {
        if (args[i] == "--config" && i + 1 < args.size()) return args[i + 1];
        if (args[i].rfind("--config=", 0) == 0) return args[i].substr(9);
    }
    return {};
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"FiLM-transfer few-shot classification toolkit"};
    app.require_subcommand(1);

    SynthCmd synth;
    FinetuneCmd finetune;
    EvalCmd eval;
    FedsimCmd fedsim;
    ParamcountCmd paramcount;
    FilmstatsCmd filmstats;
    std::string config_dummy;

    CLI::App* s = app.add_subcommand("synth", "generate a distorted-Gaussian dataset");
    s->add_option("--config", config_dummy, "JSON config or manifest from a previous run");
    s->add_option("--classes", synth.spec.classes);
    s->add_option("--latent-dim", synth.spec.latent_dim);
    s->add_option("--separation", synth.spec.separation);
    s->add_option("--cov-scale", synth.spec.cov_scale);
    s->add_option("--distortion-scale", synth.spec.distortion_scale);
    s->add_option("--shift-range", synth.spec.shift_range);
    s->add_option("--train-per-class", synth.spec.train_per_class);
    s->add_option("--test-per-class", synth.spec.test_per_class);
    s->add_option("--seed", synth.spec.seed);
    s->add_option("--out-dir", synth.out_dir);

    CLI::App* f = app.add_subcommand("finetune", "episodic FiLM fine-tuning on a dataset");
    f->add_option("--config", config_dummy, "JSON config or manifest from a previous run");
    f->add_option("--train", finetune.train_path);
    f->add_option("--eval", finetune.eval_path);
    f->add_option("--backbone", finetune.backbone_path);
    f->add_option("--variant", finetune.variant, "qda|lda|protonets");
    f->add_option("--shots", finetune.shots, "subsample this many examples per class (0 = all)");
    f->add_option("--learning-rate", finetune.tc.learning_rate);
    f->add_option("--iterations", finetune.tc.iterations);
    f->add_option("--support-set-size", finetune.tc.support_set_size);
    f->add_option("--split", finetune.split, "auto|split|nosplit|useall");
    f->add_option("--no-split-threshold", finetune.tc.no_split_threshold);
    f->add_flag("--stop-gradient-support", finetune.tc.stop_gradient_support);
    f->add_flag("--shuffle-before-split", finetune.tc.shuffle_before_split);
    f->add_flag("--proto-priors", finetune.tc.proto_priors);
    f->add_option("--seed", finetune.tc.seed);
    f->add_option("--out-dir", finetune.out_dir);

    CLI::App* ev = app.add_subcommand("eval", "evaluate stored FiLM parameters");
    ev->add_option("--config", config_dummy, "JSON config or manifest from a previous run");
    ev->add_option("--support", eval.support_path);
    ev->add_option("--test", eval.test_path);
    ev->add_option("--backbone", eval.backbone_path);
    ev->add_option("--params", eval.params_path);
    ev->add_option("--params-meta", eval.params_meta);
    ev->add_option("--e", eval.e_path, "covariance weights JSON");
    ev->add_option("--variant", eval.variant, "qda|lda|protonets");
    ev->add_flag("--proto-priors", eval.proto_priors);
    ev->add_option("--seed", eval.seed);
    ev->add_option("--out-dir", eval.out_dir);

    CLI::App* fd = app.add_subcommand("fedsim", "federated FiLM-transfer simulation");
    fd->add_option("--config", config_dummy, "JSON config or manifest from a previous run");
    fd->add_option("--train", fedsim.train_path);
    fd->add_option("--test", fedsim.test_path);
    fd->add_option("--backbone", fedsim.backbone_path);
    fd->add_option("--algorithm", fedsim.algorithm, "fedavg|fedprox");
    fd->add_flag("--baselines", fedsim.baselines, "also run upper/lower baselines");
    fd->add_option("--num-clients", fedsim.fc.num_clients);
    fd->add_option("--classes-per-client", fedsim.fc.classes_per_client);
    fd->add_option("--shots-per-class", fedsim.fc.shots_per_class);
    fd->add_option("--rounds", fedsim.fc.rounds);
    fd->add_option("--clients-per-round", fedsim.fc.clients_per_round);
    fd->add_option("--local-steps", fedsim.fc.local_steps);
    fd->add_option("--client-lr", fedsim.fc.client_lr);
    fd->add_option("--lr-decay", fedsim.fc.lr_decay);
    fd->add_option("--lr-decay-every", fedsim.fc.lr_decay_every);
    fd->add_option("--prox-mu", fedsim.fc.prox_mu);
    fd->add_option("--support-set-size", fedsim.fc.support_set_size);
    fd->add_option("--baseline-iterations", fedsim.fc.baseline_iterations);
    fd->add_option("--baseline-lr", fedsim.fc.baseline_lr);
    fd->add_flag("--weighted-prototypes", fedsim.fc.weighted_prototypes);
    fd->add_option("--seed", fedsim.fc.seed);
    fd->add_option("--out-dir", fedsim.out_dir);

    CLI::App* pc = app.add_subcommand("paramcount", "parameter accounting for a model variant");
    pc->add_option("variant", paramcount.variant, "qda|lda|protonets|bit")->required();
    pc->add_option("classes", paramcount.classes)->required();
    pc->add_option("embed_dim", paramcount.embed_dim)->required();
    pc->add_option("psi", paramcount.psi_count)->required();
    pc->add_option("--theta", paramcount.theta, "shared backbone parameter count");

    CLI::App* fsx = app.add_subcommand("filmstats", "per-layer FiLM magnitude summary");
    fsx->add_option("--config", config_dummy, "JSON config or manifest from a previous run");
    fsx->add_option("--params", filmstats.params_path);
    fsx->add_option("--params-meta", filmstats.params_meta);
    fsx->add_option("--out-dir", filmstats.out_dir);

    try {
        // File values load first; explicit flags then override them.
        std::vector<std::string> args(argv + 1, argv + argc);
        std::string config_path = find_config_path(args);
        if (!config_path.empty() && !args.empty()) {
            const std::string& sub = args[0];
            json cfg = load_config_file(config_path, sub);
            if (sub == "synth") synth.apply(cfg);
            else if (sub == "finetune") finetune.apply(cfg);
            else if (sub == "eval") eval.apply(cfg);
            else if (sub == "fedsim") fedsim.apply(cfg);
            else if (sub == "filmstats") filmstats.apply(cfg);
            else throw fit::ConfigError(sub + " does not take --config");
        }

        app.parse(argc, argv);

        if (s->parsed()) return synth.run();
        if (f->parsed()) return finetune.run();
        if (ev->parsed()) return eval.run();
        if (fd->parsed()) return fedsim.run();
        if (pc->parsed()) return paramcount.run();
        if (fsx->parsed()) return filmstats.run();
        return 1;
    } catch (const CLI::ParseError& e) {
        return app.exit(e);
    } catch (const fit::Error& e) {
        json err{{"error", "fit"}, {"message", e.what()}};
        std::cerr << err.dump() << "\n";
        return 1;
    } catch (const std::exception& e) {
        json err{{"error", "internal"}, {"message", e.what()}};
        std::cerr << err.dump() << "\n";
        return 1;
    }
}
