#include <catch2/catch_amalgamated.hpp>

#include <sys/wait.h>

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "fit/dataset.hpp"
#include "fit/io.hpp"
#include "fit/manifest.hpp"

#ifndef FIT_CLI_PATH
#error "FIT_CLI_PATH must point at the built command line binary"
#endif

namespace {

namespace fs = std::filesystem;

const std::string& work_dir() {
    static const std::string dir = [] {
        fs::path d = fs::temp_directory_path() / "fit_cli_tests";
        fs::remove_all(d);
        fs::create_directories(d);
        return d.string();
    }();
    return dir;
}

std::string slurp(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

struct RunResult {
    int code = -1;
    std::string out;
    std::string err;
};

RunResult run_cli(const std::string& args) {
    static int counter = 0;
    std::string base = work_dir() + "/run" + std::to_string(counter++);
    std::string cmd = std::string(FIT_CLI_PATH) + " " + args + " > " + base + ".out 2> " +
                      base + ".err";
    int status = std::system(cmd.c_str());
    RunResult r;
    r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    r.out = slurp(base + ".out");
    r.err = slurp(base + ".err");
    return r;
}

// One synth dataset plus one finetune run, shared by the tests below and
// created on first use so every test stays order-independent.
struct Fixture {
    std::string synth_dir;
    std::string finetune_dir;
};

const Fixture& fixture() {
    static const Fixture f = [] {
        Fixture fx;
        fx.synth_dir = work_dir() + "/synth";
        fx.finetune_dir = work_dir() + "/finetune";
        RunResult s = run_cli("synth --classes 4 --latent-dim 6 --train-per-class 6 "
                              "--test-per-class 8 --seed 3 --out-dir " + fx.synth_dir);
        if (s.code != 0) throw std::runtime_error("fixture synth failed: " + s.err);
        RunResult t = run_cli("finetune --train " + fx.synth_dir + "/train.csv --eval " +
                              fx.synth_dir + "/test.csv --backbone " + fx.synth_dir +
                              "/backbone.json --variant lda --iterations 5 "
                              "--support-set-size 10 --seed 9 --out-dir " + fx.finetune_dir);
        if (t.code != 0) throw std::runtime_error("fixture finetune failed: " + t.err);
        return fx;
    }();
    return f;
}

}  // namespace

TEST_CASE("synth writes a reproducible dataset", "[cli]") {
    const Fixture& fx = fixture();
    for (const char* f : {"train.csv", "test.csv", "backbone.json", "oracle_psi.bin",
                          "oracle_psi.json", "manifest.json"}) {
        CHECK(fs::exists(fx.synth_dir + "/" + std::string(f)));
    }
    fit::LabelledDataset train = fit::load_csv(fx.synth_dir + "/train.csv");
    CHECK(train.size() == 24);
    CHECK(train.dim() == 6);
    CHECK(train.num_classes == 4);

    fit::json manifest = fit::load_json(fx.synth_dir + "/manifest.json");
    CHECK(manifest["command"] == "synth");
    CHECK(manifest["config"]["classes"] == 4);

    std::string again = work_dir() + "/synth_again";
    RunResult r = run_cli("synth --classes 4 --latent-dim 6 --train-per-class 6 "
                          "--test-per-class 8 --seed 3 --out-dir " + again);
    REQUIRE(r.code == 0);
    CHECK(slurp(again + "/train.csv") == slurp(fx.synth_dir + "/train.csv"));
    CHECK(slurp(again + "/oracle_psi.bin") == slurp(fx.synth_dir + "/oracle_psi.bin"));
}

TEST_CASE("finetune writes parameters, traces and a report", "[cli]") {
    const Fixture& fx = fixture();
    for (const char* f : {"psi.bin", "psi.json", "e.json", "trace.jsonl", "metrics.jsonl",
                          "report.json", "manifest.json"}) {
        CHECK(fs::exists(fx.finetune_dir + "/" + std::string(f)));
    }
    std::vector<fit::json> trace = fit::read_json_lines(fx.finetune_dir + "/trace.jsonl");
    std::vector<fit::json> metrics = fit::read_json_lines(fx.finetune_dir + "/metrics.jsonl");
    REQUIRE(trace.size() == 5);
    REQUIRE(metrics.size() == 5);
    CHECK(trace[0].contains("wall_ms"));
    CHECK_FALSE(metrics[0].contains("wall_ms"));
    CHECK(metrics[4]["iteration"] == 4);

    fit::json report = fit::load_json(fx.finetune_dir + "/report.json");
    double acc = report["accuracy"].get<double>();
    CHECK(acc >= 0.0);
    CHECK(acc <= 1.0);
    CHECK(report["one_shot_rule"] == false);

    fit::FilmParams psi = fit::load_film_params(fx.finetune_dir + "/psi.bin",
                                                fx.finetune_dir + "/psi.json");
    CHECK(psi.widths() == std::vector<std::size_t>{6});
}

TEST_CASE("a manifest reruns the training bit for bit", "[cli]") {
    const Fixture& fx = fixture();
    std::string redo = work_dir() + "/finetune_redo";
    RunResult r = run_cli("finetune --config " + fx.finetune_dir + "/manifest.json --out-dir " +
                          redo);
    REQUIRE(r.code == 0);
    CHECK(slurp(redo + "/psi.bin") == slurp(fx.finetune_dir + "/psi.bin"));
    CHECK(slurp(redo + "/metrics.jsonl") == slurp(fx.finetune_dir + "/metrics.jsonl"));
    CHECK(slurp(redo + "/manifest.json") == slurp(fx.finetune_dir + "/manifest.json"));
}

TEST_CASE("explicit flags override config file values", "[cli]") {
    const Fixture& fx = fixture();
    std::string dir = work_dir() + "/finetune_short";
    RunResult r = run_cli("finetune --config " + fx.finetune_dir +
                          "/manifest.json --iterations 2 --out-dir " + dir);
    REQUIRE(r.code == 0);
    CHECK(fit::read_json_lines(dir + "/metrics.jsonl").size() == 2);
}

TEST_CASE("unknown config keys are fatal", "[cli]") {
    const Fixture& fx = fixture();
    std::string cfg = work_dir() + "/bad_config.json";
    {
        std::ofstream out(cfg);
        out << "{\"iterations\": 2, \"bogus_knob\": 1}\n";
    }
    RunResult r = run_cli("finetune --config " + cfg + " --train " + fx.synth_dir +
                          "/train.csv --backbone " + fx.synth_dir + "/backbone.json");
    CHECK(r.code != 0);
    CHECK(r.err.find("bogus_knob") != std::string::npos);
}

TEST_CASE("a manifest for another subcommand is rejected", "[cli]") {
    const Fixture& fx = fixture();
    RunResult r = run_cli("eval --config " + fx.finetune_dir + "/manifest.json");
    CHECK(r.code != 0);
    CHECK(r.err.find("finetune") != std::string::npos);
}

TEST_CASE("eval reproduces the training report from saved parameters", "[cli]") {
    const Fixture& fx = fixture();
    std::string dir = work_dir() + "/eval";
    RunResult r = run_cli("eval --support " + fx.synth_dir + "/train.csv --test " +
                          fx.synth_dir + "/test.csv --backbone " + fx.synth_dir +
                          "/backbone.json --params " + fx.finetune_dir + "/psi.bin --e " +
                          fx.finetune_dir + "/e.json --variant lda --out-dir " + dir);
    REQUIRE(r.code == 0);
    for (const char* f : {"cache.bin", "cache.json", "report.json", "manifest.json"}) {
        CHECK(fs::exists(dir + "/" + std::string(f)));
    }
    fit::json from_eval = fit::load_json(dir + "/report.json");
    fit::json from_train = fit::load_json(fx.finetune_dir + "/report.json");
    CHECK(from_eval["accuracy"].get<double>() == from_train["accuracy"].get<double>());
    CHECK(from_eval["mean_log_prob"].get<double>() ==
          from_train["mean_log_prob"].get<double>());
}

TEST_CASE("paramcount prints the reference accounting", "[cli]") {
    RunResult lda = run_cli("paramcount lda 10 2048 11648");
    REQUIRE(lda.code == 0);
    CHECK(lda.out.find("32,140") != std::string::npos);
    CHECK(lda.out.find("23,520,832") != std::string::npos);
    CHECK(lda.out.find("rmus") != std::string::npos);

    RunResult qda = run_cli("paramcount qda 10 2048 11648");
    REQUIRE(qda.code == 0);
    CHECK(qda.out.find("21,013,891") != std::string::npos);

    RunResult proto = run_cli("paramcount protonets 10 2048 11648");
    REQUIRE(proto.code == 0);
    CHECK(proto.out.find("32,128") != std::string::npos);

    RunResult missing = run_cli("paramcount lda 10 2048");
    CHECK(missing.code != 0);

    std::string cfg = work_dir() + "/pc_config.json";
    {
        std::ofstream out(cfg);
        out << "{}\n";
    }
    RunResult with_config = run_cli("paramcount lda 10 2048 11648 --config " + cfg);
    CHECK(with_config.code != 0);
}

TEST_CASE("filmstats summarizes saved parameters", "[cli]") {
    const Fixture& fx = fixture();
    std::string dir = work_dir() + "/filmstats";
    RunResult r = run_cli("filmstats --params " + fx.finetune_dir + "/psi.bin --out-dir " + dir);
    REQUIRE(r.code == 0);
    std::string csv = slurp(dir + "/film_stats.csv");
    CHECK(csv.rfind("layer,width,gamma_dev_min,", 0) == 0);
    // header plus exactly one layer row for the identity backbone
    CHECK(std::count(csv.begin(), csv.end(), '\n') == 2);
}

TEST_CASE("fedsim logs rounds and the baseline ladder", "[cli]") {
    const Fixture& fx = fixture();
    std::string dir = work_dir() + "/fedsim";
    RunResult r = run_cli("fedsim --train " + fx.synth_dir + "/train.csv --test " +
                          fx.synth_dir + "/test.csv --backbone " + fx.synth_dir +
                          "/backbone.json --num-clients 3 --classes-per-client 4 "
                          "--shots-per-class 4 --rounds 2 --clients-per-round 2 "
                          "--local-steps 2 --support-set-size 8 --baseline-iterations 4 "
                          "--seed 5 --baselines --out-dir " + dir);
    REQUIRE(r.code == 0);
    std::vector<fit::json> rounds = fit::read_json_lines(dir + "/rounds.jsonl");
    REQUIRE(rounds.size() == 3);  // baseline row + 2 rounds
    CHECK(rounds[0]["round"] == 0);
    CHECK(rounds[0]["cum_cost"] == 0);
    CHECK(rounds[2]["cum_cost"].get<std::uint64_t>() >
          rounds[1]["cum_cost"].get<std::uint64_t>());

    fit::json report = fit::load_json(dir + "/report.json");
    CHECK(report["algorithm"] == "fedavg");
    CHECK(report.contains("baseline"));
    CHECK(report.contains("fl"));
    CHECK(report.contains("upper"));
    CHECK(report.contains("lower"));
    CHECK(report["fl"]["cum_cost"] == rounds[2]["cum_cost"]);

    fit::ClassifierCache cache = fit::load_cache(dir + "/global_cache.bin",
                                                 dir + "/global_cache.json");
    CHECK(cache.classes == 4);
    CHECK(r.out.find("ladder") != std::string::npos);
}

TEST_CASE("failures produce structured errors and nonzero exits", "[cli]") {
    RunResult r = run_cli("finetune --train " + work_dir() + "/nope.csv --backbone " +
                          work_dir() + "/nope.json");
    CHECK(r.code == 1);
    fit::json err = fit::json::parse(r.err);
    CHECK(err["error"] == "fit");
    CHECK(err["message"].get<std::string>().find("nope") != std::string::npos);

    RunResult usage = run_cli("frobnicate");
    CHECK(usage.code != 0);

    RunResult none = run_cli("");
    CHECK(none.code != 0);
}
