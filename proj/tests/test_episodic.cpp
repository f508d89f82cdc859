#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>
#include <set>
#include <vector>

#include "fit/episodic.hpp"
#include "fit/rng.hpp"

using fit::BackboneSpec;
using fit::CovarianceWeights;
using fit::FilmParams;
using fit::HeadVariant;
using fit::LabelledDataset;
using fit::Matrix;
using fit::TrainConfig;

namespace {

LabelledDataset blobs(std::size_t classes, std::size_t per_class, std::size_t dim,
                      double separation, fit::Rng& rng) {
    LabelledDataset d;
    d.num_classes = classes;
    d.features = Matrix(classes * per_class, dim);
    std::size_t r = 0;
    for (std::size_t c = 0; c < classes; ++c) {
        for (std::size_t i = 0; i < per_class; ++i) {
            for (std::size_t j = 0; j < dim; ++j) {
                double center = (j % classes == c) ? separation : 0.0;
                d.features(r, j) = center + rng.normal();
            }
            d.labels.push_back(static_cast<int>(c));
            ++r;
        }
    }
    return d;
}

// Same parameter packing as the trainer: psi flattened, then log e.
double packed_loss(const fit::Task& task, const BackboneSpec& spec,
                   const std::vector<double>& params, std::size_t psi_count,
                   HeadVariant variant) {
    FilmParams psi = spec.identity_film();
    psi.assign_flat(std::vector<double>(params.begin(), params.begin() + psi_count));
    CovarianceWeights e;
    if (variant != HeadVariant::Proto) {
        e.e1 = std::exp(params[psi_count + 0]);
        e.e2 = std::exp(params[psi_count + 1]);
        e.e3 = std::exp(params[psi_count + 2]);
    }
    return fit::episode_loss(task, spec, psi, e, variant);
}

}  // namespace

TEST_CASE("split halves classes in dataset order", "[episodic]") {
    fit::Rng rng(50);
    for (int rep = 0; rep < 30; ++rep) {
        std::size_t classes = static_cast<std::size_t>(rng.randint(2, 6));
        LabelledDataset d;
        d.num_classes = classes;
        std::vector<std::size_t> sizes;
        std::size_t total = 0;
        for (std::size_t c = 0; c < classes; ++c) {
            sizes.push_back(static_cast<std::size_t>(rng.randint(2, 9)));
            total += sizes.back();
        }
        d.features = Matrix(total, 2);
        // interleave classes so dataset order matters
        std::vector<std::size_t> remaining = sizes;
        std::size_t r = 0;
        while (r < total) {
            for (std::size_t c = 0; c < classes && r < total; ++c) {
                if (remaining[c] == 0) continue;
                --remaining[c];
                d.features(r, 0) = static_cast<double>(r);
                d.labels.push_back(static_cast<int>(c));
                ++r;
            }
        }

        auto [train, test] = fit::split_dataset(d);
        CHECK(train.size() + test.size() == total);

        auto members = fit::class_members(d.labels, classes);
        auto train_counts = train.class_counts();
        auto test_counts = test.class_counts();
        std::set<double> train_ids;
        for (std::size_t i = 0; i < train.size(); ++i) train_ids.insert(train.features(i, 0));
        for (std::size_t i = 0; i < test.size(); ++i) {
            CHECK(train_ids.count(test.features(i, 0)) == 0);  // disjoint rows
        }
        for (std::size_t c = 0; c < classes; ++c) {
            std::size_t k = (sizes[c] + 1) / 2;
            CHECK(train_counts[c] == k);
            CHECK(test_counts[c] == sizes[c] - k);
            // first ceil(n/2) members (dataset order) are the train half
            for (std::size_t i = 0; i < k; ++i) {
                double row_id = static_cast<double>(members[c][i]);
                CHECK(train_ids.count(row_id) == 1);
            }
        }
    }
}

TEST_CASE("split refuses singleton classes", "[episodic]") {
    LabelledDataset d;
    d.num_classes = 2;
    d.features = Matrix(3, 1);
    d.labels = {0, 0, 1};
    CHECK_THROWS_AS(fit::split_dataset(d), fit::TooFewShots);
    CHECK_THROWS_MATCHES(fit::split_dataset(d), fit::TooFewShots,
                         Catch::Matchers::MessageMatches(
                             Catch::Matchers::ContainsSubstring("class 1")));
}

TEST_CASE("task sampler respects way and shot bounds", "[episodic]") {
    fit::Rng data_rng(51);
    for (int rep = 0; rep < 40; ++rep) {
        std::size_t classes = static_cast<std::size_t>(data_rng.randint(2, 12));
        std::size_t per = static_cast<std::size_t>(data_rng.randint(2, 30));
        std::size_t sss = static_cast<std::size_t>(data_rng.randint(2, 120));
        LabelledDataset d = blobs(classes, per, 2, 1.0, data_rng);
        auto [train, test] = fit::split_dataset(d);

        fit::Rng rng(static_cast<std::uint64_t>(rep) + 900);
        fit::Task task = fit::sample_task(train, test, sss, rng);

        std::size_t way = task.classes.size();
        std::size_t lo = std::min<std::size_t>(classes, 5);
        std::size_t hi = std::min<std::size_t>(classes, sss);
        if (lo > hi) lo = hi;
        CHECK(way >= lo);
        CHECK(way <= hi);

        // distinct ascending global class ids
        for (std::size_t k = 1; k < way; ++k) CHECK(task.classes[k] > task.classes[k - 1]);

        std::size_t balanced = static_cast<std::size_t>(std::max<long>(
            1, std::lround(static_cast<double>(sss) / static_cast<double>(way))));
        std::size_t qcap = std::max<std::size_t>(1, 2000 / way);

        auto sup_counts = task.support.class_counts();
        auto q_counts = task.query.class_counts();
        REQUIRE(sup_counts.size() == way);
        auto train_counts = train.class_counts();
        auto test_counts = test.class_counts();
        for (std::size_t k = 0; k < way; ++k) {
            auto c = static_cast<std::size_t>(task.classes[k]);
            CHECK(sup_counts[k] == std::min(train_counts[c], balanced));
            CHECK(q_counts[k] == std::min(test_counts[c], qcap));
        }
    }
}

TEST_CASE("task sampler localizes labels", "[episodic]") {
    fit::Rng rng(52);
    LabelledDataset d = blobs(8, 6, 2, 1.0, rng);
    auto [train, test] = fit::split_dataset(d);
    fit::Task task = fit::sample_task(train, test, 20, rng);
    CHECK(task.support.num_classes == task.classes.size());
    for (int y : task.support.labels) {
        CHECK(y >= 0);
        CHECK(static_cast<std::size_t>(y) < task.classes.size());
    }
    for (int y : task.query.labels) {
        CHECK(y >= 0);
        CHECK(static_cast<std::size_t>(y) < task.classes.size());
    }
}

TEST_CASE("plain and taped episode objectives agree", "[episodic]") {
    fit::Rng rng(53);
    BackboneSpec spec = BackboneSpec::mlp(3, {5}, 4, 7);
    for (HeadVariant variant : {HeadVariant::Qda, HeadVariant::Lda, HeadVariant::Proto}) {
        LabelledDataset d = blobs(4, 8, 3, 2.0, rng);
        auto [train, test] = fit::split_dataset(d);
        fit::Task task = fit::sample_task(train, test, 16, rng);

        FilmParams psi = spec.identity_film();
        fit::Rng prng(54);
        for (auto& l : psi.layers) {
            for (double& g : l.gamma) g = 1.0 + 0.1 * prng.normal();
            for (double& b : l.beta) b = 0.1 * prng.normal();
        }
        CovarianceWeights e{0.5, 0.5, 1.0};

        double plain = fit::episode_loss(task, spec, psi, e, variant);
        fit::EpisodeGraph g = fit::build_episode_graph(task, spec, psi, e, variant);
        INFO(fit::variant_name(variant));
        CHECK(g.tape.value(g.loss)(0, 0) == Catch::Approx(plain).margin(1e-9));
    }
}

TEST_CASE("episode gradients match finite differences", "[episodic]") {
    fit::Rng rng(55);
    BackboneSpec spec = BackboneSpec::mlp(3, {4}, 3, 11);
    std::size_t psi_count = fit::film_param_count(spec);

    for (HeadVariant variant : {HeadVariant::Qda, HeadVariant::Lda, HeadVariant::Proto}) {
        LabelledDataset d = blobs(3, 8, 3, 2.0, rng);
        auto [train, test] = fit::split_dataset(d);
        fit::Task task = fit::sample_task(train, test, 12, rng);

        std::vector<double> params = spec.identity_film().flatten();
        fit::Rng prng(56);
        for (double& v : params) v += 0.05 * prng.normal();
        FilmParams psi = spec.identity_film();
        psi.assign_flat(params);
        bool uses_e = variant != HeadVariant::Proto;
        CovarianceWeights e{0.6, 0.4, 1.1};
        if (uses_e) {
            params.push_back(std::log(e.e1));
            params.push_back(std::log(e.e2));
            params.push_back(std::log(e.e3));
        }

        fit::EpisodeGraph g = fit::build_episode_graph(task, spec, psi, e, variant);
        g.tape.backward(g.loss);
        std::vector<double> analytic;
        for (std::size_t k = 0; k < g.film.gamma.size(); ++k) {
            const Matrix& gg = g.tape.grad(g.film.gamma[k]);
            analytic.insert(analytic.end(), gg.data.begin(), gg.data.end());
            const Matrix& gb = g.tape.grad(g.film.beta[k]);
            analytic.insert(analytic.end(), gb.data.begin(), gb.data.end());
        }
        if (uses_e) {
            const Matrix& ge = g.tape.grad(g.log_e);
            analytic.insert(analytic.end(), ge.data.begin(), ge.data.end());
        }
        REQUIRE(analytic.size() == params.size());

        double h = 1e-6;
        for (std::size_t i = 0; i < params.size(); ++i) {
            std::vector<double> up = params, dn = params;
            up[i] += h;
            dn[i] -= h;
            double fd = (packed_loss(task, spec, up, psi_count, variant) -
                         packed_loss(task, spec, dn, psi_count, variant)) /
                        (2 * h);
            double denom = std::max({std::fabs(fd), std::fabs(analytic[i]), 1.0});
            INFO(fit::variant_name(variant) << " param " << i);
            CHECK(std::fabs(analytic[i] - fd) / denom < 1e-5);
        }
    }
}

TEST_CASE("finetuning is deterministic in the seed", "[episodic]") {
    fit::Rng rng(57);
    // enough spare rows per class that different seeds draw different tasks
    LabelledDataset d = blobs(3, 10, 2, 2.0, rng);
    BackboneSpec spec = BackboneSpec::identity(2);
    TrainConfig tc;
    tc.iterations = 12;
    tc.support_set_size = 6;
    tc.seed = 99;

    fit::FinetuneResult a = fit::finetune(d, spec, tc, HeadVariant::Lda);
    fit::FinetuneResult b = fit::finetune(d, spec, tc, HeadVariant::Lda);
    CHECK(a.psi.flatten() == b.psi.flatten());
    CHECK(a.e.e1 == b.e.e1);
    CHECK(a.e.e2 == b.e.e2);
    CHECK(a.e.e3 == b.e.e3);
    REQUIRE(a.trace.size() == b.trace.size());
    for (std::size_t i = 0; i < a.trace.size(); ++i) {
        CHECK(a.trace[i].loss == b.trace[i].loss);
        CHECK(a.trace[i].iteration == i);
    }

    tc.seed = 100;
    fit::FinetuneResult c = fit::finetune(d, spec, tc, HeadVariant::Lda);
    CHECK(a.psi.flatten() != c.psi.flatten());
}

TEST_CASE("training raises the episode objective", "[episodic]") {
    fit::Rng rng(58);
    LabelledDataset d = blobs(4, 12, 3, 3.0, rng);
    // dampen the features so identity film is suboptimal
    for (std::size_t i = 0; i < d.features.size(); ++i) d.features.data[i] *= 0.5;
    BackboneSpec spec = BackboneSpec::identity(3);
    TrainConfig tc;
    tc.iterations = 60;
    tc.support_set_size = 24;
    tc.seed = 5;

    fit::FinetuneResult r = fit::finetune(d, spec, tc, HeadVariant::Lda);
    REQUIRE(r.trace.size() == 60);
    double first = 0.0, last = 0.0;
    for (std::size_t i = 0; i < 20; ++i) {
        first += r.trace[i].loss;
        last += r.trace[60 - 20 + i].loss;
    }
    CHECK(last / 20.0 > first / 20.0);
    for (const auto& t : r.trace) CHECK(t.wall_ms >= 0.0);
}

TEST_CASE("one example per class skips training entirely", "[episodic]") {
    LabelledDataset d;
    d.num_classes = 3;
    d.features = Matrix(3, 2);
    d.features.data = {0, 0, 5, 5, -5, 5};
    d.labels = {0, 1, 2};
    BackboneSpec spec = BackboneSpec::identity(2);
    TrainConfig tc;
    tc.iterations = 50;

    fit::FinetuneResult r = fit::finetune(d, spec, tc, HeadVariant::Lda);
    CHECK(r.one_shot);
    CHECK(r.trace.empty());
    CHECK(r.psi.flatten() == spec.identity_film().flatten());
    CHECK(r.e.e1 == 0.5);
    CHECK(r.e.e2 == 0.5);
    CHECK(r.e.e3 == 1.0);

    // from a non-identity start the start is returned untouched
    FilmParams start = spec.identity_film();
    start.layers[0].gamma = {2.0, 3.0};
    start.layers[0].beta = {-1.0, 0.5};
    fit::FinetuneResult r2 = fit::finetune_from(d, spec, tc, HeadVariant::Proto, start);
    CHECK(r2.one_shot);
    CHECK(r2.psi.flatten() == start.flatten());
}

TEST_CASE("split mode auto picks by dataset size", "[episodic]") {
    // a singleton class breaks Split but survives NoSplit; auto must
    // choose NoSplit once the dataset crosses the threshold
    auto make = [](std::size_t bulk) {
        LabelledDataset d;
        d.num_classes = 2;
        d.features = Matrix(bulk + 1, 1);
        for (std::size_t i = 0; i < bulk; ++i) {
            d.features(i, 0) = static_cast<double>(i % 7);
            d.labels.push_back(0);
        }
        d.features(bulk, 0) = 100.0;
        d.labels.push_back(1);
        return d;
    };
    BackboneSpec spec = BackboneSpec::identity(1);
    TrainConfig tc;
    tc.iterations = 1;
    tc.support_set_size = 4;
    tc.no_split_threshold = 50;

    LabelledDataset small = make(30);
    CHECK_THROWS_AS(fit::finetune(small, spec, tc, HeadVariant::Proto), fit::TooFewShots);

    LabelledDataset big = make(60);  // 61 rows >= threshold -> no split
    fit::FinetuneResult r = fit::finetune(big, spec, tc, HeadVariant::Proto);
    CHECK(r.trace.size() == 1);

    // explicit modes override the size rule
    tc.split_mode = fit::SplitMode::Split;
    CHECK_THROWS_AS(fit::finetune(big, spec, tc, HeadVariant::Proto), fit::TooFewShots);
    tc.split_mode = fit::SplitMode::UseAll;
    CHECK(fit::finetune(small, spec, tc, HeadVariant::Proto).trace.size() == 1);
}

TEST_CASE("split errors carry the failing iteration context", "[episodic]") {
    LabelledDataset d;
    d.num_classes = 2;
    d.features = Matrix(3, 1);
    d.features.data = {0, 1, 5};
    d.labels = {0, 0, 1};
    BackboneSpec spec = BackboneSpec::identity(1);
    TrainConfig tc;
    tc.split_mode = fit::SplitMode::Split;
    CHECK_THROWS_AS(fit::finetune(d, spec, tc, HeadVariant::Proto), fit::TooFewShots);
}

TEST_CASE("stop-gradient support changes gradients but not the forward value", "[episodic]") {
    fit::Rng rng(59);
    LabelledDataset d = blobs(3, 8, 2, 2.0, rng);
    auto [train, test] = fit::split_dataset(d);
    fit::Task task = fit::sample_task(train, test, 12, rng);
    BackboneSpec spec = BackboneSpec::mlp(2, {4}, 3, 3);
    FilmParams psi = spec.identity_film();
    CovarianceWeights e{0.5, 0.5, 1.0};

    fit::EpisodeGraph live = fit::build_episode_graph(task, spec, psi, e, HeadVariant::Proto,
                                                      false);
    fit::EpisodeGraph frozen = fit::build_episode_graph(task, spec, psi, e, HeadVariant::Proto,
                                                        true);
    CHECK(live.tape.value(live.loss)(0, 0) ==
          Catch::Approx(frozen.tape.value(frozen.loss)(0, 0)).margin(1e-12));

    live.tape.backward(live.loss);
    frozen.tape.backward(frozen.loss);
    double diff = 0.0;
    for (std::size_t k = 0; k < live.film.gamma.size(); ++k) {
        diff += fit::max_abs_diff(live.tape.grad(live.film.gamma[k]),
                                  frozen.tape.grad(frozen.film.gamma[k]));
    }
    CHECK(diff > 1e-9);
}

TEST_CASE("proximal pull keeps parameters near the anchor", "[episodic]") {
    fit::Rng rng(60);
    LabelledDataset d = blobs(3, 8, 2, 2.0, rng);
    BackboneSpec spec = BackboneSpec::identity(2);
    TrainConfig tc;
    tc.iterations = 25;
    tc.support_set_size = 12;
    tc.seed = 3;

    FilmParams anchor = spec.identity_film();
    fit::FinetuneResult free_run =
        fit::finetune_from(d, spec, tc, HeadVariant::Proto, anchor, nullptr, 0.0);
    fit::FinetuneResult tight =
        fit::finetune_from(d, spec, tc, HeadVariant::Proto, anchor, &anchor, 1e9);

    auto dist = [&](const FilmParams& p) {
        double s = 0.0;
        std::vector<double> base = anchor.flatten();
        std::vector<double> got = p.flatten();
        for (std::size_t i = 0; i < base.size(); ++i) {
            s += (got[i] - base[i]) * (got[i] - base[i]);
        }
        return std::sqrt(s);
    };
    double d_free = dist(free_run.psi);
    double d_tight = dist(tight.psi);
    CHECK(d_free > 1e-4);
    CHECK(d_tight < 1e-3 * d_free);
}

TEST_CASE("shuffle before split changes the halves deterministically", "[episodic]") {
    fit::Rng rng(61);
    LabelledDataset d = blobs(3, 10, 2, 2.0, rng);
    BackboneSpec spec = BackboneSpec::identity(2);
    TrainConfig tc;
    tc.iterations = 8;
    tc.support_set_size = 10;
    tc.seed = 17;
    tc.split_mode = fit::SplitMode::Split;

    fit::FinetuneResult plain1 = fit::finetune(d, spec, tc, HeadVariant::Proto);
    tc.shuffle_before_split = true;
    fit::FinetuneResult shuf1 = fit::finetune(d, spec, tc, HeadVariant::Proto);
    fit::FinetuneResult shuf2 = fit::finetune(d, spec, tc, HeadVariant::Proto);
    CHECK(shuf1.psi.flatten() == shuf2.psi.flatten());
    CHECK(plain1.psi.flatten() != shuf1.psi.flatten());
}

TEST_CASE("evaluation reports per-class accuracy", "[episodic]") {
    // two well-separated classes, one deliberately mislabeled test point
    LabelledDataset support;
    support.num_classes = 2;
    support.features = Matrix(4, 1);
    support.features.data = {0.0, 0.2, 10.0, 10.2};
    support.labels = {0, 0, 1, 1};

    LabelledDataset test;
    test.num_classes = 2;
    test.features = Matrix(3, 1);
    test.features.data = {0.1, 10.1, 0.1};
    test.labels = {0, 1, 1};  // last one is wrong on purpose

    BackboneSpec spec = BackboneSpec::identity(1);
    fit::EvalReport r = fit::evaluate(support, test, spec, spec.identity_film(), {},
                                      HeadVariant::Proto);
    CHECK(r.count == 3);
    CHECK(r.accuracy == Catch::Approx(2.0 / 3.0));
    CHECK(r.per_class_counts == std::vector<std::size_t>{1, 2});
    CHECK(r.per_class_accuracy[0] == 1.0);
    CHECK(r.per_class_accuracy[1] == 0.5);
    CHECK(r.mean_log_prob < 0.0);
}

TEST_CASE("training configuration is validated", "[episodic]") {
    TrainConfig tc;
    tc.learning_rate = 0.0;
    CHECK_THROWS_AS(tc.validate(), fit::ConfigError);
    tc = TrainConfig{};
    tc.support_set_size = 0;
    CHECK_THROWS_AS(tc.validate(), fit::ConfigError);
    tc = TrainConfig{};
    tc.adam_beta1 = 1.0;
    CHECK_THROWS_AS(tc.validate(), fit::ConfigError);
    tc = TrainConfig{};
    tc.e_init.e3 = 0.0;
    CHECK_THROWS_AS(tc.validate(), fit::ConfigError);
    CHECK_NOTHROW(TrainConfig{}.validate());
}

TEST_CASE("split mode names round trip", "[episodic]") {
    CHECK(fit::parse_split_mode("auto") == fit::SplitMode::Auto);
    CHECK(fit::parse_split_mode("split") == fit::SplitMode::Split);
    CHECK(fit::parse_split_mode("nosplit") == fit::SplitMode::NoSplit);
    CHECK(fit::parse_split_mode("useall") == fit::SplitMode::UseAll);
    CHECK_THROWS_AS(fit::parse_split_mode("half"), fit::ConfigError);
    CHECK(std::string(fit::split_mode_name(fit::SplitMode::NoSplit)) == "no-split");
}
