// Training harness: schedule anchors, AdamW semantics, crop sampling,
// bitwise determinism, resume equivalence, and configuration parsing.

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <sstream>

#include "dehaze/config.hpp"
#include "dehaze/train.hpp"

using namespace dehaze;

namespace {

// Small in-memory dataset: procedural scenes hazed at three intensities.
std::vector<Pair<float>> make_pairs(std::int64_t n_scenes, std::int64_t size,
                                    std::uint64_t seed) {
    std::vector<Pair<float>> pairs;
    Rng root(seed);
    auto depth = depth_map<float>(DepthKind::LinearRamp, size, size, 0.0, 1.0);
    for (std::int64_t s = 0; s < n_scenes; ++s) {
        auto clean = procedural_scene<float>(size, size, root.derive(
            static_cast<std::uint64_t>(s)));
        for (double beta : {0.2, 1.0, 4.0}) {
            Pair<float> p;
            p.id = "scene" + std::to_string(s) + "_b" + std::to_string(beta);
            p.clean = clean;
            p.hazy = synthesize(HazeScene<float>{clean, depth, beta, {0.9, 0.9, 0.9}});
            p.beta = beta;
            pairs.push_back(std::move(p));
        }
    }
    return pairs;
}

TrainConfig quick_config(std::int64_t iters) {
    TrainConfig cfg;
    cfg.total_iters = iters;
    cfg.batch_size = 2;
    cfg.crop = 16;
    cfg.checkpoint_interval = 5;
    return cfg;
}

}  // namespace

TEST_CASE("cosine schedule anchors and monotonicity") {
    TrainConfig cfg;
    cfg.total_iters = 2000;
    CHECK(cosine_lr(0, cfg) == doctest::Approx(2e-4).epsilon(1e-14));
    CHECK(cosine_lr(2000, cfg) == doctest::Approx(1e-5).epsilon(1e-14));
    CHECK(cosine_lr(1000, cfg) == doctest::Approx(1.05e-4).epsilon(1e-12));
    double prev = 1.0;
    for (std::int64_t s = 0; s <= 2000; s += 10) {
        const double lr = cosine_lr(s, cfg);
        CHECK(lr <= prev);
        prev = lr;
    }
    CHECK_THROWS_AS(cosine_lr(-1, cfg), ParamError);
    CHECK_THROWS_AS(cosine_lr(2001, cfg), ParamError);
}

TEST_CASE("train config validation") {
    TrainConfig cfg;
    CHECK_NOTHROW(cfg.validate());
    cfg.lr_end = cfg.lr_start;  // must be strictly below lr_start
    CHECK_THROWS_AS(cfg.validate(), ParamError);
    cfg = TrainConfig{};
    cfg.batch_size = 0;
    CHECK_THROWS_AS(cfg.validate(), ParamError);
    cfg = TrainConfig{};
    cfg.weight_decay = -0.1;
    CHECK_THROWS_AS(cfg.validate(), ParamError);
}

TEST_CASE("adamw: zero gradients leave parameters unchanged") {
    Tensor<float> p(Shape{4}, {1.0f, -2.0f, 0.5f, 3.0f}, true);
    p.ensure_grad();
    p.zero_grad();
    std::vector<Tensor<float>> params{p};
    auto opt = OptimizerState<float>::init(params);
    TrainConfig cfg;
    adamw_step(params, opt, 1e-3, cfg);
    CHECK(p[0] == 1.0f);
    CHECK(p[1] == -2.0f);
    CHECK(p[2] == 0.5f);
    CHECK(p[3] == 3.0f);
}

TEST_CASE("adamw: first step moves each parameter by about lr against the sign") {
    Tensor<float> p(Shape{3}, {1.0f, 1.0f, 1.0f}, true);
    p.ensure_grad();
    p.grad() = {0.5f, -2.0f, 1e-3f};
    std::vector<Tensor<float>> params{p};
    auto opt = OptimizerState<float>::init(params);
    TrainConfig cfg;
    adamw_step(params, opt, 1e-2, cfg);
    // bias-corrected first step is g/(|g| + eps), i.e. the gradient sign
    CHECK(p[0] == doctest::Approx(1.0f - 1e-2).epsilon(1e-4));
    CHECK(p[1] == doctest::Approx(1.0f + 1e-2).epsilon(1e-4));
    CHECK(p[2] == doctest::Approx(1.0f - 1e-2).epsilon(1e-4));
}

TEST_CASE("adamw: decoupled weight decay shrinks parameters multiplicatively") {
    Tensor<float> p(Shape{2}, {2.0f, -4.0f}, true);
    p.ensure_grad();
    p.zero_grad();
    std::vector<Tensor<float>> params{p};
    auto opt = OptimizerState<float>::init(params);
    TrainConfig cfg;
    cfg.weight_decay = 0.1;
    adamw_step(params, opt, 1e-2, cfg);
    CHECK(p[0] == doctest::Approx(2.0f * (1.0 - 1e-2 * 0.1)).epsilon(1e-6));
    CHECK(p[1] == doctest::Approx(-4.0f * (1.0 - 1e-2 * 0.1)).epsilon(1e-6));
}

TEST_CASE("adamw rejects missing and non-finite gradients") {
    Tensor<float> p(Shape{2}, 1.0f, true);  // no grad buffer allocated
    std::vector<Tensor<float>> params{p};
    auto opt = OptimizerState<float>::init(params);
    TrainConfig cfg;
    CHECK_THROWS_AS(adamw_step(params, opt, 1e-3, cfg), ParamError);
    p.ensure_grad();
    p.grad()[0] = std::numeric_limits<float>::quiet_NaN();
    CHECK_THROWS_AS(adamw_step(params, opt, 1e-3, cfg), NumericError);
}

TEST_CASE("random crops are aligned between hazy and clean") {
    Rng rng(1);
    Tensor<double> hazy(Shape{1, 3, 12, 12});
    Tensor<double> clean(hazy.shape());
    for (std::int64_t i = 0; i < hazy.numel(); ++i) {
        hazy[i] = static_cast<double>(i);
        clean[i] = static_cast<double>(i) + 0.5;  // same layout, fixed offset
    }
    for (int trial = 0; trial < 20; ++trial) {
        auto [h, c] = random_crop_pair(hazy, clean, 5, rng);
        CHECK(h.shape() == (Shape{1, 3, 5, 5}));
        for (std::int64_t i = 0; i < h.numel(); ++i)
            CHECK(c[i] - h[i] == 0.5);  // offset survives iff windows align
    }
    CHECK_THROWS_AS(random_crop_pair(hazy, clean, 13, rng), ParamError);
}

TEST_CASE("crop offsets cover the full range") {
    Rng rng(2);
    Tensor<double> img(Shape{1, 3, 6, 6});
    for (std::int64_t i = 0; i < img.numel(); ++i) img[i] = static_cast<double>(i);
    std::set<double> corners;
    for (int trial = 0; trial < 400; ++trial) {
        auto [h, c] = random_crop_pair(img, img, 3, rng);
        corners.insert(h[0]);  // top-left value identifies the window
    }
    CHECK(corners.size() == 16);  // all 4x4 possible offsets appear
}

TEST_CASE("rating set width follows the model configuration") {
    CHECK(rating_set_for(ModelConfig::full_scale()).size() == 14);
    CHECK(rating_set_for(ModelConfig::tiny()).size() == 2);
}

TEST_CASE("same seed, same data: bit-identical loss logs") {
    auto pairs = make_pairs(3, 16, 11);
    TrainConfig cfg = quick_config(8);
    std::ostringstream log_a, log_b;
    auto net_a = build<float>(ModelConfig::tiny(), 5);
    auto net_b = build<float>(ModelConfig::tiny(), 5);
    train(net_a, pairs, cfg, &log_a);
    train(net_b, pairs, cfg, &log_b);
    CHECK(log_a.str() == log_b.str());
    CHECK(log_a.str().find("1, ") == 0);  // per-step lines from step 1
    // trained parameters also agree bitwise
    auto pa = net_a.parameters();
    auto pb = net_b.parameters();
    for (std::size_t i = 0; i < pa.size(); ++i)
        for (std::int64_t j = 0; j < pa[i].numel(); ++j)
            CHECK(pa[i][j] == pb[i][j]);
}

TEST_CASE("resuming a mid-run checkpoint reproduces the uninterrupted run") {
    namespace fs = std::filesystem;
    auto pairs = make_pairs(3, 16, 12);
    TrainConfig cfg = quick_config(10);
    // Run A: all 10 steps in one go.
    auto net_full = build<float>(ModelConfig::tiny(), 6);
    std::ostringstream log_full;
    train(net_full, pairs, cfg, &log_full);
    // Run B: interrupted after 5 steps of the same schedule, then resumed.
    const std::string ckpt = "/tmp/train_resume_test.bin";
    auto net_b = build<float>(ModelConfig::tiny(), 6);
    std::ostringstream log_b;
    train(net_b, pairs, cfg, &log_b, ckpt,
          static_cast<const TrainState<float>*>(nullptr), /*stop_after=*/5);
    TrainState<float> mid;
    auto resumed = load_checkpoint<float>(ckpt, &mid);
    CHECK(mid.step == 5);
    auto res = train(resumed, pairs, cfg, &log_b, "", &mid);
    CHECK(res.last_step == 10);
    // Identical loss logs and bitwise-identical final parameters.
    CHECK(log_b.str() == log_full.str());
    auto pa = net_full.parameters();
    auto pb = resumed.parameters();
    REQUIRE(pa.size() == pb.size());
    for (std::size_t i = 0; i < pa.size(); ++i)
        for (std::int64_t j = 0; j < pa[i].numel(); ++j)
            CHECK(pa[i][j] == pb[i][j]);
    fs::remove(ckpt);
}

TEST_CASE("a completed checkpoint resumes as a no-op") {
    namespace fs = std::filesystem;
    auto pairs = make_pairs(3, 16, 13);
    TrainConfig cfg = quick_config(10);
    const std::string ckpt = "/tmp/train_noop_test.bin";
    auto net = build<float>(ModelConfig::tiny(), 7);
    train(net, pairs, cfg, nullptr, ckpt);
    TrainState<float> st;
    auto loaded = load_checkpoint<float>(ckpt, &st);
    CHECK(st.step == 10);
    CHECK(!st.rng_state.empty());
    std::ostringstream log;
    auto res = train(loaded, pairs, cfg, &log, "", &st);
    CHECK(res.last_step == 0);
    CHECK(log.str().empty());
    fs::remove(ckpt);
}

TEST_CASE("training survives routing that never selects some expert") {
    // Only dense-haze pairs: the light-haze expert is never routed to, so its
    // gradients must be presented as exactly zero rather than missing.
    auto pairs = make_pairs(2, 16, 16);
    std::vector<Pair<float>> dense;
    for (auto& p : pairs)
        if (p.beta >= 4.0) dense.push_back(p);
    REQUIRE(!dense.empty());
    auto net = build<float>(ModelConfig::tiny(), 10);
    TrainConfig cfg = quick_config(3);
    CHECK_NOTHROW(train(net, dense, cfg));
}

TEST_CASE("training rejects an empty pair list and mismatched resume state") {
    auto net = build<float>(ModelConfig::tiny(), 8);
    TrainConfig cfg = quick_config(2);
    std::vector<Pair<float>> none;
    CHECK_THROWS_AS(train(net, none, cfg), ParamError);
    auto pairs = make_pairs(1, 16, 14);
    TrainState<float> bad;
    bad.step = 1;
    bad.moment1.resize(3);
    bad.moment2.resize(3);
    CHECK_THROWS_AS(train(net, pairs, cfg, nullptr, "", &bad), ParamError);
}

TEST_CASE("evaluate produces per-pair rows and an optional baseline") {
    auto pairs = make_pairs(2, 16, 15);
    auto net = build<float>(ModelConfig::tiny(), 9);
    MetricReport baseline;
    auto report = evaluate(net, pairs, 7, &baseline);
    REQUIRE(report.rows.size() == pairs.size());
    REQUIRE(baseline.rows.size() == pairs.size());
    for (std::size_t i = 0; i < report.rows.size(); ++i) {
        CHECK(report.rows[i].image_id == pairs[i].id);
        CHECK(report.rows[i].psnr > 0);
        CHECK(baseline.rows[i].psnr > 0);
    }
}

TEST_CASE("configuration files: sections, types, lists, and env overrides") {
    std::istringstream src(
        "# comment\n"
        "[train]\n"
        "total_iters = 42\n"
        "lr_start = 3e-4\n"
        "\n"
        "[model]\n"
        "blocks = 1,2,3\n"
        "d_state = 8\n");
    ConfigFile cf = ConfigFile::parse(src);
    TrainConfig tc;
    apply_train_config(cf, tc);
    CHECK(tc.total_iters == 42);
    CHECK(tc.lr_start == doctest::Approx(3e-4));
    CHECK(tc.lr_end == doctest::Approx(1e-5));  // untouched default
    ModelConfig mc;
    apply_model_config(cf, mc);
    CHECK(mc.blocks == std::vector<std::int64_t>{1, 2, 3});
    CHECK(mc.d_state == 8);
    // environment variables override file values
    setenv("DEHAZE_TRAIN_TOTAL_ITERS", "99", 1);
    cf.apply_env(known_config_keys());
    TrainConfig tc2;
    apply_train_config(cf, tc2);
    CHECK(tc2.total_iters == 99);
    unsetenv("DEHAZE_TRAIN_TOTAL_ITERS");
}

TEST_CASE("configuration parser rejects malformed numbers") {
    std::istringstream src("[train]\ntotal_iters = twelve\n");
    ConfigFile cf = ConfigFile::parse(src);
    TrainConfig tc;
    CHECK_THROWS_AS(apply_train_config(cf, tc), ParamError);
}
