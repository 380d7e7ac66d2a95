// Degradation prior: rating-level sets, close-set softmax, and the
// dark-channel density estimator.

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <fstream>

#include "dehaze/prior.hpp"
#include "dehaze/rng.hpp"

using namespace dehaze;

TEST_CASE("rating level sets validate") {
    const auto def = RatingLevelSet::default_set();
    CHECK(def.size() == 14);
    CHECK(def.levels.front() == "clear");
    const auto g = RatingLevelSet::graded(5);
    CHECK(g.size() == 5);
    RatingLevelSet bad = def;
    bad.levels[1] = "clear";  // duplicate
    CHECK_THROWS_AS(bad.validate(), ParamError);
    RatingLevelSet oob = def;
    oob.token_index[0] = 99;
    CHECK_THROWS_AS(oob.validate(), ParamError);
}

TEST_CASE("rating level set loads from plain text") {
    const std::string path = "/tmp/levels_test.txt";
    {
        std::ofstream out(path);
        out << "# clearest first\n";
        out << "clear = 0\n";
        out << "hazy = 3   # sparse token indices allowed\n";
        out << "opaque = 5\n";
    }
    const auto s = RatingLevelSet::load(path);
    CHECK(s.size() == 3);
    CHECK(s.levels[1] == "hazy");
    CHECK(s.token_index[1] == 3);
    CHECK(s.vocab_size == 6);
    std::remove(path.c_str());
}

TEST_CASE("close_set_prior: symmetry, dominance, hand softmax") {
    {
        const auto levels = RatingLevelSet::graded(5);
        std::vector<double> logits(5, 1.3);
        const auto p = close_set_prior(logits, levels);
        for (double v : p.probs) CHECK(v == doctest::Approx(0.2));
    }
    {
        const auto levels = RatingLevelSet::graded(4);
        std::vector<double> logits = {0.0, 20.0, 0.0, 0.0};
        const auto p = close_set_prior(logits, levels);
        CHECK(p.probs[1] > 0.999);
    }
    {
        // 10-token vocabulary, 3 mapped levels at scattered indices.
        RatingLevelSet levels;
        levels.levels = {"a", "b", "c"};
        levels.token_index = {2, 5, 9};
        levels.vocab_size = 10;
        std::vector<double> logits(10, -100.0);
        logits[2] = 0.0;
        logits[5] = std::log(2.0);
        logits[9] = std::log(2.0);
        const auto p = close_set_prior(logits, levels);
        CHECK(p.probs[0] == doctest::Approx(0.2));
        CHECK(p.probs[1] == doctest::Approx(0.4));
        CHECK(p.probs[2] == doctest::Approx(0.4));
    }
    {
        const auto levels = RatingLevelSet::graded(3);
        std::vector<double> short_logits = {1.0, 2.0};  // index 2 out of range
        CHECK_THROWS_AS(close_set_prior(short_logits, levels), ParamError);
        std::vector<double> nan_logits = {
            1.0, std::numeric_limits<double>::quiet_NaN(), 0.0};
        CHECK_THROWS_AS(close_set_prior(nan_logits, levels), NumericError);
    }
}

TEST_CASE("close_set_prior shift invariance") {
    Rng rng(1);
    const auto levels = RatingLevelSet::default_set();
    std::vector<double> logits(14);
    for (double& v : logits) v = rng.uniform(-5.0, 5.0);
    std::vector<double> shifted = logits;
    for (double& v : shifted) v += 123.456;
    const auto a = close_set_prior(logits, levels);
    const auto b = close_set_prior(shifted, levels);
    for (std::size_t i = 0; i < a.probs.size(); ++i)
        CHECK(std::abs(a.probs[i] - b.probs[i]) < 1e-12);
    // non-shift monotone rescaling changes the distribution (and may change
    // everything except additive shifts); only shift invariance is asserted
    std::vector<double> scaled = logits;
    for (double& v : scaled) v *= 2.0;
    const auto c = close_set_prior(scaled, levels);
    const auto amax = static_cast<std::size_t>(
        std::max_element(a.probs.begin(), a.probs.end()) - a.probs.begin());
    const auto cmax = static_cast<std::size_t>(
        std::max_element(c.probs.begin(), c.probs.end()) - c.probs.begin());
    CHECK(amax == cmax);  // argmax preserved by any strictly increasing map
}

TEST_CASE("dark_channel_score: extremes, windows, range errors") {
    Tensor<double> white(Shape{1, 3, 6, 6}, 1.0);
    CHECK(dark_channel_score(white, 0, 3) == doctest::Approx(1.0));
    Tensor<double> black(Shape{1, 3, 6, 6}, 0.0);
    CHECK(dark_channel_score(black, 0, 3) == doctest::Approx(0.0));
    Tensor<double> gray(Shape{1, 3, 6, 6}, 0.5);
    CHECK(dark_channel_score(gray, 0, 7) == doctest::Approx(0.5));
    // min over channels: one dark channel drives the score to its value
    Tensor<double> mixed(Shape{1, 3, 4, 4}, 0.9);
    for (std::int64_t i = 0; i < 16; ++i) mixed[2 * 16 + i] = 0.2;
    CHECK(dark_channel_score(mixed, 0, 1) == doctest::Approx(0.2));
    // min filter spreads a dark pixel over the window
    Tensor<double> spot(Shape{1, 3, 5, 5}, 1.0);
    for (std::int64_t c = 0; c < 3; ++c) spot[c * 25 + 12] = 0.0;
    CHECK(dark_channel_score(spot, 0, 3) ==
          doctest::Approx(1.0 - 9.0 / 25.0));
    Tensor<double> out_of_range(Shape{1, 3, 2, 2}, 1.5);
    CHECK_THROWS_AS(dark_channel_score(out_of_range, 0, 3), ParamError);
    CHECK_THROWS_AS(dark_channel_score(white, 0, 4), ParamError);  // even window
}

TEST_CASE("density ramp logits: extremes concentrate on end levels") {
    const auto levels = RatingLevelSet::default_set();
    {
        Tensor<double> white(Shape{1, 3, 8, 8}, 1.0);
        const auto p = estimate_prior(white, levels);
        const auto amax =
            std::max_element(p.probs.begin(), p.probs.end()) - p.probs.begin();
        CHECK(amax == levels.size() - 1);  // densest level
    }
    {
        Tensor<double> black(Shape{1, 3, 8, 8}, 0.0);
        const auto p = estimate_prior(black, levels);
        const auto amax =
            std::max_element(p.probs.begin(), p.probs.end()) - p.probs.begin();
        CHECK(amax == 0);  // clearest level
    }
    {
        // d = 0.5: hand evaluation of the tent ramp at gain 8
        Tensor<double> gray(Shape{1, 3, 8, 8}, 0.5);
        const auto logits = dark_channel_estimator(gray, levels, 7, 8.0);
        const double pos = 0.5 * 13.0;  // 6.5
        for (std::int64_t i = 0; i < 14; ++i) {
            const double expect = 8.0 * std::max(0.0, 1.0 - std::abs(pos - i));
            CHECK(logits[static_cast<std::size_t>(i)] == doctest::Approx(expect));
        }
    }
    {
        // unmapped vocabulary positions keep the sentinel
        RatingLevelSet sparse;
        sparse.levels = {"a", "b"};
        sparse.token_index = {0, 3};
        sparse.vocab_size = 4;
        const auto logits = density_ramp_logits(0.0, sparse);
        CHECK(logits[1] == kUnmappedLogit);
        CHECK(logits[2] == kUnmappedLogit);
        CHECK(logits[0] == doctest::Approx(8.0));
    }
}

TEST_CASE("prior sums to one and validates") {
    Rng rng(2);
    const auto levels = RatingLevelSet::default_set();
    Tensor<double> img(Shape{1, 3, 9, 9});
    for (std::int64_t i = 0; i < img.numel(); ++i) img[i] = rng.uniform(0.0, 1.0);
    const auto p = estimate_prior(img, levels);
    CHECK(p.size() == 14);
    double sum = 0;
    for (double v : p.probs) sum += v;
    CHECK(std::abs(sum - 1.0) < 1e-9);
    DegradationPrior bad{{0.5, 0.6}};
    CHECK_THROWS_AS(bad.validate(), NumericError);
}

TEST_CASE("estimator is deterministic") {
    Rng rng(3);
    const auto levels = RatingLevelSet::default_set();
    Tensor<double> img(Shape{1, 3, 8, 8});
    for (std::int64_t i = 0; i < img.numel(); ++i) img[i] = rng.uniform(0.0, 1.0);
    const auto a = estimate_prior(img, levels);
    const auto b = estimate_prior(img, levels);
    for (std::size_t i = 0; i < a.probs.size(); ++i)
        CHECK(a.probs[i] == b.probs[i]);  // bitwise
}
