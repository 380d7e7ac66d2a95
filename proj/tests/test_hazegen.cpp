// Haze synthesis: scattering-model identities, intensity series monotonicity,
// quantile binning, depth maps, dataset generation, and the manifest format.

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <filesystem>
#include <set>

#include "dehaze/hazegen.hpp"
#include "dehaze/metrics.hpp"
#include "dehaze/prior.hpp"

using namespace dehaze;

namespace {

Tensor<double> rand_image(std::int64_t h, std::int64_t w, Rng& rng) {
    Tensor<double> t(Shape{1, 3, h, w});
    for (std::int64_t i = 0; i < t.numel(); ++i) t[i] = rng.uniform(0.0, 1.0);
    return t;
}

Tensor<double> rand_depth(std::int64_t h, std::int64_t w, Rng& rng) {
    Tensor<double> t(Shape{1, 1, h, w});
    for (std::int64_t i = 0; i < t.numel(); ++i) t[i] = rng.uniform(0.0, 1.0);
    return t;
}

}  // namespace

TEST_CASE("synthesis identities: no scattering or no depth reproduce the input") {
    Rng rng(1);
    auto clean = rand_image(6, 5, rng);
    auto depth = rand_depth(6, 5, rng);
    {
        HazeScene<double> s{clean, depth, 0.0, {0.9, 0.9, 0.9}};
        auto hazy = synthesize(s);
        for (std::int64_t i = 0; i < hazy.numel(); ++i)
            CHECK(hazy[i] == clean[i]);  // bitwise
    }
    {
        Tensor<double> flat(Shape{1, 1, 6, 5}, 0.0);
        HazeScene<double> s{clean, flat, 3.0, {0.8, 0.8, 0.8}};
        auto hazy = synthesize(s);
        for (std::int64_t i = 0; i < hazy.numel(); ++i)
            CHECK(hazy[i] == clean[i]);  // bitwise
    }
}

TEST_CASE("synthesis hand case: mid-gray scene at unit depth, beta = ln 2") {
    Tensor<double> clean(Shape{1, 3, 4, 4}, 0.5);
    Tensor<double> depth(Shape{1, 1, 4, 4}, 1.0);
    HazeScene<double> s{clean, depth, std::log(2.0), {1.0, 1.0, 1.0}};
    auto hazy = synthesize(s);
    // T = 1/2, so I = 0.5*0.5 + 1.0*0.5 = 0.75.
    for (std::int64_t i = 0; i < hazy.numel(); ++i)
        CHECK(std::abs(hazy[i] - 0.75) < 1e-12);
}

TEST_CASE("synthesis stays between the clean value and the airlight") {
    Rng rng(2);
    for (int trial = 0; trial < 20; ++trial) {
        auto clean = rand_image(5, 7, rng);
        auto depth = rand_depth(5, 7, rng);
        const double a = rng.uniform(0.0, 1.0);
        const double beta = rng.uniform(0.0, 5.0);
        HazeScene<double> s{clean, depth, beta, {a, a, a}};
        auto hazy = synthesize(s);
        const std::int64_t M = 5 * 7;
        for (std::int64_t c = 0; c < 3; ++c)
            for (std::int64_t i = 0; i < M; ++i) {
                const double j = clean[c * M + i];
                CHECK(hazy[c * M + i] >= std::min(j, a) - 1e-12);
                CHECK(hazy[c * M + i] <= std::max(j, a) + 1e-12);
            }
    }
}

TEST_CASE("scene validation rejects out-of-range inputs") {
    Rng rng(3);
    auto clean = rand_image(4, 4, rng);
    auto depth = rand_depth(4, 4, rng);
    {
        HazeScene<double> s{clean, depth, -0.5, {0.9, 0.9, 0.9}};
        CHECK_THROWS_AS(synthesize(s), ParamError);
    }
    {
        auto neg_depth = depth;
        Tensor<double> nd(depth.shape());
        for (std::int64_t i = 0; i < nd.numel(); ++i) nd[i] = depth[i];
        nd[3] = -0.1;
        HazeScene<double> s{clean, nd, 1.0, {0.9, 0.9, 0.9}};
        CHECK_THROWS_AS(synthesize(s), ParamError);
    }
    {
        HazeScene<double> s{clean, depth, 1.0, {1.2, 0.9, 0.9}};
        CHECK_THROWS_AS(synthesize(s), ParamError);
    }
    {
        HazeScene<double> s{clean, rand_depth(3, 3, rng), 1.0, {0.9, 0.9, 0.9}};
        CHECK_THROWS_AS(synthesize(s), ShapeError);
    }
}

TEST_CASE("depth maps: ramp and radial boundaries, bad range rejected") {
    auto ramp = depth_map<double>(DepthKind::LinearRamp, 8, 6, 0.0, 1.0);
    for (std::int64_t j = 0; j < 6; ++j) {
        CHECK(ramp[j] == 0.0);           // top row at d_min
        CHECK(ramp[7 * 6 + j] == 1.0);   // bottom row at d_max
    }
    auto radial = depth_map<double>(DepthKind::Radial, 9, 9, 0.25, 0.75);
    CHECK(radial[4 * 9 + 4] == doctest::Approx(0.25));  // center at d_min
    CHECK(radial[0] > radial[4 * 9 + 4]);               // corners deeper
    CHECK_THROWS_AS(depth_map<double>(DepthKind::LinearRamp, 4, 4, 1.0, 0.5),
                    ParamError);
}

TEST_CASE("default beta grid is log-spaced and spans light to dense") {
    const auto betas = default_beta_grid();
    REQUIRE(betas.size() == 8);
    CHECK(betas.front() == doctest::Approx(0.105));
    CHECK(betas.back() == doctest::Approx(6.6));
    // log-spacing: constant ratio between consecutive entries
    const double ratio = betas[1] / betas[0];
    for (std::size_t i = 2; i < betas.size(); ++i)
        CHECK(betas[i] / betas[i - 1] == doctest::Approx(ratio).epsilon(1e-9));
    // mean transmission over the unit-range linear ramp spans ~[0.15, 0.95]
    auto depth = depth_map<double>(DepthKind::LinearRamp, 64, 64, 0.0, 1.0);
    CHECK(mean_transmission(depth, betas.front()) > 0.9);
    CHECK(mean_transmission(depth, betas.back()) < 0.2);
}

TEST_CASE("intensity series: monotone transmission, PSNR, and density score") {
    Rng rng(4);
    const auto betas = default_beta_grid();
    for (int scene = 0; scene < 5; ++scene) {
        auto clean = procedural_scene<double>(32, 32, rng.derive(
            static_cast<std::uint64_t>(scene)));
        auto depth = depth_map<double>(DepthKind::LinearRamp, 32, 32, 0.0, 1.0);
        const std::array<double, 3> airlight{0.9, 0.9, 0.9};
        auto series = intensity_series(clean, depth, airlight, betas);
        REQUIRE(series.size() == betas.size());
        double prev_t = 2.0, prev_psnr = 1e9, prev_score = -1.0;
        for (std::size_t i = 0; i < series.size(); ++i) {
            const double t = mean_transmission(depth, betas[i]);
            CHECK(t < prev_t);
            const double p = psnr(series[i], clean);
            CHECK(p < prev_psnr);
            const double score = dark_channel_score(series[i], 0, 7);
            CHECK(score >= prev_score);
            prev_t = t;
            prev_psnr = p;
            prev_score = score;
        }
    }
}

TEST_CASE("intensity series rejects non-increasing betas") {
    Rng rng(5);
    auto clean = rand_image(8, 8, rng);
    auto depth = rand_depth(8, 8, rng);
    CHECK_THROWS_AS(
        intensity_series<double>(clean, depth, {0.9, 0.9, 0.9}, {0.5, 0.5}),
        ParamError);
    CHECK_THROWS_AS(
        intensity_series<double>(clean, depth, {0.9, 0.9, 0.9}, {-0.1, 0.5}),
        ParamError);
}

TEST_CASE("quantile binning: 5040 scores split 922/3196/922 within one") {
    Rng rng(6);
    std::vector<double> scores(5040);
    for (double& s : scores) s = rng.uniform(0.0, 1.0);
    const auto bins = bin_by_intensity(scores, 0.183, 0.817);
    std::int64_t light = 0, medium = 0, dense = 0;
    for (auto b : bins) {
        if (b == IntensityBin::Light) ++light;
        if (b == IntensityBin::Medium) ++medium;
        if (b == IntensityBin::Dense) ++dense;
    }
    CHECK(std::abs(light - 922) <= 1);
    CHECK(std::abs(medium - 3196) <= 1);
    CHECK(std::abs(dense - 922) <= 1);
    // bins follow score rank: every light score <= every medium <= every dense
    double max_light = -1, min_dense = 2, max_medium = -1, min_medium = 2;
    for (std::size_t i = 0; i < scores.size(); ++i) {
        if (bins[i] == IntensityBin::Light) max_light = std::max(max_light, scores[i]);
        if (bins[i] == IntensityBin::Medium) {
            max_medium = std::max(max_medium, scores[i]);
            min_medium = std::min(min_medium, scores[i]);
        }
        if (bins[i] == IntensityBin::Dense) min_dense = std::min(min_dense, scores[i]);
    }
    CHECK(max_light <= min_medium);
    CHECK(max_medium <= min_dense);
    CHECK_THROWS_AS(bin_by_intensity(scores, 0.9, 0.1), ParamError);
}

TEST_CASE("manifest roundtrip and error-line continuation") {
    const std::string path = "/tmp/manifest_test.txt";
    Manifest m;
    m.entries.push_back({"scene_0", "a/clean.png", "a/hazy_0.png", 0.105,
                         IntensityBin::Light, "train"});
    m.entries.push_back({"scene_1", "b/clean.png", "b/hazy_7.png", 6.6,
                         IntensityBin::Dense, "test"});
    m.errors.push_back("c/broken.png: cannot decode");
    m.save(path);
    const auto got = Manifest::load(path);
    REQUIRE(got.entries.size() == 2);
    CHECK(got.entries[0].scene_id == "scene_0");
    CHECK(got.entries[0].beta == doctest::Approx(0.105));
    CHECK(got.entries[0].bin == IntensityBin::Light);
    CHECK(got.entries[1].split == "test");
    REQUIRE(got.errors.size() == 1);
    CHECK(got.errors[0] == "c/broken.png: cannot decode");
    std::remove(path.c_str());
}

TEST_CASE("dataset generation: counts, scene-level split, determinism") {
    namespace fs = std::filesystem;
    const std::string out = "/tmp/hazegen_ds_test";
    fs::remove_all(out);
    DatasetConfig cfg;
    cfg.out_dir = out;
    cfg.scenes = 5;
    cfg.size = 16;
    cfg.seed = 3;
    const auto m = make_dataset<float>(cfg);
    CHECK(m.entries.size() == 5 * 8);
    // every scene is entirely train or entirely test
    std::map<std::string, std::set<std::string>> splits;
    for (const auto& e : m.entries) splits[e.scene_id].insert(e.split);
    std::int64_t train_scenes = 0;
    for (auto& [id, s] : splits) {
        CHECK(s.size() == 1);
        if (*s.begin() == "train") ++train_scenes;
    }
    CHECK(train_scenes == 4);  // floor(0.8 * 5)
    // all referenced files exist
    for (const auto& e : m.entries) {
        CHECK(fs::exists(e.clean_path));
        CHECK(fs::exists(e.hazy_path));
    }
    // manifest file written alongside and loadable
    const auto loaded = Manifest::load((fs::path(out) / "manifest.txt").string());
    CHECK(loaded.entries.size() == m.entries.size());
    // regeneration with the same seed gives an identical manifest
    const std::string out2 = "/tmp/hazegen_ds_test2";
    fs::remove_all(out2);
    DatasetConfig cfg2 = cfg;
    cfg2.out_dir = out2;
    const auto m2 = make_dataset<float>(cfg2);
    REQUIRE(m2.entries.size() == m.entries.size());
    for (std::size_t i = 0; i < m.entries.size(); ++i) {
        CHECK(m.entries[i].scene_id == m2.entries[i].scene_id);
        CHECK(m.entries[i].beta == m2.entries[i].beta);
        CHECK(m.entries[i].bin == m2.entries[i].bin);
        CHECK(m.entries[i].split == m2.entries[i].split);
    }
    fs::remove_all(out);
    fs::remove_all(out2);
}

TEST_CASE("procedural scenes are deterministic and in range") {
    Rng a(7), b(7);
    auto s1 = procedural_scene<double>(24, 24, a);
    auto s2 = procedural_scene<double>(24, 24, b);
    for (std::int64_t i = 0; i < s1.numel(); ++i) {
        CHECK(s1[i] == s2[i]);
        CHECK(s1[i] >= 0.0);
        CHECK(s1[i] <= 1.0);
    }
}
