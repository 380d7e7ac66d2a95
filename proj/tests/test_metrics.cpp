// Metrics: Charbonnier anchors and gradients, PSNR anchors, SSIM against an
// independent direct-loop reference, and the report writer format.

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <sstream>

#include "dehaze/gradcheck.hpp"
#include "dehaze/metrics.hpp"
#include "dehaze/rng.hpp"

using namespace dehaze;

namespace {

Tensor<double> rand_image(std::int64_t h, std::int64_t w, Rng& rng) {
    Tensor<double> t(Shape{1, 3, h, w});
    for (std::int64_t i = 0; i < t.numel(); ++i) t[i] = rng.uniform(0.0, 1.0);
    return t;
}

// Independent SSIM reference: direct nested loops over every valid window,
// no separable shortcuts, single-channel luma (channel mean).
double ssim_reference(const Tensor<double>& a, const Tensor<double>& b, int window,
                      double sigma) {
    const std::int64_t H = a.dim(2), W = a.dim(3), M = H * W;
    auto luma = [&](const Tensor<double>& t, std::int64_t i, std::int64_t j) {
        return (t[0 * M + i * W + j] + t[1 * M + i * W + j] + t[2 * M + i * W + j]) /
               3.0;
    };
    const int r = window / 2;
    std::vector<double> k(static_cast<std::size_t>(window * window));
    double ksum = 0;
    for (int u = 0; u < window; ++u)
        for (int v = 0; v < window; ++v) {
            const double du = u - r, dv = v - r;
            const double val = std::exp(-(du * du + dv * dv) / (2 * sigma * sigma));
            k[static_cast<std::size_t>(u * window + v)] = val;
            ksum += val;
        }
    for (double& v : k) v /= ksum;
    const double c1 = 0.01 * 0.01, c2 = 0.03 * 0.03;
    double acc = 0;
    std::int64_t count = 0;
    for (std::int64_t i = 0; i + window <= H; ++i)
        for (std::int64_t j = 0; j + window <= W; ++j) {
            double mx = 0, my = 0, mxx = 0, myy = 0, mxy = 0;
            for (int u = 0; u < window; ++u)
                for (int v = 0; v < window; ++v) {
                    const double w_ = k[static_cast<std::size_t>(u * window + v)];
                    const double x = luma(a, i + u, j + v);
                    const double y = luma(b, i + u, j + v);
                    mx += w_ * x;
                    my += w_ * y;
                    mxx += w_ * x * x;
                    myy += w_ * y * y;
                    mxy += w_ * x * y;
                }
            const double vx = mxx - mx * mx, vy = myy - my * my, cov = mxy - mx * my;
            acc += ((2 * mx * my + c1) * (2 * cov + c2)) /
                   ((mx * mx + my * my + c1) * (vx + vy + c2));
            ++count;
        }
    return acc / static_cast<double>(count);
}

}  // namespace

TEST_CASE("charbonnier anchors") {
    Rng rng(1);
    auto x = rand_image(6, 6, rng);
    CHECK(charbonnier(x, x) == 1e-3);  // exactly the stabilizer at zero error
    // constant offset d: value is sqrt(d^2 + eps^2) everywhere
    Tensor<double> y(x.shape());
    for (std::int64_t i = 0; i < x.numel(); ++i) y[i] = x[i] + 0.25;
    CHECK(charbonnier(x, y) ==
          doctest::Approx(std::sqrt(0.25 * 0.25 + 1e-6)).epsilon(1e-12));
    CHECK_THROWS_AS(charbonnier(x, y, 0.0), ParamError);
    Tensor<double> small(Shape{1, 3, 2, 2});
    CHECK_THROWS_AS(charbonnier(x, small), ShapeError);
}

TEST_CASE("charbonnier loss tensor matches the scalar metric and its gradient") {
    Rng rng(2);
    auto a = rand_image(4, 5, rng);
    auto b = rand_image(4, 5, rng);
    auto loss = charbonnier_loss<double>(nullptr, a, b);
    CHECK(loss[0] == doctest::Approx(charbonnier(a, b)).epsilon(1e-14));
    a.set_requires_grad(true);
    b.set_requires_grad(true);
    const double err = grad_check(
        [a, b](Tape<double>& t) mutable { return charbonnier_loss(&t, a, b); },
        {a, b});
    CHECK(err < 1e-6);
}

TEST_CASE("psnr anchors") {
    Tensor<double> zero(Shape{1, 3, 10, 10}, 0.0);
    Tensor<double> off(Shape{1, 3, 10, 10}, 0.1);  // MSE = 0.01
    CHECK(psnr(zero, off) == doctest::Approx(20.0).epsilon(1e-12));
    CHECK(psnr(zero, zero) == 100.0);  // capped for identical images
    Tensor<double> half(Shape{1, 3, 10, 10}, 0.5);
    CHECK(psnr(zero, half) == doctest::Approx(10.0 * std::log10(1.0 / 0.25)));
    // peak scaling: doubling the peak adds ~6.02 dB
    CHECK(psnr(zero, off, 2.0) == doctest::Approx(20.0 + 20.0 * std::log10(2.0)));
}

TEST_CASE("ssim: identity, symmetry bounds, and window validation") {
    Rng rng(3);
    auto x = rand_image(16, 16, rng);
    CHECK(std::abs(ssim(x, x) - 1.0) < 1e-9);
    auto y = rand_image(16, 16, rng);
    const double s = ssim(x, y);
    CHECK(s < 1.0);
    CHECK(s > -1.0);
    CHECK(ssim(x, y) == doctest::Approx(ssim(y, x)).epsilon(1e-12));
    Tensor<double> tiny(Shape{1, 3, 8, 8}, 0.5);
    CHECK_THROWS_AS(ssim(tiny, tiny), ParamError);  // smaller than the window
}

TEST_CASE("ssim matches an independent reference on 20 random pairs") {
    Rng rng(4);
    for (int trial = 0; trial < 20; ++trial) {
        auto a = rand_image(14, 15, rng);
        Tensor<double> b(a.shape());
        // correlated pair: same image plus noise, so SSIM is nontrivial
        for (std::int64_t i = 0; i < a.numel(); ++i)
            b[i] = std::clamp(a[i] + rng.uniform(-0.2, 0.2), 0.0, 1.0);
        const double got = ssim(a, b);
        const double want = ssim_reference(a, b, 11, 1.5);
        CHECK(std::abs(got - want) < 1e-6);
    }
}

TEST_CASE("metric report: format and means") {
    MetricReport rep;
    rep.rows.push_back({"img_a", 20.0, 0.8, 0.05});
    rep.rows.push_back({"img_b", 30.0, 0.9, 0.01});
    CHECK(rep.mean_psnr() == doctest::Approx(25.0));
    CHECK(rep.mean_ssim() == doctest::Approx(0.85));
    CHECK(rep.mean_charbonnier() == doctest::Approx(0.03));
    std::ostringstream os;
    rep.write(os);
    const std::string text = os.str();
    CHECK(text.find("# image_id, psnr, ssim, charbonnier\n") == 0);
    CHECK(text.find("img_a, 20, 0.8, 0.05\n") != std::string::npos);
    CHECK(text.find("mean, 25, 0.85, 0.03\n") != std::string::npos);
}
