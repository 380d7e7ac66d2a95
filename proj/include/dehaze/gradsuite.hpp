// Named finite-difference gradient checks for every differentiable
// primitive plus the desk-scale end-to-end model. Shared by the command-line
// `grad-check` subcommand and the test suites.

#pragma once

#include "dehaze/gradcheck.hpp"
#include "dehaze/metrics.hpp"
#include "dehaze/model.hpp"

namespace dehaze {

struct GradCheckResult {
    std::string name;
    double max_rel = 0;
    double tolerance = 0;
    bool ok() const { return max_rel < tolerance; }
};

namespace detail {

inline Tensor<double> random_tensor(Shape shape, Rng& rng, double lo = -1.0,
                                    double hi = 1.0) {
    Tensor<double> t(std::move(shape));
    for (std::int64_t i = 0; i < t.numel(); ++i) t[i] = rng.uniform(lo, hi);
    t.set_requires_grad(true);
    return t;
}

}  // namespace detail

// Gradient checks for every primitive, each reduced through a fixed random
// linear functional so the loss is scalar.
inline std::vector<GradCheckResult> primitive_grad_suite(std::uint64_t seed = 7) {
    Rng rng(seed);
    std::vector<GradCheckResult> results;
    const double tol = 1e-6;

    // Fixed reduction weights keep the functional independent of parameters.
    auto reduce = [](Tape<double>& tape, Tensor<double> y,
                     Tensor<double> w) {
        return sum(&tape, mul(&tape, y, w));
    };
    auto weights = [&rng](const Shape& shape) {
        Tensor<double> w(shape);
        for (std::int64_t i = 0; i < w.numel(); ++i) w[i] = rng.uniform(-1.0, 1.0);
        return w;
    };
    auto run = [&results, tol](const std::string& name,
                               const std::function<Tensor<double>(Tape<double>&)>& f,
                               std::vector<Tensor<double>> params) {
        results.push_back({name, grad_check(f, std::move(params)), tol});
    };

    {
        auto a = detail::random_tensor({2, 3}, rng);
        auto b = detail::random_tensor({2, 3}, rng);
        auto w = weights({2, 3});
        run("add", [=](Tape<double>& t) mutable {
            return reduce(t, add(&t, a, b), w);
        }, {a, b});
        run("sub", [=](Tape<double>& t) mutable {
            return reduce(t, sub(&t, a, b), w);
        }, {a, b});
        run("mul", [=](Tape<double>& t) mutable {
            return reduce(t, mul(&t, a, b), w);
        }, {a, b});
        run("scale", [=](Tape<double>& t) mutable {
            return reduce(t, scale(&t, a, 1.7), w);
        }, {a});
        auto s = Tensor<double>::scalar(0.8, true);
        run("scale_by_scalar_param", [=](Tape<double>& t) mutable {
            return reduce(t, scale_by_scalar_param(&t, a, s), w);
        }, {a, s});
        run("exp", [=](Tape<double>& t) mutable {
            return reduce(t, exp_op(&t, a), w);
        }, {a});
        run("silu", [=](Tape<double>& t) mutable {
            return reduce(t, silu(&t, a), w);
        }, {a});
        run("sigmoid", [=](Tape<double>& t) mutable {
            return reduce(t, sigmoid(&t, a), w);
        }, {a});
        run("softplus", [=](Tape<double>& t) mutable {
            return reduce(t, softplus(&t, a), w);
        }, {a});
        run("mean", [=](Tape<double>& t) mutable { return mean(&t, a); }, {a});
    }
    {
        // relu/clamp01 away from their kinks, where the derivative exists.
        Tensor<double> a({2, 3}, {0.31, -0.42, 0.77, -0.15, 0.6, -0.9}, true);
        auto w = weights({2, 3});
        run("relu", [=](Tape<double>& t) mutable {
            return reduce(t, relu(&t, a), w);
        }, {a});
        run("clamp01", [=](Tape<double>& t) mutable {
            return reduce(t, clamp01(&t, a), w);
        }, {a});
    }
    {
        auto x = detail::random_tensor({2, 3, 4}, rng);
        auto W = detail::random_tensor({5, 3}, rng);
        auto b = detail::random_tensor({5}, rng);
        auto w = weights({2, 5, 4});
        run("linear", [=](Tape<double>& t) mutable {
            return reduce(t, linear(&t, x, W, b), w);
        }, {x, W, b});
    }
    {
        auto x = detail::random_tensor({2, 3, 2, 2}, rng);
        auto g = detail::random_tensor({3}, rng, 0.5, 1.5);
        auto b = detail::random_tensor({3}, rng);
        auto w = weights({2, 3, 2, 2});
        run("layer_norm", [=](Tape<double>& t) mutable {
            return reduce(t, layer_norm(&t, x, g, b, 1e-5), w);
        }, {x, g, b});
        run("softmax", [=](Tape<double>& t) mutable {
            return reduce(t, softmax(&t, x, 1), w);
        }, {x});
    }
    {
        auto x = detail::random_tensor({1, 2, 5, 5}, rng);
        auto W = detail::random_tensor({3, 2, 3, 3}, rng);
        auto b = detail::random_tensor({3}, rng);
        auto w1 = weights({1, 3, 5, 5});
        run("conv2d_s1", [=](Tape<double>& t) mutable {
            return reduce(t, conv2d(&t, x, W, b, 1, 1), w1);
        }, {x, W, b});
        auto w2 = weights({1, 3, 3, 3});
        run("conv2d_s2", [=](Tape<double>& t) mutable {
            return reduce(t, conv2d(&t, x, W, b, 2, 1), w2);
        }, {x, W, b});
        auto Wd = detail::random_tensor({2, 1, 3, 3}, rng);
        auto wd = weights({1, 2, 5, 5});
        run("depthwise_conv2d", [=](Tape<double>& t) mutable {
            return reduce(t, depthwise_conv2d(&t, x, Wd, 1), wd);
        }, {x, Wd});
        auto wg = weights({1, 2});
        run("global_avg_pool", [=](Tape<double>& t) mutable {
            return reduce(t, global_avg_pool(&t, x), wg);
        }, {x});
        auto s = detail::random_tensor({1, 2}, rng, 0.2, 1.0);
        auto ws = weights({1, 2, 5, 5});
        run("scale_channels", [=](Tape<double>& t) mutable {
            return reduce(t, scale_channels(&t, x, s), ws);
        }, {x, s});
        auto wu = weights({1, 2, 10, 10});
        run("upsample_nearest2x", [=](Tape<double>& t) mutable {
            return reduce(t, upsample_nearest2x(&t, x), wu);
        }, {x});
        auto wp = weights({1, 2, 8, 7});
        run("pad_reflect", [=](Tape<double>& t) mutable {
            return reduce(t, pad_reflect(&t, x, 1, 2, 0, 2), wp);
        }, {x});
        auto wc = weights({1, 2, 3, 2});
        run("crop_spatial", [=](Tape<double>& t) mutable {
            return reduce(t, crop_spatial(&t, x, 1, 2, 3, 2), wc);
        }, {x});
        for (ScanDirection dir : kAllScanDirections) {
            auto wpm = weights({1, 2, 25});
            const int di = static_cast<int>(dir);
            run("permute_spatial_dir" + std::to_string(di),
                [=](Tape<double>& t) mutable {
                    return reduce(t, permute_spatial(&t, x, scan_order(dir, 5, 5)), wpm);
                }, {x});
        }
    }
    {
        // Fused scan against finite differences.
        const std::int64_t B = 1, C = 2, S = 3, L = 4;
        auto xs = detail::random_tensor({B, C, L}, rng);
        auto delta = detail::random_tensor({B, C, L}, rng, 0.05, 0.5);
        auto A = detail::random_tensor({C, S}, rng, -1.5, -0.1);
        auto Bt = detail::random_tensor({B, S, L}, rng);
        auto Ct = detail::random_tensor({B, S, L}, rng);
        auto D = detail::random_tensor({C}, rng);
        auto w = weights({B, C, L});
        run("selective_scan", [=](Tape<double>& t) mutable {
            return reduce(t, selective_scan(&t, xs, delta, A, Bt, Ct, D), w);
        }, {xs, delta, A, Bt, Ct, D});
    }
    {
        auto a = detail::random_tensor({1, 3, 4, 4}, rng, 0.0, 1.0);
        auto b = detail::random_tensor({1, 3, 4, 4}, rng, 0.0, 1.0);
        run("charbonnier", [=](Tape<double>& t) mutable {
            return charbonnier_loss(&t, a, b);
        }, {a, b});
    }
    return results;
}

// End-to-end check: desk-scale model, 8x8 input, loss gradient w.r.t. every
// parameter including the residual scale.
inline GradCheckResult model_grad_check(std::uint64_t seed = 11) {
    auto net = build<double>(ModelConfig::tiny(), seed);
    Rng rng(seed + 1);
    auto hazy = detail::random_tensor({1, 3, 8, 8}, rng, 0.05, 0.95);
    hazy.set_requires_grad(false);
    auto clean = detail::random_tensor({1, 3, 8, 8}, rng, 0.05, 0.95);
    clean.set_requires_grad(false);
    DegradationPrior prior{{0.75, 0.25}};
    auto params = net.parameters();
    // The composed model has many near-zero gradient elements; floor the
    // denominator just above the FD noise so they are compared absolutely.
    const double rel = grad_check(
        [&net, hazy, clean, prior](Tape<double>& t) mutable {
            Tensor<double> out = forward(&t, hazy, prior, net);
            return charbonnier_loss(&t, clean, out);
        },
        params, 1e-5, 1e-7);
    return {"tiny_model_end_to_end", rel, 1e-3};
}

}  // namespace dehaze
