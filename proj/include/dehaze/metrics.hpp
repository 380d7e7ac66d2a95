// Evaluation metrics and the training objective.
//
// The Charbonnier objective is the per-element form averaged over elements,
// mean(sqrt(d^2 + eps^2)); the single-root-over-summed-error reading would
// collapse to RMSE and make eps meaningless at image scale, so the
// per-element form is used throughout and its floor is exactly eps.

#pragma once

#include <fstream>
#include <iomanip>

#include "dehaze/ops.hpp"
#include "dehaze/tensor.hpp"

namespace dehaze {

inline constexpr double kPsnrCap = 100.0;  // reported for zero MSE

// Differentiable Charbonnier loss: mean over elements of sqrt(d^2 + eps^2).
template <typename T>
Tensor<T> charbonnier_loss(Tape<T>* tape, Tensor<T> target, Tensor<T> output,
                           T eps = T(1e-3)) {
    detail::require_same_shape(target, output, "charbonnier");
    if (eps <= T(0)) throw ParamError("charbonnier: eps must be positive");
    const std::int64_t n = target.numel();
    // Accumulate hypot(d, eps) - eps and add eps back so the zero-error
    // floor is exactly eps, with no rounding from the mean.
    T acc = 0;
    for (std::int64_t i = 0; i < n; ++i) {
        const T d = target[i] - output[i];
        acc += std::hypot(d, eps) - eps;
    }
    Tensor<T> y = Tensor<T>::scalar(eps + acc / static_cast<T>(n));
    check_finite(y, "charbonnier");
    if (tape)
        tape->record([target, output, y, eps, n]() mutable {
            const T g = y.grad()[0] / static_cast<T>(n);
            auto& gt = target.grad();
            auto& go = output.grad();
            for (std::int64_t i = 0; i < n; ++i) {
                const T d = target[i] - output[i];
                const T dd = g * d / std::sqrt(d * d + eps * eps);
                gt[static_cast<std::size_t>(i)] += dd;
                go[static_cast<std::size_t>(i)] -= dd;
            }
        });
    return y;
}

template <typename T>
double charbonnier(const Tensor<T>& a, const Tensor<T>& b, double eps = 1e-3) {
    detail::require_same_shape(a, b, "charbonnier");
    if (eps <= 0) throw ParamError("charbonnier: eps must be positive");
    double acc = 0;
    const std::int64_t n = a.numel();
    for (std::int64_t i = 0; i < n; ++i) {
        const double d = static_cast<double>(a[i]) - static_cast<double>(b[i]);
        acc += std::hypot(d, eps) - eps;
    }
    return eps + acc / static_cast<double>(n);
}

template <typename T>
double mse(const Tensor<T>& a, const Tensor<T>& b) {
    detail::require_same_shape(a, b, "mse");
    double acc = 0;
    const std::int64_t n = a.numel();
    for (std::int64_t i = 0; i < n; ++i) {
        const double d = static_cast<double>(a[i]) - static_cast<double>(b[i]);
        acc += d * d;
    }
    return acc / static_cast<double>(n);
}

template <typename T>
double psnr(const Tensor<T>& a, const Tensor<T>& b, double peak = 1.0) {
    const double m = mse(a, b);
    if (m == 0.0) return kPsnrCap;
    return 10.0 * std::log10(peak * peak / m);
}

namespace detail {

inline std::vector<double> gaussian_kernel(int window, double sigma) {
    std::vector<double> k(static_cast<std::size_t>(window));
    const int r = window / 2;
    double sum = 0;
    for (int i = 0; i < window; ++i) {
        const double x = i - r;
        k[static_cast<std::size_t>(i)] = std::exp(-x * x / (2.0 * sigma * sigma));
        sum += k[static_cast<std::size_t>(i)];
    }
    for (double& v : k) v /= sum;
    return k;
}

// Channel-mean luma of batch item `b` as a dense H*W buffer.
template <typename T>
std::vector<double> luma(const Tensor<T>& img, std::int64_t b) {
    const std::int64_t C = img.dim(1), M = img.dim(2) * img.dim(3);
    std::vector<double> out(static_cast<std::size_t>(M), 0.0);
    const T* p = img.ptr() + b * C * M;
    for (std::int64_t c = 0; c < C; ++c)
        for (std::int64_t i = 0; i < M; ++i)
            out[static_cast<std::size_t>(i)] += static_cast<double>(p[c * M + i]);
    for (double& v : out) v /= static_cast<double>(C);
    return out;
}

// Separable Gaussian blur, valid region only: (H,W) -> (H-w+1, W-w+1).
inline std::vector<double> blur_valid(const std::vector<double>& img, std::int64_t H,
                                      std::int64_t W, const std::vector<double>& k) {
    const std::int64_t w = static_cast<std::int64_t>(k.size());
    const std::int64_t Wv = W - w + 1, Hv = H - w + 1;
    std::vector<double> rows(static_cast<std::size_t>(H * Wv));
    for (std::int64_t i = 0; i < H; ++i)
        for (std::int64_t j = 0; j < Wv; ++j) {
            double acc = 0;
            for (std::int64_t t = 0; t < w; ++t)
                acc += k[static_cast<std::size_t>(t)] *
                       img[static_cast<std::size_t>(i * W + j + t)];
            rows[static_cast<std::size_t>(i * Wv + j)] = acc;
        }
    std::vector<double> out(static_cast<std::size_t>(Hv * Wv));
    for (std::int64_t i = 0; i < Hv; ++i)
        for (std::int64_t j = 0; j < Wv; ++j) {
            double acc = 0;
            for (std::int64_t t = 0; t < w; ++t)
                acc += k[static_cast<std::size_t>(t)] *
                       rows[static_cast<std::size_t>((i + t) * Wv + j)];
            out[static_cast<std::size_t>(i * Wv + j)] = acc;
        }
    return out;
}

}  // namespace detail

// Gaussian-windowed SSIM on the channel-mean luma, valid windows only,
// stabilizers C1 = (0.01 peak)^2, C2 = (0.03 peak)^2, averaged over
// positions and batch items.
template <typename T>
double ssim(const Tensor<T>& a, const Tensor<T>& b, int window = 11,
            double sigma = 1.5, double peak = 1.0) {
    detail::require_same_shape(a, b, "ssim");
    if (a.rank() != 4) throw ShapeError("ssim: images must be rank 4");
    const std::int64_t B = a.dim(0), H = a.dim(2), W = a.dim(3);
    if (H < window || W < window)
        throw ParamError("ssim: image smaller than the " + std::to_string(window) +
                         "-pixel window");
    const auto k = detail::gaussian_kernel(window, sigma);
    const double c1 = (0.01 * peak) * (0.01 * peak);
    const double c2 = (0.03 * peak) * (0.03 * peak);
    double total = 0;
    for (std::int64_t bi = 0; bi < B; ++bi) {
        const auto x = detail::luma(a, bi);
        const auto y = detail::luma(b, bi);
        const std::int64_t n = H * W;
        std::vector<double> xx(static_cast<std::size_t>(n)), yy(xx), xy(xx);
        for (std::int64_t i = 0; i < n; ++i) {
            xx[static_cast<std::size_t>(i)] = x[static_cast<std::size_t>(i)] *
                                              x[static_cast<std::size_t>(i)];
            yy[static_cast<std::size_t>(i)] = y[static_cast<std::size_t>(i)] *
                                              y[static_cast<std::size_t>(i)];
            xy[static_cast<std::size_t>(i)] = x[static_cast<std::size_t>(i)] *
                                              y[static_cast<std::size_t>(i)];
        }
        const auto mx = detail::blur_valid(x, H, W, k);
        const auto my = detail::blur_valid(y, H, W, k);
        const auto mxx = detail::blur_valid(xx, H, W, k);
        const auto myy = detail::blur_valid(yy, H, W, k);
        const auto mxy = detail::blur_valid(xy, H, W, k);
        double acc = 0;
        for (std::size_t i = 0; i < mx.size(); ++i) {
            const double vx = mxx[i] - mx[i] * mx[i];
            const double vy = myy[i] - my[i] * my[i];
            const double cov = mxy[i] - mx[i] * my[i];
            acc += ((2.0 * mx[i] * my[i] + c1) * (2.0 * cov + c2)) /
                   ((mx[i] * mx[i] + my[i] * my[i] + c1) * (vx + vy + c2));
        }
        total += acc / static_cast<double>(mx.size());
    }
    return total / static_cast<double>(B);
}

// Per-image metric rows plus dataset means; written as line-delimited
// `image_id, psnr, ssim, charbonnier` with a trailing `mean` row.
struct MetricReport {
    struct Row {
        std::string image_id;
        double psnr = 0;
        double ssim = 0;
        double charbonnier = 0;
    };
    std::vector<Row> rows;

    double mean_psnr() const { return mean_of(&Row::psnr); }
    double mean_ssim() const { return mean_of(&Row::ssim); }
    double mean_charbonnier() const { return mean_of(&Row::charbonnier); }

    void write(std::ostream& os) const {
        os << "# image_id, psnr, ssim, charbonnier\n";
        os << std::setprecision(9);
        for (const auto& r : rows)
            os << r.image_id << ", " << r.psnr << ", " << r.ssim << ", "
               << r.charbonnier << "\n";
        os << "mean, " << mean_psnr() << ", " << mean_ssim() << ", "
           << mean_charbonnier() << "\n";
    }

    void write_file(const std::string& path) const {
        std::ofstream out(path);
        if (!out) throw ParamError("MetricReport: cannot write " + path);
        write(out);
    }

private:
    double mean_of(double Row::* field) const {
        if (rows.empty()) return 0;
        double acc = 0;
        for (const auto& r : rows) acc += r.*field;
        return acc / static_cast<double>(rows.size());
    }
};

}  // namespace dehaze
