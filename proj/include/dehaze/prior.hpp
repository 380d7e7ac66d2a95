// Image degradation prior: a close-set softmax over the logits at a fixed
// set of rating-level token positions. The built-in intensity estimator is a
// deterministic dark-channel density proxy standing behind the same
// interface a learned quality model would use.

#pragma once

#include <fstream>
#include <limits>
#include <unordered_set>

#include "dehaze/tensor.hpp"

namespace dehaze {

// Sentinel for token positions outside the rating set.
inline constexpr double kUnmappedLogit = -1e30;

// Ordered rating levels (clearest first, densest last) plus the mapping G
// from each level to a token index in [0, vocab_size).
struct RatingLevelSet {
    std::vector<std::string> levels;
    std::vector<std::int64_t> token_index;
    std::int64_t vocab_size = 0;

    std::int64_t size() const { return static_cast<std::int64_t>(levels.size()); }

    void validate() const {
        if (levels.empty()) throw ParamError("RatingLevelSet: empty level set");
        if (levels.size() != token_index.size())
            throw ParamError("RatingLevelSet: levels/token_index length mismatch");
        std::unordered_set<std::string> names(levels.begin(), levels.end());
        if (names.size() != levels.size())
            throw ParamError("RatingLevelSet: duplicate level names");
        for (auto j : token_index)
            if (j < 0 || j >= vocab_size)
                throw ParamError("RatingLevelSet: token index " + std::to_string(j) +
                                 " outside vocabulary of size " +
                                 std::to_string(vocab_size));
    }

    // Default 14-level set: the five ITU quality levels, the three haze
    // descriptors, and six graded haze terms, ordered clearest -> densest.
    // Token mapping is the identity (vocab collapses onto the levels).
    static RatingLevelSet default_set() {
        RatingLevelSet s;
        s.levels = {"clear",      "excellent", "good",       "fair",
                    "mist",       "thin_haze", "poor",       "moderate_haze",
                    "bad",        "heavy_haze", "fog",       "dense_fog",
                    "thick_fog",  "opaque"};
        s.vocab_size = static_cast<std::int64_t>(s.levels.size());
        for (std::int64_t i = 0; i < s.vocab_size; ++i) s.token_index.push_back(i);
        s.validate();
        return s;
    }

    // Generic graded set of n levels (used when the expert count differs
    // from the default 14).
    static RatingLevelSet graded(std::int64_t n) {
        if (n < 1) throw ParamError("RatingLevelSet: need at least one level");
        RatingLevelSet s;
        for (std::int64_t i = 0; i < n; ++i) {
            s.levels.push_back("level_" + std::to_string(i));
            s.token_index.push_back(i);
        }
        s.vocab_size = n;
        s.validate();
        return s;
    }

    // Plain-text format: one `level_name = token_index` per line (0-based
    // indices), '#' comments allowed. Levels appear clearest first.
    static RatingLevelSet load(const std::string& path) {
        std::ifstream in(path);
        if (!in) throw ParamError("RatingLevelSet: cannot open " + path);
        RatingLevelSet s;
        std::string line;
        std::int64_t max_index = -1;
        while (std::getline(in, line)) {
            const auto hash = line.find('#');
            if (hash != std::string::npos) line.erase(hash);
            const auto eq = line.find('=');
            if (eq == std::string::npos) continue;
            auto trim = [](std::string v) {
                const auto a = v.find_first_not_of(" \t\r");
                const auto b = v.find_last_not_of(" \t\r");
                return a == std::string::npos ? std::string() : v.substr(a, b - a + 1);
            };
            const std::string name = trim(line.substr(0, eq));
            const std::string value = trim(line.substr(eq + 1));
            if (name.empty() || value.empty())
                throw ParamError("RatingLevelSet: malformed line '" + line + "'");
            const std::int64_t idx = std::stoll(value);
            s.levels.push_back(name);
            s.token_index.push_back(idx);
            max_index = std::max(max_index, idx);
        }
        s.vocab_size = max_index + 1;
        s.validate();
        return s;
    }
};

// Probability vector over the rating levels; sums to one.
struct DegradationPrior {
    std::vector<double> probs;

    std::int64_t size() const { return static_cast<std::int64_t>(probs.size()); }

    void validate() const {
        double sum = 0;
        for (double p : probs) {
            if (!(p >= 0)) throw NumericError("DegradationPrior: negative probability");
            sum += p;
        }
        if (std::abs(sum - 1.0) > 1e-9)
            throw NumericError("DegradationPrior: probabilities sum to " +
                               std::to_string(sum));
    }
};

// Softmax over the logits at the mapped token positions only.
inline DegradationPrior close_set_prior(const std::vector<double>& logits,
                                        const RatingLevelSet& levels) {
    levels.validate();
    const std::int64_t L = static_cast<std::int64_t>(logits.size());
    std::vector<double> mapped;
    mapped.reserve(levels.levels.size());
    for (auto j : levels.token_index) {
        if (j < 0 || j >= L)
            throw ParamError("close_set_prior: token index " + std::to_string(j) +
                             " outside logit vector of length " + std::to_string(L));
        if (!std::isfinite(logits[static_cast<std::size_t>(j)]))
            throw NumericError("close_set_prior: non-finite logit");
        mapped.push_back(logits[static_cast<std::size_t>(j)]);
    }
    const double mx = *std::max_element(mapped.begin(), mapped.end());
    double z = 0;
    for (double& v : mapped) {
        v = std::exp(v - mx);
        z += v;
    }
    DegradationPrior p;
    for (double v : mapped) p.probs.push_back(v / z);
    p.validate();
    return p;
}

// Mean dark channel of one batch item: min over channels, min-filtered with
// an odd window (borders clamped), averaged over pixels. In [0,1] for
// in-range images; rises with haze density.
template <typename T>
double dark_channel_score(const Tensor<T>& image, std::int64_t batch, int window) {
    if (image.rank() != 4) throw ShapeError("dark_channel_score: image must be rank 4");
    if (window < 1 || window % 2 == 0)
        throw ParamError("dark_channel_score: window must be odd and >= 1");
    const std::int64_t C = image.dim(1), H = image.dim(2), W = image.dim(3);
    if (batch < 0 || batch >= image.dim(0))
        throw ParamError("dark_channel_score: batch index out of range");
    for (const T& v : image.data())
        if (v < T(0) || v > T(1))
            throw ParamError("dark_channel_score: image values must lie in [0,1]");
    std::vector<double> dark(static_cast<std::size_t>(H * W),
                             std::numeric_limits<double>::max());
    const T* p = image.ptr() + batch * C * H * W;
    for (std::int64_t c = 0; c < C; ++c)
        for (std::int64_t i = 0; i < H * W; ++i)
            dark[static_cast<std::size_t>(i)] =
                std::min(dark[static_cast<std::size_t>(i)],
                         static_cast<double>(p[c * H * W + i]));
    const int r = window / 2;
    double acc = 0;
    for (std::int64_t i = 0; i < H; ++i)
        for (std::int64_t j = 0; j < W; ++j) {
            double m = std::numeric_limits<double>::max();
            for (std::int64_t u = std::max<std::int64_t>(0, i - r);
                 u <= std::min<std::int64_t>(H - 1, i + r); ++u)
                for (std::int64_t v = std::max<std::int64_t>(0, j - r);
                     v <= std::min<std::int64_t>(W - 1, j + r); ++v)
                    m = std::min(m, dark[static_cast<std::size_t>(u * W + v)]);
            acc += m;
        }
    return acc / static_cast<double>(H * W);
}

// Piecewise-linear ramp from a density score d in [0,1] to mapped logits:
// the peak position moves linearly from the clearest level (d=0) to the
// densest (d=1); level i receives gain * max(0, 1 - |d*(N-1) - i|).
// Unmapped vocabulary positions keep the -inf-equivalent sentinel.
inline std::vector<double> density_ramp_logits(double d, const RatingLevelSet& levels,
                                               double gain = 8.0) {
    levels.validate();
    const std::int64_t N = levels.size();
    std::vector<double> logits(static_cast<std::size_t>(levels.vocab_size),
                               kUnmappedLogit);
    const double pos = d * static_cast<double>(N - 1);
    for (std::int64_t i = 0; i < N; ++i) {
        const double w = std::max(0.0, 1.0 - std::abs(pos - static_cast<double>(i)));
        logits[static_cast<std::size_t>(levels.token_index[static_cast<std::size_t>(i)])] =
            gain * w;
    }
    return logits;
}

// Deterministic built-in intensity estimator: dark-channel density mapped
// through the documented ramp. Single image (batch size 1).
template <typename T>
std::vector<double> dark_channel_estimator(const Tensor<T>& image,
                                           const RatingLevelSet& levels, int window,
                                           double gain = 8.0) {
    if (image.rank() != 4 || image.dim(0) != 1)
        throw ShapeError("dark_channel_estimator: expected a single image (1,C,H,W)");
    const double d = dark_channel_score(image, 0, window);
    return density_ramp_logits(d, levels, gain);
}

// Prior for one image through the built-in estimator.
template <typename T>
DegradationPrior estimate_prior(const Tensor<T>& image, const RatingLevelSet& levels,
                                int window = 7, double gain = 8.0) {
    return close_set_prior(dark_channel_estimator(image, levels, window, gain), levels);
}

}  // namespace dehaze
