// Training harness: AdamW with a cosine learning-rate schedule, random
// aligned crop pairs, per-image degradation priors, Charbonnier objective,
// resumable checkpoints, and full-resolution evaluation.

#pragma once

#include <iostream>

#include "dehaze/hazegen.hpp"
#include "dehaze/metrics.hpp"
#include "dehaze/model.hpp"

namespace dehaze {

struct TrainConfig {
    std::int64_t batch_size = 4;
    std::int64_t total_iters = 2000;
    double lr_start = 2e-4;
    double lr_end = 1e-5;
    std::int64_t crop = 64;
    std::uint64_t seed = 0;
    std::int64_t checkpoint_interval = 500;
    std::int64_t log_interval = 1;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    double weight_decay = 0.0;
    int prior_window = 7;

    void validate() const {
        if (batch_size < 1) throw ParamError("TrainConfig: batch_size must be >= 1");
        if (total_iters < 1) throw ParamError("TrainConfig: total_iters must be >= 1");
        if (!(lr_start > 0) || !(lr_end > 0) || lr_end >= lr_start)
            throw ParamError("TrainConfig: require 0 < lr_end < lr_start");
        if (crop < 1) throw ParamError("TrainConfig: crop must be >= 1");
        if (!(beta1 >= 0 && beta1 < 1 && beta2 >= 0 && beta2 < 1))
            throw ParamError("TrainConfig: betas must lie in [0,1)");
        if (!(adam_eps > 0)) throw ParamError("TrainConfig: adam_eps must be positive");
        if (weight_decay < 0) throw ParamError("TrainConfig: weight_decay must be >= 0");
    }
};

// Cosine decay from lr_start at step 0 to lr_end at step total_iters.
inline double cosine_lr(std::int64_t step, const TrainConfig& cfg) {
    if (step < 0 || step > cfg.total_iters)
        throw ParamError("cosine_lr: step " + std::to_string(step) +
                         " outside [0, " + std::to_string(cfg.total_iters) + "]");
    const double f = static_cast<double>(step) / static_cast<double>(cfg.total_iters);
    return cfg.lr_end +
           0.5 * (cfg.lr_start - cfg.lr_end) * (1.0 + std::cos(f * 3.14159265358979323846));
}

// AdamW state: first/second moments per parameter, in parameter order.
template <typename T>
struct OptimizerState {
    std::int64_t step = 0;  // completed steps
    std::vector<std::vector<T>> moment1, moment2;

    static OptimizerState init(std::vector<Tensor<T>>& params) {
        OptimizerState s;
        for (auto& p : params) {
            s.moment1.emplace_back(static_cast<std::size_t>(p.numel()), T(0));
            s.moment2.emplace_back(static_cast<std::size_t>(p.numel()), T(0));
        }
        return s;
    }
};

// One decoupled-weight-decay Adam update. Every parameter must carry a
// gradient (a missing gradient means the graph is disconnected, which is a
// bug, not a soft condition).
template <typename T>
void adamw_step(std::vector<Tensor<T>>& params, OptimizerState<T>& opt, double lr,
                const TrainConfig& cfg) {
    if (params.size() != opt.moment1.size())
        throw ParamError("adamw_step: optimizer state does not match parameters");
    ++opt.step;
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(opt.step));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(opt.step));
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        Tensor<T>& p = params[pi];
        if (!p.has_grad())
            throw ParamError("adamw_step: parameter " + std::to_string(pi) +
                             " has no gradient; it is disconnected from the loss");
        auto& g = p.grad();
        auto& m1 = opt.moment1[pi];
        auto& m2 = opt.moment2[pi];
        for (std::int64_t i = 0; i < p.numel(); ++i) {
            const auto u = static_cast<std::size_t>(i);
            const double gi = static_cast<double>(g[u]);
            if (!std::isfinite(gi))
                throw NumericError("adamw_step: non-finite gradient");
            const double m = cfg.beta1 * static_cast<double>(m1[u]) +
                             (1.0 - cfg.beta1) * gi;
            const double v = cfg.beta2 * static_cast<double>(m2[u]) +
                             (1.0 - cfg.beta2) * gi * gi;
            m1[u] = static_cast<T>(m);
            m2[u] = static_cast<T>(v);
            const double update = (m / bc1) / (std::sqrt(v / bc2) + cfg.adam_eps);
            p[i] = static_cast<T>(static_cast<double>(p[i]) -
                                  lr * (update + cfg.weight_decay *
                                                     static_cast<double>(p[i])));
        }
    }
}

// Aligned random crop: the same window from the hazy input and clean target.
template <typename T>
std::pair<Tensor<T>, Tensor<T>> random_crop_pair(const Tensor<T>& hazy,
                                                 const Tensor<T>& clean,
                                                 std::int64_t crop, Rng& rng) {
    detail::require_same_shape(hazy, clean, "random_crop_pair");
    const std::int64_t H = hazy.dim(2), W = hazy.dim(3);
    if (H < crop || W < crop)
        throw ParamError("random_crop_pair: image " + std::to_string(H) + "x" +
                         std::to_string(W) + " smaller than crop " +
                         std::to_string(crop));
    const auto top = static_cast<std::int64_t>(
        rng.uniform_index(static_cast<std::uint64_t>(H - crop + 1)));
    const auto left = static_cast<std::int64_t>(
        rng.uniform_index(static_cast<std::uint64_t>(W - crop + 1)));
    return {crop_spatial<T>(nullptr, hazy, top, left, crop, crop),
            crop_spatial<T>(nullptr, clean, top, left, crop, crop)};
}

// Rating set matched to the routing width: the named 14-level set when the
// model expects 14 probabilities, otherwise a generic graded set.
inline RatingLevelSet rating_set_for(const ModelConfig& config) {
    return config.prior_length() == 14 ? RatingLevelSet::default_set()
                                       : RatingLevelSet::graded(config.prior_length());
}

// In-memory paired sample.
template <typename T>
struct Pair {
    std::string id;
    Tensor<T> hazy, clean;
    double beta = 0;
    IntensityBin bin = IntensityBin::Medium;
};

template <typename T>
std::vector<Pair<T>> load_pairs(const Manifest& manifest, const std::string& split) {
    std::vector<Pair<T>> out;
    for (const auto& e : manifest.entries) {
        if (e.split != split) continue;
        Pair<T> p;
        p.id = std::filesystem::path(e.hazy_path).parent_path().filename().string() +
               "/" + std::filesystem::path(e.hazy_path).stem().string();
        p.hazy = to_tensor<T>(read_image(e.hazy_path));
        p.clean = to_tensor<T>(read_image(e.clean_path));
        p.beta = e.beta;
        p.bin = e.bin;
        out.push_back(std::move(p));
    }
    return out;
}

struct TrainResult {
    std::vector<double> losses;  // one averaged loss per step
    std::int64_t last_step = 0;
};

// Train `net` on the train-split pairs. Each step draws batch_size pairs,
// crops them, computes each crop's own degradation prior, accumulates the
// batch-mean Charbonnier loss on a shared tape, and applies one AdamW step
// with the cosine schedule. Loss lines go to `log` as `step, lr, loss`.
// Resume passes a checkpoint-restored state; step count, RNG stream, and
// optimizer moments continue exactly where they left off. `stop_after`
// (when >= 0) interrupts the run after that many total steps while keeping
// the full-schedule learning rates, writing a resumable checkpoint.
template <typename T>
TrainResult train(MoEMambaNet<T>& net, const std::vector<Pair<T>>& pairs,
                  const TrainConfig& cfg, std::ostream* log = nullptr,
                  const std::string& checkpoint_path = "",
                  const TrainState<T>* resume = nullptr,
                  std::int64_t stop_after = -1) {
    cfg.validate();
    if (pairs.empty()) throw ParamError("train: no training pairs");
    const RatingLevelSet levels = rating_set_for(net.config);
    auto params = net.parameters();
    OptimizerState<T> opt = OptimizerState<T>::init(params);
    Rng rng(cfg.seed);
    std::int64_t start_step = 0;
    if (resume) {
        if (resume->moment1.size() != params.size())
            throw ParamError("train: resume state does not match model parameters");
        start_step = resume->step;
        opt.step = resume->step;
        opt.moment1 = resume->moment1;
        opt.moment2 = resume->moment2;
        rng.restore(resume->rng_state);
    }
    const std::int64_t end_step =
        stop_after >= 0 ? std::min(stop_after, cfg.total_iters) : cfg.total_iters;
    TrainResult result;
    for (std::int64_t step = start_step; step < end_step; ++step) {
        const double lr = cosine_lr(step, cfg);
        Tape<T> tape;
        Tensor<T> loss;
        for (std::int64_t b = 0; b < cfg.batch_size; ++b) {
            const auto& pair = pairs[rng.uniform_index(pairs.size())];
            auto [hazy, clean] = random_crop_pair(pair.hazy, pair.clean, cfg.crop, rng);
            const DegradationPrior prior =
                estimate_prior(hazy, levels, cfg.prior_window);
            Tensor<T> out = forward(&tape, hazy, prior, net);
            Tensor<T> l = charbonnier_loss(&tape, clean, out);
            loss = b == 0 ? l : add(&tape, loss, l);
        }
        loss = scale(&tape, loss, T(1) / static_cast<T>(cfg.batch_size));
        const double loss_val = static_cast<double>(loss[0]);
        if (!std::isfinite(loss_val))
            throw NumericError("train: non-finite loss at step " + std::to_string(step));
        // Allocate before zeroing so experts skipped by routing this step
        // still present an (exactly zero) gradient to the optimizer.
        for (auto& p : params) {
            p.ensure_grad();
            p.zero_grad();
        }
        tape.backward(loss);
        adamw_step(params, opt, lr, cfg);
        result.losses.push_back(loss_val);
        result.last_step = step + 1;
        if (log && ((step + 1) % cfg.log_interval == 0 || step + 1 == cfg.total_iters)) {
            char line[96];
            std::snprintf(line, sizeof line, "%lld, %.9e, %.9e",
                          static_cast<long long>(step + 1), lr, loss_val);
            (*log) << line << "\n";
            log->flush();
        }
        if (!checkpoint_path.empty() &&
            ((step + 1) % cfg.checkpoint_interval == 0 || step + 1 == cfg.total_iters ||
             step + 1 == end_step)) {
            TrainState<T> st;
            st.step = step + 1;
            st.rng_state = rng.state();
            st.moment1 = opt.moment1;
            st.moment2 = opt.moment2;
            save_checkpoint(checkpoint_path, net, &st);
        }
    }
    return result;
}

// Full-resolution evaluation of the test split: padded inference per image,
// per-image PSNR/SSIM/Charbonnier rows plus means. `baseline` (optional)
// receives the same metrics for the raw hazy input, so the model's gain over
// doing nothing is visible.
template <typename T>
MetricReport evaluate(MoEMambaNet<T>& net, const std::vector<Pair<T>>& pairs,
                      int prior_window = 7, MetricReport* baseline = nullptr) {
    if (pairs.empty()) throw ParamError("evaluate: no evaluation pairs");
    const RatingLevelSet levels = rating_set_for(net.config);
    MetricReport report;
    for (const auto& pair : pairs) {
        const DegradationPrior prior = estimate_prior(pair.hazy, levels, prior_window);
        Tensor<T> out = infer_padded(net, pair.hazy, prior);
        report.rows.push_back({pair.id, psnr(out, pair.clean), ssim(out, pair.clean),
                               charbonnier(out, pair.clean)});
        if (baseline)
            baseline->rows.push_back({pair.id, psnr(pair.hazy, pair.clean),
                                      ssim(pair.hazy, pair.clean),
                                      charbonnier(pair.hazy, pair.clean)});
    }
    return report;
}

}  // namespace dehaze
