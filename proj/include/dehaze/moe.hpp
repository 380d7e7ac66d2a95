// Top-K mixture of SSB experts gated by the degradation prior, and the MM
// block wrapping it with a pre-norm residual and a norm/conv/channel-
// attention tail.
//
// Selection follows the prior literally: the K experts with the largest
// probabilities are evaluated and their outputs are scaled by the raw
// (un-renormalized) probabilities. With a single expert the gate weight is
// fixed to 1 and the prior is ignored.

#pragma once

#include "dehaze/prior.hpp"
#include "dehaze/scan.hpp"

namespace dehaze {

// Indices of the K largest probabilities, descending; ties broken by lower
// index so routing is reproducible.
inline std::vector<std::int64_t> top_k_select(const DegradationPrior& prior,
                                              std::int64_t K) {
    const std::int64_t n = prior.size();
    if (K < 1 || K > n)
        throw ParamError("top_k_select: K=" + std::to_string(K) +
                         " out of range for prior of length " + std::to_string(n));
    std::vector<std::int64_t> idx(static_cast<std::size_t>(n));
    for (std::int64_t i = 0; i < n; ++i) idx[static_cast<std::size_t>(i)] = i;
    std::stable_sort(idx.begin(), idx.end(), [&](std::int64_t a, std::int64_t b) {
        if (prior.probs[static_cast<std::size_t>(a)] !=
            prior.probs[static_cast<std::size_t>(b)])
            return prior.probs[static_cast<std::size_t>(a)] >
                   prior.probs[static_cast<std::size_t>(b)];
        return a < b;
    });
    idx.resize(static_cast<std::size_t>(K));
    return idx;
}

template <typename T>
struct MoEBlock {
    std::int64_t channels = 0;
    std::int64_t K = 1;
    std::vector<SSBParams<T>> experts;
    Tensor<T> Wgate, bgate;  // produces the expert input from F_ln
    Tensor<T> Wval, bval;    // SiLU gate branch
    Tensor<T> Wout, bout;    // final projection
    // Instrumentation: forward evaluations per expert (not serialized).
    mutable std::vector<std::int64_t> expert_calls;

    static MoEBlock init(std::int64_t channels, std::int64_t n_experts, std::int64_t K,
                         std::int64_t state_dim, Rng& rng) {
        if (K < 1 || K > n_experts)
            throw ParamError("MoEBlock: require 1 <= K <= N, got K=" +
                             std::to_string(K) + " N=" + std::to_string(n_experts));
        MoEBlock b;
        b.channels = channels;
        b.K = K;
        auto fan_in_uniform = [&rng, channels](Shape shape) {
            Tensor<T> t(shape);
            const double bound = 1.0 / std::sqrt(static_cast<double>(channels));
            for (std::int64_t i = 0; i < t.numel(); ++i)
                t[i] = static_cast<T>(rng.uniform(-bound, bound));
            t.set_requires_grad(true);
            return t;
        };
        b.Wgate = fan_in_uniform(Shape{channels, channels});
        b.bgate = Tensor<T>(Shape{channels}, T(0), true);
        b.Wval = fan_in_uniform(Shape{channels, channels});
        b.bval = Tensor<T>(Shape{channels}, T(0), true);
        b.Wout = fan_in_uniform(Shape{channels, channels});
        b.bout = Tensor<T>(Shape{channels}, T(0), true);
        for (std::int64_t i = 0; i < n_experts; ++i)
            b.experts.push_back(SSBParams<T>::init(channels, state_dim, rng));
        b.expert_calls.assign(static_cast<std::size_t>(n_experts), 0);
        return b;
    }

    std::int64_t n_experts() const { return static_cast<std::int64_t>(experts.size()); }

    std::vector<Tensor<T>> parameters() {
        std::vector<Tensor<T>> out{Wgate, bgate, Wval, bval, Wout, bout};
        for (auto& e : experts) {
            auto ps = e.parameters();
            out.insert(out.end(), ps.begin(), ps.end());
        }
        return out;
    }
};

// TK(F_hat, p) = sum over the K selected experts of SSB_v(i)(F_hat) * p_v(i).
// Only the selected experts run; compute scales with K, not N.
template <typename T>
Tensor<T> tk_combine(Tape<T>* tape, Tensor<T> f_hat, const DegradationPrior& prior,
                     MoEBlock<T>& block) {
    const std::int64_t N = block.n_experts();
    if (N > 1 && prior.size() != N)
        throw ParamError("tk_combine: " + std::to_string(N) + " experts but prior of length " +
                         std::to_string(prior.size()));
    if (N == 1) {
        ++block.expert_calls[0];
        return ssb(tape, f_hat, block.experts[0]);
    }
    const auto selected = top_k_select(prior, block.K);
    Tensor<T> out;
    bool first = true;
    for (std::int64_t idx : selected) {
        ++block.expert_calls[static_cast<std::size_t>(idx)];
        Tensor<T> y = ssb(tape, f_hat, block.experts[static_cast<std::size_t>(idx)]);
        y = scale(tape, y,
                  static_cast<T>(prior.probs[static_cast<std::size_t>(idx)]));
        out = first ? y : add(tape, out, y);
        first = false;
    }
    return out;
}

// F_d = Linear( TK(Linear(F_ln), p) (.) SiLU(Linear(F_ln)) )
template <typename T>
Tensor<T> moe_block_forward(Tape<T>* tape, Tensor<T> f_ln, const DegradationPrior& prior,
                            MoEBlock<T>& block) {
    if (f_ln.rank() != 4 || f_ln.dim(1) != block.channels)
        throw ShapeError("moe_block_forward: input channels do not match block");
    Tensor<T> f_hat = linear(tape, f_ln, block.Wgate, block.bgate);
    Tensor<T> gate = silu(tape, linear(tape, f_ln, block.Wval, block.bval));
    Tensor<T> mixed = tk_combine(tape, f_hat, prior, block);
    return linear(tape, mul(tape, mixed, gate), block.Wout, block.bout);
}

template <typename T>
struct MMBlock {
    std::int64_t channels = 0;
    Tensor<T> pre_gamma, pre_beta;
    MoEBlock<T> moe;
    Tensor<T> tail_gamma, tail_beta;
    Tensor<T> tail_conv_w, tail_conv_b;   // 3x3
    Tensor<T> attn_w1, attn_b1, attn_w2, attn_b2;  // channel-attention bottleneck

    static MMBlock init(std::int64_t channels, std::int64_t n_experts, std::int64_t K,
                        std::int64_t state_dim, Rng& rng) {
        MMBlock b;
        b.channels = channels;
        b.pre_gamma = Tensor<T>(Shape{channels}, T(1), true);
        b.pre_beta = Tensor<T>(Shape{channels}, T(0), true);
        b.moe = MoEBlock<T>::init(channels, n_experts, K, state_dim, rng);
        b.tail_gamma = Tensor<T>(Shape{channels}, T(1), true);
        b.tail_beta = Tensor<T>(Shape{channels}, T(0), true);
        auto fan_in_uniform = [&rng](Shape shape, std::int64_t fan_in) {
            Tensor<T> t(shape);
            const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
            for (std::int64_t i = 0; i < t.numel(); ++i)
                t[i] = static_cast<T>(rng.uniform(-bound, bound));
            t.set_requires_grad(true);
            return t;
        };
        b.tail_conv_w = fan_in_uniform(Shape{channels, channels, 3, 3}, channels * 9);
        b.tail_conv_b = Tensor<T>(Shape{channels}, T(0), true);
        const std::int64_t mid = std::max<std::int64_t>(channels / 4, 1);
        b.attn_w1 = fan_in_uniform(Shape{mid, channels}, channels);
        b.attn_b1 = Tensor<T>(Shape{mid}, T(0), true);
        b.attn_w2 = fan_in_uniform(Shape{channels, mid}, mid);
        b.attn_b2 = Tensor<T>(Shape{channels}, T(0), true);
        return b;
    }

    std::vector<Tensor<T>> parameters() {
        std::vector<Tensor<T>> out{pre_gamma, pre_beta};
        auto ps = moe.parameters();
        out.insert(out.end(), ps.begin(), ps.end());
        for (Tensor<T> t : {tail_gamma, tail_beta, tail_conv_w, tail_conv_b, attn_w1,
                            attn_b1, attn_w2, attn_b2})
            out.push_back(t);
        return out;
    }
};

// u = F_s + MoE(pre_norm(F_s), p); output = ChannelAttention(Conv(LN(u))) + u.
template <typename T>
Tensor<T> mm_block_forward(Tape<T>* tape, Tensor<T> x, const DegradationPrior& prior,
                           MMBlock<T>& block, T ln_eps = T(1e-5)) {
    Tensor<T> normed = layer_norm(tape, x, block.pre_gamma, block.pre_beta, ln_eps);
    Tensor<T> u = add(tape, x, moe_block_forward(tape, normed, prior, block.moe));
    Tensor<T> t = layer_norm(tape, u, block.tail_gamma, block.tail_beta, ln_eps);
    t = conv2d(tape, t, block.tail_conv_w, block.tail_conv_b, 1, 1);
    Tensor<T> s = global_avg_pool(tape, t);
    s = relu(tape, linear(tape, s, block.attn_w1, block.attn_b1));
    s = sigmoid(tape, linear(tape, s, block.attn_w2, block.attn_b2));
    return add(tape, scale_channels(tape, t, s), u);
}

}  // namespace dehaze
