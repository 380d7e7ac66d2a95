// Full network assembly: shallow 3x3 conv -> multi-level encoder-decoder of
// MM blocks -> learnable-scale residual -> feature addition -> 3x3
// reconstruction conv, plus the versioned binary checkpoint format.
//
// Downsampling is a stride-2 3x3 conv doubling channels; upsampling is
// nearest-neighbor x2 followed by a 3x3 conv halving channels. Encoder and
// decoder levels are joined by additive skip connections. The MM stack
// closes with a 3x3 output projection so the stack as a whole is exactly
// the zero map when that projection is zeroed.

#pragma once

#include <cstring>
#include <fstream>

#include "dehaze/moe.hpp"

namespace dehaze {

struct ModelConfig {
    std::int64_t levels = 4;
    std::vector<std::int64_t> blocks = {4, 6, 6, 8};
    std::vector<std::int64_t> experts = {14, 1, 1, 14};
    std::vector<std::int64_t> topk = {7, 1, 1, 7};
    std::int64_t base_channels = 16;
    std::vector<std::int64_t> channel_mult = {1, 2, 4, 8};
    std::int64_t d_state = 16;

    void validate() const {
        if (levels < 1) throw ParamError("ModelConfig: need at least one level");
        const auto L = static_cast<std::size_t>(levels);
        if (blocks.size() != L || experts.size() != L || topk.size() != L ||
            channel_mult.size() != L)
            throw ParamError(
                "ModelConfig: blocks/experts/topk/channel_mult must each have one "
                "entry per level");
        for (std::size_t i = 0; i < L; ++i) {
            if (blocks[i] < 1) throw ParamError("ModelConfig: blocks must be >= 1");
            if (experts[i] < 1) throw ParamError("ModelConfig: experts must be >= 1");
            if (topk[i] < 1 || topk[i] > experts[i])
                throw ParamError("ModelConfig: require 1 <= K <= N at level " +
                                 std::to_string(i));
            if (channel_mult[i] < 1)
                throw ParamError("ModelConfig: channel multiplier must be >= 1");
        }
        if (base_channels < 1 || d_state < 1)
            throw ParamError("ModelConfig: base_channels and d_state must be >= 1");
    }

    std::int64_t channels_at(std::int64_t level) const {
        return base_channels * channel_mult[static_cast<std::size_t>(level)];
    }

    std::int64_t spatial_divisor() const { return std::int64_t{1} << (levels - 1); }

    // Prior length the routing expects: the largest per-level expert count.
    std::int64_t prior_length() const {
        return *std::max_element(experts.begin(), experts.end());
    }

    static ModelConfig full_scale() { return ModelConfig{}; }

    // Desk-scale configuration used by the gradient and overfit checks.
    static ModelConfig tiny() {
        ModelConfig c;
        c.levels = 1;
        c.blocks = {1};
        c.experts = {2};
        c.topk = {1};
        c.base_channels = 4;
        c.channel_mult = {1};
        c.d_state = 4;
        return c;
    }
};

template <typename T>
struct MoEMambaNet {
    ModelConfig config;
    Tensor<T> shallow_w, shallow_b;
    std::vector<std::vector<MMBlock<T>>> enc;   // levels 0..L-2
    std::vector<Tensor<T>> down_w, down_b;      // per encoder level
    std::vector<MMBlock<T>> bottom;             // level L-1
    std::vector<std::vector<MMBlock<T>>> dec;   // levels 0..L-2 (applied deepest first)
    std::vector<Tensor<T>> up_w, up_b;          // per decoder level
    Tensor<T> stack_proj_w, stack_proj_b;       // closes the MM stack
    Tensor<T> delta;                            // learnable residual scale
    Tensor<T> recon_w, recon_b;

    std::vector<std::pair<std::string, Tensor<T>>> named_parameters() {
        std::vector<std::pair<std::string, Tensor<T>>> out;
        auto push = [&out](std::string name, Tensor<T> t) {
            out.emplace_back(std::move(name), std::move(t));
        };
        auto push_block = [&push](const std::string& prefix, MMBlock<T>& b) {
            push(prefix + ".pre_norm.gamma", b.pre_gamma);
            push(prefix + ".pre_norm.beta", b.pre_beta);
            push(prefix + ".moe.gate.w", b.moe.Wgate);
            push(prefix + ".moe.gate.b", b.moe.bgate);
            push(prefix + ".moe.value.w", b.moe.Wval);
            push(prefix + ".moe.value.b", b.moe.bval);
            push(prefix + ".moe.out.w", b.moe.Wout);
            push(prefix + ".moe.out.b", b.moe.bout);
            for (std::size_t e = 0; e < b.moe.experts.size(); ++e) {
                auto& ex = b.moe.experts[e];
                const std::string ep = prefix + ".moe.expert" + std::to_string(e);
                push(ep + ".dw.w", ex.dw_weight);
                for (std::size_t d = 0; d < ex.ssm.size(); ++d) {
                    auto& s = ex.ssm[d];
                    const std::string dp = ep + ".dir" + std::to_string(d);
                    push(dp + ".A_log", s.A_log);
                    push(dp + ".D", s.D_skip);
                    push(dp + ".proj_b.w", s.Wb);
                    push(dp + ".proj_b.b", s.bb);
                    push(dp + ".proj_c.w", s.Wc);
                    push(dp + ".proj_c.b", s.bc);
                    push(dp + ".proj_delta.w", s.Wdelta);
                    push(dp + ".proj_delta.b", s.bdelta);
                }
                push(ep + ".ln.gamma", ex.ln_gamma);
                push(ep + ".ln.beta", ex.ln_beta);
            }
            push(prefix + ".tail_norm.gamma", b.tail_gamma);
            push(prefix + ".tail_norm.beta", b.tail_beta);
            push(prefix + ".tail_conv.w", b.tail_conv_w);
            push(prefix + ".tail_conv.b", b.tail_conv_b);
            push(prefix + ".attn.w1", b.attn_w1);
            push(prefix + ".attn.b1", b.attn_b1);
            push(prefix + ".attn.w2", b.attn_w2);
            push(prefix + ".attn.b2", b.attn_b2);
        };
        push("shallow.w", shallow_w);
        push("shallow.b", shallow_b);
        for (std::size_t l = 0; l < enc.size(); ++l) {
            for (std::size_t k = 0; k < enc[l].size(); ++k)
                push_block("enc" + std::to_string(l) + ".block" + std::to_string(k),
                           enc[l][k]);
            push("down" + std::to_string(l) + ".w", down_w[l]);
            push("down" + std::to_string(l) + ".b", down_b[l]);
        }
        for (std::size_t k = 0; k < bottom.size(); ++k)
            push_block("bottom.block" + std::to_string(k), bottom[k]);
        for (std::size_t l = dec.size(); l-- > 0;) {
            push("up" + std::to_string(l) + ".w", up_w[l]);
            push("up" + std::to_string(l) + ".b", up_b[l]);
            for (std::size_t k = 0; k < dec[l].size(); ++k)
                push_block("dec" + std::to_string(l) + ".block" + std::to_string(k),
                           dec[l][k]);
        }
        push("stack_proj.w", stack_proj_w);
        push("stack_proj.b", stack_proj_b);
        push("delta", delta);
        push("recon.w", recon_w);
        push("recon.b", recon_b);
        return out;
    }

    std::vector<Tensor<T>> parameters() {
        std::vector<Tensor<T>> out;
        for (auto& [name, t] : named_parameters()) out.push_back(t);
        return out;
    }
};

template <typename T>
std::int64_t count_parameters(MoEMambaNet<T>& net) {
    std::int64_t total = 0;
    for (auto& p : net.parameters()) total += p.numel();
    return total;
}

template <typename T>
MoEMambaNet<T> build(const ModelConfig& config, std::uint64_t seed) {
    config.validate();
    Rng rng(seed);
    auto fan_in_uniform = [&rng](Shape shape, std::int64_t fan_in) {
        Tensor<T> t(shape);
        const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
        for (std::int64_t i = 0; i < t.numel(); ++i)
            t[i] = static_cast<T>(rng.uniform(-bound, bound));
        t.set_requires_grad(true);
        return t;
    };
    MoEMambaNet<T> net;
    net.config = config;
    const std::int64_t L = config.levels;
    const std::int64_t C0 = config.channels_at(0);
    net.shallow_w = fan_in_uniform(Shape{C0, 3, 3, 3}, 3 * 9);
    net.shallow_b = Tensor<T>(Shape{C0}, T(0), true);
    for (std::int64_t l = 0; l + 1 < L; ++l) {
        const std::int64_t c = config.channels_at(l);
        const std::int64_t cn = config.channels_at(l + 1);
        std::vector<MMBlock<T>> blocks;
        for (std::int64_t k = 0; k < config.blocks[static_cast<std::size_t>(l)]; ++k)
            blocks.push_back(MMBlock<T>::init(c, config.experts[static_cast<std::size_t>(l)],
                                              config.topk[static_cast<std::size_t>(l)],
                                              config.d_state, rng));
        net.enc.push_back(std::move(blocks));
        net.down_w.push_back(fan_in_uniform(Shape{cn, c, 3, 3}, c * 9));
        net.down_b.push_back(Tensor<T>(Shape{cn}, T(0), true));
    }
    {
        const std::int64_t c = config.channels_at(L - 1);
        for (std::int64_t k = 0; k < config.blocks[static_cast<std::size_t>(L - 1)]; ++k)
            net.bottom.push_back(
                MMBlock<T>::init(c, config.experts[static_cast<std::size_t>(L - 1)],
                                 config.topk[static_cast<std::size_t>(L - 1)],
                                 config.d_state, rng));
    }
    for (std::int64_t l = 0; l + 1 < L; ++l) {
        const std::int64_t c = config.channels_at(l);
        const std::int64_t cn = config.channels_at(l + 1);
        net.up_w.push_back(fan_in_uniform(Shape{c, cn, 3, 3}, cn * 9));
        net.up_b.push_back(Tensor<T>(Shape{c}, T(0), true));
        std::vector<MMBlock<T>> blocks;
        for (std::int64_t k = 0; k < config.blocks[static_cast<std::size_t>(l)]; ++k)
            blocks.push_back(MMBlock<T>::init(c, config.experts[static_cast<std::size_t>(l)],
                                              config.topk[static_cast<std::size_t>(l)],
                                              config.d_state, rng));
        net.dec.push_back(std::move(blocks));
    }
    net.stack_proj_w = fan_in_uniform(Shape{C0, C0, 3, 3}, C0 * 9);
    net.stack_proj_b = Tensor<T>(Shape{C0}, T(0), true);
    net.delta = Tensor<T>(Shape{1}, T(1), true);  // near-identity start
    net.recon_w = fan_in_uniform(Shape{3, C0, 3, 3}, C0 * 9);
    net.recon_b = Tensor<T>(Shape{3}, T(0), true);
    return net;
}

// Core forward; spatial dims must already be divisible by 2^(levels-1).
// I_dh = clamp01(Conv(F_a)), F_a = F_hat + F_s, F_hat = stack(F_s) + delta*F_s.
template <typename T>
Tensor<T> forward(Tape<T>* tape, Tensor<T> I_h, const DegradationPrior& prior,
                  MoEMambaNet<T>& net) {
    if (I_h.rank() != 4 || I_h.dim(1) != 3)
        throw ShapeError("forward: input must be (B,3,H,W), got " +
                         shape_str(I_h.shape()));
    const std::int64_t div = net.config.spatial_divisor();
    if (I_h.dim(2) % div != 0 || I_h.dim(3) % div != 0)
        throw ShapeError("forward: spatial dims " + std::to_string(I_h.dim(2)) + "x" +
                         std::to_string(I_h.dim(3)) + " must be divisible by " +
                         std::to_string(div) +
                         "; reflect-pad to the next multiple (see infer_padded)");
    Tensor<T> f_s = conv2d(tape, I_h, net.shallow_w, net.shallow_b, 1, 1);
    Tensor<T> x = f_s;
    std::vector<Tensor<T>> skips;
    for (std::size_t l = 0; l < net.enc.size(); ++l) {
        for (auto& blk : net.enc[l]) x = mm_block_forward(tape, x, prior, blk);
        skips.push_back(x);
        x = conv2d(tape, x, net.down_w[l], net.down_b[l], 2, 1);
    }
    for (auto& blk : net.bottom) x = mm_block_forward(tape, x, prior, blk);
    for (std::size_t l = net.dec.size(); l-- > 0;) {
        x = upsample_nearest2x(tape, x);
        x = conv2d(tape, x, net.up_w[l], net.up_b[l], 1, 1);
        x = add(tape, x, skips[l]);
        for (auto& blk : net.dec[l]) x = mm_block_forward(tape, x, prior, blk);
    }
    x = conv2d(tape, x, net.stack_proj_w, net.stack_proj_b, 1, 1);
    Tensor<T> f_hat = add(tape, x, scale_by_scalar_param(tape, f_s, net.delta));
    Tensor<T> f_a = add(tape, f_hat, f_s);
    return clamp01(tape, conv2d(tape, f_a, net.recon_w, net.recon_b, 1, 1));
}

// Arbitrary-size inference: reflect-pad to the next multiple of the spatial
// divisor, run forward, crop back.
template <typename T>
Tensor<T> infer_padded(MoEMambaNet<T>& net, Tensor<T> I_h, const DegradationPrior& prior) {
    const std::int64_t div = net.config.spatial_divisor();
    const std::int64_t H = I_h.dim(2), W = I_h.dim(3);
    const std::int64_t Hp = (H + div - 1) / div * div;
    const std::int64_t Wp = (W + div - 1) / div * div;
    if (Hp == H && Wp == W) return forward<T>(nullptr, I_h, prior, net);
    Tensor<T> padded = pad_reflect<T>(nullptr, I_h, 0, static_cast<int>(Hp - H), 0,
                                      static_cast<int>(Wp - W));
    Tensor<T> out = forward<T>(nullptr, padded, prior, net);
    return crop_spatial<T>(nullptr, out, 0, 0, H, W);
}

// ---------------------------------------------------------------------------
// Checkpoint format: little-endian binary, versioned header with a config
// echo and the RNG convention tag, then named parameter tensors, then an
// optional training-state trailer (step, RNG stream, optimizer moments).
// ---------------------------------------------------------------------------

namespace ckpt {

inline constexpr char kMagic[8] = {'D', 'H', 'Z', 'C', 'K', 'P', 'T', '\n'};
inline constexpr std::uint32_t kVersion = 1;

template <typename T>
const char* precision_tag() {
    if constexpr (std::is_same_v<T, float>) return "f32";
    else return "f64";
}

inline void write_u32(std::ostream& os, std::uint32_t v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof v);
}
inline void write_i64(std::ostream& os, std::int64_t v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof v);
}
inline void write_str(std::ostream& os, const std::string& s) {
    write_i64(os, static_cast<std::int64_t>(s.size()));
    os.write(s.data(), static_cast<std::streamsize>(s.size()));
}
inline std::uint32_t read_u32(std::istream& is) {
    std::uint32_t v = 0;
    is.read(reinterpret_cast<char*>(&v), sizeof v);
    return v;
}
inline std::int64_t read_i64(std::istream& is) {
    std::int64_t v = 0;
    is.read(reinterpret_cast<char*>(&v), sizeof v);
    return v;
}
inline std::string read_str(std::istream& is) {
    const std::int64_t n = read_i64(is);
    if (n < 0 || n > (std::int64_t{1} << 32))
        throw ParamError("checkpoint: corrupt string length");
    std::string s(static_cast<std::size_t>(n), '\0');
    is.read(s.data(), n);
    return s;
}
inline void write_i64_list(std::ostream& os, const std::vector<std::int64_t>& v) {
    write_i64(os, static_cast<std::int64_t>(v.size()));
    for (auto x : v) write_i64(os, x);
}
inline std::vector<std::int64_t> read_i64_list(std::istream& is) {
    const std::int64_t n = read_i64(is);
    std::vector<std::int64_t> v;
    for (std::int64_t i = 0; i < n; ++i) v.push_back(read_i64(is));
    return v;
}

inline void write_config(std::ostream& os, const ModelConfig& c) {
    write_i64(os, c.levels);
    write_i64_list(os, c.blocks);
    write_i64_list(os, c.experts);
    write_i64_list(os, c.topk);
    write_i64(os, c.base_channels);
    write_i64_list(os, c.channel_mult);
    write_i64(os, c.d_state);
}
inline ModelConfig read_config(std::istream& is) {
    ModelConfig c;
    c.levels = read_i64(is);
    c.blocks = read_i64_list(is);
    c.experts = read_i64_list(is);
    c.topk = read_i64_list(is);
    c.base_channels = read_i64(is);
    c.channel_mult = read_i64_list(is);
    c.d_state = read_i64(is);
    return c;
}

template <typename T>
void write_buffer(std::ostream& os, const std::vector<T>& buf) {
    write_i64(os, static_cast<std::int64_t>(buf.size() * sizeof(T)));
    os.write(reinterpret_cast<const char*>(buf.data()),
             static_cast<std::streamsize>(buf.size() * sizeof(T)));
}
template <typename T>
void read_buffer(std::istream& is, std::vector<T>& buf) {
    const std::int64_t bytes = read_i64(is);
    if (bytes != static_cast<std::int64_t>(buf.size() * sizeof(T)))
        throw ParamError("checkpoint: buffer size mismatch");
    is.read(reinterpret_cast<char*>(buf.data()), bytes);
}

}  // namespace ckpt

// Optional training state carried alongside the model parameters.
template <typename T>
struct TrainState {
    std::int64_t step = 0;
    std::string rng_state;
    // Per-parameter AdamW moments, in named_parameters order.
    std::vector<std::vector<T>> moment1, moment2;
};

template <typename T>
void save_checkpoint(const std::string& path, MoEMambaNet<T>& net,
                     const TrainState<T>* train_state = nullptr) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw ParamError("checkpoint: cannot write " + path);
    os.write(ckpt::kMagic, sizeof ckpt::kMagic);
    ckpt::write_u32(os, ckpt::kVersion);
    ckpt::write_str(os, kRngConvention);
    ckpt::write_str(os, ckpt::precision_tag<T>());
    ckpt::write_config(os, net.config);
    auto params = net.named_parameters();
    ckpt::write_i64(os, static_cast<std::int64_t>(params.size()));
    for (auto& [name, t] : params) {
        ckpt::write_str(os, name);
        ckpt::write_i64_list(os, t.shape());
        ckpt::write_buffer(os, t.data());
    }
    os.put(train_state ? 1 : 0);
    if (train_state) {
        ckpt::write_i64(os, train_state->step);
        ckpt::write_str(os, train_state->rng_state);
        if (train_state->moment1.size() != params.size() ||
            train_state->moment2.size() != params.size())
            throw ParamError("checkpoint: optimizer state does not match parameters");
        for (std::size_t i = 0; i < params.size(); ++i) {
            ckpt::write_buffer(os, train_state->moment1[i]);
            ckpt::write_buffer(os, train_state->moment2[i]);
        }
    }
    if (!os) throw ParamError("checkpoint: write failed for " + path);
}

template <typename T>
MoEMambaNet<T> load_checkpoint(const std::string& path,
                               TrainState<T>* train_state = nullptr) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw ParamError("checkpoint: cannot open " + path);
    char magic[8];
    is.read(magic, sizeof magic);
    if (std::memcmp(magic, ckpt::kMagic, sizeof magic) != 0)
        throw ParamError("checkpoint: bad magic in " + path);
    const std::uint32_t version = ckpt::read_u32(is);
    if (version != ckpt::kVersion)
        throw ParamError("checkpoint: unsupported version " + std::to_string(version));
    const std::string rng_tag = ckpt::read_str(is);
    if (rng_tag != kRngConvention)
        throw ParamError("checkpoint: RNG convention '" + rng_tag +
                         "' does not match '" + kRngConvention + "'");
    const std::string prec = ckpt::read_str(is);
    if (prec != ckpt::precision_tag<T>())
        throw ParamError("checkpoint: precision '" + prec + "' does not match '" +
                         ckpt::precision_tag<T>() + "'");
    const ModelConfig config = ckpt::read_config(is);
    MoEMambaNet<T> net = build<T>(config, /*seed=*/0);
    auto params = net.named_parameters();
    const std::int64_t n = ckpt::read_i64(is);
    if (n != static_cast<std::int64_t>(params.size()))
        throw ParamError("checkpoint: parameter count mismatch");
    for (auto& [name, t] : params) {
        const std::string stored = ckpt::read_str(is);
        if (stored != name)
            throw ParamError("checkpoint: expected tensor '" + name + "', found '" +
                             stored + "'");
        const auto shape = ckpt::read_i64_list(is);
        if (shape != t.shape())
            throw ParamError("checkpoint: shape mismatch for '" + name + "'");
        ckpt::read_buffer(is, t.data());
    }
    const int has_state = is.get();
    if (has_state == 1) {
        TrainState<T> st;
        st.step = ckpt::read_i64(is);
        st.rng_state = ckpt::read_str(is);
        for (auto& [name, t] : params) {
            std::vector<T> m1(static_cast<std::size_t>(t.numel()));
            std::vector<T> m2(static_cast<std::size_t>(t.numel()));
            ckpt::read_buffer(is, m1);
            ckpt::read_buffer(is, m2);
            st.moment1.push_back(std::move(m1));
            st.moment2.push_back(std::move(m2));
        }
        if (train_state) *train_state = std::move(st);
    }
    if (!is) throw ParamError("checkpoint: truncated file " + path);
    return net;
}

}  // namespace dehaze
