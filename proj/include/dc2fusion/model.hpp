#pragma once

// The fusion network: dual-branch patch embedding, a mirrored encoder/decoder
// of deformable cross feature blend (DCFB) blocks across four scales, and a
// convolutional fusion head reconstructing a single volume.
//
// A DCFB block updates the query branch A from the key branch B:
//   offsets  = pointwise(depthwise(concat(A, B)))        (positional estimate)
//   B'       = trilinear_sample(B, offsets)              (backward warp)
//   A        = A + windowed cross-attention(LN(A), LN(B'))
//   A        = A + FFN(LN(A))
// Both branches at a level read the same input snapshot, so the network stays
// fully symmetric under (branch swap, weight mirror). The pointwise offset
// head is zero-initialized: a fresh model is exactly plain window
// cross-attention until training moves the offsets.

#include <array>
#include <fstream>
#include <string>
#include <vector>

#include "dc2fusion/losses.hpp"
#include "dc2fusion/tensor.hpp"
#include "dc2fusion/volume_ops.hpp"
#include "dc2fusion/wire.hpp"

namespace dc2f {

struct ModelConfig {
    std::size_t in_channels = 1;
    std::size_t patch = 2;
    std::size_t base_embed = 24;
    std::vector<std::size_t> level_channels{24, 48, 96, 192};
    std::vector<std::size_t> heads_per_level{3, 6, 12, 24};
    std::size_t blocks_per_level = 1;
    std::array<std::size_t, 3> window{2, 2, 2};
    std::size_t offset_kernel = 3;

    std::size_t levels() const { return level_channels.size(); }

    void validate() const {
        if (level_channels.size() != 4 || heads_per_level.size() != 4)
            throw DataError("config: exactly 4 levels (3 downsampling stages) required");
        if (base_embed != level_channels[0]) throw DataError("config: base_embed must equal level_channels[0]");
        for (std::size_t i = 0; i < 4; ++i) {
            if (heads_per_level[i] == 0 || level_channels[i] % heads_per_level[i] != 0)
                throw DataError("config: level channels not divisible by heads");
            if (i + 1 < 4 && level_channels[i + 1] != 2 * level_channels[i])
                throw DataError("config: level channels must double per stage");
        }
        if (blocks_per_level == 0) throw DataError("config: blocks_per_level must be >= 1");
        if (offset_kernel % 2 == 0 || offset_kernel == 0) throw DataError("config: offset kernel must be odd");
        std::size_t p = patch;
        if (p == 0) throw DataError("config: patch must be >= 1");
        while (p % 2 == 0) p /= 2;
        if (p != 1) throw DataError("config: patch must be a power of two");
        for (std::size_t w : window)
            if (w == 0) throw DataError("config: window extents must be >= 1");
    }

    // input extents must survive patching, three halvings, and windowing
    void validate_input(const std::array<std::size_t, 3>& dims) const {
        for (int a = 0; a < 3; ++a) {
            if (dims[a] % (patch * 8) != 0)
                throw ShapeError("input extent " + std::to_string(dims[a]) + " not divisible by patch*8");
            std::size_t e = dims[a] / patch;
            for (std::size_t level = 0; level < 4; ++level) {
                if (e % window[a] != 0)
                    throw ShapeError("window does not divide level " + std::to_string(level) + " extent");
                e /= 2;
            }
        }
    }
};

// toy setup used by the fast verification paths: full architecture, small width
inline ModelConfig toy_config() {
    ModelConfig cfg;
    cfg.patch = 1;
    cfg.base_embed = 8;
    cfg.level_channels = {8, 16, 32, 64};
    cfg.heads_per_level = {1, 2, 4, 8};
    return cfg;
}

// ---------------------------------------------------------------------------
// parameter registry (registration order defines the checkpoint layout)

template <class T>
struct NamedParam {
    std::string name;
    Tensor<T> tensor;
};

template <class T>
class ParamStore {
public:
    Tensor<T> create_uniform(const std::string& name, Shape shape, double bound, Rng& rng) {
        Tensor<T> t = Tensor<T>::uniform(std::move(shape), rng, static_cast<T>(-bound), static_cast<T>(bound), true);
        params_.push_back({name, t});
        return t;
    }
    Tensor<T> create_const(const std::string& name, Shape shape, T value) {
        Tensor<T> t = Tensor<T>::full(std::move(shape), value, true);
        params_.push_back({name, t});
        return t;
    }

    std::vector<NamedParam<T>>& items() { return params_; }
    const std::vector<NamedParam<T>>& items() const { return params_; }

    std::size_t parameter_count() const {
        std::size_t n = 0;
        for (const auto& p : params_) n += p.tensor.numel();
        return n;
    }

    void zero_grad() {
        for (auto& p : params_) p.tensor.zero_grad();
    }

private:
    std::vector<NamedParam<T>> params_;
};

// ---------------------------------------------------------------------------
// weight bundles

template <class T>
struct ConvWeights {
    Tensor<T> w, b;
};

template <class T>
struct PreWeights {
    Tensor<T> dw_w, dw_b;  // depth-wise, groups = channels
    Tensor<T> pw_w, pw_b;  // 1x1x1 down to 3 offset channels; zero-initialized
};

template <class T>
struct AttnWeights {
    Tensor<T> wq, bq, wk, bk, wv, bv, wo, bo;
};

template <class T>
struct DcfbWeights {
    PreWeights<T> pre;
    Tensor<T> ln_q_g, ln_q_b;    // query-branch pre-norm
    Tensor<T> ln_kv_g, ln_kv_b;  // key-branch pre-norm (after resample)
    AttnWeights<T> attn;
    Tensor<T> ln_f_g, ln_f_b;  // FFN pre-norm
    Tensor<T> ffn1_w, ffn1_b, ffn2_w, ffn2_b;  // 1x1x1 convs, expansion 4
};

// ---------------------------------------------------------------------------
// probe hooks

template <class T>
struct ForwardTrace {
    struct LevelShape {
        std::size_t channels;
        std::array<std::size_t, 3> spatial;
    };
    struct AttnCapture {
        std::string tag;
        Shape shape;  // [numWindows, heads, tokens, tokens]
        std::vector<T> logits;
        std::vector<T> probs;
    };
    std::vector<LevelShape> encoder_levels;  // A-branch feature shape entering each level
    bool capture_attention = false;
    std::vector<AttnCapture> attention;
};

struct ForwardOptions {
    bool bypass_resample = false;  // skip PRE + warp: plain window cross-attention
    bool clamp_output = false;     // inference-only [0,1] clamp
};

// ---------------------------------------------------------------------------
// spec-level building blocks (free functions so they are testable in isolation)

template <class T>
Tensor<T> pre_estimate(const Tensor<T>& fa, const Tensor<T>& fb, const PreWeights<T>& w, std::size_t offset_kernel) {
    if (fa.dim() != 4 || fb.dim() != 4 || fa.extent(1) != fb.extent(1) || fa.extent(2) != fb.extent(2) ||
        fa.extent(3) != fb.extent(3))
        throw ShapeError("pre_estimate: spatial shapes differ");
    Tensor<T> fi = concat<T>({fa, fb}, 0);
    return depthwise_offset_head(fi, w.dw_w, w.dw_b, w.pw_w, w.pw_b, offset_kernel);
}

// Windowed multi-head cross-attention: Q and V from grid A, K from grid B.
// Returns the attended features merged back to [C,X,Y,Z] volume layout.
template <class T>
Tensor<T> cross_attention(const WindowGrid<T>& wa, const WindowGrid<T>& wb, std::size_t heads,
                          const AttnWeights<T>& w, ForwardTrace<T>* trace = nullptr, const char* tag = "") {
    if (wa.window != wb.window || wa.counts != wb.counts || wa.channels != wb.channels)
        throw ShapeError("cross_attention: window geometry mismatch");
    const std::size_t c = wa.channels;
    if (c % heads != 0) throw ShapeError("cross_attention: channels not divisible by heads");
    const std::size_t hd = c / heads;
    const std::size_t nw = wa.num_windows();
    const std::size_t tk = wa.tokens_per_window();

    auto split_heads = [&](const Tensor<T>& t) {
        Tensor<T> r = reshape(t, {nw, tk, heads, hd});
        r = permute(r, {0, 2, 1, 3});
        return reshape(r, {nw * heads, tk, hd});
    };

    Tensor<T> q = split_heads(linear(wa.tokens, w.wq, w.bq));
    Tensor<T> k = split_heads(linear(wb.tokens, w.wk, w.bk));
    Tensor<T> v = split_heads(linear(wa.tokens, w.wv, w.bv));

    Tensor<T> logits = scale(matmul(q, transpose_last2(k)), static_cast<T>(1.0 / std::sqrt(static_cast<double>(hd))));
    Tensor<T> probs = softmax(logits, 2);
    if (trace && trace->capture_attention) {
        typename ForwardTrace<T>::AttnCapture cap;
        cap.tag = tag;
        cap.shape = {nw, heads, tk, tk};
        cap.logits.assign(logits.values().begin(), logits.values().end());
        cap.probs.assign(probs.values().begin(), probs.values().end());
        trace->attention.push_back(std::move(cap));
    }

    Tensor<T> ctx = matmul(probs, v);
    ctx = reshape(ctx, {nw, heads, tk, hd});
    ctx = permute(ctx, {0, 2, 1, 3});
    ctx = reshape(ctx, {nw, tk, c});
    Tensor<T> out_tokens = linear(ctx, w.wo, w.bo);

    WindowGrid<T> merged = wa;
    merged.tokens = out_tokens;
    return window_merge(merged);
}

// One DCFB block: updates the A branch from the B branch.
template <class T>
Tensor<T> dcfb_forward(const Tensor<T>& fa, const Tensor<T>& fb, const DcfbWeights<T>& w,
                       const std::array<std::size_t, 3>& window, std::size_t heads, std::size_t offset_kernel,
                       const ForwardOptions& opts = {}, ForwardTrace<T>* trace = nullptr, const char* tag = "") {
    if (fa.shape() != fb.shape()) throw ShapeError("dcfb_forward: branch shapes differ");
    Tensor<T> fb_used = fb;
    if (!opts.bypass_resample) {
        Tensor<T> offsets = pre_estimate(fa, fb, w.pre, offset_kernel);
        fb_used = trilinear_sample(fb, offsets);
    }
    Tensor<T> qn = layer_norm(fa, w.ln_q_g, w.ln_q_b, 0);
    Tensor<T> kn = layer_norm(fb_used, w.ln_kv_g, w.ln_kv_b, 0);
    Tensor<T> attended = cross_attention(window_partition(qn, window), window_partition(kn, window), heads, w.attn,
                                         trace, tag);
    Tensor<T> x = add(fa, attended);

    const std::size_t c = fa.extent(0);
    Tensor<T> h = layer_norm(x, w.ln_f_g, w.ln_f_b, 0);
    h = conv3d(h, w.ffn1_w, w.ffn1_b, make_conv_spec(c, 4 * c, 1));
    h = gelu(h);
    h = conv3d(h, w.ffn2_w, w.ffn2_b, make_conv_spec(4 * c, c, 1));
    return add(x, h);
}

// per-level branch features produced by the mirrored encoder/decoder
template <class T>
struct BranchState {
    std::vector<Tensor<T>> a_enc, b_enc;  // encoder outputs per level (skip sources)
    Tensor<T> a_out, b_out;               // decoder outputs at level 0
};

// ---------------------------------------------------------------------------

template <class T>
class FusionModel {
public:
    FusionModel(ModelConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
        cfg_.validate();
        Rng rng = Rng(seed).derive(0x70c0ffee);
        build(rng);
    }

    const ModelConfig& config() const { return cfg_; }
    ParamStore<T>& params() { return store_; }
    const ParamStore<T>& params() const { return store_; }
    std::size_t parameter_count() const { return store_.parameter_count(); }

    // encoder + decoder over already-embedded features
    BranchState<T> mmff_forward(const Tensor<T>& embedded_a, const Tensor<T>& embedded_b,
                                const ForwardOptions& opts = {}, ForwardTrace<T>* trace = nullptr) const {
        BranchState<T> st;
        Tensor<T> a = embedded_a;
        Tensor<T> b = embedded_b;
        for (std::size_t level = 0; level < 4; ++level) {
            if (trace)
                trace->encoder_levels.push_back(
                    {a.extent(0), {a.extent(1), a.extent(2), a.extent(3)}});
            for (std::size_t blk = 0; blk < cfg_.blocks_per_level; ++blk) {
                const std::string tag = "enc" + std::to_string(level) + ".blk" + std::to_string(blk);
                // both branches read the same snapshot
                Tensor<T> a2 = dcfb_forward(a, b, enc_[level].blocks_a[blk], cfg_.window,
                                            cfg_.heads_per_level[level], cfg_.offset_kernel, opts, trace,
                                            (tag + ".a").c_str());
                Tensor<T> b2 = dcfb_forward(b, a, enc_[level].blocks_b[blk], cfg_.window,
                                            cfg_.heads_per_level[level], cfg_.offset_kernel, opts, trace,
                                            (tag + ".b").c_str());
                a = a2;
                b = b2;
            }
            st.a_enc.push_back(a);
            st.b_enc.push_back(b);
            if (level < 3) {
                a = downsample(a, enc_[level].down_a.w, enc_[level].down_a.b);
                b = downsample(b, enc_[level].down_b.w, enc_[level].down_b.b);
            }
        }

        Tensor<T> da = st.a_enc[3];
        Tensor<T> db = st.b_enc[3];
        for (std::size_t di = 0; di < 3; ++di) {
            const std::size_t level = 2 - di;  // decode 2, 1, 0
            const std::size_t c = cfg_.level_channels[level];
            const auto& dw = dec_[di];
            da = conv3d(upsample_trilinear2x(da), dw.up_a.w, dw.up_a.b, make_conv_spec(2 * c, c, 1));
            db = conv3d(upsample_trilinear2x(db), dw.up_b.w, dw.up_b.b, make_conv_spec(2 * c, c, 1));
            // skip concatenation from the matching encoder level of both branches
            da = conv3d(concat<T>({da, st.a_enc[level], st.b_enc[level]}, 0), dw.red_a.w, dw.red_a.b,
                        make_conv_spec(3 * c, c, 1));
            db = conv3d(concat<T>({db, st.b_enc[level], st.a_enc[level]}, 0), dw.red_b.w, dw.red_b.b,
                        make_conv_spec(3 * c, c, 1));
            for (std::size_t blk = 0; blk < cfg_.blocks_per_level; ++blk) {
                const std::string tag = "dec" + std::to_string(level) + ".blk" + std::to_string(blk);
                Tensor<T> a2 = dcfb_forward(da, db, dw.blocks_a[blk], cfg_.window, cfg_.heads_per_level[level],
                                            cfg_.offset_kernel, opts, trace, (tag + ".a").c_str());
                Tensor<T> b2 = dcfb_forward(db, da, dw.blocks_b[blk], cfg_.window, cfg_.heads_per_level[level],
                                            cfg_.offset_kernel, opts, trace, (tag + ".b").c_str());
                da = a2;
                db = b2;
            }
        }
        st.a_out = da;
        st.b_out = db;
        return st;
    }

    Tensor<T> forward(const Tensor<T>& mri, const Tensor<T>& pet, const ForwardOptions& opts = {},
                      ForwardTrace<T>* trace = nullptr) const {
        if (mri.shape() != pet.shape()) throw ShapeError("forward: modality shapes differ");
        if (mri.dim() != 4 || mri.extent(0) != cfg_.in_channels)
            throw ShapeError("forward: expected [" + std::to_string(cfg_.in_channels) + ",X,Y,Z] input");
        cfg_.validate_input({mri.extent(1), mri.extent(2), mri.extent(3)});

        Tensor<T> ea = patch_embed(mri, embed_a_.w, embed_a_.b, cfg_.patch, cfg_.base_embed);
        Tensor<T> eb = patch_embed(pet, embed_b_.w, embed_b_.b, cfg_.patch, cfg_.base_embed);
        BranchState<T> st = mmff_forward(ea, eb, opts, trace);

        const std::size_t c0 = cfg_.level_channels[0];
        Tensor<T> f = concat<T>({st.a_out, st.b_out}, 0);
        f = conv3d(f, fus1_.w, fus1_.b, {2 * c0, c0, {3, 3, 3}, {1, 1, 1}, {1, 1, 1}, 1});
        f = gelu(f);
        f = conv3d(f, fus2_.w, fus2_.b, {c0, c0, {3, 3, 3}, {1, 1, 1}, {1, 1, 1}, 1});
        f = conv3d(f, fus3_.w, fus3_.b, make_conv_spec(c0, 1, 1));
        for (std::size_t p = cfg_.patch; p > 1; p /= 2) f = upsample_trilinear2x(f);
        if (opts.clamp_output) f = clamp(f, T(0), T(1));
        return f;
    }

    // ----- checkpoint: magic "DCF1", config, then parameters in registration
    // order as float32 little-endian with shape headers. Bit-exact round trip.

    void save(const std::string& path) const {
        std::ofstream os(path, std::ios::binary);
        if (!os) throw DataError("cannot write checkpoint: " + path);
        save_stream(os);
        if (!os) throw DataError("checkpoint write failed: " + path);
    }

    void save_stream(std::ostream& os) const {
        wire::put_magic(os, "DCF1");
        wire::put_u32(os, 1);  // version
        wire::put_u32(os, static_cast<std::uint32_t>(cfg_.in_channels));
        wire::put_u32(os, static_cast<std::uint32_t>(cfg_.patch));
        wire::put_u32(os, static_cast<std::uint32_t>(cfg_.base_embed));
        wire::put_u32(os, static_cast<std::uint32_t>(cfg_.level_channels.size()));
        for (std::size_t c : cfg_.level_channels) wire::put_u32(os, static_cast<std::uint32_t>(c));
        for (std::size_t h : cfg_.heads_per_level) wire::put_u32(os, static_cast<std::uint32_t>(h));
        wire::put_u32(os, static_cast<std::uint32_t>(cfg_.blocks_per_level));
        for (std::size_t w : cfg_.window) wire::put_u32(os, static_cast<std::uint32_t>(w));
        wire::put_u32(os, static_cast<std::uint32_t>(cfg_.offset_kernel));
        wire::put_u64(os, store_.items().size());
        for (const auto& p : store_.items()) {
            wire::put_u32(os, static_cast<std::uint32_t>(p.tensor.dim()));
            for (std::size_t e : p.tensor.shape()) wire::put_u32(os, static_cast<std::uint32_t>(e));
            for (T v : p.tensor.values()) wire::put_f32(os, static_cast<float>(v));
        }
    }

    static FusionModel load(const std::string& path) {
        std::ifstream is(path, std::ios::binary);
        if (!is) throw DataError("cannot open checkpoint: " + path);
        return load_stream(is);
    }

    static FusionModel load_stream(std::istream& is) {
        wire::expect_magic(is, "DCF1", "checkpoint");
        if (wire::get_u32(is, "checkpoint version") != 1) throw DataError("unsupported checkpoint version");
        ModelConfig cfg;
        cfg.in_channels = wire::get_u32(is, "config");
        cfg.patch = wire::get_u32(is, "config");
        cfg.base_embed = wire::get_u32(is, "config");
        const std::uint32_t levels = wire::get_u32(is, "config");
        if (levels != 4) throw DataError("unsupported level count in checkpoint");
        cfg.level_channels.resize(levels);
        cfg.heads_per_level.resize(levels);
        for (auto& c : cfg.level_channels) c = wire::get_u32(is, "config");
        for (auto& h : cfg.heads_per_level) h = wire::get_u32(is, "config");
        cfg.blocks_per_level = wire::get_u32(is, "config");
        for (auto& w : cfg.window) w = wire::get_u32(is, "config");
        cfg.offset_kernel = wire::get_u32(is, "config");

        FusionModel model(cfg, 0);
        const std::uint64_t count = wire::get_u64(is, "tensor count");
        if (count != model.store_.items().size()) throw DataError("checkpoint tensor count mismatch");
        for (auto& p : model.store_.items()) {
            const std::uint32_t rank = wire::get_u32(is, "tensor rank");
            Shape shape(rank);
            for (auto& e : shape) e = wire::get_u32(is, "tensor shape");
            if (shape != p.tensor.shape())
                throw DataError("checkpoint shape mismatch for parameter " + p.name);
            T* dst = p.tensor.data();
            for (std::size_t i = 0; i < p.tensor.numel(); ++i)
                dst[i] = static_cast<T>(wire::get_f32(is, "tensor payload"));
        }
        return model;
    }

private:
    struct EncLevel {
        std::vector<DcfbWeights<T>> blocks_a, blocks_b;
        ConvWeights<T> down_a, down_b;  // absent on the last level
    };
    struct DecLevel {
        ConvWeights<T> up_a, up_b;    // 1x1x1 after trilinear x2, halves channels
        ConvWeights<T> red_a, red_b;  // 1x1x1 over (decoder, skip A, skip B)
        std::vector<DcfbWeights<T>> blocks_a, blocks_b;
    };

    ConvWeights<T> make_conv(const std::string& name, std::size_t out_c, std::size_t in_c_per_group,
                             std::size_t k, Rng& rng) {
        const double bound = 1.0 / std::sqrt(static_cast<double>(in_c_per_group * k * k * k));
        ConvWeights<T> w;
        w.w = store_.create_uniform(name + ".w", {out_c, in_c_per_group, k, k, k}, bound, rng);
        w.b = store_.create_const(name + ".b", {out_c}, T(0));
        return w;
    }

    DcfbWeights<T> make_dcfb(const std::string& name, std::size_t c, Rng& rng) {
        DcfbWeights<T> w;
        const std::size_t k = cfg_.offset_kernel;
        const double dw_bound = 1.0 / std::sqrt(static_cast<double>(k * k * k));
        w.pre.dw_w = store_.create_uniform(name + ".pre.dw.w", {2 * c, 1, k, k, k}, dw_bound, rng);
        w.pre.dw_b = store_.create_const(name + ".pre.dw.b", {2 * c}, T(0));
        // zero init: offsets are identically zero at step 0
        w.pre.pw_w = store_.create_const(name + ".pre.pw.w", {3, 2 * c, 1, 1, 1}, T(0));
        w.pre.pw_b = store_.create_const(name + ".pre.pw.b", {3}, T(0));

        w.ln_q_g = store_.create_const(name + ".ln_q.g", {c}, T(1));
        w.ln_q_b = store_.create_const(name + ".ln_q.b", {c}, T(0));
        w.ln_kv_g = store_.create_const(name + ".ln_kv.g", {c}, T(1));
        w.ln_kv_b = store_.create_const(name + ".ln_kv.b", {c}, T(0));

        const double abound = 1.0 / std::sqrt(static_cast<double>(c));
        w.attn.wq = store_.create_uniform(name + ".attn.wq", {c, c}, abound, rng);
        w.attn.bq = store_.create_const(name + ".attn.bq", {c}, T(0));
        w.attn.wk = store_.create_uniform(name + ".attn.wk", {c, c}, abound, rng);
        w.attn.bk = store_.create_const(name + ".attn.bk", {c}, T(0));
        w.attn.wv = store_.create_uniform(name + ".attn.wv", {c, c}, abound, rng);
        w.attn.bv = store_.create_const(name + ".attn.bv", {c}, T(0));
        w.attn.wo = store_.create_uniform(name + ".attn.wo", {c, c}, abound, rng);
        w.attn.bo = store_.create_const(name + ".attn.bo", {c}, T(0));

        w.ln_f_g = store_.create_const(name + ".ln_f.g", {c}, T(1));
        w.ln_f_b = store_.create_const(name + ".ln_f.b", {c}, T(0));
        w.ffn1_w = store_.create_uniform(name + ".ffn1.w", {4 * c, c, 1, 1, 1}, abound, rng);
        w.ffn1_b = store_.create_const(name + ".ffn1.b", {4 * c}, T(0));
        const double fbound = 1.0 / std::sqrt(static_cast<double>(4 * c));
        w.ffn2_w = store_.create_uniform(name + ".ffn2.w", {c, 4 * c, 1, 1, 1}, fbound, rng);
        w.ffn2_b = store_.create_const(name + ".ffn2.b", {c}, T(0));
        return w;
    }

    void build(Rng& rng) {
        embed_a_ = make_conv("embed.a", cfg_.base_embed, cfg_.in_channels, cfg_.patch, rng);
        embed_b_ = make_conv("embed.b", cfg_.base_embed, cfg_.in_channels, cfg_.patch, rng);
        enc_.resize(4);
        for (std::size_t level = 0; level < 4; ++level) {
            const std::size_t c = cfg_.level_channels[level];
            const std::string base = "enc" + std::to_string(level);
            for (std::size_t blk = 0; blk < cfg_.blocks_per_level; ++blk) {
                enc_[level].blocks_a.push_back(make_dcfb(base + ".a.blk" + std::to_string(blk), c, rng));
                enc_[level].blocks_b.push_back(make_dcfb(base + ".b.blk" + std::to_string(blk), c, rng));
            }
            if (level < 3) {
                enc_[level].down_a = make_conv(base + ".down.a", 2 * c, c, 2, rng);
                enc_[level].down_b = make_conv(base + ".down.b", 2 * c, c, 2, rng);
            }
        }
        dec_.resize(3);
        for (std::size_t di = 0; di < 3; ++di) {
            const std::size_t level = 2 - di;
            const std::size_t c = cfg_.level_channels[level];
            const std::string base = "dec" + std::to_string(level);
            dec_[di].up_a = make_conv(base + ".up.a", c, 2 * c, 1, rng);
            dec_[di].up_b = make_conv(base + ".up.b", c, 2 * c, 1, rng);
            dec_[di].red_a = make_conv(base + ".red.a", c, 3 * c, 1, rng);
            dec_[di].red_b = make_conv(base + ".red.b", c, 3 * c, 1, rng);
            for (std::size_t blk = 0; blk < cfg_.blocks_per_level; ++blk) {
                dec_[di].blocks_a.push_back(make_dcfb(base + ".a.blk" + std::to_string(blk), c, rng));
                dec_[di].blocks_b.push_back(make_dcfb(base + ".b.blk" + std::to_string(blk), c, rng));
            }
        }
        const std::size_t c0 = cfg_.level_channels[0];
        fus1_ = make_conv("fusion.conv1", c0, 2 * c0, 3, rng);
        fus2_ = make_conv("fusion.conv2", c0, c0, 3, rng);
        fus3_ = make_conv("fusion.conv3", 1, c0, 1, rng);
    }

public:
    // test access to structured weights
    const ConvWeights<T>& embed_weights_a() const { return embed_a_; }
    const ConvWeights<T>& embed_weights_b() const { return embed_b_; }
    const DcfbWeights<T>& encoder_block(std::size_t level, std::size_t blk, bool branch_a) const {
        return branch_a ? enc_[level].blocks_a[blk] : enc_[level].blocks_b[blk];
    }

private:
    ModelConfig cfg_;
    ParamStore<T> store_;
    ConvWeights<T> embed_a_, embed_b_;
    std::vector<EncLevel> enc_;
    std::vector<DecLevel> dec_;
    ConvWeights<T> fus1_, fus2_, fus3_;
};

}  // namespace dc2f
