#include "arsdm/denoiser.hpp"

#include <cmath>
#include <map>
#include <stdexcept>

namespace arsdm {

void DenoiserConfig::validate() const {
    if (levels < 2) throw std::invalid_argument("denoiser: levels must be >= 2");
    if (base_channels <= 0 || groups <= 0 || base_channels % groups != 0)
        throw std::invalid_argument("denoiser: base_channels must be a positive multiple of groups");
    if (time_embed_dim < 4 || time_embed_dim % 2 != 0)
        throw std::invalid_argument("denoiser: time_embed_dim must be even and >= 4");
    if (in_channels <= 0) throw std::invalid_argument("denoiser: in_channels must be positive");
}

namespace {

std::string enc_name(int i, const char* part) {
    return "enc" + std::to_string(i) + "." + part;
}
std::string dec_name(int i, const char* part) {
    return "dec" + std::to_string(i) + "." + part;
}

} // namespace

Denoiser::Denoiser(DenoiserConfig config) : config_(config) {
    config_.validate();
    const int C = config_.base_channels;
    const int E = config_.time_embed_dim;
    const int hid = C;

    layout_.add("stem.w", Shape{C, config_.in_channels, 3, 3});
    layout_.add("stem.b", Shape{C, 1, 1, 1});
    layout_.add("time.fc1.w", Shape{E, E, 1, 1});
    layout_.add("time.fc1.b", Shape{E, 1, 1, 1});
    layout_.add("time.fc2.w", Shape{E, E, 1, 1});
    layout_.add("time.fc2.b", Shape{E, 1, 1, 1});

    for (int i = 1; i < config_.levels; ++i) {
        const int cin = C << (i - 1), cout = C << i;
        layout_.add(enc_name(i, "gn1.g"), Shape{cin, 1, 1, 1});
        layout_.add(enc_name(i, "gn1.b"), Shape{cin, 1, 1, 1});
        layout_.add(enc_name(i, "conv1.w"), Shape{cout, cin, 3, 3});
        layout_.add(enc_name(i, "conv1.b"), Shape{cout, 1, 1, 1});
        layout_.add(enc_name(i, "temb.w"), Shape{cout, E, 1, 1});
        layout_.add(enc_name(i, "temb.b"), Shape{cout, 1, 1, 1});
        layout_.add(enc_name(i, "gn2.g"), Shape{cout, 1, 1, 1});
        layout_.add(enc_name(i, "gn2.b"), Shape{cout, 1, 1, 1});
        layout_.add(enc_name(i, "conv2.w"), Shape{cout, cout, 3, 3});
        layout_.add(enc_name(i, "conv2.b"), Shape{cout, 1, 1, 1});
        layout_.add(enc_name(i, "skip.w"), Shape{cout, cin, 1, 1});
        layout_.add(enc_name(i, "skip.b"), Shape{cout, 1, 1, 1});
    }

    for (int j = 1; j < config_.levels; ++j) {
        const int below = C << (config_.levels - j);
        const int skip_c = C << (config_.levels - 1 - j);
        const int cat_c = below + skip_c;
        const int cout = skip_c;
        if (config_.cond_mode == CondMode::spade) {
            layout_.add(dec_name(j, "sp1.shared.w"), Shape{hid, 1, 3, 3});
            layout_.add(dec_name(j, "sp1.shared.b"), Shape{hid, 1, 1, 1});
            layout_.add(dec_name(j, "sp1.gamma.w"), Shape{cat_c, hid, 3, 3});
            layout_.add(dec_name(j, "sp1.gamma.b"), Shape{cat_c, 1, 1, 1});
            layout_.add(dec_name(j, "sp1.beta.w"), Shape{cat_c, hid, 3, 3});
            layout_.add(dec_name(j, "sp1.beta.b"), Shape{cat_c, 1, 1, 1});
        } else {
            layout_.add(dec_name(j, "gn1.g"), Shape{cat_c, 1, 1, 1});
            layout_.add(dec_name(j, "gn1.b"), Shape{cat_c, 1, 1, 1});
        }
        const int conv1_in = cat_c + (config_.cond_mode == CondMode::concat ? 1 : 0);
        layout_.add(dec_name(j, "conv1.w"), Shape{cout, conv1_in, 3, 3});
        layout_.add(dec_name(j, "conv1.b"), Shape{cout, 1, 1, 1});
        layout_.add(dec_name(j, "temb.w"), Shape{cout, E, 1, 1});
        layout_.add(dec_name(j, "temb.b"), Shape{cout, 1, 1, 1});
        if (config_.cond_mode == CondMode::spade) {
            layout_.add(dec_name(j, "sp2.shared.w"), Shape{hid, 1, 3, 3});
            layout_.add(dec_name(j, "sp2.shared.b"), Shape{hid, 1, 1, 1});
            layout_.add(dec_name(j, "sp2.gamma.w"), Shape{cout, hid, 3, 3});
            layout_.add(dec_name(j, "sp2.gamma.b"), Shape{cout, 1, 1, 1});
            layout_.add(dec_name(j, "sp2.beta.w"), Shape{cout, hid, 3, 3});
            layout_.add(dec_name(j, "sp2.beta.b"), Shape{cout, 1, 1, 1});
        } else {
            layout_.add(dec_name(j, "gn2.g"), Shape{cout, 1, 1, 1});
            layout_.add(dec_name(j, "gn2.b"), Shape{cout, 1, 1, 1});
        }
        layout_.add(dec_name(j, "conv2.w"), Shape{cout, cout, 3, 3});
        layout_.add(dec_name(j, "conv2.b"), Shape{cout, 1, 1, 1});
        layout_.add(dec_name(j, "skip.w"), Shape{cout, cat_c, 1, 1});
        layout_.add(dec_name(j, "skip.b"), Shape{cout, 1, 1, 1});
    }

    layout_.add("final.gn.g", Shape{C, 1, 1, 1});
    layout_.add("final.gn.b", Shape{C, 1, 1, 1});
    layout_.add("final.conv.w", Shape{config_.in_channels, C, 3, 3});
    layout_.add("final.conv.b", Shape{config_.in_channels, 1, 1, 1});

    for (size_t i = 0; i < layout_.block_count(); ++i)
        index_.emplace(layout_.block(i).name, i);
}

size_t Denoiser::idx(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::logic_error("denoiser: unknown block " + name);
    return it->second;
}

ParamVector Denoiser::init_params(Rng& rng) const {
    ParamVector p(layout_.total(), 0.0);
    int last_fan_in = 1;
    for (size_t i = 0; i < layout_.block_count(); ++i) {
        const auto& b = layout_.block(i);
        Tensor t(b.shape);
        const bool is_gn_gain = b.name.find(".gn") != std::string::npos && b.name.back() == 'g';
        const bool is_gn_bias = b.name.find(".gn") != std::string::npos && b.name.back() == 'b';
        const bool is_final = b.name.rfind("final.conv", 0) == 0;
        if (is_final) {
            // zero-initialized output convolution: the network predicts 0 at init
        } else if (is_gn_gain) {
            std::fill(t.v.begin(), t.v.end(), 1.0);
        } else if (is_gn_bias) {
            // zeros
        } else if (b.name.back() == 'w') {
            last_fan_in = b.shape.c * b.shape.h * b.shape.w;
            fill_uniform_fan_in(t, last_fan_in, rng);
        } else {
            fill_uniform_fan_in(t, last_fan_in, rng);
        }
        std::copy_n(t.v.data(), t.numel(), p.data() + b.offset);
    }
    return p;
}

Tensor Denoiser::timestep_embedding(const std::vector<int>& t, int dim) {
    const int B = int(t.size());
    const int half = dim / 2;
    Tensor emb(Shape{B, dim, 1, 1});
    for (int n = 0; n < B; ++n) {
        for (int i = 0; i < half; ++i) {
            double freq = (half > 1) ? std::exp(-std::log(10000.0) * double(i) / double(half - 1))
                                     : 1.0;
            double arg = double(t[n]) * freq;
            emb.v[size_t(n) * dim + i] = std::sin(arg);
            emb.v[size_t(n) * dim + half + i] = std::cos(arg);
        }
    }
    return emb;
}

VarId Denoiser::forward(Tape& tape, const BoundParams& p, VarId x_t, const std::vector<int>& t,
                        const Tensor& mask, int max_t, EncoderProbe* probe) const {
    const Tensor& vx = tape.val(x_t);
    const int B = vx.shape.n, H = vx.shape.h, W = vx.shape.w;
    const int L = config_.levels;
    if (vx.shape.c != config_.in_channels)
        throw std::invalid_argument("denoiser: input channel mismatch");
    if (H % (1 << (L - 1)) != 0 || W % (1 << (L - 1)) != 0)
        throw std::invalid_argument("denoiser: spatial dims not divisible by 2^(levels-1)");
    if (int(t.size()) != B) throw std::invalid_argument("denoiser: t size != batch");
    for (int ti : t)
        if (ti < 1 || ti > max_t) throw std::invalid_argument("denoiser: timestep out of range");
    if (mask.shape.n != B || mask.shape.c != 1 || mask.shape.h != H || mask.shape.w != W)
        throw std::invalid_argument("denoiser: mask shape mismatch");
    require_binary(mask, "denoiser");

    auto P = [&](const std::string& name) { return p[idx(name)]; };
    const int G = config_.groups;

    // time embedding MLP
    VarId temb = tape.leaf(timestep_embedding(t, config_.time_embed_dim), false);
    temb = linear(tape, temb, P("time.fc1.w"), P("time.fc1.b"));
    temb = silu(tape, temb);
    temb = linear(tape, temb, P("time.fc2.w"), P("time.fc2.b"));

    // encoder
    VarId h = conv2d(tape, x_t, P("stem.w"), P("stem.b"), 1, 1);
    std::vector<VarId> skips{h};
    if (probe) probe->activations.push_back(tape.val(h));
    for (int i = 1; i < L; ++i) {
        VarId r = conv2d(tape, h, P(enc_name(i, "skip.w")), P(enc_name(i, "skip.b")), 2, 0);
        VarId y = group_norm(tape, h, P(enc_name(i, "gn1.g")), P(enc_name(i, "gn1.b")), G);
        y = silu(tape, y);
        y = conv2d(tape, y, P(enc_name(i, "conv1.w")), P(enc_name(i, "conv1.b")), 2, 1);
        VarId tb = linear(tape, temb, P(enc_name(i, "temb.w")), P(enc_name(i, "temb.b")));
        y = add_channel_bias(tape, y, tb);
        y = group_norm(tape, y, P(enc_name(i, "gn2.g")), P(enc_name(i, "gn2.b")), G);
        y = silu(tape, y);
        y = conv2d(tape, y, P(enc_name(i, "conv2.w")), P(enc_name(i, "conv2.b")), 1, 1);
        h = add(tape, y, r);
        skips.push_back(h);
        if (probe) probe->activations.push_back(tape.val(h));
    }

    // masks resized (nearest) per decoder resolution; constant leaves
    std::map<int, VarId> mask_at;
    auto mask_leaf = [&](int res_h, int res_w) {
        auto it = mask_at.find(res_h);
        if (it != mask_at.end()) return it->second;
        Tensor m = (res_h == H && res_w == W) ? mask : resize_nearest_plain(mask, res_h, res_w);
        VarId id = tape.leaf(std::move(m), false);
        mask_at.emplace(res_h, id);
        return id;
    };

    auto spade = [&](VarId y, VarId m, const std::string& prefix) {
        VarId ms = conv2d(tape, m, P(prefix + ".shared.w"), P(prefix + ".shared.b"), 1, 1);
        ms = silu(tape, ms);
        VarId gmm = conv2d(tape, ms, P(prefix + ".gamma.w"), P(prefix + ".gamma.b"), 1, 1);
        VarId bmm = conv2d(tape, ms, P(prefix + ".beta.w"), P(prefix + ".beta.b"), 1, 1);
        VarId yn = group_norm_plain(tape, y, G);
        // yn * (1 + gamma) + beta
        return add(tape, add(tape, yn, mul(tape, yn, gmm)), bmm);
    };

    // decoder
    for (int j = 1; j < L; ++j) {
        h = upsample_nearest2x(tape, h);
        h = concat_ch(tape, h, skips[size_t(L - 1 - j)]);
        const Tensor& hv = tape.val(h);
        VarId m = mask_leaf(hv.shape.h, hv.shape.w);
        VarId r = conv2d(tape, h, P(dec_name(j, "skip.w")), P(dec_name(j, "skip.b")), 1, 0);
        VarId y;
        if (config_.cond_mode == CondMode::spade) {
            y = spade(h, m, dec_name(j, "sp1"));
            y = silu(tape, y);
            y = conv2d(tape, y, P(dec_name(j, "conv1.w")), P(dec_name(j, "conv1.b")), 1, 1);
        } else {
            y = group_norm(tape, h, P(dec_name(j, "gn1.g")), P(dec_name(j, "gn1.b")), G);
            y = silu(tape, y);
            y = concat_ch(tape, y, m);
            y = conv2d(tape, y, P(dec_name(j, "conv1.w")), P(dec_name(j, "conv1.b")), 1, 1);
        }
        VarId tb = linear(tape, temb, P(dec_name(j, "temb.w")), P(dec_name(j, "temb.b")));
        y = add_channel_bias(tape, y, tb);
        if (config_.cond_mode == CondMode::spade) {
            y = spade(y, m, dec_name(j, "sp2"));
        } else {
            y = group_norm(tape, y, P(dec_name(j, "gn2.g")), P(dec_name(j, "gn2.b")), G);
        }
        y = silu(tape, y);
        y = conv2d(tape, y, P(dec_name(j, "conv2.w")), P(dec_name(j, "conv2.b")), 1, 1);
        h = add(tape, y, r);
    }

    VarId y = group_norm(tape, h, P("final.gn.g"), P("final.gn.b"), G);
    y = silu(tape, y);
    return conv2d(tape, y, P("final.conv.w"), P("final.conv.b"), 1, 1);
}

Tensor Denoiser::forward_eager(const ParamVector& params, const Tensor& x_t,
                               const std::vector<int>& t, const Tensor& mask, int max_t,
                               EncoderProbe* probe) const {
    Tape tape;
    BoundParams bound = bind_params(tape, layout_, params, false);
    VarId x = tape.leaf(x_t, false);
    VarId out = forward(tape, bound, x, t, mask, max_t, probe);
    return tape.val(out);
}

} // namespace arsdm
