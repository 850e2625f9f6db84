#include "arsdm/seg_oracle.hpp"

#include <cmath>
#include <stdexcept>

namespace arsdm {

void SegConfig::validate() const {
    if (base_channels <= 0 || groups <= 0 || base_channels % groups != 0)
        throw std::invalid_argument("seg_oracle: base_channels must be a positive multiple of groups");
    if (in_channels <= 0) throw std::invalid_argument("seg_oracle: in_channels must be positive");
}

namespace {

std::string stage_name(int i, const char* part) {
    return "stage" + std::to_string(i) + "." + part;
}

} // namespace

SegOracle::SegOracle(SegConfig config) : config_(config) {
    config_.validate();
    const int C = config_.base_channels;
    const int F = 2 * C;

    layout_.add("stem.w", Shape{C, config_.in_channels, 3, 3});
    layout_.add("stem.b", Shape{C, 1, 1, 1});
    layout_.add("stem.gn.g", Shape{C, 1, 1, 1});
    layout_.add("stem.gn.b", Shape{C, 1, 1, 1});

    for (int i = 1; i <= 3; ++i) {
        const int cin = C << (i - 1), cout = C << i;
        layout_.add(stage_name(i, "gn1.g"), Shape{cin, 1, 1, 1});
        layout_.add(stage_name(i, "gn1.b"), Shape{cin, 1, 1, 1});
        layout_.add(stage_name(i, "conv1.w"), Shape{cout, cin, 3, 3});
        layout_.add(stage_name(i, "conv1.b"), Shape{cout, 1, 1, 1});
        layout_.add(stage_name(i, "gn2.g"), Shape{cout, 1, 1, 1});
        layout_.add(stage_name(i, "gn2.b"), Shape{cout, 1, 1, 1});
        layout_.add(stage_name(i, "conv2.w"), Shape{cout, cout, 3, 3});
        layout_.add(stage_name(i, "conv2.b"), Shape{cout, 1, 1, 1});
        layout_.add(stage_name(i, "skip.w"), Shape{cout, cin, 1, 1});
        layout_.add(stage_name(i, "skip.b"), Shape{cout, 1, 1, 1});
    }

    layout_.add("head3.w", Shape{1, 2 * C, 1, 1});
    layout_.add("head3.b", Shape{1, 1, 1, 1});
    layout_.add("head4.w", Shape{1, 4 * C, 1, 1});
    layout_.add("head4.b", Shape{1, 1, 1, 1});
    layout_.add("head5.w", Shape{1, 8 * C, 1, 1});
    layout_.add("head5.b", Shape{1, 1, 1, 1});

    layout_.add("lat3.w", Shape{F, 2 * C, 1, 1});
    layout_.add("lat3.b", Shape{F, 1, 1, 1});
    layout_.add("lat4.w", Shape{F, 4 * C, 1, 1});
    layout_.add("lat4.b", Shape{F, 1, 1, 1});
    layout_.add("lat5.w", Shape{F, 8 * C, 1, 1});
    layout_.add("lat5.b", Shape{F, 1, 1, 1});
    layout_.add("fuse.conv.w", Shape{F, F, 3, 3});
    layout_.add("fuse.conv.b", Shape{F, 1, 1, 1});
    layout_.add("fuse.gn.g", Shape{F, 1, 1, 1});
    layout_.add("fuse.gn.b", Shape{F, 1, 1, 1});
    layout_.add("headg.w", Shape{1, F, 1, 1});
    layout_.add("headg.b", Shape{1, 1, 1, 1});

    for (size_t i = 0; i < layout_.block_count(); ++i)
        index_.emplace(layout_.block(i).name, i);
}

size_t SegOracle::idx(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::logic_error("seg_oracle: unknown block " + name);
    return it->second;
}

ParamVector SegOracle::init_params(Rng& rng) const {
    ParamVector p(layout_.total(), 0.0);
    int last_fan_in = 1;
    for (size_t i = 0; i < layout_.block_count(); ++i) {
        const auto& b = layout_.block(i);
        Tensor t(b.shape);
        const bool is_gn = b.name.find(".gn") != std::string::npos ||
                           b.name.find("gn1") != std::string::npos ||
                           b.name.find("gn2") != std::string::npos;
        if (is_gn) {
            if (b.name.back() == 'g') std::fill(t.v.begin(), t.v.end(), 1.0);
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

SegVars SegOracle::forward(Tape& tape, const BoundParams& p, VarId x) const {
    const Tensor& vx = tape.val(x);
    if (vx.shape.c != config_.in_channels)
        throw std::invalid_argument("seg_oracle: input channel mismatch");
    const int H = vx.shape.h, W = vx.shape.w;
    const int G = config_.groups;
    auto P = [&](const std::string& name) { return p[idx(name)]; };

    auto res_block = [&](VarId h, int i) {
        VarId r = conv2d(tape, h, P(stage_name(i, "skip.w")), P(stage_name(i, "skip.b")), 2, 0);
        VarId y = group_norm(tape, h, P(stage_name(i, "gn1.g")), P(stage_name(i, "gn1.b")), G);
        y = silu(tape, y);
        y = conv2d(tape, y, P(stage_name(i, "conv1.w")), P(stage_name(i, "conv1.b")), 2, 1);
        y = group_norm(tape, y, P(stage_name(i, "gn2.g")), P(stage_name(i, "gn2.b")), G);
        y = silu(tape, y);
        y = conv2d(tape, y, P(stage_name(i, "conv2.w")), P(stage_name(i, "conv2.b")), 1, 1);
        return add(tape, y, r);
    };

    VarId s0 = conv2d(tape, x, P("stem.w"), P("stem.b"), 2, 1);
    s0 = group_norm(tape, s0, P("stem.gn.g"), P("stem.gn.b"), G);
    s0 = silu(tape, s0);

    VarId e1 = res_block(s0, 1);
    VarId e2 = res_block(e1, 2);
    VarId e3 = res_block(e2, 3);

    VarId logits3 = conv2d(tape, e1, P("head3.w"), P("head3.b"), 1, 0);
    VarId logits4 = conv2d(tape, e2, P("head4.w"), P("head4.b"), 1, 0);
    VarId logits5 = conv2d(tape, e3, P("head5.w"), P("head5.b"), 1, 0);

    // top-down fusion at the stride-4 stage
    VarId f5 = conv2d(tape, e3, P("lat5.w"), P("lat5.b"), 1, 0);
    VarId f4 = conv2d(tape, e2, P("lat4.w"), P("lat4.b"), 1, 0);
    VarId f3 = conv2d(tape, e1, P("lat3.w"), P("lat3.b"), 1, 0);
    const Tensor& ve2 = tape.val(e2);
    const Tensor& ve1 = tape.val(e1);
    f4 = add(tape, f4, resize_bilinear(tape, f5, ve2.shape.h, ve2.shape.w));
    f3 = add(tape, f3, resize_bilinear(tape, f4, ve1.shape.h, ve1.shape.w));
    VarId fused = conv2d(tape, f3, P("fuse.conv.w"), P("fuse.conv.b"), 1, 1);
    fused = group_norm(tape, fused, P("fuse.gn.g"), P("fuse.gn.b"), G);
    fused = silu(tape, fused);
    VarId logits_g = conv2d(tape, fused, P("headg.w"), P("headg.b"), 1, 0);

    SegVars out;
    out.c3 = sigmoid(tape, logits3);
    out.c4 = sigmoid(tape, logits4);
    out.c5 = sigmoid(tape, logits5);
    out.c3_up = sigmoid(tape, resize_bilinear(tape, logits3, H, W));
    out.c4_up = sigmoid(tape, resize_bilinear(tape, logits4, H, W));
    out.c5_up = sigmoid(tape, resize_bilinear(tape, logits5, H, W));
    out.cg = sigmoid(tape, resize_bilinear(tape, logits_g, H, W));
    return out;
}

SegOutputs SegOracle::forward_eager(const ParamVector& params, const Tensor& x) const {
    Tape tape;
    BoundParams bound = bind_params(tape, layout_, params, false);
    VarId xx = tape.leaf(x, false);
    SegVars v = forward(tape, bound, xx);
    SegOutputs out;
    out.c3 = tape.val(v.c3);
    out.c4 = tape.val(v.c4);
    out.c5 = tape.val(v.c5);
    out.c3_up = tape.val(v.c3_up);
    out.c4_up = tape.val(v.c4_up);
    out.c5_up = tape.val(v.c5_up);
    out.cg = tape.val(v.cg);
    return out;
}

} // namespace arsdm
