#pragma once

#include <functional>
#include <vector>

#include "arsdm/tensor.hpp"

namespace arsdm {

using VarId = int32_t;

class Tape;

// Define-by-run reverse-mode tape. Values are computed eagerly when an op is
// emitted; backward() walks nodes in reverse creation order (creation order
// is a valid topological order by construction). Gradients accumulate, so a
// parameter leaf bound once and used by many ops (e.g. the denoiser called at
// every rollout step) collects the sum of all contributions.
class Tape {
public:
    VarId leaf(Tensor value, bool requires_grad = false);
    VarId emit(Tensor value, bool requires_grad, std::function<void(Tape&)> backprop);

    const Tensor& val(VarId id) const { return nodes_[id].value; }
    bool requires_grad(VarId id) const { return nodes_[id].requires_grad; }

    // Gradient buffer for a node, allocated (zeroed) on first touch.
    Tensor& grad(VarId id);
    bool has_grad(VarId id) const { return !nodes_[id].grad.empty(); }

    // Seeds d(root)/d(root) = 1 (root must be scalar-shaped) and propagates.
    void backward(VarId root);

    size_t size() const { return nodes_.size(); }

private:
    struct Node {
        Tensor value;
        Tensor grad;
        bool requires_grad = false;
        std::function<void(Tape&)> backprop;
    };
    std::vector<Node> nodes_;
};

// ---- elementwise / structural ops ----
VarId add(Tape& t, VarId a, VarId b);
VarId sub(Tape& t, VarId a, VarId b);
VarId mul(Tape& t, VarId a, VarId b);
VarId scale(Tape& t, VarId a, double s);
VarId add_scaled(Tape& t, VarId a, double s, VarId b); // a + s*b
VarId add_const(Tape& t, VarId a, const Tensor& c);
// out_n = ca[n] * a_n + cb[n] * b_n, per-item scalar coefficients
VarId combine_per_item(Tape& t, const Tensor& a_const, const std::vector<double>& ca,
                       VarId b, const std::vector<double>& cb);
VarId combine_per_item(Tape& t, VarId a, const std::vector<double>& ca,
                       VarId b, const std::vector<double>& cb);
VarId combine_per_item_const(Tape& t, VarId a, const std::vector<double>& ca,
                             const Tensor& b_const, const std::vector<double>& cb);
VarId silu(Tape& t, VarId a);
VarId sigmoid(Tape& t, VarId a);
VarId clamp(Tape& t, VarId a, double lo, double hi);
VarId concat_ch(Tape& t, VarId a, VarId b);

// ---- neural-net ops ----
VarId conv2d(Tape& t, VarId x, VarId w, VarId b, int stride, int pad);
// x:[B,Din,1,1]  w:[Dout,Din,1,1]  b:[Dout,1,1,1] -> [B,Dout,1,1]
VarId linear(Tape& t, VarId x, VarId w, VarId b);
// bias:[B,C,1,1] broadcast over H,W
VarId add_channel_bias(Tape& t, VarId x, VarId bias);
VarId group_norm(Tape& t, VarId x, VarId gamma, VarId beta, int groups, double eps = 1e-5);
VarId group_norm_plain(Tape& t, VarId x, int groups, double eps = 1e-5);
VarId upsample_nearest2x(Tape& t, VarId x);
VarId resize_bilinear(Tape& t, VarId x, int oh, int ow);

// ---- loss ops (scalar-valued, shape [1,1,1,1]) ----
// mean over all entries of weight*(pred-target)^2; weight (optional) is
// [B,1,H,W] broadcast across channels. Summation order is pixel-major,
// then channel, then batch item.
VarId weighted_mse(Tape& t, VarId pred, const Tensor& target, const Tensor* weight);
// soft-IoU (smoothing s) plus clamped pixel-mean BCE, batch-meaned.
VarId seg_loss_node(Tape& t, VarId pred_prob, const Tensor& target,
                    double smooth = 1.0, double prob_clamp = 1e-7);

// plain-tensor helpers shared by forward-only code paths
Tensor resize_bilinear_plain(const Tensor& x, int oh, int ow);
Tensor resize_nearest_plain(const Tensor& x, int oh, int ow);

} // namespace arsdm
