#pragma once

#include <vector>

#include "arsdm/autodiff.hpp"
#include "arsdm/tensor.hpp"

namespace arsdm {

// Per-pixel adaptive weights: polyp pixels carry (1 - r), background pixels
// carry r, where r is the per-item polyp area ratio. r is clamped into
// [r_clamp, 1 - r_clamp] so degenerate masks cannot zero out the loss.
struct WeightMap {
    Tensor weights;            // [B,1,H,W]
    std::vector<double> ratio; // effective (possibly clamped) r per item
};

WeightMap weight_map(const Tensor& mask, double r_clamp = 0.01);

// mean over batch, channels and pixels of ||eps - eps_pred||^2
double conditional_loss(const Tensor& eps, const Tensor& eps_pred);

// mean of W .* ||eps - eps_pred||^2 with the weight map broadcast across
// channels; reduction order is pixel-major, then channel, then batch.
double adaptive_loss(const Tensor& eps, const Tensor& eps_pred, const WeightMap& wmap);

// soft IoU (smoothing 1) plus clamped pixel-mean BCE, batch-meaned
double seg_loss(const Tensor& pred_prob, const Tensor& target);

// seg_loss(cg) + seg_loss(c3) + seg_loss(c4) + seg_loss(c5), all against the
// conditioning mask; side outputs must already be at full resolution.
struct SegOutputs; // defined in seg_oracle.hpp
double refine_loss(const SegOutputs& outputs, const Tensor& mask);

double total_loss(double adaptive, double refine);

constexpr double kIouSmooth = 1.0;
constexpr double kBceClamp = 1e-7;

} // namespace arsdm
