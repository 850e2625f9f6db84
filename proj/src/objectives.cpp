#include "arsdm/objectives.hpp"

#include <cmath>
#include <stdexcept>

#include "arsdm/seg_oracle.hpp"

namespace arsdm {

WeightMap weight_map(const Tensor& mask, double r_clamp) {
    if (mask.shape.c != 1) throw std::invalid_argument("weight_map: mask must be [B,1,H,W]");
    if (!(r_clamp >= 0.0 && r_clamp < 0.5))
        throw std::invalid_argument("weight_map: r_clamp must be in [0, 0.5)");
    require_binary(mask, "weight_map");

    const int B = mask.shape.n;
    const size_t hw = size_t(mask.shape.h) * mask.shape.w;
    WeightMap wm;
    wm.weights = Tensor(mask.shape);
    wm.ratio.resize(B);
    for (int n = 0; n < B; ++n) {
        const double* m = mask.plane(n, 0);
        double count = 0.0;
        for (size_t i = 0; i < hw; ++i) count += m[i];
        double r = count / double(hw);
        r = std::min(1.0 - r_clamp, std::max(r_clamp, r));
        wm.ratio[n] = r;
        double* w = wm.weights.plane(n, 0);
        for (size_t i = 0; i < hw; ++i) w[i] = (m[i] == 1.0) ? (1.0 - r) : r;
    }
    return wm;
}

namespace {

// Single fixed reduction: pixels innermost, then channels, then batch.
double weighted_sq_mean(const Tensor& eps, const Tensor& eps_pred, const Tensor* weight) {
    require_same_shape(eps, eps_pred, "loss");
    const int B = eps.shape.n, C = eps.shape.c;
    const size_t hw = size_t(eps.shape.h) * eps.shape.w;
    double acc = 0.0;
    for (int n = 0; n < B; ++n)
        for (int c = 0; c < C; ++c) {
            const double* a = eps.plane(n, c);
            const double* b = eps_pred.plane(n, c);
            const double* w = weight ? weight->plane(n, 0) : nullptr;
            for (size_t i = 0; i < hw; ++i) {
                double d = a[i] - b[i];
                acc += (w ? w[i] : 1.0) * d * d;
            }
        }
    return acc / double(eps.numel());
}

} // namespace

double conditional_loss(const Tensor& eps, const Tensor& eps_pred) {
    return weighted_sq_mean(eps, eps_pred, nullptr);
}

double adaptive_loss(const Tensor& eps, const Tensor& eps_pred, const WeightMap& wmap) {
    if (wmap.weights.shape.n != eps.shape.n || wmap.weights.shape.h != eps.shape.h ||
        wmap.weights.shape.w != eps.shape.w)
        throw std::invalid_argument("adaptive_loss: weight map shape mismatch");
    return weighted_sq_mean(eps, eps_pred, &wmap.weights);
}

double seg_loss(const Tensor& pred_prob, const Tensor& target) {
    Tape tape;
    VarId p = tape.leaf(pred_prob, false);
    return tape.val(seg_loss_node(tape, p, target, kIouSmooth, kBceClamp)).v[0];
}

double refine_loss(const SegOutputs& outputs, const Tensor& mask) {
    return seg_loss(outputs.cg, mask) + seg_loss(outputs.c3_up, mask) +
           seg_loss(outputs.c4_up, mask) + seg_loss(outputs.c5_up, mask);
}

double total_loss(double adaptive, double refine) {
    if (!std::isfinite(adaptive) || !std::isfinite(refine))
        throw std::invalid_argument("total_loss: non-finite input");
    return adaptive + refine;
}

} // namespace arsdm
