#pragma once

#include <map>
#include <string>
#include <vector>

#include "arsdm/params.hpp"

namespace arsdm {

struct SegConfig {
    int in_channels = 3;
    int base_channels = 16;
    int groups = 8;

    void validate() const;
};

// Multi-scale probability maps: three side outputs at nominal strides
// 4 / 8 / 16 plus a fused global map. Side outputs come both at native
// resolution and bilinearly upsampled to the input resolution.
struct SegOutputs {
    Tensor c3, c4, c5;             // native resolution
    Tensor c3_up, c4_up, c5_up;    // input resolution
    Tensor cg;                     // input resolution
};

struct SegVars {
    VarId c3, c4, c5;
    VarId c3_up, c4_up, c5_up;
    VarId cg;
};

// Desk-scale segmentation network with the side-output signature of the
// PraNet family: a shared stride-2 encoder with 1x1 prediction heads per
// stage and a top-down fused global head. Fully differentiable with respect
// to parameters and to the input image.
class SegOracle {
public:
    explicit SegOracle(SegConfig config);

    const SegConfig& config() const { return config_; }
    const ParamLayout& layout() const { return layout_; }

    ParamVector init_params(Rng& rng) const;

    SegVars forward(Tape& tape, const BoundParams& p, VarId x) const;
    SegOutputs forward_eager(const ParamVector& params, const Tensor& x) const;

private:
    SegConfig config_;
    ParamLayout layout_;
    std::map<std::string, size_t> index_;

    size_t idx(const std::string& name) const;
};

} // namespace arsdm
