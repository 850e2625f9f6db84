#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "arsdm/params.hpp"

namespace arsdm {

enum class CondMode { spade, concat };

struct DenoiserConfig {
    int in_channels = 3;
    int base_channels = 32;
    int levels = 3;
    int time_embed_dim = 64;
    int groups = 8;
    CondMode cond_mode = CondMode::spade;

    void validate() const;
};

// Encoder activations captured for the conditioning-locality check: the
// encoder must be a function of (params, x_t, t) only, so these tensors are
// byte-identical across masks.
struct EncoderProbe {
    std::vector<Tensor> activations;
};

// Conditional noise-prediction network: convolution stem plus stride-2
// residual downsampling blocks, mirrored decoder with nearest-neighbor
// upsampling and skip connections. The mask conditions the decoder only,
// via SPADE-style modulated normalization or channel concatenation.
class Denoiser {
public:
    explicit Denoiser(DenoiserConfig config);

    const DenoiserConfig& config() const { return config_; }
    const ParamLayout& layout() const { return layout_; }

    ParamVector init_params(Rng& rng) const;

    // x_t: [B,3,H,W]; t: one timestep per item in [1, max_t]; mask: [B,1,H,W]
    // binary, constant w.r.t. differentiation.
    VarId forward(Tape& tape, const BoundParams& p, VarId x_t, const std::vector<int>& t,
                  const Tensor& mask, int max_t, EncoderProbe* probe = nullptr) const;

    // Forward on a throwaway tape; no gradients.
    Tensor forward_eager(const ParamVector& params, const Tensor& x_t,
                         const std::vector<int>& t, const Tensor& mask, int max_t,
                         EncoderProbe* probe = nullptr) const;

    // Sinusoidal embedding of (1-based) timesteps, shape [B,E,1,1].
    static Tensor timestep_embedding(const std::vector<int>& t, int dim);

private:
    DenoiserConfig config_;
    ParamLayout layout_;
    std::map<std::string, size_t> index_;

    size_t idx(const std::string& name) const;
};

} // namespace arsdm
