#pragma once

#include <optional>
#include <vector>

#include "arsdm/denoiser.hpp"
#include "arsdm/schedule.hpp"

namespace arsdm {

enum class SamplerKind { ddpm, ddim };

struct SamplerConfig {
    SamplerKind kind = SamplerKind::ddim;
    int num_steps = 200;   // DDIM subsequence length; ignored by ddpm
    double eta = 0.0;      // DDIM stochasticity; 0 draws no noise
    bool clamp_x0 = true;  // clip predicted x0 to [-1,1] before recombination
};

// Ancestral update: x_{i-1} = (x_i - (1-a_i)/sqrt(1-abar_i) * eps) / sqrt(a_i) + sigma_i z.
// z must be all-zero when i == 1.
Tensor ddpm_step(const Tensor& x_i, int i, const Tensor& eps_pred, const Tensor& z,
                 const NoiseSchedule& sched);

// DDIM update with abar(0) := 1. eta = 0 is deterministic.
Tensor ddim_step(const Tensor& x_t, int t, int t_prev, const Tensor& eps_pred,
                 const Tensor& z, double eta, bool clamp_x0, const NoiseSchedule& sched);

// Tape variants used inside the differentiable refinement rollout.
VarId ddpm_step_node(Tape& tape, VarId x, int i, VarId eps_pred, const Tensor* z,
                     const NoiseSchedule& sched);
VarId ddim_step_node(Tape& tape, VarId x, int t, int t_prev, VarId eps_pred,
                     const Tensor* z, double eta, bool clamp_x0, const NoiseSchedule& sched);

// Per-item DDIM update where each batch item sits at its own (t, t_prev).
// Items with t == 0 pass through unchanged (exhausted chains). If
// eps_pred_const is non-null the prediction is treated as a constant
// (detached); otherwise eps_pred_var is used.
VarId ddim_step_node_per_item(Tape& tape, VarId x, const std::vector<int>& t,
                              const std::vector<int>& t_prev, VarId eps_pred_var,
                              const Tensor* eps_pred_const, const Tensor* z, double eta,
                              bool clamp_x0, const NoiseSchedule& sched);

// Evenly spaced descending timestep subsequence from t_start to 1, endpoints
// included; length min(num_steps, t_start).
std::vector<int> ddim_timesteps(int t_start, int num_steps);

struct SampleStart {
    Tensor x;
    int t;
};

// Reverse-process generation conditioned on a mask. Starts from pure noise at
// T, or from (start->x, start->t) when given (refinement entry point).
Tensor sample(const Denoiser& model, const ParamVector& params, const Tensor& mask,
              const SamplerConfig& cfg, const NoiseSchedule& sched, Rng& rng,
              const SampleStart* start = nullptr);

} // namespace arsdm
