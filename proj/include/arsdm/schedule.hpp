#pragma once

#include <vector>

#include "arsdm/rng.hpp"
#include "arsdm/tensor.hpp"

namespace arsdm {

enum class SigmaMode { beta, beta_tilde };

// Per-timestep schedule arrays. Index 0 holds the values for t = 1; accessors
// take 1-based timesteps to match the process definitions.
struct NoiseSchedule {
    int T = 0;
    std::vector<double> beta;      // beta_t
    std::vector<double> alpha;     // 1 - beta_t
    std::vector<double> alpha_bar; // prod_{s<=t} alpha_s
    std::vector<double> sigma;     // reverse-step noise scale

    double beta_at(int t) const { return beta.at(t - 1); }
    double alpha_at(int t) const { return alpha.at(t - 1); }
    double sigma_at(int t) const { return sigma.at(t - 1); }
    // abar(0) == 1 by convention.
    double abar(int t) const { return t == 0 ? 1.0 : alpha_bar.at(t - 1); }
};

NoiseSchedule make_linear_schedule(int T, double beta_start, double beta_end,
                                   SigmaMode sigma_mode);

// Closed-form noising: x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps.
Tensor q_sample(const Tensor& x0, int t, const Tensor& eps, const NoiseSchedule& sched);

// Step-by-step chain x_s = sqrt(1-beta_s) x_{s-1} + sqrt(beta_s) z_s for
// s = 1..t with fresh draws. Verification oracle for q_sample.
Tensor q_sample_iterated(const Tensor& x0, int t, Rng& rng, const NoiseSchedule& sched);

} // namespace arsdm
