#include "arsdm/schedule.hpp"

#include <cmath>
#include <stdexcept>

namespace arsdm {

NoiseSchedule make_linear_schedule(int T, double beta_start, double beta_end,
                                   SigmaMode sigma_mode) {
    if (T < 1) throw std::invalid_argument("schedule: T must be >= 1");
    if (!std::isfinite(beta_start) || !std::isfinite(beta_end))
        throw std::invalid_argument("schedule: non-finite beta bounds");
    if (!(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0))
        throw std::invalid_argument("schedule: need 0 < beta_start <= beta_end < 1");

    NoiseSchedule s;
    s.T = T;
    s.beta.resize(T);
    s.alpha.resize(T);
    s.alpha_bar.resize(T);
    s.sigma.resize(T);

    for (int i = 0; i < T; ++i)
        s.beta[i] = (T == 1) ? beta_start
                             : beta_start + (beta_end - beta_start) * double(i) / double(T - 1);

    double running = 1.0;
    for (int i = 0; i < T; ++i) {
        s.alpha[i] = 1.0 - s.beta[i];
        running *= s.alpha[i];
        s.alpha_bar[i] = running;
    }

    for (int i = 0; i < T; ++i) {
        if (sigma_mode == SigmaMode::beta) {
            s.sigma[i] = std::sqrt(s.beta[i]);
        } else {
            double abar_prev = (i == 0) ? 1.0 : s.alpha_bar[i - 1];
            double beta_tilde = s.beta[i] * (1.0 - abar_prev) / (1.0 - s.alpha_bar[i]);
            s.sigma[i] = std::sqrt(beta_tilde);
        }
    }
    return s;
}

static void check_t(int t, const NoiseSchedule& sched) {
    if (t < 1 || t > sched.T)
        throw std::invalid_argument("timestep out of range [1, T]");
}

Tensor q_sample(const Tensor& x0, int t, const Tensor& eps, const NoiseSchedule& sched) {
    check_t(t, sched);
    require_same_shape(x0, eps, "q_sample");
    const double abar = sched.abar(t);
    const double a = std::sqrt(abar);
    const double b = std::sqrt(1.0 - abar);
    Tensor out(x0.shape);
    for (size_t i = 0; i < out.v.size(); ++i) out.v[i] = a * x0.v[i] + b * eps.v[i];
    return out;
}

Tensor q_sample_iterated(const Tensor& x0, int t, Rng& rng, const NoiseSchedule& sched) {
    check_t(t, sched);
    Tensor x = x0;
    Tensor z(x0.shape);
    for (int s = 1; s <= t; ++s) {
        rng.fill_normal(z.v);
        const double a = std::sqrt(1.0 - sched.beta_at(s));
        const double b = std::sqrt(sched.beta_at(s));
        for (size_t i = 0; i < x.v.size(); ++i) x.v[i] = a * x.v[i] + b * z.v[i];
    }
    return x;
}

} // namespace arsdm
