#include "arsdm/sampler.hpp"

#include <cmath>
#include <stdexcept>

namespace arsdm {

namespace {

void check_range(int t, const NoiseSchedule& sched, const char* what) {
    if (t < 1 || t > sched.T)
        throw std::invalid_argument(std::string(what) + ": timestep out of range");
}

bool all_zero(const Tensor& z) {
    for (double x : z.v)
        if (x != 0.0) return false;
    return true;
}

// sigma_ddim(t, t_prev) with abar(0) = 1; zero for exhausted items (t == 0).
double ddim_sigma(double eta, int t, int t_prev, const NoiseSchedule& sched) {
    if (eta == 0.0 || t == 0 || t_prev == 0) return 0.0;
    const double at = sched.abar(t), ap = sched.abar(t_prev);
    const double var = (1.0 - ap) / (1.0 - at) * (1.0 - at / ap);
    return eta * std::sqrt(var);
}

} // namespace

VarId ddpm_step_node(Tape& tape, VarId x, int i, VarId eps_pred, const Tensor* z,
                     const NoiseSchedule& sched) {
    check_range(i, sched, "ddpm_step");
    require_same_shape(tape.val(x), tape.val(eps_pred), "ddpm_step");
    if (z) require_same_shape(tape.val(x), *z, "ddpm_step");
    if (i == 1 && z && !all_zero(*z))
        throw std::invalid_argument("ddpm_step: z must be 0 at the final step (i == 1)");

    const double a = sched.alpha_at(i);
    const double abar = sched.abar(i);
    const double c1 = 1.0 / std::sqrt(a);
    const double c2 = -c1 * (1.0 - a) / std::sqrt(1.0 - abar);
    VarId out = add_scaled(tape, scale(tape, x, c1), c2, eps_pred);
    const double sig = sched.sigma_at(i);
    if (z && sig != 0.0 && !all_zero(*z)) {
        Tensor sz = *z;
        for (double& v : sz.v) v *= sig;
        out = add_const(tape, out, sz);
    }
    return out;
}

VarId ddim_step_node(Tape& tape, VarId x, int t, int t_prev, VarId eps_pred,
                     const Tensor* z, double eta, bool clamp_x0, const NoiseSchedule& sched) {
    check_range(t, sched, "ddim_step");
    if (t_prev >= t) throw std::invalid_argument("ddim_step: t_prev must be < t");
    if (t_prev < 0) throw std::invalid_argument("ddim_step: t_prev must be >= 0");
    require_same_shape(tape.val(x), tape.val(eps_pred), "ddim_step");

    const double at = sched.abar(t), ap = sched.abar(t_prev);
    const double sig = ddim_sigma(eta, t, t_prev, sched);
    if (sig * sig > 1.0 - ap + 1e-12)
        throw std::invalid_argument("ddim_step: sigma^2 exceeds 1 - abar(t_prev)");

    // x0_hat = (x - sqrt(1-at) eps) / sqrt(at)
    VarId x0 = scale(tape, add_scaled(tape, x, -std::sqrt(1.0 - at), eps_pred),
                     1.0 / std::sqrt(at));
    if (clamp_x0) x0 = clamp(tape, x0, -1.0, 1.0);
    const double dir = std::sqrt(std::max(0.0, 1.0 - ap - sig * sig));
    VarId out = add_scaled(tape, scale(tape, x0, std::sqrt(ap)), dir, eps_pred);
    if (z && sig != 0.0) {
        require_same_shape(tape.val(x), *z, "ddim_step");
        Tensor sz = *z;
        for (double& v : sz.v) v *= sig;
        out = add_const(tape, out, sz);
    }
    return out;
}

VarId ddim_step_node_per_item(Tape& tape, VarId x, const std::vector<int>& t,
                              const std::vector<int>& t_prev, VarId eps_pred_var,
                              const Tensor* eps_pred_const, const Tensor* z, double eta,
                              bool clamp_x0, const NoiseSchedule& sched) {
    const Tensor& vx = tape.val(x);
    const int B = vx.shape.n;
    if (int(t.size()) != B || int(t_prev.size()) != B)
        throw std::invalid_argument("ddim_step: per-item timestep count != batch");

    std::vector<double> cx(B), ce(B), sig(B);
    std::vector<double> cx2(B), ce2(B);
    for (int n = 0; n < B; ++n) {
        if (t[n] == 0) {
            // exhausted chain: identity
            cx[n] = 1.0; ce[n] = 0.0; cx2[n] = 1.0; ce2[n] = 0.0; sig[n] = 0.0;
            continue;
        }
        check_range(t[n], sched, "ddim_step");
        if (t_prev[n] >= t[n] || t_prev[n] < 0)
            throw std::invalid_argument("ddim_step: t_prev must be in [0, t)");
        const double at = sched.abar(t[n]), ap = sched.abar(t_prev[n]);
        sig[n] = ddim_sigma(eta, t[n], t_prev[n], sched);
        // x0_hat per item, then recombination
        cx[n] = 1.0 / std::sqrt(at);
        ce[n] = -std::sqrt(1.0 - at) / std::sqrt(at);
        cx2[n] = std::sqrt(ap);
        ce2[n] = std::sqrt(std::max(0.0, 1.0 - ap - sig[n] * sig[n]));
    }

    VarId x0;
    if (eps_pred_const)
        x0 = combine_per_item_const(tape, x, cx, *eps_pred_const, ce);
    else
        x0 = combine_per_item(tape, x, cx, eps_pred_var, ce);
    if (clamp_x0) x0 = clamp(tape, x0, -1.0, 1.0);

    VarId out;
    if (eps_pred_const)
        out = combine_per_item_const(tape, x0, cx2, *eps_pred_const, ce2);
    else
        out = combine_per_item(tape, x0, cx2, eps_pred_var, ce2);

    bool any_noise = false;
    for (double s : sig) any_noise = any_noise || s != 0.0;
    if (z && any_noise) {
        Tensor sz = *z;
        const size_t item = sz.numel() / B;
        for (int n = 0; n < B; ++n)
            for (size_t i = 0; i < item; ++i) sz.v[size_t(n) * item + i] *= sig[n];
        out = add_const(tape, out, sz);
    }
    return out;
}

Tensor ddpm_step(const Tensor& x_i, int i, const Tensor& eps_pred, const Tensor& z,
                 const NoiseSchedule& sched) {
    Tape tape;
    VarId x = tape.leaf(x_i, false);
    VarId e = tape.leaf(eps_pred, false);
    return tape.val(ddpm_step_node(tape, x, i, e, &z, sched));
}

Tensor ddim_step(const Tensor& x_t, int t, int t_prev, const Tensor& eps_pred,
                 const Tensor& z, double eta, bool clamp_x0, const NoiseSchedule& sched) {
    Tape tape;
    VarId x = tape.leaf(x_t, false);
    VarId e = tape.leaf(eps_pred, false);
    return tape.val(ddim_step_node(tape, x, t, t_prev, e, &z, eta, clamp_x0, sched));
}

std::vector<int> ddim_timesteps(int t_start, int num_steps) {
    if (t_start < 1) throw std::invalid_argument("ddim_timesteps: t_start must be >= 1");
    if (num_steps < 1) throw std::invalid_argument("ddim_timesteps: num_steps must be >= 1");
    const int n = std::min(num_steps, t_start);
    std::vector<int> ts;
    ts.reserve(n);
    if (n == 1) return {t_start};
    for (int k = 0; k < n; ++k) {
        double v = t_start + (1.0 - t_start) * double(k) / double(n - 1);
        int vi = int(std::lround(v));
        if (ts.empty() || vi < ts.back()) ts.push_back(vi);
    }
    if (ts.back() != 1) ts.push_back(1);
    return ts;
}

Tensor sample(const Denoiser& model, const ParamVector& params, const Tensor& mask,
              const SamplerConfig& cfg, const NoiseSchedule& sched, Rng& rng,
              const SampleStart* start) {
    if (cfg.num_steps < 1 || cfg.num_steps > sched.T)
        throw std::invalid_argument("sample: num_steps must be in [1, T]");
    if (cfg.eta < 0.0 || cfg.eta > 1.0)
        throw std::invalid_argument("sample: eta must be in [0, 1]");

    const int B = mask.shape.n, H = mask.shape.h, W = mask.shape.w;
    Tensor x;
    int t0;
    if (start) {
        x = start->x;
        t0 = start->t;
        check_range(t0, sched, "sample");
    } else {
        x = Tensor(Shape{B, model.config().in_channels, H, W});
        rng.fill_normal(x.v);
        t0 = sched.T;
    }

    Tensor z(x.shape);
    auto predict = [&](int t) {
        return model.forward_eager(params, x, std::vector<int>(size_t(B), t), mask, sched.T);
    };
    auto check_finite = [&](int t) {
        if (!all_finite(x))
            throw std::runtime_error("sample: non-finite state at timestep " + std::to_string(t));
    };

    if (cfg.kind == SamplerKind::ddpm) {
        for (int i = t0; i >= 1; --i) {
            Tensor eps = predict(i);
            if (i > 1)
                rng.fill_normal(z.v);
            else
                std::fill(z.v.begin(), z.v.end(), 0.0);
            x = ddpm_step(x, i, eps, z, sched);
            check_finite(i);
        }
    } else {
        std::vector<int> ts = ddim_timesteps(t0, cfg.num_steps);
        for (size_t k = 0; k < ts.size(); ++k) {
            const int t = ts[k];
            const int t_prev = (k + 1 < ts.size()) ? ts[k + 1] : 0;
            Tensor eps = predict(t);
            const bool noisy = cfg.eta > 0.0 && t_prev > 0;
            if (noisy)
                rng.fill_normal(z.v);
            else
                std::fill(z.v.begin(), z.v.end(), 0.0);
            x = ddim_step(x, t, t_prev, eps, z, cfg.eta, cfg.clamp_x0, sched);
            check_finite(t);
        }
    }
    return x;
}

} // namespace arsdm
