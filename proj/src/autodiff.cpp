#include "arsdm/autodiff.hpp"

#include <Eigen/Dense>

#include <cmath>
#include <stdexcept>

namespace arsdm {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;

VarId Tape::leaf(Tensor value, bool requires_grad) {
    nodes_.push_back(Node{std::move(value), Tensor{}, requires_grad, nullptr});
    return VarId(nodes_.size() - 1);
}

VarId Tape::emit(Tensor value, bool requires_grad, std::function<void(Tape&)> backprop) {
    Node n;
    n.value = std::move(value);
    n.requires_grad = requires_grad;
    if (requires_grad) n.backprop = std::move(backprop);
    nodes_.push_back(std::move(n));
    return VarId(nodes_.size() - 1);
}

Tensor& Tape::grad(VarId id) {
    Node& n = nodes_[id];
    if (n.grad.empty()) n.grad = Tensor::zeros(n.value.shape);
    return n.grad;
}

void Tape::backward(VarId root) {
    if (nodes_[root].value.numel() != 1)
        throw std::invalid_argument("backward: root must be scalar");
    grad(root).v[0] = 1.0;
    for (VarId i = VarId(nodes_.size()) - 1; i >= 0; --i) {
        Node& n = nodes_[i];
        if (n.requires_grad && n.backprop && !n.grad.empty()) n.backprop(*this);
    }
}

namespace {

bool any_rg(const Tape& t, std::initializer_list<VarId> ids) {
    for (VarId id : ids)
        if (t.requires_grad(id)) return true;
    return false;
}

void accumulate(Tensor& dst, const Tensor& src) {
    for (size_t i = 0; i < dst.v.size(); ++i) dst.v[i] += src.v[i];
}

} // namespace

// ---------------------------------------------------------------------------
// elementwise / structural
// ---------------------------------------------------------------------------

VarId add(Tape& t, VarId a, VarId b) {
    require_same_shape(t.val(a), t.val(b), "add");
    Tensor out = t.val(a);
    const Tensor& vb = t.val(b);
    for (size_t i = 0; i < out.v.size(); ++i) out.v[i] += vb.v[i];
    const VarId self = VarId(t.size());
    return t.emit(std::move(out), any_rg(t, {a, b}), [self, a, b](Tape& tp) {
        const Tensor& g = tp.grad(self);
        if (tp.requires_grad(a)) accumulate(tp.grad(a), g);
        if (tp.requires_grad(b)) accumulate(tp.grad(b), g);
    });
}

VarId sub(Tape& t, VarId a, VarId b) {
    require_same_shape(t.val(a), t.val(b), "sub");
    Tensor out = t.val(a);
    const Tensor& vb = t.val(b);
    for (size_t i = 0; i < out.v.size(); ++i) out.v[i] -= vb.v[i];
    const VarId self = VarId(t.size());
    return t.emit(std::move(out), any_rg(t, {a, b}), [self, a, b](Tape& tp) {
        const Tensor& g = tp.grad(self);
        if (tp.requires_grad(a)) accumulate(tp.grad(a), g);
        if (tp.requires_grad(b)) {
            Tensor& db = tp.grad(b);
            for (size_t i = 0; i < db.v.size(); ++i) db.v[i] -= g.v[i];
        }
    });
}

VarId mul(Tape& t, VarId a, VarId b) {
    require_same_shape(t.val(a), t.val(b), "mul");
    Tensor out = t.val(a);
    const Tensor& vb = t.val(b);
    for (size_t i = 0; i < out.v.size(); ++i) out.v[i] *= vb.v[i];
    const VarId self = VarId(t.size());
    return t.emit(std::move(out), any_rg(t, {a, b}), [self, a, b](Tape& tp) {
        const Tensor& g = tp.grad(self);
        const Tensor& va = tp.val(a);
        const Tensor& vb2 = tp.val(b);
        if (tp.requires_grad(a)) {
            Tensor& da = tp.grad(a);
            for (size_t i = 0; i < da.v.size(); ++i) da.v[i] += g.v[i] * vb2.v[i];
        }
        if (tp.requires_grad(b)) {
            Tensor& db = tp.grad(b);
            for (size_t i = 0; i < db.v.size(); ++i) db.v[i] += g.v[i] * va.v[i];
        }
    });
}

VarId scale(Tape& t, VarId a, double s) {
    Tensor out = t.val(a);
    for (double& x : out.v) x *= s;
    const VarId self = VarId(t.size());
    return t.emit(std::move(out), t.requires_grad(a), [self, a, s](Tape& tp) {
        const Tensor& g = tp.grad(self);
        if (tp.requires_grad(a)) {
            Tensor& da = tp.grad(a);
            for (size_t i = 0; i < da.v.size(); ++i) da.v[i] += g.v[i] * s;
        }
    });
}

VarId add_scaled(Tape& t, VarId a, double s, VarId b) {
    require_same_shape(t.val(a), t.val(b), "add_scaled");
    Tensor out = t.val(a);
    const Tensor& vb = t.val(b);
    for (size_t i = 0; i < out.v.size(); ++i) out.v[i] += s * vb.v[i];
    const VarId self = VarId(t.size());
    return t.emit(std::move(out), any_rg(t, {a, b}), [self, a, b, s](Tape& tp) {
        const Tensor& g = tp.grad(self);
        if (tp.requires_grad(a)) accumulate(tp.grad(a), g);
        if (tp.requires_grad(b)) {
            Tensor& db = tp.grad(b);
            for (size_t i = 0; i < db.v.size(); ++i) db.v[i] += g.v[i] * s;
        }
    });
}

VarId add_const(Tape& t, VarId a, const Tensor& c) {
    require_same_shape(t.val(a), c, "add_const");
    Tensor out = t.val(a);
    for (size_t i = 0; i < out.v.size(); ++i) out.v[i] += c.v[i];
    const VarId self = VarId(t.size());
    return t.emit(std::move(out), t.requires_grad(a), [self, a](Tape& tp) {
        if (tp.requires_grad(a)) accumulate(tp.grad(a), tp.grad(self));
    });
}

static void check_item_coeffs(const Tensor& x, const std::vector<double>& c, const char* what) {
    if (int(c.size()) != x.shape.n)
        throw std::invalid_argument(std::string(what) + ": coefficient count != batch size");
}

VarId combine_per_item(Tape& t, const Tensor& a_const, const std::vector<double>& ca,
                       VarId b, const std::vector<double>& cb) {
    require_same_shape(a_const, t.val(b), "combine_per_item");
    check_item_coeffs(a_const, ca, "combine_per_item");
    check_item_coeffs(a_const, cb, "combine_per_item");
    Tensor out(a_const.shape);
    const Tensor& vb = t.val(b);
    const size_t item = a_const.numel() / a_const.shape.n;
    for (int n = 0; n < out.shape.n; ++n)
        for (size_t i = 0; i < item; ++i) {
            size_t k = n * item + i;
            out.v[k] = ca[n] * a_const.v[k] + cb[n] * vb.v[k];
        }
    const VarId self = VarId(t.size());
    std::vector<double> cb_copy = cb;
    return t.emit(std::move(out), t.requires_grad(b), [self, b, cb_copy, item](Tape& tp) {
        if (!tp.requires_grad(b)) return;
        const Tensor& g = tp.grad(self);
        Tensor& db = tp.grad(b);
        for (int n = 0; n < db.shape.n; ++n)
            for (size_t i = 0; i < item; ++i) {
                size_t k = n * item + i;
                db.v[k] += g.v[k] * cb_copy[n];
            }
    });
}

VarId combine_per_item(Tape& t, VarId a, const std::vector<double>& ca,
                       VarId b, const std::vector<double>& cb) {
    require_same_shape(t.val(a), t.val(b), "combine_per_item");
    check_item_coeffs(t.val(a), ca, "combine_per_item");
    check_item_coeffs(t.val(a), cb, "combine_per_item");
    Tensor out(t.val(a).shape);
    const Tensor& va = t.val(a);
    const Tensor& vb = t.val(b);
    const size_t item = va.numel() / va.shape.n;
    for (int n = 0; n < out.shape.n; ++n)
        for (size_t i = 0; i < item; ++i) {
            size_t k = n * item + i;
            out.v[k] = ca[n] * va.v[k] + cb[n] * vb.v[k];
        }
    const VarId self = VarId(t.size());
    std::vector<double> ca_copy = ca, cb_copy = cb;
    return t.emit(std::move(out), any_rg(t, {a, b}), [self, a, b, ca_copy, cb_copy, item](Tape& tp) {
        const Tensor& g = tp.grad(self);
        if (tp.requires_grad(a)) {
            Tensor& da = tp.grad(a);
            for (int n = 0; n < da.shape.n; ++n)
                for (size_t i = 0; i < item; ++i) {
                    size_t k = n * item + i;
                    da.v[k] += g.v[k] * ca_copy[n];
                }
        }
        if (tp.requires_grad(b)) {
            Tensor& db = tp.grad(b);
            for (int n = 0; n < db.shape.n; ++n)
                for (size_t i = 0; i < item; ++i) {
                    size_t k = n * item + i;
                    db.v[k] += g.v[k] * cb_copy[n];
                }
        }
    });
}

VarId combine_per_item_const(Tape& t, VarId a, const std::vector<double>& ca,
                             const Tensor& b_const, const std::vector<double>& cb) {
    require_same_shape(t.val(a), b_const, "combine_per_item_const");
    check_item_coeffs(b_const, ca, "combine_per_item_const");
    check_item_coeffs(b_const, cb, "combine_per_item_const");
    Tensor out(b_const.shape);
    const Tensor& va = t.val(a);
    const size_t item = b_const.numel() / b_const.shape.n;
    for (int n = 0; n < out.shape.n; ++n)
        for (size_t i = 0; i < item; ++i) {
            size_t k = n * item + i;
            out.v[k] = ca[n] * va.v[k] + cb[n] * b_const.v[k];
        }
    const VarId self = VarId(t.size());
    std::vector<double> ca_copy = ca;
    return t.emit(std::move(out), t.requires_grad(a), [self, a, ca_copy, item](Tape& tp) {
        if (!tp.requires_grad(a)) return;
        const Tensor& g = tp.grad(self);
        Tensor& da = tp.grad(a);
        for (int n = 0; n < da.shape.n; ++n)
            for (size_t i = 0; i < item; ++i) {
                size_t k = n * item + i;
                da.v[k] += g.v[k] * ca_copy[n];
            }
    });
}

VarId silu(Tape& t, VarId a) {
    Tensor out = t.val(a);
    for (double& x : out.v) x = x / (1.0 + std::exp(-x));
    const VarId self = VarId(t.size());
    return t.emit(std::move(out), t.requires_grad(a), [self, a](Tape& tp) {
        if (!tp.requires_grad(a)) return;
        const Tensor& g = tp.grad(self);
        const Tensor& x = tp.val(a);
        Tensor& da = tp.grad(a);
        for (size_t i = 0; i < da.v.size(); ++i) {
            double s = 1.0 / (1.0 + std::exp(-x.v[i]));
            da.v[i] += g.v[i] * (s + x.v[i] * s * (1.0 - s));
        }
    });
}

VarId sigmoid(Tape& t, VarId a) {
    Tensor out = t.val(a);
    for (double& x : out.v) x = 1.0 / (1.0 + std::exp(-x));
    const VarId self = VarId(t.size());
    return t.emit(std::move(out), t.requires_grad(a), [self, a](Tape& tp) {
        if (!tp.requires_grad(a)) return;
        const Tensor& g = tp.grad(self);
        const Tensor& y = tp.val(self);
        Tensor& da = tp.grad(a);
        for (size_t i = 0; i < da.v.size(); ++i)
            da.v[i] += g.v[i] * y.v[i] * (1.0 - y.v[i]);
    });
}

VarId clamp(Tape& t, VarId a, double lo, double hi) {
    Tensor out = t.val(a);
    for (double& x : out.v) x = std::min(hi, std::max(lo, x));
    const VarId self = VarId(t.size());
    return t.emit(std::move(out), t.requires_grad(a), [self, a, lo, hi](Tape& tp) {
        if (!tp.requires_grad(a)) return;
        const Tensor& g = tp.grad(self);
        const Tensor& x = tp.val(a);
        Tensor& da = tp.grad(a);
        for (size_t i = 0; i < da.v.size(); ++i)
            if (x.v[i] > lo && x.v[i] < hi) da.v[i] += g.v[i];
    });
}

VarId concat_ch(Tape& t, VarId a, VarId b) {
    const Tensor& va = t.val(a);
    const Tensor& vb = t.val(b);
    if (va.shape.n != vb.shape.n || va.shape.h != vb.shape.h || va.shape.w != vb.shape.w)
        throw std::invalid_argument("concat_ch: non-channel dims differ");
    Shape os{va.shape.n, va.shape.c + vb.shape.c, va.shape.h, va.shape.w};
    Tensor out(os);
    const size_t plane = size_t(os.h) * os.w;
    for (int n = 0; n < os.n; ++n) {
        std::copy_n(va.plane(n, 0), va.shape.c * plane, out.plane(n, 0));
        std::copy_n(vb.plane(n, 0), vb.shape.c * plane, out.plane(n, va.shape.c));
    }
    const VarId self = VarId(t.size());
    const int ca = va.shape.c;
    return t.emit(std::move(out), any_rg(t, {a, b}), [self, a, b, ca, plane](Tape& tp) {
        const Tensor& g = tp.grad(self);
        if (tp.requires_grad(a)) {
            Tensor& da = tp.grad(a);
            for (int n = 0; n < da.shape.n; ++n) {
                const double* src = g.plane(n, 0);
                double* dst = da.plane(n, 0);
                for (size_t i = 0; i < size_t(ca) * plane; ++i) dst[i] += src[i];
            }
        }
        if (tp.requires_grad(b)) {
            Tensor& db = tp.grad(b);
            for (int n = 0; n < db.shape.n; ++n) {
                const double* src = g.plane(n, ca);
                double* dst = db.plane(n, 0);
                for (size_t i = 0; i < size_t(db.shape.c) * plane; ++i) dst[i] += src[i];
            }
        }
    });
}

// ---------------------------------------------------------------------------
// convolution
// ---------------------------------------------------------------------------

namespace {

struct ConvDims {
    int ic, ih, iw, oc, kh, kw, oh, ow, stride, pad;
};

ConvDims conv_dims(const Tensor& x, const Tensor& w, int stride, int pad) {
    ConvDims d;
    d.ic = x.shape.c; d.ih = x.shape.h; d.iw = x.shape.w;
    d.oc = w.shape.n; d.kh = w.shape.h; d.kw = w.shape.w;
    d.stride = stride; d.pad = pad;
    if (w.shape.c != d.ic)
        throw std::invalid_argument("conv2d: weight input channels mismatch");
    d.oh = (d.ih + 2 * pad - d.kh) / stride + 1;
    d.ow = (d.iw + 2 * pad - d.kw) / stride + 1;
    if (d.oh <= 0 || d.ow <= 0) throw std::invalid_argument("conv2d: empty output");
    return d;
}

// cols: [ic*kh*kw, oh*ow], one batch item.
void im2col(const double* x, const ConvDims& d, double* cols) {
    const size_t ohw = size_t(d.oh) * d.ow;
    for (int ic = 0; ic < d.ic; ++ic) {
        const double* xc = x + size_t(ic) * d.ih * d.iw;
        for (int kh = 0; kh < d.kh; ++kh) {
            for (int kw = 0; kw < d.kw; ++kw) {
                double* row = cols + (size_t(ic) * d.kh * d.kw + kh * d.kw + kw) * ohw;
                for (int oh = 0; oh < d.oh; ++oh) {
                    int ih = oh * d.stride - d.pad + kh;
                    double* dst = row + size_t(oh) * d.ow;
                    if (ih < 0 || ih >= d.ih) {
                        std::fill_n(dst, d.ow, 0.0);
                        continue;
                    }
                    const double* src = xc + size_t(ih) * d.iw;
                    for (int ow = 0; ow < d.ow; ++ow) {
                        int iw = ow * d.stride - d.pad + kw;
                        dst[ow] = (iw >= 0 && iw < d.iw) ? src[iw] : 0.0;
                    }
                }
            }
        }
    }
}

void col2im_accum(const double* cols, const ConvDims& d, double* dx) {
    const size_t ohw = size_t(d.oh) * d.ow;
    for (int ic = 0; ic < d.ic; ++ic) {
        double* xc = dx + size_t(ic) * d.ih * d.iw;
        for (int kh = 0; kh < d.kh; ++kh) {
            for (int kw = 0; kw < d.kw; ++kw) {
                const double* row = cols + (size_t(ic) * d.kh * d.kw + kh * d.kw + kw) * ohw;
                for (int oh = 0; oh < d.oh; ++oh) {
                    int ih = oh * d.stride - d.pad + kh;
                    if (ih < 0 || ih >= d.ih) continue;
                    const double* src = row + size_t(oh) * d.ow;
                    double* dst = xc + size_t(ih) * d.iw;
                    for (int ow = 0; ow < d.ow; ++ow) {
                        int iw = ow * d.stride - d.pad + kw;
                        if (iw >= 0 && iw < d.iw) dst[iw] += src[ow];
                    }
                }
            }
        }
    }
}

thread_local std::vector<double> g_cols_scratch;
thread_local std::vector<double> g_dcols_scratch;

} // namespace

VarId conv2d(Tape& t, VarId x, VarId w, VarId b, int stride, int pad) {
    const Tensor& vx = t.val(x);
    const Tensor& vw = t.val(w);
    const Tensor& vb = t.val(b);
    ConvDims d = conv_dims(vx, vw, stride, pad);
    if (vb.numel() != size_t(d.oc))
        throw std::invalid_argument("conv2d: bias size mismatch");

    const int batch = vx.shape.n;
    const size_t ohw = size_t(d.oh) * d.ow;
    const size_t k2ic = size_t(d.ic) * d.kh * d.kw;
    Tensor out(Shape{batch, d.oc, d.oh, d.ow});

    const bool direct = (d.kh == 1 && d.kw == 1 && stride == 1 && pad == 0);
    if (!direct) g_cols_scratch.resize(k2ic * ohw);

    ConstMatMap wm(vw.v.data(), d.oc, k2ic);
    for (int n = 0; n < batch; ++n) {
        const double* cols_ptr;
        if (direct) {
            cols_ptr = vx.plane(n, 0);
        } else {
            im2col(vx.plane(n, 0), d, g_cols_scratch.data());
            cols_ptr = g_cols_scratch.data();
        }
        ConstMatMap cm(cols_ptr, k2ic, ohw);
        MatMap ym(out.plane(n, 0), d.oc, ohw);
        ym.noalias() = wm * cm;
        for (int oc = 0; oc < d.oc; ++oc)
            ym.row(oc).array() += vb.v[oc];
    }

    const VarId self = VarId(t.size());
    return t.emit(std::move(out), any_rg(t, {x, w, b}),
                  [self, x, w, b, d, batch, ohw, k2ic, direct](Tape& tp) {
        const Tensor& g = tp.grad(self);
        const Tensor& vx2 = tp.val(x);
        const Tensor& vw2 = tp.val(w);
        const bool need_dx = tp.requires_grad(x);
        const bool need_dw = tp.requires_grad(w);
        const bool need_db = tp.requires_grad(b);

        if (!direct && (need_dw || need_dx)) g_cols_scratch.resize(k2ic * ohw);
        if (need_dx && !direct) g_dcols_scratch.resize(k2ic * ohw);

        ConstMatMap wm(vw2.v.data(), d.oc, k2ic);
        for (int n = 0; n < batch; ++n) {
            ConstMatMap gm(g.plane(n, 0), d.oc, ohw);
            if (need_dw) {
                const double* cols_ptr;
                if (direct) {
                    cols_ptr = vx2.plane(n, 0);
                } else {
                    im2col(vx2.plane(n, 0), d, g_cols_scratch.data());
                    cols_ptr = g_cols_scratch.data();
                }
                ConstMatMap cm(cols_ptr, k2ic, ohw);
                MatMap dwm(tp.grad(w).v.data(), d.oc, k2ic);
                dwm.noalias() += gm * cm.transpose();
            }
            if (need_db) {
                Tensor& db = tp.grad(b);
                for (int oc = 0; oc < d.oc; ++oc) db.v[oc] += gm.row(oc).sum();
            }
            if (need_dx) {
                if (direct) {
                    MatMap dxm(tp.grad(x).plane(n, 0), k2ic, ohw);
                    dxm.noalias() += wm.transpose() * gm;
                } else {
                    MatMap dcm(g_dcols_scratch.data(), k2ic, ohw);
                    dcm.noalias() = wm.transpose() * gm;
                    col2im_accum(g_dcols_scratch.data(), d, tp.grad(x).plane(n, 0));
                }
            }
        }
    });
}

VarId linear(Tape& t, VarId x, VarId w, VarId b) {
    const Tensor& vx = t.val(x);
    const Tensor& vw = t.val(w);
    const Tensor& vb = t.val(b);
    const int batch = vx.shape.n, din = vx.shape.c, dout = vw.shape.n;
    if (vw.shape.c != din || vb.numel() != size_t(dout))
        throw std::invalid_argument("linear: dimension mismatch");
    Tensor out(Shape{batch, dout, 1, 1});
    for (int n = 0; n < batch; ++n)
        for (int o = 0; o < dout; ++o) {
            double acc = vb.v[o];
            const double* wr = vw.v.data() + size_t(o) * din;
            const double* xr = vx.v.data() + size_t(n) * din;
            for (int i = 0; i < din; ++i) acc += wr[i] * xr[i];
            out.v[size_t(n) * dout + o] = acc;
        }
    const VarId self = VarId(t.size());
    return t.emit(std::move(out), any_rg(t, {x, w, b}),
                  [self, x, w, b, batch, din, dout](Tape& tp) {
        const Tensor& g = tp.grad(self);
        const Tensor& vx2 = tp.val(x);
        const Tensor& vw2 = tp.val(w);
        if (tp.requires_grad(x)) {
            Tensor& dx = tp.grad(x);
            for (int n = 0; n < batch; ++n)
                for (int o = 0; o < dout; ++o) {
                    double go = g.v[size_t(n) * dout + o];
                    const double* wr = vw2.v.data() + size_t(o) * din;
                    double* dxr = dx.v.data() + size_t(n) * din;
                    for (int i = 0; i < din; ++i) dxr[i] += go * wr[i];
                }
        }
        if (tp.requires_grad(w)) {
            Tensor& dw = tp.grad(w);
            for (int n = 0; n < batch; ++n)
                for (int o = 0; o < dout; ++o) {
                    double go = g.v[size_t(n) * dout + o];
                    double* dwr = dw.v.data() + size_t(o) * din;
                    const double* xr = vx2.v.data() + size_t(n) * din;
                    for (int i = 0; i < din; ++i) dwr[i] += go * xr[i];
                }
        }
        if (tp.requires_grad(b)) {
            Tensor& db = tp.grad(b);
            for (int n = 0; n < batch; ++n)
                for (int o = 0; o < dout; ++o) db.v[o] += g.v[size_t(n) * dout + o];
        }
    });
}

VarId add_channel_bias(Tape& t, VarId x, VarId bias) {
    const Tensor& vx = t.val(x);
    const Tensor& vbias = t.val(bias);
    if (vbias.shape.n != vx.shape.n || vbias.shape.c != vx.shape.c ||
        vbias.shape.h != 1 || vbias.shape.w != 1)
        throw std::invalid_argument("add_channel_bias: bias must be [B,C,1,1]");
    Tensor out = vx;
    const size_t plane = size_t(vx.shape.h) * vx.shape.w;
    for (int n = 0; n < vx.shape.n; ++n)
        for (int c = 0; c < vx.shape.c; ++c) {
            double bv = vbias.v[size_t(n) * vx.shape.c + c];
            double* p = out.plane(n, c);
            for (size_t i = 0; i < plane; ++i) p[i] += bv;
        }
    const VarId self = VarId(t.size());
    return t.emit(std::move(out), any_rg(t, {x, bias}), [self, x, bias, plane](Tape& tp) {
        const Tensor& g = tp.grad(self);
        if (tp.requires_grad(x)) accumulate(tp.grad(x), g);
        if (tp.requires_grad(bias)) {
            Tensor& db = tp.grad(bias);
            for (int n = 0; n < g.shape.n; ++n)
                for (int c = 0; c < g.shape.c; ++c) {
                    const double* p = g.plane(n, c);
                    double acc = 0.0;
                    for (size_t i = 0; i < plane; ++i) acc += p[i];
                    db.v[size_t(n) * g.shape.c + c] += acc;
                }
        }
    });
}

// ---------------------------------------------------------------------------
// normalization
// ---------------------------------------------------------------------------

namespace {

// Shared forward/backward for group norm with or without affine params.
VarId group_norm_impl(Tape& t, VarId x, VarId gamma, VarId beta, bool affine,
                      int groups, double eps) {
    const Tensor& vx = t.val(x);
    const int B = vx.shape.n, C = vx.shape.c, H = vx.shape.h, W = vx.shape.w;
    if (C % groups != 0)
        throw std::invalid_argument("group_norm: channels not divisible by groups");
    const int cg = C / groups;
    const size_t gsize = size_t(cg) * H * W;

    std::vector<double> mean(size_t(B) * groups), inv_std(size_t(B) * groups);
    Tensor out(vx.shape);
    const Tensor* vgamma = affine ? &t.val(gamma) : nullptr;
    const Tensor* vbeta = affine ? &t.val(beta) : nullptr;

    for (int n = 0; n < B; ++n)
        for (int g = 0; g < groups; ++g) {
            const double* base = vx.plane(n, g * cg);
            double m = 0.0;
            for (size_t i = 0; i < gsize; ++i) m += base[i];
            m /= double(gsize);
            double var = 0.0;
            for (size_t i = 0; i < gsize; ++i) {
                double d = base[i] - m;
                var += d * d;
            }
            var /= double(gsize);
            double is = 1.0 / std::sqrt(var + eps);
            mean[size_t(n) * groups + g] = m;
            inv_std[size_t(n) * groups + g] = is;
            double* o = out.plane(n, g * cg);
            for (int cc = 0; cc < cg; ++cc) {
                int c = g * cg + cc;
                double ga = affine ? vgamma->v[c] : 1.0;
                double be = affine ? vbeta->v[c] : 0.0;
                const double* xi = vx.plane(n, c);
                double* oi = o + size_t(cc) * H * W;
                for (size_t i = 0; i < size_t(H) * W; ++i)
                    oi[i] = ga * ((xi[i] - m) * is) + be;
            }
        }

    bool rg = affine ? any_rg(t, {x, gamma, beta}) : t.requires_grad(x);
    const VarId self = VarId(t.size());
    return t.emit(std::move(out), rg,
                  [self, x, gamma, beta, affine, groups, eps, B, C, H, W, cg, gsize,
                   mean = std::move(mean), inv_std = std::move(inv_std)](Tape& tp) {
        const Tensor& g = tp.grad(self);
        const Tensor& vx2 = tp.val(x);
        const Tensor* vg = affine ? &tp.val(gamma) : nullptr;
        const bool need_dx = tp.requires_grad(x);
        const bool need_dg = affine && tp.requires_grad(gamma);
        const bool need_db = affine && tp.requires_grad(beta);
        const size_t hw = size_t(H) * W;

        for (int n = 0; n < B; ++n)
            for (int gi = 0; gi < groups; ++gi) {
                const double m = mean[size_t(n) * groups + gi];
                const double is = inv_std[size_t(n) * groups + gi];
                if (need_dg || need_db) {
                    for (int cc = 0; cc < cg; ++cc) {
                        int c = gi * cg + cc;
                        const double* gp = g.plane(n, c);
                        const double* xp = vx2.plane(n, c);
                        double sg = 0.0, sgx = 0.0;
                        for (size_t i = 0; i < hw; ++i) {
                            sg += gp[i];
                            sgx += gp[i] * (xp[i] - m) * is;
                        }
                        if (need_db) tp.grad(beta).v[c] += sg;
                        if (need_dg) tp.grad(gamma).v[c] += sgx;
                    }
                }
                if (need_dx) {
                    // dxhat = g * gamma; dx = is*(dxhat - mean(dxhat) - xhat*mean(dxhat*xhat))
                    double s1 = 0.0, s2 = 0.0;
                    for (int cc = 0; cc < cg; ++cc) {
                        int c = gi * cg + cc;
                        double ga = affine ? vg->v[c] : 1.0;
                        const double* gp = g.plane(n, c);
                        const double* xp = vx2.plane(n, c);
                        for (size_t i = 0; i < hw; ++i) {
                            double dxh = gp[i] * ga;
                            double xh = (xp[i] - m) * is;
                            s1 += dxh;
                            s2 += dxh * xh;
                        }
                    }
                    s1 /= double(gsize);
                    s2 /= double(gsize);
                    for (int cc = 0; cc < cg; ++cc) {
                        int c = gi * cg + cc;
                        double ga = affine ? vg->v[c] : 1.0;
                        const double* gp = g.plane(n, c);
                        const double* xp = vx2.plane(n, c);
                        double* dxp = tp.grad(x).plane(n, c);
                        for (size_t i = 0; i < hw; ++i) {
                            double dxh = gp[i] * ga;
                            double xh = (xp[i] - m) * is;
                            dxp[i] += is * (dxh - s1 - xh * s2);
                        }
                    }
                }
            }
    });
}

} // namespace

VarId group_norm(Tape& t, VarId x, VarId gamma, VarId beta, int groups, double eps) {
    return group_norm_impl(t, x, gamma, beta, true, groups, eps);
}

VarId group_norm_plain(Tape& t, VarId x, int groups, double eps) {
    return group_norm_impl(t, x, -1, -1, false, groups, eps);
}

// ---------------------------------------------------------------------------
// resampling
// ---------------------------------------------------------------------------

VarId upsample_nearest2x(Tape& t, VarId x) {
    const Tensor& vx = t.val(x);
    const int B = vx.shape.n, C = vx.shape.c, H = vx.shape.h, W = vx.shape.w;
    Tensor out(Shape{B, C, 2 * H, 2 * W});
    for (int n = 0; n < B; ++n)
        for (int c = 0; c < C; ++c) {
            const double* src = vx.plane(n, c);
            double* dst = out.plane(n, c);
            for (int y = 0; y < 2 * H; ++y)
                for (int xx = 0; xx < 2 * W; ++xx)
                    dst[size_t(y) * 2 * W + xx] = src[size_t(y / 2) * W + xx / 2];
        }
    const VarId self = VarId(t.size());
    return t.emit(std::move(out), t.requires_grad(x), [self, x, B, C, H, W](Tape& tp) {
        if (!tp.requires_grad(x)) return;
        const Tensor& g = tp.grad(self);
        Tensor& dx = tp.grad(x);
        for (int n = 0; n < B; ++n)
            for (int c = 0; c < C; ++c) {
                const double* gp = g.plane(n, c);
                double* dp = dx.plane(n, c);
                for (int y = 0; y < 2 * H; ++y)
                    for (int xx = 0; xx < 2 * W; ++xx)
                        dp[size_t(y / 2) * W + xx / 2] += gp[size_t(y) * 2 * W + xx];
            }
    });
}

namespace {

struct BilinTap {
    int i0, i1;
    double f; // weight of i1; (1-f) on i0
};

std::vector<BilinTap> bilinear_taps(int in, int out) {
    std::vector<BilinTap> taps(out);
    const double scale = double(in) / double(out);
    for (int o = 0; o < out; ++o) {
        double s = (o + 0.5) * scale - 0.5;
        s = std::max(0.0, std::min(double(in - 1), s));
        int i0 = int(s);
        taps[o] = {i0, std::min(i0 + 1, in - 1), s - i0};
    }
    return taps;
}

} // namespace

VarId resize_bilinear(Tape& t, VarId x, int oh, int ow) {
    const Tensor& vx = t.val(x);
    const int B = vx.shape.n, C = vx.shape.c, H = vx.shape.h, W = vx.shape.w;
    auto ty = bilinear_taps(H, oh);
    auto tx = bilinear_taps(W, ow);
    Tensor out(Shape{B, C, oh, ow});
    for (int n = 0; n < B; ++n)
        for (int c = 0; c < C; ++c) {
            const double* src = vx.plane(n, c);
            double* dst = out.plane(n, c);
            for (int y = 0; y < oh; ++y) {
                const BilinTap& a = ty[y];
                for (int xx = 0; xx < ow; ++xx) {
                    const BilinTap& b = tx[xx];
                    double v00 = src[size_t(a.i0) * W + b.i0];
                    double v01 = src[size_t(a.i0) * W + b.i1];
                    double v10 = src[size_t(a.i1) * W + b.i0];
                    double v11 = src[size_t(a.i1) * W + b.i1];
                    dst[size_t(y) * ow + xx] = (1 - a.f) * ((1 - b.f) * v00 + b.f * v01) +
                                               a.f * ((1 - b.f) * v10 + b.f * v11);
                }
            }
        }
    const VarId self = VarId(t.size());
    return t.emit(std::move(out), t.requires_grad(x),
                  [self, x, B, C, W, oh, ow, ty = std::move(ty), tx = std::move(tx)](Tape& tp) {
        if (!tp.requires_grad(x)) return;
        const Tensor& g = tp.grad(self);
        Tensor& dx = tp.grad(x);
        for (int n = 0; n < B; ++n)
            for (int c = 0; c < C; ++c) {
                const double* gp = g.plane(n, c);
                double* dp = dx.plane(n, c);
                for (int y = 0; y < oh; ++y) {
                    const BilinTap& a = ty[y];
                    for (int xx = 0; xx < ow; ++xx) {
                        const BilinTap& b = tx[xx];
                        double gv = gp[size_t(y) * ow + xx];
                        dp[size_t(a.i0) * W + b.i0] += (1 - a.f) * (1 - b.f) * gv;
                        dp[size_t(a.i0) * W + b.i1] += (1 - a.f) * b.f * gv;
                        dp[size_t(a.i1) * W + b.i0] += a.f * (1 - b.f) * gv;
                        dp[size_t(a.i1) * W + b.i1] += a.f * b.f * gv;
                    }
                }
            }
    });
}

Tensor resize_bilinear_plain(const Tensor& x, int oh, int ow) {
    Tape tmp;
    VarId id = tmp.leaf(x, false);
    return tmp.val(resize_bilinear(tmp, id, oh, ow));
}

Tensor resize_nearest_plain(const Tensor& x, int oh, int ow) {
    const int B = x.shape.n, C = x.shape.c, H = x.shape.h, W = x.shape.w;
    Tensor out(Shape{B, C, oh, ow});
    for (int n = 0; n < B; ++n)
        for (int c = 0; c < C; ++c) {
            const double* src = x.plane(n, c);
            double* dst = out.plane(n, c);
            for (int y = 0; y < oh; ++y) {
                int sy = std::min(H - 1, int(double(y) * H / oh));
                for (int xx = 0; xx < ow; ++xx) {
                    int sx = std::min(W - 1, int(double(xx) * W / ow));
                    dst[size_t(y) * ow + xx] = src[size_t(sy) * W + sx];
                }
            }
        }
    return out;
}

// ---------------------------------------------------------------------------
// losses
// ---------------------------------------------------------------------------

VarId weighted_mse(Tape& t, VarId pred, const Tensor& target, const Tensor* weight) {
    const Tensor& vp = t.val(pred);
    require_same_shape(vp, target, "weighted_mse");
    if (weight) {
        if (weight->shape.n != vp.shape.n || weight->shape.c != 1 ||
            weight->shape.h != vp.shape.h || weight->shape.w != vp.shape.w)
            throw std::invalid_argument("weighted_mse: weight must be [B,1,H,W]");
    }
    const int B = vp.shape.n, C = vp.shape.c;
    const size_t hw = size_t(vp.shape.h) * vp.shape.w;
    double acc = 0.0;
    for (int n = 0; n < B; ++n)
        for (int c = 0; c < C; ++c) {
            const double* p = vp.plane(n, c);
            const double* tg = target.plane(n, c);
            const double* wp = weight ? weight->plane(n, 0) : nullptr;
            for (size_t i = 0; i < hw; ++i) {
                double d = p[i] - tg[i];
                acc += (wp ? wp[i] : 1.0) * d * d;
            }
        }
    const double numel = double(vp.numel());
    Tensor out(Shape{1, 1, 1, 1});
    out.v[0] = acc / numel;
    const VarId self = VarId(t.size());
    Tensor tgt_copy = target;
    Tensor w_copy = weight ? *weight : Tensor{};
    const bool has_w = weight != nullptr;
    return t.emit(std::move(out), t.requires_grad(pred),
                  [self, pred, tgt = std::move(tgt_copy), wc = std::move(w_copy),
                   has_w, B, C, hw, numel](Tape& tp) {
        if (!tp.requires_grad(pred)) return;
        const double groot = tp.grad(self).v[0];
        const Tensor& vp2 = tp.val(pred);
        Tensor& dp = tp.grad(pred);
        for (int n = 0; n < B; ++n)
            for (int c = 0; c < C; ++c) {
                const double* p = vp2.plane(n, c);
                const double* tg = tgt.plane(n, c);
                const double* wp = has_w ? wc.plane(n, 0) : nullptr;
                double* d = dp.plane(n, c);
                for (size_t i = 0; i < hw; ++i)
                    d[i] += groot * 2.0 * (has_w ? wp[i] : 1.0) * (p[i] - tg[i]) / numel;
            }
    });
}

VarId seg_loss_node(Tape& t, VarId pred_prob, const Tensor& target,
                    double smooth, double prob_clamp) {
    const Tensor& vp = t.val(pred_prob);
    require_same_shape(vp, target, "seg_loss");
    if (vp.shape.c != 1) throw std::invalid_argument("seg_loss: pred must be [B,1,H,W]");
    require_binary(target, "seg_loss");
    for (double x : vp.v)
        if (x < -1e-9 || x > 1.0 + 1e-9)
            throw std::invalid_argument("seg_loss: pred outside (0,1)");

    const int B = vp.shape.n;
    const size_t hw = size_t(vp.shape.h) * vp.shape.w;
    double loss = 0.0;
    for (int n = 0; n < B; ++n) {
        const double* p = vp.plane(n, 0);
        const double* g = target.plane(n, 0);
        double inter = 0.0, sp = 0.0, sg = 0.0, bce = 0.0;
        for (size_t i = 0; i < hw; ++i) {
            inter += p[i] * g[i];
            sp += p[i];
            sg += g[i];
            double pc = std::min(1.0 - prob_clamp, std::max(prob_clamp, p[i]));
            bce += -(g[i] * std::log(pc) + (1.0 - g[i]) * std::log(1.0 - pc));
        }
        double uni = sp + sg - inter;
        loss += (1.0 - (inter + smooth) / (uni + smooth)) + bce / double(hw);
    }
    loss /= double(B);

    Tensor out(Shape{1, 1, 1, 1});
    out.v[0] = loss;
    const VarId self = VarId(t.size());
    Tensor tgt_copy = target;
    return t.emit(std::move(out), t.requires_grad(pred_prob),
                  [self, pred_prob, tgt = std::move(tgt_copy), smooth, prob_clamp, B, hw](Tape& tp) {
        if (!tp.requires_grad(pred_prob)) return;
        const double groot = tp.grad(self).v[0];
        const Tensor& vp2 = tp.val(pred_prob);
        Tensor& dp = tp.grad(pred_prob);
        for (int n = 0; n < B; ++n) {
            const double* p = vp2.plane(n, 0);
            const double* g = tgt.plane(n, 0);
            double inter = 0.0, sp = 0.0, sg = 0.0;
            for (size_t i = 0; i < hw; ++i) {
                inter += p[i] * g[i];
                sp += p[i];
                sg += g[i];
            }
            double uni = sp + sg - inter;
            double denom = (uni + smooth) * (uni + smooth);
            double* d = dp.plane(n, 0);
            for (size_t i = 0; i < hw; ++i) {
                // d(1 - (I+s)/(U+s))/dp_i with dI/dp = g, dU/dp = 1 - g
                double diou = -(g[i] * (uni + smooth) - (inter + smooth) * (1.0 - g[i])) / denom;
                double dbce = 0.0;
                if (p[i] > prob_clamp && p[i] < 1.0 - prob_clamp)
                    dbce = (-g[i] / p[i] + (1.0 - g[i]) / (1.0 - p[i])) / double(hw);
                d[i] += groot * (diou + dbce) / double(B);
            }
        }
    });
}

} // namespace arsdm
