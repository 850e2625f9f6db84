#pragma once

#include <array>
#include <cstddef>
#include <string>
#include <vector>

#include "arsdm/rng.hpp"

namespace arsdm {

// All dense data in this project is a rank-4 NCHW tensor of doubles.
// Parameter blocks and embeddings reuse the same type with trailing
// singleton dims.
struct Shape {
    int n = 0, c = 0, h = 0, w = 0;
    size_t numel() const { return size_t(n) * c * h * w; }
    bool operator==(const Shape&) const = default;
    std::string str() const;
};

struct Tensor {
    Shape shape;
    std::vector<double> v;

    Tensor() = default;
    explicit Tensor(Shape s, double fill = 0.0) : shape(s), v(s.numel(), fill) {}

    static Tensor zeros(Shape s) { return Tensor(s); }
    static Tensor full(Shape s, double val) { return Tensor(s, val); }
    static Tensor randn(Shape s, Rng& rng) {
        Tensor t(s);
        rng.fill_normal(t.v);
        return t;
    }

    size_t numel() const { return v.size(); }
    bool empty() const { return v.empty(); }

    double& at(int n_, int c_, int h_, int w_) {
        return v[((size_t(n_) * shape.c + c_) * shape.h + h_) * shape.w + w_];
    }
    double at(int n_, int c_, int h_, int w_) const {
        return v[((size_t(n_) * shape.c + c_) * shape.h + h_) * shape.w + w_];
    }

    // Pointer to the start of one (n, c) plane.
    double* plane(int n_, int c_) {
        return v.data() + (size_t(n_) * shape.c + c_) * shape.h * shape.w;
    }
    const double* plane(int n_, int c_) const {
        return v.data() + (size_t(n_) * shape.c + c_) * shape.h * shape.w;
    }
};

bool all_finite(const Tensor& t);
double max_abs(const Tensor& t);
double max_abs_diff(const Tensor& a, const Tensor& b);

// Throws std::invalid_argument on mismatch.
void require_same_shape(const Tensor& a, const Tensor& b, const char* what);

// Binary {0,1} check; throws on any other value.
void require_binary(const Tensor& m, const char* what);

} // namespace arsdm
