#include "arsdm/tensor.hpp"

#include <cmath>
#include <stdexcept>

namespace arsdm {

std::string Shape::str() const {
    return "[" + std::to_string(n) + "," + std::to_string(c) + "," +
           std::to_string(h) + "," + std::to_string(w) + "]";
}

bool all_finite(const Tensor& t) {
    for (double x : t.v)
        if (!std::isfinite(x)) return false;
    return true;
}

double max_abs(const Tensor& t) {
    double m = 0.0;
    for (double x : t.v) m = std::max(m, std::abs(x));
    return m;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "max_abs_diff");
    double m = 0.0;
    for (size_t i = 0; i < a.v.size(); ++i) m = std::max(m, std::abs(a.v[i] - b.v[i]));
    return m;
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* what) {
    if (!(a.shape == b.shape))
        throw std::invalid_argument(std::string(what) + ": shape mismatch " +
                                    a.shape.str() + " vs " + b.shape.str());
}

void require_binary(const Tensor& m, const char* what) {
    for (double x : m.v)
        if (x != 0.0 && x != 1.0)
            throw std::invalid_argument(std::string(what) + ": mask values must be exactly 0 or 1");
}

} // namespace arsdm
