#include "arsdm/params.hpp"

#include <cmath>
#include <stdexcept>

namespace arsdm {

size_t ParamLayout::add(const std::string& name, Shape shape) {
    for (const Block& b : blocks_)
        if (b.name == name) throw std::invalid_argument("duplicate parameter block: " + name);
    blocks_.push_back(Block{name, shape, total_});
    total_ += shape.numel();
    return blocks_.size() - 1;
}

BoundParams bind_params(Tape& tape, const ParamLayout& layout, const ParamVector& params,
                        bool requires_grad) {
    if (params.size() != layout.total())
        throw std::invalid_argument("bind_params: parameter vector length mismatch");
    BoundParams bound;
    bound.ids.reserve(layout.block_count());
    for (size_t i = 0; i < layout.block_count(); ++i) {
        const auto& b = layout.block(i);
        Tensor t(b.shape);
        std::copy_n(params.data() + b.offset, t.numel(), t.v.data());
        bound.ids.push_back(tape.leaf(std::move(t), requires_grad));
    }
    return bound;
}

ParamVector collect_grads(Tape& tape, const ParamLayout& layout, const BoundParams& bound) {
    ParamVector g(layout.total(), 0.0);
    for (size_t i = 0; i < layout.block_count(); ++i) {
        const auto& b = layout.block(i);
        VarId id = bound[i];
        if (tape.has_grad(id)) {
            const Tensor& gt = tape.grad(id);
            std::copy_n(gt.v.data(), gt.numel(), g.data() + b.offset);
        }
    }
    return g;
}

void fill_uniform_fan_in(Tensor& w, int fan_in, Rng& rng) {
    const double bound = 1.0 / std::sqrt(double(fan_in));
    for (double& x : w.v) x = rng.uniform(-bound, bound);
}

} // namespace arsdm
