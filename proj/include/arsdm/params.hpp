#pragma once

#include <string>
#include <vector>

#include "arsdm/autodiff.hpp"
#include "arsdm/rng.hpp"
#include "arsdm/tensor.hpp"

namespace arsdm {

using ParamVector = std::vector<double>;

// Deterministic ordered index of named parameter blocks. Block order is the
// declaration order of the owning model; the flat ParamVector layout and the
// checkpoint payload both follow it.
class ParamLayout {
public:
    struct Block {
        std::string name;
        Shape shape;
        size_t offset;
    };

    size_t add(const std::string& name, Shape shape);
    const Block& block(size_t idx) const { return blocks_.at(idx); }
    size_t block_count() const { return blocks_.size(); }
    size_t total() const { return total_; }
    const std::vector<Block>& blocks() const { return blocks_; }

private:
    std::vector<Block> blocks_;
    size_t total_ = 0;
};

// Tape leaves for every block of a layout, in block order.
struct BoundParams {
    std::vector<VarId> ids;
    VarId operator[](size_t i) const { return ids.at(i); }
};

BoundParams bind_params(Tape& tape, const ParamLayout& layout, const ParamVector& params,
                        bool requires_grad);

// Collects d(loss)/d(theta) for every block into a flat vector (zeros where a
// block received no gradient). Order matches the layout.
ParamVector collect_grads(Tape& tape, const ParamLayout& layout, const BoundParams& bound);

// Init fills
void fill_uniform_fan_in(Tensor& w, int fan_in, Rng& rng);

} // namespace arsdm
