#pragma once

#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "mixcaps/errors.hpp"
#include "mixcaps/tensor.hpp"

namespace mixcaps {

template <typename S>
class TapeT;

// Handle to a tensor recorded on a tape. Cheap to copy; values are owned by
// the tape and immutable once written.
template <typename S>
struct VarT {
    TapeT<S>* tape = nullptr;
    int id = -1;

    const TensorT<S>& value() const { return tape->value(id); }
    bool valid() const { return tape != nullptr && id >= 0; }
};

// Ordered record of forward operations, replayed in reverse for gradients.
// One tape hosts one forward computation (typically a mini-batch loss); it
// is not reused across batches.
template <typename S>
class TapeT {
public:
    using Tensor = TensorT<S>;
    using Var = VarT<S>;
    // Invoked with the tape and the node's own id; reads grad_ref(self) and
    // accumulates into grad_buf(input) for each input.
    using BackwardFn = std::function<void(TapeT&, int)>;

    // Leaf node: a parameter or an input constant. No backward function.
    Var leaf(Tensor value) { return emit(std::move(value), {}, "leaf", nullptr); }

    // Extension point every operation goes through. Rejects non-finite
    // results so NaN/Inf cannot propagate silently.
    Var emit(Tensor value, std::vector<int> inputs, const char* op_name, BackwardFn backward) {
        if (!value.all_finite()) {
            throw NumericError(std::string("non-finite values produced by ") + op_name);
        }
        for (const int in : inputs) {
            if (in < 0 || in >= static_cast<int>(nodes_.size())) {
                throw ContractError(std::string(op_name) + ": input is not on this tape");
            }
        }
        nodes_.push_back(Node{std::move(value), std::move(inputs), std::move(backward)});
        return Var{this, static_cast<int>(nodes_.size()) - 1};
    }

    const Tensor& value(int id) const { return nodes_[static_cast<std::size_t>(id)].value; }
    std::size_t size() const { return nodes_.size(); }

    // Gradient accumulation buffer for a node; allocated as exact zeros on
    // first touch.
    Tensor& grad_buf(int id) {
        auto& g = grads_[static_cast<std::size_t>(id)];
        if (g.empty()) g = Tensor(nodes_[static_cast<std::size_t>(id)].value.shape());
        return g;
    }

    // Read-only gradient of a reached node during the reverse sweep.
    const Tensor& grad_ref(int id) const { return grads_[static_cast<std::size_t>(id)]; }

    // Reverse-mode sweep from a scalar loss. May be called once per tape.
    void backward(Var loss) {
        if (loss.tape != this || loss.id < 0 || loss.id >= static_cast<int>(nodes_.size())) {
            throw ContractError("backward: loss is not on this tape");
        }
        if (value(loss.id).size() != 1) {
            throw ContractError("backward: loss must be scalar, got shape " +
                                value(loss.id).shape_str());
        }
        grads_.assign(nodes_.size(), Tensor());
        grad_buf(loss.id)[0] = S(1);
        for (int id = loss.id; id >= 0; --id) {
            Node& node = nodes_[static_cast<std::size_t>(id)];
            if (grads_[static_cast<std::size_t>(id)].empty()) continue;  // did not reach the loss
            if (node.backward) node.backward(*this, id);
        }
        swept_ = true;
    }

    // Gradient of the loss w.r.t. a node. Exact zeros for nodes that did not
    // participate in the loss.
    Tensor gradient(Var v) const {
        if (v.tape != this) throw ContractError("gradient: var is not on this tape");
        if (!swept_) throw ContractError("gradient: backward has not run on this tape");
        const auto& g = grads_[static_cast<std::size_t>(v.id)];
        if (g.empty()) return Tensor(value(v.id).shape());
        return g;
    }

private:
    struct Node {
        Tensor value;
        std::vector<int> inputs;
        BackwardFn backward;
    };

    std::vector<Node> nodes_;
    std::vector<Tensor> grads_;
    bool swept_ = false;
};

using Tape = TapeT<double>;
using Var = VarT<double>;

}  // namespace mixcaps
