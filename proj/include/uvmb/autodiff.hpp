#pragma once

#include <functional>
#include <memory>
#include <utility>
#include <vector>

#include "uvmb/tensor.hpp"

namespace uvmb {

// One value in the computation graph. Gradient storage is lazy: it is
// allocated the first time something accumulates into it, so constant
// inputs (images, masks) never pay for gradient buffers.
template <typename T>
struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    bool requires_grad = false;

    bool has_grad() const { return grad.numel() != 0; }

    Tensor<T>& ensure_grad() {
        if (!has_grad()) grad = Tensor<T>(value.shape());
        return grad;
    }

    void accumulate(const Tensor<T>& g) {
        Tensor<T>& dst = ensure_grad();
        T* d = dst.data();
        const T* s = g.data();
        for (int64_t i = 0; i < dst.numel(); ++i) d[i] += s[i];
    }
};

// Shared-ownership handle to a Node. Cheap to copy; ops capture handles of
// their inputs inside backward closures, which keeps saved values alive
// until the tape is cleared.
template <typename T>
class Var {
  public:
    Var() = default;
    explicit Var(std::shared_ptr<Node<T>> n) : n_(std::move(n)) {}

    static Var leaf(Tensor<T> v, bool requires_grad = false) {
        auto n = std::make_shared<Node<T>>();
        n->value = std::move(v);
        n->requires_grad = requires_grad;
        return Var(n);
    }

    bool defined() const { return static_cast<bool>(n_); }
    const Tensor<T>& value() const { return n_->value; }
    Tensor<T>& value_mut() { return n_->value; }
    bool requires_grad() const { return n_ && n_->requires_grad; }

    // Zero-filled if nothing has accumulated yet.
    Tensor<T>& grad() { return n_->ensure_grad(); }
    bool has_grad() const { return n_ && n_->has_grad(); }
    void zero_grad() {
        if (n_) n_->ensure_grad().fill(T(0));
    }

    std::shared_ptr<Node<T>> node() const { return n_; }

  private:
    std::shared_ptr<Node<T>> n_;
};

// Records executed ops as backward closures in execution order. Replaying
// them in reverse yields vector-Jacobian products for every tensor that
// influenced the seeded output; leaves that never appear receive zero
// gradient (their buffers stay empty and read back as zeros).
template <typename T>
class Tape {
  public:
    explicit Tape(bool recording = true) : recording_(recording) {}

    bool recording() const { return recording_; }

    void record(std::function<void()> fn) {
        if (recording_) fns_.push_back(std::move(fn));
    }

    void backward(const Var<T>& output) {
        if (output.value().numel() != 1)
            throw ShapeError("backward() needs a scalar output, got " +
                             shape_str(output.value().shape()));
        output.node()->ensure_grad().fill(T(1));
        for (auto it = fns_.rbegin(); it != fns_.rend(); ++it) (*it)();
    }

    void clear() { fns_.clear(); }
    size_t size() const { return fns_.size(); }

  private:
    std::vector<std::function<void()>> fns_;
    bool recording_;
};

using VarF = Var<float>;
using VarD = Var<double>;

}  // namespace uvmb
