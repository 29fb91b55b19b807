#pragma once

#include "medt/tensor.hpp"

#include <functional>
#include <span>
#include <string>
#include <vector>

namespace medt::ag {

/// A trainable tensor living outside any tape. Tapes reference the value
/// without copying and add into `grad` on backward.
struct Parameter {
    std::string name;
    Tensor value;
    Tensor grad;

    void zero_grad();
};

class Tape;

/// Handle to a node on a tape.
struct Var {
    Tape* tape = nullptr;
    int id = -1;

    const Tensor& value() const;
    const Shape& shape() const { return value().shape(); }
    int rows() const { return value().rows(); }
    int cols() const { return value().cols(); }
};

/// Records forward operations in execution order; backward replays them in
/// reverse. Single-threaded; one tape per forward pass.
class Tape {
public:
    using BackwardFn = std::function<void(Tape&, const Tensor& grad_out)>;

    enum class Mode { Grad, NoGrad };

    explicit Tape(Mode mode = Mode::Grad) : mode_(mode) {}
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    Var constant(Tensor value);
    /// Leaf that receives a gradient but is not a Parameter (inputs under test).
    Var leaf(Tensor value);
    /// References `p.value` without copying. Under Mode::NoGrad the node is a
    /// constant and no closures are recorded downstream of it.
    Var param(const Parameter& p);

    /// Reverse pass from a scalar node. With `accumulate_params` the parameter
    /// gradients are added into Parameter::grad, so repeated calls accumulate;
    /// without it only the tape's own slots are filled (frozen, shared models).
    void backward(Var output, bool accumulate_params = true);

    const Tensor& value(int id) const;
    /// Gradient of the last backward's output w.r.t. node `id`; zeros if the
    /// node did not influence the output.
    Tensor grad(int id) const;
    bool has_grad(int id) const;
    bool requires_grad(int id) const { return nodes_[static_cast<std::size_t>(id)].requires_grad; }
    const std::string& kind(int id) const { return nodes_[static_cast<std::size_t>(id)].kind; }
    std::size_t size() const { return nodes_.size(); }
    std::span<const int> inputs(int id) const { return nodes_[static_cast<std::size_t>(id)].inputs; }

    // Used by kernels.
    Var record(std::string kind, Tensor value, std::vector<int> inputs, BackwardFn fn);
    Tensor& grad_slot(int id);

private:
    struct Node {
        std::string kind;
        Tensor owned;
        const Tensor* external = nullptr;
        const Parameter* parameter = nullptr;
        std::vector<int> inputs;
        BackwardFn backward;
        Tensor grad;
        bool requires_grad = false;
        bool grad_allocated = false;
    };

    Mode mode_;
    std::vector<Node> nodes_;
};

// ---- kernels -------------------------------------------------------------
// All kernels throw ShapeError on non-conforming operands and NumericError
// when the output is not finite.

Var matmul(Var a, Var b);               // [m,k] x [k,n]
Var matmul_nt(Var a, Var b);            // [m,k] x [n,k]^T
Var add(Var a, Var b);                  // same shape
Var add_bias(Var a, Var bias);          // [m,n] + [n] broadcast over rows
Var mul(Var a, Var b);                  // elementwise, same shape
Var mul_const(Var a, const Tensor& c);  // elementwise by a constant (dropout masks)
Var scale(Var a, double s);
Var gelu(Var a);                        // tanh approximation
/// Row softmax of (a + mask). Mask entries must be 0 or -inf; a row that is
/// entirely masked yields zeros.
Var softmax(Var a, const Tensor* mask = nullptr);
Var layernorm(Var x, Var gamma, Var beta, double eps = 1e-5);
Var embedding(Var table, std::span<const int> indices);
Var concat_rows(std::span<const Var> parts);
Var concat_cols(std::span<const Var> parts);
Var slice_rows(Var a, int begin, int end);
Var slice_cols(Var a, int begin, int end);
Var gather_rows(Var a, std::span<const int> rows);
Var sum(Var a);
/// Mean over rows with valid[r] != 0 of -log softmax(logits[r])[targets[r]].
Var cross_entropy(Var logits, std::span<const int> targets, std::span<const char> valid);
/// Mean over valid rows and all columns of (pred - target)^2.
Var mse(Var pred, const Tensor& target, std::span<const char> valid);

double gelu_value(double x);

} // namespace medt::ag
