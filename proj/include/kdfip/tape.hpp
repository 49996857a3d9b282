// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <limits>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "kdfip/tensor.hpp"

namespace kdfip {

/// Handle to a node recorded on a Tape.
struct Var {
    static constexpr std::size_t npos = std::numeric_limits<std::size_t>::max();
    std::size_t id = npos;
    bool valid() const { return id != npos; }
};

enum class Op {
    Leaf,
    MatMul,
    Add,
    Mul,
    Relu,
    Tanh,
    LayerNorm,
    Softmax,
    LogSoftmax,
    GatherRows,
    Mean,
    Concat,
    Scale,
};

const char *op_name(Op op);

/// Gradients of a scalar with respect to every registered parameter.
struct Gradients {
    std::map<std::string, Tensor> by_name;
    /// Node ids in the order backward visited them.
    std::vector<std::size_t> visit_order;

    const Tensor &operator[](const std::string &name) const;
};

/// Append-only record of primitive applications on 2-D tensors. Creation order
/// is a topological order, so backward simply walks the record in reverse.
/// All primitives are broadcasting-free.
class Tape {
  public:
    static constexpr double kLayerNormEps = 1e-5;

    /// Registers a named trainable leaf.
    Var param(const std::string &name, Tensor value);
    /// Registers a leaf that never receives a gradient.
    Var constant(Tensor value);

    Var matmul(Var a, Var b);
    Var add(Var a, Var b);
    Var mul(Var a, Var b);
    Var relu(Var x);
    Var tanh(Var x);
    /// Row-wise (x - mean) / sqrt(var + eps), no affine.
    Var layer_norm(Var x);
    Var softmax(Var x);
    /// Row-wise, max-subtracted.
    Var log_softmax(Var x);
    /// out[i,:] = x[index[i],:]
    Var gather_rows(Var x, std::vector<std::size_t> index);
    /// axis 0 reduces rows (R x C -> 1 x C); axis 1 reduces columns (R x C -> R x 1).
    Var mean(Var x, int axis);
    Var concat(std::span<const Var> xs, int axis);
    Var scale(Var x, double s);

    const Tensor &value(Var v) const;
    std::size_t size() const { return nodes_.size(); }
    const std::vector<std::string> &parameter_names() const { return param_names_; }

    /// Reverse-mode sweep from a one-element output. Parameters not on the path
    /// from `output` get zero gradients.
    Gradients backward(Var output) const;

  private:
    struct Node {
        Op op = Op::Leaf;
        std::vector<std::size_t> inputs;
        Tensor value;
        bool needs_grad = false;
        std::string param_name; // non-empty for registered parameters
        // op-specific payload
        std::vector<std::size_t> index;
        std::vector<double> saved; // per-row inverse std for layer norm
        double scalar = 0.0;
        int axis = 0;
    };

    Var push(Node node);
    const Node &node(Var v) const;
    void check_finite(const Node &n) const;

    std::vector<Node> nodes_;
    std::vector<std::string> param_names_;
    std::map<std::string, std::size_t> param_ids_;
};

} // namespace kdfip
