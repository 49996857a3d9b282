// SPDX-License-Identifier: Apache-2.0
#include "kdfip/tape.hpp"

#include <algorithm>
#include <cmath>

#include "kdfip/kernels.hpp"

namespace kdfip {

namespace {

void require_matrix(const char *op, const Tensor &t) {
    if (t.rank() != 2)
        throw ShapeError(std::string(op) + ": expected a matrix, got shape " +
                         shape_str(t.shape()));
}

void require_same(const char *op, const Tensor &a, const Tensor &b) {
    if (a.shape() != b.shape())
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                         " vs " + shape_str(b.shape()));
}

void accumulate(Tensor &dst, const Tensor &src) {
    if (dst.numel() == 0) {
        dst = src;
        return;
    }
    for (std::size_t i = 0; i < dst.numel(); ++i)
        dst[i] += src[i];
}

} // namespace

const char *op_name(Op op) {
    switch (op) {
    case Op::Leaf: return "leaf";
    case Op::MatMul: return "matmul";
    case Op::Add: return "add";
    case Op::Mul: return "mul";
    case Op::Relu: return "relu";
    case Op::Tanh: return "tanh";
    case Op::LayerNorm: return "layer_norm";
    case Op::Softmax: return "softmax";
    case Op::LogSoftmax: return "log_softmax";
    case Op::GatherRows: return "gather_rows";
    case Op::Mean: return "mean";
    case Op::Concat: return "concat";
    case Op::Scale: return "scale";
    }
    return "?";
}

const Tensor &Gradients::operator[](const std::string &name) const {
    auto it = by_name.find(name);
    if (it == by_name.end())
        throw std::out_of_range("no gradient for parameter '" + name + "'");
    return it->second;
}

Var Tape::push(Node n) {
    check_finite(n);
    nodes_.push_back(std::move(n));
    return Var{nodes_.size() - 1};
}

const Tape::Node &Tape::node(Var v) const {
    if (v.id >= nodes_.size())
        throw std::out_of_range("Var does not belong to this tape");
    return nodes_[v.id];
}

void Tape::check_finite(const Node &n) const {
    if (!n.value.all_finite())
        throw NonFiniteError(std::string(op_name(n.op)) + ": produced a non-finite value");
}

const Tensor &Tape::value(Var v) const { return node(v).value; }

Var Tape::param(const std::string &name, Tensor value) {
    require_matrix("param", value);
    if (param_ids_.count(name))
        throw std::invalid_argument("parameter '" + name + "' registered twice");
    Node n;
    n.value = std::move(value);
    n.needs_grad = true;
    n.param_name = name;
    Var v = push(std::move(n));
    param_ids_[name] = v.id;
    param_names_.push_back(name);
    return v;
}

Var Tape::constant(Tensor value) {
    require_matrix("constant", value);
    Node n;
    n.value = std::move(value);
    return push(std::move(n));
}

Var Tape::matmul(Var a, Var b) {
    const Tensor &A = value(a);
    const Tensor &B = value(b);
    require_matrix("matmul", A);
    require_matrix("matmul", B);
    if (A.cols() != B.rows())
        throw ShapeError("matmul: inner dimensions differ " + shape_str(A.shape()) + " x " +
                         shape_str(B.shape()));
    Node n;
    n.op = Op::MatMul;
    n.inputs = {a.id, b.id};
    n.value = Tensor({A.rows(), B.cols()});
    kernels::parallel::matmul(A.data(), B.data(), n.value.data(), A.rows(), A.cols(), B.cols());
    n.needs_grad = node(a).needs_grad || node(b).needs_grad;
    return push(std::move(n));
}

Var Tape::add(Var a, Var b) {
    const Tensor &A = value(a);
    const Tensor &B = value(b);
    require_matrix("add", A);
    require_same("add", A, B);
    Node n;
    n.op = Op::Add;
    n.inputs = {a.id, b.id};
    n.value = A;
    for (std::size_t i = 0; i < B.numel(); ++i)
        n.value[i] += B[i];
    n.needs_grad = node(a).needs_grad || node(b).needs_grad;
    return push(std::move(n));
}

Var Tape::mul(Var a, Var b) {
    const Tensor &A = value(a);
    const Tensor &B = value(b);
    require_matrix("mul", A);
    require_same("mul", A, B);
    Node n;
    n.op = Op::Mul;
    n.inputs = {a.id, b.id};
    n.value = A;
    for (std::size_t i = 0; i < B.numel(); ++i)
        n.value[i] *= B[i];
    n.needs_grad = node(a).needs_grad || node(b).needs_grad;
    return push(std::move(n));
}

Var Tape::relu(Var x) {
    const Tensor &X = value(x);
    require_matrix("relu", X);
    Node n;
    n.op = Op::Relu;
    n.inputs = {x.id};
    n.value = X;
    for (auto &v : n.value.data())
        v = v > 0.0 ? v : 0.0;
    n.needs_grad = node(x).needs_grad;
    return push(std::move(n));
}

Var Tape::tanh(Var x) {
    const Tensor &X = value(x);
    require_matrix("tanh", X);
    Node n;
    n.op = Op::Tanh;
    n.inputs = {x.id};
    n.value = X;
    for (auto &v : n.value.data())
        v = std::tanh(v);
    n.needs_grad = node(x).needs_grad;
    return push(std::move(n));
}

Var Tape::layer_norm(Var x) {
    const Tensor &X = value(x);
    require_matrix("layer_norm", X);
    const std::size_t R = X.rows(), C = X.cols();
    Node n;
    n.op = Op::LayerNorm;
    n.inputs = {x.id};
    n.value = Tensor({R, C});
    n.saved.resize(R);
    for (std::size_t r = 0; r < R; ++r) {
        double mu = 0.0;
        for (std::size_t c = 0; c < C; ++c)
            mu += X.at(r, c);
        mu /= static_cast<double>(C);
        double var = 0.0;
        for (std::size_t c = 0; c < C; ++c) {
            const double d = X.at(r, c) - mu;
            var += d * d;
        }
        var /= static_cast<double>(C);
        const double inv = 1.0 / std::sqrt(var + kLayerNormEps);
        n.saved[r] = inv;
        for (std::size_t c = 0; c < C; ++c)
            n.value.at(r, c) = (X.at(r, c) - mu) * inv;
    }
    n.needs_grad = node(x).needs_grad;
    return push(std::move(n));
}

Var Tape::softmax(Var x) {
    const Tensor &X = value(x);
    require_matrix("softmax", X);
    const std::size_t R = X.rows(), C = X.cols();
    Node n;
    n.op = Op::Softmax;
    n.inputs = {x.id};
    n.value = Tensor({R, C});
    for (std::size_t r = 0; r < R; ++r) {
        double mx = X.at(r, 0);
        for (std::size_t c = 1; c < C; ++c)
            mx = std::max(mx, X.at(r, c));
        double z = 0.0;
        for (std::size_t c = 0; c < C; ++c) {
            const double e = std::exp(X.at(r, c) - mx);
            n.value.at(r, c) = e;
            z += e;
        }
        for (std::size_t c = 0; c < C; ++c)
            n.value.at(r, c) /= z;
    }
    n.needs_grad = node(x).needs_grad;
    return push(std::move(n));
}

Var Tape::log_softmax(Var x) {
    const Tensor &X = value(x);
    require_matrix("log_softmax", X);
    const std::size_t R = X.rows(), C = X.cols();
    Node n;
    n.op = Op::LogSoftmax;
    n.inputs = {x.id};
    n.value = Tensor({R, C});
    for (std::size_t r = 0; r < R; ++r) {
        double mx = X.at(r, 0);
        for (std::size_t c = 1; c < C; ++c)
            mx = std::max(mx, X.at(r, c));
        double z = 0.0;
        for (std::size_t c = 0; c < C; ++c)
            z += std::exp(X.at(r, c) - mx);
        const double lz = mx + std::log(z);
        for (std::size_t c = 0; c < C; ++c)
            n.value.at(r, c) = X.at(r, c) - lz;
    }
    n.needs_grad = node(x).needs_grad;
    return push(std::move(n));
}

Var Tape::gather_rows(Var x, std::vector<std::size_t> index) {
    const Tensor &X = value(x);
    require_matrix("gather_rows", X);
    const std::size_t C = X.cols();
    Node n;
    n.op = Op::GatherRows;
    n.inputs = {x.id};
    n.value = Tensor({index.size(), C});
    for (std::size_t i = 0; i < index.size(); ++i) {
        if (index[i] >= X.rows())
            throw ShapeError("gather_rows: index " + std::to_string(index[i]) +
                             " out of range for shape " + shape_str(X.shape()));
        std::copy_n(X.data().begin() + static_cast<std::ptrdiff_t>(index[i] * C), C,
                    n.value.data().begin() + static_cast<std::ptrdiff_t>(i * C));
    }
    n.index = std::move(index);
    n.needs_grad = node(x).needs_grad;
    return push(std::move(n));
}

Var Tape::mean(Var x, int axis) {
    const Tensor &X = value(x);
    require_matrix("mean", X);
    if (axis != 0 && axis != 1)
        throw ShapeError("mean: axis must be 0 or 1, got " + std::to_string(axis));
    const std::size_t R = X.rows(), C = X.cols();
    Node n;
    n.op = Op::Mean;
    n.inputs = {x.id};
    n.axis = axis;
    if (axis == 0) {
        n.value = Tensor({1, C});
        for (std::size_t r = 0; r < R; ++r)
            for (std::size_t c = 0; c < C; ++c)
                n.value[c] += X.at(r, c);
        for (auto &v : n.value.data())
            v /= static_cast<double>(R);
    } else {
        n.value = Tensor({R, 1});
        for (std::size_t r = 0; r < R; ++r) {
            double s = 0.0;
            for (std::size_t c = 0; c < C; ++c)
                s += X.at(r, c);
            n.value[r] = s / static_cast<double>(C);
        }
    }
    n.needs_grad = node(x).needs_grad;
    return push(std::move(n));
}

Var Tape::concat(std::span<const Var> xs, int axis) {
    if (xs.empty())
        throw ShapeError("concat: no operands");
    if (axis != 0 && axis != 1)
        throw ShapeError("concat: axis must be 0 or 1, got " + std::to_string(axis));
    Node n;
    n.op = Op::Concat;
    n.axis = axis;
    const Tensor &first = value(xs[0]);
    require_matrix("concat", first);
    std::size_t R = first.rows(), C = first.cols();
    for (std::size_t i = 1; i < xs.size(); ++i) {
        const Tensor &t = value(xs[i]);
        require_matrix("concat", t);
        if (axis == 0) {
            if (t.cols() != C)
                throw ShapeError("concat(axis=0): column mismatch " + shape_str(first.shape()) +
                                 " vs " + shape_str(t.shape()));
            R += t.rows();
        } else {
            if (t.rows() != R)
                throw ShapeError("concat(axis=1): row mismatch " + shape_str(first.shape()) +
                                 " vs " + shape_str(t.shape()));
            C += t.cols();
        }
    }
    n.value = Tensor({R, C});
    std::size_t offset = 0;
    for (Var v : xs) {
        const Tensor &t = value(v);
        n.inputs.push_back(v.id);
        n.needs_grad = n.needs_grad || node(v).needs_grad;
        if (axis == 0) {
            std::copy(t.data().begin(), t.data().end(),
                      n.value.data().begin() + static_cast<std::ptrdiff_t>(offset * C));
            offset += t.rows();
        } else {
            for (std::size_t r = 0; r < R; ++r)
                for (std::size_t c = 0; c < t.cols(); ++c)
                    n.value.at(r, offset + c) = t.at(r, c);
            offset += t.cols();
        }
    }
    return push(std::move(n));
}

Var Tape::scale(Var x, double s) {
    const Tensor &X = value(x);
    require_matrix("scale", X);
    Node n;
    n.op = Op::Scale;
    n.inputs = {x.id};
    n.scalar = s;
    n.value = X;
    for (auto &v : n.value.data())
        v *= s;
    n.needs_grad = node(x).needs_grad;
    return push(std::move(n));
}

Gradients Tape::backward(Var output) const {
    const Node &out = node(output);
    if (out.value.numel() != 1)
        throw ShapeError("backward: output must be a scalar, got shape " +
                         shape_str(out.value.shape()));

    std::vector<Tensor> grads(nodes_.size());
    grads[output.id] = Tensor(out.value.shape(), 1.0);

    Gradients result;
    for (std::size_t id = output.id + 1; id-- > 0;) {
        const Node &n = nodes_[id];
        if (!n.needs_grad || grads[id].numel() == 0)
            continue;
        result.visit_order.push_back(id);
        const Tensor &dy = grads[id];

        auto want = [&](std::size_t k) { return nodes_[n.inputs[k]].needs_grad; };
        auto input = [&](std::size_t k) -> const Tensor & { return nodes_[n.inputs[k]].value; };
        auto send = [&](std::size_t k, const Tensor &g) { accumulate(grads[n.inputs[k]], g); };

        switch (n.op) {
        case Op::Leaf:
            break;
        case Op::MatMul: {
            const Tensor &A = input(0);
            const Tensor &B = input(1);
            const std::size_t m = A.rows(), k = A.cols(), cols = B.cols();
            if (want(0)) {
                Tensor dA({m, k});
                kernels::parallel::matmul_nt(dy.data(), B.data(), dA.data(), m, cols, k);
                send(0, dA);
            }
            if (want(1)) {
                Tensor dB({k, cols});
                kernels::parallel::matmul_tn(A.data(), dy.data(), dB.data(), k, m, cols);
                send(1, dB);
            }
            break;
        }
        case Op::Add:
            if (want(0))
                send(0, dy);
            if (want(1))
                send(1, dy);
            break;
        case Op::Mul: {
            for (std::size_t k = 0; k < 2; ++k) {
                if (!want(k))
                    continue;
                const Tensor &other = input(1 - k);
                Tensor g = dy;
                for (std::size_t i = 0; i < g.numel(); ++i)
                    g[i] *= other[i];
                send(k, g);
            }
            break;
        }
        case Op::Relu: {
            const Tensor &X = input(0);
            Tensor g = dy;
            for (std::size_t i = 0; i < g.numel(); ++i)
                if (!(X[i] > 0.0))
                    g[i] = 0.0;
            send(0, g);
            break;
        }
        case Op::Tanh: {
            Tensor g = dy;
            for (std::size_t i = 0; i < g.numel(); ++i)
                g[i] *= 1.0 - n.value[i] * n.value[i];
            send(0, g);
            break;
        }
        case Op::LayerNorm: {
            const std::size_t R = n.value.rows(), C = n.value.cols();
            Tensor g({R, C});
            for (std::size_t r = 0; r < R; ++r) {
                double mean_dy = 0.0, mean_dyy = 0.0;
                for (std::size_t c = 0; c < C; ++c) {
                    mean_dy += dy.at(r, c);
                    mean_dyy += dy.at(r, c) * n.value.at(r, c);
                }
                mean_dy /= static_cast<double>(C);
                mean_dyy /= static_cast<double>(C);
                for (std::size_t c = 0; c < C; ++c)
                    g.at(r, c) = n.saved[r] * (dy.at(r, c) - mean_dy - n.value.at(r, c) * mean_dyy);
            }
            send(0, g);
            break;
        }
        case Op::Softmax: {
            const std::size_t R = n.value.rows(), C = n.value.cols();
            Tensor g({R, C});
            for (std::size_t r = 0; r < R; ++r) {
                double dot = 0.0;
                for (std::size_t c = 0; c < C; ++c)
                    dot += dy.at(r, c) * n.value.at(r, c);
                for (std::size_t c = 0; c < C; ++c)
                    g.at(r, c) = n.value.at(r, c) * (dy.at(r, c) - dot);
            }
            send(0, g);
            break;
        }
        case Op::LogSoftmax: {
            const std::size_t R = n.value.rows(), C = n.value.cols();
            Tensor g({R, C});
            for (std::size_t r = 0; r < R; ++r) {
                double total = 0.0;
                for (std::size_t c = 0; c < C; ++c)
                    total += dy.at(r, c);
                for (std::size_t c = 0; c < C; ++c)
                    g.at(r, c) = dy.at(r, c) - std::exp(n.value.at(r, c)) * total;
            }
            send(0, g);
            break;
        }
        case Op::GatherRows: {
            const Tensor &X = input(0);
            const std::size_t C = X.cols();
            Tensor g(X.shape());
            for (std::size_t i = 0; i < n.index.size(); ++i)
                for (std::size_t c = 0; c < C; ++c)
                    g.at(n.index[i], c) += dy.at(i, c);
            send(0, g);
            break;
        }
        case Op::Mean: {
            const Tensor &X = input(0);
            const std::size_t R = X.rows(), C = X.cols();
            Tensor g({R, C});
            for (std::size_t r = 0; r < R; ++r)
                for (std::size_t c = 0; c < C; ++c)
                    g.at(r, c) = n.axis == 0 ? dy[c] / static_cast<double>(R)
                                             : dy[r] / static_cast<double>(C);
            send(0, g);
            break;
        }
        case Op::Concat: {
            std::size_t offset = 0;
            for (std::size_t k = 0; k < n.inputs.size(); ++k) {
                const Tensor &X = input(k);
                if (want(k)) {
                    Tensor g(X.shape());
                    for (std::size_t r = 0; r < X.rows(); ++r)
                        for (std::size_t c = 0; c < X.cols(); ++c)
                            g.at(r, c) = n.axis == 0 ? dy.at(offset + r, c) : dy.at(r, offset + c);
                    send(k, g);
                }
                offset += n.axis == 0 ? X.rows() : X.cols();
            }
            break;
        }
        case Op::Scale: {
            Tensor g = dy;
            for (auto &v : g.data())
                v *= n.scalar;
            send(0, g);
            break;
        }
        }
    }

    for (const auto &name : param_names_) {
        const std::size_t id = param_ids_.at(name);
        Tensor g = grads[id];
        if (g.numel() == 0)
            g = Tensor(nodes_[id].value.shape());
        result.by_name.emplace(name, std::move(g));
    }
    return result;
}

} // namespace kdfip
