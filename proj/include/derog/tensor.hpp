#pragma once

// Dense double-precision tensors plus a recorded-tape reverse-mode autodiff
// engine. The primitive set is closed: everything the model computes is built
// from the ops below, so one backward switch covers the whole system.
//
// Conventions:
//  * tensors are row-major, 1-D {n} or 2-D {r,c}; scalars are {1}
//  * a Tape records define-by-run; it is rebuilt per forward pass
//  * gradients accumulate across reuse of the same tensor
//  * tensors produced on another (or no) tape enter as constants, which is
//    exactly the detach semantics the M-step needs

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <string>
#include <unordered_map>
#include <vector>

#include <derog/errors.hpp>

namespace derog {

using Shape = std::vector<long>;

inline long shape_numel(const Shape& s) {
    long n = 1;
    for (long d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::string out = "[";
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(s[i]);
    }
    return out + "]";
}

enum class Op {
    matmul,
    add,
    sub,
    elementwise_mul,
    scalar_mul,
    rowwise_concat,
    relu,
    sigmoid,
    row_softmax,
    log,
    exp,
    sum_all,
    mean_all,
    sum_rows,
    l1_norm_rows,
    index_rows,
    scatter_sum_rows,
    grad_reverse,
    leaf,  // internal: tape entry point for external tensors
};

inline const char* op_name(Op k) {
    switch (k) {
        case Op::matmul: return "matmul";
        case Op::add: return "add";
        case Op::sub: return "sub";
        case Op::elementwise_mul: return "elementwise_mul";
        case Op::scalar_mul: return "scalar_mul";
        case Op::rowwise_concat: return "rowwise_concat";
        case Op::relu: return "relu";
        case Op::sigmoid: return "sigmoid";
        case Op::row_softmax: return "row_softmax";
        case Op::log: return "log";
        case Op::exp: return "exp";
        case Op::sum_all: return "sum_all";
        case Op::mean_all: return "mean_all";
        case Op::sum_rows: return "sum_rows";
        case Op::l1_norm_rows: return "l1_norm_rows";
        case Op::index_rows: return "index_rows";
        case Op::scatter_sum_rows: return "scatter_sum_rows";
        case Op::grad_reverse: return "grad_reverse";
        case Op::leaf: return "leaf";
    }
    return "?";
}

constexpr double kLogClamp = 1e-12;

// ---- forward kernels, templated so finite differences can replay the tape in
//      extended precision ------------------------------------------------------

namespace kern {

template <class T>
void matmul(const T* a, const T* b, T* c, long m, long k, long n) {
    for (long i = 0; i < m; ++i) {
        const T* ar = a + i * k;
        T* cr = c + i * n;
        for (long p = 0; p < k; ++p) {
            T av = ar[p];
            const T* br = b + p * n;
            for (long j = 0; j < n; ++j) cr[j] += av * br[j];
        }
    }
}

template <class T>
void add(const T* a, const T* b, T* o, long r, long c, bool brow) {
    for (long i = 0; i < r; ++i)
        for (long j = 0; j < c; ++j) o[i * c + j] = a[i * c + j] + b[(brow ? 0 : i) * c + j];
}

template <class T>
void sub(const T* a, const T* b, T* o, long r, long c, bool brow) {
    for (long i = 0; i < r; ++i)
        for (long j = 0; j < c; ++j) o[i * c + j] = a[i * c + j] - b[(brow ? 0 : i) * c + j];
}

template <class T>
void mul(const T* a, const T* b, T* o, long n) {
    for (long i = 0; i < n; ++i) o[i] = a[i] * b[i];
}

template <class T>
void scal(const T* a, T s, T* o, long n) {
    for (long i = 0; i < n; ++i) o[i] = s * a[i];
}

template <class T>
void relu(const T* a, T* o, long n) {
    for (long i = 0; i < n; ++i) o[i] = a[i] > T(0) ? a[i] : T(0);
}

template <class T>
void sigmoid(const T* a, T* o, long n) {
    for (long i = 0; i < n; ++i) o[i] = T(1) / (T(1) + std::exp(-a[i]));
}

template <class T>
void log_clamped(const T* a, T* o, long n) {
    for (long i = 0; i < n; ++i) o[i] = std::log(a[i] < T(kLogClamp) ? T(kLogClamp) : a[i]);
}

template <class T>
void exp_(const T* a, T* o, long n) {
    for (long i = 0; i < n; ++i) o[i] = std::exp(a[i]);
}

template <class T>
void row_softmax(const T* a, T* o, long r, long c) {
    for (long i = 0; i < r; ++i) {
        const T* x = a + i * c;
        T* p = o + i * c;
        T m = x[0];
        for (long j = 1; j < c; ++j) m = std::max(m, x[j]);
        T s = T(0);
        for (long j = 0; j < c; ++j) {
            p[j] = std::exp(x[j] - m);
            s += p[j];
        }
        for (long j = 0; j < c; ++j) p[j] /= s;
    }
}

template <class T>
T sum(const T* a, long n) {
    T s = T(0);
    for (long i = 0; i < n; ++i) s += a[i];
    return s;
}

template <class T>
void sum_rows(const T* a, T* o, long r, long c) {
    for (long i = 0; i < r; ++i) o[i] = sum(a + i * c, c);
}

template <class T>
void l1_rows(const T* a, T* o, long r, long c) {
    for (long i = 0; i < r; ++i) {
        T s = T(0);
        for (long j = 0; j < c; ++j) s += a[i * c + j] < T(0) ? -a[i * c + j] : a[i * c + j];
        o[i] = s;
    }
}

template <class T>
void index_rows(const T* a, T* o, const long* idx, long k, long c) {
    for (long i = 0; i < k; ++i)
        for (long j = 0; j < c; ++j) o[i * c + j] = a[idx[i] * c + j];
}

template <class T>
void scatter_rows(const T* a, T* o, const long* idx, long r, long c) {
    for (long i = 0; i < r; ++i)
        for (long j = 0; j < c; ++j) o[idx[i] * c + j] += a[i * c + j];
}

}  // namespace kern

// ---- Tensor -------------------------------------------------------------------

struct Tensor {
    Shape shape;
    std::shared_ptr<std::vector<double>> data;
    bool requires_grad = false;
    std::weak_ptr<void> tape_token;  // identity of the tape that produced this
    int node = -1;

    Tensor() = default;
    Tensor(Shape s, std::vector<double> v, bool rg = false)
        : shape(std::move(s)),
          data(std::make_shared<std::vector<double>>(std::move(v))),
          requires_grad(rg) {
        if (shape_numel(shape) != static_cast<long>(data->size()))
            throw shape_error("tensor: shape " + shape_str(shape) + " does not match data length " +
                              std::to_string(data->size()));
    }

    static Tensor zeros(Shape s, bool rg = false) {
        long n = shape_numel(s);
        return Tensor(std::move(s), std::vector<double>(static_cast<std::size_t>(n), 0.0), rg);
    }
    static Tensor full(Shape s, double v, bool rg = false) {
        long n = shape_numel(s);
        return Tensor(std::move(s), std::vector<double>(static_cast<std::size_t>(n), v), rg);
    }
    static Tensor scalar(double v, bool rg = false) { return Tensor({1}, {v}, rg); }
    static Tensor row(std::vector<double> v, bool rg = false) {
        long n = static_cast<long>(v.size());
        return Tensor({1, n}, std::move(v), rg);
    }
    static Tensor matrix(long r, long c, std::vector<double> v, bool rg = false) {
        return Tensor({r, c}, std::move(v), rg);
    }

    long rows() const { return shape.size() >= 2 ? shape[0] : 1; }
    long cols() const { return shape.empty() ? 0 : shape.back(); }
    long numel() const { return shape_numel(shape); }
    double& at(long r, long c) { return (*data)[static_cast<std::size_t>(r * cols() + c)]; }
    double at(long r, long c) const { return (*data)[static_cast<std::size_t>(r * cols() + c)]; }
    double item() const {
        if (numel() != 1) throw shape_error("item: tensor " + shape_str(shape) + " is not scalar");
        return (*data)[0];
    }

    Tensor detach() const {
        Tensor t;
        t.shape = shape;
        t.data = data;
        return t;
    }
};

struct OpAttrs {
    double scalar = 0.0;      // scalar_mul constant / grad_reverse lambda
    std::vector<long> index;  // index_rows / scatter_sum_rows
    long segments = 0;        // scatter_sum_rows output row count
};

// ---- GradMap ------------------------------------------------------------------

class Tape;

class GradMap {
  public:
    bool contains(const Tensor& t) const { return g_.count(t.data.get()) != 0; }

    const std::vector<double>& get(const Tensor& t) const {
        auto it = g_.find(t.data.get());
        if (it == g_.end()) throw usage_error("GradMap: tensor has no recorded gradient");
        return it->second;
    }

    std::vector<double> get_or_zeros(const Tensor& t) const {
        auto it = g_.find(t.data.get());
        if (it != g_.end()) return it->second;
        return std::vector<double>(static_cast<std::size_t>(t.numel()), 0.0);
    }

  private:
    friend class Tape;
    std::unordered_map<const void*, std::vector<double>> g_;
};

// ---- Tape ---------------------------------------------------------------------

class Tape {
  public:
    explicit Tape(bool recording = true)
        : recording_(recording), token_(std::make_shared<char>(0)) {}

    bool recording() const { return recording_; }
    std::size_t size() const { return nodes_.size(); }

    Tensor apply(Op kind, const std::vector<Tensor>& inputs, const OpAttrs& attrs = {});

    // convenience wrappers over apply()
    Tensor matmul(const Tensor& a, const Tensor& b) { return apply(Op::matmul, {a, b}); }
    Tensor add(const Tensor& a, const Tensor& b) { return apply(Op::add, {a, b}); }
    Tensor sub(const Tensor& a, const Tensor& b) { return apply(Op::sub, {a, b}); }
    Tensor mul(const Tensor& a, const Tensor& b) { return apply(Op::elementwise_mul, {a, b}); }
    Tensor scalar_mul(const Tensor& a, double s) {
        OpAttrs at;
        at.scalar = s;
        return apply(Op::scalar_mul, {a}, at);
    }
    Tensor scalar_mul(const Tensor& a, const Tensor& s) { return apply(Op::scalar_mul, {a, s}); }
    Tensor concat(const std::vector<Tensor>& parts) { return apply(Op::rowwise_concat, parts); }
    Tensor relu(const Tensor& a) { return apply(Op::relu, {a}); }
    Tensor sigmoid(const Tensor& a) { return apply(Op::sigmoid, {a}); }
    Tensor row_softmax(const Tensor& a) { return apply(Op::row_softmax, {a}); }
    Tensor log(const Tensor& a) { return apply(Op::log, {a}); }
    Tensor exp(const Tensor& a) { return apply(Op::exp, {a}); }
    Tensor sum_all(const Tensor& a) { return apply(Op::sum_all, {a}); }
    Tensor mean_all(const Tensor& a) { return apply(Op::mean_all, {a}); }
    Tensor sum_rows(const Tensor& a) { return apply(Op::sum_rows, {a}); }
    Tensor l1_norm_rows(const Tensor& a) { return apply(Op::l1_norm_rows, {a}); }
    Tensor index_rows(const Tensor& a, std::vector<long> idx) {
        OpAttrs at;
        at.index = std::move(idx);
        return apply(Op::index_rows, {a}, at);
    }
    Tensor scatter_sum_rows(const Tensor& a, std::vector<long> idx, long segments) {
        OpAttrs at;
        at.index = std::move(idx);
        at.segments = segments;
        return apply(Op::scatter_sum_rows, {a}, at);
    }
    Tensor grad_reverse(const Tensor& a, double lambda) {
        OpAttrs at;
        at.scalar = lambda;
        return apply(Op::grad_reverse, {a}, at);
    }

    GradMap backward(const Tensor& loss);

    // Re-evaluates the recorded graph with one leaf coordinate shifted by
    // delta, in long double. This is the finite-difference side of gradcheck:
    // identical function semantics, lower noise floor.
    long double replay_value(const Tensor& loss, const Tensor& leaf, long coord,
                             double delta) const;

  private:
    struct Node {
        Op kind = Op::leaf;
        Shape shape;
        std::vector<int> ins;
        std::shared_ptr<const std::vector<double>> val;
        double scalar = 0.0;
        std::vector<long> index;
        long segments = 0;
        bool param = false;  // leaf carrying requires_grad
        std::vector<double> grad;
    };

    bool on_this_tape(const Tensor& t) const {
        if (t.node < 0) return false;
        auto p = t.tape_token.lock();
        return p && p.get() == token_.get();
    }

    int ensure_node(const Tensor& t) {
        if (on_this_tape(t)) return t.node;
        auto it = leaf_ids_.find(t.data.get());
        if (it != leaf_ids_.end()) return it->second;
        Node n;
        n.kind = Op::leaf;
        n.shape = t.shape;
        n.val = t.data;
        n.param = t.requires_grad;
        nodes_.push_back(std::move(n));
        int id = static_cast<int>(nodes_.size()) - 1;
        leaf_ids_.emplace(t.data.get(), id);
        return id;
    }

    std::vector<double>& grad_buf(int id) {
        auto& g = nodes_[static_cast<std::size_t>(id)].grad;
        if (g.empty()) g.assign(static_cast<std::size_t>(shape_numel(nodes_[static_cast<std::size_t>(id)].shape)), 0.0);
        return g;
    }

    std::vector<Node> nodes_;
    std::unordered_map<const void*, int> leaf_ids_;
    bool recording_;
    bool consumed_ = false;
    std::shared_ptr<void> token_;
};

// ---- apply: validation + forward ------------------------------------------------

inline Tensor Tape::apply(Op kind, const std::vector<Tensor>& inputs, const OpAttrs& attrs) {
    auto bad = [&](const std::string& msg) {
        std::string s = std::string(op_name(kind)) + ": " + msg;
        for (const auto& t : inputs) s += " " + shape_str(t.shape);
        return shape_error(s);
    };
    auto need = [&](std::size_t n) {
        if (inputs.size() != n)
            throw usage_error(std::string(op_name(kind)) + ": expected " + std::to_string(n) +
                              " inputs, got " + std::to_string(inputs.size()));
    };

    Shape oshape;
    std::vector<double> out;

    switch (kind) {
        case Op::matmul: {
            need(2);
            const Tensor &a = inputs[0], &b = inputs[1];
            if (a.cols() != b.rows()) throw bad("inner dimensions differ");
            oshape = {a.rows(), b.cols()};
            out.assign(static_cast<std::size_t>(a.rows() * b.cols()), 0.0);
            kern::matmul(a.data->data(), b.data->data(), out.data(), a.rows(), a.cols(), b.cols());
            break;
        }
        case Op::add:
        case Op::sub: {
            need(2);
            const Tensor &a = inputs[0], &b = inputs[1];
            bool brow = b.rows() == 1 && a.rows() > 1;
            if (b.cols() != a.cols() || (!brow && b.rows() != a.rows()))
                throw bad("operand shapes incompatible");
            oshape = a.shape;
            out.resize(static_cast<std::size_t>(a.numel()));
            if (kind == Op::add)
                kern::add(a.data->data(), b.data->data(), out.data(), a.rows(), a.cols(), brow);
            else
                kern::sub(a.data->data(), b.data->data(), out.data(), a.rows(), a.cols(), brow);
            break;
        }
        case Op::elementwise_mul: {
            need(2);
            const Tensor &a = inputs[0], &b = inputs[1];
            if (a.rows() != b.rows() || a.cols() != b.cols()) throw bad("operand shapes differ");
            oshape = a.shape;
            out.resize(static_cast<std::size_t>(a.numel()));
            kern::mul(a.data->data(), b.data->data(), out.data(), a.numel());
            break;
        }
        case Op::scalar_mul: {
            if (inputs.size() != 1 && inputs.size() != 2)
                throw usage_error("scalar_mul: expected 1 or 2 inputs");
            const Tensor& a = inputs[0];
            double s = attrs.scalar;
            if (inputs.size() == 2) {
                if (inputs[1].numel() != 1) throw bad("scalar operand must have one element");
                s = (*inputs[1].data)[0];
            }
            oshape = a.shape;
            out.resize(static_cast<std::size_t>(a.numel()));
            kern::scal(a.data->data(), s, out.data(), a.numel());
            break;
        }
        case Op::rowwise_concat: {
            if (inputs.empty()) throw usage_error("rowwise_concat: no inputs");
            long r = inputs[0].rows(), ctot = 0;
            for (const auto& t : inputs) {
                if (t.rows() != r) throw bad("row counts differ");
                ctot += t.cols();
            }
            oshape = {r, ctot};
            out.resize(static_cast<std::size_t>(r * ctot));
            long off = 0;
            for (const auto& t : inputs) {
                long c = t.cols();
                for (long i = 0; i < r; ++i)
                    std::copy_n(t.data->data() + i * c, c, out.data() + i * ctot + off);
                off += c;
            }
            break;
        }
        case Op::relu:
        case Op::sigmoid:
        case Op::log:
        case Op::exp:
        case Op::grad_reverse: {
            need(1);
            const Tensor& a = inputs[0];
            oshape = a.shape;
            out.resize(static_cast<std::size_t>(a.numel()));
            if (kind == Op::relu) kern::relu(a.data->data(), out.data(), a.numel());
            else if (kind == Op::sigmoid) kern::sigmoid(a.data->data(), out.data(), a.numel());
            else if (kind == Op::log) kern::log_clamped(a.data->data(), out.data(), a.numel());
            else if (kind == Op::exp) kern::exp_(a.data->data(), out.data(), a.numel());
            else {
                if (!std::isfinite(attrs.scalar))
                    throw config_error("grad_reverse: lambda must be finite");
                std::copy(a.data->begin(), a.data->end(), out.begin());
            }
            break;
        }
        case Op::row_softmax: {
            need(1);
            const Tensor& a = inputs[0];
            if (a.cols() < 1) throw bad("needs at least one column");
            oshape = a.shape;
            out.resize(static_cast<std::size_t>(a.numel()));
            kern::row_softmax(a.data->data(), out.data(), a.rows(), a.cols());
            break;
        }
        case Op::sum_all:
        case Op::mean_all: {
            need(1);
            const Tensor& a = inputs[0];
            double s = kern::sum(a.data->data(), a.numel());
            oshape = {1};
            out = {kind == Op::sum_all ? s : s / static_cast<double>(a.numel())};
            break;
        }
        case Op::sum_rows:
        case Op::l1_norm_rows: {
            need(1);
            const Tensor& a = inputs[0];
            oshape = {a.rows(), 1};
            out.resize(static_cast<std::size_t>(a.rows()));
            if (kind == Op::sum_rows) kern::sum_rows(a.data->data(), out.data(), a.rows(), a.cols());
            else kern::l1_rows(a.data->data(), out.data(), a.rows(), a.cols());
            break;
        }
        case Op::index_rows: {
            need(1);
            const Tensor& a = inputs[0];
            if (attrs.index.empty()) throw usage_error("index_rows: empty index");
            for (long i : attrs.index)
                if (i < 0 || i >= a.rows())
                    throw bad("index " + std::to_string(i) + " out of range for");
            long k = static_cast<long>(attrs.index.size());
            oshape = {k, a.cols()};
            out.resize(static_cast<std::size_t>(k * a.cols()));
            kern::index_rows(a.data->data(), out.data(), attrs.index.data(), k, a.cols());
            break;
        }
        case Op::scatter_sum_rows: {
            need(1);
            const Tensor& a = inputs[0];
            if (static_cast<long>(attrs.index.size()) != a.rows())
                throw bad("index length " + std::to_string(attrs.index.size()) +
                          " does not match rows of");
            if (attrs.segments < 1) throw usage_error("scatter_sum_rows: segments must be >= 1");
            for (long i : attrs.index)
                if (i < 0 || i >= attrs.segments)
                    throw bad("segment id " + std::to_string(i) + " out of range for");
            oshape = {attrs.segments, a.cols()};
            out.assign(static_cast<std::size_t>(attrs.segments * a.cols()), 0.0);
            kern::scatter_rows(a.data->data(), out.data(), attrs.index.data(), a.rows(), a.cols());
            break;
        }
        default:
            throw config_error("apply_primitive: unknown kind " +
                               std::to_string(static_cast<int>(kind)));
    }

    Tensor result;
    result.shape = std::move(oshape);
    result.data = std::make_shared<std::vector<double>>(std::move(out));
    for (const auto& t : inputs) result.requires_grad = result.requires_grad || t.requires_grad;

    if (!recording_) {
        result.requires_grad = false;
        return result;
    }

    Node n;
    n.kind = kind;
    n.shape = result.shape;
    for (const auto& t : inputs) n.ins.push_back(ensure_node(t));
    n.val = result.data;
    n.scalar = attrs.scalar;
    n.index = attrs.index;
    n.segments = attrs.segments;
    nodes_.push_back(std::move(n));
    result.tape_token = token_;
    result.node = static_cast<int>(nodes_.size()) - 1;
    return result;
}

// ---- backward -------------------------------------------------------------------

inline GradMap Tape::backward(const Tensor& loss) {
    if (!on_this_tape(loss)) throw usage_error("backward: loss is not on this tape");
    if (loss.numel() != 1)
        throw shape_error("backward: loss must be scalar, got " + shape_str(loss.shape));
    if (consumed_) throw usage_error("backward: tape already consumed");
    consumed_ = true;

    nodes_[static_cast<std::size_t>(loss.node)].grad = {1.0};

    for (int id = loss.node; id >= 0; --id) {
        Node& n = nodes_[static_cast<std::size_t>(id)];
        if (n.kind == Op::leaf || n.grad.empty()) continue;
        const std::vector<double>& g = n.grad;

        auto in = [&](std::size_t i) -> const Node& { return nodes_[static_cast<std::size_t>(n.ins[i])]; };

        switch (n.kind) {
            case Op::matmul: {
                const Node &na = in(0), &nb = in(1);
                long m = na.shape.size() >= 2 ? na.shape[0] : 1;
                long k = na.shape.back();
                long nn = nb.shape.back();
                const std::vector<double>&A = *na.val, &B = *nb.val;
                auto& ga = grad_buf(n.ins[0]);
                for (long i = 0; i < m; ++i)
                    for (long p = 0; p < k; ++p) {
                        double s = 0;
                        for (long j = 0; j < nn; ++j) s += g[static_cast<std::size_t>(i * nn + j)] * B[static_cast<std::size_t>(p * nn + j)];
                        ga[static_cast<std::size_t>(i * k + p)] += s;
                    }
                auto& gb = grad_buf(n.ins[1]);
                for (long i = 0; i < m; ++i)
                    for (long p = 0; p < k; ++p) {
                        double av = A[static_cast<std::size_t>(i * k + p)];
                        if (av == 0.0) continue;
                        for (long j = 0; j < nn; ++j)
                            gb[static_cast<std::size_t>(p * nn + j)] += av * g[static_cast<std::size_t>(i * nn + j)];
                    }
                break;
            }
            case Op::add:
            case Op::sub: {
                double sign = n.kind == Op::add ? 1.0 : -1.0;
                long r = n.shape.size() >= 2 ? n.shape[0] : 1;
                long c = n.shape.back();
                auto& ga = grad_buf(n.ins[0]);
                for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
                const Node& nb = in(1);
                bool brow = (nb.shape.size() < 2 || nb.shape[0] == 1) && r > 1;
                auto& gb = grad_buf(n.ins[1]);
                if (brow) {
                    for (long i = 0; i < r; ++i)
                        for (long j = 0; j < c; ++j) gb[static_cast<std::size_t>(j)] += sign * g[static_cast<std::size_t>(i * c + j)];
                } else {
                    for (std::size_t i = 0; i < g.size(); ++i) gb[i] += sign * g[i];
                }
                break;
            }
            case Op::elementwise_mul: {
                const std::vector<double>&A = *in(0).val, &B = *in(1).val;
                auto& ga = grad_buf(n.ins[0]);
                for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * B[i];
                auto& gb = grad_buf(n.ins[1]);
                for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * A[i];
                break;
            }
            case Op::scalar_mul: {
                double s = n.scalar;
                if (n.ins.size() == 2) s = (*in(1).val)[0];
                auto& ga = grad_buf(n.ins[0]);
                for (std::size_t i = 0; i < g.size(); ++i) ga[i] += s * g[i];
                if (n.ins.size() == 2) {
                    const std::vector<double>& A = *in(0).val;
                    double acc = 0;
                    for (std::size_t i = 0; i < g.size(); ++i) acc += g[i] * A[i];
                    grad_buf(n.ins[1])[0] += acc;
                }
                break;
            }
            case Op::rowwise_concat: {
                long r = n.shape[0], ctot = n.shape[1], off = 0;
                for (std::size_t t = 0; t < n.ins.size(); ++t) {
                    long c = in(t).shape.back();
                    auto& gt = grad_buf(n.ins[t]);
                    for (long i = 0; i < r; ++i)
                        for (long j = 0; j < c; ++j)
                            gt[static_cast<std::size_t>(i * c + j)] += g[static_cast<std::size_t>(i * ctot + off + j)];
                    off += c;
                }
                break;
            }
            case Op::relu: {
                const std::vector<double>& X = *in(0).val;
                auto& ga = grad_buf(n.ins[0]);
                for (std::size_t i = 0; i < g.size(); ++i) ga[i] += X[i] > 0.0 ? g[i] : 0.0;
                break;
            }
            case Op::sigmoid: {
                const std::vector<double>& Y = *n.val;
                auto& ga = grad_buf(n.ins[0]);
                for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * Y[i] * (1.0 - Y[i]);
                break;
            }
            case Op::row_softmax: {
                const std::vector<double>& P = *n.val;
                long r = n.shape.size() >= 2 ? n.shape[0] : 1;
                long c = n.shape.back();
                auto& ga = grad_buf(n.ins[0]);
                for (long i = 0; i < r; ++i) {
                    double dot = 0;
                    for (long j = 0; j < c; ++j) dot += g[static_cast<std::size_t>(i * c + j)] * P[static_cast<std::size_t>(i * c + j)];
                    for (long j = 0; j < c; ++j)
                        ga[static_cast<std::size_t>(i * c + j)] +=
                            P[static_cast<std::size_t>(i * c + j)] * (g[static_cast<std::size_t>(i * c + j)] - dot);
                }
                break;
            }
            case Op::log: {
                const std::vector<double>& X = *in(0).val;
                auto& ga = grad_buf(n.ins[0]);
                for (std::size_t i = 0; i < g.size(); ++i)
                    ga[i] += X[i] >= kLogClamp ? g[i] / X[i] : 0.0;
                break;
            }
            case Op::exp: {
                const std::vector<double>& Y = *n.val;
                auto& ga = grad_buf(n.ins[0]);
                for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * Y[i];
                break;
            }
            case Op::sum_all: {
                auto& ga = grad_buf(n.ins[0]);
                for (auto& v : ga) v += g[0];
                break;
            }
            case Op::mean_all: {
                auto& ga = grad_buf(n.ins[0]);
                double s = g[0] / static_cast<double>(ga.size());
                for (auto& v : ga) v += s;
                break;
            }
            case Op::sum_rows: {
                long c = in(0).shape.back();
                auto& ga = grad_buf(n.ins[0]);
                long r = static_cast<long>(g.size());
                for (long i = 0; i < r; ++i)
                    for (long j = 0; j < c; ++j) ga[static_cast<std::size_t>(i * c + j)] += g[static_cast<std::size_t>(i)];
                break;
            }
            case Op::l1_norm_rows: {
                const std::vector<double>& X = *in(0).val;
                long c = in(0).shape.back();
                auto& ga = grad_buf(n.ins[0]);
                long r = static_cast<long>(g.size());
                for (long i = 0; i < r; ++i)
                    for (long j = 0; j < c; ++j) {
                        double x = X[static_cast<std::size_t>(i * c + j)];
                        double sg = x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0);
                        ga[static_cast<std::size_t>(i * c + j)] += g[static_cast<std::size_t>(i)] * sg;
                    }
                break;
            }
            case Op::index_rows: {
                long c = n.shape.back();
                long k = static_cast<long>(n.index.size());
                auto& ga = grad_buf(n.ins[0]);
                for (long i = 0; i < k; ++i)
                    for (long j = 0; j < c; ++j)
                        ga[static_cast<std::size_t>(n.index[static_cast<std::size_t>(i)] * c + j)] += g[static_cast<std::size_t>(i * c + j)];
                break;
            }
            case Op::scatter_sum_rows: {
                long c = n.shape.back();
                long r = static_cast<long>(n.index.size());
                auto& ga = grad_buf(n.ins[0]);
                for (long i = 0; i < r; ++i)
                    for (long j = 0; j < c; ++j)
                        ga[static_cast<std::size_t>(i * c + j)] += g[static_cast<std::size_t>(n.index[static_cast<std::size_t>(i)] * c + j)];
                break;
            }
            case Op::grad_reverse: {
                // Pure scale-and-negate, kept bitwise: first contribution is
                // assigned (not added to zero) so -0 survives at lambda = 0.
                bool fresh = in(0).grad.empty();
                auto& ga = grad_buf(n.ins[0]);
                if (fresh)
                    for (std::size_t i = 0; i < g.size(); ++i) ga[i] = -n.scalar * g[i];
                else
                    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += -n.scalar * g[i];
                break;
            }
            case Op::leaf:
                break;
        }
    }

    GradMap gm;
    for (auto& [ptr, id] : leaf_ids_) {
        Node& n = nodes_[static_cast<std::size_t>(id)];
        if (n.param && !n.grad.empty()) gm.g_.emplace(ptr, std::move(n.grad));
    }
    return gm;
}

// ---- extended-precision replay -----------------------------------------------

inline long double Tape::replay_value(const Tensor& loss, const Tensor& leaf, long coord,
                                      double delta) const {
    if (!on_this_tape(loss)) throw usage_error("replay_value: loss is not on this tape");
    auto it = leaf_ids_.find(leaf.data.get());
    if (it == leaf_ids_.end()) return static_cast<long double>((*loss.data)[0]);
    int target = it->second;

    using LD = long double;
    std::vector<std::vector<LD>> vals(static_cast<std::size_t>(loss.node) + 1);
    for (int id = 0; id <= loss.node; ++id) {
        const Node& n = nodes_[static_cast<std::size_t>(id)];
        auto& o = vals[static_cast<std::size_t>(id)];
        auto iv = [&](std::size_t i) -> const std::vector<LD>& { return vals[static_cast<std::size_t>(n.ins[i])]; };
        auto ishape = [&](std::size_t i) -> const Shape& { return nodes_[static_cast<std::size_t>(n.ins[i])].shape; };
        auto rows_of = [](const Shape& s) { return s.size() >= 2 ? s[0] : 1; };

        switch (n.kind) {
            case Op::leaf: {
                o.assign(n.val->begin(), n.val->end());
                if (id == target) o[static_cast<std::size_t>(coord)] += static_cast<LD>(delta);
                break;
            }
            case Op::matmul: {
                long m = rows_of(ishape(0)), k = ishape(0).back(), nn = ishape(1).back();
                o.assign(static_cast<std::size_t>(m * nn), LD(0));
                kern::matmul(iv(0).data(), iv(1).data(), o.data(), m, k, nn);
                break;
            }
            case Op::add:
            case Op::sub: {
                long r = rows_of(n.shape), c = n.shape.back();
                bool brow = rows_of(ishape(1)) == 1 && r > 1;
                o.resize(static_cast<std::size_t>(r * c));
                if (n.kind == Op::add) kern::add(iv(0).data(), iv(1).data(), o.data(), r, c, brow);
                else kern::sub(iv(0).data(), iv(1).data(), o.data(), r, c, brow);
                break;
            }
            case Op::elementwise_mul: {
                o.resize(iv(0).size());
                kern::mul(iv(0).data(), iv(1).data(), o.data(), static_cast<long>(o.size()));
                break;
            }
            case Op::scalar_mul: {
                LD s = n.ins.size() == 2 ? iv(1)[0] : static_cast<LD>(n.scalar);
                o.resize(iv(0).size());
                kern::scal(iv(0).data(), s, o.data(), static_cast<long>(o.size()));
                break;
            }
            case Op::rowwise_concat: {
                long r = n.shape[0], ctot = n.shape[1];
                o.resize(static_cast<std::size_t>(r * ctot));
                long off = 0;
                for (std::size_t t = 0; t < n.ins.size(); ++t) {
                    long c = ishape(t).back();
                    for (long i = 0; i < r; ++i)
                        std::copy_n(iv(t).data() + i * c, c, o.data() + i * ctot + off);
                    off += c;
                }
                break;
            }
            case Op::relu:
                o.resize(iv(0).size());
                kern::relu(iv(0).data(), o.data(), static_cast<long>(o.size()));
                break;
            case Op::sigmoid:
                o.resize(iv(0).size());
                kern::sigmoid(iv(0).data(), o.data(), static_cast<long>(o.size()));
                break;
            case Op::log:
                o.resize(iv(0).size());
                kern::log_clamped(iv(0).data(), o.data(), static_cast<long>(o.size()));
                break;
            case Op::exp:
                o.resize(iv(0).size());
                kern::exp_(iv(0).data(), o.data(), static_cast<long>(o.size()));
                break;
            case Op::grad_reverse:
                o = iv(0);
                break;
            case Op::row_softmax: {
                long r = rows_of(n.shape), c = n.shape.back();
                o.resize(static_cast<std::size_t>(r * c));
                kern::row_softmax(iv(0).data(), o.data(), r, c);
                break;
            }
            case Op::sum_all:
                o = {kern::sum(iv(0).data(), static_cast<long>(iv(0).size()))};
                break;
            case Op::mean_all:
                o = {kern::sum(iv(0).data(), static_cast<long>(iv(0).size())) /
                     static_cast<LD>(iv(0).size())};
                break;
            case Op::sum_rows: {
                long r = rows_of(ishape(0)), c = ishape(0).back();
                o.resize(static_cast<std::size_t>(r));
                kern::sum_rows(iv(0).data(), o.data(), r, c);
                break;
            }
            case Op::l1_norm_rows: {
                long r = rows_of(ishape(0)), c = ishape(0).back();
                o.resize(static_cast<std::size_t>(r));
                kern::l1_rows(iv(0).data(), o.data(), r, c);
                break;
            }
            case Op::index_rows: {
                long k = static_cast<long>(n.index.size()), c = n.shape.back();
                o.resize(static_cast<std::size_t>(k * c));
                kern::index_rows(iv(0).data(), o.data(), n.index.data(), k, c);
                break;
            }
            case Op::scatter_sum_rows: {
                long c = n.shape.back();
                o.assign(static_cast<std::size_t>(n.segments * c), LD(0));
                kern::scatter_rows(iv(0).data(), o.data(), n.index.data(),
                                   static_cast<long>(n.index.size()), c);
                break;
            }
        }
    }
    return vals[static_cast<std::size_t>(loss.node)][0];
}

// ---- finite-difference gradcheck ------------------------------------------------

inline double finite_difference_gradcheck(const std::function<Tensor(Tape&)>& f,
                                          const std::vector<Tensor>& params,
                                          double eps = 1e-6) {
    if (eps <= 0.0) throw usage_error("gradcheck: eps must be positive");
    Tape tape;
    Tensor loss = f(tape);
    if (loss.numel() != 1)
        throw shape_error("gradcheck: loss must be scalar, got " + shape_str(loss.shape));
    if (!std::isfinite((*loss.data)[0])) throw numeric_error("gradcheck: loss is not finite");

    GradMap gm = tape.backward(loss);

    double worst = 0.0;
    for (const Tensor& p : params) {
        std::vector<double> analytic = gm.get_or_zeros(p);
        for (long i = 0; i < p.numel(); ++i) {
            long double up = tape.replay_value(loss, p, i, eps);
            long double dn = tape.replay_value(loss, p, i, -eps);
            double numeric = static_cast<double>((up - dn) / (2.0L * static_cast<long double>(eps)));
            if (!std::isfinite(numeric))
                throw numeric_error("gradcheck: non-finite finite-difference value");
            double a = analytic[static_cast<std::size_t>(i)];
            double rel = std::abs(a - numeric) / std::max(1e-8, std::abs(a) + std::abs(numeric));
            worst = std::max(worst, rel);
        }
    }
    return worst;
}

}  // namespace derog
