#pragma once

#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include <derog/rng.hpp>
#include <derog/tensor.hpp>

namespace derog {

// Every parameter struct exposes visit(prefix, f) calling f(name, tensor&)
// once per learnable tensor; the optimizer and checkpoint code are written
// against that protocol only.

struct LinearParams {
    Tensor weight;  // in x out
    Tensor bias;    // 1 x out, broadcast over rows

    template <class F>
    void visit(const std::string& prefix, F&& f) {
        f(prefix + ".weight", weight);
        f(prefix + ".bias", bias);
    }
};

inline LinearParams make_linear(long in, long out, Rng& rng) {
    if (in < 1 || out < 1)
        throw config_error("make_linear: dims must be positive, got " + std::to_string(in) +
                           "x" + std::to_string(out));
    double bound = std::sqrt(6.0 / static_cast<double>(in + out));
    std::vector<double> w(static_cast<std::size_t>(in * out));
    for (auto& v : w) v = rng.uniform(-bound, bound);
    LinearParams p;
    p.weight = Tensor::matrix(in, out, std::move(w), true);
    p.bias = Tensor::matrix(1, out, std::vector<double>(static_cast<std::size_t>(out), 0.0), true);
    return p;
}

inline Tensor linear_forward(Tape& t, const LinearParams& p, const Tensor& x) {
    return t.add(t.matmul(x, p.weight), p.bias);
}

struct MLPParams {
    std::vector<LinearParams> layers;  // ReLU between layers, none after the last

    template <class F>
    void visit(const std::string& prefix, F&& f) {
        for (std::size_t i = 0; i < layers.size(); ++i)
            layers[i].visit(prefix + ".layer" + std::to_string(i), f);
    }
};

// dims = {in, hidden..., out}
inline MLPParams make_mlp(const std::vector<long>& dims, Rng& rng) {
    if (dims.size() < 2) throw config_error("make_mlp: need at least in and out dims");
    MLPParams m;
    for (std::size_t i = 0; i + 1 < dims.size(); ++i)
        m.layers.push_back(make_linear(dims[i], dims[i + 1], rng));
    return m;
}

inline Tensor mlp_forward(Tape& t, const MLPParams& p, const Tensor& x) {
    if (p.layers.empty()) throw usage_error("mlp_forward: no layers");
    Tensor h = x;
    for (std::size_t i = 0; i < p.layers.size(); ++i) {
        h = linear_forward(t, p.layers[i], h);
        if (i + 1 < p.layers.size()) h = t.relu(h);
    }
    return h;
}

struct GINLayerParams {
    Tensor eps;  // learnable scalar
    MLPParams mlp;

    template <class F>
    void visit(const std::string& prefix, F&& f) {
        f(prefix + ".eps", eps);
        mlp.visit(prefix + ".mlp", f);
    }
};

inline GINLayerParams make_gin_layer(long d, Rng& rng) {
    GINLayerParams p;
    p.eps = Tensor::scalar(0.0, true);
    p.mlp = make_mlp({d, d, d}, rng);
    return p;
}

// h'_v = MLP((1 + eps) h_v + sum_{u in N(v)} h_u), neighbors taken over the
// directed edge list (undirected graphs arrive pre-doubled from batching).
inline Tensor gin_layer_forward(Tape& t, const GINLayerParams& p, const Tensor& h,
                                const std::vector<long>& e_src,
                                const std::vector<long>& e_dst) {
    if (e_src.size() != e_dst.size())
        throw shape_error("gin_layer_forward: e_src/e_dst length mismatch (" +
                          std::to_string(e_src.size()) + " vs " +
                          std::to_string(e_dst.size()) + ")");
    Tensor pre = t.add(h, t.scalar_mul(h, p.eps));
    if (!e_src.empty())
        pre = t.add(pre, t.scatter_sum_rows(t.index_rows(h, e_src), e_dst, h.rows()));
    return mlp_forward(t, p.mlp, pre);
}

struct GnnParams {
    std::optional<LinearParams> proj;  // only when input width != d
    std::vector<GINLayerParams> layers;
    long d = 0;

    template <class F>
    void visit(const std::string& prefix, F&& f) {
        if (proj) proj->visit(prefix + ".proj", f);
        for (std::size_t i = 0; i < layers.size(); ++i)
            layers[i].visit(prefix + ".gin" + std::to_string(i), f);
    }
};

inline GnnParams make_gnn(long f_in, long d, long L, Rng& rng) {
    if (L < 1) throw config_error("make_gnn: need at least one layer, got " + std::to_string(L));
    if (f_in < 1 || d < 1) throw config_error("make_gnn: dims must be positive");
    GnnParams g;
    g.d = d;
    if (f_in != d) g.proj = make_linear(f_in, d, rng);
    for (long i = 0; i < L; ++i) g.layers.push_back(make_gin_layer(d, rng));
    return g;
}

inline Tensor gnn_encode(Tape& t, const GnnParams& g, const Tensor& x,
                         const std::vector<long>& e_src, const std::vector<long>& e_dst) {
    Tensor h = x;
    if (g.proj)
        h = linear_forward(t, *g.proj, x);
    else if (x.cols() != g.d)
        throw shape_error("gnn_encode: input width " + std::to_string(x.cols()) +
                          " != d " + std::to_string(g.d) + " and no projection");
    for (std::size_t i = 0; i < g.layers.size(); ++i) {
        h = gin_layer_forward(t, g.layers[i], h, e_src, e_dst);
        if (i + 1 < g.layers.size()) h = t.relu(h);
    }
    return h;
}

}  // namespace derog
