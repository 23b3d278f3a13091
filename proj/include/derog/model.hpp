#pragma once

#include <string>
#include <vector>

#include <derog/graph.hpp>
#include <derog/nn.hpp>

namespace derog {

// Four subnetworks. The phi_* groups are updated in the E-step, theta_y in
// the M-step; keeping them as separate structs makes that partition a type
// boundary instead of a bookkeeping convention.

struct PhiYTilde {  // pseudo-label classifier
    GnnParams gnn;
    MLPParams head;

    template <class F>
    void visit(const std::string& prefix, F&& f) {
        gnn.visit(prefix + ".gnn", f);
        head.visit(prefix + ".head", f);
    }
};

struct PhiE {  // environment generator (adversarial via GRL)
    LinearParams lin_y;
    GnnParams gnn;
    LinearParams env_head;  // env-alignment logits, d -> env_count

    template <class F>
    void visit(const std::string& prefix, F&& f) {
        lin_y.visit(prefix + ".lin_y", f);
        gnn.visit(prefix + ".gnn", f);
        env_head.visit(prefix + ".env_head", f);
    }
};

struct PhiGHat {  // rationale extractor
    LinearParams lin_y;
    GnnParams gnn;

    template <class F>
    void visit(const std::string& prefix, F&& f) {
        lin_y.visit(prefix + ".lin_y", f);
        gnn.visit(prefix + ".gnn", f);
    }
};

struct ThetaY {  // final classifier over rationale-gated features
    LinearParams emb;
    LinearParams lin_y;
    GnnParams gnn;
    MLPParams head;

    template <class F>
    void visit(const std::string& prefix, F&& f) {
        emb.visit(prefix + ".emb", f);
        lin_y.visit(prefix + ".lin_y", f);
        gnn.visit(prefix + ".gnn", f);
        head.visit(prefix + ".head", f);
    }
};

struct DerogParams {
    PhiYTilde phi_y_tilde;
    PhiE phi_e;
    PhiGHat phi_g_hat;
    ThetaY theta_y;
    long f = 0, d = 0, c = 0, L = 0, env_count = 0;
    double lambda_grl = 1.0;
    bool use_grl = true;

    template <class F>
    void visit(F&& f) {
        phi_y_tilde.visit("phi_y_tilde", f);
        phi_e.visit("phi_e", f);
        phi_g_hat.visit("phi_g_hat", f);
        theta_y.visit("theta_y", f);
    }
};

inline DerogParams make_derog(long f, long d, long c, long L, long env_count, Rng& rng) {
    if (f < 1) throw config_error("make_derog: feature dim must be positive");
    if (d < 1) throw config_error("make_derog: hidden dim must be positive");
    if (c < 2) throw config_error("make_derog: need at least two classes");
    if (L < 1) throw config_error("make_derog: need at least one GNN layer");
    if (env_count < 1) throw config_error("make_derog: env_count must be positive");
    DerogParams p;
    p.f = f;
    p.d = d;
    p.c = c;
    p.L = L;
    p.env_count = env_count;
    p.phi_y_tilde.gnn = make_gnn(f, d, L, rng);
    p.phi_y_tilde.head = make_mlp({d, d, c}, rng);
    p.phi_e.lin_y = make_linear(c, d, rng);
    p.phi_e.gnn = make_gnn(f + d, d, L, rng);
    p.phi_e.env_head = make_linear(d, env_count, rng);
    p.phi_g_hat.lin_y = make_linear(c, d, rng);
    p.phi_g_hat.gnn = make_gnn(f + 2 * d, d, L, rng);
    p.theta_y.emb = make_linear(f, d, rng);
    p.theta_y.lin_y = make_linear(c, d, rng);
    p.theta_y.gnn = make_gnn(3 * d, d, L, rng);
    p.theta_y.head = make_mlp({d, d, c}, rng);
    return p;
}

// y_tilde = softmax(head(readout(gnn(X))))
inline Tensor infer_pseudo_labels(Tape& t, const DerogParams& p, const Batch& b) {
    Tensor h = gnn_encode(t, p.phi_y_tilde.gnn, b.x, b.e_src, b.e_dst);
    Tensor pooled = readout(t, h, b.graph_index, b.graph_count, ReadoutMode::mean);
    return t.row_softmax(mlp_forward(t, p.phi_y_tilde.head, pooled));
}

// E = readout(GRL(gnn([X, Linear(y_tilde)])))
inline Tensor infer_environment(Tape& t, const DerogParams& p, const Batch& b,
                                const Tensor& y_tilde) {
    if (y_tilde.rows() != b.graph_count)
        throw shape_error("infer_environment: y_tilde rows " + std::to_string(y_tilde.rows()) +
                          " != graph count " + std::to_string(b.graph_count));
    Tensor yproj = linear_forward(t, p.phi_e.lin_y, y_tilde);
    Tensor h0 = t.concat({b.x, broadcast_to_nodes(t, yproj, b.graph_index)});
    Tensor h = gnn_encode(t, p.phi_e.gnn, h0, b.e_src, b.e_dst);
    if (p.use_grl) h = t.grad_reverse(h, p.lambda_grl);
    return readout(t, h, b.graph_index, b.graph_count, ReadoutMode::mean);
}

// g_hat = sigmoid(gnn([X, broadcast(E), broadcast(Linear(y_tilde))]))
inline Tensor extract_rationale(Tape& t, const DerogParams& p, const Batch& b, const Tensor& e,
                                const Tensor& y_tilde) {
    if (e.rows() != b.graph_count)
        throw shape_error("extract_rationale: e rows " + std::to_string(e.rows()) +
                          " != graph count " + std::to_string(b.graph_count));
    Tensor yproj = linear_forward(t, p.phi_g_hat.lin_y, y_tilde);
    Tensor h0 = t.concat({b.x, broadcast_to_nodes(t, e, b.graph_index),
                          broadcast_to_nodes(t, yproj, b.graph_index)});
    return t.sigmoid(gnn_encode(t, p.phi_g_hat.gnn, h0, b.e_src, b.e_dst));
}

// y_hat = head(readout(gnn([Emb(X) * g_hat, broadcast(E),
//                           broadcast(Linear(y_tilde))]) * g_hat))
inline Tensor classify_final(Tape& t, const DerogParams& p, const Batch& b,
                             const Tensor& y_tilde, const Tensor& e, const Tensor& g_hat) {
    if (g_hat.rows() != b.total_nodes())
        throw shape_error("classify_final: g_hat rows " + std::to_string(g_hat.rows()) +
                          " != node count " + std::to_string(b.total_nodes()));
    Tensor fused = t.mul(linear_forward(t, p.theta_y.emb, b.x), g_hat);
    Tensor yproj = linear_forward(t, p.theta_y.lin_y, y_tilde);
    Tensor h0 = t.concat({fused, broadcast_to_nodes(t, e, b.graph_index),
                          broadcast_to_nodes(t, yproj, b.graph_index)});
    Tensor hl = gnn_encode(t, p.theta_y.gnn, h0, b.e_src, b.e_dst);
    Tensor gated = t.mul(hl, g_hat);
    Tensor pooled = readout(t, gated, b.graph_index, b.graph_count, ReadoutMode::mean);
    return mlp_forward(t, p.theta_y.head, pooled);
}

struct LatentState {
    Tensor y_tilde;  // |G| x c probability rows
    Tensor e;        // |G| x d
    Tensor g_hat;    // |V| x d in [0,1]
    Tensor y_hat;    // |G| x c logits
};

// Full pipeline. With detach_latents the three phi networks run on an
// off-tape scratch pass, so their outputs enter the classifier as constants
// and an M-step backward cannot reach any phi parameter. The noise flags
// replace E / g_hat with standard-normal draws at the classifier input only.
inline LatentState forward_full(Tape& t, const DerogParams& p, const Batch& b,
                                bool detach_latents, bool noise_e = false,
                                bool noise_g_hat = false, Rng* noise_rng = nullptr) {
    if ((noise_e || noise_g_hat) && noise_rng == nullptr)
        throw usage_error("forward_full: noise substitution needs an rng");
    LatentState s;
    if (detach_latents) {
        Tape scratch(false);
        s.y_tilde = infer_pseudo_labels(scratch, p, b);
        s.e = infer_environment(scratch, p, b, s.y_tilde);
        s.g_hat = extract_rationale(scratch, p, b, s.e, s.y_tilde);
    } else {
        s.y_tilde = infer_pseudo_labels(t, p, b);
        s.e = infer_environment(t, p, b, s.y_tilde);
        s.g_hat = extract_rationale(t, p, b, s.e, s.y_tilde);
    }
    Tensor e_in = s.e;
    Tensor g_in = s.g_hat;
    if (noise_e) {
        std::vector<double> v(static_cast<std::size_t>(b.graph_count * p.d));
        for (auto& x : v) x = noise_rng->normal();
        e_in = Tensor::matrix(b.graph_count, p.d, std::move(v));
    }
    if (noise_g_hat) {
        std::vector<double> v(static_cast<std::size_t>(b.total_nodes() * p.d));
        for (auto& x : v) x = noise_rng->normal();
        g_in = Tensor::matrix(b.total_nodes(), p.d, std::move(v));
    }
    s.y_hat = classify_final(t, p, b, s.y_tilde, e_in, g_in);
    return s;
}

}  // namespace derog
