#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include <derog/graph.hpp>
#include <derog/model.hpp>
#include <derog/nn.hpp>
#include <derog/tensor.hpp>

namespace derog {

struct LossWeights {
    double lambda_g_hat = 0.01;
    double lambda_e = 0.01;
    double lambda_y_tilde = 0.1;  // entropy weights keep the 1:1:10 ratio
    double lambda_env = 0.01;  // low end of the 0.01..0.1 search range; larger values
    double lambda_cl = 0.1;    // destabilize the adversarial env race on concept data
    long k = 2;        // negative samples per anchor
    double tau = 0.1;  // contrastive temperature
    bool cl_include_positive = false;
};

inline void validate_weights(const LossWeights& w) {
    auto nonneg = [](double v, const char* name) {
        if (v < 0.0) throw config_error(std::string("loss weight ") + name + " must be >= 0");
    };
    nonneg(w.lambda_g_hat, "lambda_g_hat");
    nonneg(w.lambda_e, "lambda_e");
    nonneg(w.lambda_y_tilde, "lambda_y_tilde");
    nonneg(w.lambda_env, "lambda_env");
    nonneg(w.lambda_cl, "lambda_cl");
    if (w.k < 1) throw config_error("loss weight k must be >= 1");
    if (w.tau <= 0.0) throw config_error("loss weight tau must be > 0");
}

// H_i = -sum_j p_ij log p_ij, one row per input row (nats)
inline Tensor categorical_entropy(Tape& t, const Tensor& rows) {
    if (rows.shape.size() != 2)
        throw shape_error("categorical_entropy: want a 2-d matrix, got " + shape_str(rows.shape));
    for (long i = 0; i < rows.rows(); ++i) {
        double s = 0;
        for (long j = 0; j < rows.cols(); ++j) {
            double v = rows.at(i, j);
            if (v < -1e-9)
                throw validation_error("categorical_entropy: negative probability in row " +
                                       std::to_string(i));
            s += v;
        }
        if (std::abs(s - 1.0) > 1e-6)
            throw validation_error("categorical_entropy: row " + std::to_string(i) +
                                   " sums to " + std::to_string(s));
    }
    return t.scalar_mul(t.sum_rows(t.mul(rows, t.log(rows))), -1.0);
}

namespace detail {

inline Tensor bernoulli_entropy_matrix(Tape& t, const Tensor& m) {
    for (double v : *m.data)
        if (v < -1e-9 || v > 1.0 + 1e-9)
            throw validation_error("bernoulli entropy: entry " + std::to_string(v) +
                                   " outside [0,1]");
    Tensor ones = Tensor::full(m.shape, 1.0);
    Tensor om = t.sub(ones, m);
    Tensor h = t.add(t.mul(m, t.log(m)), t.mul(om, t.log(om)));
    return t.scalar_mul(h, -1.0);
}

}  // namespace detail

// mean Bernoulli entropy over all entries
inline Tensor bernoulli_entropy_mean(Tape& t, const Tensor& m) {
    return t.mean_all(detail::bernoulli_entropy_matrix(t, m));
}

// per-graph mean Bernoulli entropy over that graph's node rows (all columns)
inline Tensor bernoulli_entropy_mean(Tape& t, const Tensor& m,
                                     const std::vector<long>& graph_index, long graph_count) {
    Tensor h = detail::bernoulli_entropy_matrix(t, m);
    Tensor per_row = readout(t, h, graph_index, graph_count, ReadoutMode::mean);
    return t.scalar_mul(t.sum_rows(per_row), 1.0 / static_cast<double>(m.cols()));
}

// batch mean of -lg H(g_hat_g) - le H(softmax(E_g)) - ly H(y_tilde_g);
// minimizing drives all three entropies up
inline Tensor e_step_loss_v1(Tape& t, const LatentState& s, const LossWeights& w,
                             const Batch& b) {
    validate_weights(w);
    Tensor hg = bernoulli_entropy_mean(t, s.g_hat, b.graph_index, b.graph_count);
    Tensor he = categorical_entropy(t, t.row_softmax(s.e));
    Tensor hy = categorical_entropy(t, s.y_tilde);
    Tensor term = t.add(t.add(t.scalar_mul(hg, -w.lambda_g_hat), t.scalar_mul(he, -w.lambda_e)),
                        t.scalar_mul(hy, -w.lambda_y_tilde));
    return t.mean_all(term);
}

struct ContrastiveSet {
    long v1 = -1;  // anchor
    long v2 = -1;  // positive, same half as anchor
    std::vector<long> negatives;
};

struct ContrastiveSets {
    std::vector<ContrastiveSet> sets;
    long skipped = 0;  // graphs too degenerate to form a set
};

// Nodes of each graph are ranked by the L1 norm of their rationale row and
// split into halves at ceil(n/2); the anchor is uniform over the graph, the
// positive comes from the anchor's half, negatives from the other half.
inline ContrastiveSets sample_contrastive_sets(const Tensor& g_hat,
                                               const std::vector<long>& graph_index, long k,
                                               Rng& rng) {
    if (k < 1) throw config_error("sample_contrastive_sets: k must be >= 1");
    if (static_cast<long>(graph_index.size()) != g_hat.rows())
        throw shape_error("sample_contrastive_sets: graph_index length " +
                          std::to_string(graph_index.size()) + " != rows " +
                          std::to_string(g_hat.rows()));
    long graph_count = 0;
    for (long g : graph_index) graph_count = std::max(graph_count, g + 1);
    std::vector<std::vector<long>> members(static_cast<std::size_t>(graph_count));
    for (long v = 0; v < g_hat.rows(); ++v)
        members[static_cast<std::size_t>(graph_index[static_cast<std::size_t>(v)])].push_back(v);

    ContrastiveSets out;
    long d = g_hat.cols();
    for (auto& ids : members) {
        long n = static_cast<long>(ids.size());
        if (n == 0) continue;
        std::vector<std::pair<double, long>> ranked;  // (-score, id): sort ascending
        for (long v : ids) {
            double s = 0;
            for (long j = 0; j < d; ++j) s += std::abs(g_hat.at(v, j));
            ranked.push_back({-s, v});
        }
        std::sort(ranked.begin(), ranked.end());
        long top_count = (n + 1) / 2;

        long v1 = ids[static_cast<std::size_t>(rng.below(n))];
        long pos_of_v1 = 0;
        while (ranked[static_cast<std::size_t>(pos_of_v1)].second != v1) ++pos_of_v1;
        bool anchor_top = pos_of_v1 < top_count;
        std::vector<long> same, other;
        for (long i = 0; i < n; ++i)
            ((i < top_count) == anchor_top ? same : other).push_back(ranked[i].second);
        if (same.size() < 2 || other.empty()) {
            ++out.skipped;
            continue;
        }
        std::vector<long> mates;
        for (long v : same)
            if (v != v1) mates.push_back(v);
        long v2 = mates[static_cast<std::size_t>(rng.below(static_cast<long>(mates.size())))];
        long take = std::min<long>(k, static_cast<long>(other.size()));
        out.sets.push_back({v1, v2, rng.sample_without_replacement(other, take)});
    }
    return out;
}

// mean over sets of -log[ exp(a.p / tau) / sum_neg exp(a.n / tau) ]; the
// denominator excludes the positive unless include_positive is set, so the
// loss can go negative. The log-sum-exp shift constant is computed from the
// current values and enters the tape as a constant, which leaves gradients
// exact.
inline Tensor contrastive_loss(Tape& t, const Tensor& g_hat, const ContrastiveSets& sets,
                               double tau, bool include_positive = false) {
    if (tau <= 0.0) throw config_error("contrastive_loss: tau must be > 0");
    if (sets.sets.empty()) return Tensor::scalar(0.0);

    long rows = g_hat.rows(), d = g_hat.cols();
    auto dot_over_tau = [&](long a, long b) {
        double s = 0;
        for (long j = 0; j < d; ++j) s += g_hat.at(a, j) * g_hat.at(b, j);
        return s / tau;
    };

    std::vector<long> anchors, positives, flat, owner;
    std::vector<double> shift_per_set;
    for (std::size_t i = 0; i < sets.sets.size(); ++i) {
        const ContrastiveSet& s = sets.sets[i];
        if (s.v1 < 0 || s.v1 >= rows || s.v2 < 0 || s.v2 >= rows)
            throw usage_error("contrastive_loss: node id out of range");
        if (s.negatives.empty()) throw usage_error("contrastive_loss: empty negative set");
        anchors.push_back(s.v1);
        positives.push_back(s.v2);
        double m = include_positive ? dot_over_tau(s.v1, s.v2)
                                    : -std::numeric_limits<double>::infinity();
        for (long n : s.negatives) {
            if (n < 0 || n >= rows) throw usage_error("contrastive_loss: node id out of range");
            flat.push_back(n);
            owner.push_back(static_cast<long>(i));
            m = std::max(m, dot_over_tau(s.v1, n));
        }
        if (include_positive) {
            flat.push_back(s.v2);
            owner.push_back(static_cast<long>(i));
        }
        shift_per_set.push_back(m);
    }

    long set_count = static_cast<long>(sets.sets.size());
    Tensor a = t.index_rows(g_hat, anchors);
    Tensor pos = t.scalar_mul(t.sum_rows(t.mul(a, t.index_rows(g_hat, positives))), 1.0 / tau);

    Tensor nd =
        t.scalar_mul(t.sum_rows(t.mul(t.index_rows(a, owner), t.index_rows(g_hat, flat))),
                     1.0 / tau);
    std::vector<double> shift_flat;
    for (long o : owner) shift_flat.push_back(shift_per_set[static_cast<std::size_t>(o)]);
    Tensor shifted = t.exp(t.sub(nd, Tensor::matrix(static_cast<long>(flat.size()), 1,
                                                    std::move(shift_flat))));
    Tensor denom = t.scatter_sum_rows(shifted, owner, set_count);
    Tensor lse = t.add(t.log(denom), Tensor::matrix(set_count, 1, shift_per_set));
    return t.mean_all(t.sub(lse, pos));
}

// mean cross-entropy of softmax(Linear(E)) against the true environment ids
inline Tensor env_alignment_loss(Tape& t, const Tensor& e, const LinearParams& env_head,
                                 const std::vector<long>& env_ids) {
    if (static_cast<long>(env_ids.size()) != e.rows())
        throw shape_error("env_alignment_loss: env_ids length " + std::to_string(env_ids.size()) +
                          " != rows " + std::to_string(e.rows()));
    long env_count = env_head.weight.shape[1];
    std::vector<double> mask(static_cast<std::size_t>(e.rows() * env_count), 0.0);
    for (long i = 0; i < e.rows(); ++i) {
        long id = env_ids[static_cast<std::size_t>(i)];
        if (id < 0 || id >= env_count)
            throw validation_error("env_alignment_loss: env id " + std::to_string(id) +
                                   " outside [0," + std::to_string(env_count) + ")");
        mask[static_cast<std::size_t>(i * env_count + id)] = 1.0;
    }
    Tensor probs = t.row_softmax(linear_forward(t, env_head, e));
    Tensor picked = t.sum_rows(t.mul(Tensor::matrix(e.rows(), env_count, std::move(mask)),
                                     t.log(probs)));
    return t.scalar_mul(t.mean_all(picked), -1.0);
}

// mean -log softmax(y_hat)[label]
inline Tensor m_step_loss(Tape& t, const Tensor& y_hat, const std::vector<long>& labels) {
    if (static_cast<long>(labels.size()) != y_hat.rows())
        throw shape_error("m_step_loss: labels length " + std::to_string(labels.size()) +
                          " != rows " + std::to_string(y_hat.rows()));
    long c = y_hat.cols();
    std::vector<double> mask(static_cast<std::size_t>(y_hat.rows() * c), 0.0);
    for (long i = 0; i < y_hat.rows(); ++i) {
        long y = labels[static_cast<std::size_t>(i)];
        if (y < 0 || y >= c)
            throw validation_error("m_step_loss: label " + std::to_string(y) + " outside [0," +
                                   std::to_string(c) + ")");
        mask[static_cast<std::size_t>(i * c + y)] = 1.0;
    }
    Tensor probs = t.row_softmax(y_hat);
    Tensor picked =
        t.sum_rows(t.mul(Tensor::matrix(y_hat.rows(), c, std::move(mask)), t.log(probs)));
    return t.scalar_mul(t.mean_all(picked), -1.0);
}

inline Tensor e_step_loss_v2(Tape& t, const LatentState& s, const LossWeights& w, const Batch& b,
                             const ContrastiveSets& sets, const LinearParams& env_head) {
    Tensor v1 = e_step_loss_v1(t, s, w, b);
    Tensor env = env_alignment_loss(t, s.e, env_head, b.env_ids);
    Tensor cl = contrastive_loss(t, s.g_hat, sets, w.tau, w.cl_include_positive);
    return t.add(v1, t.add(t.scalar_mul(env, w.lambda_env), t.scalar_mul(cl, w.lambda_cl)));
}

// "w/ OBI" substitution: entropy terms replaced by divergences from fixed
// priors — N(0,I) for E, uniform for y_tilde, Bern(1/2) per g_hat entry
inline Tensor kl_gaussian_prior_loss(Tape& t, const LatentState& s, const LossWeights& w,
                                     const Batch& b) {
    validate_weights(w);
    long c = s.y_tilde.cols();
    Tensor e_term = t.scalar_mul(t.sum_rows(t.mul(s.e, s.e)), 0.5);
    Tensor y_term = t.sub(Tensor::full({b.graph_count, 1}, std::log(static_cast<double>(c))),
                          categorical_entropy(t, s.y_tilde));
    Tensor g_term = t.sub(Tensor::full({b.graph_count, 1}, std::log(2.0)),
                          bernoulli_entropy_mean(t, s.g_hat, b.graph_index, b.graph_count));
    Tensor term = t.add(t.add(t.scalar_mul(g_term, w.lambda_g_hat), t.scalar_mul(e_term, w.lambda_e)),
                        t.scalar_mul(y_term, w.lambda_y_tilde));
    return t.mean_all(term);
}

}  // namespace derog
