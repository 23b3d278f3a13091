#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include <derog/config.hpp>
#include <derog/graph.hpp>
#include <derog/model.hpp>
#include <derog/objective.hpp>

namespace derog {

// ---------------------------------------------------------------------------
// Adam with decoupled weight decay. One AdamState per parameter group; the
// four subnetworks never share moment estimates.
// ---------------------------------------------------------------------------

struct AdamSlot {
    std::vector<double> m, v;
};

struct AdamState {
    std::map<std::string, AdamSlot> slots;
    long t = 0;
};

template <class Group>
void adam_step(Group& group, AdamState& st, const GradMap& grads, double lr, double wd) {
    ++st.t;
    const double b1 = 0.9, b2 = 0.999, eps = 1e-8;
    const double c1 = 1.0 - std::pow(b1, static_cast<double>(st.t));
    const double c2 = 1.0 - std::pow(b2, static_cast<double>(st.t));
    group.visit("p", [&](const std::string& name, Tensor& w) {
        std::vector<double> g = grads.get_or_zeros(w);
        AdamSlot& slot = st.slots[name];
        if (slot.m.empty()) {
            slot.m.assign(g.size(), 0.0);
            slot.v.assign(g.size(), 0.0);
        }
        if (slot.m.size() != g.size())
            throw usage_error("adam_step: parameter " + name + " changed size");
        auto& p = *w.data;
        for (std::size_t i = 0; i < g.size(); ++i) {
            p[i] *= 1.0 - lr * wd;  // decoupled decay, applied before the delta
            slot.m[i] = b1 * slot.m[i] + (1.0 - b1) * g[i];
            slot.v[i] = b2 * slot.v[i] + (1.0 - b2) * g[i] * g[i];
            p[i] -= lr * (slot.m[i] / c1) / (std::sqrt(slot.v[i] / c2) + eps);
        }
    });
}

// ---------------------------------------------------------------------------
// Model bundle: either the full four-subnetwork model or the ERM baseline
// (one GIN encoder + MLP head, plain cross-entropy, no latents).
// ---------------------------------------------------------------------------

struct Model {
    Variant variant = Variant::v2;
    DerogParams derog;
    PhiYTilde erm;

    template <class F>
    void visit(F&& f) {
        if (variant == Variant::erm)
            erm.visit("erm", f);
        else
            derog.visit(f);
    }
};

inline Model make_model(const TrainConfig& cfg, const AblationFlags& flags, long f, long c,
                        long env_count, Rng& rng) {
    Model m;
    m.variant = cfg.variant;
    if (cfg.variant == Variant::erm) {
        m.erm.gnn = make_gnn(f, cfg.hidden_dim, cfg.layers, rng);
        m.erm.head = make_mlp({cfg.hidden_dim, cfg.hidden_dim, c}, rng);
    } else {
        m.derog = make_derog(f, cfg.hidden_dim, c, cfg.layers, env_count, rng);
        m.derog.lambda_grl = cfg.lambda_grl;
        m.derog.use_grl = !flags.without_grl;
    }
    return m;
}

inline Tensor erm_logits(Tape& t, const PhiYTilde& p, const Batch& b) {
    Tensor h = gnn_encode(t, p.gnn, b.x, b.e_src, b.e_dst);
    Tensor pooled = readout(t, h, b.graph_index, b.graph_count, ReadoutMode::mean);
    return mlp_forward(t, p.head, pooled);
}

inline Tensor model_logits(Tape& t, const Model& m, const Batch& b, const AblationFlags& flags,
                           Rng* noise_rng) {
    if (m.variant == Variant::erm) return erm_logits(t, m.erm, b);
    LatentState s = forward_full(t, m.derog, b, /*detach_latents=*/true, flags.noise_e,
                                 flags.noise_g_hat, noise_rng);
    return s.y_hat;
}

// ---------------------------------------------------------------------------
// Optimizer state + the rng that drives shuffling, contrastive sampling and
// training-time noise substitution. One instance per training run.
// ---------------------------------------------------------------------------

struct TrainerState {
    AdamState phi_y_tilde, phi_e, phi_g_hat, theta_y, erm;
    Rng rng;
    long contrastive_skipped = 0;

    explicit TrainerState(std::uint64_t seed) : rng(seed) {}
};

inline LossWeights effective_weights(const TrainConfig& cfg, const AblationFlags& flags) {
    LossWeights w = cfg.weights;
    if (flags.without_h_y_tilde) w.lambda_y_tilde = 0.0;
    if (flags.without_l_env) w.lambda_env = 0.0;
    if (flags.without_l_cl) w.lambda_cl = 0.0;
    return w;
}

namespace trainer_detail {

inline void check_finite(double v, const char* loss_name, long epoch, long batch_idx) {
    if (std::isfinite(v)) return;
    throw numeric_error(std::string(loss_name) + " loss is not finite (" + std::to_string(v) +
                        ") at epoch " + std::to_string(epoch) + ", batch " +
                        std::to_string(batch_idx));
}

// Variational lower-bound objective for the inference networks. The flags
// pick the prior form (entropies vs. Gaussian/uniform KL) and drop the
// environment-alignment / contrastive extras of the v2 objective.
inline Tensor assemble_e_loss(Tape& t, const Model& m, const LatentState& s, const Batch& b,
                              const LossWeights& w, const AblationFlags& flags,
                              TrainerState& st) {
    Tensor loss = flags.with_obi ? kl_gaussian_prior_loss(t, s, w, b)
                                 : e_step_loss_v1(t, s, w, b);
    if (m.variant == Variant::v2) {
        if (!flags.without_l_env) {
            Tensor env = env_alignment_loss(t, s.e, m.derog.phi_e.env_head, b.env_ids);
            loss = t.add(loss, t.scalar_mul(env, w.lambda_env));
        }
        if (!flags.without_l_cl) {
            ContrastiveSets sets = sample_contrastive_sets(s.g_hat, b.graph_index, w.k, st.rng);
            st.contrastive_skipped += sets.skipped;
            Tensor cl = contrastive_loss(t, s.g_hat, sets, w.tau, w.cl_include_positive);
            loss = t.add(loss, t.scalar_mul(cl, w.lambda_cl));
        }
    }
    return loss;
}

inline Rng* noise_rng(const AblationFlags& flags, TrainerState& st) {
    return (flags.noise_e || flags.noise_g_hat) ? &st.rng : nullptr;
}

}  // namespace trainer_detail

// E-step: one gradient step on the three inference networks; the classifier
// is left untouched because its parameters simply do not appear in this loss.
inline double e_step_batch(Model& m, const Batch& b, const TrainConfig& cfg,
                           const AblationFlags& flags, TrainerState& st, long epoch,
                           long batch_idx) {
    if (m.variant == Variant::erm) throw usage_error("e_step_batch: erm has no E-step");
    LossWeights w = effective_weights(cfg, flags);
    Tape t;
    LatentState s = forward_full(t, m.derog, b, /*detach_latents=*/false, flags.noise_e,
                                 flags.noise_g_hat, trainer_detail::noise_rng(flags, st));
    Tensor loss = trainer_detail::assemble_e_loss(t, m, s, b, w, flags, st);
    double value = loss.item();
    trainer_detail::check_finite(value, "e_step", epoch, batch_idx);
    GradMap g = t.backward(loss);
    adam_step(m.derog.phi_y_tilde, st.phi_y_tilde, g, cfg.lr, cfg.weight_decay);
    adam_step(m.derog.phi_e, st.phi_e, g, cfg.lr, cfg.weight_decay);
    adam_step(m.derog.phi_g_hat, st.phi_g_hat, g, cfg.lr, cfg.weight_decay);
    return value;
}

// M-step: latents re-inferred off-tape, so the backward pass can only reach
// classifier parameters.
inline double m_step_batch(Model& m, const Batch& b, const TrainConfig& cfg,
                           const AblationFlags& flags, TrainerState& st, long epoch,
                           long batch_idx) {
    Tape t;
    if (m.variant == Variant::erm) {
        Tensor logits = erm_logits(t, m.erm, b);
        Tensor loss = m_step_loss(t, logits, b.labels);
        double value = loss.item();
        trainer_detail::check_finite(value, "m_step", epoch, batch_idx);
        GradMap g = t.backward(loss);
        adam_step(m.erm, st.erm, g, cfg.lr, cfg.weight_decay);
        return value;
    }
    LatentState s = forward_full(t, m.derog, b, /*detach_latents=*/true, flags.noise_e,
                                 flags.noise_g_hat, trainer_detail::noise_rng(flags, st));
    Tensor loss = m_step_loss(t, s.y_hat, b.labels);
    double value = loss.item();
    trainer_detail::check_finite(value, "m_step", epoch, batch_idx);
    GradMap g = t.backward(loss);
    adam_step(m.derog.theta_y, st.theta_y, g, cfg.lr, cfg.weight_decay);
    return value;
}

// The without_em ablation: one forward, one backward, one joint step on all
// four groups. Latents stay attached so the classifier loss reaches them.
inline std::pair<double, double> joint_step_batch(Model& m, const Batch& b,
                                                  const TrainConfig& cfg,
                                                  const AblationFlags& flags, TrainerState& st,
                                                  long epoch, long batch_idx) {
    if (m.variant == Variant::erm) throw usage_error("joint_step_batch: erm has no E-step");
    LossWeights w = effective_weights(cfg, flags);
    Tape t;
    LatentState s = forward_full(t, m.derog, b, /*detach_latents=*/false, flags.noise_e,
                                 flags.noise_g_hat, trainer_detail::noise_rng(flags, st));
    Tensor le = trainer_detail::assemble_e_loss(t, m, s, b, w, flags, st);
    Tensor lm = m_step_loss(t, s.y_hat, b.labels);
    double ev = le.item(), mv = lm.item();
    trainer_detail::check_finite(ev, "e_step", epoch, batch_idx);
    trainer_detail::check_finite(mv, "m_step", epoch, batch_idx);
    GradMap g = t.backward(t.add(le, lm));
    adam_step(m.derog.phi_y_tilde, st.phi_y_tilde, g, cfg.lr, cfg.weight_decay);
    adam_step(m.derog.phi_e, st.phi_e, g, cfg.lr, cfg.weight_decay);
    adam_step(m.derog.phi_g_hat, st.phi_g_hat, g, cfg.lr, cfg.weight_decay);
    adam_step(m.derog.theta_y, st.theta_y, g, cfg.lr, cfg.weight_decay);
    return {ev, mv};
}

// One pass over the training split in shuffled batches, alternating E and M
// once per batch. Returns (mean e-loss, mean m-loss) over batches.
inline std::pair<double, double> em_epoch(Model& m, const std::vector<Graph>& graphs,
                                          const TrainConfig& cfg, const AblationFlags& flags,
                                          TrainerState& st, long epoch) {
    if (graphs.empty()) throw usage_error("em_epoch: empty training split");
    std::vector<long> order(graphs.size());
    std::iota(order.begin(), order.end(), 0L);
    st.rng.shuffle(order);

    double e_sum = 0.0, m_sum = 0.0;
    long batches = 0;
    for (std::size_t start = 0; start < order.size();
         start += static_cast<std::size_t>(cfg.batch_size)) {
        std::size_t stop = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
        std::vector<Graph> chunk;
        chunk.reserve(stop - start);
        for (std::size_t i = start; i < stop; ++i)
            chunk.push_back(graphs[static_cast<std::size_t>(order[i])]);
        Batch b = batch_graphs(chunk);
        if (m.variant == Variant::erm) {
            m_sum += m_step_batch(m, b, cfg, flags, st, epoch, batches);
        } else if (flags.without_em) {
            auto [le, lm] = joint_step_batch(m, b, cfg, flags, st, epoch, batches);
            e_sum += le;
            m_sum += lm;
        } else {
            e_sum += e_step_batch(m, b, cfg, flags, st, epoch, batches);
            m_sum += m_step_batch(m, b, cfg, flags, st, epoch, batches);
        }
        ++batches;
    }
    return {e_sum / static_cast<double>(batches), m_sum / static_cast<double>(batches)};
}

// ---------------------------------------------------------------------------
// Metrics.
// ---------------------------------------------------------------------------

// Mann-Whitney AUC with midranks for ties; matches the pairwise definition
// (wins + half-ties over positive x negative pairs) exactly.
inline double roc_auc(const std::vector<double>& scores, const std::vector<long>& labels) {
    if (scores.size() != labels.size())
        throw shape_error("roc_auc: " + std::to_string(scores.size()) + " scores vs " +
                          std::to_string(labels.size()) + " labels");
    if (scores.empty()) throw validation_error("roc_auc: empty input");
    long np = 0, nn = 0;
    for (long y : labels) {
        if (y == 1) ++np;
        else if (y == 0) ++nn;
        else throw validation_error("roc_auc: labels must be 0 or 1, got " + std::to_string(y));
    }
    if (np == 0 || nn == 0)
        throw validation_error("roc_auc: undefined when only one class is present");

    std::vector<std::size_t> idx(scores.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::sort(idx.begin(), idx.end(),
              [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
    double rank_sum_pos = 0.0;
    std::size_t i = 0;
    while (i < idx.size()) {
        std::size_t j = i;
        while (j < idx.size() && scores[idx[j]] == scores[idx[i]]) ++j;
        double midrank = static_cast<double>(i + 1 + j) / 2.0;  // mean of ranks i+1 .. j
        for (std::size_t r = i; r < j; ++r)
            if (labels[idx[r]] == 1) rank_sum_pos += midrank;
        i = j;
    }
    double num = rank_sum_pos - static_cast<double>(np) * static_cast<double>(np + 1) / 2.0;
    return num / (static_cast<double>(np) * static_cast<double>(nn));
}

// Accuracy or ROC-AUC of a model over a split, evaluated in deterministic
// chunks. The noise ablations keep substituting latents here, from a fresh
// rng so repeated calls agree.
inline double evaluate(const Model& m, const std::vector<Graph>& graphs, Metric metric,
                       const TrainConfig& cfg, const AblationFlags& flags) {
    if (graphs.empty()) throw validation_error("evaluate: empty split");
    Rng noise_rng(cfg.seed ^ 0x9e3779b97f4a7c15ULL);
    long correct = 0;
    std::vector<double> scores;
    std::vector<long> labels;
    for (std::size_t start = 0; start < graphs.size();
         start += static_cast<std::size_t>(cfg.batch_size)) {
        std::size_t stop = std::min(graphs.size(), start + static_cast<std::size_t>(cfg.batch_size));
        Batch b = batch_graphs(std::vector<Graph>(graphs.begin() + static_cast<long>(start),
                                                  graphs.begin() + static_cast<long>(stop)));
        Tape t(false);
        Tensor logits = model_logits(t, m, b, flags, &noise_rng);
        if (metric == Metric::roc_auc && logits.cols() != 2)
            throw validation_error("evaluate: roc_auc requires binary labels, model has " +
                                   std::to_string(logits.cols()) + " classes");
        for (long g = 0; g < b.graph_count; ++g) {
            long arg = 0;
            for (long c = 1; c < logits.cols(); ++c)
                if (logits.at(g, c) > logits.at(g, arg)) arg = c;
            if (arg == b.labels[static_cast<std::size_t>(g)]) ++correct;
            if (metric == Metric::roc_auc) {
                scores.push_back(logits.at(g, 1) - logits.at(g, 0));
                labels.push_back(b.labels[static_cast<std::size_t>(g)]);
            }
        }
    }
    if (metric == Metric::roc_auc) return roc_auc(scores, labels);
    return static_cast<double>(correct) / static_cast<double>(graphs.size());
}

// ---------------------------------------------------------------------------
// Checkpoints: versioned JSON with the full effective config, model dims,
// rng state and every named parameter tensor.
// ---------------------------------------------------------------------------

struct ParamEntry {
    std::string name;
    long rows = 0, cols = 0;
    std::vector<double> data;
};

struct Checkpoint {
    long format_version = 1;
    TrainConfig cfg;
    AblationFlags flags;
    long f = 0, c = 0, env_count = 0;
    long epoch = 0;
    std::array<std::uint64_t, 4> rng_state{};
    std::vector<ParamEntry> params;
};

inline Checkpoint snapshot_model(Model& m, const TrainConfig& cfg, const AblationFlags& flags,
                                 long f, long c, long env_count, long epoch,
                                 const std::array<std::uint64_t, 4>& rng_state) {
    Checkpoint ck;
    ck.cfg = cfg;
    ck.flags = flags;
    ck.f = f;
    ck.c = c;
    ck.env_count = env_count;
    ck.epoch = epoch;
    ck.rng_state = rng_state;
    m.visit([&](const std::string& name, Tensor& t) {
        ck.params.push_back({name, t.rows(), t.cols(), *t.data});
    });
    return ck;
}

inline void restore_model(Model& m, const Checkpoint& ck) {
    std::map<std::string, const ParamEntry*> by_name;
    for (const ParamEntry& pe : ck.params) by_name[pe.name] = &pe;
    m.visit([&](const std::string& name, Tensor& t) {
        auto it = by_name.find(name);
        if (it == by_name.end())
            throw validation_error("checkpoint is missing parameter \"" + name + "\"");
        const ParamEntry& pe = *it->second;
        if (pe.rows != t.rows() || pe.cols != t.cols())
            throw validation_error("checkpoint parameter \"" + name + "\" has shape " +
                                   std::to_string(pe.rows) + "x" + std::to_string(pe.cols) +
                                   ", model expects " + std::to_string(t.rows()) + "x" +
                                   std::to_string(t.cols()));
        *t.data = pe.data;
    });
}

inline Model model_from_checkpoint(const Checkpoint& ck) {
    Rng rng(ck.cfg.seed);
    Model m = make_model(ck.cfg, ck.flags, ck.f, ck.c, ck.env_count, rng);
    restore_model(m, ck);
    return m;
}

inline void save_checkpoint(const std::string& path, const Checkpoint& ck) {
    nlohmann::ordered_json j;
    j["format_version"] = ck.format_version;
    j["config"] = config_to_json(ck.cfg, ck.flags);
    nlohmann::ordered_json dims;
    dims["f"] = ck.f;
    dims["c"] = ck.c;
    dims["env_count"] = ck.env_count;
    j["dims"] = dims;
    j["epoch"] = ck.epoch;
    j["rng_state"] = ck.rng_state;
    nlohmann::ordered_json params;
    for (const ParamEntry& pe : ck.params) {
        nlohmann::ordered_json p;
        p["shape"] = {pe.rows, pe.cols};
        p["data"] = pe.data;
        params[pe.name] = std::move(p);
    }
    j["params"] = std::move(params);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw data_error("checkpoint: cannot open " + path + " for writing");
    out << j.dump() << "\n";
    if (!out) throw data_error("checkpoint: write to " + path + " failed");
}

inline Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw data_error("checkpoint: cannot open " + path);
    nlohmann::ordered_json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw data_error("checkpoint " + path + ": " + e.what());
    }
    try {
        if (!j.is_object() || !j.contains("format_version"))
            throw data_error("checkpoint " + path + ": missing format_version");
        long version = j.at("format_version").get<long>();
        if (version != 1)
            throw data_error("checkpoint " + path + ": format_version " +
                             std::to_string(version) + " is unsupported (this build reads 1)");
        Checkpoint ck;
        ck.format_version = version;
        config_from_json(j.at("config"), ck.cfg, ck.flags);
        ck.f = j.at("dims").at("f").get<long>();
        ck.c = j.at("dims").at("c").get<long>();
        ck.env_count = j.at("dims").at("env_count").get<long>();
        ck.epoch = j.at("epoch").get<long>();
        auto rs = j.at("rng_state").get<std::vector<std::uint64_t>>();
        if (rs.size() != ck.rng_state.size())
            throw data_error("checkpoint " + path + ": rng_state must have 4 words");
        std::copy(rs.begin(), rs.end(), ck.rng_state.begin());
        for (const auto& [name, pj] : j.at("params").items()) {
            ParamEntry pe;
            pe.name = name;
            auto shape = pj.at("shape").get<std::vector<long>>();
            if (shape.size() != 2)
                throw data_error("checkpoint " + path + ": parameter \"" + name +
                                 "\" has a non-matrix shape");
            pe.rows = shape[0];
            pe.cols = shape[1];
            pe.data = pj.at("data").get<std::vector<double>>();
            if (static_cast<long>(pe.data.size()) != pe.rows * pe.cols)
                throw data_error("checkpoint " + path + ": parameter \"" + name +
                                 "\" data length does not match its shape");
            ck.params.push_back(std::move(pe));
        }
        return ck;
    } catch (const nlohmann::json::exception& e) {
        throw data_error("checkpoint " + path + ": " + e.what());
    }
}

// ---------------------------------------------------------------------------
// Full training loop: EM epochs, per-epoch validation, JSONL history, and a
// final checkpoint of the epoch with the best OOD validation score (ties go
// to the earlier epoch).
// ---------------------------------------------------------------------------

struct TrainResult {
    long best_epoch = 0;
    double best_ood_val = 0.0;
    double ood_test = 0.0;
    std::string checkpoint_path, history_path;
};

inline TrainResult train(const TrainConfig& cfg, const AblationFlags& flags,
                         const DatasetSplit& data, const std::string& out_dir) {
    validate_config(cfg);
    if (data.train.empty()) throw data_error("train: training split is empty");
    if (data.id_val.empty() || data.ood_val.empty() || data.ood_test.empty())
        throw data_error("train: all four splits must be non-empty");

    long f = data.train[0].f;
    long c = 2, env_count = 1;
    for (const auto* split : {&data.train, &data.id_val, &data.ood_val, &data.ood_test})
        for (const Graph& g : *split) {
            c = std::max(c, g.label + 1);
            env_count = std::max(env_count, g.env_id + 1);
        }

    std::filesystem::create_directories(out_dir);
    TrainResult r;
    r.history_path = (std::filesystem::path(out_dir) / "history.jsonl").string();
    r.checkpoint_path = (std::filesystem::path(out_dir) / "checkpoint.json").string();
    std::ofstream hist(r.history_path, std::ios::binary | std::ios::trunc);
    if (!hist) throw data_error("train: cannot write " + r.history_path);
    hist << config_to_json(cfg, flags).dump() << "\n";

    Rng rng(cfg.seed);
    Model m = make_model(cfg, flags, f, c, env_count, rng);
    TrainerState st(cfg.seed);

    Checkpoint best = snapshot_model(m, cfg, flags, f, c, env_count, 0, st.rng.state());
    double best_ood = -std::numeric_limits<double>::infinity();
    for (long epoch = 1; epoch <= cfg.epochs; ++epoch) {
        auto [e_loss, m_loss] = em_epoch(m, data.train, cfg, flags, st, epoch);
        double id_val = evaluate(m, data.id_val, cfg.metric, cfg, flags);
        double ood_val = evaluate(m, data.ood_val, cfg.metric, cfg, flags);
        nlohmann::ordered_json line;
        line["epoch"] = epoch;
        line["e_loss"] = e_loss;
        line["m_loss"] = m_loss;
        line["id_val"] = id_val;
        line["ood_val"] = ood_val;
        hist << line.dump() << "\n";
        if (ood_val > best_ood) {
            best_ood = ood_val;
            best = snapshot_model(m, cfg, flags, f, c, env_count, epoch, st.rng.state());
        }
    }
    hist.close();
    if (!hist) throw data_error("train: write to " + r.history_path + " failed");

    save_checkpoint(r.checkpoint_path, best);
    Model selected = model_from_checkpoint(best);
    r.best_epoch = best.epoch;
    r.best_ood_val = cfg.epochs == 0 ? evaluate(selected, data.ood_val, cfg.metric, cfg, flags)
                                     : best_ood;
    r.ood_test = evaluate(selected, data.ood_test, cfg.metric, cfg, flags);
    return r;
}

}  // namespace derog
