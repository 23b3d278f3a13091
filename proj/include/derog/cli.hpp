#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include <derog/config.hpp>
#include <derog/graph.hpp>
#include <derog/trainer.hpp>

namespace derog {

// ---------------------------------------------------------------------------
// Gradient verification: finite differences against the recorded tape, one
// row per primitive plus the full-loss compositions.
// ---------------------------------------------------------------------------

struct GradcheckRow {
    std::string block;
    double max_rel_err = 0.0;
    double threshold = 0.0;
    bool pass = false;
};

namespace cli_detail {

inline Tensor rand_leaf(long r, long c, Rng& rng, double lo = -1.0, double hi = 1.0,
                        double keep_away = 0.0) {
    std::vector<double> v(static_cast<std::size_t>(r * c));
    for (auto& x : v) {
        do {
            x = rng.uniform(lo, hi);
        } while (std::fabs(x) < keep_away);
    }
    return Tensor::matrix(r, c, std::move(v), true);
}

// Random constant weighting so the upstream gradient is non-uniform.
inline Tensor weighted_sum(Tape& t, const Tensor& y, Rng& rng) {
    std::vector<double> w(static_cast<std::size_t>(y.numel()));
    for (auto& x : w) x = rng.uniform(-1.0, 1.0);
    return t.sum_all(t.mul(y, Tensor::matrix(y.rows(), y.cols(), std::move(w))));
}

inline GradcheckRow fd_row(const std::string& block, double threshold,
                           const std::function<Tensor(Tape&)>& f,
                           const std::vector<Tensor>& leaves) {
    double err = finite_difference_gradcheck(f, leaves, 1e-6);
    return {block, err, threshold, err < threshold};
}

// The reversal contract itself: backward must emit exactly -lambda times the
// upstream gradient, checked bitwise for a few representative lambdas.
inline GradcheckRow grl_sign_row(Rng& rng) {
    bool ok = true;
    for (double lambda : {0.0, 0.5, 1.0}) {
        Tensor x = rand_leaf(2, 3, rng);
        std::vector<double> wv(6);
        for (auto& v : wv) v = rng.uniform(-1.0, 1.0);
        Tensor c = Tensor::matrix(2, 3, wv);
        Tape t;
        GradMap g = t.backward(t.sum_all(t.mul(t.grad_reverse(x, lambda), c)));
        const std::vector<double>& gx = g.get(x);
        for (std::size_t i = 0; i < gx.size(); ++i) {
            double want = -lambda * wv[i];
            if (std::memcmp(&gx[i], &want, sizeof(double)) != 0) ok = false;
        }
    }
    return {"grad_reverse sign test", ok ? 0.0 : 1.0, 0.5, ok};
}

}  // namespace cli_detail

inline std::vector<GradcheckRow> gradcheck_report(std::uint64_t seed) {
    using cli_detail::fd_row;
    using cli_detail::rand_leaf;
    using cli_detail::weighted_sum;
    Rng rng(seed ^ 0x6a09e667f3bcc908ULL);
    const double tp = 1e-6;  // primitive threshold
    std::vector<GradcheckRow> rows;

    {
        Tensor a = rand_leaf(3, 4, rng), b = rand_leaf(4, 2, rng);
        rows.push_back(fd_row("matmul", tp,
                              [&](Tape& t) { return weighted_sum(t, t.matmul(a, b), rng); },
                              {a, b}));
    }
    {
        Tensor a = rand_leaf(3, 4, rng), b = rand_leaf(1, 4, rng);
        rows.push_back(fd_row("add (row broadcast)", tp,
                              [&](Tape& t) { return weighted_sum(t, t.add(a, b), rng); },
                              {a, b}));
    }
    {
        Tensor a = rand_leaf(3, 4, rng), b = rand_leaf(3, 4, rng);
        rows.push_back(fd_row("sub", tp,
                              [&](Tape& t) { return weighted_sum(t, t.sub(a, b), rng); },
                              {a, b}));
    }
    {
        Tensor a = rand_leaf(3, 4, rng), b = rand_leaf(3, 4, rng);
        rows.push_back(fd_row("elementwise_mul", tp,
                              [&](Tape& t) { return weighted_sum(t, t.mul(a, b), rng); },
                              {a, b}));
    }
    {
        Tensor a = rand_leaf(3, 4, rng);
        Tensor s = rand_leaf(1, 1, rng, 0.2, 1.5);
        double c1 = finite_difference_gradcheck(
            [&](Tape& t) { return weighted_sum(t, t.scalar_mul(a, 0.7), rng); }, {a}, 1e-6);
        double c2 = finite_difference_gradcheck(
            [&](Tape& t) { return weighted_sum(t, t.scalar_mul(a, s), rng); }, {a, s}, 1e-6);
        double err = std::max(c1, c2);
        rows.push_back({"scalar_mul (both forms)", err, tp, err < tp});
    }
    {
        Tensor a = rand_leaf(3, 2, rng), b = rand_leaf(3, 3, rng);
        rows.push_back(fd_row("rowwise_concat", tp,
                              [&](Tape& t) { return weighted_sum(t, t.concat({a, b}), rng); },
                              {a, b}));
    }
    {
        // keep inputs off the kink: central differences would straddle it
        Tensor a = rand_leaf(3, 4, rng, -1.0, 1.0, 0.05);
        rows.push_back(fd_row("relu", tp,
                              [&](Tape& t) { return weighted_sum(t, t.relu(a), rng); }, {a}));
    }
    {
        Tensor a = rand_leaf(3, 4, rng);
        rows.push_back(fd_row("sigmoid", tp,
                              [&](Tape& t) { return weighted_sum(t, t.sigmoid(a), rng); }, {a}));
    }
    {
        Tensor a = rand_leaf(3, 4, rng);
        rows.push_back(fd_row("row_softmax", tp,
                              [&](Tape& t) { return weighted_sum(t, t.row_softmax(a), rng); },
                              {a}));
    }
    {
        Tensor a = rand_leaf(3, 4, rng, 0.5, 2.0);
        rows.push_back(fd_row("log", tp,
                              [&](Tape& t) { return weighted_sum(t, t.log(a), rng); }, {a}));
    }
    {
        Tensor a = rand_leaf(3, 4, rng);
        rows.push_back(fd_row("exp", tp,
                              [&](Tape& t) { return weighted_sum(t, t.exp(a), rng); }, {a}));
    }
    {
        Tensor a = rand_leaf(3, 4, rng);
        rows.push_back(fd_row("sum_all", tp, [&](Tape& t) { return t.sum_all(a); }, {a}));
    }
    {
        Tensor a = rand_leaf(3, 4, rng);
        rows.push_back(fd_row("mean_all", tp, [&](Tape& t) { return t.mean_all(a); }, {a}));
    }
    {
        Tensor a = rand_leaf(3, 4, rng);
        rows.push_back(fd_row("sum_rows", tp,
                              [&](Tape& t) { return weighted_sum(t, t.sum_rows(a), rng); },
                              {a}));
    }
    {
        Tensor a = rand_leaf(3, 4, rng, -1.0, 1.0, 0.05);  // |.| kink, same story as relu
        rows.push_back(fd_row("l1_norm_rows", tp,
                              [&](Tape& t) { return weighted_sum(t, t.l1_norm_rows(a), rng); },
                              {a}));
    }
    {
        Tensor a = rand_leaf(5, 3, rng);
        rows.push_back(fd_row(
            "index_rows", tp,
            [&](Tape& t) { return weighted_sum(t, t.index_rows(a, {0, 2, 2, 4}), rng); }, {a}));
    }
    {
        Tensor a = rand_leaf(4, 3, rng);
        rows.push_back(fd_row(
            "scatter_sum_rows", tp,
            [&](Tape& t) { return weighted_sum(t, t.scatter_sum_rows(a, {0, 2, 0, 1}, 3), rng); },
            {a}));
    }
    {
        // lambda = -1 makes reversal an identity for finite differences; the
        // sign flip is covered bitwise by the dedicated row below
        Tensor a = rand_leaf(3, 4, rng);
        rows.push_back(fd_row("grad_reverse", tp,
                              [&](Tape& t) { return weighted_sum(t, t.grad_reverse(a, -1.0), rng); },
                              {a}));
    }
    rows.push_back(cli_detail::grl_sign_row(rng));

    // Full-loss compositions through all four subnetworks. Parameters are
    // jittered off their init so no ReLU input sits exactly on its kink.
    Rng mrng(seed ^ 0xbb67ae8584caa73bULL);
    DerogParams p = make_derog(2, 3, 2, 1, 2, mrng);
    p.lambda_grl = -1.0;
    p.visit([&](const std::string&, Tensor& w_) {
        for (auto& v : *w_.data) v += mrng.uniform(-0.05, 0.05);
    });
    Graph ga, gb;
    ga.n = 4;
    gb.n = 5;
    for (Graph* g : {&ga, &gb}) {
        g->f = 2;
        g->x.assign(static_cast<std::size_t>(g->n * 2), 1.0);
        for (long i = 0; i + 1 < g->n; ++i) g->edges.push_back({i, i + 1});
    }
    ga.label = 0;
    ga.env_id = 0;
    gb.label = 1;
    gb.env_id = 1;
    Batch b = batch_graphs({ga, gb});
    LossWeights w;
    ContrastiveSets sets;
    {
        Tape warm(false);
        LatentState s0 = forward_full(warm, p, b, false);
        Rng srng(seed ^ 0x3c6ef372fe94f82bULL);
        sets = sample_contrastive_sets(s0.g_hat, b.graph_index, w.k, srng);
    }
    std::vector<Tensor> params;
    p.visit([&](const std::string&, Tensor& w_) { params.push_back(w_); });

    rows.push_back(fd_row("full loss (v2 + m-step)", 1e-4,
                          [&](Tape& t) {
                              LatentState s = forward_full(t, p, b, false);
                              Tensor le = e_step_loss_v2(t, s, w, b, sets, p.phi_e.env_head);
                              Tensor lm = m_step_loss(t, s.y_hat, b.labels);
                              return t.add(le, lm);
                          },
                          params));
    rows.push_back(fd_row("full loss (obi + m-step)", 1e-4,
                          [&](Tape& t) {
                              LatentState s = forward_full(t, p, b, false);
                              Tensor le = kl_gaussian_prior_loss(t, s, w, b);
                              Tensor lm = m_step_loss(t, s.y_hat, b.labels);
                              return t.add(le, lm);
                          },
                          params));
    return rows;
}

// ---------------------------------------------------------------------------
// Subcommand bodies.
// ---------------------------------------------------------------------------

namespace cli_detail {

inline std::string fmt4(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.4f", v);
    return buf;
}

inline std::vector<long> parse_sizes(const std::string& s) {
    std::vector<long> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ',')) {
        try {
            std::size_t pos = 0;
            long v = std::stol(item, &pos);
            if (pos != item.size() || v < 1) throw std::invalid_argument(item);
            out.push_back(v);
        } catch (const std::exception&) {
            throw config_error("--sizes wants four positive integers a,b,c,d, got \"" + s + "\"");
        }
    }
    if (out.size() != 4)
        throw config_error("--sizes wants four positive integers a,b,c,d, got \"" + s + "\"");
    return out;
}

inline void apply_ablate_list(const std::string& list, AblationFlags& fl) {
    std::stringstream ss(list);
    std::string item;
    while (std::getline(ss, item, ',')) {
        if (item.empty()) continue;
        if (item == "with_obi") fl.with_obi = true;
        else if (item == "without_em") fl.without_em = true;
        else if (item == "without_grl") fl.without_grl = true;
        else if (item == "without_l_env") fl.without_l_env = true;
        else if (item == "without_l_cl") fl.without_l_cl = true;
        else if (item == "without_h_y_tilde") fl.without_h_y_tilde = true;
        else if (item == "noise_e") fl.noise_e = true;
        else if (item == "noise_g_hat") fl.noise_g_hat = true;
        else throw config_error("unknown ablation flag \"" + item + "\"");
    }
}

}  // namespace cli_detail

inline int cmd_gen_data(const std::string& kind, const std::string& shift, std::uint64_t seed,
                        const std::string& out_dir, double p_train, const std::string& sizes,
                        std::ostream& out) {
    if (kind != "motif") throw config_error("unknown dataset kind \"" + kind + "\" (want motif)");
    MotifConfig mc;
    mc.shift = parse_shift_kind(shift);
    if (!(p_train > 0.0 && p_train <= 1.0))
        throw config_error("--p-train must be in (0, 1], got " + std::to_string(p_train));
    mc.p_train = p_train;
    if (!sizes.empty()) {
        std::vector<long> sz = cli_detail::parse_sizes(sizes);
        mc.n_train = sz[0];
        mc.n_id_val = sz[1];
        mc.n_ood_val = sz[2];
        mc.n_ood_test = sz[3];
    }
    DatasetSplit ds = generate_motif_dataset(mc, seed);

    std::filesystem::create_directories(out_dir);
    auto file = [&](const char* name) {
        return (std::filesystem::path(out_dir) / name).string();
    };
    save_jsonl(ds.train, file("train.jsonl"));
    save_jsonl(ds.id_val, file("id_val.jsonl"));
    save_jsonl(ds.ood_val, file("ood_val.jsonl"));
    save_jsonl(ds.ood_test, file("ood_test.jsonl"));

    nlohmann::ordered_json man;
    man["kind"] = kind;
    man["shift"] = shift_kind_name(mc.shift);
    man["seed"] = seed;
    nlohmann::ordered_json sj;
    sj["train"] = mc.n_train;
    sj["id_val"] = mc.n_id_val;
    sj["ood_val"] = mc.n_ood_val;
    sj["ood_test"] = mc.n_ood_test;
    man["sizes"] = sj;
    man["class_count"] = ds.class_count;
    man["env_count"] = ds.env_count;
    if (mc.shift == ShiftKind::covariate) {
        man["train_bases"] = {0, 1, 2};  // wheel, tree, ladder
        man["ood_bases"] = {3, 4};       // star, path
    } else {
        man["p_train"] = mc.p_train;
        man["p_ood"] = mc.p_ood;
        man["train_regime"] = 0;
        man["ood_regime"] = 1;
    }
    {
        std::ofstream mf(file("manifest.json"), std::ios::binary | std::ios::trunc);
        if (!mf) throw data_error("cannot write " + file("manifest.json"));
        mf << man.dump(2) << "\n";
    }
    out << "wrote " << out_dir << ": train " << mc.n_train << ", id_val " << mc.n_id_val
        << ", ood_val " << mc.n_ood_val << ", ood_test " << mc.n_ood_test << "\n";
    return 0;
}

inline int cmd_train(const std::string& config_path, std::string data_dir, std::string out_dir,
                     bool seed_set, std::uint64_t seed, const std::string& variant,
                     const std::string& ablate, std::ostream& out) {
    TrainConfig cfg;
    AblationFlags fl;
    if (!config_path.empty()) {
        std::ifstream in(config_path, std::ios::binary);
        if (!in) throw config_error("cannot open config file " + config_path);
        nlohmann::json j;
        try {
            in >> j;
        } catch (const nlohmann::json::exception& e) {
            throw config_error("config file " + config_path + ": " + e.what());
        }
        if (!j.is_object()) throw config_error("config file " + config_path + ": not an object");
        // dataset paths may live in the config; command-line flags win
        if (j.contains("data_dir")) {
            if (data_dir.empty()) data_dir = j["data_dir"].get<std::string>();
            j.erase("data_dir");
        }
        if (j.contains("out_dir")) {
            if (out_dir.empty()) out_dir = j["out_dir"].get<std::string>();
            j.erase("out_dir");
        }
        config_from_json(j, cfg, fl);
    }
    if (seed_set) cfg.seed = seed;
    if (!variant.empty()) cfg.variant = parse_variant(variant);
    cli_detail::apply_ablate_list(ablate, fl);
    validate_config(cfg);
    if (data_dir.empty()) throw config_error("train: no data directory (--data or config data_dir)");
    if (out_dir.empty()) throw config_error("train: no output directory (--out or config out_dir)");

    DatasetSplit ds;
    auto file = [&](const char* name) {
        return (std::filesystem::path(data_dir) / name).string();
    };
    ds.train = load_jsonl(file("train.jsonl"));
    ds.id_val = load_jsonl(file("id_val.jsonl"));
    ds.ood_val = load_jsonl(file("ood_val.jsonl"));
    ds.ood_test = load_jsonl(file("ood_test.jsonl"));

    std::filesystem::create_directories(out_dir);
    {
        std::string echo_path = (std::filesystem::path(out_dir) / "config.json").string();
        std::ofstream echo(echo_path, std::ios::binary | std::ios::trunc);
        if (!echo) throw data_error("cannot write " + echo_path);
        echo << config_to_json(cfg, fl).dump(2) << "\n";
    }
    TrainResult r = train(cfg, fl, ds, out_dir);
    out << "best epoch " << r.best_epoch << " (ood_val " << cli_detail::fmt4(r.best_ood_val)
        << ")\n";
    out << "ood_test " << cli_detail::fmt4(r.ood_test) << "\n";
    return 0;
}

inline int cmd_eval(const std::string& checkpoint_path, const std::string& data_path,
                    const std::string& metric, std::ostream& out) {
    Checkpoint ck = load_checkpoint(checkpoint_path);
    Model m = model_from_checkpoint(ck);
    std::vector<Graph> graphs = load_jsonl(data_path);
    double score = evaluate(m, graphs, parse_metric(metric), ck.cfg, ck.flags);
    out << cli_detail::fmt4(score) << "\n";
    return 0;
}

inline int cmd_gradcheck(std::uint64_t seed, std::ostream& out) {
    std::vector<GradcheckRow> rows = gradcheck_report(seed);
    out << "block                        max_rel_err  threshold  result\n";
    bool all_pass = true;
    for (const GradcheckRow& r : rows) {
        char buf[128];
        std::snprintf(buf, sizeof buf, "%-28s %-12.3e %-10.0e %s\n", r.block.c_str(),
                      r.max_rel_err, r.threshold, r.pass ? "pass" : "FAIL");
        out << buf;
        if (!r.pass) all_pass = false;
    }
    if (!all_pass) throw numeric_error("gradcheck: at least one block exceeded its threshold");
    return 0;
}

// ---------------------------------------------------------------------------
// Argument parsing and exit-code mapping. args excludes the program name.
// Exit codes: 0 success, 1 usage/config, 2 data/validation, 3 numeric.
// ---------------------------------------------------------------------------

inline int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"DEROG: variational-EM training engine for graph OOD classification"};
    app.require_subcommand(1);

    std::string g_kind = "motif", g_shift = "covariate", g_out;
    std::uint64_t g_seed = 0;
    double g_p_train = 0.9;
    std::string g_sizes;
    CLI::App* gen = app.add_subcommand("gen_data", "generate a synthetic motif dataset");
    gen->alias("gen-data");
    gen->add_option("--kind", g_kind, "dataset family (motif)");
    gen->add_option("--shift", g_shift, "covariate|concept");
    gen->add_option("--seed", g_seed, "generation seed");
    gen->add_option("--out", g_out, "output directory")->required();
    gen->add_option("--p-train", g_p_train, "concept mode: P(base agrees with label) in train");
    gen->add_option("--sizes", g_sizes, "split sizes a,b,c,d");

    std::string t_config, t_data, t_out, t_variant, t_ablate;
    std::uint64_t t_seed = 0;
    CLI::App* tr = app.add_subcommand("train", "train a model and write history + checkpoint");
    tr->add_option("--config", t_config, "JSON config file");
    tr->add_option("--data", t_data, "directory with the four split files");
    tr->add_option("--out", t_out, "output directory");
    CLI::Option* seed_opt = tr->add_option("--seed", t_seed, "training seed");
    tr->add_option("--variant", t_variant, "v1|v2|erm");
    tr->add_option("--ablate", t_ablate, "comma-separated ablation flags");

    std::string e_ckpt, e_data, e_metric = "accuracy";
    CLI::App* ev = app.add_subcommand("eval", "score a checkpoint on a split file");
    ev->add_option("--checkpoint", e_ckpt, "checkpoint JSON")->required();
    ev->add_option("--data", e_data, "split JSONL file")->required();
    ev->add_option("--metric", e_metric, "accuracy|roc_auc");

    std::uint64_t c_seed = 0;
    CLI::App* gc = app.add_subcommand("gradcheck", "finite-difference gradient verification");
    gc->add_option("--seed", c_seed, "gradcheck seed");

    std::vector<const char*> argv;
    argv.push_back("derog");
    for (const std::string& a : args) argv.push_back(a.c_str());
    try {
        app.parse(static_cast<int>(argv.size()), argv.data());
    } catch (const CLI::ParseError& e) {
        int code = app.exit(e, out, err);
        return code == 0 ? 0 : 1;
    }

    try {
        if (gen->parsed())
            return cmd_gen_data(g_kind, g_shift, g_seed, g_out, g_p_train, g_sizes, out);
        if (tr->parsed())
            return cmd_train(t_config, t_data, t_out, seed_opt->count() > 0, t_seed, t_variant,
                             t_ablate, out);
        if (ev->parsed()) return cmd_eval(e_ckpt, e_data, e_metric, out);
        if (gc->parsed()) return cmd_gradcheck(c_seed, out);
        err << "error: no subcommand\n";
        return 1;
    } catch (const config_error& e) {
        err << "error: " << e.what() << "\n";
        return 1;
    } catch (const usage_error& e) {
        err << "error: " << e.what() << "\n";
        return 1;
    } catch (const shape_error& e) {
        err << "error: " << e.what() << "\n";
        return 1;
    } catch (const data_error& e) {
        err << "error: " << e.what() << "\n";
        return 2;
    } catch (const validation_error& e) {
        err << "error: " << e.what() << "\n";
        return 2;
    } catch (const numeric_error& e) {
        err << "error: " << e.what() << "\n";
        return 3;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return 1;
    }
}

}  // namespace derog
