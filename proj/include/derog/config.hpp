#pragma once

#include <cstdint>
#include <string>

#include <json.hpp>

#include <derog/errors.hpp>
#include <derog/objective.hpp>

namespace derog {

enum class Variant { v1, v2, erm };
enum class Metric { accuracy, roc_auc };

inline std::string variant_name(Variant v) {
    switch (v) {
        case Variant::v1: return "v1";
        case Variant::v2: return "v2";
        default: return "erm";
    }
}

inline Variant parse_variant(const std::string& s) {
    if (s == "v1") return Variant::v1;
    if (s == "v2") return Variant::v2;
    if (s == "erm") return Variant::erm;
    throw config_error("unknown variant \"" + s + "\" (want v1|v2|erm)");
}

inline std::string metric_name(Metric m) {
    return m == Metric::accuracy ? "accuracy" : "roc_auc";
}

inline Metric parse_metric(const std::string& s) {
    if (s == "accuracy") return Metric::accuracy;
    if (s == "roc_auc") return Metric::roc_auc;
    throw config_error("unknown metric \"" + s + "\" (want accuracy|roc_auc)");
}

struct TrainConfig {
    double lr = 1e-4;
    double weight_decay = 1e-4;
    long hidden_dim = 32;
    long layers = 3;
    long epochs = 30;
    long batch_size = 32;
    std::uint64_t seed = 0;
    Variant variant = Variant::v2;
    Metric metric = Metric::accuracy;
    LossWeights weights;
    double lambda_grl = 1.0;
};

struct AblationFlags {
    bool with_obi = false;
    bool without_em = false;
    bool without_grl = false;
    bool without_l_env = false;
    bool without_l_cl = false;
    bool without_h_y_tilde = false;
    bool noise_e = false;
    bool noise_g_hat = false;
};

inline void validate_config(const TrainConfig& cfg) {
    if (!(cfg.lr > 0.0)) throw config_error("config: lr must be > 0");
    if (cfg.weight_decay < 0.0) throw config_error("config: weight_decay must be >= 0");
    if (cfg.hidden_dim < 1) throw config_error("config: hidden_dim must be >= 1");
    if (cfg.layers < 1) throw config_error("config: layers must be >= 1");
    if (cfg.epochs < 0) throw config_error("config: epochs must be >= 0");
    if (cfg.batch_size < 1) throw config_error("config: batch_size must be >= 1");
    validate_weights(cfg.weights);
}

// Single schema for config files, the effective-config echo, the history
// header, and the checkpoint config block.
inline nlohmann::ordered_json config_to_json(const TrainConfig& cfg, const AblationFlags& fl) {
    nlohmann::ordered_json j;
    j["lr"] = cfg.lr;
    j["weight_decay"] = cfg.weight_decay;
    j["hidden_dim"] = cfg.hidden_dim;
    j["layers"] = cfg.layers;
    j["epochs"] = cfg.epochs;
    j["batch_size"] = cfg.batch_size;
    j["seed"] = cfg.seed;
    j["variant"] = variant_name(cfg.variant);
    j["metric"] = metric_name(cfg.metric);
    j["lambda_g_hat"] = cfg.weights.lambda_g_hat;
    j["lambda_e"] = cfg.weights.lambda_e;
    j["lambda_y_tilde"] = cfg.weights.lambda_y_tilde;
    j["lambda_env"] = cfg.weights.lambda_env;
    j["lambda_cl"] = cfg.weights.lambda_cl;
    j["k"] = cfg.weights.k;
    j["tau"] = cfg.weights.tau;
    j["cl_include_positive"] = cfg.weights.cl_include_positive;
    j["lambda_grl"] = cfg.lambda_grl;
    nlohmann::ordered_json a;
    a["with_obi"] = fl.with_obi;
    a["without_em"] = fl.without_em;
    a["without_grl"] = fl.without_grl;
    a["without_l_env"] = fl.without_l_env;
    a["without_l_cl"] = fl.without_l_cl;
    a["without_h_y_tilde"] = fl.without_h_y_tilde;
    a["noise_e"] = fl.noise_e;
    a["noise_g_hat"] = fl.noise_g_hat;
    j["ablations"] = a;
    return j;
}

namespace config_detail {

template <class T>
T expect(const nlohmann::json& v, const std::string& key, const char* kind) {
    try {
        return v.get<T>();
    } catch (const nlohmann::json::exception&) {
        throw config_error("config key \"" + key + "\" must be " + kind);
    }
}

}  // namespace config_detail

// Applies a JSON object onto existing defaults; unknown keys are rejected so
// typos never pass silently.
inline void config_from_json(const nlohmann::json& j, TrainConfig& cfg, AblationFlags& fl) {
    using config_detail::expect;
    if (!j.is_object()) throw config_error("config: top level must be a JSON object");
    for (const auto& [key, value] : j.items()) {
        if (key == "lr") cfg.lr = expect<double>(value, key, "a number");
        else if (key == "weight_decay") cfg.weight_decay = expect<double>(value, key, "a number");
        else if (key == "hidden_dim") cfg.hidden_dim = expect<long>(value, key, "an integer");
        else if (key == "layers") cfg.layers = expect<long>(value, key, "an integer");
        else if (key == "epochs") cfg.epochs = expect<long>(value, key, "an integer");
        else if (key == "batch_size") cfg.batch_size = expect<long>(value, key, "an integer");
        else if (key == "seed") cfg.seed = expect<std::uint64_t>(value, key, "an integer");
        else if (key == "variant") cfg.variant = parse_variant(expect<std::string>(value, key, "a string"));
        else if (key == "metric") cfg.metric = parse_metric(expect<std::string>(value, key, "a string"));
        else if (key == "lambda_g_hat") cfg.weights.lambda_g_hat = expect<double>(value, key, "a number");
        else if (key == "lambda_e") cfg.weights.lambda_e = expect<double>(value, key, "a number");
        else if (key == "lambda_y_tilde") cfg.weights.lambda_y_tilde = expect<double>(value, key, "a number");
        else if (key == "lambda_env") cfg.weights.lambda_env = expect<double>(value, key, "a number");
        else if (key == "lambda_cl") cfg.weights.lambda_cl = expect<double>(value, key, "a number");
        else if (key == "k") cfg.weights.k = expect<long>(value, key, "an integer");
        else if (key == "tau") cfg.weights.tau = expect<double>(value, key, "a number");
        else if (key == "cl_include_positive")
            cfg.weights.cl_include_positive = expect<bool>(value, key, "a bool");
        else if (key == "lambda_grl") cfg.lambda_grl = expect<double>(value, key, "a number");
        else if (key == "ablations") {
            if (!value.is_object()) throw config_error("config key \"ablations\" must be an object");
            for (const auto& [ak, av] : value.items()) {
                bool* slot = nullptr;
                if (ak == "with_obi") slot = &fl.with_obi;
                else if (ak == "without_em") slot = &fl.without_em;
                else if (ak == "without_grl") slot = &fl.without_grl;
                else if (ak == "without_l_env") slot = &fl.without_l_env;
                else if (ak == "without_l_cl") slot = &fl.without_l_cl;
                else if (ak == "without_h_y_tilde") slot = &fl.without_h_y_tilde;
                else if (ak == "noise_e") slot = &fl.noise_e;
                else if (ak == "noise_g_hat") slot = &fl.noise_g_hat;
                else throw config_error("config: unknown ablation flag \"" + ak + "\"");
                *slot = expect<bool>(av, ak, "a bool");
            }
        } else {
            throw config_error("config: unknown key \"" + key + "\"");
        }
    }
    validate_config(cfg);
}

}  // namespace derog
