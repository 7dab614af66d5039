#pragma once
// Experiment description: one JSON document holding everything a run needs —
// backend, dataset, training schedule — so the run directory can keep an
// exact resolved copy and a rerun reproduces the original bit for bit.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>

#include <json.hpp>

#include "adapt.hpp"
#include "core.hpp"
#include "data.hpp"
#include "model.hpp"

namespace segadapt {

struct ExperimentConfig {
    std::string name = "experiment";
    std::string run_root = "runs";
    uint64_t model_seed = 0;  // backend weight initialization
    BackendConfig backend;
    DatasetManifest dataset;
    TrainConfig train;

    void validate() const {
        if (name.empty()) throw ConfigError("experiment config: name must not be empty");
        if (name.find('/') != std::string::npos || name.find("..") != std::string::npos)
            throw ConfigError("experiment config: name must be a plain directory name");
        dataset.validate();
        train.validate();
    }
};

// The run root is part of the config but an environment override wins, so a
// scheduler can redirect output without touching the experiment file.
inline std::string resolve_run_root(const ExperimentConfig& cfg) {
    if (const char* env = std::getenv("SEGADAPT_RUN_ROOT"); env && *env) return env;
    return cfg.run_root;
}

namespace detail {

inline nlohmann::json loss_to_json(const LossConfig& c) {
    return {{"gamma", c.gamma},
            {"eps", c.eps},
            {"lambda_focal", c.lambda_focal},
            {"lambda_dice_stu", c.lambda_dice_stu},
            {"lambda_dice_tea", c.lambda_dice_tea},
            {"tau", c.tau},
            {"per_instance_contrastive", c.per_instance_contrastive}};
}

inline nlohmann::json train_to_json(const TrainConfig& c) {
    return {{"batch_size", c.batch_size},
            {"learning_rate", c.learning_rate},
            {"weight_decay", c.weight_decay},
            {"epochs", c.epochs},
            {"rank", c.rank},
            {"weak_sup", weak_sup_name(c.weak_sup)},
            {"finetune_mode", c.finetune_mode.str()},
            {"teacher_mode", c.teacher_mode},
            {"ema_momentum", c.ema_momentum},
            {"use_selftrain", c.use_selftrain},
            {"use_anchor", c.use_anchor},
            {"use_contrastive", c.use_contrastive},
            {"labeled_subset_size", c.labeled_subset_size},
            {"seed", c.seed},
            {"loss", loss_to_json(c.loss)}};
}

inline nlohmann::json backend_to_json(const BackendConfig& c) {
    return {{"backend", c.backend},
            {"input_size", c.input_size},
            {"feature_dim", c.feature_dim},
            {"mean", c.mean},
            {"stddev", c.stddev},
            {"pretrained_weights_path", c.pretrained_weights_path}};
}

inline nlohmann::json manifest_to_json(const DatasetManifest& m) {
    nlohmann::json j{{"name", m.name},
                     {"root", m.root},
                     {"format", m.format},
                     {"split_ratio", m.split_ratio},
                     {"seed", m.seed}};
    if (m.format == "synthetic") j["synthetic"] = {{"kind", m.toy_kind}, {"n_images", m.toy_images}};
    return j;
}

// Field-presence-tolerant readers: absent keys keep their defaults so a
// config file only says what it changes.
template <typename T>
void maybe(const nlohmann::json& j, const char* key, T& out) {
    if (j.contains(key)) out = j.at(key).get<T>();
}

inline void loss_from_json(const nlohmann::json& j, LossConfig& c) {
    maybe(j, "gamma", c.gamma);
    maybe(j, "eps", c.eps);
    maybe(j, "lambda_focal", c.lambda_focal);
    maybe(j, "lambda_dice_stu", c.lambda_dice_stu);
    maybe(j, "lambda_dice_tea", c.lambda_dice_tea);
    maybe(j, "tau", c.tau);
    maybe(j, "per_instance_contrastive", c.per_instance_contrastive);
}

inline void train_from_json(const nlohmann::json& j, TrainConfig& c) {
    maybe(j, "batch_size", c.batch_size);
    maybe(j, "learning_rate", c.learning_rate);
    maybe(j, "weight_decay", c.weight_decay);
    maybe(j, "epochs", c.epochs);
    maybe(j, "rank", c.rank);
    if (j.contains("weak_sup")) c.weak_sup = weak_sup_from_name(j.at("weak_sup").get<std::string>());
    if (j.contains("finetune_mode"))
        c.finetune_mode = FinetuneMode::parse(j.at("finetune_mode").get<std::string>());
    maybe(j, "teacher_mode", c.teacher_mode);
    maybe(j, "ema_momentum", c.ema_momentum);
    maybe(j, "use_selftrain", c.use_selftrain);
    maybe(j, "use_anchor", c.use_anchor);
    maybe(j, "use_contrastive", c.use_contrastive);
    maybe(j, "labeled_subset_size", c.labeled_subset_size);
    maybe(j, "seed", c.seed);
    if (j.contains("loss")) loss_from_json(j.at("loss"), c.loss);
}

inline void backend_from_json(const nlohmann::json& j, BackendConfig& c) {
    maybe(j, "backend", c.backend);
    maybe(j, "input_size", c.input_size);
    maybe(j, "feature_dim", c.feature_dim);
    maybe(j, "mean", c.mean);
    maybe(j, "stddev", c.stddev);
    maybe(j, "pretrained_weights_path", c.pretrained_weights_path);
}

inline void manifest_from_json(const nlohmann::json& j, DatasetManifest& m) {
    maybe(j, "name", m.name);
    maybe(j, "root", m.root);
    maybe(j, "format", m.format);
    maybe(j, "split_ratio", m.split_ratio);
    maybe(j, "seed", m.seed);
    if (j.contains("synthetic")) {
        const auto& s = j.at("synthetic");
        maybe(s, "kind", m.toy_kind);
        maybe(s, "n_images", m.toy_images);
    }
}

}  // namespace detail

inline std::string experiment_to_json_text(const ExperimentConfig& cfg) {
    nlohmann::json j{{"name", cfg.name},
                     {"run_root", cfg.run_root},
                     {"model_seed", cfg.model_seed},
                     {"backend", detail::backend_to_json(cfg.backend)},
                     {"dataset", detail::manifest_to_json(cfg.dataset)},
                     {"train", detail::train_to_json(cfg.train)}};
    return j.dump(2) + "\n";
}

inline ExperimentConfig experiment_from_json_text(const std::string& text) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
        ExperimentConfig cfg;
        detail::maybe(j, "name", cfg.name);
        detail::maybe(j, "run_root", cfg.run_root);
        detail::maybe(j, "model_seed", cfg.model_seed);
        if (j.contains("backend")) detail::backend_from_json(j.at("backend"), cfg.backend);
        if (j.contains("dataset")) {
            // Either an inline manifest object or a path to a manifest file.
            if (j.at("dataset").is_string()) {
                cfg.dataset = load_manifest(j.at("dataset").get<std::string>());
            } else {
                detail::manifest_from_json(j.at("dataset"), cfg.dataset);
            }
        }
        if (j.contains("train")) detail::train_from_json(j.at("train"), cfg.train);
        return cfg;
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(std::string("experiment config: ") + e.what());
    }
}

// Loads a config file; a relative dataset root or manifest path is resolved
// against the config file's own directory so the file can travel.
inline ExperimentConfig load_experiment_config(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open experiment config: " + path);
    std::ostringstream ss;
    ss << in.rdbuf();

    const std::string text = ss.str();
    const auto base = std::filesystem::path(path).parent_path();
    // Manifest-by-path must also resolve relative to the config file.
    nlohmann::json peek;
    try {
        peek = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        throw ParseError("experiment config " + path + ": " + e.what());
    }
    if (peek.contains("dataset") && peek.at("dataset").is_string()) {
        std::filesystem::path mpath = peek.at("dataset").get<std::string>();
        if (mpath.is_relative()) peek["dataset"] = (base / mpath).string();
    }
    ExperimentConfig cfg = experiment_from_json_text(peek.dump());

    std::filesystem::path root = cfg.dataset.root;
    if (root.is_relative()) cfg.dataset.root = (base / root).lexically_normal().string();
    std::filesystem::path weights = cfg.backend.pretrained_weights_path;
    if (!weights.empty() && weights.is_relative())
        cfg.backend.pretrained_weights_path = (base / weights).lexically_normal().string();
    cfg.validate();
    return cfg;
}

inline void save_experiment_config(const ExperimentConfig& cfg, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write experiment config: " + path);
    out << experiment_to_json_text(cfg);
    if (!out) throw IoError("short write on experiment config: " + path);
}

}  // namespace segadapt
