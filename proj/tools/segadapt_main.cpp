// segadapt — command-line front end for the adaptation library.
//
// Subcommands:
//   make-toy-data   render a synthetic domain to disk (images + masks + manifest)
//   pretrain        supervised warm-up on a labeled split; writes a full-weights checkpoint
//   adapt           source-free weak-supervision adaptation; writes a run directory
//   evaluate        score checkpoints on the held-out split, optionally across prompt types
//   gen-prompts     materialize weak prompts for a dataset in the text format
//   report          pretty-print the summary of a finished run directory
//
// Every command is deterministic given its config and seeds, never mutates its
// inputs, and exits nonzero with a one-line structured error on failure.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include <segadapt/segadapt.hpp>

namespace fs = std::filesystem;
using namespace segadapt;

namespace {

void write_text_file(const fs::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write " + path.string());
    out << text;
    if (!out) throw IoError("short write on " + path.string());
}

std::string read_text_file(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

// Fresh backend weights, then the optional pretrained snapshot on top. This is
// the frozen source model every run starts from.
std::unique_ptr<SegmentationModel> build_model_from(const ExperimentConfig& cfg) {
    auto model = make_model(cfg.backend, cfg.model_seed);
    if (!cfg.backend.pretrained_weights_path.empty()) {
        const Checkpoint ckpt = load_checkpoint(cfg.backend.pretrained_weights_path);
        if (ckpt.kind != "full-weights")
            throw ConfigError("pretrained_weights_path must point at a full-weights checkpoint, "
                              "got kind '" + ckpt.kind + "': " + cfg.backend.pretrained_weights_path);
        std::map<std::string, Tensor> weights;
        for (const auto& [name, tensor] : ckpt.tensors) weights.emplace(name, tensor);
        model->load_weights(weights);
    }
    return model;
}

std::pair<std::vector<Sample>, std::vector<Sample>> load_splits(const ExperimentConfig& cfg) {
    auto samples = load_dataset(cfg.dataset);
    return split(std::move(samples), cfg.dataset.split_ratio, cfg.dataset.seed);
}

const std::vector<Sample>& pick_split(const std::string& which,
                                      const std::pair<std::vector<Sample>, std::vector<Sample>>& s,
                                      std::vector<Sample>& all_storage) {
    if (which == "train") return s.first;
    if (which == "held") return s.second;
    if (which == "all") {
        all_storage = s.first;
        all_storage.insert(all_storage.end(), s.second.begin(), s.second.end());
        return all_storage;
    }
    throw ConfigError("unknown split '" + which + "' (expected train|held|all)");
}

uint64_t eval_seed_for(uint64_t seed) { return mix_seed(seed, hash_string("heldout-eval")); }

// ---- make-toy-data --------------------------------------------------------

struct MakeToyDataArgs {
    std::string out_dir;
    std::string kind = "clean";
    std::string name;
    int n_images = 100;
    uint64_t seed = 0;
    double split_ratio = 0.8;
};

int cmd_make_toy_data(const MakeToyDataArgs& a) {
    const fs::path out(a.out_dir);
    const fs::path manifest_path = out / "manifest.json";
    if (fs::exists(manifest_path))
        throw IoError("refusing to overwrite existing dataset manifest: " + manifest_path.string());

    const auto samples = make_toy_domain(toy_kind_from_name(a.kind), a.n_images, a.seed);
    fs::create_directories(out);
    write_dataset(samples, out.string());

    DatasetManifest m;
    m.name = a.name.empty() ? ("toy-" + a.kind) : a.name;
    m.root = ".";
    m.format = "mask-dirs";
    m.split_ratio = a.split_ratio;
    m.seed = a.seed;
    save_manifest(m, manifest_path.string());

    size_t instances = 0;
    for (const auto& s : samples) instances += s.instances.size();
    std::printf("wrote %zu images / %zu instances under %s\nmanifest: %s\n", samples.size(),
                instances, out.string().c_str(), manifest_path.string().c_str());
    return 0;
}

// ---- pretrain --------------------------------------------------------------

struct PretrainArgs {
    std::string config_path;
    std::string out_path;
    int epochs = -1;
    int64_t seed = -1;
};

int cmd_pretrain(const PretrainArgs& a) {
    ExperimentConfig cfg = load_experiment_config(a.config_path);
    if (a.epochs >= 0) cfg.train.epochs = a.epochs;
    if (a.seed >= 0) cfg.train.seed = static_cast<uint64_t>(a.seed);
    cfg.validate();

    const auto splits = load_splits(cfg);
    auto model = make_model(cfg.backend, cfg.model_seed);  // pretraining starts from scratch

    SupervisedConfig scfg;
    scfg.epochs = cfg.train.epochs;
    scfg.batch_size = cfg.train.batch_size;
    scfg.learning_rate = cfg.train.learning_rate;
    scfg.weight_decay = cfg.train.weight_decay;
    scfg.prompt_type = to_prompt_type(cfg.train.weak_sup);
    scfg.seed = cfg.train.seed;

    const auto log = supervised_finetune(*model, splits.first, scfg);
    const auto held = evaluate(*model, splits.second, scfg.prompt_type,
                               eval_seed_for(cfg.train.seed), cfg.dataset.name);

    if (const fs::path parent = fs::path(a.out_path).parent_path(); !parent.empty())
        fs::create_directories(parent);
    save_checkpoint(full_weights_checkpoint(*model), a.out_path);

    std::printf("pretrained on %zu samples for %d epochs (%zu steps)\n", splits.first.size(),
                scfg.epochs, log.size());
    if (!log.empty())
        std::printf("loss: first %.6f, last %.6f\n", log.front().losses.total, log.back().losses.total);
    std::printf("held-out mIoU %.3f over %zu instances\ncheckpoint: %s\n", held.miou,
                held.instance_count, a.out_path.c_str());
    return 0;
}

// ---- adapt ------------------------------------------------------------------

struct AdaptArgs {
    std::string config_path;
    int64_t seed = -1;
    int64_t subset_size = -1;
    int epochs = -1;
    std::string finetune_mode;
    std::string teacher_mode;
    std::string weak_sup;
    bool no_anchor = false;
    bool no_contrastive = false;
    bool no_selftrain = false;
};

int cmd_adapt(const AdaptArgs& a) {
    ExperimentConfig cfg = load_experiment_config(a.config_path);
    if (a.seed >= 0) cfg.train.seed = static_cast<uint64_t>(a.seed);
    if (a.subset_size >= 0) cfg.train.labeled_subset_size = static_cast<size_t>(a.subset_size);
    if (a.epochs >= 0) cfg.train.epochs = a.epochs;
    if (!a.finetune_mode.empty()) cfg.train.finetune_mode = FinetuneMode::parse(a.finetune_mode);
    if (!a.teacher_mode.empty()) cfg.train.teacher_mode = a.teacher_mode;
    if (!a.weak_sup.empty()) cfg.train.weak_sup = weak_sup_from_name(a.weak_sup);
    if (a.no_anchor) cfg.train.use_anchor = false;
    if (a.no_contrastive) cfg.train.use_contrastive = false;
    if (a.no_selftrain) cfg.train.use_selftrain = false;
    cfg.validate();

    const auto splits = load_splits(cfg);
    auto model = build_model_from(cfg);

    const PromptType eval_type = to_prompt_type(cfg.train.weak_sup);
    const auto baseline = evaluate(*model, splits.second, eval_type,
                                   eval_seed_for(cfg.train.seed), cfg.dataset.name);

    const auto result =
        run_adaptation(std::move(model), splits.first, splits.second, cfg.train);

    const fs::path dir = fs::path(resolve_run_root(cfg)) / cfg.name;
    fs::create_directories(dir);
    save_experiment_config(cfg, (dir / "config.json").string());
    write_text_file(dir / "log.csv", result.csv);
    save_checkpoint(result.last, (dir / "adapter.ckpt").string());
    save_checkpoint(result.best, (dir / "adapter_best.ckpt").string());

    nlohmann::json rj{{"dataset", cfg.dataset.name},
                      {"weak_sup", weak_sup_name(cfg.train.weak_sup)},
                      {"finetune_mode", cfg.train.finetune_mode.str()},
                      {"epochs", cfg.train.epochs},
                      {"steps", result.log.size()},
                      {"adapt_samples", splits.first.size()},
                      {"heldout_samples", splits.second.size()},
                      {"baseline_miou", baseline.miou},
                      {"last_miou", result.last_miou},
                      {"best_miou", result.best_miou},
                      {"best_epoch", result.best_epoch},
                      {"skipped_instances", result.skipped_instances},
                      {"skipped_samples", result.skipped_samples}};
    write_text_file(dir / "report.json", rj.dump(2) + "\n");

    char buf[512];
    std::snprintf(buf, sizeof(buf),
                  "run %s\n"
                  "dataset %s: %zu adapt / %zu held-out samples\n"
                  "weak supervision %s, finetune mode %s, %d epochs (%zu steps)\n"
                  "held-out mIoU: unadapted %.4f -> last %.4f (best %.4f at epoch %d)\n",
                  cfg.name.c_str(), cfg.dataset.name.c_str(), splits.first.size(),
                  splits.second.size(), weak_sup_name(cfg.train.weak_sup),
                  cfg.train.finetune_mode.str().c_str(), cfg.train.epochs, result.log.size(),
                  baseline.miou, result.last_miou, result.best_miou, result.best_epoch);
    write_text_file(dir / "report.txt", buf);
    std::fputs(buf, stdout);
    std::printf("run directory: %s\n", dir.string().c_str());
    return 0;
}

// ---- evaluate ---------------------------------------------------------------

struct EvaluateArgs {
    std::string config_path;
    std::vector<std::string> checkpoints;
    std::string prompt = "box";
    std::string split = "held";
    std::string report_path;
    uint64_t seed = 0;
    bool cross_prompt = false;
    bool oracle = false;
};

int cmd_evaluate(const EvaluateArgs& a) {
    ExperimentConfig cfg = load_experiment_config(a.config_path);
    const auto splits = load_splits(cfg);
    std::vector<Sample> all_storage;
    const auto& samples = pick_split(a.split, splits, all_storage);

    const std::vector<PromptType> types =
        a.cross_prompt ? std::vector<PromptType>{PromptType::box, PromptType::points,
                                                 PromptType::coarse_mask}
                       : std::vector<PromptType>{prompt_type_from_name(a.prompt)};

    // Each row is a named predictor; the backing models must outlive the loop.
    std::vector<std::unique_ptr<SegmentationModel>> keep_alive;
    std::vector<std::pair<std::string, MaskPredictor>> predictors;

    if (a.oracle) {
        predictors.emplace_back("oracle", [](const Sample& s, size_t k, const Prompt&) {
            return s.instances[k];
        });
    }
    for (const auto& path : a.checkpoints) {
        const Checkpoint ckpt = load_checkpoint(path);
        std::unique_ptr<SegmentationModel> frozen;
        if (ckpt.kind == "full-weights") {
            frozen = make_model(cfg.backend, cfg.model_seed);
            std::map<std::string, Tensor> weights;
            for (const auto& [name, tensor] : ckpt.tensors) weights.emplace(name, tensor);
            frozen->load_weights(weights);
        } else {
            AdaptedModel adapted(build_model_from(cfg), FinetuneMode::parse(ckpt.finetune_mode),
                                 ckpt.targets, ckpt.rank, /*seed=*/0);
            apply_checkpoint(adapted, ckpt);  // mismatch -> ConfigError with field diff
            frozen = adapted.model().clone_frozen();
            frozen->load_weights(adapted.merged_weights());
        }
        keep_alive.push_back(std::move(frozen));
        predictors.emplace_back(fs::path(path).filename().string(),
                                model_predictor(*keep_alive.back()));
    }
    if (predictors.empty())
        throw ConfigError("evaluate: pass at least one --checkpoint or --oracle");

    const auto grid =
        cross_prompt_matrix(predictors, samples, types, eval_seed_for(a.seed), cfg.dataset.name);

    // One row per predictor, one mIoU column per prompt type.
    std::printf("%-28s", "model");
    for (PromptType t : types) std::printf("  %12s", prompt_type_name(t));
    std::printf("\n");
    nlohmann::json entries = nlohmann::json::array();
    size_t i = 0;
    for (const auto& [label, predictor] : predictors) {
        (void)predictor;
        std::printf("%-28s", label.c_str());
        for (size_t c = 0; c < types.size(); ++c, ++i) {
            const auto& e = grid[i];
            std::printf("  %12.3f", e.report.miou);
            entries.push_back({{"model", label},
                               {"prompt", prompt_type_name(e.test_prompt)},
                               {"miou", e.report.miou},
                               {"instances", e.report.instance_count},
                               {"skipped", e.report.skipped}});
        }
        std::printf("\n");
    }
    if (!a.report_path.empty()) {
        nlohmann::json rj{{"dataset", cfg.dataset.name},
                          {"split", a.split},
                          {"samples", samples.size()},
                          {"entries", entries}};
        write_text_file(a.report_path, rj.dump(2) + "\n");
        std::printf("report: %s\n", a.report_path.c_str());
    }
    return 0;
}

// ---- gen-prompts ------------------------------------------------------------

struct GenPromptsArgs {
    std::string manifest_path;
    std::string out_path;
    std::string type = "box";
    uint64_t seed = 0;
};

int cmd_gen_prompts(const GenPromptsArgs& a) {
    const DatasetManifest m = load_manifest(a.manifest_path);
    const auto samples = load_dataset(m);
    const PromptType type = prompt_type_from_name(a.type);

    std::ostringstream os;
    size_t written = 0, skipped = 0;
    for (const auto& s : samples) {
        const Image& img = s.image();
        os << "# sample " << s.id << " " << img.h << " " << img.w << "\n";
        for (size_t k = 0; k < s.instances.size(); ++k) {
            // Per-instance seeding matches the evaluation protocol, so these
            // files reproduce exactly what evaluate() would ask the model.
            Rng rng(mix_seed(a.seed, hash_string(s.id), k));
            const PromptSet set = prompts_from_masks({s.instances[k]}, type, rng);
            if (set.prompts.empty()) {
                ++skipped;
                std::fprintf(stderr, "warning: %s instance %zu is degenerate for %s prompts\n",
                             s.id.c_str(), k, prompt_type_name(type));
                continue;
            }
            os << to_text(set);
            ++written;
        }
    }
    write_text_file(a.out_path, os.str());
    std::printf("wrote %zu prompt records (%zu skipped) to %s\n", written, skipped,
                a.out_path.c_str());
    return 0;
}

// ---- report -----------------------------------------------------------------

int cmd_report(const std::string& run_dir) {
    const fs::path dir(run_dir);
    if (!fs::exists(dir / "report.json"))
        throw IoError("not a finished run directory (no report.json): " + dir.string());

    nlohmann::json rj;
    try {
        rj = nlohmann::json::parse(read_text_file(dir / "report.json"));
    } catch (const nlohmann::json::exception& e) {
        throw ParseError("report.json in " + dir.string() + ": " + e.what());
    }

    std::fputs(read_text_file(dir / "report.txt").c_str(), stdout);

    // Count training steps straight from the log so the report cross-checks it.
    const std::string csv = read_text_file(dir / "log.csv");
    size_t rows = 0;
    for (char ch : csv) rows += (ch == '\n');
    if (rows > 0) --rows;  // header
    std::printf("log.csv: %zu steps; report.json says %zu\n", rows,
                rj.value("steps", size_t{0}));
    std::printf("skipped: %zu instances, %zu samples\n", rj.value("skipped_instances", size_t{0}),
                rj.value("skipped_samples", size_t{0}));
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"segadapt: weakly-supervised source-free adaptation for promptable segmentation"};
    app.require_subcommand(1);

    MakeToyDataArgs toy;
    auto* c_toy = app.add_subcommand("make-toy-data", "render a synthetic domain to disk");
    c_toy->add_option("--out", toy.out_dir, "output directory")->required();
    c_toy->add_option("--kind", toy.kind, "clean|corrupted");
    c_toy->add_option("--name", toy.name, "dataset name (default toy-<kind>)");
    c_toy->add_option("--n", toy.n_images, "number of images")->check(CLI::PositiveNumber);
    c_toy->add_option("--seed", toy.seed, "generation + split seed");
    c_toy->add_option("--split-ratio", toy.split_ratio, "train fraction in the manifest");

    PretrainArgs pre;
    auto* c_pre = app.add_subcommand("pretrain", "supervised warm-up; writes full weights");
    c_pre->add_option("--config", pre.config_path, "experiment config JSON")->required();
    c_pre->add_option("--out", pre.out_path, "checkpoint output path")->required();
    c_pre->add_option("--epochs", pre.epochs, "override train.epochs");
    c_pre->add_option("--seed", pre.seed, "override train.seed");

    AdaptArgs ad;
    auto* c_adapt = app.add_subcommand("adapt", "source-free adaptation; writes a run directory");
    c_adapt->add_option("--config", ad.config_path, "experiment config JSON")->required();
    c_adapt->add_option("--seed", ad.seed, "override train.seed");
    c_adapt->add_option("--subset-size", ad.subset_size, "adapt on a seeded subset this large");
    c_adapt->add_option("--epochs", ad.epochs, "override train.epochs");
    c_adapt->add_option("--finetune-mode", ad.finetune_mode,
                        "lora|full|decoder|layernorm|embed, combinable with '+'");
    c_adapt->add_option("--teacher-mode", ad.teacher_mode, "shared|ema");
    c_adapt->add_option("--weak-sup", ad.weak_sup, "box|points|coarse_mask|automated");
    c_adapt->add_flag("--no-anchor", ad.no_anchor, "drop the anchor-consistency term");
    c_adapt->add_flag("--no-contrastive", ad.no_contrastive, "drop the contrastive term");
    c_adapt->add_flag("--no-selftrain", ad.no_selftrain, "drop the self-training terms");

    EvaluateArgs ev;
    auto* c_eval = app.add_subcommand("evaluate", "score checkpoints on a dataset split");
    c_eval->add_option("--config", ev.config_path, "experiment config JSON")->required();
    c_eval->add_option("--checkpoint", ev.checkpoints, "checkpoint path (repeatable)");
    c_eval->add_option("--prompt", ev.prompt, "box|point|poly test prompts");
    c_eval->add_option("--split", ev.split, "train|held|all (default held)");
    c_eval->add_option("--seed", ev.seed, "prompt sampling seed");
    c_eval->add_option("--report", ev.report_path, "also write a JSON report here");
    c_eval->add_flag("--cross-prompt", ev.cross_prompt, "score all three prompt types");
    c_eval->add_flag("--oracle", ev.oracle, "score a ground-truth oracle predictor");

    GenPromptsArgs gp;
    auto* c_gp = app.add_subcommand("gen-prompts", "write weak prompts in the text format");
    c_gp->add_option("--manifest", gp.manifest_path, "dataset manifest JSON")->required();
    c_gp->add_option("--out", gp.out_path, "output text file")->required();
    c_gp->add_option("--type", gp.type, "box|points|coarse_mask");
    c_gp->add_option("--seed", gp.seed, "prompt sampling seed");

    std::string report_dir;
    auto* c_rep = app.add_subcommand("report", "print the summary of a run directory");
    c_rep->add_option("--run", report_dir, "run directory")->required();

    CLI11_PARSE(app, argc, argv);

    try {
        if (c_toy->parsed()) return cmd_make_toy_data(toy);
        if (c_pre->parsed()) return cmd_pretrain(pre);
        if (c_adapt->parsed()) return cmd_adapt(ad);
        if (c_eval->parsed()) return cmd_evaluate(ev);
        if (c_gp->parsed()) return cmd_gen_prompts(gp);
        if (c_rep->parsed()) return cmd_report(report_dir);
    } catch (const Error& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "internal error: %s\n", e.what());
        return 2;
    }
    return 0;
}
