#pragma once

#include <cstring>
#include <fstream>
#include <memory>
#include <string>
#include <vector>

#include <json.hpp>

#include "segadapt/model.hpp"

namespace segadapt {

// ---- finetune modes ----

// Which parameter sets the optimizer may touch. Modes combine with '+'
// (e.g. "lora+decoder"); the prompt encoder is frozen in every mode.
struct FinetuneMode {
    bool lora = false;
    bool decoder = false;
    bool layernorm = false;
    bool full = false;   // all encoder weights (layer norms included)
    bool embed = false;  // the learnable input offset, evp-style

    static FinetuneMode parse(const std::string& text) {
        FinetuneMode mode;
        std::string token;
        std::istringstream is(text);
        while (std::getline(is, token, '+')) {
            if (token == "lora") mode.lora = true;
            else if (token == "decoder") mode.decoder = true;
            else if (token == "layernorm") mode.layernorm = true;
            else if (token == "full") mode.full = true;
            else if (token == "embed" || token == "evp") mode.embed = true;
            else throw ConfigError("unknown finetune mode token: " + token);
        }
        if (!mode.lora && !mode.decoder && !mode.layernorm && !mode.full && !mode.embed)
            throw ConfigError("finetune mode selects nothing: " + text);
        if (mode.lora && mode.full)
            throw ConfigError("finetune mode lora+full would update wrapped weights twice");
        return mode;
    }

    std::string str() const {
        std::string s;
        const auto app = [&s](const char* t) {
            if (!s.empty()) s += '+';
            s += t;
        };
        if (lora) app("lora");
        if (full) app("full");
        if (decoder) app("decoder");
        if (layernorm) app("layernorm");
        if (embed) app("embed");
        return s;
    }
};

// ---- adapters ----

struct LoRAAdapter {
    std::string target_id;
    int rank = 0;
    ad::Var A;  // [d_i, r]
    ad::Var B;  // [r, d_o], zero at creation so the wrapped model starts as the identity
};

inline double compression_ratio(int d_i, int d_o, int r) {
    if (d_i <= 0 || d_o <= 0 || r <= 0)
        throw InvalidArgument("compression_ratio: dimensions must be positive");
    return static_cast<double>(r) * (d_i + d_o) / (static_cast<double>(d_i) * d_o);
}

// θ + A·B as plain tensors (inference-time reconstruction).
inline Tensor merge(const LoRAAdapter& adapter, const Tensor& base_weight) {
    const Tensor& a = adapter.A->val;
    const Tensor& b = adapter.B->val;
    if (base_weight.ndim() != 2 || a.dim(0) != base_weight.dim(0) ||
        b.dim(1) != base_weight.dim(1) || a.dim(1) != b.dim(0))
        throw InvalidArgument("merge: adapter does not fit weight " + base_weight.shape_str());
    Tensor out = base_weight;
    const int di = a.dim(0), r = a.dim(1), dz = b.dim(1);
    for (int i = 0; i < di; ++i)
        for (int k = 0; k < r; ++k) {
            const double av = a.at(i, k);
            if (av == 0.0) continue;
            for (int j = 0; j < dz; ++j) out.at(i, j) += av * b.at(k, j);
        }
    return out;
}

// Sensible default wrap set for the built-in backend: the token-mixing and
// MLP linear weights of every encoder block.
inline std::vector<std::string> default_lora_targets(const SegmentationModel& model) {
    std::vector<std::string> out;
    for (const auto& e : model.params().entries)
        if (e.group == "encoder" && e.var->val.ndim() == 2 &&
            (e.name.find("token_mix") != std::string::npos ||
             e.name.find("mlp.fc") != std::string::npos))
            out.push_back(e.name);
    return out;
}

// A model plus its trainable surface. Owns the base model; the optimizer
// may only write through trainable_parameters().
class AdaptedModel {
  public:
    struct TrainableParam {
        std::string name;
        ad::Var var;
    };

    AdaptedModel(std::unique_ptr<SegmentationModel> model, FinetuneMode mode,
                 std::vector<std::string> targets, int rank, uint64_t seed)
        : model_(std::move(model)), mode_(mode), rank_(rank) {
        if (!model_) throw InvalidArgument("AdaptedModel: null model");
        auto& store = model_->params();

        if (mode_.lora) {
            if (targets.empty()) targets = default_lora_targets(*model_);
            if (targets.empty()) throw ConfigError("lora mode: no wrappable encoder weights");
            if (rank_ < 1) throw InvalidArgument("lora mode: rank must be >= 1");
            for (const auto& name : targets) {
                const auto& entry = store.at(name);  // unknown name -> ConfigError
                if (entry.group != "encoder" || entry.var->val.ndim() != 2)
                    throw ConfigError("lora target " + name + " is not a 2-D encoder weight");
                const int di = entry.var->val.dim(0), dz = entry.var->val.dim(1);
                if (rank_ > std::min(di, dz))
                    throw InvalidArgument("lora rank " + std::to_string(rank_) +
                                          " exceeds min dimension of " + name);
                LoRAAdapter adapter;
                adapter.target_id = name;
                adapter.rank = rank_;
                Rng rng(mix_seed(seed, hash_string(name)));
                adapter.A = ad::leaf(Tensor::randn({di, rank_}, rng, 1.0 / std::sqrt(rank_)));
                adapter.B = ad::leaf(Tensor({rank_, dz}));
                adapters_.push_back(std::move(adapter));
            }
        }

        for (const auto& adapter : adapters_) {
            trainable_.push_back({adapter.target_id + ".lora.A", adapter.A});
            trainable_.push_back({adapter.target_id + ".lora.B", adapter.B});
        }
        for (const auto& e : store.entries) {
            const bool wanted = (mode_.full && (e.group == "encoder" || e.group == "encoder_layernorm")) ||
                                (mode_.layernorm && e.group == "encoder_layernorm") ||
                                (mode_.decoder && e.group == "decoder") ||
                                (mode_.embed && e.group == "embed");
            if (!wanted) continue;
            e.var->requires_grad = true;
            trainable_.push_back({e.name, e.var});
        }
    }

    const SegmentationModel& model() const { return *model_; }
    SegmentationModel& model() { return *model_; }
    const FinetuneMode& mode() const { return mode_; }
    int rank() const { return rank_; }
    const std::vector<LoRAAdapter>& adapters() const { return adapters_; }
    const std::vector<TrainableParam>& trainable_parameters() const { return trainable_; }

    std::vector<std::string> target_names() const {
        std::vector<std::string> out;
        for (const auto& a : adapters_) out.push_back(a.target_id);
        return out;
    }

    // Effective-weight substitution for one forward pass. Rebuilt per call:
    // the sum and product nodes cache values, so a stale overlay would not
    // see optimizer updates.
    WeightOverlay overlay() const {
        WeightOverlay o;
        for (const auto& a : adapters_)
            o.replace[a.target_id] =
                ad::add(model_->params().var(a.target_id), ad::matmul(a.A, a.B));
        return o;
    }

    ad::Var forward(const Image& image, const std::vector<Prompt>& prompts) const {
        const WeightOverlay o = overlay();
        return model_->forward(image, prompts, &o);
    }

    // Merged θ + AB for every wrapped weight (plain tensors).
    std::map<std::string, Tensor> merged_weights() const {
        std::map<std::string, Tensor> out;
        for (const auto& a : adapters_)
            out[a.target_id] = merge(a, model_->params().at(a.target_id).var->val);
        return out;
    }

  private:
    std::unique_ptr<SegmentationModel> model_;
    FinetuneMode mode_;
    int rank_ = 0;
    std::vector<LoRAAdapter> adapters_;
    std::vector<TrainableParam> trainable_;
};

// The §3.4 entry point: wrap the given encoder weights with rank-r factor
// pairs; only A and B become trainable.
inline AdaptedModel inject(std::unique_ptr<SegmentationModel> model,
                           std::vector<std::string> targets, int rank, uint64_t seed) {
    FinetuneMode mode;
    mode.lora = true;
    return AdaptedModel(std::move(model), mode, std::move(targets), rank, seed);
}

// ---- checkpoints ----

// One archive: a JSON manifest (kind, backend tag, finetune mode, rank,
// target list, tensor descriptors) followed by raw little-endian f64 data.
// Raw bytes round-trip bit-exactly.
struct Checkpoint {
    std::string kind = "adapter";  // adapter | full-weights
    std::string backend;
    std::string finetune_mode;
    int rank = 0;
    std::vector<std::string> targets;
    int input_size = 0;
    int feature_dim = 0;
    std::vector<std::pair<std::string, Tensor>> tensors;
};

namespace detail {
inline constexpr char kCheckpointMagic[] = "SEGADAPTCKPT1\n";
}

inline void save_checkpoint(const Checkpoint& ckpt, const std::string& path) {
    nlohmann::json manifest;
    manifest["kind"] = ckpt.kind;
    manifest["backend"] = ckpt.backend;
    manifest["finetune_mode"] = ckpt.finetune_mode;
    manifest["rank"] = ckpt.rank;
    manifest["targets"] = ckpt.targets;
    manifest["input_size"] = ckpt.input_size;
    manifest["feature_dim"] = ckpt.feature_dim;
    auto& tensors = manifest["tensors"] = nlohmann::json::array();
    for (const auto& [name, t] : ckpt.tensors)
        tensors.push_back({{"name", name}, {"shape", t.shape}});
    const std::string header = manifest.dump();

    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("save_checkpoint: cannot open " + path);
    out.write(detail::kCheckpointMagic, sizeof(detail::kCheckpointMagic) - 1);
    const uint64_t len = header.size();
    out.write(reinterpret_cast<const char*>(&len), sizeof(len));
    out.write(header.data(), static_cast<std::streamsize>(header.size()));
    for (const auto& [name, t] : ckpt.tensors)
        out.write(reinterpret_cast<const char*>(t.v.data()),
                  static_cast<std::streamsize>(t.v.size() * sizeof(double)));
    if (!out) throw IoError("save_checkpoint: write failed for " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("load_checkpoint: cannot open " + path);
    char magic[sizeof(detail::kCheckpointMagic) - 1];
    in.read(magic, sizeof(magic));
    if (!in || std::memcmp(magic, detail::kCheckpointMagic, sizeof(magic)) != 0)
        throw ParseError("load_checkpoint: " + path + " is not a checkpoint file");
    uint64_t len = 0;
    in.read(reinterpret_cast<char*>(&len), sizeof(len));
    if (!in || len > (1ULL << 30)) throw ParseError("load_checkpoint: corrupt manifest length");
    std::string header(len, '\0');
    in.read(header.data(), static_cast<std::streamsize>(len));
    if (!in) throw ParseError("load_checkpoint: truncated manifest");

    nlohmann::json manifest;
    try {
        manifest = nlohmann::json::parse(header);
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(std::string("load_checkpoint: bad manifest: ") + e.what());
    }
    Checkpoint ckpt;
    try {
        ckpt.kind = manifest.at("kind").get<std::string>();
        ckpt.backend = manifest.at("backend").get<std::string>();
        ckpt.finetune_mode = manifest.at("finetune_mode").get<std::string>();
        ckpt.rank = manifest.at("rank").get<int>();
        ckpt.targets = manifest.at("targets").get<std::vector<std::string>>();
        ckpt.input_size = manifest.at("input_size").get<int>();
        ckpt.feature_dim = manifest.at("feature_dim").get<int>();
        for (const auto& td : manifest.at("tensors")) {
            const auto name = td.at("name").get<std::string>();
            const auto shape = td.at("shape").get<std::vector<int>>();
            Tensor t(shape);
            in.read(reinterpret_cast<char*>(t.v.data()),
                    static_cast<std::streamsize>(t.v.size() * sizeof(double)));
            if (!in) throw ParseError("load_checkpoint: truncated tensor data for " + name);
            ckpt.tensors.emplace_back(name, std::move(t));
        }
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(std::string("load_checkpoint: manifest field error: ") + e.what());
    }
    return ckpt;
}

// Snapshot of everything the optimizer may have touched: adapter factors in
// lora mode plus any trainable base tensors in the other modes. Base
// weights that stayed frozen are never stored.
inline Checkpoint make_adapter_checkpoint(const AdaptedModel& adapted) {
    Checkpoint ckpt;
    ckpt.kind = "adapter";
    ckpt.backend = adapted.model().config().backend;
    ckpt.finetune_mode = adapted.mode().str();
    ckpt.rank = adapted.rank();
    ckpt.targets = adapted.target_names();
    ckpt.input_size = adapted.model().config().input_size;
    ckpt.feature_dim = adapted.model().config().feature_dim;
    for (const auto& t : adapted.trainable_parameters())
        ckpt.tensors.emplace_back(t.name, t.var->val);
    return ckpt;
}

// Every parameter of a model; used to persist a supervised-pretrained toy
// backbone that later runs serve as the frozen source model.
inline Checkpoint full_weights_checkpoint(const SegmentationModel& model) {
    Checkpoint ckpt;
    ckpt.kind = "full-weights";
    ckpt.backend = model.config().backend;
    ckpt.finetune_mode = "";
    ckpt.input_size = model.config().input_size;
    ckpt.feature_dim = model.config().feature_dim;
    for (const auto& e : model.params().entries) ckpt.tensors.emplace_back(e.name, e.var->val);
    return ckpt;
}

// Restores trained values into a freshly constructed AdaptedModel. The
// receiving model must match the checkpoint's mode, rank, targets and
// backend — a mismatch means the caller is loading the wrong run.
inline void apply_checkpoint(AdaptedModel& adapted, const Checkpoint& ckpt) {
    if (ckpt.kind != "adapter")
        throw ConfigError("apply_checkpoint: expected an adapter checkpoint, got " + ckpt.kind);
    std::string diff;
    const auto note = [&](const char* field, const std::string& ckpt_has,
                          const std::string& model_wants) {
        diff += std::string("\n  ") + field + ": checkpoint has " + ckpt_has +
                ", model expects " + model_wants;
    };
    if (ckpt.backend != adapted.model().config().backend)
        note("backend", ckpt.backend, adapted.model().config().backend);
    if (ckpt.finetune_mode != adapted.mode().str())
        note("finetune_mode", ckpt.finetune_mode, adapted.mode().str());
    if (ckpt.rank != adapted.rank())
        note("rank", std::to_string(ckpt.rank), std::to_string(adapted.rank()));
    if (ckpt.targets != adapted.target_names())
        note("targets", std::to_string(ckpt.targets.size()) + " entries",
             std::to_string(adapted.target_names().size()) + " entries (or different names)");
    if (ckpt.feature_dim != adapted.model().config().feature_dim)
        note("feature_dim", std::to_string(ckpt.feature_dim),
             std::to_string(adapted.model().config().feature_dim));
    if (!diff.empty())
        throw ConfigError("apply_checkpoint: checkpoint does not match the adapted model" + diff);
    const auto& trainable = adapted.trainable_parameters();
    if (ckpt.tensors.size() != trainable.size())
        throw ConfigError("apply_checkpoint: tensor count mismatch");
    for (size_t i = 0; i < trainable.size(); ++i) {
        const auto& [name, tensor] = ckpt.tensors[i];
        if (name != trainable[i].name || tensor.shape != trainable[i].var->val.shape)
            throw ConfigError("apply_checkpoint: tensor " + name + " does not line up");
        trainable[i].var->val = tensor;
    }
}

}  // namespace segadapt
