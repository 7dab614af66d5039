#pragma once

#include <array>
#include <functional>
#include <map>
#include <memory>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "segadapt/autodiff.hpp"
#include "segadapt/prompts.hpp"
#include "segadapt/tensor.hpp"

namespace segadapt {

// ---- backend configuration ----

struct BackendConfig {
    std::string backend = "toy";  // toy | pretrained
    int input_size = 64;
    int feature_dim = 16;
    std::array<double, 3> mean{0.5, 0.5, 0.5};
    std::array<double, 3> stddev{0.25, 0.25, 0.25};
    std::string pretrained_weights_path;
};

inline BackendConfig parse_backend_config(const std::map<std::string, std::string>& kv) {
    BackendConfig cfg;
    const auto num = [&](const std::string& key, double fallback) {
        auto it = kv.find(key);
        if (it == kv.end()) return fallback;
        try {
            size_t pos = 0;
            const double v = std::stod(it->second, &pos);
            if (pos != it->second.size()) throw std::invalid_argument("trailing");
            return v;
        } catch (const std::exception&) {
            throw ConfigError("backend config: bad number for " + key + ": " + it->second);
        }
    };
    if (auto it = kv.find("backend"); it != kv.end()) cfg.backend = it->second;
    if (cfg.backend != "toy" && cfg.backend != "pretrained")
        throw ConfigError("backend config: unknown backend " + cfg.backend);
    cfg.input_size = static_cast<int>(num("input_size", cfg.input_size));
    cfg.feature_dim = static_cast<int>(num("feature_dim", cfg.feature_dim));
    for (int c = 0; c < 3; ++c) {
        cfg.mean[static_cast<size_t>(c)] =
            num("mean" + std::to_string(c), cfg.mean[static_cast<size_t>(c)]);
        cfg.stddev[static_cast<size_t>(c)] =
            num("std" + std::to_string(c), cfg.stddev[static_cast<size_t>(c)]);
        if (cfg.stddev[static_cast<size_t>(c)] <= 0)
            throw ConfigError("backend config: std must be positive");
    }
    if (auto it = kv.find("pretrained_weights_path"); it != kv.end())
        cfg.pretrained_weights_path = it->second;
    if (cfg.input_size < 1 || cfg.feature_dim < 4)
        throw ConfigError("backend config: input_size >= 1 and feature_dim >= 4 required");
    return cfg;
}

// ---- parameter store ----

// Named parameters in construction order. The group labels which
// finetune-mode bucket a tensor belongs to: encoder, encoder_layernorm,
// prompt, decoder, embed.
struct ParamStore {
    struct Entry {
        std::string name;
        std::string group;
        ad::Var var;
    };

    std::vector<Entry> entries;
    std::unordered_map<std::string, size_t> index;

    ad::Var add(const std::string& name, Tensor init, const std::string& group) {
        if (index.count(name)) throw InvalidArgument("ParamStore: duplicate parameter " + name);
        auto var = ad::constant(std::move(init));  // trainability is opted into later
        index[name] = entries.size();
        entries.push_back({name, group, var});
        return var;
    }

    bool contains(const std::string& name) const { return index.count(name) != 0; }

    const Entry& at(const std::string& name) const {
        auto it = index.find(name);
        if (it == index.end()) throw ConfigError("ParamStore: unknown parameter " + name);
        return entries[it->second];
    }

    ad::Var var(const std::string& name) const { return at(name).var; }
};

inline uint64_t params_checksum(const ParamStore& params) {
    uint64_t h = 0xcbf29ce484222325ULL;
    for (const auto& e : params.entries) {
        h = fnv1a_bytes(e.name.data(), e.name.size(), h);
        h = hash_tensor(e.var->val, h);
    }
    return h;
}

// Substitutes effective weights (e.g. base + low-rank delta) for named
// parameters during a forward pass without touching the stored tensors.
struct WeightOverlay {
    std::unordered_map<std::string, ad::Var> replace;

    ad::Var effective(const std::string& name, const ad::Var& base) const {
        auto it = replace.find(name);
        return it == replace.end() ? base : it->second;
    }
};

// ---- model interface ----

// Promptable segmentation model: image encoder, prompt encoder, mask
// decoder. The decoder runs in single-mask mode — exactly one logit map per
// prompt — so teacher/student outputs correspond one-to-one.
class SegmentationModel {
  public:
    virtual ~SegmentationModel() = default;

    virtual const BackendConfig& config() const = 0;
    virtual ParamStore& params() = 0;
    virtual const ParamStore& params() const = 0;

    // [D, H', W'] features; overlay == nullptr means base weights.
    virtual ad::Var encode_image(const Image& image,
                                 const WeightOverlay* overlay = nullptr) const = 0;

    // [N_p, H, W] logits, one map per prompt, in prompt order.
    virtual ad::Var decode_masks(const ad::Var& features, const std::vector<Prompt>& prompts,
                                 const WeightOverlay* overlay = nullptr) const = 0;

    // Deep copy with every parameter frozen; used for the anchor branch.
    virtual std::unique_ptr<SegmentationModel> clone_frozen() const = 0;

    ad::Var forward(const Image& image, const std::vector<Prompt>& prompts,
                    const WeightOverlay* overlay = nullptr) const {
        return decode_masks(encode_image(image, overlay), prompts, overlay);
    }

    // Overwrites named parameter values in place (checkpoint restore). Every
    // name must exist with a matching shape.
    void load_weights(const std::map<std::string, Tensor>& weights) {
        for (const auto& [name, tensor] : weights) {
            const auto& entry = params().at(name);
            if (entry.var->val.shape != tensor.shape)
                throw ConfigError("load_weights: shape mismatch for " + name + ": model " +
                                  entry.var->val.shape_str() + " vs checkpoint " +
                                  tensor.shape_str());
            entry.var->val = tensor;
        }
    }
};

// ---- output post-processing ----

inline Tensor sigmoid_normalize(const Tensor& logits) {
    if (!logits.all_finite()) throw InvalidArgument("sigmoid_normalize: non-finite logits");
    Tensor out = logits;
    for (auto& x : out.v) x = 1.0 / (1.0 + std::exp(-x));
    return out;
}

// Strict '>' so a probability of exactly 0.5 (logit 0) maps to background.
inline Mask binarize_map(const Tensor& prob, double threshold = 0.5) {
    if (threshold <= 0.0 || threshold >= 1.0)
        throw InvalidArgument("binarize: threshold must lie strictly inside (0,1)");
    if (prob.ndim() != 2) throw InvalidArgument("binarize: expected [H,W]");
    Mask m(prob.dim(0), prob.dim(1));
    for (size_t i = 0; i < prob.v.size(); ++i) m.v[i] = prob.v[i] > threshold ? 1 : 0;
    return m;
}

inline std::vector<Mask> binarize(const Tensor& prob, double threshold = 0.5) {
    if (threshold <= 0.0 || threshold >= 1.0)
        throw InvalidArgument("binarize: threshold must lie strictly inside (0,1)");
    if (prob.ndim() != 3) throw InvalidArgument("binarize: expected [N,H,W]");
    const int n = prob.dim(0), h = prob.dim(1), w = prob.dim(2);
    const size_t hw = static_cast<size_t>(h) * w;
    std::vector<Mask> out;
    for (int j = 0; j < n; ++j) {
        Mask m(h, w);
        for (size_t i = 0; i < hw; ++i) m.v[i] = prob.v[j * hw + i] > threshold ? 1 : 0;
        out.push_back(std::move(m));
    }
    return out;
}

// ---- preprocessing ----

// Resize longest side to the backend's input size (bilinear), zero-pad to
// square on the bottom/right, then per-channel normalize.
inline Image preprocess_image(const Image& in, const BackendConfig& cfg) {
    if (in.h < 1 || in.w < 1 || !in.all_finite())
        throw InvalidArgument("preprocess_image: invalid input image");
    const int side = cfg.input_size;
    const double scale = static_cast<double>(side) / std::max(in.h, in.w);
    const int out_h = std::max(1, static_cast<int>(std::lround(in.h * scale)));
    const int out_w = std::max(1, static_cast<int>(std::lround(in.w * scale)));

    Image out(side, side);
    for (int c = 0; c < 3; ++c) {
        for (int y = 0; y < out_h; ++y) {
            double sy = (y + 0.5) * in.h / out_h - 0.5;
            sy = std::max(0.0, std::min(sy, in.h - 1.0));
            const int y0 = static_cast<int>(sy);
            const int y1 = std::min(y0 + 1, in.h - 1);
            const double wy = sy - y0;
            for (int x = 0; x < out_w; ++x) {
                double sx = (x + 0.5) * in.w / out_w - 0.5;
                sx = std::max(0.0, std::min(sx, in.w - 1.0));
                const int x0 = static_cast<int>(sx);
                const int x1 = std::min(x0 + 1, in.w - 1);
                const double wx = sx - x0;
                out.at(c, y, x) = (1 - wy) * ((1 - wx) * in.at(c, y0, x0) + wx * in.at(c, y0, x1)) +
                                  wy * ((1 - wx) * in.at(c, y1, x0) + wx * in.at(c, y1, x1));
            }
        }
        const double m = cfg.mean[static_cast<size_t>(c)], s = cfg.stddev[static_cast<size_t>(c)];
        for (int y = 0; y < side; ++y)
            for (int x = 0; x < side; ++x) out.at(c, y, x) = (out.at(c, y, x) - m) / s;
    }
    return out;
}

// ---- backend registry ----

// Optional backends (e.g. a real pretrained loader) hook in here; the toy
// backend is built in via make_model in the toy header.
using BackendFactory =
    std::function<std::unique_ptr<SegmentationModel>(const BackendConfig&, uint64_t seed)>;

inline std::unordered_map<std::string, BackendFactory>& backend_registry() {
    static std::unordered_map<std::string, BackendFactory> registry;
    return registry;
}

inline void register_backend(const std::string& name, BackendFactory factory) {
    backend_registry()[name] = std::move(factory);
}

}  // namespace segadapt
