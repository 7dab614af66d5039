#pragma once

#include <cmath>
#include <memory>
#include <string>
#include <vector>

#include "segadapt/model.hpp"

namespace segadapt {

// Desk-scale promptable segmentation backend. A patch-embedding encoder
// with two attention-free mixing blocks feeds a decoder that gates the
// feature map with the prompt embedding, projects it to a pixel-shuffle
// grid and adds a prompt-shaped spatial prior. Small enough to train on a
// CPU in seconds, while exercising the exact interface of the real model.
class ToyModel final : public SegmentationModel {
  public:
    static constexpr int kPatch = 16;
    static constexpr int kShuffle = 4;  // pixel-shuffle factor; also K = 16 projection channels

    ToyModel(BackendConfig cfg, uint64_t seed, int mlp_ratio = 2)
        : cfg_(std::move(cfg)), seed_(seed), mlp_ratio_(mlp_ratio) {
        if (cfg_.feature_dim < 4) throw ConfigError("toy backend: feature_dim must be >= 4");
        if (mlp_ratio_ < 1) throw ConfigError("toy backend: mlp_ratio must be >= 1");
        if (cfg_.input_size % kPatch != 0)
            throw ConfigError("toy backend: input_size must be a multiple of 16");
        grid_ = cfg_.input_size / kPatch;
        n_patches_ = grid_ * grid_;
        const int d = cfg_.feature_dim;
        const int patch_in = 3 * kPatch * kPatch;
        const int d_mlp = d * mlp_ratio_;
        const int k = kShuffle * kShuffle;

        Rng rng(mix_seed(seed, hash_string("toy-model")));
        const auto randn = [&rng](std::vector<int> shape, double stddev) {
            return Tensor::randn(std::move(shape), rng, stddev);
        };

        params_.add("encoder.patch_embed.w", randn({patch_in, d}, 0.02), "encoder");
        params_.add("encoder.patch_embed.b", Tensor({d}), "encoder");
        params_.add("encoder.pos_embed", randn({n_patches_, d}, 0.02), "encoder");
        // Learnable input offset, zero by default; the evp-style finetune
        // mode trains this instead of touching backbone weights.
        params_.add("encoder.embed_offset", Tensor({n_patches_, d}), "embed");
        for (int b = 1; b <= n_blocks_; ++b) {
            const std::string p = "encoder.block" + std::to_string(b) + ".";
            params_.add(p + "norm1.g", Tensor::full({d}, 1.0), "encoder_layernorm");
            params_.add(p + "norm1.b", Tensor({d}), "encoder_layernorm");
            params_.add(p + "token_mix.w", randn({n_patches_, n_patches_}, 0.1), "encoder");
            params_.add(p + "norm2.g", Tensor::full({d}, 1.0), "encoder_layernorm");
            params_.add(p + "norm2.b", Tensor({d}), "encoder_layernorm");
            params_.add(p + "mlp.fc1.w", randn({d, d_mlp}, 0.05), "encoder");
            params_.add(p + "mlp.fc1.b", Tensor({d_mlp}), "encoder");
            params_.add(p + "mlp.fc2.w", randn({d_mlp, d}, 0.05), "encoder");
            params_.add(p + "mlp.fc2.b", Tensor({d}), "encoder");
        }
        params_.add("encoder.final_norm.g", Tensor::full({d}, 1.0), "encoder_layernorm");
        params_.add("encoder.final_norm.b", Tensor({d}), "encoder_layernorm");

        params_.add("prompt.box.w", randn({4, d}, 0.5), "prompt");
        params_.add("prompt.point.w", randn({2, d}, 0.5), "prompt");
        params_.add("prompt.point.label_pos", randn({1, d}, 0.5), "prompt");
        params_.add("prompt.point.label_neg", randn({1, d}, 0.5), "prompt");
        params_.add("prompt.coarse.w", randn({n_patches_, d}, 0.5), "prompt");

        params_.add("decoder.gate.w", randn({d, d}, 0.5), "decoder");
        params_.add("decoder.gate.b", Tensor({d}), "decoder");
        params_.add("decoder.out.w", randn({d, k}, 0.02), "decoder");
        params_.add("decoder.out.b", Tensor({k}), "decoder");
        // Spatial-prior gain: large at init so an untrained model already
        // answers a box prompt with roughly the box interior.
        params_.add("decoder.prior_scale", Tensor({1}, {4.0}), "decoder");
    }

    const BackendConfig& config() const override { return cfg_; }
    ParamStore& params() override { return params_; }
    const ParamStore& params() const override { return params_; }
    uint64_t seed() const { return seed_; }

    ad::Var encode_image(const Image& image, const WeightOverlay* overlay = nullptr) const override {
        if (image.h != cfg_.input_size || image.w != cfg_.input_size)
            throw ConfigError("toy backend: expected " + std::to_string(cfg_.input_size) +
                              "x" + std::to_string(cfg_.input_size) + " input, got " +
                              std::to_string(image.h) + "x" + std::to_string(image.w));
        if (!image.all_finite()) throw InvalidArgument("encode_image: non-finite image");
        const int d = cfg_.feature_dim;

        // Patchify into [P, 3*16*16] rows, channel-major within a patch.
        Tensor patches({n_patches_, 3 * kPatch * kPatch});
        for (int py = 0; py < grid_; ++py)
            for (int px = 0; px < grid_; ++px) {
                const int row = py * grid_ + px;
                int col = 0;
                for (int c = 0; c < 3; ++c)
                    for (int dy = 0; dy < kPatch; ++dy)
                        for (int dx = 0; dx < kPatch; ++dx)
                            patches.at(row, col++) =
                                image.at(c, py * kPatch + dy, px * kPatch + dx);
            }

        const auto w = [&](const std::string& name) { return weight(name, overlay); };

        auto h = ad::add_rowvec(ad::matmul(ad::constant(std::move(patches)), w("encoder.patch_embed.w")),
                                w("encoder.patch_embed.b"));
        h = ad::add(h, w("encoder.pos_embed"));
        h = ad::add(h, w("encoder.embed_offset"));

        for (int b = 1; b <= n_blocks_; ++b) {
            const std::string p = "encoder.block" + std::to_string(b) + ".";
            auto t = ad::layernorm(h, w(p + "norm1.g"), w(p + "norm1.b"));
            h = ad::add(h, ad::matmul(w(p + "token_mix.w"), t));
            auto t2 = ad::layernorm(h, w(p + "norm2.g"), w(p + "norm2.b"));
            auto z = ad::gelu(ad::add_rowvec(ad::matmul(t2, w(p + "mlp.fc1.w")), w(p + "mlp.fc1.b")));
            h = ad::add(h, ad::add_rowvec(ad::matmul(z, w(p + "mlp.fc2.w")), w(p + "mlp.fc2.b")));
        }
        h = ad::layernorm(h, w("encoder.final_norm.g"), w("encoder.final_norm.b"));
        return ad::reshape(ad::transpose(h), {d, grid_, grid_});
    }

    ad::Var decode_masks(const ad::Var& features, const std::vector<Prompt>& prompts,
                         const WeightOverlay* overlay = nullptr) const override {
        if (prompts.empty()) throw InvalidArgument("decode_masks: empty prompt list");
        if (features->val.ndim() != 3 || features->val.dim(0) != cfg_.feature_dim ||
            features->val.dim(1) != grid_ || features->val.dim(2) != grid_)
            throw InvalidArgument("decode_masks: feature shape " + features->val.shape_str() +
                                  " does not match backend");
        const int d = cfg_.feature_dim;
        const int k = kShuffle * kShuffle;
        const int side = cfg_.input_size;
        const auto w = [&](const std::string& name) { return weight(name, overlay); };

        std::vector<ad::Var> maps;
        for (const auto& prompt : prompts) {
            auto e = encode_prompt(prompt, overlay);  // [1, d]
            auto gate = ad::reshape(
                ad::sigmoid(ad::add_rowvec(ad::matmul(e, w("decoder.gate.w")), w("decoder.gate.b"))),
                {d});
            auto gated = ad::scale_channels(features, gate);
            auto tokens = ad::transpose(ad::reshape(gated, {d, n_patches_}));  // [P, d]
            auto proj = ad::add_rowvec(ad::matmul(tokens, w("decoder.out.w")), w("decoder.out.b"));
            auto grid_map = ad::pixel_shuffle(ad::reshape(ad::transpose(proj), {k, grid_, grid_}),
                                              kShuffle);
            auto up = ad::upsample_bilinear(grid_map, side, side);
            auto prior = ad::constant(spatial_prior(prompt));
            maps.push_back(ad::add(up, ad::scale_by_scalar(prior, w("decoder.prior_scale"))));
        }
        return ad::stack_maps(maps);
    }

    std::unique_ptr<SegmentationModel> clone_frozen() const override {
        auto copy = std::make_unique<ToyModel>(cfg_, seed_, mlp_ratio_);
        for (const auto& e : params_.entries) {
            auto& target = copy->params_.at(e.name);
            target.var->val = e.var->val;  // values copied; requires_grad stays false
        }
        return copy;
    }

  private:
    ad::Var weight(const std::string& name, const WeightOverlay* overlay) const {
        const auto& base = params_.at(name).var;
        return overlay ? overlay->effective(name, base) : base;
    }

    void require_in_bounds(int x, int y) const {
        if (x < 0 || y < 0 || x >= cfg_.input_size || y >= cfg_.input_size)
            throw InvalidArgument("decode_masks: prompt coordinate (" + std::to_string(x) + "," +
                                  std::to_string(y) + ") outside image bounds");
    }

    // Prompt embeddings: a [1, d] row per prompt, built from frozen prompt
    // parameters so every branch conditions on identical inputs.
    ad::Var encode_prompt(const Prompt& prompt, const WeightOverlay* overlay) const {
        const double side = cfg_.input_size;
        const auto w = [&](const std::string& name) { return weight(name, overlay); };

        if (const auto* b = std::get_if<BoxPrompt>(&prompt)) {
            require_in_bounds(b->x_min, b->y_min);
            require_in_bounds(b->x_max, b->y_max);
            if (b->x_min > b->x_max || b->y_min > b->y_max)
                throw InvalidArgument("decode_masks: box corners out of order");
            Tensor coords({1, 4}, {b->x_min / side, b->y_min / side, b->x_max / side,
                                   b->y_max / side});
            return ad::matmul(ad::constant(std::move(coords)), w("prompt.box.w"));
        }
        if (const auto* pts = std::get_if<PointPrompt>(&prompt)) {
            if (pts->positives.empty())
                throw InvalidArgument("decode_masks: point prompt needs at least one positive");
            ad::Var acc;
            const auto accumulate_point = [&](int x, int y, const char* label) {
                require_in_bounds(x, y);
                Tensor coord({1, 2}, {x / side, y / side});
                auto e = ad::add(ad::matmul(ad::constant(std::move(coord)), w("prompt.point.w")),
                                 w(label));
                acc = acc ? ad::add(acc, e) : e;
            };
            for (const auto& [x, y] : pts->positives)
                accumulate_point(x, y, "prompt.point.label_pos");
            for (const auto& [x, y] : pts->negatives)
                accumulate_point(x, y, "prompt.point.label_neg");
            const double n = double(pts->positives.size() + pts->negatives.size());
            return ad::affine(acc, 1.0 / n, 0.0);  // mean over the points
        }
        const auto& coarse = std::get<CoarseMaskPrompt>(prompt);
        if (coarse.rasterized.h != cfg_.input_size || coarse.rasterized.w != cfg_.input_size)
            throw InvalidArgument("decode_masks: coarse mask resolution mismatch");
        // Per-patch coverage fractions -> [1, P] -> embedding.
        Tensor cover({1, n_patches_});
        for (int py = 0; py < grid_; ++py)
            for (int px = 0; px < grid_; ++px) {
                int count = 0;
                for (int dy = 0; dy < kPatch; ++dy)
                    for (int dx = 0; dx < kPatch; ++dx)
                        count += coarse.rasterized.at(py * kPatch + dy, px * kPatch + dx);
                cover.at(0, py * grid_ + px) = count / static_cast<double>(kPatch * kPatch);
            }
        return ad::matmul(ad::constant(std::move(cover)), w("prompt.coarse.w"));
    }

    // Full-resolution prior in [-1, 1]: positive where the prompt asserts
    // foreground. Constant with respect to the tape.
    Tensor spatial_prior(const Prompt& prompt) const {
        const int side = cfg_.input_size;
        Tensor prior({side, side});
        if (const auto* b = std::get_if<BoxPrompt>(&prompt)) {
            for (int y = 0; y < side; ++y)
                for (int x = 0; x < side; ++x)
                    prior.at(y, x) =
                        (x >= b->x_min && x <= b->x_max && y >= b->y_min && y <= b->y_max) ? 1.0
                                                                                          : -1.0;
            return prior;
        }
        if (const auto* pts = std::get_if<PointPrompt>(&prompt)) {
            const double sigma = side / 10.0;
            for (int y = 0; y < side; ++y)
                for (int x = 0; x < side; ++x) {
                    double v = 0.0;
                    for (const auto& [px, py] : pts->positives)
                        v += std::exp(-0.5 * ((x - px) * (x - px) + (y - py) * (y - py)) /
                                      (sigma * sigma));
                    for (const auto& [px, py] : pts->negatives)
                        v -= std::exp(-0.5 * ((x - px) * (x - px) + (y - py) * (y - py)) /
                                      (sigma * sigma));
                    prior.at(y, x) = std::min(1.0, std::max(-1.0, v));
                }
            return prior;
        }
        const auto& coarse = std::get<CoarseMaskPrompt>(prompt);
        for (int y = 0; y < side; ++y)
            for (int x = 0; x < side; ++x)
                prior.at(y, x) = coarse.rasterized.at(y, x) ? 1.0 : -1.0;
        return prior;
    }

    BackendConfig cfg_;
    uint64_t seed_;
    int mlp_ratio_ = 2;
    int grid_ = 4;
    int n_patches_ = 16;
    int n_blocks_ = 2;
    ParamStore params_;
};

inline std::unique_ptr<ToyModel> build_toy_model(uint64_t seed, int feature_dim = 16) {
    BackendConfig cfg;
    cfg.backend = "toy";
    cfg.feature_dim = feature_dim;
    return std::make_unique<ToyModel>(cfg, seed);
}

// Builds the backend named in the config. The toy backend is built in;
// anything else must have been registered (a real pretrained loader is an
// optional capability, not part of this artifact).
inline std::unique_ptr<SegmentationModel> make_model(const BackendConfig& cfg, uint64_t seed) {
    if (cfg.backend == "toy") return std::make_unique<ToyModel>(cfg, seed);
    auto& registry = backend_registry();
    auto it = registry.find(cfg.backend);
    if (it == registry.end())
        throw ConfigError("backend '" + cfg.backend + "' is not registered in this build");
    return it->second(cfg, seed);
}

}  // namespace segadapt
