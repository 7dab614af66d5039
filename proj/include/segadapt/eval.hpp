#pragma once

// Evaluation: per-instance IoU under a chosen testing prompt type, aggregated
// to dataset mIoU, plus the cross-prompt grid (every adapted checkpoint scored
// under every prompt type).
//
// Test prompts are generated from ground-truth masks with exactly the same
// protocol the adaptation loop uses for weak labels, and each instance draws
// its randomness from (seed, sample id, instance index) alone — so scores are
// reproducible and independent of the order samples are visited in.

#include <json.hpp>

#include <cmath>
#include <fstream>
#include <functional>
#include <string>
#include <vector>

#include "segadapt/data.hpp"
#include "segadapt/lora.hpp"
#include "segadapt/model.hpp"
#include "segadapt/prompts.hpp"

namespace segadapt {

struct EvalReport {
    std::string dataset;
    std::string train_weak_sup;  // prompt type the weights were adapted with, "" if unknown
    PromptType test_prompt = PromptType::box;
    std::vector<double> per_instance_iou;
    double miou = 0.0;  // arithmetic mean of per_instance_iou, 0 when empty
    size_t instance_count = 0;
    size_t skipped = 0;  // instances whose prompt could not be generated
};

// A predictor maps (sample, instance index, prompt) to a binary mask at the
// sample's native resolution. Models are wrapped below; tests can pass plain
// lambdas (e.g. an oracle returning the ground truth).
using MaskPredictor = std::function<Mask(const Sample&, size_t, const Prompt&)>;

inline EvalReport evaluate_with(const MaskPredictor& predict, const std::vector<Sample>& samples,
                                PromptType type, uint64_t seed, std::string dataset = "",
                                std::string train_weak_sup = "") {
    EvalReport report;
    report.dataset = std::move(dataset);
    report.train_weak_sup = std::move(train_weak_sup);
    report.test_prompt = type;

    for (const auto& s : samples) {
        for (size_t k = 0; k < s.instances.size(); ++k) {
            const Mask& gt = s.instances[k];
            Rng rng(mix_seed(seed, hash_string(s.id), k));
            PromptSet ps = prompts_from_masks({gt}, type, rng);
            if (ps.prompts.empty()) {  // degenerate for this prompt type
                ++report.skipped;
                continue;
            }
            const Mask pred = predict(s, k, ps.prompts[0]);
            report.per_instance_iou.push_back(mask_iou(pred, gt));
        }
    }
    report.instance_count = report.per_instance_iou.size();
    if (report.instance_count > 0) {
        double acc = 0.0;
        for (double x : report.per_instance_iou) acc += x;
        report.miou = acc / static_cast<double>(report.instance_count);
    }
    return report;
}

namespace detail {

// Prompts are generated on the original image but the network sees the
// preprocessed (resized, padded) canvas, so prompt coordinates must move to
// the content region of that canvas. Mirrors preprocess_image's geometry.
struct ContentRegion {
    int h, w;  // resized image extent inside the square canvas
};

inline ContentRegion content_region(int img_h, int img_w, int side) {
    const double scale = static_cast<double>(side) / std::max(img_h, img_w);
    return {std::max(1, static_cast<int>(std::lround(img_h * scale))),
            std::max(1, static_cast<int>(std::lround(img_w * scale)))};
}

inline int scale_coord(int x, int in_extent, int out_extent, int limit) {
    const double sx = static_cast<double>(out_extent) / in_extent;
    return std::min(limit, std::max(0, static_cast<int>(std::lround((x + 0.5) * sx - 0.5))));
}

inline Prompt scale_prompt(const Prompt& p, int img_h, int img_w, int side) {
    const ContentRegion c = content_region(img_h, img_w, side);
    if (std::holds_alternative<BoxPrompt>(p)) {
        const auto& b = std::get<BoxPrompt>(p);
        BoxPrompt out;
        out.x_min = scale_coord(b.x_min, img_w, c.w, c.w - 1);
        out.x_max = std::max(out.x_min, scale_coord(b.x_max, img_w, c.w, c.w - 1));
        out.y_min = scale_coord(b.y_min, img_h, c.h, c.h - 1);
        out.y_max = std::max(out.y_min, scale_coord(b.y_max, img_h, c.h, c.h - 1));
        return out;
    }
    if (std::holds_alternative<PointPrompt>(p)) {
        const auto& pts = std::get<PointPrompt>(p);
        PointPrompt out;
        for (const auto& [x, y] : pts.positives)
            out.positives.emplace_back(scale_coord(x, img_w, c.w, c.w - 1),
                                       scale_coord(y, img_h, c.h, c.h - 1));
        for (const auto& [x, y] : pts.negatives)
            out.negatives.emplace_back(scale_coord(x, img_w, c.w, c.w - 1),
                                       scale_coord(y, img_h, c.h, c.h - 1));
        return out;
    }
    const auto& poly = std::get<CoarseMaskPrompt>(p);
    CoarseMaskPrompt out;
    for (const auto& [x, y] : poly.vertices)
        out.vertices.emplace_back(scale_coord(x, img_w, c.w, c.w - 1),
                                  scale_coord(y, img_h, c.h, c.h - 1));
    out.rasterized = rasterize_polygon(out.vertices, side, side);
    return out;
}

// Crops the content region out of the square logit map and resizes it back to
// the original dimensions (bilinear, half-pixel centers), then thresholds.
inline Mask project_logits(const Tensor& logits, int img_h, int img_w, int side) {
    const ContentRegion c = content_region(img_h, img_w, side);
    Mask out(img_h, img_w);
    for (int y = 0; y < img_h; ++y) {
        double sy = (y + 0.5) * c.h / img_h - 0.5;
        sy = std::max(0.0, std::min(sy, c.h - 1.0));
        const int y0 = static_cast<int>(sy);
        const int y1 = std::min(y0 + 1, c.h - 1);
        const double wy = sy - y0;
        for (int x = 0; x < img_w; ++x) {
            double sx = (x + 0.5) * c.w / img_w - 0.5;
            sx = std::max(0.0, std::min(sx, c.w - 1.0));
            const int x0 = static_cast<int>(sx);
            const int x1 = std::min(x0 + 1, c.w - 1);
            const double wx = sx - x0;
            const double v = (1 - wy) * ((1 - wx) * logits.at(y0, x0) + wx * logits.at(y0, x1)) +
                             wy * ((1 - wx) * logits.at(y1, x0) + wx * logits.at(y1, x1));
            out.at(y, x) = v > 0.0 ? 1 : 0;
        }
    }
    return out;
}

}  // namespace detail

// Wraps a (frozen or plain) model as a predictor. The forward pass runs with
// all parameters off the tape when the model reports no trainable weights, so
// evaluation costs no gradient bookkeeping.
inline MaskPredictor model_predictor(const SegmentationModel& model) {
    return [&model](const Sample& s, size_t, const Prompt& prompt) {
        const Image& img = s.image();
        const int side = model.config().input_size;
        const Image net_in = preprocess_image(img, model.config());
        const Prompt scaled = detail::scale_prompt(prompt, img.h, img.w, side);
        auto logits = model.forward(net_in, {scaled});  // [1, side, side]
        Tensor map({side, side}, std::vector<double>(logits->val.v.begin(), logits->val.v.end()));
        return detail::project_logits(map, img.h, img.w, side);
    };
}

inline EvalReport evaluate(const SegmentationModel& model, const std::vector<Sample>& samples,
                           PromptType type, uint64_t seed, std::string dataset = "",
                           std::string train_weak_sup = "") {
    return evaluate_with(model_predictor(model), samples, type, seed, std::move(dataset),
                         std::move(train_weak_sup));
}

// Adapted models are first collapsed to a frozen clone with the adapters
// merged in, so the evaluation forward passes build no tape.
inline EvalReport evaluate(const AdaptedModel& adapted, const std::vector<Sample>& samples,
                           PromptType type, uint64_t seed, std::string dataset = "",
                           std::string train_weak_sup = "") {
    auto frozen = adapted.model().clone_frozen();
    frozen->load_weights(adapted.merged_weights());
    return evaluate(*frozen, samples, type, seed, std::move(dataset), std::move(train_weak_sup));
}

// ---------------------------------------------------------------------------
// Cross-prompt grid: one row per adapted checkpoint (labeled by the weak
// supervision it was trained with), one column per testing prompt type.
// ---------------------------------------------------------------------------

struct CrossPromptEntry {
    std::string train_weak_sup;
    PromptType test_prompt;
    EvalReport report;
};

inline std::vector<CrossPromptEntry> cross_prompt_matrix(
    const std::vector<std::pair<std::string, MaskPredictor>>& predictors,
    const std::vector<Sample>& samples, const std::vector<PromptType>& prompt_types,
    uint64_t seed, const std::string& dataset = "") {
    std::vector<CrossPromptEntry> grid;
    for (const auto& [label, predict] : predictors)
        for (PromptType type : prompt_types)
            grid.push_back(
                {label, type, evaluate_with(predict, samples, type, seed, dataset, label)});
    return grid;
}

inline std::vector<CrossPromptEntry> cross_prompt_matrix(
    const std::vector<std::pair<std::string, const SegmentationModel*>>& models,
    const std::vector<Sample>& samples, const std::vector<PromptType>& prompt_types,
    uint64_t seed, const std::string& dataset = "") {
    std::vector<std::pair<std::string, MaskPredictor>> predictors;
    for (const auto& [label, model] : models) predictors.emplace_back(label, model_predictor(*model));
    return cross_prompt_matrix(predictors, samples, prompt_types, seed, dataset);
}

// ---------------------------------------------------------------------------
// Report serialization: JSON for machines, a small table for humans.
// ---------------------------------------------------------------------------

inline nlohmann::json report_to_json(const EvalReport& r) {
    return {{"dataset", r.dataset},
            {"train_weak_sup", r.train_weak_sup},
            {"test_prompt", prompt_type_name(r.test_prompt)},
            {"per_instance_iou", r.per_instance_iou},
            {"miou", r.miou},
            {"instance_count", r.instance_count},
            {"skipped", r.skipped}};
}

inline EvalReport report_from_json(const nlohmann::json& j) {
    EvalReport r;
    try {
        r.dataset = j.at("dataset").get<std::string>();
        r.train_weak_sup = j.at("train_weak_sup").get<std::string>();
        r.test_prompt = prompt_type_from_name(j.at("test_prompt").get<std::string>());
        r.per_instance_iou = j.at("per_instance_iou").get<std::vector<double>>();
        r.miou = j.at("miou").get<double>();
        r.instance_count = j.at("instance_count").get<size_t>();
        r.skipped = j.at("skipped").get<size_t>();
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(std::string("evaluation report: ") + e.what());
    }
    if (r.instance_count != r.per_instance_iou.size())
        throw ParseError("evaluation report: instance_count disagrees with the IoU list");
    double acc = 0.0;
    for (double x : r.per_instance_iou) acc += x;
    const double mean = r.per_instance_iou.empty() ? 0.0 : acc / static_cast<double>(r.per_instance_iou.size());
    if (std::abs(mean - r.miou) > 1e-9)
        throw ParseError("evaluation report: stored mIoU is not the mean of the instance IoUs");
    return r;
}

inline void save_report(const EvalReport& r, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write report: " + path);
    out << report_to_json(r).dump(2) << "\n";
}

inline EvalReport load_report(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open report: " + path);
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw ParseError("report " + path + ": " + e.what());
    }
    return report_from_json(j);
}

inline std::string report_to_text(const EvalReport& r) {
    char buf[256];
    std::snprintf(buf, sizeof(buf),
                  "dataset: %s\ntrain weak-sup: %s\ntest prompt: %s\ninstances: %zu (skipped %zu)\nmIoU: %.4f\n",
                  r.dataset.empty() ? "-" : r.dataset.c_str(),
                  r.train_weak_sup.empty() ? "-" : r.train_weak_sup.c_str(),
                  prompt_type_name(r.test_prompt), r.instance_count, r.skipped, r.miou);
    return buf;
}

inline std::string matrix_to_text(const std::vector<CrossPromptEntry>& grid) {
    std::string out = "train-weak-sup  test-prompt  mIoU    instances  skipped\n";
    for (const auto& e : grid) {
        char buf[128];
        std::snprintf(buf, sizeof(buf), "%-15s %-12s %.4f  %-9zu %zu\n",
                      e.train_weak_sup.c_str(), prompt_type_name(e.test_prompt), e.report.miou,
                      e.report.instance_count, e.report.skipped);
        out += buf;
    }
    return out;
}

}  // namespace segadapt
