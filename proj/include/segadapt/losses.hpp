#pragma once

// Training objectives for prompt-driven segmentation self-training.
//
// Four terms feed one weighted total:
//   * focal      — hard-pixel-weighted cross-entropy of student probabilities
//                  against binarized teacher pseudo-labels,
//   * dice       — overlap loss against the same pseudo-labels,
//   * anchor     — dice of student AND teacher probabilities against the
//                  frozen anchor branch's binarized output, which tethers the
//                  adapting weights to their initialization,
//   * contrastive — instance features pooled from anchor/teacher feature maps,
//                  pulled together per prompt and pushed apart across prompts.
//
// All losses are built on the autodiff tape so gradients reach shared
// student/teacher weights. Binary targets enter as plain `Mask` values, never
// as tape nodes: pseudo-labels are constants by construction, so the
// detachment the training scheme requires is enforced by the API itself.

#include <cmath>
#include <cstdio>
#include <string>
#include <utility>
#include <vector>

#include "segadapt/autodiff.hpp"
#include "segadapt/core.hpp"
#include "segadapt/tensor.hpp"

namespace segadapt {

// Weights and constants of the combined objective. Defaults reproduce the
// reference training recipe.
struct LossConfig {
    double gamma = 2.0;        // focal exponent
    double eps = 1.0;          // dice smoothing, also guards empty masks
    double lambda_focal = 20.0;
    double lambda_dice_stu = 0.5;  // anchor-loss weight on the student term
    double lambda_dice_tea = 0.5;  // anchor-loss weight on the teacher term
    double tau = 0.3;              // contrastive temperature
    // The printed contrastive form is one global log-ratio over the whole
    // instance set. Setting this switches to the conventional per-instance
    // formulation (mean of per-anchor log-ratios) for comparison runs.
    bool per_instance_contrastive = false;

    void validate() const {
        if (!(gamma >= 0.0)) throw ConfigError("loss config: gamma must be >= 0");
        if (!(eps > 0.0)) throw ConfigError("loss config: eps must be > 0");
        if (!(tau > 0.0)) throw ConfigError("loss config: tau must be > 0");
        if (!(lambda_focal >= 0.0) || !(lambda_dice_stu >= 0.0) || !(lambda_dice_tea >= 0.0))
            throw ConfigError("loss config: loss weights must be >= 0");
    }
};

// Numeric values of one optimization step's terms, for logging and ablation.
struct LossBreakdown {
    double focal = 0.0;
    double dice = 0.0;
    double anchor = 0.0;
    double contrastive = 0.0;
    double total = 0.0;
};

namespace detail {

// Probabilities are clamped away from {0,1} before entering any log; the
// focal/BCE integrand is undefined at the endpoints.
constexpr double kProbFloor = 1e-7;

inline void check_prob_maps(const ad::Var& probs, const std::vector<Mask>& targets,
                            const char* where) {
    if (probs->val.ndim() != 3)
        throw InvalidArgument(std::string(where) + ": probabilities must be [N,H,W], got " +
                              probs->val.shape_str());
    const int n = probs->val.dim(0);
    if (n == 0) throw InvalidArgument(std::string(where) + ": empty prompt batch");
    if (static_cast<size_t>(n) != targets.size())
        throw InvalidArgument(std::string(where) + ": " + std::to_string(n) +
                              " probability maps but " + std::to_string(targets.size()) +
                              " target masks");
    for (const auto& m : targets)
        if (m.h != probs->val.dim(1) || m.w != probs->val.dim(2))
            throw InvalidArgument(std::string(where) + ": target mask is " +
                                  std::to_string(m.h) + "x" + std::to_string(m.w) +
                                  ", maps are " + probs->val.shape_str());
}

// Stacks binary masks into a {0,1}-valued constant of shape [N,H,W].
inline Tensor mask_stack(const std::vector<Mask>& masks) {
    const int n = static_cast<int>(masks.size());
    const int h = masks[0].h, w = masks[0].w;
    Tensor out({n, h, w});
    size_t k = 0;
    for (const auto& m : masks)
        for (uint8_t bit : m.v) out.v[k++] = bit ? 1.0 : 0.0;
    return out;
}

}  // namespace detail

// Focal loss: per-pixel cross-entropy reweighted by (1-p)^gamma on foreground
// and p^gamma on background, so confidently-correct pixels contribute little.
// Summed over prompts, averaged over pixels. gamma=0 recovers plain BCE.
inline ad::Var focal_loss(const ad::Var& probs, const std::vector<Mask>& targets,
                          double gamma = 2.0) {
    detail::check_prob_maps(probs, targets, "focal_loss");
    if (!(gamma >= 0.0)) throw InvalidArgument("focal_loss: gamma must be >= 0");
    const double hw = static_cast<double>(probs->val.dim(1)) * probs->val.dim(2);

    const Tensor target = detail::mask_stack(targets);
    auto fg = ad::constant(target);
    Tensor flipped = target;
    for (auto& x : flipped.v) x = 1.0 - x;
    auto bg = ad::constant(flipped);

    auto p = ad::clamp(probs, detail::kProbFloor, 1.0 - detail::kProbFloor);
    auto q = ad::affine(p, -1.0, 1.0);  // 1 - p
    auto fg_term = ad::mul(fg, ad::mul(ad::pow_const(q, gamma), ad::vlog(p)));
    auto bg_term = ad::mul(bg, ad::mul(ad::pow_const(p, gamma), ad::vlog(q)));
    return ad::affine(ad::sum(ad::add(fg_term, bg_term)), -1.0 / hw, 0.0);
}

// Dice loss: sum over prompts of 1 - (2*intersection + eps)/(mass sum + eps).
// eps both smooths the ratio and makes the empty/empty case exactly zero.
inline ad::Var dice_loss(const ad::Var& probs, const std::vector<Mask>& targets,
                         double eps = 1.0) {
    detail::check_prob_maps(probs, targets, "dice_loss");
    if (!(eps > 0.0)) throw InvalidArgument("dice_loss: eps must be > 0");
    const int n = probs->val.dim(0);

    auto target = ad::constant(detail::mask_stack(targets));
    Tensor target_mass({n});
    for (int j = 0; j < n; ++j)
        target_mass.v[static_cast<size_t>(j)] = static_cast<double>(targets[static_cast<size_t>(j)].area());

    auto inter = ad::sum_maps(ad::mul(probs, target));                      // [N]
    auto numer = ad::affine(inter, 2.0, eps);                               // 2*I + eps
    auto denom = ad::affine(ad::add(ad::sum_maps(probs), ad::constant(target_mass)), 1.0, eps);
    auto per_prompt = ad::affine(ad::div(numer, denom), -1.0, 1.0);         // 1 - ratio
    return ad::sum(per_prompt);
}

// Anchor loss: dice of both adapting branches against the frozen branch's
// binarized prediction. Gradients flow through student and teacher maps; the
// anchor target is a constant mask so the frozen branch stays off the tape.
inline ad::Var anchor_loss(const ad::Var& student_probs, const ad::Var& teacher_probs,
                           const std::vector<Mask>& anchor_bin, double lambda_stu = 0.5,
                           double lambda_tea = 0.5, double eps = 1.0) {
    if (!(lambda_stu >= 0.0) || !(lambda_tea >= 0.0))
        throw InvalidArgument("anchor_loss: weights must be >= 0");
    auto stu = dice_loss(student_probs, anchor_bin, eps);
    auto tea = dice_loss(teacher_probs, anchor_bin, eps);
    return ad::add(ad::affine(stu, lambda_stu, 0.0), ad::affine(tea, lambda_tea, 0.0));
}

// ---------------------------------------------------------------------------
// Instance features for the contrastive term.
// ---------------------------------------------------------------------------

// Reduces a decoder-resolution binary mask to the encoder feature grid by
// block max-pooling: a cell is foreground if any covered pixel is.
inline Mask downsample_mask(const Mask& m, int out_h, int out_w) {
    if (out_h <= 0 || out_w <= 0 || out_h > m.h || out_w > m.w)
        throw InvalidArgument("downsample_mask: output grid must be positive and no larger than the mask");
    Mask out(out_h, out_w);
    for (int i = 0; i < out_h; ++i) {
        const int y0 = i * m.h / out_h, y1 = (i + 1) * m.h / out_h;
        for (int j = 0; j < out_w; ++j) {
            const int x0 = j * m.w / out_w, x1 = (j + 1) * m.w / out_w;
            uint8_t hit = 0;
            for (int y = y0; y < y1 && !hit; ++y)
                for (int x = x0; x < x1; ++x)
                    if (m.at(y, x)) {
                        hit = 1;
                        break;
                    }
            out.at(i, j) = hit;
        }
    }
    return out;
}

// Mask-pooled instance vectors plus the bookkeeping of which prompts survived.
// `indices[k]` is the prompt index `features[k]` came from; prompts whose mask
// became empty on the feature grid are counted in `skipped`, not errored, so
// one vanished instance does not abort a training step.
struct InstancePool {
    std::vector<ad::Var> features;
    std::vector<size_t> indices;
    size_t skipped = 0;
};

// Pools one feature vector per mask: the feature map is L2-normalized at every
// location, then averaged over each mask's support. Masks must already live on
// the feature grid (see downsample_mask).
inline InstancePool pool_instance_features(const ad::Var& features,
                                           const std::vector<Mask>& masks) {
    if (features->val.ndim() != 3)
        throw InvalidArgument("pool_instance_features: feature map must be [D,H,W], got " +
                              features->val.shape_str());
    const int h = features->val.dim(1), w = features->val.dim(2);
    for (const auto& m : masks)
        if (m.h != h || m.w != w)
            throw InvalidArgument("pool_instance_features: mask is " + std::to_string(m.h) + "x" +
                                  std::to_string(m.w) + " but the feature grid is " +
                                  std::to_string(h) + "x" + std::to_string(w));

    auto unit = ad::l2norm_channels(features);
    InstancePool pool;
    for (size_t j = 0; j < masks.size(); ++j) {
        if (masks[j].empty_fg()) {
            ++pool.skipped;
            continue;
        }
        pool.features.push_back(ad::masked_pool(unit, masks[j]));
        pool.indices.push_back(j);
    }
    return pool;
}

// Keeps only the prompts both pools retained, in index order, so the two
// feature lists line up for the contrastive loss.
inline std::pair<std::vector<ad::Var>, std::vector<ad::Var>> align_instance_features(
    const InstancePool& a, const InstancePool& b) {
    std::pair<std::vector<ad::Var>, std::vector<ad::Var>> out;
    size_t ia = 0, ib = 0;
    while (ia < a.indices.size() && ib < b.indices.size()) {
        if (a.indices[ia] == b.indices[ib]) {
            out.first.push_back(a.features[ia]);
            out.second.push_back(b.features[ib]);
            ++ia, ++ib;
        } else if (a.indices[ia] < b.indices[ib]) {
            ++ia;
        } else {
            ++ib;
        }
    }
    return out;
}

// Contrastive loss value plus whether the batch was too small to score.
struct ContrastiveResult {
    ad::Var value;
    bool skipped = false;
};

// Instance-discrimination loss over aligned anchor/teacher feature lists.
// The default form is the literal printed one: a single log of the summed
// matching-pair similarities over the summed mismatched-pair similarities,
//   -log [ sum_j exp(a_j.t_j/tau) / sum_{j != j'} exp(a_j.t_{j'}/tau) ].
// The per-instance variant averages the usual per-anchor log-ratio instead.
// Fewer than two instances means there are no negative pairs; that returns a
// zero constant flagged as skipped rather than an error.
inline ContrastiveResult contrastive_loss(const std::vector<ad::Var>& anchor_feats,
                                          const std::vector<ad::Var>& teacher_feats,
                                          double tau = 0.3, bool per_instance = false) {
    if (!(tau > 0.0)) throw InvalidArgument("contrastive_loss: tau must be > 0");
    if (anchor_feats.size() != teacher_feats.size())
        throw InvalidArgument("contrastive_loss: feature lists are misaligned (" +
                              std::to_string(anchor_feats.size()) + " vs " +
                              std::to_string(teacher_feats.size()) + ")");
    const int n = static_cast<int>(anchor_feats.size());
    if (n < 2) return {ad::constant_scalar(0.0), true};

    auto sims = ad::matmul(ad::stack_rows(anchor_feats),
                           ad::transpose(ad::stack_rows(teacher_feats)));  // [N,N]
    auto heat = ad::vexp(ad::affine(sims, 1.0 / tau, 0.0));

    if (!per_instance) {
        auto pos = ad::diag_sum(heat);
        auto neg = ad::sub(ad::sum(heat), pos);
        return {ad::sub(ad::vlog(neg), ad::vlog(pos)), false};
    }

    // Per-instance: each anchor scores its own row, negatives are the
    // off-diagonal entries of that row.
    Tensor eye({n, n});
    for (int i = 0; i < n; ++i) eye.at(i, i) = 1.0;
    auto rows = ad::sum_maps(ad::reshape(heat, {n, 1, n}));  // [N]
    auto diag = ad::sum_maps(ad::reshape(ad::mul(heat, ad::constant(eye)), {n, 1, n}));
    auto per = ad::sub(ad::vlog(ad::sub(rows, diag)), ad::vlog(diag));
    return {ad::mean(per), false};
}

// ---------------------------------------------------------------------------
// Combined objective.
// ---------------------------------------------------------------------------

// The four scalar terms of one step, each a [1] tape node. Disabled terms
// (ablation switches) are passed as zero constants so the total excludes them
// exactly.
struct LossTerms {
    ad::Var focal;
    ad::Var dice;
    ad::Var anchor;
    ad::Var contrastive;
};

struct TotalLoss {
    ad::Var value;        // lambda_focal*focal + dice + anchor + contrastive
    LossBreakdown parts;  // numeric snapshot for the training log
};

inline TotalLoss total_loss(const LossTerms& terms, const LossConfig& cfg = {}) {
    cfg.validate();
    const std::pair<const char*, const ad::Var*> named[] = {{"focal", &terms.focal},
                                                            {"dice", &terms.dice},
                                                            {"anchor", &terms.anchor},
                                                            {"contrastive", &terms.contrastive}};
    for (const auto& [name, term] : named) {
        if (!*term || (*term)->val.numel() != 1)
            throw InvalidArgument(std::string("total_loss: ") + name + " term must be a scalar");
        if (!std::isfinite((*term)->val.v[0]))
            throw TrainingFault(std::string("total_loss: ") + name + " term is not finite");
    }

    TotalLoss out{ad::add(ad::add(ad::affine(terms.focal, cfg.lambda_focal, 0.0), terms.dice),
                          ad::add(terms.anchor, terms.contrastive)),
                  {}};
    out.parts.focal = terms.focal->val.v[0];
    out.parts.dice = terms.dice->val.v[0];
    out.parts.anchor = terms.anchor->val.v[0];
    out.parts.contrastive = terms.contrastive->val.v[0];
    out.parts.total = out.value->val.v[0];
    if (!std::isfinite(out.parts.total)) throw TrainingFault("total_loss: total is not finite");
    return out;
}

// ---------------------------------------------------------------------------
// Training-log serialization. The formatting is pinned (%.17g round-trips
// doubles) because replay runs are compared byte-for-byte.
// ---------------------------------------------------------------------------

inline std::string loss_csv_header() { return "step,focal,dice,anchor,contrastive,total"; }

inline std::string loss_csv_row(long step, const LossBreakdown& b) {
    char buf[192];
    std::snprintf(buf, sizeof(buf), "%ld,%.17g,%.17g,%.17g,%.17g,%.17g", step, b.focal, b.dice,
                  b.anchor, b.contrastive, b.total);
    return buf;
}

}  // namespace segadapt
