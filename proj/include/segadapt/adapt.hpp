#pragma once
// Source-free adaptation loop. Three branches share one forward interface:
// a frozen anchor (the unadapted source model), and a teacher/student pair
// that by default share every weight. Anchor and teacher see a weakly
// augmented view, the student a strongly augmented one; all three consume
// the identical prompt set per image. The teacher's binarized output
// supervises the student (focal + dice), the anchor's binarized output
// regularizes both tuned branches (anchor dice), and instance embeddings
// pooled from anchor and teacher features form the contrastive term.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <map>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "augment.hpp"
#include "core.hpp"
#include "eval.hpp"
#include "losses.hpp"

namespace segadapt {

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

// Weak supervision driving the adaptation: prompts derived from (weak) labels
// of the target images, or fully automated grid prompting with no labels.
enum class WeakSupMode { box, points, coarse_mask, automated };

inline const char* weak_sup_name(WeakSupMode m) {
    switch (m) {
        case WeakSupMode::box: return "box";
        case WeakSupMode::points: return "points";
        case WeakSupMode::coarse_mask: return "coarse_mask";
        case WeakSupMode::automated: return "automated";
    }
    return "?";
}

inline WeakSupMode weak_sup_from_name(const std::string& s) {
    if (s == "automated") return WeakSupMode::automated;
    if (s == "box") return WeakSupMode::box;
    if (s == "point" || s == "points") return WeakSupMode::points;
    if (s == "coarse_mask" || s == "coarse" || s == "poly") return WeakSupMode::coarse_mask;
    throw ConfigError("unknown weak supervision mode: " + s);
}

inline PromptType to_prompt_type(WeakSupMode m) {
    switch (m) {
        case WeakSupMode::points: return PromptType::points;
        case WeakSupMode::coarse_mask: return PromptType::coarse_mask;
        default: return PromptType::box;  // automated prompts regenerate as boxes
    }
}

struct TrainConfig {
    int batch_size = 4;
    double learning_rate = 1e-4;
    double weight_decay = 1e-4;
    int epochs = 10;
    int rank = 4;  // LoRA rank, ignored by modes without adapters
    WeakSupMode weak_sup = WeakSupMode::box;
    FinetuneMode finetune_mode = FinetuneMode::parse("lora");
    std::string teacher_mode = "shared";  // shared | ema
    double ema_momentum = 0.999;          // used only by the ema teacher
    bool use_selftrain = true;            // teacher-supervised focal + dice
    bool use_anchor = true;
    bool use_contrastive = true;
    size_t labeled_subset_size = 0;  // 0 -> adapt on every sample
    uint64_t seed = 0;
    LossConfig loss;

    void validate() const {
        if (batch_size < 1) throw ConfigError("TrainConfig: batch_size must be >= 1");
        if (!(learning_rate > 0.0) || !std::isfinite(learning_rate))
            throw ConfigError("TrainConfig: learning_rate must be positive");
        if (weight_decay < 0.0 || !std::isfinite(weight_decay))
            throw ConfigError("TrainConfig: weight_decay must be >= 0");
        if (epochs < 1) throw ConfigError("TrainConfig: epochs must be >= 1");
        if (finetune_mode.lora && rank < 1) throw ConfigError("TrainConfig: rank must be >= 1");
        if (teacher_mode != "shared" && teacher_mode != "ema")
            throw ConfigError("TrainConfig: teacher_mode must be 'shared' or 'ema'");
        if (teacher_mode == "ema" && !(ema_momentum >= 0.0 && ema_momentum < 1.0))
            throw ConfigError("TrainConfig: ema_momentum must lie in [0, 1)");
        loss.validate();
    }
};

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

// Adaptive-moment optimizer with coupled weight decay: the decay joins the
// gradient before the moment estimates, matching the common reference
// behaviour wired to loss-gradient descent.
class AdamOptimizer {
  public:
    explicit AdamOptimizer(std::vector<AdaptedModel::TrainableParam> params, double lr = 1e-4,
                           double weight_decay = 0.0, double beta1 = 0.9, double beta2 = 0.999,
                           double eps = 1e-8)
        : params_(std::move(params)), lr_(lr), wd_(weight_decay), b1_(beta1), b2_(beta2),
          eps_(eps) {
        if (!(lr_ > 0.0) || !std::isfinite(lr_))
            throw InvalidArgument("AdamOptimizer: learning rate must be positive");
        if (wd_ < 0.0) throw InvalidArgument("AdamOptimizer: weight decay must be >= 0");
        for (const auto& p : params_) {
            if (!p.var) throw InvalidArgument("AdamOptimizer: null parameter " + p.name);
            m_.emplace_back(p.var->val.shape);
            v_.emplace_back(p.var->val.shape);
        }
    }

    void zero_grad() {
        for (auto& p : params_) p.var->zero_grad();
    }

    // One update from the accumulated gradients. A parameter whose gradient
    // buffer was never touched this step (no path to the loss) contributes a
    // zero loss-gradient but still decays.
    void step() {
        ++t_;
        const double c1 = 1.0 - std::pow(b1_, double(t_));
        const double c2 = 1.0 - std::pow(b2_, double(t_));
        for (size_t i = 0; i < params_.size(); ++i) {
            auto& node = *params_[i].var;
            const bool has_grad = !node.grad.v.empty();
            for (size_t k = 0; k < node.val.v.size(); ++k) {
                const double g = (has_grad ? node.grad.v[k] : 0.0) + wd_ * node.val.v[k];
                m_[i].v[k] = b1_ * m_[i].v[k] + (1.0 - b1_) * g;
                v_[i].v[k] = b2_ * v_[i].v[k] + (1.0 - b2_) * g * g;
                node.val.v[k] -= lr_ * (m_[i].v[k] / c1) / (std::sqrt(v_[i].v[k] / c2) + eps_);
            }
        }
    }

    long steps_taken() const { return t_; }
    const std::vector<AdaptedModel::TrainableParam>& params() const { return params_; }

  private:
    std::vector<AdaptedModel::TrainableParam> params_;
    double lr_, wd_, b1_, b2_, eps_;
    long t_ = 0;
    std::vector<Tensor> m_, v_;
};

// ---------------------------------------------------------------------------
// Branches
// ---------------------------------------------------------------------------

struct BranchSet {
    std::unique_ptr<SegmentationModel> anchor;  // frozen at adaptation start
    std::unique_ptr<AdaptedModel> shared;       // teacher and student weights
    // EMA teacher (optional): a running average of every trainable tensor,
    // plus a frozen forward copy the averaged weights are loaded into.
    bool ema_enabled = false;
    std::map<std::string, Tensor> ema;
    std::unique_ptr<SegmentationModel> ema_model;
};

inline BranchSet build_branches(std::unique_ptr<SegmentationModel> base, const TrainConfig& cfg) {
    cfg.validate();
    if (!base) throw InvalidArgument("build_branches: null base model");
    BranchSet out;
    out.anchor = base->clone_frozen();
    out.shared = std::make_unique<AdaptedModel>(std::move(base), cfg.finetune_mode,
                                                std::vector<std::string>{}, cfg.rank,
                                                mix_seed(cfg.seed, hash_string("adapter-init")));
    if (cfg.teacher_mode == "ema") {
        out.ema_enabled = true;
        out.ema_model = out.shared->model().clone_frozen();
        for (const auto& t : out.shared->trainable_parameters()) out.ema[t.name] = t.var->val;
    }
    return out;
}

// ema <- momentum * ema + (1 - momentum) * shared, elementwise per tensor.
inline void ema_update(const std::vector<AdaptedModel::TrainableParam>& shared_weights,
                       std::map<std::string, Tensor>& ema_weights, double momentum) {
    if (!(momentum >= 0.0 && momentum < 1.0))
        throw InvalidArgument("ema_update: momentum must lie in [0, 1)");
    for (const auto& t : shared_weights) {
        auto it = ema_weights.find(t.name);
        if (it == ema_weights.end())
            throw InvalidArgument("ema_update: no EMA slot for " + t.name);
        Tensor& e = it->second;
        if (!e.same_shape(t.var->val))
            throw InvalidArgument("ema_update: shape drift on " + t.name);
        for (size_t i = 0; i < e.v.size(); ++i)
            e.v[i] = momentum * e.v[i] + (1.0 - momentum) * t.var->val.v[i];
    }
}

// Concrete weights for the EMA teacher's forward copy: averaged base weights
// replace their store entries directly; averaged adapter factors are merged
// onto the (frozen) base values of their targets.
inline std::map<std::string, Tensor> ema_teacher_weights(const BranchSet& branches) {
    std::map<std::string, Tensor> out;
    const auto& store = branches.shared->model().params();
    for (const auto& t : branches.shared->trainable_parameters())
        if (store.contains(t.name)) out[t.name] = branches.ema.at(t.name);
    for (const auto& a : branches.shared->adapters()) {
        LoRAAdapter averaged;
        averaged.target_id = a.target_id;
        averaged.rank = a.rank;
        averaged.A = ad::leaf(branches.ema.at(a.target_id + ".lora.A"));
        averaged.B = ad::leaf(branches.ema.at(a.target_id + ".lora.B"));
        out[a.target_id] = merge(averaged, store.at(a.target_id).var->val);
    }
    return out;
}

// ---------------------------------------------------------------------------
// One optimization step
// ---------------------------------------------------------------------------

struct StepRecord {
    long step = 0;  // global 1-based index, assigned by the loop
    LossBreakdown losses;
    size_t prompt_count = 0;       // prompts that reached the branches
    size_t skipped_instances = 0;  // degenerate instances dropped while prompting
    size_t skipped_samples = 0;    // batch members left with no usable prompt
    double wall_seconds = 0.0;
};

namespace detail {

// Binarizes a stack of logit maps [N,H,W] into one mask per map.
inline std::vector<Mask> binarize_stack(const Tensor& logits, double threshold = 0.0) {
    if (logits.ndim() != 3) throw InvalidArgument("binarize_stack: expected [N,H,W]");
    const int n = logits.dim(0), h = logits.dim(1), w = logits.dim(2);
    std::vector<Mask> out;
    out.reserve(size_t(n));
    for (int j = 0; j < n; ++j) {
        Mask m(h, w);
        const size_t off = size_t(j) * h * w;
        for (size_t i = 0; i < m.v.size(); ++i) m.v[i] = logits.v[off + i] > threshold ? 1 : 0;
        out.push_back(std::move(m));
    }
    return out;
}

// Nearest-neighbor projection of a full-resolution mask into the content
// region of the network canvas (the inverse direction of project_logits).
inline Mask mask_to_canvas(const Mask& m, int side) {
    const ContentRegion c = content_region(m.h, m.w, side);
    Mask out(side, side);
    for (int y = 0; y < c.h; ++y) {
        const int sy = std::min(m.h - 1, std::max(0, (int)std::lround((y + 0.5) * m.h / c.h - 0.5)));
        for (int x = 0; x < c.w; ++x) {
            const int sx =
                std::min(m.w - 1, std::max(0, (int)std::lround((x + 0.5) * m.w / c.w - 0.5)));
            out.at(y, x) = m.at(sy, sx);
        }
    }
    return out;
}

// Weak supervision for one image, in canvas coordinates. Label-derived
// prompts are built from the instance masks and rescaled; automated mode
// probes the frozen anchor over a point lattice instead.
inline PromptSet weak_prompts(const Sample& s, const Image& weak_in, const BranchSet& branches,
                              const TrainConfig& cfg, Rng& rng) {
    const int side = branches.shared->model().config().input_size;
    if (cfg.weak_sup == WeakSupMode::automated) {
        // One encode for the whole lattice; only the decode varies per probe.
        auto feat = branches.anchor->encode_image(weak_in);
        auto probe = [&](int x, int y) {
            PointPrompt p;
            p.positives = {{x, y}};
            auto out = branches.anchor->decode_masks(feat, {Prompt(p)});
            return Tensor({side, side},
                          std::vector<double>(out->val.v.begin(), out->val.v.end()));
        };
        return automated_prompts(side, side, probe, rng).prompts;
    }
    const Image& original = s.image();
    PromptSet raw = prompts_from_masks(s.instances, to_prompt_type(cfg.weak_sup), rng);
    PromptSet out;
    out.type = raw.type;
    out.source = raw.source;
    out.skipped = raw.skipped;
    for (const auto& p : raw.prompts)
        out.prompts.push_back(scale_prompt(p, original.h, original.w, side));
    return out;
}

}  // namespace detail

// Runs the three branches over one batch and, unless disabled, applies one
// optimizer update. Augmentations are photometric only, so the shared prompt
// set stays geometrically valid for every branch. Gradients accumulate over
// the batch members before the single update (equivalent to a larger batch).
// Passing update_weights=false evaluates the objective without touching any
// state except `rng` — useful for re-measuring a batch after a step.
inline StepRecord adaptation_step(const std::vector<const Sample*>& batch, BranchSet& branches,
                                  AdamOptimizer& opt, const TrainConfig& cfg, Rng& rng,
                                  bool update_weights = true) {
    const auto t0 = std::chrono::steady_clock::now();
    if (batch.empty()) throw InvalidArgument("adaptation_step: empty batch");
    cfg.validate();

    StepRecord rec;
    const auto& model_cfg = branches.shared->model().config();
    auto& net = branches.shared->model();

    // The teacher copy must see this step's pre-update averages.
    if (branches.ema_enabled) branches.ema_model->load_weights(ema_teacher_weights(branches));

    // One overlay per step: teacher and student forwards share the adapter
    // sum nodes, and gradients from both paths accumulate through them.
    const WeightOverlay overlay = branches.shared->overlay();

    const auto add_term = [](ad::Var& acc, ad::Var term) {
        acc = acc ? ad::add(acc, std::move(term)) : std::move(term);
    };
    ad::Var focal_sum, dice_sum, anchor_sum, contrastive_sum;
    int used = 0;

    for (const Sample* sp : batch) {
        const Image& original = sp->image();
        const Image weak_in = preprocess_image(weak_augment(original, rng), model_cfg);
        const Image strong_in = preprocess_image(strong_augment(original, rng), model_cfg);

        const PromptSet prompts = detail::weak_prompts(*sp, weak_in, branches, cfg, rng);
        rec.skipped_instances += prompts.skipped;
        if (prompts.prompts.empty()) {
            ++rec.skipped_samples;
            continue;
        }
        rec.prompt_count += prompts.prompts.size();

        // Anchor branch: every weight off the tape, outputs constant-fold.
        auto anchor_feat = branches.anchor->encode_image(weak_in);
        auto anchor_logits = branches.anchor->decode_masks(anchor_feat, prompts.prompts);
        const std::vector<Mask> anchor_bin = detail::binarize_stack(anchor_logits->val);

        // Teacher branch: shared weights (on the tape) or the frozen EMA copy.
        ad::Var teacher_feat, teacher_logits;
        if (branches.ema_enabled) {
            teacher_feat = branches.ema_model->encode_image(weak_in);
            teacher_logits = branches.ema_model->decode_masks(teacher_feat, prompts.prompts);
        } else {
            teacher_feat = net.encode_image(weak_in, &overlay);
            teacher_logits = net.decode_masks(teacher_feat, prompts.prompts, &overlay);
        }
        // Pseudo-labels: binarized teacher output, detached by construction.
        const std::vector<Mask> teacher_bin = detail::binarize_stack(teacher_logits->val);

        // Student branch: strong view, same prompts, same shared weights.
        auto student_feat = net.encode_image(strong_in, &overlay);
        auto student_logits = net.decode_masks(student_feat, prompts.prompts, &overlay);
        auto student_probs = ad::sigmoid(student_logits);

        if (cfg.use_selftrain) {
            add_term(focal_sum, focal_loss(student_probs, teacher_bin, cfg.loss.gamma));
            add_term(dice_sum, dice_loss(student_probs, teacher_bin, cfg.loss.eps));
        }
        if (cfg.use_anchor)
            add_term(anchor_sum,
                     anchor_loss(student_probs, ad::sigmoid(teacher_logits), anchor_bin,
                                 cfg.loss.lambda_dice_stu, cfg.loss.lambda_dice_tea,
                                 cfg.loss.eps));
        if (cfg.use_contrastive) {
            const int gh = teacher_feat->val.dim(1), gw = teacher_feat->val.dim(2);
            std::vector<Mask> anchor_small, teacher_small;
            for (const auto& m : anchor_bin) anchor_small.push_back(downsample_mask(m, gh, gw));
            for (const auto& m : teacher_bin) teacher_small.push_back(downsample_mask(m, gh, gw));
            auto aligned = align_instance_features(
                pool_instance_features(anchor_feat, anchor_small),
                pool_instance_features(teacher_feat, teacher_small));
            auto res = contrastive_loss(aligned.first, aligned.second, cfg.loss.tau,
                                        cfg.loss.per_instance_contrastive);
            if (!res.skipped) add_term(contrastive_sum, res.value);
        }
        ++used;
    }

    const auto finish = [&] {
        rec.wall_seconds =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    };
    if (used == 0) {  // nothing promptable in the whole batch: no update
        finish();
        return rec;
    }

    const double inv = 1.0 / used;
    const auto batch_mean = [&](ad::Var sum) {
        return sum ? ad::affine(std::move(sum), inv, 0.0) : ad::constant_scalar(0.0);
    };
    LossTerms terms;
    terms.focal = batch_mean(std::move(focal_sum));
    terms.dice = batch_mean(std::move(dice_sum));
    terms.anchor = batch_mean(std::move(anchor_sum));
    terms.contrastive = batch_mean(std::move(contrastive_sum));
    const TotalLoss total = total_loss(terms, cfg.loss);
    rec.losses = total.parts;

    const bool any_objective = cfg.use_selftrain || cfg.use_anchor || cfg.use_contrastive;
    if (update_weights && any_objective) {
        opt.zero_grad();
        ad::backward(total.value);
        opt.step();
        if (branches.ema_enabled)
            ema_update(branches.shared->trainable_parameters(), branches.ema, cfg.ema_momentum);
    }
    finish();
    return rec;
}

// ---------------------------------------------------------------------------
// Full adaptation run
// ---------------------------------------------------------------------------

struct AdaptationResult {
    Checkpoint last;      // weights after the final step
    Checkpoint best;      // highest held-out mIoU (== last when never evaluated)
    int best_epoch = -1;  // 1-based; -1 when no held-out evaluation ran
    double best_miou = -1.0;
    double last_miou = -1.0;
    std::vector<StepRecord> log;
    std::string csv;  // pinned-format loss trajectory, one row per step
    size_t skipped_instances = 0;
    size_t skipped_samples = 0;
};

// Adapts `base` on `adapt_set` for cfg.epochs. Every random choice descends
// from cfg.seed, so a rerun with the same inputs reproduces the loss column
// byte for byte. When `heldout` is non-empty the shared weights are scored on
// it after each epoch and the best epoch's checkpoint is kept alongside the
// final one.
inline AdaptationResult run_adaptation(std::unique_ptr<SegmentationModel> base,
                                       const std::vector<Sample>& adapt_set,
                                       const std::vector<Sample>& heldout,
                                       const TrainConfig& cfg) {
    cfg.validate();
    if (adapt_set.empty()) throw InvalidArgument("run_adaptation: empty adaptation set");

    BranchSet branches = build_branches(std::move(base), cfg);
    AdamOptimizer opt(branches.shared->trainable_parameters(), cfg.learning_rate,
                      cfg.weight_decay);

    // Working pool, optionally a seeded distinct subset of the adapt split.
    std::vector<const Sample*> pool;
    pool.reserve(adapt_set.size());
    for (const auto& s : adapt_set) pool.push_back(&s);
    if (cfg.labeled_subset_size > 0 && cfg.labeled_subset_size < pool.size()) {
        Rng pick(mix_seed(cfg.seed, hash_string("labeled-subset")));
        for (size_t i = pool.size(); i > 1; --i) std::swap(pool[i - 1], pool[pick.below(i)]);
        pool.resize(cfg.labeled_subset_size);
        std::sort(pool.begin(), pool.end(),
                  [](const Sample* a, const Sample* b) { return a->id < b->id; });
    }

    AdaptationResult out;
    out.csv = loss_csv_header() + "\n";
    long step = 0;
    const PromptType eval_type = to_prompt_type(cfg.weak_sup);
    const uint64_t eval_seed = mix_seed(cfg.seed, hash_string("heldout-eval"));

    for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
        Rng erng(mix_seed(cfg.seed, hash_string("adapt-epoch"), uint64_t(epoch)));
        std::vector<const Sample*> order = pool;
        for (size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[erng.below(i)]);

        for (size_t at = 0; at < order.size(); at += size_t(cfg.batch_size)) {
            const size_t end = std::min(order.size(), at + size_t(cfg.batch_size));
            std::vector<const Sample*> batch(order.begin() + at, order.begin() + end);
            StepRecord rec;
            try {
                rec = adaptation_step(batch, branches, opt, cfg, erng);
            } catch (const TrainingFault& fault) {
                throw TrainingFault("step " + std::to_string(step + 1) + " (epoch " +
                                    std::to_string(epoch) + "): " + fault.what());
            }
            rec.step = ++step;
            out.csv += loss_csv_row(rec.step, rec.losses) + "\n";
            out.skipped_instances += rec.skipped_instances;
            out.skipped_samples += rec.skipped_samples;
            out.log.push_back(rec);
        }

        if (!heldout.empty()) {
            out.last_miou = evaluate(*branches.shared, heldout, eval_type, eval_seed).miou;
            if (out.last_miou > out.best_miou) {
                out.best_miou = out.last_miou;
                out.best_epoch = epoch;
                out.best = make_adapter_checkpoint(*branches.shared);
            }
        }
    }

    out.last = make_adapter_checkpoint(*branches.shared);
    if (out.best_epoch < 0) out.best = out.last;
    return out;
}

// ---------------------------------------------------------------------------
// Supervised pre-training (source-model construction)
// ---------------------------------------------------------------------------

struct SupervisedConfig {
    int epochs = 5;
    int batch_size = 4;
    double learning_rate = 1e-3;
    double weight_decay = 0.0;
    PromptType prompt_type = PromptType::box;
    uint64_t seed = 0;
    LossConfig loss;  // gamma / eps / lambda_focal reused

    void validate() const {
        if (epochs < 1) throw ConfigError("SupervisedConfig: epochs must be >= 1");
        if (batch_size < 1) throw ConfigError("SupervisedConfig: batch_size must be >= 1");
        if (!(learning_rate > 0.0) || !std::isfinite(learning_rate))
            throw ConfigError("SupervisedConfig: learning_rate must be positive");
        if (weight_decay < 0.0) throw ConfigError("SupervisedConfig: weight_decay must be >= 0");
        loss.validate();
    }
};

// Trains every parameter of `model` against the true masks (weighted focal +
// dice, prompts derived from ground truth). This builds the "source" model
// the adaptation loop later treats as its anchor; the requires_grad flags are
// restored afterwards, leaving the model frozen again.
inline std::vector<StepRecord> supervised_finetune(SegmentationModel& model,
                                                   const std::vector<Sample>& train,
                                                   const SupervisedConfig& cfg = {}) {
    cfg.validate();
    if (train.empty()) throw InvalidArgument("supervised_finetune: empty training set");

    auto& store = model.params();
    std::vector<bool> saved_flags;
    std::vector<AdaptedModel::TrainableParam> trainables;
    saved_flags.reserve(store.entries.size());
    for (auto& e : store.entries) {
        saved_flags.push_back(e.var->requires_grad);
        e.var->requires_grad = true;
        trainables.push_back({e.name, e.var});
    }

    AdamOptimizer opt(trainables, cfg.learning_rate, cfg.weight_decay);
    const auto& model_cfg = model.config();
    const int side = model_cfg.input_size;
    std::vector<StepRecord> log;
    long step = 0;

    for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
        Rng rng(mix_seed(cfg.seed, hash_string("supervised-epoch"), uint64_t(epoch)));
        std::vector<const Sample*> order;
        order.reserve(train.size());
        for (const auto& s : train) order.push_back(&s);
        for (size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);

        for (size_t at = 0; at < order.size(); at += size_t(cfg.batch_size)) {
            const size_t end = std::min(order.size(), at + size_t(cfg.batch_size));
            const auto t0 = std::chrono::steady_clock::now();
            StepRecord rec;
            ad::Var focal_sum, dice_sum;
            int used = 0;

            for (size_t bi = at; bi < end; ++bi) {
                const Sample& s = *order[bi];
                const Image& original = s.image();
                const Image net_in = preprocess_image(original, model_cfg);

                // Prompts and targets are built per instance so a degenerate
                // instance drops out of both sides together.
                std::vector<Prompt> prompts;
                std::vector<Mask> targets;
                for (const auto& instance : s.instances) {
                    PromptSet one = prompts_from_masks({instance}, cfg.prompt_type, rng);
                    if (one.prompts.empty()) {
                        ++rec.skipped_instances;
                        continue;
                    }
                    prompts.push_back(
                        detail::scale_prompt(one.prompts[0], original.h, original.w, side));
                    targets.push_back(detail::mask_to_canvas(instance, side));
                }
                if (prompts.empty()) {
                    ++rec.skipped_samples;
                    continue;
                }
                rec.prompt_count += prompts.size();

                auto probs = ad::sigmoid(model.forward(net_in, prompts));
                auto add_term = [](ad::Var& acc, ad::Var term) {
                    acc = acc ? ad::add(acc, std::move(term)) : std::move(term);
                };
                add_term(focal_sum, focal_loss(probs, targets, cfg.loss.gamma));
                add_term(dice_sum, dice_loss(probs, targets, cfg.loss.eps));
                ++used;
            }

            if (used > 0) {
                const double inv = 1.0 / used;
                auto focal = ad::affine(std::move(focal_sum), inv, 0.0);
                auto dice = ad::affine(std::move(dice_sum), inv, 0.0);
                auto total = ad::add(ad::affine(focal, cfg.loss.lambda_focal, 0.0), dice);
                rec.losses.focal = focal->val.v[0];
                rec.losses.dice = dice->val.v[0];
                rec.losses.total = total->val.v[0];
                if (!std::isfinite(rec.losses.total))
                    throw TrainingFault("supervised_finetune: loss is not finite at step " +
                                        std::to_string(step + 1));
                opt.zero_grad();
                ad::backward(total);
                opt.step();
            }
            rec.step = ++step;
            rec.wall_seconds =
                std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
            log.push_back(rec);
        }
    }

    for (size_t i = 0; i < store.entries.size(); ++i)
        store.entries[i].var->requires_grad = saved_flags[i];
    return log;
}

}  // namespace segadapt
