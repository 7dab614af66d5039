#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "segadapt/adapt.hpp"
#include "segadapt/data.hpp"
#include "segadapt/toy_model.hpp"

using namespace segadapt;

namespace {

std::vector<const Sample*> as_batch(const std::vector<Sample>& samples, size_t from, size_t n) {
    std::vector<const Sample*> out;
    for (size_t i = from; i < from + n && i < samples.size(); ++i) out.push_back(&samples[i]);
    return out;
}

// Flat copy of every trainable tensor, for before/after comparisons.
std::map<std::string, std::vector<double>> snapshot(const AdaptedModel& adapted) {
    std::map<std::string, std::vector<double>> out;
    for (const auto& t : adapted.trainable_parameters()) out[t.name] = t.var->val.v;
    return out;
}

TrainConfig quick_config(uint64_t seed = 0) {
    TrainConfig cfg;
    cfg.seed = seed;
    cfg.batch_size = 2;
    cfg.epochs = 1;
    return cfg;
}

}  // namespace

TEST_CASE("at step zero all three branches agree") {
    auto samples = make_toy_domain(ToyKind::corrupted, 3, 41);
    TrainConfig cfg = quick_config(7);
    BranchSet br = build_branches(build_toy_model(11), cfg);

    const Image& img = samples[0].image();
    Rng rng(5);
    PromptSet prompts = prompts_from_masks(samples[0].instances, PromptType::box, rng);
    REQUIRE_FALSE(prompts.prompts.empty());
    const Image net_in = preprocess_image(img, br.shared->model().config());

    auto anchor_out = br.anchor->forward(net_in, prompts.prompts);
    auto shared_out = br.shared->forward(net_in, prompts.prompts);
    REQUIRE(anchor_out->val.same_shape(shared_out->val));
    double max_diff = 0.0;
    for (size_t i = 0; i < anchor_out->val.v.size(); ++i)
        max_diff = std::max(max_diff, std::abs(anchor_out->val.v[i] - shared_out->val.v[i]));
    CHECK(max_diff <= 1e-9);  // fresh adapters are exact identities

    // Teacher and student run through the same weights: identical inputs must
    // give bitwise-identical outputs in shared mode.
    const WeightOverlay o = br.shared->overlay();
    auto& net = br.shared->model();
    auto t = net.decode_masks(net.encode_image(net_in, &o), prompts.prompts, &o);
    auto s = net.decode_masks(net.encode_image(net_in, &o), prompts.prompts, &o);
    CHECK(t->val.v == s->val.v);
}

TEST_CASE("build_branches rejects broken configurations") {
    TrainConfig cfg = quick_config();
    CHECK_THROWS_AS(build_branches(nullptr, cfg), InvalidArgument);

    TrainConfig bad_teacher = cfg;
    bad_teacher.teacher_mode = "frozen";
    CHECK_THROWS_AS(build_branches(build_toy_model(1), bad_teacher), ConfigError);

    TrainConfig bad_momentum = cfg;
    bad_momentum.teacher_mode = "ema";
    bad_momentum.ema_momentum = 1.0;
    CHECK_THROWS_AS(build_branches(build_toy_model(1), bad_momentum), ConfigError);

    TrainConfig bad_lr = cfg;
    bad_lr.learning_rate = 0.0;
    CHECK_THROWS_AS(build_branches(build_toy_model(1), bad_lr), ConfigError);

    CHECK_THROWS_AS(weak_sup_from_name("scribble"), ConfigError);
    CHECK(weak_sup_from_name("poly") == WeakSupMode::coarse_mask);
    CHECK(weak_sup_from_name("point") == WeakSupMode::points);
}

TEST_CASE("one adaptation step leaves the anchor and the lora base untouched") {
    auto samples = make_toy_domain(ToyKind::corrupted, 4, 42);
    TrainConfig cfg = quick_config(3);
    BranchSet br = build_branches(build_toy_model(19), cfg);

    const uint64_t anchor_before = params_checksum(br.anchor->params());
    const uint64_t base_before = params_checksum(br.shared->model().params());
    const auto trainables_before = snapshot(*br.shared);

    AdamOptimizer opt(br.shared->trainable_parameters(), cfg.learning_rate, cfg.weight_decay);
    Rng rng(99);
    StepRecord rec = adaptation_step(as_batch(samples, 0, 2), br, opt, cfg, rng);

    CHECK(rec.prompt_count > 0);
    CHECK(std::isfinite(rec.losses.total));
    CHECK(params_checksum(br.anchor->params()) == anchor_before);
    // lora mode: every store weight is frozen, only the factors move
    CHECK(params_checksum(br.shared->model().params()) == base_before);
    bool any_moved = false;
    for (const auto& [name, before] : trainables_before) {
        const auto& now = br.shared->trainable_parameters();
        for (const auto& t : now)
            if (t.name == name && t.var->val.v != before) any_moved = true;
    }
    CHECK(any_moved);
}

TEST_CASE("disabling every loss term freezes the parameters") {
    auto samples = make_toy_domain(ToyKind::corrupted, 2, 8);
    TrainConfig cfg = quick_config(1);
    cfg.use_selftrain = false;
    cfg.use_anchor = false;
    cfg.use_contrastive = false;

    BranchSet br = build_branches(build_toy_model(5), cfg);
    const auto before = snapshot(*br.shared);
    AdamOptimizer opt(br.shared->trainable_parameters(), cfg.learning_rate, cfg.weight_decay);
    Rng rng(4);
    StepRecord rec = adaptation_step(as_batch(samples, 0, 2), br, opt, cfg, rng);

    CHECK(rec.losses.total == 0.0);
    CHECK(snapshot(*br.shared) == before);
}

TEST_CASE("single-term ablations still update and log zeros for the rest") {
    auto samples = make_toy_domain(ToyKind::corrupted, 2, 31);
    for (int keep = 0; keep < 3; ++keep) {
        TrainConfig cfg = quick_config(11);
        cfg.use_selftrain = keep == 0;
        cfg.use_anchor = keep == 1;
        cfg.use_contrastive = keep == 2;
        BranchSet br = build_branches(build_toy_model(23), cfg);
        AdamOptimizer opt(br.shared->trainable_parameters(), cfg.learning_rate,
                          cfg.weight_decay);
        Rng rng(6);
        StepRecord rec = adaptation_step(as_batch(samples, 0, 2), br, opt, cfg, rng);
        if (keep != 0) {
            CHECK(rec.losses.focal == 0.0);
            CHECK(rec.losses.dice == 0.0);
        }
        if (keep != 1) CHECK(rec.losses.anchor == 0.0);
        if (keep != 2) CHECK(rec.losses.contrastive == 0.0);
        CHECK(std::isfinite(rec.losses.total));
    }
}

TEST_CASE("a step decreases the loss on its own batch in most seeded trials") {
    auto samples = make_toy_domain(ToyKind::corrupted, 10, 77);
    int improved = 0;
    const int trials = 100;
    for (int trial = 0; trial < trials; ++trial) {
        TrainConfig cfg = quick_config(uint64_t(trial));
        BranchSet br = build_branches(build_toy_model(uint64_t(trial) + 1), cfg);
        AdamOptimizer opt(br.shared->trainable_parameters(), cfg.learning_rate,
                          cfg.weight_decay);
        auto batch = as_batch(samples, size_t(trial) % 8, 2);

        Rng base(mix_seed(uint64_t(trial), 1234));
        Rng r1 = base;
        StepRecord before = adaptation_step(batch, br, opt, cfg, r1, true);
        Rng r2 = base;  // same augmentations and prompts, updated weights
        StepRecord after = adaptation_step(batch, br, opt, cfg, r2, false);
        if (after.losses.total < before.losses.total) ++improved;
    }
    INFO("improved " << improved << "/" << trials);
    CHECK(improved >= 80);
}

TEST_CASE("unpromptable batches are skipped without an update") {
    // A 2-pixel instance cannot yield 5 distinct positive points.
    Image img(8, 8);
    Mask tiny(8, 8);
    tiny.at(3, 3) = 1;
    tiny.at(3, 4) = 1;
    std::vector<Sample> samples{Sample::in_memory("tiny", img, {tiny})};

    TrainConfig cfg = quick_config(2);
    cfg.weak_sup = WeakSupMode::points;
    BranchSet br = build_branches(build_toy_model(3), cfg);
    const auto before = snapshot(*br.shared);
    AdamOptimizer opt(br.shared->trainable_parameters(), cfg.learning_rate, cfg.weight_decay);
    Rng rng(1);
    StepRecord rec = adaptation_step(as_batch(samples, 0, 1), br, opt, cfg, rng);

    CHECK(rec.prompt_count == 0);
    CHECK(rec.skipped_samples == 1);
    CHECK(rec.skipped_instances == 1);
    CHECK(rec.losses.total == 0.0);
    CHECK(snapshot(*br.shared) == before);
    CHECK(opt.steps_taken() == 0);
}

TEST_CASE("automated weak supervision drives a step end to end") {
    auto samples = make_toy_domain(ToyKind::corrupted, 2, 64);
    TrainConfig cfg = quick_config(5);
    cfg.weak_sup = WeakSupMode::automated;
    BranchSet br = build_branches(build_toy_model(29), cfg);
    AdamOptimizer opt(br.shared->trainable_parameters(), cfg.learning_rate, cfg.weight_decay);
    Rng rng(12);
    StepRecord rec = adaptation_step(as_batch(samples, 0, 1), br, opt, cfg, rng);
    // The anchor may or may not produce lattice masks that survive filtering;
    // either every prompt is model-made or the sample is skipped, never a throw.
    CHECK(rec.prompt_count + rec.skipped_samples > 0);
    CHECK(std::isfinite(rec.losses.total));
}

TEST_CASE("ema update follows the stated recurrence") {
    auto model = build_toy_model(2);
    TrainConfig cfg = quick_config(9);
    cfg.teacher_mode = "ema";
    cfg.ema_momentum = 0.9;
    BranchSet br = build_branches(std::move(model), cfg);
    REQUIRE(br.ema_enabled);
    REQUIRE(br.ema_model != nullptr);

    // Pick one trainable, jump it from its initial value by +1, update once:
    // the average must move exactly one tenth of the way.
    auto trainables = br.shared->trainable_parameters();
    REQUIRE_FALSE(trainables.empty());
    auto& var = *trainables[0].var;
    const double initial = var.val.v[0];
    var.val.v[0] = initial + 1.0;
    ema_update(trainables, br.ema, 0.9);
    CHECK_THAT(br.ema.at(trainables[0].name).v[0],
               Catch::Matchers::WithinAbs(initial + 0.1, 1e-12));

    // momentum 0 tracks the shared weights exactly
    ema_update(trainables, br.ema, 0.0);
    CHECK(br.ema.at(trainables[0].name).v[0] == var.val.v[0]);

    CHECK_THROWS_AS(ema_update(trainables, br.ema, 1.0), InvalidArgument);
    CHECK_THROWS_AS(ema_update(trainables, br.ema, -0.1), InvalidArgument);

    std::map<std::string, Tensor> missing;
    CHECK_THROWS_AS(ema_update(trainables, missing, 0.5), InvalidArgument);
}

TEST_CASE("ema teacher keeps its own weights and still lets the student learn") {
    auto samples = make_toy_domain(ToyKind::corrupted, 4, 21);
    TrainConfig cfg = quick_config(13);
    cfg.teacher_mode = "ema";
    cfg.ema_momentum = 0.5;
    BranchSet br = build_branches(build_toy_model(31), cfg);
    AdamOptimizer opt(br.shared->trainable_parameters(), cfg.learning_rate, cfg.weight_decay);

    Rng rng(77);
    for (int i = 0; i < 3; ++i) {
        StepRecord rec = adaptation_step(as_batch(samples, 0, 2), br, opt, cfg, rng);
        CHECK(std::isfinite(rec.losses.total));
    }
    // After a few steps the average lags the live weights.
    bool lags = false;
    for (const auto& t : br.shared->trainable_parameters())
        if (br.ema.at(t.name).v != t.var->val.v) lags = true;
    CHECK(lags);

    // The materialized teacher weights differ from a plain merge of the live
    // weights, i.e. the teacher really runs on the average.
    const auto ema_w = ema_teacher_weights(br);
    const auto live_w = br.shared->merged_weights();
    bool differs = false;
    for (const auto& [name, tensor] : live_w)
        if (ema_w.at(name).v != tensor.v) differs = true;
    CHECK(differs);
}

TEST_CASE("nan weights abort the step with a named term") {
    auto samples = make_toy_domain(ToyKind::corrupted, 2, 56);
    TrainConfig cfg = quick_config(4);
    BranchSet br = build_branches(build_toy_model(43), cfg);
    auto trainables = br.shared->trainable_parameters();
    trainables[0].var->val.v[0] = std::numeric_limits<double>::quiet_NaN();
    AdamOptimizer opt(trainables, cfg.learning_rate, cfg.weight_decay);
    Rng rng(8);
    CHECK_THROWS_AS(adaptation_step(as_batch(samples, 0, 1), br, opt, cfg, rng), TrainingFault);
}

TEST_CASE("run_adaptation validates its inputs") {
    TrainConfig cfg = quick_config(1);
    std::vector<Sample> none;
    auto heldout = make_toy_domain(ToyKind::corrupted, 2, 3);
    CHECK_THROWS_AS(run_adaptation(build_toy_model(1), none, heldout, cfg), InvalidArgument);
}

TEST_CASE("run_adaptation walks the subset schedule exactly") {
    auto samples = make_toy_domain(ToyKind::corrupted, 12, 90);
    TrainConfig cfg = quick_config(17);
    cfg.batch_size = 4;
    cfg.epochs = 2;
    cfg.labeled_subset_size = 5;

    AdaptationResult res = run_adaptation(build_toy_model(7), samples, {}, cfg);
    // 5 samples per epoch at batch 4 -> two steps (4 + 1) per epoch.
    CHECK(res.log.size() == 4);
    size_t prompts_epoch1 = res.log[0].prompt_count + res.log[1].prompt_count;
    size_t prompts_epoch2 = res.log[2].prompt_count + res.log[3].prompt_count;
    // Same subset every epoch, box prompts are deterministic per instance.
    CHECK(prompts_epoch1 == prompts_epoch2);
    CHECK(res.best_epoch == -1);  // no held-out set, best falls back to last
    REQUIRE(res.best.tensors.size() == res.last.tensors.size());
    for (size_t i = 0; i < res.best.tensors.size(); ++i) {
        CHECK(res.best.tensors[i].first == res.last.tensors[i].first);
        CHECK(res.best.tensors[i].second.v == res.last.tensors[i].second.v);
    }

    // Oversized subset requests degrade to the full set.
    TrainConfig all = quick_config(17);
    all.batch_size = 4;
    all.labeled_subset_size = 50;
    AdaptationResult full = run_adaptation(build_toy_model(7), samples, {}, all);
    CHECK(full.log.size() == 3);  // ceil(12 / 4)
}

TEST_CASE("run_adaptation reproduces its loss log byte for byte") {
    auto samples = make_toy_domain(ToyKind::corrupted, 6, 14);
    TrainConfig cfg = quick_config(23);
    cfg.epochs = 2;
    cfg.weak_sup = WeakSupMode::points;  // resampled every epoch, still seeded

    AdaptationResult a = run_adaptation(build_toy_model(3), samples, {}, cfg);
    AdaptationResult b = run_adaptation(build_toy_model(3), samples, {}, cfg);
    CHECK(a.csv == b.csv);
    CHECK(a.csv.rfind("step,focal,dice,anchor,contrastive,total\n", 0) == 0);
    CHECK(std::count(a.csv.begin(), a.csv.end(), '\n') == 1 + long(a.log.size()));

    TrainConfig other = cfg;
    other.seed = 24;
    AdaptationResult c = run_adaptation(build_toy_model(3), samples, {}, other);
    CHECK(a.csv != c.csv);
}

TEST_CASE("run_adaptation tracks the best held-out epoch") {
    auto adapt_set = make_toy_domain(ToyKind::corrupted, 6, 33);
    auto heldout = make_toy_domain(ToyKind::corrupted, 3, 34);
    TrainConfig cfg = quick_config(29);
    cfg.epochs = 2;

    AdaptationResult res = run_adaptation(build_toy_model(9), adapt_set, heldout, cfg);
    CHECK(res.best_epoch >= 1);
    CHECK(res.best_epoch <= 2);
    CHECK(res.best_miou >= res.last_miou - 1e-12);
    CHECK(res.best_miou >= 0.0);
    CHECK(res.best.kind == "adapter");

    // The checkpoints restore: best applies onto a fresh adapted model.
    AdaptedModel fresh(build_toy_model(9), cfg.finetune_mode, {}, cfg.rank,
                       mix_seed(cfg.seed, hash_string("adapter-init")));
    apply_checkpoint(fresh, res.best);
    const double again = evaluate(fresh, heldout, PromptType::box,
                                  mix_seed(cfg.seed, hash_string("heldout-eval")))
                             .miou;
    CHECK_THAT(again, Catch::Matchers::WithinAbs(res.best_miou, 1e-12));
}

TEST_CASE("nan during a run names the failing step") {
    auto samples = make_toy_domain(ToyKind::corrupted, 2, 66);
    TrainConfig cfg = quick_config(31);

    // Poison the model before handing it over: the first step must fault.
    auto model = build_toy_model(13);
    model->params().entries[0].var->val.v[0] = std::numeric_limits<double>::quiet_NaN();
    CHECK_THROWS_WITH(run_adaptation(std::move(model), samples, {}, cfg),
                      Catch::Matchers::ContainsSubstring("step 1"));
}

TEST_CASE("supervised finetuning raises training-set miou") {
    auto train = make_toy_domain(ToyKind::clean, 12, 51);
    auto model = build_toy_model(27);

    const double before = evaluate(*model, train, PromptType::box, 5).miou;
    SupervisedConfig cfg;
    cfg.epochs = 40;
    cfg.learning_rate = 1e-2;
    cfg.seed = 6;
    auto log = supervised_finetune(*model, train, cfg);
    const double after = evaluate(*model, train, PromptType::box, 5).miou;

    INFO("miou " << before << " -> " << after);
    CHECK(after > before + 0.05);
    CHECK(log.size() == size_t(40 * 3));  // 12 samples, batch 4, 40 epochs
    CHECK(log.front().losses.total > log.back().losses.total);

    // The model leaves the trainer frozen again.
    for (const auto& e : model->params().entries) CHECK_FALSE(e.var->requires_grad);

    std::vector<Sample> empty;
    CHECK_THROWS_AS(supervised_finetune(*model, empty, cfg), InvalidArgument);
}
