#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>
#include <set>

#include "segadapt/lora.hpp"
#include "segadapt/toy_model.hpp"

using namespace segadapt;

namespace {

Image checker_image(int side, uint64_t seed) {
    Rng rng(seed);
    Image img(side, side);
    for (auto& x : img.v) x = rng.uniform();
    return img;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
    REQUIRE(a.shape == b.shape);
    double m = 0.0;
    for (size_t i = 0; i < a.v.size(); ++i) m = std::max(m, std::abs(a.v[i] - b.v[i]));
    return m;
}

// Row-reduction rank with pivoting; small matrices only.
int matrix_rank(Tensor m, double tol = 1e-9) {
    const int rows = m.dim(0), cols = m.dim(1);
    int rank = 0;
    for (int c = 0; c < cols && rank < rows; ++c) {
        int pivot = -1;
        double best = tol;
        for (int r = rank; r < rows; ++r)
            if (std::abs(m.at(r, c)) > best) {
                best = std::abs(m.at(r, c));
                pivot = r;
            }
        if (pivot < 0) continue;
        for (int j = 0; j < cols; ++j) std::swap(m.at(rank, j), m.at(pivot, j));
        for (int r = 0; r < rows; ++r) {
            if (r == rank) continue;
            const double f = m.at(r, c) / m.at(rank, c);
            for (int j = 0; j < cols; ++j) m.at(r, j) -= f * m.at(rank, j);
        }
        ++rank;
    }
    return rank;
}

std::string temp_path(const std::string& name) {
    return (std::filesystem::temp_directory_path() / name).string();
}

}  // namespace

TEST_CASE("fresh adapters leave the model untouched") {
    auto base = build_toy_model(17);
    auto reference = base->clone_frozen();
    auto adapted = inject(std::move(base), {}, 4, 99);
    CHECK(adapted.adapters().size() == 6);  // token_mix + fc1 + fc2 per block

    const Image img = checker_image(64, 3);
    const std::vector<Prompt> prompts{BoxPrompt{5, 5, 40, 40}};
    auto a = adapted.forward(img, prompts);
    auto b = reference->forward(img, prompts);
    CHECK(max_abs_diff(a->val, b->val) <= 1e-6);

    for (const auto& ad_ : adapted.adapters()) {
        for (double x : ad_.B->val.v) CHECK(x == 0.0);
        CHECK(ad_.A->requires_grad);
        CHECK(ad_.B->requires_grad);
    }
}

TEST_CASE("adapter initialization is seeded") {
    auto m1 = build_toy_model(17);
    auto m2 = build_toy_model(17);
    auto a1 = inject(std::move(m1), {}, 4, 42);
    auto a2 = inject(std::move(m2), {}, 4, 42);
    REQUIRE(a1.adapters().size() == a2.adapters().size());
    for (size_t i = 0; i < a1.adapters().size(); ++i)
        CHECK(hash_tensor(a1.adapters()[i].A->val) == hash_tensor(a2.adapters()[i].A->val));

    auto m3 = build_toy_model(17);
    auto a3 = inject(std::move(m3), {}, 4, 43);
    CHECK(hash_tensor(a1.adapters()[0].A->val) != hash_tensor(a3.adapters()[0].A->val));
}

TEST_CASE("trainable parameter counting") {
    SECTION("rank 4 on a 768x768 weight costs 6144 scalars") {
        auto model = build_toy_model(0, 768);  // patch_embed.w is [768, 768]
        auto adapted = inject(std::move(model), {"encoder.patch_embed.w"}, 4, 1);
        size_t scalars = 0;
        for (const auto& t : adapted.trainable_parameters()) scalars += t.var->val.numel();
        CHECK(scalars == 6144);
        CHECK(scalars == static_cast<size_t>(4 * (768 + 768)));
    }

    SECTION("three 32x32 wraps at rank 4 cost 768 scalars") {
        BackendConfig cfg;
        cfg.feature_dim = 32;
        auto model = std::make_unique<ToyModel>(cfg, 0, /*mlp_ratio=*/1);
        auto adapted = inject(std::move(model),
                              {"encoder.block1.mlp.fc1.w", "encoder.block1.mlp.fc2.w",
                               "encoder.block2.mlp.fc1.w"},
                              4, 1);
        size_t scalars = 0;
        for (const auto& t : adapted.trainable_parameters()) scalars += t.var->val.numel();
        CHECK(scalars == 768);
    }

    SECTION("lora mode exposes no base weight") {
        auto model = build_toy_model(9);
        const auto& store = model->params();
        std::set<std::string> base_names;
        for (const auto& e : store.entries) base_names.insert(e.name);
        auto adapted = inject(std::move(model), {}, 2, 5);
        for (const auto& t : adapted.trainable_parameters()) {
            CHECK(base_names.count(t.name) == 0);
            CHECK(t.name.find(".lora.") != std::string::npos);
        }
    }

    SECTION("full mode is a superset of layernorm mode") {
        auto collect = [](const std::string& mode) {
            auto model = build_toy_model(9);
            AdaptedModel adapted(std::move(model), FinetuneMode::parse(mode), {}, 0, 0);
            std::set<std::string> names;
            for (const auto& t : adapted.trainable_parameters()) names.insert(t.name);
            return names;
        };
        const auto full = collect("full");
        const auto ln = collect("layernorm");
        CHECK(!ln.empty());
        for (const auto& n : ln) CHECK(full.count(n) == 1);
        CHECK(full.size() > ln.size());

        const auto dec = collect("decoder");
        for (const auto& n : dec) CHECK(full.count(n) == 0);  // decoder is not encoder weights
        const auto evp = collect("embed");
        CHECK(evp == std::set<std::string>{"encoder.embed_offset"});
    }

    SECTION("invalid requests fail loudly") {
        CHECK_THROWS_AS(inject(build_toy_model(1), {"encoder.block9.mlp.fc1.w"}, 4, 0),
                        ConfigError);
        CHECK_THROWS_AS(inject(build_toy_model(1), {"encoder.patch_embed.b"}, 4, 0), ConfigError);
        CHECK_THROWS_AS(inject(build_toy_model(1), {"decoder.out.w"}, 4, 0), ConfigError);
        // token_mix is 16x16, so rank 20 cannot fit.
        CHECK_THROWS_AS(inject(build_toy_model(1), {"encoder.block1.token_mix.w"}, 20, 0),
                        InvalidArgument);
        CHECK_THROWS_AS(inject(build_toy_model(1), {}, 0, 0), InvalidArgument);
        CHECK_THROWS_AS(FinetuneMode::parse("lora+full"), ConfigError);
        CHECK_THROWS_AS(FinetuneMode::parse("adapters"), ConfigError);
        CHECK_THROWS_AS(FinetuneMode::parse(""), ConfigError);
    }
}

TEST_CASE("finetune mode parsing round-trips") {
    for (const char* text : {"lora", "decoder", "layernorm", "full", "embed", "lora+decoder",
                             "lora+embed", "full+decoder"}) {
        const auto mode = FinetuneMode::parse(text);
        CHECK(FinetuneMode::parse(mode.str()).str() == mode.str());
    }
    CHECK(FinetuneMode::parse("evp").str() == "embed");
    const auto combo = FinetuneMode::parse("decoder+lora");
    CHECK(combo.lora);
    CHECK(combo.decoder);
    CHECK_FALSE(combo.full);
}

TEST_CASE("merge reconstructs base + AB") {
    SECTION("zero B returns the base weight bit-exactly") {
        auto model = build_toy_model(2);
        const Tensor base = model->params().at("encoder.block1.mlp.fc1.w").var->val;
        auto adapted = inject(std::move(model), {"encoder.block1.mlp.fc1.w"}, 3, 0);
        const Tensor merged = merge(adapted.adapters()[0], base);
        CHECK(hash_tensor(merged) == hash_tensor(base));
    }

    SECTION("hand-computed product") {
        LoRAAdapter a;
        a.target_id = "w";
        a.rank = 1;
        a.A = ad::leaf(Tensor({2, 1}, {1, 0}));
        a.B = ad::leaf(Tensor({1, 2}, {2, 3}));
        const Tensor merged = merge(a, Tensor({2, 2}));
        CHECK(merged.v == std::vector<double>{2, 3, 0, 0});
        CHECK_THROWS_AS(merge(a, Tensor({3, 3})), InvalidArgument);
    }

    SECTION("merged-weight forward equals adapter-path forward") {
        Rng rng(123);
        for (int trial = 0; trial < 5; ++trial) {
            auto base = build_toy_model(40 + static_cast<uint64_t>(trial));
            auto adapted = inject(std::move(base), {}, 2, 7 + static_cast<uint64_t>(trial));
            // Pretend training happened: perturb both factors.
            for (const auto& a : adapted.adapters()) {
                for (auto& x : a.A->val.v) x += rng.normal(0.0, 0.05);
                for (auto& x : a.B->val.v) x = rng.normal(0.0, 0.05);
            }
            const Image img = checker_image(64, 100 + static_cast<uint64_t>(trial));
            const std::vector<Prompt> prompts{BoxPrompt{8, 8, 48, 48}};
            auto via_adapter = adapted.forward(img, prompts);

            auto merged_model = adapted.model().clone_frozen();
            auto* toy = dynamic_cast<ToyModel*>(merged_model.get());
            REQUIRE(toy != nullptr);
            toy->load_weights(adapted.merged_weights());
            auto via_merge = merged_model->forward(img, prompts);

            double rel = 0.0;
            for (size_t i = 0; i < via_adapter->val.v.size(); ++i) {
                const double denom = std::max(1.0, std::abs(via_merge->val.v[i]));
                rel = std::max(rel,
                               std::abs(via_adapter->val.v[i] - via_merge->val.v[i]) / denom);
            }
            CHECK(rel <= 1e-5);
        }
    }

    SECTION("rank of AB never exceeds r") {
        Rng rng(6);
        for (int trial = 0; trial < 10; ++trial) {
            const int r = 1 + static_cast<int>(rng.below(3));
            Tensor a = Tensor::randn({8, r}, rng);
            Tensor b = Tensor::randn({r, 8}, rng);
            LoRAAdapter adapter;
            adapter.rank = r;
            adapter.A = ad::leaf(a);
            adapter.B = ad::leaf(b);
            const Tensor ab = merge(adapter, Tensor({8, 8}));
            CHECK(matrix_rank(ab) <= r);
        }
    }
}

TEST_CASE("lora training cannot touch the frozen base") {
    auto model = build_toy_model(31);
    const uint64_t base_hash = params_checksum(model->params());
    auto adapted = inject(std::move(model), {}, 4, 8);

    const Image img = checker_image(64, 5);
    for (int step = 0; step < 3; ++step) {
        auto logits = adapted.forward(img, {BoxPrompt{10, 10, 50, 50}});
        auto loss = ad::mean(ad::mul(logits, logits));
        ad::backward(loss);
        for (const auto& t : adapted.trainable_parameters()) {
            REQUIRE(t.var->grad.v.size() == t.var->val.v.size());
            for (size_t i = 0; i < t.var->val.v.size(); ++i)
                t.var->val.v[i] -= 0.01 * t.var->grad.v[i];
            t.var->zero_grad();
        }
    }
    CHECK(params_checksum(adapted.model().params()) == base_hash);
    // Gradient reached B (it starts at zero but A != 0 feeds it).
    double bnorm = 0.0;
    for (double x : adapted.adapters()[0].B->val.v) bnorm += x * x;
    CHECK(bnorm > 0.0);
}

TEST_CASE("adapter checkpoints round-trip bit-exactly") {
    auto model = build_toy_model(51);
    auto adapted = inject(std::move(model), {}, 4, 12);
    Rng rng(77);
    for (const auto& a : adapted.adapters()) {
        for (auto& x : a.A->val.v) x = rng.normal();
        for (auto& x : a.B->val.v) x = rng.normal(0.0, 0.1);
    }

    const std::string path = temp_path("segadapt_test_adapter.ckpt");
    const Checkpoint saved = make_adapter_checkpoint(adapted);
    save_checkpoint(saved, path);
    const Checkpoint loaded = load_checkpoint(path);

    CHECK(loaded.kind == "adapter");
    CHECK(loaded.finetune_mode == "lora");
    CHECK(loaded.rank == 4);
    CHECK(loaded.targets == adapted.target_names());
    REQUIRE(loaded.tensors.size() == saved.tensors.size());
    for (size_t i = 0; i < loaded.tensors.size(); ++i) {
        CHECK(loaded.tensors[i].first == saved.tensors[i].first);
        CHECK(hash_tensor(loaded.tensors[i].second) == hash_tensor(saved.tensors[i].second));
    }

    SECTION("applying to a fresh model reproduces the forward pass") {
        auto fresh = inject(build_toy_model(51), {}, 4, 999);  // different adapter seed
        apply_checkpoint(fresh, loaded);
        const Image img = checker_image(64, 1);
        auto a = adapted.forward(img, {BoxPrompt{4, 4, 30, 30}});
        auto b = fresh.forward(img, {BoxPrompt{4, 4, 30, 30}});
        CHECK(hash_tensor(a->val) == hash_tensor(b->val));
    }

    SECTION("mismatched receivers are rejected") {
        auto wrong_rank = inject(build_toy_model(51), {}, 2, 12);
        CHECK_THROWS_AS(apply_checkpoint(wrong_rank, loaded), ConfigError);
        auto wrong_targets = inject(build_toy_model(51), {"encoder.block1.token_mix.w"}, 4, 12);
        CHECK_THROWS_AS(apply_checkpoint(wrong_targets, loaded), ConfigError);
    }

    SECTION("corrupt and missing files fail loudly") {
        CHECK_THROWS_AS(load_checkpoint(temp_path("no_such_file.ckpt")), IoError);
        const std::string junk = temp_path("segadapt_test_junk.ckpt");
        std::ofstream(junk, std::ios::binary) << "definitely not a checkpoint";
        CHECK_THROWS_AS(load_checkpoint(junk), ParseError);
        std::filesystem::remove(junk);
    }

    std::filesystem::remove(path);
}

TEST_CASE("full-weights checkpoints restore a model") {
    auto model = build_toy_model(61);
    Rng rng(3);
    model->params().at("decoder.out.w").var->val = Tensor::randn({16, 16}, rng, 0.3);
    const uint64_t want = params_checksum(model->params());

    const std::string path = temp_path("segadapt_test_full.ckpt");
    save_checkpoint(full_weights_checkpoint(*model), path);
    const Checkpoint loaded = load_checkpoint(path);
    CHECK(loaded.kind == "full-weights");

    auto fresh = build_toy_model(999);  // different init
    std::map<std::string, Tensor> weights;
    for (const auto& [name, t] : loaded.tensors) weights[name] = t;
    fresh->load_weights(weights);
    CHECK(params_checksum(fresh->params()) == want);

    CHECK_THROWS_AS(fresh->load_weights({{"encoder.nope", Tensor({1})}}), ConfigError);
    CHECK_THROWS_AS(fresh->load_weights({{"decoder.out.w", Tensor({2, 2})}}), ConfigError);
    std::filesystem::remove(path);
}

TEST_CASE("compression ratio follows the low-rank formula") {
    CHECK(compression_ratio(768, 768, 4) == Catch::Approx(6144.0 / 589824.0).epsilon(0.0).margin(0.0));
    CHECK(compression_ratio(768, 768, 4) == 4.0 * (768 + 768) / (768.0 * 768.0));
    CHECK(compression_ratio(5, 5, 5) == 2.0);
    CHECK(compression_ratio(2, 2, 1) == 1.0);
    CHECK_THROWS_AS(compression_ratio(0, 4, 1), InvalidArgument);
}
