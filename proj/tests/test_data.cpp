#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>
#include <random>
#include <set>

#include "segadapt/data.hpp"

using namespace segadapt;
namespace fs = std::filesystem;

namespace {

struct TempDir {
    fs::path path;
    TempDir() {
        path = fs::temp_directory_path() /
               ("segadapt_data_" + std::to_string(Rng(std::random_device{}()).next()));
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
};

uint64_t dataset_checksum(const std::vector<Sample>& samples) {
    uint64_t h = 1469598103934665603ull;
    for (const auto& s : samples) {
        h = fnv1a_bytes(s.id.data(), s.id.size(), h);
        h = fnv1a_bytes(s.image().v.data(), s.image().v.size() * sizeof(double), h);
        for (const auto& m : s.instances) h = fnv1a_bytes(m.v.data(), m.v.size(), h);
    }
    return h;
}

std::set<std::string> ids_of(const std::vector<Sample>& samples) {
    std::set<std::string> out;
    for (const auto& s : samples) out.insert(s.id);
    return out;
}

}  // namespace

TEST_CASE("toy domain construction invariants") {
    const auto samples = make_toy_domain(ToyKind::clean, 20, 7);
    REQUIRE(samples.size() == 20);

    std::set<std::string> seen;
    for (const auto& s : samples) {
        CHECK(seen.insert(s.id).second);
        CHECK(s.height == 64);
        CHECK(s.width == 64);
        CHECK(s.instances.size() >= 2);
        CHECK(s.instances.size() <= 5);
        CHECK(s.image().all_finite());

        // Blobs are disjoint and every mask is solid.
        Mask occupancy(64, 64);
        for (const auto& m : s.instances) {
            CHECK(m.area() >= 5);
            for (int y = 0; y < 64; ++y)
                for (int x = 0; x < 64; ++x)
                    if (m.at(y, x)) {
                        CHECK_FALSE(occupancy.at(y, x));
                        occupancy.at(y, x) = 1;
                    }
        }

        // Foreground is bright, background dark, so masks and pixels agree
        // exactly on the clean renders.
        for (int y = 0; y < 64; ++y)
            for (int x = 0; x < 64; ++x) {
                const bool fg = occupancy.at(y, x);
                const double r = s.image().at(0, y, x);
                if (fg)
                    CHECK(r >= 0.55);
                else
                    CHECK(r <= 0.45);
            }
    }
}

TEST_CASE("toy domain is deterministic and kind changes only pixels") {
    const auto a = make_toy_domain(ToyKind::corrupted, 8, 3);
    const auto b = make_toy_domain(ToyKind::corrupted, 8, 3);
    CHECK(dataset_checksum(a) == dataset_checksum(b));

    const auto clean = make_toy_domain(ToyKind::clean, 8, 3);
    REQUIRE(clean.size() == a.size());
    double total_diff = 0.0;
    for (size_t i = 0; i < a.size(); ++i) {
        REQUIRE(clean[i].instances.size() == a[i].instances.size());
        for (size_t k = 0; k < a[i].instances.size(); ++k) {
            CHECK(clean[i].instances[k].v == a[i].instances[k].v);  // identical geometry
        }
        for (size_t p = 0; p < clean[i].image().v.size(); ++p)
            total_diff += std::abs(clean[i].image().v[p] - a[i].image().v[p]);
    }
    // Blur + sigma-0.2 noise moves the average pixel substantially.
    CHECK(total_diff / (8.0 * 3 * 64 * 64) > 0.05);

    const auto other_seed = make_toy_domain(ToyKind::corrupted, 8, 4);
    CHECK(dataset_checksum(other_seed) != dataset_checksum(a));
    CHECK_THROWS_AS(make_toy_domain(ToyKind::clean, 0, 1), InvalidArgument);
}

TEST_CASE("split is disjoint, exhaustive, and seeded") {
    const auto samples = make_toy_domain(ToyKind::clean, 10, 1);
    auto [train, test] = split(samples, 0.8, 42);
    CHECK(train.size() == 8);
    CHECK(test.size() == 2);

    const auto train_ids = ids_of(train), test_ids = ids_of(test);
    for (const auto& id : train_ids) CHECK(test_ids.count(id) == 0);
    std::set<std::string> all = train_ids;
    all.insert(test_ids.begin(), test_ids.end());
    CHECK(all == ids_of(samples));

    auto [train2, test2] = split(samples, 0.8, 42);
    CHECK(ids_of(train2) == train_ids);
    auto [train3, test3] = split(samples, 0.8, 43);
    CHECK(ids_of(train3) != train_ids);  // 10C8 makes a collision vanishingly unlikely

    CHECK_THROWS_AS(split(samples, 0.0, 1), InvalidArgument);
    CHECK_THROWS_AS(split(samples, 1.0, 1), InvalidArgument);
}

TEST_CASE("manifest files round-trip and validate") {
    TempDir tmp;
    DatasetManifest m;
    m.name = "toy-shift";
    m.format = "synthetic";
    m.split_ratio = 0.75;
    m.seed = 11;
    m.toy_kind = "corrupted";
    m.toy_images = 6;
    const std::string path = (tmp.path / "manifest.json").string();
    save_manifest(m, path);

    const DatasetManifest back = load_manifest(path);
    CHECK(back.name == m.name);
    CHECK(back.format == m.format);
    CHECK(back.split_ratio == m.split_ratio);
    CHECK(back.seed == m.seed);
    CHECK(back.toy_kind == m.toy_kind);
    CHECK(back.toy_images == m.toy_images);

    const auto samples = load_dataset(back);
    CHECK(samples.size() == 6);
    CHECK(std::is_sorted(samples.begin(), samples.end(),
                         [](const Sample& a, const Sample& b) { return a.id < b.id; }));

    SECTION("invalid manifests are rejected") {
        DatasetManifest bad = m;
        bad.format = "tar-archive";
        CHECK_THROWS_AS(bad.validate(), ConfigError);
        bad = m;
        bad.split_ratio = 1.5;
        CHECK_THROWS_AS(bad.validate(), ConfigError);
        bad = m;
        bad.toy_kind = "foggy";
        CHECK_THROWS_AS(bad.validate(), ConfigError);
    }

    SECTION("missing and malformed files fail loudly") {
        CHECK_THROWS_AS(load_manifest((tmp.path / "nope.json").string()), IoError);
        const std::string junk = (tmp.path / "junk.json").string();
        std::ofstream(junk) << "{not json";
        CHECK_THROWS_AS(load_manifest(junk), ParseError);
    }

    SECTION("relative roots resolve against the manifest directory") {
        DatasetManifest disk = m;
        disk.format = "mask-dirs";
        disk.root = "payload";
        save_manifest(disk, path);
        const DatasetManifest resolved = load_manifest(path);
        CHECK(fs::path(resolved.root) == (tmp.path / "payload").lexically_normal());
    }
}

TEST_CASE("datasets round-trip through the mask-dirs layout") {
    TempDir tmp;
    const auto original = make_toy_domain(ToyKind::clean, 4, 9);
    write_dataset(original, tmp.path.string());

    DatasetManifest m;
    m.format = "mask-dirs";
    m.root = tmp.path.string();
    const auto loaded = load_dataset(m);
    REQUIRE(loaded.size() == original.size());

    for (size_t i = 0; i < loaded.size(); ++i) {
        CHECK(loaded[i].id == original[i].id);
        REQUIRE(loaded[i].instances.size() == original[i].instances.size());
        for (size_t k = 0; k < loaded[i].instances.size(); ++k)
            CHECK(loaded[i].instances[k].v == original[i].instances[k].v);  // masks are exact
        CHECK_FALSE(loaded[i].image_loaded());  // images decode lazily
        const Image& a = loaded[i].image();
        const Image& b = original[i].image();
        REQUIRE(a.same_shape(b));
        double worst = 0.0;
        for (size_t p = 0; p < a.v.size(); ++p) worst = std::max(worst, std::abs(a.v[p] - b.v[p]));
        CHECK(worst <= 0.5 / 255.0 + 1e-9);  // 8-bit quantization only
        CHECK(loaded[i].image_loaded());
    }

    SECTION("a sample without masks is a parse error") {
        fs::remove_all(tmp.path / "masks" / loaded[0].id);
        CHECK_THROWS_AS(load_dataset(m), ParseError);
    }

    SECTION("a missing images directory is an I/O error") {
        DatasetManifest missing = m;
        missing.root = (tmp.path / "absent").string();
        CHECK_THROWS_AS(load_dataset(missing), IoError);
    }
}

TEST_CASE("coco-style annotations load and rasterize") {
    TempDir tmp;
    // Three on-disk images the annotations can point at.
    for (int i = 1; i <= 3; ++i) {
        Image img(40, 50);
        for (auto& v : img.v) v = 0.25;
        write_image_png(img, (tmp.path / ("im" + std::to_string(i) + ".png")).string());
    }

    auto square = [](double x0, double y0, double men) {
        return nlohmann::json::array({x0, y0, x0 + men, y0, x0 + men, y0 + men, x0, y0 + men});
    };
    nlohmann::json ann = {
        {"images",
         {{{"id", 1}, {"file_name", "im1.png"}, {"height", 40}, {"width", 50}},
          {{"id", 2}, {"file_name", "im2.png"}, {"height", 40}, {"width", 50}},
          {{"id", 7}, {"file_name", "im3.png"}, {"height", 40}, {"width", 50}}}},
        {"annotations",
         {{{"image_id", 1}, {"segmentation", {square(2, 2, 1)}}},       // unit square
          {{"image_id", 1}, {"segmentation", {square(10, 10, 20)}}},    // 20x20 square
          {{"image_id", 1}, {"segmentation", {square(35, 3, 5)}}},
          {{"image_id", 2}, {"segmentation", {square(4, 4, 8)}}},
          {{"image_id", 2}, {"segmentation", {square(20, 20, 6), square(30, 30, 4)}}},  // two parts
          {{"image_id", 7}, {"segmentation", {square(1, 1, 3)}}},
          {{"image_id", 7}, {"segmentation", {square(12, 30, 7)}}}}}};
    std::ofstream((tmp.path / "annotations.json").string()) << ann.dump();

    DatasetManifest m;
    m.format = "coco-json";
    m.root = tmp.path.string();
    const auto samples = load_dataset(m);

    SECTION("cardinality and ordering") {
        REQUIRE(samples.size() == 3);
        size_t masks = 0;
        for (const auto& s : samples) masks += s.instances.size();
        CHECK(masks == 7);
        CHECK(samples[0].id < samples[1].id);
        CHECK(samples[1].id < samples[2].id);
        const auto again = load_dataset(m);
        for (size_t i = 0; i < samples.size(); ++i) CHECK(again[i].id == samples[i].id);
    }

    SECTION("rasterized areas match the analytic ones") {
        CHECK(samples[0].instances[0].area() == 1);      // unit square
        CHECK(samples[0].instances[1].area() == 400);    // 20x20
        CHECK(samples[0].instances[2].area() == 25);
        CHECK(samples[1].instances[1].area() == 36 + 16);  // union of two parts
    }

    SECTION("lazy images decode with matching dimensions") {
        CHECK(samples[2].image().h == 40);
        CHECK(samples[2].image().w == 50);
    }

    SECTION("malformed annotations carry the record index") {
        nlohmann::json bad = ann;
        bad["annotations"][3]["segmentation"] = {nlohmann::json::array({1.0, 2.0, 3.0})};
        std::ofstream((tmp.path / "annotations.json").string()) << bad.dump();
        CHECK_THROWS_WITH(load_dataset(m), Catch::Matchers::ContainsSubstring("annotation 3"));

        bad = ann;
        bad["annotations"][5]["image_id"] = 999;
        std::ofstream((tmp.path / "annotations.json").string()) << bad.dump();
        CHECK_THROWS_WITH(load_dataset(m), Catch::Matchers::ContainsSubstring("unknown image_id"));

        bad = ann;
        bad["images"][1].erase("height");
        std::ofstream((tmp.path / "annotations.json").string()) << bad.dump();
        CHECK_THROWS_WITH(load_dataset(m), Catch::Matchers::ContainsSubstring("image record 1"));
    }

    SECTION("a missing image file is an I/O error") {
        fs::remove(tmp.path / "im2.png");
        CHECK_THROWS_AS(load_dataset(m), IoError);
    }
}

TEST_CASE("PNG round-trips") {
    TempDir tmp;
    Rng rng(5);
    Image img(13, 17);
    for (auto& v : img.v) v = rng.uniform();
    const std::string ipath = (tmp.path / "img.png").string();
    write_image_png(img, ipath);
    const Image back = read_image_png(ipath);
    REQUIRE(back.same_shape(img));
    for (size_t i = 0; i < img.v.size(); ++i)
        CHECK(std::abs(back.v[i] - img.v[i]) <= 0.5 / 255.0 + 1e-9);

    Mask m(9, 11);
    for (auto& b : m.v) b = rng.below(2) ? 1 : 0;
    const std::string mpath = (tmp.path / "mask.png").string();
    write_mask_png(m, mpath);
    const Mask mback = read_mask_png(mpath);
    REQUIRE(mback.same_shape(m));
    CHECK(mback.v == m.v);

    CHECK_THROWS_AS(read_image_png((tmp.path / "absent.png").string()), IoError);
    const std::string junk = (tmp.path / "junk.png").string();
    std::ofstream(junk, std::ios::binary) << "not a png at all";
    CHECK_THROWS_AS(read_image_png(junk), ParseError);
}

TEST_CASE("sample invariants are enforced") {
    Image img(8, 8);
    CHECK_THROWS_AS(Sample::in_memory("a", img, {}), InvalidArgument);
    CHECK_THROWS_AS(Sample::in_memory("a", img, {Mask(4, 4)}), InvalidArgument);

    TempDir tmp;
    write_image_png(img, (tmp.path / "a.png").string());
    // Annotations claim the wrong size; the mismatch surfaces at decode time.
    auto s = Sample::on_disk("a", (tmp.path / "a.png").string(), 16, 16, {Mask(16, 16)});
    CHECK_FALSE(s.image_loaded());
    CHECK_THROWS_AS(s.image(), ParseError);
}
