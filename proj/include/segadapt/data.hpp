#pragma once

// Dataset ingestion and the synthetic toy domain.
//
// Real datasets arrive as either coco-style JSON (polygon instance
// segmentations joined to images by id) or as per-instance binary PNG
// directories (`<root>/images/<id>.png` plus `<root>/masks/<id>/*.png`).
// Ground-truth masks are only ever used to simulate weak-label prompts and to
// score predictions — the adaptation loop itself never reads them as targets.
//
// The toy domain renders small images of disjoint geometric blobs with exact
// masks. Its "corrupted" flavor blurs and then noises the very same scene, so
// a clean/corrupted pair shares geometry and differs only photometrically —
// a desk-scale stand-in for a real distribution shift.

#include <json.hpp>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "segadapt/augment.hpp"
#include "segadapt/core.hpp"
#include "segadapt/png_io.hpp"
#include "segadapt/tensor.hpp"

namespace segadapt {

// One image with its instance masks. File-backed samples decode lazily: the
// pixel data is only read (and then cached) on first access, so loading a
// manifest stays cheap. Dimensions are known up front either from the
// annotation record or from the instance masks.
class Sample {
  public:
    std::string id;
    std::string image_path;  // empty when the image lives in memory
    int height = 0;
    int width = 0;
    std::vector<Mask> instances;

    static Sample in_memory(std::string id, Image image, std::vector<Mask> instances) {
        Sample s;
        s.id = std::move(id);
        s.height = image.h;
        s.width = image.w;
        s.instances = std::move(instances);
        s.cache_ = std::make_shared<Image>(std::move(image));
        s.validate();
        return s;
    }

    static Sample on_disk(std::string id, std::string path, int height, int width,
                          std::vector<Mask> instances) {
        Sample s;
        s.id = std::move(id);
        s.image_path = std::move(path);
        s.height = height;
        s.width = width;
        s.instances = std::move(instances);
        s.validate();
        return s;
    }

    // Lazy pixel access. Decoding verifies that the file really has the
    // dimensions the annotations promised. Not safe to call concurrently on
    // the same sample; distinct samples may decode in parallel.
    const Image& image() const {
        if (!cache_) {
            Image decoded = read_image_png(image_path);
            if (decoded.h != height || decoded.w != width)
                throw ParseError("sample " + id + ": image file is " + std::to_string(decoded.h) +
                                 "x" + std::to_string(decoded.w) + " but annotations say " +
                                 std::to_string(height) + "x" + std::to_string(width));
            cache_ = std::make_shared<Image>(std::move(decoded));
        }
        return *cache_;
    }

    bool image_loaded() const { return cache_ != nullptr; }

  private:
    void validate() const {
        if (instances.empty()) throw InvalidArgument("sample " + id + ": needs at least one instance");
        if (height < 1 || width < 1)
            throw InvalidArgument("sample " + id + ": bad dimensions");
        for (const auto& m : instances)
            if (m.h != height || m.w != width)
                throw InvalidArgument("sample " + id + ": instance mask is " + std::to_string(m.h) +
                                      "x" + std::to_string(m.w) + ", image is " +
                                      std::to_string(height) + "x" + std::to_string(width));
    }

    mutable std::shared_ptr<Image> cache_;
};

// ---------------------------------------------------------------------------
// Toy domain.
// ---------------------------------------------------------------------------

enum class ToyKind { clean, corrupted };

inline const char* toy_kind_name(ToyKind k) { return k == ToyKind::clean ? "clean" : "corrupted"; }

inline ToyKind toy_kind_from_name(const std::string& name) {
    if (name == "clean") return ToyKind::clean;
    if (name == "corrupted") return ToyKind::corrupted;
    throw ConfigError("unknown toy-domain kind '" + name + "' (expected clean or corrupted)");
}

namespace detail {

constexpr int kToySide = 64;
constexpr double kToyNoiseSigma = 0.2;
constexpr double kToyBlurSigma = 6.0;

struct Blob {
    bool ellipse;
    int cx, cy, rx, ry;

    bool covers(int x, int y) const {
        if (ellipse) {
            const double dx = (x - cx) / static_cast<double>(rx);
            const double dy = (y - cy) / static_cast<double>(ry);
            return dx * dx + dy * dy <= 1.0;
        }
        return std::abs(x - cx) <= rx && std::abs(y - cy) <= ry;
    }
};

}  // namespace detail

// Renders one synthetic scene per image: a dark background holding 2–5
// disjoint bright blobs (ellipses and rectangles), each with a pixel-exact
// mask. Geometry and colors are drawn from a sub-seed independent of the
// corruption, so the clean and corrupted variants of (seed, index) share
// masks exactly.
inline std::vector<Sample> make_toy_domain(ToyKind kind, int n_images, uint64_t seed) {
    if (n_images < 1) throw InvalidArgument("make_toy_domain: n_images must be >= 1");
    const int side = detail::kToySide;
    std::vector<Sample> out;
    out.reserve(static_cast<size_t>(n_images));

    for (int i = 0; i < n_images; ++i) {
        Rng geo(mix_seed(seed, hash_string("toy-geometry"), static_cast<uint64_t>(i)));

        Image img(side, side);
        for (int c = 0; c < 3; ++c) {
            const double bg = geo.uniform(0.05, 0.45);
            for (int y = 0; y < side; ++y)
                for (int x = 0; x < side; ++x) img.at(c, y, x) = bg;
        }

        const int want = 2 + static_cast<int>(geo.below(4));
        std::vector<Mask> masks;
        Mask occupied(side, side);
        for (int b = 0; b < want; ++b) {
            // Rejection-sample a placement that touches no earlier blob.
            for (int attempt = 0; attempt < 100; ++attempt) {
                detail::Blob blob;
                blob.ellipse = geo.below(2) == 0;
                blob.rx = 4 + static_cast<int>(geo.below(7));
                blob.ry = 4 + static_cast<int>(geo.below(7));
                blob.cx = blob.rx + 1 + static_cast<int>(geo.below(static_cast<uint64_t>(side - 2 * blob.rx - 2)));
                blob.cy = blob.ry + 1 + static_cast<int>(geo.below(static_cast<uint64_t>(side - 2 * blob.ry - 2)));
                const double col[3] = {geo.uniform(0.55, 0.95), geo.uniform(0.55, 0.95),
                                       geo.uniform(0.55, 0.95)};

                bool clash = false;
                for (int y = blob.cy - blob.ry; y <= blob.cy + blob.ry && !clash; ++y)
                    for (int x = blob.cx - blob.rx; x <= blob.cx + blob.rx; ++x)
                        if (blob.covers(x, y) && occupied.at(y, x)) {
                            clash = true;
                            break;
                        }
                if (clash) continue;

                Mask m(side, side);
                for (int y = blob.cy - blob.ry; y <= blob.cy + blob.ry; ++y)
                    for (int x = blob.cx - blob.rx; x <= blob.cx + blob.rx; ++x)
                        if (blob.covers(x, y)) {
                            m.at(y, x) = 1;
                            occupied.at(y, x) = 1;
                            for (int c = 0; c < 3; ++c) img.at(c, y, x) = col[c];
                        }
                masks.push_back(std::move(m));
                break;
            }
        }

        if (kind == ToyKind::corrupted) {
            Rng noise(mix_seed(seed, hash_string("toy-corruption"), static_cast<uint64_t>(i)));
            detail::gaussian_blur_inplace(img, detail::kToyBlurSigma);
            for (auto& v : img.v)
                v = std::min(1.0, std::max(0.0, v + noise.normal(0.0, detail::kToyNoiseSigma)));
        }

        char id[32];
        std::snprintf(id, sizeof(id), "toy-%s-%04d", toy_kind_name(kind), i);
        out.push_back(Sample::in_memory(id, std::move(img), std::move(masks)));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Manifests.
// ---------------------------------------------------------------------------

// On-disk description of a dataset. Serialized as JSON:
//   {
//     "name": "kitchen-sim",
//     "format": "coco-json" | "mask-dirs" | "synthetic",
//     "root": "relative/or/absolute/dir",       // resolved against the manifest's directory
//     "split_ratio": 0.8,
//     "seed": 7,
//     "synthetic": { "kind": "corrupted", "n_images": 200 }   // synthetic only
//   }
struct DatasetManifest {
    std::string name;
    std::string root = ".";
    std::string format = "synthetic";
    double split_ratio = 0.8;
    uint64_t seed = 0;
    std::string toy_kind = "clean";
    int toy_images = 100;

    void validate() const {
        if (format != "coco-json" && format != "mask-dirs" && format != "synthetic")
            throw ConfigError("manifest: unknown format '" + format + "'");
        if (!(split_ratio > 0.0 && split_ratio < 1.0))
            throw ConfigError("manifest: split_ratio must lie strictly between 0 and 1");
        if (format == "synthetic") {
            toy_kind_from_name(toy_kind);
            if (toy_images < 1) throw ConfigError("manifest: synthetic n_images must be >= 1");
        }
    }
};

inline DatasetManifest load_manifest(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open manifest: " + path);
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw ParseError("manifest " + path + ": " + e.what());
    }

    DatasetManifest m;
    try {
        m.name = j.value("name", "");
        m.root = j.value("root", ".");
        m.format = j.value("format", "synthetic");
        m.split_ratio = j.value("split_ratio", 0.8);
        m.seed = j.value("seed", uint64_t{0});
        if (j.contains("synthetic")) {
            m.toy_kind = j["synthetic"].value("kind", "clean");
            m.toy_images = j["synthetic"].value("n_images", 100);
        }
    } catch (const nlohmann::json::exception& e) {
        throw ParseError("manifest " + path + ": " + e.what());
    }
    // Relative roots travel with the manifest file.
    const auto parent = std::filesystem::path(path).parent_path();
    if (!m.root.empty() && std::filesystem::path(m.root).is_relative())
        m.root = (parent / m.root).lexically_normal().string();
    m.validate();
    return m;
}

inline void save_manifest(const DatasetManifest& m, const std::string& path) {
    m.validate();
    nlohmann::json j{{"name", m.name},       {"root", m.root},
                     {"format", m.format},   {"split_ratio", m.split_ratio},
                     {"seed", m.seed}};
    if (m.format == "synthetic")
        j["synthetic"] = {{"kind", m.toy_kind}, {"n_images", m.toy_images}};
    std::ofstream out(path);
    if (!out) throw IoError("cannot write manifest: " + path);
    out << j.dump(2) << "\n";
}

// ---------------------------------------------------------------------------
// Loaders.
// ---------------------------------------------------------------------------

namespace detail {

// Even-odd scanline rasterization of one float-coordinate polygon ring,
// sampled at pixel centers. Matches the usual coco convention closely enough
// that an axis-aligned square of area A rasterizes to A pixels.
inline void rasterize_ring(const std::vector<double>& flat, Mask& out) {
    const size_t n = flat.size() / 2;
    std::vector<double> xs;
    for (int y = 0; y < out.h; ++y) {
        const double cy = y + 0.5;
        xs.clear();
        for (size_t i = 0; i < n; ++i) {
            const double x0 = flat[2 * i], y0 = flat[2 * i + 1];
            const double x1 = flat[2 * ((i + 1) % n)], y1 = flat[2 * ((i + 1) % n) + 1];
            if ((y0 <= cy) != (y1 <= cy)) xs.push_back(x0 + (cy - y0) * (x1 - x0) / (y1 - y0));
        }
        std::sort(xs.begin(), xs.end());
        for (size_t i = 0; i + 1 < xs.size(); i += 2) {
            const int lo = std::max(0, static_cast<int>(std::ceil(xs[i] - 0.5)));
            const int hi = std::min(out.w - 1, static_cast<int>(std::floor(xs[i + 1] - 0.5 - 1e-12)));
            for (int x = lo; x <= hi; ++x) out.at(y, x) = 1;
        }
    }
}

inline std::vector<Sample> load_coco(const std::string& root) {
    const std::string ann_path = (std::filesystem::path(root) / "annotations.json").string();
    std::ifstream in(ann_path);
    if (!in) throw IoError("cannot open annotations: " + ann_path);
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(ann_path + ": " + e.what());
    }

    struct Rec {
        std::string file;
        int h, w;
        std::vector<Mask> instances;
    };
    std::map<long long, Rec> by_id;  // ordered: deterministic output
    size_t idx = 0;
    for (const auto& im : j.value("images", nlohmann::json::array())) {
        try {
            const long long id = im.at("id").get<long long>();
            if (by_id.count(id))
                throw ParseError("image record " + std::to_string(idx) + ": duplicate id " +
                                 std::to_string(id));
            by_id[id] = {im.at("file_name").get<std::string>(), im.at("height").get<int>(),
                         im.at("width").get<int>(), {}};
        } catch (const nlohmann::json::exception& e) {
            throw ParseError("image record " + std::to_string(idx) + ": " + e.what());
        }
        ++idx;
    }

    idx = 0;
    for (const auto& an : j.value("annotations", nlohmann::json::array())) {
        try {
            const long long image_id = an.at("image_id").get<long long>();
            auto it = by_id.find(image_id);
            if (it == by_id.end())
                throw ParseError("annotation " + std::to_string(idx) + ": unknown image_id " +
                                 std::to_string(image_id));
            const auto& seg = an.at("segmentation");
            if (!seg.is_array() || seg.empty())
                throw ParseError("annotation " + std::to_string(idx) +
                                 ": segmentation must be a non-empty polygon list (RLE is not supported)");
            Mask m(it->second.h, it->second.w);
            for (const auto& ring : seg) {
                const auto flat = ring.get<std::vector<double>>();
                if (flat.size() < 6 || flat.size() % 2 != 0)
                    throw ParseError("annotation " + std::to_string(idx) +
                                     ": polygon needs an even count of >= 6 coordinates");
                rasterize_ring(flat, m);
            }
            it->second.instances.push_back(std::move(m));
        } catch (const nlohmann::json::exception& e) {
            throw ParseError("annotation " + std::to_string(idx) + ": " + e.what());
        }
        ++idx;
    }

    std::vector<Sample> out;
    for (auto& [id, rec] : by_id) {
        if (rec.instances.empty()) continue;  // nothing to prompt or score
        const auto img_path = std::filesystem::path(root) / rec.file;
        if (!std::filesystem::exists(img_path))
            throw IoError("missing image file: " + img_path.string());
        char sid[24];
        std::snprintf(sid, sizeof(sid), "%012lld", id);
        out.push_back(Sample::on_disk(sid, img_path.string(), rec.h, rec.w,
                                      std::move(rec.instances)));
    }
    return out;
}

inline std::vector<Sample> load_mask_dirs(const std::string& root) {
    namespace fs = std::filesystem;
    const fs::path images = fs::path(root) / "images";
    const fs::path masks = fs::path(root) / "masks";
    if (!fs::is_directory(images)) throw IoError("missing images directory: " + images.string());
    if (!fs::is_directory(masks)) throw IoError("missing masks directory: " + masks.string());

    std::vector<fs::path> image_files;
    for (const auto& e : fs::directory_iterator(images))
        if (e.path().extension() == ".png") image_files.push_back(e.path());
    std::sort(image_files.begin(), image_files.end());

    std::vector<Sample> out;
    for (const auto& img_path : image_files) {
        const std::string id = img_path.stem().string();
        const fs::path mask_dir = masks / id;
        if (!fs::is_directory(mask_dir))
            throw ParseError("sample " + id + ": no mask directory at " + mask_dir.string());
        std::vector<fs::path> mask_files;
        for (const auto& e : fs::directory_iterator(mask_dir))
            if (e.path().extension() == ".png") mask_files.push_back(e.path());
        std::sort(mask_files.begin(), mask_files.end());
        if (mask_files.empty()) throw ParseError("sample " + id + ": mask directory is empty");

        std::vector<Mask> instances;
        for (const auto& mf : mask_files) instances.push_back(read_mask_png(mf.string()));
        for (const auto& m : instances)
            if (!m.same_shape(instances.front()))
                throw ParseError("sample " + id + ": instance masks disagree on dimensions");
        const int h = instances.front().h, w = instances.front().w;
        out.push_back(Sample::on_disk(id, img_path.string(), h, w, std::move(instances)));
    }
    return out;
}

}  // namespace detail

// Loads a dataset per its manifest: deterministic order (sorted by id),
// unique ids, every sample carrying at least one instance mask.
inline std::vector<Sample> load_dataset(const DatasetManifest& m) {
    m.validate();
    std::vector<Sample> out;
    if (m.format == "synthetic")
        out = make_toy_domain(toy_kind_from_name(m.toy_kind), m.toy_images, m.seed);
    else if (m.format == "coco-json")
        out = detail::load_coco(m.root);
    else
        out = detail::load_mask_dirs(m.root);

    std::sort(out.begin(), out.end(), [](const Sample& a, const Sample& b) { return a.id < b.id; });
    for (size_t i = 1; i < out.size(); ++i)
        if (out[i].id == out[i - 1].id) throw ParseError("duplicate sample id: " + out[i].id);
    return out;
}

// Seed-deterministic disjoint split; the two halves together hold exactly the
// input samples. Both halves come back sorted by id.
inline std::pair<std::vector<Sample>, std::vector<Sample>> split(std::vector<Sample> samples,
                                                                 double ratio, uint64_t seed) {
    if (!(ratio > 0.0 && ratio < 1.0))
        throw InvalidArgument("split: ratio must lie strictly between 0 and 1");
    std::sort(samples.begin(), samples.end(),
              [](const Sample& a, const Sample& b) { return a.id < b.id; });

    Rng rng(mix_seed(seed, hash_string("dataset-split")));
    std::vector<size_t> order(samples.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;
    for (size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);

    const size_t n_train = static_cast<size_t>(
        std::min<long long>(static_cast<long long>(samples.size()),
                            std::llround(ratio * static_cast<double>(samples.size()))));
    std::pair<std::vector<Sample>, std::vector<Sample>> out;
    for (size_t i = 0; i < order.size(); ++i)
        (i < n_train ? out.first : out.second).push_back(samples[order[i]]);
    auto by_id = [](const Sample& a, const Sample& b) { return a.id < b.id; };
    std::sort(out.first.begin(), out.first.end(), by_id);
    std::sort(out.second.begin(), out.second.end(), by_id);
    return out;
}

// Writes samples in the mask-dirs layout (`images/<id>.png`,
// `masks/<id>/instance_<k>.png`) so synthetic domains can round-trip through
// the file loaders.
inline void write_dataset(const std::vector<Sample>& samples, const std::string& root) {
    namespace fs = std::filesystem;
    fs::create_directories(fs::path(root) / "images");
    for (const auto& s : samples) {
        write_image_png(s.image(), (fs::path(root) / "images" / (s.id + ".png")).string());
        const fs::path mask_dir = fs::path(root) / "masks" / s.id;
        fs::create_directories(mask_dir);
        for (size_t k = 0; k < s.instances.size(); ++k) {
            char name[32];
            std::snprintf(name, sizeof(name), "instance_%03zu.png", k);
            write_mask_png(s.instances[k], (mask_dir / name).string());
        }
    }
}

}  // namespace segadapt
