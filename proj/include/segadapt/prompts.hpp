#pragma once

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <queue>
#include <sstream>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include "segadapt/tensor.hpp"

namespace segadapt {

// ---- prompt types ----

struct BoxPrompt {
    int x_min = 0, y_min = 0, x_max = 0, y_max = 0;
};

struct PointPrompt {
    std::vector<std::pair<int, int>> positives;  // (x, y), exactly 5
    std::vector<std::pair<int, int>> negatives;  // (x, y), exactly 5
};

struct CoarseMaskPrompt {
    std::vector<std::pair<int, int>> vertices;
    Mask rasterized;
};

enum class PromptType { box, points, coarse_mask };

inline const char* prompt_type_name(PromptType t) {
    switch (t) {
        case PromptType::box: return "box";
        case PromptType::points: return "points";
        case PromptType::coarse_mask: return "coarse_mask";
    }
    return "?";
}

inline PromptType prompt_type_from_name(const std::string& s) {
    if (s == "box") return PromptType::box;
    if (s == "points" || s == "point") return PromptType::points;
    if (s == "coarse_mask" || s == "coarse" || s == "poly") return PromptType::coarse_mask;
    throw ConfigError("unknown prompt type: " + s);
}

using Prompt = std::variant<BoxPrompt, PointPrompt, CoarseMaskPrompt>;

inline PromptType prompt_type(const Prompt& p) {
    if (std::holds_alternative<BoxPrompt>(p)) return PromptType::box;
    if (std::holds_alternative<PointPrompt>(p)) return PromptType::points;
    return PromptType::coarse_mask;
}

// One fixed set of prompts shared verbatim by the anchor, teacher and
// student branches, so their outputs correspond one-to-one.
struct PromptSet {
    PromptType type = PromptType::box;
    std::vector<Prompt> prompts;
    std::string source;  // "weak-label" | "automated"
    int skipped = 0;     // degenerate instances dropped during synthesis
};

// ---- mask utilities ----

inline Mask binarize_logits(const Tensor& logits, double threshold = 0.0) {
    if (logits.ndim() != 2) throw InvalidArgument("binarize_logits: expected [H,W]");
    Mask m(logits.dim(0), logits.dim(1));
    for (size_t i = 0; i < logits.v.size(); ++i) m.v[i] = logits.v[i] > threshold ? 1 : 0;
    return m;
}

// Intersection-over-union of two binary masks. Two empty masks compare as
// identical (1.0) so vacuous cases don't poison averages.
inline double mask_iou(const Mask& a, const Mask& b) {
    if (!a.same_shape(b)) throw InvalidArgument("mask_iou: shape mismatch");
    size_t inter = 0, uni = 0;
    for (size_t i = 0; i < a.v.size(); ++i) {
        const bool av = a.v[i] != 0, bv = b.v[i] != 0;
        inter += (av && bv);
        uni += (av || bv);
    }
    if (uni == 0) return 1.0;
    return static_cast<double>(inter) / static_cast<double>(uni);
}

// ---- weak-supervision prompt synthesis ----

inline BoxPrompt box_from_mask(const Mask& m) {
    int x0 = m.w, y0 = m.h, x1 = -1, y1 = -1;
    for (int y = 0; y < m.h; ++y)
        for (int x = 0; x < m.w; ++x)
            if (m.at(y, x)) {
                x0 = std::min(x0, x);
                y0 = std::min(y0, y);
                x1 = std::max(x1, x);
                y1 = std::max(y1, y);
            }
    if (x1 < 0) throw DegenerateInput("box_from_mask: empty mask");
    return {x0, y0, x1, y1};
}

// 5 positive points on the object, 5 negatives off it, sampled uniformly
// without replacement. Deterministic for a given rng state.
inline PointPrompt sample_points(const Mask& m, Rng& rng) {
    std::vector<std::pair<int, int>> fg, bg;
    for (int y = 0; y < m.h; ++y)
        for (int x = 0; x < m.w; ++x) (m.at(y, x) ? fg : bg).emplace_back(x, y);
    if (fg.size() < 5 || bg.size() < 5)
        throw DegenerateInput("sample_points: need at least 5 pixels on each side");

    auto draw5 = [&rng](std::vector<std::pair<int, int>>& pool) {
        std::vector<std::pair<int, int>> out;
        for (size_t i = 0; i < 5; ++i) {
            const size_t j = i + rng.below(pool.size() - i);
            std::swap(pool[i], pool[j]);
            out.push_back(pool[i]);
        }
        return out;
    };
    PointPrompt p;
    p.positives = draw5(fg);
    p.negatives = draw5(bg);
    return p;
}

namespace detail {

// Largest 8-connected foreground component, as its own mask.
inline Mask largest_component(const Mask& m) {
    Mask label(m.h, m.w);
    Mask best(m.h, m.w);
    size_t best_area = 0;
    std::vector<std::pair<int, int>> queue;
    for (int sy = 0; sy < m.h; ++sy)
        for (int sx = 0; sx < m.w; ++sx) {
            if (!m.at(sy, sx) || label.at(sy, sx)) continue;
            Mask comp(m.h, m.w);
            queue.clear();
            queue.emplace_back(sx, sy);
            label.at(sy, sx) = 1;
            size_t area = 0;
            while (!queue.empty()) {
                auto [x, y] = queue.back();
                queue.pop_back();
                comp.at(y, x) = 1;
                ++area;
                for (int dy = -1; dy <= 1; ++dy)
                    for (int dx = -1; dx <= 1; ++dx) {
                        const int nx = x + dx, ny = y + dy;
                        if (nx < 0 || ny < 0 || nx >= m.w || ny >= m.h) continue;
                        if (!m.at(ny, nx) || label.at(ny, nx)) continue;
                        label.at(ny, nx) = 1;
                        queue.emplace_back(nx, ny);
                    }
            }
            if (area > best_area) {
                best_area = area;
                best = comp;
            }
        }
    if (best_area == 0) throw DegenerateInput("largest_component: empty mask");
    return best;
}

// Moore-neighbour boundary trace of a single 8-connected component. The
// returned sequence is the closed tour; its length is the contour length in
// pixel steps (156 for a filled 40x40 square).
inline std::vector<std::pair<int, int>> trace_boundary(const Mask& m) {
    static constexpr int dx8[8] = {-1, -1, 0, 1, 1, 1, 0, -1};
    static constexpr int dy8[8] = {0, -1, -1, -1, 0, 1, 1, 1};  // clockwise from W

    int sx = -1, sy = -1;
    for (int y = 0; y < m.h && sy < 0; ++y)
        for (int x = 0; x < m.w; ++x)
            if (m.at(y, x)) {
                sx = x;
                sy = y;
                break;
            }
    if (sy < 0) throw DegenerateInput("trace_boundary: empty mask");

    auto fg = [&m](int x, int y) {
        return x >= 0 && y >= 0 && x < m.w && y < m.h && m.at(y, x) != 0;
    };

    std::vector<std::pair<int, int>> contour{{sx, sy}};
    int cx = sx, cy = sy;
    int bx = sx - 1, by = sy;  // west of the topmost-leftmost pixel is background
    const int start_bx = bx, start_by = by;
    const size_t cap = 4 * m.v.size() + 8;
    while (contour.size() < cap) {
        int bi = -1;
        for (int k = 0; k < 8; ++k)
            if (cx + dx8[k] == bx && cy + dy8[k] == by) {
                bi = k;
                break;
            }
        int found = -1;
        for (int s = 1; s <= 8; ++s) {
            const int k = (bi + s) % 8;
            const int nx = cx + dx8[k], ny = cy + dy8[k];
            if (fg(nx, ny)) {
                found = k;
                break;
            }
            bx = nx;
            by = ny;
        }
        if (found < 0) break;  // isolated pixel
        cx += dx8[found];
        cy += dy8[found];
        // The (position, backtrack) pair fully determines the walk, so
        // recurrence of the initial pair closes the tour.
        if (cx == sx && cy == sy && bx == start_bx && by == start_by) break;
        contour.emplace_back(cx, cy);
    }
    return contour;
}

inline void draw_line(Mask& m, int x0, int y0, int x1, int y1) {
    const int dx = std::abs(x1 - x0), dy = -std::abs(y1 - y0);
    const int stepx = x0 < x1 ? 1 : -1, stepy = y0 < y1 ? 1 : -1;
    int err = dx + dy;
    for (;;) {
        if (x0 >= 0 && y0 >= 0 && x0 < m.w && y0 < m.h) m.at(y0, x0) = 1;
        if (x0 == x1 && y0 == y1) break;
        const int e2 = 2 * err;
        if (e2 >= dy) {
            err += dy;
            x0 += stepx;
        }
        if (e2 <= dx) {
            err += dx;
            y0 += stepy;
        }
    }
}

}  // namespace detail

// Even-odd scanline fill at pixel centres, plus the outline itself so thin
// polygons stay non-empty.
inline Mask rasterize_polygon(const std::vector<std::pair<int, int>>& verts, int h, int w) {
    if (verts.size() < 3) throw InvalidArgument("rasterize_polygon: need at least 3 vertices");
    Mask out(h, w);
    const size_t n = verts.size();
    std::vector<double> xs;
    for (int y = 0; y < h; ++y) {
        const double cy = y + 0.5;
        xs.clear();
        for (size_t i = 0; i < n; ++i) {
            const auto [x0, y0] = verts[i];
            const auto [x1, y1] = verts[(i + 1) % n];
            if ((y0 <= cy) == (y1 <= cy)) continue;  // also skips horizontal edges
            xs.push_back(x0 + (cy - y0) * (x1 - x0) / static_cast<double>(y1 - y0));
        }
        std::sort(xs.begin(), xs.end());
        for (size_t i = 0; i + 1 < xs.size(); i += 2)
            for (int x = std::max(0, static_cast<int>(std::ceil(xs[i] - 0.5)));
                 x < w && x + 0.5 < xs[i + 1]; ++x)
                out.at(y, x) = 1;
    }
    for (size_t i = 0; i < n; ++i) {
        const auto [x0, y0] = verts[i];
        const auto [x1, y1] = verts[(i + 1) % n];
        detail::draw_line(out, x0, y0, x1, y1);
    }
    return out;
}

// Traced contour length of the largest component, in pixel steps. Exposed
// because the polygon vertex-count law is defined against this measure.
inline int mask_perimeter(const Mask& m) {
    return static_cast<int>(detail::trace_boundary(detail::largest_component(m)).size());
}

// Coarse polygon prompt: max(3, round(P/20)) vertices subsampled uniformly
// along the traced boundary. Multi-component masks coarsen the largest
// component, since one polygon cannot represent disjoint regions.
inline CoarseMaskPrompt polygon_coarsen(const Mask& m) {
    const Mask comp = detail::largest_component(m);
    const auto contour = detail::trace_boundary(comp);
    const int p = static_cast<int>(contour.size());
    const int n_vertices = std::max(3, static_cast<int>(std::llround(p / 20.0)));
    CoarseMaskPrompt out;
    for (int k = 0; k < n_vertices; ++k)
        out.vertices.push_back(contour[static_cast<size_t>(k) * contour.size() / n_vertices]);
    out.rasterized = rasterize_polygon(out.vertices, m.h, m.w);
    return out;
}

// ---- automated prompting (grid + filtering + NMS) ----

// Regular lattice with the given spacing, offset by half a stride, row-major.
inline std::vector<std::pair<int, int>> grid_points(int h, int w, int stride = 16) {
    if (h < stride || w < stride)
        throw InvalidArgument("grid_points: image smaller than stride");
    std::vector<std::pair<int, int>> pts;
    const int ny = h / stride, nx = w / stride;
    for (int i = 0; i < ny; ++i)
        for (int j = 0; j < nx; ++j)
            pts.emplace_back(stride / 2 + j * stride, stride / 2 + i * stride);
    return pts;
}

// IoU between the binarizations of one logit map at thresholds +offset and
// -offset. Insensitive maps score 1, maps that flip wholesale score 0.
inline double stability_score(const Tensor& logits, double offset) {
    if (!logits.all_finite()) throw InvalidArgument("stability_score: non-finite logits");
    size_t hi = 0, lo = 0;
    for (double x : logits.v) {
        hi += (x > offset);
        lo += (x > -offset);
    }
    if (lo == 0) return 1.0;  // both binarizations empty
    return static_cast<double>(hi) / static_cast<double>(lo);
}

struct FilterThresholds {
    double pred_iou = 0.88;
    double stability = 0.95;
    double stability_offset = 1.0;
};

// Keeps indices whose predicted-IoU and stability both clear their
// thresholds. Parallel inputs; returns indices so callers can filter any
// side array the same way.
inline std::vector<size_t> filter_masks(const std::vector<Mask>& masks,
                                        const std::vector<double>& pred_iou_scores,
                                        const std::vector<Tensor>& logits,
                                        const FilterThresholds& thr = {}) {
    if (masks.size() != pred_iou_scores.size() || masks.size() != logits.size())
        throw InvalidArgument("filter_masks: parallel lists required");
    std::vector<size_t> kept;
    for (size_t i = 0; i < masks.size(); ++i)
        if (pred_iou_scores[i] >= thr.pred_iou &&
            stability_score(logits[i], thr.stability_offset) >= thr.stability)
            kept.push_back(i);
    return kept;
}

// Greedy score-descending NMS on mask IoU. Ties break on lower index so the
// result is deterministic. Returns kept indices in acceptance order.
inline std::vector<size_t> nms_masks(const std::vector<Mask>& masks,
                                     const std::vector<double>& scores, double iou_threshold) {
    if (masks.size() != scores.size())
        throw InvalidArgument("nms_masks: parallel lists required");
    std::vector<size_t> order(masks.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::stable_sort(order.begin(), order.end(),
                     [&scores](size_t a, size_t b) { return scores[a] > scores[b]; });
    std::vector<size_t> kept;
    for (size_t i : order) {
        bool suppressed = false;
        for (size_t k : kept)
            if (mask_iou(masks[i], masks[k]) > iou_threshold) {
                suppressed = true;
                break;
            }
        if (!suppressed) kept.push_back(i);
    }
    return kept;
}

// Builds the fixed prompt set shared by all branches. Degenerate masks are
// skipped and counted rather than failing the whole set.
inline PromptSet prompts_from_masks(const std::vector<Mask>& masks, PromptType type, Rng& rng) {
    if (masks.empty()) throw InvalidArgument("prompts_from_masks: empty mask list");
    PromptSet set;
    set.type = type;
    set.source = "weak-label";
    for (const auto& m : masks) {
        try {
            switch (type) {
                case PromptType::box: set.prompts.emplace_back(box_from_mask(m)); break;
                case PromptType::points: set.prompts.emplace_back(sample_points(m, rng)); break;
                case PromptType::coarse_mask: set.prompts.emplace_back(polygon_coarsen(m)); break;
            }
        } catch (const DegenerateInput&) {
            ++set.skipped;
        }
    }
    return set;
}

struct AutomatedPromptResult {
    std::vector<Mask> masks;  // surviving initial-stage masks
    PromptSet prompts;
    int generated = 0;
    int kept_after_filter = 0;
};

// Fully automated prompting: probe a point lattice, binarize each response,
// filter on quality scores, suppress near-duplicates, then regenerate clean
// prompts from the surviving masks. `decode` maps a single positive point to
// a [H,W] logit map. The backend here has no predicted-IoU head, so the
// stability score doubles as the IoU estimate — a declared surrogate, not an
// equivalence.
template <typename DecodeFn>
AutomatedPromptResult automated_prompts(int h, int w, DecodeFn&& decode, Rng& rng,
                                        PromptType regenerate_as = PromptType::box,
                                        int stride = 16, FilterThresholds thr = {},
                                        double nms_iou = 0.7) {
    std::vector<Mask> masks;
    std::vector<Tensor> logit_maps;
    std::vector<double> scores;
    for (const auto& [x, y] : grid_points(h, w, stride)) {
        Tensor logits = decode(x, y);
        if (logits.ndim() != 2 || logits.dim(0) != h || logits.dim(1) != w)
            throw InvalidArgument("automated_prompts: decode returned wrong shape");
        masks.push_back(binarize_logits(logits));
        scores.push_back(stability_score(logits, thr.stability_offset));
        logit_maps.push_back(std::move(logits));
    }
    AutomatedPromptResult res;
    res.generated = static_cast<int>(masks.size());

    const auto filtered = filter_masks(masks, scores, logit_maps, thr);
    std::vector<Mask> fmasks;
    std::vector<double> fscores;
    for (size_t i : filtered) {
        if (masks[i].empty_fg()) continue;  // a mask with no pixels prompts nothing
        fmasks.push_back(masks[i]);
        fscores.push_back(scores[i]);
    }
    res.kept_after_filter = static_cast<int>(fmasks.size());
    if (fmasks.empty()) {
        res.prompts.type = regenerate_as;
        res.prompts.source = "automated";
        return res;
    }

    for (size_t i : nms_masks(fmasks, fscores, nms_iou)) res.masks.push_back(fmasks[i]);
    res.prompts = prompts_from_masks(res.masks, regenerate_as, rng);
    res.prompts.source = "automated";
    return res;
}

// ---- text serialization ----

inline std::string to_text(const PromptSet& set) {
    std::ostringstream os;
    os << "# source " << set.source << "\n# type " << prompt_type_name(set.type) << "\n";
    for (const auto& p : set.prompts) {
        if (const auto* b = std::get_if<BoxPrompt>(&p)) {
            os << "box " << b->x_min << ' ' << b->y_min << ' ' << b->x_max << ' ' << b->y_max
               << '\n';
        } else if (const auto* pt = std::get_if<PointPrompt>(&p)) {
            os << "points";
            for (const auto& [x, y] : pt->positives) os << ' ' << x << ' ' << y;
            for (const auto& [x, y] : pt->negatives) os << ' ' << x << ' ' << y;
            os << '\n';
        } else if (const auto* poly = std::get_if<CoarseMaskPrompt>(&p)) {
            os << "poly";
            for (const auto& [x, y] : poly->vertices) os << ' ' << x << ' ' << y;
            os << '\n';
        }
    }
    return os.str();
}

// Parses the line format written by to_text. Needs the image size to
// re-rasterize polygon prompts.
inline PromptSet parse_prompt_set(const std::string& text, int h, int w) {
    PromptSet set;
    set.source = "weak-label";
    bool type_seen = false;
    std::istringstream is(text);
    std::string line;
    int lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        if (line.empty()) continue;
        std::istringstream ls(line);
        std::string tag;
        ls >> tag;
        const auto fail = [&](const std::string& why) {
            throw ParseError("prompt set line " + std::to_string(lineno) + ": " + why);
        };
        if (tag == "#") {
            std::string key;
            ls >> key;
            if (key == "source") ls >> set.source;
            continue;
        }
        std::vector<int> nums;
        for (int v; ls >> v;) nums.push_back(v);
        if (!ls.eof()) fail("non-integer field");
        if (tag == "box") {
            if (nums.size() != 4) fail("box needs 4 coordinates");
            BoxPrompt b{nums[0], nums[1], nums[2], nums[3]};
            if (b.x_min > b.x_max || b.y_min > b.y_max) fail("box corners out of order");
            if (b.x_min < 0 || b.y_min < 0 || b.x_max >= w || b.y_max >= h)
                fail("box outside image bounds");
            set.prompts.emplace_back(b);
            if (!type_seen) set.type = PromptType::box;
        } else if (tag == "points") {
            if (nums.size() != 20) fail("points needs 5 positive and 5 negative pairs");
            PointPrompt p;
            for (int i = 0; i < 5; ++i) p.positives.emplace_back(nums[2 * i], nums[2 * i + 1]);
            for (int i = 5; i < 10; ++i) p.negatives.emplace_back(nums[2 * i], nums[2 * i + 1]);
            set.prompts.emplace_back(std::move(p));
            if (!type_seen) set.type = PromptType::points;
        } else if (tag == "poly") {
            if (nums.size() < 6 || nums.size() % 2 != 0) fail("poly needs >= 3 vertex pairs");
            CoarseMaskPrompt poly;
            for (size_t i = 0; i + 1 < nums.size(); i += 2)
                poly.vertices.emplace_back(nums[i], nums[i + 1]);
            poly.rasterized = rasterize_polygon(poly.vertices, h, w);
            set.prompts.emplace_back(std::move(poly));
            if (!type_seen) set.type = PromptType::coarse_mask;
        } else {
            fail("unknown record '" + tag + "'");
        }
        type_seen = true;
    }
    return set;
}

}  // namespace segadapt
