#pragma once

// Procedural grid-world scenes on a 256x256 canvas and their encoding into
// the 64-token visual sequence (8x8 patches of 32px, patch-center rule).

#include <algorithm>
#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "twist/errors.hpp"
#include "twist/rng.hpp"

#include "json.hpp"

namespace twist {

inline constexpr int kCanvas = 256;
inline constexpr int kPatchSize = 32;
inline constexpr int kPatchGrid = 8; // 8x8 patches -> 64 visual tokens
inline constexpr int kVisualTokens = kPatchGrid * kPatchGrid;
inline constexpr int kMinSide = 24;
inline constexpr int kMaxSide = 128;
inline constexpr double kMaxPairIou = 0.3;

inline const std::array<std::string, 4>& categories() {
    static const std::array<std::string, 4> v = {"circle", "square", "triangle", "star"};
    return v;
}

inline const std::array<std::string, 6>& colors() {
    static const std::array<std::string, 6> v = {"red", "green", "blue", "yellow", "orange", "purple"};
    return v;
}

inline int category_index(const std::string& s) {
    const auto& c = categories();
    for (int i = 0; i < static_cast<int>(c.size()); ++i)
        if (c[static_cast<std::size_t>(i)] == s) return i;
    return -1;
}

inline int color_index(const std::string& s) {
    const auto& c = colors();
    for (int i = 0; i < static_cast<int>(c.size()); ++i)
        if (c[static_cast<std::size_t>(i)] == s) return i;
    return -1;
}

struct BBox {
    int x1 = 0, y1 = 0, x2 = 0, y2 = 0;

    bool valid() const { return 0 <= x1 && x1 < x2 && x2 <= kCanvas && 0 <= y1 && y1 < y2 && y2 <= kCanvas; }
    long area() const { return static_cast<long>(x2 - x1) * (y2 - y1); }
    double cx() const { return 0.5 * (x1 + x2); }
    double cy() const { return 0.5 * (y1 + y2); }
    bool contains(int px, int py) const { return x1 <= px && px < x2 && y1 <= py && py < y2; }
    bool operator==(const BBox& o) const = default;
};

inline double iou(const BBox& a, const BBox& b) {
    long ix = std::max(0, std::min(a.x2, b.x2) - std::max(a.x1, b.x1));
    long iy = std::max(0, std::min(a.y2, b.y2) - std::max(a.y1, b.y1));
    long inter = ix * iy;
    long uni = a.area() + b.area() - inter;
    return uni > 0 ? static_cast<double>(inter) / static_cast<double>(uni) : 0.0;
}

enum class SizeBucket { Small, Medium, Large };

// Bucket thresholds in pixel area: [0,1024) small, [1024,9216) medium,
// [9216,inf) large. The 96x96 boundary belongs to large, 32x32 to medium.
inline SizeBucket size_bucket(const BBox& box) {
    long a = box.area();
    if (a < 1024) return SizeBucket::Small;
    if (a < 9216) return SizeBucket::Medium;
    return SizeBucket::Large;
}

struct SceneObject {
    std::string category;
    std::string color;
    BBox box;
    bool operator==(const SceneObject& o) const = default;
};

struct Scene {
    std::uint64_t seed = 0;
    std::vector<SceneObject> objects;
    bool operator==(const Scene& o) const = default;

    const SceneObject* find(const std::string& color, const std::string& category) const {
        for (const auto& obj : objects)
            if (obj.color == color && obj.category == category) return &obj;
        return nullptr;
    }
};

// Deterministic in seed. Object count uniform in [1, max_objects]; pairwise
// IoU <= 0.3; every (category,color) pair unique within the scene.
inline Scene generate_scene(std::uint64_t seed, int max_objects) {
    if (max_objects < 1 || max_objects > 4)
        throw ArgError("generate_scene: max_objects must be in [1,4]");
    Pcg32 rng(seed, 0x5ce9e5u);
    Scene scene;
    scene.seed = seed;
    int n = 1 + static_cast<int>(rng.bounded(static_cast<std::uint32_t>(max_objects)));
    for (int k = 0; k < n; ++k) {
        bool placed = false;
        for (int attempt = 0; attempt < 1000 && !placed; ++attempt) {
            SceneObject obj;
            obj.category = categories()[rng.bounded(4)];
            obj.color = colors()[rng.bounded(6)];
            int w = kMinSide + static_cast<int>(rng.bounded(kMaxSide - kMinSide + 1));
            int h = kMinSide + static_cast<int>(rng.bounded(kMaxSide - kMinSide + 1));
            obj.box.x1 = static_cast<int>(rng.bounded(static_cast<std::uint32_t>(kCanvas - w + 1)));
            obj.box.y1 = static_cast<int>(rng.bounded(static_cast<std::uint32_t>(kCanvas - h + 1)));
            obj.box.x2 = obj.box.x1 + w;
            obj.box.y2 = obj.box.y1 + h;
            bool ok = true;
            for (const auto& other : scene.objects) {
                if (other.category == obj.category && other.color == obj.color) { ok = false; break; }
                if (iou(other.box, obj.box) > kMaxPairIou) { ok = false; break; }
            }
            if (ok) {
                scene.objects.push_back(std::move(obj));
                placed = true;
            }
        }
        if (!placed)
            throw GenError("generate_scene: placement failed after 1000 attempts (seed " +
                           std::to_string(seed) + ")");
    }
    return scene;
}

// Visual-token vocabulary, local ids: 0 is background, 1+cat*6+color is the
// (category,color) patch token. Offset into the full vocabulary elsewhere.
inline constexpr int kPatchTokenCount = 1 + 4 * 6;

inline int patch_token_local(int cat_idx, int color_idx) { return 1 + cat_idx * 6 + color_idx; }

// Maps the scene to 64 patch-token ids (row-major). Each patch takes the
// token of the first listed object whose box contains the patch center, else
// background (local id 0).
inline std::vector<int> encode_scene(const Scene& scene) {
    std::vector<int> tokens(kVisualTokens, 0);
    for (int row = 0; row < kPatchGrid; ++row) {
        for (int col = 0; col < kPatchGrid; ++col) {
            int cx = col * kPatchSize + kPatchSize / 2;
            int cy = row * kPatchSize + kPatchSize / 2;
            for (const auto& obj : scene.objects) {
                if (obj.box.contains(cx, cy)) {
                    tokens[static_cast<std::size_t>(row * kPatchGrid + col)] =
                        patch_token_local(category_index(obj.category), color_index(obj.color));
                    break;
                }
            }
        }
    }
    return tokens;
}

// --- JSON (dataset schema: {"seed":u64,"objects":[{"cat","color","box":[..]}]})

inline nlohmann::json scene_to_json(const Scene& s) {
    nlohmann::json objs = nlohmann::json::array();
    for (const auto& o : s.objects)
        objs.push_back({{"cat", o.category}, {"color", o.color}, {"box", {o.box.x1, o.box.y1, o.box.x2, o.box.y2}}});
    return nlohmann::json{{"seed", s.seed}, {"objects", std::move(objs)}};
}

inline Scene scene_from_json(const nlohmann::json& j) {
    Scene s;
    try {
        s.seed = j.at("seed").get<std::uint64_t>();
        for (const auto& jo : j.at("objects")) {
            SceneObject o;
            o.category = jo.at("cat").get<std::string>();
            o.color = jo.at("color").get<std::string>();
            const auto& b = jo.at("box");
            if (!b.is_array() || b.size() != 4) throw FormatError("scene: box must be [x1,y1,x2,y2]");
            o.box = {b[0].get<int>(), b[1].get<int>(), b[2].get<int>(), b[3].get<int>()};
            if (!o.box.valid()) throw FormatError("scene: invalid box bounds");
            if (category_index(o.category) < 0) throw FormatError("scene: unknown category " + o.category);
            if (color_index(o.color) < 0) throw FormatError("scene: unknown color " + o.color);
            s.objects.push_back(std::move(o));
        }
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("scene: ") + e.what());
    }
    return s;
}

} // namespace twist
