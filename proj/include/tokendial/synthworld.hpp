#pragma once

// Procedural moving-shape videos with analytic oracle measurements.

#include "tokendial/video.hpp"

#include <nlohmann/json.hpp>

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace tokendial::synth {

enum class ShapeKind { disk, square };

struct Vec2 {
    double x = 0.0;
    double y = 0.0;
};

inline constexpr int kNumHues = 4;
inline constexpr std::array<std::array<double, 3>, kNumHues> kPalette{{
    {1.0, 0.2, 0.2},   // red
    {0.2, 1.0, 0.2},   // green
    {0.3, 0.4, 1.0},   // blue
    {1.0, 1.0, 0.2},   // yellow
}};

struct SceneParams {
    ShapeKind shape_kind = ShapeKind::disk;
    double brightness = 0.8;
    double radius = 0.15;  // fraction of frame height
    Vec2 velocity;         // frame fractions per frame
    int hue_index = 0;
    double background_level = 0.1;
    Vec2 start_position{0.5, 0.5};

    void validate() const;
};

// Fixed toy vocabulary. Attribute words exist but the dataset never emits them.
namespace vocab {
inline constexpr int pad = 0;
inline constexpr std::array<const char*, 11> words{"<pad>", "disk", "square", "red", "green", "blue",
                                                   "yellow", "bright", "dim", "fast", "slow"};
inline constexpr int size = static_cast<int>(words.size());
int lookup(const std::string& word);  // throws not_found
inline int shape_token(ShapeKind k) { return k == ShapeKind::disk ? 1 : 2; }
inline int hue_token(int hue) { return 3 + hue; }
}  // namespace vocab

struct PromptCond {
    static constexpr int max_len = 4;
    std::vector<int> token_ids;
    int concept_token_index = 0;

    void validate() const;
    std::string text() const;
    bool operator==(const PromptCond&) const = default;
};

// "red disk" style prompt; concept token is the shape word.
PromptCond prompt_for(ShapeKind shape, int hue);
// Whitespace-separated words from the vocabulary; concept token = first shape word
// (or position 0 when none is present).
PromptCond parse_prompt(const std::string& text);

VideoTensor render_video(const SceneParams& params, int frames, int height, int width);

// Per-pixel "value" (max over channels); foreground = pixels above the midpoint
// between the frame median and the frame maximum.
double oracle_brightness(const VideoTensor& v);
// Mean per-frame displacement of the foreground centroid, in pixels.
double oracle_displacement(const VideoTensor& v);
// Foreground centroid per frame in pixel coordinates (x, y).
std::vector<Vec2> oracle_centroids(const VideoTensor& v);

struct Range {
    double lo = 0.0;
    double hi = 1.0;
};

struct SceneDistribution {
    Range brightness{0.3, 1.0};
    Range radius{0.14, 0.2};
    Range speed{0.0, 0.03};
    Range background{0.05, 0.15};
    double position_jitter = 0.12;
    bool horizontal_only = true;
    // Place the trajectory midpoint at frame centre (otherwise centre at t=0).
    bool center_mid_clip = true;
    std::vector<ShapeKind> shapes{ShapeKind::disk, ShapeKind::square};
    int hues = kNumHues;
    VideoShape dims{3, 8, 32, 32};
    int fps = 8;

    void validate() const;
};

SceneParams sample_scene(const SceneDistribution& dist, std::mt19937_64& rng);

struct Clip {
    std::string id;
    VideoTensor video;
    PromptCond prompt;
    SceneParams params;
};

std::vector<Clip> make_dataset(const SceneDistribution& dist, int count, std::uint64_t seed);

nlohmann::json to_json(const SceneParams& p);
SceneParams scene_from_json(const nlohmann::json& j);
nlohmann::json to_json(const SceneDistribution& d);
SceneDistribution distribution_from_json(const nlohmann::json& j);

// TDVR clip files: 16-byte header then little-endian f32 in (C,F,H,W) order.
void write_tdvr(const std::filesystem::path& path, const VideoTensor& v);
VideoTensor read_tdvr(const std::filesystem::path& path);

// Directory with index.jsonl (one record per clip) and one TDVR file per clip.
void save_dataset(const std::filesystem::path& dir, const std::vector<Clip>& clips);
std::vector<Clip> load_dataset(const std::filesystem::path& dir);

}  // namespace tokendial::synth
