#include "tokendial/synthworld.hpp"

#include "tokendial/binio.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

namespace tokendial::synth {

namespace {

bool finite2(const Vec2& v) { return std::isfinite(v.x) && std::isfinite(v.y); }

double pixel_value(const VideoTensor& v, int f, int h, int w) {
    double m = v.at(0, f, h, w);
    for (int c = 1; c < v.shape.channels; ++c) m = std::max(m, v.at(c, f, h, w));
    return m;
}

struct FrameSegmentation {
    double background = 0.0;
    double threshold = 0.0;
    std::vector<double> values;
};

FrameSegmentation segment_frame(const VideoTensor& v, int f) {
    const int H = v.shape.height, W = v.shape.width;
    FrameSegmentation s;
    s.values.resize(static_cast<std::size_t>(H) * W);
    for (int h = 0; h < H; ++h)
        for (int w = 0; w < W; ++w) s.values[static_cast<std::size_t>(h) * W + w] = pixel_value(v, f, h, w);
    std::vector<double> sorted = s.values;
    auto mid = sorted.begin() + static_cast<std::ptrdiff_t>(sorted.size() / 2);
    std::nth_element(sorted.begin(), mid, sorted.end());
    s.background = *mid;
    double mx = *std::max_element(s.values.begin(), s.values.end());
    if (mx - s.background < 0.05) {
        throw Error(ErrorCode::no_foreground, "no foreground in frame " + std::to_string(f));
    }
    s.threshold = s.background + 0.5 * (mx - s.background);
    return s;
}

}  // namespace

void SceneParams::validate() const {
    require(std::isfinite(brightness) && std::isfinite(radius) && std::isfinite(background_level) &&
                finite2(velocity) && finite2(start_position),
            ErrorCode::precondition, "scene params must be finite");
    require(brightness >= 0.0 && brightness <= 1.0, ErrorCode::precondition, "brightness outside [0,1]");
    require(background_level >= 0.0 && background_level <= 1.0, ErrorCode::precondition,
            "background_level outside [0,1]");
    require(radius > 0.0 && radius <= 0.5, ErrorCode::precondition, "radius outside (0, 0.5]");
    require(hue_index >= 0 && hue_index < kNumHues, ErrorCode::precondition, "hue_index out of range");
    require(brightness > background_level + 0.05, ErrorCode::precondition,
            "brightness must exceed background_level + 0.05");
}

int vocab::lookup(const std::string& word) {
    for (int i = 0; i < size; ++i)
        if (word == words[static_cast<std::size_t>(i)]) return i;
    throw Error(ErrorCode::not_found, "unknown prompt word '" + word + "'");
}

void PromptCond::validate() const {
    require(!token_ids.empty() && static_cast<int>(token_ids.size()) <= max_len, ErrorCode::precondition,
            "prompt length must be in [1, " + std::to_string(max_len) + "]");
    require(concept_token_index >= 0 && concept_token_index < static_cast<int>(token_ids.size()),
            ErrorCode::precondition, "concept_token_index out of range");
    for (int t : token_ids) require(t >= 0 && t < vocab::size, ErrorCode::precondition, "token id out of range");
}

std::string PromptCond::text() const {
    std::string out;
    for (int t : token_ids) {
        if (t == vocab::pad) continue;
        if (!out.empty()) out += ' ';
        out += vocab::words[static_cast<std::size_t>(t)];
    }
    return out;
}

PromptCond prompt_for(ShapeKind shape, int hue) {
    PromptCond p;
    p.token_ids = {vocab::hue_token(hue), vocab::shape_token(shape), vocab::pad, vocab::pad};
    p.concept_token_index = 1;
    return p;
}

PromptCond parse_prompt(const std::string& text) {
    std::istringstream ss(text);
    std::string w;
    PromptCond p;
    int concept_index = -1;
    while (ss >> w) {
        int id = vocab::lookup(w);
        if (concept_index < 0 && (id == 1 || id == 2)) concept_index = static_cast<int>(p.token_ids.size());
        p.token_ids.push_back(id);
    }
    require(!p.token_ids.empty(), ErrorCode::precondition, "empty prompt");
    require(static_cast<int>(p.token_ids.size()) <= PromptCond::max_len, ErrorCode::precondition,
            "prompt longer than " + std::to_string(PromptCond::max_len) + " tokens");
    while (static_cast<int>(p.token_ids.size()) < PromptCond::max_len) p.token_ids.push_back(vocab::pad);
    p.concept_token_index = std::max(concept_index, 0);
    return p;
}

VideoTensor render_video(const SceneParams& params, int frames, int height, int width) {
    params.validate();
    require(frames >= 2, ErrorCode::precondition, "render_video: frames must be >= 2");
    require(height >= 16 && width >= 16, ErrorCode::precondition, "render_video: height and width must be >= 16");
    VideoTensor v(VideoShape{3, frames, height, width});
    const auto& hue = kPalette[static_cast<std::size_t>(params.hue_index)];
    const double r_px = params.radius * height;
    for (int f = 0; f < frames; ++f) {
        const double px = std::clamp(params.start_position.x + f * params.velocity.x, 0.0, 1.0);
        const double py = std::clamp(params.start_position.y + f * params.velocity.y, 0.0, 1.0);
        const double cx = px * width, cy = py * height;
        for (int h = 0; h < height; ++h) {
            for (int w = 0; w < width; ++w) {
                const double dx = w + 0.5 - cx, dy = h + 0.5 - cy;
                const double dist = params.shape_kind == ShapeKind::disk ? std::hypot(dx, dy)
                                                                         : std::max(std::abs(dx), std::abs(dy));
                // 1 px linear ramp across the boundary.
                const double alpha = std::clamp(r_px - dist + 0.5, 0.0, 1.0);
                for (int c = 0; c < 3; ++c) {
                    v.at(c, f, h, w) = params.background_level * (1.0 - alpha) +
                                       params.brightness * hue[static_cast<std::size_t>(c)] * alpha;
                }
            }
        }
    }
    return v;
}

double oracle_brightness(const VideoTensor& v) {
    require(v.shape.frames >= 1, ErrorCode::precondition, "oracle_brightness: empty video");
    double total = 0.0;
    for (int f = 0; f < v.shape.frames; ++f) {
        FrameSegmentation s = segment_frame(v, f);
        double acc = 0.0;
        int n = 0;
        for (double x : s.values) {
            if (x > s.threshold) {
                acc += x;
                ++n;
            }
        }
        total += acc / n;
    }
    return total / v.shape.frames;
}

std::vector<Vec2> oracle_centroids(const VideoTensor& v) {
    std::vector<Vec2> out;
    const int W = v.shape.width;
    for (int f = 0; f < v.shape.frames; ++f) {
        FrameSegmentation s = segment_frame(v, f);
        double wsum = 0.0, sx = 0.0, sy = 0.0;
        for (std::size_t i = 0; i < s.values.size(); ++i) {
            if (s.values[i] <= s.threshold) continue;
            const double wgt = s.values[i] - s.background;
            const int h = static_cast<int>(i) / W, w = static_cast<int>(i) % W;
            wsum += wgt;
            sx += wgt * (w + 0.5);
            sy += wgt * (h + 0.5);
        }
        out.push_back({sx / wsum, sy / wsum});
    }
    return out;
}

double oracle_displacement(const VideoTensor& v) {
    require(v.shape.frames >= 2, ErrorCode::precondition, "oracle_displacement: needs at least 2 frames");
    auto c = oracle_centroids(v);
    double total = 0.0;
    for (std::size_t f = 1; f < c.size(); ++f) total += std::hypot(c[f].x - c[f - 1].x, c[f].y - c[f - 1].y);
    return total / static_cast<double>(c.size() - 1);
}

void SceneDistribution::validate() const {
    auto ok = [](const Range& r) { return std::isfinite(r.lo) && std::isfinite(r.hi) && r.lo <= r.hi; };
    require(ok(brightness) && ok(radius) && ok(speed) && ok(background), ErrorCode::precondition,
            "distribution ranges must be finite with lo <= hi");
    require(brightness.hi > background.lo + 0.05, ErrorCode::precondition,
            "brightness range cannot clear the background range");
    require(!shapes.empty() && hues >= 1 && hues <= kNumHues, ErrorCode::precondition, "bad shape/hue sets");
    require(dims.frames >= 2 && dims.height >= 16 && dims.width >= 16, ErrorCode::precondition,
            "distribution dims too small");
}

SceneParams sample_scene(const SceneDistribution& dist, std::mt19937_64& rng) {
    auto uni = [&rng](const Range& r) { return std::uniform_real_distribution<double>(r.lo, r.hi)(rng); };
    SceneParams p;
    p.shape_kind = dist.shapes[std::uniform_int_distribution<std::size_t>(0, dist.shapes.size() - 1)(rng)];
    p.hue_index = std::uniform_int_distribution<int>(0, dist.hues - 1)(rng);
    p.radius = uni(dist.radius);
    do {
        p.brightness = uni(dist.brightness);
        p.background_level = uni(dist.background);
    } while (p.brightness <= p.background_level + 0.05);
    const double speed = uni(dist.speed);
    double angle = dist.horizontal_only ? (std::uniform_int_distribution<int>(0, 1)(rng) ? 0.0 : M_PI)
                                        : uni({0.0, 2.0 * M_PI});
    p.velocity = {speed * std::cos(angle), speed * std::sin(angle)};
    if (dist.horizontal_only) p.velocity.y = 0.0;
    const double jx = uni({-dist.position_jitter, dist.position_jitter});
    const double jy = uni({-dist.position_jitter, dist.position_jitter});
    const double lead = dist.center_mid_clip ? 0.5 * (dist.dims.frames - 1) : 0.0;
    p.start_position = {0.5 + jx - lead * p.velocity.x, 0.5 + jy - lead * p.velocity.y};
    return p;
}

std::vector<Clip> make_dataset(const SceneDistribution& dist, int count, std::uint64_t seed) {
    require(count >= 1, ErrorCode::precondition, "make_dataset: count must be >= 1");
    dist.validate();
    std::mt19937_64 rng(seed);
    std::vector<Clip> out;
    out.reserve(static_cast<std::size_t>(count));
    for (int i = 0; i < count; ++i) {
        Clip c;
        char id[32];
        std::snprintf(id, sizeof id, "clip_%05d", i);
        c.id = id;
        c.params = sample_scene(dist, rng);
        c.video = render_video(c.params, dist.dims.frames, dist.dims.height, dist.dims.width);
        c.video.fps = dist.fps;
        c.prompt = prompt_for(c.params.shape_kind, c.params.hue_index);
        out.push_back(std::move(c));
    }
    return out;
}

nlohmann::json to_json(const SceneParams& p) {
    return {{"shape_kind", p.shape_kind == ShapeKind::disk ? "disk" : "square"},
            {"brightness", p.brightness},
            {"radius", p.radius},
            {"velocity", {p.velocity.x, p.velocity.y}},
            {"hue_index", p.hue_index},
            {"background_level", p.background_level},
            {"start_position", {p.start_position.x, p.start_position.y}}};
}

SceneParams scene_from_json(const nlohmann::json& j) {
    SceneParams p;
    p.shape_kind = j.at("shape_kind").get<std::string>() == "disk" ? ShapeKind::disk : ShapeKind::square;
    p.brightness = j.at("brightness").get<double>();
    p.radius = j.at("radius").get<double>();
    p.velocity = {j.at("velocity").at(0).get<double>(), j.at("velocity").at(1).get<double>()};
    p.hue_index = j.at("hue_index").get<int>();
    p.background_level = j.at("background_level").get<double>();
    p.start_position = {j.at("start_position").at(0).get<double>(), j.at("start_position").at(1).get<double>()};
    return p;
}

nlohmann::json to_json(const SceneDistribution& d) {
    auto r = [](const Range& x) { return nlohmann::json::array({x.lo, x.hi}); };
    nlohmann::json shapes = nlohmann::json::array();
    for (auto s : d.shapes) shapes.push_back(s == ShapeKind::disk ? "disk" : "square");
    return {{"brightness", r(d.brightness)},
            {"radius", r(d.radius)},
            {"speed", r(d.speed)},
            {"background", r(d.background)},
            {"position_jitter", d.position_jitter},
            {"horizontal_only", d.horizontal_only},
            {"center_mid_clip", d.center_mid_clip},
            {"shapes", shapes},
            {"hues", d.hues},
            {"dims", {d.dims.channels, d.dims.frames, d.dims.height, d.dims.width}},
            {"fps", d.fps}};
}

SceneDistribution distribution_from_json(const nlohmann::json& j) {
    SceneDistribution d;
    auto r = [&j](const char* k, Range& out) {
        if (j.contains(k)) out = {j.at(k).at(0).get<double>(), j.at(k).at(1).get<double>()};
    };
    r("brightness", d.brightness);
    r("radius", d.radius);
    r("speed", d.speed);
    r("background", d.background);
    if (j.contains("position_jitter")) d.position_jitter = j.at("position_jitter").get<double>();
    if (j.contains("horizontal_only")) d.horizontal_only = j.at("horizontal_only").get<bool>();
    if (j.contains("center_mid_clip")) d.center_mid_clip = j.at("center_mid_clip").get<bool>();
    if (j.contains("shapes")) {
        d.shapes.clear();
        for (const auto& s : j.at("shapes")) d.shapes.push_back(s.get<std::string>() == "disk" ? ShapeKind::disk : ShapeKind::square);
    }
    if (j.contains("hues")) d.hues = j.at("hues").get<int>();
    if (j.contains("dims")) {
        const auto& a = j.at("dims");
        d.dims = {a.at(0).get<int>(), a.at(1).get<int>(), a.at(2).get<int>(), a.at(3).get<int>()};
    }
    if (j.contains("fps")) d.fps = j.at("fps").get<int>();
    return d;
}

void write_tdvr(const std::filesystem::path& path, const VideoTensor& v) {
    std::ofstream os(path, std::ios::binary);
    require(static_cast<bool>(os), ErrorCode::not_found, "cannot open " + path.string() + " for writing");
    binio::put_magic(os, "TDVR");
    binio::put_u16(os, 1);
    binio::put_u16(os, static_cast<std::uint16_t>(v.shape.channels));
    binio::put_u16(os, static_cast<std::uint16_t>(v.shape.frames));
    binio::put_u16(os, static_cast<std::uint16_t>(v.shape.height));
    binio::put_u16(os, static_cast<std::uint16_t>(v.shape.width));
    binio::put_u16(os, 0);
    // Row-major (C*F) x (H*W) storage is exactly C-order (C,F,H,W).
    for (ag::Index i = 0; i < v.data.size(); ++i) binio::put_f32(os, static_cast<float>(v.data.data()[i]));
}

VideoTensor read_tdvr(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    require(static_cast<bool>(is), ErrorCode::not_found, "cannot open " + path.string());
    binio::expect_magic(is, "TDVR");
    const auto version = binio::get_u16(is, "version");
    require(version == 1, ErrorCode::format, "unsupported TDVR version " + std::to_string(version));
    VideoShape s;
    s.channels = binio::get_u16(is, "C");
    s.frames = binio::get_u16(is, "F");
    s.height = binio::get_u16(is, "H");
    s.width = binio::get_u16(is, "W");
    binio::get_u16(is, "pad");
    VideoTensor v(s);
    for (ag::Index i = 0; i < v.data.size(); ++i) v.data.data()[i] = binio::get_f32(is, "frame data");
    return v;
}

void save_dataset(const std::filesystem::path& dir, const std::vector<Clip>& clips) {
    std::filesystem::create_directories(dir);
    std::ofstream index(dir / "index.jsonl");
    require(static_cast<bool>(index), ErrorCode::not_found, "cannot write dataset index in " + dir.string());
    for (const Clip& c : clips) {
        write_tdvr(dir / (c.id + ".tdvr"), c.video);
        nlohmann::json rec{{"id", c.id},
                           {"params", to_json(c.params)},
                           {"prompt_tokens", c.prompt.token_ids},
                           {"concept_token_index", c.prompt.concept_token_index},
                           {"fps", c.video.fps}};
        index << rec.dump() << '\n';
    }
}

std::vector<Clip> load_dataset(const std::filesystem::path& dir) {
    std::ifstream index(dir / "index.jsonl");
    require(static_cast<bool>(index), ErrorCode::not_found, "no dataset index in " + dir.string());
    std::vector<Clip> out;
    std::string line;
    while (std::getline(index, line)) {
        if (line.empty()) continue;
        auto rec = nlohmann::json::parse(line);
        Clip c;
        c.id = rec.at("id").get<std::string>();
        c.params = scene_from_json(rec.at("params"));
        c.prompt.token_ids = rec.at("prompt_tokens").get<std::vector<int>>();
        c.prompt.concept_token_index = rec.at("concept_token_index").get<int>();
        c.video = read_tdvr(dir / (c.id + ".tdvr"));
        c.video.fps = rec.value("fps", 8);
        out.push_back(std::move(c));
    }
    return out;
}

}  // namespace tokendial::synth
