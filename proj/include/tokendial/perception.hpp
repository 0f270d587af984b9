#pragma once

// Frozen perception stack: a small learned video appearance encoder, handcrafted
// per-frame patch features, exemplar-based target directions with optional
// debiasing, and a feature-cosine perceptual distance.

#include "tokendial/autograd.hpp"
#include "tokendial/synthworld.hpp"
#include "tokendial/video.hpp"

#include <nlohmann/json.hpp>

#include <array>
#include <filesystem>
#include <functional>
#include <vector>

namespace tokendial::perc {

struct EncoderConfig {
    int d_e = 64;
    int conv1 = 16;
    int conv2 = 32;
    int hidden = 64;

    nlohmann::json to_json() const;
    static EncoderConfig from_json(const nlohmann::json& j);
};

struct EncoderTrainConfig {
    int steps = 1500;
    int batch = 8;
    double lr = 2e-3;
    std::uint64_t seed = 0;

    nlohmann::json to_json() const;
};

// Video -> R^{d_E}. Input per frame pair is the frame and its forward difference,
// through two stride-2 3x3 convolutions, global mean pooling and an MLP.
class AppearanceEncoder {
public:
    AppearanceEncoder() = default;
    AppearanceEncoder(EncoderConfig cfg, std::uint64_t seed);

    const EncoderConfig& config() const { return cfg_; }
    bool trained() const { return trained_; }
    int dim() const { return cfg_.d_e; }

    ag::Var encode(const ag::Var& video, const VideoShape& shape) const;  // 1 x d_E
    ag::Mat encode(const VideoTensor& v) const;
    // Auxiliary regression head (brightness, radius, speed); only meaningful after training.
    ag::Mat predict_attributes(const VideoTensor& v) const;

    std::vector<ag::Var>& parameters() { return params_; }
    const std::vector<ag::Var>& parameters() const { return params_; }
    std::string digest() const;

    nlohmann::json training_meta;

    void save(const std::filesystem::path& path) const;
    static AppearanceEncoder load(const std::filesystem::path& path);

    friend void prepare_appearance_encoder(AppearanceEncoder& enc, const std::vector<synth::Clip>& data,
                                           const EncoderTrainConfig& cfg,
                                           const std::function<void(int, double)>& log);

private:
    EncoderConfig cfg_;
    std::vector<ag::Var> params_;
    std::vector<std::string> names_;
    bool trained_ = false;
    std::array<double, 3> target_mean_{}, target_std_{1.0, 1.0, 1.0};

    ag::Var trunk(const ag::Var& video, const VideoShape& shape) const;
};

// Regression targets used by the auxiliary head.
std::array<double, 3> attribute_targets(const synth::SceneParams& p);

// Trains trunk + auxiliary head, then freezes the trunk. steps == 0 leaves the
// encoder untrained.
void prepare_appearance_encoder(AppearanceEncoder& enc, const std::vector<synth::Clip>& data,
                                const EncoderTrainConfig& cfg, const std::function<void(int, double)>& log = {});

struct DirectionVector {
    ag::Mat v;  // 1 x d_E
    bool normalized = false;
};

DirectionVector target_direction_from_exemplars(const AppearanceEncoder& enc, const std::vector<VideoTensor>& high,
                                                const std::vector<VideoTensor>& low);

struct ExemplarGroup {
    std::vector<VideoTensor> high, low;
};

DirectionVector debias_direction(const AppearanceEncoder& enc, const DirectionVector& d_tgt,
                                 const std::vector<ExemplarGroup>& nuisance, int n_components);
// Same, on precomputed nuisance directions (rows).
DirectionVector debias_direction(const DirectionVector& d_tgt, const ag::Mat& nuisance_dirs, int n_components,
                                 ag::Mat* removed = nullptr);

inline constexpr int kFeatChannels = 6;

struct FrameFeatureGrid {
    int h_p = 0;
    int w_p = 0;
    ag::Mat features;  // D x (h_p * w_p), channel-major; channels: R, G, B, sobel-x, sobel-y, smoothed intensity

    double at(int y, int x, int ch) const { return features(ch, y * w_p + x); }
};

// Linear map from a video's pixels to per-frame feature grids, cached per shape.
struct FeatureOperator {
    VideoShape shape;
    int p_feat = 4;
    int h_p = 0, w_p = 0;
    std::shared_ptr<const ag::SpMat> op;  // (F * D * N) x numel

    int cells() const { return h_p * w_p; }
};

const FeatureOperator& feature_operator(const VideoShape& shape, int p_feat = 4);

// Features of every frame: F x (D * N), row f channel-major.
ag::Var video_features(const ag::Var& video, const VideoShape& shape, int p_feat = 4);
FrameFeatureGrid frame_features(const ag::Mat& frame, int height, int width, int p_feat = 4);  // frame C x (H*W)
std::vector<FrameFeatureGrid> frame_features(const VideoTensor& v, int p_feat = 4);

// Mean over frames of (1 - cos) between flattened feature grids.
double perceptual_distance(const VideoTensor& a, const VideoTensor& b);
ag::Var perceptual_distance(const ag::Var& a, const ag::Var& b, const VideoShape& shape);
// Single-frame variant.
double perceptual_distance_frame(const VideoTensor& a, const VideoTensor& b, int frame);

}  // namespace tokendial::perc
