#pragma once

// Offset learning against a frozen backbone: multi-step posterior refinement with a
// straight-through gradient path, appearance (direction matching + perceptual)
// and motion (self-scaled feature flow + first-frame) objectives.

#include "tokendial/backbone.hpp"
#include "tokendial/featflow.hpp"
#include "tokendial/offsets.hpp"
#include "tokendial/perception.hpp"

#include <functional>
#include <map>
#include <optional>

namespace tokendial::train {

struct RefineConfig {
    int K = 4;
    double t_min = 0.3;
    double t_max = 0.9;

    void validate() const;
    nlohmann::json to_json() const;
};

struct LossConfig {
    off::LossKind kind = off::LossKind::appearance;
    double lambda_a = 0.5;
    double lambda_m = 5.0;
    double gamma = 2.0;
    std::optional<perc::DirectionVector> d_tgt;

    void validate() const;
    double lambda() const { return kind == off::LossKind::appearance ? lambda_a : lambda_m; }
    nlohmann::json to_json() const;
};

// Trainable deltas and where they are injected.
struct OffsetParams {
    std::map<int, ag::Var> deltas;  // layer -> 1 x d
    bb::InjectionPoint point = bb::InjectionPoint::post_block;
    std::vector<double> mask;       // per-token gate; empty = uniform
};

struct RefinedPair {
    ag::Var with;        // straight-through: value = refined, gradient = initial estimate's
    ag::Var without;     // constant
    ag::Mat init_with;   // one-step estimate values
    ag::Mat fine_with;   // refined values (== init_with when K = 0)
};

// Shared noise `eps` for both branches; unroll uses the conditional velocity.
RefinedPair refined_estimate(const bb::Backbone& model, const VideoTensor& x0, double t, const synth::PromptCond& c,
                             const OffsetParams& offset, const RefineConfig& cfg, const ag::Mat& eps);

struct LossParts {
    ag::Var total;
    double main = 0.0;  // cosine term or L_mot
    double reg = 0.0;   // perceptual term or L_ff
};

// (1 - cos(d_pred, d_tgt)) + lambda_a * perceptual_distance(with, without).
// When ||d_pred|| < 1e-8 the cosine term takes the value 1 with gradient -d_tgt.
LossParts appearance_loss(const perc::AppearanceEncoder& enc, const ag::Var& with, const ag::Var& without,
                          const VideoShape& shape, const LossConfig& cfg);

// Cosine term on precomputed embeddings (useful for testing the convention in isolation).
ag::Var direction_loss(const ag::Var& d_pred, const ag::Mat& d_tgt);

// L_mot + lambda_m * L_ff with L_mot = mean over valid cells of ||m - gamma sg(m)||^2.
LossParts motion_loss(const ag::Var& with, const VideoShape& shape, const LossConfig& cfg,
                      const flow::LkConfig& lk = {});

struct TrainOffsetConfig {
    std::string attribute_name = "attribute";
    bb::InjectionConfig injection{bb::InjectionPoint::post_block, {0, 1, 2, 3, 4, 5}};
    int steps = 300;
    int batch = 4;
    double lr = 1e-3;
    double weight_decay = 0.0;
    std::uint64_t seed = 0;
    std::filesystem::path diagnostics_dir;  // dump target on divergence (optional)

    nlohmann::json to_json() const;
};

struct OffsetLogEntry {
    int step = 0;
    double loss = 0.0;
    double main = 0.0;
    double reg = 0.0;
    double grad_norm = 0.0;
};

struct TrainOffsetResult {
    off::TokenOffsetSet offset;
    std::vector<OffsetLogEntry> log;
    std::string backbone_digest;
    std::string encoder_digest;
};

using OffsetLogFn = std::function<void(const OffsetLogEntry&)>;

// Only the deltas are updated; backbone and encoder digests are checked before and
// after and a mismatch raises.
TrainOffsetResult train_offset(const bb::Backbone& model, const perc::AppearanceEncoder& enc,
                               const std::vector<synth::Clip>& data, const LossConfig& loss_cfg,
                               const RefineConfig& refine_cfg, const TrainOffsetConfig& cfg,
                               const OffsetLogFn& log = {});

// Text log line: step, loss, components, grad norm.
std::string format_log(const OffsetLogEntry& e);

}  // namespace tokendial::train
