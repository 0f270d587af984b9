#pragma once

// End-to-end recipes shared by the CLI, the service and the acceptance suite:
// dataset, frozen backbone, encoder and attribute offsets, each cached on disk
// under a digest of the configuration that produced it.

#include "tokendial/backbone.hpp"
#include "tokendial/perception.hpp"
#include "tokendial/trainer.hpp"

#include <nlohmann/json.hpp>

#include <filesystem>
#include <functional>
#include <string>
#include <vector>

namespace tokendial::pipe {

struct DataConfig {
    synth::SceneDistribution dist;
    int clips = 768;
    // Extra clips at a larger resolution and length so the backbone sees both.
    int large_clips = 256;
    VideoShape large_dims{3, 12, 48, 48};
    std::uint64_t seed = 11;

    nlohmann::json to_json() const;
};

// Offset recipes: "brightness" (appearance, exemplar direction) and
// "motion" (motion-magnitude scaling).
struct OffsetRecipe {
    std::string attribute = "brightness";
    train::TrainOffsetConfig train;
    train::RefineConfig refine;
    train::LossConfig loss;  // d_tgt filled from exemplars for appearance recipes
    int exemplars = 16;
    double exemplar_high = 0.95;
    double exemplar_low = 0.35;

    nlohmann::json to_json() const;
};

OffsetRecipe default_recipe(const std::string& attribute);

struct PipelineConfig {
    DataConfig data;
    bb::BackboneConfig backbone;
    bb::BackboneTrainConfig backbone_train;
    std::uint64_t backbone_seed = 1;
    perc::EncoderConfig encoder;
    perc::EncoderTrainConfig encoder_train;
    std::uint64_t encoder_seed = 2;

    nlohmann::json to_json() const;
};

using LogFn = std::function<void(const std::string&)>;

// Clips at the base dimensions only (offset training, encoder training).
std::vector<synth::Clip> base_clips(const DataConfig& cfg);
// Base clips followed by the large-resolution clips (backbone training).
std::vector<synth::Clip> backbone_clips(const DataConfig& cfg);

// Paired exemplar renders differing only in brightness.
perc::DirectionVector brightness_direction(const perc::AppearanceEncoder& enc, const synth::SceneDistribution& dist,
                                           int pairs, double high, double low, std::uint64_t seed);

class ArtifactStore {
public:
    explicit ArtifactStore(std::filesystem::path dir, PipelineConfig cfg = {}, LogFn log = {});

    const PipelineConfig& config() const { return cfg_; }
    const std::filesystem::path& dir() const { return dir_; }

    // Loaded from cache when present, otherwise trained and written.
    bb::Backbone backbone();
    perc::AppearanceEncoder encoder();
    off::TokenOffsetSet offset(const OffsetRecipe& recipe);
    // Appearance recipes resolve d_tgt against the store's encoder.
    train::LossConfig resolved_loss(const OffsetRecipe& recipe);

    std::filesystem::path backbone_path() const;
    std::filesystem::path encoder_path() const;
    std::filesystem::path offset_path(const OffsetRecipe& recipe) const;

private:
    std::filesystem::path dir_;
    PipelineConfig cfg_;
    LogFn log_;
    std::vector<synth::Clip> base_;

    const std::vector<synth::Clip>& base_data();
    void note(const std::string& s) const;
};

std::string short_digest(const nlohmann::json& j);

// name:strength[:box(x0,y0,x1,y1)[@t0-t1]|attn(token)]
struct StrengthSpec {
    std::string name;
    double strength = 0.0;
    off::MaskSpec mask;
};
StrengthSpec parse_strength_spec(const std::string& text);

}  // namespace tokendial::pipe
