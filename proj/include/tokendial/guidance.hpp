#pragma once

// Inference-time control: classifier-free guidance plus per-edit differential
// velocity terms, attention-derived soft masks and the Euler sampler.
//
//   u = (1 - s_txt) * v(x, null) + s_txt * v(x, c) + sum_j s_edit_j * (v(x, c, D_j) - v(x, c))

#include "tokendial/backbone.hpp"
#include "tokendial/offsets.hpp"

#include <nlohmann/json.hpp>

#include <string>
#include <vector>

namespace tokendial::guide {

struct Edit {
    const off::TokenOffsetSet* offset = nullptr;
    double s_edit = 0.0;
    off::MaskSpec mask;
};

struct MaskExtractionConfig {
    double window = 0.2;      // leading fraction of denoising steps
    std::vector<int> layers;  // empty = middle third of the blocks
    double power = 2.0;
    std::string normalization = "max";  // "max" or "none"

    nlohmann::json to_json() const;
};

struct GuidanceConfig {
    double s_txt = 4.5;
    std::vector<Edit> edits;
    int steps = 32;
    std::uint64_t seed = 0;
    VideoShape shape{3, 8, 32, 32};
    MaskExtractionConfig mask_extraction;
    // Evaluate all edits in one offset-bearing call instead of one call per edit.
    bool joint_edits = false;

    void validate() const;
    nlohmann::json to_json() const;
    std::string digest() const;
};

// Velocity evaluations behind one guided update.
struct GuidedVelocity {
    ag::Mat base;                     // CFG combination
    std::vector<ag::Mat> edit_terms;  // s_edit_j * (v_j - v_c), one per edit (zero matrix when skipped)
    ag::Mat update;                   // base + sum(edit_terms)
    double cfg_norm = 0.0;            // ||v_c - v_null||
    int calls = 0;
};

// resolved_masks[j] holds the resolved gate of edit j.
GuidedVelocity composed_update(const bb::Backbone& model, const ag::Mat& x_t, const VideoShape& shape, double t,
                               const synth::PromptCond& c, const GuidanceConfig& cfg,
                               const std::vector<std::vector<double>>& resolved_masks);

// Offset-free conditional probe over the early window of the schedule; averages
// concept-token attention over the configured layers, heads and steps, then
// normalizes and sharpens.
off::MaskSpec extract_attention_mask(const bb::Backbone& model, const synth::PromptCond& c, int concept_token_index,
                                     const GuidanceConfig& cfg);

// Same aggregation applied to captured records (exposed for testing).
std::vector<double> aggregate_attention(const std::vector<bb::AttentionRecord>& records, int concept_token_index,
                                        const MaskExtractionConfig& cfg, int n_blocks);

struct TraceStep {
    int step = 0;
    double t = 0.0;
    double update_norm = 0.0;
    double cfg_norm = 0.0;
    std::vector<double> edit_norms;
};

struct MaskSummary {
    std::string source;
    double mean = 0.0, min = 0.0, max = 0.0;
};

struct Trace {
    std::string config_digest;
    std::vector<TraceStep> steps;
    std::vector<MaskSummary> masks;
    int velocity_calls = 0;

    nlohmann::json to_json() const;
};

struct GenerateResult {
    VideoTensor video;              // clamped to [0, 1]
    ag::Mat raw;                    // final ODE state before clamping
    std::vector<off::MaskSpec> masks;  // resolved, one per edit
    Trace trace;
};

GenerateResult generate(const bb::Backbone& model, const synth::PromptCond& prompt, const GuidanceConfig& cfg);

// Middle third of the blocks.
std::vector<int> default_mask_layers(int n_blocks);

}  // namespace tokendial::guide
