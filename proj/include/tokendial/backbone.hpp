#pragma once

// Miniature text-conditioned video diffusion transformer trained with flow
// matching on the linear path x_t = (1 - t) x_0 + t x_1, x_1 ~ N(0, I).
//
// Token sequence per forward pass: [prompt tokens ; time token ; visual tokens],
// processed by pre-norm blocks with full self-attention. Additive fields can be
// injected on the visual rows after a block or into the self-attention residual.

#include "tokendial/autograd.hpp"
#include "tokendial/synthworld.hpp"
#include "tokendial/video.hpp"

#include <nlohmann/json.hpp>

#include <array>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace tokendial::bb {

enum class InjectionPoint { post_block, post_self_attention_residual };

std::string to_string(InjectionPoint p);
InjectionPoint injection_point_from_string(const std::string& s);

struct InjectionConfig {
    InjectionPoint point = InjectionPoint::post_block;
    std::vector<int> layers;

    void validate(int n_blocks) const;
};

struct BackboneConfig {
    int d = 128;
    int blocks = 6;
    int heads = 4;
    int p_t = 2;
    int p_s = 4;
    int channels = 3;
    int mlp_ratio = 4;
    int vocab = synth::vocab::size;
    int max_prompt_len = synth::PromptCond::max_len;
    int time_freqs = 32;

    int patch_dim() const { return channels * p_t * p_s * p_s; }
    int head_dim() const { return d / heads; }
    void validate() const;
    nlohmann::json to_json() const;
    static BackboneConfig from_json(const nlohmann::json& j);
};

// Bijection between token index and (frame patch, row patch, col patch).
struct TokenLayout {
    int frame_patches = 0;
    int row_patches = 0;
    int col_patches = 0;

    int size() const { return frame_patches * row_patches * col_patches; }
    int index(int fp, int rp, int cp) const { return (fp * row_patches + rp) * col_patches + cp; }
    std::array<int, 3> position(int i) const {
        return {i / (row_patches * col_patches), (i / col_patches) % row_patches, i % col_patches};
    }
    // Patch centre in normalized [0,1] coordinates (t, y, x).
    std::array<double, 3> center(int i) const;
    bool operator==(const TokenLayout&) const = default;
};

TokenLayout make_layout(const VideoShape& shape, int p_t, int p_s);

struct TokenSequence {
    ag::Mat tokens;  // L x (C * p_t * p_s * p_s) raw patch vectors
    TokenLayout layout;
};

// Raw (identity-embedded) patchification; the learned embedding happens inside the model.
TokenSequence patchify(const VideoTensor& v, int p_t, int p_s);
VideoTensor unpatchify(const TokenSequence& seq, const VideoShape& shape, int p_t, int p_s);
ag::Var patchify_var(const ag::Var& video, const VideoShape& shape, int p_t, int p_s);
ag::Var unpatchify_var(const ag::Var& tokens, const VideoShape& shape, int p_t, int p_s);

// One additive term on the visual rows: `add` is L x d.
struct FieldEntry {
    InjectionPoint point = InjectionPoint::post_block;
    int layer = 0;
    ag::Var add;
};

// Prompt-row -> visual-column attention, renormalized over the visual columns.
struct AttentionRecord {
    int heads = 0;
    int prompt_len = 0;
    int tokens = 0;
    std::vector<int> layers;
    std::vector<ag::Mat> weights;  // per layer: (heads * prompt_len) x L, row = head * prompt_len + p
};

// Visual hidden rows around each injection site, for instrumentation.
struct ForwardProbe {
    std::vector<ag::Mat> attn_out_before, attn_out_after;  // per block, self-attention output rows
    std::vector<ag::Mat> block_out_before, block_out_after;
};


class Backbone {
public:
    Backbone() = default;
    Backbone(BackboneConfig cfg, std::uint64_t seed);

    const BackboneConfig& config() const { return cfg_; }

    // Velocity prediction for a canonical video Var (rows (c,f), cols (h,w)).
    // `prompt == nullptr` selects the learned null prompt.
    ag::Var velocity(const ag::Var& x_t, const VideoShape& shape, double t, const synth::PromptCond* prompt,
                     std::span<const FieldEntry> field = {}, AttentionRecord* attention = nullptr,
                     ForwardProbe* probe = nullptr) const;

    VideoTensor velocity(const VideoTensor& x_t, double t, const synth::PromptCond* prompt,
                         std::span<const FieldEntry> field = {}, AttentionRecord* attention = nullptr) const;

    std::vector<ag::Var>& parameters() { return params_; }
    const std::vector<ag::Var>& parameters() const { return params_; }
    const std::vector<std::string>& parameter_names() const { return names_; }
    std::size_t parameter_count() const;

    void set_trainable(bool trainable);
    // Round every weight to float32 so checkpoints round-trip bit-exactly.
    void snap_to_f32();
    std::string digest() const;

    nlohmann::json training_meta;

    void save(const std::filesystem::path& path) const;
    static Backbone load(const std::filesystem::path& path);

private:
    BackboneConfig cfg_;
    std::vector<ag::Var> params_;
    std::vector<std::string> names_;

    ag::Var& p(std::size_t i) { return params_[i]; }
    const ag::Var& p(std::size_t i) const { return params_[i]; }
    void build(std::uint64_t seed);
};

// Sinusoidal (t, y, x) encoding of normalized patch centres, L x d.
ag::Mat positional_encoding(const TokenLayout& layout, int d);

// x_0 estimate for the linear path: x_t - t * v.
VideoTensor one_step_clean_estimate(const VideoTensor& x_t, double t, const VideoTensor& velocity);
ag::Var one_step_clean_estimate(const ag::Var& x_t, double t, const ag::Var& velocity);

// Uniform t-grid from 1 to 0 with `steps` intervals.
std::vector<double> time_grid(int steps, double t_start = 1.0);

using VelocityField = std::function<ag::Mat(const ag::Mat& x, double t, int step)>;

// Euler integration of dx/dt = field(x, t) from t=1 to t=0.
ag::Mat euler_integrate(const ag::Mat& noise, int steps, const VelocityField& field);

struct BackboneTrainConfig {
    int steps = 2000;
    int batch = 4;
    double lr = 1e-3;
    double cond_drop_prob = 0.1;
    double grad_clip = 1.0;
    int warmup = 100;
    std::uint64_t seed = 0;

    nlohmann::json to_json() const;
};

struct TrainLogEntry {
    int step = 0;
    double loss = 0.0;
    double grad_norm = 0.0;
};

using BackboneLogFn = std::function<void(const TrainLogEntry&)>;

// Flow-matching training. steps == 0 returns the model unchanged.
void train_backbone(Backbone& model, const std::vector<synth::Clip>& data, const BackboneTrainConfig& cfg,
                    const BackboneLogFn& log = {});

// Mean flow-matching loss and the zero-predictor baseline E||x_1 - x_0||^2 on a
// fixed set of (t, noise) draws.
struct ValidationLoss {
    double model = 0.0;
    double zero_predictor = 0.0;
};
ValidationLoss validation_loss(const Backbone& model, const std::vector<synth::Clip>& data, int draws_per_clip,
                               std::uint64_t seed);

}  // namespace tokendial::bb
