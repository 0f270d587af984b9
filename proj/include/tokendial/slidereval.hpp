#pragma once

// Slider-controllability metrics over strength sweeps.

#include "tokendial/guidance.hpp"
#include "tokendial/image.hpp"
#include "tokendial/perception.hpp"

#include <nlohmann/json.hpp>

#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace tokendial::eval {

inline constexpr double kOsEpsilon = 1.0;

// 1 - cos of the encoder embeddings, clipped to [0, 2].
double conceptual_range(const VideoTensor& low, const VideoTensor& high, const perc::AppearanceEncoder& enc);
// stdev (n-1) of adjacent deltas over (mean |delta| + 1e-8).
double smoothness_csm(const std::vector<double>& scores);
// Fraction of adjacent deltas agreeing in sign with a_S - a_0; 0.5 when a_S == a_0.
double monotonicity(const std::vector<double>& scores);
// Mean perceptual distance of every level k >= 1 to level 0.
double semantic_preservation(const std::vector<VideoTensor>& levels);
double overall_score(double cr, double sp, double csm, double eps = kOsEpsilon);
// Rank correlation with average ranks for ties; 0 when either side is constant.
double spearman(const std::vector<double>& x, const std::vector<double>& y);

enum class OracleKind { none, brightness, displacement };
std::string to_string(OracleKind k);
OracleKind oracle_kind_from_string(const std::string& s);
// Throws no_foreground when the oracle cannot measure the video.
double oracle_score(OracleKind k, const VideoTensor& v);

struct SweepConfig {
    std::vector<double> strengths{0.0, 0.25, 0.5, 0.75, 1.0};
    std::vector<std::uint64_t> seeds{0, 1, 2, 3};
    std::vector<synth::PromptCond> prompts;
    double s_txt = 4.5;
    int steps = 32;
    VideoShape shape{3, 8, 32, 32};
    off::MaskSpec mask = off::MaskSpec::uniform();
    OracleKind oracle = OracleKind::brightness;

    void validate() const;
    nlohmann::json to_json() const;
    std::string digest() const;
};

struct SweepRow {
    std::string prompt;
    std::uint64_t seed = 0;
    std::vector<double> encoder_scores;
    std::vector<double> oracle_scores;  // empty when the oracle failed or is disabled
    double cr = 0.0, csm = 0.0, mono = 0.0, sp = 0.0;
    double oracle_spearman = 0.0, oracle_mono = 0.0, oracle_csm = 0.0;
    double frame0_distance = 0.0;  // first-frame distance between the top level and level 0
    bool oracle_ok = false;
};

struct Aggregate {
    double cr = 0.0, csm = 0.0, mono = 0.0, sp = 0.0, os = 0.0;
    double oracle_spearman = 0.0, oracle_mono = 0.0, oracle_csm = 0.0;
    double frame0_distance = 0.0;
    std::vector<double> mean_encoder_curve, mean_oracle_curve;
    int runs = 0;
    int oracle_runs = 0;
    int oracle_failures = 0;
};

struct SliderEvalReport {
    std::string attribute;
    std::string config_digest;
    nlohmann::json config;
    std::vector<double> strengths;
    std::vector<SweepRow> rows;
    Aggregate aggregate;

    nlohmann::json to_json() const;
    static SliderEvalReport from_json(const nlohmann::json& j);
    std::string to_csv() const;
    img::Image plot() const;
};

Aggregate aggregate_rows(const std::vector<SweepRow>& rows, std::size_t levels);

// Scores are projections onto d_tgt when given, otherwise the encoder's auxiliary
// prediction of the oracle attribute.
struct SweepInputs {
    const bb::Backbone* model = nullptr;
    const off::TokenOffsetSet* offset = nullptr;
    const perc::AppearanceEncoder* encoder = nullptr;
    std::optional<perc::DirectionVector> d_tgt;
};

using SweepProgress = std::function<void(std::size_t done, std::size_t total)>;
// Optional hook that receives every level video (run index, level index).
using LevelSink = std::function<void(std::size_t run, std::size_t level, const VideoTensor&)>;

SliderEvalReport run_sweep(const SweepInputs& in, const SweepConfig& cfg, const SweepProgress& progress = {},
                           const LevelSink& sink = {});

// report.json, scores.csv and curves.png under dir.
void write_report(const SliderEvalReport& r, const std::filesystem::path& dir);

}  // namespace tokendial::eval
