#pragma once

// Multi-channel Lucas-Kanade flow on per-frame feature grids.
//
// Spatial gradients: central differences on frame t with replicate padding.
// Temporal gradient: f_{t+1} - f_t. Structure-tensor terms are summed over
// channels, box-averaged (replicate padded) and solved per cell by Cramer's
// rule. Cells with |det| < det_eps are invalid and carry zero flow.

#include "tokendial/autograd.hpp"
#include "tokendial/perception.hpp"
#include "tokendial/video.hpp"

#include <filesystem>
#include <vector>

namespace tokendial::flow {

struct FlowField {
    int pairs = 0;  // K - 1
    int h_p = 0;
    int w_p = 0;
    ag::Mat u, v;   // pairs x (h_p * w_p), cells per frame along x (columns) and y (rows)
    ag::Mat valid;  // pairs x cells, 1 where well conditioned

    int cells() const { return h_p * w_p; }
    int valid_count() const { return static_cast<int>(valid.sum()); }
    // Mean flow magnitude over valid cells (0 when none are valid).
    double mean_magnitude() const;
};

// Differentiable flow: u, v are Vars over the input features.
struct FlowVars {
    ag::Var u, v;
    ag::Mat valid;
    int h_p = 0, w_p = 0;
};

struct LkConfig {
    int window = 3;
    double det_eps = 1e-8;

    void validate() const;
};

// feats: K x (D * N), channel-major rows (as produced by perc::video_features).
FlowVars lk_flow(const ag::Var& feats, int channels, int h_p, int w_p, const LkConfig& cfg = {});
FlowField lk_flow(const std::vector<perc::FrameFeatureGrid>& grids, const LkConfig& cfg = {});

// Reference implementation: explicit per-cell least squares over all window
// samples and channels (QR solve), no structure-tensor shortcut.
FlowField lk_flow_oracle(const std::vector<perc::FrameFeatureGrid>& grids, const LkConfig& cfg = {});

FlowVars motion_field(const ag::Var& video, const VideoShape& shape, const LkConfig& cfg = {});
FlowField motion_field(const VideoTensor& video, const LkConfig& cfg = {});

FlowField to_field(const FlowVars& fv);

// "TDFL": magic, version u16, pairs/h_p/w_p u16, 2 pad bytes; then (u, v) f32 pairs
// in (pair, cell) order; then a validity bitmask, LSB first.
void save_flow(const std::filesystem::path& path, const FlowField& f);
FlowField load_flow(const std::filesystem::path& path);

}  // namespace tokendial::flow
