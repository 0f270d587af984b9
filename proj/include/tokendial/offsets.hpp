#pragma once

// Layer-wise additive token offsets in the hidden space R^d, soft token masks,
// gated composition and the TDOF on-disk format.

#include "tokendial/backbone.hpp"

#include <nlohmann/json.hpp>

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace tokendial::off {

enum class LossKind { appearance, motion };

std::string to_string(LossKind k);
LossKind loss_kind_from_string(const std::string& s);

struct OffsetTrainingMeta {
    LossKind loss_kind = LossKind::appearance;
    double lambda = 0.0;
    std::optional<double> gamma;
    int steps = 0;
    std::uint64_t seed = 0;
    std::string backbone_id;
    nlohmann::json config = nlohmann::json::object();  // full config snapshot

    nlohmann::json to_json() const;
    static OffsetTrainingMeta from_json(const nlohmann::json& j);
};

struct TokenOffsetSet {
    std::string attribute_name;
    int d = 0;
    std::map<int, ag::Mat> entries;  // layer -> 1 x d
    bb::InjectionConfig injection;
    OffsetTrainingMeta training_meta;

    // Zero offsets on every injection layer.
    static TokenOffsetSet zeros(std::string name, int d, bb::InjectionConfig inj);

    void validate() const;
    std::size_t parameter_count() const { return entries.size() * static_cast<std::size_t>(d); }
    // Checks d and layer indices against a backbone; throws dimension_mismatch / not_found.
    void bind(const bb::BackboneConfig& cfg) const;
    bool operator==(const TokenOffsetSet& o) const;
};

struct MaskGeometry {
    double x0 = 0.0, y0 = 0.0, x1 = 1.0, y1 = 1.0;  // spatial box in [0,1]^2
    double t0 = 0.0, t1 = 1.0;                      // temporal range in [0,1]
    double edge = 0.0;                              // linear ramp width

    void validate() const;
    nlohmann::json to_json() const;
    static MaskGeometry from_json(const nlohmann::json& j);
};

enum class MaskSource { uniform, user_geometry, attention };

std::string to_string(MaskSource s);

struct MaskSpec {
    MaskSource source = MaskSource::uniform;
    std::optional<MaskGeometry> geometry;
    int concept_token = -1;      // attention source; -1 means the prompt's concept token
    std::vector<double> values;  // resolved per-token gate, empty until resolved

    static MaskSpec uniform() { return {}; }
    static MaskSpec box(const MaskGeometry& g);
    static MaskSpec attention(int concept_token = -1);

    bool resolved() const { return !values.empty(); }
    // Resolves uniform and geometry sources for a layout; attention masks must be
    // resolved by the guidance module.
    MaskSpec resolve(const bb::TokenLayout& layout) const;
    nlohmann::json to_json() const;
};

std::vector<double> resolve_geometry_mask(const MaskGeometry& g, const bb::TokenLayout& layout);

// t'_i = t_i + s_i * delta.
bb::TokenSequence apply_offset(const bb::TokenSequence& tokens, const ag::Mat& delta, const std::vector<double>& mask);
ag::Mat apply_offset(const ag::Mat& tokens, const ag::Mat& delta, const std::vector<double>& mask);

struct OffsetGate {
    const TokenOffsetSet* offset = nullptr;
    const MaskSpec* mask = nullptr;  // resolved
    double strength = 1.0;
};

// Effective per-(point, layer) additive field: sum_j strength_j * s^(j) (x) Delta_j^(k).
// Entries are summed in a canonical order so the result does not depend on list order.
std::vector<bb::FieldEntry> compose(const std::vector<OffsetGate>& gates, int L);

// Field entries for trainable deltas: outer(mask, delta_k) per layer.
std::vector<bb::FieldEntry> field_from_vars(const std::map<int, ag::Var>& deltas, bb::InjectionPoint point,
                                            const std::vector<double>& mask);

void save_offset(const std::filesystem::path& path, const TokenOffsetSet& off);
TokenOffsetSet load_offset(const std::filesystem::path& path);
TokenOffsetSet load_offset(const std::filesystem::path& path, const bb::BackboneConfig& target);

}  // namespace tokendial::off
