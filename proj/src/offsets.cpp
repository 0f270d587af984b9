#include "tokendial/offsets.hpp"

#include "tokendial/binio.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <tuple>

namespace tokendial::off {

namespace {

constexpr std::uint16_t kOffsetVersion = 1;

bool finite_mat(const ag::Mat& m) { return m.allFinite(); }

// Membership of coordinate c in [lo, hi] with a linear ramp of width w centred on
// each boundary. Boundaries at the frame edge carry no ramp.
double ramp(double c, double lo, double hi, double w) {
    if (w <= 0.0) return (c >= lo && c <= hi) ? 1.0 : 0.0;
    double m = 1.0;
    if (lo > 0.0) m = std::min(m, std::clamp((c - lo) / w + 0.5, 0.0, 1.0));
    if (hi < 1.0) m = std::min(m, std::clamp((hi - c) / w + 0.5, 0.0, 1.0));
    return m;
}

}  // namespace

std::string to_string(LossKind k) { return k == LossKind::appearance ? "appearance" : "motion"; }

LossKind loss_kind_from_string(const std::string& s) {
    if (s == "appearance") return LossKind::appearance;
    if (s == "motion") return LossKind::motion;
    throw Error(ErrorCode::format, "unknown loss kind '" + s + "'");
}

nlohmann::json OffsetTrainingMeta::to_json() const {
    nlohmann::json j{{"loss_kind", to_string(loss_kind)},
                     {"lambda", lambda},
                     {"steps", steps},
                     {"seed", seed},
                     {"backbone_id", backbone_id},
                     {"config", config}};
    j["gamma"] = gamma ? nlohmann::json(*gamma) : nlohmann::json(nullptr);
    return j;
}

OffsetTrainingMeta OffsetTrainingMeta::from_json(const nlohmann::json& j) {
    OffsetTrainingMeta m;
    m.loss_kind = loss_kind_from_string(j.at("loss_kind").get<std::string>());
    m.lambda = j.at("lambda").get<double>();
    if (j.contains("gamma") && !j.at("gamma").is_null()) m.gamma = j.at("gamma").get<double>();
    m.steps = j.at("steps").get<int>();
    m.seed = j.at("seed").get<std::uint64_t>();
    m.backbone_id = j.at("backbone_id").get<std::string>();
    m.config = j.value("config", nlohmann::json::object());
    return m;
}

TokenOffsetSet TokenOffsetSet::zeros(std::string name, int d, bb::InjectionConfig inj) {
    TokenOffsetSet s;
    s.attribute_name = std::move(name);
    s.d = d;
    s.injection = std::move(inj);
    for (int k : s.injection.layers) s.entries[k] = ag::Mat::Zero(1, d);
    s.validate();
    return s;
}

void TokenOffsetSet::validate() const {
    require(!attribute_name.empty(), ErrorCode::precondition, "offset: empty attribute name");
    require(d > 0, ErrorCode::precondition, "offset: d must be positive");
    require(entries.size() == injection.layers.size(), ErrorCode::precondition,
            "offset: entries do not match injection layers");
    for (int k : injection.layers) {
        auto it = entries.find(k);
        require(it != entries.end(), ErrorCode::precondition,
                "offset: injection layer " + std::to_string(k) + " has no entry");
        require(it->second.rows() == 1 && it->second.cols() == d, ErrorCode::dimension_mismatch,
                "offset: entry for layer " + std::to_string(k) + " does not have length d=" + std::to_string(d));
        require(finite_mat(it->second), ErrorCode::precondition, "offset: non-finite entry");
    }
}

void TokenOffsetSet::bind(const bb::BackboneConfig& cfg) const {
    require(d == cfg.d, ErrorCode::dimension_mismatch,
            "offset '" + attribute_name + "' has d=" + std::to_string(d) + " but backbone has d=" +
                std::to_string(cfg.d));
    injection.validate(cfg.blocks);
}

bool TokenOffsetSet::operator==(const TokenOffsetSet& o) const {
    if (attribute_name != o.attribute_name || d != o.d || injection.point != o.injection.point ||
        injection.layers != o.injection.layers || entries.size() != o.entries.size() ||
        training_meta.to_json() != o.training_meta.to_json()) {
        return false;
    }
    for (const auto& [k, v] : entries) {
        auto it = o.entries.find(k);
        if (it == o.entries.end() || v != it->second) return false;
    }
    return true;
}

void MaskGeometry::validate() const {
    for (double v : {x0, y0, x1, y1, t0, t1}) {
        require(std::isfinite(v) && v >= 0.0 && v <= 1.0, ErrorCode::precondition,
                "mask geometry coordinates must lie in [0,1]");
    }
    require(x0 <= x1 && y0 <= y1 && t0 <= t1, ErrorCode::precondition, "mask geometry: empty range");
    require(std::isfinite(edge) && edge >= 0.0, ErrorCode::precondition, "mask geometry: negative edge width");
}

nlohmann::json MaskGeometry::to_json() const {
    return {{"box", {x0, y0, x1, y1}}, {"time_range", {t0, t1}}, {"edge", edge}};
}

MaskGeometry MaskGeometry::from_json(const nlohmann::json& j) {
    MaskGeometry g;
    if (j.contains("box")) {
        const auto& b = j.at("box");
        require(b.is_array() && b.size() == 4, ErrorCode::format, "mask box must have four numbers");
        g.x0 = b.at(0).get<double>();
        g.y0 = b.at(1).get<double>();
        g.x1 = b.at(2).get<double>();
        g.y1 = b.at(3).get<double>();
    }
    if (j.contains("time_range")) {
        const auto& t = j.at("time_range");
        require(t.is_array() && t.size() == 2, ErrorCode::format, "mask time_range must have two numbers");
        g.t0 = t.at(0).get<double>();
        g.t1 = t.at(1).get<double>();
    }
    g.edge = j.value("edge", 0.0);
    g.validate();
    return g;
}

std::string to_string(MaskSource s) {
    switch (s) {
        case MaskSource::uniform: return "uniform";
        case MaskSource::user_geometry: return "user_geometry";
        case MaskSource::attention: return "attention";
    }
    return "uniform";
}

MaskSpec MaskSpec::box(const MaskGeometry& g) {
    g.validate();
    MaskSpec m;
    m.source = MaskSource::user_geometry;
    m.geometry = g;
    return m;
}

MaskSpec MaskSpec::attention(int concept_token) {
    MaskSpec m;
    m.source = MaskSource::attention;
    m.concept_token = concept_token;
    return m;
}

MaskSpec MaskSpec::resolve(const bb::TokenLayout& layout) const {
    MaskSpec out = *this;
    switch (source) {
        case MaskSource::uniform: out.values.assign(static_cast<std::size_t>(layout.size()), 1.0); break;
        case MaskSource::user_geometry: out.values = resolve_geometry_mask(*geometry, layout); break;
        case MaskSource::attention:
            require(values.size() == static_cast<std::size_t>(layout.size()), ErrorCode::precondition,
                    "attention mask must be extracted before use");
            break;
    }
    return out;
}

nlohmann::json MaskSpec::to_json() const {
    nlohmann::json j{{"source", to_string(source)}};
    if (geometry) j["geometry"] = geometry->to_json();
    if (source == MaskSource::attention) j["concept_token"] = concept_token;
    return j;
}

std::vector<double> resolve_geometry_mask(const MaskGeometry& g, const bb::TokenLayout& layout) {
    g.validate();
    std::vector<double> out(static_cast<std::size_t>(layout.size()));
    for (int i = 0; i < layout.size(); ++i) {
        const auto [ct, cy, cx] = layout.center(i);
        out[static_cast<std::size_t>(i)] =
            ramp(cx, g.x0, g.x1, g.edge) * ramp(cy, g.y0, g.y1, g.edge) * ramp(ct, g.t0, g.t1, g.edge);
    }
    return out;
}

ag::Mat apply_offset(const ag::Mat& tokens, const ag::Mat& delta, const std::vector<double>& mask) {
    require(delta.size() == tokens.cols(), ErrorCode::dimension_mismatch,
            "apply_offset: |delta| = " + std::to_string(delta.size()) + " but d = " + std::to_string(tokens.cols()));
    require(mask.size() == static_cast<std::size_t>(tokens.rows()), ErrorCode::dimension_mismatch,
            "apply_offset: mask length does not match token count");
    ag::Mat out = tokens;
    for (ag::Index i = 0; i < out.rows(); ++i) {
        const double s = mask[static_cast<std::size_t>(i)];
        if (s == 0.0) continue;
        for (ag::Index j = 0; j < out.cols(); ++j) out(i, j) += s * delta.data()[j];
    }
    return out;
}

bb::TokenSequence apply_offset(const bb::TokenSequence& tokens, const ag::Mat& delta, const std::vector<double>& mask) {
    return {apply_offset(tokens.tokens, delta, mask), tokens.layout};
}

std::vector<bb::FieldEntry> compose(const std::vector<OffsetGate>& gates, int L) {
    struct Term {
        const TokenOffsetSet* off;
        const MaskSpec* mask;
        double strength;
        const ag::Mat* delta;
    };
    std::map<std::pair<int, int>, std::vector<Term>> by_site;
    int d = -1;
    for (const auto& g : gates) {
        require(g.offset != nullptr && g.mask != nullptr, ErrorCode::precondition, "compose: null gate");
        g.offset->validate();
        require(d < 0 || g.offset->d == d, ErrorCode::dimension_mismatch, "compose: offsets disagree on d");
        d = g.offset->d;
        require(g.mask->values.size() == static_cast<std::size_t>(L), ErrorCode::dimension_mismatch,
                "compose: mask for '" + g.offset->attribute_name + "' is not resolved for L=" + std::to_string(L));
        if (g.strength == 0.0) continue;
        for (const auto& [k, delta] : g.offset->entries) {
            by_site[{static_cast<int>(g.offset->injection.point), k}].push_back({g.offset, g.mask, g.strength, &delta});
        }
    }
    std::vector<bb::FieldEntry> out;
    for (auto& [site, terms] : by_site) {
        std::sort(terms.begin(), terms.end(), [](const Term& a, const Term& b) {
            if (std::tie(a.off->attribute_name, a.strength, a.mask->values) !=
                std::tie(b.off->attribute_name, b.strength, b.mask->values)) {
                return std::tie(a.off->attribute_name, a.strength, a.mask->values) <
                       std::tie(b.off->attribute_name, b.strength, b.mask->values);
            }
            return std::lexicographical_compare(a.delta->data(), a.delta->data() + a.delta->size(), b.delta->data(),
                                                b.delta->data() + b.delta->size());
        });
        ag::Mat field = ag::Mat::Zero(L, d);
        for (const Term& t : terms) {
            for (ag::Index i = 0; i < L; ++i) {
                const double s = t.strength * t.mask->values[static_cast<std::size_t>(i)];
                if (s == 0.0) continue;
                field.row(i) += s * *t.delta;
            }
        }
        out.push_back({static_cast<bb::InjectionPoint>(site.first), site.second, ag::Var::constant(std::move(field))});
    }
    return out;
}

std::vector<bb::FieldEntry> field_from_vars(const std::map<int, ag::Var>& deltas, bb::InjectionPoint point,
                                            const std::vector<double>& mask) {
    ag::Mat col(static_cast<ag::Index>(mask.size()), 1);
    for (std::size_t i = 0; i < mask.size(); ++i) col(static_cast<ag::Index>(i), 0) = mask[i];
    ag::Var mcol = ag::Var::constant(std::move(col));
    std::vector<bb::FieldEntry> out;
    for (const auto& [k, delta] : deltas) out.push_back({point, k, ag::outer(mcol, delta)});
    return out;
}

void save_offset(const std::filesystem::path& path, const TokenOffsetSet& off) {
    off.validate();
    std::ofstream os(path, std::ios::binary);
    require(static_cast<bool>(os), ErrorCode::not_found, "cannot open " + path.string() + " for writing");
    nlohmann::json meta{{"attribute_name", off.attribute_name},
                        {"d", off.d},
                        {"layers", off.injection.layers},
                        {"injection_point", bb::to_string(off.injection.point)},
                        {"training_meta", off.training_meta.to_json()}};
    binio::put_magic(os, "TDOF");
    binio::put_u16(os, kOffsetVersion);
    binio::put_string(os, meta.dump());
    for (int k : off.injection.layers) {
        const ag::Mat& v = off.entries.at(k);
        for (ag::Index j = 0; j < v.size(); ++j) binio::put_f32(os, static_cast<float>(v.data()[j]));
    }
    require(static_cast<bool>(os), ErrorCode::format, "failed writing " + path.string());
}

TokenOffsetSet load_offset(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    require(static_cast<bool>(is), ErrorCode::not_found, "offset file not found: " + path.string());
    binio::expect_magic(is, "TDOF");
    const auto version = binio::get_u16(is, "version");
    require(version == kOffsetVersion, ErrorCode::format,
            "unsupported offset version " + std::to_string(version) + " (expected " + std::to_string(kOffsetVersion) + ")");
    TokenOffsetSet off;
    try {
        const auto meta = nlohmann::json::parse(binio::get_string(is, "metadata"));
        off.attribute_name = meta.at("attribute_name").get<std::string>();
        off.d = meta.at("d").get<int>();
        off.injection.layers = meta.at("layers").get<std::vector<int>>();
        off.injection.point = bb::injection_point_from_string(meta.at("injection_point").get<std::string>());
        off.training_meta = OffsetTrainingMeta::from_json(meta.at("training_meta"));
    } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorCode::format, std::string("corrupt header: ") + e.what());
    }
    require(off.d > 0 && off.d <= (1 << 16), ErrorCode::format, "corrupt header: bad d");
    for (int k : off.injection.layers) {
        ag::Mat v(1, off.d);
        for (int j = 0; j < off.d; ++j) v(0, j) = binio::get_f32(is, "offset values");
        off.entries[k] = std::move(v);
    }
    off.validate();
    return off;
}

TokenOffsetSet load_offset(const std::filesystem::path& path, const bb::BackboneConfig& target) {
    TokenOffsetSet off = load_offset(path);
    off.bind(target);
    return off;
}

}  // namespace tokendial::off
