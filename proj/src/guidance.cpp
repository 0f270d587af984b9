#include "tokendial/guidance.hpp"

#include "tokendial/digest.hpp"

#include <algorithm>
#include <cmath>
#include <map>

namespace tokendial::guide {

std::vector<int> default_mask_layers(int n_blocks) {
    std::vector<int> out;
    const int lo = n_blocks / 3;
    const int hi = std::max(lo + 1, (2 * n_blocks) / 3);
    for (int k = lo; k < hi && k < n_blocks; ++k) out.push_back(k);
    return out;
}

nlohmann::json MaskExtractionConfig::to_json() const {
    return {{"window", window}, {"layers", layers}, {"power", power}, {"normalization", normalization}};
}

void GuidanceConfig::validate() const {
    require(steps >= 1, ErrorCode::precondition, "guidance: steps must be >= 1");
    require(std::isfinite(s_txt) && s_txt >= 0.0, ErrorCode::precondition, "guidance: s_txt must be finite and >= 0");
    for (const auto& e : edits) {
        require(e.offset != nullptr, ErrorCode::not_found, "guidance: unbound offset reference");
        require(std::isfinite(e.s_edit), ErrorCode::precondition, "guidance: s_edit must be finite");
    }
    require(mask_extraction.window > 0.0 && mask_extraction.window <= 1.0, ErrorCode::precondition,
            "guidance: mask window must be in (0, 1]");
    require(mask_extraction.power > 0.0, ErrorCode::precondition, "guidance: sharpening power must be > 0");
    require(mask_extraction.normalization == "max" || mask_extraction.normalization == "none",
            ErrorCode::precondition, "guidance: unknown mask normalization '" + mask_extraction.normalization + "'");
}

nlohmann::json GuidanceConfig::to_json() const {
    nlohmann::json edits_j = nlohmann::json::array();
    for (const auto& e : edits) {
        edits_j.push_back({{"offset", e.offset ? e.offset->attribute_name : ""},
                           {"s_edit", e.s_edit},
                           {"mask", e.mask.to_json()}});
    }
    return {{"s_txt", s_txt},
            {"edits", edits_j},
            {"steps", steps},
            {"seed", seed},
            {"shape", {shape.channels, shape.frames, shape.height, shape.width}},
            {"mask_extraction", mask_extraction.to_json()},
            {"joint_edits", joint_edits}};
}

std::string GuidanceConfig::digest() const { return sha256_hex(to_json().dump()); }

GuidedVelocity composed_update(const bb::Backbone& model, const ag::Mat& x_t, const VideoShape& shape, double t,
                               const synth::PromptCond& c, const GuidanceConfig& cfg,
                               const std::vector<std::vector<double>>& resolved_masks) {
    require(resolved_masks.size() == cfg.edits.size(), ErrorCode::precondition,
            "composed_update: one resolved mask per edit required");
    const ag::Var x = ag::Var::constant(x_t);
    GuidedVelocity out;
    const ag::Mat v_null = model.velocity(x, shape, t, nullptr).value();
    const ag::Mat v_c = model.velocity(x, shape, t, &c).value();
    out.calls = 2;
    out.base = (1.0 - cfg.s_txt) * v_null + cfg.s_txt * v_c;
    out.cfg_norm = (v_c - v_null).norm();
    out.update = out.base;
    const int L = bb::make_layout(shape, model.config().p_t, model.config().p_s).size();

    if (cfg.joint_edits) {
        std::vector<off::MaskSpec> masks(cfg.edits.size());
        std::vector<off::OffsetGate> gates;
        for (std::size_t j = 0; j < cfg.edits.size(); ++j) {
            if (cfg.edits[j].s_edit == 0.0) continue;
            masks[j].values = resolved_masks[j];
            gates.push_back({cfg.edits[j].offset, &masks[j], cfg.edits[j].s_edit});
        }
        out.edit_terms.assign(cfg.edits.size(), ag::Mat());
        if (!gates.empty()) {
            for (const auto& g : gates) g.offset->bind(model.config());
            const auto field = off::compose(gates, L);
            ag::Mat term = model.velocity(x, shape, t, &c, field).value() - v_c;
            ++out.calls;
            out.update += term;
            out.edit_terms.assign(1, std::move(term));
        }
        return out;
    }

    for (std::size_t j = 0; j < cfg.edits.size(); ++j) {
        const Edit& e = cfg.edits[j];
        if (e.s_edit == 0.0) {
            out.edit_terms.push_back(ag::Mat::Zero(x_t.rows(), x_t.cols()));
            continue;
        }
        e.offset->bind(model.config());
        off::MaskSpec m;
        m.values = resolved_masks[j];
        const auto field = off::compose({{e.offset, &m, 1.0}}, L);
        const ag::Mat v_e = model.velocity(x, shape, t, &c, field).value();
        ++out.calls;
        ag::Mat term = e.s_edit * (v_e - v_c);
        out.update += term;
        out.edit_terms.push_back(std::move(term));
    }
    return out;
}

std::vector<double> aggregate_attention(const std::vector<bb::AttentionRecord>& records, int concept_token_index,
                                        const MaskExtractionConfig& cfg, int n_blocks) {
    require(!records.empty(), ErrorCode::precondition, "attention mask: no captured attention");
    const std::vector<int> layers = cfg.layers.empty() ? default_mask_layers(n_blocks) : cfg.layers;
    const int L = records.front().tokens;
    const int P = records.front().prompt_len;
    const int heads = records.front().heads;
    require(concept_token_index >= 0 && concept_token_index < P, ErrorCode::precondition,
            "concept index " + std::to_string(concept_token_index) + " out of range");
    Eigen::RowVectorXd acc = Eigen::RowVectorXd::Zero(L);
    int n = 0;
    for (const auto& rec : records) {
        for (int k : layers) {
            auto it = std::find(rec.layers.begin(), rec.layers.end(), k);
            require(it != rec.layers.end(), ErrorCode::not_found,
                    "attention mask: layer " + std::to_string(k) + " not captured");
            const ag::Mat& w = rec.weights[static_cast<std::size_t>(it - rec.layers.begin())];
            for (int h = 0; h < heads; ++h) {
                acc += w.row(static_cast<ag::Index>(h) * P + concept_token_index);
                ++n;
            }
        }
    }
    acc /= static_cast<double>(n);
    if (cfg.normalization == "max") {
        const double mx = acc.maxCoeff();
        require(mx > 0.0, ErrorCode::degenerate, "attention mask: all-zero attention");
        acc /= mx;
    }
    std::vector<double> out(static_cast<std::size_t>(L));
    for (int i = 0; i < L; ++i) {
        const double s = std::clamp(acc(i), 0.0, 1.0);
        out[static_cast<std::size_t>(i)] = cfg.power == 1.0 ? s : std::pow(s, cfg.power);
    }
    return out;
}

off::MaskSpec extract_attention_mask(const bb::Backbone& model, const synth::PromptCond& c, int concept_token_index,
                                     const GuidanceConfig& cfg) {
    cfg.validate();
    require(concept_token_index >= 0 && concept_token_index < model.config().max_prompt_len, ErrorCode::precondition,
            "concept index " + std::to_string(concept_token_index) + " out of range");
    const VideoTensor noise = VideoTensor::gaussian_noise(cfg.shape, cfg.seed);
    const auto grid = bb::time_grid(cfg.steps);
    const int n_probe = std::max(1, static_cast<int>(std::ceil(cfg.mask_extraction.window * cfg.steps - 1e-9)));
    std::vector<bb::AttentionRecord> records;
    ag::Mat x = noise.data;
    for (int i = 0; i < n_probe; ++i) {
        const double t = grid[static_cast<std::size_t>(i)];
        const ag::Var xv = ag::Var::constant(x);
        bb::AttentionRecord rec;
        const ag::Mat v_c = model.velocity(xv, cfg.shape, t, &c, {}, &rec).value();
        records.push_back(std::move(rec));
        if (i + 1 < n_probe) {
            const ag::Mat v_null = model.velocity(xv, cfg.shape, t, nullptr).value();
            x += (grid[static_cast<std::size_t>(i) + 1] - t) * ((1.0 - cfg.s_txt) * v_null + cfg.s_txt * v_c);
        }
    }
    off::MaskSpec m = off::MaskSpec::attention(concept_token_index);
    m.values = aggregate_attention(records, concept_token_index, cfg.mask_extraction, model.config().blocks);
    return m;
}

nlohmann::json Trace::to_json() const {
    nlohmann::json steps_j = nlohmann::json::array();
    for (const auto& s : steps) {
        steps_j.push_back({{"step", s.step},
                           {"t", s.t},
                           {"update_norm", s.update_norm},
                           {"cfg_norm", s.cfg_norm},
                           {"edit_norms", s.edit_norms}});
    }
    nlohmann::json masks_j = nlohmann::json::array();
    for (const auto& m : masks) masks_j.push_back({{"source", m.source}, {"mean", m.mean}, {"min", m.min}, {"max", m.max}});
    return {{"config_digest", config_digest}, {"velocity_calls", velocity_calls}, {"steps", steps_j}, {"masks", masks_j}};
}

GenerateResult generate(const bb::Backbone& model, const synth::PromptCond& prompt, const GuidanceConfig& cfg) {
    cfg.validate();
    prompt.validate();
    const bb::TokenLayout layout = bb::make_layout(cfg.shape, model.config().p_t, model.config().p_s);
    GenerateResult res;
    res.trace.config_digest = cfg.digest();

    std::map<int, off::MaskSpec> attention_cache;
    std::vector<std::vector<double>> resolved;
    for (const auto& e : cfg.edits) {
        e.offset->bind(model.config());
        off::MaskSpec m;
        if (e.mask.source == off::MaskSource::attention && e.mask.values.empty()) {
            const int concept_idx = e.mask.concept_token >= 0 ? e.mask.concept_token : prompt.concept_token_index;
            auto it = attention_cache.find(concept_idx);
            if (it == attention_cache.end()) {
                it = attention_cache.emplace(concept_idx, extract_attention_mask(model, prompt, concept_idx, cfg)).first;
            }
            m = it->second;
        } else {
            m = e.mask.resolve(layout);
        }
        require(m.values.size() == static_cast<std::size_t>(layout.size()), ErrorCode::dimension_mismatch,
                "mask length does not match token count");
        const auto [mn, mx] = std::minmax_element(m.values.begin(), m.values.end());
        double mean = 0.0;
        for (double v : m.values) mean += v;
        res.trace.masks.push_back({off::to_string(m.source), mean / static_cast<double>(m.values.size()), *mn, *mx});
        resolved.push_back(m.values);
        res.masks.push_back(std::move(m));
    }

    const VideoTensor noise = VideoTensor::gaussian_noise(cfg.shape, cfg.seed);
    const auto grid = bb::time_grid(cfg.steps);
    ag::Mat x = noise.data;
    for (int i = 0; i < cfg.steps; ++i) {
        const double t = grid[static_cast<std::size_t>(i)];
        const double dt = grid[static_cast<std::size_t>(i) + 1] - t;
        GuidedVelocity g = composed_update(model, x, cfg.shape, t, prompt, cfg, resolved);
        x += dt * g.update;
        TraceStep ts;
        ts.step = i;
        ts.t = t;
        ts.update_norm = g.update.norm();
        ts.cfg_norm = g.cfg_norm;
        for (const auto& term : g.edit_terms) ts.edit_norms.push_back(term.size() ? term.norm() : 0.0);
        res.trace.velocity_calls += g.calls;
        res.trace.steps.push_back(std::move(ts));
    }
    res.raw = x;
    res.video = VideoTensor::from_mat(cfg.shape, x).clamped();
    return res;
}

}  // namespace tokendial::guide
