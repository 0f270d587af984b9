#include "tokendial/backbone.hpp"

#include "tokendial/binio.hpp"
#include "tokendial/digest.hpp"
#include "tokendial/optim.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <mutex>
#include <random>

namespace tokendial::bb {

namespace {

constexpr std::uint16_t kCheckpointVersion = 1;

// Fixed parameter slots ahead of the per-block parameters.
enum Slot : std::size_t {
    patch_w,
    patch_b,
    time_w1,
    time_b1,
    time_w2,
    time_b2,
    prompt_embed,
    prompt_pos,
    prompt_null,
    n_fixed
};

enum BlockSlot : std::size_t {
    ln1_g,
    ln1_b,
    qkv_w,
    qkv_b,
    proj_w,
    proj_b,
    ln2_g,
    ln2_b,
    mlp_w1,
    mlp_b1,
    mlp_w2,
    mlp_b2,
    n_block
};

enum FinalSlot : std::size_t { lnf_g, lnf_b, out_w, out_b, n_final };

std::size_t block_slot(int block, BlockSlot s) {
    return n_fixed + static_cast<std::size_t>(block) * n_block + s;
}

ag::Mat time_features(double t, int freqs) {
    ag::Mat f(1, 2 * freqs);
    for (int i = 0; i < freqs; ++i) {
        const double w = std::exp(-std::log(10000.0) * i / freqs);
        f(0, i) = std::sin(1000.0 * t * w);
        f(0, freqs + i) = std::cos(1000.0 * t * w);
    }
    return f;
}

std::shared_ptr<const std::vector<ag::Index>> patch_index(const VideoShape& s, int p_t, int p_s) {
    const TokenLayout lay = make_layout(s, p_t, p_s);
    const int pd = s.channels * p_t * p_s * p_s;
    auto idx = std::make_shared<std::vector<ag::Index>>(static_cast<std::size_t>(lay.size()) * pd);
    for (int i = 0; i < lay.size(); ++i) {
        auto [fp, rp, cp] = lay.position(i);
        for (int c = 0; c < s.channels; ++c)
            for (int dt = 0; dt < p_t; ++dt)
                for (int dy = 0; dy < p_s; ++dy)
                    for (int dx = 0; dx < p_s; ++dx) {
                        const int j = ((c * p_t + dt) * p_s + dy) * p_s + dx;
                        const int f = fp * p_t + dt, h = rp * p_s + dy, w = cp * p_s + dx;
                        (*idx)[static_cast<std::size_t>(i) * pd + j] =
                            ((static_cast<ag::Index>(c) * s.frames + f) * s.height + h) * s.width + w;
                    }
    }
    return idx;
}

std::shared_ptr<const std::vector<ag::Index>> unpatch_index(const VideoShape& s, int p_t, int p_s) {
    auto fwd = patch_index(s, p_t, p_s);
    auto inv = std::make_shared<std::vector<ag::Index>>(fwd->size());
    for (std::size_t k = 0; k < fwd->size(); ++k) (*inv)[static_cast<std::size_t>((*fwd)[k])] = static_cast<ag::Index>(k);
    return inv;
}

}  // namespace

std::string to_string(InjectionPoint p) {
    return p == InjectionPoint::post_block ? "post_block" : "post_self_attention_residual";
}

InjectionPoint injection_point_from_string(const std::string& s) {
    if (s == "post_block") return InjectionPoint::post_block;
    if (s == "post_self_attention_residual") return InjectionPoint::post_self_attention_residual;
    throw Error(ErrorCode::format, "unknown injection point '" + s + "'");
}

void InjectionConfig::validate(int n_blocks) const {
    for (int k : layers) {
        require(k >= 0 && k < n_blocks, ErrorCode::not_found,
                "injection layer " + std::to_string(k) + " outside [0, " + std::to_string(n_blocks) + ")");
    }
}

void BackboneConfig::validate() const {
    require(d > 0 && blocks > 0 && heads > 0 && d % heads == 0, ErrorCode::precondition,
            "backbone: d must be a positive multiple of heads");
    require(p_t > 0 && p_s > 0 && channels > 0 && mlp_ratio > 0, ErrorCode::precondition,
            "backbone: patch sizes must be positive");
    require(vocab > 0 && max_prompt_len > 0 && time_freqs > 0, ErrorCode::precondition,
            "backbone: vocab/prompt/time sizes must be positive");
}

nlohmann::json BackboneConfig::to_json() const {
    return {{"d", d},         {"blocks", blocks},         {"heads", heads},
            {"p_t", p_t},     {"p_s", p_s},               {"channels", channels},
            {"mlp_ratio", mlp_ratio}, {"vocab", vocab},   {"max_prompt_len", max_prompt_len},
            {"time_freqs", time_freqs}};
}

BackboneConfig BackboneConfig::from_json(const nlohmann::json& j) {
    BackboneConfig c;
    c.d = j.at("d").get<int>();
    c.blocks = j.at("blocks").get<int>();
    c.heads = j.at("heads").get<int>();
    c.p_t = j.at("p_t").get<int>();
    c.p_s = j.at("p_s").get<int>();
    c.channels = j.at("channels").get<int>();
    c.mlp_ratio = j.at("mlp_ratio").get<int>();
    c.vocab = j.at("vocab").get<int>();
    c.max_prompt_len = j.at("max_prompt_len").get<int>();
    c.time_freqs = j.at("time_freqs").get<int>();
    return c;
}

std::array<double, 3> TokenLayout::center(int i) const {
    auto [fp, rp, cp] = position(i);
    return {(fp + 0.5) / frame_patches, (rp + 0.5) / row_patches, (cp + 0.5) / col_patches};
}

TokenLayout make_layout(const VideoShape& shape, int p_t, int p_s) {
    require(shape.frames % p_t == 0 && shape.height % p_s == 0 && shape.width % p_s == 0,
            ErrorCode::dimension_mismatch,
            "patchify: video " + shape.str() + " not divisible by patch sizes (" + std::to_string(p_t) + ", " +
                std::to_string(p_s) + ")");
    return {shape.frames / p_t, shape.height / p_s, shape.width / p_s};
}

TokenSequence patchify(const VideoTensor& v, int p_t, int p_s) {
    TokenSequence seq;
    seq.layout = make_layout(v.shape, p_t, p_s);
    ag::Var out = patchify_var(ag::Var::constant(v.data), v.shape, p_t, p_s);
    seq.tokens = out.value();
    return seq;
}

VideoTensor unpatchify(const TokenSequence& seq, const VideoShape& shape, int p_t, int p_s) {
    require(make_layout(shape, p_t, p_s) == seq.layout, ErrorCode::dimension_mismatch,
            "unpatchify: layout does not match target shape");
    ag::Var out = unpatchify_var(ag::Var::constant(seq.tokens), shape, p_t, p_s);
    return VideoTensor::from_mat(shape, out.value());
}

ag::Var patchify_var(const ag::Var& video, const VideoShape& shape, int p_t, int p_s) {
    require(video.size() == static_cast<ag::Index>(shape.numel()), ErrorCode::dimension_mismatch,
            "patchify: video data does not match shape " + shape.str());
    const TokenLayout lay = make_layout(shape, p_t, p_s);
    return ag::gather(video, patch_index(shape, p_t, p_s), lay.size(), shape.channels * p_t * p_s * p_s);
}

ag::Var unpatchify_var(const ag::Var& tokens, const VideoShape& shape, int p_t, int p_s) {
    const TokenLayout lay = make_layout(shape, p_t, p_s);
    require(tokens.rows() == lay.size() && tokens.cols() == shape.channels * p_t * p_s * p_s,
            ErrorCode::dimension_mismatch, "unpatchify: token matrix does not match shape " + shape.str());
    return ag::gather(tokens, unpatch_index(shape, p_t, p_s), shape.rows(), shape.cols());
}

namespace {

ag::Mat compute_positional_encoding(const TokenLayout& layout, int d) {
    const int per_axis = d / 6;  // sin/cos pairs per axis
    ag::Mat pe = ag::Mat::Zero(layout.size(), d);
    for (int i = 0; i < layout.size(); ++i) {
        const auto c = layout.center(i);
        for (int a = 0; a < 3; ++a) {
            for (int j = 0; j < per_axis; ++j) {
                const double frac = per_axis > 1 ? static_cast<double>(j) / (per_axis - 1) : 0.0;
                const double w = M_PI * std::pow(16.0, frac);
                pe(i, a * 2 * per_axis + 2 * j) = std::sin(w * c[static_cast<std::size_t>(a)]);
                pe(i, a * 2 * per_axis + 2 * j + 1) = std::cos(w * c[static_cast<std::size_t>(a)]);
            }
        }
    }
    return pe;
}

}  // namespace

ag::Mat positional_encoding(const TokenLayout& layout, int d) {
    static std::mutex mu;
    static std::map<std::array<int, 4>, std::shared_ptr<const ag::Mat>> cache;
    const std::array<int, 4> key{layout.frame_patches, layout.row_patches, layout.col_patches, d};
    std::lock_guard<std::mutex> lock(mu);
    auto it = cache.find(key);
    if (it == cache.end()) {
        it = cache.emplace(key, std::make_shared<const ag::Mat>(compute_positional_encoding(layout, d))).first;
    }
    return *it->second;
}

Backbone::Backbone(BackboneConfig cfg, std::uint64_t seed) : cfg_(cfg) {
    cfg_.validate();
    build(seed);
}

void Backbone::build(std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    const int d = cfg_.d;
    auto add = [&](const std::string& name, int r, int c, double std_dev, double fill = 0.0) {
        ag::Mat m(r, c);
        if (std_dev > 0.0) {
            std::normal_distribution<double> n(0.0, std_dev);
            for (ag::Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
        } else {
            m.setConstant(fill);
        }
        params_.push_back(ag::Var::leaf(std::move(m), false));
        names_.push_back(name);
    };
    auto xavier = [](int fan_in) { return 1.0 / std::sqrt(static_cast<double>(fan_in)); };
    add("patch_in.w", cfg_.patch_dim(), d, xavier(cfg_.patch_dim()));
    add("patch_in.b", 1, d, 0.0);
    add("time.w1", 2 * cfg_.time_freqs, d, xavier(2 * cfg_.time_freqs));
    add("time.b1", 1, d, 0.0);
    add("time.w2", d, d, xavier(d));
    add("time.b2", 1, d, 0.0);
    add("prompt.embed", cfg_.vocab, d, 0.5);
    add("prompt.pos", cfg_.max_prompt_len, d, 0.1);
    add("prompt.null", cfg_.max_prompt_len, d, 0.5);
    for (int b = 0; b < cfg_.blocks; ++b) {
        const std::string pre = "blocks." + std::to_string(b) + ".";
        const int hid = d * cfg_.mlp_ratio;
        add(pre + "ln1.g", 1, d, 0.0, 1.0);
        add(pre + "ln1.b", 1, d, 0.0);
        add(pre + "qkv.w", d, 3 * d, xavier(d));
        add(pre + "qkv.b", 1, 3 * d, 0.0);
        add(pre + "proj.w", d, d, xavier(d) / std::sqrt(2.0 * cfg_.blocks));
        add(pre + "proj.b", 1, d, 0.0);
        add(pre + "ln2.g", 1, d, 0.0, 1.0);
        add(pre + "ln2.b", 1, d, 0.0);
        add(pre + "mlp.w1", d, hid, xavier(d));
        add(pre + "mlp.b1", 1, hid, 0.0);
        add(pre + "mlp.w2", hid, d, xavier(hid) / std::sqrt(2.0 * cfg_.blocks));
        add(pre + "mlp.b2", 1, d, 0.0);
    }
    add("final.ln.g", 1, d, 0.0, 1.0);
    add("final.ln.b", 1, d, 0.0);
    add("final.out.w", d, cfg_.patch_dim(), 0.0);
    add("final.out.b", 1, cfg_.patch_dim(), 0.0);
    snap_to_f32();
}

std::size_t Backbone::parameter_count() const {
    std::size_t n = 0;
    for (const auto& v : params_) n += static_cast<std::size_t>(v.size());
    return n;
}

void Backbone::set_trainable(bool trainable) {
    for (auto& v : params_) {
        v.set_requires_grad(trainable);
        v.zero_grad();
    }
}

void Backbone::snap_to_f32() {
    for (auto& v : params_) {
        ag::Mat& m = v.mutable_value();
        for (ag::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<double>(static_cast<float>(m.data()[i]));
    }
}

std::string Backbone::digest() const {
    Sha256 h;
    h.update(cfg_.to_json().dump());
    for (std::size_t i = 0; i < params_.size(); ++i) {
        h.update(names_[i]);
        const ag::Mat& m = params_[i].value();
        h.update(m.data(), static_cast<std::size_t>(m.size()) * sizeof(double));
    }
    return h.hex();
}

ag::Var Backbone::velocity(const ag::Var& x_t, const VideoShape& shape, double t, const synth::PromptCond* prompt,
                           std::span<const FieldEntry> field, AttentionRecord* attention,
                           ForwardProbe* probe) const {
    require(shape.channels == cfg_.channels, ErrorCode::dimension_mismatch, "backbone: channel mismatch");
    const TokenLayout lay = make_layout(shape, cfg_.p_t, cfg_.p_s);
    const int L = lay.size();
    const int d = cfg_.d;
    const int P = cfg_.max_prompt_len;
    const int vis = P + 1;
    for (const FieldEntry& e : field) {
        require(e.layer >= 0 && e.layer < cfg_.blocks, ErrorCode::not_found,
                "offset layer " + std::to_string(e.layer) + " not in backbone");
        require(e.add.rows() == L && e.add.cols() == d, ErrorCode::dimension_mismatch,
                "offset field must be L x d (" + std::to_string(L) + " x " + std::to_string(d) + ")");
    }

    // Time embedding.
    ag::Var tf = ag::Var::constant(time_features(t, cfg_.time_freqs));
    ag::Var temb = ag::add_row(ag::matmul(tf, p(time_w1)), p(time_b1));
    temb = ag::add_row(ag::matmul(ag::silu(temb), p(time_w2)), p(time_b2));

    // Visual tokens.
    ag::Var patches = patchify_var(x_t, shape, cfg_.p_t, cfg_.p_s);
    ag::Var h_vis = ag::add_row(ag::matmul(patches, p(patch_w)), p(patch_b));
    h_vis = ag::add(h_vis, ag::Var::constant(positional_encoding(lay, d)));
    h_vis = ag::add_row(h_vis, temb);

    // Prompt tokens.
    ag::Var h_prompt;
    if (prompt != nullptr) {
        prompt->validate();
        require(static_cast<int>(prompt->token_ids.size()) <= P, ErrorCode::dimension_mismatch, "prompt too long");
        auto idx = std::make_shared<std::vector<ag::Index>>();
        for (int i = 0; i < P; ++i) {
            const int tok = i < static_cast<int>(prompt->token_ids.size()) ? prompt->token_ids[static_cast<std::size_t>(i)]
                                                                            : synth::vocab::pad;
            require(tok < cfg_.vocab, ErrorCode::dimension_mismatch, "token id outside backbone vocabulary");
            for (int c = 0; c < d; ++c) idx->push_back(static_cast<ag::Index>(tok) * d + c);
        }
        h_prompt = ag::add(ag::gather(p(prompt_embed), idx, P, d), p(prompt_pos));
    } else {
        h_prompt = ag::add(p(prompt_null), p(prompt_pos));
    }

    std::vector<ag::Var> parts{h_prompt, temb, h_vis};
    ag::Var x = ag::concat_rows(parts);

    if (attention != nullptr) {
        attention->heads = cfg_.heads;
        attention->prompt_len = P;
        attention->tokens = L;
        attention->layers.clear();
        attention->weights.clear();
    }
    if (probe != nullptr) *probe = ForwardProbe{};

    auto field_sum = [&](InjectionPoint pt, int layer) -> ag::Var {
        ag::Var acc;
        for (const FieldEntry& e : field) {
            if (e.point != pt || e.layer != layer) continue;
            acc = acc.valid() ? ag::add(acc, e.add) : e.add;
        }
        return acc;
    };

    const int hd = cfg_.head_dim();
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(hd));
    for (int b = 0; b < cfg_.blocks; ++b) {
        auto w = [&](BlockSlot s) -> const ag::Var& { return p(block_slot(b, s)); };
        ag::Var a = ag::layer_norm_rows(x, w(ln1_g), w(ln1_b));
        ag::Var qkv = ag::add_row(ag::matmul(a, w(qkv_w)), w(qkv_b));
        std::vector<ag::Var> heads;
        ag::Mat captured;
        if (attention != nullptr) captured.resize(static_cast<ag::Index>(cfg_.heads) * P, L);
        for (int hh = 0; hh < cfg_.heads; ++hh) {
            ag::Var q = ag::slice_cols(qkv, hh * hd, hd);
            ag::Var k = ag::slice_cols(qkv, d + hh * hd, hd);
            ag::Var v = ag::slice_cols(qkv, 2 * d + hh * hd, hd);
            ag::Var probs = ag::softmax_rows(ag::scale(ag::matmul_nt(q, k), inv_sqrt));
            if (attention != nullptr) {
                for (int r = 0; r < P; ++r) {
                    auto row = probs.value().row(r).segment(vis, L);
                    captured.row(static_cast<ag::Index>(hh) * P + r) = row / row.sum();
                }
            }
            heads.push_back(ag::matmul(probs, v));
        }
        if (attention != nullptr) {
            attention->layers.push_back(b);
            attention->weights.push_back(std::move(captured));
        }
        ag::Var o = ag::add_row(ag::matmul(ag::concat_cols(heads), w(proj_w)), w(proj_b));
        if (probe != nullptr) probe->attn_out_before.push_back(o.value().middleRows(vis, L));
        if (ag::Var f = field_sum(InjectionPoint::post_self_attention_residual, b); f.valid()) {
            o = ag::add_rows(o, vis, f);
        }
        if (probe != nullptr) probe->attn_out_after.push_back(o.value().middleRows(vis, L));
        x = ag::add(x, o);
        ag::Var m = ag::layer_norm_rows(x, w(ln2_g), w(ln2_b));
        m = ag::add_row(ag::matmul(ag::gelu(ag::add_row(ag::matmul(m, w(mlp_w1)), w(mlp_b1))), w(mlp_w2)), w(mlp_b2));
        x = ag::add(x, m);
        if (probe != nullptr) probe->block_out_before.push_back(x.value().middleRows(vis, L));
        if (ag::Var f = field_sum(InjectionPoint::post_block, b); f.valid()) {
            x = ag::add_rows(x, vis, f);
        }
        if (probe != nullptr) probe->block_out_after.push_back(x.value().middleRows(vis, L));
    }

    const std::size_t fin = n_fixed + static_cast<std::size_t>(cfg_.blocks) * n_block;
    ag::Var hv = ag::slice_rows(x, vis, L);
    hv = ag::layer_norm_rows(hv, p(fin + lnf_g), p(fin + lnf_b));
    ag::Var out = ag::add_row(ag::matmul(hv, p(fin + out_w)), p(fin + out_b));
    return unpatchify_var(out, shape, cfg_.p_t, cfg_.p_s);
}

VideoTensor Backbone::velocity(const VideoTensor& x_t, double t, const synth::PromptCond* prompt,
                               std::span<const FieldEntry> field, AttentionRecord* attention) const {
    ag::Var v = velocity(ag::Var::constant(x_t.data), x_t.shape, t, prompt, field, attention, nullptr);
    VideoTensor out = VideoTensor::from_mat(x_t.shape, v.value());
    out.fps = x_t.fps;
    return out;
}

void Backbone::save(const std::filesystem::path& path) const {
    std::ofstream os(path, std::ios::binary);
    require(static_cast<bool>(os), ErrorCode::not_found, "cannot open " + path.string() + " for writing");
    nlohmann::json meta;
    meta["format_version"] = kCheckpointVersion;
    meta["config"] = cfg_.to_json();
    meta["vocab"] = std::vector<std::string>(synth::vocab::words.begin(), synth::vocab::words.end());
    meta["training"] = training_meta;
    nlohmann::json arrays = nlohmann::json::array();
    for (std::size_t i = 0; i < params_.size(); ++i) {
        arrays.push_back({{"name", names_[i]}, {"rows", params_[i].rows()}, {"cols", params_[i].cols()}});
    }
    meta["arrays"] = arrays;
    binio::put_magic(os, "TDBK");
    binio::put_u16(os, kCheckpointVersion);
    binio::put_string(os, meta.dump());
    for (const auto& v : params_) {
        const ag::Mat& m = v.value();
        for (ag::Index i = 0; i < m.size(); ++i) binio::put_f32(os, static_cast<float>(m.data()[i]));
    }
}

Backbone Backbone::load(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    require(static_cast<bool>(is), ErrorCode::not_found, "checkpoint not found: " + path.string());
    binio::expect_magic(is, "TDBK");
    const auto version = binio::get_u16(is, "version");
    require(version == kCheckpointVersion, ErrorCode::format, "unsupported checkpoint version " + std::to_string(version));
    nlohmann::json meta;
    try {
        meta = nlohmann::json::parse(binio::get_string(is, "metadata"));
    } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorCode::format, std::string("corrupt header: ") + e.what());
    }
    Backbone m(BackboneConfig::from_json(meta.at("config")), 0);
    m.training_meta = meta.value("training", nlohmann::json::object());
    const auto& arrays = meta.at("arrays");
    require(arrays.size() == m.params_.size(), ErrorCode::format, "checkpoint parameter count mismatch");
    for (std::size_t i = 0; i < arrays.size(); ++i) {
        require(arrays[i].at("name").get<std::string>() == m.names_[i] &&
                    arrays[i].at("rows").get<ag::Index>() == m.params_[i].rows() &&
                    arrays[i].at("cols").get<ag::Index>() == m.params_[i].cols(),
                ErrorCode::format, "checkpoint array mismatch at " + m.names_[i]);
        ag::Mat& w = m.params_[i].mutable_value();
        for (ag::Index k = 0; k < w.size(); ++k) w.data()[k] = binio::get_f32(is, "weights");
    }
    return m;
}

VideoTensor one_step_clean_estimate(const VideoTensor& x_t, double t, const VideoTensor& velocity) {
    require(x_t.shape == velocity.shape, ErrorCode::dimension_mismatch, "clean estimate: shape mismatch");
    VideoTensor out = x_t;
    out.data = x_t.data - t * velocity.data;
    return out;
}

ag::Var one_step_clean_estimate(const ag::Var& x_t, double t, const ag::Var& velocity) {
    return ag::sub(x_t, ag::scale(velocity, t));
}

std::vector<double> time_grid(int steps, double t_start) {
    require(steps >= 1, ErrorCode::precondition, "time grid needs at least one step");
    std::vector<double> g(static_cast<std::size_t>(steps) + 1);
    for (int i = 0; i <= steps; ++i) g[static_cast<std::size_t>(i)] = t_start * (1.0 - static_cast<double>(i) / steps);
    g.back() = 0.0;
    return g;
}

ag::Mat euler_integrate(const ag::Mat& noise, int steps, const VelocityField& field) {
    const auto grid = time_grid(steps);
    ag::Mat x = noise;
    for (int i = 0; i < steps; ++i) {
        const double t = grid[static_cast<std::size_t>(i)];
        const double dt = grid[static_cast<std::size_t>(i) + 1] - t;
        x += dt * field(x, t, i);
    }
    return x;
}

nlohmann::json BackboneTrainConfig::to_json() const {
    return {{"steps", steps},   {"batch", batch},       {"lr", lr},          {"cond_drop_prob", cond_drop_prob},
            {"grad_clip", grad_clip}, {"warmup", warmup}, {"seed", seed}};
}

void train_backbone(Backbone& model, const std::vector<synth::Clip>& data, const BackboneTrainConfig& cfg,
                    const BackboneLogFn& log) {
    require(!data.empty(), ErrorCode::precondition, "train_backbone: empty dataset");
    require(cfg.steps >= 0 && cfg.batch >= 1, ErrorCode::precondition, "train_backbone: bad step/batch config");
    model.training_meta = cfg.to_json();
    if (cfg.steps == 0) return;
    std::mt19937_64 rng(cfg.seed);
    std::uniform_int_distribution<std::size_t> pick(0, data.size() - 1);
    std::uniform_real_distribution<double> unif(0.0, 1.0);
    std::normal_distribution<double> normal(0.0, 1.0);
    AdamW opt;
    opt.lr = cfg.lr;
    model.set_trainable(true);
    auto& params = model.parameters();
    for (int step = 0; step < cfg.steps; ++step) {
        // Linear warmup, cosine decay to 10%.
        const double warm = cfg.warmup > 0 ? std::min(1.0, (step + 1.0) / cfg.warmup) : 1.0;
        const double prog = static_cast<double>(step) / std::max(1, cfg.steps - 1);
        opt.lr = cfg.lr * warm * (0.1 + 0.9 * 0.5 * (1.0 + std::cos(M_PI * prog)));
        double loss_sum = 0.0;
        for (int b = 0; b < cfg.batch; ++b) {
            const synth::Clip& clip = data[pick(rng)];
            const double t = unif(rng);
            ag::Mat x1(clip.video.data.rows(), clip.video.data.cols());
            for (ag::Index i = 0; i < x1.size(); ++i) x1.data()[i] = normal(rng);
            const bool drop = unif(rng) < cfg.cond_drop_prob;
            ag::Mat xt = (1.0 - t) * clip.video.data + t * x1;
            ag::Var target = ag::Var::constant(x1 - clip.video.data);
            ag::Var v = model.velocity(ag::Var::constant(std::move(xt)), clip.video.shape, t,
                                       drop ? nullptr : &clip.prompt);
            ag::Var loss = ag::scale(ag::mean(ag::square(ag::sub(v, target))), 1.0 / cfg.batch);
            loss_sum += loss.item();
            ag::backward(loss);
        }
        if (!std::isfinite(loss_sum)) {
            model.set_trainable(false);
            throw Error(ErrorCode::divergence, "train_backbone: non-finite loss at step " + std::to_string(step));
        }
        const double gn = clip_grad_norm(params, cfg.grad_clip);
        opt.step(params);
        for (auto& prm : params) prm.zero_grad();
        if (log) log({step, loss_sum, gn});
    }
    model.set_trainable(false);
    model.snap_to_f32();
}

ValidationLoss validation_loss(const Backbone& model, const std::vector<synth::Clip>& data, int draws_per_clip,
                               std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> unif(0.0, 1.0);
    std::normal_distribution<double> normal(0.0, 1.0);
    ValidationLoss out;
    int n = 0;
    for (const auto& clip : data) {
        for (int k = 0; k < draws_per_clip; ++k) {
            const double t = unif(rng);
            ag::Mat x1(clip.video.data.rows(), clip.video.data.cols());
            for (ag::Index i = 0; i < x1.size(); ++i) x1.data()[i] = normal(rng);
            ag::Mat target = x1 - clip.video.data;
            ag::Mat xt = (1.0 - t) * clip.video.data + t * x1;
            ag::Var v = model.velocity(ag::Var::constant(std::move(xt)), clip.video.shape, t, &clip.prompt);
            out.model += (v.value() - target).squaredNorm() / static_cast<double>(target.size());
            out.zero_predictor += target.squaredNorm() / static_cast<double>(target.size());
            ++n;
        }
    }
    out.model /= n;
    out.zero_predictor /= n;
    return out;
}

}  // namespace tokendial::bb
