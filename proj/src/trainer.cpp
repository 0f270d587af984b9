#include "tokendial/trainer.hpp"

#include "tokendial/optim.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <random>

namespace tokendial::train {

namespace {

std::vector<double> uniform_mask(const bb::BackboneConfig& cfg, const VideoShape& shape) {
    return std::vector<double>(static_cast<std::size_t>(bb::make_layout(shape, cfg.p_t, cfg.p_s).size()), 1.0);
}

std::vector<bb::FieldEntry> frozen_field(const OffsetParams& offset, const std::vector<double>& mask) {
    std::map<int, ag::Var> detached;
    for (const auto& [k, d] : offset.deltas) detached[k] = ag::Var::constant(d.value());
    return off::field_from_vars(detached, offset.point, mask);
}

}  // namespace

void RefineConfig::validate() const {
    require(K >= 0, ErrorCode::precondition, "refine: K must be >= 0");
    require(t_min > 0.0 && t_min <= t_max && t_max <= 1.0, ErrorCode::precondition,
            "refine: need 0 < t_min <= t_max <= 1");
}

nlohmann::json RefineConfig::to_json() const {
    return {{"K", K}, {"t_min", t_min}, {"t_max", t_max}, {"straight_through", true}};
}

void LossConfig::validate() const {
    if (kind == off::LossKind::appearance) {
        require(d_tgt.has_value() && d_tgt->v.size() > 0, ErrorCode::precondition,
                "appearance loss requires a target direction");
    } else {
        require(std::isfinite(gamma) && gamma > 0.0, ErrorCode::precondition, "motion loss requires gamma > 0");
    }
}

nlohmann::json LossConfig::to_json() const {
    nlohmann::json j{{"kind", off::to_string(kind)}, {"lambda_a", lambda_a}, {"lambda_m", lambda_m}};
    if (kind == off::LossKind::motion) j["gamma"] = gamma;
    return j;
}

RefinedPair refined_estimate(const bb::Backbone& model, const VideoTensor& x0, double t, const synth::PromptCond& c,
                             const OffsetParams& offset, const RefineConfig& cfg, const ag::Mat& eps) {
    cfg.validate();
    require(t >= cfg.t_min && t <= cfg.t_max, ErrorCode::precondition, "refine: t outside [t_min, t_max]");
    require(eps.rows() == x0.data.rows() && eps.cols() == x0.data.cols(), ErrorCode::dimension_mismatch,
            "refine: noise shape mismatch");
    const VideoShape& s = x0.shape;
    const std::vector<double> mask = offset.mask.empty() ? uniform_mask(model.config(), s) : offset.mask;

    const ag::Mat xt = (1.0 - t) * x0.data + t * eps;
    const ag::Var xt_v = ag::Var::constant(xt);
    const auto field = off::field_from_vars(offset.deltas, offset.point, mask);
    const ag::Var v_with = model.velocity(xt_v, s, t, &c, field);
    const ag::Var init_with = bb::one_step_clean_estimate(xt_v, t, v_with);
    const ag::Mat v_without = model.velocity(xt_v, s, t, &c).value();

    RefinedPair out;
    out.init_with = init_with.value();
    if (cfg.K == 0) {
        out.with = init_with;
        out.fine_with = out.init_with;
        out.without = ag::Var::constant(xt - t * v_without);
        return out;
    }

    const auto frozen = frozen_field(offset, mask);
    auto unroll = [&](const ag::Mat& first_velocity, std::span<const bb::FieldEntry> fld) {
        ag::Mat x = xt;
        for (int k = 0; k < cfg.K; ++k) {
            const double tk = t * (1.0 - static_cast<double>(k) / cfg.K);
            const double tn = k + 1 == cfg.K ? 0.0 : t * (1.0 - static_cast<double>(k + 1) / cfg.K);
            if (k == 0) {
                x += (tn - tk) * first_velocity;
            } else {
                x += (tn - tk) * model.velocity(ag::Var::constant(x), s, tk, &c, fld).value();
            }
        }
        return x;
    };
    out.fine_with = unroll(v_with.value(), frozen);
    out.with = ag::straight_through(init_with, out.fine_with);
    out.without = ag::Var::constant(unroll(v_without, {}));
    return out;
}

ag::Var direction_loss(const ag::Var& d_pred, const ag::Mat& d_tgt) {
    require(d_pred.cols() == d_tgt.cols() && d_pred.rows() == 1 && d_tgt.rows() == 1, ErrorCode::dimension_mismatch,
            "direction loss: dimension mismatch");
    const ag::Var tgt = ag::Var::constant(d_tgt);
    if (d_pred.value().norm() < 1e-8) {
        const ag::Var lin = ag::add_scalar(ag::neg(ag::dot(d_pred, tgt)), 1.0);
        return ag::straight_through(lin, ag::Mat::Constant(1, 1, 1.0));
    }
    return ag::add_scalar(ag::neg(ag::cosine(d_pred, tgt)), 1.0);
}

LossParts appearance_loss(const perc::AppearanceEncoder& enc, const ag::Var& with, const ag::Var& without,
                          const VideoShape& shape, const LossConfig& cfg) {
    require(cfg.kind == off::LossKind::appearance, ErrorCode::precondition, "appearance_loss: wrong loss kind");
    cfg.validate();
    require(enc.trained(), ErrorCode::not_trained, "encoder not trained");
    const ag::Var d_pred = ag::sub(enc.encode(with, shape), enc.encode(without, shape));
    const ag::Var cos_term = direction_loss(d_pred, cfg.d_tgt->v);
    const ag::Var percep = perc::perceptual_distance(with, without, shape);
    LossParts out;
    out.main = cos_term.item();
    out.reg = percep.item();
    out.total = ag::add(cos_term, ag::scale(percep, cfg.lambda_a));
    return out;
}

LossParts motion_loss(const ag::Var& with, const VideoShape& shape, const LossConfig& cfg, const flow::LkConfig& lk) {
    require(cfg.kind == off::LossKind::motion, ErrorCode::precondition, "motion_loss: wrong loss kind");
    cfg.validate();
    require(shape.frames >= 2, ErrorCode::precondition, "motion_loss: need at least two frames");
    const flow::FlowVars m = flow::motion_field(with, shape, lk);
    const double n_valid = m.valid.sum();
    ag::Var l_mot = ag::Var::scalar(0.0);
    if (n_valid > 0.0) {
        const ag::Var du = ag::sub(m.u, ag::scale(ag::detach(m.u), cfg.gamma));
        const ag::Var dv = ag::sub(m.v, ag::scale(ag::detach(m.v), cfg.gamma));
        l_mot = ag::scale(ag::add(ag::sum(ag::square(du)), ag::sum(ag::square(dv))), 1.0 / n_valid);
    }
    const ag::Var f0 = ag::slice_rows(perc::video_features(with, shape), 0, 1);
    const ag::Var l_ff = ag::add_scalar(ag::neg(ag::cosine(f0, ag::detach(f0))), 1.0);
    LossParts out;
    out.main = l_mot.item();
    out.reg = l_ff.item();
    out.total = ag::add(l_mot, ag::scale(l_ff, cfg.lambda_m));
    return out;
}

nlohmann::json TrainOffsetConfig::to_json() const {
    return {{"attribute_name", attribute_name},
            {"injection_point", bb::to_string(injection.point)},
            {"layers", injection.layers},
            {"steps", steps},
            {"batch", batch},
            {"lr", lr},
            {"weight_decay", weight_decay},
            {"seed", seed},
            {"reference_optimizer", {{"lr", 1e-5}, {"steps", 300}}}};
}

std::string format_log(const OffsetLogEntry& e) {
    char buf[160];
    std::snprintf(buf, sizeof buf, "step=%d loss=%.6g main=%.6g reg=%.6g grad_norm=%.6g", e.step, e.loss, e.main,
                  e.reg, e.grad_norm);
    return buf;
}

TrainOffsetResult train_offset(const bb::Backbone& model, const perc::AppearanceEncoder& enc,
                               const std::vector<synth::Clip>& data, const LossConfig& loss_cfg,
                               const RefineConfig& refine_cfg, const TrainOffsetConfig& cfg, const OffsetLogFn& log) {
    require(!data.empty(), ErrorCode::precondition, "train_offset: empty dataset");
    require(cfg.steps >= 0 && cfg.batch >= 1 && cfg.lr > 0.0, ErrorCode::precondition, "train_offset: bad config");
    loss_cfg.validate();
    refine_cfg.validate();
    cfg.injection.validate(model.config().blocks);
    if (loss_cfg.kind == off::LossKind::appearance) {
        require(enc.trained(), ErrorCode::not_trained, "encoder not trained");
    }
    for (const auto& p : model.parameters()) {
        require(!p.requires_grad(), ErrorCode::precondition, "train_offset: backbone must be frozen");
    }

    TrainOffsetResult res;
    res.backbone_digest = model.digest();
    res.encoder_digest = enc.digest();

    const int d = model.config().d;
    OffsetParams offset;
    offset.point = cfg.injection.point;
    std::vector<ag::Var> params;
    for (int k : cfg.injection.layers) {
        ag::Var v = ag::Var::leaf(ag::Mat::Zero(1, d), true);
        offset.deltas[k] = v;
        params.push_back(v);
    }

    std::mt19937_64 rng(cfg.seed);
    std::uniform_int_distribution<std::size_t> pick(0, data.size() - 1);
    std::uniform_real_distribution<double> t_dist(refine_cfg.t_min, refine_cfg.t_max);
    std::normal_distribution<double> normal(0.0, 1.0);
    AdamW opt;
    opt.lr = cfg.lr;
    opt.weight_decay = cfg.weight_decay;

    for (int step = 0; step < cfg.steps; ++step) {
        OffsetLogEntry entry;
        entry.step = step;
        for (int b = 0; b < cfg.batch; ++b) {
            const synth::Clip& clip = data[pick(rng)];
            const double t = t_dist(rng);
            ag::Mat eps(clip.video.data.rows(), clip.video.data.cols());
            for (ag::Index i = 0; i < eps.size(); ++i) eps.data()[i] = normal(rng);
            const RefinedPair pair = refined_estimate(model, clip.video, t, clip.prompt, offset, refine_cfg, eps);
            const LossParts parts = loss_cfg.kind == off::LossKind::appearance
                                        ? appearance_loss(enc, pair.with, pair.without, clip.video.shape, loss_cfg)
                                        : motion_loss(pair.with, clip.video.shape, loss_cfg);
            const ag::Var loss = ag::scale(parts.total, 1.0 / cfg.batch);
            entry.loss += loss.item();
            entry.main += parts.main / cfg.batch;
            entry.reg += parts.reg / cfg.batch;
            ag::backward(loss);
        }
        double sq = 0.0;
        for (auto& p : params)
            if (p.has_grad()) sq += p.grad().squaredNorm();
        entry.grad_norm = std::sqrt(sq);
        if (!std::isfinite(entry.loss) || !std::isfinite(entry.grad_norm)) {
            if (!cfg.diagnostics_dir.empty()) {
                std::filesystem::create_directories(cfg.diagnostics_dir);
                nlohmann::json diag{{"step", step}, {"loss", std::to_string(entry.loss)},
                                    {"grad_norm", std::to_string(entry.grad_norm)}, {"config", cfg.to_json()}};
                for (const auto& [k, v] : offset.deltas) diag["delta_norms"][std::to_string(k)] = v.value().norm();
                std::ofstream(cfg.diagnostics_dir / "divergence.json") << diag.dump(2) << "\n";
            }
            throw Error(ErrorCode::divergence, "train_offset: non-finite loss at step " + std::to_string(step));
        }
        opt.step(params);
        for (auto& p : params) p.zero_grad();
        res.log.push_back(entry);
        if (log) log(entry);
    }

    require(model.digest() == res.backbone_digest && enc.digest() == res.encoder_digest, ErrorCode::conflict,
            "train_offset: frozen weights changed during training");

    off::TokenOffsetSet out;
    out.attribute_name = cfg.attribute_name;
    out.d = d;
    out.injection = cfg.injection;
    for (const auto& [k, v] : offset.deltas) {
        ag::Mat m = v.value();
        for (ag::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<float>(m.data()[i]);
        out.entries[k] = std::move(m);
    }
    out.training_meta.loss_kind = loss_cfg.kind;
    out.training_meta.lambda = loss_cfg.lambda();
    if (loss_cfg.kind == off::LossKind::motion) out.training_meta.gamma = loss_cfg.gamma;
    out.training_meta.steps = cfg.steps;
    out.training_meta.seed = cfg.seed;
    out.training_meta.backbone_id = res.backbone_digest;
    out.training_meta.config = {{"train", cfg.to_json()}, {"loss", loss_cfg.to_json()}, {"refine", refine_cfg.to_json()},
                                {"encoder_id", res.encoder_digest}};
    out.validate();
    res.offset = std::move(out);
    return res;
}

}  // namespace tokendial::train
