#include "helpers.hpp"
#include "tokendial/trainer.hpp"

#include <doctest.h>

using namespace tokendial;
using ag::Mat;
using ag::Var;

namespace {

const VideoShape kShape{3, 4, 16, 16};

bb::Backbone tiny_backbone(std::uint64_t seed) {
    bb::BackboneConfig c;
    c.d = 16;
    c.blocks = 2;
    c.heads = 2;
    bb::Backbone m(c, seed);
    synth::SceneDistribution d;
    d.dims = kShape;
    bb::BackboneTrainConfig tc;
    tc.steps = 2;
    tc.warmup = 1;
    bb::train_backbone(m, synth::make_dataset(d, 2, seed), tc);
    return m;
}

perc::AppearanceEncoder tiny_encoder() {
    perc::EncoderConfig cfg;
    cfg.d_e = 8;
    cfg.conv1 = 4;
    cfg.conv2 = 4;
    cfg.hidden = 8;
    perc::AppearanceEncoder enc(cfg, 5);
    synth::SceneDistribution d;
    d.dims = kShape;
    perc::EncoderTrainConfig tc;
    tc.steps = 2;
    tc.batch = 2;
    perc::prepare_appearance_encoder(enc, synth::make_dataset(d, 4, 6), tc);
    return enc;
}

train::OffsetParams small_offset(std::uint64_t seed) {
    train::OffsetParams o;
    o.deltas[0] = Var::leaf(th::random_mat(1, 16, seed, 0.3), true);
    o.deltas[1] = Var::leaf(th::random_mat(1, 16, seed + 1, 0.3), true);
    return o;
}

VideoTensor moving_clip(double vx) {
    synth::SceneParams p;
    p.velocity = {vx, 0.0};
    p.start_position = {0.35, 0.5};
    p.radius = 0.2;
    return synth::render_video(p, kShape.frames, kShape.height, kShape.width);
}

}  // namespace

TEST_CASE("single-step refinement is the one-step clean estimate") {
    const auto m = tiny_backbone(1);
    const VideoTensor x0 = moving_clip(0.05);
    const Mat eps = VideoTensor::gaussian_noise(kShape, 2).data;
    const auto c = synth::parse_prompt("red disk");
    train::RefineConfig rc;
    rc.K = 0;
    const auto o = small_offset(3);
    const auto pair = train::refined_estimate(m, x0, 0.5, c, o, rc, eps);
    const Mat xt = 0.5 * x0.data + 0.5 * eps;
    const auto field = off::field_from_vars(o.deltas, o.point, std::vector<double>(32, 1.0));
    const Mat v_with = m.velocity(Var::constant(xt), kShape, 0.5, &c, field).value();
    const Mat v_without = m.velocity(VideoTensor::from_mat(kShape, xt), 0.5, &c).data;
    CHECK((pair.with.value() - (xt - 0.5 * v_with)).cwiseAbs().maxCoeff() < 1e-12);
    CHECK((pair.without.value() - (xt - 0.5 * v_without)).cwiseAbs().maxCoeff() < 1e-12);
    CHECK(pair.fine_with == pair.init_with);
    CHECK_FALSE(pair.without.requires_grad());
}

TEST_CASE("multi-step refinement forwards the refined value with the one-step gradient") {
    const auto m = tiny_backbone(4);
    const VideoTensor x0 = moving_clip(0.05);
    const Mat eps = VideoTensor::gaussian_noise(kShape, 5).data;
    const auto c = synth::parse_prompt("blue disk");
    const Mat w = th::random_mat(12, 256, 6);

    train::RefineConfig rc;
    rc.K = 3;
    auto o3 = small_offset(7);
    const auto refined = train::refined_estimate(m, x0, 0.6, c, o3, rc, eps);
    CHECK(refined.with.value() == refined.fine_with);
    CHECK(refined.fine_with != refined.init_with);
    ag::backward(ag::sum(ag::mul(refined.with, Var::constant(w))));

    rc.K = 0;
    auto o0 = small_offset(7);
    const auto single = train::refined_estimate(m, x0, 0.6, c, o0, rc, eps);
    CHECK(single.init_with == refined.init_with);
    ag::backward(ag::sum(ag::mul(single.with, Var::constant(w))));
    for (int k : {0, 1}) CHECK((o3.deltas[k].grad() - o0.deltas[k].grad()).cwiseAbs().maxCoeff() < 1e-12);

    CHECK_THROWS_AS(train::refined_estimate(m, x0, 0.95, c, o0, rc, eps), Error);
    CHECK_THROWS_AS(train::refined_estimate(m, x0, 0.5, c, o0, rc, Mat::Zero(2, 2)), Error);
}

TEST_CASE("direction loss is one minus cosine with a linear surrogate at zero") {
    const Mat tgt = th::random_mat(1, 5, 8).normalized();
    CHECK(th::grad_check({th::random_mat(1, 5, 9)}, [&](auto& v) { return train::direction_loss(v[0], tgt); }) < 1e-7);
    const Mat aligned = 3.0 * tgt;
    CHECK(train::direction_loss(Var::constant(aligned), tgt).item() == doctest::Approx(0.0).epsilon(1e-12));
    CHECK(train::direction_loss(Var::constant(Mat(-aligned)), tgt).item() == doctest::Approx(2.0).epsilon(1e-12));

    const Var zero = Var::leaf(Mat::Zero(1, 5), true);
    const Var l = train::direction_loss(zero, tgt);
    CHECK(l.item() == 1.0);
    ag::backward(l);
    CHECK((zero.grad() + tgt).cwiseAbs().maxCoeff() < 1e-15);
    CHECK_THROWS_AS(train::direction_loss(zero, th::random_mat(1, 4, 1)), Error);
}

TEST_CASE("appearance loss combines cosine and perceptual terms") {
    const auto enc = tiny_encoder();
    train::LossConfig cfg;
    cfg.d_tgt = perc::DirectionVector{th::random_mat(1, 8, 10).normalized(), true};
    const VideoTensor a = moving_clip(0.0), b = moving_clip(0.05);
    const auto parts = train::appearance_loss(enc, Var::constant(a.data), Var::constant(b.data), kShape, cfg);
    const Mat d_pred = enc.encode(a) - enc.encode(b);
    const double cos = (d_pred * cfg.d_tgt->v.transpose())(0, 0) / (d_pred.norm() * cfg.d_tgt->v.norm());
    CHECK(parts.main == doctest::Approx(1.0 - cos).epsilon(1e-10));
    CHECK(parts.reg == doctest::Approx(perc::perceptual_distance(a, b)).epsilon(1e-10));
    CHECK(parts.total.item() == doctest::Approx(parts.main + cfg.lambda_a * parts.reg).epsilon(1e-12));

    train::LossConfig no_target;
    CHECK_THROWS_AS(no_target.validate(), Error);
    CHECK_THROWS_AS(train::motion_loss(Var::constant(a.data), kShape, cfg), Error);
}

TEST_CASE("motion loss gradient matches a frozen-target finite difference") {
    const VideoShape s{3, 3, 16, 16};
    synth::SceneParams p;
    p.velocity = {0.05, 0.02};
    p.start_position = {0.4, 0.45};
    p.radius = 0.25;
    const VideoTensor v0 = synth::render_video(p, 3, 16, 16);
    const auto m0 = flow::motion_field(v0);
    for (double gamma : {1.0, 2.0}) {
        train::LossConfig cfg;
        cfg.kind = off::LossKind::motion;
        cfg.gamma = gamma;
        cfg.lambda_m = 0.0;
        const Var x = Var::leaf(v0.data, true);
        const auto parts = train::motion_loss(x, s, cfg);
        const double n = m0.valid.sum();
        REQUIRE(n > 0.0);
        CHECK(parts.main ==
              doctest::Approx((1.0 - gamma) * (1.0 - gamma) * (m0.u.squaredNorm() + m0.v.squaredNorm()) / n)
                  .epsilon(1e-9));
        ag::backward(parts.total);
        // Target frozen at v0: ||m(x) - gamma m(v0)||^2 / n.
        auto frozen = [&](const Mat& xv) {
            const auto m = flow::motion_field(VideoTensor::from_mat(s, xv));
            return ((m.u - gamma * m0.u).squaredNorm() + (m.v - gamma * m0.v).squaredNorm()) / n;
        };
        const double h = 1e-6;
        double worst = 0.0, scale = 0.0;
        for (ag::Index i = 0; i < v0.data.size(); i += 7) {
            Mat plus = v0.data, minus = v0.data;
            plus.data()[i] += h;
            minus.data()[i] -= h;
            const double fd = (frozen(plus) - frozen(minus)) / (2 * h);
            const double an = x.has_grad() ? x.grad().data()[i] : 0.0;
            worst = std::max(worst, std::abs(fd - an));
            scale = std::max(scale, std::abs(fd));
        }
        CHECK(worst <= 1e-5 * std::max(1.0, scale));
        if (gamma == 1.0) CHECK((x.has_grad() ? x.grad().norm() : 0.0) <= 1e-7);
    }
}

TEST_CASE("first-frame term evaluates to zero with vanishing gradient") {
    train::LossConfig cfg;
    cfg.kind = off::LossKind::motion;
    cfg.gamma = 1.0;
    cfg.lambda_m = 5.0;
    const Var x = Var::leaf(moving_clip(0.05).data, true);
    const auto parts = train::motion_loss(x, kShape, cfg);
    CHECK(std::abs(parts.reg) < 1e-12);
    ag::backward(parts.total);
    CHECK((x.has_grad() ? x.grad().norm() : 0.0) < 1e-6);
    cfg.gamma = 0.0;
    CHECK_THROWS_AS(cfg.validate(), Error);
}

TEST_CASE("offset training updates only the deltas") {
    const auto m = tiny_backbone(11);
    const auto enc = tiny_encoder();
    synth::SceneDistribution d;
    d.dims = kShape;
    const auto clips = synth::make_dataset(d, 3, 12);
    train::LossConfig loss;
    loss.d_tgt = perc::DirectionVector{th::random_mat(1, 8, 13).normalized(), true};
    train::RefineConfig rc;
    rc.K = 1;
    train::TrainOffsetConfig tc;
    tc.attribute_name = "brightness";
    tc.injection = {bb::InjectionPoint::post_block, {0, 1}};
    tc.steps = 3;
    tc.batch = 1;
    tc.lr = 1e-2;
    const std::string before = m.digest();
    int calls = 0;
    const auto res = train::train_offset(m, enc, clips, loss, rc, tc, [&](const train::OffsetLogEntry&) { ++calls; });
    CHECK(m.digest() == before);
    CHECK(res.backbone_digest == before);
    CHECK(calls == 3);
    CHECK(res.log.size() == 3);
    CHECK(res.offset.attribute_name == "brightness");
    CHECK(res.offset.entries.size() == 2);
    CHECK(res.offset.entries.at(0).norm() > 0.0);
    CHECK(res.offset.training_meta.steps == 3);
    CHECK(res.offset.training_meta.backbone_id == before);
    CHECK(train::format_log(res.log.front()).rfind("step=0 loss=", 0) == 0);

    // Same seed, same result.
    const auto again = train::train_offset(m, enc, clips, loss, rc, tc);
    CHECK(again.offset == res.offset);

    tc.injection.layers = {5};
    CHECK_THROWS_AS(train::train_offset(m, enc, clips, loss, rc, tc), Error);
    tc.injection.layers = {0};
    perc::AppearanceEncoder untrained(enc.config(), 1);
    CHECK_THROWS_AS(train::train_offset(m, untrained, clips, loss, rc, tc), Error);
}

TEST_CASE("refine config validation") {
    train::RefineConfig rc;
    rc.K = -1;
    CHECK_THROWS_AS(rc.validate(), Error);
    rc = {};
    rc.t_min = 0.0;
    CHECK_THROWS_AS(rc.validate(), Error);
    rc = {};
    rc.t_min = 0.9;
    rc.t_max = 0.3;
    CHECK_THROWS_AS(rc.validate(), Error);
}
