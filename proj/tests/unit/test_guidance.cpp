#include "helpers.hpp"
#include "tokendial/guidance.hpp"

#include <doctest.h>

using namespace tokendial;
using ag::Mat;

namespace {

const VideoShape kShape{3, 4, 16, 16};

bb::Backbone tiny_backbone(std::uint64_t seed) {
    bb::BackboneConfig c;
    c.d = 16;
    c.blocks = 3;
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

off::TokenOffsetSet random_offset(const std::string& name, std::uint64_t seed, std::vector<int> layers = {0, 1, 2}) {
    auto o = off::TokenOffsetSet::zeros(name, 16, {bb::InjectionPoint::post_block, layers});
    for (auto& [k, v] : o.entries) v = th::random_mat(1, 16, seed + static_cast<std::uint64_t>(k), 0.5);
    return o;
}

guide::GuidanceConfig small_config() {
    guide::GuidanceConfig g;
    g.shape = kShape;
    g.steps = 4;
    g.s_txt = 3.0;
    g.seed = 7;
    return g;
}

const int kTokens = 32;

}  // namespace

TEST_CASE("guidance scale interpolates between the null and conditional velocities") {
    const auto m = tiny_backbone(1);
    const auto c = synth::parse_prompt("red disk");
    const Mat x = VideoTensor::gaussian_noise(kShape, 2).data;
    const Mat v_null = m.velocity(VideoTensor::from_mat(kShape, x), 0.7, nullptr).data;
    const Mat v_c = m.velocity(VideoTensor::from_mat(kShape, x), 0.7, &c).data;
    auto cfg = small_config();
    cfg.s_txt = 1.0;
    CHECK(guide::composed_update(m, x, kShape, 0.7, c, cfg, {}).update == v_c);
    cfg.s_txt = 0.0;
    CHECK(guide::composed_update(m, x, kShape, 0.7, c, cfg, {}).update == v_null);
    cfg.s_txt = 4.5;
    const auto g = guide::composed_update(m, x, kShape, 0.7, c, cfg, {});
    CHECK((g.update - (-3.5 * v_null + 4.5 * v_c)).cwiseAbs().maxCoeff() < 1e-12);
    CHECK(g.calls == 2);
    CHECK(g.cfg_norm == doctest::Approx((v_c - v_null).norm()));
}

TEST_CASE("edit terms are differential velocities scaled by strength") {
    const auto m = tiny_backbone(3);
    const auto c = synth::parse_prompt("blue square");
    const Mat x = VideoTensor::gaussian_noise(kShape, 4).data;
    const auto a = random_offset("a", 10);
    const std::vector<std::vector<double>> masks{std::vector<double>(kTokens, 1.0)};
    auto cfg = small_config();
    cfg.edits.push_back({&a, 0.5, off::MaskSpec::uniform()});
    const auto half = guide::composed_update(m, x, kShape, 0.6, c, cfg, masks);
    cfg.edits[0].s_edit = 1.0;
    const auto one = guide::composed_update(m, x, kShape, 0.6, c, cfg, masks);
    cfg.edits[0].s_edit = -2.0;
    const auto neg = guide::composed_update(m, x, kShape, 0.6, c, cfg, masks);
    CHECK(one.calls == 3);
    const Mat unit = one.edit_terms[0];
    CHECK(unit.norm() > 0.0);
    CHECK((half.edit_terms[0] - 0.5 * unit).cwiseAbs().maxCoeff() <= 1e-14 * unit.cwiseAbs().maxCoeff() + 1e-300);
    CHECK((neg.edit_terms[0] + 2.0 * unit).cwiseAbs().maxCoeff() <= 1e-14 * unit.cwiseAbs().maxCoeff() + 1e-300);
    CHECK((one.update - (one.base + unit)).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("zero strength edits skip the offset call and leave the update untouched") {
    const auto m = tiny_backbone(5);
    const auto c = synth::parse_prompt("green disk");
    const Mat x = VideoTensor::gaussian_noise(kShape, 6).data;
    const auto a = random_offset("a", 11);
    auto cfg = small_config();
    const auto plain = guide::composed_update(m, x, kShape, 0.5, c, cfg, {});
    cfg.edits.push_back({&a, 0.0, off::MaskSpec::uniform()});
    const auto g = guide::composed_update(m, x, kShape, 0.5, c, cfg, {std::vector<double>(kTokens, 1.0)});
    CHECK(g.calls == 2);
    CHECK(g.update == plain.update);
    CHECK(g.edit_terms[0].isZero(0.0));

    const auto base = guide::generate(m, c, small_config());
    const auto edited = guide::generate(m, c, cfg);
    CHECK(edited.video.data == base.video.data);
    CHECK(edited.raw == base.raw);
    CHECK(edited.trace.velocity_calls == base.trace.velocity_calls);
}

TEST_CASE("multiple edits add their terms and joint mode matches a single edit") {
    const auto m = tiny_backbone(7);
    const auto c = synth::parse_prompt("red square");
    const Mat x = VideoTensor::gaussian_noise(kShape, 8).data;
    const auto a = random_offset("a", 12), b = random_offset("b", 13, {1});
    std::vector<double> left(kTokens, 0.0);
    for (int i = 0; i < kTokens; i += 2) left[i] = 1.0;
    auto cfg = small_config();
    cfg.edits.push_back({&a, 0.8, off::MaskSpec::uniform()});
    cfg.edits.push_back({&b, -0.4, off::MaskSpec::uniform()});
    const std::vector<std::vector<double>> masks{std::vector<double>(kTokens, 1.0), left};
    const auto g = guide::composed_update(m, x, kShape, 0.4, c, cfg, masks);
    CHECK(g.calls == 4);
    REQUIRE(g.edit_terms.size() == 2);
    CHECK((g.update - (g.base + g.edit_terms[0] + g.edit_terms[1])).cwiseAbs().maxCoeff() < 1e-12);

    auto single = small_config();
    single.edits.push_back({&a, 1.0, off::MaskSpec::uniform()});
    auto joint = single;
    joint.joint_edits = true;
    const auto gs = guide::composed_update(m, x, kShape, 0.4, c, single, {masks[0]});
    const auto gj = guide::composed_update(m, x, kShape, 0.4, c, joint, {masks[0]});
    CHECK(gj.calls == 3);
    CHECK(gj.update == gs.update);

    joint.edits = cfg.edits;
    CHECK(guide::composed_update(m, x, kShape, 0.4, c, joint, masks).calls == 3);
}

TEST_CASE("attention aggregation averages heads, layers and steps before sharpening") {
    bb::AttentionRecord r1, r2;
    for (auto* r : {&r1, &r2}) {
        r->heads = 2;
        r->prompt_len = 2;
        r->tokens = 3;
        r->layers = {0, 1};
    }
    // rows: head0/p0, head0/p1, head1/p0, head1/p1
    Mat w(4, 3);
    w << 0.2, 0.3, 0.5, 0.9, 0.0, 0.1, 0.4, 0.4, 0.2, 0.0, 0.0, 1.0;
    r1.weights = {w, Mat::Constant(4, 3, 1.0 / 3.0)};
    r2.weights = {Mat(w * 0.0 + Mat::Constant(4, 3, 1.0 / 3.0)), w};

    guide::MaskExtractionConfig cfg;
    cfg.layers = {0};
    cfg.power = 1.0;
    cfg.normalization = "none";
    // Concept row 0 at layer 0: r1 heads (0.2,0.3,0.5), (0.4,0.4,0.2); r2 uniform.
    auto out = guide::aggregate_attention({r1, r2}, 0, cfg, 3);
    const double third = 1.0 / 3.0;
    CHECK(out[0] == doctest::Approx((0.2 + 0.4 + 2 * third) / 4));
    CHECK(out[1] == doctest::Approx((0.3 + 0.4 + 2 * third) / 4));
    CHECK(out[2] == doctest::Approx((0.5 + 0.2 + 2 * third) / 4));

    cfg.normalization = "max";
    cfg.power = 2.0;
    cfg.layers = {0, 1};
    out = guide::aggregate_attention({r1}, 1, cfg, 3);
    // Concept row 1: layer 0 heads (0.9,0,0.1), (0,0,1); layer 1 uniform twice.
    const double a0 = (0.9 + 0.0 + 2 * third) / 4, a1 = (0.0 + 0.0 + 2 * third) / 4, a2 = (0.1 + 1.0 + 2 * third) / 4;
    const double mx = std::max({a0, a1, a2});
    CHECK(out[0] == doctest::Approx(std::pow(a0 / mx, 2)));
    CHECK(out[1] == doctest::Approx(std::pow(a1 / mx, 2)));
    CHECK(out[2] == doctest::Approx(1.0));

    CHECK_THROWS_AS(guide::aggregate_attention({}, 0, cfg, 3), Error);
    CHECK_THROWS_AS(guide::aggregate_attention({r1}, 2, cfg, 3), Error);
    cfg.layers = {2};
    CHECK_THROWS_AS(guide::aggregate_attention({r1}, 0, cfg, 3), Error);
}

TEST_CASE("default mask layers are the middle third") {
    CHECK(guide::default_mask_layers(6) == std::vector<int>{2, 3});
    CHECK(guide::default_mask_layers(3) == std::vector<int>{1});
    CHECK(guide::default_mask_layers(1) == std::vector<int>{0});
    CHECK(guide::default_mask_layers(9) == std::vector<int>{3, 4, 5});
}

TEST_CASE("extracted attention masks are normalized soft gates") {
    const auto m = tiny_backbone(9);
    const auto c = synth::parse_prompt("blue disk");
    auto cfg = small_config();
    const auto mask = guide::extract_attention_mask(m, c, c.concept_token_index, cfg);
    CHECK(mask.source == off::MaskSource::attention);
    REQUIRE(mask.values.size() == kTokens);
    CHECK(*std::max_element(mask.values.begin(), mask.values.end()) == doctest::Approx(1.0));
    CHECK(*std::min_element(mask.values.begin(), mask.values.end()) >= 0.0);
    CHECK(guide::extract_attention_mask(m, c, c.concept_token_index, cfg).values == mask.values);

    const auto a = random_offset("a", 14);
    cfg.edits.push_back({&a, 1.0, off::MaskSpec::attention()});
    const auto res = guide::generate(m, c, cfg);
    REQUIRE(res.masks.size() == 1);
    CHECK(res.masks[0].values == mask.values);
    CHECK(res.trace.masks[0].source == "attention");
}

TEST_CASE("generation is deterministic, clamped and traced") {
    const auto m = tiny_backbone(11);
    const auto c = synth::parse_prompt("red disk");
    auto cfg = small_config();
    const auto a = random_offset("a", 15);
    off::MaskGeometry box;
    box.x1 = 0.5;
    cfg.edits.push_back({&a, 0.7, off::MaskSpec::box(box)});
    const auto r1 = guide::generate(m, c, cfg);
    const auto r2 = guide::generate(m, c, cfg);
    CHECK(r1.video.data == r2.video.data);
    CHECK(r1.video.data.minCoeff() >= 0.0);
    CHECK(r1.video.data.maxCoeff() <= 1.0);
    CHECK(r1.trace.steps.size() == 4);
    CHECK(r1.trace.velocity_calls == 4 * 3);
    CHECK(r1.trace.config_digest == cfg.digest());
    CHECK(r1.trace.masks[0].mean == doctest::Approx(0.5));
    const auto j = r1.trace.to_json();
    CHECK(j.at("steps").size() == 4);
    CHECK(j.at("steps")[0].at("edit_norms").size() == 1);

    cfg.seed = 8;
    CHECK(guide::generate(m, c, cfg).video.data != r1.video.data);
    CHECK(cfg.digest() != r1.trace.config_digest);
}

TEST_CASE("guidance config validation") {
    auto cfg = small_config();
    cfg.steps = 0;
    CHECK_THROWS_AS(cfg.validate(), Error);
    cfg = small_config();
    cfg.s_txt = -1.0;
    CHECK_THROWS_AS(cfg.validate(), Error);
    cfg = small_config();
    cfg.edits.push_back({nullptr, 1.0, {}});
    CHECK_THROWS_AS(cfg.validate(), Error);
    cfg = small_config();
    cfg.mask_extraction.normalization = "softmax";
    CHECK_THROWS_AS(cfg.validate(), Error);

    const auto m = tiny_backbone(13);
    const auto wide = off::TokenOffsetSet::zeros("w", 32, {bb::InjectionPoint::post_block, {0}});
    cfg = small_config();
    cfg.edits.push_back({&wide, 1.0, off::MaskSpec::uniform()});
    CHECK_THROWS_AS(guide::generate(m, synth::parse_prompt("red disk"), cfg), Error);
}
