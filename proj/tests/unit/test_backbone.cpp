#include "helpers.hpp"
#include "tokendial/offsets.hpp"

#include <doctest.h>

#include <filesystem>
#include <fstream>

using namespace tokendial;
using ag::Mat;
using ag::Var;

namespace {

bb::BackboneConfig small_config() {
    bb::BackboneConfig c;
    c.d = 32;
    c.blocks = 3;
    c.heads = 2;
    return c;
}

VideoTensor noise(VideoShape s, std::uint64_t seed) { return VideoTensor::gaussian_noise(s, seed); }

// The output head starts at zero; a couple of steps make the velocity depend on the input.
bb::Backbone lively(std::uint64_t seed) {
    bb::Backbone m(small_config(), seed);
    synth::SceneDistribution d;
    d.dims = {3, 4, 16, 16};
    bb::BackboneTrainConfig tc;
    tc.steps = 2;
    tc.warmup = 1;
    bb::train_backbone(m, synth::make_dataset(d, 2, seed), tc);
    return m;
}

}  // namespace

TEST_CASE("patchify token count and exact round trip") {
    const VideoShape s{3, 8, 32, 32};
    const VideoTensor v = noise(s, 1);
    const auto seq = bb::patchify(v, 2, 4);
    CHECK(seq.layout.size() == 4 * 8 * 8);
    CHECK(seq.tokens.rows() == 256);
    CHECK(seq.tokens.cols() == 3 * 2 * 4 * 4);
    CHECK(bb::unpatchify(seq, s, 2, 4).data == v.data);
    CHECK_THROWS_AS(bb::patchify(noise({3, 8, 30, 32}, 1), 2, 4), Error);
    CHECK_THROWS_AS(bb::patchify(noise({3, 7, 32, 32}, 1), 2, 4), Error);
}

TEST_CASE("patch vectors hold the pixels of their patch") {
    const VideoShape s{3, 4, 8, 8};
    const VideoTensor v = noise(s, 2);
    const auto seq = bb::patchify(v, 2, 4);
    const int i = seq.layout.index(1, 0, 1);  // frames 2-3, rows 0-3, cols 4-7
    double manual = 0.0, from_token = seq.tokens.row(i).sum();
    for (int c = 0; c < 3; ++c)
        for (int f = 2; f < 4; ++f)
            for (int y = 0; y < 4; ++y)
                for (int x = 4; x < 8; ++x) manual += v.at(c, f, y, x);
    CHECK(from_token == doctest::Approx(manual).epsilon(1e-12));
}

TEST_CASE("differentiable patchify agrees with the plain version") {
    const VideoShape s{3, 4, 8, 8};
    const VideoTensor v = noise(s, 3);
    const Var t = bb::patchify_var(Var::constant(v.data), s, 2, 4);
    CHECK(t.value() == bb::patchify(v, 2, 4).tokens);
    CHECK(bb::unpatchify_var(t, s, 2, 4).value() == v.data);
    CHECK(th::grad_check({v.data}, [&](auto& x) {
              return ag::sum(ag::square(bb::patchify_var(x[0], s, 2, 4)));
          }) < 1e-7);
}

TEST_CASE("token layout centres are normalized") {
    const auto layout = bb::make_layout({3, 8, 32, 32}, 2, 4);
    const auto c0 = layout.center(0);
    const auto cl = layout.center(layout.size() - 1);
    CHECK(c0[0] == doctest::Approx(0.125));
    CHECK(c0[1] == doctest::Approx(0.0625));
    CHECK(cl[2] == doctest::Approx(1.0 - 0.0625));
    for (int i = 0; i < layout.size(); ++i) {
        const auto p = layout.position(i);
        CHECK(layout.index(p[0], p[1], p[2]) == i);
    }
}

TEST_CASE("clean estimate identities") {
    const VideoShape s{3, 2, 16, 16};
    const VideoTensor x0 = noise(s, 5), x1 = noise(s, 6);
    const double t = 0.37;
    VideoTensor xt = VideoTensor::from_mat(s, (1 - t) * x0.data + t * x1.data);
    VideoTensor vel = VideoTensor::from_mat(s, x1.data - x0.data);
    CHECK((bb::one_step_clean_estimate(xt, t, vel).data - x0.data).cwiseAbs().maxCoeff() < 1e-14);
    CHECK(bb::one_step_clean_estimate(xt, 0.0, vel).data == xt.data);
    CHECK((bb::one_step_clean_estimate(x1, 1.0, vel).data - x0.data).cwiseAbs().maxCoeff() < 1e-14);
}

TEST_CASE("time grid and Euler integration") {
    const auto g = bb::time_grid(4);
    REQUIRE(g.size() == 5);
    CHECK(g.front() == 1.0);
    CHECK(g.back() == 0.0);
    const Mat n = th::random_mat(3, 5, 7);
    CHECK(bb::euler_integrate(n, 1, [](const Mat& x, double, int) { return Mat::Zero(x.rows(), x.cols()); }) == n);
    // dx/dt = c integrates to x - c over [1, 0].
    const Mat out = bb::euler_integrate(n, 8, [](const Mat& x, double, int) { return Mat::Constant(x.rows(), x.cols(), 2.0); });
    CHECK((out - (n.array() - 2.0).matrix()).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("zero offsets and zero masks are exact no-ops at both injection points") {
    const bb::Backbone m = lively(3);
    const VideoShape s{3, 4, 16, 16};
    const VideoTensor x = noise(s, 8);
    const auto c = synth::parse_prompt("red disk");
    const Mat base = m.velocity(x, 0.6, &c).data;
    const int L = bb::make_layout(s, 2, 4).size();
    for (auto point : {bb::InjectionPoint::post_block, bb::InjectionPoint::post_self_attention_residual}) {
        const auto zero = off::TokenOffsetSet::zeros("z", 32, {point, {0, 1, 2}});
        off::MaskSpec uniform;
        uniform.values.assign(L, 1.0);
        CHECK(m.velocity(x, 0.6, &c, off::compose({{&zero, &uniform, 1.0}}, L)).data == base);

        auto nonzero = zero;
        for (auto& [k, d] : nonzero.entries) d = th::random_mat(1, 32, 10 + k);
        off::MaskSpec empty;
        empty.values.assign(L, 0.0);
        const auto field = off::field_from_vars({{0, Var::constant(nonzero.entries[0])}}, point, empty.values);
        CHECK(m.velocity(x, 0.6, &c, field).data == base);
        CHECK(m.velocity(x, 0.6, &c, off::compose({{&nonzero, &uniform, 1.0}}, L)).data != base);
    }
}

TEST_CASE("post-block injection adds the offset to the hidden token exactly") {
    const bb::Backbone m(small_config(), 4);
    const VideoShape s{3, 2, 16, 16};
    const VideoTensor x = noise(s, 9);
    const int L = bb::make_layout(s, 2, 4).size();
    const Mat delta = th::random_mat(1, 32, 11);
    std::vector<double> mask(L, 0.0);
    mask[5] = 1.0;
    for (auto point : {bb::InjectionPoint::post_block, bb::InjectionPoint::post_self_attention_residual}) {
        const auto field = off::field_from_vars({{1, Var::constant(delta)}}, point, mask);
        bb::ForwardProbe probe;
        m.velocity(Var::constant(x.data), s, 0.5, nullptr, field, nullptr, &probe);
        const auto& before = point == bb::InjectionPoint::post_block ? probe.block_out_before : probe.attn_out_before;
        const auto& after = point == bb::InjectionPoint::post_block ? probe.block_out_after : probe.attn_out_after;
        REQUIRE(before.size() == 3);
        for (int i = 0; i < L; ++i) {
            Mat expect = before[1].row(i);
            if (i == 5) expect += delta;
            CHECK(after[1].row(i) == expect);
        }
        CHECK(after[0] == before[0]);
        CHECK(after.back().rows() == L);
    }
}

TEST_CASE("captured attention rows are stochastic over visual tokens") {
    const bb::Backbone m(small_config(), 5);
    const VideoShape s{3, 4, 16, 16};
    const auto c = synth::parse_prompt("blue square");
    bb::AttentionRecord rec;
    m.velocity(noise(s, 12), 0.8, &c, {}, &rec);
    REQUIRE(rec.layers.size() == 3);
    CHECK(rec.tokens == bb::make_layout(s, 2, 4).size());
    for (const auto& w : rec.weights) {
        CHECK(w.rows() == rec.heads * rec.prompt_len);
        for (int r = 0; r < w.rows(); ++r) CHECK(std::abs(w.row(r).sum() - 1.0) <= 1e-5);
        CHECK(w.minCoeff() >= 0.0);
    }
}

TEST_CASE("velocity is deterministic and resolution agnostic") {
    const bb::Backbone m = lively(6);
    const auto c = synth::parse_prompt("green disk");
    const VideoTensor a = noise({3, 4, 16, 16}, 13);
    CHECK(m.velocity(a, 0.3, &c).data == m.velocity(a, 0.3, &c).data);
    const VideoTensor big = noise({3, 6, 24, 20}, 14);
    const VideoTensor v = m.velocity(big, 0.3, &c);
    CHECK(v.shape == big.shape);
    CHECK(v.finite());
}

TEST_CASE("training with zero steps leaves weights untouched and checkpoints round trip") {
    bb::Backbone m(small_config(), 7);
    const std::string before = m.digest();
    synth::SceneDistribution d;
    d.dims = {3, 4, 16, 16};
    const auto clips = synth::make_dataset(d, 4, 1);
    bb::BackboneTrainConfig tc;
    tc.steps = 0;
    bb::train_backbone(m, clips, tc);
    CHECK(m.digest() == before);

    tc.steps = 3;
    tc.warmup = 1;
    bb::train_backbone(m, clips, tc);
    CHECK(m.digest() != before);
    for (const auto& p : m.parameters()) CHECK_FALSE(p.requires_grad());

    const auto path = std::filesystem::temp_directory_path() / "tokendial_bk_rt.tdbk";
    m.save(path);
    const bb::Backbone back = bb::Backbone::load(path);
    CHECK(back.digest() == bb::Backbone::load(path).digest());
    const VideoTensor x = noise({3, 4, 16, 16}, 15);
    const auto c = synth::parse_prompt("red disk");
    CHECK(back.velocity(x, 0.5, &c).data == bb::Backbone::load(path).velocity(x, 0.5, &c).data);
    std::filesystem::remove(path);
}

TEST_CASE("loading rejects foreign files") {
    const auto path = std::filesystem::temp_directory_path() / "tokendial_bad.tdbk";
    {
        std::ofstream os(path, std::ios::binary);
        os << "NOPE and some bytes";
    }
    CHECK_THROWS_AS(bb::Backbone::load(path), Error);
    std::filesystem::remove(path);
    CHECK_THROWS_AS(bb::Backbone::load(path), Error);
}

TEST_CASE("offset parameter count is layers times width") {
    const auto z = off::TokenOffsetSet::zeros("a", 128, {bb::InjectionPoint::post_block, {0, 1, 2, 3, 4, 5}});
    CHECK(z.parameter_count() == 6 * 128);
}
