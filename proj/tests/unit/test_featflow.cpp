#include "helpers.hpp"
#include "tokendial/featflow.hpp"
#include "tokendial/synthworld.hpp"

#include <doctest.h>

#include <filesystem>

using namespace tokendial;
using ag::Mat;

namespace {

// Frame k of a two-channel linear ramp translated by k * (du, dv) cells.
std::vector<perc::FrameFeatureGrid> translated_ramps(int frames, int h, int w, double du, double dv) {
    std::vector<perc::FrameFeatureGrid> out;
    for (int k = 0; k < frames; ++k) {
        perc::FrameFeatureGrid g;
        g.h_p = h;
        g.w_p = w;
        g.features.resize(2, h * w);
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) {
                g.features(0, y * w + x) = 0.3 * (x - k * du) + 0.1 * (y - k * dv);
                g.features(1, y * w + x) = -0.2 * (x - k * du) + 0.5 * (y - k * dv);
            }
        out.push_back(std::move(g));
    }
    return out;
}

std::vector<perc::FrameFeatureGrid> random_grids(int frames, int channels, int h, int w, std::uint64_t seed) {
    std::vector<perc::FrameFeatureGrid> out;
    for (int k = 0; k < frames; ++k) {
        perc::FrameFeatureGrid g;
        g.h_p = h;
        g.w_p = w;
        g.features = th::random_mat(channels, h * w, seed + static_cast<std::uint64_t>(k));
        out.push_back(std::move(g));
    }
    return out;
}

}  // namespace

TEST_CASE("translated linear ramps recover the shift in the interior") {
    const auto grids = translated_ramps(3, 8, 9, 0.4, -0.25);
    const auto f = flow::lk_flow(grids);
    CHECK(f.pairs == 2);
    CHECK(f.cells() == 72);
    for (int p = 0; p < 2; ++p)
        for (int y = 2; y < 6; ++y)
            for (int x = 2; x < 7; ++x) {
                const int c = y * 9 + x;
                CHECK(f.valid(p, c) == 1.0);
                CHECK(f.u(p, c) == doctest::Approx(0.4).epsilon(1e-9));
                CHECK(f.v(p, c) == doctest::Approx(-0.25).epsilon(1e-9));
            }
}

TEST_CASE("structure tensor solve agrees with the explicit least squares reference") {
    for (int window : {1, 3, 5}) {
        flow::LkConfig cfg;
        cfg.window = window;
        const auto grids = random_grids(4, 6, 5, 7, 100 + static_cast<std::uint64_t>(window));
        const auto fast = flow::lk_flow(grids, cfg);
        const auto ref = flow::lk_flow_oracle(grids, cfg);
        CHECK(fast.valid == ref.valid);
        for (ag::Index i = 0; i < fast.u.size(); ++i) {
            if (ref.valid.data()[i] == 0.0) continue;
            const double scale = std::max(1.0, std::abs(ref.u.data()[i]) + std::abs(ref.v.data()[i]));
            CHECK(std::abs(fast.u.data()[i] - ref.u.data()[i]) / scale < 1e-8);
            CHECK(std::abs(fast.v.data()[i] - ref.v.data()[i]) / scale < 1e-8);
        }
    }
}

TEST_CASE("flat features give invalid cells and zero flow") {
    auto grids = random_grids(2, 3, 4, 4, 5);
    for (auto& g : grids) g.features.setConstant(0.5);
    const auto f = flow::lk_flow(grids);
    CHECK(f.valid_count() == 0);
    CHECK(f.u.isZero(0.0));
    CHECK(f.v.isZero(0.0));
    CHECK(f.mean_magnitude() == 0.0);
}

TEST_CASE("static input gives zero flow") {
    auto grids = random_grids(1, 4, 6, 6, 8);
    grids.push_back(grids.front());
    const auto f = flow::lk_flow(grids);
    CHECK(f.valid_count() > 0);
    CHECK(f.u.cwiseAbs().maxCoeff() < 1e-12);
    CHECK(f.v.cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("differentiable flow matches central differences") {
    const auto grids = random_grids(3, 3, 4, 4, 21);
    Mat feats(3, 3 * 16);
    for (int k = 0; k < 3; ++k) feats.row(k) = Eigen::Map<const Mat>(grids[k].features.data(), 1, 48);
    const Mat wu = th::random_mat(2, 16, 22), wv = th::random_mat(2, 16, 23);
    CHECK(th::grad_check(
              {feats},
              [&](auto& x) {
                  const auto fv = flow::lk_flow(x[0], 3, 4, 4);
                  return ag::add(ag::sum(ag::mul(fv.u, ag::Var::constant(wu))),
                                 ag::sum(ag::mul(fv.v, ag::Var::constant(wv))));
              },
              1e-7) < 1e-5);
}

TEST_CASE("motion field follows a moving object") {
    synth::SceneParams p;
    p.velocity = {0.06, 0.0};
    p.start_position = {0.3, 0.5};
    const auto right = flow::motion_field(synth::render_video(p, 6, 32, 32));
    p.velocity = {-0.06, 0.0};
    p.start_position = {0.7, 0.5};
    const auto left = flow::motion_field(synth::render_video(p, 6, 32, 32));
    p.velocity = {0.0, 0.0};
    const auto still = flow::motion_field(synth::render_video(p, 6, 32, 32));
    CHECK(right.u.sum() > 0.0);
    CHECK(left.u.sum() < 0.0);
    CHECK(right.mean_magnitude() > 10.0 * still.mean_magnitude() + 1e-9);
}

TEST_CASE("window and determinant validation") {
    flow::LkConfig cfg;
    cfg.window = 2;
    CHECK_THROWS_AS(cfg.validate(), Error);
    cfg.window = 3;
    cfg.det_eps = -1.0;
    CHECK_THROWS_AS(cfg.validate(), Error);
    CHECK_THROWS_AS(flow::lk_flow(random_grids(1, 2, 3, 3, 1)), Error);
}

TEST_CASE("TDFL round trip") {
    const auto f = flow::lk_flow(random_grids(4, 3, 5, 6, 31));
    const auto path = std::filesystem::temp_directory_path() / "tokendial_rt.tdfl";
    flow::save_flow(path, f);
    const auto back = flow::load_flow(path);
    CHECK(back.pairs == f.pairs);
    CHECK(back.h_p == f.h_p);
    CHECK(back.w_p == f.w_p);
    CHECK(back.valid == f.valid);
    CHECK((back.u - f.u).cwiseAbs().maxCoeff() <= 1e-6 * std::max(1.0, f.u.cwiseAbs().maxCoeff()));
    CHECK((back.v - f.v).cwiseAbs().maxCoeff() <= 1e-6 * std::max(1.0, f.v.cwiseAbs().maxCoeff()));
    std::filesystem::resize_file(path, 10);
    CHECK_THROWS_AS(flow::load_flow(path), Error);
    std::filesystem::remove(path);
}
