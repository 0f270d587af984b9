#include "tokendial/synthworld.hpp"

#include <doctest.h>

#include <filesystem>

using namespace tokendial;
using namespace tokendial::synth;

namespace {

SceneParams moving(double vx, double brightness = 0.8) {
    SceneParams p;
    p.brightness = brightness;
    p.velocity = {vx, 0.0};
    p.start_position = {0.2, 0.5};
    return p;
}

}  // namespace

TEST_CASE("static scene renders identical frames") {
    const VideoTensor v = render_video(moving(0.0), 6, 32, 32);
    for (int f = 1; f < 6; ++f) CHECK(frame_of(v, f) == frame_of(v, 0));
}

TEST_CASE("full brightness on black background peaks at one") {
    SceneParams p = moving(0.0, 1.0);
    p.background_level = 0.0;
    p.hue_index = 3;
    const VideoTensor v = render_video(p, 2, 32, 32);
    CHECK(v.data.maxCoeff() == doctest::Approx(1.0));
}

TEST_CASE("tracked displacement matches the rendered velocity") {
    const VideoTensor v = render_video(moving(0.1), 8, 32, 32);
    CHECK(std::abs(oracle_displacement(v) - 3.2) <= 0.5);
}

TEST_CASE("oracle brightness on a flat synthetic video") {
    VideoTensor v(VideoShape{3, 2, 32, 32});
    v.data.setConstant(0.1);
    for (int c = 0; c < 3; ++c)
        for (int f = 0; f < 2; ++f)
            for (int y = 8; y < 20; ++y)
                for (int x = 8; x < 20; ++x) v.at(c, f, y, x) = 0.8;
    CHECK(std::abs(oracle_brightness(v) - 0.8) <= 0.02);
}

TEST_CASE("oracle brightness increases with rendered brightness") {
    double prev = -1.0;
    for (double b : {0.3, 0.6, 0.9}) {
        const double o = oracle_brightness(render_video(moving(0.02, b), 4, 32, 32));
        CHECK(o > prev);
        prev = o;
    }
}

TEST_CASE("empty frames report no foreground") {
    VideoTensor v(VideoShape{3, 2, 32, 32});
    v.data.setConstant(0.1);
    try {
        oracle_brightness(v);
        FAIL("expected no_foreground");
    } catch (const Error& e) {
        CHECK(e.code() == ErrorCode::no_foreground);
    }
}

TEST_CASE("displacement oracle: static, doubled velocity, single frame") {
    CHECK(std::abs(oracle_displacement(render_video(moving(0.0), 8, 32, 32))) <= 0.1);
    const double d1 = oracle_displacement(render_video(moving(0.03), 8, 32, 32));
    const double d2 = oracle_displacement(render_video(moving(0.06), 8, 32, 32));
    CHECK(d2 / d1 == doctest::Approx(2.0).epsilon(0.1));
    VideoTensor one(VideoShape{3, 1, 32, 32});
    CHECK_THROWS_AS(oracle_displacement(one), Error);
}

TEST_CASE("dataset generation is deterministic and validated") {
    SceneDistribution d;
    const auto a = make_dataset(d, 6, 5);
    const auto b = make_dataset(d, 6, 5);
    REQUIRE(a.size() == 6);
    for (std::size_t i = 0; i < a.size(); ++i) {
        CHECK(a[i].video.data == b[i].video.data);
        CHECK(a[i].prompt == b[i].prompt);
        CHECK(a[i].id == b[i].id);
    }
    CHECK_THROWS_AS(make_dataset(d, 0, 5), Error);
}

TEST_CASE("sampled brightness follows the configured range") {
    SceneDistribution d;
    d.brightness = {0.2, 1.0};
    std::mt19937_64 rng(3);
    double sum = 0.0;
    for (int i = 0; i < 256; ++i) sum += sample_scene(d, rng).brightness;
    const double mean = sum / 256.0;
    CHECK(mean >= 0.55);
    CHECK(mean <= 0.65);
}

TEST_CASE("prompts never carry attribute words") {
    SceneDistribution d;
    for (const auto& c : make_dataset(d, 32, 1)) {
        for (int t : c.prompt.token_ids) CHECK(t < vocab::lookup("bright"));
        CHECK(c.prompt.token_ids[c.prompt.concept_token_index] == vocab::shape_token(c.params.shape_kind));
    }
}

TEST_CASE("prompt parsing") {
    const PromptCond p = parse_prompt("blue square");
    CHECK(p.text() == "blue square");
    CHECK(p.concept_token_index == 1);
    CHECK(p.token_ids.size() == PromptCond::max_len);
    CHECK_THROWS_AS(parse_prompt("purple disk"), Error);
    CHECK_THROWS_AS(parse_prompt(""), Error);
}

TEST_CASE("tdvr and dataset round trip") {
    const auto dir = std::filesystem::temp_directory_path() / "tokendial_synth_rt";
    std::filesystem::remove_all(dir);
    SceneDistribution d;
    const auto clips = make_dataset(d, 3, 9);
    save_dataset(dir, clips);
    const auto back = load_dataset(dir);
    REQUIRE(back.size() == 3);
    for (std::size_t i = 0; i < 3; ++i) {
        CHECK((back[i].video.data - clips[i].video.data).cwiseAbs().maxCoeff() < 1e-6);
        CHECK(back[i].prompt == clips[i].prompt);
    }
    std::filesystem::remove_all(dir);
}

TEST_CASE("scene validation rejects non-finite parameters") {
    SceneParams p;
    p.brightness = std::nan("");
    CHECK_THROWS_AS(render_video(p, 4, 32, 32), Error);
}
