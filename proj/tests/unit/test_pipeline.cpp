#include "tokendial/pipeline.hpp"

#include <doctest.h>

using namespace tokendial;

TEST_CASE("strength specs with uniform, box and attention masks") {
    auto s = pipe::parse_strength_spec("brightness:0.75");
    CHECK(s.name == "brightness");
    CHECK(s.strength == 0.75);
    CHECK(s.mask.source == off::MaskSource::uniform);

    s = pipe::parse_strength_spec("motion:-1.5:box(0,0,0.5,1)");
    CHECK(s.strength == -1.5);
    REQUIRE(s.mask.geometry.has_value());
    CHECK(s.mask.source == off::MaskSource::user_geometry);
    CHECK(s.mask.geometry->x1 == 0.5);
    CHECK(s.mask.geometry->t1 == 1.0);

    s = pipe::parse_strength_spec("brightness:1:box(0.1,0.2,0.3,0.4)@0.25-0.75");
    CHECK(s.mask.geometry->y0 == 0.2);
    CHECK(s.mask.geometry->t0 == 0.25);
    CHECK(s.mask.geometry->t1 == 0.75);

    s = pipe::parse_strength_spec("brightness:2e-1:attn(1)");
    CHECK(s.strength == doctest::Approx(0.2));
    CHECK(s.mask.source == off::MaskSource::attention);
    CHECK(s.mask.concept_token == 1);
}

TEST_CASE("malformed strength specs are rejected") {
    for (const char* bad : {"", "brightness", "brightness:", ":1", "brightness:abc", "brightness:1:box(0,0,1)",
                            "brightness:1:box(0.8,0,0.2,1)", "brightness:1:circle(1)", "brightness:nan"}) {
        CAPTURE(bad);
        CHECK_THROWS_AS(pipe::parse_strength_spec(bad), Error);
    }
}

TEST_CASE("default recipes and digests") {
    const auto b = pipe::default_recipe("brightness");
    const auto m = pipe::default_recipe("motion");
    CHECK(b.loss.kind == off::LossKind::appearance);
    CHECK(m.loss.kind == off::LossKind::motion);
    CHECK(m.loss.gamma == 2.0);
    CHECK_THROWS_AS(pipe::default_recipe("style"), Error);
    CHECK(pipe::short_digest(b.to_json()) == pipe::short_digest(pipe::default_recipe("brightness").to_json()));
    CHECK(pipe::short_digest(b.to_json()) != pipe::short_digest(m.to_json()));
    CHECK(pipe::short_digest(b.to_json()).size() == 16);
}
