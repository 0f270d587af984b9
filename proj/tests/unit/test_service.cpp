#include "helpers.hpp"
#include "tokendial/service.hpp"

#include <doctest.h>
#include <httplib.h>

#include <filesystem>

using namespace tokendial;
using nlohmann::json;

namespace {

const VideoShape kShape{3, 4, 16, 16};

bb::Backbone tiny_backbone() {
    bb::BackboneConfig c;
    c.d = 16;
    c.blocks = 2;
    c.heads = 2;
    bb::Backbone m(c, 1);
    synth::SceneDistribution d;
    d.dims = kShape;
    bb::BackboneTrainConfig tc;
    tc.steps = 2;
    tc.warmup = 1;
    bb::train_backbone(m, synth::make_dataset(d, 2, 1), tc);
    return m;
}

perc::AppearanceEncoder tiny_encoder() {
    perc::EncoderConfig cfg;
    cfg.d_e = 8;
    cfg.conv1 = 4;
    cfg.conv2 = 4;
    cfg.hidden = 8;
    perc::AppearanceEncoder enc(cfg, 2);
    synth::SceneDistribution d;
    d.dims = kShape;
    perc::EncoderTrainConfig tc;
    tc.steps = 2;
    tc.batch = 2;
    perc::prepare_appearance_encoder(enc, synth::make_dataset(d, 4, 3), tc);
    return enc;
}

off::TokenOffsetSet offset(const std::string& name, std::uint64_t seed) {
    auto o = off::TokenOffsetSet::zeros(name, 16, {bb::InjectionPoint::post_block, {0, 1}});
    for (auto& [k, v] : o.entries) v = th::random_mat(1, 16, seed + static_cast<std::uint64_t>(k), 0.5);
    return o;
}

struct Fixture {
    std::filesystem::path root;
    svc::ServiceConfig cfg;

    Fixture() {
        root = std::filesystem::temp_directory_path() / ("tokendial_svc_" + std::to_string(::getpid()));
        std::filesystem::remove_all(root);
        cfg.result_dir = root / "results";
        cfg.offset_dir = root / "offsets";
        std::filesystem::create_directories(cfg.offset_dir);
        cfg.workers = 1;
        cfg.port = 0;
        cfg.data.clips = 4;
        cfg.data.large_clips = 0;
        cfg.data.dist.dims = kShape;
    }
    ~Fixture() { std::filesystem::remove_all(root); }

    std::unique_ptr<svc::Service> loaded() {
        auto s = std::make_unique<svc::Service>(cfg);
        s->load_model(tiny_backbone(), tiny_encoder());
        s->add_offset(offset("brightness", 10));
        s->add_offset(offset("motion", 20));
        return s;
    }
};

json generate_body(double s_edit = 0.5, std::uint64_t seed = 3) {
    return {{"prompt", "red disk"},
            {"seed", seed},
            {"steps", 3},
            {"shape", {{"frames", 4}, {"height", 16}, {"width", 16}}},
            {"edits", {{{"offset_name", "brightness"}, {"s_edit", s_edit}}}}};
}

}  // namespace

TEST_CASE_FIXTURE(Fixture, "requests before a model is loaded are unavailable") {
    svc::Service s(cfg);
    CHECK_FALSE(s.model_loaded());
    CHECK(s.get_health().status == 503);
    CHECK(s.post_generate(generate_body().dump()).status == 503);
    CHECK(s.post_train(json{{"attribute_name", "x"}}.dump()).status == 503);
    CHECK(s.get_offsets().body.empty());
}

TEST_CASE_FIXTURE(Fixture, "schema violations, unknown offsets and unknown jobs") {
    auto s = loaded();
    CHECK(s->get_health().status == 200);
    CHECK(s->post_generate("{not json").status == 400);
    auto bad = generate_body();
    bad["colour"] = "red";
    CHECK(s->post_generate(bad.dump()).status == 400);
    bad = generate_body();
    bad["steps"] = 0;
    CHECK(s->post_generate(bad.dump()).status == 400);
    bad = generate_body();
    bad["prompt"] = "purple disk";
    CHECK(s->post_generate(bad.dump()).status == 400);
    bad = generate_body();
    bad["shape"]["height"] = 18;
    CHECK(s->post_generate(bad.dump()).status == 400);
    bad = generate_body();
    bad["edits"][0]["mask"] = {{"type", "box"}, {"box", {0.8, 0, 0.2, 1}}};
    CHECK(s->post_generate(bad.dump()).status == 400);
    bad = generate_body();
    bad["edits"][0].erase("s_edit");
    CHECK(s->post_generate(bad.dump()).status == 400);

    bad = generate_body();
    bad["edits"][0]["offset_name"] = "sparkle";
    const auto r = s->post_generate(bad.dump());
    CHECK(r.status == 404);
    CHECK(r.body.at("offset_name") == "sparkle");

    CHECK(s->get_job("nope").status == 404);
    CHECK(s->post_train(json{{"attribute_name", "../etc"}}.dump()).status == 400);
    CHECK(s->post_train(json{{"attribute_name", "x"}, {"recipe", "style"}}.dump()).status == 400);
    CHECK(s->post_sweep(json{{"offset_name", "brightness"}, {"prompts", {"red disk"}}, {"strengths", {0, 1}}}.dump())
              .status == 400);
}

TEST_CASE_FIXTURE(Fixture, "generation jobs run to completion and write content-addressed results") {
    auto s = loaded();
    const auto before = s->digests();
    const auto r = s->post_generate(generate_body().dump());
    REQUIRE(r.status == 202);
    const std::string id = r.body.at("job_id");
    const auto rec = s->wait(id, 120.0);
    REQUIRE(rec.has_value());
    REQUIRE(rec->status == svc::JobStatus::done);
    CHECK(rec->error.empty());
    const json j = s->get_job(id).body;
    CHECK(j.at("status") == "done");
    CHECK(j.at("frame_count") == 4);
    const std::string loc = rec->result;
    REQUIRE(loc.rfind("/v1/results/", 0) == 0);
    const auto dir = cfg.result_dir / loc.substr(12);
    CHECK(std::filesystem::exists(dir / "frame_000.png"));
    CHECK(std::filesystem::exists(dir / "frame_003.png"));
    CHECK(std::filesystem::exists(dir / "animation.png"));
    CHECK(std::filesystem::exists(dir / "result.json"));
    CHECK(s->digests() == before);

    // Identical bodies share a job; different bodies get new ones.
    CHECK(s->post_generate(generate_body().dump()).body.at("job_id") == id);
    const auto other = s->post_generate(generate_body(0.25).dump());
    CHECK(other.body.at("job_id") != id);
    const auto orec = s->wait(other.body.at("job_id"), 120.0);
    REQUIRE(orec.has_value());
    CHECK(orec->status == svc::JobStatus::done);
    CHECK(orec->result != rec->result);
}

TEST_CASE_FIXTURE(Fixture, "idempotency keys replay and conflict") {
    auto s = loaded();
    const auto a = s->post_generate(generate_body(0.5, 1).dump(), "key-1");
    REQUIRE(a.status == 202);
    const auto again = s->post_generate(generate_body(0.5, 1).dump(), "key-1");
    CHECK(again.status == 202);
    CHECK(again.body.at("job_id") == a.body.at("job_id"));
    const auto clash = s->post_generate(generate_body(0.5, 2).dump(), "key-1");
    CHECK(clash.status == 409);
    auto in_body = generate_body(0.5, 2);
    in_body["idempotency_key"] = "key-1";
    CHECK(s->post_generate(in_body.dump()).status == 409);
    in_body["idempotency_key"] = 5;
    CHECK(s->post_generate(in_body.dump()).status == 400);
    s->wait(a.body.at("job_id"), 120.0);
}

TEST_CASE_FIXTURE(Fixture, "training jobs register a new offset on disk and in the listing") {
    auto s = loaded();
    const auto before = s->digests();
    const json body{{"attribute_name", "glow"}, {"recipe", "brightness"}, {"steps", 2}, {"batch", 1},
                    {"layers", {0, 1}}};
    const auto r = s->post_train(body.dump());
    REQUIRE(r.status == 202);
    const auto rec = s->wait(r.body.at("job_id"), 300.0);
    REQUIRE(rec.has_value());
    CHECK(rec->error == "");
    CHECK(rec->status == svc::JobStatus::done);
    CHECK(rec->summary.at("parameter_count") == 32);
    CHECK(std::filesystem::exists(cfg.offset_dir / "glow.tdof"));
    bool listed = false;
    for (const auto& o : s->get_offsets().body) listed |= o.at("name") == "glow";
    CHECK(listed);
    CHECK(s->digests().at("backbone") == before.at("backbone"));

    json bad_layers = body;
    bad_layers["layers"] = {7};
    CHECK(s->post_train(bad_layers.dump()).status == 400);

    svc::Service reloaded(cfg);
    reloaded.load_model(tiny_backbone(), tiny_encoder());
    reloaded.load_offset_dir();
    CHECK(reloaded.get_offsets().body.size() == 1);
}

TEST_CASE_FIXTURE(Fixture, "http routes serve jobs and result files") {
    auto s = loaded();
    const int port = s->start();
    REQUIRE(port > 0);
    httplib::Client cli("127.0.0.1", port);
    cli.set_read_timeout(120, 0);

    auto health = cli.Get("/v1/health");
    REQUIRE(health);
    CHECK(health->status == 200);
    CHECK(json::parse(health->body).at("version") == svc::kVersion);
    CHECK(health->get_header_value("Access-Control-Allow-Origin") == "*");

    auto offsets = cli.Get("/v1/offsets");
    REQUIRE(offsets);
    CHECK(json::parse(offsets->body).size() == 2);

    httplib::Headers headers{{"Idempotency-Key", "http-1"}};
    auto post = cli.Post("/v1/generate", headers, generate_body().dump(), "application/json");
    REQUIRE(post);
    CHECK(post->status == 202);
    const std::string id = json::parse(post->body).at("job_id");
    auto replay = cli.Post("/v1/generate", headers, generate_body().dump(), "application/json");
    REQUIRE(replay);
    CHECK(json::parse(replay->body).at("job_id") == id);
    auto clash = cli.Post("/v1/generate", headers, generate_body(0.9).dump(), "application/json");
    REQUIRE(clash);
    CHECK(clash->status == 409);

    REQUIRE(s->wait(id, 120.0)->status == svc::JobStatus::done);
    auto job = cli.Get("/v1/jobs/" + id);
    REQUIRE(job);
    const json j = json::parse(job->body);
    CHECK(j.at("status") == "done");
    const std::string frame = j.at("frames")[0];
    auto png = cli.Get(frame);
    REQUIRE(png);
    CHECK(png->status == 200);
    CHECK(png->get_header_value("Content-Type") == "image/png");
    CHECK(png->body.compare(0, 4, "\x89PNG") == 0);

    auto missing = cli.Get("/v1/results/0123456789abcdef0123456789abcdef/frame_000.png");
    REQUIRE(missing);
    CHECK(missing->status == 404);
    auto unknown = cli.Get("/v1/jobs/j0-nothing");
    REQUIRE(unknown);
    CHECK(unknown->status == 404);
    auto bad = cli.Post("/v1/generate", "{}", "application/json");
    REQUIRE(bad);
    CHECK(bad->status == 400);
    auto pre = cli.Options("/v1/generate");
    REQUIRE(pre);
    CHECK(pre->status == 204);
    s->stop();
}

TEST_CASE_FIXTURE(Fixture, "sweep jobs produce a report") {
    auto s = loaded();
    const json body{{"offset_name", "brightness"}, {"prompts", {"red disk"}}, {"seeds", {0}},
                    {"strengths", {0, 0.5, 1}}, {"steps", 2}, {"oracle", "brightness"}};
    const auto r = s->post_sweep(body.dump());
    REQUIRE(r.status == 202);
    const auto rec = s->wait(r.body.at("job_id"), 300.0);
    REQUIRE(rec.has_value());
    CHECK(rec->error == "");
    CHECK(rec->status == svc::JobStatus::done);
    CHECK(rec->summary.contains("os"));
    CHECK(std::filesystem::exists(cfg.result_dir / rec->result.substr(12) / "report.json"));
}

TEST_CASE("job enums") {
    CHECK(svc::to_string(svc::JobKind::train_offset) == "train_offset");
    CHECK(svc::to_string(svc::JobStatus::running) == "running");
}
