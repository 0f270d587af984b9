// tokendial command-line entry point.

#include "tokendial/featflow.hpp"
#include "tokendial/image.hpp"
#include "tokendial/pipeline.hpp"
#include "tokendial/service.hpp"
#include "tokendial/slidereval.hpp"

#include <CLI11.hpp>

#include <atomic>
#include <csignal>
#include <iostream>
#include <optional>
#include <sstream>
#include <thread>

using namespace tokendial;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

int verbosity = 1;

void info(const std::string& s) {
    if (verbosity > 0) std::cerr << s << "\n";
}

void snapshot(const fs::path& dir, const std::string& command, const json& cfg) {
    fs::create_directories(dir);
    img::write_file(dir / "config.json", json{{"command", command}, {"config", cfg}}.dump(2) + "\n");
}

std::vector<double> parse_list(const std::string& s) {
    std::vector<double> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ',')) out.push_back(std::stod(item));
    return out;
}

std::vector<std::string> split(const std::string& s, char sep) {
    std::vector<std::string> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, sep))
        if (!item.empty()) out.push_back(item);
    return out;
}

std::map<std::string, off::TokenOffsetSet> load_offsets(const std::vector<std::string>& files, const fs::path& dir,
                                                        const bb::BackboneConfig& cfg) {
    std::map<std::string, off::TokenOffsetSet> out;
    std::vector<fs::path> paths(files.begin(), files.end());
    if (!dir.empty() && fs::exists(dir)) {
        for (const auto& e : fs::directory_iterator(dir))
            if (e.path().extension() == ".tdof") paths.push_back(e.path());
    }
    for (const auto& p : paths) {
        auto o = off::load_offset(p, cfg);
        out[o.attribute_name] = std::move(o);
    }
    return out;
}

VideoShape shape_of(int frames, int height, int width) { return {3, frames, height, width}; }

volatile std::sig_atomic_t g_stop = 0;

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"tokendial: token-offset sliders for a toy video flow model"};
    app.require_subcommand(1);
    app.set_help_all_flag("--help-all", "Expand all help");
    bool quiet = false;
    app.add_flag("-q,--quiet", quiet, "Suppress progress output");

    // make-data
    auto* mk = app.add_subcommand("make-data", "Render a synthetic clip dataset");
    std::string mk_out = "data";
    int mk_count = 768, mk_frames = 8, mk_h = 32, mk_w = 32;
    std::uint64_t mk_seed = 11;
    mk->add_option("--out", mk_out, "Output directory")->capture_default_str();
    mk->add_option("--count", mk_count, "Number of clips")->capture_default_str()->check(CLI::PositiveNumber);
    mk->add_option("--seed", mk_seed, "Dataset seed")->capture_default_str();
    mk->add_option("--frames", mk_frames, "Frames per clip")->capture_default_str();
    mk->add_option("--height", mk_h, "Frame height")->capture_default_str();
    mk->add_option("--width", mk_w, "Frame width")->capture_default_str();

    // train-backbone
    auto* tb = app.add_subcommand("train-backbone", "Train the flow-matching backbone");
    std::string tb_out = "runs/backbone", tb_data;
    pipe::PipelineConfig pc;
    tb->add_option("--out", tb_out, "Run directory (backbone.tdbk, log, config)")->capture_default_str();
    tb->add_option("--data", tb_data, "Dataset directory from make-data (default: render in memory)")
        ->check(CLI::ExistingDirectory);
    tb->add_option("--steps", pc.backbone_train.steps, "Optimizer steps")->capture_default_str();
    tb->add_option("--batch", pc.backbone_train.batch, "Batch size")->capture_default_str();
    tb->add_option("--lr", pc.backbone_train.lr, "Learning rate")->capture_default_str();
    tb->add_option("--seed", pc.backbone_seed, "Initialization seed")->capture_default_str();
    tb->add_option("--clips", pc.data.clips, "Base-resolution clips when rendering")->capture_default_str();
    tb->add_option("--large-clips", pc.data.large_clips, "12x48x48 clips when rendering")->capture_default_str();
    tb->add_option("--data-seed", pc.data.seed, "Dataset seed when rendering")->capture_default_str();

    // train-offset
    auto* to = app.add_subcommand("train-offset", "Learn an attribute token offset on a frozen backbone");
    std::string to_backbone, to_encoder = "runs/encoder.tden", to_out, to_data, to_attr = "brightness", to_name,
                                to_layers, to_point = "post_block";
    int to_enc_steps = pc.encoder_train.steps;
    pipe::OffsetRecipe to_recipe;
    to->add_option("--backbone", to_backbone, "Backbone checkpoint (.tdbk)")->required()->check(CLI::ExistingFile);
    to->add_option("--encoder", to_encoder, "Encoder checkpoint (.tden); trained and written here when missing")
        ->capture_default_str();
    to->add_option("--encoder-steps", to_enc_steps, "Encoder training steps when the encoder is missing")
        ->capture_default_str();
    to->add_option("--attribute", to_attr, "Recipe: brightness or motion")->capture_default_str()
        ->check(CLI::IsMember({"brightness", "motion"}));
    to->add_option("--name", to_name, "Offset name (default: the attribute)");
    to->add_option("--out", to_out, "Output .tdof path (default: offsets/<name>.tdof)");
    to->add_option("--data", to_data, "Dataset directory (default: render in memory)")->check(CLI::ExistingDirectory);
    to->add_option("--steps", to_recipe.train.steps, "Optimizer steps")->capture_default_str();
    to->add_option("--batch", to_recipe.train.batch, "Batch size")->capture_default_str();
    std::optional<double> to_lr;
    to->add_option("--lr", to_lr, "Learning rate (recipe default: 1e-2 brightness, 4e-4 motion)");
    to->add_option("--seed", to_recipe.train.seed, "Seed")->capture_default_str();
    to->add_option("--K", to_recipe.refine.K, "Refinement steps")->capture_default_str();
    to->add_option("--lambda-a", to_recipe.loss.lambda_a, "Appearance regularizer weight")->capture_default_str();
    to->add_option("--lambda-m", to_recipe.loss.lambda_m, "Motion regularizer weight")->capture_default_str();
    to->add_option("--gamma", to_recipe.loss.gamma, "Motion scaling target")->capture_default_str();
    to->add_option("--layers", to_layers, "Comma-separated block indices (default: all)");
    to->add_option("--injection-point", to_point, "post_block or attn_residual")->capture_default_str();

    // generate
    auto* gen = app.add_subcommand("generate", "Sample a video with optional slider edits");
    std::string g_backbone, g_out = "runs/generate", g_prompt = "red disk", g_offset_dir = "offsets";
    std::vector<std::string> g_offsets, g_offset_files;
    guide::GuidanceConfig gcfg;
    int g_frames = 8, g_h = 32, g_w = 32, g_scale = 1;
    gen->add_option("--backbone", g_backbone, "Backbone checkpoint (.tdbk)")->required()->check(CLI::ExistingFile);
    gen->add_option("--prompt", g_prompt, "Prompt words")->capture_default_str();
    gen->add_option("--seed", gcfg.seed, "Noise seed")->capture_default_str();
    gen->add_option("--steps", gcfg.steps, "Euler steps")->capture_default_str();
    gen->add_option("--s-txt", gcfg.s_txt, "Text guidance scale")->capture_default_str();
    gen->add_option("--offset", g_offsets, "Edit name:strength[:box(x0,y0,x1,y1)[@t0-t1]|attn(i)] (repeatable)");
    gen->add_option("--offset-file", g_offset_files, "Extra .tdof files")->check(CLI::ExistingFile);
    gen->add_option("--offset-dir", g_offset_dir, "Directory of .tdof files")->capture_default_str();
    gen->add_option("--frames", g_frames, "Frames")->capture_default_str();
    gen->add_option("--height", g_h, "Height")->capture_default_str();
    gen->add_option("--width", g_w, "Width")->capture_default_str();
    gen->add_option("--scale", g_scale, "PNG upscaling factor")->capture_default_str();
    gen->add_option("--out", g_out, "Run directory")->capture_default_str();

    // eval-slider
    auto* ev = app.add_subcommand("eval-slider", "Strength sweep with slider metrics");
    std::string e_backbone, e_encoder, e_offset, e_out = "runs/eval", e_strengths = "0,0.25,0.5,0.75,1",
                                       e_seeds = "0,1,2,3", e_prompts = "red disk,blue square", e_oracle = "brightness",
                                       e_mask;
    eval::SweepConfig scfg;
    int e_frames = 8, e_h = 32, e_w = 32;
    ev->add_option("--backbone", e_backbone, "Backbone checkpoint (.tdbk)")->required()->check(CLI::ExistingFile);
    ev->add_option("--encoder", e_encoder, "Encoder checkpoint (.tden)")->required()->check(CLI::ExistingFile);
    ev->add_option("--offset-file", e_offset, "Offset (.tdof)")->required()->check(CLI::ExistingFile);
    ev->add_option("--strengths", e_strengths, "Comma-separated ascending strengths from 0")->capture_default_str();
    ev->add_option("--seeds", e_seeds, "Comma-separated seeds")->capture_default_str();
    ev->add_option("--prompts", e_prompts, "Comma-separated prompts")->capture_default_str();
    ev->add_option("--oracle", e_oracle, "brightness, displacement or none")->capture_default_str()
        ->check(CLI::IsMember({"brightness", "displacement", "none"}));
    ev->add_option("--mask", e_mask, "Mask: box(x0,y0,x1,y1)[@t0-t1] or attn(i)");
    ev->add_option("--steps", scfg.steps, "Euler steps")->capture_default_str();
    ev->add_option("--s-txt", scfg.s_txt, "Text guidance scale")->capture_default_str();
    ev->add_option("--frames", e_frames, "Frames")->capture_default_str();
    ev->add_option("--height", e_h, "Height")->capture_default_str();
    ev->add_option("--width", e_w, "Width")->capture_default_str();
    ev->add_option("--out", e_out, "Run directory")->capture_default_str();

    // serve
    auto* sv = app.add_subcommand("serve", "Run the /v1 HTTP service");
    svc::ServiceConfig scf;
    std::string s_backbone, s_encoder;
    sv->add_option("--backbone", s_backbone, "Backbone checkpoint (.tdbk)")->required()->check(CLI::ExistingFile);
    sv->add_option("--encoder", s_encoder, "Encoder checkpoint (.tden), needed for appearance training and sweeps")
        ->check(CLI::ExistingFile);
    sv->add_option("--host", scf.host, "Listen address")->capture_default_str();
    sv->add_option("--port", scf.port, "Listen port (0 = any)")->capture_default_str();
    sv->add_option("--workers", scf.workers, "Job workers")->capture_default_str()->check(CLI::PositiveNumber);
    sv->add_option("--offset-dir", scf.offset_dir, "Offset directory")->capture_default_str();
    sv->add_option("--results", scf.result_dir, "Result directory")->capture_default_str();
    scf.offset_dir = "offsets";

    // flow-viz
    auto* fv = app.add_subcommand("flow-viz", "Feature-space Lucas-Kanade flow of a clip");
    std::string f_video, f_out = "runs/flow";
    synth::SceneParams f_scene;
    double f_speed = 0.03;
    int f_frames = 8, f_h = 32, f_w = 32, f_scale = 8;
    flow::LkConfig lk;
    fv->add_option("--video", f_video, "Clip (.tdvr); a moving disk is rendered when omitted")
        ->check(CLI::ExistingFile);
    fv->add_option("--speed", f_speed, "Horizontal speed of the rendered disk")->capture_default_str();
    fv->add_option("--frames", f_frames, "Frames of the rendered clip")->capture_default_str();
    fv->add_option("--height", f_h, "Height of the rendered clip")->capture_default_str();
    fv->add_option("--width", f_w, "Width of the rendered clip")->capture_default_str();
    fv->add_option("--window", lk.window, "LK window (odd)")->capture_default_str();
    fv->add_option("--scale", f_scale, "Pixels per cell in the colour image")->capture_default_str();
    fv->add_option("--out", f_out, "Run directory")->capture_default_str();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }
    verbosity = quiet ? 0 : 1;

    try {
        if (mk->parsed()) {
            synth::SceneDistribution dist;
            dist.dims = shape_of(mk_frames, mk_h, mk_w);
            const auto clips = synth::make_dataset(dist, mk_count, mk_seed);
            synth::save_dataset(mk_out, clips);
            snapshot(mk_out, "make-data",
                     {{"dist", synth::to_json(dist)}, {"count", mk_count}, {"seed", mk_seed}});
            info("wrote " + std::to_string(clips.size()) + " clips to " + mk_out);
        } else if (tb->parsed()) {
            snapshot(tb_out, "train-backbone", {{"pipeline", pc.to_json()}, {"data_dir", tb_data}});
            const auto clips = tb_data.empty() ? pipe::backbone_clips(pc.data) : synth::load_dataset(tb_data);
            bb::Backbone m(pc.backbone, pc.backbone_seed);
            std::ofstream log(fs::path(tb_out) / "train.log");
            bb::train_backbone(m, clips, pc.backbone_train, [&](const bb::TrainLogEntry& e) {
                log << e.step << " " << e.loss << " " << e.grad_norm << "\n";
                if ((e.step + 1) % 100 == 0) info("step " + std::to_string(e.step + 1) + " loss " + std::to_string(e.loss));
            });
            m.save(fs::path(tb_out) / "backbone.tdbk");
            const auto val = bb::validation_loss(m, synth::make_dataset(pc.data.dist, 32, pc.data.seed + 99), 2, 5);
            img::write_file(fs::path(tb_out) / "validation.json",
                            json{{"model", val.model}, {"zero_predictor", val.zero_predictor}}.dump(2) + "\n");
            info("validation " + std::to_string(val.model) + " (zero predictor " + std::to_string(val.zero_predictor) + ")");
        } else if (to->parsed()) {
            const std::string name = to_name.empty() ? to_attr : to_name;
            pipe::OffsetRecipe recipe = pipe::default_recipe(to_attr);
            const double recipe_lr = recipe.train.lr;
            recipe.train = to_recipe.train;
            recipe.train.lr = to_lr.value_or(recipe_lr);
            recipe.refine = to_recipe.refine;
            recipe.loss.lambda_a = to_recipe.loss.lambda_a;
            recipe.loss.lambda_m = to_recipe.loss.lambda_m;
            recipe.loss.gamma = to_recipe.loss.gamma;
            recipe.train.attribute_name = name;
            recipe.train.injection.point = bb::injection_point_from_string(to_point);
            if (!to_layers.empty()) {
                recipe.train.injection.layers.clear();
                for (double l : parse_list(to_layers)) recipe.train.injection.layers.push_back(static_cast<int>(l));
            }
            const fs::path out = to_out.empty() ? fs::path("offsets") / (name + ".tdof") : fs::path(to_out);
            const fs::path run_dir = out.parent_path().empty() ? fs::path(".") : out.parent_path();
            recipe.train.diagnostics_dir = run_dir / (name + "-diagnostics");
            const bb::Backbone model = bb::Backbone::load(to_backbone);
            const auto clips = to_data.empty() ? pipe::base_clips(pc.data) : synth::load_dataset(to_data);
            perc::AppearanceEncoder enc;
            if (fs::exists(to_encoder)) {
                enc = perc::AppearanceEncoder::load(to_encoder);
            } else {
                info("training encoder (" + std::to_string(to_enc_steps) + " steps) -> " + to_encoder);
                enc = perc::AppearanceEncoder(pc.encoder, pc.encoder_seed);
                perc::EncoderTrainConfig ec = pc.encoder_train;
                ec.steps = to_enc_steps;
                perc::prepare_appearance_encoder(enc, clips, ec);
                enc.save(to_encoder);
            }
            train::LossConfig loss = recipe.loss;
            if (loss.kind == off::LossKind::appearance) {
                loss.d_tgt = pipe::brightness_direction(enc, pc.data.dist, recipe.exemplars, recipe.exemplar_high,
                                                        recipe.exemplar_low, recipe.train.seed + 1000);
            }
            json snap = recipe.to_json();
            snap["backbone"] = to_backbone;
            snap["encoder"] = to_encoder;
            snap["data"] = to_data;
            snap["out"] = out.string();
            img::write_file(run_dir / (name + ".config.json"),
                            json{{"command", "train-offset"}, {"config", snap}}.dump(2) + "\n");
            std::ofstream log(run_dir / (name + ".log"));
            const auto res = train::train_offset(model, enc, clips, loss, recipe.refine, recipe.train,
                                                 [&](const train::OffsetLogEntry& e) {
                                                     log << train::format_log(e) << "\n";
                                                     if ((e.step + 1) % 25 == 0) info(train::format_log(e));
                                                 });
            off::save_offset(out, res.offset);
            info("wrote " + out.string() + " (" + std::to_string(res.offset.parameter_count()) + " parameters)");
        } else if (gen->parsed()) {
            const bb::Backbone model = bb::Backbone::load(g_backbone);
            const auto offsets = load_offsets(g_offset_files, g_offset_dir, model.config());
            gcfg.shape = shape_of(g_frames, g_h, g_w);
            for (const auto& s : g_offsets) {
                const auto spec = pipe::parse_strength_spec(s);
                auto it = offsets.find(spec.name);
                require(it != offsets.end(), ErrorCode::not_found, "unknown offset '" + spec.name + "'");
                gcfg.edits.push_back({&it->second, spec.strength, spec.mask});
            }
            const auto prompt = synth::parse_prompt(g_prompt);
            json snap = gcfg.to_json();
            snap["prompt"] = g_prompt;
            snap["backbone"] = g_backbone;
            snap["offset_specs"] = g_offsets;
            snapshot(g_out, "generate", snap);
            const auto res = guide::generate(model, prompt, gcfg);
            std::vector<img::Image> frames;
            for (int f = 0; f < res.video.shape.frames; ++f) {
                frames.push_back(img::frame_image(res.video, f, g_scale));
                char name[32];
                std::snprintf(name, sizeof name, "frame_%03d.png", f);
                img::write_file(fs::path(g_out) / "frames" / name, img::encode_png(frames.back()));
            }
            img::write_file(fs::path(g_out) / "animation.png", img::encode_apng(frames, 8));
            synth::write_tdvr(fs::path(g_out) / "video.tdvr", res.video);
            img::write_file(fs::path(g_out) / "trace.json", res.trace.to_json().dump(2) + "\n");
            info("wrote " + std::to_string(frames.size()) + " frames to " + g_out);
        } else if (ev->parsed()) {
            const bb::Backbone model = bb::Backbone::load(e_backbone);
            const auto enc = perc::AppearanceEncoder::load(e_encoder);
            const auto offset = off::load_offset(e_offset, model.config());
            scfg.strengths = parse_list(e_strengths);
            scfg.seeds.clear();
            for (double s : parse_list(e_seeds)) scfg.seeds.push_back(static_cast<std::uint64_t>(s));
            scfg.prompts.clear();
            for (const auto& p : split(e_prompts, ',')) scfg.prompts.push_back(synth::parse_prompt(p));
            scfg.oracle = eval::oracle_kind_from_string(e_oracle);
            scfg.shape = shape_of(e_frames, e_h, e_w);
            if (!e_mask.empty()) scfg.mask = pipe::parse_strength_spec(offset.attribute_name + ":1:" + e_mask).mask;
            json snap = scfg.to_json();
            snap["backbone"] = e_backbone;
            snap["encoder"] = e_encoder;
            snap["offset"] = e_offset;
            snapshot(e_out, "eval-slider", snap);
            eval::SweepInputs in{&model, &offset, &enc, std::nullopt};
            const auto rep = eval::run_sweep(in, scfg, [](std::size_t done, std::size_t total) {
                if (done % 5 == 0 || done == total) info("generated " + std::to_string(done) + "/" + std::to_string(total));
            });
            eval::write_report(rep, e_out);
            const auto& a = rep.aggregate;
            std::ostringstream os;
            os << "CR " << a.cr << " CSM " << a.csm << " Mono " << a.mono << " SP " << a.sp << " OS " << a.os
               << " oracle_spearman " << a.oracle_spearman << " oracle_failures " << a.oracle_failures;
            std::cout << os.str() << "\n";
        } else if (sv->parsed()) {
            json snap = scf.to_json();
            snap["backbone"] = s_backbone;
            snap["encoder"] = s_encoder;
            snapshot(scf.result_dir, "serve", snap);
            svc::Service service(scf);
            const int port = service.start();
            info("listening on " + scf.host + ":" + std::to_string(port) + " (loading model)");
            std::optional<perc::AppearanceEncoder> enc;
            if (!s_encoder.empty()) enc = perc::AppearanceEncoder::load(s_encoder);
            service.load_model(bb::Backbone::load(s_backbone), std::move(enc));
            service.load_offset_dir();
            info("model loaded");
            std::signal(SIGINT, [](int) { g_stop = 1; });
            std::signal(SIGTERM, [](int) { g_stop = 1; });
            while (!g_stop) std::this_thread::sleep_for(std::chrono::milliseconds(200));
            service.stop();
        } else if (fv->parsed()) {
            VideoTensor v;
            if (!f_video.empty()) {
                v = synth::read_tdvr(f_video);
            } else {
                f_scene.velocity = {f_speed, 0.0};
                f_scene.start_position = {0.5 - f_speed * (f_frames - 1) / 2.0, 0.5};
                v = synth::render_video(f_scene, f_frames, f_h, f_w);
            }
            json snap{{"video", f_video}, {"speed", f_speed}, {"window", lk.window}, {"det_eps", lk.det_eps}};
            snapshot(f_out, "flow-viz", snap);
            const auto field = flow::motion_field(v, lk);
            flow::save_flow(fs::path(f_out) / "flow.tdfl", field);
            double max_mag = 1e-9;
            for (ag::Index i = 0; i < field.u.size(); ++i)
                max_mag = std::max(max_mag, std::hypot(field.u.data()[i], field.v.data()[i]));
            img::Image im(field.w_p * f_scale * field.pairs + (field.pairs - 1) * 2, field.h_p * f_scale,
                          {255, 255, 255});
            for (int p = 0; p < field.pairs; ++p) {
                for (int c = 0; c < field.cells(); ++c) {
                    const int y = c / field.w_p, x = c % field.w_p;
                    const img::Rgb col = field.valid(p, c) > 0.5
                                             ? img::flow_color(field.u(p, c), field.v(p, c), max_mag)
                                             : img::Rgb{128, 128, 128};
                    const int ox = p * (field.w_p * f_scale + 2) + x * f_scale;
                    img::fill_rect(im, ox, y * f_scale, ox + f_scale - 1, (y + 1) * f_scale - 1, col);
                }
            }
            img::write_file(fs::path(f_out) / "flow.png", img::encode_png(im));
            std::cout << "mean magnitude " << field.mean_magnitude() << " cells/frame, valid "
                      << field.valid_count() << "/" << field.pairs * field.cells() << "\n";
        }
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
