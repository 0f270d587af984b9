#include "tokendial/pipeline.hpp"

#include "tokendial/digest.hpp"

#include <random>
#include <regex>

namespace tokendial::pipe {

std::string short_digest(const nlohmann::json& j) { return sha256_hex(j.dump()).substr(0, 16); }

nlohmann::json DataConfig::to_json() const {
    return {{"dist", synth::to_json(dist)},
            {"clips", clips},
            {"large_clips", large_clips},
            {"large_dims", {large_dims.channels, large_dims.frames, large_dims.height, large_dims.width}},
            {"seed", seed}};
}

nlohmann::json OffsetRecipe::to_json() const {
    nlohmann::json loss_j = loss.to_json();
    loss_j.erase("d_tgt");
    return {{"attribute", attribute},
            {"train", train.to_json()},
            {"refine", refine.to_json()},
            {"loss", loss_j},
            {"exemplars", exemplars},
            {"exemplar_high", exemplar_high},
            {"exemplar_low", exemplar_low}};
}

OffsetRecipe default_recipe(const std::string& attribute) {
    OffsetRecipe r;
    r.attribute = attribute;
    r.train.attribute_name = attribute;
    if (attribute == "brightness") {
        r.loss.kind = off::LossKind::appearance;
        r.train.lr = 1e-2;
    } else if (attribute == "motion") {
        r.loss.kind = off::LossKind::motion;
        r.loss.gamma = 2.0;
        r.train.lr = 4e-4;
    } else {
        throw Error(ErrorCode::not_found, "unknown attribute recipe '" + attribute + "'");
    }
    return r;
}

nlohmann::json PipelineConfig::to_json() const {
    return {{"data", data.to_json()},
            {"backbone", backbone.to_json()},
            {"backbone_train", backbone_train.to_json()},
            {"backbone_seed", backbone_seed},
            {"encoder", encoder.to_json()},
            {"encoder_train", encoder_train.to_json()},
            {"encoder_seed", encoder_seed}};
}

std::vector<synth::Clip> base_clips(const DataConfig& cfg) { return synth::make_dataset(cfg.dist, cfg.clips, cfg.seed); }

std::vector<synth::Clip> backbone_clips(const DataConfig& cfg) {
    auto clips = base_clips(cfg);
    if (cfg.large_clips > 0) {
        synth::SceneDistribution big = cfg.dist;
        big.dims = cfg.large_dims;
        for (auto& c : synth::make_dataset(big, cfg.large_clips, cfg.seed + 1)) clips.push_back(std::move(c));
    }
    return clips;
}

perc::DirectionVector brightness_direction(const perc::AppearanceEncoder& enc, const synth::SceneDistribution& dist,
                                           int pairs, double high, double low, std::uint64_t seed) {
    require(pairs >= 1, ErrorCode::precondition, "exemplar pairs must be >= 1");
    std::mt19937_64 rng(seed);
    std::vector<VideoTensor> hi, lo;
    for (int i = 0; i < pairs; ++i) {
        synth::SceneParams p = synth::sample_scene(dist, rng);
        p.brightness = high;
        hi.push_back(synth::render_video(p, dist.dims.frames, dist.dims.height, dist.dims.width));
        p.brightness = low;
        lo.push_back(synth::render_video(p, dist.dims.frames, dist.dims.height, dist.dims.width));
    }
    return perc::target_direction_from_exemplars(enc, hi, lo);
}

ArtifactStore::ArtifactStore(std::filesystem::path dir, PipelineConfig cfg, LogFn log)
    : dir_(std::move(dir)), cfg_(std::move(cfg)), log_(std::move(log)) {
    std::filesystem::create_directories(dir_);
}

void ArtifactStore::note(const std::string& s) const {
    if (log_) log_(s);
}

const std::vector<synth::Clip>& ArtifactStore::base_data() {
    if (base_.empty()) base_ = base_clips(cfg_.data);
    return base_;
}

std::filesystem::path ArtifactStore::backbone_path() const {
    const nlohmann::json key{{"data", cfg_.data.to_json()},
                             {"backbone", cfg_.backbone.to_json()},
                             {"train", cfg_.backbone_train.to_json()},
                             {"seed", cfg_.backbone_seed}};
    return dir_ / ("backbone-" + short_digest(key) + ".tdbk");
}

std::filesystem::path ArtifactStore::encoder_path() const {
    const nlohmann::json key{{"data", cfg_.data.to_json()},
                             {"encoder", cfg_.encoder.to_json()},
                             {"train", cfg_.encoder_train.to_json()},
                             {"seed", cfg_.encoder_seed}};
    return dir_ / ("encoder-" + short_digest(key) + ".tden");
}

std::filesystem::path ArtifactStore::offset_path(const OffsetRecipe& recipe) const {
    const nlohmann::json key{{"backbone", backbone_path().filename().string()},
                             {"encoder", encoder_path().filename().string()},
                             {"recipe", recipe.to_json()}};
    return dir_ / ("offset-" + recipe.attribute + "-" + short_digest(key) + ".tdof");
}

bb::Backbone ArtifactStore::backbone() {
    const auto path = backbone_path();
    if (std::filesystem::exists(path)) {
        note("backbone: cached " + path.string());
        return bb::Backbone::load(path);
    }
    note("backbone: training " + std::to_string(cfg_.backbone_train.steps) + " steps");
    bb::Backbone m(cfg_.backbone, cfg_.backbone_seed);
    const auto clips = backbone_clips(cfg_.data);
    double acc = 0.0;
    bb::train_backbone(m, clips, cfg_.backbone_train, [&](const bb::TrainLogEntry& e) {
        acc += e.loss;
        if ((e.step + 1) % 100 == 0) {
            note("backbone step " + std::to_string(e.step + 1) + " loss " + std::to_string(acc / 100.0));
            acc = 0.0;
        }
    });
    m.save(path);
    return bb::Backbone::load(path);
}

perc::AppearanceEncoder ArtifactStore::encoder() {
    const auto path = encoder_path();
    if (std::filesystem::exists(path)) {
        note("encoder: cached " + path.string());
        return perc::AppearanceEncoder::load(path);
    }
    note("encoder: training " + std::to_string(cfg_.encoder_train.steps) + " steps");
    perc::AppearanceEncoder enc(cfg_.encoder, cfg_.encoder_seed);
    perc::prepare_appearance_encoder(enc, base_data(), cfg_.encoder_train, [&](int step, double loss) {
        if ((step + 1) % 250 == 0) note("encoder step " + std::to_string(step + 1) + " loss " + std::to_string(loss));
    });
    enc.save(path);
    return perc::AppearanceEncoder::load(path);
}

train::LossConfig ArtifactStore::resolved_loss(const OffsetRecipe& recipe) {
    train::LossConfig loss = recipe.loss;
    if (loss.kind == off::LossKind::appearance && !loss.d_tgt) {
        const auto enc = encoder();
        loss.d_tgt = brightness_direction(enc, cfg_.data.dist, recipe.exemplars, recipe.exemplar_high,
                                          recipe.exemplar_low, recipe.train.seed + 1000);
    }
    return loss;
}

off::TokenOffsetSet ArtifactStore::offset(const OffsetRecipe& recipe) {
    const auto path = offset_path(recipe);
    const auto model = backbone();
    if (std::filesystem::exists(path)) {
        note("offset " + recipe.attribute + ": cached " + path.string());
        return off::load_offset(path, model.config());
    }
    const auto enc = encoder();
    const auto loss = resolved_loss(recipe);
    note("offset " + recipe.attribute + ": training " + std::to_string(recipe.train.steps) + " steps");
    auto res = train::train_offset(model, enc, base_data(), loss, recipe.refine, recipe.train,
                                   [&](const train::OffsetLogEntry& e) {
                                       if ((e.step + 1) % 25 == 0) note(train::format_log(e));
                                   });
    off::save_offset(path, res.offset);
    return off::load_offset(path, model.config());
}

StrengthSpec parse_strength_spec(const std::string& text) {
    static const std::regex head(R"(^([A-Za-z0-9_-]+):([-+]?[0-9]*\.?[0-9]+(?:[eE][-+]?[0-9]+)?)(?::(.+))?$)");
    static const std::regex num(R"(\s*([-+]?[0-9]*\.?[0-9]+(?:[eE][-+]?[0-9]+)?)\s*)");
    static const std::regex box(
        R"(^box\(([^,]+),([^,]+),([^,]+),([^)]+)\)(?:@([0-9]*\.?[0-9]+)-([0-9]*\.?[0-9]+))?$)");
    static const std::regex attn(R"(^attn\(\s*([0-9]+)\s*\)$)");
    std::smatch m;
    require(std::regex_match(text, m, head), ErrorCode::precondition,
            "bad strength spec '" + text + "' (expected name:strength[:mask])");
    StrengthSpec out;
    out.name = m[1];
    out.strength = std::stod(m[2]);
    if (!m[3].matched) return out;
    const std::string mask = m[3];
    std::smatch mm;
    auto coord = [&](const std::string& s) {
        std::smatch n;
        require(std::regex_match(s, n, num), ErrorCode::precondition, "bad box coordinate '" + s + "'");
        return std::stod(n[1]);
    };
    if (std::regex_match(mask, mm, box)) {
        off::MaskGeometry g;
        g.x0 = coord(mm[1]);
        g.y0 = coord(mm[2]);
        g.x1 = coord(mm[3]);
        g.y1 = coord(mm[4]);
        if (mm[5].matched) {
            g.t0 = std::stod(mm[5]);
            g.t1 = std::stod(mm[6]);
        }
        g.validate();
        out.mask = off::MaskSpec::box(g);
    } else if (std::regex_match(mask, mm, attn)) {
        out.mask = off::MaskSpec::attention(std::stoi(mm[1]));
    } else {
        throw Error(ErrorCode::precondition, "bad mask '" + mask + "' (expected box(x0,y0,x1,y1)[@t0-t1] or attn(i))");
    }
    return out;
}

}  // namespace tokendial::pipe
