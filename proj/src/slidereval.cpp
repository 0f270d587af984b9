#include "tokendial/slidereval.hpp"

#include "tokendial/digest.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

namespace tokendial::eval {

namespace {

std::vector<double> deltas(const std::vector<double>& a) {
    std::vector<double> d;
    for (std::size_t k = 1; k < a.size(); ++k) d.push_back(a[k] - a[k - 1]);
    return d;
}

std::vector<double> average_ranks(const std::vector<double>& x) {
    std::vector<std::size_t> idx(x.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return x[a] < x[b]; });
    std::vector<double> r(x.size());
    std::size_t i = 0;
    while (i < idx.size()) {
        std::size_t j = i;
        while (j + 1 < idx.size() && x[idx[j + 1]] == x[idx[i]]) ++j;
        const double avg = 0.5 * static_cast<double>(i + j) + 1.0;
        for (std::size_t k = i; k <= j; ++k) r[idx[k]] = avg;
        i = j + 1;
    }
    return r;
}

double mean_of(const std::vector<double>& v) {
    if (v.empty()) return 0.0;
    return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

int attribute_column(OracleKind k) { return k == OracleKind::displacement ? 2 : 0; }

}  // namespace

double conceptual_range(const VideoTensor& low, const VideoTensor& high, const perc::AppearanceEncoder& enc) {
    require(low.shape == high.shape, ErrorCode::dimension_mismatch, "conceptual_range: endpoint shapes differ");
    const ag::Var a = ag::Var::constant(enc.encode(low));
    const ag::Var b = ag::Var::constant(enc.encode(high));
    const double c = ag::cosine(a, b).value()(0, 0);
    return std::clamp(1.0 - c, 0.0, 2.0);
}

double smoothness_csm(const std::vector<double>& scores) {
    require(scores.size() >= 3, ErrorCode::precondition, "CSM needs at least three levels");
    const std::vector<double> d = deltas(scores);
    const double m = mean_of(d);
    double var = 0.0, abs_sum = 0.0;
    for (double x : d) {
        var += (x - m) * (x - m);
        abs_sum += std::abs(x);
    }
    const double sd = std::sqrt(var / static_cast<double>(d.size() - 1));
    return sd / (abs_sum / static_cast<double>(d.size()) + 1e-8);
}

double monotonicity(const std::vector<double>& scores) {
    require(scores.size() >= 3, ErrorCode::precondition, "monotonicity needs at least three levels");
    const double overall = scores.back() - scores.front();
    if (overall == 0.0) return 0.5;
    const std::vector<double> d = deltas(scores);
    int agree = 0;
    for (double x : d)
        if ((x > 0.0 && overall > 0.0) || (x < 0.0 && overall < 0.0)) ++agree;
    return static_cast<double>(agree) / static_cast<double>(d.size());
}

double semantic_preservation(const std::vector<VideoTensor>& levels) {
    require(levels.size() >= 2, ErrorCode::precondition, "SP needs at least two levels");
    double s = 0.0;
    for (std::size_t k = 1; k < levels.size(); ++k) {
        require(levels[k].shape == levels[0].shape, ErrorCode::dimension_mismatch, "SP: level shapes differ");
        s += perc::perceptual_distance(levels[k], levels[0]);
    }
    return s / static_cast<double>(levels.size() - 1);
}

double overall_score(double cr, double sp, double csm, double eps) {
    require(std::isfinite(cr) && std::isfinite(sp) && std::isfinite(csm) && sp >= 0.0, ErrorCode::precondition,
            "overall_score: inputs must be finite with SP >= 0");
    return cr / (eps + sp) + (1.0 - csm);
}

double spearman(const std::vector<double>& x, const std::vector<double>& y) {
    require(x.size() == y.size() && x.size() >= 2, ErrorCode::precondition, "spearman: need two equal-length series");
    const auto rx = average_ranks(x), ry = average_ranks(y);
    const double mx = mean_of(rx), my = mean_of(ry);
    double sxy = 0.0, sxx = 0.0, syy = 0.0;
    for (std::size_t i = 0; i < rx.size(); ++i) {
        sxy += (rx[i] - mx) * (ry[i] - my);
        sxx += (rx[i] - mx) * (rx[i] - mx);
        syy += (ry[i] - my) * (ry[i] - my);
    }
    if (sxx == 0.0 || syy == 0.0) return 0.0;
    return sxy / std::sqrt(sxx * syy);
}

std::string to_string(OracleKind k) {
    switch (k) {
        case OracleKind::brightness: return "brightness";
        case OracleKind::displacement: return "displacement";
        default: return "none";
    }
}

OracleKind oracle_kind_from_string(const std::string& s) {
    if (s == "brightness") return OracleKind::brightness;
    if (s == "displacement") return OracleKind::displacement;
    if (s == "none") return OracleKind::none;
    throw Error(ErrorCode::precondition, "unknown oracle '" + s + "'");
}

double oracle_score(OracleKind k, const VideoTensor& v) {
    switch (k) {
        case OracleKind::brightness: return synth::oracle_brightness(v);
        case OracleKind::displacement: return synth::oracle_displacement(v);
        default: throw Error(ErrorCode::precondition, "no oracle configured");
    }
}

void SweepConfig::validate() const {
    require(strengths.size() >= 3, ErrorCode::precondition, "sweep needs at least three strength levels");
    require(strengths.front() == 0.0, ErrorCode::precondition, "sweep strengths must start at 0");
    require(std::is_sorted(strengths.begin(), strengths.end()), ErrorCode::precondition,
            "sweep strengths must be ascending");
    require(!seeds.empty(), ErrorCode::precondition, "sweep needs at least one seed");
    require(!prompts.empty(), ErrorCode::precondition, "sweep needs at least one prompt");
    for (const auto& p : prompts) p.validate();
    require(steps >= 1, ErrorCode::precondition, "sweep steps must be >= 1");
}

nlohmann::json SweepConfig::to_json() const {
    nlohmann::json prompts_j = nlohmann::json::array();
    for (const auto& p : prompts) prompts_j.push_back(p.text());
    return {{"strengths", strengths},
            {"seeds", seeds},
            {"prompts", prompts_j},
            {"s_txt", s_txt},
            {"steps", steps},
            {"shape", {shape.channels, shape.frames, shape.height, shape.width}},
            {"mask", mask.to_json()},
            {"oracle", to_string(oracle)},
            {"metrics",
             {{"cr", "1 - cos(E(level_S), E(level_0))"},
              {"csm", "stdev_n-1(delta) / (mean|delta| + 1e-8)"},
              {"mono", "sign agreement with a_S - a_0, 0.5 if equal"},
              {"sp", "mean perceptual_distance(level_k, level_0), k >= 1"},
              {"os_epsilon", kOsEpsilon}}}};
}

std::string SweepConfig::digest() const { return sha256_hex(to_json().dump()); }

Aggregate aggregate_rows(const std::vector<SweepRow>& rows, std::size_t levels) {
    Aggregate a;
    a.mean_encoder_curve.assign(levels, 0.0);
    a.mean_oracle_curve.assign(levels, 0.0);
    for (const auto& r : rows) {
        ++a.runs;
        a.cr += r.cr;
        a.csm += r.csm;
        a.mono += r.mono;
        a.sp += r.sp;
        a.frame0_distance += r.frame0_distance;
        for (std::size_t k = 0; k < levels && k < r.encoder_scores.size(); ++k) a.mean_encoder_curve[k] += r.encoder_scores[k];
        if (r.oracle_ok) {
            ++a.oracle_runs;
            a.oracle_spearman += r.oracle_spearman;
            a.oracle_mono += r.oracle_mono;
            a.oracle_csm += r.oracle_csm;
            for (std::size_t k = 0; k < levels; ++k) a.mean_oracle_curve[k] += r.oracle_scores[k];
        } else {
            ++a.oracle_failures;
        }
    }
    if (a.runs > 0) {
        const double n = a.runs;
        a.cr /= n;
        a.csm /= n;
        a.mono /= n;
        a.sp /= n;
        a.frame0_distance /= n;
        for (double& v : a.mean_encoder_curve) v /= n;
    }
    if (a.oracle_runs > 0) {
        const double n = a.oracle_runs;
        a.oracle_spearman /= n;
        a.oracle_mono /= n;
        a.oracle_csm /= n;
        for (double& v : a.mean_oracle_curve) v /= n;
    }
    a.os = overall_score(a.cr, a.sp, a.csm);
    return a;
}

nlohmann::json SliderEvalReport::to_json() const {
    nlohmann::json rows_j = nlohmann::json::array();
    for (const auto& r : rows) {
        rows_j.push_back({{"prompt", r.prompt},
                          {"seed", r.seed},
                          {"encoder_scores", r.encoder_scores},
                          {"oracle_scores", r.oracle_scores},
                          {"oracle_ok", r.oracle_ok},
                          {"cr", r.cr},
                          {"csm", r.csm},
                          {"mono", r.mono},
                          {"sp", r.sp},
                          {"oracle_spearman", r.oracle_spearman},
                          {"oracle_mono", r.oracle_mono},
                          {"oracle_csm", r.oracle_csm},
                          {"frame0_distance", r.frame0_distance}});
    }
    const Aggregate& a = aggregate;
    return {{"attribute", attribute},
            {"config_digest", config_digest},
            {"config", config},
            {"strengths", strengths},
            {"rows", rows_j},
            {"aggregate",
             {{"cr", a.cr},
              {"csm", a.csm},
              {"mono", a.mono},
              {"sp", a.sp},
              {"os", a.os},
              {"oracle_spearman", a.oracle_spearman},
              {"oracle_mono", a.oracle_mono},
              {"oracle_csm", a.oracle_csm},
              {"frame0_distance", a.frame0_distance},
              {"mean_encoder_curve", a.mean_encoder_curve},
              {"mean_oracle_curve", a.mean_oracle_curve},
              {"runs", a.runs},
              {"oracle_runs", a.oracle_runs},
              {"oracle_failures", a.oracle_failures}}}};
}

SliderEvalReport SliderEvalReport::from_json(const nlohmann::json& j) {
    SliderEvalReport r;
    try {
        r.attribute = j.at("attribute").get<std::string>();
        r.config_digest = j.at("config_digest").get<std::string>();
        r.config = j.at("config");
        r.strengths = j.at("strengths").get<std::vector<double>>();
        for (const auto& rj : j.at("rows")) {
            SweepRow row;
            row.prompt = rj.at("prompt").get<std::string>();
            row.seed = rj.at("seed").get<std::uint64_t>();
            row.encoder_scores = rj.at("encoder_scores").get<std::vector<double>>();
            row.oracle_scores = rj.at("oracle_scores").get<std::vector<double>>();
            row.oracle_ok = rj.at("oracle_ok").get<bool>();
            row.cr = rj.at("cr").get<double>();
            row.csm = rj.at("csm").get<double>();
            row.mono = rj.at("mono").get<double>();
            row.sp = rj.at("sp").get<double>();
            row.oracle_spearman = rj.at("oracle_spearman").get<double>();
            row.oracle_mono = rj.at("oracle_mono").get<double>();
            row.oracle_csm = rj.at("oracle_csm").get<double>();
            row.frame0_distance = rj.at("frame0_distance").get<double>();
            r.rows.push_back(std::move(row));
        }
    } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorCode::format, std::string("slider report: ") + e.what());
    }
    r.aggregate = aggregate_rows(r.rows, r.strengths.size());
    return r;
}

std::string SliderEvalReport::to_csv() const {
    std::ostringstream os;
    os.precision(10);
    os << "prompt,seed,level,strength,encoder_score,oracle_score\n";
    for (const auto& r : rows) {
        for (std::size_t k = 0; k < strengths.size(); ++k) {
            os << '"' << r.prompt << "\"," << r.seed << ',' << k << ',' << strengths[k] << ',' << r.encoder_scores[k]
               << ',';
            if (r.oracle_ok) os << r.oracle_scores[k];
            os << '\n';
        }
    }
    return os.str();
}

img::Image SliderEvalReport::plot() const {
    auto normalized = [](std::vector<double> c) {
        if (c.empty()) return c;
        const double lo = c.front();
        double span = 0.0;
        for (double v : c) span = std::max(span, std::abs(v - lo));
        for (double& v : c) v = span > 0.0 ? (v - lo) / span : 0.0;
        return c;
    };
    std::vector<img::Series> series;
    series.push_back({"encoder", strengths, normalized(aggregate.mean_encoder_curve), {40, 90, 200}});
    if (aggregate.oracle_runs > 0)
        series.push_back({"oracle", strengths, normalized(aggregate.mean_oracle_curve), {210, 60, 40}});
    return img::line_plot(series);
}

SliderEvalReport run_sweep(const SweepInputs& in, const SweepConfig& cfg, const SweepProgress& progress,
                           const LevelSink& sink) {
    cfg.validate();
    require(in.model && in.offset && in.encoder, ErrorCode::precondition, "sweep: model, offset and encoder required");
    require(in.encoder->trained(), ErrorCode::not_trained, "encoder not trained");
    if (!in.d_tgt) {
        require(cfg.oracle != OracleKind::none, ErrorCode::precondition,
                "sweep: need a target direction or an oracle attribute");
    }
    in.offset->bind(in.model->config());

    SliderEvalReport rep;
    rep.attribute = in.offset->attribute_name;
    rep.config = cfg.to_json();
    rep.config["offset"] = in.offset->attribute_name;
    rep.config_digest = sha256_hex(rep.config.dump());
    rep.strengths = cfg.strengths;

    ag::Mat dir;
    if (in.d_tgt) dir = in.d_tgt->v / std::max(in.d_tgt->v.norm(), 1e-12);
    auto score = [&](const VideoTensor& v) {
        if (in.d_tgt) return in.encoder->encode(v).row(0).dot(dir.row(0));
        return in.encoder->predict_attributes(v)(0, attribute_column(cfg.oracle));
    };

    const std::size_t total = cfg.prompts.size() * cfg.seeds.size() * cfg.strengths.size();
    std::size_t done = 0, run = 0;
    for (const auto& prompt : cfg.prompts) {
        for (std::uint64_t seed : cfg.seeds) {
            std::vector<VideoTensor> levels;
            for (std::size_t k = 0; k < cfg.strengths.size(); ++k) {
                guide::GuidanceConfig g;
                g.s_txt = cfg.s_txt;
                g.steps = cfg.steps;
                g.seed = seed;
                g.shape = cfg.shape;
                g.edits.push_back({in.offset, cfg.strengths[k], cfg.mask});
                levels.push_back(guide::generate(*in.model, prompt, g).video);
                if (sink) sink(run, k, levels.back());
                if (progress) progress(++done, total);
            }
            SweepRow row;
            row.prompt = prompt.text();
            row.seed = seed;
            for (const auto& v : levels) row.encoder_scores.push_back(score(v));
            row.cr = conceptual_range(levels.front(), levels.back(), *in.encoder);
            row.csm = smoothness_csm(row.encoder_scores);
            row.mono = monotonicity(row.encoder_scores);
            row.sp = semantic_preservation(levels);
            row.frame0_distance = perc::perceptual_distance_frame(levels.back(), levels.front(), 0);
            if (cfg.oracle != OracleKind::none) {
                try {
                    for (const auto& v : levels) row.oracle_scores.push_back(oracle_score(cfg.oracle, v));
                    row.oracle_ok = true;
                } catch (const Error& e) {
                    if (e.code() != ErrorCode::no_foreground) throw;
                    row.oracle_scores.clear();
                }
            }
            if (row.oracle_ok) {
                row.oracle_spearman = spearman(cfg.strengths, row.oracle_scores);
                row.oracle_mono = monotonicity(row.oracle_scores);
                row.oracle_csm = smoothness_csm(row.oracle_scores);
            }
            rep.rows.push_back(std::move(row));
            ++run;
        }
    }
    rep.aggregate = aggregate_rows(rep.rows, cfg.strengths.size());
    return rep;
}

void write_report(const SliderEvalReport& r, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    img::write_file(dir / "report.json", r.to_json().dump(2));
    img::write_file(dir / "scores.csv", r.to_csv());
    img::write_file(dir / "curves.png", img::encode_png(r.plot()));
}

}  // namespace tokendial::eval
