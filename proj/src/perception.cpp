#include "tokendial/perception.hpp"

#include "tokendial/binio.hpp"
#include "tokendial/digest.hpp"
#include "tokendial/optim.hpp"

#include <Eigen/SVD>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <mutex>
#include <random>
#include <unordered_map>

namespace tokendial::perc {

namespace {

constexpr std::uint16_t kEncoderVersion = 1;

using IndexPtr = std::shared_ptr<const std::vector<ag::Index>>;

// (F-1)*H*W x 6 layout: frame f and the difference to frame f+1, channel last.
IndexPtr frame_pair_index(const VideoShape& s, int offset) {
    static std::mutex mu;
    static std::map<std::array<int, 5>, IndexPtr> cache;
    std::lock_guard<std::mutex> lock(mu);
    const std::array<int, 5> key{s.channels, s.frames, s.height, s.width, offset};
    if (auto it = cache.find(key); it != cache.end()) return it->second;
    const int fp = s.frames - 1;
    const int hw = s.height * s.width;
    auto idx = std::make_shared<std::vector<ag::Index>>(static_cast<std::size_t>(fp) * hw * s.channels);
    for (int f = 0; f < fp; ++f)
        for (int p = 0; p < hw; ++p)
            for (int c = 0; c < s.channels; ++c)
                (*idx)[(static_cast<std::size_t>(f) * hw + p) * s.channels + c] =
                    (static_cast<ag::Index>(c) * s.frames + f + offset) * hw + p;
    cache.emplace(key, idx);
    return idx;
}

// im2col for a 3x3, stride-2, zero-padded convolution over (n*H*W) x cin rows.
IndexPtr conv_index(int n, int h, int w, int cin) {
    static std::mutex mu;
    static std::map<std::array<int, 4>, IndexPtr> cache;
    std::lock_guard<std::mutex> lock(mu);
    const std::array<int, 4> key{n, h, w, cin};
    if (auto it = cache.find(key); it != cache.end()) return it->second;
    const int ho = (h + 1) / 2, wo = (w + 1) / 2;
    auto idx = std::make_shared<std::vector<ag::Index>>(static_cast<std::size_t>(n) * ho * wo * 9 * cin);
    std::size_t k = 0;
    for (int f = 0; f < n; ++f)
        for (int y = 0; y < ho; ++y)
            for (int x = 0; x < wo; ++x)
                for (int dy = -1; dy <= 1; ++dy)
                    for (int dx = -1; dx <= 1; ++dx) {
                        const int sy = 2 * y + dy, sx = 2 * x + dx;
                        const bool in = sy >= 0 && sy < h && sx >= 0 && sx < w;
                        for (int c = 0; c < cin; ++c) {
                            (*idx)[k++] = in ? ((static_cast<ag::Index>(f) * h + sy) * w + sx) * cin + c : -1;
                        }
                    }
    cache.emplace(key, idx);
    return idx;
}

ag::Var conv3x3s2(const ag::Var& x, int n, int h, int w, const ag::Var& weight, const ag::Var& bias) {
    const int cin = static_cast<int>(x.cols());
    const int ho = (h + 1) / 2, wo = (w + 1) / 2;
    ag::Var cols = ag::gather(x, conv_index(n, h, w, cin), static_cast<ag::Index>(n) * ho * wo, 9 * cin);
    return ag::add_row(ag::matmul(cols, weight), bias);
}

enum EncSlot : std::size_t { c1_w, c1_b, c2_w, c2_b, m1_w, m1_b, m2_w, m2_b, head_w, head_b, n_enc };

}  // namespace

nlohmann::json EncoderConfig::to_json() const {
    return {{"d_e", d_e}, {"conv1", conv1}, {"conv2", conv2}, {"hidden", hidden}};
}

EncoderConfig EncoderConfig::from_json(const nlohmann::json& j) {
    EncoderConfig c;
    c.d_e = j.at("d_e").get<int>();
    c.conv1 = j.at("conv1").get<int>();
    c.conv2 = j.at("conv2").get<int>();
    c.hidden = j.at("hidden").get<int>();
    return c;
}

nlohmann::json EncoderTrainConfig::to_json() const {
    return {{"steps", steps}, {"batch", batch}, {"lr", lr}, {"seed", seed}};
}

AppearanceEncoder::AppearanceEncoder(EncoderConfig cfg, std::uint64_t seed) : cfg_(cfg) {
    require(cfg_.d_e > 0 && cfg_.conv1 > 0 && cfg_.conv2 > 0 && cfg_.hidden > 0, ErrorCode::precondition,
            "encoder: sizes must be positive");
    std::mt19937_64 rng(seed);
    auto add = [&](const std::string& name, int r, int c, bool random) {
        ag::Mat m = ag::Mat::Zero(r, c);
        if (random) {
            std::normal_distribution<double> nd(0.0, 1.0 / std::sqrt(static_cast<double>(r)));
            for (ag::Index i = 0; i < m.size(); ++i) m.data()[i] = nd(rng);
        }
        params_.push_back(ag::Var::leaf(std::move(m), false));
        names_.push_back(name);
    };
    add("conv1.w", 9 * 6, cfg_.conv1, true);
    add("conv1.b", 1, cfg_.conv1, false);
    add("conv2.w", 9 * cfg_.conv1, cfg_.conv2, true);
    add("conv2.b", 1, cfg_.conv2, false);
    add("mlp.w1", cfg_.conv2, cfg_.hidden, true);
    add("mlp.b1", 1, cfg_.hidden, false);
    add("mlp.w2", cfg_.hidden, cfg_.d_e, true);
    add("mlp.b2", 1, cfg_.d_e, false);
    add("head.w", cfg_.d_e, 3, true);
    add("head.b", 1, 3, false);
    for (auto& p : params_) {
        ag::Mat& m = p.mutable_value();
        for (ag::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<float>(m.data()[i]);
    }
}

ag::Var AppearanceEncoder::trunk(const ag::Var& video, const VideoShape& s) const {
    require(s.channels == 3, ErrorCode::dimension_mismatch, "encoder expects 3 channels");
    require(s.frames >= 2, ErrorCode::precondition, "encoder needs at least two frames");
    require(video.size() == static_cast<ag::Index>(s.numel()), ErrorCode::dimension_mismatch,
            "encoder: data does not match shape");
    const int n = s.frames - 1;
    const ag::Index rows = static_cast<ag::Index>(n) * s.height * s.width;
    ag::Var now = ag::gather(video, frame_pair_index(s, 0), rows, 3);
    ag::Var next = ag::gather(video, frame_pair_index(s, 1), rows, 3);
    std::vector<ag::Var> parts{now, ag::sub(next, now)};
    ag::Var x = ag::concat_cols(parts);
    const auto& p = params_;
    x = ag::gelu(conv3x3s2(x, n, s.height, s.width, p[c1_w], p[c1_b]));
    const int h1 = (s.height + 1) / 2, w1 = (s.width + 1) / 2;
    x = ag::gelu(conv3x3s2(x, n, h1, w1, p[c2_w], p[c2_b]));
    ag::Var pooled = ag::mean_rows(x);
    ag::Var h = ag::gelu(ag::add_row(ag::matmul(pooled, p[m1_w]), p[m1_b]));
    return ag::add_row(ag::matmul(h, p[m2_w]), p[m2_b]);
}

ag::Var AppearanceEncoder::encode(const ag::Var& video, const VideoShape& shape) const {
    require(!params_.empty(), ErrorCode::not_trained, "encoder not initialized");
    return trunk(video, shape);
}

ag::Mat AppearanceEncoder::encode(const VideoTensor& v) const {
    return encode(ag::Var::constant(v.data), v.shape).value();
}

ag::Mat AppearanceEncoder::predict_attributes(const VideoTensor& v) const {
    ag::Mat e = encode(v);
    ag::Mat z = e * params_[head_w].value() + params_[head_b].value();
    for (int k = 0; k < 3; ++k) z(0, k) = z(0, k) * target_std_[k] + target_mean_[k];
    return z;
}

std::string AppearanceEncoder::digest() const {
    Sha256 h;
    h.update(cfg_.to_json().dump());
    for (std::size_t i = 0; i < params_.size(); ++i) {
        h.update(names_[i]);
        const ag::Mat& m = params_[i].value();
        h.update(m.data(), static_cast<std::size_t>(m.size()) * sizeof(double));
    }
    return h.hex();
}

void AppearanceEncoder::save(const std::filesystem::path& path) const {
    std::ofstream os(path, std::ios::binary);
    require(static_cast<bool>(os), ErrorCode::not_found, "cannot open " + path.string() + " for writing");
    nlohmann::json meta;
    meta["format_version"] = kEncoderVersion;
    meta["config"] = cfg_.to_json();
    meta["trained"] = trained_;
    meta["target_mean"] = target_mean_;
    meta["target_std"] = target_std_;
    meta["training"] = training_meta;
    nlohmann::json arrays = nlohmann::json::array();
    for (std::size_t i = 0; i < params_.size(); ++i) {
        arrays.push_back({{"name", names_[i]}, {"rows", params_[i].rows()}, {"cols", params_[i].cols()}});
    }
    meta["arrays"] = arrays;
    binio::put_magic(os, "TDEN");
    binio::put_u16(os, kEncoderVersion);
    binio::put_string(os, meta.dump());
    for (const auto& v : params_) {
        const ag::Mat& m = v.value();
        for (ag::Index i = 0; i < m.size(); ++i) binio::put_f32(os, static_cast<float>(m.data()[i]));
    }
}

AppearanceEncoder AppearanceEncoder::load(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    require(static_cast<bool>(is), ErrorCode::not_found, "encoder checkpoint not found: " + path.string());
    binio::expect_magic(is, "TDEN");
    const auto version = binio::get_u16(is, "version");
    require(version == kEncoderVersion, ErrorCode::format, "unsupported encoder version " + std::to_string(version));
    nlohmann::json meta;
    try {
        meta = nlohmann::json::parse(binio::get_string(is, "metadata"));
    } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorCode::format, std::string("corrupt header: ") + e.what());
    }
    AppearanceEncoder enc(EncoderConfig::from_json(meta.at("config")), 0);
    enc.trained_ = meta.at("trained").get<bool>();
    enc.target_mean_ = meta.at("target_mean").get<std::array<double, 3>>();
    enc.target_std_ = meta.at("target_std").get<std::array<double, 3>>();
    enc.training_meta = meta.value("training", nlohmann::json::object());
    const auto& arrays = meta.at("arrays");
    require(arrays.size() == enc.params_.size(), ErrorCode::format, "encoder parameter count mismatch");
    for (std::size_t i = 0; i < arrays.size(); ++i) {
        require(arrays[i].at("name").get<std::string>() == enc.names_[i] &&
                    arrays[i].at("rows").get<ag::Index>() == enc.params_[i].rows() &&
                    arrays[i].at("cols").get<ag::Index>() == enc.params_[i].cols(),
                ErrorCode::format, "encoder array mismatch at " + enc.names_[i]);
        ag::Mat& w = enc.params_[i].mutable_value();
        for (ag::Index k = 0; k < w.size(); ++k) w.data()[k] = binio::get_f32(is, "weights");
    }
    return enc;
}

std::array<double, 3> attribute_targets(const synth::SceneParams& p) {
    return {p.brightness, p.radius, std::hypot(p.velocity.x, p.velocity.y)};
}

void prepare_appearance_encoder(AppearanceEncoder& enc, const std::vector<synth::Clip>& data,
                                const EncoderTrainConfig& cfg, const std::function<void(int, double)>& log) {
    require(!data.empty(), ErrorCode::precondition, "encoder training: empty dataset");
    require(cfg.steps >= 0 && cfg.batch >= 1, ErrorCode::precondition, "encoder training: bad config");
    enc.training_meta = cfg.to_json();
    if (cfg.steps == 0) return;

    std::array<double, 3> mean{}, sq{};
    for (const auto& c : data) {
        const auto t = attribute_targets(c.params);
        for (int k = 0; k < 3; ++k) {
            mean[k] += t[k];
            sq[k] += t[k] * t[k];
        }
    }
    const double n = static_cast<double>(data.size());
    for (int k = 0; k < 3; ++k) {
        mean[k] /= n;
        enc.target_mean_[k] = mean[k];
        enc.target_std_[k] = std::sqrt(std::max(sq[k] / n - mean[k] * mean[k], 1e-12));
    }

    std::mt19937_64 rng(cfg.seed);
    std::uniform_int_distribution<std::size_t> pick(0, data.size() - 1);
    AdamW opt;
    for (auto& p : enc.params_) p.set_requires_grad(true);
    for (int step = 0; step < cfg.steps; ++step) {
        const double prog = static_cast<double>(step) / std::max(1, cfg.steps - 1);
        opt.lr = cfg.lr * (0.05 + 0.95 * 0.5 * (1.0 + std::cos(M_PI * prog)));
        double loss_sum = 0.0;
        for (int b = 0; b < cfg.batch; ++b) {
            const auto& clip = data[pick(rng)];
            ag::Var e = enc.trunk(ag::Var::constant(clip.video.data), clip.video.shape);
            ag::Var z = ag::add_row(ag::matmul(e, enc.params_[head_w]), enc.params_[head_b]);
            const auto t = attribute_targets(clip.params);
            ag::Mat target(1, 3);
            for (int k = 0; k < 3; ++k) target(0, k) = (t[k] - enc.target_mean_[k]) / enc.target_std_[k];
            ag::Var loss = ag::scale(ag::mean(ag::square(ag::sub(z, ag::Var::constant(target)))), 1.0 / cfg.batch);
            loss_sum += loss.item();
            ag::backward(loss);
        }
        require(std::isfinite(loss_sum), ErrorCode::divergence,
                "encoder training: non-finite loss at step " + std::to_string(step));
        clip_grad_norm(enc.params_, 1.0);
        opt.step(enc.params_);
        for (auto& p : enc.params_) p.zero_grad();
        if (log) log(step, loss_sum);
    }
    for (auto& p : enc.params_) {
        p.set_requires_grad(false);
        ag::Mat& m = p.mutable_value();
        for (ag::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<float>(m.data()[i]);
    }
    enc.trained_ = true;
}

DirectionVector target_direction_from_exemplars(const AppearanceEncoder& enc, const std::vector<VideoTensor>& high,
                                                const std::vector<VideoTensor>& low) {
    require(enc.trained(), ErrorCode::not_trained, "encoder not trained");
    require(!high.empty() && !low.empty(), ErrorCode::precondition, "target direction: empty exemplar set");
    ag::Mat mh = ag::Mat::Zero(1, enc.dim()), ml = ag::Mat::Zero(1, enc.dim());
    for (const auto& v : high) mh += enc.encode(v);
    for (const auto& v : low) ml += enc.encode(v);
    ag::Mat d = mh / static_cast<double>(high.size()) - ml / static_cast<double>(low.size());
    const double nrm = d.norm();
    require(nrm > 1e-12, ErrorCode::degenerate, "degenerate direction: exemplar means coincide");
    return {d / nrm, true};
}

DirectionVector debias_direction(const DirectionVector& d_tgt, const ag::Mat& nuisance_dirs, int n_components,
                                 ag::Mat* removed) {
    require(n_components >= 0, ErrorCode::precondition, "debias: negative component count");
    if (n_components == 0) {
        if (removed) removed->resize(0, d_tgt.v.cols());
        return d_tgt;
    }
    require(nuisance_dirs.rows() >= n_components, ErrorCode::precondition,
            "debias: need at least " + std::to_string(n_components) + " nuisance directions");
    require(nuisance_dirs.cols() == d_tgt.v.cols(), ErrorCode::dimension_mismatch, "debias: dimension mismatch");
    // Principal directions of the (uncentred) nuisance set.
    Eigen::JacobiSVD<Eigen::MatrixXd> svd(Eigen::MatrixXd(nuisance_dirs), Eigen::ComputeThinV);
    Eigen::MatrixXd basis = svd.matrixV().leftCols(n_components);  // d x n, orthonormal
    Eigen::RowVectorXd v = d_tgt.v.row(0);
    Eigen::RowVectorXd proj = v - (v * basis) * basis.transpose();
    proj -= (proj * basis) * basis.transpose();  // second pass tightens orthogonality
    const double nrm = proj.norm();
    require(nrm > 1e-6 * std::max(1.0, v.norm()), ErrorCode::degenerate,
            "degenerate after debias: target lies in the nuisance span");
    if (removed) *removed = basis.transpose();
    return {ag::Mat(proj / nrm), true};
}

DirectionVector debias_direction(const AppearanceEncoder& enc, const DirectionVector& d_tgt,
                                 const std::vector<ExemplarGroup>& nuisance, int n_components) {
    if (n_components == 0) return d_tgt;
    ag::Mat dirs(static_cast<ag::Index>(nuisance.size()), enc.dim());
    for (std::size_t i = 0; i < nuisance.size(); ++i) {
        dirs.row(static_cast<ag::Index>(i)) = target_direction_from_exemplars(enc, nuisance[i].high, nuisance[i].low).v;
    }
    return debias_direction(d_tgt, dirs, n_components);
}

// --- frame features ----------------------------------------------------------

namespace {

FeatureOperator build_feature_operator(const VideoShape& s, int p) {
    require(s.channels == 3, ErrorCode::dimension_mismatch, "frame features expect 3 channels");
    require(p >= 1 && s.height % p == 0 && s.width % p == 0, ErrorCode::dimension_mismatch,
            "frame features: " + s.str() + " not divisible by p_feat=" + std::to_string(p));
    FeatureOperator fo;
    fo.shape = s;
    fo.p_feat = p;
    fo.h_p = s.height / p;
    fo.w_p = s.width / p;
    const int H = s.height, W = s.width, HW = H * W, N = fo.cells();
    auto clampi = [](int v, int lo, int hi) { return std::min(std::max(v, lo), hi); };
    auto pix = [&](int c, int f, int y, int x) {
        return (static_cast<ag::Index>(c) * s.frames + f) * HW + static_cast<ag::Index>(y) * W + x;
    };
    const double cell_area = static_cast<double>(p * p);
    static constexpr int kSobel[3][3] = {{-1, 0, 1}, {-2, 0, 2}, {-1, 0, 1}};
    std::vector<Eigen::Triplet<double, ag::Index>> trip;
    for (int f = 0; f < s.frames; ++f) {
        const ag::Index base = static_cast<ag::Index>(f) * kFeatChannels * N;
        for (int cy = 0; cy < fo.h_p; ++cy) {
            for (int cx = 0; cx < fo.w_p; ++cx) {
                const int cell = cy * fo.w_p + cx;
                std::unordered_map<ag::Index, double> gx, gy, sm;
                for (int y = cy * p; y < (cy + 1) * p; ++y) {
                    for (int x = cx * p; x < (cx + 1) * p; ++x) {
                        for (int c = 0; c < 3; ++c) {
                            trip.emplace_back(base + c * N + cell, pix(c, f, y, x), 1.0 / cell_area);
                        }
                        for (int dy = -1; dy <= 1; ++dy) {
                            for (int dx = -1; dx <= 1; ++dx) {
                                const int yy = clampi(y + dy, 0, H - 1), xx = clampi(x + dx, 0, W - 1);
                                const double kx = kSobel[dy + 1][dx + 1] / 8.0;
                                const double ky = kSobel[dx + 1][dy + 1] / 8.0;
                                for (int c = 0; c < 3; ++c) {
                                    const ag::Index q = pix(c, f, yy, xx);
                                    if (kx != 0.0) gx[q] += kx / (3.0 * cell_area);
                                    if (ky != 0.0) gy[q] += ky / (3.0 * cell_area);
                                }
                            }
                        }
                    }
                }
                for (int dy = -1; dy <= 1; ++dy) {
                    for (int dx = -1; dx <= 1; ++dx) {
                        const int ny = clampi(cy + dy, 0, fo.h_p - 1), nx = clampi(cx + dx, 0, fo.w_p - 1);
                        for (int y = ny * p; y < (ny + 1) * p; ++y)
                            for (int x = nx * p; x < (nx + 1) * p; ++x)
                                for (int c = 0; c < 3; ++c) sm[pix(c, f, y, x)] += 1.0 / (9.0 * 3.0 * cell_area);
                    }
                }
                for (const auto& [q, w] : gx)
                    if (w != 0.0) trip.emplace_back(base + 3 * N + cell, q, w);
                for (const auto& [q, w] : gy)
                    if (w != 0.0) trip.emplace_back(base + 4 * N + cell, q, w);
                for (const auto& [q, w] : sm) trip.emplace_back(base + 5 * N + cell, q, w);
            }
        }
    }
    auto op = std::make_shared<ag::SpMat>(static_cast<ag::Index>(s.frames) * kFeatChannels * N,
                                          static_cast<ag::Index>(s.numel()));
    op->setFromTriplets(trip.begin(), trip.end());
    op->makeCompressed();
    fo.op = std::move(op);
    return fo;
}

}  // namespace

const FeatureOperator& feature_operator(const VideoShape& shape, int p_feat) {
    static std::mutex mu;
    static std::map<std::array<int, 5>, std::unique_ptr<FeatureOperator>> cache;
    const std::array<int, 5> key{shape.channels, shape.frames, shape.height, shape.width, p_feat};
    std::lock_guard<std::mutex> lock(mu);
    auto it = cache.find(key);
    if (it == cache.end()) {
        it = cache.emplace(key, std::make_unique<FeatureOperator>(build_feature_operator(shape, p_feat))).first;
    }
    return *it->second;
}

ag::Var video_features(const ag::Var& video, const VideoShape& shape, int p_feat) {
    require(video.size() == static_cast<ag::Index>(shape.numel()), ErrorCode::dimension_mismatch,
            "frame features: data does not match shape");
    const FeatureOperator& fo = feature_operator(shape, p_feat);
    ag::Var col = ag::reshape(video, video.size(), 1);
    ag::Var feats = ag::apply_sparse(fo.op, col);
    return ag::reshape(feats, shape.frames, static_cast<ag::Index>(kFeatChannels) * fo.cells());
}

FrameFeatureGrid frame_features(const ag::Mat& frame, int height, int width, int p_feat) {
    const VideoShape s{static_cast<int>(frame.rows()), 1, height, width};
    require(frame.cols() == static_cast<ag::Index>(height) * width, ErrorCode::dimension_mismatch,
            "frame features: frame does not match dims");
    const FeatureOperator& fo = feature_operator(s, p_feat);
    ag::Mat col = Eigen::Map<const ag::Mat>(frame.data(), frame.size(), 1);
    ag::Mat out = (*fo.op) * col;
    FrameFeatureGrid g;
    g.h_p = fo.h_p;
    g.w_p = fo.w_p;
    g.features = Eigen::Map<const ag::Mat>(out.data(), kFeatChannels, fo.cells());
    return g;
}

std::vector<FrameFeatureGrid> frame_features(const VideoTensor& v, int p_feat) {
    const FeatureOperator& fo = feature_operator(v.shape, p_feat);
    ag::Mat col = Eigen::Map<const ag::Mat>(v.data.data(), v.data.size(), 1);
    ag::Mat out = (*fo.op) * col;
    std::vector<FrameFeatureGrid> grids;
    const ag::Index per = static_cast<ag::Index>(kFeatChannels) * fo.cells();
    for (int f = 0; f < v.shape.frames; ++f) {
        FrameFeatureGrid g;
        g.h_p = fo.h_p;
        g.w_p = fo.w_p;
        g.features = Eigen::Map<const ag::Mat>(out.data() + f * per, kFeatChannels, fo.cells());
        grids.push_back(std::move(g));
    }
    return grids;
}

namespace {

double one_minus_cos(const ag::Mat& a, const ag::Mat& b) {
    const double ab = a.cwiseProduct(b).sum();
    const double aa = a.squaredNorm(), bb = b.squaredNorm();
    const double denom = std::sqrt(std::max(aa * bb, 1e-24));
    return std::max(0.0, 1.0 - ab / denom);
}

}  // namespace

double perceptual_distance(const VideoTensor& a, const VideoTensor& b) {
    require(a.shape == b.shape, ErrorCode::dimension_mismatch,
            "perceptual_distance: " + a.shape.str() + " vs " + b.shape.str());
    const auto fa = frame_features(a), fb = frame_features(b);
    double acc = 0.0;
    for (std::size_t f = 0; f < fa.size(); ++f) acc += one_minus_cos(fa[f].features, fb[f].features);
    return acc / static_cast<double>(fa.size());
}

double perceptual_distance_frame(const VideoTensor& a, const VideoTensor& b, int frame) {
    require(a.shape == b.shape, ErrorCode::dimension_mismatch, "perceptual_distance: shape mismatch");
    require(frame >= 0 && frame < a.shape.frames, ErrorCode::precondition, "perceptual_distance: frame out of range");
    const auto fa = frame_features(a), fb = frame_features(b);
    return one_minus_cos(fa[static_cast<std::size_t>(frame)].features, fb[static_cast<std::size_t>(frame)].features);
}

ag::Var perceptual_distance(const ag::Var& a, const ag::Var& b, const VideoShape& shape) {
    ag::Var fa = video_features(a, shape), fb = video_features(b, shape);
    ag::Var acc = ag::Var::scalar(0.0);
    for (int f = 0; f < shape.frames; ++f) {
        ag::Var c = ag::cosine(ag::slice_rows(fa, f, 1), ag::slice_rows(fb, f, 1), 1e-12);
        acc = ag::add(acc, ag::add_scalar(ag::neg(c), 1.0));
    }
    return ag::scale(acc, 1.0 / shape.frames);
}

}  // namespace tokendial::perc
