#include "tokendial/featflow.hpp"

#include "tokendial/binio.hpp"

#include <Eigen/QR>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <mutex>

namespace tokendial::flow {

namespace {

constexpr std::uint16_t kFlowVersion = 1;

int clampi(int v, int lo, int hi) { return std::min(std::max(v, lo), hi); }

struct LkOps {
    std::shared_ptr<const std::vector<ag::Index>> cur, next, xp, xm, yp, ym;
    std::shared_ptr<const ag::SpMat> reduce;  // channel sum + window average, on flattened (pair, d, cell)
};

const LkOps& lk_ops(int frames, int channels, int h_p, int w_p, int window) {
    static std::mutex mu;
    static std::map<std::array<int, 5>, std::unique_ptr<LkOps>> cache;
    const std::array<int, 5> key{frames, channels, h_p, w_p, window};
    std::lock_guard<std::mutex> lock(mu);
    if (auto it = cache.find(key); it != cache.end()) return *it->second;

    const int n = h_p * w_p;
    const int pairs = frames - 1;
    const std::size_t total = static_cast<std::size_t>(pairs) * channels * n;
    auto make = [&](int dt, int dy, int dx) {
        auto idx = std::make_shared<std::vector<ag::Index>>(total);
        std::size_t k = 0;
        for (int t = 0; t < pairs; ++t)
            for (int d = 0; d < channels; ++d)
                for (int y = 0; y < h_p; ++y)
                    for (int x = 0; x < w_p; ++x) {
                        const int sy = clampi(y + dy, 0, h_p - 1), sx = clampi(x + dx, 0, w_p - 1);
                        (*idx)[k++] = (static_cast<ag::Index>(t + dt) * channels + d) * n + sy * w_p + sx;
                    }
        return idx;
    };
    auto ops = std::make_unique<LkOps>();
    ops->cur = make(0, 0, 0);
    ops->next = make(1, 0, 0);
    ops->xp = make(0, 0, 1);
    ops->xm = make(0, 0, -1);
    ops->yp = make(0, 1, 0);
    ops->ym = make(0, -1, 0);

    const int r = window / 2;
    const double inv = 1.0 / (static_cast<double>(window) * window);
    std::vector<Eigen::Triplet<double, ag::Index>> trip;
    for (int t = 0; t < pairs; ++t)
        for (int y = 0; y < h_p; ++y)
            for (int x = 0; x < w_p; ++x) {
                const ag::Index row = static_cast<ag::Index>(t) * n + y * w_p + x;
                for (int dy = -r; dy <= r; ++dy)
                    for (int dx = -r; dx <= r; ++dx) {
                        const int sy = clampi(y + dy, 0, h_p - 1), sx = clampi(x + dx, 0, w_p - 1);
                        for (int d = 0; d < channels; ++d) {
                            trip.emplace_back(row, (static_cast<ag::Index>(t) * channels + d) * n + sy * w_p + sx, inv);
                        }
                    }
            }
    auto red = std::make_shared<ag::SpMat>(static_cast<ag::Index>(pairs) * n, static_cast<ag::Index>(total));
    red->setFromTriplets(trip.begin(), trip.end());  // duplicates (replicated borders) are summed
    red->makeCompressed();
    ops->reduce = std::move(red);
    return *cache.emplace(key, std::move(ops)).first->second;
}

ag::Mat grids_to_mat(const std::vector<perc::FrameFeatureGrid>& grids) {
    require(grids.size() >= 2, ErrorCode::precondition, "lk_flow: need at least two grids");
    const auto& g0 = grids.front();
    ag::Mat m(static_cast<ag::Index>(grids.size()), g0.features.size());
    for (std::size_t f = 0; f < grids.size(); ++f) {
        const auto& g = grids[f];
        require(g.h_p == g0.h_p && g.w_p == g0.w_p && g.features.rows() == g0.features.rows() &&
                    g.features.cols() == g0.features.cols(),
                ErrorCode::dimension_mismatch, "lk_flow: grids differ in shape");
        m.row(static_cast<ag::Index>(f)) = Eigen::Map<const Eigen::RowVectorXd>(g.features.data(), g.features.size());
    }
    return m;
}

}  // namespace

double FlowField::mean_magnitude() const {
    double acc = 0.0;
    int n = 0;
    for (ag::Index i = 0; i < u.size(); ++i) {
        if (valid.data()[i] == 0.0) continue;
        acc += std::hypot(u.data()[i], v.data()[i]);
        ++n;
    }
    return n > 0 ? acc / n : 0.0;
}

void LkConfig::validate() const {
    require(window >= 1 && window % 2 == 1, ErrorCode::precondition, "lk_flow: window must be odd and >= 1");
    require(std::isfinite(det_eps) && det_eps >= 0.0, ErrorCode::precondition, "lk_flow: det_eps must be >= 0");
}

FlowVars lk_flow(const ag::Var& feats, int channels, int h_p, int w_p, const LkConfig& cfg) {
    cfg.validate();
    const int frames = static_cast<int>(feats.rows());
    require(frames >= 2, ErrorCode::precondition, "lk_flow: need at least two frames");
    const int n = h_p * w_p;
    require(feats.cols() == static_cast<ag::Index>(channels) * n, ErrorCode::dimension_mismatch,
            "lk_flow: feature width does not match grid");
    const LkOps& ops = lk_ops(frames, channels, h_p, w_p, cfg.window);
    const int pairs = frames - 1;
    const ag::Index rows = static_cast<ag::Index>(pairs) * channels * n;

    auto g = [&](const std::shared_ptr<const std::vector<ag::Index>>& idx) { return ag::gather(feats, idx, rows, 1); };
    ag::Var ix = ag::scale(ag::sub(g(ops.xp), g(ops.xm)), 0.5);
    ag::Var iy = ag::scale(ag::sub(g(ops.yp), g(ops.ym)), 0.5);
    ag::Var it = ag::sub(g(ops.next), g(ops.cur));

    auto reduce = [&](const ag::Var& a, const ag::Var& b) {
        return ag::reshape(ag::apply_sparse(ops.reduce, ag::mul(a, b)), pairs, n);
    };
    ag::Var sxx = reduce(ix, ix), syy = reduce(iy, iy), sxy = reduce(ix, iy);
    ag::Var sxt = reduce(ix, it), syt = reduce(iy, it);

    ag::Var det = ag::sub(ag::mul(sxx, syy), ag::mul(sxy, sxy));
    ag::Mat valid = (det.value().array().abs() >= cfg.det_eps).cast<double>().matrix();
    if (cfg.det_eps == 0.0) valid = (det.value().array() != 0.0).cast<double>().matrix();
    ag::Var vmask = ag::Var::constant(valid);
    ag::Var safe = ag::add(ag::mul(det, vmask), ag::Var::constant((1.0 - valid.array()).matrix()));

    // [sxx sxy; sxy syy] (u, v) = -(sxt, syt)
    ag::Var nu = ag::sub(ag::mul(syt, sxy), ag::mul(sxt, syy));
    ag::Var nv = ag::sub(ag::mul(sxt, sxy), ag::mul(syt, sxx));
    FlowVars out;
    out.u = ag::mul(ag::div(nu, safe), vmask);
    out.v = ag::mul(ag::div(nv, safe), vmask);
    out.valid = std::move(valid);
    out.h_p = h_p;
    out.w_p = w_p;
    return out;
}

FlowField to_field(const FlowVars& fv) {
    FlowField f;
    f.pairs = static_cast<int>(fv.u.rows());
    f.h_p = fv.h_p;
    f.w_p = fv.w_p;
    f.u = fv.u.value();
    f.v = fv.v.value();
    f.valid = fv.valid;
    return f;
}

FlowField lk_flow(const std::vector<perc::FrameFeatureGrid>& grids, const LkConfig& cfg) {
    ag::Mat m = grids_to_mat(grids);
    const auto& g0 = grids.front();
    return to_field(lk_flow(ag::Var::constant(std::move(m)), static_cast<int>(g0.features.rows()), g0.h_p, g0.w_p, cfg));
}

FlowField lk_flow_oracle(const std::vector<perc::FrameFeatureGrid>& grids, const LkConfig& cfg) {
    cfg.validate();
    grids_to_mat(grids);  // shape checks
    const int h = grids[0].h_p, w = grids[0].w_p, n = h * w;
    const int D = static_cast<int>(grids[0].features.rows());
    const int r = cfg.window / 2;
    const int samples = cfg.window * cfg.window * D;
    FlowField out;
    out.pairs = static_cast<int>(grids.size()) - 1;
    out.h_p = h;
    out.w_p = w;
    out.u = ag::Mat::Zero(out.pairs, n);
    out.v = ag::Mat::Zero(out.pairs, n);
    out.valid = ag::Mat::Zero(out.pairs, n);
    for (int t = 0; t < out.pairs; ++t) {
        const auto& f0 = grids[static_cast<std::size_t>(t)];
        const auto& f1 = grids[static_cast<std::size_t>(t) + 1];
        auto at = [&](const perc::FrameFeatureGrid& g, int y, int x, int d) {
            return g.at(clampi(y, 0, h - 1), clampi(x, 0, w - 1), d);
        };
        for (int y = 0; y < h; ++y) {
            for (int x = 0; x < w; ++x) {
                Eigen::MatrixXd A(samples, 2);
                Eigen::VectorXd b(samples);
                int k = 0;
                for (int dy = -r; dy <= r; ++dy) {
                    for (int dx = -r; dx <= r; ++dx) {
                        const int sy = clampi(y + dy, 0, h - 1), sx = clampi(x + dx, 0, w - 1);
                        for (int d = 0; d < D; ++d, ++k) {
                            A(k, 0) = 0.5 * (at(f0, sy, sx + 1, d) - at(f0, sy, sx - 1, d));
                            A(k, 1) = 0.5 * (at(f0, sy + 1, sx, d) - at(f0, sy - 1, sx, d));
                            b(k) = -(f1.at(sy, sx, d) - f0.at(sy, sx, d));
                        }
                    }
                }
                // Validity uses the determinant of the window-averaged normal matrix.
                const double m = static_cast<double>(cfg.window) * cfg.window;
                const double a00 = A.col(0).squaredNorm() / m, a11 = A.col(1).squaredNorm() / m;
                const double a01 = A.col(0).dot(A.col(1)) / m;
                const double det = a00 * a11 - a01 * a01;
                const bool ok = cfg.det_eps > 0.0 ? std::abs(det) >= cfg.det_eps : det != 0.0;
                if (!ok) continue;
                Eigen::Vector2d sol = A.colPivHouseholderQr().solve(b);
                out.u(t, y * w + x) = sol(0);
                out.v(t, y * w + x) = sol(1);
                out.valid(t, y * w + x) = 1.0;
            }
        }
    }
    return out;
}

FlowVars motion_field(const ag::Var& video, const VideoShape& shape, const LkConfig& cfg) {
    require(shape.frames >= 2, ErrorCode::precondition, "motion_field: need at least two frames");
    ag::Var feats = perc::video_features(video, shape);
    const auto& fo = perc::feature_operator(shape);
    return lk_flow(feats, perc::kFeatChannels, fo.h_p, fo.w_p, cfg);
}

FlowField motion_field(const VideoTensor& video, const LkConfig& cfg) {
    return to_field(motion_field(ag::Var::constant(video.data), video.shape, cfg));
}

void save_flow(const std::filesystem::path& path, const FlowField& f) {
    std::ofstream os(path, std::ios::binary);
    require(static_cast<bool>(os), ErrorCode::not_found, "cannot open " + path.string() + " for writing");
    binio::put_magic(os, "TDFL");
    binio::put_u16(os, kFlowVersion);
    binio::put_u16(os, static_cast<std::uint16_t>(f.pairs));
    binio::put_u16(os, static_cast<std::uint16_t>(f.h_p));
    binio::put_u16(os, static_cast<std::uint16_t>(f.w_p));
    binio::put_u16(os, 0);
    const ag::Index n = static_cast<ag::Index>(f.pairs) * f.cells();
    for (ag::Index i = 0; i < n; ++i) {
        binio::put_f32(os, static_cast<float>(f.u.data()[i]));
        binio::put_f32(os, static_cast<float>(f.v.data()[i]));
    }
    std::vector<unsigned char> bits(static_cast<std::size_t>((n + 7) / 8), 0);
    for (ag::Index i = 0; i < n; ++i)
        if (f.valid.data()[i] != 0.0) bits[static_cast<std::size_t>(i / 8)] |= static_cast<unsigned char>(1u << (i % 8));
    binio::put_bytes(os, bits.data(), bits.size());
}

FlowField load_flow(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    require(static_cast<bool>(is), ErrorCode::not_found, "flow file not found: " + path.string());
    binio::expect_magic(is, "TDFL");
    const auto version = binio::get_u16(is, "version");
    require(version == kFlowVersion, ErrorCode::format, "unsupported flow version " + std::to_string(version));
    FlowField f;
    f.pairs = binio::get_u16(is, "pairs");
    f.h_p = binio::get_u16(is, "h_p");
    f.w_p = binio::get_u16(is, "w_p");
    binio::get_u16(is, "pad");
    const ag::Index n = static_cast<ag::Index>(f.pairs) * f.cells();
    f.u.resize(f.pairs, f.cells());
    f.v.resize(f.pairs, f.cells());
    f.valid = ag::Mat::Zero(f.pairs, f.cells());
    for (ag::Index i = 0; i < n; ++i) {
        f.u.data()[i] = binio::get_f32(is, "flow");
        f.v.data()[i] = binio::get_f32(is, "flow");
    }
    std::vector<unsigned char> bits(static_cast<std::size_t>((n + 7) / 8));
    binio::get_bytes(is, bits.data(), bits.size(), "validity mask");
    for (ag::Index i = 0; i < n; ++i) f.valid.data()[i] = (bits[static_cast<std::size_t>(i / 8)] >> (i % 8)) & 1u;
    return f;
}

}  // namespace tokendial::flow
