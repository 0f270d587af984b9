#include "tokendial/video.hpp"

#include <cmath>

namespace tokendial {

std::string VideoShape::str() const {
    return std::to_string(channels) + "x" + std::to_string(frames) + "x" + std::to_string(height) + "x" +
           std::to_string(width);
}

VideoTensor::VideoTensor(VideoShape s, int fps_) : shape(s), fps(fps_), data(ag::Mat::Zero(s.rows(), s.cols())) {}

bool VideoTensor::finite() const { return data.allFinite(); }

void VideoTensor::validate() const {
    require(shape.channels == 3, ErrorCode::dimension_mismatch, "video must have 3 channels");
    require(shape.frames > 0 && shape.height > 0 && shape.width > 0, ErrorCode::dimension_mismatch,
            "video dims must be positive");
    require(data.rows() == shape.rows() && data.cols() == shape.cols(), ErrorCode::dimension_mismatch,
            "video data does not match its shape " + shape.str());
    require(finite(), ErrorCode::precondition, "video contains non-finite values");
    require(data.minCoeff() >= 0.0 && data.maxCoeff() <= 1.0, ErrorCode::precondition,
            "video values outside [0,1]");
}

VideoTensor VideoTensor::clamped() const {
    VideoTensor out = *this;
    out.data = data.cwiseMax(0.0).cwiseMin(1.0);
    return out;
}

VideoTensor VideoTensor::gaussian_noise(VideoShape s, std::uint64_t seed) {
    VideoTensor v(s);
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> n(0.0, 1.0);
    for (ag::Index i = 0; i < v.data.size(); ++i) v.data.data()[i] = n(rng);
    return v;
}

VideoTensor VideoTensor::from_mat(VideoShape s, ag::Mat m) {
    require(m.rows() == s.rows() && m.cols() == s.cols(), ErrorCode::dimension_mismatch,
            "matrix does not match video shape " + s.str());
    VideoTensor v;
    v.shape = s;
    v.data = std::move(m);
    return v;
}

ag::Mat frame_of(const VideoTensor& v, int f) {
    ag::Mat out(v.shape.channels, v.shape.cols());
    for (int c = 0; c < v.shape.channels; ++c) out.row(c) = v.data.row(c * v.shape.frames + f);
    return out;
}

}  // namespace tokendial
