#pragma once

#include "tokendial/autograd.hpp"
#include "tokendial/error.hpp"

#include <cstdint>
#include <random>
#include <string>

namespace tokendial {

struct VideoShape {
    int channels = 3;
    int frames = 8;
    int height = 32;
    int width = 32;

    std::size_t numel() const {
        return static_cast<std::size_t>(channels) * frames * height * width;
    }
    // Canonical matrix layout used everywhere: rows = (c, f), cols = (h, w).
    ag::Index rows() const { return static_cast<ag::Index>(channels) * frames; }
    ag::Index cols() const { return static_cast<ag::Index>(height) * width; }
    bool operator==(const VideoShape&) const = default;
    std::string str() const;
};

// Pixel video laid out C-order (C, F, H, W) inside a (C*F) x (H*W) matrix.
struct VideoTensor {
    VideoShape shape;
    int fps = 8;
    ag::Mat data;

    VideoTensor() = default;
    explicit VideoTensor(VideoShape s, int fps_ = 8);

    double at(int c, int f, int h, int w) const { return data(c * shape.frames + f, h * shape.width + w); }
    double& at(int c, int f, int h, int w) { return data(c * shape.frames + f, h * shape.width + w); }

    // Throws unless C=3, dims positive, entries finite and inside [0,1].
    void validate() const;
    bool finite() const;
    VideoTensor clamped() const;

    static VideoTensor gaussian_noise(VideoShape s, std::uint64_t seed);
    static VideoTensor from_mat(VideoShape s, ag::Mat m);
};

// Extract frame f (channels x (H*W)) from a canonical video matrix.
ag::Mat frame_of(const VideoTensor& v, int f);

}  // namespace tokendial
