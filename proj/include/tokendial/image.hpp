#pragma once

// 8-bit RGB raster, PNG / APNG encoding and a few drawing helpers for debug plots.

#include "tokendial/video.hpp"

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace tokendial::img {

using Rgb = std::array<std::uint8_t, 3>;

struct Image {
    int width = 0;
    int height = 0;
    std::vector<std::uint8_t> rgb;  // row-major, 3 bytes per pixel

    Image() = default;
    Image(int w, int h, Rgb fill = {0, 0, 0});
    void set(int x, int y, Rgb c);
    Rgb get(int x, int y) const;
};

std::string encode_png(const Image& im);
// Animated PNG; every frame must share the first frame's size.
std::string encode_apng(const std::vector<Image>& frames, int fps);
void write_file(const std::filesystem::path& path, const std::string& bytes);

// Frame f of a video, values clamped to [0,1], nearest-neighbour upscaled.
Image frame_image(const VideoTensor& v, int frame, int scale = 1);

void draw_line(Image& im, int x0, int y0, int x1, int y1, Rgb c);
void fill_rect(Image& im, int x0, int y0, int x1, int y1, Rgb c);
// Digits, '.', '-' and a handful of letters in a 3x5 bitmap font.
void draw_text(Image& im, int x, int y, const std::string& text, Rgb c, int scale = 1);

struct Series {
    std::string label;
    std::vector<double> x, y;
    Rgb color{0, 0, 0};
};

// Line chart with axes, tick labels and a colour legend.
Image line_plot(const std::vector<Series>& series, int width = 480, int height = 320);

// Colour-wheel encoding of a 2D vector field (hue = direction, saturation = magnitude / max_mag).
Rgb flow_color(double u, double v, double max_mag);

}  // namespace tokendial::img
