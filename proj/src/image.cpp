#include "tokendial/image.hpp"

#include "tokendial/error.hpp"

#include <zlib.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <map>

namespace tokendial::img {

namespace {

void put_be32(std::string& s, std::uint32_t v) {
    s.push_back(static_cast<char>((v >> 24) & 0xff));
    s.push_back(static_cast<char>((v >> 16) & 0xff));
    s.push_back(static_cast<char>((v >> 8) & 0xff));
    s.push_back(static_cast<char>(v & 0xff));
}

void put_be16(std::string& s, std::uint16_t v) {
    s.push_back(static_cast<char>((v >> 8) & 0xff));
    s.push_back(static_cast<char>(v & 0xff));
}

void chunk(std::string& out, const char* type, const std::string& data) {
    put_be32(out, static_cast<std::uint32_t>(data.size()));
    std::string body(type, 4);
    body += data;
    out += body;
    put_be32(out, static_cast<std::uint32_t>(
                      crc32(0L, reinterpret_cast<const Bytef*>(body.data()), static_cast<uInt>(body.size()))));
}

std::string ihdr(const Image& im) {
    std::string d;
    put_be32(d, static_cast<std::uint32_t>(im.width));
    put_be32(d, static_cast<std::uint32_t>(im.height));
    d.push_back(8);  // bit depth
    d.push_back(2);  // truecolour
    d.push_back(0);
    d.push_back(0);
    d.push_back(0);
    return d;
}

std::string compressed_scanlines(const Image& im) {
    std::string raw;
    raw.reserve(static_cast<std::size_t>(im.height) * (1 + 3 * static_cast<std::size_t>(im.width)));
    for (int y = 0; y < im.height; ++y) {
        raw.push_back(0);
        raw.append(reinterpret_cast<const char*>(im.rgb.data()) + static_cast<std::size_t>(y) * 3 * im.width,
                   3 * static_cast<std::size_t>(im.width));
    }
    uLongf len = compressBound(static_cast<uLong>(raw.size()));
    std::string out(len, '\0');
    const int rc = compress2(reinterpret_cast<Bytef*>(out.data()), &len, reinterpret_cast<const Bytef*>(raw.data()),
                             static_cast<uLong>(raw.size()), 9);
    require(rc == Z_OK, ErrorCode::unavailable, "png: zlib compression failed");
    out.resize(len);
    return out;
}

const std::string kSignature("\x89PNG\r\n\x1a\n", 8);

// 3x5 glyphs, one 3-bit row per entry, MSB = left column.
const std::map<char, std::array<std::uint8_t, 5>>& font() {
    static const std::map<char, std::array<std::uint8_t, 5>> f{
        {'0', {7, 5, 5, 5, 7}}, {'1', {2, 6, 2, 2, 7}}, {'2', {7, 1, 7, 4, 7}}, {'3', {7, 1, 7, 1, 7}},
        {'4', {5, 5, 7, 1, 1}}, {'5', {7, 4, 7, 1, 7}}, {'6', {7, 4, 7, 5, 7}}, {'7', {7, 1, 1, 1, 1}},
        {'8', {7, 5, 7, 5, 7}}, {'9', {7, 5, 7, 1, 7}}, {'.', {0, 0, 0, 0, 2}}, {'-', {0, 0, 7, 0, 0}},
        {'+', {0, 2, 7, 2, 0}}, {':', {0, 2, 0, 2, 0}}, {'_', {0, 0, 0, 0, 7}}, {'/', {1, 1, 2, 4, 4}},
        {'(', {2, 4, 4, 4, 2}}, {')', {2, 1, 1, 1, 2}}, {' ', {0, 0, 0, 0, 0}},
        {'A', {2, 5, 7, 5, 5}}, {'B', {6, 5, 6, 5, 6}}, {'C', {7, 4, 4, 4, 7}}, {'D', {6, 5, 5, 5, 6}},
        {'E', {7, 4, 6, 4, 7}}, {'F', {7, 4, 6, 4, 4}}, {'G', {7, 4, 5, 5, 7}}, {'H', {5, 5, 7, 5, 5}},
        {'I', {7, 2, 2, 2, 7}}, {'J', {1, 1, 1, 5, 7}}, {'K', {5, 5, 6, 5, 5}}, {'L', {4, 4, 4, 4, 7}},
        {'M', {5, 7, 7, 5, 5}}, {'N', {6, 5, 5, 5, 5}}, {'O', {7, 5, 5, 5, 7}}, {'P', {7, 5, 7, 4, 4}},
        {'Q', {7, 5, 5, 7, 1}}, {'R', {7, 5, 6, 5, 5}}, {'S', {7, 4, 7, 1, 7}}, {'T', {7, 2, 2, 2, 2}},
        {'U', {5, 5, 5, 5, 7}}, {'V', {5, 5, 5, 5, 2}}, {'W', {5, 5, 7, 7, 5}}, {'X', {5, 5, 2, 5, 5}},
        {'Y', {5, 5, 2, 2, 2}}, {'Z', {7, 1, 2, 4, 7}},
    };
    return f;
}

std::string format_tick(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.3g", v);
    return buf;
}

}  // namespace

Image::Image(int w, int h, Rgb fill) : width(w), height(h), rgb(static_cast<std::size_t>(w) * h * 3) {
    require(w > 0 && h > 0, ErrorCode::precondition, "image: dimensions must be positive");
    for (std::size_t i = 0; i < rgb.size(); i += 3) {
        rgb[i] = fill[0];
        rgb[i + 1] = fill[1];
        rgb[i + 2] = fill[2];
    }
}

void Image::set(int x, int y, Rgb c) {
    if (x < 0 || y < 0 || x >= width || y >= height) return;
    const std::size_t i = (static_cast<std::size_t>(y) * width + x) * 3;
    rgb[i] = c[0];
    rgb[i + 1] = c[1];
    rgb[i + 2] = c[2];
}

Rgb Image::get(int x, int y) const {
    const std::size_t i = (static_cast<std::size_t>(y) * width + x) * 3;
    return {rgb[i], rgb[i + 1], rgb[i + 2]};
}

std::string encode_png(const Image& im) {
    std::string out = kSignature;
    chunk(out, "IHDR", ihdr(im));
    chunk(out, "IDAT", compressed_scanlines(im));
    chunk(out, "IEND", "");
    return out;
}

std::string encode_apng(const std::vector<Image>& frames, int fps) {
    require(!frames.empty(), ErrorCode::precondition, "apng: no frames");
    require(fps > 0, ErrorCode::precondition, "apng: fps must be positive");
    const Image& first = frames.front();
    std::string out = kSignature;
    chunk(out, "IHDR", ihdr(first));
    std::string actl;
    put_be32(actl, static_cast<std::uint32_t>(frames.size()));
    put_be32(actl, 0);  // loop forever
    chunk(out, "acTL", actl);
    std::uint32_t seq = 0;
    for (std::size_t i = 0; i < frames.size(); ++i) {
        const Image& f = frames[i];
        require(f.width == first.width && f.height == first.height, ErrorCode::dimension_mismatch,
                "apng: frame size mismatch");
        std::string fctl;
        put_be32(fctl, seq++);
        put_be32(fctl, static_cast<std::uint32_t>(f.width));
        put_be32(fctl, static_cast<std::uint32_t>(f.height));
        put_be32(fctl, 0);
        put_be32(fctl, 0);
        put_be16(fctl, 1);
        put_be16(fctl, static_cast<std::uint16_t>(fps));
        fctl.push_back(0);  // dispose none
        fctl.push_back(0);  // blend source
        chunk(out, "fcTL", fctl);
        const std::string data = compressed_scanlines(f);
        if (i == 0) {
            chunk(out, "IDAT", data);
        } else {
            std::string fdat;
            put_be32(fdat, seq++);
            fdat += data;
            chunk(out, "fdAT", fdat);
        }
    }
    chunk(out, "IEND", "");
    return out;
}

void write_file(const std::filesystem::path& path, const std::string& bytes) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream os(path, std::ios::binary);
    require(static_cast<bool>(os), ErrorCode::not_found, "cannot open " + path.string() + " for writing");
    os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    require(static_cast<bool>(os), ErrorCode::unavailable, "failed writing " + path.string());
}

Image frame_image(const VideoTensor& v, int frame, int scale) {
    require(frame >= 0 && frame < v.shape.frames, ErrorCode::precondition, "frame index out of range");
    require(v.shape.channels == 3, ErrorCode::dimension_mismatch, "frame_image expects 3 channels");
    require(scale >= 1, ErrorCode::precondition, "frame_image: scale must be >= 1");
    Image im(v.shape.width * scale, v.shape.height * scale);
    for (int y = 0; y < im.height; ++y) {
        for (int x = 0; x < im.width; ++x) {
            Rgb c;
            for (int ch = 0; ch < 3; ++ch) {
                const double val = std::clamp(v.at(ch, frame, y / scale, x / scale), 0.0, 1.0);
                c[static_cast<std::size_t>(ch)] = static_cast<std::uint8_t>(std::lround(val * 255.0));
            }
            im.set(x, y, c);
        }
    }
    return im;
}

void draw_line(Image& im, int x0, int y0, int x1, int y1, Rgb c) {
    const int dx = std::abs(x1 - x0), sx = x0 < x1 ? 1 : -1;
    const int dy = -std::abs(y1 - y0), sy = y0 < y1 ? 1 : -1;
    int err = dx + dy;
    while (true) {
        im.set(x0, y0, c);
        if (x0 == x1 && y0 == y1) break;
        const int e2 = 2 * err;
        if (e2 >= dy) {
            err += dy;
            x0 += sx;
        }
        if (e2 <= dx) {
            err += dx;
            y0 += sy;
        }
    }
}

void fill_rect(Image& im, int x0, int y0, int x1, int y1, Rgb c) {
    for (int y = std::min(y0, y1); y <= std::max(y0, y1); ++y)
        for (int x = std::min(x0, x1); x <= std::max(x0, x1); ++x) im.set(x, y, c);
}

void draw_text(Image& im, int x, int y, const std::string& text, Rgb c, int scale) {
    int cx = x;
    for (char ch : text) {
        const char up = static_cast<char>(std::toupper(static_cast<unsigned char>(ch)));
        auto it = font().find(up);
        if (it != font().end()) {
            for (int r = 0; r < 5; ++r)
                for (int col = 0; col < 3; ++col)
                    if ((it->second[static_cast<std::size_t>(r)] >> (2 - col)) & 1)
                        fill_rect(im, cx + col * scale, y + r * scale, cx + col * scale + scale - 1,
                                  y + r * scale + scale - 1, c);
        }
        cx += 4 * scale;
    }
}

Image line_plot(const std::vector<Series>& series, int width, int height) {
    Image im(width, height, {255, 255, 255});
    const int left = 44, right = width - 12, top = 12, bottom = height - 28;
    double xmin = std::numeric_limits<double>::infinity(), xmax = -xmin, ymin = xmin, ymax = -xmin;
    for (const auto& s : series) {
        for (std::size_t i = 0; i < s.x.size() && i < s.y.size(); ++i) {
            if (!std::isfinite(s.x[i]) || !std::isfinite(s.y[i])) continue;
            xmin = std::min(xmin, s.x[i]);
            xmax = std::max(xmax, s.x[i]);
            ymin = std::min(ymin, s.y[i]);
            ymax = std::max(ymax, s.y[i]);
        }
    }
    if (!std::isfinite(xmin)) {
        xmin = 0.0;
        xmax = 1.0;
        ymin = 0.0;
        ymax = 1.0;
    }
    if (xmax - xmin < 1e-12) xmax = xmin + 1.0;
    if (ymax - ymin < 1e-12) {
        ymin -= 0.5;
        ymax += 0.5;
    }
    const double pad = 0.05 * (ymax - ymin);
    ymin -= pad;
    ymax += pad;
    auto px = [&](double x) { return left + static_cast<int>(std::lround((x - xmin) / (xmax - xmin) * (right - left))); };
    auto py = [&](double y) { return bottom - static_cast<int>(std::lround((y - ymin) / (ymax - ymin) * (bottom - top))); };
    const Rgb axis{60, 60, 60}, grid{225, 225, 225};
    for (int k = 0; k <= 4; ++k) {
        const double yv = ymin + (ymax - ymin) * k / 4.0;
        const double xv = xmin + (xmax - xmin) * k / 4.0;
        draw_line(im, left, py(yv), right, py(yv), grid);
        draw_line(im, px(xv), top, px(xv), bottom, grid);
        draw_text(im, 2, py(yv) - 2, format_tick(yv), axis);
        draw_text(im, px(xv) - 6, bottom + 6, format_tick(xv), axis);
    }
    draw_line(im, left, top, left, bottom, axis);
    draw_line(im, left, bottom, right, bottom, axis);
    int legend_y = top + 4;
    for (const auto& s : series) {
        for (std::size_t i = 0; i + 1 < s.x.size() && i + 1 < s.y.size(); ++i) {
            draw_line(im, px(s.x[i]), py(s.y[i]), px(s.x[i + 1]), py(s.y[i + 1]), s.color);
        }
        for (std::size_t i = 0; i < s.x.size() && i < s.y.size(); ++i) {
            fill_rect(im, px(s.x[i]) - 2, py(s.y[i]) - 2, px(s.x[i]) + 2, py(s.y[i]) + 2, s.color);
        }
        fill_rect(im, right - 90, legend_y, right - 84, legend_y + 5, s.color);
        draw_text(im, right - 80, legend_y, s.label, axis);
        legend_y += 10;
    }
    return im;
}

Rgb flow_color(double u, double v, double max_mag) {
    const double mag = std::hypot(u, v);
    const double sat = max_mag > 0.0 ? std::clamp(mag / max_mag, 0.0, 1.0) : 0.0;
    double hue = std::atan2(-v, -u) / M_PI;  // [-1, 1]
    hue = (hue + 1.0) * 3.0;                 // [0, 6)
    const int sector = static_cast<int>(std::floor(hue)) % 6;
    const double f = hue - std::floor(hue);
    const double p = 1.0 - sat, q = 1.0 - sat * f, t = 1.0 - sat * (1.0 - f);
    double r = 1, g = 1, b = 1;
    switch (sector) {
        case 0: r = 1; g = t; b = p; break;
        case 1: r = q; g = 1; b = p; break;
        case 2: r = p; g = 1; b = t; break;
        case 3: r = p; g = q; b = 1; break;
        case 4: r = t; g = p; b = 1; break;
        default: r = 1; g = p; b = q; break;
    }
    auto to8 = [](double x) { return static_cast<std::uint8_t>(std::lround(std::clamp(x, 0.0, 1.0) * 255.0)); };
    return {to8(r), to8(g), to8(b)};
}

}  // namespace tokendial::img
