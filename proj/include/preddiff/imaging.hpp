#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <numeric>
#include <string>
#include <vector>

#include "preddiff/errors.hpp"
#include "preddiff/image.hpp"
#include "preddiff/network.hpp"    // SensitivityMap
#include "preddiff/relevance.hpp"  // RelevanceMap

namespace preddiff {

// 8-bit RGBA raster produced by the renderers. Fully transparent pixels
// always carry color (0,0,0) so identical maps produce identical bytes.
struct RenderedImage {
    std::size_t height = 0;
    std::size_t width = 0;
    std::vector<std::uint8_t> rgba;

    RenderedImage() = default;
    RenderedImage(std::size_t h, std::size_t w) : height(h), width(w), rgba(h * w * 4, 0) {}

    std::uint8_t* pixel(std::size_t y, std::size_t x) { return &rgba[(y * width + x) * 4]; }
    const std::uint8_t* pixel(std::size_t y, std::size_t x) const { return &rgba[(y * width + x) * 4]; }
};

// ---------------------------------------------------------------------------
// Netpbm I/O. P6 (color) is the baseline format; P5 covers single-channel
// images. Bytes map to [0,1] as v/255, and back as round(v*255), so a
// load/save cycle is byte-exact.
// ---------------------------------------------------------------------------

namespace detail {

inline int pnm_token(std::istream& in) {
    // Skips whitespace and '#' comments, then parses a non-negative integer.
    int c = in.get();
    while (c != EOF && (std::isspace(c) || c == '#')) {
        if (c == '#') {
            while (c != EOF && c != '\n') {
                c = in.get();
            }
        }
        c = in.get();
    }
    if (c == EOF || !std::isdigit(c)) {
        throw FormatError("PNM header: expected integer");
    }
    int value = 0;
    while (c != EOF && std::isdigit(c)) {
        value = value * 10 + (c - '0');
        if (value > 1 << 24) {
            throw FormatError("PNM header: implausible integer");
        }
        c = in.get();
    }
    return value;
}

}  // namespace detail

inline Image load_image(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw IoError("cannot open " + path);
    }
    char m0 = 0, m1 = 0;
    in.get(m0);
    in.get(m1);
    if (!in || m0 != 'P' || (m1 != '6' && m1 != '5')) {
        throw FormatError("not a P6/P5 PNM file: " + path);
    }
    const std::size_t channels = (m1 == '6') ? 3 : 1;
    const int width = detail::pnm_token(in);
    const int height = detail::pnm_token(in);
    const int maxval = detail::pnm_token(in);
    if (width <= 0 || height <= 0) {
        throw FormatError("PNM: empty raster in " + path);
    }
    if (maxval != 255) {
        throw FormatError("PNM: unsupported maxval " + std::to_string(maxval) + " (need 255) in " + path);
    }
    // Exactly one whitespace byte separates header and raster.
    Image img(static_cast<std::size_t>(height), static_cast<std::size_t>(width), channels);
    std::vector<unsigned char> raw(img.size());
    if (!in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()))) {
        throw FormatError("PNM: truncated raster in " + path);
    }
    for (std::size_t i = 0; i < raw.size(); ++i) {
        img.data[i] = static_cast<double>(raw[i]) / 255.0;
    }
    return img;
}

inline void save_ppm(const std::string& path, const Image& img) {
    if (img.channels != 1 && img.channels != 3) {
        throw ValidationError("save_ppm: channels must be 1 or 3");
    }
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw IoError("cannot write " + path);
    }
    out << (img.channels == 3 ? "P6" : "P5") << "\n" << img.width << " " << img.height << "\n255\n";
    std::vector<unsigned char> raw(img.size());
    for (std::size_t i = 0; i < raw.size(); ++i) {
        raw[i] = static_cast<unsigned char>(std::lround(std::clamp(img.data[i], 0.0, 1.0) * 255.0));
    }
    out.write(reinterpret_cast<const char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
    if (!out) {
        throw IoError("write failed: " + path);
    }
}

// Flattens RGBA over a black background into P6 (color * alpha).
inline void save_image(const std::string& path, const RenderedImage& rendered) {
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw IoError("cannot write " + path);
    }
    out << "P6\n" << rendered.width << " " << rendered.height << "\n255\n";
    std::vector<unsigned char> raw(rendered.height * rendered.width * 3);
    for (std::size_t i = 0; i < rendered.height * rendered.width; ++i) {
        const std::uint8_t* px = &rendered.rgba[i * 4];
        const double a = static_cast<double>(px[3]) / 255.0;
        for (std::size_t c = 0; c < 3; ++c) {
            raw[i * 3 + c] = static_cast<unsigned char>(std::lround(static_cast<double>(px[c]) * a));
        }
    }
    out.write(reinterpret_cast<const char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
    if (!out) {
        throw IoError("write failed: " + path);
    }
}

// ---------------------------------------------------------------------------
// Heatmap rendering: positive scores red, negative blue, near-zero
// transparent. Saturation at the q-quantile of |score| so a single outlier
// cannot wash out the rest of the map.
// ---------------------------------------------------------------------------

namespace detail {

inline double magnitude_quantile(const std::vector<double>& scores, double q) {
    std::vector<double> mags(scores.size());
    for (std::size_t i = 0; i < scores.size(); ++i) {
        mags[i] = std::abs(scores[i]);
    }
    std::sort(mags.begin(), mags.end());
    const auto n = static_cast<double>(mags.size());
    std::size_t idx = static_cast<std::size_t>(std::ceil(q * n));
    idx = idx > 0 ? idx - 1 : 0;
    idx = std::min(idx, mags.size() - 1);
    return mags[idx];
}

// BT.601 luma of the input image, per pixel in [0,1].
inline std::vector<double> grayscale(const Image& img) {
    std::vector<double> gray(img.height * img.width);
    for (std::size_t i = 0; i < gray.size(); ++i) {
        if (img.channels == 1) {
            gray[i] = img.data[i];
        } else {
            const double* px = &img.data[i * 3];
            gray[i] = 0.299 * px[0] + 0.587 * px[1] + 0.114 * px[2];
        }
    }
    return gray;
}

inline RenderedImage render_signed(std::size_t height, std::size_t width, const std::vector<double>& scores,
                                   double q, const Image* overlay) {
    if (!(q > 0.5 && q <= 1.0)) {
        throw ValidationError("render_heatmap: quantile q must lie in (0.5, 1]");
    }
    if (scores.size() != height * width) {
        throw ValidationError("render_heatmap: score array does not match dimensions");
    }
    if (overlay && (overlay->height != height || overlay->width != width)) {
        throw ValidationError("render_heatmap: overlay shape does not match the map");
    }
    RenderedImage out(height, width);
    const double m = magnitude_quantile(scores, q);
    std::vector<double> gray;
    if (overlay) {
        gray = grayscale(*overlay);
    }
    for (std::size_t i = 0; i < scores.size(); ++i) {
        const double s = scores[i];
        const double a = (m > 0.0) ? std::min(std::abs(s) / m, 1.0) : 0.0;
        const double red = s > 0.0 ? 255.0 : 0.0;
        const double blue = s < 0.0 ? 255.0 : 0.0;
        std::uint8_t* px = &out.rgba[i * 4];
        if (overlay) {
            const double g = gray[i] * 255.0;
            px[0] = static_cast<std::uint8_t>(std::lround(a * red + (1.0 - a) * g));
            px[1] = static_cast<std::uint8_t>(std::lround((1.0 - a) * g));
            px[2] = static_cast<std::uint8_t>(std::lround(a * blue + (1.0 - a) * g));
            px[3] = 255;
        } else {
            const auto alpha = static_cast<std::uint8_t>(std::lround(a * 255.0));
            if (alpha == 0) {
                px[0] = px[1] = px[2] = 0;  // deterministic bytes for transparent pixels
            } else {
                px[0] = static_cast<std::uint8_t>(red);
                px[1] = 0;
                px[2] = static_cast<std::uint8_t>(blue);
            }
            px[3] = alpha;
        }
    }
    return out;
}

}  // namespace detail

inline RenderedImage render_heatmap(const RelevanceMap& map, const Image* overlay = nullptr, double q = 0.99) {
    return detail::render_signed(map.height, map.width, map.scores, q, overlay);
}

inline RenderedImage render_heatmap(const SensitivityMap& map, const Image* overlay = nullptr, double q = 0.99) {
    return detail::render_signed(map.height, map.width, map.data, q, overlay);
}

// ---------------------------------------------------------------------------
// Top-p% boolean mask
// ---------------------------------------------------------------------------

struct BooleanMask {
    std::size_t height = 0;
    std::size_t width = 0;
    std::vector<std::uint8_t> mask;  // 0/1

    std::size_t count() const {
        return static_cast<std::size_t>(std::count(mask.begin(), mask.end(), std::uint8_t{1}));
    }
};

namespace detail {

inline BooleanMask top_percent(std::size_t height, std::size_t width, const std::vector<double>& scores,
                               double percent) {
    if (!(percent > 0.0 && percent <= 100.0)) {
        throw ValidationError("top_percent_mask: p must lie in (0, 100]");
    }
    const std::size_t n = height * width;
    const auto keep = static_cast<std::size_t>(std::ceil(percent / 100.0 * static_cast<double>(n)));
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    // Ties resolve to the earlier pixel in row-major order.
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        const double ma = std::abs(scores[a]);
        const double mb = std::abs(scores[b]);
        return ma != mb ? ma > mb : a < b;
    });
    BooleanMask out{height, width, std::vector<std::uint8_t>(n, 0)};
    for (std::size_t i = 0; i < keep; ++i) {
        out.mask[order[i]] = 1;
    }
    return out;
}

}  // namespace detail

// Marks the ceil(p% * pixel count) pixels of largest |score|.
inline BooleanMask top_percent_mask(const RelevanceMap& map, double percent) {
    return detail::top_percent(map.height, map.width, map.scores, percent);
}

inline BooleanMask top_percent_mask(const SensitivityMap& map, double percent) {
    return detail::top_percent(map.height, map.width, map.data, percent);
}

// White-on-black rendering of a mask, saved as a 1-channel image.
inline Image mask_to_image(const BooleanMask& mask) {
    Image img(mask.height, mask.width, 1);
    for (std::size_t i = 0; i < mask.mask.size(); ++i) {
        img.data[i] = mask.mask[i] ? 1.0 : 0.0;
    }
    return img;
}

}  // namespace preddiff
