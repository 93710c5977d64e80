#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "preddiff/errors.hpp"

namespace preddiff {

// Dense H x W x C raster with values in [0,1], stored row-major with
// interleaved channels: data[(y*width + x)*channels + c].
struct Image {
    std::size_t height = 0;
    std::size_t width = 0;
    std::size_t channels = 0;
    std::vector<double> data;

    Image() = default;
    Image(std::size_t h, std::size_t w, std::size_t c, double fill = 0.0)
        : height(h), width(w), channels(c), data(h * w * c, fill) {}

    std::size_t size() const { return height * width * channels; }

    std::size_t index(std::size_t y, std::size_t x, std::size_t c) const {
        return (y * width + x) * channels + c;
    }

    double& at(std::size_t y, std::size_t x, std::size_t c) { return data[index(y, x, c)]; }
    double at(std::size_t y, std::size_t x, std::size_t c) const { return data[index(y, x, c)]; }

    void validate() const {
        if (height == 0 || width == 0) {
            throw ValidationError("image: empty spatial extent");
        }
        if (channels != 1 && channels != 3) {
            throw ValidationError("image: channels must be 1 or 3, got " + std::to_string(channels));
        }
        if (data.size() != size()) {
            throw ValidationError("image: data length " + std::to_string(data.size()) +
                                  " does not match " + std::to_string(height) + "x" +
                                  std::to_string(width) + "x" + std::to_string(channels));
        }
        for (double v : data) {
            if (!(v >= 0.0 && v <= 1.0)) {
                throw ValidationError("image: pixel value " + std::to_string(v) + " outside [0,1]");
            }
        }
    }
};

}  // namespace preddiff
