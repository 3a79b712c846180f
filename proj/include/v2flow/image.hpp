#pragma once

#include <algorithm>
#include <vector>

#include "v2flow/errors.hpp"

namespace v2flow {

// H x W x C pixel grid, row-major, values in [0,1].
struct Image {
    int height = 0;
    int width = 0;
    int channels = 0;
    std::vector<float> pixels;

    Image() = default;
    Image(int h, int w, int c) : height(h), width(w), channels(c), pixels(static_cast<size_t>(h) * w * c, 0.f) {}

    float& at(int y, int x, int c) { return pixels[(static_cast<size_t>(y) * width + x) * channels + c]; }
    float at(int y, int x, int c) const { return pixels[(static_cast<size_t>(y) * width + x) * channels + c]; }

    size_t size() const { return pixels.size(); }

    void clamp01() {
        for (auto& v : pixels) v = std::min(1.f, std::max(0.f, v));
    }
};

inline void require_same_size(const Image& a, const Image& b, const char* op) {
    if (a.height != b.height || a.width != b.width || a.channels != b.channels) {
        throw ShapeError(std::string(op) + ": image dimensions differ");
    }
}

}  // namespace v2flow
