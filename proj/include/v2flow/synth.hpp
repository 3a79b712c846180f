#pragma once

#include <cstdint>
#include <vector>

#include "v2flow/image.hpp"

namespace v2flow {

// Synthetic shape corpus: disk, rectangle, gradient, stripe. Generation is a
// pure function of the spec; class ids cycle through the families.
struct SynthSpec {
    int image_size = 32;
    int count = 2000;
    uint64_t seed = 0;
};

inline constexpr int kNumShapeClasses = 4;

struct LabeledImage {
    Image image;
    int class_id = 0;
};

std::vector<LabeledImage> synth_dataset(const SynthSpec& spec);

// Single image for (class, index), identical to the corresponding corpus entry.
Image synth_image(int image_size, uint64_t seed, int64_t index);

}  // namespace v2flow
