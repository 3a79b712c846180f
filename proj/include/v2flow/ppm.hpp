#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "v2flow/image.hpp"

namespace v2flow {

// Binary PPM (P6, maxval 255). The encoder emits the canonical header
// "P6\n<w> <h>\n255\n"; the decoder accepts standard whitespace and comments
// and rejects any other maxval. Byte k maps to k/255.
std::vector<uint8_t> encode_ppm(const Image& img);
Image decode_ppm(const std::vector<uint8_t>& bytes);

Image read_ppm(const std::string& path);
void write_ppm(const std::string& path, const Image& img);  // write-to-temp, atomic rename

// Shared atomic file helpers.
std::vector<uint8_t> read_file(const std::string& path);
void write_file_atomic(const std::string& path, const uint8_t* data, size_t n);

}  // namespace v2flow
