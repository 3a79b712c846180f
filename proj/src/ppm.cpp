#include "v2flow/ppm.hpp"

#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>

#include "v2flow/errors.hpp"

namespace v2flow {

std::vector<uint8_t> read_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open file: " + path);
    std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    if (f.bad()) throw IoError("read failed: " + path);
    return bytes;
}

void write_file_atomic(const std::string& path, const uint8_t* data, size_t n) {
    const std::string tmp = path + ".tmp";
    {
        std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
        if (!f) throw IoError("cannot open file for writing: " + tmp);
        f.write(reinterpret_cast<const char*>(data), static_cast<std::streamsize>(n));
        if (!f) {
            f.close();
            std::remove(tmp.c_str());
            throw IoError("write failed: " + tmp);
        }
    }
    if (std::rename(tmp.c_str(), path.c_str()) != 0) {
        std::remove(tmp.c_str());
        throw IoError("rename failed: " + path);
    }
}

std::vector<uint8_t> encode_ppm(const Image& img) {
    if (img.channels != 3) throw ShapeError("ppm: only 3-channel images are supported");
    char header[64];
    const int hn = std::snprintf(header, sizeof(header), "P6\n%d %d\n255\n", img.width, img.height);
    std::vector<uint8_t> out(header, header + hn);
    out.reserve(out.size() + img.pixels.size());
    for (float v : img.pixels) {
        const long q = std::lround(static_cast<double>(v) * 255.0);
        out.push_back(static_cast<uint8_t>(std::min(255L, std::max(0L, q))));
    }
    return out;
}

namespace {

// Skips PPM whitespace and '#' comments; returns the next token start.
size_t skip_space(const std::vector<uint8_t>& b, size_t pos) {
    while (pos < b.size()) {
        const uint8_t c = b[pos];
        if (c == '#') {
            while (pos < b.size() && b[pos] != '\n') ++pos;
        } else if (c == ' ' || c == '\t' || c == '\r' || c == '\n' || c == '\f' || c == '\v') {
            ++pos;
        } else {
            break;
        }
    }
    return pos;
}

int parse_int(const std::vector<uint8_t>& b, size_t& pos, const char* what) {
    pos = skip_space(b, pos);
    if (pos >= b.size() || b[pos] < '0' || b[pos] > '9') {
        throw ParseError(std::string("ppm: expected ") + what, static_cast<long>(pos));
    }
    long v = 0;
    while (pos < b.size() && b[pos] >= '0' && b[pos] <= '9') {
        v = v * 10 + (b[pos] - '0');
        if (v > 1 << 28) throw ParseError(std::string("ppm: ") + what + " out of range", static_cast<long>(pos));
        ++pos;
    }
    return static_cast<int>(v);
}

}  // namespace

Image decode_ppm(const std::vector<uint8_t>& bytes) {
    if (bytes.size() < 2 || bytes[0] != 'P' || bytes[1] != '6') {
        throw ParseError("ppm: missing P6 magic", 0);
    }
    size_t pos = 2;
    const int w = parse_int(bytes, pos, "width");
    const int h = parse_int(bytes, pos, "height");
    const int maxval = parse_int(bytes, pos, "maxval");
    if (w < 1 || h < 1) throw ParseError("ppm: non-positive dimensions", static_cast<long>(pos));
    if (maxval != 255) throw ParseError("ppm: unsupported maxval (must be 255)", static_cast<long>(pos));
    if (pos >= bytes.size()) throw ParseError("ppm: missing pixel data", static_cast<long>(pos));
    const uint8_t sep = bytes[pos];
    if (sep != ' ' && sep != '\t' && sep != '\r' && sep != '\n') {
        throw ParseError("ppm: expected single whitespace before pixel data", static_cast<long>(pos));
    }
    ++pos;
    const size_t need = static_cast<size_t>(w) * h * 3;
    if (bytes.size() - pos < need) {
        throw ParseError("ppm: truncated pixel data", static_cast<long>(bytes.size()));
    }
    if (bytes.size() - pos > need) {
        throw ParseError("ppm: trailing bytes after pixel data", static_cast<long>(pos + need));
    }
    Image img(h, w, 3);
    for (size_t i = 0; i < need; ++i) img.pixels[i] = static_cast<float>(bytes[pos + i]) / 255.f;
    return img;
}

Image read_ppm(const std::string& path) { return decode_ppm(read_file(path)); }

void write_ppm(const std::string& path, const Image& img) {
    const auto bytes = encode_ppm(img);
    write_file_atomic(path, bytes.data(), bytes.size());
}

}  // namespace v2flow
