#include "sqs/render/image_io.hpp"

#include "sqs/core/error.hpp"
#include "sqs/io/binary.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstring>
#include <sstream>
#include <string>

namespace sqs::render {

namespace {

// Reads whitespace-separated header tokens; returns the offset after the
// single whitespace byte that ends the last token.
std::vector<std::string> header_tokens(const std::vector<char>& bytes, std::size_t count, std::size_t& offset) {
    std::vector<std::string> tokens;
    std::size_t i = 0;
    while (tokens.size() < count) {
        while (i < bytes.size() && std::isspace(static_cast<unsigned char>(bytes[i]))) ++i;
        std::string tok;
        while (i < bytes.size() && !std::isspace(static_cast<unsigned char>(bytes[i]))) tok += bytes[i++];
        if (tok.empty()) throw FormatError("image header truncated");
        tokens.push_back(tok);
    }
    if (i >= bytes.size()) throw FormatError("image header not terminated");
    offset = i + 1;
    return tokens;
}

std::size_t parse_dim(const std::string& s) {
    try {
        const long v = std::stol(s);
        if (v <= 0) throw FormatError("image dimension must be positive");
        return static_cast<std::size_t>(v);
    } catch (const std::logic_error&) {
        throw FormatError("bad image dimension '" + s + "'");
    }
}

} // namespace

std::vector<char> encode_ppm(const ad::Array& rgb) {
    if (rgb.rank() != 3 || rgb.dim(2) != 3) throw ShapeError("PPM expects [H, W, 3]");
    const std::size_t h = rgb.dim(0), w = rgb.dim(1);
    const std::string header = "P6\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
    std::vector<char> out(header.begin(), header.end());
    out.reserve(out.size() + rgb.size());
    for (double v : rgb.values()) {
        const double c = std::clamp(v, 0.0, 1.0);
        out.push_back(static_cast<char>(static_cast<unsigned char>(std::lround(c * 255.0))));
    }
    return out;
}

ad::Array decode_ppm(const std::vector<char>& bytes) {
    std::size_t offset = 0;
    const auto tok = header_tokens(bytes, 4, offset);
    if (tok[0] != "P6") throw FormatError("not a binary PPM (magic '" + tok[0] + "')");
    if (tok[3] != "255") throw FormatError("only 8-bit PPM is supported");
    const std::size_t w = parse_dim(tok[1]), h = parse_dim(tok[2]);
    if (bytes.size() - offset != w * h * 3) throw FormatError("PPM pixel data has the wrong length");
    ad::Array rgb({h, w, 3});
    for (std::size_t i = 0; i < rgb.size(); ++i) {
        rgb[i] = static_cast<double>(static_cast<unsigned char>(bytes[offset + i])) / 255.0;
    }
    return rgb;
}

std::vector<char> encode_pfm(const ad::Array& depth) {
    if (depth.rank() != 2) throw ShapeError("PFM expects [H, W]");
    const std::size_t h = depth.dim(0), w = depth.dim(1);
    io::ByteWriter out;
    out.put_string("Pf\n" + std::to_string(w) + " " + std::to_string(h) + "\n-1.0\n");
    for (std::size_t row = h; row-- > 0;) {
        for (std::size_t x = 0; x < w; ++x) out.put<float>(static_cast<float>(depth(row, x)));
    }
    return out.bytes();
}

ad::Array decode_pfm(const std::vector<char>& bytes) {
    std::size_t offset = 0;
    const auto tok = header_tokens(bytes, 4, offset);
    if (tok[0] != "Pf") throw FormatError("not a greyscale PFM (magic '" + tok[0] + "')");
    if (tok[3].empty() || tok[3][0] != '-') throw FormatError("only little-endian PFM is supported");
    const std::size_t w = parse_dim(tok[1]), h = parse_dim(tok[2]);
    if (bytes.size() - offset != w * h * sizeof(float)) throw FormatError("PFM pixel data has the wrong length");
    ad::Array depth({h, w});
    std::size_t at = offset;
    for (std::size_t row = h; row-- > 0;) {
        for (std::size_t x = 0; x < w; ++x) {
            float f;
            std::memcpy(&f, bytes.data() + at, sizeof(float));
            at += sizeof(float);
            depth(row, x) = f;
        }
    }
    return depth;
}

void write_ppm(const std::filesystem::path& path, const ad::Array& rgb) { io::write_file(path, encode_ppm(rgb)); }
ad::Array read_ppm(const std::filesystem::path& path) { return decode_ppm(io::read_file(path)); }
void write_pfm(const std::filesystem::path& path, const ad::Array& depth) { io::write_file(path, encode_pfm(depth)); }
ad::Array read_pfm(const std::filesystem::path& path) { return decode_pfm(io::read_file(path)); }

} // namespace sqs::render
