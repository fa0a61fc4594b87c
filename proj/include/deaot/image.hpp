#pragma once

// RGB frames, object-index masks, and their binary PPM/PGM encodings.

#include <cctype>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include "deaot/errors.hpp"

namespace deaot {

struct Image {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::uint8_t> rgb;  // interleaved, row-major

  Image() = default;
  Image(std::size_t h, std::size_t w) : height(h), width(w), rgb(h * w * 3, 0) {}

  std::uint8_t* pixel(std::size_t y, std::size_t x) { return rgb.data() + (y * width + x) * 3; }
  const std::uint8_t* pixel(std::size_t y, std::size_t x) const { return rgb.data() + (y * width + x) * 3; }
  bool operator==(const Image&) const = default;
};

// Per-pixel object index; 0 is background.
struct MaskMap {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::uint8_t> values;

  MaskMap() = default;
  MaskMap(std::size_t h, std::size_t w, std::uint8_t fill = 0) : height(h), width(w), values(h * w, fill) {}

  std::uint8_t at(std::size_t y, std::size_t x) const { return values[y * width + x]; }
  std::uint8_t& at(std::size_t y, std::size_t x) { return values[y * width + x]; }
  std::size_t size() const { return values.size(); }
  std::uint8_t max_label() const {
    std::uint8_t top = 0;
    for (auto v : values) top = v > top ? v : top;
    return top;
  }
  std::size_t count(std::uint8_t label) const {
    std::size_t n = 0;
    for (auto v : values) n += v == label;
    return n;
  }
  bool operator==(const MaskMap&) const = default;
};

namespace detail {

inline std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file(const std::filesystem::path& path, const std::string& header,
                       const std::vector<std::uint8_t>& payload) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(header.data(), static_cast<std::streamsize>(header.size()));
  out.write(reinterpret_cast<const char*>(payload.data()), static_cast<std::streamsize>(payload.size()));
  if (!out) throw IoError("short write on " + path.string());
}

struct NetpbmHeader {
  std::string magic;
  std::size_t width = 0, height = 0, maxval = 0;
  std::size_t offset = 0;
};

inline NetpbmHeader parse_netpbm(const std::vector<std::uint8_t>& bytes, const std::string& where) {
  NetpbmHeader h;
  std::size_t pos = 0;
  auto skip_space = [&] {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(bytes[pos])) {
        ++pos;
      } else {
        break;
      }
    }
  };
  auto token = [&] {
    skip_space();
    std::string t;
    while (pos < bytes.size() && !std::isspace(bytes[pos]) && bytes[pos] != '#') t.push_back(static_cast<char>(bytes[pos++]));
    if (t.empty()) throw IoError("truncated netpbm header in " + where);
    return t;
  };
  auto number = [&] {
    const auto t = token();
    for (char ch : t)
      if (!std::isdigit(static_cast<unsigned char>(ch))) throw IoError("bad netpbm header field in " + where);
    return static_cast<std::size_t>(std::stoull(t));
  };
  h.magic = token();
  h.width = number();
  h.height = number();
  h.maxval = number();
  if (pos >= bytes.size() || !std::isspace(bytes[pos])) throw IoError("bad netpbm header in " + where);
  h.offset = pos + 1;
  if (h.maxval != 255) throw IoError("only maxval 255 is supported (" + where + ")");
  return h;
}

}  // namespace detail

inline void write_ppm(const std::filesystem::path& path, const Image& image) {
  detail::write_file(path, "P6\n" + std::to_string(image.width) + " " + std::to_string(image.height) + "\n255\n",
                     image.rgb);
}

inline Image read_ppm(const std::filesystem::path& path) {
  const auto bytes = detail::read_file(path);
  const auto h = detail::parse_netpbm(bytes, path.string());
  if (h.magic != "P6") throw IoError(path.string() + " is not a binary PPM (P6)");
  Image image(h.height, h.width);
  if (bytes.size() < h.offset + image.rgb.size()) throw IoError("truncated pixel data in " + path.string());
  std::copy_n(bytes.begin() + static_cast<std::ptrdiff_t>(h.offset), image.rgb.size(), image.rgb.begin());
  return image;
}

inline void write_pgm(const std::filesystem::path& path, const MaskMap& mask) {
  detail::write_file(path, "P5\n" + std::to_string(mask.width) + " " + std::to_string(mask.height) + "\n255\n",
                     mask.values);
}

inline MaskMap read_pgm(const std::filesystem::path& path) {
  const auto bytes = detail::read_file(path);
  const auto h = detail::parse_netpbm(bytes, path.string());
  if (h.magic != "P5") throw IoError(path.string() + " is not a binary PGM (P5)");
  MaskMap mask(h.height, h.width);
  if (bytes.size() < h.offset + mask.values.size()) throw IoError("truncated pixel data in " + path.string());
  std::copy_n(bytes.begin() + static_cast<std::ptrdiff_t>(h.offset), mask.values.size(), mask.values.begin());
  return mask;
}

// Mask tinted over the frame; each object gets a fixed palette colour.
inline Image overlay(const Image& frame, const MaskMap& mask, double alpha = 0.5) {
  static constexpr std::uint8_t kPalette[][3] = {{0, 0, 0},       {230, 25, 75},  {60, 180, 75},  {255, 225, 25},
                                                 {0, 130, 200},   {245, 130, 48}, {145, 30, 180}, {70, 240, 240},
                                                 {240, 50, 230},  {210, 245, 60}, {250, 190, 212}};
  Image out = frame;
  for (std::size_t y = 0; y < frame.height; ++y)
    for (std::size_t x = 0; x < frame.width; ++x) {
      const auto label = mask.at(y, x);
      if (label == 0) continue;
      const auto* colour = kPalette[1 + (label - 1) % 10];
      auto* px = out.pixel(y, x);
      for (int ch = 0; ch < 3; ++ch)
        px[ch] = static_cast<std::uint8_t>((1.0 - alpha) * px[ch] + alpha * colour[ch] + 0.5);
    }
  return out;
}

}  // namespace deaot
