#pragma once

// Moving-shapes sequences on a value-noise background, and the on-disk
// sequence directory (frames/NNNNN.ppm, masks/NNNNN.pgm, meta.txt).

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "deaot/id_mechanism.hpp"
#include "deaot/image.hpp"
#include "deaot/random.hpp"

namespace deaot {

enum class ShapeKind { square, disc };

struct SyntheticSpec {
  std::uint64_t seed = 0;
  std::size_t frames = 8;
  std::size_t width = 48;
  std::size_t height = 48;
  std::size_t objects = 2;
  std::vector<ShapeKind> kinds = {ShapeKind::square, ShapeKind::disc};
  std::size_t min_size = 10;  // square side / disc diameter, pixels
  std::size_t max_size = 18;
  double max_speed = 2.5;     // pixels per frame along each axis
  std::size_t noise_cell = 8;  // value-noise lattice spacing, pixels
  double noise_amplitude = 60;
};

struct ShapeTrack {
  ShapeKind kind = ShapeKind::square;
  std::size_t size = 0;
  std::vector<std::pair<double, double>> positions;  // top-left (y, x), per frame
  std::array<std::uint8_t, 3> colour{};
};

struct Sequence {
  std::vector<Image> frames;
  std::vector<MaskMap> masks;  // may be shorter than frames (reference only)
  std::map<std::string, std::string> meta;
};

namespace detail {

// Bounce inside [0, limit]; positions never leave the range.
inline void advance(double& pos, double& vel, double limit) {
  pos += vel;
  for (int guard = 0; guard < 4 && (pos < 0 || pos > limit); ++guard) {
    if (pos < 0) pos = -pos;
    if (pos > limit) pos = 2 * limit - pos;
    vel = -vel;
  }
  pos = std::clamp(pos, 0.0, limit);
}

inline bool covers(const ShapeTrack& s, std::size_t t, std::size_t y, std::size_t x) {
  const double top = std::round(s.positions[t].first), left = std::round(s.positions[t].second);
  const double fy = static_cast<double>(y), fx = static_cast<double>(x);
  if (s.kind == ShapeKind::square)
    return fy >= top && fy < top + static_cast<double>(s.size) && fx >= left && fx < left + static_cast<double>(s.size);
  const double r = static_cast<double>(s.size) / 2;
  const double dy = fy + 0.5 - (top + r), dx = fx + 0.5 - (left + r);
  return dy * dy + dx * dx <= r * r;
}

}  // namespace detail

// Motion plan of every object (exposed for tests).
inline std::vector<ShapeTrack> plan_tracks(const SyntheticSpec& spec, std::size_t max_objects = kDefaultMaxObjects) {
  if (spec.objects > max_objects)
    throw ConfigError(std::to_string(spec.objects) + " objects exceed max_objects " + std::to_string(max_objects));
  if (spec.frames == 0 || spec.width == 0 || spec.height == 0) throw ConfigError("empty synthetic sequence");
  if (spec.min_size == 0 || spec.min_size > spec.max_size) throw ConfigError("bad shape size range");
  if (spec.max_size > std::min(spec.width, spec.height)) throw ConfigError("shapes larger than the frame");
  if (spec.kinds.empty()) throw ConfigError("no shape kinds");
  Rng rng(spec.seed);
  Rng motion = rng.fork(1);
  std::vector<ShapeTrack> tracks;
  for (std::size_t i = 0; i < spec.objects; ++i) {
    ShapeTrack s;
    s.kind = spec.kinds[static_cast<std::size_t>(motion.uniform_int(0, static_cast<std::int64_t>(spec.kinds.size()) - 1))];
    s.size = static_cast<std::size_t>(
        motion.uniform_int(static_cast<std::int64_t>(spec.min_size), static_cast<std::int64_t>(spec.max_size)));
    const double ly = static_cast<double>(spec.height - s.size), lx = static_cast<double>(spec.width - s.size);
    double y = motion.uniform(0, ly), x = motion.uniform(0, lx);
    double vy = motion.uniform(-spec.max_speed, spec.max_speed), vx = motion.uniform(-spec.max_speed, spec.max_speed);
    for (int ch = 0; ch < 3; ++ch) s.colour[ch] = static_cast<std::uint8_t>(motion.uniform_int(0, 255));
    // keep object colours away from the mid-grey background
    s.colour[static_cast<std::size_t>(i % 3)] = static_cast<std::uint8_t>(200 + motion.uniform_int(0, 55));
    for (std::size_t t = 0; t < spec.frames; ++t) {
      s.positions.emplace_back(y, x);
      detail::advance(y, vy, ly);
      detail::advance(x, vx, lx);
    }
    tracks.push_back(std::move(s));
  }
  return tracks;
}

// Deterministic function of its arguments. Objects are drawn in index order, so
// later objects occlude earlier ones; mask label = object index + 1.
inline Sequence generate_sequence(const SyntheticSpec& spec, std::size_t max_objects = kDefaultMaxObjects) {
  const auto tracks = plan_tracks(spec, max_objects);
  Rng rng(spec.seed);
  Rng texture = rng.fork(2);
  const std::size_t cell = std::max<std::size_t>(spec.noise_cell, 1);
  const std::size_t gh = spec.height / cell + 2, gw = spec.width / cell + 2;
  std::vector<std::array<double, 3>> lattice(gh * gw);
  for (auto& v : lattice)
    for (auto& ch : v) ch = texture.uniform(-1, 1);

  Image background(spec.height, spec.width);
  for (std::size_t y = 0; y < spec.height; ++y)
    for (std::size_t x = 0; x < spec.width; ++x) {
      const double fy = static_cast<double>(y) / static_cast<double>(cell);
      const double fx = static_cast<double>(x) / static_cast<double>(cell);
      const auto y0 = static_cast<std::size_t>(fy), x0 = static_cast<std::size_t>(fx);
      const double ty = fy - static_cast<double>(y0), tx = fx - static_cast<double>(x0);
      auto* px = background.pixel(y, x);
      for (int ch = 0; ch < 3; ++ch) {
        auto at = [&](std::size_t yy, std::size_t xx) { return lattice[yy * gw + xx][static_cast<std::size_t>(ch)]; };
        const double v = (1 - ty) * ((1 - tx) * at(y0, x0) + tx * at(y0, x0 + 1)) +
                         ty * ((1 - tx) * at(y0 + 1, x0) + tx * at(y0 + 1, x0 + 1));
        px[ch] = static_cast<std::uint8_t>(std::clamp(110.0 + spec.noise_amplitude * v, 0.0, 255.0));
      }
    }

  Sequence seq;
  for (std::size_t t = 0; t < spec.frames; ++t) {
    Image frame = background;
    MaskMap mask(spec.height, spec.width);
    for (std::size_t i = 0; i < tracks.size(); ++i)
      for (std::size_t y = 0; y < spec.height; ++y)
        for (std::size_t x = 0; x < spec.width; ++x)
          if (detail::covers(tracks[i], t, y, x)) {
            mask.at(y, x) = static_cast<std::uint8_t>(i + 1);
            std::copy(tracks[i].colour.begin(), tracks[i].colour.end(), frame.pixel(y, x));
          }
    seq.frames.push_back(std::move(frame));
    seq.masks.push_back(std::move(mask));
  }
  seq.meta = {{"width", std::to_string(spec.width)},
              {"height", std::to_string(spec.height)},
              {"frames", std::to_string(spec.frames)},
              {"objects", std::to_string(spec.objects)},
              {"seed", std::to_string(spec.seed)}};
  return seq;
}

inline std::string frame_name(std::size_t index, const char* ext) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%05zu.%s", index, ext);
  return buf;
}

inline void write_masks(const std::filesystem::path& dir, const std::vector<MaskMap>& masks) {
  std::filesystem::create_directories(dir);
  for (std::size_t t = 0; t < masks.size(); ++t) write_pgm(dir / frame_name(t, "pgm"), masks[t]);
}

inline void write_sequence(const std::filesystem::path& dir, const Sequence& seq) {
  std::filesystem::create_directories(dir / "frames");
  for (std::size_t t = 0; t < seq.frames.size(); ++t) write_ppm(dir / "frames" / frame_name(t, "ppm"), seq.frames[t]);
  write_masks(dir / "masks", seq.masks);
  std::ofstream meta(dir / "meta.txt");
  if (!meta) throw IoError("cannot write " + (dir / "meta.txt").string());
  for (const auto& [k, v] : seq.meta) meta << k << '=' << v << '\n';
}

inline std::map<std::string, std::string> read_meta(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  std::map<std::string, std::string> meta;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw IoError("bad meta line '" + line + "' in " + path.string());
    meta[line.substr(0, eq)] = line.substr(eq + 1);
  }
  return meta;
}

// Masks listed in index order; stops at the first missing mask file.
inline std::vector<MaskMap> read_masks(const std::filesystem::path& dir, std::size_t max_count) {
  std::vector<MaskMap> masks;
  for (std::size_t t = 0; t < max_count; ++t) {
    const auto p = dir / frame_name(t, "pgm");
    if (!std::filesystem::exists(p)) break;
    masks.push_back(read_pgm(p));
  }
  return masks;
}

inline Sequence read_sequence(const std::filesystem::path& dir) {
  Sequence seq;
  const auto meta_path = dir / "meta.txt";
  if (std::filesystem::exists(meta_path)) seq.meta = read_meta(meta_path);
  for (std::size_t t = 0;; ++t) {
    const auto p = dir / "frames" / frame_name(t, "ppm");
    if (!std::filesystem::exists(p)) break;
    seq.frames.push_back(read_ppm(p));
  }
  if (seq.frames.empty()) throw IoError("no frames under " + (dir / "frames").string());
  if (seq.meta.count("frames") && std::stoull(seq.meta["frames"]) != seq.frames.size())
    throw IoError("meta.txt lists " + seq.meta["frames"] + " frames but " + std::to_string(seq.frames.size()) +
                  " were found under " + dir.string());
  seq.masks = read_masks(dir / "masks", seq.frames.size());
  return seq;
}

}  // namespace deaot
