#pragma once

// Region similarity J (IoU), boundary similarity F and their mean J&F.

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "deaot/image.hpp"

namespace deaot {

namespace detail {

inline void check_same_dims(const MaskMap& a, const MaskMap& b) {
  if (a.height != b.height || a.width != b.width)
    throw DimensionError("mask sizes differ: " + std::to_string(a.height) + "x" + std::to_string(a.width) + " vs " +
                         std::to_string(b.height) + "x" + std::to_string(b.width));
}

}  // namespace detail

inline double j_score(const MaskMap& pred, const MaskMap& gt, std::uint8_t object) {
  detail::check_same_dims(pred, gt);
  std::size_t inter = 0, uni = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const bool p = pred.values[i] == object, g = gt.values[i] == object;
    inter += p && g;
    uni += p || g;
  }
  return uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

// Object pixels with a 4-neighbour outside the object; pixels beyond the
// image border count as outside.
inline std::vector<std::uint8_t> boundary_map(const MaskMap& mask, std::uint8_t object) {
  const std::size_t h = mask.height, w = mask.width;
  std::vector<std::uint8_t> b(h * w, 0);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      if (mask.at(y, x) != object) continue;
      const bool edge = y == 0 || x == 0 || y + 1 == h || x + 1 == w || mask.at(y - 1, x) != object ||
                        mask.at(y + 1, x) != object || mask.at(y, x - 1) != object || mask.at(y, x + 1) != object;
      b[y * w + x] = edge;
    }
  return b;
}

// DAVIS convention: ceil(0.008 * image diagonal).
inline double default_tolerance(std::size_t height, std::size_t width) {
  return std::ceil(0.008 * std::hypot(static_cast<double>(height), static_cast<double>(width)));
}

namespace detail {

// Fraction of `from` boundary pixels with a `to` boundary pixel within
// Euclidean distance `radius`. Returns -1 when `from` is empty.
inline double matched_fraction(const std::vector<std::uint8_t>& from, const std::vector<std::uint8_t>& to,
                               std::size_t h, std::size_t w, double radius) {
  const auto r = static_cast<std::ptrdiff_t>(std::floor(radius));
  std::vector<std::pair<std::ptrdiff_t, std::ptrdiff_t>> disk;
  for (std::ptrdiff_t dy = -r; dy <= r; ++dy)
    for (std::ptrdiff_t dx = -r; dx <= r; ++dx)
      if (static_cast<double>(dy * dy + dx * dx) <= radius * radius) disk.emplace_back(dy, dx);
  std::size_t total = 0, hit = 0;
  const auto sh = static_cast<std::ptrdiff_t>(h), sw = static_cast<std::ptrdiff_t>(w);
  for (std::ptrdiff_t y = 0; y < sh; ++y)
    for (std::ptrdiff_t x = 0; x < sw; ++x) {
      if (!from[static_cast<std::size_t>(y * sw + x)]) continue;
      ++total;
      for (auto [dy, dx] : disk) {
        const auto yy = y + dy, xx = x + dx;
        if (yy >= 0 && yy < sh && xx >= 0 && xx < sw && to[static_cast<std::size_t>(yy * sw + xx)]) {
          ++hit;
          break;
        }
      }
    }
  return total == 0 ? -1.0 : static_cast<double>(hit) / static_cast<double>(total);
}

}  // namespace detail

// Boundary F-measure with distance-threshold matching. Both boundaries
// empty -> 1; exactly one empty -> 0.
inline double f_score(const MaskMap& pred, const MaskMap& gt, std::uint8_t object, double tol_radius) {
  detail::check_same_dims(pred, gt);
  const auto bp = boundary_map(pred, object), bg = boundary_map(gt, object);
  const double precision = detail::matched_fraction(bp, bg, pred.height, pred.width, tol_radius);
  const double recall = detail::matched_fraction(bg, bp, pred.height, pred.width, tol_radius);
  if (precision < 0 && recall < 0) return 1.0;
  if (precision < 0 || recall < 0) return 0.0;
  return precision + recall == 0 ? 0.0 : 2 * precision * recall / (precision + recall);
}

inline double f_score(const MaskMap& pred, const MaskMap& gt, std::uint8_t object) {
  return f_score(pred, gt, object, default_tolerance(gt.height, gt.width));
}

struct ScoreRow {
  std::size_t id = 0;  // object label or frame index
  double j = 0, f = 0;
  double jf() const { return (j + f) / 2; }
};

struct EvalReport {
  std::vector<ScoreRow> objects;
  std::vector<ScoreRow> frames;
  double j = 0, f = 0, jf = 0;
  std::size_t evaluated_frames = 0;
};

// Frame 0 is the given reference and is skipped. Objects are the labels
// present in any ground-truth frame; scores are averaged over frames per
// object, then over objects.
inline EvalReport evaluate_sequence(const std::vector<MaskMap>& preds, const std::vector<MaskMap>& gts) {
  if (preds.size() != gts.size())
    throw DimensionError(std::to_string(preds.size()) + " predicted masks for " + std::to_string(gts.size()) +
                         " ground-truth masks");
  if (gts.size() < 2) throw ContractError("evaluation needs at least one frame after the reference");
  std::set<std::uint8_t> labels;
  for (const auto& g : gts)
    for (auto v : g.values)
      if (v) labels.insert(v);
  EvalReport report;
  report.evaluated_frames = gts.size() - 1;
  std::vector<ScoreRow> per_object;
  for (auto label : labels) per_object.push_back({label, 0, 0});
  for (std::size_t t = 1; t < gts.size(); ++t) {
    ScoreRow frame{t, 0, 0};
    const double tol = default_tolerance(gts[t].height, gts[t].width);
    for (std::size_t k = 0; k < per_object.size(); ++k) {
      const auto label = static_cast<std::uint8_t>(per_object[k].id);
      const double j = j_score(preds[t], gts[t], label), f = f_score(preds[t], gts[t], label, tol);
      per_object[k].j += j;
      per_object[k].f += f;
      frame.j += j;
      frame.f += f;
    }
    if (!per_object.empty()) {
      frame.j /= static_cast<double>(per_object.size());
      frame.f /= static_cast<double>(per_object.size());
    } else {
      frame.j = frame.f = 1.0;
    }
    report.frames.push_back(frame);
  }
  const auto n = static_cast<double>(report.evaluated_frames);
  for (auto& o : per_object) {
    o.j /= n;
    o.f /= n;
    report.j += o.j;
    report.f += o.f;
  }
  if (per_object.empty()) {
    report.j = report.f = 1.0;
  } else {
    report.j /= static_cast<double>(per_object.size());
    report.f /= static_cast<double>(per_object.size());
  }
  report.jf = (report.j + report.f) / 2;
  report.objects = std::move(per_object);
  return report;
}

inline std::string report_csv(const EvalReport& r) {
  std::ostringstream out;
  out.setf(std::ios::fixed);
  out.precision(6);
  out << "kind,id,J,F,JF\n";
  for (const auto& o : r.objects) out << "object," << o.id << ',' << o.j << ',' << o.f << ',' << o.jf() << '\n';
  for (const auto& fr : r.frames) out << "frame," << fr.id << ',' << fr.j << ',' << fr.f << ',' << fr.jf() << '\n';
  out << "mean,all," << r.j << ',' << r.f << ',' << r.jf << '\n';
  return out.str();
}

inline std::string report_table(const EvalReport& r) {
  std::ostringstream out;
  char line[96];
  std::snprintf(line, sizeof(line), "%-8s %6s %8s %8s %8s\n", "kind", "id", "J", "F", "J&F");
  out << line;
  auto row = [&](const char* kind, const std::string& id, double j, double f, double jf) {
    std::snprintf(line, sizeof(line), "%-8s %6s %8.4f %8.4f %8.4f\n", kind, id.c_str(), j, f, jf);
    out << line;
  };
  for (const auto& o : r.objects) row("object", std::to_string(o.id), o.j, o.f, o.jf());
  for (const auto& fr : r.frames) row("frame", std::to_string(fr.id), fr.j, fr.f, fr.jf());
  row("mean", "all", r.j, r.f, r.jf);
  return out.str();
}

}  // namespace deaot
