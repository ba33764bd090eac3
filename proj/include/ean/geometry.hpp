#pragma once

// Polyline geometry for BEV map elements: uniform arc-length resampling,
// Chamfer distance, square anchor-neighborhood offsets and circular
// GT-neighborhood perturbations. Everything here is a pure function of its
// arguments plus an explicit RandomStream.

#include <cmath>
#include <span>
#include <vector>

#include "ean/errors.hpp"
#include "ean/rng.hpp"

namespace ean {

struct Vec2 {
  double x = 0.0;
  double y = 0.0;

  friend Vec2 operator+(Vec2 a, Vec2 b) { return {a.x + b.x, a.y + b.y}; }
  friend Vec2 operator-(Vec2 a, Vec2 b) { return {a.x - b.x, a.y - b.y}; }
  friend Vec2 operator*(double s, Vec2 a) { return {s * a.x, s * a.y}; }
  friend bool operator==(Vec2 a, Vec2 b) { return a.x == b.x && a.y == b.y; }
  double norm() const { return std::hypot(x, y); }
};

// Predicted map range in the ego frame, meters.
inline constexpr double kBevXMin = -15.0, kBevXMax = 15.0;
inline constexpr double kBevYMin = -30.0, kBevYMax = 30.0;
inline constexpr double kBevXExtent = kBevXMax - kBevXMin;  // 30 m
inline constexpr double kBevYExtent = kBevYMax - kBevYMin;  // 60 m

enum MapClass : int {
  kPedestrianCrossing = 0,
  kLaneDivider = 1,
  kBoundary = 2,
  kNumMapClasses = 3,
};

// One map element instance: an ordered vertex polyline in meters. Pedestrian
// crossings are closed polygons, everything else is an open line.
struct MapElement {
  int class_id = kLaneDivider;
  std::vector<Vec2> vertices;
  bool closed = false;
};

// Exactly N points at equal arc-length spacing along one element.
struct ResampledElement {
  int class_id = kLaneDivider;
  std::vector<Vec2> points;
  double spacing = 0.0;  // inter-vertex distance d, meters
  bool closed = false;
};

struct GtNeighborhoodSample {
  std::vector<Vec2> base_points;
  std::vector<Vec2> perturbed_points;
  double radius = 0.0;
};

inline Vec2 to_normalized(Vec2 m) {
  return {(m.x - kBevXMin) / kBevXExtent, (m.y - kBevYMin) / kBevYExtent};
}

inline Vec2 from_normalized(Vec2 u) {
  return {u.x * kBevXExtent + kBevXMin, u.y * kBevYExtent + kBevYMin};
}

inline double polyline_length(std::span<const Vec2> pts, bool closed) {
  double len = 0.0;
  for (size_t i = 0; i + 1 < pts.size(); ++i) len += (pts[i + 1] - pts[i]).norm();
  if (closed && pts.size() >= 2) len += (pts.front() - pts.back()).norm();
  return len;
}

// N points at equal arc spacing. Open elements place endpoints at both ends
// (d = length/(N-1)); closed elements start at vertex 0 and wrap
// (d = perimeter/N).
inline ResampledElement resample(const MapElement& elem, int n_points) {
  if (n_points < 2) throw ContractError("resample: need at least 2 points");
  if (elem.vertices.size() < 2) {
    throw DegenerateGeometryError("resample: element has fewer than 2 vertices");
  }
  std::vector<Vec2> verts = elem.vertices;
  if (elem.closed) verts.push_back(verts.front());

  std::vector<double> cum(verts.size(), 0.0);
  for (size_t i = 1; i < verts.size(); ++i) {
    cum[i] = cum[i - 1] + (verts[i] - verts[i - 1]).norm();
  }
  const double total = cum.back();
  if (total <= 0.0) throw DegenerateGeometryError("resample: zero-length element");

  ResampledElement out;
  out.class_id = elem.class_id;
  out.closed = elem.closed;
  out.spacing = elem.closed ? total / n_points : total / (n_points - 1);
  out.points.reserve(static_cast<size_t>(n_points));
  size_t seg = 0;
  for (int k = 0; k < n_points; ++k) {
    double s = static_cast<double>(k) * out.spacing;
    s = std::min(s, total);  // guard the last open endpoint against rounding
    while (seg + 2 < verts.size() && cum[seg + 1] < s) ++seg;
    const double seg_len = cum[seg + 1] - cum[seg];
    const double t = seg_len > 0.0 ? (s - cum[seg]) / seg_len : 0.0;
    out.points.push_back(verts[seg] + t * (verts[seg + 1] - verts[seg]));
  }
  return out;
}

// Offset inside the open square (-a/2, a/2)^2 from two draws in (-1,1).
inline Vec2 square_offset_from_betas(double a_side, double beta1, double beta2) {
  return {beta1 * a_side / 2.0, beta2 * a_side / 2.0};
}

inline Vec2 square_neighborhood_offset(double a_side, RandomStream& rng) {
  if (a_side <= 0.0) throw ContractError("square_neighborhood_offset: side must be positive");
  const double b1 = rng.uniform_sym();
  const double b2 = rng.uniform_sym();
  return square_offset_from_betas(a_side, b1, b2);
}

// Displacement inside the radius-r disk: dx = b1*r, dy = b2*sqrt(r^2 - dx^2).
// The y draw is conditioned on dx, so samples concentrate toward the
// horizontal axis rather than covering the disk uniformly; that shape is
// intentional.
inline Vec2 disk_offset_from_betas(double r, double beta1, double beta2) {
  const double dx = beta1 * r;
  const double dy = beta2 * std::sqrt(std::max(r * r - dx * dx, 0.0));
  return {dx, dy};
}

inline GtNeighborhoodSample perturb_in_gt_neighborhood(const ResampledElement& elem, double omega,
                                                       RandomStream& rng) {
  if (omega <= 0.0 || omega > 1.0) {
    throw ContractError("perturb_in_gt_neighborhood: omega must be in (0,1]");
  }
  GtNeighborhoodSample out;
  out.base_points = elem.points;
  out.radius = omega * elem.spacing / 2.0;
  out.perturbed_points.reserve(elem.points.size());
  for (const Vec2& p : elem.points) {
    const double b1 = rng.uniform_sym();
    const double b2 = rng.uniform_sym();
    out.perturbed_points.push_back(p + disk_offset_from_betas(out.radius, b1, b2));
  }
  return out;
}

// Symmetric mean nearest-neighbor distance:
// CD = 1/2 (mean_a min_b |a-b| + mean_b min_a |a-b|).
inline double chamfer_distance(std::span<const Vec2> a, std::span<const Vec2> b) {
  if (a.empty() || b.empty()) throw ContractError("chamfer_distance: empty point set");
  auto directed = [](std::span<const Vec2> from, std::span<const Vec2> to) {
    double acc = 0.0;
    for (const Vec2& p : from) {
      double best = (p - to[0]).norm();
      for (size_t i = 1; i < to.size(); ++i) best = std::min(best, (p - to[i]).norm());
      acc += best;
    }
    return acc / static_cast<double>(from.size());
  };
  return 0.5 * (directed(a, b) + directed(b, a));
}

}  // namespace ean
