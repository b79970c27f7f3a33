#include <array>
#include <cmath>
#include <vector>

#include "advkit/data_io.hpp"
#include "advkit/rng.hpp"

namespace advkit {

namespace {

struct P {
  double x, y;
};

// Stroke skeletons per digit in a unit box (y grows downward). Gaps between
// entries split the polyline.
const P kGap{-1, -1};

const std::vector<std::vector<P>> kStrokes = {
    // 0: closed oval
    {{0.50, 0.08}, {0.78, 0.22}, {0.82, 0.50}, {0.78, 0.78}, {0.50, 0.92},
     {0.22, 0.78}, {0.18, 0.50}, {0.22, 0.22}, {0.50, 0.08}},
    // 1: flag + stem
    {{0.32, 0.26}, {0.55, 0.08}, {0.55, 0.92}},
    // 2: top arc, diagonal, base bar
    {{0.22, 0.26}, {0.38, 0.10}, {0.66, 0.10}, {0.80, 0.28}, {0.72, 0.48},
     {0.24, 0.90}, {0.82, 0.90}},
    // 3: two stacked bulges
    {{0.24, 0.14}, {0.62, 0.10}, {0.78, 0.26}, {0.58, 0.46}, {0.40, 0.48},
     kGap,
     {0.58, 0.46}, {0.80, 0.62}, {0.70, 0.86}, {0.30, 0.92}, {0.20, 0.80}},
    // 4: slanted stroke, crossbar, stem
    {{0.62, 0.08}, {0.20, 0.62}, {0.84, 0.62}, kGap, {0.62, 0.08}, {0.62, 0.92}},
    // 5: cap, drop, bowl
    {{0.78, 0.10}, {0.28, 0.10}, {0.24, 0.46}, {0.58, 0.42}, {0.80, 0.60},
     {0.74, 0.84}, {0.42, 0.94}, {0.20, 0.82}},
    // 6: sweep into lower loop
    {{0.72, 0.10}, {0.40, 0.20}, {0.24, 0.48}, {0.24, 0.76}, {0.46, 0.92},
     {0.72, 0.80}, {0.74, 0.58}, {0.52, 0.48}, {0.26, 0.58}},
    // 7: bar and slash
    {{0.20, 0.12}, {0.82, 0.12}, {0.44, 0.92}},
    // 8: two loops
    {{0.50, 0.08}, {0.74, 0.20}, {0.70, 0.40}, {0.50, 0.48}, {0.30, 0.40},
     {0.26, 0.20}, {0.50, 0.08},
     kGap,
     {0.50, 0.48}, {0.78, 0.62}, {0.74, 0.86}, {0.50, 0.94}, {0.26, 0.86},
     {0.22, 0.62}, {0.50, 0.48}},
    // 9: loop and tail
    {{0.74, 0.42}, {0.50, 0.52}, {0.26, 0.40}, {0.28, 0.16}, {0.52, 0.08},
     {0.74, 0.18}, {0.74, 0.42}, {0.70, 0.70}, {0.54, 0.92}},
};

double seg_dist(double px, double py, P a, P b) {
  const double vx = b.x - a.x, vy = b.y - a.y;
  const double wx = px - a.x, wy = py - a.y;
  const double vv = vx * vx + vy * vy;
  double t = vv > 0 ? (wx * vx + wy * vy) / vv : 0;
  t = std::min(1.0, std::max(0.0, t));
  const double dx = px - (a.x + t * vx), dy = py - (a.y + t * vy);
  return std::sqrt(dx * dx + dy * dy);
}

}  // namespace

Dataset synth_digits(size_t n, uint64_t seed, const std::string& split) {
  constexpr size_t kSide = 28;
  Dataset out;
  out.images = Tensor<float>({n, 1, kSide, kSide});
  out.labels.resize(n);
  out.classes = 10;
  out.name = "synth";
  out.split = split;

  for (size_t i = 0; i < n; ++i) {
    Rng rng(derive_seed(seed, "sample", i));
    const int digit = static_cast<int>(rng.uniform_int(10));
    out.labels[i] = digit;

    const double angle = rng.uniform(-0.22, 0.22);
    const double scale = rng.uniform(0.80, 1.10);
    const double shear = rng.uniform(-0.15, 0.15);
    const double dx = rng.uniform(-2.5, 2.5);
    const double dy = rng.uniform(-2.5, 2.5);
    const double stroke = rng.uniform(0.85, 1.45);
    const double ca = std::cos(angle), sa = std::sin(angle);

    // skeleton points into pixel space
    std::vector<P> pts;
    pts.reserve(kStrokes[digit].size());
    for (P p : kStrokes[digit]) {
      if (p.x < 0) {
        pts.push_back(kGap);
        continue;
      }
      double x = (p.x - 0.5) * 20.0 * scale;
      double y = (p.y - 0.5) * 22.0 * scale;
      x += shear * y;
      const double rx = ca * x - sa * y;
      const double ry = sa * x + ca * y;
      pts.push_back({rx + kSide / 2.0 + dx, ry + kSide / 2.0 + dy});
    }

    float* img = out.images.data() + i * kSide * kSide;
    for (size_t py = 0; py < kSide; ++py)
      for (size_t px = 0; px < kSide; ++px) {
        double d = 1e9;
        for (size_t s = 0; s + 1 < pts.size(); ++s) {
          if (pts[s].x < 0 || pts[s + 1].x < 0) continue;
          d = std::min(d, seg_dist(px + 0.5, py + 0.5, pts[s], pts[s + 1]));
        }
        const double v = std::exp(-(d * d) / (2 * stroke * stroke));
        img[py * kSide + px] = static_cast<float>(v);
      }

    // light pixel noise, clamped back into [0,1]
    for (size_t j = 0; j < kSide * kSide; ++j) {
      const double v = img[j] + 0.04 * rng.gauss();
      img[j] = static_cast<float>(std::min(1.0, std::max(0.0, v)));
    }
  }
  return out;
}

}  // namespace advkit
