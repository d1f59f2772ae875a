#include "blobdiff/world2d.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace blobdiff {

namespace {

constexpr double kPi = 3.14159265358979323846;
constexpr double kMouthHeightScale = 0.3;  // max mouth half-height / radius
constexpr double kMouthDropY = 0.45;       // mouth center below blob center, / radius
constexpr double kEyeRaiseY = 0.35;        // eyes above blob center, / radius
constexpr double kFeatureDark = 0.05;      // eye/mouth interior luminance
constexpr double kBackground = 0.10;

struct Range {
  double lo, hi;
  double sample(Rng& rng) const { return lo + (hi - lo) * rng.uniform(); }
  double normalize(double v) const { return (v - lo) / (hi - lo); }
};
constexpr Range kColorRange{0.2, 0.9};
constexpr Range kRadiusRange{0.25, 0.38};
constexpr Range kEyeOffsetRange{0.35, 0.5};
constexpr Range kEyeSizeRange{0.06, 0.12};
constexpr Range kMouthWidthRange{0.35, 0.6};

// Anti-aliasing: coverage ramps over a one-pixel band of the signed distance.
double coverage(double sdf) { return std::clamp(0.5 - sdf, 0.0, 1.0); }

// Signed distance (pixels, approximate) to an axis-aligned ellipse boundary.
double ellipse_sdf(double dx, double dy, double a, double b) {
  double k = std::sqrt(dx * dx / (a * a) + dy * dy / (b * b));
  if (k < 1e-12) return -std::min(a, b);
  // Scale the normalized distance back to roughly pixel units.
  double r_dir = std::sqrt(dx * dx + dy * dy) / k;  // ellipse radius along this direction
  return (k - 1.0) * r_dir;
}

struct Osc {
  double amp, freq, phase;
  double eval(double t) const { return amp * std::sin(2.0 * kPi * freq * t + phase); }
};

std::vector<Osc> sample_oscillators(Rng& rng, int count, double amp_total, double f_lo,
                                    double f_hi) {
  std::vector<Osc> oscs;
  double remaining = amp_total;
  for (int i = 0; i < count; ++i) {
    double amp = (i + 1 == count) ? remaining : remaining * (0.3 + 0.5 * rng.uniform());
    remaining -= amp;
    oscs.push_back({amp, f_lo + (f_hi - f_lo) * rng.uniform(), 2.0 * kPi * rng.uniform()});
  }
  return oscs;
}

}  // namespace

Tensor identity_param_vector(const BlobIdentity& id) {
  Tensor p({7});
  p[0] = kColorRange.normalize(id.color_r);
  p[1] = kColorRange.normalize(id.color_g);
  p[2] = kColorRange.normalize(id.color_b);
  p[3] = kRadiusRange.normalize(id.radius);
  p[4] = kEyeOffsetRange.normalize(id.eye_offset);
  p[5] = kEyeSizeRange.normalize(id.eye_size);
  p[6] = kMouthWidthRange.normalize(id.mouth_width);
  return p;
}

BlobIdentity sample_identity(Rng& rng, int d_id) {
  if (d_id < 2) throw std::invalid_argument("sample_identity: d_id too small");
  BlobIdentity id;
  id.color_r = kColorRange.sample(rng);
  id.color_g = kColorRange.sample(rng);
  id.color_b = kColorRange.sample(rng);
  id.radius = kRadiusRange.sample(rng);
  id.eye_offset = kEyeOffsetRange.sample(rng);
  id.eye_size = kEyeSizeRange.sample(rng);
  id.mouth_width = kMouthWidthRange.sample(rng);

  // Fixed projection shared by every identity (seeded by a constant), then
  // per-sample jitter, then unit normalization.
  Tensor p = identity_param_vector(id);
  static constexpr uint64_t kProjectionSeed = 0xB10BFACEu;
  Rng proj(kProjectionSeed);
  Tensor v({d_id});
  for (int i = 0; i < d_id; ++i) {
    double acc = 0;
    for (int j = 0; j < 7; ++j) acc += proj.normal() * p[j];
    v[i] = acc + 0.02 * rng.normal();
  }
  double n = 0;
  for (double x : v.data) n += x * x;
  n = std::sqrt(n);
  if (n < 1e-9) throw std::runtime_error("sample_identity: degenerate embedding");
  for (auto& x : v.data) x /= n;
  id.embedding = std::move(v);
  return id;
}

std::vector<double> synth_articulation(int frames, Rng& rng, int fps) {
  if (frames < 1 || fps < 1) throw std::invalid_argument("synth_articulation: bad sizes");
  const int count = rng.uniform_int(2, 4);
  // Total amplitude and squash slope are kept gentle so the squashing map
  // stays near-linear: harmonics above 5 Hz hold under 1% of signal energy.
  auto oscs = sample_oscillators(rng, count, 1.0, 0.5, 4.0);
  const bool silent = rng.uniform() < 0.2;
  // Silent stretch: a smooth gate dropping to near zero over a slow ramp so
  // the spectrum stays below 5 Hz.
  double s_begin = 0, s_end = 0;
  if (silent) {
    double len = (0.2 + 0.2 * rng.uniform()) * frames;
    s_begin = rng.uniform() * (frames - len);
    s_end = s_begin + len;
  }
  const double ramp = 0.5 * fps;  // half-second edges

  std::vector<double> a(static_cast<size_t>(frames));
  for (int i = 0; i < frames; ++i) {
    double t = static_cast<double>(i) / fps;
    double s = 0;
    for (const auto& o : oscs) s += o.eval(t);
    double v = 1.0 / (1.0 + std::exp(-1.5 * s));  // squash to (0,1)
    if (silent) {
      double d = std::max(s_begin - i, i - s_end);  // <0 inside the stretch
      double g = std::clamp(d / ramp, 0.0, 1.0);
      double gate = g * g * (3.0 - 2.0 * g);  // smoothstep edges
      v *= 0.03 + 0.97 * gate;
    }
    a[static_cast<size_t>(i)] = v;
  }
  return a;
}

std::vector<BlobPose2D> synth_head_poses(int frames, int h, int w, double radius_px, Rng& rng,
                                         int fps) {
  if (frames < 1) throw std::invalid_argument("synth_head_poses: no frames");
  const double margin = radius_px + 2.0;
  const double room_x = 0.5 * w - margin;
  const double room_y = 0.5 * h - margin;
  if (room_x < 0 || room_y < 0)
    throw std::invalid_argument("synth_head_poses: blob does not fit the frame");
  const double amp_x = std::min(room_x, 0.08 * w);
  const double amp_y = std::min(room_y, 0.08 * h);
  auto ox = sample_oscillators(rng, 2, amp_x, 0.2, 1.2);
  auto oy = sample_oscillators(rng, 2, amp_y, 0.2, 1.2);
  auto orot = sample_oscillators(rng, 2, 0.12, 0.2, 1.0);
  std::vector<BlobPose2D> poses(static_cast<size_t>(frames));
  for (int i = 0; i < frames; ++i) {
    double t = static_cast<double>(i) / fps;
    double x = 0, y = 0, r = 0;
    for (const auto& o : ox) x += o.eval(t);
    for (const auto& o : oy) y += o.eval(t);
    for (const auto& o : orot) r += o.eval(t);
    poses[static_cast<size_t>(i)] = {0.5 * w + x, 0.5 * h + y, r};
  }
  return poses;
}

RenderedClip render_talking_blob(const BlobIdentity& id, const std::vector<double>& aperture,
                                 const std::vector<BlobPose2D>& poses, int h, int w) {
  if (aperture.size() != poses.size() || aperture.empty())
    throw std::invalid_argument("render_talking_blob: per-frame input lengths disagree");
  const int F = static_cast<int>(aperture.size());
  const double R = id.radius * std::min(h, w);

  RenderedClip clip;
  clip.frames = Tensor({F, 3, h, w});
  clip.mouth_regions = Tensor({F, 4});
  const double body[3] = {id.color_r, id.color_g, id.color_b};

  for (int f = 0; f < F; ++f) {
    const BlobPose2D& pose = poses[static_cast<size_t>(f)];
    const double a = aperture[static_cast<size_t>(f)];
    if (!std::isfinite(a) || a < 0.0 || a > 1.0)
      throw std::invalid_argument("render_talking_blob: aperture outside [0,1]");
    if (pose.cx - R < 1 || pose.cx + R > w - 1 || pose.cy - R < 1 || pose.cy + R > h - 1)
      throw std::invalid_argument("render_talking_blob: pose places blob outside the frame");

    const double cr = std::cos(pose.rot), sr = std::sin(pose.rot);
    // Feature centers in blob coordinates (y down), rotated into the frame.
    auto place = [&](double bx, double by, double& px, double& py) {
      px = pose.cx + cr * bx - sr * by;
      py = pose.cy + sr * bx + cr * by;
    };
    double ex_l, ey_l, ex_r, ey_r, mx, my;
    place(-id.eye_offset * R, -kEyeRaiseY * R, ex_l, ey_l);
    place(+id.eye_offset * R, -kEyeRaiseY * R, ex_r, ey_r);
    place(0.0, kMouthDropY * R, mx, my);
    const double eye_r = id.eye_size * R;
    const double mouth_a = id.mouth_width * R;           // half-width
    const double mouth_b = a * kMouthHeightScale * R;    // half-height

    clip.mouth_regions.at(f, 0) = mx;
    clip.mouth_regions.at(f, 1) = my;
    clip.mouth_regions.at(f, 2) = mouth_a;
    clip.mouth_regions.at(f, 3) = kMouthHeightScale * R;

    // 4x4 supersampling per pixel. With one sample per pixel the AA ramp
    // makes a hairline mouth (half-height under half a pixel) deposit far
    // more darkness than its true area, which bends the darkness-vs-aperture
    // relation exactly where silent stretches live. Averaging subsamples
    // with a proportionally narrower ramp keeps coverage close to true area
    // for arbitrarily thin ellipses.
    constexpr int kSS = 4;
    constexpr double kRamp = 1.0 / kSS;
    auto shade = [&](double px, double py, double col[3]) {
      col[0] = col[1] = col[2] = kBackground;
      double db = std::sqrt((px - pose.cx) * (px - pose.cx) +
                            (py - pose.cy) * (py - pose.cy)) -
                  R;
      double cb = coverage(db / kRamp);
      for (int c = 0; c < 3; ++c) col[c] += cb * (body[c] - col[c]);
      if (cb <= 0.0) return;
      for (const auto& e : {std::pair{ex_l, ey_l}, std::pair{ex_r, ey_r}}) {
        double de =
            std::sqrt((px - e.first) * (px - e.first) + (py - e.second) * (py - e.second)) -
            eye_r;
        double ce = coverage(de / kRamp);
        for (int c = 0; c < 3; ++c) col[c] += ce * (kFeatureDark - col[c]);
      }
      if (mouth_b > 1e-9) {
        double dx = px - mx, dy = py - my;
        double rx = cr * dx + sr * dy;
        double ry = -sr * dx + cr * dy;
        double cm = coverage(ellipse_sdf(rx, ry, mouth_a, mouth_b) / kRamp);
        for (int c = 0; c < 3; ++c) col[c] += cm * (kFeatureDark - col[c]);
      }
    };
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        double acc[3] = {0, 0, 0};
        for (int sy = 0; sy < kSS; ++sy)
          for (int sx = 0; sx < kSS; ++sx) {
            double col[3];
            shade(x + (sx + 0.5) / kSS, y + (sy + 0.5) / kSS, col);
            for (int c = 0; c < 3; ++c) acc[c] += col[c];
          }
        for (int c = 0; c < 3; ++c)
          clip.frames.at(f, c, y, x) = 2.0 * acc[c] / (kSS * kSS) - 1.0;
      }
    }
  }
  return clip;
}

double mouth_darkness(const Tensor& frames, int f, const Tensor& mouth_regions) {
  if (frames.rank() != 4 || frames.shape[1] != 3)
    throw std::invalid_argument("mouth_darkness: expected [F,3,h,w] frames");
  if (f < 0 || f >= frames.shape[0]) throw std::out_of_range("mouth_darkness: frame index");
  const int h = frames.shape[2], w = frames.shape[3];
  const double cx = mouth_regions.at(f, 0), cy = mouth_regions.at(f, 1);
  const double hw = mouth_regions.at(f, 2) + 1.0, hh = mouth_regions.at(f, 3) + 1.0;
  if (hw <= 0 || hh <= 0) throw std::invalid_argument("mouth_darkness: empty crop");
  // Sample on a subpixel lattice that moves rigidly with the region centre.
  // An integer-aligned crop gains and loses whole pixel rows as the head
  // drifts, adding noise correlated with pose rather than with the mouth.
  const int nx = std::max(8, static_cast<int>(std::ceil(4.0 * hw)));
  const int ny = std::max(8, static_cast<int>(std::ceil(4.0 * hh)));
  auto lum = [&](int y, int x) {
    return 0.299 * frames.at(f, 0, y, x) + 0.587 * frames.at(f, 1, y, x) +
           0.114 * frames.at(f, 2, y, x);
  };
  auto lum_bilinear = [&](double x, double y) {
    x = std::clamp(x, 0.0, static_cast<double>(w - 1));
    y = std::clamp(y, 0.0, static_cast<double>(h - 1));
    const int x0 = static_cast<int>(x), y0 = static_cast<int>(y);
    const int x1 = std::min(x0 + 1, w - 1), y1 = std::min(y0 + 1, h - 1);
    const double ax = x - x0, ay = y - y0;
    const double top = (1 - ax) * lum(y0, x0) + ax * lum(y0, x1);
    const double bot = (1 - ax) * lum(y1, x0) + ax * lum(y1, x1);
    return (1 - ay) * top + ay * bot;
  };
  double acc = 0;
  for (int iy = 0; iy < ny; ++iy)
    for (int ix = 0; ix < nx; ++ix) {
      const double x = cx - hw + (ix + 0.5) * (2.0 * hw / nx);
      const double y = cy - hh + (iy + 0.5) * (2.0 * hh / ny);
      acc += lum_bilinear(x, y);
    }
  return -acc / (static_cast<double>(nx) * static_cast<double>(ny));
}

}  // namespace blobdiff
