#include "blobdiff/world3d.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace blobdiff {

namespace {

constexpr double kPi = 3.14159265358979323846;
constexpr double kBodyRadius = 0.5;
constexpr double kBackground = 0.08;

struct Sphere {
  double c[3];
  double r;
  double color[3];
};

// Feature geometry in blob coordinates: +z is the gaze direction (frontal
// camera sits on +z), +y up, +x to the blob's left as seen from the camera.
std::vector<Sphere> blob_spheres(const BlobIdentity& id) {
  return {
      {{0.0, 0.0, 0.0}, kBodyRadius, {id.color_r, id.color_g, id.color_b}},
      {{-0.18, 0.15, 0.42}, 0.08, {0.05, 0.05, 0.05}},
      {{0.18, 0.15, 0.42}, 0.08, {0.05, 0.05, 0.05}},
      {{0.0, -0.02, 0.52}, 0.09, {0.95, 0.10, 0.10}},  // nose, unique hue
      {{0.48, 0.08, 0.0}, 0.11, {0.90, 0.80, 0.25}},   // ear, +x side only
  };
}
constexpr int kNoseIndex = 3;

struct CamFrame {
  double eye[3];
  double right[3], down[3], fwd[3];
};

CamFrame orbit_frame(double az, double el, double d) {
  const double sa = std::sin(az), ca = std::cos(az);
  const double se = std::sin(el), ce = std::cos(el);
  CamFrame f;
  f.eye[0] = d * sa * ce;
  f.eye[1] = d * se;
  f.eye[2] = d * ca * ce;
  // Forward points at the origin.
  f.fwd[0] = -sa * ce;
  f.fwd[1] = -se;
  f.fwd[2] = -ca * ce;
  // right = normalize(cross(fwd, world_up)); down = cross(fwd, right).
  f.right[0] = ca;
  f.right[1] = 0.0;
  f.right[2] = -sa;
  f.down[0] = f.fwd[1] * f.right[2] - f.fwd[2] * f.right[1];
  f.down[1] = f.fwd[2] * f.right[0] - f.fwd[0] * f.right[2];
  f.down[2] = f.fwd[0] * f.right[1] - f.fwd[1] * f.right[0];
  return f;
}

struct Osc {
  double amp, freq, phase;
  double eval(double t) const { return amp * std::sin(2.0 * kPi * freq * t + phase); }
};

}  // namespace

void validate_trajectory_spec(const TrajectorySpec& spec) {
  if (spec.azimuth_span <= 0 || spec.azimuth_span > 70.0)
    throw std::invalid_argument("trajectory: azimuth span outside (0, 70] degrees");
  if (spec.elevation_span <= 0 || spec.elevation_span > 35.0)
    throw std::invalid_argument("trajectory: elevation span outside (0, 35] degrees");
  if (std::abs(spec.distance - 2.7) > 1e-9)
    throw std::invalid_argument("trajectory: orbit distance is fixed at 2.7");
  if (spec.duration_s <= 0 || spec.fps < 1)
    throw std::invalid_argument("trajectory: bad duration/fps");
}

CameraPose orbit_pose(double azimuth_deg, double elevation_deg, double distance, int h, int w) {
  CamFrame f =
      orbit_frame(azimuth_deg * kPi / 180.0, elevation_deg * kPi / 180.0, distance);
  CameraPose p{Tensor({4, 4}), Tensor({3, 3})};
  const double* rows[3] = {f.right, f.down, f.fwd};
  for (int i = 0; i < 3; ++i) {
    double t = 0;
    for (int j = 0; j < 3; ++j) {
      p.E.at(i, j) = rows[i][j];
      t -= rows[i][j] * f.eye[j];
    }
    p.E.at(i, 3) = t;
  }
  p.E.at(3, 3) = 1.0;
  const double focal = 1.5 * std::min(h, w);
  p.Kmat.at(0, 0) = focal;
  p.Kmat.at(1, 1) = focal;
  p.Kmat.at(0, 2) = 0.5 * w;
  p.Kmat.at(1, 2) = 0.5 * h;
  p.Kmat.at(2, 2) = 1.0;
  validate_pose(p);
  return p;
}

OrbitAngles pose_angles(const CameraPose& pose) {
  // Camera position = -R^T t.
  double eye[3] = {0, 0, 0};
  for (int j = 0; j < 3; ++j)
    for (int i = 0; i < 3; ++i) eye[j] -= pose.E.at(i, j) * pose.E.at(i, 3);
  OrbitAngles a;
  a.distance = std::sqrt(eye[0] * eye[0] + eye[1] * eye[1] + eye[2] * eye[2]);
  a.azimuth_deg = std::atan2(eye[0], eye[2]) * 180.0 / kPi;
  a.elevation_deg = std::asin(std::clamp(eye[1] / a.distance, -1.0, 1.0)) * 180.0 / kPi;
  return a;
}

std::vector<CameraPose> sample_trajectory(const TrajectorySpec& spec, Rng& rng, int h, int w) {
  validate_trajectory_spec(spec);
  const int frames = static_cast<int>(std::lround(spec.duration_s * spec.fps));
  // Frequency cap keeps the per-step angular change under 3 degrees even at
  // full amplitude: span * 2*pi*f/fps <= 70 * 2*pi*0.18/30 = 2.64.
  auto draw = [&](double span) {
    double total = span * (0.6 + 0.4 * rng.uniform());
    double a1 = total * (0.55 + 0.25 * rng.uniform());
    std::vector<Osc> oscs = {
        {a1, 0.04 + 0.14 * rng.uniform(), 2.0 * kPi * rng.uniform()},
        {total - a1, 0.04 + 0.14 * rng.uniform(), 2.0 * kPi * rng.uniform()}};
    return oscs;
  };
  auto az = draw(spec.azimuth_span);
  auto el = draw(spec.elevation_span);
  std::vector<CameraPose> poses;
  poses.reserve(static_cast<size_t>(frames));
  for (int i = 0; i < frames; ++i) {
    double t = static_cast<double>(i) / spec.fps;
    double a = az[0].eval(t) + az[1].eval(t);
    double e = el[0].eval(t) + el[1].eval(t);
    poses.push_back(orbit_pose(a, e, spec.distance, h, w));
  }
  return poses;
}

Tensor render_multiview(const BlobIdentity& id, const std::vector<CameraPose>& poses, int h,
                        int w) {
  if (poses.empty()) throw std::invalid_argument("render_multiview: no poses");
  const int F = static_cast<int>(poses.size());
  Tensor frames({F, 3, h, w});
  const auto spheres = blob_spheres(id);

  for (int f = 0; f < F; ++f) {
    const CameraPose& pose = poses[static_cast<size_t>(f)];
    validate_pose(pose);
    double eye[3] = {0, 0, 0};
    for (int j = 0; j < 3; ++j)
      for (int i = 0; i < 3; ++i) eye[j] -= pose.E.at(i, j) * pose.E.at(i, 3);
    const double cam_dist = std::sqrt(eye[0] * eye[0] + eye[1] * eye[1] + eye[2] * eye[2]);
    if (cam_dist < kBodyRadius + 0.2)
      throw std::invalid_argument("render_multiview: camera inside the blob");
    const double fx = pose.Kmat.at(0, 0), fy = pose.Kmat.at(1, 1);
    const double cx = pose.Kmat.at(0, 2), cy = pose.Kmat.at(1, 2);

    // Project sphere centers and sort far-to-near (painter's order).
    struct Proj {
      double u, v, r;
      double depth;
      const Sphere* s;
    };
    std::vector<Proj> projs;
    for (const auto& s : spheres) {
      double pc[3];
      for (int i = 0; i < 3; ++i) {
        pc[i] = pose.E.at(i, 3);
        for (int j = 0; j < 3; ++j) pc[i] += pose.E.at(i, j) * s.c[j];
      }
      if (pc[2] <= 0.05) continue;  // behind the camera
      projs.push_back(
          {cx + fx * pc[0] / pc[2], cy + fy * pc[1] / pc[2], fx * s.r / pc[2], pc[2], &s});
    }
    std::sort(projs.begin(), projs.end(),
              [](const Proj& a, const Proj& b) { return a.depth > b.depth; });

    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        double px = x + 0.5, py = y + 0.5;
        double col[3] = {kBackground, kBackground, kBackground};
        for (const auto& p : projs) {
          double d = std::sqrt((px - p.u) * (px - p.u) + (py - p.v) * (py - p.v)) - p.r;
          double c = std::clamp(0.5 - d, 0.0, 1.0);
          for (int k = 0; k < 3; ++k) col[k] += c * (p.s->color[k] - col[k]);
        }
        for (int k = 0; k < 3; ++k) frames.at(f, k, y, x) = 2.0 * col[k] - 1.0;
      }
  }
  return frames;
}

double recover_azimuth(const Tensor& frame, const Tensor& Kmat, double distance,
                       double elevation_deg, const double body_color[3]) {
  if (frame.rank() != 3 || frame.shape[0] != 3)
    throw std::invalid_argument("recover_azimuth: expected one [3,h,w] frame");
  const int h = frame.shape[1], w = frame.shape[2];
  const double fx = Kmat.at(0, 0), cx = Kmat.at(0, 2);

  // Classify pixels against the palette; collect the nose-sphere centroid.
  const double palette[5][3] = {{kBackground, kBackground, kBackground},
                                {body_color[0], body_color[1], body_color[2]},
                                {0.05, 0.05, 0.05},
                                {0.95, 0.10, 0.10},
                                {0.90, 0.80, 0.25}};
  double sum_u = 0;
  int count = 0;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      double rgb[3];
      for (int k = 0; k < 3; ++k) rgb[k] = 0.5 * (frame.at(k, y, x) + 1.0);
      int best = 0;
      double best_d = 1e18;
      for (int pi = 0; pi < 5; ++pi) {
        double d = 0;
        for (int k = 0; k < 3; ++k)
          d += (rgb[k] - palette[pi][k]) * (rgb[k] - palette[pi][k]);
        if (d < best_d) {
          best_d = d;
          best = pi;
        }
      }
      if (best == 3 && best_d < 0.05) {
        sum_u += x + 0.5;
        ++count;
      }
    }
  if (count == 0) throw std::runtime_error("recover_azimuth: nose not visible");
  const double offset = sum_u / count - cx;

  // offset = -fx * r_n * sin(phi) / (distance - r_n*cos(phi)*cos(theta));
  // monotone decreasing in phi over (-90, 90), so bisect.
  const double r_n = 0.52;
  const double ce = std::cos(elevation_deg * kPi / 180.0);
  auto predicted = [&](double phi) {
    return -fx * r_n * std::sin(phi) / (distance - r_n * std::cos(phi) * ce);
  };
  double lo = -0.5 * kPi, hi = 0.5 * kPi;
  for (int it = 0; it < 60; ++it) {
    double mid = 0.5 * (lo + hi);
    if (predicted(mid) > offset)
      lo = mid;
    else
      hi = mid;
  }
  return 0.5 * (lo + hi) * 180.0 / kPi;
}

}  // namespace blobdiff
