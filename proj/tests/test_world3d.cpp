#include <doctest.h>

#include <cmath>

#include "blobdiff/world3d.hpp"

using namespace blobdiff;

TEST_CASE("orbit poses: validity, angle round-trip, intrinsics layout") {
  for (double az : {-70.0, -30.0, 0.0, 45.0, 70.0})
    for (double el : {-35.0, 0.0, 20.0}) {
      CameraPose p = orbit_pose(az, el, 2.7, 32, 32);
      validate_pose(p);
      OrbitAngles a = pose_angles(p);
      CHECK(a.azimuth_deg == doctest::Approx(az).epsilon(1e-9));
      CHECK(a.elevation_deg == doctest::Approx(el).epsilon(1e-9));
      CHECK(a.distance == doctest::Approx(2.7).epsilon(1e-9));
      CHECK(p.Kmat.at(0, 0) == 48.0);
      CHECK(p.Kmat.at(0, 2) == 16.0);
    }
}

TEST_CASE("trajectories: length, spans, smoothness over 100 seeds") {
  TrajectorySpec spec;
  Rng rng(300);
  {
    Rng r0 = rng.child("traj", 0);
    auto poses = sample_trajectory(spec, r0, 32, 32);
    CHECK(poses.size() == 150);  // 5 s at 30 fps
  }
  for (int seed = 0; seed < 100; ++seed) {
    Rng r = rng.child("traj", static_cast<uint64_t>(seed));
    auto poses = sample_trajectory(spec, r, 32, 32);
    double prev_az = 0, prev_el = 0;
    for (size_t i = 0; i < poses.size(); ++i) {
      OrbitAngles a = pose_angles(poses[i]);
      CHECK(std::abs(a.azimuth_deg) <= 70.0);
      CHECK(std::abs(a.elevation_deg) <= 35.0);
      if (i > 0) {
        CHECK(std::abs(a.azimuth_deg - prev_az) <= 3.0);
        CHECK(std::abs(a.elevation_deg - prev_el) <= 3.0);
      }
      prev_az = a.azimuth_deg;
      prev_el = a.elevation_deg;
    }
  }

  TrajectorySpec bad;
  bad.azimuth_span = 80.0;
  CHECK_THROWS(sample_trajectory(bad, rng, 32, 32));
  bad = TrajectorySpec{};
  bad.distance = 3.0;
  CHECK_THROWS(sample_trajectory(bad, rng, 32, 32));
}

TEST_CASE("frontal render: eye spheres symmetric about the vertical centerline") {
  Rng rng(301);
  BlobIdentity id = sample_identity(rng);
  Tensor frame = render_multiview(id, {orbit_pose(0.0, 0.0, 2.7, 32, 32)}, 32, 32);

  // Eye pixels are near-black; gather their centroids on each half.
  double sl = 0, sr = 0;
  int nl = 0, nr = 0;
  for (int y = 0; y < 32; ++y)
    for (int x = 0; x < 32; ++x) {
      double r = 0.5 * (frame.at(0, 0, y, x) + 1.0);
      double g = 0.5 * (frame.at(0, 1, y, x) + 1.0);
      double b = 0.5 * (frame.at(0, 2, y, x) + 1.0);
      if (r < 0.12 && g < 0.12 && b < 0.12 && y < 16) {  // eyes sit above center
        if (x < 16) {
          sl += x + 0.5;
          ++nl;
        } else {
          sr += x + 0.5;
          ++nr;
        }
      }
    }
  REQUIRE(nl > 0);
  REQUIRE(nr > 0);
  double left_off = 16.0 - sl / nl;
  double right_off = sr / nr - 16.0;
  CHECK(std::abs(left_off - right_off) <= 1.0);
}

TEST_CASE("azimuth sign matters: +30 and -30 degree renders differ") {
  Rng rng(302);
  BlobIdentity id = sample_identity(rng);
  Tensor plus = render_multiview(id, {orbit_pose(30.0, 0.0, 2.7, 32, 32)}, 32, 32);
  Tensor minus = render_multiview(id, {orbit_pose(-30.0, 0.0, 2.7, 32, 32)}, 32, 32);
  double mean_abs = 0;
  double max_abs = 0;
  for (size_t i = 0; i < plus.data.size(); ++i) {
    double d = std::abs(plus.data[i] - minus.data[i]);
    mean_abs += d;
    max_abs = std::max(max_abs, d);
  }
  mean_abs /= static_cast<double>(plus.data.size());
  // The blob covers only part of the frame, so the mean difference is modest
  // even when the views are clearly distinct; the max catches feature motion.
  CHECK(mean_abs > 0.02);
  CHECK(max_abs > 0.5);
}

TEST_CASE("projection oracle: nose centroid matches the closed form within 1 pixel") {
  Rng rng(303);
  BlobIdentity id = sample_identity(rng);
  for (double az : {-40.0, -10.0, 0.0, 25.0, 55.0}) {
    CameraPose pose = orbit_pose(az, 0.0, 2.7, 32, 32);
    Tensor frame = render_multiview(id, {pose}, 32, 32);
    // Closed-form projected nose center.
    const double phi = az * M_PI / 180.0;
    const double r_n = 0.52;
    const double expected_u =
        16.0 - 48.0 * r_n * std::sin(phi) / (2.7 - r_n * std::cos(phi));
    // Measured nose centroid via palette classification.
    double su = 0;
    int count = 0;
    for (int y = 0; y < 32; ++y)
      for (int x = 0; x < 32; ++x) {
        double r = 0.5 * (frame.at(0, 0, y, x) + 1.0);
        double g = 0.5 * (frame.at(0, 1, y, x) + 1.0);
        double b = 0.5 * (frame.at(0, 2, y, x) + 1.0);
        double d = (r - 0.95) * (r - 0.95) + (g - 0.10) * (g - 0.10) + (b - 0.10) * (b - 0.10);
        if (d < 0.05) {
          su += x + 0.5;
          ++count;
        }
      }
    REQUIRE(count > 0);
    CHECK(std::abs(su / count - expected_u) <= 1.0);
  }
}

TEST_CASE("azimuth recoverability within 5 degrees") {
  Rng rng(304);
  double worst = 0;
  for (int trial = 0; trial < 4; ++trial) {
    BlobIdentity id = sample_identity(rng);
    double body[3] = {id.color_r, id.color_g, id.color_b};
    for (double az = -60.0; az <= 60.0; az += 15.0) {
      CameraPose pose = orbit_pose(az, 0.0, 2.7, 32, 32);
      Tensor frame = render_multiview(id, {pose}, 32, 32);
      Tensor one({3, 32, 32});
      std::copy_n(frame.data.begin(), one.data.size(), one.data.begin());
      double rec = recover_azimuth(one, pose.Kmat, 2.7, 0.0, body);
      worst = std::max(worst, std::abs(rec - az));
    }
  }
  CHECK(worst <= 5.0);
}

TEST_CASE("camera inside the blob rejected; determinism") {
  Rng rng(305);
  BlobIdentity id = sample_identity(rng);
  CameraPose close = orbit_pose(0.0, 0.0, 2.7, 32, 32);
  // Rewrite the translation so the camera sits at distance 0.4.
  for (int i = 0; i < 3; ++i) close.E.at(i, 3) *= 0.4 / 2.7;
  CHECK_THROWS(render_multiview(id, {close}, 32, 32));

  Tensor f1 = render_multiview(id, {orbit_pose(12.0, -8.0, 2.7, 32, 32)}, 32, 32);
  Tensor f2 = render_multiview(id, {orbit_pose(12.0, -8.0, 2.7, 32, 32)}, 32, 32);
  CHECK(f1.bit_equal(f2));
}
