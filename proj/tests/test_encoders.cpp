#include <doctest.h>

#include <cmath>

#include "blobdiff/encoders.hpp"
#include "blobdiff/rng.hpp"
#include "testing.hpp"

using namespace blobdiff;
using testing::gradcheck;
using testing::random_tensor;

namespace {

Tensor unit_vec(Rng& rng, int d) {
  Tensor v({d});
  rng.fill_normal(v);
  double n = 0;
  for (double x : v.data) n += x * x;
  n = std::sqrt(n);
  for (auto& x : v.data) x /= n;
  return v;
}

CameraPose make_pose(double azimuth_deg, double tx, double ty, double tz) {
  // Rotation about the y axis.
  double a = azimuth_deg * M_PI / 180.0;
  CameraPose p{Tensor({4, 4}), Tensor({3, 3})};
  p.E.at(0, 0) = std::cos(a);
  p.E.at(0, 2) = std::sin(a);
  p.E.at(1, 1) = 1.0;
  p.E.at(2, 0) = -std::sin(a);
  p.E.at(2, 2) = std::cos(a);
  p.E.at(0, 3) = tx;
  p.E.at(1, 3) = ty;
  p.E.at(2, 3) = tz;
  p.E.at(3, 3) = 1.0;
  p.Kmat.at(0, 0) = 24.0;
  p.Kmat.at(1, 1) = 24.0;
  p.Kmat.at(2, 2) = 1.0;
  p.Kmat.at(0, 2) = 16.0;
  p.Kmat.at(1, 2) = 16.0;
  return p;
}

}  // namespace

TEST_CASE("encode_identity: shape contract, determinism, norm rejection") {
  Rng rng(41);
  ParamStore ps;
  Rng prng = rng.child("params");
  EncoderConfig cfg;
  auto p = make_cond_encoder_params(ps, cfg, false, false, prng);

  Tensor v = unit_vec(rng, cfg.d_id);
  auto t1 = encode_identity(v, p, cfg);
  auto t2 = encode_identity(v, p, cfg);
  CHECK(t1.shape() == std::vector<int>{4, 64});
  CHECK(t1.val().bit_equal(t2.val()));

  Tensor off = v;
  for (auto& x : off.data) x *= 1.5;
  CHECK_THROWS(encode_identity(off, p, cfg));
  CHECK_THROWS(encode_identity(Tensor({3}), p, cfg));

  // Different embeddings produce different tokens.
  Tensor v2 = unit_vec(rng, cfg.d_id);
  auto t3 = encode_identity(v2, p, cfg);
  CHECK(t1.val().max_abs_diff(t3.val()) > 1e-8);
}

TEST_CASE("synth_audio_features: locality, constant signal, degenerate window") {
  std::vector<double> constant(20, 0.5);
  Tensor f = synth_audio_features(constant, 5, 16);
  CHECK(f.shape == std::vector<int>{20, 16});
  // All frames identical; difference channels (cols 5..8) exactly zero.
  for (int i = 1; i < 20; ++i)
    for (int c = 0; c < 16; ++c) CHECK(f.at(i, c) == f.at(0, c));
  for (int c = 5; c < 9; ++c) CHECK(f.at(3, c) == 0.0);

  // Locality: perturbing a_j changes only frames within window/2 of j.
  Rng rng(42);
  std::vector<double> sig(30);
  for (auto& s : sig) s = rng.uniform();
  Tensor base = synth_audio_features(sig, 5, 16);
  int j = 14;
  auto pert = sig;
  pert[static_cast<size_t>(j)] += 0.25;
  Tensor changed = synth_audio_features(pert, 5, 16);
  for (int i = 0; i < 30; ++i) {
    double diff = 0;
    for (int c = 0; c < 16; ++c) diff = std::max(diff, std::abs(changed.at(i, c) - base.at(i, c)));
    if (std::abs(i - j) <= 2)
      CHECK(diff > 0.0);
    else
      CHECK(diff == 0.0);
  }

  // window = 1: feature = (a_i, dc coefficient a_i, zeros).
  Tensor w1 = synth_audio_features(sig, 1, 8);
  for (int i = 0; i < 30; ++i) {
    CHECK(w1.at(i, 0) == sig[static_cast<size_t>(i)]);
    CHECK(w1.at(i, 1) == sig[static_cast<size_t>(i)]);
    for (int c = 2; c < 8; ++c) CHECK(w1.at(i, c) == 0.0);
  }

  CHECK_THROWS(synth_audio_features({}, 5, 16));
  CHECK_THROWS(synth_audio_features(sig, 4, 16));
  CHECK_THROWS(synth_audio_features(sig, 5, 9));
}

TEST_CASE("audio and camera projections: zero weights, determinism, gradcheck") {
  Rng rng(43);
  ParamStore ps;
  Rng prng = rng.child("params");
  EncoderConfig cfg;
  auto p = make_cond_encoder_params(ps, cfg, true, true, prng);

  Tensor feats = random_tensor(rng, {3, cfg.d_a});
  auto tokens = project_audio(feats, p, cfg);
  CHECK(tokens.shape() == std::vector<int>{3, 1, 64});
  CHECK(tokens.val().bit_equal(project_audio(feats, p, cfg).val()));

  // Zero final layer -> zero tokens.
  Tensor w2 = p.audio_w2.val();
  p.audio_w2.val() = Tensor::zeros(w2.shape);
  CHECK(project_audio(feats, p, cfg).val().max_abs() == 0.0);
  p.audio_w2.val() = w2;

  Tensor cvecs({2, 25});
  {
    Tensor f0 = flatten_camera(make_pose(10.0, 0.1, 0.0, 2.7));
    Tensor f1 = flatten_camera(make_pose(-5.0, 0.0, 0.2, 2.7));
    for (int i = 0; i < 25; ++i) {
      cvecs.at(0, i) = f0[i];
      cvecs.at(1, i) = f1[i];
    }
  }
  CHECK(project_camera(cvecs, p, cfg).shape() == std::vector<int>{2, 1, 64});

  // Finite-difference gradients through both projections.
  auto build_audio = [&](const std::vector<ag::Var>& l) {
    CondEncoderParams q = p;
    q.audio_w1 = l[0];
    q.audio_b1 = l[1];
    q.audio_w2 = l[2];
    q.audio_b2 = l[3];
    return ag::mean_all(ag::square(project_audio(feats, q, cfg)));
  };
  CHECK(gradcheck(build_audio,
                  {p.audio_w1.val(), p.audio_b1.val(), p.audio_w2.val(), p.audio_b2.val()}) <
        1e-3);
  auto build_camera = [&](const std::vector<ag::Var>& l) {
    CondEncoderParams q = p;
    q.camera_w1 = l[0];
    q.camera_b1 = l[1];
    q.camera_w2 = l[2];
    q.camera_b2 = l[3];
    return ag::mean_all(ag::square(project_camera(cvecs, q, cfg)));
  };
  CHECK(gradcheck(build_camera, {p.camera_w1.val(), p.camera_b1.val(), p.camera_w2.val(),
                                 p.camera_b2.val()}) < 1e-3);
}

TEST_CASE("flatten_camera: identity layout, round-trip, validation") {
  CameraPose ident{Tensor({4, 4}), Tensor({3, 3})};
  for (int i = 0; i < 4; ++i) ident.E.at(i, i) = 1.0;
  for (int i = 0; i < 3; ++i) ident.Kmat.at(i, i) = 1.0;
  Tensor flat = flatten_camera(ident);
  CHECK(flat.shape == std::vector<int>{25});
  for (int i = 0; i < 25; ++i) {
    bool is_one = i == 0 || i == 5 || i == 10 || i == 15 || i == 16 || i == 20 || i == 24;
    CHECK(flat[i] == (is_one ? 1.0 : 0.0));
  }

  CameraPose p = make_pose(33.0, 0.4, -0.2, 2.7);
  CameraPose q = unflatten_camera(flatten_camera(p));
  CHECK(q.E.bit_equal(p.E));
  CHECK(q.Kmat.bit_equal(p.Kmat));

  // Invalid poses rejected.
  CameraPose bad = make_pose(0.0, 0, 0, 0);
  bad.E.at(0, 0) = 2.0;
  CHECK_THROWS(flatten_camera(bad));
  CameraPose badK = make_pose(0.0, 0, 0, 0);
  badK.Kmat.at(1, 0) = 0.5;
  CHECK_THROWS(flatten_camera(badK));
  badK = make_pose(0.0, 0, 0, 0);
  badK.Kmat.at(1, 1) = -1.0;
  CHECK_THROWS(flatten_camera(badK));
}

TEST_CASE("interpolate_cameras: slerp oracle, orthonormality, endpoints") {
  CameraPose a = make_pose(0.0, 0.0, 0.0, 2.7);
  CameraPose b = make_pose(90.0, 1.0, 0.0, 2.7);

  auto seq = interpolate_cameras(a, b, 3);
  REQUIRE(seq.size() == 3);
  CHECK(seq.front().E.bit_equal(a.E));
  CHECK(seq.back().E.bit_equal(b.E));

  // Midpoint of a 90 degree azimuth rotation is the 45 degree rotation.
  CameraPose mid45 = make_pose(45.0, 0.5, 0.0, 2.7);
  CHECK(seq[1].E.max_abs_diff(mid45.E) < 1e-6);

  // start = end: constant sequence.
  auto constant = interpolate_cameras(a, a, 4);
  for (const auto& p : constant) CHECK(p.E.bit_equal(a.E));

  // All intermediates orthonormal (validate_pose already asserts; also spot
  // check numerically here).
  auto fine = interpolate_cameras(a, b, 10);
  for (const auto& p : fine) {
    for (int i = 0; i < 3; ++i) {
      double n = 0;
      for (int k = 0; k < 3; ++k) n += p.E.at(k, i) * p.E.at(k, i);
      CHECK(std::abs(n - 1.0) < 1e-6);
    }
  }

  // Antipodal rotations rejected (180 degrees about y).
  CameraPose anti = make_pose(180.0, 0.0, 0.0, 2.7);
  CHECK_THROWS(interpolate_cameras(a, anti, 3));
  CHECK_THROWS(interpolate_cameras(a, b, 1));
}

TEST_CASE("quaternion round-trip on random rotations") {
  Rng rng(44);
  for (int trial = 0; trial < 20; ++trial) {
    // Random rotation via random unit quaternion.
    Tensor q({4});
    rng.fill_normal(q);
    double n = 0;
    for (double x : q.data) n += x * x;
    n = std::sqrt(n);
    for (auto& x : q.data) x /= n;
    if (q[0] < 0)
      for (auto& x : q.data) x = -x;
    Tensor R = quaternion_to_rotation(q);
    Tensor q2 = rotation_to_quaternion(R);
    if (q2[0] < 0)
      for (auto& x : q2.data) x = -x;
    CHECK(q.max_abs_diff(q2) < 1e-9);
  }
}
