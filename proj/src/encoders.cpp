#include "blobdiff/encoders.hpp"

#include <cmath>
#include <stdexcept>

namespace blobdiff {

namespace {

ag::Var create_or_get(ParamStore& ps, const std::string& name, std::vector<int> shape,
                      double stddev, Rng& rng) {
  return ensure_param(ps, name, std::move(shape), stddev, rng);
}

// x [N, Din] -> silu(x W1 + b1) W2 + b2, reshaped to [N, L, d_model].
ag::Var two_layer_tokens(const ag::Var& x, const ag::Var& w1, const ag::Var& b1,
                         const ag::Var& w2, const ag::Var& b2, int L, int d_model) {
  ag::Var h = ag::silu(ag::linear(x, w1, b1));
  ag::Var out = ag::linear(h, w2, b2);
  return ag::reshape(out, {x.dim(0), L, d_model});
}

}  // namespace

CondEncoderParams make_cond_encoder_params(ParamStore& ps, const EncoderConfig& cfg,
                                           bool audio, bool camera, Rng& rng) {
  CondEncoderParams p;
  auto make_pair = [&](const std::string& prefix, int din, int L) {
    double s1 = 1.0 / std::sqrt(static_cast<double>(din));
    double s2 = 1.0 / std::sqrt(static_cast<double>(cfg.hidden));
    return std::array<ag::Var, 4>{
        create_or_get(ps, prefix + ".w1", {din, cfg.hidden}, s1, rng),
        create_or_get(ps, prefix + ".b1", {cfg.hidden}, 0.0, rng),
        create_or_get(ps, prefix + ".w2", {cfg.hidden, L * cfg.d_model}, s2, rng),
        create_or_get(ps, prefix + ".b2", {L * cfg.d_model}, 0.0, rng)};
  };
  auto id = make_pair("cond.id", cfg.d_id, cfg.L_id);
  p.id_w1 = id[0];
  p.id_b1 = id[1];
  p.id_w2 = id[2];
  p.id_b2 = id[3];
  if (audio) {
    auto a = make_pair("cond.audio", cfg.d_a, cfg.L_a);
    p.audio_w1 = a[0];
    p.audio_b1 = a[1];
    p.audio_w2 = a[2];
    p.audio_b2 = a[3];
  }
  if (camera) {
    auto c = make_pair("cond.camera", 25, cfg.L_c);
    p.camera_w1 = c[0];
    p.camera_b1 = c[1];
    p.camera_w2 = c[2];
    p.camera_b2 = c[3];
  }
  return p;
}

ag::Var encode_identity(const Tensor& v, const CondEncoderParams& p, const EncoderConfig& cfg) {
  if (v.rank() != 1 || v.shape[0] != cfg.d_id)
    throw std::invalid_argument("encode_identity: expected [d_id] vector");
  double norm = 0.0;
  for (double x : v.data) norm += x * x;
  if (std::abs(std::sqrt(norm) - 1.0) > 1e-3)
    throw std::invalid_argument("encode_identity: embedding must be unit-normalized");
  ag::Var row = ag::constant(Tensor({1, cfg.d_id}, v.data));
  ag::Var tokens =
      two_layer_tokens(row, p.id_w1, p.id_b1, p.id_w2, p.id_b2, cfg.L_id, cfg.d_model);
  return ag::reshape(tokens, {cfg.L_id, cfg.d_model});
}

Tensor synth_audio_features(const std::vector<double>& signal, int window, int d_a) {
  if (signal.empty()) throw std::invalid_argument("synth_audio_features: empty signal");
  if (window < 1 || window % 2 == 0)
    throw std::invalid_argument("synth_audio_features: window must be odd and positive");
  int F = static_cast<int>(signal.size());
  int half = window / 2;
  int n_diff = window - 1;
  int n_cos = d_a - window - n_diff;
  if (n_cos < 1)
    throw std::invalid_argument("synth_audio_features: d_a too small for window");
  auto at = [&](int i) {
    // Edge replication keeps the receptive field exactly the declared window.
    return signal[static_cast<size_t>(std::clamp(i, 0, F - 1))];
  };
  Tensor out({F, d_a});
  for (int i = 0; i < F; ++i) {
    int col = 0;
    for (int j = -half; j <= half; ++j) out.at(i, col++) = at(i + j);
    for (int j = -half; j < half; ++j) out.at(i, col++) = at(i + j + 1) - at(i + j);
    for (int k = 0; k < n_cos; ++k) {
      double coef = 0.0;
      if (window == 1) {
        coef = (k == 0) ? at(i) : 0.0;
      } else {
        for (int j = 0; j < window; ++j)
          coef += at(i - half + j) * std::cos(M_PI * k * (j + 0.5) / window);
        coef /= window;
      }
      out.at(i, col++) = coef;
    }
  }
  return out;
}

ag::Var project_audio(const Tensor& features, const CondEncoderParams& p,
                      const EncoderConfig& cfg) {
  if (!p.audio_w1.defined()) throw std::runtime_error("project_audio: stream not built");
  if (features.rank() != 2 || features.shape[1] != cfg.d_a)
    throw std::invalid_argument("project_audio: expected [F, d_a]");
  return two_layer_tokens(ag::constant(features), p.audio_w1, p.audio_b1, p.audio_w2,
                          p.audio_b2, cfg.L_a, cfg.d_model);
}

ag::Var project_camera(const Tensor& cvecs, const CondEncoderParams& p,
                       const EncoderConfig& cfg) {
  if (!p.camera_w1.defined()) throw std::runtime_error("project_camera: stream not built");
  if (cvecs.rank() != 2 || cvecs.shape[1] != 25)
    throw std::invalid_argument("project_camera: expected [F, 25]");
  return two_layer_tokens(ag::constant(cvecs), p.camera_w1, p.camera_b1, p.camera_w2,
                          p.camera_b2, cfg.L_c, cfg.d_model);
}

void validate_pose(const CameraPose& p) {
  if (p.E.shape != std::vector<int>{4, 4} || p.Kmat.shape != std::vector<int>{3, 3})
    throw std::invalid_argument("CameraPose: bad matrix shapes");
  // Last row of E.
  for (int j = 0; j < 4; ++j) {
    double want = (j == 3) ? 1.0 : 0.0;
    if (std::abs(p.E.at(3, j) - want) > 1e-9)
      throw std::invalid_argument("CameraPose: last extrinsics row must be 0 0 0 1");
  }
  // Rotation orthonormality and determinant.
  double rtr[3][3] = {};
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j)
      for (int k = 0; k < 3; ++k) rtr[i][j] += p.E.at(k, i) * p.E.at(k, j);
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) {
      double want = (i == j) ? 1.0 : 0.0;
      if (std::abs(rtr[i][j] - want) > 1e-5)
        throw std::invalid_argument("CameraPose: rotation not orthonormal");
    }
  double det = p.E.at(0, 0) * (p.E.at(1, 1) * p.E.at(2, 2) - p.E.at(1, 2) * p.E.at(2, 1)) -
               p.E.at(0, 1) * (p.E.at(1, 0) * p.E.at(2, 2) - p.E.at(1, 2) * p.E.at(2, 0)) +
               p.E.at(0, 2) * (p.E.at(1, 0) * p.E.at(2, 1) - p.E.at(1, 1) * p.E.at(2, 0));
  if (std::abs(det - 1.0) > 1e-5)
    throw std::invalid_argument("CameraPose: rotation determinant must be 1");
  // Intrinsics upper triangular with positive diagonal.
  if (p.Kmat.at(1, 0) != 0.0 || p.Kmat.at(2, 0) != 0.0 || p.Kmat.at(2, 1) != 0.0)
    throw std::invalid_argument("CameraPose: intrinsics must be upper triangular");
  for (int i = 0; i < 3; ++i)
    if (p.Kmat.at(i, i) <= 0.0)
      throw std::invalid_argument("CameraPose: intrinsics diagonal must be positive");
}

Tensor flatten_camera(const CameraPose& p) {
  validate_pose(p);
  Tensor out({25});
  for (int i = 0; i < 16; ++i) out[i] = p.E.data[static_cast<size_t>(i)];
  for (int i = 0; i < 9; ++i) out[16 + i] = p.Kmat.data[static_cast<size_t>(i)];
  return out;
}

CameraPose unflatten_camera(const Tensor& c) {
  if (c.rank() != 1 || c.shape[0] != 25)
    throw std::invalid_argument("unflatten_camera: expected 25 values");
  CameraPose p{Tensor({4, 4}), Tensor({3, 3})};
  for (int i = 0; i < 16; ++i) p.E.data[static_cast<size_t>(i)] = c[i];
  for (int i = 0; i < 9; ++i) p.Kmat.data[static_cast<size_t>(i)] = c[16 + i];
  validate_pose(p);
  return p;
}

Tensor rotation_to_quaternion(const Tensor& R) {
  double w, x, y, z;
  double trace = R.at(0, 0) + R.at(1, 1) + R.at(2, 2);
  if (trace > 0.0) {
    double s = std::sqrt(trace + 1.0) * 2.0;
    w = 0.25 * s;
    x = (R.at(2, 1) - R.at(1, 2)) / s;
    y = (R.at(0, 2) - R.at(2, 0)) / s;
    z = (R.at(1, 0) - R.at(0, 1)) / s;
  } else if (R.at(0, 0) > R.at(1, 1) && R.at(0, 0) > R.at(2, 2)) {
    double s = std::sqrt(1.0 + R.at(0, 0) - R.at(1, 1) - R.at(2, 2)) * 2.0;
    w = (R.at(2, 1) - R.at(1, 2)) / s;
    x = 0.25 * s;
    y = (R.at(0, 1) + R.at(1, 0)) / s;
    z = (R.at(0, 2) + R.at(2, 0)) / s;
  } else if (R.at(1, 1) > R.at(2, 2)) {
    double s = std::sqrt(1.0 + R.at(1, 1) - R.at(0, 0) - R.at(2, 2)) * 2.0;
    w = (R.at(0, 2) - R.at(2, 0)) / s;
    x = (R.at(0, 1) + R.at(1, 0)) / s;
    y = 0.25 * s;
    z = (R.at(1, 2) + R.at(2, 1)) / s;
  } else {
    double s = std::sqrt(1.0 + R.at(2, 2) - R.at(0, 0) - R.at(1, 1)) * 2.0;
    w = (R.at(1, 0) - R.at(0, 1)) / s;
    x = (R.at(0, 2) + R.at(2, 0)) / s;
    y = (R.at(1, 2) + R.at(2, 1)) / s;
    z = 0.25 * s;
  }
  double n = std::sqrt(w * w + x * x + y * y + z * z);
  return Tensor({4}, {w / n, x / n, y / n, z / n});
}

Tensor quaternion_to_rotation(const Tensor& q) {
  double w = q[0], x = q[1], y = q[2], z = q[3];
  Tensor R({3, 3});
  R.at(0, 0) = 1 - 2 * (y * y + z * z);
  R.at(0, 1) = 2 * (x * y - w * z);
  R.at(0, 2) = 2 * (x * z + w * y);
  R.at(1, 0) = 2 * (x * y + w * z);
  R.at(1, 1) = 1 - 2 * (x * x + z * z);
  R.at(1, 2) = 2 * (y * z - w * x);
  R.at(2, 0) = 2 * (x * z - w * y);
  R.at(2, 1) = 2 * (y * z + w * x);
  R.at(2, 2) = 1 - 2 * (x * x + y * y);
  return R;
}

std::vector<CameraPose> interpolate_cameras(const CameraPose& start, const CameraPose& end,
                                            int steps) {
  if (steps < 2) throw std::invalid_argument("interpolate_cameras: steps must be >= 2");
  validate_pose(start);
  validate_pose(end);

  if (start.E.bit_equal(end.E) && start.Kmat.bit_equal(end.Kmat))
    return std::vector<CameraPose>(static_cast<size_t>(steps), start);

  Tensor Rs({3, 3}), Re({3, 3});
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) {
      Rs.at(i, j) = start.E.at(i, j);
      Re.at(i, j) = end.E.at(i, j);
    }
  Tensor qa = rotation_to_quaternion(Rs);
  Tensor qb = rotation_to_quaternion(Re);
  double dot = 0.0;
  for (int i = 0; i < 4; ++i) dot += qa[i] * qb[i];
  if (dot < 0.0) {
    for (int i = 0; i < 4; ++i) qb[i] = -qb[i];
    dot = -dot;
  }
  if (dot < 1e-6)
    throw std::invalid_argument("interpolate_cameras: antipodal rotations are ambiguous");

  std::vector<CameraPose> out;
  out.reserve(static_cast<size_t>(steps));
  for (int s = 0; s < steps; ++s) {
    double u = static_cast<double>(s) / (steps - 1);
    CameraPose p{Tensor({4, 4}), Tensor({3, 3})};
    if (s == 0) {
      p.E = start.E;
      p.Kmat = start.Kmat;
      out.push_back(std::move(p));
      continue;
    }
    if (s == steps - 1) {
      p.E = end.E;
      p.Kmat = end.Kmat;
      out.push_back(std::move(p));
      continue;
    }
    Tensor q({4});
    if (dot > 1.0 - 1e-12) {
      // Nearly identical rotations: fall back to nlerp.
      double n = 0.0;
      for (int i = 0; i < 4; ++i) {
        q[i] = (1 - u) * qa[i] + u * qb[i];
        n += q[i] * q[i];
      }
      n = std::sqrt(n);
      for (int i = 0; i < 4; ++i) q[i] /= n;
    } else {
      double theta = std::acos(std::clamp(dot, -1.0, 1.0));
      double sa = std::sin((1 - u) * theta) / std::sin(theta);
      double sb = std::sin(u * theta) / std::sin(theta);
      for (int i = 0; i < 4; ++i) q[i] = sa * qa[i] + sb * qb[i];
    }
    Tensor R = quaternion_to_rotation(q);
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j) p.E.at(i, j) = R.at(i, j);
    for (int i = 0; i < 3; ++i)
      p.E.at(i, 3) = (1 - u) * start.E.at(i, 3) + u * end.E.at(i, 3);
    p.E.at(3, 3) = 1.0;
    for (int i = 0; i < 9; ++i)
      p.Kmat.data[static_cast<size_t>(i)] =
          (1 - u) * start.Kmat.data[static_cast<size_t>(i)] +
          u * end.Kmat.data[static_cast<size_t>(i)];
    validate_pose(p);
    out.push_back(std::move(p));
  }
  return out;
}

}  // namespace blobdiff
