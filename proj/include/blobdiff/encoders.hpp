#pragma once

#include <string>
#include <vector>

#include "blobdiff/attention.hpp"
#include "blobdiff/params.hpp"
#include "blobdiff/tensor.hpp"

namespace blobdiff {

// Token widths for the conditioning streams. Toy defaults; the full-scale
// reference values live in configs for documentation only.
struct EncoderConfig {
  int d_id = 8;       // identity embedding width
  int L_id = 4;       // identity tokens
  int d_a = 16;       // per-frame audio feature width
  int L_a = 1;        // audio tokens per frame
  int L_c = 1;        // camera tokens per frame
  int d_model = 64;   // token channel width shared by all streams
  int hidden = 32;    // bottleneck of the two-layer projections
  int audio_window = 5;
};

struct CondEncoderParams {
  ag::Var id_w1, id_b1, id_w2, id_b2;
  ag::Var audio_w1, audio_b1, audio_w2, audio_b2;
  ag::Var camera_w1, camera_b1, camera_w2, camera_b2;
};

CondEncoderParams make_cond_encoder_params(ParamStore& ps, const EncoderConfig& cfg,
                                           bool audio, bool camera, Rng& rng);

// v (unit-normalized, [d_id]) -> [L_id, d_model] tokens. Rejects off-norm v.
ag::Var encode_identity(const Tensor& v, const CondEncoderParams& p, const EncoderConfig& cfg);

// Per-frame window of the raw articulation signal, its first differences and
// low-order cosine-basis coefficients, concatenated to d_a values. Frame i
// depends only on signal values within window/2 of i (edge replication).
Tensor synth_audio_features(const std::vector<double>& signal, int window, int d_a);

// Two affine layers with SiLU between; outputs [F, L, d_model] token groups.
ag::Var project_audio(const Tensor& features, const CondEncoderParams& p,
                      const EncoderConfig& cfg);
ag::Var project_camera(const Tensor& cvecs, const CondEncoderParams& p,
                       const EncoderConfig& cfg);

// ---- camera poses ----

struct CameraPose {
  Tensor E;     // [4,4] extrinsics, rotation in SO(3), last row 0 0 0 1
  Tensor Kmat;  // [3,3] intrinsics, upper triangular, positive diagonal
};

void validate_pose(const CameraPose& p);

// Row-major E (16) then row-major Kmat (9); the 25-value conditioning layout.
Tensor flatten_camera(const CameraPose& p);
CameraPose unflatten_camera(const Tensor& c);

// Slerp on the rotation, linear on translation and intrinsics. Endpoints
// reproduced exactly; rejects near-antipodal rotations.
std::vector<CameraPose> interpolate_cameras(const CameraPose& start, const CameraPose& end,
                                            int steps);

// Rotation helpers shared with the 3-D world.
Tensor rotation_to_quaternion(const Tensor& R);   // [3,3] -> [4] (w,x,y,z), unit
Tensor quaternion_to_rotation(const Tensor& q);   // [4] -> [3,3]

}  // namespace blobdiff
