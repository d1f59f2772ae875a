#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "blobdiff/params.hpp"
#include "blobdiff/rng.hpp"
#include "blobdiff/serialize.hpp"
#include "blobdiff/tensor.hpp"

namespace blobdiff {

// Pearson correlation; empty when either series is (numerically) constant.
std::optional<double> pearson(const std::vector<double>& a, const std::vector<double>& b);

struct LipSyncResult {
  bool applicable = false;
  double r = 0;  // best correlation over the lag search
  int lag = 0;   // signal shift (frames) at the best correlation
};

// Recovers per-frame aperture from the mouth crop (negated mean luminance of
// the region) and correlates it with the driving signal, searching shifts of
// up to max_lag frames either way and reporting the maximum.
LipSyncResult lip_sync_score(const Tensor& frames, const Tensor& mouth_regions,
                             const std::vector<double>& signal, int max_lag = 2);

// Variant for clips without region metadata (model output): the mouth is
// located per frame by the pose-recovery oracle below.
LipSyncResult lip_sync_score(const Tensor& frames, const std::vector<double>& signal,
                             int max_lag = 2);

// ---------------------------------------------------------------------------
// Pose recovery from pixels. Center: intensity centroid of the
// above-background mass. Rotation: principal axis of the dark eye pixels in
// the upper half of the blob; valid for in-plane rotations within roughly
// +-30 degrees, which covers the synthesized head motion. Frames without a
// detectable eye pair report rotation 0.

struct PoseTrack {
  std::vector<double> cx, cy, rot;  // pixels, pixels, radians
};

PoseTrack recover_pose_track(const Tensor& frames);  // [F,3,h,w]

struct PoseStd {
  double center = 0;  // sqrt(var(cx) + var(cy)), pixels
  double rot = 0;     // std of rotation, radians
};

PoseStd pose_std(const PoseTrack& track);

// Mouth-region table [F,4] (cx, cy, half_w, half_h) inferred from the
// recovered pose and blob size, for clips that carry no render metadata.
Tensor locate_mouth_regions(const Tensor& frames);

// ---------------------------------------------------------------------------
// Identity probe: a small convolutional regressor from a frame to the
// identity embedding, trained once on labeled renders and then frozen. It
// stands in for the pretrained face-recognition embedder used to score
// identity preservation.

struct IdentityProbe {
  ParamStore params;  // names under "probe."
  int side = 32;
  int d_id = 8;
  int width = 16;
  bool frozen = false;
};

IdentityProbe make_identity_probe(Rng& rng, int side, int d_id = 8, int width = 16);

// [F,3,S,S] -> [F,d_id]; each row normalized to unit length. Frames are
// translation-aligned (blob centroid to frame center) before the network,
// mirroring the alignment step in front of a real identity embedder.
Tensor probe_embed(const IdentityProbe& probe, const Tensor& frames);

struct ProbeTrainConfig {
  int identities = 240;        // labeled identities in the pool
  int frames_per_identity = 3; // pose/aperture variants per identity
  int steps = 700;
  int batch = 48;
  double lr = 3e-3;
  uint64_t seed = 1;
  int side = 32;
  int d_id = 8;
  int width = 16;
};

// Renders its own labeled pool and trains the probe to regress embeddings;
// returns it frozen. Throws if the loss turns non-finite.
IdentityProbe train_identity_probe(const ProbeTrainConfig& cfg,
                                   std::vector<double>* losses = nullptr);

double cosine(const Tensor& a, const Tensor& b);

// Mean cosine between each frame's probe embedding and the target embedding.
double identity_similarity(const IdentityProbe& probe, const Tensor& frames,
                           const Tensor& target_embedding);

void save_identity_probe(const IdentityProbe& probe, const std::string& path);
IdentityProbe load_identity_probe(const std::string& path);

// ---------------------------------------------------------------------------
// Paired image metrics for novel-view reconstruction.

inline constexpr double kPsnrCap = 99.0;  // reported for bit-identical inputs

// Any matching shapes; MSE over all elements, peak 2 for [-1,1] pixels.
double psnr(const Tensor& a, const Tensor& b, double peak = 2.0);

// Structural similarity with the standard 11x11 Gaussian window (sigma 1.5)
// and constants C1=(0.01 peak)^2, C2=(0.03 peak)^2, averaged over all fully
// supported window positions and all leading dimensions. Needs h,w >= 11.
double ssim(const Tensor& a, const Tensor& b, double peak = 2.0);

struct ViewMetrics {
  double psnr = 0, ssim = 0;
};

// Per-frame PSNR/SSIM of [F,C,h,w] stacks, averaged over frames.
ViewMetrics view_metrics(const Tensor& generated, const Tensor& ground_truth,
                         double peak = 2.0);

// ---------------------------------------------------------------------------
// Structured evaluation report.

struct EvalReport {
  std::string dataset_id;
  std::string config_hash;
  json metrics = json::object();   // metric name -> scalar (or string flag)
  json per_clip = json::array();   // one object per clip
};

json to_json(const EvalReport& report);
EvalReport eval_report_from_json(const json& doc);
void save_eval_report(const std::string& path, const EvalReport& report);
EvalReport load_eval_report(const std::string& path);

// Human-readable metric-by-metric diff, one row per metric with the values
// from both reports and the delta.
std::string compare_reports(const EvalReport& a, const EvalReport& b);

}  // namespace blobdiff
