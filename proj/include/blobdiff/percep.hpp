#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "blobdiff/autograd.hpp"
#include "blobdiff/params.hpp"
#include "blobdiff/rng.hpp"

namespace blobdiff {

// Per-frame mouth crop geometry. The values come from the renderer's own
// metadata rather than a landmark detector: the generator knows exactly where
// it drew the mouth.
struct MouthLandmarks {
  Tensor centers;        // [F,2] (x, y) in pixel coordinates
  double half_size = 0;  // square crop half-extent in pixels
};

// Builds landmarks from a [F,4] mouth-region table (cx, cy, half_w, half_h):
// centers copied per frame, half_size = max extent over the clip plus a
// one-pixel margin, so one square window covers the mouth in every frame.
MouthLandmarks landmarks_from_regions(const Tensor& mouth_regions);

// Differentiable mouth crop: bilinear out_size x out_size resample around each
// frame's centre, then grayscale (0.299, 0.587, 0.114). [F,3,h,w] -> [F,1,o,o].
ag::Var crop_mouth(const ag::Var& frames, const MouthLandmarks& lm, int out_size);

// Small convolutional aperture regressor over grayscale mouth crops. After
// pretraining it is frozen; its penultimate feature layer is the space in
// which generated and real mouths are compared.
struct ArticulationEncoder {
  ParamStore params;  // names under "artenc."
  int crop = 16;      // input side length
  int width = 32;     // feature width
  bool frozen = false;
};

ArticulationEncoder make_articulation_encoder(Rng& rng, int crop = 16, int width = 32);

// [F,1,S,S] crops -> [F,width] penultimate features.
ag::Var articulation_features(const ArticulationEncoder& enc, const ag::Var& crops);
// [F,1,S,S] crops -> [F] predicted aperture in (0,1).
ag::Var articulation_predict(const ArticulationEncoder& enc, const ag::Var& crops);

struct PretrainConfig {
  int steps = 400;
  int batch = 64;
  double lr = 3e-3;
  uint64_t seed = 1;
  int crop = 16;
  int width = 32;
};

struct PretrainStats {
  std::vector<double> losses;  // per-step training MSE
};

// Renders n single frames with i.i.d. apertures, random identities and poses,
// and crops each mouth via the renderer's geometry. crops: [n,1,crop,crop].
void make_articulation_samples(int n, int h, int w, int crop, uint64_t seed, Tensor* crops,
                               std::vector<double>* labels);

// Trains the regressor on labeled crops and returns it frozen. Throws if the
// training loss turns non-finite.
ArticulationEncoder pretrain_articulation_encoder(const Tensor& crops,
                                                  const std::vector<double>& labels,
                                                  const PretrainConfig& cfg,
                                                  PretrainStats* stats = nullptr);

// Mean absolute prediction error over a labeled crop set.
double articulation_mae(const ArticulationEncoder& enc, const Tensor& crops,
                        const std::vector<double>& labels);

void save_articulation_encoder(const ArticulationEncoder& enc, const std::string& path);
ArticulationEncoder load_articulation_encoder(const std::string& path);

// Feature-space MSE between mouth crops of a real clip and a generated clip.
// The real side enters as plain data, so gradients flow only into the
// generated frames; the encoder must be frozen.
ag::Var lip_reading_loss(const Tensor& real_frames, const ag::Var& gen_frames,
                         const MouthLandmarks& lm, const ArticulationEncoder& enc);

// Warmup gating for the articulation term: it joins the objective once
// training passes the given fraction of total steps (both weights 1.0).
struct CompositeLossSchedule {
  int total_steps = 0;
  double warmup_frac = 0.5;
  double diffusion_weight = 1.0;
  double lip_weight = 1.0;

  int warmup_steps() const;
  bool lip_active(int step) const;  // step >= warmup_steps()
};

// L = diffusion_weight * diffusion + lip_weight * lip once active. Before the
// warmup point the lip term is ignored and may be an undefined Var.
ag::Var composite_loss(const ag::Var& diffusion_loss, const ag::Var& lip_loss, int step,
                       const CompositeLossSchedule& sched);

}  // namespace blobdiff
