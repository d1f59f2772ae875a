#pragma once

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "blobdiff/schedule.hpp"
#include "blobdiff/serialize.hpp"
#include "blobdiff/unet.hpp"

namespace blobdiff {

enum class ContextSource { kGroundTruth, kModelEstimate };

// Clean frames carried over from the end of the preceding segment.
struct SegmentContext {
  Tensor frames;  // [n,3,s,s] in [-1,1]; default-constructed means no context
  ContextSource source = ContextSource::kGroundTruth;

  int size() const { return frames.rank() == 4 ? frames.shape[0] : 0; }
};

// A segment stacked behind its context along the frame axis.
struct ExtendedSegment {
  Tensor frames;                   // [n+N,3,s,s]
  std::vector<bool> context_mask;  // length n+N; true marks context positions
  int n = 0;
  int N = 0;
};

// Context frames occupy the first n positions, segment frames the rest.
// Temporal attention later spans the full n+N stack. Throws on shape
// disagreement or non-finite / out-of-range context values.
ExtendedSegment prepend_context(const Tensor& segment, const SegmentContext& ctx);

// Segment geometry: N generated frames conditioned on n carried-over frames.
struct SegmentSpec {
  int N = 16;
  int n = 2;
};

// One training video with its aligned per-frame driving signals.
struct VideoSample {
  Tensor frames;                      // [T,3,s,s] in [-1,1]
  Tensor id_embedding;                // [d_id], unit norm
  std::vector<double> audio;          // length T; drives the mouth
  std::optional<Tensor> camera_flat;  // [T,25] for camera-driven worlds
};

// Conditioning rows for video frames [start, start+count).
ConditioningBundle window_conditioning(const VideoSample& video, const EncoderConfig& enc,
                                       int start, int count);

// The denoising model as a callable: lets tests substitute oracles (e.g. a
// perfect noise predictor) for the full network. The input is a graph node so
// gradients can pass through it when context frames are not detached.
using DenoiseFn = std::function<ag::Var(const ag::Var& x, const std::vector<int>& t,
                                        const ConditioningBundle& conds,
                                        const ReferenceFeatures& ref)>;

DenoiseFn as_denoise_fn(const Denoiser& net);

// What the per-step randomness picked, kept for replay and reduction tests.
struct DrawRecord {
  int seg_start = 0;  // index of the first segment frame in the video
  int t = 0;          // diffusion step shared by the segment frames
  Tensor eps;         // [N,3,s,s] noise target
};

struct SegmentStepResult {
  ag::Var loss;            // scalar MSE over segment positions only
  ag::Var eps_hat_seg;     // [N,3,s,s] predicted noise at segment positions
  Tensor x_t;              // [N,3,s,s] noised segment frames
  DrawRecord draw;
  SegmentContext context;  // the clean context frames used
};

// Denoising loss for one segment conditioned on clean ground-truth context:
// picks a segment start, noises only the segment frames, and scores the
// prediction on those positions alone.
SegmentStepResult teacher_forcing_step(const Denoiser& net, const NoiseSchedule& sched,
                                       const VideoSample& video, const SegmentSpec& seg,
                                       const ReferenceFeatures& ref, Rng& rng);
SegmentStepResult teacher_forcing_step(const DenoiseFn& model, const EncoderConfig& enc,
                                       const NoiseSchedule& sched, const VideoSample& video,
                                       const SegmentSpec& seg, const ReferenceFeatures& ref,
                                       Rng& rng);

// Differentiable pixel-space estimate of the clean frames from a noise
// prediction: (x_t - sqrt(1-abar_t) eps_hat) / sqrt(abar_t). `clamp` bounds
// the values to [-1,1] (gradients stop on saturated pixels).
ag::Var estimate_x0_var(const Tensor& x_t, const ag::Var& eps_hat, int t,
                        const NoiseSchedule& s, bool clamp = false);

struct SegmentTrace {
  ContextSource context_source = ContextSource::kGroundTruth;
  int seg_start = 0;
  int t = 0;
  double loss = 0;
  Tensor eps_target;  // [N,3,s,s] the noise the segment was corrupted with
  Tensor eps_hat;     // [N,3,s,s] predicted noise (values)
  Tensor x0_est;      // [N,3,s,s] clamped clean-frame estimate (values)
};

struct RolloutResult {
  ag::Var total_loss;                 // mean of per-segment losses
  std::vector<SegmentTrace> segments; // exactly F entries
};

// F consecutive segments; the first conditions on ground-truth context, each
// later one on the clamped x0 estimate of its predecessor's last n frames.
// detach_context=true (the trained configuration) stops gradients at segment
// boundaries; false lets them flow through the estimates.
RolloutResult self_forcing_rollout(const Denoiser& net, const NoiseSchedule& sched,
                                   const VideoSample& video, int F, const SegmentSpec& seg,
                                   const ReferenceFeatures& ref, Rng& rng,
                                   bool detach_context = true);
RolloutResult self_forcing_rollout(const DenoiseFn& model, const EncoderConfig& enc,
                                   const NoiseSchedule& sched, const VideoSample& video, int F,
                                   const SegmentSpec& seg, const ReferenceFeatures& ref,
                                   Rng& rng, bool detach_context = true);

// Per-frame driving data for inference.
struct ConditioningTimeline {
  Tensor id_embedding;                // [d_id]
  std::vector<double> audio;          // length >= total_frames
  std::optional<Tensor> camera_flat;  // [total_frames,25] when camera-driven
};

struct SamplerConfig {
  int steps = 50;          // respaced reverse-process steps
  double cfg_scale = 1.0;  // guidance strength; 1.0 disables the extra pass
  uint64_t seed = 0;
};

struct GenerationSegmentRecord {
  int start_frame = 0;  // position of the segment's first frame in the output
  int frames = 0;       // segment frames generated
  ContextSource context_source = ContextSource::kGroundTruth;
  std::string reference;  // "portrait", "generated-frame" or "none"
  Tensor context;         // [n,3,s,s] context frames fed to this segment
};

struct GeneratedVideo {
  Tensor frames;  // [total_frames,3,s,s], clamped to [-1,1]
  std::vector<GenerationSegmentRecord> segments;
  nlohmann::json manifest;  // seed, sampler, boundaries: enough to replay
};

// Chained segment-by-segment generation. The first segment starts without
// context; its reference features come from `init_portrait` when given.
// Every later segment takes the last n generated frames as context and the
// last generated frame as its reference input.
GeneratedVideo generate_long(const Denoiser& net, const NoiseSchedule& sched,
                             const ConditioningTimeline& conds, int total_frames,
                             const std::optional<Tensor>& init_portrait, const SegmentSpec& seg,
                             const SamplerConfig& sampler);

const char* to_string(ContextSource s);

}  // namespace blobdiff
