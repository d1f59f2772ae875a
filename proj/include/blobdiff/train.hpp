#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "blobdiff/autoreg.hpp"
#include "blobdiff/dataset.hpp"
#include "blobdiff/optim.hpp"
#include "blobdiff/percep.hpp"
#include "blobdiff/schedule.hpp"
#include "blobdiff/serialize.hpp"
#include "blobdiff/unet.hpp"

namespace blobdiff {

// Checkpoint-chain violations: missing or wrong-stage parents, tampered
// hashes, resume/parent disagreements. The CLI maps these to their own exit
// code.
struct LineageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Training produced bad numbers: failed readiness gate, non-finite losses,
// frozen-weight drift.
struct NumericFailure : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Declarative description of one optimization stage. The four stages build on
// each other: 0 pretrains the per-frame image denoiser with identity
// conditioning, 1 adds temporal attention and the audio stream, 2 fine-tunes
// with self-forcing rollouts (LoRA appears here), 3 swaps the audio stream
// for camera control on multiview trajectories.
struct StageSpec {
  int stage = 0;                       // 0..3
  std::vector<std::string> trainable;  // tensor name patterns; the rest freeze
  std::vector<std::string> streams;    // conditioning streams fed during training
  std::vector<std::string> losses;     // {"diffusion"} or {"diffusion","lip"}
  std::string dataset;                 // "talking" or "multiview"
  int steps = 0;                       // optimizer steps
  double lr = 1e-4;
  int batch = 8;                       // windows (or frames, stage 0) per micro-step
  uint64_t seed = 0;
  int F = 2;                    // rollout segments per window (stage 2 only)
  int grad_accum = 1;           // micro-steps accumulated per optimizer step
  double cond_dropout = 0.1;    // per-stream drop probability (guidance training)
  double lip_warmup_frac = 0.5; // fraction of steps before the lip term joins
};

// Reference budgets and stage wiring (patterns, streams, losses, dataset id).
// The step counts are the full-run defaults; tests and the desk-scale
// pipeline shrink them.
StageSpec default_stage_spec(int stage);

json to_json(const StageSpec& spec);
StageSpec stage_spec_from_json(const json& j);
// Hash of the canonical JSON encoding; manifests identify specs by it.
uint64_t stage_spec_hash(const StageSpec& spec);

// Config documents for checkpoints and the CLI.
json unet_config_json(const UNetConfig& cfg);
UNetConfig unet_config_from_json(const json& j);
json encoder_config_json(const EncoderConfig& cfg);
EncoderConfig encoder_config_from_json(const json& j);

// The stage-0 readiness gate: after image pretraining, samples drawn with
// identity conditioning must be recognizably closer to the target identity
// (under a frozen probe) than unconditional samples, and pass a floor.
struct ReadinessConfig {
  bool enabled = true;
  std::string probe;      // path of a saved identity probe (see eval.hpp)
  int samples = 8;        // frames drawn per arm
  int sample_steps = 20;  // respaced reverse-process steps
  double threshold = 0.8; // required mean cosine of the conditioned arm
  double cfg_scale = 2.0; // guidance used when drawing the conditioned arm
  uint64_t seed = 99;
};

// Everything the stages share: model geometry, datasets, file plumbing.
struct PipelineConfig {
  UNetConfig unet;              // full video configuration; stages strip it down
  EncoderConfig enc;
  SegmentSpec segment;          // window geometry for stages 1-3
  NoiseSchedule sched;          // e.g. default_schedule()
  std::string workdir;          // checkpoints and manifests land here
  std::string talking_data;     // talking-blob dataset root
  std::string multiview_data;   // camera-trajectory dataset root
  std::string artic_encoder;    // frozen articulation encoder (lip loss)
  ReadinessConfig readiness;    // stage-0 exit gate
  int checkpoint_every = 0;     // also write stage<k>_step<NNNNN>.ckpt; 0 = final only
  std::string loss_log;         // stream "step loss" lines here; empty = off
};

// The network layout a given stage trains: stage 0 is the per-frame image
// reduction, stage 1 adds temporal + audio attention, stage 2 adds LoRA,
// stage 3 enables the camera stream as well.
UNetConfig stage_model_config(const UNetConfig& full, int stage);

struct StageResult {
  std::vector<double> losses;  // objective value per optimizer step
  std::string checkpoint;      // path of the final checkpoint
  json manifest;               // copy of the checkpoint manifest
};

// ---- checkpoint container ----
// Model tensors are stored under their parameter names, optimizer moments
// under "opt/"; the metadata blob carries the manifest (stage, spec and
// parent hashes, seed, step, loss summary).

void save_stage_checkpoint(const std::string& path, const ParamStore& params,
                           const AdamW& opt, const json& manifest);

struct LoadedCheckpoint {
  TensorMap weights;    // parameter name -> value
  TensorMap opt_state;  // "m/...", "v/...", "t" (empty if absent)
  json manifest;
};
LoadedCheckpoint load_stage_checkpoint(const std::string& path);

// Lineage identity of a checkpoint: hash over the model tensors alone.
uint64_t checkpoint_weights_hash(const TensorMap& weights);

struct StageRunOptions {
  std::string parent;       // parent checkpoint; default <workdir>/stage<k-1>.ckpt
  std::string resume_from;  // mid-stage checkpoint to continue, "" = fresh
};

// ---- the stages ----
// Each builds its network, loads the parent checkpoint (verifying its stage
// and recording its hash), freezes everything outside spec.trainable, runs
// the seeded loop, re-hashes the frozen tensors (drift aborts), and writes
// <workdir>/stage<k>.ckpt. Reruns with the same spec and parent reproduce the
// loss curve bit-exactly.

StageResult stage0_pretrain_image(const PipelineConfig& pc, const StageSpec& spec,
                                  const StageRunOptions& opt = {});
StageResult stage1_audio_motion(const PipelineConfig& pc, const StageSpec& spec,
                                const StageRunOptions& opt = {});
StageResult stage2_self_forcing(const PipelineConfig& pc, const StageSpec& spec,
                                const StageRunOptions& opt = {});
StageResult stage3_spatial(const PipelineConfig& pc, const StageSpec& spec,
                           const StageRunOptions& opt = {});

// Dispatch on spec.stage.
StageResult run_stage(const PipelineConfig& pc, const StageSpec& spec,
                      const StageRunOptions& opt = {});

// Reverse-process sampling of `count` independent frames under the image
// configuration (temporal mixing off). Used by the readiness gate and tests.
Tensor sample_frames(const Denoiser& net, const NoiseSchedule& sched,
                     const ConditioningBundle& conds, int count, int steps,
                     uint64_t seed, double cfg_scale = 1.0);

// Paired teacher-forcing loss on clips of `reader` with identical draws,
// once with the camera track and once with it removed. Measures how much the
// model actually uses camera conditioning.
struct PairedLoss {
  double conditioned = 0;
  double dropped = 0;
};
PairedLoss camera_ablation_loss(const Denoiser& net, const NoiseSchedule& sched,
                                const DatasetReader& reader, const SegmentSpec& seg,
                                int windows, uint64_t seed);

}  // namespace blobdiff
