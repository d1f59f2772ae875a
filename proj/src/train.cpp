#include "blobdiff/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <set>
#include <stdexcept>
#include <utility>

#include "blobdiff/eval.hpp"

namespace blobdiff {
namespace {

constexpr const char* kCheckpointKind = "stage-checkpoint";

uint64_t fnv1a(const std::string& s) {
  uint64_t h = 1469598103934665603ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

// Copies rows [start, start+len) of a [T,...] tensor.
Tensor rows(const Tensor& t, int start, int len) {
  if (t.rank() < 1 || start < 0 || len < 0 || start + len > t.shape[0])
    throw std::out_of_range("rows: range outside tensor");
  std::vector<int> shape = t.shape;
  shape[0] = len;
  Tensor out(std::move(shape));
  const size_t stride = t.numel() / static_cast<size_t>(t.shape[0]);
  std::copy(t.data.begin() + start * stride, t.data.begin() + (start + len) * stride,
            out.data.begin());
  return out;
}

bool has(const std::vector<std::string>& v, const char* s) {
  return std::find(v.begin(), v.end(), s) != v.end();
}

double mean_range(const std::vector<double>& v, size_t b, size_t e) {
  double acc = 0;
  for (size_t i = b; i < e; ++i) acc += v[i];
  return acc / static_cast<double>(e - b);
}

double max_abs(const TensorMap& m) {
  double mx = 0;
  for (const auto& [name, t] : m)
    for (double v : t.data) mx = std::max(mx, std::abs(v));
  return mx;
}

// One preloaded training clip; keeping them in memory avoids per-step file IO.
struct TrainClip {
  VideoSample video;
  Tensor mouth_regions;  // [T,4] for the talking world, empty otherwise
};

Tensor flatten_pose_track(const std::vector<CameraPose>& poses) {
  Tensor cam({static_cast<int>(poses.size()), 25});
  for (size_t f = 0; f < poses.size(); ++f) {
    Tensor row = flatten_camera(poses[f]);
    std::copy(row.data.begin(), row.data.end(), cam.data.begin() + static_cast<int64_t>(f) * 25);
  }
  return cam;
}

std::vector<TrainClip> load_clips(const DatasetReader& reader, int min_frames) {
  std::vector<TrainClip> out;
  for (int i = 0; i < reader.clip_count(); ++i) {
    ClipData c = reader.load_clip(i);
    if (c.frames.rank() != 4 || c.frames.shape[0] < min_frames) continue;
    TrainClip tc;
    tc.video.frames = std::move(c.frames);
    tc.video.id_embedding = c.identity.embedding;
    tc.video.audio = std::move(c.signal);
    if (!c.poses.empty()) tc.video.camera_flat = flatten_pose_track(c.poses);
    tc.mouth_regions = std::move(c.mouth_regions);
    out.push_back(std::move(tc));
  }
  if (out.empty())
    throw std::runtime_error("no clip in the dataset reaches " + std::to_string(min_frames) +
                             " frames");
  return out;
}

std::string dataset_root(const PipelineConfig& pc, const std::string& id) {
  const std::string& root = id == "talking" ? pc.talking_data : pc.multiview_data;
  if (root.empty()) throw std::runtime_error("no dataset root configured for \"" + id + "\"");
  return root;
}

void validate_spec(const StageSpec& spec, const PipelineConfig& pc, int expect_stage) {
  if (spec.stage != expect_stage)
    throw std::invalid_argument("spec.stage is " + std::to_string(spec.stage) + ", expected " +
                                std::to_string(expect_stage));
  if (spec.steps < 1) throw std::invalid_argument("spec.steps must be positive");
  if (spec.batch < 1) throw std::invalid_argument("spec.batch must be positive");
  if (spec.grad_accum < 1) throw std::invalid_argument("spec.grad_accum must be positive");
  if (!(spec.lr > 0)) throw std::invalid_argument("spec.lr must be positive");
  if (spec.cond_dropout < 0 || spec.cond_dropout >= 1)
    throw std::invalid_argument("spec.cond_dropout must lie in [0,1)");
  if (spec.trainable.empty()) throw std::invalid_argument("spec.trainable is empty");
  if (spec.dataset != "talking" && spec.dataset != "multiview")
    throw std::invalid_argument("unknown dataset id: " + spec.dataset);
  if (!has(spec.losses, "diffusion"))
    throw std::invalid_argument("the diffusion loss is mandatory");
  for (const auto& l : spec.losses)
    if (l != "diffusion" && l != "lip") throw std::invalid_argument("unknown loss: " + l);
  if (has(spec.losses, "lip")) {
    if (spec.stage != 1)
      throw std::invalid_argument("the articulation loss belongs to stage 1");
    if (pc.artic_encoder.empty())
      throw std::runtime_error("lip loss requires an articulation encoder checkpoint");
  }
  const UNetConfig cfg = stage_model_config(pc.unet, spec.stage);
  for (const auto& s : spec.streams) {
    if (s != "id" && s != "audio" && s != "camera")
      throw std::invalid_argument("unknown conditioning stream: " + s);
    const bool ok = (s == "id" && cfg.use_id) || (s == "audio" && cfg.use_audio) ||
                    (s == "camera" && cfg.use_camera);
    if (!ok) throw std::invalid_argument("stream not present in the stage network: " + s);
  }
  if (spec.stage == 3 && has(spec.streams, "audio"))
    throw std::invalid_argument("stage 3 must not drive the audio stream");
  if (spec.stage == 2 && spec.F < 1) throw std::invalid_argument("stage 2 needs F >= 1");
}

// Keeps only the streams the stage drives, then applies per-stream guidance
// dropout. The draw order is fixed so the random stream replays exactly.
VideoSample conditioned_sample(const TrainClip& clip, const StageSpec& spec, Rng& rng) {
  VideoSample v = clip.video;
  const bool want_id = has(spec.streams, "id");
  const bool want_audio = has(spec.streams, "audio");
  const bool want_camera = has(spec.streams, "camera");
  const bool drop_id = want_id && rng.uniform() < spec.cond_dropout;
  const bool drop_audio = want_audio && rng.uniform() < spec.cond_dropout;
  const bool drop_camera = want_camera && rng.uniform() < spec.cond_dropout;
  if (!want_id || drop_id) v.id_embedding = Tensor();
  if (!want_audio || drop_audio) v.audio.clear();
  if (!want_camera || drop_camera) v.camera_flat.reset();
  return v;
}

struct StageContext {
  StageSpec spec;
  UNetConfig cfg;
  std::string data_root;
  std::string parent_path;  // empty for stage 0
  std::vector<TrainClip> clips;
  ParamStore ps;
  Denoiser net;
  AdamW adam;
  std::vector<std::string> frozen;     // names outside the trainable set
  uint64_t frozen_hash_before = 0;
  uint64_t parent_hash = 0;
  int start_step = 0;
  std::vector<double> losses;
};

json stage_manifest(const StageContext& c, const PipelineConfig& pc, int step) {
  json m;
  m["stage"] = c.spec.stage;
  m["step"] = step;
  m["spec"] = to_json(c.spec);
  m["spec_hash"] = hash_hex(stage_spec_hash(c.spec));
  m["parent_hash"] = c.parent_path.empty() ? std::string("none") : hash_hex(c.parent_hash);
  m["seed"] = c.spec.seed;
  m["dataset"] = json{{"id", c.spec.dataset}, {"root", c.data_root}};
  m["unet"] = unet_config_json(c.cfg);
  m["enc"] = encoder_config_json(pc.enc);
  m["losses"] = c.losses;
  if (!c.losses.empty()) {
    const size_t n = c.losses.size();
    const size_t k = std::max<size_t>(1, n / 10);
    m["metrics"] = json{{"loss_first_10pct", mean_range(c.losses, 0, k)},
                        {"loss_last_10pct", mean_range(c.losses, n - k, n)},
                        {"loss_final", c.losses.back()}};
  }
  return m;
}

void load_parent(StageContext& c) {
  if (!std::filesystem::exists(c.parent_path))
    throw LineageError("stage " + std::to_string(c.spec.stage) + " needs the stage " +
                             std::to_string(c.spec.stage - 1) + " checkpoint at " +
                             c.parent_path);
  LoadedCheckpoint ck = load_stage_checkpoint(c.parent_path);
  const int pstage = ck.manifest.value("stage", -1);
  if (pstage != c.spec.stage - 1)
    throw LineageError("lineage: parent checkpoint is stage " + std::to_string(pstage) +
                             ", need stage " + std::to_string(c.spec.stage - 1));
  const uint64_t h = checkpoint_weights_hash(ck.weights);
  if (ck.manifest.value("weights_hash", std::string()) != hash_hex(h))
    throw LineageError("lineage: parent weights do not match their recorded hash");
  std::set<std::string> names;
  for (const auto& n : c.ps.names_matching({"*"})) names.insert(n);
  for (const auto& [name, t] : ck.weights)
    if (!names.count(name))
      throw LineageError("parent tensor " + name + " has no slot in the stage network");
  c.ps.load_values(ck.weights, /*strict=*/false);
  c.parent_hash = h;
}

std::vector<std::string> frozen_names(const ParamStore& ps,
                                      const std::vector<std::string>& trainable) {
  const auto matched = ps.names_matching(trainable);
  const std::set<std::string> m(matched.begin(), matched.end());
  std::vector<std::string> out;
  for (const auto& n : ps.names_matching({"*"}))
    if (!m.count(n)) out.push_back(n);
  return out;
}

StageContext prepare_stage(const PipelineConfig& pc, const StageSpec& spec,
                           const StageRunOptions& opt, int expect_stage, int min_frames) {
  validate_spec(spec, pc, expect_stage);
  if (pc.workdir.empty()) throw std::runtime_error("PipelineConfig.workdir is empty");
  std::filesystem::create_directories(pc.workdir);

  StageContext c;
  c.spec = spec;
  c.cfg = stage_model_config(pc.unet, spec.stage);
  c.data_root = dataset_root(pc, spec.dataset);
  DatasetReader reader(c.data_root);
  c.clips = load_clips(reader, min_frames);

  // Per-name init streams make fresh tensors (the ones absent from the
  // parent) deterministic regardless of creation order.
  Rng init = Rng(spec.seed).child("init");
  c.net = build_denoiser(c.ps, c.cfg, pc.enc, init);
  if (spec.stage > 0) {
    c.parent_path = opt.parent.empty()
                        ? pc.workdir + "/stage" + std::to_string(spec.stage - 1) + ".ckpt"
                        : opt.parent;
    load_parent(c);
  }

  for (const auto& pat : spec.trainable)
    if (c.ps.names_matching({pat}).empty())
      throw std::invalid_argument("trainable pattern matches no tensor: " + pat);
  c.ps.set_requires_grad(spec.trainable, /*on_matched=*/true, /*off_rest=*/true);
  c.frozen = frozen_names(c.ps, spec.trainable);
  c.frozen_hash_before = c.ps.values_hash(c.frozen);

  AdamWConfig acfg;
  acfg.lr = spec.lr;
  c.adam = AdamW(acfg);

  if (!opt.resume_from.empty()) {
    LoadedCheckpoint ck = load_stage_checkpoint(opt.resume_from);
    if (ck.manifest.value("stage", -1) != spec.stage)
      throw LineageError("resume: checkpoint stage mismatch");
    if (ck.manifest.value("spec_hash", std::string()) != hash_hex(stage_spec_hash(spec)))
      throw LineageError("resume: spec does not match the checkpoint");
    const std::string want_parent =
        c.parent_path.empty() ? std::string("none") : hash_hex(c.parent_hash);
    if (ck.manifest.value("parent_hash", std::string()) != want_parent)
      throw LineageError("resume: checkpoint descends from a different parent");
    if (ck.opt_state.empty())
      throw LineageError("resume: checkpoint lacks optimizer state");
    c.ps.load_values(ck.weights, /*strict=*/true);
    c.adam.load_state(ck.opt_state);
    c.start_step = ck.manifest.value("step", 0);
    c.losses = ck.manifest.value("losses", std::vector<double>{});
    if (static_cast<int>(c.losses.size()) != c.start_step)
      throw LineageError("resume: loss curve and step count disagree");
    if (c.start_step > spec.steps)
      throw LineageError("resume: checkpoint already beyond spec.steps");
  }
  return c;
}

std::string mid_path(const std::string& dir, int stage, int step) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "stage%d_step%05d.ckpt", stage, step);
  return dir + "/" + buf;
}

// The seeded optimization loop. All randomness of a step derives from
// child("step", step), so a resumed run continues bit-exactly. Gradients
// accumulate over `micros` micro-steps (each scaled by 1/micros) before the
// optimizer update; the recorded loss is the unscaled micro mean. Frozen
// tensors are re-hashed at the end; any drift aborts.
void run_loop(StageContext& c, const PipelineConfig& pc, int micros,
              const std::function<ag::Var(Rng&, int)>& micro) {
  for (int step = c.start_step; step < c.spec.steps; ++step) {
    Rng sr = Rng(c.spec.seed).child("step", static_cast<uint64_t>(step));
    double acc = 0;
    for (int m = 0; m < micros; ++m) {
      ag::Var loss = micro(sr, step);
      acc += loss.item();
      ag::backward(ag::affine(loss, 1.0 / micros, 0.0));
    }
    c.adam.step(c.ps);
    const double mean = acc / micros;
    if (!std::isfinite(mean))
      throw NumericFailure("stage " + std::to_string(c.spec.stage) +
                           ": non-finite loss at step " + std::to_string(step));
    c.losses.push_back(mean);
    const int done = step + 1;
    if (pc.checkpoint_every > 0 && done % pc.checkpoint_every == 0 && done < c.spec.steps)
      save_stage_checkpoint(mid_path(pc.workdir, c.spec.stage, done), c.ps, c.adam,
                            stage_manifest(c, pc, done));
  }
  if (c.ps.values_hash(c.frozen) != c.frozen_hash_before)
    throw NumericFailure("frozen-weight drift detected in stage " +
                         std::to_string(c.spec.stage));
}

StageResult finish_stage(StageContext& c, const PipelineConfig& pc, const json& extra) {
  json m = stage_manifest(c, pc, c.spec.steps);
  for (const auto& [k, v] : extra.items()) m[k] = v;
  const std::string path = pc.workdir + "/stage" + std::to_string(c.spec.stage) + ".ckpt";
  save_stage_checkpoint(path, c.ps, c.adam, m);
  StageResult r;
  r.losses = c.losses;
  r.checkpoint = path;
  r.manifest = load_tensor_meta(path);
  return r;
}

json readiness_report(const PipelineConfig& pc, StageContext& c) {
  const ReadinessConfig& rc = pc.readiness;
  if (rc.probe.empty()) throw std::runtime_error("readiness: no identity probe configured");
  if (rc.samples < 1 || rc.sample_steps < 1)
    throw std::invalid_argument("readiness: bad sample budget");
  IdentityProbe probe = load_identity_probe(rc.probe);
  const Tensor& target = c.clips[0].video.id_embedding;
  ConditioningBundle cond;
  cond.id_embedding = target;
  Tensor with_id =
      sample_frames(c.net, pc.sched, cond, rc.samples, rc.sample_steps, rc.seed, rc.cfg_scale);
  Tensor without = sample_frames(c.net, pc.sched, ConditioningBundle{}, rc.samples,
                                 rc.sample_steps, rc.seed + 1, 1.0);
  const double cc = identity_similarity(probe, with_id, target);
  const double uc = identity_similarity(probe, without, target);
  const bool pass = cc >= rc.threshold && cc > uc;
  return json{{"conditioned_cosine", cc}, {"unconditional_cosine", uc},
              {"threshold", rc.threshold}, {"samples", rc.samples},
              {"sample_steps", rc.sample_steps}, {"cfg_scale", rc.cfg_scale},
              {"target_clip", 0},           {"pass", pass}};
}

}  // namespace

// ---- spec plumbing ----

StageSpec default_stage_spec(int stage) {
  StageSpec s;
  s.stage = stage;
  switch (stage) {
    case 0:
      s.trainable = {"unet.*", "cond.id.*"};
      s.streams = {"id"};
      s.losses = {"diffusion"};
      s.dataset = "talking";
      s.steps = 20000;
      break;
    case 1:
      s.trainable = {"*.temporal.*", "*.cross.audio.*", "cond.audio.*"};
      s.streams = {"id", "audio"};
      s.losses = {"diffusion", "lip"};
      s.dataset = "talking";
      s.steps = 10000;
      break;
    case 2:
      s.trainable = {"*.temporal.*", "*.cross.audio.*", "cond.audio.*", "*.lora.*"};
      s.streams = {"id", "audio"};
      s.losses = {"diffusion"};
      s.dataset = "talking";
      s.steps = 2000;
      s.F = 2;
      break;
    case 3:
      s.trainable = {"*.temporal.*", "*.cross.camera.*", "cond.camera.*", "*.lora.*"};
      s.streams = {"id", "camera"};
      s.losses = {"diffusion"};
      s.dataset = "multiview";
      s.steps = 3000;
      break;
    default:
      throw std::invalid_argument("default_stage_spec: stage must be 0..3");
  }
  return s;
}

json to_json(const StageSpec& s) {
  return json{{"stage", s.stage},
              {"trainable", s.trainable},
              {"streams", s.streams},
              {"losses", s.losses},
              {"dataset", s.dataset},
              {"steps", s.steps},
              {"lr", s.lr},
              {"batch", s.batch},
              {"seed", s.seed},
              {"F", s.F},
              {"grad_accum", s.grad_accum},
              {"cond_dropout", s.cond_dropout},
              {"lip_warmup_frac", s.lip_warmup_frac}};
}

StageSpec stage_spec_from_json(const json& j) {
  StageSpec d;
  StageSpec s;
  s.stage = j.value("stage", d.stage);
  s.trainable = j.value("trainable", d.trainable);
  s.streams = j.value("streams", d.streams);
  s.losses = j.value("losses", d.losses);
  s.dataset = j.value("dataset", d.dataset);
  s.steps = j.value("steps", d.steps);
  s.lr = j.value("lr", d.lr);
  s.batch = j.value("batch", d.batch);
  s.seed = j.value("seed", d.seed);
  s.F = j.value("F", d.F);
  s.grad_accum = j.value("grad_accum", d.grad_accum);
  s.cond_dropout = j.value("cond_dropout", d.cond_dropout);
  s.lip_warmup_frac = j.value("lip_warmup_frac", d.lip_warmup_frac);
  return s;
}

uint64_t stage_spec_hash(const StageSpec& spec) { return fnv1a(to_json(spec).dump()); }

json unet_config_json(const UNetConfig& c) {
  return json{{"side", c.side},
              {"in_channels", c.in_channels},
              {"base", c.base},
              {"mults", c.mults},
              {"attn_levels", c.attn_levels},
              {"gn_groups", c.gn_groups},
              {"temb_dim", c.temb_dim},
              {"temporal", c.temporal},
              {"use_id", c.use_id},
              {"use_audio", c.use_audio},
              {"use_camera", c.use_camera},
              {"lora_rank", c.lora_rank},
              {"heads", c.heads}};
}

UNetConfig unet_config_from_json(const json& j) {
  UNetConfig d;
  UNetConfig c;
  c.side = j.value("side", d.side);
  c.in_channels = j.value("in_channels", d.in_channels);
  c.base = j.value("base", d.base);
  c.mults = j.value("mults", d.mults);
  c.attn_levels = j.value("attn_levels", d.attn_levels);
  c.gn_groups = j.value("gn_groups", d.gn_groups);
  c.temb_dim = j.value("temb_dim", d.temb_dim);
  c.temporal = j.value("temporal", d.temporal);
  c.use_id = j.value("use_id", d.use_id);
  c.use_audio = j.value("use_audio", d.use_audio);
  c.use_camera = j.value("use_camera", d.use_camera);
  c.lora_rank = j.value("lora_rank", d.lora_rank);
  c.heads = j.value("heads", d.heads);
  return c;
}

json encoder_config_json(const EncoderConfig& c) {
  return json{{"d_id", c.d_id},   {"L_id", c.L_id},       {"d_a", c.d_a},
              {"L_a", c.L_a},     {"L_c", c.L_c},         {"d_model", c.d_model},
              {"hidden", c.hidden}, {"audio_window", c.audio_window}};
}

EncoderConfig encoder_config_from_json(const json& j) {
  EncoderConfig d;
  EncoderConfig c;
  c.d_id = j.value("d_id", d.d_id);
  c.L_id = j.value("L_id", d.L_id);
  c.d_a = j.value("d_a", d.d_a);
  c.L_a = j.value("L_a", d.L_a);
  c.L_c = j.value("L_c", d.L_c);
  c.d_model = j.value("d_model", d.d_model);
  c.hidden = j.value("hidden", d.hidden);
  c.audio_window = j.value("audio_window", d.audio_window);
  return c;
}

UNetConfig stage_model_config(const UNetConfig& full, int stage) {
  switch (stage) {
    case 0:
      return image_config(full);
    case 1: {
      UNetConfig c = full;
      c.temporal = true;
      c.use_audio = true;
      c.use_camera = false;
      c.lora_rank = 0;
      return c;
    }
    case 2: {
      UNetConfig c = full;
      c.temporal = true;
      c.use_audio = true;
      c.use_camera = false;
      if (c.lora_rank < 1)
        throw std::invalid_argument("stage 2 adds LoRA adapters: lora_rank must be positive");
      return c;
    }
    case 3:
      return full;
    default:
      throw std::invalid_argument("stage_model_config: stage must be 0..3");
  }
}

// ---- checkpoint container ----

void save_stage_checkpoint(const std::string& path, const ParamStore& params,
                           const AdamW& opt, const json& manifest) {
  TensorMap model = params.snapshot();
  json meta = manifest;
  meta["kind"] = kCheckpointKind;
  meta["weights_hash"] = hash_hex(tensor_map_hash(model));
  TensorMap file = model;
  for (const auto& [k, v] : opt.state()) file["opt/" + k] = v;
  save_tensors(path, file, meta);
}

LoadedCheckpoint load_stage_checkpoint(const std::string& path) {
  LoadedCheckpoint out;
  TensorMap all = load_tensors(path, &out.manifest);
  if (out.manifest.value("kind", std::string()) != kCheckpointKind)
    throw std::runtime_error("not a stage checkpoint: " + path);
  for (auto& [k, v] : all) {
    if (k.rfind("opt/", 0) == 0)
      out.opt_state[k.substr(4)] = std::move(v);
    else
      out.weights[k] = std::move(v);
  }
  return out;
}

uint64_t checkpoint_weights_hash(const TensorMap& weights) { return tensor_map_hash(weights); }

// ---- the stages ----

StageResult stage0_pretrain_image(const PipelineConfig& pc, const StageSpec& spec,
                                  const StageRunOptions& opt) {
  StageContext c = prepare_stage(pc, spec, opt, 0, 1);
  const int side = c.cfg.side;
  const int C = c.cfg.in_channels;
  const int64_t plane = static_cast<int64_t>(C) * side * side;
  const bool want_id = has(spec.streams, "id");

  auto micro = [&](Rng& sr, int) {
    const TrainClip& clip = c.clips[static_cast<size_t>(
        sr.uniform_int(0, static_cast<int>(c.clips.size()) - 1))];
    const Tensor& fr = clip.video.frames;
    if (fr.shape[2] != side || fr.shape[3] != side)
      throw std::runtime_error("dataset frame size disagrees with the model");
    const int T = fr.shape[0];
    Tensor x0({spec.batch, C, side, side});
    std::vector<int> ts(static_cast<size_t>(spec.batch));
    for (int b = 0; b < spec.batch; ++b) {
      const int f = sr.uniform_int(0, T - 1);
      std::copy_n(fr.data.begin() + f * plane, plane, x0.data.begin() + b * plane);
      ts[static_cast<size_t>(b)] = sr.uniform_int(1, pc.sched.T);
    }
    Tensor eps(x0.shape);
    sr.fill_normal(eps);
    Tensor xt(x0.shape);
    for (int b = 0; b < spec.batch; ++b) {
      Tensor row = q_sample(rows(x0, b, 1), ts[static_cast<size_t>(b)], rows(eps, b, 1), pc.sched);
      std::copy(row.data.begin(), row.data.end(), xt.data.begin() + b * plane);
    }
    ConditioningBundle conds;
    const bool drop = sr.uniform() < spec.cond_dropout;
    if (want_id && !drop) conds.id_embedding = clip.video.id_embedding;
    ag::Var eps_hat = denoise(c.net, xt, ts, conds, ReferenceFeatures{});
    return ag::mse(eps_hat, ag::constant(eps));
  };
  run_loop(c, pc, spec.grad_accum, micro);

  json extra = json::object();
  if (pc.readiness.enabled) {
    json rep = readiness_report(pc, c);
    save_json(pc.workdir + "/stage0_readiness.json", rep);
    extra["readiness"] = rep;
    if (!rep["pass"].get<bool>())
      throw NumericFailure(
          "stage 0 readiness check failed: conditioned cosine " +
          std::to_string(rep["conditioned_cosine"].get<double>()) + " vs unconditional " +
          std::to_string(rep["unconditional_cosine"].get<double>()) + " (threshold " +
          std::to_string(pc.readiness.threshold) + "); report written to " + pc.workdir +
          "/stage0_readiness.json");
  }
  return finish_stage(c, pc, extra);
}

StageResult stage1_audio_motion(const PipelineConfig& pc, const StageSpec& spec,
                                const StageRunOptions& opt) {
  StageContext c = prepare_stage(pc, spec, opt, 1, pc.segment.N + pc.segment.n);
  const bool use_lip = has(spec.losses, "lip");
  ArticulationEncoder artic;
  if (use_lip) artic = load_articulation_encoder(pc.artic_encoder);
  CompositeLossSchedule lsched;
  lsched.total_steps = spec.steps;
  lsched.warmup_frac = spec.lip_warmup_frac;
  const int64_t ref0 = reference_pass_count();

  auto micro = [&](Rng& sr, int step) {
    const TrainClip& clip = c.clips[static_cast<size_t>(
        sr.uniform_int(0, static_cast<int>(c.clips.size()) - 1))];
    VideoSample v = conditioned_sample(clip, c.spec, sr);
    SegmentStepResult r =
        teacher_forcing_step(c.net, pc.sched, v, pc.segment, ReferenceFeatures{}, sr);
    if (!use_lip) return r.loss;
    if (lsched.lip_active(step)) {
      // The articulation term reads the unclamped clean-frame estimate so its
      // gradient is not cut on saturated pixels.
      ag::Var x0_hat = estimate_x0_var(r.x_t, r.eps_hat_seg, r.draw.t, pc.sched, false);
      Tensor real = rows(clip.video.frames, r.draw.seg_start, pc.segment.N);
      MouthLandmarks lm =
          landmarks_from_regions(rows(clip.mouth_regions, r.draw.seg_start, pc.segment.N));
      ag::Var lip = lip_reading_loss(real, x0_hat, lm, artic);
      return composite_loss(r.loss, lip, step, lsched);
    }
    return composite_loss(r.loss, ag::Var(), step, lsched);
  };
  run_loop(c, pc, spec.batch * spec.grad_accum, micro);

  const int64_t ref_calls = reference_pass_count() - ref0;
  if (ref_calls != 0)
    throw NumericFailure("stage 1 invoked the reference encoder " +
                             std::to_string(ref_calls) + " times");
  json extra{{"reference_passes", ref_calls},
             {"lip_loss", use_lip},
             {"lip_warmup_steps", lsched.warmup_steps()}};
  return finish_stage(c, pc, extra);
}

StageResult stage2_self_forcing(const PipelineConfig& pc, const StageSpec& spec,
                                const StageRunOptions& opt) {
  const int need = pc.segment.n + spec.F * pc.segment.N;
  StageContext c = prepare_stage(pc, spec, opt, 2, need);
  const double b_before = max_abs(c.ps.snapshot_matching({"*.lora.b"}));
  const int64_t ref0 = reference_pass_count();
  int64_t later_segments = 0;
  int64_t model_estimate = 0;

  auto micro = [&](Rng& sr, int) {
    const TrainClip& clip = c.clips[static_cast<size_t>(
        sr.uniform_int(0, static_cast<int>(c.clips.size()) - 1))];
    VideoSample v = conditioned_sample(clip, c.spec, sr);
    // The reference pass always sees the true identity: guidance dropout
    // blanks conditioning streams, not the reference frames.
    Tensor portrait = rows(clip.video.frames, 0, 1);
    std::optional<Tensor> rid;
    if (clip.video.id_embedding.numel() > 0) rid = clip.video.id_embedding;
    ReferenceFeatures ref = reference_features(c.net, portrait, rid);
    RolloutResult rr =
        self_forcing_rollout(c.net, pc.sched, v, spec.F, pc.segment, ref, sr, true);
    for (size_t k = 1; k < rr.segments.size(); ++k) {
      ++later_segments;
      if (rr.segments[k].context_source == ContextSource::kModelEstimate) ++model_estimate;
    }
    return rr.total_loss;
  };
  run_loop(c, pc, spec.batch * spec.grad_accum, micro);

  if (later_segments != model_estimate)
    throw NumericFailure("self-forcing fed ground-truth context beyond the first segment");
  const double b_after = max_abs(c.ps.snapshot_matching({"*.lora.b"}));
  json extra{{"reference_passes", reference_pass_count() - ref0},
             {"rollout_segments_beyond_first", later_segments},
             {"model_estimate_context", model_estimate},
             {"lora_b_max_abs_before", b_before},
             {"lora_b_max_abs_after", b_after}};
  return finish_stage(c, pc, extra);
}

StageResult stage3_spatial(const PipelineConfig& pc, const StageSpec& spec,
                           const StageRunOptions& opt) {
  StageContext c = prepare_stage(pc, spec, opt, 3, pc.segment.N + pc.segment.n);
  for (const auto& n : c.ps.names_matching(spec.trainable))
    if (n.find("audio") != std::string::npos)
      throw std::invalid_argument("stage 3 must keep audio weights frozen: " + n);
  const std::vector<std::string> audio_pats = {"*.cross.audio.*", "cond.audio.*"};
  const uint64_t audio_before = tensor_map_hash(c.ps.snapshot_matching(audio_pats));

  auto micro = [&](Rng& sr, int) {
    const TrainClip& clip = c.clips[static_cast<size_t>(
        sr.uniform_int(0, static_cast<int>(c.clips.size()) - 1))];
    VideoSample v = conditioned_sample(clip, c.spec, sr);
    if (!v.audio.empty()) throw std::runtime_error("stage 3 received an audio track");
    Tensor portrait = rows(clip.video.frames, 0, 1);
    std::optional<Tensor> rid;
    if (clip.video.id_embedding.numel() > 0) rid = clip.video.id_embedding;
    ReferenceFeatures ref = reference_features(c.net, portrait, rid);
    SegmentStepResult r = teacher_forcing_step(c.net, pc.sched, v, pc.segment, ref, sr);
    return r.loss;
  };
  run_loop(c, pc, spec.batch * spec.grad_accum, micro);

  const uint64_t audio_after = tensor_map_hash(c.ps.snapshot_matching(audio_pats));
  if (audio_after != audio_before)
    throw NumericFailure("audio attention weights moved during stage 3");
  json extra{{"audio_weights_hash", hash_hex(audio_after)}};
  return finish_stage(c, pc, extra);
}

StageResult run_stage(const PipelineConfig& pc, const StageSpec& spec,
                      const StageRunOptions& opt) {
  switch (spec.stage) {
    case 0:
      return stage0_pretrain_image(pc, spec, opt);
    case 1:
      return stage1_audio_motion(pc, spec, opt);
    case 2:
      return stage2_self_forcing(pc, spec, opt);
    case 3:
      return stage3_spatial(pc, spec, opt);
    default:
      throw std::invalid_argument("run_stage: stage must be 0..3");
  }
}

Tensor sample_frames(const Denoiser& net, const NoiseSchedule& sched,
                     const ConditioningBundle& conds, int count, int steps, uint64_t seed,
                     double cfg_scale) {
  if (count < 1) throw std::invalid_argument("sample_frames: count must be positive");
  if (net.cfg.temporal)
    throw std::invalid_argument("sample_frames: needs the per-frame image configuration");
  const int side = net.cfg.side;
  const int C = net.cfg.in_channels;
  Tensor x({count, C, side, side});
  Rng rng(seed);
  rng.fill_normal(x);
  const std::vector<int> plan = respaced_steps(sched.T, steps);
  for (size_t i = 0; i < plan.size(); ++i) {
    const int t = plan[i];
    const int t_next = i + 1 < plan.size() ? plan[i + 1] : 0;
    ag::Var eps_hat = denoise(net, x, std::vector<int>(static_cast<size_t>(count), t), conds,
                              ReferenceFeatures{}, cfg_scale);
    Tensor noise({count, C, side, side});
    rng.fill_normal(noise);  // drawn every step to keep the stream aligned
    x = reverse_step_between(x, eps_hat.val(), t, t_next, sched, &noise);
  }
  for (double& v : x.data) v = std::clamp(v, -1.0, 1.0);
  return x;
}

PairedLoss camera_ablation_loss(const Denoiser& net, const NoiseSchedule& sched,
                                const DatasetReader& reader, const SegmentSpec& seg,
                                int windows, uint64_t seed) {
  if (windows < 1) throw std::invalid_argument("camera_ablation_loss: windows must be positive");
  if (reader.clip_count() < 1)
    throw std::runtime_error("camera_ablation_loss: empty dataset");
  PairedLoss out;
  for (int w = 0; w < windows; ++w) {
    Rng pick = Rng(seed).child("window", static_cast<uint64_t>(w));
    ClipData cd = reader.load_clip(pick.uniform_int(0, reader.clip_count() - 1));
    if (cd.poses.empty())
      throw std::runtime_error("camera_ablation_loss: clip has no pose track");
    VideoSample v;
    v.frames = cd.frames;
    v.id_embedding = cd.identity.embedding;
    v.camera_flat = flatten_pose_track(cd.poses);
    VideoSample vd = v;
    vd.camera_flat.reset();
    Tensor portrait = rows(v.frames, 0, 1);
    ReferenceFeatures ref =
        reference_features(net, portrait, std::optional<Tensor>(v.id_embedding));
    // Identical child streams give both arms the same window, step and noise.
    Rng a = Rng(seed).child("draw", static_cast<uint64_t>(w));
    Rng b = Rng(seed).child("draw", static_cast<uint64_t>(w));
    out.conditioned += teacher_forcing_step(net, sched, v, seg, ref, a).loss.item();
    out.dropped += teacher_forcing_step(net, sched, vd, seg, ref, b).loss.item();
  }
  out.conditioned /= windows;
  out.dropped /= windows;
  return out;
}

}  // namespace blobdiff
