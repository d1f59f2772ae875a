#include "blobdiff/autoreg.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "blobdiff/encoders.hpp"

namespace blobdiff {

namespace {

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

Tensor vcat(const Tensor& a, const Tensor& b) {
  if (a.rank() == 0 || a.shape[0] == 0) return b;
  if (a.rank() != b.rank()) throw std::invalid_argument("vcat: rank mismatch");
  std::vector<int> shape = a.shape;
  shape[0] += b.shape[0];
  Tensor out(std::move(shape));
  std::copy(a.data.begin(), a.data.end(), out.data.begin());
  std::copy(b.data.begin(), b.data.end(), out.data.begin() + a.data.size());
  return out;
}

Tensor clamp_unit(Tensor t) {
  for (auto& v : t.data) v = std::clamp(v, -1.0, 1.0);
  return t;
}

std::vector<int> step_vector(int n_ctx, int n_seg, int t) {
  std::vector<int> tv(static_cast<size_t>(n_ctx), 0);
  tv.insert(tv.end(), static_cast<size_t>(n_seg), t);
  return tv;
}

void validate_segment_spec(const SegmentSpec& seg) {
  if (seg.N < 1) throw std::invalid_argument("segment spec: N must be positive");
  if (seg.n < 0) throw std::invalid_argument("segment spec: n must be non-negative");
  if (seg.n > seg.N)
    throw std::invalid_argument("segment spec: context cannot exceed a segment");
}

}  // namespace

const char* to_string(ContextSource s) {
  return s == ContextSource::kGroundTruth ? "ground_truth" : "model_estimate";
}

ExtendedSegment prepend_context(const Tensor& segment, const SegmentContext& ctx) {
  if (segment.rank() != 4) throw std::invalid_argument("prepend_context: [N,C,h,w] expected");
  const int n = ctx.size();
  ExtendedSegment ext;
  ext.N = segment.shape[0];
  ext.n = n;
  if (n == 0) {
    ext.frames = segment;
    ext.context_mask.assign(static_cast<size_t>(ext.N), false);
    return ext;
  }
  if (ctx.frames.shape[1] != segment.shape[1] || ctx.frames.shape[2] != segment.shape[2] ||
      ctx.frames.shape[3] != segment.shape[3])
    throw std::invalid_argument("prepend_context: context/segment shape mismatch");
  for (double v : ctx.frames.data)
    if (!std::isfinite(v) || v < -1.0 - 1e-9 || v > 1.0 + 1e-9)
      throw std::invalid_argument("prepend_context: context frames must be clean pixels");
  ext.frames = vcat(ctx.frames, segment);
  ext.context_mask.assign(static_cast<size_t>(n + ext.N), false);
  for (int i = 0; i < n; ++i) ext.context_mask[static_cast<size_t>(i)] = true;
  return ext;
}

ConditioningBundle window_conditioning(const VideoSample& video, const EncoderConfig& enc,
                                       int start, int count) {
  const int T = video.frames.rank() == 4 ? video.frames.shape[0] : 0;
  if (start < 0 || count < 1 || start + count > T)
    throw std::out_of_range("window_conditioning: window outside video");
  ConditioningBundle b;
  if (video.id_embedding.numel() > 0) b.id_embedding = video.id_embedding;
  if (!video.audio.empty()) {
    if (static_cast<int>(video.audio.size()) != T)
      throw std::invalid_argument("window_conditioning: audio length disagrees with video");
    Tensor feats = synth_audio_features(video.audio, enc.audio_window, enc.d_a);
    b.audio_feats = rows(feats, start, count);
  }
  if (video.camera_flat) {
    if (video.camera_flat->rank() != 2 || video.camera_flat->shape[0] != T)
      throw std::invalid_argument("window_conditioning: camera track disagrees with video");
    b.camera_flat = rows(*video.camera_flat, start, count);
  }
  return b;
}

DenoiseFn as_denoise_fn(const Denoiser& net) {
  return [&net](const ag::Var& x, const std::vector<int>& t, const ConditioningBundle& conds,
                const ReferenceFeatures& ref) { return denoise(net, x, t, conds, ref); };
}

SegmentStepResult teacher_forcing_step(const DenoiseFn& model, const EncoderConfig& enc,
                                       const NoiseSchedule& sched, const VideoSample& video,
                                       const SegmentSpec& seg, const ReferenceFeatures& ref,
                                       Rng& rng) {
  validate_segment_spec(seg);
  const int T = video.frames.rank() == 4 ? video.frames.shape[0] : 0;
  if (T < seg.N + seg.n)
    throw std::invalid_argument("teacher_forcing_step: video shorter than a segment window");

  SegmentStepResult r;
  r.draw.seg_start = rng.uniform_int(seg.n, T - seg.N);
  r.draw.t = rng.uniform_int(1, sched.T);
  r.draw.eps = Tensor({seg.N, video.frames.shape[1], video.frames.shape[2],
                       video.frames.shape[3]});
  rng.fill_normal(r.draw.eps);

  Tensor x0 = rows(video.frames, r.draw.seg_start, seg.N);
  r.x_t = q_sample(x0, r.draw.t, r.draw.eps, sched);
  r.context.frames = rows(video.frames, r.draw.seg_start - seg.n, seg.n);
  r.context.source = ContextSource::kGroundTruth;

  ExtendedSegment ext = prepend_context(r.x_t, r.context);
  ConditioningBundle conds =
      window_conditioning(video, enc, r.draw.seg_start - seg.n, seg.n + seg.N);
  ag::Var eps_hat =
      model(ag::constant(ext.frames), step_vector(seg.n, seg.N, r.draw.t), conds, ref);
  r.eps_hat_seg = ag::slice0(eps_hat, seg.n, seg.N);
  r.loss = ag::mse(r.eps_hat_seg, ag::constant(r.draw.eps));
  return r;
}

SegmentStepResult teacher_forcing_step(const Denoiser& net, const NoiseSchedule& sched,
                                       const VideoSample& video, const SegmentSpec& seg,
                                       const ReferenceFeatures& ref, Rng& rng) {
  return teacher_forcing_step(as_denoise_fn(net), net.enc, sched, video, seg, ref, rng);
}

ag::Var estimate_x0_var(const Tensor& x_t, const ag::Var& eps_hat, int t,
                        const NoiseSchedule& s, bool clamp) {
  if (t < 1 || t > s.T) throw std::out_of_range("estimate_x0_var: step outside schedule");
  const double abar = s.alpha_bar_at(t);
  if (abar < 1e-8)
    throw std::invalid_argument("estimate_x0_var: alpha_bar too small for a stable estimate");
  if (x_t.shape != eps_hat.val().shape)
    throw std::invalid_argument("estimate_x0_var: shape mismatch");
  Tensor scaled = x_t;
  const double inv = 1.0 / std::sqrt(abar);
  for (auto& v : scaled.data) v *= inv;
  ag::Var x0 =
      ag::add(ag::constant(scaled), ag::affine(eps_hat, -std::sqrt(1.0 - abar) * inv, 0.0));
  return clamp ? ag::clamp(x0, -1.0, 1.0) : x0;
}

RolloutResult self_forcing_rollout(const DenoiseFn& model, const EncoderConfig& enc,
                                   const NoiseSchedule& sched, const VideoSample& video, int F,
                                   const SegmentSpec& seg, const ReferenceFeatures& ref,
                                   Rng& rng, bool detach_context) {
  validate_segment_spec(seg);
  if (F < 1) throw std::invalid_argument("self_forcing_rollout: need at least one segment");
  const int T = video.frames.rank() == 4 ? video.frames.shape[0] : 0;
  if (T < F * seg.N + seg.n)
    throw std::invalid_argument("self_forcing_rollout: video shorter than the rollout");

  const int base = rng.uniform_int(seg.n, T - F * seg.N);
  SegmentContext ctx;
  ctx.frames = rows(video.frames, base - seg.n, seg.n);
  ctx.source = ContextSource::kGroundTruth;
  ag::Var ctx_var;  // carries the graph when context is not detached

  RolloutResult out;
  ag::Var sum;
  for (int k = 0; k < F; ++k) {
    const int s0 = base + k * seg.N;
    const int t_k = rng.uniform_int(1, sched.T);
    Tensor eps({seg.N, video.frames.shape[1], video.frames.shape[2], video.frames.shape[3]});
    rng.fill_normal(eps);
    Tensor x0 = rows(video.frames, s0, seg.N);
    Tensor x_t = q_sample(x0, t_k, eps, sched);

    ConditioningBundle conds = window_conditioning(video, enc, s0 - seg.n, seg.n + seg.N);
    const std::vector<int> tv = step_vector(seg.n, seg.N, t_k);
    ag::Var eps_hat;
    if (detach_context || !ctx_var.defined()) {
      ExtendedSegment ext = prepend_context(x_t, ctx);
      eps_hat = model(ag::constant(ext.frames), tv, conds, ref);
    } else {
      eps_hat = model(ag::concat0({ctx_var, ag::constant(x_t)}), tv, conds, ref);
    }
    ag::Var seg_hat = ag::slice0(eps_hat, seg.n, seg.N);
    ag::Var loss_k = ag::mse(seg_hat, ag::constant(eps));
    sum = sum.defined() ? ag::add(sum, loss_k) : loss_k;

    SegmentTrace trace;
    trace.context_source = ctx.source;
    trace.seg_start = s0;
    trace.t = t_k;
    trace.loss = loss_k.item();
    trace.eps_target = eps;
    trace.eps_hat = seg_hat.val();
    ag::Var x0_est = estimate_x0_var(x_t, seg_hat, t_k, sched, /*clamp=*/true);
    trace.x0_est = x0_est.val();
    out.segments.push_back(std::move(trace));

    if (k + 1 < F) {
      ctx.source = ContextSource::kModelEstimate;
      ctx.frames = rows(out.segments.back().x0_est, seg.N - seg.n, seg.n);
      if (!detach_context) ctx_var = ag::slice0(x0_est, seg.N - seg.n, seg.n);
    }
  }
  out.total_loss = ag::affine(sum, 1.0 / F, 0.0);
  return out;
}

RolloutResult self_forcing_rollout(const Denoiser& net, const NoiseSchedule& sched,
                                   const VideoSample& video, int F, const SegmentSpec& seg,
                                   const ReferenceFeatures& ref, Rng& rng,
                                   bool detach_context) {
  return self_forcing_rollout(as_denoise_fn(net), net.enc, sched, video, F, seg, ref, rng,
                              detach_context);
}

GeneratedVideo generate_long(const Denoiser& net, const NoiseSchedule& sched,
                             const ConditioningTimeline& conds, int total_frames,
                             const std::optional<Tensor>& init_portrait, const SegmentSpec& seg,
                             const SamplerConfig& sampler) {
  validate_segment_spec(seg);
  if (total_frames < 1) throw std::invalid_argument("generate_long: nothing to generate");
  if (static_cast<int>(conds.audio.size()) < total_frames)
    throw std::invalid_argument("generate_long: conditioning shorter than the video");
  if (conds.camera_flat &&
      (conds.camera_flat->rank() != 2 || conds.camera_flat->shape[0] < total_frames))
    throw std::invalid_argument("generate_long: camera track shorter than the video");
  const int side = net.cfg.side, C = net.cfg.in_channels;
  if (init_portrait && init_portrait->shape != std::vector<int>({C, side, side}))
    throw std::invalid_argument("generate_long: portrait shape mismatch");

  const int n_segments = (total_frames + seg.N - 1) / seg.N;
  const int padded_len = n_segments * seg.N;

  // The final segment is generated in full and trimmed, so the driving
  // signals are edge-extended to cover it.
  VideoSample timeline;
  timeline.frames = Tensor({padded_len, C, side, side});  // only shape/length matter
  timeline.id_embedding = conds.id_embedding;
  timeline.audio = conds.audio;
  if (static_cast<int>(timeline.audio.size()) > padded_len)
    timeline.audio.resize(static_cast<size_t>(padded_len));
  while (static_cast<int>(timeline.audio.size()) < padded_len)
    timeline.audio.push_back(timeline.audio.back());
  if (conds.camera_flat) {
    Tensor cam = rows(*conds.camera_flat, 0, std::min(conds.camera_flat->shape[0], padded_len));
    while (cam.shape[0] < padded_len) cam = vcat(cam, rows(cam, cam.shape[0] - 1, 1));
    timeline.camera_flat = cam;
  }

  const std::vector<int> steps = respaced_steps(sched.T, sampler.steps);

  GeneratedVideo out;
  out.frames = Tensor({total_frames, C, side, side});
  ReferenceFeatures ref;
  std::string ref_tag;
  if (init_portrait) {
    Tensor portrait({1, C, side, side});
    std::copy(init_portrait->data.begin(), init_portrait->data.end(), portrait.data.begin());
    ref = reference_features(net, portrait, conds.id_embedding);
    ref_tag = "portrait";
  } else {
    ref = reference_features(net, Tensor({0, C, side, side}), conds.id_embedding);
    ref_tag = "none";
  }

  SegmentContext ctx;  // first segment: no context
  Tensor prev_tail;    // last generated frames of the previous segment
  for (int k = 0; k < n_segments; ++k) {
    const int s0 = k * seg.N;
    const int n_eff = ctx.size();

    Rng rng = Rng(sampler.seed).child("segment", static_cast<uint64_t>(k));
    Tensor x({seg.N, C, side, side});
    rng.fill_normal(x);

    ConditioningBundle bundle =
        window_conditioning(timeline, net.enc, s0 - n_eff, n_eff + seg.N);
    for (size_t i = 0; i < steps.size(); ++i) {
      const int t_i = steps[i];
      const int t_next = i + 1 < steps.size() ? steps[i + 1] : 0;
      Tensor ext = n_eff > 0 ? vcat(ctx.frames, x) : x;
      ag::Var eps_all =
          denoise(net, ext, step_vector(n_eff, seg.N, t_i), bundle, ref, sampler.cfg_scale);
      Tensor eps_seg = rows(eps_all.val(), n_eff, seg.N);
      Tensor noise({seg.N, C, side, side});
      rng.fill_normal(noise);  // drawn every step to keep the stream aligned
      x = reverse_step_between(x, eps_seg, t_i, t_next, sched, &noise);
    }
    x = clamp_unit(std::move(x));

    GenerationSegmentRecord rec;
    rec.start_frame = s0;
    rec.frames = std::min(seg.N, total_frames - s0);
    rec.context_source = ctx.source;
    rec.reference = ref_tag;
    rec.context = ctx.frames;
    out.segments.push_back(std::move(rec));

    std::copy(x.data.begin(),
              x.data.begin() + static_cast<size_t>(std::min(seg.N, total_frames - s0)) *
                                   static_cast<size_t>(C) * side * side,
              out.frames.data.begin() + static_cast<size_t>(s0) * C * side * side);

    if (k + 1 < n_segments) {
      ctx.frames = rows(x, seg.N - seg.n, seg.n);
      ctx.source = ContextSource::kModelEstimate;
      ref = reference_features(net, rows(x, seg.N - 1, 1), conds.id_embedding);
      ref_tag = "generated-frame";
    }
  }

  out.manifest = nlohmann::json{{"seed", sampler.seed},
                                {"cfg_scale", sampler.cfg_scale},
                                {"respaced_steps", steps},
                                {"segment_frames", seg.N},
                                {"context_frames", seg.n},
                                {"total_frames", total_frames}};
  for (const auto& rec : out.segments)
    out.manifest["segments"].push_back({{"start", rec.start_frame},
                                        {"frames", rec.frames},
                                        {"context_source", to_string(rec.context_source)},
                                        {"reference", rec.reference}});
  return out;
}

}  // namespace blobdiff
