#include <doctest.h>

#include <cmath>

#include "blobdiff/autoreg.hpp"
#include "blobdiff/dataset.hpp"
#include "blobdiff/params.hpp"
#include "testing.hpp"

using namespace blobdiff;

namespace {

UNetConfig tiny_unet() {
  UNetConfig cfg;
  cfg.side = 8;
  cfg.base = 8;
  cfg.mults = {1};
  cfg.attn_levels = {0};
  cfg.gn_groups = 4;
  cfg.temb_dim = 8;
  cfg.lora_rank = 2;
  cfg.use_camera = false;
  return cfg;
}

EncoderConfig tiny_enc() {
  EncoderConfig enc;
  enc.d_id = 4;
  enc.L_id = 2;
  enc.d_a = 6;
  enc.audio_window = 3;
  enc.d_model = 16;
  enc.hidden = 8;
  return enc;
}

VideoSample tiny_video(Rng& rng, int T, int side) {
  VideoSample v;
  v.frames = testing::random_tensor(rng, {T, 3, side, side}, 0.6);
  for (auto& x : v.frames.data) x = std::tanh(x);
  Tensor id({4});
  rng.fill_normal(id);
  double norm = 0;
  for (double x : id.data) norm += x * x;
  for (auto& x : id.data) x /= std::sqrt(norm);
  v.id_embedding = id;
  v.audio.resize(static_cast<size_t>(T));
  for (auto& a : v.audio) a = rng.uniform();
  return v;
}

struct TinyModel {
  ParamStore ps;
  Denoiser net;
  TinyModel() : net(make()) {}

 private:
  Denoiser make() {
    Rng rng(9000);
    return build_denoiser(ps, tiny_unet(), tiny_enc(), rng);
  }
};

}  // namespace

TEST_CASE("prepend_context: stacking, mask, identity and validation") {
  Rng rng(800);
  Tensor segment = testing::random_tensor(rng, {16, 3, 4, 4}, 0.5);
  SegmentContext none;
  ExtendedSegment plain = prepend_context(segment, none);
  CHECK(plain.frames.bit_equal(segment));
  CHECK(plain.n == 0);
  CHECK(plain.context_mask.size() == 16);
  for (bool m : plain.context_mask) CHECK_FALSE(m);

  SegmentContext ctx;
  ctx.frames = testing::random_tensor(rng, {2, 3, 4, 4}, 0.4);
  for (auto& v : ctx.frames.data) v = std::tanh(v);
  ExtendedSegment ext = prepend_context(segment, ctx);
  REQUIRE(ext.frames.shape == std::vector<int>({18, 3, 4, 4}));
  CHECK(ext.n == 2);
  CHECK(ext.N == 16);
  REQUIRE(ext.context_mask.size() == 18);
  CHECK(ext.context_mask[0]);
  CHECK(ext.context_mask[1]);
  for (size_t i = 2; i < 18; ++i) CHECK_FALSE(ext.context_mask[i]);
  // Context occupies the front, the segment passes through bit-identically.
  const size_t fsz = 3 * 4 * 4;
  for (size_t i = 0; i < 2 * fsz; ++i) CHECK(ext.frames.data[i] == ctx.frames.data[i]);
  for (size_t i = 0; i < 16 * fsz; ++i)
    CHECK(ext.frames.data[2 * fsz + i] == segment.data[i]);

  SegmentContext bad = ctx;
  bad.frames = testing::random_tensor(rng, {2, 3, 5, 5}, 0.4);
  CHECK_THROWS(prepend_context(segment, bad));  // spatial mismatch
  bad.frames = ctx.frames;
  bad.frames.data[0] = 3.0;
  CHECK_THROWS(prepend_context(segment, bad));  // not a clean pixel
  bad.frames.data[0] = std::nan("");
  CHECK_THROWS(prepend_context(segment, bad));  // non-finite
}

TEST_CASE("teacher forcing: loss covers segment positions only and replays exactly") {
  TinyModel m;
  NoiseSchedule sched = default_schedule();
  Rng vid_rng(801);
  VideoSample video = tiny_video(vid_rng, 14, 8);
  SegmentSpec seg{4, 2};
  ReferenceFeatures ref =
      reference_features(m.net, Tensor({0, 3, 8, 8}), video.id_embedding);

  Rng r1(802), r2(802);
  SegmentStepResult a = teacher_forcing_step(m.net, sched, video, seg, ref, r1);
  SegmentStepResult b = teacher_forcing_step(m.net, sched, video, seg, ref, r2);
  CHECK(a.loss.item() == b.loss.item());
  CHECK(a.draw.seg_start == b.draw.seg_start);
  CHECK(a.draw.t == b.draw.t);
  CHECK(a.draw.eps.bit_equal(b.draw.eps));

  // The loss is exactly the MSE between the segment-position predictions and
  // the drawn noise; context positions play no part.
  REQUIRE(a.eps_hat_seg.shape() == std::vector<int>({4, 3, 8, 8}));
  double manual = 0;
  for (size_t i = 0; i < a.draw.eps.data.size(); ++i) {
    double d = a.eps_hat_seg.val().data[i] - a.draw.eps.data[i];
    manual += d * d;
  }
  manual /= static_cast<double>(a.draw.eps.data.size());
  CHECK(a.loss.item() == doctest::Approx(manual).epsilon(1e-12));

  CHECK(a.context.source == ContextSource::kGroundTruth);
  CHECK(a.context.frames.bit_equal(
      [&] {
        Tensor t({2, 3, 8, 8});
        const size_t fsz = 3 * 8 * 8;
        std::copy(video.frames.data.begin() + (a.draw.seg_start - 2) * fsz,
                  video.frames.data.begin() + a.draw.seg_start * fsz, t.data.begin());
        return t;
      }()));

  Rng r3(803);
  VideoSample tiny = tiny_video(r3, 5, 8);  // 5 < N + n
  CHECK_THROWS(teacher_forcing_step(m.net, sched, tiny, seg, ref, r3));
}

TEST_CASE("teacher forcing: gradients reach the trainable parameters") {
  TinyModel m;
  NoiseSchedule sched = default_schedule();
  Rng vid_rng(804);
  VideoSample video = tiny_video(vid_rng, 10, 8);
  SegmentSpec seg{4, 2};
  ReferenceFeatures ref =
      reference_features(m.net, Tensor({0, 3, 8, 8}), video.id_embedding);
  Rng rng(805);
  SegmentStepResult r = teacher_forcing_step(m.net, sched, video, seg, ref, rng);
  ag::backward(r.loss);
  ag::Var w = m.ps.get("unet.in.conv.w");
  REQUIRE(w.grad().shape == w.val().shape);
  double norm = 0;
  for (double g : w.grad().data) norm += g * g;
  CHECK(norm > 0.0);
}

TEST_CASE("x0 estimate: inverts q_sample under the true noise, clamp optional") {
  NoiseSchedule sched = default_schedule();
  Rng rng(806);
  Tensor x0 = testing::random_tensor(rng, {3, 2, 4, 4}, 0.5);
  for (auto& v : x0.data) v = std::tanh(v);
  Tensor eps = testing::random_tensor(rng, {3, 2, 4, 4});
  const int t = 120;
  Tensor x_t = q_sample(x0, t, eps, sched);
  ag::Var est = estimate_x0_var(x_t, ag::constant(eps), t, sched, false);
  CHECK(est.val().max_abs_diff(x0) < 1e-9);

  // Clamped variant stays within pixel range even for a wrong prediction.
  Tensor wrong = eps;
  for (auto& v : wrong.data) v += 2.0;
  ag::Var clamped = estimate_x0_var(x_t, ag::constant(wrong), t, sched, true);
  for (double v : clamped.val().data) {
    CHECK(v >= -1.0);
    CHECK(v <= 1.0);
  }
  CHECK_THROWS(estimate_x0_var(x_t, ag::constant(eps), 0, sched, false));
  CHECK_THROWS(estimate_x0_var(x_t, ag::constant(Tensor::zeros({1})), t, sched, false));
}

TEST_CASE("self-forcing: F=1 reduces to teacher forcing bit-for-bit") {
  TinyModel m;
  NoiseSchedule sched = default_schedule();
  Rng vid_rng(807);
  VideoSample video = tiny_video(vid_rng, 12, 8);
  SegmentSpec seg{4, 2};
  ReferenceFeatures ref =
      reference_features(m.net, Tensor({0, 3, 8, 8}), video.id_embedding);

  Rng ra(808), rb(808);
  RolloutResult roll = self_forcing_rollout(m.net, sched, video, 1, seg, ref, ra);
  SegmentStepResult tf = teacher_forcing_step(m.net, sched, video, seg, ref, rb);
  REQUIRE(roll.segments.size() == 1);
  CHECK(roll.total_loss.item() == tf.loss.item());
  CHECK(roll.segments[0].seg_start == tf.draw.seg_start);
  CHECK(roll.segments[0].t == tf.draw.t);
  CHECK(roll.segments[0].eps_target.bit_equal(tf.draw.eps));
  CHECK(roll.segments[0].context_source == ContextSource::kGroundTruth);
}

TEST_CASE("self-forcing: F=2 exposure chain, trace contents, loss reduction") {
  TinyModel m;
  NoiseSchedule sched = default_schedule();
  Rng vid_rng(809);
  VideoSample video = tiny_video(vid_rng, 12, 8);
  SegmentSpec seg{4, 2};
  ReferenceFeatures ref =
      reference_features(m.net, Tensor({0, 3, 8, 8}), video.id_embedding);

  Rng rng(810);
  RolloutResult roll = self_forcing_rollout(m.net, sched, video, 2, seg, ref, rng);
  REQUIRE(roll.segments.size() == 2);
  CHECK(roll.segments[0].context_source == ContextSource::kGroundTruth);
  CHECK(roll.segments[1].context_source == ContextSource::kModelEstimate);
  CHECK(roll.segments[1].seg_start == roll.segments[0].seg_start + 4);
  CHECK(roll.total_loss.item() ==
        doctest::Approx(0.5 * (roll.segments[0].loss + roll.segments[1].loss))
            .epsilon(1e-12));
  for (const auto& t : roll.segments) {
    for (double v : t.x0_est.data) {
      CHECK(v >= -1.0);
      CHECK(v <= 1.0);
    }
    CHECK(t.eps_hat.shape == std::vector<int>({4, 3, 8, 8}));
  }

  Rng short_rng(811);
  VideoSample tiny = tiny_video(short_rng, 9, 8);  // 9 < 2N + n
  CHECK_THROWS(self_forcing_rollout(m.net, sched, tiny, 2, seg, ref, short_rng));
}

TEST_CASE("self-forcing: a perfect noise oracle recovers ground-truth context, zero loss") {
  NoiseSchedule sched = default_schedule();
  Rng vid_rng(812);
  VideoSample video = tiny_video(vid_rng, 12, 8);
  SegmentSpec seg{4, 2};
  ReferenceFeatures no_ref;
  EncoderConfig enc = tiny_enc();

  // Replay the rollout's draws to know each segment's true noise in advance.
  const uint64_t seed = 813;
  std::vector<Tensor> true_eps;
  {
    Rng replay(seed);
    replay.uniform_int(seg.n, 12 - 2 * seg.N);  // base
    for (int k = 0; k < 2; ++k) {
      replay.uniform_int(1, sched.T);
      Tensor eps({seg.N, 3, 8, 8});
      replay.fill_normal(eps);
      true_eps.push_back(eps);
    }
  }
  int call = 0;
  DenoiseFn oracle = [&](const ag::Var& x, const std::vector<int>& t,
                         const ConditioningBundle&, const ReferenceFeatures&) {
    const int n_ctx = static_cast<int>(std::count(t.begin(), t.end(), 0));
    Tensor full(x.val().shape);
    const size_t fsz = full.numel() / static_cast<size_t>(full.shape[0]);
    const Tensor& eps = true_eps[static_cast<size_t>(call++)];
    std::copy(eps.data.begin(), eps.data.end(),
              full.data.begin() + static_cast<size_t>(n_ctx) * fsz);
    return ag::constant(full);
  };

  Rng rng(seed);
  RolloutResult roll = self_forcing_rollout(oracle, enc, sched, video, 2, seg, no_ref, rng);
  CHECK(roll.total_loss.item() == doctest::Approx(0.0).epsilon(1e-18));
  // With the true noise, the x0 estimate is the ground-truth segment, so the
  // second segment's context equals the matching video frames.
  const size_t fsz = 3 * 8 * 8;
  const int s0 = roll.segments[0].seg_start;
  for (int f = 0; f < seg.N; ++f)
    for (size_t i = 0; i < fsz; ++i)
      CHECK(roll.segments[0].x0_est.data[static_cast<size_t>(f) * fsz + i] ==
            doctest::Approx(video.frames.data[static_cast<size_t>(s0 + f) * fsz + i])
                .epsilon(1e-9));
  CHECK(roll.segments[1].context_source == ContextSource::kModelEstimate);
}

TEST_CASE("self-forcing: detaching context changes gradients, not values") {
  TinyModel m;
  // The temporal out-projections start at zero, so a fresh network treats
  // frames independently and no gradient can cross the context boundary.
  // Give them small nonzero weights so cross-frame influence exists.
  Rng mix_rng(8141);
  for (const std::string& name : m.ps.names_matching({"*temporal.o.w"})) {
    Tensor w = m.ps.get(name).val();
    mix_rng.fill_normal(w);
    for (auto& v : w.data) v *= 0.05;
    m.ps.load_values({{name, w}}, /*strict=*/false);
  }
  REQUIRE(m.ps.names_matching({"*temporal.o.w"}).size() > 0);
  NoiseSchedule sched = default_schedule();
  Rng vid_rng(814);
  VideoSample video = tiny_video(vid_rng, 12, 8);
  SegmentSpec seg{4, 2};
  ReferenceFeatures ref =
      reference_features(m.net, Tensor({0, 3, 8, 8}), video.id_embedding);

  auto run = [&](bool detach) {
    Rng rng(815);
    m.ps.zero_grads();
    RolloutResult roll = self_forcing_rollout(m.net, sched, video, 2, seg, ref, rng, detach);
    ag::backward(roll.total_loss);
    return std::pair<double, Tensor>{roll.total_loss.item(),
                                     m.ps.get("unet.in.conv.w").grad()};
  };
  auto [loss_detached, grad_detached] = run(true);
  auto [loss_full, grad_full] = run(false);
  CHECK(loss_detached == loss_full);
  CHECK(grad_detached.max_abs_diff(grad_full) > 0.0);
}

TEST_CASE("generate_long: single segment, prefix determinism, replay") {
  TinyModel m;
  NoiseSchedule sched = default_schedule();
  Rng rng(816);
  ConditioningTimeline conds;
  Tensor id({4});
  rng.fill_normal(id);
  double norm = 0;
  for (double x : id.data) norm += x * x;
  for (auto& x : id.data) x /= std::sqrt(norm);
  conds.id_embedding = id;
  conds.audio.assign(16, 0.5);
  SegmentSpec seg{4, 2};
  SamplerConfig sampler;
  sampler.steps = 6;
  sampler.seed = 817;

  GeneratedVideo one = generate_long(m.net, sched, conds, 4, std::nullopt, seg, sampler);
  REQUIRE(one.frames.shape == std::vector<int>({4, 3, 8, 8}));
  REQUIRE(one.segments.size() == 1);
  CHECK(one.segments[0].reference == "none");
  CHECK(one.segments[0].context.numel() == 0);

  GeneratedVideo two = generate_long(m.net, sched, conds, 8, std::nullopt, seg, sampler);
  REQUIRE(two.frames.shape == std::vector<int>({8, 3, 8, 8}));
  const size_t fsz = 3 * 8 * 8;
  for (size_t i = 0; i < 4 * fsz; ++i) CHECK(two.frames.data[i] == one.frames.data[i]);

  GeneratedVideo again = generate_long(m.net, sched, conds, 8, std::nullopt, seg, sampler);
  CHECK(again.frames.bit_equal(two.frames));

  for (double v : two.frames.data) {
    CHECK(v >= -1.0);
    CHECK(v <= 1.0);
  }
}

TEST_CASE("generate_long: chained segments share boundary frames exactly") {
  TinyModel m;
  NoiseSchedule sched = default_schedule();
  Rng rng(818);
  ConditioningTimeline conds;
  Tensor id({4});
  rng.fill_normal(id);
  double norm = 0;
  for (double x : id.data) norm += x * x;
  for (auto& x : id.data) x /= std::sqrt(norm);
  conds.id_embedding = id;
  conds.audio.assign(11, 0.4);
  for (size_t i = 0; i < conds.audio.size(); ++i)
    conds.audio[i] = 0.3 + 0.4 * std::sin(0.7 * static_cast<double>(i));
  SegmentSpec seg{4, 2};
  SamplerConfig sampler;
  sampler.steps = 5;
  sampler.seed = 819;

  GeneratedVideo v = generate_long(m.net, sched, conds, 11, std::nullopt, seg, sampler);
  REQUIRE(v.frames.shape == std::vector<int>({11, 3, 8, 8}));
  REQUIRE(v.segments.size() == 3);
  CHECK(v.segments[0].context_source == ContextSource::kGroundTruth);
  CHECK(v.segments[1].context_source == ContextSource::kModelEstimate);
  CHECK(v.segments[1].reference == "generated-frame");
  CHECK(v.segments[2].reference == "generated-frame");
  CHECK(v.segments[2].frames == 3);  // trimmed tail

  // Each later segment's context is a bit-exact copy of the frames already in
  // the output at the boundary: context copy, not regeneration.
  const size_t fsz = 3 * 8 * 8;
  for (size_t k = 1; k < v.segments.size(); ++k) {
    const auto& rec = v.segments[k];
    REQUIRE(rec.context.shape == std::vector<int>({2, 3, 8, 8}));
    for (int f = 0; f < 2; ++f)
      for (size_t i = 0; i < fsz; ++i)
        CHECK(rec.context.data[static_cast<size_t>(f) * fsz + i] ==
              v.frames.data[static_cast<size_t>(rec.start_frame - 2 + f) * fsz + i]);
  }

  CHECK(v.manifest.at("seed").get<uint64_t>() == 819);
  CHECK(v.manifest.at("segments").size() == 3);
  CHECK(v.manifest.at("context_frames").get<int>() == 2);

  ConditioningTimeline short_conds = conds;
  short_conds.audio.resize(5);
  CHECK_THROWS(generate_long(m.net, sched, short_conds, 11, std::nullopt, seg, sampler));
}

TEST_CASE("generate_long: portrait seeds the first segment's reference") {
  TinyModel m;
  NoiseSchedule sched = default_schedule();
  Rng rng(820);
  ConditioningTimeline conds;
  Tensor id({4});
  rng.fill_normal(id);
  double norm = 0;
  for (double x : id.data) norm += x * x;
  for (auto& x : id.data) x /= std::sqrt(norm);
  conds.id_embedding = id;
  conds.audio.assign(4, 0.5);
  Tensor portrait = testing::random_tensor(rng, {3, 8, 8}, 0.4);
  for (auto& v : portrait.data) v = std::tanh(v);
  SegmentSpec seg{4, 2};
  SamplerConfig sampler;
  sampler.steps = 4;
  sampler.seed = 821;

  GeneratedVideo with = generate_long(m.net, sched, conds, 4, portrait, seg, sampler);
  GeneratedVideo without = generate_long(m.net, sched, conds, 4, std::nullopt, seg, sampler);
  CHECK(with.segments[0].reference == "portrait");
  CHECK(without.segments[0].reference == "none");
  // The reference actually steers the output.
  CHECK(with.frames.max_abs_diff(without.frames) > 0.0);
  CHECK_THROWS(
      generate_long(m.net, sched, conds, 4, Tensor({3, 4, 4}), seg, sampler));
}
