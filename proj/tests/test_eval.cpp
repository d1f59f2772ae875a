#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>

#include "blobdiff/eval.hpp"
#include "blobdiff/world2d.hpp"
#include "testing.hpp"

using namespace blobdiff;

namespace {

struct TalkingClip {
  RenderedClip render;
  std::vector<double> signal;
  BlobIdentity id;
};

TalkingClip make_clip(uint64_t seed, int frames, int side) {
  Rng rng(seed);
  TalkingClip c;
  c.id = sample_identity(rng);
  c.signal = synth_articulation(frames, rng);
  const double R = c.id.radius * side;
  std::vector<BlobPose2D> poses = synth_head_poses(frames, side, side, R, rng);
  c.render = render_talking_blob(c.id, c.signal, poses, side, side);
  return c;
}

// Independent slow-path structural similarity: differently built window
// (unnormalized Gaussian divided at use), two-pass central moments instead of
// raw-moment accumulation.
double ssim_oracle(const Tensor& a, const Tensor& b, double peak) {
  const int h = a.shape[static_cast<size_t>(a.rank() - 2)];
  const int w = a.shape[static_cast<size_t>(a.rank() - 1)];
  std::vector<double> g(121);
  double gsum = 0;
  for (int i = 0; i < 121; ++i) {
    const int dy = i / 11 - 5, dx = i % 11 - 5;
    g[static_cast<size_t>(i)] = std::exp(-(dx * dx + dy * dy) / 4.5);
    gsum += g[static_cast<size_t>(i)];
  }
  const double C1 = 1e-4 * peak * peak, C2 = 9e-4 * peak * peak;
  const size_t plane = static_cast<size_t>(h) * w;
  const size_t planes = a.data.size() / plane;
  double total = 0;
  size_t count = 0;
  for (size_t p = 0; p < planes; ++p) {
    for (int y0 = 0; y0 + 11 <= h; ++y0)
      for (int x0 = 0; x0 + 11 <= w; ++x0) {
        double ma = 0, mb = 0;
        for (int i = 0; i < 121; ++i) {
          const size_t at = p * plane + static_cast<size_t>((y0 + i / 11) * w + x0 + i % 11);
          ma += g[static_cast<size_t>(i)] / gsum * a.data[at];
          mb += g[static_cast<size_t>(i)] / gsum * b.data[at];
        }
        double va = 0, vb = 0, cov = 0;
        for (int i = 0; i < 121; ++i) {
          const size_t at = p * plane + static_cast<size_t>((y0 + i / 11) * w + x0 + i % 11);
          const double da = a.data[at] - ma, db = b.data[at] - mb;
          va += g[static_cast<size_t>(i)] / gsum * da * da;
          vb += g[static_cast<size_t>(i)] / gsum * db * db;
          cov += g[static_cast<size_t>(i)] / gsum * da * db;
        }
        total += ((2 * ma * mb + C1) * (2 * cov + C2)) /
                 ((ma * ma + mb * mb + C1) * (va + vb + C2));
        ++count;
      }
  }
  return total / static_cast<double>(count);
}

}  // namespace

TEST_CASE("pearson: known values and degenerate inputs") {
  std::vector<double> x{1, 2, 3, 4, 5};
  std::vector<double> y{2, 4, 6, 8, 10};
  std::vector<double> z{5, 4, 3, 2, 1};
  CHECK(*pearson(x, y) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(*pearson(x, z) == doctest::Approx(-1.0).epsilon(1e-12));
  CHECK_FALSE(pearson(x, std::vector<double>{3, 3, 3, 3, 3}).has_value());
  CHECK_THROWS(pearson(x, std::vector<double>{1, 2}));
}

TEST_CASE("lip sync: ground truth scores near 1, shuffles near 0, constants flagged") {
  TalkingClip c = make_clip(9001, 100, 32);
  LipSyncResult own = lip_sync_score(c.render.frames, c.render.mouth_regions, c.signal);
  REQUIRE(own.applicable);
  CHECK(own.r >= 0.99);

  Rng shuffle_rng(9002);
  std::vector<double> shuffled = c.signal;
  for (size_t i = shuffled.size(); i > 1; --i)
    std::swap(shuffled[i - 1],
              shuffled[static_cast<size_t>(shuffle_rng.uniform_int(0, static_cast<int>(i) - 1))]);
  LipSyncResult rand = lip_sync_score(c.render.frames, c.render.mouth_regions, shuffled);
  REQUIRE(rand.applicable);
  CHECK(std::abs(rand.r) < 0.3);

  LipSyncResult flat = lip_sync_score(c.render.frames, c.render.mouth_regions,
                                      std::vector<double>(100, 0.5));
  CHECK_FALSE(flat.applicable);

  // A delayed copy of the signal is matched via the lag search.
  std::vector<double> delayed(c.signal.size());
  for (size_t j = 0; j < delayed.size(); ++j)
    delayed[j] = c.signal[j >= 2 ? j - 2 : 0];
  LipSyncResult lagged = lip_sync_score(c.render.frames, c.render.mouth_regions, delayed);
  REQUIRE(lagged.applicable);
  CHECK(lagged.lag == 2);
  CHECK(lagged.r >= 0.98);

  CHECK_THROWS(lip_sync_score(c.render.frames, c.render.mouth_regions,
                              std::vector<double>(7, 0.5)));
}

TEST_CASE("mouth locator: agrees with render metadata, supports metadata-free scoring") {
  TalkingClip c = make_clip(9003, 80, 32);
  Tensor located = locate_mouth_regions(c.render.frames);
  REQUIRE(located.shape == std::vector<int>({80, 4}));
  for (int f = 0; f < 80; ++f) {
    const double dx = located.at(f, 0) - c.render.mouth_regions.at(f, 0);
    const double dy = located.at(f, 1) - c.render.mouth_regions.at(f, 1);
    CHECK(std::sqrt(dx * dx + dy * dy) < 1.5);
    CHECK(located.at(f, 2) > 0.0);
    CHECK(located.at(f, 3) > 0.0);
  }
  LipSyncResult found = lip_sync_score(c.render.frames, c.signal);
  REQUIRE(found.applicable);
  CHECK(found.r >= 0.98);
}

TEST_CASE("pose recovery: static zero, scripted amplitudes, offset invariance") {
  Rng rng(9004);
  // A moderate blob: the scripted swing plus offset must stay inside the
  // frame for every pose below.
  BlobIdentity id = sample_identity(rng);
  while (id.radius > 0.28) id = sample_identity(rng);
  const int side = 32;
  const double R = id.radius * side;
  const int F = 64;

  std::vector<double> aperture(F, 0.3);
  std::vector<BlobPose2D> still(F, BlobPose2D{16.0, 16.0, 0.0});
  PoseStd s0 = pose_std(recover_pose_track(render_talking_blob(id, aperture, still, side, side).frames));
  CHECK(s0.center < 1e-9);  // identical frames: zero up to summation rounding
  CHECK(s0.rot < 1e-9);

  // Four full cycles of cx = 16 + A sin: discrete std is exactly A/sqrt(2).
  const double A = 2.5;
  std::vector<BlobPose2D> swing(F, BlobPose2D{16.0, 16.0, 0.0});
  for (int f = 0; f < F; ++f) swing[static_cast<size_t>(f)].cx = 16.0 + A * std::sin(2.0 * M_PI * f / 16.0);
  PoseStd s1 = pose_std(recover_pose_track(render_talking_blob(id, aperture, swing, side, side).frames));
  CHECK(s1.center == doctest::Approx(A / std::sqrt(2.0)).epsilon(0.10));

  const double B = 0.25;
  std::vector<BlobPose2D> turn(F, BlobPose2D{16.0, 16.0, 0.0});
  for (int f = 0; f < F; ++f) turn[static_cast<size_t>(f)].rot = B * std::sin(2.0 * M_PI * f / 16.0);
  PoseStd s2 = pose_std(recover_pose_track(render_talking_blob(id, aperture, turn, side, side).frames));
  CHECK(s2.rot == doctest::Approx(B / std::sqrt(2.0)).epsilon(0.10));

  // An integer constant offset shifts the recovered track without touching
  // its spread (the render is translation-equivariant at integer shifts).
  std::vector<BlobPose2D> shifted = swing;
  for (auto& p : shifted) {
    p.cx += 3.0;
    p.cy += 2.0;
  }
  CHECK(16.0 + A + 3.0 + R < side - 1);  // stays inside the frame
  PoseStd s3 = pose_std(recover_pose_track(render_talking_blob(id, aperture, shifted, side, side).frames));
  CHECK(s3.center == doctest::Approx(s1.center).epsilon(1e-9));
  CHECK(std::abs(s3.rot - s1.rot) < 1e-9);
}

TEST_CASE("psnr: cap, closed form, and the noise expectation") {
  Rng rng(9005);
  Tensor a = testing::random_tensor(rng, {3, 16, 16}, 0.3);
  CHECK(psnr(a, a) == kPsnrCap);

  Tensor b = a;
  for (auto& v : b.data) v += 0.1;
  CHECK(psnr(a, b) == doctest::Approx(10.0 * std::log10(4.0 / 0.01)).epsilon(1e-12));

  // Uniform Gaussian noise sigma 0.1 on a peak-2 scale: PSNR concentrates at
  // 20 log10(2/0.1) = 26.02 dB.
  double acc = 0;
  for (int trial = 0; trial < 100; ++trial) {
    Tensor n({3, 32, 32});
    rng.fill_normal(n);
    Tensor c({3, 32, 32});
    rng.fill_normal(c);
    for (size_t i = 0; i < c.data.size(); ++i) c.data[i] = std::tanh(c.data[i]);
    Tensor d = c;
    for (size_t i = 0; i < d.data.size(); ++i) d.data[i] += 0.1 * n.data[i];
    acc += psnr(c, d);
  }
  CHECK(acc / 100.0 == doctest::Approx(20.0 * std::log10(2.0 / 0.1)).epsilon(0.02));

  CHECK_THROWS(psnr(a, Tensor::zeros({2, 2})));
  CHECK_THROWS(psnr(a, a, 0.0));
}

TEST_CASE("ssim: exact cases, symmetry, and the slow-path oracle") {
  Rng rng(9006);
  Tensor a = testing::random_tensor(rng, {3, 16, 16}, 0.4);
  CHECK(ssim(a, a) == doctest::Approx(1.0).epsilon(1e-12));

  Tensor b = testing::random_tensor(rng, {3, 16, 16}, 0.4);
  CHECK(ssim(a, b) == doctest::Approx(ssim(b, a)).epsilon(1e-12));

  // Constant planes have zero variance: only the luminance term survives.
  Tensor c1 = Tensor::zeros({1, 12, 12});
  Tensor c2 = Tensor::zeros({1, 12, 12});
  for (auto& v : c1.data) v = 0.5;
  for (auto& v : c2.data) v = -0.2;
  const double C1 = 1e-4 * 4.0;
  CHECK(ssim(c1, c2) ==
        doctest::Approx((2 * 0.5 * -0.2 + C1) / (0.25 + 0.04 + C1)).epsilon(1e-9));

  for (int i = 0; i < 10; ++i) {
    Tensor x = testing::random_tensor(rng, {1, 14, 14}, 0.5);
    Tensor y = x;
    for (size_t j = 0; j < y.data.size(); ++j)
      y.data[j] = std::tanh(y.data[j] + 0.2 * rng.uniform());
    const double fast = ssim(x, y);
    CHECK(fast == doctest::Approx(ssim_oracle(x, y, 2.0)).epsilon(1e-9));
    CHECK(fast >= -1.0);
    CHECK(fast <= 1.0);
  }

  CHECK_THROWS(ssim(Tensor::zeros({1, 10, 10}), Tensor::zeros({1, 10, 10})));
}

TEST_CASE("view metrics: per-frame averaging") {
  Rng rng(9007);
  Tensor gt = testing::random_tensor(rng, {2, 3, 16, 16}, 0.4);
  Tensor gen = gt;
  // Frame 0 untouched, frame 1 perturbed.
  const size_t fsz = 3 * 16 * 16;
  for (size_t i = fsz; i < 2 * fsz; ++i) gen.data[i] += 0.05;
  ViewMetrics vm = view_metrics(gen, gt);

  Tensor f0({3, 16, 16}), g0({3, 16, 16}), f1({3, 16, 16}), g1({3, 16, 16});
  std::copy_n(gt.data.begin(), fsz, f0.data.begin());
  std::copy_n(gen.data.begin(), fsz, g0.data.begin());
  std::copy_n(gt.data.begin() + fsz, fsz, f1.data.begin());
  std::copy_n(gen.data.begin() + fsz, fsz, g1.data.begin());
  CHECK(vm.psnr == doctest::Approx(0.5 * (psnr(g0, f0) + psnr(g1, f1))).epsilon(1e-12));
  CHECK(vm.ssim == doctest::Approx(0.5 * (ssim(g0, f0) + ssim(g1, f1))).epsilon(1e-12));
  CHECK_THROWS(view_metrics(gt, Tensor::zeros({2, 3, 8, 8})));
}

TEST_CASE("identity probe: training separates identities and round-trips") {
  ProbeTrainConfig cfg;
  cfg.identities = 160;
  cfg.frames_per_identity = 3;
  cfg.steps = 450;
  cfg.batch = 32;
  cfg.seed = 9100;
  std::vector<double> losses;
  IdentityProbe probe = train_identity_probe(cfg, &losses);
  REQUIRE(probe.frozen);
  REQUIRE(static_cast<int>(losses.size()) == cfg.steps);
  double early = 0, late = 0;
  for (int i = 0; i < 20; ++i) {
    early += losses[static_cast<size_t>(i)];
    late += losses[losses.size() - 20 + static_cast<size_t>(i)];
  }
  CHECK(late < 0.5 * early);

  // Validation on identities the probe never saw.
  const int kFresh = 12;
  std::vector<Tensor> clips;
  std::vector<Tensor> targets;
  Rng fresh(9200);
  for (int i = 0; i < kFresh; ++i) {
    Rng rng = fresh.child("holdout", static_cast<uint64_t>(i));
    BlobIdentity id = sample_identity(rng);
    const double R = id.radius * 32;
    const double room = std::max(0.0, 16.0 - R - 2.0);
    std::vector<double> ap;
    std::vector<BlobPose2D> poses;
    for (int k = 0; k < 3; ++k) {
      BlobPose2D p;
      p.cx = 16.0 + (2.0 * rng.uniform() - 1.0) * room;
      p.cy = 16.0 + (2.0 * rng.uniform() - 1.0) * room;
      p.rot = (2.0 * rng.uniform() - 1.0) * 0.12;
      poses.push_back(p);
      // Mouth visibly open: a closed mouth hides the mouth-width trait, so
      // frames used to judge identity keep the articulators in view.
      ap.push_back(0.5 + 0.5 * rng.uniform());
    }
    clips.push_back(render_talking_blob(id, ap, poses, 32, 32).frames);
    targets.push_back(id.embedding);
  }

  double same_mean = 0;
  std::vector<double> same, diff;
  for (int i = 0; i < kFresh; ++i) {
    const double s = identity_similarity(probe, clips[static_cast<size_t>(i)],
                                         targets[static_cast<size_t>(i)]);
    same.push_back(s);
    same_mean += s;
    diff.push_back(identity_similarity(probe, clips[static_cast<size_t>(i)],
                                       targets[static_cast<size_t>((i + 1) % kFresh)]));
  }
  same_mean /= kFresh;
  CHECK(same_mean >= 0.95);

  int wins = 0, trials = 0;
  for (double s : same)
    for (double d : diff) {
      wins += s > d ? 1 : 0;
      ++trials;
    }
  CHECK(static_cast<double>(wins) / trials >= 0.95);

  Tensor v({3}, {1.0, -2.0, 0.5});
  CHECK(cosine(v, v) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK_THROWS(cosine(v, Tensor::zeros({2})));
  CHECK_THROWS(identity_similarity(probe, clips[0], Tensor::zeros({5})));

  namespace fs = std::filesystem;
  fs::path dir = fs::temp_directory_path() / "blobdiff_probe_test";
  fs::create_directories(dir);
  const std::string path = (dir / "probe.ckpt").string();
  save_identity_probe(probe, path);
  IdentityProbe back = load_identity_probe(path);
  CHECK(back.side == probe.side);
  CHECK(probe_embed(back, clips[0]).bit_equal(probe_embed(probe, clips[0])));
  const std::string bad = (dir / "other.ckpt").string();
  save_tensors(bad, {}, json{{"kind", "other"}});
  CHECK_THROWS(load_identity_probe(bad));
  fs::remove_all(dir);
}

TEST_CASE("eval report: round trip and comparison text") {
  EvalReport r;
  r.dataset_id = "talking-val";
  r.config_hash = "abc123";
  r.metrics["lip_sync_r"] = 0.82;
  r.metrics["identity_cosine"] = 0.91;
  r.per_clip.push_back(json{{"clip", "clip_000"}, {"lip_sync_r", 0.8}});

  namespace fs = std::filesystem;
  fs::path dir = fs::temp_directory_path() / "blobdiff_eval_report_test";
  fs::create_directories(dir);
  const std::string path = (dir / "report.json").string();
  save_eval_report(path, r);
  EvalReport back = load_eval_report(path);
  CHECK(back.dataset_id == r.dataset_id);
  CHECK(back.config_hash == r.config_hash);
  CHECK(back.metrics == r.metrics);
  CHECK(back.per_clip == r.per_clip);

  EvalReport other = r;
  other.metrics["lip_sync_r"] = 0.7;
  other.metrics["psnr"] = 19.0;
  std::string text = compare_reports(r, other);
  CHECK(text.find("lip_sync_r") != std::string::npos);
  CHECK(text.find("psnr") != std::string::npos);
  CHECK(text.find("talking-val") != std::string::npos);

  save_json((dir / "bogus.json").string(), json{{"kind", "other"}});
  CHECK_THROWS(load_eval_report((dir / "bogus.json").string()));
  fs::remove_all(dir);
}
