#include "blobdiff/eval.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <sstream>
#include <stdexcept>

#include "blobdiff/autograd.hpp"
#include "blobdiff/optim.hpp"
#include "blobdiff/world2d.hpp"

namespace blobdiff {

namespace {

// Luminance thresholds tied to the renderer's palette: background 0.10,
// feature interiors 0.05, body channels >= 0.20.
constexpr double kBgLum = 0.10;
constexpr double kBodyCut = 0.15;     // above this counts as body mass
constexpr double kFeatureCut = 0.075; // below this counts as a dark feature
constexpr double kMouthDrop = 0.45;   // mouth center offset below blob center, / R

double lum01(const Tensor& frames, int f, int y, int x) {
  double s = 0;
  for (int c = 0; c < 3; ++c) s += 0.5 * (frames.at(f, c, y, x) + 1.0);
  return s / 3.0;
}

struct FramePose {
  double cx = 0, cy = 0, rot = 0, radius = 0;
  bool found = false;
};

FramePose recover_frame_pose(const Tensor& frames, int f) {
  const int h = frames.shape[2], w = frames.shape[3];
  FramePose p;
  double mass = 0, mx = 0, my = 0;
  int support = 0;
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const double wgt = std::max(0.0, lum01(frames, f, y, x) - kBodyCut);
      if (wgt <= 0.0) continue;
      mass += wgt;
      mx += wgt * (x + 0.5);
      my += wgt * (y + 0.5);
      ++support;
    }
  }
  if (mass <= 0.0) {
    p.cx = 0.5 * w;
    p.cy = 0.5 * h;
    return p;
  }
  p.found = true;
  p.cx = mx / mass;
  p.cy = my / mass;
  p.radius = std::sqrt(support / M_PI);

  // Rotation from the eye pair: dark pixels in the upper half of the disc,
  // weighted by darkness depth; the principal axis of their scatter is the
  // line through both eyes.
  double ew = 0, ex = 0, ey = 0;
  double sxx = 0, sxy = 0, syy = 0;
  const double reach = 1.1 * p.radius;
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const double px = x + 0.5, py = y + 0.5;
      const double dx = px - p.cx, dy = py - p.cy;
      if (dx * dx + dy * dy > reach * reach) continue;
      if (dy > -0.05 * p.radius) continue;  // keep clear of the mouth
      const double depth = kFeatureCut + 0.025 - lum01(frames, f, y, x);
      if (depth <= 0.0) continue;
      ew += depth;
      ex += depth * px;
      ey += depth * py;
    }
  }
  if (ew > 1e-9) {
    const double cex = ex / ew, cey = ey / ew;
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        const double px = x + 0.5, py = y + 0.5;
        const double dx = px - p.cx, dy = py - p.cy;
        if (dx * dx + dy * dy > reach * reach) continue;
        if (dy > -0.05 * p.radius) continue;
        const double depth = kFeatureCut + 0.025 - lum01(frames, f, y, x);
        if (depth <= 0.0) continue;
        sxx += depth * (px - cex) * (px - cex);
        sxy += depth * (px - cex) * (py - cey);
        syy += depth * (py - cey) * (py - cey);
      }
    }
    // Orientation of the major axis of the 2x2 scatter; the eye separation
    // dominates each eye's own footprint, so this is the eye-line angle.
    if (sxx + syy > 1e-9) p.rot = 0.5 * std::atan2(2.0 * sxy, sxx - syy);
  }
  return p;
}

void require_clip(const Tensor& frames, const char* who) {
  if (frames.rank() != 4 || frames.shape[1] != 3 || frames.shape[0] < 1)
    throw std::invalid_argument(std::string(who) + ": expected [F,3,h,w] frames");
}

double mean_of(const std::vector<double>& v) {
  double s = 0;
  for (double x : v) s += x;
  return v.empty() ? 0.0 : s / static_cast<double>(v.size());
}

double var_of(const std::vector<double>& v) {
  const double m = mean_of(v);
  double s = 0;
  for (double x : v) s += (x - m) * (x - m);
  return v.empty() ? 0.0 : s / static_cast<double>(v.size());
}

ag::Var probe_param(const IdentityProbe& probe, const std::string& name) {
  return probe.params.get("probe." + name);
}

// Integer-shift alignment: move the blob centroid to the frame center, like
// the face-alignment step in front of a real identity embedder. Removes the
// translation nuisance so the probe only has to absorb rotation and mouth
// state. Vacated pixels take the background value.
Tensor align_frames(const Tensor& frames) {
  const int F = frames.shape[0], C = frames.shape[1];
  const int h = frames.shape[2], w = frames.shape[3];
  const double bg = 2.0 * kBgLum - 1.0;
  Tensor out(frames.shape);
  for (int f = 0; f < F; ++f) {
    FramePose p = recover_frame_pose(frames, f);
    const int dx = static_cast<int>(std::lround(0.5 * w - p.cx));
    const int dy = static_cast<int>(std::lround(0.5 * h - p.cy));
    for (int c = 0; c < C; ++c)
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
          const int sy = y - dy, sx = x - dx;
          out.at(f, c, y, x) = (sy >= 0 && sy < h && sx >= 0 && sx < w)
                                   ? frames.at(f, c, sy, sx)
                                   : bg;
        }
  }
  return out;
}

// Side length after the three stride-2 convolutions (k=3, p=1).
int probe_map_side(int side) {
  for (int i = 0; i < 3; ++i) side = (side - 1) / 2 + 1;
  return side;
}

ag::Var probe_head(const IdentityProbe& probe, const ag::Var& frames) {
  ag::Var h =
      ag::silu(ag::conv2d(frames, probe_param(probe, "conv1.w"), probe_param(probe, "conv1.b"),
                          2, 1));
  h = ag::silu(
      ag::conv2d(h, probe_param(probe, "conv2.w"), probe_param(probe, "conv2.b"), 2, 1));
  h = ag::silu(
      ag::conv2d(h, probe_param(probe, "conv3.w"), probe_param(probe, "conv3.b"), 2, 1));
  // Flatten instead of pooling: the embedding encodes positional traits
  // (blob size, eye placement) that an average over the map would erase.
  const int m = probe_map_side(probe.side);
  h = ag::reshape(h, {frames.dim(0), probe.width * m * m});
  h = ag::silu(ag::linear(h, probe_param(probe, "fc1.w"), probe_param(probe, "fc1.b")));
  return ag::linear(h, probe_param(probe, "head.w"), probe_param(probe, "head.b"));
}

// 11x11 Gaussian, sigma 1.5, normalized to sum 1.
std::vector<double> gaussian_window() {
  constexpr int kHalf = 5;
  std::vector<double> win(11 * 11);
  double total = 0;
  for (int y = -kHalf; y <= kHalf; ++y)
    for (int x = -kHalf; x <= kHalf; ++x) {
      const double g = std::exp(-(x * x + y * y) / (2.0 * 1.5 * 1.5));
      win[static_cast<size_t>((y + kHalf) * 11 + (x + kHalf))] = g;
      total += g;
    }
  for (double& v : win) v /= total;
  return win;
}

}  // namespace

std::optional<double> pearson(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) throw std::invalid_argument("pearson: length mismatch");
  const size_t n = a.size();
  if (n < 2) return std::nullopt;
  const double ma = mean_of(a), mb = mean_of(b);
  double saa = 0, sbb = 0, sab = 0;
  for (size_t i = 0; i < n; ++i) {
    const double da = a[i] - ma, db = b[i] - mb;
    saa += da * da;
    sbb += db * db;
    sab += da * db;
  }
  if (saa < 1e-24 || sbb < 1e-24) return std::nullopt;
  return sab / std::sqrt(saa * sbb);
}

LipSyncResult lip_sync_score(const Tensor& frames, const Tensor& mouth_regions,
                             const std::vector<double>& signal, int max_lag) {
  require_clip(frames, "lip_sync_score");
  if (mouth_regions.rank() != 2 || mouth_regions.shape[0] != frames.shape[0])
    throw std::invalid_argument("lip_sync_score: region table/frames disagree");
  if (static_cast<int>(signal.size()) != frames.shape[0])
    throw std::invalid_argument("lip_sync_score: signal length != frame count");
  if (max_lag < 0) throw std::invalid_argument("lip_sync_score: negative lag window");
  const int F = frames.shape[0];

  std::vector<double> recovered(static_cast<size_t>(F));
  for (int f = 0; f < F; ++f) recovered[static_cast<size_t>(f)] = mouth_darkness(frames, f, mouth_regions);

  LipSyncResult out;
  for (int lag = -max_lag; lag <= max_lag; ++lag) {
    std::vector<double> xs, ys;
    for (int f = 0; f < F; ++f) {
      const int j = f + lag;
      if (j < 0 || j >= F) continue;
      xs.push_back(recovered[static_cast<size_t>(f)]);
      ys.push_back(signal[static_cast<size_t>(j)]);
    }
    if (xs.size() < 3) continue;
    std::optional<double> r = pearson(xs, ys);
    if (!r) continue;
    if (!out.applicable || *r > out.r) {
      out.applicable = true;
      out.r = *r;
      out.lag = lag;
    }
  }
  return out;
}

LipSyncResult lip_sync_score(const Tensor& frames, const std::vector<double>& signal,
                             int max_lag) {
  return lip_sync_score(frames, locate_mouth_regions(frames), signal, max_lag);
}

PoseTrack recover_pose_track(const Tensor& frames) {
  require_clip(frames, "recover_pose_track");
  PoseTrack track;
  const int F = frames.shape[0];
  track.cx.reserve(static_cast<size_t>(F));
  track.cy.reserve(static_cast<size_t>(F));
  track.rot.reserve(static_cast<size_t>(F));
  for (int f = 0; f < F; ++f) {
    FramePose p = recover_frame_pose(frames, f);
    track.cx.push_back(p.cx);
    track.cy.push_back(p.cy);
    track.rot.push_back(p.rot);
  }
  return track;
}

PoseStd pose_std(const PoseTrack& track) {
  if (track.cx.size() != track.cy.size() || track.cx.size() != track.rot.size())
    throw std::invalid_argument("pose_std: ragged track");
  PoseStd s;
  s.center = std::sqrt(var_of(track.cx) + var_of(track.cy));
  s.rot = std::sqrt(var_of(track.rot));
  return s;
}

Tensor locate_mouth_regions(const Tensor& frames) {
  require_clip(frames, "locate_mouth_regions");
  const int F = frames.shape[0];
  Tensor regions({F, 4});
  for (int f = 0; f < F; ++f) {
    FramePose p = recover_frame_pose(frames, f);
    const double cr = std::cos(p.rot), sr = std::sin(p.rot);
    // Body-frame mouth offset (0, +kMouthDrop*R) rotated into the frame. The
    // box is deliberately generous: the centroid wobbles with mouth opening,
    // and a larger box only dilutes the darkness mean.
    regions.at(f, 0) = p.cx - sr * kMouthDrop * p.radius;
    regions.at(f, 1) = p.cy + cr * kMouthDrop * p.radius;
    regions.at(f, 2) = 0.62 * p.radius;
    regions.at(f, 3) = 0.40 * p.radius;
  }
  return regions;
}

IdentityProbe make_identity_probe(Rng& rng, int side, int d_id, int width) {
  if (side < 8) throw std::invalid_argument("make_identity_probe: side too small");
  if (d_id < 1 || width < 4) throw std::invalid_argument("make_identity_probe: degenerate");
  IdentityProbe probe;
  probe.side = side;
  probe.d_id = d_id;
  probe.width = width;
  const int c1 = std::max(4, width / 2);
  auto conv = [&](const std::string& name, int cin, int cout) {
    probe.params.create("probe." + name + ".w", {cout, cin, 3, 3},
                        1.0 / std::sqrt(9.0 * cin), rng);
    probe.params.create_zeros("probe." + name + ".b", {cout});
  };
  conv("conv1", 3, c1);
  conv("conv2", c1, width);
  conv("conv3", width, width);
  const int m = probe_map_side(side);
  probe.params.create("probe.fc1.w", {width * m * m, width},
                      1.0 / std::sqrt(static_cast<double>(width) * m * m), rng);
  probe.params.create_zeros("probe.fc1.b", {width});
  probe.params.create("probe.head.w", {width, d_id}, 1.0 / std::sqrt(width), rng);
  probe.params.create_zeros("probe.head.b", {d_id});
  return probe;
}

Tensor probe_embed(const IdentityProbe& probe, const Tensor& frames) {
  require_clip(frames, "probe_embed");
  if (frames.shape[2] != probe.side || frames.shape[3] != probe.side)
    throw std::invalid_argument("probe_embed: frame side != probe side");
  Tensor out = probe_head(probe, ag::constant(align_frames(frames))).val();
  for (int f = 0; f < out.shape[0]; ++f) {
    double norm = 0;
    for (int d = 0; d < probe.d_id; ++d) norm += out.at(f, d) * out.at(f, d);
    norm = std::sqrt(std::max(norm, 1e-24));
    for (int d = 0; d < probe.d_id; ++d) out.at(f, d) /= norm;
  }
  return out;
}

IdentityProbe train_identity_probe(const ProbeTrainConfig& cfg, std::vector<double>* losses) {
  if (cfg.identities < 2 || cfg.frames_per_identity < 1)
    throw std::invalid_argument("train_identity_probe: pool too small");
  const int n = cfg.identities * cfg.frames_per_identity;
  Tensor X({n, 3, cfg.side, cfg.side});
  Tensor Y({n, cfg.d_id});
  Rng root(cfg.seed);
  const size_t px = static_cast<size_t>(3) * cfg.side * cfg.side;
  for (int i = 0; i < cfg.identities; ++i) {
    Rng rng = root.child("identity", static_cast<uint64_t>(i));
    BlobIdentity id = sample_identity(rng, cfg.d_id);
    for (int k = 0; k < cfg.frames_per_identity; ++k) {
      const double R = id.radius * cfg.side;
      const double room = std::max(0.0, 0.5 * cfg.side - R - 2.0);
      BlobPose2D pose;
      pose.cx = 0.5 * cfg.side + (2.0 * rng.uniform() - 1.0) * room;
      pose.cy = 0.5 * cfg.side + (2.0 * rng.uniform() - 1.0) * room;
      pose.rot = (2.0 * rng.uniform() - 1.0) * 0.12;
      RenderedClip frame =
          render_talking_blob(id, {rng.uniform()}, {pose}, cfg.side, cfg.side);
      Tensor aligned = align_frames(frame.frames);
      const int row = i * cfg.frames_per_identity + k;
      std::copy(aligned.data.begin(), aligned.data.end(),
                X.data.begin() + static_cast<size_t>(row) * px);
      for (int d = 0; d < cfg.d_id; ++d) Y.at(row, d) = id.embedding.data[static_cast<size_t>(d)];
    }
  }

  Rng init = root.child("init");
  IdentityProbe probe = make_identity_probe(init, cfg.side, cfg.d_id, cfg.width);
  AdamW opt({.lr = cfg.lr, .weight_decay = 1e-4});
  Rng order = root.child("batches");
  for (int step = 0; step < cfg.steps; ++step) {
    // Cosine decay to a tenth of the base rate settles the directional fit.
    const double frac = 0.5 * (1.0 + std::cos(M_PI * step / std::max(1, cfg.steps)));
    opt.set_lr(cfg.lr * (0.1 + 0.9 * frac));
    const int B = std::min(cfg.batch, n);
    Tensor xb({B, 3, cfg.side, cfg.side});
    Tensor yb({B, cfg.d_id});
    for (int b = 0; b < B; ++b) {
      const int j = order.uniform_int(0, n - 1);
      std::copy(X.data.begin() + static_cast<size_t>(j) * px,
                X.data.begin() + static_cast<size_t>(j + 1) * px,
                xb.data.begin() + static_cast<size_t>(b) * px);
      for (int d = 0; d < cfg.d_id; ++d) yb.at(b, d) = Y.at(j, d);
    }
    // MSE pins the magnitude; the cosine term optimizes what the metric
    // actually measures (direction), which plain MSE leaves on the table.
    ag::Var pred = probe_head(probe, ag::constant(xb));
    ag::Var target = ag::constant(yb);
    ag::Var inv_norm = ag::rsqrt_eps(ag::sum_last(ag::square(pred)), 1e-12);
    ag::Var cos_rows = ag::sum_last(ag::mul(ag::mul_lastb(pred, inv_norm), target));
    ag::Var loss = ag::add(ag::mse(pred, target),
                           ag::affine(ag::mean_all(cos_rows), -1.0, 1.0));
    if (!std::isfinite(loss.item()))
      throw std::runtime_error("train_identity_probe: training diverged");
    if (losses) losses->push_back(loss.item());
    ag::backward(loss);
    opt.step(probe.params);
  }
  probe.params.set_requires_grad({"*"}, false, false);
  probe.frozen = true;
  return probe;
}

double cosine(const Tensor& a, const Tensor& b) {
  if (a.shape != b.shape || a.numel() == 0)
    throw std::invalid_argument("cosine: shape mismatch");
  double ab = 0, aa = 0, bb = 0;
  for (size_t i = 0; i < a.data.size(); ++i) {
    ab += a.data[i] * b.data[i];
    aa += a.data[i] * a.data[i];
    bb += b.data[i] * b.data[i];
  }
  if (aa < 1e-24 || bb < 1e-24) throw std::invalid_argument("cosine: zero vector");
  return ab / std::sqrt(aa * bb);
}

double identity_similarity(const IdentityProbe& probe, const Tensor& frames,
                           const Tensor& target_embedding) {
  if (target_embedding.rank() != 1 || target_embedding.shape[0] != probe.d_id)
    throw std::invalid_argument("identity_similarity: target dimension != probe d_id");
  Tensor emb = probe_embed(probe, frames);
  double acc = 0;
  for (int f = 0; f < emb.shape[0]; ++f) {
    Tensor row({probe.d_id});
    for (int d = 0; d < probe.d_id; ++d) row.data[static_cast<size_t>(d)] = emb.at(f, d);
    acc += cosine(row, target_embedding);
  }
  return acc / emb.shape[0];
}

void save_identity_probe(const IdentityProbe& probe, const std::string& path) {
  json meta = {{"kind", "identity-probe"},
               {"side", probe.side},
               {"d_id", probe.d_id},
               {"width", probe.width},
               {"frozen", probe.frozen}};
  save_tensors(path, probe.params.snapshot(), meta);
}

IdentityProbe load_identity_probe(const std::string& path) {
  json meta;
  TensorMap tensors = load_tensors(path, &meta);
  if (meta.value("kind", "") != "identity-probe")
    throw std::runtime_error("load_identity_probe: wrong checkpoint kind");
  IdentityProbe probe;
  probe.side = meta.at("side").get<int>();
  probe.d_id = meta.at("d_id").get<int>();
  probe.width = meta.at("width").get<int>();
  probe.frozen = meta.value("frozen", true);
  for (const auto& [name, tensor] : tensors)
    probe.params.adopt(name, ag::leaf(tensor, /*requires_grad=*/!probe.frozen));
  return probe;
}

double psnr(const Tensor& a, const Tensor& b, double peak) {
  if (a.shape != b.shape || a.numel() == 0)
    throw std::invalid_argument("psnr: shape mismatch");
  if (peak <= 0) throw std::invalid_argument("psnr: peak must be positive");
  double mse = 0;
  for (size_t i = 0; i < a.data.size(); ++i) {
    const double d = a.data[i] - b.data[i];
    mse += d * d;
  }
  mse /= static_cast<double>(a.data.size());
  if (mse <= 0.0) return kPsnrCap;
  return std::min(kPsnrCap, 10.0 * std::log10(peak * peak / mse));
}

double ssim(const Tensor& a, const Tensor& b, double peak) {
  if (a.shape != b.shape || a.rank() < 2)
    throw std::invalid_argument("ssim: need matching [...,h,w] inputs");
  const int h = a.shape[static_cast<size_t>(a.rank() - 2)];
  const int w = a.shape[static_cast<size_t>(a.rank() - 1)];
  if (h < 11 || w < 11) throw std::invalid_argument("ssim: image smaller than the window");
  const double C1 = (0.01 * peak) * (0.01 * peak);
  const double C2 = (0.03 * peak) * (0.03 * peak);
  static const std::vector<double> win = gaussian_window();

  const size_t plane = static_cast<size_t>(h) * w;
  const size_t planes = a.data.size() / plane;
  double total = 0;
  size_t count = 0;
  for (size_t p = 0; p < planes; ++p) {
    const double* pa = a.data.data() + p * plane;
    const double* pb = b.data.data() + p * plane;
    for (int y0 = 0; y0 + 11 <= h; ++y0) {
      for (int x0 = 0; x0 + 11 <= w; ++x0) {
        double ma = 0, mb = 0, saa = 0, sbb = 0, sab = 0;
        for (int dy = 0; dy < 11; ++dy)
          for (int dx = 0; dx < 11; ++dx) {
            const double g = win[static_cast<size_t>(dy * 11 + dx)];
            const double va = pa[(y0 + dy) * w + (x0 + dx)];
            const double vb = pb[(y0 + dy) * w + (x0 + dx)];
            ma += g * va;
            mb += g * vb;
            saa += g * va * va;
            sbb += g * vb * vb;
            sab += g * va * vb;
          }
        const double vara = saa - ma * ma;
        const double varb = sbb - mb * mb;
        const double cov = sab - ma * mb;
        total += ((2.0 * ma * mb + C1) * (2.0 * cov + C2)) /
                 ((ma * ma + mb * mb + C1) * (vara + varb + C2));
        ++count;
      }
    }
  }
  return total / static_cast<double>(count);
}

ViewMetrics view_metrics(const Tensor& generated, const Tensor& ground_truth, double peak) {
  if (generated.shape != ground_truth.shape || generated.rank() != 4)
    throw std::invalid_argument("view_metrics: need matching [F,C,h,w] stacks");
  const int F = generated.shape[0];
  const size_t fsz = generated.numel() / static_cast<size_t>(F);
  std::vector<int> frame_shape(generated.shape.begin() + 1, generated.shape.end());
  ViewMetrics vm;
  for (int f = 0; f < F; ++f) {
    Tensor ga(frame_shape), gb(frame_shape);
    std::copy(generated.data.begin() + static_cast<size_t>(f) * fsz,
              generated.data.begin() + static_cast<size_t>(f + 1) * fsz, ga.data.begin());
    std::copy(ground_truth.data.begin() + static_cast<size_t>(f) * fsz,
              ground_truth.data.begin() + static_cast<size_t>(f + 1) * fsz, gb.data.begin());
    vm.psnr += psnr(ga, gb, peak);
    vm.ssim += ssim(ga, gb, peak);
  }
  vm.psnr /= F;
  vm.ssim /= F;
  return vm;
}

json to_json(const EvalReport& report) {
  return json{{"kind", "eval-report"},
              {"dataset_id", report.dataset_id},
              {"config_hash", report.config_hash},
              {"metrics", report.metrics},
              {"per_clip", report.per_clip}};
}

EvalReport eval_report_from_json(const json& doc) {
  if (doc.value("kind", "") != "eval-report")
    throw std::runtime_error("eval_report_from_json: not an evaluation report");
  EvalReport r;
  r.dataset_id = doc.at("dataset_id").get<std::string>();
  r.config_hash = doc.at("config_hash").get<std::string>();
  r.metrics = doc.at("metrics");
  r.per_clip = doc.at("per_clip");
  return r;
}

void save_eval_report(const std::string& path, const EvalReport& report) {
  save_json(path, to_json(report));
}

EvalReport load_eval_report(const std::string& path) {
  return eval_report_from_json(load_json(path));
}

std::string compare_reports(const EvalReport& a, const EvalReport& b) {
  std::ostringstream out;
  out << "dataset: " << a.dataset_id;
  if (a.dataset_id != b.dataset_id) out << " vs " << b.dataset_id;
  out << "\nconfig:  " << a.config_hash;
  if (a.config_hash != b.config_hash) out << " vs " << b.config_hash;
  out << "\n";

  std::set<std::string> keys;
  for (auto it = a.metrics.begin(); it != a.metrics.end(); ++it) keys.insert(it.key());
  for (auto it = b.metrics.begin(); it != b.metrics.end(); ++it) keys.insert(it.key());
  for (const std::string& k : keys) {
    out << "  " << k << ": ";
    const bool ina = a.metrics.contains(k), inb = b.metrics.contains(k);
    auto write = [&](const json& v) {
      if (v.is_number())
        out << v.get<double>();
      else
        out << v.dump();
    };
    if (ina) write(a.metrics.at(k)); else out << "-";
    out << " -> ";
    if (inb) write(b.metrics.at(k)); else out << "-";
    if (ina && inb && a.metrics.at(k).is_number() && b.metrics.at(k).is_number()) {
      const double d = b.metrics.at(k).get<double>() - a.metrics.at(k).get<double>();
      out << "  (" << (d >= 0 ? "+" : "") << d << ")";
    }
    out << "\n";
  }
  return out.str();
}

}  // namespace blobdiff
