#include "blobdiff/percep.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "blobdiff/optim.hpp"
#include "blobdiff/serialize.hpp"
#include "blobdiff/world2d.hpp"

namespace blobdiff {

namespace {

constexpr double kLumR = 0.299, kLumG = 0.587, kLumB = 0.114;

ag::Var param(const ArticulationEncoder& enc, const std::string& name) {
  return enc.params.get("artenc." + name);
}

void validate_crops(const ArticulationEncoder& enc, const ag::Var& crops) {
  const auto& s = crops.shape();
  if (crops.val().rank() != 4 || s[1] != 1 || s[2] != enc.crop || s[3] != enc.crop)
    throw std::invalid_argument("articulation encoder: expected [F,1,S,S] grayscale crops");
}

}  // namespace

MouthLandmarks landmarks_from_regions(const Tensor& mouth_regions) {
  if (mouth_regions.rank() != 2 || mouth_regions.shape[1] < 4)
    throw std::invalid_argument("landmarks_from_regions: expected [F,4] region table");
  const int F = mouth_regions.shape[0];
  MouthLandmarks lm;
  lm.centers = Tensor({F, 2});
  double ext = 0;
  for (int f = 0; f < F; ++f) {
    lm.centers.at(f, 0) = mouth_regions.at(f, 0);
    lm.centers.at(f, 1) = mouth_regions.at(f, 1);
    ext = std::max({ext, mouth_regions.at(f, 2), mouth_regions.at(f, 3)});
  }
  lm.half_size = ext + 1.0;
  return lm;
}

ag::Var crop_mouth(const ag::Var& frames, const MouthLandmarks& lm, int out_size) {
  if (!frames.defined() || frames.val().rank() != 4 || frames.dim(1) != 3)
    throw std::invalid_argument("crop_mouth: expected [F,3,h,w] frames");
  if (lm.half_size <= 0.0) throw std::invalid_argument("crop_mouth: degenerate crop");
  if (lm.centers.rank() != 2 || lm.centers.shape[0] != frames.dim(0))
    throw std::invalid_argument("crop_mouth: landmark count disagrees with frames");
  ag::Var crop = ag::bilinear_crop(frames, lm.centers, lm.half_size, out_size);
  // Grayscale as a fixed (non-trainable) 1x1 convolution over the channels.
  Tensor wl({1, 3, 1, 1}, {kLumR, kLumG, kLumB});
  return ag::conv2d(crop, ag::constant(wl), ag::constant(Tensor::zeros({1})), 1, 0);
}

ArticulationEncoder make_articulation_encoder(Rng& rng, int crop, int width) {
  if (crop < 8 || crop % 8 != 0)
    throw std::invalid_argument("make_articulation_encoder: crop must be a multiple of 8");
  if (width < 4) throw std::invalid_argument("make_articulation_encoder: width too small");
  ArticulationEncoder enc;
  enc.crop = crop;
  enc.width = width;
  const int c1 = std::max(4, width / 2);
  auto conv = [&](const std::string& name, int cin, int cout) {
    enc.params.create("artenc." + name + ".w", {cout, cin, 3, 3},
                      1.0 / std::sqrt(9.0 * cin), rng);
    enc.params.create_zeros("artenc." + name + ".b", {cout});
  };
  conv("conv1", 1, c1);
  conv("conv2", c1, width);
  conv("conv3", width, width);
  enc.params.create("artenc.fc1.w", {width, width}, 1.0 / std::sqrt(width), rng);
  enc.params.create_zeros("artenc.fc1.b", {width});
  enc.params.create("artenc.head.w", {width, 1}, 1.0 / std::sqrt(width), rng);
  enc.params.create_zeros("artenc.head.b", {1});
  return enc;
}

ag::Var articulation_features(const ArticulationEncoder& enc, const ag::Var& crops) {
  validate_crops(enc, crops);
  ag::Var h = ag::silu(ag::conv2d(crops, param(enc, "conv1.w"), param(enc, "conv1.b"), 2, 1));
  h = ag::silu(ag::conv2d(h, param(enc, "conv2.w"), param(enc, "conv2.b"), 2, 1));
  h = ag::silu(ag::conv2d(h, param(enc, "conv3.w"), param(enc, "conv3.b"), 2, 1));
  h = ag::global_avgpool(h);
  return ag::silu(ag::linear(h, param(enc, "fc1.w"), param(enc, "fc1.b")));
}

ag::Var articulation_predict(const ArticulationEncoder& enc, const ag::Var& crops) {
  ag::Var f = articulation_features(enc, crops);
  ag::Var y = ag::sigmoid(ag::linear(f, param(enc, "head.w"), param(enc, "head.b")));
  return ag::reshape(y, {crops.dim(0)});
}

void make_articulation_samples(int n, int h, int w, int crop, uint64_t seed, Tensor* crops,
                               std::vector<double>* labels) {
  if (n < 1) throw std::invalid_argument("make_articulation_samples: n must be positive");
  Rng root(seed);
  *crops = Tensor({n, 1, crop, crop});
  labels->assign(static_cast<size_t>(n), 0.0);
  for (int i = 0; i < n; ++i) {
    Rng rng = root.child("sample", static_cast<uint64_t>(i));
    BlobIdentity id = sample_identity(rng);
    const double R = id.radius * std::min(h, w);
    const double margin = R + 2.0;
    const double room_x = 0.5 * w - margin, room_y = 0.5 * h - margin;
    BlobPose2D pose;
    pose.cx = 0.5 * w + (2.0 * rng.uniform() - 1.0) * std::max(0.0, room_x);
    pose.cy = 0.5 * h + (2.0 * rng.uniform() - 1.0) * std::max(0.0, room_y);
    pose.rot = (2.0 * rng.uniform() - 1.0) * 0.12;
    const double a = rng.uniform();
    RenderedClip clip = render_talking_blob(id, {a}, {pose}, h, w);
    MouthLandmarks lm = landmarks_from_regions(clip.mouth_regions);
    ag::Var g = crop_mouth(ag::constant(clip.frames), lm, crop);
    std::copy(g.val().data.begin(), g.val().data.end(),
              crops->data.begin() + static_cast<size_t>(i) * crop * crop);
    (*labels)[static_cast<size_t>(i)] = a;
  }
}

ArticulationEncoder pretrain_articulation_encoder(const Tensor& crops,
                                                  const std::vector<double>& labels,
                                                  const PretrainConfig& cfg,
                                                  PretrainStats* stats) {
  if (crops.rank() != 4 || crops.shape[0] != static_cast<int>(labels.size()))
    throw std::invalid_argument("pretrain_articulation_encoder: crops/labels disagree");
  const int n = crops.shape[0];
  const int side = crops.shape[2];
  if (side != cfg.crop)
    throw std::invalid_argument("pretrain_articulation_encoder: crop size mismatch");
  Rng init(cfg.seed);
  ArticulationEncoder enc = make_articulation_encoder(init, cfg.crop, cfg.width);
  AdamW opt({.lr = cfg.lr, .weight_decay = 1e-4});
  Rng order = Rng(cfg.seed).child("batches");
  const size_t px = static_cast<size_t>(side) * side;
  for (int step = 0; step < cfg.steps; ++step) {
    const int B = std::min(cfg.batch, n);
    Tensor xb({B, 1, side, side});
    Tensor yb({B});
    for (int b = 0; b < B; ++b) {
      const int j = static_cast<int>(order.uniform_int(0, n - 1));
      std::copy(crops.data.begin() + static_cast<size_t>(j) * px,
                crops.data.begin() + static_cast<size_t>(j + 1) * px,
                xb.data.begin() + static_cast<size_t>(b) * px);
      yb.data[static_cast<size_t>(b)] = labels[static_cast<size_t>(j)];
    }
    ag::Var loss = ag::mse(articulation_predict(enc, ag::constant(xb)), ag::constant(yb));
    if (!std::isfinite(loss.item()))
      throw std::runtime_error("pretrain_articulation_encoder: training diverged");
    if (stats) stats->losses.push_back(loss.item());
    ag::backward(loss);
    opt.step(enc.params);
  }
  enc.params.set_requires_grad({"*"}, false, false);
  enc.frozen = true;
  return enc;
}

double articulation_mae(const ArticulationEncoder& enc, const Tensor& crops,
                        const std::vector<double>& labels) {
  if (crops.rank() != 4 || crops.shape[0] != static_cast<int>(labels.size()))
    throw std::invalid_argument("articulation_mae: crops/labels disagree");
  const int n = crops.shape[0];
  const int side = crops.shape[2];
  const size_t px = static_cast<size_t>(side) * side;
  double acc = 0;
  const int chunk = 128;
  for (int start = 0; start < n; start += chunk) {
    const int len = std::min(chunk, n - start);
    Tensor xb({len, 1, side, side});
    std::copy(crops.data.begin() + static_cast<size_t>(start) * px,
              crops.data.begin() + static_cast<size_t>(start + len) * px, xb.data.begin());
    ag::Var pred = articulation_predict(enc, ag::constant(xb));
    for (int b = 0; b < len; ++b)
      acc += std::abs(pred.val().data[static_cast<size_t>(b)] -
                      labels[static_cast<size_t>(start + b)]);
  }
  return acc / n;
}

void save_articulation_encoder(const ArticulationEncoder& enc, const std::string& path) {
  nlohmann::json meta = {{"kind", "articulation-encoder"},
                         {"crop", enc.crop},
                         {"width", enc.width},
                         {"frozen", enc.frozen}};
  save_tensors(path, enc.params.snapshot(), meta);
}

ArticulationEncoder load_articulation_encoder(const std::string& path) {
  nlohmann::json meta;
  TensorMap tensors = load_tensors(path, &meta);
  if (meta.value("kind", "") != "articulation-encoder")
    throw std::runtime_error("load_articulation_encoder: wrong checkpoint kind");
  ArticulationEncoder enc;
  enc.crop = meta.at("crop").get<int>();
  enc.width = meta.at("width").get<int>();
  enc.frozen = meta.value("frozen", true);
  for (const auto& [name, tensor] : tensors)
    enc.params.adopt(name, ag::leaf(tensor, /*requires_grad=*/!enc.frozen));
  return enc;
}

ag::Var lip_reading_loss(const Tensor& real_frames, const ag::Var& gen_frames,
                         const MouthLandmarks& lm, const ArticulationEncoder& enc) {
  if (!enc.frozen)
    throw std::logic_error("lip_reading_loss: encoder must be frozen before use");
  if (real_frames.shape != gen_frames.val().shape)
    throw std::invalid_argument("lip_reading_loss: clip shapes disagree");
  ag::Var real_feat = articulation_features(enc, crop_mouth(ag::constant(real_frames), lm, enc.crop));
  ag::Var gen_feat = articulation_features(enc, crop_mouth(gen_frames, lm, enc.crop));
  return ag::mse(gen_feat, ag::detach(real_feat));
}

int CompositeLossSchedule::warmup_steps() const {
  return static_cast<int>(std::llround(warmup_frac * total_steps));
}

bool CompositeLossSchedule::lip_active(int step) const { return step >= warmup_steps(); }

ag::Var composite_loss(const ag::Var& diffusion_loss, const ag::Var& lip_loss, int step,
                       const CompositeLossSchedule& sched) {
  ag::Var total = ag::affine(diffusion_loss, sched.diffusion_weight, 0.0);
  if (!sched.lip_active(step)) return total;
  if (!lip_loss.defined())
    throw std::invalid_argument("composite_loss: articulation term active but missing");
  return ag::add(total, ag::affine(lip_loss, sched.lip_weight, 0.0));
}

}  // namespace blobdiff
