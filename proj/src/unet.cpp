#include "blobdiff/unet.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "blobdiff/schedule.hpp"

namespace blobdiff {

namespace {

int level_count(const UNetConfig& cfg) { return static_cast<int>(cfg.mults.size()); }

bool has_attn(const UNetConfig& cfg, int level) {
  return std::find(cfg.attn_levels.begin(), cfg.attn_levels.end(), level) !=
         cfg.attn_levels.end();
}

int width_at(const UNetConfig& cfg, int level) { return cfg.base * cfg.mults[level]; }

void check_groups(int channels, int groups) {
  if (channels % groups != 0)
    throw std::invalid_argument("unet: channels " + std::to_string(channels) +
                                " not divisible by gn_groups " + std::to_string(groups));
}

// [F,C,S,S] <-> [F,S*S,C]
ag::Var to_tokens(const ag::Var& h, int F, int C, int S) {
  return ag::transpose_last2(ag::reshape(h, {F, C, S * S}));
}
ag::Var from_tokens(const ag::Var& tok, int F, int C, int S) {
  return ag::reshape(ag::transpose_last2(tok), {F, C, S, S});
}

// [a,b,c] -> [b,a,c]
ag::Var swap01(const ag::Var& x) {
  const auto& s = x.val().shape;
  return ag::reshape(ag::permute0213(ag::reshape(x, {1, s[0], s[1], s[2]})),
                     {s[1], s[0], s[2]});
}

ag::Var concat_channels(const ag::Var& a, const ag::Var& b) {
  const auto& sa = a.val().shape;
  const auto& sb = b.val().shape;
  ag::Var flat = ag::concat1(ag::reshape(a, {sa[0], sa[1], sa[2] * sa[3]}),
                             ag::reshape(b, {sb[0], sb[1], sb[2] * sb[3]}));
  return ag::reshape(flat, {sa[0], sa[1] + sb[1], sa[2], sa[3]});
}

ResParams make_res_params(ParamStore& ps, const std::string& prefix, int cin, int cout,
                          int temb_dim, int groups, Rng& rng) {
  check_groups(cin, groups);
  check_groups(cout, groups);
  ResParams p;
  p.groups = groups;
  const double s1 = 1.0 / std::sqrt(static_cast<double>(cin) * 9.0);
  p.gn1_g = ensure_ones(ps, prefix + ".gn1.g", {cin});
  p.gn1_b = ensure_param(ps, prefix + ".gn1.b", {cin}, 0.0, rng);
  p.conv1_w = ensure_param(ps, prefix + ".conv1.w", {cout, cin, 3, 3}, s1, rng);
  p.conv1_b = ensure_param(ps, prefix + ".conv1.b", {cout}, 0.0, rng);
  p.temb_w = ensure_param(ps, prefix + ".temb.w", {temb_dim, cout},
                          1.0 / std::sqrt(static_cast<double>(temb_dim)), rng);
  p.temb_b = ensure_param(ps, prefix + ".temb.b", {cout}, 0.0, rng);
  p.gn2_g = ensure_ones(ps, prefix + ".gn2.g", {cout});
  p.gn2_b = ensure_param(ps, prefix + ".gn2.b", {cout}, 0.0, rng);
  // Second conv starts at zero so a fresh block is its skip path; training
  // moves it off zero immediately.
  p.conv2_w = ensure_param(ps, prefix + ".conv2.w", {cout, cout, 3, 3}, 0.0, rng);
  p.conv2_b = ensure_param(ps, prefix + ".conv2.b", {cout}, 0.0, rng);
  if (cin != cout) {
    p.skip_w = ensure_param(ps, prefix + ".skip.w", {cout, cin, 1, 1},
                            1.0 / std::sqrt(static_cast<double>(cin)), rng);
    p.skip_b = ensure_param(ps, prefix + ".skip.b", {cout}, 0.0, rng);
  }
  return p;
}

ag::Var res_forward(const ag::Var& x, const ag::Var& temb_act, const ResParams& p) {
  ag::Var h = ag::conv2d(ag::silu(ag::group_norm(x, p.groups, p.gn1_g, p.gn1_b)), p.conv1_w,
                         p.conv1_b, 1, 1);
  h = ag::add_chanb(h, ag::linear(temb_act, p.temb_w, p.temb_b));
  h = ag::conv2d(ag::silu(ag::group_norm(h, p.groups, p.gn2_g, p.gn2_b)), p.conv2_w, p.conv2_b,
                 1, 1);
  ag::Var s = p.skip_w.defined() ? ag::conv2d(x, p.skip_w, p.skip_b, 1, 0) : x;
  return ag::add(h, s);
}

// Everything a forward pass needs beyond the input clip.
struct ForwardOpts {
  bool use_lora = true;
  bool use_temporal = true;
  const ReferenceFeatures* ref = nullptr;      // null or empty: plain self-attn
  ConditioningTokens cond;                     // undefined members = absent
  std::vector<Tensor>* capture = nullptr;      // sink for pre-self-attn tokens
};

ag::Var site_forward(ag::Var h, const AttnSite& site, int site_index, const ForwardOpts& opt,
                     int F, int groups) {
  const int C = site.channels;
  const int S = site.side;

  ag::Var n = ag::group_norm(h, groups, site.self.gn_g, site.self.gn_b);
  ag::Var tok = to_tokens(n, F, C, S);
  if (opt.capture) opt.capture->push_back(tok.val());
  SelfAttnParams sp = site.self;
  if (!opt.use_lora) {
    sp.lq = {};
    sp.lk = {};
    sp.lv = {};
  }
  std::optional<Tensor> ref;
  if (opt.ref && !opt.ref->maps.empty()) ref = opt.ref->maps[static_cast<size_t>(site_index)];
  h = ag::add(h, from_tokens(extended_self_attention(tok, ref, sp), F, C, S));

  n = ag::group_norm(h, groups, site.cross.gn_g, site.cross.gn_b);
  tok = to_tokens(n, F, C, S);
  h = ag::add(h, from_tokens(multi_source_cross_attention(tok, opt.cond, site.cross), F, C, S));

  if (opt.use_temporal) {
    TokenGrid tg{swap01(to_tokens(h, F, C, S)), TokenLayout::temporal};
    TokenGrid out = temporal_block(tg, site.temporal);
    h = from_tokens(swap01(out.tokens), F, C, S);
  }
  return h;
}

ag::Var forward(const Denoiser& net, const ag::Var& x, const std::vector<int>& t,
                const ForwardOpts& opt) {
  const UNetConfig& cfg = net.cfg;
  const int L = level_count(cfg);
  const int F = x.dim(0);

  Tensor temb_raw = sinusoidal_time_embedding(t, cfg.temb_dim);
  ag::Var temb = ag::linear(ag::silu(ag::linear(ag::constant(temb_raw), net.temb_w1, net.temb_b1)),
                            net.temb_w2, net.temb_b2);
  ag::Var temb_act = ag::silu(temb);

  ag::Var h = ag::conv2d(x, net.in_w, net.in_b, 1, 1);
  int site = 0;
  std::vector<ag::Var> skips;
  for (int l = 0; l < L - 1; ++l) {
    h = res_forward(h, temb_act, net.down_res[static_cast<size_t>(l)]);
    if (has_attn(cfg, l)) {
      h = site_forward(h, net.sites[static_cast<size_t>(site)], site, opt, F, cfg.gn_groups);
      ++site;
    }
    skips.push_back(h);
    h = ag::conv2d(h, net.down_w[static_cast<size_t>(l)], net.down_b[static_cast<size_t>(l)], 2,
                   1);
  }
  h = res_forward(h, temb_act, net.mid_res);
  if (has_attn(cfg, L - 1)) {
    h = site_forward(h, net.sites[static_cast<size_t>(site)], site, opt, F, cfg.gn_groups);
    ++site;
  }
  for (int l = L - 2; l >= 0; --l) {
    h = ag::upsample2(h);
    h = concat_channels(h, skips.back());
    skips.pop_back();
    h = res_forward(h, temb_act, net.up_res[static_cast<size_t>(L - 2 - l)]);
    if (has_attn(cfg, l)) {
      h = site_forward(h, net.sites[static_cast<size_t>(site)], site, opt, F, cfg.gn_groups);
      ++site;
    }
  }
  h = ag::conv2d(ag::silu(ag::group_norm(h, cfg.gn_groups, net.out_gn_g, net.out_gn_b)),
                 net.out_w, net.out_b, 1, 1);
  return h;
}

ConditioningTokens encode_bundle(const Denoiser& net, const ConditioningBundle& conds, int F) {
  ConditioningTokens ct;
  if (conds.id_embedding) {
    if (!net.cfg.use_id) throw std::invalid_argument("denoise: id stream not in network");
    ct.id = encode_identity(*conds.id_embedding, net.cond, net.enc);
  }
  if (conds.audio_feats) {
    if (!net.cfg.use_audio) throw std::invalid_argument("denoise: audio stream not in network");
    if (conds.audio_feats->shape[0] != F)
      throw std::invalid_argument("denoise: audio feature frames != clip frames");
    ct.audio = project_audio(*conds.audio_feats, net.cond, net.enc);
  }
  if (conds.camera_flat) {
    if (!net.cfg.use_camera) throw std::invalid_argument("denoise: camera stream not in network");
    if (conds.camera_flat->shape[0] != F)
      throw std::invalid_argument("denoise: camera pose frames != clip frames");
    ct.camera = project_camera(*conds.camera_flat, net.cond, net.enc);
  }
  return ct;
}

}  // namespace

void validate_unet_config(const UNetConfig& cfg) {
  if (cfg.side < 4 || cfg.in_channels < 1 || cfg.base < 1 || cfg.temb_dim < 4)
    throw std::invalid_argument("unet: degenerate config");
  const int L = level_count(cfg);
  if (L < 1) throw std::invalid_argument("unet: need at least one level");
  if (cfg.attn_levels.empty())
    throw std::invalid_argument("unet: need at least one attention level");
  for (int l : cfg.attn_levels)
    if (l < 0 || l >= L) throw std::invalid_argument("unet: attention level out of range");
  if (cfg.side % (1 << (L - 1)) != 0)
    throw std::invalid_argument("unet: side not divisible by 2^(levels-1)");
  if (cfg.temb_dim % 2 != 0) throw std::invalid_argument("unet: temb_dim must be even");
  for (int l = 0; l < L; ++l) check_groups(width_at(cfg, l), cfg.gn_groups);
}

UNetConfig image_config(UNetConfig cfg) {
  cfg.temporal = false;
  cfg.lora_rank = 0;
  cfg.use_audio = false;
  cfg.use_camera = false;
  return cfg;
}

Tensor sinusoidal_time_embedding(const std::vector<int>& t, int dim) {
  if (dim < 4 || dim % 2 != 0)
    throw std::invalid_argument("sinusoidal_time_embedding: dim must be even and >= 4");
  const int half = dim / 2;
  Tensor out({static_cast<int>(t.size()), dim});
  for (size_t f = 0; f < t.size(); ++f) {
    for (int i = 0; i < half; ++i) {
      double freq = std::exp(-std::log(10000.0) * i / (half - 1));
      double arg = static_cast<double>(t[f]) * freq;
      out.at(static_cast<int>(f), i) = std::sin(arg);
      out.at(static_cast<int>(f), half + i) = std::cos(arg);
    }
  }
  return out;
}

Denoiser build_denoiser(ParamStore& ps, const UNetConfig& cfg, const EncoderConfig& enc,
                        Rng& rng) {
  validate_unet_config(cfg);
  Denoiser net;
  net.cfg = cfg;
  net.enc = enc;
  net.cond = make_cond_encoder_params(ps, enc, cfg.use_audio, cfg.use_camera, rng);

  const int L = level_count(cfg);
  const int w0 = width_at(cfg, 0);
  net.in_w = ensure_param(ps, "unet.in.conv.w", {w0, cfg.in_channels, 3, 3},
                          1.0 / std::sqrt(cfg.in_channels * 9.0), rng);
  net.in_b = ensure_param(ps, "unet.in.conv.b", {w0}, 0.0, rng);
  const double st = 1.0 / std::sqrt(static_cast<double>(cfg.temb_dim));
  net.temb_w1 = ensure_param(ps, "unet.temb.w1", {cfg.temb_dim, cfg.temb_dim}, st, rng);
  net.temb_b1 = ensure_param(ps, "unet.temb.b1", {cfg.temb_dim}, 0.0, rng);
  net.temb_w2 = ensure_param(ps, "unet.temb.w2", {cfg.temb_dim, cfg.temb_dim}, st, rng);
  net.temb_b2 = ensure_param(ps, "unet.temb.b2", {cfg.temb_dim}, 0.0, rng);

  auto add_site = [&](int level) {
    AttnSite s;
    s.level = level;
    s.side = cfg.side >> level;
    s.channels = width_at(cfg, level);
    check_groups(s.channels, cfg.gn_groups);
    const std::string prefix = "unet.attn" + std::to_string(net.sites.size());
    s.self = make_self_attn_params(ps, prefix + ".self", s.channels, cfg.lora_rank, cfg.heads,
                                   rng);
    s.cross = make_cross_attn_params(ps, prefix + ".cross", s.channels, enc.d_model,
                                     cfg.use_audio, cfg.use_camera, cfg.heads, rng);
    if (cfg.temporal)
      s.temporal = make_temporal_params(ps, prefix + ".temporal", s.channels, cfg.heads, rng);
    net.sites.push_back(std::move(s));
  };

  int cin = w0;
  for (int l = 0; l < L - 1; ++l) {
    const int cout = width_at(cfg, l);
    net.down_res.push_back(make_res_params(ps, "unet.down" + std::to_string(l) + ".res0", cin,
                                           cout, cfg.temb_dim, cfg.gn_groups, rng));
    if (has_attn(cfg, l)) add_site(l);
    net.down_w.push_back(ensure_param(ps, "unet.down" + std::to_string(l) + ".down.w",
                                      {cout, cout, 3, 3}, 1.0 / std::sqrt(cout * 9.0), rng));
    net.down_b.push_back(
        ensure_param(ps, "unet.down" + std::to_string(l) + ".down.b", {cout}, 0.0, rng));
    cin = cout;
  }
  net.mid_res = make_res_params(ps, "unet.mid.res0", cin, width_at(cfg, L - 1), cfg.temb_dim,
                                cfg.gn_groups, rng);
  if (has_attn(cfg, L - 1)) add_site(L - 1);
  cin = width_at(cfg, L - 1);
  for (int l = L - 2; l >= 0; --l) {
    const int cout = width_at(cfg, l);
    net.up_res.push_back(make_res_params(ps, "unet.up" + std::to_string(l) + ".res0",
                                         cin + cout, cout, cfg.temb_dim, cfg.gn_groups, rng));
    if (has_attn(cfg, l)) add_site(l);
    cin = cout;
  }
  net.out_gn_g = ensure_ones(ps, "unet.out.gn.g", {cin});
  net.out_gn_b = ensure_param(ps, "unet.out.gn.b", {cin}, 0.0, rng);
  net.out_w = ensure_param(ps, "unet.out.conv.w", {cfg.in_channels, cin, 3, 3},
                           1.0 / std::sqrt(cin * 9.0), rng);
  net.out_b = ensure_param(ps, "unet.out.conv.b", {cfg.in_channels}, 0.0, rng);

  net.param_count = ps.total_elements_matching({"unet.*"});
  return net;
}

namespace {
int64_t g_reference_passes = 0;
}  // namespace

int64_t reference_pass_count() { return g_reference_passes; }

ReferenceFeatures reference_features(const Denoiser& net, const Tensor& frames,
                                     const std::optional<Tensor>& id_embedding) {
  ++g_reference_passes;
  ReferenceFeatures rf;
  if (frames.numel() == 0 || (frames.rank() >= 1 && frames.shape[0] == 0)) return rf;
  if (frames.rank() != 4 || frames.shape[1] != net.cfg.in_channels ||
      frames.shape[2] != net.cfg.side || frames.shape[3] != net.cfg.side)
    throw std::invalid_argument("reference_features: frame shape mismatch");
  if (!frames.all_finite()) throw std::invalid_argument("reference_features: non-finite frames");
  for (double v : frames.data)
    if (v < -1.0 - 1e-9 || v > 1.0 + 1e-9)
      throw std::invalid_argument("reference_features: frames must be clean pixels in [-1,1]");

  const int m = frames.shape[0];
  ForwardOpts opt;
  opt.use_lora = false;
  opt.use_temporal = false;
  opt.capture = &rf.maps;
  ConditioningBundle conds;
  if (id_embedding && net.cfg.use_id) conds.id_embedding = id_embedding;
  opt.cond = encode_bundle(net, conds, m);
  // The reference encoder always runs at the clean end of the chain: t = 0.
  forward(net, ag::constant(frames), std::vector<int>(static_cast<size_t>(m), 0), opt);
  if (rf.maps.size() != net.sites.size())
    throw std::logic_error("reference_features: capture count mismatch");
  return rf;
}

ag::Var denoise(const Denoiser& net, const ag::Var& x_in, const std::vector<int>& t,
                const ConditioningBundle& conds, const ReferenceFeatures& ref,
                double cfg_scale) {
  const Tensor& x_t = x_in.val();
  if (x_t.rank() != 4 || x_t.shape[1] != net.cfg.in_channels ||
      x_t.shape[2] != net.cfg.side || x_t.shape[3] != net.cfg.side)
    throw std::invalid_argument("denoise: clip shape mismatch");
  const int F = x_t.shape[0];
  if (static_cast<int>(t.size()) != F)
    throw std::invalid_argument("denoise: one diffusion step per frame required");
  for (int step : t)
    if (step < 0) throw std::invalid_argument("denoise: negative diffusion step");
  if (!ref.maps.empty()) {
    if (ref.maps.size() != net.sites.size())
      throw std::invalid_argument("denoise: reference site count mismatch");
    for (size_t i = 0; i < ref.maps.size(); ++i) {
      const AttnSite& s = net.sites[i];
      const auto& shape = ref.maps[i].shape;
      if (shape.size() != 3 || shape[1] != s.side * s.side || shape[2] != s.channels)
        throw std::invalid_argument("denoise: reference map shape mismatch at site " +
                                    std::to_string(i));
    }
  }

  ForwardOpts opt;
  opt.use_lora = net.cfg.lora_rank > 0;
  opt.use_temporal = net.cfg.temporal;
  opt.ref = &ref;
  opt.cond = encode_bundle(net, conds, F);
  ag::Var eps = forward(net, x_in, t, opt);
  if (cfg_scale == 1.0) return eps;

  // Guided sampling: second pass with every conditioning stream dropped, then
  // extrapolate from the unconditional prediction toward the conditional one.
  ForwardOpts unc = opt;
  unc.cond = ConditioningTokens{};
  Tensor eps_u = forward(net, x_in, t, unc).val();
  return ag::constant(cfg_combine(eps.val(), eps_u, cfg_scale));
}

ag::Var denoise(const Denoiser& net, const Tensor& x_t, const std::vector<int>& t,
                const ConditioningBundle& conds, const ReferenceFeatures& ref,
                double cfg_scale) {
  return denoise(net, ag::constant(x_t), t, conds, ref, cfg_scale);
}

}  // namespace blobdiff
