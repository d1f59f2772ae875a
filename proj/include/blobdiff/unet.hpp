#pragma once

#include <optional>
#include <string>
#include <vector>

#include "blobdiff/attention.hpp"
#include "blobdiff/encoders.hpp"
#include "blobdiff/params.hpp"

namespace blobdiff {

// Topology of the denoising UNet. Default: 32x32 input, three resolution
// levels (32/16/8) with widths base*mults, attention at 16 and 8, so the
// forward pass visits three attention sites (down@16, bottom@8, up@16).
struct UNetConfig {
  int side = 32;
  int in_channels = 3;
  int base = 32;
  std::vector<int> mults = {1, 1, 2};
  std::vector<int> attn_levels = {1, 2};
  int gn_groups = 8;
  int temb_dim = 64;
  bool temporal = true;   // temporal transformer blocks after each site
  bool use_id = true;     // conditioning streams available to cross-attention
  bool use_audio = true;
  bool use_camera = true;
  int lora_rank = 4;      // 0 disables the adapters on self-attention q/k/v
  int heads = 1;
};

void validate_unet_config(const UNetConfig& cfg);

// The per-frame image-denoiser reduction of a video config: temporal blocks
// off, adapters off, identity as the only conditioning stream.
UNetConfig image_config(UNetConfig cfg);

// Residual block parameters. Forward: x -> conv1(silu(gn1(x))) + per-channel
// time embedding -> conv2(silu(gn2(.))) + skip(x).
struct ResParams {
  ag::Var gn1_g, gn1_b, conv1_w, conv1_b;
  ag::Var temb_w, temb_b;
  ag::Var gn2_g, gn2_b, conv2_w, conv2_b;
  ag::Var skip_w, skip_b;  // undefined when in/out channels match
  int groups = 8;
};

// One attention site: group-norm + extended self-attention, group-norm +
// multi-source cross-attention, then a temporal block, each residual.
struct AttnSite {
  int level = 0;
  int side = 0;
  int channels = 0;
  SelfAttnParams self;
  CrossAttnParams cross;
  TemporalParams temporal;  // members undefined when cfg.temporal is false
};

// Ordered per-site reference token maps, each [m, side*side, channels],
// captured right before the self-attention of a frozen per-frame encoder
// pass. Empty maps mean "run with plain self-attention".
struct ReferenceFeatures {
  std::vector<Tensor> maps;
};

// Raw conditioning inputs; the denoiser turns them into token streams via the
// condition encoders. Streams set here must be enabled in the config.
struct ConditioningBundle {
  std::optional<Tensor> id_embedding;  // [d_id], unit norm
  std::optional<Tensor> audio_feats;   // [F, d_a] synchronized per frame
  std::optional<Tensor> camera_flat;   // [F, 25] flattened poses per frame
};

struct Denoiser {
  UNetConfig cfg;
  EncoderConfig enc;
  CondEncoderParams cond;
  ag::Var in_w, in_b;
  ag::Var temb_w1, temb_b1, temb_w2, temb_b2;
  std::vector<ResParams> down_res;      // levels 0..L-2
  std::vector<ag::Var> down_w, down_b;  // stride-2 transitions, levels 0..L-2
  ResParams mid_res;                    // bottom level
  std::vector<ResParams> up_res;        // levels L-2..0 in forward order
  ag::Var out_gn_g, out_gn_b, out_w, out_b;
  std::vector<AttnSite> sites;  // forward order
  int64_t param_count = 0;      // elements under "unet.*"
};

// Creates or fetches every named tensor in the store ("unet.*" and "cond.*").
// Idempotent: rebuilding over a populated store reuses the existing leaves,
// so checkpoint loads through ParamStore::load_values stay visible.
Denoiser build_denoiser(ParamStore& ps, const UNetConfig& cfg, const EncoderConfig& enc,
                        Rng& rng);

// Sinusoidal embedding of integer diffusion steps, [t.size(), dim].
Tensor sinusoidal_time_embedding(const std::vector<int>& t, int dim);

// Runs the network as a frozen per-frame encoder (t=0, no adapters, no
// temporal mixing, identity conditioning only) over m clean frames
// [m,C,side,side] and captures the token map right before each
// self-attention. m=0 yields empty maps.
ReferenceFeatures reference_features(const Denoiser& net, const Tensor& frames,
                                     const std::optional<Tensor>& id_embedding);

// Process-wide invocation count of reference_features. Training stages that
// promise never to run the reference encoder are audited against it.
int64_t reference_pass_count();

// Predicts per-frame noise for x_t [F,C,side,side] at per-frame steps t
// (context frames carry t=0). cfg_scale != 1 runs an extra pass with all
// conditioning streams dropped and extrapolates; that path returns values
// only (no gradient graph) and is meant for sampling.
ag::Var denoise(const Denoiser& net, const Tensor& x_t, const std::vector<int>& t,
                const ConditioningBundle& conds, const ReferenceFeatures& ref,
                double cfg_scale = 1.0);
// Graph-input variant: gradients can flow into x_t itself (used when segment
// chaining is trained without detaching context frames).
ag::Var denoise(const Denoiser& net, const ag::Var& x_t, const std::vector<int>& t,
                const ConditioningBundle& conds, const ReferenceFeatures& ref,
                double cfg_scale = 1.0);

}  // namespace blobdiff
