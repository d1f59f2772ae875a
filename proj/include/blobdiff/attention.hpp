#pragma once

#include <optional>
#include <string>

#include "blobdiff/autograd.hpp"
#include "blobdiff/params.hpp"
#include "blobdiff/tensor.hpp"

namespace blobdiff {

// Rank-3 token batches with an explicit layout:
//   spatial  — [frames, h*w, channels]: tokens within one frame
//   temporal — [h*w, frames, channels]: one spatial location across frames
enum class TokenLayout { spatial, temporal };

struct TokenGrid {
  ag::Var tokens;  // rank-3 per the layout above
  TokenLayout layout = TokenLayout::spatial;
};

// Single-head scaled-dot kernel on [L_q,d] x [L_k,d] -> [L_q,d], row-max
// stabilized. Rejects non-finite inputs. Value path only (no graph).
Tensor scaled_dot_attention(const Tensor& Q, const Tensor& K, const Tensor& V);

// Batched graph-path attention: q [G,Lq,d], k/v [G,Lk,d] -> [G,Lq,d].
ag::Var attention_batched(const ag::Var& q, const ag::Var& k, const ag::Var& v);

// xW + (xA)B on rank-3 x. Pass undefined a/b for a plain projection.
struct LoraPair {
  ag::Var a;  // [C, r]
  ag::Var b;  // [r, d], zero at construction
};
ag::Var lora_apply(const ag::Var& x, const ag::Var& w, const LoraPair& lora);

// Folds h heads into the group axis: [G,L,C] -> [G*h, L, C/h] and back.
ag::Var fold_heads(const ag::Var& x, int heads);
ag::Var unfold_heads(const ag::Var& x, int heads);

// Sinusoidal position table over the frame axis, [frames, channels].
Tensor frame_position_encoding(int frames, int channels);

struct SelfAttnParams {
  ag::Var gn_g, gn_b;        // site group-norm (used by the UNet wrapper)
  ag::Var wq, wk, wv;        // [C, C]
  ag::Var wo, bo;            // [C, C], [C]
  LoraPair lq, lk, lv;       // optional rank-r adapters on q/k/v
  int heads = 1;
};

struct CrossAttnParams {
  ag::Var gn_g, gn_b;
  ag::Var wq;                          // [C, C]
  ag::Var id_k, id_v;                  // [d_model, C]
  ag::Var audio_k, audio_v;            // [d_model, C] (undefined when stream absent)
  ag::Var camera_k, camera_v;          // [d_model, C]
  ag::Var wo, bo;                      // shared output projection on the stream sum
  int heads = 1;
};

struct TemporalParams {
  ag::Var ln_g, ln_b;  // [C]
  ag::Var wq, wk, wv;  // [C, C]
  ag::Var wo, bo;      // [C, C] zero-initialized, [C] zero
  int heads = 1;
};

// Conditioning token streams in model width d_model; per-frame streams are
// [frames, L, d_model], identity is [L_id, d_model] shared across frames.
// Undefined Vars mark absent streams (contributing exactly zero).
struct ConditioningTokens {
  ag::Var id;
  ag::Var audio;
  ag::Var camera;
};

// Per frame: Q from the frame's own tokens (LoRA-augmented); K,V from the
// concatenation of the frame's tokens with all m reference token maps along
// the token axis. ref is [m, h*w, C] (data, not part of the gradient graph).
// No residual or normalization inside; returns W_O(attention) + b_O.
ag::Var extended_self_attention(const ag::Var& z, const std::optional<Tensor>& ref,
                                const SelfAttnParams& p);

// Parallel attention streams sharing one Q; absent streams contribute exactly
// zero; shared output projection applied to the stream sum. z spatial layout.
ag::Var multi_source_cross_attention(const ag::Var& z, const ConditioningTokens& ct,
                                     const CrossAttnParams& p);

// Pre-normalized residual temporal block over the frame axis per spatial
// location; exact identity while W_O = 0. Requires temporal layout.
TokenGrid temporal_block(const TokenGrid& z, const TemporalParams& p);

// Parameter construction/fetch against a store (idempotent: reuses existing
// leaves so rebuilt model objects share the same tensors).
SelfAttnParams make_self_attn_params(ParamStore& ps, const std::string& prefix, int C,
                                     int lora_rank, int heads, Rng& rng);
CrossAttnParams make_cross_attn_params(ParamStore& ps, const std::string& prefix, int C,
                                       int d_model, bool audio, bool camera, int heads,
                                       Rng& rng);
TemporalParams make_temporal_params(ParamStore& ps, const std::string& prefix, int C,
                                    int heads, Rng& rng);

}  // namespace blobdiff
