#include "blobdiff/attention.hpp"

#include <cmath>
#include <stdexcept>

namespace blobdiff {

Tensor scaled_dot_attention(const Tensor& Q, const Tensor& K, const Tensor& V) {
  if (Q.rank() != 2 || K.rank() != 2 || V.rank() != 2)
    throw std::invalid_argument("scaled_dot_attention: rank-2 inputs required");
  int Lq = Q.shape[0], d = Q.shape[1], Lk = K.shape[0];
  if (K.shape[1] != d || V.shape[0] != Lk || V.shape[1] != d)
    throw std::invalid_argument("scaled_dot_attention: shape mismatch");
  if (Lk < 1) throw std::invalid_argument("scaled_dot_attention: empty keys");
  if (!Q.all_finite() || !K.all_finite() || !V.all_finite())
    throw std::invalid_argument("scaled_dot_attention: non-finite input");
  double scale = 1.0 / std::sqrt(static_cast<double>(d));
  Tensor out({Lq, d});
  std::vector<double> logits(static_cast<size_t>(Lk));
  for (int i = 0; i < Lq; ++i) {
    double mx = -1e300;
    for (int j = 0; j < Lk; ++j) {
      double s = 0.0;
      for (int c = 0; c < d; ++c) s += Q.at(i, c) * K.at(j, c);
      logits[static_cast<size_t>(j)] = s * scale;
      mx = std::max(mx, logits[static_cast<size_t>(j)]);
    }
    double denom = 0.0;
    for (int j = 0; j < Lk; ++j) {
      logits[static_cast<size_t>(j)] = std::exp(logits[static_cast<size_t>(j)] - mx);
      denom += logits[static_cast<size_t>(j)];
    }
    for (int c = 0; c < d; ++c) {
      double acc = 0.0;
      for (int j = 0; j < Lk; ++j) acc += logits[static_cast<size_t>(j)] * V.at(j, c);
      out.at(i, c) = acc / denom;
    }
  }
  return out;
}

ag::Var attention_batched(const ag::Var& q, const ag::Var& k, const ag::Var& v) {
  if (q.val().rank() != 3 || k.val().rank() != 3 || v.val().rank() != 3)
    throw std::invalid_argument("attention_batched: rank-3 inputs required");
  if (!q.val().all_finite() || !k.val().all_finite() || !v.val().all_finite())
    throw std::invalid_argument("attention_batched: non-finite input");
  int d = q.val().shape[2];
  double scale = 1.0 / std::sqrt(static_cast<double>(d));
  ag::Var logits = ag::affine(ag::bmm(q, ag::transpose_last2(k)), scale, 0.0);
  return ag::bmm(ag::softmax_last(logits), v);
}

ag::Var lora_apply(const ag::Var& x, const ag::Var& w, const LoraPair& lora) {
  if (x.val().rank() != 3) throw std::invalid_argument("lora_apply: rank-3 x required");
  ag::Var base = ag::matmul3(x, w);
  if (!lora.a.defined()) return base;
  if (lora.a.val().shape[0] != x.val().shape[2] ||
      lora.a.val().shape[1] != lora.b.val().shape[0] ||
      lora.b.val().shape[1] != w.val().shape[1])
    throw std::invalid_argument("lora_apply: rank/shape mismatch");
  return ag::add(base, ag::matmul3(ag::matmul3(x, lora.a), lora.b));
}

ag::Var fold_heads(const ag::Var& x, int heads) {
  if (heads == 1) return x;
  int G = x.dim(0), L = x.dim(1), C = x.dim(2);
  if (C % heads != 0) throw std::invalid_argument("fold_heads: C % heads != 0");
  return ag::reshape(ag::permute0213(ag::reshape(x, {G, L, heads, C / heads})),
                     {G * heads, L, C / heads});
}

ag::Var unfold_heads(const ag::Var& x, int heads) {
  if (heads == 1) return x;
  int Gh = x.dim(0), L = x.dim(1), Ch = x.dim(2);
  int G = Gh / heads;
  return ag::reshape(ag::permute0213(ag::reshape(x, {G, heads, L, Ch})), {G, L, Ch * heads});
}

Tensor frame_position_encoding(int frames, int channels) {
  Tensor pe({frames, channels});
  for (int f = 0; f < frames; ++f)
    for (int c = 0; c < channels; ++c) {
      double exponent = static_cast<double>(2 * (c / 2)) / channels;
      double angle = f / std::pow(10000.0, exponent);
      pe.at(f, c) = (c % 2 == 0) ? std::sin(angle) : std::cos(angle);
    }
  return pe;
}

ag::Var extended_self_attention(const ag::Var& z, const std::optional<Tensor>& ref,
                                const SelfAttnParams& p) {
  if (z.val().rank() != 3) throw std::invalid_argument("extended_self_attention: rank-3 z");
  int F = z.dim(0), L = z.dim(1), C = z.dim(2);
  ag::Var kv_in = z;
  if (ref && ref->numel() > 0) {
    if (ref->rank() != 3 || ref->shape[2] != C)
      throw std::invalid_argument("extended_self_attention: reference channel mismatch");
    int m = ref->shape[0];
    // Reference maps are data: flatten all m maps onto the token axis and
    // replicate per frame.
    ag::Var ref_flat = ag::constant(Tensor({m * ref->shape[1], C}, ref->data));
    kv_in = ag::concat1(z, ag::expand0(ref_flat, F));
  }
  ag::Var q = lora_apply(z, p.wq, p.lq);
  ag::Var k = lora_apply(kv_in, p.wk, p.lk);
  ag::Var v = lora_apply(kv_in, p.wv, p.lv);
  ag::Var attn = unfold_heads(
      attention_batched(fold_heads(q, p.heads), fold_heads(k, p.heads), fold_heads(v, p.heads)),
      p.heads);
  (void)L;
  return ag::linear(attn, p.wo, p.bo);
}

ag::Var multi_source_cross_attention(const ag::Var& z, const ConditioningTokens& ct,
                                     const CrossAttnParams& p) {
  if (z.val().rank() != 3) throw std::invalid_argument("multi_source_cross_attention: rank-3 z");
  int F = z.dim(0);
  ag::Var q = fold_heads(ag::matmul3(z, p.wq), p.heads);  // shared across all streams

  auto stream = [&](const ag::Var& tokens, const ag::Var& wk, const ag::Var& wv,
                    bool per_frame) -> ag::Var {
    ag::Var k, v;
    if (per_frame) {
      if (tokens.dim(0) != F)
        throw std::invalid_argument(
            "multi_source_cross_attention: per-frame condition count != frames");
      k = ag::matmul3(tokens, wk);
      v = ag::matmul3(tokens, wv);
    } else {
      k = ag::expand0(ag::matmul(tokens, wk), F);
      v = ag::expand0(ag::matmul(tokens, wv), F);
    }
    return unfold_heads(attention_batched(q, fold_heads(k, p.heads), fold_heads(v, p.heads)),
                        p.heads);
  };

  ag::Var sum;
  auto accumulate = [&](ag::Var contribution) {
    sum = sum.defined() ? ag::add(sum, contribution) : contribution;
  };
  if (ct.id.defined()) accumulate(stream(ct.id, p.id_k, p.id_v, false));
  if (ct.audio.defined()) {
    if (!p.audio_k.defined())
      throw std::invalid_argument("multi_source_cross_attention: audio stream not built");
    accumulate(stream(ct.audio, p.audio_k, p.audio_v, true));
  }
  if (ct.camera.defined()) {
    if (!p.camera_k.defined())
      throw std::invalid_argument("multi_source_cross_attention: camera stream not built");
    accumulate(stream(ct.camera, p.camera_k, p.camera_v, true));
  }
  if (!sum.defined()) {
    // All streams absent: pre-residual output is exactly zero.
    return ag::constant(Tensor::zeros(z.shape()));
  }
  return ag::linear(sum, p.wo, p.bo);
}

TokenGrid temporal_block(const TokenGrid& z, const TemporalParams& p) {
  if (z.layout != TokenLayout::temporal)
    throw std::invalid_argument("temporal_block: temporal layout required");
  const ag::Var& x = z.tokens;
  if (x.val().rank() != 3) throw std::invalid_argument("temporal_block: rank-3 tokens");
  int G = x.dim(0), F = x.dim(1), C = x.dim(2);
  ag::Var h = ag::layer_norm(x, p.ln_g, p.ln_b);
  // Frame-position encoding so attention can distinguish time steps.
  Tensor pe = frame_position_encoding(F, C);
  ag::Var h_pos = ag::reshape(
      ag::add_rowb(ag::reshape(h, {G, F * C}), ag::constant(Tensor({F * C}, pe.data))),
      {G, F, C});
  ag::Var q = fold_heads(ag::matmul3(h_pos, p.wq), p.heads);
  ag::Var k = fold_heads(ag::matmul3(h_pos, p.wk), p.heads);
  ag::Var v = fold_heads(ag::matmul3(h_pos, p.wv), p.heads);
  ag::Var attn = unfold_heads(attention_batched(q, k, v), p.heads);
  ag::Var out = ag::add(x, ag::linear(attn, p.wo, p.bo));
  return TokenGrid{out, TokenLayout::temporal};
}

namespace {

ag::Var create_or_get(ParamStore& ps, const std::string& name, std::vector<int> shape,
                      double stddev, Rng& rng) {
  return ensure_param(ps, name, std::move(shape), stddev, rng);
}

ag::Var create_or_get_ones(ParamStore& ps, const std::string& name, std::vector<int> shape) {
  return ensure_ones(ps, name, std::move(shape));
}

}  // namespace

SelfAttnParams make_self_attn_params(ParamStore& ps, const std::string& prefix, int C,
                                     int lora_rank, int heads, Rng& rng) {
  double s = 1.0 / std::sqrt(static_cast<double>(C));
  SelfAttnParams p;
  p.heads = heads;
  p.gn_g = create_or_get_ones(ps, prefix + ".gn.g", {C});
  p.gn_b = create_or_get(ps, prefix + ".gn.b", {C}, 0.0, rng);
  p.wq = create_or_get(ps, prefix + ".q.w", {C, C}, s, rng);
  p.wk = create_or_get(ps, prefix + ".k.w", {C, C}, s, rng);
  p.wv = create_or_get(ps, prefix + ".v.w", {C, C}, s, rng);
  p.wo = create_or_get(ps, prefix + ".o.w", {C, C}, s, rng);
  p.bo = create_or_get(ps, prefix + ".o.b", {C}, 0.0, rng);
  if (lora_rank > 0) {
    p.lq.a = create_or_get(ps, prefix + ".q.lora.a", {C, lora_rank}, s, rng);
    p.lq.b = create_or_get(ps, prefix + ".q.lora.b", {lora_rank, C}, 0.0, rng);
    p.lk.a = create_or_get(ps, prefix + ".k.lora.a", {C, lora_rank}, s, rng);
    p.lk.b = create_or_get(ps, prefix + ".k.lora.b", {lora_rank, C}, 0.0, rng);
    p.lv.a = create_or_get(ps, prefix + ".v.lora.a", {C, lora_rank}, s, rng);
    p.lv.b = create_or_get(ps, prefix + ".v.lora.b", {lora_rank, C}, 0.0, rng);
  }
  return p;
}

CrossAttnParams make_cross_attn_params(ParamStore& ps, const std::string& prefix, int C,
                                       int d_model, bool audio, bool camera, int heads,
                                       Rng& rng) {
  double s = 1.0 / std::sqrt(static_cast<double>(C));
  double sm = 1.0 / std::sqrt(static_cast<double>(d_model));
  CrossAttnParams p;
  p.heads = heads;
  p.gn_g = create_or_get_ones(ps, prefix + ".gn.g", {C});
  p.gn_b = create_or_get(ps, prefix + ".gn.b", {C}, 0.0, rng);
  p.wq = create_or_get(ps, prefix + ".q.w", {C, C}, s, rng);
  p.id_k = create_or_get(ps, prefix + ".id.k.w", {d_model, C}, sm, rng);
  p.id_v = create_or_get(ps, prefix + ".id.v.w", {d_model, C}, sm, rng);
  if (audio) {
    // Keys random so attention patterns can form; values exactly zero so a
    // fresh stream contributes nothing until trained.
    p.audio_k = create_or_get(ps, prefix + ".audio.k.w", {d_model, C}, sm, rng);
    p.audio_v = create_or_get(ps, prefix + ".audio.v.w", {d_model, C}, 0.0, rng);
  }
  if (camera) {
    p.camera_k = create_or_get(ps, prefix + ".camera.k.w", {d_model, C}, sm, rng);
    p.camera_v = create_or_get(ps, prefix + ".camera.v.w", {d_model, C}, 0.0, rng);
  }
  p.wo = create_or_get(ps, prefix + ".o.w", {C, C}, s, rng);
  p.bo = create_or_get(ps, prefix + ".o.b", {C}, 0.0, rng);
  return p;
}

TemporalParams make_temporal_params(ParamStore& ps, const std::string& prefix, int C,
                                    int heads, Rng& rng) {
  double s = 1.0 / std::sqrt(static_cast<double>(C));
  TemporalParams p;
  p.heads = heads;
  p.ln_g = create_or_get_ones(ps, prefix + ".ln.g", {C});
  p.ln_b = create_or_get(ps, prefix + ".ln.b", {C}, 0.0, rng);
  p.wq = create_or_get(ps, prefix + ".q.w", {C, C}, s, rng);
  p.wk = create_or_get(ps, prefix + ".k.w", {C, C}, s, rng);
  p.wv = create_or_get(ps, prefix + ".v.w", {C, C}, s, rng);
  // Zero output projection: the block is an exact identity at construction.
  p.wo = create_or_get(ps, prefix + ".o.w", {C, C}, 0.0, rng);
  p.bo = create_or_get(ps, prefix + ".o.b", {C}, 0.0, rng);
  return p;
}

}  // namespace blobdiff
