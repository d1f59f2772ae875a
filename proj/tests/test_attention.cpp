#include <doctest.h>

#include <cmath>

#include "blobdiff/attention.hpp"
#include "blobdiff/rng.hpp"
#include "testing.hpp"

using namespace blobdiff;
using testing::gradcheck;
using testing::random_tensor;

namespace {

// Independent triple-loop attention oracle (no shared code with the kernel).
Tensor attention_oracle(const Tensor& Q, const Tensor& K, const Tensor& V) {
  int Lq = Q.shape[0], d = Q.shape[1], Lk = K.shape[0];
  Tensor out({Lq, d});
  for (int i = 0; i < Lq; ++i) {
    std::vector<double> w(static_cast<size_t>(Lk));
    double denom = 0.0;
    for (int j = 0; j < Lk; ++j) {
      double s = 0.0;
      for (int c = 0; c < d; ++c) s += Q.at(i, c) * K.at(j, c);
      w[static_cast<size_t>(j)] = std::exp(s / std::sqrt(static_cast<double>(d)));
      denom += w[static_cast<size_t>(j)];
    }
    for (int c = 0; c < d; ++c) {
      double acc = 0.0;
      for (int j = 0; j < Lk; ++j) acc += w[static_cast<size_t>(j)] * V.at(j, c);
      out.at(i, c) = acc / denom;
    }
  }
  return out;
}

Tensor matmul_oracle(const Tensor& A, const Tensor& B) {
  Tensor out({A.shape[0], B.shape[1]});
  for (int i = 0; i < A.shape[0]; ++i)
    for (int j = 0; j < B.shape[1]; ++j) {
      double s = 0.0;
      for (int k = 0; k < A.shape[1]; ++k) s += A.at(i, k) * B.at(k, j);
      out.at(i, j) = s;
    }
  return out;
}

Tensor slice_group(const Tensor& x, int g) {
  Tensor out({x.shape[1], x.shape[2]});
  std::copy(x.data.begin() + static_cast<int64_t>(g) * out.numel(),
            x.data.begin() + static_cast<int64_t>(g + 1) * out.numel(), out.data.begin());
  return out;
}

}  // namespace

TEST_CASE("scaled_dot_attention reductions and oracle agreement") {
  Rng rng(31);

  // Single key: every query returns that V row.
  Tensor Q = random_tensor(rng, {4, 3});
  Tensor K1 = random_tensor(rng, {1, 3});
  Tensor V1 = random_tensor(rng, {1, 3});
  Tensor out = scaled_dot_attention(Q, K1, V1);
  for (int i = 0; i < 4; ++i)
    for (int c = 0; c < 3; ++c) CHECK(out.at(i, c) == doctest::Approx(V1.at(0, c)));

  // Two keys with equal logits: output is the mean of the V rows.
  Tensor Keq({2, 2}, {1.0, 0.0, 1.0, 0.0});
  Tensor Veq({2, 2}, {2.0, -1.0, 4.0, 5.0});
  Tensor Qeq({1, 2}, {0.3, 0.9});
  Tensor meq = scaled_dot_attention(Qeq, Keq, Veq);
  CHECK(meq.at(0, 0) == doctest::Approx(3.0));
  CHECK(meq.at(0, 1) == doctest::Approx(2.0));

  // Brute-force oracle on 12 random instances.
  for (int trial = 0; trial < 12; ++trial) {
    int Lq = rng.uniform_int(1, 4), Lk = rng.uniform_int(1, 5), d = rng.uniform_int(1, 4);
    Tensor q = random_tensor(rng, {Lq, d});
    Tensor k = random_tensor(rng, {Lk, d});
    Tensor v = random_tensor(rng, {Lk, d});
    CHECK(scaled_dot_attention(q, k, v).max_abs_diff(attention_oracle(q, k, v)) < 1e-6);
  }

  // Convexity: each output channel lies within [min V, max V] of that channel.
  Tensor q = random_tensor(rng, {5, 4});
  Tensor k = random_tensor(rng, {7, 4});
  Tensor v = random_tensor(rng, {7, 4});
  Tensor o = scaled_dot_attention(q, k, v);
  for (int c = 0; c < 4; ++c) {
    double lo = 1e300, hi = -1e300;
    for (int j = 0; j < 7; ++j) {
      lo = std::min(lo, v.at(j, c));
      hi = std::max(hi, v.at(j, c));
    }
    for (int i = 0; i < 5; ++i) {
      CHECK(o.at(i, c) >= lo - 1e-12);
      CHECK(o.at(i, c) <= hi + 1e-12);
    }
  }

  Tensor bad = random_tensor(rng, {2, 2});
  bad[0] = std::nan("");
  CHECK_THROWS(scaled_dot_attention(bad, k, v));
}

TEST_CASE("attention_batched matches the rank-2 kernel group by group") {
  Rng rng(32);
  Tensor q = random_tensor(rng, {3, 4, 5});
  Tensor k = random_tensor(rng, {3, 6, 5});
  Tensor v = random_tensor(rng, {3, 6, 5});
  auto out = attention_batched(ag::constant(q), ag::constant(k), ag::constant(v));
  for (int g = 0; g < 3; ++g) {
    Tensor want = scaled_dot_attention(slice_group(q, g), slice_group(k, g), slice_group(v, g));
    CHECK(slice_group(out.val(), g).max_abs_diff(want) < 1e-10);
  }
}

TEST_CASE("fold/unfold heads round-trip and match per-head slices") {
  Rng rng(33);
  Tensor x = random_tensor(rng, {2, 3, 8});
  auto folded = fold_heads(ag::constant(x), 2);
  CHECK(folded.shape() == std::vector<int>{4, 3, 4});
  // Head h of group g holds channels [h*4, (h+1)*4).
  for (int g = 0; g < 2; ++g)
    for (int h = 0; h < 2; ++h)
      for (int l = 0; l < 3; ++l)
        for (int c = 0; c < 4; ++c)
          CHECK(folded.val().at(g * 2 + h, l, c) == x.at(g, l, h * 4 + c));
  auto back = unfold_heads(folded, 2);
  CHECK(back.val().bit_equal(x));
}

TEST_CASE("lora_apply: zero-B no-op, pure-adapter path, full-rank equivalence") {
  Rng rng(34);
  int C = 6, d = 4, r = 2;
  Tensor x = random_tensor(rng, {2, 3, C});
  Tensor w = random_tensor(rng, {C, d});

  // B = 0 -> exactly xW.
  LoraPair zero{ag::constant(random_tensor(rng, {C, r})), ag::constant(Tensor::zeros({r, d}))};
  auto base = lora_apply(ag::constant(x), ag::constant(w), LoraPair{});
  auto with = lora_apply(ag::constant(x), ag::constant(w), zero);
  CHECK(with.val().max_abs_diff(base.val()) == 0.0);

  // W = 0 -> equals x(AB) by oracle.
  Tensor A = random_tensor(rng, {C, r});
  Tensor B = random_tensor(rng, {r, d});
  auto pure = lora_apply(ag::constant(x), ag::constant(Tensor::zeros({C, d})),
                         LoraPair{ag::constant(A), ag::constant(B)});
  Tensor AB = matmul_oracle(A, B);
  for (int g = 0; g < 2; ++g) {
    Tensor want = matmul_oracle(slice_group(x, g), AB);
    CHECK(slice_group(pure.val(), g).max_abs_diff(want) < 1e-10);
  }

  // Full rank r = C with AB = dW reproduces x(W + dW).
  Tensor I = Tensor::zeros({C, C});
  for (int i = 0; i < C; ++i) I.at(i, i) = 1.0;
  Tensor dW = random_tensor(rng, {C, d});
  auto full = lora_apply(ag::constant(x), ag::constant(w),
                         LoraPair{ag::constant(I), ag::constant(dW)});
  Tensor wsum = w;
  for (int64_t i = 0; i < wsum.numel(); ++i) wsum[i] += dW[i];
  auto direct = lora_apply(ag::constant(x), ag::constant(wsum), LoraPair{});
  CHECK(full.val().max_abs_diff(direct.val()) < 1e-12);

  // Rank mismatch rejected.
  CHECK_THROWS(lora_apply(ag::constant(x), ag::constant(w),
                          LoraPair{ag::constant(random_tensor(rng, {C, r})),
                                   ag::constant(random_tensor(rng, {r + 1, d}))}));
}

TEST_CASE("temporal_block: zero-init identity, f=1, and per-location oracle") {
  Rng rng(35);
  ParamStore ps;
  Rng prng = rng.child("params");
  int C = 8;
  auto p = make_temporal_params(ps, "tb", C, 1, prng);

  // Construction default W_O = 0: exact identity on any input.
  Tensor z = random_tensor(rng, {4, 3, C});
  TokenGrid grid{ag::constant(z), TokenLayout::temporal};
  auto out = temporal_block(grid, p);
  CHECK(out.tokens.val().max_abs_diff(z) == 0.0);
  CHECK(out.layout == TokenLayout::temporal);

  // f=1 still identity under zero W_O.
  Tensor z1 = random_tensor(rng, {4, 1, C});
  auto out1 = temporal_block(TokenGrid{ag::constant(z1), TokenLayout::temporal}, p);
  CHECK(out1.tokens.val().max_abs_diff(z1) == 0.0);

  // Wrong layout tag rejected.
  CHECK_THROWS(temporal_block(TokenGrid{ag::constant(z), TokenLayout::spatial}, p));

  // Give W_O real weights and check against a per-spatial-location oracle.
  Tensor wo = random_tensor(rng, {C, C});
  p.wo.val() = wo;
  Tensor z2 = random_tensor(rng, {4, 3, C});  // h*w = 4 locations, f = 3
  auto out2 = temporal_block(TokenGrid{ag::constant(z2), TokenLayout::temporal}, p);
  Tensor pe = frame_position_encoding(3, C);
  for (int g = 0; g < 4; ++g) {
    Tensor xg = slice_group(z2, g);  // [3, C]
    // Scalar layer norm + position encoding.
    Tensor h({3, C});
    for (int f = 0; f < 3; ++f) {
      double mean = 0, var = 0;
      for (int c = 0; c < C; ++c) mean += xg.at(f, c);
      mean /= C;
      for (int c = 0; c < C; ++c) var += (xg.at(f, c) - mean) * (xg.at(f, c) - mean);
      var /= C;
      for (int c = 0; c < C; ++c)
        h.at(f, c) = (xg.at(f, c) - mean) / std::sqrt(var + 1e-5) * p.ln_g.val()[c] +
                     p.ln_b.val()[c] + pe.at(f, c);
    }
    Tensor q = matmul_oracle(h, p.wq.val());
    Tensor k = matmul_oracle(h, p.wk.val());
    Tensor v = matmul_oracle(h, p.wv.val());
    Tensor attn = attention_oracle(q, k, v);
    Tensor proj = matmul_oracle(attn, wo);
    for (int f = 0; f < 3; ++f)
      for (int c = 0; c < C; ++c) {
        double want = xg.at(f, c) + proj.at(f, c) + p.bo.val()[c];
        CHECK(std::abs(out2.tokens.val().at(g, f, c) - want) < 1e-8);
      }
  }
}

TEST_CASE("multi_source_cross_attention: stream zeroing, absence, permutation") {
  Rng rng(36);
  ParamStore ps;
  Rng prng = rng.child("params");
  int C = 8, dm = 6, F = 3, L = 4;
  auto p = make_cross_attn_params(ps, "ca", C, dm, true, true, 1, prng);
  // Fresh audio/camera values are zero-initialized; give them real weights
  // so the zeroing test is meaningful.
  p.audio_v.val() = random_tensor(rng, {dm, C});
  p.camera_v.val() = random_tensor(rng, {dm, C});

  Tensor z = random_tensor(rng, {F, L, C});
  ConditioningTokens all;
  all.id = ag::constant(random_tensor(rng, {2, dm}));
  all.audio = ag::constant(random_tensor(rng, {F, 1, dm}));
  all.camera = ag::constant(random_tensor(rng, {F, 1, dm}));

  auto full = multi_source_cross_attention(ag::constant(z), all, p);

  // Zeroing audio+camera K/V reproduces the ID-only computation exactly.
  Tensor ak = p.audio_k.val(), av = p.audio_v.val();
  Tensor ck = p.camera_k.val(), cv = p.camera_v.val();
  p.audio_k.val() = Tensor::zeros({dm, C});
  p.audio_v.val() = Tensor::zeros({dm, C});
  p.camera_k.val() = Tensor::zeros({dm, C});
  p.camera_v.val() = Tensor::zeros({dm, C});
  auto zeroed = multi_source_cross_attention(ag::constant(z), all, p);
  ConditioningTokens id_only;
  id_only.id = all.id;
  auto idonly = multi_source_cross_attention(ag::constant(z), id_only, p);
  CHECK(zeroed.val().max_abs_diff(idonly.val()) == 0.0);
  p.audio_k.val() = ak;
  p.audio_v.val() = av;
  p.camera_k.val() = ck;
  p.camera_v.val() = cv;

  // All streams absent: pre-residual output is exactly zero.
  auto none = multi_source_cross_attention(ag::constant(z), ConditioningTokens{}, p);
  CHECK(none.val().max_abs() == 0.0);

  // Additivity: fused result equals per-stream oracle sum.
  Tensor q = matmul_oracle(slice_group(z, 1), p.wq.val());
  Tensor sum({L, C});
  {
    Tensor k = matmul_oracle(all.id.val(), p.id_k.val());
    Tensor v = matmul_oracle(all.id.val(), p.id_v.val());
    Tensor a = attention_oracle(q, k, v);
    for (int64_t i = 0; i < sum.numel(); ++i) sum[i] += a[i];
  }
  {
    Tensor k = matmul_oracle(slice_group(all.audio.val(), 1), p.audio_k.val());
    Tensor v = matmul_oracle(slice_group(all.audio.val(), 1), p.audio_v.val());
    Tensor a = attention_oracle(q, k, v);
    for (int64_t i = 0; i < sum.numel(); ++i) sum[i] += a[i];
  }
  {
    Tensor k = matmul_oracle(slice_group(all.camera.val(), 1), p.camera_k.val());
    Tensor v = matmul_oracle(slice_group(all.camera.val(), 1), p.camera_v.val());
    Tensor a = attention_oracle(q, k, v);
    for (int64_t i = 0; i < sum.numel(); ++i) sum[i] += a[i];
  }
  Tensor want = matmul_oracle(sum, p.wo.val());
  for (int l = 0; l < L; ++l)
    for (int c = 0; c < C; ++c)
      CHECK(std::abs(full.val().at(1, l, c) - (want.at(l, c) + p.bo.val()[c])) < 1e-8);

  // Joint frame permutation of (z, audio, camera) permutes output frames.
  std::vector<int> perm = {2, 0, 1};
  auto permute_axis0 = [&](const Tensor& t) {
    Tensor out = t;
    int64_t inner = t.numel() / t.shape[0];
    for (int f = 0; f < t.shape[0]; ++f)
      std::copy(t.data.begin() + perm[static_cast<size_t>(f)] * inner,
                t.data.begin() + (perm[static_cast<size_t>(f)] + 1) * inner,
                out.data.begin() + f * inner);
    return out;
  };
  ConditioningTokens permuted;
  permuted.id = all.id;
  permuted.audio = ag::constant(permute_axis0(all.audio.val()));
  permuted.camera = ag::constant(permute_axis0(all.camera.val()));
  auto out_perm =
      multi_source_cross_attention(ag::constant(permute_axis0(z)), permuted, p);
  CHECK(out_perm.val().max_abs_diff(permute_axis0(full.val())) < 1e-12);

  // Frame-count mismatch rejected.
  ConditioningTokens bad;
  bad.audio = ag::constant(random_tensor(rng, {F + 1, 1, dm}));
  CHECK_THROWS(multi_source_cross_attention(ag::constant(z), bad, p));
}

TEST_CASE("extended_self_attention: reductions and brute-force oracle") {
  Rng rng(37);
  ParamStore ps;
  Rng prng = rng.child("params");
  int C = 8, F = 2, L = 4;
  auto p = make_self_attn_params(ps, "sa", C, 2, 1, prng);

  Tensor z = random_tensor(rng, {F, L, C});

  // m=0, LoRA B=0 (construction default): plain self-attention on base weights.
  auto plain = extended_self_attention(ag::constant(z), std::nullopt, p);
  for (int f = 0; f < F; ++f) {
    Tensor zf = slice_group(z, f);
    Tensor q = matmul_oracle(zf, p.wq.val());
    Tensor k = matmul_oracle(zf, p.wk.val());
    Tensor v = matmul_oracle(zf, p.wv.val());
    Tensor want = matmul_oracle(attention_oracle(q, k, v), p.wo.val());
    for (int l = 0; l < L; ++l)
      for (int c = 0; c < C; ++c)
        CHECK(std::abs(plain.val().at(f, l, c) - (want.at(l, c) + p.bo.val()[c])) < 1e-8);
  }

  // z_ref = z duplicated: softmax mass rescales uniformly, output unchanged.
  for (int f = 0; f < F; ++f) {
    Tensor zf = slice_group(z, f);
    Tensor zf3({1, L, C}, zf.data);
    auto dup = extended_self_attention(ag::constant(zf3), Tensor({1, L, C}, zf.data), p);
    auto single = extended_self_attention(ag::constant(zf3), std::nullopt, p);
    CHECK(dup.val().max_abs_diff(single.val()) < 1e-10);
  }

  // m=2 random references against the brute-force oracle.
  Tensor ref = random_tensor(rng, {2, L, C});
  auto ext = extended_self_attention(ag::constant(z), ref, p);
  for (int f = 0; f < F; ++f) {
    Tensor zf = slice_group(z, f);
    Tensor cat({3 * L, C});
    std::copy(zf.data.begin(), zf.data.end(), cat.data.begin());
    std::copy(ref.data.begin(), ref.data.end(), cat.data.begin() + zf.numel());
    Tensor q = matmul_oracle(zf, p.wq.val());
    Tensor k = matmul_oracle(cat, p.wk.val());
    Tensor v = matmul_oracle(cat, p.wv.val());
    Tensor want = matmul_oracle(attention_oracle(q, k, v), p.wo.val());
    for (int l = 0; l < L; ++l)
      for (int c = 0; c < C; ++c)
        CHECK(std::abs(ext.val().at(f, l, c) - (want.at(l, c) + p.bo.val()[c])) < 1e-8);
  }

  // Nonzero LoRA must change the result; channel mismatch must throw.
  p.lq.b.val() = random_tensor(rng, {2, C});
  auto adapted = extended_self_attention(ag::constant(z), std::nullopt, p);
  CHECK(adapted.val().max_abs_diff(plain.val()) > 1e-6);
  CHECK_THROWS(extended_self_attention(ag::constant(z), Tensor({1, L, C + 1}), p));
}

TEST_CASE("multi-head attention matches manual per-head computation") {
  Rng rng(38);
  ParamStore ps;
  Rng prng = rng.child("params");
  int C = 8, heads = 2, F = 2, L = 3;
  auto p = make_self_attn_params(ps, "mh", C, 0, heads, prng);
  Tensor z = random_tensor(rng, {F, L, C});
  auto out = extended_self_attention(ag::constant(z), std::nullopt, p);

  for (int f = 0; f < F; ++f) {
    Tensor zf = slice_group(z, f);
    Tensor q = matmul_oracle(zf, p.wq.val());
    Tensor k = matmul_oracle(zf, p.wk.val());
    Tensor v = matmul_oracle(zf, p.wv.val());
    Tensor merged({L, C});
    int hc = C / heads;
    for (int h = 0; h < heads; ++h) {
      Tensor qh({L, hc}), kh({L, hc}), vh({L, hc});
      for (int l = 0; l < L; ++l)
        for (int c = 0; c < hc; ++c) {
          qh.at(l, c) = q.at(l, h * hc + c);
          kh.at(l, c) = k.at(l, h * hc + c);
          vh.at(l, c) = v.at(l, h * hc + c);
        }
      Tensor ah = attention_oracle(qh, kh, vh);
      for (int l = 0; l < L; ++l)
        for (int c = 0; c < hc; ++c) merged.at(l, h * hc + c) = ah.at(l, c);
    }
    Tensor want = matmul_oracle(merged, p.wo.val());
    for (int l = 0; l < L; ++l)
      for (int c = 0; c < C; ++c)
        CHECK(std::abs(out.val().at(f, l, c) - (want.at(l, c) + p.bo.val()[c])) < 1e-8);
  }
}

TEST_CASE("gradcheck: all three attention blocks end to end") {
  Rng rng(39);
  int C = 8, F = 2, L = 4, dm = 6;

  // Temporal block (nonzero W_O so the attention path carries gradient).
  {
    ParamStore ps;
    Rng prng = rng.child("p1");
    auto p = make_temporal_params(ps, "tb", C, 1, prng);
    std::vector<Tensor> inputs = {random_tensor(rng, {3, F, C}),
                                  random_tensor(rng, {C, C}, 0.3),
                                  p.wq.val(),
                                  p.wk.val(),
                                  p.wv.val(),
                                  p.ln_g.val(),
                                  p.ln_b.val()};
    auto build = [&](const std::vector<ag::Var>& l) {
      TemporalParams q = p;
      q.wo = l[1];
      q.wq = l[2];
      q.wk = l[3];
      q.wv = l[4];
      q.ln_g = l[5];
      q.ln_b = l[6];
      auto out = temporal_block(TokenGrid{l[0], TokenLayout::temporal}, q);
      return ag::mean_all(ag::square(out.tokens));
    };
    CHECK(gradcheck(build, inputs) < 1e-3);
  }

  // Cross-attention with all streams.
  {
    ParamStore ps;
    Rng prng = rng.child("p2");
    auto p = make_cross_attn_params(ps, "ca", C, dm, true, true, 1, prng);
    std::vector<Tensor> inputs = {random_tensor(rng, {F, L, C}),
                                  random_tensor(rng, {2, dm}),
                                  random_tensor(rng, {F, 1, dm}),
                                  random_tensor(rng, {F, 1, dm}),
                                  p.audio_k.val(),
                                  random_tensor(rng, {dm, C}, 0.4),
                                  p.wq.val(),
                                  p.wo.val()};
    auto build = [&](const std::vector<ag::Var>& l) {
      CrossAttnParams q = p;
      q.audio_k = l[4];
      q.audio_v = l[5];
      q.wq = l[6];
      q.wo = l[7];
      ConditioningTokens ct;
      ct.id = l[1];
      ct.audio = l[2];
      ct.camera = l[3];
      auto out = multi_source_cross_attention(l[0], ct, q);
      return ag::mean_all(ag::square(out));
    };
    CHECK(gradcheck(build, inputs) < 1e-3);
  }

  // Extended self-attention with reference tokens and live LoRA.
  {
    ParamStore ps;
    Rng prng = rng.child("p3");
    auto p = make_self_attn_params(ps, "sa", C, 2, 1, prng);
    Tensor ref = random_tensor(rng, {1, L, C});
    std::vector<Tensor> inputs = {random_tensor(rng, {F, L, C}),
                                  p.wq.val(),
                                  p.wk.val(),
                                  p.wv.val(),
                                  p.wo.val(),
                                  p.lq.a.val(),
                                  random_tensor(rng, {2, C}, 0.3),
                                  p.bo.val()};
    auto build = [&](const std::vector<ag::Var>& l) {
      SelfAttnParams q = p;
      q.wq = l[1];
      q.wk = l[2];
      q.wv = l[3];
      q.wo = l[4];
      q.lq.a = l[5];
      q.lq.b = l[6];
      q.bo = l[7];
      auto out = extended_self_attention(l[0], ref, q);
      return ag::mean_all(ag::square(out));
    };
    CHECK(gradcheck(build, inputs) < 1e-3);
  }
}
