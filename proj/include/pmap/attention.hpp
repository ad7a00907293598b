#pragma once

#include <utility>

#include "pmap/nn.hpp"

namespace pmap {

// Multi-head scaled dot-product attention. Query/key/value projections and
// the output projection are bias free, so an all-zero memory contributes
// exactly zero to the output and the surrounding residual path is untouched.
// Head h occupies columns [h*d_k, (h+1)*d_k) of the packed projections.
template <typename T>
struct MultiHeadAttention {
  int64_t heads = 1, d_k = 8;
  Linear<T> wq, wk, wv;  // [c_q, heads*d_k], [c_kv, heads*d_k] x2
  Linear<T> proj;        // [heads*d_k, c_q]

  Tensor<T> q_cache, k_cache, v_cache;  // projected
  Tensor<T> attn_cache;                 // [heads, n, m] softmax rows
  Tensor<T> concat_cache;               // [n, heads*d_k]
  Tensor<T> scratch_;                   // [n, m] scores / dA reuse

  MultiHeadAttention() = default;
  MultiHeadAttention(const std::string& name, int64_t c_q, int64_t c_kv, int64_t heads_,
                     int64_t d_k_, Rng& rng)
      : heads(heads_), d_k(d_k_),
        wq(name + ".wq", c_q, heads_ * d_k_, false, rng),
        wk(name + ".wk", c_kv, heads_ * d_k_, false, rng),
        wv(name + ".wv", c_kv, heads_ * d_k_, false, rng),
        proj(name + ".proj", heads_ * d_k_, c_q, false, rng) {}

  // q_in: [n, c_q], kv_in: [m, c_kv] -> [n, c_q].
  Tensor<T> forward(const Tensor<T>& q_in, const Tensor<T>& kv_in) {
    int64_t n = q_in.extent(0), m = kv_in.extent(0), hd = heads * d_k;
    q_cache = wq.forward(q_in);
    k_cache = wk.forward(kv_in);
    v_cache = wv.forward(kv_in);
    if (attn_cache.shape() != Shape({heads, n, m})) attn_cache = Tensor<T>({heads, n, m});
    if (concat_cache.shape() != Shape({n, hd})) concat_cache = Tensor<T>({n, hd});
    if (scratch_.shape() != Shape({n, m})) scratch_ = Tensor<T>({n, m});
    T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(d_k)));
    for (int64_t h = 0; h < heads; ++h) {
      const T* qh = q_cache.data() + h * d_k;
      const T* kh = k_cache.data() + h * d_k;
      const T* vh = v_cache.data() + h * d_k;
      gemm_strided<T>(false, true, n, m, d_k, scale, qh, hd, kh, hd, T(0), scratch_.data(),
                      m);
      T* ah = attn_cache.data() + h * n * m;
      softmax_rows_raw(scratch_.data(), ah, n, m);
      gemm_strided<T>(false, false, n, d_k, m, T(1), ah, m, vh, hd, T(0),
                      concat_cache.data() + h * d_k, hd);
    }
    return proj.forward(concat_cache);
  }

  // Returns (d q_in, d kv_in).
  std::pair<Tensor<T>, Tensor<T>> backward(const Tensor<T>& dy) {
    int64_t n = q_cache.extent(0), m = k_cache.extent(0), hd = heads * d_k;
    Tensor<T> d_concat = proj.backward(dy);
    Tensor<T> dq({n, hd}), dk({m, hd}), dv({m, hd});
    T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(d_k)));
    if (scratch_.shape() != Shape({n, m})) scratch_ = Tensor<T>({n, m});
    for (int64_t h = 0; h < heads; ++h) {
      const T* vh = v_cache.data() + h * d_k;
      const T* oh = d_concat.data() + h * d_k;
      const T* ah = attn_cache.data() + h * n * m;
      // dA = dO V^T ; dV = A^T dO
      gemm_strided<T>(false, true, n, m, d_k, T(1), oh, hd, vh, hd, T(0), scratch_.data(), m);
      gemm_strided<T>(true, false, m, d_k, n, T(1), ah, m, oh, hd, T(0), dv.data() + h * d_k,
                      hd);
      softmax_rows_backward_raw(ah, scratch_.data(), scratch_.data(), n, m);
      const T* ds = scratch_.data();
      // S = scale * Q K^T: dQ = scale * dS K ; dK = scale * dS^T Q
      gemm_strided<T>(false, false, n, d_k, m, scale, ds, m, k_cache.data() + h * d_k, hd,
                      T(0), dq.data() + h * d_k, hd);
      gemm_strided<T>(true, false, m, d_k, n, scale, ds, m, q_cache.data() + h * d_k, hd,
                      T(0), dk.data() + h * d_k, hd);
    }
    Tensor<T> dq_in = wq.backward(dq);
    Tensor<T> dkv = wk.backward(dk);
    add_inplace(dkv, wv.backward(dv));
    return {std::move(dq_in), std::move(dkv)};
  }

  void params(ParamRefs<T>& out) {
    wq.params(out);
    wk.params(out);
    wv.params(out);
    proj.params(out);
  }
};

// One prior-injection layer: queries attend over the prior memory, the
// result is dropped out, added back, and layer normalized. With attention
// disabled only the normalization wrapper remains, so the two modes agree
// exactly whenever the memory is all zeros.
template <typename T>
struct CrossAttentionLayer {
  bool use_attention = true;
  MultiHeadAttention<T> mha;
  Dropout<T> dropout;
  LayerNorm<T> ln;
  bool train_cache = false;

  CrossAttentionLayer() = default;
  CrossAttentionLayer(const std::string& name, int64_t c_q, int64_t c_kv, int64_t heads,
                      int64_t d_k, double dropout_p, bool attend, Rng& rng)
      : use_attention(attend), ln(name + ".ln", c_q) {
    if (attend) {
      mha = MultiHeadAttention<T>(name + ".mha", c_q, c_kv, heads, d_k, rng);
      dropout.p = dropout_p;
    }
  }

  void sample_noise(int64_t n, int64_t c_q, Rng& rng) {
    if (use_attention) dropout.sample({n, c_q}, rng);
  }

  Tensor<T> forward(const Tensor<T>& q, const Tensor<T>& mem, bool train) {
    train_cache = train;
    if (!use_attention) return ln.forward(q);
    Tensor<T> y = mha.forward(q, mem);
    Tensor<T> d = dropout.forward(y, train);
    add_inplace(d, q);
    return ln.forward(d);
  }

  std::pair<Tensor<T>, Tensor<T>> backward(const Tensor<T>& dout) {
    Tensor<T> dsum = ln.backward(dout);
    if (!use_attention) return {std::move(dsum), Tensor<T>()};
    Tensor<T> datt = dropout.backward(dsum, train_cache);
    auto [dq, dmem] = mha.backward(datt);
    add_inplace(dq, dsum);
    return {std::move(dq), std::move(dmem)};
  }

  void params(ParamRefs<T>& out) {
    if (use_attention) mha.params(out);
    ln.params(out);
  }
};

// Pre-norm transformer encoder block (self attention + MLP).
template <typename T>
struct TransformerBlock {
  LayerNorm<T> ln1, ln2;
  MultiHeadAttention<T> mha;
  Linear<T> fc1, fc2;
  Gelu<T> gelu;
  Dropout<T> drop_attn, drop_mlp;
  bool train_cache = false;

  TransformerBlock() = default;
  TransformerBlock(const std::string& name, int64_t c, int64_t heads, int64_t d_k,
                   int64_t hidden, double dropout_p, Rng& rng)
      : ln1(name + ".ln1", c), ln2(name + ".ln2", c),
        mha(name + ".mha", c, c, heads, d_k, rng),
        fc1(name + ".fc1", c, hidden, true, rng),
        fc2(name + ".fc2", hidden, c, true, rng) {
    drop_attn.p = dropout_p;
    drop_mlp.p = dropout_p;
  }

  void sample_noise(int64_t n, int64_t c, Rng& rng) {
    drop_attn.sample({n, c}, rng);
    drop_mlp.sample({n, c}, rng);
  }

  Tensor<T> forward(const Tensor<T>& x, bool train) {
    train_cache = train;
    Tensor<T> h = ln1.forward(x);
    Tensor<T> a = drop_attn.forward(mha.forward(h, h), train);
    add_inplace(a, x);
    Tensor<T> h2 = ln2.forward(a);
    Tensor<T> mlp = drop_mlp.forward(fc2.forward(gelu.forward(fc1.forward(h2))), train);
    add_inplace(mlp, a);
    return mlp;
  }

  Tensor<T> backward(const Tensor<T>& dy) {
    Tensor<T> d_mlp = drop_mlp.backward(dy, train_cache);
    Tensor<T> dh2 = fc1.backward(gelu.backward(fc2.backward(d_mlp)));
    Tensor<T> da = ln2.backward(dh2);
    add_inplace(da, dy);
    Tensor<T> d_attn = drop_attn.backward(da, train_cache);
    auto [dq, dkv] = mha.backward(d_attn);
    add_inplace(dq, dkv);
    Tensor<T> dx = ln1.backward(dq);
    add_inplace(dx, da);
    return dx;
  }

  void params(ParamRefs<T>& out) {
    ln1.params(out);
    mha.params(out);
    ln2.params(out);
    fc1.params(out);
    fc2.params(out);
  }
};

}  // namespace pmap
