#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "seq2seq/common.hpp"
#include "seq2seq/noising.hpp"
#include "seq2seq/rng.hpp"
#include "seq2seq/tensor_file.hpp"

namespace seq2seq {

template <typename T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using Vec = Eigen::Matrix<T, Eigen::Dynamic, 1>;

struct ModelConfig {
  int enc_layers = 2;
  int dec_layers = 2;
  int heads = 2;
  int d_model = 64;
  int d_ff = 0;  // 0 means the default 4 * d_model
  int max_positions = 256;
  int vocab_size = 0;
  bool tie_embeddings = false;

  int ff_dim() const { return d_ff > 0 ? d_ff : 4 * d_model; }
  int head_dim() const { return d_model / heads; }

  void validate() const {
    if (enc_layers < 1 || dec_layers < 1) throw ConfigError("model: layer counts must be >= 1");
    if (heads < 1) throw ConfigError("model: heads must be >= 1");
    if (d_model < 1 || d_model % heads != 0)
      throw ConfigError("model: d_model must be positive and divisible by heads");
    if (max_positions < 1) throw ConfigError("model: max_positions must be >= 1");
    if (vocab_size < 1) throw ConfigError("model: vocab_size must be >= 1");
  }
};

template <typename T>
struct LayerNormParams {
  Vec<T> gain, bias;
};

template <typename T>
struct AttentionParams {
  Mat<T> wq, wk, wv, wo;  // [d, d]
  Vec<T> bq, bk, bv, bo;  // [d]
};

template <typename T>
struct FfnParams {
  Mat<T> w1;  // [d_ff, d]
  Vec<T> b1;  // [d_ff]
  Mat<T> w2;  // [d, d_ff]
  Vec<T> b2;  // [d]
};

template <typename T>
struct EncoderLayerParams {
  LayerNormParams<T> ln_attn;
  AttentionParams<T> attn;
  LayerNormParams<T> ln_ffn;
  FfnParams<T> ffn;
};

template <typename T>
struct DecoderLayerParams {
  LayerNormParams<T> ln_self;
  AttentionParams<T> self_attn;
  LayerNormParams<T> ln_cross;
  AttentionParams<T> cross_attn;
  LayerNormParams<T> ln_ffn;
  FfnParams<T> ffn;
};

enum class ParamKind { Weight, Bias, NormGain, NormBias };

/// Weight decay applies to everything except biases and layernorm parameters.
inline bool decays(ParamKind kind) { return kind == ParamKind::Weight; }

inline bool is_encoder_param(const std::string& name) { return name.rfind("enc.", 0) == 0; }

/// Full parameter set of the Pre-LN encoder-decoder. Encoder, decoder, and
/// LM-head embeddings are three distinct tensors unless tie_embeddings is
/// set, in which case enc_tok_emb is the single storage for all three.
template <typename T>
struct ModelParams {
  ModelConfig config;
  Mat<T> enc_tok_emb, dec_tok_emb;  // [V, d]
  Mat<T> enc_pos_emb, dec_pos_emb;  // [max_positions, d]
  std::vector<EncoderLayerParams<T>> enc_layers;
  std::vector<DecoderLayerParams<T>> dec_layers;
  LayerNormParams<T> enc_final_ln, dec_final_ln;
  Mat<T> lm_head_w;  // [V, d]
  Vec<T> lm_head_b;  // [V]

  const Mat<T>& dec_embedding() const { return config.tie_embeddings ? enc_tok_emb : dec_tok_emb; }
  Mat<T>& dec_embedding() { return config.tie_embeddings ? enc_tok_emb : dec_tok_emb; }
  const Mat<T>& head_weight() const { return config.tie_embeddings ? enc_tok_emb : lm_head_w; }
  Mat<T>& head_weight() { return config.tie_embeddings ? enc_tok_emb : lm_head_w; }

  std::size_t parameter_count() const;
};

namespace detail {

template <typename Params, typename Fn>
void walk_attention(const std::string& base, Params& ap, Fn&& fn) {
  fn(base + ".wq", ParamKind::Weight, ap.wq);
  fn(base + ".bq", ParamKind::Bias, ap.bq);
  fn(base + ".wk", ParamKind::Weight, ap.wk);
  fn(base + ".bk", ParamKind::Bias, ap.bk);
  fn(base + ".wv", ParamKind::Weight, ap.wv);
  fn(base + ".bv", ParamKind::Bias, ap.bv);
  fn(base + ".wo", ParamKind::Weight, ap.wo);
  fn(base + ".bo", ParamKind::Bias, ap.bo);
}

template <typename Params, typename Fn>
void walk_ln(const std::string& base, Params& ln, Fn&& fn) {
  fn(base + ".gain", ParamKind::NormGain, ln.gain);
  fn(base + ".bias", ParamKind::NormBias, ln.bias);
}

template <typename Params, typename Fn>
void walk_ffn(const std::string& base, Params& fp, Fn&& fn) {
  fn(base + ".w1", ParamKind::Weight, fp.w1);
  fn(base + ".b1", ParamKind::Bias, fp.b1);
  fn(base + ".w2", ParamKind::Weight, fp.w2);
  fn(base + ".b2", ParamKind::Bias, fp.b2);
}

/// Visits every parameter tensor in a fixed, name-stable order.
template <typename P, typename Fn>
void walk_params(P& p, Fn&& fn) {
  fn("enc.tok_emb", ParamKind::Weight, p.enc_tok_emb);
  if (!p.config.tie_embeddings) fn("dec.tok_emb", ParamKind::Weight, p.dec_tok_emb);
  fn("enc.pos_emb", ParamKind::Weight, p.enc_pos_emb);
  fn("dec.pos_emb", ParamKind::Weight, p.dec_pos_emb);
  for (std::size_t i = 0; i < p.enc_layers.size(); ++i) {
    auto& layer = p.enc_layers[i];
    const std::string base = "enc." + std::to_string(i) + ".";
    walk_ln(base + "ln_attn", layer.ln_attn, fn);
    walk_attention(base + "attn", layer.attn, fn);
    walk_ln(base + "ln_ffn", layer.ln_ffn, fn);
    walk_ffn(base + "ffn", layer.ffn, fn);
  }
  walk_ln("enc.final_ln", p.enc_final_ln, fn);
  for (std::size_t i = 0; i < p.dec_layers.size(); ++i) {
    auto& layer = p.dec_layers[i];
    const std::string base = "dec." + std::to_string(i) + ".";
    walk_ln(base + "ln_self", layer.ln_self, fn);
    walk_attention(base + "self_attn", layer.self_attn, fn);
    walk_ln(base + "ln_cross", layer.ln_cross, fn);
    walk_attention(base + "cross_attn", layer.cross_attn, fn);
    walk_ln(base + "ln_ffn", layer.ln_ffn, fn);
    walk_ffn(base + "ffn", layer.ffn, fn);
  }
  walk_ln("dec.final_ln", p.dec_final_ln, fn);
  if (!p.config.tie_embeddings) fn("lm_head.w", ParamKind::Weight, p.lm_head_w);
  fn("lm_head.b", ParamKind::Bias, p.lm_head_b);
}

}  // namespace detail

template <typename T>
struct ParamEntry {
  std::string name;
  ParamKind kind;
  T* data;
  std::size_t rows, cols;
  std::size_t size() const { return rows * cols; }
};

template <typename T>
std::vector<ParamEntry<T>> enumerate_params(ModelParams<T>& p) {
  std::vector<ParamEntry<T>> out;
  detail::walk_params(p, [&](std::string name, ParamKind kind, auto& tensor) {
    out.push_back({std::move(name), kind, tensor.data(), static_cast<std::size_t>(tensor.rows()),
                   static_cast<std::size_t>(tensor.cols())});
  });
  return out;
}

template <typename T>
std::vector<ParamEntry<const T>> enumerate_params(const ModelParams<T>& p) {
  std::vector<ParamEntry<const T>> out;
  detail::walk_params(p, [&](std::string name, ParamKind kind, const auto& tensor) {
    out.push_back({std::move(name), kind, tensor.data(), static_cast<std::size_t>(tensor.rows()),
                   static_cast<std::size_t>(tensor.cols())});
  });
  return out;
}

template <typename T>
std::size_t ModelParams<T>::parameter_count() const {
  std::size_t n = 0;
  for (const auto& e : enumerate_params(*this)) n += e.size();
  return n;
}

/// Zero-valued parameter set with all shapes derived from the config.
template <typename T>
ModelParams<T> allocate_params(const ModelConfig& cfg) {
  cfg.validate();
  const int d = cfg.d_model;
  const int ff = cfg.ff_dim();
  const int v = cfg.vocab_size;
  ModelParams<T> p;
  p.config = cfg;
  auto zero_mat = [](Mat<T>& m, int r, int c) { m = Mat<T>::Zero(r, c); };
  auto zero_vec = [](Vec<T>& x, int n) { x = Vec<T>::Zero(n); };
  zero_mat(p.enc_tok_emb, v, d);
  if (!cfg.tie_embeddings) zero_mat(p.dec_tok_emb, v, d);
  zero_mat(p.enc_pos_emb, cfg.max_positions, d);
  zero_mat(p.dec_pos_emb, cfg.max_positions, d);
  auto init_ln = [&](LayerNormParams<T>& ln) {
    zero_vec(ln.gain, d);
    zero_vec(ln.bias, d);
  };
  auto init_attn = [&](AttentionParams<T>& a) {
    zero_mat(a.wq, d, d);
    zero_mat(a.wk, d, d);
    zero_mat(a.wv, d, d);
    zero_mat(a.wo, d, d);
    zero_vec(a.bq, d);
    zero_vec(a.bk, d);
    zero_vec(a.bv, d);
    zero_vec(a.bo, d);
  };
  auto init_ffn = [&](FfnParams<T>& f) {
    zero_mat(f.w1, ff, d);
    zero_vec(f.b1, ff);
    zero_mat(f.w2, d, ff);
    zero_vec(f.b2, d);
  };
  p.enc_layers.resize(cfg.enc_layers);
  for (auto& layer : p.enc_layers) {
    init_ln(layer.ln_attn);
    init_attn(layer.attn);
    init_ln(layer.ln_ffn);
    init_ffn(layer.ffn);
  }
  p.dec_layers.resize(cfg.dec_layers);
  for (auto& layer : p.dec_layers) {
    init_ln(layer.ln_self);
    init_attn(layer.self_attn);
    init_ln(layer.ln_cross);
    init_attn(layer.cross_attn);
    init_ln(layer.ln_ffn);
    init_ffn(layer.ffn);
  }
  init_ln(p.enc_final_ln);
  init_ln(p.dec_final_ln);
  if (!cfg.tie_embeddings) zero_mat(p.lm_head_w, v, d);
  zero_vec(p.lm_head_b, v);
  return p;
}

template <typename T>
ModelParams<T> zeros_like(const ModelParams<T>& p) {
  return allocate_params<T>(p.config);
}

/// Default init: N(0, 0.02) weights, zero biases, unit layernorm gains.
/// With `encoder_source` given, every encoder tensor is copied from it and
/// the decoder embedding and LM-head matrix start as copies of the source's
/// encoder embedding (independent tensors from then on).
template <typename T>
ModelParams<T> init_params(const ModelConfig& cfg, std::uint64_t seed,
                           const ModelParams<T>* encoder_source = nullptr) {
  ModelParams<T> p = allocate_params<T>(cfg);
  Rng rng(seed);
  for (auto& e : enumerate_params(p)) {
    switch (e.kind) {
      case ParamKind::Weight:
        for (std::size_t i = 0; i < e.size(); ++i)
          e.data[i] = static_cast<T>(rng.next_normal() * 0.02);
        break;
      case ParamKind::NormGain:
        for (std::size_t i = 0; i < e.size(); ++i) e.data[i] = T(1);
        break;
      case ParamKind::Bias:
      case ParamKind::NormBias:
        break;  // already zero
    }
  }
  if (encoder_source) {
    std::map<std::string, ParamEntry<const T>> src;
    for (auto& e : enumerate_params(*encoder_source)) src.emplace(e.name, e);
    for (auto& e : enumerate_params(p)) {
      if (!is_encoder_param(e.name)) continue;
      auto it = src.find(e.name);
      if (it == src.end())
        throw std::runtime_error("init: encoder checkpoint is missing tensor " + e.name);
      const auto& s = it->second;
      if (s.rows != e.rows || s.cols != e.cols)
        throw std::runtime_error("init: shape mismatch for tensor " + e.name + " (" +
                                 std::to_string(e.rows) + "x" + std::to_string(e.cols) + " vs " +
                                 std::to_string(s.rows) + "x" + std::to_string(s.cols) + ")");
      std::copy(s.data, s.data + s.size(), e.data);
    }
    if (!cfg.tie_embeddings) {
      p.dec_tok_emb = p.enc_tok_emb;
      p.lm_head_w = p.enc_tok_emb;
    }
  }
  return p;
}

// --- batches ---------------------------------------------------------------

struct Batch {
  std::vector<TokenIds> encoder_ids;
  std::vector<std::vector<std::uint8_t>> encoder_mask;
  std::vector<TokenIds> decoder_input_ids;
  std::vector<std::vector<std::uint8_t>> decoder_mask;
  std::vector<TokenIds> target_ids;
  std::vector<std::vector<std::uint8_t>> loss_mask;

  std::size_t size() const { return encoder_ids.size(); }

  std::size_t active_positions() const {
    std::size_t n = 0;
    for (const auto& row : loss_mask)
      for (std::uint8_t m : row) n += m;
    return n;
  }
};

/// Teacher-forcing batch: targets get a trailing EOS, decoder inputs are the
/// BOS-shifted targets, everything padded to the row maximum.
inline Batch make_batch(std::span<const NoisedPair> pairs, const SpecialTokens& sp) {
  if (pairs.empty()) throw std::invalid_argument("make_batch: empty pair list");
  std::size_t enc_len = 0, dec_len = 0;
  for (const NoisedPair& pr : pairs) {
    enc_len = std::max(enc_len, pr.encoder_ids.size());
    dec_len = std::max(dec_len, pr.decoder_target_ids.size() + 1);  // + EOS
  }
  Batch b;
  for (const NoisedPair& pr : pairs) {
    TokenIds enc = pr.encoder_ids;
    std::vector<std::uint8_t> emask(enc.size(), 1);
    enc.resize(enc_len, sp.pad);
    emask.resize(enc_len, 0);

    TokenIds target = pr.decoder_target_ids;
    target.push_back(sp.eos);
    TokenIds dec_in;
    dec_in.reserve(target.size());
    dec_in.push_back(sp.bos);
    dec_in.insert(dec_in.end(), target.begin(), target.end() - 1);
    std::vector<std::uint8_t> dmask(target.size(), 1);
    target.resize(dec_len, sp.pad);
    dec_in.resize(dec_len, sp.pad);
    dmask.resize(dec_len, 0);

    b.encoder_ids.push_back(std::move(enc));
    b.encoder_mask.push_back(std::move(emask));
    b.decoder_input_ids.push_back(std::move(dec_in));
    b.decoder_mask.push_back(dmask);
    b.target_ids.push_back(std::move(target));
    b.loss_mask.push_back(std::move(dmask));
  }
  return b;
}

// --- forward / backward machinery ------------------------------------------

namespace detail {

inline constexpr double kLnEps = 1e-5;

template <typename T>
struct LnCache {
  Mat<T> xhat;
  Vec<T> inv_std;
};

template <typename T>
Mat<T> layer_norm_forward(const Mat<T>& x, const LayerNormParams<T>& ln, LnCache<T>& cache) {
  const auto rows = x.rows();
  const auto cols = x.cols();
  cache.xhat.resize(rows, cols);
  cache.inv_std.resize(rows);
  Mat<T> out(rows, cols);
  for (Eigen::Index r = 0; r < rows; ++r) {
    const T mean = x.row(r).mean();
    const T var = (x.row(r).array() - mean).square().mean();
    const T inv = T(1) / std::sqrt(var + static_cast<T>(kLnEps));
    cache.inv_std(r) = inv;
    cache.xhat.row(r) = (x.row(r).array() - mean) * inv;
    out.row(r) =
        cache.xhat.row(r).cwiseProduct(ln.gain.transpose()) + ln.bias.transpose();
  }
  return out;
}

template <typename T>
void layer_norm_backward(const LayerNormParams<T>& ln, LayerNormParams<T>& grad,
                         const LnCache<T>& cache, const Mat<T>& dy, Mat<T>& dx) {
  for (Eigen::Index r = 0; r < dy.rows(); ++r) {
    // dx = (dxhat - mean(dxhat) - xhat * mean(dxhat .* xhat)) * inv_std
    Eigen::Array<T, 1, Eigen::Dynamic> dxhat =
        dy.row(r).array() * ln.gain.transpose().array();
    const T m1 = dxhat.mean();
    const T m2 = (dxhat * cache.xhat.row(r).array()).mean();
    dx.row(r) +=
        ((dxhat - m1 - cache.xhat.row(r).array() * m2) * cache.inv_std(r)).matrix();
    grad.gain += dy.row(r).cwiseProduct(cache.xhat.row(r)).transpose();
    grad.bias += dy.row(r).transpose();
  }
}

template <typename T>
T gelu(T x) {
  return T(0.5) * x * (T(1) + std::erf(x * T(M_SQRT1_2)));
}

template <typename T>
T gelu_grad(T x) {
  const T cdf = T(0.5) * (T(1) + std::erf(x * T(M_SQRT1_2)));
  const T pdf = std::exp(T(-0.5) * x * x) * T(0.3989422804014327);  // 1/sqrt(2*pi)
  return cdf + x * pdf;
}

template <typename T>
struct FfnCache {
  Mat<T> input, z1, act;
};

template <typename T>
Mat<T> ffn_forward(const FfnParams<T>& fp, const Mat<T>& x, FfnCache<T>& cache) {
  cache.input = x;
  cache.z1 = x * fp.w1.transpose();
  cache.z1.rowwise() += fp.b1.transpose();
  cache.act = cache.z1.unaryExpr([](T v) { return gelu(v); });
  Mat<T> out = cache.act * fp.w2.transpose();
  out.rowwise() += fp.b2.transpose();
  return out;
}

template <typename T>
void ffn_backward(const FfnParams<T>& fp, FfnParams<T>& grad, const FfnCache<T>& cache,
                  const Mat<T>& d_out, Mat<T>& dx) {
  grad.w2 += d_out.transpose() * cache.act;
  grad.b2 += d_out.colwise().sum().transpose();
  Mat<T> d_act = d_out * fp.w2;
  Mat<T> d_z1 =
      d_act.cwiseProduct(cache.z1.unaryExpr([](T v) { return gelu_grad(v); }));
  grad.w1 += d_z1.transpose() * cache.input;
  grad.b1 += d_z1.colwise().sum().transpose();
  dx += d_z1 * fp.w1;
}

template <typename T>
struct AttnCache {
  Mat<T> query_in, key_in;    // layernormed inputs feeding the projections
  Mat<T> q, k, v;             // [Tq,d], [Tk,d], [Tk,d]
  std::vector<Mat<T>> probs;  // per head [Tq,Tk]
  Mat<T> ctx;                 // [Tq,d]
};

/// Scaled dot-product attention over `heads` slices of width d/heads.
/// `key_mask` (when given) hides padded key positions; `causal` restricts
/// queries to keys at or before their own position.
template <typename T>
Mat<T> attention_forward(const AttentionParams<T>& ap, int heads, const Mat<T>& query_in,
                         const Mat<T>& key_in, const std::vector<std::uint8_t>* key_mask,
                         bool causal, AttnCache<T>& cache) {
  const Eigen::Index tq = query_in.rows();
  const Eigen::Index tk = key_in.rows();
  const Eigen::Index d = query_in.cols();
  const Eigen::Index dh = d / heads;
  const T scale = T(1) / std::sqrt(static_cast<T>(dh));
  const T neg_inf = -std::numeric_limits<T>::infinity();

  cache.query_in = query_in;
  cache.key_in = key_in;
  cache.q = query_in * ap.wq.transpose();
  cache.q.rowwise() += ap.bq.transpose();
  cache.k = key_in * ap.wk.transpose();
  cache.k.rowwise() += ap.bk.transpose();
  cache.v = key_in * ap.wv.transpose();
  cache.v.rowwise() += ap.bv.transpose();
  cache.probs.assign(heads, Mat<T>());
  cache.ctx.resize(tq, d);

  for (int h = 0; h < heads; ++h) {
    auto qh = cache.q.middleCols(h * dh, dh);
    auto kh = cache.k.middleCols(h * dh, dh);
    auto vh = cache.v.middleCols(h * dh, dh);
    Mat<T> scores = qh * kh.transpose() * scale;
    if (key_mask) {
      for (Eigen::Index j = 0; j < tk; ++j)
        if (!(*key_mask)[static_cast<std::size_t>(j)]) scores.col(j).setConstant(neg_inf);
    }
    if (causal) {
      for (Eigen::Index i = 0; i < tq; ++i)
        for (Eigen::Index j = i + 1; j < tk; ++j) scores(i, j) = neg_inf;
    }
    Mat<T>& probs = cache.probs[h];
    probs.resize(tq, tk);
    for (Eigen::Index i = 0; i < tq; ++i) {
      const T row_max = scores.row(i).maxCoeff();
      Eigen::Array<T, 1, Eigen::Dynamic> e = (scores.row(i).array() - row_max).exp();
      probs.row(i) = (e / e.sum()).matrix();
    }
    cache.ctx.middleCols(h * dh, dh) = probs * vh;
  }
  Mat<T> out = cache.ctx * ap.wo.transpose();
  out.rowwise() += ap.bo.transpose();
  return out;
}

/// Accumulates parameter grads and adds input grads into d_query_in /
/// d_key_in (pass the same matrix twice for self-attention).
template <typename T>
void attention_backward(const AttentionParams<T>& ap, int heads, AttentionParams<T>& grad,
                        const AttnCache<T>& cache, const Mat<T>& d_out, Mat<T>& d_query_in,
                        Mat<T>& d_key_in) {
  const Eigen::Index tq = cache.q.rows();
  const Eigen::Index tk = cache.k.rows();
  const Eigen::Index d = cache.q.cols();
  const Eigen::Index dh = d / heads;
  const T scale = T(1) / std::sqrt(static_cast<T>(dh));

  grad.wo += d_out.transpose() * cache.ctx;
  grad.bo += d_out.colwise().sum().transpose();
  Mat<T> d_ctx = d_out * ap.wo;

  Mat<T> dq(tq, d), dk(tk, d), dv(tk, d);
  for (int h = 0; h < heads; ++h) {
    auto kh = cache.k.middleCols(h * dh, dh);
    auto qh = cache.q.middleCols(h * dh, dh);
    auto vh = cache.v.middleCols(h * dh, dh);
    const Mat<T>& probs = cache.probs[h];
    auto d_ctx_h = d_ctx.middleCols(h * dh, dh);
    Mat<T> d_probs = d_ctx_h * vh.transpose();
    dv.middleCols(h * dh, dh) = probs.transpose() * d_ctx_h;
    // softmax backward: dS = P .* (dP - rowsum(dP .* P))
    Mat<T> d_scores(tq, tk);
    for (Eigen::Index i = 0; i < tq; ++i) {
      const T dot = d_probs.row(i).cwiseProduct(probs.row(i)).sum();
      d_scores.row(i) = (probs.row(i).array() * (d_probs.row(i).array() - dot)).matrix();
    }
    dq.middleCols(h * dh, dh) = d_scores * kh * scale;
    dk.middleCols(h * dh, dh) = d_scores.transpose() * qh * scale;
  }
  grad.wq += dq.transpose() * cache.query_in;
  grad.bq += dq.colwise().sum().transpose();
  grad.wk += dk.transpose() * cache.key_in;
  grad.bk += dk.colwise().sum().transpose();
  grad.wv += dv.transpose() * cache.key_in;
  grad.bv += dv.colwise().sum().transpose();
  d_query_in += dq * ap.wq;
  d_key_in += dk * ap.wk + dv * ap.wv;
}

template <typename T>
struct EncLayerCache {
  LnCache<T> ln_attn;
  AttnCache<T> attn;
  LnCache<T> ln_ffn;
  FfnCache<T> ffn;
};

template <typename T>
struct DecLayerCache {
  LnCache<T> ln_self;
  AttnCache<T> self_attn;
  LnCache<T> ln_cross;
  AttnCache<T> cross_attn;
  LnCache<T> ln_ffn;
  FfnCache<T> ffn;
};

template <typename T>
struct EncoderCache {
  TokenIds ids;
  std::vector<std::uint8_t> mask;
  Mat<T> x0;
  std::vector<EncLayerCache<T>> layers;
  LnCache<T> final_ln;
  Mat<T> out;
};

template <typename T>
struct DecoderCache {
  TokenIds ids;
  std::vector<std::uint8_t> mask;
  Mat<T> x0;
  std::vector<DecLayerCache<T>> layers;
  LnCache<T> final_ln;
  Mat<T> out;     // final layernormed hidden states
  Mat<T> logits;  // [Td, V]
};

template <typename T>
void check_ids(const TokenIds& ids, const ModelConfig& cfg, const char* what) {
  if (ids.size() > static_cast<std::size_t>(cfg.max_positions))
    throw std::invalid_argument(std::string(what) + ": length " + std::to_string(ids.size()) +
                                " exceeds max_positions " + std::to_string(cfg.max_positions));
  for (std::size_t i = 0; i < ids.size(); ++i)
    if (ids[i] >= static_cast<std::uint32_t>(cfg.vocab_size))
      throw std::invalid_argument(std::string(what) + ": id " + std::to_string(ids[i]) +
                                  " at position " + std::to_string(i) + " outside vocab");
}

template <typename T>
Mat<T> embed(const Mat<T>& tok_emb, const Mat<T>& pos_emb, const TokenIds& ids) {
  Mat<T> x(static_cast<Eigen::Index>(ids.size()), tok_emb.cols());
  for (std::size_t t = 0; t < ids.size(); ++t)
    x.row(static_cast<Eigen::Index>(t)) =
        tok_emb.row(ids[t]) + pos_emb.row(static_cast<Eigen::Index>(t));
  return x;
}

template <typename T>
EncoderCache<T> encode_sequence(const ModelParams<T>& p, const TokenIds& ids,
                                const std::vector<std::uint8_t>& mask) {
  check_ids<T>(ids, p.config, "encoder input");
  if (ids.empty()) throw std::invalid_argument("encoder input: empty sequence");
  bool any = false;
  for (std::uint8_t m : mask) any = any || m;
  if (!any) throw std::invalid_argument("encoder input: fully padded row");

  EncoderCache<T> cache;
  cache.ids = ids;
  cache.mask = mask;
  cache.x0 = embed(p.enc_tok_emb, p.enc_pos_emb, ids);
  cache.layers.resize(p.enc_layers.size());
  Mat<T> x = cache.x0;
  for (std::size_t l = 0; l < p.enc_layers.size(); ++l) {
    const auto& layer = p.enc_layers[l];
    auto& lc = cache.layers[l];
    Mat<T> h = layer_norm_forward(x, layer.ln_attn, lc.ln_attn);
    x += attention_forward(layer.attn, p.config.heads, h, h, &mask, false, lc.attn);
    Mat<T> h2 = layer_norm_forward(x, layer.ln_ffn, lc.ln_ffn);
    x += ffn_forward(layer.ffn, h2, lc.ffn);
  }
  cache.out = layer_norm_forward(x, p.enc_final_ln, cache.final_ln);
  return cache;
}

template <typename T>
DecoderCache<T> decode_sequence(const ModelParams<T>& p, const TokenIds& ids,
                                const std::vector<std::uint8_t>& mask, const Mat<T>& enc_out,
                                const std::vector<std::uint8_t>& enc_mask) {
  check_ids<T>(ids, p.config, "decoder input");
  if (ids.empty()) throw std::invalid_argument("decoder input: empty sequence");

  DecoderCache<T> cache;
  cache.ids = ids;
  cache.mask = mask;
  cache.x0 = embed(p.dec_embedding(), p.dec_pos_emb, ids);
  cache.layers.resize(p.dec_layers.size());
  Mat<T> x = cache.x0;
  for (std::size_t l = 0; l < p.dec_layers.size(); ++l) {
    const auto& layer = p.dec_layers[l];
    auto& lc = cache.layers[l];
    Mat<T> h = layer_norm_forward(x, layer.ln_self, lc.ln_self);
    x += attention_forward(layer.self_attn, p.config.heads, h, h, &mask, true, lc.self_attn);
    Mat<T> hc = layer_norm_forward(x, layer.ln_cross, lc.ln_cross);
    x += attention_forward(layer.cross_attn, p.config.heads, hc, enc_out, &enc_mask, false,
                           lc.cross_attn);
    Mat<T> hf = layer_norm_forward(x, layer.ln_ffn, lc.ln_ffn);
    x += ffn_forward(layer.ffn, hf, lc.ffn);
  }
  cache.out = layer_norm_forward(x, p.dec_final_ln, cache.final_ln);
  cache.logits = cache.out * p.head_weight().transpose();
  cache.logits.rowwise() += p.lm_head_b.transpose();
  return cache;
}

/// Reverse pass for one (encoder, decoder) pair given d(logits); adds every
/// contribution into `grads`.
template <typename T>
void backward_sequence(const ModelParams<T>& p, ModelParams<T>& grads,
                       const EncoderCache<T>& ec, const DecoderCache<T>& dc,
                       const Mat<T>& d_logits) {
  const int heads = p.config.heads;

  // LM head
  grads.head_weight() += d_logits.transpose() * dc.out;
  grads.lm_head_b += d_logits.colwise().sum().transpose();
  Mat<T> d_dec_out = d_logits * p.head_weight();

  // decoder final LN
  Mat<T> dx = Mat<T>::Zero(dc.out.rows(), dc.out.cols());
  layer_norm_backward(p.dec_final_ln, grads.dec_final_ln, dc.final_ln, d_dec_out, dx);

  Mat<T> d_enc_out = Mat<T>::Zero(ec.out.rows(), ec.out.cols());
  for (std::size_t l = p.dec_layers.size(); l-- > 0;) {
    const auto& layer = p.dec_layers[l];
    auto& glayer = grads.dec_layers[l];
    const auto& lc = dc.layers[l];

    Mat<T> d_hf = Mat<T>::Zero(dx.rows(), dx.cols());
    ffn_backward(layer.ffn, glayer.ffn, lc.ffn, dx, d_hf);
    layer_norm_backward(layer.ln_ffn, glayer.ln_ffn, lc.ln_ffn, d_hf, dx);

    Mat<T> d_hc = Mat<T>::Zero(dx.rows(), dx.cols());
    attention_backward(layer.cross_attn, heads, glayer.cross_attn, lc.cross_attn, dx, d_hc,
                       d_enc_out);
    layer_norm_backward(layer.ln_cross, glayer.ln_cross, lc.ln_cross, d_hc, dx);

    Mat<T> d_hs = Mat<T>::Zero(dx.rows(), dx.cols());
    attention_backward(layer.self_attn, heads, glayer.self_attn, lc.self_attn, dx, d_hs, d_hs);
    layer_norm_backward(layer.ln_self, glayer.ln_self, lc.ln_self, d_hs, dx);
  }
  for (std::size_t t = 0; t < dc.ids.size(); ++t) {
    grads.dec_embedding().row(dc.ids[t]) += dx.row(static_cast<Eigen::Index>(t));
    grads.dec_pos_emb.row(static_cast<Eigen::Index>(t)) += dx.row(static_cast<Eigen::Index>(t));
  }

  // encoder, fed by the accumulated cross-attention gradient
  Mat<T> dex = Mat<T>::Zero(ec.out.rows(), ec.out.cols());
  layer_norm_backward(p.enc_final_ln, grads.enc_final_ln, ec.final_ln, d_enc_out, dex);
  for (std::size_t l = p.enc_layers.size(); l-- > 0;) {
    const auto& layer = p.enc_layers[l];
    auto& glayer = grads.enc_layers[l];
    const auto& lc = ec.layers[l];

    Mat<T> d_h2 = Mat<T>::Zero(dex.rows(), dex.cols());
    ffn_backward(layer.ffn, glayer.ffn, lc.ffn, dex, d_h2);
    layer_norm_backward(layer.ln_ffn, glayer.ln_ffn, lc.ln_ffn, d_h2, dex);

    Mat<T> d_h1 = Mat<T>::Zero(dex.rows(), dex.cols());
    attention_backward(layer.attn, heads, glayer.attn, lc.attn, dex, d_h1, d_h1);
    layer_norm_backward(layer.ln_attn, glayer.ln_attn, lc.ln_attn, d_h1, dex);
  }
  for (std::size_t t = 0; t < ec.ids.size(); ++t) {
    grads.enc_tok_emb.row(ec.ids[t]) += dex.row(static_cast<Eigen::Index>(t));
    grads.enc_pos_emb.row(static_cast<Eigen::Index>(t)) += dex.row(static_cast<Eigen::Index>(t));
  }
}

}  // namespace detail

/// Full-batch forward pass; one [target_len, vocab] logit matrix per row.
template <typename T>
std::vector<Mat<T>> forward(const ModelParams<T>& p, const Batch& b) {
  std::vector<Mat<T>> logits;
  logits.reserve(b.size());
  for (std::size_t r = 0; r < b.size(); ++r) {
    auto ec = detail::encode_sequence(p, b.encoder_ids[r], b.encoder_mask[r]);
    auto dc = detail::decode_sequence(p, b.decoder_input_ids[r], b.decoder_mask[r], ec.out,
                                      b.encoder_mask[r]);
    logits.push_back(std::move(dc.logits));
  }
  return logits;
}

template <typename T>
struct LossAndGrads {
  double loss = 0;
  ModelParams<T> grads;
};

/// Mean token cross-entropy over unmasked target positions plus exact
/// analytic gradients for every parameter.
template <typename T>
LossAndGrads<T> loss_and_grads(const ModelParams<T>& p, const Batch& b) {
  const std::size_t active = b.active_positions();
  if (active == 0) throw std::invalid_argument("loss_and_grads: batch has no active positions");
  LossAndGrads<T> result;
  result.grads = zeros_like(p);
  double loss_sum = 0;
  for (std::size_t r = 0; r < b.size(); ++r) {
    auto ec = detail::encode_sequence(p, b.encoder_ids[r], b.encoder_mask[r]);
    auto dc = detail::decode_sequence(p, b.decoder_input_ids[r], b.decoder_mask[r], ec.out,
                                      b.encoder_mask[r]);
    Mat<T> d_logits = Mat<T>::Zero(dc.logits.rows(), dc.logits.cols());
    for (std::size_t t = 0; t < b.target_ids[r].size(); ++t) {
      if (!b.loss_mask[r][t]) continue;
      const auto row = static_cast<Eigen::Index>(t);
      const T row_max = dc.logits.row(row).maxCoeff();
      Eigen::Array<T, 1, Eigen::Dynamic> e = (dc.logits.row(row).array() - row_max).exp();
      const T denom = e.sum();
      const std::uint32_t gold = b.target_ids[r][t];
      loss_sum += static_cast<double>(row_max + std::log(denom) - dc.logits(row, gold));
      d_logits.row(row) = (e / denom).matrix() / static_cast<T>(active);
      d_logits(row, gold) -= T(1) / static_cast<T>(active);
    }
    detail::backward_sequence(p, result.grads, ec, dc, d_logits);
  }
  result.loss = loss_sum / static_cast<double>(active);
  return result;
}

struct ScoredCandidate {
  std::size_t candidate_index = 0;
  double total_loss = 0;
  std::vector<double> token_losses;
};

/// Teacher-forced cross-entropy of `target_ids` given `encoder_ids`, summed
/// over the positions selected by `score_mask`. Read-only; no sampling.
template <typename T>
ScoredCandidate score(const ModelParams<T>& p, const TokenIds& encoder_ids,
                      const TokenIds& target_ids, const std::vector<std::uint8_t>& score_mask,
                      const SpecialTokens& sp) {
  if (target_ids.empty()) throw std::invalid_argument("score: empty target");
  if (score_mask.size() != target_ids.size())
    throw std::invalid_argument("score: mask/target length mismatch");
  std::vector<std::uint8_t> enc_mask(encoder_ids.size(), 1);
  auto ec = detail::encode_sequence(p, encoder_ids, enc_mask);
  TokenIds dec_in;
  dec_in.reserve(target_ids.size());
  dec_in.push_back(sp.bos);
  dec_in.insert(dec_in.end(), target_ids.begin(), target_ids.end() - 1);
  std::vector<std::uint8_t> dec_mask(dec_in.size(), 1);
  auto dc = detail::decode_sequence(p, dec_in, dec_mask, ec.out, enc_mask);

  ScoredCandidate out;
  out.token_losses.resize(target_ids.size());
  for (std::size_t t = 0; t < target_ids.size(); ++t) {
    const auto row = static_cast<Eigen::Index>(t);
    const T row_max = dc.logits.row(row).maxCoeff();
    const T lse = row_max + std::log((dc.logits.row(row).array() - row_max).exp().sum());
    out.token_losses[t] = static_cast<double>(lse - dc.logits(row, target_ids[t]));
    if (score_mask[t]) out.total_loss += out.token_losses[t];
  }
  return out;
}

/// Greedy argmax decoding from BOS until EOS or `max_new` tokens, ties broken
/// by the lowest token id. With fid=true each encoder input is encoded
/// independently and the decoder cross-attends to the concatenation of all
/// encoder outputs; fid=false requires exactly one input.
template <typename T>
TokenIds generate_greedy(const ModelParams<T>& p, const std::vector<TokenIds>& encoder_inputs,
                         std::size_t max_new, bool fid, const SpecialTokens& sp) {
  if (encoder_inputs.empty())
    throw std::invalid_argument("generate: empty encoder input list");
  if (!fid && encoder_inputs.size() != 1)
    throw std::invalid_argument("generate: multiple encoder inputs require fid mode");

  Eigen::Index total_rows = 0;
  std::vector<detail::EncoderCache<T>> caches;
  caches.reserve(encoder_inputs.size());
  for (const TokenIds& ids : encoder_inputs) {
    if (ids.empty()) throw std::invalid_argument("generate: empty encoder input");
    std::vector<std::uint8_t> mask(ids.size(), 1);
    caches.push_back(detail::encode_sequence(p, ids, mask));
    total_rows += caches.back().out.rows();
  }
  Mat<T> enc_out(total_rows, p.config.d_model);
  Eigen::Index at = 0;
  for (const auto& c : caches) {
    enc_out.middleRows(at, c.out.rows()) = c.out;
    at += c.out.rows();
  }
  std::vector<std::uint8_t> enc_mask(static_cast<std::size_t>(total_rows), 1);

  TokenIds generated;
  for (std::size_t step = 0; step < max_new; ++step) {
    TokenIds dec_in;
    dec_in.reserve(generated.size() + 1);
    dec_in.push_back(sp.bos);
    dec_in.insert(dec_in.end(), generated.begin(), generated.end());
    if (dec_in.size() > static_cast<std::size_t>(p.config.max_positions)) break;
    std::vector<std::uint8_t> dec_mask(dec_in.size(), 1);
    auto dc = detail::decode_sequence(p, dec_in, dec_mask, enc_out, enc_mask);
    const auto last = static_cast<Eigen::Index>(dec_in.size()) - 1;
    std::uint32_t best = 0;
    T best_val = dc.logits(last, 0);
    for (Eigen::Index v = 1; v < dc.logits.cols(); ++v) {
      if (dc.logits(last, v) > best_val) {
        best_val = dc.logits(last, v);
        best = static_cast<std::uint32_t>(v);
      }
    }
    if (best == sp.eos) break;
    generated.push_back(best);
  }
  return generated;
}

// --- checkpoints -------------------------------------------------------------

template <typename T>
void save_model(const ModelParams<T>& p, const std::filesystem::path& path) {
  TensorFile file;
  const ModelConfig& c = p.config;
  file.header = {{"enc_layers", std::to_string(c.enc_layers)},
                 {"dec_layers", std::to_string(c.dec_layers)},
                 {"heads", std::to_string(c.heads)},
                 {"d_model", std::to_string(c.d_model)},
                 {"d_ff", std::to_string(c.ff_dim())},
                 {"max_positions", std::to_string(c.max_positions)},
                 {"vocab_size", std::to_string(c.vocab_size)},
                 {"tie_embeddings", c.tie_embeddings ? "1" : "0"}};
  for (const auto& e : enumerate_params(p)) {
    NamedTensor t;
    t.name = e.name;
    t.shape = e.cols == 1 ? std::vector<std::size_t>{e.rows}
                          : std::vector<std::size_t>{e.rows, e.cols};
    t.data.resize(e.size());
    for (std::size_t i = 0; i < e.size(); ++i) t.data[i] = static_cast<float>(e.data[i]);
    file.tensors.push_back(std::move(t));
  }
  write_tensor_file(path, file);
}

inline ModelConfig config_from_header(
    const std::vector<std::pair<std::string, std::string>>& header) {
  ModelConfig c;
  for (const auto& [k, v] : header) {
    if (k == "enc_layers") c.enc_layers = std::stoi(v);
    else if (k == "dec_layers") c.dec_layers = std::stoi(v);
    else if (k == "heads") c.heads = std::stoi(v);
    else if (k == "d_model") c.d_model = std::stoi(v);
    else if (k == "d_ff") c.d_ff = std::stoi(v);
    else if (k == "max_positions") c.max_positions = std::stoi(v);
    else if (k == "vocab_size") c.vocab_size = std::stoi(v);
    else if (k == "tie_embeddings") c.tie_embeddings = (v == "1");
    else throw FileError("checkpoint: unknown header key " + k);
  }
  return c;
}

template <typename T = float>
ModelParams<T> load_model(const std::filesystem::path& path) {
  TensorFile file = read_tensor_file(path);
  ModelParams<T> p = allocate_params<T>(config_from_header(file.header));
  std::map<std::string, const NamedTensor*> by_name;
  for (const NamedTensor& t : file.tensors) by_name[t.name] = &t;
  for (auto& e : enumerate_params(p)) {
    auto it = by_name.find(e.name);
    if (it == by_name.end()) throw FileError("checkpoint: missing tensor " + e.name);
    const NamedTensor& t = *it->second;
    if (t.data.size() != e.size())
      throw FileError("checkpoint: size mismatch for tensor " + e.name);
    for (std::size_t i = 0; i < e.size(); ++i) e.data[i] = static_cast<T>(t.data[i]);
  }
  return p;
}

}  // namespace seq2seq
