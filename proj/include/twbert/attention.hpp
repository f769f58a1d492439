#pragma once

#include <cmath>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "twbert/core/ops.hpp"
#include "twbert/core/parameters.hpp"
#include "twbert/tokens.hpp"

namespace twbert {

/// Admissible keys per query, compressed-row form.
struct AttentionPattern {
  std::vector<std::size_t> offsets{0};
  std::vector<std::size_t> keys;

  static AttentionPattern full(std::size_t queries, std::size_t key_count) {
    AttentionPattern p;
    for (std::size_t i = 0; i < queries; ++i) {
      for (std::size_t j = 0; j < key_count; ++j) p.keys.push_back(j);
      p.offsets.push_back(p.keys.size());
    }
    return p;
  }

  /// Every query sees the same key subset.
  static AttentionPattern shared(std::size_t queries, const std::vector<std::size_t>& key_rows) {
    AttentionPattern p;
    for (std::size_t i = 0; i < queries; ++i) {
      p.keys.insert(p.keys.end(), key_rows.begin(), key_rows.end());
      p.offsets.push_back(p.keys.size());
    }
    return p;
  }

  void add_query(const std::vector<std::size_t>& key_rows) {
    keys.insert(keys.end(), key_rows.begin(), key_rows.end());
    offsets.push_back(keys.size());
  }

  std::size_t queries() const { return offsets.size() - 1; }
  std::size_t begin(std::size_t q) const { return offsets[q]; }
  std::size_t end(std::size_t q) const { return offsets[q + 1]; }
  std::size_t nnz() const { return keys.size(); }
};

/// Parameters of one multi-head attention with post-residual layer norm.
/// The per-head projections W_i are the column blocks [i*d_h, (i+1)*d_h) of
/// the fused d x d matrices.
template <Scalar Real>
struct MhaParams {
  std::size_t heads = 1;
  std::size_t width = 0;
  Tensor<Real> wq, wk, wv, wh, ln_gain, ln_bias;

  std::size_t head_width() const { return width / heads; }

  static MhaParams create(ParameterStore<Real>& store, const std::string& prefix, std::size_t d, std::size_t h,
                          Rng& rng) {
    if (h == 0 || d % h != 0) {
      throw DimensionError("MhaParams: width " + std::to_string(d) + " is not divisible by " + std::to_string(h) +
                           " heads");
    }
    MhaParams p;
    p.heads = h;
    p.width = d;
    p.wq = store.weight(prefix + ".Wq", d, d, rng);
    p.wk = store.weight(prefix + ".Wk", d, d, rng);
    p.wv = store.weight(prefix + ".Wv", d, d, rng);
    p.wh = store.weight(prefix + ".Wh", d, d, rng);
    p.ln_gain = store.constant(prefix + ".ln_gain", {d}, Real(1));
    p.ln_bias = store.constant(prefix + ".ln_bias", {d}, Real(0));
    return p;
  }
};

/// Per-head attention matrices produced by one attention call.
template <Scalar Real>
struct AttentionRecord {
  std::string label;  // w2p, p2w, t2w_step1, t2w_step2, or an encoder label
  int layer = -1;
  int frame = -1;  // t2w_step1 only
  Tensor<Real> weights;  // heads x queries x keys
  std::vector<TokenCoord> query_index_map;
  std::vector<TokenCoord> key_index_map;

  std::size_t heads() const { return weights.shape()[0]; }
  std::size_t queries() const { return weights.shape()[1]; }
  std::size_t keys() const { return weights.shape()[2]; }
  Real at(std::size_t h, std::size_t q, std::size_t k) const {
    return weights[(h * queries() + q) * keys() + k];
  }
};

template <Scalar Real>
struct MhaResult {
  Tensor<Real> z;
  // heads x nnz softmax weights aligned with `pattern`
  std::shared_ptr<const std::vector<Real>> weights;
  AttentionPattern pattern;
  std::size_t heads = 0;
  std::size_t key_count = 0;

  /// Dense heads x queries x keys view of the weights.
  Tensor<Real> dense_weights() const {
    const std::size_t nq = pattern.queries(), nnz = pattern.nnz();
    std::vector<Real> dense(heads * nq * key_count, Real(0));
    for (std::size_t h = 0; h < heads; ++h)
      for (std::size_t i = 0; i < nq; ++i)
        for (std::size_t s = pattern.begin(i); s < pattern.end(i); ++s)
          dense[(h * nq + i) * key_count + pattern.keys[s]] = (*weights)[h * nnz + s];
    return Tensor<Real>::from({heads, nq, key_count}, std::move(dense));
  }
};

namespace detail {

/// softmax(Q_i K_i^T / sqrt(d_h)) V_i per head over the admissible keys,
/// with head outputs concatenated along the width.
template <Scalar Real>
std::pair<Tensor<Real>, std::shared_ptr<std::vector<Real>>> attention_core(const Tensor<Real>& qp,
                                                                           const Tensor<Real>& kp,
                                                                           const Tensor<Real>& vp, std::size_t heads,
                                                                           const AttentionPattern& pattern) {
  const std::size_t nq = qp.rows(), d = qp.cols(), dh = d / heads, nnz = pattern.nnz();
  const Real scale = Real(1) / std::sqrt(static_cast<Real>(dh));
  auto weights = std::make_shared<std::vector<Real>>(heads * nnz);
  std::vector<Real> out(nq * d, Real(0));
  const Real* q = qp.values().data();
  const Real* k = kp.values().data();
  const Real* v = vp.values().data();
  for (std::size_t h = 0; h < heads; ++h) {
    const std::size_t off = h * dh;
    Real* w = weights->data() + h * nnz;
    for (std::size_t i = 0; i < nq; ++i) {
      const std::size_t b = pattern.begin(i), e = pattern.end(i);
      Real mx = -std::numeric_limits<Real>::infinity();
      for (std::size_t s = b; s < e; ++s) {
        const Real* kj = k + pattern.keys[s] * d + off;
        const Real* qi = q + i * d + off;
        Real dot = 0;
        for (std::size_t c = 0; c < dh; ++c) dot += qi[c] * kj[c];
        w[s] = dot * scale;
        mx = std::max(mx, w[s]);
      }
      Real z = 0;
      for (std::size_t s = b; s < e; ++s) z += (w[s] = std::exp(w[s] - mx));
      Real* oi = out.data() + i * d + off;
      for (std::size_t s = b; s < e; ++s) {
        w[s] /= z;
        const Real* vj = v + pattern.keys[s] * d + off;
        for (std::size_t c = 0; c < dh; ++c) oi[c] += w[s] * vj[c];
      }
    }
  }
  auto pq = qp.node(), pk = kp.node(), pv = vp.node();
  Tensor<Real> result = make_result<Real>(
      {nq, d}, std::move(out), {pq, pk, pv}, [pq, pk, pv, weights, pattern, heads, nq, d, dh, scale](Node<Real>& self) {
        Real* gq = grad_of(pq);
        Real* gk = grad_of(pk);
        Real* gv = grad_of(pv);
        const std::size_t nnz = pattern.nnz();
        std::vector<Real> dw;
        for (std::size_t h = 0; h < heads; ++h) {
          const std::size_t off = h * dh;
          const Real* w = weights->data() + h * nnz;
          for (std::size_t i = 0; i < nq; ++i) {
            const std::size_t b = pattern.begin(i), e = pattern.end(i);
            const Real* go = self.grad.data() + i * d + off;
            dw.assign(e - b, Real(0));
            Real acc = 0;
            for (std::size_t s = b; s < e; ++s) {
              const std::size_t j = pattern.keys[s];
              const Real* vj = pv->value.data() + j * d + off;
              Real dot = 0;
              for (std::size_t c = 0; c < dh; ++c) dot += go[c] * vj[c];
              dw[s - b] = dot;
              acc += w[s] * dot;
              if (gv) {
                Real* gvj = gv + j * d + off;
                for (std::size_t c = 0; c < dh; ++c) gvj[c] += w[s] * go[c];
              }
            }
            for (std::size_t s = b; s < e; ++s) {
              const std::size_t j = pattern.keys[s];
              const Real dl = w[s] * (dw[s - b] - acc) * scale;
              if (gq) {
                const Real* kj = pk->value.data() + j * d + off;
                Real* gqi = gq + i * d + off;
                for (std::size_t c = 0; c < dh; ++c) gqi[c] += dl * kj[c];
              }
              if (gk) {
                const Real* qi = pq->value.data() + i * d + off;
                Real* gkj = gk + j * d + off;
                for (std::size_t c = 0; c < dh; ++c) gkj[c] += dl * qi[c];
              }
            }
          }
        }
      });
  return {result, weights};
}

}  // namespace detail

/// Multi-head attention:
///   A_i = softmax(Q W_i^Q (K W_i^K)^T / sqrt(d_h)),  H_i = A_i V W_i^V,
///   H = [H_1 .. H_h] W^H,  z = LN(H + Q).
/// The scale uses the per-head width d_h. `pattern` restricts which keys
/// each query may attend; by default every key is admissible.
template <Scalar Real>
MhaResult<Real> mha(const Tensor<Real>& q, const Tensor<Real>& k, const Tensor<Real>& v, const MhaParams<Real>& p,
                    const AttentionPattern* pattern = nullptr, Real ln_eps = Real(1e-6)) {
  const std::size_t d = p.width;
  if (q.cols() != d || k.cols() != d || v.cols() != d) {
    throw DimensionError("mha: widths q=" + shape_string(q.shape()) + " k=" + shape_string(k.shape()) +
                         " v=" + shape_string(v.shape()) + " expected " + std::to_string(d));
  }
  if (k.rows() != v.rows()) {
    throw DimensionError("mha: key/value row counts differ: " + shape_string(k.shape()) + " vs " +
                         shape_string(v.shape()));
  }
  MhaResult<Real> r;
  r.heads = p.heads;
  r.key_count = k.rows();
  r.pattern = pattern ? *pattern : AttentionPattern::full(q.rows(), k.rows());
  if (r.pattern.queries() != q.rows()) throw DimensionError("mha: pattern query count mismatch");
  for (std::size_t i = 0; i < q.rows(); ++i) {
    if (r.pattern.begin(i) == r.pattern.end(i)) throw ContractError("mha: query without admissible keys");
  }
  for (std::size_t key : r.pattern.keys) {
    if (key >= k.rows()) throw DimensionError("mha: pattern key out of range");
  }
  Tensor<Real> qp = matmul(q, p.wq), kp = matmul(k, p.wk), vp = matmul(v, p.wv);
  auto [heads_out, weights] = detail::attention_core(qp, kp, vp, p.heads, r.pattern);
  r.weights = weights;
  r.z = layer_norm(add(matmul(heads_out, p.wh), q), p.ln_gain, p.ln_bias, ln_eps);
  return r;
}

/// Position-wise MLP with residual and post-norm:
///   out = LN(x + W2 gelu(W1 x + b1) + b2).
template <Scalar Real>
struct FeedForward {
  Tensor<Real> w1, b1, w2, b2, ln_gain, ln_bias;

  static FeedForward create(ParameterStore<Real>& store, const std::string& prefix, std::size_t d,
                            std::size_t hidden, Rng& rng) {
    FeedForward f;
    f.w1 = store.weight(prefix + ".W1", d, hidden, rng);
    f.b1 = store.constant(prefix + ".b1", {hidden}, Real(0));
    f.w2 = store.weight(prefix + ".W2", hidden, d, rng);
    f.b2 = store.constant(prefix + ".b2", {d}, Real(0));
    f.ln_gain = store.constant(prefix + ".ln_gain", {d}, Real(1));
    f.ln_bias = store.constant(prefix + ".ln_bias", {d}, Real(0));
    return f;
  }

  Tensor<Real> operator()(const Tensor<Real>& x, Real ln_eps = Real(1e-6)) const {
    Tensor<Real> h = gelu(add_bias(matmul(x, w1), b1));
    return layer_norm(add(x, add_bias(matmul(h, w2), b2)), ln_gain, ln_bias, ln_eps);
  }
};

/// Attention followed by the feed-forward block.
template <Scalar Real>
struct AttentionBlock {
  MhaParams<Real> attn;
  FeedForward<Real> ffn;

  static AttentionBlock create(ParameterStore<Real>& store, const std::string& prefix, std::size_t d,
                               std::size_t h, std::size_t hidden, Rng& rng) {
    AttentionBlock b;
    b.attn = MhaParams<Real>::create(store, prefix + ".attn", d, h, rng);
    b.ffn = FeedForward<Real>::create(store, prefix + ".ffn", d, hidden, rng);
    return b;
  }
};

template <Scalar Real>
struct StreamResult {
  TokenSequence<Real> out;
  std::vector<AttentionRecord<Real>> records;
};

/// Word-to-patch attention: video tokens (including v_cls) query the valid
/// text tokens, followed by the block's feed-forward.
template <Scalar Real>
StreamResult<Real> w2p(const TokenSequence<Real>& video, const TokenSequence<Real>& text,
                       const AttentionBlock<Real>& block, bool record = false) {
  const auto keys = text.valid_rows();
  if (keys.empty()) throw ContractError("w2p: text has no valid tokens");
  const auto pattern = AttentionPattern::shared(video.size(), keys);
  auto r = mha(video.tokens, text.tokens, text.tokens, block.attn, &pattern);
  StreamResult<Real> res{video.with_tokens(block.ffn(r.z)), {}};
  if (record) {
    res.records.push_back({"w2p", -1, -1, r.dense_weights(), video.coords, text.coords});
  }
  return res;
}

/// Patch-to-word attention (the Base baseline): every text token queries all
/// video patches of all frames, [CLS] excluded, followed by a feed-forward.
template <Scalar Real>
StreamResult<Real> p2w(const TokenSequence<Real>& text, const TokenSequence<Real>& video, const MhaParams<Real>& attn,
                       const FeedForward<Real>& ffn, bool record = false) {
  if (video.size() < 2) throw ContractError("p2w: video has no patches");
  Tensor<Real> patches = slice_rows(video.tokens, 1, video.size());
  auto r = mha(text.tokens, patches, patches, attn);
  StreamResult<Real> res{text.with_tokens(ffn(r.z)), {}};
  if (record) {
    std::vector<TokenCoord> keys(video.coords.begin() + 1, video.coords.end());
    res.records.push_back({"p2w", -1, -1, r.dense_weights(), text.coords, keys});
  }
  return res;
}

/// Per-word trajectory: row t * words + n holds y_t for word n.
template <Scalar Real>
struct Trajectory {
  Tensor<Real> tokens;
  std::size_t frames = 0;
  std::size_t words = 0;

  /// y_1..y_T of one word as a T x d matrix.
  Tensor<Real> of_word(std::size_t n) const {
    std::vector<std::size_t> rows;
    for (std::size_t t = 0; t < frames; ++t) rows.push_back(t * words + n);
    return gather_rows(tokens, rows);
  }
};

template <Scalar Real>
struct TrajectoryResult {
  Trajectory<Real> trajectory;
  std::vector<AttentionRecord<Real>> records;  // one per frame
};

/// First T2W step: y_t = MHA(Q = x, K = V = V_t) for every word x and every
/// frame t, with one parameter set shared across frames and words.
///
/// `patches` holds all frames' patch embeddings frame-major (frames * P rows).
/// Queries are tiled per frame so the key/value projections are computed once.
template <Scalar Real>
TrajectoryResult<Real> t2w_trajectory(const Tensor<Real>& words, const Tensor<Real>& patches, std::size_t frames,
                                      const MhaParams<Real>& step1, bool record = false) {
  if (frames == 0) throw ContractError("t2w_trajectory: no frames");
  if (patches.rows() % frames != 0) {
    throw DimensionError("t2w_trajectory: " + std::to_string(patches.rows()) + " patch rows do not split into " +
                         std::to_string(frames) + " frames");
  }
  const std::size_t n = words.rows(), per_frame = patches.rows() / frames;
  std::vector<std::size_t> tile;
  AttentionPattern pattern;
  std::vector<std::size_t> frame_keys(per_frame);
  for (std::size_t t = 0; t < frames; ++t) {
    for (std::size_t p = 0; p < per_frame; ++p) frame_keys[p] = t * per_frame + p;
    for (std::size_t i = 0; i < n; ++i) {
      tile.push_back(i);
      pattern.add_query(frame_keys);
    }
  }
  Tensor<Real> queries = gather_rows(words, tile);
  auto r = mha(queries, patches, patches, step1, &pattern);
  TrajectoryResult<Real> res{{r.z, frames, n}, {}};
  if (record) {
    const std::size_t h = step1.heads, nnz = pattern.nnz();
    for (std::size_t t = 0; t < frames; ++t) {
      std::vector<Real> w(h * n * per_frame);
      for (std::size_t hh = 0; hh < h; ++hh)
        for (std::size_t i = 0; i < n; ++i) {
          const std::size_t q = t * n + i;
          for (std::size_t s = pattern.begin(q); s < pattern.end(q); ++s)
            w[(hh * n + i) * per_frame + (s - pattern.begin(q))] = (*r.weights)[hh * nnz + s];
        }
      AttentionRecord<Real> rec;
      rec.label = "t2w_step1";
      rec.frame = static_cast<int>(t);
      rec.weights = Tensor<Real>::from({h, n, per_frame}, std::move(w));
      res.records.push_back(std::move(rec));
    }
  }
  return res;
}

/// Overload over explicit per-frame patch sets (each P x d).
template <Scalar Real>
TrajectoryResult<Real> t2w_trajectory(const Tensor<Real>& words, const std::vector<Tensor<Real>>& frames,
                                      const MhaParams<Real>& step1, bool record = false) {
  if (frames.empty()) throw ContractError("t2w_trajectory: no frames");
  for (const auto& f : frames) {
    if (f.rows() != frames.front().rows()) throw DimensionError("t2w_trajectory: frames differ in patch count");
  }
  return t2w_trajectory(words, concat_rows(frames), frames.size(), step1, record);
}

template <Scalar Real>
struct T2wResult {
  Tensor<Real> z;
  Trajectory<Real> trajectory;
  std::vector<AttentionRecord<Real>> records;  // T step-1 records, then step 2
};

/// Trajectory-to-word attention: builds each word's trajectory, then
/// z = MHA(Q = x, K = V = Y) where every word attends only its own T
/// trajectory tokens.
template <Scalar Real>
T2wResult<Real> t2w(const Tensor<Real>& words, const Tensor<Real>& patches, std::size_t frames,
                    const MhaParams<Real>& step1, const MhaParams<Real>& step2, bool record = false) {
  auto traj = t2w_trajectory(words, patches, frames, step1, record);
  const std::size_t n = words.rows();
  AttentionPattern pattern;
  std::vector<std::size_t> own(frames);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t t = 0; t < frames; ++t) own[t] = t * n + i;
    pattern.add_query(own);
  }
  const Tensor<Real>& y = traj.trajectory.tokens;
  auto r = mha(words, y, y, step2, &pattern);
  T2wResult<Real> res{r.z, traj.trajectory, std::move(traj.records)};
  if (record) {
    const std::size_t h = step2.heads, nnz = pattern.nnz();
    std::vector<Real> w(h * n * frames);
    for (std::size_t hh = 0; hh < h; ++hh)
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t t = 0; t < frames; ++t) w[(hh * n + i) * frames + t] = (*r.weights)[hh * nnz + i * frames + t];
    AttentionRecord<Real> rec;
    rec.label = "t2w_step2";
    rec.weights = Tensor<Real>::from({h, n, frames}, std::move(w));
    res.records.push_back(std::move(rec));
  }
  return res;
}

template <Scalar Real>
T2wResult<Real> t2w(const Tensor<Real>& words, const std::vector<Tensor<Real>>& frames, const MhaParams<Real>& step1,
                    const MhaParams<Real>& step2, bool record = false) {
  if (frames.empty()) throw ContractError("t2w: no frames");
  return t2w(words, concat_rows(frames), frames.size(), step1, step2, record);
}

enum class Variant { Base, T2W };

inline std::string to_string(Variant v) { return v == Variant::Base ? "base" : "t2w"; }

/// One asymmetric cross-modal layer: a W2P block updates the video stream and
/// a P2W (Base) or T2W block updates the text stream.
template <Scalar Real>
struct CrossModalLayerParams {
  AttentionBlock<Real> w2p;
  std::optional<MhaParams<Real>> p2w;
  std::optional<MhaParams<Real>> t2w_step1;
  std::optional<MhaParams<Real>> t2w_step2;
  FeedForward<Real> text_ffn;

  static CrossModalLayerParams create(ParameterStore<Real>& store, const std::string& prefix, Variant variant,
                                      std::size_t d, std::size_t h, std::size_t hidden, Rng& rng) {
    CrossModalLayerParams p;
    p.w2p = AttentionBlock<Real>::create(store, prefix + ".w2p", d, h, hidden, rng);
    if (variant == Variant::Base) {
      p.p2w = MhaParams<Real>::create(store, prefix + ".p2w", d, h, rng);
    } else {
      p.t2w_step1 = MhaParams<Real>::create(store, prefix + ".t2w.step1", d, h, rng);
      p.t2w_step2 = MhaParams<Real>::create(store, prefix + ".t2w.step2", d, h, rng);
    }
    p.text_ffn = FeedForward<Real>::create(store, prefix + ".text_ffn", d, hidden, rng);
    return p;
  }

  Variant variant() const { return p2w ? Variant::Base : Variant::T2W; }
};

template <Scalar Real>
struct CrossModalResult {
  TokenSequence<Real> video;
  TokenSequence<Real> text;
  std::vector<AttentionRecord<Real>> records;
};

/// Both streams read the layer inputs; the updates are parallel.
template <Scalar Real>
CrossModalResult<Real> cross_modal_layer(const TokenSequence<Real>& video, const TokenSequence<Real>& text,
                                         const CrossModalLayerParams<Real>& p, bool record = false) {
  if (video.modality != Modality::Video || text.modality != Modality::Text) {
    throw ContractError("cross_modal_layer: expected (video, text) sequences");
  }
  auto v = w2p(video, text, p.w2p, record);
  CrossModalResult<Real> res{std::move(v.out), text, std::move(v.records)};
  if (p.variant() == Variant::Base) {
    auto t = p2w(text, video, *p.p2w, p.text_ffn, record);
    res.text = std::move(t.out);
    for (auto& r : t.records) res.records.push_back(std::move(r));
  } else {
    if (video.frames == 0 || video.patches == 0) throw ContractError("cross_modal_layer: video has no frames");
    Tensor<Real> patches = slice_rows(video.tokens, 1, video.size());
    auto t = t2w(text.tokens, patches, video.frames, *p.t2w_step1, *p.t2w_step2, record);
    res.text = text.with_tokens(p.text_ffn(t.z));
    for (auto& r : t.records) {
      r.query_index_map = text.coords;
      if (r.label == "t2w_step1") {
        const std::size_t first = 1 + static_cast<std::size_t>(r.frame) * video.patches;
        r.key_index_map.assign(video.coords.begin() + first, video.coords.begin() + first + video.patches);
      } else {
        for (std::size_t t = 0; t < video.frames; ++t) {
          r.key_index_map.push_back({TokenKind::Trajectory, static_cast<int>(t), -1, -1});
        }
      }
      res.records.push_back(std::move(r));
    }
  }
  return res;
}

/// Stack of cross-modal layers applied in sequence.
template <Scalar Real>
CrossModalResult<Real> cross_modal_encoder(const TokenSequence<Real>& video, const TokenSequence<Real>& text,
                                           const std::vector<CrossModalLayerParams<Real>>& layers,
                                           bool record = false) {
  if (layers.empty()) throw ContractError("cross_modal_encoder: needs at least one layer");
  CrossModalResult<Real> state{video, text, {}};
  for (std::size_t l = 0; l < layers.size(); ++l) {
    auto next = cross_modal_layer(state.video, state.text, layers[l], record);
    state.video = std::move(next.video);
    state.text = std::move(next.text);
    for (auto& r : next.records) {
      r.layer = static_cast<int>(l);
      state.records.push_back(std::move(r));
    }
  }
  return state;
}

}  // namespace twbert
