#pragma once

#include <algorithm>
#include <deque>
#include <string>
#include <vector>

#include "twbert/encoders.hpp"

namespace twbert {

enum class SimilarityKind { Coarse, FineV2T, FineT2V };

/// Query-by-candidate score table. Row i's positive is column positives[i];
/// `allowed` (rows x cols, optional) removes candidates from a row's softmax.
template <Scalar Real>
struct SimilarityMatrix {
  Tensor<Real> scores;
  SimilarityKind kind = SimilarityKind::Coarse;
  Real tau = Real(0.05);
  std::vector<std::size_t> positives;
  std::vector<char> allowed;

  std::size_t queries() const { return scores.shape()[0]; }
  std::size_t candidates() const { return scores.shape()[1]; }
};

/// s_ij = <video_i, text_j> between [CLS] embeddings.
template <Scalar Real>
SimilarityMatrix<Real> coarse_sim(const Tensor<Real>& video_cls, const Tensor<Real>& text_cls, Real tau = Real(0.05)) {
  if (video_cls.cols() != text_cls.cols()) {
    throw DimensionError("coarse_sim: widths " + shape_string(video_cls.shape()) + " vs " +
                         shape_string(text_cls.shape()));
  }
  SimilarityMatrix<Real> s;
  s.scores = matmul_nt(video_cls, text_cls);
  s.kind = SimilarityKind::Coarse;
  s.tau = tau;
  for (std::size_t i = 0; i < s.queries(); ++i) s.positives.push_back(i);
  return s;
}

/// Token-wise maximum similarity between every query token set and every
/// candidate token set:
///   S[i][j] = c_i * sum_n max_m <q_{i,n}, c_{j,m}>,
/// with c_i = 1 / |Q_i| when `normalize` and 1 otherwise. The gradient flows
/// through the maximizing pair of each query token.
template <Scalar Real>
Tensor<Real> maxsim_matrix(const std::vector<Tensor<Real>>& queries, const std::vector<Tensor<Real>>& candidates,
                           bool normalize = true) {
  if (queries.empty() || candidates.empty()) throw ContractError("maxsim_matrix: empty token set list");
  const std::size_t dc = queries.front().cols();
  for (const auto* list : {&queries, &candidates}) {
    for (const auto& t : *list) {
      if (t.rank() != 2 || t.cols() != dc) {
        throw DimensionError("maxsim_matrix: token set " + shape_string(t.shape()) + " does not have width " +
                             std::to_string(dc));
      }
    }
  }
  const std::size_t b = queries.size(), m = candidates.size();
  std::vector<Real> out(b * m);
  std::vector<std::size_t> offsets{0};
  std::vector<std::size_t> argmax;
  std::vector<Real> norms(b), maxima;
  for (std::size_t i = 0; i < b; ++i) {
    const std::size_t nq = queries[i].rows();
    norms[i] = normalize ? Real(1) / static_cast<Real>(nq) : Real(1);
    const Real* q = queries[i].values().data();
    for (std::size_t j = 0; j < m; ++j) {
      const std::size_t nc = candidates[j].rows();
      const Real* c = candidates[j].values().data();
      maxima.clear();
      for (std::size_t n = 0; n < nq; ++n) {
        Real best = -std::numeric_limits<Real>::infinity();
        std::size_t best_m = 0;
        for (std::size_t k = 0; k < nc; ++k) {
          Real dot = 0;
          for (std::size_t x = 0; x < dc; ++x) dot += q[n * dc + x] * c[k * dc + x];
          if (dot > best) {
            best = dot;
            best_m = k;
          }
        }
        maxima.push_back(best);
        argmax.push_back(best_m);
      }
      // Summed in sorted order so the value is independent of token order.
      std::sort(maxima.begin(), maxima.end());
      Real total = 0;
      for (Real v : maxima) total += v;
      out[i * m + j] = total * norms[i];
      offsets.push_back(argmax.size());
    }
  }
  std::vector<std::shared_ptr<Node<Real>>> parents;
  for (const auto& q : queries) parents.push_back(q.node());
  for (const auto& c : candidates) parents.push_back(c.node());
  return detail::make_result<Real>(
      {b, m}, std::move(out), parents,
      [parents, b, m, dc, norms = std::move(norms), offsets = std::move(offsets),
       argmax = std::move(argmax)](Node<Real>& self) {
        for (std::size_t i = 0; i < b; ++i) {
          const auto& qn = parents[i];
          Real* gq = detail::grad_of(qn);
          for (std::size_t j = 0; j < m; ++j) {
            const auto& cn = parents[b + j];
            Real* gc = detail::grad_of(cn);
            if (!gq && !gc) continue;
            const Real g = self.grad[i * m + j] * norms[i];
            const std::size_t base = offsets[i * m + j];
            const std::size_t nq = offsets[i * m + j + 1] - base;
            for (std::size_t n = 0; n < nq; ++n) {
              const std::size_t k = argmax[base + n];
              if (gq)
                for (std::size_t x = 0; x < dc; ++x) gq[n * dc + x] += g * cn->value[k * dc + x];
              if (gc)
                for (std::size_t x = 0; x < dc; ++x) gc[k * dc + x] += g * qn->value[n * dc + x];
            }
          }
        }
      });
}

/// s^v: each video token takes its best-matching word.
template <Scalar Real>
Tensor<Real> fine_sim_v2t(const Tensor<Real>& video_tokens, const Tensor<Real>& word_tokens, bool normalize = true) {
  return maxsim_matrix<Real>({video_tokens}, {word_tokens}, normalize);
}

/// s^t: each word takes its best-matching video token.
template <Scalar Real>
Tensor<Real> fine_sim_t2v(const Tensor<Real>& word_tokens, const Tensor<Real>& video_tokens, bool normalize = true) {
  return maxsim_matrix<Real>({word_tokens}, {video_tokens}, normalize);
}

/// Symmetric InfoNCE over both directions, each averaged over its rows:
///   L = mean_i -log softmax(S_v2t[i] / tau)[pos_i] + mean_j -log softmax(S_t2v[j] / tau)[pos_j].
template <Scalar Real>
Tensor<Real> contrastive_loss(const SimilarityMatrix<Real>& v2t, const SimilarityMatrix<Real>& t2v) {
  for (const auto* s : {&v2t, &t2v}) {
    if (!(s->tau > 0)) throw ContractError("contrastive_loss: temperature must be positive");
    if (!s->scores.defined() || s->queries() == 0) throw ContractError("contrastive_loss: empty batch");
    if (s->positives.size() != s->queries()) throw DimensionError("contrastive_loss: positives per row");
  }
  auto direction = [](const SimilarityMatrix<Real>& s) {
    return cross_entropy_rows(scale(s.scores, Real(1) / s.tau), s.positives, s.allowed);
  };
  return add(direction(v2t), direction(t2v));
}

/// Rows kept when a token set is truncated to `cap` entries: evenly strided
/// over the original order.
inline std::vector<std::size_t> strided_rows(std::size_t count, std::size_t cap) {
  std::vector<std::size_t> rows;
  if (count <= cap) {
    for (std::size_t i = 0; i < count; ++i) rows.push_back(i);
  } else {
    for (std::size_t i = 0; i < cap; ++i) rows.push_back(i * count / cap);
  }
  return rows;
}

/// Contrastive-space features of one sample stored in a queue.
template <Scalar Real>
struct QueueEntry {
  std::size_t sample_id = 0;
  std::vector<Real> cls;     // dc
  std::vector<Real> tokens;  // token_count x dc
  std::size_t token_count = 0;
};

/// Fixed-capacity FIFO of features; pushing beyond capacity evicts the oldest.
template <Scalar Real>
class FeatureQueue {
 public:
  explicit FeatureQueue(std::size_t capacity = 0) : capacity_(capacity) {}

  void push(QueueEntry<Real> e) {
    if (capacity_ == 0) return;
    if (entries_.size() == capacity_) entries_.pop_front();
    entries_.push_back(std::move(e));
  }

  std::size_t size() const { return entries_.size(); }
  std::size_t capacity() const { return capacity_; }
  bool empty() const { return entries_.empty(); }
  const QueueEntry<Real>& operator[](std::size_t i) const { return entries_[i]; }
  void clear() { entries_.clear(); }

  /// size x dc constant matrix of queued [CLS] features.
  Tensor<Real> cls_matrix() const {
    std::vector<Real> v;
    for (const auto& e : entries_) v.insert(v.end(), e.cls.begin(), e.cls.end());
    return Tensor<Real>::from({entries_.size(), entries_.front().cls.size()}, std::move(v));
  }

  std::vector<Tensor<Real>> token_sets() const {
    std::vector<Tensor<Real>> out;
    for (const auto& e : entries_) {
      out.push_back(Tensor<Real>::from({e.token_count, e.cls.size()}, e.tokens));
    }
    return out;
  }

 private:
  std::size_t capacity_;
  std::deque<QueueEntry<Real>> entries_;
};

/// Exponential-moving-average teacher and its feature queues.
template <Scalar Real>
struct MomentumState {
  ParameterStore<Real> store;
  SingleModalEncoders<Real> encoders;
  Real momentum = Real(0.995);
  FeatureQueue<Real> video_queue;
  FeatureQueue<Real> text_queue;
  std::size_t queue_tokens = 16;

  MomentumState() = default;
  MomentumState(const MomentumState&) = delete;
  MomentumState& operator=(const MomentumState&) = delete;
};

/// theta_m <- m * theta_m + (1 - m) * theta for every same-named pair.
template <Scalar Real>
void momentum_update(const ParameterStore<Real>& online, ParameterStore<Real>& teacher, Real m) {
  if (!(m >= 0 && m <= 1)) throw ContractError("momentum_update: coefficient must lie in [0, 1]");
  if (online.names() != teacher.names()) {
    throw ContractError("momentum_update: online and momentum parameter names differ");
  }
  for (std::size_t i = 0; i < online.size(); ++i) {
    Tensor<Real> dst = teacher.all()[i].value;
    const Tensor<Real>& src = online.all()[i].value;
    if (dst.shape() != src.shape()) {
      throw DimensionError("momentum_update: shape mismatch for " + online.all()[i].name);
    }
    auto out = dst.mutable_values();
    if (m == 0) {
      std::copy(src.values().begin(), src.values().end(), out.begin());
    } else if (m != 1) {
      for (std::size_t k = 0; k < out.size(); ++k) out[k] = m * out[k] + (Real(1) - m) * src[k];
    }
  }
}

/// Copies all values from one store into a same-named store.
template <Scalar Real>
void copy_parameters(const ParameterStore<Real>& from, ParameterStore<Real>& to) {
  momentum_update(from, to, Real(0));
}

}  // namespace twbert
