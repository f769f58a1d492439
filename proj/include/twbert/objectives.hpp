#pragma once

#include <cmath>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "twbert/alignment.hpp"

namespace twbert {

/// One video-caption pair as consumed by training and evaluation.
template <Scalar Real>
struct PairSample {
  std::size_t id = 0;
  VideoInput<Real> video;
  std::vector<int> caption;  // word ids, no [CLS]
};

struct ModelConfig {
  EncoderConfig encoder;
  std::size_t cross_layers = 2;
  Variant variant = Variant::T2W;
  bool concat_vtm = true;
};

/// Loss selection and optimizer settings for training_step.
struct TrainConfig {
  bool fine_grained = true;
  bool fine_normalize = true;
  double weight_c = 1.0;
  double weight_f = 1.0;
  double weight_mlm = 1.0;
  double weight_vtm = 1.0;
  double tau = 0.05;
  double momentum = 0.995;
  std::size_t queue_capacity = 512;
  std::size_t queue_tokens = 16;
  bool queue_fine = true;
  double mask_prob = 0.15;
  double vtm_neg_fraction = 0.5;
  // AdamW with linear warmup then linear decay to zero at total_steps.
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.98;
  double adam_eps = 1e-8;
  double weight_decay = 0.001;
  std::size_t warmup_steps = 100;
  std::size_t total_steps = 1000;
};

// Heads ----------------------------------------------------------------------

template <Scalar Real>
struct MlmHead {
  Tensor<Real> w, b;
  static MlmHead create(ParameterStore<Real>& store, std::size_t d, std::size_t vocab, Rng& rng) {
    return {store.weight("mlm.W", d, vocab, rng), store.constant("mlm.b", {vocab}, Real(0))};
  }
};

/// Binary matcher over the fused [CLS] pair (concat) or the text [CLS] alone.
template <Scalar Real>
struct VtmHead {
  bool concat = true;
  Tensor<Real> w, b;
  static VtmHead create(ParameterStore<Real>& store, std::size_t d, bool concat, Rng& rng) {
    const std::size_t in = concat ? 2 * d : d;
    return {concat, store.weight("vtm.W", in, 2, rng), store.constant("vtm.b", {2}, Real(0))};
  }

  /// B x 2 logits; column 1 means "matched".
  Tensor<Real> logits(const Tensor<Real>& video_cls, const Tensor<Real>& text_cls) const {
    if (video_cls.rows() != text_cls.rows()) {
      throw DimensionError("VtmHead: batch sizes differ " + shape_string(video_cls.shape()) + " vs " +
                           shape_string(text_cls.shape()));
    }
    Tensor<Real> in = concat ? concat_cols<Real>({video_cls, text_cls}) : text_cls;
    if (in.cols() != w.shape()[0]) {
      throw DimensionError("VtmHead: input width " + std::to_string(in.cols()) + " vs " +
                           std::to_string(w.shape()[0]));
    }
    return add_bias(matmul(in, w), b);
  }
};

/// Two-layer perceptron over the concatenated [CLS] pair, for
/// classification-style question answering.
template <Scalar Real>
struct QaHead {
  Tensor<Real> w1, b1, w2, b2;
  static QaHead create(ParameterStore<Real>& store, std::size_t d, std::size_t hidden, std::size_t answers, Rng& rng) {
    return {store.weight("qa.W1", 2 * d, hidden, rng), store.constant("qa.b1", {hidden}, Real(0)),
            store.weight("qa.W2", hidden, answers, rng), store.constant("qa.b2", {answers}, Real(0))};
  }
  Tensor<Real> logits(const Tensor<Real>& video_cls, const Tensor<Real>& text_cls) const {
    Tensor<Real> h = gelu(add_bias(matmul(concat_cols<Real>({video_cls, text_cls}), w1), b1));
    return add_bias(matmul(h, w2), b2);
  }
};

// Model ----------------------------------------------------------------------

template <Scalar Real>
class TwBertModel {
 public:
  ModelConfig config;
  ParameterStore<Real> store;
  SingleModalEncoders<Real> encoders;
  std::vector<CrossModalLayerParams<Real>> cross;
  MlmHead<Real> mlm;
  VtmHead<Real> vtm;

  TwBertModel(const ModelConfig& cfg, std::uint64_t seed) : config(cfg) {
    if (cfg.cross_layers == 0) throw ContractError("TwBertModel: needs at least one cross-modal layer");
    Rng rng = Rng::derive(seed, 1);
    encoders = SingleModalEncoders<Real>::create(store, cfg.encoder, rng);
    for (std::size_t l = 0; l < cfg.cross_layers; ++l) {
      cross.push_back(CrossModalLayerParams<Real>::create(store, "cross.layer" + std::to_string(l), cfg.variant,
                                                          cfg.encoder.width, cfg.encoder.heads,
                                                          cfg.encoder.ffn_hidden(), rng));
    }
    mlm = MlmHead<Real>::create(store, cfg.encoder.width, cfg.encoder.vocab_size, rng);
    vtm = VtmHead<Real>::create(store, cfg.encoder.width, cfg.concat_vtm, rng);
  }
  TwBertModel(const TwBertModel&) = delete;
  TwBertModel& operator=(const TwBertModel&) = delete;
};

/// View of the encoder and projection parameters, which are the ones with a
/// momentum copy. Shares tensors with the model.
template <Scalar Real>
ParameterStore<Real> encoder_parameters(const TwBertModel<Real>& model) {
  ParameterStore<Real> view;
  for (const auto& p : model.store.all()) {
    if (p.name.starts_with("video.") || p.name.starts_with("text.") || p.name.starts_with("proj.")) {
      view.adopt(p.name, p.value);
    }
  }
  return view;
}

template <Scalar Real>
void copy_encoder_parameters(const TwBertModel<Real>& model, MomentumState<Real>& state) {
  copy_parameters(encoder_parameters(model), state.store);
}

/// Creates the momentum teacher as an exact copy of the model's encoders.
template <Scalar Real>
std::unique_ptr<MomentumState<Real>> make_momentum_state(const TwBertModel<Real>& model, const TrainConfig& cfg) {
  auto state = std::make_unique<MomentumState<Real>>();
  Rng scratch(0);
  state->encoders = SingleModalEncoders<Real>::create(state->store, model.config.encoder, scratch);
  copy_encoder_parameters(model, *state);
  state->momentum = static_cast<Real>(cfg.momentum);
  state->video_queue = FeatureQueue<Real>(cfg.queue_capacity);
  state->text_queue = FeatureQueue<Real>(cfg.queue_capacity);
  state->queue_tokens = cfg.queue_tokens;
  return state;
}

// Encoding -------------------------------------------------------------------

template <Scalar Real>
struct EncodedPair {
  TokenSequence<Real> video;
  TokenSequence<Real> text;
  Tensor<Real> video_proj;  // N_V x dc, unit rows
  Tensor<Real> text_proj;   // N_X x dc, unit rows
};

template <Scalar Real>
TokenSequence<Real> encode_text(const SingleModalEncoders<Real>& enc, const std::vector<int>& ids) {
  return embed_text(ids, enc.text);
}

template <Scalar Real>
EncodedPair<Real> encode_pair(const SingleModalEncoders<Real>& enc, const PairSample<Real>& s) {
  EncodedPair<Real> e;
  e.video = embed_video(s.video, enc.video);
  e.text = embed_text(s.caption, enc.text);
  e.video_proj = project_contrastive(e.video, enc.projection);
  e.text_proj = project_contrastive(e.text, enc.projection);
  return e;
}

/// Rows that take part in token-wise similarity: video patches, and words
/// other than [CLS], [PAD], [MASK].
template <Scalar Real>
std::vector<std::size_t> fine_rows(const TokenSequence<Real>& seq) {
  std::vector<std::size_t> rows;
  if (seq.modality == Modality::Video) {
    for (std::size_t i = 1; i < seq.size(); ++i) rows.push_back(i);
  } else {
    for (std::size_t i = 1; i < seq.size(); ++i)
      if (!Vocabulary::is_special(seq.ids[i])) rows.push_back(i);
  }
  if (rows.empty()) throw ContractError("fine_rows: no eligible tokens");
  return rows;
}

// MLM ------------------------------------------------------------------------

/// Texts with some words replaced by [MASK].
struct MaskedBatch {
  std::vector<std::vector<int>> original;
  std::vector<std::vector<int>> masked;
  std::vector<std::vector<char>> mask;  // per word position
  double p_mask = 0.15;

  std::size_t masked_count() const {
    std::size_t n = 0;
    for (const auto& m : mask) n += std::count(m.begin(), m.end(), 1);
    return n;
  }
};

/// Replaces each non-special word by [MASK] independently with probability
/// p_mask. If the whole batch ends up with no mask, one uniformly chosen
/// eligible position of the batch is masked so the loss is defined. Forcing
/// per sequence instead would lift the rate on 3-word captions to about 35%.
inline MaskedBatch mlm_mask(const std::vector<std::vector<int>>& texts, double p_mask, Rng& rng) {
  if (!(p_mask > 0 && p_mask < 1)) throw ContractError("mlm_mask: p_mask must lie in (0, 1)");
  if (texts.empty()) throw ContractError("mlm_mask: empty batch");
  MaskedBatch b;
  b.p_mask = p_mask;
  std::size_t total = 0;
  for (const auto& ids : texts) {
    std::vector<std::size_t> eligible;
    for (std::size_t i = 0; i < ids.size(); ++i)
      if (!Vocabulary::is_special(ids[i])) eligible.push_back(i);
    if (eligible.empty()) throw ContractError("mlm_mask: text contains only special tokens");
    std::vector<int> masked = ids;
    std::vector<char> mask(ids.size(), 0);
    for (std::size_t i : eligible) {
      if (rng.bernoulli(p_mask)) {
        masked[i] = Vocabulary::kMask;
        mask[i] = 1;
        ++total;
      }
    }
    b.original.push_back(ids);
    b.masked.push_back(std::move(masked));
    b.mask.push_back(std::move(mask));
  }
  if (total == 0) {
    std::vector<std::pair<std::size_t, std::size_t>> eligible;
    for (std::size_t s = 0; s < texts.size(); ++s)
      for (std::size_t i = 0; i < texts[s].size(); ++i)
        if (!Vocabulary::is_special(texts[s][i])) eligible.emplace_back(s, i);
    const auto [s, i] = eligible[rng.below(eligible.size())];
    b.masked[s][i] = Vocabulary::kMask;
    b.mask[s][i] = 1;
  }
  return b;
}

inline MaskedBatch mlm_mask(const std::vector<int>& ids, double p_mask, Rng& rng) {
  return mlm_mask(std::vector<std::vector<int>>{ids}, p_mask, rng);
}

/// Mean cross-entropy of the original ids at masked positions, predicted from
/// the fused text tokens (word i sits at row i + 1).
template <Scalar Real>
Tensor<Real> mlm_loss(const std::vector<Tensor<Real>>& fused_texts, const MaskedBatch& batch, const MlmHead<Real>& head) {
  if (fused_texts.size() != batch.mask.size()) throw DimensionError("mlm_loss: batch size mismatch");
  std::vector<Tensor<Real>> rows;
  std::vector<std::size_t> targets;
  for (std::size_t s = 0; s < fused_texts.size(); ++s) {
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < batch.mask[s].size(); ++i) {
      if (batch.mask[s][i]) {
        idx.push_back(i + 1);
        targets.push_back(static_cast<std::size_t>(batch.original[s][i]));
      }
    }
    if (!idx.empty()) rows.push_back(gather_rows(fused_texts[s], idx));
  }
  if (rows.empty()) throw ContractError("mlm_loss: no masked positions");
  return cross_entropy_rows(add_bias(matmul(concat_rows(rows), head.w), head.b), targets);
}

// VTM ------------------------------------------------------------------------

struct VtmBatch {
  std::vector<std::size_t> video_index;
  std::vector<std::size_t> text_index;
  std::vector<int> labels;  // 1 matched, 0 mismatched
};

/// Keeps each pair with probability 1 - neg_fraction, otherwise pairs the
/// video with a uniformly chosen different text of the batch. If every pair
/// came out negative, one uniformly chosen pair is restored.
inline VtmBatch vtm_pair(std::size_t batch_size, Rng& rng, double neg_fraction = 0.5) {
  if (batch_size == 0) throw ContractError("vtm_pair: empty batch");
  if (!(neg_fraction >= 0 && neg_fraction <= 1)) throw ContractError("vtm_pair: neg_fraction outside [0, 1]");
  if (batch_size < 2 && neg_fraction > 0) throw ContractError("vtm_pair: negatives need a batch of at least 2");
  VtmBatch b;
  for (std::size_t i = 0; i < batch_size; ++i) {
    b.video_index.push_back(i);
    if (neg_fraction > 0 && rng.bernoulli(neg_fraction)) {
      std::size_t j = rng.below(batch_size - 1);
      if (j >= i) ++j;
      b.text_index.push_back(j);
      b.labels.push_back(0);
    } else {
      b.text_index.push_back(i);
      b.labels.push_back(1);
    }
  }
  if (std::find(b.labels.begin(), b.labels.end(), 1) == b.labels.end()) {
    const std::size_t i = rng.below(batch_size);
    b.text_index[i] = i;
    b.labels[i] = 1;
  }
  return b;
}

/// Two-way cross-entropy of the matching head.
template <Scalar Real>
Tensor<Real> vtm_loss(const Tensor<Real>& video_fused_cls, const Tensor<Real>& text_fused_cls,
                      const std::vector<int>& labels, const VtmHead<Real>& head) {
  if (labels.size() != text_fused_cls.rows()) throw DimensionError("vtm_loss: label count mismatch");
  std::vector<std::size_t> targets(labels.begin(), labels.end());
  return cross_entropy_rows(head.logits(video_fused_cls, text_fused_cls), targets);
}

// Losses ---------------------------------------------------------------------

/// Weighted loss contributions; disabled terms are zero.
///   l_vtc = l_c + l_f,  total = l_vtc + l_mlm + l_vtm.
struct LossBreakdown {
  double l_c = 0, l_f = 0, l_vtc = 0, l_mlm = 0, l_vtm = 0, total = 0;
};

template <Scalar Real>
struct LossTerms {
  std::optional<Tensor<Real>> l_c, l_f, l_mlm, l_vtm;  // unweighted
  Tensor<Real> total;                                 // weighted sum
  LossBreakdown breakdown;
};

namespace detail {

template <Scalar Real>
std::vector<char> queue_mask(const std::vector<std::size_t>& row_ids, std::size_t batch,
                             const FeatureQueue<Real>& queue) {
  // In-batch candidates are always admissible; a queued copy of a row's own
  // sample would be a stale positive and is removed from that row.
  const std::size_t cols = batch + queue.size();
  std::vector<char> allowed(row_ids.size() * cols, 1);
  for (std::size_t i = 0; i < row_ids.size(); ++i)
    for (std::size_t q = 0; q < queue.size(); ++q)
      if (queue[q].sample_id == row_ids[i]) allowed[i * cols + batch + q] = 0;
  return allowed;
}

}  // namespace detail

/// Evaluates the four objectives on a fixed batch. Only terms with non-zero
/// weight are built. `masked` and `vtm` must be present when their weights are.
template <Scalar Real>
LossTerms<Real> compute_losses(const TwBertModel<Real>& model, const MomentumState<Real>* momentum,
                               const std::vector<PairSample<Real>>& batch, const MaskedBatch* masked,
                               const VtmBatch* vtm, const TrainConfig& cfg) {
  if (batch.empty()) throw ContractError("compute_losses: empty batch");
  const auto& enc = model.encoders;
  const std::size_t B = batch.size();
  const Real tau = static_cast<Real>(cfg.tau);
  const bool use_c = cfg.weight_c != 0;
  const bool use_f = cfg.fine_grained && cfg.weight_f != 0;
  const bool use_mlm = cfg.weight_mlm != 0;
  const bool use_vtm = cfg.weight_vtm != 0;

  std::vector<EncodedPair<Real>> encoded;
  for (const auto& s : batch) encoded.push_back(encode_pair(enc, s));
  std::vector<std::size_t> ids;
  for (const auto& s : batch) ids.push_back(s.id);

  LossTerms<Real> terms;
  const FeatureQueue<Real>* vq = momentum ? &momentum->video_queue : nullptr;
  const FeatureQueue<Real>* tq = momentum ? &momentum->text_queue : nullptr;

  if (use_c) {
    std::vector<Tensor<Real>> vcls, tcls;
    for (const auto& e : encoded) {
      vcls.push_back(slice_rows(e.video_proj, 0, 1));
      tcls.push_back(slice_rows(e.text_proj, 0, 1));
    }
    Tensor<Real> v = concat_rows(vcls), t = concat_rows(tcls);
    Tensor<Real> text_cands = tq && !tq->empty() ? concat_rows<Real>({t, tq->cls_matrix()}) : t;
    Tensor<Real> video_cands = vq && !vq->empty() ? concat_rows<Real>({v, vq->cls_matrix()}) : v;
    auto s_v2t = coarse_sim(v, text_cands, tau);
    auto s_t2v = coarse_sim(t, video_cands, tau);
    s_t2v.kind = SimilarityKind::Coarse;
    if (tq && !tq->empty()) s_v2t.allowed = detail::queue_mask(ids, B, *tq);
    if (vq && !vq->empty()) s_t2v.allowed = detail::queue_mask(ids, B, *vq);
    terms.l_c = contrastive_loss(s_v2t, s_t2v);
  }

  if (use_f) {
    std::vector<Tensor<Real>> vtok, ttok;
    for (const auto& e : encoded) {
      vtok.push_back(gather_rows(e.video_proj, fine_rows(e.video)));
      ttok.push_back(gather_rows(e.text_proj, fine_rows(e.text)));
    }
    std::vector<Tensor<Real>> text_cands = ttok, video_cands = vtok;
    const bool with_queue = cfg.queue_fine && tq && !tq->empty();
    if (with_queue) {
      for (auto& t : tq->token_sets()) text_cands.push_back(t);
      for (auto& v : vq->token_sets()) video_cands.push_back(v);
    }
    SimilarityMatrix<Real> s_v2t, s_t2v;
    s_v2t.scores = maxsim_matrix(vtok, text_cands, cfg.fine_normalize);
    s_v2t.kind = SimilarityKind::FineV2T;
    s_t2v.scores = maxsim_matrix(ttok, video_cands, cfg.fine_normalize);
    s_t2v.kind = SimilarityKind::FineT2V;
    s_v2t.tau = s_t2v.tau = tau;
    for (std::size_t i = 0; i < B; ++i) {
      s_v2t.positives.push_back(i);
      s_t2v.positives.push_back(i);
    }
    if (with_queue) {
      s_v2t.allowed = detail::queue_mask(ids, B, *tq);
      s_t2v.allowed = detail::queue_mask(ids, B, *vq);
    }
    terms.l_f = contrastive_loss(s_v2t, s_t2v);
  }

  if (use_mlm) {
    if (!masked) throw ContractError("compute_losses: MLM enabled without a masked batch");
    std::vector<Tensor<Real>> fused;
    for (std::size_t i = 0; i < B; ++i) {
      TokenSequence<Real> text = embed_text(masked->masked[i], enc.text);
      fused.push_back(cross_modal_encoder(encoded[i].video, text, model.cross).text.tokens);
    }
    terms.l_mlm = mlm_loss(fused, *masked, model.mlm);
  }

  if (use_vtm) {
    if (!vtm) throw ContractError("compute_losses: VTM enabled without pairs");
    std::vector<Tensor<Real>> vcls, tcls;
    for (std::size_t k = 0; k < vtm->labels.size(); ++k) {
      auto fused = cross_modal_encoder(encoded[vtm->video_index[k]].video, encoded[vtm->text_index[k]].text,
                                       model.cross);
      vcls.push_back(slice_rows(fused.video.tokens, 0, 1));
      tcls.push_back(slice_rows(fused.text.tokens, 0, 1));
    }
    terms.l_vtm = vtm_loss(concat_rows(vcls), concat_rows(tcls), vtm->labels, model.vtm);
  }

  std::optional<Tensor<Real>> total;
  auto accumulate = [&](const std::optional<Tensor<Real>>& term, double weight, double& slot) {
    if (!term) return;
    Tensor<Real> w = scale(*term, static_cast<Real>(weight));
    slot = static_cast<double>(w.item());
    total = total ? add(*total, w) : w;
  };
  LossBreakdown& b = terms.breakdown;
  accumulate(terms.l_c, cfg.weight_c, b.l_c);
  accumulate(terms.l_f, cfg.weight_f, b.l_f);
  accumulate(terms.l_mlm, cfg.weight_mlm, b.l_mlm);
  accumulate(terms.l_vtm, cfg.weight_vtm, b.l_vtm);
  terms.total = total ? *total : Tensor<Real>::scalar(Real(0));
  b.l_vtc = static_cast<double>(static_cast<Real>(b.l_c) + static_cast<Real>(b.l_f));
  b.total = static_cast<double>(terms.total.item());
  return terms;
}

// Optimizer ------------------------------------------------------------------

/// Linear warmup to the base rate, then linear decay to zero at total_steps.
inline double learning_rate(const TrainConfig& cfg, std::size_t step) {
  if (cfg.warmup_steps > 0 && step < cfg.warmup_steps) {
    return cfg.lr * static_cast<double>(step + 1) / static_cast<double>(cfg.warmup_steps);
  }
  if (cfg.total_steps <= cfg.warmup_steps) return cfg.lr;
  const double remaining = static_cast<double>(cfg.total_steps) - static_cast<double>(step);
  return cfg.lr * std::max(0.0, remaining / static_cast<double>(cfg.total_steps - cfg.warmup_steps));
}

/// Adam with decoupled weight decay. Parameters that received no gradient
/// in a step are left untouched, including their decay and step count.
template <Scalar Real>
class AdamW {
 public:
  struct Slot {
    std::vector<Real> m, v;
    std::size_t steps = 0;
  };

  AdamW(const ParameterStore<Real>& store, double beta1, double beta2, double eps, double weight_decay)
      : beta1_(beta1), beta2_(beta2), eps_(eps), weight_decay_(weight_decay) {
    for (const auto& p : store.all()) {
      slots_.push_back({std::vector<Real>(p.value.numel(), Real(0)), std::vector<Real>(p.value.numel(), Real(0)), 0});
    }
  }

  void step(ParameterStore<Real>& store, double lr) {
    if (store.size() != slots_.size()) throw ContractError("AdamW: parameter count changed");
    for (std::size_t i = 0; i < store.size(); ++i) {
      Tensor<Real> p = store.all()[i].value;
      if (!p.grad_touched()) continue;
      Slot& s = slots_[i];
      ++s.steps;
      const double c1 = 1 - std::pow(beta1_, static_cast<double>(s.steps));
      const double c2 = 1 - std::pow(beta2_, static_cast<double>(s.steps));
      auto values = p.mutable_values();
      const auto grad = p.grad();
      const Real decay = static_cast<Real>(1 - lr * weight_decay_);
      for (std::size_t k = 0; k < values.size(); ++k) {
        s.m[k] = static_cast<Real>(beta1_) * s.m[k] + static_cast<Real>(1 - beta1_) * grad[k];
        s.v[k] = static_cast<Real>(beta2_) * s.v[k] + static_cast<Real>(1 - beta2_) * grad[k] * grad[k];
        const Real mhat = s.m[k] / static_cast<Real>(c1);
        const Real vhat = s.v[k] / static_cast<Real>(c2);
        values[k] = values[k] * decay - static_cast<Real>(lr) * mhat / (std::sqrt(vhat) + static_cast<Real>(eps_));
      }
    }
  }

  std::vector<Slot>& slots() { return slots_; }
  const std::vector<Slot>& slots() const { return slots_; }

 private:
  double beta1_, beta2_, eps_, weight_decay_;
  std::vector<Slot> slots_;
};

// Momentum -------------------------------------------------------------------

/// Moves the teacher toward the model, then encodes the batch with the
/// teacher and enqueues its [CLS] features and strided token subsets.
template <Scalar Real>
void momentum_step(const TwBertModel<Real>& model, MomentumState<Real>& state,
                   const std::vector<PairSample<Real>>& batch) {
  momentum_update(encoder_parameters(model), state.store, state.momentum);
  NoGradGuard guard;
  for (const auto& s : batch) {
    auto e = encode_pair(state.encoders, s);
    auto entry = [&](const TokenSequence<Real>& seq, const Tensor<Real>& proj) {
      QueueEntry<Real> q;
      q.sample_id = s.id;
      const std::size_t dc = proj.cols();
      q.cls.assign(proj.values().begin(), proj.values().begin() + dc);
      const auto rows = fine_rows(seq);
      for (std::size_t r : strided_rows(rows.size(), state.queue_tokens)) {
        const auto begin = proj.values().begin() + rows[r] * dc;
        q.tokens.insert(q.tokens.end(), begin, begin + dc);
        ++q.token_count;
      }
      return q;
    };
    state.video_queue.push(entry(e.video, e.video_proj));
    state.text_queue.push(entry(e.text, e.text_proj));
  }
}

// Training step ----------------------------------------------------------------

template <Scalar Real>
std::string nonfinite_report(const ParameterStore<Real>& store) {
  std::ostringstream os;
  for (const auto& p : store.all()) {
    const bool bad_value = !p.value.all_finite();
    bool bad_grad = false;
    for (Real g : p.value.grad()) bad_grad |= !std::isfinite(g);
    if (bad_value || bad_grad) os << ' ' << p.name << (bad_value ? "[value]" : "") << (bad_grad ? "[grad]" : "");
  }
  const std::string s = os.str();
  return s.empty() ? " (no parameter holds non-finite values)" : s;
}

/// One optimization step on a batch: sample MLM masks and VTM pairs, compute
/// the weighted losses, backpropagate, update with AdamW, then advance the
/// momentum teacher and its queues.
template <Scalar Real>
LossBreakdown training_step(TwBertModel<Real>& model, MomentumState<Real>& momentum,
                            const std::vector<PairSample<Real>>& batch, Rng& rng, AdamW<Real>& optimizer,
                            const TrainConfig& cfg, std::size_t step_index) {
  if (batch.size() < 2) throw ContractError("training_step: batch needs at least 2 pairs");
  std::optional<MaskedBatch> masked;
  std::optional<VtmBatch> pairs;
  if (cfg.weight_mlm != 0) {
    std::vector<std::vector<int>> texts;
    for (const auto& s : batch) texts.push_back(s.caption);
    masked = mlm_mask(texts, cfg.mask_prob, rng);
  }
  if (cfg.weight_vtm != 0) pairs = vtm_pair(batch.size(), rng, cfg.vtm_neg_fraction);

  model.store.zero_grad();
  auto terms = compute_losses(model, &momentum, batch, masked ? &*masked : nullptr, pairs ? &*pairs : nullptr, cfg);
  if (!std::isfinite(terms.breakdown.total)) {
    throw NumericError("training_step " + std::to_string(step_index) + ": non-finite loss;" +
                       nonfinite_report(model.store));
  }
  backward(terms.total);
  for (const auto& p : model.store.all()) {
    for (Real g : p.value.grad()) {
      if (!std::isfinite(g)) {
        throw NumericError("training_step " + std::to_string(step_index) + ": non-finite gradient;" +
                           nonfinite_report(model.store));
      }
    }
  }
  optimizer.step(model.store, learning_rate(cfg, step_index));
  momentum_step(model, momentum, batch);
  return terms.breakdown;
}

}  // namespace twbert
