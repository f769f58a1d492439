#pragma once

#include <algorithm>
#include <map>
#include <numeric>
#include <string>
#include <vector>

#include "twbert/objectives.hpp"

namespace twbert {

struct RetrievalReport {
  std::string mode = "vtc_zero_shot";  // or vtm_reranked
  std::string direction = "text_to_video";
  double r1 = 0, r5 = 0, r10 = 0;  // percent
  double medr = 0;
  std::vector<std::size_t> ranks;  // 1-based rank of each query's match
};

/// Rank of each query's positive: 1 + number of candidates scored strictly
/// higher, with ties broken toward the lower candidate index.
inline std::vector<std::size_t> ranks_from_scores(const std::vector<double>& scores, std::size_t queries,
                                                  std::size_t candidates, const std::vector<std::size_t>& positives) {
  if (scores.size() != queries * candidates || positives.size() != queries) {
    throw DimensionError("ranks_from_scores: score table does not match query/candidate counts");
  }
  std::vector<std::size_t> ranks;
  for (std::size_t q = 0; q < queries; ++q) {
    const double* row = &scores[q * candidates];
    const std::size_t pos = positives[q];
    if (pos >= candidates) throw ContractError("ranks_from_scores: positive index out of range");
    std::size_t rank = 1;
    for (std::size_t c = 0; c < candidates; ++c) {
      if (c != pos && (row[c] > row[pos] || (row[c] == row[pos] && c < pos))) ++rank;
    }
    ranks.push_back(rank);
  }
  return ranks;
}

inline RetrievalReport report_from_ranks(std::vector<std::size_t> ranks, std::string mode = "vtc_zero_shot",
                                         std::string direction = "text_to_video") {
  if (ranks.empty()) throw ContractError("report_from_ranks: no queries");
  RetrievalReport r;
  r.mode = std::move(mode);
  r.direction = std::move(direction);
  auto recall = [&](std::size_t k) {
    const auto hits = std::count_if(ranks.begin(), ranks.end(), [k](std::size_t x) { return x <= k; });
    return 100.0 * static_cast<double>(hits) / static_cast<double>(ranks.size());
  };
  r.r1 = recall(1);
  r.r5 = recall(5);
  r.r10 = recall(10);
  std::vector<std::size_t> sorted = ranks;
  std::sort(sorted.begin(), sorted.end());
  const std::size_t n = sorted.size();
  r.medr = n % 2 ? static_cast<double>(sorted[n / 2])
                 : 0.5 * static_cast<double>(sorted[n / 2 - 1] + sorted[n / 2]);
  r.ranks = std::move(ranks);
  return r;
}

/// Single-modal encodings of a set of pairs, computed without a graph.
template <Scalar Real>
struct EncodedSet {
  std::vector<TokenSequence<Real>> videos, texts;
  Tensor<Real> video_cls, text_cls;  // n x dc
  std::vector<Tensor<Real>> video_tokens, text_tokens;
};

template <Scalar Real>
EncodedSet<Real> encode_set(const TwBertModel<Real>& model, const std::vector<PairSample<Real>>& pairs) {
  NoGradGuard guard;
  EncodedSet<Real> s;
  std::vector<Tensor<Real>> vcls, tcls;
  for (const auto& p : pairs) {
    auto e = encode_pair(model.encoders, p);
    vcls.push_back(slice_rows(e.video_proj, 0, 1));
    tcls.push_back(slice_rows(e.text_proj, 0, 1));
    s.video_tokens.push_back(gather_rows(e.video_proj, fine_rows(e.video)));
    s.text_tokens.push_back(gather_rows(e.text_proj, fine_rows(e.text)));
    s.videos.push_back(std::move(e.video));
    s.texts.push_back(std::move(e.text));
  }
  s.video_cls = concat_rows(vcls);
  s.text_cls = concat_rows(tcls);
  return s;
}

/// VTC retrieval score, texts x videos: the [CLS] similarity, plus the mean of
/// the two token-wise similarities when fine-grained alignment is on.
template <Scalar Real>
std::vector<double> vtc_scores(const EncodedSet<Real>& s, bool fine_grained, bool fine_normalize = true) {
  NoGradGuard guard;
  const std::size_t n = s.videos.size();
  Tensor<Real> coarse = matmul_nt(s.text_cls, s.video_cls);
  std::vector<double> out(coarse.values().begin(), coarse.values().end());
  if (fine_grained) {
    Tensor<Real> sv = maxsim_matrix(s.video_tokens, s.text_tokens, fine_normalize);  // video x text
    Tensor<Real> st = maxsim_matrix(s.text_tokens, s.video_tokens, fine_normalize);  // text x video
    for (std::size_t t = 0; t < n; ++t)
      for (std::size_t v = 0; v < n; ++v)
        out[t * n + v] += 0.5 * (static_cast<double>(st[t * n + v]) + static_cast<double>(sv[v * n + t]));
  }
  return out;
}

/// Matching-head confidence for one pair: positive minus negative logit.
template <Scalar Real>
double vtm_score(const TwBertModel<Real>& model, const TokenSequence<Real>& video, const TokenSequence<Real>& text) {
  NoGradGuard guard;
  auto fused = cross_modal_encoder(video, text, model.cross);
  Tensor<Real> logits = model.vtm.logits(slice_rows(fused.video.tokens, 0, 1), slice_rows(fused.text.tokens, 0, 1));
  return static_cast<double>(logits[1]) - static_cast<double>(logits[0]);
}

/// Retrieval over a set of pairs where pair i's text matches pair i's video.
/// vtm_reranked re-orders each query's VTC top-k by the matching head and
/// leaves the remainder in VTC order.
template <Scalar Real>
RetrievalReport evaluate_retrieval(const TwBertModel<Real>& model, const std::vector<PairSample<Real>>& pairs,
                                   const std::string& mode, bool fine_grained, std::size_t rerank_k = 16,
                                   const std::string& direction = "text_to_video") {
  if (pairs.empty()) throw ContractError("evaluate_retrieval: no pairs");
  if (mode != "vtc_zero_shot" && mode != "vtm_reranked") throw ConfigError("evaluate_retrieval: unknown mode " + mode);
  if (direction != "text_to_video" && direction != "video_to_text") {
    throw ConfigError("evaluate_retrieval: unknown direction " + direction);
  }
  const auto& geo = model.config.encoder.geometry;
  for (const auto& p : pairs) {
    if (p.video.geometry.frames != geo.frames || p.video.geometry.grid != geo.grid ||
        p.video.geometry.feature_width != geo.feature_width) {
      throw DimensionError("evaluate_retrieval: corpus geometry does not match the checkpoint");
    }
  }
  const std::size_t n = pairs.size();
  const EncodedSet<Real> enc = encode_set(model, pairs);
  std::vector<double> tv = vtc_scores(enc, fine_grained);  // texts x videos
  std::vector<double> scores(n * n);
  const bool t2v = direction == "text_to_video";
  for (std::size_t q = 0; q < n; ++q)
    for (std::size_t c = 0; c < n; ++c) scores[q * n + c] = t2v ? tv[q * n + c] : tv[c * n + q];
  std::vector<std::size_t> positives(n);
  std::iota(positives.begin(), positives.end(), 0);
  if (mode == "vtc_zero_shot") return report_from_ranks(ranks_from_scores(scores, n, n, positives), mode, direction);

  std::vector<std::size_t> ranks;
  for (std::size_t q = 0; q < n; ++q) {
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    const double* row = &scores[q * n];
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return row[a] > row[b]; });
    const std::size_t k = std::min(rerank_k, n);
    std::vector<double> head(n);
    for (std::size_t i = 0; i < k; ++i) {
      const std::size_t c = order[i];
      head[c] = t2v ? vtm_score(model, enc.videos[c], enc.texts[q]) : vtm_score(model, enc.videos[q], enc.texts[c]);
    }
    std::stable_sort(order.begin(), order.begin() + static_cast<long>(k),
                     [&](std::size_t a, std::size_t b) { return head[a] > head[b]; });
    ranks.push_back(static_cast<std::size_t>(std::find(order.begin(), order.end(), q) - order.begin()) + 1);
  }
  return report_from_ranks(std::move(ranks), mode, direction);
}

}  // namespace twbert
