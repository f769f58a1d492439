#pragma once

#include <string>
#include <utility>
#include <vector>

#include "twbert/core/grad_check.hpp"
#include "twbert/objectives.hpp"

namespace twbert {

/// A deliberately tiny full model and batch on which every parameter can be
/// finite-difference checked in seconds.
struct GradCheckSetup {
  std::size_t d = 8, heads = 2, layers = 1;
  std::size_t grid = 2, frames = 3, feature_width = 4;
  std::size_t vocab = 12;
  std::size_t batch = 3;
  Variant variant = Variant::T2W;
  bool concat_vtm = true;
  std::uint64_t seed = 7;
};

/// Checks d(loss)/d(theta) for every parameter and each of L_c, L_f, L_mlm,
/// L_vtm and the weighted total. The momentum queue is pre-filled so the
/// queued-negative path is part of the check.
inline std::vector<std::pair<std::string, GradCheckReport>> model_grad_check(const GradCheckSetup& s = {},
                                                                               double step = 1e-5,
                                                                               double tol = 1e-4) {
  using Real = double;
  ModelConfig mc;
  mc.encoder.width = s.d;
  mc.encoder.heads = s.heads;
  mc.encoder.video_layers = s.layers;
  mc.encoder.text_layers = s.layers;
  mc.encoder.contrastive_dim = s.d;
  mc.encoder.geometry = {s.frames, s.grid, s.feature_width};
  mc.encoder.vocab_size = s.vocab;
  mc.encoder.max_text_len = 8;
  // Larger embeddings than the training default keep every activation well
  // away from the flat regions where differences vanish below round-off.
  mc.encoder.embedding_std = 0.5;
  mc.cross_layers = s.layers;
  mc.variant = s.variant;
  mc.concat_vtm = s.concat_vtm;
  TwBertModel<Real> model(mc, s.seed);

  Rng rng = Rng::derive(s.seed, 99);
  auto make_batch = [&](std::size_t first_id) {
    std::vector<PairSample<Real>> b;
    for (std::size_t i = 0; i < s.batch; ++i) {
      PairSample<Real> p;
      p.id = first_id + i;
      p.video.geometry = mc.encoder.geometry;
      std::vector<Real> f(s.frames * s.grid * s.grid * s.feature_width);
      for (Real& x : f) x = rng.normal();
      p.video.features = Tensor<Real>::from({s.frames * s.grid * s.grid, s.feature_width}, f);
      const std::size_t len = 3 + i % 2;
      for (std::size_t k = 0; k < len; ++k) p.caption.push_back(3 + static_cast<int>(rng.below(s.vocab - 3)));
      b.push_back(std::move(p));
    }
    return b;
  };
  TrainConfig tc;
  tc.queue_capacity = 4;
  tc.queue_tokens = 3;
  tc.tau = 0.5;
  auto momentum = make_momentum_state(model, tc);
  momentum->momentum = 0.5;
  momentum_step(model, *momentum, make_batch(100));
  const auto batch = make_batch(0);

  std::vector<std::vector<int>> texts;
  for (const auto& p : batch) texts.push_back(p.caption);
  const MaskedBatch masked = mlm_mask(texts, 0.3, rng);
  const VtmBatch pairs = vtm_pair(batch.size(), rng, 0.5);

  auto term = [&](int which) {
    return [&, which]() -> Tensor<Real> {
      auto t = compute_losses(model, momentum.get(), batch, &masked, &pairs, tc);
      switch (which) {
        case 0: return *t.l_c;
        case 1: return *t.l_f;
        case 2: return *t.l_mlm;
        case 3: return *t.l_vtm;
        default: return t.total;
      }
    };
  };
  const char* names[] = {"L_c", "L_f", "L_mlm", "L_vtm", "total"};
  std::vector<std::pair<std::string, GradCheckReport>> out;
  for (int k = 0; k < 5; ++k) out.emplace_back(names[k], grad_check<Real>(term(k), model.store.all(), step, tol));
  return out;
}

}  // namespace twbert
