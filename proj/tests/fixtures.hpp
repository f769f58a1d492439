#pragma once

// Random inputs shared by the attention tests and the acceptance binary.

#include "twbert/encoders.hpp"

namespace fixtures {

using namespace twbert;

inline Tensor<double> random_tensor(Shape shape, Rng& rng, double sd = 1.0) {
  std::vector<double> v(shape_numel(shape));
  for (double& x : v) x = rng.normal(0.0, sd);
  return Tensor<double>::from(std::move(shape), std::move(v));
}

inline TokenSequence<double> make_video(std::size_t frames, std::size_t patches, std::size_t d, Rng& rng) {
  TokenSequence<double> s;
  s.tokens = random_tensor({1 + frames * patches, d}, rng);
  s.modality = Modality::Video;
  s.frames = frames;
  s.patches = patches;
  s.coords.push_back({TokenKind::Cls});
  for (std::size_t t = 0; t < frames; ++t)
    for (std::size_t p = 0; p < patches; ++p)
      s.coords.push_back({TokenKind::Patch, static_cast<int>(t), static_cast<int>(p), -1});
  s.valid.assign(s.coords.size(), 1);
  return s;
}

inline TokenSequence<double> make_text(std::size_t words, std::size_t d, Rng& rng, std::size_t pads = 0) {
  TokenSequence<double> s;
  s.tokens = random_tensor({1 + words, d}, rng);
  s.modality = Modality::Text;
  s.coords.push_back({TokenKind::Cls});
  s.ids.push_back(Vocabulary::kCls);
  for (std::size_t i = 0; i < words; ++i) {
    s.coords.push_back({TokenKind::Word, -1, -1, static_cast<int>(i)});
    s.ids.push_back(i + pads >= words ? Vocabulary::kPad : 5);
  }
  for (int id : s.ids) s.valid.push_back(id != Vocabulary::kPad);
  return s;
}

struct Fixture {
  ParameterStore<double> store;
  Rng rng;
  explicit Fixture(std::uint64_t seed) : rng(seed) {}
  MhaParams<double> mha(std::size_t d, std::size_t h, const std::string& name = "m") {
    return MhaParams<double>::create(store, name + std::to_string(store.size()), d, h, rng);
  }
};

inline double row_sum_error(const AttentionRecord<double>& r) {
  double worst = 0;
  for (std::size_t h = 0; h < r.heads(); ++h)
    for (std::size_t q = 0; q < r.queries(); ++q) {
      double s = 0;
      for (std::size_t k = 0; k < r.keys(); ++k) s += r.at(h, q, k);
      worst = std::max(worst, std::abs(s - 1.0));
    }
  return worst;
}

}  // namespace fixtures
