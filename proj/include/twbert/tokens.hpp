#pragma once

#include <string>
#include <vector>

#include "twbert/core/ops.hpp"

namespace twbert {

enum class Modality { Video, Text };

enum class TokenKind { Cls, Patch, Word, Trajectory };

/// Where a row of a token matrix comes from.
struct TokenCoord {
  TokenKind kind = TokenKind::Cls;
  int frame = -1;     // patches and trajectory tokens
  int cell = -1;      // patches: row-major grid index
  int position = -1;  // words: 0-based position after [CLS]
  bool operator==(const TokenCoord&) const = default;
};

/// An ordered set of d-wide embeddings whose row 0 is the [CLS] token.
///
/// Video sequences are laid out frame-major: row 1 + t * patches + p holds
/// patch p of frame t. Text sequences hold word i at row 1 + i; `valid`
/// marks non-[PAD] rows, which are the only admissible attention keys.
template <Scalar Real>
struct TokenSequence {
  Tensor<Real> tokens;
  Modality modality = Modality::Text;
  std::vector<TokenCoord> coords;
  std::vector<char> valid;
  std::vector<int> ids;       // text: token ids including [CLS] at 0
  std::size_t frames = 0;     // video only
  std::size_t patches = 0;    // video only, per frame

  std::size_t size() const { return tokens.rows(); }
  std::size_t width() const { return tokens.cols(); }

  std::vector<std::size_t> valid_rows() const {
    std::vector<std::size_t> rows;
    for (std::size_t i = 0; i < valid.size(); ++i)
      if (valid[i]) rows.push_back(i);
    return rows;
  }

  /// Same layout with new embeddings.
  TokenSequence with_tokens(Tensor<Real> t) const {
    if (t.rows() != size()) {
      throw DimensionError("TokenSequence: replacement has " + std::to_string(t.rows()) + " rows, expected " +
                           std::to_string(size()));
    }
    TokenSequence out = *this;
    out.tokens = std::move(t);
    return out;
  }
};

}  // namespace twbert
