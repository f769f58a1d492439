#pragma once

#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "twbert/attention.hpp"

namespace twbert {

/// Closed token inventory. Line i of a vocabulary file is the token with id
/// i; ids 0, 1, 2 are reserved for [PAD], [CLS], [MASK].
class Vocabulary {
 public:
  static constexpr int kPad = 0;
  static constexpr int kCls = 1;
  static constexpr int kMask = 2;

  Vocabulary() : tokens_{"[PAD]", "[CLS]", "[MASK]"} { reindex(); }

  explicit Vocabulary(const std::vector<std::string>& words) : Vocabulary() {
    for (const auto& w : words) add(w);
  }

  int add(const std::string& token) {
    if (index_.count(token)) throw ContractError("Vocabulary: duplicate token '" + token + "'");
    tokens_.push_back(token);
    index_[token] = static_cast<int>(tokens_.size() - 1);
    return index_[token];
  }

  std::size_t size() const { return tokens_.size(); }
  const std::string& token(int id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) {
      throw ContractError("Vocabulary: unknown id " + std::to_string(id));
    }
    return tokens_[id];
  }
  int id(const std::string& token) const {
    auto it = index_.find(token);
    if (it == index_.end()) throw ContractError("Vocabulary: unknown token '" + token + "'");
    return it->second;
  }
  bool contains(const std::string& token) const { return index_.count(token) != 0; }
  static bool is_special(int id) { return id == kPad || id == kCls || id == kMask; }
  const std::vector<std::string>& tokens() const { return tokens_; }

  void save(const std::string& path) const {
    std::ofstream out(path);
    if (!out) throw FormatError("Vocabulary: cannot write " + path);
    for (const auto& t : tokens_) out << t << '\n';
  }

  static Vocabulary load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw FormatError("Vocabulary: cannot read " + path);
    std::vector<std::string> lines;
    for (std::string line; std::getline(in, line);) {
      if (!line.empty() && line.back() == '\r') line.pop_back();
      lines.push_back(line);
    }
    if (lines.size() < 3 || lines[0] != "[PAD]" || lines[1] != "[CLS]" || lines[2] != "[MASK]") {
      throw FormatError("Vocabulary: " + path + " must start with [PAD], [CLS], [MASK]");
    }
    return Vocabulary(std::vector<std::string>(lines.begin() + 3, lines.end()));
  }

 private:
  void reindex() {
    index_.clear();
    for (std::size_t i = 0; i < tokens_.size(); ++i) index_[tokens_[i]] = static_cast<int>(i);
  }

  std::vector<std::string> tokens_;
  std::map<std::string, int> index_;
};

struct VideoGeometry {
  std::size_t frames = 4;
  std::size_t grid = 4;
  std::size_t feature_width = 16;

  std::size_t patches() const { return grid * grid; }
  bool operator==(const VideoGeometry&) const = default;
};

/// Raw per-patch features; row t * patches + p holds patch p of frame t.
template <Scalar Real>
struct VideoInput {
  VideoGeometry geometry;
  Tensor<Real> features;  // (frames * patches) x feature_width
};

struct EncoderConfig {
  std::size_t width = 32;
  std::size_t heads = 4;
  std::size_t video_layers = 2;
  std::size_t text_layers = 2;
  std::size_t ffn_multiplier = 4;
  std::size_t contrastive_dim = 32;
  VideoGeometry geometry;
  std::size_t vocab_size = 28;
  std::size_t max_text_len = 16;
  double embedding_std = 0.02;
  double ln_eps = 1e-6;

  std::size_t ffn_hidden() const { return ffn_multiplier * width; }
};

/// One divided space-time block: temporal attention, then spatial attention,
/// then the feed-forward.
template <Scalar Real>
struct VideoBlock {
  MhaParams<Real> temporal;
  MhaParams<Real> spatial;
  FeedForward<Real> ffn;
};

/// Attention patterns of divided space-time attention for a [CLS]-prefixed,
/// frame-major patch sequence.
///  temporal: patch (t, p) sees (t', p) for all t'; [CLS] sees itself.
///  spatial:  patch (t, p) sees [CLS] and every patch of frame t;
///            [CLS] sees every token.
inline std::pair<AttentionPattern, AttentionPattern> divided_patterns(std::size_t frames, std::size_t patches) {
  const std::size_t n = 1 + frames * patches;
  AttentionPattern temporal, spatial;
  temporal.add_query({0});
  std::vector<std::size_t> all(n);
  std::iota(all.begin(), all.end(), 0);
  spatial.add_query(all);
  std::vector<std::size_t> same_cell(frames), same_frame(patches + 1);
  for (std::size_t t = 0; t < frames; ++t) {
    for (std::size_t p = 0; p < patches; ++p) {
      for (std::size_t u = 0; u < frames; ++u) same_cell[u] = 1 + u * patches + p;
      temporal.add_query(same_cell);
      same_frame[0] = 0;
      for (std::size_t q = 0; q < patches; ++q) same_frame[q + 1] = 1 + t * patches + q;
      spatial.add_query(same_frame);
    }
  }
  return {temporal, spatial};
}

template <Scalar Real>
struct VideoEncoder {
  VideoGeometry geometry;
  std::size_t width = 0;
  Real ln_eps = Real(1e-6);
  Tensor<Real> patch_w, patch_b, spatial_pos, temporal_pos, cls;
  std::vector<VideoBlock<Real>> blocks;

  static VideoEncoder create(ParameterStore<Real>& store, const std::string& prefix, const EncoderConfig& cfg,
                             Rng& rng) {
    VideoEncoder e;
    e.geometry = cfg.geometry;
    e.width = cfg.width;
    e.ln_eps = static_cast<Real>(cfg.ln_eps);
    const std::size_t d = cfg.width;
    e.patch_w = store.weight(prefix + ".patch.W", cfg.geometry.feature_width, d, rng);
    e.patch_b = store.constant(prefix + ".patch.b", {d}, Real(0));
    e.spatial_pos = store.normal(prefix + ".spatial_pos", {cfg.geometry.patches(), d}, rng, cfg.embedding_std);
    e.temporal_pos = store.normal(prefix + ".temporal_pos", {cfg.geometry.frames, d}, rng, cfg.embedding_std);
    e.cls = store.normal(prefix + ".cls", {1, d}, rng, cfg.embedding_std);
    for (std::size_t l = 0; l < cfg.video_layers; ++l) {
      const std::string b = prefix + ".block" + std::to_string(l);
      e.blocks.push_back({MhaParams<Real>::create(store, b + ".temporal", d, cfg.heads, rng),
                          MhaParams<Real>::create(store, b + ".spatial", d, cfg.heads, rng),
                          FeedForward<Real>::create(store, b + ".ffn", d, cfg.ffn_hidden(), rng)});
    }
    return e;
  }

  /// Spatial positional rows added to the patch tokens, frame-major. Grid
  /// cell p uses row p of the table in every frame.
  Tensor<Real> spatial_rows() const {
    std::vector<std::size_t> idx;
    for (std::size_t t = 0; t < geometry.frames; ++t)
      for (std::size_t p = 0; p < geometry.patches(); ++p) idx.push_back(p);
    return gather_rows(spatial_pos, idx);
  }

  Tensor<Real> temporal_rows() const {
    std::vector<std::size_t> idx;
    for (std::size_t t = 0; t < geometry.frames; ++t)
      for (std::size_t p = 0; p < geometry.patches(); ++p) idx.push_back(t);
    return gather_rows(temporal_pos, idx);
  }
};

/// Embeds a video into V = {v_cls, v_1, ..., v_{T*P}}: patch projection plus
/// shared spatial and per-frame temporal positional embeddings, a learnable
/// prepended [CLS], then the divided space-time blocks. Patches are not pooled.
template <Scalar Real>
TokenSequence<Real> embed_video(const VideoInput<Real>& input, const VideoEncoder<Real>& enc) {
  const VideoGeometry& g = enc.geometry;
  if (!(input.geometry == g)) {
    throw DimensionError("embed_video: geometry (T=" + std::to_string(input.geometry.frames) +
                         ", G=" + std::to_string(input.geometry.grid) +
                         ", f=" + std::to_string(input.geometry.feature_width) + ") does not match encoder (T=" +
                         std::to_string(g.frames) + ", G=" + std::to_string(g.grid) +
                         ", f=" + std::to_string(g.feature_width) + ")");
  }
  if (input.features.rank() != 2 || input.features.rows() != g.frames * g.patches() ||
      input.features.cols() != g.feature_width) {
    throw DimensionError("embed_video: features " + shape_string(input.features.shape()) + " do not match geometry");
  }
  Tensor<Real> x = add_bias(matmul(input.features, enc.patch_w), enc.patch_b);
  x = add(add(x, enc.spatial_rows()), enc.temporal_rows());
  x = concat_rows<Real>({enc.cls, x});
  const auto [temporal, spatial] = divided_patterns(g.frames, g.patches());
  for (const auto& b : enc.blocks) {
    Tensor<Real> z = mha(x, x, x, b.temporal, &temporal, enc.ln_eps).z;
    z = mha(z, z, z, b.spatial, &spatial, enc.ln_eps).z;
    x = b.ffn(z, enc.ln_eps);
  }
  TokenSequence<Real> seq;
  seq.tokens = x;
  seq.modality = Modality::Video;
  seq.frames = g.frames;
  seq.patches = g.patches();
  seq.coords.push_back({TokenKind::Cls});
  for (std::size_t t = 0; t < g.frames; ++t)
    for (std::size_t p = 0; p < g.patches(); ++p)
      seq.coords.push_back({TokenKind::Patch, static_cast<int>(t), static_cast<int>(p), -1});
  seq.valid.assign(seq.coords.size(), 1);
  return seq;
}

template <Scalar Real>
struct TextEncoder {
  std::size_t width = 0;
  std::size_t vocab_size = 0;
  std::size_t max_len = 0;
  Real ln_eps = Real(1e-6);
  Tensor<Real> token_table, position_table;
  std::vector<AttentionBlock<Real>> blocks;

  static TextEncoder create(ParameterStore<Real>& store, const std::string& prefix, const EncoderConfig& cfg,
                            Rng& rng) {
    TextEncoder e;
    e.width = cfg.width;
    e.vocab_size = cfg.vocab_size;
    e.max_len = cfg.max_text_len;
    e.ln_eps = static_cast<Real>(cfg.ln_eps);
    e.token_table = store.normal(prefix + ".token_embedding", {cfg.vocab_size, cfg.width}, rng, cfg.embedding_std);
    e.position_table =
        store.normal(prefix + ".position_embedding", {cfg.max_text_len + 1, cfg.width}, rng, cfg.embedding_std);
    for (std::size_t l = 0; l < cfg.text_layers; ++l) {
      e.blocks.push_back(AttentionBlock<Real>::create(store, prefix + ".block" + std::to_string(l), cfg.width,
                                                      cfg.heads, cfg.ffn_hidden(), rng));
    }
    return e;
  }
};

/// Embeds word ids (without [CLS]) into X = {x_cls, x_1, ...}: token plus
/// positional embeddings and self-attention blocks. [PAD] rows never serve
/// as keys, so they cannot influence other tokens.
template <Scalar Real>
TokenSequence<Real> embed_text(const std::vector<int>& ids, const TextEncoder<Real>& enc) {
  if (ids.empty()) throw ContractError("embed_text: empty text");
  if (ids.size() > enc.max_len) {
    throw ContractError("embed_text: " + std::to_string(ids.size()) + " tokens exceed the maximum of " +
                        std::to_string(enc.max_len));
  }
  TokenSequence<Real> seq;
  seq.modality = Modality::Text;
  seq.ids.push_back(Vocabulary::kCls);
  seq.coords.push_back({TokenKind::Cls});
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= enc.vocab_size) {
      throw ContractError("embed_text: unknown token id " + std::to_string(ids[i]));
    }
    seq.ids.push_back(ids[i]);
    seq.coords.push_back({TokenKind::Word, -1, -1, static_cast<int>(i)});
  }
  for (int id : seq.ids) seq.valid.push_back(id != Vocabulary::kPad);
  std::vector<std::size_t> tok(seq.ids.begin(), seq.ids.end()), pos(seq.ids.size());
  std::iota(pos.begin(), pos.end(), 0);
  Tensor<Real> x = add(gather_rows(enc.token_table, tok), gather_rows(enc.position_table, pos));
  const auto pattern = AttentionPattern::shared(seq.ids.size(), seq.valid_rows());
  for (const auto& b : enc.blocks) {
    Tensor<Real> z = mha(x, x, x, b.attn, &pattern, enc.ln_eps).z;
    x = b.ffn(z, enc.ln_eps);
  }
  seq.tokens = x;
  return seq;
}

/// Linear maps of both modalities into the shared contrastive space.
template <Scalar Real>
struct ContrastiveProjection {
  std::size_t width = 0;
  std::size_t dim = 0;
  Tensor<Real> video_w, video_b, text_w, text_b;

  static ContrastiveProjection create(ParameterStore<Real>& store, const std::string& prefix, std::size_t d,
                                      std::size_t dc, Rng& rng) {
    ContrastiveProjection p;
    p.width = d;
    p.dim = dc;
    p.video_w = store.weight(prefix + ".video.W", d, dc, rng);
    p.video_b = store.constant(prefix + ".video.b", {dc}, Real(0));
    p.text_w = store.weight(prefix + ".text.W", d, dc, rng);
    p.text_b = store.constant(prefix + ".text.b", {dc}, Real(0));
    return p;
  }
};

/// Projects every token of a sequence with its modality's map, then
/// L2-normalizes each row (rows with norm below 1e-12 are left at zero).
template <Scalar Real>
Tensor<Real> project_contrastive(const TokenSequence<Real>& seq, const ContrastiveProjection<Real>& p) {
  if (seq.width() != p.width) {
    throw DimensionError("project_contrastive: token width " + std::to_string(seq.width()) + " vs projection input " +
                         std::to_string(p.width));
  }
  const bool video = seq.modality == Modality::Video;
  return l2_normalize_rows(add_bias(matmul(seq.tokens, video ? p.video_w : p.text_w), video ? p.video_b : p.text_b));
}

/// Video encoder, text encoder and contrastive projection. The momentum
/// teacher is a second instance with identical parameter names.
template <Scalar Real>
struct SingleModalEncoders {
  VideoEncoder<Real> video;
  TextEncoder<Real> text;
  ContrastiveProjection<Real> projection;

  static SingleModalEncoders create(ParameterStore<Real>& store, const EncoderConfig& cfg, Rng& rng) {
    SingleModalEncoders e;
    e.video = VideoEncoder<Real>::create(store, "video", cfg, rng);
    e.text = TextEncoder<Real>::create(store, "text", cfg, rng);
    e.projection = ContrastiveProjection<Real>::create(store, "proj", cfg.width, cfg.contrastive_dim, rng);
    return e;
  }
};

}  // namespace twbert
