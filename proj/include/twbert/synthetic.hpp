#pragma once

#include <algorithm>
#include <array>
#include <cstdio>
#include <ostream>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "twbert/objectives.hpp"

namespace twbert {

// Closed caption vocabulary ---------------------------------------------------

inline constexpr std::array<const char*, 8> kColors{"red", "green", "blue", "yellow", "purple", "orange", "white", "black"};
inline constexpr std::array<const char*, 8> kShapes{"square", "circle", "triangle", "star", "cross", "ring", "diamond", "bar"};

struct Velocity {
  int dx = 0;  // +1 moves right
  int dy = 0;  // +1 moves down
  bool operator==(const Velocity&) const = default;
};

/// Motion verbs indexed by (dy + 1) * 3 + (dx + 1).
inline constexpr std::array<const char*, 9> kVerbs{"moves-up-left",   "moves-up",   "moves-up-right",
                                                   "moves-left",      "stays",      "moves-right",
                                                   "moves-down-left", "moves-down", "moves-down-right"};

inline std::size_t verb_index(Velocity v) {
  if (v.dx < -1 || v.dx > 1 || v.dy < -1 || v.dy > 1) {
    throw ContractError("verb_index: velocity components must lie in {-1, 0, 1}");
  }
  return static_cast<std::size_t>((v.dy + 1) * 3 + (v.dx + 1));
}

inline Velocity verb_velocity(std::size_t verb) {
  if (verb >= kVerbs.size()) throw ContractError("verb_velocity: unknown verb " + std::to_string(verb));
  return {static_cast<int>(verb % 3) - 1, static_cast<int>(verb / 3) - 1};
}

/// [PAD] [CLS] [MASK], then colors, shapes, verbs.
inline Vocabulary caption_vocabulary() {
  Vocabulary v;
  for (const char* w : kColors) v.add(w);
  for (const char* w : kShapes) v.add(w);
  for (const char* w : kVerbs) v.add(w);
  return v;
}

inline constexpr int kFirstColorId = 3;
inline constexpr int kFirstShapeId = kFirstColorId + static_cast<int>(kColors.size());
inline constexpr int kFirstVerbId = kFirstShapeId + static_cast<int>(kShapes.size());
inline constexpr std::size_t kCaptionVocabSize = 3 + kColors.size() + kShapes.size() + kVerbs.size();
inline constexpr std::size_t kCellFeatureWidth = kShapes.size() + kColors.size();

// Scenes ---------------------------------------------------------------------

struct SceneObject {
  std::size_t shape = 0;
  std::size_t color = 0;
  std::size_t start_x = 0, start_y = 0;
  Velocity velocity;
  bool operator==(const SceneObject&) const = default;
};

struct SceneSpec {
  std::vector<SceneObject> objects;
  std::size_t grid = 4;
  std::size_t frames = 4;
  double noise = 0.1;

  /// Cell index y * grid + x of an object at frame t.
  std::size_t cell(std::size_t object, std::size_t t) const {
    const auto& o = objects.at(object);
    const long x = static_cast<long>(o.start_x) + o.velocity.dx * static_cast<long>(t);
    const long y = static_cast<long>(o.start_y) + o.velocity.dy * static_cast<long>(t);
    return static_cast<std::size_t>(y) * grid + static_cast<std::size_t>(x);
  }

  void validate() const {
    if (objects.empty() || objects.size() > 2) throw ContractError("SceneSpec: scenes hold 1 or 2 objects");
    if (grid == 0 || frames == 0) throw ContractError("SceneSpec: empty grid or no frames");
    for (const auto& o : objects) {
      if (o.shape >= kShapes.size() || o.color >= kColors.size()) throw ContractError("SceneSpec: unknown attribute");
      verb_index(o.velocity);
      for (long t : {0L, static_cast<long>(frames) - 1}) {
        const long x = static_cast<long>(o.start_x) + o.velocity.dx * t;
        const long y = static_cast<long>(o.start_y) + o.velocity.dy * t;
        if (x < 0 || y < 0 || x >= static_cast<long>(grid) || y >= static_cast<long>(grid)) {
          throw ContractError("SceneSpec: object leaves the grid");
        }
      }
    }
  }
};

struct VideoSample {
  std::size_t frames = 0, grid = 0, feature_width = 0;
  std::vector<double> features;              // frames x grid^2 x feature_width
  std::vector<std::vector<std::size_t>> truth;  // [object][frame] -> cell

  std::size_t cells() const { return grid * grid; }
  double at(std::size_t t, std::size_t cell, std::size_t k) const {
    return features[(t * cells() + cell) * feature_width + k];
  }

  template <Scalar Real>
  VideoInput<Real> input() const {
    VideoInput<Real> in;
    in.geometry = {frames, grid, feature_width};
    in.features = Tensor<Real>::from({frames * cells(), feature_width},
                                     std::vector<Real>(features.begin(), features.end()));
    return in;
  }
};

struct CaptionSample {
  std::vector<int> ids;
};

struct CorpusItem {
  std::size_t id = 0;
  SceneSpec scene;
  VideoSample video;
  CaptionSample caption;
  std::size_t twin = static_cast<std::size_t>(-1);  // contrast mode partner
};

struct CorpusConfig {
  std::size_t train = 64, val = 0, test = 64;
  std::uint64_t seed = 0;
  bool contrast = false;
  std::size_t grid = 4;
  std::size_t frames = 4;
  double noise = 0.1;
  double two_object_prob = 0.0;
};

struct Corpus {
  CorpusConfig config;
  std::vector<CorpusItem> train, val, test;

  const std::vector<CorpusItem>& split(const std::string& name) const {
    if (name == "train") return train;
    if (name == "val") return val;
    if (name == "test") return test;
    throw ConfigError("unknown split '" + name + "' (expected train, val or test)");
  }
};

/// Caption of a scene: color shape verb per object.
inline CaptionSample caption_of(const SceneSpec& s) {
  CaptionSample c;
  for (const auto& o : s.objects) {
    c.ids.push_back(kFirstColorId + static_cast<int>(o.color));
    c.ids.push_back(kFirstShapeId + static_cast<int>(o.shape));
    c.ids.push_back(kFirstVerbId + static_cast<int>(verb_index(o.velocity)));
  }
  return c;
}

struct ParsedObject {
  std::size_t color = 0, shape = 0;
  Velocity velocity;
  bool operator==(const ParsedObject&) const = default;
};

inline std::vector<ParsedObject> parse_caption(const std::vector<int>& ids) {
  if (ids.empty() || ids.size() % 3 != 0 || ids.size() > 6) {
    throw FormatError("parse_caption: expected 3 or 6 tokens, got " + std::to_string(ids.size()));
  }
  std::vector<ParsedObject> out;
  for (std::size_t i = 0; i < ids.size(); i += 3) {
    const int c = ids[i] - kFirstColorId, s = ids[i + 1] - kFirstShapeId, v = ids[i + 2] - kFirstVerbId;
    if (c < 0 || c >= static_cast<int>(kColors.size()) || s < 0 || s >= static_cast<int>(kShapes.size()) || v < 0 ||
        v >= static_cast<int>(kVerbs.size())) {
      throw FormatError("parse_caption: token order must be color shape verb");
    }
    out.push_back({static_cast<std::size_t>(c), static_cast<std::size_t>(s), verb_velocity(static_cast<std::size_t>(v))});
  }
  return out;
}

inline std::string caption_text(const std::vector<int>& ids) {
  static const Vocabulary vocab = caption_vocabulary();
  std::string s;
  for (int id : ids) s += (s.empty() ? "" : " ") + vocab.token(id);
  return s;
}

/// Renders a scene: every cell holds one-hot(shape) ++ one-hot(color) of the
/// objects covering it, plus N(0, noise^2) on every component. Noise comes
/// from a stream keyed by (seed, noise_key), so equal keys give equal noise.
inline VideoSample render_scene(const SceneSpec& s, std::uint64_t seed, std::uint64_t noise_key) {
  s.validate();
  VideoSample v;
  v.frames = s.frames;
  v.grid = s.grid;
  v.feature_width = kCellFeatureWidth;
  v.features.assign(s.frames * s.grid * s.grid * kCellFeatureWidth, 0.0);
  v.truth.assign(s.objects.size(), std::vector<std::size_t>(s.frames));
  for (std::size_t o = 0; o < s.objects.size(); ++o) {
    for (std::size_t t = 0; t < s.frames; ++t) {
      const std::size_t cell = s.cell(o, t);
      v.truth[o][t] = cell;
      double* f = &v.features[(t * v.cells() + cell) * kCellFeatureWidth];
      f[s.objects[o].shape] += 1.0;
      f[kShapes.size() + s.objects[o].color] += 1.0;
    }
  }
  if (s.noise > 0) {
    Rng noise = Rng::derive(seed, 0x5eed0000ULL + noise_key);
    for (double& x : v.features) x += noise.normal(0.0, s.noise);
  }
  return v;
}

/// Time reversal of a scene: start at the old end point, reversed velocity.
inline SceneSpec reversed(const SceneSpec& s) {
  SceneSpec r = s;
  for (std::size_t o = 0; o < s.objects.size(); ++o) {
    const std::size_t end = s.cell(o, s.frames - 1);
    r.objects[o].start_x = end % s.grid;
    r.objects[o].start_y = end / s.grid;
    r.objects[o].velocity = {-s.objects[o].velocity.dx, -s.objects[o].velocity.dy};
  }
  return r;
}

namespace detail {

inline SceneObject random_object(const CorpusConfig& cfg, Rng& rng, bool moving) {
  SceneObject o;
  o.shape = rng.below(kShapes.size());
  o.color = rng.below(kColors.size());
  std::size_t verb;
  do {
    verb = rng.below(kVerbs.size());
  } while (moving && verb == verb_index({0, 0}));
  o.velocity = verb_velocity(verb);
  auto start = [&](int v) -> std::size_t {
    // Starting coordinates that keep the path inside the grid.
    const std::size_t span = cfg.grid - (v == 0 ? 0 : cfg.frames - 1);
    const std::size_t lo = v < 0 ? cfg.frames - 1 : 0;
    return lo + rng.below(span);
  };
  o.start_x = start(o.velocity.dx);
  o.start_y = start(o.velocity.dy);
  return o;
}

}  // namespace detail

/// Generates train, val and test splits with globally unique captions. In
/// contrast mode every scene is followed by its time-reversed twin, whose
/// frames are the original frames in reverse order; such pairs differ only in
/// their motion verbs and always share a split.
inline Corpus generate_corpus(const CorpusConfig& cfg) {
  if (cfg.grid == 0 || cfg.frames == 0) throw ConfigError("generate_corpus: grid and frames must be positive");
  if (cfg.frames > cfg.grid) {
    throw ConfigError("generate_corpus: infeasible geometry, " + std::to_string(cfg.frames) +
                      " frames of motion do not fit a " + std::to_string(cfg.grid) + "-cell grid");
  }
  if (cfg.contrast && (cfg.train % 2 || cfg.val % 2 || cfg.test % 2)) {
    throw ConfigError("generate_corpus: contrast mode needs even split sizes");
  }
  if (cfg.two_object_prob < 0 || cfg.two_object_prob > 1) throw ConfigError("generate_corpus: two_object_prob");
  const std::size_t total = cfg.train + cfg.val + cfg.test;
  const std::size_t single = kColors.size() * kShapes.size() * (kVerbs.size() - (cfg.contrast ? 1 : 0));
  const std::size_t capacity = cfg.two_object_prob > 0 ? single * single : single;
  if (total > capacity / 2) {
    throw ConfigError("generate_corpus: " + std::to_string(total) + " unique captions requested, vocabulary supports " +
                      std::to_string(capacity));
  }

  Rng rng = Rng::derive(cfg.seed, 2);
  std::set<std::vector<int>> seen;
  std::vector<CorpusItem> items;
  auto make_scene = [&] {
    for (;;) {
      SceneSpec s;
      s.grid = cfg.grid;
      s.frames = cfg.frames;
      s.noise = cfg.noise;
      const std::size_t count = rng.bernoulli(cfg.two_object_prob) ? 2 : 1;
      for (std::size_t k = 0; k < count; ++k) s.objects.push_back(detail::random_object(cfg, rng, cfg.contrast));
      if (count == 2 && s.objects[0].shape == s.objects[1].shape && s.objects[0].color == s.objects[1].color) continue;
      auto cap = caption_of(s).ids;
      if (seen.count(cap)) continue;
      if (cfg.contrast && seen.count(caption_of(reversed(s)).ids)) continue;
      return s;
    }
  };
  while (items.size() < total) {
    SceneSpec s = make_scene();
    const std::size_t id = items.size();
    CorpusItem a{id, s, render_scene(s, cfg.seed, id), caption_of(s), static_cast<std::size_t>(-1)};
    seen.insert(a.caption.ids);
    if (!cfg.contrast) {
      items.push_back(std::move(a));
      continue;
    }
    SceneSpec r = reversed(s);
    CorpusItem b{id + 1, r, a.video, caption_of(r), id};
    a.twin = id + 1;
    // Twin frames are the original frames in reverse order, noise included.
    const std::size_t frame_size = a.video.cells() * a.video.feature_width;
    for (std::size_t t = 0; t < cfg.frames; ++t) {
      std::copy_n(a.video.features.begin() + (cfg.frames - 1 - t) * frame_size, frame_size,
                  b.video.features.begin() + t * frame_size);
      for (std::size_t o = 0; o < r.objects.size(); ++o) b.video.truth[o][t] = r.cell(o, t);
    }
    seen.insert(b.caption.ids);
    items.push_back(std::move(a));
    items.push_back(std::move(b));
  }
  Corpus c;
  c.config = cfg;
  c.train.assign(items.begin(), items.begin() + cfg.train);
  c.val.assign(items.begin() + cfg.train, items.begin() + cfg.train + cfg.val);
  c.test.assign(items.begin() + cfg.train + cfg.val, items.end());
  return c;
}

/// Training pairs for a split.
template <Scalar Real>
std::vector<PairSample<Real>> to_pairs(const std::vector<CorpusItem>& items) {
  std::vector<PairSample<Real>> out;
  for (const auto& it : items) out.push_back({it.id, it.video.input<Real>(), it.caption.ids});
  return out;
}

// Trajectory ground truth and attention scoring -------------------------------

/// Cells occupied at frame t by the given object, or by all objects when
/// `object` is negative.
inline std::vector<std::size_t> trajectory_mask(const VideoSample& v, std::size_t t, int object = -1) {
  if (t >= v.frames) {
    throw ContractError("trajectory_mask: frame " + std::to_string(t) + " outside [0, " + std::to_string(v.frames) + ")");
  }
  if (object >= static_cast<int>(v.truth.size())) throw ContractError("trajectory_mask: object index out of range");
  std::set<std::size_t> cells;
  for (std::size_t o = 0; o < v.truth.size(); ++o) {
    if (object < 0 || static_cast<int>(o) == object) cells.insert(v.truth[o][t]);
  }
  return {cells.begin(), cells.end()};
}

/// (1/T) sum_t sum_{cells in mask(t)} w_t(cell) for one query row of the
/// step-1 trajectory records, averaged over heads.
template <Scalar Real>
double attention_trajectory_score(const std::vector<AttentionRecord<Real>>& step1, const VideoSample& v,
                                  std::size_t query_row, int object = -1) {
  if (step1.size() != v.frames) {
    throw DimensionError("attention_trajectory_score: " + std::to_string(step1.size()) + " records for " +
                         std::to_string(v.frames) + " frames");
  }
  double score = 0;
  for (std::size_t t = 0; t < v.frames; ++t) {
    const auto& r = step1[t];
    if (r.keys() != v.cells()) throw DimensionError("attention_trajectory_score: record keys do not match grid");
    if (query_row >= r.queries()) throw ContractError("attention_trajectory_score: query row out of range");
    double frame = 0;
    for (std::size_t h = 0; h < r.heads(); ++h)
      for (std::size_t cell : trajectory_mask(v, t, object)) frame += static_cast<double>(r.at(h, query_row, cell));
    score += frame / static_cast<double>(r.heads());
  }
  return score / static_cast<double>(v.frames);
}

/// Analog for a patch-to-word record over all T * P patches: total mass on
/// the truth cells of every frame, averaged over heads. Uniform attention
/// gives 1 / grid^2, as for the trajectory score.
template <Scalar Real>
double p2w_trajectory_score(const AttentionRecord<Real>& rec, const VideoSample& v, std::size_t query_row,
                            int object = -1) {
  if (rec.keys() != v.frames * v.cells()) throw DimensionError("p2w_trajectory_score: record keys do not match video");
  if (query_row >= rec.queries()) throw ContractError("p2w_trajectory_score: query row out of range");
  double score = 0;
  for (std::size_t h = 0; h < rec.heads(); ++h)
    for (std::size_t t = 0; t < v.frames; ++t)
      for (std::size_t cell : trajectory_mask(v, t, object))
        score += static_cast<double>(rec.at(h, query_row, t * v.cells() + cell));
  return score / static_cast<double>(rec.heads());
}

// Export ---------------------------------------------------------------------

/// JSON-lines record per item with fields: id, twin (or null), frames, grid,
/// feature_width, features (flat, frame-major, cell-major), truth
/// ([object][frame] cell indices), caption_ids, caption.
inline void write_jsonl(std::ostream& os, const std::vector<CorpusItem>& items) {
  for (const auto& it : items) {
    nlohmann::ordered_json j;
    j["id"] = it.id;
    j["twin"] = it.twin == static_cast<std::size_t>(-1) ? nlohmann::ordered_json(nullptr)
                                                         : nlohmann::ordered_json(it.twin);
    j["frames"] = it.video.frames;
    j["grid"] = it.video.grid;
    j["feature_width"] = it.video.feature_width;
    j["features"] = it.video.features;
    j["truth"] = it.video.truth;
    j["caption_ids"] = it.caption.ids;
    j["caption"] = caption_text(it.caption.ids);
    os << j.dump() << '\n';
  }
}

}  // namespace twbert
