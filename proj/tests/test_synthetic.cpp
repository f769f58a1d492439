#include <gtest/gtest.h>

#include <sstream>

#include "twbert/synthetic.hpp"

using namespace twbert;

namespace {

SceneSpec one_object(std::size_t x, std::size_t y, Velocity v, double noise = 0.0) {
  SceneSpec s;
  s.objects.push_back({2, 5, x, y, v});
  s.noise = noise;
  return s;
}

std::size_t nonzero_cells(const VideoSample& v, std::size_t t) {
  std::size_t n = 0;
  for (std::size_t c = 0; c < v.cells(); ++c) {
    bool any = false;
    for (std::size_t k = 0; k < v.feature_width; ++k) any |= v.at(t, c, k) != 0.0;
    n += any;
  }
  return n;
}

// heads x 1 x cells record per frame, filled by f(h, t, cell).
template <class F>
std::vector<AttentionRecord<double>> records(std::size_t heads, std::size_t frames, std::size_t cells, F f) {
  std::vector<AttentionRecord<double>> out;
  for (std::size_t t = 0; t < frames; ++t) {
    std::vector<double> w(heads * cells);
    for (std::size_t h = 0; h < heads; ++h)
      for (std::size_t c = 0; c < cells; ++c) w[h * cells + c] = f(h, t, c);
    AttentionRecord<double> r;
    r.label = "t2w_step1";
    r.frame = static_cast<int>(t);
    r.weights = Tensor<double>::from({heads, 1, cells}, w);
    out.push_back(std::move(r));
  }
  return out;
}

}  // namespace

TEST(Scene, StaysKeepsTruthConstant) {
  auto v = render_scene(one_object(1, 2, {0, 0}), 1, 0);
  for (std::size_t t = 0; t < 4; ++t) EXPECT_EQ(v.truth[0][t], 2u * 4 + 1);
}

TEST(Scene, NoiselessFramesHaveOneOccupiedCell) {
  auto s = one_object(0, 3, {1, -1});
  auto v = render_scene(s, 1, 0);
  for (std::size_t t = 0; t < 4; ++t) {
    EXPECT_EQ(nonzero_cells(v, t), 1u);
    const std::size_t c = v.truth[0][t];
    EXPECT_EQ(v.at(t, c, 2), 1.0);
    EXPECT_EQ(v.at(t, c, kShapes.size() + 5), 1.0);
  }
}

TEST(Scene, RightwardMotionVisitsCellTAtFrameT) {
  auto v = render_scene(one_object(0, 0, {1, 0}), 1, 0);
  for (std::size_t t = 0; t < 4; ++t) EXPECT_EQ(v.truth[0][t], t);
}

TEST(Scene, NoiseIsKeyedAndSeeded) {
  auto s = one_object(0, 0, {1, 0}, 0.1);
  EXPECT_EQ(render_scene(s, 3, 7).features, render_scene(s, 3, 7).features);
  EXPECT_NE(render_scene(s, 3, 7).features, render_scene(s, 3, 8).features);
  EXPECT_NE(render_scene(s, 3, 7).features, render_scene(s, 4, 7).features);
}

TEST(Scene, LeavingTheGridIsAnError) {
  EXPECT_THROW(render_scene(one_object(2, 0, {1, 0}), 1, 0), ContractError);
  EXPECT_THROW(render_scene(one_object(0, 0, {0, -1}), 1, 0), ContractError);
  SceneSpec empty;
  EXPECT_THROW(render_scene(empty, 1, 0), ContractError);
}

TEST(Scene, ReversedSwapsEndpoints) {
  auto s = one_object(0, 1, {1, 1});
  auto r = reversed(s);
  for (std::size_t t = 0; t < 4; ++t) EXPECT_EQ(r.cell(0, t), s.cell(0, 3 - t));
  EXPECT_EQ(reversed(r).objects, s.objects);
}

TEST(Caption, RoundTrip) {
  for (std::size_t verb = 0; verb < kVerbs.size(); ++verb) {
    SceneSpec s;
    const Velocity v = verb_velocity(verb);
    s.objects.push_back({verb % 8, (verb + 3) % 8, v.dx < 0 ? 3u : 0u, v.dy < 0 ? 3u : 0u, v});
    auto parsed = parse_caption(caption_of(s).ids);
    ASSERT_EQ(parsed.size(), 1u);
    EXPECT_EQ(parsed[0], (ParsedObject{s.objects[0].color, s.objects[0].shape, v}));
  }
  EXPECT_EQ(verb_index(verb_velocity(4)), 4u);
  EXPECT_EQ(std::string(kVerbs[verb_index({0, 0})]), "stays");
}

TEST(Caption, TwoObjectsAndText) {
  SceneSpec s = one_object(0, 0, {1, 0});
  s.objects.push_back({0, 0, 3, 3, {0, -1}});
  auto ids = caption_of(s).ids;
  ASSERT_EQ(ids.size(), 6u);
  EXPECT_EQ(parse_caption(ids).size(), 2u);
  EXPECT_EQ(caption_text(ids), "orange triangle moves-right red square moves-up");
}

TEST(Caption, MalformedIsAnError) {
  EXPECT_THROW(parse_caption({}), FormatError);
  EXPECT_THROW(parse_caption({kFirstColorId, kFirstShapeId}), FormatError);
  EXPECT_THROW(parse_caption({kFirstShapeId, kFirstColorId, kFirstVerbId}), FormatError);
}

TEST(Corpus, CaptionsAreUniqueAcrossSplits) {
  CorpusConfig cfg;
  cfg.train = 200;
  cfg.val = 20;
  cfg.test = 64;
  auto c = generate_corpus(cfg);
  std::set<std::vector<int>> seen;
  for (const auto* split : {&c.train, &c.val, &c.test})
    for (const auto& it : *split) EXPECT_TRUE(seen.insert(it.caption.ids).second);
  EXPECT_EQ(seen.size(), 284u);
}

TEST(Corpus, SameSeedIsByteIdentical) {
  CorpusConfig cfg;
  cfg.train = 32;
  cfg.test = 16;
  cfg.seed = 11;
  std::ostringstream a, b, c;
  write_jsonl(a, generate_corpus(cfg).train);
  write_jsonl(b, generate_corpus(cfg).train);
  cfg.seed = 12;
  write_jsonl(c, generate_corpus(cfg).train);
  EXPECT_EQ(a.str(), b.str());
  EXPECT_NE(a.str(), c.str());
}

TEST(Corpus, ContrastTwinsShareReversedFrames) {
  CorpusConfig cfg;
  cfg.train = 16;
  cfg.test = 8;
  cfg.contrast = true;
  auto c = generate_corpus(cfg);
  for (std::size_t i = 0; i < c.train.size(); i += 2) {
    const auto& a = c.train[i];
    const auto& b = c.train[i + 1];
    EXPECT_EQ(a.twin, b.id);
    EXPECT_EQ(b.twin, a.id);
    // color and shape agree, verbs are opposite and never "stays"
    EXPECT_EQ(a.caption.ids[0], b.caption.ids[0]);
    EXPECT_EQ(a.caption.ids[1], b.caption.ids[1]);
    const auto va = parse_caption(a.caption.ids)[0].velocity, vb = parse_caption(b.caption.ids)[0].velocity;
    EXPECT_EQ(va.dx, -vb.dx);
    EXPECT_EQ(va.dy, -vb.dy);
    EXPECT_FALSE(va == (Velocity{0, 0}));
    const std::size_t frame = a.video.cells() * a.video.feature_width;
    for (std::size_t t = 0; t < 4; ++t) {
      EXPECT_TRUE(std::equal(a.video.features.begin() + t * frame, a.video.features.begin() + (t + 1) * frame,
                             b.video.features.begin() + (3 - t) * frame));
      EXPECT_EQ(a.video.truth[0][t], b.video.truth[0][3 - t]);
    }
  }
}

TEST(Corpus, InfeasibleRequestsAreErrors) {
  CorpusConfig cfg;
  cfg.frames = 5;
  EXPECT_THROW(generate_corpus(cfg), ConfigError);
  cfg = {};
  cfg.train = 500;
  EXPECT_THROW(generate_corpus(cfg), ConfigError);
  cfg = {};
  cfg.contrast = true;
  cfg.train = 3;
  EXPECT_THROW(generate_corpus(cfg), ConfigError);
  cfg = {};
  cfg.two_object_prob = 1.5;
  EXPECT_THROW(generate_corpus(cfg), ConfigError);
}

TEST(Corpus, TwoObjectScenesAreDistinct) {
  CorpusConfig cfg;
  cfg.train = 100;
  cfg.test = 10;
  cfg.two_object_prob = 1.0;
  for (const auto& it : generate_corpus(cfg).train) {
    ASSERT_EQ(it.scene.objects.size(), 2u);
    const auto& o = it.scene.objects;
    EXPECT_FALSE(o[0].shape == o[1].shape && o[0].color == o[1].color);
  }
}

TEST(Mask, UnionOfObjectMasksIsTheFullMask) {
  SceneSpec s = one_object(0, 0, {1, 0});
  s.objects.push_back({0, 0, 3, 3, {0, -1}});
  auto v = render_scene(s, 1, 0);
  for (std::size_t t = 0; t < 4; ++t) {
    auto a = trajectory_mask(v, t, 0), b = trajectory_mask(v, t, 1), all = trajectory_mask(v, t);
    std::set<std::size_t> u(a.begin(), a.end());
    u.insert(b.begin(), b.end());
    EXPECT_EQ(std::vector<std::size_t>(u.begin(), u.end()), all);
  }
  EXPECT_THROW(trajectory_mask(v, 4), ContractError);
  EXPECT_THROW(trajectory_mask(v, 0, 2), ContractError);
}

TEST(TrajectoryScore, UniformAttentionGivesOneOverCells) {
  auto v = render_scene(one_object(0, 0, {1, 1}), 1, 0);
  auto recs = records(4, 4, 16, [](auto, auto, auto) { return 1.0 / 16; });
  EXPECT_NEAR(attention_trajectory_score(recs, v, 0), 1.0 / 16, 1e-15);
}

TEST(TrajectoryScore, AllMassOnTruthGivesOne) {
  auto v = render_scene(one_object(0, 0, {1, 1}), 1, 0);
  auto recs = records(2, 4, 16, [&](auto, std::size_t t, std::size_t c) { return c == v.truth[0][t] ? 1.0 : 0.0; });
  EXPECT_DOUBLE_EQ(attention_trajectory_score(recs, v, 0), 1.0);
  // Mass on the truth in half the frames for one head only.
  auto half = records(2, 4, 16, [&](std::size_t h, std::size_t t, std::size_t c) {
    return (h == 0 && t < 2) ? (c == v.truth[0][t] ? 1.0 : 0.0) : (c == 15 - v.truth[0][t] ? 1.0 : 0.0);
  });
  EXPECT_DOUBLE_EQ(attention_trajectory_score(half, v, 0), 0.25);
}

TEST(TrajectoryScore, RandomAttentionStaysInUnitInterval) {
  auto v = render_scene(one_object(0, 3, {1, -1}), 1, 0);
  Rng rng(5);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<std::vector<double>> w(2 * 4, std::vector<double>(16));
    for (auto& row : w) {
      double z = 0;
      for (double& x : row) z += (x = rng.uniform());
      for (double& x : row) x /= z;
    }
    auto recs = records(2, 4, 16, [&](std::size_t h, std::size_t t, std::size_t c) { return w[h * 4 + t][c]; });
    const double s = attention_trajectory_score(recs, v, 0);
    EXPECT_GE(s, 0.0);
    EXPECT_LE(s, 1.0);
  }
}

TEST(TrajectoryScore, ShapeErrors) {
  auto v = render_scene(one_object(0, 0, {1, 1}), 1, 0);
  auto three = records(1, 3, 16, [](auto, auto, auto) { return 1.0 / 16; });
  EXPECT_THROW(attention_trajectory_score(three, v, 0), DimensionError);
  auto wide = records(1, 4, 9, [](auto, auto, auto) { return 1.0 / 9; });
  EXPECT_THROW(attention_trajectory_score(wide, v, 0), DimensionError);
  auto ok = records(1, 4, 16, [](auto, auto, auto) { return 1.0 / 16; });
  EXPECT_THROW(attention_trajectory_score(ok, v, 1), ContractError);
}

TEST(Export, JsonlHasOneLinePerItem) {
  CorpusConfig cfg;
  cfg.train = 6;
  cfg.test = 2;
  auto c = generate_corpus(cfg);
  std::ostringstream os;
  write_jsonl(os, c.train);
  std::istringstream is(os.str());
  std::string line;
  std::size_t n = 0;
  while (std::getline(is, line)) {
    auto j = nlohmann::json::parse(line);
    EXPECT_EQ(j["id"].get<std::size_t>(), n);
    EXPECT_EQ(j["features"].size(), 4u * 16 * kCellFeatureWidth);
    EXPECT_EQ(j["caption"].get<std::string>(), caption_text(c.train[n].caption.ids));
    ++n;
  }
  EXPECT_EQ(n, 6u);
}
