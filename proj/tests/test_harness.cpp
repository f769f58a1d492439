#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <numeric>

#include "twbert/harness/attention_export.hpp"
#include "twbert/harness/runner.hpp"

using namespace twbert;
namespace fs = std::filesystem;

namespace {

RunConfig tiny_config(std::uint64_t seed = 1) {
  RunConfig c;
  c.d = 8;
  c.heads = 2;
  c.video_layers = 1;
  c.text_layers = 1;
  c.cross_layers = 1;
  c.contrastive_dim = 8;
  c.ffn_multiplier = 2;
  c.corpus_train = 16;
  c.corpus_test = 8;
  c.batch_size = 4;
  c.queue_capacity = 8;
  c.queue_tokens = 4;
  c.steps = 8;
  c.warmup_steps = 2;
  c.seed = seed;
  return c;
}

fs::path scratch(const std::string& name) {
  auto p = fs::temp_directory_path() / ("twbert_test_" + name);
  fs::remove_all(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::vector<double> vals(const Tensor<double>& t) { return {t.values().begin(), t.values().end()}; }

void spit(const fs::path& p, const std::string& s) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  out << s;
}

std::vector<NamedArray<double>> sample_arrays() {
  return {{"a", {2, 3}, {1.0, -2.5, 3.25, 1e-300, -0.0, 6.0}},
          {"b", {1}, {0.1}},
          {"c", {2, 2}, {std::nextafter(1.0, 2.0), -7.0, 8.5, 1e300}}};
}

}  // namespace

// Config ---------------------------------------------------------------------

TEST(Config, UnknownKeysAndWrongTypesAreReportedTogether) {
  try {
    parse_run_config(nlohmann::json{{"dd", 3}, {"heads", "four"}, {"lr", 0.1}});
    FAIL();
  } catch (const ConfigError& e) {
    const std::string m = e.what();
    EXPECT_NE(m.find("unknown key: dd"), std::string::npos) << m;
    EXPECT_NE(m.find("wrong type: heads"), std::string::npos) << m;
  }
  EXPECT_THROW(parse_run_config(nlohmann::json::array()), ConfigError);
  EXPECT_THROW(parse_run_config(nlohmann::json{{"seed", -1}}), ConfigError);
}

TEST(Config, RangeProblemsAreListed) {
  try {
    parse_run_config(nlohmann::json{{"d", 10}, {"heads", 4}, {"tau", 0.0}, {"variant", "t3w"}});
    FAIL();
  } catch (const ConfigError& e) {
    const std::string m = e.what();
    EXPECT_NE(m.find("multiple of heads"), std::string::npos);
    EXPECT_NE(m.find("tau"), std::string::npos);
    EXPECT_NE(m.find("variant"), std::string::npos);
  }
}

TEST(Config, JsonRoundTrip) {
  RunConfig c = tiny_config(42);
  c.mode = "finetune";
  c.noise = 0.25;
  c.contrast = true;
  auto back = parse_run_config(to_json(c));
  EXPECT_EQ(to_json(back).dump(), to_json(c).dump());
  EXPECT_EQ(back.train_config().weight_mlm, 0.0);
}

TEST(Config, PretrainStepsKeepMlmAtTheStartOfAFinetuneRun) {
  RunConfig c = tiny_config();
  c.mode = "finetune";
  c.pretrain_steps = 3;
  validate(c);
  EXPECT_EQ(c.train_config(2).weight_mlm, 1.0);
  EXPECT_EQ(c.train_config(3).weight_mlm, 0.0);
  EXPECT_EQ(c.train_config().weight_mlm, 0.0);
  c.pretrain_steps = c.steps + 1;
  EXPECT_THROW(validate(c), ConfigError);
  c.mode = "pretrain";
  c.pretrain_steps = 1;
  EXPECT_THROW(validate(c), ConfigError);
}

TEST(Config, AdjacentPresetsDifferInOneFlag) {
  const auto& names = preset_names();
  for (std::size_t i = 0; i + 1 < names.size(); ++i) {
    auto a = to_json(apply_preset(RunConfig{}, names[i])), b = to_json(apply_preset(RunConfig{}, names[i + 1]));
    int diff = 0;
    for (auto it = a.begin(); it != a.end(); ++it) diff += it.value() != b[it.key()];
    EXPECT_EQ(diff, 1) << names[i] << " vs " << names[i + 1];
  }
  EXPECT_THROW(apply_preset(RunConfig{}, "bert"), ConfigError);
}

TEST(Config, VariantsDifferOnlyInCrossModalTextParameters) {
  auto names = [](const RunConfig& c) {
    TwBertModel<double> m(c.model_config(), 0);
    std::set<std::string> s;
    for (const auto& p : m.store.all()) s.insert(p.name);
    return s;
  };
  auto base = names(apply_preset(tiny_config(), "base")), t2w = names(apply_preset(tiny_config(), "t2w"));
  std::vector<std::string> only_base, only_t2w;
  std::set_difference(base.begin(), base.end(), t2w.begin(), t2w.end(), std::back_inserter(only_base));
  std::set_difference(t2w.begin(), t2w.end(), base.begin(), base.end(), std::back_inserter(only_t2w));
  EXPECT_FALSE(only_base.empty());
  EXPECT_FALSE(only_t2w.empty());
  for (const auto& n : only_base) EXPECT_NE(n.find(".p2w"), std::string::npos) << n;
  for (const auto& n : only_t2w) EXPECT_NE(n.find(".t2w"), std::string::npos) << n;
}

// Checkpoint -----------------------------------------------------------------

TEST(Checkpoint, RoundTripIsBitwise) {
  auto dir = scratch("ckpt_roundtrip");
  write_checkpoint<double>(dir, {{"note", "x"}}, sample_arrays());
  auto data = read_checkpoint<double>(dir);
  for (const auto& a : sample_arrays()) {
    const auto& b = data.at(a.name);
    EXPECT_EQ(b.shape, a.shape);
    ASSERT_EQ(b.values.size(), a.values.size());
    EXPECT_EQ(std::memcmp(a.values.data(), b.values.data(), a.values.size() * sizeof(double)), 0);
  }
  EXPECT_EQ(data.manifest["meta"]["note"], "x");
  EXPECT_THROW(data.at("missing"), FormatError);
}

TEST(Checkpoint, FloatRoundTrip) {
  auto dir = scratch("ckpt_float");
  std::vector<NamedArray<float>> arrays{{"w", {3}, {0.1f, -1e-30f, 3e30f}}};
  write_checkpoint<float>(dir, {}, arrays);
  EXPECT_EQ(read_checkpoint<float>(dir).at("w").values, arrays[0].values);
}

TEST(Checkpoint, OffsetsTileTheBlob) {
  auto dir = scratch("ckpt_tile");
  write_checkpoint<double>(dir, {}, sample_arrays());
  auto j = nlohmann::json::parse(slurp(dir / "manifest.json"));
  std::size_t cursor = 0;
  for (const auto& t : j["tensors"]) {
    EXPECT_EQ(t["offset"].get<std::size_t>(), cursor);
    cursor += t["bytes"].get<std::size_t>();
  }
  EXPECT_EQ(cursor, fs::file_size(dir / "tensors.bin"));
  EXPECT_EQ(cursor, (6 + 1 + 4) * 8u);
}

TEST(Checkpoint, ShapeValueMismatchIsAnError) {
  EXPECT_THROW(write_checkpoint<double>(scratch("ckpt_bad"), {}, {{"a", {2, 2}, {1, 2, 3}}}), DimensionError);
}

TEST(Checkpoint, EveryBlobByteFlipIsDetected) {
  auto dir = scratch("ckpt_flip");
  write_checkpoint<double>(dir, {}, sample_arrays());
  const std::string good = slurp(dir / "tensors.bin");
  for (std::size_t i = 0; i < good.size(); ++i) {
    std::string bad = good;
    bad[i] = static_cast<char>(bad[i] ^ 0x01);
    spit(dir / "tensors.bin", bad);
    EXPECT_THROW(read_checkpoint<double>(dir), FormatError) << "byte " << i;
  }
}

TEST(Checkpoint, TruncationAndExtensionAreDetected) {
  auto dir = scratch("ckpt_trunc");
  write_checkpoint<double>(dir, {}, sample_arrays());
  const std::string good = slurp(dir / "tensors.bin");
  spit(dir / "tensors.bin", good.substr(0, good.size() - 3));
  try {
    read_checkpoint<double>(dir);
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("truncated"), std::string::npos);
  }
  spit(dir / "tensors.bin", good + "x");
  EXPECT_THROW(read_checkpoint<double>(dir), FormatError);
  fs::remove(dir / "tensors.bin");
  EXPECT_THROW(read_checkpoint<double>(dir), FormatError);
}

TEST(Checkpoint, ManifestEditsAndVersionsAreDetected) {
  auto dir = scratch("ckpt_manifest");
  write_checkpoint<double>(dir, {{"step", 3}}, sample_arrays());
  const std::string good = slurp(dir / "manifest.json");

  std::string edited = good;
  edited.replace(edited.find("\"step\": 3"), 9, "\"step\": 4");
  spit(dir / "manifest.json", edited);
  EXPECT_THROW(read_checkpoint<double>(dir), FormatError);

  auto j = nlohmann::ordered_json::parse(good);
  j["version"] = kCheckpointVersion + 1;
  spit(dir / "manifest.json", j.dump(2) + "\n");
  try {
    read_checkpoint<double>(dir);
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("version"), std::string::npos);
  }

  spit(dir / "manifest.json", good.substr(0, good.size() / 2));
  EXPECT_THROW(read_checkpoint<double>(dir), FormatError);
  spit(dir / "manifest.json", good);
  EXPECT_NO_THROW(read_checkpoint<double>(dir));
}

// Training runs --------------------------------------------------------------

TEST(Trainer, StepZeroCheckpointIsTheInitialization) {
  auto dir = scratch("step0");
  Trainer<double> a(tiny_config(3));
  a.save(dir);
  auto b = Trainer<double>::load(dir);
  Trainer<double> fresh(tiny_config(3));
  ASSERT_EQ(b->model->store.all().size(), fresh.model->store.all().size());
  for (std::size_t i = 0; i < fresh.model->store.all().size(); ++i) {
    EXPECT_EQ(vals(b->model->store.all()[i].value), vals(fresh.model->store.all()[i].value));
  }
  EXPECT_EQ(b->step, 0u);
}

TEST(Trainer, ResumeMatchesUninterruptedRunBitwise) {
  auto dir = scratch("resume");
  RunConfig cfg = tiny_config(5);
  Trainer<double> straight(cfg);
  for (int i = 0; i < 8; ++i) straight.step_once();

  Trainer<double> first(cfg);
  for (int i = 0; i < 4; ++i) first.step_once();
  first.save(dir);
  auto resumed = Trainer<double>::load(dir);
  while (resumed->step < 8) resumed->step_once();

  ASSERT_EQ(resumed->log.size(), straight.log.size());
  for (std::size_t i = 0; i < straight.log.size(); ++i) {
    EXPECT_EQ(loss_csv_row(resumed->log[i]), loss_csv_row(straight.log[i])) << "step " << i;
  }
  for (std::size_t i = 0; i < straight.model->store.all().size(); ++i) {
    EXPECT_EQ(vals(resumed->model->store.all()[i].value), vals(straight.model->store.all()[i].value));
  }
  EXPECT_EQ(resumed->momentum->text_queue.size(), straight.momentum->text_queue.size());
}

TEST(Trainer, MlmTermStopsAfterPretrainSteps) {
  RunConfig c = tiny_config();
  c.mode = "finetune";
  c.pretrain_steps = 2;
  c.steps = 4;
  Trainer<double> t(c);
  while (t.step < c.steps) t.step_once();
  EXPECT_GT(t.log[0].loss.l_mlm, 0.0);
  EXPECT_GT(t.log[1].loss.l_mlm, 0.0);
  EXPECT_EQ(t.log[2].loss.l_mlm, 0.0);
  EXPECT_EQ(t.log[3].loss.l_mlm, 0.0);
}

TEST(Trainer, LoadedCheckpointWithWrongShapeIsAnError) {
  auto dir = scratch("wrong_shape");
  Trainer<double> t(tiny_config());
  t.save(dir);
  RunConfig other = tiny_config();
  other.d = 12;
  other.heads = 3;
  other.contrastive_dim = 12;
  auto data = read_checkpoint<double>(dir);
  TwBertModel<double> m(other.model_config(), 0);
  EXPECT_THROW(Trainer<double>::restore_store(data, "model/", m.store), DimensionError);
}

TEST(Trainer, PretrainCommandWritesLogAndCheckpoint) {
  auto out = scratch("pretrain_cmd");
  RunConfig cfg = tiny_config();
  cfg.steps = 3;
  cfg.checkpoint_every = 2;
  auto res = cmd_pretrain<double>(cfg, out);
  EXPECT_EQ(res.log.size(), 3u);
  EXPECT_TRUE(fs::exists(out / "checkpoints" / "step_2" / "manifest.json"));
  std::ifstream csv(out / "loss.csv");
  std::string line;
  std::size_t lines = 0;
  while (std::getline(csv, line)) ++lines;
  EXPECT_EQ(lines, 4u);
  EXPECT_EQ(load_model<double>(res.checkpoint)->store.all().size(), Trainer<double>(cfg).model->store.all().size());
}

// Retrieval ------------------------------------------------------------------

TEST(Retrieval, RanksFromScores) {
  // query 0: positive best; query 1: positive last; query 2: tie resolved toward the lower index
  std::vector<double> s{0.9, 0.1, 0.2,  //
                        0.5, 0.1, 0.4,  //
                        0.3, 0.3, 0.3};
  EXPECT_EQ(ranks_from_scores(s, 3, 3, {0, 1, 2}), (std::vector<std::size_t>{1, 3, 3}));
  EXPECT_EQ(ranks_from_scores(s, 3, 3, {0, 0, 0}), (std::vector<std::size_t>{1, 1, 1}));
  EXPECT_THROW(ranks_from_scores(s, 3, 2, {0, 1, 2}), DimensionError);
  EXPECT_THROW(ranks_from_scores(s, 3, 3, {0, 1, 3}), ContractError);
}

TEST(Retrieval, ReportMetrics) {
  auto one = report_from_ranks({1});
  EXPECT_EQ(one.r1, 100.0);
  EXPECT_EQ(one.medr, 1.0);
  // Fully reversed ranking of 20 candidates.
  std::vector<std::size_t> rev(20, 20);
  auto r = report_from_ranks(rev);
  EXPECT_EQ(r.r1, 0.0);
  EXPECT_EQ(r.r10, 0.0);
  EXPECT_EQ(r.medr, 20.0);
  auto mixed = report_from_ranks({1, 2, 6, 11});
  EXPECT_EQ(mixed.r1, 25.0);
  EXPECT_EQ(mixed.r5, 50.0);
  EXPECT_EQ(mixed.r10, 75.0);
  EXPECT_EQ(mixed.medr, 4.0);
  EXPECT_THROW(report_from_ranks({}), ContractError);
}

TEST(Retrieval, RecallIsMonotoneInK) {
  Rng rng(2);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<std::size_t> ranks(1 + rng.below(40));
    for (auto& x : ranks) x = 1 + rng.below(30);
    auto r = report_from_ranks(ranks);
    EXPECT_LE(r.r1, r.r5);
    EXPECT_LE(r.r5, r.r10);
    EXPECT_GE(r.medr, 1.0);
  }
}

TEST(Retrieval, SinglePairRanksFirst) {
  Trainer<double> t(tiny_config());
  auto pairs = to_pairs<double>(std::vector<CorpusItem>{t.corpus.test[0]});
  auto r = evaluate_retrieval(*t.model, pairs, "vtc_zero_shot", true);
  EXPECT_EQ(r.ranks, std::vector<std::size_t>{1});
  EXPECT_EQ(r.r1, 100.0);
}

TEST(Retrieval, ScoresMatchCoarsePlusFineOracle) {
  Trainer<double> t(tiny_config());
  auto pairs = to_pairs<double>(t.corpus.test);
  auto enc = encode_set(*t.model, pairs);
  auto s = vtc_scores(enc, true);
  const std::size_t n = pairs.size(), dc = 8;
  auto norm_dot = [&](const Tensor<double>& a, std::size_t i, const Tensor<double>& b, std::size_t j) {
    double d = 0, na = 0, nb = 0;
    for (std::size_t k = 0; k < dc; ++k) {
      d += a.values()[i * dc + k] * b.values()[j * dc + k];
      na += a.values()[i * dc + k] * a.values()[i * dc + k];
      nb += b.values()[j * dc + k] * b.values()[j * dc + k];
    }
    return std::pair{d, std::sqrt(na * nb)};
  };
  // mean over a's tokens of the best normalized match among b's tokens
  auto maxsim = [&](const Tensor<double>& a, const Tensor<double>& b) {
    double total = 0;
    for (std::size_t i = 0; i < a.rows(); ++i) {
      double best = -1e300;
      for (std::size_t j = 0; j < b.rows(); ++j) {
        auto [d, nn] = norm_dot(a, i, b, j);
        best = std::max(best, d / nn);
      }
      total += best;
    }
    return total / static_cast<double>(a.rows());
  };
  for (std::size_t ti = 0; ti < n; ++ti)
    for (std::size_t vi = 0; vi < n; ++vi) {
      const double coarse = norm_dot(enc.text_cls, ti, enc.video_cls, vi).first;
      const double fine = 0.5 * (maxsim(enc.text_tokens[ti], enc.video_tokens[vi]) +
                                 maxsim(enc.video_tokens[vi], enc.text_tokens[ti]));
      EXPECT_NEAR(s[ti * n + vi], coarse + fine, 1e-12);
    }
}

TEST(Retrieval, FullRerankOrdersByMatchingHead) {
  Trainer<double> t(tiny_config(7));
  auto pairs = to_pairs<double>(t.corpus.test);
  const std::size_t n = pairs.size();
  auto r = evaluate_retrieval(*t.model, pairs, "vtm_reranked", true, n);
  auto enc = encode_set(*t.model, pairs);
  std::vector<double> head(n * n);
  for (std::size_t q = 0; q < n; ++q)
    for (std::size_t c = 0; c < n; ++c) head[q * n + c] = vtm_score(*t.model, enc.videos[c], enc.texts[q]);
  // With k = n the VTC order only breaks exact ties, which random weights do not produce.
  std::vector<std::size_t> pos(n);
  std::iota(pos.begin(), pos.end(), 0);
  EXPECT_EQ(r.ranks, ranks_from_scores(head, n, n, pos));
  EXPECT_THROW(evaluate_retrieval(*t.model, pairs, "rerank", true), ConfigError);
  EXPECT_THROW(evaluate_retrieval(*t.model, pairs, "vtc_zero_shot", true, 16, "sideways"), ConfigError);
}

TEST(Retrieval, DirectionsTransposeTheScoreTable) {
  Trainer<double> t(tiny_config(8));
  auto pairs = to_pairs<double>(t.corpus.test);
  const std::size_t n = pairs.size();
  auto s = vtc_scores(encode_set(*t.model, pairs), true);
  std::vector<double> transposed(n * n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) transposed[i * n + j] = s[j * n + i];
  std::vector<std::size_t> pos(n);
  std::iota(pos.begin(), pos.end(), 0);
  auto v2t = evaluate_retrieval(*t.model, pairs, "vtc_zero_shot", true, 16, "video_to_text");
  EXPECT_EQ(v2t.ranks, ranks_from_scores(transposed, n, n, pos));
}

TEST(Retrieval, UntrainedModelIsNearChance) {
  for (std::uint64_t seed : {0, 1, 2}) {
    RunConfig cfg;
    cfg.seed = seed;
    TwBertModel<double> m(cfg.model_config(), seed);
    auto c = generate_corpus(cfg.corpus_config());
    auto r = evaluate_retrieval(m, to_pairs<double>(c.test), "vtc_zero_shot", true);
    EXPECT_LT(r.r1, 20.0) << "seed " << seed;
  }
}

TEST(Retrieval, CorpusGeometryMismatchIsAnError) {
  Trainer<double> t(tiny_config());
  CorpusConfig cc = tiny_config().corpus_config();
  cc.grid = 5;
  auto pairs = to_pairs<double>(generate_corpus(cc).test);
  EXPECT_THROW(evaluate_retrieval(*t.model, pairs, "vtc_zero_shot", true), DimensionError);
}

// Trajectory score over a model ----------------------------------------------

TEST(ModelTrajectory, UntrainedIsNearUniform) {
  RunConfig cfg;
  TwBertModel<double> m(cfg.model_config(), 0);
  auto c = generate_corpus(cfg.corpus_config());
  const double s = mean_trajectory_score(m, c.train);
  EXPECT_GT(s, 0.5 / 16);
  EXPECT_LT(s, 1.5 / 16);
}

TEST(ModelTrajectory, BaseVariantUsesPatchToWordWeights) {
  RunConfig cfg = apply_preset(tiny_config(), "base");
  TwBertModel<double> m(cfg.model_config(), 0);
  auto c = generate_corpus(cfg.corpus_config());
  const double s = mean_trajectory_score(m, c.train);
  EXPECT_GT(s, 0.0);
  EXPECT_LT(s, 1.0);
  EXPECT_THROW(mean_trajectory_score(m, {}), ContractError);
}

// Attention export -----------------------------------------------------------

TEST(AttentionExport, WeightsAreDistributions) {
  Trainer<double> t(tiny_config());
  auto pairs = to_pairs<double>(t.corpus.test);
  auto a = collect_attention(*t.model, pairs[0], 1, 0, "square");
  ASSERT_EQ(a.step1.size(), 2u * 4 * 16);
  for (std::size_t h = 0; h < a.heads; ++h) {
    for (std::size_t f = 0; f < a.frames; ++f) {
      double s = 0;
      for (std::size_t c = 0; c < a.cells(); ++c) s += a.step1_at(h, f, c);
      EXPECT_NEAR(s, 1.0, 1e-6);
    }
    EXPECT_NEAR(std::accumulate(a.step2.begin() + h * 4, a.step2.begin() + (h + 1) * 4, 0.0), 1.0, 1e-6);
  }
  for (std::size_t f = 0; f < a.frames; ++f) {
    auto g = a.frame_grid(f);
    EXPECT_NEAR(std::accumulate(g.begin(), g.end(), 0.0), 1.0, 1e-6);
  }
}

TEST(AttentionExport, FilesRoundTrip) {
  auto dir = scratch("attn_export");
  Trainer<double> t(tiny_config());
  auto pairs = to_pairs<double>(t.corpus.test);
  auto a = collect_attention(*t.model, pairs[2], 0, 0, "red");
  auto paths = write_attention_export(dir, a);
  EXPECT_EQ(paths.size(), 1u + 4);
  for (std::size_t f = 0; f < 4; ++f) {
    auto pgm = slurp(dir / ("frame_" + std::to_string(f) + ".pgm"));
    EXPECT_EQ(pgm.rfind("P2\n4 4\n255\n", 0), 0u);
    EXPECT_NE(pgm.find("255"), pgm.rfind("255")) << "peak cell maps to 255";
  }
  std::ifstream in(dir / "attention.txt");
  auto b = read_attention_text(in);
  EXPECT_EQ(b.word, "red");
  EXPECT_EQ(b.sample_id, a.sample_id);
  ASSERT_EQ(b.step1.size(), a.step1.size());
  for (std::size_t i = 0; i < a.step1.size(); ++i) EXPECT_NEAR(b.step1[i], a.step1[i], 1e-9);
  for (std::size_t i = 0; i < a.step2.size(); ++i) EXPECT_NEAR(b.step2[i], a.step2[i], 1e-9);
}

TEST(AttentionExport, Errors) {
  Trainer<double> t(tiny_config());
  auto pairs = to_pairs<double>(t.corpus.test);
  EXPECT_THROW(collect_attention(*t.model, pairs[0], 3), ContractError);
  EXPECT_THROW(collect_attention(*t.model, pairs[0], 0, 1), ContractError);
  TwBertModel<double> base(apply_preset(tiny_config(), "base").model_config(), 0);
  EXPECT_THROW(collect_attention(base, pairs[0], 0), ContractError);
  std::istringstream junk("twbert-attention 2\n");
  EXPECT_THROW(read_attention_text(junk), FormatError);
}

// Ablation -------------------------------------------------------------------

TEST(Ablate, OneRowPerPresetAndReproducible) {
  RunConfig cfg = tiny_config();
  cfg.steps = 2;
  auto a = cmd_ablate<double>(cfg, {"base", "t2w"}, {1, 2});
  auto b = cmd_ablate<double>(cfg, {"base", "t2w"}, {1, 2});
  ASSERT_EQ(a.size(), 2u);
  EXPECT_EQ(a[0].preset, "base");
  EXPECT_EQ(ablation_csv(a), ablation_csv(b));
  EXPECT_NE(ablation_markdown(a).find("| T2W |"), std::string::npos);
  EXPECT_THROW(cmd_ablate<double>(cfg, {"base"}, {}), ConfigError);
  EXPECT_THROW(cmd_ablate<double>(cfg, {}, {1}), ConfigError);
}

TEST(Ablate, MedianOf) {
  EXPECT_EQ(median_of({3, 1, 2}), 2.0);
  EXPECT_EQ(median_of({4, 1, 2, 3}), 2.5);
  EXPECT_THROW(median_of({}), ContractError);
}
