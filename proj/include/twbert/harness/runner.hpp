#pragma once

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include "twbert/harness/checkpoint.hpp"
#include "twbert/harness/config.hpp"
#include "twbert/harness/retrieval.hpp"

namespace twbert {

struct LossRow {
  std::size_t step = 0;
  LossBreakdown loss;
};

inline std::string loss_csv_header() { return "step,l_c,l_f,l_mlm,l_vtm,total\n"; }

inline std::string loss_csv_row(const LossRow& r) {
  char buf[256];
  std::snprintf(buf, sizeof buf, "%zu,%.17g,%.17g,%.17g,%.17g,%.17g\n", r.step, r.loss.l_c, r.loss.l_f, r.loss.l_mlm,
                r.loss.l_vtm, r.loss.total);
  return buf;
}

/// Index of the shape word of the first object in a caption (color shape verb).
inline constexpr std::size_t kShapeWordIndex = 1;

/// Mean trajectory score of the first object's shape word over a split, read
/// from the given cross-modal layer: step-1 T2W weights for the t2w variant,
/// P2W weights over all patches for the base variant.
template <Scalar Real>
double mean_trajectory_score(const TwBertModel<Real>& model, const std::vector<CorpusItem>& items,
                             std::size_t layer = 0) {
  if (items.empty()) throw ContractError("mean_trajectory_score: no samples");
  NoGradGuard guard;
  double total = 0;
  for (const auto& it : items) {
    PairSample<Real> p{it.id, it.video.input<Real>(), it.caption.ids};
    auto e = encode_pair(model.encoders, p);
    auto fused = cross_modal_encoder(e.video, e.text, model.cross, /*record=*/true);
    std::vector<AttentionRecord<Real>> step1;
    const AttentionRecord<Real>* p2w_rec = nullptr;
    for (const auto& r : fused.records) {
      if (r.layer != static_cast<int>(layer)) continue;
      if (r.label == "t2w_step1") step1.push_back(r);
      if (r.label == "p2w") p2w_rec = &r;
    }
    const std::size_t row = kShapeWordIndex + 1;
    total += model.config.variant == Variant::T2W ? attention_trajectory_score(step1, it.video, row, 0)
                                                  : p2w_trajectory_score(*p2w_rec, it.video, row, 0);
  }
  return total / static_cast<double>(items.size());
}

/// Owns everything a training run mutates. Batches and MLM/VTM sampling for
/// step k come from a stream derived from (seed, k), so a run resumed from a
/// checkpoint replays exactly the same draws.
template <Scalar Real>
class Trainer {
 public:
  RunConfig config;
  Corpus corpus;
  std::vector<PairSample<Real>> train;
  std::unique_ptr<TwBertModel<Real>> model;
  std::unique_ptr<MomentumState<Real>> momentum;
  std::unique_ptr<AdamW<Real>> optimizer;
  std::size_t step = 0;
  std::vector<LossRow> log;

  explicit Trainer(const RunConfig& cfg) : config(cfg) {
    validate(cfg);
    corpus = generate_corpus(cfg.corpus_config());
    train = to_pairs<Real>(corpus.train);
    const TrainConfig tc = cfg.train_config();
    model = std::make_unique<TwBertModel<Real>>(cfg.model_config(), cfg.seed);
    momentum = make_momentum_state(*model, tc);
    optimizer = std::make_unique<AdamW<Real>>(model->store, tc.beta1, tc.beta2, tc.adam_eps, tc.weight_decay);
  }

  std::vector<PairSample<Real>> batch_for(std::size_t k, Rng& rng) const {
    std::vector<std::size_t> idx(train.size());
    std::iota(idx.begin(), idx.end(), 0);
    rng.shuffle(idx);
    std::vector<PairSample<Real>> batch;
    for (std::size_t i = 0; i < std::min(config.batch_size, idx.size()); ++i) batch.push_back(train[idx[i]]);
    (void)k;
    return batch;
  }

  LossBreakdown step_once() {
    Rng rng = Rng::derive(config.seed, 0x100000000ULL + step);
    auto batch = batch_for(step, rng);
    auto loss = training_step(*model, *momentum, batch, rng, *optimizer, config.train_config(step), step);
    log.push_back({step, loss});
    ++step;
    return loss;
  }

  // Checkpointing ------------------------------------------------------------

  void save(const std::filesystem::path& dir) const {
    std::vector<NamedArray<Real>> arrays;
    auto add = [&](const std::string& name, const Tensor<Real>& t) {
      arrays.push_back({name, t.shape(), std::vector<Real>(t.values().begin(), t.values().end())});
    };
    for (const auto& p : model->store.all()) add("model/" + p.name, p.value);
    for (const auto& p : momentum->store.all()) add("momentum/" + p.name, p.value);
    nlohmann::ordered_json adam_steps = nlohmann::ordered_json::array();
    const auto& slots = optimizer->slots();
    for (std::size_t i = 0; i < slots.size(); ++i) {
      const auto& p = model->store.all()[i];
      arrays.push_back({"adam_m/" + p.name, p.value.shape(), slots[i].m});
      arrays.push_back({"adam_v/" + p.name, p.value.shape(), slots[i].v});
      adam_steps.push_back(slots[i].steps);
    }
    nlohmann::ordered_json queues;
    for (const auto& [label, q] : {std::pair{"video", &momentum->video_queue}, std::pair{"text", &momentum->text_queue}}) {
      nlohmann::ordered_json ids = nlohmann::ordered_json::array(), counts = nlohmann::ordered_json::array();
      std::vector<Real> cls, tokens;
      for (std::size_t i = 0; i < q->size(); ++i) {
        const auto& e = (*q)[i];
        ids.push_back(e.sample_id);
        counts.push_back(e.token_count);
        cls.insert(cls.end(), e.cls.begin(), e.cls.end());
        tokens.insert(tokens.end(), e.tokens.begin(), e.tokens.end());
      }
      queues[label] = {{"ids", ids}, {"token_counts", counts}};
      if (!q->empty()) {
        const std::size_t dc = (*q)[0].cls.size();
        arrays.push_back({std::string("queue/") + label + "/cls", {q->size(), dc}, std::move(cls)});
        arrays.push_back({std::string("queue/") + label + "/tokens", {tokens.size() / dc, dc}, std::move(tokens)});
      }
    }
    nlohmann::ordered_json loss_log = nlohmann::ordered_json::array();
    for (const auto& r : log) {
      loss_log.push_back({r.step, r.loss.l_c, r.loss.l_f, r.loss.l_mlm, r.loss.l_vtm, r.loss.total});
    }
    nlohmann::ordered_json meta;
    meta["config"] = to_json(config);
    meta["seed"] = config.seed;
    meta["step"] = step;
    meta["precision"] = sizeof(Real) * 8;
    meta["adam_steps"] = adam_steps;
    meta["queues"] = queues;
    meta["loss_log"] = loss_log;
    write_checkpoint<Real>(dir, meta, arrays);
  }

  /// Restores a run; the stored config is authoritative.
  static std::unique_ptr<Trainer> load(const std::filesystem::path& dir) {
    auto data = read_checkpoint<Real>(dir);
    const auto& meta = data.manifest.at("meta");
    auto t = std::make_unique<Trainer>(parse_run_config(meta.at("config")));
    restore_store(data, "model/", t->model->store);
    restore_store(data, "momentum/", t->momentum->store);
    auto& slots = t->optimizer->slots();
    const auto adam_steps = meta.at("adam_steps").template get<std::vector<std::size_t>>();
    if (adam_steps.size() != slots.size()) throw FormatError("checkpoint: optimizer state does not match the model");
    for (std::size_t i = 0; i < slots.size(); ++i) {
      const auto& p = t->model->store.all()[i];
      slots[i].m = checked(data, "adam_m/" + p.name, p.value.shape()).values;
      slots[i].v = checked(data, "adam_v/" + p.name, p.value.shape()).values;
      slots[i].steps = adam_steps[i];
    }
    for (const auto& [label, q] :
         {std::pair{"video", &t->momentum->video_queue}, std::pair{"text", &t->momentum->text_queue}}) {
      const auto ids = meta.at("queues").at(label).at("ids").template get<std::vector<std::size_t>>();
      const auto counts = meta.at("queues").at(label).at("token_counts").template get<std::vector<std::size_t>>();
      q->clear();
      if (ids.empty()) continue;
      const auto& cls = data.at(std::string("queue/") + label + "/cls");
      const auto& tokens = data.at(std::string("queue/") + label + "/tokens");
      const std::size_t dc = cls.shape.at(1);
      std::size_t row = 0;
      for (std::size_t i = 0; i < ids.size(); ++i) {
        QueueEntry<Real> e;
        e.sample_id = ids[i];
        e.cls.assign(cls.values.begin() + i * dc, cls.values.begin() + (i + 1) * dc);
        e.token_count = counts.at(i);
        e.tokens.assign(tokens.values.begin() + row * dc, tokens.values.begin() + (row + e.token_count) * dc);
        row += e.token_count;
        q->push(std::move(e));
      }
    }
    t->step = meta.at("step").template get<std::size_t>();
    for (const auto& r : meta.at("loss_log")) {
      t->log.push_back({r.at(0).template get<std::size_t>(),
                        {r.at(1).template get<double>(), r.at(2).template get<double>(), r.at(1).template get<double>() + r.at(2).template get<double>(),
                         r.at(3).template get<double>(), r.at(4).template get<double>(), r.at(5).template get<double>()}});
    }
    return t;
  }

  static const NamedArray<Real>& checked(const CheckpointData<Real>& data, const std::string& name,
                                         const Shape& shape) {
    const auto& a = data.at(name);
    if (a.shape != shape) {
      throw DimensionError("checkpoint: '" + name + "' has shape " + shape_string(a.shape) + ", model expects " +
                           shape_string(shape));
    }
    return a;
  }

  static void restore_store(const CheckpointData<Real>& data, const std::string& prefix, ParameterStore<Real>& store) {
    for (const auto& p : store.all()) {
      const auto& a = checked(data, prefix + p.name, p.value.shape());
      Tensor<Real> handle = p.value;
      std::copy(a.values.begin(), a.values.end(), handle.mutable_values().begin());
    }
  }
};

/// Loads only the model of a checkpoint, for evaluation and export.
template <Scalar Real>
std::unique_ptr<TwBertModel<Real>> load_model(const std::filesystem::path& dir, RunConfig* config_out = nullptr) {
  auto data = read_checkpoint<Real>(dir);
  RunConfig cfg = parse_run_config(data.manifest.at("meta").at("config"));
  auto model = std::make_unique<TwBertModel<Real>>(cfg.model_config(), cfg.seed);
  Trainer<Real>::restore_store(data, "model/", model->store);
  if (config_out) *config_out = cfg;
  return model;
}

// Commands -------------------------------------------------------------------

struct PretrainResult {
  std::vector<LossRow> log;
  std::filesystem::path checkpoint;
};

/// Trains for the step budget, writing out/loss.csv, out/checkpoint and,
/// every `checkpoint_every` steps, out/checkpoints/step_<k>. With `resume`
/// set, training continues from that checkpoint. On a non-finite loss the
/// log is flushed and the last written checkpoint is left untouched.
template <Scalar Real>
PretrainResult cmd_pretrain(const RunConfig& cfg, const std::filesystem::path& out,
                            const std::filesystem::path& resume = {},
                            const std::function<void(const LossRow&)>& on_step = {}) {
  std::unique_ptr<Trainer<Real>> trainer = resume.empty() ? std::make_unique<Trainer<Real>>(cfg)
                                                          : Trainer<Real>::load(resume);
  if (!resume.empty()) trainer->config.steps = std::max(trainer->config.steps, cfg.steps);
  std::filesystem::create_directories(out);
  auto write_log = [&] {
    std::ofstream csv(out / "loss.csv", std::ios::trunc);
    csv << loss_csv_header();
    for (const auto& r : trainer->log) csv << loss_csv_row(r);
  };
  try {
    while (trainer->step < trainer->config.steps) {
      trainer->step_once();
      if (on_step) on_step(trainer->log.back());
      if (trainer->config.checkpoint_every && trainer->step % trainer->config.checkpoint_every == 0 &&
          trainer->step < trainer->config.steps) {
        trainer->save(out / "checkpoints" / ("step_" + std::to_string(trainer->step)));
      }
    }
  } catch (const NumericError&) {
    write_log();
    throw;
  }
  write_log();
  trainer->save(out / "checkpoint");
  return {trainer->log, out / "checkpoint"};
}

template <Scalar Real>
RetrievalReport cmd_eval_retrieval(const std::filesystem::path& checkpoint, const std::string& split,
                                   const std::string& mode, std::size_t rerank_k = 16,
                                   const std::string& direction = "text_to_video") {
  RunConfig cfg;
  auto model = load_model<Real>(checkpoint, &cfg);
  Corpus corpus = generate_corpus(cfg.corpus_config());
  return evaluate_retrieval(*model, to_pairs<Real>(corpus.split(split)), mode, cfg.fine_grained, rerank_k, direction);
}

inline std::string report_markdown(const std::vector<RetrievalReport>& reports) {
  std::ostringstream os;
  os << "| mode | direction | R@1 | R@5 | R@10 | MedR |\n|---|---|---|---|---|---|\n";
  char buf[160];
  for (const auto& r : reports) {
    std::snprintf(buf, sizeof buf, "| %s | %s | %.1f | %.1f | %.1f | %.1f |\n", r.mode.c_str(), r.direction.c_str(),
                  r.r1, r.r5, r.r10, r.medr);
    os << buf;
  }
  return os.str();
}

struct AblationRow {
  std::string preset;
  std::vector<std::uint64_t> seeds;
  double r1 = 0, r5 = 0, r10 = 0, medr = 0, trajectory = 0;  // medians over seeds
};

inline double median_of(std::vector<double> v) {
  if (v.empty()) throw ContractError("median_of: empty");
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

/// Trains every preset with every seed under the same budget and corpus, and
/// reports per-preset medians of the evaluation split metrics.
template <Scalar Real>
std::vector<AblationRow> cmd_ablate(const RunConfig& cfg, const std::vector<std::string>& presets,
                                    const std::vector<std::uint64_t>& seeds, const std::filesystem::path& out = {}) {
  if (seeds.empty()) throw ConfigError("ablate: needs at least one seed");
  if (presets.empty()) throw ConfigError("ablate: needs at least one variant");
  std::vector<AblationRow> rows;
  for (const auto& preset : presets) {
    AblationRow row{preset, seeds};
    std::vector<double> r1, r5, r10, medr, traj;
    for (auto seed : seeds) {
      RunConfig c = apply_preset(cfg, preset);
      c.seed = seed;
      validate(c);
      Trainer<Real> trainer(c);
      while (trainer.step < c.steps) trainer.step_once();
      if (!out.empty()) trainer.save(out / (preset + "_seed" + std::to_string(seed)));
      const auto& split = trainer.corpus.split(c.eval_split);
      auto rep = evaluate_retrieval(*trainer.model, to_pairs<Real>(split), c.eval_mode, c.fine_grained, c.rerank_k);
      r1.push_back(rep.r1);
      r5.push_back(rep.r5);
      r10.push_back(rep.r10);
      medr.push_back(rep.medr);
      traj.push_back(mean_trajectory_score(*trainer.model, split, c.trajectory_layer));
    }
    row.r1 = median_of(r1);
    row.r5 = median_of(r5);
    row.r10 = median_of(r10);
    row.medr = median_of(medr);
    row.trajectory = median_of(traj);
    rows.push_back(row);
  }
  return rows;
}

inline std::string ablation_markdown(const std::vector<AblationRow>& rows) {
  std::ostringstream os;
  os << "| Method | R@1 | R@5 | R@10 | MedR | Trajectory |\n|---|---|---|---|---|---|\n";
  char buf[200];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "| %s | %.1f | %.1f | %.1f | %.1f | %.3f |\n", preset_label(r.preset).c_str(), r.r1,
                  r.r5, r.r10, r.medr, r.trajectory);
    os << buf;
  }
  return os.str();
}

inline std::string ablation_csv(const std::vector<AblationRow>& rows) {
  std::ostringstream os;
  os << "method,r1,r5,r10,medr,trajectory\n";
  char buf[200];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%s,%.17g,%.17g,%.17g,%.17g,%.17g\n", preset_label(r.preset).c_str(), r.r1, r.r5,
                  r.r10, r.medr, r.trajectory);
    os << buf;
  }
  return os.str();
}

}  // namespace twbert
