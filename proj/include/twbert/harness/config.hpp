#pragma once

#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <variant>
#include <vector>

#include <json.hpp>

#include "twbert/synthetic.hpp"

namespace twbert {

/// Everything a CLI run needs, as one flat JSON object.
struct RunConfig {
  // model
  std::size_t d = 32;
  std::size_t heads = 4;
  std::size_t video_layers = 2;
  std::size_t text_layers = 2;
  std::size_t cross_layers = 2;
  std::size_t contrastive_dim = 32;
  std::size_t ffn_multiplier = 4;
  std::string variant = "t2w";
  bool concat_vtm = true;
  bool fine_grained = true;
  bool fine_normalize = true;
  // objectives
  std::string mode = "pretrain";  // finetune drops MLM
  std::size_t pretrain_steps = 0;  // finetune: leading steps that keep MLM
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
  // optimizer
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.98;
  double adam_eps = 1e-8;
  double weight_decay = 0.001;
  std::size_t warmup_steps = 100;
  std::size_t steps = 1000;
  std::size_t batch_size = 8;
  // corpus
  std::size_t corpus_train = 64;
  std::size_t corpus_val = 0;
  std::size_t corpus_test = 64;
  std::uint64_t corpus_seed = 0;
  bool contrast = false;
  std::size_t grid = 4;
  std::size_t frames = 4;
  double noise = 0.1;
  double two_object_prob = 0.0;
  // run
  std::uint64_t seed = 0;
  std::size_t checkpoint_every = 0;  // 0: only the final checkpoint
  std::size_t rerank_k = 16;
  std::string eval_mode = "vtc_zero_shot";
  std::string eval_split = "test";
  std::size_t trajectory_layer = 0;
  int precision = 64;
  std::string out_dir = "run";

  ModelConfig model_config() const {
    ModelConfig m;
    m.encoder.width = d;
    m.encoder.heads = heads;
    m.encoder.video_layers = video_layers;
    m.encoder.text_layers = text_layers;
    m.encoder.ffn_multiplier = ffn_multiplier;
    m.encoder.contrastive_dim = contrastive_dim;
    m.encoder.geometry = {frames, grid, kCellFeatureWidth};
    m.encoder.vocab_size = kCaptionVocabSize;
    m.cross_layers = cross_layers;
    m.variant = variant == "base" ? Variant::Base : Variant::T2W;
    m.concat_vtm = concat_vtm;
    return m;
  }

  TrainConfig train_config() const {
    TrainConfig t;
    t.fine_grained = fine_grained;
    t.fine_normalize = fine_normalize;
    t.weight_c = weight_c;
    t.weight_f = weight_f;
    t.weight_mlm = mode == "finetune" ? 0.0 : weight_mlm;
    t.weight_vtm = weight_vtm;
    t.tau = tau;
    t.momentum = momentum;
    t.queue_capacity = queue_capacity;
    t.queue_tokens = queue_tokens;
    t.queue_fine = queue_fine;
    t.mask_prob = mask_prob;
    t.vtm_neg_fraction = vtm_neg_fraction;
    t.lr = lr;
    t.beta1 = beta1;
    t.beta2 = beta2;
    t.adam_eps = adam_eps;
    t.weight_decay = weight_decay;
    t.warmup_steps = warmup_steps;
    t.total_steps = steps;
    return t;
  }

  /// Objective for step k: a finetune run keeps MLM for its first pretrain_steps.
  TrainConfig train_config(std::size_t k) const {
    TrainConfig t = train_config();
    if (mode == "finetune" && k < pretrain_steps) t.weight_mlm = weight_mlm;
    return t;
  }

  CorpusConfig corpus_config() const {
    CorpusConfig c;
    c.train = corpus_train;
    c.val = corpus_val;
    c.test = corpus_test;
    c.seed = corpus_seed;
    c.contrast = contrast;
    c.grid = grid;
    c.frames = frames;
    c.noise = noise;
    c.two_object_prob = two_object_prob;
    return c;
  }
};

namespace detail {

static_assert(std::is_same_v<std::size_t, std::uint64_t>, "seeds share the size_t config slot");
using FieldRef = std::variant<std::size_t*, double*, bool*, int*, std::string*>;

inline std::vector<std::pair<std::string, FieldRef>> config_fields(RunConfig& c) {
  return {{"d", &c.d},
          {"heads", &c.heads},
          {"video_layers", &c.video_layers},
          {"text_layers", &c.text_layers},
          {"cross_layers", &c.cross_layers},
          {"contrastive_dim", &c.contrastive_dim},
          {"ffn_multiplier", &c.ffn_multiplier},
          {"variant", &c.variant},
          {"concat_vtm", &c.concat_vtm},
          {"fine_grained", &c.fine_grained},
          {"fine_normalize", &c.fine_normalize},
          {"mode", &c.mode},
          {"pretrain_steps", &c.pretrain_steps},
          {"weight_c", &c.weight_c},
          {"weight_f", &c.weight_f},
          {"weight_mlm", &c.weight_mlm},
          {"weight_vtm", &c.weight_vtm},
          {"tau", &c.tau},
          {"momentum", &c.momentum},
          {"queue_capacity", &c.queue_capacity},
          {"queue_tokens", &c.queue_tokens},
          {"queue_fine", &c.queue_fine},
          {"mask_prob", &c.mask_prob},
          {"vtm_neg_fraction", &c.vtm_neg_fraction},
          {"lr", &c.lr},
          {"beta1", &c.beta1},
          {"beta2", &c.beta2},
          {"adam_eps", &c.adam_eps},
          {"weight_decay", &c.weight_decay},
          {"warmup_steps", &c.warmup_steps},
          {"steps", &c.steps},
          {"batch_size", &c.batch_size},
          {"corpus_train", &c.corpus_train},
          {"corpus_val", &c.corpus_val},
          {"corpus_test", &c.corpus_test},
          {"corpus_seed", &c.corpus_seed},
          {"contrast", &c.contrast},
          {"grid", &c.grid},
          {"frames", &c.frames},
          {"noise", &c.noise},
          {"two_object_prob", &c.two_object_prob},
          {"seed", &c.seed},
          {"checkpoint_every", &c.checkpoint_every},
          {"rerank_k", &c.rerank_k},
          {"eval_mode", &c.eval_mode},
          {"eval_split", &c.eval_split},
          {"trajectory_layer", &c.trajectory_layer},
          {"precision", &c.precision},
          {"out_dir", &c.out_dir}};
}

}  // namespace detail

inline nlohmann::ordered_json to_json(const RunConfig& cfg) {
  RunConfig copy = cfg;
  nlohmann::ordered_json j;
  for (auto& [key, ref] : detail::config_fields(copy)) {
    std::visit([&, k = key](auto* p) { j[k] = *p; }, ref);
  }
  return j;
}

/// Checks value ranges and flag combinations; throws listing every problem.
inline void validate(const RunConfig& c) {
  std::vector<std::string> bad;
  auto need = [&](bool ok, const std::string& what) {
    if (!ok) bad.push_back(what);
  };
  need(c.variant == "base" || c.variant == "t2w", "variant must be base or t2w");
  need(c.mode == "pretrain" || c.mode == "finetune", "mode must be pretrain or finetune");
  need(c.pretrain_steps == 0 || (c.mode == "finetune" && c.pretrain_steps <= c.steps),
       "pretrain_steps needs finetune mode and at most steps");
  need(c.eval_mode == "vtc_zero_shot" || c.eval_mode == "vtm_reranked", "eval_mode must be vtc_zero_shot or vtm_reranked");
  need(c.eval_split == "train" || c.eval_split == "val" || c.eval_split == "test", "eval_split must be train, val or test");
  need(c.precision == 32 || c.precision == 64, "precision must be 32 or 64");
  need(c.d > 0 && c.heads > 0 && c.d % c.heads == 0, "d must be a positive multiple of heads");
  need(c.cross_layers > 0, "cross_layers must be positive");
  need(c.contrastive_dim > 0 && c.ffn_multiplier > 0, "contrastive_dim and ffn_multiplier must be positive");
  need(c.tau > 0, "tau must be positive");
  need(c.momentum >= 0 && c.momentum <= 1, "momentum must lie in [0, 1]");
  need(c.mask_prob > 0 && c.mask_prob < 1, "mask_prob must lie in (0, 1)");
  need(c.vtm_neg_fraction >= 0 && c.vtm_neg_fraction <= 1, "vtm_neg_fraction must lie in [0, 1]");
  need(c.lr >= 0, "lr must be non-negative");
  need(c.batch_size >= 2, "batch_size must be at least 2");
  need(c.corpus_train >= c.batch_size, "corpus_train must hold at least one batch");
  need(c.rerank_k > 0, "rerank_k must be positive");
  need(c.trajectory_layer < c.cross_layers, "trajectory_layer must name a cross-modal layer");
  for (double w : {c.weight_c, c.weight_f, c.weight_mlm, c.weight_vtm}) need(w >= 0, "loss weights must be non-negative");
  if (!bad.empty()) {
    std::string msg = "invalid config:";
    for (const auto& b : bad) msg += "\n  " + b;
    throw ConfigError(msg);
  }
}

/// Reads a flat JSON object. Unknown keys and type mismatches are all
/// reported together; missing keys keep their defaults.
inline RunConfig parse_run_config(const nlohmann::json& j, RunConfig base = {}) {
  if (!j.is_object()) throw ConfigError("config: top level must be a JSON object");
  auto fields = detail::config_fields(base);
  std::map<std::string, detail::FieldRef> index(fields.begin(), fields.end());
  std::vector<std::string> unknown, wrong;
  for (auto it = j.begin(); it != j.end(); ++it) {
    auto f = index.find(it.key());
    if (f == index.end()) {
      unknown.push_back(it.key());
      continue;
    }
    const auto& v = it.value();
    const bool ok = std::visit(
        [&](auto* p) -> bool {
          using T = std::remove_pointer_t<decltype(p)>;
          if constexpr (std::is_same_v<T, bool>) {
            if (!v.is_boolean()) return false;
          } else if constexpr (std::is_same_v<T, std::string>) {
            if (!v.is_string()) return false;
          } else if constexpr (std::is_same_v<T, double>) {
            if (!v.is_number()) return false;
          } else if constexpr (std::is_same_v<T, int>) {
            if (!v.is_number_integer()) return false;
          } else {
            if (!v.is_number_unsigned() && !(v.is_number_integer() && v.get<std::int64_t>() >= 0)) return false;
          }
          *p = v.get<T>();
          return true;
        },
        f->second);
    if (!ok) wrong.push_back(it.key() + " (got " + std::string(v.type_name()) + ")");
  }
  if (!unknown.empty() || !wrong.empty()) {
    std::string msg = "config errors:";
    for (const auto& k : unknown) msg += "\n  unknown key: " + k;
    for (const auto& k : wrong) msg += "\n  wrong type: " + k;
    throw ConfigError(msg);
  }
  validate(base);
  return base;
}

inline RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("config: cannot open " + path);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("config: " + path + ": " + e.what());
  }
  return parse_run_config(j);
}

/// Ablation ladder: each preset differs from the next by one flag.
///   base    base variant, text-[CLS] VTM, coarse VTC only
///   t2w     t2w variant,  text-[CLS] VTM, coarse VTC only
///   concat  t2w variant,  concatenated VTM, coarse VTC only
///   twbert  t2w variant,  concatenated VTM, coarse + fine VTC
inline const std::vector<std::string>& preset_names() {
  static const std::vector<std::string> names{"base", "t2w", "concat", "twbert"};
  return names;
}

inline RunConfig apply_preset(RunConfig c, const std::string& preset) {
  if (preset == "base") {
    c.variant = "base";
    c.concat_vtm = false;
    c.fine_grained = false;
  } else if (preset == "t2w") {
    c.variant = "t2w";
    c.concat_vtm = false;
    c.fine_grained = false;
  } else if (preset == "concat") {
    c.variant = "t2w";
    c.concat_vtm = true;
    c.fine_grained = false;
  } else if (preset == "twbert") {
    c.variant = "t2w";
    c.concat_vtm = true;
    c.fine_grained = true;
  } else {
    throw ConfigError("unknown preset '" + preset + "' (expected base, t2w, concat or twbert)");
  }
  return c;
}

inline std::string preset_label(const std::string& preset) {
  if (preset == "base") return "Base";
  if (preset == "t2w") return "T2W";
  if (preset == "concat") return "ConCat";
  if (preset == "twbert") return "TW-BERT";
  throw ConfigError("unknown preset '" + preset + "'");
}

}  // namespace twbert
