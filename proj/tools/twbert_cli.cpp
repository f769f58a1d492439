// Command-line entry point: pretrain, eval-retrieval, ablate,
// export-attention, gen-corpus, grad-check.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

#include "twbert/harness/attention_export.hpp"
#include "twbert/harness/model_grad_check.hpp"
#include "twbert/harness/runner.hpp"

namespace fs = std::filesystem;
using namespace twbert;

namespace {

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  int precision = 64;
};

RunConfig resolve(const Common& c) {
  RunConfig cfg = c.config.empty() ? RunConfig{} : load_run_config(c.config);
  if (c.seed) cfg.seed = *c.seed;
  if (!c.out.empty()) cfg.out_dir = c.out;
  cfg.precision = c.precision;
  validate(cfg);
  return cfg;
}

void write_text(const fs::path& p, const std::string& s) {
  fs::create_directories(p.parent_path().empty() ? fs::path(".") : p.parent_path());
  std::ofstream os(p, std::ios::trunc);
  if (!os) throw FormatError("cannot write " + p.string());
  os << s;
}

template <typename Real>
int run_pretrain(const RunConfig& cfg, const std::string& resume, bool quiet) {
  const std::size_t every = std::max<std::size_t>(1, cfg.steps / 20);
  auto res = cmd_pretrain<Real>(cfg, cfg.out_dir, resume, [&](const LossRow& r) {
    if (!quiet && (r.step % every == 0 || r.step + 1 == cfg.steps)) {
      std::printf("step %6zu  l_c %.4f  l_f %.4f  l_mlm %.4f  l_vtm %.4f  total %.4f\n", r.step, r.loss.l_c, r.loss.l_f,
                  r.loss.l_mlm, r.loss.l_vtm, r.loss.total);
    }
  });
  std::printf("checkpoint: %s\n", res.checkpoint.string().c_str());
  return 0;
}

template <typename Real>
int run_eval(const std::string& checkpoint, const std::string& split, const std::string& mode, std::size_t k,
             const std::string& direction, const std::string& out) {
  std::vector<RetrievalReport> reports;
  for (const char* dir : {"text_to_video", "video_to_text"}) {
    if (direction == "both" || direction == dir) reports.push_back(cmd_eval_retrieval<Real>(checkpoint, split, mode, k, dir));
  }
  if (reports.empty()) throw ConfigError("unknown direction '" + direction + "'");
  const std::string md = report_markdown(reports);
  std::cout << md;
  if (!out.empty()) {
    write_text(fs::path(out) / "report.md", md);
    std::ostringstream csv;
    csv << "mode,direction,r1,r5,r10,medr\n";
    std::ostringstream ranks;
    ranks << "direction,query,rank\n";
    for (const auto& r : reports) {
      csv << r.mode << ',' << r.direction << ',' << r.r1 << ',' << r.r5 << ',' << r.r10 << ',' << r.medr << '\n';
      for (std::size_t q = 0; q < r.ranks.size(); ++q) ranks << r.direction << ',' << q << ',' << r.ranks[q] << '\n';
    }
    write_text(fs::path(out) / "report.csv", csv.str());
    write_text(fs::path(out) / "ranks.csv", ranks.str());
  }
  return 0;
}

template <typename Real>
int run_ablate(const RunConfig& cfg, const std::vector<std::string>& variants, const std::vector<std::uint64_t>& seeds) {
  auto rows = cmd_ablate<Real>(cfg, variants, seeds, fs::path(cfg.out_dir) / "runs");
  const std::string md = ablation_markdown(rows);
  std::cout << md;
  write_text(fs::path(cfg.out_dir) / "ablation.md", md);
  write_text(fs::path(cfg.out_dir) / "ablation.csv", ablation_csv(rows));
  return 0;
}

template <typename Real>
int run_export(const std::string& checkpoint, std::size_t sample_id, std::size_t word, std::size_t layer,
               const std::string& out) {
  RunConfig cfg;
  auto model = load_model<Real>(checkpoint, &cfg);
  Corpus corpus = generate_corpus(cfg.corpus_config());
  const CorpusItem* item = nullptr;
  for (const auto* split : {&corpus.train, &corpus.val, &corpus.test})
    for (const auto& it : *split)
      if (it.id == sample_id) item = &it;
  if (!item) throw ContractError("export-attention: no sample with id " + std::to_string(sample_id));
  PairSample<Real> p{item->id, item->video.input<Real>(), item->caption.ids};
  const std::string token = word < p.caption.size() ? caption_vocabulary().token(p.caption[word]) : "";
  auto a = collect_attention(*model, p, word, layer, token);
  for (const auto& path : write_attention_export(out, a)) std::printf("%s\n", path.string().c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Trajectory-to-word video-language model: training and evaluation harness"};
  app.require_subcommand(1);
  Common common;
  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", common.config, "flat JSON run configuration");
    sub->add_option("--seed", common.seed, "override the configured seed");
    sub->add_option("--out", common.out, "output directory");
    sub->add_option("--precision", common.precision, "floating point width")->check(CLI::IsMember({32, 64}));
  };

  auto* pretrain = app.add_subcommand("pretrain", "train a model and write loss.csv and a checkpoint");
  add_common(pretrain);
  std::string resume;
  bool quiet = false;
  pretrain->add_option("--resume", resume, "continue from this checkpoint directory");
  pretrain->add_flag("--quiet", quiet, "suppress per-step progress");

  auto* eval = app.add_subcommand("eval-retrieval", "text-to-video and video-to-text retrieval metrics");
  add_common(eval);
  std::string checkpoint, split = "test", mode = "vtc_zero_shot", direction = "both";
  std::size_t k = 16;
  eval->add_option("--checkpoint", checkpoint, "checkpoint directory")->required();
  eval->add_option("--split", split, "corpus split")->check(CLI::IsMember({"train", "val", "test"}));
  eval->add_option("--mode", mode, "scoring mode")->check(CLI::IsMember({"vtc_zero_shot", "vtm_reranked"}));
  eval->add_option("--k", k, "VTM rerank depth");
  eval->add_option("--direction", direction, "text_to_video, video_to_text or both");

  auto* ablate = app.add_subcommand("ablate", "train each variant per seed and tabulate retrieval");
  add_common(ablate);
  std::vector<std::string> variants = preset_names();
  std::vector<std::uint64_t> seeds{0};
  ablate->add_option("--variants", variants, "subset of base,t2w,concat,twbert")->delimiter(',');
  ablate->add_option("--seeds", seeds, "comma-separated seeds")->delimiter(',');

  auto* exporter = app.add_subcommand("export-attention", "write T2W attention grids for one word");
  add_common(exporter);
  std::size_t sample = 0, word = 1, layer = 0;
  exporter->add_option("--checkpoint", checkpoint, "checkpoint directory")->required();
  exporter->add_option("--sample", sample, "corpus sample id");
  exporter->add_option("--word", word, "0-based caption word index");
  exporter->add_option("--layer", layer, "cross-modal layer");

  auto* gen = app.add_subcommand("gen-corpus", "write the synthetic corpus as JSON lines");
  add_common(gen);

  auto* gc = app.add_subcommand("grad-check", "finite-difference check of every parameter and loss");
  add_common(gc);
  double tol = 1e-4, step = 1e-5;
  gc->add_option("--tol", tol, "maximum relative error");
  gc->add_option("--step", step, "central difference step");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*pretrain) {
      RunConfig cfg = resolve(common);
      return cfg.precision == 64 ? run_pretrain<double>(cfg, resume, quiet) : run_pretrain<float>(cfg, resume, quiet);
    }
    if (*eval) {
      return common.precision == 64 ? run_eval<double>(checkpoint, split, mode, k, direction, common.out)
                                    : run_eval<float>(checkpoint, split, mode, k, direction, common.out);
    }
    if (*ablate) {
      RunConfig cfg = resolve(common);
      return cfg.precision == 64 ? run_ablate<double>(cfg, variants, seeds) : run_ablate<float>(cfg, variants, seeds);
    }
    if (*exporter) {
      const std::string out = common.out.empty() ? "attention" : common.out;
      return common.precision == 64 ? run_export<double>(checkpoint, sample, word, layer, out)
                                    : run_export<float>(checkpoint, sample, word, layer, out);
    }
    if (*gen) {
      RunConfig cfg = resolve(common);
      Corpus corpus = generate_corpus(cfg.corpus_config());
      for (const char* name : {"train", "val", "test"}) {
        const fs::path p = fs::path(cfg.out_dir) / (std::string(name) + ".jsonl");
        std::ostringstream os;
        write_jsonl(os, corpus.split(name));
        write_text(p, os.str());
        std::printf("%s: %zu records\n", p.string().c_str(), corpus.split(name).size());
      }
      return 0;
    }
    if (*gc) {
      if (common.precision != 64) throw ConfigError("grad-check requires --precision 64");
      GradCheckSetup setup;
      if (common.seed) setup.seed = *common.seed;
      bool ok = true;
      for (const auto& [name, report] : model_grad_check(setup, step, tol)) {
        std::printf("%-6s max rel error %.3e  %s\n", name.c_str(), report.max_error(), report.passed() ? "ok" : "FAIL");
        if (!report.passed()) std::cout << report.to_string();
        ok &= report.passed();
      }
      return ok ? 0 : 1;
    }
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  }
  return 0;
}
