#pragma once

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "twbert/objectives.hpp"

namespace twbert {

/// T2W weights of one query word in one cross-modal layer.
struct AttentionExport {
  std::size_t sample_id = 0;
  std::size_t word_index = 0;  // 0-based caption position
  std::size_t layer = 0;
  std::size_t frames = 0, grid = 0, heads = 0;
  std::string word;
  std::vector<double> step1;  // heads x frames x grid^2
  std::vector<double> step2;  // heads x frames

  std::size_t cells() const { return grid * grid; }
  double step1_at(std::size_t h, std::size_t t, std::size_t cell) const {
    return step1[(h * frames + t) * cells() + cell];
  }

  /// Head-averaged grid of frame t, row-major.
  std::vector<double> frame_grid(std::size_t t) const {
    std::vector<double> g(cells(), 0.0);
    for (std::size_t h = 0; h < heads; ++h)
      for (std::size_t c = 0; c < cells(); ++c) g[c] += step1_at(h, t, c) / static_cast<double>(heads);
    return g;
  }
};

template <Scalar Real>
AttentionExport collect_attention(const TwBertModel<Real>& model, const PairSample<Real>& sample,
                                  std::size_t word_index, std::size_t layer = 0, const std::string& word = "") {
  if (model.config.variant != Variant::T2W) throw ContractError("export-attention: model has no T2W layers");
  if (word_index >= sample.caption.size()) {
    throw ContractError("export-attention: word index " + std::to_string(word_index) + " outside caption of " +
                        std::to_string(sample.caption.size()) + " words");
  }
  if (layer >= model.cross.size()) throw ContractError("export-attention: layer " + std::to_string(layer) + " out of range");
  NoGradGuard guard;
  auto e = encode_pair(model.encoders, sample);
  auto fused = cross_modal_encoder(e.video, e.text, model.cross, /*record=*/true);
  AttentionExport out;
  out.sample_id = sample.id;
  out.word_index = word_index;
  out.layer = layer;
  out.word = word;
  out.frames = sample.video.geometry.frames;
  out.grid = sample.video.geometry.grid;
  out.heads = model.config.encoder.heads;
  const std::size_t q = word_index + 1;
  out.step1.assign(out.heads * out.frames * out.cells(), 0.0);
  for (const auto& r : fused.records) {
    if (r.layer != static_cast<int>(layer)) continue;
    if (r.label == "t2w_step1") {
      const auto t = static_cast<std::size_t>(r.frame);
      for (std::size_t h = 0; h < out.heads; ++h)
        for (std::size_t c = 0; c < out.cells(); ++c)
          out.step1[(h * out.frames + t) * out.cells() + c] = static_cast<double>(r.at(h, q, c));
    } else if (r.label == "t2w_step2") {
      for (std::size_t h = 0; h < out.heads; ++h)
        for (std::size_t t = 0; t < out.frames; ++t) out.step2.push_back(static_cast<double>(r.at(h, q, t)));
    }
  }
  return out;
}

/// Structured text format: a header of "key value" lines, then one block per
/// (head, frame) of step-1 weights as `grid` rows of `grid` values, then one
/// row of step-2 frame weights per head. Values are printed with 17
/// significant digits so they read back exactly.
inline void write_attention_text(std::ostream& os, const AttentionExport& a) {
  char buf[32];
  auto num = [&](double v) {
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return std::string(buf);
  };
  os << "twbert-attention 1\n";
  os << "sample " << a.sample_id << "\nword_index " << a.word_index << "\nword " << (a.word.empty() ? "-" : a.word)
     << "\nlayer " << a.layer << "\nframes " << a.frames << "\ngrid " << a.grid << "\nheads " << a.heads << "\n";
  for (std::size_t h = 0; h < a.heads; ++h) {
    for (std::size_t t = 0; t < a.frames; ++t) {
      os << "step1 head " << h << " frame " << t << "\n";
      for (std::size_t y = 0; y < a.grid; ++y) {
        for (std::size_t x = 0; x < a.grid; ++x) os << (x ? " " : "") << num(a.step1_at(h, t, y * a.grid + x));
        os << "\n";
      }
    }
  }
  for (std::size_t h = 0; h < a.heads; ++h) {
    os << "step2 head " << h << "\n";
    for (std::size_t t = 0; t < a.frames; ++t) os << (t ? " " : "") << num(a.step2[h * a.frames + t]);
    os << "\n";
  }
}

inline AttentionExport read_attention_text(std::istream& is) {
  AttentionExport a;
  std::string key;
  int version = 0;
  if (!(is >> key >> version) || key != "twbert-attention" || version != 1) {
    throw FormatError("attention file: missing 'twbert-attention 1' header");
  }
  auto expect = [&](const char* name, auto& value) {
    if (!(is >> key) || key != name || !(is >> value)) throw FormatError(std::string("attention file: expected ") + name);
  };
  expect("sample", a.sample_id);
  expect("word_index", a.word_index);
  expect("word", a.word);
  if (a.word == "-") a.word.clear();
  expect("layer", a.layer);
  expect("frames", a.frames);
  expect("grid", a.grid);
  expect("heads", a.heads);
  a.step1.assign(a.heads * a.frames * a.cells(), 0.0);
  std::string w1, w2;
  std::size_t h = 0, t = 0;
  for (std::size_t hh = 0; hh < a.heads; ++hh) {
    for (std::size_t tt = 0; tt < a.frames; ++tt) {
      if (!(is >> key >> w1 >> h >> w2 >> t) || key != "step1" || h != hh || t != tt) {
        throw FormatError("attention file: malformed step1 block header");
      }
      for (std::size_t c = 0; c < a.cells(); ++c) {
        if (!(is >> a.step1[(hh * a.frames + tt) * a.cells() + c])) throw FormatError("attention file: short step1 block");
      }
    }
  }
  a.step2.assign(a.heads * a.frames, 0.0);
  for (std::size_t hh = 0; hh < a.heads; ++hh) {
    if (!(is >> key >> w1 >> h) || key != "step2" || h != hh) throw FormatError("attention file: malformed step2 header");
    for (std::size_t tt = 0; tt < a.frames; ++tt) {
      if (!(is >> a.step2[hh * a.frames + tt])) throw FormatError("attention file: short step2 row");
    }
  }
  return a;
}

/// Plain-text graymap of a grid scaled so its largest weight maps to 255.
inline void write_pgm(std::ostream& os, const std::vector<double>& grid_values, std::size_t grid) {
  const double peak = *std::max_element(grid_values.begin(), grid_values.end());
  os << "P2\n" << grid << " " << grid << "\n255\n";
  for (std::size_t y = 0; y < grid; ++y) {
    for (std::size_t x = 0; x < grid; ++x) {
      const double v = peak > 0 ? grid_values[y * grid + x] / peak : 0.0;
      os << (x ? " " : "") << static_cast<int>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
    }
    os << "\n";
  }
}

/// Writes attention.txt plus frame_<t>.pgm (head-averaged) into `dir`.
/// Returns the written paths.
inline std::vector<std::filesystem::path> write_attention_export(const std::filesystem::path& dir,
                                                                 const AttentionExport& a) {
  std::filesystem::create_directories(dir);
  std::vector<std::filesystem::path> paths;
  {
    auto p = dir / "attention.txt";
    std::ofstream os(p);
    if (!os) throw FormatError("cannot write " + p.string());
    write_attention_text(os, a);
    paths.push_back(p);
  }
  for (std::size_t t = 0; t < a.frames; ++t) {
    auto p = dir / ("frame_" + std::to_string(t) + ".pgm");
    std::ofstream os(p);
    if (!os) throw FormatError("cannot write " + p.string());
    write_pgm(os, a.frame_grid(t), a.grid);
    paths.push_back(p);
  }
  return paths;
}

}  // namespace twbert
