#pragma once

// Per-tensor sensitivity: quantize exactly one tensor kind (in every layer)
// with static per-tensor abs-max 8-bit scales, keep everything else real,
// and measure how far the logits move from the float reference.

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "quamba/calibration.hpp"
#include "quamba/model.hpp"
#include "quamba/quant.hpp"
#include "quamba/ssm.hpp"

namespace quamba {

inline const std::vector<std::string>& weight_site_names() {
  static const std::vector<std::string> names{"in_proj", "conv_weight", "x_proj_B", "x_proj_C", "dt_down",
                                              "dt_up",   "dt_bias",     "A",        "D",        "out_proj"};
  return names;
}

struct SensitivityEntry {
  std::string site;
  std::string kind;  // "activation" or "weight"
  double rel_mse = 0.0;
  double cosine_distance = 0.0;
};

struct SensitivityOptions {
  int bits = kDefaultBits;
  std::size_t num_samples = 32;
  std::uint64_t seed = kDefaultSeed;
};

namespace detail {

struct Deviation {
  double sq = 0.0, ref_sq = 0.0, dot = 0.0, q_sq = 0.0;

  void add(const Matrix& q, const Matrix& ref) {
    for (std::size_t i = 0; i < ref.size(); ++i) {
      const double a = q.flat()[i], b = ref.flat()[i];
      sq += (a - b) * (a - b);
      ref_sq += b * b;
      dot += a * b;
      q_sq += a * a;
    }
  }

  SensitivityEntry entry(std::string site, std::string kind) const {
    SensitivityEntry e{std::move(site), std::move(kind), 0.0, 0.0};
    e.rel_mse = ref_sq > 0.0 ? sq / ref_sq : (sq > 0.0 ? 1.0 : 0.0);
    if (q_sq > 0.0 && ref_sq > 0.0) {
      e.cosine_distance = std::max(0.0, 1.0 - std::clamp(dot / std::sqrt(q_sq * ref_sq), -1.0, 1.0));
    } else {
      e.cosine_distance = q_sq == ref_sq ? 0.0 : 1.0;
    }
    return e;
  }
};

inline void fake_quantize_weight(Matrix& w, int bits) { w = fake_quantize(w, compute_scale_absmax(w.flat(), bits), bits); }

inline void fake_quantize_weight(std::vector<float>& v, int bits) {
  Matrix m(1, v.size(), v);
  fake_quantize_weight(m, bits);
  v = m.storage();
}

inline void quantize_weight_kind(SSMParams& p, const std::string& name, int bits) {
  if (name == "in_proj") fake_quantize_weight(p.in_proj, bits);
  else if (name == "conv_weight") fake_quantize_weight(p.conv_weight, bits);
  else if (name == "x_proj_B") fake_quantize_weight(p.x_proj_B, bits);
  else if (name == "x_proj_C") fake_quantize_weight(p.x_proj_C, bits);
  else if (name == "dt_down") fake_quantize_weight(p.dt_down, bits);
  else if (name == "dt_up") fake_quantize_weight(p.dt_up, bits);
  else if (name == "dt_bias") fake_quantize_weight(p.dt_bias, bits);
  else if (name == "A") fake_quantize_weight(p.A, bits);
  else if (name == "D") fake_quantize_weight(p.D, bits);
  else if (name == "out_proj") fake_quantize_weight(p.out_proj, bits);
  else throw Error("unknown weight site '" + name + "'");
}

}  // namespace detail

// Ranked by rel_mse, largest first; ties broken by site name.
inline std::vector<SensitivityEntry> sensitivity_scan(const FloatModel& model, const Corpus& corpus,
                                                      const std::vector<std::string>& sites,
                                                      const SensitivityOptions& opt = {}) {
  if (corpus.empty()) throw Error("sensitivity: empty corpus");
  check_corpus(corpus, model.config.vocab_size);
  CalibrationConfig cc;
  cc.bits = opt.bits;
  cc.schemes.clear();
  // Static scales come from the whole corpus; deviation is measured on a
  // seeded sample of it.
  std::vector<std::size_t> all(corpus.size());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
  const ScaleSet scales = finalize(collect_stats(model, corpus, all, cc), cc, model.config.n_layers);
  const auto idx = sample_indices(corpus.size(), opt.num_samples, opt.seed);

  std::vector<Matrix> reference;
  for (std::size_t i : idx) reference.push_back(forward(model, corpus.sequences[i]));

  const auto& weights = weight_site_names();
  std::vector<SensitivityEntry> out;
  for (const auto& site : sites) {
    detail::Deviation dev;
    if (std::find(weights.begin(), weights.end(), site) != weights.end()) {
      FloatModel m = model;
      for (auto& p : m.layers) detail::quantize_weight_kind(p, site, opt.bits);
      for (std::size_t k = 0; k < idx.size(); ++k) dev.add(forward(m, corpus.sequences[idx[k]]), reference[k]);
      out.push_back(dev.entry(site, "weight"));
      continue;
    }
    bool known = false;
    for (Site s : kAllSites) known = known || site_name(s) == site;
    if (!known) throw Error("unknown sensitivity site '" + site + "'");
    const SiteHook hook = [&](std::size_t layer, Site s, Matrix& m) {
      if (site_name(s) != site) return;
      m = fake_quantize(m, static_cast<float>(scales.at(layer_key(layer, site)).scale), opt.bits);
    };
    for (std::size_t k = 0; k < idx.size(); ++k) {
      dev.add(forward(model, corpus.sequences[idx[k]], hook), reference[k]);
    }
    out.push_back(dev.entry(site, "activation"));
  }
  std::stable_sort(out.begin(), out.end(), [](const SensitivityEntry& a, const SensitivityEntry& b) {
    if (a.rel_mse != b.rel_mse) return a.rel_mse > b.rel_mse;
    return a.site < b.site;
  });
  return out;
}

// Every activation site followed by every weight kind.
inline std::vector<std::string> all_sensitivity_sites() {
  std::vector<std::string> out;
  for (Site s : kAllSites) out.emplace_back(site_name(s));
  for (const auto& w : weight_site_names()) out.push_back(w);
  return out;
}

inline nlohmann::json to_json(const std::vector<SensitivityEntry>& entries) {
  nlohmann::json arr = nlohmann::json::array();
  for (std::size_t i = 0; i < entries.size(); ++i) {
    const auto& e = entries[i];
    arr.push_back({{"rank", i + 1},
                   {"site", e.site},
                   {"kind", e.kind},
                   {"rel_mse", e.rel_mse},
                   {"cosine_distance", e.cosine_distance}});
  }
  return arr;
}

}  // namespace quamba
