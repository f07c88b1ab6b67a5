#pragma once

// Static scale collection over a calibration corpus.
//
// Site keys are "layers.<L>.<site>" with the site names from site_name()
// plus "y_had", the Hadamard-transformed gated output. Every site whose
// scheme is not abs-max also gets an abs-max companion "<key>.absmax", so a
// single scale file can drive every quantization mode.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <random>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "quamba/error.hpp"
#include "quamba/hadamard.hpp"
#include "quamba/model.hpp"
#include "quamba/qblock.hpp"
#include "quamba/quant.hpp"
#include "quamba/scaleset.hpp"
#include "quamba/ssm.hpp"
#include "quamba/store.hpp"

namespace quamba {

inline constexpr std::size_t kPoolCap = std::size_t{1} << 22;
inline constexpr std::size_t kDefaultCalibrationSamples = 512;
inline constexpr std::uint64_t kDefaultSeed = 42;
inline constexpr std::string_view kHadamardSite = "y_had";
inline constexpr std::string_view kAbsmaxSuffix = ".absmax";

struct CalibrationConfig {
  int bits = kDefaultBits;
  std::size_t num_samples = kDefaultCalibrationSamples;
  std::uint64_t seed = kDefaultSeed;
  // Scheme per unprefixed site name; unlisted sites use abs-max.
  std::map<std::string, QuantScheme> schemes{{"x", StaticSymmetricPercentile{kDefaultPercentile}}};

  QuantScheme scheme_for(std::string_view site) const {
    auto it = schemes.find(std::string(site));
    return it == schemes.end() ? QuantScheme{StaticSymmetricMax{}} : it->second;
  }

  static CalibrationConfig with_percentile(double p) {
    check_percentile(p);
    CalibrationConfig c;
    c.schemes["x"] = StaticSymmetricPercentile{p};
    return c;
  }
};

// All activation site names observed per layer.
inline std::vector<std::string> calibration_site_names() {
  std::vector<std::string> out;
  for (Site s : kAllSites) out.emplace_back(site_name(s));
  out.emplace_back(kHadamardSite);
  return out;
}

inline std::string strip_layer_prefix(std::string_view key) {
  // "layers.<L>.<site>" -> "<site>"
  const auto a = key.find('.');
  const auto b = a == std::string_view::npos ? a : key.find('.', a + 1);
  return b == std::string_view::npos ? std::string(key) : std::string(key.substr(b + 1));
}

inline std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 14695981039346656037ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

struct SiteStats {
  float absmax = 0.0f;
  std::uint64_t count = 0;  // observed values
  bool pooled = false;
  std::vector<float> pool;  // signed values; exact until kPoolCap, then a reservoir
  std::mt19937_64 rng;

  void observe(std::span<const float> values) {
    for (float v : values) {
      if (!std::isfinite(v)) throw Error("non-finite activation during calibration");
      absmax = std::max(absmax, std::fabs(v));
      ++count;
      if (!pooled) continue;
      if (pool.size() < kPoolCap) {
        pool.push_back(v);
      } else {
        const std::uint64_t j = rng() % count;
        if (j < kPoolCap) pool[j] = v;
      }
    }
  }
};

struct CalibrationStats {
  std::map<std::string, SiteStats> sites;
  std::size_t sequences = 0;

  void observe(const std::string& key, std::span<const float> values, bool pooled) {
    auto [it, inserted] = sites.try_emplace(key);
    if (inserted) {
      it->second.pooled = pooled;
      it->second.rng.seed(fnv1a(key));
    }
    it->second.observe(values);
  }

  // Shard merge: abs-max is exact; pools are concatenated and sorted so the
  // result does not depend on shard order.
  void merge(const CalibrationStats& other) {
    for (const auto& [key, o] : other.sites) {
      auto [it, inserted] = sites.try_emplace(key);
      auto& s = it->second;
      if (inserted) {
        s.pooled = o.pooled;
        s.rng.seed(fnv1a(key));
      }
      s.absmax = std::max(s.absmax, o.absmax);
      s.count += o.count;
      s.pool.insert(s.pool.end(), o.pool.begin(), o.pool.end());
      std::sort(s.pool.begin(), s.pool.end());
      if (s.pool.size() > kPoolCap) {
        // Deterministic thinning to the cap, evenly spaced over the sorted pool.
        std::vector<float> thin(kPoolCap);
        for (std::size_t i = 0; i < kPoolCap; ++i) thin[i] = s.pool[i * s.pool.size() / kPoolCap];
        s.pool = std::move(thin);
      }
    }
    sequences += other.sequences;
  }
};

// Indices of min(k, n) sequences drawn without replacement, in ascending order.
inline std::vector<std::size_t> sample_indices(std::size_t n, std::size_t k, std::uint64_t seed) {
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  k = std::min(k, n);
  std::mt19937_64 rng(seed);
  for (std::size_t i = 0; i < k; ++i) {
    const std::size_t j = i + static_cast<std::size_t>(rng() % (n - i));
    std::swap(idx[i], idx[j]);
  }
  idx.resize(k);
  std::sort(idx.begin(), idx.end());
  return idx;
}

inline bool needs_pool(const QuantScheme& s) {
  return std::holds_alternative<StaticSymmetricPercentile>(s) || std::holds_alternative<StaticAsymmetricPercentile>(s);
}

// Float forward over each listed sequence with observation hooks at every site.
inline CalibrationStats collect_stats(const FloatModel& model, const Corpus& corpus,
                                      std::span<const std::size_t> indices, const CalibrationConfig& cfg) {
  const HadamardPlan plan = plan_for_dim(model.config.block().d_inner());
  CalibrationStats stats;
  const SiteHook hook = [&](std::size_t layer, Site site, Matrix& m) {
    const auto name = site_name(site);
    stats.observe(layer_key(layer, name), m.flat(), needs_pool(cfg.scheme_for(name)));
    if (site == Site::y) {
      const Matrix yh = apply_hadamard_rows(plan, m);
      stats.observe(layer_key(layer, kHadamardSite), yh.flat(), needs_pool(cfg.scheme_for(kHadamardSite)));
    }
  };
  for (std::size_t i : indices) {
    if (i >= corpus.size()) throw Error("calibration: sequence index out of range");
    if (corpus.sequences[i].empty()) continue;
    forward(model, corpus.sequences[i], hook);
    ++stats.sequences;
  }
  return stats;
}

inline ScaleEntry finalize_entry(const SiteStats& s, const QuantScheme& scheme, int bits) {
  struct Visitor {
    const SiteStats& s;
    int bits;
    ScaleEntry operator()(const StaticSymmetricMax& k) const {
      return {s.absmax == 0.0f ? kScaleFloor : s.absmax / static_cast<float>(qmax(bits)), 0, k};
    }
    ScaleEntry operator()(const StaticSymmetricPercentile& k) const {
      std::vector<float> mags(s.pool.size());
      for (std::size_t i = 0; i < mags.size(); ++i) mags[i] = std::fabs(s.pool[i]);
      return {compute_scale_percentile(mags, k.p, bits), 0, k};
    }
    // Dynamic scales are recomputed per tensor at run time; the entry keeps
    // the calibration abs-max as a reference value.
    ScaleEntry operator()(const DynamicSymmetricMax& k) const { return {(*this)(StaticSymmetricMax{}).scale, 0, k}; }
    // Log2 codes carry no scale.
    ScaleEntry operator()(const StaticLog2& k) const { return {1.0, 0, k}; }
    ScaleEntry operator()(const StaticAsymmetricPercentile& k) const {
      const QTensor q = quantize_asymmetric_percentile(Matrix(1, s.pool.size(), s.pool), k.p, bits);
      return {q.scale, q.zero_point, k};
    }
  };
  if (s.count == 0) throw Error("finalize: site has no observations");
  return std::visit(Visitor{s, bits}, scheme);
}

// Turns stats into a ScaleSet. Every expected site of every layer must have
// been visited.
inline ScaleSet finalize(const CalibrationStats& stats, const CalibrationConfig& cfg, std::size_t n_layers) {
  if (stats.sequences == 0 || stats.sites.empty()) throw Error("finalize: no calibration data observed");
  ScaleSet set;
  set.bits = cfg.bits;
  for (std::size_t l = 0; l < n_layers; ++l) {
    for (const auto& name : calibration_site_names()) {
      const auto key = layer_key(l, name);
      auto it = stats.sites.find(key);
      if (it == stats.sites.end() || it->second.count == 0) {
        throw Error("finalize: site '" + key + "' was never visited");
      }
      const QuantScheme scheme = cfg.scheme_for(name);
      set.set(key, finalize_entry(it->second, scheme, cfg.bits));
      if (!std::holds_alternative<StaticSymmetricMax>(scheme)) {
        set.set(key + std::string(kAbsmaxSuffix), finalize_entry(it->second, StaticSymmetricMax{}, cfg.bits));
      }
    }
  }
  return set;
}

inline ScaleSet run_calibration(const FloatModel& model, const Corpus& corpus, const CalibrationConfig& cfg = {}) {
  if (corpus.empty()) throw Error("calibration: empty corpus");
  check_bits(cfg.bits);
  if (cfg.num_samples == 0) throw Error("calibration: num_samples must be positive");
  check_corpus(corpus, model.config.vocab_size);
  const auto idx = sample_indices(corpus.size(), cfg.num_samples, cfg.seed);
  return finalize(collect_stats(model, corpus, idx, cfg), cfg, model.config.n_layers);
}

namespace detail {

// Picks the entry bound to a site under a mode: modes without percentile
// clipping use abs-max everywhere.
inline const ScaleEntry& bound_entry(const ScaleSet& set, std::size_t layer, std::string_view site, Mode mode) {
  const auto key = layer_key(layer, site);
  const bool want_percentile = site == "x" && uses_percentile(mode);
  if (want_percentile) {
    const auto& e = set.at(key);
    if (!std::holds_alternative<StaticSymmetricPercentile>(e.scheme)) {
      throw Error("mode '" + std::string(mode_name(mode)) + "' needs a percentile scale at '" + key + "'");
    }
    return e;
  }
  const auto companion = key + std::string(kAbsmaxSuffix);
  const auto& e = set.contains(companion) ? set.at(companion) : set.at(key);
  if (!std::holds_alternative<StaticSymmetricMax>(e.scheme) &&
      !std::holds_alternative<StaticSymmetricPercentile>(e.scheme)) {
    throw Error("site '" + key + "' has scheme " + scheme_name(e.scheme) +
                ", which the quantized block does not support");
  }
  return e;
}

}  // namespace detail

// Builds the quantized model: per-tensor abs-max weights, static activation
// scales from `set`, Hadamard fusion into out_proj for out-had and quamba.
// The returned model embeds exactly the scales it uses.
inline QuantizedModel quantize_model(const FloatModel& fm, const ScaleSet& set, Mode mode) {
  fm.validate();
  if (set.bits != fm.config.bits) {
    throw Error("scale set bit width " + std::to_string(set.bits) + " does not match model bit width " +
                std::to_string(fm.config.bits));
  }
  QuantizedModel qm;
  qm.config = fm.config;
  qm.mode = mode;
  qm.embedding = fm.embedding;
  qm.norm_f = fm.norm_f;
  qm.scales.bits = set.bits;
  for (std::size_t l = 0; l < fm.layers.size(); ++l) {
    const std::string y_site = y_site_name(mode);
    auto bind = [&](std::string_view site) {
      const ScaleEntry& e = detail::bound_entry(set, l, site, mode);
      const float s = static_cast<float>(e.scale);
      qm.scales.set(layer_key(l, site), ScaleEntry{static_cast<double>(s), 0, e.scheme});
      return s;
    };
    ActivationScales a;
    a.in = bind("in");
    a.in_proj_x = bind("in_proj.x");
    a.x = bind("x");
    a.B = bind("B");
    a.C = bind("C");
    a.dt_low = bind("dt_proj.low");
    a.dt = bind("dt");
    a.y = bind(y_site);
    QuantizedBlock qb = quantize_block(fm.layers[l], a, mode, set.bits);
    const std::pair<const char*, const QTensor*> weights[] = {
        {"in_proj", &qb.in_proj}, {"conv_weight", &qb.conv_weight}, {"x_proj_B", &qb.x_proj_B},
        {"x_proj_C", &qb.x_proj_C}, {"dt_down", &qb.dt_down}, {"dt_up", &qb.dt_up},
        {"dt_bias", &qb.dt_bias}, {"A", &qb.A}, {"D", &qb.D}, {"out_proj", &qb.out_proj}};
    for (const auto& [name, q] : weights) {
      qm.scales.set(layer_key(l, name), ScaleEntry{static_cast<double>(q->scale), 0, StaticSymmetricMax{}});
    }
    qm.layers.push_back(std::move(qb));
  }
  return qm;
}

}  // namespace quamba
