#pragma once

// Subcommand bodies for the quamba tool. Each returns its JSON report and
// writes any human-readable table to `log`. Input problems throw
// quamba::Error (exit 2); property failures set CommandResult::status = 1.

#include <cstdio>
#include <ostream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "quamba.hpp"

namespace quamba::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitViolation = 1;
inline constexpr int kExitUsage = 2;

struct CommandResult {
  nlohmann::json report;
  int status = kExitOk;
};

struct InitToyArgs {
  ModelConfig config;
  std::uint64_t seed = kDefaultSeed;
  std::string out;
  std::string corpus_out;  // defaults to <out>.jsonl
  bool inject_outliers = false;
  CorpusOptions corpus;
};

struct CalibrateArgs {
  std::string model, corpus, out_scales;
  std::size_t samples = kDefaultCalibrationSamples;
  double percentile = kDefaultPercentile;
  std::uint64_t seed = kDefaultSeed;
};

struct QuantizeArgs {
  std::string model, scales, out;
  Mode mode = Mode::full;
};

struct EvalArgs {
  std::string model, reference, corpus;
};

struct SweepArgs {
  std::string model, corpus, eval_corpus;
  std::vector<double> percentiles{99.0, 99.9, 99.99, 99.999};
  std::size_t samples = kDefaultCalibrationSamples;
  std::uint64_t seed = kDefaultSeed;
  Mode mode = Mode::full;
};

struct BoundArgs {
  BoundParams params;
  std::size_t trials = 1000;
  std::uint64_t seed = kDefaultSeed;
};

struct SensitivityArgs {
  std::string model, corpus;
  SensitivityOptions options;
};

namespace detail {

inline std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

inline FloatModel load_float(const std::string& path) {
  Model m = load_model(path);
  auto* fm = std::get_if<FloatModel>(&m);
  if (fm == nullptr) throw Error("'" + path + "' is already quantized; a float model is required");
  return std::move(*fm);
}

inline Corpus load_nonempty_corpus(const std::string& path, std::size_t vocab) {
  Corpus c = load_corpus(path);
  std::size_t predictions = 0;
  for (const auto& s : c.sequences) predictions += s.empty() ? 0 : s.size() - 1;
  if (c.empty() || predictions == 0) throw Error("empty corpus '" + path + "'");
  check_corpus(c, vocab);
  return c;
}

inline nlohmann::json eval_json(const EvalReport& r) {
  nlohmann::json j{{"perplexity", r.perplexity}, {"tokens", r.tokens}};
  if (r.has_reference) {
    j["mse"] = r.mse;
    j["cosine"] = r.cosine;
  }
  return j;
}

}  // namespace detail

inline CommandResult cmd_init_toy(const InitToyArgs& a, std::ostream& log) {
  a.config.validate();
  OutlierOptions o;
  o.enabled = a.inject_outliers;
  const FloatModel m = init_toy(a.config, a.seed, o);
  const Corpus c = make_corpus(a.config, a.seed, a.corpus, o);
  const std::string corpus_out = a.corpus_out.empty() ? a.out + ".jsonl" : a.corpus_out;
  save_model(m, a.out);
  save_corpus(c, corpus_out);
  log << "wrote model " << a.out << " and corpus " << corpus_out << " (" << c.size() << " sequences)\n";
  return {{{"model", a.out},
           {"corpus", corpus_out},
           {"seed", a.seed},
           {"inject_outliers", a.inject_outliers},
           {"sequences", c.size()},
           {"config", quamba::detail::config_json(a.config)}},
          kExitOk};
}

inline CommandResult cmd_calibrate(const CalibrateArgs& a, std::ostream& log) {
  const FloatModel m = detail::load_float(a.model);
  const Corpus c = detail::load_nonempty_corpus(a.corpus, m.config.vocab_size);
  CalibrationConfig cc = CalibrationConfig::with_percentile(a.percentile);
  cc.bits = m.config.bits;
  cc.num_samples = a.samples;
  cc.seed = a.seed;
  const ScaleSet set = run_calibration(m, c, cc);
  save_scaleset(set, a.out_scales);
  log << "site                          scheme                         scale\n";
  for (const auto& [name, e] : set.sites) {
    char line[160];
    std::snprintf(line, sizeof line, "%-29s %-30s %.6g\n", name.c_str(), scheme_name(e.scheme).c_str(), e.scale);
    log << line;
  }
  return {{{"scales", a.out_scales},
           {"sites", set.sites.size()},
           {"samples", std::min(a.samples, c.size())},
           {"percentile", a.percentile},
           {"seed", a.seed}},
          kExitOk};
}

inline CommandResult cmd_quantize(const QuantizeArgs& a, std::ostream& log) {
  const FloatModel m = detail::load_float(a.model);
  const ScaleSet set = load_scaleset(a.scales);
  const Model q = quantize_model(m, set, a.mode);
  save_model(q, a.out);
  log << "wrote " << mode_name(a.mode) << " model " << a.out << "\n";
  return {{{"model", a.out}, {"mode", std::string(mode_name(a.mode))}, {"hadamard_fused", uses_hadamard(a.mode)}},
          kExitOk};
}

inline CommandResult cmd_eval(const EvalArgs& a, std::ostream& log) {
  const Model m = load_model(a.model);
  const Corpus c = detail::load_nonempty_corpus(a.corpus, config_of(m).vocab_size);
  EvalReport r;
  if (a.reference.empty()) {
    r = evaluate(m, c);
  } else {
    const Model ref = load_model(a.reference);
    if (!(config_of(ref) == config_of(m))) throw Error("reference model config differs from the evaluated model");
    r = evaluate(m, c, ref);
  }
  log << "perplexity " << detail::fmt("%.6f", r.perplexity);
  if (r.has_reference) log << "  mse " << detail::fmt("%.6g", r.mse) << "  cosine " << detail::fmt("%.6f", r.cosine);
  log << "\n";
  return {detail::eval_json(r), kExitOk};
}

// Statistics are collected once; each p re-finalizes the same pool, which is
// exactly what a separate calibration run with that p would produce.
inline CommandResult cmd_sweep_percentile(const SweepArgs& a, std::ostream& log) {
  if (a.percentiles.empty()) throw Error("sweep: no percentiles given");
  for (double p : a.percentiles) check_percentile(p);
  if (!uses_percentile(a.mode)) throw Error("sweep: mode must use percentile scales (in-per or quamba)");
  const FloatModel m = detail::load_float(a.model);
  const Corpus calib = detail::load_nonempty_corpus(a.corpus, m.config.vocab_size);
  const Corpus eval = a.eval_corpus.empty() ? calib : detail::load_nonempty_corpus(a.eval_corpus, m.config.vocab_size);

  CalibrationConfig base = CalibrationConfig::with_percentile(a.percentiles.front());
  base.bits = m.config.bits;
  base.num_samples = a.samples;
  base.seed = a.seed;
  const auto idx = sample_indices(calib.size(), a.samples, a.seed);
  const CalibrationStats stats = collect_stats(m, calib, idx, base);

  const auto ref = corpus_logits(m, eval);
  nlohmann::json rows = nlohmann::json::array();
  log << "p          perplexity     mse            cosine     x scales\n";
  for (double p : a.percentiles) {
    CalibrationConfig cc = base;
    cc.schemes["x"] = StaticSymmetricPercentile{p};
    const ScaleSet set = finalize(stats, cc, m.config.n_layers);
    const Model q = quantize_model(m, set, a.mode);
    const EvalReport r = evaluate(q, eval, &ref);
    std::vector<double> xs;
    for (std::size_t l = 0; l < m.config.n_layers; ++l) xs.push_back(set.at(layer_key(l, "x")).scale);
    rows.push_back({{"p", p}, {"perplexity", r.perplexity}, {"mse", r.mse}, {"cosine", r.cosine}, {"x_scales", xs}});
    char line[160];
    std::snprintf(line, sizeof line, "%-10g %-14.6f %-14.6g %-10.6f", p, r.perplexity, r.mse, r.cosine);
    log << line;
    for (double s : xs) log << " " << detail::fmt("%.6g", s);
    log << "\n";
  }
  return {{{"mode", std::string(mode_name(a.mode))}, {"samples", idx.size()}, {"rows", rows}}, kExitOk};
}

inline CommandResult cmd_bound_check(const BoundArgs& a, std::ostream& log) {
  a.params.validate();
  const BoundReport r = verify_bound(a.params, a.trials, a.seed);
  log << "trials " << r.trials << "  violations " << r.violations << "  max_ratio "
      << detail::fmt("%.6f", r.max_ratio) << "\n";
  return {to_json(r), r.violations == 0 ? kExitOk : kExitViolation};
}

inline CommandResult cmd_sensitivity(const SensitivityArgs& a, std::ostream& log) {
  const FloatModel m = detail::load_float(a.model);
  const Corpus c = detail::load_nonempty_corpus(a.corpus, m.config.vocab_size);
  SensitivityOptions opt = a.options;
  const auto entries = sensitivity_scan(m, c, all_sensitivity_sites(), opt);
  log << "rank site          kind        rel_mse        cosine_distance\n";
  for (std::size_t i = 0; i < entries.size(); ++i) {
    char line[160];
    std::snprintf(line, sizeof line, "%-4zu %-13s %-11s %-14.6g %.6g\n", i + 1, entries[i].site.c_str(),
                  entries[i].kind.c_str(), entries[i].rel_mse, entries[i].cosine_distance);
    log << line;
  }
  return {to_json(entries), kExitOk};
}

}  // namespace quamba::cli
