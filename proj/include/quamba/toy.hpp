#pragma once

// Seeded toy models and synthetic token corpora.
//
// Draws are built directly from mt19937_64 output (not <random>
// distributions, whose algorithms differ between standard libraries) so a
// seed names the same bytes everywhere.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <vector>

#include "quamba/error.hpp"
#include "quamba/matrix.hpp"
#include "quamba/model.hpp"
#include "quamba/ssm.hpp"

namespace quamba {

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : eng_(seed) {}

  std::uint64_t bits() { return eng_(); }
  // [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(eng_() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  // Box-Muller, one value per call.
  double normal() {
    const double u1 = 1.0 - uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }
  std::size_t below(std::size_t n) { return static_cast<std::size_t>(eng_() % n); }

 private:
  std::mt19937_64 eng_;
};

struct OutlierOptions {
  bool enabled = false;
  double spike_factor = 100.0;  // D gain of the output outlier channel
  std::size_t rare_tokens = 4;  // vocabulary ids reserved at the top of the range
  std::size_t rare_events = 4;  // occurrences of rare tokens in a generated corpus
  double input_gain = 0.75;     // in_proj weight along the rare-token direction
  double conv_gain = 20.0;      // last conv tap on the scan-input outlier channel
  std::size_t scan_input_channel = 3;
  std::size_t output_channel = 7;
};

namespace detail {

inline void fill_uniform(Matrix& m, Rng& rng, double bound) {
  for (float& v : m.flat()) v = static_cast<float>(rng.uniform(-bound, bound));
}

inline void fill_uniform(std::vector<float>& v, Rng& rng, double bound) {
  for (float& x : v) x = static_cast<float>(rng.uniform(-bound, bound));
}

inline SSMParams init_block(const BlockConfig& cfg, Rng& rng) {
  const auto di = cfg.d_inner();
  SSMParams p = SSMParams::zeros(cfg);
  fill_uniform(p.in_proj, rng, 1.0 / std::sqrt(static_cast<double>(cfg.d_model)));
  fill_uniform(p.conv_weight, rng, 1.0 / std::sqrt(static_cast<double>(cfg.d_conv)));
  fill_uniform(p.conv_bias, rng, 1.0 / std::sqrt(static_cast<double>(cfg.d_conv)));
  fill_uniform(p.x_proj_B, rng, 1.0 / std::sqrt(static_cast<double>(di)));
  fill_uniform(p.x_proj_C, rng, 1.0 / std::sqrt(static_cast<double>(di)));
  fill_uniform(p.dt_down, rng, 1.0 / std::sqrt(static_cast<double>(di)));
  fill_uniform(p.dt_up, rng, 1.0 / std::sqrt(static_cast<double>(cfg.dt_rank)));
  for (float& b : p.dt_bias) {
    const double dt = std::exp(rng.uniform(std::log(1e-3), std::log(1e-1)));
    b = softplus_inverse(static_cast<float>(dt));
  }
  const double log_ds = std::log(static_cast<double>(cfg.d_state));
  for (float& a : p.A.flat()) a = static_cast<float>(-std::exp(rng.uniform(0.0, log_ds)));
  for (float& d : p.D) d = 1.0f;
  fill_uniform(p.out_proj, rng, 1.0 / std::sqrt(static_cast<double>(di)));
  return p;
}

// Rare tokens embed along a unit direction v that every ordinary embedding
// is orthogonal to. Layer 0 routes v into one x channel through a
// single-tap conv, giving an isolated spike at the scan input each time a
// rare token appears; that channel's gate and selection rows are zeroed so
// the spike itself carries no output signal. Every layer gets one output
// channel whose skip gain D is multiplied by the spike factor, with out_proj
// compensating so the float function stays well scaled.
inline void inject_outliers(FloatModel& m, const OutlierOptions& o, Rng& rng) {
  const auto& c = m.config;
  const auto di = c.block().d_inner();
  if (o.rare_tokens == 0 || o.rare_tokens >= c.vocab_size) throw Error("outliers: rare token count out of range");
  if (o.scan_input_channel >= di || o.output_channel >= di || o.scan_input_channel == o.output_channel) {
    throw Error("outliers: channel indices out of range");
  }
  if (!(o.spike_factor > 0.0)) throw Error("outliers: spike factor must be positive");

  std::vector<double> v(c.d_model);
  double norm = 0.0;
  for (auto& x : v) {
    x = rng.normal();
    norm += x * x;
  }
  norm = std::sqrt(norm);
  for (auto& x : v) x /= norm;

  const std::size_t first_rare = c.vocab_size - o.rare_tokens;
  for (std::size_t t = 0; t < c.vocab_size; ++t) {
    auto e = m.embedding.row(t);
    if (t >= first_rare) {
      for (std::size_t k = 0; k < c.d_model; ++k) e[k] = static_cast<float>(v[k]);
      continue;
    }
    double dot = 0.0;
    for (std::size_t k = 0; k < c.d_model; ++k) dot += e[k] * v[k];
    for (std::size_t k = 0; k < c.d_model; ++k) e[k] = static_cast<float>(e[k] - dot * v[k]);
  }

  SSMParams& p0 = m.layers[0];
  const std::size_t c0 = o.scan_input_channel;
  for (std::size_t k = 0; k < c.d_model; ++k) {
    p0.in_proj(k, c0) = static_cast<float>(o.input_gain * v[k]);
    p0.in_proj(k, di + c0) = 0.0f;
  }
  for (std::size_t tap = 0; tap < c.d_conv; ++tap) p0.conv_weight(tap, c0) = 0.0f;
  p0.conv_weight(c.d_conv - 1, c0) = static_cast<float>(o.conv_gain);
  p0.conv_bias[c0] = 0.0f;
  for (std::size_t s = 0; s < c.d_state; ++s) {
    p0.x_proj_B(c0, s) = 0.0f;
    p0.x_proj_C(c0, s) = 0.0f;
  }
  for (std::size_t r = 0; r < c.dt_rank; ++r) p0.dt_down(c0, r) = 0.0f;

  for (auto& p : m.layers) {
    const std::size_t c1 = o.output_channel;
    p.D[c1] = static_cast<float>(p.D[c1] * o.spike_factor);
    for (std::size_t k = 0; k < c.d_model; ++k) p.out_proj(c1, k) = static_cast<float>(p.out_proj(c1, k) / o.spike_factor);
  }
}

}  // namespace detail

inline FloatModel init_toy(const ModelConfig& cfg, std::uint64_t seed, const OutlierOptions& outliers = {}) {
  cfg.validate();
  Rng rng(seed);
  FloatModel m;
  m.config = cfg;
  m.embedding = Matrix(cfg.vocab_size, cfg.d_model);
  const double emb_std = 1.0 / std::sqrt(static_cast<double>(cfg.d_model));
  for (float& v : m.embedding.flat()) v = static_cast<float>(emb_std * rng.normal());
  for (std::size_t l = 0; l < cfg.n_layers; ++l) m.layers.push_back(detail::init_block(cfg.block(), rng));
  m.norm_f.assign(cfg.d_model, 1.0f);
  if (outliers.enabled) detail::inject_outliers(m, outliers, rng);
  m.validate();
  return m;
}

struct CorpusOptions {
  std::size_t sequences = 256;
  std::size_t length = 64;
  double zipf_exponent = 1.0;
};

// Zipf-distributed ordinary tokens. With outliers enabled, exactly
// `rare_events` positions hold rare tokens and ordinary draws avoid them.
inline Corpus make_corpus(const ModelConfig& cfg, std::uint64_t seed, const CorpusOptions& co = {},
                          const OutlierOptions& outliers = {}) {
  if (co.sequences == 0 || co.length == 0) throw Error("corpus: sequences and length must be positive");
  const std::size_t ordinary = outliers.enabled ? cfg.vocab_size - outliers.rare_tokens : cfg.vocab_size;
  std::vector<double> cdf(ordinary);
  double acc = 0.0;
  for (std::size_t k = 0; k < ordinary; ++k) {
    acc += 1.0 / std::pow(static_cast<double>(k + 1), co.zipf_exponent);
    cdf[k] = acc;
  }
  // Rank-to-id shuffle so frequent tokens are not the low ids.
  std::vector<Token> ids(ordinary);
  for (std::size_t k = 0; k < ordinary; ++k) ids[k] = static_cast<Token>(k);
  Rng rng(seed ^ 0x9e3779b97f4a7c15ULL);
  for (std::size_t k = ordinary; k > 1; --k) std::swap(ids[k - 1], ids[rng.below(k)]);

  Corpus c;
  c.sequences.assign(co.sequences, Sequence(co.length));
  for (auto& seq : c.sequences) {
    for (auto& t : seq) {
      const double u = rng.uniform() * acc;
      const auto k = static_cast<std::size_t>(std::upper_bound(cdf.begin(), cdf.end(), u) - cdf.begin());
      t = ids[std::min(k, ordinary - 1)];
    }
  }
  if (outliers.enabled) {
    const std::size_t total = co.sequences * co.length;
    if (outliers.rare_events > total) throw Error("corpus: more rare events than positions");
    std::vector<std::size_t> pos;
    while (pos.size() < outliers.rare_events) {
      const std::size_t p = rng.below(total);
      if (std::find(pos.begin(), pos.end(), p) == pos.end()) pos.push_back(p);
    }
    for (std::size_t i = 0; i < pos.size(); ++i) {
      c.sequences[pos[i] / co.length][pos[i] % co.length] =
          static_cast<Token>(ordinary + i % outliers.rare_tokens);
    }
  }
  return c;
}

}  // namespace quamba
