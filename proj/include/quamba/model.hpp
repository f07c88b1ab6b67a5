#pragma once

// Toy language model: embedding -> L blocks on a residual stream -> final
// RMSNorm -> output head tied to the embedding.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include "quamba/error.hpp"
#include "quamba/hadamard.hpp"
#include "quamba/matrix.hpp"
#include "quamba/qblock.hpp"
#include "quamba/quant.hpp"
#include "quamba/scaleset.hpp"
#include "quamba/ssm.hpp"

namespace quamba {

using Token = std::uint32_t;
using Sequence = std::vector<Token>;

struct Corpus {
  std::vector<Sequence> sequences;

  bool empty() const noexcept { return sequences.empty(); }
  std::size_t size() const noexcept { return sequences.size(); }
};

struct ModelConfig {
  std::size_t vocab_size = 256;
  std::size_t d_model = 64;
  std::size_t n_layers = 2;
  std::size_t expand = 2;
  std::size_t d_state = 16;
  std::size_t d_conv = 4;
  std::size_t dt_rank = 4;
  int bits = kDefaultBits;

  BlockConfig block() const { return {d_model, expand, d_state, d_conv, dt_rank}; }

  void validate() const {
    if (vocab_size == 0 || n_layers == 0) throw Error("model config: vocab_size and n_layers must be positive");
    block().validate();
    check_bits(bits);
    plan_for_dim(block().d_inner());
  }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

struct FloatModel {
  ModelConfig config;
  Matrix embedding;  // vocab x d_model
  std::vector<SSMParams> layers;
  std::vector<float> norm_f;

  void validate() const {
    config.validate();
    if (embedding.rows() != config.vocab_size || embedding.cols() != config.d_model) {
      throw Error("model: embedding shape does not match config");
    }
    if (layers.size() != config.n_layers) throw Error("model: layer count does not match config");
    for (const auto& l : layers) l.validate(config.block(), false);
    if (norm_f.size() != config.d_model) throw Error("model: final norm has wrong length");
  }
};

struct QuantizedModel {
  ModelConfig config;
  Mode mode = Mode::full;
  Matrix embedding;
  std::vector<QuantizedBlock> layers;
  std::vector<float> norm_f;
  ScaleSet scales;  // activation and weight scales, as embedded in the container
};

using Model = std::variant<FloatModel, QuantizedModel>;

inline const ModelConfig& config_of(const Model& m) {
  return std::visit([](const auto& v) -> const ModelConfig& { return v.config; }, m);
}

namespace detail {

inline Matrix embed(const Matrix& table, std::span<const Token> tokens) {
  Matrix out(tokens.size(), table.cols());
  for (std::size_t t = 0; t < tokens.size(); ++t) {
    if (tokens[t] >= table.rows()) {
      throw Error("token id " + std::to_string(tokens[t]) + " outside vocabulary of size " +
                  std::to_string(table.rows()));
    }
    const auto src = table.row(tokens[t]);
    std::copy(src.begin(), src.end(), out.row(t).begin());
  }
  return out;
}

// logits[t, v] = <h_t, E_v>
inline Matrix tied_head(const Matrix& h, const Matrix& table) {
  Matrix logits(h.rows(), table.rows());
  for (std::size_t t = 0; t < h.rows(); ++t) {
    const auto ht = h.row(t);
    for (std::size_t v = 0; v < table.rows(); ++v) {
      const auto ev = table.row(v);
      float acc = 0.0f;
      for (std::size_t k = 0; k < ht.size(); ++k) acc += ht[k] * ev[k];
      logits(t, v) = acc;
    }
  }
  return logits;
}

inline void add_inplace(Matrix& acc, const Matrix& x) {
  for (std::size_t i = 0; i < acc.size(); ++i) acc.flat()[i] += x.flat()[i];
}

}  // namespace detail

// Float forward. The hook sees every activation site of every layer.
inline Matrix forward(const FloatModel& m, std::span<const Token> tokens, const SiteHook& hook = {}) {
  if (tokens.empty()) throw Error("forward: empty token sequence");
  Matrix h = detail::embed(m.embedding, tokens);
  Matrix res(h.rows(), h.cols());
  for (std::size_t l = 0; l < m.layers.size(); ++l) {
    detail::add_inplace(res, h);
    h = block_forward_fp(rmsnorm_rows(res, m.layers[l].norm_weight), m.layers[l], hook, l);
  }
  detail::add_inplace(res, h);
  return detail::tied_head(rmsnorm_rows(res, m.norm_f), m.embedding);
}

// Quantized forward: fused residual-add + RMSNorm + static quantization
// feeds each block; the residual stream stays real.
inline Matrix forward(const QuantizedModel& m, std::span<const Token> tokens) {
  if (tokens.empty()) throw Error("forward: empty token sequence");
  Matrix h = detail::embed(m.embedding, tokens);
  Matrix res(h.rows(), h.cols());
  for (const auto& qb : m.layers) {
    auto [u, next_res] = fused_rmsnorm_quant(h, res, qb.norm_weight, qb.scales.in, qb.bits);
    res = std::move(next_res);
    h = block_forward_q(u, qb);
  }
  detail::add_inplace(res, h);
  return detail::tied_head(rmsnorm_rows(res, m.norm_f), m.embedding);
}

inline Matrix forward(const Model& m, std::span<const Token> tokens) {
  return std::visit([&](const auto& v) { return forward(v, tokens); }, m);
}

// Constant-memory decoding state: one conv window and scan state per layer.
class Decoder {
 public:
  explicit Decoder(const Model& model) : model_(&model) {
    if (const auto* fm = std::get_if<FloatModel>(&model)) {
      for (std::size_t l = 0; l < fm->layers.size(); ++l) fp_.push_back(BlockState::zeros(fm->config.block()));
    } else {
      for (const auto& qb : std::get<QuantizedModel>(model).layers) q_.push_back(QBlockState::zeros(qb));
    }
  }

  // Consumes one token and returns the next-token logits.
  std::vector<float> step(Token token) {
    const Token tok[1] = {token};
    return std::visit([&](const auto& m) { return step_impl(m, tok); }, *model_);
  }

 private:
  std::vector<float> step_impl(const FloatModel& m, std::span<const Token> tok) {
    Matrix h = detail::embed(m.embedding, tok);
    Matrix res(1, h.cols());
    for (std::size_t l = 0; l < m.layers.size(); ++l) {
      detail::add_inplace(res, h);
      const Matrix u = rmsnorm_rows(res, m.layers[l].norm_weight);
      h = Matrix(1, h.cols(), block_step_fp(u.row(0), m.layers[l], fp_[l]));
    }
    detail::add_inplace(res, h);
    return detail::tied_head(rmsnorm_rows(res, m.norm_f), m.embedding).storage();
  }

  std::vector<float> step_impl(const QuantizedModel& m, std::span<const Token> tok) {
    Matrix h = detail::embed(m.embedding, tok);
    Matrix res(1, h.cols());
    for (std::size_t l = 0; l < m.layers.size(); ++l) {
      const auto& qb = m.layers[l];
      auto [u, next_res] = fused_rmsnorm_quant(h, res, qb.norm_weight, qb.scales.in, qb.bits);
      res = std::move(next_res);
      h = Matrix(1, h.cols(), block_step_q(u, qb, q_[l]));
    }
    detail::add_inplace(res, h);
    return detail::tied_head(rmsnorm_rows(res, m.norm_f), m.embedding).storage();
  }

  const Model* model_;
  std::vector<BlockState> fp_;
  std::vector<QBlockState> q_;
};

inline Token argmax(std::span<const float> v) {
  return static_cast<Token>(std::max_element(v.begin(), v.end()) - v.begin());
}

// Greedy decoding with carried recurrent state; the prompt is never
// re-processed.
inline Sequence greedy_decode(const Model& model, const Sequence& prompt, std::size_t steps) {
  if (steps == 0) return prompt;
  if (prompt.empty()) throw Error("greedy_decode: empty prompt");
  Decoder dec(model);
  std::vector<float> logits;
  for (Token t : prompt) logits = dec.step(t);
  Sequence out = prompt;
  for (std::size_t i = 0; i < steps; ++i) {
    const Token next = argmax(logits);
    out.push_back(next);
    if (i + 1 < steps) logits = dec.step(next);
  }
  return out;
}

struct EvalReport {
  double perplexity = 0.0;
  double mse = 0.0;
  double cosine = 1.0;
  std::size_t tokens = 0;
  bool has_reference = false;
};

// Logits of every sequence, in corpus order (empty sequences give empty
// matrices). Lets several evaluations share one reference pass.
inline std::vector<Matrix> corpus_logits(const Model& model, const Corpus& corpus) {
  std::vector<Matrix> out;
  out.reserve(corpus.size());
  for (const auto& seq : corpus.sequences) out.push_back(seq.empty() ? Matrix{} : forward(model, seq));
  return out;
}

// exp(mean next-token NLL) over every sequence; when reference logits are
// given, also the logit MSE and global cosine similarity against them.
inline EvalReport evaluate(const Model& model, const Corpus& corpus, const std::vector<Matrix>* reference) {
  if (reference != nullptr && reference->size() != corpus.size()) {
    throw Error("evaluate: reference logits do not match the corpus");
  }
  double nll = 0.0;
  std::size_t count = 0;
  double sq = 0.0, dot = 0.0, nm = 0.0, nr = 0.0;
  std::size_t elems = 0;
  for (std::size_t s = 0; s < corpus.size(); ++s) {
    const auto& seq = corpus.sequences[s];
    if (seq.empty()) continue;
    const Matrix logits = forward(model, seq);
    for (std::size_t t = 0; t + 1 < seq.size(); ++t) {
      const auto row = logits.row(t);
      const double mx = *std::max_element(row.begin(), row.end());
      double se = 0.0;
      for (float v : row) se += std::exp(static_cast<double>(v) - mx);
      nll += mx + std::log(se) - static_cast<double>(row[seq[t + 1]]);
      ++count;
    }
    if (reference != nullptr) {
      const Matrix& ref = (*reference)[s];
      if (ref.rows() != logits.rows() || ref.cols() != logits.cols()) {
        throw Error("evaluate: reference logits have the wrong shape");
      }
      for (std::size_t i = 0; i < ref.size(); ++i) {
        const double a = logits.flat()[i], b = ref.flat()[i];
        sq += (a - b) * (a - b);
        dot += a * b;
        nm += a * a;
        nr += b * b;
      }
      elems += ref.size();
    }
  }
  if (count == 0) throw Error("empty corpus: no next-token predictions to evaluate");
  EvalReport r;
  r.perplexity = std::exp(nll / static_cast<double>(count));
  r.tokens = count;
  if (reference != nullptr) {
    r.has_reference = true;
    r.mse = sq / static_cast<double>(elems);
    r.cosine = (nm == 0.0 || nr == 0.0) ? (nm == nr ? 1.0 : 0.0) : dot / std::sqrt(nm * nr);
    r.cosine = std::clamp(r.cosine, -1.0, 1.0);
  }
  return r;
}

inline EvalReport evaluate(const Model& model, const Corpus& corpus) {
  return evaluate(model, corpus, static_cast<const std::vector<Matrix>*>(nullptr));
}

inline EvalReport evaluate(const Model& model, const Corpus& corpus, const Model& reference) {
  const auto ref = corpus_logits(reference, corpus);
  return evaluate(model, corpus, &ref);
}

inline EvalReport perplexity(const Model& model, const Corpus& corpus) { return evaluate(model, corpus); }

}  // namespace quamba
