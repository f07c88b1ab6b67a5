#include <cmath>
#include <string>
#include <vector>

#include <gtest/gtest.h>

#include "quamba.hpp"

using namespace quamba;

namespace {

ModelConfig small_config() {
  ModelConfig c;
  c.vocab_size = 48;
  c.d_model = 16;
  c.n_layers = 2;
  c.d_state = 4;
  c.dt_rank = 2;
  return c;
}

Corpus small_corpus(const ModelConfig& c, std::size_t n = 8) {
  CorpusOptions co;
  co.sequences = n;
  co.length = 20;
  return make_corpus(c, 17, co);
}

}  // namespace

TEST(Model, ConfigDefaults) {
  const ModelConfig c;
  EXPECT_EQ(c.d_model, 64u);
  EXPECT_EQ(c.expand, 2u);
  EXPECT_EQ(c.d_state, 16u);
  EXPECT_EQ(c.d_conv, 4u);
  EXPECT_EQ(c.n_layers, 2u);
  EXPECT_EQ(c.vocab_size, 256u);
  EXPECT_NO_THROW(c.validate());
}

TEST(Model, UnfactorizableWidthRejected) {
  ModelConfig c = small_config();
  c.d_model = 14;  // d_inner = 28
  EXPECT_THROW(c.validate(), Error);
}

TEST(Model, SingleTokenGivesOneRow) {
  const FloatModel m = init_toy(small_config(), 1);
  const Sequence s{3};
  const Matrix logits = forward(m, s);
  EXPECT_EQ(logits.rows(), 1u);
  EXPECT_EQ(logits.cols(), 48u);
}

TEST(Model, OutOfVocabularyTokenRejected) {
  const FloatModel m = init_toy(small_config(), 1);
  const Sequence s{1, 48};
  EXPECT_THROW(forward(m, s), Error);
}

TEST(Model, ZeroModelGivesUniformLogits) {
  FloatModel m = init_toy(small_config(), 1);
  for (auto& v : m.embedding.flat()) v = 0.0f;
  for (auto& p : m.layers) p = SSMParams::zeros(m.config.block());
  const Sequence s{1, 2, 3, 4};
  const Matrix logits = forward(m, s);
  for (float v : logits.flat()) EXPECT_EQ(v, 0.0f);
}

TEST(Model, UniformPredictorPerplexityIsVocabSize) {
  ModelConfig c = small_config();
  c.vocab_size = 64;
  FloatModel m = init_toy(c, 1);
  for (auto& v : m.embedding.flat()) v = 0.0f;
  Corpus corpus;
  corpus.sequences = {{1, 2, 3, 4, 5}, {7, 7, 7}};
  EXPECT_NEAR(perplexity(m, corpus).perplexity, 64.0, 1e-9);
}

TEST(Model, ConfidentPredictorPerplexityNearOne) {
  // Tokens repeat, and each embedding points along its own axis with a large
  // norm, so the tied head strongly favors repeating the current token.
  ModelConfig c = small_config();
  c.vocab_size = 16;
  FloatModel m = init_toy(c, 1);
  for (auto& p : m.layers) p = SSMParams::zeros(c.block());
  m.embedding = Matrix(16, 16);
  for (std::size_t i = 0; i < 16; ++i) m.embedding(i, i) = 10.0f;
  Corpus corpus;
  corpus.sequences = {{3, 3, 3, 3, 3, 3}};
  EXPECT_LT(perplexity(m, corpus).perplexity, 1.0 + 1e-6);
}

TEST(Model, EmptyCorpusRejected) {
  const FloatModel m = init_toy(small_config(), 1);
  EXPECT_THROW(perplexity(m, Corpus{}), Error);
  Corpus singles;
  singles.sequences = {{1}, {2}};
  EXPECT_THROW(perplexity(m, singles), Error);
}

TEST(Model, SelfEvaluationIsExact) {
  const Model m = init_toy(small_config(), 2);
  const EvalReport r = evaluate(m, small_corpus(small_config()), m);
  EXPECT_EQ(r.mse, 0.0);
  EXPECT_NEAR(r.cosine, 1.0, 1e-12);
}

TEST(Model, GreedyDecodeMatchesRecompute) {
  const ModelConfig c = small_config();
  const FloatModel fm = init_toy(c, 3);
  const ScaleSet set = run_calibration(fm, small_corpus(c));
  const Sequence prompt{5, 9, 2, 11};
  for (const Model& m : {Model(fm), Model(quantize_model(fm, set, Mode::full)),
                         Model(quantize_model(fm, set, Mode::naive))}) {
    const Sequence fast = greedy_decode(m, prompt, 16);
    Sequence slow = prompt;
    for (int i = 0; i < 16; ++i) {
      const Matrix logits = forward(m, slow);
      slow.push_back(argmax(logits.row(logits.rows() - 1)));
    }
    EXPECT_EQ(fast, slow);
    EXPECT_EQ(fast, greedy_decode(m, prompt, 16));
  }
}

TEST(Model, DecodeZeroStepsReturnsPrompt) {
  const Model m = init_toy(small_config(), 3);
  const Sequence prompt{1, 2};
  EXPECT_EQ(greedy_decode(m, prompt, 0), prompt);
}

TEST(Model, DecoderLogitsMatchForward) {
  const Model m = init_toy(small_config(), 4);
  const Sequence s{4, 8, 15, 16, 23, 42};
  const Matrix full = forward(m, s);
  Decoder dec(m);
  for (std::size_t t = 0; t < s.size(); ++t) {
    const auto row = dec.step(s[t]);
    for (std::size_t v = 0; v < row.size(); ++v) EXPECT_NEAR(row[v], full(t, v), 1e-4f);
  }
}

TEST(Model, QuantizedCosineOnCleanModel) {
  const ModelConfig c;  // default toy size
  const FloatModel fm = init_toy(c, 42);
  CorpusOptions co;
  co.sequences = 32;
  co.length = 32;
  const Corpus corpus = make_corpus(c, 42, co);
  const Model q = quantize_model(fm, run_calibration(fm, corpus), Mode::full);
  EXPECT_GE(evaluate(q, corpus, Model(fm)).cosine, 0.99);
}

TEST(Store, FloatModelRoundTripsByteIdentically) {
  const FloatModel fm = init_toy(small_config(), 5);
  const std::string bytes = serialize_model(fm);
  const Model back = deserialize_model(bytes);
  EXPECT_EQ(serialize_model(back), bytes);
  const auto& b = std::get<FloatModel>(back);
  EXPECT_EQ(b.embedding, fm.embedding);
  EXPECT_EQ(b.layers[1].out_proj, fm.layers[1].out_proj);
}

TEST(Store, QuantizedModelRoundTrips) {
  const ModelConfig c = small_config();
  const FloatModel fm = init_toy(c, 6);
  const ScaleSet set = run_calibration(fm, small_corpus(c));
  for (Mode mode : {Mode::naive, Mode::in_per, Mode::out_had, Mode::full}) {
    const Model q = quantize_model(fm, set, mode);
    const std::string bytes = serialize_model(q);
    const Model back = deserialize_model(bytes);
    EXPECT_EQ(serialize_model(back), bytes) << mode_name(mode);
    const Sequence s{1, 2, 3, 4, 5};
    EXPECT_EQ(forward(back, s), forward(q, s)) << mode_name(mode);
  }
}

TEST(Store, TruncatedPayloadRejected) {
  const std::string bytes = serialize_model(init_toy(small_config(), 7));
  try {
    deserialize_model(std::string_view(bytes).substr(0, bytes.size() - 3));
    FAIL() << "expected an error";
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("payload length mismatch"), std::string::npos) << e.what();
  }
}

TEST(Store, UnknownDtypeRejected) {
  std::string bytes = serialize_model(init_toy(small_config(), 7));
  const auto pos = bytes.find("\"f32\"");
  ASSERT_NE(pos, std::string::npos);
  bytes.replace(pos, 5, "\"f64\"");
  try {
    deserialize_model(bytes);
    FAIL() << "expected an error";
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("unknown dtype"), std::string::npos) << e.what();
  }
}

TEST(Store, MalformedManifestRejected) {
  EXPECT_THROW(deserialize_model("no newline"), Error);
  EXPECT_THROW(deserialize_model("{broken\n"), Error);
  EXPECT_THROW(deserialize_model("{\"version\": 1}\n"), Error);
}

TEST(Store, CorpusRoundTrip) {
  const Corpus c = small_corpus(small_config());
  const std::string text = format_corpus(c);
  const Corpus back = parse_corpus(text);
  EXPECT_EQ(back.sequences, c.sequences);
  EXPECT_EQ(format_corpus(back), text);
  EXPECT_EQ(parse_corpus("\n{\"tokens\":[1,2]}\n\n").sequences, (std::vector<Sequence>{{1, 2}}));
  EXPECT_THROW(parse_corpus("{\"tokens\":[-1]}"), Error);
  EXPECT_THROW(parse_corpus("{\"toks\":[1]}"), Error);
  EXPECT_THROW(check_corpus(back, 10), Error);
}

TEST(Toy, SameSeedSameModel) {
  const ModelConfig c = small_config();
  EXPECT_EQ(serialize_model(init_toy(c, 9)), serialize_model(init_toy(c, 9)));
  EXPECT_NE(serialize_model(init_toy(c, 9)), serialize_model(init_toy(c, 10)));
  EXPECT_EQ(format_corpus(small_corpus(c)), format_corpus(small_corpus(c)));
}

TEST(Toy, OutlierCorpusHasExactRareEvents) {
  const ModelConfig c = small_config();
  OutlierOptions o;
  o.enabled = true;
  CorpusOptions co;
  co.sequences = 20;
  co.length = 30;
  const Corpus corpus = make_corpus(c, 1, co, o);
  std::size_t rare = 0;
  for (const auto& s : corpus.sequences)
    for (Token t : s) rare += t >= c.vocab_size - o.rare_tokens;
  EXPECT_EQ(rare, o.rare_events);
}
