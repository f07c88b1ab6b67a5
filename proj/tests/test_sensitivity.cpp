#include <algorithm>
#include <string>
#include <vector>

#include <gtest/gtest.h>

#include "quamba.hpp"

using namespace quamba;

namespace {

ModelConfig small_config() {
  ModelConfig c;
  c.vocab_size = 32;
  c.d_model = 16;
  c.n_layers = 2;
  c.d_state = 4;
  c.dt_rank = 2;
  return c;
}

Corpus small_corpus(const ModelConfig& c) {
  CorpusOptions co;
  co.sequences = 10;
  co.length = 16;
  return make_corpus(c, 21, co);
}

}  // namespace

TEST(Sensitivity, NoSitesGivesEmptyReport) {
  const ModelConfig c = small_config();
  EXPECT_TRUE(sensitivity_scan(init_toy(c, 1), small_corpus(c), {}).empty());
}

TEST(Sensitivity, UnknownSiteRejected) {
  const ModelConfig c = small_config();
  EXPECT_THROW(sensitivity_scan(init_toy(c, 1), small_corpus(c), {"bogus"}), Error);
  EXPECT_THROW(sensitivity_scan(init_toy(c, 1), Corpus{}, {"x"}), Error);
}

TEST(Sensitivity, RankedAndNonNegative) {
  const ModelConfig c = small_config();
  const auto r = sensitivity_scan(init_toy(c, 2), small_corpus(c), all_sensitivity_sites());
  ASSERT_EQ(r.size(), all_sensitivity_sites().size());
  for (std::size_t i = 0; i < r.size(); ++i) {
    EXPECT_GE(r[i].rel_mse, 0.0);
    EXPECT_GE(r[i].cosine_distance, 0.0);
    if (i > 0) {
      EXPECT_GE(r[i - 1].rel_mse, r[i].rel_mse);
    }
  }
}

TEST(Sensitivity, WiderBitsMoveLogitsLess) {
  const ModelConfig c = small_config();
  const FloatModel m = init_toy(c, 3);
  const Corpus corpus = small_corpus(c);
  SensitivityOptions wide;
  wide.bits = 16;
  for (const std::string site : {"x", "y", "in_proj", "out_proj"}) {
    const double narrow = sensitivity_scan(m, corpus, {site})[0].rel_mse;
    const double fine = sensitivity_scan(m, corpus, {site}, wide)[0].rel_mse;
    EXPECT_GT(narrow, 0.0) << site;
    EXPECT_LT(fine, narrow) << site;
  }
}

TEST(Sensitivity, ZeroTensorIsInsensitive) {
  const ModelConfig c = small_config();
  FloatModel m = init_toy(c, 4);
  for (auto& p : m.layers) std::fill(p.D.begin(), p.D.end(), 0.0f);
  const auto r = sensitivity_scan(m, small_corpus(c), {"D"});
  EXPECT_EQ(r[0].rel_mse, 0.0);
  EXPECT_EQ(r[0].kind, "weight");
}
