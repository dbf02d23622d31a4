// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <algorithm>
#include <set>

#include "clipsvd/synth_data.hpp"
#include "oracles.hpp"

namespace {

using namespace clipsvd;

SyntheticCorpusConfig small(std::uint64_t seed = 5) {
  SyntheticCorpusConfig c;
  c.num_classes = 6;
  c.samples_per_class = 10;
  c.seed = seed;
  return c;
}

TEST(Generate, ShapesAndLabels) {
  const Dataset ds = generate(small());
  ASSERT_EQ(ds.samples.size(), 60u);
  EXPECT_EQ(ds.num_classes(), 6u);
  EXPECT_EQ(ds.prototypes.rows(), 6u);
  for (std::size_t c = 0; c < 6; ++c) EXPECT_NEAR(norm2(ds.prototypes.row(c)), 1.0, 1e-12);
  for (std::size_t i = 0; i < ds.samples.size(); ++i) {
    const auto& s = ds.samples[i];
    EXPECT_EQ(s.label, i / 10);
    EXPECT_EQ(s.patches.rows(), 8u);
    EXPECT_EQ(s.patches.cols(), 12u);
    EXPECT_EQ(s.text.size(), 6u);
    for (std::size_t t : s.text) EXPECT_LT(t, 64u);
    // Captions are cyclic shifts of the class template by at most max_jitter.
    auto tmpl = ds.class_texts[s.label];
    bool found = false;
    for (std::size_t k = 0; k <= 1; ++k) {
      found |= tmpl == s.text;
      std::rotate(tmpl.begin(), tmpl.begin() + 1, tmpl.end());
    }
    EXPECT_TRUE(found);
  }
}

TEST(Generate, Deterministic) {
  EXPECT_TRUE(generate(small(7)) == generate(small(7)));
  EXPECT_FALSE(generate(small(7)) == generate(small(8)));
}

TEST(Generate, WorldSeedFixesRenderOnly) {
  auto a = small(1), b = small(2);
  EXPECT_TRUE(render_matrix(a) == render_matrix(b));
  b.world_seed = 3;
  EXPECT_FALSE(render_matrix(a) == render_matrix(b));
}

TEST(Generate, ZeroNoiseGivesIdenticalImagesPerClass) {
  auto c = small();
  c.noise = 0.0;
  const Dataset ds = generate(c);
  for (const auto& s : ds.samples) {
    EXPECT_EQ(s.patches, ds.samples[s.label * 10].patches);
    const auto proto = ds.prototypes.row(s.label);
    EXPECT_EQ(s.latent, Vector(proto.begin(), proto.end()));
  }
}

TEST(Generate, NearestRenderedPrototypeRecoversLabel) {
  auto c = small(11);
  c.num_classes = 10;
  c.samples_per_class = 40;
  const Dataset ds = generate(c);
  const Matrix rendered = oracle::naive_matmul(ds.prototypes, render_matrix(c));
  std::size_t correct = 0;
  for (const auto& s : ds.samples) {
    std::size_t best = 0;
    double best_d = 1e300;
    for (std::size_t k = 0; k < rendered.rows(); ++k) {
      double d = 0.0;
      for (std::size_t j = 0; j < rendered.cols(); ++j) {
        const double diff = s.patches.data()[j] - rendered(k, j);
        d += diff * diff;
      }
      if (d < best_d) {
        best_d = d;
        best = k;
      }
    }
    correct += best == s.label ? 1 : 0;
  }
  EXPECT_GE(static_cast<double>(correct) / static_cast<double>(ds.samples.size()), 0.99);
}

TEST(Generate, InvalidConfig) {
  auto c = small();
  c.num_classes = 0;
  EXPECT_THROW(generate(c), ConfigError);
  c = small();
  c.noise = -1.0;
  EXPECT_THROW(generate(c), ConfigError);
}

TEST(Split, PartitionsClassesAndSamples) {
  const Dataset ds = generate(small());
  const DataSplit sp = split(ds, 0.5, 3);
  EXPECT_EQ(sp.classes.base.size(), 3u);
  EXPECT_EQ(sp.classes.novel.size(), 3u);
  EXPECT_NO_THROW(sp.classes.validate(6));
  std::set<std::size_t> seen;
  for (std::size_t c = 0; c < 6; ++c) {
    EXPECT_EQ(sp.train[c].size(), 5u);
    EXPECT_EQ(sp.test[c].size(), 5u);
    for (auto* part : {&sp.train[c], &sp.test[c]})
      for (std::size_t id : *part) {
        EXPECT_EQ(ds.samples[id].label, c);
        EXPECT_TRUE(seen.insert(id).second);
      }
  }
  EXPECT_EQ(seen.size(), ds.samples.size());
  const DataSplit again = split(ds, 0.5, 3);
  EXPECT_EQ(again.classes.base, sp.classes.base);
  EXPECT_EQ(again.train, sp.train);
}

TEST(Split, FractionsAndErrors) {
  const Dataset ds = generate(small());
  const DataSplit sp = split(ds, 1.0 / 3.0, 4, 0.8);
  EXPECT_EQ(sp.classes.base.size(), 2u);
  EXPECT_EQ(sp.train[0].size(), 8u);
  EXPECT_THROW(split(ds, 0.0, 1), ConfigError);
  EXPECT_THROW(split(ds, 1.0, 1), ConfigError);
  EXPECT_THROW(split(ds, 0.01, 1), ConfigError);
  EXPECT_THROW(split(ds, 0.5, 1, 1.0), ConfigError);
}

TEST(Split, BaseNovelValidation) {
  EXPECT_THROW((BaseNovelSplit{{0, 1}, {1, 2}}.validate(3)), ConfigError);
  EXPECT_THROW((BaseNovelSplit{{0}, {1}}.validate(3)), ConfigError);
  EXPECT_THROW((BaseNovelSplit{{}, {0, 1, 2}}.validate(3)), ConfigError);
  EXPECT_THROW((BaseNovelSplit{{0, 5}, {1, 2}}.validate(3)), ConfigError);
}

TEST(Split, ClassAssignmentIsRoughlyBalancedAcrossSeeds) {
  const Dataset ds = generate(small());
  std::vector<int> base_count(6, 0);
  for (std::uint64_t seed = 0; seed < 600; ++seed)
    for (std::size_t c : split(ds, 0.5, seed).classes.base) ++base_count[c];
  for (int n : base_count) EXPECT_NEAR(n, 300, 60);
}

}  // namespace
