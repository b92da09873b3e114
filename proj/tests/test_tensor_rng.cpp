#include <gtest/gtest.h>

#include <set>

#include "support.hpp"

using namespace unimatch;

TEST(Tensor, ShapeAndIndexing) {
  FloatTensor t({2, 3, 4, 5});
  EXPECT_EQ(t.size(), 120u);
  t(1, 2, 3, 4) = 7.0f;
  EXPECT_EQ(t[119], 7.0f);
  EXPECT_THROW(FloatTensor({2, 2}, std::vector<float>(3)), ContractError);
}

TEST(Tensor, ConcatAndSliceAreInverse) {
  Rng rng(3);
  auto a = testing_support::random_logits<float>(rng, {2, 3, 2, 2});
  auto b = testing_support::random_logits<float>(rng, {3, 3, 2, 2});
  auto c = concat_batch(a, b);
  EXPECT_EQ(c.dim(0), 5u);
  EXPECT_EQ(slice_batch(c, 0, 2), a);
  EXPECT_EQ(slice_batch(c, 2, 5), b);
  EXPECT_THROW(concat_batch(a, FloatTensor({1, 2, 2, 2})), ContractError);
}

TEST(Rng, SameSeedSameSequence) {
  Rng a(42), b(42);
  for (int i = 0; i < 100; ++i) EXPECT_EQ(a.next(), b.next());
}

TEST(Rng, UniformAndBelowStayInRange) {
  Rng r(1);
  for (int i = 0; i < 10000; ++i) {
    const double u = r.uniform();
    ASSERT_GE(u, 0.0);
    ASSERT_LT(u, 1.0);
    ASSERT_LT(r.below(7), 7u);
    const auto v = r.between(-3, 3);
    ASSERT_GE(v, -3);
    ASSERT_LE(v, 3);
  }
  EXPECT_THROW(r.below(0), std::invalid_argument);
}

TEST(Rng, NormalMoments) {
  Rng r(5);
  double s = 0, s2 = 0;
  const int n = 200000;
  for (int i = 0; i < n; ++i) {
    const double x = r.normal();
    s += x;
    s2 += x * x;
  }
  EXPECT_NEAR(s / n, 0.0, 0.01);
  EXPECT_NEAR(s2 / n, 1.0, 0.02);
}

TEST(SeedTree, StreamsAreDistinctAndStable) {
  SeedTree t(9);
  std::set<std::uint64_t> firsts;
  for (const char* name : {"init", "data.order", "data.labeled", "augment", "cutmix", "dropout"})
    firsts.insert(t.stream(name).next());
  EXPECT_EQ(firsts.size(), 6u);
  EXPECT_EQ(t.stream("augment", 3, 1).next(), SeedTree(9).stream("augment", 3, 1).next());
  EXPECT_NE(t.stream("augment", 3, 1).next(), t.stream("augment", 3, 2).next());
}

TEST(SeedTree, ReseedingIsRejected) {
  SeedTree t;
  EXPECT_THROW(t.stream("init"), std::logic_error);
  t.seed_everything(1);
  EXPECT_THROW(t.seed_everything(2), std::logic_error);
}

TEST(SeedTree, DifferentSeedsGiveDifferentComplementaryMasks) {
  for (std::uint64_t s = 0; s < 10; ++s) {
    Rng a = SeedTree(s).stream("dropout"), b = SeedTree(s + 100).stream("dropout");
    const auto ma = sample_complementary_masks(4, 32, a), mb = sample_complementary_masks(4, 32, b);
    EXPECT_NE(ma.mask.data, mb.mask.data) << "seed pair " << s;
  }
}
