#include <gtest/gtest.h>

#include <set>

#include "support.hpp"

using namespace unimatch;
using namespace testing_support;

namespace {

/// Pointwise "model": logits are the input channels, so any crop of the
/// image predicts exactly the matching crop of the whole-image output.
struct PointwiseModel {
  std::size_t g = 1;
  std::size_t granularity() const { return g; }
  std::size_t num_classes() const { return 3; }
  Logits forward(const FloatTensor& x) const {
    require(x.dim(2) % g == 0 && x.dim(3) % g == 0, "granularity");
    return x;
  }
};

/// IoU per class from pixel sets, independent of the confusion matrix.
std::vector<double> set_iou(const LabelMask& pred, const LabelMask& gt, int K) {
  std::vector<double> out;
  for (int k = 0; k < K; ++k) {
    std::set<std::size_t> a, b;
    for (std::size_t i = 0; i < gt.data.size(); ++i) {
      if (gt.data[i] == gt.ignore_value) continue;
      if (pred.data[i] == k) a.insert(i);
      if (gt.data[i] == k) b.insert(i);
    }
    std::size_t inter = 0;
    for (auto i : a) inter += b.count(i);
    const std::size_t uni = a.size() + b.size() - inter;
    out.push_back(uni ? double(inter) / double(uni) : std::nan(""));
  }
  return out;
}

}  // namespace

TEST(Miou, MatchesSetOracle) {
  Rng rng(1);
  for (int trial = 0; trial < 20; ++trial) {
    const auto gt = random_labels(rng, 2, 7, 5, 4, 0.2);
    auto pred = random_labels(rng, 2, 7, 5, 4, 0.0);
    ConfusionMatrix cm(4);
    accumulate(cm, pred, gt);
    const auto r = miou(cm);
    const auto oracle = set_iou(pred, gt, 4);
    double sum = 0;
    int n = 0;
    for (int k = 0; k < 4; ++k) {
      if (std::isnan(oracle[k])) {
        EXPECT_TRUE(std::isnan(r.per_class[k]));
        continue;
      }
      EXPECT_NEAR(r.per_class[k], oracle[k], 1e-12);
      sum += oracle[k];
      ++n;
    }
    EXPECT_NEAR(r.mean, sum / n, 1e-12);
  }
}

TEST(Miou, HandWorkedExample) {
  // gt:   0 0 1 1     pred: 0 1 1 1
  LabelMask gt{IndexTensor({1, 1, 4}), 3}, pred{IndexTensor({1, 1, 4}), 3};
  gt.data.storage() = {0, 0, 1, 1};
  pred.data.storage() = {0, 1, 1, 1};
  ConfusionMatrix cm(3);
  accumulate(cm, pred, gt);
  const auto r = miou(cm);
  EXPECT_DOUBLE_EQ(r.per_class[0], 0.5);
  EXPECT_NEAR(r.per_class[1], 2.0 / 3.0, 1e-15);
  EXPECT_TRUE(std::isnan(r.per_class[2]));  // absent everywhere: excluded
  EXPECT_NEAR(r.mean, (0.5 + 2.0 / 3.0) / 2, 1e-15);
}

TEST(Miou, IgnoreAndEmpty) {
  LabelMask gt{IndexTensor({1, 1, 2}, kIgnoreValue), 2}, pred{IndexTensor({1, 1, 2}, 1), 2};
  ConfusionMatrix cm(2);
  accumulate(cm, pred, gt);
  EXPECT_EQ(cm.total(), 0u);
  EXPECT_FALSE(miou(cm).defined);
  pred.data[0] = 5;
  gt.data[0] = 0;
  EXPECT_THROW(accumulate(cm, pred, gt), ContractError);
}

TEST(Miou, MergeIsAdditive) {
  Rng rng(2);
  const auto g1 = random_labels(rng, 1, 4, 4, 3), p1 = random_labels(rng, 1, 4, 4, 3, 0);
  const auto g2 = random_labels(rng, 1, 4, 4, 3), p2 = random_labels(rng, 1, 4, 4, 3, 0);
  ConfusionMatrix a(3), b(3), both(3);
  accumulate(a, p1, g1);
  accumulate(b, p2, g2);
  accumulate(accumulate(both, p1, g1), p2, g2);
  EXPECT_EQ(a.merge(b), both);
}

TEST(Argmax, PicksLargestLogit) {
  Logits l({1, 3, 1, 2}, 0.0f);
  l(0, 2, 0, 0) = 1.0f;
  l(0, 1, 0, 1) = 0.5f;
  const auto m = argmax(l, 3);
  EXPECT_EQ(m.data[0], 2);
  EXPECT_EQ(m.data[1], 1);
}

TEST(Windows, OriginsCoverWithEdgeAlignment) {
  EXPECT_EQ(window_origins(64, 64, 42), (std::vector<std::size_t>{0}));
  EXPECT_EQ(window_origins(100, 64, 42), (std::vector<std::size_t>{0, 36}));
  EXPECT_EQ(window_origins(130, 64, 42), (std::vector<std::size_t>{0, 42, 66}));
  EXPECT_EQ(window_origins(10, 64, 42), (std::vector<std::size_t>{0}));
  for (std::size_t H : {37u, 64u, 90u})
    for (std::size_t W : {40u, 101u})
      for (auto c : window_coverage(H, W, 32, 21)) ASSERT_GE(c, 1u);
}

TEST(SlidingWindow, PointwiseModelEqualsWholeImage) {
  Rng rng(3);
  const PointwiseModel m;
  const auto img = random_images(rng, 2, 45, 70);
  const auto whole = m.forward(img);
  const auto slid = sliding_window_predict(m, img, 32);
  ASSERT_EQ(slid.shape(), whole.shape());
  for (std::size_t i = 0; i < whole.size(); ++i) ASSERT_NEAR(slid[i], whole[i], 1e-5);
}

TEST(SlidingWindow, WindowLargerThanImageIsWholeImage) {
  Rng rng(4);
  const auto m = tiny_model();
  const auto img = random_images(rng, 1, 16, 16);
  EXPECT_EQ(sliding_window_predict(m, img, 64), m.forward(img));
}

TEST(WholeImage, ResizesToGranularity) {
  Rng rng(5);
  const auto m = tiny_model();  // granularity 4
  const auto out = whole_image_predict(m, random_images(rng, 1, 18, 22));
  EXPECT_EQ(out.shape(), (Shape{1, 3, 18, 22}));
  PointwiseModel p;
  p.g = 4;
  const auto img = random_images(rng, 1, 16, 20);
  EXPECT_EQ(whole_image_predict(p, img), img);
}
