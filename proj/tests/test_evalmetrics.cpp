#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <set>
#include <sstream>

#include "tsgdebias/evalmetrics.hpp"

using namespace tsgdb;

namespace {

// Independent reference: IoU by explicit set intersection of covered rows.
double ref_iou(std::size_t ps, std::size_t pe, std::size_t gs, std::size_t ge) {
  std::set<std::size_t> a, b;
  for (std::size_t i = ps; i <= pe; ++i) a.insert(i);
  for (std::size_t i = gs; i <= ge; ++i) b.insert(i);
  std::size_t inter = 0;
  for (std::size_t i : a) inter += b.count(i);
  std::set<std::size_t> u = a;
  u.insert(b.begin(), b.end());
  return static_cast<double>(inter) / static_cast<double>(u.size());
}

struct Pair {
  std::vector<Prediction> p;
  std::vector<GroundTruth> g;
};

Pair with_ious(const std::vector<std::pair<Span, Span>>& spans, std::size_t n_v = 20) {
  Pair out;
  for (std::size_t k = 0; k < spans.size(); ++k) {
    const std::string id = "s" + std::to_string(k);
    out.p.push_back({id, spans[k].first.s, spans[k].first.e, 1.0});
    out.g.push_back({id, spans[k].second.s, spans[k].second.e, n_v});
  }
  return out;
}

}  // namespace

TEST(ExtractSpan, Examples) {
  const std::vector<double> a1{1, 0, 0}, b1{0, 0, 1};
  const SpanChoice c1 = extract_span(a1, b1);
  EXPECT_EQ(c1.i_s, 0u);
  EXPECT_EQ(c1.i_e, 2u);

  const std::vector<double> a2{0.1, 0.7, 0.2}, b2{0.7, 0.1, 0.2};
  const SpanChoice c2 = extract_span(a2, b2);
  EXPECT_EQ(c2.i_s, 1u);
  EXPECT_EQ(c2.i_e, 2u);
  EXPECT_NEAR(c2.score, 0.14, 1e-15);

  const std::vector<double> u(3, 1.0 / 3.0);
  const SpanChoice c3 = extract_span(u, u);
  EXPECT_EQ(c3.i_s, 0u);
  EXPECT_EQ(c3.i_e, 0u);
}

TEST(ExtractSpan, MatchesBruteForceAndIsOrdered) {
  std::mt19937_64 rng(8);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int trial = 0; trial < 2000; ++trial) {
    const std::size_t n = std::uniform_int_distribution<std::size_t>(1, 12)(rng);
    std::vector<double> a(n), b(n);
    // Coarse values force frequent ties.
    for (auto& x : a) x = std::floor(u(rng) * 4.0);
    for (auto& x : b) x = std::floor(u(rng) * 4.0);
    double best = -1.0;
    std::size_t bi = 0, bj = 0;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = i; j < n; ++j)
        if (a[i] * b[j] > best) {
          best = a[i] * b[j];
          bi = i;
          bj = j;
        }
    const SpanChoice c = extract_span(a, b);
    ASSERT_LE(c.i_s, c.i_e);
    ASSERT_EQ(c.i_s, bi);
    ASSERT_EQ(c.i_e, bj);
  }
}

TEST(Iou, Examples) {
  EXPECT_DOUBLE_EQ(iou({3, 7}, {3, 7}), 1.0);
  EXPECT_DOUBLE_EQ(iou({0, 1}, {5, 6}), 0.0);
  EXPECT_NEAR(iou({2, 6}, {4, 8}), 3.0 / 7.0, 1e-15);
}

TEST(Iou, SymmetricBoundedAndMatchesSetOracle) {
  std::mt19937_64 rng(12);
  std::uniform_int_distribution<std::size_t> d(0, 30);
  for (int trial = 0; trial < 3000; ++trial) {
    std::size_t a = d(rng), b = d(rng), c = d(rng), e = d(rng);
    if (a > b) std::swap(a, b);
    if (c > e) std::swap(c, e);
    const double x = iou({a, b}, {c, e});
    ASSERT_DOUBLE_EQ(x, iou({c, e}, {a, b}));
    ASSERT_GE(x, 0.0);
    ASSERT_LE(x, 1.0);
    ASSERT_NEAR(x, ref_iou(a, b, c, e), 1e-15);
  }
}

TEST(RecallAt1, Examples) {
  Pair exact = with_ious({{{1, 4}, {1, 4}}, {{0, 0}, {0, 0}}});
  for (double mu : kIouThresholds) EXPECT_DOUBLE_EQ(recall_at1(exact.p, exact.g, mu), 100.0);

  // IoUs 1.0, 0.6, 0.4, 0.0
  Pair four = with_ious({{{0, 9}, {0, 9}}, {{0, 5}, {0, 9}}, {{0, 3}, {0, 9}}, {{15, 16}, {0, 9}}});
  EXPECT_DOUBLE_EQ(recall_at1(four.p, four.g, 0.5), 50.0);
  EXPECT_DOUBLE_EQ(recall_at1(four.p, four.g, 0.0), 100.0);
  EXPECT_DOUBLE_EQ(recall_at1(four.p, four.g, 0.6), 50.0);  // >= at the boundary
}

TEST(RecallAt1, MisalignedIdsAreRejected) {
  Pair p = with_ious({{{1, 4}, {1, 4}}, {{0, 0}, {0, 0}}});
  std::swap(p.g[0], p.g[1]);
  EXPECT_THROW(recall_at1(p.p, p.g, 0.5), EvaluationError);
  p.g.pop_back();
  EXPECT_THROW(mean_iou(p.p, p.g), EvaluationError);
}

TEST(DiscountedRecall, Examples) {
  Pair exact = with_ious({{{4, 15}, {4, 15}}});
  EXPECT_DOUBLE_EQ(discounted_recall_at1(exact.p, exact.g, 0.7), 100.0);
  Pair miss = with_ious({{{0, 1}, {4, 15}}});
  EXPECT_DOUBLE_EQ(discounted_recall_at1(miss.p, miss.g, 0.3), 0.0);
  Pair over = with_ious({{{2, 15}, {4, 15}}}, 20);
  EXPECT_NEAR(iou({2, 15}, {4, 15}), 12.0 / 14.0, 1e-15);
  EXPECT_NEAR(discounted_recall_at1(over.p, over.g, 0.5), 90.0, 1e-12);
}

TEST(MeanIou, Examples) {
  Pair exact = with_ious({{{1, 4}, {1, 4}}});
  EXPECT_DOUBLE_EQ(mean_iou(exact.p, exact.g), 100.0);
  Pair half = with_ious({{{1, 4}, {1, 4}}, {{0, 1}, {5, 6}}});
  EXPECT_DOUBLE_EQ(mean_iou(half.p, half.g), 50.0);
  Pair three = with_ious({{{2, 6}, {4, 8}}, {{1, 4}, {1, 4}}, {{0, 1}, {5, 6}}});
  EXPECT_NEAR(mean_iou(three.p, three.g), 100.0 * (3.0 / 7.0 + 1.0) / 3.0, 1e-12);
  EXPECT_THROW(mean_iou({}, {}), DomainError);
}

TEST(ScorePredictions, OracleAndConstantPredictors) {
  // Three-sample toy set: constant [0,0] predictions.
  const std::vector<GroundTruth> g{{"a", 0, 0, 4}, {"b", 0, 3, 4}, {"c", 2, 3, 5}};
  std::vector<Prediction> oracle, constant;
  for (const GroundTruth& x : g) {
    oracle.push_back({x.sample_id, x.i_s, x.i_e, 1.0});
    constant.push_back({x.sample_id, 0, 0, 1.0});
  }
  const MetricReport o = score_predictions(oracle, g, "toy");
  for (std::size_t k = 0; k < 3; ++k) {
    EXPECT_DOUBLE_EQ(o.r1[k], 100.0);
    EXPECT_DOUBLE_EQ(o.dr1[k], 100.0);
  }
  EXPECT_DOUBLE_EQ(o.miou, 100.0);

  // By hand: IoUs 1, 1/4, 0. Only "a" clears any threshold >= 0.3.
  const MetricReport c = score_predictions(constant, g, "toy");
  EXPECT_EQ(c.count, 3u);
  for (std::size_t k = 0; k < 3; ++k) {
    EXPECT_DOUBLE_EQ(c.r1[k], 100.0 / 3.0);
    EXPECT_DOUBLE_EQ(c.dr1[k], 100.0 / 3.0);
  }
  EXPECT_DOUBLE_EQ(c.miou, 100.0 * 1.25 / 3.0);
}

TEST(ScorePredictions, MonotoneInMuAndDiscountDominated) {
  std::mt19937_64 rng(21);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<Prediction> p;
    std::vector<GroundTruth> g;
    for (int k = 0; k < 50; ++k) {
      const std::size_t n = std::uniform_int_distribution<std::size_t>(1, 40)(rng);
      std::uniform_int_distribution<std::size_t> d(0, n - 1);
      std::size_t a = d(rng), b = d(rng), c = d(rng), e = d(rng);
      if (a > b) std::swap(a, b);
      if (c > e) std::swap(c, e);
      const std::string id = std::to_string(k);
      p.push_back({id, a, b, 0.0});
      g.push_back({id, c, e, n});
    }
    const MetricReport r = score_predictions(p, g, "x");
    for (std::size_t k = 0; k < 3; ++k) {
      ASSERT_LE(r.dr1[k], r.r1[k]);
      ASSERT_GE(r.dr1[k], 0.0);
      ASSERT_LE(r.r1[k], 100.0);
      if (k > 0) {
        ASSERT_LE(r.r1[k], r.r1[k - 1]);
        ASSERT_LE(r.dr1[k], r.dr1[k - 1]);
      }
    }
  }
}

TEST(ReportJson, RoundTripAndCsvRow) {
  MetricReport r{"test_ood", {50.0, 40.0, 10.0}, {45.5, 30.25, 5.0}, 42.126, 600};
  EXPECT_EQ(report_from_json(to_json(r)), r);
  std::ostringstream os;
  write_report_csv_row(os, r);
  EXPECT_EQ(os.str(), "test_ood,600,50.00,40.00,10.00,45.50,30.25,5.00,42.13\n");
}
