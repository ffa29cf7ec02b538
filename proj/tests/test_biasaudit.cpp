#include <gtest/gtest.h>

#include <random>
#include <sstream>

#include "fixtures.hpp"
#include "tsgdebias/biasaudit.hpp"
#include "tsgdebias/ddebias.hpp"
#include "tsgdebias/synthgen.hpp"

using namespace tsgdb;

namespace {

Sample at(double s, double e) {
  Sample x;
  x.duration = 1.0;
  x.t_s = s;
  x.t_e = e;
  return x;
}

Dataset three() { return Dataset{Split::train, {at(0.25, 0.35), at(0.25, 0.35), at(0.9, 0.95)}, 0}; }

}  // namespace

TEST(DensityGrid, Examples) {
  const DensityGrid empty = density_grid(Dataset{}, 10);
  EXPECT_EQ(empty.total, 0u);
  EXPECT_TRUE(std::all_of(empty.counts.begin(), empty.counts.end(), [](std::size_t c) { return c == 0; }));

  const DensityGrid corner = density_grid(Dataset{Split::train, {at(0.0, 1.0)}, 0}, 10);
  EXPECT_EQ(corner.at(0, 9), 1u);
  EXPECT_EQ(corner.total, 1u);

  const DensityGrid g = density_grid(three(), 10);
  EXPECT_EQ(g.at(2, 3), 2u);
  EXPECT_EQ(g.at(9, 9), 1u);
  EXPECT_EQ(g.total, 3u);
}

TEST(DensityGrid, MassConservedAndLowerTriangleEmpty) {
  const Benchmark b = generate_benchmark(SynthSpec{});
  for (std::size_t bins : {1u, 3u, 10u, 40u, 97u}) {
    const DensityGrid g = density_grid(b.train, bins);
    std::size_t sum = 0;
    for (std::size_t i = 0; i < bins; ++i)
      for (std::size_t j = 0; j < bins; ++j) {
        sum += g.at(i, j);
        if (i > j) ASSERT_EQ(g.at(i, j), 0u);
      }
    EXPECT_EQ(sum, b.train.size());
    EXPECT_EQ(g.total, b.train.size());
  }
}

TEST(DensityGrid, PartialGridsMergeByAddition) {
  const Benchmark b = generate_benchmark(SynthSpec{});
  Dataset lo = b.train, hi = b.train;
  lo.samples.resize(700);
  hi.samples.erase(hi.samples.begin(), hi.samples.begin() + 700);
  DensityGrid merged = density_grid(lo, 40);
  merged += density_grid(hi, 40);
  EXPECT_EQ(merged, density_grid(b.train, 40));
}

TEST(BiasedProportion, Examples) {
  EXPECT_DOUBLE_EQ(biased_proportion(three(), BiasRegion{{{0, 1, 0, 1}}}), 1.0);
  EXPECT_DOUBLE_EQ(biased_proportion(three(), BiasRegion{}), 0.0);
  EXPECT_DOUBLE_EQ(biased_proportion(three(), BiasRegion{{{0.2, 0.4, 0.2, 0.4}}}), 2.0 / 3.0);
}

TEST(BiasedProportion, ClosedBounds) {
  const Dataset d{Split::train, {at(0.2, 0.4)}, 0};
  EXPECT_DOUBLE_EQ(biased_proportion(d, BiasRegion{{{0.2, 0.4, 0.2, 0.4}}}), 1.0);
}

TEST(KlToUniform, Examples) {
  DensityGrid g{10, std::vector<std::size_t>(100, 0), 0};
  for (std::size_t i = 0; i < 10; ++i)
    for (std::size_t j = i; j < 10; ++j) {
      g.at(i, j) = 3;
      g.total += 3;
    }
  EXPECT_NEAR(kl_to_uniform(g), 0.0, 1e-12);

  DensityGrid point{10, std::vector<std::size_t>(100, 0), 7};
  point.at(4, 6) = 7;
  EXPECT_NEAR(kl_to_uniform(point), std::log(55.0), 1e-12);

  EXPECT_THROW(kl_to_uniform(DensityGrid{10, std::vector<std::size_t>(100, 0), 0}), DomainError);
}

TEST(KlToUniform, NonNegativeOnRandomGrids) {
  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 500; ++trial) {
    const std::size_t bins = std::uniform_int_distribution<std::size_t>(1, 12)(rng);
    DensityGrid g{bins, std::vector<std::size_t>(bins * bins, 0), 0};
    for (std::size_t i = 0; i < bins; ++i)
      for (std::size_t j = i; j < bins; ++j) {
        g.at(i, j) = std::uniform_int_distribution<std::size_t>(0, 5)(rng);
        g.total += g.at(i, j);
      }
    if (g.total == 0) continue;
    ASSERT_GE(kl_to_uniform(g), 0.0);
  }
}

TEST(PGap, PublishedValues) {
  EXPECT_NEAR(p_gap(39.25, 27.20), 30.70, 0.005);
  EXPECT_NEAR(p_gap(31.37, 11.59), 63.05, 0.005);
  EXPECT_DOUBLE_EQ(p_gap(42.0, 42.0), 0.0);
  EXPECT_THROW(p_gap(0.0, 1.0), DomainError);
}

TEST(PGap, ScaleInvariant) {
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> u(0.1, 100.0), c(0.01, 50.0);
  for (int trial = 0; trial < 1000; ++trial) {
    const double a = u(rng), b = u(rng), k = c(rng);
    ASSERT_NEAR(p_gap(k * a, k * b), p_gap(a, b), 1e-9 * std::max(1.0, p_gap(a, b)));
  }
}

TEST(AugmentationAudit, ProportionDropsForTheGeneratingRegion) {
  SynthSpec spec;
  spec.n_train = 400;
  const Benchmark b = generate_benchmark(spec);
  const BiasRegion region{{spec.bias_region}};
  for (std::size_t n_clip : {4u, 5u, 6u}) {
    const Dataset aug = debias_dataset(b.train, n_clip);
    EXPECT_LT(biased_proportion(aug, region), biased_proportion(b.train, region)) << n_clip;
    EXPECT_LT(kl_to_uniform(density_grid(aug)), kl_to_uniform(density_grid(b.train))) << n_clip;
  }
}

TEST(GridCsv, BinsRowsOfBinsColumns) {
  std::ostringstream os;
  write_grid_csv(os, density_grid(three(), 4));
  const std::string text = os.str();
  EXPECT_EQ(std::count(text.begin(), text.end(), '\n'), 4);
  EXPECT_EQ(std::count(text.begin(), text.end(), ','), 12);
  EXPECT_EQ(text.substr(0, 8), "0,0,0,0\n");
  EXPECT_EQ(text.substr(8, 8), "0,2,0,0\n");
}
