#include <gtest/gtest.h>

#include <boost/math/distributions/chi_squared.hpp>

#include "fixtures.hpp"
#include "tsgdebias/biasaudit.hpp"
#include "tsgdebias/synthgen.hpp"

using namespace tsgdb;

namespace {

SynthSpec small_spec(std::uint64_t seed = 1) {
  SynthSpec s;
  s.n_train = 200;
  s.n_val = 20;
  s.n_test_iid = 20;
  s.n_test_ood = 60;
  s.seed = seed;
  return s;
}

double dot(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

}  // namespace

TEST(UpperTriangleArea, ClosedForms) {
  EXPECT_NEAR(upper_triangle_area({0, 1, 0, 1}), 0.5, 1e-15);
  EXPECT_NEAR(upper_triangle_area({0.2, 0.4, 0.2, 0.4}), 0.02, 1e-15);   // half of the 0.2 x 0.2 square
  EXPECT_NEAR(upper_triangle_area({0.0, 0.2, 0.5, 0.9}), 0.08, 1e-15);   // fully above the diagonal
  EXPECT_NEAR(upper_triangle_area({0.6, 0.9, 0.1, 0.5}), 0.0, 1e-15);    // fully below
}

TEST(SynthSpecValidation, RejectsDegenerateRegions) {
  SynthSpec s;
  s.bias_region = {0.3, 0.3, 0.3, 0.3};
  EXPECT_THROW(validate(s), ConfigError);
  s.bias_strength = 0.0;
  EXPECT_NO_THROW(validate(s));
  s.bias_region = {0.0, 1.0, 0.0, 1.0};
  EXPECT_THROW(validate(s), ConfigError);
  s = SynthSpec{};
  s.n_concepts = 17;
  EXPECT_THROW(validate(s), ConfigError);
  s = SynthSpec{};
  s.decoy_prob = 1.5;
  EXPECT_THROW(validate(s), ConfigError);
}

TEST(ConceptSignal, UnitNormDeterministicAndSeparated) {
  const auto codes = concept_signals(8, 16, 3);
  double max_off = 0.0;
  for (std::size_t i = 0; i < codes.size(); ++i) {
    EXPECT_NEAR(std::sqrt(dot(codes[i], codes[i])), 1.0, 1e-6);
    for (std::size_t j = 0; j < i; ++j) max_off = std::max(max_off, std::abs(dot(codes[i], codes[j])));
  }
  EXPECT_LT(max_off, 0.5);
  EXPECT_EQ(concept_signal(5, 16, 3), concept_signal(5, 16, 3));
  EXPECT_EQ(concept_signal(5, 16, 3), codes[5]);
  EXPECT_THROW(concept_signals(17, 16, 3), ConfigError);
}

TEST(GenerateBenchmark, DeterministicPerSeed) {
  const Benchmark a = generate_benchmark(small_spec(7)), b = generate_benchmark(small_spec(7));
  EXPECT_EQ(a, b);
  const Benchmark c = generate_benchmark(small_spec(8));
  EXPECT_NE(a.train.samples.front().features, c.train.samples.front().features);
}

TEST(GenerateBenchmark, SplitSizesAndValidity) {
  const SynthSpec spec = small_spec();
  const Benchmark b = generate_benchmark(spec);
  EXPECT_EQ(b.train.size(), spec.n_train);
  EXPECT_EQ(b.val.size(), spec.n_val);
  EXPECT_EQ(b.test_iid.size(), spec.n_test_iid);
  EXPECT_EQ(b.test_ood.size(), spec.n_test_ood);
  for (const Dataset* ds : {&b.train, &b.val, &b.test_iid, &b.test_ood})
    for (const Sample& s : ds->samples) {
      ASSERT_NO_THROW(validate_sample(s, spec.vocab_size));
      const NormalizedMoment m = normalize_moment(s);
      ASSERT_LE(m.s_norm, m.e_norm);
      ASSERT_GE(s.n_v(), spec.n_v_min);
      ASSERT_LE(s.n_v(), spec.n_v_max);
      ASSERT_EQ(s.d_v(), spec.d_v);
    }
}

TEST(GenerateBenchmark, OodAvoidsTheBiasRegion) {
  SynthSpec spec = small_spec();
  spec.n_test_ood = 2000;
  const Benchmark b = generate_benchmark(spec);
  for (const Sample& s : b.test_ood.samples) {
    const NormalizedMoment m = normalize_moment(s);
    ASSERT_FALSE(spec.bias_region.contains(m.s_norm, m.e_norm)) << s.id;
  }
}

TEST(GenerateBenchmark, FullStrengthPutsEveryTrainMomentInRegion) {
  SynthSpec spec = small_spec();
  spec.bias_strength = 1.0;
  const Benchmark b = generate_benchmark(spec);
  EXPECT_DOUBLE_EQ(biased_proportion(b.train, BiasRegion{{spec.bias_region}}), 1.0);
}

TEST(GenerateBenchmark, DefaultStrengthProportionWithinSamplingError) {
  const SynthSpec spec;
  const Benchmark b = generate_benchmark(spec);
  // Inside mass: strength + (1 - strength) * area(region) / area(triangle).
  const double expected = spec.bias_strength + (1.0 - spec.bias_strength) * 0.02 / 0.5;
  const double sd = std::sqrt(expected * (1.0 - expected) / static_cast<double>(spec.n_train));
  EXPECT_NEAR(biased_proportion(b.train, BiasRegion{{spec.bias_region}}), expected, 4.0 * sd);
}

TEST(GenerateBenchmark, UnbiasedTrainIsUniformOverTheTriangle) {
  SynthSpec spec = small_spec(21);
  spec.bias_strength = 0.0;
  spec.n_train = 5000;
  const Benchmark b = generate_benchmark(spec);
  // Chi-square over the 15 upper-triangle cells of a 5x5 grid; diagonal cells
  // have half the area of the others.
  const DensityGrid g = density_grid(b.train, 5);
  double stat = 0.0;
  std::size_t cells = 0;
  for (std::size_t i = 0; i < 5; ++i)
    for (std::size_t j = i; j < 5; ++j) {
      const double p = (i == j ? 0.5 : 1.0) * 0.04 / 0.5;
      const double e = p * static_cast<double>(g.total);
      stat += (static_cast<double>(g.at(i, j)) - e) * (static_cast<double>(g.at(i, j)) - e) / e;
      ++cells;
    }
  const boost::math::chi_squared chi(static_cast<double>(cells - 1));
  EXPECT_GT(boost::math::cdf(boost::math::complement(chi, stat)), 0.01) << "chi2 = " << stat;
}

TEST(GenerateBenchmark, CleanSignalPeaksExactlyOnTheMoment) {
  SynthSpec spec = small_spec(4);
  spec.noise_sigma = 0.0;
  const Benchmark b = generate_benchmark(spec);
  const auto codes = concept_signals(spec.n_concepts, spec.d_v, spec.seed);
  for (const Dataset* ds : {&b.train, &b.test_ood})
    for (const Sample& s : ds->samples) {
      const auto& code = codes[query_concept(s, spec.n_concepts)];
      double inside = std::numeric_limits<double>::infinity(), outside = -inside;
      for (std::size_t r = 0; r < s.n_v(); ++r) {
        std::vector<double> row(s.features.row(r).begin(), s.features.row(r).end());
        const double v = dot(row, code);
        if (r >= s.i_s && r <= s.i_e)
          inside = std::min(inside, v);
        else
          outside = std::max(outside, v);
      }
      ASSERT_GT(inside, outside) << s.id;
    }
}

TEST(GenerateBenchmark, QueriesNameExactlyOneConcept) {
  const SynthSpec spec = small_spec();
  const Benchmark b = generate_benchmark(spec);
  for (const Sample& s : b.train.samples) {
    const std::size_t c = query_concept(s, spec.n_concepts);
    std::size_t keywords = 0;
    for (std::size_t t : s.tokens)
      if (t < 2 * spec.n_concepts) {
        ASSERT_EQ(t / 2, c);
        ++keywords;
      }
    ASSERT_EQ(keywords, 2u);
  }
}

TEST(SaveBenchmark, ReloadMatchesInMemory) {
  const auto dir = fixtures::temp_dir("synth_save");
  const SynthSpec spec = small_spec(2);
  const Benchmark b = generate_benchmark(spec);
  save_benchmark(b, spec, dir);
  EXPECT_EQ(load_benchmark_spec(dir), spec);
  LoadOptions opts;
  opts.split = Split::test_ood;
  const Dataset ood = load_dataset(split_manifest(dir, Split::test_ood), opts);
  EXPECT_EQ(ood.samples, b.test_ood.samples);
}

TEST(GenerateBenchmark, DecoyIsOneBlockOfAnotherConcept) {
  SynthSpec spec = small_spec(6);
  spec.noise_sigma = 0.0;
  spec.distractor_prob = 0.0;
  const Benchmark b = generate_benchmark(spec);
  const auto codes = concept_signals(spec.n_concepts, spec.d_v, spec.seed);
  std::size_t with_decoy = 0;
  for (const Sample& s : b.train.samples) {
    const std::size_t target = query_concept(s, spec.n_concepts);
    std::vector<std::size_t> rows;
    std::size_t concept_id = spec.n_concepts;
    for (std::size_t r = 0; r < s.n_v(); ++r) {
      if (r >= s.i_s && r <= s.i_e) continue;
      std::vector<double> row(s.features.row(r).begin(), s.features.row(r).end());
      if (dot(row, row) == 0.0) continue;
      rows.push_back(r);
      for (std::size_t c = 0; c < spec.n_concepts; ++c)
        if (std::abs(dot(row, codes[c]) - 1.0) < 1e-5) {
          ASSERT_TRUE(concept_id == spec.n_concepts || concept_id == c) << s.id;
          concept_id = c;
        }
    }
    if (rows.empty()) continue;
    ++with_decoy;
    EXPECT_NE(concept_id, target) << s.id;
    EXPECT_LT(concept_id, spec.n_concepts) << s.id;
    EXPECT_EQ(rows.back() - rows.front() + 1, rows.size()) << s.id;
  }
  EXPECT_GT(with_decoy, b.train.size() * 3 / 4);
}

TEST(GenerateBenchmark, WithoutDecoysOrDistractorsTheBackgroundIsEmpty) {
  SynthSpec spec = small_spec(6);
  spec.noise_sigma = 0.0;
  spec.distractor_prob = 0.0;
  spec.decoy_prob = 0.0;
  for (const Sample& s : generate_benchmark(spec).test_ood.samples)
    for (std::size_t r = 0; r < s.n_v(); ++r)
      if (r < s.i_s || r > s.i_e)
        for (double v : s.features.row(r)) ASSERT_EQ(v, 0.0) << s.id;
}
