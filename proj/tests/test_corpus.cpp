#include <gtest/gtest.h>

#include <fstream>
#include <random>

#include "fixtures.hpp"
#include "tsgdebias/corpus.hpp"

using namespace tsgdb;

namespace {

void write_manifest(const std::filesystem::path& path, const std::vector<std::string>& lines) {
  std::ofstream os(path);
  for (const auto& l : lines) os << l << '\n';
}

std::string record(const std::string& id, double duration, double t_s, double t_e, const std::string& feat) {
  return nlohmann::json{{"id", id}, {"duration", duration}, {"feature_file", feat}, {"tokens", {3, 1, 4}},
                        {"t_s", t_s}, {"t_e", t_e}}
      .dump();
}

}  // namespace

TEST(TimeToIndex, Endpoints) {
  EXPECT_EQ(time_to_index(0.0, 10.0, 20), 0u);
  EXPECT_EQ(time_to_index(10.0, 10.0, 20), 19u);
  EXPECT_EQ(time_to_index(5.0, 10.0, 20), 10u);
}

TEST(TimeToIndex, RejectsNonPositiveDuration) {
  EXPECT_THROW(time_to_index(1.0, 0.0, 20), DomainError);
  EXPECT_THROW(time_to_index(1.0, -2.0, 20), DomainError);
}

TEST(TimeToIndex, MonotoneInTime) {
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> dur(0.5, 100.0);
  std::uniform_int_distribution<std::size_t> len(1, 200);
  for (int trial = 0; trial < 500; ++trial) {
    const double d = dur(rng);
    const std::size_t n = len(rng);
    std::size_t prev = 0;
    for (int k = 0; k <= 100; ++k) {
      const std::size_t i = time_to_index(d * k / 100.0, d, n);
      ASSERT_LE(prev, i);
      ASSERT_LT(i, n);
      prev = i;
    }
  }
}

TEST(MomentIndices, OrderedAndInRange) {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int trial = 0; trial < 2000; ++trial) {
    const double d = 1.0 + 50.0 * u(rng);
    const std::size_t n = 1 + static_cast<std::size_t>(64 * u(rng));
    double a = u(rng) * d, b = u(rng) * d;
    if (a > b) std::swap(a, b);
    const auto [is, ie] = moment_indices(a, b, d, n);
    ASSERT_LE(time_to_index(a, d, n), time_to_index(b, d, n));
    ASSERT_LE(is, ie);
    ASSERT_LT(ie, n);
  }
}

TEST(NormalizeMoment, Examples) {
  Sample s;
  s.duration = 10.0;
  s.t_s = 0.0;
  s.t_e = 10.0;
  EXPECT_EQ(normalize_moment(s), (NormalizedMoment{0.0, 1.0}));
  s.t_s = s.t_e = 5.0;
  EXPECT_EQ(normalize_moment(s), (NormalizedMoment{0.5, 0.5}));
  s.t_s = 2.0;
  s.t_e = 8.0;
  const NormalizedMoment m = normalize_moment(s);
  EXPECT_DOUBLE_EQ(m.s_norm, 0.2);
  EXPECT_DOUBLE_EQ(m.e_norm, 0.8);
}

TEST(NormalizeMoment, ScaleInvariant) {
  std::mt19937_64 rng(9);
  std::uniform_real_distribution<double> u(0.0, 1.0), c(0.01, 100.0);
  for (int trial = 0; trial < 1000; ++trial) {
    Sample s;
    s.duration = 1.0 + 10.0 * u(rng);
    s.t_s = u(rng) * s.duration;
    s.t_e = s.t_s + u(rng) * (s.duration - s.t_s);
    const double k = c(rng);
    Sample t = s;
    t.duration *= k;
    t.t_s *= k;
    t.t_e *= k;
    const NormalizedMoment a = normalize_moment(s), b = normalize_moment(t);
    ASSERT_NEAR(a.s_norm, b.s_norm, 1e-12);
    ASSERT_NEAR(a.e_norm, b.e_norm, 1e-12);
  }
}

TEST(FeatureFile, RoundTripIsExactForFloatValues) {
  const auto dir = fixtures::temp_dir("feat_rt");
  Tensor t(3, 4);
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = static_cast<double>(static_cast<float>(0.1 * i - 0.7));
  write_feature_file(dir / "a.feat", t);
  EXPECT_EQ(read_feature_file(dir / "a.feat"), t);
  EXPECT_EQ(std::filesystem::file_size(dir / "a.feat"), 4u + 8u + 12u * 4u);
}

TEST(FeatureFile, RejectsBadMagicAndTruncation) {
  const auto dir = fixtures::temp_dir("feat_bad");
  write_feature_file(dir / "a.feat", Tensor(2, 2, 1.0));
  {
    std::fstream f(dir / "a.feat", std::ios::in | std::ios::out | std::ios::binary);
    f.write("XEAT", 4);
  }
  EXPECT_THROW(read_feature_file(dir / "a.feat"), FormatError);
  write_feature_file(dir / "b.feat", Tensor(2, 2, 1.0));
  std::filesystem::resize_file(dir / "b.feat", 4 + 8 + 10);
  EXPECT_THROW(read_feature_file(dir / "b.feat"), FormatError);
  {
    std::ofstream f(dir / "b.feat", std::ios::app | std::ios::binary);
    f.write("123456789", 9);
  }
  EXPECT_THROW(read_feature_file(dir / "b.feat"), FormatError);
}

TEST(LoadDataset, EmptyManifestGivesEmptyDataset) {
  const auto dir = fixtures::temp_dir("load_empty");
  write_manifest(dir / "m.jsonl", {});
  const Dataset ds = load_dataset(dir / "m.jsonl");
  EXPECT_TRUE(ds.empty());
  EXPECT_EQ(ds.vocab_size, 0u);
}

TEST(LoadDataset, ComputesIndicesFromTimes) {
  const auto dir = fixtures::temp_dir("load_idx");
  write_feature_file(dir / "a.feat", Tensor(20, 3, 0.5));
  write_manifest(dir / "m.jsonl", {record("full", 10.0, 0.0, 10.0, "a.feat"), record("mid", 10.0, 5.0, 7.5, "a.feat")});
  const Dataset ds = load_dataset(dir / "m.jsonl");
  ASSERT_EQ(ds.size(), 2u);
  EXPECT_EQ(ds.samples[0].i_s, 0u);
  EXPECT_EQ(ds.samples[0].i_e, 19u);
  EXPECT_EQ(ds.samples[1].i_s, 10u);
  EXPECT_EQ(ds.samples[1].i_e, 14u);
  EXPECT_EQ(ds.vocab_size, 5u);
  for (const Sample& s : ds.samples) EXPECT_NO_THROW(validate_sample(s, ds.vocab_size));
}

TEST(LoadDataset, ParseErrorCarriesLineNumber) {
  const auto dir = fixtures::temp_dir("load_parse");
  write_feature_file(dir / "a.feat", Tensor(4, 2));
  write_manifest(dir / "m.jsonl", {record("ok", 4.0, 0.0, 1.0, "a.feat"), "{not json"});
  try {
    load_dataset(dir / "m.jsonl");
    FAIL() << "expected ParseError";
  } catch (const ParseError& e) {
    EXPECT_NE(std::string(e.what()).find(":2"), std::string::npos) << e.what();
  }
}

TEST(LoadDataset, EndBeyondDurationNamesTheSample) {
  const auto dir = fixtures::temp_dir("load_valid");
  write_feature_file(dir / "a.feat", Tensor(4, 2));
  write_manifest(dir / "m.jsonl", {record("late-one", 4.0, 1.0, 4.5, "a.feat")});
  try {
    load_dataset(dir / "m.jsonl");
    FAIL() << "expected ValidationError";
  } catch (const ValidationError& e) {
    EXPECT_NE(std::string(e.what()).find("late-one"), std::string::npos);
  }
}

TEST(LoadDataset, FeatureWidthMismatchIsFormatError) {
  const auto dir = fixtures::temp_dir("load_width");
  write_feature_file(dir / "a.feat", Tensor(4, 2));
  write_feature_file(dir / "b.feat", Tensor(4, 3));
  write_manifest(dir / "m.jsonl", {record("a", 4.0, 0.0, 1.0, "a.feat"), record("b", 4.0, 0.0, 1.0, "b.feat")});
  EXPECT_THROW(load_dataset(dir / "m.jsonl"), FormatError);
}

TEST(LoadDataset, LongSequencesArePooledAndIndicesRemapped) {
  const auto dir = fixtures::temp_dir("load_pool");
  Tensor t(256, 1);
  for (std::size_t r = 0; r < 256; ++r) t(r, 0) = static_cast<double>(r);
  write_feature_file(dir / "a.feat", t);
  write_manifest(dir / "m.jsonl", {record("long", 256.0, 64.0, 128.0, "a.feat")});
  const Dataset ds = load_dataset(dir / "m.jsonl");
  const Sample& s = ds.samples.front();
  EXPECT_EQ(s.n_v(), kMaxVisualLength);
  EXPECT_DOUBLE_EQ(s.features(0, 0), 0.5);
  EXPECT_DOUBLE_EQ(s.features(127, 0), 254.5);
  EXPECT_EQ(s.i_s, 32u);
  EXPECT_EQ(s.i_e, 63u);
}

TEST(LoadDataset, DeterministicAndRoundTripsThroughSave) {
  const auto dir = fixtures::temp_dir("load_rt");
  Dataset ds;
  for (std::size_t k = 0; k < 5; ++k) {
    Sample s = fixtures::ramp_sample(8 + k, 1, 3 + k);
    s.id = "s" + std::to_string(k);
    for (double& v : s.features.values()) v = static_cast<float>(v);  // feature files hold f32
    ds.samples.push_back(s);
  }
  ds.vocab_size = 4;
  save_dataset(ds, dir / "m.jsonl");
  const Dataset a = load_dataset(dir / "m.jsonl"), b = load_dataset(dir / "m.jsonl");
  EXPECT_EQ(a, b);
  EXPECT_EQ(a.samples, ds.samples);
}

TEST(ConcatTestAll, IidThenOod) {
  Dataset iid{Split::test_iid, {fixtures::ramp_sample(4, 0, 1)}, 4};
  Dataset ood{Split::test_ood, {fixtures::ramp_sample(5, 2, 3), fixtures::ramp_sample(6, 1, 1)}, 6};
  const Dataset all = concat_test_all(iid, ood);
  EXPECT_EQ(all.split, Split::test_all);
  ASSERT_EQ(all.size(), 3u);
  EXPECT_EQ(all.samples[0], iid.samples[0]);
  EXPECT_EQ(all.samples[2], ood.samples[1]);
  EXPECT_EQ(all.vocab_size, 6u);
}
