#pragma once

// Synthetic grounding benchmarks with a controllable annotation bias.
//
// Every sample pairs a latent concept with a query that names it and a
// feature sequence in which the concept's code vector occupies exactly the
// moment rows. Background rows hold noise and segments of *other* concepts,
// so the moment can only be located by matching the query against the video.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "tsgdebias/corpus.hpp"
#include "tsgdebias/errors.hpp"

namespace tsgdb {

/// Axis-aligned rectangle in normalized (start, end) space, closed bounds.
struct Rect {
  double s_lo = 0.0, s_hi = 1.0, e_lo = 0.0, e_hi = 1.0;

  bool contains(double s, double e) const noexcept {
    return s >= s_lo && s <= s_hi && e >= e_lo && e <= e_hi;
  }
  friend bool operator==(const Rect&, const Rect&) = default;
};

inline void to_json(nlohmann::json& j, const Rect& r) { j = {r.s_lo, r.s_hi, r.e_lo, r.e_hi}; }
inline void from_json(const nlohmann::json& j, Rect& r) {
  if (!j.is_array() || j.size() != 4) throw ConfigError("rectangle must be [s_lo, s_hi, e_lo, e_hi]");
  r = {j[0].get<double>(), j[1].get<double>(), j[2].get<double>(), j[3].get<double>()};
}

/// Area of rect ∩ {0 <= s <= e <= 1}.
inline double upper_triangle_area(const Rect& r) {
  const double a = std::clamp(r.s_lo, 0.0, 1.0), b = std::clamp(r.s_hi, 0.0, 1.0);
  const double lo = std::clamp(r.e_lo, 0.0, 1.0), hi = std::clamp(r.e_hi, 0.0, 1.0);
  if (b <= a || hi <= lo) return 0.0;
  // f(s) = max(0, hi - max(lo, s)) is piecewise linear with kinks at lo and hi.
  auto f = [&](double s) { return std::max(0.0, hi - std::max(lo, s)); };
  std::vector<double> pts = {a, b};
  for (double k : {lo, hi})
    if (k > a && k < b) pts.push_back(k);
  std::sort(pts.begin(), pts.end());
  double area = 0.0;
  for (std::size_t i = 0; i + 1 < pts.size(); ++i)
    area += 0.5 * (f(pts[i]) + f(pts[i + 1])) * (pts[i + 1] - pts[i]);
  return area;
}

struct SynthSpec {
  std::size_t n_train = 2000;
  std::size_t n_val = 300;
  std::size_t n_test_iid = 300;
  std::size_t n_test_ood = 600;
  std::size_t n_v_min = 16;
  std::size_t n_v_max = 32;
  std::size_t d_v = 16;
  std::size_t vocab_size = 50;
  std::size_t n_concepts = 8;
  Rect bias_region{0.2, 0.4, 0.2, 0.4};
  double bias_strength = 0.8;
  double noise_sigma = 0.3;
  std::uint64_t seed = 0;
  // Generator texture.
  std::size_t query_len_min = 4;
  std::size_t query_len_max = 8;
  double distractor_prob = 0.5;
  double decoy_prob = 1.0;
  std::size_t segment_len_min = 2;
  std::size_t segment_len_max = 6;

  friend bool operator==(const SynthSpec&, const SynthSpec&) = default;
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(SynthSpec, n_train, n_val, n_test_iid, n_test_ood, n_v_min,
                                                n_v_max, d_v, vocab_size, n_concepts, bias_region,
                                                bias_strength, noise_sigma, seed, query_len_min,
                                                query_len_max, distractor_prob, decoy_prob,
                                                segment_len_min, segment_len_max)

inline void validate(const SynthSpec& spec) {
  const Rect& r = spec.bias_region;
  for (double v : {r.s_lo, r.s_hi, r.e_lo, r.e_hi})
    if (!(v >= 0.0 && v <= 1.0)) throw ConfigError("bias_region must lie within [0,1]^2");
  if (r.s_lo > r.s_hi || r.e_lo > r.e_hi) throw ConfigError("bias_region bounds are inverted");
  if (!(spec.bias_strength >= 0.0 && spec.bias_strength <= 1.0))
    throw ConfigError("bias_strength must lie in [0,1]");
  const double inside = upper_triangle_area(r);
  if (spec.bias_strength > 0.0 && inside <= 0.0)
    throw ConfigError("bias_region has zero area inside the upper triangle");
  if (0.5 - inside <= 1e-12) throw ConfigError("complement of bias_region is empty");
  if (spec.n_v_min == 0 || spec.n_v_min > spec.n_v_max) throw ConfigError("invalid n_v_range");
  if (spec.n_v_max > kMaxVisualLength) throw ConfigError("n_v_max exceeds the maximum visual length");
  if (spec.n_concepts == 0 || spec.n_concepts > spec.d_v)
    throw ConfigError("n_concepts must be in [1, d_v]");
  if (spec.n_concepts < 2) throw ConfigError("need at least two concepts for distractor segments");
  if (spec.vocab_size <= 2 * spec.n_concepts)
    throw ConfigError("vocab_size must exceed 2 * n_concepts (two keywords per concept plus fillers)");
  if (spec.query_len_min < 2 || spec.query_len_min > spec.query_len_max)
    throw ConfigError("query length range must satisfy 2 <= min <= max");
  if (!(spec.noise_sigma >= 0.0)) throw ConfigError("noise_sigma must be >= 0");
  for (double p : {spec.distractor_prob, spec.decoy_prob})
    if (!(p >= 0.0 && p <= 1.0)) throw ConfigError("distractor_prob and decoy_prob must lie in [0,1]");
  if (spec.segment_len_min == 0 || spec.segment_len_min > spec.segment_len_max)
    throw ConfigError("invalid segment length range");
}

/// Unit-norm code vectors for concepts [0, n_concepts): Gram-Schmidt over
/// seeded Gaussian draws, so distinct codes are orthogonal.
inline std::vector<std::vector<double>> concept_signals(std::size_t n_concepts, std::size_t d_v,
                                                        std::uint64_t seed) {
  if (n_concepts > d_v) throw ConfigError("n_concepts > d_v: codes cannot be separated");
  std::seed_seq sseq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32), 0xC0DEu};
  std::mt19937_64 rng(sseq);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<std::vector<double>> basis;
  while (basis.size() < n_concepts) {
    std::vector<double> v(d_v);
    for (double& x : v) x = normal(rng);
    for (const auto& b : basis) {
      double dot = 0.0;
      for (std::size_t i = 0; i < d_v; ++i) dot += v[i] * b[i];
      for (std::size_t i = 0; i < d_v; ++i) v[i] -= dot * b[i];
    }
    double norm = 0.0;
    for (double x : v) norm += x * x;
    norm = std::sqrt(norm);
    if (norm < 1e-6) continue;  // degenerate draw; try again
    for (double& x : v) x /= norm;
    basis.push_back(std::move(v));
  }
  return basis;
}

inline std::vector<double> concept_signal(std::size_t concept_id, std::size_t d_v, std::uint64_t seed) {
  return concept_signals(concept_id + 1, d_v, seed).back();
}

struct Benchmark {
  Dataset train, val, test_iid, test_ood;
  friend bool operator==(const Benchmark&, const Benchmark&) = default;
};

namespace detail {

enum class MomentLaw { biased, ood };

inline std::mt19937_64 sample_rng(std::uint64_t seed, Split split, std::size_t index) {
  std::seed_seq sseq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                     static_cast<std::uint32_t>(split), static_cast<std::uint32_t>(index),
                     static_cast<std::uint32_t>(static_cast<std::uint64_t>(index) >> 32)};
  return std::mt19937_64(sseq);
}

inline NormalizedMoment draw_moment(const SynthSpec& spec, MomentLaw law, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  auto triangle = [&] {
    const double a = u01(rng), b = u01(rng);
    return NormalizedMoment{std::min(a, b), std::max(a, b)};
  };
  const Rect& r = spec.bias_region;
  if (law == MomentLaw::biased) {
    if (u01(rng) < spec.bias_strength) {
      std::uniform_real_distribution<double> us(r.s_lo, r.s_hi), ue(r.e_lo, r.e_hi);
      for (;;) {
        const double s = us(rng), e = ue(rng);
        if (s <= e) return {s, e};
      }
    }
    return triangle();
  }
  for (;;) {
    const NormalizedMoment m = triangle();
    if (!r.contains(m.s_norm, m.e_norm)) return m;
  }
}

inline Sample make_sample(const SynthSpec& spec, const std::vector<std::vector<double>>& codes, Split split,
                          std::size_t index, MomentLaw law) {
  std::mt19937_64 rng = sample_rng(spec.seed, split, index);
  std::uniform_int_distribution<std::size_t> concept_dist(0, spec.n_concepts - 1);
  std::uniform_int_distribution<std::size_t> len_dist(spec.n_v_min, spec.n_v_max);
  std::uniform_real_distribution<double> unit_secs(0.5, 1.5);
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  std::normal_distribution<double> noise(0.0, 1.0);

  Sample s;
  s.id = std::string(to_string(split)) + "-" + std::to_string(index);
  const std::size_t concept_id = concept_dist(rng);
  const std::size_t n_v = len_dist(rng);
  s.duration = static_cast<double>(n_v) * unit_secs(rng);
  for (;;) {
    const NormalizedMoment m = draw_moment(spec, law, rng);
    s.t_s = m.s_norm * s.duration;
    s.t_e = std::min(m.e_norm * s.duration, s.duration);
    // Re-check after the round trip through seconds.
    const NormalizedMoment back = normalize_moment(s);
    if (law != MomentLaw::ood || !spec.bias_region.contains(back.s_norm, back.e_norm)) break;
  }
  std::tie(s.i_s, s.i_e) = moment_indices(s.t_s, s.t_e, s.duration, n_v);

  Tensor f(n_v, spec.d_v);
  auto stamp = [&](std::size_t row, const std::vector<double>& code) {
    for (std::size_t c = 0; c < spec.d_v; ++c) f(row, c) += code[c];
  };
  for (std::size_t r = s.i_s; r <= s.i_e; ++r) stamp(r, codes[concept_id]);
  std::uniform_int_distribution<std::size_t> other(0, spec.n_concepts - 2);
  auto other_concept = [&] {
    const std::size_t d = other(rng);
    return d >= concept_id ? d + 1 : d;
  };
  // Decoy: a block of another concept placed by the same law as the moment,
  // so the video alone does not reveal which block the query names.
  std::size_t decoy_lo = n_v, decoy_hi = n_v;  // [lo, hi); empty when absent
  if (u01(rng) < spec.decoy_prob) {
    const std::size_t d = other_concept();
    for (int attempt = 0; attempt < 16; ++attempt) {
      const NormalizedMoment m = draw_moment(spec, law, rng);
      const auto [lo, hi] = moment_indices(m.s_norm * s.duration, m.e_norm * s.duration, s.duration, n_v);
      if (hi < s.i_s || lo > s.i_e) {
        for (std::size_t r = lo; r <= hi; ++r) stamp(r, codes[d]);
        decoy_lo = lo;
        decoy_hi = hi + 1;
        break;
      }
    }
  }
  // Remaining background: consecutive segments that either stay empty or
  // carry a distractor concept.
  std::uniform_int_distribution<std::size_t> seg_len(spec.segment_len_min, spec.segment_len_max);
  auto fill_background = [&](std::size_t lo, std::size_t hi) {  // [lo, hi)
    std::size_t r = lo;
    while (r < hi) {
      const std::size_t end = std::min(hi, r + seg_len(rng));
      if (u01(rng) < spec.distractor_prob) {
        const std::size_t d = other_concept();
        for (std::size_t k = r; k < end; ++k) stamp(k, codes[d]);
      }
      r = end;
    }
  };
  auto fill_outside_decoy = [&](std::size_t lo, std::size_t hi) {
    if (decoy_lo >= lo && decoy_hi <= hi) {
      fill_background(lo, decoy_lo);
      fill_background(decoy_hi, hi);
    } else {
      fill_background(lo, hi);
    }
  };
  fill_outside_decoy(0, s.i_s);
  fill_outside_decoy(s.i_e + 1, n_v);
  if (spec.noise_sigma > 0.0)
    for (double& v : f.values()) v += spec.noise_sigma * noise(rng);
  round_to_f32(f);
  s.features = std::move(f);

  std::uniform_int_distribution<std::size_t> qlen(spec.query_len_min, spec.query_len_max);
  std::uniform_int_distribution<std::size_t> filler(2 * spec.n_concepts, spec.vocab_size - 1);
  const std::size_t n_q = qlen(rng);
  s.tokens.resize(n_q);
  for (auto& t : s.tokens) t = filler(rng);
  std::uniform_int_distribution<std::size_t> pos(0, n_q - 1);
  const std::size_t p0 = pos(rng);
  std::size_t p1 = pos(rng);
  if (p1 == p0) p1 = (p0 + 1) % n_q;
  s.tokens[p0] = 2 * concept_id;
  s.tokens[p1] = 2 * concept_id + 1;
  return s;
}

inline Dataset make_split(const SynthSpec& spec, const std::vector<std::vector<double>>& codes, Split split,
                          std::size_t n, MomentLaw law) {
  Dataset ds;
  ds.split = split;
  ds.vocab_size = spec.vocab_size;
  ds.samples.reserve(n);
  for (std::size_t i = 0; i < n; ++i) ds.samples.push_back(make_sample(spec, codes, split, i, law));
  return ds;
}

}  // namespace detail

/// Pure function of `spec`. train/val/test_iid follow the biased mixture;
/// test_ood is uniform over the upper triangle minus the bias region.
inline Benchmark generate_benchmark(const SynthSpec& spec) {
  validate(spec);
  const auto codes = concept_signals(spec.n_concepts, spec.d_v, spec.seed);
  using detail::MomentLaw;
  return Benchmark{
      detail::make_split(spec, codes, Split::train, spec.n_train, MomentLaw::biased),
      detail::make_split(spec, codes, Split::val, spec.n_val, MomentLaw::biased),
      detail::make_split(spec, codes, Split::test_iid, spec.n_test_iid, MomentLaw::biased),
      detail::make_split(spec, codes, Split::test_ood, spec.n_test_ood, MomentLaw::ood),
  };
}

/// Concept id encoded in a synthetic query (the first keyword token found).
inline std::size_t query_concept(const Sample& s, std::size_t n_concepts) {
  for (std::size_t t : s.tokens)
    if (t < 2 * n_concepts) return t / 2;
  throw ValidationError("sample '" + s.id + "' carries no concept keyword");
}

inline std::filesystem::path split_manifest(const std::filesystem::path& dir, Split split) {
  return dir / (std::string(to_string(split)) + ".jsonl");
}

/// Writes <dir>/{train,val,test_iid,test_ood}.jsonl, features/ and benchmark.json.
inline void save_benchmark(const Benchmark& b, const SynthSpec& spec, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  save_dataset(b.train, split_manifest(dir, Split::train));
  save_dataset(b.val, split_manifest(dir, Split::val));
  save_dataset(b.test_iid, split_manifest(dir, Split::test_iid));
  save_dataset(b.test_ood, split_manifest(dir, Split::test_ood));
  std::ofstream os(dir / "benchmark.json", std::ios::trunc);
  os << nlohmann::json(spec).dump(2) << '\n';
}

inline SynthSpec load_benchmark_spec(const std::filesystem::path& dir) {
  std::ifstream is(dir / "benchmark.json");
  if (!is) throw ParseError("missing benchmark.json in " + dir.string());
  try {
    return nlohmann::json::parse(is).get<SynthSpec>();
  } catch (const nlohmann::json::exception& e) {
    throw ParseError("benchmark.json: " + std::string(e.what()));
  }
}

}  // namespace tsgdb
