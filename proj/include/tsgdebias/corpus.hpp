#pragma once

#include <bit>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "tsgdebias/errors.hpp"
#include "tsgdebias/tensor.hpp"

namespace tsgdb {

static_assert(std::endian::native == std::endian::little, "binary formats assume a little-endian host");

/// Longest feature sequence fed to the model; longer videos are pooled down.
inline constexpr std::size_t kMaxVisualLength = 128;

/// One video-query-moment instance. Indices are inclusive: the moment covers
/// feature rows [i_s, i_e].
struct Sample {
  std::string id;
  double duration = 0.0;
  Tensor features;  // (n_v, d_v)
  std::vector<std::size_t> tokens;
  double t_s = 0.0;
  double t_e = 0.0;
  std::size_t i_s = 0;
  std::size_t i_e = 0;

  std::size_t n_v() const noexcept { return features.rows(); }
  std::size_t d_v() const noexcept { return features.cols(); }
  friend bool operator==(const Sample&, const Sample&) = default;
};

enum class Split { train, val, test_iid, test_ood, test_all };

inline std::string_view to_string(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test_iid: return "test_iid";
    case Split::test_ood: return "test_ood";
    case Split::test_all: return "test_all";
  }
  return "?";
}

inline Split split_from_string(std::string_view s) {
  for (Split sp : {Split::train, Split::val, Split::test_iid, Split::test_ood, Split::test_all})
    if (to_string(sp) == s) return sp;
  throw ConfigError("unknown split '" + std::string(s) + "'");
}

struct Dataset {
  Split split = Split::train;
  std::vector<Sample> samples;
  std::size_t vocab_size = 0;

  std::size_t size() const noexcept { return samples.size(); }
  bool empty() const noexcept { return samples.empty(); }
  friend bool operator==(const Dataset&, const Dataset&) = default;
};

/// Moment boundaries as fractions of the video duration.
struct NormalizedMoment {
  double s_norm = 0.0;
  double e_norm = 0.0;
  friend bool operator==(const NormalizedMoment&, const NormalizedMoment&) = default;
};

/// Feature row that contains time `t`: min(n_v - 1, floor(t / duration * n_v)).
inline std::size_t time_to_index(double t, double duration, std::size_t n_v) {
  if (!(duration > 0.0)) throw DomainError("time_to_index: duration must be positive");
  if (n_v == 0) throw DomainError("time_to_index: n_v must be >= 1");
  const double pos = std::floor(t / duration * static_cast<double>(n_v));
  if (pos <= 0.0) return 0;
  return std::min(n_v - 1, static_cast<std::size_t>(pos));
}

/// Last feature row touched by a moment that ends (exclusively) at `t`:
/// clamp(ceil(t / duration * n_v) - 1, 0, n_v - 1).
inline std::size_t end_time_to_index(double t, double duration, std::size_t n_v) {
  if (!(duration > 0.0)) throw DomainError("end_time_to_index: duration must be positive");
  if (n_v == 0) throw DomainError("end_time_to_index: n_v must be >= 1");
  const double pos = std::ceil(t / duration * static_cast<double>(n_v)) - 1.0;
  if (pos <= 0.0) return 0;
  return std::min(n_v - 1, static_cast<std::size_t>(pos));
}

/// Inclusive index span of a moment given in seconds.
inline std::pair<std::size_t, std::size_t> moment_indices(double t_s, double t_e, double duration,
                                                          std::size_t n_v) {
  const std::size_t is = time_to_index(t_s, duration, n_v);
  const std::size_t ie = std::max(is, end_time_to_index(t_e, duration, n_v));
  return {is, ie};
}

inline NormalizedMoment normalize_moment(const Sample& s) {
  return {s.t_s / s.duration, s.t_e / s.duration};
}

/// Throws ValidationError naming the sample when an invariant is broken.
inline void validate_sample(const Sample& s, std::optional<std::size_t> vocab_size = std::nullopt) {
  auto fail = [&](const std::string& what) {
    throw ValidationError("sample '" + s.id + "': " + what);
  };
  if (!(s.duration > 0.0) || !std::isfinite(s.duration)) fail("duration must be positive");
  if (!(s.t_s >= 0.0)) fail("t_s must be >= 0");
  if (!(s.t_s <= s.t_e)) fail("t_s must be <= t_e");
  if (!(s.t_e <= s.duration)) fail("t_e exceeds duration");
  if (s.n_v() == 0) fail("empty feature sequence");
  if (s.tokens.empty()) fail("empty token sequence");
  if (!(s.i_s <= s.i_e && s.i_e < s.n_v())) fail("moment indices out of range");
  if (vocab_size)
    for (std::size_t t : s.tokens)
      if (t >= *vocab_size) fail("token id " + std::to_string(t) + " >= vocab size");
}

// ---------------------------------------------------------------------------
// Feature files: "FEAT", u32 n_v, u32 d_v, n_v*d_v little-endian f32 row-major.

namespace detail {

template <class T>
void write_pod(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
bool read_pod(std::istream& is, T& v) {
  return static_cast<bool>(is.read(reinterpret_cast<char*>(&v), sizeof(T)));
}

}  // namespace detail

inline void write_feature_file(const std::filesystem::path& path, const Tensor& features) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw FormatError("cannot open feature file for writing: " + path.string());
  os.write("FEAT", 4);
  detail::write_pod(os, static_cast<std::uint32_t>(features.rows()));
  detail::write_pod(os, static_cast<std::uint32_t>(features.cols()));
  for (double v : features.values()) detail::write_pod(os, static_cast<float>(v));
  if (!os) throw FormatError("failed writing feature file: " + path.string());
}

inline Tensor read_feature_file(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open feature file: " + path.string());
  char magic[4];
  if (!is.read(magic, 4) || std::string_view(magic, 4) != "FEAT")
    throw FormatError("bad feature-file magic: " + path.string());
  std::uint32_t n_v = 0, d_v = 0;
  if (!detail::read_pod(is, n_v) || !detail::read_pod(is, d_v))
    throw FormatError("truncated feature-file header: " + path.string());
  if (n_v == 0 || d_v == 0) throw FormatError("feature file has an empty dimension: " + path.string());
  std::vector<float> raw(static_cast<std::size_t>(n_v) * d_v);
  if (!is.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size() * sizeof(float))))
    throw FormatError("feature payload shorter than header claims: " + path.string());
  if (is.peek() != std::char_traits<char>::eof())
    throw FormatError("feature payload longer than header claims: " + path.string());
  return Tensor(n_v, d_v, std::vector<double>(raw.begin(), raw.end()));
}

/// Rounds every value to the nearest f32 so that in-memory data matches what
/// a save/load cycle produces.
inline void round_to_f32(Tensor& t) {
  for (double& v : t.values()) v = static_cast<double>(static_cast<float>(v));
}

/// Mean-pools `features` into `target` rows; bucket k covers source rows
/// [floor(k*n/target), floor((k+1)*n/target)).
inline Tensor pool_rows(const Tensor& features, std::size_t target) {
  const std::size_t n = features.rows();
  if (n <= target) return features;
  Tensor out(target, features.cols());
  for (std::size_t k = 0; k < target; ++k) {
    const std::size_t lo = k * n / target;
    const std::size_t hi = std::max(lo + 1, (k + 1) * n / target);
    for (std::size_t r = lo; r < hi; ++r)
      for (std::size_t c = 0; c < features.cols(); ++c) out(k, c) += features(r, c);
    for (std::size_t c = 0; c < features.cols(); ++c) out(k, c) /= static_cast<double>(hi - lo);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Manifest: JSONL, one record per annotation.

struct LoadOptions {
  Split split = Split::train;
  /// Vocabulary size; inferred as max token + 1 when absent.
  std::optional<std::size_t> vocab_size;
  std::size_t max_visual_length = kMaxVisualLength;
};

inline Sample sample_from_record(const nlohmann::json& rec, const std::filesystem::path& base_dir,
                                 std::size_t max_len) {
  Sample s;
  s.id = rec.at("id").get<std::string>();
  s.duration = rec.at("duration").get<double>();
  s.tokens = rec.at("tokens").get<std::vector<std::size_t>>();
  s.t_s = rec.at("t_s").get<double>();
  s.t_e = rec.at("t_e").get<double>();
  if (!(s.duration > 0.0)) throw ValidationError("sample '" + s.id + "': duration must be positive");
  if (s.t_e > s.duration) throw ValidationError("sample '" + s.id + "': t_e exceeds duration");
  std::filesystem::path fp = rec.at("feature_file").get<std::string>();
  if (fp.is_relative()) fp = base_dir / fp;
  Tensor feats = read_feature_file(fp);
  const bool pooled = feats.rows() > max_len;
  if (pooled) feats = pool_rows(feats, max_len);
  s.features = std::move(feats);
  if (!pooled && rec.contains("i_s") && rec.contains("i_e")) {
    s.i_s = rec.at("i_s").get<std::size_t>();
    s.i_e = rec.at("i_e").get<std::size_t>();
  } else {
    std::tie(s.i_s, s.i_e) = moment_indices(s.t_s, s.t_e, s.duration, s.n_v());
  }
  return s;
}

inline Dataset load_dataset(const std::filesystem::path& manifest, const LoadOptions& opts = {}) {
  std::ifstream is(manifest);
  if (!is) throw ParseError("cannot open manifest: " + manifest.string());
  Dataset ds;
  ds.split = opts.split;
  const std::filesystem::path base = manifest.parent_path();
  std::string line;
  std::size_t line_no = 0;
  std::size_t max_token = 0;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    nlohmann::json rec;
    try {
      rec = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw ParseError(manifest.string() + ":" + std::to_string(line_no) + ": " + e.what());
    }
    Sample s;
    try {
      s = sample_from_record(rec, base, opts.max_visual_length);
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(manifest.string() + ":" + std::to_string(line_no) + ": " + e.what());
    }
    validate_sample(s, opts.vocab_size);
    if (!ds.samples.empty() && s.d_v() != ds.samples.front().d_v())
      throw FormatError("sample '" + s.id + "': feature width " + std::to_string(s.d_v()) +
                        " differs from " + std::to_string(ds.samples.front().d_v()));
    for (std::size_t t : s.tokens) max_token = std::max(max_token, t);
    ds.samples.push_back(std::move(s));
  }
  ds.vocab_size = opts.vocab_size ? *opts.vocab_size : (ds.samples.empty() ? 0 : max_token + 1);
  return ds;
}

/// File-system safe rendering of a sample id.
inline std::string feature_file_name(const std::string& id) {
  std::string out;
  for (char c : id) out += (std::isalnum(static_cast<unsigned char>(c)) || c == '-' || c == '_' || c == '#') ? c : '_';
  return out + ".feat";
}

/// Writes `ds` as a manifest plus one feature file per sample under
/// `<manifest dir>/<feature_subdir>/`.
inline void save_dataset(const Dataset& ds, const std::filesystem::path& manifest,
                         const std::string& feature_subdir = "features") {
  const std::filesystem::path base = manifest.parent_path();
  std::filesystem::create_directories(base / feature_subdir);
  std::ofstream os(manifest, std::ios::trunc);
  if (!os) throw FormatError("cannot write manifest: " + manifest.string());
  for (const Sample& s : ds.samples) {
    const std::string rel = feature_subdir + "/" + feature_file_name(s.id);
    write_feature_file(base / rel, s.features);
    nlohmann::json rec = {{"id", s.id},     {"duration", s.duration}, {"feature_file", rel},
                          {"tokens", s.tokens}, {"t_s", s.t_s},     {"t_e", s.t_e},
                          {"i_s", s.i_s},   {"i_e", s.i_e}};
    os << rec.dump() << '\n';
  }
}

/// iid followed by ood, tagged as test_all.
inline Dataset concat_test_all(const Dataset& iid, const Dataset& ood) {
  Dataset all;
  all.split = Split::test_all;
  all.vocab_size = std::max(iid.vocab_size, ood.vocab_size);
  all.samples = iid.samples;
  all.samples.insert(all.samples.end(), ood.samples.begin(), ood.samples.end());
  return all;
}

}  // namespace tsgdb
