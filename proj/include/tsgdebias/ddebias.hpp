#pragma once

// Data debiasing by two-sided background truncation.
//
// A video is cut into near-equal clips; clips overlapping the ground truth are
// merged into a single foreground range. New training videos are contiguous
// sub-sequences obtained by dropping background clips from either end, so the
// moment's relative position changes while its content and the query do not.

#include <algorithm>
#include <cstdint>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "tsgdebias/corpus.hpp"
#include "tsgdebias/errors.hpp"

namespace tsgdb {

/// Inclusive index range [lo, hi].
struct IndexRange {
  std::size_t lo = 0;
  std::size_t hi = 0;
  std::size_t length() const noexcept { return hi - lo + 1; }
  friend bool operator==(const IndexRange&, const IndexRange&) = default;
};

struct ClipPartition {
  std::string sample_id;
  /// left background clips, the merged foreground, right background clips.
  std::vector<IndexRange> clips;
  IndexRange foreground;
  std::size_t left_bg = 0;
  std::size_t right_bg = 0;
  friend bool operator==(const ClipPartition&, const ClipPartition&) = default;
};

struct TruncationPlan {
  std::size_t drop_left = 0;
  std::size_t drop_right = 0;
  friend bool operator==(const TruncationPlan&, const TruncationPlan&) = default;
};

/// Near-equal contiguous clips (sizes differ by at most one, longer clips
/// first); clips overlapping [i_s, i_e] are merged into the foreground.
/// When the video has fewer rows than n_clip every row becomes a clip.
inline ClipPartition partition_clips(const Sample& sample, std::size_t n_clip) {
  if (n_clip == 0) throw UsageError("partition_clips: n_clip must be >= 1");
  const std::size_t n_v = sample.n_v();
  const std::size_t k = std::min(n_clip, n_v);
  const std::size_t base = n_v / k, rem = n_v % k;

  ClipPartition p;
  p.sample_id = sample.id;
  std::size_t lo = 0;
  bool in_fg = false;
  for (std::size_t c = 0; c < k; ++c) {
    const IndexRange clip{lo, lo + base + (c < rem ? 1 : 0) - 1};
    lo = clip.hi + 1;
    const bool overlaps = clip.hi >= sample.i_s && clip.lo <= sample.i_e;
    if (overlaps) {
      if (!in_fg) {
        p.foreground = clip;
        p.clips.push_back(clip);
        in_fg = true;
      } else {
        p.foreground.hi = clip.hi;
        p.clips.back().hi = clip.hi;
      }
    } else {
      p.clips.push_back(clip);
      (in_fg ? p.right_bg : p.left_bg) += 1;
    }
  }
  return p;
}

/// Every (drop_left, drop_right) except (0, 0), in lexicographic order.
inline std::vector<TruncationPlan> enumerate_truncations(const ClipPartition& p) {
  std::vector<TruncationPlan> plans;
  plans.reserve((p.left_bg + 1) * (p.right_bg + 1) - 1);
  for (std::size_t l = 0; l <= p.left_bg; ++l)
    for (std::size_t r = 0; r <= p.right_bg; ++r)
      if (l != 0 || r != 0) plans.push_back({l, r});
  return plans;
}

inline std::string truncation_suffix(const TruncationPlan& plan) {
  return "#dl" + std::to_string(plan.drop_left) + "dr" + std::to_string(plan.drop_right);
}

/// Row slice of `sample` with the planned background clips removed. Times are
/// shifted by the removed left duration and the duration shrinks accordingly.
inline Sample apply_truncation(const Sample& sample, const ClipPartition& p, const TruncationPlan& plan) {
  if (plan.drop_left > p.left_bg || plan.drop_right > p.right_bg)
    throw std::logic_error("apply_truncation: plan exceeds the available background clips");
  if (plan.drop_left == 0 && plan.drop_right == 0) return sample;

  const std::size_t new_lo = p.clips[plan.drop_left].lo;
  const std::size_t new_hi = p.clips[p.clips.size() - 1 - plan.drop_right].hi;
  const std::size_t n_new = new_hi - new_lo + 1;
  const double unit = sample.duration / static_cast<double>(sample.n_v());
  const double shift = static_cast<double>(new_lo) * unit;

  Sample out;
  out.id = sample.id + truncation_suffix(plan);
  out.tokens = sample.tokens;
  out.features = Tensor(n_new, sample.d_v());
  std::copy_n(sample.features.data() + new_lo * sample.d_v(), n_new * sample.d_v(), out.features.data());
  out.duration = static_cast<double>(n_new) * unit;
  out.t_s = std::max(0.0, sample.t_s - shift);
  out.t_e = std::clamp(sample.t_e - shift, out.t_s, out.duration);
  out.i_s = sample.i_s - new_lo;
  out.i_e = sample.i_e - new_lo;
  return out;
}

/// Original samples followed, per sample, by their truncated variants (all of
/// them, or a seeded random subset of at most `max_new_per_sample`).
inline Dataset debias_dataset(const Dataset& ds, std::size_t n_clip,
                              std::optional<std::size_t> max_new_per_sample = std::nullopt,
                              std::uint64_t seed = 0) {
  if (ds.split != Split::train)
    throw UsageError("debias_dataset: only the train split may be augmented (got " +
                     std::string(to_string(ds.split)) + ")");
  Dataset out;
  out.split = ds.split;
  out.vocab_size = ds.vocab_size;
  out.samples.reserve(ds.samples.size());
  for (std::size_t idx = 0; idx < ds.samples.size(); ++idx) {
    const Sample& s = ds.samples[idx];
    out.samples.push_back(s);
    const ClipPartition p = partition_clips(s, n_clip);
    std::vector<TruncationPlan> plans = enumerate_truncations(p);
    if (max_new_per_sample && plans.size() > *max_new_per_sample) {
      std::seed_seq sseq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                         static_cast<std::uint32_t>(idx), 0xDDu};
      std::mt19937_64 rng(sseq);
      std::vector<std::size_t> order(plans.size());
      for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
      std::shuffle(order.begin(), order.end(), rng);
      order.resize(*max_new_per_sample);
      std::sort(order.begin(), order.end());
      std::vector<TruncationPlan> kept;
      for (std::size_t i : order) kept.push_back(plans[i]);
      plans = std::move(kept);
    }
    for (const TruncationPlan& plan : plans) out.samples.push_back(apply_truncation(s, p, plan));
  }
  return out;
}

}  // namespace tsgdb
