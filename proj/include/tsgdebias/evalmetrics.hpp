#pragma once

// Span decoding and grounding metrics: IoU, R@1,IoU@mu, discounted
// dR@1,IoU@mu and mIoU. A prediction counts as a hit when IoU >= mu.

#include <array>
#include <cmath>
#include <cstdlib>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "tsgdebias/corpus.hpp"
#include "tsgdebias/errors.hpp"

namespace tsgdb {

inline constexpr std::array<double, 3> kIouThresholds{0.3, 0.5, 0.7};

/// Inclusive index span.
struct Span {
  std::size_t s = 0;
  std::size_t e = 0;
  friend bool operator==(const Span&, const Span&) = default;
};

struct Prediction {
  std::string sample_id;
  std::size_t i_s_hat = 0;
  std::size_t i_e_hat = 0;
  double score = 0.0;
  friend bool operator==(const Prediction&, const Prediction&) = default;
};

struct GroundTruth {
  std::string sample_id;
  std::size_t i_s = 0;
  std::size_t i_e = 0;
  std::size_t n_v = 1;
};

inline GroundTruth ground_truth(const Sample& s) { return {s.id, s.i_s, s.i_e, s.n_v()}; }

struct SpanChoice {
  std::size_t i_s = 0;
  std::size_t i_e = 0;
  double score = 0.0;
};

/// argmax over i <= j of a_s[i] * a_e[j]; ties go to the smaller i, then j.
inline SpanChoice extract_span(std::span<const double> a_s, std::span<const double> a_e) {
  if (a_s.empty() || a_s.size() != a_e.size()) throw EvaluationError("extract_span: bad distributions");
  SpanChoice best{0, 0, a_s[0] * a_e[0]};
  for (std::size_t i = 0; i < a_s.size(); ++i)
    for (std::size_t j = i; j < a_e.size(); ++j) {
      const double v = a_s[i] * a_e[j];
      if (v > best.score) best = {i, j, v};
    }
  return best;
}

inline double iou(Span pred, Span gt) {
  const long inter_lo = static_cast<long>(std::max(pred.s, gt.s));
  const long inter_hi = static_cast<long>(std::min(pred.e, gt.e));
  const double inter = static_cast<double>(std::max(0L, inter_hi - inter_lo + 1));
  const double uni = static_cast<double>(pred.e - pred.s + 1) + static_cast<double>(gt.e - gt.s + 1) - inter;
  return inter / uni;
}

namespace detail {

inline void check_aligned(std::span<const Prediction> preds, std::span<const GroundTruth> gts) {
  if (preds.size() != gts.size())
    throw EvaluationError("prediction count " + std::to_string(preds.size()) + " != ground-truth count " +
                          std::to_string(gts.size()));
  for (std::size_t k = 0; k < preds.size(); ++k)
    if (preds[k].sample_id != gts[k].sample_id)
      throw EvaluationError("id mismatch at position " + std::to_string(k) + ": '" + preds[k].sample_id +
                            "' vs '" + gts[k].sample_id + "'");
}

inline double sample_iou(const Prediction& p, const GroundTruth& g) {
  return iou({p.i_s_hat, p.i_e_hat}, {g.i_s, g.i_e});
}

/// Boundary discount 1 - |offset| / n_v for start and end.
inline double discount(const Prediction& p, const GroundTruth& g) {
  const double n = static_cast<double>(g.n_v);
  const double a_s = 1.0 - std::abs(static_cast<double>(p.i_s_hat) - static_cast<double>(g.i_s)) / n;
  const double a_e = 1.0 - std::abs(static_cast<double>(p.i_e_hat) - static_cast<double>(g.i_e)) / n;
  return a_s * a_e;
}

}  // namespace detail

inline double recall_at1(std::span<const Prediction> preds, std::span<const GroundTruth> gts, double mu) {
  detail::check_aligned(preds, gts);
  if (preds.empty()) throw DomainError("recall_at1: empty evaluation set");
  std::size_t hits = 0;
  for (std::size_t k = 0; k < preds.size(); ++k) hits += detail::sample_iou(preds[k], gts[k]) >= mu ? 1 : 0;
  return 100.0 * static_cast<double>(hits) / static_cast<double>(preds.size());
}

/// Recall where each hit is weighted by the product of start/end discounts,
/// penalizing predictions that overshoot the ground-truth boundaries.
inline double discounted_recall_at1(std::span<const Prediction> preds, std::span<const GroundTruth> gts,
                                    double mu) {
  detail::check_aligned(preds, gts);
  if (preds.empty()) throw DomainError("discounted_recall_at1: empty evaluation set");
  double sum = 0.0;
  for (std::size_t k = 0; k < preds.size(); ++k)
    if (detail::sample_iou(preds[k], gts[k]) >= mu) sum += detail::discount(preds[k], gts[k]);
  return 100.0 * sum / static_cast<double>(preds.size());
}

inline double mean_iou(std::span<const Prediction> preds, std::span<const GroundTruth> gts) {
  detail::check_aligned(preds, gts);
  if (preds.empty()) throw DomainError("mean_iou: empty evaluation set");
  double sum = 0.0;
  for (std::size_t k = 0; k < preds.size(); ++k) sum += detail::sample_iou(preds[k], gts[k]);
  return 100.0 * sum / static_cast<double>(preds.size());
}

struct MetricReport {
  std::string split;
  std::array<double, 3> r1{};   // R@1,IoU@{0.3,0.5,0.7}
  std::array<double, 3> dr1{};  // dR@1,IoU@{0.3,0.5,0.7}
  double miou = 0.0;
  std::size_t count = 0;
  friend bool operator==(const MetricReport&, const MetricReport&) = default;
};

inline MetricReport score_predictions(std::span<const Prediction> preds, std::span<const GroundTruth> gts,
                                      std::string split) {
  MetricReport rep;
  rep.split = std::move(split);
  rep.count = preds.size();
  for (std::size_t k = 0; k < kIouThresholds.size(); ++k) {
    rep.r1[k] = recall_at1(preds, gts, kIouThresholds[k]);
    rep.dr1[k] = discounted_recall_at1(preds, gts, kIouThresholds[k]);
  }
  rep.miou = mean_iou(preds, gts);
  return rep;
}

inline std::string threshold_key(double mu) {
  char buf[8];
  std::snprintf(buf, sizeof buf, "%.1f", mu);
  return buf;
}

inline nlohmann::json to_json(const MetricReport& r) {
  nlohmann::json j;
  j["split"] = r.split;
  j["count"] = r.count;
  for (std::size_t k = 0; k < kIouThresholds.size(); ++k) {
    j["R1"][threshold_key(kIouThresholds[k])] = r.r1[k];
    j["dR1"][threshold_key(kIouThresholds[k])] = r.dr1[k];
  }
  j["mIoU"] = r.miou;
  return j;
}

inline MetricReport report_from_json(const nlohmann::json& j) {
  MetricReport r;
  r.split = j.at("split").get<std::string>();
  r.count = j.at("count").get<std::size_t>();
  for (std::size_t k = 0; k < kIouThresholds.size(); ++k) {
    r.r1[k] = j.at("R1").at(threshold_key(kIouThresholds[k])).get<double>();
    r.dr1[k] = j.at("dR1").at(threshold_key(kIouThresholds[k])).get<double>();
  }
  r.miou = j.at("mIoU").get<double>();
  return r;
}

inline void write_report_csv_header(std::ostream& os) {
  os << "split,count,R1@0.3,R1@0.5,R1@0.7,dR1@0.3,dR1@0.5,dR1@0.7,mIoU\n";
}

inline void write_report_csv_row(std::ostream& os, const MetricReport& r) {
  char buf[256];
  std::snprintf(buf, sizeof buf, "%s,%zu,%.2f,%.2f,%.2f,%.2f,%.2f,%.2f,%.2f\n", r.split.c_str(), r.count, r.r1[0],
                r.r1[1], r.r1[2], r.dr1[0], r.dr1[1], r.dr1[2], r.miou);
  os << buf;
}

}  // namespace tsgdb
