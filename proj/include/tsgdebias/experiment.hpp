#pragma once

// The four-way comparison {vq, +DD, +MD, +DD+MD}: configuration variants,
// per-split evaluation and the comparison table.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <ostream>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "tsgdebias/biasaudit.hpp"
#include "tsgdebias/evaluate.hpp"
#include "tsgdebias/synthgen.hpp"
#include "tsgdebias/training.hpp"

namespace tsgdb {

enum class Variant { vq, dd, md, dd_md };

inline constexpr std::array<Variant, 4> kVariants{Variant::vq, Variant::dd, Variant::md, Variant::dd_md};

inline std::string_view to_string(Variant v) {
  switch (v) {
    case Variant::vq: return "vq";
    case Variant::dd: return "+DD";
    case Variant::md: return "+MD";
    case Variant::dd_md: return "+DD+MD";
  }
  return "?";
}

/// `base` with mode vq and the variant's dd/md switches.
inline TrainConfig variant_config(TrainConfig base, Variant v) {
  base.mode = TrainMode::vq;
  base.dd = v == Variant::dd || v == Variant::dd_md;
  base.md = v == Variant::md || v == Variant::dd_md ? MdKind::full : MdKind::off;
  return base;
}

struct SplitReports {
  MetricReport val, test_iid, test_ood, test_all;
};

inline SplitReports evaluate_splits(const ParamStore& ps, const ModelConfig& mc, const Dataset& val,
                                    const Dataset& test_iid, const Dataset& test_ood,
                                    InferenceBranch branch = InferenceBranch::vq) {
  SplitReports r;
  r.val = evaluate(ps, mc, val, branch);
  // One pass over each test split; "all" is scored on the concatenation.
  const std::vector<Prediction> p_iid = predict_all(test_iid, ps, mc, branch);
  const std::vector<Prediction> p_ood = predict_all(test_ood, ps, mc, branch);
  const std::vector<GroundTruth> g_iid = ground_truths(test_iid), g_ood = ground_truths(test_ood);
  r.test_iid = score_predictions(p_iid, g_iid, "test_iid");
  r.test_ood = score_predictions(p_ood, g_ood, "test_ood");
  std::vector<Prediction> p_all = p_iid;
  p_all.insert(p_all.end(), p_ood.begin(), p_ood.end());
  std::vector<GroundTruth> g_all = g_iid;
  g_all.insert(g_all.end(), g_ood.begin(), g_ood.end());
  r.test_all = score_predictions(p_all, g_all, "test_all");
  return r;
}

inline nlohmann::json to_json(const SplitReports& r) {
  return {{"val", to_json(r.val)},
          {"test_iid", to_json(r.test_iid)},
          {"test_ood", to_json(r.test_ood)},
          {"test_all", to_json(r.test_all)}};
}

inline SplitReports split_reports_from_json(const nlohmann::json& j) {
  return {report_from_json(j.at("val")), report_from_json(j.at("test_iid")), report_from_json(j.at("test_ood")),
          report_from_json(j.at("test_all"))};
}

// ---------------------------------------------------------------------------
// Constant-span baseline: one normalized span predicted for every sample,
// fitted to maximize train mIoU over a regular grid.

struct NormalizedSpan {
  double s = 0.0;
  double e = 1.0;
};

/// Rows of an n_v-row video covered by [s, e); never empty.
inline Span span_on(const NormalizedSpan& ns, std::size_t n_v) {
  const double n = static_cast<double>(n_v);
  const std::size_t lo = std::min(n_v - 1, static_cast<std::size_t>(std::floor(ns.s * n)));
  const std::size_t hi = std::clamp(static_cast<std::size_t>(std::ceil(ns.e * n)), lo + 1, n_v);
  return {lo, hi - 1};
}

inline std::vector<Prediction> constant_predictions(const Dataset& ds, const NormalizedSpan& ns) {
  std::vector<Prediction> out;
  out.reserve(ds.size());
  for (const Sample& s : ds.samples) {
    const Span sp = span_on(ns, s.n_v());
    out.push_back({s.id, sp.s, sp.e, 1.0});
  }
  return out;
}

inline NormalizedSpan fit_constant_span(const Dataset& train, std::size_t grid = 20) {
  if (train.samples.empty()) throw DomainError("fit_constant_span: empty train set");
  const std::vector<GroundTruth> gts = ground_truths(train);
  NormalizedSpan best;
  double best_miou = -1.0;
  const double step = 1.0 / static_cast<double>(grid);
  for (std::size_t a = 0; a < grid; ++a)
    for (std::size_t b = a + 1; b <= grid; ++b) {
      const NormalizedSpan ns{static_cast<double>(a) * step, static_cast<double>(b) * step};
      const double m = mean_iou(constant_predictions(train, ns), gts);
      if (m > best_miou) {
        best_miou = m;
        best = ns;
      }
    }
  return best;
}

// ---------------------------------------------------------------------------
// Comparison table. Per split: dR@1 at each mu and mIoU; then the iid/ood gap
// on dR@1,IoU@0.7 and on mIoU.

struct TableRow {
  std::string label;
  MetricReport iid, ood, all;
};

inline constexpr std::size_t kTableCells = 3 * 4 + 2;

inline std::vector<std::string> table_columns() {
  std::vector<std::string> cols;
  for (const char* split : {"iid", "ood", "all"}) {
    for (double mu : kIouThresholds) cols.push_back(std::string(split) + "_dR1@" + threshold_key(mu));
    cols.push_back(std::string(split) + "_mIoU");
  }
  cols.push_back("p_gap_dR1@0.7");
  cols.push_back("p_gap_mIoU");
  return cols;
}

inline std::array<double, kTableCells> table_cells(const TableRow& r) {
  std::array<double, kTableCells> c{};
  std::size_t k = 0;
  for (const MetricReport* m : {&r.iid, &r.ood, &r.all}) {
    for (double v : m->dr1) c[k++] = v;
    c[k++] = m->miou;
  }
  c[k++] = r.iid.dr1[2] > 0.0 ? p_gap(r.iid.dr1[2], r.ood.dr1[2]) : NAN;
  c[k++] = r.iid.miou > 0.0 ? p_gap(r.iid.miou, r.ood.miou) : NAN;
  return c;
}

inline void write_table_csv(std::ostream& os, const std::vector<TableRow>& rows) {
  os << "config";
  for (const std::string& c : table_columns()) os << ',' << c;
  os << '\n';
  char buf[32];
  for (const TableRow& r : rows) {
    os << r.label;
    for (double v : table_cells(r)) {
      std::snprintf(buf, sizeof buf, ",%.2f", v);
      os << buf;
    }
    os << '\n';
  }
}

/// Mean and sample standard deviation of each cell across seeds.
struct MatrixRow {
  std::string label;
  std::vector<std::array<double, kTableCells>> runs;
};

inline void write_matrix_csv(std::ostream& os, const std::vector<MatrixRow>& rows) {
  os << "config,seeds";
  for (const std::string& c : table_columns()) os << ',' << c << "_mean," << c << "_sd";
  os << '\n';
  char buf[64];
  for (const MatrixRow& r : rows) {
    os << r.label << ',' << r.runs.size();
    for (std::size_t k = 0; k < kTableCells; ++k) {
      double mean = 0.0, sq = 0.0;
      for (const auto& run : r.runs) mean += run[k];
      mean /= static_cast<double>(r.runs.size());
      for (const auto& run : r.runs) sq += (run[k] - mean) * (run[k] - mean);
      const double sd = r.runs.size() > 1 ? std::sqrt(sq / static_cast<double>(r.runs.size() - 1)) : 0.0;
      std::snprintf(buf, sizeof buf, ",%.2f,%.2f", mean, sd);
      os << buf;
    }
    os << '\n';
  }
}

}  // namespace tsgdb
