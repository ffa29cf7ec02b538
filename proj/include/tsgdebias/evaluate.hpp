#pragma once

#include <string>
#include <vector>

#include "tsgdebias/corpus.hpp"
#include "tsgdebias/evalmetrics.hpp"
#include "tsgdebias/nnet.hpp"

namespace tsgdb {

/// Decoder whose logits are decoded at inference time.
enum class InferenceBranch { vq, v, q };

inline Prediction predict(const Sample& s, const ParamStore& ps, const ModelConfig& c,
                          InferenceBranch branch = InferenceBranch::vq) {
  const Mode mode = branch == InferenceBranch::vq  ? Mode::vq
                    : branch == InferenceBranch::v ? Mode::v_only
                                                   : Mode::q_only;
  const BranchLogits z = forward(s, ps, c, mode);
  const LogitPair& pair = branch == InferenceBranch::vq ? *z.z_vq : branch == InferenceBranch::v ? *z.z_v : *z.z_q;
  const std::vector<double> a_s = softmax(pair.start);
  const std::vector<double> a_e = softmax(pair.end);
  const SpanChoice span = extract_span(a_s, a_e);
  return {s.id, span.i_s, span.i_e, span.score};
}

inline std::vector<Prediction> predict_all(const Dataset& ds, const ParamStore& ps, const ModelConfig& c,
                                           InferenceBranch branch = InferenceBranch::vq) {
  std::vector<Prediction> out;
  out.reserve(ds.size());
  for (const Sample& s : ds.samples) out.push_back(predict(s, ps, c, branch));
  return out;
}

inline std::vector<GroundTruth> ground_truths(const Dataset& ds) {
  std::vector<GroundTruth> out;
  out.reserve(ds.size());
  for (const Sample& s : ds.samples) out.push_back(ground_truth(s));
  return out;
}

/// Decodes every sample with the chosen branch and scores the split.
inline MetricReport evaluate(const ParamStore& ps, const ModelConfig& c, const Dataset& ds,
                             InferenceBranch branch = InferenceBranch::vq) {
  const std::vector<Prediction> preds = predict_all(ds, ps, c, branch);
  const std::vector<GroundTruth> gts = ground_truths(ds);
  return score_predictions(preds, gts, std::string(to_string(ds.split)));
}

}  // namespace tsgdb
