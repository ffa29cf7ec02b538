#pragma once

// Losses, logit fusion, per-loss gradient routing, Adam and the training loop.
//
// With model debiasing the objective is
//   L_all = L_vq(softmax(z_vq * sigma(z_q) * sigma(z_v))) + L_q + L_v
// and each component only updates the owners its gate allows. The unimodal
// losses never touch the shared encoders; L_vq never touches V_l but still
// reaches the unimodal decoders through the sigmoids of the fusion.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "tsgdebias/autodiff.hpp"
#include "tsgdebias/corpus.hpp"
#include "tsgdebias/ddebias.hpp"
#include "tsgdebias/errors.hpp"
#include "tsgdebias/evaluate.hpp"
#include "tsgdebias/nnet.hpp"

namespace tsgdb {

// ---------------------------------------------------------------------------
// Losses and fusion on plain values.

/// 0.5 * [-ln a_s[i_s] - ln a_e[i_e]], each term capped at -ln(1e-30).
inline double span_loss(std::span<const double> a_s, std::span<const double> a_e, std::size_t i_s,
                        std::size_t i_e) {
  if (i_s >= a_s.size() || i_e >= a_e.size()) throw std::logic_error("span_loss: label index out of range");
  auto term = [](double p) { return std::min(-std::log(p), ad::kMaxNll); };
  return 0.5 * (term(a_s[i_s]) + term(a_e[i_e]));
}

/// z_vq * sigma(z_q) * sigma(z_v), independently for start and end. Absent
/// branches are skipped; masked positions stay at the masked logit.
inline LogitPair fuse(const LogitPair& z_vq, const std::optional<LogitPair>& z_q, const std::optional<LogitPair>& z_v,
                      const std::vector<bool>& mask = {}) {
  auto one = [&](const Tensor& base, const Tensor* q, const Tensor* v) {
    Tensor out = base;
    for (std::size_t i = 0; i < out.size(); ++i) {
      if (!mask.empty() && !mask[i]) {
        out[i] = ad::kMaskedLogit;
        continue;
      }
      if (q) out[i] *= ad::kernel::sigmoid((*q)[i]);
      if (v) out[i] *= ad::kernel::sigmoid((*v)[i]);
    }
    return out;
  };
  for (const auto* z : {&z_q, &z_v})
    if (*z && !(*z)->start.same_shape(z_vq.start)) throw std::invalid_argument("fuse: logit lengths differ");
  return {one(z_vq.start, z_q ? &z_q->start : nullptr, z_v ? &z_v->start : nullptr),
          one(z_vq.end, z_q ? &z_q->end : nullptr, z_v ? &z_v->end : nullptr)};
}

struct LossComponents {
  double vq = 0.0;
  double q = 0.0;
  double v = 0.0;
  double total() const noexcept { return vq + q + v; }
};

inline double pair_loss(const LogitPair& z, std::size_t i_s, std::size_t i_e) {
  return span_loss(softmax(z.start), softmax(z.end), i_s, i_e);
}

/// md: L_vq on the fused logits plus whichever unimodal losses are present;
/// otherwise the plain cross-modal span loss.
inline LossComponents total_loss(const BranchLogits& z, std::size_t i_s, std::size_t i_e, bool md) {
  LossComponents out;
  if (!md) {
    if (!z.z_vq) throw ConfigError("total_loss: cross-modal logits missing");
    out.vq = pair_loss(*z.z_vq, i_s, i_e);
    return out;
  }
  if (!z.z_vq || (!z.z_q && !z.z_v)) throw ConfigError("total_loss: md needs z_vq and a unimodal branch");
  const LogitPair fused = z.z_fused ? *z.z_fused : fuse(*z.z_vq, z.z_q, z.z_v, z.mask);
  out.vq = pair_loss(fused, i_s, i_e);
  if (z.z_q) out.q = pair_loss(*z.z_q, i_s, i_e);
  if (z.z_v) out.v = pair_loss(*z.z_v, i_s, i_e);
  return out;
}

// ---------------------------------------------------------------------------
// Gradient routing.

enum class LossTerm : std::uint8_t { vq, q, v };

inline constexpr std::array<LossTerm, 3> kLossTerms{LossTerm::vq, LossTerm::q, LossTerm::v};

/// Per-(loss, owner) gradient gates.
struct RoutingPolicy {
  std::array<std::array<bool, kAllOwners.size()>, 3> open{};

  bool allows(LossTerm l, Owner o) const {
    return open[static_cast<std::size_t>(l)][static_cast<std::size_t>(o)];
  }
  void set(LossTerm l, Owner o, bool value) {
    open[static_cast<std::size_t>(l)][static_cast<std::size_t>(o)] = value;
  }

  static RoutingPolicy unrestricted() {
    RoutingPolicy p;
    for (auto& row : p.open) row.fill(true);
    return p;
  }

  /// L_vq: every owner except V_l. L_q: m_q, g_q, V_l. L_v: g_v.
  static RoutingPolicy debiasing() {
    RoutingPolicy p;
    for (Owner o : kAllOwners) p.set(LossTerm::vq, o, o != Owner::V_l);
    for (Owner o : {Owner::m_q, Owner::g_q, Owner::V_l}) p.set(LossTerm::q, o, true);
    p.set(LossTerm::v, Owner::g_v, true);
    return p;
  }
};

/// One zero tensor per parameter.
inline std::vector<Tensor> zero_gradients(const ParamStore& ps) {
  std::vector<Tensor> g;
  g.reserve(ps.size());
  for (const Param& p : ps) g.emplace_back(p.value.rows(), p.value.cols(), 0.0);
  return g;
}

struct LossWeights {
  double q = 1.0;
  double v = 1.0;
};

/// Adds the loss terms of one forward pass to the graph, sweeps backward once
/// per term and accumulates each parameter's gradient into `accum` only when
/// the (term, owner) gate is open. Returns the loss values.
inline LossComponents backward_and_route(ad::Graph& g, const ForwardVars& fv, const Sample& s, const ParamStore& ps,
                                         const RoutingPolicy& policy, std::vector<Tensor>& accum,
                                         LossWeights weights = {}) {
  struct Term {
    LossTerm kind;
    ad::Var loss;
    double weight;
  };
  std::vector<Term> terms;
  if (fv.fused)
    terms.push_back({LossTerm::vq, ad::span_nll(fv.fused->start, fv.fused->end, s.i_s, s.i_e), 1.0});
  else if (fv.vq)
    terms.push_back({LossTerm::vq, ad::span_nll(fv.vq->start, fv.vq->end, s.i_s, s.i_e), 1.0});
  if (fv.q) terms.push_back({LossTerm::q, ad::span_nll(fv.q->start, fv.q->end, s.i_s, s.i_e), weights.q});
  if (fv.v) terms.push_back({LossTerm::v, ad::span_nll(fv.v->start, fv.v->end, s.i_s, s.i_e), weights.v});

  LossComponents out;
  for (const Term& t : terms) {
    const double value = t.loss.value()[0];
    (t.kind == LossTerm::vq ? out.vq : t.kind == LossTerm::q ? out.q : out.v) = value;
    // Sweeps need not enter an encoder whose owners are all gated off.
    std::vector<ad::Var> stop;
    if (fv.video_enc && !policy.allows(t.kind, Owner::e_v)) stop.push_back(*fv.video_enc);
    if (fv.query_enc && !policy.allows(t.kind, Owner::e_q) && !policy.allows(t.kind, Owner::embed))
      stop.push_back(*fv.query_enc);
    g.backward(t.loss, stop);
    g.for_each_param_grad([&](int id, const Tensor& grad) {
      if (!policy.allows(t.kind, ps[id].owner)) return;
      Tensor& dst = accum[id];
      for (std::size_t i = 0; i < grad.size(); ++i) dst[i] += t.weight * grad[i];
    });
  }
  return out;
}

/// L2 norm of dL_vq / d(g_vq parameters) for decoder input `h` and fixed
/// unimodal logits. With `fused` the loss is taken on z_vq * sigma(z_q) * sigma(z_v),
/// otherwise on z_vq alone.
inline double g_vq_gradient_norm(const ParamStore& ps, const ModelConfig& c, const Tensor& h, const LogitPair& z_q,
                                 const LogitPair& z_v, std::size_t i_s, std::size_t i_e, bool fused) {
  ad::Graph g;
  Binder b(g, ps, c, nullptr);
  const std::vector<bool> mask(h.rows(), true);
  const layers::SpanLogits z = layers::predictor(b, "g_vq", g.constant(h), mask);
  ad::Var zs = z.start, ze = z.end;
  if (fused) {
    zs = fuse_var(zs, g.constant(z_q.start), g.constant(z_v.start), mask);
    ze = fuse_var(ze, g.constant(z_q.end), g.constant(z_v.end), mask);
  }
  g.backward(ad::span_nll(zs, ze, i_s, i_e));
  double sq = 0.0;
  g.for_each_param_grad([&](int id, const Tensor& grad) {
    if (ps[id].owner != Owner::g_vq) return;
    for (double x : grad.values()) sq += x * x;
  });
  return std::sqrt(sq);
}

// ---------------------------------------------------------------------------
// Optimizer.

struct OptimState {
  std::vector<Tensor> m;
  std::vector<Tensor> v;
  std::size_t step = 0;
  double lr = 5e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

inline OptimState make_optim_state(const ParamStore& ps, double lr) {
  OptimState st;
  st.m = zero_gradients(ps);
  st.v = zero_gradients(ps);
  st.lr = lr;
  return st;
}

/// Bias-corrected Adam update. Any non-finite gradient aborts the step before
/// anything is modified.
inline void adam_step(ParamStore& ps, const std::vector<Tensor>& grads, OptimState& st) {
  if (grads.size() != ps.size() || st.m.size() != ps.size())
    throw std::invalid_argument("adam_step: gradient/state count mismatch");
  for (std::size_t k = 0; k < ps.size(); ++k) {
    if (!grads[k].same_shape(ps[k].value)) throw std::invalid_argument("adam_step: shape mismatch for " + ps[k].name);
    for (double g : grads[k].values())
      if (!std::isfinite(g)) throw NumericError("non-finite gradient in parameter '" + ps[k].name + "'");
  }
  ++st.step;
  const double c1 = 1.0 - std::pow(st.beta1, static_cast<double>(st.step));
  const double c2 = 1.0 - std::pow(st.beta2, static_cast<double>(st.step));
  for (std::size_t k = 0; k < ps.size(); ++k) {
    Tensor& p = ps[k].value;
    Tensor& m = st.m[k];
    Tensor& v = st.v[k];
    const Tensor& g = grads[k];
    for (std::size_t i = 0; i < p.size(); ++i) {
      m[i] = st.beta1 * m[i] + (1.0 - st.beta1) * g[i];
      v[i] = st.beta2 * v[i] + (1.0 - st.beta2) * g[i] * g[i];
      p[i] -= st.lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + st.eps);
    }
  }
}

/// Rescales `grads` so their joint L2 norm is at most `max_norm`; returns the norm before clipping.
inline double clip_global_norm(std::vector<Tensor>& grads, double max_norm) {
  double sq = 0.0;
  for (const Tensor& g : grads)
    for (double x : g.values()) sq += x * x;
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const double s = max_norm / norm;
    for (Tensor& g : grads)
      for (double& x : g.values()) x *= s;
  }
  return norm;
}

// ---------------------------------------------------------------------------
// Training loop.

enum class TrainMode { vq, v_only, q_only };
enum class MdKind { off, full, v_only, q_only };

NLOHMANN_JSON_SERIALIZE_ENUM(TrainMode, {{TrainMode::vq, "vq"}, {TrainMode::v_only, "v_only"}, {TrainMode::q_only, "q_only"}})
NLOHMANN_JSON_SERIALIZE_ENUM(MdKind, {{MdKind::off, "off"}, {MdKind::full, "full"}, {MdKind::v_only, "v_only"}, {MdKind::q_only, "q_only"}})

struct TrainConfig {
  TrainMode mode = TrainMode::vq;
  bool dd = false;
  MdKind md = MdKind::off;
  std::size_t n_clip = 5;
  std::size_t max_new_per_sample = 0;  // 0 keeps every truncation
  ModelConfig model;
  double lr = 5e-4;
  std::size_t batch = 16;
  std::size_t epochs = 100;
  std::size_t patience = 10;
  double clip_norm = 1.0;
  std::uint64_t seed = 0;
  // Unimodal loss weights; the debiasing objective uses 1.0 for both.
  double weight_q = 1.0;
  double weight_v = 1.0;

  friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(TrainConfig, mode, dd, md, n_clip, max_new_per_sample, model, lr, batch,
                                                epochs, patience, clip_norm, seed, weight_q, weight_v)

inline void validate(const TrainConfig& c) {
  validate(c.model);
  if (c.md != MdKind::off && c.mode != TrainMode::vq)
    throw ConfigError("md != off requires mode = vq");
  if (c.batch == 0) throw ConfigError("batch must be >= 1");
  if (c.n_clip == 0) throw ConfigError("n_clip must be >= 1");
  if (!(c.lr > 0.0)) throw ConfigError("lr must be positive");
}

inline BranchSet branches_for(const TrainConfig& c) {
  switch (c.mode) {
    case TrainMode::v_only: return {false, true, false};
    case TrainMode::q_only: return {false, false, true};
    case TrainMode::vq: break;
  }
  switch (c.md) {
    case MdKind::off: return {true, false, false};
    case MdKind::full: return {true, true, true};
    case MdKind::v_only: return {true, true, false};
    case MdKind::q_only: return {true, false, true};
  }
  return {};
}

inline InferenceBranch inference_branch(TrainMode m) {
  return m == TrainMode::vq ? InferenceBranch::vq : m == TrainMode::v_only ? InferenceBranch::v : InferenceBranch::q;
}

struct Objective {
  Mode mode = Mode::vq;
  FusionSet fusion;
  RoutingPolicy policy = RoutingPolicy::unrestricted();
  LossWeights weights;
};

inline Objective objective_for(const TrainConfig& c) {
  Objective o;
  o.weights = {c.weight_q, c.weight_v};
  if (c.mode == TrainMode::v_only) {
    o.mode = Mode::v_only;
  } else if (c.mode == TrainMode::q_only) {
    o.mode = Mode::q_only;
  } else if (c.md == MdKind::off) {
    o.mode = Mode::vq;
  } else {
    o.mode = Mode::md;
    o.fusion = {c.md != MdKind::q_only, c.md != MdKind::v_only};
    o.policy = RoutingPolicy::debiasing();
  }
  return o;
}

struct EpochRecord {
  std::size_t epoch = 0;
  double L_vq = 0.0;
  double L_q = 0.0;
  double L_v = 0.0;
  double val_miou = 0.0;
};

inline void to_json(nlohmann::json& j, const EpochRecord& r) {
  j = {{"epoch", r.epoch}, {"L_vq", r.L_vq}, {"L_q", r.L_q}, {"L_v", r.L_v}, {"val_mIoU", r.val_miou}};
}
inline void from_json(const nlohmann::json& j, EpochRecord& r) {
  r.epoch = j.at("epoch").get<std::size_t>();
  r.L_vq = j.at("L_vq").get<double>();
  r.L_q = j.at("L_q").get<double>();
  r.L_v = j.at("L_v").get<double>();
  r.val_miou = j.at("val_mIoU").get<double>();
}

struct TrainResult {
  ParamStore params;  // parameters of the best validation epoch
  std::vector<EpochRecord> history;
  std::size_t best_epoch = 0;
  double best_val_miou = 0.0;
  std::size_t train_samples = 0;
  std::size_t steps = 0;
};

/// Gradient of one sample under `obj`, accumulated into `accum`.
inline LossComponents sample_gradients(const ParamStore& ps, const ModelConfig& mc, const Sample& s,
                                       const Objective& obj, std::vector<Tensor>& accum,
                                       const DropoutContext* drop = nullptr) {
  ad::Graph g;
  const ForwardVars fv = build_forward(g, ps, mc, s, obj.mode, obj.fusion, drop);
  return backward_and_route(g, fv, s, ps, obj.policy, accum, obj.weights);
}

/// Mini-batch Adam with seeded shuffling and early stopping on validation
/// mIoU. With dd the train split is first expanded by truncation. An empty
/// validation set disables early stopping and keeps the final parameters.
inline TrainResult train(const TrainConfig& cfg, const Dataset& train_set, const Dataset& val_set,
                         const std::function<void(const EpochRecord&)>& on_epoch = {}) {
  validate(cfg);
  TrainResult res;
  res.params = init_params(cfg.model, branches_for(cfg), cfg.seed);
  if (cfg.epochs == 0) return res;

  const Dataset data =
      cfg.dd ? debias_dataset(train_set, cfg.n_clip,
                              cfg.max_new_per_sample ? std::optional<std::size_t>(cfg.max_new_per_sample) : std::nullopt,
                              cfg.seed)
             : train_set;
  res.train_samples = data.size();
  if (data.empty()) return res;

  const Objective obj = objective_for(cfg);
  const InferenceBranch branch = inference_branch(cfg.mode);
  std::seed_seq sseq{static_cast<std::uint32_t>(cfg.seed), static_cast<std::uint32_t>(cfg.seed >> 32), 0x7EA1u};
  std::mt19937_64 rng(sseq);
  DropoutContext drop{cfg.model.dropout, &rng};
  OptimState opt = make_optim_state(res.params, cfg.lr);
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), std::size_t{0});

  ParamStore best = res.params;
  double best_miou = -1.0;
  std::size_t since_best = 0;
  std::vector<Tensor> grads = zero_gradients(res.params);

  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    LossComponents sum;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch) {
      const std::size_t stop = std::min(order.size(), start + cfg.batch);
      for (Tensor& gt : grads) gt.fill(0.0);
      for (std::size_t k = start; k < stop; ++k) {
        const LossComponents lc = sample_gradients(res.params, cfg.model, data.samples[order[k]], obj, grads, &drop);
        sum.vq += lc.vq;
        sum.q += lc.q;
        sum.v += lc.v;
      }
      const double inv = 1.0 / static_cast<double>(stop - start);
      for (Tensor& gt : grads)
        for (double& x : gt.values()) x *= inv;
      clip_global_norm(grads, cfg.clip_norm);
      adam_step(res.params, grads, opt);
      ++res.steps;
    }
    const double n = static_cast<double>(data.size());
    EpochRecord rec{epoch, sum.vq / n, sum.q / n, sum.v / n, 0.0};
    if (!val_set.empty()) rec.val_miou = evaluate(res.params, cfg.model, val_set, branch).miou;
    res.history.push_back(rec);
    if (on_epoch) on_epoch(rec);

    if (val_set.empty()) continue;
    if (rec.val_miou > best_miou) {
      best_miou = rec.val_miou;
      best = res.params;
      res.best_epoch = epoch;
      since_best = 0;
    } else if (++since_best >= cfg.patience) {
      break;
    }
  }
  if (!val_set.empty()) {
    res.params = std::move(best);
    res.best_val_miou = best_miou;
  } else {
    res.best_epoch = res.history.size();
  }
  return res;
}

}  // namespace tsgdb
