#pragma once

#include <filesystem>
#include <random>
#include <string>

#include <unistd.h>

#include "tsgdebias/corpus.hpp"
#include "tsgdebias/nnet.hpp"
#include "tsgdebias/training.hpp"

namespace fixtures {

/// Sample with n_v rows of width d_v whose row r holds value r + c/100.
inline tsgdb::Sample ramp_sample(std::size_t n_v, std::size_t i_s, std::size_t i_e, std::size_t d_v = 2,
                                 double duration = 0.0) {
  tsgdb::Sample s;
  s.id = "ramp";
  s.duration = duration > 0.0 ? duration : static_cast<double>(n_v);
  s.features = tsgdb::Tensor(n_v, d_v);
  for (std::size_t r = 0; r < n_v; ++r)
    for (std::size_t c = 0; c < d_v; ++c) s.features(r, c) = static_cast<double>(r) + 0.01 * static_cast<double>(c);
  s.tokens = {1, 2, 3};
  const double unit = s.duration / static_cast<double>(n_v);
  s.i_s = i_s;
  s.i_e = i_e;
  s.t_s = static_cast<double>(i_s) * unit;
  s.t_e = static_cast<double>(i_e + 1) * unit;
  return s;
}

/// Small model that keeps finite-difference checks fast.
inline tsgdb::ModelConfig tiny_model() {
  tsgdb::ModelConfig c;
  c.d_v = 3;
  c.vocab_size = 8;
  c.d = 4;
  c.heads = 2;
  c.encoder_blocks = 1;
  c.predictor_blocks = 1;
  c.kernel = 3;
  c.n_v_max = 16;
  c.n_q_max = 8;
  return c;
}

/// Random features and tokens sized for `c`; the moment is [i_s, i_e].
inline tsgdb::Sample random_sample(const tsgdb::ModelConfig& c, std::size_t n_v, std::size_t i_s, std::size_t i_e,
                                   std::uint64_t seed, std::size_t n_q = 3) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> nd(0.0, 1.0);
  tsgdb::Sample s = ramp_sample(n_v, i_s, i_e, c.d_v);
  s.id = "rand" + std::to_string(seed);
  for (double& v : s.features.values()) v = nd(rng);
  s.tokens.clear();
  for (std::size_t k = 0; k < n_q; ++k) s.tokens.push_back(rng() % c.vocab_size);
  return s;
}

/// Toy decoder with no transformer blocks: z = 3 h[:,0] + 2, so the label row
/// scores 5 and every other row 2 at both boundaries.
struct ShapingToy {
  tsgdb::ModelConfig model;
  tsgdb::ParamStore params;
  tsgdb::Tensor h;
  std::size_t label = 1;
};

inline ShapingToy shaping_toy() {
  ShapingToy t;
  t.model = tiny_model();
  t.model.d = 2;
  t.model.heads = 1;
  t.model.predictor_blocks = 0;
  t.params = tsgdb::init_params(t.model, {true, false, false}, 1);
  for (const char* head : {"g_vq.start", "g_vq.end"}) {
    t.params.value(std::string(head) + ".W") = tsgdb::Tensor(2, 1, std::vector<double>{3.0, 0.0});
    t.params.value(std::string(head) + ".b") = tsgdb::Tensor(1, 1, 2.0);
  }
  t.h = tsgdb::Tensor(4, 2);
  for (std::size_t r = 0; r < 4; ++r) t.h(r, r == t.label ? 0 : 1) = 1.0;
  return t;
}

/// Unimodal logits whose sigmoid is `at` on row `label` and `elsewhere` on the others.
inline tsgdb::LogitPair confidence_logits(std::size_t n, std::size_t label, double at, double elsewhere) {
  auto logit = [](double p) { return std::log(p / (1.0 - p)); };
  tsgdb::Tensor z(n, 1, logit(elsewhere));
  z[label] = logit(at);
  return {z, z};
}

struct OwnerError {
  tsgdb::Owner owner;
  double rel_error = 0.0;
  double grad_norm = 0.0;
};

/// Routed reverse-mode gradients against central differences of the gated
/// objective: for owner o the reference is d/dθ of the sum of the loss terms
/// whose gate admits o. One entry per owner present in `ps`.
inline std::vector<OwnerError> gated_fd_errors(const tsgdb::ModelConfig& c, tsgdb::ParamStore ps,
                                               const tsgdb::Sample& s, const tsgdb::RoutingPolicy& policy,
                                               tsgdb::FusionSet fusion = {}, double step = 1e-6) {
  using namespace tsgdb;
  std::vector<Tensor> analytic = zero_gradients(ps);
  {
    ad::Graph g;
    const ForwardVars fv = build_forward(g, ps, c, s, Mode::md, fusion);
    backward_and_route(g, fv, s, ps, policy, analytic);
  }
  auto objective = [&](Owner o) {
    const LossComponents l = total_loss(forward(s, ps, c, Mode::md, fusion), s.i_s, s.i_e, true);
    return (policy.allows(LossTerm::vq, o) ? l.vq : 0.0) + (policy.allows(LossTerm::q, o) ? l.q : 0.0) +
           (policy.allows(LossTerm::v, o) ? l.v : 0.0);
  };
  std::vector<OwnerError> out;
  for (Owner o : kAllOwners) {
    if (!ps.has_owner(o)) continue;
    double diff = 0.0, na = 0.0, nn = 0.0;
    for (std::size_t k = 0; k < ps.size(); ++k) {
      if (ps[k].owner != o) continue;
      for (std::size_t i = 0; i < ps[k].value.size(); ++i) {
        const double keep = ps[k].value[i];
        ps[k].value[i] = keep + step;
        const double up = objective(o);
        ps[k].value[i] = keep - step;
        const double down = objective(o);
        ps[k].value[i] = keep;
        const double numeric = (up - down) / (2.0 * step);
        const double a = analytic[k][i];
        diff += (a - numeric) * (a - numeric);
        na += a * a;
        nn += numeric * numeric;
      }
    }
    const double scale = std::sqrt(na) + std::sqrt(nn);
    out.push_back({o, scale > 0.0 ? std::sqrt(diff) / scale : 0.0, std::sqrt(na)});
  }
  return out;
}

/// Fresh empty directory under the system temp dir.
/// Fresh per-process directory; ctest may run several test processes at once.
inline std::filesystem::path temp_dir(const std::string& name) {
  const auto dir =
      std::filesystem::temp_directory_path() / ("tsgdb_test_" + std::to_string(::getpid()) + "_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace fixtures
