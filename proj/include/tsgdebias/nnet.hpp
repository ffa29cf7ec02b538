#pragma once

// Span-based grounding model with video-only and query-only branches.
//
//   cross-modal:  z_vq = g_vq(m_vq(e_v(V), e_q(Q)))
//   video-only:   z_v  = g_v(e_v(V))
//   query-only:   z_q  = g_q(m_q(V_l[0:n_v], e_q(Q)))
//
// m_q mirrors m_vq's structure with its own parameters; g_v, g_q and g_vq
// share one architecture. Every parameter belongs to exactly one Owner, which
// is the unit gradient routing works on.

#include <array>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "tsgdebias/autodiff.hpp"
#include "tsgdebias/corpus.hpp"
#include "tsgdebias/errors.hpp"
#include "tsgdebias/tensor.hpp"

namespace tsgdb {

enum class Owner : std::uint8_t { e_v, e_q, m_vq, g_vq, g_v, m_q, g_q, V_l, embed };

inline constexpr std::array<Owner, 9> kAllOwners{Owner::e_v,  Owner::e_q, Owner::m_vq, Owner::g_vq, Owner::g_v,
                                                 Owner::m_q,  Owner::g_q, Owner::V_l,  Owner::embed};

inline std::string_view to_string(Owner o) {
  static constexpr std::array<std::string_view, 9> names{"e_v", "e_q", "m_vq", "g_vq", "g_v",
                                                         "m_q", "g_q", "V_l",  "embed"};
  return names[static_cast<std::size_t>(o)];
}

inline Owner owner_from_string(std::string_view s) {
  for (Owner o : kAllOwners)
    if (to_string(o) == s) return o;
  throw FormatError("unknown parameter owner '" + std::string(s) + "'");
}

struct Param {
  std::string name;
  Owner owner = Owner::e_v;
  Tensor value;
  friend bool operator==(const Param&, const Param&) = default;
};

/// Named parameters in creation order.
class ParamStore {
 public:
  std::size_t add(std::string name, Owner owner, Tensor value) {
    if (index_.contains(name)) throw ConfigError("duplicate parameter '" + name + "'");
    index_.emplace(name, params_.size());
    params_.push_back(Param{std::move(name), owner, std::move(value)});
    return params_.size() - 1;
  }

  std::size_t size() const noexcept { return params_.size(); }
  Param& operator[](std::size_t i) { return params_[i]; }
  const Param& operator[](std::size_t i) const { return params_[i]; }
  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

  std::optional<std::size_t> find(std::string_view name) const {
    auto it = index_.find(std::string(name));
    if (it == index_.end()) return std::nullopt;
    return it->second;
  }
  std::size_t id(std::string_view name) const {
    if (auto i = find(name)) return *i;
    throw ConfigError("no parameter named '" + std::string(name) + "'");
  }
  const Tensor& value(std::string_view name) const { return params_[id(name)].value; }
  Tensor& value(std::string_view name) { return params_[id(name)].value; }

  bool has_owner(Owner o) const {
    for (const Param& p : params_)
      if (p.owner == o) return true;
    return false;
  }
  std::size_t element_count() const {
    std::size_t n = 0;
    for (const Param& p : params_) n += p.value.size();
    return n;
  }

  friend bool operator==(const ParamStore& a, const ParamStore& b) { return a.params_ == b.params_; }

 private:
  std::vector<Param> params_;
  std::map<std::string, std::size_t, std::less<>> index_;
};

struct ModelConfig {
  std::size_t d_v = 16;
  std::size_t vocab_size = 50;
  std::size_t d = 16;
  std::size_t d_q = 0;  // word-embedding width; 0 means d
  std::size_t heads = 2;
  std::size_t encoder_blocks = 1;
  std::size_t predictor_blocks = 2;
  std::size_t kernel = 7;
  std::size_t n_v_max = kMaxVisualLength;
  std::size_t n_q_max = 64;
  double dropout = 0.0;

  std::size_t embed_width() const noexcept { return d_q == 0 ? d : d_q; }
  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(ModelConfig, d_v, vocab_size, d, d_q, heads, encoder_blocks,
                                                predictor_blocks, kernel, n_v_max, n_q_max, dropout)

inline void validate(const ModelConfig& c) {
  if (c.d == 0 || c.heads == 0 || c.d % c.heads != 0) throw ConfigError("model: d must be a positive multiple of heads");
  if (c.kernel % 2 == 0) throw ConfigError("model: kernel size must be odd");
  if (c.d_v == 0 || c.vocab_size == 0) throw ConfigError("model: d_v and vocab_size must be positive");
  if (c.n_v_max == 0 || c.n_q_max == 0) throw ConfigError("model: sequence limits must be positive");
  if (!(c.dropout >= 0.0 && c.dropout < 1.0)) throw ConfigError("model: dropout must lie in [0,1)");
}

/// Which decoders a parameter store carries.
struct BranchSet {
  bool vq = true;
  bool v = false;
  bool q = false;
  friend bool operator==(const BranchSet&, const BranchSet&) = default;
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(BranchSet, vq, v, q)

enum class Mode { vq, v_only, q_only, md };

/// Unimodal logits folded into the cross-modal logits when Mode::md is active.
struct FusionSet {
  bool use_v = true;
  bool use_q = true;
};

struct LogitPair {
  Tensor start;  // (n_v, 1)
  Tensor end;    // (n_v, 1)
  friend bool operator==(const LogitPair&, const LogitPair&) = default;
};

struct BranchLogits {
  std::optional<LogitPair> z_vq, z_v, z_q, z_fused;
  std::vector<bool> mask;
};

// ---------------------------------------------------------------------------
// Parameter construction.

namespace detail {

class Initializer {
 public:
  explicit Initializer(std::uint64_t seed) {
    std::seed_seq sseq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32), 0x1A17u};
    rng_.seed(sseq);
  }

  Tensor uniform(std::size_t r, std::size_t c, double bound) {
    std::uniform_real_distribution<double> u(-bound, bound);
    Tensor t(r, c);
    for (double& v : t.values()) v = u(rng_);
    return t;
  }
  Tensor xavier(std::size_t fan_in, std::size_t fan_out) {
    return uniform(fan_in, fan_out, std::sqrt(6.0 / static_cast<double>(fan_in + fan_out)));
  }

 private:
  std::mt19937_64 rng_;
};

struct Builder {
  ParamStore& ps;
  Initializer& init;

  void linear(const std::string& p, Owner o, std::size_t in, std::size_t out) {
    ps.add(p + ".W", o, init.xavier(in, out));
    ps.add(p + ".b", o, Tensor(1, out));
  }
  void layer_norm(const std::string& p, Owner o, std::size_t d) {
    ps.add(p + ".gain", o, Tensor(1, d, 1.0));
    ps.add(p + ".shift", o, Tensor(1, d));
  }
  void block(const std::string& p, Owner o, std::size_t d) {
    ps.add(p + ".attn.Wq", o, init.xavier(d, d));
    ps.add(p + ".attn.Wk", o, init.xavier(d, d));
    ps.add(p + ".attn.Wv", o, init.xavier(d, d));
    linear(p + ".attn.out", o, d, d);
    layer_norm(p + ".ln1", o, d);
    linear(p + ".ff1", o, d, d);
    linear(p + ".ff2", o, d, d);
    layer_norm(p + ".ln2", o, d);
  }
  void encoder(const std::string& p, Owner o, std::size_t in, std::size_t max_len, const ModelConfig& c) {
    linear(p + ".proj", o, in, c.d);
    ps.add(p + ".pos", o, init.uniform(max_len, c.d, 0.1));
    for (std::size_t b = 0; b < c.encoder_blocks; ++b) block(p + ".blk" + std::to_string(b), o, c.d);
    ps.add(p + ".conv.K", o, init.uniform(c.kernel, c.d, 1.0 / std::sqrt(static_cast<double>(c.kernel))));
    ps.add(p + ".conv.b", o, Tensor(1, c.d));
    layer_norm(p + ".conv.ln", o, c.d);
  }
  void coattention(const std::string& p, Owner o, std::size_t d) {
    ps.add(p + ".w_v", o, init.xavier(d, 1));
    ps.add(p + ".w_q", o, init.xavier(d, 1));
    ps.add(p + ".w_vq", o, init.xavier(1, d));
    linear(p + ".out", o, 4 * d, d);
  }
  void predictor(const std::string& p, Owner o, const ModelConfig& c) {
    for (std::size_t b = 0; b < c.predictor_blocks; ++b) block(p + ".blk" + std::to_string(b), o, c.d);
    linear(p + ".start", o, c.d, 1);
    linear(p + ".end", o, c.d, 1);
  }
};

}  // namespace detail

/// Allocates and initialises the parameters needed by `branches`.
inline ParamStore init_params(const ModelConfig& c, BranchSet branches, std::uint64_t seed) {
  validate(c);
  ParamStore ps;
  detail::Initializer init(seed);
  detail::Builder b{ps, init};
  const bool needs_video = branches.vq || branches.v;
  const bool needs_query = branches.vq || branches.q;
  if (needs_video) b.encoder("e_v", Owner::e_v, c.d_v, c.n_v_max, c);
  if (needs_query) {
    ps.add("embed.table", Owner::embed, init.uniform(c.vocab_size, c.embed_width(), 0.5));
    b.encoder("e_q", Owner::e_q, c.embed_width(), c.n_q_max, c);
  }
  if (branches.vq) {
    b.coattention("m_vq", Owner::m_vq, c.d);
    b.predictor("g_vq", Owner::g_vq, c);
  }
  if (branches.v) b.predictor("g_v", Owner::g_v, c);
  if (branches.q) {
    ps.add("V_l.seq", Owner::V_l, init.uniform(c.n_v_max, c.d, 0.1));
    b.coattention("m_q", Owner::m_q, c.d);
    b.predictor("g_q", Owner::g_q, c);
  }
  return ps;
}

inline BranchSet branches_in(const ParamStore& ps) {
  return {ps.has_owner(Owner::g_vq), ps.has_owner(Owner::g_v), ps.has_owner(Owner::g_q)};
}

// ---------------------------------------------------------------------------
// Graph construction.

/// Dropout state for one training step; a null context means inference.
struct DropoutContext {
  double rate = 0.0;
  std::mt19937_64* rng = nullptr;
};

/// Binds a ParamStore to one Graph, creating each leaf at most once.
class Binder {
 public:
  Binder(ad::Graph& g, const ParamStore& ps, const ModelConfig& cfg, const DropoutContext* drop)
      : g_(g), ps_(ps), cfg_(cfg), drop_(drop), cache_(ps.size()) {}

  ad::Graph& graph() { return g_; }
  const ModelConfig& config() const { return cfg_; }

  ad::Var p(std::string_view name) {
    const std::size_t id = ps_.id(name);
    if (!cache_[id]) cache_[id] = g_.leaf(ps_[id].value, static_cast<int>(id));
    return *cache_[id];
  }
  ad::Var p(const std::string& prefix, std::string_view suffix) { return p(prefix + std::string(suffix)); }

  ad::Var dropout(ad::Var x) {
    if (!drop_ || drop_->rate <= 0.0) return x;
    std::bernoulli_distribution keep(1.0 - drop_->rate);
    Tensor m(x.rows(), x.cols());
    const double s = 1.0 / (1.0 - drop_->rate);
    for (double& v : m.values()) v = keep(*drop_->rng) ? s : 0.0;
    return ad::mul_const(x, std::move(m));
  }

 private:
  ad::Graph& g_;
  const ParamStore& ps_;
  const ModelConfig& cfg_;
  const DropoutContext* drop_;
  std::vector<std::optional<ad::Var>> cache_;
};

namespace layers {

inline ad::Var linear(Binder& b, const std::string& p, ad::Var x) {
  return ad::add_row(ad::matmul(x, b.p(p, ".W")), b.p(p, ".b"));
}

inline ad::Var layer_norm(Binder& b, const std::string& p, ad::Var x) {
  return ad::layer_norm_rows(x, b.p(p, ".gain"), b.p(p, ".shift"));
}

inline ad::Var self_attention(Binder& b, const std::string& p, ad::Var x) {
  const std::size_t heads = b.config().heads;
  const std::size_t dh = b.config().d / heads;
  const ad::Var q = ad::matmul(x, b.p(p, ".Wq"));
  const ad::Var k = ad::matmul(x, b.p(p, ".Wk"));
  const ad::Var v = ad::matmul(x, b.p(p, ".Wv"));
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  std::vector<ad::Var> outs;
  outs.reserve(heads);
  for (std::size_t h = 0; h < heads; ++h) {
    const ad::Var qh = heads == 1 ? q : ad::slice_cols(q, h * dh, dh);
    const ad::Var kh = heads == 1 ? k : ad::slice_cols(k, h * dh, dh);
    const ad::Var vh = heads == 1 ? v : ad::slice_cols(v, h * dh, dh);
    const ad::Var att = ad::softmax_rows(ad::scale(ad::matmul_bt(qh, kh), scale));
    outs.push_back(ad::matmul(att, vh));
  }
  const ad::Var merged = heads == 1 ? outs.front() : ad::concat_cols(outs);
  return linear(b, p + ".out", merged);
}

/// Post-norm transformer block with a width-d feed-forward.
inline ad::Var transformer_block(Binder& b, const std::string& p, ad::Var x) {
  const ad::Var a = b.dropout(self_attention(b, p + ".attn", x));
  const ad::Var h = layer_norm(b, p + ".ln1", ad::add(x, a));
  const ad::Var f = b.dropout(linear(b, p + ".ff2", ad::relu(linear(b, p + ".ff1", h))));
  return layer_norm(b, p + ".ln2", ad::add(h, f));
}

/// projection + positional table -> transformer blocks -> residual depthwise conv.
inline ad::Var encoder(Binder& b, const std::string& p, ad::Var x) {
  ad::Var h = linear(b, p + ".proj", x);
  h = ad::add(h, ad::slice_rows(b.p(p, ".pos"), 0, x.rows()));
  h = b.dropout(h);
  for (std::size_t k = 0; k < b.config().encoder_blocks; ++k)
    h = transformer_block(b, p + ".blk" + std::to_string(k), h);
  const ad::Var c = ad::depthwise_conv_rows(h, b.p(p, ".conv.K"), b.p(p, ".conv.b"));
  return layer_norm(b, p + ".conv.ln", ad::add(h, c));
}

/// Context-query co-attention.
///   S[i,j] = w_v.V_i + w_q.Q_j + w_vq.(V_i * Q_j)
///   A = rowsoftmax(S) Q,  B = rowsoftmax(S) colsoftmax(S)^T V
///   out = [V, A, V*A, V*B] W + b
inline ad::Var coattention(Binder& b, const std::string& p, ad::Var v, ad::Var q) {
  ad::Var s = ad::matmul_bt(ad::mul_row(v, b.p(p, ".w_vq")), q);
  s = ad::add_col(s, ad::matmul(v, b.p(p, ".w_v")));
  s = ad::add_row(s, ad::transpose(ad::matmul(q, b.p(p, ".w_q"))));
  const ad::Var sr = ad::softmax_rows(s);
  const ad::Var sc = ad::softmax_cols(s);
  const ad::Var a = ad::matmul(sr, q);
  const ad::Var bb = ad::matmul(ad::matmul_bt(sr, sc), v);
  return linear(b, p + ".out", ad::concat_cols({v, a, ad::mul(v, a), ad::mul(v, bb)}));
}

struct SpanLogits {
  ad::Var start;
  ad::Var end;
};

inline SpanLogits predictor(Binder& b, const std::string& p, ad::Var h, const std::vector<bool>& mask) {
  for (std::size_t k = 0; k < b.config().predictor_blocks; ++k)
    h = transformer_block(b, p + ".blk" + std::to_string(k), h);
  return {ad::mask_fill(linear(b, p + ".start", h), mask), ad::mask_fill(linear(b, p + ".end", h), mask)};
}

}  // namespace layers

/// z_vq * sigma(z_q) * sigma(z_v) on one boundary vector; absent branches are skipped.
inline ad::Var fuse_var(ad::Var z_vq, std::optional<ad::Var> z_q, std::optional<ad::Var> z_v,
                        const std::vector<bool>& mask) {
  ad::Var out = z_vq;
  if (z_q) out = ad::mul(out, ad::sigmoid(*z_q));
  if (z_v) out = ad::mul(out, ad::sigmoid(*z_v));
  return ad::mask_fill(out, mask);
}

/// Graph handles produced by one forward pass.
struct ForwardVars {
  std::optional<ad::Var> video_enc, query_enc;
  std::optional<layers::SpanLogits> vq, v, q, fused;
  std::vector<bool> mask;
};

inline void check_inputs(const ModelConfig& c, const Sample& s) {
  if (s.d_v() != c.d_v)
    throw ValidationError("sample '" + s.id + "': feature width " + std::to_string(s.d_v()) + " != model d_v " +
                          std::to_string(c.d_v));
  if (s.n_v() == 0 || s.n_v() > c.n_v_max)
    throw ValidationError("sample '" + s.id + "': n_v outside [1, n_v_max]");
  if (s.tokens.empty() || s.tokens.size() > c.n_q_max)
    throw ValidationError("sample '" + s.id + "': query length outside [1, n_q_max]");
  for (std::size_t t : s.tokens)
    if (t >= c.vocab_size)
      throw ValidationError("sample '" + s.id + "': token id " + std::to_string(t) + " >= vocab size");
}

/// Builds the requested branches on `g`. Mode::md needs every branch named in
/// `fusion` plus the cross-modal decoder.
inline ForwardVars build_forward(ad::Graph& g, const ParamStore& ps, const ModelConfig& c, const Sample& s,
                                 Mode mode, FusionSet fusion = {}, const DropoutContext* drop = nullptr) {
  check_inputs(c, s);
  const BranchSet have = branches_in(ps);
  const bool want_vq = mode == Mode::vq || mode == Mode::md;
  const bool want_v = mode == Mode::v_only || (mode == Mode::md && fusion.use_v);
  const bool want_q = mode == Mode::q_only || (mode == Mode::md && fusion.use_q);
  if (mode == Mode::md && !fusion.use_v && !fusion.use_q)
    throw ConfigError("md mode needs at least one unimodal branch");
  if ((want_vq && !have.vq) || (want_v && !have.v) || (want_q && !have.q))
    throw ConfigError("forward: requested branch has no parameters in this store");

  Binder b(g, ps, c, drop);
  ForwardVars out;
  out.mask.assign(s.n_v(), true);
  const ad::Var feats = g.constant(s.features);
  if (want_vq || want_v) out.video_enc = layers::encoder(b, "e_v", feats);
  if (want_vq || want_q) {
    const ad::Var words = ad::gather_rows(b.p("embed.table"), s.tokens);
    out.query_enc = layers::encoder(b, "e_q", words);
  }
  if (want_vq)
    out.vq = layers::predictor(b, "g_vq", layers::coattention(b, "m_vq", *out.video_enc, *out.query_enc), out.mask);
  if (want_v) out.v = layers::predictor(b, "g_v", *out.video_enc, out.mask);
  if (want_q) {
    const ad::Var vl = ad::slice_rows(b.p("V_l.seq"), 0, s.n_v());
    out.q = layers::predictor(b, "g_q", layers::coattention(b, "m_q", vl, *out.query_enc), out.mask);
  }
  if (mode == Mode::md) {
    auto opt = [](const std::optional<layers::SpanLogits>& l, bool start) -> std::optional<ad::Var> {
      if (!l) return std::nullopt;
      return start ? l->start : l->end;
    };
    out.fused = layers::SpanLogits{fuse_var(out.vq->start, opt(out.q, true), opt(out.v, true), out.mask),
                                   fuse_var(out.vq->end, opt(out.q, false), opt(out.v, false), out.mask)};
  }
  return out;
}

/// Evaluation-mode forward pass returning plain logit values.
inline BranchLogits forward(const Sample& s, const ParamStore& ps, const ModelConfig& c, Mode mode,
                            FusionSet fusion = {}) {
  ad::Graph g;
  const ForwardVars fv = build_forward(g, ps, c, s, mode, fusion, nullptr);
  auto take = [](const std::optional<layers::SpanLogits>& l) -> std::optional<LogitPair> {
    if (!l) return std::nullopt;
    return LogitPair{l->start.value(), l->end.value()};
  };
  return BranchLogits{take(fv.vq), take(fv.v), take(fv.q), take(fv.fused), fv.mask};
}

// Value-level access to the individual modules, for inspection and tests.

inline Tensor encode_video(const Tensor& features, const ParamStore& ps, const ModelConfig& c) {
  if (features.cols() != c.d_v) throw ValidationError("encode_video: feature width != d_v");
  if (features.rows() == 0 || features.rows() > c.n_v_max) throw ValidationError("encode_video: n_v outside [1, n_v_max]");
  ad::Graph g;
  Binder b(g, ps, c, nullptr);
  return layers::encoder(b, "e_v", g.constant(features)).value();
}

inline Tensor encode_query(const std::vector<std::size_t>& tokens, const ParamStore& ps, const ModelConfig& c) {
  if (tokens.empty() || tokens.size() > c.n_q_max) throw ValidationError("encode_query: query length outside [1, n_q_max]");
  for (std::size_t t : tokens)
    if (t >= c.vocab_size) throw ValidationError("encode_query: token id " + std::to_string(t) + " >= vocab size");
  ad::Graph g;
  Binder b(g, ps, c, nullptr);
  return layers::encoder(b, "e_q", ad::gather_rows(b.p("embed.table"), tokens)).value();
}

/// `module` is "m_vq" or "m_q".
inline Tensor cross_modal_attend(const Tensor& v, const Tensor& q, const ParamStore& ps, const ModelConfig& c,
                                 const std::string& module = "m_vq") {
  if (v.cols() != c.d || q.cols() != c.d) throw ValidationError("cross_modal_attend: inputs must have width d");
  ad::Graph g;
  Binder b(g, ps, c, nullptr);
  return layers::coattention(b, module, g.constant(v), g.constant(q)).value();
}

/// `module` is "g_vq", "g_v" or "g_q"; every row of `h` is a valid position.
inline LogitPair predict_spans(const Tensor& h, const ParamStore& ps, const ModelConfig& c,
                               const std::string& module = "g_vq") {
  if (h.cols() != c.d || h.rows() == 0) throw ValidationError("predict_spans: input must be (n_v, d)");
  ad::Graph g;
  Binder b(g, ps, c, nullptr);
  const layers::SpanLogits z = layers::predictor(b, module, g.constant(h), std::vector<bool>(h.rows(), true));
  return {z.start.value(), z.end.value()};
}

/// Softmax of a logit column as a plain vector.
inline std::vector<double> softmax(const Tensor& logits) {
  Tensor row(1, logits.size(), std::vector<double>(logits.values().begin(), logits.values().end()));
  ad::kernel::softmax_rows_inplace(row);
  return {row.values().begin(), row.values().end()};
}

}  // namespace tsgdb
