#pragma once

// The tsgdb command line: synth, audit, augment, train, eval, report.
// Exit status: 0 success, 1 configuration/data invariant violated,
// 2 usage error. Log verbosity comes from TSGDB_LOG_LEVEL.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include "tsgdebias/biasaudit.hpp"
#include "tsgdebias/checkpoint.hpp"
#include "tsgdebias/config.hpp"
#include "tsgdebias/corpus.hpp"
#include "tsgdebias/ddebias.hpp"
#include "tsgdebias/evaluate.hpp"
#include "tsgdebias/experiment.hpp"
#include "tsgdebias/synthgen.hpp"
#include "tsgdebias/training.hpp"

namespace tsgdb::cli {

namespace fs = std::filesystem;

inline constexpr int kExitOk = 0;
inline constexpr int kExitInvariant = 1;
inline constexpr int kExitUsage = 2;

inline std::shared_ptr<spdlog::logger> logger() {
  static const std::shared_ptr<spdlog::logger> log = [] {
    auto l = spdlog::stderr_color_st("tsgdb");
    const char* env = std::getenv("TSGDB_LOG_LEVEL");
    l->set_level(env ? spdlog::level::from_str(env) : spdlog::level::info);
    l->set_pattern("[%l] %v");
    return l;
  }();
  return log;
}

namespace detail {

inline void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw FormatError("cannot write " + path.string());
  os << text;
}

inline nlohmann::json read_json(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw ParseError("cannot open " + path.string());
  const nlohmann::json j = nlohmann::json::parse(is, nullptr, false);
  if (j.is_discarded()) throw ParseError("malformed JSON in " + path.string());
  return j;
}

inline std::optional<fs::path> opt_path(const std::string& s) {
  return s.empty() ? std::nullopt : std::optional<fs::path>(s);
}

inline Dataset load_split(const fs::path& dir, Split split, std::size_t max_len = kMaxVisualLength) {
  LoadOptions opts;
  opts.split = split;
  opts.max_visual_length = max_len;
  return load_dataset(split_manifest(dir, split), opts);
}

/// Checks that data and model agree on feature width and vocabulary.
inline void check_data_matches(const ModelConfig& mc, const Dataset& ds) {
  for (const Sample& s : ds.samples) {
    if (s.d_v() != mc.d_v)
      throw ConfigError("model.d_v (" + std::to_string(mc.d_v) + ") must equal the data feature width (" +
                        std::to_string(s.d_v()) + ")");
    break;
  }
  if (ds.vocab_size > mc.vocab_size)
    throw ConfigError("model.vocab_size (" + std::to_string(mc.vocab_size) + ") must cover the data vocabulary (" +
                      std::to_string(ds.vocab_size) + ")");
}

struct Benchmarks {
  Dataset train, val, test_iid, test_ood;
};

inline Benchmarks load_all(const fs::path& dir, std::size_t max_len) {
  return {load_split(dir, Split::train, max_len), load_split(dir, Split::val, max_len),
          load_split(dir, Split::test_iid, max_len), load_split(dir, Split::test_ood, max_len)};
}

inline void write_history(const fs::path& path, const std::vector<EpochRecord>& history) {
  std::string text;
  for (const EpochRecord& r : history) text += nlohmann::json(r).dump() + "\n";
  write_text(path, text);
}

inline TrainResult train_logged(const TrainConfig& cfg, const Dataset& train_set, const Dataset& val) {
  return train(cfg, train_set, val, [&](const EpochRecord& r) {
    logger()->debug("epoch {} L_vq={:.4f} L_q={:.4f} L_v={:.4f} val_mIoU={:.2f}", r.epoch, r.L_vq, r.L_q, r.L_v,
                    r.val_miou);
  });
}

inline Checkpoint make_checkpoint(const RunConfig& rc, const TrainResult& res) {
  Checkpoint ck;
  ck.config = rc;
  ck.history_digest = {{"epochs", res.history.size()},
                       {"best_epoch", res.best_epoch},
                       {"best_val_mIoU", res.best_val_miou},
                       {"train_samples", res.train_samples},
                       {"steps", res.steps}};
  ck.params = res.params;
  return ck;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Subcommands.

struct SynthArgs {
  std::string out, config;
  std::vector<std::string> sets;
  std::optional<std::uint64_t> seed;
};

inline int cmd_synth(const SynthArgs& a) {
  std::vector<std::string> sets = a.sets;
  if (a.seed) sets.push_back("seed=" + std::to_string(*a.seed));
  const SynthSpec spec = resolve_config<SynthSpec>(detail::opt_path(a.config), sets);
  const Benchmark b = generate_benchmark(spec);
  save_benchmark(b, spec, a.out);
  logger()->info("wrote benchmark to {} ({} train, {} val, {} iid, {} ood)", a.out, b.train.size(), b.val.size(),
                 b.test_iid.size(), b.test_ood.size());
  return kExitOk;
}

struct AuditArgs {
  std::string data, out, split = "train";
  std::size_t bins = 40;
  std::vector<double> region;
};

inline int cmd_audit(const AuditArgs& a) {
  const Split split = split_from_string(a.split);
  Dataset ds = split == Split::test_all
                   ? concat_test_all(detail::load_split(a.data, Split::test_iid), detail::load_split(a.data, Split::test_ood))
                   : detail::load_split(a.data, split);
  Rect r;
  if (!a.region.empty()) {
    if (a.region.size() != 4) throw UsageError("--region takes four numbers: s_lo s_hi e_lo e_hi");
    r = {a.region[0], a.region[1], a.region[2], a.region[3]};
  } else {
    r = load_benchmark_spec(a.data).bias_region;
  }
  const DensityGrid grid = density_grid(ds, a.bins);
  const nlohmann::json summary = {{"split", a.split},
                                  {"bins", a.bins},
                                  {"total", grid.total},
                                  {"region", r},
                                  {"biased_proportion", biased_proportion(ds, BiasRegion{{r}})},
                                  {"kl_to_uniform", kl_to_uniform(grid)}};
  std::ostringstream csv;
  write_grid_csv(csv, grid);
  detail::write_text(fs::path(a.out) / "density.csv", csv.str());
  detail::write_text(fs::path(a.out) / "audit.json", summary.dump(2) + "\n");
  logger()->info("audit {}: {} annotations, biased_proportion={:.4f}", a.split, grid.total,
                 summary["biased_proportion"].get<double>());
  return kExitOk;
}

struct AugmentArgs {
  std::string data, out, split = "train";
  std::size_t n_clip = 5;
  std::size_t max_new = 0;
  std::uint64_t seed = 0;
};

/// Writes the debiased train split next to copies of the other splits, so the
/// output directory is itself a complete benchmark.
inline int cmd_augment(const AugmentArgs& a) {
  const Split split = split_from_string(a.split);
  if (split != Split::train) throw UsageError("augment: only the train split may be debiased (got " + a.split + ")");
  const fs::path in(a.data), out(a.out);
  const Dataset train_set = detail::load_split(in, Split::train);
  const Dataset aug = debias_dataset(train_set, a.n_clip,
                                     a.max_new ? std::optional<std::size_t>(a.max_new) : std::nullopt, a.seed);
  fs::create_directories(out);
  save_dataset(aug, split_manifest(out, Split::train));
  for (Split s : {Split::val, Split::test_iid, Split::test_ood})
    if (fs::exists(split_manifest(in, s))) save_dataset(detail::load_split(in, s), split_manifest(out, s));
  if (fs::exists(in / "benchmark.json")) fs::copy_file(in / "benchmark.json", out / "benchmark.json",
                                                       fs::copy_options::overwrite_existing);
  logger()->info("augment: {} -> {} train samples", train_set.size(), aug.size());
  return kExitOk;
}

struct TrainArgs {
  std::string data, out, config;
  std::vector<std::string> sets;
  std::optional<std::uint64_t> seed;
};

inline RunConfig resolve_run(const std::string& config, std::vector<std::string> sets,
                             std::optional<std::uint64_t> seed) {
  if (seed) sets.push_back("seed=" + std::to_string(*seed));
  return resolve_config<RunConfig>(detail::opt_path(config), sets);
}

inline int cmd_train(const TrainArgs& a) {
  RunConfig rc = resolve_run(a.config, a.sets, a.seed);
  if (!a.data.empty()) rc.data_dir = a.data;
  if (!a.out.empty()) rc.out_dir = a.out;
  if (rc.data_dir.empty() || rc.out_dir.empty()) throw UsageError("train needs --data and --out (or data_dir/out_dir)");
  const fs::path dir(rc.data_dir), out(rc.out_dir);
  const Dataset train_set = detail::load_split(dir, Split::train, rc.train.model.n_v_max);
  if (train_set.empty()) throw ConfigError("the train split is empty; training (and dd) require a train split");
  const Dataset val = fs::exists(split_manifest(dir, Split::val))
                          ? detail::load_split(dir, Split::val, rc.train.model.n_v_max)
                          : Dataset{Split::val, {}, 0};
  detail::check_data_matches(rc.train.model, train_set);
  detail::check_data_matches(rc.train.model, val);

  const TrainResult res = detail::train_logged(rc.train, train_set, val);
  fs::create_directories(out);
  save_checkpoint(out / "model.tdbg", detail::make_checkpoint(rc, res));
  detail::write_history(out / "history.jsonl", res.history);
  detail::write_text(out / "config.json", nlohmann::json(rc).dump(2) + "\n");
  logger()->info("train: {} epochs, best epoch {} (val mIoU {:.2f})", res.history.size(), res.best_epoch,
                 res.best_val_miou);
  return kExitOk;
}

struct EvalArgs {
  std::string checkpoint, data, out, csv, branch = "vq";
};

inline InferenceBranch branch_from_string(const std::string& s) {
  if (s == "vq") return InferenceBranch::vq;
  if (s == "v" || s == "v_only") return InferenceBranch::v;
  if (s == "q" || s == "q_only") return InferenceBranch::q;
  throw UsageError("unknown branch '" + s + "' (expected vq, v_only or q_only)");
}

inline int cmd_eval(const EvalArgs& a) {
  const Checkpoint ck = load_checkpoint(a.checkpoint);
  const RunConfig rc = ck.config.get<RunConfig>();
  const ModelConfig& mc = rc.train.model;
  const detail::Benchmarks b = detail::load_all(a.data, mc.n_v_max);
  for (const Dataset* ds : {&b.val, &b.test_iid, &b.test_ood}) detail::check_data_matches(mc, *ds);
  const SplitReports rep = evaluate_splits(ck.params, mc, b.val, b.test_iid, b.test_ood, branch_from_string(a.branch));
  detail::write_text(a.out, to_json(rep).dump(2) + "\n");
  if (!a.csv.empty()) {
    std::ostringstream os;
    write_report_csv_header(os);
    for (const MetricReport* r : {&rep.val, &rep.test_iid, &rep.test_ood, &rep.test_all}) write_report_csv_row(os, *r);
    detail::write_text(a.csv, os.str());
  }
  logger()->info("eval: iid mIoU {:.2f}, ood mIoU {:.2f}", rep.test_iid.miou, rep.test_ood.miou);
  return kExitOk;
}

struct ReportArgs {
  std::vector<std::string> inputs;
  std::vector<std::string> labels;
  std::string out;
  bool matrix = false;
  std::string data, config;
  std::vector<std::string> sets;
  std::size_t seeds = 5;
  std::uint64_t seed = 0;
};

inline int cmd_report_table(const ReportArgs& a) {
  if (a.inputs.empty()) throw UsageError("report needs eval JSON inputs (or --matrix)");
  std::vector<std::string> labels = a.labels;
  if (labels.empty()) {
    if (a.inputs.size() != kVariants.size())
      throw UsageError("report without --labels expects four inputs in the order vq, +DD, +MD, +DD+MD");
    for (Variant v : kVariants) labels.emplace_back(to_string(v));
  }
  if (labels.size() != a.inputs.size()) throw UsageError("--labels must name every input");
  std::vector<TableRow> rows;
  for (std::size_t k = 0; k < a.inputs.size(); ++k) {
    const SplitReports r = split_reports_from_json(detail::read_json(a.inputs[k]));
    rows.push_back({labels[k], r.test_iid, r.test_ood, r.test_all});
  }
  std::ostringstream os;
  write_table_csv(os, rows);
  detail::write_text(a.out, os.str());
  return kExitOk;
}

/// Trains every variant for `seeds` consecutive seeds on one benchmark and
/// writes each run's evaluation plus a mean/sd table.
inline int cmd_report_matrix(const ReportArgs& a) {
  if (a.data.empty()) throw UsageError("report --matrix needs --data");
  if (a.seeds == 0) throw UsageError("--seeds must be >= 1");
  const RunConfig base = resolve_run(a.config, a.sets, std::nullopt);
  const detail::Benchmarks b = detail::load_all(a.data, base.train.model.n_v_max);
  detail::check_data_matches(base.train.model, b.train);
  const fs::path out(a.out);
  std::vector<MatrixRow> rows;
  for (Variant v : kVariants) rows.push_back({std::string(to_string(v)), {}});
  for (std::size_t k = 0; k < a.seeds; ++k) {
    for (std::size_t vi = 0; vi < kVariants.size(); ++vi) {
      RunConfig rc = base;
      rc.train = variant_config(base.train, kVariants[vi]);
      rc.train.seed = a.seed + k;
      rc.data_dir = a.data;
      const TrainResult res = detail::train_logged(rc.train, b.train, b.val);
      const SplitReports rep = evaluate_splits(res.params, rc.train.model, b.val, b.test_iid, b.test_ood);
      const std::string tag = std::string(to_string(kVariants[vi])) + "_seed" + std::to_string(rc.train.seed);
      detail::write_text(out / "runs" / (tag + ".json"), to_json(rep).dump(2) + "\n");
      rows[vi].runs.push_back(table_cells({rows[vi].label, rep.test_iid, rep.test_ood, rep.test_all}));
      logger()->info("{}: iid mIoU {:.2f}, ood mIoU {:.2f}", tag, rep.test_iid.miou, rep.test_ood.miou);
    }
  }
  std::ostringstream os;
  write_matrix_csv(os, rows);
  detail::write_text(out / "table.csv", os.str());
  return kExitOk;
}

// ---------------------------------------------------------------------------

/// Parses and dispatches one command line.
inline int run(int argc, const char* const* argv) {
  CLI::App app{"Temporal sentence grounding debiasing toolkit"};
  app.require_subcommand(1);

  SynthArgs synth;
  auto* s = app.add_subcommand("synth", "generate a synthetic benchmark");
  s->add_option("--out", synth.out, "output directory")->required();
  s->add_option("--config", synth.config, "SynthSpec JSON file");
  s->add_option("--set", synth.sets, "override key=value (dotted keys)");
  s->add_option("--seed", synth.seed, "generator seed");

  AuditArgs audit;
  auto* au = app.add_subcommand("audit", "density grid and bias statistics of one split");
  au->add_option("--data", audit.data, "benchmark directory")->required();
  au->add_option("--out", audit.out, "output directory")->required();
  au->add_option("--split", audit.split, "train, val, test_iid, test_ood or test_all");
  au->add_option("--bins", audit.bins, "grid resolution")->check(CLI::PositiveNumber);
  au->add_option("--region", audit.region, "bias region s_lo s_hi e_lo e_hi (default: the generator's)");

  AugmentArgs aug;
  auto* ag = app.add_subcommand("augment", "write the debiased train split");
  ag->add_option("--data", aug.data, "benchmark directory")->required();
  ag->add_option("--out", aug.out, "output directory")->required();
  ag->add_option("--split", aug.split, "split to augment (train only)");
  ag->add_option("--n-clip", aug.n_clip, "clips per video")->check(CLI::PositiveNumber);
  ag->add_option("--max-new", aug.max_new, "cap on variants per sample (0 keeps all)");
  ag->add_option("--seed", aug.seed, "subset selection seed");

  TrainArgs tr;
  auto* t = app.add_subcommand("train", "train a model and write a checkpoint");
  t->add_option("--data", tr.data, "benchmark directory");
  t->add_option("--out", tr.out, "output directory");
  t->add_option("--config", tr.config, "run configuration JSON");
  t->add_option("--set", tr.sets, "override key=value (dotted keys)");
  t->add_option("--seed", tr.seed, "training seed");

  EvalArgs ev;
  auto* e = app.add_subcommand("eval", "score a checkpoint on val and test splits");
  e->add_option("--checkpoint", ev.checkpoint, "checkpoint file")->required();
  e->add_option("--data", ev.data, "benchmark directory")->required();
  e->add_option("--out", ev.out, "output JSON path")->required();
  e->add_option("--csv", ev.csv, "optional CSV path");
  e->add_option("--branch", ev.branch, "decoder to evaluate: vq, v_only or q_only");

  ReportArgs rp;
  auto* r = app.add_subcommand("report", "assemble the vq/+DD/+MD/+DD+MD comparison");
  r->add_option("inputs", rp.inputs, "eval JSON files");
  r->add_option("--labels", rp.labels, "row labels, one per input");
  r->add_option("--out", rp.out, "output CSV (table mode) or directory (matrix mode)")->required();
  r->add_flag("--matrix", rp.matrix, "train all four variants over several seeds");
  r->add_option("--data", rp.data, "benchmark directory (matrix mode)");
  r->add_option("--config", rp.config, "run configuration JSON (matrix mode)");
  r->add_option("--set", rp.sets, "override key=value (matrix mode)");
  r->add_option("--seeds", rp.seeds, "number of seeds (matrix mode)");
  r->add_option("--seed", rp.seed, "first seed (matrix mode)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& err) {
    const int code = app.exit(err);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (*s) return cmd_synth(synth);
    if (*au) return cmd_audit(audit);
    if (*ag) return cmd_augment(aug);
    if (*t) return cmd_train(tr);
    if (*e) return cmd_eval(ev);
    if (*r) return rp.matrix ? cmd_report_matrix(rp) : cmd_report_table(rp);
  } catch (const UsageError& err) {
    logger()->error("{}", err.what());
    return kExitUsage;
  } catch (const Error& err) {
    logger()->error("{}", err.what());
    return kExitInvariant;
  } catch (const nlohmann::json::exception& err) {
    logger()->error("malformed input: {}", err.what());
    return kExitInvariant;
  }
  return kExitUsage;
}

}  // namespace tsgdb::cli
