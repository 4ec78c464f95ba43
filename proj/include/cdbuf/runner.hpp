#pragma once

#include <algorithm>
#include <chrono>
#include <future>
#include <map>
#include <string>
#include <vector>

#include "cdbuf/config.hpp"
#include "cdbuf/data.hpp"
#include "cdbuf/engine.hpp"
#include "cdbuf/net.hpp"
#include "cdbuf/report.hpp"

namespace cdbuf {

// Named method presets: the five sweep columns. "parallel" runs both buffers
// without the inverse-mask coupling; "full" is the complete framework.
enum class Method { kDirect, kAdditiveOnly, kSubtractiveOnly, kParallel, kFull };

inline const char* method_name(Method m) {
  switch (m) {
    case Method::kDirect: return "direct";
    case Method::kAdditiveOnly: return "additive_only";
    case Method::kSubtractiveOnly: return "subtractive_only";
    case Method::kParallel: return "parallel";
    case Method::kFull: return "full";
  }
  return "?";
}

inline ExperimentConfig apply_method(ExperimentConfig c, Method m) {
  switch (m) {
    case Method::kDirect:
      c.steps = 0;
      c.mask_loss_on = c.subtractive_on = c.additive_on = false;
      c.grad_scaling_on = c.modulation_on = false;
      break;
    case Method::kAdditiveOnly:
      c.mask_loss_on = false;
      c.subtractive_on = false;
      c.additive_on = true;
      c.grad_scaling_on = false;
      c.modulation_on = false;
      break;
    case Method::kSubtractiveOnly:
      c.mask_loss_on = true;
      c.subtractive_on = true;
      c.additive_on = false;
      c.grad_scaling_on = false;
      c.modulation_on = false;
      break;
    case Method::kParallel:
      c.mask_loss_on = true;
      c.subtractive_on = true;
      c.additive_on = true;
      c.grad_scaling_on = false;
      c.modulation_on = false;
      break;
    case Method::kFull:
      c.mask_loss_on = true;
      c.subtractive_on = true;
      c.additive_on = true;
      c.grad_scaling_on = true;
      c.modulation_on = true;
      break;
  }
  return c;
}

struct SourceBundle {
  ToyNet net;
  SourceStats stats;
  ToyDataset train;
  ToyDataset holdout;  // clean evaluation split
};

// Trains the source model on clean data and precomputes the statistics the
// adaptation consumes. Deterministic under config.seed.
inline SourceBundle run_train_source(const ExperimentConfig& cfg) {
  SourceBundle sb;
  sb.train = gen_dataset(cfg.train_images, mix_seed(cfg.seed, 0x7121), cfg.gen_params());
  sb.holdout = gen_dataset(cfg.eval_images, mix_seed(cfg.seed, 0xe7a1), cfg.gen_params());
  sb.net = make_toynet(cfg.net_config(), mix_seed(cfg.seed, 0x9e70));
  train_source(sb.net, sb.train, cfg.epochs, cfg.source_lr, cfg.source_batch,
               mix_seed(cfg.seed, 0x50a0));
  sb.stats = precompute_stats(sb.net, sb.train);
  return sb;
}

// Clean target stream: freshly generated images corrupted at the configured
// severity, each seen once, in batches of cfg.batch.
inline std::vector<StreamItem> build_target_stream(const ExperimentConfig& cfg, int steps,
                                                   double severity, int segment,
                                                   std::uint64_t salt) {
  std::vector<StreamItem> stream;
  if (steps <= 0) return stream;
  const int n = steps * cfg.batch;
  ToyDataset clean = gen_dataset(n, mix_seed(cfg.seed, 0x57e0 + salt), cfg.gen_params());
  CorruptionSpec spec{corruption_from_name(cfg.corruption), severity,
                      mix_seed(cfg.seed, 0xc0de + salt)};
  ToyDataset target = corrupt_dataset(clean, spec);
  for (int s = 0; s < steps; ++s) {
    std::vector<std::size_t> idx(static_cast<std::size_t>(cfg.batch));
    for (int i = 0; i < cfg.batch; ++i)
      idx[static_cast<std::size_t>(i)] = static_cast<std::size_t>(s * cfg.batch + i);
    stream.push_back({make_batch(target, idx), segment});
  }
  return stream;
}

// Corrupted evaluation set for one severity (shares nothing with the stream).
inline ToyDataset build_target_eval(const ExperimentConfig& cfg, double severity) {
  ToyDataset clean = gen_dataset(cfg.eval_images, mix_seed(cfg.seed, 0xe7a1), cfg.gen_params());
  CorruptionSpec spec{corruption_from_name(cfg.corruption), severity,
                      mix_seed(cfg.seed, 0xeba1)};
  return corrupt_dataset(clean, spec);
}

// Adapts a fresh state from the source model over the configured stream and
// reports per-step losses plus interleaved accuracy. Supports the continual
// protocol via severity_schedule (state carries across segments). The final
// adapted state is handed out through out_state when requested.
inline RunReport run_adapt(const ExperimentConfig& cfg, const ToyNet& source,
                           const SourceStats& stats, bool with_timing = false,
                           AdaptState* out_state = nullptr) {
  const auto t0 = std::chrono::steady_clock::now();
  RunReport rep;
  rep.config = cfg;

  std::vector<double> severities =
      cfg.severity_schedule.empty() ? std::vector<double>{cfg.severity} : cfg.severity_schedule;

  // direct test on the primary severity
  {
    ToyNet probe = clone_net(source);
    ToyDataset eval_target = build_target_eval(cfg, severities.back());
    rep.direct_accuracy = classify_accuracy(probe, eval_target);
  }

  AdaptState st = make_adapt_state(source, cfg.hyper(), cfg.switches(),
                                   cfg.stage_enable_chars(), cfg.seed);
  if (cfg.steps > 0) {
    for (std::size_t seg = 0; seg < severities.size(); ++seg) {
      auto stream = build_target_stream(cfg, cfg.steps, severities[seg], static_cast<int>(seg),
                                        0x11 * (seg + 1));
      ToyDataset eval_target = build_target_eval(cfg, severities[seg]);
      auto reports = adapt_stream(st, stream, &eval_target, cfg.eval_every, stats);
      for (auto& r : reports) rep.steps.push_back(std::move(r));
    }
  }
  finalize_summary(rep);
  if (rep.final_accuracy < 0.0) rep.final_accuracy = rep.direct_accuracy;
  // per-layer suppressed histogram at the end state
  {
    StepContext ctx;
    prepare_masks(st, ctx);
    rep.suppressed_last.clear();
    for (const auto& m : ctx.m_hard) {
      int z = 0;
      for (double v : m)
        if (v == 0.0) ++z;
      rep.suppressed_last.push_back(z);
    }
  }
  if (with_timing) {
    rep.wall_clock_sec =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  }
  if (out_state) *out_state = std::move(st);
  return rep;
}

// ---------------------------------------------------------------------------
// Ablation table
// ---------------------------------------------------------------------------

struct AblateRow {
  std::string name;
  ExperimentConfig config;
  double accuracy = 0.0;
  double direct = 0.0;
};

// The seven switch combinations of the component ablation plus the
// single-paradigm/parallel modes that differ from them. The subtractive-only
// mode coincides with the "sub" row (identical switch set), so it appears
// once; every emitted row has a distinct configuration.
inline std::vector<std::pair<std::string, ExperimentConfig>> ablate_grid(
    const ExperimentConfig& base) {
  auto with = [&](bool l, bool s, bool a, bool g) {
    ExperimentConfig c = base;
    c.mask_loss_on = l;
    c.subtractive_on = s;
    c.additive_on = a;
    c.grad_scaling_on = g;
    c.modulation_on = a;  // coupling exists only with the additive buffer on
    return c;
  };
  std::vector<std::pair<std::string, ExperimentConfig>> rows;
  rows.emplace_back("bn_only", with(false, false, false, false));
  rows.emplace_back("sub_no_maskloss", with(false, true, false, false));
  rows.emplace_back("sub", with(true, true, false, false));  // == subtractive_only mode
  rows.emplace_back("add", with(true, false, true, false));
  rows.emplace_back("sub_add", with(true, true, true, false));
  rows.emplace_back("sub_add_gs_no_maskloss", with(false, true, true, true));
  rows.emplace_back("full", with(true, true, true, true));
  rows.emplace_back("additive_only", apply_method(base, Method::kAdditiveOnly));
  rows.emplace_back("parallel", apply_method(base, Method::kParallel));
  return rows;
}

inline std::vector<AblateRow> run_ablate(const ExperimentConfig& base, const ToyNet& source,
                                         const SourceStats& stats) {
  std::vector<AblateRow> out;
  for (auto& [name, cfg] : ablate_grid(base)) {
    RunReport rep = run_adapt(cfg, source, stats);
    AblateRow row;
    row.name = name;
    row.config = cfg;
    row.accuracy = rep.final_accuracy;
    row.direct = rep.direct_accuracy;
    out.push_back(std::move(row));
  }
  return out;
}

inline std::string ablate_csv(const std::vector<AblateRow>& rows) {
  std::string out =
      "row,mask_loss,subtractive,additive,grad_scaling,modulation,config_hash,direct,accuracy\n";
  for (const auto& r : rows) {
    out += r.name;
    out += std::string(",") + (r.config.mask_loss_on ? "1" : "0");
    out += std::string(",") + (r.config.subtractive_on ? "1" : "0");
    out += std::string(",") + (r.config.additive_on ? "1" : "0");
    out += std::string(",") + (r.config.grad_scaling_on ? "1" : "0");
    out += std::string(",") + (r.config.modulation_on ? "1" : "0");
    out += "," + std::to_string(config_hash(r.config));
    out += "," + fmt_double(r.direct);
    out += "," + fmt_double(r.accuracy);
    out += "\n";
  }
  return out;
}

// ---------------------------------------------------------------------------
// Severity sweep
// ---------------------------------------------------------------------------

struct SweepCell {
  std::string kind;
  double severity = 0.0;
  Method method = Method::kDirect;
  std::vector<double> accuracies;  // one per seed
  double mean = 0.0;
};

struct SweepRequest {
  std::vector<std::string> kinds;
  std::vector<double> severities;
  std::vector<Method> methods = {Method::kDirect, Method::kAdditiveOnly,
                                 Method::kSubtractiveOnly, Method::kParallel, Method::kFull};
  int seeds = 1;
  int jobs = 1;
};

// Source models for a sweep, one per seed index. Training does not depend on
// the corruption cell, so every cell reuses these read-only bundles (each
// run clones the net before touching it).
inline std::vector<SourceBundle> sweep_sources(const ExperimentConfig& base, int seeds) {
  std::vector<SourceBundle> out;
  out.reserve(static_cast<std::size_t>(seeds));
  for (int s = 0; s < seeds; ++s) {
    ExperimentConfig cfg = base;
    cfg.seed = mix_seed(base.seed, static_cast<std::uint64_t>(s) + 1);
    out.push_back(run_train_source(cfg));
  }
  return out;
}

// One sweep cell: per seed, adapt a fresh state with the method and
// evaluate. Cells are isolated and deterministic given the shared sources.
inline SweepCell run_sweep_cell(const ExperimentConfig& base,
                                const std::vector<SourceBundle>& sources,
                                const std::string& kind, double severity, Method method) {
  SweepCell cell;
  cell.kind = kind;
  cell.severity = severity;
  cell.method = method;
  for (std::size_t s = 0; s < sources.size(); ++s) {
    ExperimentConfig cfg = apply_method(base, method);
    cfg.corruption = kind;
    cfg.severity = severity;
    cfg.seed = mix_seed(base.seed, static_cast<std::uint64_t>(s) + 1);
    RunReport rep = run_adapt(cfg, sources[s].net, sources[s].stats);
    cell.accuracies.push_back(method == Method::kDirect ? rep.direct_accuracy
                                                        : rep.final_accuracy);
  }
  for (double a : cell.accuracies) cell.mean += a;
  cell.mean /= static_cast<double>(cell.accuracies.size());
  return cell;
}

inline std::vector<SweepCell> run_sweep(const ExperimentConfig& base, const SweepRequest& req) {
  struct Key {
    std::string kind;
    double severity;
    Method method;
  };
  std::vector<Key> keys;
  for (const auto& kind : req.kinds)
    for (double sev : req.severities)
      for (Method m : req.methods) keys.push_back({kind, sev, m});

  const std::vector<SourceBundle> sources = sweep_sources(base, req.seeds);
  std::vector<SweepCell> cells(keys.size());
  if (req.jobs <= 1) {
    for (std::size_t i = 0; i < keys.size(); ++i)
      cells[i] = run_sweep_cell(base, sources, keys[i].kind, keys[i].severity, keys[i].method);
  } else {
    // cells are independent; results land at fixed indices so the output
    // order never depends on scheduling
    std::vector<std::future<SweepCell>> futs;
    futs.reserve(keys.size());
    std::size_t next = 0;
    while (next < keys.size()) {
      const std::size_t batch_end =
          std::min(keys.size(), next + static_cast<std::size_t>(req.jobs));
      for (std::size_t i = next; i < batch_end; ++i) {
        futs.push_back(std::async(std::launch::async, [&, i] {
          return run_sweep_cell(base, sources, keys[i].kind, keys[i].severity, keys[i].method);
        }));
      }
      for (std::size_t i = next; i < batch_end; ++i) cells[i] = futs[i].get();
      next = batch_end;
    }
  }
  return cells;
}

inline std::string sweep_csv(const std::vector<SweepCell>& cells, int seeds) {
  std::string out = "kind,severity,method";
  for (int s = 0; s < seeds; ++s) out += ",acc_seed" + std::to_string(s);
  out += ",acc_mean\n";
  for (const auto& c : cells) {
    out += c.kind;
    out += "," + fmt_double(c.severity);
    out += std::string(",") + method_name(c.method);
    for (double a : c.accuracies) out += "," + fmt_double(a);
    out += "," + fmt_double(c.mean);
    out += "\n";
  }
  return out;
}

}  // namespace cdbuf
