// Command-line driver: train-source, precompute-stats, adapt, ablate, sweep.
// Every command is a pure function of its flags, input files, and seeds;
// outputs are byte-reproducible (timing is opt-in via --timing).

#include <cstdio>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "cdbuf/config.hpp"
#include "cdbuf/engine.hpp"
#include "cdbuf/report.hpp"
#include "cdbuf/runner.hpp"

namespace {

using namespace cdbuf;

void add_config_flags(CLI::App* cmd, ExperimentConfig* cfg) {
  cmd->add_option("--lambda-reg", cfg->lambda_reg, "mask-loss weight");
  cmd->add_option("--lambda-s", cfg->lambda_s, "suppression temperature");
  cmd->add_option("--lambda-a", cfg->lambda_a, "compensation temperature");
  cmd->add_option("--rho-target", cfg->rho_target, "channel suppression ratio");
  cmd->add_option("--k-scale", cfg->k_scale, "additive modulation range");
  cmd->add_option("--react-p", cfg->react_p, "stochastic reactivation probability");
  cmd->add_option("--lr", cfg->lr, "adaptation learning rate");
  cmd->add_option("--batch", cfg->batch, "adaptation batch size");
  cmd->add_flag("--mask-loss,!--no-mask-loss", cfg->mask_loss_on, "discrepancy-weighted mask loss");
  cmd->add_flag("--subtractive,!--no-subtractive", cfg->subtractive_on, "subtractive buffer");
  cmd->add_flag("--additive,!--no-additive", cfg->additive_on, "additive buffer");
  cmd->add_flag("--grad-scaling,!--no-grad-scaling", cfg->grad_scaling_on,
                "layer-discrepancy gradient scaling");
  cmd->add_flag("--modulation,!--no-modulation", cfg->modulation_on,
                "inverse-mask coupling of the additive buffer");
  cmd->add_option("--stage-enable", cfg->stage_enable, "per-stage enable flags (1/0)");
  cmd->add_option("--image-hw", cfg->image_hw, "image side length");
  cmd->add_option("--classes", cfg->classes, "class count");
  cmd->add_option("--stage-widths", cfg->stage_widths, "channel widths per stage");
  cmd->add_option("--blocks-per-stage", cfg->blocks_per_stage, "residual blocks per stage");
  cmd->add_option("--train-images", cfg->train_images, "source training set size");
  cmd->add_option("--eval-images", cfg->eval_images, "evaluation set size");
  cmd->add_option("--epochs", cfg->epochs, "source training epochs");
  cmd->add_option("--source-lr", cfg->source_lr, "source training learning rate");
  cmd->add_option("--source-batch", cfg->source_batch, "source training batch size");
  cmd->add_option("--corruption", cfg->corruption,
                  "corruption kind: gaussian_noise|brightness_shift|box_blur|haze_mix");
  cmd->add_option("--severity", cfg->severity, "corruption severity in [0,1]");
  cmd->add_option("--severity-schedule", cfg->severity_schedule,
                  "continual mode: severity per segment");
  cmd->add_option("--metric", cfg->metric, "discrepancy metric: l1|l2|cosine");
  cmd->add_option("--seed", cfg->seed, "master seed")->envname("CDBUF_SEED");
  cmd->add_option("--steps", cfg->steps, "adaptation steps (per segment in continual mode)");
  cmd->add_option("--eval-every", cfg->eval_every, "evaluation cadence in steps");
}

int cmd_train_source(const ExperimentConfig& cfg, const std::string& out_model,
                     const std::string& out_stats) {
  SourceBundle sb = run_train_source(cfg);
  Checkpoint ck;
  ck.net = sb.net;
  ck.has_adapt_state = false;
  ck.hyper = cfg.hyper();
  save_checkpoint(out_model, ck);
  save_stats(out_stats, sb.stats);
  const double acc = classify_accuracy(sb.net, sb.holdout);
  std::cerr << "source model: clean holdout accuracy " << acc << "\n";
  return 0;
}

int cmd_precompute_stats(const ExperimentConfig& cfg, const std::string& model,
                         const std::string& out_stats) {
  Checkpoint ck = load_checkpoint(model);
  ToyDataset train = gen_dataset(cfg.train_images, mix_seed(cfg.seed, 0x7121), cfg.gen_params());
  SourceStats stats = precompute_stats(ck.net, train);
  save_stats(out_stats, stats);
  return 0;
}

int cmd_adapt(const ExperimentConfig& cfg, const std::string& model, const std::string& stats_path,
              const std::string& out_report, const std::string& out_csv,
              const std::string& out_ckpt, bool timing) {
  Checkpoint ck = load_checkpoint(model);
  SourceStats stats = load_stats(stats_path);
  AdaptState st;
  RunReport rep = run_adapt(cfg, ck.net, stats, timing, &st);
  if (!out_report.empty()) write_text(out_report, report_json(rep).dump(2) + "\n");
  if (!out_csv.empty())
    write_text(out_csv, steps_csv(rep.steps, !cfg.severity_schedule.empty()));
  if (!out_ckpt.empty()) save_checkpoint(out_ckpt, to_checkpoint(st));
  std::cerr << "direct " << rep.direct_accuracy << " -> adapted " << rep.final_accuracy << "\n";
  return 0;
}

int cmd_ablate(const ExperimentConfig& cfg, const std::string& model,
               const std::string& stats_path, const std::string& out_csv) {
  Checkpoint ck = load_checkpoint(model);
  SourceStats stats = load_stats(stats_path);
  auto rows = run_ablate(cfg, ck.net, stats);
  write_text(out_csv, ablate_csv(rows));
  return 0;
}

int cmd_sweep(const ExperimentConfig& cfg, const SweepRequest& req, const std::string& out_csv) {
  auto cells = run_sweep(cfg, req);
  write_text(out_csv, sweep_csv(cells, req.seeds));
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"CD-Buffer test-time adaptation workbench"};
  app.require_subcommand(1);

  ExperimentConfig cfg;
  std::string model = "model.cdckpt";
  std::string stats = "source.cdstats";
  std::string out_model = "model.cdckpt";
  std::string out_stats = "source.cdstats";
  std::string out_report = "report.json";
  std::string out_csv = "steps.csv";
  std::string out_ckpt;
  std::string ablate_out = "ablate.csv";
  std::string sweep_out = "sweep.csv";
  bool timing = false;
  SweepRequest req;
  std::vector<std::string> method_names = {"direct", "additive_only", "subtractive_only",
                                           "parallel", "full"};
  req.kinds = {"haze_mix"};
  req.severities = {0.3, 0.5, 0.8};

  auto* ts = app.add_subcommand("train-source", "train the source model and precompute stats");
  add_config_flags(ts, &cfg);
  ts->add_option("--out-model", out_model, "output checkpoint path");
  ts->add_option("--out-stats", out_stats, "output statistics path");

  auto* ps = app.add_subcommand("precompute-stats", "recompute source statistics for a model");
  add_config_flags(ps, &cfg);
  ps->add_option("--model", model, "input checkpoint")->required();
  ps->add_option("--out-stats", out_stats, "output statistics path");

  auto* ad = app.add_subcommand("adapt", "run test-time adaptation on a corrupted stream");
  add_config_flags(ad, &cfg);
  ad->add_option("--model", model, "source checkpoint")->required();
  ad->add_option("--stats", stats, "source statistics")->required();
  ad->add_option("--out-report", out_report, "JSON run report");
  ad->add_option("--out-csv", out_csv, "per-step CSV");
  ad->add_option("--out-ckpt", out_ckpt, "write the adapted state as a checkpoint");
  ad->add_flag("--timing", timing, "include wall-clock in the report (non-reproducible)");

  auto* ab = app.add_subcommand("ablate", "component on/off table at one severity");
  add_config_flags(ab, &cfg);
  ab->add_option("--model", model, "source checkpoint")->required();
  ab->add_option("--stats", stats, "source statistics")->required();
  ab->add_option("--out", ablate_out, "output CSV");

  auto* sw = app.add_subcommand("sweep", "severity x method grid, trains per seed");
  add_config_flags(sw, &cfg);
  sw->add_option("--kinds", req.kinds, "corruption kinds");
  sw->add_option("--severities", req.severities, "severity levels");
  sw->add_option("--methods", method_names, "methods to run");
  sw->add_option("--seeds", req.seeds, "independent seeds per cell");
  sw->add_option("--jobs", req.jobs, "parallel cells");
  sw->add_option("--out", sweep_out, "output CSV");

  // repeated flags override (last one wins), so presets compose with tweaks
  for (auto* cmd : {ts, ps, ad, ab, sw})
    for (auto* opt : cmd->get_options())
      opt->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;  // bad flags are config errors
  }

  try {
    if (ts->parsed()) return cmd_train_source(cfg, out_model, out_stats);
    if (ps->parsed()) return cmd_precompute_stats(cfg, model, out_stats);
    if (ad->parsed()) return cmd_adapt(cfg, model, stats, out_report, out_csv, out_ckpt, timing);
    if (ab->parsed()) return cmd_ablate(cfg, model, stats, ablate_out);
    if (sw->parsed()) {
      req.methods.clear();
      for (const auto& name : method_names) {
        if (name == "direct") req.methods.push_back(Method::kDirect);
        else if (name == "additive_only") req.methods.push_back(Method::kAdditiveOnly);
        else if (name == "subtractive_only") req.methods.push_back(Method::kSubtractiveOnly);
        else if (name == "parallel") req.methods.push_back(Method::kParallel);
        else if (name == "full") req.methods.push_back(Method::kFull);
        else throw cdbuf::ConfigError("unknown method '" + name + "'");
      }
      return cmd_sweep(cfg, req, sweep_out);
    }
  } catch (const cdbuf::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const cdbuf::NumericError& e) {
    std::cerr << "numerical failure: " << e.what() << "\n";
    return 3;
  } catch (const cdbuf::IoError& e) {
    std::cerr << "i/o error: " << e.what() << "\n";
    return 4;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
