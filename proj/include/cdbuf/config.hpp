#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "cdbuf/data.hpp"
#include "cdbuf/discrepancy.hpp"
#include "cdbuf/engine.hpp"
#include "cdbuf/errors.hpp"
#include "cdbuf/serialize.hpp"

namespace cdbuf {

// Everything one reproducible run needs. Defaults are the published
// operating point: lambda_reg 0.05, lambda_s 0.05, lambda_a 0.1, rho 0.05,
// lr 1e-4, batch 16, k 10, r 0.05.
struct ExperimentConfig {
  // adaptation hyperparameters
  double lambda_reg = 0.05;
  double lambda_s = 0.05;
  double lambda_a = 0.1;
  double rho_target = 0.05;
  double k_scale = 10.0;
  double react_p = 0.05;
  double lr = 1e-4;
  int batch = 16;

  // ablation switches
  bool mask_loss_on = true;
  bool subtractive_on = true;
  bool additive_on = true;
  bool grad_scaling_on = true;
  bool modulation_on = true;
  std::vector<int> stage_enable = {1, 1};  // per stage, 1 = buffers attach

  // network and task
  int image_hw = 16;
  int classes = 4;
  std::vector<int> stage_widths = {8, 16};
  int blocks_per_stage = 2;
  double bn_eps = 1e-5;
  double bn_momentum = 0.1;

  // source training
  int train_images = 512;
  int eval_images = 256;
  int epochs = 30;
  double source_lr = 0.05;
  int source_batch = 32;

  // target domain
  std::string corruption = "haze_mix";
  double severity = 0.7;
  std::vector<double> severity_schedule;  // nonempty = continual segments
  std::string metric = "l1";

  // run shape
  std::uint64_t seed = 1;
  int steps = 300;
  int eval_every = 50;

  Hyper hyper() const {
    Hyper h;
    h.lambda_reg = lambda_reg;
    h.lambda_s = lambda_s;
    h.lambda_a = lambda_a;
    h.rho_target = rho_target;
    h.k_scale = k_scale;
    h.react_p = react_p;
    h.lr = lr;
    h.batch = batch;
    return h;
  }

  Switches switches() const {
    Switches sw;
    sw.mask_loss_on = mask_loss_on;
    sw.subtractive_on = subtractive_on;
    sw.additive_on = additive_on;
    sw.grad_scaling_on = grad_scaling_on;
    sw.modulation_on = modulation_on;
    return sw;
  }

  NetConfig net_config() const {
    NetConfig n;
    n.image_hw = image_hw;
    n.in_channels = 1;
    n.classes = classes;
    n.stage_widths = stage_widths;
    n.blocks_per_stage = blocks_per_stage;
    n.bn_eps = bn_eps;
    n.bn_momentum = bn_momentum;
    return n;
  }

  GenParams gen_params() const {
    GenParams g;
    g.image_hw = image_hw;
    g.classes = classes;
    return g;
  }

  std::vector<char> stage_enable_chars() const {
    std::vector<char> out;
    for (int v : stage_enable) out.push_back(v ? 1 : 0);
    return out;
  }

  CorruptionSpec corruption_spec(std::uint64_t stream_salt = 0) const {
    return {corruption_from_name(corruption), severity, mix_seed(seed, 0xc0 + stream_salt)};
  }
};

inline nlohmann::ordered_json to_json(const ExperimentConfig& c) {
  nlohmann::ordered_json j;
  j["lambda_reg"] = c.lambda_reg;
  j["lambda_s"] = c.lambda_s;
  j["lambda_a"] = c.lambda_a;
  j["rho_target"] = c.rho_target;
  j["k_scale"] = c.k_scale;
  j["react_p"] = c.react_p;
  j["lr"] = c.lr;
  j["batch"] = c.batch;
  j["mask_loss_on"] = c.mask_loss_on;
  j["subtractive_on"] = c.subtractive_on;
  j["additive_on"] = c.additive_on;
  j["grad_scaling_on"] = c.grad_scaling_on;
  j["modulation_on"] = c.modulation_on;
  j["stage_enable"] = c.stage_enable;
  j["image_hw"] = c.image_hw;
  j["classes"] = c.classes;
  j["stage_widths"] = c.stage_widths;
  j["blocks_per_stage"] = c.blocks_per_stage;
  j["bn_eps"] = c.bn_eps;
  j["bn_momentum"] = c.bn_momentum;
  j["train_images"] = c.train_images;
  j["eval_images"] = c.eval_images;
  j["epochs"] = c.epochs;
  j["source_lr"] = c.source_lr;
  j["source_batch"] = c.source_batch;
  j["corruption"] = c.corruption;
  j["severity"] = c.severity;
  j["severity_schedule"] = c.severity_schedule;
  j["metric"] = c.metric;
  j["seed"] = c.seed;
  j["steps"] = c.steps;
  j["eval_every"] = c.eval_every;
  return j;
}

inline ExperimentConfig config_from_json(const nlohmann::ordered_json& j) {
  ExperimentConfig c;
  c.lambda_reg = j.at("lambda_reg").get<double>();
  c.lambda_s = j.at("lambda_s").get<double>();
  c.lambda_a = j.at("lambda_a").get<double>();
  c.rho_target = j.at("rho_target").get<double>();
  c.k_scale = j.at("k_scale").get<double>();
  c.react_p = j.at("react_p").get<double>();
  c.lr = j.at("lr").get<double>();
  c.batch = j.at("batch").get<int>();
  c.mask_loss_on = j.at("mask_loss_on").get<bool>();
  c.subtractive_on = j.at("subtractive_on").get<bool>();
  c.additive_on = j.at("additive_on").get<bool>();
  c.grad_scaling_on = j.at("grad_scaling_on").get<bool>();
  c.modulation_on = j.at("modulation_on").get<bool>();
  c.stage_enable = j.at("stage_enable").get<std::vector<int>>();
  c.image_hw = j.at("image_hw").get<int>();
  c.classes = j.at("classes").get<int>();
  c.stage_widths = j.at("stage_widths").get<std::vector<int>>();
  c.blocks_per_stage = j.at("blocks_per_stage").get<int>();
  c.bn_eps = j.at("bn_eps").get<double>();
  c.bn_momentum = j.at("bn_momentum").get<double>();
  c.train_images = j.at("train_images").get<int>();
  c.eval_images = j.at("eval_images").get<int>();
  c.epochs = j.at("epochs").get<int>();
  c.source_lr = j.at("source_lr").get<double>();
  c.source_batch = j.at("source_batch").get<int>();
  c.corruption = j.at("corruption").get<std::string>();
  c.severity = j.at("severity").get<double>();
  c.severity_schedule = j.at("severity_schedule").get<std::vector<double>>();
  c.metric = j.at("metric").get<std::string>();
  c.seed = j.at("seed").get<std::uint64_t>();
  c.steps = j.at("steps").get<int>();
  c.eval_every = j.at("eval_every").get<int>();
  return c;
}

inline std::uint64_t config_hash(const ExperimentConfig& c) {
  const std::string s = to_json(c).dump();
  return fnv1a(s.data(), s.size());
}

}  // namespace cdbuf
