#pragma once

#include <cstdio>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "cdbuf/config.hpp"
#include "cdbuf/engine.hpp"
#include "cdbuf/errors.hpp"

namespace cdbuf {

// Round-trip double formatting; all CSV numbers go through this so repeated
// runs emit identical bytes.
inline std::string fmt_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

struct RunReport {
  ExperimentConfig config;
  std::vector<StepReport> steps;
  double direct_accuracy = -1.0;  // before any adaptation
  double final_accuracy = -1.0;
  double best_accuracy = -1.0;
  std::vector<double> mean_d_layer;        // per layer, averaged over steps
  std::vector<int> suppressed_last;        // per layer at the final step
  double wall_clock_sec = 0.0;             // 0 unless timing was requested
};

inline void finalize_summary(RunReport& rep) {
  double best = -1.0, final_acc = -1.0;
  for (const auto& s : rep.steps) {
    if (s.accuracy >= 0.0) {
      best = std::max(best, s.accuracy);
      final_acc = s.accuracy;
    }
  }
  rep.final_accuracy = final_acc;
  rep.best_accuracy = best;
  if (!rep.steps.empty()) {
    rep.mean_d_layer.assign(rep.steps[0].d_layer.size(), 0.0);
    for (const auto& s : rep.steps)
      for (std::size_t l = 0; l < s.d_layer.size(); ++l) rep.mean_d_layer[l] += s.d_layer[l];
    for (auto& v : rep.mean_d_layer) v /= static_cast<double>(rep.steps.size());
  }
}

// Step CSV. Base columns are fixed; continual runs append a trailing
// segment column.
inline std::string steps_csv(const std::vector<StepReport>& steps, bool with_segment) {
  std::string out = "step,loss_align,loss_mask,loss_total,suppressed,reactivated,accuracy";
  if (with_segment) out += ",segment";
  out += "\n";
  for (const auto& s : steps) {
    out += std::to_string(s.step);
    out += "," + fmt_double(s.loss_align);
    out += "," + fmt_double(s.loss_mask);
    out += "," + fmt_double(s.loss_total);
    out += "," + std::to_string(s.suppressed);
    out += "," + std::to_string(s.reactivated);
    out += ",";
    if (s.accuracy >= 0.0) out += fmt_double(s.accuracy);
    if (with_segment) out += "," + std::to_string(s.segment);
    out += "\n";
  }
  return out;
}

inline nlohmann::ordered_json report_json(const RunReport& rep) {
  nlohmann::ordered_json j;
  j["schema"] = "cdbuf-report-1";
  j["config"] = to_json(rep.config);
  j["config_hash"] = config_hash(rep.config);
  j["direct_accuracy"] = rep.direct_accuracy;
  j["final_accuracy"] = rep.final_accuracy;
  j["best_accuracy"] = rep.best_accuracy;
  j["mean_d_layer"] = rep.mean_d_layer;
  j["suppressed_last"] = rep.suppressed_last;
  j["wall_clock_sec"] = rep.wall_clock_sec;
  nlohmann::ordered_json steps = nlohmann::ordered_json::array();
  for (const auto& s : rep.steps) {
    nlohmann::ordered_json sj;
    sj["step"] = s.step;
    sj["segment"] = s.segment;
    sj["loss_align"] = s.loss_align;
    sj["loss_mask"] = s.loss_mask;
    sj["loss_total"] = s.loss_total;
    sj["suppressed"] = s.suppressed;
    sj["reactivated"] = s.reactivated;
    sj["d_layer"] = s.d_layer;
    if (s.accuracy >= 0.0) sj["accuracy"] = s.accuracy;
    steps.push_back(std::move(sj));
  }
  j["steps"] = std::move(steps);
  return j;
}

inline void write_text(const std::string& path, const std::string& content) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot open '" + path + "' for writing");
  os.write(content.data(), static_cast<std::streamsize>(content.size()));
  if (!os) throw IoError("short write to '" + path + "'");
}

}  // namespace cdbuf
