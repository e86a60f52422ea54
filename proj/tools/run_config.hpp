#pragma once

#include <cstdint>
#include <string>

#include <json.hpp>

#include "evolve/cohort.hpp"
#include "evolve/logreg.hpp"
#include "evolve/model.hpp"
#include "evolve/training.hpp"

namespace evolve::cli {

struct EvaluateSettings {
  std::size_t bootstrap = 1000;
  std::size_t recall_k = 4;
  bool recall_exclude_none = false;
};

struct AnalysisSettings {
  std::size_t k = 1000;        // neighbourhood size for rate_of_change
  std::size_t class_k = 25;    // representatives per class
};

// Everything a run depends on. Defaults are desk scale, not the paper's 8x384 model.
struct RunConfig {
  std::uint64_t seed = 1;
  CohortConfig cohort;
  ModelConfig model;
  TrainConfig train;
  LogRegConfig logreg;
  EvaluateSettings evaluate;
  AnalysisSettings analysis;

  RunConfig();
};

// Overlays the sections present in `j`; unknown keys and bad types raise ConfigError
// naming the field path (e.g. "train.learning_rate").
void apply_json(RunConfig& cfg, const nlohmann::ordered_json& j);
RunConfig load_run_config(const std::string& path);
nlohmann::ordered_json to_json(const RunConfig& cfg);

}  // namespace evolve::cli
