#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "evolve/cohort.hpp"

namespace evolve {

// Code occurrence counts over the same events the sequence model sees, plus raw age.
struct CountFeature {
  std::vector<double> counts;  // vocab-sized
  double age = 0.0;            // years at forecast start
};

CountFeature featurize(const PersonRecord& p, std::size_t vocab_size, double forecast_start, double buffer_years,
                       std::size_t max_events);
std::vector<CountFeature> featurize_all(const std::vector<PersonRecord>& persons, const CohortConfig& cohort,
                                        std::size_t max_events);

struct AgeScaler {
  double mean = 0.0;
  double std = 1.0;
  static AgeScaler fit(const std::vector<CountFeature>& train);
  double apply(double age) const { return (age - mean) / std; }
};

struct LogRegConfig {
  double inverse_penalty = 0.1;  // C: objective is ||w||_1 + C * sum of losses
  double tolerance = 1e-5;       // on the proximal gradient mapping, max norm
  std::size_t max_iterations = 5000;
  void validate() const;
};

struct BinaryLogReg {
  std::vector<double> weights;  // vocab counts then standardized age
  double bias = 0.0;
  bool skipped = false;         // no positives or no negatives: constant prevalence
  double prevalence = 0.0;
  bool converged = true;
  std::size_t iterations = 0;
  double objective = 0.0;
};

class LogRegOvR {
 public:
  // labels are row-major [n x classes] 0/1. Non-converged or skipped classes are
  // reported through `warnings`.
  void fit(const std::vector<CountFeature>& train, const std::vector<std::uint8_t>& labels, std::size_t n_classes,
           const LogRegConfig& cfg, std::vector<std::string>* warnings = nullptr);

  // Row-major [n x classes] independent sigmoid scores. Throws ContractError before fit.
  std::vector<double> predict_proba(const std::vector<CountFeature>& x) const;

  bool fitted() const { return !models_.empty(); }
  std::size_t n_classes() const { return models_.size(); }
  std::size_t n_features() const { return vocab_ + 1; }
  const BinaryLogReg& model(std::size_t c) const { return models_.at(c); }
  const AgeScaler& scaler() const { return scaler_; }
  std::vector<std::size_t> skipped_classes() const;

  // Builds a fitted model from explicit parameters (weights include the age entry).
  static LogRegOvR from_parameters(std::size_t vocab, AgeScaler scaler, std::vector<BinaryLogReg> models);

  std::string to_json() const;
  static LogRegOvR from_json(const std::string& text);

 private:
  std::size_t vocab_ = 0;
  AgeScaler scaler_;
  std::vector<BinaryLogReg> models_;
};

}  // namespace evolve
