#pragma once

#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "evolve/cohort.hpp"
#include "evolve/logreg.hpp"
#include "evolve/metrics.hpp"
#include "evolve/model.hpp"
#include "evolve/trajectory.hpp"

namespace evolve::cli {

// Exit codes
inline constexpr int kExitOk = 0;
inline constexpr int kExitValidation = 2;
inline constexpr int kExitRuntime = 3;

// Entry point shared by the binary and the tests. argv[0] is the program name.
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

std::string sha256_file(const std::filesystem::path& path);

// Files written next to a data set / output.
std::filesystem::path with_suffix(const std::filesystem::path& p, const std::string& suffix);
inline std::filesystem::path manifest_path(const std::filesystem::path& data) { return with_suffix(data, ".manifest.json"); }
inline std::filesystem::path truth_path(const std::filesystem::path& data) { return with_suffix(data, ".truth.json"); }

struct Manifest {
  CohortConfig cohort;
  DatasetSplit split;
  std::uint64_t split_seed = 1;
  std::string sha256;  // of the JSONL file
  std::size_t n_persons = 0;
};

void save_manifest(const std::filesystem::path& path, const Manifest& m);
Manifest load_manifest(const std::filesystem::path& path);

struct Dataset {
  std::filesystem::path path;
  Manifest manifest;
  std::vector<PersonRecord> persons;

  // "train", "valid", "test" or "all"
  std::vector<PersonRecord> part(const std::string& which) const;
};

// Loads the JSONL and its manifest; the checksum must match.
Dataset open_dataset(const std::filesystem::path& data, std::ostream& err);

// A trained model of either family.
struct Predictor {
  std::string name;
  std::optional<EvolveModel<float>> net;
  std::optional<LogRegOvR> logreg;
  std::size_t max_events = 0;  // logreg truncation

  std::string kind() const;
  // Throws ConfigError when the model does not fit the cohort's vocabulary / classes.
  void check_compatible(const CohortConfig& cohort) const;
};

Predictor load_predictor(const std::filesystem::path& path);
void save_logreg(const std::filesystem::path& path, const LogRegOvR& model, std::size_t max_events);

// Scores at the forecast start (last position), with dense labels.
ScoreMatrix score_persons(const Predictor& p, const std::vector<PersonRecord>& persons, const CohortConfig& cohort);

// Group means of rate_of_change at each member's shock age and over its other ages.
struct ShockContrast {
  double at_shock = 0.0;
  double elsewhere = 0.0;
  std::size_t n = 0;  // members with a rate at the shock age and at least one other age
};

ShockContrast shock_contrast(std::span<const AgeEmbeddingMap> group, const std::vector<int>& shock_ages, std::size_t k,
                             std::span<const AgeEmbeddingMap> references);

}  // namespace evolve::cli
