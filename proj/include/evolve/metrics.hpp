#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace evolve {

enum class Averaging { micro, macro };

// N x C scores with matching 0/1 labels, row-major.
struct ScoreMatrix {
  std::size_t rows = 0;
  std::size_t classes = 0;
  std::vector<double> scores;
  std::vector<std::uint8_t> labels;

  ScoreMatrix() = default;
  ScoreMatrix(std::size_t n, std::size_t c);

  double score(std::size_t i, std::size_t c) const { return scores[i * classes + c]; }
  bool label(std::size_t i, std::size_t c) const { return labels[i * classes + c] != 0; }
  // Throws DimensionError / NumericError on bad shapes or non-finite scores.
  void validate() const;
  // Rows picked by index (repeats allowed).
  ScoreMatrix take_rows(std::span<const std::size_t> rows) const;
};

// Binary building blocks. Throw MetricUndefinedError without both classes present.
double auroc_binary(std::span<const double> scores, std::span<const std::uint8_t> labels);
double average_precision_binary(std::span<const double> scores, std::span<const std::uint8_t> labels);

// Classes lacking positives or negatives are skipped in macro averages and listed in
// `excluded` when given. Throws MetricUndefinedError when nothing is left.
double auroc(const ScoreMatrix& m, Averaging avg, std::vector<std::size_t>* excluded = nullptr);
double auprc(const ScoreMatrix& m, Averaging avg, std::vector<std::size_t>* excluded = nullptr);

struct RecallOptions {
  std::size_t k = 4;
  // Class removed from both the ranking and the capture counts (e.g. none).
  std::optional<std::size_t> exclude_class;
};

// Share of true labels found among each person's k highest scores (ties -> lower class
// index first). Macro averages per-class capture rates over classes with positives.
double recall_at_k(const ScoreMatrix& m, Averaging avg, const RecallOptions& opt = {});

struct BootstrapResult {
  double mean = 0.0;
  double std = 0.0;  // sample standard deviation (n - 1)
  std::size_t iterations = 0;
  std::size_t redrawn = 0;  // resamples where the metric was undefined
};

using MetricFn = std::function<double(const ScoreMatrix&)>;

// Resamples persons with replacement. Iteration i uses an RNG seeded from (seed, i), so
// results do not depend on thread count. A resample where any metric is undefined is
// drawn again.
std::vector<BootstrapResult> bootstrap(const ScoreMatrix& m, const std::vector<MetricFn>& metrics,
                                       std::size_t iterations, std::uint64_t seed);
BootstrapResult bootstrap_std(const MetricFn& metric, const ScoreMatrix& m, std::size_t iterations,
                              std::uint64_t seed);

struct MetricSummary {
  double value = 0.0;  // on the full set
  double std = 0.0;    // bootstrap
};

struct EvaluationRow {
  std::string model;
  MetricSummary auroc_micro, auroc_macro, auprc_micro, auprc_macro, recall_micro, recall_macro;
  std::vector<std::size_t> excluded_classes;
  std::size_t redrawn = 0;
};

struct EvaluationOptions {
  std::size_t bootstrap_iterations = 1000;
  std::uint64_t seed = 1;
  RecallOptions recall;
};

EvaluationRow evaluate_scores(const std::string& model, const ScoreMatrix& m, const EvaluationOptions& opt);

struct ClassRow {
  std::size_t cls = 0;
  std::string name;
  std::optional<double> auroc;
  std::optional<double> recall_at_k;
  double prevalence = 0.0;
  std::size_t positives = 0;
};

std::vector<ClassRow> per_class_table(const ScoreMatrix& m, const std::vector<std::string>& names,
                                      const RecallOptions& opt = {});

void write_summary_csv(std::ostream& out, const std::vector<EvaluationRow>& rows, std::size_t k = 4);
void write_per_class_csv(std::ostream& out, const std::vector<ClassRow>& rows, std::size_t k = 4);

}  // namespace evolve
