#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "evolve/model.hpp"

namespace evolve {

// One unit vector per integer age in [first_age, last_age()], gaps filled forward.
struct AgeEmbeddingMap {
  std::uint64_t person_id = 0;
  int first_age = 0;
  std::vector<std::vector<double>> vectors;

  bool empty() const { return vectors.empty(); }
  int last_age() const { return first_age + static_cast<int>(vectors.size()) - 1; }
  bool has(int age) const { return !vectors.empty() && age >= first_age && age <= last_age(); }
  // Throws NotFoundError outside the range.
  const std::vector<double>& at(int age) const;
};

// Weights 1..m (oldest to newest), then L2-normalized. Throws NumericError when the
// result cannot be normalized, ContractError on empty input or ragged vectors.
std::vector<double> pwm_pool(std::span<const std::vector<double>> embeddings);

double cosine(std::span<const double> u, std::span<const double> v);

// Pools the final-layer states of an evolve-mode model per recorded age.
AgeEmbeddingMap build_age_embeddings(std::uint64_t person_id, const InputSequence& seq,
                                     const EvolveModel<float>& model);
// Same, for many persons at once (parallel over persons, output order = input order).
std::vector<AgeEmbeddingMap> build_age_embeddings(std::span<const std::uint64_t> ids,
                                                  std::span<const InputSequence> seqs,
                                                  const EvolveModel<float>& model);

struct Neighbor {
  std::uint64_t id = 0;
  double cosine = 0.0;
};

struct NeighborSet {
  std::uint64_t target = 0;
  int age = 0;
  std::size_t k = 0;
  std::vector<Neighbor> members;  // cosine descending, ties by ascending id
};

// References at the same age, excluding the target's own id. Throws NotFoundError when
// the target lacks the age or no reference has it.
NeighborSet neighbors(const AgeEmbeddingMap& target, int age, std::span<const AgeEmbeddingMap> references,
                      std::size_t k);

// Number of references (other than the target) that cover `age`.
std::size_t pool_size(std::uint64_t target, int age, std::span<const AgeEmbeddingMap> references);

// 1 - |N(a-1) ∩ N(a)| / k', with k' = k clamped to both pools.
double rate_of_change(const AgeEmbeddingMap& target, int age, std::size_t k,
                      std::span<const AgeEmbeddingMap> references);

struct ChangePoint {
  int age = 0;
  double mean_rate = 0.0;
  std::size_t n = 0;
};

struct ChangeCurve {
  std::vector<ChangePoint> points;
  std::vector<int> omitted_ages;  // no group member could be evaluated
};

// Group members contribute at every age in [first_age, last_age] where they have both
// a and a-1.
ChangeCurve cohort_change_curve(std::span<const AgeEmbeddingMap> group, int first_age, int last_age,
                                std::size_t k, std::span<const AgeEmbeddingMap> references);

struct JumpThresholds {
  std::vector<std::optional<double>> mean_max_jump;  // per class; empty when no positives
  std::vector<std::size_t> counts;
};

// Per positive (person, class): max over t >= 1 of s_c(t) - s_c(t-1); averaged per class.
// Persons with a single position are skipped.
JumpThresholds calibrate_jumps(std::span<const PredictionSeries> series,
                               std::span<const std::vector<std::uint8_t>> labels);

struct JumpEvent {
  std::uint64_t person_id = 0;
  std::size_t cls = 0;
  int code = 0;  // dataset code at the later position
  double before = 0.0;
  double after = 0.0;
  int age = 0;
  int t2f = 0;
  std::size_t position = 0;
  double magnitude() const { return after - before; }
};

// Every increase >= max(threshold_c, 1e-6). Classes without a threshold are ignored.
std::vector<JumpEvent> detect_jumps(std::span<const std::uint64_t> ids, std::span<const PredictionSeries> series,
                                    std::span<const InputSequence> seqs, const JumpThresholds& thresholds);

struct JumpTableRow {
  std::size_t cls = 0;
  int code = 0;
  std::size_t count = 0;
  double percent = 0.0;
  double mean_age = 0.0;
  double mean_t2f = 0.0;
};

// Per (class, code) share of the class's jumps; classes ascending, rows by count
// descending then code ascending.
std::vector<JumpTableRow> aggregate_jumps(const std::vector<JumpEvent>& events);

struct ClassSimilarity {
  std::vector<int> ages;
  std::vector<std::size_t> classes;                      // columns kept
  std::vector<std::vector<std::optional<double>>> values;  // [age][column]
  std::vector<std::size_t> omitted_classes;              // no references at all
  std::vector<std::size_t> short_classes;                // fewer than k somewhere
};

// For each target age and class: the k most similar references with that label at the
// same age are averaged, re-normalized and compared with the target.
ClassSimilarity class_representative_similarity(const AgeEmbeddingMap& target,
                                                std::span<const AgeEmbeddingMap> references,
                                                std::span<const std::vector<std::uint8_t>> reference_labels,
                                                std::size_t k);

struct SigmoidTrajectory {
  std::vector<int> ages;
  std::vector<std::vector<double>> sigmoids;  // [age][class], last position at that age
};

SigmoidTrajectory sigmoid_trajectory(const InputSequence& seq, const EvolveModel<float>& model);

void write_trajectory_csv(std::ostream& out, const SigmoidTrajectory& t, const std::vector<std::string>& class_names,
                          const std::vector<std::optional<double>>& rates = {});
void write_jump_table_csv(std::ostream& out, const std::vector<JumpTableRow>& rows,
                          const std::vector<std::string>& class_names);
void write_change_curve_csv(std::ostream& out, const ChangeCurve& curve);
void write_similarity_csv(std::ostream& out, const ClassSimilarity& s, const std::vector<std::string>& class_names);

}  // namespace evolve
