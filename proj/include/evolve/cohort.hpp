#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "evolve/model.hpp"
#include "evolve/training.hpp"

namespace evolve {

struct CodeType {
  std::string name;
  std::size_t count = 0;
};

struct TriggerSpec {
  std::size_t diagnosis = 0;  // class index
  int code = 0;               // dataset code id
  double multiplier = 8.0;
};

// Generative settings for a synthetic cohort. Times are continuous years; everybody is
// born on January 1st of birth_year so that age + birth_year is calendar time.
struct CohortConfig {
  std::size_t n_persons = 20000;
  std::uint64_t seed = 1;
  std::vector<CodeType> code_types = {{"visits", 20},     {"drugs", 40},       {"endpoints", 30},
                                      {"icd", 50},        {"infections", 15},  {"procedures_a", 25},
                                      {"procedures_b", 20}};
  std::size_t n_diagnoses = 8;  // classes = diagnoses + death + none
  int forecast_start = 2016;
  double forecast_years = 5.0;
  double buffer_fraction = 0.05;  // buffer = buffer_fraction * forecast_years
  double history_years = 60.0;
  int min_age = 18;  // age at forecast start
  int max_age = 85;

  // background codes: rate(age) = rate * frailty * exp(age_slope * (age - 40)) per year
  double background_rate = 0.6;
  double background_age_slope = 0.02;
  double background_zipf = 0.8;
  double frailty_shape = 2.0;  // gamma, mean 1

  // diagnosis hazard at age 50 per year, one entry per diagnosis (empty = defaults)
  std::vector<double> diagnosis_base;
  double diagnosis_age_slope = 0.05;
  double death_base = 2e-4;  // Gompertz hazard at age 20
  double death_age_slope = 0.085;

  // per-class latent risk: lognormal with mean 1; multiplies the diagnosis hazard and the
  // rate of that class's prodrome codes (the rarest background codes, prodrome_codes each)
  double risk_sd = 0.0;
  std::size_t prodrome_codes = 3;
  double prodrome_rate = 0.05;  // per year at risk 1, age 40

  double p_trigger = 0.12;
  double trigger_window = 5.0;  // years before the end of history
  std::vector<TriggerSpec> triggers;  // empty = one per diagnosis, multiplier 8
  double trigger_recurrence = 0.0;  // mean number of follow-up re-codings after a trigger

  double shock_probability = 0.05;
  std::size_t n_shock_codes = 10;
  std::size_t shock_burst_min = 8;
  std::size_t shock_burst_max = 12;
  int shock_age_min = 35;
  int shock_age_max = 55;
  double shock_multiplier = 2.0;

  std::size_t vocab_size() const;
  std::size_t n_classes() const { return n_diagnoses + 2; }
  std::size_t death_class() const { return n_diagnoses; }
  std::size_t none_class() const { return n_diagnoses + 1; }
  double buffer_years() const { return buffer_fraction * forecast_years; }
  std::vector<std::string> class_names() const;

  // First code of the named type; throws ConfigError when unknown.
  int type_offset(const std::string& name) const;
  // Diagnosis c is recorded with this endpoint code when it occurs in the history.
  int endpoint_code(std::size_t diagnosis) const;
  std::vector<int> shock_codes() const;
  // Codes whose rate follows the latent risk of each diagnosis (empty when risk_sd == 0).
  std::vector<std::vector<int>> prodrome_code_sets() const;
  std::vector<double> resolved_diagnosis_base() const;
  std::vector<TriggerSpec> resolved_triggers() const;

  void validate() const;
};

struct CodeEvent {
  int code = 0;
  double age = 0.0;
  bool operator==(const CodeEvent&) const = default;
};

struct PersonRecord {
  std::uint64_t person_id = 0;
  int birth_year = 0;
  std::vector<CodeEvent> events;  // time ordered
  std::vector<int> labels;        // class ids, ascending
  bool operator==(const PersonRecord&) const = default;
};

struct PlantedTrigger {
  std::size_t diagnosis = 0;
  int code = 0;
  double age = 0.0;
};

struct PersonTruth {
  std::uint64_t person_id = 0;
  double frailty = 1.0;
  std::vector<double> risk;  // per diagnosis; empty when disabled
  std::vector<PlantedTrigger> triggers;
  std::optional<int> shock_age;
};

struct Cohort {
  CohortConfig config;
  std::vector<PersonRecord> persons;
  std::vector<PersonTruth> truth;  // parallel to persons
};

Cohort generate_cohort(const CohortConfig& cfg);

struct DatasetSplit {
  std::vector<std::uint64_t> train, valid, test;
};

// Person-level 70/10/20 partition, deterministic under seed.
DatasetSplit split_dataset(const std::vector<std::uint64_t>& person_ids, std::uint64_t seed);

// Dense 0/1 label vector.
std::vector<std::uint8_t> dense_labels(const PersonRecord& p, std::size_t n_classes);

// Model input for one person: tokens are code + kFirstCodeToken, integer ages,
// t2f = floor(forecast_start - event time); keeps the most recent max_seq_len events.
InputSequence to_input_sequence(const PersonRecord& p, double forecast_start, double buffer_years,
                                std::size_t max_seq_len);

// Examples for the given persons (cls mode gets the CLS token prepended).
std::vector<Example> build_examples(const std::vector<PersonRecord>& persons, const CohortConfig& cohort,
                                    const ModelConfig& model);

// Persons selected by id, in the order of `ids`. Throws NotFoundError on unknown ids.
std::vector<PersonRecord> select_persons(const std::vector<PersonRecord>& persons,
                                         const std::vector<std::uint64_t>& ids);

// JSON documents
std::string cohort_config_to_json(const CohortConfig& cfg);
CohortConfig cohort_config_from_json(const std::string& text);
std::string truth_to_json(const Cohort& cohort);

// One person per line. Unknown fields are reported through `warnings` (or stderr).
void save_jsonl(const std::filesystem::path& path, const std::vector<PersonRecord>& persons);
void write_jsonl(std::ostream& out, const std::vector<PersonRecord>& persons);
std::vector<PersonRecord> load_jsonl(const std::filesystem::path& path, std::vector<std::string>* warnings = nullptr);
std::vector<PersonRecord> read_jsonl(std::istream& in, std::vector<std::string>* warnings = nullptr);

}  // namespace evolve
