#include "evolve/cohort.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iostream>
#include <limits>
#include <numeric>
#include <random>
#include <sstream>
#include <unordered_map>

#include <json.hpp>

#include "evolve/errors.hpp"

namespace evolve {

using ojson = nlohmann::ordered_json;

namespace {

constexpr double kStep = 0.25;  // hazard integration grid, years

std::mt19937_64 person_rng(std::uint64_t seed, std::uint64_t index) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(index), static_cast<std::uint32_t>(index >> 32), 0x636f68u};
  return std::mt19937_64(seq);
}

struct Layout {
  std::vector<int> background;  // codes available for background events
  std::vector<double> weights;  // Zipf weights aligned with background
  std::vector<std::vector<int>> prodromes;  // per diagnosis
};

Layout background_layout(const CohortConfig& cfg) {
  std::vector<bool> reserved(cfg.vocab_size(), false);
  for (std::size_t c = 0; c < cfg.n_diagnoses; ++c) reserved[cfg.endpoint_code(c)] = true;
  for (const auto& t : cfg.resolved_triggers()) reserved[t.code] = true;
  for (int s : cfg.shock_codes()) reserved[s] = true;
  Layout out;
  for (std::size_t code = 0; code < reserved.size(); ++code) {
    if (!reserved[code]) out.background.push_back(static_cast<int>(code));
  }
  // popularity order is a seed-determined permutation of the codes
  std::mt19937_64 rng = person_rng(cfg.seed, ~std::uint64_t{0});
  std::shuffle(out.background.begin(), out.background.end(), rng);
  for (std::size_t r = 0; r < out.background.size(); ++r) {
    out.weights.push_back(1.0 / std::pow(static_cast<double>(r + 1), cfg.background_zipf));
  }
  // prodromes are the rarest background codes
  if (cfg.risk_sd > 0) {
    std::size_t r = out.background.size();
    for (std::size_t c = 0; c < cfg.n_diagnoses; ++c) {
      std::vector<int> set;
      for (std::size_t k = 0; k < cfg.prodrome_codes; ++k) set.push_back(out.background[--r]);
      out.prodromes.push_back(std::move(set));
    }
  }
  return out;
}

// Samples a first-event time on [from, to) for a piecewise hazard evaluated at step midpoints.
template <typename Hazard>
std::optional<double> first_event(double from, double to, Hazard&& hazard, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (double t = from; t < to; t += kStep) {
    const double dt = std::min(kStep, to - t);
    const double p = 1.0 - std::exp(-hazard(t + 0.5 * dt) * dt);
    if (u(rng) < p) return t + u(rng) * dt;
  }
  return std::nullopt;
}

std::pair<PersonRecord, PersonTruth> generate_person(const CohortConfig& cfg, const Layout& layout,
                                                     const std::vector<double>& dx_base,
                                                     const std::vector<TriggerSpec>& triggers,
                                                     const std::vector<int>& shock_codes, std::uint64_t id) {
  std::mt19937_64 rng = person_rng(cfg.seed, id);
  std::uniform_real_distribution<double> unif(0.0, 1.0);

  PersonRecord p;
  PersonTruth truth;
  p.person_id = id;
  truth.person_id = id;
  const int age0 = std::uniform_int_distribution<int>(cfg.min_age, cfg.max_age)(rng);
  p.birth_year = cfg.forecast_start - age0;
  const double hs = std::max(0.0, age0 - cfg.history_years);
  const double he = age0 - cfg.buffer_years();
  const double fe = age0 + cfg.forecast_years;

  const double frailty = std::gamma_distribution<double>(cfg.frailty_shape, 1.0 / cfg.frailty_shape)(rng);
  truth.frailty = frailty;
  std::vector<double> risk(cfg.n_diagnoses, 1.0);
  if (cfg.risk_sd > 0) {
    std::normal_distribution<double> g(-0.5 * cfg.risk_sd * cfg.risk_sd, cfg.risk_sd);
    for (double& z : risk) z = std::exp(g(rng));
    truth.risk = risk;
  }

  // background codes, yearly Poisson counts
  std::discrete_distribution<std::size_t> pick(layout.weights.begin(), layout.weights.end());
  for (double y = std::floor(hs); y < he; y += 1.0) {
    const double lo = std::max(y, hs), hi = std::min(y + 1.0, he);
    if (hi <= lo) continue;
    const double rate =
        cfg.background_rate * frailty * std::exp(cfg.background_age_slope * (0.5 * (lo + hi) - 40.0));
    const int n = std::poisson_distribution<int>(rate * (hi - lo))(rng);
    for (int k = 0; k < n; ++k) p.events.push_back({layout.background[pick(rng)], lo + unif(rng) * (hi - lo)});
    const double age_factor = std::exp(cfg.background_age_slope * (0.5 * (lo + hi) - 40.0));
    for (std::size_t c = 0; c < layout.prodromes.size(); ++c) {
      const auto& set = layout.prodromes[c];
      const int m = std::poisson_distribution<int>(cfg.prodrome_rate * risk[c] * age_factor * (hi - lo))(rng);
      for (int k = 0; k < m; ++k) p.events.push_back({set[rng() % set.size()], lo + unif(rng) * (hi - lo)});
    }
  }

  // planted triggers, somewhere in the last trigger_window years of history
  const double trig_from = std::max(hs, he - cfg.trigger_window);
  std::vector<double> trigger_age(cfg.n_diagnoses, std::numeric_limits<double>::infinity());
  std::vector<double> trigger_mult(cfg.n_diagnoses, 1.0);
  for (const auto& t : triggers) {
    if (unif(rng) >= cfg.p_trigger) continue;
    const double a = trig_from + unif(rng) * (he - trig_from);
    if (a < trigger_age[t.diagnosis]) {
      trigger_age[t.diagnosis] = a;
      trigger_mult[t.diagnosis] = t.multiplier;
    }
    p.events.push_back({t.code, a});
    truth.triggers.push_back({t.diagnosis, t.code, a});
    if (cfg.trigger_recurrence > 0) {
      const int r = std::poisson_distribution<int>(cfg.trigger_recurrence)(rng);
      for (int k = 0; k < r; ++k) p.events.push_back({t.code, a + unif(rng) * (he - a)});
    }
  }

  // mid-life shock: a burst of otherwise unused codes within one year of age
  double shock_from = std::numeric_limits<double>::infinity();
  const int s_lo = std::max(cfg.shock_age_min, static_cast<int>(std::ceil(hs)) + 3);
  const int s_hi = std::min(cfg.shock_age_max, static_cast<int>(std::floor(he)) - 3);
  if (s_lo <= s_hi && unif(rng) < cfg.shock_probability) {
    const int age = std::uniform_int_distribution<int>(s_lo, s_hi)(rng);
    const std::size_t n =
        std::uniform_int_distribution<std::size_t>(cfg.shock_burst_min, cfg.shock_burst_max)(rng);
    std::vector<int> pool = shock_codes;
    std::shuffle(pool.begin(), pool.end(), rng);
    for (std::size_t k = 0; k < n; ++k) p.events.push_back({pool[k % pool.size()], age + 0.9 * unif(rng)});
    truth.shock_age = age;
    shock_from = age;
  }

  // death only matters inside the forecast window; persons are alive at its start
  const auto death = first_event(
      static_cast<double>(age0), fe,
      [&](double a) { return cfg.death_base * frailty * std::exp(cfg.death_age_slope * (a - 20.0)); }, rng);
  const double death_age = death.value_or(std::numeric_limits<double>::infinity());

  // diagnoses: first onset over history, buffer and forecast window
  std::vector<int> labels;
  for (std::size_t c = 0; c < cfg.n_diagnoses; ++c) {
    auto hazard = [&](double a) {
      double h = dx_base[c] * frailty * risk[c] * std::exp(cfg.diagnosis_age_slope * (a - 50.0));
      if (a >= trigger_age[c]) h *= trigger_mult[c];
      if (a >= shock_from) h *= cfg.shock_multiplier;
      return h;
    };
    const auto onset = first_event(hs, std::min(fe, death_age), hazard, rng);
    if (!onset) continue;
    if (*onset < he) {
      p.events.push_back({cfg.endpoint_code(c), *onset});
    } else if (*onset >= age0) {
      labels.push_back(static_cast<int>(c));
    }
  }
  if (death) labels.push_back(static_cast<int>(cfg.death_class()));
  if (labels.empty()) labels.push_back(static_cast<int>(cfg.none_class()));
  p.labels = labels;

  std::stable_sort(p.events.begin(), p.events.end(), [](const CodeEvent& a, const CodeEvent& b) { return a.age < b.age; });
  if (p.events.empty()) {
    // nobody without records: one background code somewhere in the history
    p.events.push_back({layout.background[pick(rng)], hs + 0.99 * unif(rng) * (he - hs)});
  }
  return {std::move(p), std::move(truth)};
}

int json_int(const ojson& v, const std::string& what) {
  if (!v.is_number_integer()) throw DataError(what + " must be an integer");
  return v.get<int>();
}

}  // namespace

std::size_t CohortConfig::vocab_size() const {
  std::size_t n = 0;
  for (const auto& t : code_types) n += t.count;
  return n;
}

std::vector<std::string> CohortConfig::class_names() const {
  std::vector<std::string> out;
  for (std::size_t c = 0; c < n_diagnoses; ++c) out.push_back("D" + std::to_string(c + 1));
  out.push_back("death");
  out.push_back("none");
  return out;
}

int CohortConfig::type_offset(const std::string& name) const {
  std::size_t off = 0;
  for (const auto& t : code_types) {
    if (t.name == name) return static_cast<int>(off);
    off += t.count;
  }
  throw ConfigError("cohort: unknown code type '" + name + "'");
}

int CohortConfig::endpoint_code(std::size_t diagnosis) const { return type_offset("endpoints") + static_cast<int>(diagnosis); }

std::vector<int> CohortConfig::shock_codes() const {
  std::vector<int> out;
  const int end = static_cast<int>(vocab_size());
  for (std::size_t k = 0; k < n_shock_codes; ++k) out.push_back(end - static_cast<int>(n_shock_codes) + static_cast<int>(k));
  return out;
}

std::vector<std::vector<int>> CohortConfig::prodrome_code_sets() const { return background_layout(*this).prodromes; }

std::vector<double> CohortConfig::resolved_diagnosis_base() const {
  if (!diagnosis_base.empty()) return diagnosis_base;
  static const double defaults[] = {0.0020, 0.0030, 0.0040, 0.0025, 0.0035, 0.0045, 0.0022, 0.0030};
  std::vector<double> out;
  for (std::size_t c = 0; c < n_diagnoses; ++c) out.push_back(defaults[c % 8]);
  return out;
}

std::vector<TriggerSpec> CohortConfig::resolved_triggers() const {
  if (!triggers.empty()) return triggers;
  std::vector<TriggerSpec> out;
  const int icd = type_offset("icd");
  std::size_t icd_count = 0;
  for (const auto& t : code_types) {
    if (t.name == "icd") icd_count = t.count;
  }
  for (std::size_t c = 0; c < n_diagnoses; ++c) {
    out.push_back({c, icd + static_cast<int>(c * icd_count / std::max<std::size_t>(1, n_diagnoses)), 8.0});
  }
  return out;
}

void CohortConfig::validate() const {
  auto bad = [](const std::string& what) { throw ConfigError("cohort: " + what); };
  if (n_persons == 0) bad("n_persons must be positive");
  if (n_diagnoses == 0) bad("need at least one diagnosis class (classes = diagnoses + death + none >= 3)");
  for (const auto& t : code_types) {
    if (t.count == 0) bad("code type '" + t.name + "' has no codes");
  }
  std::size_t endpoints = 0;
  for (const auto& t : code_types) {
    if (t.name == "endpoints") endpoints = t.count;
  }
  if (endpoints < n_diagnoses) bad("the 'endpoints' code type needs one code per diagnosis");
  if (!(forecast_years > 0)) bad("forecast_years must be positive");
  if (!(buffer_fraction >= 0 && buffer_fraction < 1)) bad("buffer_fraction must be in [0,1)");
  if (!(history_years > 1)) bad("history_years must exceed one year");
  if (min_age < 1 || max_age < min_age || max_age > 105) bad("age range must satisfy 1 <= min_age <= max_age <= 105");
  if (!(background_rate > 0) || !(frailty_shape > 0)) bad("background_rate and frailty_shape must be positive");
  auto prob = [&](double p, const char* name) {
    if (!(p >= 0.0 && p <= 1.0)) bad(std::string(name) + " must be a probability in [0,1]");
  };
  prob(p_trigger, "p_trigger");
  if (!(risk_sd >= 0 && risk_sd <= 3)) bad("risk_sd must be in [0, 3]");
  if (!(prodrome_rate >= 0)) bad("prodrome_rate must be non-negative");
  if (risk_sd > 0 && prodrome_codes == 0) bad("prodrome_codes must be positive when risk_sd > 0");
  if (!(trigger_window > 0)) bad("trigger_window must be positive");
  if (!(trigger_recurrence >= 0)) bad("trigger_recurrence must be non-negative");
  prob(shock_probability, "shock_probability");
  const auto base = resolved_diagnosis_base();
  if (base.size() != n_diagnoses) bad("diagnosis_base needs one rate per diagnosis");
  for (double b : base) {
    if (!(b >= 0)) bad("diagnosis rates must be non-negative");
  }
  if (!(death_base >= 0)) bad("death_base must be non-negative");
  const int vocab = static_cast<int>(vocab_size());
  std::vector<int> used;
  for (const auto& t : resolved_triggers()) {
    if (t.code < 0 || t.code >= vocab) bad("trigger code " + std::to_string(t.code) + " is outside the vocabulary");
    if (t.diagnosis >= n_diagnoses) bad("trigger mapped to unknown diagnosis " + std::to_string(t.diagnosis));
    if (!(t.multiplier > 0)) bad("trigger multipliers must be positive");
    used.push_back(t.code);
  }
  if (n_shock_codes == 0 || n_shock_codes >= static_cast<std::size_t>(vocab)) bad("n_shock_codes out of range");
  if (shock_burst_min == 0 || shock_burst_max < shock_burst_min) bad("shock burst size range is empty");
  if (shock_age_max < shock_age_min) bad("shock age range is empty");
  for (std::size_t c = 0; c < n_diagnoses; ++c) used.push_back(endpoint_code(c));
  for (int s : shock_codes()) used.push_back(s);
  std::sort(used.begin(), used.end());
  if (std::adjacent_find(used.begin(), used.end()) != used.end()) bad("trigger, endpoint and shock codes must be distinct");
  const std::size_t prodromes = risk_sd > 0 ? n_diagnoses * prodrome_codes : 0;
  if (used.size() + prodromes + 10 > static_cast<std::size_t>(vocab)) {
    bad("too few codes left for background events (need at least 10 besides reserved and prodrome codes)");
  }
}

Cohort generate_cohort(const CohortConfig& cfg) {
  cfg.validate();
  Cohort out;
  out.config = cfg;
  const Layout layout = background_layout(cfg);
  const auto base = cfg.resolved_diagnosis_base();
  const auto triggers = cfg.resolved_triggers();
  const auto shocks = cfg.shock_codes();
  out.persons.reserve(cfg.n_persons);
  out.truth.reserve(cfg.n_persons);
  for (std::size_t i = 0; i < cfg.n_persons; ++i) {
    auto [p, t] = generate_person(cfg, layout, base, triggers, shocks, i);
    out.persons.push_back(std::move(p));
    out.truth.push_back(std::move(t));
  }
  return out;
}

DatasetSplit split_dataset(const std::vector<std::uint64_t>& person_ids, std::uint64_t seed) {
  const std::size_t n = person_ids.size();
  if (n < 10) throw ContractError("split needs at least 10 persons, got " + std::to_string(n));
  std::vector<std::uint64_t> ids = person_ids;
  std::mt19937_64 rng(seed);
  std::shuffle(ids.begin(), ids.end(), rng);
  const auto n_train = static_cast<std::size_t>(std::llround(0.7 * static_cast<double>(n)));
  const auto n_valid = static_cast<std::size_t>(std::llround(0.1 * static_cast<double>(n)));
  DatasetSplit s;
  s.train.assign(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(n_train));
  s.valid.assign(ids.begin() + static_cast<std::ptrdiff_t>(n_train),
                 ids.begin() + static_cast<std::ptrdiff_t>(n_train + n_valid));
  s.test.assign(ids.begin() + static_cast<std::ptrdiff_t>(n_train + n_valid), ids.end());
  return s;
}

std::vector<std::uint8_t> dense_labels(const PersonRecord& p, std::size_t n_classes) {
  std::vector<std::uint8_t> y(n_classes, 0);
  for (int c : p.labels) {
    if (c < 0 || static_cast<std::size_t>(c) >= n_classes) {
      throw IndexError("person " + std::to_string(p.person_id) + " has label " + std::to_string(c) +
                       " outside 0.." + std::to_string(n_classes - 1));
    }
    y[static_cast<std::size_t>(c)] = 1;
  }
  return y;
}

InputSequence to_input_sequence(const PersonRecord& p, double forecast_start, double buffer_years,
                                std::size_t max_seq_len) {
  if (p.events.empty()) throw DataError("person " + std::to_string(p.person_id) + " has no events");
  if (max_seq_len == 0) throw ContractError("max_seq_len must be positive");
  const std::size_t first = p.events.size() > max_seq_len ? p.events.size() - max_seq_len : 0;
  InputSequence s;
  for (std::size_t i = 0; i < p.events.size(); ++i) {
    const auto& e = p.events[i];
    const double when = p.birth_year + e.age;
    if (when >= forecast_start - buffer_years) {
      throw DataError("person " + std::to_string(p.person_id) + ": event at age " + std::to_string(e.age) +
                      " falls inside the buffer before the forecast interval");
    }
    if (i < first) continue;
    if (e.code < 0) throw DataError("person " + std::to_string(p.person_id) + ": negative code");
    s.codes.push_back(e.code + kFirstCodeToken);
    s.ages.push_back(static_cast<int>(std::floor(e.age)));
    s.t2f.push_back(static_cast<int>(std::floor(forecast_start - when)));
  }
  return s;
}

std::vector<Example> build_examples(const std::vector<PersonRecord>& persons, const CohortConfig& cohort,
                                    const ModelConfig& model) {
  if (model.n_classes != cohort.n_classes()) {
    throw ConfigError("model has " + std::to_string(model.n_classes) + " classes, cohort has " +
                      std::to_string(cohort.n_classes()));
  }
  std::vector<Example> out;
  out.reserve(persons.size());
  for (const auto& p : persons) {
    Example e;
    e.person_id = p.person_id;
    e.sequence = to_input_sequence(p, cohort.forecast_start, cohort.buffer_years(), model.max_seq_len);
    if (model.mode == ModelMode::cls) e.sequence = with_cls_token(e.sequence, model.max_seq_len);
    e.labels = dense_labels(p, cohort.n_classes());
    out.push_back(std::move(e));
  }
  return out;
}

std::vector<PersonRecord> select_persons(const std::vector<PersonRecord>& persons,
                                         const std::vector<std::uint64_t>& ids) {
  std::unordered_map<std::uint64_t, std::size_t> index;
  for (std::size_t i = 0; i < persons.size(); ++i) index.emplace(persons[i].person_id, i);
  std::vector<PersonRecord> out;
  out.reserve(ids.size());
  for (auto id : ids) {
    auto it = index.find(id);
    if (it == index.end()) throw NotFoundError("person id " + std::to_string(id) + " not in dataset");
    out.push_back(persons[it->second]);
  }
  return out;
}

// ---- JSON -------------------------------------------------------------------

std::string cohort_config_to_json(const CohortConfig& cfg) {
  ojson j;
  j["n_persons"] = cfg.n_persons;
  j["seed"] = cfg.seed;
  j["vocab"] = ojson::object();
  for (const auto& t : cfg.code_types) j["vocab"][t.name] = t.count;
  j["n_diagnoses"] = cfg.n_diagnoses;
  j["forecast_start"] = cfg.forecast_start;
  j["forecast_years"] = cfg.forecast_years;
  j["buffer_fraction"] = cfg.buffer_fraction;
  j["history_years"] = cfg.history_years;
  j["min_age"] = cfg.min_age;
  j["max_age"] = cfg.max_age;
  j["background_rate"] = cfg.background_rate;
  j["background_age_slope"] = cfg.background_age_slope;
  j["background_zipf"] = cfg.background_zipf;
  j["frailty_shape"] = cfg.frailty_shape;
  j["diagnosis_base"] = cfg.resolved_diagnosis_base();
  j["diagnosis_age_slope"] = cfg.diagnosis_age_slope;
  j["death_base"] = cfg.death_base;
  j["death_age_slope"] = cfg.death_age_slope;
  j["risk_sd"] = cfg.risk_sd;
  j["prodrome_codes"] = cfg.prodrome_codes;
  j["prodrome_rate"] = cfg.prodrome_rate;
  j["p_trigger"] = cfg.p_trigger;
  j["trigger_window"] = cfg.trigger_window;
  j["trigger_recurrence"] = cfg.trigger_recurrence;
  j["triggers"] = ojson::array();
  for (const auto& t : cfg.resolved_triggers()) {
    j["triggers"].push_back({{"diagnosis", t.diagnosis}, {"code", t.code}, {"multiplier", t.multiplier}});
  }
  j["shock_probability"] = cfg.shock_probability;
  j["n_shock_codes"] = cfg.n_shock_codes;
  j["shock_burst_min"] = cfg.shock_burst_min;
  j["shock_burst_max"] = cfg.shock_burst_max;
  j["shock_age_min"] = cfg.shock_age_min;
  j["shock_age_max"] = cfg.shock_age_max;
  j["shock_multiplier"] = cfg.shock_multiplier;
  return j.dump(2);
}

CohortConfig cohort_config_from_json(const std::string& text) {
  ojson j;
  try {
    j = ojson::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(std::string("cohort config: ") + e.what());
  }
  if (!j.is_object()) throw ConfigError("cohort config must be a JSON object");
  CohortConfig c;
  try {
    for (auto it = j.begin(); it != j.end(); ++it) {
      const std::string& k = it.key();
      const ojson& v = it.value();
      if (k == "n_persons") c.n_persons = v.get<std::size_t>();
      else if (k == "seed") c.seed = v.get<std::uint64_t>();
      else if (k == "vocab") {
        if (!v.is_object()) throw ConfigError("cohort config: 'vocab' must map code types to counts");
        c.code_types.clear();
        for (auto t = v.begin(); t != v.end(); ++t) c.code_types.push_back({t.key(), t.value().get<std::size_t>()});
      } else if (k == "n_diagnoses") c.n_diagnoses = v.get<std::size_t>();
      else if (k == "forecast_start") c.forecast_start = v.get<int>();
      else if (k == "forecast_years") c.forecast_years = v.get<double>();
      else if (k == "buffer_fraction") c.buffer_fraction = v.get<double>();
      else if (k == "history_years") c.history_years = v.get<double>();
      else if (k == "min_age") c.min_age = v.get<int>();
      else if (k == "max_age") c.max_age = v.get<int>();
      else if (k == "background_rate") c.background_rate = v.get<double>();
      else if (k == "background_age_slope") c.background_age_slope = v.get<double>();
      else if (k == "background_zipf") c.background_zipf = v.get<double>();
      else if (k == "frailty_shape") c.frailty_shape = v.get<double>();
      else if (k == "diagnosis_base") c.diagnosis_base = v.get<std::vector<double>>();
      else if (k == "diagnosis_age_slope") c.diagnosis_age_slope = v.get<double>();
      else if (k == "death_base") c.death_base = v.get<double>();
      else if (k == "death_age_slope") c.death_age_slope = v.get<double>();
      else if (k == "risk_sd") c.risk_sd = v.get<double>();
      else if (k == "prodrome_codes") c.prodrome_codes = v.get<std::size_t>();
      else if (k == "prodrome_rate") c.prodrome_rate = v.get<double>();
      else if (k == "p_trigger") c.p_trigger = v.get<double>();
      else if (k == "trigger_window") c.trigger_window = v.get<double>();
      else if (k == "trigger_recurrence") c.trigger_recurrence = v.get<double>();
      else if (k == "triggers") {
        c.triggers.clear();
        for (const auto& t : v) {
          c.triggers.push_back({t.at("diagnosis").get<std::size_t>(), t.at("code").get<int>(),
                                t.value("multiplier", 8.0)});
        }
      } else if (k == "shock_probability") c.shock_probability = v.get<double>();
      else if (k == "n_shock_codes") c.n_shock_codes = v.get<std::size_t>();
      else if (k == "shock_burst_min") c.shock_burst_min = v.get<std::size_t>();
      else if (k == "shock_burst_max") c.shock_burst_max = v.get<std::size_t>();
      else if (k == "shock_age_min") c.shock_age_min = v.get<int>();
      else if (k == "shock_age_max") c.shock_age_max = v.get<int>();
      else if (k == "shock_multiplier") c.shock_multiplier = v.get<double>();
      else throw ConfigError("cohort config: unknown field '" + k + "'");
    }
    if (!j.contains("vocab")) throw ConfigError("cohort config: missing required field 'vocab'");
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("cohort config: ") + e.what());
  }
  c.validate();
  return c;
}

std::string truth_to_json(const Cohort& cohort) {
  const auto& cfg = cohort.config;
  ojson j;
  j["class_names"] = cfg.class_names();
  j["triggers"] = ojson::array();
  for (const auto& t : cfg.resolved_triggers()) {
    j["triggers"].push_back({{"diagnosis", t.diagnosis}, {"code", t.code}, {"multiplier", t.multiplier}});
  }
  std::vector<int> endpoints;
  for (std::size_t c = 0; c < cfg.n_diagnoses; ++c) endpoints.push_back(cfg.endpoint_code(c));
  j["endpoint_codes"] = endpoints;
  j["shock_codes"] = cfg.shock_codes();
  j["prodrome_codes"] = cfg.prodrome_code_sets();
  j["persons"] = ojson::array();
  for (const auto& t : cohort.truth) {
    ojson p;
    p["person_id"] = t.person_id;
    p["frailty"] = t.frailty;
    if (!t.risk.empty()) p["risk"] = t.risk;
    p["triggers"] = ojson::array();
    for (const auto& tr : t.triggers) p["triggers"].push_back({{"diagnosis", tr.diagnosis}, {"code", tr.code}, {"age", tr.age}});
    p["shock_age"] = t.shock_age ? ojson(*t.shock_age) : ojson(nullptr);
    j["persons"].push_back(std::move(p));
  }
  return j.dump(1);
}

void write_jsonl(std::ostream& out, const std::vector<PersonRecord>& persons) {
  for (const auto& p : persons) {
    ojson j;
    j["person_id"] = p.person_id;
    j["birth_year"] = p.birth_year;
    ojson ev = ojson::array();
    for (const auto& e : p.events) ev.push_back(ojson::array({e.code, e.age}));
    j["events"] = std::move(ev);
    j["labels"] = p.labels;
    out << j.dump() << '\n';
  }
}

void save_jsonl(const std::filesystem::path& path, const std::vector<PersonRecord>& persons) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot open " + path.string() + " for writing");
  write_jsonl(out, persons);
  if (!out) throw DataError("write to " + path.string() + " failed");
}

std::vector<PersonRecord> read_jsonl(std::istream& in, std::vector<std::string>* warnings) {
  std::vector<PersonRecord> out;
  std::string line;
  std::size_t lineno = 0;
  auto warn = [&](const std::string& msg) {
    if (warnings) warnings->push_back(msg);
    else std::cerr << "warning: " << msg << '\n';
  };
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.find_first_not_of(" \t") == std::string::npos) continue;
    const std::string where = "line " + std::to_string(lineno);
    ojson j;
    try {
      j = ojson::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw DataError(where + ": malformed JSON (" + e.what() + ")");
    }
    if (!j.is_object()) throw DataError(where + ": expected a JSON object");
    PersonRecord p;
    bool has_id = false, has_birth = false, has_events = false, has_labels = false;
    try {
      for (auto it = j.begin(); it != j.end(); ++it) {
        const std::string& k = it.key();
        const ojson& v = it.value();
        if (k == "person_id") {
          if (!v.is_number_unsigned()) throw DataError(where + ": person_id must be a non-negative integer");
          p.person_id = v.get<std::uint64_t>();
          has_id = true;
        } else if (k == "birth_year") {
          p.birth_year = json_int(v, where + ": birth_year");
          has_birth = true;
        } else if (k == "events") {
          if (!v.is_array()) throw DataError(where + ": events must be an array");
          for (const auto& e : v) {
            if (!e.is_array() || e.size() != 2 || !e[1].is_number()) {
              throw DataError(where + ": each event must be [code, age]");
            }
            p.events.push_back({json_int(e[0], where + ": event code"), e[1].get<double>()});
          }
          has_events = true;
        } else if (k == "labels") {
          if (!v.is_array()) throw DataError(where + ": labels must be an array");
          for (const auto& c : v) p.labels.push_back(json_int(c, where + ": label"));
          has_labels = true;
        } else {
          warn(where + ": unknown field '" + k + "' ignored");
        }
      }
    } catch (const nlohmann::json::exception& e) {
      throw DataError(where + ": " + e.what());
    }
    if (!has_id || !has_birth || !has_events || !has_labels) {
      throw DataError(where + ": person_id, birth_year, events and labels are required");
    }
    if (p.events.empty()) throw DataError(where + ": person " + std::to_string(p.person_id) + " has no events");
    for (std::size_t i = 0; i < p.events.size(); ++i) {
      if (p.events[i].code < 0) throw DataError(where + ": negative event code");
      if (!std::isfinite(p.events[i].age) || p.events[i].age < 0) throw DataError(where + ": invalid event age");
      if (i > 0 && p.events[i].age < p.events[i - 1].age) throw DataError(where + ": events are not in time order");
    }
    if (!std::is_sorted(p.labels.begin(), p.labels.end()) ||
        std::adjacent_find(p.labels.begin(), p.labels.end()) != p.labels.end()) {
      std::sort(p.labels.begin(), p.labels.end());
      p.labels.erase(std::unique(p.labels.begin(), p.labels.end()), p.labels.end());
    }
    out.push_back(std::move(p));
  }
  return out;
}

std::vector<PersonRecord> load_jsonl(const std::filesystem::path& path, std::vector<std::string>* warnings) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw NotFoundError("cannot open dataset " + path.string());
  return read_jsonl(in, warnings);
}

}  // namespace evolve
