#include "evolve/trajectory.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <limits>
#include <map>
#include <ostream>
#include <sstream>

#include "evolve/errors.hpp"
#include "evolve/parallel.hpp"

namespace evolve {

namespace {

double dot(std::span<const double> u, std::span<const double> v) {
  double s = 0.0;
  for (std::size_t i = 0; i < u.size(); ++i) s += u[i] * v[i];
  return s;
}

void normalize(std::vector<double>& v, const char* what) {
  const double n = std::sqrt(dot(v, v));
  if (!(n > 0.0) || !std::isfinite(n)) throw NumericError(std::string(what) + ": vector cannot be normalized");
  for (double& x : v) x /= n;
}

bool ranks_before(const Neighbor& a, const Neighbor& b) {
  return a.cosine != b.cosine ? a.cosine > b.cosine : a.id < b.id;
}

std::vector<Neighbor> top_k(std::vector<Neighbor> all, std::size_t k) {
  k = std::min(k, all.size());
  std::partial_sort(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(k), all.end(), ranks_before);
  all.resize(k);
  return all;
}

void require_evolve(const EvolveModel<float>& model, const char* what) {
  if (model.config().mode != ModelMode::evolve) {
    throw ContractError(std::string(what) + " needs an evolve-mode (causal) model");
  }
}

std::string fmt(double v) {
  std::ostringstream s;
  s << std::setprecision(10) << v;
  return s.str();
}

}  // namespace

const std::vector<double>& AgeEmbeddingMap::at(int age) const {
  if (!has(age)) {
    throw NotFoundError("person " + std::to_string(person_id) + " has no embedding at age " + std::to_string(age));
  }
  return vectors[static_cast<std::size_t>(age - first_age)];
}

std::vector<double> pwm_pool(std::span<const std::vector<double>> embeddings) {
  if (embeddings.empty()) throw ContractError("pwm_pool needs at least one embedding");
  const std::size_t d = embeddings.front().size();
  std::vector<double> out(d, 0.0);
  double total = 0.0;
  for (std::size_t i = 0; i < embeddings.size(); ++i) {
    if (embeddings[i].size() != d) throw ContractError("pwm_pool: embeddings differ in length");
    const double w = static_cast<double>(i + 1);
    for (std::size_t j = 0; j < d; ++j) out[j] += w * embeddings[i][j];
    total += w;
  }
  for (double& x : out) x /= total;
  normalize(out, "pwm_pool");
  return out;
}

double cosine(std::span<const double> u, std::span<const double> v) {
  if (u.size() != v.size()) throw DimensionError("cosine of vectors with different lengths");
  const double nu = std::sqrt(dot(u, u)), nv = std::sqrt(dot(v, v));
  if (!(nu > 0.0) || !(nv > 0.0)) throw NumericError("cosine of a zero vector");
  return dot(u, v) / (nu * nv);
}

AgeEmbeddingMap build_age_embeddings(std::uint64_t person_id, const InputSequence& seq,
                                     const EvolveModel<float>& model) {
  require_evolve(model, "build_age_embeddings");
  if (seq.codes.empty()) throw DataError("person " + std::to_string(person_id) + " has no events");
  const Tensor<float> h = model.position_embeddings(seq);
  const std::size_t d = h.dim(1);
  AgeEmbeddingMap map;
  map.person_id = person_id;
  map.first_age = seq.ages.front();
  std::vector<std::vector<double>> group;
  auto flush = [&](int age) {
    // copy the previous age forward over gaps
    while (!map.vectors.empty() && map.last_age() < age - 1) map.vectors.push_back(map.vectors.back());
    map.vectors.push_back(pwm_pool(group));
    group.clear();
  };
  for (std::size_t t = 0; t < seq.codes.size(); ++t) {
    if (t > 0 && seq.ages[t] < seq.ages[t - 1]) throw DataError("ages must be non-decreasing");
    if (t > 0 && seq.ages[t] != seq.ages[t - 1]) flush(seq.ages[t - 1]);
    group.emplace_back(h.values().begin() + static_cast<std::ptrdiff_t>(t * d),
                       h.values().begin() + static_cast<std::ptrdiff_t>((t + 1) * d));
  }
  flush(seq.ages.back());
  return map;
}

std::vector<AgeEmbeddingMap> build_age_embeddings(std::span<const std::uint64_t> ids,
                                                  std::span<const InputSequence> seqs,
                                                  const EvolveModel<float>& model) {
  if (ids.size() != seqs.size()) throw DimensionError("ids and sequences differ in count");
  std::vector<AgeEmbeddingMap> out(ids.size());
  parallel_for(ids.size(), [&](std::size_t i) { out[i] = build_age_embeddings(ids[i], seqs[i], model); });
  return out;
}

std::size_t pool_size(std::uint64_t target, int age, std::span<const AgeEmbeddingMap> references) {
  std::size_t n = 0;
  for (const auto& r : references) n += r.person_id != target && r.has(age);
  return n;
}

NeighborSet neighbors(const AgeEmbeddingMap& target, int age, std::span<const AgeEmbeddingMap> references,
                      std::size_t k) {
  if (k == 0) throw ContractError("neighbors: k must be positive");
  const auto& z = target.at(age);
  std::vector<Neighbor> all;
  for (const auto& r : references) {
    if (r.person_id == target.person_id || !r.has(age)) continue;
    all.push_back({r.person_id, dot(z, r.at(age))});
  }
  if (all.empty()) throw NotFoundError("no reference person has an embedding at age " + std::to_string(age));
  NeighborSet s;
  s.target = target.person_id;
  s.age = age;
  s.k = k;
  s.members = top_k(std::move(all), k);
  return s;
}

double rate_of_change(const AgeEmbeddingMap& target, int age, std::size_t k,
                      std::span<const AgeEmbeddingMap> references) {
  if (k == 0) throw ContractError("rate_of_change: k must be positive");
  if (!target.has(age - 1) || !target.has(age)) {
    throw NotFoundError("person " + std::to_string(target.person_id) + " lacks ages " + std::to_string(age - 1) +
                        " and " + std::to_string(age));
  }
  const std::size_t kk =
      std::min({k, pool_size(target.person_id, age - 1, references), pool_size(target.person_id, age, references)});
  if (kk == 0) throw NotFoundError("empty reference pool around age " + std::to_string(age));
  const auto before = neighbors(target, age - 1, references, kk);
  const auto now = neighbors(target, age, references, kk);
  std::vector<std::uint64_t> a, b;
  for (const auto& n : before.members) a.push_back(n.id);
  for (const auto& n : now.members) b.push_back(n.id);
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  std::vector<std::uint64_t> both;
  std::set_intersection(a.begin(), a.end(), b.begin(), b.end(), std::back_inserter(both));
  return 1.0 - static_cast<double>(both.size()) / static_cast<double>(kk);
}

ChangeCurve cohort_change_curve(std::span<const AgeEmbeddingMap> group, int first_age, int last_age,
                                std::size_t k, std::span<const AgeEmbeddingMap> references) {
  if (last_age < first_age) throw ContractError("change curve: empty age range");
  const std::size_t n_ages = static_cast<std::size_t>(last_age - first_age + 1);
  std::vector<ChangePoint> points(n_ages);
  parallel_for(n_ages, [&](std::size_t i) {
    const int a = first_age + static_cast<int>(i);
    ChangePoint p;
    p.age = a;
    double sum = 0.0;
    for (const auto& m : group) {
      if (!m.has(a - 1) || !m.has(a)) continue;
      if (pool_size(m.person_id, a - 1, references) == 0 || pool_size(m.person_id, a, references) == 0) continue;
      sum += rate_of_change(m, a, k, references);
      ++p.n;
    }
    p.mean_rate = p.n ? sum / static_cast<double>(p.n) : 0.0;
    points[i] = p;
  });
  ChangeCurve out;
  for (const auto& p : points) {
    if (p.n) out.points.push_back(p);
    else out.omitted_ages.push_back(p.age);
  }
  return out;
}

JumpThresholds calibrate_jumps(std::span<const PredictionSeries> series,
                               std::span<const std::vector<std::uint8_t>> labels) {
  if (series.size() != labels.size()) throw DimensionError("calibrate_jumps: series and labels differ in count");
  if (series.empty()) throw ContractError("calibrate_jumps needs at least one person");
  const std::size_t C = series.front().classes;
  std::vector<double> sum(C, 0.0);
  JumpThresholds out;
  out.counts.assign(C, 0);
  for (std::size_t n = 0; n < series.size(); ++n) {
    const auto& s = series[n];
    if (s.classes != C || labels[n].size() != C) throw DimensionError("calibrate_jumps: class count mismatch");
    if (s.rows < 2) continue;
    for (std::size_t c = 0; c < C; ++c) {
      if (!labels[n][c]) continue;
      double best = -std::numeric_limits<double>::infinity();
      for (std::size_t t = 1; t < s.rows; ++t) best = std::max(best, s.at(t, c) - s.at(t - 1, c));
      sum[c] += best;
      ++out.counts[c];
    }
  }
  out.mean_max_jump.resize(C);
  for (std::size_t c = 0; c < C; ++c) {
    if (out.counts[c]) out.mean_max_jump[c] = sum[c] / static_cast<double>(out.counts[c]);
  }
  return out;
}

std::vector<JumpEvent> detect_jumps(std::span<const std::uint64_t> ids, std::span<const PredictionSeries> series,
                                    std::span<const InputSequence> seqs, const JumpThresholds& thresholds) {
  if (ids.size() != series.size() || seqs.size() != series.size()) {
    throw DimensionError("detect_jumps: ids, series and sequences differ in count");
  }
  std::vector<JumpEvent> out;
  for (std::size_t n = 0; n < series.size(); ++n) {
    const auto& s = series[n];
    if (s.rows != seqs[n].codes.size()) {
      throw DimensionError("detect_jumps: person " + std::to_string(ids[n]) + " has " + std::to_string(s.rows) +
                           " prediction rows for " + std::to_string(seqs[n].codes.size()) + " codes");
    }
    if (s.classes != thresholds.mean_max_jump.size()) throw DimensionError("detect_jumps: class count mismatch");
    for (std::size_t t = 1; t < s.rows; ++t) {
      for (std::size_t c = 0; c < s.classes; ++c) {
        if (!thresholds.mean_max_jump[c]) continue;
        const double thr = std::max(*thresholds.mean_max_jump[c], 1e-6);
        const double before = s.at(t - 1, c), after = s.at(t, c);
        if (after - before < thr) continue;
        out.push_back({ids[n], c, seqs[n].codes[t] - kFirstCodeToken, before, after, seqs[n].ages[t], seqs[n].t2f[t], t});
      }
    }
  }
  return out;
}

std::vector<JumpTableRow> aggregate_jumps(const std::vector<JumpEvent>& events) {
  std::map<std::pair<std::size_t, int>, JumpTableRow> acc;
  std::map<std::size_t, std::size_t> per_class;
  for (const auto& e : events) {
    auto& r = acc[{e.cls, e.code}];
    r.cls = e.cls;
    r.code = e.code;
    ++r.count;
    r.mean_age += e.age;
    r.mean_t2f += e.t2f;
    ++per_class[e.cls];
  }
  std::vector<JumpTableRow> rows;
  for (auto& [key, r] : acc) {
    r.mean_age /= static_cast<double>(r.count);
    r.mean_t2f /= static_cast<double>(r.count);
    r.percent = 100.0 * static_cast<double>(r.count) / static_cast<double>(per_class[r.cls]);
    rows.push_back(r);
  }
  std::sort(rows.begin(), rows.end(), [](const JumpTableRow& a, const JumpTableRow& b) {
    if (a.cls != b.cls) return a.cls < b.cls;
    if (a.count != b.count) return a.count > b.count;
    return a.code < b.code;
  });
  return rows;
}

ClassSimilarity class_representative_similarity(const AgeEmbeddingMap& target,
                                                std::span<const AgeEmbeddingMap> references,
                                                std::span<const std::vector<std::uint8_t>> reference_labels,
                                                std::size_t k) {
  if (k == 0) throw ContractError("class similarity: k must be positive");
  if (references.size() != reference_labels.size()) throw DimensionError("references and labels differ in count");
  if (target.empty()) throw ContractError("class similarity: target has no embeddings");
  const std::size_t C = reference_labels.empty() ? 0 : reference_labels.front().size();
  ClassSimilarity out;
  for (std::size_t c = 0; c < C; ++c) {
    bool any = false;
    for (std::size_t i = 0; i < references.size() && !any; ++i) {
      if (reference_labels[i].size() != C) throw DimensionError("class similarity: ragged labels");
      any = reference_labels[i][c] && references[i].person_id != target.person_id;
    }
    (any ? out.classes : out.omitted_classes).push_back(c);
  }
  std::vector<bool> short_class(C, false);
  for (int a = target.first_age; a <= target.last_age(); ++a) {
    const auto& z = target.at(a);
    out.ages.push_back(a);
    auto& row = out.values.emplace_back();
    for (std::size_t c : out.classes) {
      std::vector<Neighbor> cand;
      std::vector<std::size_t> index;
      for (std::size_t i = 0; i < references.size(); ++i) {
        const auto& r = references[i];
        if (!reference_labels[i][c] || r.person_id == target.person_id || !r.has(a)) continue;
        cand.push_back({static_cast<std::uint64_t>(i), dot(z, r.at(a))});
      }
      if (cand.size() < k) short_class[c] = true;
      if (cand.empty()) {
        row.emplace_back();
        continue;
      }
      // ids here are reference indices; order ties by person id instead
      std::sort(cand.begin(), cand.end(), [&](const Neighbor& x, const Neighbor& y) {
        if (x.cosine != y.cosine) return x.cosine > y.cosine;
        return references[x.id].person_id < references[y.id].person_id;
      });
      cand.resize(std::min(k, cand.size()));
      std::vector<double> mean(z.size(), 0.0);
      for (const auto& n : cand) {
        const auto& v = references[n.id].at(a);
        for (std::size_t j = 0; j < mean.size(); ++j) mean[j] += v[j];
      }
      for (double& x : mean) x /= static_cast<double>(cand.size());
      normalize(mean, "class representative mean");
      row.emplace_back(dot(z, mean));
    }
  }
  for (std::size_t c = 0; c < C; ++c) {
    if (short_class[c]) out.short_classes.push_back(c);
  }
  return out;
}

SigmoidTrajectory sigmoid_trajectory(const InputSequence& seq, const EvolveModel<float>& model) {
  require_evolve(model, "sigmoid_trajectory");
  const PredictionSeries s = model.predict(seq);
  SigmoidTrajectory out;
  for (std::size_t t = 0; t < s.rows; ++t) {
    if (t + 1 < s.rows && seq.ages[t + 1] == seq.ages[t]) continue;
    out.ages.push_back(seq.ages[t]);
    const auto r = s.row(t);
    out.sigmoids.emplace_back(r.begin(), r.end());
  }
  return out;
}

void write_trajectory_csv(std::ostream& out, const SigmoidTrajectory& t, const std::vector<std::string>& class_names,
                          const std::vector<std::optional<double>>& rates) {
  if (!rates.empty() && rates.size() != t.ages.size()) throw DimensionError("one rate per age expected");
  out << "age";
  for (const auto& n : class_names) out << ',' << n;
  if (!rates.empty()) out << ",rate_of_change";
  out << '\n';
  for (std::size_t i = 0; i < t.ages.size(); ++i) {
    if (t.sigmoids[i].size() != class_names.size()) throw DimensionError("class names do not match the trajectory");
    out << t.ages[i];
    for (double v : t.sigmoids[i]) out << ',' << fmt(v);
    if (!rates.empty()) {
      out << ',';
      if (rates[i]) out << fmt(*rates[i]);
    }
    out << '\n';
  }
}

void write_jump_table_csv(std::ostream& out, const std::vector<JumpTableRow>& rows,
                          const std::vector<std::string>& class_names) {
  out << "class,code,count,percent,mean_age,mean_t2f\n";
  for (const auto& r : rows) {
    out << (r.cls < class_names.size() ? class_names[r.cls] : std::to_string(r.cls)) << ',' << r.code << ','
        << r.count << ',' << fmt(r.percent) << ',' << fmt(r.mean_age) << ',' << fmt(r.mean_t2f) << '\n';
  }
}

void write_change_curve_csv(std::ostream& out, const ChangeCurve& curve) {
  out << "age,mean_r,n\n";
  for (const auto& p : curve.points) out << p.age << ',' << fmt(p.mean_rate) << ',' << p.n << '\n';
}

void write_similarity_csv(std::ostream& out, const ClassSimilarity& s, const std::vector<std::string>& class_names) {
  out << "age";
  for (std::size_t c : s.classes) out << ',' << (c < class_names.size() ? class_names[c] : std::to_string(c));
  out << '\n';
  for (std::size_t i = 0; i < s.ages.size(); ++i) {
    out << s.ages[i];
    for (const auto& v : s.values[i]) {
      out << ',';
      if (v) out << fmt(*v);
    }
    out << '\n';
  }
}

}  // namespace evolve
