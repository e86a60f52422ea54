#include "evolve/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <ostream>
#include <random>

#include "evolve/errors.hpp"
#include "evolve/parallel.hpp"

namespace evolve {

namespace {

struct Counts {
  std::size_t pos = 0, neg = 0;
};

Counts count_labels(std::span<const std::uint8_t> labels) {
  Counts c;
  for (auto y : labels) (y ? c.pos : c.neg)++;
  return c;
}

void check_binary(std::span<const double> scores, std::span<const std::uint8_t> labels, const char* what) {
  if (scores.size() != labels.size()) throw DimensionError(std::string(what) + ": scores and labels differ in length");
  const Counts c = count_labels(labels);
  if (c.pos == 0 || c.neg == 0) {
    throw MetricUndefinedError(std::string(what) + ": needs at least one positive and one negative");
  }
}

// Indices sorted by descending score.
std::vector<std::size_t> order_desc(std::span<const double> scores) {
  std::vector<std::size_t> idx(scores.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  return idx;
}

struct Column {
  std::vector<double> s;
  std::vector<std::uint8_t> y;
};

Column column(const ScoreMatrix& m, std::size_t c) {
  Column col;
  col.s.reserve(m.rows);
  col.y.reserve(m.rows);
  for (std::size_t i = 0; i < m.rows; ++i) {
    col.s.push_back(m.score(i, c));
    col.y.push_back(m.labels[i * m.classes + c]);
  }
  return col;
}

template <typename Binary>
double averaged(const ScoreMatrix& m, Averaging avg, std::vector<std::size_t>* excluded, Binary&& f,
                const char* what) {
  m.validate();
  if (avg == Averaging::micro) return f(std::span<const double>(m.scores), std::span<const std::uint8_t>(m.labels));
  double total = 0.0;
  std::size_t used = 0;
  for (std::size_t c = 0; c < m.classes; ++c) {
    const Column col = column(m, c);
    const Counts k = count_labels(col.y);
    if (k.pos == 0 || k.neg == 0) {
      if (excluded) excluded->push_back(c);
      continue;
    }
    total += f(std::span<const double>(col.s), std::span<const std::uint8_t>(col.y));
    ++used;
  }
  if (used == 0) throw MetricUndefinedError(std::string(what) + ": no class has both positives and negatives");
  return total / static_cast<double>(used);
}

// Per-row top-k membership, ties broken towards the lower class index.
std::vector<std::uint8_t> top_k_mask(const ScoreMatrix& m, const RecallOptions& opt) {
  const std::size_t usable = m.classes - (opt.exclude_class ? 1 : 0);
  if (opt.k == 0 || opt.k > usable) {
    throw ContractError("recall_at_k: k=" + std::to_string(opt.k) + " needs between 1 and " + std::to_string(usable) +
                        " rankable classes");
  }
  std::vector<std::uint8_t> mask(m.rows * m.classes, 0);
  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < m.rows; ++i) {
    idx.clear();
    for (std::size_t c = 0; c < m.classes; ++c) {
      if (!opt.exclude_class || *opt.exclude_class != c) idx.push_back(c);
    }
    std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(opt.k), idx.end(),
                      [&](std::size_t a, std::size_t b) {
                        const double sa = m.score(i, a), sb = m.score(i, b);
                        return sa != sb ? sa > sb : a < b;
                      });
    for (std::size_t r = 0; r < opt.k; ++r) mask[i * m.classes + idx[r]] = 1;
  }
  return mask;
}

std::mt19937_64 iteration_rng(std::uint64_t seed, std::uint64_t iter) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(iter), static_cast<std::uint32_t>(iter >> 32), 0x626f6fu};
  return std::mt19937_64(seq);
}

}  // namespace

ScoreMatrix::ScoreMatrix(std::size_t n, std::size_t c) : rows(n), classes(c), scores(n * c, 0.0), labels(n * c, 0) {}

void ScoreMatrix::validate() const {
  if (classes == 0) throw DimensionError("score matrix has no classes");
  if (scores.size() != rows * classes || labels.size() != rows * classes) {
    throw DimensionError("score matrix buffers do not match " + std::to_string(rows) + "x" + std::to_string(classes));
  }
  for (double s : scores) {
    if (!std::isfinite(s)) throw NumericError("score matrix contains a non-finite score");
  }
}

ScoreMatrix ScoreMatrix::take_rows(std::span<const std::size_t> picked) const {
  ScoreMatrix out(picked.size(), classes);
  for (std::size_t r = 0; r < picked.size(); ++r) {
    const std::size_t i = picked[r];
    if (i >= rows) throw IndexError("take_rows: row " + std::to_string(i) + " out of range");
    std::copy_n(scores.begin() + static_cast<std::ptrdiff_t>(i * classes), classes,
                out.scores.begin() + static_cast<std::ptrdiff_t>(r * classes));
    std::copy_n(labels.begin() + static_cast<std::ptrdiff_t>(i * classes), classes,
                out.labels.begin() + static_cast<std::ptrdiff_t>(r * classes));
  }
  return out;
}

double auroc_binary(std::span<const double> scores, std::span<const std::uint8_t> labels) {
  check_binary(scores, labels, "auroc");
  const std::size_t n = scores.size();
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  // Mann-Whitney with midranks
  double rank_sum = 0.0;
  std::size_t pos = 0;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j < n && scores[idx[j]] == scores[idx[i]]) ++j;
    const double midrank = 0.5 * static_cast<double>(i + 1 + j);  // mean of ranks i+1..j
    for (std::size_t t = i; t < j; ++t) {
      if (labels[idx[t]]) {
        rank_sum += midrank;
        ++pos;
      }
    }
    i = j;
  }
  const double p = static_cast<double>(pos), q = static_cast<double>(n - pos);
  return (rank_sum - p * (p + 1) / 2.0) / (p * q);
}

double average_precision_binary(std::span<const double> scores, std::span<const std::uint8_t> labels) {
  check_binary(scores, labels, "average precision");
  const auto idx = order_desc(scores);
  const double total_pos = static_cast<double>(count_labels(labels).pos);
  double tp = 0, fp = 0, prev_recall = 0, ap = 0;
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j < idx.size() && scores[idx[j]] == scores[idx[i]]) {
      (labels[idx[j]] ? tp : fp) += 1;
      ++j;
    }
    const double recall = tp / total_pos;
    ap += (recall - prev_recall) * (tp / (tp + fp));
    prev_recall = recall;
    i = j;
  }
  return ap;
}

double auroc(const ScoreMatrix& m, Averaging avg, std::vector<std::size_t>* excluded) {
  return averaged(m, avg, excluded, auroc_binary, "auroc");
}

double auprc(const ScoreMatrix& m, Averaging avg, std::vector<std::size_t>* excluded) {
  return averaged(m, avg, excluded, average_precision_binary, "auprc");
}

double recall_at_k(const ScoreMatrix& m, Averaging avg, const RecallOptions& opt) {
  m.validate();
  const auto mask = top_k_mask(m, opt);
  std::vector<double> found(m.classes, 0.0), total(m.classes, 0.0);
  for (std::size_t i = 0; i < m.rows; ++i) {
    for (std::size_t c = 0; c < m.classes; ++c) {
      if (opt.exclude_class && *opt.exclude_class == c) continue;
      if (m.label(i, c)) {
        total[c] += 1;
        found[c] += mask[i * m.classes + c];
      }
    }
  }
  if (avg == Averaging::micro) {
    const double t = std::accumulate(total.begin(), total.end(), 0.0);
    if (t == 0) throw MetricUndefinedError("recall_at_k: no positive labels");
    return std::accumulate(found.begin(), found.end(), 0.0) / t;
  }
  double sum = 0.0;
  std::size_t used = 0;
  for (std::size_t c = 0; c < m.classes; ++c) {
    if (total[c] == 0) continue;
    sum += found[c] / total[c];
    ++used;
  }
  if (used == 0) throw MetricUndefinedError("recall_at_k: no class has positives");
  return sum / static_cast<double>(used);
}

std::vector<BootstrapResult> bootstrap(const ScoreMatrix& m, const std::vector<MetricFn>& metrics,
                                       std::size_t iterations, std::uint64_t seed) {
  if (iterations < 2) throw ContractError("bootstrap needs at least 2 iterations");
  if (metrics.empty()) throw ContractError("bootstrap needs at least one metric");
  if (m.rows == 0) throw ContractError("bootstrap on an empty score matrix");
  m.validate();
  const std::size_t max_redraws = 100;
  std::vector<std::vector<double>> values(metrics.size(), std::vector<double>(iterations));
  std::vector<std::size_t> redrawn(iterations, 0);
  parallel_for(iterations, [&](std::size_t it) {
    std::mt19937_64 rng = iteration_rng(seed, it);
    std::uniform_int_distribution<std::size_t> pick(0, m.rows - 1);
    std::vector<std::size_t> rows(m.rows);
    for (std::size_t attempt = 0;; ++attempt) {
      for (auto& r : rows) r = pick(rng);
      const ScoreMatrix sample = m.take_rows(rows);
      try {
        std::vector<double> v(metrics.size());
        for (std::size_t k = 0; k < metrics.size(); ++k) v[k] = metrics[k](sample);
        for (std::size_t k = 0; k < metrics.size(); ++k) values[k][it] = v[k];
        return;
      } catch (const MetricUndefinedError&) {
        ++redrawn[it];
        if (attempt + 1 >= max_redraws) {
          throw MetricUndefinedError("bootstrap: metric undefined in " + std::to_string(max_redraws) +
                                     " consecutive resamples");
        }
      }
    }
  });
  const std::size_t total_redrawn = std::accumulate(redrawn.begin(), redrawn.end(), std::size_t{0});
  std::vector<BootstrapResult> out;
  for (const auto& v : values) {
    BootstrapResult r;
    r.iterations = iterations;
    r.redrawn = total_redrawn;
    r.mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(iterations);
    double ss = 0.0;
    for (double x : v) ss += (x - r.mean) * (x - r.mean);
    r.std = std::sqrt(ss / static_cast<double>(iterations - 1));
    out.push_back(r);
  }
  return out;
}

BootstrapResult bootstrap_std(const MetricFn& metric, const ScoreMatrix& m, std::size_t iterations,
                              std::uint64_t seed) {
  return bootstrap(m, {metric}, iterations, seed).front();
}

EvaluationRow evaluate_scores(const std::string& model, const ScoreMatrix& m, const EvaluationOptions& opt) {
  EvaluationRow row;
  row.model = model;
  const RecallOptions rk = opt.recall;
  std::vector<MetricFn> fns = {
      [](const ScoreMatrix& s) { return auroc(s, Averaging::micro); },
      [](const ScoreMatrix& s) { return auroc(s, Averaging::macro); },
      [](const ScoreMatrix& s) { return auprc(s, Averaging::micro); },
      [](const ScoreMatrix& s) { return auprc(s, Averaging::macro); },
      [rk](const ScoreMatrix& s) { return recall_at_k(s, Averaging::micro, rk); },
      [rk](const ScoreMatrix& s) { return recall_at_k(s, Averaging::macro, rk); },
  };
  MetricSummary* slots[] = {&row.auroc_micro, &row.auroc_macro,  &row.auprc_micro,
                            &row.auprc_macro, &row.recall_micro, &row.recall_macro};
  auroc(m, Averaging::macro, &row.excluded_classes);
  for (std::size_t k = 0; k < fns.size(); ++k) slots[k]->value = fns[k](m);
  if (opt.bootstrap_iterations >= 2) {
    const auto boot = bootstrap(m, fns, opt.bootstrap_iterations, opt.seed);
    for (std::size_t k = 0; k < fns.size(); ++k) slots[k]->std = boot[k].std;
    row.redrawn = boot.front().redrawn;
  }
  return row;
}

std::vector<ClassRow> per_class_table(const ScoreMatrix& m, const std::vector<std::string>& names,
                                      const RecallOptions& opt) {
  m.validate();
  if (!names.empty() && names.size() != m.classes) throw DimensionError("class name count does not match classes");
  const auto mask = top_k_mask(m, opt);
  std::vector<ClassRow> out;
  for (std::size_t c = 0; c < m.classes; ++c) {
    ClassRow r;
    r.cls = c;
    r.name = names.empty() ? std::to_string(c) : names[c];
    const Column col = column(m, c);
    const Counts k = count_labels(col.y);
    r.positives = k.pos;
    r.prevalence = m.rows ? static_cast<double>(k.pos) / static_cast<double>(m.rows) : 0.0;
    if (k.pos && k.neg) r.auroc = auroc_binary(col.s, col.y);
    if (k.pos && !(opt.exclude_class && *opt.exclude_class == c)) {
      double found = 0;
      for (std::size_t i = 0; i < m.rows; ++i) {
        if (col.y[i]) found += mask[i * m.classes + c];
      }
      r.recall_at_k = found / static_cast<double>(k.pos);
    }
    out.push_back(std::move(r));
  }
  return out;
}

void write_summary_csv(std::ostream& out, const std::vector<EvaluationRow>& rows, std::size_t k) {
  const std::string rk = "recall" + std::to_string(k);
  out << "model,auroc_micro,auroc_micro_std,auroc_macro,auroc_macro_std,auprc_micro,auprc_micro_std,"
         "auprc_macro,auprc_macro_std,"
      << rk << "_micro," << rk << "_micro_std," << rk << "_macro," << rk << "_macro_std\n";
  out.precision(6);
  out << std::fixed;
  for (const auto& r : rows) {
    out << r.model;
    for (const MetricSummary* s : {&r.auroc_micro, &r.auroc_macro, &r.auprc_micro, &r.auprc_macro, &r.recall_micro,
                                   &r.recall_macro}) {
      out << ',' << s->value << ',' << s->std;
    }
    out << '\n';
  }
  out.unsetf(std::ios::floatfield);
}

void write_per_class_csv(std::ostream& out, const std::vector<ClassRow>& rows, std::size_t k) {
  out << "class,auroc,recall" << k << ",prevalence,positives\n";
  out.precision(6);
  out << std::fixed;
  for (const auto& r : rows) {
    out << r.name << ',';
    if (r.auroc) out << *r.auroc;
    out << ',';
    if (r.recall_at_k) out << *r.recall_at_k;
    out << ',' << r.prevalence << ',' << r.positives << '\n';
  }
  out.unsetf(std::ios::floatfield);
}

}  // namespace evolve
