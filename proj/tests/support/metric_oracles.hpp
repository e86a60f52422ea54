#pragma once

// Slow reference implementations used to check the metrics module.

#include <algorithm>
#include <optional>
#include <random>
#include <set>
#include <vector>

#include "evolve/metrics.hpp"

namespace evolve::testing {

// ties=true draws scores from a coarse grid so equal scores are common.
inline ScoreMatrix random_instance(std::mt19937_64& rng, std::size_t n, std::size_t c, bool ties) {
  ScoreMatrix m(n, c);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::uniform_int_distribution<int> grid(0, 4);
  const double p = 0.3 + 0.2 * u(rng);
  for (std::size_t i = 0; i < n * c; ++i) {
    m.scores[i] = ties ? grid(rng) / 4.0 : u(rng);
    m.labels[i] = u(rng) < p;
  }
  return m;
}

inline std::optional<double> pairwise_auroc(const std::vector<double>& s, const std::vector<std::uint8_t>& y) {
  double good = 0.0, pairs = 0.0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (!y[i]) continue;
    for (std::size_t j = 0; j < s.size(); ++j) {
      if (y[j]) continue;
      pairs += 1;
      if (s[i] > s[j]) good += 1;
      else if (s[i] == s[j]) good += 0.5;
    }
  }
  if (pairs == 0) return std::nullopt;
  return good / pairs;
}

inline std::optional<double> sweep_average_precision(const std::vector<double>& s, const std::vector<std::uint8_t>& y) {
  std::size_t P = 0, N = 0;
  for (auto v : y) (v ? P : N) += 1;
  if (P == 0 || N == 0) return std::nullopt;
  std::set<double, std::greater<>> thresholds(s.begin(), s.end());
  double ap = 0.0, prev_recall = 0.0;
  for (double t : thresholds) {
    std::size_t tp = 0, flagged = 0;
    for (std::size_t i = 0; i < s.size(); ++i) {
      if (s[i] >= t) {
        ++flagged;
        tp += y[i];
      }
    }
    const double recall = static_cast<double>(tp) / P;
    ap += (recall - prev_recall) * static_cast<double>(tp) / flagged;
    prev_recall = recall;
  }
  return ap;
}

inline std::pair<std::vector<double>, std::vector<std::uint8_t>> column(const ScoreMatrix& m, std::size_t c) {
  std::vector<double> s;
  std::vector<std::uint8_t> y;
  for (std::size_t i = 0; i < m.rows; ++i) {
    s.push_back(m.score(i, c));
    y.push_back(m.label(i, c));
  }
  return {s, y};
}

inline std::optional<double> pairwise_auroc(const ScoreMatrix& m, std::size_t c) {
  const auto [s, y] = column(m, c);
  return pairwise_auroc(s, y);
}
inline std::optional<double> pairwise_auroc_flat(const ScoreMatrix& m) {
  return pairwise_auroc(m.scores, m.labels);
}
inline std::optional<double> sweep_average_precision(const ScoreMatrix& m, std::size_t c) {
  const auto [s, y] = column(m, c);
  return sweep_average_precision(s, y);
}
inline std::optional<double> sweep_average_precision_flat(const ScoreMatrix& m) {
  return sweep_average_precision(m.scores, m.labels);
}

struct RecallOracle {
  std::optional<double> micro, macro;
};

inline RecallOracle enumerated_recall(const ScoreMatrix& m, std::size_t k, std::optional<std::size_t> ex) {
  std::vector<double> hit(m.classes, 0), pos(m.classes, 0);
  for (std::size_t i = 0; i < m.rows; ++i) {
    for (std::size_t c = 0; c < m.classes; ++c) {
      if (ex && *ex == c) continue;
      if (!m.label(i, c)) continue;
      std::size_t rank = 0;
      for (std::size_t d = 0; d < m.classes; ++d) {
        if (d == c || (ex && *ex == d)) continue;
        if (m.score(i, d) > m.score(i, c) || (m.score(i, d) == m.score(i, c) && d < c)) ++rank;
      }
      pos[c] += 1;
      if (rank < k) hit[c] += 1;
    }
  }
  RecallOracle out;
  double h = 0, p = 0, sum = 0;
  std::size_t used = 0;
  for (std::size_t c = 0; c < m.classes; ++c) {
    h += hit[c];
    p += pos[c];
    if (pos[c] > 0) {
      sum += hit[c] / pos[c];
      ++used;
    }
  }
  if (p > 0) out.micro = h / p;
  if (used > 0) out.macro = sum / used;
  return out;
}

}  // namespace evolve::testing
