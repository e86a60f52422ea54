#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <sstream>

#include "evolve/errors.hpp"
#include "evolve/metrics.hpp"
#include "support/metric_oracles.hpp"

namespace evolve {
namespace {

using testing::random_instance;

TEST(Auroc, HandCases) {
  const std::vector<double> s{0.1, 0.4, 0.35, 0.8};
  const std::vector<std::uint8_t> y{0, 0, 1, 1};
  EXPECT_DOUBLE_EQ(auroc_binary(s, y), 0.75);
  const std::vector<double> perfect{0.1, 0.2, 0.3, 0.4};
  EXPECT_DOUBLE_EQ(auroc_binary(perfect, y), 1.0);
  const std::vector<double> flat(4, 0.3);
  EXPECT_DOUBLE_EQ(auroc_binary(flat, y), 0.5);
  const std::vector<std::uint8_t> all_pos(4, 1);
  EXPECT_THROW(auroc_binary(s, all_pos), MetricUndefinedError);
}

TEST(Auroc, MatchesPairwiseOracle) {
  std::mt19937_64 rng(1);
  for (int rep = 0; rep < 200; ++rep) {
    const auto m = random_instance(rng, 2 + rng() % 49, 1 + rng() % 6, rep % 2 == 0);
    std::vector<std::size_t> skipped;
    double macro_oracle = 0.0;
    std::size_t used = 0;
    for (std::size_t c = 0; c < m.classes; ++c) {
      const auto o = testing::pairwise_auroc(m, c);
      if (o) {
        macro_oracle += *o;
        ++used;
      }
    }
    if (used == 0) {
      EXPECT_THROW(auroc(m, Averaging::macro), MetricUndefinedError);
      continue;
    }
    EXPECT_NEAR(auroc(m, Averaging::macro, &skipped), macro_oracle / used, 1e-12);
    EXPECT_EQ(skipped.size(), m.classes - used);
    const auto micro = testing::pairwise_auroc_flat(m);
    if (micro) EXPECT_NEAR(auroc(m, Averaging::micro), *micro, 1e-12);
  }
}

TEST(Auroc, MonotoneInvariance) {
  std::mt19937_64 rng(2);
  for (int rep = 0; rep < 50; ++rep) {
    auto m = random_instance(rng, 40, 3, false);
    double base;
    try {
      base = auroc(m, Averaging::macro);
    } catch (const MetricUndefinedError&) {
      continue;
    }
    ScoreMatrix e = m, a = m, neg = m;
    for (auto& v : e.scores) v = std::exp(v);
    for (auto& v : a.scores) v = 3.0 * v - 7.0;
    for (auto& v : neg.scores) v = -v;
    EXPECT_NEAR(auroc(e, Averaging::macro), base, 1e-12);
    EXPECT_NEAR(auroc(a, Averaging::macro), base, 1e-12);
    // tie-free continuous scores: flipping the sign mirrors the curve
    EXPECT_NEAR(auroc(neg, Averaging::macro) + base, 1.0, 1e-12);
  }
}

TEST(Auroc, MicroEqualsMacroForOneClass) {
  std::mt19937_64 rng(3);
  for (int rep = 0; rep < 20; ++rep) {
    const auto m = random_instance(rng, 30, 1, false);
    try {
      EXPECT_NEAR(auroc(m, Averaging::micro), auroc(m, Averaging::macro), 1e-15);
      EXPECT_NEAR(auprc(m, Averaging::micro), auprc(m, Averaging::macro), 1e-15);
    } catch (const MetricUndefinedError&) {
    }
  }
}

TEST(Auprc, HandCases) {
  const std::vector<std::uint8_t> y{1, 1, 0, 0, 0};
  const std::vector<double> first{0.9, 0.8, 0.3, 0.2, 0.1};
  EXPECT_DOUBLE_EQ(average_precision_binary(first, y), 1.0);
  for (std::size_t k = 1; k <= 6; ++k) {
    std::vector<double> s(6);
    std::vector<std::uint8_t> one(6, 0);
    for (std::size_t i = 0; i < 6; ++i) s[i] = 10.0 - static_cast<double>(i);
    one[k - 1] = 1;
    EXPECT_NEAR(average_precision_binary(s, one), 1.0 / static_cast<double>(k), 1e-15);
  }
}

TEST(Auprc, MatchesSweepOracle) {
  std::mt19937_64 rng(4);
  for (int rep = 0; rep < 200; ++rep) {
    const auto m = random_instance(rng, 2 + rng() % 49, 1 + rng() % 6, rep % 3 != 0);
    double sum = 0.0;
    std::size_t used = 0;
    for (std::size_t c = 0; c < m.classes; ++c) {
      const auto o = testing::sweep_average_precision(m, c);
      if (o) {
        sum += *o;
        ++used;
      }
    }
    if (used == 0) continue;
    EXPECT_NEAR(auprc(m, Averaging::macro), sum / used, 1e-12);
    const auto micro = testing::sweep_average_precision_flat(m);
    if (micro) EXPECT_NEAR(auprc(m, Averaging::micro), *micro, 1e-12);
  }
}

TEST(RecallAtK, HandCases) {
  ScoreMatrix m(1, 6);
  m.scores = {0.9, 0.8, 0.7, 0.6, 0.5, 0.4};
  m.labels = {0, 0, 0, 0, 1, 0};  // true class ranked 5th
  EXPECT_DOUBLE_EQ(recall_at_k(m, Averaging::micro), 0.0);
  ScoreMatrix four(3, 4);
  std::mt19937_64 rng(5);
  for (auto& s : four.scores) s = std::uniform_real_distribution<double>(0, 1)(rng);
  four.labels = {1, 0, 1, 0, 0, 1, 0, 0, 1, 1, 1, 1};
  EXPECT_DOUBLE_EQ(recall_at_k(four, Averaging::micro), 1.0);
  EXPECT_DOUBLE_EQ(recall_at_k(four, Averaging::macro), 1.0);
  // ties go to the lower class index
  ScoreMatrix tie(1, 5);
  tie.scores = {0.5, 0.5, 0.5, 0.5, 0.5};
  tie.labels = {0, 0, 0, 0, 1};
  EXPECT_DOUBLE_EQ(recall_at_k(tie, Averaging::micro), 0.0);
  tie.labels = {0, 0, 0, 1, 0};
  EXPECT_DOUBLE_EQ(recall_at_k(tie, Averaging::micro), 1.0);
  EXPECT_THROW(recall_at_k(tie, Averaging::micro, {6, std::nullopt}), ContractError);
}

TEST(RecallAtK, MatchesEnumerationOracle) {
  std::mt19937_64 rng(6);
  for (int rep = 0; rep < 200; ++rep) {
    const std::size_t C = 4 + rng() % 3;
    const auto m = random_instance(rng, 1 + rng() % 50, C, rep % 2 == 0);
    for (std::optional<std::size_t> ex : {std::optional<std::size_t>{}, std::optional<std::size_t>{C - 1}}) {
      const std::size_t k = std::min<std::size_t>(4, ex ? C - 1 : C);
      const RecallOptions opt{k, ex};
      const auto o = testing::enumerated_recall(m, k, ex);
      if (!o.micro) {
        EXPECT_THROW(recall_at_k(m, Averaging::micro, opt), MetricUndefinedError);
        continue;
      }
      EXPECT_NEAR(recall_at_k(m, Averaging::micro, opt), *o.micro, 1e-12);
      EXPECT_NEAR(recall_at_k(m, Averaging::macro, opt), *o.macro, 1e-12);
    }
  }
}

TEST(Metrics, AllInUnitInterval) {
  std::mt19937_64 rng(7);
  for (int rep = 0; rep < 100; ++rep) {
    const auto m = random_instance(rng, 30, 5, rep % 2 == 0);
    for (Averaging a : {Averaging::micro, Averaging::macro}) {
      try {
        for (double v : {auroc(m, a), auprc(m, a), recall_at_k(m, a)}) {
          EXPECT_GE(v, 0.0);
          EXPECT_LE(v, 1.0);
        }
      } catch (const MetricUndefinedError&) {
      }
    }
  }
}

ScoreMatrix synthetic_scores(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> noise(0.0, 1.0);
  ScoreMatrix m(n, 3);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t c = 0; c < 3; ++c) {
      const bool y = std::uniform_real_distribution<double>(0, 1)(rng) < 0.3;
      m.labels[i * 3 + c] = y;
      m.scores[i * 3 + c] = noise(rng) + (y ? 1.0 : 0.0);
    }
  }
  return m;
}

TEST(Bootstrap, DeterministicAndShrinksWithN) {
  const MetricFn macro = [](const ScoreMatrix& s) { return auroc(s, Averaging::macro); };
  const auto small = synthetic_scores(1000, 1);
  const auto big = synthetic_scores(4000, 2);
  const auto a = bootstrap_std(macro, small, 1000, 9);
  const auto b = bootstrap_std(macro, small, 1000, 9);
  EXPECT_EQ(a.mean, b.mean);
  EXPECT_EQ(a.std, b.std);
  EXPECT_GT(a.std, 0.0);
  const auto c = bootstrap_std(macro, big, 1000, 9);
  const double ratio = c.std / a.std;
  EXPECT_GE(ratio, 0.35);
  EXPECT_LE(ratio, 0.65);
}

TEST(Bootstrap, ConstantMetricAndRedraws) {
  const auto m = synthetic_scores(50, 3);
  const auto flat = bootstrap_std([](const ScoreMatrix&) { return 0.7; }, m, 100, 1);
  EXPECT_NEAR(flat.mean, 0.7, 1e-12);
  EXPECT_NEAR(flat.std, 0.0, 1e-12);
  EXPECT_THROW(bootstrap_std([](const ScoreMatrix&) { return 0.7; }, m, 1, 1), ContractError);

  // one positive among 20 rows: many resamples miss it and must be redrawn
  ScoreMatrix rare(20, 1);
  for (std::size_t i = 0; i < 20; ++i) rare.scores[i] = static_cast<double>(i);
  rare.labels[19] = 1;
  const auto r = bootstrap_std([](const ScoreMatrix& s) { return auroc(s, Averaging::micro); }, rare, 200, 4);
  EXPECT_GT(r.redrawn, 0u);
  EXPECT_NEAR(r.mean, 1.0, 1e-12);
}

TEST(Evaluate, SummaryAndPerClassCsv) {
  const auto m = synthetic_scores(200, 5);
  ScoreMatrix m4(200, 4);
  for (std::size_t i = 0; i < 200; ++i) {
    for (std::size_t c = 0; c < 3; ++c) {
      m4.scores[i * 4 + c] = m.score(i, c);
      m4.labels[i * 4 + c] = m.labels[i * 3 + c];
    }
    m4.scores[i * 4 + 3] = 0.1;  // class without positives
  }
  EvaluationOptions opt;
  opt.bootstrap_iterations = 50;
  const auto row = evaluate_scores("evolve", m4, opt);
  EXPECT_EQ(row.excluded_classes, (std::vector<std::size_t>{3}));
  EXPECT_GT(row.auroc_macro.std, 0.0);
  std::ostringstream s;
  write_summary_csv(s, {row});
  EXPECT_EQ(s.str().substr(0, s.str().find('\n')),
            "model,auroc_micro,auroc_micro_std,auroc_macro,auroc_macro_std,auprc_micro,auprc_micro_std,"
            "auprc_macro,auprc_macro_std,recall4_micro,recall4_micro_std,recall4_macro,recall4_macro_std");
  const auto table = per_class_table(m4, {"a", "b", "c", "none"});
  ASSERT_EQ(table.size(), 4u);
  EXPECT_FALSE(table[3].auroc.has_value());
  std::vector<double> col;
  std::vector<std::uint8_t> ycol;
  for (std::size_t i = 0; i < 200; ++i) {
    col.push_back(m.score(i, 0));
    ycol.push_back(m.labels[i * 3]);
  }
  EXPECT_DOUBLE_EQ(*table[0].auroc, auroc_binary(col, ycol));
  std::ostringstream pc;
  write_per_class_csv(pc, table);
  EXPECT_EQ(pc.str().substr(0, pc.str().find('\n')), "class,auroc,recall4,prevalence,positives");
}

}  // namespace
}  // namespace evolve
