#include "evolve/logreg.hpp"

#include <Eigen/Sparse>
#include <algorithm>
#include <cmath>
#include <iostream>
#include <json.hpp>

#include "evolve/errors.hpp"
#include "evolve/parallel.hpp"

namespace evolve {

namespace {

using SparseX = Eigen::SparseMatrix<double>;
using Vec = Eigen::VectorXd;

double softplus(double z) { return std::max(z, 0.0) + std::log1p(std::exp(-std::abs(z))); }
double sigmoid(double z) {
  if (z >= 0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

SparseX design_matrix(const std::vector<CountFeature>& x, std::size_t vocab, const AgeScaler& scaler) {
  std::vector<Eigen::Triplet<double>> entries;
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (x[i].counts.size() != vocab) {
      throw DimensionError("feature row " + std::to_string(i) + " has " + std::to_string(x[i].counts.size()) +
                           " counts, expected " + std::to_string(vocab));
    }
    for (std::size_t j = 0; j < vocab; ++j) {
      if (x[i].counts[j] != 0.0) entries.emplace_back(static_cast<int>(i), static_cast<int>(j), x[i].counts[j]);
    }
    entries.emplace_back(static_cast<int>(i), static_cast<int>(vocab), scaler.apply(x[i].age));
  }
  SparseX m(static_cast<Eigen::Index>(x.size()), static_cast<Eigen::Index>(vocab + 1));
  m.setFromTriplets(entries.begin(), entries.end());
  m.makeCompressed();
  return m;
}

struct Problem {
  const SparseX& x;
  Vec y;
  double lambda;  // L1 weight after dividing the objective by C * n
  double n;

  double loss(const Vec& w, double b, Vec* margin = nullptr) const {
    Vec z = x * w;
    z.array() += b;
    double total = 0.0;
    for (Eigen::Index i = 0; i < z.size(); ++i) total += softplus(z[i]) - y[i] * z[i];
    if (margin) *margin = std::move(z);
    return total / n;
  }
  double objective(const Vec& w, double b) const { return loss(w, b) + lambda * w.lpNorm<1>(); }
};

BinaryLogReg solve(const Problem& pb, double prevalence, const LogRegConfig& cfg) {
  const Eigen::Index f = pb.x.cols();
  BinaryLogReg out;
  out.prevalence = prevalence;
  Vec w = Vec::Zero(f), yw = w;
  double b = std::log(prevalence / (1.0 - prevalence)), yb = b;
  double t = 1.0, step_l = 1.0;
  double f_prev = pb.objective(w, b);
  Vec best_w = w;
  double best_b = b, best_f = f_prev;
  out.converged = false;
  Vec z;
  for (std::size_t it = 1; it <= cfg.max_iterations; ++it) {
    out.iterations = it;
    const double fy = pb.loss(yw, yb, &z);
    Vec r(z.size());
    for (Eigen::Index i = 0; i < z.size(); ++i) r[i] = sigmoid(z[i]) - pb.y[i];
    const Vec gw = pb.x.transpose() * r / pb.n;
    const double gb = r.sum() / pb.n;

    step_l = std::max(step_l * 0.8, 1e-8);
    Vec nw(f);
    double nb = 0.0;
    for (;;) {
      const double thr = pb.lambda / step_l;
      const Vec u = yw - gw / step_l;
      nw = u.unaryExpr([thr](double v) { return v > thr ? v - thr : (v < -thr ? v + thr : 0.0); });
      nb = yb - gb / step_l;
      const Vec dw = nw - yw;
      const double db = nb - yb;
      const double model = fy + gw.dot(dw) + gb * db + 0.5 * step_l * (dw.squaredNorm() + db * db);
      if (pb.loss(nw, nb) <= model + 1e-12 * std::abs(model)) break;
      step_l *= 2.0;
      if (step_l > 1e20) throw NumericError("logistic regression line search diverged");
    }
    const double mapping = step_l * std::max((nw - yw).lpNorm<Eigen::Infinity>(), std::abs(nb - yb));
    const double fn = pb.objective(nw, nb);
    if (fn < best_f) {
      best_f = fn;
      best_w = nw;
      best_b = nb;
    }
    if (mapping <= cfg.tolerance) {
      best_w = nw;
      best_b = nb;
      best_f = fn;
      out.converged = true;
      break;
    }
    if (fn > f_prev) {
      // restart momentum
      t = 1.0;
      yw = nw;
      yb = nb;
    } else {
      const double t_next = 0.5 * (1.0 + std::sqrt(1.0 + 4.0 * t * t));
      const double beta = (t - 1.0) / t_next;
      yw = nw + beta * (nw - w);
      yb = nb + beta * (nb - b);
      t = t_next;
    }
    w = std::move(nw);
    b = nb;
    f_prev = fn;
  }
  out.weights.assign(best_w.data(), best_w.data() + best_w.size());
  out.bias = best_b;
  out.objective = best_f;
  return out;
}

}  // namespace

CountFeature featurize(const PersonRecord& p, std::size_t vocab_size, double forecast_start, double buffer_years,
                       std::size_t max_events) {
  const InputSequence seq = to_input_sequence(p, forecast_start, buffer_years, max_events);
  CountFeature f;
  f.counts.assign(vocab_size, 0.0);
  for (int token : seq.codes) {
    const int code = token - kFirstCodeToken;
    if (code < 0 || static_cast<std::size_t>(code) >= vocab_size) {
      throw IndexError("person " + std::to_string(p.person_id) + ": code " + std::to_string(code) +
                       " outside vocabulary of " + std::to_string(vocab_size));
    }
    f.counts[static_cast<std::size_t>(code)] += 1.0;
  }
  f.age = forecast_start - p.birth_year;
  if (f.age < 0) throw DataError("person " + std::to_string(p.person_id) + " born after the forecast start");
  return f;
}

std::vector<CountFeature> featurize_all(const std::vector<PersonRecord>& persons, const CohortConfig& cohort,
                                        std::size_t max_events) {
  std::vector<CountFeature> out;
  out.reserve(persons.size());
  for (const auto& p : persons) {
    out.push_back(featurize(p, cohort.vocab_size(), cohort.forecast_start, cohort.buffer_years(), max_events));
  }
  return out;
}

AgeScaler AgeScaler::fit(const std::vector<CountFeature>& train) {
  if (train.empty()) throw ContractError("age scaler needs at least one row");
  double mean = 0.0;
  for (const auto& f : train) mean += f.age;
  mean /= static_cast<double>(train.size());
  double var = 0.0;
  for (const auto& f : train) var += (f.age - mean) * (f.age - mean);
  var /= static_cast<double>(train.size());
  AgeScaler s;
  s.mean = mean;
  s.std = var > 0 ? std::sqrt(var) : 1.0;
  return s;
}

void LogRegConfig::validate() const {
  if (!(inverse_penalty > 0) || !std::isfinite(inverse_penalty)) throw ConfigError("logreg C must be positive");
  if (!(tolerance > 0)) throw ConfigError("logreg tolerance must be positive");
  if (max_iterations == 0) throw ConfigError("logreg max_iterations must be positive");
}

void LogRegOvR::fit(const std::vector<CountFeature>& train, const std::vector<std::uint8_t>& labels,
                    std::size_t n_classes, const LogRegConfig& cfg, std::vector<std::string>* warnings) {
  cfg.validate();
  if (train.empty()) throw ContractError("logreg fit on an empty training set");
  if (n_classes == 0) throw ContractError("logreg needs at least one class");
  if (labels.size() != train.size() * n_classes) {
    throw DimensionError("label matrix is " + std::to_string(labels.size()) + " entries, expected " +
                         std::to_string(train.size() * n_classes));
  }
  vocab_ = train.front().counts.size();
  scaler_ = AgeScaler::fit(train);
  const SparseX x = design_matrix(train, vocab_, scaler_);
  const double n = static_cast<double>(train.size());
  std::vector<BinaryLogReg> models(n_classes);
  parallel_for(n_classes, [&](std::size_t c) {
    Vec y(static_cast<Eigen::Index>(train.size()));
    for (std::size_t i = 0; i < train.size(); ++i) y[static_cast<Eigen::Index>(i)] = labels[i * n_classes + c];
    const double prevalence = y.sum() / n;
    if (prevalence == 0.0 || prevalence == 1.0) {
      BinaryLogReg m;
      m.skipped = true;
      m.prevalence = prevalence;
      m.weights.assign(vocab_ + 1, 0.0);
      models[c] = std::move(m);
      return;
    }
    const Problem pb{x, std::move(y), 1.0 / (cfg.inverse_penalty * n), n};
    models[c] = solve(pb, prevalence, cfg);
  });
  models_ = std::move(models);
  for (std::size_t c = 0; c < n_classes; ++c) {
    std::string msg;
    if (models_[c].skipped) {
      msg = "logreg class " + std::to_string(c) + " skipped: labels are constant, predicting prevalence " +
            std::to_string(models_[c].prevalence);
    } else if (!models_[c].converged) {
      msg = "logreg class " + std::to_string(c) + " did not converge in " + std::to_string(cfg.max_iterations) +
            " iterations; keeping the best iterate";
    }
    if (msg.empty()) continue;
    if (warnings) warnings->push_back(msg);
    else std::cerr << "warning: " << msg << '\n';
  }
}

std::vector<double> LogRegOvR::predict_proba(const std::vector<CountFeature>& x) const {
  if (!fitted()) throw ContractError("predict_proba called before fit");
  const std::size_t c = models_.size();
  std::vector<double> out(x.size() * c);
  if (x.empty()) return out;
  const SparseX m = design_matrix(x, vocab_, scaler_);
  for (std::size_t k = 0; k < c; ++k) {
    const auto& mk = models_[k];
    if (mk.skipped) {
      for (std::size_t i = 0; i < x.size(); ++i) out[i * c + k] = mk.prevalence;
      continue;
    }
    const Eigen::Map<const Vec> w(mk.weights.data(), static_cast<Eigen::Index>(mk.weights.size()));
    const Vec z = m * w;
    for (std::size_t i = 0; i < x.size(); ++i) out[i * c + k] = sigmoid(z[static_cast<Eigen::Index>(i)] + mk.bias);
  }
  return out;
}

std::vector<std::size_t> LogRegOvR::skipped_classes() const {
  std::vector<std::size_t> out;
  for (std::size_t c = 0; c < models_.size(); ++c) {
    if (models_[c].skipped) out.push_back(c);
  }
  return out;
}

LogRegOvR LogRegOvR::from_parameters(std::size_t vocab, AgeScaler scaler, std::vector<BinaryLogReg> models) {
  if (models.empty()) throw ContractError("logreg needs at least one class model");
  for (const auto& m : models) {
    if (m.weights.size() != vocab + 1) {
      throw DimensionError("class model has " + std::to_string(m.weights.size()) + " weights, expected " +
                           std::to_string(vocab + 1));
    }
  }
  if (!(scaler.std > 0)) throw ContractError("age scaler std must be positive");
  LogRegOvR out;
  out.vocab_ = vocab;
  out.scaler_ = scaler;
  out.models_ = std::move(models);
  return out;
}

std::string LogRegOvR::to_json() const {
  if (!fitted()) throw ContractError("cannot serialize an unfitted logreg model");
  nlohmann::ordered_json j;
  j["kind"] = "logreg_ovr";
  j["vocab_size"] = vocab_;
  j["age_mean"] = scaler_.mean;
  j["age_std"] = scaler_.std;
  auto& cls = j["classes"] = nlohmann::ordered_json::array();
  for (const auto& m : models_) {
    nlohmann::ordered_json e;
    e["bias"] = m.bias;
    e["weights"] = m.weights;
    e["skipped"] = m.skipped;
    e["prevalence"] = m.prevalence;
    e["converged"] = m.converged;
    e["iterations"] = m.iterations;
    cls.push_back(std::move(e));
  }
  return j.dump(1);
}

LogRegOvR LogRegOvR::from_json(const std::string& text) {
  try {
    const auto j = nlohmann::json::parse(text);
    if (j.at("kind").get<std::string>() != "logreg_ovr") throw DataError("not a logreg model file");
    AgeScaler s{j.at("age_mean").get<double>(), j.at("age_std").get<double>()};
    std::vector<BinaryLogReg> models;
    for (const auto& e : j.at("classes")) {
      BinaryLogReg m;
      m.bias = e.at("bias").get<double>();
      m.weights = e.at("weights").get<std::vector<double>>();
      m.skipped = e.value("skipped", false);
      m.prevalence = e.value("prevalence", 0.0);
      m.converged = e.value("converged", true);
      m.iterations = e.value("iterations", std::size_t{0});
      models.push_back(std::move(m));
    }
    return from_parameters(j.at("vocab_size").get<std::size_t>(), s, std::move(models));
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("bad logreg model json: ") + e.what());
  }
}

}  // namespace evolve
