#include "run_config.hpp"

#include <fstream>
#include <sstream>

#include "evolve/errors.hpp"

namespace evolve::cli {

using ojson = nlohmann::ordered_json;

RunConfig::RunConfig() {
  model.d_model = 32;
  model.n_heads = 4;
  model.n_layers = 2;
  model.max_seq_len = 128;
  model.dropout = 0.1;
  train.batch_size = 64;
  train.max_epochs = 12;
  train.early_stop_patience = 3;
}

namespace {

template <typename T>
T get(const ojson& v, const std::string& path) {
  try {
    return v.get<T>();
  } catch (const nlohmann::json::exception&) {
    throw ConfigError(path + ": wrong type (" + std::string(v.type_name()) + ")");
  }
}

void apply_model(ModelConfig& m, const ojson& j) {
  for (auto it = j.begin(); it != j.end(); ++it) {
    const std::string path = "model." + it.key();
    const auto& v = it.value();
    if (it.key() == "d_model") m.d_model = get<std::size_t>(v, path);
    else if (it.key() == "n_heads") m.n_heads = get<std::size_t>(v, path);
    else if (it.key() == "n_layers") m.n_layers = get<std::size_t>(v, path);
    else if (it.key() == "max_seq_len") m.max_seq_len = get<std::size_t>(v, path);
    else if (it.key() == "dropout") m.dropout = get<double>(v, path);
    else throw ConfigError(path + ": unknown field");
  }
}

void apply_train(TrainConfig& t, const ojson& j) {
  for (auto it = j.begin(); it != j.end(); ++it) {
    const std::string path = "train." + it.key();
    const auto& v = it.value();
    const auto& k = it.key();
    if (k == "learning_rate") t.learning_rate = get<double>(v, path);
    else if (k == "warmup_fraction") t.warmup_fraction = get<double>(v, path);
    else if (k == "min_lr_fraction") t.min_lr_fraction = get<double>(v, path);
    else if (k == "batch_size") t.batch_size = get<std::size_t>(v, path);
    else if (k == "max_epochs") t.max_epochs = get<std::size_t>(v, path);
    else if (k == "early_stop_patience") t.early_stop_patience = get<std::size_t>(v, path);
    else if (k == "none_downsample_rate") t.none_downsample_rate = get<double>(v, path);
    else if (k == "class_weights") t.class_weights = get<std::vector<double>>(v, path);
    else if (k == "weight_decay") t.weight_decay = get<double>(v, path);
    else if (k == "grad_clip_norm") t.grad_clip_norm = get<double>(v, path);
    else throw ConfigError(path + ": unknown field");
  }
}

void apply_logreg(LogRegConfig& l, const ojson& j) {
  for (auto it = j.begin(); it != j.end(); ++it) {
    const std::string path = "logreg." + it.key();
    if (it.key() == "C") l.inverse_penalty = get<double>(it.value(), path);
    else if (it.key() == "tolerance") l.tolerance = get<double>(it.value(), path);
    else if (it.key() == "max_iterations") l.max_iterations = get<std::size_t>(it.value(), path);
    else throw ConfigError(path + ": unknown field");
  }
}

}  // namespace

void apply_json(RunConfig& cfg, const ojson& j) {
  if (!j.is_object()) throw ConfigError("run config must be a JSON object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    const auto& k = it.key();
    const auto& v = it.value();
    if (k != "seed" && k != "version" && k != "command" && !v.is_object()) throw ConfigError(k + ": expected an object");
    if (k == "seed") cfg.seed = get<std::uint64_t>(v, "seed");
    else if (k == "version" || k == "command") continue;  // written by the tool, informational
    else if (k == "cohort") cfg.cohort = cohort_config_from_json(v.dump());
    else if (k == "model") apply_model(cfg.model, v);
    else if (k == "train") apply_train(cfg.train, v);
    else if (k == "logreg") apply_logreg(cfg.logreg, v);
    else if (k == "evaluate") {
      for (auto e = v.begin(); e != v.end(); ++e) {
        const std::string path = "evaluate." + e.key();
        if (e.key() == "bootstrap") cfg.evaluate.bootstrap = get<std::size_t>(e.value(), path);
        else if (e.key() == "recall_k") cfg.evaluate.recall_k = get<std::size_t>(e.value(), path);
        else if (e.key() == "recall_exclude_none") cfg.evaluate.recall_exclude_none = get<bool>(e.value(), path);
        else throw ConfigError(path + ": unknown field");
      }
    } else if (k == "analysis") {
      for (auto e = v.begin(); e != v.end(); ++e) {
        const std::string path = "analysis." + e.key();
        if (e.key() == "k") cfg.analysis.k = get<std::size_t>(e.value(), path);
        else if (e.key() == "class_k") cfg.analysis.class_k = get<std::size_t>(e.value(), path);
        else throw ConfigError(path + ": unknown field");
      }
    } else {
      throw ConfigError(k + ": unknown section");
    }
  }
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path);
  ojson j;
  try {
    j = ojson::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(path + ": " + e.what());
  }
  RunConfig cfg;
  apply_json(cfg, j);
  return cfg;
}

ojson to_json(const RunConfig& cfg) {
  ojson j;
  j["version"] = EVOLVE_VERSION;
  j["seed"] = cfg.seed;
  j["cohort"] = ojson::parse(cohort_config_to_json(cfg.cohort));
  j["model"] = {{"d_model", cfg.model.d_model},
                {"n_heads", cfg.model.n_heads},
                {"n_layers", cfg.model.n_layers},
                {"max_seq_len", cfg.model.max_seq_len},
                {"dropout", cfg.model.dropout}};
  const auto& t = cfg.train;
  j["train"] = {{"learning_rate", t.learning_rate},
                {"warmup_fraction", t.warmup_fraction},
                {"min_lr_fraction", t.min_lr_fraction},
                {"batch_size", t.batch_size},
                {"max_epochs", t.max_epochs},
                {"early_stop_patience", t.early_stop_patience},
                {"none_downsample_rate", t.none_downsample_rate},
                {"class_weights", t.class_weights},
                {"weight_decay", t.weight_decay},
                {"grad_clip_norm", t.grad_clip_norm}};
  j["logreg"] = {{"C", cfg.logreg.inverse_penalty},
                 {"tolerance", cfg.logreg.tolerance},
                 {"max_iterations", cfg.logreg.max_iterations}};
  j["evaluate"] = {{"bootstrap", cfg.evaluate.bootstrap},
                   {"recall_k", cfg.evaluate.recall_k},
                   {"recall_exclude_none", cfg.evaluate.recall_exclude_none}};
  j["analysis"] = {{"k", cfg.analysis.k}, {"class_k", cfg.analysis.class_k}};
  return j;
}

}  // namespace evolve::cli
