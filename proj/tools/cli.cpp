#include "cli.hpp"

#include <openssl/evp.h>

#include <CLI11.hpp>
#include <algorithm>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <limits>
#include <map>
#include <memory>
#include <sstream>

#include <json.hpp>

#include "evolve/checkpoint.hpp"
#include "evolve/errors.hpp"
#include "evolve/training.hpp"
#include "run_config.hpp"

namespace evolve::cli {

namespace fs = std::filesystem;
using ojson = nlohmann::ordered_json;

fs::path with_suffix(const fs::path& p, const std::string& suffix) {
  fs::path r = p;
  r += suffix;
  return r;
}

std::string sha256_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw NotFoundError("cannot open " + path.string());
  std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx(EVP_MD_CTX_new(), EVP_MD_CTX_free);
  if (!ctx || EVP_DigestInit_ex(ctx.get(), EVP_sha256(), nullptr) != 1) throw std::runtime_error("sha256: init failed");
  std::vector<char> buf(1 << 16);
  while (in) {
    in.read(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (in.gcount() > 0) EVP_DigestUpdate(ctx.get(), buf.data(), static_cast<std::size_t>(in.gcount()));
  }
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_DigestFinal_ex(ctx.get(), md, &len);
  std::ostringstream hex;
  for (unsigned int i = 0; i < len; ++i) hex << std::hex << std::setw(2) << std::setfill('0') << static_cast<int>(md[i]);
  return hex.str();
}

namespace {

void ensure_parent(const fs::path& p) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
}

std::ofstream open_out(const fs::path& p) {
  ensure_parent(p);
  std::ofstream f(p);
  if (!f) throw DataError("cannot write " + p.string());
  return f;
}

void write_text(const fs::path& p, const std::string& text) {
  auto f = open_out(p);
  f << text << "\n";
}

std::string read_text(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw NotFoundError("cannot open " + p.string());
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

ojson parse_json_file(const fs::path& p) {
  try {
    return ojson::parse(read_text(p));
  } catch (const nlohmann::json::parse_error& e) {
    throw DataError(p.string() + ": " + e.what());
  }
}

void write_run_config(const fs::path& out, const RunConfig& cfg, const std::string& command) {
  ojson j = to_json(cfg);
  j["command"] = command;
  write_text(with_suffix(out, ".run_config.json"), j.dump(2));
}

}  // namespace

void save_manifest(const fs::path& path, const Manifest& m) {
  ojson j;
  j["version"] = EVOLVE_VERSION;
  j["data_sha256"] = m.sha256;
  j["n_persons"] = m.n_persons;
  j["split_seed"] = m.split_seed;
  j["cohort"] = ojson::parse(cohort_config_to_json(m.cohort));
  j["split"] = {{"train", m.split.train}, {"valid", m.split.valid}, {"test", m.split.test}};
  write_text(path, j.dump(1));
}

Manifest load_manifest(const fs::path& path) {
  const ojson j = parse_json_file(path);
  Manifest m;
  try {
    m.sha256 = j.at("data_sha256").get<std::string>();
    m.n_persons = j.at("n_persons").get<std::size_t>();
    m.split_seed = j.at("split_seed").get<std::uint64_t>();
    m.split.train = j.at("split").at("train").get<std::vector<std::uint64_t>>();
    m.split.valid = j.at("split").at("valid").get<std::vector<std::uint64_t>>();
    m.split.test = j.at("split").at("test").get<std::vector<std::uint64_t>>();
    m.cohort = cohort_config_from_json(j.at("cohort").dump());
  } catch (const nlohmann::json::exception& e) {
    throw DataError(path.string() + ": " + e.what());
  }
  return m;
}

std::vector<PersonRecord> Dataset::part(const std::string& which) const {
  if (which == "all") return persons;
  if (which == "train") return select_persons(persons, manifest.split.train);
  if (which == "valid") return select_persons(persons, manifest.split.valid);
  if (which == "test") return select_persons(persons, manifest.split.test);
  throw ContractError("unknown split '" + which + "' (train, valid, test, all)");
}

Dataset open_dataset(const fs::path& data, std::ostream& err) {
  if (!fs::exists(data)) throw NotFoundError("data file " + data.string() + " does not exist");
  const auto mp = manifest_path(data);
  if (!fs::exists(mp)) throw NotFoundError("no manifest " + mp.string() + " (written by 'evolve generate')");
  Dataset ds;
  ds.path = data;
  ds.manifest = load_manifest(mp);
  const std::string sum = sha256_file(data);
  if (sum != ds.manifest.sha256) {
    throw DataError("checksum of " + data.string() + " does not match its manifest (file changed after generate?)");
  }
  std::vector<std::string> warnings;
  ds.persons = load_jsonl(data, &warnings);
  for (std::size_t i = 0; i < warnings.size() && i < 5; ++i) err << "warning: " << warnings[i] << "\n";
  if (warnings.size() > 5) err << "warning: ... " << warnings.size() - 5 << " more\n";
  return ds;
}

std::string Predictor::kind() const { return net ? to_string(net->config().mode) : "logreg"; }

void Predictor::check_compatible(const CohortConfig& cohort) const {
  const std::size_t classes = cohort.n_classes();
  if (net) {
    const auto& c = net->config();
    const std::size_t tokens = cohort.vocab_size() + static_cast<std::size_t>(kFirstCodeToken);
    if (c.vocab_size != tokens) {
      throw ConfigError(name + ": checkpoint has " + std::to_string(c.vocab_size) + " tokens, data set needs " +
                        std::to_string(tokens));
    }
    if (c.n_classes != classes) {
      throw ConfigError(name + ": checkpoint has " + std::to_string(c.n_classes) + " classes, data set has " +
                        std::to_string(classes));
    }
  } else {
    if (logreg->n_features() != cohort.vocab_size() + 1) {
      throw ConfigError(name + ": logreg model has " + std::to_string(logreg->n_features() - 1) +
                        " code features, data set vocabulary is " + std::to_string(cohort.vocab_size()));
    }
    if (logreg->n_classes() != classes) {
      throw ConfigError(name + ": logreg model has " + std::to_string(logreg->n_classes()) + " classes, data set has " +
                        std::to_string(classes));
    }
  }
}

Predictor load_predictor(const fs::path& path) {
  if (!fs::exists(path)) throw NotFoundError("model file " + path.string() + " does not exist");
  Predictor p;
  p.name = path.stem().string();
  if (is_checkpoint_file(path)) {
    p.net = model_from_checkpoint(load_checkpoint(path));
    return p;
  }
  const std::string text = read_text(path);
  p.logreg = LogRegOvR::from_json(text);
  try {
    p.max_events = nlohmann::json::parse(text).value("max_events", std::numeric_limits<std::size_t>::max());
  } catch (const nlohmann::json::exception& e) {
    throw DataError(path.string() + ": " + e.what());
  }
  return p;
}

void save_logreg(const fs::path& path, const LogRegOvR& model, std::size_t max_events) {
  ojson j = ojson::parse(model.to_json());
  j["max_events"] = max_events;
  write_text(path, j.dump());
}

ScoreMatrix score_persons(const Predictor& p, const std::vector<PersonRecord>& persons, const CohortConfig& cohort) {
  const std::size_t n_cls = cohort.n_classes();
  ScoreMatrix m(persons.size(), n_cls);
  for (std::size_t i = 0; i < persons.size(); ++i) {
    const auto y = dense_labels(persons[i], n_cls);
    std::copy(y.begin(), y.end(), m.labels.begin() + static_cast<std::ptrdiff_t>(i * n_cls));
  }
  if (p.net) {
    const auto examples = build_examples(persons, cohort, p.net->config());
    std::vector<InputSequence> seqs;
    seqs.reserve(examples.size());
    for (const auto& e : examples) seqs.push_back(e.sequence);
    const auto series = p.net->predict_many(seqs);
    for (std::size_t i = 0; i < series.size(); ++i) {
      for (std::size_t c = 0; c < n_cls; ++c) m.scores[i * n_cls + c] = series[i].at(series[i].rows - 1, c);
    }
  } else {
    m.scores = p.logreg->predict_proba(featurize_all(persons, cohort, p.max_events));
  }
  return m;
}

ShockContrast shock_contrast(std::span<const AgeEmbeddingMap> group, const std::vector<int>& shock_ages, std::size_t k,
                             std::span<const AgeEmbeddingMap> references) {
  if (group.size() != shock_ages.size()) throw DimensionError("shock_contrast: one shock age per group member");
  ShockContrast out;
  double at = 0, other = 0;
  for (std::size_t i = 0; i < group.size(); ++i) {
    const auto& g = group[i];
    if (!g.has(shock_ages[i]) || !g.has(shock_ages[i] - 1)) continue;
    double r_shock = 0;
    try {
      r_shock = rate_of_change(g, shock_ages[i], k, references);
    } catch (const NotFoundError&) {
      continue;
    }
    double sum = 0;
    std::size_t n = 0;
    for (int a = g.first_age + 1; a <= g.last_age(); ++a) {
      if (a == shock_ages[i]) continue;
      try {
        sum += rate_of_change(g, a, k, references);
        ++n;
      } catch (const NotFoundError&) {
      }
    }
    if (n == 0) continue;
    at += r_shock;
    other += sum / static_cast<double>(n);
    ++out.n;
  }
  if (out.n > 0) {
    out.at_shock = at / static_cast<double>(out.n);
    out.elsewhere = other / static_cast<double>(out.n);
  }
  return out;
}

namespace {

// ---- option holders; std::nullopt means "not given on the command line"

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
};

struct GenerateOpts {
  Common common;
  std::string out;
  std::optional<std::size_t> n_persons;
};

struct TrainOpts {
  Common common;
  std::string data, mode, out, resume;
  std::optional<double> lr, downsample, weight_decay, dropout, C;
  std::optional<std::size_t> epochs, batch_size, patience, d_model, heads, layers, max_seq_len;
  std::vector<double> class_weights;
};

struct EvaluateOpts {
  Common common;
  std::vector<std::string> ckpts, names;
  std::string data, out, split = "test";
  std::optional<std::size_t> bootstrap, recall_k;
  bool exclude_none = false;
};

struct AnalyzeOpts {
  Common common;
  std::string ckpt, data, out, events;
  std::optional<std::size_t> k;
  std::optional<std::uint64_t> person;
  std::vector<std::uint64_t> ids;
  bool shocked = false;
  std::optional<int> min_age, max_age;
};

RunConfig base_config(const Common& c) {
  RunConfig cfg;
  if (!c.config.empty()) {
    if (!fs::exists(c.config)) throw NotFoundError("config file " + c.config + " does not exist");
    cfg = load_run_config(c.config);
  }
  if (c.seed) cfg.seed = *c.seed;
  return cfg;
}

std::string join(const std::vector<std::string>& parts, const std::string& sep) {
  std::string s;
  for (std::size_t i = 0; i < parts.size(); ++i) s += (i ? sep : "") + parts[i];
  return s;
}

// ---- generate

int cmd_generate(const GenerateOpts& o, std::ostream& out) {
  RunConfig cfg = base_config(o.common);
  if (o.common.seed) cfg.cohort.seed = *o.common.seed;
  if (o.n_persons) cfg.cohort.n_persons = *o.n_persons;
  cfg.cohort.validate();

  const Cohort cohort = generate_cohort(cfg.cohort);
  std::vector<std::uint64_t> ids;
  for (const auto& p : cohort.persons) ids.push_back(p.person_id);
  Manifest m;
  m.cohort = cfg.cohort;
  m.split = split_dataset(ids, cfg.seed);
  m.split_seed = cfg.seed;
  m.n_persons = ids.size();

  const fs::path data(o.out);
  ensure_parent(data);
  save_jsonl(data, cohort.persons);
  m.sha256 = sha256_file(data);
  save_manifest(manifest_path(data), m);
  write_text(truth_path(data), truth_to_json(cohort));
  write_run_config(data, cfg, "generate");

  std::vector<std::size_t> pos(cfg.cohort.n_classes(), 0);
  for (const auto& p : cohort.persons) {
    for (int c : p.labels) ++pos[static_cast<std::size_t>(c)];
  }
  out << "wrote " << ids.size() << " persons to " << data.string() << " (train " << m.split.train.size() << ", valid "
      << m.split.valid.size() << ", test " << m.split.test.size() << ")\n";
  out << "positives:";
  const auto names = cfg.cohort.class_names();
  for (std::size_t c = 0; c < names.size(); ++c) out << " " << names[c] << "=" << pos[c];
  out << "\nsha256 " << m.sha256 << "\n";
  return kExitOk;
}

// ---- train

void apply_train_flags(RunConfig& cfg, const TrainOpts& o) {
  auto& t = cfg.train;
  if (o.lr) t.learning_rate = *o.lr;
  if (o.epochs) t.max_epochs = *o.epochs;
  if (o.batch_size) t.batch_size = *o.batch_size;
  if (o.patience) t.early_stop_patience = *o.patience;
  if (o.downsample) t.none_downsample_rate = *o.downsample;
  if (o.weight_decay) t.weight_decay = *o.weight_decay;
  if (!o.class_weights.empty()) t.class_weights = o.class_weights;
  auto& m = cfg.model;
  if (o.d_model) m.d_model = *o.d_model;
  if (o.heads) m.n_heads = *o.heads;
  if (o.layers) m.n_layers = *o.layers;
  if (o.max_seq_len) m.max_seq_len = *o.max_seq_len;
  if (o.dropout) m.dropout = *o.dropout;
  if (o.C) cfg.logreg.inverse_penalty = *o.C;
}

int cmd_train(const TrainOpts& o, std::ostream& out, std::ostream& err) {
  const Dataset ds = open_dataset(o.data, err);
  RunConfig cfg = base_config(o.common);
  cfg.cohort = ds.manifest.cohort;
  apply_train_flags(cfg, o);
  cfg.train.seed = cfg.seed;
  const auto& cohort = cfg.cohort;
  const auto train = ds.part("train");
  const auto valid = ds.part("valid");
  const fs::path dest(o.out);
  ensure_parent(dest);

  if (o.mode == "logreg") {
    if (!o.resume.empty()) throw ConfigError("--resume applies to evolve / cls training only");
    cfg.logreg.validate();
    const auto x = featurize_all(train, cohort, cfg.model.max_seq_len);
    std::vector<std::uint8_t> y;
    for (const auto& p : train) {
      const auto row = dense_labels(p, cohort.n_classes());
      y.insert(y.end(), row.begin(), row.end());
    }
    LogRegOvR model;
    std::vector<std::string> warnings;
    model.fit(x, y, cohort.n_classes(), cfg.logreg, &warnings);
    for (const auto& w : warnings) err << "warning: " << w << "\n";
    save_logreg(dest, model, cfg.model.max_seq_len);
    Predictor p;
    p.logreg = model;
    p.max_events = cfg.model.max_seq_len;
    const auto m = score_persons(p, valid, cohort);
    out << "logreg fitted on " << train.size() << " persons; valid macro AUROC " << auroc(m, Averaging::macro) << "\n";
  } else {
    ModelConfig mc = cfg.model;
    mc.mode = parse_model_mode(o.mode);
    mc.vocab_size = cohort.vocab_size() + static_cast<std::size_t>(kFirstCodeToken);
    mc.n_classes = cohort.n_classes();
    mc.validate();
    cfg.model = mc;
    const auto tr = build_examples(train, cohort, mc);
    const auto va = build_examples(valid, cohort, mc);
    EvolveModel<float> model(mc, cfg.seed);
    FitOptions fo;
    fo.none_class = cohort.none_class();
    fo.resume_path = with_suffix(dest, ".resume");
    if (!o.resume.empty()) {
      if (!fs::exists(o.resume)) throw NotFoundError("resume state " + o.resume + " does not exist");
      fo.resume_from = load_checkpoint(o.resume);
    }
    fo.on_epoch = [&](const EpochRecord& r) {
      out << "epoch " << r.epoch << " train " << r.train_loss << " valid " << r.valid_loss << " lr " << r.learning_rate
          << std::endl;
    };
    const FitResult res = fit(model, tr, va, cfg.train, fo);
    save_checkpoint(dest, checkpoint_from_model(model));
    auto hist = open_out(with_suffix(dest, ".history.csv"));
    write_history_csv(hist, res.history);
    out << "best epoch " << res.best_epoch << " valid loss " << res.best_valid_loss
        << (res.stopped_early ? " (stopped early)" : "") << "\n";
  }
  write_run_config(dest, cfg, "train --mode " + o.mode);
  out << "saved " << dest.string() << "\n";
  return kExitOk;
}

// ---- evaluate

int cmd_evaluate(const EvaluateOpts& o, std::ostream& out, std::ostream& err) {
  const Dataset ds = open_dataset(o.data, err);
  RunConfig cfg = base_config(o.common);
  cfg.cohort = ds.manifest.cohort;
  if (o.bootstrap) cfg.evaluate.bootstrap = *o.bootstrap;
  if (o.recall_k) cfg.evaluate.recall_k = *o.recall_k;
  if (o.exclude_none) cfg.evaluate.recall_exclude_none = true;
  if (!o.names.empty() && o.names.size() != o.ckpts.size()) throw ConfigError("--name must be given once per --ckpt");

  const auto persons = ds.part(o.split);
  const auto names = cfg.cohort.class_names();
  EvaluationOptions eo;
  eo.bootstrap_iterations = cfg.evaluate.bootstrap;
  eo.seed = cfg.seed;
  eo.recall.k = cfg.evaluate.recall_k;
  if (cfg.evaluate.recall_exclude_none) eo.recall.exclude_class = cfg.cohort.none_class();
  if (eo.recall.k > cfg.cohort.n_classes()) {
    err << "warning: recall k=" << eo.recall.k << " exceeds " << cfg.cohort.n_classes() << " classes; clamped\n";
  }

  const fs::path dest(o.out);
  std::vector<EvaluationRow> rows;
  for (std::size_t i = 0; i < o.ckpts.size(); ++i) {
    Predictor p = load_predictor(o.ckpts[i]);
    if (!o.names.empty()) p.name = o.names[i];
    p.check_compatible(cfg.cohort);
    const ScoreMatrix m = score_persons(p, persons, cfg.cohort);
    rows.push_back(evaluate_scores(p.name, m, eo));
    const auto& r = rows.back();
    if (!r.excluded_classes.empty()) {
      std::vector<std::string> ex;
      for (auto c : r.excluded_classes) ex.push_back(names[c]);
      err << "warning: " << p.name << ": classes without positives or negatives left out of macro AUROC: "
          << join(ex, ", ") << "\n";
    }
    fs::path pc = dest.parent_path() / (dest.stem().string() + "." + p.name + ".per_class.csv");
    auto f = open_out(pc);
    write_per_class_csv(f, per_class_table(m, names, eo.recall), eo.recall.k);
    out << std::fixed << std::setprecision(4) << p.name << " (" << p.kind() << "): macro AUROC "
        << r.auroc_macro.value << " +- " << r.auroc_macro.std << ", micro AUROC " << r.auroc_micro.value
        << ", macro AUPRC " << r.auprc_macro.value << ", micro recall@" << eo.recall.k << " " << r.recall_micro.value
        << "\n";
    out.unsetf(std::ios::floatfield);
  }
  auto f = open_out(dest);
  write_summary_csv(f, rows, eo.recall.k);
  write_run_config(dest, cfg, "evaluate");
  out << "evaluated " << persons.size() << " persons (" << o.split << " split); wrote " << dest.string() << "\n";
  return kExitOk;
}

// ---- analyze

struct AnalysisContext {
  Dataset ds;
  RunConfig cfg;
  Predictor model;
};

AnalysisContext open_analysis(const AnalyzeOpts& o, std::ostream& err) {
  AnalysisContext ctx{open_dataset(o.data, err), base_config(o.common), load_predictor(o.ckpt)};
  ctx.cfg.cohort = ctx.ds.manifest.cohort;
  if (!ctx.model.net || ctx.model.net->config().mode != ModelMode::evolve) {
    throw ContractError("analysis needs an evolve-mode checkpoint, got " + ctx.model.kind());
  }
  ctx.model.check_compatible(ctx.cfg.cohort);
  ctx.cfg.model = ctx.model.net->config();
  return ctx;
}

std::vector<InputSequence> sequences(const std::vector<PersonRecord>& persons, const AnalysisContext& ctx) {
  std::vector<InputSequence> out;
  out.reserve(persons.size());
  for (const auto& e : build_examples(persons, ctx.cfg.cohort, ctx.model.net->config())) out.push_back(e.sequence);
  return out;
}

std::vector<std::uint64_t> ids_of(const std::vector<PersonRecord>& persons) {
  std::vector<std::uint64_t> ids;
  for (const auto& p : persons) ids.push_back(p.person_id);
  return ids;
}

std::vector<AgeEmbeddingMap> embed(const std::vector<PersonRecord>& persons, const AnalysisContext& ctx) {
  const auto ids = ids_of(persons);
  const auto seqs = sequences(persons, ctx);
  return build_age_embeddings(ids, seqs, *ctx.model.net);
}

void warn_k(std::size_t k, std::size_t pool, std::ostream& err) {
  if (pool == 0 || k > pool - 1) {
    err << "warning: k=" << k << " exceeds the reference pool (" << pool << " persons); clamped per age\n";
  }
}

int cmd_jumps(const AnalyzeOpts& o, std::ostream& out, std::ostream& err) {
  const auto ctx = open_analysis(o, err);
  const auto& cohort = ctx.cfg.cohort;
  const auto valid = ctx.ds.part("valid");
  const auto test = ctx.ds.part("test");

  const auto vseq = sequences(valid, ctx);
  const auto vser = ctx.model.net->predict_many(vseq);
  std::vector<std::vector<std::uint8_t>> vlab;
  for (const auto& p : valid) vlab.push_back(dense_labels(p, cohort.n_classes()));
  const auto th = calibrate_jumps(vser, vlab);

  const auto tseq = sequences(test, ctx);
  const auto tser = ctx.model.net->predict_many(tseq);
  const auto tids = ids_of(test);
  const auto events = detect_jumps(tids, tser, tseq, th);
  const auto rows = aggregate_jumps(events);

  const auto names = cohort.class_names();
  const fs::path dest(o.out);
  auto f = open_out(dest);
  write_jump_table_csv(f, rows, names);
  if (!o.events.empty()) {
    auto ev = open_out(o.events);
    ev << "person_id,class,code,before,after,magnitude,age,t2f\n";
    ev.precision(9);
    for (const auto& e : events) {
      ev << e.person_id << ',' << names[e.cls] << ',' << e.code << ',' << e.before << ',' << e.after << ','
         << e.magnitude() << ',' << e.age << ',' << e.t2f << '\n';
    }
  }
  for (std::size_t c = 0; c < names.size(); ++c) {
    if (!th.mean_max_jump[c]) {
      err << "warning: no positives for " << names[c] << " in the validation split; class skipped\n";
      continue;
    }
    std::vector<std::string> top;
    for (const auto& r : rows) {
      if (r.cls == c && top.size() < 3) top.push_back(std::to_string(r.code));
    }
    out << names[c] << ": threshold " << *th.mean_max_jump[c] << ", top codes " << (top.empty() ? "-" : join(top, " "))
        << "\n";
  }
  write_run_config(dest, ctx.cfg, "analyze jumps");
  out << events.size() << " jumps in " << test.size() << " test persons; wrote " << dest.string() << "\n";
  return kExitOk;
}

int cmd_change_curve(const AnalyzeOpts& o, std::ostream& out, std::ostream& err) {
  auto ctx = open_analysis(o, err);
  if (o.k) ctx.cfg.analysis.k = *o.k;
  const std::size_t k = ctx.cfg.analysis.k;
  if (o.shocked && !o.ids.empty()) throw ConfigError("--ids and --shocked are exclusive");

  const auto test = ctx.ds.part("test");
  const auto refs = embed(test, ctx);
  warn_k(k, refs.size(), err);

  std::vector<PersonRecord> members;
  std::vector<int> shock_ages;
  if (o.shocked) {
    const auto tp = truth_path(ctx.ds.path);
    if (!fs::exists(tp)) throw NotFoundError("truth file " + tp.string() + " does not exist");
    const ojson truth = parse_json_file(tp);
    std::map<std::uint64_t, int> shock;
    for (const auto& p : truth.at("persons")) {
      if (!p.at("shock_age").is_null()) shock[p.at("person_id").get<std::uint64_t>()] = p.at("shock_age").get<int>();
    }
    for (const auto& p : test) {
      if (auto it = shock.find(p.person_id); it != shock.end()) {
        members.push_back(p);
        shock_ages.push_back(it->second);
      }
    }
    if (members.empty()) throw NotFoundError("no test person has a planted shock");
  } else if (!o.ids.empty()) {
    members = select_persons(ctx.ds.persons, o.ids);
  } else {
    members = test;
  }
  const auto group = o.ids.empty() && !o.shocked ? refs : embed(members, ctx);

  int lo = std::numeric_limits<int>::max(), hi = std::numeric_limits<int>::min();
  for (const auto& g : group) {
    if (g.empty()) continue;
    lo = std::min(lo, g.first_age + 1);
    hi = std::max(hi, g.last_age());
  }
  if (o.min_age) lo = *o.min_age;
  if (o.max_age) hi = *o.max_age;
  if (lo > hi) throw ContractError("empty age range for the change curve");

  const auto curve = cohort_change_curve(group, lo, hi, k, refs);
  const fs::path dest(o.out);
  auto f = open_out(dest);
  write_change_curve_csv(f, curve);
  if (!curve.omitted_ages.empty()) err << "note: " << curve.omitted_ages.size() << " ages had no evaluable member\n";
  if (o.shocked) {
    const auto sc = shock_contrast(group, shock_ages, k, refs);
    out << "shocked persons " << sc.n << ": mean rate at shock age " << sc.at_shock << ", elsewhere " << sc.elsewhere;
    if (sc.elsewhere > 0) out << ", ratio " << sc.at_shock / sc.elsewhere;
    out << "\n";
  }
  write_run_config(dest, ctx.cfg, "analyze change-curve");
  out << "change curve over ages " << lo << ".." << hi << " for " << group.size() << " persons; wrote " << dest.string()
      << "\n";
  return kExitOk;
}

std::pair<PersonRecord, AgeEmbeddingMap> target_person(const AnalyzeOpts& o, const AnalysisContext& ctx) {
  const auto sel = select_persons(ctx.ds.persons, {*o.person});
  auto maps = embed(sel, ctx);
  return {sel.front(), std::move(maps.front())};
}

int cmd_trajectory(const AnalyzeOpts& o, std::ostream& out, std::ostream& err) {
  auto ctx = open_analysis(o, err);
  if (o.k) ctx.cfg.analysis.k = *o.k;
  const std::size_t k = ctx.cfg.analysis.k;
  const auto [person, target] = target_person(o, ctx);
  const auto seq = sequences({person}, ctx).front();
  const auto traj = sigmoid_trajectory(seq, *ctx.model.net);

  const auto refs = embed(ctx.ds.part("test"), ctx);
  warn_k(k, refs.size(), err);
  std::vector<std::optional<double>> rates;
  for (int age : traj.ages) {
    try {
      rates.emplace_back(rate_of_change(target, age, k, refs));
    } catch (const NotFoundError&) {
      rates.emplace_back(std::nullopt);
    }
  }
  const fs::path dest(o.out);
  auto f = open_out(dest);
  write_trajectory_csv(f, traj, ctx.cfg.cohort.class_names(), rates);
  write_run_config(dest, ctx.cfg, "analyze trajectory");
  out << "person " << person.person_id << ": " << traj.ages.size() << " ages; wrote " << dest.string() << "\n";
  return kExitOk;
}

int cmd_class_sim(const AnalyzeOpts& o, std::ostream& out, std::ostream& err) {
  auto ctx = open_analysis(o, err);
  if (o.k) ctx.cfg.analysis.class_k = *o.k;
  const auto [person, target] = target_person(o, ctx);
  const auto test = ctx.ds.part("test");
  const auto refs = embed(test, ctx);
  std::vector<std::vector<std::uint8_t>> labels;
  for (const auto& p : test) labels.push_back(dense_labels(p, ctx.cfg.cohort.n_classes()));
  const auto sim = class_representative_similarity(target, refs, labels, ctx.cfg.analysis.class_k);

  const auto names = ctx.cfg.cohort.class_names();
  for (auto c : sim.omitted_classes) err << "warning: no reference person has class " << names[c] << "; column omitted\n";
  for (auto c : sim.short_classes) {
    err << "warning: fewer than " << ctx.cfg.analysis.class_k << " references for " << names[c] << " at some ages\n";
  }
  const fs::path dest(o.out);
  auto f = open_out(dest);
  write_similarity_csv(f, sim, names);
  write_run_config(dest, ctx.cfg, "analyze class-sim");
  out << "person " << person.person_id << ": " << sim.ages.size() << " ages x " << sim.classes.size()
      << " classes; wrote " << dest.string() << "\n";
  return kExitOk;
}

void add_common(CLI::App* app, Common& c) {
  app->add_option("--config", c.config, "JSON run config (flags override it)");
  app->add_option("--seed", c.seed, "Random seed (default 1)");
}

void add_analysis_io(CLI::App* app, AnalyzeOpts& o) {
  add_common(app, o.common);
  app->add_option("--ckpt", o.ckpt, "Evolve-mode checkpoint")->required();
  app->add_option("--data", o.data, "Cohort JSONL")->required();
  app->add_option("--out", o.out, "Output CSV")->required();
}

}  // namespace

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Synthetic health-record forecasting: cohort generation, training, evaluation and analysis", "evolve"};
  app.set_version_flag("--version", std::string(EVOLVE_VERSION));
  app.require_subcommand(1);

  GenerateOpts gen;
  auto* g = app.add_subcommand("generate", "Generate a synthetic cohort with its split manifest");
  add_common(g, gen.common);
  g->add_option("--out", gen.out, "Output JSONL")->required();
  g->add_option("--n-persons", gen.n_persons, "Cohort size");

  TrainOpts tr;
  auto* t = app.add_subcommand("train", "Train an evolve, cls or logreg model");
  add_common(t, tr.common);
  t->add_option("--data", tr.data, "Cohort JSONL")->required();
  t->add_option("--mode", tr.mode, "Model family")->required()->check(CLI::IsMember({"evolve", "cls", "logreg"}));
  t->add_option("--out", tr.out, "Checkpoint (or logreg JSON) path")->required();
  t->add_option("--resume", tr.resume, "Continue from a <out>.resume state");
  t->add_option("--lr", tr.lr, "Peak learning rate");
  t->add_option("--epochs", tr.epochs, "Maximum epochs");
  t->add_option("--batch-size", tr.batch_size, "Persons per batch");
  t->add_option("--patience", tr.patience, "Early-stopping patience");
  t->add_option("--downsample", tr.downsample, "Keep rate for 'none' persons");
  t->add_option("--weight-decay", tr.weight_decay, "AdamW weight decay");
  t->add_option("--class-weights", tr.class_weights, "One weight per class")->delimiter(',');
  t->add_option("--d-model", tr.d_model, "Hidden size");
  t->add_option("--heads", tr.heads, "Attention heads");
  t->add_option("--layers", tr.layers, "Transformer blocks");
  t->add_option("--max-seq-len", tr.max_seq_len, "Most recent events kept");
  t->add_option("--dropout", tr.dropout, "Dropout rate");
  t->add_option("--C", tr.C, "Logreg inverse L1 penalty");

  EvaluateOpts ev;
  auto* e = app.add_subcommand("evaluate", "Score models on a split with bootstrap std");
  add_common(e, ev.common);
  e->add_option("--ckpt", ev.ckpts, "Model file (repeatable)")->required();
  e->add_option("--name", ev.names, "Display name per --ckpt (repeatable)");
  e->add_option("--data", ev.data, "Cohort JSONL")->required();
  e->add_option("--out", ev.out, "Summary CSV")->required();
  e->add_option("--split", ev.split, "train, valid, test or all")->check(CLI::IsMember({"train", "valid", "test", "all"}));
  e->add_option("--bootstrap", ev.bootstrap, "Bootstrap iterations");
  e->add_option("--recall-k", ev.recall_k, "k for recall@k");
  e->add_flag("--exclude-none", ev.exclude_none, "Drop the 'none' class from recall@k rankings");

  auto* a = app.add_subcommand("analyze", "Embedding and prediction-trajectory analyses");
  a->require_subcommand(1);
  AnalyzeOpts jo, co, to, so;
  auto* aj = a->add_subcommand("jumps", "Codes behind large jumps in predicted risk");
  add_analysis_io(aj, jo);
  aj->add_option("--events", jo.events, "Also write every detected jump");
  auto* ac = a->add_subcommand("change-curve", "Mean rate of change by age for a group");
  add_analysis_io(ac, co);
  ac->add_option("--k", co.k, "Neighbourhood size (default 1000)");
  ac->add_option("--ids", co.ids, "Group person ids")->delimiter(',');
  ac->add_flag("--shocked", co.shocked, "Group = test persons with a planted shock");
  ac->add_option("--min-age", co.min_age, "First age");
  ac->add_option("--max-age", co.max_age, "Last age");
  auto* at = a->add_subcommand("trajectory", "Per-age sigmoid outputs and rate of change for one person");
  add_analysis_io(at, to);
  at->add_option("--person", to.person, "Person id")->required();
  at->add_option("--k", to.k, "Neighbourhood size (default 1000)");
  auto* as = a->add_subcommand("class-sim", "Similarity to class representatives over age for one person");
  add_analysis_io(as, so);
  as->add_option("--person", so.person, "Person id")->required();
  as->add_option("--k", so.k, "Representatives per class (default 25)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::CallForVersion& e) {
    out << EVOLVE_VERSION << "\n";
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    app.exit(e, out, err);
    return kExitValidation;
  }

  try {
    if (*g) return cmd_generate(gen, out);
    if (*t) return cmd_train(tr, out, err);
    if (*e) return cmd_evaluate(ev, out, err);
    if (*aj) return cmd_jumps(jo, out, err);
    if (*ac) return cmd_change_curve(co, out, err);
    if (*at) return cmd_trajectory(to, out, err);
    if (*as) return cmd_class_sim(so, out, err);
  } catch (const ConfigError& x) {
    err << "config error: " << x.what() << "\n";
    return kExitValidation;
  } catch (const NotFoundError& x) {
    err << "not found: " << x.what() << "\n";
    return kExitValidation;
  } catch (const DataError& x) {
    err << "data error: " << x.what() << "\n";
    return kExitValidation;
  } catch (const ContractError& x) {
    err << "error: " << x.what() << "\n";
    return kExitValidation;
  } catch (const DimensionError& x) {
    err << "error: " << x.what() << "\n";
    return kExitValidation;
  } catch (const IndexError& x) {
    err << "error: " << x.what() << "\n";
    return kExitValidation;
  } catch (const LengthError& x) {
    err << "error: " << x.what() << "\n";
    return kExitValidation;
  } catch (const NumericError& x) {
    err << "numeric error: " << x.what() << "\n";
    return kExitRuntime;
  } catch (const std::exception& x) {
    err << "error: " << x.what() << "\n";
    return kExitRuntime;
  }
  return kExitValidation;
}

}  // namespace evolve::cli
