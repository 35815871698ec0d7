// SPDX-License-Identifier: Apache-2.0
// ectrace: generate, prepare, train, evaluate and inspect trace models.
#include <malloc.h>

#include <chrono>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "ectrace/checkpoint.hpp"
#include "ectrace/experiment.hpp"
#include "ectrace/interpret.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace ectrace;

namespace {

enum Exit { kOk = 0, kConfig = 2, kData = 3, kRuntime = 4 };

class RuntimeFailure : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Options {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  int threads = 1;
  bool validate = false;
};

/// Holds <dir>/.lock for the lifetime of a command.
class DirLock {
 public:
  explicit DirLock(const fs::path& dir) : path_(dir / ".lock") {
    fs::create_directories(dir);
    std::FILE* f = std::fopen(path_.c_str(), "wx");
    if (!f) throw RuntimeFailure("output directory is locked by another process: " + path_.string());
    std::fprintf(f, "%ld\n", static_cast<long>(::getpid()));
    std::fclose(f);
  }
  ~DirLock() {
    std::error_code ec;
    fs::remove(path_, ec);
  }
  DirLock(const DirLock&) = delete;
  DirLock& operator=(const DirLock&) = delete;

 private:
  fs::path path_;
};

std::string utc_now() {
  const std::time_t t = std::time(nullptr);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&t));
  return buf;
}

std::string stamp_comment(const ExperimentConfig& c) {
  return "# config_hash=" + c.hash() + ",seed=" + std::to_string(c.seed) + ",version=" + kVersion + "\n";
}

void write_text(const fs::path& path, const std::string& text) { write_atomic(path, text); }

void write_json(const fs::path& path, const json& j) { write_text(path, j.dump(2) + "\n"); }

/// Timestamps and durations live here, never in the artifacts themselves.
void write_meta(const fs::path& dir, const std::string& command, const ExperimentConfig& c, const Options& o,
                double seconds, json extra = json::object()) {
  extra["command"] = command;
  extra["finished_utc"] = utc_now();
  extra["elapsed_s"] = seconds;
  extra["threads"] = o.threads;
  extra["stamp"] = stamp(c);
  write_json(dir / (command + ".meta.json"), extra);
}

json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path);
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError(path + ": " + e.what());
  }
}

ExperimentConfig load_config(const Options& o) {
  if (o.config.empty()) throw ConfigError("--config is required");
  if (o.threads < 1) throw ConfigError("--threads must be at least 1");
  auto c = parse_config(read_json_file(o.config), o.seed);
  if (!o.out.empty()) c.out_dir = o.out;
  return c;
}

// ---------------------------------------------------------------------------
// Data

fs::path raw_path(const ExperimentConfig& c) { return fs::path(c.out_dir) / "raw.csv"; }

/// A raw.csv written by `generate` or `ingest` takes precedence over the
/// configured source.
std::vector<TraceRecord> raw_records(const ExperimentConfig& c) {
  if (fs::exists(raw_path(c))) return ingest_csv(raw_path(c).string(), CsvSchema::TracesGiven);
  return load_raw(c.data);
}

void save_raw(const ExperimentConfig& c, const std::vector<TraceRecord>& records) {
  std::ostringstream ss;
  ss << stamp_comment(c);
  write_traces_csv(ss, records);
  write_text(raw_path(c), ss.str());
}

int cmd_generate(const ExperimentConfig& c, const Options& o, bool csv_only) {
  if (csv_only && c.data.kind != "csv") throw ConfigError("$.data.source: ingest requires source csv");
  const auto start = std::chrono::steady_clock::now();
  const auto records = load_raw(c.data);
  DirLock lock(c.out_dir);
  save_raw(c, records);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  write_meta(c.out_dir, csv_only ? "ingest" : "generate", c, o, secs, {{"records", records.size()}});
  std::cout << records.size() << " records -> " << raw_path(c).string() << "\n";
  return kOk;
}

int cmd_prepare(const ExperimentConfig& c, const Options& o) {
  const auto start = std::chrono::steady_clock::now();
  const auto raw = raw_records(c);
  const auto ds = prepare(c, raw);
  DirLock lock(c.out_dir);
  const fs::path dir(c.out_dir);
  for (bool test : {false, true}) {
    std::ostringstream ss;
    ss << json{{"stamp", stamp(c)}}.dump() << "\n";
    write_ndjson(ss, ds, test);
    write_text(dir / (test ? "test.ndjson" : "train.ndjson"), ss.str());
  }
  std::size_t n_test = 0;
  for (bool t : ds.is_test) n_test += t;
  write_json(dir / "provenance.json", {{"stamp", stamp(c)},
                                       {"input_records", raw.size()},
                                       {"train_records", ds.records.size() - n_test},
                                       {"test_records", n_test},
                                       {"feature_primes", ds.feature_primes()},
                                       {"steps", provenance_json(ds)}});
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  write_meta(dir, "prepare", c, o, secs);
  std::cout << ds.records.size() - n_test << " train, " << n_test << " test -> " << dir.string() << "\n";
  return kOk;
}

// ---------------------------------------------------------------------------
// Models

struct Prepared {
  PreparedDataset ds;
  std::vector<int> classes;
};

Prepared prepared_for(const ExperimentConfig& c) {
  Prepared p{prepare(c, raw_records(c)), label_classes(c)};
  return p;
}

json checkpoint_meta(const ExperimentConfig& c, int epoch, std::size_t input_width, const std::vector<int>& classes) {
  return {{"stamp", stamp(c)}, {"config", c.source}, {"epoch", epoch}, {"input_width", input_width}, {"classes", classes}};
}

TransformerConfig model_config(const ExperimentConfig& c, std::size_t classes) {
  auto m = c.model;
  m.n_classes = static_cast<int>(classes);
  return m;
}

FFNConfig ffn_config(const ExperimentConfig& c, std::size_t classes) {
  auto f = c.ffn;
  f.n_classes = static_cast<int>(classes);
  return f;
}

struct TrainOutcome {
  TrainResult result;
  std::string log;  // deterministic ndjson
  json timings = json::array();
};

/// Trains the configured model on `pre`; writes best/last checkpoints into
/// `dir` when given.
TrainOutcome run_training(const ExperimentConfig& c, const Prepared& pre, const std::optional<fs::path>& dir) {
  TrainOutcome out;
  out.log = json{{"stamp", stamp(c)}}.dump() + "\n";
  auto record = [&](const EpochLog& e) {
    out.log += e.to_json().dump() + "\n";
    out.timings.push_back({{"epoch", e.epoch}, {"elapsed_s", e.elapsed_s}});
    std::cerr << e.to_json().dump() << "\n";
  };
  if (c.uses_ffn()) {
    const auto task = feature_task(c, pre.ds);
    FFNModel<float> m(task.spec.width(), ffn_config(c, task.classes.size()));
    const FFNEpochHook<float> hook = [&](const EpochLog& e, bool best, const FFNModel<float>& model) {
      record(e);
      if (dir && best) write_checkpoint(*dir / "best.ckpt", model.named_parameters(), checkpoint_meta(c, e.epoch, task.spec.width(), task.classes));
    };
    out.result = train<float>(m, task.x_train, task.y_train, task.x_test, task.y_test, c.schedule, hook);
    if (dir) write_checkpoint(*dir / "last.ckpt", m.named_parameters(), checkpoint_meta(c, c.schedule.epochs - 1, task.spec.width(), task.classes));
  } else {
    const auto task = sequence_task(pre.ds, pre.classes);
    TransformerModel<float> m(model_config(c, task.classes.size()));
    const EpochHook<float> hook = [&](const EpochLog& e, bool best, const TransformerModel<float>& model) {
      record(e);
      if (dir && best) write_checkpoint(*dir / "best.ckpt", model.named_parameters(), checkpoint_meta(c, e.epoch, 0, task.classes));
    };
    out.result = train<float>(m, task.train, task.test, c.schedule, hook);
    if (dir) write_checkpoint(*dir / "last.ckpt", m.named_parameters(), checkpoint_meta(c, c.schedule.epochs - 1, 0, task.classes));
  }
  return out;
}

int cmd_train(const ExperimentConfig& c, const Options& o) {
  const auto start = std::chrono::steady_clock::now();
  const auto pre = prepared_for(c);
  DirLock lock(c.out_dir);
  const fs::path dir(c.out_dir);
  const auto outcome = run_training(c, pre, dir);
  write_text(dir / "log.ndjson", outcome.log);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  write_meta(dir, "train", c, o, secs, {{"epochs", outcome.timings}, {"best_epoch", outcome.result.best_epoch}});
  std::cout << "best test MCC " << outcome.result.best_mcc << " at epoch " << outcome.result.best_epoch << "\n";
  return kOk;
}

Checkpoint load_checkpoint(const ExperimentConfig& c, const std::string& which) {
  const auto path = fs::path(c.out_dir) / which;
  if (!fs::exists(path)) throw DatasetError(DatasetError::Kind::Io, "missing checkpoint " + path.string() + " (run train first)");
  auto ck = read_checkpoint(path);
  if (ck.metadata.value("stamp", json::object()).value("config_hash", "") != c.hash()) {
    throw ConfigError("checkpoint " + path.string() + " was trained with a different config");
  }
  return ck;
}

/// Test-set truth and predictions as label values.
struct Predictions {
  std::vector<int> truth, pred;
};

Predictions predict_test(const ExperimentConfig& c, const Prepared& pre, const Checkpoint& ck) {
  Predictions p;
  std::vector<int> yi, pi;
  if (c.uses_ffn()) {
    const auto task = feature_task(c, pre.ds);
    FFNModel<float> m(task.spec.width(), ffn_config(c, task.classes.size()));
    auto named = m.named_parameters();
    load_into(ck, named);
    yi = task.y_test;
    pi = predict_classes(m, task.x_test);
  } else {
    const auto task = sequence_task(pre.ds, pre.classes);
    TransformerModel<float> m(model_config(c, task.classes.size()));
    auto named = m.named_parameters();
    load_into(ck, named);
    std::vector<TokenSeq> seqs;
    for (const auto& e : task.test) {
      seqs.push_back(e.seq);
      yi.push_back(e.label);
    }
    pi = predict_classes(m, std::span<const TokenSeq>(seqs), c.schedule.eval_batch);
  }
  for (std::size_t i = 0; i < yi.size(); ++i) {
    p.truth.push_back(pre.classes[static_cast<std::size_t>(yi[i])]);
    p.pred.push_back(pre.classes[static_cast<std::size_t>(pi[i])]);
  }
  return p;
}

json max_from_log(const fs::path& log) {
  std::ifstream in(log);
  double best = -2;
  int epoch = -1;
  std::string line;
  while (std::getline(in, line)) {
    const auto j = json::parse(line);
    if (j.contains("test_mcc") && j["test_mcc"].get<double>() > best) {
      best = j["test_mcc"].get<double>();
      epoch = j["epoch"].get<int>();
    }
  }
  if (epoch < 0) return nullptr;
  return {{"max_test_mcc", best}, {"epoch", epoch}};
}

int cmd_eval(const ExperimentConfig& c, const Options& o) {
  const auto start = std::chrono::steady_clock::now();
  const auto ck = load_checkpoint(c, "best.ckpt");
  const auto pre = prepared_for(c);
  const auto p = predict_test(c, pre, ck);
  if (p.truth.empty()) throw DatasetError(DatasetError::Kind::InsufficientData, "test split is empty");
  DirLock lock(c.out_dir);
  const fs::path dir(c.out_dir);
  const auto cm = confusion(p.truth, p.pred, pre.classes);
  json metrics{{"stamp", stamp(c)},
               {"checkpoint_epoch", ck.metadata.value("epoch", -1)},
               {"test_records", p.truth.size()},
               {"accuracy", accuracy(p.truth, p.pred)},
               {"mcc", multiclass_mcc(cm)},
               {"sign_agnostic_mcc", sign_agnostic_mcc(p.truth, p.pred)},
               {"majority_baseline", majority_baseline(p.truth)},
               {"confusion", to_json(cm)}};
  if (c.label_modulus == 0) metrics["mod2_converted_mcc"] = modl_converted_mcc(p.truth, p.pred, 2);
  if (fs::exists(dir / "log.ndjson")) metrics["training"] = max_from_log(dir / "log.ndjson");
  write_json(dir / "metrics.json", metrics);
  std::ostringstream ss;
  ss << stamp_comment(c);
  write_confusion_csv(ss, cm);
  write_text(dir / "confusion.csv", ss.str());
  // One row per target prime; sweeps concatenate these.
  std::ostringstream series;
  series << stamp_comment(c);
  const PrimeMetric row{c.target_prime, metrics["accuracy"].get<double>(), metrics["mcc"].get<double>()};
  write_prime_series_csv(series, std::span<const PrimeMetric>(&row, 1));
  write_text(dir / "series.csv", series.str());
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  write_meta(dir, "eval", c, o, secs);
  std::cout << "accuracy " << metrics["accuracy"] << " mcc " << metrics["mcc"] << "\n";
  return kOk;
}

std::string join_primes(const std::set<int>& s) {
  std::string out;
  for (int q : s) out += (out.empty() ? "" : " ") + std::to_string(q);
  return out;
}

int cmd_ablate(const ExperimentConfig& c, const Options& o) {
  if (c.exclusion_sets.empty()) throw ConfigError("$.exclusion_sets: required for ablate");
  const auto start = std::chrono::steady_clock::now();
  const auto raw = raw_records(c);
  DirLock lock(c.out_dir);
  const fs::path dir(c.out_dir);
  std::ostringstream table, log;
  table << stamp_comment(c) << "excluded,max_test_mcc,best_epoch\n";
  log << json{{"stamp", stamp(c)}}.dump() << "\n";
  json timings = json::array();
  for (const auto& set : c.exclusion_sets) {
    auto run = c;
    run.prepare.exclude_primes.insert(set.begin(), set.end());
    const Prepared pre{prepare(run, raw), label_classes(run)};
    const auto outcome = run_training(run, pre, std::nullopt);
    table << join_primes(set) << ',' << detail::num(outcome.result.best_mcc) << ',' << outcome.result.best_epoch << '\n';
    log << json{{"excluded", set}, {"max_test_mcc", outcome.result.best_mcc}, {"best_epoch", outcome.result.best_epoch}}.dump()
        << "\n";
    timings.push_back({{"excluded", set}, {"elapsed_s", outcome.timings.empty() ? 0.0 : outcome.timings.back()["elapsed_s"].get<double>()}});
  }
  write_text(dir / "ablation.csv", table.str());
  write_text(dir / "ablation.ndjson", log.str());
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  write_meta(dir, "ablate", c, o, secs, {{"runs", timings}});
  std::cout << c.exclusion_sets.size() << " exclusion sets -> " << (dir / "ablation.csv").string() << "\n";
  return kOk;
}

template <class Fn>
void write_csv(const fs::path& path, const ExperimentConfig& c, Fn&& body) {
  std::ostringstream ss;
  ss << stamp_comment(c);
  body(ss);
  write_text(path, ss.str());
}

int cmd_interpret(const ExperimentConfig& c, const Options& o, std::size_t sample) {
  const auto start = std::chrono::steady_clock::now();
  const auto ck = load_checkpoint(c, "best.ckpt");
  const auto pre = prepared_for(c);
  DirLock lock(c.out_dir);
  const fs::path dir(c.out_dir);
  json summary{{"stamp", stamp(c)}, {"checkpoint_epoch", ck.metadata.value("epoch", -1)}};
  if (c.uses_ffn()) {
    const auto task = feature_task(c, pre.ds);
    FFNModel<double> m(task.spec.width(), ffn_config(c, task.classes.size()));
    auto named = m.named_parameters();
    load_into(ck, named);
    const std::size_t n = std::min(sample, task.x_test.size());
    const std::vector<std::vector<double>> x(task.x_test.begin(), task.x_test.begin() + static_cast<std::ptrdiff_t>(n));
    const std::vector<int> y(task.y_test.begin(), task.y_test.begin() + static_cast<std::ptrdiff_t>(n));
    const auto s = saliency(m, task.spec, x, y);
    write_csv(dir / "saliency.csv", c, [&](std::ostream& os) { write_saliency_csv(os, s); });
    summary["saliency_records"] = n;
  } else {
    const auto task = sequence_task(pre.ds, pre.classes);
    TransformerModel<double> m(model_config(c, task.classes.size()));
    auto named = m.named_parameters();
    load_into(ck, named);
    const auto emb = embedding_tokens(m);
    write_csv(dir / "embeddings.csv", c, [&](std::ostream& os) { write_embedding_csv(os, emb); });
    summary["embedding_explained_variance"] = emb.explained;
    summary["embedding_parity_score"] = parity_separation_score(emb);

    const std::size_t n = std::min(sample, task.test.size());
    std::vector<TokenSeq> seqs;
    std::vector<int> labels, values;
    for (std::size_t i = 0; i < n; ++i) {
      seqs.push_back(task.test[i].seq);
      labels.push_back(task.test[i].label);
      values.push_back(task.classes[static_cast<std::size_t>(task.test[i].label)]);
    }
    const auto s = saliency(m, std::span<const TokenSeq>(seqs), labels, pre.ds.feature_primes());
    write_csv(dir / "saliency.csv", c, [&](std::ostream& os) { write_saliency_csv(os, s); });
    summary["saliency_records"] = n;
    if (m.has_decoder()) {
      const std::vector<std::string> ids(task.test_ids.begin(), task.test_ids.begin() + static_cast<std::ptrdiff_t>(n));
      const auto hidden = decoder_hidden_pca(m, std::span<const TokenSeq>(seqs), values, ids);
      write_csv(dir / "hidden.csv", c, [&](std::ostream& os) { write_hidden_csv(os, hidden); });
      summary["hidden_explained_variance"] = hidden.explained;
    }
  }
  write_json(dir / "interpret.json", summary);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  write_meta(dir, "interpret", c, o, secs);
  std::cout << "interpretability artifacts -> " << dir.string() << "\n";
  return kOk;
}

int dispatch(const std::string& command, const Options& o, std::size_t sample) {
  const auto c = load_config(o);
  if (o.validate) {
    std::cout << "ok " << c.kind << " " << c.hash() << "\n";
    return kOk;
  }
  if (command == "generate") return cmd_generate(c, o, false);
  if (command == "ingest") return cmd_generate(c, o, true);
  if (command == "prepare") return cmd_prepare(c, o);
  if (command == "train") return cmd_train(c, o);
  if (command == "eval") return cmd_eval(c, o);
  if (command == "ablate") return cmd_ablate(c, o);
  return cmd_interpret(c, o, sample);
}

int fail(int code, const std::string& what) {
  std::string line = what;
  std::replace(line.begin(), line.end(), '\n', ' ');
  std::cerr << "ectrace: " << line << "\n";
  return code;
}

}  // namespace

int main(int argc, char** argv) {
  // Training allocates and frees many same-sized buffers per step.
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);

  CLI::App app{"ectrace: learning Frobenius traces of elliptic curves"};
  app.set_version_flag("--version", kVersion);
  app.require_subcommand(1);
  Options o;
  std::size_t sample = 2000;
  app.add_subcommand("schema", "print the config JSON schema");
  for (const char* name : {"generate", "ingest", "prepare", "train", "eval", "ablate", "interpret"}) {
    auto* sub = app.add_subcommand(name);
    sub->add_option("--config", o.config, "experiment config (JSON)")->required();
    sub->add_option("--seed", o.seed, "override the config seed");
    sub->add_option("--out", o.out, "output directory (default: config out)");
    sub->add_option("--threads", o.threads, "worker threads")->default_val(1);
    sub->add_flag("--validate", o.validate, "validate the config and exit");
    if (std::string(name) == "interpret") sub->add_option("--sample", sample, "test records used for saliency")->default_val(2000);
  }
  app.get_subcommand("generate")->description("synthesize curves and write raw.csv");
  app.get_subcommand("ingest")->description("validate a CSV source and write raw.csv");
  app.get_subcommand("prepare")->description("apply the transform pipeline and write ndjson splits");
  app.get_subcommand("train")->description("train and write checkpoints and log.ndjson");
  app.get_subcommand("eval")->description("evaluate best.ckpt: metrics.json, confusion.csv and series.csv");
  app.get_subcommand("ablate")->description("retrain with each exclusion set: ablation.csv");
  app.get_subcommand("interpret")->description("embedding PCA, hidden-state PCA and saliency CSVs");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    return fail(kConfig, e.what());
  }

  if (app.got_subcommand("schema")) {
    std::cout << experiment_schema().dump(2) << "\n";
    return kOk;
  }
  const std::string command = app.get_subcommands().front()->get_name();
  try {
    return dispatch(command, o, sample);
  } catch (const ConfigError& e) {
    return fail(kConfig, e.what());
  } catch (const json::exception& e) {
    return fail(kConfig, e.what());
  } catch (const DatasetError& e) {
    return fail(kData, e.what());
  } catch (const CurveError& e) {
    return fail(kData, e.what());
  } catch (const TokenError& e) {
    return fail(kData, e.what());
  } catch (const CheckpointError& e) {
    return fail(kData, e.what());
  } catch (const std::exception& e) {
    return fail(kRuntime, e.what());
  }
}
