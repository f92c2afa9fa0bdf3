#pragma once

#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <mutex>
#include <cstdlib>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "covidx/architectures.hpp"
#include "covidx/data.hpp"
#include "covidx/metrics.hpp"
#include "covidx/plots.hpp"
#include "covidx/trainer.hpp"
#include "json.hpp"

namespace covidx {

inline constexpr const char* kToolVersion = "0.1.0";

using Json = nlohmann::ordered_json;

/// Runs `fn`, prefixing any library error with the pipeline stage name.
template <class Fn>
auto stage(const char* name, Fn&& fn) {
  try {
    return fn();
  } catch (const Error& e) {
    throw Error(e.kind(), std::string(name) + ": " + e.what());
  }
}

inline std::string fnv1a_hex(const std::string& s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) h = (h ^ c) * 0x100000001b3ULL;
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

inline std::string split_hash(const EntrySplit& s) {
  std::string text = std::string(split_mode_name(s.mode)) + "|" + std::to_string(s.seed);
  for (const auto* part : {&s.train, &s.validation, &s.test}) {
    text += "|";
    for (const auto& e : *part) text += e.path + "," + std::string(kClassNames[e.label]) + "\n";
  }
  return fnv1a_hex(text);
}

struct RunRecord {
  std::string tool_version = kToolVersion;
  std::string run_id;
  std::string created;
  FamilyId family = FamilyId::vgg;
  ArchConfig arch;
  TrainConfig train;
  std::string manifest;
  SplitMode mode = SplitMode::holdout;
  std::uint64_t split_seed = 0;
  std::string split_hash;
  std::vector<std::string> train_paths, validation_paths, test_paths;
  std::vector<EpochLog> epochs;
  std::vector<Prediction> predictions;
  double train_seconds = 0, test_seconds = 0;
  std::size_t parameter_count = 0;
  MetricSummary metrics;

  std::string model() const { return std::string(family_name(family)); }
};

// ---------------------------------------------------------------- CSV text

inline std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n\r") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) out += c == '"' ? std::string("\"\"") : std::string(1, c);
  return out + "\"";
}

inline std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

inline std::string full(double v) { return fmt("%.17g", v); }

inline std::string epochs_csv(const std::vector<EpochLog>& logs) {
  std::string s = "epoch,train_loss,train_acc,val_loss,val_acc,seconds\n";
  for (const auto& l : logs) {
    s += std::to_string(l.epoch) + "," + fmt("%.6f", l.train_loss) + "," + fmt("%.6f", l.train_accuracy) +
         "," + fmt("%.6f", l.val_loss) + "," + fmt("%.6f", l.val_accuracy) + "," + fmt("%.3f", l.seconds) +
         "\n";
  }
  return s;
}

inline std::string predictions_csv(const std::vector<Prediction>& preds) {
  std::string s = "path,true,pred,score\n";
  for (const auto& p : preds) {
    s += csv_field(p.path) + "," + std::string(kClassNames[p.truth]) + "," +
         std::string(kClassNames[p.predicted]) + "," + full(p.score) + "\n";
  }
  return s;
}

inline constexpr const char* kMetricsHeader =
    "model,class,precision,recall,f1,accuracy_pct,train_seconds,test_seconds\n";

inline std::string metrics_rows(const RunRecord& r) {
  std::string s;
  for (const auto& c : r.metrics.classes) {
    s += r.model() + "," + std::string(kClassNames[c.label]) + "," + display2(c.precision) + "," +
         display2(c.recall) + "," + display2(c.f1) + "," + display2(r.metrics.accuracy_pct) + "," +
         fmt("%.3f", r.train_seconds) + "," + fmt("%.3f", r.test_seconds) + "\n";
  }
  return s;
}

inline std::string roc_csv(const std::string& model, const RocCurve& roc) {
  std::string s = "model,threshold,fpr,tpr\n";
  for (const auto& p : roc.points) {
    s += model + "," + (std::isinf(p.threshold) ? std::string("inf") : full(p.threshold)) + "," +
         full(p.fpr) + "," + full(p.tpr) + "\n";
  }
  return s + model + ",auc," + full(roc.auc) + ",\n";
}

inline std::vector<Prediction> parse_predictions_csv(std::istream& in, const std::string& name) {
  std::string line;
  if (!std::getline(in, line)) fail(ErrorKind::data, name + ": empty file");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != "path,true,pred,score") fail(ErrorKind::data, name + ": unexpected header '" + line + "'");
  std::vector<Prediction> out;
  std::size_t row = 1;
  while (std::getline(in, line)) {
    ++row;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto f = detail::split_csv_line(line, row);
    const std::string where = name + " row " + std::to_string(row);
    if (f.size() != 4) fail(ErrorKind::data, where + ": expected 4 fields");
    Prediction p;
    p.path = f[0];
    try {
      p.truth = label_index(f[1]);
      p.predicted = label_index(f[2]);
      std::size_t used = 0;
      p.score = std::stod(f[3], &used);
      if (used != f[3].size()) throw std::invalid_argument("trailing characters");
    } catch (const Error& e) {
      fail(ErrorKind::data, where + ": " + e.what());
    } catch (const std::exception&) {
      fail(ErrorKind::data, where + ": malformed score '" + f[3] + "'");
    }
    if (!(p.score >= 0.0 && p.score <= 1.0)) fail(ErrorKind::data, where + ": score outside [0,1]");
    out.push_back(p);
  }
  return out;
}

// ---------------------------------------------------------------- JSON

inline Json to_json(const MetricSummary& m) {
  Json classes = Json::array();
  for (const auto& c : m.classes) {
    classes.push_back({{"class", kClassNames[c.label]},
                       {"precision", c.precision},
                       {"recall", c.recall},
                       {"f1", c.f1}});
  }
  Json j = {{"confusion", {{"tp", m.cm.tp}, {"fn", m.cm.fn}, {"fp", m.cm.fp}, {"tn", m.cm.tn}}},
            {"accuracy_pct", m.accuracy_pct},
            {"classes", classes}};
  j["auc"] = m.has_auc ? Json(m.auc) : Json(nullptr);
  return j;
}

inline Json to_json(const RunRecord& r) {
  Json epochs = Json::array();
  for (const auto& l : r.epochs) {
    epochs.push_back({{"epoch", l.epoch},
                      {"train_loss", l.train_loss},
                      {"train_acc", l.train_accuracy},
                      {"val_loss", l.val_loss},
                      {"val_acc", l.val_accuracy},
                      {"seconds", l.seconds}});
  }
  Json preds = Json::array();
  for (const auto& p : r.predictions) {
    preds.push_back({{"path", p.path},
                     {"true", kClassNames[p.truth]},
                     {"pred", kClassNames[p.predicted]},
                     {"score", p.score}});
  }
  return {
      {"tool_version", r.tool_version},
      {"run_id", r.run_id},
      {"created", r.created},
      {"family", r.model()},
      {"class_order", {kClassNames[0], kClassNames[1]}},
      {"positive_class", kClassNames[kPositiveClass]},
      {"config",
       {{"architecture",
         {{"input_size", r.arch.input_size},
          {"input_channels", r.arch.input_channels},
          {"num_classes", r.arch.num_classes},
          {"width_mult", r.arch.width_mult},
          {"depth_mult", r.arch.depth_mult},
          {"init_seed", r.arch.init_seed},
          {"vgg_depth", r.arch.vgg_depth},
          {"head_dropout", r.arch.head_dropout}}},
        {"training",
         {{"learning_rate", r.train.learning_rate},
          {"batch_size", r.train.batch_size},
          {"epochs", r.train.epochs},
          {"seed", r.train.seed},
          {"shuffle_each_epoch", r.train.shuffle_each_epoch},
          {"optimizer", "sgd"},
          {"augmentation", false}}},
        {"split", {{"manifest", r.manifest}, {"mode", split_mode_name(r.mode)}, {"seed", r.split_seed}}}}},
      {"split",
       {{"hash", r.split_hash},
        {"train", r.train_paths},
        {"validation", r.validation_paths},
        {"test", r.test_paths}}},
      {"parameter_count", r.parameter_count},
      {"epochs", epochs},
      {"predictions", preds},
      {"timings", {{"train_seconds", r.train_seconds}, {"test_seconds", r.test_seconds}}},
      {"metrics", to_json(r.metrics)},
  };
}

inline std::vector<Prediction> predictions_from_json(const Json& j) {
  std::vector<Prediction> out;
  for (const auto& p : j) {
    out.push_back({p.at("path").get<std::string>(), label_index(p.at("true").get<std::string>()),
                   label_index(p.at("pred").get<std::string>()), p.at("score").get<double>()});
  }
  return out;
}

inline RunRecord run_from_json(const Json& j) {
  RunRecord r;
  r.tool_version = j.at("tool_version").get<std::string>();
  r.run_id = j.at("run_id").get<std::string>();
  r.created = j.at("created").get<std::string>();
  r.family = parse_family(j.at("family").get<std::string>());
  const Json& a = j.at("config").at("architecture");
  r.arch.input_size = a.at("input_size").get<std::size_t>();
  r.arch.input_channels = a.at("input_channels").get<std::size_t>();
  r.arch.num_classes = a.at("num_classes").get<std::size_t>();
  r.arch.width_mult = a.at("width_mult").get<double>();
  r.arch.depth_mult = a.at("depth_mult").get<double>();
  r.arch.init_seed = a.at("init_seed").get<std::uint64_t>();
  r.arch.vgg_depth = a.at("vgg_depth").get<std::size_t>();
  r.arch.head_dropout = a.at("head_dropout").get<double>();
  const Json& t = j.at("config").at("training");
  r.train.learning_rate = t.at("learning_rate").get<double>();
  r.train.batch_size = t.at("batch_size").get<std::size_t>();
  r.train.epochs = t.at("epochs").get<std::size_t>();
  r.train.seed = t.at("seed").get<std::uint64_t>();
  r.train.shuffle_each_epoch = t.at("shuffle_each_epoch").get<bool>();
  const Json& s = j.at("config").at("split");
  r.manifest = s.at("manifest").get<std::string>();
  r.mode = parse_split_mode(s.at("mode").get<std::string>());
  r.split_seed = s.at("seed").get<std::uint64_t>();
  r.split_hash = j.at("split").at("hash").get<std::string>();
  r.train_paths = j.at("split").at("train").get<std::vector<std::string>>();
  r.validation_paths = j.at("split").at("validation").get<std::vector<std::string>>();
  r.test_paths = j.at("split").at("test").get<std::vector<std::string>>();
  r.parameter_count = j.at("parameter_count").get<std::size_t>();
  for (const auto& e : j.at("epochs")) {
    r.epochs.push_back({e.at("epoch").get<std::size_t>(), e.at("train_loss").get<double>(),
                        e.at("train_acc").get<double>(), e.at("val_loss").get<double>(),
                        e.at("val_acc").get<double>(), e.at("seconds").get<double>()});
  }
  r.predictions = predictions_from_json(j.at("predictions"));
  r.train_seconds = j.at("timings").at("train_seconds").get<double>();
  r.test_seconds = j.at("timings").at("test_seconds").get<double>();
  const Json& m = j.at("metrics");
  r.metrics.cm = {m.at("confusion").at("tp").get<std::size_t>(), m.at("confusion").at("fn").get<std::size_t>(),
                  m.at("confusion").at("fp").get<std::size_t>(), m.at("confusion").at("tn").get<std::size_t>()};
  r.metrics.accuracy_pct = m.at("accuracy_pct").get<double>();
  for (std::size_t i = 0; i < 2; ++i) {
    const Json& c = m.at("classes").at(i);
    r.metrics.classes[i] = {label_index(c.at("class").get<std::string>()), c.at("precision").get<double>(),
                            c.at("recall").get<double>(), c.at("f1").get<double>()};
  }
  r.metrics.has_auc = !m.at("auc").is_null();
  if (r.metrics.has_auc) r.metrics.auc = m.at("auc").get<double>();
  return r;
}

// ---------------------------------------------------------------- files

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  out << text;
  if (!out) fail(ErrorKind::data, "cannot write " + path.string());
}

inline std::string read_text(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::data, "missing file " + path.string());
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

/// Report files derived from a record, keyed by path relative to the run directory.
inline std::map<std::string, std::string> render_report(const RunRecord& r) {
  std::map<std::string, std::string> files;
  files["metrics.csv"] = std::string(kMetricsHeader) + metrics_rows(r);
  files["plots/curves.svg"] = svg::training_curves(r.model(), r.epochs);
  files["plots/confusion.svg"] = svg::confusion_plot(r.model(), r.metrics.cm);
  if (r.metrics.has_auc) {
    const RocCurve curve = roc(r.predictions);
    files["roc.csv"] = roc_csv(r.model(), curve);
    files["plots/roc.svg"] = svg::roc_plot(r.model(), curve);
  } else {
    files["roc.csv"] = "model,threshold,fpr,tpr\n" + r.model() + ",auc,,\n";
  }
  return files;
}

inline void write_files(const std::filesystem::path& dir, const std::map<std::string, std::string>& files) {
  for (const auto& [rel, text] : files) {
    const auto path = dir / rel;
    std::error_code ec;
    std::filesystem::create_directories(path.parent_path(), ec);
    if (ec) fail(ErrorKind::data, "cannot create " + path.parent_path().string() + ": " + ec.message());
    write_text(path, text);
  }
}

inline void write_run(const std::filesystem::path& dir, const RunRecord& r) {
  auto files = render_report(r);
  files["run.json"] = to_json(r).dump(2) + "\n";
  files["epochs.csv"] = epochs_csv(r.epochs);
  files["predictions.csv"] = predictions_csv(r.predictions);
  write_files(dir, files);
}

/// Reads run.json and predictions.csv; the CSV is the authoritative prediction list.
inline RunRecord load_run(const std::filesystem::path& dir) {
  const auto json_path = dir / "run.json";
  const auto pred_path = dir / "predictions.csv";
  if (!std::filesystem::exists(json_path)) fail(ErrorKind::data, "run record missing: " + json_path.string());
  if (!std::filesystem::exists(pred_path)) fail(ErrorKind::data, "run record missing: " + pred_path.string());
  RunRecord r;
  try {
    r = run_from_json(Json::parse(read_text(json_path)));
  } catch (const Json::exception& e) {
    fail(ErrorKind::data, "corrupt " + json_path.string() + ": " + e.what());
  }
  std::istringstream preds(read_text(pred_path));
  r.predictions = parse_predictions_csv(preds, pred_path.string());
  return r;
}

/// Regenerates report files for an existing run. All inputs are validated
/// before anything is written.
inline void regenerate_report(const std::filesystem::path& dir) {
  const RunRecord r = load_run(dir);
  write_files(dir, render_report(r));
}

/// Recomputes metrics from predictions.csv and compares with run.json.
/// Returns one message per disagreement; empty when everything matches.
inline std::vector<std::string> verify_run(const std::filesystem::path& dir, double tolerance = 1e-12) {
  const RunRecord r = load_run(dir);
  const Json stored = Json::parse(read_text(dir / "run.json"));
  std::vector<std::string> issues;
  const auto json_preds = predictions_from_json(stored.at("predictions"));
  if (json_preds.size() != r.predictions.size()) {
    issues.push_back("prediction count differs between run.json and predictions.csv");
  } else {
    for (std::size_t i = 0; i < json_preds.size(); ++i) {
      const auto& a = json_preds[i];
      const auto& b = r.predictions[i];
      if (a.path != b.path || a.truth != b.truth || a.predicted != b.predicted || a.score != b.score) {
        issues.push_back("prediction row " + std::to_string(i + 1) + " differs between run.json and predictions.csv");
      }
    }
  }
  const MetricSummary now = summarize(r.predictions);
  const MetricSummary& was = r.metrics;
  auto check = [&](const std::string& what, double a, double b) {
    if (!(std::abs(a - b) <= tolerance)) issues.push_back(what + ": stored " + full(b) + ", recomputed " + full(a));
  };
  if (!(now.cm == was.cm)) issues.push_back("confusion matrix differs");
  check("accuracy_pct", now.accuracy_pct, was.accuracy_pct);
  for (std::size_t i = 0; i < 2; ++i) {
    const std::string cls(kClassNames[now.classes[i].label]);
    if (now.classes[i].label != was.classes[i].label) issues.push_back("class order differs");
    check(cls + " precision", now.classes[i].precision, was.classes[i].precision);
    check(cls + " recall", now.classes[i].recall, was.classes[i].recall);
    check(cls + " f1", now.classes[i].f1, was.classes[i].f1);
  }
  if (now.has_auc != was.has_auc) issues.push_back("auc presence differs");
  else if (now.has_auc) check("auc", now.auc, was.auc);
  return issues;
}

// ---------------------------------------------------------------- pipeline

struct RunOptions {
  std::filesystem::path manifest;
  SplitMode mode = SplitMode::holdout;
  std::uint64_t seed = 0;
  ArchConfig arch;
  TrainConfig train;
};

inline std::string utc_now() {
  const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

struct PreparedData {
  EntrySplit entries;
  DatasetSplit samples;
  std::string hash;
};

inline PreparedData prepare_data(const RunOptions& o) {
  PreparedData d;
  const auto manifest = stage("manifest", [&] { return load_manifest(o.manifest); });
  if (manifest.empty()) fail(ErrorKind::data, "manifest: no data rows in " + o.manifest.string());
  d.entries = stage("split", [&] { return split_entries(manifest, o.seed, o.mode); });
  d.samples = stage("preprocess", [&] { return load_split(d.entries, o.arch.input_size); });
  d.hash = split_hash(d.entries);
  return d;
}

/// build -> fit -> predict -> metrics for one family on an already loaded split.
inline RunRecord train_family(FamilyId family, const RunOptions& o, const PreparedData& data) {
  RunRecord r;
  r.created = utc_now();
  std::string compact = r.created;
  std::erase(compact, '-');
  std::erase(compact, ':');
  r.run_id = compact + "-seed" + std::to_string(o.seed);
  r.family = family;
  r.arch = o.arch;
  r.arch.init_seed = o.seed;
  r.train = o.train;
  r.train.seed = o.seed;
  r.manifest = o.manifest.string();
  r.mode = o.mode;
  r.split_seed = o.seed;
  r.split_hash = data.hash;
  for (const auto& e : data.entries.train) r.train_paths.push_back(e.path);
  for (const auto& e : data.entries.validation) r.validation_paths.push_back(e.path);
  for (const auto& e : data.entries.test) r.test_paths.push_back(e.path);

  auto model = stage("build", [&] { return build_family<float>(family, r.arch); });
  r.parameter_count = parameter_count(model);
  const auto fitted = stage("train", [&] { return fit(model, data.samples, r.train); });
  r.epochs = fitted.logs;
  r.train_seconds = fitted.train_seconds;
  auto predicted = stage("predict", [&] { return predict(model, data.samples.test); });
  r.predictions = std::move(predicted.predictions);
  r.test_seconds = predicted.test_seconds;
  r.metrics = stage("metrics", [&] { return summarize(r.predictions); });
  return r;
}

inline RunRecord run_train(FamilyId family, const RunOptions& o, const std::filesystem::path& out_dir) {
  validate(o.train);
  validate(o.arch);
  const PreparedData data = prepare_data(o);
  RunRecord r = train_family(family, o, data);
  stage("persist", [&] {
    write_run(out_dir, r);
    return 0;
  });
  return r;
}

struct BenchmarkEntry {
  FamilyId family = FamilyId::vgg;
  bool ok = false;
  std::string message;
  RunRecord record;
};

inline std::size_t worker_count_from_env() {
  const char* v = std::getenv("COVIDX_THREADS");
  if (!v || !*v) return 1;
  char* end = nullptr;
  const long n = std::strtol(v, &end, 10);
  if (*end != '\0' || n < 1) fail(ErrorKind::usage, std::string("COVIDX_THREADS must be a positive integer, got '") + v + "'");
  return static_cast<std::size_t>(n);
}

inline std::string summary_csv(const std::vector<BenchmarkEntry>& runs) {
  std::string s = "model,status,accuracy_pct,auc,train_seconds,test_seconds,split_hash,message\n";
  for (const auto& b : runs) {
    const std::string model(family_name(b.family));
    if (b.ok) {
      const auto& r = b.record;
      s += model + ",ok," + display2(r.metrics.accuracy_pct) + "," +
           (r.metrics.has_auc ? display2(r.metrics.auc) : std::string("NA")) + "," + fmt("%.3f", r.train_seconds) +
           "," + fmt("%.3f", r.test_seconds) + "," + r.split_hash + ",\n";
    } else {
      s += model + ",failed,NA,NA,NA,NA,," + csv_field(b.message) + "\n";
    }
  }
  return s;
}

inline std::string combined_metrics_csv(const std::vector<BenchmarkEntry>& runs) {
  std::string s = kMetricsHeader;
  for (const auto& b : runs) {
    if (b.ok) {
      s += metrics_rows(b.record);
    } else {
      for (std::size_t label : {kPositiveClass, kNormal}) {
        s += std::string(family_name(b.family)) + "," + std::string(kClassNames[label]) + ",NA,NA,NA,NA,NA,NA\n";
      }
    }
  }
  return s;
}

/// Trains the given families on one shared split. A family's failure is
/// recorded in its entry and does not stop the others.
inline std::vector<BenchmarkEntry> run_benchmark(const std::vector<FamilyId>& families, const RunOptions& o,
                                                 const std::filesystem::path& out_dir, std::size_t workers,
                                                 const std::function<void(const BenchmarkEntry&)>& on_done = {}) {
  validate(o.train);
  validate(o.arch);
  const PreparedData data = prepare_data(o);
  std::vector<BenchmarkEntry> runs(families.size());
  std::atomic<std::size_t> next{0};
  std::mutex report_mutex;
  auto worker = [&] {
    for (std::size_t i = next++; i < families.size(); i = next++) {
      BenchmarkEntry& b = runs[i];
      b.family = families[i];
      try {
        b.record = train_family(b.family, o, data);
        write_run(out_dir / std::string(family_name(b.family)), b.record);
        b.ok = true;
      } catch (const std::exception& e) {
        b.message = e.what();
      }
      if (on_done) {
        std::lock_guard lock(report_mutex);
        on_done(b);
      }
    }
  };
  workers = std::clamp<std::size_t>(workers, 1, std::max<std::size_t>(1, families.size()));
  if (workers == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  write_files(out_dir, {{"summary.csv", summary_csv(runs)}, {"metrics.csv", combined_metrics_csv(runs)}});
  return runs;
}

}  // namespace covidx
