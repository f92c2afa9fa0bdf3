#include <gtest/gtest.h>

#include <regex>

#include "covidx/run.hpp"
#include "golden.hpp"

using namespace covidx;
namespace fs = std::filesystem;

namespace {

fs::path fresh_dir(const std::string& name) {
  const auto dir = fs::temp_directory_path() / ("covidx_test_report_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

RunRecord fabricated_record(std::size_t epochs) {
  RunRecord r;
  r.run_id = "20260101T000000Z-seed3";
  r.created = "2026-01-01T00:00:00Z";
  r.family = FamilyId::densenet;
  r.train.epochs = epochs;
  r.split_hash = "0123456789abcdef";
  r.predictions = test::predictions_for({5, 0, 1, 4});
  r.predictions[2].score = 0.7;
  r.predictions[7].score = 0.3;
  for (const auto& p : r.predictions) r.test_paths.push_back(p.path);
  for (std::size_t e = 1; e <= epochs; ++e) {
    const double t = static_cast<double>(e) / static_cast<double>(epochs);
    r.epochs.push_back({e, 0.7 * (1 - t) + 0.01, 0.5 + 0.5 * t, 0.75 * (1 - t) + 0.02, 0.4 + 0.5 * t, 0.01});
  }
  r.train_seconds = 1.25;
  r.test_seconds = 0.0625;
  r.parameter_count = 1234;
  r.metrics = summarize(r.predictions);
  return r;
}

std::size_t polyline_points(const std::string& svg, const std::string& series) {
  const std::regex re("data-series=\"" + series + "\"[^>]*points=\"([^\"]*)\"");
  std::smatch m;
  if (!std::regex_search(svg, m, re)) return 0;
  const std::string pts = m[1];
  return pts.empty() ? 0 : static_cast<std::size_t>(std::count(pts.begin(), pts.end(), ' ')) + 1;
}

}  // namespace

TEST(RunRecord, JsonRoundTrip) {
  const RunRecord r = fabricated_record(5);
  const RunRecord back = run_from_json(Json::parse(to_json(r).dump()));
  EXPECT_EQ(to_json(back).dump(), to_json(r).dump());
  EXPECT_EQ(back.family, r.family);
  EXPECT_EQ(back.metrics.cm, r.metrics.cm);
  ASSERT_EQ(back.predictions.size(), r.predictions.size());
  EXPECT_EQ(back.predictions[2].score, 0.7);
}

TEST(RunRecord, PredictionsCsvRoundTripsExactly) {
  auto preds = test::predictions_for({2, 3, 0, 5});
  preds[0].score = 0.1 + 0.2;
  preds[1].path = "dir with, comma/x.png";
  std::istringstream in(predictions_csv(preds));
  const auto back = parse_predictions_csv(in, "p.csv");
  ASSERT_EQ(back.size(), preds.size());
  for (std::size_t i = 0; i < preds.size(); ++i) {
    EXPECT_EQ(back[i].path, preds[i].path);
    EXPECT_EQ(back[i].truth, preds[i].truth);
    EXPECT_EQ(back[i].predicted, preds[i].predicted);
    EXPECT_EQ(back[i].score, preds[i].score);
  }
  std::istringstream bad("path,true,pred,score\nx,covid19,normal,1.5\n");
  EXPECT_THROW(parse_predictions_csv(bad, "bad.csv"), Error);
  std::istringstream label("path,true,pred,score\nx,flu,normal,0.5\n");
  EXPECT_THROW(parse_predictions_csv(label, "label.csv"), Error);
}

TEST(Report, MetricsCsvShape) {
  const auto files = render_report(fabricated_record(3));
  EXPECT_EQ(files.at("metrics.csv"),
            "model,class,precision,recall,f1,accuracy_pct,train_seconds,test_seconds\n"
            "densenet,covid19,0.83,1.00,0.91,90.00,1.250,0.062\n"
            "densenet,normal,1.00,0.80,0.89,90.00,1.250,0.062\n");
  const std::string& roc_text = files.at("roc.csv");
  EXPECT_EQ(roc_text.rfind("model,threshold,fpr,tpr\ndensenet,inf,0,0\n", 0), 0u);
  EXPECT_NE(roc_text.find("\ndensenet,auc,"), std::string::npos);
  EXPECT_NE(files.at("plots/roc.svg").find("AUC = "), std::string::npos);
}

TEST(Report, CurvesHaveOnePointPerEpoch) {
  const auto files = render_report(fabricated_record(50));
  const std::string& svg = files.at("plots/curves.svg");
  for (const char* s : {"train_loss", "val_loss", "train_acc", "val_acc"}) EXPECT_EQ(polyline_points(svg, s), 50u) << s;
  const std::string& cm = files.at("plots/confusion.svg");
  for (const char* count : {">5<", ">0<", ">1<", ">4<"}) EXPECT_NE(cm.find(count), std::string::npos);
}

TEST(Report, RegenerationIsIdempotent) {
  const auto dir = fresh_dir("idem");
  write_run(dir, fabricated_record(7));
  regenerate_report(dir);
  std::map<std::string, std::string> first;
  for (const char* f : {"metrics.csv", "roc.csv", "plots/curves.svg", "plots/confusion.svg", "plots/roc.svg"}) {
    first[f] = read_text(dir / f);
  }
  regenerate_report(dir);
  for (const auto& [f, text] : first) EXPECT_EQ(read_text(dir / f), text) << f;
  EXPECT_TRUE(verify_run(dir).empty());
}

TEST(Report, MissingPredictionsLeavesNoPartialOutput) {
  const auto dir = fresh_dir("missing");
  write_run(dir, fabricated_record(4));
  fs::remove(dir / "predictions.csv");
  fs::remove_all(dir / "plots");
  fs::remove(dir / "metrics.csv");
  try {
    regenerate_report(dir);
    FAIL() << "regeneration succeeded without predictions.csv";
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::data);
    EXPECT_NE(std::string(e.what()).find("predictions.csv"), std::string::npos);
  }
  EXPECT_FALSE(fs::exists(dir / "plots"));
  EXPECT_FALSE(fs::exists(dir / "metrics.csv"));
  EXPECT_THROW(verify_run(dir), Error);

  const auto empty = fresh_dir("norun");
  EXPECT_THROW(regenerate_report(empty), Error);
}

TEST(Report, VerifyDetectsTampering) {
  const auto dir = fresh_dir("tamper");
  write_run(dir, fabricated_record(4));
  ASSERT_TRUE(verify_run(dir).empty());

  std::string csv = read_text(dir / "predictions.csv");
  const auto pos = csv.find(",covid19,covid19,");
  ASSERT_NE(pos, std::string::npos);
  csv.replace(pos, 17, ",covid19,normal,");
  write_text(dir / "predictions.csv", csv);
  const auto issues = verify_run(dir);
  EXPECT_FALSE(issues.empty());

  write_run(dir, fabricated_record(4));
  auto j = Json::parse(read_text(dir / "run.json"));
  j["metrics"]["accuracy_pct"] = 80.0;
  write_text(dir / "run.json", j.dump(2));
  EXPECT_FALSE(verify_run(dir).empty());

  write_text(dir / "run.json", "{ not json");
  EXPECT_THROW(verify_run(dir), Error);
}

TEST(Pipeline, TrainPersistsAndVerifies) {
  const auto dir = fresh_dir("train");
  RunOptions o;
  o.manifest = gen_synthetic(5, 32, 1, dir / "data");
  o.seed = 2;
  o.arch.input_size = 32;
  o.train.epochs = 3;
  const auto r = run_train(FamilyId::mobilenet_v2, o, dir / "run");
  EXPECT_EQ(r.predictions.size(), 2u);
  EXPECT_EQ(r.epochs.size(), 3u);
  EXPECT_EQ(r.train_paths.size(), 8u);
  for (const char* f : {"run.json", "epochs.csv", "predictions.csv", "metrics.csv", "roc.csv", "plots/curves.svg",
                        "plots/confusion.svg", "plots/roc.svg"}) {
    EXPECT_TRUE(fs::exists(dir / "run" / f)) << f;
  }
  EXPECT_TRUE(verify_run(dir / "run").empty());
  const auto loaded = load_run(dir / "run");
  EXPECT_EQ(loaded.train.learning_rate, 1e-3);
  EXPECT_EQ(loaded.train.batch_size, 7u);
  EXPECT_EQ(loaded.split_hash, r.split_hash);

  RunOptions missing = o;
  missing.manifest = dir / "nope.csv";
  try {
    run_train(FamilyId::mobilenet_v2, missing, dir / "run2");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(std::string(e.what()).rfind("manifest: ", 0), 0u) << e.what();
  }
}

TEST(Pipeline, BenchmarkSharesOneSplit) {
  const auto dir = fresh_dir("bench");
  RunOptions o;
  o.manifest = gen_synthetic(5, 32, 1, dir / "data");
  o.arch.input_size = 32;
  o.train.epochs = 1;
  const auto runs = run_benchmark({kAllFamilies.begin(), kAllFamilies.end()}, o, dir / "out", 1);
  ASSERT_EQ(runs.size(), 7u);
  for (const auto& b : runs) {
    ASSERT_TRUE(b.ok) << b.message;
    EXPECT_EQ(b.record.split_hash, runs[0].record.split_hash);
    EXPECT_EQ(b.record.test_paths, runs[0].record.test_paths);
    EXPECT_GT(b.record.train_seconds, 0.0);
    EXPECT_GT(b.record.test_seconds, 0.0);
    EXPECT_TRUE(fs::exists(dir / "out" / b.record.model() / "run.json"));
  }
  const std::string metrics = read_text(dir / "out" / "metrics.csv");
  EXPECT_EQ(std::count(metrics.begin(), metrics.end(), '\n'), 15);
  const std::string summary = read_text(dir / "out" / "summary.csv");
  EXPECT_EQ(std::count(summary.begin(), summary.end(), '\n'), 8);
}

TEST(Pipeline, FailedFamilyDoesNotStopOthers) {
  const auto dir = fresh_dir("benchfail");
  RunOptions o;
  o.manifest = gen_synthetic(5, 32, 1, dir / "data");
  o.arch.input_size = 32;
  o.train.epochs = 1;
  o.train.learning_rate = 1e30;
  const auto runs = run_benchmark({FamilyId::vgg, FamilyId::inception}, o, dir / "out", 2);
  ASSERT_EQ(runs.size(), 2u);
  EXPECT_FALSE(runs[0].ok);
  const std::string summary = read_text(dir / "out" / "summary.csv");
  for (const auto& b : runs) {
    if (!b.ok) {
      EXPECT_NE(b.message.find("train: "), std::string::npos) << b.message;
      EXPECT_NE(summary.find(std::string(family_name(b.family)) + ",failed"), std::string::npos);
    }
  }
  const std::string metrics = read_text(dir / "out" / "metrics.csv");
  EXPECT_EQ(std::count(metrics.begin(), metrics.end(), '\n'), 5);
}

TEST(Pipeline, WorkerCountDoesNotChangeResults) {
  const auto dir = fresh_dir("workers");
  RunOptions o;
  o.manifest = gen_synthetic(5, 32, 1, dir / "data");
  o.arch.input_size = 32;
  o.train.epochs = 2;
  const std::vector<FamilyId> families = {FamilyId::inception, FamilyId::xception, FamilyId::densenet};
  const auto one = run_benchmark(families, o, dir / "one", 1);
  const auto three = run_benchmark(families, o, dir / "three", 3);
  for (std::size_t i = 0; i < families.size(); ++i) {
    ASSERT_TRUE(one[i].ok && three[i].ok);
    EXPECT_EQ(predictions_csv(one[i].record.predictions), predictions_csv(three[i].record.predictions));
    for (std::size_t e = 0; e < one[i].record.epochs.size(); ++e) {
      EXPECT_EQ(one[i].record.epochs[e].train_loss, three[i].record.epochs[e].train_loss);
      EXPECT_EQ(one[i].record.epochs[e].val_loss, three[i].record.epochs[e].val_loss);
    }
  }
}
