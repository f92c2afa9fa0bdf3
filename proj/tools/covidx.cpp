#include <cstdio>
#include <iostream>
#include <string>

#include "CLI11.hpp"
#include "covidx/run.hpp"

namespace {

enum Exit : int { kOk = 0, kUsage = 2, kData = 3, kTraining = 4, kVerify = 5 };

int exit_code(covidx::ErrorKind k) {
  switch (k) {
    case covidx::ErrorKind::usage: return kUsage;
    case covidx::ErrorKind::data: return kData;
    case covidx::ErrorKind::numeric:
    case covidx::ErrorKind::training: return kTraining;
  }
  return kData;
}

struct CommonFlags {
  std::string manifest;
  std::string mode = "holdout";
  std::uint64_t seed = 0;
  std::size_t size = 64;
  double width = 0.25;
  double depth = 0.5;
  int vgg_depth = 19;
  double lr = 1e-3;
  bool lr_literal_euler = false;
  std::size_t batch = 7;
  std::size_t epochs = 50;
  bool no_shuffle = false;
  std::string out;

  void attach(CLI::App* app) {
    app->add_option("--manifest", manifest, "CSV with header image_path,label")->required();
    app->add_option("--mode", mode, "holdout (80/20) or three_way (40/40/20)")->capture_default_str();
    app->add_option("--seed", seed, "seed for split, initialisation and shuffling")->capture_default_str();
    app->add_option("--size", size, "input pixels per side")->capture_default_str();
    app->add_option("--width", width, "channel multiplier")->capture_default_str();
    app->add_option("--depth", depth, "block-count multiplier")->capture_default_str();
    app->add_option("--vgg-depth", vgg_depth, "16 or 19")->capture_default_str();
    auto* lr_opt = app->add_option("--lr", lr, "SGD learning rate")->capture_default_str();
    app->add_flag("--lr-literal-euler", lr_literal_euler, "use learning rate e^-3 (about 0.0498)")
        ->excludes(lr_opt);
    app->add_option("--batch", batch, "minibatch size")->capture_default_str();
    app->add_option("--epochs", epochs, "training epochs")->capture_default_str();
    app->add_flag("--no-shuffle", no_shuffle, "keep training order fixed across epochs");
    app->add_option("--out", out, "output directory")->required();
  }

  covidx::RunOptions options() const {
    covidx::RunOptions o;
    o.manifest = manifest;
    o.mode = covidx::parse_split_mode(mode);
    o.seed = seed;
    o.arch.input_size = size;
    o.arch.width_mult = width;
    o.arch.depth_mult = depth;
    o.arch.vgg_depth = static_cast<std::size_t>(vgg_depth);
    o.train.learning_rate = lr_literal_euler ? std::exp(-3.0) : lr;
    o.train.batch_size = batch;
    o.train.epochs = epochs;
    o.train.shuffle_each_epoch = !no_shuffle;
    return o;
  }
};

void print_run(const covidx::RunRecord& r, const std::string& dir) {
  std::printf("%-18s accuracy %6s%%  auc %s  train %.2fs  test %.3fs  -> %s\n", r.model().c_str(),
              covidx::display2(r.metrics.accuracy_pct).c_str(),
              r.metrics.has_auc ? covidx::display2(r.metrics.auc).c_str() : "NA", r.train_seconds,
              r.test_seconds, dir.c_str());
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"COVIDX-Net desk-scale benchmark: synthetic data, training, reports"};
  app.require_subcommand(1);

  auto* synth = app.add_subcommand("synth", "write a synthetic two-class PGM dataset and manifest");
  std::size_t per_class = 25, synth_size = 64;
  std::uint64_t synth_seed = 0;
  std::string synth_out;
  synth->add_option("--per-class", per_class, "images per class")->capture_default_str();
  synth->add_option("--size", synth_size, "pixels per side")->capture_default_str();
  synth->add_option("--seed", synth_seed, "generator seed")->capture_default_str();
  synth->add_option("--out", synth_out, "output directory")->required();

  auto* train = app.add_subcommand("train", "train and evaluate one family");
  CommonFlags train_flags;
  std::string family;
  train->add_option("--family", family, "one of: " + std::string(covidx::family_names_joined()))->required();
  train_flags.attach(train);

  auto* bench = app.add_subcommand("benchmark", "train and evaluate all seven families on one split");
  CommonFlags bench_flags;
  bool all = false;
  bench->add_flag("--all", all, "run every family")->required();
  bench_flags.attach(bench);

  auto* report = app.add_subcommand("report", "regenerate plots and tables from a stored run");
  std::string run_dir;
  bool verify = false;
  report->add_option("--run", run_dir, "run directory (contains run.json)")->required();
  report->add_flag("--verify", verify, "recompute metrics from predictions and compare");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }

  try {
    if (*synth) {
      const auto path = covidx::gen_synthetic(per_class, synth_size, synth_seed, synth_out);
      std::printf("%s\n", path.string().c_str());
    } else if (*train) {
      const auto f = covidx::parse_family(family);
      const auto r = covidx::run_train(f, train_flags.options(), train_flags.out);
      print_run(r, train_flags.out);
    } else if (*bench) {
      const auto workers = covidx::worker_count_from_env();
      const auto runs = covidx::run_benchmark(
          {covidx::kAllFamilies.begin(), covidx::kAllFamilies.end()}, bench_flags.options(), bench_flags.out,
          workers, [&](const covidx::BenchmarkEntry& b) {
            if (b.ok) {
              print_run(b.record, (std::filesystem::path(bench_flags.out) / b.record.model()).string());
            } else {
              std::fprintf(stderr, "%-18s FAILED: %s\n", std::string(covidx::family_name(b.family)).c_str(),
                           b.message.c_str());
            }
            std::fflush(stdout);
          });
      std::size_t failed = 0;
      for (const auto& b : runs) failed += !b.ok;
      std::printf("summary: %s/summary.csv (%zu of %zu families failed)\n", bench_flags.out.c_str(), failed,
                  runs.size());
      if (failed) return kTraining;
    } else if (*report) {
      if (verify) {
        const auto issues = covidx::verify_run(run_dir);
        for (const auto& i : issues) std::fprintf(stderr, "mismatch: %s\n", i.c_str());
        if (!issues.empty()) return kVerify;
        std::printf("verified %s\n", run_dir.c_str());
      } else {
        covidx::regenerate_report(run_dir);
        std::printf("report written to %s\n", run_dir.c_str());
      }
    }
  } catch (const covidx::Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return exit_code(e.kind());
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kData;
  }
  return kOk;
}
