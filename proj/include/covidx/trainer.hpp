#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "covidx/architectures.hpp"
#include "covidx/data.hpp"

namespace covidx {

struct TrainConfig {
  double learning_rate = 1e-3;
  std::size_t batch_size = 7;
  std::size_t epochs = 50;
  std::uint64_t seed = 0;
  bool shuffle_each_epoch = true;
};

inline void validate(const TrainConfig& c) {
  if (!(c.learning_rate >= 0.0) || !std::isfinite(c.learning_rate)) {
    fail(ErrorKind::usage, "learning rate must be finite and non-negative");
  }
  if (c.batch_size < 1) fail(ErrorKind::usage, "batch size must be at least 1");
  if (c.epochs < 1) fail(ErrorKind::usage, "epochs must be at least 1");
}

struct EpochLog {
  std::size_t epoch = 0;  // 1-based
  double train_loss = 0;
  double train_accuracy = 0;
  double val_loss = 0;
  double val_accuracy = 0;
  double seconds = 0;
};

struct Prediction {
  std::string path;
  std::size_t truth = 0;
  std::size_t predicted = 0;
  double score = 0;  // probability of the positive class
};

/// theta <- theta - lr * grad, then clears the gradients.
template <class T>
void sgd_step(std::vector<Parameter<T>*> params, double learning_rate) {
  for (Parameter<T>* p : params) {
    if (p->grad.shape() != p->value.shape()) {
      fail(ErrorKind::training, "sgd_step: parameter " + p->id + " has no gradient");
    }
    const T lr = static_cast<T>(learning_rate);
    for (std::size_t i = 0; i < p->value.size(); ++i) p->value[i] -= lr * p->grad[i];
    p->zero_grad();
  }
}

template <class T>
void sgd_step(Model<T>& model, double learning_rate) {
  sgd_step(model.parameters(), learning_rate);
}

/// Contiguous batch sizes covering n samples; the last batch may be smaller.
inline std::vector<std::size_t> batch_schedule(std::size_t n, std::size_t batch_size) {
  if (batch_size < 1) fail(ErrorKind::usage, "batch size must be at least 1");
  std::vector<std::size_t> sizes;
  for (std::size_t done = 0; done < n; done += batch_size) sizes.push_back(std::min(batch_size, n - done));
  return sizes;
}

/// Index of the largest entry; ties go to the lower index.
template <class T>
std::size_t argmax_row(const Tensor<T>& probs, std::size_t row) {
  const std::size_t k = probs.dim(1);
  std::size_t best = 0;
  for (std::size_t j = 1; j < k; ++j) {
    if (probs[row * k + j] > probs[row * k + best]) best = j;
  }
  return best;
}

struct EvalResult {
  double loss = 0;
  double accuracy = 0;
  std::vector<Prediction> predictions;
  Tensor<float> probabilities;
};

/// Infer-mode forward pass in batches of `batch_size`.
inline EvalResult evaluate(Model<float>& model, const std::vector<Sample>& samples,
                           std::size_t batch_size = 32) {
  EvalResult r;
  if (samples.empty()) return r;
  NoGradGuard no_grad;
  std::size_t correct = 0;
  double loss_sum = 0;
  std::vector<float> probs;
  std::size_t start = 0;
  for (std::size_t b : batch_schedule(samples.size(), batch_size)) {
    std::vector<std::size_t> idx(b);
    std::iota(idx.begin(), idx.end(), start);
    auto [images, targets] = make_batch(samples, idx);
    const auto p = forward(model, images, Mode::infer);
    loss_sum += static_cast<double>(cross_entropy(p, targets).value()[0]) * static_cast<double>(b);
    for (std::size_t i = 0; i < b; ++i) {
      const Sample& s = samples[start + i];
      const std::size_t pred = argmax_row(p.value(), i);
      correct += pred == s.label;
      r.predictions.push_back({s.path, s.label, pred, static_cast<double>(p.value()[i * 2 + kPositiveClass])});
    }
    probs.insert(probs.end(), p.value().values().begin(), p.value().values().end());
    start += b;
  }
  r.loss = loss_sum / static_cast<double>(samples.size());
  r.accuracy = static_cast<double>(correct) / static_cast<double>(samples.size());
  r.probabilities = Tensor<float>({samples.size(), kClassNames.size()}, std::move(probs));
  return r;
}

struct FitResult {
  std::vector<EpochLog> logs;
  double train_seconds = 0;
};

/// Plain minibatch SGD for `config.epochs` epochs; the final-epoch weights
/// are kept. Train metrics are running averages over the epoch's batches.
inline FitResult fit(Model<float>& model, const DatasetSplit& split, const TrainConfig& config) {
  validate(config);
  if (split.train.empty()) fail(ErrorKind::training, "fit: empty training partition");
  using Clock = std::chrono::steady_clock;
  const auto started = Clock::now();
  Rng order_rng(derive_seed(config.seed, 101));
  Rng dropout_rng(derive_seed(config.seed, 202));
  std::vector<std::size_t> order(split.train.size());
  std::iota(order.begin(), order.end(), 0);
  const auto schedule = batch_schedule(order.size(), config.batch_size);
  const auto params = model.parameters();

  FitResult result;
  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    const auto epoch_start = Clock::now();
    if (config.shuffle_each_epoch) order_rng.shuffle(order);
    double loss_sum = 0;
    std::size_t correct = 0, start = 0;
    for (std::size_t bi = 0; bi < schedule.size(); ++bi) {
      const std::vector<std::size_t> idx(order.begin() + static_cast<long>(start),
                                         order.begin() + static_cast<long>(start + schedule[bi]));
      auto [images, targets] = make_batch(split.train, idx);
      Var<float> probs, loss;
      try {
        probs = forward(model, images, Mode::train, &dropout_rng);
        loss = cross_entropy(probs, targets);
      } catch (const Error& e) {
        if (e.kind() != ErrorKind::numeric) throw;
        fail(ErrorKind::training, "non-finite values at epoch " + std::to_string(epoch) + ", batch " +
                                      std::to_string(bi + 1) + ": " + e.what());
      }
      const double l = loss.value()[0];
      if (!std::isfinite(l)) {
        fail(ErrorKind::training, "non-finite loss at epoch " + std::to_string(epoch) + ", batch " +
                                      std::to_string(bi + 1));
      }
      loss_sum += l * static_cast<double>(schedule[bi]);
      for (std::size_t i = 0; i < idx.size(); ++i) {
        correct += argmax_row(probs.value(), i) == split.train[idx[i]].label;
      }
      for (auto* p : params) p->zero_grad();
      backward(loss);
      sgd_step(params, config.learning_rate);
      start += schedule[bi];
    }
    EpochLog log;
    log.epoch = epoch;
    log.train_loss = loss_sum / static_cast<double>(order.size());
    log.train_accuracy = static_cast<double>(correct) / static_cast<double>(order.size());
    const auto val = evaluate(model, split.validation);
    log.val_loss = val.loss;
    log.val_accuracy = val.accuracy;
    log.seconds = std::chrono::duration<double>(Clock::now() - epoch_start).count();
    result.logs.push_back(log);
  }
  result.train_seconds = std::chrono::duration<double>(Clock::now() - started).count();
  return result;
}

struct PredictResult {
  std::vector<Prediction> predictions;
  double test_seconds = 0;
};

inline PredictResult predict(Model<float>& model, const std::vector<Sample>& samples) {
  for (const auto& s : samples) {
    if (s.image.shape() != Shape{model.config.input_channels, model.config.input_size, model.config.input_size}) {
      fail(ErrorKind::data, "predict: sample " + s.path + " has shape " + shape_str(s.image.shape()) +
                                ", model expects input size " + std::to_string(model.config.input_size));
    }
  }
  const auto started = std::chrono::steady_clock::now();
  auto r = evaluate(model, samples);
  return {std::move(r.predictions),
          std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count()};
}

}  // namespace covidx
