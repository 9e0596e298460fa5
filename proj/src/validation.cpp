// Copyright 2026 The Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include "selrel/validation.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>

#include "selrel/error.hpp"
#include "selrel/random.hpp"

namespace selrel {

void ToyTaskSpec::validate() const {
  if (n_classes < 2) throw InvalidArgument("toy task: n_classes must be >= 2");
  if (feature_dim < 2) throw InvalidArgument("toy task: feature_dim must be >= 2");
  if (redundancy < 1) throw InvalidArgument("toy task: redundancy must be >= 1");
  if (clusters_per_class < 1) {
    throw InvalidArgument("toy task: clusters_per_class must be >= 1");
  }
  if (n_train < 1 || n_test < 0) throw InvalidArgument("toy task: bad sizes");
  if (!(label_noise >= 0.0 && label_noise <= 1.0)) {
    throw InvalidArgument("toy task: label_noise must lie in [0, 1]");
  }
}

namespace {

std::string padded_id(const char* prefix, Eigen::Index i, Eigen::Index n) {
  int width = 1;
  for (Eigen::Index m = std::max<Eigen::Index>(n - 1, 1); m >= 10; m /= 10) ++width;
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%s-%0*lld", prefix, width,
                static_cast<long long>(i));
  return buf;
}

Eigen::VectorXd augmented(const Eigen::VectorXd& x) {
  Eigen::VectorXd a(x.size() + 1);
  a.head(x.size()) = x;
  a[x.size()] = 1.0;
  return a;
}

}  // namespace

ToyDataset make_toy_task(const ToyTaskSpec& spec) {
  spec.validate();
  ToyDataset data;
  data.spec = spec;
  const int n_clusters = spec.n_classes * spec.clusters_per_class;
  const Eigen::Index f = spec.feature_dim;

  CounterRng mean_rng(hash_words({spec.seed, 1}));
  Eigen::MatrixXd means(n_clusters, f);
  for (int c = 0; c < n_clusters; ++c) {
    for (Eigen::Index j = 0; j < f; ++j) means(c, j) = spec.mean_scale * mean_rng.normal();
  }
  const auto cluster_class = [&](int c) { return c % spec.n_classes; };

  const auto draw = [&](CounterRng& rng, int& cluster) {
    cluster = static_cast<int>(rng.below(static_cast<std::uint64_t>(n_clusters)));
    Eigen::VectorXd x(f);
    for (Eigen::Index j = 0; j < f; ++j) {
      x[j] = means(cluster, j) + spec.cluster_scale * rng.normal();
    }
    return x;
  };

  CounterRng train_rng(hash_words({spec.seed, 2}));
  CounterRng noise_rng(hash_words({spec.seed, 3}));
  Eigen::VectorXd base;
  int base_cluster = 0;
  int base_label = 0;
  for (Eigen::Index i = 0; i < spec.n_train; ++i) {
    if (i % spec.redundancy == 0) {
      base = draw(train_rng, base_cluster);
      base_label = cluster_class(base_cluster);
      if (spec.label_noise > 0.0 && noise_rng.uniform() < spec.label_noise) {
        base_label = static_cast<int>(
            noise_rng.below(static_cast<std::uint64_t>(spec.n_classes)));
      }
    }
    ToyExample ex;
    ex.id = padded_id("train", i, spec.n_train);
    ex.x = base;
    if (spec.redundancy > 1) {
      for (Eigen::Index j = 0; j < f; ++j) {
        ex.x[j] += spec.duplicate_jitter * train_rng.normal();
      }
    }
    ex.label = base_label;
    data.train.push_back(std::move(ex));
    data.train_cluster.push_back(base_cluster);
  }

  CounterRng test_rng(hash_words({spec.seed, 4}));
  for (Eigen::Index i = 0; i < spec.n_test; ++i) {
    int cluster = 0;
    ToyExample ex;
    ex.id = padded_id("test", i, spec.n_test);
    ex.x = draw(test_rng, cluster);
    ex.label = cluster_class(cluster);
    data.test.push_back(std::move(ex));
    data.test_cluster.push_back(cluster);
  }
  return data;
}

ToyModel::ToyModel(int n_classes, Eigen::Index feature_dim)
    : weights_(Eigen::MatrixXd::Zero(n_classes, feature_dim + 1)) {}

ToyModel::ToyModel(Eigen::MatrixXd weights) : weights_(std::move(weights)) {}

Eigen::VectorXd ToyModel::probabilities(const Eigen::VectorXd& x) const {
  const Eigen::VectorXd logits = weights_.leftCols(feature_dim()) * x +
                                 weights_.col(feature_dim());
  const double top = logits.maxCoeff();
  Eigen::VectorXd p = (logits.array() - top).exp().matrix();
  return p / p.sum();
}

double ToyModel::log_prob(const Eigen::VectorXd& x, int label) const {
  const Eigen::VectorXd logits = weights_.leftCols(feature_dim()) * x +
                                 weights_.col(feature_dim());
  const double top = logits.maxCoeff();
  const double lse = top + std::log((logits.array() - top).exp().sum());
  return logits[label] - lse;
}

int ToyModel::predict(const Eigen::VectorXd& x) const {
  Eigen::Index best = 0;
  probabilities(x).maxCoeff(&best);
  return static_cast<int>(best);
}

double ToyModel::loss(std::span<const ToyExample> examples) const {
  if (examples.empty()) return 0.0;
  double total = 0.0;
  for (const auto& ex : examples) total -= log_prob(ex.x, ex.label);
  return total / static_cast<double>(examples.size());
}

Eigen::VectorXd ToyModel::flatten() const {
  const Eigen::Index c = weights_.rows();
  const Eigen::Index f = feature_dim();
  Eigen::VectorXd out(weights_.size());
  for (Eigen::Index r = 0; r < c; ++r) {
    out.segment(r * f, f) = weights_.row(r).head(f).transpose();
  }
  out.tail(c) = weights_.col(f);
  return out;
}

ToyModel ToyModel::unflatten(const Eigen::VectorXd& params, int n_classes,
                             Eigen::Index feature_dim) {
  if (params.size() != n_classes * (feature_dim + 1)) {
    throw InvalidArgument("ToyModel::unflatten: parameter count mismatch");
  }
  Eigen::MatrixXd w(n_classes, feature_dim + 1);
  for (Eigen::Index r = 0; r < n_classes; ++r) {
    w.row(r).head(feature_dim) = params.segment(r * feature_dim, feature_dim).transpose();
  }
  w.col(feature_dim) = params.tail(n_classes);
  return ToyModel(std::move(w));
}

Eigen::VectorXd per_example_gradient(const ToyModel& model,
                                     const Eigen::VectorXd& x, int label) {
  Eigen::VectorXd delta = model.probabilities(x);
  delta[label] -= 1.0;
  const Eigen::Index f = model.feature_dim();
  const int c = model.n_classes();
  Eigen::VectorXd g(model.param_count());
  for (int r = 0; r < c; ++r) g.segment(r * f, f) = delta[r] * x;
  g.tail(c) = delta;
  return g;
}

namespace {

Eigen::VectorXd mean_gradient(const ToyModel& model,
                              std::span<const ToyExample> batch) {
  Eigen::VectorXd sum = Eigen::VectorXd::Zero(model.param_count());
  for (const auto& ex : batch) sum += per_example_gradient(model, ex.x, ex.label);
  return sum / static_cast<double>(batch.size());
}

}  // namespace

double max_stable_lr(const ToyDataset& dataset) {
  double worst = 0.0;
  for (const auto& ex : dataset.train) {
    worst = std::max(worst, augmented(ex.x).squaredNorm());
  }
  return 4.0 / worst;
}

ToyModel train_toy_model(const ToyDataset& dataset, int epochs, double lr) {
  if (dataset.train.empty()) throw InvalidArgument("train_toy_model: no data");
  if (epochs < 0) throw InvalidArgument("train_toy_model: epochs must be >= 0");
  const int c = dataset.spec.n_classes;
  const Eigen::Index f = dataset.spec.feature_dim;
  ToyModel model(c, f);
  std::vector<double> trace = {model.loss(dataset.train)};
  for (int e = 0; e < epochs; ++e) {
    model = ToyModel::unflatten(
        model.flatten() - lr * mean_gradient(model, dataset.train), c, f);
    const double l = model.loss(dataset.train);
    if (!std::isfinite(l)) {
      throw TrainingError("train_toy_model: loss diverged at epoch " +
                          std::to_string(e + 1));
    }
    trace.push_back(l);
  }
  model.epochs = epochs;
  model.lr = lr;
  model.loss_trace = std::move(trace);
  return model;
}

GradientMatrix toy_gradients(const ToyModel& model,
                             std::span<const ToyExample> examples,
                             LabelSource labels) {
  const auto n = static_cast<Eigen::Index>(examples.size());
  RowMatrixXf rows(n, model.param_count());
  std::vector<std::string> ids;
  ids.reserve(examples.size());
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto& ex = examples[static_cast<std::size_t>(i)];
    const int label = labels == LabelSource::kOwn ? ex.label : model.predict(ex.x);
    rows.row(i) = per_example_gradient(model, ex.x, label).transpose().cast<float>();
    ids.push_back(ex.id);
  }
  std::vector<LayerSegment> segments = {
      {"weight", static_cast<std::size_t>(model.n_classes() * model.feature_dim())},
      {"bias", static_cast<std::size_t>(model.n_classes())}};
  return GradientMatrix(std::move(ids), std::move(rows), std::move(segments), false);
}

TokenBag toy_tokens(const Eigen::VectorXd& x, double bin_width) {
  TokenBag bag;
  for (Eigen::Index j = 0; j < x.size(); ++j) {
    const auto bin = static_cast<long long>(std::floor(x[j] / bin_width));
    // No '-' in tokens: they must survive tokenize() unchanged.
    ++bag["f" + std::to_string(j) + (bin < 0 ? "bn" : "bp") +
          std::to_string(bin < 0 ? -bin : bin)];
  }
  return bag;
}

ToyModel finetune_one_step(const ToyModel& model,
                           std::span<const ToyExample> batch, double lr) {
  if (batch.empty()) throw InvalidArgument("finetune_one_step: empty batch");
  ToyModel out = ToyModel::unflatten(model.flatten() - lr * mean_gradient(model, batch),
                                     model.n_classes(), model.feature_dim());
  out.epochs = model.epochs;
  out.lr = model.lr;
  return out;
}

namespace {

void check_sizes(std::span<const ToyExample> s, std::span<const ToyExample> r,
                 const char* who) {
  if (s.size() != r.size()) {
    throw InvalidArgument(std::string(who) + ": |S| = " + std::to_string(s.size()) +
                          " but |R| = " + std::to_string(r.size()));
  }
}

}  // namespace

double prediction_support(const ToyModel& model, const Eigen::VectorXd& x,
                          int predicted_label, std::span<const ToyExample> s,
                          std::span<const ToyExample> r, double lr) {
  check_sizes(s, r, "prediction_support");
  const double with_s = finetune_one_step(model, s, lr).log_prob(x, predicted_label);
  const double with_r = finetune_one_step(model, r, lr).log_prob(x, predicted_label);
  return with_s - with_r;
}

double prediction_shift(const ToyModel& model, const Eigen::VectorXd& x,
                        std::span<const ToyExample> s,
                        std::span<const ToyExample> r, double lr) {
  check_sizes(s, r, "prediction_shift");
  const Eigen::VectorXd base = model.probabilities(x);
  const double num = jsd(base, finetune_one_step(model, s, lr).probabilities(x));
  const double den = jsd(base, finetune_one_step(model, r, lr).probabilities(x));
  if (num == den) return 1.0;
  return num / std::max(den, kShiftDenominatorFloor);
}

double jsd(const Eigen::VectorXd& p, const Eigen::VectorXd& q) {
  if (p.size() != q.size() || p.size() == 0) {
    throw InvalidArgument("jsd: distributions differ in support size");
  }
  const auto check = [](const Eigen::VectorXd& d, const char* name) {
    if ((d.array() < 0.0).any() || !d.allFinite() || std::abs(d.sum() - 1.0) > 1e-6) {
      throw InvalidArgument(std::string("jsd: ") + name +
                            " is not a normalized distribution");
    }
  };
  check(p, "p");
  check(q, "q");
  double total = 0.0;
  for (Eigen::Index i = 0; i < p.size(); ++i) {
    const double m = 0.5 * (p[i] + q[i]);
    if (p[i] > 0.0) total += 0.5 * p[i] * std::log2(p[i] / m);
    if (q[i] > 0.0) total += 0.5 * q[i] * std::log2(q[i] / m);
  }
  return std::clamp(total, 0.0, 1.0);
}

std::vector<double> average_ranks(std::span<const double> values) {
  std::vector<std::size_t> order(values.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return values[a] < values[b]; });
  std::vector<double> ranks(values.size());
  std::size_t i = 0;
  while (i < order.size()) {
    std::size_t j = i;
    while (j + 1 < order.size() && values[order[j + 1]] == values[order[i]]) ++j;
    const double avg = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t t = i; t <= j; ++t) ranks[order[t]] = avg;
    i = j + 1;
  }
  return ranks;
}

double spearman(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw InvalidArgument("spearman: length mismatch");
  if (a.size() < 2) throw InvalidArgument("spearman: need at least two points");
  const auto ra = average_ranks(a);
  const auto rb = average_ranks(b);
  const Eigen::Map<const Eigen::VectorXd> x(ra.data(), static_cast<Eigen::Index>(ra.size()));
  const Eigen::Map<const Eigen::VectorXd> y(rb.data(), static_cast<Eigen::Index>(rb.size()));
  const Eigen::VectorXd xc = x.array() - x.mean();
  const Eigen::VectorXd yc = y.array() - y.mean();
  const double sx = xc.squaredNorm();
  const double sy = yc.squaredNorm();
  if (sx == 0.0 || sy == 0.0) {
    throw UndefinedCorrelationError("spearman: constant input");
  }
  return std::clamp(xc.dot(yc) / std::sqrt(sx * sy), -1.0, 1.0);
}

int rule_based_estimate(double xi_sr_db) { return xi_sr_db > 0.0 ? 1 : 0; }

std::vector<BinAccuracy> accuracy_by_bins(std::span<const ValidationRecord> records,
                                          std::span<const double> edges) {
  if (edges.size() < 2 || !std::is_sorted(edges.begin(), edges.end())) {
    throw InvalidArgument("accuracy_by_bins: need >= 2 ascending edges");
  }
  std::vector<BinAccuracy> bins(edges.size() - 1);
  std::vector<std::size_t> hits(bins.size(), 0);
  for (std::size_t b = 0; b < bins.size(); ++b) {
    bins[b].lo = edges[b];
    bins[b].hi = edges[b + 1];
  }
  for (const auto& r : records) {
    for (std::size_t b = 0; b < bins.size(); ++b) {
      if (r.xi_sr_db >= bins[b].lo && r.xi_sr_db < bins[b].hi) {
        ++bins[b].count;
        if (rule_based_estimate(r.xi_sr_db) == (r.xi_plus > 0.0 ? 1 : 0)) ++hits[b];
        break;
      }
    }
  }
  for (std::size_t b = 0; b < bins.size(); ++b) {
    if (bins[b].count > 0) {
      bins[b].accuracy = static_cast<double>(hits[b]) / static_cast<double>(bins[b].count);
    }
  }
  return bins;
}

SanityResult sanity_self_finetune(const ToyDataset& dataset, const ToyModel& model,
                                  int n_trials, double lr, std::uint64_t seed) {
  if (n_trials < 1) throw InvalidArgument("sanity_self_finetune: n_trials must be >= 1");
  if (dataset.test.empty()) throw InvalidArgument("sanity_self_finetune: no test data");
  CounterRng rng(hash_words({seed, 0x73616E697479ULL}));
  int support = 0;
  int shift = 0;
  for (int t = 0; t < n_trials; ++t) {
    const auto& test = dataset.test[static_cast<std::size_t>(t) % dataset.test.size()];
    const int yhat = model.predict(test.x);
    const ToyExample self{test.id, test.x, yhat};
    const auto& rand_ex = dataset.train[rng.below(dataset.train.size())];
    const std::span<const ToyExample> s(&self, 1);
    const std::span<const ToyExample> r(&rand_ex, 1);
    if (prediction_support(model, test.x, yhat, s, r, lr) > 0.0) ++support;
    const Eigen::VectorXd base = model.probabilities(test.x);
    const double js = jsd(base, finetune_one_step(model, s, lr).probabilities(test.x));
    const double jr = jsd(base, finetune_one_step(model, r, lr).probabilities(test.x));
    if (js > jr) ++shift;
  }
  SanityResult res;
  res.trials = n_trials;
  res.support_fraction = static_cast<double>(support) / n_trials;
  res.shift_fraction = static_cast<double>(shift) / n_trials;
  return res;
}

}  // namespace selrel
