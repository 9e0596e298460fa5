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

#pragma once

// Desk-scale validation harness: a Gaussian-cluster classification task, a
// linear softmax model, one-step fine-tuning metrics (prediction support and
// prediction shift), and the correlation statistics used to compare them
// with selection relevance.

#include <Eigen/Dense>

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "selrel/estimators.hpp"
#include "selrel/gradstore.hpp"

namespace selrel {

struct ToyTaskSpec {
  Eigen::Index n_train = 1000;
  Eigen::Index n_test = 100;
  Eigen::Index feature_dim = 16;
  int n_classes = 4;
  int clusters_per_class = 3;
  // Cluster means are drawn from N(0, mean_scale^2 I).
  double mean_scale = 2.0;
  // Within-cluster standard deviation.
  double cluster_scale = 1.0;
  // Each base training point appears `redundancy` times, perturbed by
  // N(0, duplicate_jitter^2 I). 1 means no duplication.
  int redundancy = 1;
  double duplicate_jitter = 0.05;
  // Fraction of training labels replaced by a uniformly random class.
  double label_noise = 0.0;
  std::uint64_t seed = 0;

  void validate() const;
};

struct ToyExample {
  std::string id;
  Eigen::VectorXd x;
  int label = 0;
};

struct ToyDataset {
  ToyTaskSpec spec;
  std::vector<ToyExample> train;
  std::vector<ToyExample> test;
  // Index of the generating cluster per example.
  std::vector<int> train_cluster;
  std::vector<int> test_cluster;
};

ToyDataset make_toy_task(const ToyTaskSpec& spec);

// Linear softmax classifier: logits = W [x; 1], W is classes x (features+1).
class ToyModel {
 public:
  ToyModel() = default;
  ToyModel(int n_classes, Eigen::Index feature_dim);
  explicit ToyModel(Eigen::MatrixXd weights);

  const Eigen::MatrixXd& weights() const { return weights_; }
  Eigen::MatrixXd& weights() { return weights_; }
  int n_classes() const { return static_cast<int>(weights_.rows()); }
  Eigen::Index feature_dim() const { return weights_.cols() - 1; }
  // Parameters flattened as [weight (row-major classes x features), bias].
  Eigen::Index param_count() const { return weights_.size(); }

  Eigen::VectorXd probabilities(const Eigen::VectorXd& x) const;
  double log_prob(const Eigen::VectorXd& x, int label) const;
  int predict(const Eigen::VectorXd& x) const;
  double loss(std::span<const ToyExample> examples) const;

  Eigen::VectorXd flatten() const;
  static ToyModel unflatten(const Eigen::VectorXd& params, int n_classes,
                            Eigen::Index feature_dim);

  int epochs = 0;
  double lr = 0.0;
  std::vector<double> loss_trace;

 private:
  Eigen::MatrixXd weights_;
};

// Full-batch gradient descent on mean cross-entropy from zero weights. Loss
// decreases monotonically whenever lr < max_stable_lr(dataset).
ToyModel train_toy_model(const ToyDataset& dataset, int epochs, double lr);
// 4 / max_i |[x_i; 1]|^2: the softmax cross-entropy Hessian is bounded by
// (1/2) max_i |[x_i; 1]|^2, so smaller steps are guaranteed descent steps.
double max_stable_lr(const ToyDataset& dataset);

// Flattened cross-entropy gradient (p - onehot(label)) (x) [x; 1].
Eigen::VectorXd per_example_gradient(const ToyModel& model,
                                     const Eigen::VectorXd& x, int label);

enum class LabelSource { kOwn, kPredicted };

// One (unnormalized) gradient row per example with segments
// [("weight", C*F), ("bias", C)].
GradientMatrix toy_gradients(const ToyModel& model,
                             std::span<const ToyExample> examples,
                             LabelSource labels);

// Feature-bin tokens "f<j>bp<bin>" / "f<j>bn<-bin>" so that BM25 overlap tracks feature
// proximity.
TokenBag toy_tokens(const Eigen::VectorXd& x, double bin_width = 1.0);

// theta - lr * mean gradient over the batch. The input model is unchanged.
ToyModel finetune_one_step(const ToyModel& model,
                           std::span<const ToyExample> batch, double lr);

// log p(y|x; theta+S) - log p(y|x; theta+R).
double prediction_support(const ToyModel& model, const Eigen::VectorXd& x,
                          int predicted_label, std::span<const ToyExample> s,
                          std::span<const ToyExample> r, double lr);

inline constexpr double kShiftDenominatorFloor = 1e-15;

// JSD(p, p+S) / max(JSD(p, p+R), 1e-15). Equal numerator and denominator
// give exactly 1.
double prediction_shift(const ToyModel& model, const Eigen::VectorXd& x,
                        std::span<const ToyExample> s,
                        std::span<const ToyExample> r, double lr);

// Jensen-Shannon divergence in bits.
double jsd(const Eigen::VectorXd& p, const Eigen::VectorXd& q);

// Pearson correlation of average ranks.
double spearman(std::span<const double> a, std::span<const double> b);
std::vector<double> average_ranks(std::span<const double> values);

struct ValidationRecord {
  std::string test_id;
  std::string estimator;
  std::string strategy;
  Eigen::Index k = 0;
  double xi_sr_db = 0.0;
  double xi_plus = 0.0;
  double xi_jsd = 0.0;
  std::uint64_t replicate_seed_base = 0;
};

// 1 iff the selection scores above 0 dB.
int rule_based_estimate(double xi_sr_db);

struct BinAccuracy {
  double lo = 0.0;
  double hi = 0.0;
  std::size_t count = 0;
  // Absent for empty bins.
  std::optional<double> accuracy;
};

// Bins [edges[i], edges[i+1]) over xi_sr_db; accuracy is the fraction of
// records where the rule-based estimate equals (xi_plus > 0).
std::vector<BinAccuracy> accuracy_by_bins(std::span<const ValidationRecord> records,
                                          std::span<const double> edges);

struct SanityResult {
  int trials = 0;
  double support_fraction = 0.0;  // xi_plus > 0
  double shift_fraction = 0.0;    // JSD(S) > JSD(R)
};

// Trial t fine-tunes on test instance t mod n_test (with its predicted
// label) versus one random training example. Ties count as failures.
SanityResult sanity_self_finetune(const ToyDataset& dataset, const ToyModel& model,
                                  int n_trials, double lr, std::uint64_t seed);

}  // namespace selrel
