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

// Budgeted selection strategies over an influence ranking. Ties are always
// broken by ascending (lexicographic) example id.

#include <Eigen/Dense>

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "selrel/estimators.hpp"
#include "selrel/gradstore.hpp"

namespace selrel {

enum class SelectionMode {
  kMostHelpful,       // utility -s
  kMostHarmful,       // utility  s
  kMostInfluential,   // utility |s|
  kLeastInfluential,  // utility -|s|
};

inline constexpr std::array<SelectionMode, 4> kAllSelectionModes = {
    SelectionMode::kMostHelpful, SelectionMode::kMostHarmful,
    SelectionMode::kMostInfluential, SelectionMode::kLeastInfluential};

SelectionMode parse_selection_mode(std::string_view name);
std::string_view selection_mode_name(SelectionMode mode);

enum class StrategyKind { kNaive, kRandom, kFacilityLocation, kDivine, kAide };

struct StrategyDescriptor {
  StrategyKind kind = StrategyKind::kNaive;
  std::optional<SelectionMode> mode;
  std::optional<double> lambda;  // facility location only
  std::uint64_t seed = 0;        // random only
  int replicate = 0;             // random only

  // "naive:<mode>", "random", "fl:<mode>", "divine:<mode>" or "aide".
  std::string name() const;
};

// Parses the name() form. Facility-location lambda is set separately.
StrategyDescriptor parse_strategy(std::string_view name);

struct Selection {
  std::string test_id;
  std::string estimator;
  StrategyDescriptor strategy;
  Eigen::Index k = 0;
  std::vector<std::string> member_ids;
  nlohmann::json params = nlohmann::json::object();
};

Eigen::VectorXd mode_transform(const Eigen::VectorXd& scores,
                               SelectionMode mode);

// Indices sorted by descending utility, ascending id on ties.
std::vector<Eigen::Index> order_by_utility(const Eigen::VectorXd& utility,
                                           const std::vector<std::string>& ids);

Selection select_naive(const InfluenceRanking& ranking, Eigen::Index k,
                       SelectionMode mode);

// Uniform sample without replacement; a pure function of (ids, k, seed,
// replicate).
Selection select_random(const std::vector<std::string>& ids, Eigen::Index k,
                        std::uint64_t seed, int replicate);

// The top pool_size ranking indices under the mode (all of them if fewer).
std::vector<Eigen::Index> candidate_pool(const InfluenceRanking& ranking,
                                         SelectionMode mode,
                                         Eigen::Index pool_size);

struct CostVector {
  std::vector<std::string> ids;
  Eigen::VectorXd costs;
  double m = 2.0;
  SelectionMode mode = SelectionMode::kMostInfluential;
};

// Min-max rescale of pool utilities to costs in [1, m]; the highest utility
// costs 1. Equal utilities all cost 1.
CostVector influence_to_costs(const InfluenceRanking& ranking,
                              SelectionMode mode, double m,
                              std::span<const Eigen::Index> pool);

// Pairwise cosine over the given rows of a normalized matrix.
Eigen::MatrixXd cosine_similarity(const GradientMatrix& gradients,
                                  std::span<const Eigen::Index> rows);
// (1 + cos) / 2, mapping cosines into [0, 1].
Eigen::MatrixXd shift_to_unit_interval(const Eigen::MatrixXd& cosine);

// F(S) = sum_i max(0, max_{j in S} sim_ij), positions index into sim.
double facility_location_value(const Eigen::MatrixXd& sim,
                               std::span<const Eigen::Index> members);

// Greedy maximization of (Delta(j|S) + 1)^lambda / c_j^(1 - lambda), where
// Delta is the facility-location gain. sim and costs are aligned with
// candidate_ids.
Selection facility_location_select(const std::vector<std::string>& candidate_ids,
                                   const Eigen::MatrixXd& sim,
                                   const CostVector& costs, double lambda,
                                   Eigen::Index k);

// The 20 log-spaced diversity weights in [1e-4, 1e5].
std::vector<double> divine_gamma_grid();

double mean_pairwise_cosine_distance(const Eigen::MatrixXd& cosine,
                                     std::span<const Eigen::Index> members);

// For every gamma, greedily maximizes sum u_j + gamma * sum_{i<j} (1 - cos_ij)
// and keeps the selection with the largest mean pairwise cosine distance
// (smallest gamma on ties). k = 1 reduces to the utility argmax.
Selection divine_select(const std::vector<std::string>& candidate_ids,
                        const Eigen::VectorXd& utilities,
                        const Eigen::MatrixXd& cosine, Eigen::Index k);

struct AideWeights {
  double alpha = 0.2;
  double beta = 0.8;
  double gamma = 0.5;
};

// Greedy maximization of sum (alpha |I|_norm + beta P) + gamma D(S), with
// |I| min-max normalized over the candidates, P the cosine to the test
// gradient, and D(S) = sum_{i<j} (1 - cos_ij).
Selection aide_select(const std::vector<std::string>& candidate_ids,
                      const Eigen::VectorXd& influence,
                      const Eigen::VectorXd& proximity,
                      const Eigen::MatrixXd& cosine, Eigen::Index k,
                      const AideWeights& weights = {});

struct SelectorOptions {
  double m = 2.0;
  Eigen::Index pool_size = 100;
  // Use (1 + cos) / 2 as facility-location similarity.
  bool shift_similarity = true;
  AideWeights aide;
};

// Runs one strategy end to end: pools candidates, builds similarities from
// the (normalized) training gradients and dispatches. Ranking ids are looked
// up in `train` by id.
Selection run_strategy(const StrategyDescriptor& strategy,
                       const InfluenceRanking& ranking,
                       const GradientMatrix& train,
                       const Eigen::VectorXd& test_gradient, Eigen::Index k,
                       const SelectorOptions& options = {});

}  // namespace selrel
