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

#include "selrel/selectors.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "selrel/error.hpp"
#include "selrel/random.hpp"

namespace selrel {

SelectionMode parse_selection_mode(std::string_view name) {
  if (name == "most_helpful") return SelectionMode::kMostHelpful;
  if (name == "most_harmful") return SelectionMode::kMostHarmful;
  if (name == "most_influential") return SelectionMode::kMostInfluential;
  if (name == "least_influential") return SelectionMode::kLeastInfluential;
  throw InvalidArgument("unknown selection mode '" + std::string(name) + "'");
}

std::string_view selection_mode_name(SelectionMode mode) {
  switch (mode) {
    case SelectionMode::kMostHelpful:
      return "most_helpful";
    case SelectionMode::kMostHarmful:
      return "most_harmful";
    case SelectionMode::kMostInfluential:
      return "most_influential";
    case SelectionMode::kLeastInfluential:
      return "least_influential";
  }
  return "most_influential";
}

std::string StrategyDescriptor::name() const {
  const auto with_mode = [this](const char* prefix) {
    return std::string(prefix) + ":" +
           std::string(selection_mode_name(
               mode.value_or(SelectionMode::kMostInfluential)));
  };
  switch (kind) {
    case StrategyKind::kNaive:
      return with_mode("naive");
    case StrategyKind::kRandom:
      return "random";
    case StrategyKind::kFacilityLocation:
      return with_mode("fl");
    case StrategyKind::kDivine:
      return with_mode("divine");
    case StrategyKind::kAide:
      return "aide";
  }
  return "random";
}

StrategyDescriptor parse_strategy(std::string_view name) {
  StrategyDescriptor d;
  const auto colon = name.find(':');
  const std::string_view head = name.substr(0, colon);
  const std::string_view tail =
      colon == std::string_view::npos ? std::string_view{} : name.substr(colon + 1);
  const bool takes_mode = head == "naive" || head == "fl" || head == "divine";
  if (head == "naive") {
    d.kind = StrategyKind::kNaive;
  } else if (head == "fl") {
    d.kind = StrategyKind::kFacilityLocation;
  } else if (head == "divine") {
    d.kind = StrategyKind::kDivine;
  } else if (head == "random") {
    d.kind = StrategyKind::kRandom;
  } else if (head == "aide") {
    d.kind = StrategyKind::kAide;
  } else {
    throw InvalidArgument("unknown strategy '" + std::string(name) + "'");
  }
  if (takes_mode) {
    if (tail.empty()) {
      throw InvalidArgument("strategy '" + std::string(name) +
                            "' needs a selection mode");
    }
    d.mode = parse_selection_mode(tail);
  } else if (!tail.empty()) {
    throw InvalidArgument("strategy '" + std::string(head) +
                          "' takes no selection mode");
  }
  return d;
}

Eigen::VectorXd mode_transform(const Eigen::VectorXd& scores,
                               SelectionMode mode) {
  switch (mode) {
    case SelectionMode::kMostHelpful:
      return -scores;
    case SelectionMode::kMostHarmful:
      return scores;
    case SelectionMode::kMostInfluential:
      return scores.cwiseAbs();
    case SelectionMode::kLeastInfluential:
      return -scores.cwiseAbs();
  }
  return scores;
}

std::vector<Eigen::Index> order_by_utility(const Eigen::VectorXd& utility,
                                           const std::vector<std::string>& ids) {
  std::vector<Eigen::Index> order(static_cast<std::size_t>(utility.size()));
  std::iota(order.begin(), order.end(), Eigen::Index{0});
  std::sort(order.begin(), order.end(), [&](Eigen::Index a, Eigen::Index b) {
    if (utility[a] != utility[b]) return utility[a] > utility[b];
    return ids[static_cast<std::size_t>(a)] < ids[static_cast<std::size_t>(b)];
  });
  return order;
}

namespace {

void check_budget(Eigen::Index k, Eigen::Index n, const char* who) {
  if (k < 1) {
    throw BudgetError(std::string(who) + ": budget must be >= 1");
  }
  if (k > n) {
    throw BudgetError(std::string(who) + ": budget " + std::to_string(k) +
                      " exceeds " + std::to_string(n) + " available examples");
  }
}

void check_square(const Eigen::MatrixXd& m, std::size_t n, const char* who) {
  if (m.rows() != static_cast<Eigen::Index>(n) || m.cols() != m.rows()) {
    throw InvalidArgument(std::string(who) +
                          ": similarity shape does not match candidates");
  }
}

void check_symmetric(const Eigen::MatrixXd& sim, const char* who) {
  for (Eigen::Index i = 0; i < sim.rows(); ++i) {
    for (Eigen::Index j = i + 1; j < sim.cols(); ++j) {
      if (std::abs(sim(i, j) - sim(j, i)) > 1e-9) {
        throw ContractError(std::string(who) + ": similarity is not symmetric");
      }
    }
  }
}

// Argmax of gains over untaken candidates, ascending id on exact ties.
Eigen::Index pick_best(const Eigen::VectorXd& gains, const std::vector<bool>& taken,
                       const std::vector<std::string>& ids) {
  Eigen::Index best = -1;
  for (Eigen::Index j = 0; j < gains.size(); ++j) {
    if (taken[static_cast<std::size_t>(j)]) continue;
    if (best < 0 || gains[j] > gains[best] ||
        (gains[j] == gains[best] &&
         ids[static_cast<std::size_t>(j)] < ids[static_cast<std::size_t>(best)])) {
      best = j;
    }
  }
  return best;
}

// Greedy for objectives of the form sum_j unary_j + weight * sum_{i<j} (1 -
// cos_ij). Returns positions in pick order.
std::vector<Eigen::Index> greedy_unary_plus_diversity(
    const std::vector<std::string>& ids, const Eigen::VectorXd& unary,
    const Eigen::MatrixXd& cosine, double weight, Eigen::Index k) {
  const auto n = static_cast<std::size_t>(unary.size());
  std::vector<bool> taken(n, false);
  Eigen::VectorXd diversity = Eigen::VectorXd::Zero(unary.size());
  std::vector<Eigen::Index> picked;
  for (Eigen::Index step = 0; step < k; ++step) {
    const Eigen::VectorXd gains = unary + weight * diversity;
    const Eigen::Index best = pick_best(gains, taken, ids);
    taken[static_cast<std::size_t>(best)] = true;
    picked.push_back(best);
    diversity += (1.0 - cosine.col(best).array()).matrix();
  }
  return picked;
}

std::vector<std::string> ids_at(const std::vector<std::string>& ids,
                                std::span<const Eigen::Index> positions) {
  std::vector<std::string> out;
  out.reserve(positions.size());
  for (Eigen::Index p : positions) out.push_back(ids[static_cast<std::size_t>(p)]);
  return out;
}

}  // namespace

Selection select_naive(const InfluenceRanking& ranking, Eigen::Index k,
                       SelectionMode mode) {
  check_budget(k, ranking.size(), "select_naive");
  const auto order = order_by_utility(mode_transform(ranking.scores, mode),
                                      ranking.ids);
  Selection s;
  s.test_id = ranking.test_id;
  s.estimator = ranking.estimator;
  s.strategy.kind = StrategyKind::kNaive;
  s.strategy.mode = mode;
  s.k = k;
  s.member_ids = ids_at(ranking.ids, std::span(order).first(static_cast<std::size_t>(k)));
  return s;
}

Selection select_random(const std::vector<std::string>& ids, Eigen::Index k,
                        std::uint64_t seed, int replicate) {
  const auto n = static_cast<Eigen::Index>(ids.size());
  check_budget(k, n, "select_random");
  std::vector<Eigen::Index> order(ids.size());
  std::iota(order.begin(), order.end(), Eigen::Index{0});
  CounterRng rng(hash_words({seed, static_cast<std::uint64_t>(replicate),
                             0x72616E646F6DULL}));
  for (Eigen::Index i = 0; i < k; ++i) {
    const auto j = i + static_cast<Eigen::Index>(
                           rng.below(static_cast<std::uint64_t>(n - i)));
    std::swap(order[static_cast<std::size_t>(i)], order[static_cast<std::size_t>(j)]);
  }
  Selection s;
  s.strategy.kind = StrategyKind::kRandom;
  s.strategy.seed = seed;
  s.strategy.replicate = replicate;
  s.k = k;
  s.member_ids = ids_at(ids, std::span(order).first(static_cast<std::size_t>(k)));
  s.params["seed"] = seed;
  s.params["replicate"] = replicate;
  return s;
}

std::vector<Eigen::Index> candidate_pool(const InfluenceRanking& ranking,
                                         SelectionMode mode,
                                         Eigen::Index pool_size) {
  if (pool_size < 1) throw InvalidArgument("candidate pool size must be >= 1");
  auto order = order_by_utility(mode_transform(ranking.scores, mode), ranking.ids);
  order.resize(static_cast<std::size_t>(std::min(pool_size, ranking.size())));
  return order;
}

CostVector influence_to_costs(const InfluenceRanking& ranking,
                              SelectionMode mode, double m,
                              std::span<const Eigen::Index> pool) {
  if (!(m > 1.0) || !std::isfinite(m)) {
    throw InvalidArgument("influence_to_costs: m must be finite and > 1");
  }
  if (pool.empty()) throw InvalidArgument("influence_to_costs: empty pool");
  const Eigen::VectorXd all = mode_transform(ranking.scores, mode);
  Eigen::VectorXd u(static_cast<Eigen::Index>(pool.size()));
  CostVector c;
  c.m = m;
  c.mode = mode;
  for (std::size_t i = 0; i < pool.size(); ++i) {
    u[static_cast<Eigen::Index>(i)] = all[pool[i]];
    c.ids.push_back(ranking.ids[static_cast<std::size_t>(pool[i])]);
  }
  const double u_max = u.maxCoeff();
  const double u_min = u.minCoeff();
  if (u_max == u_min) {
    c.costs = Eigen::VectorXd::Ones(u.size());
  } else {
    c.costs = (1.0 + (m - 1.0) * (u_max - u.array()) / (u_max - u_min)).matrix();
  }
  return c;
}

Eigen::MatrixXd cosine_similarity(const GradientMatrix& gradients,
                                  std::span<const Eigen::Index> rows) {
  if (!gradients.normalized()) {
    throw ContractError("cosine_similarity: gradients are not normalized");
  }
  const Eigen::MatrixXd a = gradients.columns_for(rows);
  Eigen::MatrixXd sim = a.transpose() * a;
  // Force exact symmetry and a unit diagonal.
  sim = (0.5 * (sim + sim.transpose())).eval();
  sim.diagonal().setOnes();
  return sim.cwiseMax(-1.0).cwiseMin(1.0);
}

Eigen::MatrixXd shift_to_unit_interval(const Eigen::MatrixXd& cosine) {
  return ((cosine.array() + 1.0) * 0.5).matrix();
}

double facility_location_value(const Eigen::MatrixXd& sim,
                               std::span<const Eigen::Index> members) {
  double total = 0.0;
  for (Eigen::Index i = 0; i < sim.rows(); ++i) {
    double best = 0.0;
    for (Eigen::Index j : members) best = std::max(best, sim(i, j));
    total += best;
  }
  return total;
}

Selection facility_location_select(const std::vector<std::string>& candidate_ids,
                                   const Eigen::MatrixXd& sim,
                                   const CostVector& costs, double lambda,
                                   Eigen::Index k) {
  const auto n = static_cast<Eigen::Index>(candidate_ids.size());
  check_budget(k, n, "facility_location_select");
  check_square(sim, candidate_ids.size(), "facility_location_select");
  check_symmetric(sim, "facility_location_select");
  if (!(lambda >= 0.0 && lambda <= 1.0)) {
    throw InvalidArgument("facility_location_select: lambda must lie in [0, 1]");
  }
  if (costs.ids != candidate_ids) {
    throw InvalidArgument("facility_location_select: costs not aligned with candidates");
  }
  std::vector<bool> taken(static_cast<std::size_t>(n), false);
  Eigen::VectorXd current = Eigen::VectorXd::Zero(n);
  const Eigen::VectorXd cost_term =
      costs.costs.array().pow(1.0 - lambda).matrix();
  std::vector<Eigen::Index> picked;
  std::vector<double> trace;
  for (Eigen::Index step = 0; step < k; ++step) {
    Eigen::VectorXd gains(n);
    for (Eigen::Index j = 0; j < n; ++j) {
      const double delta = (sim.col(j) - current).cwiseMax(0.0).sum();
      gains[j] = std::pow(delta + 1.0, lambda) / cost_term[j];
    }
    const Eigen::Index best = pick_best(gains, taken, candidate_ids);
    taken[static_cast<std::size_t>(best)] = true;
    picked.push_back(best);
    trace.push_back(gains[best]);
    current = current.cwiseMax(sim.col(best));
  }
  Selection s;
  s.strategy.kind = StrategyKind::kFacilityLocation;
  s.strategy.mode = costs.mode;
  s.strategy.lambda = lambda;
  s.k = k;
  s.member_ids = ids_at(candidate_ids, picked);
  s.params["lambda"] = lambda;
  s.params["m"] = costs.m;
  s.params["gains"] = trace;
  return s;
}

std::vector<double> divine_gamma_grid() {
  std::vector<double> grid(20);
  for (int i = 0; i < 20; ++i) {
    grid[static_cast<std::size_t>(i)] = std::pow(10.0, -4.0 + 9.0 * i / 19.0);
  }
  return grid;
}

double mean_pairwise_cosine_distance(const Eigen::MatrixXd& cosine,
                                     std::span<const Eigen::Index> members) {
  if (members.size() < 2) return 0.0;
  double total = 0.0;
  std::size_t pairs = 0;
  for (std::size_t a = 0; a < members.size(); ++a) {
    for (std::size_t b = a + 1; b < members.size(); ++b) {
      total += 1.0 - cosine(members[a], members[b]);
      ++pairs;
    }
  }
  return total / static_cast<double>(pairs);
}

Selection divine_select(const std::vector<std::string>& candidate_ids,
                        const Eigen::VectorXd& utilities,
                        const Eigen::MatrixXd& cosine, Eigen::Index k) {
  const auto n = static_cast<Eigen::Index>(candidate_ids.size());
  check_budget(k, n, "divine_select");
  check_square(cosine, candidate_ids.size(), "divine_select");
  if (utilities.size() != n) {
    throw InvalidArgument("divine_select: utilities not aligned with candidates");
  }
  Selection s;
  s.strategy.kind = StrategyKind::kDivine;
  s.k = k;
  if (k == 1) {
    const auto best = greedy_unary_plus_diversity(candidate_ids, utilities,
                                                  cosine, 0.0, 1);
    s.member_ids = ids_at(candidate_ids, best);
    s.params["gamma"] = nullptr;
    return s;
  }
  double best_distance = -1.0;
  double best_gamma = 0.0;
  std::vector<Eigen::Index> best_pick;
  for (double gamma : divine_gamma_grid()) {
    auto pick = greedy_unary_plus_diversity(candidate_ids, utilities, cosine,
                                            gamma, k);
    const double d = mean_pairwise_cosine_distance(cosine, pick);
    if (d > best_distance) {
      best_distance = d;
      best_gamma = gamma;
      best_pick = std::move(pick);
    }
  }
  s.member_ids = ids_at(candidate_ids, best_pick);
  s.params["gamma"] = best_gamma;
  s.params["mean_pairwise_distance"] = best_distance;
  return s;
}

Selection aide_select(const std::vector<std::string>& candidate_ids,
                      const Eigen::VectorXd& influence,
                      const Eigen::VectorXd& proximity,
                      const Eigen::MatrixXd& cosine, Eigen::Index k,
                      const AideWeights& weights) {
  const auto n = static_cast<Eigen::Index>(candidate_ids.size());
  check_budget(k, n, "aide_select");
  check_square(cosine, candidate_ids.size(), "aide_select");
  if (influence.size() != n || proximity.size() != n) {
    throw InvalidArgument("aide_select: inputs not aligned with candidates");
  }
  const Eigen::VectorXd mag = influence.cwiseAbs();
  const double lo = mag.minCoeff();
  const double hi = mag.maxCoeff();
  const Eigen::VectorXd mag_norm =
      hi > lo ? Eigen::VectorXd(((mag.array() - lo) / (hi - lo)).matrix())
              : Eigen::VectorXd::Zero(n);
  const Eigen::VectorXd unary = weights.alpha * mag_norm + weights.beta * proximity;
  const auto pick = greedy_unary_plus_diversity(candidate_ids, unary, cosine,
                                                weights.gamma, k);
  Selection s;
  s.strategy.kind = StrategyKind::kAide;
  s.k = k;
  s.member_ids = ids_at(candidate_ids, pick);
  s.params["alpha"] = weights.alpha;
  s.params["beta"] = weights.beta;
  s.params["gamma"] = weights.gamma;
  return s;
}

Selection run_strategy(const StrategyDescriptor& strategy,
                       const InfluenceRanking& ranking,
                       const GradientMatrix& train,
                       const Eigen::VectorXd& test_gradient, Eigen::Index k,
                       const SelectorOptions& options) {
  Selection s;
  const auto pooled = [&](SelectionMode mode, std::vector<std::string>& ids,
                          std::vector<Eigen::Index>& rows) {
    auto pool = candidate_pool(ranking, mode, options.pool_size);
    for (Eigen::Index p : pool) {
      ids.push_back(ranking.ids[static_cast<std::size_t>(p)]);
      rows.push_back(train.index_of(ids.back()));
    }
    return pool;
  };
  switch (strategy.kind) {
    case StrategyKind::kNaive:
      s = select_naive(ranking, k, strategy.mode.value());
      break;
    case StrategyKind::kRandom:
      s = select_random(ranking.ids, k, strategy.seed, strategy.replicate);
      break;
    case StrategyKind::kFacilityLocation: {
      const SelectionMode mode = strategy.mode.value();
      std::vector<std::string> ids;
      std::vector<Eigen::Index> rows;
      const auto pool = pooled(mode, ids, rows);
      check_budget(k, static_cast<Eigen::Index>(pool.size()),
                   "facility_location_select");
      const auto costs = influence_to_costs(ranking, mode, options.m, pool);
      Eigen::MatrixXd sim = cosine_similarity(train, rows);
      if (options.shift_similarity) sim = shift_to_unit_interval(sim);
      s = facility_location_select(ids, sim, costs, strategy.lambda.value_or(1.0), k);
      s.params["similarity"] = options.shift_similarity ? "shifted" : "cosine";
      break;
    }
    case StrategyKind::kDivine: {
      const SelectionMode mode = strategy.mode.value();
      std::vector<std::string> ids;
      std::vector<Eigen::Index> rows;
      const auto pool = pooled(mode, ids, rows);
      const Eigen::VectorXd all = mode_transform(ranking.scores, mode);
      Eigen::VectorXd u(static_cast<Eigen::Index>(pool.size()));
      for (std::size_t i = 0; i < pool.size(); ++i) {
        u[static_cast<Eigen::Index>(i)] = all[pool[i]];
      }
      s = divine_select(ids, u, cosine_similarity(train, rows), k);
      s.strategy.mode = mode;
      break;
    }
    case StrategyKind::kAide: {
      std::vector<std::string> ids;
      std::vector<Eigen::Index> rows;
      const auto pool = pooled(SelectionMode::kMostInfluential, ids, rows);
      if (test_gradient.size() != train.dim()) {
        throw InvalidArgument("aide_select: test gradient dim mismatch");
      }
      if (std::abs(test_gradient.norm() - 1.0) > kUnitNormTolerance) {
        throw ContractError("aide_select: test gradient is not normalized");
      }
      Eigen::VectorXd influence(static_cast<Eigen::Index>(pool.size()));
      Eigen::VectorXd proximity(static_cast<Eigen::Index>(pool.size()));
      for (std::size_t i = 0; i < pool.size(); ++i) {
        const auto ii = static_cast<Eigen::Index>(i);
        influence[ii] = ranking.scores[pool[i]];
        proximity[ii] = train.row(rows[i]).cast<double>().dot(test_gradient.transpose());
      }
      s = aide_select(ids, influence, proximity, cosine_similarity(train, rows),
                      k, options.aide);
      break;
    }
  }
  s.test_id = ranking.test_id;
  s.estimator = ranking.estimator;
  s.strategy.seed = strategy.seed;
  s.strategy.replicate = strategy.replicate;
  if (strategy.kind != StrategyKind::kNaive && strategy.kind != StrategyKind::kRandom) {
    s.params["pool"] = std::min(options.pool_size, ranking.size());
  }
  return s;
}

}  // namespace selrel
