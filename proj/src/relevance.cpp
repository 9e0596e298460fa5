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

#include "selrel/relevance.hpp"

#include <cstdio>
#include <numeric>

#include "selrel/random.hpp"

namespace selrel {

ScoringVariant parse_scoring_variant(std::string_view name) {
  if (name == "mse" || name == "MSE") return ScoringVariant::kUnconstrainedLs;
  if (name == "nnls" || name == "MSENNLSL2") return ScoringVariant::kNnlsL2;
  if (name == "simplex" || name == "MSEProjUSimp") {
    return ScoringVariant::kProjectedSimplex;
  }
  throw InvalidArgument("unknown scoring model '" + std::string(name) +
                        "' (expected mse, nnls or simplex)");
}

std::string_view scoring_variant_name(ScoringVariant v) {
  switch (v) {
    case ScoringVariant::kUnconstrainedLs:
      return "mse";
    case ScoringVariant::kNnlsL2:
      return "nnls";
    case ScoringVariant::kProjectedSimplex:
      return "simplex";
  }
  return "simplex";
}

void ScoringModelSpec::validate() const {
  if (!(ridge_jitter > 0.0)) {
    throw InvalidArgument("scoring model: ridge_jitter must be > 0");
  }
  if (!(error_floor > 0.0 && error_floor < 1.0)) {
    throw InvalidArgument("scoring model: error_floor must lie in (0, 1)");
  }
  if (!std::isfinite(db_cap)) {
    throw InvalidArgument("scoring model: db_cap must be finite");
  }
  if (!(nnls_ridge >= 0.0)) {
    throw InvalidArgument("scoring model: nnls ridge must be >= 0");
  }
}

ProbeSet test_probe(std::string test_id, const Eigen::VectorXd& gradient) {
  ProbeSet set;
  set.mode = ProbeMode::kTestOnly;
  set.probes = gradient.transpose();
  set.source_ids.push_back(std::move(test_id));
  return set;
}

ProbeSet population_probes(const GradientMatrix& train, Eigen::Index p,
                           std::uint64_t seed) {
  if (p < 1 || p > train.rows()) {
    throw InvalidArgument("population_probes: need 1 <= p <= " +
                          std::to_string(train.rows()) + ", got " +
                          std::to_string(p));
  }
  std::vector<Eigen::Index> order(static_cast<std::size_t>(train.rows()));
  std::iota(order.begin(), order.end(), Eigen::Index{0});
  CounterRng rng(hash_words({seed, 0x70726F6265ULL}));
  for (Eigen::Index i = 0; i < p; ++i) {
    const auto j = i + static_cast<Eigen::Index>(
                           rng.below(static_cast<std::uint64_t>(train.rows() - i)));
    std::swap(order[static_cast<std::size_t>(i)], order[static_cast<std::size_t>(j)]);
  }
  ProbeSet set;
  set.mode = ProbeMode::kPopulation;
  set.seed = seed;
  set.probes.resize(p, train.dim());
  for (Eigen::Index i = 0; i < p; ++i) {
    const Eigen::Index row = order[static_cast<std::size_t>(i)];
    set.probes.row(i) = train.row(row).cast<double>();
    set.source_ids.push_back(train.id(row));
  }
  return set;
}

double to_decibels(double ratio, double cap) {
  if (!(ratio > 0.0)) {
    throw NumericError("to_decibels: ratio must be positive");
  }
  return std::min(10.0 * std::log10(ratio), cap);
}

std::string format_db_value(double decibels) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.2f", decibels);
  std::string s(buf);
  if (s == "-0.00") s = "0.00";
  return s;
}

std::string format_db(double decibels) {
  return format_db_value(decibels) + " dB";
}

}  // namespace selrel
