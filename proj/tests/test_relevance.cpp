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

#include <cmath>
#include <set>

#include "doctest.h"
#include "grid_oracles.hpp"
#include "selrel/error.hpp"
#include "selrel/relevance.hpp"
#include "test_util.hpp"

using namespace selrel;
using selrel::testing::gaussian;
using selrel::testing::nnls_grid_search;
using selrel::testing::nnls_objective;
using selrel::testing::random_unit_rows;
using selrel::testing::simplex_grid_projection;

namespace {

ScoringModelSpec model(ScoringVariant v) {
  ScoringModelSpec m;
  m.variant = v;
  return m;
}

}  // namespace

TEST_CASE("scoring variant names") {
  for (auto v : {ScoringVariant::kUnconstrainedLs, ScoringVariant::kNnlsL2,
                 ScoringVariant::kProjectedSimplex}) {
    CHECK(parse_scoring_variant(scoring_variant_name(v)) == v);
  }
  CHECK(scoring_variant_name(ScoringVariant::kUnconstrainedLs) == "mse");
  CHECK_THROWS_AS(parse_scoring_variant("ridge"), InvalidArgument);
  ScoringModelSpec bad;
  bad.error_floor = 1.0;
  CHECK_THROWS_AS(bad.validate(), InvalidArgument);
  bad = {};
  bad.ridge_jitter = 0.0;
  CHECK_THROWS_AS(bad.validate(), InvalidArgument);
  bad = {};
  bad.db_cap = INFINITY;
  CHECK_THROWS_AS(bad.validate(), InvalidArgument);
}

TEST_CASE("least_squares_solve examples") {
  const Eigen::Matrix2d eye = Eigen::Matrix2d::Identity();
  const Eigen::Vector2d g(0.6, 0.4);
  const Eigen::VectorXd t = least_squares_solve(eye, g, 1e-12);
  CHECK(t[0] == doctest::Approx(0.6));
  CHECK(t[1] == doctest::Approx(0.4));
  CHECK((g - eye * t).squaredNorm() <= 1e-20);

  // Duplicated column: finite solution, same residual as the single column.
  const Eigen::MatrixXd x = gaussian(8, 2, 1);
  Eigen::MatrixXd dup(8, 3);
  dup << x.col(0), x.col(1), x.col(1);
  const Eigen::VectorXd y = gaussian(8, 1, 2).col(0);
  const auto td = least_squares_solve(dup, y, default_jitter(dup, 1e-8));
  const auto ts = least_squares_solve(x, y, default_jitter(x, 1e-8));
  CHECK(td.allFinite());
  CHECK(std::abs((y - dup * td).squaredNorm() - (y - x * ts).squaredNorm()) <= 1e-6);

  Eigen::MatrixXd cols = Eigen::MatrixXd::Zero(3, 2);
  cols(0, 0) = 1;
  cols(1, 1) = 1;
  const Eigen::Vector3d orth(0, 0, 2);
  const auto to = least_squares_solve(cols, orth, 1e-8);
  CHECK(to.norm() <= 1e-12);
  CHECK((orth - cols * to).squaredNorm() == doctest::Approx(4.0));

  CHECK_THROWS_AS(least_squares_solve(cols, Eigen::Vector2d(1, 1), 1e-8),
                  InvalidArgument);
  CHECK_THROWS_AS(least_squares_solve(cols, orth, -1.0), NumericError);
  Eigen::MatrixXd nan = cols;
  nan(0, 0) = NAN;
  CHECK_THROWS_AS(least_squares_solve(nan, orth, 1e-8), NumericError);
}

TEST_CASE("project_to_simplex examples") {
  const Eigen::Vector3d on(0.2, 0.3, 0.5);
  CHECK((project_to_simplex(on) - on).norm() <= 1e-15);
  const Eigen::Vector3d w = project_to_simplex(Eigen::Vector3d(0.5, 0.5, 1.0));
  CHECK(w[0] == doctest::Approx(1.0 / 6));
  CHECK(w[1] == doctest::Approx(1.0 / 6));
  CHECK(w[2] == doctest::Approx(2.0 / 3));
  CHECK((w - simplex_grid_projection(Eigen::Vector3d(0.5, 0.5, 1.0))).norm() <= 2e-3);
  const Eigen::Vector3d d = project_to_simplex(Eigen::Vector3d(10, 0, 0));
  CHECK(d == Eigen::Vector3d(1, 0, 0));
  CHECK_THROWS_AS(project_to_simplex(Eigen::VectorXd()), InvalidArgument);
}

TEST_CASE("project_to_simplex matches the lattice oracle") {
  CounterRng rng(21);
  for (int trial = 0; trial < 20; ++trial) {
    Eigen::Vector3d v;
    for (int i = 0; i < 3; ++i) v[i] = 4.0 * rng.uniform() - 2.0;
    const Eigen::Vector3d w = project_to_simplex(v);
    CHECK((w - simplex_grid_projection(v)).norm() <= 2e-3);
  }
}

TEST_CASE("project_to_simplex feasibility") {
  CounterRng rng(22);
  for (int trial = 0; trial < 300; ++trial) {
    const Eigen::Index k = 1 + static_cast<Eigen::Index>(rng.below(25));
    Eigen::VectorXd v(k);
    for (Eigen::Index i = 0; i < k; ++i) v[i] = 100.0 * rng.normal();
    const Eigen::VectorXd w = project_to_simplex(v);
    REQUIRE(w.minCoeff() >= 0.0);
    REQUIRE(std::abs(w.sum() - 1.0) <= 1e-10);
  }
}

TEST_CASE("nnls examples") {
  // g inside the cone of the columns: same residual as unconstrained LS.
  const Eigen::MatrixXd a = gaussian(6, 3, 30).cwiseAbs();
  const Eigen::Vector3d t0(0.5, 1.0, 0.25);
  const Eigen::VectorXd g = a * t0;
  const auto r = nnls_solve(a, g, 0.0);
  CHECK((r.t - t0).norm() <= 1e-8);
  CHECK((g - a * r.t).squaredNorm() <= 1e-16);

  // g = -a1: non-negativity binds.
  const Eigen::VectorXd col = a.col(0);
  const auto neg = nnls_solve(col, (-col).eval(), 1e-3);
  CHECK(neg.t[0] == 0.0);
  CHECK((-col - col * neg.t).squaredNorm() == doctest::Approx(col.squaredNorm()));

  CHECK(nnls_solve(Eigen::MatrixXd(6, 0), g, 0.0).t.size() == 0);
  CHECK_THROWS_AS(nnls_solve(a, g, -1.0), InvalidArgument);
}

TEST_CASE("nnls KKT and grid oracle") {
  for (int trial = 0; trial < 10; ++trial) {
    const Eigen::MatrixXd a = gaussian(6, 3, 100 + trial);
    const Eigen::VectorXd g = gaussian(6, 1, 200 + trial).col(0);
    const double ridge = 1e-3;
    const auto r = nnls_solve(a, g, ridge);
    REQUIRE(r.t.minCoeff() >= 0.0);
    const Eigen::VectorXd grad = a.transpose() * (a * r.t - g) + ridge * r.t;
    for (int i = 0; i < 3; ++i) {
      if (r.t[i] > 0) {
        CHECK(std::abs(grad[i]) <= 1e-6);
      } else {
        CHECK(grad[i] >= -1e-6);
      }
    }
    CHECK(r.kkt_violation <= 1e-6);
    const Eigen::Vector3d grid = nnls_grid_search(a, g, ridge);
    if (r.t.maxCoeff() <= 3.0) {
      CHECK(std::abs(nnls_objective(a, g, ridge, r.t) -
                     nnls_objective(a, g, ridge, grid)) <= 1e-3);
    }
  }
}

TEST_CASE("nnls on degenerate and collinear columns") {
  Eigen::MatrixXd a(4, 4);
  a.col(0) << 1, 0, 0, 0;
  a.col(1) << 1, 0, 0, 0;
  a.col(2) << 0, 1, 0, 0;
  a.col(3) << 0, 0, 0, 0;
  const Eigen::Vector4d g(2, -1, 3, 0);
  const auto r = nnls_solve(a, g, 0.0);
  CHECK(r.t.minCoeff() >= 0.0);
  CHECK((a * r.t - Eigen::Vector4d(2, 0, 0, 0)).norm() <= 1e-10);
  CHECK(r.kkt_violation <= 1e-9);
}

TEST_CASE("reconstruct examples") {
  Eigen::MatrixXd a = Eigen::MatrixXd::Zero(3, 3);
  a(0, 0) = a(1, 1) = a(2, 2) = 1.0;
  const Eigen::Vector3d g(0, 1, 0);
  for (auto v : {ScoringVariant::kUnconstrainedLs, ScoringVariant::kNnlsL2,
                 ScoringVariant::kProjectedSimplex}) {
    auto m = model(v);
    m.nnls_ridge = 0.0;
    const auto r = reconstruct(a, g, m);
    CHECK((r.t - Eigen::Vector3d(0, 1, 0)).norm() <= 1e-6);
    CHECK(r.residual_sq <= 1e-12);
    CHECK(r.floored_residual_sq == doctest::Approx(1e-12));
  }

  const Eigen::MatrixXd e12 = Eigen::MatrixXd::Identity(2, 2);
  const auto s = reconstruct(e12, Eigen::Vector2d(2, 1), model(ScoringVariant::kProjectedSimplex));
  CHECK(s.t[0] == doctest::Approx(1.0));
  CHECK(std::abs(s.t[1]) <= 1e-6);
  CHECK(s.residual_sq == doctest::Approx(2.0));
  CHECK(s.ratio() == doctest::Approx(2.5));

  // Probe orthogonal to the selection: simplex weights can only add error.
  Eigen::MatrixXd cols = Eigen::MatrixXd::Zero(3, 2);
  cols(0, 0) = cols(1, 1) = 1.0;
  const auto o = reconstruct(cols, Eigen::Vector3d(0, 0, 1), model(ScoringVariant::kProjectedSimplex));
  CHECK(o.ratio() <= 1.0);
  CHECK(to_decibels(o.ratio()) <= 0.0);
  const auto ol = reconstruct(cols, Eigen::Vector3d(0, 0, 1), model(ScoringVariant::kUnconstrainedLs));
  CHECK(ol.ratio() == doctest::Approx(1.0));

  CHECK_THROWS_AS(reconstruct(Eigen::MatrixXd(3, 0), g, model(ScoringVariant::kUnconstrainedLs)),
                  EmptySelectionError);
  CHECK_THROWS_AS(reconstruct(a, Eigen::Vector2d(1, 1), model(ScoringVariant::kUnconstrainedLs)),
                  InvalidArgument);
}

TEST_CASE("simplex reconstruction feasibility over random systems") {
  CounterRng rng(40);
  for (int trial = 0; trial < 200; ++trial) {
    const Eigen::Index k = 1 + static_cast<Eigen::Index>(rng.below(25));
    const Eigen::MatrixXd a = gaussian(30, k, 1000 + trial);
    const Eigen::VectorXd g = gaussian(30, 1, 5000 + trial).col(0);
    const auto r = reconstruct(a, g, model(ScoringVariant::kProjectedSimplex));
    REQUIRE(r.t.minCoeff() >= 0.0);
    REQUIRE(std::abs(r.t.sum() - 1.0) <= 1e-10);
    const auto n = reconstruct(a, g, model(ScoringVariant::kNnlsL2));
    REQUIRE(n.t.minCoeff() >= 0.0);
  }
}

TEST_CASE("unconstrained ratio is scale invariant and duplicate-safe") {
  for (int trial = 0; trial < 20; ++trial) {
    const Eigen::MatrixXd a = gaussian(20, 4, 300 + trial);
    const Eigen::VectorXd g = gaussian(20, 1, 400 + trial).col(0);
    const auto m = model(ScoringVariant::kUnconstrainedLs);
    const double base = reconstruct(a, g, m).ratio();
    for (double c : {1e-3, 0.5, 7.0, 1e4}) {
      const double scaled = reconstruct(a, (c * g).eval(), m).ratio();
      CHECK(std::abs(scaled - base) / base <= 1e-9);
    }
    Eigen::MatrixXd dup(20, 5);
    dup << a, a.col(trial % 4);
    CHECK(reconstruct(dup, g, m).ratio() >= base * (1.0 - 1e-6));
  }
}

TEST_CASE("decibels") {
  CHECK(to_decibels(1.0) == 0.0);
  CHECK(to_decibels(10.0) == 10.0);
  CHECK(to_decibels(100.0) == 20.0);
  CHECK(to_decibels(1e30) == 120.0);
  CHECK(to_decibels(1e30, 50.0) == 50.0);
  CHECK_THROWS_AS(to_decibels(0.0), NumericError);
  CHECK_THROWS_AS(to_decibels(-1.0), NumericError);
  double prev = -INFINITY;
  for (double r = 1e-6; r < 1e11; r *= 1.7) {
    const double db = to_decibels(r);
    CHECK(db > prev);
    prev = db;
  }
  CHECK(format_db(-22.8713) == "-22.87 dB");
  CHECK(format_db(3.0103) == "3.01 dB");
  CHECK(format_db_value(-0.001) == "0.00");
  CHECK(format_db_value(10.0) == "10.00");
}

TEST_CASE("selection_relevance") {
  const Eigen::MatrixXd a = Eigen::MatrixXd::Identity(2, 2);
  // ratio 1: the orthogonal probe against a single column under LS.
  ScoringModelSpec ls = model(ScoringVariant::kUnconstrainedLs);
  const auto one = selection_relevance(a.col(0), test_probe("t", Eigen::Vector2d(0, 1)), ls);
  CHECK(one.ratio == doctest::Approx(1.0));
  CHECK(one.decibels == doctest::Approx(0.0).epsilon(1e-12));
  CHECK(one.probe_count == 1);

  // ratio 100: residual is 1% of the probe energy.
  Eigen::Vector2d g(std::sqrt(0.99), 0.1);
  const auto hundred = selection_relevance(a.col(0), test_probe("t", g), ls);
  CHECK(hundred.ratio == doctest::Approx(100.0));
  CHECK(hundred.decibels == doctest::Approx(20.0));

  const auto exact = selection_relevance(a, test_probe("t", Eigen::Vector2d(0.3, 0.7)),
                                         model(ScoringVariant::kProjectedSimplex));
  CHECK(exact.decibels == doctest::Approx(120.0));
  CHECK(exact.t.size() == 2);

  CHECK_THROWS_AS(selection_relevance(a, test_probe("t", Eigen::Vector3d(1, 0, 0)), ls),
                  InvalidArgument);
  CHECK_THROWS_AS(selection_relevance(a, test_probe("t", Eigen::Vector2d(0, 0)), ls),
                  NumericError);
}

TEST_CASE("population probes") {
  const auto train = random_unit_rows(40, 6, 9);
  const auto p = population_probes(train, 10, 77);
  CHECK(p.mode == ProbeMode::kPopulation);
  CHECK(p.probes.rows() == 10);
  CHECK(p.source_ids.size() == 10);
  std::set<std::string> unique(p.source_ids.begin(), p.source_ids.end());
  CHECK(unique.size() == 10);
  for (Eigen::Index i = 0; i < 10; ++i) {
    CHECK((p.probes.row(i).transpose() -
           train.row_as_double(train.index_of(p.source_ids[i]))).norm() == 0.0);
  }
  CHECK(population_probes(train, 10, 77).source_ids == p.source_ids);
  CHECK(population_probes(train, 10, 78).source_ids != p.source_ids);
  CHECK_THROWS_AS(population_probes(train, 0, 1), InvalidArgument);
  CHECK_THROWS_AS(population_probes(train, 41, 1), InvalidArgument);

  // Population score sums energies over probes.
  const Eigen::MatrixXd a = train.columns_for(std::vector<Eigen::Index>{0, 1, 2});
  const auto score = selection_relevance(a, p, model(ScoringVariant::kUnconstrainedLs));
  double sig = 0, err = 0;
  for (Eigen::Index i = 0; i < 10; ++i) {
    const Eigen::VectorXd g = p.probes.row(i).transpose();
    const auto r = reconstruct(a, g, model(ScoringVariant::kUnconstrainedLs));
    sig += r.g_norm_sq;
    err += r.floored_residual_sq;
  }
  CHECK(score.ratio == doctest::Approx(sig / err));
  CHECK(score.probe_count == 10);
}
