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

// Selection relevance: how well a selection's gradients (the columns of A)
// reconstruct probe gradients g under a constrained linear model.
//
//   ratio = sum_probes |g|^2 / sum_probes |g - A t_g|^2,   dB = 10 log10(ratio)
//
// Kernels are templated on the Eigen expression type and work for any
// floating scalar; the domain structs below are double-valued.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <string>
#include <string_view>
#include <vector>

#include "selrel/error.hpp"
#include "selrel/gradstore.hpp"

namespace selrel {

template <class Scalar>
using VectorX = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;
template <class Scalar>
using MatrixX = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;

enum class ScoringVariant {
  kUnconstrainedLs,   // "MSE"
  kNnlsL2,            // "MSENNLSL2"
  kProjectedSimplex,  // "MSEProjUSimp"
};

ScoringVariant parse_scoring_variant(std::string_view name);
std::string_view scoring_variant_name(ScoringVariant v);  // mse|nnls|simplex

struct ScoringModelSpec {
  ScoringVariant variant = ScoringVariant::kProjectedSimplex;
  // Relative: the diagonal gets ridge_jitter * trace(A^T A) / k.
  double ridge_jitter = 1e-8;
  // Absolute L2 weight of the nnls_l2 variant.
  double nnls_ridge = 1e-3;
  // Residuals are floored at error_floor * |g|^2 before the ratio.
  double error_floor = 1e-12;
  double db_cap = 120.0;

  void validate() const;
};

template <class Derived>
void require_finite(const Eigen::MatrixBase<Derived>& m, const char* what) {
  if (!m.allFinite()) {
    throw NumericError(std::string(what) + " contains non-finite entries");
  }
}

// Absolute diagonal jitter for A: relative * trace(A^T A) / k, or `relative`
// itself when A is all zeros.
template <class Derived>
typename Derived::Scalar default_jitter(const Eigen::MatrixBase<Derived>& a,
                                        typename Derived::Scalar relative) {
  using Scalar = typename Derived::Scalar;
  const Scalar trace = a.squaredNorm();
  if (a.cols() == 0 || trace == Scalar(0)) return relative;
  return relative * trace / static_cast<Scalar>(a.cols());
}

// argmin_t |g - A t|^2 + jitter |t|^2 via the normal equations. With zero
// jitter the minimum-norm least-squares solution is returned.
template <class DerivedA, class DerivedG>
VectorX<typename DerivedA::Scalar> least_squares_solve(
    const Eigen::MatrixBase<DerivedA>& a, const Eigen::MatrixBase<DerivedG>& g,
    typename DerivedA::Scalar jitter) {
  using Scalar = typename DerivedA::Scalar;
  require_finite(a, "least_squares_solve: A");
  require_finite(g, "least_squares_solve: g");
  if (a.rows() != g.size()) {
    throw InvalidArgument("least_squares_solve: A has " +
                          std::to_string(a.rows()) + " rows but g has " +
                          std::to_string(g.size()));
  }
  if (!(jitter >= Scalar(0)) || !std::isfinite(jitter)) {
    throw NumericError("least_squares_solve: jitter must be finite and >= 0");
  }
  if (jitter == Scalar(0)) {
    return a.completeOrthogonalDecomposition().solve(g);
  }
  MatrixX<Scalar> gram = a.transpose() * a;
  gram.diagonal().array() += jitter;
  VectorX<Scalar> t = gram.ldlt().solve(a.transpose() * g);
  require_finite(t, "least_squares_solve: solution");
  return t;
}

// Euclidean projection onto {w >= 0, sum w = 1} by sort-and-threshold.
template <class Derived>
VectorX<typename Derived::Scalar> project_to_simplex(
    const Eigen::MatrixBase<Derived>& v) {
  using Scalar = typename Derived::Scalar;
  const Eigen::Index k = v.size();
  if (k == 0) throw InvalidArgument("project_to_simplex: empty vector");
  require_finite(v, "project_to_simplex: v");
  VectorX<Scalar> u = v;
  std::sort(u.data(), u.data() + k, std::greater<Scalar>());
  Scalar cumsum = 0;
  Scalar tau = 0;
  for (Eigen::Index j = 0; j < k; ++j) {
    cumsum += u[j];
    const Scalar candidate = (cumsum - Scalar(1)) / static_cast<Scalar>(j + 1);
    if (u[j] - candidate > Scalar(0)) tau = candidate;
  }
  VectorX<Scalar> w = (v.array() - tau).max(Scalar(0)).matrix();
  // Clean up rounding so the sum is 1 to working precision.
  const Scalar sum = w.sum();
  if (sum > Scalar(0)) w /= sum;
  return w;
}

template <class Scalar>
struct NnlsResult {
  VectorX<Scalar> t;
  int iterations = 0;
  // max over i of |grad_i| (t_i > 0) or max(0, -grad_i) (t_i = 0), where
  // grad = A^T (A t - g) + ridge t.
  Scalar kkt_violation = 0;
};

template <class DerivedQ, class DerivedC, class DerivedT>
typename DerivedQ::Scalar nnls_kkt_violation(
    const Eigen::MatrixBase<DerivedQ>& gram,
    const Eigen::MatrixBase<DerivedC>& rhs,
    const Eigen::MatrixBase<DerivedT>& t) {
  using Scalar = typename DerivedQ::Scalar;
  const VectorX<Scalar> grad = gram * t - rhs;
  Scalar worst = 0;
  for (Eigen::Index i = 0; i < t.size(); ++i) {
    const Scalar v = t[i] > Scalar(0) ? std::abs(grad[i])
                                      : std::max(Scalar(0), -grad[i]);
    worst = std::max(worst, v);
  }
  return worst;
}

// Lawson-Hanson active set on the Gram form of
//   min_{t >= 0} |g - A t|^2 + ridge |t|^2.
// Throws ConvergenceError when max_iterations (default 30 k + 50) is hit
// before the KKT violation drops below tol.
template <class DerivedA, class DerivedG>
NnlsResult<typename DerivedA::Scalar> nnls_solve(
    const Eigen::MatrixBase<DerivedA>& a, const Eigen::MatrixBase<DerivedG>& g,
    typename DerivedA::Scalar ridge, typename DerivedA::Scalar tol = 1e-10,
    int max_iterations = 0) {
  using Scalar = typename DerivedA::Scalar;
  require_finite(a, "nnls_solve: A");
  require_finite(g, "nnls_solve: g");
  if (a.rows() != g.size()) {
    throw InvalidArgument("nnls_solve: dimension mismatch");
  }
  if (!(ridge >= Scalar(0))) {
    throw InvalidArgument("nnls_solve: ridge must be >= 0");
  }
  const Eigen::Index k = a.cols();
  if (max_iterations <= 0) max_iterations = static_cast<int>(30 * k + 50);
  if (k == 0) return {};

  MatrixX<Scalar> gram = a.transpose() * a;
  gram.diagonal().array() += ridge;
  const VectorX<Scalar> rhs = a.transpose() * g;
  const Scalar scale = std::max<Scalar>(
      Scalar(1), std::max(gram.cwiseAbs().maxCoeff(), rhs.cwiseAbs().maxCoeff()));
  const Scalar kkt_tol = tol * scale;

  NnlsResult<Scalar> res;
  res.t = VectorX<Scalar>::Zero(k);
  std::vector<bool> passive(static_cast<std::size_t>(k), false);
  std::vector<bool> blocked(static_cast<std::size_t>(k), false);

  auto solve_passive = [&](VectorX<Scalar>& z) {
    std::vector<Eigen::Index> idx;
    for (Eigen::Index i = 0; i < k; ++i) {
      if (passive[static_cast<std::size_t>(i)]) idx.push_back(i);
    }
    const auto m = static_cast<Eigen::Index>(idx.size());
    MatrixX<Scalar> sub(m, m);
    VectorX<Scalar> sub_rhs(m);
    for (Eigen::Index r = 0; r < m; ++r) {
      sub_rhs[r] = rhs[idx[r]];
      for (Eigen::Index c = 0; c < m; ++c) sub(r, c) = gram(idx[r], idx[c]);
    }
    const VectorX<Scalar> sol = sub.ldlt().solve(sub_rhs);
    z.setZero(k);
    for (Eigen::Index r = 0; r < m; ++r) z[idx[r]] = sol[r];
  };

  VectorX<Scalar> z(k);
  while (true) {
    const VectorX<Scalar> w = rhs - gram * res.t;
    Eigen::Index best = -1;
    Scalar best_w = kkt_tol;
    for (Eigen::Index i = 0; i < k; ++i) {
      const auto si = static_cast<std::size_t>(i);
      if (!passive[si] && !blocked[si] && w[i] > best_w) {
        best_w = w[i];
        best = i;
      }
    }
    if (best < 0) break;
    if (++res.iterations > max_iterations) {
      throw ConvergenceError("nnls_solve: iteration cap exceeded",
                             nnls_kkt_violation(gram, rhs, res.t));
    }
    passive[static_cast<std::size_t>(best)] = true;
    bool first_inner = true;
    while (true) {
      solve_passive(z);
      bool feasible = true;
      for (Eigen::Index i = 0; i < k; ++i) {
        if (passive[static_cast<std::size_t>(i)] && !(z[i] > Scalar(0))) {
          feasible = false;
        }
      }
      if (feasible) {
        res.t = z;
        break;
      }
      if (first_inner && !(z[best] > Scalar(0))) {
        // Degenerate entry: the new variable cannot become positive.
        passive[static_cast<std::size_t>(best)] = false;
        blocked[static_cast<std::size_t>(best)] = true;
        break;
      }
      first_inner = false;
      Scalar alpha = Scalar(1);
      for (Eigen::Index i = 0; i < k; ++i) {
        if (passive[static_cast<std::size_t>(i)] && !(z[i] > Scalar(0))) {
          alpha = std::min(alpha, res.t[i] / (res.t[i] - z[i]));
        }
      }
      res.t += alpha * (z - res.t);
      for (Eigen::Index i = 0; i < k; ++i) {
        const auto si = static_cast<std::size_t>(i);
        if (passive[si] &&
            res.t[i] <= std::numeric_limits<Scalar>::epsilon() * scale) {
          res.t[i] = Scalar(0);
          passive[si] = false;
        }
      }
      if (++res.iterations > max_iterations) {
        throw ConvergenceError("nnls_solve: iteration cap exceeded",
                               nnls_kkt_violation(gram, rhs, res.t));
      }
    }
    // A successful step changes the landscape; let blocked entries retry.
    if (!blocked[static_cast<std::size_t>(best)]) {
      std::fill(blocked.begin(), blocked.end(), false);
    }
  }
  res.kkt_violation = nnls_kkt_violation(gram, rhs, res.t);
  return res;
}

template <class Scalar>
struct ReconstructionResult {
  VectorX<Scalar> t;
  Scalar residual_sq = 0;  // |g - A t|^2, unfloored
  Scalar g_norm_sq = 0;
  Scalar floored_residual_sq = 0;

  Scalar ratio() const { return g_norm_sq / floored_residual_sq; }
};

// Fits t for one probe. The projected-simplex variant solves the ridge
// least-squares problem, projects onto the simplex and evaluates the
// residual at the projected coefficients.
template <class DerivedA, class DerivedG>
ReconstructionResult<typename DerivedA::Scalar> reconstruct(
    const Eigen::MatrixBase<DerivedA>& a, const Eigen::MatrixBase<DerivedG>& g,
    const ScoringModelSpec& model) {
  using Scalar = typename DerivedA::Scalar;
  if (a.cols() == 0) {
    throw EmptySelectionError("reconstruct: selection is empty");
  }
  if (a.rows() != g.size()) {
    throw InvalidArgument("reconstruct: A has " + std::to_string(a.rows()) +
                          " rows but probe has " + std::to_string(g.size()));
  }
  ReconstructionResult<Scalar> res;
  const Scalar jitter = default_jitter(a, Scalar(model.ridge_jitter));
  switch (model.variant) {
    case ScoringVariant::kUnconstrainedLs:
      res.t = least_squares_solve(a, g, jitter);
      break;
    case ScoringVariant::kNnlsL2:
      res.t = nnls_solve(a, g, Scalar(model.nnls_ridge)).t;
      break;
    case ScoringVariant::kProjectedSimplex:
      res.t = project_to_simplex(least_squares_solve(a, g, jitter));
      break;
  }
  res.residual_sq = (g - a * res.t).squaredNorm();
  res.g_norm_sq = g.squaredNorm();
  res.floored_residual_sq =
      std::max(res.residual_sq, Scalar(model.error_floor) * res.g_norm_sq);
  return res;
}

enum class ProbeMode { kTestOnly, kPopulation };

// Gradients to reconstruct, one per row.
struct ProbeSet {
  ProbeMode mode = ProbeMode::kTestOnly;
  Eigen::MatrixXd probes;
  std::vector<std::string> source_ids;
  std::uint64_t seed = 0;
};

ProbeSet test_probe(std::string test_id, const Eigen::VectorXd& gradient);
// p rows sampled uniformly without replacement from `train` (p <= n).
ProbeSet population_probes(const GradientMatrix& train, Eigen::Index p,
                           std::uint64_t seed);

struct RelevanceScore {
  double ratio = 0.0;
  double decibels = 0.0;
  Eigen::Index probe_count = 0;
  ScoringVariant variant = ScoringVariant::kProjectedSimplex;
  // Coefficients of the first probe (the test gradient in test-only mode).
  Eigen::VectorXd t;
};

// 10 log10(ratio), capped at `cap`. ratio must be > 0.
double to_decibels(double ratio, double cap = 120.0);
// Two decimals, as in "-22.87 dB".
std::string format_db(double decibels);
std::string format_db_value(double decibels);  // "-22.87"

template <class DerivedA>
RelevanceScore selection_relevance(const Eigen::MatrixBase<DerivedA>& a,
                                   const ProbeSet& probes,
                                   const ScoringModelSpec& model) {
  if (probes.probes.rows() == 0) {
    throw InvalidArgument("selection_relevance: empty probe set");
  }
  if (probes.probes.cols() != a.rows()) {
    throw InvalidArgument("selection_relevance: probe dim " +
                          std::to_string(probes.probes.cols()) +
                          " != selection dim " + std::to_string(a.rows()));
  }
  const Eigen::MatrixXd ad = a.template cast<double>();
  double signal = 0.0;
  double error = 0.0;
  RelevanceScore out;
  for (Eigen::Index i = 0; i < probes.probes.rows(); ++i) {
    const Eigen::VectorXd g = probes.probes.row(i).transpose();
    auto r = reconstruct(ad, g, model);
    signal += r.g_norm_sq;
    error += r.floored_residual_sq;
    if (i == 0) out.t = std::move(r.t);
  }
  if (!(signal > 0.0)) {
    throw NumericError("selection_relevance: probes have zero total norm");
  }
  out.ratio = signal / error;
  out.decibels = to_decibels(out.ratio, model.db_cap);
  out.probe_count = probes.probes.rows();
  out.variant = model.variant;
  return out;
}

}  // namespace selrel
