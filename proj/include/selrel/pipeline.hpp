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

// Experiment grid: estimators x strategies x budgets x test instances,
// scored by selection relevance, aggregated into AUC and improvement tables,
// and optionally validated by one-step fine-tuning on the toy model.

#include <Eigen/Dense>

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <tuple>
#include <vector>

#include "json.hpp"
#include "selrel/estimators.hpp"
#include "selrel/gradstore.hpp"
#include "selrel/relevance.hpp"
#include "selrel/selectors.hpp"
#include "selrel/validation.hpp"

namespace selrel {

struct ProbeConfig {
  ProbeMode mode = ProbeMode::kTestOnly;
  Eigen::Index population = 0;  // probe count in population mode
};

// "test" or "population:N".
ProbeConfig parse_probe_mode(std::string_view text);
std::string probe_mode_name(const ProbeConfig& probe);

// Externally computed rankings: <dir>/<test_id>.csv with "id,score" rows.
struct ExternalEstimator {
  std::string name;
  std::filesystem::path dir;
};

std::vector<std::string> default_strategies();

struct ExperimentConfig {
  // Gradient-file inputs. Ignored when `toy` is set.
  std::optional<std::filesystem::path> train_gradients;
  std::optional<std::filesystem::path> test_gradients;
  // Optional "id,text" CSVs enabling the bm25 estimator on file inputs.
  std::optional<std::filesystem::path> train_text;
  std::optional<std::filesystem::path> test_text;
  std::vector<ExternalEstimator> external;

  std::optional<ToyTaskSpec> toy;
  int toy_epochs = 200;
  // <= 0 selects 0.9 * max_stable_lr of the generated task.
  double toy_lr = 0.0;

  std::vector<std::string> estimators = {"gradient_similarity"};
  std::vector<std::string> strategies = default_strategies();
  std::vector<double> lambdas = {0.25, 0.5, 0.75, 1.0};
  std::vector<Eigen::Index> budgets = {1, 5, 10, 25};
  ProbeConfig probe;
  ScoringModelSpec scoring;
  std::uint64_t seed = 0;
  std::filesystem::path out_dir = "out";
  SelectorOptions selector;
  int random_replicates = 5;
  // Re-project gradients to this total dimension before use.
  std::optional<std::size_t> projection_dim;
  std::optional<Eigen::Index> max_test_instances;

  bool validation = false;
  double validation_lr = 1e-2;
  std::vector<double> bin_edges = {-1e300, -10.0, -5.0, 0.0, 5.0, 10.0, 20.0, 1e300};
  int sanity_trials = 200;

  int threads = 0;  // 0: hardware concurrency

  void validate() const;
};

ExperimentConfig config_from_json(const nlohmann::json& j);

// 100 base training points, each replicated 10 times with small jitter
// (1000 train, 100 test), a lightly trained model, both built-in estimators
// and validation on. Matches configs/redundant_cluster.json.
ExperimentConfig redundant_cluster_config(std::uint64_t seed = 0);
nlohmann::json config_to_json(const ExperimentConfig& config);

struct ExperimentInputs {
  GradientMatrix train;  // normalized
  GradientMatrix test;   // normalized
  std::optional<TokenizedCorpus> corpus;
  std::map<std::string, TokenBag> test_tokens;
  std::optional<ToyDataset> toy;
  std::optional<ToyModel> model;
};

// Reads gradient files (and optional text) or builds the toy task, trains
// the toy model and derives its gradients. Rows are normalized; if
// projection_dim is set they are projected first.
ExperimentInputs prepare_inputs(const ExperimentConfig& config);

struct ResultRow {
  std::string estimator;
  std::string strategy;
  std::optional<double> lambda;
  Eigen::Index k = 0;
  std::string test_id;
  double ratio = 0.0;
  double db = 0.0;
  double wall_seconds = 0.0;
  bool failed = false;
  std::string error;
};

struct ExperimentResult {
  std::vector<ResultRow> rows;
  std::vector<Selection> selections;
  std::vector<ValidationRecord> validation;
  std::optional<SanityResult> sanity;

  std::size_t failed_cells() const;
};

// Whether the estimator/strategy pair is part of the grid (bm25 only pairs
// with magnitude-based strategies, since its raw scores are all positive).
bool strategy_applies(std::string_view estimator, const StrategyDescriptor& s);

ExperimentResult run_experiment(const ExperimentConfig& config,
                                const ExperimentInputs& inputs);
ExperimentResult run_experiment(const ExperimentConfig& config);

// Mean dB per (estimator, strategy, lambda, k) over test instances.
struct SummaryCell {
  std::string estimator;
  std::string strategy;
  std::optional<double> lambda;
  Eigen::Index k = 0;
  std::size_t count = 0;
  double mean_db = 0.0;
};

std::vector<SummaryCell> summarize(std::span<const ResultRow> rows);

// Trapezoid integral of dB over k divided by (k_max - k_min); a single
// budget returns its value. Throws IncompleteSeriesError if a budget is
// missing from db_by_k.
double auc_over_budgets(const std::map<Eigen::Index, double>& db_by_k,
                        std::span<const Eigen::Index> budgets);

struct AucCell {
  std::string estimator;
  std::string strategy;
  std::optional<double> lambda;
  double auc_db = 0.0;
};

std::vector<AucCell> auc_table(std::span<const SummaryCell> cells,
                               std::span<const Eigen::Index> budgets);

struct ImprovementCell {
  std::string estimator;
  std::string mode;
  double lambda = 0.0;
  Eigen::Index k = 0;
  double naive_db = 0.0;
  double fl_db = 0.0;
  double delta_db = 0.0;
  double percent = 0.0;  // on linear ratios
};

// Pairs every facility-location cell with the naive cell of the same
// (estimator, mode, k). Throws PairingError for an unmatched cell.
std::vector<ImprovementCell> relative_improvement(
    std::span<const SummaryCell> fl_cells,
    std::span<const SummaryCell> naive_cells);

// Sorted by (estimator, strategy, lambda, k, test_id).
void sort_rows(std::vector<ResultRow>& rows);

std::string results_csv(std::vector<ResultRow> rows);
std::string summary_csv(std::span<const SummaryCell> cells);
std::string auc_csv(std::span<const AucCell> cells);
std::string improvement_csv(std::span<const ImprovementCell> cells);
std::string selections_csv(std::span<const Selection> selections);
std::string validation_csv(std::span<const ValidationRecord> records);
std::string timings_csv(std::vector<ResultRow> rows);

// Parses results_csv output (dB is recomputed from the stored ratio).
std::vector<ResultRow> parse_results_csv(const std::string& text);

struct CorrelationSummary {
  std::size_t records = 0;
  std::size_t positive_records = 0;
  std::optional<double> rho_support_full;
  std::optional<double> rho_support_positive;
  std::optional<double> rho_shift_full;
  std::optional<double> rho_shift_positive;
  std::vector<BinAccuracy> bins;
};

CorrelationSummary correlation_summary(std::span<const ValidationRecord> records,
                                       std::span<const double> bin_edges);
std::string correlation_csv(const CorrelationSummary& summary);

enum class ReportFormat { kCsv };

// Writes results.csv, summary.csv, auc.csv, improvement.csv (plus
// validation files when present) into `dir`; timings go to timings.csv.
void write_report(const ExperimentResult& result,
                  std::span<const Eigen::Index> budgets,
                  std::span<const double> bin_edges,
                  const std::filesystem::path& dir,
                  ReportFormat format = ReportFormat::kCsv);

void write_text_file(const std::filesystem::path& path, const std::string& text);
std::string read_text_file(const std::filesystem::path& path);

}  // namespace selrel
