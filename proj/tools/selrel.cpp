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

// Command-line front end: score, select, validate, report, toygen.

#include <cstdio>
#include <iostream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "selrel/error.hpp"
#include "selrel/gradstore.hpp"
#include "selrel/pipeline.hpp"
#include "selrel/validation.hpp"

namespace {

using selrel::ExperimentConfig;

// Command-line values that override the config file when given.
struct Overrides {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out_dir;
  std::optional<std::string> probe_mode;
  std::optional<std::string> model;
  std::vector<double> lambdas;
  std::optional<double> m;
  std::optional<Eigen::Index> pool;
  std::vector<Eigen::Index> budgets;
  std::vector<std::string> estimators;
  std::vector<std::string> strategies;
  std::optional<std::string> train;
  std::optional<std::string> test;
  std::optional<std::string> train_text;
  std::optional<std::string> test_text;
  std::optional<Eigen::Index> max_test;
  std::optional<std::size_t> projection_dim;
  std::optional<int> replicates;
  std::optional<int> threads;
  bool toy = false;
};

void add_common(CLI::App* app, Overrides& o) {
  app->add_option("--config", o.config_path, "JSON experiment config");
  app->add_option("--seed", o.seed, "master seed");
  app->add_option("--out-dir", o.out_dir, "output directory");
  app->add_option("--probe-mode", o.probe_mode, "test or population:N");
  app->add_option("--model", o.model, "scoring model")
      ->check(CLI::IsMember({"mse", "nnls", "simplex"}));
  app->add_option("--lambda", o.lambdas, "facility-location lambda grid");
  app->add_option("--m", o.m, "maximum cost");
  app->add_option("--pool", o.pool, "candidate pool size");
  app->add_option("--budgets", o.budgets, "selection sizes");
  app->add_option("--estimators", o.estimators,
                  "gradient_similarity, bm25, external:<name>");
  app->add_option("--strategies", o.strategies, "strategy names");
  app->add_option("--train", o.train, "training gradients (GRDM)");
  app->add_option("--test", o.test, "test gradients (GRDM)");
  app->add_option("--train-text", o.train_text, "training id,text CSV");
  app->add_option("--test-text", o.test_text, "test id,text CSV");
  app->add_option("--max-test", o.max_test, "use the first N test instances");
  app->add_option("--projection-dim", o.projection_dim,
                  "re-project gradients to this dimension");
  app->add_option("--replicates", o.replicates, "random-baseline replicates");
  app->add_option("--threads", o.threads, "worker threads (0: all cores)");
  app->add_flag("--toy", o.toy, "use the built-in toy task");
}

ExperimentConfig build_config(const Overrides& o) {
  nlohmann::json j = nlohmann::json::object();
  if (!o.config_path.empty()) {
    try {
      j = nlohmann::json::parse(selrel::read_text_file(o.config_path));
    } catch (const nlohmann::json::exception& e) {
      throw selrel::InvalidArgument(o.config_path + ": " + e.what());
    }
  }
  if (o.toy && !j.contains("toy")) j["toy"] = nlohmann::json::object();
  if (o.seed) j["seed"] = *o.seed;
  if (o.out_dir) j["out_dir"] = *o.out_dir;
  if (o.probe_mode) j["probe_mode"] = *o.probe_mode;
  if (o.model) j["model"] = *o.model;
  if (!o.lambdas.empty()) j["lambdas"] = o.lambdas;
  if (o.m) j["m"] = *o.m;
  if (o.pool) j["pool"] = *o.pool;
  if (!o.budgets.empty()) j["budgets"] = o.budgets;
  if (!o.estimators.empty()) j["estimators"] = o.estimators;
  if (!o.strategies.empty()) j["strategies"] = o.strategies;
  if (o.train) j["train_gradients"] = *o.train;
  if (o.test) j["test_gradients"] = *o.test;
  if (o.train_text) j["train_text"] = *o.train_text;
  if (o.test_text) j["test_text"] = *o.test_text;
  if (o.max_test) j["max_test_instances"] = *o.max_test;
  if (o.projection_dim) j["projection_dim"] = *o.projection_dim;
  if (o.replicates) j["random_replicates"] = *o.replicates;
  if (o.threads) j["threads"] = *o.threads;
  return selrel::config_from_json(j);
}

int finish(const selrel::ExperimentResult& result) {
  const std::size_t failed = result.failed_cells();
  std::fprintf(stderr, "%zu rows, %zu failed\n", result.rows.size(), failed);
  if (failed > 0) {
    for (const auto& r : result.rows) {
      if (!r.failed) continue;
      std::fprintf(stderr, "failed: %s %s k=%lld %s: %s\n", r.estimator.c_str(),
                   r.strategy.c_str(), static_cast<long long>(r.k),
                   r.test_id.c_str(), r.error.c_str());
    }
    return 1;
  }
  return 0;
}

int run_grid(ExperimentConfig config, bool validation, bool write_selections) {
  config.validation = validation;
  if (validation && !config.toy) {
    throw selrel::InvalidArgument("validate needs a toy task (--toy or config 'toy')");
  }
  const auto result = selrel::run_experiment(config);
  selrel::write_report(result, config.budgets, config.bin_edges, config.out_dir);
  selrel::write_text_file(config.out_dir / "config.json",
                          selrel::config_to_json(config).dump(2) + "\n");
  if (write_selections) {
    selrel::write_text_file(config.out_dir / "selections.csv",
                            selrel::selections_csv(result.selections));
  }
  if (result.sanity) {
    std::printf("sanity: support %.2f%%, shift %.2f%% over %d trials\n",
                100.0 * result.sanity->support_fraction,
                100.0 * result.sanity->shift_fraction, result.sanity->trials);
  }
  if (validation) {
    const auto c = selrel::correlation_summary(result.validation, config.bin_edges);
    auto show = [](const std::optional<double>& v) {
      return v ? std::to_string(*v) : std::string("undefined");
    };
    std::printf("spearman(xi_sr, xi_plus): full %s, xi_sr > 0 dB %s\n",
                show(c.rho_support_full).c_str(),
                show(c.rho_support_positive).c_str());
  }
  std::printf("wrote %s\n", config.out_dir.string().c_str());
  return finish(result);
}

int run_report(const std::string& results_path, const std::string& out_dir,
               std::vector<Eigen::Index> budgets) {
  const auto rows = selrel::parse_results_csv(selrel::read_text_file(results_path));
  if (budgets.empty()) {
    std::set<Eigen::Index> ks;
    for (const auto& r : rows) ks.insert(r.k);
    budgets.assign(ks.begin(), ks.end());
  }
  selrel::ExperimentResult result;
  result.rows = rows;
  selrel::write_report(result, budgets, {}, out_dir);
  std::printf("wrote %s\n", out_dir.c_str());
  return 0;
}

std::string token_text(const selrel::TokenBag& bag) {
  std::string out;
  for (const auto& [token, count] : bag) {
    for (int i = 0; i < count; ++i) {
      if (!out.empty()) out += ' ';
      out += token;
    }
  }
  return out;
}

int run_toygen(const ExperimentConfig& config) {
  if (!config.toy) throw selrel::InvalidArgument("toygen needs a toy task");
  const auto inputs = selrel::prepare_inputs(config);
  std::filesystem::create_directories(config.out_dir);
  selrel::write_gradient_matrix(inputs.train, config.out_dir / "train.grdm");
  selrel::write_gradient_matrix(inputs.test, config.out_dir / "test.grdm");
  std::ostringstream train_text, test_text, labels;
  train_text << "id,text\n";
  test_text << "id,text\n";
  labels << "id,split,label,predicted\n";
  for (const auto& ex : inputs.toy->train) {
    train_text << ex.id << ',' << token_text(selrel::toy_tokens(ex.x)) << '\n';
    labels << ex.id << ",train," << ex.label << ',' << inputs.model->predict(ex.x)
           << '\n';
  }
  for (const auto& ex : inputs.toy->test) {
    test_text << ex.id << ',' << token_text(selrel::toy_tokens(ex.x)) << '\n';
    labels << ex.id << ",test," << ex.label << ',' << inputs.model->predict(ex.x)
           << '\n';
  }
  selrel::write_text_file(config.out_dir / "train_text.csv", train_text.str());
  selrel::write_text_file(config.out_dir / "test_text.csv", test_text.str());
  selrel::write_text_file(config.out_dir / "labels.csv", labels.str());
  std::printf("wrote %lld x %lld train and %lld test gradients to %s\n",
              static_cast<long long>(inputs.train.rows()),
              static_cast<long long>(inputs.train.dim()),
              static_cast<long long>(inputs.test.rows()),
              config.out_dir.string().c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Selection relevance for training data attribution"};
  app.require_subcommand(1);

  Overrides score_o, select_o, validate_o, toygen_o;
  auto* score = app.add_subcommand("score", "score selections on gradient files");
  add_common(score, score_o);
  auto* select = app.add_subcommand("select", "score and emit selections CSV");
  add_common(select, select_o);
  auto* validate = app.add_subcommand("validate", "toy-task validation run");
  add_common(validate, validate_o);
  auto* toygen = app.add_subcommand("toygen", "emit toy gradients as GRDM files");
  add_common(toygen, toygen_o);

  std::string results_path;
  std::string report_dir = "out";
  std::vector<Eigen::Index> report_budgets;
  auto* report = app.add_subcommand("report", "AUC and improvement tables");
  report->add_option("results", results_path, "results.csv")->required();
  report->add_option("--out-dir", report_dir, "output directory");
  report->add_option("--budgets", report_budgets, "budgets for the AUC");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*score) return run_grid(build_config(score_o), false, false);
    if (*select) return run_grid(build_config(select_o), false, true);
    if (*validate) {
      Overrides o = validate_o;
      o.toy = true;
      return run_grid(build_config(o), true, false);
    }
    if (*toygen) {
      Overrides o = toygen_o;
      o.toy = true;
      return run_toygen(build_config(o));
    }
    if (*report) return run_report(results_path, report_dir, report_budgets);
  } catch (const selrel::Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const std::filesystem::filesystem_error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  }
  return 0;
}
