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

#include "selrel/pipeline.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <exception>
#include <fstream>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>

#include "selrel/error.hpp"
#include "selrel/random.hpp"

namespace selrel {
namespace {

using nlohmann::json;

constexpr std::string_view kExternalPrefix = "external:";

std::string fmt(const char* spec, double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), spec, v);
  return buf;
}

std::string lambda_text(const std::optional<double>& lambda) {
  return lambda ? fmt("%.6g", *lambda) : std::string();
}

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n\r") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  out += '"';
  return out;
}

// Splits one CSV record; handles quoted fields with doubled quotes.
std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"') {
        if (i + 1 < line.size() && line[i + 1] == '"') {
          cur += '"';
          ++i;
        } else {
          quoted = false;
        }
      } else {
        cur += c;
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      out.push_back(std::move(cur));
      cur.clear();
    } else {
      cur += c;
    }
  }
  out.push_back(std::move(cur));
  return out;
}

void check_keys(const json& j, const std::set<std::string>& allowed,
                const char* where) {
  if (!j.is_object()) {
    throw InvalidArgument(std::string(where) + ": expected a JSON object");
  }
  for (const auto& [key, value] : j.items()) {
    if (!allowed.count(key)) {
      throw InvalidArgument(std::string(where) + ": unknown key '" + key + "'");
    }
  }
}

template <class T>
void read_opt(const json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

ToyTaskSpec toy_from_json(const json& j) {
  check_keys(j,
             {"n_train", "n_test", "feature_dim", "n_classes",
              "clusters_per_class", "mean_scale", "cluster_scale", "redundancy",
              "duplicate_jitter", "label_noise", "seed"},
             "toy");
  ToyTaskSpec s;
  read_opt(j, "n_train", s.n_train);
  read_opt(j, "n_test", s.n_test);
  read_opt(j, "feature_dim", s.feature_dim);
  read_opt(j, "n_classes", s.n_classes);
  read_opt(j, "clusters_per_class", s.clusters_per_class);
  read_opt(j, "mean_scale", s.mean_scale);
  read_opt(j, "cluster_scale", s.cluster_scale);
  read_opt(j, "redundancy", s.redundancy);
  read_opt(j, "duplicate_jitter", s.duplicate_jitter);
  read_opt(j, "label_noise", s.label_noise);
  read_opt(j, "seed", s.seed);
  return s;
}

json toy_to_json(const ToyTaskSpec& s) {
  return {{"n_train", s.n_train},
          {"n_test", s.n_test},
          {"feature_dim", s.feature_dim},
          {"n_classes", s.n_classes},
          {"clusters_per_class", s.clusters_per_class},
          {"mean_scale", s.mean_scale},
          {"cluster_scale", s.cluster_scale},
          {"redundancy", s.redundancy},
          {"duplicate_jitter", s.duplicate_jitter},
          {"label_noise", s.label_noise},
          {"seed", s.seed}};
}

GradientMatrix take_rows(const GradientMatrix& m, Eigen::Index n) {
  if (n >= m.rows()) return m;
  std::vector<std::string> ids(m.ids().begin(), m.ids().begin() + n);
  RowMatrixXf values = m.values().topRows(n);
  return GradientMatrix(std::move(ids), std::move(values), m.layer_segments(),
                        m.normalized());
}

GradientMatrix prepare_gradients(const GradientMatrix& raw,
                                 const ExperimentConfig& config,
                                 std::uint64_t salt) {
  GradientMatrix m = raw;
  if (config.projection_dim) {
    const auto spec = make_projection_spec(
        m, *config.projection_dim, hash_words({config.seed, salt}));
    m = project_matrix(m, spec);
  }
  return normalize_rows(m);
}

// Re-orders text documents to the training id order.
TokenizedCorpus corpus_in_order(
    const std::vector<std::string>& ids,
    const std::vector<std::pair<std::string, std::string>>& rows) {
  std::map<std::string, std::string> by_id;
  for (const auto& [id, text] : rows) {
    if (!by_id.emplace(id, text).second) {
      throw CoverageError("train text: duplicate id '" + id + "'");
    }
  }
  std::vector<std::pair<std::string, TokenBag>> docs;
  docs.reserve(ids.size());
  for (const auto& id : ids) {
    auto it = by_id.find(id);
    if (it == by_id.end()) {
      throw CoverageError("train text: missing id '" + id + "'");
    }
    docs.emplace_back(id, tokenize(it->second));
  }
  return TokenizedCorpus(std::move(docs));
}

// The random-baseline index set is shared across estimators, so the seed
// depends only on the test instance and the budget.
std::uint64_t cell_seed(std::uint64_t master, const std::string& test_id,
                        Eigen::Index k) {
  return hash_words({master, hash_string(test_id),
                     static_cast<std::uint64_t>(k)});
}

std::uint64_t validation_seed(std::uint64_t master, const std::string& test_id,
                              Eigen::Index k) {
  return hash_words({master, hash_string(test_id),
                     static_cast<std::uint64_t>(k), 0x56414CULL});
}

struct Cell {
  StrategyDescriptor strategy;
  Eigen::Index k = 0;
};

// Output of one (estimator, test instance) task.
struct TaskOutput {
  std::vector<ResultRow> rows;
  std::vector<Selection> selections;
  std::vector<ValidationRecord> validation;
};

std::vector<Cell> grid_cells(const ExperimentConfig& config,
                             std::string_view estimator) {
  std::vector<Cell> cells;
  for (const auto& name : config.strategies) {
    const StrategyDescriptor base = parse_strategy(name);
    if (!strategy_applies(estimator, base)) continue;
    std::vector<std::optional<double>> lambdas = {std::nullopt};
    if (base.kind == StrategyKind::kFacilityLocation) {
      lambdas.assign(config.lambdas.begin(), config.lambdas.end());
    }
    for (const auto& lambda : lambdas) {
      for (Eigen::Index k : config.budgets) {
        StrategyDescriptor s = base;
        s.lambda = lambda;
        cells.push_back({s, k});
      }
    }
  }
  return cells;
}

InfluenceRanking compute_ranking(const ExperimentConfig& config,
                                 const ExperimentInputs& inputs,
                                 const std::string& estimator,
                                 Eigen::Index test_row) {
  const std::string& test_id = inputs.test.id(test_row);
  if (estimator == kGradientSimilarity) {
    return gradient_similarity_scores(inputs.test, test_row, inputs.train);
  }
  if (estimator == kBm25) {
    if (!inputs.corpus) throw InvalidArgument("bm25: no training text");
    auto it = inputs.test_tokens.find(test_id);
    if (it == inputs.test_tokens.end()) {
      throw CoverageError("bm25: no text for test id '" + test_id + "'");
    }
    return bm25_scores(test_id, it->second, *inputs.corpus);
  }
  const std::string name = estimator.substr(kExternalPrefix.size());
  for (const auto& ext : config.external) {
    if (ext.name == name) {
      return load_external_scores(ext.dir / (test_id + ".csv"),
                                  inputs.train.ids(), name, test_id);
    }
  }
  throw InvalidArgument("unknown estimator '" + estimator + "'");
}

std::vector<ToyExample> toy_members(const ToyDataset& toy,
                                    const GradientMatrix& train,
                                    const std::vector<std::string>& ids) {
  std::vector<ToyExample> out;
  out.reserve(ids.size());
  for (const auto& id : ids) out.push_back(toy.train[train.index_of(id)]);
  return out;
}

ResultRow failed_row(const std::string& estimator, const Cell& cell,
                     const std::string& test_id, const std::string& what) {
  ResultRow row;
  row.estimator = estimator;
  row.strategy = cell.strategy.name();
  row.lambda = cell.strategy.lambda;
  row.k = cell.k;
  row.test_id = test_id;
  row.failed = true;
  row.error = what;
  return row;
}

TaskOutput run_task(const ExperimentConfig& config,
                    const ExperimentInputs& inputs, const std::string& estimator,
                    Eigen::Index test_row) {
  TaskOutput out;
  const std::string& test_id = inputs.test.id(test_row);
  const std::vector<Cell> cells = grid_cells(config, estimator);

  InfluenceRanking ranking;
  try {
    ranking = compute_ranking(config, inputs, estimator, test_row);
  } catch (const Error& e) {
    for (const auto& cell : cells) {
      out.rows.push_back(failed_row(estimator, cell, test_id, e.what()));
    }
    return out;
  }
  ranking.estimator = estimator;

  const Eigen::VectorXd g = inputs.test.row_as_double(test_row);
  const ProbeSet probes =
      config.probe.mode == ProbeMode::kTestOnly
          ? test_probe(test_id, g)
          : population_probes(inputs.train, config.probe.population,
                              hash_words({config.seed, hash_string(test_id),
                                          0x50524FULL}));

  const bool validate = config.validation && inputs.toy && inputs.model;
  const ToyExample* test_example =
      validate ? &inputs.toy->test[static_cast<std::size_t>(test_row)] : nullptr;
  const int predicted = validate ? inputs.model->predict(test_example->x) : 0;

  auto score_selection = [&](const Selection& sel) {
    std::vector<Eigen::Index> rows;
    rows.reserve(sel.member_ids.size());
    for (const auto& id : sel.member_ids) rows.push_back(inputs.train.index_of(id));
    return selection_relevance(inputs.train.columns_for(rows), probes,
                               config.scoring);
  };

  auto record = [&](const Selection& sel, double db) {
    ValidationRecord rec;
    rec.test_id = test_id;
    rec.estimator = estimator;
    rec.strategy = sel.strategy.name();
    rec.k = sel.k;
    rec.xi_sr_db = db;
    rec.replicate_seed_base = validation_seed(config.seed, test_id, sel.k);
    const auto s = toy_members(*inputs.toy, inputs.train, sel.member_ids);
    double plus = 0.0;
    double shift = 0.0;
    for (int r = 0; r < config.random_replicates; ++r) {
      const Selection rand = select_random(inputs.train.ids(), sel.k,
                                           rec.replicate_seed_base, r);
      const auto rs = toy_members(*inputs.toy, inputs.train, rand.member_ids);
      plus += prediction_support(*inputs.model, test_example->x, predicted, s,
                                 rs, config.validation_lr);
      shift += prediction_shift(*inputs.model, test_example->x, s, rs,
                                config.validation_lr);
    }
    rec.xi_plus = plus / config.random_replicates;
    rec.xi_jsd = shift / config.random_replicates;
    out.validation.push_back(std::move(rec));
  };

  for (const auto& cell : cells) {
    const auto start = std::chrono::steady_clock::now();
    try {
      ResultRow row;
      row.estimator = estimator;
      row.strategy = cell.strategy.name();
      row.lambda = cell.strategy.lambda;
      row.k = cell.k;
      row.test_id = test_id;
      if (cell.strategy.kind == StrategyKind::kRandom) {
        double db_sum = 0.0;
        for (int r = 0; r < config.random_replicates; ++r) {
          StrategyDescriptor s = cell.strategy;
          s.seed = cell_seed(config.seed, test_id, cell.k);
          s.replicate = r;
          Selection sel = run_strategy(s, ranking, inputs.train, g, cell.k,
                                       config.selector);
          sel.estimator = estimator;
          const RelevanceScore score = score_selection(sel);
          db_sum += score.decibels;
          if (validate && r == 0) record(sel, score.decibels);
          out.selections.push_back(std::move(sel));
        }
        row.db = db_sum / config.random_replicates;
        row.ratio = std::pow(10.0, row.db / 10.0);
      } else {
        Selection sel = run_strategy(cell.strategy, ranking, inputs.train, g,
                                     cell.k, config.selector);
        sel.estimator = estimator;
        const RelevanceScore score = score_selection(sel);
        row.ratio = score.ratio;
        row.db = score.decibels;
        if (validate) record(sel, score.decibels);
        out.selections.push_back(std::move(sel));
      }
      row.wall_seconds = std::chrono::duration<double>(
                             std::chrono::steady_clock::now() - start)
                             .count();
      out.rows.push_back(std::move(row));
    } catch (const Error& e) {
      out.rows.push_back(failed_row(estimator, cell, test_id, e.what()));
    }
  }
  return out;
}

template <class Fn>
void parallel_for(std::size_t n, int threads, Fn fn) {
  std::size_t workers = threads > 0 ? static_cast<std::size_t>(threads)
                                    : std::max(1u, std::thread::hardware_concurrency());
  workers = std::min(workers, std::max<std::size_t>(n, 1));
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mu;
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard<std::mutex> lock(failure_mu);
          if (!failure) failure = std::current_exception();
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  if (failure) std::rethrow_exception(failure);
}

std::optional<double> spearman_or_none(std::span<const double> a,
                                       std::span<const double> b) {
  if (a.size() < 2) return std::nullopt;
  try {
    return spearman(a, b);
  } catch (const UndefinedCorrelationError&) {
    return std::nullopt;
  }
}

std::string opt_text(const std::optional<double>& v) {
  return v ? fmt("%.6f", *v) : std::string();
}

}  // namespace

ProbeConfig parse_probe_mode(std::string_view text) {
  if (text == "test") return {};
  constexpr std::string_view prefix = "population:";
  if (text.substr(0, prefix.size()) == prefix) {
    const std::string rest(text.substr(prefix.size()));
    std::size_t used = 0;
    long long p = 0;
    try {
      p = std::stoll(rest, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used == rest.size() && !rest.empty() && p > 0) {
      return {ProbeMode::kPopulation, static_cast<Eigen::Index>(p)};
    }
  }
  throw InvalidArgument("probe mode must be 'test' or 'population:N', got '" +
                        std::string(text) + "'");
}

std::string probe_mode_name(const ProbeConfig& probe) {
  if (probe.mode == ProbeMode::kTestOnly) return "test";
  return "population:" + std::to_string(probe.population);
}

std::vector<std::string> default_strategies() {
  std::vector<std::string> out;
  for (auto mode : kAllSelectionModes) {
    out.push_back("naive:" + std::string(selection_mode_name(mode)));
  }
  out.push_back("random");
  for (auto mode : kAllSelectionModes) {
    out.push_back("fl:" + std::string(selection_mode_name(mode)));
  }
  for (auto mode : kAllSelectionModes) {
    out.push_back("divine:" + std::string(selection_mode_name(mode)));
  }
  out.push_back("aide");
  return out;
}

void ExperimentConfig::validate() const {
  if (toy) {
    toy->validate();
    if (toy_epochs < 1) throw InvalidArgument("toy_epochs must be >= 1");
  } else if (!train_gradients || !test_gradients) {
    throw InvalidArgument(
        "config needs either a toy task or both gradient files");
  }
  if (estimators.empty()) throw InvalidArgument("no estimators configured");
  for (const auto& e : estimators) {
    if (e == kGradientSimilarity || e == kBm25) continue;
    if (e.rfind(kExternalPrefix, 0) == 0) {
      const std::string name = e.substr(kExternalPrefix.size());
      const bool known = std::any_of(
          external.begin(), external.end(),
          [&](const ExternalEstimator& x) { return x.name == name; });
      if (known) continue;
    }
    throw InvalidArgument("unknown estimator '" + e + "'");
  }
  if (strategies.empty()) throw InvalidArgument("no strategies configured");
  for (const auto& s : strategies) parse_strategy(s);
  for (double l : lambdas) {
    if (!(l >= 0.0 && l <= 1.0)) {
      throw InvalidArgument("lambda must lie in [0, 1], got " + fmt("%g", l));
    }
  }
  if (budgets.empty()) throw InvalidArgument("no budgets configured");
  for (std::size_t i = 0; i < budgets.size(); ++i) {
    if (budgets[i] < 1) throw BudgetError("budgets must be >= 1");
    if (i > 0 && budgets[i] <= budgets[i - 1]) {
      throw InvalidArgument("budgets must be strictly increasing");
    }
  }
  if (probe.mode == ProbeMode::kPopulation && probe.population < 1) {
    throw InvalidArgument("population probe count must be >= 1");
  }
  scoring.validate();
  if (!(selector.m > 1.0)) throw InvalidArgument("m must be > 1");
  if (selector.pool_size < 1) throw InvalidArgument("pool size must be >= 1");
  if (random_replicates < 1) {
    throw InvalidArgument("random_replicates must be >= 1");
  }
  if (projection_dim && *projection_dim < 1) {
    throw InvalidArgument("projection_dim must be >= 1");
  }
  if (max_test_instances && *max_test_instances < 1) {
    throw InvalidArgument("max_test_instances must be >= 1");
  }
  if (!(validation_lr > 0.0)) throw InvalidArgument("validation_lr must be > 0");
  if (bin_edges.size() < 2 ||
      !std::is_sorted(bin_edges.begin(), bin_edges.end(), std::less_equal<>())) {
    throw InvalidArgument("bin_edges must be strictly increasing");
  }
  if (sanity_trials < 0) throw InvalidArgument("sanity_trials must be >= 0");
  if (threads < 0) throw InvalidArgument("threads must be >= 0");
}

ExperimentConfig config_from_json(const json& j) {
  check_keys(j,
             {"train_gradients", "test_gradients", "train_text", "test_text",
              "external", "toy", "toy_epochs", "toy_lr", "estimators",
              "strategies", "lambdas", "budgets", "probe_mode", "model",
              "ridge_jitter", "nnls_ridge", "error_floor", "db_cap", "seed",
              "out_dir", "m", "pool", "shift_similarity", "aide",
              "random_replicates", "projection_dim", "max_test_instances",
              "validation", "validation_lr", "bin_edges", "sanity_trials",
              "threads"},
             "config");
  ExperimentConfig c;
  try {
    auto path_opt = [&](const char* key, std::optional<std::filesystem::path>& out) {
      if (j.contains(key)) out = j.at(key).get<std::string>();
    };
    path_opt("train_gradients", c.train_gradients);
    path_opt("test_gradients", c.test_gradients);
    path_opt("train_text", c.train_text);
    path_opt("test_text", c.test_text);
    if (j.contains("external")) {
      for (const auto& e : j.at("external")) {
        check_keys(e, {"name", "dir"}, "external");
        c.external.push_back(
            {e.at("name").get<std::string>(), e.at("dir").get<std::string>()});
      }
    }
    if (j.contains("toy")) c.toy = toy_from_json(j.at("toy"));
    read_opt(j, "toy_epochs", c.toy_epochs);
    read_opt(j, "toy_lr", c.toy_lr);
    read_opt(j, "estimators", c.estimators);
    read_opt(j, "strategies", c.strategies);
    read_opt(j, "lambdas", c.lambdas);
    read_opt(j, "budgets", c.budgets);
    if (j.contains("probe_mode")) {
      c.probe = parse_probe_mode(j.at("probe_mode").get<std::string>());
    }
    if (j.contains("model")) {
      c.scoring.variant = parse_scoring_variant(j.at("model").get<std::string>());
    }
    read_opt(j, "ridge_jitter", c.scoring.ridge_jitter);
    read_opt(j, "nnls_ridge", c.scoring.nnls_ridge);
    read_opt(j, "error_floor", c.scoring.error_floor);
    read_opt(j, "db_cap", c.scoring.db_cap);
    read_opt(j, "seed", c.seed);
    if (j.contains("out_dir")) c.out_dir = j.at("out_dir").get<std::string>();
    read_opt(j, "m", c.selector.m);
    read_opt(j, "pool", c.selector.pool_size);
    read_opt(j, "shift_similarity", c.selector.shift_similarity);
    if (j.contains("aide")) {
      const auto& a = j.at("aide");
      check_keys(a, {"alpha", "beta", "gamma"}, "aide");
      read_opt(a, "alpha", c.selector.aide.alpha);
      read_opt(a, "beta", c.selector.aide.beta);
      read_opt(a, "gamma", c.selector.aide.gamma);
    }
    read_opt(j, "random_replicates", c.random_replicates);
    if (j.contains("projection_dim")) {
      c.projection_dim = j.at("projection_dim").get<std::size_t>();
    }
    if (j.contains("max_test_instances")) {
      c.max_test_instances = j.at("max_test_instances").get<Eigen::Index>();
    }
    read_opt(j, "validation", c.validation);
    read_opt(j, "validation_lr", c.validation_lr);
    read_opt(j, "bin_edges", c.bin_edges);
    read_opt(j, "sanity_trials", c.sanity_trials);
    read_opt(j, "threads", c.threads);
  } catch (const json::exception& e) {
    throw InvalidArgument(std::string("config: ") + e.what());
  }
  c.validate();
  return c;
}

ExperimentConfig redundant_cluster_config(std::uint64_t seed) {
  ExperimentConfig c;
  ToyTaskSpec toy;
  toy.n_train = 1000;
  toy.n_test = 100;
  toy.redundancy = 10;
  toy.seed = seed;
  c.toy = toy;
  c.toy_epochs = 3;
  c.estimators = {std::string(kGradientSimilarity), std::string(kBm25)};
  c.seed = seed;
  c.validation = true;
  c.out_dir = "out/redundant_cluster";
  c.validate();
  return c;
}

json config_to_json(const ExperimentConfig& c) {
  json j;
  auto path_opt = [&](const char* key, const std::optional<std::filesystem::path>& p) {
    if (p) j[key] = p->string();
  };
  path_opt("train_gradients", c.train_gradients);
  path_opt("test_gradients", c.test_gradients);
  path_opt("train_text", c.train_text);
  path_opt("test_text", c.test_text);
  if (!c.external.empty()) {
    json ext = json::array();
    for (const auto& e : c.external) {
      ext.push_back({{"name", e.name}, {"dir", e.dir.string()}});
    }
    j["external"] = ext;
  }
  if (c.toy) j["toy"] = toy_to_json(*c.toy);
  j["toy_epochs"] = c.toy_epochs;
  j["toy_lr"] = c.toy_lr;
  j["estimators"] = c.estimators;
  j["strategies"] = c.strategies;
  j["lambdas"] = c.lambdas;
  j["budgets"] = c.budgets;
  j["probe_mode"] = probe_mode_name(c.probe);
  j["model"] = std::string(scoring_variant_name(c.scoring.variant));
  j["ridge_jitter"] = c.scoring.ridge_jitter;
  j["nnls_ridge"] = c.scoring.nnls_ridge;
  j["error_floor"] = c.scoring.error_floor;
  j["db_cap"] = c.scoring.db_cap;
  j["seed"] = c.seed;
  j["out_dir"] = c.out_dir.string();
  j["m"] = c.selector.m;
  j["pool"] = c.selector.pool_size;
  j["shift_similarity"] = c.selector.shift_similarity;
  j["aide"] = {{"alpha", c.selector.aide.alpha},
               {"beta", c.selector.aide.beta},
               {"gamma", c.selector.aide.gamma}};
  j["random_replicates"] = c.random_replicates;
  if (c.projection_dim) j["projection_dim"] = *c.projection_dim;
  if (c.max_test_instances) j["max_test_instances"] = *c.max_test_instances;
  j["validation"] = c.validation;
  j["validation_lr"] = c.validation_lr;
  j["bin_edges"] = c.bin_edges;
  j["sanity_trials"] = c.sanity_trials;
  j["threads"] = c.threads;
  return j;
}

ExperimentInputs prepare_inputs(const ExperimentConfig& config) {
  config.validate();
  ExperimentInputs in;
  if (config.toy) {
    in.toy = make_toy_task(*config.toy);
    const double lr =
        config.toy_lr > 0.0 ? config.toy_lr : 0.9 * max_stable_lr(*in.toy);
    in.model = train_toy_model(*in.toy, config.toy_epochs, lr);
    if (config.max_test_instances &&
        *config.max_test_instances < static_cast<Eigen::Index>(in.toy->test.size())) {
      in.toy->test.resize(static_cast<std::size_t>(*config.max_test_instances));
      in.toy->test_cluster.resize(in.toy->test.size());
    }
    in.train = prepare_gradients(
        toy_gradients(*in.model, in.toy->train, LabelSource::kOwn), config, 1);
    in.test = prepare_gradients(
        toy_gradients(*in.model, in.toy->test, LabelSource::kPredicted), config, 1);
    std::vector<std::pair<std::string, TokenBag>> docs;
    docs.reserve(in.toy->train.size());
    for (const auto& ex : in.toy->train) docs.emplace_back(ex.id, toy_tokens(ex.x));
    in.corpus = TokenizedCorpus(std::move(docs));
    for (const auto& ex : in.toy->test) in.test_tokens[ex.id] = toy_tokens(ex.x);
    return in;
  }
  GradientMatrix train = read_gradient_matrix(*config.train_gradients);
  GradientMatrix test = read_gradient_matrix(*config.test_gradients);
  if (config.max_test_instances) test = take_rows(test, *config.max_test_instances);
  // Both sides share one projection so that cosines stay comparable.
  in.train = prepare_gradients(train, config, 1);
  in.test = prepare_gradients(test, config, 1);
  if (in.train.dim() != in.test.dim()) {
    throw InvalidArgument("train and test gradients differ in dimension");
  }
  if (config.train_text) {
    in.corpus = corpus_in_order(in.train.ids(), read_text_csv(*config.train_text));
  }
  if (config.test_text) {
    for (const auto& [id, text] : read_text_csv(*config.test_text)) {
      in.test_tokens[id] = tokenize(text);
    }
  }
  return in;
}

std::size_t ExperimentResult::failed_cells() const {
  return static_cast<std::size_t>(std::count_if(
      rows.begin(), rows.end(), [](const ResultRow& r) { return r.failed; }));
}

bool strategy_applies(std::string_view estimator, const StrategyDescriptor& s) {
  if (estimator != kBm25) return true;
  switch (s.kind) {
    case StrategyKind::kRandom:
    case StrategyKind::kAide:
      return true;
    case StrategyKind::kNaive:
      return s.mode == SelectionMode::kMostInfluential ||
             s.mode == SelectionMode::kLeastInfluential;
    case StrategyKind::kFacilityLocation:
    case StrategyKind::kDivine:
      return s.mode == SelectionMode::kMostInfluential;
  }
  return false;
}

ExperimentResult run_experiment(const ExperimentConfig& config,
                                const ExperimentInputs& inputs) {
  config.validate();
  const std::size_t n_test = static_cast<std::size_t>(inputs.test.rows());
  const std::size_t n_tasks = config.estimators.size() * n_test;
  std::vector<TaskOutput> slots(n_tasks);
  parallel_for(n_tasks, config.threads, [&](std::size_t i) {
    slots[i] = run_task(config, inputs, config.estimators[i / n_test],
                        static_cast<Eigen::Index>(i % n_test));
  });
  ExperimentResult result;
  for (auto& slot : slots) {
    std::move(slot.rows.begin(), slot.rows.end(), std::back_inserter(result.rows));
    std::move(slot.selections.begin(), slot.selections.end(),
              std::back_inserter(result.selections));
    std::move(slot.validation.begin(), slot.validation.end(),
              std::back_inserter(result.validation));
  }
  sort_rows(result.rows);
  if (config.validation && inputs.toy && inputs.model && config.sanity_trials > 0) {
    result.sanity = sanity_self_finetune(*inputs.toy, *inputs.model,
                                         config.sanity_trials,
                                         config.validation_lr,
                                         hash_words({config.seed, 0x53414EULL}));
  }
  return result;
}

ExperimentResult run_experiment(const ExperimentConfig& config) {
  return run_experiment(config, prepare_inputs(config));
}

std::vector<SummaryCell> summarize(std::span<const ResultRow> rows) {
  using Key = std::tuple<std::string, std::string, std::optional<double>,
                         Eigen::Index>;
  std::map<Key, std::pair<std::size_t, double>> acc;
  for (const auto& r : rows) {
    if (r.failed) continue;
    auto& [n, sum] = acc[{r.estimator, r.strategy, r.lambda, r.k}];
    ++n;
    sum += r.db;
  }
  std::vector<SummaryCell> out;
  out.reserve(acc.size());
  for (const auto& [key, v] : acc) {
    const auto& [estimator, strategy, lambda, k] = key;
    out.push_back({estimator, strategy, lambda, k, v.first,
                   v.second / static_cast<double>(v.first)});
  }
  return out;
}

double auc_over_budgets(const std::map<Eigen::Index, double>& db_by_k,
                        std::span<const Eigen::Index> budgets) {
  if (budgets.empty()) throw InvalidArgument("auc: no budgets");
  std::vector<double> ys;
  ys.reserve(budgets.size());
  for (Eigen::Index k : budgets) {
    auto it = db_by_k.find(k);
    if (it == db_by_k.end()) {
      throw IncompleteSeriesError("auc: missing budget " + std::to_string(k));
    }
    ys.push_back(it->second);
  }
  if (budgets.size() == 1) return ys[0];
  double area = 0.0;
  for (std::size_t i = 1; i < budgets.size(); ++i) {
    area += 0.5 * (ys[i] + ys[i - 1]) *
            static_cast<double>(budgets[i] - budgets[i - 1]);
  }
  return area / static_cast<double>(budgets.back() - budgets.front());
}

std::vector<AucCell> auc_table(std::span<const SummaryCell> cells,
                               std::span<const Eigen::Index> budgets) {
  using Key = std::tuple<std::string, std::string, std::optional<double>>;
  std::map<Key, std::map<Eigen::Index, double>> series;
  for (const auto& c : cells) {
    series[{c.estimator, c.strategy, c.lambda}][c.k] = c.mean_db;
  }
  std::vector<AucCell> out;
  for (const auto& [key, by_k] : series) {
    const auto& [estimator, strategy, lambda] = key;
    try {
      out.push_back({estimator, strategy, lambda, auc_over_budgets(by_k, budgets)});
    } catch (const IncompleteSeriesError&) {
      // Omitted: a failed cell left a hole in the series.
    }
  }
  return out;
}

std::vector<ImprovementCell> relative_improvement(
    std::span<const SummaryCell> fl_cells,
    std::span<const SummaryCell> naive_cells) {
  std::map<std::tuple<std::string, std::string, Eigen::Index>, double> naive;
  for (const auto& c : naive_cells) {
    naive[{c.estimator, c.strategy, c.k}] = c.mean_db;
  }
  std::vector<ImprovementCell> out;
  for (const auto& c : fl_cells) {
    const auto colon = c.strategy.find(':');
    if (c.strategy.rfind("fl:", 0) != 0 || colon == std::string::npos) {
      throw PairingError("not a facility-location cell: " + c.strategy);
    }
    const std::string mode = c.strategy.substr(colon + 1);
    auto it = naive.find({c.estimator, "naive:" + mode, c.k});
    if (it == naive.end()) {
      throw PairingError("no naive:" + mode + " cell for " + c.estimator +
                         " at k=" + std::to_string(c.k));
    }
    ImprovementCell cell;
    cell.estimator = c.estimator;
    cell.mode = mode;
    cell.lambda = c.lambda.value_or(0.0);
    cell.k = c.k;
    cell.naive_db = it->second;
    cell.fl_db = c.mean_db;
    cell.delta_db = c.mean_db - it->second;
    cell.percent = (std::pow(10.0, cell.delta_db / 10.0) - 1.0) * 100.0;
    out.push_back(cell);
  }
  return out;
}

void sort_rows(std::vector<ResultRow>& rows) {
  std::stable_sort(rows.begin(), rows.end(), [](const ResultRow& a, const ResultRow& b) {
    return std::tie(a.estimator, a.strategy, a.lambda, a.k, a.test_id) <
           std::tie(b.estimator, b.strategy, b.lambda, b.k, b.test_id);
  });
}

std::string results_csv(std::vector<ResultRow> rows) {
  sort_rows(rows);
  std::ostringstream os;
  os << "estimator,strategy,lambda,k,test_id,xi_sr_ratio,xi_sr_db,status,error\n";
  for (const auto& r : rows) {
    os << csv_field(r.estimator) << ',' << csv_field(r.strategy) << ','
       << lambda_text(r.lambda) << ',' << r.k << ',' << csv_field(r.test_id) << ',';
    if (r.failed) {
      os << ",,failed," << csv_field(r.error) << '\n';
    } else {
      os << fmt("%.17g", r.ratio) << ',' << format_db_value(r.db) << ",ok,\n";
    }
  }
  return os.str();
}

std::vector<ResultRow> parse_results_csv(const std::string& text) {
  std::istringstream is(text);
  std::string line;
  if (!std::getline(is, line) ||
      line != "estimator,strategy,lambda,k,test_id,xi_sr_ratio,xi_sr_db,status,error") {
    throw FormatError("results csv: unexpected header", 0);
  }
  std::vector<ResultRow> rows;
  std::uint64_t line_no = 1;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.empty()) continue;
    const auto f = split_csv_line(line);
    if (f.size() != 9) {
      throw FormatError("results csv: expected 9 fields on line " +
                            std::to_string(line_no),
                        line_no);
    }
    ResultRow r;
    try {
      r.estimator = f[0];
      r.strategy = f[1];
      if (!f[2].empty()) r.lambda = std::stod(f[2]);
      r.k = std::stoll(f[3]);
      r.test_id = f[4];
      if (f[7] == "ok") {
        r.ratio = std::stod(f[5]);
        r.db = to_decibels(r.ratio);
      } else if (f[7] == "failed") {
        r.failed = true;
        r.error = f[8];
      } else {
        throw FormatError("results csv: bad status on line " +
                              std::to_string(line_no),
                          line_no);
      }
    } catch (const std::logic_error&) {
      throw FormatError("results csv: bad number on line " +
                            std::to_string(line_no),
                        line_no);
    }
    rows.push_back(std::move(r));
  }
  return rows;
}

std::string summary_csv(std::span<const SummaryCell> cells) {
  std::ostringstream os;
  os << "estimator,strategy,lambda,k,count,mean_xi_sr_db\n";
  for (const auto& c : cells) {
    os << csv_field(c.estimator) << ',' << csv_field(c.strategy) << ','
       << lambda_text(c.lambda) << ',' << c.k << ',' << c.count << ','
       << format_db_value(c.mean_db) << '\n';
  }
  return os.str();
}

std::string auc_csv(std::span<const AucCell> cells) {
  std::ostringstream os;
  os << "estimator,strategy,lambda,auc_db\n";
  for (const auto& c : cells) {
    os << csv_field(c.estimator) << ',' << csv_field(c.strategy) << ','
       << lambda_text(c.lambda) << ',' << format_db_value(c.auc_db) << '\n';
  }
  return os.str();
}

std::string improvement_csv(std::span<const ImprovementCell> cells) {
  std::ostringstream os;
  os << "estimator,mode,lambda,k,naive_db,fl_db,delta_db,percent\n";
  for (const auto& c : cells) {
    os << csv_field(c.estimator) << ',' << c.mode << ',' << fmt("%.6g", c.lambda)
       << ',' << c.k << ',' << format_db_value(c.naive_db) << ','
       << format_db_value(c.fl_db) << ',' << format_db_value(c.delta_db) << ','
       << fmt("%.2f", c.percent) << '\n';
  }
  return os.str();
}

std::string selections_csv(std::span<const Selection> selections) {
  std::ostringstream os;
  os << "test_id,estimator,strategy,k,rank,member_id,params\n";
  for (const auto& s : selections) {
    const std::string params = csv_field(s.params.dump());
    for (std::size_t i = 0; i < s.member_ids.size(); ++i) {
      os << csv_field(s.test_id) << ',' << csv_field(s.estimator) << ','
         << csv_field(s.strategy.name()) << ',' << s.k << ',' << (i + 1) << ','
         << csv_field(s.member_ids[i]) << ',' << params << '\n';
    }
  }
  return os.str();
}

std::string validation_csv(std::span<const ValidationRecord> records) {
  std::ostringstream os;
  os << "test_id,estimator,strategy,k,xi_sr_db,xi_plus,xi_jsd,replicate_seed_base\n";
  for (const auto& r : records) {
    os << csv_field(r.test_id) << ',' << csv_field(r.estimator) << ','
       << csv_field(r.strategy) << ',' << r.k << ',' << format_db_value(r.xi_sr_db)
       << ',' << fmt("%.9g", r.xi_plus) << ',' << fmt("%.9g", r.xi_jsd) << ','
       << r.replicate_seed_base << '\n';
  }
  return os.str();
}

std::string timings_csv(std::vector<ResultRow> rows) {
  sort_rows(rows);
  std::ostringstream os;
  os << "estimator,strategy,lambda,k,test_id,wall_seconds\n";
  for (const auto& r : rows) {
    os << csv_field(r.estimator) << ',' << csv_field(r.strategy) << ','
       << lambda_text(r.lambda) << ',' << r.k << ',' << csv_field(r.test_id) << ','
       << fmt("%.6f", r.wall_seconds) << '\n';
  }
  return os.str();
}

CorrelationSummary correlation_summary(std::span<const ValidationRecord> records,
                                       std::span<const double> bin_edges) {
  CorrelationSummary out;
  out.records = records.size();
  std::vector<double> sr, plus, shift, sr_pos, plus_pos, shift_pos;
  for (const auto& r : records) {
    sr.push_back(r.xi_sr_db);
    plus.push_back(r.xi_plus);
    shift.push_back(r.xi_jsd);
    if (r.xi_sr_db > 0.0) {
      sr_pos.push_back(r.xi_sr_db);
      plus_pos.push_back(r.xi_plus);
      shift_pos.push_back(r.xi_jsd);
    }
  }
  out.positive_records = sr_pos.size();
  out.rho_support_full = spearman_or_none(sr, plus);
  out.rho_shift_full = spearman_or_none(sr, shift);
  out.rho_support_positive = spearman_or_none(sr_pos, plus_pos);
  out.rho_shift_positive = spearman_or_none(sr_pos, shift_pos);
  out.bins = accuracy_by_bins(records, bin_edges);
  return out;
}

std::string correlation_csv(const CorrelationSummary& s) {
  std::ostringstream os;
  os << "metric,value\n";
  os << "records," << s.records << '\n';
  os << "positive_records," << s.positive_records << '\n';
  os << "rho_support_full," << opt_text(s.rho_support_full) << '\n';
  os << "rho_support_positive," << opt_text(s.rho_support_positive) << '\n';
  os << "rho_shift_full," << opt_text(s.rho_shift_full) << '\n';
  os << "rho_shift_positive," << opt_text(s.rho_shift_positive) << '\n';
  return os.str();
}

namespace {

std::string edge_text(double e) {
  if (e <= -1e300) return "-inf";
  if (e >= 1e300) return "inf";
  return fmt("%g", e);
}

std::string bins_csv(std::span<const BinAccuracy> bins) {
  std::ostringstream os;
  os << "lo,hi,count,accuracy\n";
  for (const auto& b : bins) {
    os << edge_text(b.lo) << ',' << edge_text(b.hi) << ',' << b.count << ','
       << opt_text(b.accuracy) << '\n';
  }
  return os.str();
}

}  // namespace

void write_report(const ExperimentResult& result,
                  std::span<const Eigen::Index> budgets,
                  std::span<const double> bin_edges,
                  const std::filesystem::path& dir, ReportFormat format) {
  if (format != ReportFormat::kCsv) throw InvalidArgument("unsupported format");
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());

  const auto cells = summarize(result.rows);
  std::vector<SummaryCell> fl, naive;
  for (const auto& c : cells) {
    if (c.strategy.rfind("fl:", 0) == 0) fl.push_back(c);
    if (c.strategy.rfind("naive:", 0) == 0) naive.push_back(c);
  }
  // Only pairs present on both sides are reported.
  std::set<std::tuple<std::string, std::string, Eigen::Index>> have;
  for (const auto& c : naive) have.insert({c.estimator, c.strategy, c.k});
  std::erase_if(fl, [&](const SummaryCell& c) {
    return !have.count({c.estimator, "naive:" + c.strategy.substr(3), c.k});
  });

  write_text_file(dir / "results.csv", results_csv(result.rows));
  write_text_file(dir / "summary.csv", summary_csv(cells));
  write_text_file(dir / "auc.csv", auc_csv(auc_table(cells, budgets)));
  write_text_file(dir / "improvement.csv",
                  improvement_csv(relative_improvement(fl, naive)));
  write_text_file(dir / "timings.csv", timings_csv(result.rows));
  if (!result.validation.empty()) {
    const auto summary = correlation_summary(result.validation, bin_edges);
    write_text_file(dir / "validation.csv", validation_csv(result.validation));
    write_text_file(dir / "correlation.csv", correlation_csv(summary));
    write_text_file(dir / "accuracy_bins.csv", bins_csv(summary.bins));
  }
  if (result.sanity) {
    std::ostringstream os;
    os << "metric,value\n"
       << "trials," << result.sanity->trials << '\n'
       << "support_fraction," << fmt("%.4f", result.sanity->support_fraction) << '\n'
       << "shift_fraction," << fmt("%.4f", result.sanity->shift_fraction) << '\n';
    write_text_file(dir / "sanity.csv", os.str());
  }
}

void write_text_file(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out << text;
  if (!out) throw IoError("write failed: " + path.string());
}

std::string read_text_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

}  // namespace selrel
