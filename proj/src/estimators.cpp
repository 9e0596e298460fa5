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

#include "selrel/estimators.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <set>
#include <unordered_map>

#include "selrel/error.hpp"

namespace selrel {

TokenBag tokenize(std::string_view text) {
  TokenBag bag;
  std::string token;
  for (char ch : text) {
    const auto c = static_cast<unsigned char>(ch);
    if (std::isalnum(c)) {
      token.push_back(static_cast<char>(std::tolower(c)));
    } else if (!token.empty()) {
      ++bag[token];
      token.clear();
    }
  }
  if (!token.empty()) ++bag[token];
  return bag;
}

TokenizedCorpus::TokenizedCorpus(
    std::vector<std::pair<std::string, TokenBag>> docs) {
  ids_.reserve(docs.size());
  docs_.reserve(docs.size());
  double total = 0.0;
  for (auto& [id, bag] : docs) {
    double len = 0.0;
    for (const auto& [token, count] : bag) {
      len += count;
      ++df_[token];
    }
    total += len;
    doc_lengths_.push_back(len);
    ids_.push_back(std::move(id));
    docs_.push_back(std::move(bag));
  }
  avg_doc_length_ = ids_.empty() ? 0.0 : total / static_cast<double>(ids_.size());
}

int TokenizedCorpus::document_frequency(const std::string& token) const {
  auto it = df_.find(token);
  return it == df_.end() ? 0 : it->second;
}

InfluenceRanking gradient_similarity_scores(std::string test_id,
                                            const Eigen::VectorXd& test_gradient,
                                            const GradientMatrix& train) {
  if (test_gradient.size() != train.dim()) {
    throw InvalidArgument("gradient_similarity_scores: test dim " +
                          std::to_string(test_gradient.size()) +
                          " != train dim " + std::to_string(train.dim()));
  }
  if (!train.normalized()) {
    throw ContractError(
        "gradient_similarity_scores: training gradients are not normalized");
  }
  if (std::abs(test_gradient.norm() - 1.0) > kUnitNormTolerance) {
    throw ContractError(
        "gradient_similarity_scores: test gradient is not normalized");
  }
  InfluenceRanking r;
  r.test_id = std::move(test_id);
  r.estimator = std::string(kGradientSimilarity);
  r.ids = train.ids();
  r.scores.resize(train.rows());
  for (Eigen::Index i = 0; i < train.rows(); ++i) {
    const double cos = train.row(i).cast<double>().dot(test_gradient.transpose());
    r.scores[i] = -std::clamp(cos, -1.0, 1.0);
  }
  return r;
}

InfluenceRanking gradient_similarity_scores(const GradientMatrix& test,
                                            Eigen::Index test_row,
                                            const GradientMatrix& train) {
  if (!test.normalized()) {
    throw ContractError(
        "gradient_similarity_scores: test gradients are not normalized");
  }
  return gradient_similarity_scores(test.id(test_row),
                                    test.row_as_double(test_row), train);
}

Eigen::VectorXd bm25_raw(const TokenBag& query, const TokenizedCorpus& corpus,
                         const Bm25Params& params) {
  if (corpus.empty()) throw InvalidArgument("bm25: empty corpus");
  const auto n_docs = static_cast<double>(corpus.size());
  const double avgdl = corpus.avg_doc_length();
  Eigen::VectorXd raw = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(corpus.size()));
  for (const auto& [term, unused] : query) {
    const int df = corpus.document_frequency(term);
    if (df == 0) continue;
    const double idf = std::log((n_docs - df + 0.5) / (df + 0.5) + 1.0);
    for (std::size_t d = 0; d < corpus.size(); ++d) {
      const auto& doc = corpus.docs()[d];
      auto it = doc.find(term);
      if (it == doc.end()) continue;
      const double tf = it->second;
      const double norm =
          avgdl > 0.0 ? corpus.doc_lengths()[d] / avgdl : 0.0;
      raw[static_cast<Eigen::Index>(d)] +=
          idf * tf * (params.k1 + 1.0) /
          (tf + params.k1 * (1.0 - params.b + params.b * norm));
    }
  }
  return raw;
}

InfluenceRanking bm25_scores(std::string test_id, const TokenBag& query,
                             const TokenizedCorpus& corpus,
                             const Bm25Params& params) {
  InfluenceRanking r;
  r.test_id = std::move(test_id);
  r.estimator = std::string(kBm25);
  r.ids = corpus.ids();
  // 0.0 - x keeps zero overlaps at +0.0 rather than -0.0.
  r.scores = (0.0 - bm25_raw(query, corpus, params).array()).matrix();
  return r;
}

namespace {

std::string trim(std::string s) {
  while (!s.empty() && (s.back() == '\r' || s.back() == ' ')) s.pop_back();
  std::size_t b = 0;
  while (b < s.size() && s[b] == ' ') ++b;
  return s.substr(b);
}

}  // namespace

InfluenceRanking load_external_scores(
    const std::filesystem::path& path,
    const std::vector<std::string>& training_ids, std::string name,
    std::string test_id) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open '" + path.string() + "'");
  std::string line;
  if (!std::getline(in, line) || trim(line) != "id,score") {
    throw InvalidArgument("'" + path.string() +
                          "': expected header \"id,score\"");
  }
  std::unordered_map<std::string, Eigen::Index> position;
  for (std::size_t i = 0; i < training_ids.size(); ++i) {
    position.emplace(training_ids[i], static_cast<Eigen::Index>(i));
  }
  Eigen::VectorXd scores(static_cast<Eigen::Index>(training_ids.size()));
  std::vector<bool> seen(training_ids.size(), false);
  std::set<std::string> duplicates;
  std::set<std::string> unknown;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    line = trim(line);
    if (line.empty()) continue;
    const auto comma = line.rfind(',');
    if (comma == std::string::npos) {
      throw InvalidArgument("'" + path.string() + "' line " +
                            std::to_string(line_no) + ": missing comma");
    }
    const std::string id = line.substr(0, comma);
    double value = 0.0;
    try {
      std::size_t used = 0;
      const std::string field = line.substr(comma + 1);
      value = std::stod(field, &used);
      if (used != field.size()) throw std::invalid_argument(field);
    } catch (const std::exception&) {
      throw InvalidArgument("'" + path.string() + "' line " +
                            std::to_string(line_no) + ": bad score");
    }
    auto it = position.find(id);
    if (it == position.end()) {
      unknown.insert(id);
      continue;
    }
    if (seen[it->second]) {
      duplicates.insert(id);
      continue;
    }
    seen[it->second] = true;
    scores[it->second] = value;
  }
  std::vector<std::string> missing;
  for (std::size_t i = 0; i < training_ids.size(); ++i) {
    if (!seen[i]) missing.push_back(training_ids[i]);
  }
  if (!missing.empty() || !duplicates.empty() || !unknown.empty()) {
    std::string msg = "'" + path.string() + "' does not cover the training set:";
    auto list = [&msg](const char* label, const auto& items) {
      if (items.empty()) return;
      msg += std::string(" ") + label + " [";
      bool first = true;
      for (const auto& s : items) {
        msg += (first ? "" : ", ") + s;
        first = false;
      }
      msg += "]";
    };
    list("missing", missing);
    list("duplicate", duplicates);
    list("unknown", unknown);
    throw CoverageError(msg);
  }
  InfluenceRanking r;
  r.test_id = std::move(test_id);
  r.estimator = "external:" + name;
  r.ids = training_ids;
  r.scores = std::move(scores);
  return r;
}

std::vector<std::pair<std::string, std::string>> read_text_csv(
    const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open '" + path.string() + "'");
  std::string line;
  if (!std::getline(in, line) || trim(line) != "id,text") {
    throw InvalidArgument("'" + path.string() + "': expected header \"id,text\"");
  }
  std::vector<std::pair<std::string, std::string>> rows;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto comma = line.find(',');
    if (comma == std::string::npos) {
      throw InvalidArgument("'" + path.string() + "': row without text field");
    }
    rows.emplace_back(line.substr(0, comma), line.substr(comma + 1));
  }
  return rows;
}

}  // namespace selrel
