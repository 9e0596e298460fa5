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

// Influence estimators. Every ranking uses one sign convention: more
// negative = more helpful, more positive = more harmful.

#include <Eigen/Dense>

#include <filesystem>
#include <map>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "selrel/gradstore.hpp"

namespace selrel {

inline constexpr std::string_view kGradientSimilarity = "gradient_similarity";
inline constexpr std::string_view kBm25 = "bm25";

struct InfluenceRanking {
  std::string test_id;
  std::string estimator;
  // Training ids and their scores, index-aligned.
  std::vector<std::string> ids;
  Eigen::VectorXd scores;

  Eigen::Index size() const { return scores.size(); }
};

// Token -> occurrence count.
using TokenBag = std::map<std::string, int>;

// Lowercases ASCII, splits on runs of non-alphanumeric characters.
TokenBag tokenize(std::string_view text);

class TokenizedCorpus {
 public:
  TokenizedCorpus() = default;
  explicit TokenizedCorpus(std::vector<std::pair<std::string, TokenBag>> docs);

  std::size_t size() const { return ids_.size(); }
  bool empty() const { return ids_.empty(); }
  const std::vector<std::string>& ids() const { return ids_; }
  const std::vector<TokenBag>& docs() const { return docs_; }
  const std::vector<double>& doc_lengths() const { return doc_lengths_; }
  double avg_doc_length() const { return avg_doc_length_; }
  int document_frequency(const std::string& token) const;

 private:
  std::vector<std::string> ids_;
  std::vector<TokenBag> docs_;
  std::vector<double> doc_lengths_;
  double avg_doc_length_ = 0.0;
  std::map<std::string, int> df_;
};

struct Bm25Params {
  double k1 = 1.2;
  double b = 0.75;
};

// Score i = -cos(test, train_i). Both inputs must be unit-normalized.
InfluenceRanking gradient_similarity_scores(std::string test_id,
                                            const Eigen::VectorXd& test_gradient,
                                            const GradientMatrix& train);
InfluenceRanking gradient_similarity_scores(const GradientMatrix& test,
                                            Eigen::Index test_row,
                                            const GradientMatrix& train);

// Raw Okapi BM25 per document (non-negative IDF variant, summed over the
// distinct query terms).
Eigen::VectorXd bm25_raw(const TokenBag& query, const TokenizedCorpus& corpus,
                         const Bm25Params& params = {});

// Ranking with score = -raw, so high overlap reads as helpful.
InfluenceRanking bm25_scores(std::string test_id, const TokenBag& query,
                             const TokenizedCorpus& corpus,
                             const Bm25Params& params = {});

// Reads an "id,score" CSV covering the training ids exactly once. Values are
// passed through; the estimator tag is "external:<name>".
InfluenceRanking load_external_scores(const std::filesystem::path& path,
                                      const std::vector<std::string>& training_ids,
                                      std::string name, std::string test_id = {});

// Reads an "id,text" CSV (text is everything after the first comma).
std::vector<std::pair<std::string, std::string>> read_text_csv(
    const std::filesystem::path& path);

}  // namespace selrel
