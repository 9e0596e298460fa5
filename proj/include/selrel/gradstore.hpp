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

// Per-example gradient storage: the in-memory matrix, row normalization,
// per-layer random projection, and the GRDM binary container.

#include <Eigen/Dense>

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

namespace selrel {

using RowMatrixXf =
    Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct LayerSegment {
  std::string name;
  std::size_t width = 0;

  friend bool operator==(const LayerSegment&, const LayerSegment&) = default;
};

// Tolerance on |norm - 1| for a row to count as unit length.
inline constexpr double kUnitNormTolerance = 1e-6;

// Gradients as rows (float32, matching the on-disk payload). The constructor
// enforces every structural invariant; instances are immutable afterwards.
class GradientMatrix {
 public:
  GradientMatrix() = default;
  GradientMatrix(std::vector<std::string> ids, RowMatrixXf rows,
                 std::vector<LayerSegment> layer_segments,
                 bool normalized = false);

  Eigen::Index rows() const { return values_.rows(); }
  Eigen::Index dim() const { return values_.cols(); }
  bool normalized() const { return normalized_; }

  const std::vector<std::string>& ids() const { return ids_; }
  const std::string& id(Eigen::Index row) const { return ids_[row]; }
  const std::vector<LayerSegment>& layer_segments() const { return segments_; }
  const RowMatrixXf& values() const { return values_; }

  auto row(Eigen::Index i) const { return values_.row(i); }
  Eigen::VectorXd row_as_double(Eigen::Index i) const {
    return values_.row(i).transpose().cast<double>();
  }

  std::optional<Eigen::Index> find(const std::string& id) const;
  // Throws InvalidArgument when the id is unknown.
  Eigen::Index index_of(const std::string& id) const;

  // dim x rows.size() matrix whose columns are the requested gradients.
  Eigen::MatrixXd columns_for(std::span<const Eigen::Index> rows) const;

  friend bool operator==(const GradientMatrix& a, const GradientMatrix& b);

 private:
  std::vector<std::string> ids_;
  RowMatrixXf values_;
  std::vector<LayerSegment> segments_;
  bool normalized_ = false;
  std::unordered_map<std::string, Eigen::Index> index_;
};

enum class ProjectionKind {
  kRademacher,
  // Test mode: each layer block is copied unchanged (requires p_l == d_l).
  kIdentity,
};

struct ProjectionSpec {
  std::size_t total_dim = std::size_t{1} << 13;
  std::uint64_t seed = 0;
  std::vector<std::size_t> per_layer_dims;
  ProjectionKind kind = ProjectionKind::kRademacher;
};

// proj_l = min(d_l, floor(total * d_l / sum(d))), clamped to >= 1. If the
// clamp pushes the sum over budget, the largest entries (lowest index first)
// are decremented until it fits.
std::vector<std::size_t> allocate_projection_dims(
    std::span<const std::size_t> layer_dims, std::size_t total_dim);

ProjectionSpec make_projection_spec(const GradientMatrix& matrix,
                                    std::size_t total_dim, std::uint64_t seed);

// Rademacher sign of entry (out_row, in_col) of layer `layer`'s projection.
// Word w = mix64-fold of (seed, layer, in_col, out_row / 64); bit
// (out_row % 64) set means -1. The scale 1/sqrt(p) is applied separately.
bool rademacher_negative(std::uint64_t seed, std::uint64_t layer,
                         std::uint64_t in_col, std::uint64_t out_row);

// Projects each layer block with its own seeded sign matrix scaled by
// 1/sqrt(p_l). The output keeps the segment names, has the projected widths,
// and is never flagged as normalized.
GradientMatrix project_matrix(const GradientMatrix& matrix,
                              const ProjectionSpec& spec);

// Divides every row by its L2 norm. Rows already within float precision of
// unit length are left untouched so that the operation is idempotent.
GradientMatrix normalize_rows(const GradientMatrix& matrix);

// GRDM container.
inline constexpr char kContainerMagic[4] = {'G', 'R', 'D', 'M'};
inline constexpr std::uint16_t kContainerVersion = 1;

std::string container_metadata(const GradientMatrix& matrix);
// Exact byte length of a container with the given metadata length.
std::uint64_t container_size(std::uint64_t metadata_bytes, std::uint64_t n,
                             std::uint64_t dim);

void write_gradient_matrix(const GradientMatrix& matrix,
                           const std::filesystem::path& path);
GradientMatrix read_gradient_matrix(const std::filesystem::path& path);

std::string encode_gradient_matrix(const GradientMatrix& matrix);
GradientMatrix decode_gradient_matrix(std::string_view bytes);

}  // namespace selrel
