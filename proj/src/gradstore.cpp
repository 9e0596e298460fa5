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

#include "selrel/gradstore.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <numeric>
#include <sstream>

#include "json.hpp"
#include "selrel/error.hpp"
#include "selrel/random.hpp"

namespace selrel {

namespace {

double row_norm(const RowMatrixXf& m, Eigen::Index i) {
  return std::sqrt(m.row(i).cast<double>().squaredNorm());
}

}  // namespace

GradientMatrix::GradientMatrix(std::vector<std::string> ids, RowMatrixXf rows,
                               std::vector<LayerSegment> layer_segments,
                               bool normalized)
    : ids_(std::move(ids)),
      values_(std::move(rows)),
      segments_(std::move(layer_segments)),
      normalized_(normalized) {
  if (static_cast<Eigen::Index>(ids_.size()) != values_.rows()) {
    throw InvalidArgument("gradient matrix has " +
                          std::to_string(values_.rows()) + " rows but " +
                          std::to_string(ids_.size()) + " ids");
  }
  std::size_t width_sum = 0;
  for (const auto& s : segments_) {
    if (s.width == 0) {
      throw InvalidArgument("layer segment '" + s.name + "' has zero width");
    }
    width_sum += s.width;
  }
  if (width_sum != static_cast<std::size_t>(values_.cols())) {
    throw InvalidArgument("layer segment widths sum to " +
                          std::to_string(width_sum) + " but dim is " +
                          std::to_string(values_.cols()));
  }
  index_.reserve(ids_.size());
  for (std::size_t i = 0; i < ids_.size(); ++i) {
    if (!index_.emplace(ids_[i], static_cast<Eigen::Index>(i)).second) {
      throw InvalidArgument("duplicate example id '" + ids_[i] + "'");
    }
  }
  if (!values_.allFinite()) {
    throw NumericError("gradient matrix contains non-finite values");
  }
  if (normalized_) {
    for (Eigen::Index i = 0; i < values_.rows(); ++i) {
      const double n = row_norm(values_, i);
      if (n == 0.0) throw DegenerateGradientError(ids_[i]);
      if (std::abs(n - 1.0) > kUnitNormTolerance) {
        throw ContractError("row '" + ids_[i] +
                            "' is flagged normalized but has norm " +
                            std::to_string(n));
      }
    }
  }
}

std::optional<Eigen::Index> GradientMatrix::find(const std::string& id) const {
  auto it = index_.find(id);
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

Eigen::Index GradientMatrix::index_of(const std::string& id) const {
  auto it = index_.find(id);
  if (it == index_.end()) {
    throw InvalidArgument("unknown example id '" + id + "'");
  }
  return it->second;
}

Eigen::MatrixXd GradientMatrix::columns_for(
    std::span<const Eigen::Index> rows) const {
  Eigen::MatrixXd a(dim(), static_cast<Eigen::Index>(rows.size()));
  for (std::size_t j = 0; j < rows.size(); ++j) {
    a.col(static_cast<Eigen::Index>(j)) =
        values_.row(rows[j]).transpose().cast<double>();
  }
  return a;
}

bool operator==(const GradientMatrix& a, const GradientMatrix& b) {
  return a.ids_ == b.ids_ && a.segments_ == b.segments_ &&
         a.normalized_ == b.normalized_ && a.values_.rows() == b.values_.rows() &&
         a.values_.cols() == b.values_.cols() &&
         std::memcmp(a.values_.data(), b.values_.data(),
                     sizeof(float) * a.values_.size()) == 0;
}

// ---------------------------------------------------------------------------
// Projection

std::vector<std::size_t> allocate_projection_dims(
    std::span<const std::size_t> layer_dims, std::size_t total_dim) {
  if (layer_dims.empty()) {
    throw InvalidArgument("allocate_projection_dims: empty layer list");
  }
  if (total_dim < layer_dims.size()) {
    throw InvalidArgument("allocate_projection_dims: total_dim " +
                          std::to_string(total_dim) + " < layer count " +
                          std::to_string(layer_dims.size()));
  }
  unsigned __int128 sum = 0;
  for (std::size_t d : layer_dims) {
    if (d == 0) throw InvalidArgument("allocate_projection_dims: zero width");
    sum += d;
  }
  std::vector<std::size_t> out(layer_dims.size());
  for (std::size_t l = 0; l < layer_dims.size(); ++l) {
    const auto share = static_cast<std::size_t>(
        static_cast<unsigned __int128>(total_dim) * layer_dims[l] / sum);
    out[l] = std::max<std::size_t>(1, std::min(layer_dims[l], share));
  }
  std::size_t used = std::accumulate(out.begin(), out.end(), std::size_t{0});
  while (used > total_dim) {
    auto it = std::max_element(out.begin(), out.end());
    --*it;
    --used;
  }
  return out;
}

ProjectionSpec make_projection_spec(const GradientMatrix& matrix,
                                    std::size_t total_dim,
                                    std::uint64_t seed) {
  std::vector<std::size_t> widths;
  for (const auto& s : matrix.layer_segments()) widths.push_back(s.width);
  ProjectionSpec spec;
  spec.total_dim = total_dim;
  spec.seed = seed;
  spec.per_layer_dims = allocate_projection_dims(widths, total_dim);
  return spec;
}

bool rademacher_negative(std::uint64_t seed, std::uint64_t layer,
                         std::uint64_t in_col, std::uint64_t out_row) {
  const std::uint64_t word = hash_words({seed, layer, in_col, out_row / 64});
  return (word >> (out_row % 64)) & 1U;
}

namespace {

// Input columns per materialized sign block.
constexpr Eigen::Index kProjectionChunk = 256;

}  // namespace

GradientMatrix project_matrix(const GradientMatrix& matrix,
                              const ProjectionSpec& spec) {
  const auto& segments = matrix.layer_segments();
  if (segments.size() != spec.per_layer_dims.size()) {
    throw InvalidArgument("project_matrix: matrix has " +
                          std::to_string(segments.size()) +
                          " layer segments but spec has " +
                          std::to_string(spec.per_layer_dims.size()) +
                          " projection dims");
  }
  std::size_t out_dim = 0;
  for (std::size_t l = 0; l < segments.size(); ++l) {
    const std::size_t p = spec.per_layer_dims[l];
    if (p == 0 || p > segments[l].width) {
      throw InvalidArgument("project_matrix: layer '" + segments[l].name +
                            "' projection dim " + std::to_string(p) +
                            " outside [1, " +
                            std::to_string(segments[l].width) + "]");
    }
    if (spec.kind == ProjectionKind::kIdentity && p != segments[l].width) {
      throw InvalidArgument(
          "project_matrix: identity projection requires p_l == d_l");
    }
    out_dim += p;
  }
  if (out_dim > spec.total_dim) {
    throw InvalidArgument("project_matrix: per-layer dims exceed total_dim");
  }

  const Eigen::Index n = matrix.rows();
  RowMatrixXf out(n, static_cast<Eigen::Index>(out_dim));
  std::vector<LayerSegment> out_segments;
  Eigen::Index in_offset = 0;
  Eigen::Index out_offset = 0;
  for (std::size_t l = 0; l < segments.size(); ++l) {
    const auto d = static_cast<Eigen::Index>(segments[l].width);
    const auto p = static_cast<Eigen::Index>(spec.per_layer_dims[l]);
    if (spec.kind == ProjectionKind::kIdentity) {
      out.middleCols(out_offset, p) = matrix.values().middleCols(in_offset, d);
    } else {
      const double scale = 1.0 / std::sqrt(static_cast<double>(p));
      Eigen::MatrixXd acc = Eigen::MatrixXd::Zero(n, p);
      Eigen::MatrixXd signs;
      for (Eigen::Index c0 = 0; c0 < d; c0 += kProjectionChunk) {
        const Eigen::Index cw = std::min(kProjectionChunk, d - c0);
        signs.resize(cw, p);
        for (Eigen::Index c = 0; c < cw; ++c) {
          for (Eigen::Index r0 = 0; r0 < p; r0 += 64) {
            const std::uint64_t word = hash_words(
                {spec.seed, l, static_cast<std::uint64_t>(c0 + c),
                 static_cast<std::uint64_t>(r0 / 64)});
            const Eigen::Index rw = std::min<Eigen::Index>(64, p - r0);
            for (Eigen::Index b = 0; b < rw; ++b) {
              signs(c, r0 + b) = ((word >> b) & 1U) ? -scale : scale;
            }
          }
        }
        acc.noalias() +=
            matrix.values().middleCols(in_offset + c0, cw).cast<double>() *
            signs;
      }
      out.middleCols(out_offset, p) = acc.cast<float>();
    }
    out_segments.push_back({segments[l].name, static_cast<std::size_t>(p)});
    in_offset += d;
    out_offset += p;
  }
  return GradientMatrix(matrix.ids(), std::move(out), std::move(out_segments),
                        false);
}

GradientMatrix normalize_rows(const GradientMatrix& matrix) {
  RowMatrixXf values = matrix.values();
  for (Eigen::Index i = 0; i < values.rows(); ++i) {
    const double n = row_norm(values, i);
    if (n == 0.0) throw DegenerateGradientError(matrix.id(i));
    if (std::abs(n - 1.0) <= kUnitNormTolerance) continue;
    values.row(i) = (values.row(i).cast<double>() / n).cast<float>();
  }
  return GradientMatrix(matrix.ids(), std::move(values),
                        matrix.layer_segments(), true);
}

// ---------------------------------------------------------------------------
// Container

namespace {

constexpr std::uint64_t kFixedHeaderBytes = 4 + 2 + 2 + 4;
constexpr std::uint64_t kShapeBytes = 8 + 8;

template <class T>
void put_le(std::string& out, T value) {
  unsigned char buf[sizeof(T)];
  for (std::size_t i = 0; i < sizeof(T); ++i) {
    buf[i] = static_cast<unsigned char>(
        (static_cast<std::uint64_t>(value) >> (8 * i)) & 0xFF);
  }
  out.append(reinterpret_cast<const char*>(buf), sizeof(T));
}

template <class T>
T get_le(std::string_view bytes, std::uint64_t offset) {
  std::uint64_t v = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) {
    v |= static_cast<std::uint64_t>(
             static_cast<unsigned char>(bytes[offset + i]))
         << (8 * i);
  }
  return static_cast<T>(v);
}

void require(std::string_view bytes, std::uint64_t offset, std::uint64_t count,
             const char* what) {
  if (bytes.size() < offset || bytes.size() - offset < count) {
    throw FormatError(std::string("truncated container: expected ") + what,
                      bytes.size());
  }
}

}  // namespace

std::string container_metadata(const GradientMatrix& matrix) {
  nlohmann::json meta;
  meta["ids"] = matrix.ids();
  auto segs = nlohmann::json::array();
  for (const auto& s : matrix.layer_segments()) {
    segs.push_back(nlohmann::json::array({s.name, s.width}));
  }
  meta["layer_segments"] = std::move(segs);
  return meta.dump();
}

std::uint64_t container_size(std::uint64_t metadata_bytes, std::uint64_t n,
                             std::uint64_t dim) {
  return kFixedHeaderBytes + metadata_bytes + kShapeBytes +
         sizeof(float) * n * dim;
}

std::string encode_gradient_matrix(const GradientMatrix& matrix) {
  const std::string meta = container_metadata(matrix);
  const auto n = static_cast<std::uint64_t>(matrix.rows());
  const auto dim = static_cast<std::uint64_t>(matrix.dim());
  std::string out;
  out.reserve(container_size(meta.size(), n, dim));
  out.append(kContainerMagic, 4);
  put_le<std::uint16_t>(out, kContainerVersion);
  put_le<std::uint16_t>(out, matrix.normalized() ? 1 : 0);
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(meta.size()));
  out += meta;
  put_le<std::uint64_t>(out, n);
  put_le<std::uint64_t>(out, dim);
  const float* data = matrix.values().data();
  if constexpr (std::endian::native == std::endian::little) {
    out.append(reinterpret_cast<const char*>(data),
               sizeof(float) * static_cast<std::size_t>(n * dim));
  } else {
    for (std::uint64_t i = 0; i < n * dim; ++i) {
      put_le<std::uint32_t>(out, std::bit_cast<std::uint32_t>(data[i]));
    }
  }
  return out;
}

GradientMatrix decode_gradient_matrix(std::string_view bytes) {
  require(bytes, 0, kFixedHeaderBytes, "fixed header");
  if (std::memcmp(bytes.data(), kContainerMagic, 4) != 0) {
    throw FormatError("bad magic (expected \"GRDM\")", 0);
  }
  const auto version = get_le<std::uint16_t>(bytes, 4);
  if (version != kContainerVersion) {
    throw FormatError("unsupported container version " +
                          std::to_string(version),
                      4);
  }
  const auto flags = get_le<std::uint16_t>(bytes, 6);
  if ((flags & ~std::uint16_t{1}) != 0) {
    throw FormatError("unknown flag bits set", 6);
  }
  const auto meta_len = get_le<std::uint32_t>(bytes, 8);
  std::uint64_t offset = kFixedHeaderBytes;
  require(bytes, offset, meta_len, "metadata");

  std::vector<std::string> ids;
  std::vector<LayerSegment> segments;
  try {
    const auto meta = nlohmann::json::parse(bytes.substr(offset, meta_len));
    ids = meta.at("ids").get<std::vector<std::string>>();
    for (const auto& s : meta.at("layer_segments")) {
      segments.push_back(
          {s.at(0).get<std::string>(), s.at(1).get<std::size_t>()});
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("invalid metadata JSON: ") + e.what(),
                      offset);
  }
  offset += meta_len;

  require(bytes, offset, kShapeBytes, "row/column counts");
  const auto n = get_le<std::uint64_t>(bytes, offset);
  const auto dim = get_le<std::uint64_t>(bytes, offset + 8);
  if (n != ids.size()) {
    throw FormatError("row count " + std::to_string(n) + " does not match " +
                          std::to_string(ids.size()) + " metadata ids",
                      offset);
  }
  offset += kShapeBytes;
  if (dim != 0 && n > (UINT64_MAX / sizeof(float)) / dim) {
    throw FormatError("payload size overflows", offset - kShapeBytes);
  }
  const std::uint64_t payload = sizeof(float) * n * dim;
  require(bytes, offset, payload, "float32 payload");
  if (bytes.size() - offset != payload) {
    throw FormatError("trailing bytes after payload", offset + payload);
  }

  RowMatrixXf values(static_cast<Eigen::Index>(n),
                     static_cast<Eigen::Index>(dim));
  if constexpr (std::endian::native == std::endian::little) {
    std::memcpy(values.data(), bytes.data() + offset, payload);
  } else {
    for (std::uint64_t i = 0; i < n * dim; ++i) {
      values.data()[i] = std::bit_cast<float>(
          get_le<std::uint32_t>(bytes, offset + sizeof(float) * i));
    }
  }
  try {
    return GradientMatrix(std::move(ids), std::move(values),
                          std::move(segments), (flags & 1U) != 0);
  } catch (const FormatError&) {
    throw;
  } catch (const Error& e) {
    throw FormatError(std::string("container violates matrix invariants: ") +
                          e.what(),
                      kFixedHeaderBytes);
  }
}

void write_gradient_matrix(const GradientMatrix& matrix,
                           const std::filesystem::path& path) {
  const std::string bytes = encode_gradient_matrix(matrix);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write to '" + path.string() + "' failed");
}

GradientMatrix read_gradient_matrix(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "' for reading");
  std::string bytes((std::istreambuf_iterator<char>(in)),
                    std::istreambuf_iterator<char>());
  return decode_gradient_matrix(bytes);
}

}  // namespace selrel
