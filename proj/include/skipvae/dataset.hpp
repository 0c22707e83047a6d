// Datasets: IDX parsing, binarization and a synthetic prototype mixture.
#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <optional>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "skipvae/rng.hpp"
#include "skipvae/tensor.hpp"

namespace skipvae {

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class IdxFormatError : public DataError {
 public:
  IdxFormatError(const std::string& what, std::size_t offset)
      : DataError(what + " at byte offset " + std::to_string(offset)), offset_(offset) {}
  std::size_t offset() const { return offset_; }

 private:
  std::size_t offset_;
};

inline constexpr std::uint32_t kIdxImageMagic = 0x00000803;
inline constexpr std::uint32_t kIdxLabelMagic = 0x00000801;

/// N x P pixels stored as bytes: 0..255 before binarization, 0/1 after.
struct Dataset {
  std::size_t count = 0;
  std::size_t dim = 0;
  std::size_t image_rows = 0;
  std::size_t image_cols = 0;
  std::vector<std::uint8_t> pixels;
  std::optional<std::vector<int>> labels;
  std::string source;
  std::string binarization = "none";
  bool binary = false;

  bool empty() const { return count == 0; }
  std::span<const std::uint8_t> row(std::size_t i) const { return {pixels.data() + i * dim, dim}; }

  /// Selected rows as a float tensor; binary datasets only.
  Tensor batch(std::span<const std::size_t> indices) const {
    if (!binary) throw DataError("dataset '" + source + "' must be binarized before use");
    std::vector<double> v(indices.size() * dim);
    for (std::size_t r = 0; r < indices.size(); ++r) {
      auto src = row(indices[r]);
      std::transform(src.begin(), src.end(), v.begin() + r * dim, [](std::uint8_t b) { return double(b); });
    }
    return Tensor::matrix(indices.size(), dim, std::move(v));
  }

  Tensor rows_tensor(std::size_t begin, std::size_t end) const {
    std::vector<std::size_t> idx(end - begin);
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = begin + i;
    return batch(idx);
  }

  Dataset select(std::span<const std::size_t> indices) const {
    Dataset out = *this;
    out.count = indices.size();
    out.pixels.assign(indices.size() * dim, 0);
    for (std::size_t r = 0; r < indices.size(); ++r) {
      if (indices[r] >= count) throw DataError("dataset row index out of range");
      auto src = row(indices[r]);
      std::copy(src.begin(), src.end(), out.pixels.begin() + r * dim);
    }
    if (labels) {
      out.labels = std::vector<int>(indices.size());
      for (std::size_t r = 0; r < indices.size(); ++r) (*out.labels)[r] = (*labels)[indices[r]];
    }
    return out;
  }

  /// Rows [begin, end).
  Dataset slice(std::size_t begin, std::size_t end) const {
    if (begin > end || end > count) throw DataError("dataset slice out of range");
    std::vector<std::size_t> idx(end - begin);
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = begin + i;
    return select(idx);
  }
};

namespace detail {

inline std::uint32_t read_be32(std::span<const std::uint8_t> bytes, std::size_t offset) {
  if (offset + 4 > bytes.size()) throw IdxFormatError("truncated IDX header", offset);
  return (std::uint32_t(bytes[offset]) << 24) | (std::uint32_t(bytes[offset + 1]) << 16) |
         (std::uint32_t(bytes[offset + 2]) << 8) | std::uint32_t(bytes[offset + 3]);
}

inline void write_be32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  out.push_back(std::uint8_t(v >> 24));
  out.push_back(std::uint8_t(v >> 16));
  out.push_back(std::uint8_t(v >> 8));
  out.push_back(std::uint8_t(v));
}

inline std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw DataError("write failed for " + path.string());
}

}  // namespace detail

struct IdxImages {
  std::size_t count = 0, rows = 0, cols = 0;
  std::vector<std::uint8_t> pixels;
};

inline IdxImages parse_idx_images(std::span<const std::uint8_t> bytes) {
  auto magic = detail::read_be32(bytes, 0);
  if (magic != kIdxImageMagic) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "bad IDX image magic 0x%08x (expected 0x%08x)", magic, kIdxImageMagic);
    throw IdxFormatError(buf, 0);
  }
  IdxImages out;
  out.count = detail::read_be32(bytes, 4);
  out.rows = detail::read_be32(bytes, 8);
  out.cols = detail::read_be32(bytes, 12);
  const std::size_t need = out.count * out.rows * out.cols;
  if (bytes.size() < 16 + need) throw IdxFormatError("truncated IDX image payload", bytes.size());
  out.pixels.assign(bytes.begin() + 16, bytes.begin() + 16 + static_cast<std::ptrdiff_t>(need));
  return out;
}

inline std::vector<int> parse_idx_labels(std::span<const std::uint8_t> bytes) {
  auto magic = detail::read_be32(bytes, 0);
  if (magic != kIdxLabelMagic) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "bad IDX label magic 0x%08x (expected 0x%08x)", magic, kIdxLabelMagic);
    throw IdxFormatError(buf, 0);
  }
  const std::size_t n = detail::read_be32(bytes, 4);
  if (bytes.size() < 8 + n) throw IdxFormatError("truncated IDX label payload", bytes.size());
  return std::vector<int>(bytes.begin() + 8, bytes.begin() + 8 + static_cast<std::ptrdiff_t>(n));
}

inline std::vector<std::uint8_t> encode_idx_images(const IdxImages& images) {
  std::vector<std::uint8_t> out;
  detail::write_be32(out, kIdxImageMagic);
  detail::write_be32(out, static_cast<std::uint32_t>(images.count));
  detail::write_be32(out, static_cast<std::uint32_t>(images.rows));
  detail::write_be32(out, static_cast<std::uint32_t>(images.cols));
  out.insert(out.end(), images.pixels.begin(), images.pixels.end());
  return out;
}

inline std::vector<std::uint8_t> encode_idx_labels(std::span<const int> labels) {
  std::vector<std::uint8_t> out;
  detail::write_be32(out, kIdxLabelMagic);
  detail::write_be32(out, static_cast<std::uint32_t>(labels.size()));
  for (int l : labels) out.push_back(static_cast<std::uint8_t>(l));
  return out;
}

/// Raw 0..255 images; rows x cols flattened to P.
inline Dataset load_idx(const std::filesystem::path& images_path,
                        const std::optional<std::filesystem::path>& labels_path = std::nullopt) {
  auto images = parse_idx_images(detail::read_file(images_path));
  Dataset ds;
  ds.count = images.count;
  ds.image_rows = images.rows;
  ds.image_cols = images.cols;
  ds.dim = images.rows * images.cols;
  ds.pixels = std::move(images.pixels);
  ds.source = images_path.filename().string();
  if (labels_path) {
    auto labels = parse_idx_labels(detail::read_file(*labels_path));
    if (labels.size() != ds.count) {
      throw DataError("label count " + std::to_string(labels.size()) + " does not match image count " +
                      std::to_string(ds.count));
    }
    ds.labels = std::move(labels);
  }
  return ds;
}

enum class BinarizeMode { threshold, stochastic };

/// Threshold: pixel > 127 -> 1. Stochastic: one seeded Bernoulli(pixel / 255)
/// draw per pixel, frozen into the returned dataset. Binary input is returned
/// unchanged.
inline Dataset binarize(const Dataset& ds, BinarizeMode mode, std::uint64_t seed = 0) {
  if (ds.binary) return ds;
  Dataset out = ds;
  out.binary = true;
  if (mode == BinarizeMode::threshold) {
    for (auto& p : out.pixels) p = p > 127 ? 1 : 0;
    out.binarization = "threshold-127";
  } else {
    Rng rng = substream(seed, streams::binarize);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (auto& p : out.pixels) p = u(rng) < double(p) / 255.0 ? 1 : 0;
    out.binarization = "stochastic-seed-" + std::to_string(seed);
  }
  return out;
}

inline constexpr std::size_t kSyntheticPrototypes = 10;
inline constexpr double kSyntheticFlipRate = 0.05;

/// K = 10 random binary prototypes; example i copies prototype i mod K with
/// each pixel flipped with probability 0.05. Labels are prototype ids.
inline Dataset synthetic_grid(std::size_t n, std::size_t dim, std::uint64_t seed) {
  if (n < kSyntheticPrototypes) throw DataError("synthetic_grid needs n >= 10");
  if (dim == 0) throw DataError("synthetic_grid needs a positive pixel count");
  Rng rng = substream(seed, streams::data);
  std::bernoulli_distribution coin(0.5), flip(kSyntheticFlipRate);
  std::vector<std::uint8_t> prototypes(kSyntheticPrototypes * dim);
  for (auto& p : prototypes) p = coin(rng) ? 1 : 0;

  Dataset ds;
  ds.count = n;
  ds.dim = dim;
  ds.image_rows = 1;
  ds.image_cols = dim;
  ds.pixels.resize(n * dim);
  ds.labels = std::vector<int>(n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t k = i % kSyntheticPrototypes;
    (*ds.labels)[i] = static_cast<int>(k);
    for (std::size_t j = 0; j < dim; ++j) {
      std::uint8_t v = prototypes[k * dim + j];
      ds.pixels[i * dim + j] = flip(rng) ? std::uint8_t(1 - v) : v;
    }
  }
  ds.source = "synthetic_grid(n=" + std::to_string(n) + ",P=" + std::to_string(dim) +
              ",seed=" + std::to_string(seed) + ")";
  ds.binarization = "native-binary";
  ds.binary = true;
  return ds;
}

}  // namespace skipvae
