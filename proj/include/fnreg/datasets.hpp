#pragma once

#include <openssl/evp.h>

#include <algorithm>
#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "fnreg/error.hpp"
#include "fnreg/rng.hpp"
#include "fnreg/tensor.hpp"

namespace fnreg {

inline constexpr std::size_t kNumClasses = 10;
inline constexpr std::uint32_t kIdxImageMagic = 2051;
inline constexpr std::uint32_t kIdxLabelMagic = 2049;
inline constexpr std::size_t kCifarRecordBytes = 3073;

/// Images (count x H x W x C, normalized) with their class labels.
template <typename T>
struct LabeledDataset {
  Tensor<T> images;
  std::vector<int> labels;
  /// "path sha256" entries for the files the data came from.
  std::vector<std::string> provenance;
  /// Mean image that was subtracted during normalization (H x W x C).
  Tensor<T> mean_image;

  std::size_t size() const noexcept { return labels.size(); }
};

/// Unlabeled regularization inputs. An empty pool has a default tensor.
template <typename T>
struct UnlabeledPool {
  Tensor<T> images;

  std::size_t size() const noexcept { return images.batch(); }
  bool empty() const noexcept { return size() == 0; }
};

struct NormalizeOptions {
  /// Subtract this mean image instead of the dataset's own mean (use the
  /// training mean when loading a test set).
  std::optional<std::vector<double>> mean_image;
};

namespace detail {

inline std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (in.bad()) throw DataError("read error on " + path.string());
  return bytes;
}

inline std::uint32_t read_be32(const std::vector<std::uint8_t>& bytes, std::size_t offset) {
  return (std::uint32_t{bytes[offset]} << 24) | (std::uint32_t{bytes[offset + 1]} << 16) |
         (std::uint32_t{bytes[offset + 2]} << 8) | std::uint32_t{bytes[offset + 3]};
}

inline std::string sha256_hex(const std::vector<std::uint8_t>& bytes) {
  std::array<unsigned char, EVP_MAX_MD_SIZE> digest{};
  unsigned int length = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), digest.data(), &length, EVP_sha256(), nullptr) != 1) {
    throw DataError("sha256 failed");
  }
  static constexpr char hex[] = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < length; ++i) {
    out += hex[digest[i] >> 4];
    out += hex[digest[i] & 0xf];
  }
  return out;
}

/// Scales raw bytes to [0, 1] and subtracts the mean image.
template <typename T>
void normalize(LabeledDataset<T>& ds, const std::vector<std::uint8_t>& pixels, const NormalizeOptions& options) {
  const std::size_t n = ds.images.batch(), dim = ds.images.sample_size();
  std::vector<double> mean(dim, 0.0);
  if (options.mean_image) {
    if (options.mean_image->size() != dim) throw DataError("mean image has the wrong size");
    mean = *options.mean_image;
  } else {
    for (std::size_t s = 0; s < n; ++s) {
      for (std::size_t i = 0; i < dim; ++i) mean[i] += pixels[s * dim + i] / 255.0;
    }
    for (double& m : mean) m /= static_cast<double>(n);
  }
  for (std::size_t s = 0; s < n; ++s) {
    for (std::size_t i = 0; i < dim; ++i) {
      ds.images[s * dim + i] = static_cast<T>(pixels[s * dim + i] / 255.0 - mean[i]);
    }
  }
  ds.mean_image = Tensor<T>(ds.images.sample_shape(), std::vector<T>(mean.begin(), mean.end()));
}

}  // namespace detail

/// Parses an MNIST IDX image/label file pair into 28x28x1 images.
template <typename T>
LabeledDataset<T> load_mnist_idx(const std::filesystem::path& images_path, const std::filesystem::path& labels_path,
                                 const NormalizeOptions& options = {}) {
  const auto image_bytes = detail::read_file(images_path);
  const auto label_bytes = detail::read_file(labels_path);
  if (image_bytes.size() < 16) throw DataError(images_path.string() + ": truncated IDX header");
  if (label_bytes.size() < 8) throw DataError(labels_path.string() + ": truncated IDX header");
  if (const auto magic = detail::read_be32(image_bytes, 0); magic != kIdxImageMagic) {
    throw DataError(images_path.string() + ": bad IDX image magic " + std::to_string(magic));
  }
  if (const auto magic = detail::read_be32(label_bytes, 0); magic != kIdxLabelMagic) {
    throw DataError(labels_path.string() + ": bad IDX label magic " + std::to_string(magic));
  }
  const std::size_t count = detail::read_be32(image_bytes, 4);
  const std::size_t rows = detail::read_be32(image_bytes, 8);
  const std::size_t cols = detail::read_be32(image_bytes, 12);
  const std::size_t label_count = detail::read_be32(label_bytes, 4);
  if (count != label_count) {
    throw DataError("IDX image count " + std::to_string(count) + " != label count " + std::to_string(label_count));
  }
  if (count == 0 || rows == 0 || cols == 0) throw DataError(images_path.string() + ": empty IDX file");
  if (image_bytes.size() < 16 + count * rows * cols) throw DataError(images_path.string() + ": truncated IDX image data");
  if (label_bytes.size() < 8 + count) throw DataError(labels_path.string() + ": truncated IDX label data");

  LabeledDataset<T> ds;
  ds.images = Tensor<T>({count, rows, cols, 1});
  ds.labels.resize(count);
  for (std::size_t i = 0; i < count; ++i) {
    const int label = label_bytes[8 + i];
    if (label >= static_cast<int>(kNumClasses)) throw DataError(labels_path.string() + ": label " + std::to_string(label) + " >= 10");
    ds.labels[i] = label;
  }
  const std::vector<std::uint8_t> pixels(image_bytes.begin() + 16,
                                         image_bytes.begin() + static_cast<std::ptrdiff_t>(16 + count * rows * cols));
  detail::normalize(ds, pixels, options);
  ds.provenance = {images_path.string() + " " + detail::sha256_hex(image_bytes),
                   labels_path.string() + " " + detail::sha256_hex(label_bytes)};
  return ds;
}

/// Parses concatenated CIFAR-10 binary batches into 32x32x3 images.
template <typename T>
LabeledDataset<T> load_cifar10_bin(const std::vector<std::filesystem::path>& paths, const NormalizeOptions& options = {}) {
  if (paths.empty()) throw DataError("load_cifar10_bin: no files given");
  constexpr std::size_t side = 32, plane = side * side;
  std::vector<std::uint8_t> pixels;
  LabeledDataset<T> ds;
  for (const auto& path : paths) {
    const auto bytes = detail::read_file(path);
    if (bytes.empty() || bytes.size() % kCifarRecordBytes != 0) {
      throw DataError(path.string() + ": size " + std::to_string(bytes.size()) + " is not a multiple of 3073");
    }
    const std::size_t records = bytes.size() / kCifarRecordBytes;
    for (std::size_t r = 0; r < records; ++r) {
      const std::uint8_t* rec = bytes.data() + r * kCifarRecordBytes;
      if (rec[0] >= kNumClasses) throw DataError(path.string() + ": label " + std::to_string(rec[0]) + " >= 10");
      ds.labels.push_back(rec[0]);
      for (std::size_t p = 0; p < plane; ++p) {
        for (std::size_t c = 0; c < 3; ++c) pixels.push_back(rec[1 + c * plane + p]);
      }
    }
    ds.provenance.push_back(path.string() + " " + detail::sha256_hex(bytes));
  }
  ds.images = Tensor<T>({ds.labels.size(), side, side, 3});
  detail::normalize(ds, pixels, options);
  return ds;
}

struct SplitSpec {
  std::size_t n_train = 0;
  std::uint64_t seed = 0;
  /// Put the images of every non-training sample into the pool.
  bool reg_uses_remainder = true;
};

template <typename T>
struct Split {
  LabeledDataset<T> train;
  UnlabeledPool<T> reg_pool;
};

/// Seeded, label-balanced split: each class contributes n_train/10 samples
/// (the remainder spread one each over randomly chosen classes); the rest
/// of the data, without labels, forms the regularization pool.
template <typename T>
Split<T> split(const LabeledDataset<T>& dataset, const SplitSpec& spec) {
  const std::size_t total = dataset.size();
  if (spec.n_train == 0) throw ValueError("split: n_train must be positive");
  if (spec.n_train > total) {
    throw ValueError("split: n_train " + std::to_string(spec.n_train) + " exceeds dataset size " + std::to_string(total));
  }
  Rng rng(spec.seed);
  std::vector<std::size_t> order(total);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::shuffle(order.begin(), order.end(), rng.engine());

  std::array<std::vector<std::size_t>, kNumClasses> by_class;
  for (std::size_t idx : order) by_class[static_cast<std::size_t>(dataset.labels[idx])].push_back(idx);

  std::array<std::size_t, kNumClasses> class_order{};
  std::iota(class_order.begin(), class_order.end(), std::size_t{0});
  std::shuffle(class_order.begin(), class_order.end(), rng.engine());
  std::array<std::size_t, kNumClasses> quota{};
  for (std::size_t r = 0; r < kNumClasses; ++r) {
    quota[class_order[r]] = spec.n_train / kNumClasses + (r < spec.n_train % kNumClasses ? 1 : 0);
  }
  // Classes too small for their quota hand the shortfall to the others.
  std::size_t shortfall = 0;
  for (std::size_t c = 0; c < kNumClasses; ++c) {
    if (quota[c] > by_class[c].size()) {
      shortfall += quota[c] - by_class[c].size();
      quota[c] = by_class[c].size();
    }
  }
  for (std::size_t r = 0; shortfall > 0; r = (r + 1) % kNumClasses) {
    const std::size_t c = class_order[r];
    if (quota[c] < by_class[c].size()) {
      ++quota[c];
      --shortfall;
    }
  }

  std::vector<bool> in_train(total, false);
  for (std::size_t c = 0; c < kNumClasses; ++c) {
    for (std::size_t i = 0; i < quota[c]; ++i) in_train[by_class[c][i]] = true;
  }
  std::vector<std::size_t> train_rows, pool_rows;
  for (std::size_t idx : order) (in_train[idx] ? train_rows : pool_rows).push_back(idx);

  Split<T> out;
  out.train.images = dataset.images.gather(train_rows);
  for (std::size_t idx : train_rows) out.train.labels.push_back(dataset.labels[idx]);
  out.train.provenance = dataset.provenance;
  out.train.mean_image = dataset.mean_image;
  if (spec.reg_uses_remainder && !pool_rows.empty()) out.reg_pool.images = dataset.images.gather(pool_rows);
  return out;
}

}  // namespace fnreg
