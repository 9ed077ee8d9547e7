#ifndef NHL_DATASET_HPP
#define NHL_DATASET_HPP

#include "nhl/tensor.hpp"

#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace nhl {

struct DatasetHandle {
  Tensor<float> images;      // N x C x H x W, values in [0, 1]
  std::vector<int> labels;   // N class ids in [0, num_classes)
  int num_classes = 0;
  std::string provenance;    // "synthetic" | "idx" | "cache"

  Index size() const { return images.empty() ? 0 : images.dim(0); }
  /// Throws FormatError if labels or pixel values are out of range.
  void validate() const;
};

/// Rendered shape-classification images. Image i has label i % num_classes and is
/// drawn from seed derive_seed(seed, i): random background and contrasting
/// foreground colour, class-specific geometry with random position, scale and a
/// small rotation, 4x4 supersampled.
DatasetHandle make_synthetic_dataset(int num_classes, Index n_per_class, Index size, std::uint64_t seed);

/// Shape family names for the synthetic classes, in label order.
const std::vector<std::string>& synthetic_class_names();

/// MNIST-style IDX pair (0x00000803 ubyte images, 0x00000801 ubyte labels).
DatasetHandle load_idx(const std::filesystem::path& images_path, const std::filesystem::path& labels_path);

/// Caches a dataset in the NHLCKPT1 container ("images" and "labels" tensors).
/// A non-null `run` is stored under the header key "run".
void save_dataset(const std::filesystem::path& path, const DatasetHandle& data,
                  const nlohmann::json& run = nullptr);
DatasetHandle load_dataset(const std::filesystem::path& path);

struct Batch {
  Tensor<float> images;
  std::vector<int> labels;     // empty when the stream carries no labels
  std::vector<Index> indices;  // source rows in the dataset
  Index size() const { return images.dim(0); }
};

/// Rows `indices` of a N x ... tensor.
Tensor<float> gather_rows(const Tensor<float>& images, const std::vector<Index>& indices);

struct StreamOptions {
  Index batch_size = 128;
  bool shuffle = false;
  std::uint64_t seed = 0;
  /// Keep a final short batch when it still has at least 2 samples.
  bool keep_short = true;
};

/// Ordered batches B1..Bn. Throws ParameterError if batch_size < 2.
std::vector<Batch> stream_batches(const DatasetHandle& data, const StreamOptions& options);

}  // namespace nhl

#endif  // NHL_DATASET_HPP
