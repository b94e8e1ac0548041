#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "hap/autodiff.hpp"
#include "hap/model.hpp"

namespace hap {

// Labeled examples: inputs (N, F) in the model's C x H x W layout, one-hot
// targets (N, K).
struct Dataset {
  InputShape shape;
  Index classes = 0;
  Tensor inputs;
  Tensor targets;
  std::vector<Index> labels;

  Index size() const { return static_cast<Index>(labels.size()); }
  Batch batch() const { return {inputs, targets}; }
  Dataset subset(std::span<const Index> rows) const;
};

Dataset make_dataset(InputShape shape, Index classes, Eigen::MatrixXd features, std::vector<Index> labels);

struct Split {
  Dataset train;
  Dataset validation;
};

// Seeded shuffle, then the last round(fraction * N) examples validate.
Split split(const Dataset& data, double validation_fraction, std::uint64_t seed);

Batch make_batch(const Dataset& data, std::span<const Index> rows);

// Big-endian IDX: images magic 0x00000803 (N, H, W) u8, labels 0x00000801 (N) u8.
Dataset load_idx(const std::string& images_path, const std::string& labels_path);
Dataset parse_idx(std::span<const std::uint8_t> images, std::span<const std::uint8_t> labels);

// Header row required; the column named `label` (else the last one) holds
// the class, every other column a numeric feature. Classes are the distinct
// label strings in sorted order.
Dataset load_csv(const std::string& path);
Dataset parse_csv(const std::string& text);

Dataset gaussian_blobs(Index n, Index classes, Index features, double spread, std::uint64_t seed);
Dataset two_spirals(Index n, double noise, std::uint64_t seed);

// 1 x 8 x 8 images of up to six stroke shapes at random positions with
// additive Gaussian noise.
inline constexpr Index kTinyShapeClasses = 6;
Dataset tiny_shapes(Index n, Index classes, double noise, std::uint64_t seed);
// The same images as sequences: 8 row tokens of 8 pixels, shape 8 x 8 x 1.
Dataset tiny_shape_rows(Index n, Index classes, double noise, std::uint64_t seed);

// "gaussian-blobs", "two-spirals", "tiny-shapes", "tiny-shape-rows", "csv:<path>" or
// "idx:<images>,<labels>". Generator parameters come from the arguments.
struct DataSource {
  std::string kind = "tiny-shapes";
  Index n = 1000;
  Index classes = 4;
  Index features = 2;
  double noise = 0.3;
  std::uint64_t seed = 1;
};

Dataset load_dataset(const DataSource& source);

// Fraction of rows whose argmax prediction equals the label.
double accuracy(const ModelInstance& model, const Dataset& data);

}  // namespace hap
