#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "advkit/tensor.hpp"

namespace advkit {

struct Dataset {
  Tensor<float> images;     // (N,C,H,W), values in [0,1]
  std::vector<int> labels;  // in [0, classes)
  size_t classes = 10;
  std::string name;
  std::string split;

  size_t size() const { return labels.size(); }
  std::vector<size_t> sample_shape() const {
    const auto& s = images.shape();
    return {s[1], s[2], s[3]};
  }
  Dataset subset(const std::vector<size_t>& idx) const;
  Dataset take(size_t n) const;  // first n samples
};

// IDX (big-endian header, uint8 payload). Pixels are scaled by 1/255.
Dataset load_idx(const std::string& images_path, const std::string& labels_path);
void save_idx(const Dataset& data, const std::string& images_path,
              const std::string& labels_path);

// CIFAR-10 binary batches: 3073-byte records, label byte then R/G/B planes.
Dataset load_cifar10(const std::vector<std::string>& batch_paths);

// Looks for a known dataset under `root` (train/test IDX pairs or CIFAR
// batches); empty name means synthetic digits.
struct DataPair {
  Dataset train;
  Dataset test;
};
DataPair load_named_dataset(const std::string& name, const std::string& root);

// Deterministic stand-in for the greyscale digit sets: procedurally rendered
// 28x28 digits with random pose, stroke width and pixel noise. Used when the
// real files are not on disk.
Dataset synth_digits(size_t n, uint64_t seed, const std::string& split);

// ---- cross-validation -------------------------------------------------------

// Five repeats of two-fold cross-validation. Per repeat the predefined
// training set is permuted and split into two folds, the predefined test set
// into two halves, and half k is assigned to fold k. 5 x 2 = 10 runs.
struct CvRun {
  size_t repeat = 0;
  size_t fold = 0;
  std::vector<size_t> train_idx;  // into the training set
  std::vector<size_t> eval_idx;   // into the test set (validation + testing)
};

struct CvPlan {
  size_t repeats = 5;
  size_t folds = 2;
  uint64_t seed = 0;
  std::vector<CvRun> runs;
};

CvPlan make_cv_plan(size_t n_train, size_t n_test, size_t repeats, uint64_t seed);

}  // namespace advkit
