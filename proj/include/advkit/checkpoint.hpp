#pragma once

#include <map>
#include <string>
#include <utility>
#include <vector>

#include "advkit/model.hpp"
#include "advkit/tensor.hpp"

namespace advkit {

// Tensor container file, also used for dumping adversarial batches.
//
//   "AFCK"  magic
//   u32 LE  format version (1)
//   u32 LE  tensor count
//   per tensor:
//     u32 LE name length, UTF-8 name
//     u32 LE rank, u64 LE extent per dim
//     f32 LE values, row-major
//   remainder: UTF-8 "key=value" lines (epoch, adversarial validation loss, ...)
struct TensorFile {
  std::vector<std::pair<std::string, Tensor<float>>> tensors;
  std::map<std::string, std::string> meta;

  const Tensor<float>* find(const std::string& name) const;
};

void save_tensor_file(const std::string& path, const TensorFile& file);
TensorFile load_tensor_file(const std::string& path);

void save_checkpoint(const std::string& path, const Model<float>& model,
                     const std::map<std::string, std::string>& meta);
// Loads parameters into an already-built model; mismatched or missing tensors
// raise an error naming the tensor. Returns the metadata block.
std::map<std::string, std::string> load_checkpoint(const std::string& path,
                                                   Model<float>& model);

}  // namespace advkit
