#include "advkit/checkpoint.hpp"

#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace advkit {

namespace {

constexpr char kMagic[4] = {'A', 'F', 'C', 'K'};
constexpr uint32_t kVersion = 1;

void put_u32(std::ostream& os, uint32_t v) {
  unsigned char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  os.write(reinterpret_cast<const char*>(b), 4);
}

void put_u64(std::ostream& os, uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  os.write(reinterpret_cast<const char*>(b), 8);
}

void put_f32(std::ostream& os, float v) {
  uint32_t bits;
  std::memcpy(&bits, &v, 4);
  put_u32(os, bits);
}

uint32_t get_u32(std::istream& is, const std::string& path) {
  unsigned char b[4];
  if (!is.read(reinterpret_cast<char*>(b), 4))
    throw std::runtime_error(path + ": truncated file");
  return static_cast<uint32_t>(b[0]) | static_cast<uint32_t>(b[1]) << 8 |
         static_cast<uint32_t>(b[2]) << 16 | static_cast<uint32_t>(b[3]) << 24;
}

uint64_t get_u64(std::istream& is, const std::string& path) {
  uint64_t lo = get_u32(is, path), hi = get_u32(is, path);
  return lo | hi << 32;
}

}  // namespace

const Tensor<float>* TensorFile::find(const std::string& name) const {
  for (const auto& [n, t] : tensors)
    if (n == name) return &t;
  return nullptr;
}

void save_tensor_file(const std::string& path, const TensorFile& file) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("cannot write " + path);
  os.write(kMagic, 4);
  put_u32(os, kVersion);
  put_u32(os, static_cast<uint32_t>(file.tensors.size()));
  for (const auto& [name, t] : file.tensors) {
    put_u32(os, static_cast<uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    put_u32(os, static_cast<uint32_t>(t.rank()));
    for (size_t d : t.shape()) put_u64(os, d);
    for (size_t i = 0; i < t.size(); ++i) put_f32(os, t[i]);
  }
  for (const auto& [k, v] : file.meta) os << k << '=' << v << '\n';
  if (!os) throw std::runtime_error("write failed: " + path);
}

TensorFile load_tensor_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open " + path);
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, kMagic, 4) != 0)
    throw std::runtime_error(path + ": not a tensor file (bad magic)");
  const uint32_t version = get_u32(is, path);
  if (version != kVersion)
    throw std::runtime_error(path + ": unsupported version " + std::to_string(version));
  const uint32_t count = get_u32(is, path);
  TensorFile file;
  file.tensors.reserve(count);
  for (uint32_t i = 0; i < count; ++i) {
    const uint32_t name_len = get_u32(is, path);
    std::string name(name_len, '\0');
    if (!is.read(name.data(), name_len))
      throw std::runtime_error(path + ": truncated tensor name");
    const uint32_t rank = get_u32(is, path);
    std::vector<size_t> shape(rank);
    for (uint32_t d = 0; d < rank; ++d)
      shape[d] = static_cast<size_t>(get_u64(is, path));
    Tensor<float> t(shape);
    for (size_t j = 0; j < t.size(); ++j) {
      const uint32_t bits = get_u32(is, path);
      float v;
      std::memcpy(&v, &bits, 4);
      t[j] = v;
    }
    file.tensors.emplace_back(std::move(name), std::move(t));
  }
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    const size_t eq = line.find('=');
    if (eq == std::string::npos)
      throw std::runtime_error(path + ": malformed metadata line '" + line + "'");
    file.meta[line.substr(0, eq)] = line.substr(eq + 1);
  }
  return file;
}

void save_checkpoint(const std::string& path, const Model<float>& model,
                     const std::map<std::string, std::string>& meta) {
  TensorFile file;
  for (const auto& [name, t] : model.params()) file.tensors.emplace_back(name, *t);
  file.meta = meta;
  save_tensor_file(path, file);
}

std::map<std::string, std::string> load_checkpoint(const std::string& path,
                                                   Model<float>& model) {
  TensorFile file = load_tensor_file(path);
  for (auto& [name, t] : model.params()) {
    const Tensor<float>* src = file.find(name);
    if (!src) throw std::runtime_error(path + ": missing tensor '" + name + "'");
    if (src->shape() != t->shape())
      throw std::runtime_error(path + ": tensor '" + name + "' has shape " +
                               shape_str(src->shape()) + ", model expects " +
                               shape_str(t->shape()));
    *t = *src;
  }
  return file.meta;
}

}  // namespace advkit
