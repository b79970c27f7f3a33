#include "advkit/data_io.hpp"

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <stdexcept>

#include "advkit/rng.hpp"

namespace advkit {

namespace {

uint32_t read_be32(std::istream& is, const std::string& path) {
  unsigned char b[4];
  if (!is.read(reinterpret_cast<char*>(b), 4))
    throw std::runtime_error(path + ": truncated header");
  return static_cast<uint32_t>(b[0]) << 24 | static_cast<uint32_t>(b[1]) << 16 |
         static_cast<uint32_t>(b[2]) << 8 | static_cast<uint32_t>(b[3]);
}

void write_be32(std::ostream& os, uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v >> 24),
                        static_cast<unsigned char>(v >> 16),
                        static_cast<unsigned char>(v >> 8),
                        static_cast<unsigned char>(v)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

std::vector<unsigned char> read_payload(std::istream& is, size_t n,
                                        const std::string& path) {
  std::vector<unsigned char> buf(n);
  if (!is.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(n)))
    throw std::runtime_error(path + ": truncated payload, expected " +
                             std::to_string(n) + " bytes");
  return buf;
}

}  // namespace

Dataset Dataset::subset(const std::vector<size_t>& idx) const {
  const size_t per = size() ? images.size() / size() : 0;
  std::vector<size_t> shape = images.shape();
  shape[0] = idx.size();
  Dataset out;
  out.images = Tensor<float>(shape);
  out.labels.reserve(idx.size());
  for (size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] >= size())
      throw std::out_of_range("dataset subset: index " + std::to_string(idx[i]));
    std::memcpy(out.images.data() + i * per, images.data() + idx[i] * per,
                per * sizeof(float));
    out.labels.push_back(labels[idx[i]]);
  }
  out.classes = classes;
  out.name = name;
  out.split = split;
  return out;
}

Dataset Dataset::take(size_t n) const {
  n = std::min(n, size());
  std::vector<size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  return subset(idx);
}

Dataset load_idx(const std::string& images_path, const std::string& labels_path) {
  std::ifstream imgs(images_path, std::ios::binary);
  if (!imgs) throw std::runtime_error("cannot open " + images_path);
  const uint32_t img_magic = read_be32(imgs, images_path);
  if (img_magic != 0x00000803)  // uint8, rank 3
    throw std::runtime_error(images_path + ": bad IDX magic for image file");
  const uint32_t n = read_be32(imgs, images_path);
  const uint32_t h = read_be32(imgs, images_path);
  const uint32_t w = read_be32(imgs, images_path);
  auto pixels = read_payload(imgs, static_cast<size_t>(n) * h * w, images_path);

  std::ifstream labs(labels_path, std::ios::binary);
  if (!labs) throw std::runtime_error("cannot open " + labels_path);
  const uint32_t lab_magic = read_be32(labs, labels_path);
  if (lab_magic != 0x00000801)  // uint8, rank 1
    throw std::runtime_error(labels_path + ": bad IDX magic for label file");
  const uint32_t nl = read_be32(labs, labels_path);
  if (nl != n)
    throw std::runtime_error("IDX count mismatch: " + std::to_string(n) +
                             " images vs " + std::to_string(nl) + " labels");
  auto raw_labels = read_payload(labs, nl, labels_path);

  Dataset out;
  out.images = Tensor<float>({n, 1, h, w});
  for (size_t i = 0; i < pixels.size(); ++i)
    out.images[i] = static_cast<float>(pixels[i]) / 255.0f;
  out.labels.assign(raw_labels.begin(), raw_labels.end());
  return out;
}

void save_idx(const Dataset& data, const std::string& images_path,
              const std::string& labels_path) {
  const auto& s = data.images.shape();
  if (s.size() != 4 || s[1] != 1)
    throw std::invalid_argument("save_idx: expects single-channel (N,1,H,W)");
  std::ofstream imgs(images_path, std::ios::binary | std::ios::trunc);
  if (!imgs) throw std::runtime_error("cannot write " + images_path);
  write_be32(imgs, 0x00000803);
  write_be32(imgs, static_cast<uint32_t>(s[0]));
  write_be32(imgs, static_cast<uint32_t>(s[2]));
  write_be32(imgs, static_cast<uint32_t>(s[3]));
  for (size_t i = 0; i < data.images.size(); ++i) {
    const long v = std::lround(static_cast<double>(data.images[i]) * 255.0);
    imgs.put(static_cast<char>(std::min(255L, std::max(0L, v))));
  }
  std::ofstream labs(labels_path, std::ios::binary | std::ios::trunc);
  if (!labs) throw std::runtime_error("cannot write " + labels_path);
  write_be32(labs, 0x00000801);
  write_be32(labs, static_cast<uint32_t>(data.labels.size()));
  for (int l : data.labels) labs.put(static_cast<char>(l));
  if (!imgs || !labs) throw std::runtime_error("save_idx: write failed");
}

Dataset load_cifar10(const std::vector<std::string>& batch_paths) {
  constexpr size_t kRecord = 3073;
  constexpr size_t kPlane = 1024;
  std::vector<unsigned char> all;
  for (const auto& path : batch_paths) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open " + path);
    std::vector<unsigned char> buf((std::istreambuf_iterator<char>(is)),
                                   std::istreambuf_iterator<char>());
    if (buf.empty() || buf.size() % kRecord != 0)
      throw std::runtime_error(path + ": wrong record count (size " +
                               std::to_string(buf.size()) +
                               " is not a multiple of 3073)");
    all.insert(all.end(), buf.begin(), buf.end());
  }
  const size_t n = all.size() / kRecord;
  Dataset out;
  out.images = Tensor<float>({n, 3, 32, 32});
  out.labels.resize(n);
  for (size_t i = 0; i < n; ++i) {
    const unsigned char* rec = all.data() + i * kRecord;
    if (rec[0] > 9)
      throw std::runtime_error("CIFAR-10 record " + std::to_string(i) +
                               ": label byte " + std::to_string(rec[0]));
    out.labels[i] = rec[0];
    float* img = out.images.data() + i * 3 * kPlane;
    for (size_t j = 0; j < 3 * kPlane; ++j)
      img[j] = static_cast<float>(rec[1 + j]) / 255.0f;
  }
  return out;
}

DataPair load_named_dataset(const std::string& name, const std::string& root) {
  namespace fs = std::filesystem;
  auto have = [&](const std::string& rel) { return fs::exists(fs::path(root) / rel); };
  auto at = [&](const std::string& rel) { return (fs::path(root) / rel).string(); };

  DataPair pair;
  if (name == "mnist" || name == "fashion-mnist") {
    const std::string dir = name;
    for (const char* stem : {"train-images-idx3-ubyte", "train-labels-idx1-ubyte",
                             "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"})
      if (!have(dir + "/" + stem))
        throw std::runtime_error("dataset '" + name + "': missing " +
                                 at(dir + "/" + stem) +
                                 " (see tools/fetch_data.sh)");
    pair.train = load_idx(at(dir + "/train-images-idx3-ubyte"),
                          at(dir + "/train-labels-idx1-ubyte"));
    pair.test = load_idx(at(dir + "/t10k-images-idx3-ubyte"),
                         at(dir + "/t10k-labels-idx1-ubyte"));
  } else if (name == "cifar10") {
    std::vector<std::string> train_paths;
    for (int i = 1; i <= 5; ++i) {
      const std::string rel =
          "cifar-10-batches-bin/data_batch_" + std::to_string(i) + ".bin";
      if (!have(rel))
        throw std::runtime_error("dataset 'cifar10': missing " + at(rel) +
                                 " (see tools/fetch_data.sh)");
      train_paths.push_back(at(rel));
    }
    pair.train = load_cifar10(train_paths);
    if (!have("cifar-10-batches-bin/test_batch.bin"))
      throw std::runtime_error("dataset 'cifar10': missing test_batch.bin");
    pair.test = load_cifar10({at("cifar-10-batches-bin/test_batch.bin")});
  } else if (name == "synth" || name.empty()) {
    pair.train = synth_digits(12000, 928377, "train");
    pair.test = synth_digits(4000, 552211, "test");
  } else {
    throw std::runtime_error("unknown dataset '" + name + "'");
  }
  pair.train.name = name.empty() ? "synth" : name;
  pair.test.name = pair.train.name;
  pair.train.split = "train";
  pair.test.split = "test";
  return pair;
}

CvPlan make_cv_plan(size_t n_train, size_t n_test, size_t repeats, uint64_t seed) {
  if (n_train < 2 || n_test < 2)
    throw std::invalid_argument("make_cv_plan: need at least 2 train and 2 test samples");
  CvPlan plan;
  plan.repeats = repeats;
  plan.folds = 2;
  plan.seed = seed;
  for (size_t r = 0; r < repeats; ++r) {
    std::vector<size_t> train_perm(n_train);
    std::iota(train_perm.begin(), train_perm.end(), 0);
    Rng train_rng(derive_seed(seed, "cv-train", r));
    train_rng.shuffle(train_perm);
    std::vector<size_t> test_perm(n_test);
    std::iota(test_perm.begin(), test_perm.end(), 0);
    Rng test_rng(derive_seed(seed, "cv-test", r));
    test_rng.shuffle(test_perm);
    const size_t train_half = n_train / 2, test_half = n_test / 2;
    for (size_t fold = 0; fold < 2; ++fold) {
      CvRun run;
      run.repeat = r;
      run.fold = fold;
      if (fold == 0) {
        run.train_idx.assign(train_perm.begin(), train_perm.begin() + train_half);
        run.eval_idx.assign(test_perm.begin(), test_perm.begin() + test_half);
      } else {
        run.train_idx.assign(train_perm.begin() + train_half, train_perm.end());
        run.eval_idx.assign(test_perm.begin() + test_half, test_perm.end());
      }
      plan.runs.push_back(std::move(run));
    }
  }
  return plan;
}

}  // namespace advkit
