// Copyright (c) 2026 The hfp authors
// SPDX-License-Identifier: Apache-2.0

#include "hfp/data.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include "hfp/error.hpp"

namespace hfp {

namespace {

/// Per-channel mean/std of `ref`, applied to every dataset in `targets`.
void normalize_per_channel(const Tensor& ref, std::vector<Tensor*> targets) {
  const int c = ref.shape[1];
  const int64_t n = ref.shape[0];
  const int64_t spatial = static_cast<int64_t>(ref.shape[2]) * ref.shape[3];
  for (int ch = 0; ch < c; ++ch) {
    double sum = 0.0, sq = 0.0;
    for (int64_t i = 0; i < n; ++i) {
      const float* p = ref.data.data() + ((i * c + ch) * spatial);
      for (int64_t s = 0; s < spatial; ++s) {
        sum += p[s];
        sq += static_cast<double>(p[s]) * p[s];
      }
    }
    const double count = static_cast<double>(n * spatial);
    const double mean = sum / count;
    double var = sq / count - mean * mean;
    if (var < 1e-12) var = 1.0;
    const float m = static_cast<float>(mean);
    const float inv = static_cast<float>(1.0 / std::sqrt(var));
    for (Tensor* t : targets) {
      const int64_t tn = t->shape[0];
      for (int64_t i = 0; i < tn; ++i) {
        float* p = t->data.data() + ((i * c + ch) * spatial);
        for (int64_t s = 0; s < spatial; ++s) p[s] = (p[s] - m) * inv;
      }
    }
  }
}

void fill_synth(Tensor& images, std::vector<int>& labels, int num_classes, int n, std::mt19937& rng,
                const SynthSpec& spec) {
  const int c = spec.channels, h = spec.height, w = spec.width;
  std::normal_distribution<float> noise(0.0f, spec.noise);
  const float sigma = static_cast<float>(h) / 8.0f;
  for (int i = 0; i < n; ++i) {
    const int k = i % num_classes;
    labels[static_cast<size_t>(i)] = k;
    const float cx = static_cast<float>(w) * (2.0f * static_cast<float>(k % 4) + 1.0f) / 8.0f;
    const float cy = static_cast<float>(h) * (2.0f * static_cast<float>(k / 4) + 1.0f) / 8.0f;
    for (int ch = 0; ch < c; ++ch) {
      const float sign = ((k >> ch) & 1) ? 1.0f : -1.0f;
      float* p = images.data.data() + ((static_cast<int64_t>(i) * c + ch) * h) * w;
      for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
          const float dx = static_cast<float>(x) - cx;
          const float dy = static_cast<float>(y) - cy;
          const float blob = spec.amplitude * sign * std::exp(-(dx * dx + dy * dy) / (2 * sigma * sigma));
          p[y * w + x] = blob + noise(rng);
        }
      }
    }
  }
}

}  // namespace

Dataset synth_dataset(int num_classes, int n, uint64_t seed, const SynthSpec& spec) {
  require(num_classes >= 2, "synth_dataset: need at least 2 classes");
  require(n >= num_classes, "synth_dataset: need at least one sample per class");
  Dataset d;
  d.num_classes = num_classes;
  d.split = "train";
  d.images = Tensor({n, spec.channels, spec.height, spec.width});
  d.labels.resize(static_cast<size_t>(n));
  std::mt19937 rng(static_cast<uint32_t>(seed ^ (seed >> 32)));
  fill_synth(d.images, d.labels, num_classes, n, rng, spec);
  normalize_per_channel(d.images, {&d.images});
  return d;
}

DataBundle load_synth(int num_classes, int n_train, int n_test, uint64_t seed,
                      const SynthSpec& spec) {
  require(num_classes >= 2, "load_synth: need at least 2 classes");
  require(n_train >= num_classes && n_test >= 1, "load_synth: splits too small");
  DataBundle b;
  b.train.num_classes = b.test.num_classes = num_classes;
  b.train.split = "train";
  b.test.split = "test";
  b.train.images = Tensor({n_train, spec.channels, spec.height, spec.width});
  b.test.images = Tensor({n_test, spec.channels, spec.height, spec.width});
  b.train.labels.resize(static_cast<size_t>(n_train));
  b.test.labels.resize(static_cast<size_t>(n_test));
  std::mt19937 rng(static_cast<uint32_t>(seed ^ (seed >> 32)));
  fill_synth(b.train.images, b.train.labels, num_classes, n_train, rng, spec);
  fill_synth(b.test.images, b.test.labels, num_classes, n_test, rng, spec);
  normalize_per_channel(b.train.images, {&b.train.images, &b.test.images});
  return b;
}

namespace {

constexpr int kCifarRecord = 3073;  // 1 label byte + 3*1024 pixels
constexpr int kCifarDim = 32;

void read_cifar_file(const std::string& path, Tensor& images, std::vector<int>& labels,
                     int64_t& cursor) {
  std::ifstream in(path, std::ios::binary);
  require(in.good(), "cifar10: cannot open ", path);
  in.seekg(0, std::ios::end);
  const int64_t size = static_cast<int64_t>(in.tellg());
  in.seekg(0);
  require(size % kCifarRecord == 0, "cifar10: ", path, " is truncated at byte offset ",
          (size / kCifarRecord) * kCifarRecord, " (size ", size, " is not a multiple of ",
          kCifarRecord, ")");
  const int64_t records = size / kCifarRecord;
  std::vector<unsigned char> buf(static_cast<size_t>(kCifarRecord));
  for (int64_t r = 0; r < records; ++r) {
    in.read(reinterpret_cast<char*>(buf.data()), kCifarRecord);
    require(in.good(), "cifar10: read failed in ", path, " at byte offset ", r * kCifarRecord);
    const int label = buf[0];
    require(label <= 9, "cifar10: label ", label, " out of range at byte offset ",
            r * kCifarRecord, " in ", path);
    labels.push_back(label);
    float* dst = images.data.data() + cursor * 3 * kCifarDim * kCifarDim;
    for (int i = 0; i < 3 * kCifarDim * kCifarDim; ++i) {
      dst[i] = static_cast<float>(buf[static_cast<size_t>(1 + i)]) / 255.0f;
    }
    ++cursor;
  }
}

int64_t count_records(const std::vector<std::string>& files) {
  int64_t n = 0;
  for (const auto& f : files) {
    std::error_code ec;
    const auto size = std::filesystem::file_size(f, ec);
    require(!ec, "cifar10: cannot stat ", f);
    n += static_cast<int64_t>(size) / kCifarRecord;
    require(static_cast<int64_t>(size) % kCifarRecord == 0, "cifar10: ", f,
            " is truncated at byte offset ",
            (static_cast<int64_t>(size) / kCifarRecord) * kCifarRecord);
  }
  return n;
}

Dataset load_cifar_split(const std::vector<std::string>& files, const std::string& split,
                         int limit) {
  const int64_t total = count_records(files);
  require(total > 0, "cifar10: no records found for ", split, " split");
  Dataset d;
  d.split = split;
  d.num_classes = 10;
  d.images = Tensor({static_cast<int>(total), 3, kCifarDim, kCifarDim});
  int64_t cursor = 0;
  for (const auto& f : files) read_cifar_file(f, d.images, d.labels, cursor);
  if (limit > 0 && limit < d.size()) {
    Tensor trimmed({limit, 3, kCifarDim, kCifarDim});
    std::copy(d.images.data.begin(),
              d.images.data.begin() + static_cast<int64_t>(limit) * 3 * kCifarDim * kCifarDim,
              trimmed.data.begin());
    d.images = std::move(trimmed);
    d.labels.resize(static_cast<size_t>(limit));
  }
  return d;
}

}  // namespace

DataBundle load_cifar10_binary(const std::string& dir, int limit_train, int limit_test) {
  std::vector<std::string> train_files;
  for (int i = 1; i <= 5; ++i) {
    const std::string path = dir + "/data_batch_" + std::to_string(i) + ".bin";
    if (std::filesystem::exists(path)) train_files.push_back(path);
  }
  require(!train_files.empty(), "cifar10: no data_batch_*.bin files in ", dir);
  const std::string test_path = dir + "/test_batch.bin";
  require(std::filesystem::exists(test_path), "cifar10: missing ", test_path);

  DataBundle b;
  b.train = load_cifar_split(train_files, "train", limit_train);
  b.test = load_cifar_split({test_path}, "test", limit_test);
  normalize_per_channel(b.train.images, {&b.train.images, &b.test.images});
  return b;
}

void gather_batch(const Dataset& data, const std::vector<int>& indices, size_t first, size_t count,
                  Tensor& images_out, std::vector<int>& labels_out) {
  const int c = data.images.shape[1], h = data.images.shape[2], w = data.images.shape[3];
  const int64_t sample = static_cast<int64_t>(c) * h * w;
  images_out = Tensor({static_cast<int>(count), c, h, w});
  labels_out.resize(count);
  for (size_t i = 0; i < count; ++i) {
    const int src = indices[first + i];
    std::copy(data.images.data.begin() + src * sample,
              data.images.data.begin() + (src + 1) * sample,
              images_out.data.begin() + static_cast<int64_t>(i) * sample);
    labels_out[i] = data.labels[static_cast<size_t>(src)];
  }
}

}  // namespace hfp
