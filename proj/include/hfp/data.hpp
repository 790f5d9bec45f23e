// Copyright (c) 2026 The hfp authors
// SPDX-License-Identifier: Apache-2.0
//
// Datasets: a synthetic class-conditional blob generator and the standard
// CIFAR-10 binary-batch loader. Images are normalized to zero mean and unit
// variance per channel over the training split.

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "hfp/tensor.hpp"

namespace hfp {

struct Dataset {
  Tensor images;  // [N,C,H,W]
  std::vector<int> labels;
  std::string split;
  int num_classes = 0;

  int size() const { return images.shape.empty() ? 0 : images.shape[0]; }
};

struct DataBundle {
  Dataset train;
  Dataset test;
};

struct SynthSpec {
  int channels = 3;
  int height = 16;
  int width = 16;
  float amplitude = 3.0f;
  float noise = 1.0f;
};

/// One split of class-conditional Gaussian blobs: class k gets a fixed blob
/// center and channel sign pattern, plus unit noise. Deterministic in seed;
/// normalized per channel over itself.
Dataset synth_dataset(int num_classes, int n, uint64_t seed, const SynthSpec& spec = {});

/// Train and test splits drawn from one deterministic stream (disjoint
/// samples); both normalized with the train-split statistics.
DataBundle load_synth(int num_classes, int n_train, int n_test, uint64_t seed,
                      const SynthSpec& spec = {});

/// Reads the standard binary batches (3073-byte records: one label byte plus
/// three 1024-byte channel planes of a 32x32 image) from `dir`, scales to
/// [0,1] and normalizes per channel over the training split. `limit_train` /
/// `limit_test` truncate the splits when positive.
DataBundle load_cifar10_binary(const std::string& dir, int limit_train = 0, int limit_test = 0);

/// Extracts one batch as a [B,C,H,W] tensor plus labels.
void gather_batch(const Dataset& data, const std::vector<int>& indices, size_t first, size_t count,
                  Tensor& images_out, std::vector<int>& labels_out);

}  // namespace hfp
