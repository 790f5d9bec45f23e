// Copyright (c) 2026 The hfp authors
// SPDX-License-Identifier: Apache-2.0
//
// Checkpoints: a directory holding the graph text format, a flat
// little-endian float32 weight blob in layer order, and a key/value manifest
// listing per-tensor offsets.

#pragma once

#include <string>

#include "hfp/model.hpp"

namespace hfp {

/// Writes graph.txt, weights.bin and model.manifest into `dir` (created if
/// missing). Deterministic: identical models produce identical bytes.
void save_checkpoint(const Model& model, const std::string& dir);

Model load_checkpoint(const std::string& dir);

}  // namespace hfp
