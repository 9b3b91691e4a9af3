// Copyright 2026 The InstAP Desk Authors
// SPDX-License-Identifier: Apache-2.0
//
// On-disk dataset layout:
//
//   <dir>/manifest.jsonl     one JSON record per sample
//   <dir>/frames/*.ppm       binary P6, 8-bit RGB, one file per frame
//   <dir>/vocab.txt          optional; one word per line, line number = id
//
// Record: {"sample_id", "kind", "source_id", "frames": [relative paths],
//          "global_caption": [...],
//          "instances": [{"instance_id", "caption": [...],
//                         "trajectory": [{"t","x","y","w","h"}]}]}

#pragma once

#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "instap/schema.hpp"

namespace instap {

class DatasetError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A manifest or frame file that does not exist.
class MissingFileError : public DatasetError {
 public:
  using DatasetError::DatasetError;
};

struct PpmImage {
  int width = 0;
  int height = 0;
  std::vector<unsigned char> bytes;  // RGB, row-major
};

PpmImage read_ppm(const std::filesystem::path& path);
void write_ppm(const std::filesystem::path& path, const FrameStack& frames, int t);
/// Reads a P6 file into frame t of `frames` (which must already be sized).
void read_ppm(const std::filesystem::path& path, FrameStack& frames, int t);

std::string sample_to_json_line(const Sample& sample);

/// Writes manifest.jsonl and the frame files. Frame values are quantised to
/// 8 bits, which is lossless for rendered samples.
void write_dataset(const std::vector<Sample>& samples, const std::filesystem::path& dir);

/// Throws DatasetError naming the 1-based line for malformed records and the
/// path for missing frame files.
std::vector<Sample> read_dataset(const std::filesystem::path& dir);

}  // namespace instap
