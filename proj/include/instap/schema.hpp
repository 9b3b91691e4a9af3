// Copyright 2026 The InstAP Desk Authors
// SPDX-License-Identifier: Apache-2.0
//
// Dual-granularity sample schema: one clip, one global caption, and a list of
// grounded instances (box trajectory + caption). Also the closed-vocabulary
// tokenizer and per-epoch caption sentence sampling.

#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "instap/rng.hpp"

namespace instap {

/// Axis-aligned pixel box on frame t.
struct Box {
  int t = 0;
  int x = 0;
  int y = 0;
  int w = 0;
  int h = 0;

  friend bool operator==(const Box&, const Box&) = default;
};

struct InstanceAnnotation {
  int instance_id = 0;
  std::vector<Box> trajectory;
  std::vector<std::string> caption;

  friend bool operator==(const InstanceAnnotation&, const InstanceAnnotation&) = default;
};

/// T frames of H×W RGB, channel-interleaved, values in [0, 1].
class FrameStack {
 public:
  FrameStack() = default;
  FrameStack(int frames, int height, int width)
      : frames_(frames),
        height_(height),
        width_(width),
        data_(static_cast<std::size_t>(frames) * height * width * 3, 0.0f) {}

  int frames() const { return frames_; }
  int height() const { return height_; }
  int width() const { return width_; }

  float& at(int t, int y, int x, int c) { return data_[index(t, y, x, c)]; }
  float at(int t, int y, int x, int c) const { return data_[index(t, y, x, c)]; }

  std::span<const float> data() const { return data_; }
  std::span<float> data() { return data_; }

  friend bool operator==(const FrameStack&, const FrameStack&) = default;

 private:
  std::size_t index(int t, int y, int x, int c) const {
    return ((static_cast<std::size_t>(t) * height_ + y) * width_ + x) * 3 + c;
  }

  int frames_ = 0;
  int height_ = 0;
  int width_ = 0;
  std::vector<float> data_;
};

enum class SampleKind { kImage, kVideo };

std::string_view to_string(SampleKind kind);
SampleKind sample_kind_from_string(std::string_view s);

struct Sample {
  std::string sample_id;
  SampleKind kind = SampleKind::kImage;
  FrameStack frames;
  std::vector<std::string> global_caption;
  std::vector<InstanceAnnotation> instances;
  std::uint64_t source_id = 0;

  friend bool operator==(const Sample&, const Sample&) = default;
};

/// One broken invariant. `rule` is the stable, human-readable rule name
/// (e.g. "Box.w > 0"); `field` locates it inside the sample.
struct Violation {
  std::string field;
  std::string rule;
};

/// Empty iff every Sample / InstanceAnnotation / Box invariant holds.
std::vector<Violation> validate_sample(const Sample& sample);

// ---- vocabulary and tokenisation ------------------------------------------

class Vocab {
 public:
  static constexpr int kCls = 0;
  static constexpr int kMask = 1;
  static constexpr int kPad = 2;
  static constexpr int kSep = 3;
  static constexpr int kUnk = 4;
  static constexpr int kNumSpecial = 5;

  /// `words` are the non-special words; the five special tokens are
  /// prepended so ids 0..4 are [CLS] [MASK] [PAD] [SEP] [UNK].
  static Vocab from_words(std::span<const std::string> words);
  /// Full word list including specials, as stored on disk.
  static Vocab from_file_lines(std::span<const std::string> lines);
  static Vocab read(const std::filesystem::path& path);
  void write(const std::filesystem::path& path) const;

  int size() const { return static_cast<int>(words_.size()); }
  /// Id of `word`, or kUnk.
  int id(std::string_view word) const;
  const std::string& word(int id) const;
  static bool is_special(int id) { return id < kNumSpecial; }
  const std::vector<std::string>& words() const { return words_; }

  friend bool operator==(const Vocab& a, const Vocab& b) { return a.words_ == b.words_; }

 private:
  std::vector<std::string> words_;
  std::unordered_map<std::string, int> index_;
};

/// [CLS] + word ids, padded with [PAD] / truncated to exactly max_len.
std::vector<int> tokenize(std::string_view sentence, const Vocab& vocab, int max_len);
/// Words of all non-special ids, space separated.
std::string detokenize(std::span<const int> ids, const Vocab& vocab);

/// Picks the sentence used for `epoch`.
///
/// With cycling, `rng` must be seeded per caption (not per epoch): it draws a
/// fixed permutation and epoch e returns perm[e mod n], so every window of n
/// consecutive epochs visits every sentence exactly once. Without cycling the
/// draw is independent per call.
const std::string& sample_caption_sentence(std::span<const std::string> caption, int epoch, Rng rng,
                                           bool cycling = true);

}  // namespace instap
