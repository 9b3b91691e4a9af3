// Copyright 2026 The InstAP Desk Authors
// SPDX-License-Identifier: Apache-2.0

#include "instap/schema.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>
#include <stdexcept>

namespace instap {

std::string_view to_string(SampleKind kind) {
  return kind == SampleKind::kImage ? "image" : "video";
}

SampleKind sample_kind_from_string(std::string_view s) {
  if (s == "image") return SampleKind::kImage;
  if (s == "video") return SampleKind::kVideo;
  throw std::invalid_argument("unknown sample kind: " + std::string(s));
}

namespace {

void check_box(const Box& b, const std::string& field, const Sample& s,
               std::vector<Violation>& out) {
  const int frame_h = s.frames.height();
  const int frame_w = s.frames.width();
  if (b.w <= 0) out.push_back({field + ".w", "Box.w > 0"});
  if (b.h <= 0) out.push_back({field + ".h", "Box.h > 0"});
  if (b.x < 0) out.push_back({field + ".x", "Box.x >= 0"});
  if (b.y < 0) out.push_back({field + ".y", "Box.y >= 0"});
  if (b.x + b.w > frame_w) out.push_back({field + ".x", "Box.x + Box.w <= frame width"});
  if (b.y + b.h > frame_h) out.push_back({field + ".y", "Box.y + Box.h <= frame height"});
  if (b.t < 0) out.push_back({field + ".t", "Box.t >= 0"});
  if (b.t >= s.frames.frames()) out.push_back({field + ".t", "Box.t < T"});
}

}  // namespace

std::vector<Violation> validate_sample(const Sample& s) {
  std::vector<Violation> out;
  if (s.sample_id.empty()) out.push_back({"sample_id", "Sample.sample_id non-empty"});
  if (s.frames.frames() < 1) out.push_back({"frames", "Sample.frames T >= 1"});
  if (s.kind == SampleKind::kImage && s.frames.frames() != 1) {
    out.push_back({"kind", "Sample.kind = image => T = 1"});
  }
  for (float v : s.frames.data()) {
    if (!(v >= 0.0f && v <= 1.0f)) {
      out.push_back({"frames", "Sample.frames values in [0, 1]"});
      break;
    }
  }
  if (s.global_caption.empty()) {
    out.push_back({"global_caption", "Sample.global_caption has at least one sentence"});
  }
  for (std::size_t i = 0; i < s.global_caption.size(); ++i) {
    if (s.global_caption[i].empty()) {
      out.push_back({"global_caption[" + std::to_string(i) + "]", "sentence non-empty"});
    }
  }
  std::set<int> ids;
  for (std::size_t k = 0; k < s.instances.size(); ++k) {
    const InstanceAnnotation& inst = s.instances[k];
    const std::string base = "instances[" + std::to_string(k) + "]";
    if (!ids.insert(inst.instance_id).second) {
      out.push_back({base + ".instance_id", "InstanceAnnotation.instance_id unique"});
    }
    if (inst.trajectory.empty()) {
      out.push_back({base + ".trajectory", "InstanceAnnotation.trajectory non-empty"});
    }
    for (std::size_t j = 0; j < inst.trajectory.size(); ++j) {
      const std::string field = base + ".trajectory[" + std::to_string(j) + "]";
      check_box(inst.trajectory[j], field, s, out);
      if (j > 0 && inst.trajectory[j].t <= inst.trajectory[j - 1].t) {
        out.push_back({field + ".t", "trajectory frame indices strictly increasing"});
      }
    }
    if (inst.caption.empty()) {
      out.push_back({base + ".caption", "InstanceAnnotation.caption has at least one sentence"});
    }
    for (std::size_t j = 0; j < inst.caption.size(); ++j) {
      if (inst.caption[j].empty()) {
        out.push_back({base + ".caption[" + std::to_string(j) + "]", "sentence non-empty"});
      }
    }
  }
  return out;
}

// ---- vocabulary --------------------------------------------------------------

namespace {
const std::vector<std::string> kSpecials = {"[CLS]", "[MASK]", "[PAD]", "[SEP]", "[UNK]"};
}

Vocab Vocab::from_words(std::span<const std::string> words) {
  std::vector<std::string> all = kSpecials;
  all.insert(all.end(), words.begin(), words.end());
  return from_file_lines(all);
}

Vocab Vocab::from_file_lines(std::span<const std::string> lines) {
  if (lines.size() < kSpecials.size() ||
      !std::equal(kSpecials.begin(), kSpecials.end(), lines.begin())) {
    throw std::invalid_argument("vocab must start with [CLS] [MASK] [PAD] [SEP] [UNK]");
  }
  Vocab v;
  v.words_.assign(lines.begin(), lines.end());
  for (std::size_t i = 0; i < v.words_.size(); ++i) {
    if (v.words_[i].empty()) throw std::invalid_argument("vocab: empty word at line " + std::to_string(i + 1));
    if (!v.index_.emplace(v.words_[i], static_cast<int>(i)).second) {
      throw std::invalid_argument("vocab: duplicate word '" + v.words_[i] + "'");
    }
  }
  return v;
}

Vocab Vocab::read(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open vocab file: " + path.string());
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    lines.push_back(line);
  }
  return from_file_lines(lines);
}

void Vocab::write(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write vocab file: " + path.string());
  for (const auto& w : words_) out << w << '\n';
}

int Vocab::id(std::string_view word) const {
  auto it = index_.find(std::string(word));
  return it == index_.end() ? kUnk : it->second;
}

const std::string& Vocab::word(int id) const {
  if (id < 0 || id >= size()) throw std::out_of_range("token id out of vocab range");
  return words_[static_cast<std::size_t>(id)];
}

std::vector<int> tokenize(std::string_view sentence, const Vocab& vocab, int max_len) {
  if (max_len < 2) throw std::invalid_argument("tokenize: max_len must be >= 2");
  std::vector<int> ids;
  ids.reserve(static_cast<std::size_t>(max_len));
  ids.push_back(Vocab::kCls);
  std::istringstream words{std::string(sentence)};
  std::string w;
  while (static_cast<int>(ids.size()) < max_len && (words >> w)) {
    std::transform(w.begin(), w.end(), w.begin(),
                   [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    while (!w.empty() && (w.back() == '.' || w.back() == ',')) w.pop_back();
    if (w.empty()) continue;
    ids.push_back(vocab.id(w));
  }
  ids.resize(static_cast<std::size_t>(max_len), Vocab::kPad);
  return ids;
}

std::string detokenize(std::span<const int> ids, const Vocab& vocab) {
  std::string out;
  for (int id : ids) {
    if (Vocab::is_special(id)) continue;
    if (!out.empty()) out += ' ';
    out += vocab.word(id);
  }
  return out;
}

const std::string& sample_caption_sentence(std::span<const std::string> caption, int epoch, Rng rng,
                                           bool cycling) {
  if (caption.empty()) throw std::invalid_argument("sample_caption_sentence: empty caption");
  const std::size_t n = caption.size();
  if (!cycling) {
    Rng draw(mix_seed(rng.next_u64(), static_cast<std::uint64_t>(epoch)));
    return caption[draw.below(n)];
  }
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  rng.shuffle(std::span<std::size_t>(perm));
  const auto e = static_cast<std::size_t>(epoch < 0 ? -epoch : epoch);
  return caption[perm[e % n]];
}

}  // namespace instap
