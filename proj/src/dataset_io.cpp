// Copyright 2026 The InstAP Desk Authors
// SPDX-License-Identifier: Apache-2.0

#include "instap/dataset_io.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <json.hpp>

namespace instap {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string frame_rel_path(const Sample& s, int t) {
  char buf[16];
  std::snprintf(buf, sizeof(buf), "_%03d.ppm", t);
  return "frames/" + s.sample_id + buf;
}

int read_header_int(std::istream& in) {
  int c = in.peek();
  while (c != EOF) {
    if (c == '#') {
      std::string skip;
      std::getline(in, skip);
    } else if (std::isspace(c)) {
      in.get();
    } else {
      break;
    }
    c = in.peek();
  }
  int v = -1;
  in >> v;
  return v;
}

}  // namespace

void write_ppm(const fs::path& path, const FrameStack& frames, int t) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DatasetError("cannot write frame file: " + path.string());
  out << "P6\n" << frames.width() << ' ' << frames.height() << "\n255\n";
  std::vector<unsigned char> bytes(static_cast<std::size_t>(frames.width()) * frames.height() * 3);
  std::size_t i = 0;
  for (int y = 0; y < frames.height(); ++y) {
    for (int x = 0; x < frames.width(); ++x) {
      for (int c = 0; c < 3; ++c) {
        const float v = std::clamp(frames.at(t, y, x, c), 0.0f, 1.0f);
        bytes[i++] = static_cast<unsigned char>(std::lround(v * 255.0f));
      }
    }
  }
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw DatasetError("failed writing frame file: " + path.string());
}

PpmImage read_ppm(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw MissingFileError("missing frame file: " + path.string());
  std::string magic;
  in >> magic;
  if (magic != "P6") throw DatasetError("not a P6 file: " + path.string());
  PpmImage img;
  img.width = read_header_int(in);
  img.height = read_header_int(in);
  const int maxval = read_header_int(in);
  in.get();
  if (img.width <= 0 || img.height <= 0 || maxval != 255) {
    throw DatasetError("unsupported PPM header in " + path.string());
  }
  img.bytes.resize(static_cast<std::size_t>(img.width) * img.height * 3);
  in.read(reinterpret_cast<char*>(img.bytes.data()), static_cast<std::streamsize>(img.bytes.size()));
  if (in.gcount() != static_cast<std::streamsize>(img.bytes.size())) {
    throw DatasetError("truncated frame file: " + path.string());
  }
  return img;
}

void read_ppm(const fs::path& path, FrameStack& frames, int t) {
  const PpmImage img = read_ppm(path);
  const int w = img.width;
  const int h = img.height;
  if (w != frames.width() || h != frames.height()) {
    throw DatasetError("frame geometry mismatch in " + path.string());
  }
  const auto& bytes = img.bytes;
  std::size_t i = 0;
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      for (int c = 0; c < 3; ++c) frames.at(t, y, x, c) = bytes[i++] / 255.0f;
    }
  }
}

namespace {

json sample_to_json(const Sample& s) {
  json rec;
  rec["sample_id"] = s.sample_id;
  rec["kind"] = std::string(to_string(s.kind));
  rec["source_id"] = s.source_id;
  json frames = json::array();
  for (int t = 0; t < s.frames.frames(); ++t) frames.push_back(frame_rel_path(s, t));
  rec["frames"] = frames;
  rec["global_caption"] = s.global_caption;
  json insts = json::array();
  for (const auto& inst : s.instances) {
    json traj = json::array();
    for (const Box& b : inst.trajectory) {
      traj.push_back({{"t", b.t}, {"x", b.x}, {"y", b.y}, {"w", b.w}, {"h", b.h}});
    }
    insts.push_back({{"instance_id", inst.instance_id}, {"caption", inst.caption}, {"trajectory", traj}});
  }
  rec["instances"] = insts;
  return rec;
}

}  // namespace

std::string sample_to_json_line(const Sample& s) { return sample_to_json(s).dump(); }

void write_dataset(const std::vector<Sample>& samples, const fs::path& dir) {
  fs::create_directories(dir / "frames");
  std::ofstream manifest(dir / "manifest.jsonl", std::ios::binary);
  if (!manifest) throw DatasetError("cannot write manifest in " + dir.string());
  for (const Sample& s : samples) {
    manifest << sample_to_json_line(s) << '\n';
    for (int t = 0; t < s.frames.frames(); ++t) write_ppm(dir / frame_rel_path(s, t), s.frames, t);
  }
}

std::vector<Sample> read_dataset(const fs::path& dir) {
  const fs::path manifest_path = dir / "manifest.jsonl";
  std::ifstream in(manifest_path, std::ios::binary);
  if (!in) throw MissingFileError("missing manifest: " + manifest_path.string());
  std::vector<Sample> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      const json rec = json::parse(line);
      Sample s;
      s.sample_id = rec.at("sample_id").get<std::string>();
      s.kind = sample_kind_from_string(rec.at("kind").get<std::string>());
      s.source_id = rec.at("source_id").get<std::uint64_t>();
      const auto& frame_paths = rec.at("frames");
      if (frame_paths.empty()) throw std::invalid_argument("record has no frames");
      const PpmImage first = read_ppm(dir / frame_paths[0].get<std::string>());
      s.frames = FrameStack(static_cast<int>(frame_paths.size()), first.height, first.width);
      s.global_caption = rec.at("global_caption").get<std::vector<std::string>>();
      for (const auto& ij : rec.at("instances")) {
        InstanceAnnotation inst;
        inst.instance_id = ij.at("instance_id").get<int>();
        inst.caption = ij.at("caption").get<std::vector<std::string>>();
        for (const auto& bj : ij.at("trajectory")) {
          inst.trajectory.push_back(Box{bj.at("t").get<int>(), bj.at("x").get<int>(),
                                        bj.at("y").get<int>(), bj.at("w").get<int>(),
                                        bj.at("h").get<int>()});
        }
        s.instances.push_back(std::move(inst));
      }
      for (std::size_t t = 0; t < frame_paths.size(); ++t) {
        read_ppm(dir / frame_paths[t].get<std::string>(), s.frames, static_cast<int>(t));
      }
      out.push_back(std::move(s));
    } catch (const DatasetError&) {
      throw;
    } catch (const std::exception& e) {
      throw DatasetError(manifest_path.string() + ": malformed record at line " +
                         std::to_string(line_no) + ": " + e.what());
    }
  }
  return out;
}

}  // namespace instap
