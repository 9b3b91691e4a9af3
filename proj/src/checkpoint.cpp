// Copyright 2026 The InstAP Desk Authors
// SPDX-License-Identifier: Apache-2.0

#include "instap/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <json.hpp>

namespace instap {

using nlohmann::json;

namespace {

constexpr char kMagic[4] = {'I', 'A', 'P', 'T'};
constexpr std::string_view kMomentM = "opt.m.";
constexpr std::string_view kMomentV = "opt.v.";

void put_le(std::string& out, std::uint64_t value, int bytes) {
  for (int i = 0; i < bytes; ++i) out.push_back(static_cast<char>((value >> (8 * i)) & 0xFF));
}

std::uint64_t get_le(const std::string& in, std::size_t at, int bytes) {
  std::uint64_t value = 0;
  for (int i = 0; i < bytes; ++i) {
    value |= static_cast<std::uint64_t>(static_cast<unsigned char>(in[at + i])) << (8 * i);
  }
  return value;
}

void add_all(std::map<std::string, const Matrix*>& out, const GradMap& tensors, std::string_view prefix) {
  for (const auto& [name, m] : tensors) out.emplace(std::string(prefix) + name, &m);
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const model::ModelState& state,
                     const OptState& opt, Stage stage) {
  std::map<std::string, const Matrix*> tensors;
  for (const auto& [name, m] : state.params.tensors()) tensors.emplace(name, &m);
  for (const auto& [name, m] : state.teacher.tensors()) tensors.emplace(name, &m);
  add_all(tensors, opt.m, kMomentM);
  add_all(tensors, opt.v, kMomentV);

  json manifest = json::object();
  manifest["__meta__"] = {{"model", json::parse(model_config_to_json_text(state.config))},
                          {"stage", std::string(to_string(stage))},
                          {"opt_step", opt.step}};
  std::string payload;
  for (const auto& [name, m] : tensors) {
    manifest[name] = {{"dtype", "f64"}, {"shape", {m->rows(), m->cols()}}, {"offset", payload.size()}};
    for (Index i = 0; i < m->size(); ++i) put_le(payload, std::bit_cast<std::uint64_t>(m->data()[i]), 8);
  }
  const std::string text = manifest.dump();

  std::string out(kMagic, 4);
  put_le(out, kCheckpointVersion, 4);
  put_le(out, text.size(), 8);
  out += text;
  out += payload;

  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw CheckpointError("cannot write checkpoint " + tmp.string());
    f.write(out.data(), static_cast<std::streamsize>(out.size()));
    if (!f) throw CheckpointError("short write to " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw CheckpointError("cannot open checkpoint " + path.string());
  const std::string in((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  const std::string where = path.string() + ": ";

  if (in.size() < 16 || std::memcmp(in.data(), kMagic, 4) != 0) throw CheckpointError(where + "bad magic");
  const auto version = static_cast<std::uint32_t>(get_le(in, 4, 4));
  if (version != kCheckpointVersion) {
    throw CheckpointError(where + "unsupported version " + std::to_string(version));
  }
  const std::uint64_t manifest_bytes = get_le(in, 8, 8);
  if (manifest_bytes > in.size() - 16) throw CheckpointError(where + "truncated manifest");
  json manifest;
  try {
    manifest = json::parse(in.substr(16, manifest_bytes));
  } catch (const json::exception& e) {
    throw CheckpointError(where + "malformed manifest: " + e.what());
  }
  const std::size_t payload_at = 16 + manifest_bytes;
  const std::size_t payload_bytes = in.size() - payload_at;

  Checkpoint ck;
  try {
    const json& meta = manifest.at("__meta__");
    ck.state.config = model_config_from_json_text(meta.at("model").dump());
    ck.stage = stage_from_string(meta.at("stage").get<std::string>());
    ck.opt.step = meta.at("opt_step").get<std::int64_t>();
    for (const auto& [name, entry] : manifest.items()) {
      if (name == "__meta__") continue;
      const std::string dtype = entry.at("dtype").get<std::string>();
      if (dtype != "f64" && dtype != "f32") throw CheckpointError(where + "unsupported dtype for " + name);
      const std::size_t width = dtype == "f64" ? 8 : 4;
      const auto rows = entry.at("shape").at(0).get<Index>();
      const auto cols = entry.at("shape").at(1).get<Index>();
      const auto offset = entry.at("offset").get<std::uint64_t>();
      if (rows < 0 || cols < 0) throw CheckpointError(where + "negative shape for " + name);
      const std::uint64_t bytes = static_cast<std::uint64_t>(rows * cols) * width;
      if (offset > payload_bytes || bytes > payload_bytes - offset) {
        throw CheckpointError(where + "truncated payload at " + name);
      }
      Matrix m(rows, cols);
      for (Index i = 0; i < m.size(); ++i) {
        const std::size_t at = payload_at + offset + width * static_cast<std::size_t>(i);
        m.data()[i] = width == 8 ? std::bit_cast<double>(get_le(in, at, 8))
                                 : std::bit_cast<float>(static_cast<std::uint32_t>(get_le(in, at, 4)));
      }
      if (name.starts_with(kMomentM)) {
        ck.opt.m.emplace(name.substr(kMomentM.size()), std::move(m));
      } else if (name.starts_with(kMomentV)) {
        ck.opt.v.emplace(name.substr(kMomentV.size()), std::move(m));
      } else if (name.starts_with("teacher.")) {
        ck.state.teacher.set(name, std::move(m));
      } else {
        ck.state.params.set(name, std::move(m));
      }
    }
  } catch (const CheckpointError&) {
    throw;
  } catch (const std::exception& e) {
    throw CheckpointError(where + "malformed manifest: " + e.what());
  }

  const model::ModelState expected = model::init_model(ck.state.config, 0);
  std::string missing;
  auto check = [&](const ParamStore& want, const ParamStore& have) {
    for (const auto& [name, m] : want.tensors()) {
      if (!have.contains(name)) {
        missing += (missing.empty() ? "" : ", ") + name;
      } else if (have.at(name).rows() != m.rows() || have.at(name).cols() != m.cols()) {
        throw CheckpointError(where + "shape mismatch for " + name);
      }
    }
  };
  check(expected.params, ck.state.params);
  check(expected.teacher, ck.state.teacher);
  if (!missing.empty()) throw CheckpointError(where + "missing tensors: " + missing);
  return ck;
}

model::ModelState handoff_from_pretrain(const Checkpoint& stage1, const model::ModelConfig& config,
                                        std::uint64_t init_seed) {
  model::ModelState state = model::init_model(config, init_seed);
  for (const std::string& name : model::video_encoder_names(state.params)) {
    if (!stage1.state.params.contains(name)) throw CheckpointError("stage-1 checkpoint lacks " + name);
    const Matrix& src = stage1.state.params.at(name);
    Matrix& dst = state.params.at(name);
    if (src.rows() != dst.rows() || src.cols() != dst.cols()) {
      throw CheckpointError("stage-1 encoder shape mismatch for " + name);
    }
    dst = src;
  }
  return state;
}

}  // namespace instap
