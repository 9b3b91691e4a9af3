// Copyright 2026 The InstAP Desk Authors
// SPDX-License-Identifier: Apache-2.0

#include "instap/model.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "instap/rng.hpp"

namespace instap::model {

namespace {

enum class Init { kWeight, kZero, kOne, kEmbed, kLogTemp };

struct ParamSpec {
  std::string name;
  Index rows;
  Index cols;
  Init init;
};

constexpr double kEmbedStd = 0.5;

void add_ln(std::vector<ParamSpec>& out, const std::string& p, Index d) {
  out.push_back({p + ".g", 1, d, Init::kOne});
  out.push_back({p + ".b", 1, d, Init::kZero});
}

void add_linear(std::vector<ParamSpec>& out, const std::string& w, const std::string& b, Index in,
                Index outd) {
  out.push_back({w, in, outd, Init::kWeight});
  out.push_back({b, 1, outd, Init::kZero});
}

void add_mlp(std::vector<ParamSpec>& out, const std::string& p, const ModelConfig& c) {
  const Index d = c.dim;
  const Index h = static_cast<Index>(c.dim) * c.mlp_ratio;
  add_ln(out, p + ".ln2", d);
  add_linear(out, p + ".mlp.w1", p + ".mlp.b1", d, h);
  add_linear(out, p + ".mlp.w2", p + ".mlp.b2", h, d);
}

void add_self_attention(std::vector<ParamSpec>& out, const std::string& p, const std::string& attn,
                        Index d) {
  add_ln(out, p + ".ln1", d);
  add_linear(out, p + "." + attn + ".wqkv", p + "." + attn + ".bqkv", d, 3 * d);
  add_linear(out, p + "." + attn + ".wo", p + "." + attn + ".bo", d, d);
}

void add_encoder_block(std::vector<ParamSpec>& out, const std::string& p, const ModelConfig& c) {
  add_self_attention(out, p, "attn", c.dim);
  add_mlp(out, p, c);
}

void add_video_encoder(std::vector<ParamSpec>& out, const std::string& prefix, const ModelConfig& c) {
  const Index d = c.dim;
  add_linear(out, prefix + ".patch.w", prefix + ".patch.b",
             static_cast<Index>(c.patch) * c.patch * 3, d);
  out.push_back({prefix + ".pos.frame", c.max_frames, d, Init::kEmbed});
  out.push_back({prefix + ".pos.row", c.max_grid, d, Init::kEmbed});
  out.push_back({prefix + ".pos.col", c.max_grid, d, Init::kEmbed});
  for (int i = 0; i < c.encoder_layers; ++i) {
    add_encoder_block(out, prefix + ".block" + std::to_string(i), c);
  }
}

std::vector<ParamSpec> trainable_specs(const ModelConfig& c) {
  const Index d = c.dim;
  std::vector<ParamSpec> out;
  add_video_encoder(out, "student", c);

  out.push_back({"text.tok", c.vocab_size, d, Init::kEmbed});
  out.push_back({"text.pos", c.text_len, d, Init::kEmbed});
  for (int i = 0; i < c.text_layers; ++i) add_encoder_block(out, "text.block" + std::to_string(i), c);

  out.push_back({"proj.video", d, c.proj_dim, Init::kWeight});
  out.push_back({"proj.text", d, c.proj_dim, Init::kWeight});

  add_ln(out, "xattn.ln_q", d);
  add_ln(out, "xattn.ln_kv", d);
  add_linear(out, "xattn.wq", "xattn.bq", d, d);
  add_linear(out, "xattn.wkv", "xattn.bkv", d, 2 * d);
  add_linear(out, "xattn.wo", "xattn.bo", d, d);

  for (int i = 0; i < c.fusion_layers; ++i) {
    const std::string p = "fusion.block" + std::to_string(i);
    add_self_attention(out, p, "self", d);
    add_ln(out, p + ".ln_x", d);
    add_ln(out, p + ".ln_v", d);
    add_linear(out, p + ".cross.wq", p + ".cross.bq", d, d);
    add_linear(out, p + ".cross.wkv", p + ".cross.bkv", d, 2 * d);
    add_linear(out, p + ".cross.wo", p + ".cross.bo", d, d);
    add_mlp(out, p, c);
  }
  add_ln(out, "fusion.ln_f", d);

  add_linear(out, "head.match.w", "head.match.b", d, 2);
  add_linear(out, "head.mlm.w", "head.mlm.b", d, c.vocab_size);
  add_linear(out, "head.ground.w1", "head.ground.b1", d, d);
  add_linear(out, "head.ground.w2", "head.ground.b2", d, d);
  add_linear(out, "head.ground.w3", "head.ground.b3", d, 4);

  out.push_back({"temp.log_tau", 1, 1, Init::kLogTemp});
  out.push_back({"temp.log_tau_inst", 1, 1, Init::kLogTemp});
  return out;
}

ParamStore materialise(const std::vector<ParamSpec>& specs, std::uint64_t seed) {
  ParamStore store;
  for (const ParamSpec& s : specs) {
    Matrix m(s.rows, s.cols);
    switch (s.init) {
      case Init::kZero:
        m.setZero();
        break;
      case Init::kOne:
        m.setOnes();
        break;
      case Init::kLogTemp:
        m.setConstant(std::log(kInitTemperature));
        break;
      case Init::kWeight:
      case Init::kEmbed: {
        Rng rng(mix_seed(seed, fnv1a(s.name)));
        const double stdev = s.init == Init::kWeight ? 1.0 / std::sqrt(static_cast<double>(s.rows))
                                                     : kEmbedStd;
        for (Index i = 0; i < m.size(); ++i) m.data()[i] = stdev * rng.normal();
        break;
      }
    }
    store.set(s.name, std::move(m));
  }
  return store;
}

std::string last_component(std::string_view name) {
  const auto dot = name.rfind('.');
  return std::string(dot == std::string_view::npos ? name : name.substr(dot + 1));
}

ad::Var linear(Bindings& bind, const ad::Var& x, const std::string& w, const std::string& b) {
  return ad::add_row(ad::matmul(x, bind(w)), bind(b));
}

ad::Var layer_norm(Bindings& bind, const ad::Var& x, const std::string& p) {
  return ad::layer_norm(x, bind(p + ".g"), bind(p + ".b"));
}

ad::Var self_attention(Bindings& bind, const ad::Var& x, const std::string& p, const std::string& attn,
                       int heads, const std::vector<bool>* key_valid, Matrix* probs) {
  const Index d = x.cols();
  const ad::Var h = layer_norm(bind, x, p + ".ln1");
  const ad::Var qkv = linear(bind, h, p + "." + attn + ".wqkv", p + "." + attn + ".bqkv");
  const ad::Var a = ad::multi_head_attention(ad::slice_cols(qkv, 0, d), ad::slice_cols(qkv, d, d),
                                             ad::slice_cols(qkv, 2 * d, d), heads, key_valid, probs);
  return x + linear(bind, a, p + "." + attn + ".wo", p + "." + attn + ".bo");
}

ad::Var mlp(Bindings& bind, const ad::Var& x, const std::string& p) {
  const ad::Var h = layer_norm(bind, x, p + ".ln2");
  const ad::Var m = linear(bind, ad::gelu(linear(bind, h, p + ".mlp.w1", p + ".mlp.b1")),
                           p + ".mlp.w2", p + ".mlp.b2");
  return x + m;
}

/// x + Wo·Attn(LN_q(x) Wq, LN_kv(v) Wk, LN_kv(v) Wv); prefix names the weights.
ad::Var cross_attention(Bindings& bind, const ad::Var& x, const ad::Var& visual,
                        const std::string& ln_q, const std::string& ln_kv, const std::string& p,
                        int heads) {
  const Index d = x.cols();
  const ad::Var q = linear(bind, layer_norm(bind, x, ln_q), p + "wq", p + "bq");
  const ad::Var kv = linear(bind, layer_norm(bind, visual, ln_kv), p + "wkv", p + "bkv");
  const ad::Var a =
      ad::multi_head_attention(q, ad::slice_cols(kv, 0, d), ad::slice_cols(kv, d, d), heads);
  return x + linear(bind, a, p + "wo", p + "bo");
}

std::vector<bool> text_key_mask(std::span<const int> ids) {
  std::vector<bool> valid(ids.size());
  for (std::size_t i = 0; i < ids.size(); ++i) valid[i] = ids[i] != Vocab::kPad;
  return valid;
}

}  // namespace

void validate_config(const ModelConfig& c) {
  auto require = [](bool ok, const char* what) {
    if (!ok) throw std::invalid_argument(std::string("model config: ") + what);
  };
  require(c.dim > 0 && c.proj_dim > 0 && c.proj_dim <= c.dim, "need 0 < proj_dim <= dim");
  require(c.heads > 0 && c.dim % c.heads == 0, "dim must be divisible by heads");
  require(c.encoder_layers >= 0 && c.text_layers >= 0 && c.fusion_layers >= 0,
          "layer counts must be non-negative");
  require(c.patch > 0 && c.mlp_ratio > 0, "patch and mlp_ratio must be positive");
  require(c.max_frames > 0 && c.max_grid > 0, "positional tables must be non-empty");
  require(c.text_len >= 2, "text_len must be at least 2");
  require(c.crop_h > 0 && c.crop_w > 0 && c.crop_h % c.patch == 0 && c.crop_w % c.patch == 0,
          "crop size must be a positive multiple of the patch size");
  require(c.crop_h / c.patch <= c.max_grid && c.crop_w / c.patch <= c.max_grid,
          "crop grid exceeds max_grid");
  require(c.vocab_size > Vocab::kNumSpecial, "vocab_size must cover the special tokens");
}

ParamStore init_params(const ModelConfig& config, std::uint64_t seed) {
  validate_config(config);
  return materialise(trainable_specs(config), seed);
}

ParamStore init_teacher(const ModelConfig& config) {
  validate_config(config);
  std::vector<ParamSpec> specs;
  add_video_encoder(specs, "teacher", config);
  return materialise(specs, kTeacherSeed);
}

ModelState init_model(const ModelConfig& config, std::uint64_t seed) {
  return ModelState{config, init_params(config, seed), init_teacher(config)};
}

std::vector<std::string> video_encoder_names(const ParamStore& params) {
  return params.names_with_prefix("student.");
}

void copy_teacher_into_student(ModelState& state) {
  for (const auto& [name, value] : state.teacher.tensors()) {
    state.params.at("student." + name.substr(std::string_view("teacher.").size())) = value;
  }
}

bool applies_weight_decay(std::string_view name) {
  if (name.starts_with("temp.") || name.find(".pos") != std::string_view::npos) return false;
  const std::string last = last_component(name);
  if (name == "text.tok" || name.starts_with("proj.")) return true;
  return !last.empty() && last[0] == 'w';
}

double temperature(const ParamStore& params, std::string_view name) {
  return std::exp(params.at(name)(0, 0));
}

// ---- video -----------------------------------------------------------------

PatchGrid extract_patches(const FrameStack& frames, int patch) {
  if (patch <= 0 || frames.height() % patch != 0 || frames.width() % patch != 0) {
    throw std::invalid_argument("extract_patches: frame size not divisible by patch size");
  }
  const int gh = frames.height() / patch;
  const int gw = frames.width() / patch;
  PatchGrid grid;
  grid.patches.resize(static_cast<Index>(frames.frames()) * gh * gw,
                      static_cast<Index>(patch) * patch * 3);
  Index row = 0;
  for (int t = 0; t < frames.frames(); ++t) {
    for (int r = 0; r < gh; ++r) {
      for (int c = 0; c < gw; ++c, ++row) {
        Index k = 0;
        for (int py = 0; py < patch; ++py) {
          for (int px = 0; px < patch; ++px) {
            for (int ch = 0; ch < 3; ++ch) {
              grid.patches(row, k++) = frames.at(t, r * patch + py, c * patch + px, ch);
            }
          }
        }
        grid.positions.push_back({t, r, c});
      }
    }
  }
  return grid;
}

TokenSeq patchify(Bindings& bind, std::string_view prefix, const FrameStack& frames,
                  const ModelConfig& config) {
  if (frames.frames() > config.max_frames) {
    throw std::invalid_argument("patchify: more frames than max_frames");
  }
  PatchGrid grid = extract_patches(frames, config.patch);
  if (frames.height() / config.patch > config.max_grid || frames.width() / config.patch > config.max_grid) {
    throw std::invalid_argument("patchify: patch grid exceeds max_grid");
  }
  const std::string p(prefix);
  std::vector<Index> f, r, c;
  for (const TokenPos& pos : grid.positions) {
    f.push_back(pos.frame);
    r.push_back(pos.row);
    c.push_back(pos.col);
  }
  ad::Tape& tape = bind.tape();
  ad::Var x = linear(bind, tape.constant(std::move(grid.patches)), p + ".patch.w", p + ".patch.b");
  x = x + ad::gather_rows(bind(p + ".pos.frame"), f);
  x = x + ad::gather_rows(bind(p + ".pos.row"), r);
  x = x + ad::gather_rows(bind(p + ".pos.col"), c);
  return TokenSeq{x, std::move(grid.positions)};
}

Encoded encode_video(Bindings& bind, std::string_view prefix, const TokenSeq& tokens,
                     const ModelConfig& config, Matrix* last_attention) {
  const std::string p(prefix);
  ad::Var x = tokens.data;
  for (int i = 0; i < config.encoder_layers; ++i) {
    const std::string bp = p + ".block" + std::to_string(i);
    const bool last = i + 1 == config.encoder_layers;
    x = self_attention(bind, x, bp, "attn", config.heads, nullptr, last ? last_attention : nullptr);
    x = mlp(bind, x, bp);
  }
  if (last_attention && config.encoder_layers == 0) {
    *last_attention = Matrix::Identity(tokens.size(), tokens.size());
  }
  return Encoded{TokenSeq{x, tokens.positions}, ad::mean_rows(x)};
}

TeacherOutput teacher_features(const ModelState& state, const FrameStack& frames) {
  ad::Tape tape(false);
  Bindings bind(tape, state.teacher, false);
  const TokenSeq tokens = patchify(bind, "teacher", frames, state.config);
  Matrix probs;
  const Encoded enc = encode_video(bind, "teacher", tokens, state.config, &probs);
  return TeacherOutput{enc.tokens.data.value(), attention_from_query_probs(probs), tokens.positions};
}

// ---- text ------------------------------------------------------------------

Encoded encode_text(Bindings& bind, std::span<const int> ids, const ModelConfig& config) {
  if (ids.empty() || static_cast<int>(ids.size()) > config.text_len) {
    throw std::invalid_argument("encode_text: sequence length must be in [1, text_len]");
  }
  std::vector<Index> rows;
  std::vector<Index> pos;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || ids[i] >= config.vocab_size) {
      throw std::out_of_range("encode_text: token id " + std::to_string(ids[i]) +
                              " outside vocabulary of size " + std::to_string(config.vocab_size));
    }
    rows.push_back(ids[i]);
    pos.push_back(static_cast<Index>(i));
  }
  const std::vector<bool> valid = text_key_mask(ids);
  ad::Var x = ad::gather_rows(bind("text.tok"), rows) + ad::gather_rows(bind("text.pos"), pos);
  for (int i = 0; i < config.text_layers; ++i) {
    const std::string bp = "text.block" + std::to_string(i);
    x = self_attention(bind, x, bp, "attn", config.heads, &valid, nullptr);
    x = mlp(bind, x, bp);
  }
  TokenSeq seq;
  seq.data = x;
  for (std::size_t i = 0; i < ids.size(); ++i) seq.positions.push_back({0, 0, static_cast<int>(i)});
  return Encoded{seq, ad::slice_rows(x, 0, 1)};
}

// ---- shared space ----------------------------------------------------------

ad::Var project(Bindings& bind, const ad::Var& raw, Modality which) {
  const char* name = which == Modality::kVisual ? "proj.video" : "proj.text";
  return ad::l2_normalize_rows(ad::matmul(raw, bind(name)));
}

// ---- instances -------------------------------------------------------------

FrameStack crop_instance(const Sample& sample, const InstanceAnnotation& instance, int crop_h,
                         int crop_w) {
  if (crop_h <= 0 || crop_w <= 0) throw std::invalid_argument("crop_instance: crop size must be positive");
  const FrameStack& src = sample.frames;
  FrameStack out(static_cast<int>(instance.trajectory.size()), crop_h, crop_w);
  for (std::size_t k = 0; k < instance.trajectory.size(); ++k) {
    const Box& b = instance.trajectory[k];
    if (b.t < 0 || b.t >= src.frames()) throw std::invalid_argument("crop_instance: box frame out of range");
    const int x0 = std::max(b.x, 0);
    const int y0 = std::max(b.y, 0);
    const int x1 = std::min(b.x + b.w, src.width());
    const int y1 = std::min(b.y + b.h, src.height());
    if (x1 <= x0 || y1 <= y0) throw std::invalid_argument("crop_instance: degenerate box after clamping");
    const double sx = static_cast<double>(x1 - x0) / crop_w;
    const double sy = static_cast<double>(y1 - y0) / crop_h;
    const int t = static_cast<int>(k);
    for (int i = 0; i < crop_h; ++i) {
      const double fy = std::clamp(y0 + (i + 0.5) * sy - 0.5, static_cast<double>(y0),
                                   static_cast<double>(y1 - 1));
      const int ya = static_cast<int>(std::floor(fy));
      const int yb = std::min(ya + 1, y1 - 1);
      const double wy = fy - ya;
      for (int j = 0; j < crop_w; ++j) {
        const double fx = std::clamp(x0 + (j + 0.5) * sx - 0.5, static_cast<double>(x0),
                                     static_cast<double>(x1 - 1));
        const int xa = static_cast<int>(std::floor(fx));
        const int xb = std::min(xa + 1, x1 - 1);
        const double wx = fx - xa;
        for (int c = 0; c < 3; ++c) {
          const double top = (1 - wx) * src.at(b.t, ya, xa, c) + wx * src.at(b.t, ya, xb, c);
          const double bot = (1 - wx) * src.at(b.t, yb, xa, c) + wx * src.at(b.t, yb, xb, c);
          out.at(t, i, j, c) = static_cast<float>((1 - wy) * top + wy * bot);
        }
      }
    }
  }
  return out;
}

Encoded cross_attend_pool(Bindings& bind, const TokenSeq& crop, const TokenSeq& scene,
                          const ModelConfig& config) {
  const ad::Var z = cross_attention(bind, crop.data, scene.data, "xattn.ln_q", "xattn.ln_kv", "xattn.",
                                    config.heads);
  return Encoded{TokenSeq{z, crop.positions}, ad::mean_rows(z)};
}

// ---- fusion and heads ------------------------------------------------------

Fused fuse(Bindings& bind, const ad::Var& visual, std::span<const int> ids, const ModelConfig& config,
           bool want_logits, bool use_cross) {
  const std::vector<bool> valid = text_key_mask(ids);
  ad::Var x = encode_text(bind, ids, config).tokens.data;
  for (int i = 0; i < config.fusion_layers; ++i) {
    const std::string p = "fusion.block" + std::to_string(i);
    x = self_attention(bind, x, p, "self", config.heads, &valid, nullptr);
    if (use_cross) x = cross_attention(bind, x, visual, p + ".ln_x", p + ".ln_v", p + ".cross.", config.heads);
    x = mlp(bind, x, p);
  }
  x = layer_norm(bind, x, "fusion.ln_f");
  Fused out;
  out.cls = ad::slice_rows(x, 0, 1);
  if (want_logits) out.logits = linear(bind, x, "head.mlm.w", "head.mlm.b");
  return out;
}

ad::Var match_logits(Bindings& bind, const ad::Var& cls) {
  return linear(bind, cls, "head.match.w", "head.match.b");
}

ad::Var ground_box(Bindings& bind, const ad::Var& cls) {
  ad::Var h = ad::gelu(linear(bind, cls, "head.ground.w1", "head.ground.b1"));
  h = ad::gelu(linear(bind, h, "head.ground.w2", "head.ground.b2"));
  return ad::sigmoid(linear(bind, h, "head.ground.w3", "head.ground.b3"));
}

TokenSeq frame_tokens(const TokenSeq& tokens, int t) {
  std::vector<Index> rows;
  TokenSeq out;
  for (std::size_t i = 0; i < tokens.positions.size(); ++i) {
    if (tokens.positions[i].frame == t) {
      rows.push_back(static_cast<Index>(i));
      out.positions.push_back(tokens.positions[i]);
    }
  }
  if (rows.empty()) throw std::invalid_argument("frame_tokens: no tokens on frame " + std::to_string(t));
  out.data = ad::gather_rows(tokens.data, rows);
  return out;
}

}  // namespace instap::model
