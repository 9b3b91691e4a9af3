// Copyright 2026 The InstAP Desk Authors
// SPDX-License-Identifier: Apache-2.0

#include "instap/training.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include "instap/checkpoint.hpp"
#include "instap/masking.hpp"
#include "instap/rng.hpp"

namespace instap {

using model::Encoded;
using model::Modality;
using model::ModelState;

namespace {

constexpr std::uint64_t kShuffleSalt = 0x5AFF1E;
constexpr std::uint64_t kCaptionSalt = 0xCA9710;
constexpr std::uint64_t kDropoutSalt = 0xD809;

ad::Var weighted_sum(ad::Tape& tape, const std::vector<std::pair<double, ad::Var>>& terms) {
  ad::Var total = tape.scalar(0.0);
  for (const auto& [w, v] : terms) total = total + scale(v, w);
  return total;
}

ad::Var mean_of(ad::Tape& tape, const std::vector<ad::Var>& terms) {
  ad::Var total = tape.scalar(0.0);
  for (const ad::Var& v : terms) total = total + v;
  return scale(total, 1.0 / static_cast<double>(terms.size()));
}

/// Matching logits for the positive pairs followed by the mined negatives.
struct MatchBatch {
  std::vector<ad::Var> cls;
  std::vector<int> labels;
};

void add_pair(MatchBatch& out, Bindings& bind, const ad::Var& visual, std::span<const int> ids,
              const model::ModelConfig& cfg, int label) {
  out.cls.push_back(model::fuse(bind, visual, ids, cfg, false).cls);
  out.labels.push_back(label);
}

ad::Var match_loss(Bindings& bind, const MatchBatch& batch) {
  return vtm_loss(model::match_logits(bind, ad::concat_rows(batch.cls)), batch.labels);
}

}  // namespace

// ---- batch preparation -----------------------------------------------------

Sample clip_sample(const Sample& sample, int frames) {
  const int total = sample.frames.frames();
  if (frames <= 0) throw std::invalid_argument("clip_sample: frames must be positive");
  if (total <= frames) return sample;
  std::vector<int> keep(static_cast<std::size_t>(frames));
  for (int i = 0; i < frames; ++i) keep[static_cast<std::size_t>(i)] = i * total / frames;

  Sample out = sample;
  out.frames = FrameStack(frames, sample.frames.height(), sample.frames.width());
  const std::size_t per_frame = static_cast<std::size_t>(sample.frames.height()) * sample.frames.width() * 3;
  for (int i = 0; i < frames; ++i) {
    const auto src = sample.frames.data().subspan(static_cast<std::size_t>(keep[static_cast<std::size_t>(i)]) * per_frame, per_frame);
    std::copy(src.begin(), src.end(), out.frames.data().begin() + static_cast<std::ptrdiff_t>(i * per_frame));
  }
  out.instances.clear();
  for (const InstanceAnnotation& inst : sample.instances) {
    InstanceAnnotation kept = inst;
    kept.trajectory.clear();
    for (const Box& b : inst.trajectory) {
      const auto it = std::find(keep.begin(), keep.end(), b.t);
      if (it == keep.end()) continue;
      Box nb = b;
      nb.t = static_cast<int>(it - keep.begin());
      kept.trajectory.push_back(nb);
    }
    if (!kept.trajectory.empty()) out.instances.push_back(std::move(kept));
  }
  return out;
}

std::uint64_t caption_stream_seed(std::uint64_t data_seed, std::string_view sample_id, int instance_id) {
  return mix_seed(mix_seed(mix_seed(data_seed, kCaptionSalt), fnv1a(sample_id)),
                  static_cast<std::uint64_t>(static_cast<std::int64_t>(instance_id) + 1));
}

std::string caption_text(std::span<const std::string> caption, int epoch, std::uint64_t stream_seed,
                         bool subsampling) {
  if (caption.empty()) throw std::invalid_argument("caption_text: empty caption");
  if (subsampling) return sample_caption_sentence(caption, epoch, Rng(stream_seed), true);
  std::string joined;
  for (const std::string& s : caption) {
    if (!joined.empty()) joined += ' ';
    joined += s;
  }
  return joined;
}

BatchText batch_text(std::span<const Sample* const> batch, const Vocab& vocab, const TrainConfig& config,
                     int epoch) {
  const int len = config.model.text_len;
  const std::uint64_t seed = config.seeds.data;
  BatchText out;
  for (const Sample* s : batch) {
    out.global.push_back(tokenize(
        caption_text(s->global_caption, epoch, caption_stream_seed(seed, s->sample_id, -1), config.caption_subsampling),
        vocab, len));
    auto& inst = out.inst.emplace_back();
    for (const InstanceAnnotation& a : s->instances) {
      inst.push_back(tokenize(caption_text(a.caption, epoch, caption_stream_seed(seed, s->sample_id, a.instance_id),
                                           config.caption_subsampling),
                              vocab, len));
    }
  }
  return out;
}

// ---- objectives --------------------------------------------------------------

Objective pretrain_objective(Bindings& bind, const ModelState& state, std::span<const Sample* const> batch,
                             const TrainConfig& config) {
  if (batch.empty()) throw std::invalid_argument("pretrain_objective: empty batch");
  ad::Tape& tape = bind.tape();
  std::vector<ad::Var> terms;
  for (const Sample* s : batch) {
    const model::TeacherOutput teacher = model::teacher_features(state, s->frames);
    const std::vector<double> scores = importance_scores(teacher.attention);
    const TokenMask mask = build_mask(scores, config.mask_ratio, static_cast<Index>(scores.size()));
    const TokenSeq tokens = model::patchify(bind, "student", s->frames, state.config);
    const Encoded enc = model::encode_video(bind, "student", select_visible(tokens, mask), state.config);
    terms.push_back(rec_loss(enc.tokens.data, tape.constant(teacher.features), mask.visible));
  }
  Objective out;
  out.total = mean_of(tape, terms);
  out.components.rec = out.total.scalar();
  return out;
}

Objective align_objective(Bindings& bind, const ModelState& state, std::span<const Sample* const> batch,
                          const BatchText& text, const TrainConfig& config, Rng& rng) {
  const std::size_t n_batch = batch.size();
  if (n_batch < 2) throw std::invalid_argument("align_objective: batch size must be at least 2");
  if (text.global.size() != n_batch || text.inst.size() != n_batch) {
    throw std::invalid_argument("align_objective: text does not match batch");
  }
  const model::ModelConfig& cfg = state.config;
  const LossWeights& w = config.loss_weights;
  ad::Tape& tape = bind.tape();
  Objective out;
  std::vector<std::pair<double, ad::Var>> terms;

  // Global path.
  std::vector<Encoded> video;
  std::vector<ad::Var> v_pool;
  std::vector<ad::Var> t_pool;
  for (std::size_t i = 0; i < n_batch; ++i) {
    const TokenSeq tokens = model::patchify(bind, "student", batch[i]->frames, cfg);
    video.push_back(model::encode_video(bind, "student", tokens, cfg));
    v_pool.push_back(video.back().pooled);
    t_pool.push_back(model::encode_text(bind, text.global[i], cfg).pooled);
  }
  const ad::Var v = model::project(bind, ad::concat_rows(v_pool), Modality::kVisual);
  const ad::Var t = model::project(bind, ad::concat_rows(t_pool), Modality::kText);
  const ad::Var tau = ad::exp(bind("temp.log_tau"));
  const ad::Var vtc = vtc_loss(v, t, tau);
  terms.emplace_back(w.vtc, vtc);
  out.components.vtc = vtc.scalar();

  const Matrix sim = v.value() * t.value().transpose();
  const HardNegatives neg = mine_hard_negatives(sim, tau.scalar(), rng);
  MatchBatch match;
  for (std::size_t i = 0; i < n_batch; ++i) add_pair(match, bind, video[i].tokens.data, text.global[i], cfg, 1);
  for (std::size_t i = 0; i < n_batch; ++i) {
    const Index j = neg.text_for_video[i];
    if (j >= 0) add_pair(match, bind, video[i].tokens.data, text.global[static_cast<std::size_t>(j)], cfg, 0);
  }
  for (std::size_t j = 0; j < n_batch; ++j) {
    const Index i = neg.video_for_text[j];
    if (i >= 0) add_pair(match, bind, video[static_cast<std::size_t>(i)].tokens.data, text.global[j], cfg, 0);
  }
  const ad::Var vtm = match_loss(bind, match);
  terms.emplace_back(w.vtm, vtm);
  out.components.vtm = vtm.scalar();

  std::vector<MaskedText> masks;
  std::vector<ad::Var> logits;
  for (std::size_t i = 0; i < n_batch; ++i) {
    masks.push_back(mask_text_tokens(text.global[i], config.mlm_ratio, rng));
    logits.push_back(model::fuse(bind, video[i].tokens.data, masks.back().ids, cfg, true).logits);
  }
  const ad::Var mlm = mlm_loss(logits, masks);
  terms.emplace_back(w.mlm, mlm);
  out.components.mlm = mlm.scalar();

  // Instance path.
  std::size_t n_inst = 0;
  for (const auto& per_sample : text.inst) n_inst += per_sample.size();
  if (w.instance_enabled() && n_inst > 0) {
    std::vector<Encoded> crop;
    std::vector<Encoded> pooled;
    std::vector<ad::Var> z_pool;
    std::vector<ad::Var> s_pool;
    std::vector<std::uint64_t> sources;
    std::vector<const std::vector<int>*> ids;
    for (std::size_t i = 0; i < n_batch; ++i) {
      const Sample& s = *batch[i];
      if (s.instances.size() != text.inst[i].size()) {
        throw std::invalid_argument("align_objective: instance text does not match batch");
      }
      for (std::size_t k = 0; k < s.instances.size(); ++k) {
        const FrameStack frames = model::crop_instance(s, s.instances[k], cfg.crop_h, cfg.crop_w);
        crop.push_back(model::encode_video(bind, "student", model::patchify(bind, "student", frames, cfg), cfg));
        pooled.push_back(model::cross_attend_pool(bind, crop.back().tokens, video[i].tokens, cfg));
        z_pool.push_back(pooled.back().pooled);
        s_pool.push_back(model::encode_text(bind, text.inst[i][k], cfg).pooled);
        sources.push_back(s.source_id);
        ids.push_back(&text.inst[i][k]);
      }
    }
    const ad::Var z = model::project(bind, ad::concat_rows(z_pool), Modality::kVisual);
    const ad::Var st = model::project(bind, ad::concat_rows(s_pool), Modality::kText);
    const ad::Var tau_inst = config.independent_inst_temperature ? ad::exp(bind("temp.log_tau_inst")) : tau;
    const ad::Var vtc_inst = instance_vtc_loss(z, st, sources, tau_inst);
    terms.emplace_back(w.vtc_inst, vtc_inst);
    out.components.vtc_inst = vtc_inst.scalar();

    MatchBatch inst_match;
    for (std::size_t n = 0; n < n_inst; ++n) add_pair(inst_match, bind, crop[n].pooled, *ids[n], cfg, 1);
    if (n_inst >= 2) {
      const std::vector<bool> eligible = same_source_mask(sources);
      const Matrix inst_sim = z.value() * st.value().transpose();
      const HardNegatives inst_neg = mine_hard_negatives(inst_sim, tau_inst.scalar(), rng, &eligible);
      for (std::size_t n = 0; n < n_inst; ++n) {
        const Index m = inst_neg.text_for_video[n];
        if (m >= 0) add_pair(inst_match, bind, crop[n].pooled, *ids[static_cast<std::size_t>(m)], cfg, 0);
      }
      for (std::size_t m = 0; m < n_inst; ++m) {
        const Index n = inst_neg.video_for_text[m];
        if (n >= 0) add_pair(inst_match, bind, crop[static_cast<std::size_t>(n)].pooled, *ids[m], cfg, 0);
      }
    }
    const ad::Var vtm_inst = match_loss(bind, inst_match);
    terms.emplace_back(w.vtm_inst, vtm_inst);
    out.components.vtm_inst = vtm_inst.scalar();

    std::vector<MaskedText> inst_masks;
    std::vector<ad::Var> inst_logits;
    for (std::size_t n = 0; n < n_inst; ++n) {
      inst_masks.push_back(mask_text_tokens(*ids[n], config.mlm_ratio, rng));
      inst_logits.push_back(model::fuse(bind, pooled[n].tokens.data, inst_masks.back().ids, cfg, true).logits);
    }
    const ad::Var mlm_inst = mlm_loss(inst_logits, inst_masks);
    terms.emplace_back(w.mlm_inst, mlm_inst);
    out.components.mlm_inst = mlm_inst.scalar();
  }

  if (config.keep_rec_in_align) {
    const Objective rec = pretrain_objective(bind, state, batch, config);
    terms.emplace_back(1.0, rec.total);
    out.components.rec = rec.components.rec;
  }
  out.total = weighted_sum(tape, terms);
  return out;
}

bool trainable_in_stage(std::string_view name, Stage stage) {
  if (name.starts_with("teacher.")) return false;
  if (stage == Stage::kPretrain) return name.starts_with("student.");
  return !name.starts_with("head.ground.");
}

AdamWConfig adamw_config(const TrainConfig& config) {
  return {config.adam_beta1, config.adam_beta2, config.adam_eps, config.weight_decay};
}

void clamp_temperatures(ParamStore& params) {
  const double lo = std::log(model::kMinTemperature);
  const double hi = std::log(model::kMaxTemperature);
  for (const std::string& name : params.names_with_prefix("temp.")) {
    Matrix& m = params.at(name);
    m = m.cwiseMax(lo).cwiseMin(hi);
  }
}

// ---- steps ---------------------------------------------------------------------

namespace {

LossReport apply_step(ModelState& state, OptState& opt, const TrainConfig& config, double lr, Stage stage,
                      const std::function<Objective(Bindings&)>& build) {
  ad::Tape tape;
  Bindings bind(tape, state.params, true);
  const Objective obj = build(bind);
  tape.backward(obj.total);
  GradMap grads = bind.gradients();
  std::erase_if(grads, [&](const auto& kv) { return !trainable_in_stage(kv.first, stage); });
  adamw_update(state.params, grads, opt, lr, adamw_config(config), model::applies_weight_decay);
  clamp_temperatures(state.params);
  LossReport report = total_loss(obj.components, config.loss_weights);
  report.step = opt.step;
  report.lr = lr;
  return report;
}

}  // namespace

LossReport pretrain_step(ModelState& state, OptState& opt, std::span<const Sample* const> batch,
                         const TrainConfig& config, double lr) {
  if (config.stage != Stage::kPretrain) throw std::invalid_argument("pretrain_step: config stage is not pretrain");
  return apply_step(state, opt, config, lr, Stage::kPretrain,
                    [&](Bindings& bind) { return pretrain_objective(bind, state, batch, config); });
}

LossReport align_step(ModelState& state, OptState& opt, std::span<const Sample* const> batch,
                      const BatchText& text, const TrainConfig& config, double lr, Rng& rng) {
  if (config.stage != Stage::kAlign) throw std::invalid_argument("align_step: config stage is not align");
  return apply_step(state, opt, config, lr, Stage::kAlign,
                    [&](Bindings& bind) { return align_objective(bind, state, batch, text, config, rng); });
}

// ---- gradient check --------------------------------------------------------------

GradCheckResult grad_check(const std::function<ad::Var(Bindings&)>& loss, ParamStore params,
                           const GradCheckOptions& options) {
  GradMap analytic;
  {
    ad::Tape tape;
    Bindings bind(tape, params, true);
    tape.backward(loss(bind));
    analytic = bind.gradients();
  }
  auto evaluate = [&]() {
    ad::Tape tape(false);
    Bindings bind(tape, params, false);
    return loss(bind).scalar();
  };

  GradCheckResult result;
  Rng rng(options.seed);
  for (auto& [name, tensor] : params.tensors()) {
    std::vector<Index> coords(static_cast<std::size_t>(tensor.size()));
    std::iota(coords.begin(), coords.end(), Index{0});
    if (coords.size() > options.coords_per_tensor) {
      rng.shuffle(std::span<Index>(coords));
      coords.resize(options.coords_per_tensor);
    }
    const auto it = analytic.find(name);
    for (Index c : coords) {
      double& x = tensor.data()[c];
      const double orig = x;
      x = orig + options.step;
      const double plus = evaluate();
      x = orig - options.step;
      const double minus = evaluate();
      x = orig;
      const double numeric = (plus - minus) / (2.0 * options.step);
      const double a = it == analytic.end() ? 0.0 : it->second.data()[c];
      const double rel =
          std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), options.floor});
      if (rel > result.max_rel_error) {
        result.max_rel_error = rel;
        result.worst_tensor = name;
      }
      ++result.coords_checked;
    }
  }
  return result;
}

// ---- trainer ------------------------------------------------------------------------

std::int64_t total_steps(const TrainConfig& config, std::size_t dataset_size) {
  const auto per_epoch = static_cast<std::int64_t>(dataset_size / static_cast<std::size_t>(config.batch_size));
  const std::int64_t all = per_epoch * config.epochs;
  return config.max_steps > 0 ? std::min<std::int64_t>(all, config.max_steps) : all;
}

ModelState initial_state(const TrainConfig& config) {
  if (config.init_checkpoint.empty()) return model::init_model(config.model, config.seeds.init);
  const std::filesystem::path path(config.init_checkpoint);
  if (!std::filesystem::exists(path)) {
    throw std::filesystem::filesystem_error("stage-1 checkpoint not found", path,
                                            std::make_error_code(std::errc::no_such_file_or_directory));
  }
  return handoff_from_pretrain(load_checkpoint(path), config.model, config.seeds.init);
}

TrainResult train(const TrainConfig& config, const std::vector<Sample>& data, const Vocab& vocab,
                  ModelState initial, const TrainerPaths& paths,
                  const std::function<void(const LossReport&)>& on_step) {
  validate(config);
  std::vector<Sample> clips;
  clips.reserve(data.size());
  for (const Sample& s : data) clips.push_back(clip_sample(s, config.frames_per_clip));
  const std::size_t batch_size = static_cast<std::size_t>(config.batch_size);
  const auto per_epoch = static_cast<std::int64_t>(clips.size() / batch_size);
  if (per_epoch == 0) throw ConfigError("dataset smaller than one batch");
  const std::int64_t total = total_steps(config, clips.size());
  const auto warmup = static_cast<std::int64_t>(std::floor(config.warmup_fraction * static_cast<double>(total)));

  TrainResult result{std::move(initial), {}, {}, std::nullopt};
  std::ofstream log;
  if (!paths.log.empty()) {
    log.open(paths.log, std::ios::trunc);
    if (!log) throw std::runtime_error("cannot write step log " + paths.log.string());
  }
  const bool pretrain = config.stage == Stage::kPretrain;
  auto save = [&](const std::string& file) {
    if (!paths.checkpoints.empty()) save_checkpoint(paths.checkpoints / file, result.state, result.opt, config.stage);
  };

  // Stage 1 keeps the checkpoint ending the window of lowest mean rec.
  double window_sum = 0.0;
  int window_len = 0;
  auto close_window = [&]() {
    if (window_len == 0) return;
    const double mean = window_sum / window_len;
    if (!result.best_rec || mean < *result.best_rec) {
      result.best_rec = mean;
      save("best.iapt");
    }
    window_sum = 0.0;
    window_len = 0;
  };

  Rng dropout(mix_seed(config.seeds.dropout, kDropoutSalt));
  std::int64_t step = 0;
  for (int epoch = 0; epoch < config.epochs && step < total; ++epoch) {
    std::vector<std::size_t> order(clips.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng shuffler(mix_seed(mix_seed(config.seeds.data, kShuffleSalt), static_cast<std::uint64_t>(epoch)));
    shuffler.shuffle(std::span<std::size_t>(order));
    for (std::int64_t b = 0; b < per_epoch && step < total; ++b) {
      std::vector<const Sample*> batch;
      for (std::size_t k = 0; k < batch_size; ++k) batch.push_back(&clips[order[static_cast<std::size_t>(b) * batch_size + k]]);
      const double lr = cosine_lr(step, total, config.base_lr, warmup);
      LossReport report =
          pretrain ? pretrain_step(result.state, result.opt, batch, config, lr)
                   : align_step(result.state, result.opt, batch, batch_text(batch, vocab, config, epoch), config, lr,
                                dropout);
      ++step;
      if (log.is_open()) log << to_json_line(report) << '\n';
      if (on_step) on_step(report);
      result.reports.push_back(report);
      if (pretrain) {
        window_sum += report.rec;
        ++window_len;
        if (config.checkpoint_every > 0 && step % config.checkpoint_every == 0) close_window();
      }
    }
  }
  if (pretrain) close_window();
  save("final.iapt");
  return result;
}

}  // namespace instap
