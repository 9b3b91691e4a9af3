// Copyright 2026 The InstAP Desk Authors
// SPDX-License-Identifier: Apache-2.0

#include "instap/eval.hpp"

#include <algorithm>
#include <cmath>
#include <json.hpp>
#include <map>
#include <numeric>
#include <set>
#include <sstream>
#include <stdexcept>

#include "instap/losses.hpp"
#include "instap/optim.hpp"
#include "instap/parallel.hpp"
#include "instap/training.hpp"

namespace instap {

using nlohmann::json;
using model::Encoded;
using model::Modality;
using model::ModelState;

namespace {

void check_permutation(std::span<const Index> gt, Index n) {
  if (static_cast<Index>(gt.size()) != n) throw std::invalid_argument("retrieval_metrics: gt size mismatch");
  std::vector<bool> seen(static_cast<std::size_t>(n), false);
  for (Index c : gt) {
    if (c < 0 || c >= n || seen[static_cast<std::size_t>(c)]) {
      throw std::invalid_argument("retrieval_metrics: gt must be a permutation");
    }
    seen[static_cast<std::size_t>(c)] = true;
  }
}

std::vector<Sample> clip_all(std::span<const Sample> samples, int frames) {
  std::vector<Sample> out;
  out.reserve(samples.size());
  for (const Sample& s : samples) out.push_back(clip_sample(s, frames));
  return out;
}

Matrix project_rows(const ModelState& state, const Matrix& raw, Modality which) {
  ad::Tape tape(false);
  Bindings bind(tape, state.params, false);
  return model::project(bind, tape.constant(raw), which).value();
}

Matrix stack(const std::vector<Matrix>& rows) {
  Matrix out(static_cast<Index>(rows.size()), rows.empty() ? 0 : rows.front().cols());
  for (std::size_t i = 0; i < rows.size(); ++i) out.row(static_cast<Index>(i)) = rows[i].row(0);
  return out;
}

double match_probability(const ModelState& state, const Matrix& visual, std::span<const int> ids) {
  ad::Tape tape(false);
  Bindings bind(tape, state.params, false);
  const Matrix logits =
      model::match_logits(bind, model::fuse(bind, tape.constant(visual), ids, state.config, false).cls).value();
  const double m = logits.maxCoeff();
  const double e0 = std::exp(logits(0, 0) - m);
  const double e1 = std::exp(logits(0, 1) - m);
  return e1 / (e0 + e1);
}

/// Top-k candidates of one score vector under the ranking rule.
std::vector<Index> top_k(std::span<const double> scores, int k) {
  std::vector<Index> order(scores.size());
  std::iota(order.begin(), order.end(), Index{0});
  std::stable_sort(order.begin(), order.end(), [&](Index a, Index b) {
    return scores[static_cast<std::size_t>(a)] > scores[static_cast<std::size_t>(b)];
  });
  order.resize(std::min(order.size(), static_cast<std::size_t>(k)));
  return order;
}

RetrievalResult evaluate_pools(const ModelState& state, const Embeddings& emb, const EvalOptions& options,
                               const std::string& split) {
  const Index n = emb.visual.rows();
  const Index pool = options.pool_size > 0 && options.pool_size < n ? options.pool_size : n;
  const Index pools = n / pool;
  RetrievalResult out;
  out.split = split;
  out.similarity = emb.text * emb.visual.transpose();
  out.pool_size = pool;
  out.pools = static_cast<int>(pools);
  for (Index p = 0; p < pools; ++p) {
    const Index at = p * pool;
    const Matrix sim = out.similarity.block(at, at, pool, pool);
    Matrix t2v = sim;
    Matrix v2t = sim;
    if (options.rerank_top_k > 0) {
      std::map<std::pair<Index, Index>, double> cache;
      auto prob = [&](Index q, Index c) {
        const auto key = std::make_pair(q, c);
        auto it = cache.find(key);
        if (it == cache.end()) {
          it = cache.emplace(key, match_probability(state, emb.visual_tokens[static_cast<std::size_t>(at + c)],
                                                    emb.ids[static_cast<std::size_t>(at + q)]))
                   .first;
        }
        return it->second;
      };
      // Re-ranked entries sit above every cosine similarity (≤ 1).
      for (Index q = 0; q < pool; ++q) {
        const std::vector<double> row(sim.row(q).data(), sim.row(q).data() + pool);
        for (Index c : top_k(row, options.rerank_top_k)) t2v(q, c) = 2.0 + prob(q, c);
      }
      for (Index c = 0; c < pool; ++c) {
        std::vector<double> col(static_cast<std::size_t>(pool));
        for (Index q = 0; q < pool; ++q) col[static_cast<std::size_t>(q)] = sim(q, c);
        for (Index q : top_k(col, options.rerank_top_k)) v2t(q, c) = 2.0 + prob(q, c);
      }
    }
    std::vector<Index> gt(static_cast<std::size_t>(pool));
    std::iota(gt.begin(), gt.end(), Index{0});
    const RetrievalResult r = retrieval_metrics(t2v, v2t, gt);
    for (std::size_t k = 0; k < kRecallKs.size(); ++k) {
      out.t2v[k] += r.t2v[k] / static_cast<double>(pools);
      out.v2t[k] += r.v2t[k] / static_cast<double>(pools);
    }
    out.k_exceeds_pool = r.k_exceeds_pool;
  }
  double sum = 0.0;
  for (std::size_t k = 0; k < kRecallKs.size(); ++k) sum += out.t2v[k] + out.v2t[k];
  out.mean_recall = sum / 6.0;
  return out;
}

json metrics_json(const RetrievalResult& r) {
  json m = json::object();
  for (std::size_t k = 0; k < kRecallKs.size(); ++k) {
    m["t2v_r" + std::to_string(kRecallKs[k])] = 100.0 * r.t2v[k];
    m["v2t_r" + std::to_string(kRecallKs[k])] = 100.0 * r.v2t[k];
  }
  m["mean_recall"] = 100.0 * r.mean_recall;
  return m;
}

std::string format_double(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

}  // namespace

std::size_t rank_of(std::span<const double> scores, std::size_t gt) {
  const double s = scores[gt];
  std::size_t rank = 0;
  for (std::size_t c = 0; c < scores.size(); ++c) {
    if (scores[c] > s || (scores[c] == s && c < gt)) ++rank;
  }
  return rank;
}

RetrievalResult retrieval_metrics(const Matrix& sim, std::span<const Index> gt) {
  return retrieval_metrics(sim, sim, gt);
}

RetrievalResult retrieval_metrics(const Matrix& t2v_scores, const Matrix& v2t_scores, std::span<const Index> gt) {
  const Index n = t2v_scores.rows();
  if (n == 0 || t2v_scores.cols() != n || v2t_scores.rows() != n || v2t_scores.cols() != n) {
    throw std::invalid_argument("retrieval_metrics: expected non-empty square score matrices");
  }
  check_permutation(gt, n);
  std::vector<Index> inverse(static_cast<std::size_t>(n));
  for (Index q = 0; q < n; ++q) inverse[static_cast<std::size_t>(gt[static_cast<std::size_t>(q)])] = q;

  RetrievalResult out;
  out.similarity = t2v_scores;
  out.pool_size = n;
  std::vector<double> col(static_cast<std::size_t>(n));
  for (Index q = 0; q < n; ++q) {
    const std::span<const double> row(t2v_scores.row(q).data(), static_cast<std::size_t>(n));
    const std::size_t r = rank_of(row, static_cast<std::size_t>(gt[static_cast<std::size_t>(q)]));
    for (std::size_t k = 0; k < kRecallKs.size(); ++k) out.t2v[k] += r < static_cast<std::size_t>(kRecallKs[k]) ? 1.0 : 0.0;
  }
  for (Index c = 0; c < n; ++c) {
    for (Index q = 0; q < n; ++q) col[static_cast<std::size_t>(q)] = v2t_scores(q, c);
    const std::size_t r = rank_of(col, static_cast<std::size_t>(inverse[static_cast<std::size_t>(c)]));
    for (std::size_t k = 0; k < kRecallKs.size(); ++k) out.v2t[k] += r < static_cast<std::size_t>(kRecallKs[k]) ? 1.0 : 0.0;
  }
  double sum = 0.0;
  for (std::size_t k = 0; k < kRecallKs.size(); ++k) {
    out.t2v[k] /= static_cast<double>(n);
    out.v2t[k] /= static_cast<double>(n);
    sum += out.t2v[k] + out.v2t[k];
    if (kRecallKs[k] > n) out.k_exceeds_pool = true;
  }
  out.mean_recall = sum / 6.0;
  return out;
}

Embeddings global_embeddings(const ModelState& state, std::span<const Sample> samples, const Vocab& vocab,
                             const EvalOptions& options) {
  const std::vector<Sample> clips = clip_all(samples, options.frames_per_clip);
  const std::size_t n = clips.size();
  std::vector<Matrix> v_raw(n);
  std::vector<Matrix> t_raw(n);
  Embeddings out;
  out.ids.resize(n);
  out.visual_tokens.resize(n);
  parallel_for(static_cast<int>(n), options.threads, [&](int idx) {
    const auto i = static_cast<std::size_t>(idx);
    ad::Tape tape(false);
    Bindings bind(tape, state.params, false);
    const Encoded v = model::encode_video(bind, "student", model::patchify(bind, "student", clips[i].frames, state.config),
                                          state.config);
    out.ids[i] = tokenize(clips[i].global_caption.at(0), vocab, state.config.text_len);
    v_raw[i] = v.pooled.value();
    out.visual_tokens[i] = v.tokens.data.value();
    t_raw[i] = model::encode_text(bind, out.ids[i], state.config).pooled.value();
  });
  out.visual = project_rows(state, stack(v_raw), Modality::kVisual);
  out.text = project_rows(state, stack(t_raw), Modality::kText);
  for (const Sample& s : clips) out.sources.push_back(s.source_id);
  return out;
}

Embeddings instance_embeddings(const ModelState& state, std::span<const Sample> samples, const Vocab& vocab,
                               const EvalOptions& options) {
  const std::vector<Sample> clips = clip_all(samples, options.frames_per_clip);
  const model::ModelConfig& cfg = state.config;
  struct PerSample {
    std::vector<Matrix> z;
    std::vector<Matrix> s;
    std::vector<Matrix> c;
    std::vector<std::vector<int>> ids;
  };
  std::vector<PerSample> per(clips.size());
  parallel_for(static_cast<int>(clips.size()), options.threads, [&](int idx) {
    const Sample& sample = clips[static_cast<std::size_t>(idx)];
    PerSample& p = per[static_cast<std::size_t>(idx)];
    ad::Tape tape(false);
    Bindings bind(tape, state.params, false);
    const Encoded scene =
        model::encode_video(bind, "student", model::patchify(bind, "student", sample.frames, cfg), cfg);
    for (const InstanceAnnotation& inst : sample.instances) {
      const FrameStack crop = model::crop_instance(sample, inst, cfg.crop_h, cfg.crop_w);
      const Encoded c = model::encode_video(bind, "student", model::patchify(bind, "student", crop, cfg), cfg);
      p.z.push_back(model::cross_attend_pool(bind, c.tokens, scene.tokens, cfg).pooled.value());
      p.c.push_back(c.pooled.value());
      p.ids.push_back(tokenize(inst.caption.at(0), vocab, cfg.text_len));
      p.s.push_back(model::encode_text(bind, p.ids.back(), cfg).pooled.value());
    }
  });
  Embeddings out;
  std::vector<Matrix> z_raw;
  std::vector<Matrix> s_raw;
  for (std::size_t i = 0; i < clips.size(); ++i) {
    for (std::size_t k = 0; k < per[i].z.size(); ++k) {
      z_raw.push_back(per[i].z[k]);
      s_raw.push_back(per[i].s[k]);
      out.visual_tokens.push_back(per[i].c[k]);
      out.ids.push_back(per[i].ids[k]);
      out.sources.push_back(clips[i].source_id);
    }
  }
  if (z_raw.empty()) return out;
  out.visual = project_rows(state, stack(z_raw), Modality::kVisual);
  out.text = project_rows(state, stack(s_raw), Modality::kText);
  return out;
}

RetrievalResult eval_global_retrieval(const ModelState& state, std::span<const Sample> samples, const Vocab& vocab,
                                      const EvalOptions& options) {
  if (samples.empty()) throw std::invalid_argument("eval_global_retrieval: empty dataset");
  return evaluate_pools(state, global_embeddings(state, samples, vocab, options), options, "global");
}

RetrievalResult eval_instance_retrieval(const ModelState& state, std::span<const Sample> samples,
                                        const Vocab& vocab, const EvalOptions& options) {
  std::set<std::uint64_t> sources;
  for (const Sample& s : samples) {
    if (!s.instances.empty()) sources.insert(s.source_id);
  }
  if (sources.size() < 2) {
    throw std::invalid_argument("eval_instance_retrieval: instances must come from at least two sources");
  }
  return evaluate_pools(state, instance_embeddings(state, samples, vocab, options), options, "instance");
}

std::string retrieval_json(const RetrievalResult& r, std::uint64_t seed, const std::string& checkpoint) {
  const json j{{"split", r.split},   {"pool_size", r.pool_size},         {"pools", r.pools},
               {"metrics", metrics_json(r)}, {"k_exceeds_pool", r.k_exceeds_pool}, {"seed", seed},
               {"checkpoint", checkpoint}};
  return j.dump(2);
}

std::string retrieval_csv(std::span<const std::string> json_documents, std::span<const std::string> methods) {
  if (json_documents.size() != methods.size()) throw std::invalid_argument("retrieval_csv: one method per document");
  std::string out = "method,split,pool_size";
  for (const char* dir : {"t2v", "v2t"}) {
    for (int k : kRecallKs) out += std::string(",") + dir + "_r" + std::to_string(k);
  }
  out += ",mean_recall\n";
  for (std::size_t i = 0; i < json_documents.size(); ++i) {
    const json j = json::parse(json_documents[i]);
    const json& m = j.at("metrics");
    out += methods[i] + "," + j.at("split").get<std::string>() + "," + std::to_string(j.at("pool_size").get<Index>());
    for (const char* dir : {"t2v", "v2t"}) {
      for (int k : kRecallKs) out += "," + format_double(m.at(std::string(dir) + "_r" + std::to_string(k)).get<double>());
    }
    out += "," + format_double(m.at("mean_recall").get<double>()) + "\n";
  }
  return out;
}

// ---- grounding -------------------------------------------------------------

namespace {

struct GroundingItem {
  std::size_t sample = 0;
  std::size_t instance = 0;
};

std::vector<GroundingItem> grounding_items(std::span<const Sample> samples) {
  std::vector<GroundingItem> items;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    for (std::size_t k = 0; k < samples[i].instances.size(); ++k) items.push_back({i, k});
  }
  if (items.empty()) throw std::invalid_argument("grounding: dataset has no instances");
  return items;
}

Matrix grounding_targets(const Sample& sample, const InstanceAnnotation& inst) {
  Matrix t(static_cast<Index>(inst.trajectory.size()), 4);
  for (std::size_t f = 0; f < inst.trajectory.size(); ++f) {
    const NormBox nb = normalise(inst.trajectory[f], sample.frames.width(), sample.frames.height());
    t.row(static_cast<Index>(f)) << nb.cx, nb.cy, nb.w, nb.h;
  }
  return t;
}

/// Fused [CLS] rows (one per annotated frame) for every instance of a sample.
std::vector<ad::Var> grounding_features(Bindings& bind, const ModelState& state, const Sample& sample,
                                        std::span<const std::size_t> instances, const Vocab& vocab) {
  const model::ModelConfig& cfg = state.config;
  const Encoded video =
      model::encode_video(bind, "student", model::patchify(bind, "student", sample.frames, cfg), cfg);
  std::vector<ad::Var> out;
  for (std::size_t k : instances) {
    const InstanceAnnotation& inst = sample.instances.at(k);
    const std::vector<int> ids = tokenize(inst.caption.at(0), vocab, cfg.text_len);
    std::vector<ad::Var> rows;
    for (const Box& b : inst.trajectory) {
      rows.push_back(model::fuse(bind, model::frame_tokens(video.tokens, b.t).data, ids, cfg, false).cls);
    }
    out.push_back(ad::concat_rows(rows));
  }
  return out;
}

/// Mean over instances of the per-instance frame-summed box loss.
ad::Var instance_box_loss(Bindings& bind, const std::vector<ad::Var>& features, const std::vector<Matrix>& targets) {
  ad::Var total = bind.tape().scalar(0.0);
  for (std::size_t k = 0; k < features.size(); ++k) {
    const ad::Var pred = model::ground_box(bind, features[k]);
    total = total + scale(box_regression_loss(pred, targets[k]), static_cast<double>(targets[k].rows()));
  }
  return scale(total, 1.0 / static_cast<double>(features.size()));
}

}  // namespace

ad::Var grounding_loss(Bindings& bind, const ModelState& state, const Sample& sample,
                       std::span<const std::size_t> instances, const Vocab& vocab) {
  if (instances.empty()) throw std::invalid_argument("grounding_loss: no instances");
  std::vector<Matrix> targets;
  for (std::size_t k : instances) targets.push_back(grounding_targets(sample, sample.instances.at(k)));
  return instance_box_loss(bind, grounding_features(bind, state, sample, instances, vocab), targets);
}

std::vector<double> grounding_finetune(ModelState& state, std::span<const Sample> samples, const Vocab& vocab,
                                       const GroundingConfig& config) {
  const std::vector<Sample> clips = clip_all(samples, config.frames_per_clip);
  const std::vector<GroundingItem> items = grounding_items(clips);
  std::vector<Matrix> targets;
  for (const GroundingItem& it : items) targets.push_back(grounding_targets(clips[it.sample], clips[it.sample].instances[it.instance]));

  // Frozen backbone: the fused features never change, so compute them once.
  std::vector<Matrix> frozen(items.size());
  if (!config.unfrozen) {
    std::vector<std::vector<std::size_t>> by_sample(clips.size());
    std::vector<std::vector<std::size_t>> item_of(clips.size());
    for (std::size_t n = 0; n < items.size(); ++n) {
      by_sample[items[n].sample].push_back(items[n].instance);
      item_of[items[n].sample].push_back(n);
    }
    parallel_for(static_cast<int>(clips.size()), config.threads, [&](int idx) {
      const auto i = static_cast<std::size_t>(idx);
      if (by_sample[i].empty()) return;
      ad::Tape tape(false);
      Bindings bind(tape, state.params, false);
      const auto feats = grounding_features(bind, state, clips[i], by_sample[i], vocab);
      for (std::size_t k = 0; k < feats.size(); ++k) frozen[item_of[i][k]] = feats[k].value();
    });
  }

  const std::size_t batch = std::min(items.size(), static_cast<std::size_t>(std::max(1, config.batch_size)));
  Rng rng(mix_seed(config.seed, fnv1a("grounding")));
  std::vector<std::size_t> order(items.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::size_t cursor = order.size();
  OptState opt;
  const AdamWConfig adam{0.9, 0.999, 1e-8, config.weight_decay};
  std::vector<double> losses;
  for (int step = 0; step < config.steps; ++step) {
    std::vector<std::size_t> chosen;
    while (chosen.size() < batch) {
      if (cursor == order.size()) {
        rng.shuffle(std::span<std::size_t>(order));
        cursor = 0;
      }
      chosen.push_back(order[cursor++]);
    }
    std::sort(chosen.begin(), chosen.end());
    ad::Tape tape;
    Bindings bind(tape, state.params, true);
    std::vector<ad::Var> feats;
    std::vector<Matrix> tgt;
    if (config.unfrozen) {
      std::size_t at = 0;
      while (at < chosen.size()) {
        const std::size_t sample = items[chosen[at]].sample;
        std::vector<std::size_t> insts;
        for (; at < chosen.size() && items[chosen[at]].sample == sample; ++at) {
          insts.push_back(items[chosen[at]].instance);
          tgt.push_back(targets[chosen[at]]);
        }
        for (const ad::Var& f : grounding_features(bind, state, clips[sample], insts, vocab)) feats.push_back(f);
      }
    } else {
      for (std::size_t n : chosen) {
        feats.push_back(tape.constant(frozen[n]));
        tgt.push_back(targets[n]);
      }
    }
    const ad::Var loss = instance_box_loss(bind, feats, tgt);
    tape.backward(loss);
    GradMap grads = bind.gradients();
    if (!config.unfrozen) std::erase_if(grads, [](const auto& kv) { return !kv.first.starts_with("head.ground."); });
    std::erase_if(grads, [](const auto& kv) { return kv.first.starts_with("teacher."); });
    const double lr = cosine_lr(step, config.steps, config.lr, 0);
    adamw_update(state.params, grads, opt, lr, adam, model::applies_weight_decay);
    clamp_temperatures(state.params);
    losses.push_back(loss.scalar());
  }
  return losses;
}

std::vector<GroundingPrediction> grounding_predict(const ModelState& state, std::span<const Sample> samples,
                                                   const Vocab& vocab, const GroundingConfig& config) {
  const std::vector<Sample> clips = clip_all(samples, config.frames_per_clip);
  std::vector<std::vector<GroundingPrediction>> per(clips.size());
  parallel_for(static_cast<int>(clips.size()), config.threads, [&](int idx) {
    const Sample& s = clips[static_cast<std::size_t>(idx)];
    if (s.instances.empty()) return;
    std::vector<std::size_t> all(s.instances.size());
    std::iota(all.begin(), all.end(), std::size_t{0});
    ad::Tape tape(false);
    Bindings bind(tape, state.params, false);
    const auto feats = grounding_features(bind, state, s, all, vocab);
    for (std::size_t k = 0; k < all.size(); ++k) {
      const InstanceAnnotation& inst = s.instances[k];
      const Matrix pred = model::ground_box(bind, feats[k]).value();
      GroundingPrediction gp;
      gp.sample_id = s.sample_id;
      gp.instance_id = inst.instance_id;
      const double w = s.frames.width();
      const double h = s.frames.height();
      for (std::size_t f = 0; f < inst.trajectory.size(); ++f) {
        FramePrediction fp;
        const auto r = static_cast<Index>(f);
        fp.predicted = {pred(r, 0), pred(r, 1), pred(r, 2), pred(r, 3)};
        fp.target = inst.trajectory[f];
        fp.iou = iou(rect_from_center(pred(r, 0) * w, pred(r, 1) * h, pred(r, 2) * w, pred(r, 3) * h),
                     to_rect(fp.target));
        gp.score += fp.iou;
        gp.frames.push_back(fp);
      }
      gp.score /= static_cast<double>(gp.frames.size());
      per[static_cast<std::size_t>(idx)].push_back(std::move(gp));
    }
  });
  std::vector<GroundingPrediction> out;
  for (auto& p : per) {
    for (auto& g : p) out.push_back(std::move(g));
  }
  return out;
}

std::vector<double> grounding_metrics(std::span<const double> scores, std::span<const double> thresholds) {
  if (scores.empty()) throw std::invalid_argument("grounding_metrics: no predictions");
  std::vector<double> out;
  for (double t : thresholds) {
    const auto hits = std::count_if(scores.begin(), scores.end(), [t](double s) { return s >= t; });
    out.push_back(static_cast<double>(hits) / static_cast<double>(scores.size()));
  }
  return out;
}

std::string grounding_json(std::span<const GroundingPrediction> preds, std::span<const double> thresholds,
                           std::uint64_t seed, const std::string& checkpoint) {
  std::vector<double> scores;
  for (const GroundingPrediction& p : preds) scores.push_back(p.score);
  const std::vector<double> acc = grounding_metrics(scores, thresholds);
  json metrics = json::object();
  for (std::size_t i = 0; i < thresholds.size(); ++i) {
    metrics["iou@" + std::to_string(static_cast<int>(std::lround(thresholds[i] * 100)))] = 100.0 * acc[i];
  }
  metrics["mean_iou"] = 100.0 * std::accumulate(scores.begin(), scores.end(), 0.0) / static_cast<double>(scores.size());
  const json j{{"split", "grounding"}, {"instances", preds.size()}, {"metrics", metrics}, {"seed", seed},
               {"checkpoint", checkpoint}};
  return j.dump(2);
}

}  // namespace instap
