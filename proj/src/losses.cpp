// Copyright 2026 The InstAP Desk Authors
// SPDX-License-Identifier: Apache-2.0

#include "instap/losses.hpp"

#include <algorithm>
#include <cmath>
#include <json.hpp>
#include <limits>
#include <stdexcept>

#include "instap/geometry.hpp"

namespace instap {

namespace {

void require(bool ok, const char* what) {
  if (!ok) throw std::invalid_argument(what);
}

bool is_allowed(const std::vector<bool>* allowed, Index n, Index i, Index j) {
  return allowed == nullptr || (*allowed)[static_cast<std::size_t>(i * n + j)];
}

void require_positive_tau(const ad::Var& tau) {
  require(tau.rows() == 1 && tau.cols() == 1, "temperature must be 1x1");
  require(tau.scalar() > 0.0, "temperature must be positive");
}

}  // namespace

// ---- kernels ----------------------------------------------------------------

ad::Var info_nce_rows(const ad::Var& logits, const std::vector<bool>* allowed) {
  const Index n = logits.rows();
  require(n > 0 && logits.cols() == n, "info_nce_rows: logits must be square");
  if (allowed) require(static_cast<Index>(allowed->size()) == n * n, "info_nce_rows: mask size");
  const Matrix& l = logits.value();
  Matrix probs = Matrix::Zero(n, n);
  double loss = 0.0;
  for (Index i = 0; i < n; ++i) {
    require(is_allowed(allowed, n, i, i), "info_nce_rows: diagonal must be allowed");
    double mx = -std::numeric_limits<double>::infinity();
    for (Index j = 0; j < n; ++j) {
      if (is_allowed(allowed, n, i, j)) mx = std::max(mx, l(i, j));
    }
    double total = 0.0;
    for (Index j = 0; j < n; ++j) {
      if (is_allowed(allowed, n, i, j)) total += (probs(i, j) = std::exp(l(i, j) - mx));
    }
    probs.row(i) /= total;
    loss += mx + std::log(total) - l(i, i);
  }
  const double inv_n = 1.0 / static_cast<double>(n);
  return logits.tape().record(Matrix::Constant(1, 1, loss * inv_n), {logits},
                              [logits, probs, inv_n](const Matrix& g) {
                                Matrix d = probs;
                                d.diagonal().array() -= 1.0;
                                logits.tape().accumulate(logits, d * (g(0, 0) * inv_n));
                              });
}

ad::Var cross_entropy_rows(const ad::Var& logits, std::span<const int> targets) {
  const Index n = logits.rows();
  const Index v = logits.cols();
  require(n > 0 && static_cast<Index>(targets.size()) == n, "cross_entropy_rows: target count");
  Matrix grad = Matrix::Zero(n, v);
  double loss = 0.0;
  for (Index r = 0; r < n; ++r) {
    const int target = targets[static_cast<std::size_t>(r)];
    require(target >= 0 && target < v, "cross_entropy_rows: target outside vocabulary");
    const double mx = logits.value().row(r).maxCoeff();
    Eigen::RowVectorXd p = (logits.value().row(r).array() - mx).exp().matrix();
    p /= p.sum();
    const double pt = p(target);
    if (pt > kProbClamp) {
      loss -= std::log(pt);
      grad.row(r) = p;
      grad(r, target) -= 1.0;
    } else {
      loss -= std::log(kProbClamp);
    }
  }
  const double inv_n = 1.0 / static_cast<double>(n);
  return logits.tape().record(Matrix::Constant(1, 1, loss * inv_n), {logits},
                              [logits, grad, inv_n](const Matrix& g) {
                                logits.tape().accumulate(logits, grad * (g(0, 0) * inv_n));
                              });
}

ad::Var binary_cross_entropy(const ad::Var& probs, std::span<const int> labels) {
  const Index n = probs.rows();
  require(n > 0 && probs.cols() == 1 && static_cast<Index>(labels.size()) == n,
          "binary_cross_entropy: expects n x 1 probabilities and n labels");
  Matrix grad = Matrix::Zero(n, 1);
  double loss = 0.0;
  for (Index r = 0; r < n; ++r) {
    const int y = labels[static_cast<std::size_t>(r)];
    require(y == 0 || y == 1, "binary_cross_entropy: labels must be 0 or 1");
    const double raw = probs.value()(r, 0);
    const double p = std::clamp(raw, kProbClamp, 1.0 - kProbClamp);
    const bool clamped = p != raw;
    if (y == 1) {
      loss -= std::log(p);
      if (!clamped) grad(r, 0) = -1.0 / p;
    } else {
      loss -= std::log(1.0 - p);
      if (!clamped) grad(r, 0) = 1.0 / (1.0 - p);
    }
  }
  const double inv_n = 1.0 / static_cast<double>(n);
  return probs.tape().record(Matrix::Constant(1, 1, loss * inv_n), {probs},
                             [probs, grad, inv_n](const Matrix& g) {
                               probs.tape().accumulate(probs, grad * (g(0, 0) * inv_n));
                             });
}

ad::Var box_regression_loss(const ad::Var& pred, const Matrix& target) {
  const Index n = pred.rows();
  require(n > 0 && pred.cols() == 4 && target.rows() == n && target.cols() == 4,
          "box_regression_loss: expects n x 4 predictions and targets");
  Matrix grad(n, 4);
  double loss = 0.0;
  for (Index r = 0; r < n; ++r) {
    const auto p = pred.value().row(r);
    const auto t = target.row(r);
    // L1 term, mean over the four coordinates.
    for (Index c = 0; c < 4; ++c) {
      const double diff = p(c) - t(c);
      loss += std::abs(diff) / 4.0;
      grad(r, c) = (diff > 0.0 ? 1.0 : (diff < 0.0 ? -1.0 : 0.0)) / 4.0;
    }
    // GIoU term: G = I/U + U/E − 1 with U = Ap + At − I.
    const Rect a = rect_from_center(p(0), p(1), p(2), p(3));
    const Rect b = rect_from_center(t(0), t(1), t(2), t(3));
    require(a.width() > 0 && a.height() > 0 && b.width() > 0 && b.height() > 0,
            "box_regression_loss: boxes must have positive extent");
    const double iw_raw = std::min(a.x2, b.x2) - std::max(a.x1, b.x1);
    const double ih_raw = std::min(a.y2, b.y2) - std::max(a.y1, b.y1);
    const bool overlap = iw_raw > 0.0 && ih_raw > 0.0;
    const double iw = overlap ? iw_raw : 0.0;
    const double ih = overlap ? ih_raw : 0.0;
    const double inter = iw * ih;
    const double area_a = a.area();
    const double uni = area_a + b.area() - inter;
    const double ew = std::max(a.x2, b.x2) - std::min(a.x1, b.x1);
    const double eh = std::max(a.y2, b.y2) - std::min(a.y1, b.y1);
    const double enc = ew * eh;
    const double g_iou = inter / uni + uni / enc - 1.0;
    loss += 1.0 - g_iou;

    const double dG_dI = (uni + inter) / (uni * uni) - 1.0 / enc;
    const double dG_dA = -inter / (uni * uni) + 1.0 / enc;
    const double dG_dE = -uni / (enc * enc);
    // Gradients of G w.r.t. the predicted corners.
    double gx1 = 0.0, gx2 = 0.0, gy1 = 0.0, gy2 = 0.0;
    if (overlap) {
      const double dIw = dG_dI * ih;
      const double dIh = dG_dI * iw;
      if (a.x2 < b.x2) gx2 += dIw;
      if (a.x1 > b.x1) gx1 -= dIw;
      if (a.y2 < b.y2) gy2 += dIh;
      if (a.y1 > b.y1) gy1 -= dIh;
    }
    const double aw = a.width();
    const double ah = a.height();
    gx2 += dG_dA * ah;
    gx1 -= dG_dA * ah;
    gy2 += dG_dA * aw;
    gy1 -= dG_dA * aw;
    if (a.x2 > b.x2) gx2 += dG_dE * eh;
    if (a.x1 < b.x1) gx1 -= dG_dE * eh;
    if (a.y2 > b.y2) gy2 += dG_dE * ew;
    if (a.y1 < b.y1) gy1 -= dG_dE * ew;
    // Loss uses −G; corners are cx ∓ w/2, cy ∓ h/2.
    grad(r, 0) -= gx1 + gx2;
    grad(r, 1) -= gy1 + gy2;
    grad(r, 2) -= 0.5 * (gx2 - gx1);
    grad(r, 3) -= 0.5 * (gy2 - gy1);
  }
  const double inv_n = 1.0 / static_cast<double>(n);
  return pred.tape().record(Matrix::Constant(1, 1, loss * inv_n), {pred},
                            [pred, grad, inv_n](const Matrix& g) {
                              pred.tape().accumulate(pred, grad * (g(0, 0) * inv_n));
                            });
}

// ---- objectives -------------------------------------------------------------

ad::Var rec_loss(const ad::Var& hs, const ad::Var& ht, std::span<const Index> omega) {
  require(!omega.empty(), "rec_loss: visible set is empty");
  require(hs.rows() == static_cast<Index>(omega.size()) && hs.cols() == ht.cols(),
          "rec_loss: student rows must match the visible set");
  for (Index l : omega) require(l >= 0 && l < ht.rows(), "rec_loss: visible index out of range");
  const ad::Var target = ad::gather_rows(ht, omega);
  const ad::Var diff = ad::l2_normalize_rows(hs) - ad::l2_normalize_rows(target);
  return ad::sum_squares(diff) * (1.0 / static_cast<double>(omega.size()));
}

ad::Var vtc_loss(const ad::Var& v, const ad::Var& t, const ad::Var& tau) {
  require_positive_tau(tau);
  require(v.rows() == t.rows() && v.cols() == t.cols(), "vtc_loss: embedding shapes differ");
  const ad::Var logits = ad::div_by(ad::matmul_nt(v, t), tau);
  return info_nce_rows(logits) + info_nce_rows(ad::transpose(logits));
}

std::vector<bool> same_source_mask(std::span<const std::uint64_t> source_ids) {
  const std::size_t n = source_ids.size();
  std::vector<bool> allowed(n * n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) allowed[i * n + j] = i == j || source_ids[i] != source_ids[j];
  }
  return allowed;
}

ad::Var instance_vtc_loss(const ad::Var& z, const ad::Var& s,
                          std::span<const std::uint64_t> source_ids, const ad::Var& tau) {
  require_positive_tau(tau);
  require(z.rows() == s.rows() && z.cols() == s.cols(), "instance_vtc_loss: embedding shapes differ");
  require(static_cast<Index>(source_ids.size()) == z.rows(), "instance_vtc_loss: one source id per instance");
  // α is symmetric, so the same mask serves both directions.
  const std::vector<bool> allowed = same_source_mask(source_ids);
  const ad::Var logits = ad::div_by(ad::matmul_nt(z, s), tau);
  return info_nce_rows(logits, &allowed) + info_nce_rows(ad::transpose(logits), &allowed);
}

namespace {

Index draw_negative(Rng& rng, const Matrix& sim, Index fixed, bool row_mode, double tau,
                    const std::vector<bool>* eligible) {
  const Index n = sim.rows();
  double mx = -std::numeric_limits<double>::infinity();
  auto candidate = [&](Index other) {
    if (other == fixed) return false;
    const Index i = row_mode ? fixed : other;
    const Index j = row_mode ? other : fixed;
    return is_allowed(eligible, n, i, j);
  };
  auto score = [&](Index other) { return row_mode ? sim(fixed, other) : sim(other, fixed); };
  for (Index o = 0; o < n; ++o) {
    if (candidate(o)) mx = std::max(mx, score(o) / tau);
  }
  if (mx == -std::numeric_limits<double>::infinity()) return -1;
  std::vector<double> w(static_cast<std::size_t>(n), 0.0);
  double total = 0.0;
  for (Index o = 0; o < n; ++o) {
    if (candidate(o)) total += (w[static_cast<std::size_t>(o)] = std::exp(score(o) / tau - mx));
  }
  const double u = rng.uniform() * total;
  double acc = 0.0;
  Index last = -1;
  for (Index o = 0; o < n; ++o) {
    if (w[static_cast<std::size_t>(o)] <= 0.0) continue;
    acc += w[static_cast<std::size_t>(o)];
    last = o;
    if (u < acc) return o;
  }
  return last;
}

}  // namespace

HardNegatives mine_hard_negatives(const Matrix& sim, double tau, Rng& rng,
                                  const std::vector<bool>* eligible) {
  const Index n = sim.rows();
  require(sim.cols() == n, "mine_hard_negatives: similarity must be square");
  require(n >= 2, "mine_hard_negatives: need at least two pairs");
  require(tau > 0.0, "mine_hard_negatives: temperature must be positive");
  if (eligible) require(static_cast<Index>(eligible->size()) == n * n, "mine_hard_negatives: mask size");
  HardNegatives out;
  for (Index i = 0; i < n; ++i) out.text_for_video.push_back(draw_negative(rng, sim, i, true, tau, eligible));
  for (Index j = 0; j < n; ++j) out.video_for_text.push_back(draw_negative(rng, sim, j, false, tau, eligible));
  return out;
}

ad::Var vtm_loss(const ad::Var& logits, std::span<const int> labels) {
  require(logits.cols() == 2, "vtm_loss: logits must have two columns");
  return binary_cross_entropy(ad::slice_cols(ad::softmax_rows(logits), 1, 1), labels);
}

MaskedText mask_text_tokens(std::span<const int> ids, double ratio, Rng& rng) {
  require(ratio >= 0.0 && ratio <= 1.0, "mask_text_tokens: ratio must lie in [0, 1]");
  std::vector<Index> maskable;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (!Vocab::is_special(ids[i])) maskable.push_back(static_cast<Index>(i));
  }
  require(!maskable.empty(), "mask_text_tokens: no maskable token");
  MaskedText out;
  out.ids.assign(ids.begin(), ids.end());
  for (Index i : maskable) {
    if (rng.uniform() < ratio) out.positions.push_back(i);
  }
  if (out.positions.empty()) {
    out.positions.push_back(maskable[static_cast<std::size_t>(rng.below(maskable.size()))]);
    out.forced = true;
  }
  for (Index i : out.positions) {
    out.targets.push_back(out.ids[static_cast<std::size_t>(i)]);
    out.ids[static_cast<std::size_t>(i)] = Vocab::kMask;
  }
  return out;
}

ad::Var mlm_loss(std::span<const ad::Var> logits, std::span<const MaskedText> masks) {
  require(!logits.empty() && logits.size() == masks.size(), "mlm_loss: one mask set per sequence");
  ad::Var total;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    require(!masks[i].positions.empty(), "mlm_loss: empty mask set");
    const ad::Var term = cross_entropy_rows(ad::gather_rows(logits[i], masks[i].positions), masks[i].targets);
    total = total.valid() ? total + term : term;
  }
  return total * (1.0 / static_cast<double>(logits.size()));
}

// ---- composition ------------------------------------------------------------

LossReport total_loss(const LossComponents& c, const LossWeights& w) {
  for (double lambda : {w.vtc, w.vtm, w.mlm, w.vtc_inst, w.vtm_inst, w.mlm_inst}) {
    require(std::isfinite(lambda) && lambda >= 0.0, "loss weights must be finite and non-negative");
  }
  for (double v : {c.rec, c.vtc, c.vtm, c.mlm, c.vtc_inst, c.vtm_inst, c.mlm_inst}) {
    require(std::isfinite(v), "loss components must be finite");
  }
  LossReport r;
  r.rec = c.rec;
  r.vtc = c.vtc;
  r.vtm = c.vtm;
  r.mlm = c.mlm;
  r.vtc_inst = c.vtc_inst;
  r.vtm_inst = c.vtm_inst;
  r.mlm_inst = c.mlm_inst;
  r.global_total = w.vtc * c.vtc + w.vtm * c.vtm + w.mlm * c.mlm;
  r.inst_total = w.vtc_inst * c.vtc_inst + w.vtm_inst * c.vtm_inst + w.mlm_inst * c.mlm_inst;
  r.total = c.rec + r.global_total + r.inst_total;
  return r;
}

std::string to_json_line(const LossReport& r) {
  nlohmann::ordered_json j;
  j["step"] = r.step;
  j["lr"] = r.lr;
  j["rec"] = r.rec;
  j["vtc"] = r.vtc;
  j["vtm"] = r.vtm;
  j["mlm"] = r.mlm;
  j["vtc_inst"] = r.vtc_inst;
  j["vtm_inst"] = r.vtm_inst;
  j["mlm_inst"] = r.mlm_inst;
  j["global_total"] = r.global_total;
  j["inst_total"] = r.inst_total;
  j["total"] = r.total;
  return j.dump();
}

LossReport loss_report_from_json(const std::string& line) {
  const auto j = nlohmann::json::parse(line);
  LossReport r;
  r.step = j.at("step").get<std::int64_t>();
  r.lr = j.at("lr").get<double>();
  r.rec = j.at("rec").get<double>();
  r.vtc = j.at("vtc").get<double>();
  r.vtm = j.at("vtm").get<double>();
  r.mlm = j.at("mlm").get<double>();
  r.vtc_inst = j.at("vtc_inst").get<double>();
  r.vtm_inst = j.at("vtm_inst").get<double>();
  r.mlm_inst = j.at("mlm_inst").get<double>();
  r.global_total = j.at("global_total").get<double>();
  r.inst_total = j.at("inst_total").get<double>();
  r.total = j.at("total").get<double>();
  return r;
}

}  // namespace instap
