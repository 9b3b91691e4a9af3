// Copyright 2026 The InstAP Desk Authors
// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <bit>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <json.hpp>
#include <numbers>

#include "fd_check.hpp"
#include "fixtures.hpp"
#include "instap/checkpoint.hpp"
#include "instap/training.hpp"

using namespace instap;
using namespace instap::testing;

namespace {

ParamStore scalar_store(const std::string& name, double value) {
  ParamStore p;
  p.set(name, Matrix::Constant(1, 1, value));
  return p;
}

GradMap scalar_grad(const std::string& name, double value) {
  GradMap g;
  g[name] = Matrix::Constant(1, 1, value);
  return g;
}

bool always(std::string_view) { return true; }

std::string slurp(const std::filesystem::path& p) {
  std::ifstream f(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

std::filesystem::path temp_dir(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / ("instap_training_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace

// ---- optimizer and schedule ---------------------------------------------------

TEST_CASE("adamw: one bias-corrected step moves p by lr") {
  ParamStore p = scalar_store("w", 1.0);
  OptState opt;
  adamw_update(p, scalar_grad("w", 1.0), opt, 0.1, {0.9, 0.999, 1e-8, 0.0}, always);
  CHECK(p.at("w")(0, 0) == doctest::Approx(0.9).epsilon(1e-7));
  CHECK(opt.step == 1);
  CHECK(opt.m.at("w")(0, 0) == doctest::Approx(0.1));
}

TEST_CASE("adamw: zero gradient and zero decay is the identity") {
  model::ModelConfig c = micro_model();
  ParamStore p = model::init_params(c, 5);
  const ParamStore before = p;
  GradMap g;
  for (const auto& [name, m] : p.tensors()) g[name] = Matrix::Zero(m.rows(), m.cols());
  OptState opt;
  for (int i = 0; i < 3; ++i) adamw_update(p, g, opt, 0.1, {0.9, 0.999, 1e-8, 0.0}, always);
  CHECK(p == before);
  CHECK(opt.step == 3);
}

TEST_CASE("adamw: pure decoupled decay") {
  ParamStore p = scalar_store("w", 2.0);
  OptState opt;
  adamw_update(p, scalar_grad("w", 0.0), opt, 0.1, {0.9, 0.999, 1e-8, 0.1}, always);
  CHECK(p.at("w")(0, 0) == doctest::Approx(2.0 * (1.0 - 0.01)).epsilon(1e-15));
}

TEST_CASE("adamw: decay filter, absent gradients and shape errors") {
  ParamStore p;
  p.set("a.w", Matrix::Constant(1, 1, 1.0));
  p.set("a.b", Matrix::Constant(1, 1, 1.0));
  p.set("c.w", Matrix::Constant(1, 1, 1.0));
  GradMap g;
  g["a.w"] = Matrix::Zero(1, 1);
  g["a.b"] = Matrix::Zero(1, 1);
  OptState opt;
  adamw_update(p, g, opt, 0.1, {0.9, 0.999, 1e-8, 0.1}, model::applies_weight_decay);
  CHECK(p.at("a.w")(0, 0) == doctest::Approx(0.99));
  CHECK(p.at("a.b")(0, 0) == 1.0);
  CHECK(p.at("c.w")(0, 0) == 1.0);
  CHECK_FALSE(opt.m.count("c.w"));

  GradMap bad;
  bad["a.w"] = Matrix::Zero(2, 1);
  CHECK_THROWS_AS(adamw_update(p, bad, opt, 0.1, {}, always), std::invalid_argument);
  GradMap unknown;
  unknown["nope"] = Matrix::Zero(1, 1);
  CHECK_THROWS_AS(adamw_update(p, unknown, opt, 0.1, {}, always), std::invalid_argument);
  CHECK(opt.step == 1);
}

TEST_CASE("cosine schedule endpoints") {
  const double base = 3e-4;
  CHECK(cosine_lr(0, 100, base, 10) == 0.0);
  CHECK(cosine_lr(5, 100, base, 10) == doctest::Approx(base / 2));
  CHECK(cosine_lr(10, 100, base, 10) == doctest::Approx(base));
  CHECK(cosine_lr(55, 100, base, 10) == doctest::Approx(base / 2));
  CHECK(cosine_lr(100, 100, base, 10) == 0.0);
  CHECK(cosine_lr(0, 100, base, 0) == doctest::Approx(base));
  double prev = base;
  for (int s = 10; s <= 100; ++s) {
    const double lr = cosine_lr(s, 100, base, 10);
    CHECK(lr <= prev + 1e-18);
    prev = lr;
  }
}

// ---- configuration ------------------------------------------------------------

TEST_CASE("train config JSON round trip and strictness") {
  TrainConfig c = micro_train_config(Stage::kAlign);
  c.loss_weights.vtm_inst = 0.25;
  c.init_checkpoint = "runs/p/final.iapt";
  const TrainConfig back = train_config_from_json_text(to_json_text(c));
  CHECK(back == c);

  CHECK(train_config_from_json_text("{}") == TrainConfig{});
  CHECK_THROWS_AS(train_config_from_json_text(R"({"stage":"align","batch_sise":4})"), ConfigError);
  CHECK_THROWS_AS(train_config_from_json_text(R"({"loss_weights":{"vtc":1,"vtx":2}})"), ConfigError);
  CHECK_THROWS_AS(train_config_from_json_text(R"({"model":{"dims":8}})"), ConfigError);
  CHECK_THROWS_AS(train_config_from_json_text(R"({"mask_ratio":1.0})"), ConfigError);
  CHECK_THROWS_AS(train_config_from_json_text(R"({"stage":"align","batch_size":1})"), ConfigError);
  CHECK_THROWS_AS(train_config_from_json_text(R"({"epochs":0})"), ConfigError);
  CHECK_THROWS_AS(train_config_from_json_text(R"({"epochs":"two"})"), ConfigError);
  CHECK_THROWS_AS(train_config_from_json_text(R"({"stage":"finetune"})"), ConfigError);
  CHECK_THROWS_AS(train_config_from_json_text("{"), ConfigError);
  CHECK(train_config_from_json_text(R"({"stage":"pretrain","batch_size":1})").batch_size == 1);
}

TEST_CASE("data config strictness") {
  const DataConfig d = data_config_from_json_text(R"({"scenes":4,"scene":{"frames":2}})");
  CHECK(d.scenes == 4);
  CHECK(d.scene.frames == 2);
  CHECK_THROWS_AS(data_config_from_json_text(R"({"scene":{"colour":1}})"), ConfigError);
  CHECK(content_hash("abc") == content_hash("abc"));
  CHECK(content_hash("abc") != content_hash("abd"));
  CHECK(content_hash("abc").size() == 16);
}

// ---- batch preparation --------------------------------------------------------

TEST_CASE("clip_sample keeps evenly spaced frames and re-indexes boxes") {
  SceneProgram p;
  p.seed = 3;
  p.frames = 8;
  p.height = 32;
  p.width = 32;
  p.objects = {{ShapeType::kSquare, 0, 6, 2, 2, 1, 1}};
  const Sample s = render_sample(p);
  const Sample c = clip_sample(s, 4);
  REQUIRE(c.frames.frames() == 4);
  REQUIRE(c.instances.size() == 1);
  REQUIRE(c.instances[0].trajectory.size() == 4);
  for (int i = 0; i < 4; ++i) {
    const Box& b = c.instances[0].trajectory[static_cast<std::size_t>(i)];
    CHECK(b.t == i);
    CHECK(b == Box{i, s.instances[0].trajectory[static_cast<std::size_t>(2 * i)].x,
                   s.instances[0].trajectory[static_cast<std::size_t>(2 * i)].y, 6, 6});
    CHECK(c.frames.at(i, 10, 10, 0) == s.frames.at(2 * i, 10, 10, 0));
  }
  CHECK(validate_sample(c).empty());
  CHECK(clip_sample(s, 8) == s);
  CHECK(clip_sample(s, 16) == s);
}

TEST_CASE("caption text: cycling versus full caption") {
  const std::vector<std::string> cap = {"a red circle", "it moves left"};
  CHECK(caption_text(cap, 0, 7, false) == "a red circle it moves left");
  const std::string e0 = caption_text(cap, 0, 7, true);
  const std::string e1 = caption_text(cap, 1, 7, true);
  CHECK(e0 != e1);
  CHECK(caption_text(cap, 2, 7, true) == e0);
  CHECK(caption_stream_seed(1, "a", -1) != caption_stream_seed(1, "a", 0));
  CHECK(caption_stream_seed(1, "a", 0) != caption_stream_seed(1, "b", 0));
}

// ---- objectives -----------------------------------------------------------------

TEST_CASE("stage filters") {
  CHECK(trainable_in_stage("student.block0.mlp.w1", Stage::kPretrain));
  CHECK_FALSE(trainable_in_stage("text.tok", Stage::kPretrain));
  CHECK(trainable_in_stage("text.tok", Stage::kAlign));
  CHECK(trainable_in_stage("temp.log_tau_inst", Stage::kAlign));
  CHECK_FALSE(trainable_in_stage("head.ground.w1", Stage::kAlign));
  CHECK_FALSE(trainable_in_stage("teacher.patch.w", Stage::kAlign));
}

TEST_CASE("self-distillation fixed point: student = teacher, rho = 0") {
  TrainConfig cfg = micro_train_config(Stage::kPretrain);
  cfg.mask_ratio = 0.0;
  model::ModelState state = model::init_model(cfg.model, 4);
  model::copy_teacher_into_student(state);
  const auto samples = micro_samples();
  const auto batch = pointers(samples);
  ad::Tape tape;
  Bindings bind(tape, state.params, true);
  const Objective obj = pretrain_objective(bind, state, batch, cfg);
  CHECK(obj.components.rec < 1e-20);
  tape.backward(obj.total);
  double worst = 0.0;
  for (const auto& [name, g] : bind.gradients()) worst = std::max(worst, g.cwiseAbs().maxCoeff());
  CHECK(worst < 1e-9);
}

TEST_CASE("pretrain step trains only the student and leaves the teacher intact") {
  TrainConfig cfg = micro_train_config(Stage::kPretrain);
  model::ModelState state = model::init_model(cfg.model, 4);
  const model::ModelState before = state;
  OptState opt;
  const auto samples = micro_samples();
  const LossReport r = pretrain_step(state, opt, pointers(samples), cfg, 1e-2);
  CHECK(r.step == 1);
  CHECK(r.total == r.rec);
  CHECK(r.rec > 0.0);
  CHECK(state.teacher == before.teacher);
  for (const auto& [name, m] : state.params.tensors()) {
    if (name.starts_with("student.")) {
      CHECK_MESSAGE(m != before.params.at(name), name);
    } else {
      CHECK_MESSAGE(m == before.params.at(name), name);
    }
  }
  Rng rng(1);
  CHECK_THROWS_AS(align_step(state, opt, pointers(samples), BatchText{}, cfg, 1e-2, rng), std::invalid_argument);
}

TEST_CASE("align objective: instance weights zero equals the global-only path") {
  TrainConfig cfg = micro_train_config(Stage::kAlign);
  cfg.loss_weights.vtc_inst = cfg.loss_weights.vtm_inst = cfg.loss_weights.mlm_inst = 0.0;
  const auto samples = micro_samples(2, 1);
  std::vector<Sample> stripped = samples;
  for (Sample& s : stripped) s.instances.clear();

  model::ModelState a = model::init_model(cfg.model, 9);
  model::ModelState b = a;
  OptState oa;
  OptState ob;
  Rng ra(5);
  Rng rb(5);
  const LossReport rep_a =
      align_step(a, oa, pointers(samples), batch_text(pointers(samples), micro_vocab(), cfg, 0), cfg, 1e-2, ra);
  const LossReport rep_b =
      align_step(b, ob, pointers(stripped), batch_text(pointers(stripped), micro_vocab(), cfg, 0), cfg, 1e-2, rb);
  CHECK(rep_a.inst_total == 0.0);
  CHECK(rep_a == rep_b);
  CHECK(a.params == b.params);
  CHECK(oa == ob);
}

TEST_CASE("align objective: degenerate batch reports zero instance losses") {
  TrainConfig cfg = micro_train_config(Stage::kAlign);
  auto samples = micro_samples(2, 1);
  for (Sample& s : samples) s.instances.clear();
  const model::ModelState state = model::init_model(cfg.model, 9);
  ad::Tape tape;
  Bindings bind(tape, state.params, true);
  Rng rng(1);
  const auto batch = pointers(samples);
  const Objective obj = align_objective(bind, state, batch, batch_text(batch, micro_vocab(), cfg, 0), cfg, rng);
  tape.backward(obj.total);
  CHECK(obj.components.vtc_inst == 0.0);
  CHECK(obj.components.vtm_inst == 0.0);
  CHECK(obj.components.mlm_inst == 0.0);
  const GradMap g = bind.gradients();
  CHECK_FALSE(g.count("temp.log_tau_inst"));
  CHECK_FALSE(g.count("xattn.wq"));
  CHECK(obj.components.vtc > 0.0);
}

TEST_CASE("align objective: components, shared modules and total") {
  TrainConfig cfg = micro_train_config(Stage::kAlign);
  cfg.keep_rec_in_align = true;
  const auto samples = micro_samples(2, 1);
  const auto batch = pointers(samples);
  const model::ModelState state = model::init_model(cfg.model, 9);
  ad::Tape tape;
  Bindings bind(tape, state.params, true);
  Rng rng(1);
  const Objective obj = align_objective(bind, state, batch, batch_text(batch, micro_vocab(), cfg, 0), cfg, rng);
  const LossReport r = total_loss(obj.components, cfg.loss_weights);
  CHECK(obj.total.scalar() == doctest::Approx(r.total).epsilon(1e-12));
  for (double v : {r.rec, r.vtc, r.vtm, r.mlm, r.vtc_inst, r.vtm_inst, r.mlm_inst}) CHECK(v > 0.0);
  tape.backward(obj.total);
  const GradMap g = bind.gradients();
  for (const char* name : {"temp.log_tau", "temp.log_tau_inst", "xattn.wq", "head.match.w", "head.mlm.w",
                           "fusion.block0.cross.wq", "student.patch.w", "text.tok", "proj.video"}) {
    CHECK_MESSAGE(g.count(name), name);
  }
  CHECK_FALSE(g.count("head.ground.w1"));

  cfg.independent_inst_temperature = false;
  ad::Tape tape2;
  Bindings bind2(tape2, state.params, true);
  Rng rng2(1);
  const Objective shared = align_objective(bind2, state, batch, batch_text(batch, micro_vocab(), cfg, 0), cfg, rng2);
  tape2.backward(shared.total);
  CHECK_FALSE(bind2.gradients().count("temp.log_tau_inst"));
}

TEST_CASE("identical captions: VTC text gradients differ only through the video rows") {
  // With every t_j equal, d/dt_j VTC = (mean_i v_i + Σ_i q_i v_i − 2 v_j) / (Bτ),
  // so g_j − g_k = −2 (v_j − v_k) / (Bτ).
  Rng rng(3);
  const Index n = 4;
  const double tau = 0.5;
  ad::Tape tape;
  const ad::Var v = ad::l2_normalize_rows(tape.constant(random_matrix(rng, n, 6)));
  Matrix row = random_matrix(rng, 1, 6);
  row /= row.norm();
  const ad::Var t = tape.leaf(row.replicate(n, 1));
  tape.backward(vtc_loss(v, t, tape.scalar(tau)));
  const Matrix& g = t.grad();
  for (Index j = 1; j < n; ++j) {
    const Matrix expected = -2.0 * (v.value().row(j) - v.value().row(0)) / (static_cast<double>(n) * tau);
    CHECK((g.row(j) - g.row(0) - expected).cwiseAbs().maxCoeff() < 1e-12);
  }
}

// ---- gradient check ---------------------------------------------------------------

TEST_CASE("grad_check: quadratic is exact") {
  // Central differences are exact for a quadratic at any step, so a wide
  // step leaves only rounding in f(x ± h).
  ParamStore p;
  Rng rng(1);
  p.set("a", Matrix::Constant(3, 5, 0.5) + random_matrix(rng, 3, 5, 0.1).cwiseAbs());
  p.set("b", Matrix::Constant(1, 300, 0.5) + random_matrix(rng, 1, 300, 0.1).cwiseAbs());
  const auto loss = [](Bindings& bind) { return ad::sum_squares(bind("a")) + ad::sum_squares(bind("b")); };
  GradCheckOptions opt;
  opt.step = 1e-2;
  const GradCheckResult r = grad_check(loss, p, opt);
  CHECK(r.max_rel_error < 1e-9);
  CHECK(r.coords_checked == 15 + 200);
}

TEST_CASE("grad_check: detects a 1% corrupted gradient") {
  ParamStore p;
  Rng rng(2);
  p.set("a", random_matrix(rng, 4, 4));
  const auto loss = [](Bindings& bind) {
    const ad::Var x = bind("a");
    const ad::Var y = bind.tape().record(x.value(), {x}, [x](const Matrix& g) { x.tape().accumulate(x, 1.01 * g); });
    return ad::sum_squares(y);
  };
  const GradCheckResult r = grad_check(loss, p);
  CHECK(r.max_rel_error > 1e-3);
  CHECK(r.worst_tensor == "a");
}

TEST_CASE("grad_check: full align objective on a micro batch") {
  TrainConfig cfg = micro_train_config(Stage::kAlign);
  cfg.keep_rec_in_align = true;
  const auto samples = micro_samples(2, 1);
  const auto batch = pointers(samples);
  const BatchText text = batch_text(batch, micro_vocab(), cfg, 0);
  const model::ModelState state = model::init_model(cfg.model, 13);
  ParamStore trainable;
  for (const auto& [name, m] : state.params.tensors()) {
    if (trainable_in_stage(name, Stage::kAlign)) trainable.set(name, m);
  }
  const auto loss = [&](Bindings& bind) {
    Rng rng(77);
    return align_objective(bind, state, batch, text, cfg, rng).total;
  };
  GradCheckOptions opt;
  opt.coords_per_tensor = 24;
  const GradCheckResult r = grad_check(loss, trainable, opt);
  CHECK_MESSAGE(r.max_rel_error < 1e-4, r.worst_tensor);
}

// ---- checkpoints ------------------------------------------------------------------

TEST_CASE("checkpoint: bit-exact round trip and byte-identical resave") {
  const auto dir = temp_dir("ckpt");
  TrainConfig cfg = micro_train_config(Stage::kPretrain);
  model::ModelState state = model::init_model(cfg.model, 21);
  OptState opt;
  const auto samples = micro_samples();
  pretrain_step(state, opt, pointers(samples), cfg, 1e-2);
  state.params.at("student.patch.b")(0, 0) = std::nextafter(1.0 / 3.0, 1.0);

  save_checkpoint(dir / "a.iapt", state, opt, Stage::kPretrain);
  const Checkpoint ck = load_checkpoint(dir / "a.iapt");
  CHECK(ck.state.params == state.params);
  CHECK(ck.state.teacher == state.teacher);
  CHECK(ck.state.config == state.config);
  CHECK(ck.opt == opt);
  CHECK(ck.stage == Stage::kPretrain);
  save_checkpoint(dir / "b.iapt", ck.state, ck.opt, ck.stage);
  CHECK(slurp(dir / "a.iapt") == slurp(dir / "b.iapt"));
  CHECK_FALSE(std::filesystem::exists(dir / "a.iapt.tmp"));
  const std::string bytes = slurp(dir / "a.iapt");
  CHECK(bytes.substr(0, 4) == "IAPT");
  CHECK(static_cast<unsigned char>(bytes[4]) == kCheckpointVersion);
}

TEST_CASE("checkpoint: corrupt files are rejected without touching the caller's state") {
  const auto dir = temp_dir("corrupt");
  const model::ModelState state = model::init_model(micro_model(), 21);
  save_checkpoint(dir / "ok.iapt", state, {}, Stage::kAlign);
  const std::string bytes = slurp(dir / "ok.iapt");
  auto write = [&](const std::string& name, const std::string& content) {
    std::ofstream(dir / name, std::ios::binary) << content;
    return dir / name;
  };

  Checkpoint held = load_checkpoint(dir / "ok.iapt");
  const Checkpoint snapshot = held;
  CHECK_THROWS_AS(held = load_checkpoint(write("trunc.iapt", bytes.substr(0, bytes.size() - 9))), CheckpointError);
  CHECK(held.state.params == snapshot.state.params);
  CHECK_THROWS_AS(load_checkpoint(write("short.iapt", bytes.substr(0, 10))), CheckpointError);
  std::string magic = bytes;
  magic[0] = 'X';
  CHECK_THROWS_AS(load_checkpoint(write("magic.iapt", magic)), CheckpointError);
  std::string version = bytes;
  version[4] = 9;
  CHECK_THROWS_WITH_AS(load_checkpoint(write("version.iapt", version)), doctest::Contains("version 9"),
                       CheckpointError);
  CHECK_THROWS_AS(load_checkpoint(dir / "absent.iapt"), CheckpointError);

  model::ModelState partial = state;
  partial.params.tensors().erase("head.mlm.b");
  partial.params.tensors().erase("xattn.wq");
  save_checkpoint(dir / "partial.iapt", partial, {}, Stage::kAlign);
  CHECK_THROWS_WITH_AS(load_checkpoint(dir / "partial.iapt"), doctest::Contains("head.mlm.b, xattn.wq"),
                       CheckpointError);
}

TEST_CASE("checkpoint: f32 tensors are widened on load") {
  const auto dir = temp_dir("f32");
  const model::ModelState state = model::init_model(micro_model(), 23);
  save_checkpoint(dir / "f64.iapt", state, {}, Stage::kAlign);
  const std::string bytes = slurp(dir / "f64.iapt");

  // Re-encode every tensor as little-endian f32 with fresh offsets.
  const auto le = [&](std::size_t at, int n) {
    std::uint64_t v = 0;
    for (int i = n - 1; i >= 0; --i) v = (v << 8) | static_cast<unsigned char>(bytes[at + static_cast<std::size_t>(i)]);
    return v;
  };
  const std::size_t manifest_bytes = le(8, 8);
  nlohmann::json manifest = nlohmann::json::parse(bytes.substr(16, manifest_bytes));
  std::string payload;
  for (auto& [name, entry] : manifest.items()) {
    if (name == "__meta__") continue;
    const std::size_t count = entry["shape"][0].get<std::size_t>() * entry["shape"][1].get<std::size_t>();
    const std::size_t from = 16 + manifest_bytes + entry["offset"].get<std::size_t>();
    entry["dtype"] = "f32";
    entry["offset"] = payload.size();
    for (std::size_t i = 0; i < count; ++i) {
      const auto f = static_cast<float>(std::bit_cast<double>(le(from + 8 * i, 8)));
      const auto u = std::bit_cast<std::uint32_t>(f);
      for (int b = 0; b < 4; ++b) payload.push_back(static_cast<char>((u >> (8 * b)) & 0xFF));
    }
  }
  const std::string text = manifest.dump();
  std::string out = bytes.substr(0, 8);
  for (int b = 0; b < 8; ++b) out.push_back(static_cast<char>((text.size() >> (8 * b)) & 0xFF));
  out += text + payload;
  std::ofstream(dir / "f32.iapt", std::ios::binary) << out;

  const Checkpoint ck = load_checkpoint(dir / "f32.iapt");
  for (const auto& [name, m] : state.params.tensors()) {
    const Matrix narrowed = m.cast<float>().cast<double>();
    REQUIRE(ck.state.params.at(name) == narrowed);
  }
}

TEST_CASE("stage hand-off copies exactly the video encoder") {
  const model::ModelConfig c = micro_model();
  Checkpoint stage1;
  stage1.state = model::init_model(c, 100);
  for (auto& [name, m] : stage1.state.params.tensors()) m.array() += 0.5;
  const model::ModelState fresh = model::init_model(c, 7);
  const model::ModelState s2 = handoff_from_pretrain(stage1, c, 7);
  const auto encoder = model::video_encoder_names(s2.params);
  CHECK(!encoder.empty());
  for (const auto& [name, m] : s2.params.tensors()) {
    const bool is_encoder = std::find(encoder.begin(), encoder.end(), name) != encoder.end();
    CHECK(is_encoder == name.starts_with("student."));
    CHECK_MESSAGE(m == (is_encoder ? stage1.state.params.at(name) : fresh.params.at(name)), name);
  }
  CHECK(s2.teacher == fresh.teacher);

  model::ModelConfig wider = c;
  wider.dim = 12;
  CHECK_THROWS_AS(handoff_from_pretrain(stage1, wider, 7), CheckpointError);
}

// ---- trainer ------------------------------------------------------------------------

TEST_CASE("trainer: deterministic pretrain with logs and checkpoints") {
  TrainConfig cfg = micro_train_config(Stage::kPretrain);
  cfg.epochs = 3;
  cfg.checkpoint_every = 2;
  std::vector<Sample> data = micro_samples();
  const auto more = micro_samples(1, 3);
  data.insert(data.end(), more.begin(), more.end());
  data[2].sample_id = "x2";
  data[3].sample_id = "x3";
  CHECK(total_steps(cfg, data.size()) == 6);

  const auto dir_a = temp_dir("run_a");
  const auto dir_b = temp_dir("run_b");
  const model::ModelState init = initial_state(cfg);
  const TrainResult a = train(cfg, data, micro_vocab(), init, {dir_a / "steps.jsonl", dir_a});
  const TrainResult b = train(cfg, data, micro_vocab(), init, {dir_b / "steps.jsonl", dir_b});
  REQUIRE(a.reports.size() == 6);
  CHECK(a.reports == b.reports);
  CHECK(a.state.params == b.state.params);
  CHECK(a.state.teacher == init.teacher);
  CHECK(slurp(dir_a / "final.iapt") == slurp(dir_b / "final.iapt"));
  CHECK(slurp(dir_a / "steps.jsonl") == slurp(dir_b / "steps.jsonl"));
  CHECK(std::filesystem::exists(dir_a / "best.iapt"));
  REQUIRE(a.best_rec.has_value());
  double best = 1e300;
  for (int w = 0; w < 3; ++w) best = std::min(best, (a.reports[2 * w].rec + a.reports[2 * w + 1].rec) / 2);
  CHECK(*a.best_rec == best);

  std::ifstream log(dir_a / "steps.jsonl");
  std::string line;
  std::size_t i = 0;
  while (std::getline(log, line)) CHECK(loss_report_from_json(line) == a.reports[i++]);
  CHECK(i == 6);
  CHECK(a.reports.front().lr == cfg.base_lr);
  CHECK(a.reports[1].step == 2);

  cfg.max_steps = 4;
  CHECK(train(cfg, data, micro_vocab(), init).reports.size() == 4);
  cfg.batch_size = 5;
  CHECK_THROWS_AS(train(cfg, data, micro_vocab(), init), ConfigError);
}

TEST_CASE("trainer: align is reproducible and starts from the hand-off") {
  const auto dir = temp_dir("align");
  TrainConfig pre = micro_train_config(Stage::kPretrain);
  pre.epochs = 1;
  const auto data = micro_samples(2, 1);
  const TrainResult stage1 = train(pre, data, micro_vocab(), initial_state(pre), {{}, dir});

  TrainConfig cfg = micro_train_config(Stage::kAlign);
  cfg.epochs = 2;
  cfg.init_checkpoint = (dir / "final.iapt").string();
  const model::ModelState init = initial_state(cfg);
  for (const std::string& name : model::video_encoder_names(init.params)) {
    CHECK(init.params.at(name) == stage1.state.params.at(name));
  }
  const TrainResult a = train(cfg, data, micro_vocab(), init);
  const TrainResult b = train(cfg, data, micro_vocab(), init);
  CHECK(a.reports == b.reports);
  CHECK(a.state.params == b.state.params);
  CHECK(a.reports.back().inst_total > 0.0);
  CHECK(a.state.params.at("head.ground.w1") == init.params.at("head.ground.w1"));

  cfg.init_checkpoint = (dir / "missing.iapt").string();
  CHECK_THROWS_WITH_AS(initial_state(cfg), doctest::Contains("missing.iapt"), std::filesystem::filesystem_error);
}
