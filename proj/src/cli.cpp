// Copyright 2026 The InstAP Desk Authors
// SPDX-License-Identifier: Apache-2.0

#include "instap/cli.hpp"

#include <CLI11.hpp>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <json.hpp>
#include <optional>
#include <sstream>
#include <system_error>
#include <vector>

#include "instap/checkpoint.hpp"
#include "instap/config.hpp"
#include "instap/dataset_io.hpp"
#include "instap/eval.hpp"
#include "instap/masking.hpp"
#include "instap/shapes_world.hpp"
#include "instap/training.hpp"

#ifndef INSTAP_GIT_DESCRIBE
#define INSTAP_GIT_DESCRIBE "unknown"
#endif

namespace instap::cli {

namespace fs = std::filesystem;
using nlohmann::json;

const char* git_describe() { return INSTAP_GIT_DESCRIBE; }

namespace {

using Clock = std::chrono::steady_clock;

fs::path normalised(const std::string& p) {
  fs::path out = fs::path(p).lexically_normal();
  if (out.filename().empty() && out.has_parent_path()) out = out.parent_path();
  return out;
}

void require_file(const fs::path& path, const std::string& what) {
  if (!fs::exists(path)) throw MissingFileError(what + " not found: " + path.string());
}

std::string read_text(const fs::path& path, const std::string& what) {
  require_file(path, what);
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + what + ": " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
  if (!out) throw std::runtime_error("failed writing " + path.string());
}

/// An output directory built under "<out>.partial" and renamed on commit.
class StagedDir {
 public:
  StagedDir(const std::string& out, bool force)
      : out_(normalised(out)), staging_(out_.string() + ".partial") {
    if (fs::exists(out_) && !force) throw OutputExistsError("output exists: " + out_.string());
    if (out_.has_parent_path()) fs::create_directories(out_.parent_path());
    fs::remove_all(staging_);
    fs::create_directories(staging_);
  }
  StagedDir(const StagedDir&) = delete;
  StagedDir& operator=(const StagedDir&) = delete;
  ~StagedDir() {
    if (!committed_) {
      std::error_code ec;
      fs::remove_all(staging_, ec);
    }
  }

  const fs::path& path() const { return staging_; }

  void commit() {
    if (fs::exists(out_)) fs::remove_all(out_);
    fs::rename(staging_, out_);
    committed_ = true;
  }

 private:
  fs::path out_;
  fs::path staging_;
  bool committed_ = false;
};

/// A single output file written beside itself and renamed on commit.
void commit_file(const std::string& out, const std::string& text, bool force) {
  const fs::path path = normalised(out);
  if (fs::exists(path) && !force) throw OutputExistsError("output exists: " + path.string());
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  const fs::path tmp = path.string() + ".partial";
  write_text(tmp, text);
  fs::rename(tmp, path);
}

struct RunManifest {
  std::string command;
  std::vector<std::string> argv;
  json config;
  json seeds;
  Clock::time_point start = Clock::now();

  std::string text() const {
    const std::string canonical = config.dump();
    const double wall = std::chrono::duration<double>(Clock::now() - start).count();
    const json j{{"command", command},     {"argv", argv},
                 {"config", config},       {"config_hash", content_hash(canonical)},
                 {"seeds", seeds},         {"git_describe", git_describe()},
                 {"wall_time_s", wall}};
    return j.dump(2) + "\n";
  }
};

Vocab dataset_vocab(const fs::path& data_dir) {
  const fs::path p = data_dir / "vocab.txt";
  return fs::exists(p) ? Vocab::read(p) : shapes_world_vocab();
}

std::vector<Sample> load_dataset(const fs::path& dir) {
  require_file(dir / "manifest.jsonl", "dataset manifest");
  return read_dataset(dir);
}

Checkpoint load_checkpoint_file(const std::string& path) {
  require_file(path, "checkpoint");
  return load_checkpoint(path);
}

void check_vocab(const model::ModelConfig& model, const Vocab& vocab) {
  if (model.vocab_size != vocab.size()) {
    throw ConfigError("model vocab_size " + std::to_string(model.vocab_size) + " does not match dataset vocabulary of " +
                      std::to_string(vocab.size()) + " words");
  }
}

json parse_object(const std::string& text) { return json::parse(text); }

// ---- gen-data ----------------------------------------------------------------

struct GenDataArgs {
  std::string config;
  std::optional<int> scenes;
  std::optional<int> test_scenes;
  std::optional<int> zero_scenes;
  std::uint64_t seed = 0;
  int threads = 1;
  std::string out;
  bool force = false;
};

void gen_data(const GenDataArgs& a, RunManifest& manifest) {
  DataConfig cfg;
  if (!a.config.empty()) cfg = data_config_from_json_text(read_text(a.config, "config"));
  if (a.scenes) cfg.scenes = *a.scenes;
  if (a.test_scenes) cfg.test_scenes = *a.test_scenes;
  if (a.zero_scenes) cfg.zero_scenes = *a.zero_scenes;
  if (cfg.scenes < 1 || cfg.test_scenes < 0 || cfg.zero_scenes < 0) {
    throw ConfigError("scene counts must be scenes >= 1, test_scenes >= 0, zero_scenes >= 0");
  }
  const std::string cfg_text = to_json_text(cfg);
  manifest.config = parse_object(cfg_text);
  manifest.seeds = {{"data", a.seed}};

  StagedDir out(a.out, a.force);
  const Vocab vocab = shapes_world_vocab();
  const std::pair<Split, int> splits[] = {
      {Split::kTrain, cfg.scenes}, {Split::kTest, cfg.test_scenes}, {Split::kZero, cfg.zero_scenes}};
  for (const auto& [split, count] : splits) {
    if (count == 0) continue;
    const fs::path dir = out.path() / std::string(to_string(split));
    write_dataset(generate_split(split, count, a.seed, cfg.scene, a.threads), dir);
    vocab.write(dir / "vocab.txt");
  }
  write_text(out.path() / "data_config.json", cfg_text);
  write_text(out.path() / "run.json", manifest.text());
  out.commit();
}

// ---- pretrain / align -----------------------------------------------------------

struct TrainArgs {
  std::string config;
  std::string data;
  std::string out;
  std::string init;
  std::optional<std::uint64_t> seed_data;
  std::optional<std::uint64_t> seed_init;
  std::optional<std::uint64_t> seed_dropout;
  bool force = false;
};

TrainConfig resolve_train_config(const TrainArgs& a, Stage stage, const Vocab& vocab) {
  TrainConfig cfg;
  cfg.stage = stage;
  if (!a.config.empty()) {
    const std::string text = read_text(a.config, "config");
    cfg = train_config_from_json_text(text);
    const json raw = json::parse(text);
    if (!raw.contains("stage")) {
      cfg.stage = stage;
    } else if (cfg.stage != stage) {
      throw ConfigError("config stage '" + std::string(to_string(cfg.stage)) + "' does not match command '" +
                        std::string(to_string(stage)) + "'");
    }
  }
  if (a.seed_data) cfg.seeds.data = *a.seed_data;
  if (a.seed_init) cfg.seeds.init = *a.seed_init;
  if (a.seed_dropout) cfg.seeds.dropout = *a.seed_dropout;
  if (!a.init.empty()) {
    if (stage != Stage::kAlign) throw ConfigError("--init applies only to align");
    cfg.init_checkpoint = a.init;
  }
  if (cfg.model.vocab_size == 0) cfg.model.vocab_size = vocab.size();
  check_vocab(cfg.model, vocab);
  validate(cfg);
  return cfg;
}

void train_command(const TrainArgs& a, Stage stage, RunManifest& manifest) {
  const fs::path data_dir = normalised(a.data);
  require_file(data_dir / "manifest.jsonl", "dataset manifest");
  const Vocab vocab = dataset_vocab(data_dir);
  const TrainConfig cfg = resolve_train_config(a, stage, vocab);
  if (!cfg.init_checkpoint.empty()) require_file(cfg.init_checkpoint, "stage-1 checkpoint");

  const std::string cfg_text = to_json_text(cfg);
  manifest.config = parse_object(cfg_text);
  manifest.seeds = {{"data", cfg.seeds.data}, {"init", cfg.seeds.init}, {"dropout", cfg.seeds.dropout}};

  const std::vector<Sample> data = read_dataset(data_dir);
  model::ModelState initial = initial_state(cfg);
  StagedDir out(a.out, a.force);
  write_text(out.path() / "config.json", cfg_text);
  train(cfg, data, vocab, std::move(initial), TrainerPaths{out.path() / "steps.jsonl", out.path()});
  write_text(out.path() / "run.json", manifest.text());
  out.commit();
}

// ---- eval-retrieval -----------------------------------------------------------

struct RetrievalArgs {
  std::string checkpoint;
  std::string data;
  std::string split = "both";
  int pool_size = 0;
  int rerank_top_k = 0;
  int frames_per_clip = 4;
  int threads = 1;
  std::uint64_t seed = 0;
  std::string out;
  bool force = false;
};

void eval_retrieval(const RetrievalArgs& a, RunManifest& manifest) {
  if (a.pool_size < 0 || a.rerank_top_k < 0 || a.frames_per_clip < 1 || a.threads < 1) {
    throw ConfigError("pool size and re-rank k must be >= 0; frames per clip and threads >= 1");
  }
  const Checkpoint ck = load_checkpoint_file(a.checkpoint);
  const fs::path data_dir = normalised(a.data);
  const std::vector<Sample> data = load_dataset(data_dir);
  const Vocab vocab = dataset_vocab(data_dir);
  check_vocab(ck.state.config, vocab);
  const EvalOptions opts{a.frames_per_clip, a.pool_size, a.rerank_top_k, a.threads};
  manifest.config = {{"checkpoint", a.checkpoint},
                     {"data", a.data},
                     {"split", a.split},
                     {"pool_size", a.pool_size},
                     {"rerank_top_k", a.rerank_top_k},
                     {"frames_per_clip", a.frames_per_clip}};
  manifest.seeds = {{"seed", a.seed}};

  StagedDir out(a.out, a.force);
  if (a.split != "instance") {
    const RetrievalResult r = eval_global_retrieval(ck.state, data, vocab, opts);
    write_text(out.path() / "retrieval_global.json", retrieval_json(r, a.seed, a.checkpoint) + "\n");
  }
  if (a.split != "global") {
    const RetrievalResult r = eval_instance_retrieval(ck.state, data, vocab, opts);
    write_text(out.path() / "retrieval_instance.json", retrieval_json(r, a.seed, a.checkpoint) + "\n");
  }
  write_text(out.path() / "run.json", manifest.text());
  out.commit();
}

// ---- eval-grounding -------------------------------------------------------------

struct GroundingArgs {
  std::string checkpoint;
  std::string train;
  std::string test;
  GroundingConfig config;
  std::string out;
  bool force = false;
};

void eval_grounding(const GroundingArgs& a, RunManifest& manifest) {
  const GroundingConfig& g = a.config;
  if (g.steps < 0 || g.batch_size < 1 || g.frames_per_clip < 1 || g.threads < 1 || !(g.lr >= 0.0) ||
      !(g.weight_decay >= 0.0)) {
    throw ConfigError("grounding options out of range");
  }
  Checkpoint ck = load_checkpoint_file(a.checkpoint);
  const fs::path train_dir = normalised(a.train);
  const fs::path test_dir = normalised(a.test);
  const std::vector<Sample> train_set = load_dataset(train_dir);
  const std::vector<Sample> test_set = load_dataset(test_dir);
  const Vocab vocab = dataset_vocab(train_dir);
  check_vocab(ck.state.config, vocab);
  manifest.config = {{"checkpoint", a.checkpoint}, {"train", a.train},           {"test", a.test},
                     {"steps", g.steps},           {"batch_size", g.batch_size}, {"lr", g.lr},
                     {"weight_decay", g.weight_decay}, {"unfrozen", g.unfrozen}, {"frames_per_clip", g.frames_per_clip}};
  manifest.seeds = {{"seed", g.seed}};

  StagedDir out(a.out, a.force);
  const std::vector<double> losses = grounding_finetune(ck.state, train_set, vocab, g);
  std::string log;
  for (std::size_t i = 0; i < losses.size(); ++i) log += json{{"step", i + 1}, {"loss", losses[i]}}.dump() + "\n";
  write_text(out.path() / "steps.jsonl", log);
  const std::vector<GroundingPrediction> preds = grounding_predict(ck.state, test_set, vocab, g);
  const std::array<double, 3> thresholds{0.5, 0.7, 0.9};
  write_text(out.path() / "grounding.json", grounding_json(preds, thresholds, g.seed, a.checkpoint) + "\n");
  write_text(out.path() / "run.json", manifest.text());
  out.commit();
}

// ---- inspect-mask / report -------------------------------------------------------

struct InspectArgs {
  std::string checkpoint;
  std::string data;
  std::string sample;
  double rho = 0.8;
  int frames_per_clip = 4;
  std::string out;
  bool force = false;
};

void inspect_mask(const InspectArgs& a, RunManifest& manifest, std::ostream& stdout_stream) {
  if (!(a.rho >= 0.0 && a.rho < 1.0) || a.frames_per_clip < 1) {
    throw ConfigError("rho must be in [0, 1) and frames per clip >= 1");
  }
  const Checkpoint ck = load_checkpoint_file(a.checkpoint);
  const std::vector<Sample> data = load_dataset(normalised(a.data));
  if (data.empty()) throw std::runtime_error("dataset is empty");
  const Sample* chosen = &data.front();
  if (!a.sample.empty()) {
    chosen = nullptr;
    for (const Sample& s : data) {
      if (s.sample_id == a.sample) chosen = &s;
    }
    if (chosen == nullptr) throw std::runtime_error("sample not found: " + a.sample);
  }
  const std::string csv = inspect_mask_csv(ck.state, clip_sample(*chosen, a.frames_per_clip), a.rho);
  if (a.out.empty()) {
    stdout_stream << csv;
    return;
  }
  manifest.config = {{"checkpoint", a.checkpoint}, {"data", a.data}, {"sample", chosen->sample_id},
                     {"rho", a.rho},               {"frames_per_clip", a.frames_per_clip}};
  manifest.seeds = json::object();
  commit_file(a.out, csv, a.force);
  commit_file(a.out + ".run.json", manifest.text(), true);
}

struct ReportArgs {
  std::vector<std::string> inputs;
  std::string out;
  bool force = false;
};

void report(const ReportArgs& a, RunManifest& manifest, std::ostream& stdout_stream) {
  std::vector<std::string> docs;
  std::vector<std::string> methods;
  for (const std::string& in : a.inputs) {
    docs.push_back(read_text(in, "evaluation JSON"));
    methods.push_back(fs::path(in).stem().string());
  }
  std::string csv;
  try {
    csv = retrieval_csv(docs, methods);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("malformed evaluation JSON: ") + e.what());
  }
  if (a.out.empty()) {
    stdout_stream << csv;
    return;
  }
  manifest.config = {{"inputs", a.inputs}};
  manifest.seeds = json::object();
  commit_file(a.out, csv, a.force);
  commit_file(a.out + ".run.json", manifest.text(), true);
}

// ---- dispatch ---------------------------------------------------------------------

void print_error(std::ostream& err, int code, const std::string& message) {
  static const char* const kNames[] = {"ok", "runtime", "usage", "config", "missing_file", "output_exists"};
  err << json{{"error", kNames[code]}, {"message", message}, {"exit_code", code}}.dump() << '\n';
}

}  // namespace

std::string inspect_mask_csv(const model::ModelState& state, const Sample& sample, double rho) {
  const model::TeacherOutput teacher = model::teacher_features(state, sample.frames);
  const std::vector<double> scores = importance_scores(teacher.attention);
  const TokenMask mask = build_mask(scores, rho, static_cast<Index>(scores.size()));
  std::string out = "token,frame,row,col,score,masked\n";
  char buf[64];
  for (std::size_t l = 0; l < scores.size(); ++l) {
    const TokenPos& p = teacher.positions[l];
    std::snprintf(buf, sizeof(buf), "%.17g", scores[l]);
    out += std::to_string(l) + "," + std::to_string(p.frame) + "," + std::to_string(p.row) + "," +
           std::to_string(p.col) + "," + buf + "," + (mask.masked[l] ? "1" : "0") + "\n";
  }
  return out;
}

int run(std::span<const std::string> args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Instance-aware video-language pretraining at desk scale", "instap"};
  app.require_subcommand(1, 1);

  GenDataArgs gen;
  CLI::App* gen_cmd = app.add_subcommand("gen-data", "Render shapes-world train/test/zero splits");
  gen_cmd->add_option("--config", gen.config, "Data config JSON");
  gen_cmd->add_option("--scenes", gen.scenes, "Training scenes");
  gen_cmd->add_option("--test-scenes", gen.test_scenes, "Test scenes");
  gen_cmd->add_option("--zero-scenes", gen.zero_scenes, "Held-out-combination scenes");
  gen_cmd->add_option("--seed,--seed-data", gen.seed, "Data seed");
  gen_cmd->add_option("--threads", gen.threads, "Worker threads")->check(CLI::PositiveNumber);
  gen_cmd->add_option("--out", gen.out, "Output directory")->required();
  gen_cmd->add_flag("--force", gen.force, "Replace an existing output");

  TrainArgs pre;
  TrainArgs ali;
  auto add_train = [&](const char* name, const char* help, TrainArgs& t) {
    CLI::App* cmd = app.add_subcommand(name, help);
    cmd->add_option("--config", t.config, "Training config JSON");
    cmd->add_option("--data", t.data, "Dataset directory")->required();
    cmd->add_option("--out", t.out, "Run directory")->required();
    cmd->add_option("--seed-data", t.seed_data, "Data seed override");
    cmd->add_option("--seed-init", t.seed_init, "Init seed override");
    cmd->add_option("--seed-dropout", t.seed_dropout, "Dropout seed override");
    cmd->add_flag("--force", t.force, "Replace an existing output");
    return cmd;
  };
  CLI::App* pre_cmd = add_train("pretrain", "Stage 1: attention-guided masked video modelling", pre);
  CLI::App* ali_cmd = add_train("align", "Stage 2: global and instance-aware alignment", ali);
  ali_cmd->add_option("--init", ali.init, "Stage-1 checkpoint to initialise the video encoder");

  RetrievalArgs ret;
  CLI::App* ret_cmd = app.add_subcommand("eval-retrieval", "Text-video retrieval recall");
  ret_cmd->add_option("--checkpoint", ret.checkpoint, "Model checkpoint")->required();
  ret_cmd->add_option("--data", ret.data, "Dataset directory")->required();
  ret_cmd->add_option("--split", ret.split, "global, instance or both")
      ->check(CLI::IsMember({"global", "instance", "both"}));
  ret_cmd->add_option("--pool-size", ret.pool_size, "Candidates per pool; 0 = all");
  ret_cmd->add_option("--rerank-top-k", ret.rerank_top_k, "Re-rank top k by matching; 0 = off");
  ret_cmd->add_option("--frames-per-clip", ret.frames_per_clip, "Frames sampled per clip");
  ret_cmd->add_option("--threads", ret.threads, "Worker threads")->check(CLI::PositiveNumber);
  ret_cmd->add_option("--seed", ret.seed, "Seed recorded with the metrics");
  ret_cmd->add_option("--out", ret.out, "Output directory")->required();
  ret_cmd->add_flag("--force", ret.force, "Replace an existing output");

  GroundingArgs gr;
  CLI::App* gr_cmd = app.add_subcommand("eval-grounding", "Fine-tune the box head and score spatio-temporal IoU");
  gr_cmd->add_option("--checkpoint", gr.checkpoint, "Model checkpoint")->required();
  gr_cmd->add_option("--train", gr.train, "Fine-tuning dataset directory")->required();
  gr_cmd->add_option("--test", gr.test, "Test dataset directory")->required();
  gr_cmd->add_option("--steps", gr.config.steps, "Fine-tuning steps");
  gr_cmd->add_option("--batch-size", gr.config.batch_size, "Instances per step");
  gr_cmd->add_option("--lr", gr.config.lr, "Peak learning rate");
  gr_cmd->add_option("--weight-decay", gr.config.weight_decay, "AdamW weight decay");
  gr_cmd->add_flag("--unfrozen", gr.config.unfrozen, "Fine-tune the whole network");
  gr_cmd->add_option("--frames-per-clip", gr.config.frames_per_clip, "Frames sampled per clip");
  gr_cmd->add_option("--seed", gr.config.seed, "Batch-order seed");
  gr_cmd->add_option("--threads", gr.config.threads, "Worker threads")->check(CLI::PositiveNumber);
  gr_cmd->add_option("--out", gr.out, "Output directory")->required();
  gr_cmd->add_flag("--force", gr.force, "Replace an existing output");

  InspectArgs ins;
  CLI::App* ins_cmd = app.add_subcommand("inspect-mask", "Dump teacher importance scores and mask decisions");
  ins_cmd->add_option("--checkpoint", ins.checkpoint, "Model checkpoint")->required();
  ins_cmd->add_option("--data", ins.data, "Dataset directory")->required();
  ins_cmd->add_option("--sample", ins.sample, "Sample id; default the first");
  ins_cmd->add_option("--rho", ins.rho, "Masking ratio");
  ins_cmd->add_option("--frames-per-clip", ins.frames_per_clip, "Frames sampled per clip");
  ins_cmd->add_option("--out", ins.out, "CSV file; default stdout");
  ins_cmd->add_flag("--force", ins.force, "Replace an existing output");

  ReportArgs rep;
  CLI::App* rep_cmd = app.add_subcommand("report", "Tabulate retrieval JSON documents as CSV");
  rep_cmd->add_option("--in", rep.inputs, "Evaluation JSON files")->required();
  rep_cmd->add_option("--out", rep.out, "CSV file; default stdout");
  rep_cmd->add_flag("--force", rep.force, "Replace an existing output");

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    print_error(err, kUsage, e.what());
    return kUsage;
  }

  RunManifest manifest;
  manifest.argv.assign(args.begin(), args.end());
  try {
    if (gen_cmd->parsed()) {
      manifest.command = "gen-data";
      gen_data(gen, manifest);
    } else if (pre_cmd->parsed()) {
      manifest.command = "pretrain";
      train_command(pre, Stage::kPretrain, manifest);
    } else if (ali_cmd->parsed()) {
      manifest.command = "align";
      train_command(ali, Stage::kAlign, manifest);
    } else if (ret_cmd->parsed()) {
      manifest.command = "eval-retrieval";
      eval_retrieval(ret, manifest);
    } else if (gr_cmd->parsed()) {
      manifest.command = "eval-grounding";
      eval_grounding(gr, manifest);
    } else if (ins_cmd->parsed()) {
      manifest.command = "inspect-mask";
      inspect_mask(ins, manifest, out);
    } else if (rep_cmd->parsed()) {
      manifest.command = "report";
      report(rep, manifest, out);
    }
  } catch (const OutputExistsError& e) {
    print_error(err, kOutputExists, e.what());
    return kOutputExists;
  } catch (const MissingFileError& e) {
    print_error(err, kMissingFile, e.what());
    return kMissingFile;
  } catch (const ConfigError& e) {
    print_error(err, kConfig, e.what());
    return kConfig;
  } catch (const std::exception& e) {
    print_error(err, kRuntime, e.what());
    return kRuntime;
  }
  return kOk;
}

int run(int argc, const char* const* argv) {
  std::vector<std::string> args;
  for (int i = 1; i < argc; ++i) args.emplace_back(argv[i]);
  return run(args, std::cout, std::cerr);
}

}  // namespace instap::cli
