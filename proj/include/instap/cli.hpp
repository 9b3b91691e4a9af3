// Copyright 2026 The InstAP Desk Authors
// SPDX-License-Identifier: Apache-2.0
//
// Single-binary command line: gen-data, pretrain, align, eval-retrieval,
// eval-grounding, inspect-mask and report.
//
// Directory outputs are staged in "<out>.partial" and renamed into place;
// an existing output is refused unless --force. Every run writes run.json
// (argv, resolved config, config hash, seeds, git describe, wall time).
// Failures print one JSON object on stderr: {"error", "message", "exit_code"}.

#pragma once

#include <iosfwd>
#include <span>
#include <stdexcept>
#include <string>

#include "instap/model.hpp"
#include "instap/schema.hpp"

namespace instap::cli {

enum ExitCode : int {
  kOk = 0,
  kRuntime = 1,
  kUsage = 2,
  kConfig = 3,
  kMissingFile = 4,
  kOutputExists = 5,
};

class OutputExistsError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// `args` excludes the program name.
int run(std::span<const std::string> args, std::ostream& out, std::ostream& err);
int run(int argc, const char* const* argv);

/// Header "token,frame,row,col,score,masked", one row per teacher token of
/// `sample` in token order; masked is 1 for the ceil(rho·L) hidden tokens.
std::string inspect_mask_csv(const model::ModelState& state, const Sample& sample, double rho);

/// The git describe string baked in at build time.
const char* git_describe();

}  // namespace instap::cli
