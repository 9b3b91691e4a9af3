// Copyright 2026 The InstAP Desk Authors
// SPDX-License-Identifier: Apache-2.0

#include "instap/cli.hpp"

int main(int argc, char** argv) { return instap::cli::run(argc, argv); }
