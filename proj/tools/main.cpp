// Copyright 2026 The xtrace Authors.
// SPDX-License-Identifier: Apache-2.0

#include "xtrace_cli.hpp"

int main(int argc, char** argv) { return xtrace::cli::cli_main(argc, argv); }
