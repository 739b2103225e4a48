// Copyright 2026 The lisa-lab Authors
// SPDX-License-Identifier: Apache-2.0

#include "lisa/cli.hpp"

int main(int argc, char** argv) { return lisa::run_cli(argc, argv); }
