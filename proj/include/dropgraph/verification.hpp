// Copyright 2026 The DropGraph Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//      http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "dropgraph/tensor.hpp"

namespace dropgraph {

struct CheckResult {
  std::string name;
  bool passed = false;
  std::string detail;
  double seconds = 0.0;
};

struct VerifyOptions {
  std::uint64_t seed = 1;
  /// Random instances per differentiable program.
  std::size_t grad_instances = 100;
  std::size_t adjacency_cases = 10000;
  std::size_t degeneration_cases = 1000;
  std::size_t masks_per_cell = 10000;
  std::size_t scheduler_points = 1000;
  /// Builds the eq6 adjacency from vertex rows (n, c). Replaceable so tests
  /// can inject faults and watch the property checks fail.
  std::function<Tensor(const Tensor& v)> eq6_builder;

  /// Smaller counts for a quick smoke run.
  static VerifyOptions quick();
};

/// Individual suites. Each returns one or more named checks.
std::vector<CheckResult> check_gradients(const VerifyOptions& opt);
std::vector<CheckResult> check_inference_identity(const VerifyOptions& opt);
std::vector<CheckResult> check_dropblock_degeneration(const VerifyOptions& opt);
std::vector<CheckResult> check_adjacency(const VerifyOptions& opt);
std::vector<CheckResult> check_mask_rate(const VerifyOptions& opt);
std::vector<CheckResult> check_schedulers(const VerifyOptions& opt);

/// All of the above, in that order.
std::vector<CheckResult> run_verification(const VerifyOptions& opt);

/// Fixed-width pass/fail table with per-check runtime.
std::string format_report(const std::vector<CheckResult>& results);

}  // namespace dropgraph
