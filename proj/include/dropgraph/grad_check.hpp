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
#include <functional>
#include <vector>

#include "dropgraph/tensor.hpp"

namespace dropgraph {

struct GradCheckReport {
  double max_relative_error = 0.0;
  std::size_t worst_input = 0;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
};

/// Compares reverse-mode gradients of a scalar program against central
/// differences. Error per coordinate is
///   |analytic - numeric| / max(1, |analytic|, |numeric|).
///
/// `program` must rebuild its tape on every call and read `inputs` by handle
/// (inputs are perturbed in place, then restored). Any randomness inside it
/// must be pinned so repeated calls are deterministic.
GradCheckReport grad_check_report(const std::function<Tensor()>& program,
                                  std::vector<Tensor> inputs, double eps = 1e-5);

/// Maximum relative error, see grad_check_report.
double grad_check(const std::function<Tensor()>& program, const Tensor& input,
                  double eps = 1e-5);

}  // namespace dropgraph
