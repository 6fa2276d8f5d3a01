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

#include "dropgraph/grad_check.hpp"

#include <algorithm>
#include <cmath>

#include "dropgraph/errors.hpp"

namespace dropgraph {
namespace {

double evaluate(const std::function<Tensor()>& program) {
  const Tensor out = program();
  if (out.numel() != 1) {
    throw ContractError("grad_check: program must be scalar-valued, got " +
                        shape_str(out.shape()));
  }
  return out.item();
}

}  // namespace

GradCheckReport grad_check_report(const std::function<Tensor()>& program,
                                  std::vector<Tensor> inputs, double eps) {
  if (!(eps >= 1e-7 && eps <= 1e-3)) {
    throw ContractError("grad_check: eps must lie in [1e-7, 1e-3]");
  }
  for (Tensor& t : inputs) {
    t.set_requires_grad(true);
    t.zero_grad();
  }
  {
    const Tensor loss = program();
    if (loss.numel() != 1) {
      throw ContractError("grad_check: program must be scalar-valued, got " +
                          shape_str(loss.shape()));
    }
    loss.backward();
  }

  GradCheckReport report;
  for (std::size_t t = 0; t < inputs.size(); ++t) {
    const std::vector<double> analytic = inputs[t].grad();
    auto values = inputs[t].mutable_values();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double saved = values[i];
      // Divide by the step actually taken, not the nominal 2 eps, so input
      // rounding does not show up as gradient error.
      const double up = saved + eps;
      const double down = saved - eps;
      values[i] = up;
      const double plus = evaluate(program);
      values[i] = down;
      const double minus = evaluate(program);
      values[i] = saved;
      const double numeric = (plus - minus) / (up - down);
      const double scale = std::max({1.0, std::abs(analytic[i]), std::abs(numeric)});
      const double err = std::abs(analytic[i] - numeric) / scale;
      if (!(err <= report.max_relative_error)) {
        report = {err, t, i, analytic[i], numeric};
      }
    }
  }
  return report;
}

double grad_check(const std::function<Tensor()>& program, const Tensor& input, double eps) {
  return grad_check_report(program, {input}, eps).max_relative_error;
}

}  // namespace dropgraph
