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

#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "dropgraph/experiments.hpp"

namespace dropgraph {

/// Experiment configs are flat `key = value` lines with dotted section names:
///
///   # comment
///   task = image
///   regularizer.kind = dropgraph
///   regularizer.rho = 0.1
///   seeds = 1, 2, 3
///
/// Unset keys keep their defaults. Unknown or repeated keys, malformed values
/// and invariant violations raise ConfigError naming the key.
ExperimentConfig parse_config(std::string_view text);

/// Reads and parses a file. A missing file raises ConfigError with field "path".
ExperimentConfig load_config(const std::filesystem::path& path);

/// Every key in a fixed order; parse_config(serialize_config(c)) == c.
std::string serialize_config(const ExperimentConfig& cfg);

/// Sets one key as if it appeared in a config file, without validating the
/// whole config.
void apply_setting(ExperimentConfig& cfg, std::string_view key, std::string_view value);

/// All recognised keys, in serialization order.
const std::vector<std::string>& config_keys();

}  // namespace dropgraph
