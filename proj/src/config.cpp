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

#include "dropgraph/config.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <sstream>

#include "dropgraph/errors.hpp"

namespace dropgraph {

namespace {

std::string_view trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::vector<std::string_view> split_list(std::string_view s) {
  std::vector<std::string_view> out;
  if (trim(s).empty()) return out;
  std::size_t start = 0;
  while (true) {
    const auto comma = s.find(',', start);
    out.push_back(trim(s.substr(start, comma - start)));
    if (comma == std::string_view::npos) break;
    start = comma + 1;
  }
  return out;
}

double to_double(std::string_view key, std::string_view v) {
  double out = 0.0;
  const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size() || v.empty()) {
    throw ConfigError(std::string(key), "expected a number, got '" + std::string(v) + "'");
  }
  return out;
}

std::uint64_t to_u64(std::string_view key, std::string_view v) {
  std::uint64_t out = 0;
  const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size() || v.empty()) {
    throw ConfigError(std::string(key),
                      "expected a nonnegative integer, got '" + std::string(v) + "'");
  }
  return out;
}

std::size_t to_size(std::string_view key, std::string_view v) {
  return static_cast<std::size_t>(to_u64(key, v));
}

bool to_bool(std::string_view key, std::string_view v) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw ConfigError(std::string(key), "expected true or false, got '" + std::string(v) + "'");
}

template <typename T>
T to_enum(std::string_view key, std::string_view v, std::optional<T> (*parse)(std::string_view)) {
  if (auto e = parse(v)) return *e;
  throw ConfigError(std::string(key), "unknown value '" + std::string(v) + "'");
}

std::optional<Task> parse_task(std::string_view s) {
  if (s == "image") return Task::kImage;
  if (s == "node_graph") return Task::kNodeGraph;
  return std::nullopt;
}

std::string fmt(double v) {
  char buf[64];
  const auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, ptr);
}

template <typename T>
std::string join(const std::vector<T>& items, const std::function<std::string(const T&)>& f) {
  std::string out;
  for (std::size_t i = 0; i < items.size(); ++i) {
    if (i > 0) out += ", ";
    out += f(items[i]);
  }
  return out;
}

struct Field {
  std::string key;
  std::function<void(ExperimentConfig&, std::string_view)> set;
  std::function<std::string(const ExperimentConfig&)> get;
};

#define DG_SIZE(KEY, MEMBER)                                                              \
  Field {                                                                                 \
    KEY, [](ExperimentConfig& c, std::string_view v) { c.MEMBER = to_size(KEY, v); },     \
        [](const ExperimentConfig& c) { return std::to_string(c.MEMBER); }                \
  }
#define DG_U64(KEY, MEMBER)                                                               \
  Field {                                                                                 \
    KEY, [](ExperimentConfig& c, std::string_view v) { c.MEMBER = to_u64(KEY, v); },      \
        [](const ExperimentConfig& c) { return std::to_string(c.MEMBER); }                \
  }
#define DG_REAL(KEY, MEMBER)                                                              \
  Field {                                                                                 \
    KEY, [](ExperimentConfig& c, std::string_view v) { c.MEMBER = to_double(KEY, v); },   \
        [](const ExperimentConfig& c) { return fmt(c.MEMBER); }                           \
  }
#define DG_BOOL(KEY, MEMBER)                                                              \
  Field {                                                                                 \
    KEY, [](ExperimentConfig& c, std::string_view v) { c.MEMBER = to_bool(KEY, v); },     \
        [](const ExperimentConfig& c) { return std::string(c.MEMBER ? "true" : "false"); } \
  }
#define DG_ENUM(KEY, MEMBER, PARSE)                                                       \
  Field {                                                                                 \
    KEY, [](ExperimentConfig& c, std::string_view v) { c.MEMBER = to_enum(KEY, v, PARSE); }, \
        [](const ExperimentConfig& c) { return std::string(to_string(c.MEMBER)); }        \
  }

const std::vector<Field>& fields() {
  static const std::vector<Field> kFields = {
      {"label", [](ExperimentConfig& c, std::string_view v) { c.label = std::string(v); },
       [](const ExperimentConfig& c) { return c.label; }},
      DG_ENUM("task", task, &parse_task),
      {"seeds",
       [](ExperimentConfig& c, std::string_view v) {
         c.seeds.clear();
         for (auto item : split_list(v)) c.seeds.push_back(to_u64("seeds", item));
       },
       [](const ExperimentConfig& c) {
         return join<std::uint64_t>(c.seeds, [](const std::uint64_t& s) { return std::to_string(s); });
       }},
      {"out_dir", [](ExperimentConfig& c, std::string_view v) { c.out_dir = std::string(v); },
       [](const ExperimentConfig& c) { return c.out_dir; }},

      DG_SIZE("data.classes", images.classes),
      DG_SIZE("data.image_size", images.image_size),
      DG_SIZE("data.train_count", images.train_count),
      DG_SIZE("data.val_count", images.val_count),
      DG_REAL("data.noise_std", images.noise_std),
      DG_REAL("data.distractor", images.distractor),
      DG_U64("data.seed", images.seed),

      DG_SIZE("graph.nodes", graph.nodes),
      DG_SIZE("graph.communities", graph.communities),
      DG_REAL("graph.p_in", graph.p_in),
      DG_REAL("graph.p_out", graph.p_out),
      DG_SIZE("graph.labeled_per_class", graph.labeled_per_class),
      DG_SIZE("graph.val_count", graph.val_count),
      DG_SIZE("graph.feature_dim", graph.feature_dim),
      DG_REAL("graph.feature_noise", graph.feature_noise),
      DG_U64("graph.seed", graph.seed),

      DG_SIZE("model.stem_channels", cnn.stem_channels),
      {"model.groups",
       [](ExperimentConfig& c, std::string_view v) {
         c.cnn.groups.clear();
         for (auto item : split_list(v)) {
           const auto x = item.find('x');
           if (x == std::string_view::npos) {
             throw ConfigError("model.groups",
                               "expected BLOCKSxCHANNELS items, got '" + std::string(item) + "'");
           }
           c.cnn.groups.push_back({to_size("model.groups", trim(item.substr(0, x))),
                                   to_size("model.groups", trim(item.substr(x + 1)))});
         }
       },
       [](const ExperimentConfig& c) {
         return join<GroupSpec>(c.cnn.groups, [](const GroupSpec& g) {
           return std::to_string(g.blocks) + "x" + std::to_string(g.channels);
         });
       }},
      {"model.regularize_groups",
       [](ExperimentConfig& c, std::string_view v) {
         c.cnn.regularize_groups.clear();
         for (auto item : split_list(v)) {
           c.cnn.regularize_groups.push_back(to_size("model.regularize_groups", item));
         }
       },
       [](const ExperimentConfig& c) {
         return join<std::size_t>(c.cnn.regularize_groups,
                                  [](const std::size_t& g) { return std::to_string(g); });
       }},
      DG_BOOL("model.regularize_skip", cnn.regularize_skip),
      DG_SIZE("model.hidden", gcn.hidden),

      DG_ENUM("regularizer.kind", regularizer.kind, &parse_regularizer_kind),
      DG_REAL("regularizer.alpha", regularizer.alpha),
      DG_REAL("regularizer.rho", regularizer.rho_target),
      DG_SIZE("regularizer.block_size", regularizer.block_size),
      DG_ENUM("regularizer.adjacency", regularizer.adjacency_mode, &parse_adjacency_mode),
      DG_ENUM("regularizer.generator", regularizer.generator_kind, &parse_generator_kind),
      DG_ENUM("regularizer.scheduler", regularizer.scheduler_kind, &parse_scheduler_kind),
      DG_BOOL("regularizer.rescale_dropout", regularizer.rescale_dropout),
      DG_BOOL("regularizer.normalize_similarity", regularizer.normalize_similarity),
      DG_ENUM("regularizer.sampling", regularizer.sampling, &parse_sampling_strategy),
      DG_ENUM("regularizer.application", regularizer.application, &parse_application),

      DG_SIZE("train.epochs", train.epochs),
      DG_SIZE("train.batch_size", train.batch_size),
      DG_REAL("train.lr", train.lr),
      DG_REAL("train.momentum", train.momentum),
      DG_REAL("train.weight_decay", train.weight_decay),
      {"train.lr_decay_at",
       [](ExperimentConfig& c, std::string_view v) {
         c.train.lr_decay_at.clear();
         for (auto item : split_list(v)) {
           c.train.lr_decay_at.push_back(to_double("train.lr_decay_at", item));
         }
       },
       [](const ExperimentConfig& c) {
         return join<double>(c.train.lr_decay_at, [](const double& f) { return fmt(f); });
       }},
      DG_REAL("train.lr_decay_factor", train.lr_decay_factor),
      DG_BOOL("train.flip", train.flip),
  };
  return kFields;
}

#undef DG_SIZE
#undef DG_U64
#undef DG_REAL
#undef DG_BOOL
#undef DG_ENUM

const Field* find_field(std::string_view key) {
  for (const auto& f : fields()) {
    if (f.key == key) return &f;
  }
  return nullptr;
}

}  // namespace

void apply_setting(ExperimentConfig& cfg, std::string_view key, std::string_view value) {
  const Field* f = find_field(key);
  if (f == nullptr) throw ConfigError(std::string(key), "unknown key");
  f->set(cfg, trim(value));
}

ExperimentConfig parse_config(std::string_view text) {
  ExperimentConfig cfg;
  std::set<std::string, std::less<>> seen;
  std::size_t line_no = 0;
  std::size_t start = 0;
  while (start <= text.size()) {
    const auto nl = text.find('\n', start);
    std::string_view line =
        text.substr(start, nl == std::string_view::npos ? std::string_view::npos : nl - start);
    start = nl == std::string_view::npos ? text.size() + 1 : nl + 1;
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string_view::npos) {
      line = line.substr(0, hash);
    }
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string_view::npos) {
      throw ConfigError("line " + std::to_string(line_no), "expected 'key = value'");
    }
    const std::string key(trim(line.substr(0, eq)));
    if (!seen.insert(key).second) throw ConfigError(key, "set more than once");
    apply_setting(cfg, key, line.substr(eq + 1));
  }
  cfg.validate();
  return cfg;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("path", "cannot read config file " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_config(buf.str());
}

std::string serialize_config(const ExperimentConfig& cfg) {
  std::string out;
  for (const auto& f : fields()) out += f.key + " = " + f.get(cfg) + "\n";
  return out;
}

const std::vector<std::string>& config_keys() {
  static const std::vector<std::string> kKeys = [] {
    std::vector<std::string> keys;
    for (const auto& f : fields()) keys.push_back(f.key);
    return keys;
  }();
  return kKeys;
}

}  // namespace dropgraph
