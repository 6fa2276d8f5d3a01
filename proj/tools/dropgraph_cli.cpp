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

// Command-line front end: run, sweep and verify.

#include <malloc.h>

#include <charconv>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>

#include "dropgraph/config.hpp"
#include "dropgraph/errors.hpp"
#include "dropgraph/experiments.hpp"
#include "dropgraph/kernels.hpp"
#include "dropgraph/verification.hpp"

namespace fs = std::filesystem;
using namespace dropgraph;

namespace {

constexpr int kExitParse = 2;
constexpr int kExitDiverged = 3;

std::string num(double v) {
  char buf[64];
  const auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, ptr);
}

std::string join_seeds(const std::vector<std::uint64_t>& seeds) {
  std::string out;
  for (std::size_t i = 0; i < seeds.size(); ++i) out += (i ? " " : "") + std::to_string(seeds[i]);
  return out;
}

std::string file_safe(const std::string& s) {
  std::string out;
  for (char c : s) out += (std::isalnum(static_cast<unsigned char>(c)) || c == '.' || c == '-') ? c : '_';
  return out;
}

std::vector<std::string> split_csv(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream in(s);
  std::string item;
  while (std::getline(in, item, ',')) {
    const auto b = item.find_first_not_of(' ');
    const auto e = item.find_last_not_of(' ');
    if (b != std::string::npos) out.push_back(item.substr(b, e - b + 1));
  }
  return out;
}

struct Common {
  std::string seeds;
  std::string out_dir;
  int threads = 0;
  std::vector<std::string> overrides;
};

ExperimentConfig load_with_overrides(const std::string& path, const Common& common) {
  ExperimentConfig cfg = load_config(path);
  for (const auto& kv : common.overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw ConfigError(kv, "--set expects key=value");
    apply_setting(cfg, kv.substr(0, eq), kv.substr(eq + 1));
  }
  if (!common.seeds.empty()) apply_setting(cfg, "seeds", common.seeds);
  if (!common.out_dir.empty()) cfg.out_dir = common.out_dir;
  cfg.validate();
  return cfg;
}

std::string header(const std::string& command, const ExperimentConfig& cfg) {
  return "# dropgraph " + command + " seeds=" + join_seeds(cfg.seeds) +
         " config_hash=" + config_hash(cfg) + "\n";
}

const char* kRunColumns =
    "row_type,label,config_hash,seed,status,epochs,train_acc,val_acc,gap,val_loss\n";

std::string run_row(const RunRecord& r) {
  return "run," + r.label + "," + r.config_hash + "," + std::to_string(r.seed) + "," +
         std::string(to_string(r.status)) + "," + std::to_string(r.epochs.size()) + "," +
         num(100.0 * r.final_train_acc()) + "," + num(100.0 * r.final_val_acc()) + "," +
         num(r.gap()) + "," + num(r.final_val_loss()) + "\n";
}

std::string summary_rows(const SummaryRow& s) {
  std::string out;
  const std::string status = s.diverged == 0 ? "ok" : "diverged=" + std::to_string(s.diverged);
  auto row = [&](const char* kind, double MetricSummary::*field) {
    out += std::string(kind) + "," + s.label + "," + s.config_hash + ",-," + status + ",-," +
           num(s.train_acc.*field) + "," + num(s.val_acc.*field) + "," + num(s.gap.*field) +
           "," + num(s.val_loss.*field) + "\n";
  };
  row("median", &MetricSummary::median);
  row("min", &MetricSummary::min);
  row("max", &MetricSummary::max);
  return out;
}

void write_file(const fs::path& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
}

// Per-run record files, the combined summary CSV and the learning-curve CSV.
void write_outputs(const std::string& command, const ExperimentConfig& base,
                   const MultiSeedResult& res) {
  const fs::path dir(base.out_dir);
  fs::create_directories(dir / "records");
  std::string summary = header(command, base) + kRunColumns;
  std::string curves = header(command, base) +
                       "label,config_hash,seed,epoch,lr,rho_begin,rho_end,train_loss,train_acc,"
                       "val_loss,val_acc\n";
  std::string all;
  for (const auto& r : res.runs) {
    summary += run_row(r);
    const std::string line = to_jsonl(r) + "\n";
    all += line;
    write_file(dir / "records" /
                   (file_safe(r.label) + "_" + r.config_hash.substr(0, 8) + "_seed" +
                    std::to_string(r.seed) + ".jsonl"),
               line);
    for (const auto& e : r.epochs) {
      curves += r.label + "," + r.config_hash + "," + std::to_string(r.seed) + "," +
                std::to_string(e.epoch) + "," + num(e.lr) + "," + num(e.rho_begin) + "," +
                num(e.rho_end) + "," + num(e.train_loss) + "," + num(e.train_acc) + "," +
                num(e.val_loss) + "," + num(e.val_acc) + "\n";
    }
  }
  for (const auto& s : res.summary) summary += summary_rows(s);
  write_file(dir / "summary.csv", summary);
  write_file(dir / "curves.csv", curves);
  write_file(dir / "runs.jsonl", all);
}

void print_progress(const RunRecord& r) {
  std::fprintf(stderr, "  %-40s seed %-4llu %-8s train %.2f%%  val %.2f%%  gap %.2f  (%.1fs)\n",
               r.label.c_str(), static_cast<unsigned long long>(r.seed),
               std::string(to_string(r.status)).c_str(), 100.0 * r.final_train_acc(),
               100.0 * r.final_val_acc(), r.gap(), r.wall_seconds);
}

void print_median(const SummaryRow& s) {
  std::printf("median %-40s val_acc=%.2f train_acc=%.2f gap=%.2f val_loss=%.4f (%zu runs)\n",
              s.label.c_str(), s.val_acc.median, s.train_acc.median, s.gap.median,
              s.val_loss.median, s.runs);
}

int finish(const MultiSeedResult& res) {
  for (const auto& s : res.summary) print_median(s);
  for (const auto& r : res.runs) {
    if (r.status != RunStatus::kOk) {
      std::fprintf(stderr, "error: %s seed %llu diverged\n", r.label.c_str(),
                   static_cast<unsigned long long>(r.seed));
      return kExitDiverged;
    }
  }
  return 0;
}

int cmd_run(const std::string& path, const Common& common, bool table1,
            const std::string& alphas, const std::string& samplings,
            const std::string& applications) {
  const ExperimentConfig base = load_with_overrides(path, common);
  std::vector<ExperimentConfig> configs{base};
  std::vector<Table1Cell> cells;
  if (table1) {
    std::vector<double> a;
    for (const auto& s : split_csv(alphas)) {
      ExperimentConfig probe = base;
      apply_setting(probe, "regularizer.alpha", s);
      a.push_back(probe.regularizer.alpha);
    }
    std::vector<SamplingStrategy> ss;
    for (const auto& s : split_csv(samplings)) {
      auto v = parse_sampling_strategy(s);
      if (!v) throw ConfigError("--samplings", "unknown value '" + s + "'");
      ss.push_back(*v);
    }
    std::vector<Application> as;
    for (const auto& s : split_csv(applications)) {
      auto v = parse_application(s);
      if (!v) throw ConfigError("--applications", "unknown value '" + s + "'");
      as.push_back(*v);
    }
    cells = table1_cells(a, ss, as);
    configs.clear();
    for (const auto& c : cells) configs.push_back(table1_config(base, c));
  }
  std::printf("%s", header("run", base).c_str());
  DataCache cache(fs::path(base.out_dir) / "cache");
  const MultiSeedResult res = multi_seed(configs, base.seeds, cache, print_progress);
  write_outputs("run", base, res);
  if (table1) {
    std::string grid = header("run --table1", base) +
                       "sampling,application,alpha,val_acc_median,val_acc_min,val_acc_max,"
                       "gap_median,train_acc_median\n";
    for (std::size_t i = 0; i < cells.size(); ++i) {
      const SummaryRow& s = res.summary[i];
      grid += (cells[i].baseline ? std::string("baseline,-,-")
                                 : std::string(to_string(cells[i].sampling)) + "," +
                                       std::string(to_string(cells[i].application)) + "," +
                                       num(cells[i].alpha)) +
              "," + num(s.val_acc.median) + "," + num(s.val_acc.min) + "," +
              num(s.val_acc.max) + "," + num(s.gap.median) + "," + num(s.train_acc.median) +
              "\n";
    }
    write_file(fs::path(base.out_dir) / "table1.csv", grid);
  }
  return finish(res);
}

int cmd_sweep(const std::string& path, const Common& common, const std::string& axis,
              const std::string& values) {
  static const std::map<std::string, std::string> kAxes = {
      {"alpha", "regularizer.alpha"},
      {"rho", "regularizer.rho"},
      {"adjacency_mode", "regularizer.adjacency"},
      {"scheduler", "regularizer.scheduler"}};
  const auto it = kAxes.find(axis);
  if (it == kAxes.end()) {
    throw ConfigError("--axis", "must be one of alpha, rho, adjacency_mode, scheduler");
  }
  const ExperimentConfig base = load_with_overrides(path, common);
  const auto items = split_csv(values);
  if (items.empty()) throw ConfigError("--values", "needs at least one value");
  std::vector<ExperimentConfig> configs;
  for (const auto& v : items) {
    ExperimentConfig c = base;
    apply_setting(c, it->second, v);
    c.label = axis + "=" + v;
    c.validate();
    configs.push_back(std::move(c));
  }
  std::printf("%s", header("sweep", base).c_str());
  DataCache cache(fs::path(base.out_dir) / "cache");
  const MultiSeedResult res = multi_seed(configs, base.seeds, cache, print_progress);
  write_outputs("sweep", base, res);
  std::string tidy = header("sweep --axis " + axis, base) +
                     "axis,value,config_hash,seed,status,train_acc,val_acc,gap,val_loss\n";
  for (std::size_t i = 0; i < res.runs.size(); ++i) {
    const RunRecord& r = res.runs[i];
    tidy += axis + "," + items[i / base.seeds.size()] + "," + r.config_hash + "," +
            std::to_string(r.seed) + "," + std::string(to_string(r.status)) + "," +
            num(100.0 * r.final_train_acc()) + "," + num(100.0 * r.final_val_acc()) + "," +
            num(r.gap()) + "," + num(r.final_val_loss()) + "\n";
  }
  write_file(fs::path(base.out_dir) / "sweep.csv", tidy);
  return finish(res);
}

int cmd_verify(bool quick, std::uint64_t seed) {
  VerifyOptions opt = quick ? VerifyOptions::quick() : VerifyOptions{};
  opt.seed = seed;
  std::printf("# dropgraph verify seed=%llu%s\n", static_cast<unsigned long long>(seed),
              quick ? " quick" : "");
  const auto results = run_verification(opt);
  std::printf("%s", format_report(results).c_str());
  for (const auto& r : results) {
    if (!r.passed) return 1;
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  // The tape allocates and frees many large buffers per step; keep them in
  // the heap instead of round-tripping through mmap.
  mallopt(M_MMAP_THRESHOLD, 256 << 20);
  mallopt(M_TRIM_THRESHOLD, 512 << 20);
  CLI::App app{"DropGraph experiments and verification"};
  app.require_subcommand(1);
  Common common;
  auto add_common = [&common](CLI::App* sub) {
    sub->add_option("--seeds", common.seeds, "Comma-separated seeds (overrides the config)");
    sub->add_option("--out-dir", common.out_dir, "Output directory (overrides the config)");
    sub->add_option("--threads", common.threads, "OpenMP threads for the kernels");
    sub->add_option("--set", common.overrides, "Override a config key, key=value")
        ->allow_extra_args(false);
  };

  std::string config_path;
  bool table1 = false;
  std::string alphas = "0.125,0.25,0.5,1.0", samplings = "random,top",
              applications = "train_only,train_and_infer";
  auto* run = app.add_subcommand("run", "Train every seed of a config and summarize");
  run->add_option("config", config_path, "Config file")->required();
  run->add_flag("--table1", table1, "Run the sampling grid (baseline + partial reasoning)");
  run->add_option("--alphas", alphas, "Grid alphas for --table1");
  run->add_option("--samplings", samplings, "Grid sampling strategies for --table1");
  run->add_option("--applications", applications, "Grid applications for --table1");
  add_common(run);

  std::string axis, values;
  auto* sweep = app.add_subcommand("sweep", "Run a config across values of one axis");
  sweep->add_option("config", config_path, "Config file")->required();
  sweep->add_option("--axis", axis, "alpha | rho | adjacency_mode | scheduler")->required();
  sweep->add_option("--values", values, "Comma-separated axis values")->required();
  add_common(sweep);

  bool quick = false;
  std::uint64_t verify_seed = 1;
  auto* verify = app.add_subcommand("verify", "Run the invariant suite");
  verify->add_flag("--quick", quick, "Smaller case counts");
  verify->add_option("--seed", verify_seed, "Seed for the random cases");
  verify->add_option("--threads", common.threads, "OpenMP threads for the kernels");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitParse;
  }
  if (common.threads > 0) kernels::set_threads(common.threads);

  try {
    if (*run) return cmd_run(config_path, common, table1, alphas, samplings, applications);
    if (*sweep) return cmd_sweep(config_path, common, axis, values);
    return cmd_verify(quick, verify_seed);
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return kExitParse;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
}
