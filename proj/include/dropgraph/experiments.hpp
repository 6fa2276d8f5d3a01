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
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "dropgraph/backbones.hpp"
#include "dropgraph/regularizers.hpp"

namespace dropgraph {

// ---- Synthetic images -------------------------------------------------------------

struct SyntheticImageSpec {
  std::size_t classes = 4;
  std::size_t image_size = 32;
  std::size_t train_count = 512;
  std::size_t val_count = 2048;
  double noise_std = 0.8;
  /// Amplitude of a pattern from a different class mixed into every image.
  double distractor = 0.6;
  std::uint64_t seed = 2024;

  void validate() const;
  bool operator==(const SyntheticImageSpec&) const = default;
};

/// Images stored as one (count, 3, size, size) row-major block.
struct ImageSet {
  std::size_t size = 0;
  std::vector<double> pixels;
  std::vector<std::size_t> labels;

  static constexpr std::size_t kChannels = 3;
  std::size_t count() const { return labels.size(); }
  std::size_t image_numel() const { return kChannels * size * size; }
  bool operator==(const ImageSet&) const = default;
};

struct ImageData {
  ImageSet train;
  ImageSet val;
  bool operator==(const ImageData&) const = default;
};

/// Class k draws from pattern family k mod 4 (oriented gratings, gaussian blobs,
/// checkers, rings) with random latents, plus a weaker pattern of another
/// family and additive gaussian noise. Classes are balanced round-robin. Both
/// splits are normalized per channel with the train split's mean and std.
ImageData gen_images(const SyntheticImageSpec& spec);

// ---- Stochastic block model graphs -------------------------------------------------

struct SbmGraphSpec {
  std::size_t nodes = 300;
  std::size_t communities = 3;
  double p_in = 0.08;
  double p_out = 0.01;
  std::size_t labeled_per_class = 20;
  std::size_t val_count = 100;
  std::size_t feature_dim = 16;
  /// Std of the gaussian noise around each community's feature mean (unit norm).
  double feature_noise = 1.0;
  std::uint64_t seed = 2024;

  void validate() const;
  bool operator==(const SbmGraphSpec&) const = default;
};

/// Communities are assigned round-robin. Labeled nodes are the first
/// labeled_per_class of each community in a seeded shuffle; the next
/// val_count shuffled nodes form the validation set; the rest are test nodes.
GraphInstance gen_sbm(const SbmGraphSpec& spec);

// ---- Dataset cache -----------------------------------------------------------------

inline constexpr std::uint32_t kDatasetCacheVersion = 1;

/// Binary layout, little-endian:
///   "DGDATA\0\0" | u32 version | u64 spec_hash |
///   2 x ( u64 count | u64 size | f64 pixels[count*3*size*size] | u64 labels[count] )
/// Train split first, then validation.
void save_image_cache(const std::filesystem::path& path, const ImageData& data,
                      std::uint64_t spec_hash);
/// Returns false when the file is missing, has another version, or another spec hash.
bool load_image_cache(const std::filesystem::path& path, std::uint64_t spec_hash,
                      ImageData& out);
std::uint64_t spec_hash(const SyntheticImageSpec& spec);

// ---- Training ------------------------------------------------------------------------

struct TrainConfig {
  std::size_t epochs = 60;
  std::size_t batch_size = 32;
  double lr = 0.1;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  /// Epoch fractions at which the learning rate is multiplied by lr_decay_factor.
  std::vector<double> lr_decay_at{0.6, 0.85};
  double lr_decay_factor = 0.1;
  bool flip = true;

  void validate() const;
  bool operator==(const TrainConfig&) const = default;
};

/// Learning rate during `epoch` under the step-decay schedule.
double learning_rate(const TrainConfig& cfg, std::size_t epoch);

/// SGD with heavy-ball momentum and L2 weight decay:
///   v = momentum v + (g + wd w);  w -= lr v.
class Sgd {
 public:
  Sgd(std::vector<NamedTensor> params, double momentum, double weight_decay);
  void step(double lr);
  void zero_grad();

 private:
  std::vector<NamedTensor> params_;
  std::vector<std::vector<double>> velocity_;
  double momentum_;
  double weight_decay_;
};

struct EpochRecord {
  std::size_t epoch = 0;
  double lr = 0.0;
  double rho_begin = 0.0;  // rho used by the epoch's first step
  double rho_end = 0.0;    // rho used by the epoch's last step
  double train_loss = 0.0;
  double train_acc = 0.0;  // measured in eval mode after the epoch
  double val_loss = 0.0;
  double val_acc = 0.0;
  bool operator==(const EpochRecord&) const = default;
};

enum class RunStatus { kOk, kDiverged };
std::string_view to_string(RunStatus s);

struct RunRecord {
  std::string config_hash;
  std::string label;
  std::uint64_t seed = 0;
  RunStatus status = RunStatus::kOk;
  std::vector<EpochRecord> epochs;
  double wall_seconds = 0.0;  // excluded from equality

  double final_train_acc() const;
  double final_val_acc() const;
  double final_val_loss() const;
  /// train_acc - val_acc at the last recorded epoch, in accuracy points (0..100).
  double gap() const;
  /// Equal in everything but wall time.
  bool same_result(const RunRecord& other) const;
};

std::string to_jsonl(const RunRecord& r);
RunRecord run_record_from_jsonl(const std::string& line);

/// Accuracy and mean cross entropy of `net` in eval mode.
struct EvalResult {
  double loss = 0.0;
  double acc = 0.0;
};
EvalResult evaluate(TinyResNet& net, const ImageSet& set, std::size_t batch_size = 128);
EvalResult evaluate(const TwoLayerGcn& net, const GraphInstance& g,
                    const std::vector<std::size_t>& nodes);

/// Rho for global step t out of `total` steps. The last step uses rho_target.
double step_rho(const RegularizerConfig& reg, std::size_t t, std::size_t total);

/// Minibatch SGD. Seed paths: shuffle {kShuffle, epoch}, flips {kAugment,
/// epoch}, regularizers {kStep, t}. A non-finite loss stops the run with
/// status diverged.
RunRecord train_images(TinyResNet& net, const ImageData& data, const TrainConfig& cfg,
                       std::uint64_t seed);
/// Full-batch training on the labeled nodes; one step per epoch.
RunRecord train_gcn(TwoLayerGcn& net, const GraphInstance& g, const TrainConfig& cfg,
                    std::uint64_t seed);

// ---- Experiments ---------------------------------------------------------------------

enum class Task { kImage, kNodeGraph };
std::string_view to_string(Task t);

/// Everything one run needs apart from its seed.
struct ExperimentConfig {
  std::string label = "default";
  Task task = Task::kImage;
  SyntheticImageSpec images;
  SbmGraphSpec graph;
  TinyResNetConfig cnn;
  TwoLayerGcnConfig gcn;
  RegularizerConfig regularizer{.kind = RegularizerKind::kNone};
  TrainConfig train;
  std::vector<std::uint64_t> seeds{1, 2, 3};
  std::string out_dir = "runs";

  /// The effective backbone configs, with the shared regularizer and data shapes filled in.
  TinyResNetConfig cnn_config() const;
  TwoLayerGcnConfig gcn_config() const;
  /// Throws ConfigError naming the offending key.
  void validate() const;
  bool operator==(const ExperimentConfig&) const = default;
};

/// FNV-1a of the serialized config without label, seeds and out_dir, as 16 hex digits.
std::string config_hash(const ExperimentConfig& cfg);

/// Generated datasets keyed by spec so that several configs share one copy.
class DataCache {
 public:
  /// `dir` enables the on-disk image cache; empty keeps everything in memory.
  explicit DataCache(std::filesystem::path dir = {}) : dir_(std::move(dir)) {}
  const ImageData& images(const SyntheticImageSpec& spec);
  const GraphInstance& graph(const SbmGraphSpec& spec);

 private:
  std::filesystem::path dir_;
  std::vector<std::pair<SyntheticImageSpec, ImageData>> images_;
  std::vector<std::pair<SbmGraphSpec, GraphInstance>> graphs_;
};

/// One training run. Model init uses RngStream(seed).child(kInit).
RunRecord run_experiment(const ExperimentConfig& cfg, std::uint64_t seed, DataCache& cache);

struct MetricSummary {
  double median = 0.0;
  double min = 0.0;
  double max = 0.0;
};
MetricSummary summarize(std::vector<double> values);

struct SummaryRow {
  std::string label;
  std::string config_hash;
  std::size_t runs = 0;
  std::size_t diverged = 0;
  MetricSummary train_acc;
  MetricSummary val_acc;
  MetricSummary gap;
  MetricSummary val_loss;
};
SummaryRow summarize_runs(const std::string& label, const std::vector<RunRecord>& runs);

struct MultiSeedResult {
  std::vector<RunRecord> runs;     // config-major, then seed order
  std::vector<SummaryRow> summary;  // one per config
};

/// Runs every config under every seed (at least 3 seeds). `on_run` sees each
/// record as it completes.
MultiSeedResult multi_seed(const std::vector<ExperimentConfig>& configs,
                           const std::vector<std::uint64_t>& seeds, DataCache& cache,
                           const std::function<void(const RunRecord&)>& on_run = {});

/// The Table-1 style grid: a baseline plus partial reasoning for every
/// (sampling, alpha, application) combination.
struct Table1Cell {
  SamplingStrategy sampling = SamplingStrategy::kRandom;
  double alpha = 0.0;
  Application application = Application::kTrainOnly;
  bool baseline = false;
};
std::vector<Table1Cell> table1_cells(const std::vector<double>& alphas,
                                     const std::vector<SamplingStrategy>& samplings,
                                     const std::vector<Application>& applications);
ExperimentConfig table1_config(const ExperimentConfig& base, const Table1Cell& cell);

}  // namespace dropgraph
