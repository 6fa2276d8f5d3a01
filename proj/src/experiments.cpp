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

#include "dropgraph/experiments.hpp"

#include <algorithm>
#include <bit>
#include <chrono>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numbers>
#include <sstream>

#include <json.hpp>

#include "dropgraph/config.hpp"
#include "dropgraph/errors.hpp"

namespace dropgraph {

namespace {

constexpr double kTwoPi = 2.0 * std::numbers::pi;

std::uint64_t fnv1a(std::string_view text) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : text) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string hex16(std::uint64_t v) {
  static constexpr char kDigits[] = "0123456789abcdef";
  std::string out(16, '0');
  for (int i = 15; i >= 0; --i, v >>= 4) out[static_cast<std::size_t>(i)] = kDigits[v & 0xf];
  return out;
}

// One pattern in [-1, 1] over the unit square, written into `out` (size*size).
void draw_pattern(std::size_t family, std::size_t size, RngStream& rng, std::vector<double>& out) {
  out.assign(size * size, 0.0);
  auto coord = [size](std::size_t i) {
    return (static_cast<double>(i) + 0.5) / static_cast<double>(size) - 0.5;
  };
  switch (family % 4) {
    case 0: {  // oriented grating
      const double theta = rng.uniform() * std::numbers::pi;
      const double freq = 2.0 + 3.0 * rng.uniform();
      const double phase = rng.uniform() * kTwoPi;
      const double ct = std::cos(theta), st = std::sin(theta);
      for (std::size_t y = 0; y < size; ++y) {
        for (std::size_t x = 0; x < size; ++x) {
          out[y * size + x] = std::sin(kTwoPi * freq * (coord(x) * ct + coord(y) * st) + phase);
        }
      }
      break;
    }
    case 1: {  // gaussian blobs
      const std::size_t blobs = 2 + rng.index(3);
      for (std::size_t k = 0; k < blobs; ++k) {
        const double cx = 0.7 * (rng.uniform() - 0.5);
        const double cy = 0.7 * (rng.uniform() - 0.5);
        const double sigma = 0.06 + 0.09 * rng.uniform();
        for (std::size_t y = 0; y < size; ++y) {
          for (std::size_t x = 0; x < size; ++x) {
            const double dx = coord(x) - cx, dy = coord(y) - cy;
            out[y * size + x] += std::exp(-(dx * dx + dy * dy) / (2.0 * sigma * sigma));
          }
        }
      }
      for (double& v : out) v = 2.0 * std::min(v, 1.0) - 1.0;
      break;
    }
    case 2: {  // rotated checkers, softened
      const double theta = rng.uniform() * std::numbers::pi / 2.0;
      const double freq = 1.5 + 2.0 * rng.uniform();
      const double pa = rng.uniform() * kTwoPi, pb = rng.uniform() * kTwoPi;
      const double ct = std::cos(theta), st = std::sin(theta);
      for (std::size_t y = 0; y < size; ++y) {
        for (std::size_t x = 0; x < size; ++x) {
          const double a = coord(x) * ct + coord(y) * st;
          const double b = -coord(x) * st + coord(y) * ct;
          const double v = std::sin(kTwoPi * freq * a + pa) * std::sin(kTwoPi * freq * b + pb);
          out[y * size + x] = std::tanh(3.0 * v);
        }
      }
      break;
    }
    default: {  // concentric rings
      const double cx = 0.5 * (rng.uniform() - 0.5);
      const double cy = 0.5 * (rng.uniform() - 0.5);
      const double freq = 2.0 + 3.0 * rng.uniform();
      const double phase = rng.uniform() * kTwoPi;
      for (std::size_t y = 0; y < size; ++y) {
        for (std::size_t x = 0; x < size; ++x) {
          const double r = std::hypot(coord(x) - cx, coord(y) - cy);
          out[y * size + x] = std::sin(kTwoPi * freq * r + phase);
        }
      }
      break;
    }
  }
}

// Adds amplitude * pattern with random per-channel colour weights.
void add_coloured(const std::vector<double>& pattern, double amplitude, RngStream& rng,
                  double* image, std::size_t size) {
  for (std::size_t ch = 0; ch < ImageSet::kChannels; ++ch) {
    const double colour = amplitude * (0.25 + 0.75 * rng.uniform());
    double* plane = image + ch * size * size;
    for (std::size_t p = 0; p < size * size; ++p) plane[p] += colour * pattern[p];
  }
}

ImageSet make_split(const SyntheticImageSpec& spec, std::size_t count, std::uint64_t split) {
  ImageSet set;
  set.size = spec.image_size;
  set.pixels.assign(count * set.image_numel(), 0.0);
  set.labels.resize(count);
  const RngStream root = RngStream(spec.seed).child({rng_site::kData, split});
  std::vector<double> pattern;
  for (std::size_t i = 0; i < count; ++i) {
    RngStream rng = root.child(i);
    const std::size_t label = i % spec.classes;
    set.labels[i] = label;
    double* image = set.pixels.data() + i * set.image_numel();
    draw_pattern(label, spec.image_size, rng, pattern);
    add_coloured(pattern, 0.5 + 0.5 * rng.uniform(), rng, image, spec.image_size);
    if (spec.distractor > 0.0) {
      const std::size_t other = (label + 1 + rng.index(3)) % 4;
      draw_pattern(other, spec.image_size, rng, pattern);
      add_coloured(pattern, spec.distractor * (0.5 + 0.5 * rng.uniform()), rng, image,
                   spec.image_size);
    }
    if (spec.noise_std > 0.0) {
      for (std::size_t p = 0; p < set.image_numel(); ++p) image[p] += spec.noise_std * rng.normal();
    }
  }
  return set;
}

void normalize_with(ImageSet& set, const std::vector<double>& mean, const std::vector<double>& inv) {
  const std::size_t plane = set.size * set.size;
  for (std::size_t i = 0; i < set.count(); ++i) {
    for (std::size_t ch = 0; ch < ImageSet::kChannels; ++ch) {
      double* p = set.pixels.data() + i * set.image_numel() + ch * plane;
      for (std::size_t q = 0; q < plane; ++q) p[q] = (p[q] - mean[ch]) * inv[ch];
    }
  }
}

template <typename T>
void put(std::ostream& out, T value) {
  unsigned char bytes[sizeof(T)];
  std::memcpy(bytes, &value, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(T));
  out.write(reinterpret_cast<const char*>(bytes), sizeof(T));
}

template <typename T>
bool get(std::istream& in, T& value) {
  unsigned char bytes[sizeof(T)];
  if (!in.read(reinterpret_cast<char*>(bytes), sizeof(T))) return false;
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(T));
  std::memcpy(&value, bytes, sizeof(T));
  return true;
}

constexpr char kDataMagic[8] = {'D', 'G', 'D', 'A', 'T', 'A', '\0', '\0'};

std::size_t argmax_row(std::span<const double> v, std::size_t row, std::size_t cols) {
  const double* r = v.data() + row * cols;
  return static_cast<std::size_t>(std::max_element(r, r + cols) - r);
}

// Row-selection matrix (rows.size(), n) so that S * X gathers rows of X.
Tensor selection_matrix(const std::vector<std::size_t>& rows, std::size_t n) {
  std::vector<double> s(rows.size() * n, 0.0);
  for (std::size_t i = 0; i < rows.size(); ++i) s[i * n + rows[i]] = 1.0;
  return Tensor::from({rows.size(), n}, std::move(s));
}

bool finite(double v) { return std::isfinite(v); }

}  // namespace

// ---- Synthetic images -------------------------------------------------------------

void SyntheticImageSpec::validate() const {
  if (classes < 2 || classes > 4) {
    throw ConfigError("data.classes", "must be between 2 and 4, got " + std::to_string(classes));
  }
  if (image_size < 8) {
    throw ConfigError("data.image_size", "must be at least 8, got " + std::to_string(image_size));
  }
  if (train_count < classes) throw ConfigError("data.train_count", "needs one image per class");
  if (val_count == 0) throw ConfigError("data.val_count", "must be positive");
  if (!(noise_std >= 0.0) || !finite(noise_std)) {
    throw ConfigError("data.noise_std", "must be a finite nonnegative number");
  }
  if (!(distractor >= 0.0) || !finite(distractor)) {
    throw ConfigError("data.distractor", "must be a finite nonnegative number");
  }
}

ImageData gen_images(const SyntheticImageSpec& spec) {
  spec.validate();
  ImageData data{make_split(spec, spec.train_count, 0), make_split(spec, spec.val_count, 1)};
  const std::size_t plane = spec.image_size * spec.image_size;
  std::vector<double> mean(ImageSet::kChannels, 0.0), inv(ImageSet::kChannels, 1.0);
  for (std::size_t ch = 0; ch < ImageSet::kChannels; ++ch) {
    double s = 0.0, ss = 0.0;
    for (std::size_t i = 0; i < data.train.count(); ++i) {
      const double* p = data.train.pixels.data() + i * data.train.image_numel() + ch * plane;
      for (std::size_t q = 0; q < plane; ++q) s += p[q];
    }
    const double n = static_cast<double>(data.train.count() * plane);
    mean[ch] = s / n;
    for (std::size_t i = 0; i < data.train.count(); ++i) {
      const double* p = data.train.pixels.data() + i * data.train.image_numel() + ch * plane;
      for (std::size_t q = 0; q < plane; ++q) ss += (p[q] - mean[ch]) * (p[q] - mean[ch]);
    }
    const double sd = std::sqrt(ss / n);
    inv[ch] = sd > 0.0 ? 1.0 / sd : 1.0;
  }
  normalize_with(data.train, mean, inv);
  normalize_with(data.val, mean, inv);
  return data;
}

// ---- SBM graphs ------------------------------------------------------------------------

void SbmGraphSpec::validate() const {
  if (communities < 2) throw ConfigError("graph.communities", "needs at least 2 communities");
  if (nodes < communities) throw ConfigError("graph.nodes", "needs a node per community");
  if (!(p_in >= 0.0 && p_in <= 1.0)) throw ConfigError("graph.p_in", "must lie in [0, 1]");
  if (!(p_out >= 0.0 && p_out <= 1.0)) throw ConfigError("graph.p_out", "must lie in [0, 1]");
  if (!(p_in > p_out)) throw ConfigError("graph.p_in", "must exceed graph.p_out");
  if (labeled_per_class == 0) throw ConfigError("graph.labeled_per_class", "must be positive");
  if (labeled_per_class * communities + val_count >= nodes) {
    throw ConfigError("graph.val_count", "labeled and validation nodes leave no test nodes");
  }
  if (labeled_per_class > nodes / communities) {
    throw ConfigError("graph.labeled_per_class", "exceeds the community size");
  }
  if (feature_dim == 0) throw ConfigError("graph.feature_dim", "must be positive");
  if (!(feature_noise >= 0.0) || !finite(feature_noise)) {
    throw ConfigError("graph.feature_noise", "must be a finite nonnegative number");
  }
}

GraphInstance gen_sbm(const SbmGraphSpec& spec) {
  spec.validate();
  const std::size_t n = spec.nodes;
  const RngStream root = RngStream(spec.seed).child(rng_site::kData);
  GraphInstance g;
  g.labels.resize(n);
  for (std::size_t i = 0; i < n; ++i) g.labels[i] = i % spec.communities;

  RngStream edge_rng = root.child(0);
  std::vector<double> adj(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      const double p = g.labels[i] == g.labels[j] ? spec.p_in : spec.p_out;
      if (edge_rng.bernoulli(p)) adj[i * n + j] = adj[j * n + i] = 1.0;
    }
  }
  g.normalized_adjacency = normalize_adjacency(adj, n);

  RngStream feat_rng = root.child(1);
  const std::size_t f = spec.feature_dim;
  std::vector<double> means(spec.communities * f);
  for (std::size_t k = 0; k < spec.communities; ++k) {
    double norm = 0.0;
    for (std::size_t d = 0; d < f; ++d) {
      means[k * f + d] = feat_rng.normal();
      norm += means[k * f + d] * means[k * f + d];
    }
    norm = std::sqrt(norm);
    for (std::size_t d = 0; d < f; ++d) means[k * f + d] /= norm;
  }
  std::vector<double> x(n * f);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t d = 0; d < f; ++d) {
      x[i * f + d] = means[g.labels[i] * f + d] + spec.feature_noise * feat_rng.normal();
    }
  }
  g.node_features = Tensor::from({n, f}, std::move(x));

  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  RngStream split_rng = root.child(2);
  for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[split_rng.index(i)]);
  std::vector<std::size_t> taken(spec.communities, 0);
  std::vector<std::size_t> rest;
  for (std::size_t i : order) {
    if (taken[g.labels[i]] < spec.labeled_per_class) {
      ++taken[g.labels[i]];
      g.train_index.push_back(i);
    } else {
      rest.push_back(i);
    }
  }
  g.val_index.assign(rest.begin(), rest.begin() + static_cast<std::ptrdiff_t>(spec.val_count));
  g.test_index.assign(rest.begin() + static_cast<std::ptrdiff_t>(spec.val_count), rest.end());
  return g;
}

// ---- Dataset cache -----------------------------------------------------------------

std::uint64_t spec_hash(const SyntheticImageSpec& spec) {
  std::ostringstream s;
  s.precision(17);
  s << spec.classes << ',' << spec.image_size << ',' << spec.train_count << ','
    << spec.val_count << ',' << spec.noise_std << ',' << spec.distractor << ',' << spec.seed
    << ",v" << kDatasetCacheVersion;
  return fnv1a(s.str());
}

void save_image_cache(const std::filesystem::path& path, const ImageData& data,
                      std::uint64_t hash) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write dataset cache " + path.string());
  out.write(kDataMagic, sizeof kDataMagic);
  put<std::uint32_t>(out, kDatasetCacheVersion);
  put<std::uint64_t>(out, hash);
  for (const ImageSet* set : {&data.train, &data.val}) {
    put<std::uint64_t>(out, set->count());
    put<std::uint64_t>(out, set->size);
    for (double v : set->pixels) put<double>(out, v);
    for (std::size_t l : set->labels) put<std::uint64_t>(out, l);
  }
  if (!out) throw std::runtime_error("failed writing dataset cache " + path.string());
}

bool load_image_cache(const std::filesystem::path& path, std::uint64_t hash, ImageData& result) {
  std::ifstream in(path, std::ios::binary);
  if (!in) return false;
  char magic[8];
  if (!in.read(magic, sizeof magic) || std::memcmp(magic, kDataMagic, sizeof magic) != 0) {
    return false;
  }
  std::uint32_t version = 0;
  std::uint64_t stored = 0;
  if (!get(in, version) || version != kDatasetCacheVersion || !get(in, stored) || stored != hash) {
    return false;
  }
  ImageData data;
  for (ImageSet* set : {&data.train, &data.val}) {
    std::uint64_t count = 0, size = 0;
    if (!get(in, count) || !get(in, size)) return false;
    set->size = size;
    set->pixels.resize(count * set->image_numel());
    set->labels.resize(count);
    for (double& v : set->pixels) {
      if (!get(in, v)) return false;
    }
    for (std::size_t& l : set->labels) {
      std::uint64_t v = 0;
      if (!get(in, v)) return false;
      l = v;
    }
  }
  result = std::move(data);
  return true;
}

// ---- Training ------------------------------------------------------------------------

void TrainConfig::validate() const {
  if (epochs == 0) throw ConfigError("train.epochs", "must be positive");
  if (batch_size < 2) throw ConfigError("train.batch_size", "must be at least 2");
  if (!(lr >= 0.0) || !finite(lr)) throw ConfigError("train.lr", "must be finite and >= 0");
  if (!(momentum >= 0.0 && momentum < 1.0)) {
    throw ConfigError("train.momentum", "must lie in [0, 1)");
  }
  if (!(weight_decay >= 0.0) || !finite(weight_decay)) {
    throw ConfigError("train.weight_decay", "must be finite and >= 0");
  }
  for (double f : lr_decay_at) {
    if (!(f > 0.0 && f < 1.0)) throw ConfigError("train.lr_decay_at", "fractions must lie in (0, 1)");
  }
  if (!(lr_decay_factor > 0.0 && lr_decay_factor <= 1.0)) {
    throw ConfigError("train.lr_decay_factor", "must lie in (0, 1]");
  }
}

double learning_rate(const TrainConfig& cfg, std::size_t epoch) {
  double lr = cfg.lr;
  for (double f : cfg.lr_decay_at) {
    const auto milestone =
        static_cast<std::size_t>(std::floor(f * static_cast<double>(cfg.epochs)));
    if (epoch >= milestone) lr *= cfg.lr_decay_factor;
  }
  return lr;
}

Sgd::Sgd(std::vector<NamedTensor> params, double momentum, double weight_decay)
    : params_(std::move(params)), momentum_(momentum), weight_decay_(weight_decay) {
  velocity_.reserve(params_.size());
  for (const auto& p : params_) velocity_.emplace_back(p.tensor.numel(), 0.0);
}

void Sgd::step(double lr) {
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Tensor& t = params_[i].tensor;
    const std::vector<double> g = t.grad();
    const std::span<double> w = t.mutable_values();
    std::vector<double>& v = velocity_[i];
    for (std::size_t j = 0; j < w.size(); ++j) {
      v[j] = momentum_ * v[j] + (g[j] + weight_decay_ * w[j]);
      w[j] -= lr * v[j];
    }
  }
}

void Sgd::zero_grad() {
  for (auto& p : params_) p.tensor.zero_grad();
}

std::string_view to_string(RunStatus s) { return s == RunStatus::kOk ? "ok" : "diverged"; }

double RunRecord::final_train_acc() const { return epochs.empty() ? 0.0 : epochs.back().train_acc; }
double RunRecord::final_val_acc() const { return epochs.empty() ? 0.0 : epochs.back().val_acc; }
double RunRecord::final_val_loss() const { return epochs.empty() ? 0.0 : epochs.back().val_loss; }
double RunRecord::gap() const { return 100.0 * (final_train_acc() - final_val_acc()); }

bool RunRecord::same_result(const RunRecord& o) const {
  return config_hash == o.config_hash && label == o.label && seed == o.seed &&
         status == o.status && epochs == o.epochs;
}

std::string to_jsonl(const RunRecord& r) {
  nlohmann::json j;
  j["config_hash"] = r.config_hash;
  j["label"] = r.label;
  j["seed"] = r.seed;
  j["status"] = to_string(r.status);
  j["wall_seconds"] = r.wall_seconds;
  j["final_train_acc"] = r.final_train_acc();
  j["final_val_acc"] = r.final_val_acc();
  j["gap"] = r.gap();
  nlohmann::json epochs = nlohmann::json::array();
  for (const auto& e : r.epochs) {
    epochs.push_back({{"epoch", e.epoch},
                      {"lr", e.lr},
                      {"rho_begin", e.rho_begin},
                      {"rho_end", e.rho_end},
                      {"train_loss", e.train_loss},
                      {"train_acc", e.train_acc},
                      {"val_loss", e.val_loss},
                      {"val_acc", e.val_acc}});
  }
  j["epochs"] = std::move(epochs);
  return j.dump();
}

RunRecord run_record_from_jsonl(const std::string& line) {
  const auto j = nlohmann::json::parse(line);
  RunRecord r;
  r.config_hash = j.at("config_hash").get<std::string>();
  r.label = j.at("label").get<std::string>();
  r.seed = j.at("seed").get<std::uint64_t>();
  r.status = j.at("status").get<std::string>() == "ok" ? RunStatus::kOk : RunStatus::kDiverged;
  r.wall_seconds = j.at("wall_seconds").get<double>();
  for (const auto& e : j.at("epochs")) {
    r.epochs.push_back({e.at("epoch").get<std::size_t>(), e.at("lr").get<double>(),
                        e.at("rho_begin").get<double>(), e.at("rho_end").get<double>(),
                        e.at("train_loss").get<double>(), e.at("train_acc").get<double>(),
                        e.at("val_loss").get<double>(), e.at("val_acc").get<double>()});
  }
  return r;
}

EvalResult evaluate(TinyResNet& net, const ImageSet& set, std::size_t batch_size) {
  const std::size_t n = set.count();
  const std::size_t classes = net.config().classes;
  const StepContext ctx{Mode::kEval, RngStream(0).child(rng_site::kEval), 0.0};
  double loss = 0.0;
  std::size_t correct = 0;
  for (std::size_t begin = 0; begin < n; begin += batch_size) {
    const std::size_t end = std::min(n, begin + batch_size);
    const std::size_t m = end - begin;
    std::vector<double> pixels(set.pixels.begin() + static_cast<std::ptrdiff_t>(begin * set.image_numel()),
                               set.pixels.begin() + static_cast<std::ptrdiff_t>(end * set.image_numel()));
    const Tensor x = Tensor::from({m, ImageSet::kChannels, set.size, set.size}, std::move(pixels));
    const std::span<const std::size_t> labels(set.labels.data() + begin, m);
    const Tensor logits = net.forward(x, ctx);
    loss += cross_entropy(logits, labels).item() * static_cast<double>(m);
    for (std::size_t i = 0; i < m; ++i) {
      if (argmax_row(logits.values(), i, classes) == labels[i]) ++correct;
    }
  }
  return {loss / static_cast<double>(n), static_cast<double>(correct) / static_cast<double>(n)};
}

EvalResult evaluate(const TwoLayerGcn& net, const GraphInstance& g,
                    const std::vector<std::size_t>& nodes) {
  const StepContext ctx{Mode::kEval, RngStream(0).child(rng_site::kEval), 0.0};
  const Tensor logits = net.forward(g, ctx);
  const std::size_t classes = net.config().classes;
  std::vector<std::size_t> labels;
  std::size_t correct = 0;
  for (std::size_t i : nodes) {
    labels.push_back(g.labels[i]);
    if (argmax_row(logits.values(), i, classes) == g.labels[i]) ++correct;
  }
  const Tensor picked = matmul(selection_matrix(nodes, g.num_nodes()), logits);
  return {cross_entropy(picked, labels).item(),
          static_cast<double>(correct) / static_cast<double>(nodes.size())};
}

double step_rho(const RegularizerConfig& reg, std::size_t t, std::size_t total) {
  if (reg.kind == RegularizerKind::kNone) return 0.0;
  // Steps 0..total-1 span the schedule, so the last one runs at rho_target.
  SchedulerState s;
  s.kind = reg.scheduler_kind;
  s.rho_target = reg.rho_target;
  s.total_steps = total > 1 ? total - 1 : 1;
  s.step = total > 1 ? t : 1;
  return schedule_rho(s);
}

RunRecord train_images(TinyResNet& net, const ImageData& data, const TrainConfig& cfg,
                       std::uint64_t seed) {
  cfg.validate();
  const auto t0 = std::chrono::steady_clock::now();
  RunRecord rec;
  rec.seed = seed;
  const RngStream root(seed);
  const ImageSet& train = data.train;
  const std::size_t n = train.count();
  const std::size_t numel = train.image_numel();
  const std::size_t size = train.size;
  // A trailing batch of one sample would break batch statistics; drop it.
  const std::size_t batches = n / cfg.batch_size + (n % cfg.batch_size >= 2 ? 1 : 0);
  const std::size_t total = cfg.epochs * batches;
  const RegularizerConfig& reg = net.config().regularizer;
  Sgd opt(net.parameters(), cfg.momentum, cfg.weight_decay);

  std::vector<std::size_t> order(n);
  std::size_t t = 0;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    EpochRecord er;
    er.epoch = epoch;
    er.lr = learning_rate(cfg, epoch);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    RngStream shuffle = root.child({rng_site::kShuffle, epoch});
    for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[shuffle.index(i)]);
    RngStream augment = root.child({rng_site::kAugment, epoch});

    double loss_sum = 0.0;
    std::size_t seen = 0;
    for (std::size_t b = 0; b < batches; ++b, ++t) {
      const std::size_t begin = b * cfg.batch_size;
      const std::size_t m = std::min(cfg.batch_size, n - begin);
      std::vector<double> pixels(m * numel);
      std::vector<std::size_t> labels(m);
      for (std::size_t i = 0; i < m; ++i) {
        const std::size_t src = order[begin + i];
        const double* img = train.pixels.data() + src * numel;
        double* dst = pixels.data() + i * numel;
        labels[i] = train.labels[src];
        const bool flip = cfg.flip && augment.bernoulli(0.5);
        for (std::size_t row = 0; row < ImageSet::kChannels * size; ++row) {
          const double* in = img + row * size;
          double* out = dst + row * size;
          if (flip) {
            std::reverse_copy(in, in + size, out);
          } else {
            std::copy(in, in + size, out);
          }
        }
      }
      const double rho = step_rho(reg, t, total);
      if (b == 0) er.rho_begin = rho;
      er.rho_end = rho;
      const StepContext ctx{Mode::kTrain, root.child({rng_site::kStep, t}), rho};
      const Tensor x = Tensor::from({m, ImageSet::kChannels, size, size}, std::move(pixels));
      Tensor loss = cross_entropy(net.forward(x, ctx), labels);
      if (!finite(loss.item())) {
        rec.status = RunStatus::kDiverged;
        break;
      }
      opt.zero_grad();
      loss.backward();
      opt.step(er.lr);
      loss_sum += loss.item() * static_cast<double>(m);
      seen += m;
    }
    if (rec.status == RunStatus::kDiverged) break;
    er.train_loss = loss_sum / static_cast<double>(seen);
    const EvalResult tr = evaluate(net, train);
    const EvalResult va = evaluate(net, data.val);
    er.train_acc = tr.acc;
    er.val_loss = va.loss;
    er.val_acc = va.acc;
    rec.epochs.push_back(er);
    if (!finite(tr.loss) || !finite(va.loss)) {
      rec.status = RunStatus::kDiverged;
      break;
    }
  }
  rec.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return rec;
}

RunRecord train_gcn(TwoLayerGcn& net, const GraphInstance& g, const TrainConfig& cfg,
                    std::uint64_t seed) {
  cfg.validate();
  const auto t0 = std::chrono::steady_clock::now();
  RunRecord rec;
  rec.seed = seed;
  const RngStream root(seed);
  const RegularizerConfig& reg = net.config().regularizer;
  Sgd opt(net.parameters(), cfg.momentum, cfg.weight_decay);
  const Tensor pick = selection_matrix(g.train_index, g.num_nodes());
  std::vector<std::size_t> labels;
  for (std::size_t i : g.train_index) labels.push_back(g.labels[i]);

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    EpochRecord er;
    er.epoch = epoch;
    er.lr = learning_rate(cfg, epoch);
    er.rho_begin = er.rho_end = step_rho(reg, epoch, cfg.epochs);
    const StepContext ctx{Mode::kTrain, root.child({rng_site::kStep, epoch}), er.rho_begin};
    Tensor loss = cross_entropy(matmul(pick, net.forward(g, ctx)), labels);
    if (!finite(loss.item())) {
      rec.status = RunStatus::kDiverged;
      break;
    }
    opt.zero_grad();
    loss.backward();
    opt.step(er.lr);
    er.train_loss = loss.item();
    er.train_acc = evaluate(net, g, g.train_index).acc;
    const EvalResult va = evaluate(net, g, g.val_index);
    er.val_loss = va.loss;
    er.val_acc = va.acc;
    rec.epochs.push_back(er);
  }
  rec.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return rec;
}

// ---- Experiments ---------------------------------------------------------------------

std::string_view to_string(Task t) { return t == Task::kImage ? "image" : "node_graph"; }

TinyResNetConfig ExperimentConfig::cnn_config() const {
  TinyResNetConfig c = cnn;
  c.image_size = images.image_size;
  c.classes = images.classes;
  c.in_channels = ImageSet::kChannels;
  c.regularizer = regularizer;
  return c;
}

TwoLayerGcnConfig ExperimentConfig::gcn_config() const {
  TwoLayerGcnConfig c = gcn;
  c.in_features = graph.feature_dim;
  c.classes = graph.communities;
  c.regularizer = regularizer;
  return c;
}

void ExperimentConfig::validate() const {
  if (label.empty()) throw ConfigError("label", "must not be empty");
  regularizer.validate();
  train.validate();
  if (seeds.empty()) throw ConfigError("seeds", "needs at least one seed");
  if (task == Task::kImage) {
    images.validate();
    const TinyResNetConfig c = cnn_config();
    c.validate();
    // Walk the resolutions to check every insertion point.
    std::size_t size = c.image_size;
    for (std::size_t g = 0; g < c.groups.size(); ++g) {
      if (g > 0) size = (size + 1) / 2;
      const bool regularized = std::find(c.regularize_groups.begin(), c.regularize_groups.end(),
                                         g) != c.regularize_groups.end();
      if (regularized && regularizer.kind != RegularizerKind::kNone) {
        regularizer.validate_at(size, size, c.groups[g].channels);
      }
    }
  } else {
    graph.validate();
    const TwoLayerGcnConfig c = gcn_config();
    c.validate(graph.nodes);
    if (regularizer.kind != RegularizerKind::kNone) {
      regularizer.validate_at(graph.nodes, 1, c.hidden);
    }
  }
}

std::string config_hash(const ExperimentConfig& cfg) {
  ExperimentConfig c = cfg;
  c.label = "-";
  c.seeds = {0};
  c.out_dir = "-";
  return hex16(fnv1a(serialize_config(c)));
}

const ImageData& DataCache::images(const SyntheticImageSpec& spec) {
  for (const auto& [s, d] : images_) {
    if (s == spec) return d;
  }
  ImageData data;
  const std::uint64_t h = spec_hash(spec);
  const std::filesystem::path file =
      dir_.empty() ? std::filesystem::path() : dir_ / ("images_" + hex16(h) + ".bin");
  if (file.empty() || !load_image_cache(file, h, data)) {
    data = gen_images(spec);
    if (!file.empty()) {
      std::filesystem::create_directories(dir_);
      save_image_cache(file, data, h);
    }
  }
  images_.emplace_back(spec, std::move(data));
  return images_.back().second;
}

const GraphInstance& DataCache::graph(const SbmGraphSpec& spec) {
  for (const auto& [s, g] : graphs_) {
    if (s == spec) return g;
  }
  graphs_.emplace_back(spec, gen_sbm(spec));
  return graphs_.back().second;
}

RunRecord run_experiment(const ExperimentConfig& cfg, std::uint64_t seed, DataCache& cache) {
  cfg.validate();
  const RngStream init = RngStream(seed).child(rng_site::kInit);
  RunRecord rec;
  if (cfg.task == Task::kImage) {
    const ImageData& data = cache.images(cfg.images);
    TinyResNet net(cfg.cnn_config(), init);
    rec = train_images(net, data, cfg.train, seed);
  } else {
    const GraphInstance& g = cache.graph(cfg.graph);
    TwoLayerGcn net(cfg.gcn_config(), g.num_nodes(), init);
    rec = train_gcn(net, g, cfg.train, seed);
  }
  rec.config_hash = config_hash(cfg);
  rec.label = cfg.label;
  return rec;
}

MetricSummary summarize(std::vector<double> values) {
  if (values.empty()) return {};
  std::sort(values.begin(), values.end());
  const std::size_t n = values.size();
  const double median =
      n % 2 == 1 ? values[n / 2] : 0.5 * (values[n / 2 - 1] + values[n / 2]);
  return {median, values.front(), values.back()};
}

SummaryRow summarize_runs(const std::string& label, const std::vector<RunRecord>& runs) {
  SummaryRow row;
  row.label = label;
  if (!runs.empty()) row.config_hash = runs.front().config_hash;
  row.runs = runs.size();
  std::vector<double> train, val, gap, loss;
  for (const auto& r : runs) {
    if (r.status != RunStatus::kOk) {
      ++row.diverged;
      continue;
    }
    train.push_back(100.0 * r.final_train_acc());
    val.push_back(100.0 * r.final_val_acc());
    gap.push_back(r.gap());
    loss.push_back(r.final_val_loss());
  }
  row.train_acc = summarize(train);
  row.val_acc = summarize(val);
  row.gap = summarize(gap);
  row.val_loss = summarize(loss);
  return row;
}

MultiSeedResult multi_seed(const std::vector<ExperimentConfig>& configs,
                           const std::vector<std::uint64_t>& seeds, DataCache& cache,
                           const std::function<void(const RunRecord&)>& on_run) {
  if (seeds.size() < 3) throw ContractError("multi_seed: needs at least 3 seeds");
  for (const auto& c : configs) c.validate();
  MultiSeedResult out;
  for (const auto& c : configs) {
    std::vector<RunRecord> runs;
    for (std::uint64_t s : seeds) {
      runs.push_back(run_experiment(c, s, cache));
      if (on_run) on_run(runs.back());
    }
    out.summary.push_back(summarize_runs(c.label, runs));
    out.runs.insert(out.runs.end(), runs.begin(), runs.end());
  }
  return out;
}

std::vector<Table1Cell> table1_cells(const std::vector<double>& alphas,
                                     const std::vector<SamplingStrategy>& samplings,
                                     const std::vector<Application>& applications) {
  std::vector<Table1Cell> cells{{.baseline = true}};
  for (SamplingStrategy s : samplings) {
    for (Application a : applications) {
      for (double alpha : alphas) cells.push_back({s, alpha, a, false});
    }
  }
  return cells;
}

ExperimentConfig table1_config(const ExperimentConfig& base, const Table1Cell& cell) {
  ExperimentConfig c = base;
  if (cell.baseline) {
    c.regularizer = RegularizerConfig{.kind = RegularizerKind::kNone};
    c.label = "baseline";
    return c;
  }
  c.regularizer.kind = RegularizerKind::kPartialReasoning;
  c.regularizer.alpha = cell.alpha;
  c.regularizer.sampling = cell.sampling;
  c.regularizer.application = cell.application;
  std::ostringstream label;
  label << to_string(cell.sampling) << '/' << to_string(cell.application) << "/alpha="
        << cell.alpha;
  c.label = label.str();
  return c;
}

}  // namespace dropgraph
