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

#include "dropgraph/backbones.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>

#include "dropgraph/errors.hpp"

namespace dropgraph {

// ---- Tiny residual CNN ----------------------------------------------------------

void TinyResNetConfig::validate() const {
  if (in_channels == 0) throw ConfigError("model.in_channels", "must be positive");
  if (image_size < 8) {
    throw ConfigError("data.image_size", "must be at least 8, got " + std::to_string(image_size));
  }
  if (stem_channels == 0 || stem_channels % 4 != 0) {
    throw ConfigError("model.stem_channels", "must be a positive multiple of 4");
  }
  if (groups.empty()) throw ConfigError("model.groups", "needs at least one group");
  std::size_t size = image_size;
  for (std::size_t g = 0; g < groups.size(); ++g) {
    if (groups[g].blocks == 0) throw ConfigError("model.groups", "every group needs a block");
    if (groups[g].channels == 0 || groups[g].channels % 4 != 0) {
      throw ConfigError("model.groups", "channel counts must be positive multiples of 4");
    }
    if (g > 0) size = (size + 1) / 2;
  }
  if (classes < 2) throw ConfigError("data.classes", "needs at least 2 classes");
  for (std::size_t g : regularize_groups) {
    if (g >= groups.size()) {
      throw ConfigError("model.regularize_groups",
                        "group " + std::to_string(g) + " does not exist");
    }
  }
  regularizer.validate();
}

TinyResNet::TinyResNet(const TinyResNetConfig& cfg, RngStream init_rng) : cfg_(cfg) {
  cfg_.validate();
  stem_ = ConvParams::make(cfg_.in_channels, cfg_.stem_channels, 3, 1, 1,
                           init_rng.child({0, 0}), false);
  stem_bn_ = NormState::make(cfg_.stem_channels);
  std::size_t in = cfg_.stem_channels;
  std::size_t size = cfg_.image_size;
  std::uint64_t index = 0;
  for (std::size_t g = 0; g < cfg_.groups.size(); ++g) {
    const bool regularized = std::find(cfg_.regularize_groups.begin(),
                                       cfg_.regularize_groups.end(), g) !=
                             cfg_.regularize_groups.end();
    for (std::size_t b = 0; b < cfg_.groups[g].blocks; ++b, ++index) {
      const std::size_t out = cfg_.groups[g].channels;
      const std::size_t stride = (g > 0 && b == 0) ? 2 : 1;
      const RngStream block_rng = init_rng.child({1, index});
      Block blk;
      blk.conv1 = ConvParams::make(in, out, 3, stride, 1, block_rng.child(0), false);
      blk.bn1 = NormState::make(out);
      blk.conv2 = ConvParams::make(out, out, 3, 1, 1, block_rng.child(1), false);
      blk.bn2 = NormState::make(out);
      if (stride != 1 || in != out) {
        blk.proj = ConvParams::make(in, out, 1, stride, 0, block_rng.child(2), false);
        blk.proj_bn = NormState::make(out);
      }
      size = (size + 2 - 3) / stride + 1;
      blk.out_size = size;
      if (regularized && cfg_.regularizer.kind != RegularizerKind::kNone) {
        // Regularizer parameters come from their own init paths so the
        // backbone weights do not depend on the regularizer choice.
        const RngStream reg_rng = init_rng.child({2, index});
        blk.main_reg = Regularizer(cfg_.regularizer, size, size, out, reg_rng.child(0));
        const bool masks = cfg_.regularizer.kind == RegularizerKind::kDropBlock ||
                           cfg_.regularizer.kind == RegularizerKind::kDropGraph;
        if (cfg_.regularize_skip && masks) {
          blk.skip_reg = Regularizer(cfg_.regularizer, size, size, out, reg_rng.child(1));
        }
      }
      blocks_.push_back(std::move(blk));
      in = out;
    }
  }
  head_ = LinearParams::make(in, cfg_.classes, init_rng.child({3, 0}));
}

Tensor TinyResNet::forward(const Tensor& x, const StepContext& ctx) {
  if (x.rank() != 4 || x.dim(1) != cfg_.in_channels || x.dim(2) != cfg_.image_size ||
      x.dim(3) != cfg_.image_size) {
    throw DimensionError("TinyResNet: expected (n, " + std::to_string(cfg_.in_channels) + ", " +
                         std::to_string(cfg_.image_size) + ", " +
                         std::to_string(cfg_.image_size) + ") input, got " +
                         shape_str(x.shape()));
  }
  Tensor h = relu(batch_norm2d(conv2d(x, stem_), stem_bn_, ctx.mode));
  for (std::size_t i = 0; i < blocks_.size(); ++i) {
    Block& blk = blocks_[i];
    Tensor main = relu(batch_norm2d(conv2d(h, blk.conv1), blk.bn1, ctx.mode));
    main = batch_norm2d(conv2d(main, blk.conv2), blk.bn2, ctx.mode);
    Tensor skip = blk.proj ? batch_norm2d(conv2d(h, *blk.proj), *blk.proj_bn, ctx.mode) : h;

    if (!blk.main_reg.active_in(ctx.mode)) {
      h = relu(add(main, skip));
      continue;
    }
    const RngStream block_rng = ctx.rng.child(i);
    const StepContext main_ctx{ctx.mode, block_rng.child(1), ctx.rho};
    const StepContext skip_ctx{ctx.mode, block_rng.child(2), ctx.rho};
    std::optional<DropMask> mask;
    const RegularizerKind kind = blk.main_reg.kind();
    if (kind == RegularizerKind::kDropBlock || kind == RegularizerKind::kDropGraph) {
      mask = sample_block_mask(main.dim(0), main.dim(2), main.dim(3),
                               cfg_.regularizer.block_size, ctx.rho,
                               block_rng.child(rng_site::kMask));
    }
    const DropMask* shared = mask ? &*mask : nullptr;
    if (blk.skip_reg.active()) skip = blk.skip_reg.forward(skip, skip_ctx, shared);
    h = blk.main_reg.forward(relu(add(main, skip)), main_ctx, shared);
  }
  return linear(global_avg_pool(h), head_);
}

std::vector<NamedTensor> TinyResNet::parameters() const {
  std::vector<NamedTensor> out{{"stem.kernel", stem_.kernel},
                               {"stem.bn.gamma", stem_bn_.gamma},
                               {"stem.bn.beta", stem_bn_.beta}};
  for (std::size_t i = 0; i < blocks_.size(); ++i) {
    const Block& blk = blocks_[i];
    const std::string p = "block" + std::to_string(i);
    out.push_back({p + ".conv1.kernel", blk.conv1.kernel});
    out.push_back({p + ".bn1.gamma", blk.bn1.gamma});
    out.push_back({p + ".bn1.beta", blk.bn1.beta});
    out.push_back({p + ".conv2.kernel", blk.conv2.kernel});
    out.push_back({p + ".bn2.gamma", blk.bn2.gamma});
    out.push_back({p + ".bn2.beta", blk.bn2.beta});
    if (blk.proj) {
      out.push_back({p + ".proj.kernel", blk.proj->kernel});
      out.push_back({p + ".proj_bn.gamma", blk.proj_bn->gamma});
      out.push_back({p + ".proj_bn.beta", blk.proj_bn->beta});
    }
    for (auto& t : blk.main_reg.parameters(p + ".reg")) out.push_back(std::move(t));
    for (auto& t : blk.skip_reg.parameters(p + ".skip_reg")) out.push_back(std::move(t));
  }
  out.push_back({"head.weight", head_.weight});
  out.push_back({"head.bias", head_.bias});
  return out;
}

std::vector<NamedTensor> TinyResNet::state() const {
  std::vector<NamedTensor> out = parameters();
  auto stats = [&out](const std::string& name, const NormState& s) {
    out.push_back({name + ".running_mean", s.running_mean});
    out.push_back({name + ".running_var", s.running_var});
  };
  stats("stem.bn", stem_bn_);
  for (std::size_t i = 0; i < blocks_.size(); ++i) {
    const std::string p = "block" + std::to_string(i);
    stats(p + ".bn1", blocks_[i].bn1);
    stats(p + ".bn2", blocks_[i].bn2);
    if (blocks_[i].proj_bn) stats(p + ".proj_bn", *blocks_[i].proj_bn);
  }
  return out;
}

void TinyResNet::load_state(const std::vector<NamedTensor>& entries, bool strict) {
  assign_by_name(state(), entries, strict);
}

// ---- Two-layer GCN ----------------------------------------------------------------

Tensor normalize_adjacency(const std::vector<double>& adjacency, std::size_t n) {
  if (adjacency.size() != n * n) {
    throw DimensionError("normalize_adjacency: expected " + std::to_string(n * n) + " entries");
  }
  std::vector<double> a = adjacency;
  for (std::size_t i = 0; i < n; ++i) a[i * n + i] += 1.0;
  std::vector<double> inv_sqrt_deg(n);
  for (std::size_t i = 0; i < n; ++i) {
    double deg = 0.0;
    for (std::size_t j = 0; j < n; ++j) deg += a[i * n + j];
    inv_sqrt_deg[i] = 1.0 / std::sqrt(deg);
  }
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) a[i * n + j] *= inv_sqrt_deg[i] * inv_sqrt_deg[j];
  }
  return Tensor::from({n, n}, std::move(a));
}

void TwoLayerGcnConfig::validate(std::size_t num_nodes) const {
  if (in_features == 0) throw ConfigError("model.in_features", "must be positive");
  if (hidden == 0 || hidden % 4 != 0) {
    throw ConfigError("model.hidden", "must be a positive multiple of 4, got " +
                                          std::to_string(hidden));
  }
  if (classes < 2) throw ConfigError("data.communities", "needs at least 2 classes");
  if (regularizer.block_size != 1 &&
      (regularizer.kind == RegularizerKind::kDropBlock ||
       regularizer.kind == RegularizerKind::kDropGraph)) {
    throw ConfigError("regularizer.block_size", "node graphs use block size 1");
  }
  if (num_nodes == 0) throw ConfigError("data.nodes", "must be positive");
  regularizer.validate();
}

TwoLayerGcn::TwoLayerGcn(const TwoLayerGcnConfig& cfg, std::size_t num_nodes,
                         RngStream init_rng)
    : cfg_(cfg),
      w1_(Tensor::zeros({cfg.in_features, cfg.hidden}, true)),
      w2_(Tensor::zeros({cfg.hidden, cfg.classes}, true)) {
  cfg_.validate(num_nodes);
  kaiming_normal(w1_, cfg_.in_features, init_rng.child(0));
  kaiming_normal(w2_, cfg_.hidden, init_rng.child(1));
  if (cfg_.regularizer.kind != RegularizerKind::kNone) {
    reg_ = Regularizer(cfg_.regularizer, num_nodes, 1, cfg_.hidden, init_rng.child(2));
  }
}

Tensor TwoLayerGcn::forward(const GraphInstance& g, const StepContext& ctx) const {
  const Tensor& a = g.normalized_adjacency;
  Tensor h = relu(matmul(a, matmul(g.node_features, w1_)));
  if (reg_.active_in(ctx.mode)) {
    h = feature_map_to_nodes(reg_.forward(nodes_to_feature_map(h), ctx));
  }
  return matmul(a, matmul(h, w2_));
}

std::vector<NamedTensor> TwoLayerGcn::parameters() const {
  std::vector<NamedTensor> out{{"gcn1.weight", w1_}, {"gcn2.weight", w2_}};
  for (auto& t : reg_.parameters("reg")) out.push_back(std::move(t));
  return out;
}

void TwoLayerGcn::load_state(const std::vector<NamedTensor>& entries, bool strict) {
  assign_by_name(parameters(), entries, strict);
}

// ---- Checkpoints --------------------------------------------------------------------

namespace {

constexpr char kMagic[8] = {'D', 'G', 'C', 'K', 'P', 'T', '\0', '\0'};

template <typename T>
void put_le(std::ostream& out, T value) {
  static_assert(std::is_trivially_copyable_v<T>);
  unsigned char bytes[sizeof(T)];
  std::memcpy(bytes, &value, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(T));
  out.write(reinterpret_cast<const char*>(bytes), sizeof(T));
}

template <typename T>
T get_le(std::istream& in) {
  unsigned char bytes[sizeof(T)];
  if (!in.read(reinterpret_cast<char*>(bytes), sizeof(T))) {
    throw std::runtime_error("checkpoint: truncated file");
  }
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(T));
  T value;
  std::memcpy(&value, bytes, sizeof(T));
  return value;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const std::vector<NamedTensor>& entries) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("checkpoint: cannot write " + path.string());
  out.write(kMagic, sizeof(kMagic));
  put_le<std::uint32_t>(out, kCheckpointVersion);
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(entries.size()));
  for (const auto& [name, t] : entries) {
    put_le<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    put_le<std::uint32_t>(out, static_cast<std::uint32_t>(t.rank()));
    for (std::size_t d : t.shape()) put_le<std::uint64_t>(out, d);
    for (double v : t.values()) put_le<double>(out, v);
  }
  if (!out) throw std::runtime_error("checkpoint: write failed for " + path.string());
}

std::vector<NamedTensor> load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("checkpoint: cannot read " + path.string());
  char magic[sizeof(kMagic)];
  if (!in.read(magic, sizeof(magic)) || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
    throw std::runtime_error("checkpoint: bad magic in " + path.string());
  }
  const auto version = get_le<std::uint32_t>(in);
  if (version != kCheckpointVersion) {
    throw std::runtime_error("checkpoint: unsupported version " + std::to_string(version));
  }
  const auto count = get_le<std::uint32_t>(in);
  std::vector<NamedTensor> out;
  out.reserve(count);
  for (std::uint32_t e = 0; e < count; ++e) {
    const auto len = get_le<std::uint32_t>(in);
    std::string name(len, '\0');
    if (!in.read(name.data(), len)) throw std::runtime_error("checkpoint: truncated name");
    const auto rank = get_le<std::uint32_t>(in);
    Shape shape(rank);
    for (auto& d : shape) d = static_cast<std::size_t>(get_le<std::uint64_t>(in));
    std::vector<double> values(shape_numel(shape));
    for (double& v : values) v = get_le<double>(in);
    out.push_back({std::move(name), Tensor::from(std::move(shape), std::move(values))});
  }
  return out;
}

void assign_by_name(const std::vector<NamedTensor>& targets,
                    const std::vector<NamedTensor>& entries, bool strict) {
  std::map<std::string, const Tensor*> by_name;
  for (const auto& e : entries) by_name[e.name] = &e.tensor;
  for (const auto& [name, target] : targets) {
    const auto it = by_name.find(name);
    if (it == by_name.end()) {
      if (strict) throw std::runtime_error("state: missing entry " + name);
      continue;
    }
    if (it->second->shape() != target.shape()) {
      throw DimensionError("state: " + name + " has shape " + shape_str(it->second->shape()) +
                           ", expected " + shape_str(target.shape()));
    }
    Tensor dst = target;
    std::copy(it->second->values().begin(), it->second->values().end(),
              dst.mutable_values().begin());
  }
}

}  // namespace dropgraph
