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
#include <initializer_list>
#include <vector>

namespace dropgraph {

/// Counter-based random stream addressed by (seed, path).
///
/// Every stochastic site derives its own stream with `child(label)`; the
/// stream key is a hash of the seed and the full label path, and draw i is a
/// keyed mix of the counter i. Two streams with the same (seed, path) emit
/// the same sequence no matter what other streams were consumed before.
class RngStream {
 public:
  explicit RngStream(std::uint64_t seed, std::vector<std::uint64_t> path = {});

  RngStream child(std::uint64_t label) const;
  RngStream child(std::initializer_list<std::uint64_t> labels) const;

  std::uint64_t next_u64();
  /// Uniform on [0, 1) with 53 random bits.
  double uniform();
  /// Uniform on the open interval (0, 1).
  double uniform_open();
  double normal();
  /// True with probability p.
  bool bernoulli(double p);
  /// Uniform integer in [0, n).
  std::size_t index(std::size_t n);

  std::uint64_t seed() const noexcept { return seed_; }
  const std::vector<std::uint64_t>& path() const noexcept { return path_; }
  std::uint64_t counter() const noexcept { return counter_; }

 private:
  std::uint64_t seed_;
  std::vector<std::uint64_t> path_;
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
};

/// Well-known labels for stochastic sites, so paths read as names.
namespace rng_site {
inline constexpr std::uint64_t kInit = 0x1000;
inline constexpr std::uint64_t kData = 0x2000;
inline constexpr std::uint64_t kShuffle = 0x3000;
inline constexpr std::uint64_t kAugment = 0x3100;
inline constexpr std::uint64_t kStep = 0x4000;
inline constexpr std::uint64_t kMask = 0x5001;
inline constexpr std::uint64_t kVertices = 0x5002;
inline constexpr std::uint64_t kMultipliers = 0x5003;
inline constexpr std::uint64_t kNoise = 0x5004;
inline constexpr std::uint64_t kSkipMultipliers = 0x5005;
inline constexpr std::uint64_t kEval = 0x6000;
}  // namespace rng_site

}  // namespace dropgraph
