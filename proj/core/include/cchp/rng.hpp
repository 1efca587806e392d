// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>

namespace cchp {

/// Seeded random stream. derive() yields independent child streams that
/// depend only on the root seed and the stream id, never on draw history.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : seed_(seed) { reseed(seed, 0); }

  std::uint64_t seed() const { return seed_; }

  Rng derive(std::uint64_t stream) const {
    Rng child;
    child.seed_ = mix(seed_, stream + 1);
    child.reseed(seed_, stream + 1);
    return child;
  }

  double uniform() { return unit_(engine_); }
  double uniform(double lo, double hi) { return lo + (hi - lo) * unit_(engine_); }
  /// Inclusive integer range.
  int uniform_int(int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(engine_); }
  double normal() { return normal_(engine_); }
  double normal(double mean, double stddev) { return mean + stddev * normal_(engine_); }
  bool bernoulli(double p) { return unit_(engine_) < p; }

  std::mt19937_64& engine() { return engine_; }

  std::string state() const {
    std::ostringstream os;
    os << seed_ << ' ' << engine_ << ' ' << normal_;
    return os.str();
  }

  void set_state(const std::string& s) {
    std::istringstream is(s);
    is >> seed_ >> engine_ >> normal_;
    if (!is) throw std::invalid_argument("Rng::set_state: malformed state");
  }

 private:
  static std::uint64_t mix(std::uint64_t a, std::uint64_t b) {
    std::uint64_t z = a + 0x9e3779b97f4a7c15ULL * (b + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  void reseed(std::uint64_t seed, std::uint64_t stream) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(stream), static_cast<std::uint32_t>(stream >> 32)};
    engine_.seed(seq);
    normal_.reset();
  }

  std::uint64_t seed_ = 0;
  std::mt19937_64 engine_;
  std::uniform_real_distribution<double> unit_{0.0, 1.0};
  std::normal_distribution<double> normal_{0.0, 1.0};
};

}  // namespace cchp
