#pragma once

#include <array>
#include <cstdint>

namespace polyflow {

// xoshiro256** seeded through splitmix64. Normal draws use Box-Muller on two
// fresh uniforms, so the full generator state is the four 64-bit words.
class RngStream {
 public:
  using State = std::array<std::uint64_t, 4>;

  explicit RngStream(std::uint64_t seed = 0);

  std::uint64_t next_u64();
  // Uniform in [0, 1) with 53 random bits.
  double uniform();
  double uniform(double lo, double hi);
  double normal();
  double normal(double mean, double stddev) { return mean + stddev * normal(); }
  // Uniform integer in [0, n).
  std::uint64_t index(std::uint64_t n);

  // Independent stream derived from this stream's seed material and `id`.
  // Does not advance this stream.
  RngStream split(std::uint64_t id) const;

  const State& state() const { return state_; }
  void set_state(const State& s) { state_ = s; }

  friend bool operator==(const RngStream&, const RngStream&) = default;

 private:
  State state_{};
};

}  // namespace polyflow
