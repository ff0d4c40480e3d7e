#pragma once

#include <array>
#include <cstdint>

namespace elsa {

/// Counter-based Philox4x32-10 stream. A (seed, stream_id) pair fully
/// determines the sequence, independent of platform and of how many other
/// streams are in use, so parallel consumers can each own a stream.
class RngStream {
 public:
  RngStream(std::uint64_t seed, std::uint64_t stream_id);

  std::uint64_t next_u64();
  /// Uniform in [0, 1) with 53 random bits.
  double uniform();
  /// Uniform integer in [0, n). n must be > 0.
  std::uint64_t uniform_int(std::uint64_t n);
  /// Standard normal via Box-Muller.
  double normal();
  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  /// Independent child stream keyed by `child`.
  RngStream split(std::uint64_t child) const;

  std::uint64_t seed() const { return seed_; }
  std::uint64_t stream_id() const { return stream_; }

 private:
  void refill();

  std::uint64_t seed_;
  std::uint64_t stream_;
  std::uint64_t counter_ = 0;
  std::array<std::uint32_t, 4> block_{};
  int cursor_ = 4;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

inline RngStream rng_stream(std::uint64_t seed, std::uint64_t stream_id) {
  return RngStream(seed, stream_id);
}

/// Well-known stream ids so that unrelated consumers never share a stream.
namespace streams {
inline constexpr std::uint64_t kInit = 1;
inline constexpr std::uint64_t kTaskTrain = 2;
inline constexpr std::uint64_t kTaskVal = 3;
inline constexpr std::uint64_t kBatches = 4;
inline constexpr std::uint64_t kSampler = 5;
inline constexpr std::uint64_t kSearch = 6;
inline constexpr std::uint64_t kCalibration = 7;
inline constexpr std::uint64_t kProbe = 8;
inline constexpr std::uint64_t kPretrain = 9;
inline constexpr std::uint64_t kAdapterInit = 10;
}  // namespace streams

}  // namespace elsa
