#ifndef PFEDGM_SEEDS_HPP
#define PFEDGM_SEEDS_HPP

#include <cstdint>

// Stream tags for RngStream::derive. Every stochastic stage derives its own
// stream from (seed, tag, a, b) so client tasks can run in any order, on any
// thread, and still reproduce bit-identically.
namespace pfedgm::tags {

inline constexpr uint64_t kMixture = 0x11;
inline constexpr uint64_t kClientWeights = 0x12;
inline constexpr uint64_t kClassCounts = 0x13;
inline constexpr uint64_t kClientData = 0x14;
inline constexpr uint64_t kIdxPartition = 0x15;
inline constexpr uint64_t kIdxSplit = 0x16;

inline constexpr uint64_t kServerInit = 0x21;
inline constexpr uint64_t kSelect = 0x22;
inline constexpr uint64_t kClientTrain = 0x23;
inline constexpr uint64_t kLocalTrain = 0x24;
inline constexpr uint64_t kFineTune = 0x25;

inline constexpr uint64_t kPhase2Fit = 0x31;

}  // namespace pfedgm::tags

#endif
