#ifndef CAPSIM_SAMPLER_HPP
#define CAPSIM_SAMPLER_HPP

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "capsim/trace_model.hpp"

namespace capsim::sampler {

struct SamplerConfig {
  uint64_t threshold = 200;
  double coefficient = 0.02;  // in (0, 1]
  uint64_t seed = 0;

  void validate() const;  // throws ConfigError
};

struct ClipClass {
  uint64_t content_key = 0;
  std::vector<size_t> members;  // corpus indices, ascending
  size_t count = 0;
  size_t first_seen = 0;
};

// Groups clips by content key; classes ordered by first_seen.
std::vector<ClipClass> group_classes(std::span<const trace::CodeTraceClip> clips);

struct ClassOutcome {
  uint64_t content_key = 0;
  size_t before = 0;
  size_t after = 0;
  bool above_threshold = false;
};

struct SampleResult {
  std::vector<size_t> kept;  // corpus indices, ascending
  std::vector<ClassOutcome> outcomes;
  size_t before_total = 0;
  size_t after_total = 0;
};

// Two-regime reduction: classes with count > threshold are kept and
// downsampled within the class to max(1, round(count * coefficient)) members
// by evenly spaced selection; classes at or below the threshold are ranked
// (count desc, first_seen asc) and whole classes at ranks 0, p, 2p, ... with
// p = round(1/coefficient) are kept intact.
SampleResult sample(const std::vector<ClipClass>& classes, const SamplerConfig& cfg);

// Convenience: grouped + sampled corpus in original order.
std::vector<trace::CodeTraceClip> sample_dataset(std::span<const trace::CodeTraceClip> clips,
                                                 const SamplerConfig& cfg,
                                                 SampleResult* result_out = nullptr);

void write_report(const SampleResult& result, const SamplerConfig& cfg,
                  const std::filesystem::path& path);

}  // namespace capsim::sampler

#endif
