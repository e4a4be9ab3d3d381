#ifndef CAPSIM_SLICER_HPP
#define CAPSIM_SLICER_HPP

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <vector>

#include "capsim/trace_model.hpp"

namespace capsim::slicer {

struct SlicerConfig {
  uint64_t l_min = 100;
  bool emit_residual = false;  // trailing records that never close a clip
  uint64_t time_begin = 0;

  void validate() const;  // throws ConfigError
};

// Returns the architectural snapshot at a record index of the interval
// (0 = interval start). Used to attach per-clip start snapshots.
using SnapshotProvider = std::function<trace::RegisterSnapshot(size_t record_index)>;

// Partitions the interval's committed records into contiguous clips of
// length >= l_min, each closed at the first strict commit-time change past
// the threshold and labeled with the commit-time delta since the previous
// boundary. When `provider` is empty every clip carries the interval-start
// snapshot; callers wanting exact mid-interval context supply a provider.
std::vector<trace::CodeTraceClip> slice_interval(const trace::IntervalTrace& trace,
                                                 const SlicerConfig& cfg,
                                                 const SnapshotProvider& provider = {});

// Concatenation of per-interval slicings, ordered by interval_id.
using ProviderFactory = std::function<SnapshotProvider(const trace::IntervalTrace&)>;
std::vector<trace::CodeTraceClip> slice_corpus(std::span<const trace::IntervalTrace> traces,
                                               const SlicerConfig& cfg,
                                               const ProviderFactory& factory = {});

// Clip dataset files: one clip per line in <stem>.clips.jsonl with records
// inline, snapshots deduplicated into <stem>.snaps.jsonl keyed by
// "snapshot_ref".
void write_clips(std::span<const trace::CodeTraceClip> clips, const std::filesystem::path& stem);
std::vector<trace::CodeTraceClip> read_clips(const std::filesystem::path& stem);

}  // namespace capsim::slicer

#endif
