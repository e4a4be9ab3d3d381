#include "capsim/slicer.hpp"

#include <algorithm>
#include <fstream>
#include <map>

#include <json.hpp>

namespace capsim::slicer {

using nlohmann::json;
using trace::CodeTraceClip;
using trace::CommittedRecord;
using trace::IntervalTrace;

void SlicerConfig::validate() const {
  if (l_min < 1) throw ConfigError("l_min must be >= 1");
}

std::vector<CodeTraceClip> slice_interval(const IntervalTrace& trace, const SlicerConfig& cfg,
                                          const SnapshotProvider& provider) {
  cfg.validate();
  if (trace.records.size() < 2)
    throw EmptyTraceError("interval " + trace.interval_id + " has fewer than 2 records");
  if (cfg.time_begin > trace.records.front().commit_time)
    throw ValidationError("time_begin exceeds the first commit time of interval " +
                          trace.interval_id);

  std::vector<CodeTraceClip> clips;
  std::vector<CommittedRecord> block;
  size_t block_start = 0;
  uint64_t time_begin = cfg.time_begin;
  uint64_t time_prev = trace.records[0].commit_time;

  auto start_snapshot = [&](size_t idx) {
    if (provider) return provider(idx);
    return trace.snapshot;
  };

  for (size_t i = 1; i < trace.records.size(); ++i) {
    const uint64_t time_now = trace.records[i].commit_time;
    block.push_back(trace.records[i - 1]);
    // time_prev == time_begin only while the first boundary has seen no time
    // advance; closing there would emit a zero label.
    if (block.size() >= cfg.l_min && time_now != time_prev && time_prev != time_begin) {
      CodeTraceClip clip;
      clip.records = std::move(block);
      clip.time = time_prev - time_begin;
      clip.start_snapshot = start_snapshot(block_start);
      clip.interval_id = trace.interval_id;
      clip.start_idx = block_start;
      clip.content_key = trace::content_key(clip.records);
      clips.push_back(std::move(clip));
      time_begin = time_prev;
      block.clear();
      block_start = i;
    }
    time_prev = time_now;
  }

  if (cfg.emit_residual) {
    block.push_back(trace.records.back());
    CodeTraceClip clip;
    clip.records = std::move(block);
    clip.time = 0;  // unlabeled residual
    clip.start_snapshot = start_snapshot(block_start);
    clip.interval_id = trace.interval_id;
    clip.start_idx = block_start;
    clip.content_key = trace::content_key(clip.records);
    clips.push_back(std::move(clip));
  }
  return clips;
}

std::vector<CodeTraceClip> slice_corpus(std::span<const IntervalTrace> traces,
                                        const SlicerConfig& cfg, const ProviderFactory& factory) {
  std::vector<const IntervalTrace*> ordered;
  ordered.reserve(traces.size());
  for (const auto& t : traces) ordered.push_back(&t);
  std::stable_sort(ordered.begin(), ordered.end(),
                   [](const IntervalTrace* a, const IntervalTrace* b) {
                     return a->interval_id < b->interval_id;
                   });
  std::vector<CodeTraceClip> corpus;
  for (const IntervalTrace* t : ordered) {
    try {
      SnapshotProvider provider = factory ? factory(*t) : SnapshotProvider{};
      auto clips = slice_interval(*t, cfg, provider);
      corpus.insert(corpus.end(), std::make_move_iterator(clips.begin()),
                    std::make_move_iterator(clips.end()));
    } catch (const Error& e) {
      throw Error("interval " + t->interval_id + ": " + e.what());
    }
  }
  return corpus;
}

namespace {

json snapshot_to_json(const trace::RegisterSnapshot& snap) {
  json j = json::object();
  for (const auto& [name, value] : snap.entries()) j[name] = value;
  return j;
}

trace::RegisterSnapshot snapshot_from_json(const json& j) {
  trace::RegisterSnapshot snap;
  for (auto it = j.begin(); it != j.end(); ++it) {
    auto reg = trace::parse_reg_name(it.key());
    if (!reg) throw ParseError("unknown register in snapshot: " + it.key());
    snap.set_hex(reg->first, reg->second, it.value().get<std::string>());
  }
  return snap;
}

}  // namespace

void write_clips(std::span<const CodeTraceClip> clips, const std::filesystem::path& stem) {
  std::filesystem::path clips_path = stem;
  clips_path += ".clips.jsonl";
  std::filesystem::path snaps_path = stem;
  snaps_path += ".snaps.jsonl";

  std::ofstream cf(clips_path, std::ios::binary);
  if (!cf) throw IoError("cannot write " + clips_path.string());
  std::ofstream sf(snaps_path, std::ios::binary);
  if (!sf) throw IoError("cannot write " + snaps_path.string());

  // Deduplicate snapshots by content; ids are assigned in first-use order.
  std::map<std::string, std::string> snap_ids;  // serialized snapshot -> id
  for (const auto& clip : clips) {
    std::string ser = snapshot_to_json(clip.start_snapshot).dump();
    auto [it, inserted] = snap_ids.emplace(ser, "s" + std::to_string(snap_ids.size()));
    if (inserted) {
      json line;
      line["id"] = it->second;
      line["snapshot"] = json::parse(ser);
      sf << line.dump() << '\n';
    }
    json j;
    j["interval_id"] = clip.interval_id;
    j["start_idx"] = clip.start_idx;
    j["len"] = clip.records.size();
    j["time"] = clip.time;
    json records = json::array();
    for (const auto& rec : clip.records) records.push_back(json::parse(record_to_json_line(rec)));
    j["records"] = records;
    j["snapshot_ref"] = it->second;
    cf << j.dump() << '\n';
  }
  if (!cf || !sf) throw IoError("write failed under " + stem.string());
}

std::vector<CodeTraceClip> read_clips(const std::filesystem::path& stem) {
  std::filesystem::path clips_path = stem;
  clips_path += ".clips.jsonl";
  std::filesystem::path snaps_path = stem;
  snaps_path += ".snaps.jsonl";

  std::ifstream sf(snaps_path);
  if (!sf) throw IoError("cannot open " + snaps_path.string());
  std::map<std::string, trace::RegisterSnapshot> snaps;
  std::string line;
  while (std::getline(sf, line)) {
    if (line.empty()) continue;
    json j = json::parse(line);
    snaps[j.at("id").get<std::string>()] = snapshot_from_json(j.at("snapshot"));
  }

  std::ifstream cf(clips_path);
  if (!cf) throw IoError("cannot open " + clips_path.string());
  std::vector<CodeTraceClip> clips;
  size_t line_no = 0;
  while (std::getline(cf, line)) {
    ++line_no;
    if (line.empty()) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::exception& e) {
      throw ParseError(clips_path.string() + ":" + std::to_string(line_no) + ": " + e.what());
    }
    CodeTraceClip clip;
    clip.interval_id = j.at("interval_id").get<std::string>();
    clip.start_idx = j.at("start_idx").get<size_t>();
    clip.time = j.at("time").get<uint64_t>();
    for (const auto& r : j.at("records"))
      clip.records.push_back(trace::record_from_json_line(r.dump()));
    if (clip.records.size() != j.at("len").get<size_t>())
      throw ValidationError(clips_path.string() + ":" + std::to_string(line_no) +
                            ": len does not match records");
    auto it = snaps.find(j.at("snapshot_ref").get<std::string>());
    if (it == snaps.end())
      throw ValidationError(clips_path.string() + ":" + std::to_string(line_no) +
                            ": dangling snapshot_ref");
    clip.start_snapshot = it->second;
    clip.content_key = trace::content_key(clip.records);
    clips.push_back(std::move(clip));
  }
  return clips;
}

}  // namespace capsim::slicer
