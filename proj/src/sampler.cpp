#include "capsim/sampler.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <unordered_map>

#include <json.hpp>

namespace capsim::sampler {

using nlohmann::json;

void SamplerConfig::validate() const {
  if (threshold < 1) throw ConfigError("sampler threshold must be >= 1");
  if (!(coefficient > 0.0) || coefficient > 1.0)
    throw ConfigError("sampler coefficient must lie in (0, 1]");
}

std::vector<ClipClass> group_classes(std::span<const trace::CodeTraceClip> clips) {
  std::unordered_map<uint64_t, size_t> by_key;
  std::vector<ClipClass> classes;
  for (size_t i = 0; i < clips.size(); ++i) {
    uint64_t key = clips[i].content_key;
    auto [it, inserted] = by_key.emplace(key, classes.size());
    if (inserted) {
      ClipClass c;
      c.content_key = key;
      c.first_seen = i;
      classes.push_back(std::move(c));
    }
    classes[it->second].members.push_back(i);
  }
  for (auto& c : classes) c.count = c.members.size();
  return classes;
}

SampleResult sample(const std::vector<ClipClass>& classes, const SamplerConfig& cfg) {
  cfg.validate();
  if (classes.empty()) throw ConfigError("sample requires a non-empty class list");

  SampleResult res;
  std::vector<const ClipClass*> below;
  for (const auto& c : classes) {
    res.before_total += c.count;
    if (c.count > cfg.threshold) {
      // Evenly spaced members, preserving the class itself.
      size_t keep = static_cast<size_t>(
          std::max<long long>(1, std::llround(static_cast<double>(c.count) * cfg.coefficient)));
      keep = std::min(keep, c.count);
      ClassOutcome oc{c.content_key, c.count, keep, true};
      for (size_t j = 0; j < keep; ++j)
        res.kept.push_back(c.members[j * c.count / keep]);
      res.outcomes.push_back(oc);
    } else {
      below.push_back(&c);
    }
  }

  // Whole-class periodic selection for the below-threshold regime. The
  // ordering is total because first_seen is unique; the seed would only
  // matter on exact ties and is recorded for reproducibility.
  std::sort(below.begin(), below.end(), [](const ClipClass* a, const ClipClass* b) {
    if (a->count != b->count) return a->count > b->count;
    return a->first_seen < b->first_seen;
  });
  size_t period = static_cast<size_t>(std::max<long long>(1, std::llround(1.0 / cfg.coefficient)));
  for (size_t rank = 0; rank < below.size(); ++rank) {
    const ClipClass& c = *below[rank];
    bool keep_class = rank % period == 0;
    ClassOutcome oc{c.content_key, c.count, keep_class ? c.count : 0, false};
    if (keep_class)
      res.kept.insert(res.kept.end(), c.members.begin(), c.members.end());
    res.outcomes.push_back(oc);
  }

  std::sort(res.kept.begin(), res.kept.end());
  res.after_total = res.kept.size();
  return res;
}

std::vector<trace::CodeTraceClip> sample_dataset(std::span<const trace::CodeTraceClip> clips,
                                                 const SamplerConfig& cfg,
                                                 SampleResult* result_out) {
  auto classes = group_classes(clips);
  SampleResult res = sample(classes, cfg);
  std::vector<trace::CodeTraceClip> out;
  out.reserve(res.kept.size());
  for (size_t idx : res.kept) out.push_back(clips[idx]);
  if (result_out) *result_out = std::move(res);
  return out;
}

void write_report(const SampleResult& result, const SamplerConfig& cfg,
                  const std::filesystem::path& path) {
  json j;
  j["threshold"] = cfg.threshold;
  j["coefficient"] = cfg.coefficient;
  j["seed"] = cfg.seed;
  j["before_total"] = result.before_total;
  j["after_total"] = result.after_total;
  json classes = json::array();
  for (const auto& oc : result.outcomes) {
    classes.push_back(json{{"key", "0x" + to_hex(oc.content_key, 16)},
                           {"before", oc.before},
                           {"after", oc.after},
                           {"regime", oc.above_threshold ? "above" : "below"}});
  }
  j["classes"] = classes;
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write sampler report: " + path.string());
  out << j.dump(2) << '\n';
}

}  // namespace capsim::sampler
