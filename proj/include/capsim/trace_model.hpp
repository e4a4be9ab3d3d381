#ifndef CAPSIM_TRACE_MODEL_HPP
#define CAPSIM_TRACE_MODEL_HPP

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "capsim/common.hpp"

namespace capsim::trace {

enum class RegClass : uint8_t { GPR, VSR, CR, LR, CTR, XER, FPSCR, VSCR, CIA, NIA };

constexpr int kRegClassCount = 10;

std::string_view reg_class_name(RegClass cls);
std::optional<RegClass> reg_class_from_name(std::string_view name);
int reg_class_count(RegClass cls);   // architectural register count of the class
int reg_class_bits(RegClass cls);    // valid width in bits
int reg_class_hex_digits(RegClass cls);

// Canonical register name: "GPR7", "VSR12"; singleton classes use the bare
// class name ("CR", "LR", ...).
std::string reg_name(RegClass cls, int index);
std::optional<std::pair<RegClass, int>> parse_reg_name(std::string_view name);

struct Operand {
  enum class Kind : uint8_t { Register, Constant };
  Kind kind = Kind::Constant;
  RegClass reg_class = RegClass::GPR;
  int reg_index = 0;

  static Operand reg(RegClass cls, int index);
  static Operand constant() { return Operand{}; }
  bool is_register() const { return kind == Kind::Register; }
  bool operator==(const Operand&) const = default;
};

struct MemAccess {
  bool is_load = false;
  bool is_store = false;
  Operand base;  // register operand
  bool offset_present = false;
  bool operator==(const MemAccess&) const = default;
};

struct Instruction {
  uint64_t pc = 0;
  std::string mnemonic;
  std::vector<Operand> dsts;  // at most 3
  std::vector<Operand> srcs;  // at most 3
  std::optional<MemAccess> mem;
  std::string raw;  // original assembly text

  bool operator==(const Instruction&) const = default;
};

struct CommittedRecord {
  Instruction inst;
  uint64_t commit_time = 0;
  bool operator==(const CommittedRecord&) const = default;
};

// Architectural register values as fixed-width lowercase hex strings keyed by
// canonical register name.
class RegisterSnapshot {
public:
  void set_hex(RegClass cls, int index, std::string hex_value);  // validates width
  void set_u64(RegClass cls, int index, uint64_t value);
  void set_u128(RegClass cls, int index, uint64_t hi, uint64_t lo);

  bool has(RegClass cls, int index) const;
  const std::string& hex_value(RegClass cls, int index) const;  // throws MissingRegisterError
  uint64_t u64_value(RegClass cls, int index) const;            // low 64 bits

  const std::map<std::string, std::string>& entries() const { return values_; }
  bool empty() const { return values_.empty(); }

  // Throws ValidationError when a required register is absent or any value
  // string has the wrong width for its class.
  void validate(std::span<const std::pair<RegClass, int>> required) const;

  bool operator==(const RegisterSnapshot&) const = default;

private:
  std::map<std::string, std::string> values_;  // name -> "0x..." lowercase
};

struct TagSet {
  bool ctrl = false;
  bool comp = false;
  bool mem = false;

  static TagSet parse(std::string_view text);  // "CTRL+MEM" etc.
  std::vector<std::string> names() const;      // canonical order CTRL, COMP, MEM
  std::string to_string() const;               // "CTRL+MEM"
  bool any() const { return ctrl || comp || mem; }
  int count() const { return int(ctrl) + int(comp) + int(mem); }
  bool operator==(const TagSet&) const = default;
};

struct IntervalTrace {
  std::string interval_id;
  TagSet tag;
  RegisterSnapshot snapshot;
  std::vector<CommittedRecord> records;
};

struct CodeTraceClip {
  std::vector<CommittedRecord> records;
  uint64_t time = 0;  // label: commit-time delta
  RegisterSnapshot start_snapshot;
  uint64_t content_key = 0;

  // provenance
  std::string interval_id;
  size_t start_idx = 0;
};

// The register subset every stored snapshot must at least contain (matches
// the default tokenizer context subset).
std::span<const std::pair<RegClass, int>> default_required_registers();

// Throws ValidationError on non-monotone commit times, empty records, or an
// incomplete snapshot.
void validate_interval(const IntervalTrace& trace);

IntervalTrace load_interval(const std::filesystem::path& path);
void store_interval(const IntervalTrace& trace, const std::filesystem::path& path);

// Canonical single-line JSON forms shared with the clip dataset files.
std::string record_to_json_line(const CommittedRecord& rec);
CommittedRecord record_from_json_line(std::string_view line);

// Stable 64-bit hash of the standardized token content of all records.
// Independent of commit times and snapshots. Defined in tokenizer.cpp.
uint64_t content_key(const CodeTraceClip& clip);
uint64_t content_key(std::span<const CommittedRecord> records);

}  // namespace capsim::trace

#endif
