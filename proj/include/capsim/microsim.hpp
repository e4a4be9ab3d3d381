#ifndef CAPSIM_MICROSIM_HPP
#define CAPSIM_MICROSIM_HPP

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "capsim/trace_model.hpp"

namespace capsim::microsim {

// The fixed mini-ISA. Power-flavored, wide enough to exercise every token
// segment and the context register classes.
enum class Mnemonic : uint8_t {
  Addi,
  Add,
  Mul,
  Divd,
  Ld,
  Std,
  Cmpi,
  B,
  Bc,
  Mtctr,
  Mflr,
  Fadd,
  Fmul,
};

constexpr int kMnemonicCount = 13;

std::string_view mnemonic_name(Mnemonic m);
std::optional<Mnemonic> mnemonic_from_name(std::string_view name);
bool is_branch(Mnemonic m);
bool is_memory(Mnemonic m);
bool is_alu(Mnemonic m);  // integer + float arithmetic, excludes cmpi/moves

enum class Cond : uint8_t { Lt, Gt, Eq, Ge, Le, Ne };
std::string_view cond_name(Cond c);
std::optional<Cond> cond_from_name(std::string_view name);

// Fully decoded form used by the interpreter and the generator. Register
// fields are GPR indices except for Fadd/Fmul where they index VSRs.
struct DecodedInst {
  Mnemonic m = Mnemonic::Addi;
  int rd = -1;
  int ra = -1;
  int rb = -1;
  int64_t imm = 0;
  bool has_imm = false;
  Cond cond = Cond::Ne;
};

// Renders canonical assembly text and the symbolic trace-model instruction.
trace::Instruction encode_instruction(const DecodedInst& d, uint64_t pc);
std::string render_asm(const DecodedInst& d);
DecodedInst parse_asm(std::string_view text);  // throws ParseError / UnknownOpcodeError
DecodedInst decode(const trace::Instruction& inst);

struct UArchParams {
  int fetch_width = 8;
  int issue_width = 8;
  int commit_width = 8;
  int rob_entries = 192;
  std::map<std::string, int> latency_table = default_latencies();
  int cache_lines = 64;
  int cache_line_bytes = 64;
  int miss_penalty = 20;
  int mispredict_penalty = 8;

  static std::map<std::string, int> default_latencies();
  int latency(Mnemonic m) const;
  void validate() const;  // throws ConfigError
};

struct WorkloadSpec {
  trace::TagSet kind;
  uint64_t length = 1;  // target committed-instruction count
  uint64_t seed = 0;
  int loop_depth = 1;
  double branch_density = 0.15;
  int stride_pattern = 8;  // byte stride for memory walks

  void validate() const;  // throws SpecError
};

struct Program {
  uint64_t base_pc = 0x1000;
  std::vector<trace::Instruction> code;
  trace::RegisterSnapshot initial;
};

// Deterministic synthetic program whose committed-instruction mix matches the
// workload kind. The program's natural committed length overshoots
// spec.length so callers can truncate at an exact budget.
Program generate_program(const WorkloadSpec& spec);

struct SimResult {
  trace::IntervalTrace trace;
  bool truncated = false;  // budget reached before the program terminated
};

// Cycle-level timing oracle: one CommittedRecord per committed instruction.
// `budget` caps the committed count; 0 means unlimited (the program must
// terminate on its own, otherwise SimError).
SimResult simulate(const Program& program, const UArchParams& params, uint64_t budget,
                   std::string interval_id = "interval", trace::TagSet tag = {});

// Architectural register state after the first k committed instructions.
trace::RegisterSnapshot snapshot_at(const Program& program, const UArchParams& params, uint64_t k);

// Single functional pass collecting snapshots at each index in `ks`
// (ascending, deduplicated by the caller). ks entries must be <= committed count.
std::vector<trace::RegisterSnapshot> snapshots_at(const Program& program, const UArchParams& params,
                                                  const std::vector<uint64_t>& ks);

// Committed count of a full run (no budget).
uint64_t committed_count(const Program& program);

}  // namespace capsim::microsim

#endif
