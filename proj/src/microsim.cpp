#include "capsim/microsim.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <charconv>
#include <cmath>
#include <unordered_map>

namespace capsim::microsim {

using trace::Operand;
using trace::RegClass;

namespace {

constexpr std::array<std::string_view, kMnemonicCount> kMnemonicNames = {
    "addi", "add", "mul", "divd", "ld", "std", "cmpi", "b", "bc", "mtctr", "mflr", "fadd", "fmul"};

constexpr std::array<std::string_view, 6> kCondNames = {"lt", "gt", "eq", "ge", "le", "ne"};

// CR bits set by cmpi (single 32-bit CR, cr0-field convention).
constexpr uint32_t kCrLt = 0x8;
constexpr uint32_t kCrGt = 0x4;
constexpr uint32_t kCrEq = 0x2;

}  // namespace

std::string_view mnemonic_name(Mnemonic m) { return kMnemonicNames[static_cast<size_t>(m)]; }

std::optional<Mnemonic> mnemonic_from_name(std::string_view name) {
  for (size_t i = 0; i < kMnemonicNames.size(); ++i)
    if (kMnemonicNames[i] == name) return static_cast<Mnemonic>(i);
  return std::nullopt;
}

bool is_branch(Mnemonic m) { return m == Mnemonic::B || m == Mnemonic::Bc; }
bool is_memory(Mnemonic m) { return m == Mnemonic::Ld || m == Mnemonic::Std; }
bool is_alu(Mnemonic m) {
  switch (m) {
    case Mnemonic::Addi:
    case Mnemonic::Add:
    case Mnemonic::Mul:
    case Mnemonic::Divd:
    case Mnemonic::Fadd:
    case Mnemonic::Fmul:
      return true;
    default:
      return false;
  }
}

std::string_view cond_name(Cond c) { return kCondNames[static_cast<size_t>(c)]; }

std::optional<Cond> cond_from_name(std::string_view name) {
  for (size_t i = 0; i < kCondNames.size(); ++i)
    if (kCondNames[i] == name) return static_cast<Cond>(i);
  return std::nullopt;
}

std::string render_asm(const DecodedInst& d) {
  auto r = [](int i) { return "r" + std::to_string(i); };
  auto v = [](int i) { return "v" + std::to_string(i); };
  switch (d.m) {
    case Mnemonic::Addi:
      return "addi " + r(d.rd) + ", " + r(d.ra) + ", " + std::to_string(d.imm);
    case Mnemonic::Add:
    case Mnemonic::Mul:
    case Mnemonic::Divd:
      return std::string(mnemonic_name(d.m)) + " " + r(d.rd) + ", " + r(d.ra) + ", " + r(d.rb);
    case Mnemonic::Ld:
      return "ld " + r(d.rd) + ", " + std::to_string(d.imm) + "(" + r(d.ra) + ")";
    case Mnemonic::Std:
      return "std " + r(d.rd) + ", " + std::to_string(d.imm) + "(" + r(d.ra) + ")";
    case Mnemonic::Cmpi:
      return "cmpi cr0, " + r(d.ra) + ", " + std::to_string(d.imm);
    case Mnemonic::B:
      return "b " + std::to_string(d.imm);
    case Mnemonic::Bc:
      return "bc " + std::string(cond_name(d.cond)) + ", " + std::to_string(d.imm);
    case Mnemonic::Mtctr:
      return "mtctr " + r(d.ra);
    case Mnemonic::Mflr:
      return "mflr " + r(d.rd);
    case Mnemonic::Fadd:
    case Mnemonic::Fmul:
      return std::string(mnemonic_name(d.m)) + " " + v(d.rd) + ", " + v(d.ra) + ", " + v(d.rb);
  }
  throw Error("unreachable");
}

namespace {

std::vector<std::string> split_operands(std::string_view text) {
  std::vector<std::string> parts;
  std::string cur;
  for (char c : text) {
    if (c == ',') {
      parts.push_back(cur);
      cur.clear();
    } else {
      cur += c;
    }
  }
  if (!cur.empty()) parts.push_back(cur);
  for (auto& p : parts) {
    size_t b = p.find_first_not_of(' ');
    size_t e = p.find_last_not_of(' ');
    p = (b == std::string::npos) ? std::string() : p.substr(b, e - b + 1);
  }
  return parts;
}

int parse_reg_operand(const std::string& text, char prefix, int limit) {
  if (text.size() < 2 || text[0] != prefix) throw ParseError("expected register operand, got " + text);
  int idx = 0;
  auto res = std::from_chars(text.data() + 1, text.data() + text.size(), idx);
  if (res.ec != std::errc() || res.ptr != text.data() + text.size() || idx < 0 || idx >= limit)
    throw ParseError("bad register operand: " + text);
  return idx;
}

int64_t parse_imm(const std::string& text) {
  int64_t v = 0;
  auto res = std::from_chars(text.data(), text.data() + text.size(), v);
  if (res.ec != std::errc() || res.ptr != text.data() + text.size())
    throw ParseError("bad immediate: " + text);
  return v;
}

// "8(r31)" -> (8, 31)
std::pair<int64_t, int> parse_mem_operand(const std::string& text) {
  size_t open = text.find('(');
  size_t close = text.find(')');
  if (open == std::string::npos || close == std::string::npos || close < open)
    throw ParseError("bad memory operand: " + text);
  int64_t off = parse_imm(text.substr(0, open));
  int base = parse_reg_operand(text.substr(open + 1, close - open - 1), 'r', 32);
  return {off, base};
}

}  // namespace

DecodedInst parse_asm(std::string_view text) {
  size_t sp = text.find(' ');
  std::string op(sp == std::string_view::npos ? text : text.substr(0, sp));
  auto m = mnemonic_from_name(op);
  if (!m) throw UnknownOpcodeError("unknown mnemonic: " + op);
  auto ops = split_operands(sp == std::string_view::npos ? std::string_view() : text.substr(sp + 1));
  DecodedInst d;
  d.m = *m;
  auto need = [&](size_t n) {
    if (ops.size() != n)
      throw ParseError("mnemonic " + op + " expects " + std::to_string(n) + " operands: " +
                       std::string(text));
  };
  switch (*m) {
    case Mnemonic::Addi:
      need(3);
      d.rd = parse_reg_operand(ops[0], 'r', 32);
      d.ra = parse_reg_operand(ops[1], 'r', 32);
      d.imm = parse_imm(ops[2]);
      d.has_imm = true;
      break;
    case Mnemonic::Add:
    case Mnemonic::Mul:
    case Mnemonic::Divd:
      need(3);
      d.rd = parse_reg_operand(ops[0], 'r', 32);
      d.ra = parse_reg_operand(ops[1], 'r', 32);
      d.rb = parse_reg_operand(ops[2], 'r', 32);
      break;
    case Mnemonic::Ld:
    case Mnemonic::Std:
      need(2);
      d.rd = parse_reg_operand(ops[0], 'r', 32);
      std::tie(d.imm, d.ra) = parse_mem_operand(ops[1]);
      d.has_imm = true;
      break;
    case Mnemonic::Cmpi:
      need(3);
      if (ops[0] != "cr0") throw ParseError("cmpi expects cr0 field: " + std::string(text));
      d.ra = parse_reg_operand(ops[1], 'r', 32);
      d.imm = parse_imm(ops[2]);
      d.has_imm = true;
      break;
    case Mnemonic::B:
      need(1);
      d.imm = parse_imm(ops[0]);
      d.has_imm = true;
      break;
    case Mnemonic::Bc: {
      need(2);
      auto c = cond_from_name(ops[0]);
      if (!c) throw ParseError("bad branch condition: " + ops[0]);
      d.cond = *c;
      d.imm = parse_imm(ops[1]);
      d.has_imm = true;
      break;
    }
    case Mnemonic::Mtctr:
      need(1);
      d.ra = parse_reg_operand(ops[0], 'r', 32);
      break;
    case Mnemonic::Mflr:
      need(1);
      d.rd = parse_reg_operand(ops[0], 'r', 32);
      break;
    case Mnemonic::Fadd:
    case Mnemonic::Fmul:
      need(3);
      d.rd = parse_reg_operand(ops[0], 'v', 64);
      d.ra = parse_reg_operand(ops[1], 'v', 64);
      d.rb = parse_reg_operand(ops[2], 'v', 64);
      break;
  }
  return d;
}

trace::Instruction encode_instruction(const DecodedInst& d, uint64_t pc) {
  trace::Instruction inst;
  inst.pc = pc;
  inst.mnemonic = std::string(mnemonic_name(d.m));
  inst.raw = render_asm(d);
  auto gpr = [](int i) { return Operand::reg(RegClass::GPR, i); };
  auto vsr = [](int i) { return Operand::reg(RegClass::VSR, i); };
  switch (d.m) {
    case Mnemonic::Addi:
      inst.dsts = {gpr(d.rd)};
      inst.srcs = {gpr(d.ra), Operand::constant()};
      break;
    case Mnemonic::Add:
    case Mnemonic::Mul:
    case Mnemonic::Divd:
      inst.dsts = {gpr(d.rd)};
      inst.srcs = {gpr(d.ra), gpr(d.rb)};
      break;
    case Mnemonic::Ld:
      inst.dsts = {gpr(d.rd)};
      inst.mem = trace::MemAccess{true, false, gpr(d.ra), true};
      break;
    case Mnemonic::Std:
      inst.srcs = {gpr(d.rd)};
      inst.mem = trace::MemAccess{false, true, gpr(d.ra), true};
      break;
    case Mnemonic::Cmpi:
      inst.srcs = {gpr(d.ra), Operand::constant()};
      break;
    case Mnemonic::B:
      inst.srcs = {Operand::constant()};
      break;
    case Mnemonic::Bc:
      inst.srcs = {Operand::reg(RegClass::CR, 0), Operand::constant()};
      break;
    case Mnemonic::Mtctr:
      inst.srcs = {gpr(d.ra)};
      break;
    case Mnemonic::Mflr:
      inst.dsts = {gpr(d.rd)};
      break;
    case Mnemonic::Fadd:
    case Mnemonic::Fmul:
      inst.dsts = {vsr(d.rd)};
      inst.srcs = {vsr(d.ra), vsr(d.rb)};
      break;
  }
  return inst;
}

DecodedInst decode(const trace::Instruction& inst) {
  DecodedInst d = parse_asm(inst.raw);
  trace::Instruction check = encode_instruction(d, inst.pc);
  if (check.mnemonic != inst.mnemonic || check.dsts != inst.dsts || check.srcs != inst.srcs ||
      check.mem != inst.mem)
    throw ValidationError("instruction fields inconsistent with assembly text: " + inst.raw);
  return d;
}

std::map<std::string, int> UArchParams::default_latencies() {
  return {{"addi", 1}, {"add", 1}, {"mul", 3}, {"divd", 12}, {"ld", 2},  {"std", 1}, {"cmpi", 1},
          {"b", 1},    {"bc", 1},  {"mtctr", 1}, {"mflr", 1}, {"fadd", 4}, {"fmul", 5}};
}

int UArchParams::latency(Mnemonic m) const {
  auto it = latency_table.find(std::string(mnemonic_name(m)));
  if (it == latency_table.end())
    throw ConfigError("latency table missing mnemonic: " + std::string(mnemonic_name(m)));
  return it->second;
}

void UArchParams::validate() const {
  if (fetch_width < 1 || issue_width < 1 || commit_width < 1)
    throw ConfigError("pipeline widths must be >= 1");
  if (rob_entries < commit_width) throw ConfigError("rob_entries must be >= commit_width");
  if (cache_lines < 1) throw ConfigError("cache_lines must be >= 1");
  if (cache_line_bytes < 1 || (cache_line_bytes & (cache_line_bytes - 1)) != 0)
    throw ConfigError("cache_line_bytes must be a power of two");
  if (miss_penalty < 0 || mispredict_penalty < 0) throw ConfigError("penalties must be >= 0");
  for (int i = 0; i < kMnemonicCount; ++i) {
    if (latency(static_cast<Mnemonic>(i)) < 1)
      throw ConfigError("latencies must be >= 1");
  }
}

void WorkloadSpec::validate() const {
  if (!kind.any()) throw SpecError("workload kind must carry at least one tag");
  if (length < 1) throw SpecError("workload length must be >= 1");
  if (branch_density < 0.0 || branch_density > 1.0)
    throw SpecError("branch_density must lie in [0,1]");
  if (loop_depth < 1 || loop_depth > 2) throw SpecError("loop_depth must be 1 or 2");
  if (stride_pattern < 1) throw SpecError("stride_pattern must be >= 1");
}

// ---------------------------------------------------------------------------
// Functional interpreter
// ---------------------------------------------------------------------------

namespace {

struct Vsr128 {
  uint64_t hi = 0;
  uint64_t lo = 0;
};

struct ExecStep {
  uint32_t code_index = 0;
  bool taken = false;
  bool is_mem = false;
  bool is_load = false;
  uint64_t mem_addr = 0;
};

struct Machine {
  std::array<uint64_t, 32> gpr{};
  std::array<Vsr128, 64> vsr{};
  uint32_t cr = 0;
  uint64_t lr = 0, ctr = 0, xer = 0;
  uint32_t fpscr = 0, vscr = 0;
  uint64_t pc = 0;
  std::unordered_map<uint64_t, uint64_t> mem;  // keyed by addr >> 3

  void load_snapshot(const trace::RegisterSnapshot& snap, uint64_t default_pc) {
    auto get64 = [&](RegClass cls, int idx, uint64_t fallback) {
      return snap.has(cls, idx) ? snap.u64_value(cls, idx) : fallback;
    };
    for (int i = 0; i < 32; ++i) gpr[static_cast<size_t>(i)] = get64(RegClass::GPR, i, 0);
    for (int i = 0; i < 64; ++i) {
      if (snap.has(RegClass::VSR, i)) {
        const std::string& hex = snap.hex_value(RegClass::VSR, i);
        vsr[static_cast<size_t>(i)].hi = parse_hex(std::string_view(hex).substr(2, 16));
        vsr[static_cast<size_t>(i)].lo = parse_hex(std::string_view(hex).substr(18, 16));
      }
    }
    cr = static_cast<uint32_t>(get64(RegClass::CR, 0, 0));
    lr = get64(RegClass::LR, 0, 0);
    ctr = get64(RegClass::CTR, 0, 0);
    xer = get64(RegClass::XER, 0, 0);
    fpscr = static_cast<uint32_t>(get64(RegClass::FPSCR, 0, 0));
    vscr = static_cast<uint32_t>(get64(RegClass::VSCR, 0, 0));
    pc = get64(RegClass::CIA, 0, default_pc);
  }

  trace::RegisterSnapshot snapshot() const {
    trace::RegisterSnapshot snap;
    for (int i = 0; i < 32; ++i) snap.set_u64(RegClass::GPR, i, gpr[static_cast<size_t>(i)]);
    for (int i = 0; i < 64; ++i)
      snap.set_u128(RegClass::VSR, i, vsr[static_cast<size_t>(i)].hi, vsr[static_cast<size_t>(i)].lo);
    snap.set_u64(RegClass::CR, 0, cr);
    snap.set_u64(RegClass::LR, 0, lr);
    snap.set_u64(RegClass::CTR, 0, ctr);
    snap.set_u64(RegClass::XER, 0, xer);
    snap.set_u64(RegClass::FPSCR, 0, fpscr);
    snap.set_u64(RegClass::VSCR, 0, vscr);
    snap.set_u64(RegClass::CIA, 0, pc);
    snap.set_u64(RegClass::NIA, 0, pc + 4);
    return snap;
  }

  uint64_t mem_read(uint64_t addr) const {
    auto it = mem.find(addr >> 3);
    return it == mem.end() ? 0 : it->second;
  }
  void mem_write(uint64_t addr, uint64_t value) { mem[addr >> 3] = value; }

  // Executes the instruction at pc. Returns the step descriptor and advances pc.
  ExecStep step(const DecodedInst& d, uint32_t code_index) {
    ExecStep st;
    st.code_index = code_index;
    uint64_t next = pc + 4;
    switch (d.m) {
      case Mnemonic::Addi:
        gpr[d.rd] = gpr[d.ra] + static_cast<uint64_t>(d.imm);
        break;
      case Mnemonic::Add:
        gpr[d.rd] = gpr[d.ra] + gpr[d.rb];
        break;
      case Mnemonic::Mul:
        gpr[d.rd] = gpr[d.ra] * gpr[d.rb];
        break;
      case Mnemonic::Divd: {
        int64_t a = static_cast<int64_t>(gpr[d.ra]);
        int64_t b = static_cast<int64_t>(gpr[d.rb]);
        if (b == 0 || (a == INT64_MIN && b == -1)) {
          gpr[d.rd] = 0;
          xer |= 0x1;  // sticky overflow flag
        } else {
          gpr[d.rd] = static_cast<uint64_t>(a / b);
        }
        break;
      }
      case Mnemonic::Ld: {
        uint64_t addr = (gpr[d.ra] + static_cast<uint64_t>(d.imm)) & ~7ull;
        gpr[d.rd] = mem_read(addr);
        st.is_mem = true;
        st.is_load = true;
        st.mem_addr = addr;
        break;
      }
      case Mnemonic::Std: {
        uint64_t addr = (gpr[d.ra] + static_cast<uint64_t>(d.imm)) & ~7ull;
        mem_write(addr, gpr[d.rd]);
        st.is_mem = true;
        st.mem_addr = addr;
        break;
      }
      case Mnemonic::Cmpi: {
        int64_t a = static_cast<int64_t>(gpr[d.ra]);
        cr = a < d.imm ? kCrLt : (a > d.imm ? kCrGt : kCrEq);
        break;
      }
      case Mnemonic::B:
        next = pc + static_cast<uint64_t>(d.imm);
        st.taken = true;
        break;
      case Mnemonic::Bc: {
        bool take = false;
        switch (d.cond) {
          case Cond::Lt: take = (cr & kCrLt) != 0; break;
          case Cond::Gt: take = (cr & kCrGt) != 0; break;
          case Cond::Eq: take = (cr & kCrEq) != 0; break;
          case Cond::Ge: take = (cr & kCrLt) == 0; break;
          case Cond::Le: take = (cr & kCrGt) == 0; break;
          case Cond::Ne: take = (cr & kCrEq) == 0; break;
        }
        if (take) {
          next = pc + static_cast<uint64_t>(d.imm);
          st.taken = true;
        }
        break;
      }
      case Mnemonic::Mtctr:
        ctr = gpr[d.ra];
        break;
      case Mnemonic::Mflr:
        gpr[d.rd] = lr;
        break;
      case Mnemonic::Fadd:
      case Mnemonic::Fmul: {
        double a = std::bit_cast<double>(vsr[d.ra].lo);
        double b = std::bit_cast<double>(vsr[d.rb].lo);
        double r = d.m == Mnemonic::Fadd ? a + b : a * b;
        vsr[d.rd].lo = std::bit_cast<uint64_t>(r);
        vsr[d.rd].hi = 0;
        break;
      }
    }
    pc = next;
    return st;
  }
};

constexpr uint64_t kHardStepCap = 200'000'000ull;

struct FunctionalRun {
  std::vector<ExecStep> steps;
  bool truncated = false;
};

std::vector<DecodedInst> decode_program(const Program& program) {
  std::vector<DecodedInst> decoded;
  decoded.reserve(program.code.size());
  for (const auto& inst : program.code) decoded.push_back(decode(inst));
  return decoded;
}

// Runs the interpreter, optionally collecting snapshots at commit indices in
// `snap_at` (ascending). budget == 0 means "until termination".
FunctionalRun run_functional(const Program& program, const std::vector<DecodedInst>& decoded,
                             uint64_t budget, const std::vector<uint64_t>* snap_at = nullptr,
                             std::vector<trace::RegisterSnapshot>* snaps_out = nullptr) {
  Machine m;
  m.load_snapshot(program.initial, program.base_pc);
  FunctionalRun run;
  const uint64_t end_pc = program.base_pc + 4 * program.code.size();
  size_t snap_cursor = 0;
  uint64_t committed = 0;
  auto maybe_snap = [&]() {
    if (!snap_at) return;
    while (snap_cursor < snap_at->size() && (*snap_at)[snap_cursor] == committed) {
      snaps_out->push_back(m.snapshot());
      ++snap_cursor;
    }
  };
  maybe_snap();
  while (m.pc >= program.base_pc && m.pc < end_pc) {
    if (snap_at && snap_cursor >= snap_at->size()) break;
    if (budget != 0 && committed >= budget) {
      run.truncated = true;
      break;
    }
    if (committed >= kHardStepCap)
      throw SimError("program exceeded hard step cap without terminating");
    uint32_t idx = static_cast<uint32_t>((m.pc - program.base_pc) / 4);
    run.steps.push_back(m.step(decoded[idx], idx));
    ++committed;
    maybe_snap();
  }
  if (snap_at && snap_cursor < snap_at->size())
    throw IndexError("snapshot index exceeds committed instruction count");
  return run;
}

// ---------------------------------------------------------------------------
// Timing model
//
// Greedy least schedule over four in-order stages. All constraints are lower
// bounds that weaken as any width or the ROB grows, so total cycles are
// monotone non-increasing in every resource.
// ---------------------------------------------------------------------------

// Scoreboard register ids: GPR 0-31, VSR 32-95, CR 96, LR 97, CTR 98, XER 99.
constexpr int kScoreboardSize = 100;

void dep_regs(const DecodedInst& d, std::array<int, 3>& srcs, int& n_srcs, int& dst) {
  n_srcs = 0;
  dst = -1;
  switch (d.m) {
    case Mnemonic::Addi:
      srcs[n_srcs++] = d.ra;
      dst = d.rd;
      break;
    case Mnemonic::Add:
    case Mnemonic::Mul:
    case Mnemonic::Divd:
      srcs[n_srcs++] = d.ra;
      srcs[n_srcs++] = d.rb;
      dst = d.rd;
      break;
    case Mnemonic::Ld:
      srcs[n_srcs++] = d.ra;
      dst = d.rd;
      break;
    case Mnemonic::Std:
      srcs[n_srcs++] = d.rd;  // store data
      srcs[n_srcs++] = d.ra;  // base
      break;
    case Mnemonic::Cmpi:
      srcs[n_srcs++] = d.ra;
      dst = 96;  // CR
      break;
    case Mnemonic::B:
      break;
    case Mnemonic::Bc:
      srcs[n_srcs++] = 96;  // CR
      break;
    case Mnemonic::Mtctr:
      srcs[n_srcs++] = d.ra;
      dst = 98;  // CTR
      break;
    case Mnemonic::Mflr:
      srcs[n_srcs++] = 97;  // LR
      dst = d.rd;
      break;
    case Mnemonic::Fadd:
    case Mnemonic::Fmul:
      srcs[n_srcs++] = 32 + d.ra;
      srcs[n_srcs++] = 32 + d.rb;
      dst = 32 + d.rd;
      break;
  }
}

std::vector<uint64_t> schedule_commits(const std::vector<ExecStep>& steps,
                                       const std::vector<DecodedInst>& decoded,
                                       const UArchParams& params) {
  const size_t n = steps.size();
  std::vector<uint64_t> f(n), s(n), c(n), t(n);
  std::array<uint64_t, kScoreboardSize> ready{};

  // Direct-mapped cache over the committed access stream. The hit/miss
  // sequence depends only on the program, never on pipeline widths.
  std::vector<int64_t> tags(static_cast<size_t>(params.cache_lines), -1);
  const uint64_t line_bytes = static_cast<uint64_t>(params.cache_line_bytes);
  const uint64_t lines = static_cast<uint64_t>(params.cache_lines);

  uint64_t redirect = 0;  // earliest fetch cycle for the next instruction after a taken branch
  const size_t fw = static_cast<size_t>(params.fetch_width);
  const size_t iw = static_cast<size_t>(params.issue_width);
  const size_t cw = static_cast<size_t>(params.commit_width);
  const size_t rob = static_cast<size_t>(params.rob_entries);

  for (size_t i = 0; i < n; ++i) {
    const ExecStep& st = steps[i];
    const DecodedInst& d = decoded[st.code_index];

    uint64_t fi = redirect;
    if (i > 0) fi = std::max(fi, f[i - 1]);
    if (i >= fw) fi = std::max(fi, f[i - fw] + 1);
    if (i >= rob) fi = std::max(fi, t[i - rob] + 1);
    f[i] = fi;

    uint64_t si = fi + 1;  // one decode/dispatch cycle
    if (i > 0) si = std::max(si, s[i - 1]);
    if (i >= iw) si = std::max(si, s[i - iw] + 1);
    std::array<int, 3> srcs;
    int n_srcs = 0, dst = -1;
    dep_regs(d, srcs, n_srcs, dst);
    for (int k = 0; k < n_srcs; ++k) si = std::max(si, ready[static_cast<size_t>(srcs[k])]);
    s[i] = si;

    uint64_t lat = static_cast<uint64_t>(params.latency(d.m));
    if (st.is_mem) {
      uint64_t line = (st.mem_addr / line_bytes) % lines;
      int64_t tag = static_cast<int64_t>(st.mem_addr / line_bytes / lines);
      if (tags[static_cast<size_t>(line)] != tag) {
        lat += static_cast<uint64_t>(params.miss_penalty);
        tags[static_cast<size_t>(line)] = tag;
      }
    }
    c[i] = si + lat;
    if (dst >= 0) ready[static_cast<size_t>(dst)] = c[i];

    uint64_t ti = c[i];
    if (i > 0) ti = std::max(ti, t[i - 1]);
    if (i >= cw) ti = std::max(ti, t[i - cw] + 1);
    t[i] = ti;

    if (st.taken) redirect = c[i] + static_cast<uint64_t>(params.mispredict_penalty);
  }
  return t;
}

}  // namespace

SimResult simulate(const Program& program, const UArchParams& params, uint64_t budget,
                   std::string interval_id, trace::TagSet tag) {
  params.validate();
  if (program.code.empty()) throw SpecError("program has no instructions");
  auto decoded = decode_program(program);
  FunctionalRun run = run_functional(program, decoded, budget);
  if (run.steps.empty()) throw SimError("program committed no instructions");
  std::vector<uint64_t> commits = schedule_commits(run.steps, decoded, params);

  SimResult result;
  result.truncated = run.truncated;
  result.trace.interval_id = std::move(interval_id);
  result.trace.tag = tag;
  result.trace.snapshot = program.initial;
  result.trace.records.reserve(run.steps.size());
  for (size_t i = 0; i < run.steps.size(); ++i) {
    trace::CommittedRecord rec;
    rec.inst = program.code[run.steps[i].code_index];
    rec.commit_time = commits[i];
    result.trace.records.push_back(std::move(rec));
  }
  return result;
}

trace::RegisterSnapshot snapshot_at(const Program& program, const UArchParams& params, uint64_t k) {
  auto snaps = snapshots_at(program, params, {k});
  return snaps.front();
}

std::vector<trace::RegisterSnapshot> snapshots_at(const Program& program, const UArchParams& params,
                                                  const std::vector<uint64_t>& ks) {
  (void)params;  // architectural state is timing-independent
  for (size_t i = 1; i < ks.size(); ++i)
    if (ks[i] <= ks[i - 1]) throw IndexError("snapshot indices must be strictly ascending");
  auto decoded = decode_program(program);
  std::vector<trace::RegisterSnapshot> snaps;
  snaps.reserve(ks.size());
  uint64_t budget = ks.empty() ? 0 : ks.back();
  run_functional(program, decoded, budget, &ks, &snaps);
  return snaps;
}

uint64_t committed_count(const Program& program) {
  auto decoded = decode_program(program);
  return run_functional(program, decoded, 0).steps.size();
}

// ---------------------------------------------------------------------------
// Workload generator
// ---------------------------------------------------------------------------

namespace {

// Register conventions used by generated programs:
//   r0-r15   scratch pool (also the default context subset)
//   r23      always zero
//   r24,r25  non-zero divisors, never written
//   r26      inner loop counter
//   r27      outer loop counter (initial value in the snapshot)
//   r28-r31  memory base pointers
constexpr int kZeroReg = 23;
constexpr int kDiv1 = 24, kDiv2 = 25;
constexpr int kInnerCtr = 26, kOuterCtr = 27;

struct MixPlan {
  double alu = 0, mem = 0, branch = 0;
};

MixPlan mix_for(const trace::TagSet& kind) {
  int tags = kind.count();
  MixPlan p;
  if (kind.comp) p.alu += 0.78 / tags;
  if (kind.mem) p.mem += 0.58 / tags;
  if (kind.ctrl) p.branch += 0.36 / tags;
  return p;
}

struct BodyBuilder {
  Rng& rng;
  const WorkloadSpec& spec;
  std::vector<DecodedInst> body;
  int mem_slot = 0;

  int scratch() { return static_cast<int>(rng.below(16)); }
  int base_reg() { return 28 + static_cast<int>(rng.below(4)); }

  void emit_alu() {
    switch (rng.below(10)) {
      case 0:
        body.push_back({Mnemonic::Divd, scratch(), scratch(), rng.chance(0.5) ? kDiv1 : kDiv2});
        break;
      case 1:
      case 2:
        body.push_back({Mnemonic::Mul, scratch(), scratch(), scratch()});
        break;
      case 3: {
        Mnemonic m = rng.chance(0.5) ? Mnemonic::Fadd : Mnemonic::Fmul;
        int vd = static_cast<int>(rng.below(8));
        body.push_back({m, vd, static_cast<int>(rng.below(8)), static_cast<int>(rng.below(8))});
        break;
      }
      case 4:
      case 5:
      case 6:
        body.push_back({Mnemonic::Add, scratch(), scratch(), scratch()});
        break;
      default:
        body.push_back(
            {Mnemonic::Addi, scratch(), scratch(), -1, rng.range_i64(-64, 64), true});
        break;
    }
  }

  void emit_mem() {
    // Walk a footprint larger than the default cache so both hits and misses
    // occur; offsets stay within the signed 16-bit immediate range.
    int64_t stride = spec.stride_pattern;
    int64_t off = (stride * mem_slot++) % 16384;
    if (rng.chance(0.65)) {
      body.push_back({Mnemonic::Ld, scratch(), base_reg(), -1, off, true});
    } else {
      body.push_back({Mnemonic::Std, scratch(), base_reg(), -1, off, true});
    }
  }

  // cmpi + conditional forward skip over `filler` instructions.
  void emit_branch_pair() {
    int filler = 1 + static_cast<int>(rng.below(2));
    body.push_back({Mnemonic::Cmpi, -1, scratch(), -1, rng.range_i64(-8, 8), true});
    Cond c = static_cast<Cond>(rng.below(6));
    DecodedInst bc{Mnemonic::Bc, -1, -1, -1, 4 * (filler + 1), true, c};
    body.push_back(bc);
    for (int i = 0; i < filler; ++i) emit_alu();
  }
};

}  // namespace

Program generate_program(const WorkloadSpec& spec) {
  spec.validate();
  Rng rng(spec.seed * 0x9e3779b97f4a7c15ull + 0x243f6a8885a308d3ull);

  Program program;
  program.base_pc = 0x1000;

  // Initial architectural state.
  trace::RegisterSnapshot& snap = program.initial;
  for (int i = 0; i < 16; ++i) snap.set_u64(RegClass::GPR, i, rng.below(1u << 20));
  for (int i = 16; i < 23; ++i) snap.set_u64(RegClass::GPR, i, rng.below(1u << 12));
  snap.set_u64(RegClass::GPR, kZeroReg, 0);
  snap.set_u64(RegClass::GPR, kDiv1, 3);
  snap.set_u64(RegClass::GPR, kDiv2, 7);
  snap.set_u64(RegClass::GPR, kInnerCtr, 0);
  for (int i = 0; i < 4; ++i)
    snap.set_u64(RegClass::GPR, 28 + i, 0x00100000ull + static_cast<uint64_t>(i) * 0x40000ull);
  for (int i = 0; i < 64; ++i) {
    uint64_t lo = i < 8 ? std::bit_cast<uint64_t>(1.0 + 0.25 * static_cast<double>(i) +
                                                  rng.unit())
                        : 0;
    snap.set_u128(RegClass::VSR, i, 0, lo);
  }
  snap.set_u64(RegClass::CR, 0, kCrEq);
  snap.set_u64(RegClass::LR, 0, program.base_pc);
  snap.set_u64(RegClass::CTR, 0, 0);
  snap.set_u64(RegClass::XER, 0, 0);
  snap.set_u64(RegClass::FPSCR, 0, 0);
  snap.set_u64(RegClass::VSCR, 0, 0);
  snap.set_u64(RegClass::CIA, 0, program.base_pc);
  snap.set_u64(RegClass::NIA, 0, program.base_pc + 4);

  std::vector<DecodedInst> code;

  // Degenerate lengths: straight-line, non-branch instructions only.
  if (spec.length < 16) {
    BodyBuilder bb{rng, spec, {}, 0};
    while (bb.body.size() < spec.length) {
      if (spec.kind.mem && rng.chance(0.5))
        bb.emit_mem();
      else
        bb.emit_alu();
    }
    bb.body.resize(spec.length);
    code = bb.body;
  } else {
    MixPlan mix = mix_for(spec.kind);
    if (spec.kind.ctrl) mix.branch = std::max(mix.branch, spec.branch_density);

    BodyBuilder bb{rng, spec, {}, 0};
    // Touch the move/link mnemonics once per program so every opcode and
    // register class appears in traces.
    bb.body.push_back({Mnemonic::Mflr, 15, -1, -1});
    bb.body.push_back({Mnemonic::Mtctr, -1, 14, -1});

    const size_t body_target = std::min<uint64_t>(120, std::max<uint64_t>(24, spec.length / 8));
    while (bb.body.size() < body_target) {
      double roll = rng.unit();
      if (roll < mix.branch / 2.0) {
        // each pair contributes cmpi + bc + filler; bc is the branch
        bb.emit_branch_pair();
      } else if (roll < mix.branch / 2.0 + mix.mem) {
        bb.emit_mem();
      } else {
        bb.emit_alu();
      }
    }

    // Optional inner loop: a short counted loop nested in the body.
    std::vector<DecodedInst> inner;
    if (spec.loop_depth >= 2) {
      int inner_trip = 3 + static_cast<int>(rng.below(4));
      inner.push_back({Mnemonic::Addi, kInnerCtr, kZeroReg, -1, inner_trip, true});
      size_t inner_start = inner.size();
      BodyBuilder ib{rng, spec, {}, 512};
      for (int i = 0; i < 5; ++i) {
        if (spec.kind.mem && rng.chance(0.4))
          ib.emit_mem();
        else
          ib.emit_alu();
      }
      inner.insert(inner.end(), ib.body.begin(), ib.body.end());
      inner.push_back({Mnemonic::Addi, kInnerCtr, kInnerCtr, -1, -1, true});
      inner.push_back({Mnemonic::Cmpi, -1, kInnerCtr, -1, 0, true});
      int64_t back = -4 * static_cast<int64_t>(inner.size() - inner_start);
      inner.push_back({Mnemonic::Bc, -1, -1, -1, back, true, Cond::Ne});
    }

    // Assemble: body, inner loop, countdown, back-edge.
    code = bb.body;
    code.insert(code.end(), inner.begin(), inner.end());
    code.push_back({Mnemonic::Addi, kOuterCtr, kOuterCtr, -1, -1, true});
    code.push_back({Mnemonic::Cmpi, -1, kOuterCtr, -1, 0, true});
    int64_t back = -4 * static_cast<int64_t>(code.size());
    code.push_back({Mnemonic::Bc, -1, -1, -1, back, true, Cond::Ne});

    // Minimum committed instructions per outer iteration (every skip taken).
    size_t per_iter_min = code.size();
    for (const auto& d : code)
      if (d.m == Mnemonic::Bc && d.imm > 0) per_iter_min -= static_cast<size_t>(d.imm / 4 - 1);
    uint64_t trips = (spec.length * 5 / 4) / per_iter_min + 2;
    snap.set_u64(RegClass::GPR, kOuterCtr, trips);
  }

  for (size_t i = 0; i < code.size(); ++i)
    program.code.push_back(encode_instruction(code[i], program.base_pc + 4 * i));

  // Resolve-in-program check for branch targets.
  for (size_t i = 0; i < code.size(); ++i) {
    if (is_branch(code[i].m)) {
      int64_t target = static_cast<int64_t>(i) + code[i].imm / 4;
      if (target < 0 || target > static_cast<int64_t>(code.size()))
        throw SpecError("generated branch target escapes program");
    }
  }
  return program;
}

}  // namespace capsim::microsim
