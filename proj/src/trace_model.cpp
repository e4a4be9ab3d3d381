#include "capsim/trace_model.hpp"

#include <array>
#include <charconv>
#include <fstream>
#include <sstream>

#include <json.hpp>

namespace capsim {

std::string to_hex(uint64_t value, int hex_digits) {
  static const char* digits = "0123456789abcdef";
  std::string out(static_cast<size_t>(hex_digits), '0');
  for (int i = hex_digits - 1; i >= 0 && value != 0; --i) {
    out[static_cast<size_t>(i)] = digits[value & 0xf];
    value >>= 4;
  }
  return out;
}

uint64_t parse_hex(std::string_view text) {
  if (text.size() >= 2 && text[0] == '0' && (text[1] == 'x' || text[1] == 'X'))
    text.remove_prefix(2);
  if (text.empty() || text.size() > 16) throw ParseError("bad hex literal");
  uint64_t v = 0;
  const auto* first = text.data();
  auto res = std::from_chars(first, first + text.size(), v, 16);
  if (res.ec != std::errc() || res.ptr != first + text.size())
    throw ParseError("bad hex literal: " + std::string(text));
  return v;
}

}  // namespace capsim

namespace capsim::trace {

using nlohmann::json;

namespace {

struct RegClassInfo {
  RegClass cls;
  std::string_view name;
  int count;
  int bits;
};

constexpr std::array<RegClassInfo, kRegClassCount> kRegClasses = {{
    {RegClass::GPR, "GPR", 32, 64},
    {RegClass::VSR, "VSR", 64, 128},
    {RegClass::CR, "CR", 1, 32},
    {RegClass::LR, "LR", 1, 64},
    {RegClass::CTR, "CTR", 1, 64},
    {RegClass::XER, "XER", 1, 64},
    {RegClass::FPSCR, "FPSCR", 1, 32},
    {RegClass::VSCR, "VSCR", 1, 32},
    {RegClass::CIA, "CIA", 1, 64},
    {RegClass::NIA, "NIA", 1, 64},
}};

const RegClassInfo& info(RegClass cls) {
  return kRegClasses[static_cast<size_t>(cls)];
}

}  // namespace

std::string_view reg_class_name(RegClass cls) { return info(cls).name; }

std::optional<RegClass> reg_class_from_name(std::string_view name) {
  for (const auto& c : kRegClasses)
    if (c.name == name) return c.cls;
  return std::nullopt;
}

int reg_class_count(RegClass cls) { return info(cls).count; }
int reg_class_bits(RegClass cls) { return info(cls).bits; }
int reg_class_hex_digits(RegClass cls) { return info(cls).bits / 4; }

std::string reg_name(RegClass cls, int index) {
  const auto& c = info(cls);
  if (c.count == 1) return std::string(c.name);
  return std::string(c.name) + std::to_string(index);
}

std::optional<std::pair<RegClass, int>> parse_reg_name(std::string_view name) {
  size_t digits = 0;
  while (digits < name.size() && std::isdigit(static_cast<unsigned char>(name[name.size() - 1 - digits])))
    ++digits;
  std::string_view base = name.substr(0, name.size() - digits);
  auto cls = reg_class_from_name(base);
  if (!cls) return std::nullopt;
  int index = 0;
  if (digits > 0) {
    auto num = name.substr(name.size() - digits);
    auto res = std::from_chars(num.data(), num.data() + num.size(), index);
    if (res.ec != std::errc()) return std::nullopt;
  }
  if (index < 0 || index >= reg_class_count(*cls)) return std::nullopt;
  if (reg_class_count(*cls) == 1 && digits > 0) return std::nullopt;
  return std::make_pair(*cls, index);
}

Operand Operand::reg(RegClass cls, int index) {
  if (index < 0 || index >= reg_class_count(cls))
    throw ValidationError("register index out of range: " + reg_name(cls, index));
  Operand op;
  op.kind = Kind::Register;
  op.reg_class = cls;
  op.reg_index = index;
  return op;
}

void RegisterSnapshot::set_hex(RegClass cls, int index, std::string hex_value) {
  if (hex_value.size() >= 2 && hex_value[0] == '0' && hex_value[1] == 'x')
    hex_value.erase(0, 2);
  const size_t want = static_cast<size_t>(reg_class_hex_digits(cls));
  if (hex_value.size() != want)
    throw ValidationError("snapshot value for " + reg_name(cls, index) + " must be " +
                          std::to_string(want) + " hex digits, got " + std::to_string(hex_value.size()));
  for (char& c : hex_value) {
    c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    if (!std::isxdigit(static_cast<unsigned char>(c)))
      throw ValidationError("snapshot value for " + reg_name(cls, index) + " is not hex");
  }
  values_[reg_name(cls, index)] = "0x" + hex_value;
}

void RegisterSnapshot::set_u64(RegClass cls, int index, uint64_t value) {
  set_hex(cls, index, to_hex(value, reg_class_hex_digits(cls)));
}

void RegisterSnapshot::set_u128(RegClass cls, int index, uint64_t hi, uint64_t lo) {
  set_hex(cls, index, to_hex(hi, 16) + to_hex(lo, 16));
}

bool RegisterSnapshot::has(RegClass cls, int index) const {
  return values_.count(reg_name(cls, index)) > 0;
}

const std::string& RegisterSnapshot::hex_value(RegClass cls, int index) const {
  auto it = values_.find(reg_name(cls, index));
  if (it == values_.end())
    throw MissingRegisterError("snapshot missing register " + reg_name(cls, index));
  return it->second;
}

uint64_t RegisterSnapshot::u64_value(RegClass cls, int index) const {
  const std::string& hex = hex_value(cls, index);
  std::string_view v(hex);
  v.remove_prefix(2);
  if (v.size() > 16) v = v.substr(v.size() - 16);
  return parse_hex(v);
}

void RegisterSnapshot::validate(std::span<const std::pair<RegClass, int>> required) const {
  for (const auto& [name, value] : values_) {
    auto reg = parse_reg_name(name);
    if (!reg) throw ValidationError("snapshot has unknown register name: " + name);
    const size_t want = static_cast<size_t>(reg_class_hex_digits(reg->first)) + 2;
    if (value.size() != want || value[0] != '0' || value[1] != 'x')
      throw ValidationError("snapshot value for " + name + " has wrong width");
    for (size_t i = 2; i < value.size(); ++i) {
      char c = value[i];
      if (!std::isxdigit(static_cast<unsigned char>(c)) ||
          (std::isalpha(static_cast<unsigned char>(c)) && !std::islower(static_cast<unsigned char>(c))))
        throw ValidationError("snapshot value for " + name + " is not lowercase hex");
    }
  }
  for (const auto& [cls, idx] : required)
    if (!has(cls, idx))
      throw ValidationError("snapshot missing required register " + reg_name(cls, idx));
}

TagSet TagSet::parse(std::string_view text) {
  TagSet t;
  size_t pos = 0;
  while (pos <= text.size()) {
    size_t next = text.find('+', pos);
    std::string_view part = text.substr(pos, next == std::string_view::npos ? std::string_view::npos : next - pos);
    if (part == "CTRL")
      t.ctrl = true;
    else if (part == "COMP")
      t.comp = true;
    else if (part == "MEM")
      t.mem = true;
    else
      throw ParseError("unknown tag: " + std::string(part));
    if (next == std::string_view::npos) break;
    pos = next + 1;
  }
  return t;
}

std::vector<std::string> TagSet::names() const {
  std::vector<std::string> out;
  if (ctrl) out.push_back("CTRL");
  if (comp) out.push_back("COMP");
  if (mem) out.push_back("MEM");
  return out;
}

std::string TagSet::to_string() const {
  std::string out;
  for (const auto& n : names()) {
    if (!out.empty()) out += '+';
    out += n;
  }
  return out;
}

std::span<const std::pair<RegClass, int>> default_required_registers() {
  static const std::vector<std::pair<RegClass, int>> regs = [] {
    std::vector<std::pair<RegClass, int>> r;
    for (int i = 0; i < 16; ++i) r.emplace_back(RegClass::GPR, i);
    r.emplace_back(RegClass::CR, 0);
    r.emplace_back(RegClass::LR, 0);
    r.emplace_back(RegClass::CTR, 0);
    r.emplace_back(RegClass::XER, 0);
    r.emplace_back(RegClass::CIA, 0);
    r.emplace_back(RegClass::NIA, 0);
    return r;
  }();
  return regs;
}

void validate_interval(const IntervalTrace& trace) {
  if (trace.records.empty()) throw ValidationError("interval has no records");
  for (size_t i = 1; i < trace.records.size(); ++i) {
    if (trace.records[i].commit_time < trace.records[i - 1].commit_time)
      throw ValidationError("commit times not monotone at record " + std::to_string(i) +
                            " of interval " + trace.interval_id);
  }
  trace.snapshot.validate(default_required_registers());
  for (const auto& rec : trace.records) {
    if (rec.inst.dsts.size() > 3 || rec.inst.srcs.size() > 3)
      throw ValidationError("instruction operand lists exceed 3 entries");
  }
}

namespace {

json operand_to_json(const Operand& op) {
  if (!op.is_register()) return json{{"const", true}};
  return json{{"r", std::string(reg_class_name(op.reg_class))}, {"i", op.reg_index}};
}

Operand operand_from_json(const json& j) {
  if (j.contains("const")) return Operand::constant();
  auto cls = reg_class_from_name(j.at("r").get<std::string>());
  if (!cls) throw ParseError("unknown register class in operand");
  return Operand::reg(*cls, j.at("i").get<int>());
}

json record_to_json(const CommittedRecord& rec) {
  json j;
  j["pc"] = "0x" + to_hex(rec.inst.pc, 16);
  j["asm"] = rec.inst.raw;
  j["op"] = rec.inst.mnemonic;
  json dsts = json::array();
  for (const auto& d : rec.inst.dsts) dsts.push_back(operand_to_json(d));
  j["dsts"] = dsts;
  json srcs = json::array();
  for (const auto& s : rec.inst.srcs) srcs.push_back(operand_to_json(s));
  j["srcs"] = srcs;
  if (rec.inst.mem) {
    json m;
    if (rec.inst.mem->is_load) m["ld"] = true;
    if (rec.inst.mem->is_store) m["st"] = true;
    m["base"] = operand_to_json(rec.inst.mem->base);
    m["off"] = rec.inst.mem->offset_present;
    j["mem"] = m;
  }
  j["commit"] = rec.commit_time;
  return j;
}

CommittedRecord record_from_json(const json& j) {
  CommittedRecord rec;
  rec.inst.pc = parse_hex(j.at("pc").get<std::string>());
  rec.inst.raw = j.at("asm").get<std::string>();
  rec.inst.mnemonic = j.at("op").get<std::string>();
  for (const auto& d : j.at("dsts")) rec.inst.dsts.push_back(operand_from_json(d));
  for (const auto& s : j.at("srcs")) rec.inst.srcs.push_back(operand_from_json(s));
  if (j.contains("mem")) {
    const auto& m = j.at("mem");
    MemAccess mem;
    mem.is_load = m.value("ld", false);
    mem.is_store = m.value("st", false);
    if (mem.is_load == mem.is_store)
      throw ValidationError("memory access must be exactly one of load/store");
    mem.base = operand_from_json(m.at("base"));
    if (!mem.base.is_register()) throw ValidationError("memory base must be a register");
    mem.offset_present = m.value("off", false);
    rec.inst.mem = mem;
  }
  rec.commit_time = j.at("commit").get<uint64_t>();
  return rec;
}

json snapshot_to_json(const RegisterSnapshot& snap) {
  json j = json::object();
  for (const auto& [name, value] : snap.entries()) j[name] = value;
  return j;
}

RegisterSnapshot snapshot_from_json(const json& j) {
  RegisterSnapshot snap;
  for (auto it = j.begin(); it != j.end(); ++it) {
    auto reg = parse_reg_name(it.key());
    if (!reg) throw ParseError("unknown register in snapshot: " + it.key());
    snap.set_hex(reg->first, reg->second, it.value().get<std::string>());
  }
  return snap;
}

}  // namespace

std::string record_to_json_line(const CommittedRecord& rec) {
  return record_to_json(rec).dump();
}

CommittedRecord record_from_json_line(std::string_view line) {
  json j = json::parse(line, nullptr, /*allow_exceptions=*/true);
  return record_from_json(j);
}

IntervalTrace load_interval(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open trace file: " + path.string());
  IntervalTrace trace;
  std::string line;
  size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::exception& e) {
      throw ParseError(path.string() + ":" + std::to_string(line_no) + ": " + e.what());
    }
    try {
      if (line_no == 1) {
        trace.interval_id = j.at("interval_id").get<std::string>();
        TagSet tag;
        for (const auto& t : j.at("tag")) {
          std::string name = t.get<std::string>();
          if (name == "CTRL")
            tag.ctrl = true;
          else if (name == "COMP")
            tag.comp = true;
          else if (name == "MEM")
            tag.mem = true;
          else
            throw ParseError("unknown tag " + name);
        }
        trace.tag = tag;
        trace.snapshot = snapshot_from_json(j.at("snapshot"));
      } else {
        trace.records.push_back(record_from_json(j));
      }
    } catch (const json::exception& e) {
      throw ParseError(path.string() + ":" + std::to_string(line_no) + ": " + e.what());
    } catch (const ValidationError&) {
      throw;
    } catch (const ParseError& e) {
      throw ParseError(path.string() + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  if (line_no == 0) throw ParseError(path.string() + ": empty trace file");
  validate_interval(trace);
  return trace;
}

void store_interval(const IntervalTrace& trace, const std::filesystem::path& path) {
  validate_interval(trace);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write trace file: " + path.string());
  json header;
  header["interval_id"] = trace.interval_id;
  header["tag"] = trace.tag.names();
  header["snapshot"] = snapshot_to_json(trace.snapshot);
  out << header.dump() << '\n';
  for (const auto& rec : trace.records) out << record_to_json(rec).dump() << '\n';
  if (!out) throw IoError("write failed: " + path.string());
}

}  // namespace capsim::trace
