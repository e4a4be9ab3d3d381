#include "capsim/tokenizer.hpp"

#include <algorithm>
#include <fstream>

#include <json.hpp>

namespace capsim::tok {

using nlohmann::json;
using microsim::Mnemonic;
using trace::RegClass;

namespace {

constexpr std::array<std::string_view, 10> kSimpleNames = {
    "REP", "END", "PAD", "<DSTS>", "</DSTS>", "<SRCS>", "</SRCS>", "<MEM>", "</MEM>", "CONST"};

}  // namespace

std::string Token::to_string() const {
  switch (kind) {
    case Kind::Opcode:
      return "OP:" + std::string(microsim::mnemonic_name(opcode));
    case Kind::Reg:
      return "REG:" + trace::reg_name(reg_class, reg_index);
    case Kind::Byte:
      return "BYTE:0x" + to_hex(byte, 2);
    default:
      return std::string(kSimpleNames[static_cast<size_t>(kind)]);
  }
}

Token Token::from_string(std::string_view text) {
  for (size_t i = 0; i < kSimpleNames.size(); ++i)
    if (kSimpleNames[i] == text) return simple(static_cast<Kind>(i));
  if (text.starts_with("OP:")) {
    auto m = microsim::mnemonic_from_name(text.substr(3));
    if (!m) throw ParseError("unknown opcode token: " + std::string(text));
    return op(*m);
  }
  if (text.starts_with("REG:")) {
    auto reg = trace::parse_reg_name(text.substr(4));
    if (!reg) throw ParseError("unknown register token: " + std::string(text));
    return Token::reg(reg->first, reg->second);
  }
  if (text.starts_with("BYTE:")) {
    uint64_t v = parse_hex(text.substr(5));
    if (v > 255) throw ParseError("byte token out of range: " + std::string(text));
    return byte_value(static_cast<uint8_t>(v));
  }
  throw ParseError("unknown token: " + std::string(text));
}

uint32_t Token::packed() const {
  uint32_t payload = 0;
  switch (kind) {
    case Kind::Opcode:
      payload = static_cast<uint32_t>(opcode);
      break;
    case Kind::Reg:
      payload = (static_cast<uint32_t>(reg_class) << 8) | static_cast<uint32_t>(reg_index);
      break;
    case Kind::Byte:
      payload = byte;
      break;
    default:
      break;
  }
  return (static_cast<uint32_t>(kind) << 24) | payload;
}

Vocabulary Vocabulary::build() {
  Vocabulary v;
  for (size_t i = 0; i < kSimpleNames.size(); ++i)
    v.tokens_.push_back(Token::simple(static_cast<Token::Kind>(i)));
  for (int m = 0; m < microsim::kMnemonicCount; ++m)
    v.tokens_.push_back(Token::op(static_cast<Mnemonic>(m)));
  for (int cls = 0; cls < trace::kRegClassCount; ++cls) {
    RegClass c = static_cast<RegClass>(cls);
    for (int i = 0; i < trace::reg_class_count(c); ++i) v.tokens_.push_back(Token::reg(c, i));
  }
  for (int b = 0; b < 256; ++b) v.tokens_.push_back(Token::byte_value(static_cast<uint8_t>(b)));

  for (uint32_t i = 0; i < v.tokens_.size(); ++i) v.index_[v.tokens_[i].packed()] = i;
  v.pad_index_ = v.index_.at(Token::simple(Token::Kind::Pad).packed());
  v.version_ = "capsim-vocab-1";
  Fnv64 h;
  h.add_bytes(v.version_);
  for (const auto& t : v.tokens_) h.add_u32(t.packed());
  v.hash_ = h.value();
  return v;
}

uint32_t Vocabulary::index_of(const Token& t) const {
  auto it = index_.find(t.packed());
  if (it == index_.end()) throw UnknownOpcodeError("token not in vocabulary: " + t.to_string());
  return it->second;
}

const Token& Vocabulary::token_at(uint32_t index) const {
  if (index >= tokens_.size())
    throw IndexError("token index out of range: " + std::to_string(index));
  return tokens_[index];
}

void Vocabulary::save(const std::filesystem::path& path) const {
  json j;
  j["version"] = version_;
  j["hash"] = "0x" + to_hex(hash_, 16);
  json table = json::array();
  for (uint32_t i = 0; i < tokens_.size(); ++i)
    table.push_back(json{{"index", i}, {"token", tokens_[i].to_string()}});
  j["tokens"] = table;
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write vocabulary: " + path.string());
  out << j.dump(2) << '\n';
}

Vocabulary Vocabulary::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open vocabulary: " + path.string());
  json j = json::parse(in, nullptr, true);
  Vocabulary fresh = build();
  if (j.at("version").get<std::string>() != fresh.version_)
    throw ValidationError("vocabulary version mismatch in " + path.string());
  const auto& table = j.at("tokens");
  if (table.size() != fresh.tokens_.size())
    throw ValidationError("vocabulary size mismatch in " + path.string());
  for (const auto& entry : table) {
    uint32_t idx = entry.at("index").get<uint32_t>();
    Token t = Token::from_string(entry.at("token").get<std::string>());
    if (fresh.index_of(t) != idx)
      throw ValidationError("vocabulary table mismatch at index " + std::to_string(idx));
  }
  if (parse_hex(j.at("hash").get<std::string>()) != fresh.hash_)
    throw ValidationError("vocabulary hash mismatch in " + path.string());
  return fresh;
}

std::vector<Token> standardize_core(const trace::Instruction& inst) {
  auto m = microsim::mnemonic_from_name(inst.mnemonic);
  if (!m) throw UnknownOpcodeError("unknown mnemonic: " + inst.mnemonic);

  std::vector<Token> out;
  out.push_back(Token::simple(Token::Kind::Rep));
  out.push_back(Token::op(*m));

  auto operand_token = [](const trace::Operand& op) {
    if (op.is_register()) return Token::reg(op.reg_class, op.reg_index);
    return Token::simple(Token::Kind::Const);
  };

  out.push_back(Token::simple(Token::Kind::DstsOpen));
  for (const auto& d : inst.dsts) out.push_back(operand_token(d));
  switch (*m) {
    case Mnemonic::Cmpi:
      out.push_back(Token::reg(RegClass::CR, 0));
      break;
    case Mnemonic::Mtctr:
      out.push_back(Token::reg(RegClass::CTR, 0));
      break;
    case Mnemonic::B:
    case Mnemonic::Bc:
      out.push_back(Token::reg(RegClass::NIA, 0));
      break;
    case Mnemonic::Mflr:
      out.push_back(Token::reg(RegClass::LR, 0));
      break;
    default:
      break;
  }
  out.push_back(Token::simple(Token::Kind::DstsClose));

  out.push_back(Token::simple(Token::Kind::SrcsOpen));
  for (const auto& s : inst.srcs) out.push_back(operand_token(s));
  out.push_back(Token::simple(Token::Kind::SrcsClose));

  if (inst.mem) {
    out.push_back(Token::simple(Token::Kind::MemOpen));
    out.push_back(operand_token(inst.mem->base));
    if (inst.mem->offset_present) out.push_back(Token::simple(Token::Kind::Const));
    out.push_back(Token::simple(Token::Kind::MemClose));
  }

  out.push_back(Token::simple(Token::Kind::End));
  return out;
}

StandardizedInstruction standardize(const trace::Instruction& inst, int l_token) {
  StandardizedInstruction std_inst;
  std_inst.tokens = standardize_core(inst);
  if (std_inst.tokens.size() > static_cast<size_t>(l_token))
    throw OverflowError("standardized form of '" + inst.raw + "' needs " +
                        std::to_string(std_inst.tokens.size()) + " tokens, l_token is " +
                        std::to_string(l_token));
  std_inst.tokens.resize(static_cast<size_t>(l_token), Token::simple(Token::Kind::Pad));
  return std_inst;
}

ContextMatrixSpec ContextMatrixSpec::desk_default() {
  ContextMatrixSpec spec;
  for (int i = 0; i < 16; ++i) spec.registers.push_back({RegClass::GPR, i});
  spec.registers.push_back({RegClass::CR, 0});
  spec.registers.push_back({RegClass::LR, 0});
  spec.registers.push_back({RegClass::CTR, 0});
  spec.registers.push_back({RegClass::XER, 0});
  spec.registers.push_back({RegClass::CIA, 0});
  spec.registers.push_back({RegClass::NIA, 0});
  return spec;
}

ContextMatrixSpec ContextMatrixSpec::full_table() {
  ContextMatrixSpec spec;
  for (int i = 0; i < 32; ++i) spec.registers.push_back({RegClass::GPR, i});
  for (int i = 0; i < 64; ++i) spec.registers.push_back({RegClass::VSR, i});
  for (RegClass c : {RegClass::FPSCR, RegClass::CR, RegClass::VSCR, RegClass::CIA, RegClass::NIA,
                     RegClass::LR, RegClass::XER, RegClass::CTR})
    spec.registers.push_back({c, 0});
  return spec;
}

int ContextMatrixSpec::value_rows(RegClass cls) const {
  int bits = trace::reg_class_bits(cls);
  return groups == ValueGroups::Bytes8 ? bits / 8 : bits / 4;
}

size_t ContextMatrixSpec::row_count() const {
  size_t m = 0;
  for (const auto& e : registers) m += 1 + static_cast<size_t>(value_rows(e.cls));
  return m;
}

std::vector<Token> build_context_matrix(const trace::RegisterSnapshot& snapshot,
                                        const ContextMatrixSpec& spec) {
  std::vector<Token> rows;
  rows.reserve(spec.row_count());
  for (const auto& e : spec.registers) {
    if (!snapshot.has(e.cls, e.index))
      throw MissingRegisterError("snapshot missing register " + trace::reg_name(e.cls, e.index));
    rows.push_back(Token::reg(e.cls, e.index));
    std::string_view hex(snapshot.hex_value(e.cls, e.index));
    hex.remove_prefix(2);
    if (spec.groups == ContextMatrixSpec::ValueGroups::Bytes8) {
      for (size_t i = 0; i < hex.size(); i += 2) {
        uint8_t b = static_cast<uint8_t>(parse_hex(hex.substr(i, 2)));
        rows.push_back(Token::byte_value(b));
      }
    } else {
      for (char c : hex)
        rows.push_back(Token::byte_value(static_cast<uint8_t>(parse_hex({&c, 1}))));
    }
  }
  return rows;
}

EncodedClip encode_clip(const trace::CodeTraceClip& clip, const ContextMatrixSpec& spec,
                        const Vocabulary& vocab, uint32_t l_token, uint32_t l_clip_max) {
  if (clip.records.size() > l_clip_max)
    throw RangeError("clip of length " + std::to_string(clip.records.size()) +
                     " exceeds l_clip_max " + std::to_string(l_clip_max));
  EncodedClip enc;
  enc.n = static_cast<uint32_t>(clip.records.size());
  enc.l_token = l_token;
  enc.l_clip_max = l_clip_max;
  enc.label = static_cast<double>(clip.time);
  enc.interval_id = clip.interval_id;
  enc.start_idx = clip.start_idx;
  enc.content_key = clip.content_key;
  enc.tokens.assign(static_cast<size_t>(l_clip_max) * l_token, vocab.pad_index());
  for (uint32_t i = 0; i < enc.n; ++i) {
    StandardizedInstruction si = standardize(clip.records[i].inst, static_cast<int>(l_token));
    for (uint32_t j = 0; j < l_token; ++j)
      enc.tokens[static_cast<size_t>(i) * l_token + j] = vocab.index_of(si.tokens[j]);
  }
  auto ctx = build_context_matrix(clip.start_snapshot, spec);
  enc.context.reserve(ctx.size());
  for (const auto& t : ctx) enc.context.push_back(vocab.index_of(t));
  return enc;
}

void write_encoded(std::span<const EncodedClip> clips, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write encoded dataset: " + path.string());
  json header;
  header["count"] = clips.size();
  header["l_token"] = clips.empty() ? 0 : clips.front().l_token;
  header["l_clip_max"] = clips.empty() ? 0 : clips.front().l_clip_max;
  header["m"] = clips.empty() ? 0 : clips.front().context.size();
  out << header.dump() << '\n';
  for (const auto& c : clips) {
    json j;
    j["n"] = c.n;
    j["label"] = c.label;
    j["interval_id"] = c.interval_id;
    j["start_idx"] = c.start_idx;
    j["key"] = "0x" + to_hex(c.content_key, 16);
    // Only the valid rows are stored; PAD rows are reconstructed on read.
    json rows = json::array();
    for (uint32_t i = 0; i < c.n; ++i) {
      auto row = c.row(i);
      rows.push_back(std::vector<uint32_t>(row.begin(), row.end()));
    }
    j["tokens"] = rows;
    j["ctx"] = c.context;
    out << j.dump() << '\n';
  }
  if (!out) throw IoError("write failed: " + path.string());
}

std::vector<EncodedClip> read_encoded(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open encoded dataset: " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw ParseError("missing header in " + path.string());
  json header = json::parse(line);
  const uint32_t l_token = header.at("l_token").get<uint32_t>();
  const uint32_t l_clip_max = header.at("l_clip_max").get<uint32_t>();
  const size_t m = header.at("m").get<size_t>();
  const Vocabulary vocab = Vocabulary::build();

  std::vector<EncodedClip> clips;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    json j = json::parse(line);
    EncodedClip c;
    c.n = j.at("n").get<uint32_t>();
    c.l_token = l_token;
    c.l_clip_max = l_clip_max;
    c.label = j.at("label").get<double>();
    c.interval_id = j.at("interval_id").get<std::string>();
    c.start_idx = j.at("start_idx").get<size_t>();
    c.content_key = parse_hex(j.at("key").get<std::string>());
    c.tokens.assign(static_cast<size_t>(l_clip_max) * l_token, vocab.pad_index());
    const auto& rows = j.at("tokens");
    if (rows.size() != c.n) throw ValidationError("row count mismatch in " + path.string());
    for (uint32_t i = 0; i < c.n; ++i) {
      const auto& row = rows[i];
      if (row.size() != l_token) throw ValidationError("row width mismatch in " + path.string());
      for (uint32_t k = 0; k < l_token; ++k)
        c.tokens[static_cast<size_t>(i) * l_token + k] = row[k].get<uint32_t>();
    }
    c.context = j.at("ctx").get<std::vector<uint32_t>>();
    if (c.context.size() != m) throw ValidationError("context size mismatch in " + path.string());
    clips.push_back(std::move(c));
  }
  if (clips.size() != header.at("count").get<size_t>())
    throw ValidationError("clip count mismatch in " + path.string());
  return clips;
}

}  // namespace capsim::tok

// content_key lives with the tokenizer because it hashes standardized tokens.
namespace capsim::trace {

uint64_t content_key(std::span<const CommittedRecord> records) {
  Fnv64 h;
  for (const auto& rec : records) {
    auto tokens = tok::standardize_core(rec.inst);
    for (const auto& t : tokens) h.add_u32(t.packed());
    h.add_u32(0xffffffffu);  // instruction separator
  }
  return h.value();
}

uint64_t content_key(const CodeTraceClip& clip) {
  return content_key(std::span<const CommittedRecord>(clip.records));
}

}  // namespace capsim::trace
