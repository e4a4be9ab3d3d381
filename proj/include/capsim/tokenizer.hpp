#ifndef CAPSIM_TOKENIZER_HPP
#define CAPSIM_TOKENIZER_HPP

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "capsim/microsim.hpp"
#include "capsim/trace_model.hpp"

namespace capsim::tok {

struct Token {
  enum class Kind : uint8_t {
    Rep,
    End,
    Pad,
    DstsOpen,
    DstsClose,
    SrcsOpen,
    SrcsClose,
    MemOpen,
    MemClose,
    Const,
    Opcode,
    Reg,
    Byte,
  };

  Kind kind = Kind::Pad;
  microsim::Mnemonic opcode = microsim::Mnemonic::Addi;  // Kind::Opcode
  trace::RegClass reg_class = trace::RegClass::GPR;      // Kind::Reg
  int reg_index = 0;                                     // Kind::Reg
  uint8_t byte = 0;                                      // Kind::Byte

  static Token simple(Kind k) { return Token{k, {}, {}, 0, 0}; }
  static Token op(microsim::Mnemonic m) { return Token{Kind::Opcode, m, {}, 0, 0}; }
  static Token reg(trace::RegClass cls, int index) {
    return Token{Kind::Reg, {}, cls, index, 0};
  }
  static Token byte_value(uint8_t b) { return Token{Kind::Byte, {}, {}, 0, b}; }

  std::string to_string() const;
  static Token from_string(std::string_view text);  // throws ParseError

  bool operator==(const Token&) const = default;

  // Stable 4-byte encoding used for hashing and vocabulary keys.
  uint32_t packed() const;
};

// Fixed bijection between the mini-ISA token alphabet and dense indices.
// Layout: REP END PAD <DSTS> </DSTS> <SRCS> </SRCS> <MEM> </MEM> CONST,
// then opcodes, then registers by class, then BYTE 0..255.
class Vocabulary {
public:
  static Vocabulary build();

  uint32_t index_of(const Token& t) const;  // throws UnknownOpcodeError
  const Token& token_at(uint32_t index) const;
  size_t size() const { return tokens_.size(); }
  const std::string& version() const { return version_; }
  uint64_t hash() const { return hash_; }

  uint32_t pad_index() const { return pad_index_; }

  void save(const std::filesystem::path& path) const;
  static Vocabulary load(const std::filesystem::path& path);

private:
  std::vector<Token> tokens_;
  std::unordered_map<uint32_t, uint32_t> index_;  // packed token -> index
  std::string version_;
  uint64_t hash_ = 0;
  uint32_t pad_index_ = 0;
};

struct StandardizedInstruction {
  std::vector<Token> tokens;  // padded to l_token
};

// The four-segment standardization transformation. Constants collapse to
// CONST; implicit destinations (CR for cmpi, CTR for mtctr, NIA for branches,
// LR for mflr) are materialized into DSTS. DSTS/SRCS delimiters are always
// present; the MEM segment appears only for memory instructions.
StandardizedInstruction standardize(const trace::Instruction& inst, int l_token = 24);

// Unpadded token sequence (REP ... END) used for hashing.
std::vector<Token> standardize_core(const trace::Instruction& inst);

struct ContextMatrixSpec {
  struct Entry {
    trace::RegClass cls;
    int index;
  };
  enum class ValueGroups : uint8_t {
    Bytes8,     // one token per byte (two hex digits)
    Nibbles16,  // one token per hex digit
  };

  std::vector<Entry> registers;
  ValueGroups groups = ValueGroups::Bytes8;

  static ContextMatrixSpec desk_default();  // GPR0-15, CR, LR, CTR, XER, CIA, NIA
  static ContextMatrixSpec full_table();    // all Table-style registers

  int value_rows(trace::RegClass cls) const;
  size_t row_count() const;  // M
};

// One REG row followed by the register's value tokens (most-significant
// first) for every entry of the spec, concatenated in spec order.
std::vector<Token> build_context_matrix(const trace::RegisterSnapshot& snapshot,
                                        const ContextMatrixSpec& spec);

struct EncodedClip {
  uint32_t n = 0;  // valid instruction rows
  uint32_t l_token = 0;
  uint32_t l_clip_max = 0;
  std::vector<uint32_t> tokens;   // l_clip_max x l_token, PAD rows beyond n
  std::vector<uint32_t> context;  // M entries
  double label = 0.0;

  std::string interval_id;
  size_t start_idx = 0;
  uint64_t content_key = 0;

  std::span<const uint32_t> row(uint32_t i) const {
    return std::span<const uint32_t>(tokens).subspan(static_cast<size_t>(i) * l_token, l_token);
  }
};

EncodedClip encode_clip(const trace::CodeTraceClip& clip, const ContextMatrixSpec& spec,
                        const Vocabulary& vocab, uint32_t l_token = 24, uint32_t l_clip_max = 256);

// Encoded dataset file (<path>.enc.jsonl): header line with shapes, then one
// clip per line.
void write_encoded(std::span<const EncodedClip> clips, const std::filesystem::path& path);
std::vector<EncodedClip> read_encoded(const std::filesystem::path& path);

}  // namespace capsim::tok

#endif
