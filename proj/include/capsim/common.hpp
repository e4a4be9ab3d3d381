#ifndef CAPSIM_COMMON_HPP
#define CAPSIM_COMMON_HPP

#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>

namespace capsim {

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

#define CAPSIM_ERROR_TYPE(Name) \
  struct Name : Error {         \
    using Error::Error;         \
  }

CAPSIM_ERROR_TYPE(ParseError);
CAPSIM_ERROR_TYPE(ValidationError);
CAPSIM_ERROR_TYPE(IoError);
CAPSIM_ERROR_TYPE(SpecError);
CAPSIM_ERROR_TYPE(SimError);
CAPSIM_ERROR_TYPE(IndexError);
CAPSIM_ERROR_TYPE(EmptyTraceError);
CAPSIM_ERROR_TYPE(ConfigError);
CAPSIM_ERROR_TYPE(UnknownOpcodeError);
CAPSIM_ERROR_TYPE(OverflowError);
CAPSIM_ERROR_TYPE(MissingRegisterError);
CAPSIM_ERROR_TYPE(RangeError);
CAPSIM_ERROR_TYPE(ShapeError);
CAPSIM_ERROR_TYPE(DomainError);
CAPSIM_ERROR_TYPE(NonFiniteError);
CAPSIM_ERROR_TYPE(NonFiniteGradError);
CAPSIM_ERROR_TYPE(MissingClipError);
CAPSIM_ERROR_TYPE(MissingArtifactError);

#undef CAPSIM_ERROR_TYPE

// Deterministic RNG wrapper. All bounded draws go through explicit modulo
// arithmetic so results do not depend on the standard library's
// distribution implementations.
class Rng {
public:
  explicit Rng(uint64_t seed) : gen_(seed) {}

  uint64_t u64() { return gen_(); }

  // Uniform in [0, n). n must be > 0.
  uint64_t below(uint64_t n) { return gen_() % n; }

  // Uniform in [lo, hi] inclusive.
  int64_t range_i64(int64_t lo, int64_t hi) {
    return lo + static_cast<int64_t>(below(static_cast<uint64_t>(hi - lo + 1)));
  }

  // Uniform double in [0, 1).
  double unit() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }

  double range(double lo, double hi) { return lo + (hi - lo) * unit(); }

  bool chance(double p) { return unit() < p; }

private:
  std::mt19937_64 gen_;
};

// FNV-1a 64-bit, used for content keys and artifact hashes.
class Fnv64 {
public:
  void add_byte(uint8_t b) {
    h_ = (h_ ^ b) * 1099511628211ull;
  }
  void add_u32(uint32_t v) {
    for (int i = 0; i < 4; ++i) add_byte(static_cast<uint8_t>(v >> (8 * i)));
  }
  void add_u64(uint64_t v) {
    for (int i = 0; i < 8; ++i) add_byte(static_cast<uint8_t>(v >> (8 * i)));
  }
  void add_bytes(std::string_view s) {
    for (char c : s) add_byte(static_cast<uint8_t>(c));
  }
  uint64_t value() const { return h_; }

private:
  uint64_t h_ = 14695981039346656037ull;
};

std::string to_hex(uint64_t value, int hex_digits);
uint64_t parse_hex(std::string_view text);  // accepts optional 0x prefix

}  // namespace capsim

#endif
