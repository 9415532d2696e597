#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <random>
#include <utility>

#include "khe/aead.hpp"
#include "khe/bytes.hpp"

namespace khe {

/// Fibonacci LFSR of arbitrary width. Taps are 1-based bit positions
/// (position p is bit p-1 of the state value); the feedback bit is the XOR of
/// the tapped bits and is shifted in at position 1.
///
/// A zero state is a fixed point and is rejected at construction.
template <std::size_t Width, std::size_t... Taps>
class FibonacciLfsr {
  static_assert(Width > 1);
  static_assert(((Taps >= 1 && Taps <= Width) && ...), "tap outside register");

 public:
  static constexpr std::size_t width = Width;
  static constexpr std::size_t word_count = (Width + 63) / 64;
  using Words = std::array<std::uint64_t, word_count>;

  /// Words are little-endian: words[0] holds bits 0..63.
  explicit FibonacciLfsr(const Words& seed) : state_(seed) {
    mask_top();
    if (is_zero()) throw Error(ErrorCode::ZeroSeed);
  }

  void step() noexcept {
    std::uint64_t feedback = (bit(Taps - 1) ^ ...);
    std::uint64_t carry = feedback;
    for (auto& w : state_) {
      std::uint64_t next_carry = w >> 63;
      w = (w << 1) | carry;
      carry = next_carry;
    }
    mask_top();
  }

  const Words& words() const noexcept { return state_; }

  /// Low Width/8 bytes of the state, little-endian.
  template <std::size_t N = Width / 8>
  std::array<std::uint8_t, N> to_bytes() const noexcept {
    static_assert(N * 8 <= Width);
    std::array<std::uint8_t, N> out{};
    for (std::size_t i = 0; i < N; ++i)
      out[i] = static_cast<std::uint8_t>(state_[i / 8] >> (8 * (i % 8)));
    return out;
  }

  friend bool operator==(const FibonacciLfsr&, const FibonacciLfsr&) = default;

 private:
  std::uint64_t bit(std::size_t index) const noexcept {
    return (state_[index / 64] >> (index % 64)) & 1;
  }

  void mask_top() noexcept {
    if constexpr (Width % 64 != 0)
      state_.back() &= (std::uint64_t{1} << (Width % 64)) - 1;
  }

  bool is_zero() const noexcept {
    for (auto w : state_)
      if (w != 0) return false;
    return true;
  }

  Words state_{};
};

/// The IV generator: degree 96, taps (96, 94, 49, 47), period 2^96 - 1.
using LfsrState = FibonacciLfsr<96, 96, 94, 49, 47>;

inline LfsrState lfsr_init(const Nonce96& seed) {
  std::uint64_t high = 0;
  for (int i = 11; i >= 8; --i) high = (high << 8) | seed.bytes[i];
  return LfsrState({load_le64(seed.data()), high});
}

inline LfsrState lfsr_init(std::uint64_t low, std::uint32_t high = 0) {
  return LfsrState({low, high});
}

/// Seeds from the OS entropy source; retries on the (2^-96) zero draw.
inline LfsrState lfsr_init_from_entropy() {
  std::random_device rd;
  for (;;) {
    std::uint64_t lo = (std::uint64_t{rd()} << 32) | rd();
    std::uint32_t hi = rd();
    if (lo != 0 || hi != 0) return LfsrState({lo, hi});
  }
}

inline Nonce96 state_to_nonce(const LfsrState& state) {
  return Nonce96(state.to_bytes<12>());
}

/// Clocks the register once and returns the new state as the IV.
inline std::pair<Nonce96, LfsrState> next_iv(LfsrState state) {
  state.step();
  return {state_to_nonce(state), state};
}

}  // namespace khe
