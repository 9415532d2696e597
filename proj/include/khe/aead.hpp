#pragma once

// AES-128-GCM (NIST SP 800-38D) restricted to 96-bit nonces and 128-bit tags.
// This is the single AEAD primitive behind handle wrapping, handle-based data
// operations, swap sealing and engine-state persistence.

#include <array>
#include <cstdint>
#include <optional>

#include "khe/bytes.hpp"
#include "khe/detail/aes128.hpp"

namespace khe {

struct AeadKeyTag { static constexpr bool secret = true; };
struct NonceTag { static constexpr bool secret = false; };
struct AuthTagTag { static constexpr bool secret = false; };

using AeadKey = FixedBytes<16, AeadKeyTag>;
using Nonce96 = FixedBytes<12, NonceTag>;
using AuthTag = FixedBytes<16, AuthTagTag>;

struct Sealed {
  Bytes ciphertext;
  AuthTag tag;
};

namespace detail {

struct Block128 {
  std::uint64_t hi = 0;
  std::uint64_t lo = 0;

  static Block128 load(const std::uint8_t* p) noexcept {
    return {load_be64(p), load_be64(p + 8)};
  }
  void store(std::uint8_t* p) const noexcept {
    store_be64(p, hi);
    store_be64(p + 8, lo);
  }
  Block128& operator^=(const Block128& o) noexcept {
    hi ^= o.hi;
    lo ^= o.lo;
    return *this;
  }
};

// Multiplication in GF(2^128) with the GCM bit ordering (bit 0 is the MSB of
// byte 0). Shift-and-add; timing depends only on loop count.
inline Block128 gf_mul(const Block128& x, const Block128& y) noexcept {
  Block128 z;
  Block128 v = y;
  for (int i = 0; i < 128; ++i) {
    std::uint64_t word = i < 64 ? x.hi : x.lo;
    std::uint64_t bit = (word >> (63 - (i & 63))) & 1;
    std::uint64_t mask = 0 - bit;
    z.hi ^= v.hi & mask;
    z.lo ^= v.lo & mask;
    std::uint64_t carry = v.lo & 1;
    v.lo = (v.lo >> 1) | (v.hi << 63);
    v.hi = (v.hi >> 1) ^ ((0 - carry) & 0xe100000000000000ULL);
  }
  return z;
}

class Ghash {
 public:
  explicit Ghash(const Block128& h) noexcept : h_(h) {}

  void update(ByteView data) noexcept {
    std::size_t off = 0;
    while (off < data.size()) {
      std::uint8_t buf[16] = {};
      std::size_t n = std::min<std::size_t>(16, data.size() - off);
      std::copy_n(data.data() + off, n, buf);
      acc_ ^= Block128::load(buf);
      acc_ = gf_mul(acc_, h_);
      off += n;
    }
  }

  Block128 finish(std::uint64_t aad_len, std::uint64_t ct_len) noexcept {
    acc_ ^= Block128{aad_len * 8, ct_len * 8};
    acc_ = gf_mul(acc_, h_);
    return acc_;
  }

 private:
  Block128 h_;
  Block128 acc_;
};

class GcmContext {
 public:
  GcmContext(const AeadKey& key, const Nonce96& nonce) noexcept : aes_(key.data()) {
    Aes128::Block zero{};
    auto h = aes_.encrypt(zero);
    hash_key_ = Block128::load(h.data());
    std::copy(nonce.bytes.begin(), nonce.bytes.end(), counter0_.begin());
    counter0_[15] = 1;
  }

  // CTR keystream starting at inc32(J0).
  void crypt(ByteView in, std::uint8_t* out) const noexcept {
    Aes128::Block ctr = counter0_;
    std::size_t off = 0;
    while (off < in.size()) {
      increment32(ctr);
      auto ks = aes_.encrypt(ctr);
      std::size_t n = std::min<std::size_t>(16, in.size() - off);
      for (std::size_t i = 0; i < n; ++i) out[off + i] = in[off + i] ^ ks[i];
      off += n;
    }
  }

  AuthTag tag(ByteView aad, ByteView ciphertext) const noexcept {
    Ghash g(hash_key_);
    g.update(aad);
    g.update(ciphertext);
    Block128 s = g.finish(aad.size(), ciphertext.size());
    auto ek = aes_.encrypt(counter0_);
    s ^= Block128::load(ek.data());
    AuthTag t;
    s.store(t.data());
    return t;
  }

 private:
  static void increment32(Aes128::Block& ctr) noexcept {
    for (int i = 15; i >= 12; --i) {
      if (++ctr[i] != 0) break;
    }
  }

  Aes128 aes_;
  Block128 hash_key_;
  Aes128::Block counter0_{};
};

inline bool constant_time_equal(ByteView a, ByteView b) noexcept {
  if (a.size() != b.size()) return false;
  std::uint8_t diff = 0;
  for (std::size_t i = 0; i < a.size(); ++i) diff |= a[i] ^ b[i];
  return diff == 0;
}

}  // namespace detail

/// Authenticated encryption. Plaintext and aad may be empty.
inline Sealed seal(const AeadKey& key, const Nonce96& nonce, ByteView aad, ByteView plaintext) {
  detail::GcmContext ctx(key, nonce);
  Sealed out;
  out.ciphertext.resize(plaintext.size());
  ctx.crypt(plaintext, out.ciphertext.data());
  out.tag = ctx.tag(aad, out.ciphertext);
  return out;
}

/// Verify-then-decrypt. Returns nullopt (AuthFailure) on any tag mismatch;
/// no plaintext is produced in that case.
inline std::optional<Bytes> open(const AeadKey& key, const Nonce96& nonce, ByteView aad,
                                 ByteView ciphertext, const AuthTag& tag) {
  detail::GcmContext ctx(key, nonce);
  AuthTag expected = ctx.tag(aad, ciphertext);
  if (!detail::constant_time_equal(expected.view(), tag.view())) return std::nullopt;
  Bytes plaintext(ciphertext.size());
  ctx.crypt(ciphertext, plaintext.data());
  return plaintext;
}

/// Like open(), but raises Error(AuthFailure).
inline Bytes open_or_throw(const AeadKey& key, const Nonce96& nonce, ByteView aad,
                           ByteView ciphertext, const AuthTag& tag) {
  auto pt = open(key, nonce, aad, ciphertext, tag);
  if (!pt) throw Error(ErrorCode::AuthFailure);
  return std::move(*pt);
}

/// Static sub-key of the wrapping key: the GCM encryption of one zero block
/// with nonce = label (zero padded / truncated to 12 bytes) and aad = label.
inline AeadKey derive_storage_key(const AeadKey& wrap_key, ByteView label) {
  if (label.empty()) throw Error(ErrorCode::EmptyLabel);
  Nonce96 nonce;
  std::copy_n(label.begin(), std::min<std::size_t>(label.size(), 12), nonce.bytes.begin());
  std::array<std::uint8_t, 16> zero{};
  Sealed s = seal(wrap_key, nonce, label, zero);
  AeadKey derived = AeadKey::from(s.ciphertext);
  secure_wipe(s.ciphertext);
  return derived;
}

inline AeadKey derive_storage_key(const AeadKey& wrap_key, std::string_view label) {
  return derive_storage_key(
      wrap_key, ByteView(reinterpret_cast<const std::uint8_t*>(label.data()), label.size()));
}

}  // namespace khe
