#pragma once

// Byte layouts of the usage policy (16 bytes), key handle (64 bytes) and wrap
// request (48 bytes). Little-endian throughout. These are the on-disk and
// on-wire formats.
//
// Policy word:
//   byte 0      algorithm   (0x01 = AES-128-GCM)
//   byte 1      crypt_attr  bit0 encrypt, bit1 decrypt
//   byte 2      privileges  bit0 user, bit1 supervisor, bit2 machine
//   byte 3      feature_map bit0 binding, bit1 pmp-mode, bit2 counter, bit3 self-bind
//   bytes 4-15  reserved, zero
//
// Key handle:
//   bytes 0-15  policy (GCM aad)
//   bytes 16-27 IV_handle, bytes 28-31 zero
//   bytes 32-47 GCM tag
//   bytes 48-63 wrapped user key
//
// Wrap request:
//   bytes 0-15  plaintext user key
//   bytes 16-31 policy
//   bytes 32-39 binding id (u64 LE)
//   byte 40     initial lifetime counter
//   bytes 41-47 reserved, zero

#include <array>
#include <cstdint>

#include "khe/aead.hpp"
#include "khe/bytes.hpp"

namespace khe {

inline constexpr std::size_t kPolicySize = 16;
inline constexpr std::size_t kHandleSize = 64;
inline constexpr std::size_t kWrapRequestSize = 48;

enum class Algorithm : std::uint8_t { Aes128Gcm = 0x01 };

enum class Privilege : std::uint8_t { User = 0, Supervisor = 1, Machine = 2 };

namespace crypt_attr {
inline constexpr std::uint8_t kEncrypt = 1u << 0;
inline constexpr std::uint8_t kDecrypt = 1u << 1;
inline constexpr std::uint8_t kMask = kEncrypt | kDecrypt;
}  // namespace crypt_attr

namespace privilege_set {
inline constexpr std::uint8_t kUser = 1u << 0;
inline constexpr std::uint8_t kSupervisor = 1u << 1;
inline constexpr std::uint8_t kMachine = 1u << 2;
inline constexpr std::uint8_t kAll = kUser | kSupervisor | kMachine;

constexpr std::uint8_t bit(Privilege p) noexcept {
  return static_cast<std::uint8_t>(1u << static_cast<unsigned>(p));
}
}  // namespace privilege_set

namespace feature {
inline constexpr std::uint8_t kBinding = 1u << 0;
inline constexpr std::uint8_t kPmpMode = 1u << 1;
inline constexpr std::uint8_t kCounter = 1u << 2;
inline constexpr std::uint8_t kSelfBind = 1u << 3;
inline constexpr std::uint8_t kMask = kBinding | kPmpMode | kCounter | kSelfBind;
}  // namespace feature

struct UsagePolicy {
  Algorithm algorithm = Algorithm::Aes128Gcm;
  std::uint8_t crypt_attr = 0;
  std::uint8_t privileges = 0;
  std::uint8_t feature_map = 0;

  bool permits_encrypt() const noexcept { return crypt_attr & crypt_attr::kEncrypt; }
  bool permits_decrypt() const noexcept { return crypt_attr & crypt_attr::kDecrypt; }
  bool encrypt_only() const noexcept { return permits_encrypt() && !permits_decrypt(); }
  bool decrypt_only() const noexcept { return permits_decrypt() && !permits_encrypt(); }
  bool permits(Privilege p) const noexcept { return privileges & privilege_set::bit(p); }
  bool binding() const noexcept { return feature_map & feature::kBinding; }
  bool pmp_mode() const noexcept { return feature_map & feature::kPmpMode; }
  bool counter() const noexcept { return feature_map & feature::kCounter; }
  bool self_bind() const noexcept { return feature_map & feature::kSelfBind; }

  /// Lowest privilege level present in the set.
  Privilege min_privilege() const noexcept {
    if (privileges & privilege_set::kUser) return Privilege::User;
    if (privileges & privilege_set::kSupervisor) return Privilege::Supervisor;
    return Privilege::Machine;
  }

  friend bool operator==(const UsagePolicy&, const UsagePolicy&) = default;
};

using PolicyBytes = std::array<std::uint8_t, kPolicySize>;
using HandleBytes = std::array<std::uint8_t, kHandleSize>;
using WrapRequestBytes = std::array<std::uint8_t, kWrapRequestSize>;

inline void validate(const UsagePolicy& p) {
  auto fail = [](const char* what) { throw Error(ErrorCode::InvariantViolation, what); };
  if (p.algorithm != Algorithm::Aes128Gcm) fail("unsupported algorithm");
  if ((p.crypt_attr & crypt_attr::kMask) == 0 || (p.crypt_attr & ~crypt_attr::kMask) != 0)
    fail("crypt_attr");
  if ((p.privileges & privilege_set::kAll) == 0 || (p.privileges & ~privilege_set::kAll) != 0)
    fail("privileges");
  if ((p.feature_map & ~feature::kMask) != 0) fail("unknown feature bit");
  if ((p.pmp_mode() || p.self_bind()) && !p.binding()) fail("pmp-mode/self-bind without binding");
  if (p.pmp_mode() && p.self_bind()) fail("pmp-mode and self-bind are exclusive");
}

inline PolicyBytes encode_policy(const UsagePolicy& p) {
  validate(p);
  PolicyBytes out{};
  out[0] = static_cast<std::uint8_t>(p.algorithm);
  out[1] = p.crypt_attr;
  out[2] = p.privileges;
  out[3] = p.feature_map;
  return out;
}

inline UsagePolicy decode_policy(ByteView bytes) {
  if (bytes.size() != kPolicySize) throw Error(ErrorCode::BadLength, "policy");
  for (std::size_t i = 4; i < kPolicySize; ++i)
    if (bytes[i] != 0) throw Error(ErrorCode::InvariantViolation, "reserved policy bits");
  UsagePolicy p{static_cast<Algorithm>(bytes[0]), bytes[1], bytes[2], bytes[3]};
  validate(p);
  return p;
}

struct KeyHandle {
  UsagePolicy policy;
  Nonce96 iv_handle;
  AuthTag tag;
  std::array<std::uint8_t, 16> wrapped_key{};

  friend bool operator==(const KeyHandle&, const KeyHandle&) = default;
};

inline HandleBytes encode_handle(const KeyHandle& h) {
  HandleBytes out{};
  auto policy = encode_policy(h.policy);
  std::copy(policy.begin(), policy.end(), out.begin());
  std::copy(h.iv_handle.bytes.begin(), h.iv_handle.bytes.end(), out.begin() + 16);
  std::copy(h.tag.bytes.begin(), h.tag.bytes.end(), out.begin() + 32);
  std::copy(h.wrapped_key.begin(), h.wrapped_key.end(), out.begin() + 48);
  return out;
}

inline KeyHandle decode_handle(ByteView bytes) {
  if (bytes.size() != kHandleSize) throw Error(ErrorCode::BadLength, "handle");
  for (std::size_t i = 28; i < 32; ++i)
    if (bytes[i] != 0) throw Error(ErrorCode::InvariantViolation, "IV padding");
  KeyHandle h;
  h.policy = decode_policy(bytes.subspan(0, 16));
  h.iv_handle = Nonce96::from(bytes.subspan(16, 12));
  h.tag = AuthTag::from(bytes.subspan(32, 16));
  std::copy_n(bytes.begin() + 48, 16, h.wrapped_key.begin());
  return h;
}

struct WrapRequest {
  AeadKey user_key;
  UsagePolicy policy;
  std::uint64_t binding_id = 0;
  std::uint8_t counter = 0;

  friend bool operator==(const WrapRequest&, const WrapRequest&) = default;
};

inline void validate(const WrapRequest& r) {
  validate(r.policy);
  if (r.policy.counter() != (r.counter > 0))
    throw Error(ErrorCode::InvariantViolation, "counter value vs counter feature");
  if (!r.policy.binding() && r.binding_id != 0)
    throw Error(ErrorCode::InvariantViolation, "binding id without binding feature");
}

/// The result holds the plaintext key; callers wipe it.
inline WrapRequestBytes encode_wrap_request(const WrapRequest& r) {
  validate(r);
  WrapRequestBytes out{};
  std::copy(r.user_key.bytes.begin(), r.user_key.bytes.end(), out.begin());
  auto policy = encode_policy(r.policy);
  std::copy(policy.begin(), policy.end(), out.begin() + 16);
  store_le64(out.data() + 32, r.binding_id);
  out[40] = r.counter;
  return out;
}

inline WrapRequest decode_wrap_request(ByteView bytes) {
  if (bytes.size() != kWrapRequestSize) throw Error(ErrorCode::BadLength, "wrap request");
  for (std::size_t i = 41; i < kWrapRequestSize; ++i)
    if (bytes[i] != 0) throw Error(ErrorCode::InvariantViolation, "reserved request bytes");
  WrapRequest r;
  r.user_key = AeadKey::from(bytes.subspan(0, 16));
  r.policy = decode_policy(bytes.subspan(16, 16));
  r.binding_id = load_le64(bytes.data() + 32);
  r.counter = bytes[40];
  validate(r);
  return r;
}

/// 90-bit HSC tag: the IV shifted right by the 6 index bits.
struct CacheTag {
  std::uint64_t low = 0;   // bits 0..63
  std::uint32_t high = 0;  // bits 64..89

  static constexpr std::uint32_t kHighMask = (1u << 26) - 1;

  friend bool operator==(const CacheTag&, const CacheTag&) = default;
};

struct IvSplit {
  std::uint8_t set_index = 0;  // 6 bits
  CacheTag tag;

  friend bool operator==(const IvSplit&, const IvSplit&) = default;
};

/// Interprets the IV as a 96-bit little-endian integer: index = iv mod 64,
/// tag = iv >> 6.
inline IvSplit split_iv(const Nonce96& iv) noexcept {
  std::uint64_t lo = load_le64(iv.data());
  std::uint32_t hi = 0;
  for (int i = 11; i >= 8; --i) hi = (hi << 8) | iv.bytes[i];
  IvSplit s;
  s.set_index = static_cast<std::uint8_t>(lo & 0x3f);
  s.tag.low = (lo >> 6) | (std::uint64_t{hi} << 58);
  s.tag.high = hi >> 6;
  return s;
}

inline Nonce96 recombine_iv(const IvSplit& s) noexcept {
  std::uint64_t lo = (s.tag.low << 6) | (s.set_index & 0x3f);
  std::uint32_t hi = static_cast<std::uint32_t>(s.tag.low >> 58) | (s.tag.high << 6);
  Nonce96 iv;
  store_le64(iv.data(), lo);
  for (int i = 0; i < 4; ++i) iv.bytes[8 + i] = static_cast<std::uint8_t>(hi >> (8 * i));
  return iv;
}

}  // namespace khe
