#pragma once

// Thin OpenSSL wrappers for the provisioning channel: X25519, Ed25519,
// HKDF-SHA256, HMAC-SHA256, SHA-256. Data-path AEAD stays in khe/aead.hpp.

#include <array>
#include <memory>
#include <stdexcept>
#include <string_view>

#include <openssl/evp.h>
#include <openssl/hmac.h>
#include <openssl/kdf.h>
#include <openssl/rand.h>

#include "khe/bytes.hpp"
#include "khe/error.hpp"

namespace khe::provision {

using Digest = std::array<std::uint8_t, 32>;
using PublicKey = std::array<std::uint8_t, 32>;
using Signature = std::array<std::uint8_t, 64>;

struct SecretKeyTag { static constexpr bool secret = true; };
using SecretKey32 = FixedBytes<32, SecretKeyTag>;

namespace detail {

struct PkeyFree { void operator()(EVP_PKEY* p) const { EVP_PKEY_free(p); } };
struct PkeyCtxFree { void operator()(EVP_PKEY_CTX* p) const { EVP_PKEY_CTX_free(p); } };
struct MdCtxFree { void operator()(EVP_MD_CTX* p) const { EVP_MD_CTX_free(p); } };
using Pkey = std::unique_ptr<EVP_PKEY, PkeyFree>;
using PkeyCtx = std::unique_ptr<EVP_PKEY_CTX, PkeyCtxFree>;
using MdCtx = std::unique_ptr<EVP_MD_CTX, MdCtxFree>;

[[noreturn]] inline void fail(const char* what) { throw std::runtime_error(std::string("openssl: ") + what); }

inline Pkey private_key(int type, const SecretKey32& sk) {
  Pkey k(EVP_PKEY_new_raw_private_key(type, nullptr, sk.data(), sk.size()));
  if (!k) fail("raw private key");
  return k;
}

inline Pkey public_key(int type, const PublicKey& pk) {
  Pkey k(EVP_PKEY_new_raw_public_key(type, nullptr, pk.data(), pk.size()));
  if (!k) throw Error(ErrorCode::ProtocolViolation, "bad public key");
  return k;
}

inline PublicKey public_of(int type, const SecretKey32& sk) {
  auto k = private_key(type, sk);
  PublicKey pk{};
  std::size_t len = pk.size();
  if (EVP_PKEY_get_raw_public_key(k.get(), pk.data(), &len) != 1 || len != pk.size()) fail("public key");
  return pk;
}

}  // namespace detail

inline SecretKey32 random_secret() {
  SecretKey32 sk;
  if (RAND_bytes(sk.data(), static_cast<int>(sk.size())) != 1) detail::fail("RAND_bytes");
  return sk;
}

inline Digest sha256(ByteView data) {
  Digest d{};
  unsigned len = 0;
  if (EVP_Digest(data.data(), data.size(), d.data(), &len, EVP_sha256(), nullptr) != 1) detail::fail("sha256");
  return d;
}

inline Digest hmac_sha256(ByteView key, ByteView data) {
  Digest d{};
  unsigned len = 0;
  if (!HMAC(EVP_sha256(), key.data(), static_cast<int>(key.size()), data.data(), data.size(),
            d.data(), &len))
    detail::fail("hmac");
  return d;
}

inline Bytes hkdf_sha256(ByteView ikm, ByteView salt, std::string_view info, std::size_t length) {
  detail::PkeyCtx ctx(EVP_PKEY_CTX_new_id(EVP_PKEY_HKDF, nullptr));
  Bytes out(length);
  std::size_t len = length;
  if (!ctx || EVP_PKEY_derive_init(ctx.get()) <= 0 ||
      EVP_PKEY_CTX_set_hkdf_md(ctx.get(), EVP_sha256()) <= 0 ||
      EVP_PKEY_CTX_set1_hkdf_salt(ctx.get(), salt.data(), static_cast<int>(salt.size())) <= 0 ||
      EVP_PKEY_CTX_set1_hkdf_key(ctx.get(), ikm.data(), static_cast<int>(ikm.size())) <= 0 ||
      EVP_PKEY_CTX_add1_hkdf_info(ctx.get(), reinterpret_cast<const unsigned char*>(info.data()),
                                  static_cast<int>(info.size())) <= 0 ||
      EVP_PKEY_derive(ctx.get(), out.data(), &len) <= 0)
    detail::fail("hkdf");
  return out;
}

// --- X25519 ---------------------------------------------------------------

inline PublicKey x25519_public(const SecretKey32& sk) { return detail::public_of(EVP_PKEY_X25519, sk); }

inline SecretKey32 x25519_shared(const SecretKey32& sk, const PublicKey& peer) {
  auto mine = detail::private_key(EVP_PKEY_X25519, sk);
  auto theirs = detail::public_key(EVP_PKEY_X25519, peer);
  detail::PkeyCtx ctx(EVP_PKEY_CTX_new(mine.get(), nullptr));
  SecretKey32 shared;
  std::size_t len = shared.size();
  if (!ctx || EVP_PKEY_derive_init(ctx.get()) <= 0 || EVP_PKEY_derive_set_peer(ctx.get(), theirs.get()) <= 0 ||
      EVP_PKEY_derive(ctx.get(), shared.data(), &len) <= 0 || len != shared.size())
    throw Error(ErrorCode::HandshakeFailed, "key agreement");  // e.g. low-order point
  return shared;
}

// --- Ed25519 --------------------------------------------------------------

inline PublicKey ed25519_public(const SecretKey32& sk) { return detail::public_of(EVP_PKEY_ED25519, sk); }

inline Signature ed25519_sign(const SecretKey32& sk, ByteView msg) {
  auto key = detail::private_key(EVP_PKEY_ED25519, sk);
  detail::MdCtx ctx(EVP_MD_CTX_new());
  Signature sig{};
  std::size_t len = sig.size();
  if (!ctx || EVP_DigestSignInit(ctx.get(), nullptr, nullptr, nullptr, key.get()) != 1 ||
      EVP_DigestSign(ctx.get(), sig.data(), &len, msg.data(), msg.size()) != 1)
    detail::fail("ed25519 sign");
  return sig;
}

inline bool ed25519_verify(const PublicKey& pk, ByteView msg, const Signature& sig) {
  auto key = detail::public_key(EVP_PKEY_ED25519, pk);
  detail::MdCtx ctx(EVP_MD_CTX_new());
  if (!ctx || EVP_DigestVerifyInit(ctx.get(), nullptr, nullptr, nullptr, key.get()) != 1) return false;
  return EVP_DigestVerify(ctx.get(), sig.data(), sig.size(), msg.data(), msg.size()) == 1;
}

}  // namespace khe::provision
