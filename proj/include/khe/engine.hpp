#pragma once

// Software model of the key-handle CPU extension: wrapkey, encrypt, decrypt,
// revoke and revoke-by-binding, enforced against a caller context that stands
// in for the privilege-mode, SATP and PMP registers.
//
// Engine is not thread-safe. One Engine is one extension instance; concurrent
// callers go through EngineFrontDoor, which serializes whole instructions.

#include <cstdint>
#include <functional>
#include <mutex>
#include <optional>
#include <string_view>
#include <utility>

#include <openssl/evp.h>
#include <openssl/rand.h>

#include "khe/aead.hpp"
#include "khe/codec.hpp"
#include "khe/hsc.hpp"
#include "khe/lfsr.hpp"

namespace khe {

struct CallerContext {
  Privilege privilege = Privilege::User;
  std::uint64_t process_id = 0;
  std::uint64_t pmp_id = 0;
};

enum class Operation : std::uint8_t { Encrypt, Decrypt };

/// The encrypt/decrypt I/O descriptor.
struct CryptoRequest {
  Operation operation = Operation::Encrypt;
  Bytes data;
  Bytes aad;
  std::optional<Nonce96> iv_data;
  std::optional<AuthTag> tag;
};

struct EncryptResult {
  Bytes data;
  Nonce96 iv_used;
  AuthTag tag;
};

/// Deliberately has no tag member: decrypt never reveals a computed tag.
struct DecryptResult {
  Bytes data;  // zero-filled when !valid
  bool valid = false;
};

struct EngineOptions {
  bool swap = false;
};

inline constexpr std::string_view kStateMagic = "KHE1";
inline constexpr int kStateKdfIterations = 100000;
inline constexpr std::string_view kSwapKeyLabel = "swap";

class Engine {
 public:
  /// Fresh wrapping key and LFSR seed from the OS entropy source.
  static Engine create(EngineOptions options = {}) {
    AeadKey key;
    if (RAND_bytes(key.data(), static_cast<int>(key.size())) != 1)
      throw std::runtime_error("entropy source failure");
    return Engine(key, lfsr_init_from_entropy(), options);
  }

  /// Loads a caller-supplied wrapping key (the prototype's load-from-memory
  /// path). The LFSR is still seeded from entropy.
  static Engine with_key(const AeadKey& wrap_key, EngineOptions options = {}) {
    return Engine(wrap_key, lfsr_init_from_entropy(), options);
  }

#ifdef KHE_ENABLE_TEST_HOOKS
  void seed_iv_generator_for_testing(const LfsrState& seed) { lfsr_ = seed; }
  // Runs after the handle snapshot is taken and before any check.
  void set_snapshot_hook_for_testing(std::function<void()> hook) { snapshot_hook_ = std::move(hook); }
#endif

  bool swap_enabled() const noexcept { return hsc_.swap_enabled(); }

  /// Read access for inspection; the cache never holds key material.
  const HandleStateCache& cache() const noexcept { return hsc_; }

  /// The swap region is untrusted memory and therefore freely writable.
  SwapRegion& swap_region() noexcept { return hsc_.region(); }

  /// Wraps request.user_key into a handle. The plaintext key in `request` is
  /// wiped whether or not wrapping succeeds.
  HandleBytes wrapkey(WrapRequest& request, const CallerContext& ctx) {
    struct Wipe {
      WrapRequest& r;
      ~Wipe() { secure_wipe(r.user_key.data(), r.user_key.size()); }
    } wipe{request};

    PolicyBytes policy_bytes;
    try {
      validate(request);
      policy_bytes = encode_policy(request.policy);
    } catch (const Error& e) {
      throw Error(ErrorCode::PolicyInvalid, e.what());
    }
    const UsagePolicy& policy = request.policy;

    std::uint64_t binding_id = 0;
    BindingKind kind = BindingKind::None;
    if (policy.binding()) {
      kind = policy.pmp_mode() ? BindingKind::Pmp : BindingKind::Process;
      if (policy.self_bind()) {
        binding_id = ctx.process_id;
      } else if (ctx.privilege < Privilege::Supervisor) {
        throw Error(ErrorCode::BindingNotPermitted);
      } else {
        binding_id = request.binding_id;
      }
    }

    Nonce96 iv = draw_iv();
    hsc_.insert(iv, binding_id, policy.counter() ? request.counter : 0, kind);

    Sealed sealed = seal(wrap_key_, iv, policy_bytes, request.user_key.view());
    KeyHandle handle;
    handle.policy = policy;
    handle.iv_handle = iv;
    handle.tag = sealed.tag;
    std::copy(sealed.ciphertext.begin(), sealed.ciphertext.end(), handle.wrapped_key.begin());
    return encode_handle(handle);
  }

  EncryptResult encrypt(ByteView handle, const CryptoRequest& request, const CallerContext& ctx) {
    if (request.operation != Operation::Encrypt)
      throw Error(ErrorCode::InvalidRequest, "operation is not encrypt");
    Unwrapped u = unwrap_and_check(handle, ctx, Operation::Encrypt);

    Nonce96 iv;
    if (request.iv_data) {
      if (u.policy.encrypt_only()) throw Error(ErrorCode::IvNotPermitted);
      iv = *request.iv_data;
    } else {
      iv = draw_iv();
    }
    Sealed sealed = seal(u.user_key, iv, request.aad, request.data);
    consume_use(u);
    return EncryptResult{std::move(sealed.ciphertext), iv, sealed.tag};
  }

  DecryptResult decrypt(ByteView handle, const CryptoRequest& request, const CallerContext& ctx) {
    if (request.operation != Operation::Decrypt || !request.iv_data || !request.tag)
      throw Error(ErrorCode::InvalidRequest, "decrypt needs iv and tag");
    Unwrapped u = unwrap_and_check(handle, ctx, Operation::Decrypt);

    auto plaintext = open(u.user_key, *request.iv_data, request.aad, request.data, *request.tag);
    consume_use(u);
    if (!plaintext) return DecryptResult{Bytes(request.data.size(), 0), false};
    return DecryptResult{std::move(*plaintext), true};
  }

  /// Unbound: caller privilege >= the policy's lowest permitted level.
  /// Process-bound: the bound process, or privilege above that level.
  /// PMP-bound: the bound TEE, or machine mode only.
  void revoke(ByteView handle, const CallerContext& ctx) {
    Unwrapped u = authenticate(handle);
    if (!u.hsc.valid) throw Error(ErrorCode::Revoked);

    const Privilege min = u.policy.min_privilege();
    bool permitted = false;
    switch (u.hsc.binding) {
      case BindingKind::None:
        permitted = ctx.privilege >= min;
        break;
      case BindingKind::Process:
        permitted = ctx.process_id == u.hsc.entry.binding_id || ctx.privilege > min;
        break;
      case BindingKind::Pmp:
        permitted = ctx.pmp_id == u.hsc.entry.binding_id || ctx.privilege == Privilege::Machine;
        break;
    }
    if (!permitted) throw Error(ErrorCode::RevocationDenied);
    hsc_.invalidate(u.iv);
  }

  std::size_t revoke_all_by_binding(std::uint64_t binding_id, bool pmp_mode,
                                    const CallerContext& ctx) {
    Privilege needed = pmp_mode ? Privilege::Machine : Privilege::Supervisor;
    if (ctx.privilege < needed) throw Error(ErrorCode::RevocationDenied);
    return hsc_.revoke_by_binding(binding_id, pmp_mode);
  }

  /// Blob: "KHE1" | salt(16) | nonce(12) | tag(16) | sealed state.
  /// Key = PBKDF2-HMAC-SHA256(secret, salt). The swap region is not included;
  /// it is untrusted and stored by the caller (see swap_region()).
  Bytes persist_state(std::string_view secret) const {
    Bytes plain;
    plain.push_back(kStateFormatVersion);
    plain.insert(plain.end(), wrap_key_.bytes.begin(), wrap_key_.bytes.end());
    auto lfsr = lfsr_.to_bytes<12>();
    plain.insert(plain.end(), lfsr.begin(), lfsr.end());
    plain.push_back(hsc_.swap_enabled() ? 1 : 0);
    Bytes cache = hsc_.serialize();
    plain.insert(plain.end(), cache.begin(), cache.end());

    std::array<std::uint8_t, 16> salt{};
    Nonce96 nonce;
    if (RAND_bytes(salt.data(), 16) != 1 || RAND_bytes(nonce.data(), 12) != 1)
      throw std::runtime_error("entropy source failure");
    Bytes header(kStateMagic.begin(), kStateMagic.end());
    header.insert(header.end(), salt.begin(), salt.end());

    AeadKey key = state_key(secret, salt);
    Sealed sealed = seal(key, nonce, header, plain);
    secure_wipe(plain);

    Bytes blob = header;
    blob.insert(blob.end(), nonce.bytes.begin(), nonce.bytes.end());
    blob.insert(blob.end(), sealed.tag.bytes.begin(), sealed.tag.bytes.end());
    blob.insert(blob.end(), sealed.ciphertext.begin(), sealed.ciphertext.end());
    return blob;
  }

  /// Raises AuthFailure on a wrong secret or any modification of the blob.
  /// `swap_region` is the caller-stored region image, if swapping is on.
  static Engine restore_state(ByteView blob, std::string_view secret,
                              std::optional<ByteView> swap_region = std::nullopt) {
    constexpr std::size_t header_size = 4 + 16;
    if (blob.size() < header_size + 12 + 16 ||
        !std::equal(kStateMagic.begin(), kStateMagic.end(), blob.begin()))
      throw Error(ErrorCode::AuthFailure, "not an engine state file");
    std::array<std::uint8_t, 16> salt{};
    std::copy_n(blob.begin() + 4, 16, salt.begin());
    Nonce96 nonce = Nonce96::from(blob.subspan(header_size, 12));
    AuthTag tag = AuthTag::from(blob.subspan(header_size + 12, 16));

    AeadKey key = state_key(secret, salt);
    Bytes plain = open_or_throw(key, nonce, blob.subspan(0, header_size),
                                blob.subspan(header_size + 28), tag);

    constexpr std::size_t expected = 1 + 16 + 12 + 1 + HandleStateCache::kSerializedSize;
    if (plain.size() != expected || plain[0] != kStateFormatVersion) {
      secure_wipe(plain);
      throw Error(ErrorCode::AuthFailure, "unsupported state format");
    }
    AeadKey wrap_key = AeadKey::from(ByteView(plain).subspan(1, 16));
    Nonce96 lfsr_bytes = Nonce96::from(ByteView(plain).subspan(17, 12));
    EngineOptions options{plain[29] != 0};
    Engine engine(wrap_key, lfsr_init(lfsr_bytes), options);
    engine.hsc_.deserialize(ByteView(plain).subspan(30));
    secure_wipe(plain);
    if (swap_region && options.swap) engine.hsc_.region() = decode_region(*swap_region);
    return engine;
  }

 private:
  static constexpr std::uint8_t kStateFormatVersion = 1;

  struct Unwrapped {
    AeadKey user_key;
    UsagePolicy policy;
    Nonce96 iv;
    HscLookup hsc;
  };

  Engine(const AeadKey& wrap_key, const LfsrState& lfsr, EngineOptions options)
      : wrap_key_(wrap_key),
        lfsr_(lfsr),
        hsc_(options.swap ? std::optional<AeadKey>(derive_storage_key(wrap_key, kSwapKeyLabel))
                          : std::nullopt) {}

  static AeadKey state_key(std::string_view secret, const std::array<std::uint8_t, 16>& salt) {
    AeadKey key;
    if (PKCS5_PBKDF2_HMAC(secret.data(), static_cast<int>(secret.size()), salt.data(),
                          static_cast<int>(salt.size()), kStateKdfIterations, EVP_sha256(),
                          static_cast<int>(key.size()), key.data()) != 1)
      throw std::runtime_error("key derivation failure");
    return key;
  }

  Nonce96 draw_iv() {
    auto [iv, next] = next_iv(lfsr_);
    lfsr_ = next;
    return iv;
  }

  // Snapshot, unwrap, and locate the cache entry. Everything after this
  // point reads only the snapshot.
  Unwrapped authenticate(ByteView handle) {
    if (handle.size() != kHandleSize) throw Error(ErrorCode::HandleCorrupt, "handle length");
    HandleBytes snapshot{};
    std::copy(handle.begin(), handle.end(), snapshot.begin());
    if (snapshot_hook_) snapshot_hook_();

    KeyHandle decoded;
    try {
      decoded = decode_handle(snapshot);
    } catch (const Error&) {
      throw Error(ErrorCode::HandleCorrupt);
    }
    auto key = open(wrap_key_, decoded.iv_handle, ByteView(snapshot).subspan(0, kPolicySize),
                    decoded.wrapped_key, decoded.tag);
    if (!key) throw Error(ErrorCode::HandleCorrupt);

    Unwrapped u{AeadKey::from(*key), decoded.policy, decoded.iv_handle, {}};
    secure_wipe(*key);

    auto hit = hsc_.lookup(u.iv);
    if (!hit) throw Error(ErrorCode::UnknownHandle);
    u.hsc = *hit;
    return u;
  }

  Unwrapped unwrap_and_check(ByteView handle, const CallerContext& ctx, Operation op) {
    Unwrapped u = authenticate(handle);
    if (!u.hsc.valid) throw Error(ErrorCode::Revoked);
    if (!u.policy.permits(ctx.privilege)) throw Error(ErrorCode::PrivilegeDenied);
    if (u.policy.binding()) {
      std::uint64_t caller_id = u.policy.pmp_mode() ? ctx.pmp_id : ctx.process_id;
      if (caller_id != u.hsc.entry.binding_id) throw Error(ErrorCode::BindingDenied);
    }
    bool op_ok = op == Operation::Encrypt ? u.policy.permits_encrypt() : u.policy.permits_decrypt();
    if (!op_ok) throw Error(ErrorCode::OperationDenied);
    if (u.policy.counter() && u.hsc.entry.counter == 0) throw Error(ErrorCode::Exhausted);
    return u;
  }

  void consume_use(const Unwrapped& u) {
    if (u.policy.counter()) hsc_.decrement(u.iv);
  }

  AeadKey wrap_key_;
  LfsrState lfsr_;
  HandleStateCache hsc_;
  std::function<void()> snapshot_hook_;
};

/// Serializing front door: one instruction at a time per engine.
class EngineFrontDoor {
 public:
  explicit EngineFrontDoor(Engine engine) : engine_(std::move(engine)) {}

  template <typename F>
  decltype(auto) with(F&& f) {
    std::lock_guard lock(mutex_);
    return std::forward<F>(f)(engine_);
  }

 private:
  std::mutex mutex_;
  Engine engine_;
};

}  // namespace khe
