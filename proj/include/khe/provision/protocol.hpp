#pragma once

// Provisioning wire protocol.
//
// Frame:      len (u32 BE, payload bytes) | type (u8) | payload
//
// Handshake (plaintext frames):
//   0x01 I->R  eph_i (32)                          X25519 public key
//   0x02 R->I  eph_r (32) | sig (64) | conf_r (32)
//   0x03 I->R  conf_i (32)
//
//   th1  = SHA256("khe-provision-v1" | frame1 bytes | eph_r)
//   sig  = Ed25519(device_secret, th1)
//   th2  = SHA256(th1 | sig)
//   okm  = HKDF-SHA256(ikm = X25519 shared, salt = th2, info = "khe-provision-v1 keys", 48)
//   session_key = okm[0..16), confirm_key = okm[16..48)
//   conf_r = HMAC-SHA256(confirm_key, "responder" | th2)
//   conf_i = HMAC-SHA256(confirm_key, "initiator" | th2)
//
// Sealed frames (after the handshake):
//   payload = seq (u64 BE) | AES-128-GCM ciphertext | tag (16)
//   nonce   = 00 00 00 00 | dir | low 7 bytes of seq (BE)
//   aad     = type byte
//   dir is 0x01 for initiator->responder, 0x02 for responder->initiator.
//   Each direction counts from 0; a seq not above the last accepted one is a replay.
//
//   0x10 Import  I->R  WrapRequest (48)
//   0x11 Handle  R->I  KeyHandle (64)
//   0x12 Error   R->I  code (u8) | UTF-8 message
//   0x13 Close   I->R  empty

#include <string_view>

#include "khe/aead.hpp"
#include "khe/provision/primitives.hpp"
#include "khe/provision/transport.hpp"

namespace khe::provision {

inline constexpr std::string_view kProtocolLabel = "khe-provision-v1";
inline constexpr std::size_t kMaxPayload = 1u << 16;

enum class MsgType : std::uint8_t {
  InitiatorHello = 0x01,
  ResponderHello = 0x02,
  InitiatorConfirm = 0x03,
  Import = 0x10,
  Handle = 0x11,
  Error = 0x12,
  Close = 0x13,
};

enum class Role : std::uint8_t { Initiator = 0x01, Responder = 0x02 };

struct Frame {
  MsgType type{};
  Bytes payload;
};

inline Bytes encode_frame(MsgType type, ByteView payload) {
  if (payload.size() > kMaxPayload) throw Error(ErrorCode::ProtocolViolation, "frame too large");
  Bytes out(5 + payload.size());
  store_be32(out.data(), static_cast<std::uint32_t>(payload.size()));
  out[4] = static_cast<std::uint8_t>(type);
  std::copy(payload.begin(), payload.end(), out.begin() + 5);
  return out;
}

/// Returns the exact bytes sent, for the transcript.
inline Bytes send_frame(Transport& t, MsgType type, ByteView payload) {
  Bytes wire = encode_frame(type, payload);
  t.send_all(wire);
  return wire;
}

inline Frame recv_frame(Transport& t, Bytes* raw = nullptr) {
  Bytes header = t.recv_exact(5);
  std::uint32_t len = load_be32(header.data());
  if (len > kMaxPayload) throw Error(ErrorCode::ProtocolViolation, "frame too large");
  Frame f{static_cast<MsgType>(header[4]), len ? t.recv_exact(len) : Bytes{}};
  if (raw) {
    *raw = header;
    raw->insert(raw->end(), f.payload.begin(), f.payload.end());
  }
  return f;
}

struct Session {
  AeadKey session_key;
  Digest transcript{};  // th2
  Role role = Role::Initiator;
};

namespace detail {

struct Keys {
  AeadKey session_key;
  SecretKey32 confirm_key;
};

inline Keys derive_keys(const SecretKey32& shared, const Digest& th2) {
  std::string info(kProtocolLabel);
  info += " keys";
  Bytes okm = hkdf_sha256(shared.view(), th2, info, 48);
  Keys k{AeadKey::from(ByteView(okm).subspan(0, 16)), SecretKey32::from(ByteView(okm).subspan(16, 32))};
  secure_wipe(okm);
  return k;
}

inline Digest confirm_mac(const SecretKey32& confirm_key, std::string_view who, const Digest& th2) {
  Bytes msg(who.begin(), who.end());
  msg.insert(msg.end(), th2.begin(), th2.end());
  return hmac_sha256(confirm_key.view(), msg);
}

inline Digest th1_of(ByteView frame1, const PublicKey& eph_r) {
  Bytes m(kProtocolLabel.begin(), kProtocolLabel.end());
  m.insert(m.end(), frame1.begin(), frame1.end());
  m.insert(m.end(), eph_r.begin(), eph_r.end());
  return sha256(m);
}

inline Digest th2_of(const Digest& th1, const Signature& sig) {
  return sha256(concat({ByteView(th1), ByteView(sig)}));
}

inline void expect(const Frame& f, MsgType type, std::size_t size) {
  if (f.type != type || f.payload.size() != size)
    throw Error(ErrorCode::ProtocolViolation, "unexpected handshake message");
}

template <std::size_t N>
std::array<std::uint8_t, N> take(ByteView v, std::size_t off) {
  std::array<std::uint8_t, N> out{};
  std::copy_n(v.begin() + static_cast<std::ptrdiff_t>(off), N, out.begin());
  return out;
}

}  // namespace detail

inline Session handshake_initiator(Transport& t, const PublicKey& verification_key) {
  SecretKey32 eph = random_secret();
  Bytes frame1 = send_frame(t, MsgType::InitiatorHello, x25519_public(eph));

  Frame f2 = recv_frame(t);
  detail::expect(f2, MsgType::ResponderHello, 128);
  auto eph_r = detail::take<32>(f2.payload, 0);
  auto sig = detail::take<64>(f2.payload, 32);
  auto conf_r = detail::take<32>(f2.payload, 96);

  Digest th1 = detail::th1_of(frame1, eph_r);
  if (!ed25519_verify(verification_key, th1, sig)) throw Error(ErrorCode::SignatureInvalid);
  Digest th2 = detail::th2_of(th1, sig);
  detail::Keys keys = detail::derive_keys(x25519_shared(eph, eph_r), th2);

  if (!khe::detail::constant_time_equal(detail::confirm_mac(keys.confirm_key, "responder", th2), conf_r))
    throw Error(ErrorCode::ProtocolViolation, "responder confirmation mismatch");
  send_frame(t, MsgType::InitiatorConfirm, detail::confirm_mac(keys.confirm_key, "initiator", th2));
  return Session{keys.session_key, th2, Role::Initiator};
}

inline Session handshake_responder(Transport& t, const SecretKey32& device_secret) {
  Bytes frame1;
  Frame f1 = recv_frame(t, &frame1);
  detail::expect(f1, MsgType::InitiatorHello, 32);
  auto eph_i = detail::take<32>(f1.payload, 0);

  SecretKey32 eph = random_secret();
  PublicKey eph_r = x25519_public(eph);
  Digest th1 = detail::th1_of(frame1, eph_r);
  Signature sig = ed25519_sign(device_secret, th1);
  Digest th2 = detail::th2_of(th1, sig);
  detail::Keys keys = detail::derive_keys(x25519_shared(eph, eph_i), th2);

  Bytes hello = concat({ByteView(eph_r), ByteView(sig)});
  Digest conf_r = detail::confirm_mac(keys.confirm_key, "responder", th2);
  hello.insert(hello.end(), conf_r.begin(), conf_r.end());
  send_frame(t, MsgType::ResponderHello, hello);

  Frame f3 = recv_frame(t);
  detail::expect(f3, MsgType::InitiatorConfirm, 32);
  if (!khe::detail::constant_time_equal(detail::confirm_mac(keys.confirm_key, "initiator", th2), f3.payload))
    throw Error(ErrorCode::ProtocolViolation, "initiator confirmation mismatch");
  return Session{keys.session_key, th2, Role::Responder};
}

/// Sealed frames over an established session.
class SecureChannel {
 public:
  static constexpr std::uint64_t kMaxSeq = (1ULL << 56) - 1;

  SecureChannel(Transport& t, Session s) : t_(t), s_(std::move(s)) {}

  void send(MsgType type, ByteView plaintext) {
    if (send_seq_ > kMaxSeq) throw Error(ErrorCode::ProtocolViolation, "sequence space exhausted");
    std::uint64_t seq = send_seq_++;
    std::uint8_t aad = static_cast<std::uint8_t>(type);
    Sealed sealed = seal(s_.session_key, nonce_for(s_.role, seq), ByteView(&aad, 1), plaintext);
    Bytes payload(8);
    store_be64(payload.data(), seq);
    payload.insert(payload.end(), sealed.ciphertext.begin(), sealed.ciphertext.end());
    payload.insert(payload.end(), sealed.tag.bytes.begin(), sealed.tag.bytes.end());
    send_frame(t_, type, payload);
  }

  /// Throws ReplayDetected for a sequence number at or below the last one
  /// accepted, SessionAuthFailed if the frame does not open.
  Frame recv() {
    Frame f = recv_frame(t_);
    if (f.payload.size() < 8 + 16) throw Error(ErrorCode::ProtocolViolation, "short sealed frame");
    std::uint64_t seq = load_be64(f.payload.data());
    if (seq > kMaxSeq) throw Error(ErrorCode::ProtocolViolation, "sequence out of range");
    if (seq < recv_next_) throw Error(ErrorCode::ReplayDetected);
    ByteView body(f.payload);
    std::uint8_t aad = static_cast<std::uint8_t>(f.type);
    Role peer = s_.role == Role::Initiator ? Role::Responder : Role::Initiator;
    auto pt = open(s_.session_key, nonce_for(peer, seq), ByteView(&aad, 1),
                   body.subspan(8, body.size() - 24), AuthTag::from(body.subspan(body.size() - 16)));
    if (!pt) throw Error(ErrorCode::SessionAuthFailed);
    recv_next_ = seq + 1;
    return Frame{f.type, std::move(*pt)};
  }

  const Session& session() const noexcept { return s_; }

 private:
  static Nonce96 nonce_for(Role sender, std::uint64_t seq) {
    Nonce96 n;
    n.bytes[4] = static_cast<std::uint8_t>(sender);
    std::uint8_t be[8];
    store_be64(be, seq);
    std::copy(be + 1, be + 8, n.bytes.begin() + 5);
    return n;
  }

  Transport& t_;
  Session s_;
  std::uint64_t send_seq_ = 0;
  std::uint64_t recv_next_ = 0;
};

}  // namespace khe::provision
