#pragma once

// Remote key provisioner: a remote party holding the device verification key
// sends WrapRequests over a sealed channel; the provisioner turns each one
// into a handle and hands it to a local consumer. The plaintext key never
// reaches the consumer.

#include <functional>
#include <optional>
#include <string>

#include "khe/engine.hpp"
#include "khe/provision/protocol.hpp"

namespace khe::provision {

/// Stand-in for the attestation root: an Ed25519 device key.
struct ProvisionerIdentity {
  SecretKey32 device_secret;

  static ProvisionerIdentity generate() { return {random_secret()}; }
  PublicKey verification_key() const { return ed25519_public(device_secret); }
};

inline PublicKey parse_verification_key(std::string_view hex) {
  Bytes b = from_hex(hex);
  if (b.size() != 32) throw Error(ErrorCode::BadLength, "verification key must be 32 bytes");
  PublicKey pk{};
  std::copy(b.begin(), b.end(), pk.begin());
  return pk;
}

/// The context wrapkey runs under: supervisor, so remote policies may name
/// any binding ID.
inline constexpr CallerContext kProvisionerContext{Privilege::Supervisor, 0, 0};

struct SessionReport {
  std::size_t imports = 0;
  std::size_t rejected = 0;  // imports answered with an error frame
  std::optional<ErrorCode> error;
  std::string detail;
};

class ProvisionerServer {
 public:
  using Consumer = std::function<void(const HandleBytes&, const UsagePolicy&)>;

  ProvisionerServer(ProvisionerIdentity identity, EngineFrontDoor& engine, Consumer consumer = {})
      : identity_(std::move(identity)), engine_(engine), consumer_(std::move(consumer)) {}

  /// Runs one session to completion. Never throws for peer misbehaviour;
  /// the outcome is in the report.
  SessionReport serve_session(Transport& t) {
    SessionReport report;
    std::optional<SecureChannel> channel;
    try {
      channel.emplace(t, handshake_responder(t, identity_.device_secret));
    } catch (const Error& e) {
      report.error = ErrorCode::HandshakeFailed;
      report.detail = e.what();
      return report;
    }

    try {
      for (;;) {
        Frame f = channel->recv();
        if (f.type == MsgType::Close) break;
        if (f.type != MsgType::Import) throw Error(ErrorCode::ProtocolViolation, "expected import");
        handle_import(*channel, f.payload, report);
      }
    } catch (const Error& e) {
      report.error = e.code();
      report.detail = e.what();
      // Best effort: the peer may already be gone.
      try {
        send_error(*channel, e.code(), e.what());
      } catch (const Error&) {
      }
    }
    return report;
  }

  static constexpr std::chrono::seconds kIdleTimeout{30};

  SessionReport serve_one(TcpListener& listener) {
    TcpStream stream = listener.accept();
    stream.set_timeout(kIdleTimeout);
    return serve_session(stream);
  }

 private:
  void handle_import(SecureChannel& channel, Bytes& plaintext, SessionReport& report) {
    std::optional<WrapRequest> request;
    try {
      request = decode_wrap_request(plaintext);
    } catch (const Error& e) {
      secure_wipe(plaintext);
      ++report.rejected;
      send_error(channel, ErrorCode::PolicyInvalid, e.what());
      return;
    }
    secure_wipe(plaintext);

    UsagePolicy policy = request->policy;
    HandleBytes handle;
    try {
      handle = engine_.with([&](Engine& e) { return e.wrapkey(*request, kProvisionerContext); });
    } catch (const Error& e) {
      // wrapkey wiped the key already.
      ++report.rejected;
      send_error(channel, e.code(), e.what());
      return;
    }
    if (consumer_) consumer_(handle, policy);
    channel.send(MsgType::Handle, handle);
    ++report.imports;
  }

  static void send_error(SecureChannel& channel, ErrorCode code, std::string_view message) {
    Bytes payload{static_cast<std::uint8_t>(code)};
    payload.insert(payload.end(), message.begin(), message.end());
    channel.send(MsgType::Error, payload);
  }

  ProvisionerIdentity identity_;
  EngineFrontDoor& engine_;
  Consumer consumer_;
};

/// Initiator side. One session, any number of imports.
class ProvisionerClient {
 public:
  ProvisionerClient(Transport& t, const PublicKey& verification_key)
      : channel_(t, handshake_initiator(t, verification_key)) {}

  /// Throws the provisioner's error code if it refused the import.
  HandleBytes import(const WrapRequest& request) {
    WrapRequestBytes wire = encode_wrap_request(request);
    channel_.send(MsgType::Import, wire);
    secure_wipe(wire.data(), wire.size());

    Frame reply = channel_.recv();
    if (reply.type == MsgType::Error && !reply.payload.empty()) {
      std::string message(reply.payload.begin() + 1, reply.payload.end());
      throw Error(static_cast<ErrorCode>(reply.payload[0]), "provisioner: " + message);
    }
    if (reply.type != MsgType::Handle || reply.payload.size() != kHandleSize)
      throw Error(ErrorCode::ProtocolViolation, "expected handle");
    HandleBytes handle{};
    std::copy(reply.payload.begin(), reply.payload.end(), handle.begin());
    return handle;
  }

  void close() { channel_.send(MsgType::Close, {}); }

 private:
  SecureChannel channel_;
};

inline HandleBytes client_import(const Endpoint& endpoint, const PublicKey& verification_key,
                                 const WrapRequest& request) {
  TcpStream stream = TcpStream::connect(endpoint);
  ProvisionerClient client(stream, verification_key);
  HandleBytes handle = client.import(request);
  client.close();
  return handle;
}

}  // namespace khe::provision
