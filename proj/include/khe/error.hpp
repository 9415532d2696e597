#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace khe {

// Numeric values double as the CLI exit codes and the provisioner error-frame
// code byte, so they are a stable contract. Append only.
enum class ErrorCode : int {
  // aead-core
  AuthFailure = 10,
  EmptyLabel = 11,
  // iv-gen
  ZeroSeed = 12,
  // handle-codec
  BadLength = 13,
  InvariantViolation = 14,
  // hsc
  SetFull = 20,
  DuplicateTag = 21,
  Miss = 22,
  Exhausted = 23,
  RollbackDetected = 24,
  SwapDisabled = 25,
  // engine
  HandleCorrupt = 30,
  UnknownHandle = 31,
  Revoked = 32,
  PrivilegeDenied = 33,
  BindingDenied = 34,
  OperationDenied = 35,
  IvNotPermitted = 36,
  RevocationDenied = 37,
  BindingNotPermitted = 38,
  PolicyInvalid = 39,
  InvalidRequest = 40,
  // provisioner
  HandshakeFailed = 50,
  SignatureInvalid = 51,
  ProtocolViolation = 52,
  SessionAuthFailed = 53,
  ReplayDetected = 54,
  TransportError = 55,
};

constexpr std::string_view to_string(ErrorCode code) noexcept {
  switch (code) {
    case ErrorCode::AuthFailure: return "AuthFailure";
    case ErrorCode::EmptyLabel: return "EmptyLabel";
    case ErrorCode::ZeroSeed: return "ZeroSeed";
    case ErrorCode::BadLength: return "BadLength";
    case ErrorCode::InvariantViolation: return "InvariantViolation";
    case ErrorCode::SetFull: return "SetFull";
    case ErrorCode::DuplicateTag: return "DuplicateTag";
    case ErrorCode::Miss: return "Miss";
    case ErrorCode::Exhausted: return "Exhausted";
    case ErrorCode::RollbackDetected: return "RollbackDetected";
    case ErrorCode::SwapDisabled: return "SwapDisabled";
    case ErrorCode::HandleCorrupt: return "HandleCorrupt";
    case ErrorCode::UnknownHandle: return "UnknownHandle";
    case ErrorCode::Revoked: return "Revoked";
    case ErrorCode::PrivilegeDenied: return "PrivilegeDenied";
    case ErrorCode::BindingDenied: return "BindingDenied";
    case ErrorCode::OperationDenied: return "OperationDenied";
    case ErrorCode::IvNotPermitted: return "IvNotPermitted";
    case ErrorCode::RevocationDenied: return "RevocationDenied";
    case ErrorCode::BindingNotPermitted: return "BindingNotPermitted";
    case ErrorCode::PolicyInvalid: return "PolicyInvalid";
    case ErrorCode::InvalidRequest: return "InvalidRequest";
    case ErrorCode::HandshakeFailed: return "HandshakeFailed";
    case ErrorCode::SignatureInvalid: return "SignatureInvalid";
    case ErrorCode::ProtocolViolation: return "ProtocolViolation";
    case ErrorCode::SessionAuthFailed: return "SessionAuthFailed";
    case ErrorCode::ReplayDetected: return "ReplayDetected";
    case ErrorCode::TransportError: return "TransportError";
  }
  return "Unknown";
}

/// Every failure raised by the library. Messages never carry key material.
class Error : public std::runtime_error {
 public:
  explicit Error(ErrorCode code)
      : std::runtime_error(std::string(to_string(code))), code_(code) {}
  Error(ErrorCode code, const std::string& detail)
      : std::runtime_error(std::string(to_string(code)) + ": " + detail),
        code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

}  // namespace khe
