#pragma once

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <iterator>
#include <optional>
#include <string>

#include "khe/engine.hpp"

namespace khe::cli {

// Exit codes besides the ErrorCode values (10..55).
inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 2;
inline constexpr int kExitIo = 3;
inline constexpr int kExitTagInvalid = 60;
inline constexpr int kExitDemoFailed = 70;

/// Setup problems the engine never raises: bad files, missing secret.
struct IoFailure : std::runtime_error {
  using std::runtime_error::runtime_error;
};

inline Bytes read_file(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw IoFailure("cannot read " + p.string());
  return Bytes(std::istreambuf_iterator<char>(in), {});
}

/// Write to a sibling temp file, then rename over the target.
inline void write_file(const std::filesystem::path& p, ByteView data, bool private_mode = false) {
  auto tmp = p;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoFailure("cannot write " + tmp.string());
    out.write(reinterpret_cast<const char*>(data.data()), static_cast<std::streamsize>(data.size()));
    if (!out) throw IoFailure("write failed: " + tmp.string());
  }
  if (private_mode)
    std::filesystem::permissions(tmp, std::filesystem::perms::owner_read | std::filesystem::perms::owner_write);
  std::filesystem::rename(tmp, p);
}

inline std::string state_secret() {
  const char* s = std::getenv("KHE_STATE_SECRET");
  if (!s || !*s) throw IoFailure("KHE_STATE_SECRET is not set");
  return s;
}

inline std::filesystem::path swap_path(const std::filesystem::path& state) {
  auto p = state;
  p += ".swap";
  return p;
}

/// State file plus the untrusted swap-region file beside it.
struct StateFile {
  std::filesystem::path path;

  Engine load() const {
    Bytes blob = read_file(path);
    std::optional<Bytes> region;
    if (std::filesystem::exists(swap_path(path))) region = read_file(swap_path(path));
    return Engine::restore_state(blob, state_secret(),
                                 region ? std::optional<ByteView>(*region) : std::nullopt);
  }

  void save(Engine& engine) const {
    write_file(path, engine.persist_state(state_secret()), true);
    if (engine.swap_enabled()) write_file(swap_path(path), encode_region(engine.swap_region()));
  }
};

inline Privilege parse_privilege(const std::string& s) {
  if (s == "u") return Privilege::User;
  if (s == "s") return Privilege::Supervisor;
  if (s == "m") return Privilege::Machine;
  throw Error(ErrorCode::InvalidRequest, "privilege must be u, s or m");
}

/// "u,s,m" -> privilege bit set.
inline std::uint8_t parse_privilege_list(const std::string& list) {
  std::uint8_t bits = 0;
  std::size_t start = 0;
  while (start <= list.size()) {
    auto comma = list.find(',', start);
    std::string item = list.substr(start, comma == std::string::npos ? std::string::npos : comma - start);
    bits |= privilege_set::bit(parse_privilege(item));
    if (comma == std::string::npos) break;
    start = comma + 1;
  }
  return bits;
}

template <typename Fixed>
Fixed fixed_from_hex(const std::string& hex, const char* what) {
  const std::size_t n = Fixed{}.size();
  Bytes b = from_hex(hex);
  if (b.size() != n) {
    secure_wipe(b);
    throw Error(ErrorCode::BadLength, std::string(what) + " must be " + std::to_string(n) + " bytes");
  }
  auto out = Fixed::from(b);
  secure_wipe(b);
  return out;
}

inline HandleBytes handle_from_hex(const std::string& hex) {
  Bytes b = from_hex(hex);
  if (b.size() != kHandleSize) throw Error(ErrorCode::HandleCorrupt, "handle must be 64 bytes");
  HandleBytes h{};
  std::copy(b.begin(), b.end(), h.begin());
  return h;
}

}  // namespace khe::cli
