#pragma once

// Scripted scenarios. Each one checks its own outcomes and finally scans
// everything it printed for the secret keys it handled.

#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>
#include <thread>

#include "cli_common.hpp"
#include "khe/provision/provisioner.hpp"

namespace khe::cli {

struct DemoFailure : std::runtime_error {
  using std::runtime_error::runtime_error;
};

class Narrator {
 public:
  explicit Narrator(std::ostream& out) : out_(out) {}

  void say(const std::string& line) {
    out_ << line << '\n';
    captured_ += line;
    captured_ += '\n';
  }

  void check(bool ok, const std::string& what) {
    if (!ok) throw DemoFailure(what);
    say("  ok: " + what);
  }

  template <typename F>
  void expect_error(ErrorCode expected, const std::string& what, F&& f) {
    std::optional<ErrorCode> got;
    try {
      f();
    } catch (const Error& e) {
      got = e.code();
    }
    if (got != expected)
      throw DemoFailure(what + ": expected " + std::string(to_string(expected)) + ", got " +
                        (got ? std::string(to_string(*got)) : "success"));
    say("  ok: " + what + " -> " + std::string(to_string(expected)));
  }

  /// The secret must not appear in the output, as hex in either case.
  void check_absent(ByteView secret, const std::string& name) {
    std::string lower = to_hex(secret), upper = lower;
    for (auto& c : upper) c = static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
    bool leaked = captured_.find(lower) != std::string::npos || captured_.find(upper) != std::string::npos;
    check(!leaked, name + " absent from output");
  }

 private:
  std::ostream& out_;
  std::string captured_;
};

inline AeadKey random_key() {
  AeadKey k;
  if (RAND_bytes(k.data(), static_cast<int>(k.size())) != 1) throw std::runtime_error("entropy source failure");
  return k;
}

inline std::filesystem::path fresh_workdir(const char* prefix) {
  std::random_device rd;
  auto dir = std::filesystem::temp_directory_path() / (std::string(prefix) + std::to_string(rd()));
  std::filesystem::create_directories(dir);
  return dir;
}

// --- key-value store --------------------------------------------------------

inline void demo_kv(std::ostream& out, std::filesystem::path workdir) {
  Narrator n(out);
  if (workdir.empty()) workdir = fresh_workdir("khe-demo-kv-");
  std::filesystem::create_directories(workdir);
  const auto db_path = workdir / "kv.db";

  const AeadKey wrap_key = random_key();
  Engine engine = Engine::with_key(wrap_key, {true});
  const CallerContext web{Privilege::User, 1001, 0};
  const CallerContext intruder{Privilege::User, 2002, 0};

  n.say("== key-value store, process-bound storage key ==");
  const AeadKey storage_key = random_key();
  WrapRequest req;
  req.user_key = storage_key;
  req.policy = UsagePolicy{Algorithm::Aes128Gcm, crypt_attr::kMask, privilege_set::kUser,
                           feature::kBinding | feature::kSelfBind};
  HandleBytes handle = engine.wrapkey(req, web);
  n.say("web service (pid 1001) wrapped its storage key; handle " + to_hex(handle));
  n.check(req.user_key == AeadKey{}, "plaintext key wiped from the request");

  const std::vector<std::pair<std::string, std::string>> records = {
      {"user:alice", "balance=100"}, {"user:bob", "balance=42"}, {"config:mode", "strict"}};

  // put: value sealed with the record key as aad
  {
    std::ofstream db(db_path, std::ios::trunc);
    for (const auto& [key, value] : records) {
      Bytes aad(key.begin(), key.end());
      auto r = engine.encrypt(handle, {Operation::Encrypt, Bytes(value.begin(), value.end()), aad, {}, {}}, web);
      db << to_hex(aad) << ' ' << to_hex(r.iv_used.view()) << ' ' << to_hex(r.tag.view()) << ' '
         << to_hex(r.data) << '\n';
      n.say("put " + key);
    }
  }
  n.say("database file: " + db_path.string());

  struct Row {
    Bytes aad;
    Nonce96 iv;
    AuthTag tag;
    Bytes data;
  };
  auto load = [&] {
    std::vector<Row> rows;
    std::ifstream db(db_path);
    std::string aad, iv, tag, data;
    while (db >> aad >> iv >> tag >> data)
      rows.push_back({from_hex(aad), fixed_from_hex<Nonce96>(iv, "iv"), fixed_from_hex<AuthTag>(tag, "tag"),
                      from_hex(data)});
    return rows;
  };
  auto get = [&](const Row& row, const CallerContext& ctx, ByteView aad) {
    return engine.decrypt(handle, {Operation::Decrypt, row.data, Bytes(aad.begin(), aad.end()), row.iv, row.tag},
                          ctx);
  };

  auto rows = load();
  n.check(rows.size() == records.size(), "all records stored");
  for (std::size_t i = 0; i < rows.size(); ++i) {
    auto r = get(rows[i], web, rows[i].aad);
    n.check(r.valid && std::string(r.data.begin(), r.data.end()) == records[i].second,
            "get " + records[i].first + " round-trips");
  }

  n.say("-- another process reads the same database --");
  n.expect_error(ErrorCode::BindingDenied, "pid 2002 decrypt", [&] { get(rows[0], intruder, rows[0].aad); });
  n.expect_error(ErrorCode::BindingDenied, "pid 2002 encrypt", [&] {
    engine.encrypt(handle, {Operation::Encrypt, Bytes{1}, {}, {}, {}}, intruder);
  });

  n.say("-- records moved or modified on disk --");
  auto swapped = get(rows[0], web, rows[1].aad);
  n.check(!swapped.valid, "value presented under another key is rejected");
  {
    auto tampered = rows[1];
    tampered.data[0] ^= 0x01;
    auto r = get(tampered, web, tampered.aad);
    n.check(!r.valid && r.data == Bytes(r.data.size(), 0), "modified ciphertext rejected, no plaintext released");
  }

  n.check_absent(storage_key.view(), "storage key");
  n.check_absent(wrap_key.view(), "wrapping key");
  n.say("demo-kv: all checks passed");
}

// --- feature licensing ------------------------------------------------------

inline AeadKey derive_feature_key(const provision::SecretKey32& master, const std::string& feature_name) {
  Bytes okm = provision::hkdf_sha256(master.view(), {}, "feature:" + feature_name, 16);
  AeadKey k = AeadKey::from(okm);
  secure_wipe(okm);
  return k;
}

inline void demo_license(std::ostream& out, int cntr) {
  if (cntr < 1 || cntr > 255) throw Error(ErrorCode::InvalidRequest, "cntr must be 1..255");
  Narrator n(out);
  const std::string feature_name = "heated-seats";
  n.say("== feature license with " + std::to_string(cntr) + " activations ==");

  // Gateway device: engine plus provisioner.
  const AeadKey wrap_key = random_key();
  EngineFrontDoor gateway(Engine::with_key(wrap_key, {true}));
  auto identity = provision::ProvisionerIdentity::generate();
  const auto verification_key = identity.verification_key();
  std::optional<HandleBytes> delivered;
  provision::ProvisionerServer server(identity, gateway,
                                      [&](const HandleBytes& h, const UsagePolicy&) { delivered = h; });

  // Vendor: feature key derived from its master key.
  const provision::SecretKey32 master = provision::random_secret();
  const AeadKey feature_key = derive_feature_key(master, feature_name);

  HandleBytes license{};
  {
    provision::TcpListener listener(provision::Endpoint{"127.0.0.1", 0});
    provision::SessionReport report;
    std::thread device([&] { report = server.serve_one(listener); });
    provision::Endpoint ep{"127.0.0.1", listener.port()};
    n.say("gateway provisioner listening on " + ep.to_string());

    WrapRequest lic;
    lic.user_key = feature_key;
    lic.policy = UsagePolicy{Algorithm::Aes128Gcm, crypt_attr::kEncrypt, privilege_set::kAll, feature::kCounter};
    lic.counter = static_cast<std::uint8_t>(cntr);
    try {
      license = provision::client_import(ep, verification_key, lic);
    } catch (...) {
      secure_wipe(lic.user_key.data(), lic.user_key.size());
      device.join();
      throw;
    }
    secure_wipe(lic.user_key.data(), lic.user_key.size());
    device.join();
    n.check(!report.error && report.imports == 1, "vendor imported the license over the sealed channel");
  }
  n.check(delivered && *delivered == license, "gateway received the counter-limited handle");
  n.say("vendor connection closed; the rest runs offline");

  // Motor unit: knows the feature key out of band, verifies with plain AEAD.
  const AeadKey motor_key = derive_feature_key(master, feature_name);
  const CallerContext gw{Privilege::User, 500, 0};
  std::mt19937_64 nonce_rng(std::random_device{}());
  auto issue_nonce = [&] {
    Bytes nonce(8);
    std::uint64_t v = nonce_rng();
    store_be64(nonce.data(), v);
    return nonce;
  };
  auto request_aad = [&](ByteView nonce) {
    Bytes aad(feature_name.begin(), feature_name.end());
    aad.insert(aad.end(), nonce.begin(), nonce.end());
    return aad;
  };
  auto motor_accepts = [&](ByteView aad, const EncryptResult& req) {
    return open(motor_key, req.iv_used, aad, req.data, req.tag).has_value();
  };

  n.expect_error(ErrorCode::IvNotPermitted, "gateway choosing its own IV", [&] {
    gateway.with([&](Engine& e) {
      return e.encrypt(license, {Operation::Encrypt, {}, request_aad(issue_nonce()), Nonce96{}, {}}, gw);
    });
  });

  std::optional<std::pair<Bytes, EncryptResult>> first;
  for (int i = 1; i <= cntr + 1; ++i) {
    Bytes nonce = issue_nonce();
    Bytes aad = request_aad(nonce);
    EncryptResult req;
    try {
      req = gateway.with([&](Engine& e) { return e.encrypt(license, {Operation::Encrypt, {}, aad, {}, {}}, gw); });
    } catch (const Error& e) {
      bool spent = e.code() == ErrorCode::Revoked || e.code() == ErrorCode::Exhausted;
      n.check(i == cntr + 1 && spent, "activation " + std::to_string(i) + " denied by the gateway (" +
                                          std::string(to_string(e.code())) + ")");
      continue;
    }
    n.check(i <= cntr, "activation " + std::to_string(i) + " signed by the gateway");
    n.check(motor_accepts(aad, req), "motor unit accepted activation " + std::to_string(i));
    if (!first) first.emplace(aad, req);
  }

  auto forged = first->second;
  forged.tag.bytes[0] ^= 0x80;
  n.check(!motor_accepts(first->first, forged), "tampered request rejected by the motor unit");
  n.check(!motor_accepts(request_aad(issue_nonce()), first->second),
          "old request replayed against a fresh nonce rejected");
  n.expect_error(ErrorCode::Revoked, "spent license after the last activation", [&] {
    gateway.with([&](Engine& e) { return e.encrypt(license, {Operation::Encrypt, {}, {}, {}, {}}, gw); });
  });

  n.check_absent(master.view(), "vendor master key");
  n.check_absent(feature_key.view(), "feature key");
  n.check_absent(wrap_key.view(), "wrapping key");
  n.say("demo-license: all checks passed");
}

}  // namespace khe::cli
