// khe: command-line front end for the key-handle engine.
//
// Exit codes: 0 ok, 2 usage, 3 file/environment problem, 60 decrypt tag
// mismatch, 70 demo check failed; any other nonzero code is the numeric
// khe::ErrorCode value.

#include <CLI11.hpp>

#include <iostream>

#include "cli_common.hpp"
#include "demos.hpp"
#include "khe/provision/provisioner.hpp"

using namespace khe;
using namespace khe::cli;

namespace {

struct ContextFlags {
  std::string priv = "u";
  std::uint64_t pid = 0;
  std::uint64_t pmp = 0;

  void add_to(CLI::App* cmd) {
    cmd->add_option("--ctx-priv", priv, "caller privilege: u, s or m")->check(CLI::IsMember({"u", "s", "m"}));
    cmd->add_option("--ctx-pid", pid, "caller process id");
    cmd->add_option("--ctx-pmp", pmp, "caller PMP/TEE id");
  }
  CallerContext get() const { return {parse_privilege(priv), pid, pmp}; }
};

struct PolicyFlags {
  bool enc = false, dec = false, self_bind = false, pmp_mode = false;
  std::string privs = "u,s,m";
  std::optional<std::uint64_t> bind_id;
  std::optional<unsigned> counter;

  void add_to(CLI::App* cmd) {
    cmd->add_flag("--enc", enc, "permit encryption");
    cmd->add_flag("--dec", dec, "permit decryption");
    cmd->add_option("--priv", privs, "permitted privileges, e.g. u,s,m");
    cmd->add_option("--bind-id", bind_id, "bind to this process (or PMP) id");
    cmd->add_flag("--self-bind", self_bind, "bind to the calling process");
    cmd->add_flag("--pmp-mode", pmp_mode, "binding id names a PMP/TEE region");
    cmd->add_option("--counter", counter, "usage limit")->check(CLI::Range(1u, 255u));
  }

  WrapRequest request(const AeadKey& key) const {
    WrapRequest r;
    r.user_key = key;
    std::uint8_t ops = (enc ? crypt_attr::kEncrypt : 0) | (dec ? crypt_attr::kDecrypt : 0);
    std::uint8_t features = 0;
    if (bind_id || self_bind) features |= feature::kBinding;
    if (self_bind) features |= feature::kSelfBind;
    if (pmp_mode) features |= feature::kPmpMode;
    if (counter) features |= feature::kCounter;
    r.policy = UsagePolicy{Algorithm::Aes128Gcm, ops, parse_privilege_list(privs), features};
    r.binding_id = self_bind ? 0 : bind_id.value_or(0);
    r.counter = static_cast<std::uint8_t>(counter.value_or(0));
    return r;
  }
};

void print_encrypt(const EncryptResult& r) {
  std::cout << "data=" << to_hex(r.data) << "\niv=" << to_hex(r.iv_used.view()) << "\ntag=" << to_hex(r.tag.view())
            << '\n';
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"khe: protected key handles in software"};
  app.require_subcommand(1);

  std::string state_path;
  ContextFlags ctx;
  PolicyFlags policy;
  std::string key_hex, handle_hex, data_hex, aad_hex, iv_hex, tag_hex, endpoint, identity_path, vk_hex;
  std::string handles_out, workdir;
  bool swap = false, force = false, pmp_mode = false;
  std::uint64_t binding_id = 0;
  unsigned sessions = 0;
  int cntr = 3;

  auto add_state = [&](CLI::App* cmd) { cmd->add_option("--state", state_path, "engine state file")->required(); };

  auto* init = app.add_subcommand("init", "create a new engine state file");
  add_state(init);
  init->add_flag("--swap", swap, "enable swapping cache entries to the untrusted region");
  init->add_flag("--force", force, "overwrite an existing state file");

  auto* wrap = app.add_subcommand("wrap", "wrap a 16-byte key into a handle");
  add_state(wrap);
  ctx.add_to(wrap);
  policy.add_to(wrap);
  wrap->add_option("--key", key_hex, "key (hex)")->required();

  auto* encrypt = app.add_subcommand("encrypt", "encrypt with a handle");
  add_state(encrypt);
  ctx.add_to(encrypt);
  encrypt->add_option("--handle", handle_hex, "handle (hex)")->required();
  encrypt->add_option("--data", data_hex, "plaintext (hex)")->required();
  encrypt->add_option("--aad", aad_hex, "associated data (hex)");
  encrypt->add_option("--iv", iv_hex, "12-byte IV (hex); omitted = fresh");

  auto* decrypt = app.add_subcommand("decrypt", "decrypt with a handle");
  add_state(decrypt);
  ctx.add_to(decrypt);
  decrypt->add_option("--handle", handle_hex, "handle (hex)")->required();
  decrypt->add_option("--data", data_hex, "ciphertext (hex)")->required();
  decrypt->add_option("--aad", aad_hex, "associated data (hex)");
  decrypt->add_option("--iv", iv_hex, "IV (hex)")->required();
  decrypt->add_option("--tag", tag_hex, "tag (hex)")->required();

  auto* revoke = app.add_subcommand("revoke", "revoke one handle");
  add_state(revoke);
  ctx.add_to(revoke);
  revoke->add_option("--handle", handle_hex, "handle (hex)")->required();

  auto* revoke_binding = app.add_subcommand("revoke-binding", "revoke every handle bound to an id");
  add_state(revoke_binding);
  ctx.add_to(revoke_binding);
  revoke_binding->add_option("--id", binding_id, "binding id")->required();
  revoke_binding->add_flag("--pmp-mode", pmp_mode, "the id is a PMP/TEE id");

  auto* identity = app.add_subcommand("identity", "provisioner device identity");
  identity->require_subcommand(1);
  auto* keygen = identity->add_subcommand("keygen", "create an identity file, print its verification key");
  keygen->add_option("--out", identity_path, "identity file to create")->required();
  keygen->add_flag("--force", force, "overwrite an existing identity");
  auto* show = identity->add_subcommand("show", "print the verification key");
  show->add_option("--identity", identity_path, "identity file")->required();

  auto* serve = app.add_subcommand("serve", "run the remote key provisioner");
  add_state(serve);
  serve->add_option("--identity", identity_path, "identity file")->required();
  serve->add_option("--endpoint", endpoint, "listen address host:port")->required();
  serve->add_option("--sessions", sessions, "stop after N sessions (0 = run forever)");
  serve->add_option("--handles-out", handles_out, "append delivered handles (hex lines) here instead of stdout");

  auto* import = app.add_subcommand("import", "send a key to a remote provisioner");
  import->add_option("--endpoint", endpoint, "provisioner address host:port")->required();
  import->add_option("--verification-key", vk_hex, "provisioner verification key (hex)")->required();
  import->add_option("--key", key_hex, "key (hex)")->required();
  policy.add_to(import);

  auto* demo_kv_cmd = app.add_subcommand("demo-kv", "key-value store scenario");
  demo_kv_cmd->add_option("--workdir", workdir, "where to put the database file");

  auto* demo_license_cmd = app.add_subcommand("demo-license", "feature license scenario");
  demo_license_cmd->add_option("--cntr", cntr, "activations granted")->check(CLI::Range(1, 255));

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int rc = app.exit(e);
    return rc == 0 ? kExitOk : kExitUsage;
  }

  StateFile state{state_path};
  try {
    if (init->parsed()) {
      if (std::filesystem::exists(state_path) && !force)
        throw IoFailure(state_path + " exists (use --force)");
      Engine engine = Engine::create({swap});
      std::filesystem::remove(swap_path(state_path));
      state.save(engine);
      std::cout << "initialized " << state_path << (swap ? " (swap on)" : "") << '\n';
    } else if (wrap->parsed()) {
      Engine engine = state.load();
      WrapRequest req = policy.request(fixed_from_hex<AeadKey>(key_hex, "key"));
      secure_wipe(key_hex.data(), key_hex.size());
      HandleBytes h = engine.wrapkey(req, ctx.get());
      state.save(engine);
      std::cout << to_hex(h) << '\n';
    } else if (encrypt->parsed()) {
      Engine engine = state.load();
      CryptoRequest req{Operation::Encrypt, from_hex(data_hex), from_hex(aad_hex), std::nullopt, std::nullopt};
      if (!iv_hex.empty()) req.iv_data = fixed_from_hex<Nonce96>(iv_hex, "iv");
      // Persist even when denied: state may have moved (swap-in).
      std::optional<EncryptResult> r;
      try {
        r = engine.encrypt(handle_from_hex(handle_hex), req, ctx.get());
      } catch (...) {
        state.save(engine);
        throw;
      }
      state.save(engine);
      print_encrypt(*r);
    } else if (decrypt->parsed()) {
      Engine engine = state.load();
      CryptoRequest req{Operation::Decrypt, from_hex(data_hex), from_hex(aad_hex),
                        fixed_from_hex<Nonce96>(iv_hex, "iv"), fixed_from_hex<AuthTag>(tag_hex, "tag")};
      std::optional<DecryptResult> r;
      try {
        r = engine.decrypt(handle_from_hex(handle_hex), req, ctx.get());
      } catch (...) {
        state.save(engine);
        throw;
      }
      state.save(engine);
      if (!r->valid) {
        std::cerr << "decrypt: tag mismatch\n";
        return kExitTagInvalid;
      }
      std::cout << to_hex(r->data) << '\n';
    } else if (revoke->parsed()) {
      Engine engine = state.load();
      engine.revoke(handle_from_hex(handle_hex), ctx.get());
      state.save(engine);
      std::cout << "revoked\n";
    } else if (revoke_binding->parsed()) {
      Engine engine = state.load();
      std::size_t n = engine.revoke_all_by_binding(binding_id, pmp_mode, ctx.get());
      state.save(engine);
      std::cout << "revoked " << n << '\n';
    } else if (keygen->parsed()) {
      if (std::filesystem::exists(identity_path) && !force)
        throw IoFailure(identity_path + " exists (use --force)");
      auto id = provision::ProvisionerIdentity::generate();
      std::string hex = to_hex(id.device_secret.view()) + "\n";
      write_file(identity_path, ByteView(reinterpret_cast<const std::uint8_t*>(hex.data()), hex.size()), true);
      secure_wipe(hex.data(), hex.size());
      std::cout << to_hex(id.verification_key()) << '\n';
    } else if (show->parsed()) {
      Bytes text = read_file(identity_path);
      std::string hex(text.begin(), text.end());
      secure_wipe(text);
      while (!hex.empty() && std::isspace(static_cast<unsigned char>(hex.back()))) hex.pop_back();
      provision::ProvisionerIdentity id{fixed_from_hex<provision::SecretKey32>(hex, "identity")};
      secure_wipe(hex.data(), hex.size());
      std::cout << to_hex(id.verification_key()) << '\n';
    } else if (serve->parsed()) {
      Bytes text = read_file(identity_path);
      std::string hex(text.begin(), text.end());
      secure_wipe(text);
      while (!hex.empty() && std::isspace(static_cast<unsigned char>(hex.back()))) hex.pop_back();
      provision::ProvisionerIdentity id{fixed_from_hex<provision::SecretKey32>(hex, "identity")};
      secure_wipe(hex.data(), hex.size());

      EngineFrontDoor door(state.load());
      std::optional<std::ofstream> sink;
      if (!handles_out.empty()) sink.emplace(handles_out, std::ios::app);
      std::ostream& handles = sink ? *sink : std::cout;
      provision::ProvisionerServer server(std::move(id), door, [&](const HandleBytes& h, const UsagePolicy&) {
        handles << to_hex(h) << std::endl;
      });
      provision::TcpListener listener(provision::Endpoint::parse(endpoint));
      std::cerr << "listening on port " << listener.port() << std::endl;
      for (unsigned n = 0; sessions == 0 || n < sessions; ++n) {
        auto report = server.serve_one(listener);
        door.with([&](Engine& e) { state.save(e); });
        std::cerr << "session: " << report.imports << " imported, " << report.rejected << " refused"
                  << (report.error ? ", ended with " + std::string(to_string(*report.error)) : std::string())
                  << std::endl;
      }
    } else if (import->parsed()) {
      WrapRequest req = policy.request(fixed_from_hex<AeadKey>(key_hex, "key"));
      HandleBytes h = provision::client_import(provision::Endpoint::parse(endpoint),
                                               provision::parse_verification_key(vk_hex), req);
      secure_wipe(req.user_key.data(), req.user_key.size());
      std::cout << to_hex(h) << '\n';
    } else if (demo_kv_cmd->parsed()) {
      demo_kv(std::cout, workdir);
    } else if (demo_license_cmd->parsed()) {
      demo_license(std::cout, cntr);
    }
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return static_cast<int>(e.code());
  } catch (const DemoFailure& e) {
    std::cerr << "demo check failed: " << e.what() << '\n';
    return kExitDemoFailed;
  } catch (const IoFailure& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitIo;
  } catch (const std::filesystem::filesystem_error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitIo;
  }
  return kExitOk;
}
