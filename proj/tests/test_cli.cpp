#include <gtest/gtest.h>

#include <sys/wait.h>

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <regex>
#include <string>
#include <thread>

#include "khe/error.hpp"

namespace fs = std::filesystem;

namespace {

struct Result {
  int rc = -1;
  std::string out;
};

Result run(const std::string& args) {
  std::string cmd = std::string(KHE_CLI_PATH) + " " + args + " 2>/dev/null";
  Result r;
  FILE* p = ::popen(cmd.c_str(), "r");
  if (!p) return r;
  char buf[4096];
  std::size_t n;
  while ((n = std::fread(buf, 1, sizeof buf, p)) > 0) r.out.append(buf, n);
  int status = ::pclose(p);
  r.rc = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

std::string trim(std::string s) {
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.pop_back();
  return s;
}

std::map<std::string, std::string> fields(const std::string& out) {
  std::map<std::string, std::string> m;
  std::regex line(R"((\w+)=([0-9a-f]*))");
  for (std::sregex_iterator it(out.begin(), out.end(), line), end; it != end; ++it) m[(*it)[1]] = (*it)[2];
  return m;
}

int code(khe::ErrorCode c) { return static_cast<int>(c); }

class Cli : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() / ("khe-cli-" + std::to_string(::getpid()) + "-" +
                                        ::testing::UnitTest::GetInstance()->current_test_info()->name());
    fs::remove_all(dir_);
    fs::create_directories(dir_);
    ::setenv("KHE_STATE_SECRET", "test-secret", 1);
    state_ = (dir_ / "state.bin").string();
  }
  void TearDown() override { fs::remove_all(dir_); }

  std::string st() const { return " --state " + state_; }

  fs::path dir_;
  std::string state_;
};

const std::string kKey = "00112233445566778899aabbccddeeff";

}  // namespace

TEST_F(Cli, WrapEncryptDecrypt) {
  ASSERT_EQ(run("init" + st()).rc, 0);
  auto w = run("wrap" + st() + " --key " + kKey + " --enc --dec --priv u,s,m");
  ASSERT_EQ(w.rc, 0);
  std::string handle = trim(w.out);
  EXPECT_EQ(handle.size(), 128u);
  EXPECT_EQ(handle.find(kKey), std::string::npos);

  auto e = run("encrypt" + st() + " --handle " + handle + " --data 68656c6c6f --aad 0102");
  ASSERT_EQ(e.rc, 0);
  auto f = fields(e.out);
  ASSERT_EQ(f["iv"].size(), 24u);
  ASSERT_EQ(f["tag"].size(), 32u);
  auto d = run("decrypt" + st() + " --handle " + handle + " --data " + f["data"] + " --aad 0102 --iv " + f["iv"] +
               " --tag " + f["tag"]);
  EXPECT_EQ(d.rc, 0);
  EXPECT_EQ(trim(d.out), "68656c6c6f");

  // Wrong aad: tag mismatch, nothing printed.
  auto bad = run("decrypt" + st() + " --handle " + handle + " --data " + f["data"] + " --iv " + f["iv"] + " --tag " +
                 f["tag"]);
  EXPECT_EQ(bad.rc, 60);
  EXPECT_TRUE(trim(bad.out).empty());

  // Caller-chosen IV is honoured on an enc+dec handle.
  auto fixed = run("encrypt" + st() + " --handle " + handle + " --data 00 --iv 000000000000000000000001");
  EXPECT_EQ(fields(fixed.out)["iv"], "000000000000000000000001");
}

TEST_F(Cli, BindingMatrix) {
  ASSERT_EQ(run("init" + st()).rc, 0);
  std::string h = trim(run("wrap" + st() + " --key " + kKey + " --enc --dec --self-bind --ctx-pid 42").out);
  ASSERT_EQ(h.size(), 128u);
  auto e = fields(run("encrypt" + st() + " --handle " + h + " --data 01 --ctx-pid 42").out);
  std::string dec = " --handle " + h + " --data " + e["data"] + " --iv " + e["iv"] + " --tag " + e["tag"];
  EXPECT_EQ(run("decrypt" + st() + dec + " --ctx-pid 42").rc, 0);
  EXPECT_EQ(run("decrypt" + st() + dec + " --ctx-pid 7").rc, code(khe::ErrorCode::BindingDenied));

  EXPECT_EQ(run("wrap" + st() + " --key " + kKey + " --enc --bind-id 5").rc,
            code(khe::ErrorCode::BindingNotPermitted));
  EXPECT_EQ(run("wrap" + st() + " --key " + kKey + " --enc --bind-id 5 --ctx-priv s").rc, 0);
}

TEST_F(Cli, PolicyErrors) {
  ASSERT_EQ(run("init" + st()).rc, 0);
  EXPECT_EQ(run("wrap" + st() + " --key " + kKey).rc, code(khe::ErrorCode::PolicyInvalid));
  EXPECT_EQ(run("wrap" + st() + " --key " + kKey + " --enc --priv s,x").rc, code(khe::ErrorCode::InvalidRequest));
  EXPECT_EQ(run("wrap" + st() + " --key 0011").rc, code(khe::ErrorCode::BadLength));
  std::string enc_only = trim(run("wrap" + st() + " --key " + kKey + " --enc").out);
  EXPECT_EQ(run("encrypt" + st() + " --handle " + enc_only + " --data 00 --iv 000000000000000000000001").rc,
            code(khe::ErrorCode::IvNotPermitted));
  EXPECT_EQ(run("decrypt" + st() + " --handle " + enc_only +
                " --data 00 --iv 000000000000000000000001 --tag 00000000000000000000000000000000")
                .rc,
            code(khe::ErrorCode::OperationDenied));
  std::string corrupt = enc_only;
  corrupt[0] = corrupt[0] == '0' ? '1' : '0';
  EXPECT_EQ(run("encrypt" + st() + " --handle " + corrupt + " --data 00").rc, code(khe::ErrorCode::HandleCorrupt));
}

TEST_F(Cli, CounterPersistsAcrossInvocations) {
  ASSERT_EQ(run("init" + st() + " --swap").rc, 0);
  EXPECT_TRUE(fs::exists(state_ + ".swap"));
  std::string h = trim(run("wrap" + st() + " --key " + kKey + " --enc --counter 2").out);
  EXPECT_EQ(run("encrypt" + st() + " --handle " + h + " --data 00").rc, 0);
  EXPECT_EQ(run("encrypt" + st() + " --handle " + h + " --data 00").rc, 0);
  EXPECT_EQ(run("encrypt" + st() + " --handle " + h + " --data 00").rc, code(khe::ErrorCode::Revoked));
}

TEST_F(Cli, Revocation) {
  ASSERT_EQ(run("init" + st()).rc, 0);
  std::string h = trim(run("wrap" + st() + " --key " + kKey + " --enc --priv s,m").out);
  EXPECT_EQ(run("revoke" + st() + " --handle " + h).rc, code(khe::ErrorCode::RevocationDenied));
  EXPECT_EQ(run("revoke" + st() + " --handle " + h + " --ctx-priv s").rc, 0);
  EXPECT_EQ(run("encrypt" + st() + " --handle " + h + " --data 00 --ctx-priv m").rc, code(khe::ErrorCode::Revoked));

  for (int i = 0; i < 2; ++i) run("wrap" + st() + " --key " + kKey + " --enc --bind-id 9 --ctx-priv s");
  EXPECT_EQ(run("revoke-binding" + st() + " --id 9").rc, code(khe::ErrorCode::RevocationDenied));
  auto r = run("revoke-binding" + st() + " --id 9 --ctx-priv s");
  EXPECT_EQ(r.rc, 0);
  EXPECT_EQ(trim(r.out), "revoked 2");
}

TEST_F(Cli, StateFileProtection) {
  ASSERT_EQ(run("init" + st()).rc, 0);
  EXPECT_EQ(run("init" + st()).rc, 3);  // exists
  std::string h = trim(run("wrap" + st() + " --key " + kKey + " --enc").out);
  ::setenv("KHE_STATE_SECRET", "other", 1);
  EXPECT_EQ(run("encrypt" + st() + " --handle " + h + " --data 00").rc, code(khe::ErrorCode::AuthFailure));
  ::unsetenv("KHE_STATE_SECRET");
  EXPECT_EQ(run("encrypt" + st() + " --handle " + h + " --data 00").rc, 3);
  ::setenv("KHE_STATE_SECRET", "test-secret", 1);

  // The state file never contains the wrapped key in the clear.
  std::ifstream in(state_, std::ios::binary);
  std::string blob((std::istreambuf_iterator<char>(in)), {});
  std::string raw;
  for (std::size_t i = 0; i < kKey.size(); i += 2) raw.push_back(static_cast<char>(std::stoi(kKey.substr(i, 2), nullptr, 16)));
  EXPECT_EQ(blob.find(raw), std::string::npos);
  EXPECT_EQ(blob.substr(0, 4), "KHE1");
}

TEST_F(Cli, Usage) {
  EXPECT_EQ(run("").rc, 2);
  EXPECT_EQ(run("frobnicate").rc, 2);
  EXPECT_EQ(run("wrap --key " + kKey).rc, 2);  // no --state
  EXPECT_EQ(run("--help").rc, 0);
}

TEST_F(Cli, ServeAndImport) {
  ASSERT_EQ(run("init" + st() + " --swap").rc, 0);
  std::string vk = trim(run("identity keygen --out " + (dir_ / "id.key").string()).out);
  ASSERT_EQ(vk.size(), 64u);
  EXPECT_EQ(trim(run("identity show --identity " + (dir_ / "id.key").string()).out), vk);

  auto log = dir_ / "serve.log";
  auto handles = dir_ / "handles.txt";
  std::string serve = std::string(KHE_CLI_PATH) + " serve" + st() + " --identity " + (dir_ / "id.key").string() +
          " --endpoint 127.0.0.1:0 --sessions 2 --handles-out " + handles.string() + " >/dev/null 2>" +
                      log.string() + " &";
  ASSERT_EQ(std::system(serve.c_str()), 0);

  std::string port;
  for (int i = 0; i < 100 && port.empty(); ++i) {
    std::this_thread::sleep_for(std::chrono::milliseconds(50));
    std::ifstream in(log);
    std::string text((std::istreambuf_iterator<char>(in)), {});
    std::smatch m;
    if (std::regex_search(text, m, std::regex(R"(listening on port (\d+))"))) port = m[1];
  }
  ASSERT_FALSE(port.empty());
  std::string ep = " --endpoint 127.0.0.1:" + port;

  auto imported = run("import" + ep + " --verification-key " + vk + " --key " + kKey + " --dec --counter 1");
  ASSERT_EQ(imported.rc, 0);
  std::string h = trim(imported.out);
  EXPECT_EQ(h.size(), 128u);

  std::string wrong_vk = vk;
  wrong_vk[0] = wrong_vk[0] == 'a' ? 'b' : 'a';
  EXPECT_EQ(run("import" + ep + " --verification-key " + wrong_vk + " --key " + kKey + " --dec").rc,
            code(khe::ErrorCode::SignatureInvalid));

  // Server persisted the engine after each session; wait for it to exit.
  for (int i = 0; i < 100; ++i) {
    std::ifstream in(log);
    std::string text((std::istreambuf_iterator<char>(in)), {});
    if (text.find("HandshakeFailed") != std::string::npos) break;
    std::this_thread::sleep_for(std::chrono::milliseconds(50));
  }
  std::ifstream hs(handles);
  std::string delivered;
  std::getline(hs, delivered);
  EXPECT_EQ(delivered, h);

  // The imported handle works locally: decrypt-only with one use.
  EXPECT_EQ(run("encrypt" + st() + " --handle " + h + " --data 00").rc, code(khe::ErrorCode::OperationDenied));
  EXPECT_EQ(run("decrypt" + st() + " --handle " + h +
                " --data 00 --iv 000000000000000000000001 --tag 00000000000000000000000000000000")
                .rc,
            60);
  EXPECT_EQ(run("decrypt" + st() + " --handle " + h +
                " --data 00 --iv 000000000000000000000001 --tag 00000000000000000000000000000000")
                .rc,
            code(khe::ErrorCode::Revoked));
}

TEST_F(Cli, DemoKv) {
  auto r = run("demo-kv --workdir " + (dir_ / "kv").string());
  EXPECT_EQ(r.rc, 0) << r.out;
  EXPECT_NE(r.out.find("demo-kv: all checks passed"), std::string::npos);
  EXPECT_TRUE(fs::exists(dir_ / "kv" / "kv.db"));
}

TEST_F(Cli, DemoLicense) {
  for (int cntr : {1, 3}) {
    auto r = run("demo-license --cntr " + std::to_string(cntr));
    EXPECT_EQ(r.rc, 0) << r.out;
    EXPECT_NE(r.out.find("activation " + std::to_string(cntr + 1) + " denied"), std::string::npos);
  }
}
