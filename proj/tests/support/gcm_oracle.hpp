#pragma once

// Independent AES-128-GCM used only as a test oracle (OpenSSL EVP).

#include <cstdint>
#include <optional>
#include <stdexcept>
#include <vector>

#include <openssl/evp.h>

namespace khe::testing {

struct OracleSealed {
  std::vector<std::uint8_t> ciphertext;
  std::vector<std::uint8_t> tag;
};

inline OracleSealed oracle_seal(const std::vector<std::uint8_t>& key,
                                const std::vector<std::uint8_t>& iv,
                                const std::vector<std::uint8_t>& aad,
                                const std::vector<std::uint8_t>& pt) {
  EVP_CIPHER_CTX* ctx = EVP_CIPHER_CTX_new();
  OracleSealed out;
  out.ciphertext.resize(pt.size());
  out.tag.resize(16);
  int len = 0;
  bool ok = EVP_EncryptInit_ex(ctx, EVP_aes_128_gcm(), nullptr, nullptr, nullptr) == 1 &&
            EVP_CIPHER_CTX_ctrl(ctx, EVP_CTRL_GCM_SET_IVLEN, static_cast<int>(iv.size()), nullptr) == 1 &&
            EVP_EncryptInit_ex(ctx, nullptr, nullptr, key.data(), iv.data()) == 1 &&
            (aad.empty() || EVP_EncryptUpdate(ctx, nullptr, &len, aad.data(), static_cast<int>(aad.size())) == 1) &&
            (pt.empty() || EVP_EncryptUpdate(ctx, out.ciphertext.data(), &len, pt.data(), static_cast<int>(pt.size())) == 1) &&
            EVP_EncryptFinal_ex(ctx, out.ciphertext.data() + pt.size(), &len) == 1 &&
            EVP_CIPHER_CTX_ctrl(ctx, EVP_CTRL_GCM_GET_TAG, 16, out.tag.data()) == 1;
  EVP_CIPHER_CTX_free(ctx);
  if (!ok) throw std::runtime_error("oracle seal failed");
  return out;
}

inline std::optional<std::vector<std::uint8_t>> oracle_open(const std::vector<std::uint8_t>& key,
                                                            const std::vector<std::uint8_t>& iv,
                                                            const std::vector<std::uint8_t>& aad,
                                                            const std::vector<std::uint8_t>& ct,
                                                            std::vector<std::uint8_t> tag) {
  EVP_CIPHER_CTX* ctx = EVP_CIPHER_CTX_new();
  std::vector<std::uint8_t> pt(ct.size());
  int len = 0;
  bool ok = EVP_DecryptInit_ex(ctx, EVP_aes_128_gcm(), nullptr, nullptr, nullptr) == 1 &&
            EVP_CIPHER_CTX_ctrl(ctx, EVP_CTRL_GCM_SET_IVLEN, static_cast<int>(iv.size()), nullptr) == 1 &&
            EVP_DecryptInit_ex(ctx, nullptr, nullptr, key.data(), iv.data()) == 1 &&
            (aad.empty() || EVP_DecryptUpdate(ctx, nullptr, &len, aad.data(), static_cast<int>(aad.size())) == 1) &&
            (ct.empty() || EVP_DecryptUpdate(ctx, pt.data(), &len, ct.data(), static_cast<int>(ct.size())) == 1) &&
            EVP_CIPHER_CTX_ctrl(ctx, EVP_CTRL_GCM_SET_TAG, 16, tag.data()) == 1 &&
            EVP_DecryptFinal_ex(ctx, pt.data() + ct.size(), &len) == 1;
  EVP_CIPHER_CTX_free(ctx);
  if (!ok) return std::nullopt;
  return pt;
}

}  // namespace khe::testing
