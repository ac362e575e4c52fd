#include "fairseg/hashing.hpp"

#include <openssl/evp.h>

#include <cstdint>
#include <stdexcept>

namespace fairseg {

Sha256::Sha256() {
  EVP_MD_CTX* ctx = EVP_MD_CTX_new();
  if (!ctx || EVP_DigestInit_ex(ctx, EVP_sha256(), nullptr) != 1) {
    EVP_MD_CTX_free(ctx);
    throw std::runtime_error("failed to initialize sha256 context");
  }
  ctx_ = ctx;
}

Sha256::~Sha256() { EVP_MD_CTX_free(static_cast<EVP_MD_CTX*>(ctx_)); }

void Sha256::update(const void* data, size_t n) {
  if (EVP_DigestUpdate(static_cast<EVP_MD_CTX*>(ctx_), data, n) != 1) {
    throw std::runtime_error("sha256 update failed");
  }
}

void Sha256::update(const std::string& s) { update(s.data(), s.size()); }

std::string Sha256::hex_digest() {
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_DigestFinal_ex(static_cast<EVP_MD_CTX*>(ctx_), md, &len) != 1) {
    throw std::runtime_error("sha256 finalize failed");
  }
  static const char* hex = "0123456789abcdef";
  std::string out;
  out.reserve(2 * len);
  for (unsigned int i = 0; i < len; ++i) {
    out.push_back(hex[md[i] >> 4]);
    out.push_back(hex[md[i] & 0xf]);
  }
  return out;
}

std::string sha256_hex(const void* data, size_t n) {
  Sha256 h;
  h.update(data, n);
  return h.hex_digest();
}

std::string sha256_hex(const std::string& s) { return sha256_hex(s.data(), s.size()); }

std::string hash_named_tensors(const std::vector<std::pair<std::string, torch::Tensor>>& tensors) {
  Sha256 h;
  for (const auto& [name, t] : tensors) {
    h.update(name);
    auto cpu = t.detach().to(torch::kCPU).contiguous();
    const auto dtype = static_cast<int64_t>(cpu.scalar_type());
    h.update(&dtype, sizeof(dtype));
    for (auto d : cpu.sizes()) {
      h.update(&d, sizeof(d));
    }
    h.update(cpu.data_ptr(), cpu.numel() * cpu.element_size());
  }
  return h.hex_digest();
}

void collect_module_state(const torch::nn::Module& module, const std::string& prefix,
                          std::vector<std::pair<std::string, torch::Tensor>>& out) {
  for (const auto& p : module.named_parameters(/*recurse=*/true)) {
    out.emplace_back(prefix + p.key(), p.value());
  }
  for (const auto& b : module.named_buffers(/*recurse=*/true)) {
    out.emplace_back(prefix + b.key(), b.value());
  }
}

std::string hash_module_state(const torch::nn::Module& module) {
  std::vector<std::pair<std::string, torch::Tensor>> state;
  collect_module_state(module, "", state);
  return hash_named_tensors(state);
}

}  // namespace fairseg
