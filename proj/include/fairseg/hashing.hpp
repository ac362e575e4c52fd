#pragma once

#include <torch/torch.h>

#include <cstddef>
#include <string>
#include <utility>
#include <vector>

namespace fairseg {

class Sha256 {
 public:
  Sha256();
  ~Sha256();
  Sha256(const Sha256&) = delete;
  Sha256& operator=(const Sha256&) = delete;

  void update(const void* data, size_t n);
  void update(const std::string& s);
  // Finalizes; the object must not be updated afterwards.
  std::string hex_digest();

 private:
  void* ctx_;
};

std::string sha256_hex(const void* data, size_t n);
std::string sha256_hex(const std::string& s);

// Digest over (name, dtype, shape, raw bytes) of each tensor, in the given
// order. Tensors are moved to CPU and made contiguous before hashing.
std::string hash_named_tensors(const std::vector<std::pair<std::string, torch::Tensor>>& tensors);

// Parameters then buffers of a module, registration order, with a prefix so
// several modules can share one digest without colliding.
void collect_module_state(const torch::nn::Module& module, const std::string& prefix,
                          std::vector<std::pair<std::string, torch::Tensor>>& out);

std::string hash_module_state(const torch::nn::Module& module);

}  // namespace fairseg
