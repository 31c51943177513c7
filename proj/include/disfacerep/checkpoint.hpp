#pragma once

#include <map>
#include <string>

#include <json.hpp>

#include "disfacerep/autograd.hpp"

namespace disfacerep {

// Named tensors plus a JSON header. File layout: the line "DFRCKPT1", one
// line of JSON (metadata and the tensor index), then the raw little-endian
// tensor data in index order. Tensors are stored as float32 or float64 as
// given by the header's "dtype".
struct Checkpoint {
  nlohmann::json meta;
  std::map<std::string, ad::Matrix<double>> tensors;
  std::string dtype = "float32";
};

void save_checkpoint(const std::string& path, const Checkpoint& ckpt);
// Byte-exact serialization used by save_checkpoint.
std::string serialize_checkpoint(const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::string& path);

template <typename T>
void put_tensors(Checkpoint& ckpt, const std::string& prefix, const std::map<std::string, ad::Matrix<T>>& tensors) {
  for (const auto& [name, m] : tensors) ckpt.tensors[prefix + name] = ad::cast<double>(m);
}

template <typename T>
std::map<std::string, ad::Matrix<T>> take_tensors(const Checkpoint& ckpt, const std::string& prefix) {
  std::map<std::string, ad::Matrix<T>> out;
  for (const auto& [name, m] : ckpt.tensors) {
    if (name.rfind(prefix, 0) == 0) out[name.substr(prefix.size())] = ad::cast<T>(m);
  }
  return out;
}

}  // namespace disfacerep
