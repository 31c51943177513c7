#include "disfacerep/checkpoint.hpp"

#include <cstring>
#include <sstream>

#include "disfacerep/error.hpp"
#include "disfacerep/image_io.hpp"

namespace disfacerep {
namespace {

constexpr const char* kMagic = "DFRCKPT1";

template <typename S>
void append_raw(std::string& out, const ad::Matrix<double>& m) {
  for (double v : m.data) {
    const S s = static_cast<S>(v);
    char buf[sizeof(S)];
    std::memcpy(buf, &s, sizeof(S));
    out.append(buf, sizeof(S));
  }
}

}  // namespace

std::string serialize_checkpoint(const Checkpoint& ckpt) {
  if (ckpt.dtype != "float32" && ckpt.dtype != "float64") throw ValidationError("dtype", "must be float32 or float64");
  nlohmann::json header;
  header["meta"] = ckpt.meta;
  header["dtype"] = ckpt.dtype;
  nlohmann::json index = nlohmann::json::array();
  for (const auto& [name, m] : ckpt.tensors) index.push_back({name, m.rows, m.cols});
  header["tensors"] = index;
  std::string out = std::string(kMagic) + "\n" + header.dump() + "\n";
  for (const auto& [name, m] : ckpt.tensors) {
    if (ckpt.dtype == "float32") {
      append_raw<float>(out, m);
    } else {
      append_raw<double>(out, m);
    }
  }
  return out;
}

void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  // Write to a sibling file first so an interrupted save never truncates the
  // previous checkpoint.
  const std::string tmp = path + ".tmp";
  write_file(tmp, serialize_checkpoint(ckpt));
  if (std::rename(tmp.c_str(), path.c_str()) != 0) throw DataError("cannot move checkpoint into '" + path + "'");
}

Checkpoint load_checkpoint(const std::string& path) {
  const std::string bytes = read_file(path);
  const auto nl1 = bytes.find('\n');
  if (nl1 == std::string::npos || bytes.compare(0, nl1, kMagic) != 0) {
    throw DataError("'" + path + "' is not a checkpoint");
  }
  const auto nl2 = bytes.find('\n', nl1 + 1);
  if (nl2 == std::string::npos) throw DataError("'" + path + "': truncated header");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.substr(nl1 + 1, nl2 - nl1 - 1));
  } catch (const nlohmann::json::exception& e) {
    throw DataError("'" + path + "': bad header: " + e.what());
  }
  Checkpoint ckpt;
  ckpt.meta = header.value("meta", nlohmann::json::object());
  ckpt.dtype = header.value("dtype", "float32");
  const std::size_t width = ckpt.dtype == "float64" ? 8 : 4;
  std::size_t pos = nl2 + 1;
  for (const auto& t : header.at("tensors")) {
    const std::string name = t.at(0).get<std::string>();
    ad::Matrix<double> m(t.at(1).get<int>(), t.at(2).get<int>());
    if (pos + m.size() * width > bytes.size()) throw DataError("'" + path + "': truncated tensor " + name);
    for (double& v : m.data) {
      if (width == 8) {
        std::memcpy(&v, bytes.data() + pos, 8);
      } else {
        float f;
        std::memcpy(&f, bytes.data() + pos, 4);
        v = f;
      }
      pos += width;
    }
    ckpt.tensors.emplace(name, std::move(m));
  }
  if (pos != bytes.size()) throw DataError("'" + path + "': trailing bytes");
  return ckpt;
}

}  // namespace disfacerep
