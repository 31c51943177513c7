#include "disfacerep/dataset.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>
#include <spdlog/spdlog.h>
#include <yaml-cpp/yaml.h>

#include "disfacerep/error.hpp"
#include "disfacerep/image_io.hpp"
#include "disfacerep/parallel.hpp"

namespace fs = std::filesystem;

namespace disfacerep {

ComponentSchema dataset_schema(const std::string& root, const std::string& fallback) {
  const fs::path meta = fs::path(root) / "dataset.yaml";
  if (!fs::exists(meta)) return ComponentSchema::from_name_or_file(fallback);
  try {
    YAML::Node n = YAML::LoadFile(meta.string());
    if (!n["schema"]) return ComponentSchema::from_name_or_file(fallback);
    std::string s = n["schema"].as<std::string>();
    const fs::path rel = fs::path(root) / s;
    return ComponentSchema::from_name_or_file(fs::exists(rel) ? rel.string() : s);
  } catch (const YAML::Exception& e) {
    throw ConfigError(meta.string() + ": " + e.msg, e.mark.line + 1);
  }
}

DatasetManifest scan_dataset(const std::string& root, const std::string& split, const ComponentSchema& schema) {
  const fs::path r(root);
  if (!fs::is_directory(r / "images")) throw DataError("'" + root + "' has no images/ directory");
  std::map<std::string, std::string> images;
  for (const auto& e : fs::directory_iterator(r / "images")) {
    const std::string ext = e.path().extension().string();
    if (ext == ".png" || ext == ".jpg" || ext == ".jpeg") images[e.path().stem().string()] = e.path().string();
  }
  std::vector<std::string> ids;
  const fs::path split_file = r / (split + ".txt");
  if (fs::exists(split_file)) {
    std::istringstream in(read_file(split_file.string()));
    std::string line;
    while (std::getline(in, line)) {
      line.erase(line.find_last_not_of(" \t\r") + 1);
      if (!line.empty()) ids.push_back(line);
    }
  } else {
    for (const auto& [id, _] : images) ids.push_back(id);
  }
  if (ids.empty()) throw DataError("split '" + split + "' of '" + root + "' is empty");
  DatasetManifest m{root, split, schema, {}};
  for (const std::string& id : ids) {
    auto it = images.find(id);
    if (it == images.end()) throw DataError("image for '" + id + "' is missing under " + (r / "images").string());
    SampleEntry e{id, it->second, {}, {}};
    const fs::path combined = r / "masks" / (id + ".png");
    if (fs::exists(combined)) {
      e.mask_path = combined.string();
    } else {
      for (int k = 0; k < schema.size(); ++k) {
        const fs::path p = r / "masks" / (id + "_" + schema.name(k) + ".png");
        if (fs::exists(p)) e.component_masks.emplace_back(k, p.string());
      }
    }
    m.samples.push_back(std::move(e));
  }
  return m;
}

SegMask compose_masks(const std::vector<std::pair<int, SegMask>>& binary, int num_components) {
  if (binary.empty()) throw DataError("no component masks to compose");
  SegMask out(binary.front().second.height, binary.front().second.width, static_cast<std::uint8_t>(num_components));
  std::vector<std::pair<int, const SegMask*>> ordered;
  for (const auto& [k, m] : binary) ordered.emplace_back(k, &m);
  std::stable_sort(ordered.begin(), ordered.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
  for (const auto& [k, m] : ordered) {
    if (m->height != out.height || m->width != out.width) throw DataError("component masks differ in size");
    for (std::size_t i = 0; i < out.labels.size(); ++i) {
      if (m->labels[i] >= 128) out.labels[i] = static_cast<std::uint8_t>(k);
    }
  }
  return out;
}

namespace {

std::map<std::string, Label> read_labels(const fs::path& path, int k_count) {
  std::map<std::string, Label> out;
  if (!fs::exists(path)) return out;
  std::istringstream in(read_file(path.string()));
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      auto j = nlohmann::json::parse(line);
      Label y = j.at("label").get<Label>();
      if (static_cast<int>(y.size()) != k_count) throw DataError("label length differs from the schema");
      out[j.at("id").get<std::string>()] = std::move(y);
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(path.string() + ": " + e.what(), line_no);
    }
  }
  return out;
}

}  // namespace

std::vector<Sample> load_dataset(const DatasetManifest& manifest, int input_size, LoadReport& report, int workers) {
  const int k_count = manifest.schema.size();
  const auto labels = read_labels(fs::path(manifest.root) / "labels.jsonl", k_count);
  const int n = static_cast<int>(manifest.samples.size());
  std::vector<Sample> loaded(n);
  std::vector<std::string> errors(n);
  parallel_for(n, workers, [&](int i) {
    const SampleEntry& e = manifest.samples[i];
    try {
      Sample s;
      s.face.id = e.id;
      s.face.pixels = resize_image(read_image(e.image_path), input_size, input_size);
      if (!e.mask_path.empty()) {
        SegMask raw = read_mask(e.mask_path);
        // Published convention on disk: 0 = background, v = component v-1.
        for (auto& v : raw.labels) {
          if (v > k_count) throw DataError("mask value " + std::to_string(v) + " exceeds the schema");
          v = v == 0 ? static_cast<std::uint8_t>(k_count) : static_cast<std::uint8_t>(v - 1);
        }
        s.mask = resize_mask(raw, input_size, input_size);
      } else if (!e.component_masks.empty()) {
        std::vector<std::pair<int, SegMask>> parts;
        for (const auto& [k, path] : e.component_masks) parts.emplace_back(k, read_mask(path));
        s.mask = resize_mask(compose_masks(parts, k_count), input_size, input_size);
      }
      if (auto it = labels.find(e.id); it != labels.end()) {
        s.face.label = it->second;
      } else if (!s.mask.labels.empty()) {
        s.face.label = label_from_mask(s.mask, k_count);
      } else {
        throw DataError("no mask and no label entry");
      }
      loaded[i] = std::move(s);
    } catch (const Error& ex) {
      errors[i] = ex.what();
    }
  });
  std::vector<Sample> out;
  for (int i = 0; i < n; ++i) {
    if (!errors[i].empty()) {
      report.errors.emplace_back(manifest.samples[i].id, errors[i]);
      continue;
    }
    if (count_present(loaded[i].face.label) == 0) {
      spdlog::warn("{}: no foreground component, excluded", loaded[i].face.id);
      report.excluded.push_back(loaded[i].face.id);
      continue;
    }
    out.push_back(std::move(loaded[i]));
  }
  return out;
}

void write_dataset(const std::string& root, const std::vector<Sample>& samples, const ComponentSchema& schema,
                   const std::string& split, bool with_masks) {
  const fs::path r(root);
  fs::create_directories(r / "images");
  if (with_masks) fs::create_directories(r / "masks");
  std::ostringstream ids, labels;
  for (const Sample& s : samples) {
    write_png((r / "images" / (s.face.id + ".png")).string(), s.face.pixels);
    if (with_masks) {
      SegMask disk = s.mask;
      for (auto& v : disk.labels) v = v == schema.background_id() ? 0 : static_cast<std::uint8_t>(v + 1);
      write_mask((r / "masks" / (s.face.id + ".png")).string(), disk);
    }
    ids << s.face.id << '\n';
    nlohmann::json j = {{"id", s.face.id}, {"label", s.face.label}};
    labels << j.dump() << '\n';
  }
  write_file((r / (split + ".txt")).string(), ids.str());
  write_file((r / "labels.jsonl").string(), labels.str());
  write_file((r / "dataset.yaml").string(), "schema: " + schema.label() + "\n");
}

template <typename T>
std::vector<T> split_subset(const std::vector<T>& samples, std::size_t k, Rng& rng) {
  if (k > samples.size()) throw ValidationError("k", "exceeds the number of samples");
  std::vector<std::size_t> idx(samples.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  for (std::size_t i = 0; i < k; ++i) std::swap(idx[i], idx[i + rng.uniform_int(idx.size() - i)]);
  std::vector<T> out;
  out.reserve(k);
  for (std::size_t i = 0; i < k; ++i) out.push_back(samples[idx[i]]);
  return out;
}

template std::vector<Sample> split_subset<Sample>(const std::vector<Sample>&, std::size_t, Rng&);
template std::vector<LabeledFace> split_subset<LabeledFace>(const std::vector<LabeledFace>&, std::size_t, Rng&);
template std::vector<std::string> split_subset<std::string>(const std::vector<std::string>&, std::size_t, Rng&);
template std::vector<int> split_subset<int>(const std::vector<int>&, std::size_t, Rng&);

}  // namespace disfacerep
