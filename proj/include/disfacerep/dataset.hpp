#pragma once

#include <string>
#include <utility>
#include <vector>

#include "disfacerep/image.hpp"
#include "disfacerep/rng.hpp"
#include "disfacerep/schema.hpp"

namespace disfacerep {

// Directory layout:
//   images/<id>.png|jpg
//   masks/<id>.png               indexed, 0 = background, v = component v-1
//   masks/<id>_<component>.png   binary 0/255, composed in schema order
//   labels.jsonl                 optional {"id": ..., "label": [0/1...]}
//   <split>.txt                  ids in the split, one per line
//   dataset.yaml                 optional "schema: <preset or file>"
struct SampleEntry {
  std::string id;
  std::string image_path;
  std::string mask_path;  // combined indexed mask, or empty
  std::vector<std::pair<int, std::string>> component_masks;
};

struct DatasetManifest {
  std::string root;
  std::string split;
  ComponentSchema schema;
  std::vector<SampleEntry> samples;
};

struct LoadReport {
  std::vector<std::pair<std::string, std::string>> errors;  // (id, message)
  std::vector<std::string> excluded;                        // no foreground
};

// Schema named by dataset.yaml, else the fallback.
ComponentSchema dataset_schema(const std::string& root, const std::string& fallback = "synthetic");

// Lists the split. When <split>.txt is missing every image is used. Throws
// DataError when the split is empty or a listed image is missing.
DatasetManifest scan_dataset(const std::string& root, const std::string& split, const ComponentSchema& schema);

// Loads and resizes every sample (bilinear images, nearest masks). Labels come
// from labels.jsonl when present, else from mask pixel presence. Unreadable
// samples are reported and skipped; samples without any present component
// are excluded with a warning.
std::vector<Sample> load_dataset(const DatasetManifest& manifest, int input_size, LoadReport& report,
                                 int workers = 1);

// Reference compositor for per-component binary masks.
SegMask compose_masks(const std::vector<std::pair<int, SegMask>>& binary, int num_components);

// Writes images, indexed masks (if with_masks), labels.jsonl, <split>.txt and
// dataset.yaml.
void write_dataset(const std::string& root, const std::vector<Sample>& samples, const ComponentSchema& schema,
                   const std::string& split, bool with_masks = true);

// Uniform sample of k items without replacement.
template <typename T>
std::vector<T> split_subset(const std::vector<T>& samples, std::size_t k, Rng& rng);

}  // namespace disfacerep
