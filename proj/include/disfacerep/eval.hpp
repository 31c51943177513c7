#pragma once

#include <string>
#include <utility>
#include <vector>

#include "disfacerep/image.hpp"
#include "disfacerep/schema.hpp"

namespace disfacerep {

struct Confusion {
  long tp = 0, fp = 0, fn = 0;
};

struct F1Report {
  std::string schema;
  std::vector<std::string> classes;
  std::vector<double> per_class;    // 0 for classes without support
  std::vector<bool> included;       // counted in mean_f1
  std::vector<Confusion> confusion;
  double mean_f1 = 0;
};

// Pixel counts pooled over all samples, F1_k = 2TP / (2TP + FP + FN), mean over
// non-background classes. Classes with TP + FP + FN = 0 are left out of the
// mean unless exclude_absent is false, in which case they score 0.
F1Report f1_report(const std::vector<SegMask>& preds, const std::vector<SegMask>& gts, const ComponentSchema& schema,
                   bool exclude_absent = true);

std::string f1_report_json(const F1Report& report);

// Maps class indices between schemas. Table files use the published label
// convention (0 = background, v = component v-1):
//   # comment
//   source=<schema> target=<schema>
//   <source index> <target index | DROP>
// Every mapped pair must name the same component in both schemas.
struct LabelRemap {
  std::string source, target;
  // target[s] for source component s: target component index, or -1 to drop.
  std::vector<int> mapping;
  int target_background = 0;

  static LabelRemap load(const std::string& path);
  static LabelRemap parse(const std::string& text);
  LabelRemap inverse() const;
};

// Background and dropped classes become target background. Values above the
// source background are an error.
std::vector<SegMask> remap_masks(const std::vector<SegMask>& masks, const LabelRemap& remap);

// Rows = runs, columns = selected classes plus mean F1 (percent).
struct AblationTable {
  std::vector<std::string> columns;
  std::vector<std::string> rows;
  std::vector<std::vector<double>> values;
  std::string to_json() const;
  std::string to_markdown() const;
};

AblationTable ablation_table(const std::vector<std::pair<std::string, F1Report>>& runs,
                             const std::vector<std::string>& columns = {});

}  // namespace disfacerep
