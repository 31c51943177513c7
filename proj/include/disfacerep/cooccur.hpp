#pragma once

#include <string>
#include <vector>

#include "disfacerep/image.hpp"
#include "disfacerep/schema.hpp"

namespace disfacerep {

struct CooccurrenceReport {
  int num_images = 0;
  std::vector<double> frequency;                 // K
  std::vector<std::vector<double>> pair_matrix;  // pair[i][j] = P(j present | i present)
  std::vector<int> dominant;                     // filled by select_dominant
};

// Throws DataError on empty input or ragged labels.
CooccurrenceReport compute_cooccurrence(const std::vector<Label>& labels);

// Components with frequency >= threshold that the schema marks maskable.
std::vector<int> select_dominant(const CooccurrenceReport& report, const ComponentSchema& schema, double threshold);

// JSON text with frequency, pair matrix and dominant components by name.
std::string report_json(const CooccurrenceReport& report, const ComponentSchema& schema);

// Horizontal bar chart of per-component frequency, written as PNG.
void write_frequency_chart(const CooccurrenceReport& report, const ComponentSchema& schema, const std::string& path);

}  // namespace disfacerep
