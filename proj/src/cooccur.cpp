#include "disfacerep/cooccur.hpp"

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include <json.hpp>

#include "disfacerep/error.hpp"

namespace disfacerep {

CooccurrenceReport compute_cooccurrence(const std::vector<Label>& labels) {
  if (labels.empty()) throw DataError("co-occurrence needs at least one label");
  const std::size_t k_count = labels.front().size();
  std::vector<long> count(k_count, 0);
  std::vector<std::vector<long>> both(k_count, std::vector<long>(k_count, 0));
  for (const Label& y : labels) {
    if (y.size() != k_count) throw DataError("labels have different lengths");
    for (std::size_t i = 0; i < k_count; ++i) {
      if (!y[i]) continue;
      ++count[i];
      for (std::size_t j = 0; j < k_count; ++j) both[i][j] += y[j] ? 1 : 0;
    }
  }
  CooccurrenceReport r;
  r.num_images = static_cast<int>(labels.size());
  r.frequency.resize(k_count);
  r.pair_matrix.assign(k_count, std::vector<double>(k_count, 0.0));
  for (std::size_t i = 0; i < k_count; ++i) {
    r.frequency[i] = static_cast<double>(count[i]) / labels.size();
    if (count[i] == 0) continue;
    for (std::size_t j = 0; j < k_count; ++j) r.pair_matrix[i][j] = static_cast<double>(both[i][j]) / count[i];
  }
  return r;
}

std::vector<int> select_dominant(const CooccurrenceReport& report, const ComponentSchema& schema, double threshold) {
  if (!(threshold > 0.0 && threshold <= 1.0)) throw ValidationError("dominance_threshold", "must lie in (0, 1]");
  if (static_cast<int>(report.frequency.size()) != schema.size()) {
    throw ShapeError("report and schema disagree on the component count");
  }
  std::vector<int> out;
  for (int k = 0; k < schema.size(); ++k) {
    if (schema.maskable(k) && report.frequency[k] >= threshold) out.push_back(k);
  }
  return out;
}

std::string report_json(const CooccurrenceReport& report, const ComponentSchema& schema) {
  nlohmann::ordered_json j;
  j["schema"] = schema.label();
  j["num_images"] = report.num_images;
  j["components"] = schema.names();
  j["frequency"] = report.frequency;
  j["pair_matrix"] = report.pair_matrix;
  std::vector<std::string> dominant;
  for (int k : report.dominant) dominant.push_back(schema.name(k));
  j["dominant"] = dominant;
  return j.dump(2) + "\n";
}

void write_frequency_chart(const CooccurrenceReport& report, const ComponentSchema& schema, const std::string& path) {
  const int k_count = schema.size();
  const int row = 24, label_w = 110, bar_w = 300, margin = 10;
  cv::Mat img(k_count * row + 2 * margin, label_w + bar_w + 70, CV_8UC3, cv::Scalar(255, 255, 255));
  for (int k = 0; k < k_count; ++k) {
    const int y = margin + k * row;
    const double f = report.frequency[k];
    cv::putText(img, schema.name(k), {margin, y + 16}, cv::FONT_HERSHEY_SIMPLEX, 0.45, {0, 0, 0}, 1, cv::LINE_8);
    cv::rectangle(img, {label_w, y + 4}, {label_w + static_cast<int>(f * bar_w), y + row - 4},
                  f >= 0.99 ? cv::Scalar(60, 60, 200) : cv::Scalar(200, 120, 60), cv::FILLED);
    char buf[16];
    std::snprintf(buf, sizeof buf, "%.1f%%", 100.0 * f);
    cv::putText(img, buf, {label_w + bar_w + 6, y + 16}, cv::FONT_HERSHEY_SIMPLEX, 0.4, {0, 0, 0}, 1, cv::LINE_8);
  }
  if (!cv::imwrite(path, img)) throw DataError("cannot write chart '" + path + "'");
}

}  // namespace disfacerep
