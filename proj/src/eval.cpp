#include "disfacerep/eval.hpp"

#include <fmt/format.h>

#include <set>
#include <sstream>

#include <json.hpp>

#include "disfacerep/error.hpp"
#include "disfacerep/image_io.hpp"

namespace disfacerep {

F1Report f1_report(const std::vector<SegMask>& preds, const std::vector<SegMask>& gts, const ComponentSchema& schema,
                   bool exclude_absent) {
  if (preds.size() != gts.size()) throw DataError("prediction and ground-truth counts differ");
  const int k_count = schema.size();
  F1Report r;
  r.schema = schema.label();
  r.classes = schema.names();
  r.confusion.assign(k_count, {});
  for (std::size_t i = 0; i < preds.size(); ++i) {
    const SegMask& p = preds[i];
    const SegMask& g = gts[i];
    if (p.height != g.height || p.width != g.width) {
      throw ShapeError("sample " + std::to_string(i) + ": prediction and ground truth differ in shape");
    }
    for (std::size_t j = 0; j < p.labels.size(); ++j) {
      const int a = p.labels[j], b = g.labels[j];
      if (a > k_count || b > k_count) throw DataError("sample " + std::to_string(i) + ": label out of range");
      if (a == b) {
        if (a < k_count) ++r.confusion[a].tp;
      } else {
        if (a < k_count) ++r.confusion[a].fp;
        if (b < k_count) ++r.confusion[b].fn;
      }
    }
  }
  r.per_class.assign(k_count, 0.0);
  r.included.assign(k_count, false);
  double sum = 0;
  int n = 0;
  for (int k = 0; k < k_count; ++k) {
    const Confusion& c = r.confusion[k];
    const long denom = 2 * c.tp + c.fp + c.fn;
    if (denom > 0) r.per_class[k] = 2.0 * c.tp / denom;
    r.included[k] = denom > 0 || !exclude_absent;
    if (r.included[k]) {
      sum += r.per_class[k];
      ++n;
    }
  }
  r.mean_f1 = n > 0 ? sum / n : 0.0;
  return r;
}

std::string f1_report_json(const F1Report& r) {
  nlohmann::ordered_json j;
  j["schema"] = r.schema;
  j["mean_f1"] = r.mean_f1;
  nlohmann::ordered_json classes = nlohmann::ordered_json::array();
  for (std::size_t k = 0; k < r.classes.size(); ++k) {
    classes.push_back({{"name", r.classes[k]},
                       {"f1", r.per_class[k]},
                       {"included", static_cast<bool>(r.included[k])},
                       {"tp", r.confusion[k].tp},
                       {"fp", r.confusion[k].fp},
                       {"fn", r.confusion[k].fn}});
  }
  j["classes"] = classes;
  return j.dump(2) + "\n";
}

LabelRemap LabelRemap::load(const std::string& path) { return parse(read_file(path)); }

LabelRemap LabelRemap::parse(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  LabelRemap r;
  std::vector<std::pair<int, int>> pairs;  // published indices, -1 = DROP
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    std::istringstream ls(line);
    std::string a, b;
    if (!(ls >> a)) continue;
    if (!(ls >> b)) throw ConfigError("expected two columns", line_no);
    if (a.rfind("source=", 0) == 0 && b.rfind("target=", 0) == 0) {
      r.source = a.substr(7);
      r.target = b.substr(7);
      continue;
    }
    try {
      pairs.emplace_back(std::stoi(a), b == "DROP" ? -1 : std::stoi(b));
    } catch (const std::exception&) {
      throw ConfigError("expected '<index> <index|DROP>'", line_no);
    }
  }
  if (r.source.empty() || r.target.empty()) throw ConfigError("missing 'source=... target=...' header", 0);
  const ComponentSchema src = ComponentSchema::from_name_or_file(r.source);
  const ComponentSchema dst = ComponentSchema::from_name_or_file(r.target);
  r.mapping.assign(src.size(), -2);
  r.target_background = dst.background_id();
  std::set<int> used;
  for (auto [s, t] : pairs) {
    if (s == 0) {
      if (t != 0) throw ValidationError("remap", "background must map to background");
      continue;
    }
    if (s < 1 || s > src.size()) throw ValidationError("remap", "source index " + std::to_string(s) + " out of range");
    if (t == -1) {
      r.mapping[s - 1] = -1;
      continue;
    }
    if (t < 1 || t > dst.size()) throw ValidationError("remap", "target index " + std::to_string(t) + " out of range");
    if (src.name(s - 1) != dst.name(t - 1)) {
      throw ValidationError("remap", fmt::format("{} {} maps '{}' to '{}'", s, t, src.name(s - 1), dst.name(t - 1)));
    }
    if (!used.insert(t).second) throw ValidationError("remap", "target index " + std::to_string(t) + " used twice");
    r.mapping[s - 1] = t - 1;
  }
  for (int s = 0; s < src.size(); ++s) {
    if (r.mapping[s] == -2) throw ValidationError("remap", "source class '" + src.name(s) + "' has no entry");
  }
  return r;
}

LabelRemap LabelRemap::inverse() const {
  const ComponentSchema dst = ComponentSchema::from_name_or_file(target);
  const ComponentSchema src = ComponentSchema::from_name_or_file(source);
  LabelRemap inv;
  inv.source = target;
  inv.target = source;
  inv.mapping.assign(dst.size(), -1);
  inv.target_background = src.background_id();
  for (std::size_t s = 0; s < mapping.size(); ++s) {
    if (mapping[s] >= 0) inv.mapping[mapping[s]] = static_cast<int>(s);
  }
  return inv;
}

std::vector<SegMask> remap_masks(const std::vector<SegMask>& masks, const LabelRemap& remap) {
  const int src_bg = static_cast<int>(remap.mapping.size());
  std::vector<SegMask> out;
  out.reserve(masks.size());
  for (const SegMask& m : masks) {
    SegMask r(m.height, m.width, static_cast<std::uint8_t>(remap.target_background));
    for (std::size_t i = 0; i < m.labels.size(); ++i) {
      const int v = m.labels[i];
      if (v == src_bg) continue;
      if (v > src_bg) throw DataError("remap: pixel value " + std::to_string(v) + " has no mapping");
      const int t = remap.mapping[v];
      if (t >= 0) r.labels[i] = static_cast<std::uint8_t>(t);
    }
    out.push_back(std::move(r));
  }
  return out;
}

AblationTable ablation_table(const std::vector<std::pair<std::string, F1Report>>& runs,
                             const std::vector<std::string>& columns) {
  AblationTable t;
  if (runs.empty()) return t;
  const F1Report& first = runs.front().second;
  t.columns = columns.empty() ? first.classes : columns;
  std::vector<int> idx;
  for (const std::string& c : t.columns) {
    auto it = std::find(first.classes.begin(), first.classes.end(), c);
    if (it == first.classes.end()) throw ValidationError("columns", "unknown class '" + c + "'");
    idx.push_back(static_cast<int>(it - first.classes.begin()));
  }
  t.columns.push_back("mean");
  for (const auto& [name, report] : runs) {
    if (report.schema != first.schema || report.classes != first.classes) {
      throw ValidationError("runs", "run '" + name + "' uses a different schema");
    }
    std::vector<double> row;
    for (int k : idx) row.push_back(100.0 * report.per_class[k]);
    row.push_back(100.0 * report.mean_f1);
    t.rows.push_back(name);
    t.values.push_back(std::move(row));
  }
  return t;
}

std::string AblationTable::to_json() const {
  nlohmann::ordered_json j;
  j["columns"] = columns;
  nlohmann::ordered_json rows_json = nlohmann::ordered_json::array();
  for (std::size_t i = 0; i < rows.size(); ++i) rows_json.push_back({{"run", rows[i]}, {"values", values[i]}});
  j["rows"] = rows_json;
  return j.dump(2) + "\n";
}

std::string AblationTable::to_markdown() const {
  std::string out = "| run |";
  for (const auto& c : columns) out += " " + c + " |";
  out += "\n|---|";
  for (std::size_t i = 0; i < columns.size(); ++i) out += "---|";
  out += "\n";
  for (std::size_t i = 0; i < rows.size(); ++i) {
    out += "| " + rows[i] + " |";
    for (double v : values[i]) out += fmt::format(" {:.2f} |", v);
    out += "\n";
  }
  return out;
}

}  // namespace disfacerep
