#include "disfacerep/schema.hpp"

#include <yaml-cpp/yaml.h>

#include <algorithm>
#include <cctype>
#include <filesystem>
#include <set>

#include "disfacerep/error.hpp"

namespace disfacerep {
namespace {

std::string normalize(std::string_view s) {
  std::size_t b = 0, e = s.size();
  while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
  while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
  std::string out(s.substr(b, e - b));
  for (char& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return out;
}

Laterality infer_laterality(const std::string& name) {
  if (name.rfind("l_", 0) == 0) return Laterality::kLeft;
  if (name.rfind("r_", 0) == 0) return Laterality::kRight;
  return Laterality::kCentral;
}

const std::vector<std::string>& candidate_maskable() {
  static const std::vector<std::string> kCandidates = {
      "nose", "l_eye", "r_eye", "l_brow", "r_brow", "l_ear", "r_ear", "mouth"};
  return kCandidates;
}

std::vector<std::string> maskable_subset(const std::vector<std::string>& names) {
  std::vector<std::string> out;
  for (const auto& c : candidate_maskable()) {
    if (std::find(names.begin(), names.end(), c) != names.end()) out.push_back(c);
  }
  return out;
}

}  // namespace

std::string_view to_string(Laterality l) {
  switch (l) {
    case Laterality::kLeft: return "left";
    case Laterality::kRight: return "right";
    case Laterality::kCentral: return "central";
  }
  return "central";
}

std::string default_phrase(std::string_view name) {
  static const std::map<std::string, std::string, std::less<>> kPhrases = {
      {"skin", "skin"},           {"nose", "nose"},
      {"eye_g", "eyeglass"},      {"l_eye", "left eye"},
      {"r_eye", "right eye"},     {"l_brow", "left eyebrow"},
      {"r_brow", "right eyebrow"}, {"l_ear", "left ear"},
      {"r_ear", "right ear"},     {"mouth", "mouth"},
      {"u_lip", "upper lip"},     {"l_lip", "lower lip"},
      {"hair", "hair"},           {"hat", "hat"},
      {"ear_r", "earring"},       {"neck_l", "necklace"},
      {"neck", "neck"},           {"cloth", "cloth"},
  };
  auto it = kPhrases.find(name);
  return it == kPhrases.end() ? std::string() : it->second;
}

ComponentSchema::ComponentSchema(std::vector<std::string> names,
                                 std::vector<std::string> maskable,
                                 std::map<std::string, std::string> phrases)
    : names_(std::move(names)) {
  if (names_.empty()) throw ValidationError("names", "schema has no components");
  if (names_.size() >= 255) throw ValidationError("names", "at most 254 components supported");
  std::set<std::string> seen;
  for (const auto& n : names_) {
    if (n.empty()) throw ValidationError("names", "empty component name");
    if (!seen.insert(n).second) throw ValidationError("names", "duplicate component '" + n + "'");
  }
  for (const auto& [key, _] : phrases) {
    if (!seen.count(key)) throw ValidationError("phrases", "unknown component '" + key + "'");
  }
  maskable_.assign(names_.size(), false);
  for (const auto& m : maskable) {
    auto idx = index_of(m);
    if (!idx) throw ValidationError("maskable", "'" + m + "' is not a schema component");
    maskable_[*idx] = true;
  }
  for (const auto& n : names_) {
    // "l_lip" is the lower lip when "u_lip" exists.
    const bool vertical = n.rfind("l_", 0) == 0 && index_of("u_" + n.substr(2));
    laterality_.push_back(vertical ? Laterality::kCentral : infer_laterality(n));
    auto it = phrases.find(n);
    phrases_.push_back(it != phrases.end() ? it->second : default_phrase(n));
  }
  for (int k = 0; k < size(); ++k) {
    if (laterality_[k] == Laterality::kCentral) continue;
    const std::string stem = names_[k].substr(2);
    const std::string mate = (laterality_[k] == Laterality::kLeft ? "r_" : "l_") + stem;
    if (!index_of(mate)) {
      throw ValidationError("names", "'" + names_[k] + "' has no mirrored partner '" + mate + "'");
    }
  }
}

ComponentSchema ComponentSchema::synthetic() {
  std::vector<std::string> names = {"skin",   "nose",   "l_eye", "r_eye", "l_brow",
                                    "r_brow", "l_ear",  "r_ear", "mouth"};
  ComponentSchema s(names, maskable_subset(names));
  s.set_label("synthetic");
  return s;
}

ComponentSchema ComponentSchema::celebamask19() {
  std::vector<std::string> names = {"skin",  "nose",  "eye_g", "l_eye", "r_eye",  "l_brow",
                                    "r_brow", "l_ear", "r_ear", "mouth", "u_lip", "l_lip",
                                    "hair",  "hat",   "ear_r", "neck_l", "neck",  "cloth"};
  ComponentSchema s(names, maskable_subset(names));
  s.set_label("celebamask19");
  return s;
}

ComponentSchema ComponentSchema::lapa11() {
  std::vector<std::string> names = {"skin",  "l_brow", "r_brow", "l_eye", "r_eye",
                                    "nose",  "u_lip",  "mouth",  "l_lip", "hair"};
  ComponentSchema s(names, maskable_subset(names), {{"mouth", "inner mouth"}});
  s.set_label("lapa11");
  return s;
}

ComponentSchema ComponentSchema::from_name_or_file(const std::string& name_or_path) {
  if (name_or_path == "synthetic") return synthetic();
  if (name_or_path == "celebamask19") return celebamask19();
  if (name_or_path == "lapa11" || name_or_path == "helen11") return lapa11();
  if (!std::filesystem::exists(name_or_path)) {
    throw ValidationError("schema", "unknown preset or missing file '" + name_or_path + "'");
  }
  YAML::Node root;
  try {
    root = YAML::LoadFile(name_or_path);
  } catch (const YAML::Exception& e) {
    throw ConfigError(e.msg, e.mark.line + 1);
  }
  if (!root["components"]) throw ValidationError("components", "schema file lacks components");
  auto names = root["components"].as<std::vector<std::string>>();
  std::vector<std::string> maskable =
      root["maskable"] ? root["maskable"].as<std::vector<std::string>>() : maskable_subset(names);
  std::map<std::string, std::string> phrases;
  if (root["phrases"]) phrases = root["phrases"].as<std::map<std::string, std::string>>();
  ComponentSchema s(names, maskable, phrases);
  s.set_label(root["name"] ? root["name"].as<std::string>()
                           : std::filesystem::path(name_or_path).stem().string());
  return s;
}

std::optional<int> ComponentSchema::index_of(std::string_view name) const {
  for (int k = 0; k < size(); ++k) {
    if (names_[k] == name) return k;
  }
  return std::nullopt;
}

std::vector<int> ComponentSchema::maskable_indices() const {
  std::vector<int> out;
  for (int k = 0; k < size(); ++k) {
    if (maskable_[k]) out.push_back(k);
  }
  return out;
}

const std::string& ComponentSchema::phrase(int k) const {
  const std::string& p = phrases_.at(k);
  if (p.empty()) throw ValidationError("phrases", "no prompt phrase for '" + names_.at(k) + "'");
  return p;
}

std::optional<int> ComponentSchema::resolve_phrase(std::string_view phrase) const {
  const std::string needle = normalize(phrase);
  for (int k = 0; k < size(); ++k) {
    if (normalize(names_[k]) == needle) return k;
    if (!phrases_[k].empty() && normalize(phrases_[k]) == needle) return k;
  }
  return std::nullopt;
}

bool ComponentSchema::operator==(const ComponentSchema& other) const {
  return names_ == other.names_ && maskable_ == other.maskable_ && phrases_ == other.phrases_;
}

}  // namespace disfacerep
