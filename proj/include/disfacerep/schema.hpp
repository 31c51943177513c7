#pragma once

#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace disfacerep {

enum class Laterality { kLeft, kRight, kCentral };

std::string_view to_string(Laterality l);

// Ordered set of facial components. Component k owns index k; the background
// takes index size(). Laterality follows the subject (l_eye is the subject's
// left eye) and is inferred from the "l_"/"r_" name prefix, except that
// "l_<x>" next to "u_<x>" is a lower/upper pair (l_lip) and stays central.
//
// On disk, dataset label images use the published convention where 0 is
// background and value v is component v-1.
class ComponentSchema {
 public:
  // Validates: unique non-empty names, every maskable name listed, lateral
  // components paired by stem, fewer than 255 components.
  ComponentSchema(std::vector<std::string> names, std::vector<std::string> maskable,
                  std::map<std::string, std::string> phrases = {});

  // The 9-part layout used by the synthetic corpus.
  static ComponentSchema synthetic();
  // CelebAMask-HQ's 18 components in published label order.
  static ComponentSchema celebamask19();
  // LaPa / Helen 10 components in published label order.
  static ComponentSchema lapa11();
  // Looks up one of the presets above by name ("synthetic", "celebamask19",
  // "lapa11"), or loads a YAML schema file.
  static ComponentSchema from_name_or_file(const std::string& name_or_path);

  int size() const { return static_cast<int>(names_.size()); }
  int background_id() const { return size(); }

  const std::string& name(int k) const { return names_.at(k); }
  const std::vector<std::string>& names() const { return names_; }
  std::optional<int> index_of(std::string_view name) const;

  Laterality laterality(int k) const { return laterality_.at(k); }
  bool maskable(int k) const { return maskable_.at(k); }
  std::vector<int> maskable_indices() const;

  // Natural-language phrase for prompts and detector queries. Throws
  // ValidationError when a component has no phrase.
  const std::string& phrase(int k) const;
  bool has_phrase(int k) const { return !phrases_.at(k).empty(); }
  // Maps a detector/user phrase or a raw component name back to an index.
  // Leading/trailing whitespace and case are ignored.
  std::optional<int> resolve_phrase(std::string_view phrase) const;

  // Stable identifier recorded in reports so runs can be compared.
  const std::string& label() const { return label_; }
  void set_label(std::string label) { label_ = std::move(label); }

  bool operator==(const ComponentSchema& other) const;

 private:
  std::vector<std::string> names_;
  std::vector<Laterality> laterality_;
  std::vector<bool> maskable_;
  std::vector<std::string> phrases_;
  std::string label_ = "custom";
};

// Default phrases for the component names used across presets.
std::string default_phrase(std::string_view name);

}  // namespace disfacerep
