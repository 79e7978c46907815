#pragma once

#include <array>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "ciqi/error.hpp"
#include "ciqi/text.hpp"

namespace ciqi {

using json = nlohmann::json;

enum class AttributeKind { Dynasty, Reign, Kiln, Color, Motif, Shape, Naming, Consistency };

// The six connoisseurship attributes, in standardized-name order.
inline constexpr std::array<AttributeKind, 6> kSixAttributes = {
    AttributeKind::Dynasty, AttributeKind::Reign, AttributeKind::Kiln,
    AttributeKind::Color,   AttributeKind::Motif, AttributeKind::Shape};

// Multiple-choice dimensions, in benchmark table order.
inline constexpr std::array<AttributeKind, 7> kMultipleChoiceAttributes = {
    AttributeKind::Dynasty, AttributeKind::Reign, AttributeKind::Kiln,  AttributeKind::Color,
    AttributeKind::Motif,   AttributeKind::Shape, AttributeKind::Naming};

inline std::string_view to_string(AttributeKind kind) {
  switch (kind) {
    case AttributeKind::Dynasty: return "dynasty";
    case AttributeKind::Reign: return "reign";
    case AttributeKind::Kiln: return "kiln";
    case AttributeKind::Color: return "color";
    case AttributeKind::Motif: return "motif";
    case AttributeKind::Shape: return "shape";
    case AttributeKind::Naming: return "naming";
    case AttributeKind::Consistency: return "consistency";
  }
  return "unknown";
}

inline std::optional<AttributeKind> attribute_from_string(std::string_view s) {
  for (auto k : {AttributeKind::Dynasty, AttributeKind::Reign, AttributeKind::Kiln,
                 AttributeKind::Color, AttributeKind::Motif, AttributeKind::Shape,
                 AttributeKind::Naming, AttributeKind::Consistency}) {
    if (to_string(k) == s) return k;
  }
  return std::nullopt;
}

struct ImageRef {
  std::string path;
  std::optional<int> width;
  std::optional<int> height;

  bool operator==(const ImageRef&) const = default;
};

struct PorcelainRecord {
  std::string id;
  std::vector<ImageRef> images;
  std::string name;
  std::optional<std::string> dynasty;
  std::optional<std::string> reign;
  std::optional<std::string> kiln;
  std::optional<std::string> color;
  std::optional<std::string> motif;
  std::optional<std::string> shape;
  std::optional<std::string> description;
  std::optional<std::string> source;
  // Keys outside the corpus schema, kept verbatim.
  json extra = json::object();

  bool operator==(const PorcelainRecord&) const = default;

  // Gold value for a scored dimension; `Naming` yields the standardized name.
  std::optional<std::string> attribute(AttributeKind kind) const {
    switch (kind) {
      case AttributeKind::Dynasty: return dynasty;
      case AttributeKind::Reign: return reign;
      case AttributeKind::Kiln: return kiln;
      case AttributeKind::Color: return color;
      case AttributeKind::Motif: return motif;
      case AttributeKind::Shape: return shape;
      case AttributeKind::Naming: return name;
      case AttributeKind::Consistency: return std::nullopt;
    }
    return std::nullopt;
  }

  // Text indexed in the text-embedding space.
  const std::string& indexed_text() const { return description ? *description : name; }
};

namespace detail {

struct OptionalField {
  std::string_view key;
  std::optional<std::string> PorcelainRecord::*member;
};

inline constexpr std::array<OptionalField, 8> kOptionalFields = {{
    {"dynasty", &PorcelainRecord::dynasty},
    {"reign", &PorcelainRecord::reign},
    {"kiln", &PorcelainRecord::kiln},
    {"color", &PorcelainRecord::color},
    {"motif", &PorcelainRecord::motif},
    {"shape", &PorcelainRecord::shape},
    {"description", &PorcelainRecord::description},
    {"source", &PorcelainRecord::source},
}};

inline ImageRef parse_image_ref(const json& j) {
  if (j.is_string()) {
    auto path = std::string(text::trim(j.get<std::string>()));
    if (path.empty()) throw Error(ErrorCode::EmptyAttribute, "blank image path", "images");
    return ImageRef{path, std::nullopt, std::nullopt};
  }
  if (j.is_object() && j.contains("path") && j["path"].is_string()) {
    ImageRef ref{j["path"].get<std::string>(), std::nullopt, std::nullopt};
    if (text::trim(ref.path).empty()) throw Error(ErrorCode::EmptyAttribute, "blank image path", "images");
    for (auto [key, slot] : {std::pair{"width", &ref.width}, std::pair{"height", &ref.height}}) {
      if (!j.contains(key)) continue;
      if (!j[key].is_number_integer() || j[key].get<long long>() < 1)
        throw Error(ErrorCode::MalformedRecord, std::string("image ") + key + " must be a positive integer");
      *slot = j[key].get<int>();
    }
    return ref;
  }
  throw Error(ErrorCode::MalformedRecord, "image reference must be a path string or {path,width,height}");
}

inline json image_ref_to_json(const ImageRef& ref) {
  if (!ref.width && !ref.height) return ref.path;
  json j = {{"path", ref.path}};
  if (ref.width) j["width"] = *ref.width;
  if (ref.height) j["height"] = *ref.height;
  return j;
}

}  // namespace detail

inline PorcelainRecord record_from_json(const json& j) {
  if (!j.is_object()) throw Error(ErrorCode::MalformedRecord, "corpus line is not a JSON object");

  PorcelainRecord r;
  auto required = [&](const char* key) {
    if (!j.contains(key) || j[key].is_null()) throw Error(ErrorCode::MissingField, std::string("missing ") + key, key);
    if (!j[key].is_string()) throw Error(ErrorCode::MalformedRecord, std::string(key) + " must be a string", key);
    auto v = std::string(text::trim(j[key].get<std::string>()));
    if (v.empty()) throw Error(ErrorCode::MissingField, std::string("blank ") + key, key);
    return v;
  };
  r.id = required("id");
  r.name = required("name");

  if (j.contains("images")) {
    if (!j["images"].is_array()) throw Error(ErrorCode::MalformedRecord, "images must be an array", r.id);
    for (const auto& item : j["images"]) r.images.push_back(detail::parse_image_ref(item));
  }

  for (const auto& field : detail::kOptionalFields) {
    const std::string key(field.key);
    if (!j.contains(key) || j[key].is_null()) continue;
    if (!j[key].is_string()) throw Error(ErrorCode::MalformedRecord, key + " must be a string", r.id);
    auto v = std::string(text::trim(j[key].get<std::string>()));
    if (v.empty()) throw Error(ErrorCode::EmptyAttribute, key + " is present but blank", r.id);
    r.*(field.member) = std::move(v);
  }

  for (const auto& [key, value] : j.items()) {
    if (key == "id" || key == "name" || key == "images") continue;
    bool known = false;
    for (const auto& field : detail::kOptionalFields) known = known || field.key == key;
    if (!known) r.extra[key] = value;
  }
  return r;
}

inline json record_to_json(const PorcelainRecord& r) {
  json j = r.extra.is_object() ? r.extra : json::object();
  j["id"] = r.id;
  j["name"] = r.name;
  if (!r.images.empty()) {
    json images = json::array();
    for (const auto& ref : r.images) images.push_back(detail::image_ref_to_json(ref));
    j["images"] = std::move(images);
  }
  for (const auto& field : detail::kOptionalFields) {
    if (const auto& v = r.*(field.member)) j[std::string(field.key)] = *v;
  }
  return j;
}

inline PorcelainRecord parse_record(std::string_view line) {
  json j;
  try {
    j = json::parse(line);
  } catch (const json::parse_error& e) {
    throw Error(ErrorCode::MalformedRecord, e.what());
  }
  return record_from_json(j);
}

// One line, no trailing newline. Keys are emitted in sorted order.
inline std::string serialize_record(const PorcelainRecord& r) { return record_to_json(r).dump(); }

// Judge scores per attribute. A missing entry is ABSENT (judge value -1),
// which is distinct from a numeric zero.
class AttributeScores {
 public:
  static constexpr double kAbsentValue = -1.0;

  // Accepts a raw judge value: exactly -1 marks ABSENT, [0,1] is stored.
  void set_judge_value(AttributeKind kind, double value) {
    if (value == kAbsentValue) {
      slot(kind).reset();
      return;
    }
    set(kind, value);
  }

  void set(AttributeKind kind, double value) {
    if (!(value >= 0.0 && value <= 1.0))
      throw Error(ErrorCode::OutOfRange, "score " + text::shortest(value) + " outside [0,1]",
                  std::string(to_string(kind)));
    slot(kind) = value;
  }

  void mark_absent(AttributeKind kind) { slot(kind).reset(); }

  std::optional<double> get(AttributeKind kind) const { return values_[index(kind)]; }
  bool present(AttributeKind kind) const { return get(kind).has_value(); }

  bool operator==(const AttributeScores&) const = default;

 private:
  static std::size_t index(AttributeKind kind) {
    switch (kind) {
      case AttributeKind::Dynasty: return 0;
      case AttributeKind::Reign: return 1;
      case AttributeKind::Kiln: return 2;
      case AttributeKind::Color: return 3;
      case AttributeKind::Motif: return 4;
      case AttributeKind::Shape: return 5;
      case AttributeKind::Consistency: return 6;
      case AttributeKind::Naming: break;
    }
    throw Error(ErrorCode::InvalidArgument, "naming is not a judge-scored attribute");
  }
  std::optional<double>& slot(AttributeKind kind) { return values_[index(kind)]; }

  std::array<std::optional<double>, 7> values_{};
};

enum class Phase { PhaseI, PhaseII };

struct RewardConfig {
  double gamma_format = 0.2;
  double gamma_acc = 1.0;
  Phase phase = Phase::PhaseII;
  int max_tool_calls = 4;

  void validate() const {
    if (gamma_format < 0 || gamma_acc < 0 || max_tool_calls < 0)
      throw Error(ErrorCode::InvalidArgument, "reward weights and tool budget must be non-negative");
  }
};

struct RewardBreakdown {
  double format_reward = 0.0;  // 0 or -1
  double accuracy_reward = 0.0;
  double tool_reward = 0.0;
  double total = 0.0;
};

}  // namespace ciqi
