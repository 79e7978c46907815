#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "ciqi/error.hpp"
#include "ciqi/image.hpp"
#include "ciqi/retrieval.hpp"
#include "ciqi/text.hpp"
#include "ciqi/vision.hpp"

namespace ciqi {

inline constexpr std::string_view kToolCallOpen = "<tool_call>";
inline constexpr std::string_view kToolCallClose = "</tool_call>";
inline constexpr std::string_view kAnswerOpen = "<answer>";
inline constexpr std::string_view kAnswerClose = "</answer>";

inline constexpr std::string_view kSearchSuccessPrefix = "Successfully found the following content:\n";
inline constexpr std::string_view kFailurePrefix = "Tool call failed: ";

enum class ToolName { ImageZoomIn, SearchImage, SearchText };

inline std::string_view to_string(ToolName name) {
  switch (name) {
    case ToolName::ImageZoomIn: return "image_zoom_in_tool";
    case ToolName::SearchImage: return "search_image";
    case ToolName::SearchText: return "search_text";
  }
  return "unknown";
}

inline std::optional<ToolName> tool_from_string(std::string_view s) {
  for (auto t : {ToolName::ImageZoomIn, ToolName::SearchImage, ToolName::SearchText})
    if (to_string(t) == s) return t;
  return std::nullopt;
}

// A schema-valid tool invocation. Construct through make_tool_call(), which
// enforces the per-tool argument schema.
struct ToolCall {
  ToolName name;
  nlohmann::json arguments;

  // 1-based image index (zoom, search_image).
  std::int64_t index() const { return arguments.at("index").get<std::int64_t>(); }
  BBox bbox() const {
    const auto& b = arguments.at("bbox_2d");
    return {b[0].get<std::int64_t>(), b[1].get<std::int64_t>(), b[2].get<std::int64_t>(), b[3].get<std::int64_t>()};
  }
  std::string label() const { return arguments.at("label").get<std::string>(); }
  std::string query() const { return arguments.at("query").get<std::string>(); }

  bool operator==(const ToolCall&) const = default;
};

namespace detail {

inline bool is_integer(const nlohmann::json& j) { return j.is_number_integer() || j.is_number_unsigned(); }

inline void expect_keys(const nlohmann::json& args, std::initializer_list<std::string_view> keys) {
  for (auto key : keys)
    if (!args.contains(std::string(key)))
      throw Error(ErrorCode::MalformedCallBody, "missing argument '" + std::string(key) + "'");
  for (const auto& [key, _] : args.items()) {
    bool known = false;
    for (auto k : keys) known = known || k == key;
    if (!known) throw Error(ErrorCode::MalformedCallBody, "unexpected argument '" + key + "'");
  }
}

inline void expect_index(const nlohmann::json& args) {
  const auto& idx = args.at("index");
  if (!is_integer(idx) || idx.get<std::int64_t>() < 1)
    throw Error(ErrorCode::MalformedCallBody, "'index' must be an integer >= 1");
}

}  // namespace detail

inline ToolCall make_tool_call(ToolName name, nlohmann::json arguments) {
  if (!arguments.is_object()) throw Error(ErrorCode::MalformedCallBody, "'arguments' must be an object");
  switch (name) {
    case ToolName::ImageZoomIn: {
      detail::expect_keys(arguments, {"index", "bbox_2d", "label"});
      detail::expect_index(arguments);
      const auto& b = arguments["bbox_2d"];
      if (!b.is_array() || b.size() != 4)
        throw Error(ErrorCode::MalformedCallBody, "'bbox_2d' must be an array of 4 integers");
      for (const auto& v : b)
        if (!detail::is_integer(v)) throw Error(ErrorCode::MalformedCallBody, "'bbox_2d' must hold integers");
      if (!arguments["label"].is_string()) throw Error(ErrorCode::MalformedCallBody, "'label' must be a string");
      break;
    }
    case ToolName::SearchImage:
      detail::expect_keys(arguments, {"index"});
      detail::expect_index(arguments);
      break;
    case ToolName::SearchText: {
      detail::expect_keys(arguments, {"query"});
      const auto& q = arguments["query"];
      if (!q.is_string() || text::trim(q.get<std::string>()).empty())
        throw Error(ErrorCode::MalformedCallBody, "'query' must be a nonempty string");
      break;
    }
  }
  return ToolCall{name, std::move(arguments)};
}

inline ToolCall parse_tool_call_body(std::string_view body) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text::trim(body));
  } catch (const nlohmann::json::parse_error& e) {
    throw Error(ErrorCode::MalformedCallBody, std::string("invalid JSON: ") + e.what());
  }
  if (!j.is_object()) throw Error(ErrorCode::MalformedCallBody, "call body must be a JSON object");
  if (!j.contains("name") || !j["name"].is_string()) throw Error(ErrorCode::MalformedCallBody, "missing 'name'");
  if (!j.contains("arguments")) throw Error(ErrorCode::MalformedCallBody, "missing 'arguments'");
  for (const auto& [key, _] : j.items())
    if (key != "name" && key != "arguments")
      throw Error(ErrorCode::MalformedCallBody, "unexpected key '" + key + "' in call body");
  const auto name = tool_from_string(j["name"].get<std::string>());
  if (!name) throw Error(ErrorCode::MalformedCallBody, "unknown tool '" + j["name"].get<std::string>() + "'");
  return make_tool_call(*name, std::move(j["arguments"]));
}

inline std::string serialize_tool_call(const ToolCall& call) {
  return R"({"name": )" + nlohmann::json(std::string(to_string(call.name))).dump() +
         R"(, "arguments": )" + call.arguments.dump() + "}";
}

inline std::string wrap_in_tags(std::string_view body) {
  return std::string(kToolCallOpen) + "\n" + std::string(body) + "\n" + std::string(kToolCallClose);
}

// One `<tool_call>` block found in assistant text: either a valid call or
// the reason its body was rejected.
struct CallBlock {
  std::size_t offset = 0;  // byte offset of the opening tag
  std::optional<ToolCall> call;
  std::string error;

  bool ok() const { return call.has_value(); }
};

// All tool-call blocks in document order. An opening tag with no closing
// tag yields a final malformed block.
inline std::vector<CallBlock> extract_tool_calls(std::string_view assistant_text) {
  std::vector<CallBlock> blocks;
  std::size_t pos = 0;
  while ((pos = assistant_text.find(kToolCallOpen, pos)) != std::string_view::npos) {
    const std::size_t body_start = pos + kToolCallOpen.size();
    const std::size_t close = assistant_text.find(kToolCallClose, body_start);
    if (close == std::string_view::npos) {
      blocks.push_back({pos, std::nullopt, "unclosed <tool_call> tag"});
      break;
    }
    CallBlock block{pos, std::nullopt, {}};
    try {
      block.call = parse_tool_call_body(assistant_text.substr(body_start, close - body_start));
    } catch (const Error& e) {
      block.error = e.message();
    }
    blocks.push_back(std::move(block));
    pos = close + kToolCallClose.size();
  }
  return blocks;
}

inline std::vector<ToolCall> valid_calls(const std::vector<CallBlock>& blocks) {
  std::vector<ToolCall> out;
  for (const auto& b : blocks)
    if (b.call) out.push_back(*b.call);
  return out;
}

// Trimmed content of the first `<answer>…</answer>` pair. If further opening
// tags occur before the first closing tag, content starts after the last of
// them, so the result never contains a tag delimiter.
inline std::optional<std::string> extract_answer(std::string_view assistant_text) {
  const std::size_t open = assistant_text.find(kAnswerOpen);
  if (open == std::string_view::npos) return std::nullopt;
  const std::size_t close = assistant_text.find(kAnswerClose, open + kAnswerOpen.size());
  if (close == std::string_view::npos) throw Error(ErrorCode::UnclosedTag, "<answer> without </answer>");
  std::size_t start = open + kAnswerOpen.size();
  for (std::size_t next = assistant_text.find(kAnswerOpen, start); next != std::string_view::npos && next < close;
       next = assistant_text.find(kAnswerOpen, start))
    start = next + kAnswerOpen.size();
  return std::string(text::trim(assistant_text.substr(start, close - start)));
}

// Text following the first `</answer>`, or nothing when no answer closes.
inline std::optional<std::string_view> text_after_answer(std::string_view assistant_text) {
  const std::size_t open = assistant_text.find(kAnswerOpen);
  if (open == std::string_view::npos) return std::nullopt;
  const std::size_t close = assistant_text.find(kAnswerClose, open);
  if (close == std::string_view::npos) return std::nullopt;
  return assistant_text.substr(close + kAnswerClose.size());
}

enum class ToolStatus { Success, Failure };

// Outcome of one tool-call block. `call` is empty when the block itself was
// malformed.
struct ToolResult {
  std::optional<ToolCall> call;
  ToolStatus status = ToolStatus::Failure;
  std::string reason;
  std::vector<RetrievalHit> hits;      // search tools
  std::optional<ZoomPatch> patch;      // zoom tool
  std::vector<Image> attachments;      // images delivered with the message

  bool success() const { return status == ToolStatus::Success; }

  static ToolResult failure(std::optional<ToolCall> call, std::string reason) {
    ToolResult r;
    r.call = std::move(call);
    r.reason = std::move(reason);
    return r;
  }
};

namespace detail {

inline void hit_line(std::string& out, std::string_view key, const std::optional<std::string>& value) {
  if (!value) return;
  out += " - ";
  out += key;
  out += ": ";
  out += *value;
  out += "\n";
}

// Text-space hits render as text entries; hits found only through the CLIP
// space render as image entries.
inline std::string render_hit(const RetrievalHit& hit) {
  const auto& r = hit.record;
  std::string out;
  if (hit.text_score) {
    out += "Text search results:\n\n";
    hit_line(out, "Text", r.indexed_text());
    hit_line(out, "Title", r.name);
    hit_line(out, "Source", r.source);
  } else {
    out += "Image search results:\n\n";
    hit_line(out, "Name", r.name);
    hit_line(out, "Dynasty", r.dynasty);
    hit_line(out, "Reign", r.reign);
    hit_line(out, "Kiln", r.kiln);
    hit_line(out, "Glaze Color", r.color);
    hit_line(out, "Decoration", r.motif);
    hit_line(out, "Form", r.shape);
    hit_line(out, "Description", r.description);
    hit_line(out, "Source", r.source);
  }
  hit_line(out, "Similarity", text::shortest(hit.fused_score));
  return out;
}

}  // namespace detail

inline std::string render_zoom_success(const std::string& label, const BBox& b) {
  return "Successfully zoomed in on the region labeled “" + label + "” at [" + std::to_string(b.x1) + ", " +
         std::to_string(b.y1) + ", " + std::to_string(b.x2) + ", " + std::to_string(b.y2) + "].\n";
}

// User-message text for a finished tool result.
inline std::string render_tool_result(const ToolResult& result) {
  if (!result.success()) return std::string(kFailurePrefix) + result.reason;
  if (!result.call) throw Error(ErrorCode::InvalidArgument, "successful result without a call");
  switch (result.call->name) {
    case ToolName::ImageZoomIn:
      return render_zoom_success(result.call->label(), result.call->bbox());
    case ToolName::SearchImage:
    case ToolName::SearchText: {
      std::string out(kSearchSuccessPrefix);
      for (std::size_t i = 0; i < result.hits.size(); ++i) {
        out += i == 0 ? "\n" : "\n---\n\n";
        out += detail::render_hit(result.hits[i]);
      }
      return out;
    }
  }
  return {};
}

}  // namespace ciqi
