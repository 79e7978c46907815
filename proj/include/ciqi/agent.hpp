#pragma once

#include <atomic>
#include <exception>
#include <functional>
#include <map>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "ciqi/domain.hpp"
#include "ciqi/error.hpp"
#include "ciqi/gateway.hpp"
#include "ciqi/image.hpp"
#include "ciqi/prompts.hpp"
#include "ciqi/protocol.hpp"
#include "ciqi/retrieval.hpp"
#include "ciqi/reward.hpp"
#include "ciqi/vision.hpp"

namespace ciqi {

struct EpisodeConfig {
  int max_tool_calls = 4;
  std::int64_t pixel_budget = kDefaultPixelBudget;
  std::size_t k = kDefaultTopK;
  double alpha = kDefaultAlpha;
  ChatParams params;

  void validate() const {
    if (max_tool_calls < 1 || pixel_budget < 1 || k < 1)
      throw Error(ErrorCode::InvalidArgument, "tool budget, pixel budget and k must be positive");
    if (!(alpha >= 0.0 && alpha <= 1.0)) throw Error(ErrorCode::InvalidArgument, "alpha must lie in [0,1]");
    if (params.temperature < 0.0) throw Error(ErrorCode::InvalidArgument, "temperature must be >= 0");
  }
};

enum class EpisodeStatus { Completed, Truncated, Failed };

inline std::string_view to_string(EpisodeStatus s) {
  switch (s) {
    case EpisodeStatus::Completed: return "completed";
    case EpisodeStatus::Truncated: return "truncated";
    case EpisodeStatus::Failed: return "failed";
  }
  return "failed";
}

// One executed tool-call block and the user message it produced.
struct CallRecord {
  ToolResult result;
  std::string rendered;
};

struct Trajectory {
  std::vector<ChatMessage> messages;
  std::vector<CallRecord> calls;
  std::optional<std::string> final_answer;
  EpisodeStatus status = EpisodeStatus::Failed;
  std::string failure_reason;
  bool finalize_injected = false;

  std::vector<std::string> assistant_turns() const {
    std::vector<std::string> out;
    for (const auto& m : messages)
      if (m.role == Role::Assistant) out.push_back(m.text);
    return out;
  }

  std::vector<ToolResult> results() const {
    std::vector<ToolResult> out;
    for (const auto& c : calls) out.push_back(c.result);
    return out;
  }
};

// Runs tools against the images of one episode. Image indices are 1-based
// and refer to the images of the initial question only.
class ToolExecutor {
 public:
  ToolExecutor(const RetrievalEngine& engine, Encoder& encoder, const std::vector<Image>& originals,
               const EpisodeConfig& config)
      : engine_(engine), encoder_(encoder), originals_(originals), config_(config) {}

  // Never throws for tool-level problems; they come back as Failure results.
  ToolResult execute(const ToolCall& call) {
    try {
      ToolResult r;
      r.call = call;
      r.status = ToolStatus::Success;
      switch (call.name) {
        case ToolName::ImageZoomIn: {
          const auto& img = image(call.index());
          auto patch = zoom_crop(img, call.bbox(), downscale_to_budget(dims_of(img), config_.pixel_budget),
                                 call.label());
          r.attachments.push_back(fit_to_budget(patch.patch, config_.pixel_budget));
          r.patch = std::move(patch);
          break;
        }
        case ToolName::SearchImage: {
          const auto& q = image_embedding(call.index());
          r.hits = engine_.search_image(q, config_.k);
          break;
        }
        case ToolName::SearchText: {
          const auto query = call.query();
          const auto clip_q = encoder_.embed(Modality::Text, query, Space::Clip);
          const auto text_q = encoder_.embed(Modality::Text, query, Space::Text);
          r.hits = engine_.search_text(clip_q, text_q, config_.k, config_.alpha);
          break;
        }
      }
      return r;
    } catch (const Error& e) {
      return ToolResult::failure(call, e.message());
    }
  }

 private:
  const Image& image(std::int64_t index) const {
    if (index < 1 || static_cast<std::size_t>(index) > originals_.size())
      throw Error(ErrorCode::IndexOutOfRange, "image index " + std::to_string(index) + " out of range (" +
                                                  std::to_string(originals_.size()) + " image(s))");
    return originals_[static_cast<std::size_t>(index - 1)];
  }

  // The query embeds the original image, not the budgeted copy.
  const std::vector<float>& image_embedding(std::int64_t index) {
    const auto& img = image(index);
    auto it = image_vectors_.find(index);
    if (it == image_vectors_.end())
      it = image_vectors_.emplace(index, encoder_.embed(Modality::Image, as_payload(encode_png(img)), Space::Clip)).first;
    return it->second;
  }

  const RetrievalEngine& engine_;
  Encoder& encoder_;
  const std::vector<Image>& originals_;
  EpisodeConfig config_;
  std::map<std::int64_t, std::vector<float>> image_vectors_;
};

inline std::vector<Bytes> encode_attachments(const std::vector<Image>& images) {
  std::vector<Bytes> out;
  for (const auto& img : images) out.push_back(encode_png(img));
  return out;
}

struct EpisodeInput {
  std::vector<Image> images;
  std::string question{prompts::kQuestion};
  std::string system_prompt{prompts::kSystem};
};

// One episode. Per assistant turn: an answer ends the episode; otherwise the
// first tool-call block runs while budget remains (a malformed block uses up
// an attempt and is answered with a failure message). A turn with neither,
// or any turn after the budget is spent, draws the finalize instruction once;
// the reply after it either answers or the episode is Truncated.
inline Trajectory run_episode(ChatBackend& policy, const RetrievalEngine& engine, Encoder& encoder,
                              const EpisodeInput& input, const EpisodeConfig& config) {
  config.validate();
  if (input.images.empty()) throw Error(ErrorCode::InvalidArgument, "an episode needs at least one image");
  Trajectory t;
  std::vector<Image> budgeted;
  for (const auto& img : input.images) budgeted.push_back(fit_to_budget(img, config.pixel_budget));
  t.messages.push_back(ChatMessage::system(input.system_prompt));
  t.messages.push_back(ChatMessage::user(input.question, encode_attachments(budgeted)));

  ToolExecutor tools(engine, encoder, input.images, config);
  for (;;) {
    std::string reply;
    try {
      reply = policy.chat(t.messages, config.params);
    } catch (const Error& e) {
      t.status = EpisodeStatus::Failed;
      t.failure_reason = e.what();
      return t;
    }
    t.messages.push_back(ChatMessage::assistant(reply));

    std::optional<std::string> answer;
    try {
      answer = extract_answer(reply);
    } catch (const Error&) {
      // an unclosed answer tag counts as no answer
    }
    if (answer) {
      t.final_answer = std::move(answer);
      t.status = EpisodeStatus::Completed;
      return t;
    }
    if (t.finalize_injected) {
      t.status = EpisodeStatus::Truncated;
      return t;
    }

    const auto blocks = extract_tool_calls(reply);
    if (!blocks.empty() && static_cast<int>(t.calls.size()) < config.max_tool_calls) {
      const auto& block = blocks.front();
      ToolResult result = block.ok() ? tools.execute(*block.call) : ToolResult::failure(std::nullopt, block.error);
      std::string rendered = render_tool_result(result);
      t.messages.push_back(ChatMessage::user(rendered, encode_attachments(result.attachments)));
      t.calls.push_back({std::move(result), std::move(rendered)});
      continue;
    }
    t.messages.push_back(ChatMessage::user(std::string(prompts::kFinalize)));
    t.finalize_injected = true;
  }
}

// Re-executes the logged calls against `engine` and returns the tool
// messages they render to, in order.
inline std::vector<std::string> replay_tool_messages(const Trajectory& t, const RetrievalEngine& engine,
                                                     Encoder& encoder, const std::vector<Image>& images,
                                                     const EpisodeConfig& config) {
  ToolExecutor tools(engine, encoder, images, config);
  std::vector<std::string> out;
  for (const auto& c : t.calls) {
    const auto result = c.result.call ? tools.execute(*c.result.call) : ToolResult::failure(std::nullopt, c.result.reason);
    out.push_back(render_tool_result(result));
  }
  return out;
}

struct TopKRow {
  std::size_t rank = 0;
  std::string record_id;
  std::string name;
  double fused_score = 0.0;
};

// Hits of the last successful search_image call.
inline std::vector<TopKRow> emit_topk_report(const Trajectory& t) {
  for (auto it = t.calls.rbegin(); it != t.calls.rend(); ++it) {
    const auto& r = it->result;
    if (!r.success() || !r.call || r.call->name != ToolName::SearchImage) continue;
    std::vector<TopKRow> rows;
    for (std::size_t i = 0; i < r.hits.size(); ++i)
      rows.push_back({i + 1, r.hits[i].record.id, r.hits[i].record.name, r.hits[i].fused_score});
    return rows;
  }
  throw Error(ErrorCode::NoRetrievalPerformed, "trajectory has no successful search_image call");
}

inline std::string format_topk_report(const std::vector<TopKRow>& rows) {
  std::string out = "rank\trecord_id\tname\tscore\n";
  for (const auto& r : rows)
    out += std::to_string(r.rank) + "\t" + r.record_id + "\t" + r.name + "\t" + text::shortest(r.fused_score) + "\n";
  return out;
}

// JSON form of a trajectory, one object per JSONL line. Message images are
// stored as base64 PNG only when `embed_images` is set; otherwise as a count.
inline nlohmann::json trajectory_to_json(const Trajectory& t, bool embed_images = false) {
  nlohmann::json messages = nlohmann::json::array();
  for (const auto& m : t.messages) {
    nlohmann::json j = {{"role", to_string(m.role)}, {"text", m.text}};
    if (embed_images) {
      j["images"] = nlohmann::json::array();
      for (const auto& img : m.images) j["images"].push_back(base64::encode(img));
    } else {
      j["image_count"] = m.images.size();
    }
    messages.push_back(std::move(j));
  }
  nlohmann::json calls = nlohmann::json::array();
  for (const auto& c : t.calls) {
    const auto& r = c.result;
    nlohmann::json j = {{"status", r.success() ? "success" : "failure"}, {"rendered", c.rendered}};
    j["call"] = r.call ? nlohmann::json{{"name", to_string(r.call->name)}, {"arguments", r.call->arguments}}
                       : nlohmann::json(nullptr);
    if (!r.success()) j["reason"] = r.reason;
    if (!r.hits.empty()) {
      j["hits"] = nlohmann::json::array();
      for (const auto& h : r.hits) {
        nlohmann::json hit = {{"id", h.record.id}, {"name", h.record.name}, {"fused_score", h.fused_score}};
        hit["clip_score"] = h.clip_score ? nlohmann::json(*h.clip_score) : nlohmann::json(nullptr);
        hit["text_score"] = h.text_score ? nlohmann::json(*h.text_score) : nlohmann::json(nullptr);
        j["hits"].push_back(std::move(hit));
      }
    }
    if (r.patch) {
      const auto& b = r.patch->original_bbox;
      j["original_bbox"] = {b.x1, b.y1, b.x2, b.y2};
    }
    calls.push_back(std::move(j));
  }
  nlohmann::json out = {{"status", to_string(t.status)},
                        {"finalize_injected", t.finalize_injected},
                        {"messages", std::move(messages)},
                        {"calls", std::move(calls)}};
  out["answer"] = t.final_answer ? nlohmann::json(*t.final_answer) : nlohmann::json(nullptr);
  if (t.status == EpisodeStatus::Failed) out["failure_reason"] = t.failure_reason;
  return out;
}

// Inverse of trajectory_to_json. Hit records are restored from `engine` when
// given, else as id/name stubs. Zoom patches come back as their box only.
inline Trajectory trajectory_from_json(const nlohmann::json& j, const RetrievalEngine* engine = nullptr) {
  try {
    Trajectory t;
    const auto status = j.at("status").get<std::string>();
    if (status == "completed") t.status = EpisodeStatus::Completed;
    else if (status == "truncated") t.status = EpisodeStatus::Truncated;
    else t.status = EpisodeStatus::Failed;
    t.failure_reason = j.value("failure_reason", "");
    t.finalize_injected = j.value("finalize_injected", false);
    if (!j.at("answer").is_null()) t.final_answer = j["answer"].get<std::string>();
    for (const auto& m : j.at("messages")) {
      const auto role = role_from_string(m.at("role").get<std::string>());
      if (!role) throw Error(ErrorCode::MalformedRecord, "unknown role in trajectory");
      ChatMessage msg{*role, m.at("text").get<std::string>(), {}};
      if (m.contains("images")) {
        for (const auto& img : m["images"]) msg.images.push_back(base64::decode(img.get<std::string>()));
      } else {
        // count-only logs keep the shape with empty placeholders
        msg.images.resize(m.value("image_count", std::size_t{0}));
      }
      t.messages.push_back(std::move(msg));
    }
    for (const auto& c : j.at("calls")) {
      CallRecord rec;
      rec.rendered = c.at("rendered").get<std::string>();
      auto& r = rec.result;
      r.status = c.at("status") == "success" ? ToolStatus::Success : ToolStatus::Failure;
      r.reason = c.value("reason", "");
      if (!c.at("call").is_null()) {
        const auto name = tool_from_string(c["call"].at("name").get<std::string>());
        if (!name) throw Error(ErrorCode::MalformedRecord, "unknown tool in trajectory");
        r.call = make_tool_call(*name, c["call"].at("arguments"));
      }
      if (c.contains("hits")) {
        for (const auto& h : c["hits"]) {
          RetrievalHit hit;
          const auto id = h.at("id").get<std::string>();
          const PorcelainRecord* found = engine ? engine->find(id) : nullptr;
          if (found) {
            hit.record = *found;
          } else {
            hit.record.id = id;
            hit.record.name = h.value("name", "");
          }
          hit.fused_score = h.at("fused_score").get<double>();
          if (!h.at("clip_score").is_null()) hit.clip_score = h["clip_score"].get<double>();
          if (!h.at("text_score").is_null()) hit.text_score = h["text_score"].get<double>();
          r.hits.push_back(std::move(hit));
        }
      }
      if (c.contains("original_bbox")) {
        const auto& b = c["original_bbox"];
        r.patch = ZoomPatch{Image{}, BBox{b.at(0), b.at(1), b.at(2), b.at(3)}, r.call ? r.call->label() : ""};
      }
      t.calls.push_back(std::move(rec));
    }
    return t;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::MalformedRecord, std::string("bad trajectory JSON: ") + e.what());
  }
}

// Runs fn(i) for i in [0, n) on up to `workers` threads; results keep input
// order. The first exception is rethrown after all workers finish.
template <typename Fn>
auto parallel_map(std::size_t n, std::size_t workers, Fn fn) -> std::vector<decltype(fn(std::size_t{}))> {
  using R = decltype(fn(std::size_t{}));
  std::vector<std::optional<R>> slots(n);
  std::atomic<std::size_t> next{0};
  std::exception_ptr first_error;
  std::mutex error_mutex;
  auto work = [&] {
    for (std::size_t i; (i = next.fetch_add(1)) < n;) {
      try {
        slots[i].emplace(fn(i));
      } catch (...) {
        std::lock_guard lock(error_mutex);
        if (!first_error) first_error = std::current_exception();
      }
    }
  };
  std::vector<std::thread> threads;
  for (std::size_t w = 1; w < std::max<std::size_t>(1, std::min(workers, n)); ++w) threads.emplace_back(work);
  work();
  for (auto& th : threads) th.join();
  if (first_error) std::rethrow_exception(first_error);
  std::vector<R> out;
  out.reserve(n);
  for (auto& s : slots) out.push_back(std::move(*s));
  return out;
}

struct ScoredRollout {
  RewardBreakdown reward;
  ToolUsage usage;
  std::vector<std::string> judge_raw;
  bool valid = true;  // false when the judge could not be parsed after a retry
  std::string error;
};

// Full reward for one finished trajectory. The judge sees the answer-tag
// content unless `judge_full_text` asks for the whole final turn.
inline ScoredRollout score_trajectory(const Trajectory& t, const PorcelainRecord& gold, Judge& judge,
                                      const RewardConfig& config, bool judge_full_text = false) {
  ScoredRollout out;
  out.usage = tool_usage(t.results());
  const double format = format_reward(t.assistant_turns());
  double r_acc = 0.0;
  if (t.final_answer) {
    const auto turns = t.assistant_turns();
    const std::string prediction = judge_full_text ? turns.back() : *t.final_answer;
    auto outcome = judge.score(gold.name, prediction);
    out.judge_raw = std::move(outcome.raw);
    if (outcome.valid()) {
      r_acc = accuracy_reward(*outcome.scores);
    } else {
      out.valid = false;
      out.error = outcome.error;
    }
  }
  out.reward = total_reward(format, r_acc, tool_reward(config.phase, out.usage, r_acc), config);
  return out;
}

}  // namespace ciqi
