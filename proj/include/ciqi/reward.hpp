#pragma once

#include <cmath>
#include <numeric>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "ciqi/domain.hpp"
#include "ciqi/error.hpp"
#include "ciqi/gateway.hpp"
#include "ciqi/protocol.hpp"
#include "ciqi/text.hpp"

namespace ciqi {

enum class JudgeMode { Evaluation, Training };

struct JudgeTag {
  std::string_view name;
  AttributeKind kind;
};

inline constexpr std::array<JudgeTag, 6> kJudgeTags = {{{"Dynasty", AttributeKind::Dynasty},
                                                        {"Reign", AttributeKind::Reign},
                                                        {"Kiln", AttributeKind::Kiln},
                                                        {"Color", AttributeKind::Color},
                                                        {"Motif", AttributeKind::Motif},
                                                        {"Shape", AttributeKind::Shape}}};
inline constexpr JudgeTag kFormatTag = {"Format", AttributeKind::Consistency};

namespace detail {

// Content of the last <tag>...</tag> pair, or nothing.
inline std::optional<std::string_view> last_tag(std::string_view text, std::string_view tag) {
  const std::string open = "<" + std::string(tag) + ">";
  const std::string close = "</" + std::string(tag) + ">";
  std::optional<std::string_view> found;
  for (std::size_t pos = text.find(open); pos != std::string_view::npos; pos = text.find(open, pos + 1)) {
    const auto start = pos + open.size();
    const auto end = text.find(close, start);
    if (end == std::string_view::npos) break;
    found = text.substr(start, end - start);
  }
  return found;
}

inline void read_judge_tag(std::string_view text, const JudgeTag& tag, AttributeScores& out) {
  const auto content = last_tag(text, tag.name);
  if (!content) throw Error(ErrorCode::MissingTag, "judge reply has no <" + std::string(tag.name) + "> tag",
                            std::string(tag.name));
  const auto value = text::parse_double(*content);
  if (!value)
    throw Error(ErrorCode::OutOfRange, "<" + std::string(tag.name) + "> holds '" + std::string(*content) + "'",
                std::string(tag.name));
  out.set_judge_value(tag.kind, *value);
}

}  // namespace detail

// When a tag repeats (reasoning that quotes the format, then the real
// scores), the last occurrence wins.
inline AttributeScores parse_judge_scores(std::string_view judge_text, JudgeMode mode) {
  AttributeScores scores;
  for (const auto& tag : kJudgeTags) detail::read_judge_tag(judge_text, tag, scores);
  const bool has_format = detail::last_tag(judge_text, kFormatTag.name).has_value();
  if (mode == JudgeMode::Training) {
    detail::read_judge_tag(judge_text, kFormatTag, scores);
  } else if (has_format) {
    throw Error(ErrorCode::InvalidArgument, "<Format> is only scored in training mode", "Format");
  }
  return scores;
}

// Mean over present attributes; consistency joins the mean when scored.
inline double accuracy_reward(const AttributeScores& scores) {
  double sum = 0.0;
  int n = 0;
  for (const auto& tag : kJudgeTags)
    if (auto v = scores.get(tag.kind)) sum += *v, ++n;
  if (auto v = scores.get(AttributeKind::Consistency)) sum += *v, ++n;
  return n == 0 ? 0.0 : sum / n;
}

// 0 when every assistant turn is well formed, else -1. A non-final turn must
// carry at least one tool call with every call block valid and no answer. The
// final turn must carry an answer with nothing but whitespace after it.
inline double format_reward(const std::vector<std::string>& assistant_turns) {
  if (assistant_turns.empty()) return -1.0;
  for (std::size_t i = 0; i < assistant_turns.size(); ++i) {
    const std::string_view turn = assistant_turns[i];
    const bool last = i + 1 == assistant_turns.size();
    const auto blocks = extract_tool_calls(turn);
    for (const auto& b : blocks)
      if (!b.ok()) return -1.0;
    std::optional<std::string> answer;
    try {
      answer = extract_answer(turn);
    } catch (const Error&) {
      return -1.0;
    }
    if (!last) {
      if (blocks.empty() || answer) return -1.0;
      continue;
    }
    if (!answer) return -1.0;
    if (!text::trim(*text_after_answer(turn)).empty()) return -1.0;
  }
  return 0.0;
}

struct ToolUsage {
  int successful_calls = 0;  // k_tool
  int distinct_tools = 0;    // m_tool

  void validate() const {
    if (successful_calls < 0 || distinct_tools < 0 || distinct_tools > 3 || distinct_tools > successful_calls)
      throw Error(ErrorCode::InvalidArgument, "tool usage needs 0 <= m_tool <= min(3, k_tool)");
  }
};

// Only schema-valid calls whose execution succeeded count.
inline ToolUsage tool_usage(const std::vector<ToolResult>& results) {
  ToolUsage u;
  std::set<ToolName> names;
  for (const auto& r : results) {
    if (!r.success() || !r.call) continue;
    ++u.successful_calls;
    names.insert(r.call->name);
  }
  u.distinct_tools = static_cast<int>(names.size());
  return u;
}

inline double tool_reward(Phase phase, const ToolUsage& usage, double r_acc) {
  usage.validate();
  if (!(r_acc >= 0.0 && r_acc <= 1.0)) throw Error(ErrorCode::OutOfRange, "accuracy reward outside [0,1]");
  if (phase == Phase::PhaseI) return static_cast<double>(usage.successful_calls);
  if (usage.distinct_tools == 0) return 0.0;
  return (0.9 + 0.1 * usage.distinct_tools) * r_acc;
}

// Weighted sum, not a normalized average.
inline RewardBreakdown total_reward(double format, double r_acc, double r_tool, const RewardConfig& config) {
  config.validate();
  return {format, r_acc, r_tool, config.gamma_format * format + config.gamma_acc * r_acc + r_tool};
}

// Group-relative advantages with population std. An exactly constant group
// gets all zeros.
inline std::vector<double> group_advantages(const std::vector<double>& rewards) {
  if (rewards.empty()) throw Error(ErrorCode::EmptyGroup, "advantages need at least one reward");
  for (double r : rewards)
    if (!std::isfinite(r)) throw Error(ErrorCode::InvalidArgument, "non-finite reward");
  std::vector<double> out(rewards.size(), 0.0);
  if (std::all_of(rewards.begin(), rewards.end(), [&](double r) { return r == rewards.front(); })) return out;
  const double n = static_cast<double>(rewards.size());
  const double mean = std::accumulate(rewards.begin(), rewards.end(), 0.0) / n;
  double ss = 0.0;
  for (double r : rewards) ss += (r - mean) * (r - mean);
  const double sd = std::sqrt(ss / n);
  if (sd == 0.0) return out;
  for (std::size_t i = 0; i < rewards.size(); ++i) out[i] = (rewards[i] - mean) / sd;
  return out;
}

struct Agreement {
  double pearson_r = 0.0;
  double mae = 0.0;
};

inline Agreement agreement_stats(const std::vector<double>& human, const std::vector<double>& judge) {
  if (human.size() != judge.size() || human.empty())
    throw Error(ErrorCode::LengthMismatch, "need equal nonzero lengths, got " + std::to_string(human.size()) + " and " +
                                               std::to_string(judge.size()));
  const double n = static_cast<double>(human.size());
  const double mh = std::accumulate(human.begin(), human.end(), 0.0) / n;
  const double mj = std::accumulate(judge.begin(), judge.end(), 0.0) / n;
  double sxy = 0, sxx = 0, syy = 0, abs_err = 0;
  for (std::size_t i = 0; i < human.size(); ++i) {
    const double dx = human[i] - mh, dy = judge[i] - mj;
    sxy += dx * dy;
    sxx += dx * dx;
    syy += dy * dy;
    abs_err += std::abs(human[i] - judge[i]);
  }
  if (sxx == 0.0 || syy == 0.0) throw Error(ErrorCode::ConstantInput, "pearson r is undefined for constant input");
  return {std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0), abs_err / n};
}

// One row of a judge/human agreement table, e.g. "dynasty,0.995,0.013".
struct AgreementRow {
  std::string attribute;
  Agreement stats;
};

inline std::string format_agreement_row(const AgreementRow& row) {
  return row.attribute + "," + text::fixed(row.stats.pearson_r, 3) + "," + text::fixed(row.stats.mae, 3);
}

// Reads "attribute,pearson_r,mae" lines; a header line starting with
// "attribute" and blank lines are skipped.
inline std::vector<AgreementRow> parse_agreement_table(std::string_view csv) {
  std::vector<AgreementRow> rows;
  std::istringstream in{std::string(csv)};
  std::string line;
  for (std::size_t lineno = 1; std::getline(in, line); ++lineno) {
    const auto t = text::trim(line);
    if (t.empty() || t.rfind("attribute", 0) == 0) continue;
    const auto c1 = t.find(','), c2 = t.find(',', c1 == std::string_view::npos ? c1 : c1 + 1);
    if (c1 == std::string_view::npos || c2 == std::string_view::npos)
      throw Error(ErrorCode::ParseFailure, "expected attribute,pearson_r,mae", {}, lineno);
    const auto r = text::parse_double(t.substr(c1 + 1, c2 - c1 - 1));
    const auto mae = text::parse_double(t.substr(c2 + 1));
    if (!r || !mae) throw Error(ErrorCode::ParseFailure, "non-numeric agreement value", {}, lineno);
    rows.push_back({std::string(text::trim(t.substr(0, c1))), {*r, *mae}});
  }
  return rows;
}

inline std::string format_agreement_table(const std::vector<AgreementRow>& rows) {
  std::string out = "attribute,pearson_r,mae\n";
  for (const auto& row : rows) out += format_agreement_row(row) + "\n";
  return out;
}

struct JudgeOutcome {
  std::optional<AttributeScores> scores;  // empty when the sample is flagged
  std::vector<std::string> raw;           // every judge reply, in order
  std::string error;

  bool valid() const { return scores.has_value(); }
};

// LLM-as-a-judge: renders the template, asks the backend, parses the tags.
// A reply that fails to parse earns exactly one retry; a second failure flags
// the sample instead of throwing. Transport errors still propagate.
class Judge {
 public:
  Judge(ChatBackend& backend, JudgeMode mode, std::string prompt_template, ChatParams params = {})
      : backend_(backend), mode_(mode), template_(std::move(prompt_template)), params_(std::move(params)) {}

  std::string render(std::string_view ground_truth, std::string_view prediction) const {
    return text::substitute(text::substitute(template_, "ground_truth", ground_truth), "prediction", prediction);
  }

  JudgeOutcome score(std::string_view ground_truth, std::string_view prediction) {
    JudgeOutcome outcome;
    const std::vector<ChatMessage> messages = {ChatMessage::user(render(ground_truth, prediction))};
    for (int attempt = 0; attempt < 2; ++attempt) {
      outcome.raw.push_back(backend_.chat(messages, params_));
      try {
        outcome.scores = parse_judge_scores(outcome.raw.back(), mode_);
        outcome.error.clear();
        return outcome;
      } catch (const Error& e) {
        outcome.error = e.what();
      }
    }
    return outcome;
  }

  JudgeMode mode() const { return mode_; }

 private:
  ChatBackend& backend_;
  JudgeMode mode_;
  std::string template_;
  ChatParams params_;
};

}  // namespace ciqi
