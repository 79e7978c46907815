#pragma once

#include <array>
#include <cctype>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "ciqi/agent.hpp"
#include "ciqi/domain.hpp"
#include "ciqi/error.hpp"
#include "ciqi/gateway.hpp"
#include "ciqi/prompts.hpp"
#include "ciqi/reward.hpp"
#include "ciqi/text.hpp"

namespace ciqi {

inline constexpr std::array<char, 4> kOptionLetters = {'A', 'B', 'C', 'D'};

// Question text put to the option generator and shown to the model.
inline std::string_view mc_stem(AttributeKind kind) {
  switch (kind) {
    case AttributeKind::Dynasty: return "In which dynasty was this piece made?";
    case AttributeKind::Reign: return "Under which reign was this piece made?";
    case AttributeKind::Kiln: return "Which kiln produced this piece?";
    case AttributeKind::Color: return "What is the glaze color of this piece?";
    case AttributeKind::Motif: return "What is the decorative motif of this piece?";
    case AttributeKind::Shape: return "What is the vessel shape of this piece?";
    case AttributeKind::Naming: return "What is the standardized name of this piece?";
    case AttributeKind::Consistency: break;
  }
  throw Error(ErrorCode::InvalidArgument, "consistency has no multiple-choice question");
}

struct MCQuestion {
  std::string record_id;
  AttributeKind attribute = AttributeKind::Dynasty;
  std::string stem;
  std::array<std::string, 4> options;
  char gold = 'A';

  std::string id() const { return record_id + "/" + std::string(to_string(attribute)); }

  void validate() const {
    if (gold < 'A' || gold > 'D') throw Error(ErrorCode::DegenerateOptions, "gold letter outside A-D", id());
    std::set<std::string> seen;
    for (const auto& o : options) {
      const auto t = std::string(text::trim(o));
      if (t.empty()) throw Error(ErrorCode::DegenerateOptions, "empty option", id());
      if (!seen.insert(t).second) throw Error(ErrorCode::DegenerateOptions, "duplicate option '" + t + "'", id());
    }
  }

  bool operator==(const MCQuestion&) const = default;
};

inline nlohmann::json mc_question_to_json(const MCQuestion& q) {
  nlohmann::json options = nlohmann::json::object();
  for (std::size_t i = 0; i < 4; ++i) options[std::string(1, kOptionLetters[i])] = q.options[i];
  return {{"record_id", q.record_id}, {"attribute", to_string(q.attribute)}, {"stem", q.stem},
          {"options", options},       {"gold", std::string(1, q.gold)}};
}

inline MCQuestion mc_question_from_json(const nlohmann::json& j) {
  try {
    MCQuestion q;
    q.record_id = j.at("record_id").get<std::string>();
    const auto attr = attribute_from_string(j.at("attribute").get<std::string>());
    if (!attr || *attr == AttributeKind::Consistency)
      throw Error(ErrorCode::ParseFailure, "unknown attribute '" + j.at("attribute").get<std::string>() + "'");
    q.attribute = *attr;
    q.stem = j.at("stem").get<std::string>();
    for (std::size_t i = 0; i < 4; ++i) q.options[i] = j.at("options").at(std::string(1, kOptionLetters[i])).get<std::string>();
    const auto gold = j.at("gold").get<std::string>();
    if (gold.size() != 1) throw Error(ErrorCode::ParseFailure, "gold must be one letter");
    q.gold = gold[0];
    q.validate();
    return q;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::ParseFailure, std::string("question item: ") + e.what());
  }
}

inline std::vector<MCQuestion> load_mc_questions(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::Io, "cannot open " + path.string());
  std::vector<MCQuestion> out;
  std::string line;
  for (std::size_t lineno = 1; std::getline(in, line); ++lineno) {
    if (text::trim(line).empty()) continue;
    try {
      out.push_back(mc_question_from_json(nlohmann::json::parse(line)));
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrorCode::ParseFailure, e.what(), {}, lineno);
    } catch (const Error& e) {
      throw Error(e.code(), e.message(), e.subject(), lineno);
    }
  }
  return out;
}

// Builds a question from an option-generator reply. The option under the
// gold letter must be the record's own value.
inline MCQuestion parse_mc_options(std::string_view reply, const PorcelainRecord& record, AttributeKind attribute) {
  MCQuestion q;
  q.record_id = record.id;
  q.attribute = attribute;
  q.stem = std::string(mc_stem(attribute));
  for (std::size_t i = 0; i < 4; ++i) {
    const std::string tag(1, kOptionLetters[i]);
    const auto content = detail::last_tag(reply, tag);
    if (!content) throw Error(ErrorCode::ParseFailure, "reply has no <" + tag + "> tag", record.id);
    q.options[i] = std::string(text::trim(*content));
  }
  const auto letter = detail::last_tag(reply, "answer");
  if (!letter) throw Error(ErrorCode::ParseFailure, "reply has no <answer> tag", record.id);
  const auto l = text::trim(*letter);
  if (l.size() != 1 || l[0] < 'A' || l[0] > 'D')
    throw Error(ErrorCode::ParseFailure, "<answer> holds '" + std::string(l) + "', not a letter A-D", record.id);
  q.gold = l[0];
  q.validate();
  const auto gold_text = record.attribute(attribute);
  if (q.options[q.gold - 'A'] != text::trim(*gold_text))
    throw Error(ErrorCode::DegenerateOptions, "gold text is not the option under " + std::string(1, q.gold), record.id);
  return q;
}

// Asks `backend` for three distractors through the option template.
inline MCQuestion generate_mc(const PorcelainRecord& record, AttributeKind attribute, ChatBackend& backend,
                              std::string_view options_template = prompts::kMcOptions, const ChatParams& params = {},
                              std::vector<Bytes> images = {}) {
  const auto gold = record.attribute(attribute);
  if (!gold || text::trim(*gold).empty())
    throw Error(ErrorCode::MissingField, "record has no " + std::string(to_string(attribute)), record.id);
  const std::string prompt = text::substitute(
      text::substitute(std::string(options_template), "question", mc_stem(attribute)), "answer", text::trim(*gold));
  const auto reply = backend.chat({ChatMessage::user(prompt, std::move(images))}, params);
  return parse_mc_options(reply, record, attribute);
}

// What the model under test sees for one item.
inline std::string render_mc_prompt(const MCQuestion& q) {
  std::string out = q.stem + "\n";
  for (std::size_t i = 0; i < 4; ++i) out += std::string(1, kOptionLetters[i]) + ". " + q.options[i] + "\n";
  out += "\nPlace the letter of the correct option within the <answer></answer> tags.";
  return out;
}

namespace detail {

inline bool is_word_char(char c) { return std::isalnum(static_cast<unsigned char>(c)) || c == '_'; }

inline std::optional<char> first_standalone_letter(std::string_view s) {
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (s[i] < 'A' || s[i] > 'D') continue;
    const bool left = i == 0 || !is_word_char(s[i - 1]);
    const bool right = i + 1 == s.size() || !is_word_char(s[i + 1]);
    if (left && right) return s[i];
  }
  return std::nullopt;
}

}  // namespace detail

// Letter inside <answer> when the tag is present, else the first standalone
// A-D token anywhere in the text.
inline std::optional<char> parse_mc_answer(std::string_view model_text) {
  std::optional<std::string> answer;
  try {
    answer = extract_answer(model_text);
  } catch (const Error&) {
  }
  if (answer) return detail::first_standalone_letter(*answer);
  return detail::first_standalone_letter(model_text);
}

// Arithmetic mean of already-reported values.
inline double mean_of(const std::vector<double>& values) {
  if (values.empty()) throw Error(ErrorCode::LengthMismatch, "mean of an empty list");
  double sum = 0.0;
  for (double v : values) sum += v;
  return sum / static_cast<double>(values.size());
}

// Sum of w_i * v_i; weights must add up to 1 within 1e-9.
inline double weighted_average(const std::vector<double>& values, const std::vector<double>& weights) {
  if (values.size() != weights.size() || values.empty())
    throw Error(ErrorCode::LengthMismatch, std::to_string(values.size()) + " values against " +
                                               std::to_string(weights.size()) + " weights");
  double wsum = 0.0, out = 0.0;
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (!(weights[i] >= 0.0)) throw Error(ErrorCode::BadWeights, "negative or NaN weight");
    wsum += weights[i];
    out += weights[i] * values[i];
  }
  if (std::abs(wsum - 1.0) > 1e-9) throw Error(ErrorCode::BadWeights, "weights sum to " + text::shortest(wsum));
  return out;
}

// Weights proportional to item counts.
inline std::vector<double> count_weights(const std::vector<std::size_t>& counts) {
  double total = 0.0;
  for (auto c : counts) total += static_cast<double>(c);
  if (total == 0.0) throw Error(ErrorCode::BadWeights, "all item counts are zero");
  std::vector<double> out;
  for (auto c : counts) out.push_back(static_cast<double>(c) / total);
  return out;
}

inline double round1(double v) { return text::round_to(v, 1); }

enum class Protocol { MultipleChoice, FreeForm };

inline std::string_view to_string(Protocol p) { return p == Protocol::MultipleChoice ? "mc" : "freeform"; }

struct AttributeResult {
  AttributeKind attribute = AttributeKind::Dynasty;
  std::optional<double> value;  // percent, 1 decimal; empty when no sample scored it
  double raw = 0.0;             // unrounded percent
  std::size_t samples = 0;      // denominator
};

struct ItemResult {
  std::string id;
  std::optional<std::string> predicted;
  std::optional<std::string> gold;
  bool correct = false;
  bool excluded = false;
  std::string note;
};

struct EvalReport {
  Protocol protocol = Protocol::MultipleChoice;
  std::vector<AttributeResult> attributes;
  std::optional<double> average;  // mean of reported per-attribute values, 1 decimal
  std::size_t samples = 0;
  std::size_t missing_answers = 0;   // MC: no reply for the item
  std::size_t unparsed_answers = 0;  // MC: reply without a letter
  std::size_t excluded = 0;          // free-form: judge failed twice
  std::vector<ItemResult> items;

  const AttributeResult* find(AttributeKind kind) const {
    for (const auto& a : attributes)
      if (a.attribute == kind) return &a;
    return nullptr;
  }
};

namespace detail {

inline void set_average(EvalReport& report) {
  std::vector<double> values;
  for (const auto& a : report.attributes)
    if (a.value) values.push_back(*a.value);
  if (!values.empty()) report.average = round1(mean_of(values));
}

}  // namespace detail

// Accuracy per attribute over every question asked. Missing or unparseable
// answers count as wrong. `answers` maps MCQuestion::id() to the model's text.
inline EvalReport evaluate_mc(const std::vector<MCQuestion>& questions,
                              const std::map<std::string, std::string>& answers) {
  EvalReport report;
  report.protocol = Protocol::MultipleChoice;
  report.samples = questions.size();
  std::map<AttributeKind, std::pair<std::size_t, std::size_t>> tally;  // correct, total
  for (const auto& q : questions) {
    ItemResult item{q.id(), std::nullopt, std::string(1, q.gold), false, false, {}};
    auto& [correct, total] = tally[q.attribute];
    ++total;
    const auto it = answers.find(q.id());
    if (it == answers.end()) {
      ++report.missing_answers;
      item.note = "MissingAnswer";
    } else if (const auto letter = parse_mc_answer(it->second)) {
      item.predicted = std::string(1, *letter);
      item.correct = *letter == q.gold;
      if (item.correct) ++correct;
    } else {
      ++report.unparsed_answers;
      item.note = "no option letter in reply";
    }
    report.items.push_back(std::move(item));
  }
  for (auto kind : kMultipleChoiceAttributes) {
    const auto it = tally.find(kind);
    if (it == tally.end()) continue;
    const auto [correct, total] = it->second;
    const double raw = 100.0 * static_cast<double>(correct) / static_cast<double>(total);
    report.attributes.push_back({kind, round1(raw), raw, total});
  }
  detail::set_average(report);
  return report;
}

struct FreeformPrediction {
  std::string record_id;
  std::string text;  // answer-tag content, or the full final turn for ablation
};

// Mean judge score x100 per attribute over samples where the reference states
// it. Samples the judge cannot score after one retry are excluded and tallied.
inline EvalReport evaluate_freeform(const std::vector<FreeformPrediction>& predictions,
                                    const std::vector<PorcelainRecord>& gold_records, Judge& judge,
                                    std::size_t workers = 1) {
  std::map<std::string, const PorcelainRecord*> gold;
  for (const auto& r : gold_records) gold[r.id] = &r;
  for (const auto& p : predictions)
    if (!gold.count(p.record_id)) throw Error(ErrorCode::InvalidArgument, "no gold record", p.record_id);

  const auto outcomes = parallel_map(predictions.size(), workers, [&](std::size_t i) {
    return judge.score(gold.at(predictions[i].record_id)->name, predictions[i].text);
  });

  EvalReport report;
  report.protocol = Protocol::FreeForm;
  report.samples = predictions.size();
  std::map<AttributeKind, std::pair<double, std::size_t>> sums;
  for (std::size_t i = 0; i < predictions.size(); ++i) {
    const auto& o = outcomes[i];
    ItemResult item{predictions[i].record_id, predictions[i].text, gold.at(predictions[i].record_id)->name,
                    false, !o.valid(), {}};
    if (!o.valid()) {
      ++report.excluded;
      item.note = std::string(to_string(ErrorCode::JudgeFailure)) + ": " + o.error;
    } else {
      for (auto kind : kSixAttributes) {
        if (const auto v = o.scores->get(kind)) {
          sums[kind].first += *v;
          ++sums[kind].second;
        }
      }
    }
    report.items.push_back(std::move(item));
  }
  for (auto kind : kSixAttributes) {
    AttributeResult a{kind, std::nullopt, 0.0, 0};
    if (const auto it = sums.find(kind); it != sums.end() && it->second.second > 0) {
      a.samples = it->second.second;
      a.raw = 100.0 * it->second.first / static_cast<double>(a.samples);
      a.value = round1(a.raw);
    }
    report.attributes.push_back(a);
  }
  detail::set_average(report);
  return report;
}

inline nlohmann::json report_to_json(const EvalReport& r) {
  nlohmann::json attrs = nlohmann::json::array();
  for (const auto& a : r.attributes) {
    attrs.push_back({{"attribute", to_string(a.attribute)},
                     {"value", a.value ? nlohmann::json(*a.value) : nlohmann::json(nullptr)},
                     {"raw", a.raw},
                     {"samples", a.samples}});
  }
  nlohmann::json items = nlohmann::json::array();
  for (const auto& i : r.items) {
    nlohmann::json j = {{"id", i.id}, {"correct", i.correct}, {"excluded", i.excluded}};
    j["predicted"] = i.predicted ? nlohmann::json(*i.predicted) : nlohmann::json(nullptr);
    j["gold"] = i.gold ? nlohmann::json(*i.gold) : nlohmann::json(nullptr);
    if (!i.note.empty()) j["note"] = i.note;
    items.push_back(std::move(j));
  }
  return {{"protocol", to_string(r.protocol)},
          {"attributes", attrs},
          {"average", r.average ? nlohmann::json(*r.average) : nlohmann::json(nullptr)},
          {"samples", r.samples},
          {"missing_answers", r.missing_answers},
          {"unparsed_answers", r.unparsed_answers},
          {"excluded", r.excluded},
          {"items", items}};
}

// CSV header and row in benchmark table order, e.g.
// "model,dynasty,reign,...,average" / "agent,77.6,70.3,...,81.5".
inline std::string report_csv_header(Protocol p) {
  std::string out = "model";
  if (p == Protocol::MultipleChoice) {
    for (auto k : kMultipleChoiceAttributes) out += "," + std::string(to_string(k));
  } else {
    for (auto k : kSixAttributes) out += "," + std::string(to_string(k));
  }
  return out + ",average";
}

inline std::string report_csv_row(const std::string& label, const EvalReport& r) {
  std::string out = label;
  auto cell = [](const std::optional<double>& v) { return v ? text::fixed(*v, 1) : std::string(); };
  for (const auto& a : r.attributes) out += "," + cell(a.value);
  return out + "," + cell(r.average);
}

// Run settings read from the --config JSON file; every key is optional.
struct BenchConfig {
  EpisodeConfig episode;
  ChatParams judge_params;
  std::size_t workers = 4;
  bool judge_full_text = false;
  std::filesystem::path image_root;
  std::optional<std::filesystem::path> questions_path;  // MC items from gen-mc

  static BenchConfig from_json(const nlohmann::json& j, const std::filesystem::path& base = {}) {
    BenchConfig c;
    try {
      if (auto e = j.find("episode"); e != j.end()) {
        c.episode.max_tool_calls = e->value("max_tool_calls", c.episode.max_tool_calls);
        c.episode.pixel_budget = e->value("pixel_budget", c.episode.pixel_budget);
        c.episode.k = e->value("k", c.episode.k);
        c.episode.alpha = e->value("alpha", c.episode.alpha);
        c.episode.params.model = e->value("model", c.episode.params.model);
        c.episode.params.temperature = e->value("temperature", c.episode.params.temperature);
        c.episode.params.max_tokens = e->value("max_tokens", c.episode.params.max_tokens);
      }
      if (auto e = j.find("judge"); e != j.end()) {
        c.judge_params.model = e->value("model", c.judge_params.model);
        c.judge_params.temperature = e->value("temperature", c.judge_params.temperature);
        c.judge_params.max_tokens = e->value("max_tokens", c.judge_params.max_tokens);
      }
      c.workers = j.value("workers", c.workers);
      c.judge_full_text = j.value("judge_full_text", c.judge_full_text);
      if (j.contains("image_root")) c.image_root = base / j.at("image_root").get<std::string>();
      if (j.contains("questions")) c.questions_path = base / j.at("questions").get<std::string>();
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrorCode::InvalidArgument, std::string("bench config: ") + e.what());
    }
    c.episode.validate();
    if (c.workers == 0) throw Error(ErrorCode::InvalidArgument, "workers must be positive");
    return c;
  }

  static BenchConfig load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw Error(ErrorCode::Io, "cannot open " + path.string());
    nlohmann::json j;
    try {
      in >> j;
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrorCode::InvalidArgument, std::string("bench config: ") + e.what());
    }
    return from_json(j, path.parent_path());
  }
};

inline std::vector<Image> load_record_images(const PorcelainRecord& r, const std::filesystem::path& root) {
  std::vector<Image> out;
  for (const auto& ref : r.images) out.push_back(load_image(root / ref.path));
  if (out.empty()) throw Error(ErrorCode::InvalidArgument, "record has no images", r.id);
  return out;
}

struct BenchRun {
  EvalReport report;
  std::vector<Trajectory> trajectories;
};

// Runs the agent on every item and scores the chosen letters.
inline BenchRun run_mc_bench(const std::vector<MCQuestion>& questions, const std::vector<PorcelainRecord>& records,
                             ChatBackend& policy, const RetrievalEngine& engine, Encoder& encoder,
                             const BenchConfig& config, const prompts::Set& prompt_set = {}) {
  std::map<std::string, const PorcelainRecord*> by_id;
  for (const auto& r : records) by_id[r.id] = &r;
  for (const auto& q : questions)
    if (!by_id.count(q.record_id)) throw Error(ErrorCode::InvalidArgument, "question names an unknown record", q.record_id);
  BenchRun run;
  run.trajectories = parallel_map(questions.size(), config.workers, [&](std::size_t i) {
    EpisodeInput input{load_record_images(*by_id.at(questions[i].record_id), config.image_root),
                       render_mc_prompt(questions[i]), prompt_set.system};
    return run_episode(policy, engine, encoder, input, config.episode);
  });
  std::map<std::string, std::string> answers;
  for (std::size_t i = 0; i < questions.size(); ++i) {
    const auto& t = run.trajectories[i];
    if (t.final_answer) {
      answers[questions[i].id()] = "<answer>" + *t.final_answer + "</answer>";
    } else if (t.status != EpisodeStatus::Failed) {
      const auto turns = t.assistant_turns();
      if (!turns.empty()) answers[questions[i].id()] = turns.back();
    }
  }
  run.report = evaluate_mc(questions, answers);
  return run;
}

// Runs the agent on every record, then has the judge score each answer.
inline BenchRun run_freeform_bench(const std::vector<PorcelainRecord>& records, ChatBackend& policy,
                                   const RetrievalEngine& engine, Encoder& encoder, Judge& judge,
                                   const BenchConfig& config, const prompts::Set& prompt_set = {}) {
  BenchRun run;
  run.trajectories = parallel_map(records.size(), config.workers, [&](std::size_t i) {
    EpisodeInput input{load_record_images(records[i], config.image_root), prompt_set.question, prompt_set.system};
    return run_episode(policy, engine, encoder, input, config.episode);
  });
  std::vector<FreeformPrediction> predictions;
  for (std::size_t i = 0; i < records.size(); ++i) {
    const auto& t = run.trajectories[i];
    const auto turns = t.assistant_turns();
    std::string text;
    if (config.judge_full_text && !turns.empty()) text = turns.back();
    else if (t.final_answer) text = *t.final_answer;
    predictions.push_back({records[i].id, std::move(text)});
  }
  run.report = evaluate_freeform(predictions, records, judge, config.workers);
  return run;
}

}  // namespace ciqi
