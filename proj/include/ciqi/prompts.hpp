#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <string_view>

#include "ciqi/image.hpp"

// Built-in prompt templates. The same text ships under prompts/ so it can be
// edited and passed back in with --prompt-dir.
namespace ciqi::prompts {

inline constexpr std::string_view kSystem =
    R"(You are a porcelain connoisseurship assistant. Work out the standardized name of the piece in the user's images.

You may call tools. Put each call in its own <tool_call></tool_call> block holding one JSON object with "name" and "arguments". Available tools:

- image_zoom_in_tool: crop and enlarge a region of an input image.
  arguments: {"index": <1-based image number>, "bbox_2d": [x1, y1, x2, y2], "label": "<what the region shows>"}
  Coordinates refer to the image as you received it.
- search_image: find visually similar catalogued pieces for an input image.
  arguments: {"index": <1-based image number>}
- search_text: find catalogued pieces matching a text query.
  arguments: {"query": "<search text>"}

Think before acting. When you are ready, give the name inside <answer></answer> and write nothing after it.)";

// The question wording the policy was tuned on. It is part of the wire
// contract with trained checkpoints, so it is kept character for character.
inline constexpr std::string_view kQuestion =
    "Please provide a standardized name for this porcelain piece.\n\n"
    "After your analysis, choose to either invoke a tool or respond directly, and place the final identification "
    "result within the <answer></answer> tags.";

inline constexpr std::string_view kFinalize =
    "Tool budget exhausted. Provide your final identification within <answer></answer> tags now.";

inline constexpr std::string_view kJudgeEvaluation =
    R"(Act as a grader for Chinese porcelain attributions. Compare a predicted name against a reference name.

Score each attribute from 0 (wrong or missing) to 1 (fully correct); partial credit is allowed and should be given sparingly:
- Dynasty: the period of production.
- Reign: the emperor's reign period.
- Kiln: the production kiln or site.
- Color: the glaze or enamel color category.
- Motif: the decoration or subject.
- Shape: the vessel form.

If the reference name does not state an attribute, output -1 for it.

Explain briefly, then finish with exactly these tags holding numbers:
<Dynasty></Dynasty>
<Reign></Reign>
<Kiln></Kiln>
<Color></Color>
<Motif></Motif>
<Shape></Shape>

Reference: {ground_truth}
Prediction: {prediction})";

inline constexpr std::string_view kJudgeTraining =
    R"(Act as a grader for Chinese porcelain attributions. Compare a predicted name against a reference name.

Score each item from 0 (wrong or missing) to 1 (fully correct); partial credit is allowed and should be given sparingly:
- Format: the prediction is one standardized name and nothing else, with attributes in the order dynasty, reign, kiln, color, motif, shape. Omitted attributes are acceptable if the order holds.
- Dynasty: the period of production.
- Reign: the emperor's reign period.
- Kiln: the production kiln or site.
- Color: the glaze or enamel color category.
- Motif: the decoration or subject.
- Shape: the vessel form.

If the reference name does not state an attribute, output -1 for it. Format always gets a score.

Explain briefly, then finish with exactly these tags holding numbers:
<Format></Format>
<Dynasty></Dynasty>
<Reign></Reign>
<Kiln></Kiln>
<Color></Color>
<Motif></Motif>
<Shape></Shape>

Reference: {ground_truth}
Prediction: {prediction})";

inline constexpr std::string_view kMcOptions =
    R"(<image>You write multiple-choice items about porcelain. Turn the question and correct answer below into a four-option item. One option is the correct answer; the other three must be believable but wrong, and all four must differ.

Question: {question}
Correct answer: {answer}

Reply with these tags only:
<A></A>
<B></B>
<C></C>
<D></D>
<answer></answer>
where <answer> holds the letter of the correct option.)";

struct Set {
  std::string system{kSystem};
  std::string question{kQuestion};
  std::string judge_evaluation{kJudgeEvaluation};
  std::string judge_training{kJudgeTraining};
  std::string mc_options{kMcOptions};
};

inline constexpr std::string_view kSystemFile = "system.txt";
inline constexpr std::string_view kQuestionFile = "question.txt";
inline constexpr std::string_view kJudgeEvaluationFile = "judge_eval.txt";
inline constexpr std::string_view kJudgeTrainingFile = "judge_train.txt";
inline constexpr std::string_view kMcOptionsFile = "mc_options.txt";

// Files present in `dir` override the built-ins; missing ones keep defaults.
// A single trailing newline is dropped so editors do not change the prompt.
inline Set load(const std::optional<std::filesystem::path>& dir) {
  Set set;
  if (!dir) return set;
  auto read = [&](std::string_view name, std::string& slot) {
    const auto path = *dir / name;
    if (!std::filesystem::exists(path)) return;
    const auto bytes = read_file_bytes(path);
    slot.assign(bytes.begin(), bytes.end());
    if (!slot.empty() && slot.back() == '\n') slot.pop_back();
  };
  read(kSystemFile, set.system);
  read(kQuestionFile, set.question);
  read(kJudgeEvaluationFile, set.judge_evaluation);
  read(kJudgeTrainingFile, set.judge_training);
  read(kMcOptionsFile, set.mc_options);
  return set;
}

}  // namespace ciqi::prompts
