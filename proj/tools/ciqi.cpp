#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "ciqi/agent.hpp"
#include "ciqi/bench.hpp"
#include "ciqi/ingest.hpp"
#include "ciqi/prompts.hpp"
#include "ciqi/reward.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

using namespace ciqi;

std::ofstream open_out(const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorCode::Io, "cannot write " + path.string());
  return out;
}

std::string read_text(const fs::path& path) {
  const auto bytes = read_file_bytes(path);
  return std::string(bytes.begin(), bytes.end());
}

std::vector<json> read_jsonl(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::Io, "cannot open " + path.string());
  std::vector<json> out;
  std::string line;
  for (std::size_t lineno = 1; std::getline(in, line); ++lineno) {
    if (text::trim(line).empty()) continue;
    try {
      out.push_back(json::parse(line));
    } catch (const json::exception& e) {
      throw Error(ErrorCode::ParseFailure, e.what(), path.string(), lineno);
    }
  }
  return out;
}

Endpoint require_endpoint(std::string_view prefix) {
  auto e = Endpoint::from_env(prefix);
  if (!e) throw Error(ErrorCode::InvalidArgument, std::string(prefix) + "_URL is not set");
  return *e;
}

HttpEncoder require_encoder() {
  auto e = HttpEncoder::from_env();
  if (!e) throw Error(ErrorCode::InvalidArgument, "CIQI_ENCODER_URL is not set");
  return std::move(*e);
}

struct Globals {
  std::optional<std::string> prompt_dir;
  prompts::Set prompts() const { return prompts::load(prompt_dir ? std::optional<fs::path>(*prompt_dir) : std::nullopt); }
};

// ingest

struct IngestArgs {
  std::string corpus, out;
  std::optional<std::string> image_vectors, text_vectors, encoder, exclude_ids;
  std::size_t batch_size = 32;
};

int cmd_ingest(const IngestArgs& a) {
  IngestManifest m;
  m.corpus_path = a.corpus;
  if (a.image_vectors) m.image_vectors_path = *a.image_vectors;
  if (a.text_vectors) m.text_vectors_path = *a.text_vectors;
  m.batch_size = a.batch_size;
  std::optional<HttpEncoder> encoder;
  std::string url = a.encoder.value_or("");
  if (url.empty() && (!m.image_vectors_path || !m.text_vectors_path)) {
    if (const char* env = std::getenv("CIQI_ENCODER_URL")) url = env;
  }
  if (!url.empty()) {
    m.encoder_endpoint = url;
    encoder.emplace(url);
  }
  const auto report = run_ingest(m, a.out, a.exclude_ids ? std::optional<fs::path>(*a.exclude_ids) : std::nullopt,
                                 encoder ? &*encoder : nullptr);
  std::cout << "records " << report.records << " excluded " << report.excluded << " clip_entries "
            << report.clip_entries << " text_entries " << report.text_entries << "\n";
  return 0;
}

// run

struct RunArgs {
  std::string index, out;
  std::optional<std::string> corpus, config;
  std::vector<std::string> images;
  bool embed_images = false;
  bool topk = false;
};

int cmd_run(const RunArgs& a, const Globals& g) {
  const auto engine = load_store(a.index);
  auto encoder = require_encoder();
  HttpChatBackend policy(require_endpoint("CIQI_POLICY"));
  BenchConfig config = a.config ? BenchConfig::load(*a.config) : BenchConfig{};
  const auto set = g.prompts();

  struct Job {
    std::string record_id;
    std::vector<Image> images;
  };
  std::vector<Job> jobs;
  if (a.corpus) {
    const fs::path root = config.image_root.empty() ? fs::path(*a.corpus).parent_path() : config.image_root;
    for (const auto& r : load_corpus(*a.corpus)) jobs.push_back({r.id, load_record_images(r, root)});
  } else {
    Job job;
    for (const auto& p : a.images) job.images.push_back(load_image(p));
    jobs.push_back(std::move(job));
  }
  const auto trajectories = parallel_map(jobs.size(), config.workers, [&](std::size_t i) {
    return run_episode(policy, engine, encoder, {jobs[i].images, set.question, set.system}, config.episode);
  });
  auto out = open_out(a.out);
  for (std::size_t i = 0; i < jobs.size(); ++i) {
    json line = trajectory_to_json(trajectories[i], a.embed_images);
    if (!jobs[i].record_id.empty()) line["record_id"] = jobs[i].record_id;
    out << line.dump() << "\n";
    std::cerr << (jobs[i].record_id.empty() ? "-" : jobs[i].record_id) << "\t" << to_string(trajectories[i].status)
              << "\t" << trajectories[i].final_answer.value_or("") << "\n";
  }
  if (a.topk && trajectories.size() == 1) std::cout << format_topk_report(emit_topk_report(trajectories[0]));
  return 0;
}

// score

struct ScoreArgs {
  std::string trajectories, gold, out;
  int phase = 2;
  std::string mode = "train";
  double gamma_format = 0.2, gamma_acc = 1.0;
  bool judge_full_text = false;
  std::size_t workers = 4;
  std::string judge_model;
};

int cmd_score(const ScoreArgs& a, const Globals& g) {
  std::map<std::string, PorcelainRecord> gold;
  for (auto& r : load_corpus(a.gold)) gold.emplace(r.id, std::move(r));
  const auto lines = read_jsonl(a.trajectories);
  std::vector<std::string> ids;
  std::vector<Trajectory> trajectories;
  for (const auto& j : lines) {
    if (!j.contains("record_id")) throw Error(ErrorCode::MissingField, "trajectory line has no record_id");
    ids.push_back(j.at("record_id").get<std::string>());
    if (!gold.count(ids.back())) throw Error(ErrorCode::InvalidArgument, "no gold record", ids.back());
    trajectories.push_back(trajectory_from_json(j));
  }
  RewardConfig rc;
  rc.phase = a.phase == 1 ? Phase::PhaseI : Phase::PhaseII;
  rc.gamma_format = a.gamma_format;
  rc.gamma_acc = a.gamma_acc;
  const bool training = a.mode == "train";
  const auto set = g.prompts();
  HttpChatBackend backend(require_endpoint("CIQI_JUDGE"));
  ChatParams params;
  params.model = a.judge_model;
  Judge judge(backend, training ? JudgeMode::Training : JudgeMode::Evaluation,
              training ? set.judge_training : set.judge_evaluation, params);
  const auto scored = parallel_map(trajectories.size(), a.workers, [&](std::size_t i) {
    return score_trajectory(trajectories[i], gold.at(ids[i]), judge, rc, a.judge_full_text);
  });

  // Rollouts of the same record form one group for advantages.
  std::map<std::string, std::vector<std::size_t>> groups;
  for (std::size_t i = 0; i < ids.size(); ++i) groups[ids[i]].push_back(i);
  std::vector<double> advantage(ids.size(), 0.0);
  for (const auto& [id, members] : groups) {
    std::vector<double> rewards;
    for (auto i : members) rewards.push_back(scored[i].reward.total);
    const auto adv = group_advantages(rewards);
    for (std::size_t k = 0; k < members.size(); ++k) advantage[members[k]] = adv[k];
  }
  auto out = open_out(a.out);
  std::size_t flagged = 0;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    const auto& s = scored[i];
    if (!s.valid) ++flagged;
    json line = {{"record_id", ids[i]},
                 {"format", s.reward.format_reward},
                 {"accuracy", s.reward.accuracy_reward},
                 {"tool", s.reward.tool_reward},
                 {"total", s.reward.total},
                 {"advantage", advantage[i]},
                 {"k_tool", s.usage.successful_calls},
                 {"m_tool", s.usage.distinct_tools},
                 {"valid", s.valid}};
    if (!s.valid) line["error"] = s.error;
    out << line.dump() << "\n";
  }
  std::cout << "scored " << ids.size() << " flagged " << flagged << "\n";
  return 0;
}

// agree

struct AgreeArgs {
  std::optional<std::string> pairs, table, out;
};

// pairs CSV: attribute,human,judge per line (header optional).
int cmd_agree(const AgreeArgs& a) {
  std::vector<AgreementRow> rows;
  if (a.table) {
    rows = parse_agreement_table(read_text(*a.table));
  } else {
    std::map<std::string, std::pair<std::vector<double>, std::vector<double>>> by_attr;
    std::vector<std::string> order;
    std::istringstream in(read_text(*a.pairs));
    std::string line;
    for (std::size_t lineno = 1; std::getline(in, line); ++lineno) {
      const auto t = text::trim(line);
      if (t.empty() || t.rfind("attribute", 0) == 0) continue;
      const auto c1 = t.find(','), c2 = c1 == std::string_view::npos ? c1 : t.find(',', c1 + 1);
      if (c2 == std::string_view::npos) throw Error(ErrorCode::ParseFailure, "expected attribute,human,judge", {}, lineno);
      const auto h = text::parse_double(t.substr(c1 + 1, c2 - c1 - 1)), j = text::parse_double(t.substr(c2 + 1));
      if (!h || !j) throw Error(ErrorCode::ParseFailure, "non-numeric score", {}, lineno);
      const std::string attr(text::trim(t.substr(0, c1)));
      if (!by_attr.count(attr)) order.push_back(attr);
      by_attr[attr].first.push_back(*h);
      by_attr[attr].second.push_back(*j);
    }
    for (const auto& attr : order) rows.push_back({attr, agreement_stats(by_attr[attr].first, by_attr[attr].second)});
  }
  const auto table = format_agreement_table(rows);
  if (a.out) {
    open_out(*a.out) << table;
  } else {
    std::cout << table;
  }
  return 0;
}

// gen-mc

struct GenArgs {
  std::string corpus, out;
  std::vector<std::string> attributes;
  bool with_images = false;
  std::string model;
  std::size_t workers = 4;
};

int cmd_gen_mc(const GenArgs& a, const Globals& g) {
  std::vector<AttributeKind> kinds;
  for (const auto& s : a.attributes) {
    const auto k = attribute_from_string(s);
    if (!k || *k == AttributeKind::Consistency) throw Error(ErrorCode::InvalidArgument, "unknown attribute '" + s + "'");
    kinds.push_back(*k);
  }
  if (kinds.empty()) kinds.assign(kMultipleChoiceAttributes.begin(), kMultipleChoiceAttributes.end());
  const auto records = load_corpus(a.corpus);
  const fs::path root = fs::path(a.corpus).parent_path();
  HttpChatBackend backend(require_endpoint("CIQI_GENERATOR"));
  ChatParams params;
  params.model = a.model;
  const auto set = g.prompts();

  struct Job {
    const PorcelainRecord* record;
    AttributeKind kind;
  };
  std::vector<Job> jobs;
  for (const auto& r : records)
    for (auto k : kinds)
      if (r.attribute(k) && !text::trim(*r.attribute(k)).empty()) jobs.push_back({&r, k});
  const auto results = parallel_map(jobs.size(), a.workers, [&](std::size_t i) -> std::optional<MCQuestion> {
    std::vector<Bytes> images;
    if (a.with_images)
      for (const auto& img : load_record_images(*jobs[i].record, root)) images.push_back(encode_png(img));
    try {
      return generate_mc(*jobs[i].record, jobs[i].kind, backend, set.mc_options, params, std::move(images));
    } catch (const Error& e) {
      if (e.code() != ErrorCode::ParseFailure && e.code() != ErrorCode::DegenerateOptions) throw;
      std::cerr << "rejected " << jobs[i].record->id << "/" << to_string(jobs[i].kind) << ": " << e.what() << "\n";
      return std::nullopt;
    }
  });
  auto out = open_out(a.out);
  std::size_t kept = 0;
  for (const auto& q : results)
    if (q) out << mc_question_to_json(*q).dump() << "\n", ++kept;
  std::cout << "generated " << kept << " rejected " << jobs.size() - kept << "\n";
  return 0;
}

// bench

struct BenchArgs {
  std::string corpus, index, config, out;
  std::optional<std::string> questions, csv, trajectories;
  std::string label = "model";
};

int cmd_bench(Protocol protocol, const BenchArgs& a, const Globals& g) {
  auto config = BenchConfig::load(a.config);
  if (config.image_root.empty()) config.image_root = fs::path(a.corpus).parent_path();
  const auto records = load_corpus(a.corpus);
  const auto engine = load_store(a.index);
  auto encoder = require_encoder();
  HttpChatBackend policy(require_endpoint("CIQI_POLICY"));
  const auto set = g.prompts();

  BenchRun run;
  if (protocol == Protocol::MultipleChoice) {
    const auto qpath = a.questions ? std::optional<fs::path>(*a.questions) : config.questions_path;
    if (!qpath) throw Error(ErrorCode::InvalidArgument, "multiple-choice bench needs --questions or config.questions");
    run = run_mc_bench(load_mc_questions(*qpath), records, policy, engine, encoder, config, set);
  } else {
    HttpChatBackend judge_backend(require_endpoint("CIQI_JUDGE"));
    Judge judge(judge_backend, JudgeMode::Evaluation, set.judge_evaluation, config.judge_params);
    run = run_freeform_bench(records, policy, engine, encoder, judge, config, set);
  }
  open_out(a.out) << report_to_json(run.report).dump(2) << "\n";
  if (a.csv) open_out(*a.csv) << report_csv_header(protocol) << "\n" << report_csv_row(a.label, run.report) << "\n";
  if (a.trajectories) {
    auto out = open_out(*a.trajectories);
    for (const auto& t : run.trajectories) out << trajectory_to_json(t).dump() << "\n";
  }
  std::cout << report_csv_header(protocol) << "\n" << report_csv_row(a.label, run.report) << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"porcelain connoisseurship agent runtime and benchmark harness"};
  app.require_subcommand(1);
  Globals g;
  app.add_option("--prompt-dir", g.prompt_dir, "directory whose *.txt files override built-in prompts");

  IngestArgs ingest;
  auto* ingest_cmd = app.add_subcommand("ingest", "build the retrieval store from a corpus");
  ingest_cmd->add_option("--corpus", ingest.corpus, "corpus JSONL")->required()->check(CLI::ExistingFile);
  ingest_cmd->add_option("--image-vectors", ingest.image_vectors, "precomputed clip vectors (JSONL or store file)");
  ingest_cmd->add_option("--text-vectors", ingest.text_vectors, "precomputed text vectors (JSONL or store file)");
  ingest_cmd->add_option("--encoder", ingest.encoder, "encoder base URL (default CIQI_ENCODER_URL)");
  ingest_cmd->add_option("--exclude-ids", ingest.exclude_ids, "file of record ids to leave out")->check(CLI::ExistingFile);
  ingest_cmd->add_option("--batch-size", ingest.batch_size, "encoder batch size");
  ingest_cmd->add_option("--out", ingest.out, "output store directory")->required();

  RunArgs run;
  auto* run_cmd = app.add_subcommand("run", "run agent episodes against the policy endpoint");
  run_cmd->add_option("--index", run.index, "store directory from ingest")->required();
  auto* run_corpus = run_cmd->add_option("--corpus", run.corpus, "run one episode per record");
  run_cmd->add_option("--image", run.images, "input image for a single episode")->excludes(run_corpus);
  run_cmd->add_option("--config", run.config, "bench config JSON for episode settings");
  run_cmd->add_option("--out", run.out, "trajectory JSONL")->required();
  run_cmd->add_flag("--embed-images", run.embed_images, "store image bytes in the trajectory file");
  run_cmd->add_flag("--topk", run.topk, "print the last image-search ranking (single episode)");

  ScoreArgs score;
  auto* score_cmd = app.add_subcommand("score", "compute rewards and group advantages for trajectories");
  score_cmd->add_option("--trajectories", score.trajectories, "trajectory JSONL with record_id")->required();
  score_cmd->add_option("--gold", score.gold, "corpus JSONL with reference names")->required();
  score_cmd->add_option("--phase", score.phase, "training phase")->check(CLI::IsMember({1, 2}));
  score_cmd->add_option("--mode", score.mode, "judge template")->check(CLI::IsMember({"train", "eval"}));
  score_cmd->add_option("--gamma-format", score.gamma_format);
  score_cmd->add_option("--gamma-acc", score.gamma_acc);
  score_cmd->add_option("--judge-model", score.judge_model);
  score_cmd->add_option("--workers", score.workers);
  score_cmd->add_flag("--judge-full-text", score.judge_full_text, "judge the whole final turn, not the answer tag");
  score_cmd->add_option("--out", score.out, "reward JSONL")->required();

  AgreeArgs agree;
  auto* agree_cmd = app.add_subcommand("agree", "judge/human agreement table");
  auto* pairs_opt = agree_cmd->add_option("--pairs", agree.pairs, "CSV attribute,human,judge")->check(CLI::ExistingFile);
  auto* table_opt = agree_cmd->add_option("--table", agree.table, "CSV attribute,pearson_r,mae")->check(CLI::ExistingFile);
  pairs_opt->excludes(table_opt);
  agree_cmd->add_option("--out", agree.out, "output CSV (default stdout)");

  GenArgs gen;
  auto* gen_cmd = app.add_subcommand("gen-mc", "generate multiple-choice items through CIQI_GENERATOR_URL");
  gen_cmd->add_option("--corpus", gen.corpus)->required()->check(CLI::ExistingFile);
  gen_cmd->add_option("--attributes", gen.attributes, "subset of dynasty,reign,kiln,color,motif,shape,naming")
      ->delimiter(',');
  gen_cmd->add_flag("--with-images", gen.with_images, "attach record images to the generator request");
  gen_cmd->add_option("--model", gen.model);
  gen_cmd->add_option("--workers", gen.workers);
  gen_cmd->add_option("--out", gen.out, "question JSONL")->required();

  BenchArgs bench;
  auto* bench_cmd = app.add_subcommand("bench", "run a benchmark protocol");
  bench_cmd->require_subcommand(1);
  std::vector<std::pair<CLI::App*, Protocol>> bench_subs;
  for (auto [name, protocol] : {std::pair{"mc", Protocol::MultipleChoice}, std::pair{"freeform", Protocol::FreeForm}}) {
    auto* sub = bench_cmd->add_subcommand(name, protocol == Protocol::MultipleChoice ? "multiple-choice protocol"
                                                                                     : "free-form protocol");
    sub->add_option("--corpus", bench.corpus)->required()->check(CLI::ExistingFile);
    sub->add_option("--index", bench.index, "store directory from ingest")->required();
    sub->add_option("--config", bench.config, "bench config JSON")->required()->check(CLI::ExistingFile);
    sub->add_option("--out", bench.out, "report JSON")->required();
    sub->add_option("--csv", bench.csv, "also write a table row CSV");
    sub->add_option("--label", bench.label, "row label for CSV output");
    sub->add_option("--trajectories", bench.trajectories, "write episode trajectories JSONL");
    if (protocol == Protocol::MultipleChoice) sub->add_option("--questions", bench.questions, "question JSONL from gen-mc");
    bench_subs.emplace_back(sub, protocol);
  }

  CLI11_PARSE(app, argc, argv);
  try {
    if (*ingest_cmd) return cmd_ingest(ingest);
    if (*run_cmd) {
      if (!run.corpus && run.images.empty()) throw Error(ErrorCode::InvalidArgument, "run needs --corpus or --image");
      return cmd_run(run, g);
    }
    if (*score_cmd) return cmd_score(score, g);
    if (*agree_cmd) {
      if (!agree.pairs && !agree.table) throw Error(ErrorCode::InvalidArgument, "agree needs --pairs or --table");
      return cmd_agree(agree);
    }
    if (*gen_cmd) return cmd_gen_mc(gen, g);
    for (const auto& [sub, protocol] : bench_subs)
      if (*sub) return cmd_bench(protocol, bench, g);
  } catch (const Error& e) {
    std::cerr << "ciqi: " << e.what();
    if (!e.subject().empty()) std::cerr << " [" << e.subject() << "]";
    if (e.line()) std::cerr << " (line " << *e.line() << ")";
    std::cerr << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "ciqi: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
