#pragma once

#include <filesystem>
#include <fstream>
#include <istream>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "ciqi/domain.hpp"
#include "ciqi/error.hpp"
#include "ciqi/gateway.hpp"
#include "ciqi/image.hpp"
#include "ciqi/retrieval.hpp"
#include "ciqi/text.hpp"
#include "ciqi/vector_store.hpp"

namespace ciqi {

// One JSON record per line. Blank lines are skipped but still counted, so
// reported line numbers match an editor's.
inline std::vector<PorcelainRecord> load_corpus(std::istream& in) {
  std::vector<PorcelainRecord> records;
  std::unordered_map<std::string, std::size_t> first_seen;
  std::string line;
  for (std::size_t lineno = 1; std::getline(in, line); ++lineno) {
    if (text::trim(line).empty()) continue;
    PorcelainRecord r;
    try {
      r = parse_record(line);
    } catch (const Error& e) {
      throw Error(e.code(), std::string(e.what()) + " (line " + std::to_string(lineno) + ")", e.subject(), lineno);
    }
    if (auto [it, fresh] = first_seen.emplace(r.id, lineno); !fresh)
      throw Error(ErrorCode::DuplicateId,
                  "id '" + r.id + "' on line " + std::to_string(lineno) + " first seen on line " +
                      std::to_string(it->second),
                  r.id, lineno);
    records.push_back(std::move(r));
  }
  return records;
}

inline std::vector<PorcelainRecord> load_corpus(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::Io, "cannot open corpus " + path.string(), path.string());
  return load_corpus(in);
}

// One id per line; blank lines and lines starting with '#' are ignored.
inline std::set<std::string> load_id_list(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::Io, "cannot open id list " + path.string(), path.string());
  std::set<std::string> ids;
  std::string line;
  while (std::getline(in, line)) {
    auto t = text::trim(line);
    if (!t.empty() && t.front() != '#') ids.emplace(t);
  }
  return ids;
}

inline std::vector<PorcelainRecord> exclude_ids(std::vector<PorcelainRecord> records, const std::set<std::string>& deny) {
  std::erase_if(records, [&](const PorcelainRecord& r) { return deny.count(r.id) > 0; });
  return records;
}

struct IngestManifest {
  std::filesystem::path corpus_path;
  std::optional<std::filesystem::path> image_vectors_path;
  std::optional<std::filesystem::path> text_vectors_path;
  std::optional<std::string> encoder_endpoint;
  std::size_t batch_size = 32;

  // The encoder serves whichever spaces have no precomputed file. Each space
  // must end up with exactly one source.
  void validate() const {
    if (batch_size == 0) throw Error(ErrorCode::InvalidArgument, "batch_size must be >= 1");
    const bool both_files = image_vectors_path && text_vectors_path;
    if (both_files && encoder_endpoint)
      throw Error(ErrorCode::InvalidArgument, "encoder endpoint given but both spaces already have vector files");
    if (!encoder_endpoint && !image_vectors_path)
      throw Error(ErrorCode::InvalidArgument, "clip space needs --image-vectors or --encoder");
    if (!encoder_endpoint && !text_vectors_path)
      throw Error(ErrorCode::InvalidArgument, "text space needs --text-vectors or --encoder");
  }
};

struct Indices {
  VectorIndex clip;
  VectorIndex text;
};

namespace detail {

struct VectorKey {
  std::string id;
  std::uint32_t ordinal;
  bool operator==(const VectorKey&) const = default;
};

struct VectorKeyHash {
  std::size_t operator()(const VectorKey& k) const {
    return std::hash<std::string>{}(k.id) * 31 + k.ordinal;
  }
};

using VectorTable = std::unordered_map<VectorKey, std::vector<float>, VectorKeyHash>;

// Precomputed vectors: either a binary vector store or JSONL lines of
// {"id", "vector"} plus "image" (0-based ordinal) for the clip space.
inline VectorTable read_precomputed(const std::filesystem::path& path, Space space) {
  VectorTable table;
  const Bytes bytes = read_file_bytes(path);
  if (bytes.size() >= kVectorStoreMagic.size() &&
      std::equal(kVectorStoreMagic.begin(), kVectorStoreMagic.end(), bytes.begin())) {
    const auto index = decode_vector_store(bytes);
    if (index.space() != space)
      throw Error(ErrorCode::InvalidArgument, path.string() + " holds " + std::string(to_string(index.space())) +
                                                  " vectors, expected " + std::string(to_string(space)));
    for (const auto& e : index.entries()) table[{e.record_id, e.ordinal}] = e.vector;
    return table;
  }
  std::istringstream in(std::string(bytes.begin(), bytes.end()));
  std::string line;
  for (std::size_t lineno = 1; std::getline(in, line); ++lineno) {
    if (text::trim(line).empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      VectorKey key{j.at("id").get<std::string>(), 0};
      if (space == Space::Clip) key.ordinal = j.value("image", 0u);
      auto vec = j.at("vector").get<std::vector<float>>();
      if (!table.emplace(key, std::move(vec)).second)
        throw Error(ErrorCode::InvalidArgument, "duplicate vector for " + key.id, key.id, lineno);
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrorCode::MalformedRecord, path.string() + ": " + e.what(), {}, lineno);
    }
  }
  return table;
}

struct Job {
  std::string id;
  std::uint32_t ordinal;
  std::string payload;
};

// Embeds jobs in batch_size chunks. Failures to reach the encoder become
// EncoderUnavailable; a vector of the wrong length is pinned to its record.
inline VectorTable embed_jobs(Encoder& encoder, Modality modality, Space space, const std::vector<Job>& jobs,
                              std::size_t batch_size) {
  VectorTable table;
  for (std::size_t start = 0; start < jobs.size(); start += batch_size) {
    const std::size_t end = std::min(jobs.size(), start + batch_size);
    std::vector<std::string> payloads;
    for (std::size_t i = start; i < end; ++i) payloads.push_back(jobs[i].payload);
    std::vector<std::vector<float>> vectors;
    try {
      vectors = encoder.embed_batch(modality, space, payloads);
    } catch (const Error& e) {
      if (e.code() == ErrorCode::Transport || e.code() == ErrorCode::EncoderUnavailable)
        throw Error(ErrorCode::EncoderUnavailable, e.what());
      if (e.code() == ErrorCode::DimMismatch && !e.subject().empty()) {
        const auto pos = start + std::stoul(e.subject());
        const auto& id = pos < end ? jobs[pos].id : jobs[start].id;
        throw Error(ErrorCode::DimInconsistent, "encoder returned a wrong-sized vector for record '" + id + "'", id);
      }
      throw;
    }
    if (vectors.size() != payloads.size())
      throw Error(ErrorCode::BackendError, "encoder returned " + std::to_string(vectors.size()) + " vectors for " +
                                               std::to_string(payloads.size()) + " items");
    for (std::size_t i = start; i < end; ++i) table[{jobs[i].id, jobs[i].ordinal}] = std::move(vectors[i - start]);
  }
  return table;
}

// Builds an index in corpus order from a table, checking coverage and dims.
inline VectorIndex index_from_table(Space space, const std::vector<VectorKey>& wanted, VectorTable& table) {
  std::optional<std::size_t> dim;
  for (const auto& key : wanted) {
    auto it = table.find(key);
    if (it == table.end())
      throw Error(ErrorCode::MissingVector,
                  "no " + std::string(to_string(space)) + " vector for record '" + key.id + "'" +
                      (space == Space::Clip ? " image " + std::to_string(key.ordinal) : ""),
                  key.id);
    if (!dim) dim = it->second.size();
    if (it->second.size() != *dim)
      throw Error(ErrorCode::DimInconsistent,
                  "record '" + key.id + "' has a dim-" + std::to_string(it->second.size()) + " " +
                      std::string(to_string(space)) + " vector, expected " + std::to_string(*dim),
                  key.id);
  }
  // An empty space still needs a positive dim for the store header.
  if (!dim && !table.empty()) dim = table.begin()->second.size();
  VectorIndex index(space, std::max<std::size_t>(1, dim.value_or(1)));
  for (const auto& key : wanted) index.add(key.id, key.ordinal, std::move(table.at(key)));
  return index;
}

}  // namespace detail

// Clip vectors: one per image. Text vectors: one per record, over its
// description or else its name. Image paths resolve against `image_root`.
// `encoder` may be null when both spaces come from files.
inline Indices build_indices(const std::vector<PorcelainRecord>& records, const IngestManifest& manifest,
                             Encoder* encoder, const std::filesystem::path& image_root = {}) {
  manifest.validate();
  std::vector<detail::VectorKey> clip_keys, text_keys;
  for (const auto& r : records) {
    for (std::size_t i = 0; i < r.images.size(); ++i) clip_keys.push_back({r.id, static_cast<std::uint32_t>(i)});
    text_keys.push_back({r.id, 0});
  }

  auto need_encoder = [&] {
    if (!encoder) throw Error(ErrorCode::EncoderUnavailable, "no encoder configured");
    return encoder;
  };

  detail::VectorTable clip_table;
  if (manifest.image_vectors_path) {
    clip_table = detail::read_precomputed(*manifest.image_vectors_path, Space::Clip);
  } else if (!clip_keys.empty()) {
    std::vector<detail::Job> jobs;
    for (const auto& r : records) {
      for (std::size_t i = 0; i < r.images.size(); ++i) {
        const auto path = image_root / r.images[i].path;
        std::error_code ec;
        if (!std::filesystem::is_regular_file(path, ec))
          throw Error(ErrorCode::MissingVector, "image file " + path.string() + " for record '" + r.id + "' not found",
                      r.id);
        jobs.push_back({r.id, static_cast<std::uint32_t>(i), as_payload(read_file_bytes(path))});
      }
    }
    clip_table = detail::embed_jobs(*need_encoder(), Modality::Image, Space::Clip, jobs, manifest.batch_size);
  }

  detail::VectorTable text_table;
  if (manifest.text_vectors_path) {
    text_table = detail::read_precomputed(*manifest.text_vectors_path, Space::Text);
  } else if (!text_keys.empty()) {
    std::vector<detail::Job> jobs;
    for (const auto& r : records) jobs.push_back({r.id, 0, r.indexed_text()});
    text_table = detail::embed_jobs(*need_encoder(), Modality::Text, Space::Text, jobs, manifest.batch_size);
  }

  return {detail::index_from_table(Space::Clip, clip_keys, clip_table),
          detail::index_from_table(Space::Text, text_keys, text_table)};
}

inline constexpr std::string_view kRecordsFile = "records.jsonl";
inline constexpr std::string_view kClipStoreFile = "clip.vec";
inline constexpr std::string_view kTextStoreFile = "text.vec";

// Writes the record file plus one vector file per space. Same inputs give the same bytes.
inline void save_store(const std::filesystem::path& dir, const std::vector<PorcelainRecord>& records,
                       const Indices& indices) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw Error(ErrorCode::Io, "cannot create " + dir.string() + ": " + ec.message(), dir.string());
  std::string lines;
  for (const auto& r : records) lines += serialize_record(r) + "\n";
  write_file_bytes(dir / kRecordsFile, Bytes(lines.begin(), lines.end()));
  save_vector_store(dir / kClipStoreFile, indices.clip);
  save_vector_store(dir / kTextStoreFile, indices.text);
}

inline RetrievalEngine load_store(const std::filesystem::path& dir) {
  return RetrievalEngine(load_corpus(dir / kRecordsFile), load_vector_store(dir / kClipStoreFile),
                         load_vector_store(dir / kTextStoreFile));
}

struct IngestReport {
  std::size_t records = 0;
  std::size_t excluded = 0;
  std::size_t clip_entries = 0;
  std::size_t text_entries = 0;
};

// Full pipeline behind `ciqi ingest`.
inline IngestReport run_ingest(const IngestManifest& manifest, const std::filesystem::path& out_dir,
                               const std::optional<std::filesystem::path>& exclude_path, Encoder* encoder) {
  manifest.validate();
  auto records = load_corpus(manifest.corpus_path);
  const auto before = records.size();
  if (exclude_path) records = exclude_ids(std::move(records), load_id_list(*exclude_path));
  const auto indices = build_indices(records, manifest, encoder, manifest.corpus_path.parent_path());
  save_store(out_dir, records, indices);
  return {records.size(), before - records.size(), indices.clip.size(), indices.text.size()};
}

}  // namespace ciqi
