#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "ciqi/domain.hpp"
#include "ciqi/error.hpp"

namespace ciqi {

inline constexpr std::size_t kDefaultTopK = 3;
inline constexpr double kDefaultAlpha = 0.2;

enum class Space : std::uint32_t { Clip = 0, Text = 1 };

inline std::string_view to_string(Space s) { return s == Space::Clip ? "clip" : "text"; }

inline double cosine(std::span<const float> a, std::span<const float> b) {
  if (a.size() != b.size())
    throw Error(ErrorCode::DimMismatch,
                "vector dims differ (" + std::to_string(a.size()) + " vs " + std::to_string(b.size()) + ")");
  double dot = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += static_cast<double>(a[i]) * b[i];
    na += static_cast<double>(a[i]) * a[i];
    nb += static_cast<double>(b[i]) * b[i];
  }
  if (na == 0 || nb == 0) throw Error(ErrorCode::ZeroVector, "cosine of a zero vector is undefined");
  return std::clamp(dot / std::sqrt(na * nb), -1.0, 1.0);
}

// Dual-space fusion. The text space carries weight (1 - alpha) and the CLIP
// space the complement of that, 1 - (1 - alpha); an absent side contributes
// nothing. For alpha = 0.2 the CLIP weight is 0.19999999999999996.
inline double fuse_scores(std::optional<double> clip_score, std::optional<double> text_score, double alpha) {
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw Error(ErrorCode::InvalidArgument, "alpha must lie in [0,1]");
  if (!clip_score && !text_score) throw Error(ErrorCode::BothAbsent, "no score in either space");
  const double text_weight = 1.0 - alpha;
  const double clip_weight = 1.0 - text_weight;
  double fused = 0.0;
  if (clip_score) fused += clip_weight * *clip_score;
  if (text_score) fused += text_weight * *text_score;
  return fused;
}

struct IndexEntry {
  std::string record_id;
  std::uint32_t ordinal = 0;  // image position within the record; 0 for text
  std::vector<float> vector;

  bool operator==(const IndexEntry&) const = default;
};

// Exhaustive-scan vector index for one embedding space. Vectors are kept
// unnormalized; zero vectors are rejected on insert.
class VectorIndex {
 public:
  VectorIndex(Space space, std::size_t dim) : space_(space), dim_(dim) {
    if (dim == 0) throw Error(ErrorCode::InvalidArgument, "index dim must be positive");
  }

  void add(std::string record_id, std::uint32_t ordinal, std::vector<float> vector) {
    if (vector.size() != dim_)
      throw Error(ErrorCode::DimInconsistent,
                  "vector of dim " + std::to_string(vector.size()) + " in a dim-" + std::to_string(dim_) + " index",
                  record_id);
    bool nonzero = false;
    for (float v : vector) {
      if (!std::isfinite(v)) throw Error(ErrorCode::InvalidArgument, "non-finite vector component", record_id);
      nonzero = nonzero || v != 0.0f;
    }
    if (!nonzero) throw Error(ErrorCode::ZeroVector, "zero vector", record_id);
    if (!keys_.emplace(record_id, ordinal).second)
      throw Error(ErrorCode::InvalidArgument,
                  "duplicate entry (" + record_id + ", " + std::to_string(ordinal) + ") in " +
                      std::string(to_string(space_)) + " index",
                  record_id);
    entries_.push_back({std::move(record_id), ordinal, std::move(vector)});
  }

  Space space() const { return space_; }
  std::size_t dim() const { return dim_; }
  std::size_t size() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }
  const std::vector<IndexEntry>& entries() const { return entries_; }

  bool operator==(const VectorIndex& o) const {
    return space_ == o.space_ && dim_ == o.dim_ && entries_ == o.entries_;
  }

 private:
  Space space_;
  std::size_t dim_;
  std::vector<IndexEntry> entries_;
  std::set<std::pair<std::string, std::uint32_t>> keys_;
};

struct RetrievalHit {
  PorcelainRecord record;
  std::optional<double> clip_score;
  std::optional<double> text_score;
  double fused_score = 0.0;
};

// Descending score, then ascending record id.
inline bool ranks_before(double score_a, const std::string& id_a, double score_b, const std::string& id_b) {
  if (score_a != score_b) return score_a > score_b;
  return id_a < id_b;
}

// Immutable after construction: records plus the two indices.
class RetrievalEngine {
 public:
  RetrievalEngine(std::vector<PorcelainRecord> records, VectorIndex clip_index, VectorIndex text_index)
      : records_(std::move(records)), clip_(std::move(clip_index)), text_(std::move(text_index)) {
    if (clip_.space() != Space::Clip || text_.space() != Space::Text)
      throw Error(ErrorCode::InvalidArgument, "index spaces swapped");
    for (std::size_t i = 0; i < records_.size(); ++i) {
      if (!by_id_.emplace(records_[i].id, i).second)
        throw Error(ErrorCode::DuplicateId, "duplicate record id", records_[i].id);
    }
    for (const auto* index : {&clip_, &text_}) {
      for (const auto& e : index->entries()) {
        if (!by_id_.count(e.record_id))
          throw Error(ErrorCode::MissingVector, "index entry without a record", e.record_id);
      }
    }
  }

  const VectorIndex& clip_index() const { return clip_; }
  const VectorIndex& text_index() const { return text_; }
  const std::vector<PorcelainRecord>& records() const { return records_; }

  const PorcelainRecord* find(const std::string& id) const {
    auto it = by_id_.find(id);
    return it == by_id_.end() ? nullptr : &records_[it->second];
  }

  // Top-k records by CLIP cosine; a record with several images scores by its
  // best image. fused_score equals clip_score.
  std::vector<RetrievalHit> search_image(std::span<const float> query, std::size_t k) const {
    if (k == 0) throw Error(ErrorCode::InvalidArgument, "k must be >= 1");
    if (clip_.empty()) throw Error(ErrorCode::EmptyIndex, "image index is empty");
    check_query(query, clip_);
    auto best = best_per_record(query, clip_);
    std::vector<Scored> scored;
    scored.reserve(best.size());
    for (auto& [id, score] : best) scored.push_back({id, score, score, std::nullopt});
    return assemble(std::move(scored), k);
  }

  // Top-k records by fused dual-space score over the whole corpus.
  std::vector<RetrievalHit> search_text(std::span<const float> clip_query, std::span<const float> text_query,
                                        std::size_t k, double alpha) const {
    if (k == 0) throw Error(ErrorCode::InvalidArgument, "k must be >= 1");
    if (clip_.empty() && text_.empty()) throw Error(ErrorCode::EmptyIndex, "both indices are empty");
    if (!clip_.empty()) check_query(clip_query, clip_);
    if (!text_.empty()) check_query(text_query, text_);

    std::unordered_map<std::string, std::pair<std::optional<double>, std::optional<double>>> sides;
    if (!clip_.empty())
      for (auto& [id, s] : best_per_record(clip_query, clip_)) sides[id].first = s;
    if (!text_.empty())
      for (auto& [id, s] : best_per_record(text_query, text_)) sides[id].second = s;

    std::vector<Scored> scored;
    scored.reserve(sides.size());
    for (auto& [id, s] : sides) scored.push_back({id, fuse_scores(s.first, s.second, alpha), s.first, s.second});
    return assemble(std::move(scored), k);
  }

 private:
  struct Scored {
    std::string id;
    double fused;
    std::optional<double> clip;
    std::optional<double> text;
  };

  static void check_query(std::span<const float> q, const VectorIndex& index) {
    if (q.size() != index.dim())
      throw Error(ErrorCode::DimMismatch, "query dim " + std::to_string(q.size()) + " vs " +
                                              std::string(to_string(index.space())) + " index dim " +
                                              std::to_string(index.dim()));
  }

  static std::unordered_map<std::string, double> best_per_record(std::span<const float> q, const VectorIndex& index) {
    std::unordered_map<std::string, double> best;
    best.reserve(index.size());
    for (const auto& e : index.entries()) {
      const double s = cosine(q, e.vector);
      auto [it, inserted] = best.emplace(e.record_id, s);
      if (!inserted && s > it->second) it->second = s;
    }
    return best;
  }

  std::vector<RetrievalHit> assemble(std::vector<Scored> scored, std::size_t k) const {
    const std::size_t n = std::min(k, scored.size());
    std::partial_sort(scored.begin(), scored.begin() + static_cast<std::ptrdiff_t>(n), scored.end(),
                      [](const Scored& a, const Scored& b) { return ranks_before(a.fused, a.id, b.fused, b.id); });
    std::vector<RetrievalHit> hits;
    hits.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
      hits.push_back({*find(scored[i].id), scored[i].clip, scored[i].text, scored[i].fused});
    }
    return hits;
  }

  std::vector<PorcelainRecord> records_;
  VectorIndex clip_;
  VectorIndex text_;
  std::unordered_map<std::string, std::size_t> by_id_;
};

// Shared slot for the live engine. Readers take a snapshot; a rebuild swaps
// in a new engine without disturbing in-flight searches.
class EngineSlot {
 public:
  explicit EngineSlot(std::shared_ptr<const RetrievalEngine> engine = nullptr) : engine_(std::move(engine)) {}

  std::shared_ptr<const RetrievalEngine> get() const {
    std::lock_guard lock(mutex_);
    return engine_;
  }
  void swap_in(std::shared_ptr<const RetrievalEngine> engine) {
    std::lock_guard lock(mutex_);
    engine_ = std::move(engine);
  }

 private:
  mutable std::mutex mutex_;
  std::shared_ptr<const RetrievalEngine> engine_;
};

}  // namespace ciqi
