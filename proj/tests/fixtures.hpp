#pragma once

#include <map>

#include "ciqi/retrieval.hpp"
#include "oracles.hpp"

namespace ciqi::fixtures {

inline RetrievalEngine engine_from(const oracle::DualCorpus& c) {
  std::vector<PorcelainRecord> records;
  for (const auto& id : c.ids) {
    PorcelainRecord r;
    r.id = id;
    r.name = "record " + id;
    records.push_back(r);
  }
  VectorIndex clip(Space::Clip, c.clip_dim), text(Space::Text, c.text_dim);
  std::map<std::string, std::uint32_t> ordinals;
  for (const auto& e : c.clip) clip.add(e.id, ordinals[e.id]++, e.v);
  for (const auto& e : c.text) text.add(e.id, 0, e.v);
  return RetrievalEngine(std::move(records), std::move(clip), std::move(text));
}

inline std::vector<std::string> ids_of(const std::vector<RetrievalHit>& hits) {
  std::vector<std::string> ids;
  for (const auto& h : hits) ids.push_back(h.record.id);
  return ids;
}

}  // namespace ciqi::fixtures
