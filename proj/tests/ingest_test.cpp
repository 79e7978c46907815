#include <fstream>
#include <random>
#include <sstream>

#include <gtest/gtest.h>

#include "ciqi/ingest.hpp"
#include "ciqi/vision.hpp"
#include "fixtures.hpp"
#include "stub_encoder.hpp"
#include "test_support.hpp"

namespace ciqi {
namespace {

namespace fs = std::filesystem;
using fixtures::HashEncoder;

void write_text(const fs::path& p, const std::string& s) {
  std::ofstream out(p, std::ios::binary);
  out << s;
}

std::string rec(const std::string& id, int n_images = 1, const std::string& extra = "") {
  std::string images;
  for (int i = 0; i < n_images; ++i) images += (i ? ", " : "") + std::string("\"img/") + id + "_" + std::to_string(i) + ".png\"";
  return R"({"id": ")" + id + R"(", "name": "name of )" + id + R"(", "images": [)" + images + "]" + extra + "}";
}

TEST(LoadCorpus, ThreeLines) {
  std::istringstream in(rec("a") + "\n" + rec("b") + "\n\n" + rec("c") + "\n");
  const auto records = load_corpus(in);
  ASSERT_EQ(records.size(), 3u);
  EXPECT_EQ(records[2].id, "c");
}

TEST(LoadCorpus, DuplicateIdReportsLine) {
  std::string s;
  for (int i = 1; i <= 6; ++i) s += rec("r" + std::to_string(i)) + "\n";
  s += rec("r3") + "\n";
  std::istringstream in(s);
  try {
    load_corpus(in);
    FAIL() << "expected DuplicateId";
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::DuplicateId);
    EXPECT_EQ(e.line(), 7u);
    EXPECT_EQ(e.subject(), "r3");
  }
}

TEST(LoadCorpus, MalformedLineCarriesLineNumber) {
  std::istringstream in(rec("a") + "\n{\"id\": \"b\", \"name\": 5}\n");
  try {
    load_corpus(in);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::MalformedRecord);
    EXPECT_EQ(e.line(), 2u);
  }
}

TEST(LoadCorpus, MissingFileIsIo) {
  EXPECT_CIQI_ERROR(load_corpus(fs::path("/nonexistent/corpus.jsonl")), ErrorCode::Io);
}

TEST(LoadCorpus, TenThousandRecordsKeepCountAndOrder) {
  std::mt19937_64 rng(11);
  std::vector<PorcelainRecord> expected;
  std::string s;
  for (int i = 0; i < 10'000; ++i) {
    expected.push_back(testing_support::random_record(rng, "syn-" + std::to_string(i)));
    s += serialize_record(expected.back()) + "\n";
  }
  std::istringstream in(s);
  EXPECT_EQ(load_corpus(in), expected);
}

TEST(Manifest, ExactlyOneSourcePerSpace) {
  IngestManifest m;
  EXPECT_CIQI_ERROR(m.validate(), ErrorCode::InvalidArgument);
  m.image_vectors_path = "a";
  EXPECT_CIQI_ERROR(m.validate(), ErrorCode::InvalidArgument);
  m.text_vectors_path = "b";
  EXPECT_NO_THROW(m.validate());
  m.encoder_endpoint = "http://x";
  EXPECT_CIQI_ERROR(m.validate(), ErrorCode::InvalidArgument);
  m.text_vectors_path.reset();
  EXPECT_NO_THROW(m.validate());
  m.batch_size = 0;
  EXPECT_CIQI_ERROR(m.validate(), ErrorCode::InvalidArgument);
}

struct PrecomputedCorpus {
  fs::path dir;
  std::vector<PorcelainRecord> records;
  IngestManifest manifest;
};

PrecomputedCorpus write_precomputed(const std::string& name) {
  PrecomputedCorpus c;
  c.dir = testing_support::temp_dir(name);
  write_text(c.dir / "corpus.jsonl", rec("a", 1) + "\n" + rec("b", 3, R"(, "description": "white glaze")") + "\n");
  write_text(c.dir / "clip.jsonl", R"({"id": "a", "image": 0, "vector": [1, 0, 0]})"
                                   "\n"
                                   R"({"id": "b", "image": 0, "vector": [0, 1, 0]})"
                                   "\n"
                                   R"({"id": "b", "image": 2, "vector": [0, 0, 1]})"
                                   "\n"
                                   R"({"id": "b", "image": 1, "vector": [0, 1, 1]})"
                                   "\n");
  write_text(c.dir / "text.jsonl", R"({"id": "b", "vector": [1, 2]})"
                                   "\n"
                                   R"({"id": "a", "vector": [2, 1]})"
                                   "\n");
  c.manifest.corpus_path = c.dir / "corpus.jsonl";
  c.manifest.image_vectors_path = c.dir / "clip.jsonl";
  c.manifest.text_vectors_path = c.dir / "text.jsonl";
  c.records = load_corpus(c.manifest.corpus_path);
  return c;
}

TEST(BuildIndices, PrecomputedSizesMatchImageAndTextCounts) {
  auto c = write_precomputed("precomputed");
  const auto idx = build_indices(c.records, c.manifest, nullptr);
  EXPECT_EQ(idx.clip.size(), 4u);
  EXPECT_EQ(idx.text.size(), 2u);
  EXPECT_EQ(idx.clip.dim(), 3u);
  EXPECT_EQ(idx.text.dim(), 2u);
  // corpus order, then image ordinal, regardless of file order
  ASSERT_EQ(idx.clip.entries()[1].record_id, "b");
  EXPECT_EQ(idx.clip.entries()[1].ordinal, 0u);
  EXPECT_EQ(idx.clip.entries()[3].ordinal, 2u);
  EXPECT_EQ(idx.text.entries()[0].record_id, "a");
}

TEST(BuildIndices, MissingPrecomputedVector) {
  auto c = write_precomputed("missing");
  c.records[0].images.push_back({"img/extra.png", std::nullopt, std::nullopt});
  try {
    build_indices(c.records, c.manifest, nullptr);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::MissingVector);
    EXPECT_EQ(e.subject(), "a");
  }
}

TEST(BuildIndices, InconsistentPrecomputedDimNamesRecord) {
  auto c = write_precomputed("baddim");
  write_text(c.dir / "text.jsonl", R"({"id": "a", "vector": [1, 2]})"
                                   "\n"
                                   R"({"id": "b", "vector": [1, 2, 3]})"
                                   "\n");
  try {
    build_indices(c.records, c.manifest, nullptr);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::DimInconsistent);
    EXPECT_EQ(e.subject(), "b");
  }
}

// Writes a corpus whose images exist on disk, for encoder-backed ingest.
fs::path write_image_corpus(const std::string& name, int n_records, int images_each) {
  const auto dir = testing_support::temp_dir(name);
  fs::create_directories(dir / "img");
  std::string lines;
  for (int r = 0; r < n_records; ++r) {
    const std::string id = "p" + std::to_string(r);
    for (int i = 0; i < images_each; ++i) {
      Image img(4, 3);
      std::fill(img.pixels.begin(), img.pixels.end(), static_cast<std::uint8_t>(r * 16 + i));
      write_file_bytes(dir / "img" / (id + "_" + std::to_string(i) + ".png"), encode_png(img));
    }
    lines += rec(id, images_each) + "\n";
  }
  write_text(dir / "corpus.jsonl", lines);
  return dir;
}

TEST(BuildIndices, ThreeImagesGiveThreeClipEntriesSharingId) {
  const auto dir = write_image_corpus("three", 2, 3);
  IngestManifest m;
  m.corpus_path = dir / "corpus.jsonl";
  m.encoder_endpoint = "stub";
  m.batch_size = 2;
  HashEncoder enc(8, 5);
  const auto records = load_corpus(m.corpus_path);
  const auto idx = build_indices(records, m, &enc, dir);
  EXPECT_EQ(idx.clip.size(), 6u);
  EXPECT_EQ(idx.text.size(), 2u);
  std::size_t for_p1 = 0;
  for (const auto& e : idx.clip.entries()) for_p1 += e.record_id == "p1";
  EXPECT_EQ(for_p1, 3u);
  EXPECT_EQ(enc.batches.load(), 3 + 1);  // 6 images in pairs, 2 texts in one
}

TEST(BuildIndices, EncoderWrongDimNamesRecord) {
  const auto dir = write_image_corpus("wrongdim", 3, 1);
  IngestManifest m;
  m.corpus_path = dir / "corpus.jsonl";
  m.encoder_endpoint = "stub";
  HashEncoder enc(8, 5);
  enc.short_payload = "name of p1";
  const auto records = load_corpus(m.corpus_path);
  try {
    build_indices(records, m, &enc, dir);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::DimInconsistent);
    EXPECT_EQ(e.subject(), "p1");
  }
}

TEST(BuildIndices, UnreachableEncoder) {
  const auto dir = write_image_corpus("dead", 1, 1);
  IngestManifest m;
  m.corpus_path = dir / "corpus.jsonl";
  m.encoder_endpoint = "stub";
  fixtures::DeadEncoder dead;
  EXPECT_CIQI_ERROR(build_indices(load_corpus(m.corpus_path), m, &dead, dir), ErrorCode::EncoderUnavailable);
  EXPECT_CIQI_ERROR(build_indices(load_corpus(m.corpus_path), m, nullptr, dir), ErrorCode::EncoderUnavailable);
}

TEST(BuildIndices, MissingImageFileIsMissingVector) {
  const auto dir = write_image_corpus("noimg", 2, 1);
  fs::remove(dir / "img" / "p1_0.png");
  IngestManifest m;
  m.corpus_path = dir / "corpus.jsonl";
  m.encoder_endpoint = "stub";
  HashEncoder enc(8, 5);
  EXPECT_CIQI_ERROR(build_indices(load_corpus(m.corpus_path), m, &enc, dir), ErrorCode::MissingVector);
}

TEST(BuildIndices, TextOnlyRecordsAreAllowed) {
  const auto dir = testing_support::temp_dir("textonly");
  write_text(dir / "corpus.jsonl", R"({"id": "t1", "name": "plain text entry"})"
                                   "\n");
  IngestManifest m;
  m.corpus_path = dir / "corpus.jsonl";
  m.encoder_endpoint = "stub";
  HashEncoder enc(8, 5);
  const auto records = load_corpus(m.corpus_path);
  const auto idx = build_indices(records, m, &enc, dir);
  EXPECT_TRUE(idx.clip.empty());
  EXPECT_EQ(idx.text.size(), 1u);
  save_store(dir / "out", records, idx);
  const auto engine = load_store(dir / "out");
  EXPECT_EQ(engine.search_text(std::vector<float>(8, 1.0f), enc.vector_for(Space::Text, "plain text entry"), 1, 0.2)
                .front()
                .record.id,
            "t1");
}

TEST(Ingest, IdempotentAndRoundTripsThroughStore) {
  const auto dir = write_image_corpus("idem", 12, 2);
  write_text(dir / "exclude.txt", "# held-out benchmark ids\np3\n\np7\n");
  IngestManifest m;
  m.corpus_path = dir / "corpus.jsonl";
  m.encoder_endpoint = "stub";
  m.batch_size = 5;
  HashEncoder enc(16, 12);

  const auto r1 = run_ingest(m, dir / "out1", dir / "exclude.txt", &enc);
  run_ingest(m, dir / "out2", dir / "exclude.txt", &enc);
  EXPECT_EQ(r1.records, 10u);
  EXPECT_EQ(r1.excluded, 2u);
  EXPECT_EQ(r1.clip_entries, 20u);
  for (auto f : {kRecordsFile, kClipStoreFile, kTextStoreFile})
    EXPECT_EQ(read_file_bytes(dir / "out1" / f), read_file_bytes(dir / "out2" / f)) << f;

  // Rebuild in memory and compare query results with the persisted copy.
  auto records = exclude_ids(load_corpus(m.corpus_path), {"p3", "p7"});
  const auto idx = build_indices(records, m, &enc, dir);
  const RetrievalEngine live(records, idx.clip, idx.text);
  const auto loaded = load_store(dir / "out1");
  EXPECT_EQ(loaded.find("p3"), nullptr);
  std::mt19937_64 rng(5);
  for (int q = 0; q < 50; ++q) {
    const auto cq = testing_support::random_vector(rng, 16);
    const auto tq = testing_support::random_vector(rng, 12);
    EXPECT_EQ(fixtures::ids_of(live.search_image(cq, 5)), fixtures::ids_of(loaded.search_image(cq, 5)));
    const auto a = live.search_text(cq, tq, 5, 0.2), b = loaded.search_text(cq, tq, 5, 0.2);
    ASSERT_EQ(a.size(), b.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
      EXPECT_EQ(a[i].record, b[i].record);
      EXPECT_EQ(a[i].fused_score, b[i].fused_score);
    }
  }
}

TEST(Ingest, PrecomputedStoreFilesAreAcceptedAsInput) {
  auto c = write_precomputed("storein");
  const auto idx = build_indices(c.records, c.manifest, nullptr);
  save_vector_store(c.dir / "clip.vec", idx.clip);
  c.manifest.image_vectors_path = c.dir / "clip.vec";
  EXPECT_EQ(build_indices(c.records, c.manifest, nullptr).clip, idx.clip);
  c.manifest.text_vectors_path = c.dir / "clip.vec";
  EXPECT_CIQI_ERROR(build_indices(c.records, c.manifest, nullptr), ErrorCode::InvalidArgument);
}

}  // namespace
}  // namespace ciqi
