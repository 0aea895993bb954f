#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <set>

#include "rubricrefine/dataset.hpp"
#include "rubricrefine/errors.hpp"
#include "support/synthetic.hpp"
#include "support/temp_dir.hpp"

using namespace rubricrefine;
using testing_support::TempDir;

namespace {

const char* kAsapHeader = "essay_id\tessay_set\tessay\trater1_domain1\trater2_domain1\tdomain1_score\n";

std::string asap_row(const std::string& id, const std::string& set, const std::string& essay,
                     const std::string& r1, const std::string& r2, const std::string& score) {
  return id + "\t" + set + "\t" + essay + "\t" + r1 + "\t" + r2 + "\t" + score + "\n";
}

std::vector<EssayRecord> corpus_of(int n) { return testing_support::synthetic_essays(n, 1, 6); }

std::string error_of(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const std::exception& e) {
    return e.what();
  }
  return "";
}

}  // namespace

TEST_CASE("TOEFL label mapping is exhaustive") {
  const auto s = toefl_scale();
  CHECK_NOTHROW(s.validate());
  CHECK(map_score(1, s) == "low");
  CHECK(map_score(2, s) == "low");
  CHECK(map_score(3, s) == "medium");
  CHECK(map_score(4, s) == "high");
  CHECK(map_score(5, s) == "high");
  CHECK(s.ordered_labels() == std::vector<std::string>{"low", "medium", "high"});
  CHECK_THROWS_AS(map_score(0, s), ConfigError);
  CHECK_THROWS_AS(map_score(6, s), ConfigError);
  CHECK_THROWS_AS(map_score(3, asap_p1_scale()), ConfigError);
}

TEST_CASE("label mapping preserves order") {
  const auto s = toefl_scale();
  const auto order = s.ordered_labels();
  auto rank = [&](int v) { return std::find(order.begin(), order.end(), map_score(v, s)) - order.begin(); };
  for (int a = s.min; a <= s.max; ++a) {
    for (int b = a; b <= s.max; ++b) CHECK(rank(a) <= rank(b));
  }
}

TEST_CASE("scale validation") {
  CHECK_NOTHROW(asap_p1_scale().validate());
  CHECK_THROWS_AS((ScoreScale{3, 3, {}}.validate()), ConfigError);
  CHECK_THROWS_AS((ScoreScale{1, 5, {{1, 2, "low"}, {4, 5, "high"}}}.validate()), ConfigError);
  CHECK_THROWS_AS((ScoreScale{1, 5, {{1, 3, "low"}, {3, 5, "high"}}}.validate()), ConfigError);
  CHECK_THROWS_AS((ScoreScale{1, 5, {{1, 2, "low"}, {3, 4, "high"}}}.validate()), ConfigError);
  CHECK_THROWS_AS((ScoreScale{1, 5, {{1, 2, "low"}, {3, 5, "low"}}}.validate()), ConfigError);
}

TEST_CASE("scale JSON round trip") {
  const nlohmann::json j = toefl_scale();
  CHECK(j.get<ScoreScale>() == toefl_scale());
}

TEST_CASE("ASAP loader") {
  TempDir dir;
  SUBCASE("prompt 1 row") {
    const auto path = dir.write("train.tsv", std::string(kAsapHeader) +
                                                 asap_row("1", "1", "Dear editor, computers help.", "2", "2", "4") +
                                                 asap_row("2", "2", "Another prompt.", "1", "1", "2"));
    LoadOptions opts;
    opts.prompt_ids = {"1"};
    opts.prompt_texts["1"] = "Write a letter.";
    const auto recs = load_corpus(path, CorpusFormat::asap_tsv, asap_p1_scale(), opts);
    REQUIRE(recs.size() == 1);
    CHECK(recs[0].essay_id == "1");
    CHECK(recs[0].human_score == 4);
    CHECK(recs[0].essay_prompt == "Write a letter.");
    CHECK(recs[0].response == "Dear editor, computers help.");
    CHECK_FALSE(recs[0].second_rater_score);
  }
  SUBCASE("second rater column") {
    const auto path = dir.write("train.tsv", std::string(kAsapHeader) + asap_row("1", "1", "Text.", "3", "4", "7"));
    LoadOptions opts;
    opts.score_column = "rater1_domain1";
    opts.second_rater_column = "rater2_domain1";
    const auto recs = load_corpus(path, CorpusFormat::asap_tsv, asap_p1_scale(), opts);
    REQUIRE(recs.size() == 1);
    CHECK(recs[0].human_score == 3);
    CHECK(recs[0].second_rater_score == 4);
  }
  SUBCASE("header only") {
    const auto path = dir.write("train.tsv", kAsapHeader);
    CHECK(load_corpus(path, CorpusFormat::asap_tsv, asap_p1_scale()).empty());
  }
  SUBCASE("out of range score names the row") {
    const auto path = dir.write("train.tsv", std::string(kAsapHeader) + asap_row("1", "1", "a", "2", "2", "4") +
                                                 asap_row("2", "1", "b", "2", "2", "3") +
                                                 asap_row("3", "1", "c", "2", "2", "9"));
    const auto msg = error_of([&] { load_corpus(path, CorpusFormat::asap_tsv, asap_p1_scale()); });
    CHECK(msg.find("train.tsv row 4") != std::string::npos);
    CHECK(msg.find("9") != std::string::npos);
    CHECK_THROWS_AS(load_corpus(path, CorpusFormat::asap_tsv, asap_p1_scale()), DataError);
  }
  SUBCASE("duplicate ids") {
    const auto path = dir.write("train.tsv", std::string(kAsapHeader) + asap_row("1", "1", "a", "2", "2", "4") +
                                                 asap_row("1", "1", "b", "2", "2", "3"));
    const auto msg = error_of([&] { load_corpus(path, CorpusFormat::asap_tsv, asap_p1_scale()); });
    CHECK(msg.find("duplicate essay_id '1'") != std::string::npos);
  }
  SUBCASE("malformed rows") {
    const auto short_row = dir.write("short.tsv", std::string(kAsapHeader) + "1\t1\tessay\n");
    CHECK_THROWS_AS(load_corpus(short_row, CorpusFormat::asap_tsv, asap_p1_scale()), DataError);
    const auto bad_score = dir.write("bad.tsv", std::string(kAsapHeader) + asap_row("1", "1", "a", "2", "2", "four"));
    CHECK_THROWS_AS(load_corpus(bad_score, CorpusFormat::asap_tsv, asap_p1_scale()), DataError);
    const auto empty_essay = dir.write("empty.tsv", std::string(kAsapHeader) + asap_row("1", "1", " ", "2", "2", "4"));
    CHECK_THROWS_AS(load_corpus(empty_essay, CorpusFormat::asap_tsv, asap_p1_scale()), DataError);
    const auto no_col = dir.write("nocol.tsv", "essay_id\tessay_set\tessay\n1\t1\ta\n");
    CHECK_THROWS_AS(load_corpus(no_col, CorpusFormat::asap_tsv, asap_p1_scale()), DataError);
  }
  SUBCASE("missing file") {
    CHECK_THROWS_AS(load_corpus(dir / "nope.tsv", CorpusFormat::asap_tsv, asap_p1_scale()), IoError);
  }
  SUBCASE("invalid UTF-8 is replaced") {
    const auto path = dir.write("train.tsv", std::string(kAsapHeader) + asap_row("1", "1", "caf\xe9 text", "2", "2", "4"));
    const auto recs = load_corpus(path, CorpusFormat::asap_tsv, asap_p1_scale());
    REQUIRE(recs.size() == 1);
    CHECK(recs[0].response == "caf\xef\xbf\xbd text");
  }
}

TEST_CASE("prompt directory loader") {
  TempDir dir;
  dir.write("essays/a.txt", "First essay.");
  dir.write("essays/b.txt", "Second essay.");
  dir.write("essays/c.txt", "Third essay.");
  dir.write("index.csv",
            "filename,prompt_id,score,split\n"
            "essays/a.txt,P1,high,train\n"
            "essays/b.txt,P1,low,test\n"
            "essays/c.txt,P2,3,dev\n");
  LoadOptions opts;
  opts.prompt_texts["P1"] = "Agree or disagree?";
  const auto recs = load_corpus(dir.path(), CorpusFormat::prompt_dir, toefl_scale(), opts);
  REQUIRE(recs.size() == 3);
  CHECK(recs[0].essay_id == "a");
  CHECK(recs[0].human_label == "high");
  CHECK(recs[0].human_score == 4);
  CHECK(recs[0].essay_prompt == "Agree or disagree?");
  CHECK(recs[0].split == Split::unassigned);
  CHECK(recs[1].human_label == "low");
  CHECK(recs[1].split == Split::test);
  CHECK(recs[2].human_score == 3);
  CHECK_FALSE(recs[2].human_label);

  SUBCASE("official split keeps the test assignment") {
    SplitSpec spec{1, 1, TestSelector::official(), 5};
    const auto split = make_splits(recs, spec);
    CHECK(split[1].split == Split::test);
    CHECK(split[0].split != Split::test);
    CHECK(split[2].split != Split::test);
    CHECK(split[0].split != split[2].split);
  }
  SUBCASE("unknown label") {
    dir.write("index.csv", "filename,prompt_id,score\nessays/a.txt,P1,excellent\n");
    CHECK_THROWS_AS(load_corpus(dir.path(), CorpusFormat::prompt_dir, toefl_scale()), DataError);
  }
}

TEST_CASE("sanitize_utf8") {
  std::size_t n = 0;
  CHECK(sanitize_utf8("plain ascii", &n) == "plain ascii");
  CHECK(n == 0);
  CHECK(sanitize_utf8("\xc3\xa9t\xc3\xa9", &n) == "\xc3\xa9t\xc3\xa9");
  CHECK(n == 0);
  CHECK(sanitize_utf8("a\xff" "b", &n) == "a\xef\xbf\xbd" "b");
  CHECK(n == 1);
  CHECK(sanitize_utf8("\xe2\x82", &n).find("\xef\xbf\xbd") != std::string::npos);
}

TEST_CASE("split sizes and disjointness") {
  const auto corpus = corpus_of(2000);
  const auto out = make_splits(corpus, SplitSpec{100, 100, TestSelector::of_fraction(0.10), 42});
  const auto s = partition(out);
  CHECK(s.test.size() == 200);
  CHECK(s.train.size() == 100);
  CHECK(s.val.size() == 100);
  std::set<std::string> seen;
  for (const auto* group : {&s.train, &s.val, &s.test}) {
    for (const auto& r : *group) CHECK(seen.insert(r.essay_id).second);
  }
  CHECK(seen.size() == 400);
}

TEST_CASE("degenerate split puts everything in test") {
  const auto out = make_splits(corpus_of(37), SplitSpec{0, 0, TestSelector::of_fraction(1.0), 1});
  CHECK(partition(out).test.size() == 37);
}

TEST_CASE("splits are a function of the seed") {
  const auto corpus = corpus_of(300);
  const SplitSpec spec{50, 50, TestSelector::of_count(30), 9};
  const auto a = make_splits(corpus, spec);
  const auto b = make_splits(corpus, spec);
  auto other = spec;
  other.rng_seed = 10;
  const auto c = make_splits(corpus, other);
  bool differs = false;
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    CHECK(a[i].split == b[i].split);
    differs = differs || a[i].split != c[i].split;
  }
  CHECK(differs);
}

TEST_CASE("fraction rounding") {
  CHECK(test_count_for_fraction(0.1, 1783) == 179);
  CHECK(test_count_for_fraction(0.1, 2000) == 200);
  CHECK(test_count_for_fraction(1.0, 5) == 5);
  CHECK_THROWS_AS(test_count_for_fraction(0.0, 10), ConfigError);
  CHECK_THROWS_AS(test_count_for_fraction(1.5, 10), ConfigError);
}

TEST_CASE("unsatisfiable split") {
  const auto corpus = corpus_of(100);
  const auto msg = error_of([&] { make_splits(corpus, SplitSpec{50, 50, TestSelector::of_fraction(0.1), 0}); });
  CHECK(msg.find("50 + 50") != std::string::npos);
  CHECK(msg.find("90") != std::string::npos);
  CHECK_THROWS_AS(make_splits(corpus, SplitSpec{1, 1, TestSelector::of_count(101), 0}), ConfigError);
}

TEST_CASE("split properties over many seeds") {
  const auto corpus = corpus_of(120);
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    const std::size_t n_train = seed % 40, n_val = (seed * 7) % 40;
    const auto out = make_splits(corpus, SplitSpec{n_train, n_val, TestSelector::of_fraction(0.25), seed});
    const auto s = partition(out);
    CHECK(s.train.size() == n_train);
    CHECK(s.val.size() == n_val);
    CHECK(s.test.size() == 30);
    CHECK(out.size() == corpus.size());
    for (std::size_t i = 0; i < corpus.size(); ++i) CHECK(out[i].essay_id == corpus[i].essay_id);
  }
}

TEST_CASE("split manifest round trip") {
  TempDir dir;
  const auto out = make_splits(corpus_of(40), SplitSpec{10, 10, TestSelector::of_count(5), 3});
  write_split_manifest(dir / "splits.jsonl", out);
  const auto back = read_split_manifest(dir / "splits.jsonl");
  REQUIRE(back.size() == out.size());
  for (const auto& r : out) CHECK(back.at(r.essay_id) == r.split);

  dir.write("bad.jsonl", "{\"essay_id\": \"a\", \"split\": \"train\"}\nnot json\n");
  const auto msg = error_of([&] { read_split_manifest(dir / "bad.jsonl"); });
  CHECK(msg.find("bad.jsonl row 2") != std::string::npos);
}

TEST_CASE("split spec JSON") {
  const SplitSpec spec{10, 20, TestSelector::of_count(7), 99};
  const nlohmann::json j = spec;
  const auto back = j.get<SplitSpec>();
  CHECK(back.n_train == 10);
  CHECK(back.n_val == 20);
  CHECK(back.test.kind == TestSelector::Kind::count);
  CHECK(back.test.count == 7);
  CHECK(back.rng_seed == 99);
  CHECK_THROWS_AS(nlohmann::json::parse(R"({"test": {"kind": "random"}})").get<SplitSpec>(), ConfigError);
}
