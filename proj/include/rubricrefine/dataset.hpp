#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

namespace rubricrefine {

enum class Split { unassigned, train, val, test };

std::string_view to_string(Split split);
Split split_from_string(std::string_view name);

/// A contiguous block of scores that share one label, e.g. 1..2 -> "low".
struct LabelRange {
  int lo = 0;
  int hi = 0;
  std::string label;
  bool operator==(const LabelRange&) const = default;
};

/// Inclusive integer score range with an optional ordered label bucketing.
struct ScoreScale {
  int min = 1;
  int max = 6;
  std::vector<LabelRange> label_mapping;

  /// Throws ConfigError unless min < max and the mapping (if any) covers
  /// [min, max] with disjoint, contiguous, ascending ranges.
  void validate() const;

  bool contains(int score) const { return score >= min && score <= max; }
  bool has_labels() const { return !label_mapping.empty(); }
  int num_categories() const { return max - min + 1; }

  /// Labels in ascending score order.
  std::vector<std::string> ordered_labels() const;

  bool operator==(const ScoreScale&) const = default;
};

/// The TOEFL11 5-point scale bucketed into low (1-2), medium (3), high (4-5).
ScoreScale toefl_scale();

/// ASAP prompt 1 single-rater scale 1..6.
ScoreScale asap_p1_scale();

struct EssayRecord {
  std::string essay_id;
  std::string prompt_id;
  std::string essay_prompt;
  std::string response;
  int human_score = 0;
  std::optional<int> second_rater_score;
  /// Set when the source only carries a level label (TOEFL11-style index).
  std::optional<std::string> human_label;
  Split split = Split::unassigned;
};

enum class CorpusFormat { asap_tsv, prompt_dir };

CorpusFormat corpus_format_from_string(std::string_view name);
std::string_view to_string(CorpusFormat format);

struct LoadOptions {
  /// ASAP column holding the primary human score.
  std::string score_column = "domain1_score";
  /// ASAP column for a second rater; empty disables it.
  std::string second_rater_column;
  /// Keep only these prompt ids (ASAP essay_set); empty keeps all.
  std::vector<std::string> prompt_ids;
  /// prompt_id -> writing task text shown to the test-taker.
  std::map<std::string, std::string> prompt_texts;
  /// Index file name inside a prompt_dir corpus.
  std::string index_file = "index.csv";
};

/// Loads an essay corpus. Errors name the offending row (1-based line
/// number in the source file).
std::vector<EssayRecord> load_corpus(const std::filesystem::path& path,
                                     CorpusFormat format,
                                     const ScoreScale& scale,
                                     const LoadOptions& options = {});

/// Replaces invalid UTF-8 sequences with U+FFFD. Returns the number of
/// replacements through `replaced` when non-null.
std::string sanitize_utf8(std::string_view bytes, std::size_t* replaced = nullptr);

struct TestSelector {
  enum class Kind { official, fraction, count };
  Kind kind = Kind::fraction;
  double fraction = 0.1;
  std::size_t count = 0;

  static TestSelector official() { return {Kind::official, 0.0, 0}; }
  static TestSelector of_fraction(double f) { return {Kind::fraction, f, 0}; }
  static TestSelector of_count(std::size_t n) { return {Kind::count, 0.0, n}; }
};

struct SplitSpec {
  std::size_t n_train = 100;
  std::size_t n_val = 100;
  TestSelector test = TestSelector::of_fraction(0.1);
  std::uint64_t rng_seed = 0;
};

/// Number of test records a fraction selector takes from `corpus_size`
/// records (rounded up, so 10% of 1783 is 179).
std::size_t test_count_for_fraction(double fraction, std::size_t corpus_size);

/// Assigns splits. Test is chosen first (or taken from the official
/// assignment), then train and val are sampled uniformly without
/// replacement from the remainder. Unchosen records become unassigned.
std::vector<EssayRecord> make_splits(std::vector<EssayRecord> corpus, const SplitSpec& spec);

/// Returns the label of the unique range containing `score`.
std::string map_score(int score, const ScoreScale& scale);

struct Splits {
  std::vector<EssayRecord> train;
  std::vector<EssayRecord> val;
  std::vector<EssayRecord> test;
};

/// Groups split-assigned records, preserving corpus order inside each group.
Splits partition(std::span<const EssayRecord> records);

/// One `{"essay_id": ..., "split": ...}` line per record.
void write_split_manifest(const std::filesystem::path& path, std::span<const EssayRecord> records);

/// essay_id -> split, read back from a manifest.
std::map<std::string, Split> read_split_manifest(const std::filesystem::path& path);

void to_json(nlohmann::json& j, const ScoreScale& scale);
void from_json(const nlohmann::json& j, ScoreScale& scale);
void to_json(nlohmann::json& j, const SplitSpec& spec);
void from_json(const nlohmann::json& j, SplitSpec& spec);

}  // namespace rubricrefine
