#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "rubricrefine/dataset.hpp"

namespace rubricrefine {

/// k x k agreement counts; rows are rater A, columns rater B.
class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(std::size_t k);

  void add(std::size_t row, std::size_t col) { ++counts_[row * k_ + col]; }
  std::int64_t at(std::size_t row, std::size_t col) const { return counts_[row * k_ + col]; }
  std::size_t k() const { return k_; }
  std::int64_t total() const;
  std::vector<std::int64_t> row_marginals() const;
  std::vector<std::int64_t> col_marginals() const;

 private:
  std::size_t k_;
  std::vector<std::int64_t> counts_;
};

struct QwkReport {
  double qwk = 0.0;
  std::size_t n = 0;
  std::size_t excluded = 0;
  /// Category values (scores, or labels for label-based reports).
  std::vector<std::string> categories;
  std::vector<std::int64_t> marginals_a;
  std::vector<std::int64_t> marginals_b;
  /// Both raters used the same single category; qwk is reported as 1.0.
  bool degenerate = false;
  /// Every pair was excluded; qwk is reported as -1.0.
  bool no_valid_pairs = false;
};

struct AggregateReport {
  double mean_qwk = 0.0;
  double std_qwk = 0.0;  // population standard deviation
  std::vector<QwkReport> runs;
};

/// Quadratic weighted kappa over the fixed category set [scale.min, scale.max].
QwkReport qwk(std::span<const int> ratings_a, std::span<const int> ratings_b,
              const ScoreScale& scale);

/// As qwk, but pairs where either side is absent are dropped and counted in
/// `excluded`. Never throws on all-missing input; see QwkReport flags.
QwkReport qwk_with_exclusions(std::span<const std::optional<int>> ratings_a,
                              std::span<const std::optional<int>> ratings_b,
                              const ScoreScale& scale);

/// QWK after mapping each label to its rank in `ordered_labels`.
QwkReport qwk_on_labels(std::span<const std::string> labels_a,
                        std::span<const std::string> labels_b,
                        std::span<const std::string> ordered_labels);

QwkReport qwk_on_labels_with_exclusions(std::span<const std::optional<std::string>> labels_a,
                                        std::span<const std::optional<std::string>> labels_b,
                                        std::span<const std::string> ordered_labels);

AggregateReport aggregate(std::span<const QwkReport> reports);

void to_json(nlohmann::json& j, const QwkReport& report);
void from_json(const nlohmann::json& j, QwkReport& report);
void to_json(nlohmann::json& j, const AggregateReport& report);
void from_json(const nlohmann::json& j, AggregateReport& report);

}  // namespace rubricrefine
