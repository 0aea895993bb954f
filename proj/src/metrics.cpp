#include "rubricrefine/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>

#include "rubricrefine/errors.hpp"

namespace rubricrefine {

using nlohmann::json;

ConfusionMatrix::ConfusionMatrix(std::size_t k) : k_(k), counts_(k * k, 0) {
  if (k < 2) throw ConfigError("confusion matrix needs at least 2 categories");
}

std::int64_t ConfusionMatrix::total() const {
  return std::accumulate(counts_.begin(), counts_.end(), std::int64_t{0});
}

std::vector<std::int64_t> ConfusionMatrix::row_marginals() const {
  std::vector<std::int64_t> m(k_, 0);
  for (std::size_t i = 0; i < k_; ++i) {
    for (std::size_t j = 0; j < k_; ++j) m[i] += at(i, j);
  }
  return m;
}

std::vector<std::int64_t> ConfusionMatrix::col_marginals() const {
  std::vector<std::int64_t> m(k_, 0);
  for (std::size_t i = 0; i < k_; ++i) {
    for (std::size_t j = 0; j < k_; ++j) m[j] += at(i, j);
  }
  return m;
}

namespace {

// kappa = 1 - sum(w*O) / sum(w*E), with w = (i-j)^2/(k-1)^2 and
// E = outer(rows, cols) / n. The (k-1)^2 factor cancels, and multiplying
// through by n leaves two integer sums, so the result is exactly symmetric
// and independent of pair order.
QwkReport kappa_from_matrix(const ConfusionMatrix& m, std::size_t excluded) {
  QwkReport report;
  report.excluded = excluded;
  report.marginals_a = m.row_marginals();
  report.marginals_b = m.col_marginals();
  const std::int64_t n = m.total();
  report.n = static_cast<std::size_t>(n);
  if (n == 0) {
    report.no_valid_pairs = true;
    report.qwk = -1.0;
    return report;
  }
  const auto k = m.k();
  std::int64_t observed = 0;
  std::int64_t expected = 0;
  for (std::size_t i = 0; i < k; ++i) {
    for (std::size_t j = 0; j < k; ++j) {
      const auto d = static_cast<std::int64_t>(i) - static_cast<std::int64_t>(j);
      observed += d * d * m.at(i, j);
      expected += d * d * report.marginals_a[i] * report.marginals_b[j];
    }
  }
  if (expected == 0) {
    // Both raters put every item in the same single category.
    report.degenerate = true;
    report.qwk = 1.0;
    return report;
  }
  report.qwk = 1.0 - (static_cast<double>(observed) * static_cast<double>(n)) /
                         static_cast<double>(expected);
  return report;
}

std::vector<std::string> score_categories(const ScoreScale& scale) {
  std::vector<std::string> cats;
  for (int s = scale.min; s <= scale.max; ++s) cats.push_back(std::to_string(s));
  return cats;
}

void check_lengths(std::size_t a, std::size_t b) {
  if (a != b) {
    throw ConfigError("rating vectors differ in length: " + std::to_string(a) + " vs " +
                      std::to_string(b));
  }
  if (a == 0) throw ConfigError("rating vectors are empty");
}

std::size_t score_index(int value, const ScoreScale& scale) {
  if (!scale.contains(value)) {
    throw ConfigError("rating " + std::to_string(value) + " outside scale " +
                      std::to_string(scale.min) + ".." + std::to_string(scale.max));
  }
  return static_cast<std::size_t>(value - scale.min);
}

std::map<std::string, std::size_t> label_ranks(std::span<const std::string> ordered) {
  if (ordered.size() < 2) throw ConfigError("label QWK needs at least 2 ordered labels");
  std::map<std::string, std::size_t> ranks;
  for (std::size_t i = 0; i < ordered.size(); ++i) {
    if (!ranks.emplace(ordered[i], i).second) {
      throw ConfigError("ordered labels repeat '" + ordered[i] + "'");
    }
  }
  return ranks;
}

std::size_t rank_of(const std::map<std::string, std::size_t>& ranks, const std::string& label) {
  const auto it = ranks.find(label);
  if (it == ranks.end()) throw ConfigError("unknown label '" + label + "'");
  return it->second;
}

}  // namespace

QwkReport qwk(std::span<const int> a, std::span<const int> b, const ScoreScale& scale) {
  scale.validate();
  check_lengths(a.size(), b.size());
  ConfusionMatrix m(static_cast<std::size_t>(scale.num_categories()));
  for (std::size_t i = 0; i < a.size(); ++i) m.add(score_index(a[i], scale), score_index(b[i], scale));
  auto report = kappa_from_matrix(m, 0);
  report.categories = score_categories(scale);
  return report;
}

QwkReport qwk_with_exclusions(std::span<const std::optional<int>> a,
                              std::span<const std::optional<int>> b, const ScoreScale& scale) {
  scale.validate();
  if (a.size() != b.size()) check_lengths(a.size(), b.size());
  if (a.empty()) throw ConfigError("rating vectors are empty");
  ConfusionMatrix m(static_cast<std::size_t>(scale.num_categories()));
  std::size_t excluded = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (!a[i] || !b[i]) {
      ++excluded;
      continue;
    }
    m.add(score_index(*a[i], scale), score_index(*b[i], scale));
  }
  auto report = kappa_from_matrix(m, excluded);
  report.categories = score_categories(scale);
  return report;
}

QwkReport qwk_on_labels(std::span<const std::string> a, std::span<const std::string> b,
                        std::span<const std::string> ordered_labels) {
  const auto ranks = label_ranks(ordered_labels);
  check_lengths(a.size(), b.size());
  ConfusionMatrix m(ordered_labels.size());
  for (std::size_t i = 0; i < a.size(); ++i) m.add(rank_of(ranks, a[i]), rank_of(ranks, b[i]));
  auto report = kappa_from_matrix(m, 0);
  report.categories.assign(ordered_labels.begin(), ordered_labels.end());
  return report;
}

QwkReport qwk_on_labels_with_exclusions(std::span<const std::optional<std::string>> a,
                                        std::span<const std::optional<std::string>> b,
                                        std::span<const std::string> ordered_labels) {
  const auto ranks = label_ranks(ordered_labels);
  if (a.size() != b.size()) check_lengths(a.size(), b.size());
  if (a.empty()) throw ConfigError("label vectors are empty");
  ConfusionMatrix m(ordered_labels.size());
  std::size_t excluded = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (!a[i] || !b[i]) {
      ++excluded;
      continue;
    }
    m.add(rank_of(ranks, *a[i]), rank_of(ranks, *b[i]));
  }
  auto report = kappa_from_matrix(m, excluded);
  report.categories.assign(ordered_labels.begin(), ordered_labels.end());
  return report;
}

AggregateReport aggregate(std::span<const QwkReport> reports) {
  if (reports.empty()) throw ConfigError("cannot aggregate zero QWK reports");
  AggregateReport out;
  out.runs.assign(reports.begin(), reports.end());
  // Identical runs report their value and zero spread exactly, without
  // rounding noise from the summation.
  if (std::all_of(reports.begin(), reports.end(), [&](const QwkReport& r) { return r.qwk == reports[0].qwk; })) {
    out.mean_qwk = reports[0].qwk;
    out.std_qwk = 0.0;
    return out;
  }
  double sum = 0.0;
  for (const auto& r : reports) sum += r.qwk;
  const double n = static_cast<double>(reports.size());
  out.mean_qwk = sum / n;
  double ss = 0.0;
  for (const auto& r : reports) ss += (r.qwk - out.mean_qwk) * (r.qwk - out.mean_qwk);
  out.std_qwk = std::sqrt(ss / n);
  return out;
}

void to_json(json& j, const QwkReport& r) {
  j = json{{"qwk", r.qwk},
           {"n", r.n},
           {"excluded", r.excluded},
           {"categories", r.categories},
           {"marginals_a", r.marginals_a},
           {"marginals_b", r.marginals_b},
           {"degenerate", r.degenerate},
           {"no_valid_pairs", r.no_valid_pairs}};
}

void from_json(const json& j, QwkReport& r) {
  r = QwkReport{};
  j.at("qwk").get_to(r.qwk);
  j.at("n").get_to(r.n);
  j.at("excluded").get_to(r.excluded);
  if (j.contains("categories")) j.at("categories").get_to(r.categories);
  if (j.contains("marginals_a")) j.at("marginals_a").get_to(r.marginals_a);
  if (j.contains("marginals_b")) j.at("marginals_b").get_to(r.marginals_b);
  r.degenerate = j.value("degenerate", false);
  r.no_valid_pairs = j.value("no_valid_pairs", false);
}

void to_json(json& j, const AggregateReport& r) {
  j = json{{"mean_qwk", r.mean_qwk}, {"std_qwk", r.std_qwk}, {"runs", r.runs}};
}

void from_json(const json& j, AggregateReport& r) {
  r = AggregateReport{};
  j.at("mean_qwk").get_to(r.mean_qwk);
  j.at("std_qwk").get_to(r.std_qwk);
  if (j.contains("runs")) j.at("runs").get_to(r.runs);
}

}  // namespace rubricrefine
