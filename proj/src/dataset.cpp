#include "rubricrefine/dataset.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <iostream>
#include <set>
#include <sstream>

#include "rubricrefine/errors.hpp"
#include "rubricrefine/random.hpp"

namespace rubricrefine {

namespace fs = std::filesystem;
using nlohmann::json;

std::string_view to_string(Split split) {
  switch (split) {
    case Split::unassigned: return "unassigned";
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
  }
  return "unassigned";
}

Split split_from_string(std::string_view name) {
  if (name == "train") return Split::train;
  if (name == "val" || name == "dev" || name == "validation") return Split::val;
  if (name == "test") return Split::test;
  if (name.empty() || name == "unassigned") return Split::unassigned;
  throw ConfigError("unknown split '" + std::string(name) + "'");
}

CorpusFormat corpus_format_from_string(std::string_view name) {
  if (name == "asap_tsv") return CorpusFormat::asap_tsv;
  if (name == "prompt_dir") return CorpusFormat::prompt_dir;
  throw ConfigError("unknown corpus format '" + std::string(name) + "'");
}

std::string_view to_string(CorpusFormat format) {
  return format == CorpusFormat::asap_tsv ? "asap_tsv" : "prompt_dir";
}

void ScoreScale::validate() const {
  if (min >= max) {
    throw ConfigError("score scale needs min < max, got " + std::to_string(min) + ".." +
                      std::to_string(max));
  }
  if (label_mapping.empty()) return;
  int expected = min;
  std::set<std::string> seen;
  for (const auto& range : label_mapping) {
    if (range.lo != expected || range.hi < range.lo) {
      throw ConfigError("label mapping must cover " + std::to_string(min) + ".." +
                        std::to_string(max) + " with contiguous ascending ranges; bad range " +
                        std::to_string(range.lo) + ".." + std::to_string(range.hi));
    }
    if (range.label.empty() || !seen.insert(range.label).second) {
      throw ConfigError("label mapping has an empty or repeated label '" + range.label + "'");
    }
    expected = range.hi + 1;
  }
  if (expected != max + 1) {
    throw ConfigError("label mapping stops at " + std::to_string(expected - 1) + ", scale max is " +
                      std::to_string(max));
  }
}

std::vector<std::string> ScoreScale::ordered_labels() const {
  std::vector<std::string> labels;
  labels.reserve(label_mapping.size());
  for (const auto& r : label_mapping) labels.push_back(r.label);
  return labels;
}

ScoreScale toefl_scale() {
  return ScoreScale{1, 5, {{1, 2, "low"}, {3, 3, "medium"}, {4, 5, "high"}}};
}

ScoreScale asap_p1_scale() { return ScoreScale{1, 6, {}}; }

std::string map_score(int score, const ScoreScale& scale) {
  if (!scale.has_labels()) throw ConfigError("score scale has no label mapping");
  if (!scale.contains(score)) {
    throw ConfigError("score " + std::to_string(score) + " outside scale " +
                      std::to_string(scale.min) + ".." + std::to_string(scale.max));
  }
  for (const auto& r : scale.label_mapping) {
    if (score >= r.lo && score <= r.hi) return r.label;
  }
  throw ConfigError("label mapping does not cover score " + std::to_string(score));
}

std::string sanitize_utf8(std::string_view bytes, std::size_t* replaced) {
  static constexpr std::string_view kReplacement = "\xEF\xBF\xBD";
  std::string out;
  out.reserve(bytes.size());
  std::size_t count = 0;
  std::size_t i = 0;
  const auto n = bytes.size();
  auto byte = [&](std::size_t k) { return static_cast<unsigned char>(bytes[k]); };
  while (i < n) {
    const unsigned char c = byte(i);
    std::size_t len = 0;
    std::uint32_t cp = 0;
    if (c < 0x80) {
      out.push_back(static_cast<char>(c));
      ++i;
      continue;
    } else if ((c & 0xE0) == 0xC0) {
      len = 2;
      cp = c & 0x1F;
    } else if ((c & 0xF0) == 0xE0) {
      len = 3;
      cp = c & 0x0F;
    } else if ((c & 0xF8) == 0xF0) {
      len = 4;
      cp = c & 0x07;
    }
    bool valid = len != 0 && i + len <= n;
    for (std::size_t k = 1; valid && k < len; ++k) {
      if ((byte(i + k) & 0xC0) != 0x80) {
        valid = false;
      } else {
        cp = (cp << 6) | (byte(i + k) & 0x3F);
      }
    }
    if (valid) {
      // Overlong encodings, surrogates and out-of-range code points.
      static constexpr std::uint32_t kMinForLen[] = {0, 0, 0x80, 0x800, 0x10000};
      if (cp < kMinForLen[len] || cp > 0x10FFFF || (cp >= 0xD800 && cp <= 0xDFFF)) valid = false;
    }
    if (valid) {
      out.append(bytes.substr(i, len));
      i += len;
    } else {
      out.append(kReplacement);
      ++count;
      ++i;
    }
  }
  if (replaced != nullptr) *replaced = count;
  return out;
}

namespace {

std::string trim(std::string_view s) {
  const auto* ws = " \t\r\n\f\v";
  const auto b = s.find_first_not_of(ws);
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(ws);
  return std::string(s.substr(b, e - b + 1));
}

std::vector<std::string> split_fields(std::string_view line, char sep) {
  std::vector<std::string> fields;
  std::size_t start = 0;
  for (;;) {
    const auto pos = line.find(sep, start);
    if (pos == std::string_view::npos) {
      fields.emplace_back(line.substr(start));
      break;
    }
    fields.emplace_back(line.substr(start, pos - start));
    start = pos + 1;
  }
  return fields;
}

/// Minimal CSV field splitter: commas, double-quoted fields with "" escapes.
std::vector<std::string> split_csv(std::string_view line) {
  std::vector<std::string> fields;
  std::string cur;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
        cur.push_back('"');
        ++i;
      } else if (c == '"') {
        quoted = false;
      } else {
        cur.push_back(c);
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      fields.push_back(std::move(cur));
      cur.clear();
    } else {
      cur.push_back(c);
    }
  }
  fields.push_back(std::move(cur));
  return fields;
}

std::optional<int> parse_int(std::string_view text) {
  const auto t = trim(text);
  if (t.empty()) return std::nullopt;
  int value = 0;
  const auto* end = t.data() + t.size();
  auto [ptr, ec] = std::from_chars(t.data(), end, value);
  if (ec != std::errc{} || ptr != end) return std::nullopt;
  return value;
}

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::vector<std::string> lines_of(const std::string& text) {
  std::vector<std::string> lines;
  std::size_t start = 0;
  while (start < text.size()) {
    auto pos = text.find('\n', start);
    if (pos == std::string::npos) pos = text.size();
    std::string line = text.substr(start, pos - start);
    if (!line.empty() && line.back() == '\r') line.pop_back();
    lines.push_back(std::move(line));
    start = pos + 1;
  }
  return lines;
}

std::string row_label(const fs::path& path, std::size_t line_no) {
  return path.filename().string() + " row " + std::to_string(line_no);
}

void check_unique(std::set<std::string>& ids, const std::string& id, const std::string& where) {
  if (!ids.insert(id).second) throw DataError(where + ": duplicate essay_id '" + id + "'");
}

std::vector<EssayRecord> load_asap(const fs::path& path, const ScoreScale& scale,
                                   const LoadOptions& options) {
  std::size_t replaced = 0;
  const auto text = sanitize_utf8(read_file(path), &replaced);
  if (replaced > 0) {
    std::clog << "warning: " << path.string() << ": replaced " << replaced
              << " invalid UTF-8 byte(s)\n";
  }
  const auto lines = lines_of(text);
  if (lines.empty()) throw DataError(path.string() + ": missing header row");

  const auto header = split_fields(lines[0], '\t');
  auto column = [&](const std::string& name, bool required) -> std::optional<std::size_t> {
    for (std::size_t i = 0; i < header.size(); ++i) {
      if (trim(header[i]) == name) return i;
    }
    if (required) throw DataError(path.string() + ": header lacks column '" + name + "'");
    return std::nullopt;
  };
  const auto id_col = *column("essay_id", true);
  const auto set_col = *column("essay_set", true);
  const auto essay_col = *column("essay", true);
  const auto score_col = *column(options.score_column, true);
  std::optional<std::size_t> second_col;
  if (!options.second_rater_column.empty()) second_col = column(options.second_rater_column, true);

  const std::set<std::string> keep(options.prompt_ids.begin(), options.prompt_ids.end());
  std::set<std::string> ids;
  std::vector<EssayRecord> records;
  for (std::size_t li = 1; li < lines.size(); ++li) {
    const auto& line = lines[li];
    if (trim(line).empty()) continue;
    const auto where = row_label(path, li + 1);
    const auto fields = split_fields(line, '\t');
    if (fields.size() < header.size()) {
      throw DataError(where + ": malformed row, expected " + std::to_string(header.size()) +
                      " fields, found " + std::to_string(fields.size()));
    }
    EssayRecord rec;
    rec.essay_id = trim(fields[id_col]);
    rec.prompt_id = trim(fields[set_col]);
    if (!keep.empty() && !keep.contains(rec.prompt_id)) continue;
    if (rec.essay_id.empty()) throw DataError(where + ": empty essay_id");
    rec.response = trim(fields[essay_col]);
    if (rec.response.empty()) throw DataError(where + ": empty essay text");
    const auto score = parse_int(fields[score_col]);
    if (!score) {
      throw DataError(where + ": malformed " + options.score_column + " '" + fields[score_col] + "'");
    }
    if (!scale.contains(*score)) {
      throw DataError(where + ": " + options.score_column + "=" + std::to_string(*score) +
                      " outside scale " + std::to_string(scale.min) + ".." +
                      std::to_string(scale.max));
    }
    rec.human_score = *score;
    if (second_col) {
      const auto& raw = fields[*second_col];
      if (!trim(raw).empty()) {
        const auto second = parse_int(raw);
        if (!second || !scale.contains(*second)) {
          throw DataError(where + ": bad " + options.second_rater_column + " '" + raw + "'");
        }
        rec.second_rater_score = second;
      }
    }
    if (auto it = options.prompt_texts.find(rec.prompt_id); it != options.prompt_texts.end()) {
      rec.essay_prompt = it->second;
    }
    check_unique(ids, rec.essay_id, where);
    records.push_back(std::move(rec));
  }
  return records;
}

std::vector<EssayRecord> load_prompt_dir(const fs::path& dir, const ScoreScale& scale,
                                         const LoadOptions& options) {
  if (!fs::is_directory(dir)) throw IoError(dir.string() + " is not a directory");
  const auto index_path = dir / options.index_file;
  const auto lines = lines_of(sanitize_utf8(read_file(index_path)));
  if (lines.empty()) throw DataError(index_path.string() + ": missing header row");

  const auto header = split_csv(lines[0]);
  auto column = [&](std::initializer_list<std::string_view> names) -> std::optional<std::size_t> {
    for (std::size_t i = 0; i < header.size(); ++i) {
      const auto h = trim(header[i]);
      for (auto n : names) {
        if (h == n) return i;
      }
    }
    return std::nullopt;
  };
  const auto file_col = column({"filename", "file"});
  const auto prompt_col = column({"prompt_id", "prompt"});
  const auto score_col = column({"score", "level"});
  const auto split_col = column({"split"});
  const auto id_col = column({"essay_id"});
  if (!file_col || !prompt_col || !score_col) {
    throw DataError(index_path.string() + ": header needs filename, prompt_id and score columns");
  }

  const std::set<std::string> keep(options.prompt_ids.begin(), options.prompt_ids.end());
  std::set<std::string> ids;
  std::vector<EssayRecord> records;
  for (std::size_t li = 1; li < lines.size(); ++li) {
    if (trim(lines[li]).empty()) continue;
    const auto where = row_label(index_path, li + 1);
    const auto fields = split_csv(lines[li]);
    if (fields.size() < header.size()) {
      throw DataError(where + ": malformed row, expected " + std::to_string(header.size()) +
                      " fields, found " + std::to_string(fields.size()));
    }
    EssayRecord rec;
    const auto filename = trim(fields[*file_col]);
    rec.prompt_id = trim(fields[*prompt_col]);
    if (!keep.empty() && !keep.contains(rec.prompt_id)) continue;
    rec.essay_id = id_col ? trim(fields[*id_col]) : fs::path(filename).stem().string();
    if (rec.essay_id.empty()) throw DataError(where + ": empty essay id");

    const auto score_text = trim(fields[*score_col]);
    if (const auto score = parse_int(score_text)) {
      if (!scale.contains(*score)) {
        throw DataError(where + ": score " + std::to_string(*score) + " outside scale " +
                        std::to_string(scale.min) + ".." + std::to_string(scale.max));
      }
      rec.human_score = *score;
    } else {
      // Level-only labels (e.g. low/medium/high) resolve through the mapping;
      // the numeric score becomes the lowest score of the matching range.
      const auto it = std::find_if(scale.label_mapping.begin(), scale.label_mapping.end(),
                                   [&](const LabelRange& r) { return r.label == score_text; });
      if (it == scale.label_mapping.end()) {
        throw DataError(where + ": score '" + score_text + "' is neither an integer nor a known label");
      }
      rec.human_score = it->lo;
      rec.human_label = it->label;
    }
    if (split_col) rec.split = split_from_string(trim(fields[*split_col]));
    if (rec.split != Split::test) rec.split = Split::unassigned;

    std::size_t replaced = 0;
    rec.response = trim(sanitize_utf8(read_file(dir / filename), &replaced));
    if (replaced > 0) {
      std::clog << "warning: " << filename << ": replaced " << replaced << " invalid UTF-8 byte(s)\n";
    }
    if (rec.response.empty()) throw DataError(where + ": essay file '" + filename + "' is empty");
    if (auto it = options.prompt_texts.find(rec.prompt_id); it != options.prompt_texts.end()) {
      rec.essay_prompt = it->second;
    }
    check_unique(ids, rec.essay_id, where);
    records.push_back(std::move(rec));
  }
  return records;
}

}  // namespace

std::vector<EssayRecord> load_corpus(const fs::path& path, CorpusFormat format,
                                     const ScoreScale& scale, const LoadOptions& options) {
  scale.validate();
  if (!fs::exists(path)) throw IoError("corpus not found: " + path.string());
  return format == CorpusFormat::asap_tsv ? load_asap(path, scale, options)
                                          : load_prompt_dir(path, scale, options);
}

std::size_t test_count_for_fraction(double fraction, std::size_t corpus_size) {
  if (!(fraction > 0.0 && fraction <= 1.0)) {
    throw ConfigError("test fraction must lie in (0, 1], got " + std::to_string(fraction));
  }
  const double raw = fraction * static_cast<double>(corpus_size);
  // Guard against 0.1 * 2000 = 200.00000000000003 rounding up to 201.
  const auto count = static_cast<std::size_t>(std::ceil(raw - 1e-9));
  return std::min(count, corpus_size);
}

std::vector<EssayRecord> make_splits(std::vector<EssayRecord> corpus, const SplitSpec& spec) {
  Rng rng(spec.rng_seed);
  std::vector<std::size_t> pool;
  if (spec.test.kind == TestSelector::Kind::official) {
    for (std::size_t i = 0; i < corpus.size(); ++i) {
      if (corpus[i].split != Split::test) {
        corpus[i].split = Split::unassigned;
        pool.push_back(i);
      }
    }
  } else {
    const std::size_t n_test = spec.test.kind == TestSelector::Kind::fraction
                                   ? test_count_for_fraction(spec.test.fraction, corpus.size())
                                   : spec.test.count;
    if (n_test > corpus.size()) {
      throw ConfigError("test count " + std::to_string(n_test) + " exceeds corpus size " +
                        std::to_string(corpus.size()));
    }
    for (auto& rec : corpus) rec.split = Split::unassigned;
    std::vector<bool> is_test(corpus.size(), false);
    for (auto idx : sample_indices(rng, corpus.size(), n_test)) {
      corpus[idx].split = Split::test;
      is_test[idx] = true;
    }
    for (std::size_t i = 0; i < corpus.size(); ++i) {
      if (!is_test[i]) pool.push_back(i);
    }
  }

  const auto needed = spec.n_train + spec.n_val;
  if (needed > pool.size()) {
    throw ConfigError("split needs n_train + n_val = " + std::to_string(spec.n_train) + " + " +
                      std::to_string(spec.n_val) + " records but only " +
                      std::to_string(pool.size()) + " remain after test selection");
  }
  const auto picks = sample_indices(rng, pool.size(), needed);
  for (std::size_t i = 0; i < picks.size(); ++i) {
    corpus[pool[picks[i]]].split = i < spec.n_train ? Split::train : Split::val;
  }
  return corpus;
}

Splits partition(std::span<const EssayRecord> records) {
  Splits out;
  for (const auto& r : records) {
    switch (r.split) {
      case Split::train: out.train.push_back(r); break;
      case Split::val: out.val.push_back(r); break;
      case Split::test: out.test.push_back(r); break;
      case Split::unassigned: break;
    }
  }
  return out;
}

void write_split_manifest(const fs::path& path, std::span<const EssayRecord> records) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  for (const auto& r : records) {
    out << json{{"essay_id", r.essay_id}, {"split", to_string(r.split)}}.dump() << '\n';
  }
  if (!out) throw IoError("failed writing " + path.string());
}

std::map<std::string, Split> read_split_manifest(const fs::path& path) {
  std::map<std::string, Split> manifest;
  const auto lines = lines_of(read_file(path));
  for (std::size_t i = 0; i < lines.size(); ++i) {
    if (trim(lines[i]).empty()) continue;
    try {
      const auto j = json::parse(lines[i]);
      manifest[j.at("essay_id").get<std::string>()] =
          split_from_string(j.at("split").get<std::string>());
    } catch (const json::exception& e) {
      throw DataError(row_label(path, i + 1) + ": " + e.what());
    }
  }
  return manifest;
}

void to_json(json& j, const ScoreScale& scale) {
  j = json{{"min", scale.min}, {"max", scale.max}};
  if (scale.has_labels()) {
    auto labels = json::array();
    for (const auto& r : scale.label_mapping) {
      labels.push_back({{"lo", r.lo}, {"hi", r.hi}, {"label", r.label}});
    }
    j["labels"] = std::move(labels);
  }
}

void from_json(const json& j, ScoreScale& scale) {
  scale = ScoreScale{};
  j.at("min").get_to(scale.min);
  j.at("max").get_to(scale.max);
  if (j.contains("labels") && !j.at("labels").is_null()) {
    for (const auto& r : j.at("labels")) {
      scale.label_mapping.push_back(
          {r.at("lo").get<int>(), r.at("hi").get<int>(), r.at("label").get<std::string>()});
    }
  }
}

void to_json(json& j, const SplitSpec& spec) {
  json test;
  switch (spec.test.kind) {
    case TestSelector::Kind::official: test = {{"kind", "official"}}; break;
    case TestSelector::Kind::fraction: test = {{"kind", "fraction"}, {"value", spec.test.fraction}}; break;
    case TestSelector::Kind::count: test = {{"kind", "count"}, {"value", spec.test.count}}; break;
  }
  j = json{{"n_train", spec.n_train}, {"n_val", spec.n_val}, {"test", test}, {"seed", spec.rng_seed}};
}

void from_json(const json& j, SplitSpec& spec) {
  spec = SplitSpec{};
  if (j.contains("n_train")) j.at("n_train").get_to(spec.n_train);
  if (j.contains("n_val")) j.at("n_val").get_to(spec.n_val);
  if (j.contains("seed")) j.at("seed").get_to(spec.rng_seed);
  if (j.contains("test")) {
    const auto& t = j.at("test");
    const auto kind = t.at("kind").get<std::string>();
    if (kind == "official") {
      spec.test = TestSelector::official();
    } else if (kind == "fraction") {
      spec.test = TestSelector::of_fraction(t.at("value").get<double>());
    } else if (kind == "count") {
      spec.test = TestSelector::of_count(t.at("value").get<std::size_t>());
    } else {
      throw ConfigError("unknown test selector '" + kind + "'");
    }
  }
}

}  // namespace rubricrefine
