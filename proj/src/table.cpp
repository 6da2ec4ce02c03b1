#include "tap/table.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <numeric>
#include <set>
#include <sstream>

#include "json.hpp"

#include "tap/rng.hpp"

namespace tap {

namespace {

std::vector<std::string> split_csv_line(std::string_view line) {
  std::vector<std::string> fields;
  std::string cur;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    char ch = line[i];
    if (quoted) {
      if (ch == '"') {
        if (i + 1 < line.size() && line[i + 1] == '"') {
          cur.push_back('"');
          ++i;
        } else {
          quoted = false;
        }
      } else {
        cur.push_back(ch);
      }
    } else if (ch == '"') {
      quoted = true;
    } else if (ch == ',') {
      fields.push_back(std::move(cur));
      cur.clear();
    } else {
      cur.push_back(ch);
    }
  }
  fields.push_back(std::move(cur));
  return fields;
}

std::vector<std::string_view> split_lines(std::string_view text) {
  std::vector<std::string_view> lines;
  std::size_t start = 0;
  while (start <= text.size()) {
    std::size_t end = text.find('\n', start);
    if (end == std::string_view::npos) end = text.size();
    std::string_view line = text.substr(start, end - start);
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    lines.push_back(line);
    if (end == text.size()) break;
    start = end + 1;
  }
  while (!lines.empty() && lines.back().empty()) lines.pop_back();
  return lines;
}

std::optional<double> parse_number(std::string_view s) {
  while (!s.empty() && s.front() == ' ') s.remove_prefix(1);
  while (!s.empty() && s.back() == ' ') s.remove_suffix(1);
  if (s.empty()) return std::nullopt;
  if (s.front() == '+') s.remove_prefix(1);
  double v = 0.0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc{} || ptr != s.data() + s.size() || !std::isfinite(v)) return std::nullopt;
  return v;
}

std::string format_number(double v) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, ptr);
}

std::string quote_if_needed(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char ch : s) {
    if (ch == '"') out += "\"\"";
    else out.push_back(ch);
  }
  out.push_back('"');
  return out;
}

}  // namespace

std::optional<std::size_t> ColumnSpec::token_index(std::string_view token) const {
  for (std::size_t i = 0; i < vocabulary.size(); ++i) {
    if (vocabulary[i] == token) return i;
  }
  return std::nullopt;
}

std::size_t Schema::index_of(std::string_view name) const {
  for (std::size_t i = 0; i < columns.size(); ++i) {
    if (columns[i].name == name) return i;
  }
  throw Error("unknown column '" + std::string(name) + "'");
}

std::vector<std::size_t> Schema::feature_indices() const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < columns.size(); ++i) {
    if (i != label) out.push_back(i);
  }
  return out;
}

void Schema::validate() const {
  if (columns.empty()) throw Error("schema has no columns");
  if (label >= columns.size()) throw Error("schema label index out of range");
  std::set<std::string> names;
  for (const auto& c : columns) {
    if (!names.insert(c.name).second) throw Error("duplicate column name '" + c.name + "'");
    if (c.is_numeric() && c.clip_lo > c.clip_hi) throw Error("bad clip range on '" + c.name + "'");
  }
  const auto& lab = columns[label];
  if (task == TaskKind::classification && lab.is_numeric()) {
    throw Error("classification label '" + lab.name + "' must be categorical");
  }
  if (task == TaskKind::regression && !lab.is_numeric()) {
    throw Error("regression label '" + lab.name + "' must be numeric");
  }
}

void Table::append(Record record, Provenance tag) {
  const Schema& s = *schema_;
  if (record.size() != s.columns.size()) {
    throw Error("record has " + std::to_string(record.size()) + " cells, schema has " +
                std::to_string(s.columns.size()));
  }
  for (std::size_t j = 0; j < record.size(); ++j) {
    bool numeric_cell = std::holds_alternative<double>(record[j]);
    if (numeric_cell != s.columns[j].is_numeric()) {
      throw Error("column '" + s.columns[j].name + "' has the wrong value type");
    }
  }
  rows_.push_back(std::move(record));
  provenance_.push_back(tag);
}

void Table::append_table(const Table& other) {
  for (std::size_t i = 0; i < other.size(); ++i) {
    rows_.push_back(other.rows_[i]);
    provenance_.push_back(other.provenance_[i]);
  }
}

Table Table::subset(std::span<const std::size_t> indices) const {
  Table out(schema_);
  out.rows_.reserve(indices.size());
  for (std::size_t i : indices) {
    out.rows_.push_back(rows_.at(i));
    out.provenance_.push_back(provenance_.at(i));
  }
  return out;
}

Table Table::with_schema(std::shared_ptr<const Schema> schema) const {
  Table out(std::move(schema));
  out.rows_ = rows_;
  out.provenance_ = provenance_;
  return out;
}

std::size_t Table::count(Provenance tag) const {
  return static_cast<std::size_t>(std::count(provenance_.begin(), provenance_.end(), tag));
}

Schema parse_schema(std::string_view schema_decl) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(schema_decl);
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("schema declaration: ") + e.what());
  }
  Schema s;
  try {
    std::string task = j.value("task", "classification");
    if (task == "classification") s.task = TaskKind::classification;
    else if (task == "regression") s.task = TaskKind::regression;
    else throw ParseError("schema declaration: unknown task '" + task + "'");
    for (const auto& c : j.at("columns")) {
      ColumnSpec spec;
      spec.name = c.at("name").get<std::string>();
      std::string kind = c.at("kind").get<std::string>();
      if (kind == "numeric") spec.kind = ColumnKind::numeric;
      else if (kind == "categorical") spec.kind = ColumnKind::categorical;
      else throw ParseError("schema declaration: column '" + spec.name + "' has unknown kind '" + kind + "'");
      if (c.contains("vocabulary")) spec.vocabulary = c["vocabulary"].get<std::vector<std::string>>();
      s.columns.push_back(std::move(spec));
    }
    s.label = s.index_of(j.at("label").get<std::string>());
    s.validate();
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("schema declaration: ") + e.what());
  } catch (const ParseError&) {
    throw;
  } catch (const Error& e) {
    throw ParseError(std::string("schema declaration: ") + e.what());
  }
  return s;
}

Table load_table(std::string_view csv_text, std::string_view schema_decl) {
  return load_table(csv_text, parse_schema(schema_decl));
}

Table load_table(std::string_view csv_text, Schema schema) {
  auto lines = split_lines(csv_text);
  if (lines.empty()) throw ParseError("csv: missing header row");
  auto header = split_csv_line(lines[0]);
  std::vector<std::size_t> col_of_field(header.size());
  std::vector<bool> seen(schema.columns.size(), false);
  for (std::size_t f = 0; f < header.size(); ++f) {
    std::size_t idx;
    try {
      idx = schema.index_of(header[f]);
    } catch (const Error&) {
      throw ParseError("csv header: unknown column '" + header[f] + "' (field " + std::to_string(f + 1) + ")");
    }
    if (seen[idx]) throw ParseError("csv header: duplicate column '" + header[f] + "'");
    seen[idx] = true;
    col_of_field[f] = idx;
  }
  for (std::size_t c = 0; c < seen.size(); ++c) {
    if (!seen[c]) throw ParseError("csv header: missing column '" + schema.columns[c].name + "'");
  }

  auto shared = std::make_shared<const Schema>(std::move(schema));
  Table table(shared);
  for (std::size_t r = 1; r < lines.size(); ++r) {
    auto fields = split_csv_line(lines[r]);
    std::string where = "row " + std::to_string(r);
    if (fields.size() != header.size()) {
      throw ParseError("csv " + where + ": expected " + std::to_string(header.size()) + " fields, got " +
                       std::to_string(fields.size()));
    }
    Record rec(shared->columns.size());
    for (std::size_t f = 0; f < fields.size(); ++f) {
      std::size_t c = col_of_field[f];
      const auto& spec = shared->columns[c];
      if (fields[f].empty() && c == shared->label) {
        throw ParseError("csv " + where + ": missing label in column '" + spec.name + "'");
      }
      if (spec.is_numeric()) {
        auto v = parse_number(fields[f]);
        if (!v) {
          throw ParseError("csv " + where + ", column '" + spec.name + "': unparsable numeric value '" +
                           fields[f] + "'");
        }
        rec[c] = *v;
      } else {
        if (fields[f].empty()) throw ParseError("csv " + where + ", column '" + spec.name + "': empty category");
        rec[c] = fields[f];
      }
    }
    table.append(std::move(rec), Provenance::real);
  }
  return table;
}

std::string to_csv(const Table& table, bool with_provenance) {
  const Schema& s = table.schema();
  std::ostringstream out;
  for (std::size_t c = 0; c < s.columns.size(); ++c) {
    if (c) out << ',';
    out << quote_if_needed(s.columns[c].name);
  }
  if (with_provenance) out << ",provenance";
  out << '\n';
  for (std::size_t i = 0; i < table.size(); ++i) {
    const auto& row = table.row(i);
    for (std::size_t c = 0; c < row.size(); ++c) {
      if (c) out << ',';
      if (std::holds_alternative<double>(row[c])) out << format_number(as_number(row[c]));
      else out << quote_if_needed(as_token(row[c]));
    }
    if (with_provenance) out << ',' << (table.provenance(i) == Provenance::real ? "real" : "synthetic");
    out << '\n';
  }
  return out.str();
}

double lower_quantile(std::vector<double> values, double q) {
  if (values.empty()) throw Error("quantile of empty sample");
  std::sort(values.begin(), values.end());
  auto n = static_cast<double>(values.size());
  auto k = static_cast<std::size_t>(std::ceil(q * n));
  k = std::clamp<std::size_t>(k, 1, values.size());
  return values[k - 1];
}

Schema fit_encoder(const Table& table, double q_lo, double q_hi) {
  if (table.empty()) throw Error("fit_encoder: empty table");
  Schema fitted = table.schema();
  for (std::size_t c = 0; c < fitted.columns.size(); ++c) {
    auto& spec = fitted.columns[c];
    if (spec.is_numeric()) {
      std::vector<double> vals;
      for (std::size_t i = 0; i < table.size(); ++i) {
        if (table.provenance(i) == Provenance::real) vals.push_back(as_number(table.row(i)[c]));
      }
      if (vals.empty()) throw Error("fit_encoder: table has no real rows");
      double mean = std::accumulate(vals.begin(), vals.end(), 0.0) / static_cast<double>(vals.size());
      double ss = 0.0;
      for (double v : vals) ss += (v - mean) * (v - mean);
      double sd = std::sqrt(ss / static_cast<double>(vals.size()));
      spec.mean = mean;
      spec.std = sd > 1e-12 ? sd : 1.0;
      spec.clip_lo = lower_quantile(vals, q_lo);
      spec.clip_hi = lower_quantile(vals, q_hi);
    } else {
      // Declared vocabulary keeps its order; newly observed tokens append in
      // sorted order.
      std::set<std::string> observed;
      for (std::size_t i = 0; i < table.size(); ++i) {
        if (table.provenance(i) == Provenance::real) observed.insert(as_token(table.row(i)[c]));
      }
      for (const auto& tok : observed) {
        if (!spec.token_index(tok)) spec.vocabulary.push_back(tok);
      }
      if (spec.vocabulary.empty()) throw Error("fit_encoder: categorical column '" + spec.name + "' has no tokens");
    }
  }
  return fitted;
}

std::size_t TargetSpace::condition_of(const Cell& label) const {
  if (task == TaskKind::classification) {
    const auto& tok = as_token(label);
    for (std::size_t i = 0; i < classes.size(); ++i) {
      if (classes[i] == tok) return i;
    }
    throw Error("label token '" + tok + "' is not a known class");
  }
  double y = as_number(label);
  return static_cast<std::size_t>(std::count_if(edges.begin(), edges.end(), [y](double e) { return y > e; }));
}

TargetSpace make_target_bins(std::span<const double> labels, std::size_t num_bins) {
  if (labels.empty()) throw Error("make_target_bins: no labels");
  if (num_bins == 0) throw Error("make_target_bins: num_bins must be >= 1");
  std::vector<double> sorted(labels.begin(), labels.end());
  std::sort(sorted.begin(), sorted.end());
  const std::size_t n = sorted.size();
  TargetSpace space;
  space.task = TaskKind::regression;
  for (std::size_t i = 1; i < num_bins; ++i) {
    double q = static_cast<double>(i) / static_cast<double>(num_bins);
    auto k = std::clamp<std::size_t>(static_cast<std::size_t>(std::ceil(q * static_cast<double>(n))), 1, n);
    double lo = sorted[k - 1];
    double hi = k < n ? sorted[k] : lo;
    double edge = lo == hi ? lo : 0.5 * (lo + hi);
    // Keep only cuts that leave labels on both sides.
    if (!(edge >= sorted.front() && edge < sorted.back())) continue;
    if (!space.edges.empty() && edge <= space.edges.back()) continue;
    space.edges.push_back(edge);
  }
  return space;
}

TargetSpace make_target_space(const Table& train, std::size_t num_bins) {
  const Schema& s = train.schema();
  if (s.task == TaskKind::classification) {
    TargetSpace space;
    space.task = TaskKind::classification;
    space.classes = s.label_column().vocabulary;
    if (space.classes.empty()) {
      std::set<std::string> seen;
      for (std::size_t i = 0; i < train.size(); ++i) seen.insert(as_token(train.label(i)));
      space.classes.assign(seen.begin(), seen.end());
    }
    return space;
  }
  std::vector<double> ys;
  for (std::size_t i = 0; i < train.size(); ++i) {
    if (train.provenance(i) == Provenance::real) ys.push_back(as_number(train.label(i)));
  }
  return make_target_bins(ys, num_bins);
}

namespace {

// Inverse of (x - mean) / std; when rounding breaks the round trip, the
// nearest double within a few ulps that re-encodes to z is returned.
double unstandardize(double z, double mean, double std) {
  double x = z * std + mean;
  if (!std::isfinite(x) || (x - mean) / std == z) return x;
  double lo = x, hi = x;
  for (int k = 0; k < 8; ++k) {
    lo = std::nextafter(lo, -INFINITY);
    hi = std::nextafter(hi, INFINITY);
    if ((lo - mean) / std == z) return lo;
    if ((hi - mean) / std == z) return hi;
  }
  return x;
}

}  // namespace

Encoder::Encoder(std::shared_ptr<const Schema> fitted, TargetSpace targets)
    : schema_(std::move(fitted)), targets_(std::move(targets)) {
  std::size_t offset = 0;
  for (std::size_t c : schema_->feature_indices()) {
    const auto& spec = schema_->columns[c];
    std::size_t w = spec.is_numeric() ? 1 : spec.vocabulary.size();
    if (w == 0) throw Error("encoder: categorical column '" + spec.name + "' has empty vocabulary");
    layout_.push_back({c, offset, w});
    offset += w;
  }
  feature_width_ = offset;
}

std::size_t Encoder::width() const {
  return feature_width_ + targets_.size() + (targets_.task == TaskKind::regression ? 1 : 0);
}

void Encoder::encode_features_into(const Record& record, Eigen::Ref<Eigen::VectorXd> out) const {
  for (const auto& sl : layout_) {
    const auto& spec = schema_->columns[sl.column];
    if (spec.is_numeric()) {
      out[sl.offset] = (as_number(record[sl.column]) - spec.mean) / spec.std;
    } else {
      auto idx = spec.token_index(as_token(record[sl.column]));
      if (!idx) throw Error("encode: token '" + as_token(record[sl.column]) + "' not in vocabulary of '" + spec.name + "'");
      out.segment(sl.offset, sl.width).setZero();
      out[sl.offset + *idx] = 1.0;
    }
  }
}

Eigen::VectorXd Encoder::encode_features(const Record& record) const {
  Eigen::VectorXd v(feature_width_);
  encode_features_into(record, v);
  return v;
}

Eigen::MatrixXd Encoder::feature_matrix(const Table& table) const {
  Eigen::MatrixXd m(feature_width_, table.size());
  for (std::size_t i = 0; i < table.size(); ++i) encode_features_into(table.row(i), m.col(static_cast<Eigen::Index>(i)));
  return m;
}

EncodedVector Encoder::encode(const Record& record, TargetCondition condition) const {
  if (condition.index >= targets_.size()) throw Error("encode: condition index out of range");
  EncodedVector ev;
  ev.values = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(width()));
  encode_features_into(record, ev.values.head(static_cast<Eigen::Index>(feature_width_)));
  ev.values[static_cast<Eigen::Index>(feature_width_ + condition.index)] = 1.0;
  if (targets_.task == TaskKind::regression) {
    ev.values[static_cast<Eigen::Index>(width() - 1)] = standardize_label(as_number(record[schema_->label]));
  }
  return ev;
}

void Encoder::decode_features(const Eigen::Ref<const Eigen::VectorXd>& features, Record& record) const {
  for (const auto& sl : layout_) {
    const auto& spec = schema_->columns[sl.column];
    if (spec.is_numeric()) {
      record[sl.column] = unstandardize(features[sl.offset], spec.mean, spec.std);
    } else {
      Eigen::Index best = 0;
      features.segment(sl.offset, sl.width).maxCoeff(&best);
      record[sl.column] = spec.vocabulary[static_cast<std::size_t>(best)];
    }
  }
}

Record Encoder::decode(const EncodedVector& vec) const {
  if (static_cast<std::size_t>(vec.values.size()) != width()) throw Error("decode: width mismatch");
  Record rec(schema_->columns.size());
  decode_features(vec.values.head(static_cast<Eigen::Index>(feature_width_)), rec);
  Eigen::Index cond = 0;
  vec.values.segment(static_cast<Eigen::Index>(feature_width_), static_cast<Eigen::Index>(targets_.size())).maxCoeff(&cond);
  if (targets_.task == TaskKind::classification) {
    rec[schema_->label] = targets_.classes[static_cast<std::size_t>(cond)];
  } else {
    const auto& lab = schema_->label_column();
    rec[schema_->label] = unstandardize(vec.values[static_cast<Eigen::Index>(width() - 1)], lab.mean, lab.std);
  }
  return rec;
}

std::size_t Encoder::condition_of(const Record& record) const {
  return targets_.condition_of(record[schema_->label]);
}

std::vector<std::size_t> Encoder::conditions(const Table& table) const {
  std::vector<std::size_t> out(table.size());
  for (std::size_t i = 0; i < table.size(); ++i) out[i] = condition_of(table.row(i));
  return out;
}

double Encoder::standardize_label(double y) const {
  const auto& lab = schema_->label_column();
  return (y - lab.mean) / lab.std;
}

Splits scarcity_split(const Table& table, std::size_t n_real, std::uint64_t seed) {
  const std::size_t n = table.size();
  const std::size_t n_test = std::min<std::size_t>(n / 2, 500);
  if (n_real > n - n_test) {
    throw Error("scarcity_split: n_real = " + std::to_string(n_real) + " exceeds the " +
                std::to_string(n - n_test) + " rows left after the test split");
  }
  Rng rng(seed);
  auto perm = rng.permutation(n);
  std::vector<std::size_t> test_idx(perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(n_test));
  std::vector<std::size_t> rest(perm.begin() + static_cast<std::ptrdiff_t>(n_test), perm.end());
  Rng sub = rng.split(1);
  sub.shuffle(rest);
  rest.resize(n_real);
  auto n_train = static_cast<std::size_t>(std::floor(0.8 * static_cast<double>(n_real) + 1e-9));
  std::vector<std::size_t> train_idx(rest.begin(), rest.begin() + static_cast<std::ptrdiff_t>(n_train));
  std::vector<std::size_t> val_idx(rest.begin() + static_cast<std::ptrdiff_t>(n_train), rest.end());
  return {table.subset(train_idx), table.subset(val_idx), table.subset(test_idx)};
}

}  // namespace tap
