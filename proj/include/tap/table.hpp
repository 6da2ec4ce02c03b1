#pragma once

#include <cstddef>
#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include <Eigen/Dense>

namespace tap {

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Malformed CSV or schema declaration; the message carries row/column.
struct ParseError : Error {
  using Error::Error;
};

enum class ColumnKind { numeric, categorical };
enum class TaskKind { classification, regression };
enum class Provenance : std::uint8_t { real, synthetic };

struct ColumnSpec {
  std::string name;
  ColumnKind kind = ColumnKind::numeric;
  std::vector<std::string> vocabulary;  // categorical only
  double clip_lo = 0.0;
  double clip_hi = 0.0;
  double mean = 0.0;
  double std = 1.0;

  bool is_numeric() const { return kind == ColumnKind::numeric; }
  std::optional<std::size_t> token_index(std::string_view token) const;
};

struct Schema {
  std::vector<ColumnSpec> columns;
  std::size_t label = 0;
  TaskKind task = TaskKind::classification;

  std::size_t index_of(std::string_view name) const;
  const ColumnSpec& label_column() const { return columns[label]; }
  /// Column indices excluding the label, in declaration order.
  std::vector<std::size_t> feature_indices() const;
  void validate() const;
};

using Cell = std::variant<double, std::string>;
/// One value per schema column, in schema order.
using Record = std::vector<Cell>;

inline double as_number(const Cell& c) { return std::get<double>(c); }
inline const std::string& as_token(const Cell& c) { return std::get<std::string>(c); }

class Table {
 public:
  Table() = default;
  explicit Table(std::shared_ptr<const Schema> schema) : schema_(std::move(schema)) {}

  const Schema& schema() const { return *schema_; }
  const std::shared_ptr<const Schema>& schema_ptr() const { return schema_; }

  std::size_t size() const { return rows_.size(); }
  bool empty() const { return rows_.empty(); }
  const Record& row(std::size_t i) const { return rows_[i]; }
  const std::vector<Record>& rows() const { return rows_; }
  Provenance provenance(std::size_t i) const { return provenance_[i]; }
  const Cell& label(std::size_t i) const { return rows_[i][schema_->label]; }

  /// Throws Error when the record does not match the schema's column types.
  void append(Record record, Provenance tag);
  void append_table(const Table& other);

  Table subset(std::span<const std::size_t> indices) const;
  Table with_schema(std::shared_ptr<const Schema> schema) const;
  std::size_t count(Provenance tag) const;

 private:
  std::shared_ptr<const Schema> schema_;
  std::vector<Record> rows_;
  std::vector<Provenance> provenance_;
};

/// Parses a JSON schema declaration:
/// {"task": "classification", "label": "y",
///  "columns": [{"name": "x", "kind": "numeric"},
///              {"name": "y", "kind": "categorical", "vocabulary": ["a", "b"]}]}
Schema parse_schema(std::string_view schema_decl);

Table load_table(std::string_view csv_text, std::string_view schema_decl);
Table load_table(std::string_view csv_text, Schema schema);

/// Writes the table with a trailing provenance column.
std::string to_csv(const Table& table, bool with_provenance = true);

/// Lower empirical quantile: the order statistic at ceil(q * n), 1-based.
double lower_quantile(std::vector<double> values, double q);

/// Fits standardization statistics, clip bounds and vocabularies on the
/// table's real rows.
Schema fit_encoder(const Table& table, double q_lo = 0.01, double q_hi = 0.99);

/// Discrete target conditions: class labels or regression quantile bins.
struct TargetSpace {
  TaskKind task = TaskKind::classification;
  std::vector<std::string> classes;  // classification
  std::vector<double> edges;         // regression: strictly increasing cut points

  std::size_t size() const {
    return task == TaskKind::classification ? classes.size() : edges.size() + 1;
  }
  /// Condition index of a label value. Throws for unknown class tokens.
  std::size_t condition_of(const Cell& label) const;
};

struct TargetCondition {
  TaskKind kind = TaskKind::classification;
  std::size_t index = 0;
};

/// Regression bins with cuts at the i/num_bins quantiles; cuts that leave a
/// side empty are dropped, so constant labels give a single bin.
TargetSpace make_target_bins(std::span<const double> labels, std::size_t num_bins = 7);
TargetSpace make_target_space(const Table& train, std::size_t num_bins = 7);

struct Slice {
  std::size_t column = 0;
  std::size_t offset = 0;
  std::size_t width = 0;
};

struct EncodedVector {
  Eigen::VectorXd values;
};

/// Dense encoding: one standardized slot per numeric feature, a one-hot block
/// per categorical feature, then the condition one-hot, then (regression
/// only) the standardized label.
class Encoder {
 public:
  Encoder() = default;
  Encoder(std::shared_ptr<const Schema> fitted, TargetSpace targets);

  const Schema& schema() const { return *schema_; }
  const std::shared_ptr<const Schema>& schema_ptr() const { return schema_; }
  const TargetSpace& targets() const { return targets_; }
  const std::vector<Slice>& layout() const { return layout_; }

  std::size_t feature_width() const { return feature_width_; }
  std::size_t num_conditions() const { return targets_.size(); }
  std::size_t width() const;

  EncodedVector encode(const Record& record, TargetCondition condition) const;
  Record decode(const EncodedVector& vec) const;

  /// Feature block only; categorical tokens outside the vocabulary throw.
  Eigen::VectorXd encode_features(const Record& record) const;
  void encode_features_into(const Record& record, Eigen::Ref<Eigen::VectorXd> out) const;
  /// Columns are samples.
  Eigen::MatrixXd feature_matrix(const Table& table) const;

  /// Writes decoded feature values into `record` (label untouched).
  void decode_features(const Eigen::Ref<const Eigen::VectorXd>& features, Record& record) const;

  std::size_t condition_of(const Record& record) const;
  std::vector<std::size_t> conditions(const Table& table) const;

  /// Standardized regression label under the fitted label statistics.
  double standardize_label(double y) const;

 private:
  std::shared_ptr<const Schema> schema_;
  TargetSpace targets_;
  std::vector<Slice> layout_;
  std::size_t feature_width_ = 0;
};

struct Splits {
  Table train;
  Table val;
  Table test;
};

/// Test set of size min(floor(N/2), 500) drawn first; n_real rows are then
/// sampled from the remainder and split 80/20 into train/val.
Splits scarcity_split(const Table& table, std::size_t n_real, std::uint64_t seed);

}  // namespace tap
