#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "crashsev/common.hpp"
#include "crashsev/schema.hpp"

namespace crashsev {

enum class Partition { Unsplit, Train, Validation, Test };
std::string_view partition_name(Partition p);

/// Provenance carried by every Dataset; fit-type stages refuse Test-partition inputs.
struct Lineage {
    Partition partition = Partition::Unsplit;
    std::vector<std::string> stages;

    void require_not_test(std::string_view stage) const;
};

/// Numeric design matrix with labels. Columns are grouped by the source variable they encode
/// (a one-hot block, or a single numeric column).
struct Dataset {
    Matrix X;
    std::vector<int> y;
    std::vector<std::string> feature_names;
    std::vector<std::string> groups;       // source variable names, in column order of first use
    std::vector<int> column_group;         // size X.cols, index into groups
    std::vector<std::uint64_t> row_ids;    // stable identity; synthetic rows get fresh ids
    std::vector<std::uint8_t> synthetic;   // 1 for rows produced by oversampling
    Lineage lineage;

    std::size_t n_rows() const { return X.rows; }
    std::size_t n_features() const { return X.cols; }

    /// Throws if any invariant (finite X, label range, aligned sizes) is broken.
    void validate() const;

    Dataset select_rows(const std::vector<std::size_t>& rows) const;
    /// Keeps only the columns of the named groups, in the given group order.
    Dataset select_groups(const std::vector<std::string>& names) const;
    std::vector<std::size_t> class_counts() const;
};

/// Maps raw values onto a fixed, small set of bins. Unknown tokens fall into `fallback`.
struct BinRule {
    enum class Kind { TokenMap, NumericRanges } kind = Kind::TokenMap;
    std::vector<std::pair<std::string, std::string>> token_map;  // lower-case raw token -> bin
    std::vector<double> upper_edges;                              // label i if value <= upper_edges[i]
    std::vector<std::string> labels;                              // all bins, in order
    std::string fallback = "other";

    std::string apply_token(const std::string& raw) const;
    std::string apply_number(double v) const;
};

/// Bin rules for the columns consolidated during preprocessing, keyed by column name.
std::vector<std::pair<std::string, BinRule>> default_bin_rules();

struct Scaler {
    double mean = 0.0;
    double stddev = 0.0;
    bool zero_variance = false;
    bool fitted = false;
};

struct ColumnState {
    std::string name;
    ColumnKind raw_kind = ColumnKind::Categorical;
    ColumnKind encoded_kind = ColumnKind::Categorical;  // Categorical after binning a numeric column
    std::string impute_token;
    double impute_value = 0.0;
    std::optional<BinRule> bin;
    std::vector<std::string> vocab;  // one-hot vocabulary (sorted, unique)
    Scaler scaler;  // numeric columns only
};

struct PreprocessState {
    static constexpr int kVersion = 1;
    std::vector<ColumnState> columns;
    bool fitted = false;

    ColumnState* find(std::string_view name);
    const ColumnState* find(std::string_view name) const;

    std::string to_json() const;
    static PreprocessState from_json(const std::string& text);
    void save(const std::filesystem::path& path) const;
    static PreprocessState load(const std::filesystem::path& path);
    /// SHA-256 of the serialized state; checkpoints pin the state they were trained against.
    std::string hash() const;
};

/// Fits imputation values (mode token / median value) for `columns` and fills every missing cell.
std::pair<CrashTable, PreprocessState> impute(const CrashTable& table, const std::vector<std::string>& columns);
CrashTable apply_imputation(const CrashTable& table, const PreprocessState& state);

/// Consolidates the columns that have a default bin rule. Binned numeric columns become categorical.
CrashTable bin_features(const CrashTable& table);

struct EncodedBlock {
    Matrix X;
    std::vector<std::string> names;
    std::vector<std::string> groups;
    std::vector<int> column_group;
};

/// Fits sorted vocabularies on the (imputed, binned) training table.
void fit_vocabularies(const CrashTable& table, PreprocessState& state);
/// Expands every categorical column of `state` into indicator columns; unseen tokens give all zeros.
EncodedBlock one_hot_encode(const CrashTable& table, const PreprocessState& state);

enum class FitMode { Fit, Apply };

/// z = (x - mean) / std per column with population std; zero-variance columns give 0 and are flagged.
/// `scalers` has one entry per column of X; Fit overwrites them, Apply requires them fitted.
void standardize(Matrix& X, std::vector<Scaler>& scalers, FitMode mode);

/// impute -> bin -> vocab + scaler fit on the training table only.
PreprocessState fit_preprocess(const CrashTable& train, const Schema& schema, Partition partition = Partition::Train);

/// Applies a fitted state. Labels come from the schema's target column. Row ids default to 0..n-1.
Dataset transform(const CrashTable& table, const Schema& schema, const PreprocessState& state, Partition partition,
                  const std::vector<std::uint64_t>* row_ids = nullptr);

}  // namespace crashsev
