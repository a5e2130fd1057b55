#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace crashsev {

enum class ColumnKind { Categorical, Numeric };
enum class ColumnRole { Feature, Target, Filter };

/// Collapsed KABCO severity. Integer values are the class labels used everywhere downstream.
enum class Severity : int { KA = 0, BC = 1, O = 2 };

std::string_view severity_name(Severity s);
std::string_view severity_name(int label);

/// K,A -> KA; B,C -> BC; O -> O. Anything else is a data error.
Severity map_kabco(std::string_view code);

struct ColumnSpec {
    std::string name;
    ColumnKind kind = ColumnKind::Categorical;
    ColumnRole role = ColumnRole::Feature;
};

struct Schema {
    std::vector<ColumnSpec> columns;

    const ColumnSpec* find(std::string_view name) const;
    const ColumnSpec& target() const;
    std::vector<std::string> feature_names() const;
};

/// Reads the whitespace-separated `name kind role` format; '#' starts a comment.
Schema load_schema(const std::filesystem::path& path);
void save_schema(const Schema& schema, const std::filesystem::path& path);

/// The 20-column crash-record layout used by the generator and the default pipeline.
Schema reference_schema();

struct Column {
    std::string name;
    ColumnKind kind = ColumnKind::Categorical;
    std::vector<std::string> tokens;   // categorical cells
    std::vector<double> numbers;       // numeric cells
    std::vector<std::uint8_t> missing; // 1 = missing

    std::size_t size() const { return missing.size(); }
    bool is_missing(std::size_t r) const { return missing[r] != 0; }
};

/// Columnar table of raw crash records.
struct CrashTable {
    std::vector<Column> columns;
    std::size_t n_rows = 0;

    Column* find(std::string_view name);
    const Column* find(std::string_view name) const;
    const Column& at(std::string_view name) const;

    /// Throws a data error if column lengths, name uniqueness or finiteness are violated.
    void validate() const;

    /// Rows whose index appears in `keep` (in that order).
    CrashTable select_rows(const std::vector<std::size_t>& keep) const;

    bool operator==(const CrashTable& other) const;
};

/// Splits one RFC-4180 record. `text` must hold a complete logical record (quoted newlines included).
std::vector<std::string> split_csv_record(std::string_view text);
std::string quote_csv_field(std::string_view field);

/// Parses a CSV into the schema's columns. Unparseable numeric cells are flagged missing;
/// empty cells are missing for both kinds. Extra CSV columns are ignored.
CrashTable parse_crash_csv(const std::filesystem::path& path, const Schema& schema);
void write_crash_csv(const CrashTable& table, const std::filesystem::path& path);

/// Keeps rows whose filter-role columns hold a true token (true/1/yes/y, case-insensitive).
CrashTable apply_row_filters(const CrashTable& table, const Schema& schema);

/// parse + filter + target check.
CrashTable ingest(const std::filesystem::path& path, const Schema& schema);

/// Maps the target column through map_kabco. Missing targets are a data error.
std::vector<int> severity_labels(const CrashTable& table, const Schema& schema);

bool parse_flag_token(std::string_view token);

}  // namespace crashsev
