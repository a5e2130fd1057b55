#include "crashsev/schema.hpp"

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <fstream>
#include <sstream>
#include <unordered_set>

#include "crashsev/common.hpp"

namespace crashsev {

namespace {

std::string lower(std::string_view s) {
    std::string out(s);
    std::transform(out.begin(), out.end(), out.begin(), [](unsigned char c) { return std::tolower(c); });
    return out;
}

std::string trim(std::string_view s) {
    std::size_t b = 0, e = s.size();
    while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
    while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
    return std::string(s.substr(b, e - b));
}

std::optional<double> parse_number(std::string_view cell) {
    const std::string t = trim(cell);
    if (t.empty()) return std::nullopt;
    double v = 0.0;
    const char* first = t.data();
    if (*first == '+') ++first;
    auto [ptr, ec] = std::from_chars(first, t.data() + t.size(), v);
    if (ec != std::errc() || ptr != t.data() + t.size() || !std::isfinite(v)) return std::nullopt;
    return v;
}

std::string format_number(double v) {
    std::array<char, 64> buf{};
    auto [ptr, ec] = std::to_chars(buf.data(), buf.data() + buf.size(), v);
    return std::string(buf.data(), ptr);
}

// Reads one logical CSV record, joining physical lines while a quote is open.
bool read_record(std::istream& in, std::string& record) {
    record.clear();
    std::string line;
    bool any = false;
    bool in_quotes = false;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (any) record += '\n';
        record += line;
        any = true;
        for (char ch : line) {
            if (ch == '"') in_quotes = !in_quotes;
        }
        if (!in_quotes) return true;
    }
    if (in_quotes) throw data_error("unterminated quoted field at end of CSV");
    return any;
}

}  // namespace

std::string_view severity_name(Severity s) {
    switch (s) {
        case Severity::KA: return "KA";
        case Severity::BC: return "BC";
        case Severity::O: return "O";
    }
    return "?";
}

std::string_view severity_name(int label) {
    if (label < 0 || label >= kNumClasses) throw data_error("label out of range: " + std::to_string(label));
    return severity_name(static_cast<Severity>(label));
}

Severity map_kabco(std::string_view code) {
    const std::string t = trim(code);
    if (t == "K" || t == "A") return Severity::KA;
    if (t == "B" || t == "C") return Severity::BC;
    if (t == "O") return Severity::O;
    throw data_error("invalid severity token '" + t + "' (expected one of K, A, B, C, O)");
}

const ColumnSpec* Schema::find(std::string_view name) const {
    for (const auto& c : columns)
        if (c.name == name) return &c;
    return nullptr;
}

const ColumnSpec& Schema::target() const {
    const ColumnSpec* found = nullptr;
    for (const auto& c : columns) {
        if (c.role != ColumnRole::Target) continue;
        if (found) throw config_error("schema declares more than one target column");
        found = &c;
    }
    if (!found) throw config_error("schema does not name a target column");
    return *found;
}

std::vector<std::string> Schema::feature_names() const {
    std::vector<std::string> out;
    for (const auto& c : columns)
        if (c.role == ColumnRole::Feature) out.push_back(c.name);
    return out;
}

Schema load_schema(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw io_error("cannot open schema file " + path.string());
    Schema schema;
    std::unordered_set<std::string> seen;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
        std::istringstream fields(line);
        std::string name, kind, role;
        if (!(fields >> name)) continue;
        if (!(fields >> kind >> role))
            throw config_error(path.string() + ":" + std::to_string(lineno) + ": expected 'name kind role'");
        ColumnSpec spec;
        spec.name = name;
        kind = lower(kind);
        role = lower(role);
        if (kind == "categorical") spec.kind = ColumnKind::Categorical;
        else if (kind == "numeric") spec.kind = ColumnKind::Numeric;
        else throw config_error(path.string() + ":" + std::to_string(lineno) + ": unknown kind '" + kind + "'");
        if (role == "feature") spec.role = ColumnRole::Feature;
        else if (role == "target") spec.role = ColumnRole::Target;
        else if (role == "filter") spec.role = ColumnRole::Filter;
        else throw config_error(path.string() + ":" + std::to_string(lineno) + ": unknown role '" + role + "'");
        if (!seen.insert(name).second) throw config_error("duplicate column '" + name + "' in schema");
        schema.columns.push_back(spec);
    }
    schema.target();
    return schema;
}

void save_schema(const Schema& schema, const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) throw io_error("cannot write schema file " + path.string());
    out << "# name kind role\n";
    for (const auto& c : schema.columns) {
        out << c.name << ' ' << (c.kind == ColumnKind::Numeric ? "numeric" : "categorical") << ' '
            << (c.role == ColumnRole::Feature ? "feature" : c.role == ColumnRole::Target ? "target" : "filter")
            << '\n';
    }
}

Schema reference_schema() {
    using K = ColumnKind;
    using R = ColumnRole;
    return Schema{{
        {"Prsn_Age", K::Numeric, R::Feature},
        {"Prsn_Gndr_ID", K::Categorical, R::Feature},
        {"Prsn_Rest_ID", K::Categorical, R::Feature},
        {"Veh_Make_ID", K::Categorical, R::Feature},
        {"Veh_Body_Styl_ID", K::Categorical, R::Feature},
        {"Veh_Mod_Year", K::Numeric, R::Feature},
        {"Wthr_Cond_ID", K::Categorical, R::Feature},
        {"Light_Cond_ID", K::Categorical, R::Feature},
        {"Surf_Cond_ID", K::Categorical, R::Feature},
        {"Road_Algn_ID", K::Categorical, R::Feature},
        {"Intrsct_Relat_ID", K::Categorical, R::Feature},
        {"FHE_Collsn_ID", K::Categorical, R::Feature},
        {"Harm_Evnt_ID", K::Categorical, R::Feature},
        {"Day_of_Week", K::Categorical, R::Feature},
        {"Crash_Speed_Limit", K::Numeric, R::Feature},
        {"Crash_Year", K::Numeric, R::Feature},
        {"HasAutomaticBrakingSystem", K::Categorical, R::Feature},
        {"HasAutomaticEmergencyBrakingSystem", K::Categorical, R::Feature},
        {"IsElectric", K::Categorical, R::Filter},
        {"Prsn_Injry_Sev_ID", K::Categorical, R::Target},
    }};
}

Column* CrashTable::find(std::string_view name) {
    for (auto& c : columns)
        if (c.name == name) return &c;
    return nullptr;
}

const Column* CrashTable::find(std::string_view name) const {
    for (const auto& c : columns)
        if (c.name == name) return &c;
    return nullptr;
}

const Column& CrashTable::at(std::string_view name) const {
    const Column* c = find(name);
    if (!c) throw data_error("no column named '" + std::string(name) + "'");
    return *c;
}

void CrashTable::validate() const {
    std::unordered_set<std::string> names;
    for (const auto& c : columns) {
        if (!names.insert(c.name).second) throw data_error("duplicate column name '" + c.name + "'");
        if (c.missing.size() != n_rows) throw data_error("column '" + c.name + "' has wrong length");
        if (c.kind == ColumnKind::Categorical) {
            if (c.tokens.size() != n_rows) throw data_error("column '" + c.name + "' has wrong length");
        } else {
            if (c.numbers.size() != n_rows) throw data_error("column '" + c.name + "' has wrong length");
            for (std::size_t r = 0; r < n_rows; ++r)
                if (!c.is_missing(r) && !std::isfinite(c.numbers[r]))
                    throw data_error("non-finite value in numeric column '" + c.name + "'");
        }
    }
}

CrashTable CrashTable::select_rows(const std::vector<std::size_t>& keep) const {
    CrashTable out;
    out.n_rows = keep.size();
    out.columns.reserve(columns.size());
    for (const auto& c : columns) {
        Column nc;
        nc.name = c.name;
        nc.kind = c.kind;
        nc.missing.reserve(keep.size());
        for (std::size_t r : keep) {
            nc.missing.push_back(c.missing[r]);
            if (c.kind == ColumnKind::Categorical) nc.tokens.push_back(c.tokens[r]);
            else nc.numbers.push_back(c.numbers[r]);
        }
        out.columns.push_back(std::move(nc));
    }
    return out;
}

bool CrashTable::operator==(const CrashTable& other) const {
    if (n_rows != other.n_rows || columns.size() != other.columns.size()) return false;
    for (std::size_t i = 0; i < columns.size(); ++i) {
        const Column& a = columns[i];
        const Column& b = other.columns[i];
        if (a.name != b.name || a.kind != b.kind || a.missing != b.missing) return false;
        for (std::size_t r = 0; r < n_rows; ++r) {
            if (a.is_missing(r)) continue;
            if (a.kind == ColumnKind::Categorical ? a.tokens[r] != b.tokens[r] : a.numbers[r] != b.numbers[r])
                return false;
        }
    }
    return true;
}

std::vector<std::string> split_csv_record(std::string_view text) {
    std::vector<std::string> fields;
    std::string cur;
    bool in_quotes = false;
    for (std::size_t i = 0; i < text.size(); ++i) {
        const char ch = text[i];
        if (in_quotes) {
            if (ch == '"') {
                if (i + 1 < text.size() && text[i + 1] == '"') {
                    cur += '"';
                    ++i;
                } else {
                    in_quotes = false;
                }
            } else {
                cur += ch;
            }
        } else if (ch == '"') {
            in_quotes = true;
        } else if (ch == ',') {
            fields.push_back(std::move(cur));
            cur.clear();
        } else {
            cur += ch;
        }
    }
    fields.push_back(std::move(cur));
    return fields;
}

std::string quote_csv_field(std::string_view field) {
    if (field.find_first_of(",\"\n\r") == std::string_view::npos) return std::string(field);
    std::string out = "\"";
    for (char ch : field) {
        if (ch == '"') out += '"';
        out += ch;
    }
    out += '"';
    return out;
}

CrashTable parse_crash_csv(const std::filesystem::path& path, const Schema& schema) {
    std::ifstream in(path);
    if (!in) throw io_error("cannot open CSV file " + path.string());
    schema.target();

    std::string record;
    if (!read_record(in, record)) throw data_error("CSV file " + path.string() + " has no header row");
    if (record.size() >= 3 && static_cast<unsigned char>(record[0]) == 0xEF) record.erase(0, 3);  // UTF-8 BOM
    std::vector<std::string> header = split_csv_record(record);
    for (auto& h : header) h = trim(h);

    std::unordered_set<std::string> seen;
    for (const auto& h : header)
        if (!seen.insert(h).second) throw data_error("duplicate column '" + h + "' in CSV header");

    CrashTable table;
    std::vector<std::size_t> source_index;
    for (const auto& spec : schema.columns) {
        auto it = std::find(header.begin(), header.end(), spec.name);
        if (it == header.end()) throw data_error("CSV header is missing schema column '" + spec.name + "'");
        source_index.push_back(static_cast<std::size_t>(it - header.begin()));
        Column c;
        c.name = spec.name;
        c.kind = spec.kind;
        table.columns.push_back(std::move(c));
    }

    std::size_t lineno = 1;
    while (read_record(in, record)) {
        ++lineno;
        if (record.empty()) continue;
        auto fields = split_csv_record(record);
        if (fields.size() != header.size())
            throw data_error(path.string() + ": record " + std::to_string(lineno) + " has " +
                             std::to_string(fields.size()) + " fields, header has " + std::to_string(header.size()));
        for (std::size_t i = 0; i < table.columns.size(); ++i) {
            Column& c = table.columns[i];
            const std::string& cell = fields[source_index[i]];
            if (c.kind == ColumnKind::Categorical) {
                const bool miss = cell.empty();
                c.tokens.push_back(miss ? std::string() : cell);
                c.missing.push_back(miss ? 1 : 0);
            } else {
                auto v = parse_number(cell);
                c.numbers.push_back(v.value_or(0.0));
                c.missing.push_back(v ? 0 : 1);
            }
        }
        ++table.n_rows;
    }
    table.validate();
    return table;
}

void write_crash_csv(const CrashTable& table, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw io_error("cannot write CSV file " + path.string());
    for (std::size_t i = 0; i < table.columns.size(); ++i) {
        if (i) out << ',';
        out << quote_csv_field(table.columns[i].name);
    }
    out << '\n';
    for (std::size_t r = 0; r < table.n_rows; ++r) {
        for (std::size_t i = 0; i < table.columns.size(); ++i) {
            if (i) out << ',';
            const Column& c = table.columns[i];
            if (c.is_missing(r)) continue;
            if (c.kind == ColumnKind::Categorical) out << quote_csv_field(c.tokens[r]);
            else out << format_number(c.numbers[r]);
        }
        out << '\n';
    }
    if (!out) throw io_error("failed writing " + path.string());
}

bool parse_flag_token(std::string_view token) {
    const std::string t = lower(trim(token));
    return t == "true" || t == "1" || t == "yes" || t == "y" || t == "t";
}

CrashTable apply_row_filters(const CrashTable& table, const Schema& schema) {
    std::vector<const Column*> filters;
    for (const auto& spec : schema.columns)
        if (spec.role == ColumnRole::Filter) filters.push_back(&table.at(spec.name));
    if (filters.empty()) return table;
    std::vector<std::size_t> keep;
    for (std::size_t r = 0; r < table.n_rows; ++r) {
        bool ok = true;
        for (const Column* f : filters) {
            const bool flag = f->kind == ColumnKind::Categorical ? (!f->is_missing(r) && parse_flag_token(f->tokens[r]))
                                                                 : (!f->is_missing(r) && f->numbers[r] != 0.0);
            ok = ok && flag;
        }
        if (ok) keep.push_back(r);
    }
    return table.select_rows(keep);
}

CrashTable ingest(const std::filesystem::path& path, const Schema& schema) {
    CrashTable table = apply_row_filters(parse_crash_csv(path, schema), schema);
    severity_labels(table, schema);
    return table;
}

std::vector<int> severity_labels(const CrashTable& table, const Schema& schema) {
    const Column& target = table.at(schema.target().name);
    if (target.kind != ColumnKind::Categorical) throw config_error("target column must be categorical");
    std::vector<int> y(table.n_rows);
    for (std::size_t r = 0; r < table.n_rows; ++r) {
        if (target.is_missing(r)) throw data_error("missing severity in row " + std::to_string(r));
        y[r] = static_cast<int>(map_kabco(target.tokens[r]));
    }
    return y;
}

}  // namespace crashsev
