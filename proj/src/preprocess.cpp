#include "crashsev/preprocess.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <set>

#include "json.hpp"
#include "crashsev/util.hpp"

namespace crashsev {

namespace {

using nlohmann::json;

std::string lower(std::string_view s) {
    std::string out(s);
    std::transform(out.begin(), out.end(), out.begin(), [](unsigned char c) { return std::tolower(c); });
    return out;
}

BinRule token_rule(std::vector<std::string> labels, std::vector<std::pair<std::string, std::string>> map) {
    BinRule r;
    r.kind = BinRule::Kind::TokenMap;
    r.labels = std::move(labels);
    r.token_map = std::move(map);
    return r;
}

BinRule range_rule(std::vector<double> edges, std::vector<std::string> labels) {
    BinRule r;
    r.kind = BinRule::Kind::NumericRanges;
    r.upper_edges = std::move(edges);
    r.labels = std::move(labels);
    r.fallback = r.labels.back();
    return r;
}

json rule_to_json(const BinRule& r) {
    json j;
    j["kind"] = r.kind == BinRule::Kind::TokenMap ? "token_map" : "numeric_ranges";
    j["labels"] = r.labels;
    j["fallback"] = r.fallback;
    json m = json::array();
    for (const auto& [k, v] : r.token_map) m.push_back({k, v});
    j["token_map"] = m;
    j["upper_edges"] = r.upper_edges;
    return j;
}

BinRule rule_from_json(const json& j) {
    BinRule r;
    r.kind = j.at("kind").get<std::string>() == "token_map" ? BinRule::Kind::TokenMap : BinRule::Kind::NumericRanges;
    r.labels = j.at("labels").get<std::vector<std::string>>();
    r.fallback = j.at("fallback").get<std::string>();
    for (const auto& e : j.at("token_map")) r.token_map.emplace_back(e.at(0).get<std::string>(), e.at(1).get<std::string>());
    r.upper_edges = j.at("upper_edges").get<std::vector<double>>();
    return r;
}

}  // namespace

std::string_view partition_name(Partition p) {
    switch (p) {
        case Partition::Unsplit: return "unsplit";
        case Partition::Train: return "train";
        case Partition::Validation: return "validation";
        case Partition::Test: return "test";
    }
    return "?";
}

void Lineage::require_not_test(std::string_view stage) const {
    if (partition == Partition::Test)
        throw data_error(std::string(stage) + " must never see the test partition");
}

void Dataset::validate() const {
    if (y.size() != X.rows) throw data_error("label count does not match row count");
    if (X.data.size() != X.rows * X.cols) throw data_error("design matrix storage has wrong size");
    if (feature_names.size() != X.cols || column_group.size() != X.cols)
        throw data_error("feature metadata does not match column count");
    if (row_ids.size() != X.rows || synthetic.size() != X.rows) throw data_error("row metadata does not match row count");
    for (int label : y)
        if (label < 0 || label >= kNumClasses) throw data_error("label out of range: " + std::to_string(label));
    for (double v : X.data)
        if (!std::isfinite(v)) throw data_error("design matrix contains a non-finite value");
    for (int g : column_group)
        if (g < 0 || static_cast<std::size_t>(g) >= groups.size()) throw data_error("column group index out of range");
}

Dataset Dataset::select_rows(const std::vector<std::size_t>& rows) const {
    Dataset out;
    out.X = Matrix(rows.size(), X.cols);
    out.feature_names = feature_names;
    out.groups = groups;
    out.column_group = column_group;
    out.lineage = lineage;
    out.y.reserve(rows.size());
    out.row_ids.reserve(rows.size());
    out.synthetic.reserve(rows.size());
    for (std::size_t i = 0; i < rows.size(); ++i) {
        const std::size_t r = rows[i];
        std::copy_n(X.row(r), X.cols, out.X.row(i));
        out.y.push_back(y[r]);
        out.row_ids.push_back(row_ids[r]);
        out.synthetic.push_back(synthetic[r]);
    }
    return out;
}

Dataset Dataset::select_groups(const std::vector<std::string>& names) const {
    std::vector<std::size_t> cols;
    Dataset out;
    for (const auto& name : names) {
        auto it = std::find(groups.begin(), groups.end(), name);
        if (it == groups.end()) throw data_error("dataset has no feature group '" + name + "'");
        const int g = static_cast<int>(it - groups.begin());
        const int new_g = static_cast<int>(out.groups.size());
        out.groups.push_back(name);
        for (std::size_t c = 0; c < X.cols; ++c) {
            if (column_group[c] != g) continue;
            cols.push_back(c);
            out.feature_names.push_back(feature_names[c]);
            out.column_group.push_back(new_g);
        }
    }
    out.X = Matrix(X.rows, cols.size());
    for (std::size_t r = 0; r < X.rows; ++r)
        for (std::size_t j = 0; j < cols.size(); ++j) out.X(r, j) = X(r, cols[j]);
    out.y = y;
    out.row_ids = row_ids;
    out.synthetic = synthetic;
    out.lineage = lineage;
    return out;
}

std::vector<std::size_t> Dataset::class_counts() const {
    std::vector<std::size_t> counts(kNumClasses, 0);
    for (int label : y) ++counts[static_cast<std::size_t>(label)];
    return counts;
}

std::string BinRule::apply_token(const std::string& raw) const {
    const std::string key = lower(raw);
    for (const auto& [from, to] : token_map)
        if (from == key) return to;
    return fallback;
}

std::string BinRule::apply_number(double v) const {
    for (std::size_t i = 0; i < upper_edges.size(); ++i)
        if (v <= upper_edges[i]) return labels[i];
    return labels.back();
}

std::vector<std::pair<std::string, BinRule>> default_bin_rules() {
    std::vector<std::pair<std::string, BinRule>> rules;
    // Age: the gap at exactly 30 years is closed on the lower bin.
    rules.emplace_back("Prsn_Age", range_rule({30.0, 60.0}, {"≤30", "31–60", ">60"}));
    // Posted limits are multiples of 5 mph; the edges sit between the bins.
    rules.emplace_back("Crash_Speed_Limit", range_rule({30.0, 50.0, 65.0}, {"≤30", "35–50", "55–65", "≥70"}));
    rules.emplace_back("Wthr_Cond_ID",
                       token_rule({"clear", "cloudy", "rain", "snow", "fog", "other"},
                                  {{"clear", "clear"}, {"cloudy", "cloudy"}, {"overcast", "cloudy"}, {"rain", "rain"},
                                   {"drizzle", "rain"}, {"snow", "snow"}, {"sleet", "snow"}, {"blowing snow", "snow"},
                                   {"fog", "fog"}, {"mist", "fog"}, {"other", "other"}}));
    rules.emplace_back("Light_Cond_ID",
                       token_rule({"daylight", "dark", "dusk", "other"},
                                  {{"daylight", "daylight"}, {"dark", "dark"}, {"dark, lighted", "dark"},
                                   {"dark, not lighted", "dark"}, {"dark-lighted", "dark"}, {"dark-not lighted", "dark"},
                                   {"dusk", "dusk"}, {"dawn", "dusk"}, {"other", "other"}}));
    rules.emplace_back("Surf_Cond_ID",
                       token_rule({"dry", "wet", "gravel", "snow", "other"},
                                  {{"dry", "dry"}, {"wet", "wet"}, {"standing water", "wet"}, {"gravel", "gravel"},
                                   {"sand", "gravel"}, {"snow", "snow"}, {"ice", "snow"}, {"slush", "snow"},
                                   {"other", "other"}}));
    return rules;
}

ColumnState* PreprocessState::find(std::string_view name) {
    for (auto& c : columns)
        if (c.name == name) return &c;
    return nullptr;
}

const ColumnState* PreprocessState::find(std::string_view name) const {
    for (const auto& c : columns)
        if (c.name == name) return &c;
    return nullptr;
}

std::string PreprocessState::to_json() const {
    json j;
    j["version"] = kVersion;
    j["fitted"] = fitted;
    json cols = json::array();
    for (const auto& c : columns) {
        json jc;
        jc["name"] = c.name;
        jc["raw_kind"] = c.raw_kind == ColumnKind::Numeric ? "numeric" : "categorical";
        jc["encoded_kind"] = c.encoded_kind == ColumnKind::Numeric ? "numeric" : "categorical";
        jc["impute_token"] = c.impute_token;
        jc["impute_value"] = c.impute_value;
        jc["bin"] = c.bin ? rule_to_json(*c.bin) : json(nullptr);
        jc["vocab"] = c.vocab;
        jc["mean"] = c.scaler.mean;
        jc["stddev"] = c.scaler.stddev;
        jc["zero_variance"] = c.scaler.zero_variance;
        jc["scaler_fitted"] = c.scaler.fitted;
        cols.push_back(std::move(jc));
    }
    j["columns"] = std::move(cols);
    return j.dump(1);
}

PreprocessState PreprocessState::from_json(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        throw data_error(std::string("malformed preprocessing state: ") + e.what());
    }
    if (j.value("version", -1) != kVersion)
        throw data_error("unsupported preprocessing state version " + std::to_string(j.value("version", -1)));
    PreprocessState s;
    try {
        s.fitted = j.at("fitted").get<bool>();
        for (const auto& jc : j.at("columns")) {
            ColumnState c;
            c.name = jc.at("name").get<std::string>();
            c.raw_kind = jc.at("raw_kind").get<std::string>() == "numeric" ? ColumnKind::Numeric : ColumnKind::Categorical;
            c.encoded_kind =
                jc.at("encoded_kind").get<std::string>() == "numeric" ? ColumnKind::Numeric : ColumnKind::Categorical;
            c.impute_token = jc.at("impute_token").get<std::string>();
            c.impute_value = jc.at("impute_value").get<double>();
            if (!jc.at("bin").is_null()) c.bin = rule_from_json(jc.at("bin"));
            c.vocab = jc.at("vocab").get<std::vector<std::string>>();
            c.scaler.mean = jc.at("mean").get<double>();
            c.scaler.stddev = jc.at("stddev").get<double>();
            c.scaler.zero_variance = jc.at("zero_variance").get<bool>();
            c.scaler.fitted = jc.at("scaler_fitted").get<bool>();
            s.columns.push_back(std::move(c));
        }
    } catch (const json::exception& e) {
        throw data_error(std::string("malformed preprocessing state: ") + e.what());
    }
    return s;
}

void PreprocessState::save(const std::filesystem::path& path) const { write_text_file(path, to_json()); }

PreprocessState PreprocessState::load(const std::filesystem::path& path) { return from_json(read_text_file(path)); }

std::string PreprocessState::hash() const { return sha256_hex(to_json()); }

std::pair<CrashTable, PreprocessState> impute(const CrashTable& table, const std::vector<std::string>& columns) {
    PreprocessState state;
    for (const auto& name : columns) {
        const Column& col = table.at(name);
        ColumnState cs;
        cs.name = name;
        cs.raw_kind = col.kind;
        cs.encoded_kind = col.kind;
        if (col.kind == ColumnKind::Categorical) {
            std::map<std::string, std::size_t> counts;
            for (std::size_t r = 0; r < col.size(); ++r)
                if (!col.is_missing(r)) ++counts[col.tokens[r]];
            if (counts.empty()) throw data_error("unimputable column '" + name + "': every value is missing");
            // std::map iterates in token order, so ties resolve to the smallest token.
            std::size_t best = 0;
            for (const auto& [tok, n] : counts) {
                if (n > best) {
                    best = n;
                    cs.impute_token = tok;
                }
            }
        } else {
            std::vector<double> present;
            for (std::size_t r = 0; r < col.size(); ++r)
                if (!col.is_missing(r)) present.push_back(col.numbers[r]);
            if (present.empty()) throw data_error("unimputable column '" + name + "': every value is missing");
            std::sort(present.begin(), present.end());
            const std::size_t n = present.size();
            cs.impute_value = n % 2 ? present[n / 2] : 0.5 * (present[n / 2 - 1] + present[n / 2]);
        }
        state.columns.push_back(std::move(cs));
    }
    return {apply_imputation(table, state), std::move(state)};
}

CrashTable apply_imputation(const CrashTable& table, const PreprocessState& state) {
    CrashTable out = table;
    for (const auto& cs : state.columns) {
        Column* col = out.find(cs.name);
        if (!col) throw data_error("table has no column '" + cs.name + "'");
        for (std::size_t r = 0; r < col->size(); ++r) {
            if (!col->is_missing(r)) continue;
            if (col->kind == ColumnKind::Categorical) col->tokens[r] = cs.impute_token;
            else col->numbers[r] = cs.impute_value;
            col->missing[r] = 0;
        }
    }
    return out;
}

CrashTable bin_features(const CrashTable& table) {
    CrashTable out = table;
    for (const auto& [name, rule] : default_bin_rules()) {
        Column* col = out.find(name);
        if (!col) continue;
        Column binned;
        binned.name = col->name;
        binned.kind = ColumnKind::Categorical;
        binned.missing = col->missing;
        binned.tokens.resize(col->size());
        for (std::size_t r = 0; r < col->size(); ++r) {
            if (col->is_missing(r)) continue;
            if (col->kind == ColumnKind::Numeric) {
                binned.tokens[r] = rule.kind == BinRule::Kind::NumericRanges ? rule.apply_number(col->numbers[r])
                                                                             : rule.fallback;
            } else {
                binned.tokens[r] = rule.apply_token(col->tokens[r]);
            }
        }
        *col = std::move(binned);
    }
    return out;
}

void fit_vocabularies(const CrashTable& table, PreprocessState& state) {
    for (auto& cs : state.columns) {
        if (cs.encoded_kind != ColumnKind::Categorical) continue;
        const Column& col = table.at(cs.name);
        std::set<std::string> tokens;
        for (std::size_t r = 0; r < col.size(); ++r)
            if (!col.is_missing(r)) tokens.insert(col.tokens[r]);
        cs.vocab.assign(tokens.begin(), tokens.end());
    }
}

EncodedBlock one_hot_encode(const CrashTable& table, const PreprocessState& state) {
    EncodedBlock block;
    std::size_t width = 0;
    for (const auto& cs : state.columns)
        if (cs.encoded_kind == ColumnKind::Categorical) width += cs.vocab.size();
    block.X = Matrix(table.n_rows, width);
    std::size_t offset = 0;
    for (const auto& cs : state.columns) {
        if (cs.encoded_kind != ColumnKind::Categorical) continue;
        const Column& col = table.at(cs.name);
        if (col.kind != ColumnKind::Categorical) throw data_error("column '" + cs.name + "' is not categorical");
        const int g = static_cast<int>(block.groups.size());
        block.groups.push_back(cs.name);
        for (const auto& tok : cs.vocab) {
            block.names.push_back(cs.name + "=" + tok);
            block.column_group.push_back(g);
        }
        for (std::size_t r = 0; r < table.n_rows; ++r) {
            if (col.is_missing(r)) continue;
            auto it = std::lower_bound(cs.vocab.begin(), cs.vocab.end(), col.tokens[r]);
            if (it != cs.vocab.end() && *it == col.tokens[r])
                block.X(r, offset + static_cast<std::size_t>(it - cs.vocab.begin())) = 1.0;
        }
        offset += cs.vocab.size();
    }
    return block;
}

void standardize(Matrix& X, std::vector<Scaler>& scalers, FitMode mode) {
    if (scalers.size() != X.cols) throw data_error("scaler count does not match column count");
    for (std::size_t c = 0; c < X.cols; ++c) {
        Scaler& s = scalers[c];
        if (mode == FitMode::Fit) {
            if (X.rows == 0) throw data_error("cannot fit a scaler on zero rows");
            double sum = 0.0;
            for (std::size_t r = 0; r < X.rows; ++r) sum += X(r, c);
            const double mean = sum / static_cast<double>(X.rows);
            double ss = 0.0;
            for (std::size_t r = 0; r < X.rows; ++r) {
                const double d = X(r, c) - mean;
                ss += d * d;
            }
            s.mean = mean;
            s.stddev = std::sqrt(ss / static_cast<double>(X.rows));
            s.zero_variance = !(s.stddev > 0.0);
            s.fitted = true;
        } else if (!s.fitted) {
            throw data_error("standardize: apply called before fit");
        }
        for (std::size_t r = 0; r < X.rows; ++r)
            X(r, c) = s.zero_variance ? 0.0 : (X(r, c) - s.mean) / s.stddev;
    }
}

namespace {

std::vector<std::string> feature_columns(const Schema& schema) { return schema.feature_names(); }

}  // namespace

PreprocessState fit_preprocess(const CrashTable& train, const Schema& schema, Partition partition) {
    if (partition == Partition::Test) throw data_error("preprocessing fit must never see the test partition");
    auto [imputed, state] = impute(train, feature_columns(schema));
    const auto rules = default_bin_rules();
    for (auto& cs : state.columns) {
        for (const auto& [name, rule] : rules) {
            if (name != cs.name) continue;
            cs.bin = rule;
            cs.encoded_kind = ColumnKind::Categorical;
        }
    }
    CrashTable binned = bin_features(imputed);
    fit_vocabularies(binned, state);
    for (auto& cs : state.columns) {
        if (cs.encoded_kind != ColumnKind::Numeric) continue;
        const Column& col = binned.at(cs.name);
        Matrix m(binned.n_rows, 1);
        for (std::size_t r = 0; r < binned.n_rows; ++r) m(r, 0) = col.numbers[r];
        std::vector<Scaler> one(1);
        standardize(m, one, FitMode::Fit);
        cs.scaler = one[0];
    }
    state.fitted = true;
    return state;
}

Dataset transform(const CrashTable& table, const Schema& schema, const PreprocessState& state, Partition partition,
                  const std::vector<std::uint64_t>* row_ids) {
    if (!state.fitted) throw data_error("preprocessing state is not fitted");
    CrashTable binned = bin_features(apply_imputation(table, state));

    Dataset ds;
    ds.lineage.partition = partition;
    ds.lineage.stages.push_back("preprocess");
    ds.y = severity_labels(table, schema);

    // Column order follows the state's column order; categorical columns expand in place.
    std::size_t width = 0;
    for (const auto& cs : state.columns) width += cs.encoded_kind == ColumnKind::Categorical ? cs.vocab.size() : 1;
    ds.X = Matrix(table.n_rows, width);
    const EncodedBlock onehot = one_hot_encode(binned, state);
    std::size_t out_col = 0;
    std::size_t hot_col = 0;
    for (const auto& cs : state.columns) {
        const int g = static_cast<int>(ds.groups.size());
        ds.groups.push_back(cs.name);
        if (cs.encoded_kind == ColumnKind::Categorical) {
            for (std::size_t k = 0; k < cs.vocab.size(); ++k, ++out_col, ++hot_col) {
                for (std::size_t r = 0; r < table.n_rows; ++r) ds.X(r, out_col) = onehot.X(r, hot_col);
                ds.feature_names.push_back(onehot.names[hot_col]);
                ds.column_group.push_back(g);
            }
        } else {
            const Column& col = binned.at(cs.name);
            Matrix m(table.n_rows, 1);
            for (std::size_t r = 0; r < table.n_rows; ++r) m(r, 0) = col.numbers[r];
            std::vector<Scaler> one{cs.scaler};
            standardize(m, one, FitMode::Apply);
            for (std::size_t r = 0; r < table.n_rows; ++r) ds.X(r, out_col) = m(r, 0);
            ds.feature_names.push_back(cs.name);
            ds.column_group.push_back(g);
            ++out_col;
        }
    }
    ds.synthetic.assign(table.n_rows, 0);
    if (row_ids) {
        if (row_ids->size() != table.n_rows) throw data_error("row id count does not match table");
        ds.row_ids = *row_ids;
    } else {
        ds.row_ids.resize(table.n_rows);
        for (std::size_t r = 0; r < table.n_rows; ++r) ds.row_ids[r] = r;
    }
    ds.validate();
    return ds;
}

}  // namespace crashsev
