#include "crashsev/config.hpp"

#include <algorithm>
#include <cerrno>
#include <cstdlib>
#include <functional>
#include <sstream>

#include "crashsev/nn/models.hpp"
#include "crashsev/util.hpp"

namespace crashsev {

namespace {

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

std::string lower(std::string s) {
    std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    return s;
}

double to_double(const std::string& key, const std::string& v) {
    char* end = nullptr;
    errno = 0;
    const double d = std::strtod(v.c_str(), &end);
    if (v.empty() || *end != '\0' || errno == ERANGE) throw config_error(key + ": '" + v + "' is not a number");
    return d;
}

std::uint64_t to_u64(const std::string& key, const std::string& v) {
    char* end = nullptr;
    errno = 0;
    if (v.empty() || v[0] == '-') throw config_error(key + ": '" + v + "' is not a non-negative integer");
    const unsigned long long u = std::strtoull(v.c_str(), &end, 10);
    if (*end != '\0' || errno == ERANGE) throw config_error(key + ": '" + v + "' is not a non-negative integer");
    return u;
}

std::size_t to_size(const std::string& key, const std::string& v) { return static_cast<std::size_t>(to_u64(key, v)); }

bool to_bool(const std::string& key, const std::string& v) {
    const std::string l = lower(v);
    if (l == "true" || l == "1" || l == "yes" || l == "on") return true;
    if (l == "false" || l == "0" || l == "no" || l == "off") return false;
    throw config_error(key + ": '" + v + "' is not a boolean");
}

std::vector<std::string> split_list(const std::string& v) {
    std::vector<std::string> out;
    std::stringstream ss(v);
    for (std::string item; std::getline(ss, item, ',');)
        if (!trim(item).empty()) out.push_back(trim(item));
    return out;
}

std::string b2s(bool b) { return b ? "true" : "false"; }

GenConfig& synth_of(PipelineConfig& c) {
    if (!c.synth) c.synth = GenConfig{};
    return *c.synth;
}

TrainConfig default_train(const std::string& model) {
    TrainConfig t;
    if (nn::parse_variant(model) == nn::Variant::MambaNet) {
        t.optimizer = OptimizerKind::AdamW;
        t.schedule = ScheduleKind::Plateau;
    } else {
        t.optimizer = OptimizerKind::Adam;
        t.schedule = ScheduleKind::Step;
    }
    return t;
}

// Training fields, addressable as train.<field> (every model) or <model>.<field>.
struct TrainField {
    const char* name;
    std::function<void(TrainConfig&, const std::string& key, const std::string&)> set;
    std::function<std::string(const TrainConfig&)> get;
};

const std::vector<TrainField>& train_fields() {
    static const std::vector<TrainField> f = {
        {"lr", [](TrainConfig& t, auto& k, auto& v) { t.lr = to_double(k, v); },
         [](const TrainConfig& t) { return format_double(t.lr); }},
        {"weight_decay", [](TrainConfig& t, auto& k, auto& v) { t.weight_decay = to_double(k, v); },
         [](const TrainConfig& t) { return format_double(t.weight_decay); }},
        {"epochs", [](TrainConfig& t, auto& k, auto& v) { t.epochs = to_size(k, v); },
         [](const TrainConfig& t) { return std::to_string(t.epochs); }},
        {"batch", [](TrainConfig& t, auto& k, auto& v) { t.batch = to_size(k, v); },
         [](const TrainConfig& t) { return std::to_string(t.batch); }},
        {"optimizer", [](TrainConfig& t, auto&, auto& v) { t.optimizer = parse_optimizer(v); },
         [](const TrainConfig& t) { return optimizer_name(t.optimizer); }},
        {"schedule", [](TrainConfig& t, auto&, auto& v) { t.schedule = parse_schedule(v); },
         [](const TrainConfig& t) { return schedule_name(t.schedule); }},
        {"step_size", [](TrainConfig& t, auto& k, auto& v) { t.step_size = to_size(k, v); },
         [](const TrainConfig& t) { return std::to_string(t.step_size); }},
        {"gamma", [](TrainConfig& t, auto& k, auto& v) { t.gamma = to_double(k, v); },
         [](const TrainConfig& t) { return format_double(t.gamma); }},
        {"plateau_factor", [](TrainConfig& t, auto& k, auto& v) { t.plateau_factor = to_double(k, v); },
         [](const TrainConfig& t) { return format_double(t.plateau_factor); }},
        {"plateau_patience", [](TrainConfig& t, auto& k, auto& v) { t.plateau_patience = to_size(k, v); },
         [](const TrainConfig& t) { return std::to_string(t.plateau_patience); }},
        {"lr_floor", [](TrainConfig& t, auto& k, auto& v) { t.lr_floor = to_double(k, v); },
         [](const TrainConfig& t) { return format_double(t.lr_floor); }},
        {"early_stop_patience", [](TrainConfig& t, auto& k, auto& v) { t.early_stop_patience = to_size(k, v); },
         [](const TrainConfig& t) { return std::to_string(t.early_stop_patience); }},
        {"min_delta", [](TrainConfig& t, auto& k, auto& v) { t.min_delta = to_double(k, v); },
         [](const TrainConfig& t) { return format_double(t.min_delta); }},
    };
    return f;
}

struct Key {
    const char* name;
    std::function<void(PipelineConfig&, const std::string&)> set;
    std::function<std::optional<std::string>(const PipelineConfig&)> get;
};

template <class T>
std::optional<std::string> opt_num(const std::optional<T>& v) {
    if (!v) return std::nullopt;
    if constexpr (std::is_floating_point_v<T>) return format_double(*v);
    else return std::to_string(*v);
}

const std::vector<Key>& keys() {
    using C = PipelineConfig;
    using S = std::optional<std::string>;
    static const std::vector<Key> k = {
        {"version", [](C&, const std::string& v) {
             if (to_u64("version", v) != static_cast<std::uint64_t>(C::kVersion))
                 throw config_error("unsupported config version " + v + " (expected " + std::to_string(C::kVersion) + ")");
         }, [](const C&) -> S { return std::to_string(C::kVersion); }},
        {"seed", [](C& c, const std::string& v) { c.seed = to_u64("seed", v); }, [](const C& c) { return opt_num(c.seed); }},
        {"out_dir", [](C& c, const std::string& v) { c.out_dir = v; }, [](const C& c) -> S { return c.out_dir.string(); }},
        {"data.file", [](C& c, const std::string& v) { c.data_file = v; },
         [](const C& c) -> S { return c.data_file ? S(c.data_file->string()) : std::nullopt; }},
        {"schema", [](C& c, const std::string& v) { c.schema_file = v; },
         [](const C& c) -> S { return c.schema_file ? S(c.schema_file->string()) : std::nullopt; }},
        {"synth.n_rows", [](C& c, const std::string& v) { synth_of(c).n_rows = to_size("synth.n_rows", v); },
         [](const C& c) -> S { return c.synth ? S(std::to_string(c.synth->n_rows)) : std::nullopt; }},
        {"synth.priors", [](C& c, const std::string& v) {
             const auto parts = split_list(v);
             if (parts.size() != 3) throw config_error("synth.priors needs three values (KA,BC,O)");
             for (std::size_t i = 0; i < 3; ++i) synth_of(c).class_priors[i] = to_double("synth.priors", parts[i]);
         }, [](const C& c) -> S {
             if (!c.synth) return std::nullopt;
             const auto& p = c.synth->class_priors;
             return format_double(p[0]) + "," + format_double(p[1]) + "," + format_double(p[2]);
         }},
        {"synth.signal_strength", [](C& c, const std::string& v) { synth_of(c).signal_strength = to_double("synth.signal_strength", v); },
         [](const C& c) -> S { return c.synth ? S(format_double(c.synth->signal_strength)) : std::nullopt; }},
        {"synth.bayes_target", [](C& c, const std::string& v) {
             synth_of(c);
             c.synth_bayes_target = to_double("synth.bayes_target", v);
         }, [](const C& c) { return opt_num(c.synth_bayes_target); }},
        {"synth.non_ev_rows", [](C& c, const std::string& v) { synth_of(c).non_ev_rows = to_size("synth.non_ev_rows", v); },
         [](const C& c) -> S { return c.synth ? S(std::to_string(c.synth->non_ev_rows)) : std::nullopt; }},
        {"synth.missing_rate", [](C& c, const std::string& v) { synth_of(c).missing_rate = to_double("synth.missing_rate", v); },
         [](const C& c) -> S { return c.synth ? S(format_double(c.synth->missing_rate)) : std::nullopt; }},
        {"select.k", [](C& c, const std::string& v) { c.select_k = to_size("select.k", v); },
         [](const C& c) -> S { return std::to_string(c.select_k); }},
        {"select.forest_trees", [](C& c, const std::string& v) { c.forest_trees = to_size("select.forest_trees", v); },
         [](const C& c) -> S { return std::to_string(c.forest_trees); }},
        {"select.forest_depth", [](C& c, const std::string& v) { c.forest_depth = static_cast<int>(to_size("select.forest_depth", v)); },
         [](const C& c) -> S { return std::to_string(c.forest_depth); }},
        {"select.forest_min_leaf", [](C& c, const std::string& v) { c.forest_min_leaf = to_double("select.forest_min_leaf", v); },
         [](const C& c) -> S { return format_double(c.forest_min_leaf); }},
        {"select.gbt_rounds", [](C& c, const std::string& v) { c.gbt_rounds = to_size("select.gbt_rounds", v); },
         [](const C& c) -> S { return std::to_string(c.gbt_rounds); }},
        {"select.gbt_depth", [](C& c, const std::string& v) { c.gbt_depth = static_cast<int>(to_size("select.gbt_depth", v)); },
         [](const C& c) -> S { return std::to_string(c.gbt_depth); }},
        {"select.gbt_learning_rate", [](C& c, const std::string& v) { c.gbt_learning_rate = to_double("select.gbt_learning_rate", v); },
         [](const C& c) -> S { return format_double(c.gbt_learning_rate); }},
        {"resample.enabled", [](C& c, const std::string& v) { c.resample = to_bool("resample.enabled", v); },
         [](const C& c) -> S { return b2s(c.resample); }},
        {"resample.class_weights", [](C& c, const std::string& v) { c.use_class_weights = to_bool("resample.class_weights", v); },
         [](const C& c) -> S { return b2s(c.use_class_weights); }},
        {"resample.smote_k", [](C& c, const std::string& v) { c.smote_k = to_size("resample.smote_k", v); },
         [](const C& c) -> S { return std::to_string(c.smote_k); }},
        {"resample.enn_k", [](C& c, const std::string& v) { c.enn_k = to_size("resample.enn_k", v); },
         [](const C& c) -> S { return std::to_string(c.enn_k); }},
        {"models", [](C& c, const std::string& v) {
             std::vector<ModelRunConfig> next;
             c.run_pfn = false;
             for (const auto& name : split_list(v)) {
                 if (lower(name) == "tabpfn" || lower(name) == "pfn") {
                     c.run_pfn = true;
                     continue;
                 }
                 const std::string canon = nn::variant_name(nn::parse_variant(name));
                 // keep training overrides already applied to this model
                 auto it = std::find_if(c.models.begin(), c.models.end(), [&](const auto& m) { return m.name == canon; });
                 next.push_back(it != c.models.end() ? *it : ModelRunConfig{canon, default_train(canon)});
             }
             c.models = std::move(next);
         }, [](const C& c) -> S {
             std::string s;
             for (const auto& m : c.models) s += (s.empty() ? "" : ",") + m.name;
             if (c.run_pfn) s += std::string(s.empty() ? "" : ",") + "TabPFN";
             return s;
         }},
        {"pfn.checkpoint", [](C& c, const std::string& v) { c.pfn_checkpoint = v; },
         [](const C& c) -> S { return c.pfn_checkpoint ? S(c.pfn_checkpoint->string()) : std::nullopt; }},
        {"pfn.tasks", [](C& c, const std::string& v) { c.pfn_pretrain.tasks = to_size("pfn.tasks", v); },
         [](const C& c) -> S { return std::to_string(c.pfn_pretrain.tasks); }},
        {"pfn.tasks_per_step", [](C& c, const std::string& v) { c.pfn_pretrain.tasks_per_step = to_size("pfn.tasks_per_step", v); },
         [](const C& c) -> S { return std::to_string(c.pfn_pretrain.tasks_per_step); }},
        {"pfn.lr", [](C& c, const std::string& v) { c.pfn_pretrain.lr = to_double("pfn.lr", v); },
         [](const C& c) -> S { return format_double(c.pfn_pretrain.lr); }},
        {"pfn.layers", [](C& c, const std::string& v) { c.pfn_arch.layers = to_size("pfn.layers", v); },
         [](const C& c) -> S { return std::to_string(c.pfn_arch.layers); }},
        {"pfn.width", [](C& c, const std::string& v) { c.pfn_arch.width = to_size("pfn.width", v); },
         [](const C& c) -> S { return std::to_string(c.pfn_arch.width); }},
        {"pfn.heads", [](C& c, const std::string& v) { c.pfn_arch.heads = to_size("pfn.heads", v); },
         [](const C& c) -> S { return std::to_string(c.pfn_arch.heads); }},
        {"pfn.ffn", [](C& c, const std::string& v) { c.pfn_arch.ffn = to_size("pfn.ffn", v); },
         [](const C& c) -> S { return std::to_string(c.pfn_arch.ffn); }},
        {"pfn.max_context", [](C& c, const std::string& v) { c.pfn_arch.max_context = to_size("pfn.max_context", v); },
         [](const C& c) -> S { return std::to_string(c.pfn_arch.max_context); }},
        {"pfn.subsample_fallback", [](C& c, const std::string& v) { c.pfn_subsample_fallback = to_bool("pfn.subsample_fallback", v); },
         [](const C& c) -> S { return b2s(c.pfn_subsample_fallback); }},
    };
    return k;
}

void apply_key(PipelineConfig& c, const std::string& key, const std::string& value) {
    for (const auto& k : keys())
        if (key == k.name) return k.set(c, value);
    const auto dot = key.find('.');
    if (dot != std::string::npos) {
        const std::string scope = key.substr(0, dot), field = key.substr(dot + 1);
        for (const auto& f : train_fields()) {
            if (field != f.name) continue;
            if (scope == "train") {
                for (auto& m : c.models) f.set(m.train, key, value);
                return;
            }
            for (auto& m : c.models)
                if (lower(m.name) == scope) return f.set(m.train, key, value);
            throw config_error(key + ": model '" + scope + "' is not enabled in `models`");
        }
    }
    throw config_error("unknown config key '" + key + "'");
}

}  // namespace

KeyValues KeyValues::parse(const std::string& text, const std::string& origin) {
    KeyValues kv;
    std::stringstream ss(text);
    std::size_t line_no = 0;
    for (std::string line; std::getline(ss, line);) {
        ++line_no;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.resize(hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw config_error(origin + ":" + std::to_string(line_no) + ": expected `key = value`");
        const std::string key = trim(line.substr(0, eq)), value = trim(line.substr(eq + 1));
        if (key.empty()) throw config_error(origin + ":" + std::to_string(line_no) + ": empty key");
        if (!kv.values.emplace(key, value).second)
            throw config_error(origin + ":" + std::to_string(line_no) + ": duplicate key '" + key + "'");
    }
    return kv;
}

void KeyValues::set_assignment(const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos || trim(assignment.substr(0, eq)).empty())
        throw config_error("override '" + assignment + "' is not key=value");
    values[trim(assignment.substr(0, eq))] = trim(assignment.substr(eq + 1));
}

std::string KeyValues::to_text() const {
    std::string s;
    for (const auto& [k, v] : values) s += k + " = " + v + "\n";
    return s;
}

void PipelineConfig::validate() const {
    if (data_file && synth) throw config_error("config names both data.file and a synth block; choose one data source");
    if (!data_file && !synth) throw config_error("config has no data source (set data.file or synth.*)");
    if (!seed) throw config_error("config has no seed; set `seed` (or CRASHSEV_SEED)");
    if (synth) synth->validate();
    if (synth_bayes_target && !(*synth_bayes_target > 0.0 && *synth_bayes_target < 1.0))
        throw config_error("synth.bayes_target must lie in (0, 1)");
    if (select_k < 1) throw config_error("select.k must be at least 1");
    if (forest_trees < 1 || gbt_rounds < 1) throw config_error("tree ensembles need at least one tree");
    if (smote_k < 1 || enn_k < 1) throw config_error("resampling neighbour counts must be positive");
    for (const auto& m : models) m.train.validate();
    if (models.empty() && !run_pfn) throw config_error("no models configured");
    pfn_arch.validate();
    pfn_pretrain.validate();
}

std::uint64_t PipelineConfig::require_seed() const {
    if (!seed) throw config_error("config has no seed");
    return *seed;
}

std::string PipelineConfig::to_text() const {
    KeyValues kv;
    for (const auto& k : keys())
        if (auto v = k.get(*this)) kv.values[k.name] = *v;
    for (const auto& m : models)
        for (const auto& f : train_fields()) kv.values[lower(m.name) + "." + f.name] = f.get(m.train);
    return kv.to_text();
}

PipelineConfig resolve_config(const KeyValues& file, const std::vector<std::string>& overrides, bool use_env) {
    KeyValues merged = file;
    if (use_env) {
        if (const char* d = std::getenv("CRASHSEV_OUT_DIR"); d && *d) merged.values["out_dir"] = d;
        if (const char* s = std::getenv("CRASHSEV_SEED"); s && *s) merged.values["seed"] = s;
    }
    for (const auto& o : overrides) merged.set_assignment(o);

    PipelineConfig c;
    c.models = {{"MambaNet", default_train("MambaNet")}, {"MambaAttention", default_train("MambaAttention")}};
    // `models` first so model-scoped keys see the final model list; then globals; then
    // train.* before <model>.* so the narrower scope wins.
    auto rank = [](const std::string& key) {
        if (key == "models") return 0;
        if (key.rfind("train.", 0) == 0) return 2;
        for (const auto& m : {"mambanet.", "mambaattention."})
            if (key.rfind(m, 0) == 0) return 3;
        return 1;
    };
    std::vector<std::pair<std::string, std::string>> ordered(merged.values.begin(), merged.values.end());
    std::stable_sort(ordered.begin(), ordered.end(), [&](const auto& a, const auto& b) { return rank(a.first) < rank(b.first); });
    for (const auto& [k, v] : ordered) apply_key(c, k, v);
    for (auto& m : c.models) m.train.seed = derive_seed(c.seed.value_or(0), std::hash<std::string>{}(m.name) & 0xffff);
    c.pfn_pretrain.seed = derive_seed(c.seed.value_or(0), 0x9f17);
    if (c.synth) c.synth->seed = derive_seed(c.seed.value_or(0), 0x5e7d);
    return c;
}

PipelineConfig load_config(const std::filesystem::path& path, const std::vector<std::string>& overrides, bool use_env) {
    const KeyValues kv = KeyValues::parse(read_text_file(path), path.string());
    if (!kv.values.count("version")) throw config_error(path.string() + ": missing `version` key");
    return resolve_config(kv, overrides, use_env);
}

}  // namespace crashsev
