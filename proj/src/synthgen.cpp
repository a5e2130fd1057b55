#include "crashsev/synthgen.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "crashsev/common.hpp"

namespace crashsev {

namespace {

struct NoiseColumn {
    std::string column;
    std::vector<std::string> tokens;
    std::vector<double> probs;
};

const std::vector<std::string>& intersection_tokens() {
    static const std::vector<std::string> t{"Intersection", "Intersection Related", "Driveway Access",
                                            "Non Intersection", "Not Reported"};
    return t;
}

const std::vector<std::string>& harmful_event_tokens() {
    static const std::vector<std::string> t{"Motor Vehicle In Transport", "Fixed Object", "Pedestrian",
                                            "Pedalcyclist", "Parked Car", "Overturned"};
    return t;
}

const std::vector<std::string>& weekday_tokens() {
    static const std::vector<std::string> t{"Monday", "Tuesday", "Wednesday", "Thursday",
                                            "Friday", "Saturday", "Sunday"};
    return t;
}

const std::vector<std::string>& flag_tokens() {
    static const std::vector<std::string> t{"false", "true"};
    return t;
}

const std::vector<std::vector<int>>& speed_values() {
    static const std::vector<std::vector<int>> v{{20, 25, 30}, {35, 40, 45, 50}, {55, 60, 65}, {70, 75}};
    return v;
}

const std::vector<NoiseColumn>& noise_columns() {
    static const std::vector<NoiseColumn> cols{
        {"Prsn_Gndr_ID", {"Male", "Female", "Unknown"}, {0.52, 0.45, 0.03}},
        {"Prsn_Rest_ID", {"Shoulder & Lap Belt", "Lap Belt", "None", "Child Seat", "Unknown"},
         {0.80, 0.05, 0.05, 0.04, 0.06}},
        {"Veh_Make_ID", {"Tesla", "Chevrolet", "Nissan", "Ford", "Hyundai", "Kia", "BMW", "Rivian", "Other"},
         {0.45, 0.10, 0.08, 0.07, 0.07, 0.06, 0.05, 0.04, 0.08}},
        {"Veh_Body_Styl_ID",
         {"Passenger Car, 4-Door", "Sport Utility Vehicle", "Pickup", "Passenger Car, 2-Door", "Van"},
         {0.50, 0.30, 0.08, 0.07, 0.05}},
        {"Wthr_Cond_ID", {"clear", "cloudy", "rain", "snow", "sleet", "fog", "hail", "Unknown"},
         {0.62, 0.18, 0.10, 0.01, 0.01, 0.02, 0.01, 0.05}},
        {"Light_Cond_ID", {"daylight", "dark, lighted", "dark, not lighted", "dusk", "dawn", "Unknown"},
         {0.62, 0.20, 0.08, 0.03, 0.03, 0.04}},
        {"Surf_Cond_ID", {"dry", "wet", "standing water", "gravel", "ice", "snow", "Unknown"},
         {0.80, 0.12, 0.01, 0.01, 0.01, 0.01, 0.04}},
        {"Road_Algn_ID", {"Straight, Level", "Straight, Grade", "Curve, Level", "Curve, Grade", "Unknown"},
         {0.70, 0.12, 0.08, 0.05, 0.05}},
        {"FHE_Collsn_ID",
         {"Same Direction - Rear End", "Angle - Both Going Straight", "Opposite Direction", "Sideswipe",
          "Single Motor Vehicle", "Other"},
         {0.35, 0.25, 0.08, 0.12, 0.12, 0.08}},
        {"HasAutomaticBrakingSystem", {"false", "true"}, {0.3, 0.7}},
    };
    return cols;
}

std::size_t draw_categorical(Rng& rng, const std::vector<double>& probs) {
    const double u = uniform01(rng);
    double acc = 0.0;
    for (std::size_t i = 0; i + 1 < probs.size(); ++i) {
        acc += probs[i];
        if (u < acc) return i;
    }
    return probs.size() - 1;
}

std::size_t index_of(const std::vector<std::string>& tokens, const std::string& t) {
    auto it = std::find(tokens.begin(), tokens.end(), t);
    if (it == tokens.end()) throw data_error("generator does not know token '" + t + "'");
    return static_cast<std::size_t>(it - tokens.begin());
}

Column make_column(const std::string& name, ColumnKind kind, std::size_t n) {
    Column c;
    c.name = name;
    c.kind = kind;
    c.missing.assign(n, 0);
    if (kind == ColumnKind::Categorical) c.tokens.resize(n);
    else c.numbers.resize(n);
    return c;
}

}  // namespace

void GenConfig::validate() const {
    if (n_rows < 1) throw config_error("generator needs n_rows >= 1");
    double sum = 0.0;
    for (double p : class_priors) {
        if (!(p >= 0.0)) throw config_error("class priors must be non-negative");
        sum += p;
    }
    if (std::abs(sum - 1.0) > 1e-12) throw config_error("class priors must sum to 1 (got " + std::to_string(sum) + ")");
    if (!(signal_strength >= 0.0 && signal_strength <= 1.0)) throw config_error("signal_strength must lie in [0, 1]");
    if (!(missing_rate >= 0.0 && missing_rate < 1.0)) throw config_error("missing_rate must lie in [0, 1)");
}

double SignalFeature::prob(std::size_t category, int label, double signal) const {
    const double peaked = category == peak[static_cast<std::size_t>(label)] ? 1.0 : 0.0;
    return (1.0 - signal) * base[category] + signal * peaked;
}

std::vector<std::string> signal_columns() {
    return {"Prsn_Age",         "Crash_Speed_Limit", "Intrsct_Relat_ID", "Harm_Evnt_ID",
            "Day_of_Week",      "HasAutomaticEmergencyBrakingSystem"};
}

GeneratorModel::GeneratorModel(std::array<double, 3> priors, double signal) : priors_(priors), signal_(signal) {
    // Peaks are indexed KA, BC, O.
    features_ = {
        {"Prsn_Age", {0.35, 0.45, 0.20}, {2, 0, 1}},
        {"Crash_Speed_Limit", {0.30, 0.40, 0.20, 0.10}, {3, 2, 0}},
        {"Intrsct_Relat_ID", {0.25, 0.15, 0.10, 0.40, 0.10}, {0, 1, 3}},
        {"Harm_Evnt_ID", {0.55, 0.15, 0.05, 0.05, 0.12, 0.08}, {2, 1, 4}},
        {"Day_of_Week", {0.15, 0.14, 0.14, 0.14, 0.15, 0.15, 0.13}, {5, 6, 1}},
        {"HasAutomaticEmergencyBrakingSystem", {0.5, 0.5}, {0, 1, 1}},
    };
}

double GeneratorModel::bayes_accuracy() const {
    std::vector<std::size_t> radix;
    for (const auto& f : features_) radix.push_back(f.base.size());
    std::vector<std::size_t> x(radix.size(), 0);
    double total = 0.0;
    while (true) {
        double best = 0.0;
        for (int c = 0; c < kNumClasses; ++c) {
            double p = priors_[static_cast<std::size_t>(c)];
            for (std::size_t f = 0; f < features_.size(); ++f) p *= features_[f].prob(x[f], c, signal_);
            best = std::max(best, p);
        }
        total += best;
        std::size_t f = 0;
        while (f < x.size() && ++x[f] == radix[f]) x[f++] = 0;
        if (f == x.size()) break;
    }
    return total;
}

std::vector<std::size_t> GeneratorModel::categories_of(const CrashTable& table, std::size_t r) const {
    std::vector<std::size_t> cats;
    const double age = table.at("Prsn_Age").numbers[r];
    cats.push_back(age <= 30 ? 0 : age <= 60 ? 1 : 2);
    const double speed = table.at("Crash_Speed_Limit").numbers[r];
    cats.push_back(speed <= 30 ? 0 : speed <= 50 ? 1 : speed <= 65 ? 2 : 3);
    cats.push_back(index_of(intersection_tokens(), table.at("Intrsct_Relat_ID").tokens[r]));
    cats.push_back(index_of(harmful_event_tokens(), table.at("Harm_Evnt_ID").tokens[r]));
    cats.push_back(index_of(weekday_tokens(), table.at("Day_of_Week").tokens[r]));
    cats.push_back(index_of(flag_tokens(), table.at("HasAutomaticEmergencyBrakingSystem").tokens[r]));
    return cats;
}

int GeneratorModel::predict(const std::vector<std::size_t>& categories) const {
    int best_c = 0;
    double best = -1.0;
    for (int c = 0; c < kNumClasses; ++c) {
        double p = priors_[static_cast<std::size_t>(c)];
        for (std::size_t f = 0; f < features_.size(); ++f) p *= features_[f].prob(categories[f], c, signal_);
        if (p > best) {
            best = p;
            best_c = c;
        }
    }
    return best_c;
}

GenResult generate_ev_crashes(const GenConfig& cfg) {
    cfg.validate();
    const GeneratorModel model(cfg.class_priors, cfg.signal_strength);
    const Schema schema = reference_schema();
    const std::size_t n = cfg.n_rows + cfg.non_ev_rows;

    CrashTable table;
    table.n_rows = n;
    for (const auto& spec : schema.columns) table.columns.push_back(make_column(spec.name, spec.kind, n));
    auto col = [&](const char* name) -> Column& { return *table.find(name); };
    Column& age = col("Prsn_Age");
    Column& speed = col("Crash_Speed_Limit");
    Column& inter = col("Intrsct_Relat_ID");
    Column& harm = col("Harm_Evnt_ID");
    Column& day = col("Day_of_Week");
    Column& aeb = col("HasAutomaticEmergencyBrakingSystem");
    Column& year = col("Veh_Mod_Year");
    Column& crash_year = col("Crash_Year");
    Column& electric = col("IsElectric");
    Column& severity = col("Prsn_Injry_Sev_ID");
    std::vector<Column*> noise;
    for (const auto& nc : noise_columns()) noise.push_back(&col(nc.column.c_str()));

    const std::vector<double> priors(cfg.class_priors.begin(), cfg.class_priors.end());
    const double s = cfg.signal_strength;
    const auto& feats = model.features();

    // Each row owns a derived RNG stream, so row blocks can be generated independently.
#pragma omp parallel for schedule(static)
    for (long rr = 0; rr < static_cast<long>(n); ++rr) {
        const auto r = static_cast<std::size_t>(rr);
        Rng rng(derive_seed(cfg.seed, r));
        const bool is_ev = r < cfg.n_rows;
        const int label = static_cast<int>(draw_categorical(rng, priors));

        std::vector<std::size_t> cat(feats.size());
        for (std::size_t f = 0; f < feats.size(); ++f) {
            std::vector<double> p(feats[f].base.size());
            for (std::size_t k = 0; k < p.size(); ++k) p[k] = feats[f].prob(k, label, s);
            cat[f] = draw_categorical(rng, p);
        }
        static constexpr int kAgeLo[] = {16, 31, 61};
        static constexpr int kAgeHi[] = {30, 60, 90};
        age.numbers[r] = kAgeLo[cat[0]] + static_cast<double>(uniform_index(rng, kAgeHi[cat[0]] - kAgeLo[cat[0]] + 1));
        const auto& sv = speed_values()[cat[1]];
        speed.numbers[r] = sv[uniform_index(rng, sv.size())];
        inter.tokens[r] = intersection_tokens()[cat[2]];
        harm.tokens[r] = harmful_event_tokens()[cat[3]];
        day.tokens[r] = weekday_tokens()[cat[4]];
        aeb.tokens[r] = flag_tokens()[cat[5]];

        for (std::size_t i = 0; i < noise.size(); ++i) {
            const auto& nc = noise_columns()[i];
            noise[i]->tokens[r] = nc.tokens[draw_categorical(rng, nc.probs)];
            if (uniform01(rng) < cfg.missing_rate) {
                noise[i]->tokens[r].clear();
                noise[i]->missing[r] = 1;
            }
        }
        year.numbers[r] = 2012.0 + static_cast<double>(uniform_index(rng, 13));
        if (uniform01(rng) < cfg.missing_rate) year.missing[r] = 1, year.numbers[r] = 0.0;
        crash_year.numbers[r] = 2017.0 + static_cast<double>(uniform_index(rng, 7));

        const double u = uniform01(rng);
        switch (label) {
            case 0: severity.tokens[r] = u < 0.2 ? "K" : "A"; break;
            case 1: severity.tokens[r] = u < 0.5 ? "B" : "C"; break;
            default: severity.tokens[r] = "O"; break;
        }
        electric.tokens[r] = is_ev ? "true" : "false";
    }
    table.validate();
    return {std::move(table), model.bayes_accuracy()};
}

double signal_for_bayes_accuracy(std::array<double, 3> priors, double target) {
    double lo = 0.0, hi = 1.0;
    if (GeneratorModel(priors, hi).bayes_accuracy() < target)
        throw config_error("target Bayes accuracy is not reachable with this generator");
    if (GeneratorModel(priors, lo).bayes_accuracy() > target)
        throw config_error("target Bayes accuracy is below the max-prior baseline");
    for (int it = 0; it < 60; ++it) {
        const double mid = 0.5 * (lo + hi);
        (GeneratorModel(priors, mid).bayes_accuracy() < target ? lo : hi) = mid;
    }
    return 0.5 * (lo + hi);
}

}  // namespace crashsev
