#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "crashsev/schema.hpp"

namespace crashsev {

struct GenConfig {
    std::size_t n_rows = 23301;
    std::array<double, 3> class_priors{0.05, 0.25, 0.70};  // KA, BC, O
    double signal_strength = 0.5;
    std::uint64_t seed = 1;
    /// Extra rows with IsElectric=false appended after the EV rows (removed again by ingest).
    std::size_t non_ev_rows = 0;
    /// Per-cell missing rate applied to the noise columns only, so the Bayes rate stays exact.
    double missing_rate = 0.02;

    void validate() const;
};

/// One class-conditional categorical feature of the generator:
/// P(category | class) = (1 - s) * base + s * onehot(peak[class]).
struct SignalFeature {
    std::string column;
    std::vector<double> base;
    std::array<std::size_t, 3> peak{};

    double prob(std::size_t category, int label, double signal) const;
};

/// The true generative parameters. Also acts as the plug-in (Bayes) classifier.
class GeneratorModel {
public:
    GeneratorModel(std::array<double, 3> priors, double signal);

    const std::vector<SignalFeature>& features() const { return features_; }

    /// Σ_x max_c π_c Π_f P(x_f | c), enumerated over the joint signal-category space.
    double bayes_accuracy() const;

    /// Category index of each signal feature for row `r` of a raw (unbinned) table.
    std::vector<std::size_t> categories_of(const CrashTable& table, std::size_t r) const;

    /// argmax_c π_c Π_f P(x_f | c); ties resolve to the lower label.
    int predict(const std::vector<std::size_t>& categories) const;

private:
    std::array<double, 3> priors_;
    double signal_;
    std::vector<SignalFeature> features_;
};

/// The columns whose distribution depends on the label.
std::vector<std::string> signal_columns();

struct GenResult {
    CrashTable table;
    double bayes_accuracy = 0.0;
};

/// Synthetic EV-crash records in the reference schema layout (raw, unbinned tokens).
GenResult generate_ev_crashes(const GenConfig& cfg);

/// Bisection on signal_strength so the analytic Bayes accuracy hits `target`.
double signal_for_bayes_accuracy(std::array<double, 3> priors, double target);

}  // namespace crashsev
