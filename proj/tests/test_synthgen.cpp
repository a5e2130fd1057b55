#include "doctest.h"

#include <cmath>

#include "crashsev/common.hpp"
#include "crashsev/schema.hpp"
#include "crashsev/synthgen.hpp"
#include "test_util.hpp"

using namespace crashsev;

namespace {

std::array<double, 3> class_fractions(const CrashTable& t) {
    std::array<double, 3> f{};
    for (int y : severity_labels(t, reference_schema())) f[static_cast<std::size_t>(y)] += 1;
    for (auto& v : f) v /= static_cast<double>(t.n_rows);
    return f;
}

// accuracy of the true-parameter plug-in classifier on a generated table
double plug_in_accuracy(const GenConfig& g, const CrashTable& t) {
    const GeneratorModel model(g.class_priors, g.signal_strength);
    const auto y = severity_labels(t, reference_schema());
    std::size_t hit = 0;
    for (std::size_t r = 0; r < t.n_rows; ++r) hit += model.predict(model.categories_of(t, r)) == y[r];
    return static_cast<double>(hit) / static_cast<double>(t.n_rows);
}

}  // namespace

TEST_CASE("class proportions track the priors") {
    GenConfig g;
    g.n_rows = 10000;
    g.class_priors = {0.05, 0.25, 0.70};
    g.seed = 42;
    const auto f = class_fractions(generate_ev_crashes(g).table);
    for (std::size_t c = 0; c < 3; ++c) CHECK(std::abs(f[c] - g.class_priors[c]) <= 0.01);
}

TEST_CASE("zero signal gives the max-prior accuracy") {
    GenConfig g;
    g.n_rows = 20000;
    g.signal_strength = 0.0;
    g.seed = 9;
    const GenResult r = generate_ev_crashes(g);
    CHECK(r.bayes_accuracy == doctest::Approx(0.70).epsilon(1e-12));
    CHECK(std::abs(plug_in_accuracy(g, r.table) - 0.70) < 0.01);
}

TEST_CASE("paper-scale dataset") {
    GenConfig g;
    g.seed = 1;
    const GenResult r = generate_ev_crashes(g);
    CHECK(r.table.n_rows == 23301);
    r.table.validate();
    CHECK(r.table.columns.size() == reference_schema().columns.size());
}

TEST_CASE("same seed is byte-identical, different seed is not") {
    testutil::TempDir dir("synth");
    GenConfig g;
    g.n_rows = 3000;
    g.non_ev_rows = 100;
    g.seed = 77;
    write_crash_csv(generate_ev_crashes(g).table, dir / "a.csv");
    write_crash_csv(generate_ev_crashes(g).table, dir / "b.csv");
    g.seed = 78;
    write_crash_csv(generate_ev_crashes(g).table, dir / "c.csv");
    CHECK(sha256_file(dir / "a.csv") == sha256_file(dir / "b.csv"));
    CHECK(sha256_file(dir / "a.csv") != sha256_file(dir / "c.csv"));
}

TEST_CASE("plug-in classifier attains the reported Bayes rate on 100k rows") {
    for (double s : {0.3, 0.6}) {
        GenConfig g;
        g.n_rows = 100000;
        g.signal_strength = s;
        g.seed = 2024;
        const GenResult r = generate_ev_crashes(g);
        const double acc = plug_in_accuracy(g, r.table);
        INFO("signal " << s << " bayes " << r.bayes_accuracy << " plug-in " << acc);
        CHECK(std::abs(acc - r.bayes_accuracy) <= 0.01);
    }
}

TEST_CASE("Bayes accuracy grows with signal and bisection hits its target") {
    const std::array<double, 3> pri{0.05, 0.25, 0.70};
    double prev = 0;
    for (double s = 0; s <= 1.0001; s += 0.1) {
        const double a = GeneratorModel(pri, std::min(s, 1.0)).bayes_accuracy();
        CHECK(a >= prev - 1e-12);
        CHECK(a <= 1.0 + 1e-12);
        prev = a;
    }
    const double s = signal_for_bayes_accuracy(pri, 0.90);
    CHECK(GeneratorModel(pri, s).bayes_accuracy() == doctest::Approx(0.90).epsilon(1e-6));
}

TEST_CASE("class-conditional probabilities are distributions") {
    const GeneratorModel m({0.2, 0.3, 0.5}, 0.7);
    for (const auto& f : m.features())
        for (int c = 0; c < 3; ++c) {
            double s = 0;
            for (std::size_t k = 0; k < f.base.size(); ++k) {
                CHECK(f.prob(k, c, 0.7) >= 0.0);
                s += f.prob(k, c, 0.7);
            }
            CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
        }
}

TEST_CASE("invalid priors are rejected") {
    GenConfig g;
    g.class_priors = {0.5, 0.5, 0.5};
    CHECK_THROWS_AS(g.validate(), Error);
    CHECK_THROWS_AS(generate_ev_crashes(g), Error);
    g.class_priors = {0.05, 0.25, 0.70};
    g.n_rows = 0;
    CHECK_THROWS_AS(g.validate(), Error);
}

TEST_CASE("non-EV rows are appended and flagged false") {
    GenConfig g;
    g.n_rows = 100;
    g.non_ev_rows = 30;
    g.seed = 4;
    const CrashTable t = generate_ev_crashes(g).table;
    CHECK(t.n_rows == 130);
    CHECK(apply_row_filters(t, reference_schema()).n_rows == 100);
}
