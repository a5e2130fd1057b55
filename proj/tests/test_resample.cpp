#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>

#include "crashsev/resample.hpp"
#include "oracles.hpp"
#include "test_data.hpp"
#include "test_util.hpp"

using namespace crashsev;
using testutil::make_dataset;
using testutil::rows_of;
using testutil::enn_oracle;
using testutil::knn_oracle;
using testutil::random_points;


TEST_CASE("knn example") {
    const Matrix X = rows_of({{0, 1}, {2, 0}, {5, 5}});
    const double q[2] = {0, 0};
    CHECK(knn(X, q, 2) == std::vector<std::size_t>{0, 1});
}

TEST_CASE("knn zero distance and ties") {
    const Matrix X = rows_of({{1, 1}, {0, 0}, {-1, 0}, {1, 0}});
    const double q[2] = {0, 0};
    CHECK(knn(X, q, 1) == std::vector<std::size_t>{1});
    // (-1,0) and (1,0) tie at distance 1: lower index first
    CHECK(knn(X, q, 3) == std::vector<std::size_t>{1, 2, 3});
    CHECK(knn(X, q, 2, 1) == std::vector<std::size_t>{2, 3});
    CHECK_THROWS_AS(knn(X, q, 5), Error);
    CHECK_THROWS_AS(knn(X, q, 4, 0), Error);
}

TEST_CASE("knn matches exhaustive search on 1000 queries") {
    Rng rng(1);
    for (int q = 0; q < 1000; ++q) {
        const bool grid = q % 2 == 0;  // gridded points produce many exact ties
        const std::size_t n = 2 + uniform_index(rng, 60);
        const std::size_t d = 1 + uniform_index(rng, 6);
        const Matrix X = random_points(rng, n, d, grid);
        std::vector<double> query(d);
        for (auto& v : query) v = grid ? static_cast<double>(uniform_index(rng, 4)) : uniform01(rng) * 2 - 1;
        const long exclude = q % 3 == 0 ? static_cast<long>(uniform_index(rng, n)) : -1;
        const std::size_t k = 1 + uniform_index(rng, n - (exclude >= 0 ? 1 : 0));
        CHECK(knn(X, query.data(), k, exclude) == knn_oracle(X, query.data(), k, exclude));
    }
}

TEST_CASE("batched knn equals the serial reference and the oracle") {
    Rng rng(2);
    for (int trial = 0; trial < 20; ++trial) {
        const std::size_t n = 5 + uniform_index(rng, 300);
        const Matrix X = random_points(rng, n, 1 + uniform_index(rng, 8), trial % 2 == 0);
        const std::size_t k = 1 + uniform_index(rng, std::min<std::size_t>(n - 1, 7));
        const auto par = knn_all(X, k);
        CHECK(par == serial_knn_all(X, k));
        for (std::size_t i = 0; i < n; i += 7) {
            const auto o = knn_oracle(X, X.row(i), k, static_cast<long>(i));
            CHECK(std::equal(o.begin(), o.end(), par.begin() + static_cast<long>(i * k)));
        }
    }
}

TEST_CASE("smote midpoint and endpoint") {
    const Dataset D = make_dataset(rows_of({{0, 0}, {1, 1}, {5, 5}, {6, 5}, {5, 6}, {6, 6}}), {0, 0, 2, 2, 2, 2});
    SmoteParams p;
    p.k = 1;
    p.fixed_gap = 0.5;
    Rng rng(3);
    const SmoteResult r = smote(D, p, rng);
    REQUIRE(r.data.n_rows() == 8);
    for (std::size_t i = 6; i < 8; ++i) {
        CHECK(r.data.y[i] == 0);
        CHECK(r.data.X(i, 0) == 0.5);
        CHECK(r.data.X(i, 1) == 0.5);
        CHECK(r.data.synthetic[i] == 1);
    }
    p.fixed_gap = 0.0;
    const SmoteResult e = smote(D, p, rng);
    for (std::size_t i = 6; i < 8; ++i) {
        const auto& o = e.origins[i - 6];
        CHECK(e.data.X(i, 0) == D.X(o.seed_row, 0));
        CHECK(e.data.X(i, 1) == D.X(o.seed_row, 1));
    }
}

TEST_CASE("smote on balanced input is the identity") {
    const Dataset D = make_dataset(rows_of({{0}, {1}, {2}, {3}, {4}, {5}}), {0, 0, 1, 1, 2, 2});
    Rng rng(4);
    const SmoteResult r = smote(D, SmoteParams{}, rng);
    CHECK(r.data.X.data == D.X.data);
    CHECK(r.data.y == D.y);
    CHECK(r.origins.empty());
    for (int c = 0; c < 3; ++c) CHECK(r.report.synthesized[c] == 0);
}

TEST_CASE("smote singleton class is an error") {
    const Dataset D = make_dataset(rows_of({{0}, {1}, {2}, {3}}), {0, 2, 2, 2});
    Rng rng(5);
    CHECK_THROWS_AS(smote(D, SmoteParams{}, rng), Error);
}

TEST_CASE("smote points are convex combinations with preserved labels (10^4 draws)") {
    Rng gen(6);
    std::size_t draws = 0;
    while (draws < 10000) {
        const std::size_t d = 1 + uniform_index(gen, 5);
        const std::size_t n0 = 2 + uniform_index(gen, 10), n1 = 2 + uniform_index(gen, 20), n2 = 40;
        Matrix X(n0 + n1 + n2, d);
        std::vector<int> y;
        for (std::size_t i = 0; i < X.rows; ++i) {
            const int c = i < n0 ? 0 : i < n0 + n1 ? 1 : 2;
            y.push_back(c);
            for (std::size_t j = 0; j < d; ++j) X(i, j) = uniform01(gen) * 4 - 2 + c;
        }
        const Dataset D = make_dataset(X, y);
        SmoteParams p;
        p.k = 1 + uniform_index(gen, 6);
        Rng rng(gen());
        const SmoteResult r = smote(D, p, rng);
        std::string why;
        draws += testutil::smote_violations(D, r, p.k, why);
        CHECK(why == "");
        for (int c = 0; c < 3; ++c) CHECK(r.report.after_smote[c] == 40);
    }
}

TEST_CASE("enn examples") {
    const Dataset single = make_dataset(rows_of({{0}, {1}, {2}, {3}, {4}}), {1, 1, 1, 1, 1});
    const EnnResult a = enn(single, 3);
    CHECK(a.data.n_rows() == 5);
    CHECK(a.kept == std::vector<std::size_t>{0, 1, 2, 3, 4});

    // the BC point at the centre of four KA points goes
    const Dataset island = make_dataset(rows_of({{0, 0}, {1, 0}, {-1, 0}, {0, 1}, {0, -1}, {10, 10}}), {1, 0, 0, 0, 0, 0});
    const EnnResult b = enn(island, 3);
    CHECK(std::find(b.kept.begin(), b.kept.end(), 0) == b.kept.end());
    CHECK(b.report.removed[1] == 1);
}

TEST_CASE("enn matches the brute-force rule on 200 small datasets") {
    Rng rng(7);
    for (int t = 0; t < 200; ++t) {
        const std::size_t n = 5 + uniform_index(rng, 46);
        const std::size_t d = 1 + uniform_index(rng, 4);
        const Matrix X = random_points(rng, n, d, t % 2 == 0);
        std::vector<int> y(n);
        for (auto& v : y) v = static_cast<int>(uniform_index(rng, t % 3 == 0 ? 2 : 3));
        const std::size_t k = 1 + uniform_index(rng, 4);
        const EnnResult r = enn(make_dataset(X, y), k);
        const auto expect = enn_oracle(X, y, k);
        CHECK(r.kept == expect);
        REQUIRE(r.data.n_rows() == expect.size());
        for (std::size_t i = 0; i < expect.size(); ++i) {
            CHECK(r.data.row_ids[i] == expect[i]);
            CHECK(std::equal(r.data.X.row(i), r.data.X.row(i) + d, X.row(expect[i])));
        }
    }
}

TEST_CASE("enn interleaved 12-point set") {
    Matrix X(12, 1);
    std::vector<int> y(12);
    for (std::size_t i = 0; i < 12; ++i) {
        X(i, 0) = static_cast<double>(i);
        y[i] = (i % 3 == 0) ? 1 : 0;
    }
    CHECK(enn(make_dataset(X, y), 3).kept == enn_oracle(X, y, 3));
}

TEST_CASE("smoteenn identity on balanced separated clusters") {
    Matrix X(30, 2);
    std::vector<int> y(30);
    Rng g(8);
    for (std::size_t i = 0; i < 30; ++i) {
        y[i] = static_cast<int>(i / 10);
        X(i, 0) = 100.0 * y[i] + uniform01(g);
        X(i, 1) = uniform01(g);
    }
    const Dataset D = make_dataset(X, y);
    Rng rng(9);
    const SmoteEnnResult r = smoteenn(D, 5, 3, rng);
    CHECK(r.data.X.data == D.X.data);
    CHECK(r.data.y == D.y);
    for (int c = 0; c < 3; ++c) {
        CHECK(r.report.synthesized[c] == 0);
        CHECK(r.report.removed[c] == 0);
    }
}

TEST_CASE("smoteenn is deterministic and its report is consistent") {
    const auto s = testutil::synth_split(3000, 0.5, 10);
    Rng a(11), b(11);
    const SmoteEnnResult r1 = smoteenn(s.train, 5, 3, a);
    const SmoteEnnResult r2 = smoteenn(s.train, 5, 3, b);
    CHECK(r1.data.X.data == r2.data.X.data);
    CHECK(r1.data.y == r2.data.y);
    const auto counts = s.train.class_counts();
    for (int c = 0; c < 3; ++c) {
        CHECK(r1.report.original[c] == counts[c]);
        CHECK(r1.report.after_smote[c] >= r1.report.original[c]);
        CHECK(r1.report.after_enn[c] <= r1.report.after_smote[c]);
        CHECK(r1.report.after_smote[c] == r1.report.original[c] + r1.report.synthesized[c]);
        CHECK(r1.report.after_enn[c] == r1.report.after_smote[c] - r1.report.removed[c]);
    }
    CHECK(r1.report.imbalance_ratio_after() < r1.report.imbalance_ratio_before());
}

TEST_CASE("class weights") {
    auto w = class_weights({0, 0, 1, 1, 2, 2});
    CHECK(w == std::vector<double>{1, 1, 1});
    std::vector<int> y(15, 0);
    for (std::size_t i = 10; i < 15; ++i) y[i] = 1;
    w = class_weights(y, 2);
    CHECK(w[0] == doctest::Approx(0.75).epsilon(1e-15));
    CHECK(w[1] == doctest::Approx(1.5).epsilon(1e-15));
    CHECK_THROWS_AS(class_weights({0, 0, 1}), Error);

    Rng rng(12);
    for (int t = 0; t < 100; ++t) {
        std::vector<int> v;
        std::size_t n[3];
        for (int c = 0; c < 3; ++c) {
            n[c] = 1 + uniform_index(rng, 500);
            v.insert(v.end(), n[c], c);
        }
        const auto cw = class_weights(v);
        double total = 0;
        for (int c = 0; c < 3; ++c) {
            total += cw[c] * static_cast<double>(n[c]);
            CHECK(std::abs(cw[c] * static_cast<double>(n[c]) - cw[0] * static_cast<double>(n[0])) <= 1e-12 * v.size());
        }
        CHECK(std::abs(total - static_cast<double>(v.size())) <= 1e-9);
    }
}

TEST_CASE("distribution report has every feature, scope and stage") {
    testutil::TempDir dir("resample");
    const Dataset D = make_dataset(rows_of({{0, 1}, {1, 2}, {2, 0}, {3, 3}, {0, 0}, {1, 1}}), {0, 0, 1, 1, 2, 2});
    write_distribution_report(D, D, dir / "d.csv", 4);
    const std::string t = read_text_file(dir / "d.csv");
    CHECK(t.rfind("feature,scope,stage,bin,lo,hi,count,fraction\n", 0) == 0);
    const auto lines = std::count(t.begin(), t.end(), '\n');
    // 2 features x (overall + 3 classes) x 2 stages x 4 bins + header
    CHECK(lines == 2 * 4 * 2 * 4 + 1);
}
