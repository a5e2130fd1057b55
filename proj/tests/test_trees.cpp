#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <functional>
#include <set>

#include "crashsev/synthgen.hpp"
#include "crashsev/trees.hpp"
#include "oracles.hpp"
#include "test_data.hpp"
#include "test_util.hpp"

using namespace crashsev;
using testutil::make_dataset;

namespace {

// Node-by-node comparison with exhaustive search.
void check_against_oracle(const DecisionTree& tree, const Matrix& X, const std::vector<int>& y, const CartParams& p) {
    CHECK(testutil::tree_oracle_mismatch(tree, X, y, p) == "");
}

Matrix random_matrix(Rng& rng, std::size_t n, std::size_t p, int levels) { return testutil::random_levels(rng, n, p, levels); }

double log_loss(const TreeEnsemble& e, const Matrix& X, const std::vector<int>& y) {
    double s = 0;
    for (std::size_t r = 0; r < X.rows; ++r) s -= std::log(e.predict_proba(X.row(r))[static_cast<std::size_t>(y[r])]);
    return s / static_cast<double>(X.rows);
}

}  // namespace

TEST_CASE("separable one-feature data gives a depth-1 tree") {
    const Matrix X = testutil::rows_of({{-3}, {-2}, {-1}, {1}, {2}, {3}});
    const std::vector<int> y{0, 0, 0, 1, 1, 1};
    Rng rng(1);
    const DecisionTree t = fit_cart(X, y, {}, CartParams{}, rng);
    CHECK(t.depth() == 1);
    CHECK(t.split_count() == 1);
    for (std::size_t r = 0; r < 6; ++r) CHECK(t.predict(X.row(r)) == y[r]);
    CHECK(t.nodes[0].threshold == 0.0);
}

TEST_CASE("pure labels give a single leaf") {
    const Matrix X = testutil::rows_of({{1, 2}, {3, 4}, {5, 0}});
    Rng rng(1);
    const DecisionTree t = fit_cart(X, {2, 2, 2}, {}, CartParams{}, rng);
    CHECK(t.nodes.size() == 1);
    CHECK(t.nodes[0].is_leaf());
    CHECK(t.nodes[0].distribution[2] == 1.0);
}

TEST_CASE("empty dataset is an error") {
    Rng rng(1);
    CHECK_THROWS_AS(fit_cart(Matrix(0, 2), {}, {}, CartParams{}, rng), Error);
}

TEST_CASE("20-sample two-feature split matches exhaustive search") {
    Rng rng(11);
    const Matrix X = random_matrix(rng, 20, 2, 6);
    std::vector<int> y(20);
    for (auto& v : y) v = static_cast<int>(uniform_index(rng, 3));
    CartParams p;
    const DecisionTree t = fit_cart(X, y, {}, p, rng);
    check_against_oracle(t, X, y, p);
}

TEST_CASE("split selection equals the oracle on random small datasets") {
    Rng rng(12);
    for (int trial = 0; trial < 60; ++trial) {
        const std::size_t n = 5 + uniform_index(rng, 46);
        const std::size_t p = 1 + uniform_index(rng, 5);
        const Matrix X = random_matrix(rng, n, p, 2 + static_cast<int>(uniform_index(rng, 8)));
        std::vector<int> y(n);
        for (auto& v : y) v = static_cast<int>(uniform_index(rng, 3));
        CartParams cp;
        cp.max_depth = 1 + static_cast<int>(uniform_index(rng, 5));
        cp.min_samples_leaf = static_cast<double>(1 + uniform_index(rng, 3));
        const DecisionTree t = fit_cart(X, y, {}, cp, rng);
        check_against_oracle(t, X, y, cp);
    }
}

TEST_CASE("tree node invariants") {
    Rng rng(13);
    const Matrix X = random_matrix(rng, 200, 4, 10);
    std::vector<int> y(200);
    for (auto& v : y) v = static_cast<int>(uniform_index(rng, 3));
    const DecisionTree t = fit_cart(X, y, {}, CartParams{}, rng);
    for (const auto& nd : t.nodes) {
        CHECK(nd.impurity >= 0.0);
        if (nd.is_leaf()) {
            CHECK(nd.distribution[0] + nd.distribution[1] + nd.distribution[2] == doctest::Approx(1.0).epsilon(1e-12));
        } else {
            CHECK(t.nodes[static_cast<std::size_t>(nd.left)].weight + t.nodes[static_cast<std::size_t>(nd.right)].weight ==
                  nd.weight);
        }
    }
}

TEST_CASE("forest with one tree, all features and no bootstrap equals CART") {
    Rng rng(14);
    const Matrix X = random_matrix(rng, 150, 5, 7);
    std::vector<int> y(150);
    for (std::size_t i = 0; i < 150; ++i) y[i] = (X(i, 0) + X(i, 2) > 6) ? 1 : static_cast<int>(uniform_index(rng, 3));
    const Dataset D = make_dataset(X, y);
    ForestParams fp;
    fp.n_trees = 1;
    fp.bootstrap = false;
    fp.feature_subset_size = 5;
    const TreeEnsemble f = fit_random_forest(D, fp);
    Rng r2(99);
    const DecisionTree c = fit_cart(D, CartParams{fp.max_depth, fp.min_samples_leaf, 0}, r2);
    Rng q(15);
    for (int i = 0; i < 500; ++i) {
        double x[5];
        for (double& v : x) v = uniform01(q) * 8 - 1;
        CHECK(f.predict(x) == c.predict(x));
    }
}

TEST_CASE("forest is deterministic for a fixed seed") {
    Rng rng(16);
    const Matrix X = random_matrix(rng, 120, 4, 5);
    std::vector<int> y(120);
    for (auto& v : y) v = static_cast<int>(uniform_index(rng, 3));
    const Dataset D = make_dataset(X, y);
    ForestParams fp;
    fp.n_trees = 10;
    fp.seed = 5;
    const auto a = mdi_importance(fit_random_forest(D, fp));
    const auto b = mdi_importance(fit_random_forest(D, fp));
    CHECK(a.scores == b.scores);
    const auto fa = fit_random_forest(D, fp);
    CHECK(fa.oob_mask.size() == 10);
}

TEST_CASE("forest beats the max-prior baseline on planted data") {
    const auto s = testutil::synth_split(4000, 0.6, 3);
    ForestParams fp;
    fp.n_trees = 30;
    fp.max_depth = 8;
    const TreeEnsemble f = fit_random_forest(s.train, fp);
    const auto pred = f.predict(s.test.X);
    std::size_t hit = 0, max_class = 0;
    const auto counts = s.test.class_counts();
    for (std::size_t i = 0; i < pred.size(); ++i) hit += pred[i] == s.test.y[i];
    max_class = *std::max_element(counts.begin(), counts.end());
    CHECK(hit > max_class);
}

TEST_CASE("boosting overfits ten separable points") {
    const Matrix X = testutil::rows_of({{0}, {1}, {2}, {3}, {4}, {10}, {11}, {12}, {20}, {21}});
    const std::vector<int> y{0, 0, 0, 0, 0, 1, 1, 1, 2, 2};
    BoostParams bp;
    bp.n_rounds = 400;
    bp.learning_rate = 0.3;
    bp.max_depth = 2;
    const TreeEnsemble e = fit_gbt(make_dataset(X, y), bp);
    CHECK(log_loss(e, X, y) < 0.01);
    CHECK(e.train_loss.back() == doctest::Approx(log_loss(e, X, y)).epsilon(1e-9));
}

TEST_CASE("zero learning rate keeps the prior model") {
    Rng rng(17);
    const Matrix X = random_matrix(rng, 40, 2, 4);
    std::vector<int> y(40);
    for (std::size_t i = 0; i < 40; ++i) y[i] = i < 6 ? 0 : i < 16 ? 1 : 2;
    BoostParams bp;
    bp.n_rounds = 5;
    bp.learning_rate = 0.0;
    const TreeEnsemble e = fit_gbt(make_dataset(X, y), bp);
    for (std::size_t r = 0; r < 40; ++r) {
        const auto p = e.predict_proba(X.row(r));
        CHECK(p[0] == doctest::Approx(6.0 / 40).epsilon(1e-12));
        CHECK(p[1] == doctest::Approx(10.0 / 40).epsilon(1e-12));
        CHECK(p[2] == doctest::Approx(24.0 / 40).epsilon(1e-12));
    }
}

TEST_CASE("boosted training loss is non-increasing at small learning rates") {
    for (std::uint64_t seed : {1, 2, 3}) {
        Rng rng(seed);
        const Matrix X = random_matrix(rng, 80, 3, 6);
        std::vector<int> y(80);
        for (std::size_t i = 0; i < 80; ++i)
            y[i] = X(i, 0) > 3 ? 0 : (X(i, 1) > 2 ? 1 : static_cast<int>(uniform_index(rng, 3)));
        for (double lr : {0.1, 0.05}) {
            BoostParams bp;
            bp.n_rounds = 40;
            bp.learning_rate = lr;
            bp.max_depth = 3;
            const TreeEnsemble e = fit_gbt(make_dataset(X, y), bp);
            REQUIRE(e.train_loss.size() == 40);
            for (std::size_t i = 1; i < e.train_loss.size(); ++i) CHECK(e.train_loss[i] <= e.train_loss[i - 1] + 1e-12);
        }
    }
}

TEST_CASE("single feature takes all importance") {
    Rng rng(18);
    const Matrix X = random_matrix(rng, 60, 1, 8);
    std::vector<int> y(60);
    for (std::size_t i = 0; i < 60; ++i) y[i] = X(i, 0) > 4 ? 1 : 0;
    const Dataset D = make_dataset(X, y);
    ForestParams fp;
    fp.n_trees = 5;
    CHECK(mdi_importance(fit_random_forest(D, fp)).scores == std::vector<double>{1.0});
    BoostParams bp;
    bp.n_rounds = 5;
    CHECK(gain_importance(fit_gbt(D, bp)).scores == std::vector<double>{1.0});
}

TEST_CASE("duplicated feature splits the single-copy score") {
    Rng rng(19);
    const Matrix X2 = random_matrix(rng, 200, 2, 10);
    std::vector<int> y(200);
    for (std::size_t i = 0; i < 200; ++i)
        y[i] = X2(i, 0) + X2(i, 1) > 10 ? 2 : X2(i, 1) > 5 ? 1 : static_cast<int>(uniform_index(rng, 2));
    Matrix X3(200, 3);
    for (std::size_t i = 0; i < 200; ++i) {
        X3(i, 0) = X2(i, 0);
        X3(i, 1) = X2(i, 1);
        X3(i, 2) = X2(i, 1);
    }
    ForestParams fp;
    fp.n_trees = 1;
    fp.bootstrap = false;
    fp.max_depth = 6;
    fp.feature_subset_size = 100;
    const auto single = mdi_importance(fit_random_forest(make_dataset(X2, y), fp));
    const auto dup = mdi_importance(fit_random_forest(make_dataset(X3, y), fp));
    CHECK(dup.scores[0] == doctest::Approx(single.scores[0]).epsilon(1e-12));
    CHECK(dup.scores[1] + dup.scores[2] == doctest::Approx(single.scores[1]).epsilon(1e-12));
    // first strict maximum wins, so the earlier copy takes everything
    CHECK(dup.scores[2] == 0.0);
}

TEST_CASE("hand-built trees give the normalization arithmetic") {
    TreeEnsemble forest;
    forest.kind = EnsembleKind::Forest;
    forest.feature_names = {"A", "B"};
    DecisionTree t;
    t.n_features = 2;
    t.nodes.resize(5);
    t.nodes[0].feature = 0;
    t.nodes[0].left = 1;
    t.nodes[0].right = 2;
    t.nodes[0].impurity_decrease = 0.3;
    t.nodes[1].feature = 1;
    t.nodes[1].left = 3;
    t.nodes[1].right = 4;
    t.nodes[1].impurity_decrease = 0.1;
    forest.trees.push_back(t);
    const auto m = mdi_importance(forest);
    CHECK(m.scores[0] == doctest::Approx(0.75).epsilon(1e-15));
    CHECK(m.scores[1] == doctest::Approx(0.25).epsilon(1e-15));

    TreeEnsemble boosted = forest;
    boosted.kind = EnsembleKind::Boosted;
    boosted.trees[0].nodes[0].gain = 2.0;
    boosted.trees[0].nodes[1].gain = 6.0;
    const auto g = gain_importance(boosted);
    CHECK(g.scores[0] == 0.25);
    CHECK(g.scores[1] == 0.75);
    CHECK(g.ranked_names() == std::vector<std::string>{"B", "A"});

    TreeEnsemble empty = forest;
    empty.trees[0].nodes.assign(1, TreeNode{});
    CHECK_THROWS_AS(mdi_importance(empty), Error);
}

TEST_CASE("combined_rank examples") {
    const auto a = make_ranking({"f1", "f2", "f3"}, {3, 2, 1});
    const auto b = make_ranking({"f1", "f2", "f3"}, {1, 2, 3});
    CHECK(combined_rank(a, b, 1) == std::vector<std::string>{"f1"});
    CHECK(combined_rank(a, a, 2) == std::vector<std::string>{"f1", "f2"});
    auto full = combined_rank(a, b, 3);
    std::sort(full.begin(), full.end());
    CHECK(full == std::vector<std::string>{"f1", "f2", "f3"});
    const auto c = make_ranking({"f1", "f2", "zz"}, {1, 1, 1});
    CHECK_THROWS_AS(combined_rank(a, c, 1), Error);
    CHECK_THROWS_AS(combined_rank(a, b, 4), Error);
}

TEST_CASE("combined_rank is invariant under monotone rescaling") {
    Rng rng(20);
    for (int trial = 0; trial < 50; ++trial) {
        const std::size_t n = 3 + uniform_index(rng, 10);
        std::vector<std::string> names;
        std::vector<double> sa, sb;
        for (std::size_t i = 0; i < n; ++i) {
            names.push_back("v" + std::to_string(i));
            sa.push_back(0.01 + uniform01(rng));
            sb.push_back(0.01 + uniform01(rng));
        }
        std::vector<double> ta, tb;
        for (double v : sa) ta.push_back(7.0 * v * v * v);
        for (double v : sb) tb.push_back(std::exp(v) - 1.0);
        const std::size_t k = 1 + uniform_index(rng, n);
        CHECK(combined_rank(make_ranking(names, sa), make_ranking(names, sb), k) ==
              combined_rank(make_ranking(names, ta), make_ranking(names, tb), k));
    }
}

TEST_CASE("importance scores are a distribution") {
    const auto s = testutil::synth_split(2000, 0.5, 4);
    ForestParams fp;
    fp.n_trees = 10;
    BoostParams bp;
    bp.n_rounds = 10;
    for (const auto& r : {mdi_importance(fit_random_forest(s.train, fp)), gain_importance(fit_gbt(s.train, bp))}) {
        double total = 0;
        for (double v : r.scores) {
            CHECK(v >= 0.0);
            total += v;
        }
        CHECK(std::abs(total - 1.0) <= 1e-9);
    }
}

TEST_CASE("planted signal variables lead the boosted gain ranking") {
    const auto s = testutil::synth_split(6000, 0.6, 5);
    BoostParams bp;
    bp.n_rounds = 30;
    const auto r = aggregate_by_group(gain_importance(fit_gbt(s.train, bp)), s.train);
    const auto names = r.ranked_names();
    const auto sig = signal_columns();
    std::size_t hits = 0;
    for (std::size_t i = 0; i < sig.size() && i < names.size(); ++i)
        hits += std::find(sig.begin(), sig.end(), names[i]) != sig.end();
    INFO("top: " << names[0] << " " << names[1] << " " << names[2]);
    CHECK(hits >= 4);
}

TEST_CASE("rankings csv and feature list round-trip") {
    testutil::TempDir dir("trees");
    const auto a = make_ranking({"x", "y", "z"}, {0.5, 0.3, 0.2});
    const auto b = make_ranking({"x", "y", "z"}, {0.2, 0.5, 0.3});
    write_rankings_csv(a, b, dir / "r.csv");
    const std::string text = read_text_file(dir / "r.csv");
    CHECK(text.rfind("feature,score_forest,score_boosted,fused_rank\n", 0) == 0);
    write_feature_list({"x", "y"}, dir / "f.txt");
    CHECK(read_feature_list(dir / "f.txt") == std::vector<std::string>{"x", "y"});
}
