#include "crashsev/trees.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <map>
#include <numeric>
#include <set>

#include "crashsev/util.hpp"

namespace crashsev {

namespace {

using SortedColumns = std::vector<std::vector<std::uint32_t>>;

SortedColumns presort(const Matrix& X) {
    SortedColumns order(X.cols);
#pragma omp parallel for schedule(dynamic)
    for (long ff = 0; ff < static_cast<long>(X.cols); ++ff) {
        const auto f = static_cast<std::size_t>(ff);
        auto& idx = order[f];
        idx.resize(X.rows);
        std::iota(idx.begin(), idx.end(), 0u);
        std::stable_sort(idx.begin(), idx.end(), [&](std::uint32_t a, std::uint32_t b) { return X(a, f) < X(b, f); });
    }
    return order;
}

double split_midpoint(double lo, double hi) {
    double mid = 0.5 * (lo + hi);
    if (!(mid < hi)) mid = lo;  // adjacent doubles
    return mid;
}

struct ClassStat {
    std::array<double, kNumClasses> c{};
    double w = 0.0;

    double sum_sq_over_w() const {
        if (w <= 0.0) return 0.0;
        double s = 0.0;
        for (double v : c) s += v * v;
        return s / w;
    }
    double gini() const {
        if (w <= 0.0) return 0.0;
        double s = 0.0;
        for (double v : c) s += (v / w) * (v / w);
        return 1.0 - s;
    }
};

struct GiniPolicy {
    using Stat = ClassStat;
    const std::vector<int>& y;
    const std::vector<double>& weights;
    double min_leaf;

    void add(Stat& s, std::size_t i) const {
        s.c[static_cast<std::size_t>(y[i])] += weights[i];
        s.w += weights[i];
    }
    Stat minus(const Stat& t, const Stat& l) const {
        Stat r;
        for (int k = 0; k < kNumClasses; ++k) r.c[k] = t.c[k] - l.c[k];
        r.w = t.w - l.w;
        return r;
    }
    bool valid(const Stat& l, const Stat& r) const { return l.w >= min_leaf && r.w >= min_leaf; }
    // n_t G_t - n_L G_L - n_R G_R, expressed through the sums of squared counts.
    double score(const Stat& l, const Stat& r, const Stat& t) const {
        return l.sum_sq_over_w() + r.sum_sq_over_w() - t.sum_sq_over_w();
    }
    bool splittable(const Stat& t) const { return t.w >= 2.0 * min_leaf && t.gini() > 0.0; }
};

struct GradStat {
    double g = 0.0;
    double h = 0.0;
    double w = 0.0;
};

struct NewtonPolicy {
    using Stat = GradStat;
    const std::vector<double>& grad;
    const std::vector<double>& hess;
    double min_leaf;
    double l2;

    void add(Stat& s, std::size_t i) const {
        s.g += grad[i];
        s.h += hess[i];
        s.w += 1.0;
    }
    Stat minus(const Stat& t, const Stat& l) const { return {t.g - l.g, t.h - l.h, t.w - l.w}; }
    bool valid(const Stat& l, const Stat& r) const { return l.w >= min_leaf && r.w >= min_leaf; }
    double score(const Stat& l, const Stat& r, const Stat& t) const {
        return 0.5 * (l.g * l.g / (l.h + l2) + r.g * r.g / (r.h + l2) - t.g * t.g / (t.h + l2));
    }
    bool splittable(const Stat& t) const { return t.w >= 2.0 * min_leaf; }
};

struct BestSplit {
    double score = 0.0;
    int feature = -1;
    double threshold = 0.0;
};

constexpr double kMinScore = 1e-12;

// Level-wise exact greedy growth over presorted columns. Every node at one depth is
// processed in a single sweep per feature; per node the scan visits features in ascending
// order and thresholds in ascending order, keeping the first strict maximum.
template <class Policy, class Finalize>
DecisionTree grow_tree(const Matrix& X, const SortedColumns& order, const std::vector<double>& weights,
                       const Policy& policy, int max_depth, std::size_t subset_size, Rng* rng, Finalize&& finalize) {
    using Stat = typename Policy::Stat;
    const std::size_t n = X.rows;
    const std::size_t p = X.cols;

    DecisionTree tree;
    tree.n_features = p;
    std::vector<Stat> totals;
    std::vector<int> node_of(n, -1);
    Stat root;
    for (std::size_t i = 0; i < n; ++i) {
        if (weights[i] <= 0.0) continue;
        node_of[i] = 0;
        policy.add(root, i);
    }
    if (root.w <= 0.0) throw data_error("cannot fit a tree on an empty dataset");
    const double root_weight = root.w;
    tree.nodes.emplace_back();
    totals.push_back(root);

    std::vector<int> active;
    if (max_depth > 0 && policy.splittable(root)) active.push_back(0);

    for (int depth = 0; !active.empty(); ++depth) {
        const std::size_t na = active.size();
        std::vector<int> slot(tree.nodes.size(), -1);
        for (std::size_t a = 0; a < na; ++a) slot[static_cast<std::size_t>(active[a])] = static_cast<int>(a);

        std::vector<std::vector<std::uint8_t>> cand(na, std::vector<std::uint8_t>(p, 1));
        std::vector<std::uint8_t> any_cand(p, 0);
        const bool subsample = subset_size > 0 && subset_size < p;
        for (std::size_t a = 0; a < na; ++a) {
            if (subsample) {
                std::vector<std::size_t> perm(p);
                std::iota(perm.begin(), perm.end(), 0);
                for (std::size_t i = 0; i < subset_size; ++i) std::swap(perm[i], perm[i + uniform_index(*rng, p - i)]);
                std::fill(cand[a].begin(), cand[a].end(), 0);
                for (std::size_t i = 0; i < subset_size; ++i) cand[a][perm[i]] = 1;
            }
            for (std::size_t f = 0; f < p; ++f) any_cand[f] |= cand[a][f];
        }

        std::vector<BestSplit> best(na);
        std::vector<Stat> left(na);
        std::vector<double> last(na);
        std::vector<std::uint8_t> seen(na);
        for (std::size_t f = 0; f < p; ++f) {
            if (!any_cand[f]) continue;
            std::fill(left.begin(), left.end(), Stat{});
            std::fill(seen.begin(), seen.end(), 0);
            for (std::uint32_t s : order[f]) {
                const int node = node_of[s];
                if (node < 0) continue;
                const int a = slot[static_cast<std::size_t>(node)];
                if (a < 0 || !cand[static_cast<std::size_t>(a)][f]) continue;
                const auto ai = static_cast<std::size_t>(a);
                const double v = X(s, f);
                if (seen[ai] && v > last[ai]) {
                    const Stat& t = totals[static_cast<std::size_t>(node)];
                    const Stat r = policy.minus(t, left[ai]);
                    if (policy.valid(left[ai], r)) {
                        const double sc = policy.score(left[ai], r, t);
                        if (sc > kMinScore && sc > best[ai].score) {
                            best[ai] = {sc, static_cast<int>(f), split_midpoint(last[ai], v)};
                        }
                    }
                }
                policy.add(left[ai], s);
                last[ai] = v;
                seen[ai] = 1;
            }
        }

        // Create children and route samples.
        std::vector<int> next;
        std::vector<int> split_of(tree.nodes.size(), -1);
        for (std::size_t a = 0; a < na; ++a) {
            if (best[a].feature < 0) continue;
            const int node = active[a];
            const int first_child = static_cast<int>(tree.nodes.size());
            tree.nodes.emplace_back();
            tree.nodes.emplace_back();
            TreeNode& nd = tree.nodes[static_cast<std::size_t>(node)];
            nd.feature = best[a].feature;
            nd.threshold = best[a].threshold;
            nd.left = first_child;
            nd.right = first_child + 1;
            totals.emplace_back();
            totals.emplace_back();
            split_of[static_cast<std::size_t>(node)] = static_cast<int>(a);
        }
        split_of.resize(tree.nodes.size(), -1);
        for (std::size_t i = 0; i < n; ++i) {
            const int node = node_of[i];
            if (node < 0 || split_of[static_cast<std::size_t>(node)] < 0) continue;
            const TreeNode& nd = tree.nodes[static_cast<std::size_t>(node)];
            const int child = X(i, static_cast<std::size_t>(nd.feature)) <= nd.threshold ? nd.left : nd.right;
            node_of[i] = child;
            policy.add(totals[static_cast<std::size_t>(child)], i);
        }
        for (std::size_t a = 0; a < na; ++a) {
            if (best[a].feature < 0) continue;
            TreeNode& nd = tree.nodes[static_cast<std::size_t>(active[a])];
            nd.impurity_decrease = best[a].score / root_weight;
            nd.gain = best[a].score;
            for (int child : {nd.left, nd.right}) {
                if (depth + 1 < max_depth && policy.splittable(totals[static_cast<std::size_t>(child)]))
                    next.push_back(child);
            }
        }
        active = std::move(next);
    }

    for (std::size_t i = 0; i < tree.nodes.size(); ++i) finalize(tree.nodes[i], totals[i]);
    return tree;
}

std::vector<double> unit_weights(std::size_t n) { return std::vector<double>(n, 1.0); }

DecisionTree fit_cart_presorted(const Matrix& X, const SortedColumns& order, const std::vector<int>& y,
                                const std::vector<double>& weights, const CartParams& params, Rng& rng) {
    const GiniPolicy policy{y, weights, params.min_samples_leaf};
    return grow_tree(X, order, weights, policy, params.max_depth, params.feature_subset_size, &rng,
                     [](TreeNode& nd, const ClassStat& s) {
                         nd.weight = s.w;
                         nd.impurity = s.gini();
                         for (int k = 0; k < kNumClasses; ++k) nd.distribution[k] = s.w > 0 ? s.c[k] / s.w : 0.0;
                     });
}

std::array<double, kNumClasses> softmax3(const std::array<double, kNumClasses>& z) {
    const double m = std::max({z[0], z[1], z[2]});
    std::array<double, kNumClasses> p{};
    double sum = 0.0;
    for (int k = 0; k < kNumClasses; ++k) sum += (p[k] = std::exp(z[k] - m));
    for (auto& v : p) v /= sum;
    return p;
}

int argmax3(const std::array<double, kNumClasses>& v) {
    int best = 0;
    for (int k = 1; k < kNumClasses; ++k)
        if (v[k] > v[best]) best = k;
    return best;
}

}  // namespace

const TreeNode& DecisionTree::leaf_for(const double* x) const {
    std::size_t i = 0;
    while (!nodes[i].is_leaf()) {
        const TreeNode& nd = nodes[i];
        i = static_cast<std::size_t>(x[nd.feature] <= nd.threshold ? nd.left : nd.right);
    }
    return nodes[i];
}

int DecisionTree::predict(const double* x) const { return argmax3(leaf_for(x).distribution); }

std::size_t DecisionTree::split_count() const {
    return static_cast<std::size_t>(std::count_if(nodes.begin(), nodes.end(), [](const TreeNode& n) { return !n.is_leaf(); }));
}

std::size_t DecisionTree::depth() const {
    std::vector<std::size_t> d(nodes.size(), 0);
    std::size_t best = 0;
    for (std::size_t i = 0; i < nodes.size(); ++i) {
        if (nodes[i].is_leaf()) continue;
        d[static_cast<std::size_t>(nodes[i].left)] = d[i] + 1;
        d[static_cast<std::size_t>(nodes[i].right)] = d[i] + 1;
        best = std::max(best, d[i] + 1);
    }
    return best;
}

DecisionTree fit_cart(const Matrix& X, const std::vector<int>& y, const std::vector<double>& weights,
                      const CartParams& params, Rng& rng) {
    if (X.rows == 0) throw data_error("cannot fit a tree on an empty dataset");
    const std::vector<double> w = weights.empty() ? unit_weights(X.rows) : weights;
    return fit_cart_presorted(X, presort(X), y, w, params, rng);
}

DecisionTree fit_cart(const Dataset& D, const CartParams& params, Rng& rng) {
    D.lineage.require_not_test("tree fitting");
    return fit_cart(D.X, D.y, {}, params, rng);
}

int TreeEnsemble::predict(const double* x) const {
    if (kind == EnsembleKind::Boosted) return argmax3(predict_proba(x));
    std::array<double, kNumClasses> votes{};
    for (const auto& t : trees) votes[static_cast<std::size_t>(t.predict(x))] += 1.0;
    return argmax3(votes);
}

std::array<double, kNumClasses> TreeEnsemble::predict_proba(const double* x) const {
    if (kind == EnsembleKind::Forest) {
        std::array<double, kNumClasses> votes{};
        for (const auto& t : trees) votes[static_cast<std::size_t>(t.predict(x))] += 1.0;
        for (auto& v : votes) v /= static_cast<double>(trees.size());
        return votes;
    }
    std::array<double, kNumClasses> z = init_score;
    for (std::size_t i = 0; i < trees.size(); ++i) z[i % kNumClasses] += learning_rate * trees[i].predict_value(x);
    return softmax3(z);
}

std::vector<int> TreeEnsemble::predict(const Matrix& X) const {
    std::vector<int> out(X.rows);
    for (std::size_t r = 0; r < X.rows; ++r) out[r] = predict(X.row(r));
    return out;
}

TreeEnsemble fit_random_forest(const Dataset& D, const ForestParams& params) {
    D.lineage.require_not_test("random forest fitting");
    if (D.n_rows() == 0) throw data_error("cannot fit a forest on an empty dataset");
    if (params.n_trees < 1) throw config_error("forest needs n_trees >= 1");
    const SortedColumns order = presort(D.X);
    CartParams cart;
    cart.max_depth = params.max_depth;
    cart.min_samples_leaf = params.min_samples_leaf;
    cart.feature_subset_size = params.feature_subset_size
                                   ? params.feature_subset_size
                                   : static_cast<std::size_t>(std::lround(std::sqrt(static_cast<double>(D.n_features()))));

    TreeEnsemble ens;
    ens.kind = EnsembleKind::Forest;
    ens.feature_names = D.feature_names;
    ens.trees.resize(params.n_trees);
    ens.oob_mask.resize(params.n_trees);
    const std::size_t n = D.n_rows();
#pragma omp parallel for schedule(dynamic)
    for (long tt = 0; tt < static_cast<long>(params.n_trees); ++tt) {
        const auto t = static_cast<std::size_t>(tt);
        Rng rng(derive_seed(params.seed, t));
        std::vector<double> w(n, 1.0);
        if (params.bootstrap) {
            std::fill(w.begin(), w.end(), 0.0);
            for (std::size_t i = 0; i < n; ++i) w[uniform_index(rng, n)] += 1.0;
        }
        ens.oob_mask[t].resize(n);
        for (std::size_t i = 0; i < n; ++i) ens.oob_mask[t][i] = w[i] == 0.0 ? 1 : 0;
        ens.trees[t] = fit_cart_presorted(D.X, order, D.y, w, cart, rng);
    }
    return ens;
}

TreeEnsemble fit_gbt(const Dataset& D, const BoostParams& params) {
    D.lineage.require_not_test("boosted tree fitting");
    const std::size_t n = D.n_rows();
    if (n == 0) throw data_error("cannot fit boosted trees on an empty dataset");
    if (params.n_rounds < 1) throw config_error("boosting needs n_rounds >= 1");
    const SortedColumns order = presort(D.X);

    TreeEnsemble ens;
    ens.kind = EnsembleKind::Boosted;
    ens.feature_names = D.feature_names;
    ens.learning_rate = params.learning_rate;
    const auto counts = D.class_counts();
    for (int k = 0; k < kNumClasses; ++k)
        ens.init_score[k] = std::log(std::max(static_cast<double>(counts[k]) / static_cast<double>(n), 1e-12));

    std::vector<std::array<double, kNumClasses>> F(n, ens.init_score);
    std::vector<double> grad(n), hess(n);
    const std::vector<double> weights = unit_weights(n);
    Rng unused(params.seed);
    for (std::size_t round = 0; round < params.n_rounds; ++round) {
        std::vector<std::array<double, kNumClasses>> P(n);
        for (std::size_t i = 0; i < n; ++i) P[i] = softmax3(F[i]);
        for (int k = 0; k < kNumClasses; ++k) {
            for (std::size_t i = 0; i < n; ++i) {
                const double p = P[i][k];
                grad[i] = p - (D.y[i] == k ? 1.0 : 0.0);
                hess[i] = std::max(p * (1.0 - p), 1e-16);
            }
            const NewtonPolicy policy{grad, hess, params.min_samples_leaf, params.l2};
            const double l2 = params.l2;
            DecisionTree tree = grow_tree(D.X, order, weights, policy, params.max_depth, 0, &unused,
                                          [l2](TreeNode& nd, const GradStat& s) {
                                              nd.weight = s.w;
                                              nd.value = -s.g / (s.h + l2);
                                          });
            for (std::size_t i = 0; i < n; ++i) F[i][k] += params.learning_rate * tree.predict_value(D.X.row(i));
            ens.trees.push_back(std::move(tree));
        }
        double loss = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            const auto p = softmax3(F[i]);
            loss -= std::log(std::max(p[static_cast<std::size_t>(D.y[i])], 1e-300));
        }
        ens.train_loss.push_back(loss / static_cast<double>(n));
    }
    return ens;
}

void ImportanceRanking::sort() {
    order.resize(scores.size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        if (scores[a] != scores[b]) return scores[a] > scores[b];
        return feature_names[a] < feature_names[b];
    });
}

std::size_t ImportanceRanking::rank_of(const std::string& name) const {
    for (std::size_t pos = 0; pos < order.size(); ++pos)
        if (feature_names[order[pos]] == name) return pos + 1;
    throw data_error("feature '" + name + "' is not in the ranking");
}

std::vector<std::string> ImportanceRanking::ranked_names() const {
    std::vector<std::string> out;
    for (std::size_t i : order) out.push_back(feature_names[i]);
    return out;
}

ImportanceRanking make_ranking(std::vector<std::string> names, std::vector<double> raw_scores) {
    double total = 0.0;
    for (double s : raw_scores) {
        if (!(s >= 0.0)) throw numeric_fault("negative or NaN importance score");
        total += s;
    }
    if (!(total > 0.0)) throw data_error("importance is undefined for an ensemble without splits");
    ImportanceRanking r;
    r.feature_names = std::move(names);
    r.scores = std::move(raw_scores);
    for (double& s : r.scores) s /= total;
    r.sort();
    return r;
}

ImportanceRanking mdi_importance(const TreeEnsemble& ens) {
    if (ens.kind != EnsembleKind::Forest) throw config_error("MDI importance needs a forest ensemble");
    if (ens.trees.empty()) throw data_error("importance is undefined for an empty ensemble");
    std::vector<double> score(ens.feature_names.size(), 0.0);
    for (const auto& t : ens.trees)
        for (const auto& nd : t.nodes)
            if (!nd.is_leaf()) score[static_cast<std::size_t>(nd.feature)] += nd.impurity_decrease;
    for (double& s : score) s /= static_cast<double>(ens.trees.size());
    return make_ranking(ens.feature_names, std::move(score));
}

ImportanceRanking gain_importance(const TreeEnsemble& ens) {
    if (ens.kind != EnsembleKind::Boosted) throw config_error("gain importance needs a boosted ensemble");
    std::vector<double> score(ens.feature_names.size(), 0.0);
    for (const auto& t : ens.trees)
        for (const auto& nd : t.nodes)
            if (!nd.is_leaf()) score[static_cast<std::size_t>(nd.feature)] += nd.gain;
    return make_ranking(ens.feature_names, std::move(score));
}

ImportanceRanking aggregate_by_group(const ImportanceRanking& columns, const Dataset& D) {
    if (columns.feature_names != D.feature_names) throw data_error("ranking does not match the dataset columns");
    std::vector<double> score(D.groups.size(), 0.0);
    for (std::size_t c = 0; c < columns.scores.size(); ++c)
        score[static_cast<std::size_t>(D.column_group[c])] += columns.scores[c];
    return make_ranking(D.groups, std::move(score));
}

std::vector<std::string> combined_rank(const ImportanceRanking& a, const ImportanceRanking& b, std::size_t k) {
    const std::set<std::string> ua(a.feature_names.begin(), a.feature_names.end());
    const std::set<std::string> ub(b.feature_names.begin(), b.feature_names.end());
    if (ua != ub || ua.size() != a.feature_names.size()) throw data_error("rankings cover different feature universes");
    if (k > ua.size()) throw config_error("k exceeds the number of features");
    std::vector<std::pair<double, std::string>> fused;
    for (const auto& name : ua)
        fused.emplace_back(0.5 * static_cast<double>(a.rank_of(name) + b.rank_of(name)), name);
    std::sort(fused.begin(), fused.end());
    std::vector<std::string> out;
    for (std::size_t i = 0; i < k; ++i) out.push_back(fused[i].second);
    return out;
}

void write_rankings_csv(const ImportanceRanking& forest, const ImportanceRanking& boosted,
                        const std::filesystem::path& path) {
    const auto fused = combined_rank(forest, boosted, forest.feature_names.size());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw io_error("cannot write " + path.string());
    out << "feature,score_forest,score_boosted,fused_rank\n";
    for (std::size_t i = 0; i < fused.size(); ++i) {
        const auto& name = fused[i];
        auto score_of = [&](const ImportanceRanking& r) {
            auto it = std::find(r.feature_names.begin(), r.feature_names.end(), name);
            return r.scores[static_cast<std::size_t>(it - r.feature_names.begin())];
        };
        out << quote_csv_field(name) << ',' << format_double(score_of(forest)) << ','
            << format_double(score_of(boosted)) << ',' << (i + 1) << '\n';
    }
}

void write_feature_list(const std::vector<std::string>& features, const std::filesystem::path& path) {
    std::string text;
    for (const auto& f : features) text += f + "\n";
    write_text_file(path, text);
}

std::vector<std::string> read_feature_list(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw io_error("cannot open feature list " + path.string());
    std::vector<std::string> out;
    std::string line;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (!line.empty()) out.push_back(line);
    }
    return out;
}

}  // namespace crashsev
