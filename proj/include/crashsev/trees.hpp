#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "crashsev/common.hpp"
#include "crashsev/preprocess.hpp"

namespace crashsev {

/// A node of an axis-aligned binary tree. Samples with x[feature] <= threshold go left.
struct TreeNode {
    int feature = -1;  // -1 marks a leaf
    double threshold = 0.0;
    int left = -1;
    int right = -1;
    double impurity = 0.0;           // Gini for classification trees
    double weight = 0.0;             // (weighted) sample count reaching the node
    double impurity_decrease = 0.0;  // (n_t / N) * (G_t - n_L/n_t G_L - n_R/n_t G_R); split nodes only
    double gain = 0.0;               // second-order split gain; boosted trees only
    std::array<double, kNumClasses> distribution{};  // leaf class distribution, sums to 1
    double value = 0.0;              // regression leaf value

    bool is_leaf() const { return feature < 0; }
};

struct DecisionTree {
    std::vector<TreeNode> nodes;  // nodes[0] is the root
    std::size_t n_features = 0;

    const TreeNode& leaf_for(const double* x) const;
    int predict(const double* x) const;
    double predict_value(const double* x) const { return leaf_for(x).value; }
    std::size_t split_count() const;
    std::size_t depth() const;
};

struct CartParams {
    int max_depth = 12;
    double min_samples_leaf = 1.0;
    /// Features drawn per node; 0 or >= n_features means all features (and no RNG use).
    std::size_t feature_subset_size = 0;
};

/// Greedy Gini CART. `weights` are non-negative integer-valued sample multiplicities
/// (bootstrap counts); empty means all ones.
DecisionTree fit_cart(const Matrix& X, const std::vector<int>& y, const std::vector<double>& weights,
                      const CartParams& params, Rng& rng);
DecisionTree fit_cart(const Dataset& D, const CartParams& params, Rng& rng);

enum class EnsembleKind { Forest, Boosted };

struct TreeEnsemble {
    EnsembleKind kind = EnsembleKind::Forest;
    std::vector<DecisionTree> trees;  // boosted: trees[round * kNumClasses + class]
    std::vector<std::string> feature_names;
    double learning_rate = 0.0;                       // boosted only
    std::array<double, kNumClasses> init_score{};     // boosted only: log class priors
    std::vector<std::vector<std::uint8_t>> oob_mask;  // forest only: 1 = row was out of bag
    std::vector<double> train_loss;                   // boosted only: log-loss after each round

    int predict(const double* x) const;
    std::array<double, kNumClasses> predict_proba(const double* x) const;
    std::vector<int> predict(const Matrix& X) const;
};

struct ForestParams {
    std::size_t n_trees = 100;
    int max_depth = 12;
    double min_samples_leaf = 1.0;
    std::size_t feature_subset_size = 0;  // 0 -> round(sqrt(n_features))
    bool bootstrap = true;
    std::uint64_t seed = 1;
};

/// Bootstrap forest; tree t draws from its own stream derive_seed(seed, t).
TreeEnsemble fit_random_forest(const Dataset& D, const ForestParams& params);

struct BoostParams {
    std::size_t n_rounds = 100;
    double learning_rate = 0.1;
    int max_depth = 4;
    double min_samples_leaf = 1.0;
    double l2 = 1.0;  // smoothing constant in the Newton leaf value -G / (H + l2)
    std::uint64_t seed = 1;
};

/// Softmax multiclass boosting: one regression tree per class per round on the
/// cross-entropy gradient with diagonal Hessian.
TreeEnsemble fit_gbt(const Dataset& D, const BoostParams& params);

struct ImportanceRanking {
    std::vector<std::string> feature_names;
    std::vector<double> scores;    // >= 0, sum to 1
    std::vector<std::size_t> order;  // indices by descending score, ties by name

    /// Rebuilds `order` from scores.
    void sort();
    /// 1-based rank position of a feature.
    std::size_t rank_of(const std::string& name) const;
    std::vector<std::string> ranked_names() const;
};

ImportanceRanking make_ranking(std::vector<std::string> names, std::vector<double> raw_scores);

/// Mean decrease in impurity, summed per tree, averaged over trees, normalized.
ImportanceRanking mdi_importance(const TreeEnsemble& ens);
/// Total split gain per feature, normalized.
ImportanceRanking gain_importance(const TreeEnsemble& ens);

/// Sums column scores into their source-variable groups.
ImportanceRanking aggregate_by_group(const ImportanceRanking& columns, const Dataset& D);

/// Average-rank fusion of two rankings over the same universe; ties lexicographic.
std::vector<std::string> combined_rank(const ImportanceRanking& a, const ImportanceRanking& b, std::size_t k);

/// feature, score_forest, score_boosted, fused_rank
void write_rankings_csv(const ImportanceRanking& forest, const ImportanceRanking& boosted,
                        const std::filesystem::path& path);
void write_feature_list(const std::vector<std::string>& features, const std::filesystem::path& path);
std::vector<std::string> read_feature_list(const std::filesystem::path& path);

}  // namespace crashsev
