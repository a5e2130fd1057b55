#pragma once

#include <array>
#include <cstddef>
#include <filesystem>
#include <optional>
#include <vector>

#include "crashsev/common.hpp"
#include "crashsev/preprocess.hpp"

namespace crashsev {

/// k nearest rows of X to `query` by Euclidean distance, nearest first; equal distances
/// resolve to the lower row index. `exclude_index` (if >= 0) is skipped as a candidate.
std::vector<std::size_t> knn(const Matrix& X, const double* query, std::size_t k, long exclude_index = -1);

/// Neighbours of every row (itself excluded), flattened row-major as [n, k].
/// Batched and OpenMP-parallel over query rows; identical output to serial_knn_all.
std::vector<std::size_t> knn_all(const Matrix& X, std::size_t k);
std::vector<std::size_t> serial_knn_all(const Matrix& X, std::size_t k);

struct ResampleReport {
    std::array<std::size_t, kNumClasses> original{};
    std::array<std::size_t, kNumClasses> after_smote{};
    std::array<std::size_t, kNumClasses> after_enn{};
    std::array<std::size_t, kNumClasses> synthesized{};
    std::array<std::size_t, kNumClasses> removed{};

    /// class,original,after_smote,after_enn,synthesized,removed
    void write_csv(const std::filesystem::path& path) const;
    double imbalance_ratio_before() const;
    double imbalance_ratio_after() const;
};

struct SyntheticOrigin {
    std::size_t seed_row = 0;
    std::size_t neighbor_row = 0;
    double gap = 0.0;
};

struct SmoteParams {
    std::size_t k = 5;
    /// Per-class target counts; default brings every class up to the majority count.
    std::optional<std::array<std::size_t, kNumClasses>> target_counts;
    /// Replaces the uniform interpolation gap with a constant (used to pin examples).
    std::optional<double> fixed_gap;
};

struct SmoteResult {
    Dataset data;  // originals first, unchanged, then synthetic rows
    ResampleReport report;
    std::vector<SyntheticOrigin> origins;  // one per synthetic row
};

/// Draw order for each needed synthetic sample of class c (classes ascending):
/// seed member, then one of its k same-class neighbours, then the gap u in [0, 1).
SmoteResult smote(const Dataset& D, const SmoteParams& params, Rng& rng);

struct EnnResult {
    Dataset data;
    ResampleReport report;
    std::vector<std::size_t> kept;  // indices into the input
};

/// Removes a row when another label has strictly more votes than its own among its k
/// nearest neighbours (self excluded). Edits are computed on the input set and applied once.
EnnResult enn(const Dataset& D, std::size_t k = 3);

struct SmoteEnnResult {
    Dataset data;
    ResampleReport report;
};

SmoteEnnResult smoteenn(const Dataset& D, std::size_t smote_k, std::size_t enn_k, Rng& rng);

/// w_c = N / (C * n_c) with C = n_classes.
std::vector<double> class_weights(const std::vector<int>& y, int n_classes = kNumClasses);

/// Per-feature histograms before and after resampling, overall and per class:
/// feature,scope,stage,bin,lo,hi,count,fraction
void write_distribution_report(const Dataset& before, const Dataset& after, const std::filesystem::path& path,
                               std::size_t bins = 10);

}  // namespace crashsev
