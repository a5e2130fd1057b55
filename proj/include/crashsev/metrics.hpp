#pragma once

#include <array>
#include <cstddef>
#include <string>
#include <vector>

#include "crashsev/common.hpp"

namespace crashsev {

/// counts[true][predicted]
struct ConfusionMatrix {
    std::array<std::array<std::size_t, kNumClasses>, kNumClasses> counts{};

    std::size_t total() const;
    std::size_t row_sum(int c) const;
    std::size_t col_sum(int c) const;
};

ConfusionMatrix confusion_matrix(const std::vector<int>& y_true, const std::vector<int>& y_pred);

struct ClassMetrics {
    double precision = 0, recall = 0, f1 = 0;
    double ovr_accuracy = 0;  // (TP + TN) / total
    std::size_t support = 0;  // true count
    bool precision_degenerate = false;  // TP + FP == 0
    bool recall_degenerate = false;     // TP + FN == 0
    bool f1_degenerate = false;         // P + R == 0
};

struct MetricsReport {
    std::array<ClassMetrics, kNumClasses> per_class{};
    double accuracy = 0;
    double macro_precision = 0, macro_recall = 0, macro_f1 = 0;
    double micro_recall = 0;
    std::size_t total = 0;
};

MetricsReport compute_metrics(const ConfusionMatrix& cm);

}  // namespace crashsev
