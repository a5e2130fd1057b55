#include "crashsev/metrics.hpp"

namespace crashsev {

std::size_t ConfusionMatrix::total() const {
    std::size_t t = 0;
    for (const auto& row : counts)
        for (std::size_t v : row) t += v;
    return t;
}

std::size_t ConfusionMatrix::row_sum(int c) const {
    std::size_t t = 0;
    for (std::size_t v : counts[static_cast<std::size_t>(c)]) t += v;
    return t;
}

std::size_t ConfusionMatrix::col_sum(int c) const {
    std::size_t t = 0;
    for (const auto& row : counts) t += row[static_cast<std::size_t>(c)];
    return t;
}

ConfusionMatrix confusion_matrix(const std::vector<int>& y_true, const std::vector<int>& y_pred) {
    if (y_true.size() != y_pred.size())
        throw data_error("label vectors differ in length (" + std::to_string(y_true.size()) + " vs " +
                         std::to_string(y_pred.size()) + ")");
    ConfusionMatrix cm;
    for (std::size_t i = 0; i < y_true.size(); ++i) {
        const int t = y_true[i], p = y_pred[i];
        if (t < 0 || t >= kNumClasses || p < 0 || p >= kNumClasses)
            throw data_error("label out of range at position " + std::to_string(i));
        ++cm.counts[static_cast<std::size_t>(t)][static_cast<std::size_t>(p)];
    }
    return cm;
}

MetricsReport compute_metrics(const ConfusionMatrix& cm) {
    MetricsReport r;
    r.total = cm.total();
    if (r.total == 0) throw data_error("confusion matrix is empty");
    const auto N = static_cast<double>(r.total);
    std::size_t trace = 0;
    for (int c = 0; c < kNumClasses; ++c) {
        auto& m = r.per_class[static_cast<std::size_t>(c)];
        const std::size_t tp = cm.counts[static_cast<std::size_t>(c)][static_cast<std::size_t>(c)];
        const std::size_t fp = cm.col_sum(c) - tp, fn = cm.row_sum(c) - tp;
        const std::size_t tn = r.total - tp - fp - fn;
        trace += tp;
        m.support = tp + fn;
        m.precision_degenerate = tp + fp == 0;
        m.recall_degenerate = tp + fn == 0;
        m.precision = m.precision_degenerate ? 0.0 : static_cast<double>(tp) / static_cast<double>(tp + fp);
        m.recall = m.recall_degenerate ? 0.0 : static_cast<double>(tp) / static_cast<double>(tp + fn);
        m.f1_degenerate = m.precision + m.recall == 0.0;
        m.f1 = m.f1_degenerate ? 0.0 : 2.0 * m.precision * m.recall / (m.precision + m.recall);
        m.ovr_accuracy = static_cast<double>(tp + tn) / N;
        r.macro_precision += m.precision / kNumClasses;
        r.macro_recall += m.recall / kNumClasses;
        r.macro_f1 += m.f1 / kNumClasses;
    }
    r.accuracy = static_cast<double>(trace) / N;
    // pooled TP / pooled (TP + FN); the pooled denominator is the total, so this is the accuracy
    r.micro_recall = static_cast<double>(trace) / N;
    return r;
}

}  // namespace crashsev
