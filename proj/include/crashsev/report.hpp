#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "crashsev/metrics.hpp"
#include "crashsev/preprocess.hpp"
#include "crashsev/resample.hpp"
#include "crashsev/train.hpp"

namespace crashsev {

struct ModelResult {
    std::string model;
    ConfusionMatrix cm;
    MetricsReport metrics;
    TrainingCurves curves;  // empty for one-shot models
};

/// Train partition before/after resampling, for the distribution plots.
struct DistributionInputs {
    const Dataset* before = nullptr;
    const Dataset* after = nullptr;
};

/// Writes metrics.csv, confusion.csv, curves.csv (only if some model has curves), report.txt,
/// resample_report.csv (if given) and plots/*.svg into out_dir. Returns notes for the manifest.
std::vector<std::string> emit_reports(const std::vector<ModelResult>& results,
                                      const std::optional<ResampleReport>& resample,
                                      const DistributionInputs& dist, const std::filesystem::path& out_dir);

/// model,class,accuracy,precision,recall,f1,support,degenerate  (percent, full precision)
std::string metrics_csv(const std::vector<ModelResult>& results);
/// model,true_class,pred_KA,pred_BC,pred_O
std::string confusion_csv(const std::vector<ModelResult>& results);
/// Table III style text with integer percentages.
std::string metrics_table(const std::vector<ModelResult>& results);

// Deterministic SVG views.
std::string svg_curves(const std::string& title, const std::string& y_label,
                       const std::vector<std::pair<std::string, std::vector<double>>>& series);
std::string svg_confusion_bars(const std::string& model, const ConfusionMatrix& cm);
std::string svg_class_distribution(const ResampleReport& report);
std::string svg_feature_histograms(const Dataset& before, const Dataset& after, std::size_t bins = 10);

/// Hashes every file under out_dir (except the manifest) into out_dir/manifest.json, sorted by path.
void write_manifest(const std::filesystem::path& out_dir, const std::vector<std::string>& notes);

}  // namespace crashsev
