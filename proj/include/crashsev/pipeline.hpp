#pragma once

#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "crashsev/config.hpp"
#include "crashsev/report.hpp"

namespace crashsev {

enum class Stage { Ingest, Prep, Select, Resample, Train, Pfn, Evaluate };
Stage parse_stage(const std::string& name);
std::string stage_name(Stage s);

struct PipelineResult {
    Stage last_stage = Stage::Ingest;
    std::optional<double> bayes_accuracy;       // synthgen sources only
    std::vector<std::string> selected;          // source variables, fused-rank order
    std::optional<ResampleReport> resample;
    std::vector<ModelResult> results;           // test-partition evaluation
    std::map<std::string, double> val_accuracy;  // best-epoch validation accuracy per trained model
    std::vector<int> test_labels;
};

/// Progress messages; the default prints nothing.
using LogFn = std::function<void(const std::string&)>;

/// ingest -> split -> fit preprocessing on train -> feature importance on train -> top-k selection
/// -> resample train -> train models -> PFN one-shot -> evaluate on test -> reports + manifest.
/// Stops after `stop_after`. A failing stage leaves FAILED (stage and cause) in out_dir next to
/// whatever was already written, and rethrows.
PipelineResult run_pipeline(const PipelineConfig& cfg, Stage stop_after = Stage::Evaluate, const LogFn& log = {});

}  // namespace crashsev
