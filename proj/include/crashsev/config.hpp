#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "crashsev/pfn.hpp"
#include "crashsev/synthgen.hpp"
#include "crashsev/train.hpp"

namespace crashsev {

/// Flat `key = value` file. '#' starts a comment; blank lines are ignored; keys are unique.
struct KeyValues {
    std::map<std::string, std::string> values;

    static KeyValues parse(const std::string& text, const std::string& origin);
    /// "key=value"
    void set_assignment(const std::string& assignment);
    std::string to_text() const;
};

struct ModelRunConfig {
    std::string name;  // MambaNet | MambaAttention
    TrainConfig train;
};

struct PipelineConfig {
    static constexpr int kVersion = 1;

    std::filesystem::path out_dir = "out";
    std::optional<std::uint64_t> seed;

    // exactly one data source
    std::optional<std::filesystem::path> data_file;
    std::optional<GenConfig> synth;
    std::optional<double> synth_bayes_target;  // overrides synth signal_strength when set
    std::optional<std::filesystem::path> schema_file;

    // feature selection
    std::size_t select_k = 12;
    std::size_t forest_trees = 100;
    int forest_depth = 12;
    double forest_min_leaf = 1.0;
    std::size_t gbt_rounds = 100;
    int gbt_depth = 4;
    double gbt_learning_rate = 0.1;

    // resampling
    bool resample = true;
    bool use_class_weights = true;
    std::size_t smote_k = 5;
    std::size_t enn_k = 3;

    std::vector<ModelRunConfig> models;
    bool run_pfn = true;

    // PFN
    std::optional<std::filesystem::path> pfn_checkpoint;  // pretrained model; otherwise pretrain in-run
    PfnArch pfn_arch;
    PretrainConfig pfn_pretrain;
    bool pfn_subsample_fallback = true;

    void validate() const;
    std::uint64_t require_seed() const;
    /// Canonical text of the resolved configuration (every key, sorted).
    std::string to_text() const;
};

/// Resolution order: defaults, file, environment (CRASHSEV_OUT_DIR, CRASHSEV_SEED), `overrides`.
PipelineConfig resolve_config(const KeyValues& file, const std::vector<std::string>& overrides, bool use_env = true);
PipelineConfig load_config(const std::filesystem::path& path, const std::vector<std::string>& overrides,
                           bool use_env = true);

}  // namespace crashsev
