#pragma once

#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include "crashsev/nn/models.hpp"

namespace crashsev::nn {

struct CheckpointInfo {
    std::string preprocess_hash;
    std::vector<std::string> features;  // selected source variables, in token order
};

inline constexpr int kCheckpointVersion = 1;

/// Versioned JSON: spec, every parameter tensor, the preprocessing hash and the feature list.
void save_checkpoint(const std::filesystem::path& path, SsmClassifier<float>& model, const CheckpointInfo& info);

/// Rejects a checkpoint trained against a different preprocessing state (unless `expected_hash` is empty).
std::unique_ptr<SsmClassifier<float>> load_checkpoint(const std::filesystem::path& path,
                                                      const std::string& expected_hash,
                                                      CheckpointInfo* info = nullptr);

}  // namespace crashsev::nn
