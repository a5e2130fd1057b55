#pragma once

// Prior-fitted network: a small transformer pretrained on synthetic classification tasks that
// classifies new rows by reading a labelled context set in a single forward pass.

#include <cstdint>
#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include "crashsev/common.hpp"
#include "crashsev/nn/graph.hpp"
#include "crashsev/preprocess.hpp"

namespace crashsev {

struct PriorConfig {
    std::size_t d_min = 1, d_max = 20;
    std::size_t n_min = 16, n_max = 128;        // rows per task (context + query)
    double ctx_frac_min = 0.5, ctx_frac_max = 0.8;
    std::size_t classes_min = 2, classes_max = 3;
    double noise_max = 0.1;
    double p_tree = 0.5;           // latent is a random tree with this probability, else a random net
    double p_balanced = 0.5;       // probability that a pretraining task is class-balanced
    std::size_t tree_depth_max = 3;
    std::size_t net_hidden = 16;

    void validate() const;
};

enum class LatentKind { Net, Tree };

struct PriorTask {
    Matrix x;                 // [n, d]
    std::vector<int> y;       // labels in [0, n_classes)
    std::size_t n_ctx = 0;    // rows [0, n_ctx) are context, the rest are queries
    std::size_t n_classes = 2;
    LatentKind latent = LatentKind::Net;
    std::size_t tree_depth = 0;
    double noise = 0.0;

    std::size_t n_rows() const { return x.rows; }
    std::size_t d() const { return x.cols; }
};

/// Shape drawn once per pretraining step so a batch of tasks can share one tensor layout.
struct TaskShape {
    std::size_t n = 0, n_ctx = 0, n_classes = 2;
};
TaskShape sample_task_shape(Rng& rng, const PriorConfig& cfg);

/// Optional overrides used by tests and held-out evaluation.
struct TaskOptions {
    bool force_balanced = false;
    bool force_unbalanced = false;
    int latent = -1;            // -1 random, 0 net, 1 tree
    int tree_depth = -1;        // -1 random in [1, tree_depth_max]
    double noise = -1;          // -1 random in [0, noise_max]
    std::size_t d = 0;          // 0 random
};

PriorTask sample_prior_task(Rng& rng, const PriorConfig& cfg, const TaskShape& shape, const TaskOptions& opts = {});
PriorTask sample_prior_task(Rng& rng, const PriorConfig& cfg);

struct PfnArch {
    std::size_t d_max = 20;
    std::size_t max_context = 256;
    std::size_t max_classes = 3;
    std::size_t layers = 3;
    std::size_t width = 64;
    std::size_t heads = 4;
    std::size_t ffn = 128;

    void validate() const;
};

class PfnModel {
public:
    PfnModel(PfnArch arch, std::uint64_t seed);
    explicit PfnModel(PfnArch arch);  // zero parameters, for loading

    const PfnArch& arch() const { return arch_; }
    std::vector<nn::Parameter<float>*> parameters();
    nn::Parameter<float>* find(const std::string& name);
    bool frozen() const { return frozen_; }
    void freeze() { frozen_ = true; }

    /// Batched forward over `tasks` tasks with identical layout: x [tasks*n, d_max] already
    /// standardized and zero-padded; ctx_labels [tasks*n_ctx]. Returns query logits
    /// [tasks*(n-n_ctx), max_classes]. With `as_constants` the parameters enter the graph as
    /// constants (no gradient path back into the model).
    nn::Var<float> forward(nn::Graph<float>& g, const nn::Tensor<float>& x, const std::vector<int>& ctx_labels,
                           std::size_t tasks, std::size_t n, std::size_t n_ctx, bool as_constants);

    /// SHA-256 over every parameter's bytes.
    std::string checksum() const;

    void save(const std::filesystem::path& path, const std::string& summary_json = "{}") const;
    static PfnModel load(const std::filesystem::path& path);

private:
    void build();
    nn::Parameter<float>& add(const std::string& name, std::vector<std::size_t> shape);

    PfnArch arch_;
    std::vector<std::unique_ptr<nn::Parameter<float>>> params_;
    bool frozen_ = false;
};

struct PretrainConfig {
    std::size_t tasks = 200000;   // total pretraining tasks
    std::size_t tasks_per_step = 16;
    double lr = 1e-3;
    double lr_final = 1e-4;       // cosine decay target
    std::size_t warmup_steps = 200;
    double weight_decay = 0.0;
    double grad_clip = 1.0;       // global L2 norm
    std::uint64_t seed = 1;

    void validate() const;
};

struct PretrainLog {
    std::vector<double> step_loss;
    double seconds = 0;
    /// step,loss
    void write_csv(const std::filesystem::path& path) const;
};

/// Minimizes query cross-entropy over freshly sampled prior tasks, then freezes the model.
PfnModel pretrain_pfn(const PriorConfig& prior, const PfnArch& arch, const PretrainConfig& cfg, PretrainLog* log = nullptr);

struct PredictOptions {
    bool subsample_fallback = false;  // stratified subsample when the context exceeds the envelope
    std::uint64_t seed = 1;
    std::size_t query_chunk = 512;
};

/// Per-query class probabilities [n_q, max_classes]. Context columns are standardized with the
/// context's own mean and std; classes absent from the context get probability 0.
/// Envelope violations (too many features, too many classes, oversize context without the
/// fallback) raise a config error.
Matrix pfn_predict(const PfnModel& model, const Matrix& ctx_x, const std::vector<int>& ctx_y, const Matrix& query_x,
                   const PredictOptions& opts = {});

/// Mean query accuracy over `count` held-out balanced tasks, and the matching chance level
/// (mean of 1/C). `classes` = 0 draws the class count from the prior.
struct HeldOutResult {
    double accuracy = 0;
    double chance = 0;
};
HeldOutResult evaluate_held_out(const PfnModel& model, const PriorConfig& prior, std::size_t count,
                                std::uint64_t seed, std::size_t classes = 0);

/// Rows of a stratified subsample of size `target` (proportional, at least one per present class).
std::vector<std::size_t> stratified_subsample(const std::vector<int>& y, std::size_t target, std::uint64_t seed);

/// One scalar per source variable of a one-hot dataset, so a 12-variable selection fits the
/// PFN's feature envelope. Numeric groups keep their standardized value; a categorical group
/// becomes the rank of the active category when the block's categories are ordered by mean
/// label in the reference (training) data, ties by frequency then column. An all-zero block
/// (unseen token) maps to the block size.
struct VariableCoder {
    std::vector<std::string> groups;
    std::vector<std::vector<int>> rank_of_column;  // per group, rank for each member column
    std::vector<std::vector<std::size_t>> columns;  // per group, member column indices
    std::vector<bool> numeric;

    static VariableCoder fit(const Dataset& reference);
    Matrix encode(const Dataset& D) const;
};

}  // namespace crashsev
