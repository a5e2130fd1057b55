#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "crashsev/nn/models.hpp"
#include "crashsev/preprocess.hpp"

namespace crashsev {

struct SplitIndices {
    std::vector<std::size_t> train, validation, test;  // each ascending
};

/// Per class: shuffle its members, take round(f_train * n_c) for train, round(f_val * n_c) for
/// validation and the rest for test. Every class needs at least 3 members.
SplitIndices stratified_split(const std::vector<int>& y, std::array<double, 3> fractions, std::uint64_t seed,
                              int n_classes = kNumClasses);

enum class OptimizerKind { Adam, AdamW };
enum class ScheduleKind { Plateau, Step };
std::string optimizer_name(OptimizerKind k);
std::string schedule_name(ScheduleKind k);
OptimizerKind parse_optimizer(const std::string& s);
ScheduleKind parse_schedule(const std::string& s);

struct TrainConfig {
    double lr = 1e-3;
    double weight_decay = 1e-4;
    std::size_t epochs = 50;
    std::size_t batch = 64;
    OptimizerKind optimizer = OptimizerKind::AdamW;
    ScheduleKind schedule = ScheduleKind::Plateau;
    std::size_t step_size = 10;
    double gamma = 0.5;
    double plateau_factor = 0.5;
    std::size_t plateau_patience = 5;
    double lr_floor = 1e-6;
    std::size_t early_stop_patience = 10;
    double min_delta = 1e-4;
    std::uint64_t seed = 1;

    void validate() const;
};

template <class T>
struct AdamState {
    std::vector<std::vector<T>> m, v;
    std::size_t step = 0;
};

/// One Adam update with bias correction (beta 0.9/0.999, eps 1e-8). AdamW first applies the
/// decoupled decay w -= lr * wd * w; Adam ignores wd.
template <class T>
void optimizer_step(const std::vector<nn::Parameter<T>*>& params, AdamState<T>& state, OptimizerKind kind, double lr,
                    double weight_decay);

/// Learning rate for `epoch` given the validation losses of epochs [0, epoch). Pure: replays history.
double schedule_lr(const TrainConfig& cfg, std::size_t epoch, const std::vector<double>& val_history);

struct CurveRow {
    std::size_t epoch = 0;
    double train_loss = 0, val_loss = 0, train_acc = 0, val_acc = 0, lr = 0;
};

struct TrainingCurves {
    std::vector<CurveRow> rows;
    /// epoch,train_loss,val_loss,train_acc,val_acc,lr
    void write_csv(const std::filesystem::path& path) const;
    std::vector<double> val_losses() const;
};

struct TrainResult {
    TrainingCurves curves;
    std::size_t best_epoch = 0;
    double best_val_loss = 0;
    bool stopped_early = false;
};

/// Class-weighted cross-entropy over the rows of D in eval mode (chunked), plus accuracy.
std::pair<double, double> evaluate_loss(nn::Classifier<float>& model, const Dataset& D,
                                        const std::vector<double>& weights);

/// Mini-batch training with early stopping on validation loss. On return the model holds the
/// parameters of the epoch with the lowest validation loss.
TrainResult train_model(nn::Classifier<float>& model, const Dataset& train, const Dataset& val,
                        const std::vector<double>& class_weights, const TrainConfig& cfg);

}  // namespace crashsev
