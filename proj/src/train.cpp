#include "crashsev/train.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>

#include "crashsev/util.hpp"

namespace crashsev {

SplitIndices stratified_split(const std::vector<int>& y, std::array<double, 3> fractions, std::uint64_t seed,
                              int n_classes) {
    const double total = fractions[0] + fractions[1] + fractions[2];
    if (fractions[0] < 0 || fractions[1] < 0 || fractions[2] < 0 || std::abs(total - 1.0) > 1e-9)
        throw config_error("split fractions must be nonnegative and sum to 1");
    std::vector<std::vector<std::size_t>> members(static_cast<std::size_t>(n_classes));
    for (std::size_t i = 0; i < y.size(); ++i) {
        if (y[i] < 0 || y[i] >= n_classes) throw data_error("label out of range in split");
        members[static_cast<std::size_t>(y[i])].push_back(i);
    }
    SplitIndices out;
    for (int c = 0; c < n_classes; ++c) {
        auto& idx = members[static_cast<std::size_t>(c)];
        if (idx.size() < 3)
            throw data_error("class " + std::to_string(c) + " has " + std::to_string(idx.size()) +
                             " samples; splitting needs at least 3");
        Rng rng(derive_seed(seed, static_cast<std::uint64_t>(c)));
        shuffle_in_place(idx, rng);
        const auto n = static_cast<double>(idx.size());
        const auto n_train = static_cast<std::size_t>(std::llround(fractions[0] * n));
        const auto n_val = std::min(idx.size() - n_train, static_cast<std::size_t>(std::llround(fractions[1] * n)));
        out.train.insert(out.train.end(), idx.begin(), idx.begin() + static_cast<long>(n_train));
        out.validation.insert(out.validation.end(), idx.begin() + static_cast<long>(n_train),
                              idx.begin() + static_cast<long>(n_train + n_val));
        out.test.insert(out.test.end(), idx.begin() + static_cast<long>(n_train + n_val), idx.end());
    }
    std::sort(out.train.begin(), out.train.end());
    std::sort(out.validation.begin(), out.validation.end());
    std::sort(out.test.begin(), out.test.end());
    return out;
}

std::string optimizer_name(OptimizerKind k) { return k == OptimizerKind::Adam ? "adam" : "adamw"; }
std::string schedule_name(ScheduleKind k) { return k == ScheduleKind::Plateau ? "plateau" : "step"; }

OptimizerKind parse_optimizer(const std::string& s) {
    if (s == "adam") return OptimizerKind::Adam;
    if (s == "adamw") return OptimizerKind::AdamW;
    throw config_error("unknown optimizer '" + s + "' (expected adam or adamw)");
}

ScheduleKind parse_schedule(const std::string& s) {
    if (s == "plateau") return ScheduleKind::Plateau;
    if (s == "step") return ScheduleKind::Step;
    throw config_error("unknown schedule '" + s + "' (expected plateau or step)");
}

void TrainConfig::validate() const {
    if (!(lr > 0) || !std::isfinite(lr)) throw config_error("lr must be positive");
    if (batch < 1) throw config_error("batch must be at least 1");
    if (epochs < 1) throw config_error("epochs must be at least 1");
    if (weight_decay < 0) throw config_error("weight_decay must be nonnegative");
    if (step_size < 1) throw config_error("step_size must be at least 1");
    if (!(gamma > 0 && gamma <= 1) || !(plateau_factor > 0 && plateau_factor < 1))
        throw config_error("schedule factors must lie in (0, 1]");
    if (early_stop_patience < 1 || plateau_patience < 1) throw config_error("patience must be at least 1");
}

template <class T>
void optimizer_step(const std::vector<nn::Parameter<T>*>& params, AdamState<T>& state, OptimizerKind kind, double lr,
                    double weight_decay) {
    constexpr double b1 = 0.9, b2 = 0.999, eps = 1e-8;
    if (state.m.empty()) {
        for (auto* p : params) {
            state.m.emplace_back(p->value.size(), T(0));
            state.v.emplace_back(p->value.size(), T(0));
        }
    }
    if (state.m.size() != params.size()) throw config_error("optimizer state does not match the parameter list");
    ++state.step;
    const double c1 = 1.0 - std::pow(b1, static_cast<double>(state.step));
    const double c2 = 1.0 - std::pow(b2, static_cast<double>(state.step));
    for (std::size_t k = 0; k < params.size(); ++k) {
        auto& w = params[k]->value.data;
        const auto& g = params[k]->grad.data;
        auto& m = state.m[k];
        auto& v = state.v[k];
        if (g.size() != w.size() || m.size() != w.size())
            throw config_error("gradient shape mismatch for parameter " + params[k]->name);
        for (std::size_t i = 0; i < w.size(); ++i) {
            if (kind == OptimizerKind::AdamW) w[i] -= static_cast<T>(lr * weight_decay) * w[i];
            m[i] = static_cast<T>(b1 * m[i] + (1.0 - b1) * g[i]);
            v[i] = static_cast<T>(b2 * v[i] + (1.0 - b2) * g[i] * g[i]);
            const double mhat = m[i] / c1;
            const double vhat = v[i] / c2;
            w[i] -= static_cast<T>(lr * mhat / (std::sqrt(vhat) + eps));
        }
    }
}

template void optimizer_step(const std::vector<nn::Parameter<float>*>&, AdamState<float>&, OptimizerKind, double,
                             double);
template void optimizer_step(const std::vector<nn::Parameter<double>*>&, AdamState<double>&, OptimizerKind, double,
                             double);

double schedule_lr(const TrainConfig& cfg, std::size_t epoch, const std::vector<double>& val_history) {
    if (cfg.schedule == ScheduleKind::Step)
        return cfg.lr * std::pow(cfg.gamma, static_cast<double>(epoch / cfg.step_size));
    double lr = cfg.lr;
    double best = std::numeric_limits<double>::infinity();
    std::size_t bad = 0;
    const std::size_t n = std::min(epoch, val_history.size());
    for (std::size_t e = 0; e < n; ++e) {
        if (val_history[e] < best - cfg.min_delta) {
            best = val_history[e];
            bad = 0;
        } else if (++bad >= cfg.plateau_patience) {
            lr = std::max(lr * cfg.plateau_factor, cfg.lr_floor);
            bad = 0;
        }
    }
    return lr;
}

void TrainingCurves::write_csv(const std::filesystem::path& path) const {
    std::string s = "epoch,train_loss,val_loss,train_acc,val_acc,lr\n";
    for (const auto& r : rows)
        s += std::to_string(r.epoch) + "," + format_double(r.train_loss) + "," + format_double(r.val_loss) + "," +
             format_double(r.train_acc) + "," + format_double(r.val_acc) + "," + format_double(r.lr) + "\n";
    write_text_file(path, s);
}

std::vector<double> TrainingCurves::val_losses() const {
    std::vector<double> out;
    for (const auto& r : rows) out.push_back(r.val_loss);
    return out;
}

std::pair<double, double> evaluate_loss(nn::Classifier<float>& model, const Dataset& D,
                                        const std::vector<double>& weights) {
    if (D.n_rows() == 0) throw data_error("cannot evaluate on an empty dataset");
    const nn::Tensor<float> z = nn::predict_logits(model, D.X);
    const std::size_t C = model.n_classes();
    double loss = 0, wsum = 0;
    std::size_t correct = 0;
    for (std::size_t i = 0; i < D.n_rows(); ++i) {
        const float* row = z.data.data() + i * C;
        const double mx = *std::max_element(row, row + C);
        double se = 0;
        for (std::size_t c = 0; c < C; ++c) se += std::exp(row[c] - mx);
        const auto y = static_cast<std::size_t>(D.y[i]);
        const double w = weights.empty() ? 1.0 : weights.at(y);
        loss += w * (std::log(se) + mx - row[y]);
        wsum += w;
        if (static_cast<std::size_t>(std::max_element(row, row + C) - row) == y) ++correct;
    }
    if (!std::isfinite(loss)) throw numeric_fault("evaluation loss is not finite");
    return {loss / wsum, static_cast<double>(correct) / static_cast<double>(D.n_rows())};
}

TrainResult train_model(nn::Classifier<float>& model, const Dataset& train, const Dataset& val,
                        const std::vector<double>& class_weights, const TrainConfig& cfg) {
    cfg.validate();
    if (train.n_rows() == 0 || val.n_rows() == 0) throw data_error("training and validation sets must be nonempty");
    if (train.n_features() != model.n_inputs() || val.n_features() != model.n_inputs())
        throw config_error("dataset width does not match the model input width");

    auto params = model.parameters();
    AdamState<float> adam;
    Rng order_rng(derive_seed(cfg.seed, 1));
    Rng dropout_rng(derive_seed(cfg.seed, 2));
    std::vector<std::size_t> order(train.n_rows());
    std::iota(order.begin(), order.end(), std::size_t{0});

    TrainResult res;
    res.best_val_loss = std::numeric_limits<double>::infinity();
    std::vector<std::vector<float>> best_params;
    double stop_best = std::numeric_limits<double>::infinity();
    std::size_t bad_epochs = 0;
    std::vector<double> history;

    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        const double lr = schedule_lr(cfg, epoch, history);
        shuffle_in_place(order, order_rng);
        double loss_sum = 0;
        std::size_t correct = 0;
        for (std::size_t b = 0; b < order.size(); b += cfg.batch) {
            const std::vector<std::size_t> rows(order.begin() + static_cast<long>(b),
                                                order.begin() + static_cast<long>(std::min(order.size(), b + cfg.batch)));
            std::vector<int> labels(rows.size());
            for (std::size_t i = 0; i < rows.size(); ++i) labels[i] = train.y[rows[i]];
            for (auto* p : params) p->zero_grad();
            nn::Graph<float> g;
            try {
                nn::Var<float> logits = model.forward(g, nn::gather_tensor<float>(train.X, rows), true, dropout_rng);
                const auto pred = nn::argmax_rows(logits.value());
                for (std::size_t i = 0; i < rows.size(); ++i) correct += pred[i] == labels[i];
                nn::Var<float> loss = nn::cross_entropy(logits, labels, class_weights);
                loss_sum += static_cast<double>(loss.value().data[0]) * static_cast<double>(rows.size());
                g.backward(loss);
            } catch (const Error& e) {
                if (e.kind() != ErrorKind::Numeric) throw;
                throw numeric_fault("training diverged at epoch " + std::to_string(epoch) + ", batch " +
                                    std::to_string(b / cfg.batch) + ": " + e.what());
            }
            optimizer_step(params, adam, cfg.optimizer, lr, cfg.weight_decay);
        }
        const auto [val_loss, val_acc] = evaluate_loss(model, val, class_weights);
        CurveRow row;
        row.epoch = epoch;
        row.train_loss = loss_sum / static_cast<double>(order.size());
        row.train_acc = static_cast<double>(correct) / static_cast<double>(order.size());
        row.val_loss = val_loss;
        row.val_acc = val_acc;
        row.lr = lr;
        res.curves.rows.push_back(row);
        history.push_back(val_loss);

        if (val_loss < res.best_val_loss) {
            res.best_val_loss = val_loss;
            res.best_epoch = epoch;
            best_params.clear();
            for (auto* p : params) best_params.push_back(p->value.data);
        }
        if (val_loss < stop_best - cfg.min_delta) {
            stop_best = val_loss;
            bad_epochs = 0;
        } else if (++bad_epochs >= cfg.early_stop_patience) {
            res.stopped_early = true;
            break;
        }
    }
    for (std::size_t k = 0; k < params.size(); ++k) params[k]->value.data = best_params[k];
    return res;
}

}  // namespace crashsev
