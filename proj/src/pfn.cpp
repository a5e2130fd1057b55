#include "crashsev/pfn.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>

#include "crashsev/train.hpp"
#include "crashsev/util.hpp"
#include "json.hpp"

namespace crashsev {

using nn::Graph;
using nn::Parameter;
using nn::Tensor;
using nn::Var;

namespace {

double normal(Rng& rng) {
    const double u1 = uniform01(rng), u2 = uniform01(rng);
    return std::sqrt(-2.0 * std::log1p(-u1)) * std::cos(6.283185307179586 * u2);
}

double uniform(Rng& rng, double lo, double hi) { return lo + (hi - lo) * uniform01(rng); }

std::size_t uniform_int(Rng& rng, std::size_t lo, std::size_t hi) { return lo + uniform_index(rng, hi - lo + 1); }

struct Latent {
    LatentKind kind = LatentKind::Net;
    std::size_t d = 0, classes = 2;
    // net
    std::size_t hidden = 0;
    std::vector<double> w1, b1, w2, b2;
    // tree: complete binary tree in heap order; internal nodes 0..2^depth-2
    std::size_t depth = 0;
    std::vector<std::size_t> feature;
    std::vector<double> threshold;
    std::vector<int> leaf_class;

    int operator()(const double* z) const {
        if (kind == LatentKind::Tree) {
            std::size_t node = 0;
            for (std::size_t l = 0; l < depth; ++l) node = 2 * node + (z[feature[node]] <= threshold[node] ? 1 : 2);
            return leaf_class[node - ((std::size_t{1} << depth) - 1)];
        }
        std::vector<double> h(hidden);
        for (std::size_t j = 0; j < hidden; ++j) {
            double a = b1[j];
            for (std::size_t i = 0; i < d; ++i) a += z[i] * w1[i * hidden + j];
            h[j] = std::tanh(a);
        }
        int best = 0;
        double best_v = -1e300;
        for (std::size_t c = 0; c < classes; ++c) {
            double a = b2[c];
            for (std::size_t j = 0; j < hidden; ++j) a += h[j] * w2[j * classes + c];
            if (a > best_v) {
                best_v = a;
                best = static_cast<int>(c);
            }
        }
        return best;
    }
};

Latent sample_latent(Rng& rng, LatentKind kind, std::size_t d, std::size_t classes, std::size_t depth,
                     std::size_t hidden) {
    Latent f;
    f.kind = kind;
    f.d = d;
    f.classes = classes;
    if (kind == LatentKind::Net) {
        f.hidden = hidden;
        const double s1 = 1.0 / std::sqrt(static_cast<double>(d)), s2 = 1.0 / std::sqrt(static_cast<double>(hidden));
        for (std::size_t i = 0; i < d * hidden; ++i) f.w1.push_back(2.0 * s1 * normal(rng));
        for (std::size_t j = 0; j < hidden; ++j) f.b1.push_back(0.5 * normal(rng));
        for (std::size_t i = 0; i < hidden * classes; ++i) f.w2.push_back(2.0 * s2 * normal(rng));
        for (std::size_t c = 0; c < classes; ++c) f.b2.push_back(0.3 * normal(rng));
        return f;
    }
    f.depth = depth;
    const std::size_t internal = (std::size_t{1} << depth) - 1, leaves = std::size_t{1} << depth;
    for (std::size_t i = 0; i < internal; ++i) {
        f.feature.push_back(uniform_index(rng, d));
        f.threshold.push_back(0.6 * normal(rng));
    }
    // cycle through the classes so at least min(leaves, classes) of them appear
    std::vector<int> order(classes);
    std::iota(order.begin(), order.end(), 0);
    shuffle_in_place(order, rng);
    for (std::size_t l = 0; l < leaves; ++l)
        f.leaf_class.push_back(l < classes ? order[l] : static_cast<int>(uniform_index(rng, classes)));
    shuffle_in_place(f.leaf_class, rng);
    return f;
}

}  // namespace

void PriorConfig::validate() const {
    if (d_min < 1 || d_max < d_min) throw config_error("prior feature range is empty");
    if (n_min < 2 || n_max < n_min) throw config_error("prior row range needs at least 2 rows");
    if (!(ctx_frac_min > 0 && ctx_frac_max < 1 && ctx_frac_min <= ctx_frac_max))
        throw config_error("context fraction must lie in (0, 1)");
    if (classes_min < 2 || classes_max < classes_min) throw config_error("prior class range is invalid");
    if (noise_max < 0 || noise_max > 1) throw config_error("label noise must lie in [0, 1]");
    if (tree_depth_max < 1 || net_hidden < 1) throw config_error("latent sizes must be positive");
}

TaskShape sample_task_shape(Rng& rng, const PriorConfig& cfg) {
    TaskShape s;
    s.n = uniform_int(rng, cfg.n_min, cfg.n_max);
    const double frac = uniform(rng, cfg.ctx_frac_min, cfg.ctx_frac_max);
    s.n_ctx = std::clamp<std::size_t>(static_cast<std::size_t>(std::llround(frac * static_cast<double>(s.n))), 1,
                                      s.n - 1);
    s.n_classes = uniform_int(rng, cfg.classes_min, cfg.classes_max);
    return s;
}

PriorTask sample_prior_task(Rng& rng, const PriorConfig& cfg, const TaskShape& shape, const TaskOptions& opts) {
    if (shape.n < 2 || shape.n_ctx < 1 || shape.n_ctx >= shape.n || shape.n_classes < 2)
        throw config_error("invalid task shape");
    PriorTask task;
    task.n_ctx = shape.n_ctx;
    task.n_classes = shape.n_classes;
    const std::size_t d = opts.d ? opts.d : uniform_int(rng, cfg.d_min, cfg.d_max);
    task.latent = opts.latent >= 0 ? static_cast<LatentKind>(opts.latent)
                                   : (uniform01(rng) < cfg.p_tree ? LatentKind::Tree : LatentKind::Net);
    task.noise = opts.noise >= 0 ? opts.noise : uniform(rng, 0.0, cfg.noise_max);
    const bool balanced =
        opts.force_balanced || (!opts.force_unbalanced && uniform01(rng) < cfg.p_balanced);
    const std::size_t C = shape.n_classes, n = shape.n;

    // raw feature i = scale_i * z_i + shift_i; the latent sees z
    std::vector<double> scale(d), shift(d);
    for (std::size_t i = 0; i < d; ++i) {
        scale[i] = std::exp(uniform(rng, -1.0, 1.0));
        shift[i] = normal(rng);
    }
    std::vector<int> relabel(C);
    std::iota(relabel.begin(), relabel.end(), 0);
    shuffle_in_place(relabel, rng);

    std::vector<double> z(d);
    for (int attempt = 0;; ++attempt) {
        task.tree_depth = task.latent == LatentKind::Tree
                              ? (opts.tree_depth > 0 ? static_cast<std::size_t>(opts.tree_depth)
                                                     : uniform_int(rng, 1, cfg.tree_depth_max))
                              : 0;
        const Latent f = sample_latent(rng, task.latent, d, C, task.tree_depth, cfg.net_hidden);
        std::vector<std::size_t> quota(C, balanced ? n / C : n);
        if (balanced)
            for (std::size_t c = 0; c < n % C; ++c) ++quota[c];
        task.x = Matrix(n, d);
        task.y.clear();
        const std::size_t max_draws = balanced ? 40 * n : n;
        for (std::size_t draw = 0; draw < max_draws && task.y.size() < n; ++draw) {
            for (std::size_t i = 0; i < d; ++i) z[i] = normal(rng);
            int label = f(z.data());
            if (uniform01(rng) < task.noise) label = static_cast<int>(uniform_index(rng, C));
            if (quota[static_cast<std::size_t>(label)] == 0) continue;
            --quota[static_cast<std::size_t>(label)];
            const std::size_t r = task.y.size();
            for (std::size_t i = 0; i < d; ++i) task.x(r, i) = scale[i] * z[i] + shift[i];
            task.y.push_back(relabel[static_cast<std::size_t>(label)]);
        }
        if (task.y.size() == n) break;
        if (attempt >= 200) throw numeric_fault("prior could not fill a balanced task");
    }

    // random row order, so the context is a uniform subset
    std::vector<std::size_t> perm(n);
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    shuffle_in_place(perm, rng);
    PriorTask out = task;
    for (std::size_t r = 0; r < n; ++r) {
        std::copy_n(task.x.row(perm[r]), d, out.x.row(r));
        out.y[r] = task.y[perm[r]];
    }
    return out;
}

PriorTask sample_prior_task(Rng& rng, const PriorConfig& cfg) {
    const TaskShape s = sample_task_shape(rng, cfg);
    return sample_prior_task(rng, cfg, s);
}

void PfnArch::validate() const {
    if (d_max < 1 || max_context < 1 || max_classes < 2) throw config_error("PFN envelope is invalid");
    if (layers < 1 || width < 1 || ffn < 1 || heads < 1 || width % heads != 0)
        throw config_error("PFN width must be divisible by the head count");
}

PfnModel::PfnModel(PfnArch arch) : arch_(arch) {
    arch_.validate();
    build();
}

PfnModel::PfnModel(PfnArch arch, std::uint64_t seed) : PfnModel(arch) {
    Rng rng(seed);
    for (auto& p : params_) {
        const std::string& n = p->name;
        auto ends_with = [&](const char* s) {
            const std::string suf(s);
            return n.size() >= suf.size() && n.compare(n.size() - suf.size(), suf.size(), suf) == 0;
        };
        if (ends_with(".gain")) {
            std::fill(p->value.data.begin(), p->value.data.end(), 1.0f);
        } else if (ends_with(".shift") || ends_with(".bias")) {
            std::fill(p->value.data.begin(), p->value.data.end(), 0.0f);
        } else if (n == "label.embed") {
            for (auto& v : p->value.data) v = static_cast<float>(2.0 * uniform01(rng) - 1.0);
        } else {
            const double bound = 1.0 / std::sqrt(static_cast<double>(p->value.shape[0]));
            for (auto& v : p->value.data) v = static_cast<float>((2.0 * uniform01(rng) - 1.0) * bound);
        }
    }
}

Parameter<float>& PfnModel::add(const std::string& name, std::vector<std::size_t> shape) {
    auto p = std::make_unique<Parameter<float>>();
    p->name = name;
    p->value = Tensor<float>(shape);
    p->grad = Tensor<float>(shape);
    params_.push_back(std::move(p));
    return *params_.back();
}

void PfnModel::build() {
    const std::size_t W = arch_.width, F = arch_.ffn;
    add("feat.weight", {arch_.d_max, W});
    add("feat.bias", {W});
    add("label.embed", {arch_.max_classes + 1, W});  // last row marks a query
    for (std::size_t l = 0; l < arch_.layers; ++l) {
        const std::string b = "layer" + std::to_string(l) + ".";
        add(b + "ln1.gain", {W});
        add(b + "ln1.shift", {W});
        add(b + "q.weight", {W, W});
        add(b + "k.weight", {W, W});
        add(b + "v.weight", {W, W});
        add(b + "o.weight", {W, W});
        add(b + "o.bias", {W});
        add(b + "ln2.gain", {W});
        add(b + "ln2.shift", {W});
        add(b + "ff1.weight", {W, F});
        add(b + "ff1.bias", {F});
        add(b + "ff2.weight", {F, W});
        add(b + "ff2.bias", {W});
    }
    add("final.gain", {W});
    add("final.shift", {W});
    add("out.weight", {W, arch_.max_classes});
    add("out.bias", {arch_.max_classes});
}

std::vector<Parameter<float>*> PfnModel::parameters() {
    std::vector<Parameter<float>*> out;
    for (auto& p : params_) out.push_back(p.get());
    return out;
}

Parameter<float>* PfnModel::find(const std::string& name) {
    for (auto& p : params_)
        if (p->name == name) return p.get();
    return nullptr;
}

Var<float> PfnModel::forward(Graph<float>& g, const Tensor<float>& x, const std::vector<int>& ctx_labels,
                             std::size_t tasks, std::size_t n, std::size_t n_ctx, bool as_constants) {
    if (x.shape.size() != 2 || x.shape[0] != tasks * n || x.shape[1] != arch_.d_max)
        throw config_error("PFN input must be [tasks*n, d_max]");
    if (n_ctx < 1 || n_ctx >= n || ctx_labels.size() != tasks * n_ctx)
        throw config_error("PFN context layout is inconsistent");
    auto P = [&](const std::string& name) {
        Parameter<float>* p = find(name);
        return as_constants ? g.constant(p->value) : g.param(*p);
    };
    std::vector<std::size_t> label_idx(tasks * n, arch_.max_classes);
    std::vector<std::size_t> query_rows;
    for (std::size_t t = 0; t < tasks; ++t) {
        for (std::size_t r = 0; r < n_ctx; ++r) {
            const int y = ctx_labels[t * n_ctx + r];
            if (y < 0 || static_cast<std::size_t>(y) >= arch_.max_classes) throw config_error("context label outside the PFN envelope");
            label_idx[t * n + r] = static_cast<std::size_t>(y);
        }
        for (std::size_t r = n_ctx; r < n; ++r) query_rows.push_back(t * n + r);
    }
    Var<float> h = nn::add(nn::add_bias(nn::matmul(g.constant(x), P("feat.weight")), P("feat.bias")),
                           nn::gather_rows(P("label.embed"), label_idx));
    for (std::size_t l = 0; l < arch_.layers; ++l) {
        const std::string b = "layer" + std::to_string(l) + ".";
        Var<float> a = nn::layer_norm(h, P(b + "ln1.gain"), P(b + "ln1.shift"));
        Var<float> att = nn::attention(nn::matmul(a, P(b + "q.weight")), nn::matmul(a, P(b + "k.weight")),
                                       nn::matmul(a, P(b + "v.weight")), n, n_ctx, arch_.heads);
        h = nn::add(h, nn::add_bias(nn::matmul(att, P(b + "o.weight")), P(b + "o.bias")));
        Var<float> a2 = nn::layer_norm(h, P(b + "ln2.gain"), P(b + "ln2.shift"));
        Var<float> f = nn::gelu(nn::add_bias(nn::matmul(a2, P(b + "ff1.weight")), P(b + "ff1.bias")));
        h = nn::add(h, nn::add_bias(nn::matmul(f, P(b + "ff2.weight")), P(b + "ff2.bias")));
    }
    Var<float> hq = nn::select_rows(nn::layer_norm(h, P("final.gain"), P("final.shift")), query_rows);
    Var<float> logits = nn::add_bias(nn::matmul(hq, P("out.weight")), P("out.bias"));
    if (!logits.value().all_finite()) throw numeric_fault("PFN produced non-finite logits");
    return logits;
}

std::string PfnModel::checksum() const {
    std::string bytes;
    for (const auto& p : params_) {
        bytes += p->name;
        bytes.append(reinterpret_cast<const char*>(p->value.data.data()), p->value.data.size() * sizeof(float));
    }
    return sha256_hex(bytes);
}

void PfnModel::save(const std::filesystem::path& path, const std::string& summary_json) const {
    using nlohmann::json;
    json params = json::array();
    for (const auto& p : params_) params.push_back({{"name", p->name}, {"shape", p->value.shape}, {"values", p->value.data}});
    json j = {{"version", 1},
              {"kind", "pfn"},
              {"frozen", frozen_},
              {"arch",
               {{"layers", arch_.layers}, {"width", arch_.width}, {"heads", arch_.heads}, {"ffn", arch_.ffn}}},
              {"envelope",
               {{"d_max", arch_.d_max}, {"max_context", arch_.max_context}, {"max_classes", arch_.max_classes}}},
              {"summary", json::parse(summary_json)},
              {"parameters", params}};
    write_text_file(path, j.dump(1));
}

PfnModel PfnModel::load(const std::filesystem::path& path) {
    using nlohmann::json;
    try {
        const json j = json::parse(read_text_file(path));
        if (j.at("version").get<int>() != 1 || j.at("kind").get<std::string>() != "pfn")
            throw data_error(path.string() + " is not a PFN checkpoint of a supported version");
        PfnArch a;
        a.layers = j.at("arch").at("layers");
        a.width = j.at("arch").at("width");
        a.heads = j.at("arch").at("heads");
        a.ffn = j.at("arch").at("ffn");
        a.d_max = j.at("envelope").at("d_max");
        a.max_context = j.at("envelope").at("max_context");
        a.max_classes = j.at("envelope").at("max_classes");
        PfnModel m(a);
        std::size_t matched = 0;
        for (const json& pj : j.at("parameters")) {
            Parameter<float>* p = m.find(pj.at("name").get<std::string>());
            if (!p || pj.at("shape").get<std::vector<std::size_t>>() != p->value.shape)
                throw data_error("PFN checkpoint parameter " + pj.at("name").get<std::string>() + " does not fit");
            p->value.data = pj.at("values").get<std::vector<float>>();
            if (p->value.data.size() != p->value.size()) throw data_error("PFN checkpoint tensor is truncated");
            ++matched;
        }
        if (matched != m.params_.size()) throw data_error("PFN checkpoint is missing parameters");
        if (j.at("frozen").get<bool>()) m.freeze();
        return m;
    } catch (const json::exception& e) {
        throw data_error("PFN checkpoint " + path.string() + " is malformed: " + e.what());
    }
}

void PretrainConfig::validate() const {
    if (tasks < 1) throw config_error("PFN pretraining needs at least one task");
    if (tasks_per_step < 1) throw config_error("tasks_per_step must be at least 1");
    if (!(lr > 0) || !(lr_final > 0)) throw config_error("PFN learning rates must be positive");
}

void PretrainLog::write_csv(const std::filesystem::path& path) const {
    std::string s = "step,loss\n";
    for (std::size_t i = 0; i < step_loss.size(); ++i) s += std::to_string(i) + "," + format_double(step_loss[i]) + "\n";
    write_text_file(path, s);
}

namespace {

// Standardizes a task with its context statistics and writes it zero-padded into rows
// [row0, row0 + n) of x (width d_max).
void pack_task(const Matrix& tx, std::size_t n_ctx, std::size_t d_max, float* out) {
    const std::size_t n = tx.rows, d = tx.cols;
    for (std::size_t c = 0; c < d; ++c) {
        double mean = 0;
        for (std::size_t r = 0; r < n_ctx; ++r) mean += tx(r, c);
        mean /= static_cast<double>(n_ctx);
        double var = 0;
        for (std::size_t r = 0; r < n_ctx; ++r) var += (tx(r, c) - mean) * (tx(r, c) - mean);
        const double sd = std::sqrt(var / static_cast<double>(n_ctx));
        for (std::size_t r = 0; r < n; ++r)
            out[r * d_max + c] = sd > 1e-12 ? static_cast<float>((tx(r, c) - mean) / sd) : 0.0f;
    }
    for (std::size_t r = 0; r < n; ++r)
        for (std::size_t c = d; c < d_max; ++c) out[r * d_max + c] = 0.0f;
}

}  // namespace

PfnModel pretrain_pfn(const PriorConfig& prior, const PfnArch& arch, const PretrainConfig& cfg, PretrainLog* log) {
    prior.validate();
    arch.validate();
    cfg.validate();
    if (prior.d_max > arch.d_max || prior.classes_max > arch.max_classes || prior.n_max - 1 > arch.max_context)
        throw config_error("prior draws tasks outside the model envelope");
    const auto t0 = std::chrono::steady_clock::now();
    PfnModel model(arch, derive_seed(cfg.seed, 0));
    auto params = model.parameters();
    AdamState<float> adam;
    const std::size_t B = cfg.tasks_per_step;
    const std::size_t steps = (cfg.tasks + B - 1) / B;
    const std::uint64_t task_stream = derive_seed(cfg.seed, 1), shape_stream = derive_seed(cfg.seed, 2);

    for (std::size_t s = 0; s < steps; ++s) {
        const std::size_t tasks = std::min(B, cfg.tasks - s * B);
        Rng shape_rng(derive_seed(shape_stream, s));
        const TaskShape shape = sample_task_shape(shape_rng, prior);
        std::vector<PriorTask> batch(tasks);
#pragma omp parallel for schedule(dynamic)
        for (long i = 0; i < static_cast<long>(tasks); ++i) {
            Rng rng(derive_seed(task_stream, s * B + static_cast<std::size_t>(i)));
            batch[static_cast<std::size_t>(i)] = sample_prior_task(rng, prior, shape);
        }
        const std::size_t n = shape.n, n_ctx = shape.n_ctx, nq = n - n_ctx;
        Tensor<float> x({tasks * n, arch.d_max});
        std::vector<int> ctx_labels, query_labels;
        for (std::size_t t = 0; t < tasks; ++t) {
            pack_task(batch[t].x, n_ctx, arch.d_max, x.data.data() + t * n * arch.d_max);
            ctx_labels.insert(ctx_labels.end(), batch[t].y.begin(), batch[t].y.begin() + static_cast<long>(n_ctx));
            query_labels.insert(query_labels.end(), batch[t].y.begin() + static_cast<long>(n_ctx), batch[t].y.end());
        }
        for (auto* p : params) p->zero_grad();
        Graph<float> g;
        Var<float> logits = model.forward(g, x, ctx_labels, tasks, n, n_ctx, false);
        Var<float> loss = nn::cross_entropy(logits, query_labels, {}, shape.n_classes);
        if (log) log->step_loss.push_back(loss.value().data[0]);
        g.backward(loss);
        (void)nq;

        double norm2 = 0;
        for (auto* p : params)
            for (float v : p->grad.data) norm2 += static_cast<double>(v) * v;
        const double norm = std::sqrt(norm2);
        if (!std::isfinite(norm)) throw numeric_fault("PFN gradient is not finite at step " + std::to_string(s));
        if (cfg.grad_clip > 0 && norm > cfg.grad_clip) {
            const auto f = static_cast<float>(cfg.grad_clip / norm);
            for (auto* p : params)
                for (float& v : p->grad.data) v *= f;
        }
        double lr;
        if (s < cfg.warmup_steps) {
            lr = cfg.lr * static_cast<double>(s + 1) / static_cast<double>(cfg.warmup_steps);
        } else {
            const double span = static_cast<double>(std::max<std::size_t>(1, steps - cfg.warmup_steps));
            const double prog = static_cast<double>(s - cfg.warmup_steps) / span;
            lr = cfg.lr_final + 0.5 * (cfg.lr - cfg.lr_final) * (1.0 + std::cos(3.141592653589793 * prog));
        }
        optimizer_step(params, adam, OptimizerKind::AdamW, lr, cfg.weight_decay);
    }
    model.freeze();
    if (log) log->seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return model;
}

std::vector<std::size_t> stratified_subsample(const std::vector<int>& y, std::size_t target, std::uint64_t seed) {
    int max_label = -1;
    for (int v : y) {
        if (v < 0) throw data_error("negative label in subsample");
        max_label = std::max(max_label, v);
    }
    std::vector<std::vector<std::size_t>> members(static_cast<std::size_t>(max_label + 1));
    for (std::size_t i = 0; i < y.size(); ++i) members[static_cast<std::size_t>(y[i])].push_back(i);
    if (target >= y.size()) {
        std::vector<std::size_t> all(y.size());
        std::iota(all.begin(), all.end(), std::size_t{0});
        return all;
    }
    std::size_t present = 0;
    for (const auto& m : members) present += !m.empty();
    if (target < present) throw config_error("subsample is smaller than the number of classes present");

    // proportional quotas, at least one per present class, remainders by largest fraction
    const auto N = static_cast<double>(y.size());
    std::vector<std::size_t> quota(members.size(), 0);
    std::vector<std::pair<double, std::size_t>> frac;
    std::size_t used = 0;
    for (std::size_t c = 0; c < members.size(); ++c) {
        if (members[c].empty()) continue;
        const double exact = static_cast<double>(target) * static_cast<double>(members[c].size()) / N;
        quota[c] = std::max<std::size_t>(1, static_cast<std::size_t>(exact));
        used += quota[c];
        frac.emplace_back(-(exact - std::floor(exact)), c);
    }
    std::sort(frac.begin(), frac.end());
    for (std::size_t i = 0; used < target; i = (i + 1) % frac.size()) {
        const std::size_t c = frac[i].second;
        if (quota[c] < members[c].size()) {
            ++quota[c];
            ++used;
        }
    }
    while (used > target) {  // the minimum-one rule can overshoot; trim the largest quota
        const auto c = static_cast<std::size_t>(std::max_element(quota.begin(), quota.end()) - quota.begin());
        --quota[c];
        --used;
    }
    std::vector<std::size_t> out;
    for (std::size_t c = 0; c < members.size(); ++c) {
        if (quota[c] == 0) continue;
        Rng rng(derive_seed(seed, c));
        auto m = members[c];
        shuffle_in_place(m, rng);
        out.insert(out.end(), m.begin(), m.begin() + static_cast<long>(quota[c]));
    }
    std::sort(out.begin(), out.end());
    return out;
}

Matrix pfn_predict(const PfnModel& model_in, const Matrix& ctx_x_in, const std::vector<int>& ctx_y_in,
                   const Matrix& query_x, const PredictOptions& opts) {
    // Parameters only ever enter the graph as constants, so the model is not modified.
    auto& model = const_cast<PfnModel&>(model_in);
    const PfnArch& a = model.arch();
    if (ctx_x_in.rows == 0 || ctx_x_in.rows != ctx_y_in.size()) throw data_error("PFN context is empty or misaligned");
    if (query_x.cols != ctx_x_in.cols) throw data_error("query and context feature counts differ");
    if (ctx_x_in.cols > a.d_max)
        throw config_error("PFN envelope: " + std::to_string(ctx_x_in.cols) + " features exceed d_max " +
                           std::to_string(a.d_max));
    for (int y : ctx_y_in) {
        if (y < 0) throw data_error("negative context label");
        if (static_cast<std::size_t>(y) >= a.max_classes)
            throw config_error("PFN envelope: context has more than " + std::to_string(a.max_classes) + " classes");
    }
    Matrix ctx_x = ctx_x_in;
    std::vector<int> ctx_y = ctx_y_in;
    if (ctx_x.rows > a.max_context) {
        if (!opts.subsample_fallback)
            throw config_error("PFN envelope: context of " + std::to_string(ctx_x.rows) + " rows exceeds " +
                               std::to_string(a.max_context) + " (enable the subsampling fallback)");
        const auto keep = stratified_subsample(ctx_y_in, a.max_context, opts.seed);
        ctx_x = Matrix(keep.size(), ctx_x_in.cols);
        ctx_y.clear();
        for (std::size_t i = 0; i < keep.size(); ++i) {
            std::copy_n(ctx_x_in.row(keep[i]), ctx_x_in.cols, ctx_x.row(i));
            ctx_y.push_back(ctx_y_in[keep[i]]);
        }
    }
    std::vector<bool> present(a.max_classes, false);
    for (int y : ctx_y) present[static_cast<std::size_t>(y)] = true;

    const std::size_t n_ctx = ctx_x.rows, d = ctx_x.cols;
    Matrix probs(query_x.rows, a.max_classes);
    const std::size_t chunk = std::max<std::size_t>(1, opts.query_chunk);
    for (std::size_t q0 = 0; q0 < query_x.rows; q0 += chunk) {
        const std::size_t nq = std::min(chunk, query_x.rows - q0);
        Matrix task(n_ctx + nq, d);
        std::copy(ctx_x.data.begin(), ctx_x.data.end(), task.data.begin());
        std::copy_n(query_x.row(q0), nq * d, task.row(n_ctx));
        Tensor<float> x({n_ctx + nq, a.d_max});
        pack_task(task, n_ctx, a.d_max, x.data.data());
        Graph<float> g;
        const Var<float> z = model.forward(g, x, ctx_y, 1, n_ctx + nq, n_ctx, true);
        const auto& zv = z.value().data;
        for (std::size_t i = 0; i < nq; ++i) {
            double mx = -1e300;
            for (std::size_t c = 0; c < a.max_classes; ++c)
                if (present[c]) mx = std::max(mx, static_cast<double>(zv[i * a.max_classes + c]));
            double sum = 0;
            for (std::size_t c = 0; c < a.max_classes; ++c) {
                const double e = present[c] ? std::exp(zv[i * a.max_classes + c] - mx) : 0.0;
                probs(q0 + i, c) = e;
                sum += e;
            }
            for (std::size_t c = 0; c < a.max_classes; ++c) probs(q0 + i, c) /= sum;
        }
    }
    return probs;
}

HeldOutResult evaluate_held_out(const PfnModel& model, const PriorConfig& prior, std::size_t count,
                                std::uint64_t seed, std::size_t classes) {
    if (count == 0) throw config_error("held-out evaluation needs at least one task");
    std::vector<double> acc(count), chance(count);
#pragma omp parallel for schedule(dynamic)
    for (long i = 0; i < static_cast<long>(count); ++i) {
        Rng rng(derive_seed(seed, static_cast<std::uint64_t>(i)));
        TaskShape shape = sample_task_shape(rng, prior);
        if (classes) shape.n_classes = classes;
        TaskOptions opts;
        opts.force_balanced = true;
        const PriorTask t = sample_prior_task(rng, prior, shape, opts);
        Matrix cx(t.n_ctx, t.d()), qx(t.n_rows() - t.n_ctx, t.d());
        std::copy_n(t.x.data.begin(), cx.data.size(), cx.data.begin());
        std::copy(t.x.data.begin() + static_cast<long>(cx.data.size()), t.x.data.end(), qx.data.begin());
        const std::vector<int> cy(t.y.begin(), t.y.begin() + static_cast<long>(t.n_ctx));
        const Matrix p = pfn_predict(model, cx, cy, qx);
        std::size_t correct = 0;
        for (std::size_t r = 0; r < qx.rows; ++r) {
            const double* row = p.row(r);
            const auto pred = static_cast<int>(std::max_element(row, row + p.cols) - row);
            correct += pred == t.y[t.n_ctx + r];
        }
        acc[static_cast<std::size_t>(i)] = static_cast<double>(correct) / static_cast<double>(qx.rows);
        chance[static_cast<std::size_t>(i)] = 1.0 / static_cast<double>(shape.n_classes);
    }
    HeldOutResult r;
    r.accuracy = std::accumulate(acc.begin(), acc.end(), 0.0) / static_cast<double>(count);
    r.chance = std::accumulate(chance.begin(), chance.end(), 0.0) / static_cast<double>(count);
    return r;
}

VariableCoder VariableCoder::fit(const Dataset& ref) {
    VariableCoder vc;
    vc.groups = ref.groups;
    vc.columns.assign(ref.groups.size(), {});
    for (std::size_t c = 0; c < ref.n_features(); ++c) vc.columns[static_cast<std::size_t>(ref.column_group[c])].push_back(c);
    for (std::size_t g = 0; g < vc.groups.size(); ++g) {
        const auto& cols = vc.columns[g];
        const bool numeric = cols.size() == 1 && ref.feature_names[cols[0]].find('=') == std::string::npos;
        vc.numeric.push_back(numeric);
        std::vector<int> rank(cols.size(), 0);
        if (!numeric) {
            std::vector<std::size_t> count(cols.size(), 0);
            std::vector<double> label_sum(cols.size(), 0.0);
            for (std::size_t r = 0; r < ref.n_rows(); ++r)
                for (std::size_t k = 0; k < cols.size(); ++k)
                    if (ref.X(r, cols[k]) > 0.5) {
                        ++count[k];
                        label_sum[k] += ref.y[r];
                    }
            // unseen categories sit in the middle of the label range
            auto mean = [&](std::size_t k) { return count[k] ? label_sum[k] / static_cast<double>(count[k]) : 1.0; };
            std::vector<std::size_t> order(cols.size());
            std::iota(order.begin(), order.end(), std::size_t{0});
            std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
                if (mean(a) != mean(b)) return mean(a) < mean(b);
                return count[a] > count[b];
            });
            for (std::size_t k = 0; k < order.size(); ++k) rank[order[k]] = static_cast<int>(k);
        }
        vc.rank_of_column.push_back(rank);
    }
    return vc;
}

Matrix VariableCoder::encode(const Dataset& D) const {
    if (D.groups != groups) throw data_error("dataset variables differ from the coder's reference");
    Matrix out(D.n_rows(), groups.size());
    for (std::size_t r = 0; r < D.n_rows(); ++r)
        for (std::size_t g = 0; g < groups.size(); ++g) {
            const auto& cols = columns[g];
            if (numeric[g]) {
                out(r, g) = D.X(r, cols[0]);
                continue;
            }
            double code = static_cast<double>(cols.size());
            for (std::size_t k = 0; k < cols.size(); ++k)
                if (D.X(r, cols[k]) > 0.5) code = rank_of_column[g][k];
            out(r, g) = code;
        }
    return out;
}

}  // namespace crashsev
