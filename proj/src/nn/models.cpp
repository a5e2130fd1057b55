#include "crashsev/nn/models.hpp"

#include <algorithm>
#include <cmath>
#include <set>

namespace crashsev::nn {

std::string variant_name(Variant v) { return v == Variant::MambaNet ? "MambaNet" : "MambaAttention"; }

Variant parse_variant(const std::string& s) {
    if (s == "MambaNet" || s == "mambanet") return Variant::MambaNet;
    if (s == "MambaAttention" || s == "mambaattention") return Variant::MambaAttention;
    throw config_error("unknown model variant '" + s + "'");
}

std::size_t ModelSpec::n_tokens() const {
    int mx = -1;
    for (int g : column_group) mx = std::max(mx, g);
    return static_cast<std::size_t>(mx + 1);
}

void ModelSpec::validate() const {
    if (column_group.empty()) throw config_error("model needs at least one input column");
    std::set<int> seen(column_group.begin(), column_group.end());
    if (*seen.begin() != 0 || static_cast<std::size_t>(*seen.rbegin()) + 1 != seen.size())
        throw config_error("column groups must cover 0..tokens-1");
    if (embed_width == 0 || n_state == 0 || dt_rank == 0) throw config_error("model widths must be positive");
    if (conv_kernel % 2 == 0) throw config_error("conv kernel width must be odd");
    if (variant == Variant::MambaAttention && (heads == 0 || embed_width % heads != 0))
        throw config_error("attention head count must divide the embedding width");
    if (!(dropout >= 0.0 && dropout < 1.0)) throw config_error("dropout must lie in [0, 1)");
    if (hidden.empty()) throw config_error("head needs at least one hidden layer");
    if (n_classes < 2) throw config_error("need at least two classes");
}

ModelSpec ModelSpec::mamba_net(std::vector<int> column_group) {
    ModelSpec s;
    s.variant = Variant::MambaNet;
    s.hidden = {128, 64};
    s.column_group = std::move(column_group);
    return s;
}

ModelSpec ModelSpec::mamba_attention(std::vector<int> column_group) {
    ModelSpec s;
    s.variant = Variant::MambaAttention;
    s.hidden = {256, 128};
    s.column_group = std::move(column_group);
    return s;
}

template <class T>
SsmClassifier<T>::SsmClassifier(ModelSpec spec) : spec_(std::move(spec)) {
    spec_.validate();
    build();
}

template <class T>
SsmClassifier<T>::SsmClassifier(ModelSpec spec, std::uint64_t seed) : SsmClassifier(std::move(spec)) {
    Rng rng(seed);
    auto uniform = [&](Parameter<T>& p, double bound) {
        for (auto& v : p.value.data) v = static_cast<T>((2.0 * uniform01(rng) - 1.0) * bound);
    };
    const std::size_t W = spec_.embed_width, N = spec_.n_state, R = spec_.dt_rank;
    for (auto& p : params_) {
        const std::string& n = p->name;
        if (n == "embed.weight" || n == "embed.bias") {
            uniform(*p, 1.0);
        } else if (n == "conv.kernel" || n == "conv.bias") {
            uniform(*p, 1.0 / std::sqrt(static_cast<double>(spec_.conv_kernel)));
        } else if (n == "ssm.dt_bias") {
            // step sizes log-uniform in [1e-3, 1e-1], stored through the inverse softplus
            for (auto& v : p->value.data) {
                const double dt = std::exp(std::log(1e-3) + uniform01(rng) * (std::log(1e-1) - std::log(1e-3)));
                v = static_cast<T>(dt + std::log(-std::expm1(-dt)));
            }
        } else if (n == "ssm.A_log") {
            for (std::size_t d = 0; d < W; ++d)
                for (std::size_t s = 0; s < N; ++s) p->value.data[d * N + s] = static_cast<T>(std::log(double(s + 1)));
        } else if (n == "ssm.D") {
            std::fill(p->value.data.begin(), p->value.data.end(), T(1));
        } else if (n == "ssm.dt_proj") {
            uniform(*p, 1.0 / std::sqrt(static_cast<double>(R)));
        } else {
            // linear layers: weight [fan_in, fan_out]; bias shares the weight's fan-in
            std::size_t fan_in = p->value.shape[0];
            if (p->value.shape.size() == 1) fan_in = find(n.substr(0, n.size() - 4) + "weight")->value.shape[0];
            uniform(*p, 1.0 / std::sqrt(static_cast<double>(fan_in)));
        }
    }
    initialized_ = true;
}

template <class T>
Parameter<T>& SsmClassifier<T>::add(const std::string& name, std::vector<std::size_t> shape) {
    auto p = std::make_unique<Parameter<T>>();
    p->name = name;
    p->value = Tensor<T>(shape);
    p->grad = Tensor<T>(shape);
    params_.push_back(std::move(p));
    return *params_.back();
}

template <class T>
void SsmClassifier<T>::build() {
    const std::size_t C = spec_.n_inputs(), G = spec_.n_tokens(), W = spec_.embed_width;
    const std::size_t N = spec_.n_state, R = spec_.dt_rank;
    add("embed.weight", {C, W});
    add("embed.bias", {G, W});
    if (spec_.variant == Variant::MambaNet) {
        add("conv.kernel", {spec_.conv_kernel, W});
        add("conv.bias", {W});
    } else {
        add("attn.q.weight", {W, W});
        add("attn.k.weight", {W, W});
        add("attn.v.weight", {W, W});
    }
    add("ssm.x_proj.weight", {W, R + 2 * N});
    add("ssm.dt_proj", {R, W});
    add("ssm.dt_bias", {W});
    add("ssm.A_log", {W, N});
    add("ssm.D", {W});
    std::size_t in = W;
    for (std::size_t i = 0; i < spec_.hidden.size(); ++i) {
        const std::string base = "head." + std::to_string(i) + ".";
        add(base + "weight", {in, spec_.hidden[i]});
        add(base + "bias", {spec_.hidden[i]});
        in = spec_.hidden[i];
    }
    add("out.weight", {in, spec_.n_classes});
    add("out.bias", {spec_.n_classes});
}

template <class T>
Parameter<T>* SsmClassifier<T>::find(const std::string& name) {
    for (auto& p : params_)
        if (p->name == name) return p.get();
    return nullptr;
}

template <class T>
std::vector<Parameter<T>*> SsmClassifier<T>::parameters() {
    std::vector<Parameter<T>*> out;
    for (auto& p : params_) out.push_back(p.get());
    return out;
}

template <class T>
Var<T> SsmClassifier<T>::forward(Graph<T>& g, const Tensor<T>& x, bool train, Rng& rng) {
    if (!initialized_) throw config_error("model parameters are not initialized");
    if (x.shape.size() != 2 || x.shape[1] != spec_.n_inputs())
        throw config_error("input width " + std::to_string(x.cols()) + " does not match model width " +
                           std::to_string(spec_.n_inputs()));
    auto P = [&](const char* name) { return g.param(*find(name)); };
    const std::size_t G = spec_.n_tokens(), N = spec_.n_state, R = spec_.dt_rank;

    Var<T> tok = featurize(x, P("embed.weight"), P("embed.bias"), spec_.column_group);
    Var<T> u;
    if (spec_.variant == Variant::MambaNet) {
        u = silu(depthwise_conv(tok, P("conv.kernel"), P("conv.bias"), G));
    } else {
        Var<T> q = matmul(tok, P("attn.q.weight"));
        Var<T> k = matmul(tok, P("attn.k.weight"));
        Var<T> v = matmul(tok, P("attn.v.weight"));
        u = nn::add(attention(q, k, v, G, G, spec_.heads), tok);
    }
    Var<T> proj = matmul(u, P("ssm.x_proj.weight"));
    Var<T> dt_low = slice_cols(proj, 0, R);
    Var<T> Bm = slice_cols(proj, R, N);
    Var<T> Cm = slice_cols(proj, R + N, N);
    Var<T> delta = softplus(add_bias(matmul(dt_low, P("ssm.dt_proj")), P("ssm.dt_bias")));
    Var<T> A = neg(exp(P("ssm.A_log")));
    Var<T> y = ssm_scan(u, delta, A, Bm, Cm, P("ssm.D"), G);

    Var<T> h = mean_tokens(y, G);
    for (std::size_t i = 0; i < spec_.hidden.size(); ++i) {
        const std::string base = "head." + std::to_string(i) + ".";
        h = add_bias(matmul(h, g.param(*find(base + "weight"))), g.param(*find(base + "bias")));
        h = dropout(relu(h), spec_.dropout, rng, train);
    }
    Var<T> logits = add_bias(matmul(h, P("out.weight")), P("out.bias"));
    if (!logits.value().all_finite()) throw numeric_fault("model produced non-finite logits");
    return logits;
}

template <class T>
Tensor<T> to_tensor(const Matrix& x, std::size_t begin, std::size_t end) {
    Tensor<T> t({end - begin, x.cols});
    for (std::size_t i = 0; i < t.size(); ++i) t.data[i] = static_cast<T>(x.data[begin * x.cols + i]);
    return t;
}

template <class T>
Tensor<T> gather_tensor(const Matrix& x, const std::vector<std::size_t>& rows) {
    Tensor<T> t({rows.size(), x.cols});
    for (std::size_t i = 0; i < rows.size(); ++i) {
        const double* src = x.row(rows[i]);
        for (std::size_t j = 0; j < x.cols; ++j) t.data[i * x.cols + j] = static_cast<T>(src[j]);
    }
    return t;
}

template <class T>
Tensor<T> predict_logits(Classifier<T>& model, const Matrix& x, std::size_t chunk) {
    const std::size_t C = model.n_classes();
    Tensor<T> out({x.rows, C});
    Rng unused(0);
    for (std::size_t b = 0; b < x.rows; b += chunk) {
        const std::size_t e = std::min(x.rows, b + chunk);
        Graph<T> g;
        Var<T> z = model.forward(g, to_tensor<T>(x, b, e), false, unused);
        std::copy(z.value().data.begin(), z.value().data.end(), out.data.begin() + static_cast<long>(b * C));
    }
    return out;
}

namespace {
template <class T>
std::vector<int> argmax_impl(const Tensor<T>& z) {
    const std::size_t m = z.rows(), n = z.cols();
    std::vector<int> out(m);
    for (std::size_t i = 0; i < m; ++i) {
        const T* row = z.data.data() + i * n;
        out[i] = static_cast<int>(std::max_element(row, row + n) - row);
    }
    return out;
}
}  // namespace

std::vector<int> argmax_rows(const Tensor<float>& logits) { return argmax_impl(logits); }
std::vector<int> argmax_rows(const Tensor<double>& logits) { return argmax_impl(logits); }

template class SsmClassifier<float>;
template class SsmClassifier<double>;
template Tensor<float> predict_logits(Classifier<float>&, const Matrix&, std::size_t);
template Tensor<double> predict_logits(Classifier<double>&, const Matrix&, std::size_t);
template Tensor<float> to_tensor(const Matrix&, std::size_t, std::size_t);
template Tensor<double> to_tensor(const Matrix&, std::size_t, std::size_t);
template Tensor<float> gather_tensor(const Matrix&, const std::vector<std::size_t>&);
template Tensor<double> gather_tensor(const Matrix&, const std::vector<std::size_t>&);

}  // namespace crashsev::nn
