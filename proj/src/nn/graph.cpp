#include "crashsev/nn/graph.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>
#include <type_traits>

#include "crashsev/kernels.hpp"

namespace crashsev::nn {

namespace kn = crashsev::kernels::par;

template <class T>
Tensor<T>::Tensor(std::vector<std::size_t> s, T fill) : shape(std::move(s)) {
    std::size_t n = 1;
    for (std::size_t d : shape) n *= d;
    data.assign(n, fill);
}

template <class T>
bool Tensor<T>::all_finite() const {
    for (T v : data)
        if (!std::isfinite(v)) return false;
    return true;
}

template <class T>
void Parameter<T>::zero_grad() {
    if (grad.shape != value.shape) grad = Tensor<T>(value.shape);
    else std::fill(grad.data.begin(), grad.data.end(), T(0));
}

template <class T>
const Tensor<T>& Var<T>::value() const {
    return graph->node(id).value;
}

template <class T>
Var<T> Graph<T>::constant(Tensor<T> value) {
    return record(std::move(value), false, nullptr);
}

template <class T>
Var<T> Graph<T>::param(Parameter<T>& p) {
    auto n = std::make_unique<Node>();
    n->value = p.value;
    n->param = &p;
    n->requires_grad = true;
    nodes_.push_back(std::move(n));
    return {this, static_cast<int>(nodes_.size() - 1)};
}

template <class T>
Var<T> Graph<T>::record(Tensor<T> value, bool requires_grad, std::function<void(Graph&)> bw) {
    auto n = std::make_unique<Node>();
    n->value = std::move(value);
    n->requires_grad = requires_grad;
    if (requires_grad) n->backward = std::move(bw);
    nodes_.push_back(std::move(n));
    return {this, static_cast<int>(nodes_.size() - 1)};
}

template <class T>
Tensor<T>& Graph<T>::grad(int id) {
    Node& n = node(id);
    if (n.grad.data.size() != n.value.data.size()) n.grad = Tensor<T>(n.value.shape);
    return n.grad;
}

template <class T>
void Graph<T>::backward(Var<T> loss) {
    if (nodes_.empty() || loss.graph != this || loss.id < 0 || static_cast<std::size_t>(loss.id) >= nodes_.size())
        throw config_error("backward called without a recorded forward tape");
    Node& root = node(loss.id);
    if (root.value.size() != 1) throw config_error("backward needs a scalar loss");
    if (!root.value.all_finite()) throw numeric_fault("loss is not finite");
    grad(loss.id).data[0] = T(1);
    for (int i = loss.id; i >= 0; --i) {
        Node& n = node(i);
        if (!n.requires_grad || n.grad.data.empty()) continue;
        if (n.param) {
            Parameter<T>& p = *n.param;
            if (p.grad.shape != p.value.shape) p.zero_grad();
            for (std::size_t j = 0; j < p.grad.size(); ++j) p.grad.data[j] += n.grad.data[j];
        } else if (n.backward) {
            n.backward(*this);
        }
    }
    nodes_.clear();
}

namespace {

template <class T>
bool any_grad(std::initializer_list<Var<T>> vs) {
    for (const auto& v : vs)
        if (v.graph->requires_grad(v.id)) return true;
    return false;
}

template <class T>
void require_same_graph(std::initializer_list<Var<T>> vs) {
    Graph<T>* g = vs.begin()->graph;
    for (const auto& v : vs)
        if (v.graph != g) throw config_error("ops mix tensors from different graphs");
}

template <class T>
void require_shape(bool ok, const char* op) {
    if (!ok) throw config_error(std::string(op) + ": dimension mismatch");
}

template <class T, class F, class D>
Var<T> unary(Var<T> a, F f, D df) {
    Graph<T>& g = *a.graph;
    const Tensor<T>& x = a.value();
    Tensor<T> y(x.shape);
    for (std::size_t i = 0; i < x.size(); ++i) y.data[i] = f(x.data[i]);
    const int ia = a.id;
    Var<T> out;
    out = g.record(std::move(y), any_grad({a}), [ia, df, &g, oid = static_cast<int>(g.size())](Graph<T>&) {
        const Tensor<T>& gy = g.node(oid).grad;
        const Tensor<T>& x = g.node(ia).value;
        const Tensor<T>& y = g.node(oid).value;
        Tensor<T>& gx = g.grad(ia);
        for (std::size_t i = 0; i < gy.size(); ++i) gx.data[i] += gy.data[i] * df(x.data[i], y.data[i]);
    });
    return out;
}

// Large per-call buffers (scan states, attention probabilities) are recycled through a
// per-thread free list; fresh multi-megabyte allocations cost more than the scan itself.
template <class T>
thread_local std::vector<std::unique_ptr<std::vector<T>>> g_free_buffers;

template <class T>
std::shared_ptr<std::vector<T>> scratch_buffer(std::size_t n) {
    auto& pool = g_free_buffers<T>;
    std::unique_ptr<std::vector<T>> buf;
    if (!pool.empty()) {
        buf = std::move(pool.back());
        pool.pop_back();
    } else {
        buf = std::make_unique<std::vector<T>>();
    }
    buf->resize(n);
    return {buf.release(), [](std::vector<T>* p) {
                auto& pl = g_free_buffers<T>;
                if (pl.size() < 16) pl.emplace_back(p);
                else delete p;
            }};
}

// Cephes-style expf: range reduction by ln 2 plus a degree-6 polynomial. Unlike libm's expf it
// vectorizes without fast-math; relative error stays within a few ulp. Inputs below -87 saturate
// at about 1.6e-38 instead of flushing to zero.
inline float exp_poly(float x) {
    const float xc = std::min(std::max(x, -87.0f), 88.0f);
    // truncation of a positive value is floor, and unlike std::floor it vectorizes
    const std::int32_t ni = static_cast<std::int32_t>(xc * 1.44269504088896341f + 128.5f) - 128;
    const auto n = static_cast<float>(ni);
    const float r = (xc - n * 0.693359375f) - n * -2.12194440e-4f;
    float p = 1.9875691500e-4f;
    p = p * r + 1.3981999507e-3f;
    p = p * r + 8.3334519073e-3f;
    p = p * r + 4.1665795894e-2f;
    p = p * r + 1.6666665459e-1f;
    p = p * r + 5.0000001201e-1f;
    p = p * r * r + r + 1.0f;
    const std::int32_t bits = (ni + 127) << 23;
    float scale;
    std::memcpy(&scale, &bits, sizeof scale);
    return p * scale;
}

template <class T>
inline T exp_vec(T x) {
    if constexpr (std::is_same_v<T, float>) return exp_poly(x);
    else return std::exp(x);
}

// Cephes-style logf for x > 0 (no denormals, no infinities), branch-free.
inline float log_poly(float x) {
    std::int32_t ix;
    std::memcpy(&ix, &x, sizeof ix);
    std::int32_t e = ((ix >> 23) & 0xff) - 126;
    const std::int32_t mbits = (ix & 0x807fffff) | 0x3f000000;
    float m;
    std::memcpy(&m, &mbits, sizeof m);  // mantissa in [0.5, 1)
    const bool low = m < 0.707106781186547524f;
    e = low ? e - 1 : e;
    m = low ? m + m - 1.0f : m - 1.0f;
    const float z = m * m;
    float y = 7.0376836292e-2f;
    y = y * m - 1.1514610310e-1f;
    y = y * m + 1.1676998740e-1f;
    y = y * m - 1.2420140846e-1f;
    y = y * m + 1.4249322787e-1f;
    y = y * m - 1.6668057665e-1f;
    y = y * m + 2.0000714765e-1f;
    y = y * m - 2.4999993993e-1f;
    y = y * m + 3.3333331174e-1f;
    y = y * m * z;
    const auto ef = static_cast<float>(e);
    y += -2.12194440e-4f * ef;
    y += -0.5f * z;
    return m + y + 0.693359375f * ef;
}

template <class T>
inline T sigmoid(T x) {
    if constexpr (std::is_same_v<T, float>) return 1.0f / (1.0f + exp_poly(-x));
    else return x >= 0 ? T(1) / (T(1) + std::exp(-x)) : std::exp(x) / (T(1) + std::exp(x));
}

// tanh(u) = 1 - 2 / (exp(2u) + 1); exp_poly saturates instead of overflowing, so both tails are exact.
template <class T>
inline T tanh_fn(T u) {
    if constexpr (std::is_same_v<T, float>) return 1.0f - 2.0f / (exp_poly(2.0f * u) + 1.0f);
    else return std::tanh(u);
}

// softplus(x) = max(x, 0) + log1p(exp(-|x|)); log1p(t) = log(u) * t / (u - 1) with u = 1 + t
// recovers the bits lost when rounding 1 + t.
template <class T>
inline T softplus_fn(T x) {
    if constexpr (std::is_same_v<T, float>) {
        const float t = exp_poly(-std::abs(x));
        const float u = 1.0f + t;
        const float l = u == 1.0f ? t : log_poly(u) * t / (u - 1.0f);
        return std::max(x, 0.0f) + l;
    } else {
        return std::max(x, T(0)) + std::log1p(std::exp(-std::abs(x)));
    }
}

}  // namespace

template <class T>
Var<T> matmul(Var<T> a, Var<T> b) {
    require_same_graph({a, b});
    const Tensor<T>& A = a.value();
    const Tensor<T>& B = b.value();
    require_shape<T>(A.shape.size() == 2 && B.shape.size() == 2 && A.shape[1] == B.shape[0], "matmul");
    const std::size_t m = A.shape[0], k = A.shape[1], n = B.shape[1];
    Tensor<T> C({m, n});
    kn::gemm_nn(m, k, n, A.data.data(), B.data.data(), C.data.data(), false);
    Graph<T>& g = *a.graph;
    const int ia = a.id, ib = b.id, oid = static_cast<int>(g.size());
    return g.record(std::move(C), any_grad({a, b}), [=, &g](Graph<T>&) {
        const Tensor<T>& gc = g.node(oid).grad;
        if (g.requires_grad(ia))
            kn::gemm_nt(m, n, k, gc.data.data(), g.node(ib).value.data.data(), g.grad(ia).data.data(), true);
        if (g.requires_grad(ib))
            kn::gemm_tn(k, m, n, g.node(ia).value.data.data(), gc.data.data(), g.grad(ib).data.data(), true);
    });
}

template <class T>
Var<T> add(Var<T> a, Var<T> b) {
    require_same_graph({a, b});
    require_shape<T>(a.value().shape == b.value().shape, "add");
    Tensor<T> y = a.value();
    const auto& bv = b.value().data;
    for (std::size_t i = 0; i < y.size(); ++i) y.data[i] += bv[i];
    Graph<T>& g = *a.graph;
    const int ia = a.id, ib = b.id, oid = static_cast<int>(g.size());
    return g.record(std::move(y), any_grad({a, b}), [=, &g](Graph<T>&) {
        const auto& gy = g.node(oid).grad.data;
        for (int in : {ia, ib}) {
            if (!g.requires_grad(in)) continue;
            auto& gx = g.grad(in).data;
            for (std::size_t i = 0; i < gy.size(); ++i) gx[i] += gy[i];
        }
    });
}

template <class T>
Var<T> add_bias(Var<T> a, Var<T> bias) {
    require_same_graph({a, bias});
    const Tensor<T>& A = a.value();
    const std::size_t n = bias.value().size();
    require_shape<T>(A.shape.size() == 2 && A.shape[1] == n, "add_bias");
    Tensor<T> y = A;
    const auto& bv = bias.value().data;
    for (std::size_t r = 0; r < A.shape[0]; ++r)
        for (std::size_t j = 0; j < n; ++j) y.data[r * n + j] += bv[j];
    Graph<T>& g = *a.graph;
    const int ia = a.id, ib = bias.id, oid = static_cast<int>(g.size());
    const std::size_t m = A.shape[0];
    return g.record(std::move(y), any_grad({a, bias}), [=, &g](Graph<T>&) {
        const auto& gy = g.node(oid).grad.data;
        if (g.requires_grad(ia)) {
            auto& gx = g.grad(ia).data;
            for (std::size_t i = 0; i < gy.size(); ++i) gx[i] += gy[i];
        }
        if (g.requires_grad(ib)) {
            auto& gb = g.grad(ib).data;
            for (std::size_t r = 0; r < m; ++r)
                for (std::size_t j = 0; j < n; ++j) gb[j] += gy[r * n + j];
        }
    });
}

template <class T>
Var<T> mul(Var<T> a, Var<T> b) {
    require_same_graph({a, b});
    require_shape<T>(a.value().shape == b.value().shape, "mul");
    Tensor<T> y = a.value();
    const auto& bv = b.value().data;
    for (std::size_t i = 0; i < y.size(); ++i) y.data[i] *= bv[i];
    Graph<T>& g = *a.graph;
    const int ia = a.id, ib = b.id, oid = static_cast<int>(g.size());
    return g.record(std::move(y), any_grad({a, b}), [=, &g](Graph<T>&) {
        const auto& gy = g.node(oid).grad.data;
        if (g.requires_grad(ia)) {
            auto& gx = g.grad(ia).data;
            const auto& other = g.node(ib).value.data;
            for (std::size_t i = 0; i < gy.size(); ++i) gx[i] += gy[i] * other[i];
        }
        if (g.requires_grad(ib)) {
            auto& gx = g.grad(ib).data;
            const auto& other = g.node(ia).value.data;
            for (std::size_t i = 0; i < gy.size(); ++i) gx[i] += gy[i] * other[i];
        }
    });
}

template <class T>
Var<T> scale(Var<T> a, T s) {
    return unary(a, [s](T x) { return s * x; }, [s](T, T) { return s; });
}

template <class T>
Var<T> relu(Var<T> a) {
    Graph<T>& g = *a.graph;
    std::uint64_t h = g.kink_signature ^ 0xcbf29ce484222325ULL;
    for (T x : a.value().data) h = (h ^ static_cast<std::uint64_t>(x > 0)) * 0x100000001b3ULL;
    g.kink_signature = h;
    return unary(a, [](T x) { return x > 0 ? x : T(0); }, [](T x, T) { return x > 0 ? T(1) : T(0); });
}

template <class T>
Var<T> silu(Var<T> a) {
    return unary(
        a, [](T x) { return x * sigmoid(x); },
        [](T x, T) {
            const T s = sigmoid(x);
            return s * (T(1) + x * (T(1) - s));
        });
}

template <class T>
Var<T> gelu(Var<T> a) {
    constexpr T c = T(0.7978845608028654);  // sqrt(2/pi)
    constexpr T k = T(0.044715);
    return unary(
        a, [](T x) { return T(0.5) * x * (T(1) + tanh_fn(c * (x + k * x * x * x))); },
        [](T x, T) {
            const T u = c * (x + k * x * x * x);
            const T th = tanh_fn(u);
            return T(0.5) * (T(1) + th) + T(0.5) * x * (T(1) - th * th) * c * (T(1) + T(3) * k * x * x);
        });
}

template <class T>
Var<T> softplus(Var<T> a) {
    return unary(
        a, [](T x) { return softplus_fn(x); }, [](T x, T) { return sigmoid(x); });
}

template <class T>
Var<T> exp(Var<T> a) {
    return unary(a, [](T x) { return std::exp(x); }, [](T, T y) { return y; });
}

template <class T>
Var<T> neg(Var<T> a) {
    return unary(a, [](T x) { return -x; }, [](T, T) { return T(-1); });
}

template <class T>
Var<T> dropout(Var<T> a, double p, Rng& rng, bool train) {
    if (!(p >= 0.0 && p < 1.0)) throw config_error("dropout rate must lie in [0, 1)");
    if (!train || p == 0.0) return a;
    Graph<T>& g = *a.graph;
    const Tensor<T>& x = a.value();
    auto mask = std::make_shared<std::vector<T>>(x.size());
    const T keep_scale = static_cast<T>(1.0 / (1.0 - p));
    Tensor<T> y(x.shape);
    for (std::size_t i = 0; i < x.size(); ++i) {
        (*mask)[i] = uniform01(rng) < p ? T(0) : keep_scale;
        y.data[i] = x.data[i] * (*mask)[i];
    }
    const int ia = a.id, oid = static_cast<int>(g.size());
    return g.record(std::move(y), any_grad({a}), [=, &g](Graph<T>&) {
        const auto& gy = g.node(oid).grad.data;
        auto& gx = g.grad(ia).data;
        for (std::size_t i = 0; i < gy.size(); ++i) gx[i] += gy[i] * (*mask)[i];
    });
}

template <class T>
Var<T> slice_cols(Var<T> a, std::size_t start, std::size_t len) {
    const Tensor<T>& x = a.value();
    require_shape<T>(x.shape.size() == 2 && start + len <= x.shape[1], "slice_cols");
    const std::size_t m = x.shape[0], n = x.shape[1];
    Tensor<T> y({m, len});
    for (std::size_t r = 0; r < m; ++r)
        std::copy_n(x.data.begin() + static_cast<long>(r * n + start), len, y.data.begin() + static_cast<long>(r * len));
    Graph<T>& g = *a.graph;
    const int ia = a.id, oid = static_cast<int>(g.size());
    return g.record(std::move(y), any_grad({a}), [=, &g](Graph<T>&) {
        const auto& gy = g.node(oid).grad.data;
        auto& gx = g.grad(ia).data;
        for (std::size_t r = 0; r < m; ++r)
            for (std::size_t j = 0; j < len; ++j) gx[r * n + start + j] += gy[r * len + j];
    });
}

template <class T>
Var<T> select_rows(Var<T> a, const std::vector<std::size_t>& idx) {
    const Tensor<T>& x = a.value();
    require_shape<T>(x.shape.size() == 2, "select_rows");
    const std::size_t n = x.shape[1];
    Tensor<T> y({idx.size(), n});
    for (std::size_t i = 0; i < idx.size(); ++i) {
        require_shape<T>(idx[i] < x.shape[0], "select_rows");
        std::copy_n(x.data.begin() + static_cast<long>(idx[i] * n), n, y.data.begin() + static_cast<long>(i * n));
    }
    Graph<T>& g = *a.graph;
    const int ia = a.id, oid = static_cast<int>(g.size());
    return g.record(std::move(y), any_grad({a}), [=, &g](Graph<T>&) {
        const auto& gy = g.node(oid).grad.data;
        auto& gx = g.grad(ia).data;
        for (std::size_t i = 0; i < idx.size(); ++i)
            for (std::size_t j = 0; j < n; ++j) gx[idx[i] * n + j] += gy[i * n + j];
    });
}

template <class T>
Var<T> gather_rows(Var<T> table, const std::vector<std::size_t>& idx) {
    return select_rows(table, idx);
}

template <class T>
Var<T> mean_tokens(Var<T> a, std::size_t tokens) {
    const Tensor<T>& x = a.value();
    require_shape<T>(x.shape.size() == 2 && tokens > 0 && x.shape[0] % tokens == 0, "mean_tokens");
    const std::size_t b = x.shape[0] / tokens, w = x.shape[1];
    Tensor<T> y({b, w});
    const T inv = T(1) / static_cast<T>(tokens);
    for (std::size_t s = 0; s < b; ++s)
        for (std::size_t t = 0; t < tokens; ++t)
            for (std::size_t j = 0; j < w; ++j) y.data[s * w + j] += x.data[(s * tokens + t) * w + j];
    for (auto& v : y.data) v *= inv;
    Graph<T>& g = *a.graph;
    const int ia = a.id, oid = static_cast<int>(g.size());
    return g.record(std::move(y), any_grad({a}), [=, &g](Graph<T>&) {
        const auto& gy = g.node(oid).grad.data;
        auto& gx = g.grad(ia).data;
        for (std::size_t s = 0; s < b; ++s)
            for (std::size_t t = 0; t < tokens; ++t)
                for (std::size_t j = 0; j < w; ++j) gx[(s * tokens + t) * w + j] += gy[s * w + j] * inv;
    });
}

template <class T>
Var<T> featurize(const Tensor<T>& x, Var<T> weight, Var<T> bias, const std::vector<int>& column_group) {
    require_same_graph({weight, bias});
    const Tensor<T>& E = weight.value();
    const Tensor<T>& Bv = bias.value();
    require_shape<T>(x.shape.size() == 2 && E.shape.size() == 2 && Bv.shape.size() == 2, "featurize");
    const std::size_t batch = x.shape[0], C = x.shape[1], W = E.shape[1], G = Bv.shape[0];
    if (E.shape[0] != C || column_group.size() != C || Bv.shape[1] != W)
        throw config_error("featurize: width mismatch between input, embedding and groups");
    for (int gidx : column_group)
        if (gidx < 0 || static_cast<std::size_t>(gidx) >= G) throw config_error("featurize: group index out of range");
    Tensor<T> y({batch * G, W});
    for (std::size_t b = 0; b < batch; ++b) {
        for (std::size_t gi = 0; gi < G; ++gi)
            std::copy_n(Bv.data.begin() + static_cast<long>(gi * W), W, y.data.begin() + static_cast<long>((b * G + gi) * W));
        for (std::size_t c = 0; c < C; ++c) {
            const T xv = x.data[b * C + c];
            if (xv == T(0)) continue;
            T* out = y.data.data() + (b * G + static_cast<std::size_t>(column_group[c])) * W;
            const T* e = E.data.data() + c * W;
            for (std::size_t j = 0; j < W; ++j) out[j] = std::fma(xv, e[j], out[j]);
        }
    }
    Graph<T>& g = *weight.graph;
    const int iw = weight.id, ib = bias.id, oid = static_cast<int>(g.size());
    auto xs = std::make_shared<Tensor<T>>(x);
    return g.record(std::move(y), any_grad({weight, bias}), [=, &g](Graph<T>&) {
        const auto& gy = g.node(oid).grad.data;
        if (g.requires_grad(iw)) {
            auto& gw = g.grad(iw).data;
            for (std::size_t b = 0; b < batch; ++b)
                for (std::size_t c = 0; c < C; ++c) {
                    const T xv = xs->data[b * C + c];
                    if (xv == T(0)) continue;
                    const T* go = gy.data() + (b * G + static_cast<std::size_t>(column_group[c])) * W;
                    for (std::size_t j = 0; j < W; ++j) gw[c * W + j] += xv * go[j];
                }
        }
        if (g.requires_grad(ib)) {
            auto& gb = g.grad(ib).data;
            for (std::size_t b = 0; b < batch; ++b)
                for (std::size_t gi = 0; gi < G; ++gi)
                    for (std::size_t j = 0; j < W; ++j) gb[gi * W + j] += gy[(b * G + gi) * W + j];
        }
    });
}

template <class T>
Var<T> depthwise_conv(Var<T> x, Var<T> kernel, Var<T> bias, std::size_t tokens) {
    require_same_graph({x, kernel, bias});
    const Tensor<T>& X = x.value();
    const Tensor<T>& K = kernel.value();
    require_shape<T>(X.shape.size() == 2 && K.shape.size() == 2 && tokens > 0 && X.shape[0] % tokens == 0 &&
                         K.shape[1] == X.shape[1] && bias.value().size() == X.shape[1] && K.shape[0] % 2 == 1,
                     "depthwise_conv");
    const std::size_t W = X.shape[1], ksz = K.shape[0], batch = X.shape[0] / tokens;
    const long pad = static_cast<long>(ksz / 2);
    const auto& bv = bias.value().data;
    Tensor<T> y(X.shape);
    for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t t = 0; t < tokens; ++t) {
            T* out = y.data.data() + (b * tokens + t) * W;
            for (std::size_t c = 0; c < W; ++c) out[c] = bv[c];
            for (std::size_t j = 0; j < ksz; ++j) {
                const long src = static_cast<long>(t) + static_cast<long>(j) - pad;
                if (src < 0 || src >= static_cast<long>(tokens)) continue;
                const T* in = X.data.data() + (b * tokens + static_cast<std::size_t>(src)) * W;
                const T* kw = K.data.data() + j * W;
                for (std::size_t c = 0; c < W; ++c) out[c] = std::fma(kw[c], in[c], out[c]);
            }
        }
    Graph<T>& g = *x.graph;
    const int ix = x.id, ik = kernel.id, ib = bias.id, oid = static_cast<int>(g.size());
    return g.record(std::move(y), any_grad({x, kernel, bias}), [=, &g](Graph<T>&) {
        const auto& gy = g.node(oid).grad.data;
        const auto& Xv = g.node(ix).value.data;
        const auto& Kv = g.node(ik).value.data;
        const bool gx_on = g.requires_grad(ix), gk_on = g.requires_grad(ik), gb_on = g.requires_grad(ib);
        T* gx = gx_on ? g.grad(ix).data.data() : nullptr;
        T* gk = gk_on ? g.grad(ik).data.data() : nullptr;
        T* gb = gb_on ? g.grad(ib).data.data() : nullptr;
        for (std::size_t b = 0; b < batch; ++b)
            for (std::size_t t = 0; t < tokens; ++t) {
                const T* go = gy.data() + (b * tokens + t) * W;
                if (gb)
                    for (std::size_t c = 0; c < W; ++c) gb[c] += go[c];
                for (std::size_t j = 0; j < ksz; ++j) {
                    const long src = static_cast<long>(t) + static_cast<long>(j) - pad;
                    if (src < 0 || src >= static_cast<long>(tokens)) continue;
                    const std::size_t row = (b * tokens + static_cast<std::size_t>(src)) * W;
                    for (std::size_t c = 0; c < W; ++c) {
                        if (gx) gx[row + c] += Kv[j * W + c] * go[c];
                        if (gk) gk[j * W + c] += Xv[row + c] * go[c];
                    }
                }
            }
    });
}

template <class T>
Var<T> ssm_scan(Var<T> u, Var<T> delta, Var<T> A, Var<T> Bm, Var<T> Cm, Var<T> skip, std::size_t tokens) {
    require_same_graph({u, delta, A, Bm, Cm, skip});
    const Tensor<T>& U = u.value();
    const Tensor<T>& Dt = delta.value();
    const Tensor<T>& Av = A.value();
    const Tensor<T>& Bv = Bm.value();
    const Tensor<T>& Cv = Cm.value();
    const Tensor<T>& Sv = skip.value();
    require_shape<T>(U.shape.size() == 2 && Av.shape.size() == 2 && tokens > 0 && U.shape[0] % tokens == 0,
                     "ssm_scan");
    const std::size_t rows = U.shape[0], D = U.shape[1], N = Av.shape[1], batch = rows / tokens;
    require_shape<T>(Dt.shape == U.shape && Av.shape[0] == D && Bv.shape.size() == 2 && Bv.shape[0] == rows &&
                         Bv.shape[1] == N && Cv.shape == Bv.shape && Sv.size() == D,
                     "ssm_scan");

    auto states = scratch_buffer<T>(rows * D * N);
    auto decays = scratch_buffer<T>(rows * D * N);
    Tensor<T> y({rows, D});
    for (std::size_t b = 0; b < batch; ++b) {
        for (std::size_t t = 0; t < tokens; ++t) {
            const std::size_t row = b * tokens + t;
            const T* brow = Bv.data.data() + row * N;
            const T* crow = Cv.data.data() + row * N;
            for (std::size_t d = 0; d < D; ++d) {
                const T dt = Dt.data[row * D + d];
                const T ut = U.data[row * D + d];
                const T* arow = Av.data.data() + d * N;
                T* hd = states->data() + (row * D + d) * N;
                const T* hp = t > 0 ? states->data() + ((row - 1) * D + d) * N : nullptr;
                T* ad = decays->data() + (row * D + d) * N;
#pragma omp simd
                for (std::size_t n = 0; n < N; ++n) ad[n] = exp_vec(dt * arow[n]);
                T acc = T(0);
#pragma omp simd reduction(+ : acc)
                for (std::size_t n = 0; n < N; ++n) {
                    hd[n] = (hp ? ad[n] * hp[n] : T(0)) + dt * brow[n] * ut;
                    acc += crow[n] * hd[n];
                }
                y.data[row * D + d] = acc + Sv.data[d] * ut;
            }
        }
    }
    if (!y.all_finite()) throw numeric_fault("selective scan produced a non-finite value");

    Graph<T>& g = *u.graph;
    const int iu = u.id, idt = delta.id, iA = A.id, iB = Bm.id, iC = Cm.id, iS = skip.id;
    const int oid = static_cast<int>(g.size());
    return g.record(std::move(y), any_grad({u, delta, A, Bm, Cm, skip}), [=, &g](Graph<T>&) {
        const auto& gy = g.node(oid).grad.data;
        const auto& Uv = g.node(iu).value.data;
        const auto& Dv = g.node(idt).value.data;
        const auto& Aw = g.node(iA).value.data;
        const auto& Bw = g.node(iB).value.data;
        const auto& Cw = g.node(iC).value.data;
        const auto& Sw = g.node(iS).value.data;
        T* gu = g.requires_grad(iu) ? g.grad(iu).data.data() : nullptr;
        T* gdt = g.requires_grad(idt) ? g.grad(idt).data.data() : nullptr;
        T* gS = g.requires_grad(iS) ? g.grad(iS).data.data() : nullptr;
        // unused gradients land in scratch so the inner loop stays branch-free
        std::vector<T> scratch_a, scratch_bc;
        T* gA = g.requires_grad(iA) ? g.grad(iA).data.data() : (scratch_a.resize(D * N), scratch_a.data());
        if (!g.requires_grad(iB) || !g.requires_grad(iC)) scratch_bc.resize(rows * N);
        T* gB = g.requires_grad(iB) ? g.grad(iB).data.data() : scratch_bc.data();
        T* gC = g.requires_grad(iC) ? g.grad(iC).data.data() : scratch_bc.data();
        std::vector<T> dh(D * N);
        const std::vector<T> zeros(N, T(0));
        for (std::size_t b = 0; b < batch; ++b) {
            std::fill(dh.begin(), dh.end(), T(0));  // carries dL/dh_{t+1} * decay_{t+1}
            for (std::size_t tt = tokens; tt-- > 0;) {
                const std::size_t row = b * tokens + tt;
                const T* crow = Cw.data() + row * N;
                const T* brow = Bw.data() + row * N;
                T* gcrow = gC + row * N;
                T* gbrow = gB + row * N;
                for (std::size_t d = 0; d < D; ++d) {
                    const T gyv = gy[row * D + d];
                    const T ut = Uv[row * D + d];
                    const T dt = Dv[row * D + d];
                    const T* ht = states->data() + (row * D + d) * N;
                    const T* hprev = tt > 0 ? states->data() + ((row - 1) * D + d) * N : zeros.data();
                    const T* ad = decays->data() + (row * D + d) * N;
                    const T* arow = Aw.data() + d * N;
                    T* gArow = gA + d * N;
                    T* dhd = dh.data() + d * N;
                    if (gS) gS[d] += gyv * ut;
                    T gu_acc = T(0);
                    T gdt_acc = T(0);
#pragma omp simd reduction(+ : gu_acc, gdt_acc)
                    for (std::size_t n = 0; n < N; ++n) {
                        gcrow[n] += gyv * ht[n];
                        const T dhn = dhd[n] + gyv * crow[n];
                        const T d_decay = dhn * hprev[n] * ad[n];
                        gdt_acc += d_decay * arow[n] + dhn * brow[n] * ut;
                        gArow[n] += d_decay * dt;
                        gbrow[n] += dhn * dt * ut;
                        gu_acc += dhn * dt * brow[n];
                        dhd[n] = dhn * ad[n];
                    }
                    gu_acc += gyv * Sw[d];
                    if (gu) gu[row * D + d] += gu_acc;
                    if (gdt) gdt[row * D + d] += gdt_acc;
                }
            }
        }
    });
}

template <class T>
Var<T> attention(Var<T> q, Var<T> k, Var<T> v, std::size_t tokens, std::size_t keys, std::size_t heads) {
    require_same_graph({q, k, v});
    const Tensor<T>& Q = q.value();
    const Tensor<T>& K = k.value();
    const Tensor<T>& V = v.value();
    require_shape<T>(Q.shape.size() == 2 && K.shape == Q.shape && V.shape == Q.shape && tokens > 0 &&
                         Q.shape[0] % tokens == 0 && keys >= 1 && keys <= tokens && heads >= 1 &&
                         Q.shape[1] % heads == 0,
                     "attention");
    const std::size_t W = Q.shape[1], dh = W / heads, batch = Q.shape[0] / tokens;
    const T sc = T(1) / std::sqrt(static_cast<T>(dh));
    auto probs = scratch_buffer<T>(batch * heads * tokens * keys);
    Tensor<T> y(Q.shape);

    // Head h of sequence b occupies columns [h*dh, (h+1)*dh) of rows b*tokens .. b*tokens+tokens-1;
    // every per-head product is a strided gemm on that block.
    const long pairs = static_cast<long>(batch * heads);
#pragma omp parallel for schedule(static) if (batch * heads * tokens * keys * dh > (1u << 16))
    for (long bh = 0; bh < pairs; ++bh) {
        const std::size_t b = static_cast<std::size_t>(bh) / heads, h = static_cast<std::size_t>(bh) % heads;
        const std::size_t base = b * tokens * W + h * dh;
        std::vector<T> kt(dh * keys);
        for (std::size_t j = 0; j < keys; ++j)
            for (std::size_t c = 0; c < dh; ++c) kt[c * keys + j] = K.data[base + j * W + c];
        T* P = probs->data() + static_cast<std::size_t>(bh) * tokens * keys;
        kn::gemm_strided(tokens, dh, keys, Q.data.data() + base, W, 1, kt.data(), keys, P, keys, false);
        for (std::size_t i = 0; i < tokens; ++i) {
            T* row = P + i * keys;
            T mx = row[0];
            for (std::size_t j = 1; j < keys; ++j) mx = std::max(mx, row[j]);
            T sum = T(0);
#pragma omp simd reduction(+ : sum)
            for (std::size_t j = 0; j < keys; ++j) {
                row[j] = exp_vec((row[j] - mx) * sc);
                sum += row[j];
            }
            const T inv = T(1) / sum;
#pragma omp simd
            for (std::size_t j = 0; j < keys; ++j) row[j] *= inv;
        }
        kn::gemm_strided(tokens, keys, dh, P, keys, 1, V.data.data() + base, W, y.data.data() + base, W, false);
    }

    Graph<T>& g = *q.graph;
    const int iq = q.id, ik = k.id, iv = v.id, oid = static_cast<int>(g.size());
    return g.record(std::move(y), any_grad({q, k, v}), [=, &g](Graph<T>&) {
        const T* gy = g.node(oid).grad.data.data();
        const T* Qv = g.node(iq).value.data.data();
        const T* Kv = g.node(ik).value.data.data();
        const T* Vv = g.node(iv).value.data.data();
        T* gq = g.requires_grad(iq) ? g.grad(iq).data.data() : nullptr;
        T* gk = g.requires_grad(ik) ? g.grad(ik).data.data() : nullptr;
        T* gv = g.requires_grad(iv) ? g.grad(iv).data.data() : nullptr;
#pragma omp parallel for schedule(static) if (batch * heads * tokens * keys * dh > (1u << 16))
        for (long bh = 0; bh < pairs; ++bh) {
            const std::size_t b = static_cast<std::size_t>(bh) / heads, h = static_cast<std::size_t>(bh) % heads;
            const std::size_t base = b * tokens * W + h * dh;
            const T* P = probs->data() + static_cast<std::size_t>(bh) * tokens * keys;
            if (gv) kn::gemm_strided(keys, tokens, dh, P, 1, keys, gy + base, W, gv + base, W, true);
            if (!gq && !gk) continue;
            // gs = dL/dscores = P * (dL/dP - <P, dL/dP>) / sqrt(dh), with dL/dP = gY V^T
            std::vector<T> vt(dh * keys), gs(tokens * keys);
            for (std::size_t j = 0; j < keys; ++j)
                for (std::size_t c = 0; c < dh; ++c) vt[c * keys + j] = Vv[base + j * W + c];
            kn::gemm_strided(tokens, dh, keys, gy + base, W, 1, vt.data(), keys, gs.data(), keys, false);
            for (std::size_t i = 0; i < tokens; ++i) {
                const T* pi = P + i * keys;
                T* gi = gs.data() + i * keys;
                T dot = T(0);
#pragma omp simd reduction(+ : dot)
                for (std::size_t j = 0; j < keys; ++j) dot += pi[j] * gi[j];
#pragma omp simd
                for (std::size_t j = 0; j < keys; ++j) gi[j] = pi[j] * (gi[j] - dot) * sc;
            }
            if (gq) kn::gemm_strided(tokens, keys, dh, gs.data(), keys, 1, Kv + base, W, gq + base, W, true);
            if (gk) kn::gemm_strided(keys, tokens, dh, gs.data(), 1, keys, Qv + base, W, gk + base, W, true);
        }
    });
}

template <class T>
Var<T> layer_norm(Var<T> x, Var<T> gain, Var<T> shift) {
    require_same_graph({x, gain, shift});
    const Tensor<T>& X = x.value();
    require_shape<T>(X.shape.size() == 2 && gain.value().size() == X.shape[1] && shift.value().size() == X.shape[1],
                     "layer_norm");
    const std::size_t m = X.shape[0], n = X.shape[1];
    constexpr T eps = T(1e-5);
    auto xhat = std::make_shared<std::vector<T>>(m * n);
    auto inv_std = std::make_shared<std::vector<T>>(m);
    const auto& gv = gain.value().data;
    const auto& sv = shift.value().data;
    Tensor<T> y(X.shape);
    for (std::size_t r = 0; r < m; ++r) {
        const T* row = X.data.data() + r * n;
        T mean = T(0);
        for (std::size_t j = 0; j < n; ++j) mean += row[j];
        mean /= static_cast<T>(n);
        T var = T(0);
        for (std::size_t j = 0; j < n; ++j) var += (row[j] - mean) * (row[j] - mean);
        var /= static_cast<T>(n);
        const T is = T(1) / std::sqrt(var + eps);
        (*inv_std)[r] = is;
        for (std::size_t j = 0; j < n; ++j) {
            const T xh = (row[j] - mean) * is;
            (*xhat)[r * n + j] = xh;
            y.data[r * n + j] = xh * gv[j] + sv[j];
        }
    }
    Graph<T>& g = *x.graph;
    const int ix = x.id, ig = gain.id, ib = shift.id, oid = static_cast<int>(g.size());
    return g.record(std::move(y), any_grad({x, gain, shift}), [=, &g](Graph<T>&) {
        const auto& gy = g.node(oid).grad.data;
        const auto& gvv = g.node(ig).value.data;
        T* gx = g.requires_grad(ix) ? g.grad(ix).data.data() : nullptr;
        T* gg = g.requires_grad(ig) ? g.grad(ig).data.data() : nullptr;
        T* gb = g.requires_grad(ib) ? g.grad(ib).data.data() : nullptr;
        for (std::size_t r = 0; r < m; ++r) {
            const T* gyr = gy.data() + r * n;
            const T* xh = xhat->data() + r * n;
            T mean_g = T(0), mean_gx = T(0);
            for (std::size_t j = 0; j < n; ++j) {
                if (gg) gg[j] += gyr[j] * xh[j];
                if (gb) gb[j] += gyr[j];
                const T gxh = gyr[j] * gvv[j];
                mean_g += gxh;
                mean_gx += gxh * xh[j];
            }
            if (!gx) continue;
            mean_g /= static_cast<T>(n);
            mean_gx /= static_cast<T>(n);
            for (std::size_t j = 0; j < n; ++j)
                gx[r * n + j] += (*inv_std)[r] * (gyr[j] * gvv[j] - mean_g - xh[j] * mean_gx);
        }
    });
}

template <class T>
Var<T> sum_squares(Var<T> a) {
    const auto& x = a.value().data;
    T s = T(0);
    for (T v : x) s += v * v;
    Tensor<T> y({1});
    y.data[0] = s;
    Graph<T>& g = *a.graph;
    const int ia = a.id, oid = static_cast<int>(g.size());
    return g.record(std::move(y), any_grad({a}), [=, &g](Graph<T>&) {
        const T gy = g.node(oid).grad.data[0];
        const auto& xv = g.node(ia).value.data;
        auto& gx = g.grad(ia).data;
        for (std::size_t i = 0; i < xv.size(); ++i) gx[i] += T(2) * xv[i] * gy;
    });
}

template <class T>
Var<T> weighted_sum(Var<T> a, const Tensor<T>& w) {
    require_shape<T>(a.value().size() == w.size(), "weighted_sum");
    const auto& x = a.value().data;
    T s = T(0);
    for (std::size_t i = 0; i < x.size(); ++i) s += x[i] * w.data[i];
    Tensor<T> y({1});
    y.data[0] = s;
    Graph<T>& g = *a.graph;
    const int ia = a.id, oid = static_cast<int>(g.size());
    auto ws = std::make_shared<Tensor<T>>(w);
    return g.record(std::move(y), any_grad({a}), [=, &g](Graph<T>&) {
        const T gy = g.node(oid).grad.data[0];
        auto& gx = g.grad(ia).data;
        for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += ws->data[i] * gy;
    });
}

template <class T>
Tensor<T> softmax_rows(const Tensor<T>& logits, std::size_t active_classes) {
    const std::size_t m = logits.rows(), n = logits.cols();
    const std::size_t act = active_classes ? active_classes : n;
    Tensor<T> p(logits.shape);
    for (std::size_t r = 0; r < m; ++r) {
        const T* z = logits.data.data() + r * n;
        T mx = z[0];
        for (std::size_t j = 1; j < act; ++j) mx = std::max(mx, z[j]);
        T sum = T(0);
        for (std::size_t j = 0; j < act; ++j) sum += (p.data[r * n + j] = std::exp(z[j] - mx));
        for (std::size_t j = 0; j < act; ++j) p.data[r * n + j] /= sum;
    }
    return p;
}

template <class T>
Var<T> cross_entropy(Var<T> logits, const std::vector<int>& labels, const std::vector<double>& class_weights,
                     std::size_t active_classes) {
    const Tensor<T>& Z = logits.value();
    require_shape<T>(Z.shape.size() == 2 && Z.shape[0] == labels.size() && !labels.empty(), "cross_entropy");
    const std::size_t m = Z.shape[0], n = Z.shape[1];
    const std::size_t act = active_classes ? active_classes : n;
    if (act > n) throw config_error("cross_entropy: more active classes than logits");
    auto probs = std::make_shared<Tensor<T>>(softmax_rows(Z, act));
    auto sw = std::make_shared<std::vector<T>>(m);
    T wsum = T(0), loss = T(0);
    for (std::size_t i = 0; i < m; ++i) {
        const int y = labels[i];
        if (y < 0 || static_cast<std::size_t>(y) >= act) throw data_error("cross_entropy: label out of range");
        const T w = class_weights.empty() ? T(1) : static_cast<T>(class_weights.at(static_cast<std::size_t>(y)));
        (*sw)[i] = w;
        wsum += w;
        // log-softmax computed directly for accuracy
        const T* z = Z.data.data() + i * n;
        T mx = z[0];
        for (std::size_t j = 1; j < act; ++j) mx = std::max(mx, z[j]);
        T se = T(0);
        for (std::size_t j = 0; j < act; ++j) se += std::exp(z[j] - mx);
        loss += w * (std::log(se) + mx - z[y]);
    }
    if (!(wsum > T(0))) throw data_error("cross_entropy: weights sum to zero");
    Tensor<T> out({1});
    out.data[0] = loss / wsum;
    if (!out.all_finite()) throw numeric_fault("cross-entropy loss is not finite");
    Graph<T>& g = *logits.graph;
    const int iz = logits.id, oid = static_cast<int>(g.size());
    auto lab = std::make_shared<std::vector<int>>(labels);
    return g.record(std::move(out), any_grad({logits}), [=, &g](Graph<T>&) {
        const T gy = g.node(oid).grad.data[0];
        auto& gz = g.grad(iz).data;
        for (std::size_t i = 0; i < m; ++i) {
            const T f = gy * (*sw)[i] / wsum;
            for (std::size_t j = 0; j < act; ++j)
                gz[i * n + j] += f * (probs->data[i * n + j] - (static_cast<std::size_t>((*lab)[i]) == j ? T(1) : T(0)));
        }
    });
}

#define CRASHSEV_INSTANTIATE(T)                                                                               \
    template struct Tensor<T>;                                                                                \
    template struct Parameter<T>;                                                                             \
    template struct Var<T>;                                                                                   \
    template class Graph<T>;                                                                                  \
    template Var<T> matmul(Var<T>, Var<T>);                                                                   \
    template Var<T> add(Var<T>, Var<T>);                                                                      \
    template Var<T> add_bias(Var<T>, Var<T>);                                                                 \
    template Var<T> mul(Var<T>, Var<T>);                                                                      \
    template Var<T> scale(Var<T>, T);                                                                         \
    template Var<T> relu(Var<T>);                                                                             \
    template Var<T> silu(Var<T>);                                                                             \
    template Var<T> gelu(Var<T>);                                                                             \
    template Var<T> softplus(Var<T>);                                                                         \
    template Var<T> exp(Var<T>);                                                                              \
    template Var<T> neg(Var<T>);                                                                              \
    template Var<T> dropout(Var<T>, double, Rng&, bool);                                                      \
    template Var<T> slice_cols(Var<T>, std::size_t, std::size_t);                                             \
    template Var<T> select_rows(Var<T>, const std::vector<std::size_t>&);                                     \
    template Var<T> gather_rows(Var<T>, const std::vector<std::size_t>&);                                     \
    template Var<T> mean_tokens(Var<T>, std::size_t);                                                         \
    template Var<T> featurize(const Tensor<T>&, Var<T>, Var<T>, const std::vector<int>&);                     \
    template Var<T> depthwise_conv(Var<T>, Var<T>, Var<T>, std::size_t);                                      \
    template Var<T> ssm_scan(Var<T>, Var<T>, Var<T>, Var<T>, Var<T>, Var<T>, std::size_t);                    \
    template Var<T> attention(Var<T>, Var<T>, Var<T>, std::size_t, std::size_t, std::size_t);                 \
    template Var<T> layer_norm(Var<T>, Var<T>, Var<T>);                                                       \
    template Var<T> sum_squares(Var<T>);                                                                      \
    template Var<T> weighted_sum(Var<T>, const Tensor<T>&);                                                   \
    template Var<T> cross_entropy(Var<T>, const std::vector<int>&, const std::vector<double>&, std::size_t);  \
    template Tensor<T> softmax_rows(const Tensor<T>&, std::size_t);

CRASHSEV_INSTANTIATE(float)
CRASHSEV_INSTANTIATE(double)

}  // namespace crashsev::nn
