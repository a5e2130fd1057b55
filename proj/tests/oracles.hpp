#pragma once

// Brute-force reference implementations shared by the unit tests and the acceptance binary.
// Each one is written for clarity, not speed, and uses none of the library's kernels.

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "crashsev/nn/graph.hpp"
#include "crashsev/resample.hpp"
#include "crashsev/trees.hpp"
#include "gradcheck.hpp"

namespace testutil {

using crashsev::Matrix;
using crashsev::Rng;

// ---- selective scan

// y_t = Σ_{s≤t} C_t (Π_{r=s+1..t} exp(Δ_r A)) Δ_s B_s x_s + D x_t, per channel, by dense unrolling
inline std::vector<double> ssm_oracle(const crashsev::nn::Tensor<double>& u, const crashsev::nn::Tensor<double>& delta,
                                      const crashsev::nn::Tensor<double>& A, const crashsev::nn::Tensor<double>& Bm,
                                      const crashsev::nn::Tensor<double>& Cm, const crashsev::nn::Tensor<double>& skip,
                                      std::size_t T) {
    const std::size_t D = A.dim(0), N = A.dim(1), batch = u.dim(0) / T;
    std::vector<double> y(u.size(), 0.0);
    for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t t = 0; t < T; ++t)
            for (std::size_t d = 0; d < D; ++d) {
                const std::size_t rt = b * T + t;
                double acc = skip[d] * u[rt * D + d];
                for (std::size_t s = 0; s <= t; ++s) {
                    const std::size_t rs = b * T + s;
                    for (std::size_t n = 0; n < N; ++n) {
                        double decay = 1.0;
                        for (std::size_t r = s + 1; r <= t; ++r) decay *= std::exp(delta[(b * T + r) * D + d] * A[d * N + n]);
                        acc += Cm[rt * N + n] * decay * delta[rs * D + d] * Bm[rs * N + n] * u[rs * D + d];
                    }
                }
                y[rt * D + d] = acc;
            }
    return y;
}

struct ScanInputs {
    crashsev::nn::Tensor<double> u, delta, A, Bm, Cm, skip;
};

inline ScanInputs random_scan(Rng& rng, std::size_t batch, std::size_t T, std::size_t D, std::size_t N) {
    ScanInputs s;
    s.u = random_tensor({batch * T, D}, rng);
    s.delta = crashsev::nn::Tensor<double>({batch * T, D});
    for (auto& v : s.delta.data) v = 0.01 + 2.0 * crashsev::uniform01(rng);
    s.A = crashsev::nn::Tensor<double>({D, N});
    for (auto& v : s.A.data) v = -(0.05 + 3.0 * crashsev::uniform01(rng));
    s.Bm = random_tensor({batch * T, N}, rng);
    s.Cm = random_tensor({batch * T, N}, rng);
    s.skip = random_tensor({D}, rng);
    return s;
}

inline crashsev::nn::Tensor<double> run_scan(const ScanInputs& s, std::size_t T) {
    crashsev::nn::Graph<double> g;
    return crashsev::nn::ssm_scan(g.constant(s.u), g.constant(s.delta), g.constant(s.A), g.constant(s.Bm),
                                  g.constant(s.Cm), g.constant(s.skip), T)
        .value();
}

/// Largest |scan - oracle| over one random parameterization with T ≤ 8.
inline double ssm_trial(Rng& rng) {
    const std::size_t T = 1 + crashsev::uniform_index(rng, 8);
    const ScanInputs s = random_scan(rng, 1 + crashsev::uniform_index(rng, 3), T, 1 + crashsev::uniform_index(rng, 4),
                                     1 + crashsev::uniform_index(rng, 5));
    const auto got = run_scan(s, T);
    const auto want = ssm_oracle(s.u, s.delta, s.A, s.Bm, s.Cm, s.skip, T);
    double worst = 0;
    for (std::size_t i = 0; i < want.size(); ++i) worst = std::max(worst, std::abs(got[i] - want[i]));
    return worst;
}

// ---- neighbours and resampling

inline double sqdist(const double* a, const double* b, std::size_t d) {
    double s = 0;
    for (std::size_t i = 0; i < d; ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
    return s;
}

// full sort of every candidate by (distance, index)
inline std::vector<std::size_t> knn_oracle(const Matrix& X, const double* q, std::size_t k, long exclude) {
    std::vector<std::pair<double, std::size_t>> all;
    for (std::size_t i = 0; i < X.rows; ++i)
        if (static_cast<long>(i) != exclude) all.emplace_back(sqdist(X.row(i), q, X.cols), i);
    std::sort(all.begin(), all.end());
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < k; ++i) out.push_back(all[i].second);
    return out;
}

// rows an exhaustive application of the editing rule keeps
inline std::vector<std::size_t> enn_oracle(const Matrix& X, const std::vector<int>& y, std::size_t k) {
    std::vector<std::size_t> keep;
    for (std::size_t i = 0; i < X.rows; ++i) {
        const auto nb = knn_oracle(X, X.row(i), k, static_cast<long>(i));
        std::map<int, int> votes;
        for (auto j : nb) votes[y[j]]++;
        bool removed = false;
        for (const auto& [label, v] : votes)
            if (label != y[i] && v > votes[y[i]]) removed = true;
        if (!removed) keep.push_back(i);
    }
    return keep;
}

inline Matrix random_points(Rng& rng, std::size_t n, std::size_t d, bool gridded) {
    Matrix X(n, d);
    for (auto& v : X.data) v = gridded ? static_cast<double>(crashsev::uniform_index(rng, 4)) : crashsev::uniform01(rng) * 2 - 1;
    return X;
}

/// Checks every synthetic row of a SMOTE result: same label as its seed, neighbour of the same
/// class among the seed's k nearest, gap in [0,1), coordinates inside the seed-neighbour box.
/// Returns the number of rows checked; the first failure is written to `why`.
inline std::size_t smote_violations(const crashsev::Dataset& D, const crashsev::SmoteResult& r, std::size_t k,
                                    std::string& why) {
    why.clear();
    auto fail = [&](const std::string& m) {
        if (why.empty()) why = m;
    };
    if (!std::equal(D.X.data.begin(), D.X.data.end(), r.data.X.data.begin())) fail("original rows changed");
    if (r.origins.size() != r.data.n_rows() - D.n_rows()) fail("origin count mismatch");
    for (std::size_t s = 0; s < r.origins.size() && why.empty(); ++s) {
        const auto& o = r.origins[s];
        const std::size_t row = D.n_rows() + s;
        if (r.data.y[row] != D.y[o.seed_row]) fail("label not preserved");
        if (D.y[o.neighbor_row] != D.y[o.seed_row]) fail("neighbour from another class");
        if (!(o.gap >= 0.0 && o.gap < 1.0)) fail("gap outside [0,1)");
        const int c = D.y[o.seed_row];
        std::vector<std::size_t> members;
        for (std::size_t i = 0; i < D.n_rows(); ++i)
            if (D.y[i] == c) members.push_back(i);
        const Matrix sub = D.select_rows(members).X;
        const long self = std::find(members.begin(), members.end(), o.seed_row) - members.begin();
        const auto nb = knn_oracle(sub, sub.row(static_cast<std::size_t>(self)), std::min(k, members.size() - 1), self);
        bool found = false;
        for (auto j : nb) found |= members[j] == o.neighbor_row;
        if (!found) fail("neighbour is not among the k nearest");
        for (std::size_t j = 0; j < D.n_features(); ++j) {
            const double a = D.X(o.seed_row, j), b = D.X(o.neighbor_row, j), v = r.data.X(row, j);
            if (v < std::min(a, b) || v > std::max(a, b)) fail("synthetic point outside the segment");
        }
    }
    return r.origins.size();
}

// ---- trees

inline double gini_weighted(const std::vector<int>& y, const std::vector<std::size_t>& idx) {
    if (idx.empty()) return 0.0;
    double c[3] = {0, 0, 0};
    for (auto i : idx) c[y[i]] += 1;
    const double n = static_cast<double>(idx.size());
    double s = 0;
    for (double v : c) s += (v / n) * (v / n);
    return n * (1.0 - s);
}

struct OracleSplit {
    double decrease = 0;
    std::vector<std::pair<int, double>> argmax;  // every (feature, threshold) attaining it
};

// every feature, every midpoint between distinct values
inline OracleSplit exhaustive_split(const Matrix& X, const std::vector<int>& y, const std::vector<std::size_t>& idx,
                                    double min_leaf) {
    OracleSplit best;
    const double parent = gini_weighted(y, idx);
    for (std::size_t f = 0; f < X.cols; ++f) {
        std::set<double> vals;
        for (auto i : idx) vals.insert(X(i, f));
        std::vector<double> v(vals.begin(), vals.end());
        for (std::size_t k = 0; k + 1 < v.size(); ++k) {
            const double t = 0.5 * (v[k] + v[k + 1]);
            std::vector<std::size_t> l, r;
            for (auto i : idx) (X(i, f) <= t ? l : r).push_back(i);
            if (static_cast<double>(l.size()) < min_leaf || static_cast<double>(r.size()) < min_leaf) continue;
            const double dec = parent - gini_weighted(y, l) - gini_weighted(y, r);
            if (dec > best.decrease + 1e-12) {
                best.decrease = dec;
                best.argmax.clear();
            }
            if (std::abs(dec - best.decrease) <= 1e-12) best.argmax.emplace_back(static_cast<int>(f), t);
        }
    }
    return best;
}

/// Walks the fitted tree and compares each node with the oracle on the rows that reach it.
/// Returns "" when every split attains the exhaustive optimum and every early leaf had none.
inline std::string tree_oracle_mismatch(const crashsev::DecisionTree& tree, const Matrix& X, const std::vector<int>& y,
                                        const crashsev::CartParams& p) {
    std::vector<std::size_t> all(X.rows);
    for (std::size_t i = 0; i < X.rows; ++i) all[i] = i;
    const double N = static_cast<double>(X.rows);
    std::string why;
    std::function<void(int, const std::vector<std::size_t>&, int)> visit = [&](int id, const std::vector<std::size_t>& idx,
                                                                                 int depth) {
        if (!why.empty()) return;
        const crashsev::TreeNode& nd = tree.nodes[static_cast<std::size_t>(id)];
        const OracleSplit o = exhaustive_split(X, y, idx, p.min_samples_leaf);
        const std::string at = "node " + std::to_string(id) + ": ";
        if (nd.is_leaf()) {
            // a leaf either hit the depth cap or had no improving split
            if (depth < p.max_depth && o.decrease > 1e-12) why = at + "leaf where a split improves";
            return;
        }
        if (!(o.decrease > 0)) {
            why = at + "split where none improves";
            return;
        }
        if (std::abs(nd.impurity_decrease * N - o.decrease) > 1e-9 * std::max(1.0, o.decrease)) {
            why = at + "decrease differs from the optimum";
            return;
        }
        bool attained = false;
        for (const auto& [f, t] : o.argmax) {
            if (f != nd.feature) continue;
            // same partition of the node's rows
            bool same = true;
            for (auto i : idx) same &= (X(i, f) <= t) == (X(i, f) <= nd.threshold);
            attained |= same;
        }
        if (!attained) {
            why = at + "split is not an argmax";
            return;
        }
        std::vector<std::size_t> l, r;
        for (auto i : idx) (X(i, static_cast<std::size_t>(nd.feature)) <= nd.threshold ? l : r).push_back(i);
        visit(nd.left, l, depth + 1);
        visit(nd.right, r, depth + 1);
    };
    visit(0, all, 0);
    return why;
}

inline Matrix random_levels(Rng& rng, std::size_t n, std::size_t p, int levels) {
    Matrix X(n, p);
    for (auto& v : X.data) v = static_cast<double>(crashsev::uniform_index(rng, static_cast<std::size_t>(levels)));
    return X;
}

}  // namespace testutil
