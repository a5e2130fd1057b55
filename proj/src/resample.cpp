#include "crashsev/resample.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>

#include "crashsev/kernels.hpp"
#include "crashsev/util.hpp"

namespace crashsev {

namespace {

// Keeps the k smallest (distance, index) pairs in ascending order. Candidates arrive in
// ascending index order, so a strict comparison keeps the lower index on ties.
void select_k(const double* dist, std::size_t n, std::size_t k, long exclude, std::size_t* out) {
    std::vector<double> best_d(k, std::numeric_limits<double>::infinity());
    std::vector<std::size_t> best_i(k, std::numeric_limits<std::size_t>::max());
    std::size_t filled = 0;
    for (std::size_t j = 0; j < n; ++j) {
        if (static_cast<long>(j) == exclude) continue;
        const double d = dist[j];
        if (filled == k && !(d < best_d[k - 1])) continue;
        std::size_t pos = filled < k ? filled : k - 1;
        while (pos > 0 && d < best_d[pos - 1]) {
            best_d[pos] = best_d[pos - 1];
            best_i[pos] = best_i[pos - 1];
            --pos;
        }
        best_d[pos] = d;
        best_i[pos] = j;
        if (filled < k) ++filled;
    }
    std::copy_n(best_i.begin(), k, out);
}

std::array<std::size_t, kNumClasses> counts_of(const std::vector<int>& y) {
    std::array<std::size_t, kNumClasses> c{};
    for (int v : y) ++c[static_cast<std::size_t>(v)];
    return c;
}

double ratio(const std::array<std::size_t, kNumClasses>& c) {
    std::size_t lo = std::numeric_limits<std::size_t>::max(), hi = 0;
    for (std::size_t v : c) {
        lo = std::min(lo, v);
        hi = std::max(hi, v);
    }
    return lo == 0 ? std::numeric_limits<double>::infinity() : static_cast<double>(hi) / static_cast<double>(lo);
}

}  // namespace

std::vector<std::size_t> knn(const Matrix& X, const double* query, std::size_t k, long exclude_index) {
    const std::size_t candidates = X.rows - (exclude_index >= 0 && static_cast<std::size_t>(exclude_index) < X.rows ? 1 : 0);
    if (k > candidates)
        throw data_error("knn: k=" + std::to_string(k) + " exceeds the " + std::to_string(candidates) + " candidates");
    std::vector<double> dist(X.rows);
    kernels::serial::sq_distances(X.rows, X.cols, X.data.data(), query, dist.data());
    std::vector<std::size_t> out(k);
    if (k) select_k(dist.data(), X.rows, k, exclude_index, out.data());
    return out;
}

std::vector<std::size_t> serial_knn_all(const Matrix& X, std::size_t k) {
    if (X.rows == 0 || k > X.rows - 1) throw data_error("knn: k exceeds the candidate count");
    std::vector<std::size_t> out(X.rows * k);
    std::vector<double> dist(X.rows);
    for (std::size_t i = 0; i < X.rows; ++i) {
        kernels::serial::sq_distances(X.rows, X.cols, X.data.data(), X.row(i), dist.data());
        select_k(dist.data(), X.rows, k, static_cast<long>(i), out.data() + i * k);
    }
    return out;
}

std::vector<std::size_t> knn_all(const Matrix& X, std::size_t k) {
    if (X.rows == 0 || k > X.rows - 1) throw data_error("knn: k exceeds the candidate count");
    const std::size_t n = X.rows, d = X.cols;
    std::vector<double> xt(n * d);
    for (std::size_t j = 0; j < n; ++j)
        for (std::size_t c = 0; c < d; ++c) xt[c * n + j] = X(j, c);
    std::vector<std::size_t> out(n * k);
#pragma omp parallel
    {
        std::vector<double> dist(n);
#pragma omp for schedule(static)
        for (long ii = 0; ii < static_cast<long>(n); ++ii) {
            const auto i = static_cast<std::size_t>(ii);
            kernels::par::sq_distances_colmajor(n, d, xt.data(), X.row(i), dist.data());
            select_k(dist.data(), n, k, ii, out.data() + i * k);
        }
    }
    return out;
}

void ResampleReport::write_csv(const std::filesystem::path& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw io_error("cannot write " + path.string());
    out << "class,original,after_smote,after_enn,synthesized,removed\n";
    for (int c = 0; c < kNumClasses; ++c) {
        out << severity_name(c) << ',' << original[c] << ',' << after_smote[c] << ',' << after_enn[c] << ','
            << synthesized[c] << ',' << removed[c] << '\n';
    }
}

double ResampleReport::imbalance_ratio_before() const { return ratio(original); }
double ResampleReport::imbalance_ratio_after() const { return ratio(after_enn); }

SmoteResult smote(const Dataset& D, const SmoteParams& params, Rng& rng) {
    D.lineage.require_not_test("resampling");
    if (params.k < 1) throw config_error("smote needs k >= 1");
    const auto counts = counts_of(D.y);
    std::array<std::size_t, kNumClasses> target{};
    if (params.target_counts) {
        target = *params.target_counts;
    } else {
        // absent classes stay absent; there is nothing to interpolate from
        const std::size_t majority = *std::max_element(counts.begin(), counts.end());
        for (int c = 0; c < kNumClasses; ++c) target[c] = counts[c] > 0 ? majority : 0;
    }

    SmoteResult res;
    res.report.original = counts;
    std::vector<std::vector<double>> rows;
    std::vector<int> labels;

    for (int c = 0; c < kNumClasses; ++c) {
        const std::size_t nc = counts[c];
        if (target[c] <= nc) continue;
        if (nc < 2)
            throw data_error("smote: class " + std::string(severity_name(c)) + " has " + std::to_string(nc) +
                             " sample(s); at least 2 are needed to interpolate");
        std::vector<std::size_t> members;
        for (std::size_t i = 0; i < D.n_rows(); ++i)
            if (D.y[i] == c) members.push_back(i);
        Matrix sub(nc, D.n_features());
        for (std::size_t m = 0; m < nc; ++m) std::copy_n(D.X.row(members[m]), D.n_features(), sub.row(m));
        const std::size_t k = std::min(params.k, nc - 1);
        const std::vector<std::size_t> nbrs = knn_all(sub, k);

        const std::size_t deficit = target[c] - nc;
        for (std::size_t s = 0; s < deficit; ++s) {
            const std::size_t local = uniform_index(rng, nc);
            const std::size_t nb_local = nbrs[local * k + uniform_index(rng, k)];
            const double u = params.fixed_gap ? *params.fixed_gap : uniform01(rng);
            const double* x = D.X.row(members[local]);
            const double* xn = D.X.row(members[nb_local]);
            std::vector<double> synth(D.n_features());
            for (std::size_t f = 0; f < synth.size(); ++f) synth[f] = x[f] + u * (xn[f] - x[f]);
            rows.push_back(std::move(synth));
            labels.push_back(c);
            res.origins.push_back({members[local], members[nb_local], u});
        }
        res.report.synthesized[c] = deficit;
    }

    Dataset& out = res.data;
    out.feature_names = D.feature_names;
    out.groups = D.groups;
    out.column_group = D.column_group;
    out.lineage = D.lineage;
    out.lineage.stages.push_back("smote");
    out.X = Matrix(D.n_rows() + rows.size(), D.n_features());
    std::copy(D.X.data.begin(), D.X.data.end(), out.X.data.begin());
    for (std::size_t i = 0; i < rows.size(); ++i) std::copy(rows[i].begin(), rows[i].end(), out.X.row(D.n_rows() + i));
    out.y = D.y;
    out.y.insert(out.y.end(), labels.begin(), labels.end());
    out.row_ids = D.row_ids;
    out.synthetic = D.synthetic;
    std::uint64_t next_id = D.row_ids.empty() ? 0 : *std::max_element(D.row_ids.begin(), D.row_ids.end()) + 1;
    for (std::size_t i = 0; i < rows.size(); ++i) {
        out.row_ids.push_back(next_id++);
        out.synthetic.push_back(1);
    }
    res.report.after_smote = counts_of(out.y);
    res.report.after_enn = res.report.after_smote;
    return res;
}

EnnResult enn(const Dataset& D, std::size_t k) {
    D.lineage.require_not_test("resampling");
    if (D.n_rows() <= k) throw data_error("enn needs more than k rows");
    const std::vector<std::size_t> nbrs = knn_all(D.X, k);
    EnnResult res;
    res.report.original = counts_of(D.y);
    res.report.after_smote = res.report.original;
    for (std::size_t i = 0; i < D.n_rows(); ++i) {
        std::array<std::size_t, kNumClasses> votes{};
        for (std::size_t j = 0; j < k; ++j) ++votes[static_cast<std::size_t>(D.y[nbrs[i * k + j]])];
        const std::size_t own = votes[static_cast<std::size_t>(D.y[i])];
        const bool outvoted = std::any_of(votes.begin(), votes.end(), [own](std::size_t v) { return v > own; });
        if (outvoted) ++res.report.removed[static_cast<std::size_t>(D.y[i])];
        else res.kept.push_back(i);
    }
    res.data = D.select_rows(res.kept);
    res.data.lineage.stages.push_back("enn");
    res.report.after_enn = counts_of(res.data.y);
    return res;
}

SmoteEnnResult smoteenn(const Dataset& D, std::size_t smote_k, std::size_t enn_k, Rng& rng) {
    SmoteParams sp;
    sp.k = smote_k;
    SmoteResult s = smote(D, sp, rng);
    EnnResult e = enn(s.data, enn_k);
    SmoteEnnResult out;
    out.data = std::move(e.data);
    out.report = s.report;
    out.report.after_enn = e.report.after_enn;
    out.report.removed = e.report.removed;
    return out;
}

std::vector<double> class_weights(const std::vector<int>& y, int n_classes) {
    if (n_classes < 1) throw config_error("class_weights needs at least one class");
    std::vector<std::size_t> counts(static_cast<std::size_t>(n_classes), 0);
    for (int v : y) {
        if (v < 0 || v >= n_classes) throw data_error("label out of range: " + std::to_string(v));
        ++counts[static_cast<std::size_t>(v)];
    }
    std::vector<double> w(counts.size());
    const double N = static_cast<double>(y.size());
    for (std::size_t c = 0; c < counts.size(); ++c) {
        if (counts[c] == 0) throw data_error("class_weights: class " + std::to_string(c) + " is absent");
        w[c] = N / (static_cast<double>(n_classes) * static_cast<double>(counts[c]));
    }
    return w;
}

void write_distribution_report(const Dataset& before, const Dataset& after, const std::filesystem::path& path,
                               std::size_t bins) {
    if (before.feature_names != after.feature_names) throw data_error("distribution report needs matching columns");
    if (bins < 1) throw config_error("distribution report needs at least one bin");
    std::ofstream out(path, std::ios::binary);
    if (!out) throw io_error("cannot write " + path.string());
    out << "feature,scope,stage,bin,lo,hi,count,fraction\n";
    for (std::size_t f = 0; f < before.n_features(); ++f) {
        double lo = std::numeric_limits<double>::infinity(), hi = -lo;
        for (const Dataset* ds : {&before, &after})
            for (std::size_t r = 0; r < ds->n_rows(); ++r) {
                lo = std::min(lo, ds->X(r, f));
                hi = std::max(hi, ds->X(r, f));
            }
        if (!(hi > lo)) hi = lo + 1.0;
        const double width = (hi - lo) / static_cast<double>(bins);
        for (int scope = -1; scope < kNumClasses; ++scope) {
            for (const auto& [stage, ds] : {std::pair<const char*, const Dataset*>{"before", &before}, {"after", &after}}) {
                std::vector<std::size_t> hist(bins, 0);
                std::size_t total = 0;
                for (std::size_t r = 0; r < ds->n_rows(); ++r) {
                    if (scope >= 0 && ds->y[r] != scope) continue;
                    auto b = static_cast<std::size_t>((ds->X(r, f) - lo) / width);
                    ++hist[std::min(b, bins - 1)];
                    ++total;
                }
                for (std::size_t b = 0; b < bins; ++b) {
                    out << quote_csv_field(before.feature_names[f]) << ','
                        << (scope < 0 ? std::string("all") : std::string(severity_name(scope))) << ',' << stage << ','
                        << b << ',' << format_double(lo + width * static_cast<double>(b)) << ','
                        << format_double(lo + width * static_cast<double>(b + 1)) << ',' << hist[b] << ','
                        << format_double(total ? static_cast<double>(hist[b]) / static_cast<double>(total) : 0.0)
                        << '\n';
                }
            }
        }
    }
}

}  // namespace crashsev
