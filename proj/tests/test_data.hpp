#pragma once

#include <string>
#include <vector>

#include "crashsev/preprocess.hpp"
#include "crashsev/schema.hpp"
#include "crashsev/synthgen.hpp"

namespace testutil {

// Dataset with one group per column, named f0, f1, ...
inline crashsev::Dataset make_dataset(const crashsev::Matrix& X, const std::vector<int>& y) {
    crashsev::Dataset d;
    d.X = X;
    d.y = y;
    for (std::size_t j = 0; j < X.cols; ++j) {
        d.feature_names.push_back("f" + std::to_string(j));
        d.groups.push_back("f" + std::to_string(j));
        d.column_group.push_back(static_cast<int>(j));
    }
    for (std::size_t r = 0; r < X.rows; ++r) d.row_ids.push_back(r);
    d.synthetic.assign(X.rows, 0);
    d.lineage.partition = crashsev::Partition::Train;
    return d;
}

inline crashsev::Matrix rows_of(const std::vector<std::vector<double>>& rows) {
    crashsev::Matrix m(rows.size(), rows.empty() ? 0 : rows[0].size());
    for (std::size_t r = 0; r < rows.size(); ++r)
        for (std::size_t c = 0; c < m.cols; ++c) m(r, c) = rows[r][c];
    return m;
}

struct SynthSplit {
    crashsev::Dataset train, test;
    double bayes = 0;
};

// Generated records, preprocessed with train-fitted state, split 75/25 by row order.
inline SynthSplit synth_split(std::size_t n, double signal, std::uint64_t seed) {
    using namespace crashsev;
    GenConfig g;
    g.n_rows = n;
    g.signal_strength = signal;
    g.seed = seed;
    const GenResult gen = generate_ev_crashes(g);
    std::vector<std::size_t> tr, te;
    for (std::size_t i = 0; i < gen.table.n_rows; ++i) (i % 4 == 3 ? te : tr).push_back(i);
    const Schema sc = reference_schema();
    const CrashTable ttab = gen.table.select_rows(tr);
    const PreprocessState st = fit_preprocess(ttab, sc);
    SynthSplit s;
    s.train = transform(ttab, sc, st, Partition::Train);
    s.test = transform(gen.table.select_rows(te), sc, st, Partition::Test);
    s.bayes = gen.bayes_accuracy;
    return s;
}

}  // namespace testutil
