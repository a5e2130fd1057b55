#include "crashsev/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <fstream>

#include "crashsev/nn/checkpoint.hpp"
#include "crashsev/pfn.hpp"
#include "crashsev/synthgen.hpp"
#include "crashsev/trees.hpp"
#include "crashsev/util.hpp"
#include "json.hpp"

namespace crashsev {

namespace fs = std::filesystem;

namespace {

const std::vector<std::pair<Stage, std::string>>& stage_names() {
    static const std::vector<std::pair<Stage, std::string>> n = {
        {Stage::Ingest, "ingest"}, {Stage::Prep, "prep"},       {Stage::Select, "select-features"},
        {Stage::Resample, "resample"}, {Stage::Train, "train"}, {Stage::Pfn, "pfn"},
        {Stage::Evaluate, "evaluate"}};
    return n;
}

std::string split_csv(const SplitIndices& s) {
    std::vector<std::pair<std::size_t, const char*>> rows;
    for (auto i : s.train) rows.emplace_back(i, "train");
    for (auto i : s.validation) rows.emplace_back(i, "validation");
    for (auto i : s.test) rows.emplace_back(i, "test");
    std::sort(rows.begin(), rows.end());
    std::string out = "row,partition\n";
    for (const auto& [i, p] : rows) out += std::to_string(i) + "," + p + "\n";
    return out;
}

std::vector<std::uint64_t> as_ids(const std::vector<std::size_t>& rows) { return {rows.begin(), rows.end()}; }

ModelResult evaluate(const std::string& name, const std::vector<int>& truth, const std::vector<int>& pred) {
    ModelResult r;
    r.model = name;
    r.cm = confusion_matrix(truth, pred);
    r.metrics = compute_metrics(r.cm);
    return r;
}

std::vector<int> argmax(const Matrix& p) {
    std::vector<int> out(p.rows);
    for (std::size_t r = 0; r < p.rows; ++r) {
        const double* row = p.row(r);
        out[r] = static_cast<int>(std::max_element(row, row + p.cols) - row);
    }
    return out;
}

}  // namespace

Stage parse_stage(const std::string& name) {
    for (const auto& [s, n] : stage_names())
        if (n == name) return s;
    if (name == "select") return Stage::Select;
    std::string all;
    for (const auto& [s, n] : stage_names()) all += (all.empty() ? "" : ", ") + n;
    throw config_error("unknown stage '" + name + "' (expected one of: " + all + ")");
}

std::string stage_name(Stage s) {
    for (const auto& [st, n] : stage_names())
        if (st == s) return n;
    return "?";
}

PipelineResult run_pipeline(const PipelineConfig& cfg, Stage stop_after, const LogFn& log_fn) {
    cfg.validate();
    const std::uint64_t seed = cfg.require_seed();
    auto log = [&](const std::string& m) {
        if (log_fn) log_fn(m);
    };
    const fs::path out = cfg.out_dir;
    std::error_code ec;
    fs::create_directories(out, ec);
    if (ec) throw io_error("cannot create output directory " + out.string() + ": " + ec.message());
    fs::remove(out / "FAILED", ec);

    PipelineResult res;
    Stage current = Stage::Ingest;
    std::vector<std::string> notes;
    auto done = [&](Stage s) {
        res.last_stage = s;
        return s == stop_after;
    };
    auto finish = [&]() {
        write_manifest(out, notes);
        return res;
    };

    try {
        write_text_file(out / "config.resolved.txt", cfg.to_text());

        // ---- ingest
        const Schema schema = cfg.schema_file ? load_schema(*cfg.schema_file) : reference_schema();
        CrashTable table;
        if (cfg.data_file) {
            log("ingest: reading " + cfg.data_file->string());
            table = ingest(*cfg.data_file, schema);
        } else {
            GenConfig g = *cfg.synth;
            if (cfg.synth_bayes_target) g.signal_strength = signal_for_bayes_accuracy(g.class_priors, *cfg.synth_bayes_target);
            log("ingest: generating " + std::to_string(g.n_rows) + " synthetic rows");
            GenResult gen = generate_ev_crashes(g);
            fs::create_directories(out / "data");
            write_crash_csv(gen.table, out / "data" / "synth.csv");
            nlohmann::json meta = {{"bayes_accuracy", gen.bayes_accuracy},
                                   {"signal_strength", g.signal_strength},
                                   {"n_rows", g.n_rows}};
            write_text_file(out / "data" / "synth.json", meta.dump(2) + "\n");
            res.bayes_accuracy = gen.bayes_accuracy;
            table = apply_row_filters(gen.table, schema);
        }
        const std::vector<int> labels = severity_labels(table, schema);
        const SplitIndices split = stratified_split(labels, {0.6, 0.2, 0.2}, derive_seed(seed, 11));
        write_text_file(out / "split.csv", split_csv(split));
        log("ingest: " + std::to_string(table.n_rows) + " rows, split " + std::to_string(split.train.size()) + "/" +
            std::to_string(split.validation.size()) + "/" + std::to_string(split.test.size()));
        if (done(Stage::Ingest)) return finish();

        // ---- preprocessing, fitted on the training rows only
        current = Stage::Prep;
        const CrashTable train_tab = table.select_rows(split.train);
        const PreprocessState state = fit_preprocess(train_tab, schema, Partition::Train);
        state.save(out / "preprocess_state.json");
        Dataset train = transform(train_tab, schema, state, Partition::Train, nullptr);
        Dataset val = transform(table.select_rows(split.validation), schema, state, Partition::Validation, nullptr);
        Dataset test = transform(table.select_rows(split.test), schema, state, Partition::Test, nullptr);
        train.row_ids = as_ids(split.train);
        val.row_ids = as_ids(split.validation);
        test.row_ids = as_ids(split.test);
        log("prep: " + std::to_string(train.n_features()) + " encoded columns from " +
            std::to_string(train.groups.size()) + " variables");
        if (done(Stage::Prep)) return finish();

        // ---- feature importance and selection, on train
        current = Stage::Select;
        ForestParams fp;
        fp.n_trees = cfg.forest_trees;
        fp.max_depth = cfg.forest_depth;
        fp.min_samples_leaf = cfg.forest_min_leaf;
        fp.seed = derive_seed(seed, 21);
        BoostParams bp;
        bp.n_rounds = cfg.gbt_rounds;
        bp.max_depth = cfg.gbt_depth;
        bp.learning_rate = cfg.gbt_learning_rate;
        bp.seed = derive_seed(seed, 22);
        log("select: fitting random forest and boosted trees");
        const ImportanceRanking forest = aggregate_by_group(mdi_importance(fit_random_forest(train, fp)), train);
        const ImportanceRanking boosted = aggregate_by_group(gain_importance(fit_gbt(train, bp)), train);
        write_rankings_csv(forest, boosted, out / "feature_importance.csv");
        res.selected = combined_rank(forest, boosted, std::min(cfg.select_k, train.groups.size()));
        write_feature_list(res.selected, out / "selected_features.txt");
        train = train.select_groups(res.selected);
        val = val.select_groups(res.selected);
        test = test.select_groups(res.selected);
        if (done(Stage::Select)) return finish();

        // ---- resampling of the training partition
        current = Stage::Resample;
        Dataset fit_set = train;
        if (cfg.resample) {
            Rng rng(derive_seed(seed, 31));
            SmoteEnnResult se = smoteenn(train, cfg.smote_k, cfg.enn_k, rng);
            res.resample = se.report;
            se.report.write_csv(out / "resample_report.csv");
            write_distribution_report(train, se.data, out / "distribution_report.csv");
            log("resample: imbalance " + format_double(se.report.imbalance_ratio_before()) + " -> " +
                format_double(se.report.imbalance_ratio_after()));
            fit_set = std::move(se.data);
        } else {
            notes.push_back("resampling disabled");
        }
        if (done(Stage::Resample)) return finish();

        // ---- neural models
        current = Stage::Train;
        const std::vector<double> weights =
            cfg.use_class_weights ? class_weights(fit_set.y) : std::vector<double>(kNumClasses, 1.0);
        res.test_labels = test.y;
        for (const auto& m : cfg.models) {
            const auto t0 = std::chrono::steady_clock::now();
            nn::ModelSpec spec = nn::parse_variant(m.name) == nn::Variant::MambaNet
                                     ? nn::ModelSpec::mamba_net(fit_set.column_group)
                                     : nn::ModelSpec::mamba_attention(fit_set.column_group);
            nn::SsmClassifier<float> model(spec, derive_seed(m.train.seed, 1));
            TrainResult tr = train_model(model, fit_set, val, weights, m.train);
            const fs::path dir = out / "models" / m.name;
            fs::create_directories(dir);
            nn::save_checkpoint(dir / "checkpoint.json", model, {state.hash(), res.selected});
            tr.curves.write_csv(dir / "curves.csv");
            const auto pred = nn::argmax_rows(nn::predict_logits(model, test.X));
            ModelResult r = evaluate(m.name, test.y, pred);
            r.curves = tr.curves;
            res.val_accuracy[m.name] = tr.curves.rows.at(tr.best_epoch).val_acc;
            log("train: " + m.name + " best epoch " + std::to_string(tr.best_epoch) + ", test accuracy " +
                format_double(r.metrics.accuracy) + " (" +
                std::to_string(std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count()) + " s)");
            res.results.push_back(std::move(r));
        }
        if (done(Stage::Train)) return finish();

        // ---- PFN one-shot inference
        current = Stage::Pfn;
        if (cfg.run_pfn) {
            std::optional<PfnModel> pfn;
            if (cfg.pfn_checkpoint) {
                pfn.emplace(PfnModel::load(*cfg.pfn_checkpoint));
            } else {
                log("pfn: pretraining on " + std::to_string(cfg.pfn_pretrain.tasks) + " prior tasks");
                PretrainLog plog;
                pfn.emplace(pretrain_pfn(PriorConfig{}, cfg.pfn_arch, cfg.pfn_pretrain, &plog));
                fs::create_directories(out / "pfn");
                plog.write_csv(out / "pfn" / "pretrain_loss.csv");
                pfn->save(out / "pfn" / "pfn_model.json");
            }
            // context: the training partition before resampling, one scalar per variable
            const VariableCoder coder = VariableCoder::fit(train);
            PredictOptions po;
            po.subsample_fallback = cfg.pfn_subsample_fallback;
            po.seed = derive_seed(seed, 41);
            const Matrix probs = pfn_predict(*pfn, coder.encode(train), train.y, coder.encode(test), po);
            ModelResult r = evaluate("TabPFN", test.y, argmax(probs));
            log("pfn: test accuracy " + format_double(r.metrics.accuracy));
            res.results.push_back(std::move(r));
        }
        if (done(Stage::Pfn)) return finish();

        // ---- reports
        current = Stage::Evaluate;
        const auto more = emit_reports(res.results, res.resample, {&train, cfg.resample ? &fit_set : nullptr}, out);
        notes.insert(notes.end(), more.begin(), more.end());
        done(Stage::Evaluate);
        return finish();
    } catch (const Error& e) {
        std::ofstream(out / "FAILED") << "stage: " << stage_name(current) << "\ncause: " << e.what() << "\n";
        try {
            write_manifest(out, notes);
        } catch (...) {
        }
        throw Error(e.kind(), "stage " + stage_name(current) + ": " + e.what());
    }
}

}  // namespace crashsev
