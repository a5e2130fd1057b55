// crashsev: command-line front end for the crash-severity toolkit.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "crashsev/config.hpp"
#include "crashsev/metrics.hpp"
#include "crashsev/pfn.hpp"
#include "crashsev/pipeline.hpp"
#include "crashsev/report.hpp"
#include "crashsev/schema.hpp"
#include "crashsev/synthgen.hpp"
#include "crashsev/util.hpp"
#include "json.hpp"

using namespace crashsev;
namespace fs = std::filesystem;

namespace {

struct PipelineOpts {
    std::string config;
    std::vector<std::string> sets;
    std::string out;
    std::string seed;
    bool quiet = false;
};

void add_pipeline_opts(CLI::App* cmd, PipelineOpts& o) {
    cmd->add_option("-c,--config", o.config, "key = value config file");
    cmd->add_option("--set", o.sets, "override a config key (key=value), repeatable");
    cmd->add_option("-o,--out", o.out, "output directory (config key out_dir)");
    cmd->add_option("--seed", o.seed, "global seed (config key seed)");
    cmd->add_flag("-q,--quiet", o.quiet, "no progress messages");
}

PipelineConfig resolve(const PipelineOpts& o) {
    std::vector<std::string> overrides = o.sets;
    if (!o.out.empty()) overrides.push_back("out_dir=" + o.out);
    if (!o.seed.empty()) overrides.push_back("seed=" + o.seed);
    if (o.config.empty()) return resolve_config({}, overrides);
    return load_config(o.config, overrides);
}

int run_stage(const PipelineOpts& o, Stage stop) {
    const PipelineConfig cfg = resolve(o);
    LogFn log;
    if (!o.quiet) log = [](const std::string& m) { std::cerr << m << '\n'; };
    const PipelineResult r = run_pipeline(cfg, stop, log);
    if (!r.results.empty() && stop == Stage::Evaluate) std::cout << metrics_table(r.results);
    std::cerr << "done: " << stage_name(r.last_stage) << " -> " << cfg.out_dir.string() << '\n';
    return 0;
}

// Numeric CSV with a header; the column named `label_column` (if any) is split off as labels,
// given as 0/1/2 or KA/BC/O.
Matrix read_numeric_csv(const fs::path& path, const std::string& label_column, std::vector<int>* labels) {
    std::istringstream in(read_text_file(path));
    std::string line;
    if (!std::getline(in, line)) throw data_error(path.string() + " is empty");
    const auto header = split_csv_record(line);
    long label_idx = -1;
    for (std::size_t i = 0; i < header.size(); ++i)
        if (!label_column.empty() && header[i] == label_column) label_idx = static_cast<long>(i);
    if (labels && label_idx < 0) throw data_error(path.string() + " has no '" + label_column + "' column");
    std::vector<double> vals;
    std::size_t rows = 0, cols = header.size() - (label_idx >= 0 ? 1 : 0);
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        const auto f = split_csv_record(line);
        if (f.size() != header.size()) throw data_error(path.string() + ": row " + std::to_string(rows + 1) + " has the wrong width");
        for (std::size_t i = 0; i < f.size(); ++i) {
            if (static_cast<long>(i) == label_idx) {
                const std::string& t = f[i];
                int y = t == "KA" ? 0 : t == "BC" ? 1 : t == "O" ? 2 : -1;
                if (y < 0) {
                    try {
                        y = std::stoi(t);
                    } catch (...) {
                        throw data_error(path.string() + ": bad label '" + t + "'");
                    }
                }
                labels->push_back(y);
                continue;
            }
            try {
                std::size_t used = 0;
                vals.push_back(std::stod(f[i], &used));
                if (used != f[i].size()) throw std::invalid_argument(f[i]);
            } catch (const std::exception&) {
                throw data_error(path.string() + ": '" + f[i] + "' is not numeric");
            }
        }
        ++rows;
    }
    Matrix m(rows, cols);
    m.data = std::move(vals);
    return m;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Crash-severity modelling toolkit"};
    app.require_subcommand(1);

    // synth
    auto* synth = app.add_subcommand("synth", "write a synthetic crash-record CSV");
    std::string synth_out;
    GenConfig gen;
    std::vector<double> priors;
    double bayes_target = 0;
    synth->add_option("-o,--out", synth_out, "CSV path")->required();
    synth->add_option("--rows", gen.n_rows, "number of EV rows");
    synth->add_option("--priors", priors, "class priors KA BC O")->expected(3)->delimiter(',');
    synth->add_option("--signal", gen.signal_strength, "signal strength in [0, 1]");
    synth->add_option("--bayes-target", bayes_target, "pick the signal strength for this Bayes accuracy");
    synth->add_option("--non-ev-rows", gen.non_ev_rows, "extra non-EV rows (filtered at ingest)");
    synth->add_option("--seed", gen.seed, "generator seed")->required();

    PipelineOpts prep_o, sel_o, res_o, train_o, run_o;
    add_pipeline_opts(app.add_subcommand("prep", "ingest, split and fit preprocessing"), prep_o);
    add_pipeline_opts(app.add_subcommand("select-features", "... then rank and select features"), sel_o);
    add_pipeline_opts(app.add_subcommand("resample", "... then SMOTEENN the training partition"), res_o);
    add_pipeline_opts(app.add_subcommand("train", "... then train the configured neural models"), train_o);
    auto* run = app.add_subcommand("run", "full pipeline");
    add_pipeline_opts(run, run_o);
    std::string stage = "evaluate";
    run->add_option("--stage", stage, "stop after this stage");

    // pfn-pretrain
    auto* pre = app.add_subcommand("pfn-pretrain", "pretrain and freeze the prior-fitted network");
    std::string pre_out, pre_log;
    PretrainConfig pcfg;
    PfnArch arch;
    std::size_t heldout = 500;
    pre->add_option("-o,--out", pre_out, "checkpoint path")->required();
    pre->add_option("--tasks", pcfg.tasks, "prior tasks");
    pre->add_option("--tasks-per-step", pcfg.tasks_per_step, "tasks per optimizer step");
    pre->add_option("--lr", pcfg.lr, "peak learning rate");
    pre->add_option("--layers", arch.layers, "transformer layers");
    pre->add_option("--width", arch.width, "model width");
    pre->add_option("--heads", arch.heads, "attention heads");
    pre->add_option("--seed", pcfg.seed, "seed")->required();
    pre->add_option("--log", pre_log, "per-step loss CSV");
    pre->add_option("--heldout", heldout, "held-out tasks to score after pretraining (0 = skip)");

    // pfn-predict
    auto* pred = app.add_subcommand("pfn-predict", "one-shot class probabilities from a labelled context");
    std::string model_path, ctx_path, query_path, pred_out, label_col = "label";
    PredictOptions popts;
    pred->add_option("-m,--model", model_path, "frozen PFN checkpoint")->required();
    pred->add_option("--context", ctx_path, "numeric CSV with a label column")->required();
    pred->add_option("--query", query_path, "numeric CSV, same feature columns")->required();
    pred->add_option("--label-column", label_col, "label column name in the context CSV");
    pred->add_option("-o,--out", pred_out, "probability CSV")->required();
    pred->add_flag("--subsample-fallback", popts.subsample_fallback, "stratified subsample oversize contexts");
    pred->add_option("--seed", popts.seed, "subsampling seed");

    // evaluate
    auto* ev = app.add_subcommand("evaluate", "metrics from a predictions CSV (columns y_true,y_pred)");
    std::string ev_in, ev_out, ev_model = "model";
    ev->add_option("-i,--predictions", ev_in, "predictions CSV")->required();
    ev->add_option("-o,--out", ev_out, "report directory")->required();
    ev->add_option("--model", ev_model, "model name in the report");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : static_cast<int>(ErrorKind::Config);
    }

    try {
        if (synth->parsed()) {
            if (!priors.empty()) gen.class_priors = {priors[0], priors[1], priors[2]};
            if (bayes_target > 0) gen.signal_strength = signal_for_bayes_accuracy(gen.class_priors, bayes_target);
            const GenResult g = generate_ev_crashes(gen);
            write_crash_csv(g.table, synth_out);
            std::cout << "rows " << g.table.n_rows << ", bayes accuracy " << format_double(g.bayes_accuracy) << '\n';
            return 0;
        }
        if (app.got_subcommand("prep")) return run_stage(prep_o, Stage::Prep);
        if (app.got_subcommand("select-features")) return run_stage(sel_o, Stage::Select);
        if (app.got_subcommand("resample")) return run_stage(res_o, Stage::Resample);
        if (app.got_subcommand("train")) return run_stage(train_o, Stage::Train);
        if (run->parsed()) return run_stage(run_o, parse_stage(stage));
        if (pre->parsed()) {
            PretrainLog plog;
            PriorConfig prior;
            PfnModel m = pretrain_pfn(prior, arch, pcfg, &plog);
            nlohmann::json summary = {{"tasks", pcfg.tasks}, {"seed", pcfg.seed}};
            if (heldout > 0) {
                const HeldOutResult h = evaluate_held_out(m, prior, heldout, derive_seed(pcfg.seed, 99));
                summary["heldout_accuracy"] = h.accuracy;
                summary["heldout_chance"] = h.chance;
                std::cout << "held-out accuracy " << format_double(h.accuracy) << " (chance " << format_double(h.chance)
                          << ")\n";
            }
            m.save(pre_out, summary.dump());
            if (!pre_log.empty()) plog.write_csv(pre_log);
            std::cerr << "pretrained in " << plog.seconds << " s\n";
            return 0;
        }
        if (pred->parsed()) {
            std::vector<int> cy;
            const Matrix cx = read_numeric_csv(ctx_path, label_col, &cy);
            const Matrix qx = read_numeric_csv(query_path, "", nullptr);
            const PfnModel m = PfnModel::load(model_path);
            const Matrix p = pfn_predict(m, cx, cy, qx, popts);
            std::string s = "row";
            for (std::size_t c = 0; c < p.cols; ++c) s += ",p" + std::to_string(c);
            s += "\n";
            for (std::size_t r = 0; r < p.rows; ++r) {
                s += std::to_string(r);
                for (std::size_t c = 0; c < p.cols; ++c) s += "," + format_double(p(r, c));
                s += "\n";
            }
            write_text_file(pred_out, s);
            return 0;
        }
        if (ev->parsed()) {
            std::vector<int> truth;
            const Matrix pm = read_numeric_csv(ev_in, "y_true", &truth);
            if (pm.cols != 1) throw data_error("predictions CSV needs exactly the columns y_true,y_pred");
            std::vector<int> predicted;
            for (double v : pm.data) predicted.push_back(static_cast<int>(v));
            ModelResult r;
            r.model = ev_model;
            r.cm = confusion_matrix(truth, predicted);
            r.metrics = compute_metrics(r.cm);
            const auto notes = emit_reports({r}, std::nullopt, {}, ev_out);
            write_manifest(ev_out, notes);
            std::cout << metrics_table({r});
            return 0;
        }
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << '\n';
        return e.exit_code();
    } catch (const fs::filesystem_error& e) {
        std::cerr << "error: " << e.what() << '\n';
        return static_cast<int>(ErrorKind::Io);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return static_cast<int>(ErrorKind::Data);
    }
    return 0;
}
