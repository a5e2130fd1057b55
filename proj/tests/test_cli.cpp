#include "doctest.h"

#include <cstdlib>
#include <sys/wait.h>

#include "crashsev/common.hpp"
#include "crashsev/schema.hpp"
#include "crashsev/util.hpp"
#include "test_util.hpp"

using namespace crashsev;
namespace fs = std::filesystem;

namespace {

const std::string kBin = CRASHSEV_BIN;

// Fast pipeline settings, as --set flags.
const std::string kFast =
    " --set synth.n_rows=800 --set select.forest_trees=5 --set select.gbt_rounds=5 --set train.epochs=2"
    " --set pfn.tasks=32 -q";

int run(const std::string& args, const std::string& env = "") {
    const std::string cmd = env + (env.empty() ? "" : " ") + "'" + kBin + "' " + args + " >/dev/null 2>&1";
    const int st = std::system(cmd.c_str());
    REQUIRE(WIFEXITED(st));
    return WEXITSTATUS(st);
}

std::string q(const fs::path& p) { return "'" + p.string() + "'"; }

}  // namespace

TEST_CASE("usage errors exit with the config code") {
    CHECK(run("") == 2);
    CHECK(run("frobnicate") == 2);
    CHECK(run("synth --rows 10") == 2);  // --out and --seed are required
    CHECK(run("--help") == 0);
    CHECK(run("run --stage deploy --seed 1 --set synth.n_rows=10") == 2);
}

TEST_CASE("synth writes a CSV deterministically") {
    testutil::TempDir dir("cli_synth");
    CHECK(run("synth -o " + q(dir / "a.csv") + " --rows 300 --seed 4 --bayes-target 0.9") == 0);
    CHECK(run("synth -o " + q(dir / "b.csv") + " --rows 300 --seed 4 --bayes-target 0.9") == 0);
    CHECK(sha256_file(dir / "a.csv") == sha256_file(dir / "b.csv"));
    CHECK(run("synth -o " + q(dir / "c.csv") + " --rows 300 --seed 4 --priors 0.5,0.5,0.5") == 2);
}

TEST_CASE("configuration errors: both data sources, no seed") {
    testutil::TempDir dir("cli_cfg");
    dir.write("both.cfg", "version = 1\nseed = 1\nsynth.n_rows = 100\ndata.file = x.csv\n");
    CHECK(run("run -c " + q(dir / "both.cfg") + " -o " + q(dir / "o")) == 2);
    dir.write("noseed.cfg", "version = 1\nsynth.n_rows = 100\n");
    CHECK(run("run -c " + q(dir / "noseed.cfg") + " -o " + q(dir / "o")) == 2);
    CHECK(run("run -c " + q(dir / "missing.cfg")) == 5);
}

TEST_CASE("data, numeric and I/O failures map to their exit codes") {
    testutil::TempDir dir("cli_err");
    dir.write("bad.csv", "x,y\n1,2\n");
    CHECK(run("run --seed 1 --set data.file=" + q(dir / "bad.csv") + " -o " + q(dir / "o1") + " -q") == 3);
    CHECK(fs::exists(dir / "o1" / "FAILED"));
    CHECK(run("run --seed 1 --set data.file=" + q(dir / "absent.csv") + " -o " + q(dir / "o2") + " -q") == 5);
    CHECK(run("run --seed 1 --set models=MambaNet --set train.lr=1e9 -o " + q(dir / "o3") + kFast) == 4);
    CHECK(read_text_file(dir / "o3" / "FAILED").find("stage: train") != std::string::npos);
    dir.write("file", "x");
    CHECK(run("run --seed 1 -o " + q(dir / "file" / "sub") + kFast) == 5);
}

TEST_CASE("--stage resample stops after resampling") {
    testutil::TempDir dir("cli_stage");
    CHECK(run("run --stage resample --seed 3 -o " + q(dir.path) + kFast) == 0);
    CHECK(fs::exists(dir / "resample_report.csv"));
    CHECK(fs::exists(dir / "manifest.json"));
    CHECK_FALSE(fs::exists(dir / "metrics.csv"));
    CHECK_FALSE(fs::exists(dir / "models"));
    // the per-stage subcommand does the same
    CHECK(run("resample --seed 3 -o " + q(dir / "again") + kFast) == 0);
    CHECK(read_text_file(dir / "resample_report.csv") == read_text_file(dir / "again" / "resample_report.csv"));
}

TEST_CASE("environment supplies out dir and seed; flags win") {
    testutil::TempDir dir("cli_env");
    const std::string env = "CRASHSEV_OUT_DIR=" + q(dir / "env_out") + " CRASHSEV_SEED=9";
    CHECK(run("prep" + kFast, env) == 0);
    CHECK(fs::exists(dir / "env_out" / "preprocess_state.json"));
    CHECK(read_text_file(dir / "env_out" / "config.resolved.txt").find("seed = 9\n") != std::string::npos);
    CHECK(run("prep --seed 10 -o " + q(dir / "flag_out") + kFast, env) == 0);
    CHECK(read_text_file(dir / "flag_out" / "config.resolved.txt").find("seed = 10\n") != std::string::npos);
    // other keys are not read from the environment
    CHECK(run("prep" + kFast, env + " CRASHSEV_SELECT_K=notanumber") == 0);
    CHECK(run("prep -o " + q(dir / "noseed") + kFast) == 2);
}

TEST_CASE("full run through the CLI") {
    testutil::TempDir dir("cli_run");
    dir.write("run.cfg",
              "version = 1\nseed = 5\nsynth.n_rows = 800\nselect.forest_trees = 5\nselect.gbt_rounds = 5\n"
              "train.epochs = 2\npfn.tasks = 32\n");
    CHECK(run("run -c " + q(dir / "run.cfg") + " -o " + q(dir / "out")) == 0);
    for (const char* f : {"metrics.csv", "confusion.csv", "curves.csv", "manifest.json", "report.txt"})
        CHECK_MESSAGE(fs::exists(dir / "out" / f), f);
}

TEST_CASE("pfn-pretrain, pfn-predict and evaluate") {
    testutil::TempDir dir("cli_pfn");
    CHECK(run("pfn-pretrain -o " + q(dir / "m.json") + " --tasks 64 --seed 2 --heldout 20 --log " + q(dir / "log.csv")) == 0);
    CHECK(fs::exists(dir / "log.csv"));
    dir.write("ctx.csv", "a,b,label\n0,1,KA\n1,0,BC\n2,2,O\n0.5,1,KA\n1.5,0,BC\n2.5,2,O\n");
    dir.write("q.csv", "a,b\n0,1\n2,2\n");
    CHECK(run("pfn-predict -m " + q(dir / "m.json") + " --context " + q(dir / "ctx.csv") + " --query " +
              q(dir / "q.csv") + " -o " + q(dir / "p.csv")) == 0);
    std::stringstream ss(read_text_file(dir / "p.csv"));
    std::string line;
    std::getline(ss, line);
    CHECK(line == "row,p0,p1,p2");
    int rows = 0;
    while (std::getline(ss, line)) {
        const auto f = split_csv_record(line);
        REQUIRE(f.size() == 4);
        CHECK(std::abs(std::stod(f[1]) + std::stod(f[2]) + std::stod(f[3]) - 1.0) < 1e-6);
        ++rows;
    }
    CHECK(rows == 2);
    dir.write("ctx4.csv", "a,label\n0,0\n1,1\n2,2\n3,3\n");
    CHECK(run("pfn-predict -m " + q(dir / "m.json") + " --context " + q(dir / "ctx4.csv") + " --query " +
              q(dir / "q.csv") + " -o " + q(dir / "p4.csv")) == 3);  // width mismatch with q.csv
    dir.write("q1.csv", "a\n1\n");
    CHECK(run("pfn-predict -m " + q(dir / "m.json") + " --context " + q(dir / "ctx4.csv") + " --query " +
              q(dir / "q1.csv") + " -o " + q(dir / "p4.csv")) == 2);  // four classes: envelope

    dir.write("pred.csv", "y_true,y_pred\n0,0\n0,1\n1,1\n2,2\n");
    CHECK(run("evaluate -i " + q(dir / "pred.csv") + " -o " + q(dir / "ev")) == 0);
    CHECK(read_text_file(dir / "ev" / "confusion.csv").find("model,KA,1,1,0") != std::string::npos);
    dir.write("pred_bad.csv", "y_true,y_pred\n0,7\n");
    CHECK(run("evaluate -i " + q(dir / "pred_bad.csv") + " -o " + q(dir / "ev2")) == 3);
}
