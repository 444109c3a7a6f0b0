// SPDX-License-Identifier: Apache-2.0
#include <catch2/catch_amalgamated.hpp>

#include <unistd.h>

#include <cstdlib>
#include <fstream>
#include <sstream>

#include "bidora/runner.hpp"

using namespace bidora;

namespace {

// Small everything: runs finish in well under a second each.
ExperimentSpec tiny_spec(Method method, const fs::path& out_dir) {
    ExperimentSpec spec;
    spec.method = method;
    spec.task.num_classes = 2;
    spec.task.d = 4;
    spec.task.n_pretrain = 100;
    spec.task.n_target = 40;
    spec.task.n_test = 100;
    spec.task.shift = 1.0;
    spec.task.noise = 0.0;
    spec.rank = 2;
    spec.alpha = 4.0;
    spec.hidden = 8;
    spec.depth = 1;
    spec.pretrain_steps = 30;
    spec.cfg.search_steps = 20;
    spec.cfg.retrain_steps = 10;
    spec.cfg.eval_every = 5;
    spec.cfg.batch_size = 16;
    spec.out_dir = out_dir.string();
    return spec;
}

fs::path fresh_dir(const std::string& tag) {
    fs::path dir = fs::temp_directory_path() /
                   ("bidora_test_" + tag + "_" +
                    std::to_string(static_cast<unsigned>(::getpid())));
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

std::string slurp(const fs::path& p) {
    std::ifstream is(p);
    REQUIRE(is.good());
    std::stringstream ss;
    ss << is.rdbuf();
    return ss.str();
}

}  // namespace

TEST_CASE("spec round-trips through json") {
    ExperimentSpec spec = tiny_spec(Method::bidora, "runs");
    spec.cfg.xi = 5e-4;
    spec.cfg.mode = BilevelMode::xi_zero;
    spec.seeds = {3, 4};
    ExperimentSpec back = spec_from_json(spec_to_json(spec));
    REQUIRE(spec_to_json(back) == spec_to_json(spec));
    REQUIRE(back.cfg.xi == 5e-4);
    REQUIRE(back.cfg.mode == BilevelMode::xi_zero);
    REQUIRE(back.seeds == std::vector<std::uint64_t>{3, 4});
}

TEST_CASE("unknown config keys are a hard error") {
    json j = spec_to_json(ExperimentSpec{});
    j["typo_key"] = 1;
    REQUIRE_THROWS_AS(spec_from_json(j), std::invalid_argument);

    json j2 = spec_to_json(ExperimentSpec{});
    j2["task"]["n_tragets"] = 10;
    REQUIRE_THROWS_AS(spec_from_json(j2), std::invalid_argument);

    json j3 = spec_to_json(ExperimentSpec{});
    j3["optim"]["lr"] = 0.1;
    REQUIRE_THROWS_AS(spec_from_json(j3), std::invalid_argument);
}

TEST_CASE("retrain_lr defaults to lower_lr when omitted") {
    json j;
    j["optim"] = {{"lower_lr", 0.02}};
    REQUIRE(spec_from_json(j).cfg.retrain_lr == 0.02);
    j["optim"]["retrain_lr"] = 0.5;
    REQUIRE(spec_from_json(j).cfg.retrain_lr == 0.5);
}

TEST_CASE("cmd_train writes the full artifact set") {
    fs::path out = fresh_dir("train");
    ExperimentSpec spec = tiny_spec(Method::bidora, out);
    fs::path dir = cmd_train(spec, 7);
    REQUIRE(fs::exists(dir / "config.json"));
    REQUIRE(fs::exists(dir / "trajectory.jsonl"));
    REQUIRE(fs::exists(dir / "checkpoint.txt"));
    REQUIRE(fs::exists(dir / "metrics.json"));

    json config = json::parse(slurp(dir / "config.json"));
    REQUIRE(config["run_seed"] == 7);
    REQUIRE(config["method"] == "bidora");
    json metrics = json::parse(slurp(dir / "metrics.json"));
    REQUIRE(metrics["seed"] == 7);
    REQUIRE(metrics["test_metric"].get<double>() >= 0.0);
    REQUIRE(metrics["gap"].get<double>() ==
            metrics["train_metric_smoothed"].get<double>() -
                metrics["test_metric"].get<double>());
    fs::remove_all(out);
}

TEST_CASE("training runs are byte-identical across repeats") {
    fs::path out_a = fresh_dir("det_a");
    fs::path out_b = fresh_dir("det_b");
    fs::path dir_a = cmd_train(tiny_spec(Method::bidora, out_a), 11);
    fs::path dir_b = cmd_train(tiny_spec(Method::bidora, out_b), 11);
    REQUIRE(slurp(dir_a / "metrics.json") == slurp(dir_b / "metrics.json"));
    REQUIRE(slurp(dir_a / "trajectory.jsonl") ==
            slurp(dir_b / "trajectory.jsonl"));
    REQUIRE(slurp(dir_a / "checkpoint.txt") == slurp(dir_b / "checkpoint.txt"));
    fs::remove_all(out_a);
    fs::remove_all(out_b);
}

TEST_CASE("load_run reconstructs the trajectory faithfully") {
    fs::path out = fresh_dir("load");
    ExperimentSpec spec = tiny_spec(Method::bidora, out);
    fs::path dir = cmd_train(spec, 13);
    LoadedRun run = load_run(dir);
    REQUIRE_FALSE(run.log.empty());
    REQUIRE(run.layers.size() == spec.depth + 1);
    // Search records carry outer metrics; eval records carry WDA snapshots.
    bool saw_outer = false, saw_wda = false;
    for (const auto& rec : run.log) {
        saw_outer = saw_outer || rec.has_outer;
        saw_wda = saw_wda || !rec.wda.empty();
    }
    REQUIRE(saw_outer);
    REQUIRE(saw_wda);
    // Round-trip each record through json.
    for (const auto& rec : run.log) {
        TrajectoryRecord back =
            detail::record_from_json(detail::record_to_json(rec));
        REQUIRE(back.step == rec.step);
        REQUIRE(back.loss_tr == rec.loss_tr);
        REQUIRE(back.metric == rec.metric);
        REQUIRE(back.has_outer == rec.has_outer);
        REQUIRE(back.wda.size() == rec.wda.size());
    }
    REQUIRE_THROWS(load_run(out / "no_such_run"));
    fs::remove_all(out);
}

TEST_CASE("no_retrain runs leave no retrain records in the artifact") {
    fs::path out = fresh_dir("noretrain");
    ExperimentSpec spec = tiny_spec(Method::bidora, out);
    spec.cfg.mode = BilevelMode::no_retrain;
    LoadedRun run = load_run(cmd_train(spec, 17));
    for (const auto& rec : run.log) REQUIRE(rec.phase == "search");
    fs::remove_all(out);
}

TEST_CASE("gap_from_log blends inner and outer series only when present") {
    TrajectoryLog log;
    for (int i = 0; i < 10; ++i) {
        TrajectoryRecord r;
        r.metric = 0.9;
        r.outer_metric = 0.8;
        r.has_outer = true;
        log.push_back(r);
    }
    GapReport g = gap_from_log(log, Method::bidora, 0.5);
    REQUIRE_THAT(g.train_metric, Catch::Matchers::WithinAbs(0.88, 1e-12));
    for (auto& r : log) r.has_outer = false;
    GapReport s = gap_from_log(log, Method::dora, 0.5);
    REQUIRE_THAT(s.train_metric, Catch::Matchers::WithinAbs(0.9, 1e-12));
}

TEST_CASE("wda_points_from_log samples four checkpoints") {
    TrajectoryLog log;
    for (int i = 1; i <= 20; ++i) {
        TrajectoryRecord r;
        r.step = i;
        if (i % 5 == 0)
            r.wda.push_back({0, i, 0.1 * i, 0.01 * i});
        log.push_back(r);
    }
    auto points = wda_points_from_log(log);
    REQUIRE(points.size() == 4);
    REQUIRE(points[0].step == 5);
    REQUIRE(points[3].step == 20);
    REQUIRE(wda_points_from_log({}).empty());
}

TEST_CASE("partition sweep covers every ratio-seed pair") {
    fs::path out = fresh_dir("sweep");
    ExperimentSpec spec = tiny_spec(Method::bidora, out);
    spec.seeds = {1, 2};
    auto rows = cmd_sweep_partition(spec, {0.5, 1.0});
    REQUIRE(rows.size() == 4);
    REQUIRE(rows[0].ratio == 0.5);
    REQUIRE(rows[3].ratio == 1.0);
    std::stringstream ss;
    write_sweep_csv(ss, rows);
    REQUIRE(ss.str().rfind("ratio,seed,test_metric\n", 0) == 0);
    REQUIRE_THROWS_AS(cmd_sweep_partition(spec, {0.0}), std::invalid_argument);
    fs::remove_all(out);
}

TEST_CASE("analyze emits scatter, slopes, spectra, and gap tables") {
    fs::path out = fresh_dir("analyze");
    ExperimentSpec bidora_spec = tiny_spec(Method::bidora, out / "runs");
    ExperimentSpec dora_spec = tiny_spec(Method::dora, out / "runs");
    std::vector<fs::path> dirs;
    dirs.push_back(cmd_train(bidora_spec, 19));
    dirs.push_back(cmd_train(dora_spec, 19));
    AnalyzeOutput res = cmd_analyze(dirs, out / "analysis", 8);
    REQUIRE(res.wda_by_run.size() == 2);
    REQUIRE(res.gap_by_run.size() == 2);
    REQUIRE(res.spectra_by_run.size() == 2);
    for (const auto& [name, spectra] : res.spectra_by_run) {
        REQUIRE(spectra.size() == 2);  // depth 1 -> two adapter layers
        for (const auto& spec : spectra) {
            REQUIRE_FALSE(spec.empty());
            REQUIRE_THAT(spec.front(), Catch::Matchers::WithinAbs(1.0, 1e-12));
        }
    }
    REQUIRE(fs::exists(out / "analysis" / "wda_scatter.csv"));
    REQUIRE(fs::exists(out / "analysis" / "spectra.csv"));
    REQUIRE(fs::exists(out / "analysis" / "gap_report.csv"));
    REQUIRE(fs::exists(out / "analysis" / "wda_slope.csv"));
    REQUIRE(slurp(out / "analysis" / "wda_slope.csv")
                .find("ols_with_intercept_pooled") != std::string::npos);
    // One seed per method: too few pairs for a Wilcoxon test.
    REQUIRE_FALSE(res.wilcoxon.has_value());
    fs::remove_all(out);
}

TEST_CASE("compare requires matching seed lists") {
    ExperimentSpec a = tiny_spec(Method::bidora, "x");
    ExperimentSpec b = tiny_spec(Method::dora, "x");
    a.seeds = {1, 2};
    b.seeds = {1, 3};
    REQUIRE_THROWS_AS(cmd_compare(a, b), std::invalid_argument);
}

TEST_CASE("cli: oracle-check and an end-to-end train/analyze round trip") {
    const std::string cli = BIDORA_CLI_PATH;
    fs::path out = fresh_dir("cli");

    REQUIRE(std::system((cli + " oracle-check --seed 99 > " +
                         (out / "oracle.log").string())
                            .c_str()) == 0);
    const std::string oracle_log = slurp(out / "oracle.log");
    REQUIRE(oracle_log.find("PASS") != std::string::npos);
    REQUIRE(oracle_log.find("FAIL") == std::string::npos);

    ExperimentSpec spec = tiny_spec(Method::bidora, (out / "runs").string());
    {
        std::ofstream os(out / "config.json");
        os << spec_to_json(spec).dump(2) << '\n';
    }
    REQUIRE(std::system((cli + " train --config " +
                         (out / "config.json").string() +
                         " --seed 5 > /dev/null")
                            .c_str()) == 0);
    fs::path run_dir = out / "runs" / "bidora_seed5";
    REQUIRE(fs::exists(run_dir / "metrics.json"));

    REQUIRE(std::system((cli + " analyze " + run_dir.string() + " --out " +
                         (out / "analysis").string() + " > /dev/null")
                            .c_str()) == 0);
    REQUIRE(fs::exists(out / "analysis" / "gap_report.csv"));

    // Unknown config key surfaces as a nonzero exit.
    {
        std::ofstream os(out / "bad.json");
        json j = spec_to_json(spec);
        j["oops"] = 1;
        os << j.dump(2) << '\n';
    }
    REQUIRE(std::system((cli + " train --config " +
                         (out / "bad.json").string() + " 2> /dev/null")
                            .c_str()) != 0);
    fs::remove_all(out);
}
