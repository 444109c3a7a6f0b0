// SPDX-License-Identifier: Apache-2.0
//
// Experiment front-end: spec parsing, run directories, the five operations
// behind the CLI subcommands, and machine-readable outputs.
#pragma once

#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "bidora/analysis.hpp"
#include "bidora/bilevel.hpp"
#include "bidora/tasks.hpp"

namespace bidora {

using json = nlohmann::ordered_json;
namespace fs = std::filesystem;

enum class Method { ft, lora, dora, bidora };

inline const char* to_string(Method m) {
    switch (m) {
        case Method::ft: return "ft";
        case Method::lora: return "lora";
        case Method::dora: return "dora";
        case Method::bidora: return "bidora";
    }
    return "bidora";
}

inline Method method_from_string(const std::string& s) {
    if (s == "ft") return Method::ft;
    if (s == "lora") return Method::lora;
    if (s == "dora") return Method::dora;
    if (s == "bidora") return Method::bidora;
    throw std::invalid_argument("unknown method: " + s);
}

struct TaskSpec {
    std::string kind = "cluster";  // "cluster" | "regression"
    std::size_t num_classes = 3;
    std::size_t d = 8;
    std::size_t n_pretrain = 2000;
    std::size_t n_target = 200;
    std::size_t n_test = 1000;
    double shift = 2.0;
    double noise = 0.1;
    double separation = 6.0;
    std::size_t teacher_width = 16;
};

struct ExperimentSpec {
    Method method = Method::bidora;
    BilevelConfig cfg;
    TaskSpec task;
    std::size_t rank = 4;
    double alpha = 8.0;
    std::size_t hidden = 64;
    std::size_t depth = 2;
    long pretrain_steps = 300;
    bool detach_norm = false;
    std::string out_dir = "runs";
    std::vector<std::uint64_t> seeds = {0};
};

// ---- spec <-> json -----------------------------------------------------------

namespace detail {

inline void reject_unknown_keys(const json& obj,
                                const std::set<std::string>& known,
                                const std::string& where) {
    for (auto it = obj.begin(); it != obj.end(); ++it)
        if (!known.count(it.key()))
            throw std::invalid_argument("unknown config key '" + it.key() +
                                        "' in " + where);
}

}  // namespace detail

inline json spec_to_json(const ExperimentSpec& s) {
    json j;
    j["method"] = to_string(s.method);
    j["mode"] = to_string(s.cfg.mode);
    j["rank"] = s.rank;
    j["alpha"] = s.alpha;
    j["hidden"] = s.hidden;
    j["depth"] = s.depth;
    j["pretrain_steps"] = s.pretrain_steps;
    j["detach_norm"] = s.detach_norm;
    j["out_dir"] = s.out_dir;
    j["seeds"] = s.seeds;
    json t;
    t["kind"] = s.task.kind;
    t["num_classes"] = s.task.num_classes;
    t["d"] = s.task.d;
    t["n_pretrain"] = s.task.n_pretrain;
    t["n_target"] = s.task.n_target;
    t["n_test"] = s.task.n_test;
    t["shift"] = s.task.shift;
    t["noise"] = s.task.noise;
    t["separation"] = s.task.separation;
    t["teacher_width"] = s.task.teacher_width;
    j["task"] = t;
    json c;
    c["xi"] = s.cfg.xi;
    c["eps0"] = s.cfg.eps0;
    c["gamma"] = s.cfg.gamma;
    c["upper_lr"] = s.cfg.upper_lr;
    c["lower_lr"] = s.cfg.lower_lr;
    c["retrain_lr"] = s.cfg.retrain_lr;
    c["upper_wd"] = s.cfg.upper_wd;
    c["lower_wd"] = s.cfg.lower_wd;
    c["split_ratio"] = s.cfg.split_ratio;
    c["search_steps"] = s.cfg.search_steps;
    c["retrain_steps"] = s.cfg.retrain_steps;
    c["eval_every"] = s.cfg.eval_every;
    c["patience"] = s.cfg.patience;
    c["batch_size"] = s.cfg.batch_size;
    c["warmup_ratio"] = s.cfg.warmup_ratio;
    c["plain_sgd"] = s.cfg.plain_sgd;
    c["retrain_from_scratch"] = s.cfg.retrain_from_scratch;
    j["optim"] = c;
    return j;
}

inline ExperimentSpec spec_from_json(const json& j) {
    ExperimentSpec s;
    detail::reject_unknown_keys(
        j,
        {"method", "mode", "rank", "alpha", "hidden", "depth",
         "pretrain_steps", "detach_norm", "out_dir", "seeds", "task", "optim"},
        "spec");
    if (j.contains("method")) s.method = method_from_string(j["method"]);
    if (j.contains("mode"))
        s.cfg.mode = bilevel_mode_from_string(j["mode"]);
    if (j.contains("rank")) s.rank = j["rank"];
    if (j.contains("alpha")) s.alpha = j["alpha"];
    if (j.contains("hidden")) s.hidden = j["hidden"];
    if (j.contains("depth")) s.depth = j["depth"];
    if (j.contains("pretrain_steps")) s.pretrain_steps = j["pretrain_steps"];
    if (j.contains("detach_norm")) s.detach_norm = j["detach_norm"];
    if (j.contains("out_dir")) s.out_dir = j["out_dir"];
    if (j.contains("seeds"))
        s.seeds = j["seeds"].get<std::vector<std::uint64_t>>();
    if (j.contains("task")) {
        const json& t = j["task"];
        detail::reject_unknown_keys(
            t,
            {"kind", "num_classes", "d", "n_pretrain", "n_target", "n_test",
             "shift", "noise", "separation", "teacher_width"},
            "task");
        if (t.contains("kind")) s.task.kind = t["kind"];
        if (t.contains("num_classes")) s.task.num_classes = t["num_classes"];
        if (t.contains("d")) s.task.d = t["d"];
        if (t.contains("n_pretrain")) s.task.n_pretrain = t["n_pretrain"];
        if (t.contains("n_target")) s.task.n_target = t["n_target"];
        if (t.contains("n_test")) s.task.n_test = t["n_test"];
        if (t.contains("shift")) s.task.shift = t["shift"];
        if (t.contains("noise")) s.task.noise = t["noise"];
        if (t.contains("separation")) s.task.separation = t["separation"];
        if (t.contains("teacher_width"))
            s.task.teacher_width = t["teacher_width"];
        if (s.task.kind != "cluster" && s.task.kind != "regression")
            throw std::invalid_argument("task.kind must be cluster|regression");
    }
    if (j.contains("optim")) {
        const json& c = j["optim"];
        detail::reject_unknown_keys(
            c,
            {"xi", "eps0", "gamma", "upper_lr", "lower_lr", "retrain_lr",
             "upper_wd", "lower_wd", "split_ratio", "search_steps",
             "retrain_steps", "eval_every", "patience", "batch_size",
             "warmup_ratio", "plain_sgd", "retrain_from_scratch"},
            "optim");
        bool retrain_lr_given = c.contains("retrain_lr");
        if (c.contains("xi")) s.cfg.xi = c["xi"];
        if (c.contains("eps0")) s.cfg.eps0 = c["eps0"];
        if (c.contains("gamma")) s.cfg.gamma = c["gamma"];
        if (c.contains("upper_lr")) s.cfg.upper_lr = c["upper_lr"];
        if (c.contains("lower_lr")) s.cfg.lower_lr = c["lower_lr"];
        if (retrain_lr_given) s.cfg.retrain_lr = c["retrain_lr"];
        if (c.contains("upper_wd")) s.cfg.upper_wd = c["upper_wd"];
        if (c.contains("lower_wd")) s.cfg.lower_wd = c["lower_wd"];
        if (c.contains("split_ratio")) s.cfg.split_ratio = c["split_ratio"];
        if (c.contains("search_steps")) s.cfg.search_steps = c["search_steps"];
        if (c.contains("retrain_steps"))
            s.cfg.retrain_steps = c["retrain_steps"];
        if (c.contains("eval_every")) s.cfg.eval_every = c["eval_every"];
        if (c.contains("patience")) s.cfg.patience = c["patience"];
        if (c.contains("batch_size")) s.cfg.batch_size = c["batch_size"];
        if (c.contains("warmup_ratio")) s.cfg.warmup_ratio = c["warmup_ratio"];
        if (c.contains("plain_sgd")) s.cfg.plain_sgd = c["plain_sgd"];
        if (c.contains("retrain_from_scratch"))
            s.cfg.retrain_from_scratch = c["retrain_from_scratch"];
        if (!retrain_lr_given) s.cfg.retrain_lr = s.cfg.lower_lr;
    }
    return s;
}

// ---- one experiment run ------------------------------------------------------

struct RunResult {
    TrajectoryLog log;
    GapReport gap;
    MetricRecord test;
    std::vector<AdapterLayer> layers;
    json metrics;
    fs::path dir;
};

namespace detail {

struct BuiltTask {
    Dataset pretrain;
    Dataset target;
    Dataset test;
    TaskKind kind;
};

inline BuiltTask build_task(const TaskSpec& t, std::uint64_t seed) {
    BuiltTask built;
    if (t.kind == "cluster") {
        ClusterTask task = make_cluster_task(t.num_classes, t.d, t.n_pretrain,
                                             t.n_target, t.shift, t.noise,
                                             seed, t.separation, t.n_test);
        built.pretrain = std::move(task.pretrain);
        built.target = std::move(task.target);
        built.test = std::move(task.test);
        built.kind = TaskKind::classification;
    } else {
        RegressionTask task = make_teacher_regression(
            t.d, t.teacher_width, t.n_target, t.noise, seed, t.n_test);
        // A larger clean draw from the same teacher stands in for the
        // upstream pretraining corpus.
        std::mt19937_64 rng(seed ^ 0x9e3779b97f4a7c15ULL);
        Dataset pre;
        pre.kind = TaskKind::regression;
        pre.seed = seed;
        pre.inputs = random_normal(t.n_pretrain, t.d, 0.0, 1.0, rng);
        pre.targets = task.teacher.predict(pre.inputs).detach();
        built.pretrain = std::move(pre);
        built.target = std::move(task.target);
        built.test = std::move(task.test);
        built.kind = TaskKind::regression;
    }
    return built;
}

// Dense full fine-tuning baseline: all weights train on all target data.
inline TrajectoryLog ft_train(std::vector<Tensor>& weights, TaskKind kind,
                              const Dataset& train, const BilevelConfig& cfg) {
    for (auto& w : weights) w.set_requires_grad(true);
    std::vector<Tensor> init;
    for (const auto& w : weights) init.push_back(w.detach());
    AdamW opt({.lr = cfg.lower_lr, .weight_decay = cfg.lower_wd});
    BatchSampler sampler(train, cfg.batch_size, cfg.seed * 7919 + 1);
    auto forward = [&](const Tensor& x) {
        Tensor h = x;
        for (std::size_t i = 0; i < weights.size(); ++i) {
            h = matmul(h, weights[i]);
            if (i + 1 < weights.size()) h = relu(h);
        }
        return h;
    };
    TrajectoryLog log;
    for (long step = 1; step <= cfg.search_steps; ++step) {
        Dataset batch = sampler.next();
        for (auto& w : weights) w.zero_grad();
        Tensor out = forward(batch.inputs);
        Tensor loss = kind == TaskKind::classification
                          ? softmax_cross_entropy(out, batch.labels)
                          : mse(out, batch.targets);
        const double value = loss.item();
        if (!std::isfinite(value)) throw NumericError("ft_train: loss");
        loss.backward();
        opt.step(weights,
                 linear_warmup_scale(step, cfg.search_steps, cfg.warmup_ratio));
        TrajectoryRecord rec;
        rec.step = step;
        rec.phase = "search";
        rec.loss_tr = value;
        // Batch metric.
        Tensor pred = forward(batch.inputs).detach();
        if (kind == TaskKind::classification) {
            std::size_t correct = 0;
            for (std::size_t i = 0; i < batch.size(); ++i) {
                std::size_t best = 0;
                for (std::size_t j = 1; j < pred.cols(); ++j)
                    if (pred(i, j) > pred(i, best)) best = j;
                if (static_cast<int>(best) == batch.labels[i]) ++correct;
            }
            rec.metric = static_cast<double>(correct) /
                         static_cast<double>(batch.size());
        } else {
            rec.metric = -mse(pred, batch.targets).item();
        }
        if (step % cfg.eval_every == 0 || step == cfg.search_steps) {
            rec.has_eval = true;
            for (std::size_t i = 0; i < weights.size(); ++i)
                rec.wda.push_back({i, step,
                                   delta_magnitude(init[i], weights[i]),
                                   delta_direction(init[i], weights[i])});
        }
        log.push_back(rec);
    }
    return log;
}

inline json record_to_json(const TrajectoryRecord& r) {
    json j;
    j["step"] = r.step;
    j["phase"] = r.phase;
    j["loss_tr"] = r.loss_tr;
    j["loss_val"] = r.loss_val;
    j["reg_value"] = r.reg_value;
    j["metric"] = r.metric;
    if (r.has_outer) j["outer_metric"] = r.outer_metric;
    if (r.has_eval) j["val_metric"] = r.val_metric;
    if (!r.wda.empty()) {
        json w = json::array();
        for (const auto& p : r.wda)
            w.push_back({{"layer", p.layer},
                         {"step", p.step},
                         {"delta_m", p.delta_m},
                         {"delta_d", p.delta_d}});
        j["wda"] = w;
    }
    return j;
}

inline TrajectoryRecord record_from_json(const json& j) {
    TrajectoryRecord r;
    r.step = j["step"];
    r.phase = j["phase"];
    r.loss_tr = j["loss_tr"];
    r.loss_val = j["loss_val"];
    r.reg_value = j["reg_value"];
    r.metric = j["metric"];
    if (j.contains("outer_metric")) {
        r.outer_metric = j["outer_metric"];
        r.has_outer = true;
    }
    if (j.contains("val_metric")) {
        r.val_metric = j["val_metric"];
        r.has_eval = true;
    }
    if (j.contains("wda"))
        for (const auto& p : j["wda"])
            r.wda.push_back(
                {p["layer"], p["step"], p["delta_m"], p["delta_d"]});
    return r;
}

}  // namespace detail

// Smoothed train metric vs test metric. Bi-level runs mix the two loops'
// per-batch series 0.8/0.2; single-loop runs use the one series they have.
inline GapReport gap_from_log(const TrajectoryLog& log, Method /*method*/,
                              double test_metric) {
    std::vector<double> inner, outer;
    for (const auto& r : log) {
        inner.push_back(r.metric);
        if (r.has_outer) outer.push_back(r.outer_metric);
    }
    return gap_report(inner, outer, test_metric);
}

inline RunResult run_experiment(const ExperimentSpec& spec,
                                std::uint64_t seed) {
    detail::BuiltTask task = detail::build_task(spec.task, seed);
    const std::size_t out_units =
        task.kind == TaskKind::classification ? spec.task.num_classes : 1;
    ModelShape shape =
        default_model_shape(spec.task.d, out_units, spec.hidden, spec.depth);
    std::vector<Tensor> base = pretrain_base(shape, task.pretrain,
                                             spec.pretrain_steps, seed);

    BilevelConfig cfg = spec.cfg;
    cfg.seed = seed;
    cfg.validate();

    RunResult result;
    if (spec.method == Method::ft) {
        std::vector<Tensor> weights;
        for (const auto& w : base) {
            Tensor c = w.detach();
            c.set_requires_grad(true);
            weights.push_back(c);
        }
        result.log = detail::ft_train(weights, task.kind, task.target, cfg);
        // Persist the trained dense weights as frozen lora-mode layers.
        AdapterModel snapshot;
        snapshot.kind = task.kind;
        std::mt19937_64 rng(seed);
        for (const auto& w : weights)
            snapshot.layers.push_back(
                make_adapter(w, 1, 1.0, AdapterMode::lora, rng));
        result.test = evaluate(snapshot, task.test);
        result.layers = snapshot.layers;
    } else {
        const AdapterMode mode = spec.method == Method::lora
                                     ? AdapterMode::lora
                                     : AdapterMode::dora;
        AdapterModel model = make_adapter_model(base, task.kind, spec.rank,
                                                spec.alpha, mode, seed,
                                                spec.detach_norm);
        if (spec.method == Method::bidora) {
            BilevelTrainer trainer(model, cfg);
            if (cfg.split_ratio >= 1.0) {
                // Upper level starved: all data to the lower level.
                SplitPair pair;
                pair.train = task.target;
                pair.val = Dataset{};
                pair.val.kind = task.kind;
                pair.ratio = 1.0;
                pair.seed = seed;
                trainer.search_phase(pair.train, pair.val, &task.test);
                if (cfg.mode != BilevelMode::no_retrain)
                    trainer.retrain_phase(pair.train, &task.test);
            } else {
                SplitPair pair = split(task.target, cfg.split_ratio, seed);
                trainer.run(pair, &task.test);
            }
            result.log = trainer.log();
        } else {
            result.log = single_loop_train(model, task.target, cfg);
        }
        result.test = evaluate(model, task.test);
        result.layers = model.layers;
    }

    const double test_metric = task.kind == TaskKind::classification
                                   ? result.test.metric
                                   : -result.test.metric;
    result.gap = gap_from_log(result.log, spec.method, test_metric);

    json m;
    m["method"] = to_string(spec.method);
    m["mode"] = to_string(cfg.mode);
    m["seed"] = seed;
    m["task_kind"] = spec.task.kind;
    m["test_metric"] = result.test.metric;
    m["test_loss"] = result.test.loss;
    m["train_metric_smoothed"] = result.gap.train_metric;
    m["gap"] = result.gap.gap;
    m["inner_weight"] = result.gap.inner_weight;
    m["outer_weight"] = result.gap.outer_weight;
    m["steps_logged"] = result.log.size();
    result.metrics = m;
    return result;
}

// Executes a run and writes config echo, trajectory log, checkpoint, and
// final metrics into <out_dir>/<method>_seed<seed>/.
inline fs::path cmd_train(const ExperimentSpec& spec, std::uint64_t seed) {
    RunResult result = run_experiment(spec, seed);
    fs::path dir = fs::path(spec.out_dir) /
                   (std::string(to_string(spec.method)) + "_seed" +
                    std::to_string(seed));
    fs::create_directories(dir);
    {
        std::ofstream os(dir / "config.json");
        json echo = spec_to_json(spec);
        echo["run_seed"] = seed;
        os << echo.dump(2) << '\n';
    }
    {
        std::ofstream os(dir / "trajectory.jsonl");
        for (const auto& r : result.log)
            os << detail::record_to_json(r).dump() << '\n';
    }
    save_layers_file((dir / "checkpoint.txt").string(), result.layers);
    {
        std::ofstream os(dir / "metrics.json");
        os << result.metrics.dump(2) << '\n';
    }
    return dir;
}

// ---- sweep -------------------------------------------------------------------

struct SweepRow {
    double ratio;
    std::uint64_t seed;
    double test_metric;
};

inline std::vector<SweepRow> cmd_sweep_partition(
    const ExperimentSpec& base_spec, const std::vector<double>& ratios) {
    std::vector<SweepRow> rows;
    for (double ratio : ratios) {
        if (!(ratio > 0.0 && ratio <= 1.0))
            throw std::invalid_argument("sweep ratios must lie in (0, 1]");
        ExperimentSpec spec = base_spec;
        spec.cfg.split_ratio = ratio;
        for (std::uint64_t seed : base_spec.seeds) {
            RunResult r = run_experiment(spec, seed);
            rows.push_back({ratio, seed, r.test.metric});
        }
    }
    return rows;
}

inline void write_sweep_csv(std::ostream& os,
                            const std::vector<SweepRow>& rows) {
    os << "ratio,seed,test_metric\n";
    for (const auto& r : rows)
        os << r.ratio << ',' << r.seed << ',' << r.test_metric << '\n';
}

// ---- analyze -----------------------------------------------------------------

struct LoadedRun {
    fs::path dir;
    json config;
    json metrics;
    TrajectoryLog log;
    std::vector<AdapterLayer> layers;
};

inline LoadedRun load_run(const fs::path& dir) {
    LoadedRun run;
    run.dir = dir;
    auto read_json = [](const fs::path& p) {
        std::ifstream is(p);
        if (!is) throw std::runtime_error("missing artifact: " + p.string());
        return json::parse(is);
    };
    run.config = read_json(dir / "config.json");
    run.metrics = read_json(dir / "metrics.json");
    std::ifstream traj(dir / "trajectory.jsonl");
    if (!traj)
        throw std::runtime_error("missing artifact: trajectory.jsonl in " +
                                 dir.string());
    std::string line;
    while (std::getline(traj, line))
        if (!line.empty())
            run.log.push_back(detail::record_from_json(json::parse(line)));
    run.layers = load_layers_file((dir / "checkpoint.txt").string());
    return run;
}

// WDA snapshots at roughly 25/50/75/100% of training, pooled across layers.
inline std::vector<WdaPoint> wda_points_from_log(const TrajectoryLog& log) {
    std::vector<const TrajectoryRecord*> evals;
    for (const auto& r : log)
        if (!r.wda.empty()) evals.push_back(&r);
    std::vector<WdaPoint> points;
    if (evals.empty()) return points;
    for (double frac : {0.25, 0.5, 0.75, 1.0}) {
        std::size_t idx = static_cast<std::size_t>(
            std::llround(frac * static_cast<double>(evals.size()))) ;
        idx = std::min(std::max<std::size_t>(idx, 1), evals.size()) - 1;
        for (const auto& p : evals[idx]->wda) points.push_back(p);
    }
    return points;
}

struct AnalyzeOutput {
    std::map<std::string, std::vector<WdaPoint>> wda_by_run;
    std::map<std::string, double> slope_by_run;
    std::map<std::string, std::vector<std::vector<double>>> spectra_by_run;
    std::map<std::string, GapReport> gap_by_run;
    std::optional<WilcoxonResult> wilcoxon;  // when exactly two method groups
};

inline AnalyzeOutput cmd_analyze(const std::vector<fs::path>& run_dirs,
                                 const fs::path& out_dir,
                                 std::size_t spectrum_top_n = 64) {
    fs::create_directories(out_dir);
    AnalyzeOutput out;
    std::map<std::string, std::map<std::uint64_t, double>> metric_by_method;
    std::ofstream scatter(out_dir / "wda_scatter.csv");
    scatter << "run,layer,step,delta_d,delta_m\n";
    std::ofstream spectra(out_dir / "spectra.csv");
    spectra << "run,layer,rank_index,value\n";
    std::ofstream gaps(out_dir / "gap_report.csv");
    gaps << "run,method,seed,train_metric_smoothed,test_metric,gap\n";

    for (const auto& dir : run_dirs) {
        LoadedRun run = load_run(dir);
        const std::string name = dir.filename().string();
        const std::string method = run.metrics["method"];
        const std::uint64_t seed = run.metrics["seed"];
        metric_by_method[method][seed] = run.metrics["test_metric"];

        auto points = wda_points_from_log(run.log);
        out.wda_by_run[name] = points;
        for (const auto& p : points)
            scatter << name << ',' << p.layer << ',' << p.step << ','
                    << p.delta_d << ',' << p.delta_m << '\n';
        if (points.size() >= 2) {
            try {
                out.slope_by_run[name] = correlation_slope(points);
            } catch (const std::invalid_argument&) {
                // Degenerate scatter (e.g. step-0 identity run): no slope.
            }
        }

        std::vector<std::vector<double>> run_spectra;
        for (std::size_t i = 0; i < run.layers.size(); ++i) {
            Tensor dir_mat = run.layers[i].mode == AdapterMode::dora
                                 ? direction_matrix(run.layers[i]).detach()
                                 : merge_weights(run.layers[i]);
            auto spec = eigenspectrum(dir_mat, spectrum_top_n);
            for (std::size_t r = 0; r < spec.size(); ++r)
                spectra << name << ',' << i << ',' << r << ',' << spec[r]
                        << '\n';
            run_spectra.push_back(std::move(spec));
        }
        out.spectra_by_run[name] = std::move(run_spectra);

        GapReport gap;
        gap.train_metric = run.metrics["train_metric_smoothed"];
        gap.test_metric = run.metrics["test_metric"];
        gap.gap = run.metrics["gap"];
        out.gap_by_run[name] = gap;
        gaps << name << ',' << method << ',' << seed << ','
             << gap.train_metric << ',' << gap.test_metric << ',' << gap.gap
             << '\n';
    }

    // Slope metadata: points are pooled across layers, OLS with intercept.
    {
        std::ofstream slopes(out_dir / "wda_slope.csv");
        slopes << "run,slope,fit\n";
        for (const auto& [name, slope] : out.slope_by_run)
            slopes << name << ',' << slope << ",ols_with_intercept_pooled\n";
    }

    std::string name_a, name_b;
    if (metric_by_method.size() == 2) {
        auto it = metric_by_method.begin();
        const auto& ma = it->second;
        name_a = it->first;
        ++it;
        const auto& mb = it->second;
        name_b = it->first;
        std::vector<double> a, b;
        for (const auto& [seed, v] : ma) {
            auto found = mb.find(seed);
            if (found != mb.end()) {
                a.push_back(v);
                b.push_back(found->second);
            }
        }
        try {
            out.wilcoxon = wilcoxon_signed_rank(a, b);
        } catch (const std::invalid_argument&) {
            // Too few paired seeds (or identical metrics): no test to report.
        }
    }
    if (out.wilcoxon) {
        std::ofstream w(out_dir / "wilcoxon.json");
        json jw;
        jw["method_a"] = name_a;
        jw["method_b"] = name_b;
        jw["n"] = out.wilcoxon->n;
        jw["statistic"] = out.wilcoxon->statistic;
        jw["p_one_sided"] = out.wilcoxon->p_one_sided;
        jw["exact"] = out.wilcoxon->exact;
        w << jw.dump(2) << '\n';
    }
    return out;
}

// ---- compare -----------------------------------------------------------------

struct CompareResult {
    std::vector<std::uint64_t> seeds;
    std::vector<double> gap_a, gap_b;
    std::vector<double> metric_a, metric_b;
    double mean_gap_a = 0.0, mean_gap_b = 0.0;
    WilcoxonResult wilcoxon;  // one-sided: gaps of b exceed gaps of a
};

// Runs both specs over the shared seed list and pairs the per-seed
// overfitting gaps. Both specs must agree on task and seeds.
inline CompareResult cmd_compare(const ExperimentSpec& spec_a,
                                 const ExperimentSpec& spec_b) {
    if (spec_a.seeds != spec_b.seeds)
        throw std::invalid_argument("compare: seed lists differ");
    CompareResult res;
    res.seeds = spec_a.seeds;
    for (std::uint64_t seed : res.seeds) {
        RunResult ra = run_experiment(spec_a, seed);
        RunResult rb = run_experiment(spec_b, seed);
        res.gap_a.push_back(ra.gap.gap);
        res.gap_b.push_back(rb.gap.gap);
        res.metric_a.push_back(ra.test.metric);
        res.metric_b.push_back(rb.test.metric);
        res.mean_gap_a += ra.gap.gap;
        res.mean_gap_b += rb.gap.gap;
    }
    res.mean_gap_a /= static_cast<double>(res.seeds.size());
    res.mean_gap_b /= static_cast<double>(res.seeds.size());
    res.wilcoxon = wilcoxon_signed_rank(res.gap_b, res.gap_a);
    return res;
}

inline void write_compare_report(std::ostream& os, const ExperimentSpec& a,
                                 const ExperimentSpec& b,
                                 const CompareResult& res) {
    json j;
    j["method_a"] = to_string(a.method);
    j["method_b"] = to_string(b.method);
    json rows = json::array();
    for (std::size_t i = 0; i < res.seeds.size(); ++i)
        rows.push_back({{"seed", res.seeds[i]},
                        {"gap_a", res.gap_a[i]},
                        {"gap_b", res.gap_b[i]},
                        {"metric_a", res.metric_a[i]},
                        {"metric_b", res.metric_b[i]}});
    j["rows"] = rows;
    j["mean_gap_a"] = res.mean_gap_a;
    j["mean_gap_b"] = res.mean_gap_b;
    j["wilcoxon_p_one_sided"] = res.wilcoxon.p_one_sided;
    j["wilcoxon_statistic"] = res.wilcoxon.statistic;
    os << j.dump(2) << '\n';
}

}  // namespace bidora
