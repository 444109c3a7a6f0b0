// SPDX-License-Identifier: Apache-2.0
//
// bidora: reproducible experiment front-end.
//   train            run one method on the synthetic task per seed
//   sweep-partition  test-metric vs train/val split ratio
//   analyze          WDA scatter + slopes, eigenspectra, gap and Wilcoxon
//   compare          paired two-method report over a shared seed list
//   oracle-check     hypergradient + gradient oracle battery

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "bidora/oracles.hpp"
#include "bidora/runner.hpp"

namespace {

bidora::ExperimentSpec load_spec(const std::string& config_path,
                                 const std::string& method,
                                 const std::string& mode,
                                 const std::string& out_dir,
                                 const std::vector<std::uint64_t>& seeds) {
    bidora::ExperimentSpec spec;
    if (!config_path.empty()) {
        std::ifstream is(config_path);
        if (!is) throw std::runtime_error("cannot open config " + config_path);
        spec = bidora::spec_from_json(bidora::json::parse(is));
    }
    if (!method.empty()) spec.method = bidora::method_from_string(method);
    if (!mode.empty()) spec.cfg.mode = bidora::bilevel_mode_from_string(mode);
    if (!out_dir.empty()) spec.out_dir = out_dir;
    if (!seeds.empty()) spec.seeds = seeds;
    return spec;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"BiDoRA desk-scale trainer and analysis toolkit"};
    app.require_subcommand(1);

    std::string config_path, method, mode, out_dir;
    std::vector<std::uint64_t> seeds;
    auto add_common = [&](CLI::App* cmd) {
        cmd->add_option("--config", config_path, "JSON experiment spec");
        cmd->add_option("--method", method, "ft|lora|dora|bidora");
        cmd->add_option("--mode", mode,
                        "full|no_retrain|xi_zero|no_reg|retrain_magnitude");
        cmd->add_option("--out", out_dir, "output directory");
        cmd->add_option("--seed", seeds, "seed list")->delimiter(',');
    };

    auto* train = app.add_subcommand("train", "run training per seed");
    add_common(train);

    auto* sweep = app.add_subcommand("sweep-partition",
                                     "test metric vs split ratio");
    add_common(sweep);
    std::vector<double> ratios{0.6, 0.7, 0.8, 0.9, 1.0};
    sweep->add_option("--ratios", ratios, "split ratios to sweep")
        ->delimiter(',');

    auto* analyze = app.add_subcommand("analyze", "analyze finished runs");
    std::vector<std::string> run_dirs;
    std::string analyze_out = "analysis";
    analyze->add_option("runs", run_dirs, "run directories")->required();
    analyze->add_option("--out", analyze_out, "analysis output directory");

    auto* compare = app.add_subcommand("compare",
                                       "paired report for two methods");
    std::string config_a, config_b;
    std::string compare_out;
    compare->add_option("--config-a", config_a, "spec for method A")
        ->required();
    compare->add_option("--config-b", config_b, "spec for method B")
        ->required();
    compare->add_option("--out", compare_out, "report file (default stdout)");
    compare->add_option("--seed", seeds, "shared seed list")->delimiter(',');

    auto* oracle = app.add_subcommand("oracle-check",
                                      "run the oracle battery");
    std::uint64_t oracle_seed = 1234;
    oracle->add_option("--seed", oracle_seed, "battery seed");

    CLI11_PARSE(app, argc, argv);

    try {
        if (*train) {
            auto spec = load_spec(config_path, method, mode, out_dir, seeds);
            for (std::uint64_t seed : spec.seeds) {
                auto dir = bidora::cmd_train(spec, seed);
                std::cout << "run written to " << dir.string() << '\n';
            }
        } else if (*sweep) {
            auto spec = load_spec(config_path, method, mode, out_dir, seeds);
            spec.method = bidora::Method::bidora;
            auto rows = bidora::cmd_sweep_partition(spec, ratios);
            std::filesystem::path dir =
                spec.out_dir.empty() ? "." : spec.out_dir;
            std::filesystem::create_directories(dir);
            std::ofstream os(dir / "partition_sweep.csv");
            bidora::write_sweep_csv(os, rows);
            bidora::write_sweep_csv(std::cout, rows);
        } else if (*analyze) {
            std::vector<std::filesystem::path> dirs(run_dirs.begin(),
                                                    run_dirs.end());
            auto out = bidora::cmd_analyze(dirs, analyze_out);
            for (const auto& [name, slope] : out.slope_by_run)
                std::cout << name << " wda_slope=" << slope << '\n';
            if (out.wilcoxon)
                std::cout << "wilcoxon p=" << out.wilcoxon->p_one_sided
                          << '\n';
            std::cout << "analysis written to " << analyze_out << '\n';
        } else if (*compare) {
            auto read_spec = [](const std::string& path) {
                std::ifstream is(path);
                if (!is)
                    throw std::runtime_error("cannot open config " + path);
                return bidora::spec_from_json(bidora::json::parse(is));
            };
            auto spec_a = read_spec(config_a);
            auto spec_b = read_spec(config_b);
            if (!seeds.empty()) {
                spec_a.seeds = seeds;
                spec_b.seeds = seeds;
            }
            auto res = bidora::cmd_compare(spec_a, spec_b);
            if (compare_out.empty()) {
                bidora::write_compare_report(std::cout, spec_a, spec_b, res);
            } else {
                std::ofstream os(compare_out);
                bidora::write_compare_report(os, spec_a, spec_b, res);
                std::cout << "report written to " << compare_out << '\n';
            }
        } else if (*oracle) {
            auto checks = bidora::run_oracle_checks(oracle_seed);
            bool all_pass = true;
            for (const auto& c : checks) {
                std::cout << (c.pass ? "PASS " : "FAIL ") << c.name
                          << " measured=" << c.measured
                          << " threshold=" << c.threshold << '\n';
                all_pass = all_pass && c.pass;
            }
            return all_pass ? 0 : 1;
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
    return 0;
}
