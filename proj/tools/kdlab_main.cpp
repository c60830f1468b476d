// Experiment runner CLI.
//
//   kdlab run <config.json>                 execute one experiment config
//   kdlab sweep <config.json> --axis A --values v1,v2,...
//                                           fan a base config out along one axis
//   kdlab dump-logits <ckpt> <dataset.json> --tau T --out FILE [--split test]
//                                           per-sample logits/probabilities/embeddings
//   kdlab accept [--criterion N] [--prepare]
//                                           run the acceptance suite
//
// Output root comes from KDLAB_OUT_ROOT (default ./runs); everything else
// lives in the config files.

#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "kdlab/acceptance.hpp"
#include "kdlab/experiment.hpp"

namespace {

std::vector<std::string> split_list(const std::string& csv) {
    std::vector<std::string> out;
    std::stringstream ss(csv);
    std::string item;
    while (std::getline(ss, item, ',')) {
        if (!item.empty()) out.push_back(item);
    }
    return out;
}

int run_config(const std::string& path) {
    const auto cfg = kdlab::config::parse_file(path);
    const auto res = kdlab::expcli::run_experiment(cfg);
    std::cout << res.run_id << ": done, artifacts in " << res.dir.string() << "\n";
    if (std::isfinite(res.final_test_acc))
        std::cout << "  final test accuracy " << res.final_test_acc << "\n";
    return 0;
}

int run_sweep(const std::string& path, const std::string& axis, const std::string& values_csv,
              const std::string& normal_ckpt, const std::string& nasty_ckpt) {
    auto cfg = kdlab::config::parse_file(path);
    cfg.kind = "sweep";
    kdlab::config::SweepConfig sw = cfg.sweep.value_or(kdlab::config::SweepConfig{});
    if (!axis.empty()) sw.axis = axis;
    if (!values_csv.empty()) {
        sw.values.clear();
        sw.arch_values.clear();
        for (const auto& v : split_list(values_csv)) {
            try {
                size_t used = 0;
                const double num = std::stod(v, &used);
                if (used == v.size())
                    sw.values.push_back(num);
                else
                    sw.arch_values.push_back(v);
            } catch (const std::exception&) {
                sw.arch_values.push_back(v);
            }
        }
        if (!sw.values.empty() && !sw.arch_values.empty())
            throw kdlab::ConfigError("sweep values must be all numeric or all architecture names");
    }
    if (!normal_ckpt.empty()) sw.normal_ckpt = normal_ckpt;
    if (!nasty_ckpt.empty()) sw.nasty_ckpt = nasty_ckpt;
    cfg.sweep = sw;
    const auto res = kdlab::expcli::run_experiment(cfg);
    std::cout << res.run_id << ": sweep done, summary in "
              << (res.dir / "sweep_summary.csv").string() << "\n";
    return 0;
}

int run_dump(const std::string& ckpt, const std::string& dataset_path, double tau,
             const std::string& out, const std::string& split) {
    std::ifstream is(dataset_path);
    if (!is) throw kdlab::ConfigError("cannot open dataset descriptor " + dataset_path);
    kdlab::config::json j;
    try {
        j = kdlab::config::json::parse(is);
    } catch (const nlohmann::json::exception& e) {
        throw kdlab::ConfigError("dataset descriptor parse error: " + std::string(e.what()));
    }
    // Accept either a bare dataset object or a full run config with a
    // "dataset" field.
    const auto dc = j.contains("dataset") ? kdlab::config::dataset_from_json(j.at("dataset"))
                                          : kdlab::config::dataset_from_json(j);
    kdlab::expcli::dump_logits(ckpt, dc, split, tau, out);
    std::cout << "wrote " << out << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"kdlab: desk-scale knowledge-distillation laboratory"};
    app.require_subcommand(1);

    std::string config_path, axis, values_csv, normal_ckpt, nasty_ckpt;
    std::string ckpt, dataset_path, out_path, split = "test";
    double tau = 4.0;
    int criterion = 0;
    bool prepare_only = false;

    auto* run_cmd = app.add_subcommand("run", "execute one experiment config");
    run_cmd->add_option("config", config_path, "config json")->required();

    auto* sweep_cmd = app.add_subcommand("sweep", "fan a base config out along one axis");
    sweep_cmd->add_option("config", config_path, "base config json")->required();
    sweep_cmd->add_option("--axis", axis, "omega|tau_s|alpha|fraction|adversary_arch|student_arch");
    sweep_cmd->add_option("--values", values_csv, "comma-separated axis values");
    sweep_cmd->add_option("--normal-ckpt", normal_ckpt, "normal teacher checkpoint");
    sweep_cmd->add_option("--nasty-ckpt", nasty_ckpt, "nasty teacher checkpoint");

    auto* dump_cmd = app.add_subcommand("dump-logits", "dump per-sample logit responses");
    dump_cmd->add_option("ckpt", ckpt, "model checkpoint")->required();
    dump_cmd->add_option("data", dataset_path, "dataset descriptor json")->required();
    dump_cmd->add_option("--tau", tau, "softmax temperature");
    dump_cmd->add_option("--out", out_path, "output csv")->required();
    dump_cmd->add_option("--split", split, "train|test");

    auto* accept_cmd = app.add_subcommand("accept", "run the acceptance suite");
    accept_cmd->add_option("--criterion", criterion, "run a single criterion (1-9)");
    accept_cmd->add_flag("--prepare", prepare_only, "train/caches all artifacts, no checks");

    CLI11_PARSE(app, argc, argv);

    try {
        if (*run_cmd) return run_config(config_path);
        if (*sweep_cmd) return run_sweep(config_path, axis, values_csv, normal_ckpt, nasty_ckpt);
        if (*dump_cmd) return run_dump(ckpt, dataset_path, tau, out_path, split);
        if (*accept_cmd) {
            if (prepare_only) {
                kdlab::acceptance::prepare(kdlab::acceptance::Options{});
                return 0;
            }
            return kdlab::acceptance::run_suite(criterion, kdlab::acceptance::Options{}) ? 0 : 1;
        }
    } catch (const kdlab::ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const kdlab::Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "unexpected error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
