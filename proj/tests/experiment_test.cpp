#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>

#include "kdlab/experiment.hpp"

namespace cfg = kdlab::config;
namespace xp = kdlab::expcli;
namespace metrics = kdlab::metrics;
namespace models = kdlab::models;
namespace fs = std::filesystem;

namespace {

// Points KDLAB_OUT_ROOT at a scratch directory for the duration of a test.
struct OutRootGuard {
    fs::path root;
    explicit OutRootGuard(const std::string& tag)
        : root(fs::temp_directory_path() / ("kdlab_exp_" + tag)) {
        fs::remove_all(root);
        fs::create_directories(root);
        setenv("KDLAB_OUT_ROOT", root.c_str(), 1);
    }
    ~OutRootGuard() {
        unsetenv("KDLAB_OUT_ROOT");
        fs::remove_all(root);
    }
};

cfg::DatasetConfig blob_data() {
    cfg::DatasetConfig d;
    d.kind = "blobs";
    d.classes = 3;
    d.train_per_class = 40;
    d.test_per_class = 40;
    d.dim = 8;
    d.separation = 5.0;
    d.seed = 5;
    return d;
}

cfg::ExperimentConfig teacher_config(const std::string& out_dir, uint64_t seed = 3) {
    cfg::ExperimentConfig c;
    c.kind = "train_teacher";
    c.seed = seed;
    c.out_dir = out_dir;
    c.dataset = blob_data();
    c.model = models::ModelSpec::mlp({8}, 3, {16});
    c.optimizer.lr = 0.05;
    c.schedule = {{}, 0.1, 30};
    c.batch_size = 32;
    return c;
}

TEST(Config, RoundTripsAllKindsLosslessly) {
    std::vector<cfg::ExperimentConfig> cases;
    cases.push_back(teacher_config("a"));
    {
        cfg::ExperimentConfig c = teacher_config("b");
        c.kind = "train_nasty";
        c.adversary_ckpt = "x/model.ckpt";
        c.nasty = {0.02, 4.0};
        c.init_from_adversary = true;
        cases.push_back(c);
    }
    {
        cfg::ExperimentConfig c = teacher_config("c");
        c.kind = "distill";
        c.model.reset();
        c.student = models::ModelSpec::mlp({8}, 3, {8});
        c.teacher_ckpt = "x/model.ckpt";
        c.kd = {0.9, 4.0};
        c.fraction = 0.5;
        c.baseline_acc = 0.77;
        cases.push_back(c);
        c.kind = "teacher_self";
        cases.push_back(c);
    }
    {
        cfg::ExperimentConfig c = teacher_config("d");
        c.kind = "datafree";
        c.model.reset();
        c.student = models::ModelSpec::mlp({8}, 3, {8});
        c.teacher_ckpt = "x/model.ckpt";
        c.inversion.samples_per_class = 4;
        c.inversion.steps = 5;
        c.inversion.tv_weight = 0.0;
        cases.push_back(c);
    }
    {
        cfg::ExperimentConfig c = teacher_config("e");
        c.kind = "sweep";
        c.student = models::ModelSpec::mlp({8}, 3, {8});
        c.sweep = cfg::SweepConfig{"omega", {0.0, 0.01}, {}, "", "n/model.ckpt"};
        cases.push_back(c);
    }
    for (const auto& c : cases) {
        const auto j = cfg::to_json(c);
        const auto back = cfg::from_json(j);
        EXPECT_EQ(cfg::to_json(back).dump(), j.dump()) << c.kind;
    }
}

TEST(Config, UnknownKeysRejectedEverywhere) {
    auto base = cfg::to_json(teacher_config("x"));
    {
        auto j = base;
        j["omegaa"] = 1;
        EXPECT_THROW(cfg::from_json(j), kdlab::ConfigError);
    }
    {
        auto j = base;
        j["dataset"]["sep"] = 2.0;
        EXPECT_THROW(cfg::from_json(j), kdlab::ConfigError);
    }
    {
        auto j = base;
        j["optimizer"]["learning_rate"] = 0.1;
        EXPECT_THROW(cfg::from_json(j), kdlab::ConfigError);
    }
    {
        auto j = base;
        j["schedule"]["milestone"] = 1;
        EXPECT_THROW(cfg::from_json(j), kdlab::ConfigError);
    }
}

TEST(Config, KindSpecificRequirementsEnforced) {
    {
        auto j = cfg::to_json(teacher_config("x"));
        j["kind"] = "make_tea";
        EXPECT_THROW(cfg::from_json(j), kdlab::ConfigError);
    }
    {
        auto j = cfg::to_json(teacher_config("x"));
        j.erase("model");
        EXPECT_THROW(cfg::from_json(j), kdlab::ConfigError);
    }
    {
        cfg::ExperimentConfig c = teacher_config("x");
        c.kind = "distill";  // missing student/teacher_ckpt
        EXPECT_THROW(cfg::validate(c), kdlab::ConfigError);
    }
}

TEST(Metrics, WriterReaderRoundTripAndMarker) {
    const fs::path path = fs::temp_directory_path() / "kdlab_metrics_rt.csv";
    {
        metrics::Writer w(path.string(), "run-x");
        w.row(1, "train", "loss", 0.125, 11.0);
        w.row(1, "test", "accuracy", 0.875, 11.0);
        w.row(2, "train", "loss", std::nan(""), 12.0);
    }
    const auto rows = metrics::read_file(path.string());
    ASSERT_EQ(rows.size(), 3u);
    EXPECT_EQ(rows[0].run_id, "run-x");
    EXPECT_EQ(rows[0].value, "0.125");
    EXPECT_EQ(rows[2].value, metrics::kDivergedMarker);
    fs::remove(path);
}

TEST(Metrics, ComparisonIgnoresWallClockOnly) {
    const fs::path a = fs::temp_directory_path() / "kdlab_metrics_a.csv";
    const fs::path b = fs::temp_directory_path() / "kdlab_metrics_b.csv";
    {
        metrics::Writer wa(a.string(), "r");
        wa.row(1, "train", "loss", 0.5, 100.0);
        metrics::Writer wb(b.string(), "r");
        wb.row(1, "train", "loss", 0.5, 999.0);
    }
    EXPECT_TRUE(metrics::equal_ignoring_wallclock(a.string(), b.string()));
    {
        metrics::Writer wb(b.string(), "r");
        wb.row(1, "train", "loss", 0.5001, 100.0);
    }
    EXPECT_FALSE(metrics::equal_ignoring_wallclock(a.string(), b.string()));
    fs::remove(a);
    fs::remove(b);
}

TEST(RunExperiment, TrainTeacherProducesThirtyEpochRowsAndArtifacts) {
    OutRootGuard guard("teacher");
    const auto res = xp::run_experiment(teacher_config("teacher_run"));
    EXPECT_TRUE(fs::exists(res.dir / "config.resolved.json"));
    EXPECT_TRUE(fs::exists(res.dir / "metrics.csv"));
    EXPECT_TRUE(fs::exists(res.dir / "model.ckpt"));

    const auto rows = metrics::read_file((res.dir / "metrics.csv").string());
    size_t loss_rows = 0;
    for (const auto& r : rows)
        if (r.split == "train" && r.metric == "loss") ++loss_rows;
    EXPECT_EQ(loss_rows, 30u);
    EXPECT_GE(metrics::summary_value(rows, "final_test_accuracy"), 0.95);

    const auto snapshot = cfg::json::parse(std::ifstream(res.dir / "config.resolved.json"));
    EXPECT_EQ(snapshot.at("code_version").template get<std::string>(), std::string(kdlab::kVersion));
    EXPECT_EQ(cfg::from_json(snapshot.at("config")).kind, "train_teacher");
}

TEST(RunExperiment, RerunReproducesMetricsModuloWallClock) {
    OutRootGuard guard("rerun");
    auto c1 = teacher_config("first");
    auto c2 = teacher_config("second");
    const auto r1 = xp::run_experiment(c1);
    const auto r2 = xp::run_experiment(c2);
    EXPECT_TRUE(metrics::equal_ignoring_wallclock((r1.dir / "metrics.csv").string(),
                                                  (r2.dir / "metrics.csv").string()));
}

TEST(RunExperiment, DistillPipelineOnBlobs) {
    OutRootGuard guard("distill");
    const auto teacher = xp::run_experiment(teacher_config("teacher"));

    cfg::ExperimentConfig d;
    d.kind = "distill";
    d.seed = 9;
    d.out_dir = "student";
    d.dataset = blob_data();
    d.student = models::ModelSpec::mlp({8}, 3, {8});
    d.teacher_ckpt = teacher.checkpoint.string();
    d.kd = {0.9, 4.0};
    d.optimizer.lr = 0.05;
    d.schedule = {{}, 0.1, 12};
    d.batch_size = 32;
    d.baseline_acc = 0.5;
    const auto res = xp::run_experiment(d);
    EXPECT_GE(res.final_test_acc, 0.9);
    const auto rows = metrics::read_file((res.dir / "metrics.csv").string());
    EXPECT_NEAR(metrics::summary_value(rows, "delta_vs_baseline"), res.final_test_acc - 0.5, 1e-12);
}

TEST(RunExperiment, SweepOmegaFansOutAndZeroMatchesNormal) {
    OutRootGuard guard("sweep");
    const auto teacher = xp::run_experiment(teacher_config("teacher", 3));

    cfg::ExperimentConfig s;
    s.kind = "sweep";
    s.seed = 3;  // same seed as the normal teacher: the omega=0 child replays it
    s.out_dir = "omega_sweep";
    s.dataset = blob_data();
    s.model = models::ModelSpec::mlp({8}, 3, {16});
    s.student = models::ModelSpec::mlp({8}, 3, {8});
    s.kd = {0.9, 4.0};
    s.nasty = {0.004, 4.0};
    s.optimizer.lr = 0.05;
    s.schedule = {{}, 0.1, 12};
    s.batch_size = 32;
    s.sweep = cfg::SweepConfig{"omega", {0.0, 0.05, 0.2}, {}, "", teacher.checkpoint.string()};
    const auto res = xp::run_experiment(s);

    // fan-out: one nasty + one from_nasty child per value, plus from_normal
    int child_dirs = 0;
    for (const auto& e : fs::directory_iterator(res.dir / "children")) ++child_dirs;
    EXPECT_EQ(child_dirs, 7);

    std::ifstream table(res.dir / "sweep_summary.csv");
    std::string header, row0;
    std::getline(table, header);
    EXPECT_EQ(header, xp::kSweepHeader);
    std::getline(table, row0);
    // omega = 0: nasty teacher accuracy equals the normal teacher's exactly
    std::stringstream ss(row0);
    std::vector<std::string> cols;
    std::string col;
    while (std::getline(ss, col, ',')) cols.push_back(col);
    ASSERT_EQ(cols.size(), 8u);
    EXPECT_EQ(cols[0], "omega");
    EXPECT_EQ(cols[2], cols[3]);  // normal_teacher_acc == nasty_teacher_acc at omega 0
    EXPECT_EQ(cols[7], "0");     // teacher delta exactly zero
}

TEST(DumpLogits, RowsSumsAndStatisticAgreeWithLiveModel) {
    OutRootGuard guard("dump");
    const auto teacher = xp::run_experiment(teacher_config("teacher"));
    const fs::path out = guard.root / "dump.csv";
    xp::dump_logits(teacher.checkpoint.string(), blob_data(), "test", 4.0, out.string());

    std::ifstream is(out);
    std::string line;
    std::getline(is, line);  // header
    size_t rows = 0;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        ++rows;
        std::stringstream ss(line);
        std::vector<std::string> cols;
        std::string col;
        while (std::getline(ss, col, ',')) cols.push_back(col);
        ASSERT_EQ(cols.size(), 1u + 3u + 3u + 16u);
        double psum = 0.0;
        for (int j = 0; j < 3; ++j) psum += std::stod(cols[1 + 3 + j]);
        ASSERT_NEAR(psum, 1.0, 1e-5);
    }
    EXPECT_EQ(rows, 3u * 40u);

    models::Model live = models::load(teacher.checkpoint.string());
    auto data = xp::materialize(blob_data());
    const double live_stat = kdlab::distill::multi_peak_statistic(live, data.test, 4.0, 0.1);
    EXPECT_NEAR(xp::multi_peak_from_dump(out.string(), 0.1), live_stat, 1e-6);
}

TEST(Materialize, ImageCorpusGoesThroughIdxCache) {
    OutRootGuard guard("idxcache");
    cfg::DatasetConfig d;
    d.kind = "synth_images";
    d.classes = 3;
    d.train_per_class = 4;
    d.test_per_class = 2;
    d.height = 14;
    d.width = 14;
    d.seed = 77;
    const auto splits = xp::materialize(d);
    EXPECT_EQ(splits.train.size(), 12u);
    EXPECT_EQ(splits.test.size(), 6u);
    // cache directory exists with the four idx files
    bool found = false;
    for (const auto& e : fs::recursive_directory_iterator(guard.root / "datasets"))
        if (e.path().filename() == "train-images.idx") found = true;
    EXPECT_TRUE(found);
    // second materialisation loads the same bytes
    const auto again = xp::materialize(d);
    EXPECT_EQ(again.train.checksum(), splits.train.checksum());
    EXPECT_EQ(again.test.checksum(), splits.test.checksum());
}

}  // namespace
