#pragma once

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "kdlab/config.hpp"
#include "kdlab/datafree.hpp"
#include "kdlab/datasets.hpp"
#include "kdlab/distill.hpp"
#include "kdlab/metrics.hpp"
#include "kdlab/version.hpp"

// Experiment execution: resolves a declarative config into artifacts on disk.
// Every run directory is self-describing — resolved config snapshot (with the
// code-version stamp and seed), metrics file, checkpoints — and deterministic
// given the config, so rerunning a config reproduces the metrics file exactly
// up to wall-clock times.

namespace kdlab::expcli {

namespace fs = std::filesystem;

// Multi-peak reporting defaults: the self-undermining temperature and the
// threshold used throughout the qualitative analysis.
inline constexpr double kMultiPeakTau = 4.0;
inline constexpr double kMultiPeakThreshold = 0.1;

inline fs::path out_root() {
    const char* env = std::getenv("KDLAB_OUT_ROOT");
    return (env && *env) ? fs::path(env) : fs::path("runs");
}

inline fs::path resolve_path(const std::string& p) {
    fs::path path(p);
    return path.is_absolute() ? path : out_root() / path;
}

inline std::string hash_hex(uint64_t h) {
    char buf[20];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

// --- dataset materialisation -------------------------------------------------

struct DataSplits {
    datasets::Dataset train, test;
};

// Stroke-image corpora are written once as IDX files under
// <out_root>/datasets/<hash>/ and loaded back through the parser, so every
// run exercises the same ingestion path real files would.
inline DataSplits materialize(const config::DatasetConfig& dc) {
    DataSplits out;
    if (dc.kind == "blobs") {
        out.train = datasets::synth_blobs(dc.classes, dc.train_per_class, dc.dim, dc.separation,
                                          dc.seed, "train");
        out.test = datasets::synth_blobs(dc.classes, dc.test_per_class, dc.dim, dc.separation,
                                         dc.seed, "test");
    } else if (dc.kind == "synth_images") {
        datasets::ImageCorpusSpec spec;
        spec.classes = dc.classes;
        spec.height = dc.height;
        spec.width = dc.width;
        spec.noise = dc.noise;
        spec.jitter = dc.jitter;
        spec.max_rotate = dc.max_rotate;
        spec.max_shift = dc.max_shift;
        spec.distractor_prob = dc.distractor_prob;
        spec.seed = dc.seed;

        auto key = config::to_json(dc);
        key.erase("normalize");
        const fs::path dir = out_root() / "datasets" / hash_hex(fnv1a(key.dump()));
        const fs::path train_images = dir / "train-images.idx", train_labels = dir / "train-labels.idx";
        const fs::path test_images = dir / "test-images.idx", test_labels = dir / "test-labels.idx";
        if (!fs::exists(train_images) || !fs::exists(test_images)) {
            fs::create_directories(dir);
            spec.per_class = dc.train_per_class;
            datasets::save_idx(datasets::synth_images(spec, "train"), train_images.string(),
                               train_labels.string());
            spec.per_class = dc.test_per_class;
            datasets::save_idx(datasets::synth_images(spec, "test"), test_images.string(),
                               test_labels.string());
        }
        out.train = datasets::load_idx(train_images.string(), train_labels.string(), "train");
        out.test = datasets::load_idx(test_images.string(), test_labels.string(), "test");
    } else if (dc.kind == "idx") {
        if (dc.test_images.empty() || dc.test_labels.empty())
            throw ConfigError("idx dataset needs test_images and test_labels paths");
        out.train = datasets::load_idx(dc.train_images, dc.train_labels, "train");
        out.test = datasets::load_idx(dc.test_images, dc.test_labels, "test");
    } else {
        throw ConfigError("unknown dataset kind '" + dc.kind + "'");
    }
    if (dc.normalize) datasets::normalize(out.train, &out.test);
    return out;
}

// --- run execution -------------------------------------------------------------

struct RunResult {
    fs::path dir;
    std::string run_id;
    optim::TrainReport report;
    double final_test_acc = std::numeric_limits<double>::quiet_NaN();
    std::optional<double> reference_test_acc;  // adversary / normal-teacher accuracy
    std::optional<double> delta_vs_baseline;
    double multi_peak = std::numeric_limits<double>::quiet_NaN();
    fs::path checkpoint;
};

namespace detail {

inline void write_epoch_rows(metrics::Writer& w, const optim::TrainReport& report) {
    for (const auto& e : report.epochs) {
        w.row(e.epoch, "train", "loss", e.train_loss, e.wall_ms);
        w.row(e.epoch, "train", "accuracy", e.train_acc, e.wall_ms);
        w.row(e.epoch, "train", "lr", e.lr, e.wall_ms);
        if (std::isfinite(e.test_acc)) w.row(e.epoch, "test", "accuracy", e.test_acc, e.wall_ms);
    }
}

inline void write_summary_rows(metrics::Writer& w, const optim::TrainReport& report, int total_epochs,
                               double final_test_acc) {
    w.row(total_epochs, "summary", "final_test_accuracy", final_test_acc);
    w.row(total_epochs, "summary", "final_train_accuracy", report.final_train_acc());
    w.row(total_epochs, "summary", "diverged", report.diverged ? 1.0 : 0.0);
    w.row(total_epochs, "summary", "max_abs_logit", report.max_abs_logit);
}

inline void write_snapshot(const config::ExperimentConfig& cfg, const fs::path& dir,
                           const std::string& run_id) {
    config::json j;
    j["code_version"] = kVersion;
    j["run_id"] = run_id;
    j["config"] = config::to_json(cfg);
    std::ofstream os(dir / "config.resolved.json");
    os << j.dump(2) << "\n";
}

inline optim::TrainOptions train_options(const config::ExperimentConfig& cfg,
                                         const datasets::Dataset* test) {
    optim::TrainOptions opts;
    opts.batch_size = cfg.batch_size;
    opts.eval_data = test;
    return opts;
}
}  // namespace detail

inline RunResult run_experiment(const config::ExperimentConfig& cfg);

namespace detail {

inline RunResult run_train_teacher(const config::ExperimentConfig& cfg, const fs::path& dir,
                                   metrics::Writer& w, DataSplits& data) {
    RunResult res;
    models::Model m = models::build(*cfg.model, cfg.seed);
    const optim::Objective xe = [](const Tensor& logits, const std::vector<int>& labels,
                                   const std::vector<size_t>&) {
        return objectives::cross_entropy(logits, labels);
    };
    res.report = optim::train(m, data.train, xe, cfg.optimizer, cfg.schedule, cfg.seed,
                              train_options(cfg, &data.test));
    res.final_test_acc = optim::evaluate(m, data.test).accuracy;
    res.multi_peak = distill::multi_peak_statistic(m, data.test, kMultiPeakTau, kMultiPeakThreshold);
    write_epoch_rows(w, res.report);
    write_summary_rows(w, res.report, cfg.schedule.total_epochs, res.final_test_acc);
    w.row(cfg.schedule.total_epochs, "summary", "multi_peak_statistic", res.multi_peak);
    res.checkpoint = dir / "model.ckpt";
    models::save(m, res.checkpoint.string());
    return res;
}

inline RunResult run_train_nasty(const config::ExperimentConfig& cfg, const fs::path& dir,
                                 metrics::Writer& w, DataSplits& data) {
    RunResult res;
    models::Model adversary = models::load(resolve_path(cfg.adversary_ckpt).string());
    distill::NastyRun run;
    run.teacher_spec = *cfg.model;
    run.nasty = cfg.nasty;
    run.seed = cfg.seed;
    run.init_from_adversary = cfg.init_from_adversary;
    auto out = distill::train_nasty_teacher(adversary, run, data.train, &data.test, cfg.optimizer,
                                            cfg.schedule, train_options(cfg, &data.test));
    res.report = std::move(out.report);
    res.final_test_acc = out.final_test_acc;
    res.reference_test_acc = out.reference_test_acc;
    res.multi_peak =
        distill::multi_peak_statistic(out.model, data.test, kMultiPeakTau, kMultiPeakThreshold);
    write_epoch_rows(w, res.report);
    write_summary_rows(w, res.report, cfg.schedule.total_epochs, res.final_test_acc);
    w.row(cfg.schedule.total_epochs, "summary", "reference_test_accuracy", *res.reference_test_acc);
    w.row(cfg.schedule.total_epochs, "summary", "teacher_minus_reference",
          res.final_test_acc - *res.reference_test_acc);
    w.row(cfg.schedule.total_epochs, "summary", "multi_peak_statistic", res.multi_peak);
    res.checkpoint = dir / "model.ckpt";
    models::save(out.model, res.checkpoint.string());
    return res;
}

inline RunResult run_distill(const config::ExperimentConfig& cfg, const fs::path& dir,
                             metrics::Writer& w, DataSplits& data) {
    RunResult res;
    models::Model teacher = models::load(resolve_path(cfg.teacher_ckpt).string());
    distill::DistillRun run;
    run.student_spec = *cfg.student;
    run.kd = cfg.kd;
    run.fraction = cfg.fraction;
    run.seed = cfg.seed;
    run.baseline_acc = cfg.baseline_acc;
    auto out = (cfg.kind == "teacher_self")
                   ? distill::teacher_self(teacher, run, data.train, &data.test, cfg.optimizer,
                                           cfg.schedule, train_options(cfg, &data.test))
                   : distill::train_student(teacher, run, data.train, &data.test, cfg.optimizer,
                                            cfg.schedule, train_options(cfg, &data.test));
    res.report = std::move(out.report);
    res.final_test_acc = out.final_test_acc;
    res.delta_vs_baseline = out.delta_vs_baseline;
    write_epoch_rows(w, res.report);
    write_summary_rows(w, res.report, cfg.schedule.total_epochs, res.final_test_acc);
    if (res.delta_vs_baseline)
        w.row(cfg.schedule.total_epochs, "summary", "delta_vs_baseline", *res.delta_vs_baseline);
    res.checkpoint = dir / "model.ckpt";
    models::save(out.model, res.checkpoint.string());
    return res;
}

inline RunResult run_datafree(const config::ExperimentConfig& cfg, const fs::path& dir,
                              metrics::Writer& w, DataSplits& data) {
    RunResult res;
    models::Model teacher = models::load(resolve_path(cfg.teacher_ckpt).string());
    datafree::InversionSpec inv = cfg.inversion;
    auto out = datafree::datafree_distill(teacher, *cfg.student, inv, cfg.kd, cfg.seed,
                                          cfg.optimizer, cfg.schedule, data.train.norm_mean,
                                          data.train.norm_std);
    res.report = std::move(out.report);
    // The operation never sees real data; held-out evaluation happens here.
    res.final_test_acc = optim::evaluate(out.model, data.test).accuracy;
    write_epoch_rows(w, res.report);
    write_summary_rows(w, res.report, cfg.schedule.total_epochs, res.final_test_acc);
    w.row(cfg.schedule.total_epochs, "summary", "mean_target_confidence", out.mean_target_confidence);
    w.row(cfg.schedule.total_epochs, "summary", "mean_total_variation", out.mean_total_variation);
    w.row(cfg.schedule.total_epochs, "summary", "synthetic_size",
          static_cast<double>(out.synthetic.size()));
    datasets::save_tensor(out.synthetic.inputs, (dir / "synthetic.inputs.kdt").string());
    datasets::save_labels(out.synthetic.labels, (dir / "synthetic.labels.kdt").string());
    res.checkpoint = dir / "model.ckpt";
    models::save(out.model, res.checkpoint.string());
    return res;
}

inline RunResult run_sweep(const config::ExperimentConfig& cfg, const fs::path& dir,
                           metrics::Writer& w, DataSplits& data);

}  // namespace detail

inline RunResult run_experiment(const config::ExperimentConfig& cfg) {
    config::validate(cfg);
    const uint64_t hash = config::content_hash(cfg);
    const std::string run_id = cfg.kind + "-" + hash_hex(hash);
    const fs::path dir =
        cfg.out_dir.empty() ? out_root() / run_id : resolve_path(cfg.out_dir);
    fs::create_directories(dir);
    detail::write_snapshot(cfg, dir, run_id);

    DataSplits data = materialize(cfg.dataset);
    metrics::Writer w((dir / "metrics.csv").string(), run_id);

    RunResult res;
    if (cfg.kind == "train_teacher")
        res = detail::run_train_teacher(cfg, dir, w, data);
    else if (cfg.kind == "train_nasty")
        res = detail::run_train_nasty(cfg, dir, w, data);
    else if (cfg.kind == "distill" || cfg.kind == "teacher_self")
        res = detail::run_distill(cfg, dir, w, data);
    else if (cfg.kind == "datafree")
        res = detail::run_datafree(cfg, dir, w, data);
    else if (cfg.kind == "sweep")
        res = detail::run_sweep(cfg, dir, w, data);
    else
        throw ConfigError("unknown run kind '" + cfg.kind + "'");

    w.flush();
    res.dir = dir;
    res.run_id = run_id;
    return res;
}

// --- sweep ---------------------------------------------------------------------

inline constexpr const char* kSweepHeader =
    "axis,value,normal_teacher_acc,nasty_teacher_acc,student_from_normal_acc,"
    "student_from_nasty_acc,student_nasty_minus_normal,teacher_nasty_minus_normal";

struct SweepRow {
    std::string value;
    double normal_teacher_acc = 0.0, nasty_teacher_acc = 0.0;
    double student_from_normal_acc = 0.0, student_from_nasty_acc = 0.0;
};

namespace detail {

inline models::ModelSpec spec_by_kind(const std::string& kind, const models::ModelSpec& like) {
    if (kind == "mlp") return models::ModelSpec::mlp(like.input_shape, like.num_classes);
    if (kind == "small_cnn") return models::ModelSpec::small_cnn(like.input_shape, like.num_classes);
    if (kind == "tiny_cnn") return models::ModelSpec::tiny_cnn(like.input_shape, like.num_classes);
    throw ConfigError("unknown architecture '" + kind + "' in sweep values");
}

inline RunResult run_sweep(const config::ExperimentConfig& cfg, const fs::path& dir,
                           metrics::Writer& w, DataSplits& data) {
    const config::SweepConfig& sw = *cfg.sweep;

    // Child template: a plain distillation run on the same data/recipe.
    config::ExperimentConfig child;
    child.kind = "distill";
    child.seed = cfg.seed;
    child.dataset = cfg.dataset;
    child.student = cfg.student;
    child.kd = cfg.kd;
    child.fraction = cfg.fraction;
    child.optimizer = cfg.optimizer;
    child.schedule = cfg.schedule;
    child.batch_size = cfg.batch_size;

    models::Model normal_teacher = models::load(resolve_path(sw.normal_ckpt).string());
    const double normal_teacher_acc = optim::evaluate(normal_teacher, data.test).accuracy;

    const bool arch_axis = sw.axis == "adversary_arch" || sw.axis == "student_arch";
    const size_t n_values = arch_axis ? sw.arch_values.size() : sw.values.size();

    // The from-normal reference student is value-independent for the omega and
    // adversary_arch axes; run it once.
    std::optional<double> fixed_from_normal;
    if (sw.axis == "omega" || sw.axis == "adversary_arch") {
        config::ExperimentConfig c = child;
        c.teacher_ckpt = sw.normal_ckpt;
        c.out_dir = (dir / "children" / "from_normal").string();
        fixed_from_normal = run_experiment(c).final_test_acc;
    }

    double fixed_nasty_acc = std::numeric_limits<double>::quiet_NaN();
    if (!sw.nasty_ckpt.empty()) {
        models::Model nasty = models::load(resolve_path(sw.nasty_ckpt).string());
        fixed_nasty_acc = optim::evaluate(nasty, data.test).accuracy;
    }

    std::vector<SweepRow> rows;
    for (size_t vi = 0; vi < n_values; ++vi) {
        const std::string value_label =
            arch_axis ? sw.arch_values[vi] : metrics::format_value(sw.values[vi]);
        SweepRow row;
        row.value = value_label;
        row.normal_teacher_acc = normal_teacher_acc;

        std::string nasty_ckpt = sw.nasty_ckpt;
        config::ExperimentConfig from_nasty = child;
        config::ExperimentConfig from_normal = child;
        from_normal.teacher_ckpt = sw.normal_ckpt;

        if (sw.axis == "omega") {
            config::ExperimentConfig nasty_cfg;
            nasty_cfg.kind = "train_nasty";
            nasty_cfg.seed = cfg.seed;
            nasty_cfg.dataset = cfg.dataset;
            nasty_cfg.model = cfg.model;
            nasty_cfg.adversary_ckpt = sw.normal_ckpt;
            nasty_cfg.nasty = cfg.nasty;
            nasty_cfg.nasty.omega = sw.values[vi];
            nasty_cfg.optimizer = cfg.optimizer;
            nasty_cfg.schedule = cfg.schedule;
            nasty_cfg.batch_size = cfg.batch_size;
            nasty_cfg.out_dir = (dir / "children" / ("omega=" + value_label + "__nasty")).string();
            const auto nres = run_experiment(nasty_cfg);
            row.nasty_teacher_acc = nres.final_test_acc;
            nasty_ckpt = nres.checkpoint.string();
        } else if (sw.axis == "adversary_arch") {
            config::ExperimentConfig adv_cfg;
            adv_cfg.kind = "train_teacher";
            adv_cfg.seed = cfg.seed;
            adv_cfg.dataset = cfg.dataset;
            adv_cfg.model = spec_by_kind(sw.arch_values[vi], *cfg.model);
            adv_cfg.optimizer = cfg.optimizer;
            adv_cfg.schedule = cfg.schedule;
            adv_cfg.batch_size = cfg.batch_size;
            adv_cfg.out_dir = (dir / "children" / (value_label + "__adversary")).string();
            const auto ares = run_experiment(adv_cfg);

            config::ExperimentConfig nasty_cfg;
            nasty_cfg.kind = "train_nasty";
            nasty_cfg.seed = cfg.seed;
            nasty_cfg.dataset = cfg.dataset;
            nasty_cfg.model = cfg.model;
            nasty_cfg.adversary_ckpt = ares.checkpoint.string();
            nasty_cfg.nasty = cfg.nasty;
            nasty_cfg.optimizer = cfg.optimizer;
            nasty_cfg.schedule = cfg.schedule;
            nasty_cfg.batch_size = cfg.batch_size;
            nasty_cfg.out_dir = (dir / "children" / (value_label + "__nasty")).string();
            const auto nres = run_experiment(nasty_cfg);
            row.nasty_teacher_acc = nres.final_test_acc;
            nasty_ckpt = nres.checkpoint.string();
        } else if (sw.axis == "tau_s") {
            from_nasty.kd.tau_s = sw.values[vi];
            from_normal.kd.tau_s = sw.values[vi];
            row.nasty_teacher_acc = fixed_nasty_acc;
        } else if (sw.axis == "alpha") {
            from_nasty.kd.alpha = sw.values[vi];
            from_normal.kd.alpha = sw.values[vi];
            row.nasty_teacher_acc = fixed_nasty_acc;
        } else if (sw.axis == "fraction") {
            from_nasty.fraction = sw.values[vi];
            from_normal.fraction = sw.values[vi];
            row.nasty_teacher_acc = fixed_nasty_acc;
        } else if (sw.axis == "student_arch") {
            from_nasty.student = spec_by_kind(sw.arch_values[vi], *cfg.student);
            from_normal.student = from_nasty.student;
            row.nasty_teacher_acc = fixed_nasty_acc;
        }

        if (fixed_from_normal) {
            row.student_from_normal_acc = *fixed_from_normal;
        } else {
            from_normal.out_dir =
                (dir / "children" / (sw.axis + "=" + value_label + "__from_normal")).string();
            row.student_from_normal_acc = run_experiment(from_normal).final_test_acc;
        }

        from_nasty.teacher_ckpt = nasty_ckpt;
        from_nasty.out_dir = (dir / "children" / (sw.axis + "=" + value_label + "__from_nasty")).string();
        row.student_from_nasty_acc = run_experiment(from_nasty).final_test_acc;

        rows.push_back(row);
    }

    std::ofstream table(dir / "sweep_summary.csv");
    table << kSweepHeader << "\n";
    for (const auto& r : rows) {
        table << sw.axis << ',' << r.value << ',' << metrics::format_value(r.normal_teacher_acc)
              << ',' << metrics::format_value(r.nasty_teacher_acc) << ','
              << metrics::format_value(r.student_from_normal_acc) << ','
              << metrics::format_value(r.student_from_nasty_acc) << ','
              << metrics::format_value(r.student_from_nasty_acc - r.student_from_normal_acc) << ','
              << metrics::format_value(r.nasty_teacher_acc - normal_teacher_acc) << "\n";
        w.row(0, "summary", "sweep_point_" + r.value,
              r.student_from_nasty_acc - r.student_from_normal_acc);
    }

    RunResult res;
    res.final_test_acc = rows.empty() ? 0.0 : rows.back().student_from_nasty_acc;
    return res;
}
}  // namespace detail

// --- logit dumps ------------------------------------------------------------------

// One CSV row per sample: label, raw logits, tempered probabilities, and the
// penultimate-layer embedding.
inline void dump_logits(const std::string& ckpt_path, const config::DatasetConfig& dc,
                        const std::string& split, double tau, const std::string& out_path) {
    if (tau <= 0.0) throw ParameterError("dump_logits: tau must be > 0");
    models::Model m = models::load(resolve_path(ckpt_path).string());
    m.set_trainable(false);
    m.set_mode(models::Mode::eval);
    DataSplits data = materialize(dc);
    const datasets::Dataset& d = (split == "train") ? data.train : data.test;

    std::ofstream os(out_path);
    if (!os) throw ParseError("dump_logits: cannot open " + out_path);

    const int classes = m.spec.num_classes;
    int emb_dim = -1;
    const int batch = 256;
    std::vector<size_t> idx;
    for (size_t at = 0; at < d.size(); at += batch) {
        const size_t bs = std::min(static_cast<size_t>(batch), d.size() - at);
        idx.resize(bs);
        std::iota(idx.begin(), idx.end(), at);
        const auto parts = m.forward_parts(d.batch_inputs(idx));
        const Tensor probs = objectives::softmax_temperature(parts.logits, tau);
        if (emb_dim < 0) {
            emb_dim = parts.embedding.shape()[1];
            os << "label";
            for (int j = 0; j < classes; ++j) os << ",logit_" << j;
            for (int j = 0; j < classes; ++j) os << ",prob_" << j;
            for (int j = 0; j < emb_dim; ++j) os << ",emb_" << j;
            os << "\n";
        }
        for (size_t r = 0; r < bs; ++r) {
            os << d.labels[at + r];
            for (int j = 0; j < classes; ++j)
                os << ',' << metrics::format_value(parts.logits.data()[r * classes + j]);
            for (int j = 0; j < classes; ++j)
                os << ',' << metrics::format_value(probs.data()[r * classes + j]);
            for (int j = 0; j < emb_dim; ++j)
                os << ',' << metrics::format_value(parts.embedding.data()[r * emb_dim + j]);
            os << "\n";
        }
    }
    if (!os) throw ParseError("dump_logits: write failed for " + out_path);
}

// Multi-peak statistic recomputed from a dump file; must agree with the live
// model to within formatting noise.
inline double multi_peak_from_dump(const std::string& path, double threshold) {
    std::ifstream is(path);
    if (!is) throw ParseError("cannot open dump " + path);
    std::string header;
    if (!std::getline(is, header)) throw ParseError("empty dump " + path);
    std::vector<int> prob_cols;
    {
        std::stringstream ss(header);
        std::string col;
        int i = 0;
        while (std::getline(ss, col, ',')) {
            if (col.rfind("prob_", 0) == 0) prob_cols.push_back(i);
            ++i;
        }
    }
    if (prob_cols.empty()) throw ParseError("dump has no probability columns: " + path);
    size_t rows = 0, count = 0;
    std::string line;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        ++rows;
        std::stringstream ss(line);
        std::string col;
        int i = 0;
        size_t pc = 0;
        while (std::getline(ss, col, ',')) {
            if (pc < prob_cols.size() && i == prob_cols[pc]) {
                if (std::stod(col) > threshold) ++count;
                ++pc;
            }
            ++i;
        }
    }
    if (rows == 0) throw ParseError("dump has no rows: " + path);
    return static_cast<double>(count) / static_cast<double>(rows);
}

}  // namespace kdlab::expcli
