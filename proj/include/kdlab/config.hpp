#pragma once

#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "kdlab/datafree.hpp"
#include "kdlab/errors.hpp"
#include "kdlab/models.hpp"
#include "kdlab/objectives.hpp"
#include "kdlab/optim.hpp"

// Declarative experiment configuration. The on-disk format is JSON with
// strict unknown-key rejection: a typo in "omega" or "tau_s" fails loudly
// instead of silently running the wrong experiment. Serialisation emits
// every field relevant to the run kind with defaults materialised, so the
// resolved snapshot in a run directory is complete and round-trips exactly.

namespace kdlab::config {

using json = nlohmann::ordered_json;

struct DatasetConfig {
    std::string kind = "synth_images";  // "synth_images" | "blobs" | "idx"
    bool normalize = true;
    uint64_t seed = 1;
    // synth_images / blobs
    int classes = 10;
    int train_per_class = 200;
    int test_per_class = 200;
    // synth_images
    int height = 28;
    int width = 28;
    double noise = 0.18;
    double jitter = 1.1;
    double max_rotate = 0.4;
    double max_shift = 2.5;
    double distractor_prob = 0.3;
    // blobs
    int dim = 16;
    double separation = 4.0;
    // idx
    std::string train_images, train_labels, test_images, test_labels;

    bool operator==(const DatasetConfig&) const = default;
};

struct SweepConfig {
    std::string axis;                       // omega | tau_s | alpha | fraction | adversary_arch | student_arch
    std::vector<double> values;             // numeric axes
    std::vector<std::string> arch_values;   // architecture axes
    std::string nasty_ckpt;                 // fixed nasty teacher (tau_s/alpha/fraction/student_arch)
    std::string normal_ckpt;                // fixed normal teacher / adversary reference

    bool operator==(const SweepConfig&) const = default;
};

struct ExperimentConfig {
    std::string kind;  // train_teacher | train_nasty | distill | teacher_self | datafree | sweep
    uint64_t seed = 0;
    std::string out_dir;
    DatasetConfig dataset;
    std::optional<models::ModelSpec> model;    // network being trained (teacher kinds)
    std::optional<models::ModelSpec> student;  // distill kinds
    std::string teacher_ckpt;
    std::string adversary_ckpt;
    objectives::KDParams kd;
    objectives::NastyParams nasty;
    double fraction = 1.0;
    bool init_from_adversary = false;
    std::optional<double> baseline_acc;
    optim::OptimizerSpec optimizer;
    optim::ScheduleSpec schedule{{15, 23}, 0.1, 30};
    int batch_size = 128;
    datafree::InversionSpec inversion;
    std::optional<SweepConfig> sweep;
};

inline const std::vector<std::string>& known_kinds() {
    static const std::vector<std::string> kinds = {"train_teacher", "train_nasty", "distill",
                                                   "teacher_self", "datafree", "sweep"};
    return kinds;
}

// --- dataset ---------------------------------------------------------------

inline json to_json(const DatasetConfig& d) {
    json j;
    j["kind"] = d.kind;
    j["normalize"] = d.normalize;
    j["seed"] = d.seed;
    if (d.kind == "synth_images") {
        j["classes"] = d.classes;
        j["train_per_class"] = d.train_per_class;
        j["test_per_class"] = d.test_per_class;
        j["height"] = d.height;
        j["width"] = d.width;
        j["noise"] = d.noise;
        j["jitter"] = d.jitter;
        j["max_rotate"] = d.max_rotate;
        j["max_shift"] = d.max_shift;
        j["distractor_prob"] = d.distractor_prob;
    } else if (d.kind == "blobs") {
        j["classes"] = d.classes;
        j["train_per_class"] = d.train_per_class;
        j["test_per_class"] = d.test_per_class;
        j["dim"] = d.dim;
        j["separation"] = d.separation;
    } else if (d.kind == "idx") {
        j["train_images"] = d.train_images;
        j["train_labels"] = d.train_labels;
        j["test_images"] = d.test_images;
        j["test_labels"] = d.test_labels;
    }
    return j;
}

inline DatasetConfig dataset_from_json(const json& j) {
    DatasetConfig d;
    d.kind = j.value("kind", d.kind);
    std::vector<std::string> allowed = {"kind", "normalize", "seed"};
    if (d.kind == "synth_images") {
        for (const char* k : {"classes", "train_per_class", "test_per_class", "height", "width",
                              "noise", "jitter", "max_rotate", "max_shift", "distractor_prob"})
            allowed.push_back(k);
    } else if (d.kind == "blobs") {
        for (const char* k : {"classes", "train_per_class", "test_per_class", "dim", "separation"})
            allowed.push_back(k);
    } else if (d.kind == "idx") {
        for (const char* k : {"train_images", "train_labels", "test_images", "test_labels"})
            allowed.push_back(k);
    } else {
        throw ConfigError("unknown dataset kind '" + d.kind + "'");
    }
    models::reject_unknown_keys(j, allowed, "dataset config");
    d.normalize = j.value("normalize", d.normalize);
    d.seed = j.value("seed", d.seed);
    d.classes = j.value("classes", d.classes);
    d.train_per_class = j.value("train_per_class", d.train_per_class);
    d.test_per_class = j.value("test_per_class", d.test_per_class);
    d.height = j.value("height", d.height);
    d.width = j.value("width", d.width);
    d.noise = j.value("noise", d.noise);
    d.jitter = j.value("jitter", d.jitter);
    d.max_rotate = j.value("max_rotate", d.max_rotate);
    d.max_shift = j.value("max_shift", d.max_shift);
    d.distractor_prob = j.value("distractor_prob", d.distractor_prob);
    d.dim = j.value("dim", d.dim);
    d.separation = j.value("separation", d.separation);
    d.train_images = j.value("train_images", d.train_images);
    d.train_labels = j.value("train_labels", d.train_labels);
    d.test_images = j.value("test_images", d.test_images);
    d.test_labels = j.value("test_labels", d.test_labels);
    if (d.kind == "idx" && (d.train_images.empty() || d.train_labels.empty()))
        throw ConfigError("idx dataset needs train_images and train_labels paths");
    return d;
}

// --- sub-blocks ------------------------------------------------------------

inline json to_json(const objectives::KDParams& p) {
    json j;
    j["alpha"] = p.alpha;
    j["tau_s"] = p.tau_s;
    return j;
}
inline objectives::KDParams kd_from_json(const json& j) {
    models::reject_unknown_keys(j, {"alpha", "tau_s"}, "kd params");
    objectives::KDParams p;
    p.alpha = j.value("alpha", p.alpha);
    p.tau_s = j.value("tau_s", p.tau_s);
    return p;
}

inline json to_json(const objectives::NastyParams& p) {
    json j;
    j["omega"] = p.omega;
    j["tau_a"] = p.tau_a;
    return j;
}
inline objectives::NastyParams nasty_from_json(const json& j) {
    models::reject_unknown_keys(j, {"omega", "tau_a"}, "nasty params");
    objectives::NastyParams p;
    p.omega = j.value("omega", p.omega);
    p.tau_a = j.value("tau_a", p.tau_a);
    return p;
}

inline json to_json(const optim::OptimizerSpec& s) {
    json j;
    j["kind"] = s.kind;
    j["lr"] = s.lr;
    j["momentum"] = s.momentum;
    j["weight_decay"] = s.weight_decay;
    j["beta1"] = s.beta1;
    j["beta2"] = s.beta2;
    j["eps"] = s.eps;
    return j;
}
inline optim::OptimizerSpec optimizer_from_json(const json& j) {
    models::reject_unknown_keys(j, {"kind", "lr", "momentum", "weight_decay", "beta1", "beta2", "eps"},
                                "optimizer config");
    optim::OptimizerSpec s;
    s.kind = j.value("kind", s.kind);
    s.lr = j.value("lr", s.lr);
    s.momentum = j.value("momentum", s.momentum);
    s.weight_decay = j.value("weight_decay", s.weight_decay);
    s.beta1 = j.value("beta1", s.beta1);
    s.beta2 = j.value("beta2", s.beta2);
    s.eps = j.value("eps", s.eps);
    optim::validate(s);
    return s;
}

inline json to_json(const optim::ScheduleSpec& s) {
    json j;
    j["total_epochs"] = s.total_epochs;
    j["milestones"] = s.milestones;
    j["decay_factor"] = s.decay_factor;
    return j;
}
inline optim::ScheduleSpec schedule_from_json(const json& j) {
    models::reject_unknown_keys(j, {"total_epochs", "milestones", "decay_factor"}, "schedule config");
    optim::ScheduleSpec s{{15, 23}, 0.1, 30};
    s.total_epochs = j.value("total_epochs", s.total_epochs);
    s.milestones = j.value("milestones", s.milestones);
    s.decay_factor = j.value("decay_factor", s.decay_factor);
    optim::validate(s);
    return s;
}

inline json to_json(const datafree::InversionSpec& s) {
    json j;
    j["samples_per_class"] = s.samples_per_class;
    j["steps"] = s.steps;
    j["input_lr"] = s.input_lr;
    j["tv_weight"] = s.tv_weight;
    j["l2_weight"] = s.l2_weight;
    j["tau_target"] = s.tau_target;
    j["seed"] = s.seed;
    return j;
}
inline datafree::InversionSpec inversion_from_json(const json& j) {
    models::reject_unknown_keys(
        j, {"samples_per_class", "steps", "input_lr", "tv_weight", "l2_weight", "tau_target", "seed"},
        "inversion config");
    datafree::InversionSpec s;
    s.samples_per_class = j.value("samples_per_class", s.samples_per_class);
    s.steps = j.value("steps", s.steps);
    s.input_lr = j.value("input_lr", s.input_lr);
    s.tv_weight = j.value("tv_weight", s.tv_weight);
    s.l2_weight = j.value("l2_weight", s.l2_weight);
    s.tau_target = j.value("tau_target", s.tau_target);
    s.seed = j.value("seed", s.seed);
    datafree::validate(s);
    return s;
}

inline json to_json(const SweepConfig& s) {
    json j;
    j["axis"] = s.axis;
    if (!s.arch_values.empty())
        j["values"] = s.arch_values;
    else
        j["values"] = s.values;
    if (!s.normal_ckpt.empty()) j["normal_ckpt"] = s.normal_ckpt;
    if (!s.nasty_ckpt.empty()) j["nasty_ckpt"] = s.nasty_ckpt;
    return j;
}
inline SweepConfig sweep_from_json(const json& j) {
    models::reject_unknown_keys(j, {"axis", "values", "normal_ckpt", "nasty_ckpt"}, "sweep config");
    SweepConfig s;
    s.axis = j.at("axis").get<std::string>();
    const auto& vals = j.at("values");
    if (!vals.is_array() || vals.empty()) throw ConfigError("sweep: values must be a non-empty array");
    if (vals.front().is_string())
        s.arch_values = vals.get<std::vector<std::string>>();
    else
        s.values = vals.get<std::vector<double>>();
    s.normal_ckpt = j.value("normal_ckpt", "");
    s.nasty_ckpt = j.value("nasty_ckpt", "");
    return s;
}

// --- experiment ------------------------------------------------------------

inline void validate(const ExperimentConfig& c) {
    if (std::find(known_kinds().begin(), known_kinds().end(), c.kind) == known_kinds().end())
        throw ConfigError("unknown run kind '" + c.kind + "'");
    if (c.batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (c.fraction <= 0.0 || c.fraction > 1.0) throw ConfigError("fraction must be in (0,1]");
    if (c.kind == "train_teacher" || c.kind == "train_nasty") {
        if (!c.model) throw ConfigError(c.kind + " needs a 'model' spec");
        models::validate(*c.model);
    }
    if (c.kind == "train_nasty" && c.adversary_ckpt.empty())
        throw ConfigError("train_nasty needs 'adversary_ckpt'");
    if (c.kind == "distill" || c.kind == "teacher_self" || c.kind == "datafree") {
        if (!c.student) throw ConfigError(c.kind + " needs a 'student' spec");
        models::validate(*c.student);
        if (c.teacher_ckpt.empty()) throw ConfigError(c.kind + " needs 'teacher_ckpt'");
    }
    if (c.kind == "sweep") {
        if (!c.sweep) throw ConfigError("sweep run needs a 'sweep' block");
        if (!c.student) throw ConfigError("sweep needs a 'student' spec");
        static const std::vector<std::string> axes = {"omega",    "tau_s",          "alpha",
                                                      "fraction", "adversary_arch", "student_arch"};
        if (std::find(axes.begin(), axes.end(), c.sweep->axis) == axes.end())
            throw ConfigError("unknown sweep axis '" + c.sweep->axis + "'");
        const bool arch_axis = c.sweep->axis == "adversary_arch" || c.sweep->axis == "student_arch";
        if (arch_axis && c.sweep->arch_values.empty())
            throw ConfigError("sweep axis '" + c.sweep->axis + "' needs architecture-name values");
        if (!arch_axis && c.sweep->values.empty())
            throw ConfigError("sweep axis '" + c.sweep->axis + "' needs numeric values");
        if (c.sweep->normal_ckpt.empty()) throw ConfigError("sweep needs 'normal_ckpt'");
        if (c.sweep->axis != "omega" && c.sweep->axis != "adversary_arch" && c.sweep->nasty_ckpt.empty())
            throw ConfigError("sweep axis '" + c.sweep->axis + "' needs 'nasty_ckpt'");
        if ((c.sweep->axis == "omega" || c.sweep->axis == "adversary_arch") && !c.model)
            throw ConfigError("sweep axis '" + c.sweep->axis + "' needs a teacher 'model' spec");
    }
    objectives::validate(c.kd);
    objectives::validate(c.nasty);
    optim::validate(c.optimizer);
    optim::validate(c.schedule);
}

inline json to_json(const ExperimentConfig& c) {
    json j;
    j["kind"] = c.kind;
    j["seed"] = c.seed;
    j["out_dir"] = c.out_dir;
    j["dataset"] = to_json(c.dataset);
    j["optimizer"] = to_json(c.optimizer);
    j["schedule"] = to_json(c.schedule);
    j["batch_size"] = c.batch_size;
    if (c.kind == "train_teacher") {
        j["model"] = models::spec_to_json(*c.model);
    } else if (c.kind == "train_nasty") {
        j["model"] = models::spec_to_json(*c.model);
        j["adversary_ckpt"] = c.adversary_ckpt;
        j["nasty"] = to_json(c.nasty);
        j["init_from_adversary"] = c.init_from_adversary;
    } else if (c.kind == "distill" || c.kind == "teacher_self") {
        j["student"] = models::spec_to_json(*c.student);
        j["teacher_ckpt"] = c.teacher_ckpt;
        j["kd"] = to_json(c.kd);
        j["fraction"] = c.fraction;
        if (c.baseline_acc) j["baseline_acc"] = *c.baseline_acc;
    } else if (c.kind == "datafree") {
        j["student"] = models::spec_to_json(*c.student);
        j["teacher_ckpt"] = c.teacher_ckpt;
        j["kd"] = to_json(c.kd);
        j["inversion"] = to_json(c.inversion);
    } else if (c.kind == "sweep") {
        j["student"] = models::spec_to_json(*c.student);
        if (c.model) j["model"] = models::spec_to_json(*c.model);
        j["kd"] = to_json(c.kd);
        j["nasty"] = to_json(c.nasty);
        j["fraction"] = c.fraction;
        j["sweep"] = to_json(*c.sweep);
    }
    return j;
}

inline ExperimentConfig from_json(const json& j) {
    ExperimentConfig c;
    c.kind = j.value("kind", "");
    std::vector<std::string> allowed = {"kind", "seed", "out_dir", "dataset",
                                        "optimizer", "schedule", "batch_size"};
    if (c.kind == "train_teacher") {
        allowed.push_back("model");
    } else if (c.kind == "train_nasty") {
        for (const char* k : {"model", "adversary_ckpt", "nasty", "init_from_adversary"})
            allowed.push_back(k);
    } else if (c.kind == "distill" || c.kind == "teacher_self") {
        for (const char* k : {"student", "teacher_ckpt", "kd", "fraction", "baseline_acc"})
            allowed.push_back(k);
    } else if (c.kind == "datafree") {
        for (const char* k : {"student", "teacher_ckpt", "kd", "inversion"}) allowed.push_back(k);
    } else if (c.kind == "sweep") {
        for (const char* k : {"student", "model", "kd", "nasty", "fraction", "sweep"})
            allowed.push_back(k);
    } else {
        throw ConfigError("unknown run kind '" + c.kind + "'");
    }
    models::reject_unknown_keys(j, allowed, "experiment config");

    c.seed = j.value("seed", c.seed);
    c.out_dir = j.value("out_dir", c.out_dir);
    if (j.contains("dataset")) c.dataset = dataset_from_json(j.at("dataset"));
    if (j.contains("optimizer")) c.optimizer = optimizer_from_json(j.at("optimizer"));
    if (j.contains("schedule")) c.schedule = schedule_from_json(j.at("schedule"));
    c.batch_size = j.value("batch_size", c.batch_size);
    if (j.contains("model")) c.model = models::spec_from_json(j.at("model"));
    if (j.contains("student")) c.student = models::spec_from_json(j.at("student"));
    c.teacher_ckpt = j.value("teacher_ckpt", "");
    c.adversary_ckpt = j.value("adversary_ckpt", "");
    if (j.contains("kd")) c.kd = kd_from_json(j.at("kd"));
    if (j.contains("nasty")) c.nasty = nasty_from_json(j.at("nasty"));
    c.fraction = j.value("fraction", c.fraction);
    c.init_from_adversary = j.value("init_from_adversary", c.init_from_adversary);
    if (j.contains("baseline_acc")) c.baseline_acc = j.at("baseline_acc").get<double>();
    if (j.contains("inversion")) c.inversion = inversion_from_json(j.at("inversion"));
    if (j.contains("sweep")) c.sweep = sweep_from_json(j.at("sweep"));
    validate(c);
    return c;
}

inline ExperimentConfig parse_file(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw ConfigError("cannot open config file " + path);
    json j;
    try {
        j = json::parse(is);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("config parse error in " + path + ": " + e.what());
    }
    try {
        return from_json(j);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("config field error in " + path + ": " + e.what());
    }
}

// Content hash of the canonical serialisation, minus the output location:
// two configs that would produce identical artifacts hash identically.
inline uint64_t content_hash(const ExperimentConfig& c) {
    json j = to_json(c);
    j.erase("out_dir");
    return fnv1a(j.dump());
}

}  // namespace kdlab::config
