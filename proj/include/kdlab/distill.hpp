#pragma once

#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "kdlab/datasets.hpp"
#include "kdlab/errors.hpp"
#include "kdlab/models.hpp"
#include "kdlab/objectives.hpp"
#include "kdlab/optim.hpp"

// The three training procedures: knowledge distillation into a student,
// self-undermining teacher training against a frozen adversary, and the
// Teacher-Self variant (student spec identical to the teacher's).
//
// Reference networks are frozen for the whole run: their parameters are
// flagged non-trainable, their logits are precomputed once over the training
// set, and a checksum guard verifies they come out of the run bit-identical.

namespace kdlab::distill {

struct DistillRun {
    models::ModelSpec student_spec;
    objectives::KDParams kd;
    double fraction = 1.0;  // stratified share of the training set
    uint64_t seed = 0;
    std::optional<double> baseline_acc;  // plain-training reference, for the delta
};

struct NastyRun {
    models::ModelSpec teacher_spec;
    objectives::NastyParams nasty;
    uint64_t seed = 0;
    bool init_from_adversary = false;  // default: fresh init from seed
};

struct Result {
    models::Model model;
    optim::TrainReport report;
    double final_test_acc = std::numeric_limits<double>::quiet_NaN();
    std::optional<double> delta_vs_baseline;
    std::optional<double> reference_test_acc;  // adversary accuracy for nasty runs
};

// Frozen-network logits for every row of a dataset, in dataset order.
inline std::vector<double> reference_logits(models::Model& net, const datasets::Dataset& data,
                                            int batch_size = 256) {
    const auto saved_mode = net.mode;
    net.set_mode(models::Mode::eval);
    const int classes = net.spec.num_classes;
    std::vector<double> out(data.size() * static_cast<size_t>(classes));
    std::vector<size_t> idx;
    for (size_t at = 0; at < data.size(); at += static_cast<size_t>(batch_size)) {
        const size_t bs = std::min(static_cast<size_t>(batch_size), data.size() - at);
        idx.resize(bs);
        std::iota(idx.begin(), idx.end(), at);
        Tensor logits = net.forward(data.batch_inputs(idx));
        std::copy_n(logits.data().begin(), bs * static_cast<size_t>(classes),
                    out.begin() + at * static_cast<size_t>(classes));
    }
    net.set_mode(saved_mode);
    return out;
}

namespace detail {
inline Tensor rows_at(const std::vector<double>& table, int classes, const std::vector<size_t>& idx) {
    std::vector<double> rows(idx.size() * static_cast<size_t>(classes));
    for (size_t r = 0; r < idx.size(); ++r)
        std::copy_n(table.data() + idx[r] * static_cast<size_t>(classes), classes,
                    rows.data() + r * static_cast<size_t>(classes));
    return Tensor::from_data({static_cast<int>(idx.size()), classes}, std::move(rows));
}

inline void check_class_counts(const models::ModelSpec& a, const models::ModelSpec& b) {
    if (a.num_classes != b.num_classes)
        throw ConfigError("class-count mismatch: " + std::to_string(a.num_classes) + " vs " +
                          std::to_string(b.num_classes));
}
}  // namespace detail

// Student trained with the distillation objective against a frozen teacher.
inline Result train_student(models::Model& teacher, const DistillRun& run,
                            const datasets::Dataset& train_data, const datasets::Dataset* test_data,
                            const optim::OptimizerSpec& opt, const optim::ScheduleSpec& sched,
                            const optim::TrainOptions& base_opts = {}) {
    models::validate(run.student_spec);
    detail::check_class_counts(teacher.spec, run.student_spec);
    if (run.student_spec.num_classes != train_data.num_classes)
        throw ConfigError("student classes " + std::to_string(run.student_spec.num_classes) +
                          " do not match dataset classes " + std::to_string(train_data.num_classes));

    teacher.set_trainable(false);
    teacher.set_mode(models::Mode::eval);
    teacher.zero_grad();
    const uint64_t teacher_sum = teacher.checksum();

    const datasets::Dataset data = datasets::subsample(train_data, run.fraction, run.seed);
    const std::vector<double> table = reference_logits(teacher, data);
    const int classes = teacher.spec.num_classes;

    models::Model student = models::build(run.student_spec, run.seed);
    const optim::Objective objective = [&](const Tensor& logits, const std::vector<int>& labels,
                                           const std::vector<size_t>& idx) {
        return objectives::kd_loss(logits, detail::rows_at(table, classes, idx), labels, run.kd);
    };

    optim::TrainOptions opts = base_opts;
    if (!opts.eval_data) opts.eval_data = test_data;
    Result res;
    res.report = optim::train(student, data, objective, opt, sched, run.seed, opts);

    if (teacher.checksum() != teacher_sum)
        throw ContractError("frozen teacher changed during distillation");
    for (const auto& [name, p] : teacher.parameters())
        if (p.has_grad()) throw ContractError("gradient reached the frozen teacher");

    if (test_data) res.final_test_acc = optim::evaluate(student, *test_data).accuracy;
    if (run.baseline_acc) res.delta_vs_baseline = res.final_test_acc - *run.baseline_acc;
    res.model = std::move(student);
    return res;
}

// Teacher trained to keep its labels while pushing its tempered distribution
// away from a frozen, normally-trained adversary.
inline Result train_nasty_teacher(models::Model& adversary, const NastyRun& run,
                                  const datasets::Dataset& train_data, const datasets::Dataset* test_data,
                                  const optim::OptimizerSpec& opt, const optim::ScheduleSpec& sched,
                                  const optim::TrainOptions& base_opts = {}) {
    models::validate(run.teacher_spec);
    detail::check_class_counts(adversary.spec, run.teacher_spec);
    if (adversary.spec.input_shape != run.teacher_spec.input_shape)
        throw ConfigError("adversary input shape " + shape_str(adversary.spec.input_shape) +
                          " does not match teacher input " + shape_str(run.teacher_spec.input_shape));
    if (run.init_from_adversary && !(adversary.spec == run.teacher_spec))
        throw ConfigError("init_from_adversary requires identical teacher and adversary specs");

    adversary.set_trainable(false);
    adversary.set_mode(models::Mode::eval);
    adversary.zero_grad();
    const uint64_t adversary_sum = adversary.checksum();

    const std::vector<double> table = reference_logits(adversary, train_data);
    const int classes = adversary.spec.num_classes;

    models::Model teacher = models::build(run.teacher_spec, run.seed);
    if (run.init_from_adversary)
        for (size_t i = 0; i < teacher.parameters().size(); ++i)
            teacher.parameters()[i].second.data() = adversary.parameters()[i].second.data();

    const optim::Objective objective = [&](const Tensor& logits, const std::vector<int>& labels,
                                           const std::vector<size_t>& idx) {
        return objectives::nasty_loss(logits, detail::rows_at(table, classes, idx), labels, run.nasty);
    };

    optim::TrainOptions opts = base_opts;
    if (!opts.eval_data) opts.eval_data = test_data;
    Result res;
    res.report = optim::train(teacher, train_data, objective, opt, sched, run.seed, opts);

    if (adversary.checksum() != adversary_sum)
        throw ContractError("frozen adversary changed during self-undermining training");
    for (const auto& [name, p] : adversary.parameters())
        if (p.has_grad()) throw ContractError("gradient reached the frozen adversary");

    if (test_data) {
        res.final_test_acc = optim::evaluate(teacher, *test_data).accuracy;
        res.reference_test_acc = optim::evaluate(adversary, *test_data).accuracy;
    }
    res.model = std::move(teacher);
    return res;
}

// Distillation into a student with the teacher's own architecture.
inline Result teacher_self(models::Model& teacher, const DistillRun& run,
                           const datasets::Dataset& train_data, const datasets::Dataset* test_data,
                           const optim::OptimizerSpec& opt, const optim::ScheduleSpec& sched,
                           const optim::TrainOptions& base_opts = {}) {
    if (!(run.student_spec == teacher.spec))
        throw ConfigError("teacher_self requires the student spec to equal the teacher spec");
    return train_student(teacher, run, train_data, test_data, opt, sched, base_opts);
}

// Mean number of classes whose tempered probability clears the threshold;
// single peaks score 1, the multi-peak signature scores higher.
inline double multi_peak_statistic(models::Model& m, const datasets::Dataset& data, double tau,
                                   double threshold, int batch_size = 256) {
    if (threshold <= 0.0 || threshold >= 0.5)
        throw ParameterError("multi_peak_statistic: threshold must be in (0, 0.5)");
    if (tau <= 0.0) throw ParameterError("multi_peak_statistic: tau must be > 0");
    const auto saved_mode = m.mode;
    m.set_mode(models::Mode::eval);
    const bool was_trainable = m.trainable();
    m.set_trainable(false);
    size_t count = 0;
    std::vector<size_t> idx;
    for (size_t at = 0; at < data.size(); at += static_cast<size_t>(batch_size)) {
        const size_t bs = std::min(static_cast<size_t>(batch_size), data.size() - at);
        idx.resize(bs);
        std::iota(idx.begin(), idx.end(), at);
        Tensor probs = objectives::softmax_temperature(m.forward(data.batch_inputs(idx)), tau);
        for (double p : probs.data())
            if (p > threshold) ++count;
    }
    m.set_trainable(was_trainable);
    m.set_mode(saved_mode);
    return static_cast<double>(count) / static_cast<double>(data.size());
}

}  // namespace kdlab::distill
