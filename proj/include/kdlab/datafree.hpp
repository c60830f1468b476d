#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "kdlab/datasets.hpp"
#include "kdlab/distill.hpp"
#include "kdlab/errors.hpp"
#include "kdlab/models.hpp"
#include "kdlab/objectives.hpp"
#include "kdlab/optim.hpp"

// Data-free distillation: synthesise inputs by inverting a frozen teacher
// (projected gradient steps on the pixels against cross-entropy for a target
// class plus total-variation and L2 regularisers), then distill a student on
// the synthetic set. No real training data is touched anywhere in this
// module: distillation labels are the inversion targets.

namespace kdlab::datafree {

struct InversionSpec {
    int samples_per_class = 32;
    int steps = 100;
    double input_lr = 0.05;     // adam step size on the pixels
    double tv_weight = 2e-3;
    double l2_weight = 1e-4;
    double tau_target = 1.0;    // temperature inside the target cross-entropy
    uint64_t seed = 0;
};

inline void validate(const InversionSpec& s) {
    if (s.samples_per_class < 1) throw ParameterError("inversion: samples_per_class must be >= 1");
    if (s.steps < 0) throw ParameterError("inversion: steps must be >= 0");
    if (s.input_lr <= 0.0) throw ParameterError("inversion: input_lr must be > 0");
    if (s.tv_weight < 0.0 || s.l2_weight < 0.0)
        throw ParameterError("inversion: regulariser weights must be >= 0");
    if (s.tau_target <= 0.0) throw ParameterError("inversion: tau_target must be > 0");
}

namespace detail {

// Adam on a raw pixel buffer, with projection back into [0,1] after each step.
struct PixelAdam {
    double lr, beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
    std::vector<double> m, v;
    int64_t t = 0;

    explicit PixelAdam(size_t n, double lr_) : lr(lr_), m(n, 0.0), v(n, 0.0) {}

    void step(std::vector<double>& x, const std::vector<double>& g) {
        ++t;
        const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(t));
        const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(t));
        for (size_t i = 0; i < x.size(); ++i) {
            m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
            v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
            x[i] -= lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + eps);
            x[i] = std::clamp(x[i], 0.0, 1.0);
        }
    }
};

// One inversion attempt for a batch of same-class inputs. Returns false if
// any pixel went non-finite.
inline bool invert_class_batch(models::Model& teacher, const InversionSpec& spec, int target_class,
                               int batch, uint64_t attempt_seed, double norm_mean, double norm_std,
                               std::vector<double>& out_pixels) {
    Shape shape = {batch};
    shape.insert(shape.end(), teacher.spec.input_shape.begin(), teacher.spec.input_shape.end());
    const size_t n = shape_numel(shape);

    Rng rng(attempt_seed);
    std::vector<double> pixels(n);
    for (double& v : pixels) v = rng.next_double();

    const std::vector<int> targets(static_cast<size_t>(batch), target_class);
    PixelAdam adam(n, spec.input_lr);

    for (int step = 0; step < spec.steps; ++step) {
        Tensor x = Tensor::from_data(shape, pixels, true);
        Tensor xn = mul_scalar(add_scalar(x, -norm_mean), 1.0 / norm_std);
        Tensor logits = teacher.forward(xn);
        Tensor loss = nll_loss(log_softmax(mul_scalar(logits, 1.0 / spec.tau_target)), targets);
        if (spec.tv_weight > 0.0)
            loss = add(loss, mul_scalar(total_variation(x), spec.tv_weight));
        if (spec.l2_weight > 0.0)
            loss = add(loss, mul_scalar(mul_scalar(sum_all(mul(x, x)), 1.0 / batch), spec.l2_weight));
        loss.backward();
        adam.step(pixels, x.grad());
        for (double v : pixels)
            if (!std::isfinite(v)) return false;
    }
    out_pixels = std::move(pixels);
    return true;
}
}  // namespace detail

// Synthesise a labelled dataset from the teacher alone. norm_mean/norm_std
// are the teacher's published input-preprocessing constants; pixels live in
// [0,1] and are normalised on the way into the network, exactly like real
// data would be.
inline datasets::Dataset invert(models::Model& teacher, const InversionSpec& spec, double norm_mean,
                                double norm_std) {
    validate(spec);
    if (spec.tv_weight > 0.0 && teacher.spec.input_shape.size() != 3)
        throw ParameterError("inversion: total-variation term needs image-shaped ({c,h,w}) inputs");
    teacher.set_trainable(false);
    teacher.set_mode(models::Mode::eval);
    teacher.zero_grad();
    const uint64_t teacher_sum = teacher.checksum();

    const int classes = teacher.spec.num_classes;
    const size_t sample = shape_numel(teacher.spec.input_shape);

    datasets::Dataset d;
    std::vector<double> values(static_cast<size_t>(classes) * spec.samples_per_class * sample);
    d.labels.resize(static_cast<size_t>(classes) * spec.samples_per_class);

    for (int y = 0; y < classes; ++y) {
        std::vector<double> pixels;
        bool ok = false;
        for (uint64_t attempt = 0; attempt < 3 && !ok; ++attempt) {
            const uint64_t attempt_seed =
                derive_seed(spec.seed, "invert-class", static_cast<uint64_t>(y) * 16 + attempt);
            ok = detail::invert_class_batch(teacher, spec, y, spec.samples_per_class, attempt_seed,
                                            norm_mean, norm_std, pixels);
        }
        if (!ok)
            throw DataError("inversion diverged for class " + std::to_string(y) + " after 3 attempts");
        std::copy(pixels.begin(), pixels.end(),
                  values.begin() + static_cast<size_t>(y) * spec.samples_per_class * sample);
        for (int i = 0; i < spec.samples_per_class; ++i)
            d.labels[static_cast<size_t>(y) * spec.samples_per_class + i] = y;
    }

    if (teacher.checksum() != teacher_sum)
        throw ContractError("frozen teacher changed during inversion");

    Shape shape = {classes * spec.samples_per_class};
    shape.insert(shape.end(), teacher.spec.input_shape.begin(), teacher.spec.input_shape.end());
    d.inputs = Tensor::from_data(std::move(shape), std::move(values));
    d.num_classes = classes;
    d.split = "synthetic";
    d.norm_mean = norm_mean;
    d.norm_std = norm_std;
    return d;
}

struct DatafreeResult {
    models::Model model;
    optim::TrainReport report;
    datasets::Dataset synthetic;
    double mean_target_confidence = 0.0;  // teacher's sigma(logits)[target] on the synthetic set
    double mean_total_variation = 0.0;
};

// Invert, then distill a student on the synthetic set. Takes no dataset:
// evaluation against real held-out data is the caller's business.
inline DatafreeResult datafree_distill(models::Model& teacher, const models::ModelSpec& student_spec,
                                       const InversionSpec& inv, const objectives::KDParams& kd,
                                       uint64_t seed, const optim::OptimizerSpec& opt,
                                       const optim::ScheduleSpec& sched,
                                       double norm_mean, double norm_std) {
    DatafreeResult res;
    res.synthetic = invert(teacher, inv, norm_mean, norm_std);

    // Teacher-side statistics of the synthetic set.
    {
        const std::vector<double> table = distill::reference_logits(teacher, res.synthetic);
        const int classes = teacher.spec.num_classes;
        double conf = 0.0;
        for (size_t i = 0; i < res.synthetic.size(); ++i) {
            const double* row = table.data() + i * static_cast<size_t>(classes);
            double m = row[0];
            for (int j = 1; j < classes; ++j) m = std::max(m, row[j]);
            double denom = 0.0;
            for (int j = 0; j < classes; ++j) denom += std::exp(row[j] - m);
            conf += std::exp(row[res.synthetic.labels[i]] - m) / denom;
        }
        res.mean_target_confidence = conf / static_cast<double>(res.synthetic.size());
        res.mean_total_variation = total_variation(res.synthetic.inputs).item();
    }

    distill::DistillRun run;
    run.student_spec = student_spec;
    run.kd = kd;
    run.fraction = 1.0;
    run.seed = seed;
    auto sres = distill::train_student(teacher, run, res.synthetic, nullptr, opt, sched);
    res.model = std::move(sres.model);
    res.report = std::move(sres.report);
    return res;
}

}  // namespace kdlab::datafree
