#pragma once

#include <chrono>
#include <cmath>
#include <functional>
#include <numeric>
#include <string>
#include <vector>

#include "kdlab/datasets.hpp"
#include "kdlab/errors.hpp"
#include "kdlab/models.hpp"
#include "kdlab/objectives.hpp"
#include "kdlab/rng.hpp"

// Optimizers, milestone learning-rate schedules and the generic train /
// evaluate loops. Training is deterministic given the seed: per-epoch
// shuffles come from substreams derived as (seed, epoch), so a run resumed
// at start_epoch k replays exactly the epochs an uninterrupted run would.

namespace kdlab::optim {

struct OptimizerSpec {
    std::string kind = "sgd_momentum";  // "sgd_momentum" | "adam"
    double lr = 0.05;
    double momentum = 0.9;
    double weight_decay = 5e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

struct ScheduleSpec {
    std::vector<int> milestones;  // 0-based epochs at which the rate decays
    double decay_factor = 0.1;
    int total_epochs = 30;
};

inline void validate(const OptimizerSpec& s) {
    if (s.kind != "sgd_momentum" && s.kind != "adam")
        throw ConfigError("unknown optimizer kind '" + s.kind + "'");
    if (s.lr < 0.0) throw ParameterError("optimizer: lr must be >= 0");
    if (s.momentum < 0.0 || s.momentum >= 1.0) throw ParameterError("optimizer: momentum must be in [0,1)");
    if (s.weight_decay < 0.0) throw ParameterError("optimizer: weight_decay must be >= 0");
}

inline void validate(const ScheduleSpec& s) {
    if (s.total_epochs < 0) throw ParameterError("schedule: total_epochs must be >= 0");
    if (s.decay_factor <= 0.0 || s.decay_factor > 1.0)
        throw ParameterError("schedule: decay_factor must be in (0,1]");
    for (size_t i = 0; i < s.milestones.size(); ++i) {
        if (i > 0 && s.milestones[i] <= s.milestones[i - 1])
            throw ParameterError("schedule: milestones must be strictly increasing");
        if (s.milestones[i] >= s.total_epochs)
            throw ParameterError("schedule: milestones must lie before total_epochs");
        if (s.milestones[i] < 0) throw ParameterError("schedule: milestones must be >= 0");
    }
}

// lr after the k-th milestone is exactly lr0 * factor^k.
inline double lr_at(const ScheduleSpec& sched, double lr0, int epoch) {
    int k = 0;
    for (int m : sched.milestones)
        if (m <= epoch) ++k;
    return lr0 * std::pow(sched.decay_factor, k);
}

class Optimizer {
public:
    explicit Optimizer(OptimizerSpec spec) : spec_(std::move(spec)) { validate(spec_); }

    const OptimizerSpec& spec() const { return spec_; }

    void zero_grad(models::Model& m) { m.zero_grad(); }

    // One update over every trainable parameter; requires a populated grad.
    void step(models::Model& m, double lr) {
        ensure_state(m);
        ++t_;
        size_t si = 0;
        for (auto& [name, p] : m.parameters()) {
            if (!p.requires_grad()) continue;
            if (!p.has_grad())
                throw ContractError("optimizer step: missing gradient on trainable parameter '" + name + "'");
            auto& theta = p.data();
            const auto& g = p.grad();
            if (spec_.kind == "sgd_momentum") {
                auto& v = state_[si];
                for (size_t i = 0; i < theta.size(); ++i) {
                    const double gi = g[i] + spec_.weight_decay * theta[i];
                    v[i] = spec_.momentum * v[i] + gi;
                    theta[i] -= lr * v[i];
                }
            } else {  // adam
                auto& mbuf = state_[si];
                auto& vbuf = state2_[si];
                const double bc1 = 1.0 - std::pow(spec_.beta1, static_cast<double>(t_));
                const double bc2 = 1.0 - std::pow(spec_.beta2, static_cast<double>(t_));
                for (size_t i = 0; i < theta.size(); ++i) {
                    const double gi = g[i] + spec_.weight_decay * theta[i];
                    mbuf[i] = spec_.beta1 * mbuf[i] + (1.0 - spec_.beta1) * gi;
                    vbuf[i] = spec_.beta2 * vbuf[i] + (1.0 - spec_.beta2) * gi * gi;
                    theta[i] -= lr * (mbuf[i] / bc1) / (std::sqrt(vbuf[i] / bc2) + spec_.eps);
                }
            }
            ++si;
        }
    }

private:
    void ensure_state(const models::Model& m) {
        if (!state_.empty()) return;
        for (const auto& [name, p] : m.parameters()) {
            if (!p.requires_grad()) continue;
            state_.emplace_back(p.numel(), 0.0);
            if (spec_.kind == "adam") state2_.emplace_back(p.numel(), 0.0);
        }
    }

    OptimizerSpec spec_;
    std::vector<std::vector<double>> state_;   // sgd velocity / adam first moment
    std::vector<std::vector<double>> state2_;  // adam second moment
    int64_t t_ = 0;
};

struct EpochStat {
    int epoch = 0;  // 1-based in reports
    double lr = 0.0;
    double train_loss = 0.0;
    double train_acc = 0.0;
    double test_acc = std::numeric_limits<double>::quiet_NaN();
    double wall_ms = 0.0;
};

struct TrainReport {
    std::vector<EpochStat> epochs;
    bool diverged = false;
    std::string divergence_reason;
    double max_abs_logit = 0.0;
    std::vector<double> step_losses;  // only filled when traced

    double final_train_acc() const { return epochs.empty() ? 0.0 : epochs.back().train_acc; }
    double final_test_acc() const {
        return epochs.empty() ? std::numeric_limits<double>::quiet_NaN() : epochs.back().test_acc;
    }
};

struct TrainOptions {
    int batch_size = 128;
    int start_epoch = 0;              // resume point; epochs replay identically
    bool record_step_losses = false;
    const datasets::Dataset* eval_data = nullptr;  // per-epoch test metrics when set
};

// Objective closure: builds the scalar loss from the logits the trainer just
// computed. idx carries the dataset positions of the batch rows so teacher
// logits (or anything else precomputed per sample) can be looked up.
using Objective = std::function<Tensor(const Tensor& logits, const std::vector<int>& labels,
                                       const std::vector<size_t>& idx)>;

struct EvalResult {
    double accuracy = 0.0;
    double mean_loss = 0.0;
};

inline int argmax_lowest(const double* row, int n) {
    int best = 0;
    for (int j = 1; j < n; ++j)
        if (row[j] > row[best]) best = j;  // strict: ties keep the lowest index
    return best;
}

// Accuracy and batch-mean cross-entropy, accumulated per sample so the
// result is invariant to how the data is split into batches.
inline EvalResult evaluate(models::Model& m, const datasets::Dataset& data, int batch_size = 256) {
    const auto saved_mode = m.mode;
    m.set_mode(models::Mode::eval);
    const bool was_trainable = m.trainable();
    m.set_trainable(false);  // plain forward, no graph bookkeeping
    size_t correct = 0;
    double loss_sum = 0.0;
    const size_t n = data.size();
    std::vector<size_t> idx(batch_size);
    for (size_t at = 0; at < n; at += static_cast<size_t>(batch_size)) {
        const size_t bs = std::min(static_cast<size_t>(batch_size), n - at);
        idx.resize(bs);
        std::iota(idx.begin(), idx.end(), at);
        Tensor x = data.batch_inputs(idx);
        std::vector<int> labels = data.batch_labels(idx);
        Tensor logits = m.forward(x);
        const int c = logits.shape()[1];
        Tensor logp = log_softmax(logits);
        for (size_t r = 0; r < bs; ++r) {
            if (argmax_lowest(logits.data().data() + r * c, c) == labels[r]) ++correct;
            loss_sum -= logp.data()[r * c + labels[r]];
        }
    }
    m.set_trainable(was_trainable);
    m.set_mode(saved_mode);
    return {static_cast<double>(correct) / static_cast<double>(n), loss_sum / static_cast<double>(n)};
}

inline TrainReport train(models::Model& m, const datasets::Dataset& data, const Objective& objective,
                         const OptimizerSpec& opt_spec, const ScheduleSpec& sched, uint64_t seed,
                         const TrainOptions& opts = {}) {
    validate(opt_spec);
    validate(sched);
    if (data.size() == 0) throw DataError("train: empty dataset");
    if (opts.batch_size < 1) throw ParameterError("train: batch_size must be >= 1");

    TrainReport report;
    Optimizer optimizer(opt_spec);
    std::vector<size_t> order(data.size());
    std::iota(order.begin(), order.end(), 0);

    const int quarter = (sched.total_epochs >= 4) ? (sched.total_epochs + 3) / 4 : 0;

    for (int epoch = opts.start_epoch; epoch < sched.total_epochs; ++epoch) {
        const auto t0 = std::chrono::steady_clock::now();
        const double lr = lr_at(sched, opt_spec.lr, epoch);
        m.set_mode(models::Mode::train);

        Rng shuffle_rng(derive_seed(seed, "epoch-shuffle", static_cast<uint64_t>(epoch)));
        std::iota(order.begin(), order.end(), 0);
        shuffle_rng.shuffle(order);

        double loss_sum = 0.0;
        size_t correct = 0;
        bool nan_loss = false;
        for (size_t at = 0; at < order.size(); at += static_cast<size_t>(opts.batch_size)) {
            const size_t bs = std::min(static_cast<size_t>(opts.batch_size), order.size() - at);
            const std::vector<size_t> idx(order.begin() + at, order.begin() + at + bs);
            Tensor x = data.batch_inputs(idx);
            std::vector<int> labels = data.batch_labels(idx);

            Tensor logits = m.forward(x);
            const int c = logits.shape()[1];
            for (size_t r = 0; r < bs; ++r) {
                if (argmax_lowest(logits.data().data() + r * c, c) == labels[r]) ++correct;
                for (int j = 0; j < c; ++j)
                    report.max_abs_logit = std::max(report.max_abs_logit, std::abs(logits.data()[r * c + j]));
            }

            Tensor loss = objective(logits, labels, idx);
            const double lv = loss.item();
            if (opts.record_step_losses) report.step_losses.push_back(lv);
            if (!std::isfinite(lv)) {
                nan_loss = true;
                break;
            }
            loss_sum += lv * static_cast<double>(bs);

            optimizer.zero_grad(m);
            loss.backward();
            optimizer.step(m, lr);
        }

        EpochStat stat;
        stat.epoch = epoch + 1;
        stat.lr = lr;
        stat.train_loss = loss_sum / static_cast<double>(order.size());
        stat.train_acc = static_cast<double>(correct) / static_cast<double>(order.size());
        if (opts.eval_data) stat.test_acc = evaluate(m, *opts.eval_data).accuracy;
        stat.wall_ms =
            std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
        report.epochs.push_back(stat);

        if (nan_loss) {
            report.diverged = true;
            report.divergence_reason = "non-finite loss at epoch " + std::to_string(epoch + 1);
            break;
        }
        if (quarter > 0 && epoch + 1 == quarter) {
            const double chance = 1.0 / static_cast<double>(data.num_classes);
            if (stat.train_acc <= 1.5 * chance) {
                report.diverged = true;
                report.divergence_reason = "train accuracy at/below 1.5x chance after 25% of epochs";
            }
        }
    }
    return report;
}

}  // namespace kdlab::optim
