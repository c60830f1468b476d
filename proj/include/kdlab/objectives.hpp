#pragma once

#include <vector>

#include "kdlab/errors.hpp"
#include "kdlab/tensor.hpp"

// Loss functions: temperature softmax, cross-entropy, KL divergence, the
// distillation objective and the self-undermining teacher objective.
//
// Batch reduction is the arithmetic mean for both the XE and KL terms, so
// alpha and omega are scale-free with respect to batch size.
//
// KL argument order is always (reference distribution || trained
// distribution) with the reference first: kd_loss uses KL(teacher || student)
// and nasty_loss uses KL(teacher || adversary). No reversed option is exposed.

namespace kdlab::objectives {

struct KDParams {
    double alpha = 0.9;
    double tau_s = 4.0;
};

struct NastyParams {
    double omega = 0.004;
    double tau_a = 4.0;
};

inline void validate(const KDParams& p) {
    if (p.alpha < 0.0 || p.alpha > 1.0)
        throw ParameterError("kd: alpha must be in [0,1], got " + std::to_string(p.alpha));
    if (p.tau_s < 1.0) throw ParameterError("kd: tau_s must be >= 1, got " + std::to_string(p.tau_s));
}

inline void validate(const NastyParams& p) {
    if (p.omega < 0.0) throw ParameterError("nasty: omega must be >= 0, got " + std::to_string(p.omega));
    if (p.tau_a < 1.0) throw ParameterError("nasty: tau_a must be >= 1, got " + std::to_string(p.tau_a));
}

// Row-wise softmax of logits / tau. tau = 1 is the plain softmax.
inline Tensor softmax_temperature(const Tensor& logits, double tau) {
    if (tau <= 0.0) throw ParameterError("softmax_temperature: tau must be > 0, got " + std::to_string(tau));
    return exp(log_softmax(mul_scalar(logits, 1.0 / tau)));
}

// Batch-mean cross-entropy of logits against integer labels.
inline Tensor cross_entropy(const Tensor& logits, const std::vector<int>& labels) {
    return nll_loss(log_softmax(logits), labels);
}

// Batch-mean KL(p || q) over probability rows. Thin wrapper so the epsilon
// floor and 0 log 0 convention live in one place (tensor.hpp).
inline Tensor kl_divergence(const Tensor& p, const Tensor& q) { return kl_div(p, q); }

namespace detail {
inline void require_frozen(const Tensor& t, const char* who) {
    if (t.requires_grad())
        throw ContractError(std::string(who) + " logits must be detached (gradient would reach a frozen network)");
}
}  // namespace detail

// alpha * tau_s^2 * KL(sigma_tau(teacher) || sigma_tau(student))
//   + (1 - alpha) * XE(student, labels)
// Teacher logits must carry no gradient.
inline Tensor kd_loss(const Tensor& student_logits, const Tensor& teacher_logits,
                      const std::vector<int>& labels, const KDParams& kd) {
    validate(kd);
    detail::require_frozen(teacher_logits, "teacher");
    const Tensor pt = softmax_temperature(teacher_logits, kd.tau_s);
    const Tensor ps = softmax_temperature(student_logits, kd.tau_s);
    const Tensor soft = mul_scalar(kl_divergence(pt, ps), kd.alpha * kd.tau_s * kd.tau_s);
    const Tensor hard = mul_scalar(cross_entropy(student_logits, labels), 1.0 - kd.alpha);
    return add(soft, hard);
}

// XE(teacher, labels) - omega * tau_a^2 * KL(sigma_tau(teacher) || sigma_tau(adversary))
// The subtracted KL is what gets maximised; the loss may go negative.
// Adversary logits must carry no gradient.
inline Tensor nasty_loss(const Tensor& teacher_logits, const Tensor& adversary_logits,
                         const std::vector<int>& labels, const NastyParams& np) {
    validate(np);
    detail::require_frozen(adversary_logits, "adversary");
    const Tensor pt = softmax_temperature(teacher_logits, np.tau_a);
    const Tensor pa = softmax_temperature(adversary_logits, np.tau_a);
    const Tensor repel = mul_scalar(kl_divergence(pt, pa), np.omega * np.tau_a * np.tau_a);
    return sub(cross_entropy(teacher_logits, labels), repel);
}

}  // namespace kdlab::objectives
