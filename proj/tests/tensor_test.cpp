#include <gtest/gtest.h>

#include <cmath>

#include "kdlab/rng.hpp"
#include "kdlab/tensor.hpp"
#include "support/gradcheck.hpp"

using kdlab::Tensor;
using testsupport::gradcheck;

namespace {

Tensor random_tensor(kdlab::Shape shape, uint64_t seed, bool requires_grad = true,
                     double lo = -1.0, double hi = 1.0) {
    kdlab::Rng rng(seed);
    std::vector<double> d(kdlab::shape_numel(shape));
    for (double& v : d) v = rng.uniform(lo, hi);
    return Tensor::from_data(std::move(shape), std::move(d), requires_grad);
}

TEST(Matmul, IdentityLeavesOperandUnchanged) {
    Tensor eye = Tensor::from_data({2, 2}, {1, 0, 0, 1});
    Tensor x = Tensor::from_data({2, 3}, {1, 2, 3, 4, 5, 6});
    Tensor y = kdlab::matmul(eye, x);
    EXPECT_EQ(y.data(), x.data());
}

TEST(Matmul, HandComputedProduct) {
    Tensor a = Tensor::from_data({2, 2}, {1, 2, 3, 4});
    Tensor b = Tensor::from_data({2, 1}, {1, 1});
    Tensor c = kdlab::matmul(a, b);
    ASSERT_EQ(c.shape(), (kdlab::Shape{2, 1}));
    EXPECT_DOUBLE_EQ(c.data()[0], 3.0);
    EXPECT_DOUBLE_EQ(c.data()[1], 7.0);
}

TEST(Matmul, ZeroMatrixAnnihilates) {
    Tensor z = Tensor::zeros({3, 3});
    Tensor x = random_tensor({3, 4}, 1, false);
    Tensor y = kdlab::matmul(z, x);
    for (double v : y.data()) EXPECT_DOUBLE_EQ(v, 0.0);
}

TEST(Matmul, ShapeMismatchNamesBothShapes) {
    Tensor a = Tensor::zeros({2, 3});
    Tensor b = Tensor::zeros({4, 2});
    try {
        kdlab::matmul(a, b);
        FAIL() << "expected DimensionError";
    } catch (const kdlab::DimensionError& e) {
        const std::string msg = e.what();
        EXPECT_NE(msg.find("[2 x 3]"), std::string::npos) << msg;
        EXPECT_NE(msg.find("[4 x 2]"), std::string::npos) << msg;
    }
}

TEST(Matmul, GradientMatchesFiniteDifferences) {
    Tensor a = random_tensor({3, 4}, 11);
    Tensor b = random_tensor({4, 2}, 12);
    auto res = gradcheck([&] { return kdlab::sum_all(kdlab::matmul(a, b)); }, {a, b});
    EXPECT_LE(res.max_rel_err, 1e-4) << res.worst;
}

TEST(Conv2d, OneByOneUnitKernelIsChannelSum) {
    Tensor x = random_tensor({2, 3, 4, 4}, 21, false);
    Tensor k = Tensor::full({1, 3, 1, 1}, 1.0);
    Tensor y = kdlab::conv2d(x, k, 1, 0);
    ASSERT_EQ(y.shape(), (kdlab::Shape{2, 1, 4, 4}));
    for (int n = 0; n < 2; ++n)
        for (int i = 0; i < 16; ++i) {
            double want = 0.0;
            for (int c = 0; c < 3; ++c) want += x.data()[(n * 3 + c) * 16 + i];
            EXPECT_NEAR(y.data()[n * 16 + i], want, 1e-12);
        }
}

TEST(Conv2d, AllOnesTwoByTwo) {
    Tensor x = Tensor::full({1, 1, 2, 2}, 1.0);
    Tensor k = Tensor::full({1, 1, 2, 2}, 1.0);
    Tensor y = kdlab::conv2d(x, k, 1, 0);
    ASSERT_EQ(y.shape(), (kdlab::Shape{1, 1, 1, 1}));
    EXPECT_DOUBLE_EQ(y.data()[0], 4.0);
}

TEST(Conv2d, KernelLargerThanPaddedInputFails) {
    Tensor x = Tensor::zeros({1, 1, 3, 3});
    Tensor k = Tensor::zeros({1, 1, 6, 6});
    EXPECT_THROW(kdlab::conv2d(x, k, 1, 1), kdlab::DimensionError);
}

TEST(Conv2d, OutputExtentFormula) {
    Tensor x = Tensor::zeros({1, 1, 7, 9});
    Tensor k = Tensor::zeros({2, 1, 3, 3});
    Tensor y = kdlab::conv2d(x, k, 2, 1);
    EXPECT_EQ(y.shape(), (kdlab::Shape{1, 2, 4, 5}));
}

TEST(Conv2d, GradientMatchesFiniteDifferences) {
    Tensor x = random_tensor({2, 2, 5, 5}, 31);
    Tensor k = random_tensor({3, 2, 3, 3}, 32);
    auto res = gradcheck([&] { return kdlab::mean_all(kdlab::conv2d(x, k, 1, 1)); }, {x, k});
    EXPECT_LE(res.max_rel_err, 1e-3) << res.worst;
}

TEST(Conv2d, StridedGradientMatchesFiniteDifferences) {
    Tensor x = random_tensor({1, 1, 6, 6}, 33);
    Tensor k = random_tensor({2, 1, 3, 3}, 34);
    auto res = gradcheck([&] { return kdlab::sum_all(kdlab::conv2d(x, k, 2, 0)); }, {x, k});
    EXPECT_LE(res.max_rel_err, 1e-3) << res.worst;
}

TEST(LogSoftmax, SymmetricPair) {
    Tensor x = Tensor::from_data({1, 2}, {0.0, 0.0});
    Tensor y = kdlab::log_softmax(x);
    EXPECT_NEAR(y.data()[0], -std::log(2.0), 1e-12);
    EXPECT_NEAR(y.data()[1], -std::log(2.0), 1e-12);
}

TEST(LogSoftmax, NoOverflowAtExtremeLogits) {
    Tensor x = Tensor::from_data({1, 2}, {1000.0, 0.0});
    Tensor y = kdlab::log_softmax(x);
    EXPECT_NEAR(y.data()[0], 0.0, 1e-12);
    EXPECT_NEAR(y.data()[1], -1000.0, 1e-9);
    for (double v : y.data()) EXPECT_TRUE(std::isfinite(v));
}

TEST(LogSoftmax, HandComputedValues) {
    Tensor x = Tensor::from_data({1, 2}, {2.0, 0.0});
    Tensor y = kdlab::log_softmax(x);
    EXPECT_NEAR(y.data()[0], -0.1269280110429727, 1e-4);
    EXPECT_NEAR(y.data()[1], -2.1269280110429727, 1e-4);
}

TEST(LogSoftmax, RowsExponentiateToOne) {
    Tensor x = random_tensor({8, 6}, 41, false, -50.0, 50.0);
    Tensor y = kdlab::log_softmax(x);
    for (int r = 0; r < 8; ++r) {
        double s = 0.0;
        for (int c = 0; c < 6; ++c) s += std::exp(y.data()[r * 6 + c]);
        EXPECT_NEAR(s, 1.0, 1e-6);
    }
}

TEST(LogSoftmax, NanInputRejected) {
    Tensor x = Tensor::from_data({1, 2}, {std::nan(""), 0.0});
    EXPECT_THROW(kdlab::log_softmax(x), kdlab::DataError);
}

TEST(LogSoftmax, GradientMatchesFiniteDifferences) {
    Tensor x = random_tensor({3, 5}, 42);
    auto res = gradcheck(
        [&] { return kdlab::sum_all(kdlab::mul(kdlab::log_softmax(x), kdlab::log_softmax(x))); }, {x});
    EXPECT_LE(res.max_rel_err, 1e-4) << res.worst;
}

TEST(Backward, SumGivesOnes) {
    Tensor w = random_tensor({2, 3}, 51);
    kdlab::sum_all(w).backward();
    for (double g : w.grad()) EXPECT_DOUBLE_EQ(g, 1.0);
}

TEST(Backward, QuadraticGivesTwoW) {
    Tensor w = random_tensor({4}, 52);
    kdlab::sum_all(kdlab::mul(w, w)).backward();
    for (size_t i = 0; i < w.numel(); ++i) EXPECT_NEAR(w.grad()[i], 2.0 * w.data()[i], 1e-12);
}

TEST(Backward, NonScalarLossRejected) {
    Tensor w = random_tensor({2, 2}, 53);
    EXPECT_THROW(kdlab::mul(w, w).backward(), kdlab::ContractError);
}

TEST(Backward, SecondCallAccumulates) {
    // Documented semantics: gradients accumulate until explicitly zeroed.
    Tensor w = random_tensor({3}, 54);
    Tensor loss = kdlab::sum_all(w);
    loss.backward();
    loss.backward();
    for (double g : w.grad()) EXPECT_DOUBLE_EQ(g, 2.0);
    w.zero_grad();
    loss.backward();
    for (double g : w.grad()) EXPECT_DOUBLE_EQ(g, 1.0);
}

TEST(Backward, TwoLayerMlpMatchesFiniteDifferences) {
    Tensor x = random_tensor({4, 6}, 61, false);
    Tensor w1 = random_tensor({6, 5}, 62);
    Tensor b1 = random_tensor({5}, 63);
    Tensor w2 = random_tensor({5, 3}, 64);
    Tensor b2 = random_tensor({3}, 65);
    std::vector<int> labels = {0, 2, 1, 2};
    auto build = [&] {
        Tensor h = kdlab::relu(kdlab::add_rowvec(kdlab::matmul(x, w1), b1));
        Tensor logits = kdlab::add_rowvec(kdlab::matmul(h, w2), b2);
        return kdlab::nll_loss(kdlab::log_softmax(logits), labels);
    };
    auto res = gradcheck(build, {w1, b1, w2, b2});
    EXPECT_LE(res.max_rel_err, 1e-4) << res.worst;
}

TEST(Backward, GradsFiniteForFiniteInputs) {
    Tensor x = random_tensor({8, 10}, 71, false, -5.0, 5.0);
    Tensor w = random_tensor({10, 4}, 72);
    std::vector<int> labels(8, 1);
    Tensor loss = kdlab::nll_loss(kdlab::log_softmax(kdlab::matmul(x, w)), labels);
    loss.backward();
    for (double g : w.grad()) EXPECT_TRUE(std::isfinite(g));
}

TEST(Detach, SameForwardZeroGradient) {
    Tensor w = random_tensor({3}, 81);
    Tensor d = w.detach();
    EXPECT_EQ(d.data(), w.data());
    EXPECT_FALSE(d.requires_grad());
    // w contributes through one path only; d blocks the other.
    Tensor loss = kdlab::sum_all(kdlab::mul(w, d));
    loss.backward();
    EXPECT_FALSE(d.has_grad());
    for (size_t i = 0; i < w.numel(); ++i) EXPECT_NEAR(w.grad()[i], d.data()[i], 1e-12);
}

TEST(MaxPool, ForwardAndTieBreakLowestIndex) {
    Tensor x = Tensor::from_data({1, 1, 2, 2}, {7.0, 7.0, 7.0, 7.0}, true);
    Tensor y = kdlab::max_pool2d(x, 2, 2);
    EXPECT_DOUBLE_EQ(y.data()[0], 7.0);
    kdlab::sum_all(y).backward();
    EXPECT_DOUBLE_EQ(x.grad()[0], 1.0);  // first element of the window wins ties
    EXPECT_DOUBLE_EQ(x.grad()[1], 0.0);
    EXPECT_DOUBLE_EQ(x.grad()[2], 0.0);
    EXPECT_DOUBLE_EQ(x.grad()[3], 0.0);
}

TEST(MaxPool, GradientMatchesFiniteDifferences) {
    Tensor x = random_tensor({2, 2, 6, 6}, 91);
    auto res = gradcheck([&] { return kdlab::sum_all(kdlab::max_pool2d(x, 2, 2)); }, {x});
    EXPECT_LE(res.max_rel_err, 1e-4) << res.worst;
}

TEST(Reshape, RoundTripGradient) {
    Tensor x = random_tensor({2, 6}, 92);
    auto res = gradcheck(
        [&] { return kdlab::sum_all(kdlab::mul(kdlab::reshape(x, {3, 4}), kdlab::reshape(x, {3, 4}))); },
        {x});
    EXPECT_LE(res.max_rel_err, 1e-4) << res.worst;
    EXPECT_THROW(kdlab::reshape(x, {5, 5}), kdlab::DimensionError);
}

TEST(Elementwise, GradientsMatchFiniteDifferences) {
    Tensor a = random_tensor({7}, 93);
    Tensor b = random_tensor({7}, 94);
    auto build = [&] {
        Tensor t = kdlab::add(kdlab::mul(a, b), kdlab::sub(a, b));
        t = kdlab::relu(t);
        t = kdlab::add_scalar(kdlab::mul_scalar(t, 1.7), 0.3);
        return kdlab::mean_all(kdlab::mul(t, kdlab::exp(kdlab::mul_scalar(b, 0.5))));
    };
    auto res = gradcheck(build, {a, b});
    EXPECT_LE(res.max_rel_err, 1e-4) << res.worst;
}

TEST(Elementwise, BiasBroadcastGradients) {
    Tensor m = random_tensor({4, 3}, 95);
    Tensor v = random_tensor({3}, 96);
    auto res = gradcheck([&] { return kdlab::mean_all(kdlab::relu(kdlab::add_rowvec(m, v))); }, {m, v});
    EXPECT_LE(res.max_rel_err, 1e-4) << res.worst;

    Tensor x = random_tensor({2, 3, 4, 4}, 97);
    Tensor cb = random_tensor({3}, 98);
    auto res2 =
        gradcheck([&] { return kdlab::mean_all(kdlab::add_channel_bias(x, cb)); }, {x, cb});
    EXPECT_LE(res2.max_rel_err, 1e-4) << res2.worst;
}

TEST(KlDiv, IdenticalDistributionsGiveZero) {
    Tensor p = Tensor::from_data({1, 3}, {0.2, 0.5, 0.3});
    Tensor q = Tensor::from_data({1, 3}, {0.2, 0.5, 0.3});
    EXPECT_DOUBLE_EQ(kdlab::kl_div(p, q).item(), 0.0);
}

TEST(KlDiv, HandComputedLogTwo) {
    Tensor p = Tensor::from_data({1, 2}, {1.0, 0.0});
    Tensor q = Tensor::from_data({1, 2}, {0.5, 0.5});
    EXPECT_NEAR(kdlab::kl_div(p, q).item(), std::log(2.0), 1e-4);
}

TEST(KlDiv, NonNegativeOverManyRandomPairs) {
    kdlab::Rng rng(123);
    for (int trial = 0; trial < 10000; ++trial) {
        std::vector<double> p(5), q(5);
        double sp = 0.0, sq = 0.0;
        for (int i = 0; i < 5; ++i) {
            p[i] = rng.uniform(1e-6, 1.0);
            q[i] = rng.uniform(1e-6, 1.0);
            sp += p[i];
            sq += q[i];
        }
        for (int i = 0; i < 5; ++i) {
            p[i] /= sp;
            q[i] /= sq;
        }
        const double v =
            kdlab::kl_div(Tensor::from_data({1, 5}, p), Tensor::from_data({1, 5}, q)).item();
        ASSERT_GE(v, -1e-7);
    }
}

TEST(KlDiv, ZeroInQIsFloored) {
    Tensor p = Tensor::from_data({1, 2}, {0.5, 0.5});
    Tensor q = Tensor::from_data({1, 2}, {1.0, 0.0});
    const double v = kdlab::kl_div(p, q).item();
    EXPECT_TRUE(std::isfinite(v));
}

TEST(KlDiv, NonProbabilityRowsRejected) {
    Tensor p = Tensor::from_data({1, 2}, {0.7, 0.7});
    Tensor q = Tensor::from_data({1, 2}, {0.5, 0.5});
    EXPECT_THROW(kdlab::kl_div(p, q), kdlab::DataError);
}

TEST(KlDiv, GradientMatchesFiniteDifferencesInterior) {
    Tensor p = Tensor::from_data({2, 3}, {0.2, 0.5, 0.3, 0.4, 0.4, 0.2}, true);
    Tensor q = Tensor::from_data({2, 3}, {0.3, 0.3, 0.4, 0.25, 0.5, 0.25}, true);
    // Perturbed rows no longer sum to one; real callers feed softmax outputs,
    // so probe through a renormalising stub would change the function. Use a
    // small eps instead and compare against the analytic rule directly.
    auto res = gradcheck([&] { return kdlab::kl_div(p, q); }, {p, q}, 1e-6);
    EXPECT_LE(res.max_rel_err, 1e-3) << res.worst;
}

TEST(NllLoss, LabelOutOfRangeRejected) {
    Tensor lp = kdlab::log_softmax(Tensor::from_data({1, 3}, {0.1, 0.2, 0.3}));
    EXPECT_THROW(kdlab::nll_loss(lp, {3}), kdlab::DataError);
    EXPECT_THROW(kdlab::nll_loss(lp, {-1}), kdlab::DataError);
}

TEST(TotalVariation, ConstantImageIsZeroAndGradChecks) {
    Tensor flat = Tensor::full({1, 1, 4, 4}, 0.7);
    EXPECT_DOUBLE_EQ(kdlab::total_variation(flat).item(), 0.0);

    Tensor x = random_tensor({2, 1, 5, 5}, 99);
    auto res = gradcheck([&] { return kdlab::total_variation(x); }, {x});
    EXPECT_LE(res.max_rel_err, 1e-4) << res.worst;
}

TEST(Determinism, SameExpressionSameBits) {
    Tensor a = random_tensor({16, 16}, 101, false);
    Tensor b = random_tensor({16, 16}, 102, false);
    Tensor y1 = kdlab::matmul(a, b);
    Tensor y2 = kdlab::matmul(a, b);
    EXPECT_EQ(y1.data(), y2.data());
}

TEST(CompositeProperty, RandomExpressionsGradCheck) {
    for (uint64_t seed = 1; seed <= 5; ++seed) {
        Tensor x = random_tensor({3, 8}, 200 + seed, false);
        Tensor w1 = random_tensor({8, 6}, 300 + seed);
        Tensor w2 = random_tensor({6, 4}, 400 + seed);
        std::vector<int> labels = {1, 0, 3};
        auto build = [&] {
            Tensor h = kdlab::relu(kdlab::matmul(x, w1));
            Tensor logits = kdlab::matmul(h, w2);
            Tensor ls = kdlab::log_softmax(logits);
            return kdlab::add(kdlab::nll_loss(ls, labels),
                              kdlab::mul_scalar(kdlab::sum_all(kdlab::mul(w2, w2)), 0.01));
        };
        auto res = gradcheck(build, {w1, w2});
        ASSERT_LE(res.max_rel_err, 1e-4) << "seed " << seed << " " << res.worst;
    }
}

}  // namespace
