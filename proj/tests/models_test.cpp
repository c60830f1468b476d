#include <gtest/gtest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "kdlab/models.hpp"
#include "kdlab/rng.hpp"

namespace models = kdlab::models;
using kdlab::Tensor;

namespace {

std::filesystem::path temp_file(const std::string& name) {
    return std::filesystem::temp_directory_path() / name;
}

Tensor random_input(const models::ModelSpec& spec, int batch, uint64_t seed) {
    kdlab::Shape shape = {batch};
    shape.insert(shape.end(), spec.input_shape.begin(), spec.input_shape.end());
    kdlab::Rng rng(seed);
    std::vector<double> d(kdlab::shape_numel(shape));
    for (double& v : d) v = rng.uniform(0.0, 1.0);
    return Tensor::from_data(std::move(shape), std::move(d));
}

TEST(Build, SameSpecSameSeedIsBitwiseIdentical) {
    const auto spec = models::ModelSpec::mlp({784}, 10);
    auto a = models::build(spec, 7);
    auto b = models::build(spec, 7);
    EXPECT_EQ(a.checksum(), b.checksum());
    auto c = models::build(spec, 8);
    EXPECT_NE(a.checksum(), c.checksum());
}

TEST(Build, UnknownKindRejected) {
    models::ModelSpec bad = models::ModelSpec::mlp({784});
    bad.kind = "resnet18";
    EXPECT_THROW(models::build(bad, 0), kdlab::ConfigError);
}

TEST(Build, SmallCnnForwardShape) {
    auto m = models::build(models::ModelSpec::small_cnn(), 1);
    Tensor logits = m.forward(random_input(m.spec, 3, 5));
    EXPECT_EQ(logits.shape(), (kdlab::Shape{3, 10}));
}

TEST(Build, ParamCountOrderingAndArithmetic) {
    const size_t tiny = models::param_count(models::ModelSpec::tiny_cnn());
    const size_t mlp = models::param_count(models::ModelSpec::mlp({784}));
    const size_t small = models::param_count(models::ModelSpec::small_cnn());
    EXPECT_LT(tiny, mlp);
    EXPECT_LT(mlp, small);
    // Counted from the layer plans by hand.
    EXPECT_EQ(tiny, 10314u);
    EXPECT_EQ(mlp, 101770u);
    EXPECT_EQ(small, 299230u);
    auto m = models::build(models::ModelSpec::tiny_cnn(), 3);
    size_t total = 0;
    for (const auto& [name, t] : m.parameters()) total += t.numel();
    EXPECT_EQ(total, tiny);
}

TEST(Forward, ZeroFinalLayerGivesZeroLogits) {
    auto m = models::build(models::ModelSpec::mlp({20}, 4, {8}), 2);
    for (double& v : m.param("fc2.weight").data()) v = 0.0;
    for (double& v : m.param("fc2.bias").data()) v = 0.0;
    Tensor logits = m.forward(random_input(m.spec, 5, 6));
    for (double v : logits.data()) EXPECT_DOUBLE_EQ(v, 0.0);
}

TEST(Forward, BatchIndependence) {
    auto m = models::build(models::ModelSpec::small_cnn(), 11);
    Tensor big = random_input(m.spec, 32, 21);
    Tensor big_logits = m.forward(big);
    // Row 17 run alone must match the same row inside the batch.
    const size_t sample = kdlab::shape_numel(m.spec.input_shape);
    std::vector<double> one(big.data().begin() + 17 * sample, big.data().begin() + 18 * sample);
    kdlab::Shape one_shape = {1};
    one_shape.insert(one_shape.end(), m.spec.input_shape.begin(), m.spec.input_shape.end());
    Tensor single = m.forward(Tensor::from_data(one_shape, one));
    for (int c = 0; c < 10; ++c)
        EXPECT_NEAR(single.data()[c], big_logits.data()[17 * 10 + c], 1e-6);
}

TEST(Forward, FiniteLogitsOverRandomDraws) {
    auto m = models::build(models::ModelSpec::tiny_cnn(), 13);
    for (uint64_t batch = 0; batch < 8; ++batch) {
        Tensor logits = m.forward(random_input(m.spec, 128, 100 + batch));
        for (double v : logits.data()) ASSERT_TRUE(std::isfinite(v));
    }
}

TEST(Forward, InputShapeMismatchRejected) {
    auto m = models::build(models::ModelSpec::small_cnn(), 1);
    EXPECT_THROW(m.forward(Tensor::zeros({2, 1, 27, 28})), kdlab::DimensionError);
}

TEST(Forward, PureGivenParametersAndInput) {
    auto m = models::build(models::ModelSpec::tiny_cnn(), 17);
    Tensor x = random_input(m.spec, 4, 30);
    auto a = m.forward(x);
    auto b = m.forward(x);
    EXPECT_EQ(a.data(), b.data());
    EXPECT_EQ(m.checksum(), models::build(models::ModelSpec::tiny_cnn(), 17).checksum());
}

TEST(Forward, EmbeddingFeedsFinalLayer) {
    auto m = models::build(models::ModelSpec::mlp({12}, 3, {6}), 19);
    auto parts = m.forward_parts(random_input(m.spec, 2, 23));
    EXPECT_EQ(parts.embedding.shape(), (kdlab::Shape{2, 6}));
    EXPECT_EQ(parts.logits.shape(), (kdlab::Shape{2, 3}));
}

TEST(Checkpoint, RoundTripIsBitExact) {
    auto m = models::build(models::ModelSpec::small_cnn(), 23);
    const auto path = temp_file("kdlab_ckpt_roundtrip.ckpt");
    models::save(m, path.string());
    auto loaded = models::load(path.string());
    EXPECT_EQ(loaded.checksum(), m.checksum());
    EXPECT_EQ(loaded.spec, m.spec);
    Tensor x = random_input(m.spec, 2, 29);
    EXPECT_EQ(loaded.forward(x).data(), m.forward(x).data());
    std::filesystem::remove(path);
}

TEST(Checkpoint, WrongMagicRejected) {
    const auto path = temp_file("kdlab_ckpt_badmagic.ckpt");
    {
        std::ofstream os(path, std::ios::binary);
        os.write("NOTAMODL", 8);
        os.write("xxxx", 4);
    }
    EXPECT_THROW(models::load(path.string()), kdlab::CheckpointError);
    std::filesystem::remove(path);
}

TEST(Checkpoint, TruncatedFileRejected) {
    auto m = models::build(models::ModelSpec::tiny_cnn(), 31);
    const auto path = temp_file("kdlab_ckpt_trunc.ckpt");
    models::save(m, path.string());
    const auto full = std::filesystem::file_size(path);
    std::filesystem::resize_file(path, full / 2);
    EXPECT_THROW(models::load(path.string()), kdlab::CheckpointError);
    std::filesystem::remove(path);
}

TEST(Checkpoint, VersionMismatchRejected) {
    auto m = models::build(models::ModelSpec::tiny_cnn(), 37);
    const auto path = temp_file("kdlab_ckpt_version.ckpt");
    models::save(m, path.string());
    {
        std::fstream fs(path, std::ios::in | std::ios::out | std::ios::binary);
        fs.seekp(8);
        const uint32_t bogus = 999;
        fs.write(reinterpret_cast<const char*>(&bogus), sizeof(bogus));
    }
    EXPECT_THROW(models::load(path.string()), kdlab::CheckpointError);
    std::filesystem::remove(path);
}

TEST(SpecJson, RoundTripsLosslessly) {
    const auto spec = models::ModelSpec::small_cnn({1, 28, 28}, 10);
    const auto j = models::spec_to_json(spec);
    EXPECT_EQ(models::spec_from_json(j), spec);
    EXPECT_EQ(models::spec_to_json(models::spec_from_json(j)).dump(), j.dump());
}

TEST(SpecJson, UnknownKeyRejected) {
    auto j = models::spec_to_json(models::ModelSpec::mlp({784}));
    j["widthz"] = 3;
    EXPECT_THROW(models::spec_from_json(j), kdlab::ConfigError);
}

TEST(Freeze, TrainableFlagTogglesGradientTracking) {
    auto m = models::build(models::ModelSpec::mlp({6}, 2, {4}), 41);
    m.set_trainable(false);
    Tensor logits = m.forward(random_input(m.spec, 2, 43));
    EXPECT_FALSE(logits.requires_grad());
    m.set_trainable(true);
    Tensor logits2 = m.forward(random_input(m.spec, 2, 43));
    EXPECT_TRUE(logits2.requires_grad());
}

}  // namespace
