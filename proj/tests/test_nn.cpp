#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "onell/nn.hpp"

using namespace onell;
using namespace onell::nn;

namespace {

template <class S>
TrainingBatch<S> random_batch(const NetworkSpec& spec, int cols, RngStream& rng, double target_scale) {
    TrainingBatch<S> b;
    b.inputs.resize(spec.input_dim, cols);
    b.targets.resize(spec.total_outputs(), cols);
    b.mask = Matrix<S>::Zero(spec.total_outputs(), cols);
    for (Eigen::Index i = 0; i < b.inputs.size(); ++i) b.inputs.data()[i] = static_cast<S>(2 * rng.uniform() - 1);
    for (Eigen::Index i = 0; i < b.targets.size(); ++i)
        b.targets.data()[i] = static_cast<S>(target_scale * (2 * rng.uniform() - 1));
    // One selected output per head and column, like a taken action.
    for (int j = 0; j < cols; ++j)
        for (std::size_t h = 0; h < spec.heads.size(); ++h)
            b.mask(spec.head_offset(h) + static_cast<int>(rng.below(static_cast<std::uint64_t>(spec.heads[h]))), j) = 1;
    return b;
}

// Max relative error between analytic and central-difference gradients.
double gradient_check(const NetworkSpec& spec, std::uint64_t seed) {
    RngStream rng(seed, 0);
    NetworkParams<double> params = init<double>(spec, rng);
    params.for_each([&](double& v) { v += 0.1 * (2 * rng.uniform() - 1); });
    const TrainingBatch<double> batch = random_batch<double>(spec, 9, rng, 3.0);
    const LossAndGradients<double> lg = backward(params, spec, batch);

    double worst = 0;
    const double h = 1e-6;
    for (std::size_t li = 0; li < params.layers.size(); ++li) {
        auto check = [&](auto& p, const auto& g) {
            for (Eigen::Index i = 0; i < p.size(); ++i) {
                const double orig = p.data()[i];
                p.data()[i] = orig + h;
                const double up = masked_huber_loss(params, spec, batch);
                p.data()[i] = orig - h;
                const double down = masked_huber_loss(params, spec, batch);
                p.data()[i] = orig;
                const double numeric = (up - down) / (2 * h);
                const double analytic = g.data()[i];
                // The floor keeps loss round-off on near-zero gradients out of the ratio.
                const double scale = std::max(1e-3, std::abs(numeric) + std::abs(analytic));
                worst = std::max(worst, std::abs(numeric - analytic) / scale);
            }
        };
        check(params.layers[li].weight, lg.gradients.layers[li].weight);
        check(params.layers[li].bias, lg.gradients.layers[li].bias);
    }
    return worst;
}

}  // namespace

TEST(Forward, ZeroParametersGiveZeroOutputs) {
    NetworkSpec spec;
    spec.heads = {7, 7, 7, 7};
    const auto params = NetworkParams<float>::zeros(spec);
    Matrix<float> x(1, 5);
    x << 0.0f, 0.2f, 0.5f, 0.9f, 1.0f;
    EXPECT_TRUE(forward_batch(params, spec, x).isZero());
}

TEST(Forward, HandComputedTinyNetwork) {
    NetworkSpec spec;
    spec.trunk = {1};
    spec.heads = {1};
    auto p = NetworkParams<double>::zeros(spec);
    p.layers[0].weight(0, 0) = 2.0;
    p.layers[0].bias(0) = -0.5;
    p.layers[1].weight(0, 0) = 3.0;
    p.layers[1].bias(0) = 1.0;
    const double in_pos[] = {1.0};
    EXPECT_DOUBLE_EQ(forward(p, spec, std::span<const double>(in_pos))[0](0), 3.0 * 1.5 + 1.0);
    const double in_neg[] = {0.1};
    EXPECT_DOUBLE_EQ(forward(p, spec, std::span<const double>(in_neg))[0](0), 1.0);  // relu(-0.3) = 0
    spec.activation = Activation::tanh;
    EXPECT_NEAR(forward(p, spec, std::span<const double>(in_pos))[0](0), 3.0 * std::tanh(1.5) + 1.0, 1e-12);
}

TEST(Forward, HeadsSplitTheOutputLayer) {
    NetworkSpec spec;
    spec.trunk = {4};
    spec.heads = {2, 3};
    RngStream rng(1, 0);
    const auto p = init<float>(spec, rng);
    const float in[] = {0.3f};
    const auto heads = forward(p, spec, std::span<const float>(in));
    ASSERT_EQ(heads.size(), 2u);
    ASSERT_EQ(heads[0].size(), 2);
    ASSERT_EQ(heads[1].size(), 3);
    Matrix<float> x(1, 1);
    x(0, 0) = 0.3f;
    const Matrix<float> q = forward_batch(p, spec, x);
    EXPECT_FLOAT_EQ(heads[1](0), q(2, 0));
}

TEST(Forward, OutputsFiniteAndShapeChecked) {
    NetworkSpec spec;
    RngStream rng(2, 0);
    const auto p = init<float>(spec, rng);
    Matrix<float> x = Matrix<float>::Random(1, 64);
    EXPECT_TRUE(forward_batch(p, spec, x).allFinite());
    EXPECT_THROW(forward_batch(p, spec, Matrix<float>(Matrix<float>::Zero(2, 3))), ContractViolation);
    NetworkSpec other = spec;
    other.trunk = {50, 49};
    EXPECT_THROW(forward_batch(p, other, x), ContractViolation);
}

TEST(Backward, GradientMatchesFiniteDifferences) {
    NetworkSpec a;
    a.input_dim = 2;
    a.trunk = {7, 5};
    a.heads = {3, 4};
    EXPECT_LT(gradient_check(a, 3), 1e-4);

    NetworkSpec b;
    b.trunk = {6};
    b.heads = {7, 7, 7, 7};
    b.activation = Activation::tanh;
    EXPECT_LT(gradient_check(b, 4), 1e-4);

    NetworkSpec c;
    c.trunk = {};
    c.heads = {5};
    EXPECT_LT(gradient_check(c, 5), 1e-4);
}

TEST(Backward, ZeroLossGivesZeroGradients) {
    NetworkSpec spec;
    spec.trunk = {8, 8};
    spec.heads = {3};
    RngStream rng(6, 0);
    const auto p = init<double>(spec, rng);
    TrainingBatch<double> b = random_batch<double>(spec, 5, rng, 1.0);
    b.targets = forward_batch(p, spec, b.inputs);
    const auto lg = backward(p, spec, b);
    EXPECT_DOUBLE_EQ(lg.loss, 0.0);
    for (const auto& l : lg.gradients.layers) {
        EXPECT_TRUE(l.weight.isZero());
        EXPECT_TRUE(l.bias.isZero());
    }
}

TEST(Backward, MaskedOutputsDoNotContribute) {
    NetworkSpec spec;
    spec.trunk = {6};
    spec.heads = {4};
    RngStream rng(7, 0);
    const auto p = init<double>(spec, rng);
    TrainingBatch<double> b = random_batch<double>(spec, 6, rng, 2.0);
    const auto base = backward(p, spec, b);
    for (Eigen::Index i = 0; i < b.targets.size(); ++i)
        if (b.mask.data()[i] == 0) b.targets.data()[i] += 100.0;
    const auto moved = backward(p, spec, b);
    EXPECT_DOUBLE_EQ(base.loss, moved.loss);
    EXPECT_TRUE(base.gradients == moved.gradients);
}

TEST(Backward, HuberLossIsMeanOverMaskedEntries) {
    NetworkSpec spec;
    spec.trunk = {};
    spec.heads = {2};
    auto p = NetworkParams<double>::zeros(spec);
    TrainingBatch<double> b;
    b.inputs = Matrix<double>::Zero(1, 2);
    b.targets.resize(2, 2);
    b.targets << 0.5, 3.0, 9.0, 9.0;
    b.mask.resize(2, 2);
    b.mask << 1, 1, 0, 0;
    // 0.5 * 0.25 and 1 * (3 - 0.5)
    EXPECT_DOUBLE_EQ(backward(p, spec, b).loss, (0.125 + 2.5) / 2.0);
}

TEST(Backward, EmptyBatchIsContractViolation) {
    NetworkSpec spec;
    const auto p = NetworkParams<float>::zeros(spec);
    TrainingBatch<float> b;
    b.inputs.resize(1, 0);
    b.targets.resize(1, 0);
    b.mask.resize(1, 0);
    EXPECT_THROW(backward(p, spec, b), ContractViolation);
}

TEST(Adam, FirstStepMovesByLearningRate) {
    NetworkSpec spec;
    spec.trunk = {3};
    spec.heads = {2};
    RngStream rng(8, 0);
    auto p = init<double>(spec, rng);
    const auto before = p;
    auto g = NetworkParams<double>::zeros(spec);
    g.for_each([](double& v) { v = 1.0; });
    auto adam = AdamState<double>::for_spec(spec, 0.01);
    adam_step(p, g, adam);
    for (std::size_t i = 0; i < p.layers.size(); ++i) {
        EXPECT_TRUE((p.layers[i].weight - before.layers[i].weight).isConstant(-0.01, 1e-6));
        EXPECT_TRUE((p.layers[i].bias - before.layers[i].bias).isConstant(-0.01, 1e-6));
    }
    EXPECT_EQ(adam.step, 1u);
}

TEST(Adam, ZeroGradientLeavesParametersButCountsStep) {
    NetworkSpec spec;
    RngStream rng(9, 0);
    auto p = init<float>(spec, rng);
    const auto before = p;
    auto adam = AdamState<float>::for_spec(spec);
    adam_step(p, NetworkParams<float>::zeros(spec), adam);
    adam_step(p, NetworkParams<float>::zeros(spec), adam);
    EXPECT_TRUE(p == before);
    EXPECT_EQ(adam.step, 2u);
}

TEST(Adam, ZeroLearningRateIsIdentity) {
    NetworkSpec spec;
    RngStream rng(10, 0);
    auto p = init<float>(spec, rng);
    const auto before = p;
    auto g = init<float>(spec, rng);
    auto adam = AdamState<float>::for_spec(spec, 0.0);
    adam_step(p, g, adam);
    EXPECT_TRUE(p == before);
}

TEST(Adam, IdenticalCallsAreDeterministic) {
    NetworkSpec spec;
    spec.heads = {7, 7};
    RngStream rng(11, 0);
    auto p1 = init<float>(spec, rng);
    auto p2 = p1;
    const auto g = init<float>(spec, rng);
    auto a1 = AdamState<float>::for_spec(spec);
    auto a2 = AdamState<float>::for_spec(spec);
    for (int i = 0; i < 3; ++i) {
        adam_step(p1, g, a1);
        adam_step(p2, g, a2);
    }
    EXPECT_TRUE(p1 == p2);
    EXPECT_TRUE(a1.m == a2.m);
}

TEST(Adam, ReducesLossOnRegression) {
    NetworkSpec spec;
    spec.trunk = {16};
    spec.heads = {1};
    RngStream rng(12, 0);
    auto p = init<double>(spec, rng);
    TrainingBatch<double> b;
    b.inputs.resize(1, 20);
    b.targets.resize(1, 20);
    b.mask = Matrix<double>::Ones(1, 20);
    for (int j = 0; j < 20; ++j) {
        b.inputs(0, j) = j / 19.0;
        b.targets(0, j) = std::sin(3.0 * j / 19.0);
    }
    auto adam = AdamState<double>::for_spec(spec, 0.01);
    const double start = backward(p, spec, b).loss;
    for (int i = 0; i < 2000; ++i) adam_step(p, backward(p, spec, b).gradients, adam);
    EXPECT_LT(backward(p, spec, b).loss, 0.05 * start);
}

TEST(Init, SameStreamSameParameters) {
    NetworkSpec spec;
    spec.heads = {7, 7, 7, 7};
    RngStream a(13, 2);
    RngStream b(13, 2);
    EXPECT_TRUE(init<float>(spec, a) == init<float>(spec, b));
}

TEST(Init, ZeroBiasesAndScaledWeights) {
    NetworkSpec spec;
    spec.trunk = {200, 200};
    spec.heads = {50};
    RngStream rng(14, 0);
    const auto p = init<double>(spec, rng);
    for (std::size_t li = 0; li < p.layers.size(); ++li) {
        const auto& w = p.layers[li].weight;
        EXPECT_TRUE(p.layers[li].bias.isZero());
        const double fan_in = static_cast<double>(w.cols());
        const bool hidden = li + 1 < p.layers.size();
        const double limit = std::sqrt((hidden ? 6.0 : 3.0) / fan_in);
        EXPECT_LE(w.cwiseAbs().maxCoeff(), limit);
        // Uniform(-l, l) has variance l^2 / 3.
        const double var = w.squaredNorm() / static_cast<double>(w.size());
        const double expected = limit * limit / 3.0;
        const double se = expected * std::sqrt(0.8 / static_cast<double>(w.size()));
        EXPECT_NEAR(var, expected, 5 * se) << "layer " << li;
    }
}

TEST(Serialization, RoundTripIsBitwiseEqual) {
    NetworkSpec spec;
    spec.heads = {7, 7, 7, 7};
    RngStream rng(15, 0);
    const auto p = init<float>(spec, rng);
    std::stringstream ss;
    serialize(ss, p, spec);
    const auto m = deserialize<float>(ss);
    EXPECT_TRUE(m.spec == spec);
    EXPECT_TRUE(m.params == p);

    const auto pd = init<double>(spec, rng);
    std::stringstream sd;
    serialize(sd, pd, spec);
    EXPECT_TRUE(deserialize<double>(sd, spec) == pd);
}

TEST(Serialization, TruncatedFileIsRejected) {
    NetworkSpec spec;
    RngStream rng(16, 0);
    const auto p = init<float>(spec, rng);
    std::stringstream ss;
    serialize(ss, p, spec);
    const std::string full = ss.str();
    for (std::size_t cut : {std::size_t{4}, std::size_t{20}, full.size() / 2, full.size() - 1}) {
        std::stringstream part(full.substr(0, cut));
        EXPECT_THROW(deserialize<float>(part), LoadError) << "cut at " << cut;
    }
}

TEST(Serialization, CorruptionAndVersionAreRejected) {
    NetworkSpec spec;
    RngStream rng(17, 0);
    const auto p = init<float>(spec, rng);
    std::stringstream ss;
    serialize(ss, p, spec);
    std::string bytes = ss.str();

    std::string flipped = bytes;
    flipped[bytes.size() / 2] ^= 0x10;
    std::stringstream s1(flipped);
    EXPECT_THROW(deserialize<float>(s1), LoadError);

    std::string versioned = bytes;
    versioned[8] = 2;
    std::stringstream s2(versioned);
    try {
        deserialize<float>(s2);
        FAIL() << "expected a load error";
    } catch (const LoadError& e) {
        EXPECT_NE(std::string(e.what()).find("version"), std::string::npos);
    }

    std::stringstream s3(bytes);
    EXPECT_THROW(deserialize<double>(s3), LoadError);
}

TEST(Serialization, SpecMismatchNamesDimensions) {
    NetworkSpec spec;
    spec.heads = {7, 7};
    RngStream rng(18, 0);
    const auto p = init<float>(spec, rng);
    std::stringstream ss;
    serialize(ss, p, spec);
    NetworkSpec expected = spec;
    expected.heads = {2401};
    try {
        deserialize<float>(ss, expected);
        FAIL() << "expected a load error";
    } catch (const LoadError& e) {
        const std::string msg = e.what();
        EXPECT_NE(msg.find("heads=[7,7]"), std::string::npos) << msg;
        EXPECT_NE(msg.find("heads=[2401]"), std::string::npos) << msg;
    }
}
