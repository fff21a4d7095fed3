#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <set>

#include "oracles.hpp"
#include "srm/layers.hpp"

using namespace srm;
using TD = Tensor<double>;

TEST(BatchNormTest, TwoValueBatchNormalizesToUnit) {
    BatchNorm<double> bn(1);
    auto y = bn.forward(TD({2, 1}, {1.0, -1.0}));
    const double expect = 1.0 / std::sqrt(1.0 + BatchNorm<double>::kEps);
    EXPECT_NEAR(y[0], expect, 1e-15);
    EXPECT_NEAR(y[1], -expect, 1e-15);
}

TEST(BatchNormTest, EvalWithUnitStatisticsIsIdentity) {
    BatchNorm<double> bn(3, 0.0);
    bn.set_mode(Mode::eval);
    std::mt19937_64 rng(1);
    auto x = oracle::random_tensor<double>({2, 3, 4, 4}, rng);
    auto y = bn.forward(x);
    for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_EQ(y[i], x[i]);
}

TEST(BatchNormTest, MatchesLoopOracle) {
    std::mt19937_64 rng(2);
    for (int trial = 0; trial < 5; ++trial) {
        auto x = oracle::random_tensor<double>({4, 3, 5, 5}, rng, -3, 3);
        BatchNorm<double> bn(3);
        std::vector<double> gamma, beta;
        for (std::size_t c = 0; c < 3; ++c) {
            bn.gamma().mutable_data()[c] = 0.5 + 0.3 * double(c);
            bn.beta().mutable_data()[c] = -0.2 * double(c);
            gamma.push_back(bn.gamma()[c]);
            beta.push_back(bn.beta()[c]);
        }
        auto y = bn.forward(x);
        auto expect = oracle::batch_norm_train(x, gamma, beta, BatchNorm<double>::kEps);
        for (std::size_t i = 0; i < expect.size(); ++i) EXPECT_NEAR(y[i], expect[i], 1e-6);
    }
}

TEST(BatchNormTest, RejectsSingleExampleBatchInTrainMode) {
    BatchNorm<double> bn(2);
    EXPECT_THROW(bn.forward(TD::zeros({1, 2, 3, 3})), ShapeError);
    bn.set_mode(Mode::eval);
    EXPECT_NO_THROW(bn.forward(TD::zeros({1, 2, 3, 3})));
}

TEST(BatchNormTest, RunningStatisticsFollowExponentialAverage) {
    BatchNorm<double> bn(1);
    bn.forward(TD({4, 1}, {1.0, 2.0, 3.0, 6.0}));
    // batch mean 3, biased variance (4 + 1 + 0 + 9)/4 = 3.5
    EXPECT_NEAR(bn.running_mean()[0], 0.1 * 3.0, 1e-15);
    EXPECT_NEAR(bn.running_var()[0], 0.9 * 1.0 + 0.1 * 3.5, 1e-15);
}

TEST(BatchNormTest, TrainOutputHasAffineMoments) {
    std::mt19937_64 rng(3);
    for (int trial = 0; trial < 10; ++trial) {
        const std::size_t C = 4;
        BatchNorm<double> bn(C, 1e-12);
        for (std::size_t c = 0; c < C; ++c) {
            bn.gamma().mutable_data()[c] = std::uniform_real_distribution<double>(-2, 2)(rng);
            bn.beta().mutable_data()[c] = std::uniform_real_distribution<double>(-2, 2)(rng);
        }
        auto x = oracle::random_tensor<double>({5, C, 3, 3}, rng, -4, 4);
        auto y = bn.forward(x);
        for (std::size_t c = 0; c < C; ++c) {
            double s = 0, ss = 0;
            for (std::size_t n = 0; n < 5; ++n)
                for (std::size_t k = 0; k < 9; ++k) s += y[(n * C + c) * 9 + k];
            const double mu = s / 45.0;
            for (std::size_t n = 0; n < 5; ++n)
                for (std::size_t k = 0; k < 9; ++k) ss += std::pow(y[(n * C + c) * 9 + k] - mu, 2);
            EXPECT_NEAR(mu, bn.beta()[c], 1e-5);
            EXPECT_NEAR(std::sqrt(ss / 45.0), std::abs(bn.gamma()[c]), 1e-5);
        }
    }
}

TEST(BatchNormTest, EvalOutputIndependentOfBatchComposition) {
    std::mt19937_64 rng(4);
    BatchNorm<double> bn(2);
    bn.forward(oracle::random_tensor<double>({6, 2, 3, 3}, rng));
    bn.set_mode(Mode::eval);
    auto a = oracle::random_tensor<double>({1, 2, 3, 3}, rng);
    auto b = oracle::random_tensor<double>({1, 2, 3, 3}, rng);
    std::vector<double> joined(a.data().begin(), a.data().end());
    joined.insert(joined.end(), b.data().begin(), b.data().end());
    auto ya = bn.forward(a);
    auto yab = bn.forward(TD({2, 2, 3, 3}, joined));
    for (std::size_t i = 0; i < ya.numel(); ++i) EXPECT_EQ(ya[i], yab[i]);
}

TEST(GlobalPoolTest, ConstantChannel) {
    auto x = TD::full({1, 1, 4, 4}, 2.5);
    EXPECT_DOUBLE_EQ(global_pool(x, PoolKind::avg).item(), 2.5);
    EXPECT_NEAR(global_pool(x, PoolKind::std).item(), 0.0, std::sqrt(kPoolEps) * 1.0001);
    EXPECT_DOUBLE_EQ(global_pool(x, PoolKind::max).item(), 2.5);
}

TEST(GlobalPoolTest, TwoLevelChannel) {
    auto x = TD({1, 1, 2, 2}, {1.0, 3.0, 3.0, 1.0});
    EXPECT_DOUBLE_EQ(global_pool(x, PoolKind::avg).item(), 2.0);
    EXPECT_NEAR(global_pool(x, PoolKind::std).item(), 1.0, 1e-12);
    EXPECT_DOUBLE_EQ(global_pool(x, PoolKind::max).item(), 3.0);
}

TEST(GlobalPoolTest, MatchesLoopOracle) {
    std::mt19937_64 rng(5);
    auto x = oracle::random_tensor<double>({3, 5, 7, 7}, rng, -2, 2);
    auto s = oracle::channel_stats(x, kPoolEps);
    auto avg = global_pool(x, PoolKind::avg), sd = global_pool(x, PoolKind::std), mx = global_pool(x, PoolKind::max);
    for (std::size_t i = 0; i < 15; ++i) {
        EXPECT_NEAR(avg[i], s.avg[i], 1e-6);
        EXPECT_NEAR(sd[i], s.std[i], 1e-6);
        EXPECT_NEAR(mx[i], s.max[i], 1e-6);
    }
}

TEST(GlobalPoolTest, PositiveScaleEquivariance) {
    std::mt19937_64 rng(6);
    for (int trial = 0; trial < 20; ++trial) {
        auto x = oracle::random_tensor<double>({2, 3, 4, 4}, rng, -2, 2);
        const double lambda = std::uniform_real_distribution<double>(0.1, 10.0)(rng);
        auto xs = scale(x, lambda);
        auto a = global_avg_pool(x), as = global_avg_pool(xs);
        auto s0 = global_std_pool(x, 0.0), s0s = global_std_pool(xs, 0.0);
        auto s = global_std_pool(x, kPoolEps), ss = global_std_pool(xs, kPoolEps);
        for (std::size_t i = 0; i < a.numel(); ++i) {
            EXPECT_NEAR(as[i], lambda * a[i], 1e-12 * lambda);
            EXPECT_NEAR(s0s[i], lambda * s0[i], 1e-12 * lambda);
            EXPECT_NEAR(ss[i], lambda * s[i], 1e-6);
        }
    }
}

TEST(GlobalPoolTest, MaxDominatesAverage) {
    std::mt19937_64 rng(7);
    for (int trial = 0; trial < 20; ++trial) {
        auto x = oracle::random_tensor<double>({3, 4, 3, 5}, rng, -5, 5);
        auto a = global_avg_pool(x), m = global_max_pool(x);
        for (std::size_t i = 0; i < a.numel(); ++i) EXPECT_GE(m[i], a[i]);
    }
}

TEST(LayerParamsTest, NamesAreHierarchicalAndUnique) {
    Rng rng(1);
    Conv2d<float> conv(3, 8, 3, 1, 1, &rng);
    BatchNorm<float> bn(8);
    Linear<float> fc(8, 2, true, &rng);
    std::vector<NamedTensor<float>> all;
    conv.collect("stem.conv", all);
    bn.collect("stem.bn", all);
    fc.collect("fc", all);
    std::set<std::string> names;
    for (auto& nt : all) EXPECT_TRUE(names.insert(nt.name).second) << nt.name;
    EXPECT_TRUE(names.count("stem.bn.running_var"));
    EXPECT_EQ(all.size(), 1u + 4u + 2u);
}

TEST(LayerParamsTest, ConvHeInitScale) {
    Rng rng(9);
    Conv2d<double> conv(16, 64, 3, 1, 1, &rng);
    double ss = 0;
    for (double v : conv.weight().data()) ss += v * v;
    const double stddev = std::sqrt(ss / double(conv.weight().numel()));
    EXPECT_NEAR(stddev, std::sqrt(2.0 / (64 * 9)), 0.01);
}
