#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "oracles.hpp"
#include "srm/gradcheck.hpp"
#include "srm/recalib.hpp"

using namespace srm;
using TD = Tensor<double>;

namespace {

StyleRepresentation<double> random_style(std::size_t N, std::size_t C, std::size_t d, std::mt19937_64& rng) {
    return {oracle::random_tensor<double>({N, C, d}, rng, -3, 3), PoolingSet{true, d > 1, false}};
}

void randomize_state(StyleIntegration<double>& s, std::mt19937_64& rng) {
    std::uniform_real_distribution<double> u(-2, 2), pos(0.05, 3);
    for (auto& v : s.weight().mutable_data()) v = u(rng);
    auto* bn = s.bn();
    for (std::size_t c = 0; c < bn->channels(); ++c) {
        bn->gamma().mutable_data()[c] = u(rng);
        bn->beta().mutable_data()[c] = u(rng);
        bn->running_mean().mutable_data()[c] = u(rng);
        bn->running_var().mutable_data()[c] = pos(rng);
    }
}

}  // namespace

TEST(StylePoolTest, ConstantChannelHasZeroDispersion) {
    auto t = style_pool(TD::full({1, 1, 3, 3}, 4.0), PoolingSet{true, true, false});
    ASSERT_EQ(t.values.shape(), (Shape{1, 1, 2}));
    EXPECT_EQ(t.values[0], 4.0);
    EXPECT_NEAR(t.values[1], 0.0, 1.1e-6);
}

TEST(StylePoolTest, AvgMaxOnTwoLevelChannel) {
    auto t = style_pool(TD({1, 1, 1, 2}, {1.0, 3.0}), PoolingSet{true, false, true});
    EXPECT_EQ(t.d(), 2u);
    EXPECT_EQ(t.values[0], 2.0);
    EXPECT_EQ(t.values[1], 3.0);
}

TEST(StylePoolTest, EachStatisticMatchesGlobalPool) {
    std::mt19937_64 rng(1);
    auto x = oracle::random_tensor<double>({3, 4, 5, 6}, rng);
    auto t = style_pool(x, PoolingSet{true, true, true});
    auto a = global_pool(x, PoolKind::avg), s = global_pool(x, PoolKind::std), m = global_pool(x, PoolKind::max);
    for (std::size_t i = 0; i < 12; ++i) {
        EXPECT_EQ(t.values[i * 3 + 0], a[i]);
        EXPECT_EQ(t.values[i * 3 + 1], s[i]);
        EXPECT_EQ(t.values[i * 3 + 2], m[i]);
    }
}

TEST(StylePoolTest, EmptySetRejected) {
    EXPECT_THROW(style_pool(TD::zeros({1, 1, 2, 2}), PoolingSet{}), std::invalid_argument);
}

TEST(StyleIntegrateTest, ZeroWeightsGiveHalfGates) {
    std::mt19937_64 rng(2);
    StyleIntegration<double> s(5, 2, true);
    auto t = random_style(4, 5, 2, rng);
    for (Mode m : {Mode::train, Mode::eval}) {
        auto g = s.integrate(t, m);
        for (double v : g.data()) EXPECT_DOUBLE_EQ(v, 0.5);
    }
}

TEST(StyleIntegrateTest, SaturatedShift) {
    std::mt19937_64 rng(3);
    StyleIntegration<double> s(2, 2, true, nullptr);
    for (std::size_t c = 0; c < 2; ++c) {
        s.bn()->gamma().mutable_data()[c] = 0.0;
        s.bn()->beta().mutable_data()[c] = 8.0;
    }
    auto g = s.integrate(random_style(3, 2, 2, rng), Mode::train);
    for (double v : g.data()) EXPECT_NEAR(v, 0.99966, 5e-6);
}

TEST(StyleIntegrateTest, EvalMatchesFolded) {
    std::mt19937_64 rng(4);
    Rng init(4);
    StyleIntegration<double> s(6, 2, true, &init);
    randomize_state(s, rng);
    s.fold_bn();
    auto t = random_style(7, 6, 2, rng);
    auto ge = s.integrate(t, Mode::eval);
    auto gf = s.integrate(t, Mode::folded);
    for (std::size_t i = 0; i < ge.numel(); ++i) EXPECT_NEAR(ge[i], gf[i], 1e-5);
}

TEST(StyleIntegrateTest, FoldedBeforeFoldRejected) {
    std::mt19937_64 rng(5);
    StyleIntegration<double> s(2, 2, true);
    EXPECT_THROW(s.integrate(random_style(2, 2, 2, rng), Mode::folded), std::logic_error);
}

TEST(StyleIntegrateTest, StyleDimensionMismatchRejected) {
    std::mt19937_64 rng(6);
    StyleIntegration<double> s(3, 2, true);
    EXPECT_THROW(s.integrate(random_style(2, 3, 3, rng), Mode::eval), ShapeError);
}

TEST(StyleIntegrateTest, SingleExampleTrainBatchRejected) {
    std::mt19937_64 rng(7);
    StyleIntegration<double> s(3, 2, true);
    EXPECT_THROW(s.integrate(random_style(1, 3, 2, rng), Mode::train), ShapeError);
}

TEST(FoldBnTest, IdentityNormalizationKeepsWeights) {
    Rng init(8);
    StyleIntegration<double> s(4, 2, true, &init, 0.0);
    s.fold_bn();
    for (std::size_t i = 0; i < 8; ++i) EXPECT_DOUBLE_EQ(s.folded_weight()[i], s.weight()[i]);
    for (std::size_t c = 0; c < 4; ++c) EXPECT_DOUBLE_EQ(s.folded_bias()[c], 0.0);
}

TEST(FoldBnTest, ZeroScaleGivesConstantGate) {
    std::mt19937_64 rng(9);
    Rng init(9);
    StyleIntegration<double> s(3, 2, true, &init);
    randomize_state(s, rng);
    for (std::size_t c = 0; c < 3; ++c) s.bn()->gamma().mutable_data()[c] = 0.0;
    s.fold_bn();
    for (std::size_t i = 0; i < 6; ++i) EXPECT_EQ(s.folded_weight()[i], 0.0);
    for (std::size_t c = 0; c < 3; ++c) EXPECT_EQ(s.folded_bias()[c], s.bn()->beta()[c]);
    auto g = s.integrate(random_style(5, 3, 2, rng), Mode::folded);
    for (std::size_t n = 0; n < 5; ++n)
        for (std::size_t c = 0; c < 3; ++c)
            EXPECT_DOUBLE_EQ(g[n * 3 + c], 1.0 / (1.0 + std::exp(-s.bn()->beta()[c])));
}

TEST(FoldBnTest, EquivalenceSweep) {
    std::mt19937_64 rng(10);
    double worst = 0.0;
    for (int trial = 0; trial < 100; ++trial) {
        const std::size_t C = 1 + trial % 9, d = 1 + trial % 3;
        Rng init(trial);
        StyleIntegration<double> s(C, d, true, &init);
        randomize_state(s, rng);
        s.fold_bn();
        auto t = random_style(4, C, d, rng);
        auto ge = s.integrate(t, Mode::eval), gf = s.integrate(t, Mode::folded);
        for (std::size_t i = 0; i < ge.numel(); ++i) worst = std::max(worst, std::abs(ge[i] - gf[i]));
    }
    EXPECT_LT(worst, 1e-5);
}

TEST(FoldBnTest, NonFiniteRunningVarianceRejected) {
    StyleIntegration<double> s(2, 2, true);
    s.bn()->running_var().mutable_data()[1] = std::nan("");
    EXPECT_THROW(s.fold_bn(), std::domain_error);
}

TEST(FoldBnTest, ReturningToTrainDropsFoldedState) {
    Rng init(1);
    SrmLayer<double> layer(RecalibVariant::srm(), 3, &init);
    layer.fold_bn();
    layer.set_mode(Mode::folded);
    EXPECT_NO_THROW(layer.gates(TD::full({2, 3, 2, 2}, 1.0)));
    layer.set_mode(Mode::train);
    layer.set_mode(Mode::folded);
    EXPECT_THROW(layer.gates(TD::full({2, 3, 2, 2}, 1.0)), std::logic_error);
}

TEST(RecalibrateTest, ConstantGates) {
    std::mt19937_64 rng(11);
    auto x = oracle::random_tensor<double>({2, 3, 2, 2}, rng);
    auto half = recalibrate(x, TD::full({2, 3}, 0.5));
    auto zero = recalibrate(x, TD::zeros({2, 3}));
    for (std::size_t i = 0; i < x.numel(); ++i) {
        EXPECT_EQ(half[i], 0.5 * x[i]);
        EXPECT_EQ(zero[i], 0.0);
    }
}

TEST(RecalibrateTest, MatchesBroadcastLoop) {
    std::mt19937_64 rng(12);
    auto x = oracle::random_tensor<double>({3, 4, 3, 2}, rng);
    auto g = oracle::random_tensor<double>({3, 4}, rng, 0, 1);
    auto y = recalibrate(x, g);
    for (std::size_t n = 0; n < 3; ++n)
        for (std::size_t c = 0; c < 4; ++c)
            for (std::size_t s = 0; s < 6; ++s) EXPECT_EQ(y[(n * 4 + c) * 6 + s], g[n * 4 + c] * x[(n * 4 + c) * 6 + s]);
    EXPECT_THROW(recalibrate(x, TD::zeros({3, 3})), ShapeError);
}

TEST(SeBlockTest, ZeroExcitationHalvesInput) {
    std::mt19937_64 rng(13);
    Linear<double> fc1(8, 2, true), fc2(2, 8, true);
    auto x = oracle::random_tensor<double>({2, 8, 3, 3}, rng);
    auto y = se_block(x, fc1, fc2);
    for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_EQ(y[i], 0.5 * x[i]);
}

TEST(SeBlockTest, SqueezeEqualsStyleAverage) {
    std::mt19937_64 rng(14);
    Rng init(14);
    MlpRecalibLayer<double> se(RecalibVariant::se(4), 8, &init);
    auto x = oracle::random_tensor<double>({2, 8, 3, 3}, rng);
    auto sq = se.squeeze(x);
    auto t = style_pool(x, PoolingSet{true, false, false});
    for (std::size_t i = 0; i < sq.numel(); ++i) EXPECT_EQ(sq[i], t.values[i]);
}

TEST(SeBlockTest, LayerMatchesPrimitiveComposition) {
    std::mt19937_64 rng(15);
    Rng init(15);
    MlpRecalibLayer<double> se(RecalibVariant::se(4), 16, &init);
    se.set_mode(Mode::eval);
    EXPECT_EQ(se.fc1().out_features(), 4u);
    auto x = oracle::random_tensor<double>({3, 16, 4, 4}, rng);
    auto a = se.forward(x);
    // independent composition straight from the parameters
    auto pooled = global_avg_pool(x);
    auto h = relu(add(matmul(pooled, TD({16, 4}, [&] {
                              std::vector<double> wt(64);
                              for (std::size_t o = 0; o < 4; ++o)
                                  for (std::size_t i = 0; i < 16; ++i) wt[i * 4 + o] = se.fc1().weight()[o * 16 + i];
                              return wt;
                          }())),
                      TD({3, 4}, [&] {
                          std::vector<double> b;
                          for (int n = 0; n < 3; ++n)
                              for (std::size_t o = 0; o < 4; ++o) b.push_back(se.fc1().bias()[o]);
                          return b;
                      }())));
    std::vector<double> expect(x.numel());
    for (std::size_t n = 0; n < 3; ++n)
        for (std::size_t c = 0; c < 16; ++c) {
            double z = se.fc2().bias()[c];
            for (std::size_t k = 0; k < 4; ++k) z += se.fc2().weight()[c * 4 + k] * h[n * 4 + k];
            const double g = 1.0 / (1.0 + std::exp(-z));
            for (std::size_t s = 0; s < 16; ++s) expect[(n * 16 + c) * 16 + s] = g * x[(n * 16 + c) * 16 + s];
        }
    for (std::size_t i = 0; i < expect.size(); ++i) EXPECT_NEAR(a[i], expect[i], 1e-6);
}

TEST(SeBlockTest, HiddenWidthFloorsAtOne) {
    EXPECT_EQ(hidden_width(16, 16), 1u);
    EXPECT_EQ(hidden_width(8, 16), 1u);
    EXPECT_EQ(hidden_width(256, 16), 16u);
    EXPECT_THROW(RecalibVariant::parse("se:r=0"), std::invalid_argument);
}

TEST(MakeVariantTest, TableRows) {
    Rng init(1);
    auto avg_only = make_variant<float>(RecalibVariant::parse("avg:cfc+bn"), 8, &init);
    auto* a = dynamic_cast<SrmLayer<float>*>(avg_only.get());
    ASSERT_NE(a, nullptr);
    EXPECT_EQ(a->integration().weight().shape(), (Shape{8, 1}));

    auto canonical = make_variant<float>(RecalibVariant::srm(), 8, &init);
    auto* s = dynamic_cast<SrmLayer<float>*>(canonical.get());
    ASSERT_NE(s, nullptr);
    EXPECT_EQ(s->integration().weight().shape(), (Shape{8, 2}));
    EXPECT_NE(s->integration().bn(), nullptr);

    auto sp_mlp = make_variant<float>(RecalibVariant::parse("avg+std:mlp"), 32, &init);
    auto* m = dynamic_cast<MlpRecalibLayer<float>*>(sp_mlp.get());
    ASSERT_NE(m, nullptr);
    EXPECT_EQ(m->fc1().in_features(), 64u);
    EXPECT_EQ(m->fc1().out_features(), 2u);
    EXPECT_EQ(m->bn(), nullptr);

    RecalibVariant empty;
    empty.pooling = {};
    EXPECT_THROW(make_variant<float>(empty, 8, &init), std::invalid_argument);
}

TEST(MakeVariantTest, SpecStringsRoundTrip) {
    for (std::string spec : {"avg+std:cfc+bn", "avg:cfc", "std:cfc+bn", "max:cfc+bn", "avg+max:cfc+bn",
                             "avg+std:mlp:r=16", "avg+std:mlp+bn:r=8", "avg:mlp:r=16"}) {
        EXPECT_EQ(RecalibVariant::parse(spec).to_string(), spec);
    }
    EXPECT_EQ(RecalibVariant::parse("srm"), RecalibVariant::srm());
    EXPECT_EQ(RecalibVariant::parse("se"), RecalibVariant::se(16));
    EXPECT_EQ(RecalibVariant::parse("se:r=4"), RecalibVariant::se(4));
    EXPECT_THROW(RecalibVariant::parse("avg+var:cfc"), std::invalid_argument);
    EXPECT_THROW(RecalibVariant::parse("avg+std"), std::invalid_argument);
}

TEST(RecalibPropertyTest, GatesStrictlyInsideUnitInterval) {
    std::mt19937_64 rng(16);
    for (std::string spec : {"srm", "se:r=2", "avg+max:cfc+bn", "avg+std:mlp+bn:r=2", "avg+std:cfc"}) {
        Rng init(3);
        auto layer = make_variant<double>(RecalibVariant::parse(spec), 6, &init);
        for (int trial = 0; trial < 10; ++trial) {
            auto x = oracle::random_tensor<double>({4, 6, 3, 3}, rng, -3, 3);
            for (Mode m : {Mode::train, Mode::eval}) {
                layer->set_mode(m);
                auto g = layer->gates(x);
                for (double v : g.data()) {
                    EXPECT_GT(v, 0.0) << spec;
                    EXPECT_LT(v, 1.0) << spec;
                }
            }
        }
    }
}

TEST(RecalibPropertyTest, SrmChannelsAreIndependent) {
    std::mt19937_64 rng(17);
    Rng init(17);
    StyleIntegration<double> s(6, 2, true, &init);
    randomize_state(s, rng);
    s.fold_bn();
    auto t = random_style(3, 6, 2, rng);
    for (Mode mode : {Mode::eval, Mode::folded}) {
        auto base = s.integrate(t, mode);
        for (std::size_t j = 0; j < 6; ++j) {
            std::vector<double> v(t.values.data().begin(), t.values.data().end());
            for (std::size_t n = 0; n < 3; ++n) v[(n * 6 + j) * 2] += 1.5;
            StyleRepresentation<double> tp{TD(t.values.shape(), v), t.pooling};
            auto g = s.integrate(tp, mode);
            for (std::size_t n = 0; n < 3; ++n)
                for (std::size_t i = 0; i < 6; ++i) {
                    if (i != j) {
                        EXPECT_EQ(g[n * 6 + i], base[n * 6 + i]);
                    }
                }
        }
    }
}

TEST(RecalibPropertyTest, SeChannelsAreCoupled) {
    std::mt19937_64 rng(18);
    Rng init(18);
    MlpRecalibLayer<double> se(RecalibVariant::se(2), 6, &init);
    se.set_mode(Mode::eval);
    auto x = oracle::random_tensor<double>({1, 6, 3, 3}, rng);
    auto base = se.gates(x);
    std::vector<double> v(x.data().begin(), x.data().end());
    for (std::size_t s = 0; s < 9; ++s) v[s] += 2.0;  // channel 0 only
    auto g = se.gates(TD(x.shape(), v));
    int changed = 0;
    for (std::size_t i = 1; i < 6; ++i) changed += g[i] != base[i];
    EXPECT_GT(changed, 0);
}

TEST(RecalibPropertyTest, PositiveScaleCovariance) {
    std::mt19937_64 rng(19);
    Rng init(19);
    StyleIntegration<double> s(4, 2, true, &init);
    randomize_state(s, rng);
    s.fold_bn();
    for (int trial = 0; trial < 20; ++trial) {
        auto x = oracle::random_tensor<double>({2, 4, 3, 3}, rng, -2, 2);
        const double lambda = std::uniform_real_distribution<double>(0.2, 5)(rng);
        auto t = style_pool(x, PoolingSet{true, true, false});
        auto ts = style_pool(scale(x, lambda), PoolingSet{true, true, false});
        for (std::size_t i = 0; i < t.values.numel(); ++i) EXPECT_NEAR(ts.values[i], lambda * t.values[i], 1e-6);
        auto g = s.integrate(ts, Mode::folded);
        for (std::size_t n = 0; n < 2; ++n)
            for (std::size_t c = 0; c < 4; ++c) {
                double z = s.folded_bias()[c];
                for (std::size_t k = 0; k < 2; ++k)
                    z += lambda * s.folded_weight()[c * 2 + k] * t.values[(n * 4 + c) * 2 + k];
                EXPECT_NEAR(g[n * 4 + c], 1.0 / (1.0 + std::exp(-z)), 1e-6);
            }
    }
}

class BlockGradTest : public ::testing::TestWithParam<int> {};

TEST_P(BlockGradTest, SrmBlockOnTwoExampleBatch) {
    const int seed = GetParam();
    std::mt19937_64 rng(seed);
    Rng init(seed);
    SrmLayer<double> layer(RecalibVariant::srm(), 4, &init);
    auto x = oracle::random_tensor<double>({2, 4, 3, 3}, rng);
    std::vector<TD> inputs{x};
    for (auto& p : layer.parameters()) inputs.push_back(p);
    auto res = grad_check([&](const std::vector<TD>& in) { return sum(layer.forward(in[0])); }, inputs, 1e-4);
    EXPECT_TRUE(res.finite);
    EXPECT_LT(res.max_rel_error, 1e-4) << "input " << res.worst_input << "[" << res.worst_index << "]";
}

TEST_P(BlockGradTest, FullBlocksPassFiniteDifferences) {
    const int seed = GetParam();
    std::mt19937_64 rng(seed);
    for (std::string spec : {"srm", "se:r=2", "avg+std:mlp+bn:r=2", "avg+std:cfc", "avg+max:cfc+bn"}) {
        for (Mode mode : {Mode::train, Mode::eval}) {
            Rng init(seed);
            auto layer = make_variant<double>(RecalibVariant::parse(spec), 4, &init);
            layer->set_mode(mode);
            if (mode == Mode::eval) {
                // perturbed running statistics
                for (auto& nt : layer->named_tensors()) {
                    if (nt.name.find("running_var") != std::string::npos)
                        for (auto& v : nt.tensor.mutable_data()) v = 0.5 + std::uniform_real_distribution<double>()(rng);
                }
            }
            auto x = oracle::random_tensor<double>({4, 4, 3, 3}, rng);
            std::vector<TD> inputs{x};
            for (auto& nt : layer->named_tensors()) {
                if (!nt.trainable) continue;
                // fc1.bias is inert under batch statistics once its unit is active for the whole batch
                if (mode == Mode::train && spec == "avg+std:mlp+bn:r=2" && nt.name == "fc1.bias") continue;
                inputs.push_back(nt.tensor);
            }
            auto res = grad_check([&](const std::vector<TD>& in) { return sum(layer->forward(in[0])); }, inputs, 1e-5);
            EXPECT_TRUE(res.finite) << spec;
            EXPECT_LT(res.max_rel_error, 1e-4)
                << spec << " mode " << int(mode) << " input " << res.worst_input << "[" << res.worst_index
                << "] analytic=" << res.worst_analytic << " numeric=" << res.worst_numeric;
        }
    }
}

INSTANTIATE_TEST_SUITE_P(TenSeeds, BlockGradTest, ::testing::Range(1, 11));
