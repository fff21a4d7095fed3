#pragma once

#include <functional>
#include <random>
#include <string>
#include <vector>

#include "srm/gradcheck.hpp"
#include "srm/models.hpp"

namespace srm {

struct GradCase {
    std::string name;
    GradCheckResult result;
};

namespace detail {

inline Tensor<double> random_input(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
    std::uniform_real_distribution<double> u(lo, hi);
    std::vector<double> v(numel(shape));
    for (auto& x : v) x = u(rng);
    return Tensor<double>(std::move(shape), std::move(v));
}

// Values with |x| >= margin, keeping central differences off ReLU-like kinks.
inline Tensor<double> random_off_zero(Shape shape, Rng& rng, double margin = 0.05) {
    std::uniform_real_distribution<double> u(margin, 1.0);
    std::bernoulli_distribution sign(0.5);
    std::vector<double> v(numel(shape));
    for (auto& x : v) x = sign(rng) ? u(rng) : -u(rng);
    return Tensor<double>(std::move(shape), std::move(v));
}

// Scalar loss <y, r> for a fixed random r, so no output direction is privileged.
struct Projection {
    Rng* rng;
    std::vector<Tensor<double>> cache;
    Tensor<double> operator()(const Tensor<double>& y) {
        for (auto& c : cache) {
            if (c.shape() == y.shape()) return sum(mul(y, c));
        }
        cache.push_back(random_input(y.shape(), *rng));
        return sum(mul(y, cache.back()));
    }
};

}  // namespace detail

/// Finite-difference checks of every differentiable op, every recalibration
/// variant in train and eval mode, and full residual blocks, all in double.
inline std::vector<GradCase> gradient_suite(std::uint64_t seed) {
    using TD = Tensor<double>;
    using detail::random_input;
    using detail::random_off_zero;
    Rng rng(seed);
    detail::Projection project{&rng, {}};
    std::vector<GradCase> out;
    auto check = [&](const std::string& name, const std::function<TD(const std::vector<TD>&)>& f,
                     std::vector<TD> inputs, double eps = 1e-6) {
        out.push_back({name, grad_check([&](const std::vector<TD>& in) { return project(f(in)); }, inputs, eps)});
    };

    check("conv2d 3x3 stride 1", [](auto& in) { return conv2d(in[0], in[1], 1, 1); },
          {random_input({2, 3, 5, 5}, rng), random_input({4, 3, 3, 3}, rng)});
    check("conv2d 3x3 stride 2", [](auto& in) { return conv2d(in[0], in[1], 2, 1); },
          {random_input({2, 2, 6, 6}, rng), random_input({3, 2, 3, 3}, rng)});
    check("conv2d 1x1 stride 2", [](auto& in) { return conv2d(in[0], in[1], 2, 0); },
          {random_input({2, 3, 5, 5}, rng), random_input({4, 3, 1, 1}, rng)});
    check("linear", [](auto& in) { return linear(in[0], in[1], in[2]); },
          {random_input({3, 5}, rng), random_input({4, 5}, rng), random_input({4}, rng)});
    check("matmul", [](auto& in) { return matmul(in[0], in[1]); },
          {random_input({3, 4}, rng), random_input({4, 2}, rng)});
    {
        std::vector<double> rm(3, 0.0), rv(3, 1.0);
        check("batch_norm train",
              [&](auto& in) { return batch_norm<double>(in[0], in[1], in[2], rm, rv, true, 0.1, 1e-5); },
              {random_input({4, 3, 2, 2}, rng), random_input({3}, rng, 0.5, 1.5), random_input({3}, rng)});
        std::vector<double> em{0.1, -0.2, 0.3}, ev{0.5, 1.2, 2.0};
        check("batch_norm eval",
              [&](auto& in) { return batch_norm<double>(in[0], in[1], in[2], em, ev, false, 0.1, 1e-5); },
              {random_input({2, 3, 2, 2}, rng), random_input({3}, rng, 0.5, 1.5), random_input({3}, rng)});
    }
    check("relu", [](auto& in) { return relu(in[0]); }, {random_off_zero({2, 3, 4}, rng)});
    check("sigmoid", [](auto& in) { return sigmoid(in[0]); }, {random_input({2, 3, 4}, rng, -4, 4)});
    check("max_pool2d", [](auto& in) { return max_pool2d(in[0], 3, 2, 1); }, {random_input({2, 2, 5, 5}, rng)});
    check("global_avg_pool", [](auto& in) { return global_avg_pool(in[0]); }, {random_input({2, 3, 3, 4}, rng)});
    check("global_std_pool", [](auto& in) { return global_std_pool(in[0], 1e-12); },
          {random_input({2, 3, 3, 4}, rng)});
    check("global_max_pool", [](auto& in) { return global_max_pool(in[0]); }, {random_input({2, 3, 3, 4}, rng)});
    check("channel_mul", [](auto& in) { return channel_mul(in[0], in[1]); },
          {random_input({2, 3, 2, 2}, rng), random_input({2, 3}, rng)});
    check("cfc", [](auto& in) { return cfc(in[0], in[1], in[2]); },
          {random_input({3, 4, 2}, rng), random_input({4, 2}, rng), random_input({4}, rng)});
    {
        std::vector<int> labels{0, 2, 1};
        out.push_back({"softmax_cross_entropy",
                       grad_check([&](const std::vector<TD>& in) { return softmax_cross_entropy(in[0], labels); },
                                  {random_input({3, 4}, rng, -2, 2)})});
    }

    for (std::string spec : {"srm", "se:r=2", "avg:cfc", "avg+std:cfc", "avg+max:cfc+bn", "avg+std:mlp+bn:r=2"}) {
        for (Mode mode : {Mode::train, Mode::eval}) {
            auto layer = make_variant<double>(RecalibVariant::parse(spec), 4, &rng);
            layer->set_mode(mode);
            if (mode == Mode::eval) {
                for (auto& nt : layer->named_tensors()) {
                    if (nt.name.find("running_var") != std::string::npos)
                        for (auto& v : nt.tensor.mutable_data()) v = 0.5 + std::uniform_real_distribution<double>()(rng);
                    if (nt.name.find("running_mean") != std::string::npos)
                        for (auto& v : nt.tensor.mutable_data()) v = std::uniform_real_distribution<double>(-0.3, 0.3)(rng);
                }
            }
            std::vector<TD> inputs{random_input({4, 4, 3, 3}, rng)};
            for (auto& nt : layer->named_tensors()) {
                if (!nt.trainable) continue;
                // Under batch statistics a hidden unit active for the whole batch
                // adds a constant that the following BN removes, so this gradient
                // is structurally zero and only round-off remains.
                const auto& v = layer->variant();
                if (mode == Mode::train && v.integration == Integration::mlp && v.use_bn && nt.name == "fc1.bias") continue;
                inputs.push_back(nt.tensor);
            }
            check(spec + (mode == Mode::train ? " train" : " eval"),
                  [&layer](auto& in) { return layer->forward(in[0]); }, inputs, 1e-5);
        }
    }

    struct BlockCase {
        const char* name;
        BlockKind kind;
        std::size_t in, out, stride;
        const char* recalib;
    };
    for (auto& bc : {BlockCase{"basic block srm", BlockKind::basic, 4, 4, 1, "srm"},
                     BlockCase{"basic projection block srm", BlockKind::basic, 3, 4, 2, "srm"},
                     BlockCase{"bottleneck block se", BlockKind::bottleneck, 4, 8, 1, "se:r=4"}}) {
        ResidualBlock<double> blk({1, 0}, bc.kind, bc.in, bc.out, bc.stride, RecalibVariant::parse(bc.recalib), &rng);
        blk.set_mode(Mode::train);
        std::vector<TD> inputs{random_input({4, bc.in, 4, 4}, rng)};
        for (auto& nt : blk.named_tensors())
            if (nt.trainable) inputs.push_back(nt.tensor);
        check(bc.name, [&blk](auto& in) { return blk.forward(in[0]); }, inputs, 1e-5);
    }
    return out;
}

inline double max_error(const std::vector<GradCase>& cases) {
    double worst = 0;
    for (auto& c : cases) worst = std::max(worst, c.result.finite ? c.result.max_rel_error : INFINITY);
    return worst;
}

}  // namespace srm
