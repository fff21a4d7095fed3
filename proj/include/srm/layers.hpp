#pragma once

#include <cmath>
#include <random>
#include <string>
#include <vector>

#include "srm/ops.hpp"
#include "srm/tensor.hpp"

namespace srm {

using Rng = std::mt19937_64;

/// train: batch statistics, running stats updated. eval: running statistics.
/// folded: eval with batch norms merged into preceding linear maps where the
/// layer supports it.
enum class Mode { train, eval, folded };

template <typename T>
struct NamedTensor {
    std::string name;
    Tensor<T> tensor;
    bool trainable;
};

inline std::string join_name(const std::string& prefix, const std::string& name) {
    return prefix.empty() ? name : prefix + "." + name;
}

template <typename T>
class Module {
public:
    virtual ~Module() = default;

    virtual void collect(const std::string& prefix, std::vector<NamedTensor<T>>& out) const = 0;
    virtual void set_mode(Mode mode) { mode_ = mode; }
    Mode mode() const { return mode_; }

    std::vector<NamedTensor<T>> named_tensors(const std::string& prefix = "") const {
        std::vector<NamedTensor<T>> out;
        collect(prefix, out);
        return out;
    }

    std::vector<Tensor<T>> parameters() const {
        std::vector<Tensor<T>> out;
        for (auto& nt : named_tensors()) {
            if (nt.trainable) out.push_back(nt.tensor);
        }
        return out;
    }

    void zero_grad() {
        for (auto& p : parameters()) p.zero_grad();
    }

protected:
    Mode mode_ = Mode::train;
};

template <typename T>
Tensor<T> normal_tensor(Shape shape, T stddev, Rng& rng, bool requires_grad = true) {
    std::normal_distribution<double> dist(0.0, static_cast<double>(stddev));
    std::vector<T> v(numel(shape));
    for (auto& x : v) x = static_cast<T>(dist(rng));
    return Tensor<T>(std::move(shape), std::move(v), requires_grad);
}

template <typename T>
Tensor<T> uniform_tensor(Shape shape, T bound, Rng& rng, bool requires_grad = true) {
    std::uniform_real_distribution<double> dist(-static_cast<double>(bound), static_cast<double>(bound));
    std::vector<T> v(numel(shape));
    for (auto& x : v) x = static_cast<T>(dist(rng));
    return Tensor<T>(std::move(shape), std::move(v), requires_grad);
}

/// Bias-free 2-D convolution. Weights use He fan-out normal init.
template <typename T>
class Conv2d : public Module<T> {
public:
    Conv2d(std::size_t in_channels, std::size_t out_channels, std::size_t kernel, std::size_t stride,
           std::size_t padding, Rng* rng = nullptr)
        : stride_(stride), padding_(padding) {
        Shape shape{out_channels, in_channels, kernel, kernel};
        if (rng) {
            const T stddev = static_cast<T>(std::sqrt(2.0 / static_cast<double>(out_channels * kernel * kernel)));
            weight_ = normal_tensor<T>(shape, stddev, *rng);
        } else {
            weight_ = Tensor<T>::zeros(shape, true);
        }
    }

    Tensor<T> forward(const Tensor<T>& x) const { return conv2d(x, weight_, stride_, padding_); }

    void collect(const std::string& prefix, std::vector<NamedTensor<T>>& out) const override {
        out.push_back({join_name(prefix, "weight"), weight_, true});
    }

    const Tensor<T>& weight() const { return weight_; }
    Tensor<T>& weight() { return weight_; }
    std::size_t in_channels() const { return weight_.dim(1); }
    std::size_t out_channels() const { return weight_.dim(0); }
    std::size_t kernel() const { return weight_.dim(2); }
    std::size_t stride() const { return stride_; }
    std::size_t padding() const { return padding_; }

private:
    Tensor<T> weight_;
    std::size_t stride_, padding_;
};

template <typename T>
class BatchNorm : public Module<T> {
public:
    static constexpr double kEps = 1e-5;
    static constexpr double kMomentum = 0.1;

    explicit BatchNorm(std::size_t channels, T eps = T(kEps), T momentum = T(kMomentum))
        : gamma_(Tensor<T>::full({channels}, T(1), true)),
          beta_(Tensor<T>::zeros({channels}, true)),
          running_mean_(Tensor<T>::zeros({channels})),
          running_var_(Tensor<T>::full({channels}, T(1))),
          eps_(eps),
          momentum_(momentum) {}

    Tensor<T> forward(const Tensor<T>& x) {
        return batch_norm(x, gamma_, beta_, running_mean_.mutable_data(), running_var_.mutable_data(),
                          this->mode_ == Mode::train, momentum_, eps_);
    }

    void collect(const std::string& prefix, std::vector<NamedTensor<T>>& out) const override {
        out.push_back({join_name(prefix, "gamma"), gamma_, true});
        out.push_back({join_name(prefix, "beta"), beta_, true});
        out.push_back({join_name(prefix, "running_mean"), running_mean_, false});
        out.push_back({join_name(prefix, "running_var"), running_var_, false});
    }

    std::size_t channels() const { return gamma_.numel(); }
    Tensor<T>& gamma() { return gamma_; }
    Tensor<T>& beta() { return beta_; }
    Tensor<T>& running_mean() { return running_mean_; }
    Tensor<T>& running_var() { return running_var_; }
    const Tensor<T>& gamma() const { return gamma_; }
    const Tensor<T>& beta() const { return beta_; }
    const Tensor<T>& running_mean() const { return running_mean_; }
    const Tensor<T>& running_var() const { return running_var_; }
    T eps() const { return eps_; }
    T momentum() const { return momentum_; }

private:
    Tensor<T> gamma_, beta_, running_mean_, running_var_;
    T eps_, momentum_;
};

/// Fully connected layer, y = x·Wᵀ + b. Uniform ±1/√fan_in init for both.
template <typename T>
class Linear : public Module<T> {
public:
    Linear(std::size_t in_features, std::size_t out_features, bool with_bias, Rng* rng = nullptr) {
        const T bound = static_cast<T>(1.0 / std::sqrt(static_cast<double>(in_features)));
        if (rng) {
            weight_ = uniform_tensor<T>({out_features, in_features}, bound, *rng);
            if (with_bias) bias_ = uniform_tensor<T>({out_features}, bound, *rng);
        } else {
            weight_ = Tensor<T>::zeros({out_features, in_features}, true);
            if (with_bias) bias_ = Tensor<T>::zeros({out_features}, true);
        }
    }

    Tensor<T> forward(const Tensor<T>& x) const { return linear(x, weight_, bias_); }

    void collect(const std::string& prefix, std::vector<NamedTensor<T>>& out) const override {
        out.push_back({join_name(prefix, "weight"), weight_, true});
        if (bias_.defined()) out.push_back({join_name(prefix, "bias"), bias_, true});
    }

    std::size_t in_features() const { return weight_.dim(1); }
    std::size_t out_features() const { return weight_.dim(0); }
    bool has_bias() const { return bias_.defined(); }
    Tensor<T>& weight() { return weight_; }
    Tensor<T>& bias() { return bias_; }
    const Tensor<T>& weight() const { return weight_; }
    const Tensor<T>& bias() const { return bias_; }

private:
    Tensor<T> weight_, bias_;
};

enum class PoolKind { avg, std, max };

inline constexpr double kPoolEps = 1e-12;

inline const char* to_string(PoolKind k) {
    switch (k) {
        case PoolKind::avg: return "avg";
        case PoolKind::std: return "std";
        case PoolKind::max: return "max";
    }
    return "?";
}

/// Per-example, per-channel spatial statistic: [N, C, H, W] -> [N, C].
template <typename T>
Tensor<T> global_pool(const Tensor<T>& x, PoolKind kind, T std_eps = T(kPoolEps)) {
    switch (kind) {
        case PoolKind::avg: return global_avg_pool(x);
        case PoolKind::std: return global_std_pool(x, std_eps);
        case PoolKind::max: return global_max_pool(x);
    }
    throw std::invalid_argument("global_pool: unknown kind");
}

}  // namespace srm
