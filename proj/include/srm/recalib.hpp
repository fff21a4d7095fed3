#pragma once

#include <cmath>
#include <memory>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "srm/layers.hpp"
#include "srm/ops.hpp"

namespace srm {

/// Which global statistics feed the integrator. Features are always emitted in
/// the order avg, std, max.
struct PoolingSet {
    bool avg = false;
    bool std = false;
    bool max = false;

    std::vector<PoolKind> kinds() const {
        std::vector<PoolKind> out;
        if (avg) out.push_back(PoolKind::avg);
        if (std) out.push_back(PoolKind::std);
        if (max) out.push_back(PoolKind::max);
        return out;
    }
    std::size_t size() const { return kinds().size(); }
    bool empty() const { return !(avg || std || max); }

    std::string to_string() const {
        std::string s;
        for (auto k : kinds()) {
            if (!s.empty()) s += '+';
            s += srm::to_string(k);
        }
        return s;
    }

    static PoolingSet parse(const std::string& text) {
        PoolingSet p;
        std::stringstream ss(text);
        std::string tok;
        while (std::getline(ss, tok, '+')) {
            if (tok == "avg") p.avg = true;
            else if (tok == "std") p.std = true;
            else if (tok == "max") p.max = true;
            else throw std::invalid_argument("unknown pooling statistic '" + tok + "'");
        }
        return p;
    }

    bool operator==(const PoolingSet&) const = default;
};

enum class Integration { cfc, mlp };

/// One point in the recalibration design space. SRM = {avg, std} + CFC + BN;
/// SE = {avg} + MLP with reduction r and no BN.
struct RecalibVariant {
    PoolingSet pooling{true, true, false};
    Integration integration = Integration::cfc;
    bool use_bn = true;
    std::size_t reduction = 16;

    static RecalibVariant srm() { return {}; }
    static RecalibVariant se(std::size_t r = 16) { return {{true, false, false}, Integration::mlp, false, r}; }

    void validate() const {
        if (pooling.empty()) throw std::invalid_argument("recalibration variant needs at least one pooling statistic");
        if (reduction < 1) throw std::invalid_argument("reduction ratio must be >= 1");
    }

    /// Grammar: `srm` | `se[:r=N]` | `<pools>:<cfc|mlp>[+bn][:r=N]`,
    /// e.g. `avg+max:cfc+bn`, `avg+std:mlp:r=16`.
    static RecalibVariant parse(const std::string& text) {
        std::vector<std::string> parts;
        {
            std::stringstream ss(text);
            std::string tok;
            while (std::getline(ss, tok, ':')) parts.push_back(tok);
        }
        if (parts.empty()) throw std::invalid_argument("empty recalibration spec");
        RecalibVariant v;
        std::size_t next = 1;
        if (parts[0] == "srm") {
            v = srm();
        } else if (parts[0] == "se") {
            v = se();
        } else {
            v.pooling = PoolingSet::parse(parts[0]);
            if (parts.size() < 2) throw std::invalid_argument("variant '" + text + "' lacks an integrator");
            std::stringstream ss(parts[1]);
            std::string tok;
            std::getline(ss, tok, '+');
            if (tok == "cfc") v.integration = Integration::cfc;
            else if (tok == "mlp") v.integration = Integration::mlp;
            else throw std::invalid_argument("unknown integrator '" + tok + "'");
            v.use_bn = false;
            while (std::getline(ss, tok, '+')) {
                if (tok == "bn") v.use_bn = true;
                else throw std::invalid_argument("unknown integrator option '" + tok + "'");
            }
            next = 2;
        }
        for (; next < parts.size(); ++next) {
            const auto& p = parts[next];
            if (p.rfind("r=", 0) != 0) throw std::invalid_argument("unexpected variant field '" + p + "'");
            const long r = std::stol(p.substr(2));
            if (r < 1) throw std::invalid_argument("reduction ratio must be >= 1");
            v.reduction = static_cast<std::size_t>(r);
        }
        v.validate();
        return v;
    }

    std::string to_string() const {
        std::string s = pooling.to_string() + (integration == Integration::cfc ? ":cfc" : ":mlp");
        if (use_bn) s += "+bn";
        if (integration == Integration::mlp) s += ":r=" + std::to_string(reduction);
        return s;
    }

    bool operator==(const RecalibVariant&) const = default;
};

/// Style features T [N, C, d] and the statistics they were drawn from.
template <typename T>
struct StyleRepresentation {
    Tensor<T> values;
    PoolingSet pooling;

    std::size_t batch() const { return values.dim(0); }
    std::size_t channels() const { return values.dim(1); }
    std::size_t d() const { return values.dim(2); }
};

template <typename T>
StyleRepresentation<T> style_pool(const Tensor<T>& x, const PoolingSet& pooling, T std_eps = T(kPoolEps)) {
    if (pooling.empty()) throw std::invalid_argument("style_pool: empty pooling set");
    std::vector<Tensor<T>> stats;
    for (auto kind : pooling.kinds()) stats.push_back(global_pool(x, kind, std_eps));
    return {stack_last(stats), pooling};
}

/// x̂[n,c,:,:] = g[n,c]·x[n,c,:,:]
template <typename T>
Tensor<T> recalibrate(const Tensor<T>& x, const Tensor<T>& gates) {
    detail::check(x.rank() == 4 && gates.shape() == Shape{x.dim(0), x.dim(1)},
                  "recalibrate: gates " + to_string(gates.shape()) + " do not match features " + to_string(x.shape()));
    return channel_mul(x, gates);
}

/// Channel-wise style integration: CFC, then BN over the batch, then sigmoid.
/// Without BN the CFC carries its own per-channel bias.
template <typename T>
class StyleIntegration : public Module<T> {
public:
    StyleIntegration(std::size_t channels, std::size_t d, bool use_bn, Rng* rng = nullptr,
                     T bn_eps = T(BatchNorm<T>::kEps)) {
        const T bound = static_cast<T>(1.0 / std::sqrt(static_cast<double>(d)));
        weight_ = rng ? uniform_tensor<T>({channels, d}, bound, *rng) : Tensor<T>::zeros({channels, d}, true);
        if (use_bn) {
            bn_.emplace(channels, bn_eps);
        } else {
            bias_ = Tensor<T>::zeros({channels}, true);
        }
    }

    /// Pre-sigmoid response ẑ for the given mode.
    Tensor<T> encode(const StyleRepresentation<T>& t, Mode mode) {
        if (t.d() != weight_.dim(1) || t.channels() != weight_.dim(0)) {
            throw ShapeError("style_integrate: style features " + to_string(t.values.shape()) +
                             " incompatible with CFC weights " + to_string(weight_.shape()));
        }
        if (mode == Mode::folded) {
            if (!folded_weight_.defined()) {
                throw std::logic_error("style_integrate: folded mode requested before fold_bn");
            }
            return cfc(t.values, folded_weight_, folded_bias_);
        }
        Tensor<T> z = cfc(t.values, weight_, bias_);
        if (!bn_) return z;
        bn_->set_mode(mode);
        return bn_->forward(z);
    }

    Tensor<T> integrate(const StyleRepresentation<T>& t, Mode mode) { return sigmoid(encode(t, mode)); }
    Tensor<T> integrate(const StyleRepresentation<T>& t) { return integrate(t, this->mode_); }

    /// Merges the eval-mode BN into the CFC:
    ///   w′ = γ·w/√(var+ε),  b′ = β − γ·mean/√(var+ε).
    void fold_bn() {
        const std::size_t C = weight_.dim(0), d = weight_.dim(1);
        std::vector<T> w(weight_.data().begin(), weight_.data().end());
        std::vector<T> b(C, T(0));
        if (bn_) {
            for (std::size_t c = 0; c < C; ++c) {
                const T var = bn_->running_var()[c];
                if (!std::isfinite(var) || !std::isfinite(bn_->running_mean()[c]) || var < T(0)) {
                    throw std::domain_error("fold_bn: running statistics of channel " + std::to_string(c) +
                                            " are not finite");
                }
                const T k = bn_->gamma()[c] / std::sqrt(var + bn_->eps());
                for (std::size_t j = 0; j < d; ++j) w[c * d + j] *= k;
                b[c] = bn_->beta()[c] - k * bn_->running_mean()[c];
            }
        } else {
            std::copy(bias_.data().begin(), bias_.data().end(), b.begin());
        }
        folded_weight_ = Tensor<T>({C, d}, std::move(w));
        folded_bias_ = Tensor<T>({C}, std::move(b));
    }

    bool is_folded() const { return folded_weight_.defined(); }

    void set_mode(Mode mode) override {
        if (mode == Mode::train) {
            folded_weight_ = {};
            folded_bias_ = {};
        }
        this->mode_ = mode;
        if (bn_) bn_->set_mode(mode == Mode::folded ? Mode::eval : mode);
    }

    void collect(const std::string& prefix, std::vector<NamedTensor<T>>& out) const override {
        out.push_back({join_name(prefix, "cfc.weight"), weight_, true});
        if (bias_.defined()) out.push_back({join_name(prefix, "cfc.bias"), bias_, true});
        if (bn_) bn_->collect(join_name(prefix, "bn"), out);
    }

    Tensor<T>& weight() { return weight_; }
    Tensor<T>& bias() { return bias_; }
    BatchNorm<T>* bn() { return bn_ ? &*bn_ : nullptr; }
    const Tensor<T>& folded_weight() const { return folded_weight_; }
    const Tensor<T>& folded_bias() const { return folded_bias_; }

private:
    Tensor<T> weight_, bias_;
    std::optional<BatchNorm<T>> bn_;
    Tensor<T> folded_weight_, folded_bias_;
};

/// Produces per-example channel gates G ∈ (0,1)^{N×C} from a feature map and
/// applies them.
template <typename T>
class RecalibLayer : public Module<T> {
public:
    explicit RecalibLayer(RecalibVariant v, std::size_t channels) : variant_(std::move(v)), channels_(channels) {}

    virtual Tensor<T> gates(const Tensor<T>& x) = 0;
    virtual void fold_bn() = 0;

    Tensor<T> forward(const Tensor<T>& x) { return recalibrate(x, gates(x)); }

    const RecalibVariant& variant() const { return variant_; }
    std::size_t channels() const { return channels_; }

protected:
    RecalibVariant variant_;
    std::size_t channels_;
};

template <typename T>
class SrmLayer : public RecalibLayer<T> {
public:
    SrmLayer(const RecalibVariant& v, std::size_t channels, Rng* rng = nullptr)
        : RecalibLayer<T>(v, channels), integration_(channels, v.pooling.size(), v.use_bn, rng) {}

    Tensor<T> gates(const Tensor<T>& x) override {
        return integration_.integrate(style_pool(x, this->variant_.pooling), this->mode_);
    }

    void fold_bn() override { integration_.fold_bn(); }

    void set_mode(Mode mode) override {
        this->mode_ = mode;
        integration_.set_mode(mode);
    }

    void collect(const std::string& prefix, std::vector<NamedTensor<T>>& out) const override {
        integration_.collect(prefix, out);
    }

    StyleIntegration<T>& integration() { return integration_; }

private:
    StyleIntegration<T> integration_;
};

inline std::size_t hidden_width(std::size_t channels, std::size_t reduction) {
    return std::max<std::size_t>(1, channels / reduction);
}

/// Two-layer excitation over concatenated style features:
/// FC(C·d → C/r) → ReLU → FC(C/r → C) [→ BN] → sigmoid. With {avg} pooling and
/// no BN this is the SE block. When BN follows, the second FC has no bias.
template <typename T>
class MlpRecalibLayer : public RecalibLayer<T> {
public:
    MlpRecalibLayer(const RecalibVariant& v, std::size_t channels, Rng* rng = nullptr)
        : RecalibLayer<T>(v, channels),
          fc1_(channels * v.pooling.size(), hidden_width(channels, v.reduction), true, rng),
          fc2_(hidden_width(channels, v.reduction), channels, !v.use_bn, rng) {
        if (v.use_bn) bn_.emplace(channels);
    }

    Tensor<T> squeeze(const Tensor<T>& x) const {
        std::vector<Tensor<T>> stats;
        for (auto kind : this->variant_.pooling.kinds()) stats.push_back(global_pool(x, kind));
        return stats.size() == 1 ? stats.front() : concat_channels(stats);
    }

    Tensor<T> gates(const Tensor<T>& x) override {
        Tensor<T> h = relu(fc1_.forward(squeeze(x)));
        if (this->mode_ == Mode::folded && bn_) {
            if (!folded_weight_.defined()) throw std::logic_error("gates: folded mode requested before fold_bn");
            return sigmoid(linear(h, folded_weight_, folded_bias_));
        }
        Tensor<T> z = fc2_.forward(h);
        if (bn_) z = bn_->forward(z);
        return sigmoid(z);
    }

    void fold_bn() override {
        if (!bn_) return;
        const std::size_t C = fc2_.out_features(), H = fc2_.in_features();
        std::vector<T> w(fc2_.weight().data().begin(), fc2_.weight().data().end());
        std::vector<T> b(C);
        for (std::size_t c = 0; c < C; ++c) {
            const T var = bn_->running_var()[c];
            if (!std::isfinite(var) || !std::isfinite(bn_->running_mean()[c]) || var < T(0)) {
                throw std::domain_error("fold_bn: running statistics of channel " + std::to_string(c) +
                                        " are not finite");
            }
            const T k = bn_->gamma()[c] / std::sqrt(var + bn_->eps());
            for (std::size_t j = 0; j < H; ++j) w[c * H + j] *= k;
            b[c] = bn_->beta()[c] - k * bn_->running_mean()[c];
        }
        folded_weight_ = Tensor<T>({C, H}, std::move(w));
        folded_bias_ = Tensor<T>({C}, std::move(b));
    }

    void set_mode(Mode mode) override {
        if (mode == Mode::train) {
            folded_weight_ = {};
            folded_bias_ = {};
        }
        this->mode_ = mode;
        if (bn_) bn_->set_mode(mode == Mode::folded ? Mode::eval : mode);
    }

    void collect(const std::string& prefix, std::vector<NamedTensor<T>>& out) const override {
        fc1_.collect(join_name(prefix, "fc1"), out);
        fc2_.collect(join_name(prefix, "fc2"), out);
        if (bn_) bn_->collect(join_name(prefix, "bn"), out);
    }

    Linear<T>& fc1() { return fc1_; }
    Linear<T>& fc2() { return fc2_; }
    BatchNorm<T>* bn() { return bn_ ? &*bn_ : nullptr; }

private:
    Linear<T> fc1_, fc2_;
    std::optional<BatchNorm<T>> bn_;
    Tensor<T> folded_weight_, folded_bias_;
};

/// Squeeze-and-excitation as a plain composition of primitives.
template <typename T>
Tensor<T> se_block(const Tensor<T>& x, const Linear<T>& fc1, const Linear<T>& fc2) {
    Tensor<T> g = sigmoid(fc2.forward(relu(fc1.forward(global_avg_pool(x)))));
    return recalibrate(x, g);
}

template <typename T>
std::unique_ptr<RecalibLayer<T>> make_variant(const RecalibVariant& v, std::size_t channels, Rng* rng = nullptr) {
    v.validate();
    if (v.integration == Integration::cfc) return std::make_unique<SrmLayer<T>>(v, channels, rng);
    return std::make_unique<MlpRecalibLayer<T>>(v, channels, rng);
}

}  // namespace srm
