#pragma once

#include <algorithm>
#include <functional>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "srm/layers.hpp"
#include "srm/recalib.hpp"
#include "srm/record.hpp"

namespace srm {

enum class BlockKind { basic, bottleneck };
enum class StemKind { cifar, imagenet };

inline constexpr std::size_t kBottleneckExpansion = 4;

struct StageSpec {
    std::size_t blocks = 1;
    std::size_t channels = 16;
    std::size_t stride = 1;

    bool operator==(const StageSpec&) const = default;
};

/// Residual network layout. `channels` of a stage is its output width; for
/// bottleneck blocks the inner width is channels / 4.
struct ArchitectureConfig {
    std::string name = "resnet";
    StemKind stem = StemKind::cifar;
    std::size_t stem_channels = 16;
    std::size_t in_channels = 3;
    BlockKind block = BlockKind::basic;
    std::vector<StageSpec> stages;
    std::optional<RecalibVariant> recalib;
    std::size_t num_classes = 10;

    void validate() const {
        if (stages.empty()) throw std::invalid_argument("architecture '" + name + "' has no stages");
        if (stem_channels < 1 || in_channels < 1 || num_classes < 1) {
            throw std::invalid_argument("architecture '" + name + "': widths and class count must be >= 1");
        }
        for (std::size_t s = 0; s < stages.size(); ++s) {
            const auto& st = stages[s];
            const std::string where = "architecture '" + name + "' stage " + std::to_string(s + 1);
            if (st.blocks < 1 || st.channels < 1 || st.stride < 1) {
                throw std::invalid_argument(where + ": blocks, channels and stride must be >= 1");
            }
            if (block == BlockKind::bottleneck && st.channels % kBottleneckExpansion != 0) {
                throw std::invalid_argument(where + ": bottleneck width must be a multiple of 4");
            }
        }
        if (recalib) recalib->validate();
    }

    /// Σ N_s·C_s over stages.
    std::size_t block_channel_sum() const {
        std::size_t s = 0;
        for (auto& st : stages) s += st.blocks * st.channels;
        return s;
    }

    std::size_t weighted_layers() const {
        std::size_t per_block = block == BlockKind::basic ? 2 : 3;
        std::size_t n = 0;
        for (auto& st : stages) n += st.blocks * per_block;
        return n + 2;
    }

    ArchitectureConfig with_recalib(std::optional<RecalibVariant> v) const {
        ArchitectureConfig c = *this;
        c.recalib = std::move(v);
        return c;
    }

    /// CIFAR ResNet with 6n+2 weighted layers and widths 16/32/64.
    static ArchitectureConfig cifar_resnet(std::size_t n, std::size_t num_classes = 10) {
        ArchitectureConfig c;
        c.name = "resnet" + std::to_string(6 * n + 2);
        c.stages = {{n, 16, 1}, {n, 32, 2}, {n, 64, 2}};
        c.num_classes = num_classes;
        return c;
    }
    static ArchitectureConfig resnet20() { return cifar_resnet(3); }
    static ArchitectureConfig resnet32() { return cifar_resnet(5); }
    static ArchitectureConfig resnet56() { return cifar_resnet(9); }

    static ArchitectureConfig resnet50(std::size_t num_classes = 1000) {
        ArchitectureConfig c;
        c.name = "resnet50";
        c.stem = StemKind::imagenet;
        c.stem_channels = 64;
        c.block = BlockKind::bottleneck;
        c.stages = {{3, 256, 1}, {4, 512, 2}, {6, 1024, 2}, {3, 2048, 2}};
        c.num_classes = num_classes;
        return c;
    }

    /// Small bottleneck network for CIFAR-sized inputs.
    static ArchitectureConfig bottleneck_mini(std::size_t num_classes = 10) {
        ArchitectureConfig c;
        c.name = "bottleneck_mini";
        c.block = BlockKind::bottleneck;
        c.stages = {{2, 64, 1}, {2, 128, 2}, {2, 256, 2}};
        c.num_classes = num_classes;
        return c;
    }

    static ArchitectureConfig preset(const std::string& name) {
        if (name == "resnet20") return resnet20();
        if (name == "resnet32") return resnet32();
        if (name == "resnet56") return resnet56();
        if (name == "resnet50") return resnet50();
        if (name == "bottleneck_mini") return bottleneck_mini();
        throw std::invalid_argument("unknown architecture preset '" + name + "'");
    }

    bool operator==(const ArchitectureConfig&) const = default;
};

inline std::string recalib_to_string(const std::optional<RecalibVariant>& v) { return v ? v->to_string() : "none"; }

inline std::optional<RecalibVariant> parse_recalib(const std::string& text) {
    if (text.empty() || text == "none") return std::nullopt;
    return RecalibVariant::parse(text);
}

inline nlohmann::json to_json(const ArchitectureConfig& c) {
    nlohmann::json stages = nlohmann::json::array();
    for (auto& s : c.stages) stages.push_back({{"blocks", s.blocks}, {"channels", s.channels}, {"stride", s.stride}});
    return {{"name", c.name},
            {"stem", c.stem == StemKind::cifar ? "cifar" : "imagenet"},
            {"stem_channels", c.stem_channels},
            {"in_channels", c.in_channels},
            {"block", c.block == BlockKind::basic ? "basic" : "bottleneck"},
            {"stages", stages},
            {"recalib", recalib_to_string(c.recalib)},
            {"num_classes", c.num_classes}};
}

/// Missing keys keep their defaults; unknown keys are rejected.
inline ArchitectureConfig architecture_from_json(const nlohmann::json& j) {
    if (!j.is_object()) throw std::invalid_argument("architecture config must be a JSON object");
    static const std::vector<std::string> known{"name",  "stem",   "stem_channels", "in_channels",
                                                "block", "stages", "recalib",       "num_classes"};
    for (auto it = j.begin(); it != j.end(); ++it) {
        if (std::find(known.begin(), known.end(), it.key()) == known.end()) {
            throw std::invalid_argument("unknown architecture key '" + it.key() + "'");
        }
    }
    auto count = [&](const nlohmann::json& v, const std::string& key) -> std::size_t {
        if (!v.is_number_integer() || v.get<long long>() < 0) {
            throw std::invalid_argument("architecture key '" + key + "' must be a non-negative integer");
        }
        return v.get<std::size_t>();
    };
    ArchitectureConfig c;
    if (j.contains("name")) c.name = j.at("name").get<std::string>();
    if (j.contains("stem")) {
        const auto s = j.at("stem").get<std::string>();
        if (s == "cifar") c.stem = StemKind::cifar;
        else if (s == "imagenet") c.stem = StemKind::imagenet;
        else throw std::invalid_argument("unknown stem '" + s + "'");
    }
    if (j.contains("stem_channels")) c.stem_channels = count(j.at("stem_channels"), "stem_channels");
    if (j.contains("in_channels")) c.in_channels = count(j.at("in_channels"), "in_channels");
    if (j.contains("block")) {
        const auto b = j.at("block").get<std::string>();
        if (b == "basic") c.block = BlockKind::basic;
        else if (b == "bottleneck") c.block = BlockKind::bottleneck;
        else throw std::invalid_argument("unknown block kind '" + b + "'");
    }
    if (j.contains("stages")) {
        if (!j.at("stages").is_array()) throw std::invalid_argument("'stages' must be an array");
        for (auto& s : j.at("stages")) {
            if (!s.is_object()) throw std::invalid_argument("each stage must be an object");
            StageSpec st;
            st.blocks = count(s.at("blocks"), "blocks");
            st.channels = count(s.at("channels"), "channels");
            if (s.contains("stride")) st.stride = count(s.at("stride"), "stride");
            c.stages.push_back(st);
        }
    }
    if (j.contains("recalib")) c.recalib = parse_recalib(j.at("recalib").get<std::string>());
    if (j.contains("num_classes")) c.num_classes = count(j.at("num_classes"), "num_classes");
    c.validate();
    return c;
}

/// Optional instrumentation for a forward pass. All callbacks see tensors of
/// the running pass; `gate_transform` may replace the gates before they are
/// applied.
template <typename T>
struct ForwardHooks {
    std::function<Tensor<T>(const BlockId&, const Tensor<T>& gates)> gate_transform;
    std::function<void(const BlockId&, const Tensor<T>& pre_gate, const Tensor<T>& gates)> on_gates;
    std::function<void(const BlockId&, const Tensor<T>& input, const Tensor<T>& output)> on_block;
};

/// conv-BN(-ReLU) residual branch, optional recalibration after the branch's
/// final BN, then shortcut addition and ReLU.
template <typename T>
class ResidualBlock : public Module<T> {
public:
    ResidualBlock(BlockId id, BlockKind kind, std::size_t in_channels, std::size_t out_channels, std::size_t stride,
                  const std::optional<RecalibVariant>& recalib, Rng* rng)
        : id_(id), kind_(kind) {
        if (kind == BlockKind::basic) {
            convs_.emplace_back(in_channels, out_channels, 3, stride, 1, rng);
            convs_.emplace_back(out_channels, out_channels, 3, 1, 1, rng);
        } else {
            const std::size_t mid = out_channels / kBottleneckExpansion;
            convs_.emplace_back(in_channels, mid, 1, stride, 0, rng);
            convs_.emplace_back(mid, mid, 3, 1, 1, rng);
            convs_.emplace_back(mid, out_channels, 1, 1, 0, rng);
        }
        for (auto& c : convs_) bns_.emplace_back(c.out_channels());
        if (stride != 1 || in_channels != out_channels) {
            proj_conv_.emplace(in_channels, out_channels, 1, stride, 0, rng);
            proj_bn_.emplace(out_channels);
        }
        if (recalib) recalib_ = make_variant<T>(*recalib, out_channels, rng);
    }

    /// Residual branch up to and including its final BN.
    Tensor<T> branch(const Tensor<T>& x) {
        Tensor<T> h = x;
        for (std::size_t i = 0; i < convs_.size(); ++i) {
            h = bns_[i].forward(convs_[i].forward(h));
            if (i + 1 < convs_.size()) h = relu(h);
        }
        return h;
    }

    Tensor<T> shortcut(const Tensor<T>& x) { return proj_conv_ ? proj_bn_->forward(proj_conv_->forward(x)) : x; }

    Tensor<T> forward(const Tensor<T>& x, const ForwardHooks<T>* hooks = nullptr) {
        Tensor<T> h = branch(x);
        if (recalib_) {
            Tensor<T> g = recalib_->gates(h);
            if (hooks && hooks->on_gates) hooks->on_gates(id_, h, g);
            if (hooks && hooks->gate_transform) g = hooks->gate_transform(id_, g);
            h = recalibrate(h, g);
        }
        Tensor<T> y = relu(add(h, shortcut(x)));
        if (hooks && hooks->on_block) hooks->on_block(id_, x, y);
        return y;
    }

    void set_mode(Mode mode) override {
        this->mode_ = mode;
        const Mode backbone = mode == Mode::train ? Mode::train : Mode::eval;
        for (auto& b : bns_) b.set_mode(backbone);
        if (proj_bn_) proj_bn_->set_mode(backbone);
        if (recalib_) {
            if (mode == Mode::folded) recalib_->fold_bn();
            recalib_->set_mode(mode);
        }
    }

    void collect(const std::string& prefix, std::vector<NamedTensor<T>>& out) const override {
        for (std::size_t i = 0; i < convs_.size(); ++i) {
            convs_[i].collect(join_name(prefix, "conv" + std::to_string(i + 1)), out);
            bns_[i].collect(join_name(prefix, "bn" + std::to_string(i + 1)), out);
        }
        if (recalib_) recalib_->collect(join_name(prefix, "recalib"), out);
        if (proj_conv_) {
            proj_conv_->collect(join_name(prefix, "shortcut.conv"), out);
            proj_bn_->collect(join_name(prefix, "shortcut.bn"), out);
        }
    }

    const BlockId& id() const { return id_; }
    BlockKind kind() const { return kind_; }
    bool has_projection() const { return proj_conv_.has_value(); }
    RecalibLayer<T>* recalib() { return recalib_.get(); }
    const RecalibLayer<T>* recalib() const { return recalib_.get(); }
    std::vector<Conv2d<T>>& convs() { return convs_; }
    const std::vector<Conv2d<T>>& convs() const { return convs_; }
    std::vector<BatchNorm<T>>& bns() { return bns_; }
    const Conv2d<T>* projection_conv() const { return proj_conv_ ? &*proj_conv_ : nullptr; }
    std::size_t out_channels() const { return convs_.back().out_channels(); }

private:
    BlockId id_;
    BlockKind kind_;
    std::vector<Conv2d<T>> convs_;
    std::vector<BatchNorm<T>> bns_;
    std::optional<Conv2d<T>> proj_conv_;
    std::optional<BatchNorm<T>> proj_bn_;
    std::unique_ptr<RecalibLayer<T>> recalib_;
};

/// stem → stages of residual blocks → global average pool → linear classifier.
/// A null rng leaves every weight at zero (useful for counting only).
template <typename T>
class ResNet : public Module<T> {
public:
    explicit ResNet(ArchitectureConfig cfg, Rng* rng = nullptr)
        : cfg_(validated(std::move(cfg))),
          stem_conv_(cfg_.in_channels, cfg_.stem_channels, cfg_.stem == StemKind::cifar ? 3 : 7,
                     cfg_.stem == StemKind::cifar ? 1 : 2, cfg_.stem == StemKind::cifar ? 1 : 3, rng),
          stem_bn_(cfg_.stem_channels),
          fc_(cfg_.stages.back().channels, cfg_.num_classes, true, rng) {
        std::size_t in = cfg_.stem_channels;
        stages_.resize(cfg_.stages.size());
        for (std::size_t s = 0; s < cfg_.stages.size(); ++s) {
            const auto& st = cfg_.stages[s];
            for (std::size_t b = 0; b < st.blocks; ++b) {
                stages_[s].push_back(std::make_unique<ResidualBlock<T>>(
                    BlockId{s + 1, b}, cfg_.block, in, st.channels, b == 0 ? st.stride : 1, cfg_.recalib, rng));
                in = st.channels;
            }
        }
    }

    Tensor<T> stem(const Tensor<T>& x) {
        if (x.rank() != 4 || x.dim(1) != cfg_.in_channels) {
            throw ShapeError("network expects [N, " + std::to_string(cfg_.in_channels) + ", H, W] input, got " +
                             to_string(x.shape()));
        }
        Tensor<T> h = relu(stem_bn_.forward(stem_conv_.forward(x)));
        if (cfg_.stem == StemKind::imagenet) h = max_pool2d(h, 3, 2, 1);
        return h;
    }

    Tensor<T> head(const Tensor<T>& features) { return fc_.forward(global_avg_pool(features)); }

    /// Runs stages [first, last] (1-based, inclusive) on their input.
    Tensor<T> run_stages(Tensor<T> h, std::size_t first, std::size_t last, const ForwardHooks<T>* hooks = nullptr) {
        for (std::size_t s = first; s <= last; ++s) {
            for (auto& blk : stages_[s - 1]) h = blk->forward(h, hooks);
        }
        return h;
    }

    /// Logits [N, num_classes].
    Tensor<T> forward(const Tensor<T>& x, const ForwardHooks<T>* hooks = nullptr) {
        return head(run_stages(stem(x), 1, stages_.size(), hooks));
    }

    void set_mode(Mode mode) override {
        this->mode_ = mode;
        stem_bn_.set_mode(mode == Mode::train ? Mode::train : Mode::eval);
        for (auto& stage : stages_) {
            for (auto& blk : stage) blk->set_mode(mode);
        }
    }

    /// Merges every recalibration BN into its preceding linear map.
    void fold_recalib() { set_mode(Mode::folded); }

    void collect(const std::string& prefix, std::vector<NamedTensor<T>>& out) const override {
        stem_conv_.collect(join_name(prefix, "stem.conv"), out);
        stem_bn_.collect(join_name(prefix, "stem.bn"), out);
        for (auto& stage : stages_) {
            for (auto& blk : stage) blk->collect(join_name(prefix, blk->id().name()), out);
        }
        fc_.collect(join_name(prefix, "fc"), out);
    }

    const ArchitectureConfig& config() const { return cfg_; }
    std::size_t num_stages() const { return stages_.size(); }
    std::vector<std::unique_ptr<ResidualBlock<T>>>& stage(std::size_t s) { return stages_.at(s - 1); }
    const std::vector<std::unique_ptr<ResidualBlock<T>>>& stage(std::size_t s) const { return stages_.at(s - 1); }
    ResidualBlock<T>& block(const BlockId& id) { return *stages_.at(id.stage - 1).at(id.block); }
    const Conv2d<T>& stem_conv() const { return stem_conv_; }
    Linear<T>& classifier() { return fc_; }
    const Linear<T>& classifier() const { return fc_; }
    bool has_recalib() const { return cfg_.recalib.has_value(); }

private:
    static ArchitectureConfig validated(ArchitectureConfig c) {
        c.validate();
        return c;
    }

    ArchitectureConfig cfg_;
    Conv2d<T> stem_conv_;
    BatchNorm<T> stem_bn_;
    std::vector<std::vector<std::unique_ptr<ResidualBlock<T>>>> stages_;
    Linear<T> fc_;
};

template <typename T>
std::unique_ptr<ResNet<T>> build_resnet(const ArchitectureConfig& cfg, Rng* rng = nullptr) {
    return std::make_unique<ResNet<T>>(cfg, rng);
}

template <typename T>
struct CaptureResult {
    Tensor<T> logits;
    AnalysisRecord record;
};

/// Evaluates a batch and records every recalibration layer's gates, one row
/// per image. Images are numbered from `first_image_id`. The model must be in
/// eval or folded mode.
template <typename T>
CaptureResult<T> forward_with_capture(ResNet<T>& model, const Tensor<T>& batch, std::size_t first_image_id = 0) {
    if (model.mode() == Mode::train) throw std::logic_error("forward_with_capture: model is in train mode");
    NoGradGuard no_grad;
    CaptureResult<T> result;
    ForwardHooks<T> hooks;
    hooks.on_gates = [&](const BlockId& id, const Tensor<T>&, const Tensor<T>& g) {
        auto& layer = result.record.layer_or_add(id, g.dim(1));
        layer.values.insert(layer.values.end(), g.data().begin(), g.data().end());
    };
    result.logits = model.forward(batch, &hooks);
    for (std::size_t n = 0; n < batch.dim(0); ++n) result.record.image_ids.push_back(first_image_id + n);
    result.record.no_recalib = !model.has_recalib();
    return result;
}

/// Appends `part` (captured over a later batch) to `into`.
inline void append_record(AnalysisRecord& into, const AnalysisRecord& part) {
    if (into.image_ids.empty() && into.layers.empty()) {
        into = part;
        return;
    }
    if (into.layers.size() != part.layers.size()) throw std::invalid_argument("append_record: layer sets differ");
    for (std::size_t i = 0; i < part.layers.size(); ++i) {
        auto& dst = into.layer_or_add(part.layers[i].id, part.layers[i].channels);
        dst.values.insert(dst.values.end(), part.layers[i].values.begin(), part.layers[i].values.end());
    }
    into.image_ids.insert(into.image_ids.end(), part.image_ids.begin(), part.image_ids.end());
}

}  // namespace srm
