#pragma once

#include <algorithm>
#include <cstdint>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "srm/models.hpp"

namespace srm {

/// One row of the per-layer breakdown. `params` follows the report's
/// running-statistics convention; `flops` is for one image.
struct LayerCost {
    std::string name;
    std::string kind;
    std::uint64_t params = 0;
    std::uint64_t flops = 0;
};

struct ComplexityReport {
    std::string arch;
    std::string recalib = "none";
    bool includes_running_stats = false;
    std::uint64_t total_params = 0;
    std::uint64_t trainable_params = 0;
    std::uint64_t running_stats = 0;
    std::uint64_t added_by_recalib = 0;
    std::uint64_t flops = 0;
    std::uint64_t recalib_flops = 0;
    std::vector<std::size_t> input_shape;
    std::vector<LayerCost> layers;
};

namespace detail {

inline bool is_running_stat(const std::string& name) {
    return name.ends_with(".running_mean") || name.ends_with(".running_var");
}

inline bool in_recalib(const std::string& name) { return name.find(".recalib.") != std::string::npos; }

/// "stage1.block0.conv1.weight" → "stage1.block0.conv1".
inline std::string owner(const std::string& name) {
    const auto dot = name.rfind('.');
    return dot == std::string::npos ? name : name.substr(0, dot);
}

/// Name of the BN that follows a conv: conv1 → bn1, stem.conv → stem.bn.
inline std::string owner_of_bn(const std::string& conv_name) {
    std::string s = conv_name;
    const auto pos = s.rfind("conv");
    if (pos != std::string::npos) s.replace(pos, 4, "bn");
    return s;
}

}  // namespace detail

/// Enumerates the model's named tensors. With `include_running_stats`, BN
/// running mean/var count towards total and added parameters.
template <typename T>
ComplexityReport count_params(const ResNet<T>& model, bool include_running_stats) {
    ComplexityReport r;
    r.arch = model.config().name;
    r.recalib = recalib_to_string(model.config().recalib);
    r.includes_running_stats = include_running_stats;
    for (auto& nt : model.named_tensors()) {
        const std::uint64_t n = nt.tensor.numel();
        const bool stat = detail::is_running_stat(nt.name);
        if (nt.trainable) r.trainable_params += n;
        if (stat) r.running_stats += n;
        if (!nt.trainable && !include_running_stats) continue;
        r.total_params += n;
        if (detail::in_recalib(nt.name)) r.added_by_recalib += n;
        const std::string layer = detail::owner(nt.name);
        if (r.layers.empty() || r.layers.back().name != layer) r.layers.push_back({layer, "", 0, 0});
        r.layers.back().params += n;
    }
    return r;
}

/// Closed-form parameter count added by the recalibration variant of `cfg`.
/// CFC: C·d weights plus either a bias (C) or BN (2C, +2C running stats).
/// MLP: fc1 C·d·h + h, fc2 h·C, then a bias (C) or BN (2C, +2C running stats).
inline std::uint64_t recalib_params_closed_form(const ArchitectureConfig& cfg, bool include_running_stats) {
    if (!cfg.recalib) return 0;
    const auto& v = *cfg.recalib;
    const std::uint64_t d = v.pooling.size();
    const std::uint64_t bn_per_channel = include_running_stats ? 4 : 2;
    std::uint64_t total = 0;
    for (auto& st : cfg.stages) {
        const std::uint64_t C = st.channels;
        std::uint64_t per_block = 0;
        if (v.integration == Integration::cfc) {
            per_block = C * d + (v.use_bn ? bn_per_channel * C : C);
        } else {
            const std::uint64_t h = hidden_width(st.channels, v.reduction);
            per_block = C * d * h + h + h * C + (v.use_bn ? bn_per_channel * C : C);
        }
        total += st.blocks * per_block;
    }
    return total;
}

/// Multiply-accumulates of one convolution over an h×w input.
template <typename T>
std::uint64_t conv_flops(const Conv2d<T>& c, std::size_t h, std::size_t w) {
    const std::uint64_t ho = conv_out_extent(h, c.kernel(), c.stride(), c.padding());
    const std::uint64_t wo = conv_out_extent(w, c.kernel(), c.stride(), c.padding());
    return std::uint64_t(c.out_channels()) * ho * wo * c.in_channels() * c.kernel() * c.kernel();
}

/// Analytic FLOP count for one image of shape {channels, height, width}.
/// Multiply-accumulates count once; BN, pooling, sigmoid and the gate
/// multiplication count one per output element (per input element for global
/// reductions). ReLU and the residual addition are not counted.
template <typename T>
ComplexityReport count_flops(const ResNet<T>& model, const std::vector<std::size_t>& input_shape) {
    const auto& cfg = model.config();
    if (input_shape.size() != 3 || input_shape[0] != cfg.in_channels) {
        throw ShapeError("count_flops: expected input {" + std::to_string(cfg.in_channels) + ", H, W}, got " +
                         to_string(Shape(input_shape)));
    }
    ComplexityReport r;
    r.arch = cfg.name;
    r.recalib = recalib_to_string(cfg.recalib);
    r.input_shape = input_shape;
    std::size_t H = input_shape[1], W = input_shape[2];

    auto add = [&](const std::string& name, const std::string& kind, std::uint64_t flops, bool recalib = false) {
        r.layers.push_back({name, kind, 0, flops});
        r.flops += flops;
        if (recalib) r.recalib_flops += flops;
    };
    auto conv = [&](const std::string& name, const Conv2d<T>& c, std::size_t& h, std::size_t& w) {
        const std::size_t k = c.kernel(), s = c.stride(), p = c.padding();
        if (h + 2 * p < k || w + 2 * p < k) {
            throw ShapeError("count_flops: input " + to_string(Shape(input_shape)) + " too small at " + name);
        }
        add(name, "conv", conv_flops(c, h, w));
        h = conv_out_extent(h, k, s, p);
        w = conv_out_extent(w, k, s, p);
        const std::uint64_t out = std::uint64_t(c.out_channels()) * h * w;
        add(detail::owner_of_bn(name), "bn", out);
    };

    conv("stem.conv", model.stem_conv(), H, W);
    if (cfg.stem == StemKind::imagenet) {
        H = conv_out_extent(H, 3, 2, 1);
        W = conv_out_extent(W, 3, 2, 1);
        add("stem.maxpool", "pool", std::uint64_t(cfg.stem_channels) * H * W);
    }
    for (std::size_t s = 1; s <= model.num_stages(); ++s) {
        for (auto& blk : model.stage(s)) {
            const std::string prefix = blk->id().name();
            std::size_t h = H, w = W;
            for (std::size_t i = 0; i < blk->convs().size(); ++i) {
                conv(prefix + ".conv" + std::to_string(i + 1), blk->convs()[i], h, w);
            }
            if (const auto* pc = blk->projection_conv()) {
                std::size_t ph = H, pw = W;
                conv(prefix + ".shortcut.conv", *pc, ph, pw);
            }
            if (const auto* rc = blk->recalib()) {
                const auto& v = rc->variant();
                const std::uint64_t C = rc->channels(), HW = std::uint64_t(h) * w;
                const std::uint64_t d = v.pooling.size();
                const std::string name = prefix + ".recalib";
                add(name + ".pool", "pool", d * C * HW, true);
                if (v.integration == Integration::cfc) {
                    add(name + ".cfc", "cfc", C * d, true);
                } else {
                    const std::uint64_t hid = hidden_width(C, v.reduction);
                    add(name + ".fc1", "linear", C * d * hid, true);
                    add(name + ".fc2", "linear", hid * C, true);
                }
                if (v.use_bn) add(name + ".bn", "bn", C, true);
                add(name + ".sigmoid", "sigmoid", C, true);
                add(name + ".scale", "mul", C * HW, true);
            }
            H = h;
            W = w;
        }
    }
    const std::uint64_t C = cfg.stages.back().channels;
    add("avgpool", "pool", C * H * W);
    add("fc", "linear", C * cfg.num_classes);
    return r;
}

/// Parameter counts and FLOPs in one report; per-layer rows are the FLOP rows
/// with their parameter counts filled in by name.
template <typename T>
ComplexityReport complexity(const ResNet<T>& model, const std::vector<std::size_t>& input_shape,
                            bool include_running_stats) {
    ComplexityReport params = count_params(model, include_running_stats);
    ComplexityReport r = count_flops(model, input_shape);
    r.includes_running_stats = include_running_stats;
    r.total_params = params.total_params;
    r.trainable_params = params.trainable_params;
    r.running_stats = params.running_stats;
    r.added_by_recalib = params.added_by_recalib;
    for (auto& p : params.layers) {
        auto it = std::find_if(r.layers.begin(), r.layers.end(), [&](const LayerCost& l) { return l.name == p.name; });
        if (it == r.layers.end()) throw std::logic_error("complexity: parameters of '" + p.name + "' have no FLOP row");
        it->params = p.params;
    }
    return r;
}

inline nlohmann::json to_json(const ComplexityReport& r) {
    nlohmann::json layers = nlohmann::json::array();
    for (auto& l : r.layers) layers.push_back({{"name", l.name}, {"kind", l.kind}, {"params", l.params}, {"flops", l.flops}});
    return {{"arch", r.arch},
            {"recalib", r.recalib},
            {"includes_running_stats", r.includes_running_stats},
            {"total_params", r.total_params},
            {"trainable_params", r.trainable_params},
            {"running_stats", r.running_stats},
            {"added_by_recalib", r.added_by_recalib},
            {"flops", r.flops},
            {"recalib_flops", r.recalib_flops},
            {"input_shape", r.input_shape},
            {"layers", layers}};
}

/// Aligned plain-text table of the per-layer rows followed by totals.
inline std::string format_table(const ComplexityReport& r) {
    std::size_t width = 8;
    for (auto& l : r.layers) width = std::max(width, l.name.size());
    std::ostringstream os;
    os << std::left << std::setw(int(width)) << "layer" << "  " << std::setw(8) << "kind" << std::right
       << std::setw(14) << "params" << std::setw(16) << "flops" << "\n";
    os << std::string(width + 40, '-') << "\n";
    for (auto& l : r.layers) {
        os << std::left << std::setw(int(width)) << l.name << "  " << std::setw(8) << l.kind << std::right
           << std::setw(14) << l.params << std::setw(16) << l.flops << "\n";
    }
    os << std::string(width + 40, '-') << "\n";
    auto row = [&](const std::string& k, std::uint64_t v) {
        os << std::left << std::setw(int(width) + 10) << k << std::right << std::setw(30) << v << "\n";
    };
    row("total_params", r.total_params);
    row("trainable_params", r.trainable_params);
    row("added_by_recalib", r.added_by_recalib);
    row("flops", r.flops);
    row("recalib_flops", r.recalib_flops);
    return os.str();
}

}  // namespace srm
