#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "srm/binio.hpp"
#include "srm/data.hpp"
#include "srm/models.hpp"
#include "srm/record.hpp"
#include "srm/train.hpp"

namespace srm {

// ---------------------------------------------------------------------------
// Record capture and storage
// ---------------------------------------------------------------------------

/// Gates of every recalibration layer over a whole dataset, images numbered
/// by their dataset index.
template <typename T>
AnalysisRecord capture_record(ResNet<T>& model, const Dataset& ds, std::size_t batch = 256) {
    const Mode before = model.mode();
    if (before == Mode::train) model.set_mode(Mode::eval);
    AnalysisRecord rec;
    rec.no_recalib = !model.has_recalib();
    for (std::size_t start = 0; start < ds.size(); start += batch) {
        const std::size_t n = std::min(batch, ds.size() - start);
        std::vector<std::size_t> idx(n);
        std::iota(idx.begin(), idx.end(), start);
        auto part = forward_with_capture(model, gather_images<T>(ds, idx), start);
        append_record(rec, part.record);
    }
    if (before == Mode::train) model.set_mode(Mode::train);
    rec.validate();
    return rec;
}

inline constexpr std::uint32_t kRecordVersion = 1;

inline void save_record(const AnalysisRecord& rec, const std::string& path) {
    rec.validate();
    binio::Writer w;
    w.magic("SRMA");
    w.u32(kRecordVersion);
    w.u8(rec.no_recalib ? 1 : 0);
    w.u64(rec.image_ids.size());
    for (auto id : rec.image_ids) w.u64(id);
    w.u32(static_cast<std::uint32_t>(rec.layers.size()));
    for (auto& l : rec.layers) {
        w.u32(static_cast<std::uint32_t>(l.id.stage));
        w.u32(static_cast<std::uint32_t>(l.id.block));
        w.u32(static_cast<std::uint32_t>(l.channels));
        for (double v : l.values) w.f64(v);
    }
    w.save(path);
}

inline AnalysisRecord load_record(const std::string& path) {
    auto r = binio::Reader::from_file(path);
    r.expect_magic("SRMA");
    r.expect_version(kRecordVersion);
    AnalysisRecord rec;
    rec.no_recalib = r.u8() != 0;
    const auto n = r.u64();
    if (n > r.remaining() / 8) r.fail("image count " + std::to_string(n) + " exceeds file size");
    rec.image_ids.resize(n);
    for (auto& id : rec.image_ids) id = r.u64();
    const auto layers = r.u32();
    for (std::uint32_t i = 0; i < layers; ++i) {
        LayerGates l;
        l.id.stage = r.u32();
        l.id.block = r.u32();
        l.channels = r.u32();
        const std::uint64_t count = std::uint64_t(l.channels) * n;
        if (count > r.remaining() / 8) r.fail("layer " + l.id.name() + " exceeds file size");
        l.values.resize(count);
        for (auto& v : l.values) v = r.f64();
        rec.layers.push_back(std::move(l));
    }
    r.expect_end();
    rec.validate();
    return rec;
}

// ---------------------------------------------------------------------------
// Pruning
// ---------------------------------------------------------------------------

/// Indices of the `count` smallest entries of `row`, ties resolved by
/// channel index.
inline std::vector<std::size_t> lowest_channels(std::span<const double> row, std::size_t count) {
    std::vector<std::size_t> order(row.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return row[a] < row[b]; });
    order.resize(std::min(count, order.size()));
    return order;
}

inline std::size_t pruned_count(double ratio, std::size_t channels) {
    return static_cast<std::size_t>(std::floor(ratio * double(channels)));
}

template <typename T>
void require_recalib_stage(const ResNet<T>& model, std::size_t stage) {
    if (stage < 1 || stage > model.num_stages()) {
        throw std::invalid_argument("stage " + std::to_string(stage) + " out of range 1.." +
                                    std::to_string(model.num_stages()));
    }
    for (auto& blk : model.stage(stage)) {
        if (!blk->recalib()) throw std::invalid_argument("stage " + std::to_string(stage) + " has no recalibration");
    }
}

/// Hooks that zero, per image, the floor(ratio·C) lowest-gate channels of
/// every block in `stage`.
template <typename T>
ForwardHooks<T> pruning_hooks(std::size_t stage, double ratio) {
    if (!(ratio >= 0.0 && ratio <= 1.0)) throw std::invalid_argument("pruning ratio must lie in [0,1]");
    ForwardHooks<T> hooks;
    hooks.gate_transform = [stage, ratio](const BlockId& id, const Tensor<T>& g) {
        if (id.stage != stage) return g;
        const std::size_t N = g.dim(0), C = g.dim(1), k = pruned_count(ratio, C);
        if (k == 0) return g;
        std::vector<T> out(g.data().begin(), g.data().end());
        std::vector<double> row(C);
        for (std::size_t n = 0; n < N; ++n) {
            for (std::size_t c = 0; c < C; ++c) row[c] = double(out[n * C + c]);
            for (auto c : lowest_channels(row, k)) out[n * C + c] = T(0);
        }
        return Tensor<T>(g.shape(), std::move(out));
    };
    return hooks;
}

/// Top-1 accuracy with per-image pruning at one stage.
template <typename T>
double prune_eval(ResNet<T>& model, const Dataset& ds, std::size_t stage, double ratio, std::size_t batch = 256) {
    require_recalib_stage(model, stage);
    auto hooks = pruning_hooks<T>(stage, ratio);
    return evaluate(model, ds, batch, &hooks);
}

struct PruneRow {
    double ratio = 0;
    double top1 = 0;
};

template <typename T>
std::vector<PruneRow> prune_curve(ResNet<T>& model, const Dataset& ds, std::size_t stage,
                                  const std::vector<double>& ratios, std::size_t batch = 256) {
    std::vector<PruneRow> rows;
    for (double r : ratios) rows.push_back({r, prune_eval(model, ds, stage, r, batch)});
    return rows;
}

inline std::string prune_csv(const std::vector<PruneRow>& rows) {
    std::ostringstream os;
    os << "ratio,top1\n";
    for (auto& r : rows) os << std::setprecision(10) << r.ratio << ',' << std::setprecision(17) << r.top1 << '\n';
    return os.str();
}

/// Largest |output - input| over the identity-shortcut blocks of `stage`
/// when every channel there is pruned. Projection blocks are skipped since
/// their shortcut is not the identity.
template <typename T>
double full_prune_identity_deviation(ResNet<T>& model, const Tensor<T>& batch, std::size_t stage) {
    require_recalib_stage(model, stage);
    const Mode before = model.mode();
    if (before == Mode::train) model.set_mode(Mode::eval);
    NoGradGuard ng;
    auto hooks = pruning_hooks<T>(stage, 1.0);
    double worst = 0;
    std::size_t checked = 0;
    hooks.on_block = [&](const BlockId& id, const Tensor<T>& in, const Tensor<T>& out) {
        if (id.stage != stage || model.block(id).has_projection()) return;
        ++checked;
        auto a = in.data();
        auto b = out.data();
        for (std::size_t i = 0; i < a.size(); ++i) worst = std::max(worst, std::abs(double(b[i]) - double(a[i])));
    };
    model.forward(batch, &hooks);
    if (before == Mode::train) model.set_mode(Mode::train);
    if (checked == 0) throw std::invalid_argument("stage " + std::to_string(stage) + " has no identity-shortcut block");
    return worst;
}

// ---------------------------------------------------------------------------
// Correlation statistics
// ---------------------------------------------------------------------------

/// Pearson correlation between channel gates across images. Channels whose
/// gate never varies are listed in `constant`; their off-diagonal entries are 0.
struct CorrelationMatrix {
    std::size_t channels = 0;
    std::vector<double> values;
    std::vector<std::size_t> constant;

    double at(std::size_t i, std::size_t j) const { return values[i * channels + j]; }
};

inline CorrelationMatrix correlation_matrix(const LayerGates& layer) {
    const std::size_t N = layer.rows(), C = layer.channels;
    if (N < 2) throw std::invalid_argument("correlation of " + layer.id.name() + " needs at least 2 images");
    std::vector<double> mean(C, 0.0);
    for (std::size_t n = 0; n < N; ++n)
        for (std::size_t c = 0; c < C; ++c) mean[c] += layer.at(n, c);
    for (auto& m : mean) m /= double(N);
    std::vector<double> dev(N * C);
    for (std::size_t n = 0; n < N; ++n)
        for (std::size_t c = 0; c < C; ++c) dev[n * C + c] = layer.at(n, c) - mean[c];

    CorrelationMatrix out;
    out.channels = C;
    out.values.assign(C * C, 0.0);
    std::vector<double> ss(C, 0.0);
    for (std::size_t n = 0; n < N; ++n)
        for (std::size_t c = 0; c < C; ++c) ss[c] += dev[n * C + c] * dev[n * C + c];
    for (std::size_t c = 0; c < C; ++c) {
        if (ss[c] == 0.0) out.constant.push_back(c);
    }
    for (std::size_t i = 0; i < C; ++i) {
        out.values[i * C + i] = 1.0;
        if (ss[i] == 0.0) continue;
        for (std::size_t j = i + 1; j < C; ++j) {
            if (ss[j] == 0.0) continue;
            double s = 0;
            for (std::size_t n = 0; n < N; ++n) s += dev[n * C + i] * dev[n * C + j];
            const double r = std::clamp(s / std::sqrt(ss[i] * ss[j]), -1.0, 1.0);
            out.values[i * C + j] = r;
            out.values[j * C + i] = r;
        }
    }
    return out;
}

inline CorrelationMatrix correlation_matrix(const AnalysisRecord& rec, const BlockId& id) {
    return correlation_matrix(rec.layer(id));
}

inline double sum_squared(const CorrelationMatrix& m) {
    double s = 0;
    for (double v : m.values) s += v * v;
    return s;
}

/// Σ over layers of Σ_ij corr(i,j)².
inline double sum_squared_corr(const AnalysisRecord& rec) {
    if (rec.no_recalib || rec.layers.empty()) throw std::invalid_argument("record holds no recalibration layers");
    double s = 0;
    for (auto& l : rec.layers) s += sum_squared(correlation_matrix(l));
    return s;
}

inline std::string matrix_csv(const CorrelationMatrix& m) {
    std::ostringstream os;
    os << std::setprecision(17);
    for (std::size_t i = 0; i < m.channels; ++i) {
        for (std::size_t j = 0; j < m.channels; ++j) os << (j ? "," : "") << m.at(i, j);
        os << '\n';
    }
    return os.str();
}

// ---------------------------------------------------------------------------
// Top-activated images
// ---------------------------------------------------------------------------

/// Image ids of the k highest gates of one channel, descending, ties broken by
/// the lower row first.
inline std::vector<std::size_t> top_activated(const AnalysisRecord& rec, const BlockId& id, std::size_t channel,
                                              std::size_t k) {
    const auto& l = rec.layer(id);
    if (channel >= l.channels) throw std::out_of_range("channel " + std::to_string(channel) + " out of range");
    if (k > rec.size()) throw std::invalid_argument("k exceeds record size");
    std::vector<std::size_t> rows(rec.size());
    std::iota(rows.begin(), rows.end(), 0);
    std::stable_sort(rows.begin(), rows.end(),
                     [&](std::size_t a, std::size_t b) { return l.at(a, channel) > l.at(b, channel); });
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < k; ++i) out.push_back(rec.image_ids[rows[i]]);
    return out;
}

inline double jaccard(std::vector<std::size_t> a, std::vector<std::size_t> b) {
    std::sort(a.begin(), a.end());
    std::sort(b.begin(), b.end());
    std::vector<std::size_t> common;
    std::set_intersection(a.begin(), a.end(), b.begin(), b.end(), std::back_inserter(common));
    const std::size_t uni = a.size() + b.size() - common.size();
    return uni ? double(common.size()) / double(uni) : 1.0;
}

/// Mean Jaccard similarity of the top-k image sets over all channel pairs of
/// a layer. Lower means channels respond to more diverse images.
inline double top_overlap(const AnalysisRecord& rec, const BlockId& id, std::size_t k) {
    const auto& l = rec.layer(id);
    if (l.channels < 2) throw std::invalid_argument("top_overlap needs at least 2 channels");
    std::vector<std::vector<std::size_t>> sets;
    for (std::size_t c = 0; c < l.channels; ++c) sets.push_back(top_activated(rec, id, c, k));
    double s = 0;
    std::size_t pairs = 0;
    for (std::size_t i = 0; i < sets.size(); ++i) {
        for (std::size_t j = i + 1; j < sets.size(); ++j, ++pairs) s += jaccard(sets[i], sets[j]);
    }
    return s / double(pairs);
}

/// Whole-network summary written by the analyze command.
struct AnalysisSummary {
    double sum_squared_corr = 0;
    double mean_top_overlap = 0;
    std::vector<std::pair<BlockId, double>> per_layer;
    std::vector<std::pair<BlockId, std::vector<std::size_t>>> constant_channels;
};

inline AnalysisSummary summarize(const AnalysisRecord& rec, std::size_t k) {
    AnalysisSummary s;
    double overlap = 0;
    for (auto& l : rec.layers) {
        auto m = correlation_matrix(l);
        const double v = sum_squared(m);
        s.sum_squared_corr += v;
        s.per_layer.push_back({l.id, v});
        if (!m.constant.empty()) s.constant_channels.push_back({l.id, m.constant});
        overlap += top_overlap(rec, l.id, k);
    }
    if (rec.layers.empty()) throw std::invalid_argument("record holds no recalibration layers");
    s.mean_top_overlap = overlap / double(rec.layers.size());
    return s;
}

inline nlohmann::json to_json(const AnalysisSummary& s) {
    nlohmann::json j;
    j["sum_squared_corr"] = s.sum_squared_corr;
    j["mean_top_overlap"] = s.mean_top_overlap;
    for (auto& [id, v] : s.per_layer) j["per_layer"][id.name()] = v;
    for (auto& [id, cs] : s.constant_channels) j["constant_channels"][id.name()] = cs;
    return j;
}

}  // namespace srm
