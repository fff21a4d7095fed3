#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

namespace srm {

/// Position of a residual block: stage counted from 1, block from 0.
struct BlockId {
    std::size_t stage = 1;
    std::size_t block = 0;

    std::string name() const { return "stage" + std::to_string(stage) + ".block" + std::to_string(block); }
    auto operator<=>(const BlockId&) const = default;
};

/// Per-image gate vectors of one recalibration layer, rows = images.
struct LayerGates {
    BlockId id;
    std::size_t channels = 0;
    std::vector<double> values;

    std::size_t rows() const { return channels ? values.size() / channels : 0; }
    double at(std::size_t image, std::size_t channel) const { return values[image * channels + channel]; }
};

/// Gates captured over an evaluation set. `no_recalib` is set when the model
/// has no recalibration layers, in which case `layers` stays empty.
struct AnalysisRecord {
    std::vector<std::size_t> image_ids;
    std::vector<LayerGates> layers;
    bool no_recalib = false;

    std::size_t size() const { return image_ids.size(); }

    const LayerGates& layer(const BlockId& id) const {
        for (auto& l : layers) {
            if (l.id == id) return l;
        }
        throw std::out_of_range("analysis record has no layer " + id.name());
    }

    LayerGates& layer_or_add(const BlockId& id, std::size_t channels) {
        for (auto& l : layers) {
            if (l.id == id) {
                if (l.channels != channels) throw std::invalid_argument("channel count changed for " + id.name());
                return l;
            }
        }
        layers.push_back({id, channels, {}});
        return layers.back();
    }

    /// Throws unless every layer holds one row per image and all gates lie in
    /// [0,1] (a saturated sigmoid may round to an endpoint in float).
    void validate() const {
        for (auto& l : layers) {
            if (l.rows() != image_ids.size() || l.values.size() != l.rows() * l.channels) {
                throw std::invalid_argument("layer " + l.id.name() + " holds " + std::to_string(l.rows()) +
                                            " rows for " + std::to_string(image_ids.size()) + " images");
            }
            for (double g : l.values) {
                if (!(g >= 0.0 && g <= 1.0)) throw std::invalid_argument("gate outside [0,1] in " + l.id.name());
            }
        }
    }
};

}  // namespace srm
