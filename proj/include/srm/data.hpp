#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "srm/binio.hpp"
#include "srm/tensor.hpp"

namespace srm {

enum class Split { train, test };

inline const char* to_string(Split s) { return s == Split::train ? "train" : "test"; }

/// Raised when a dataset location does not exist or lacks the expected files.
struct DatasetNotFound : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Images stored NCHW as 32-bit floats with integer labels.
struct Dataset {
    std::size_t channels = 3, height = 32, width = 32;
    std::size_t num_classes = 10;
    Split split = Split::train;
    std::vector<float> images;
    std::vector<int> labels;

    std::size_t size() const { return labels.size(); }
    std::size_t image_size() const { return channels * height * width; }
    std::span<const float> image(std::size_t i) const { return {images.data() + i * image_size(), image_size()}; }

    void validate() const {
        if (images.size() != labels.size() * image_size()) {
            throw std::invalid_argument("dataset holds " + std::to_string(images.size()) + " values for " +
                                        std::to_string(labels.size()) + " images of " +
                                        std::to_string(image_size()));
        }
        for (std::size_t i = 0; i < labels.size(); ++i) {
            if (labels[i] < 0 || std::size_t(labels[i]) >= num_classes) {
                throw std::invalid_argument("label " + std::to_string(labels[i]) + " of image " + std::to_string(i) +
                                            " outside [0, " + std::to_string(num_classes) + ")");
            }
        }
    }

    /// First `n` examples (or all if n is 0 or larger than the set).
    Dataset head(std::size_t n) const {
        if (n == 0 || n >= size()) return *this;
        Dataset d = *this;
        d.labels.resize(n);
        d.images.resize(n * image_size());
        return d;
    }
};

// ---- CIFAR-10 ----------------------------------------------------------------

inline constexpr std::size_t kCifarRecordBytes = 3073;
inline constexpr std::size_t kCifarPixels = 3072;
inline constexpr std::array<float, 3> kCifarMean{0.4914f, 0.4822f, 0.4465f};
inline constexpr std::array<float, 3> kCifarStd{0.2470f, 0.2435f, 0.2616f};

/// Appends the records of one CIFAR-10 binary batch. Each record is a label
/// byte followed by 1024 red, 1024 green and 1024 blue bytes.
inline void append_cifar10(Dataset& ds, const std::vector<std::uint8_t>& bytes, const std::string& source,
                           bool normalize = true) {
    if (bytes.size() % kCifarRecordBytes != 0) {
        const std::size_t last = bytes.size() - bytes.size() % kCifarRecordBytes;
        throw binio::FormatError(source + ": truncated record at offset " + std::to_string(last) + " (" +
                                 std::to_string(bytes.size()) + " bytes is not a multiple of 3073)");
    }
    const std::size_t n = bytes.size() / kCifarRecordBytes;
    ds.images.reserve(ds.images.size() + n * kCifarPixels);
    for (std::size_t r = 0; r < n; ++r) {
        const std::size_t off = r * kCifarRecordBytes;
        const int label = bytes[off];
        if (label > 9) {
            throw binio::FormatError(source + ": label byte " + std::to_string(label) + " at offset " +
                                     std::to_string(off));
        }
        ds.labels.push_back(label);
        for (std::size_t i = 0; i < kCifarPixels; ++i) {
            float v = float(bytes[off + 1 + i]) / 255.0f;
            if (normalize) {
                const std::size_t c = i / 1024;
                v = (v - kCifarMean[c]) / kCifarStd[c];
            }
            ds.images.push_back(v);
        }
    }
}

inline std::vector<std::string> cifar10_files(Split split) {
    if (split == Split::test) return {"test_batch.bin"};
    return {"data_batch_1.bin", "data_batch_2.bin", "data_batch_3.bin", "data_batch_4.bin", "data_batch_5.bin"};
}

/// Loads a split from a directory holding the binary batch files (either
/// directly or inside `cifar-10-batches-bin/`).
inline Dataset load_cifar10(const std::string& root, Split split, bool normalize = true) {
    namespace fs = std::filesystem;
    fs::path dir(root);
    if (fs::exists(dir / "cifar-10-batches-bin")) dir /= "cifar-10-batches-bin";
    Dataset ds;
    ds.split = split;
    for (auto& name : cifar10_files(split)) {
        const auto path = dir / name;
        if (!fs::exists(path)) throw DatasetNotFound("CIFAR-10 file '" + path.string() + "' not found");
        append_cifar10(ds, binio::read_file(path.string()), path.string(), normalize);
    }
    return ds;
}

// ---- synthetic style task ----------------------------------------------------

/// Each class k fixes a target spatial mean and standard deviation shared by
/// all channels. Every channel of every image is smoothed noise rescaled so
/// its empirical mean and standard deviation equal the class target plus a
/// per-channel offset drawn uniformly from [-jitter, jitter].
struct SynthStyleSpec {
    std::size_t num_classes = 4;
    std::size_t per_class = 256;
    std::size_t channels = 3, height = 16, width = 16;
    std::vector<double> means{-0.5, 0.5, -0.5, 0.5};
    std::vector<double> stds{0.5, 0.5, 1.5, 1.5};
    double jitter = 0.1;
    std::size_t smooth_radius = 1;
    std::uint64_t seed = 0;

    static SynthStyleSpec two_class(std::size_t per_class = 128, std::uint64_t seed = 0) {
        SynthStyleSpec s;
        s.num_classes = 2;
        s.per_class = per_class;
        s.means = {-1.0, 1.0};
        s.stds = {1.0, 1.0};
        s.seed = seed;
        return s;
    }

    /// Smallest distance between two class targets in the (mean, std) plane.
    double min_target_distance() const {
        double best = INFINITY;
        for (std::size_t i = 0; i < num_classes; ++i)
            for (std::size_t j = i + 1; j < num_classes; ++j)
                best = std::min(best, std::hypot(means[i] - means[j], stds[i] - stds[j]));
        return best;
    }

    /// Largest distance an image's (mean, std) may sit from its class target.
    double noise_scale() const { return jitter * std::sqrt(2.0); }

    void validate() const {
        if (num_classes < 2) throw std::invalid_argument("synthetic task needs at least two classes");
        if (means.size() != num_classes || stds.size() != num_classes) {
            throw std::invalid_argument("synthetic task needs one mean and one std per class");
        }
        if (per_class < 1 || channels < 1 || height * width < 2) {
            throw std::invalid_argument("synthetic task needs images of at least two pixels");
        }
        if (jitter < 0) throw std::invalid_argument("jitter must be non-negative");
        for (double s : stds) {
            if (!(s - jitter > 0)) throw std::invalid_argument("every class std must exceed the jitter");
        }
        const double d = min_target_distance();
        if (!(d > 0) || d < 4.0 * noise_scale()) {
            throw std::invalid_argument("inseparable synthetic spec: closest class targets are " + std::to_string(d) +
                                        " apart, need at least 4 x " + std::to_string(noise_scale()));
        }
    }
};

inline nlohmann::json to_json(const SynthStyleSpec& s) {
    return {{"num_classes", s.num_classes}, {"per_class", s.per_class},
            {"channels", s.channels},       {"height", s.height},
            {"width", s.width},             {"means", s.means},
            {"stds", s.stds},               {"jitter", s.jitter},
            {"smooth_radius", s.smooth_radius}, {"seed", s.seed}};
}

inline SynthStyleSpec synth_spec_from_json(const nlohmann::json& j) {
    SynthStyleSpec s;
    for (auto it = j.begin(); it != j.end(); ++it) {
        const auto& k = it.key();
        if (k == "num_classes") s.num_classes = it->get<std::size_t>();
        else if (k == "per_class") s.per_class = it->get<std::size_t>();
        else if (k == "channels") s.channels = it->get<std::size_t>();
        else if (k == "height") s.height = it->get<std::size_t>();
        else if (k == "width") s.width = it->get<std::size_t>();
        else if (k == "means") s.means = it->get<std::vector<double>>();
        else if (k == "stds") s.stds = it->get<std::vector<double>>();
        else if (k == "jitter") s.jitter = it->get<double>();
        else if (k == "smooth_radius") s.smooth_radius = it->get<std::size_t>();
        else if (k == "seed") s.seed = it->get<std::uint64_t>();
        else throw std::invalid_argument("unknown synthetic spec key '" + k + "'");
    }
    s.validate();
    return s;
}

namespace detail {

inline std::mt19937_64 stream_rng(std::uint64_t seed, std::uint64_t a, std::uint64_t b) {
    std::seed_seq seq{std::uint32_t(seed), std::uint32_t(seed >> 32), std::uint32_t(a), std::uint32_t(a >> 32),
                      std::uint32_t(b), std::uint32_t(b >> 32)};
    return std::mt19937_64(seq);
}

/// Uniform double in [0, 1) from the top 53 bits.
inline double unit(std::mt19937_64& rng) { return double(rng() >> 11) * 0x1.0p-53; }

/// Standard normal via Box-Muller; portable across standard libraries.
inline double gaussian(std::mt19937_64& rng) {
    const double u1 = 1.0 - unit(rng), u2 = unit(rng);
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
}

/// Box filter with wrap-around borders.
inline std::vector<double> box_smooth(const std::vector<double>& z, std::size_t H, std::size_t W, std::size_t r) {
    if (r == 0) return z;
    std::vector<double> out(z.size(), 0.0);
    const long R = long(r);
    for (std::size_t y = 0; y < H; ++y)
        for (std::size_t x = 0; x < W; ++x) {
            double s = 0.0;
            for (long dy = -R; dy <= R; ++dy)
                for (long dx = -R; dx <= R; ++dx) {
                    const std::size_t yy = std::size_t((long(y) + dy + long(H) * (R + 1)) % long(H));
                    const std::size_t xx = std::size_t((long(x) + dx + long(W) * (R + 1)) % long(W));
                    s += z[yy * W + xx];
                }
            out[y * W + x] = s;
        }
    return out;
}

}  // namespace detail

/// Generates the synthetic style dataset. Image i has label i mod K. Train
/// and test splits draw from independent streams of the same seed.
inline Dataset synth_style(const SynthStyleSpec& spec, Split split = Split::train) {
    spec.validate();
    Dataset ds;
    ds.channels = spec.channels;
    ds.height = spec.height;
    ds.width = spec.width;
    ds.num_classes = spec.num_classes;
    ds.split = split;
    const std::size_t N = spec.num_classes * spec.per_class, HW = spec.height * spec.width;
    ds.images.resize(N * spec.channels * HW);
    ds.labels.resize(N);
    for (std::size_t n = 0; n < N; ++n) {
        const std::size_t k = n % spec.num_classes;
        ds.labels[n] = int(k);
        auto rng = detail::stream_rng(spec.seed, split == Split::train ? 0 : 1, n);
        for (std::size_t c = 0; c < spec.channels; ++c) {
            const double mu = spec.means[k] + spec.jitter * (2.0 * detail::unit(rng) - 1.0);
            const double sd = spec.stds[k] + spec.jitter * (2.0 * detail::unit(rng) - 1.0);
            std::vector<double> z(HW);
            for (auto& v : z) v = detail::gaussian(rng);
            z = detail::box_smooth(z, spec.height, spec.width, spec.smooth_radius);
            double m = 0.0;
            for (double v : z) m += v;
            m /= double(HW);
            double var = 0.0;
            for (double v : z) var += (v - m) * (v - m);
            const double s = std::sqrt(var / double(HW));
            float* out = ds.images.data() + (n * spec.channels + c) * HW;
            for (std::size_t i = 0; i < HW; ++i) out[i] = float(mu + sd * (z[i] - m) / s);
        }
    }
    return ds;
}

/// Nearest class target to the per-channel pooled (mean, std) of an image.
inline int nearest_style_class(const Dataset& ds, std::size_t i, const SynthStyleSpec& spec) {
    const std::size_t HW = ds.height * ds.width;
    auto img = ds.image(i);
    std::vector<double> mu(ds.channels), sd(ds.channels);
    for (std::size_t c = 0; c < ds.channels; ++c) {
        double m = 0.0;
        for (std::size_t p = 0; p < HW; ++p) m += img[c * HW + p];
        m /= double(HW);
        double v = 0.0;
        for (std::size_t p = 0; p < HW; ++p) v += (img[c * HW + p] - m) * (img[c * HW + p] - m);
        mu[c] = m;
        sd[c] = std::sqrt(v / double(HW));
    }
    int best = 0;
    double best_d = INFINITY;
    for (std::size_t k = 0; k < spec.num_classes; ++k) {
        double d = 0.0;
        for (std::size_t c = 0; c < ds.channels; ++c) {
            d += (mu[c] - spec.means[k]) * (mu[c] - spec.means[k]) + (sd[c] - spec.stds[k]) * (sd[c] - spec.stds[k]);
        }
        if (d < best_d) {
            best_d = d;
            best = int(k);
        }
    }
    return best;
}

// ---- augmentation -------------------------------------------------------------

enum class AugmentPolicy { none, crop_flip };

inline constexpr std::size_t kCropPad = 4;

/// Window (dy, dx) of the zero-padded image copied into `dst`; (pad, pad) is
/// the original image.
inline void crop_padded(const float* src, float* dst, std::size_t C, std::size_t H, std::size_t W, std::size_t pad,
                        std::size_t dy, std::size_t dx) {
    for (std::size_t c = 0; c < C; ++c)
        for (std::size_t y = 0; y < H; ++y)
            for (std::size_t x = 0; x < W; ++x) {
                const long sy = long(y + dy) - long(pad), sx = long(x + dx) - long(pad);
                const bool inside = sy >= 0 && sx >= 0 && sy < long(H) && sx < long(W);
                dst[(c * H + y) * W + x] = inside ? src[(c * H + std::size_t(sy)) * W + std::size_t(sx)] : 0.0f;
            }
}

inline void hflip(float* img, std::size_t C, std::size_t H, std::size_t W) {
    for (std::size_t c = 0; c < C; ++c)
        for (std::size_t y = 0; y < H; ++y) std::reverse(img + (c * H + y) * W, img + (c * H + y + 1) * W);
}

/// In-place random pad-4 crop and horizontal flip (p = 0.5) of each image in
/// an NCHW buffer.
inline void augment(std::vector<float>& images, std::size_t C, std::size_t H, std::size_t W, AugmentPolicy policy,
                    std::mt19937_64& rng) {
    if (policy == AugmentPolicy::none) return;
    const std::size_t S = C * H * W, N = images.size() / S;
    std::vector<float> tmp(S);
    for (std::size_t n = 0; n < N; ++n) {
        float* img = images.data() + n * S;
        const std::size_t dy = rng() % (2 * kCropPad + 1), dx = rng() % (2 * kCropPad + 1);
        const bool flip = (rng() >> 63) != 0;
        crop_padded(img, tmp.data(), C, H, W, kCropPad, dy, dx);
        std::copy(tmp.begin(), tmp.end(), img);
        if (flip) hflip(img, C, H, W);
    }
}

// ---- batching -------------------------------------------------------------------

/// Fisher-Yates permutation of [0, n) determined by (seed, epoch).
inline std::vector<std::size_t> permutation(std::size_t n, std::uint64_t seed, std::uint64_t epoch) {
    std::vector<std::size_t> p(n);
    for (std::size_t i = 0; i < n; ++i) p[i] = i;
    auto rng = detail::stream_rng(seed, 0x5eed, epoch);
    for (std::size_t i = n; i > 1; --i) std::swap(p[i - 1], p[rng() % i]);
    return p;
}

/// Batch index lists as a pure function of the step: step s takes positions
/// [s·B, (s+1)·B) of the concatenated per-epoch permutations.
class BatchSampler {
public:
    BatchSampler(std::size_t n, std::size_t batch, std::uint64_t seed) : n_(n), batch_(batch), seed_(seed) {
        if (n == 0 || batch == 0) throw std::invalid_argument("batch sampler needs a non-empty set and batch");
    }

    std::vector<std::size_t> indices(std::uint64_t step) {
        std::vector<std::size_t> out;
        out.reserve(batch_);
        for (std::uint64_t pos = step * batch_; out.size() < batch_; ++pos) {
            const std::uint64_t epoch = pos / n_;
            if (epoch != cached_epoch_ || perm_.empty()) {
                perm_ = permutation(n_, seed_, epoch);
                cached_epoch_ = epoch;
            }
            out.push_back(perm_[pos % n_]);
        }
        return out;
    }

    std::size_t batch_size() const { return batch_; }

private:
    std::size_t n_, batch_;
    std::uint64_t seed_;
    std::uint64_t cached_epoch_ = 0;
    std::vector<std::size_t> perm_;
};

template <typename T>
Tensor<T> gather_images(const Dataset& ds, std::span<const std::size_t> idx) {
    const std::size_t S = ds.image_size();
    std::vector<T> v(idx.size() * S);
    for (std::size_t i = 0; i < idx.size(); ++i) {
        auto img = ds.image(idx[i]);
        std::transform(img.begin(), img.end(), v.begin() + std::ptrdiff_t(i * S), [](float x) { return T(x); });
    }
    return Tensor<T>({idx.size(), ds.channels, ds.height, ds.width}, std::move(v));
}

inline std::vector<int> gather_labels(const Dataset& ds, std::span<const std::size_t> idx) {
    std::vector<int> out;
    out.reserve(idx.size());
    for (auto i : idx) out.push_back(ds.labels[i]);
    return out;
}

// ---- container ------------------------------------------------------------------

inline constexpr std::uint32_t kDatasetVersion = 1;

/// Layout: "SRMD", u32 version, u32 classes, u8 split, u64 count, u32 C, H, W,
/// count·C·H·W f32 pixels, count i32 labels. All little-endian.
inline void save_dataset(const Dataset& ds, const std::string& path) {
    ds.validate();
    binio::Writer w;
    w.magic("SRMD");
    w.u32(kDatasetVersion);
    w.u32(std::uint32_t(ds.num_classes));
    w.u8(ds.split == Split::train ? 0 : 1);
    w.u64(ds.size());
    w.u32(std::uint32_t(ds.channels));
    w.u32(std::uint32_t(ds.height));
    w.u32(std::uint32_t(ds.width));
    for (float v : ds.images) w.f32(v);
    for (int l : ds.labels) w.i32(l);
    w.save(path);
}

inline Dataset load_dataset(const std::string& path) {
    if (!std::filesystem::exists(path)) throw DatasetNotFound("dataset file '" + path + "' not found");
    auto r = binio::Reader::from_file(path);
    r.expect_magic("SRMD");
    r.expect_version(kDatasetVersion);
    Dataset ds;
    ds.num_classes = r.u32();
    const auto split = r.u8();
    if (split > 1) r.fail("bad split tag " + std::to_string(split));
    ds.split = split == 0 ? Split::train : Split::test;
    const auto n = r.u64();
    ds.channels = r.u32();
    ds.height = r.u32();
    ds.width = r.u32();
    const std::uint64_t values = n * ds.image_size();
    if (r.remaining() != values * 4 + n * 4) r.fail("payload size does not match header");
    ds.images.resize(values);
    for (auto& v : ds.images) v = r.f32();
    ds.labels.resize(n);
    for (auto& l : ds.labels) l = r.i32();
    ds.validate();
    return ds;
}

}  // namespace srm
