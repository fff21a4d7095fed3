#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <map>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "srm/binio.hpp"
#include "srm/data.hpp"
#include "srm/models.hpp"

namespace srm {

// ---- schedule -------------------------------------------------------------------

struct SchedulePoint {
    std::uint64_t step = 0;
    double lr = 0.1;

    bool operator==(const SchedulePoint&) const = default;
};

/// Piecewise-constant learning rate; a new value takes effect at its own step.
/// Steps before the first point use the first value.
inline double lr_at(const std::vector<SchedulePoint>& schedule, std::uint64_t step) {
    if (schedule.empty()) throw std::invalid_argument("lr_at: empty schedule");
    double lr = schedule.front().lr;
    for (auto& p : schedule) {
        if (p.step > step) break;
        lr = p.lr;
    }
    return lr;
}

/// `base` divided by `factor` at each of the given steps.
inline std::vector<SchedulePoint> step_decay(double base, const std::vector<std::uint64_t>& steps,
                                             double factor = 10.0) {
    std::vector<SchedulePoint> s{{0, base}};
    double lr = base;
    for (auto st : steps) {
        lr /= factor;
        s.push_back({st, lr});
    }
    return s;
}

// ---- configuration ----------------------------------------------------------------

struct TrainConfig {
    double momentum = 0.9;
    double weight_decay = 1e-4;
    std::size_t batch_size = 128;
    std::vector<SchedulePoint> schedule{{0, 0.1}};
    std::uint64_t steps = 1000;
    std::uint64_t seed = 0;
    std::uint64_t log_every = 50;
    AugmentPolicy augment = AugmentPolicy::none;

    void validate() const {
        if (schedule.empty()) throw std::invalid_argument("training schedule is empty");
        for (std::size_t i = 0; i < schedule.size(); ++i) {
            if (!(schedule[i].lr >= 0) || !std::isfinite(schedule[i].lr)) {
                throw std::invalid_argument("learning rates must be finite and non-negative");
            }
            if (i > 0 && schedule[i].step <= schedule[i - 1].step) {
                throw std::invalid_argument("schedule steps must be strictly increasing");
            }
        }
        if (batch_size < 1) throw std::invalid_argument("batch size must be >= 1");
        if (log_every < 1) throw std::invalid_argument("log interval must be >= 1");
        if (!(momentum >= 0 && momentum < 1)) throw std::invalid_argument("momentum must lie in [0, 1)");
        if (!(weight_decay >= 0)) throw std::invalid_argument("weight decay must be non-negative");
    }

    /// 0.2, divided by 10 at 32k and 48k iterations, batch 128.
    static TrainConfig cifar_recipe(std::uint64_t steps = 64'000) {
        TrainConfig c;
        c.schedule = step_decay(0.2, {32'000, 48'000});
        c.steps = steps;
        c.augment = AugmentPolicy::crop_flip;
        return c;
    }

    /// 0.1, divided by 10 every 30 epochs.
    static TrainConfig imagenet_recipe(std::uint64_t steps_per_epoch, std::uint64_t epochs = 100) {
        TrainConfig c;
        c.batch_size = 256;
        std::vector<std::uint64_t> drops;
        for (std::uint64_t e = 30; e < epochs; e += 30) drops.push_back(e * steps_per_epoch);
        c.schedule = step_decay(0.1, drops);
        c.steps = epochs * steps_per_epoch;
        c.augment = AugmentPolicy::crop_flip;
        return c;
    }

    bool operator==(const TrainConfig&) const = default;
};

inline nlohmann::json to_json(const TrainConfig& c) {
    nlohmann::json sched = nlohmann::json::array();
    for (auto& p : c.schedule) sched.push_back({{"step", p.step}, {"lr", p.lr}});
    return {{"momentum", c.momentum},   {"weight_decay", c.weight_decay},
            {"batch_size", c.batch_size}, {"schedule", sched},
            {"steps", c.steps},         {"seed", c.seed},
            {"log_every", c.log_every}, {"augment", c.augment == AugmentPolicy::none ? "none" : "crop_flip"}};
}

inline TrainConfig train_config_from_json(const nlohmann::json& j) {
    TrainConfig c;
    for (auto it = j.begin(); it != j.end(); ++it) {
        const auto& k = it.key();
        if (k == "momentum") c.momentum = it->get<double>();
        else if (k == "weight_decay") c.weight_decay = it->get<double>();
        else if (k == "batch_size") c.batch_size = it->get<std::size_t>();
        else if (k == "steps") c.steps = it->get<std::uint64_t>();
        else if (k == "seed") c.seed = it->get<std::uint64_t>();
        else if (k == "log_every") c.log_every = it->get<std::uint64_t>();
        else if (k == "augment") {
            const auto a = it->get<std::string>();
            if (a == "none") c.augment = AugmentPolicy::none;
            else if (a == "crop_flip") c.augment = AugmentPolicy::crop_flip;
            else throw std::invalid_argument("unknown augmentation '" + a + "'");
        } else if (k == "schedule") {
            c.schedule.clear();
            for (auto& p : *it) c.schedule.push_back({p.at("step").get<std::uint64_t>(), p.at("lr").get<double>()});
        } else {
            throw std::invalid_argument("unknown training key '" + k + "'");
        }
    }
    c.validate();
    return c;
}

/// FNV-1a over a string.
inline std::uint64_t fnv1a(const std::string& s) {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (unsigned char ch : s) {
        h ^= ch;
        h *= 0x100000001b3ull;
    }
    return h;
}

inline std::uint64_t config_hash(const ArchitectureConfig& arch, const TrainConfig& train) {
    return fnv1a(to_json(arch).dump() + "|" + to_json(train).dump());
}

// ---- SGD ------------------------------------------------------------------------

/// g′ = g + wd·p; buf = momentum·buf + g′; p −= lr·buf.
template <typename T>
void sgd_update(std::span<T> param, std::span<const T> grad, std::span<T> buf, double lr, double momentum,
                double weight_decay) {
    if (param.size() != grad.size() || param.size() != buf.size()) {
        throw ShapeError("sgd_update: parameter, gradient and buffer sizes differ");
    }
    const T l = T(lr), m = T(momentum), wd = T(weight_decay);
    for (std::size_t i = 0; i < param.size(); ++i) {
        const T g = grad[i] + wd * param[i];
        buf[i] = m * buf[i] + g;
        param[i] -= l * buf[i];
    }
}

enum class StepStatus { ok, non_finite_grad };

/// Momentum SGD over a fixed, named set of trainable tensors. Weight decay is
/// applied uniformly to every tensor in the set.
template <typename T>
class Sgd {
public:
    Sgd(std::vector<NamedTensor<T>> params, double momentum, double weight_decay)
        : params_(std::move(params)), momentum_(momentum), weight_decay_(weight_decay) {
        for (auto& p : params_) {
            if (!p.trainable) throw std::invalid_argument("Sgd: '" + p.name + "' is not trainable");
            buffers_.emplace_back(p.tensor.numel(), T(0));
        }
    }

    /// Leaves every parameter untouched and reports the first offender if any
    /// gradient is missing or non-finite.
    StepStatus step(double lr) {
        for (auto& p : params_) {
            if (!p.tensor.has_grad()) {
                offender_ = p.name;
                return StepStatus::non_finite_grad;
            }
            for (T g : p.tensor.grad()) {
                if (!std::isfinite(g)) {
                    offender_ = p.name;
                    return StepStatus::non_finite_grad;
                }
            }
        }
        decayed_.clear();
        for (std::size_t i = 0; i < params_.size(); ++i) {
            auto& p = params_[i].tensor;
            sgd_update<T>(p.mutable_data(), p.grad(), buffers_[i], lr, momentum_, weight_decay_);
            decayed_.push_back(params_[i].name);
        }
        return StepStatus::ok;
    }

    void zero_grad() {
        for (auto& p : params_) p.tensor.zero_grad();
    }

    const std::vector<NamedTensor<T>>& params() const { return params_; }
    std::vector<std::vector<T>>& buffers() { return buffers_; }
    const std::vector<std::vector<T>>& buffers() const { return buffers_; }
    /// Names that received weight decay in the last successful step.
    const std::vector<std::string>& decayed() const { return decayed_; }
    const std::string& offender() const { return offender_; }

private:
    std::vector<NamedTensor<T>> params_;
    std::vector<std::vector<T>> buffers_;
    double momentum_, weight_decay_;
    std::vector<std::string> decayed_;
    std::string offender_;
};

template <typename T>
std::vector<NamedTensor<T>> trainable_tensors(const Module<T>& m) {
    std::vector<NamedTensor<T>> out;
    for (auto& nt : m.named_tensors()) {
        if (nt.trainable) out.push_back(nt);
    }
    return out;
}

// ---- checkpoint -------------------------------------------------------------------

struct CheckpointTensor {
    std::string name;
    Shape shape;
    std::vector<double> values;
};

/// Model tensors, optimizer buffers, the step counter and the partial metrics
/// of the current logging interval. `dtype_bytes` is 4 or 8.
struct Checkpoint {
    std::uint8_t dtype_bytes = 4;
    std::uint64_t step = 0;
    std::uint64_t config_hash = 0;
    std::string arch_json;
    std::string train_json;
    std::vector<CheckpointTensor> tensors;
    std::vector<CheckpointTensor> momentum;
    double interval_loss = 0.0;
    std::uint64_t interval_correct = 0, interval_count = 0;
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

inline void write_tensor(binio::Writer& w, const CheckpointTensor& t, std::uint8_t dtype) {
    w.str(t.name);
    w.u32(std::uint32_t(t.shape.size()));
    for (auto d : t.shape) w.u64(d);
    for (double v : t.values) {
        if (dtype == 4) w.f32(float(v));
        else w.f64(v);
    }
}

inline CheckpointTensor read_tensor(binio::Reader& r, std::uint8_t dtype) {
    CheckpointTensor t;
    t.name = r.str();
    const auto rank = r.u32();
    if (rank > 8) r.fail("implausible rank " + std::to_string(rank));
    std::uint64_t n = 1;
    for (std::uint32_t i = 0; i < rank; ++i) {
        t.shape.push_back(r.u64());
        n *= t.shape.back();
    }
    if (n * dtype > r.remaining()) r.fail("tensor '" + t.name + "' exceeds file");
    t.values.resize(n);
    for (auto& v : t.values) v = dtype == 4 ? double(r.f32()) : r.f64();
    return t;
}

}  // namespace detail

/// Layout: "SRMC", u32 version, u8 dtype bytes, u64 step, u64 config hash,
/// architecture JSON, training JSON, f64 interval loss, u64 interval correct,
/// u64 interval count, u32 tensor count, tensors, u32 buffer count, buffers.
/// A tensor is name, u32 rank, u64 dims, then values in the dtype.
inline void save_checkpoint(const Checkpoint& c, const std::string& path) {
    binio::Writer w;
    w.magic("SRMC");
    w.u32(kCheckpointVersion);
    w.u8(c.dtype_bytes);
    w.u64(c.step);
    w.u64(c.config_hash);
    w.str(c.arch_json);
    w.str(c.train_json);
    w.f64(c.interval_loss);
    w.u64(c.interval_correct);
    w.u64(c.interval_count);
    w.u32(std::uint32_t(c.tensors.size()));
    for (auto& t : c.tensors) detail::write_tensor(w, t, c.dtype_bytes);
    w.u32(std::uint32_t(c.momentum.size()));
    for (auto& t : c.momentum) detail::write_tensor(w, t, c.dtype_bytes);
    w.save(path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
    auto r = binio::Reader::from_file(path);
    r.expect_magic("SRMC");
    r.expect_version(kCheckpointVersion);
    Checkpoint c;
    c.dtype_bytes = r.u8();
    if (c.dtype_bytes != 4 && c.dtype_bytes != 8) r.fail("bad dtype tag " + std::to_string(c.dtype_bytes));
    c.step = r.u64();
    c.config_hash = r.u64();
    c.arch_json = r.str();
    c.train_json = r.str();
    c.interval_loss = r.f64();
    c.interval_correct = r.u64();
    c.interval_count = r.u64();
    const auto n = r.u32();
    for (std::uint32_t i = 0; i < n; ++i) c.tensors.push_back(detail::read_tensor(r, c.dtype_bytes));
    const auto m = r.u32();
    for (std::uint32_t i = 0; i < m; ++i) c.momentum.push_back(detail::read_tensor(r, c.dtype_bytes));
    r.expect_end();
    return c;
}

template <typename T>
Checkpoint make_checkpoint(const ResNet<T>& model, const Sgd<T>* opt, std::uint64_t step, std::uint64_t hash) {
    Checkpoint c;
    c.dtype_bytes = sizeof(T);
    c.step = step;
    c.config_hash = hash;
    c.arch_json = to_json(model.config()).dump();
    for (auto& nt : model.named_tensors()) {
        c.tensors.push_back({nt.name, nt.tensor.shape(), {nt.tensor.data().begin(), nt.tensor.data().end()}});
    }
    if (opt) {
        for (std::size_t i = 0; i < opt->params().size(); ++i) {
            c.momentum.push_back(
                {opt->params()[i].name, opt->params()[i].tensor.shape(), {opt->buffers()[i].begin(), opt->buffers()[i].end()}});
        }
    }
    return c;
}

/// Copies checkpoint values into a model of identical layout (and optimizer
/// buffers when both sides carry them).
template <typename T>
void restore_checkpoint(const Checkpoint& c, ResNet<T>& model, Sgd<T>* opt = nullptr) {
    std::map<std::string, const CheckpointTensor*> by_name;
    for (auto& t : c.tensors) by_name[t.name] = &t;
    auto tensors = model.named_tensors();
    if (tensors.size() != c.tensors.size()) {
        throw std::invalid_argument("checkpoint holds " + std::to_string(c.tensors.size()) + " tensors, model has " +
                                    std::to_string(tensors.size()));
    }
    for (auto& nt : tensors) {
        auto it = by_name.find(nt.name);
        if (it == by_name.end()) throw std::invalid_argument("checkpoint lacks tensor '" + nt.name + "'");
        if (it->second->shape != nt.tensor.shape()) {
            throw ShapeError("checkpoint tensor '" + nt.name + "' has shape " + to_string(it->second->shape) +
                             ", model expects " + to_string(nt.tensor.shape()));
        }
        auto d = nt.tensor.mutable_data();
        for (std::size_t i = 0; i < d.size(); ++i) d[i] = T(it->second->values[i]);
    }
    if (opt && !c.momentum.empty()) {
        if (c.momentum.size() != opt->params().size()) throw std::invalid_argument("checkpoint buffer count differs");
        for (std::size_t i = 0; i < c.momentum.size(); ++i) {
            if (c.momentum[i].name != opt->params()[i].name) {
                throw std::invalid_argument("checkpoint buffer '" + c.momentum[i].name + "' out of order");
            }
            auto& b = opt->buffers()[i];
            for (std::size_t k = 0; k < b.size(); ++k) b[k] = T(c.momentum[i].values[k]);
        }
    }
}

/// Rebuilds the model described by a checkpoint and loads its tensors.
template <typename T>
std::unique_ptr<ResNet<T>> model_from_checkpoint(const Checkpoint& c) {
    auto model = build_resnet<T>(architecture_from_json(nlohmann::json::parse(c.arch_json)));
    restore_checkpoint(c, *model);
    return model;
}

// ---- training loop -----------------------------------------------------------------

struct MetricRow {
    std::uint64_t step = 0;
    double lr = 0.0;
    double loss = 0.0;
    double top1 = 0.0;

    bool operator==(const MetricRow&) const = default;
};

inline std::string metrics_csv(const std::vector<MetricRow>& rows) {
    std::ostringstream os;
    os << "step,lr,loss,top1\n";
    os.precision(17);
    for (auto& r : rows) os << r.step << "," << r.lr << "," << r.loss << "," << r.top1 << "\n";
    return os.str();
}

/// Top-1 accuracy over a dataset in eval (or folded) mode. The model's mode
/// is restored afterwards.
template <typename T>
double evaluate(ResNet<T>& model, const Dataset& ds, std::size_t batch = 256, const ForwardHooks<T>* hooks = nullptr) {
    if (ds.size() == 0) throw std::invalid_argument("evaluate: empty dataset");
    const Mode before = model.mode();
    if (before == Mode::train) model.set_mode(Mode::eval);
    NoGradGuard ng;
    std::size_t correct = 0;
    for (std::size_t start = 0; start < ds.size(); start += batch) {
        const std::size_t n = std::min(batch, ds.size() - start);
        std::vector<std::size_t> idx(n);
        for (std::size_t i = 0; i < n; ++i) idx[i] = start + i;
        auto logits = model.forward(gather_images<T>(ds, idx), hooks);
        const std::size_t K = logits.dim(1);
        for (std::size_t i = 0; i < n; ++i) {
            auto row = logits.data().subspan(i * K, K);
            const auto arg = std::size_t(std::max_element(row.begin(), row.end()) - row.begin());
            correct += int(arg) == ds.labels[start + i];
        }
    }
    if (before == Mode::train) model.set_mode(Mode::train);
    return double(correct) / double(ds.size());
}

struct TrainResult {
    std::vector<MetricRow> history;
    bool diverged = false;
    std::string message;
};

/// Deterministic SGD trainer. Batch selection and augmentation for step s are
/// functions of (seed, s) only, so a run restored from a checkpoint continues
/// exactly as the uninterrupted run would.
template <typename T>
class Trainer {
public:
    Trainer(ResNet<T>& model, const Dataset& train, TrainConfig cfg)
        : model_(model),
          data_(train),
          cfg_(std::move(cfg)),
          sampler_(train.size(), cfg_.batch_size, cfg_.seed),
          opt_(trainable_tensors(model), cfg_.momentum, cfg_.weight_decay) {
        cfg_.validate();
        train.validate();
        if (train.num_classes > model.config().num_classes) {
            throw std::invalid_argument("dataset has more classes than the classifier");
        }
    }

    /// Runs until `cfg.steps` (or `until` if smaller and non-zero). The
    /// callback, if given, runs after every completed step and may stop the
    /// run by returning false.
    TrainResult run(std::uint64_t until = 0, const std::function<bool(std::uint64_t)>& after_step = {}) {
        TrainResult res;
        const std::uint64_t last = until ? std::min(until, cfg_.steps) : cfg_.steps;
        while (step_ < last) {
            if (!train_step(res)) return res;
            if (after_step && !after_step(step_)) break;
        }
        return res;
    }

    std::uint64_t step() const { return step_; }
    const std::vector<MetricRow>& history() const { return history_; }
    Sgd<T>& optimizer() { return opt_; }
    const TrainConfig& config() const { return cfg_; }

    Checkpoint checkpoint() const {
        Checkpoint c = make_checkpoint(model_, &opt_, step_, config_hash(model_.config(), cfg_));
        c.train_json = to_json(cfg_).dump();
        c.interval_loss = interval_loss_;
        c.interval_correct = interval_correct_;
        c.interval_count = interval_count_;
        return c;
    }

    void restore(const Checkpoint& c) {
        if (c.config_hash != config_hash(model_.config(), cfg_)) {
            throw std::invalid_argument("checkpoint was written for a different configuration");
        }
        restore_checkpoint(c, model_, &opt_);
        step_ = c.step;
        interval_loss_ = c.interval_loss;
        interval_correct_ = c.interval_correct;
        interval_count_ = c.interval_count;
    }

private:
    bool train_step(TrainResult& res) {
        model_.set_mode(Mode::train);
        auto idx = sampler_.indices(step_);
        auto labels = gather_labels(data_, idx);
        Tensor<T> x = gather_images<T>(data_, idx);
        if (cfg_.augment != AugmentPolicy::none) {
            std::vector<float> buf(x.data().begin(), x.data().end());
            auto rng = detail::stream_rng(cfg_.seed, 0xa0a0, step_);
            augment(buf, data_.channels, data_.height, data_.width, cfg_.augment, rng);
            x = Tensor<T>(x.shape(), std::vector<T>(buf.begin(), buf.end()));
        }
        auto stats = running_stats();
        opt_.zero_grad();
        auto logits = model_.forward(x);
        auto loss = softmax_cross_entropy(logits, labels);
        const double l = double(loss.item());
        StepStatus status = StepStatus::ok;
        if (std::isfinite(l)) {
            backward(loss);
            status = opt_.step(lr_at(cfg_.schedule, step_));
        }
        if (!std::isfinite(l) || status != StepStatus::ok) {
            restore_running_stats(stats);
            res.diverged = true;
            res.message = std::isfinite(l) ? "non-finite gradient in '" + opt_.offender() + "' at step " +
                                                 std::to_string(step_)
                                           : "non-finite loss at step " + std::to_string(step_);
            return false;
        }
        const std::size_t K = logits.dim(1);
        for (std::size_t i = 0; i < labels.size(); ++i) {
            auto row = logits.data().subspan(i * K, K);
            interval_correct_ += int(std::max_element(row.begin(), row.end()) - row.begin()) == labels[i];
        }
        interval_loss_ += l;
        interval_count_ += 1;
        ++step_;
        if (step_ % cfg_.log_every == 0 || step_ == cfg_.steps) {
            MetricRow row{step_, lr_at(cfg_.schedule, step_ - 1), interval_loss_ / double(interval_count_),
                          double(interval_correct_) / double(interval_count_ * labels.size())};
            history_.push_back(row);
            res.history.push_back(row);
            interval_loss_ = 0.0;
            interval_correct_ = interval_count_ = 0;
        }
        return true;
    }

    std::vector<std::vector<T>> running_stats() const {
        std::vector<std::vector<T>> out;
        for (auto& nt : model_.named_tensors()) {
            if (!nt.trainable) out.emplace_back(nt.tensor.data().begin(), nt.tensor.data().end());
        }
        return out;
    }

    void restore_running_stats(const std::vector<std::vector<T>>& saved) {
        std::size_t i = 0;
        for (auto& nt : model_.named_tensors()) {
            if (nt.trainable) continue;
            auto d = nt.tensor.mutable_data();
            std::copy(saved[i].begin(), saved[i].end(), d.begin());
            ++i;
        }
    }

    ResNet<T>& model_;
    const Dataset& data_;
    TrainConfig cfg_;
    BatchSampler sampler_;
    Sgd<T> opt_;
    std::uint64_t step_ = 0;
    std::vector<MetricRow> history_;
    double interval_loss_ = 0.0;
    std::uint64_t interval_correct_ = 0, interval_count_ = 0;
};

}  // namespace srm
