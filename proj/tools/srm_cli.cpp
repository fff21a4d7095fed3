#include <CLI11.hpp>
#include <Eigen/Core>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <nlohmann/json.hpp>
#include <sstream>

#include "srm/analysis.hpp"
#include "srm/complexity.hpp"
#include "srm/gradsuite.hpp"
#include "srm/train.hpp"

#ifndef SRM_VERSION
#define SRM_VERSION "unknown"
#endif

namespace fs = std::filesystem;
using nlohmann::json;
using namespace srm;

namespace {

/// Bad flags, unreadable configs or a missing dataset; exits with 2.
struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct Options {
    std::string arch = "resnet20";
    std::string recalib;
    std::string data;
    std::string out;
    std::string config;
    std::string ckpt;
    std::string resume;
    std::string precision = "f32";
    std::string augment;
    std::string split = "test";
    std::string ratios = "0,0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9,1.0";
    std::string input = "3,224,224";
    std::optional<std::uint64_t> seed;
    std::optional<std::uint64_t> steps;
    std::optional<double> epochs;
    std::optional<double> lr;
    std::optional<std::size_t> batch;
    std::optional<std::uint64_t> log_every;
    std::size_t threads = 0;
    std::size_t limit = 0;
    std::size_t test_limit = 0;
    std::size_t stage = 1;
    std::size_t top_k = 5;
    std::size_t seeds = 1;
    std::uint64_t eval_every = 0;
    std::uint64_t ckpt_every = 0;
    std::size_t per_class = 0;
    bool running_stats = false;
    bool table = false;
};

json read_json_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw UsageError("cannot read '" + path + "'");
    try {
        return json::parse(f);
    } catch (const json::exception& e) {
        throw UsageError("malformed JSON in '" + path + "': " + e.what());
    }
}

ArchitectureConfig resolve_arch(const Options& o) {
    ArchitectureConfig cfg;
    try {
        if (fs::exists(o.arch) || o.arch.ends_with(".json")) {
            cfg = architecture_from_json(read_json_file(o.arch));
        } else {
            cfg = ArchitectureConfig::preset(o.arch);
        }
        if (!o.recalib.empty()) cfg = cfg.with_recalib(parse_recalib(o.recalib));
    } catch (const UsageError&) {
        throw;
    } catch (const std::exception& e) {
        throw UsageError(std::string("architecture: ") + e.what());
    }
    return cfg;
}

struct DataPair {
    Dataset train, test;
    json info;
};

DataPair load_data(const Options& o) {
    std::string root = o.data;
    if (root.empty()) {
        if (const char* env = std::getenv("STYLE_RECAL_DATA")) root = env;
    }
    if (root.empty()) throw UsageError("no dataset: pass --data or set STYLE_RECAL_DATA");
    DataPair d;
    try {
        if (fs::exists(fs::path(root) / "train.bin")) {
            d.train = load_dataset((fs::path(root) / "train.bin").string());
            d.test = load_dataset((fs::path(root) / "test.bin").string());
            d.info["kind"] = "synthetic";
        } else {
            d.train = load_cifar10(root, Split::train);
            d.test = load_cifar10(root, Split::test);
            d.info["kind"] = "cifar10";
        }
    } catch (const DatasetNotFound& e) {
        throw UsageError(e.what());
    }
    d.train = d.train.head(o.limit);
    d.test = d.test.head(o.test_limit);
    d.info["root"] = root;
    d.info["train_size"] = d.train.size();
    d.info["test_size"] = d.test.size();
    return d;
}

const Dataset& pick_split(const DataPair& d, const std::string& split) {
    if (split == "train") return d.train;
    if (split == "test") return d.test;
    throw UsageError("--split must be train or test");
}

fs::path require_out(const Options& o) {
    if (o.out.empty()) throw UsageError("--out is required");
    fs::create_directories(o.out);
    return fs::path(o.out);
}

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("cannot write '" + path.string() + "'");
    f << text;
}

void write_manifest(const fs::path& dir, const std::string& command, json body) {
    body["command"] = command;
    body["version"] = SRM_VERSION;
    write_text(dir / "manifest.json", body.dump(2) + "\n");
}

TrainConfig resolve_train(const Options& o, std::size_t train_size) {
    TrainConfig c;
    try {
        if (!o.config.empty()) c = train_config_from_json(read_json_file(o.config));
    } catch (const UsageError&) {
        throw;
    } catch (const std::exception& e) {
        throw UsageError(std::string("training config: ") + e.what());
    }
    if (o.seed) c.seed = *o.seed;
    if (o.batch) c.batch_size = *o.batch;
    if (o.log_every) c.log_every = *o.log_every;
    if (o.steps) c.steps = *o.steps;
    if (o.epochs) {
        c.steps = static_cast<std::uint64_t>(std::ceil(*o.epochs * double(train_size) / double(c.batch_size)));
    }
    if (o.lr) {
        // Rescale the whole schedule so its first entry becomes --lr.
        const double base = c.schedule.front().lr;
        for (auto& p : c.schedule) p.lr = base > 0 ? p.lr * (*o.lr / base) : *o.lr;
    }
    if (!o.augment.empty()) {
        if (o.augment == "none") c.augment = AugmentPolicy::none;
        else if (o.augment == "crop_flip") c.augment = AugmentPolicy::crop_flip;
        else throw UsageError("--augment must be none or crop_flip");
    }
    try {
        c.validate();
    } catch (const std::exception& e) {
        throw UsageError(std::string("training config: ") + e.what());
    }
    return c;
}

std::string merge_metrics(const fs::path& path, std::uint64_t resumed_at, const std::string& fresh) {
    std::ifstream f(path);
    if (!f) return fresh;
    std::ostringstream os;
    std::string line;
    std::getline(f, line);
    os << line << '\n';
    while (std::getline(f, line)) {
        if (std::stoull(line.substr(0, line.find(','))) <= resumed_at) os << line << '\n';
    }
    os << fresh.substr(fresh.find('\n') + 1);
    return os.str();
}

template <typename T>
int run_train(const Options& o) {
    const auto arch = resolve_arch(o);
    auto data = load_data(o);
    const auto cfg = resolve_train(o, data.train.size());
    std::optional<Checkpoint> resume;
    if (!o.resume.empty()) {
        if (!fs::exists(o.resume)) throw UsageError("checkpoint '" + o.resume + "' not found");
        resume = load_checkpoint(o.resume);
    }
    const auto out = require_out(o);
    Rng rng(cfg.seed);
    ResNet<T> model(arch, &rng);
    Trainer<T> trainer(model, data.train, cfg);
    std::uint64_t resumed_at = 0;
    if (resume) {
        trainer.restore(*resume);
        resumed_at = trainer.step();
    }
    write_manifest(out, "train",
                   {{"arch", to_json(arch)},
                    {"train", to_json(cfg)},
                    {"seed", cfg.seed},
                    {"precision", o.precision},
                    {"data", data.info},
                    {"resume", o.resume},
                    {"eval_every", o.eval_every}});

    std::ostringstream eval_csv;
    eval_csv << "step,top1\n" << std::setprecision(17);
    auto result = trainer.run(0, [&](std::uint64_t step) {
        if (o.eval_every && step % o.eval_every == 0) {
            eval_csv << step << ',' << evaluate(model, data.test) << '\n';
        }
        if (o.ckpt_every && step % o.ckpt_every == 0) {
            save_checkpoint(trainer.checkpoint(), (out / ("checkpoint_" + std::to_string(step) + ".bin")).string());
        }
        return true;
    });
    auto csv = metrics_csv(trainer.history());
    if (resumed_at) csv = merge_metrics(out / "metrics.csv", resumed_at, csv);
    write_text(out / "metrics.csv", csv);
    if (o.eval_every) write_text(out / "eval.csv", eval_csv.str());
    save_checkpoint(trainer.checkpoint(), (out / "checkpoint.bin").string());
    if (result.diverged) {
        std::cerr << "error: " << result.message << "\n";
        return 1;
    }
    const double top1 = evaluate(model, data.test);
    json summary{{"step", trainer.step()}, {"test_top1", top1}};
    write_text(out / "eval.json", summary.dump(2) + "\n");
    std::cout << summary.dump() << "\n";
    return 0;
}

Checkpoint load_ckpt(const Options& o) {
    if (o.ckpt.empty()) throw UsageError("--ckpt is required");
    if (!fs::exists(o.ckpt)) throw UsageError("checkpoint '" + o.ckpt + "' not found");
    return load_checkpoint(o.ckpt);
}

template <typename T>
int run_eval(const Options& o, const Checkpoint& c) {
    auto model = model_from_checkpoint<T>(c);
    auto data = load_data(o);
    const double top1 = evaluate(*model, pick_split(data, o.split));
    json summary{{"split", o.split}, {"top1", top1}, {"step", c.step}};
    if (!o.out.empty()) {
        const auto out = require_out(o);
        write_manifest(out, "eval", {{"ckpt", o.ckpt}, {"data", data.info}, {"arch", json::parse(c.arch_json)}});
        write_text(out / "eval.json", summary.dump(2) + "\n");
    }
    std::cout << summary.dump() << "\n";
    return 0;
}

std::vector<double> parse_ratios(const std::string& text) {
    std::vector<double> r;
    std::stringstream ss(text);
    std::string tok;
    while (std::getline(ss, tok, ',')) {
        try {
            std::size_t used = 0;
            r.push_back(std::stod(tok, &used));
            if (used != tok.size()) throw std::invalid_argument(tok);
        } catch (const std::exception&) {
            throw UsageError("bad ratio '" + tok + "'");
        }
    }
    if (r.empty()) throw UsageError("--ratios is empty");
    return r;
}

template <typename T>
int run_prune(const Options& o, const Checkpoint& c) {
    const auto ratios = parse_ratios(o.ratios);
    auto model = model_from_checkpoint<T>(c);
    auto data = load_data(o);
    const auto& ds = pick_split(data, o.split);
    try {
        require_recalib_stage(*model, o.stage);
        for (double r : ratios) pruning_hooks<T>(o.stage, r);
    } catch (const std::invalid_argument& e) {
        throw UsageError(e.what());
    }
    const auto out = require_out(o);
    write_manifest(out, "prune",
                   {{"ckpt", o.ckpt}, {"stage", o.stage}, {"ratios", ratios}, {"split", o.split}, {"data", data.info}});
    const auto csv = prune_csv(prune_curve(*model, ds, o.stage, ratios));
    write_text(out / ("prune_stage" + std::to_string(o.stage) + ".csv"), csv);
    std::cout << csv;
    return 0;
}

template <typename T>
int run_analyze(const Options& o, const Checkpoint& c) {
    auto model = model_from_checkpoint<T>(c);
    if (!model->has_recalib()) throw UsageError("model has no recalibration layers to analyze");
    auto data = load_data(o);
    const auto& ds = pick_split(data, o.split);
    if (o.top_k > ds.size()) throw UsageError("--top-k exceeds the evaluation set");
    const auto rec = capture_record(*model, ds);
    const auto out = require_out(o);
    save_record(rec, (out / "record.bin").string());
    fs::create_directories(out / "corr");
    std::ostringstream top;
    top << "layer,channel,rank,image\n";
    for (auto& l : rec.layers) {
        const auto m = correlation_matrix(l);
        if (!m.constant.empty()) {
            std::cerr << "warning: " << l.id.name() << " has " << m.constant.size()
                      << " constant-gate channels, correlations set to 0\n";
        }
        write_text(out / "corr" / (l.id.name() + ".csv"), matrix_csv(m));
        for (std::size_t ch = 0; ch < l.channels; ++ch) {
            const auto ids = top_activated(rec, l.id, ch, o.top_k);
            for (std::size_t r = 0; r < ids.size(); ++r)
                top << l.id.name() << ',' << ch << ',' << r << ',' << ids[r] << '\n';
        }
    }
    write_text(out / "top_activated.csv", top.str());
    auto summary = to_json(summarize(rec, o.top_k));
    summary["images"] = rec.size();
    summary["top_k"] = o.top_k;
    write_text(out / "summary.json", summary.dump(2) + "\n");
    write_manifest(out, "analyze", {{"ckpt", o.ckpt}, {"split", o.split}, {"data", data.info}, {"top_k", o.top_k}});
    std::cout << json{{"sum_squared_corr", summary["sum_squared_corr"]},
                      {"mean_top_overlap", summary["mean_top_overlap"]}}
                     .dump()
              << "\n";
    return 0;
}

template <typename F>
int with_checkpoint_precision(const Options& o, F&& f) {
    const auto c = load_ckpt(o);
    return c.dtype_bytes == 8 ? f(double{}, c) : f(float{}, c);
}

int run_complexity(const Options& o) {
    const auto arch = resolve_arch(o);
    std::vector<std::size_t> shape;
    {
        std::stringstream ss(o.input);
        std::string tok;
        while (std::getline(ss, tok, ',')) {
            try {
                shape.push_back(std::stoul(tok));
            } catch (const std::exception&) {
                throw UsageError("bad --input '" + o.input + "'");
            }
        }
        if (shape.size() != 3) throw UsageError("--input must be C,H,W");
    }
    // Zero-initialised weights: only shapes matter for counting.
    ResNet<float> model(arch);
    const auto report = complexity(model, shape, o.running_stats);
    const auto j = to_json(report);
    if (!o.out.empty()) {
        const auto out = require_out(o);
        write_manifest(out, "complexity", {{"arch", to_json(arch)}, {"input", shape}});
        write_text(out / "complexity.json", j.dump(2) + "\n");
    }
    std::cout << (o.table ? format_table(report) : j.dump(2) + "\n");
    return 0;
}

int run_gradcheck(const Options& o) {
    const std::uint64_t first = o.seed.value_or(0);
    double worst = 0;
    for (std::uint64_t s = first; s < first + o.seeds; ++s) {
        for (auto& c : gradient_suite(s)) {
            const double e = c.result.finite ? c.result.max_rel_error : INFINITY;
            worst = std::max(worst, e);
            std::cout << "seed " << s << "  " << std::left << std::setw(30) << c.name << std::scientific
                      << std::setprecision(3) << e << (c.result.passed(1e-4) ? "" : "  FAIL") << std::defaultfloat
                      << "\n";
        }
    }
    std::cout << "max relative error " << std::scientific << worst << "\n";
    return worst < 1e-4 ? 0 : 1;
}

int run_synth(const Options& o) {
    SynthStyleSpec spec;
    try {
        if (!o.config.empty()) spec = synth_spec_from_json(read_json_file(o.config));
        if (o.seed) spec.seed = *o.seed;
        if (o.per_class) spec.per_class = o.per_class;
        spec.validate();
    } catch (const UsageError&) {
        throw;
    } catch (const std::exception& e) {
        throw UsageError(std::string("synthetic spec: ") + e.what());
    }
    const auto out = require_out(o);
    save_dataset(synth_style(spec, Split::train), (out / "train.bin").string());
    save_dataset(synth_style(spec, Split::test), (out / "test.bin").string());
    write_manifest(out, "synth", {{"spec", to_json(spec)}, {"seed", spec.seed}});
    std::cout << "wrote " << (out / "train.bin").string() << " and " << (out / "test.bin").string() << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Style-based recalibration experiments"};
    app.require_subcommand(1);
    Options o;

    auto add_arch = [&](CLI::App* c) {
        c->add_option("--arch", o.arch, "preset name or architecture JSON file");
        c->add_option("--recalib", o.recalib, "none | srm | se[:r=N] | <pools>:<cfc|mlp>[+bn][:r=N]");
    };
    auto add_data = [&](CLI::App* c) {
        c->add_option("--data", o.data, "dataset directory (default: $STYLE_RECAL_DATA)");
        c->add_option("--limit", o.limit, "use only the first N training images");
        c->add_option("--test-limit", o.test_limit, "use only the first N test images");
    };
    auto add_threads = [&](CLI::App* c) { c->add_option("--threads", o.threads, "GEMM threads (0: default)"); };

    auto* train = app.add_subcommand("train", "train a model");
    add_arch(train);
    add_data(train);
    add_threads(train);
    train->add_option("--out", o.out, "output directory")->required();
    train->add_option("--config", o.config, "training config JSON");
    train->add_option("--seed", o.seed);
    auto* steps = train->add_option("--steps", o.steps);
    train->add_option("--epochs", o.epochs)->excludes(steps);
    train->add_option("--lr", o.lr, "first learning rate; later schedule entries scale with it");
    train->add_option("--batch", o.batch);
    train->add_option("--log-every", o.log_every);
    train->add_option("--augment", o.augment, "none | crop_flip");
    train->add_option("--eval-every", o.eval_every, "test accuracy every N steps into eval.csv");
    train->add_option("--ckpt-every", o.ckpt_every, "extra checkpoint every N steps");
    train->add_option("--resume", o.resume, "continue from a checkpoint");
    train->add_option("--precision", o.precision)->check(CLI::IsMember({"f32", "f64"}));

    auto* eval = app.add_subcommand("eval", "top-1 accuracy of a checkpoint");
    add_data(eval);
    add_threads(eval);
    eval->add_option("--ckpt", o.ckpt)->required();
    eval->add_option("--split", o.split, "train | test");
    eval->add_option("--out", o.out);

    auto* prune = app.add_subcommand("prune", "per-image channel pruning curve");
    add_data(prune);
    add_threads(prune);
    prune->add_option("--ckpt", o.ckpt)->required();
    prune->add_option("--stage", o.stage, "stage to prune, counted from 1");
    prune->add_option("--ratios", o.ratios, "comma-separated ratios in [0,1]");
    prune->add_option("--split", o.split);
    prune->add_option("--out", o.out)->required();

    auto* analyze = app.add_subcommand("analyze", "gate correlations and top-activated images");
    add_data(analyze);
    add_threads(analyze);
    analyze->add_option("--ckpt", o.ckpt)->required();
    analyze->add_option("--split", o.split);
    analyze->add_option("--top-k", o.top_k);
    analyze->add_option("--out", o.out)->required();

    auto* comp = app.add_subcommand("complexity", "parameter and FLOP report");
    add_arch(comp);
    comp->add_option("--input", o.input, "C,H,W");
    comp->add_flag("--running-stats", o.running_stats, "count BN running statistics as parameters");
    comp->add_flag("--table", o.table, "print a table instead of JSON");
    comp->add_option("--out", o.out);

    auto* grad = app.add_subcommand("gradcheck", "finite-difference gradient suite in double precision");
    grad->add_option("--seed", o.seed);
    grad->add_option("--seeds", o.seeds, "number of consecutive seeds")->check(CLI::PositiveNumber);

    auto* synth = app.add_subcommand("synth", "generate the synthetic style dataset");
    synth->add_option("--out", o.out)->required();
    synth->add_option("--config", o.config, "synthetic spec JSON");
    synth->add_option("--seed", o.seed);
    synth->add_option("--per-class", o.per_class);

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }

    try {
        if (o.threads) Eigen::setNbThreads(int(o.threads));
        if (*train) return o.precision == "f64" ? run_train<double>(o) : run_train<float>(o);
        auto dispatch = [&](auto run) {
            return with_checkpoint_precision(o, [&](auto tag, const Checkpoint& c) { return run(tag, c); });
        };
        if (*eval) {
            return dispatch([&](auto tag, const Checkpoint& c) { return run_eval<decltype(tag)>(o, c); });
        }
        if (*prune) {
            return dispatch([&](auto tag, const Checkpoint& c) { return run_prune<decltype(tag)>(o, c); });
        }
        if (*analyze) {
            return dispatch([&](auto tag, const Checkpoint& c) { return run_analyze<decltype(tag)>(o, c); });
        }
        if (*comp) return run_complexity(o);
        if (*grad) return run_gradcheck(o);
        if (*synth) return run_synth(o);
    } catch (const UsageError& e) {
        std::cerr << "usage error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 2;
}
