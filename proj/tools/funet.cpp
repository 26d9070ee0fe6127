// funet command-line tool: synth, train, eval, infer, gradcheck, bench.
//
// Exit codes: 0 ok, 1 unexpected error, 2 usage, 3 I/O, 4 numeric failure,
// 5 checkpoint mismatch, 6 gradcheck failure.

#include <omp.h>

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <regex>

#include "CLI11.hpp"
#include "funet/checkpoint.hpp"
#include "funet/data_io.hpp"
#include "funet/gradcheck_suite.hpp"
#include "funet/metrics.hpp"
#include "funet/ops.hpp"
#include "funet/run_config.hpp"
#include "funet/training.hpp"

namespace fs = std::filesystem;
using namespace funet;

namespace {

enum Exit { kOk = 0, kUnexpected = 1, kUsage = 2, kIo = 3, kNumeric = 4, kCheckpoint = 5, kGradcheck = 6 };

struct UsageError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

std::pair<int, int> parse_size(const std::string& text)
{
    static const std::regex re(R"((\d+)x(\d+))");
    std::smatch m;
    if (!std::regex_match(text, m, re)) throw UsageError("--size must look like HxW, got '" + text + "'");
    const int h = std::stoi(m[1]), w = std::stoi(m[2]);
    if (h < 1 || w < 1) throw UsageError("--size must be positive, got " + text);
    return {h, w};
}

void apply_runtime(const RunConfig& rc)
{
    set_deterministic_mode(rc.deterministic);
    if (rc.threads > 0) omp_set_num_threads(rc.threads);
}

std::vector<Split> parse_splits(const std::string& text)
{
    if (text == "val+test") return {Split::Val, Split::Test};
    try {
        return {parse_split(text)};
    } catch (const std::invalid_argument&) {
        throw UsageError("--split must be train, val, test or val+test");
    }
}

// ---------------------------------------------------------------------------------------------

struct SynthArgs {
    std::string out, size = "64x112";
    int sequences = 40, frames = 10, ellipses = 1;
    double noise = 0.06;
    std::uint64_t seed = 0;
};

int cmd_synth(const SynthArgs& a)
{
    SyntheticVideoSpec spec;
    std::tie(spec.height, spec.width) = parse_size(a.size);
    spec.sequences = a.sequences;
    spec.frames_per_sequence = a.frames;
    spec.ellipses = a.ellipses;
    spec.noise = a.noise;
    spec.seed = a.seed;
    try {
        spec.validate();
    } catch (const std::invalid_argument& e) {
        throw UsageError(e.what());
    }
    synth_generate(spec, a.out);
    std::cout << (fs::path(a.out) / "manifest.json").string() << '\n';
    return kOk;
}

struct TrainArgs {
    std::string config, data, out, variant, trace;
    std::uint64_t seed = 0;
    bool has_seed = false;
    int epochs = 0;
    bool quiet = false;
};

int cmd_train(const TrainArgs& a)
{
    RunConfig rc = a.config.empty() ? RunConfig{} : read_run_config(a.config);
    if (!a.variant.empty()) rc.variant = parse_variant(a.variant);
    if (a.has_seed) rc.train.seed = a.seed;
    if (a.epochs > 0) rc.train.epochs = a.epochs;
    rc.validate();
    apply_runtime(rc);

    auto manifest = open_dataset(a.data, rc.data.ratios, rc.data.split_seed);
    const int h = rc.model.input_h, w = rc.model.input_w;
    const auto train_seqs = load_sequences(manifest, {Split::Train}, h, w);
    const auto val_seqs = load_sequences(manifest, {Split::Val}, h, w);
    FUnet<float> model(rc.model, rc.variant, rc.train.seed);
    if (!a.quiet) {
        std::printf("variant %s, %lld parameters, %zu train / %zu val sequences\n", variant_tag(rc.variant).c_str(),
                    static_cast<long long>(model.params().count()), train_seqs.size(), val_seqs.size());
    }
    const auto result = train(model, train_seqs, val_seqs, rc.train, rc.data.foreground_only || manifest.foreground_only,
                              [&](const EpochRecord& r) {
                                  if (a.quiet) return;
                                  std::printf("epoch %3d  loss %.5f  val_maxDice %.5f  (%.1fs)\n", r.epoch, r.train_loss,
                                              r.val_max_dice, r.seconds);
                                  std::fflush(stdout);
                              });
    save_checkpoint(a.out, make_checkpoint(model, to_json(rc)));
    const auto trace = a.trace.empty() ? fs::path(a.out).replace_extension(".csv") : fs::path(a.trace);
    write_trace_csv(trace, result.trace);
    std::printf("best epoch %d (val_maxDice %.5f)%s -> %s\n", result.best_epoch, result.best_val_max_dice,
                result.stopped_early ? ", stopped early" : "", a.out.c_str());
    return kOk;
}

struct EvalArgs {
    std::string ckpt, data, split = "val+test", report, config;
    bool oracle_gt = false, per_frame_max = false;
    double empty_score = 1.0;
    int batch = 2;
};

int cmd_eval(const EvalArgs& a)
{
    const auto ckpt = load_checkpoint(a.ckpt);
    RunConfig rc;
    if (ckpt.run_config.is_object() && !ckpt.run_config.empty()) rc = run_config_from_json(ckpt.run_config);
    if (!a.config.empty()) {
        const auto want = read_run_config(a.config);
        if (model_fingerprint(want.model, want.variant) != ckpt.fingerprint) {
            throw CheckpointError("checkpoint " + a.ckpt + " was trained with a different model configuration than " +
                                  a.config);
        }
    }
    const auto model = model_from_checkpoint(ckpt);
    apply_runtime(rc);
    const auto splits = parse_splits(a.split);
    const auto manifest = open_dataset(a.data, rc.data.ratios, rc.data.split_seed);
    const auto seqs = load_sequences(manifest, splits, model.config().input_h, model.config().input_w);
    if (seqs.empty()) throw UsageError("split '" + a.split + "' holds no sequences");

    MetricOptions opt;
    opt.empty_score = a.empty_score;
    opt.per_frame_max = a.per_frame_max;
    MetricReport report;
    if (a.oracle_gt) {
        // plumbing check: score the ground truth against itself
        MetricAccumulator acc(opt);
        for (const auto& s : seqs) {
            if (s.masks.empty()) throw UsageError("sequence " + s.id + " has no masks");
            for (const auto& m : s.masks) acc.add(m.data, m.data);
        }
        report = acc.report();
    } else {
        report = evaluate(model, seqs, a.batch, opt);
    }
    std::ofstream out(a.report);
    if (!out) throw IoError("cannot write " + a.report);
    out << to_json(report).dump(1) << '\n';
    if (!out) throw IoError("cannot write " + a.report);
    std::printf("%s: %lld frames  maxDice %.4f  maxIOU %.4f  MAE %.4f  meanSpe %.4f  maxSpe %.4f\n", a.split.c_str(),
                static_cast<long long>(report.frames), report.max_dice, report.max_iou, report.mae, report.mean_spe,
                report.max_spe);
    return kOk;
}

struct InferArgs {
    std::string ckpt, frames, out;
    double threshold = -1;
    int batch = 2;
};

int cmd_infer(const InferArgs& a)
{
    const auto ckpt = load_checkpoint(a.ckpt);
    const auto model = model_from_checkpoint(ckpt);
    if (!ckpt.run_config.empty()) apply_runtime(run_config_from_json(ckpt.run_config));
    const int t = model.config().frames, h = model.config().input_h, w = model.config().input_w;

    if (!fs::is_directory(a.frames)) throw IoError(a.frames + " is not a directory");
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(a.frames)) {
        if (e.is_regular_file() && e.path().extension() == ".png") files.push_back(e.path());
    }
    std::sort(files.begin(), files.end());
    if (static_cast<int>(files.size()) < t) {
        throw UsageError("need at least T=" + std::to_string(t) + " frames, found " + std::to_string(files.size()));
    }
    if (a.threshold > 1) throw UsageError("--threshold must lie in [0,1]");

    LoadedSequence seq;
    std::vector<std::pair<int, int>> sizes;
    for (const auto& f : files) {
        const auto img = read_png(f, 3);
        sizes.emplace_back(img.height, img.width);
        seq.frames.push_back(crop_resize_bilinear(img, 0, 0, img.height, img.width, h, w));
    }
    const auto probs = predict_sequences(model, {seq}, a.batch)[0];
    std::error_code ec;
    fs::create_directories(fs::path(a.out), ec);
    if (a.threshold >= 0) fs::create_directories(fs::path(a.out) / "masks", ec);
    if (ec) throw IoError("cannot create " + a.out + ": " + ec.message());
    for (std::size_t i = 0; i < files.size(); ++i) {
        auto p = crop_resize_bilinear(probs[i], 0, 0, h, w, sizes[i].first, sizes[i].second);
        write_png(fs::path(a.out) / files[i].filename(), p, 16);
        if (a.threshold >= 0) {
            for (auto& v : p.data) v = v >= a.threshold ? 1.0f : 0.0f;
            write_png(fs::path(a.out) / "masks" / files[i].filename(), p);
        }
    }
    std::printf("wrote %zu probability maps to %s\n", files.size(), a.out.c_str());
    return kOk;
}

struct GradcheckArgs {
    std::uint64_t seed = 0;
    int seeds = 20;
    double eps = 1e-5;
};

int cmd_gradcheck(const GradcheckArgs& a)
{
    set_deterministic_mode(true);
    const auto t0 = std::chrono::steady_clock::now();
    const auto results = run_gradcheck_suite(a.seed, a.seeds, a.eps);
    double worst = 0;
    for (const auto& r : results) {
        std::printf("%-26s %.3e  %s", r.name.c_str(), r.worst_error, r.worst_error < 1e-4 ? "ok" : "FAIL");
        if (r.probes > 0) {
            std::printf("  (%lld probes, %lld re-drawn at relu kinks)", static_cast<long long>(r.probes),
                        static_cast<long long>(r.kink_skips));
        }
        std::printf("\n");
        worst = std::max(worst, r.worst_error);
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::printf("worst relative error %.3e over %d seeds (%.1fs)\n", worst, a.seeds, secs);
    return worst < 1e-4 ? kOk : kGradcheck;
}

struct BenchArgs {
    std::string ckpt, config, size = "256x448", variant = "BIC";
    int frames = 5, iters = 10, warmup = 1;
};

int cmd_bench(const BenchArgs& a)
{
    const auto [h, w] = parse_size(a.size);
    std::optional<FUnet<float>> model;
    if (!a.ckpt.empty()) {
        model.emplace(model_from_checkpoint(load_checkpoint(a.ckpt)));
        const auto& c = model->config();
        if (c.input_h != h || c.input_w != w || c.frames != a.frames) {
            throw UsageError("checkpoint expects " + std::to_string(c.frames) + " frames of " + std::to_string(c.input_h) +
                             "x" + std::to_string(c.input_w));
        }
    } else {
        RunConfig rc = a.config.empty() ? RunConfig{} : read_run_config(a.config);
        rc.model.input_h = h;
        rc.model.input_w = w;
        rc.model.frames = a.frames;
        const auto variant = parse_variant(a.variant);
        rc.model.validate(variant);
        model.emplace(rc.model, variant, 0);
    }
    if (a.iters < 1 || a.warmup < 0) throw UsageError("--iters must be positive and --warmup nonnegative");

    Rng rng(1234);
    std::vector<float> values(static_cast<std::size_t>(a.frames) * 3 * h * w);
    for (auto& v : values) v = static_cast<float>(rng.uniform());
    const auto clip = Tensor::from_vector({1, a.frames, 3, h, w}, std::move(values));

    double checksum = 0;
    for (int i = 0; i < a.warmup; ++i) model->forward(clip);
    std::vector<double> ms;
    for (int i = 0; i < a.iters; ++i) {
        const auto t0 = std::chrono::steady_clock::now();
        const auto y = model->forward(clip);
        ms.push_back(std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count());
        if (i == 0) {
            for (float v : y.data()) checksum += v;
        }
    }
    double mean = 0;
    for (double v : ms) mean += v;
    mean /= static_cast<double>(ms.size());
    std::sort(ms.begin(), ms.end());
    const double median = ms.size() % 2 ? ms[ms.size() / 2] : 0.5 * (ms[ms.size() / 2 - 1] + ms[ms.size() / 2]);
    std::printf("variant %s  %dx%d  T=%d  threads=%d  iters=%d\n", variant_tag(model->variant()).c_str(), h, w, a.frames,
                omp_get_max_threads(), a.iters);
    std::printf("mean %.2f ms/clip  median %.2f ms/clip  fps %.2f\n", mean, median, a.frames * 1000.0 / mean);
    std::printf("output checksum %.9e\n", checksum);
    return kOk;
}

}  // namespace

int main(int argc, char** argv)
{
    CLI::App app{"FUnet video segmentation: training, evaluation, inference and verification"};
    app.require_subcommand(1);

    SynthArgs sa;
    auto* synth = app.add_subcommand("synth", "generate a synthetic ellipse-video dataset");
    synth->add_option("--out", sa.out, "output directory")->required();
    synth->add_option("--sequences", sa.sequences, "number of sequences")->check(CLI::PositiveNumber);
    synth->add_option("--frames-per-seq", sa.frames, "frames per sequence")->check(CLI::PositiveNumber);
    synth->add_option("--size", sa.size, "frame size HxW");
    synth->add_option("--seed", sa.seed, "generator seed");
    synth->add_option("--ellipses", sa.ellipses, "ellipses per sequence")->check(CLI::PositiveNumber);
    synth->add_option("--noise", sa.noise, "background noise sigma")->check(CLI::NonNegativeNumber);

    TrainArgs ta;
    auto* trn = app.add_subcommand("train", "train a model and write its best-validation checkpoint");
    trn->add_option("--config", ta.config, "run config JSON")->check(CLI::ExistingFile);
    trn->add_option("--data", ta.data, "dataset root or manifest.json")->required();
    trn->add_option("--out", ta.out, "checkpoint path")->required();
    trn->add_option("--variant", ta.variant, "B, BI or BIC (overrides the config)");
    auto* seed_opt = trn->add_option("--seed", ta.seed, "initialisation and shuffling seed");
    trn->add_option("--epochs", ta.epochs, "override train.epochs")->check(CLI::PositiveNumber);
    trn->add_option("--trace", ta.trace, "CSV trace path (default: checkpoint path with .csv)");
    trn->add_flag("--quiet", ta.quiet, "no per-epoch output");

    EvalArgs ea;
    auto* evl = app.add_subcommand("eval", "score a checkpoint on a split and write a metric report");
    evl->add_option("--ckpt", ea.ckpt, "checkpoint")->required();
    evl->add_option("--data", ea.data, "dataset root or manifest.json")->required();
    evl->add_option("--split", ea.split, "train, val, test or val+test");
    evl->add_option("--report", ea.report, "report JSON path")->required();
    evl->add_option("--config", ea.config, "run config the checkpoint must match")->check(CLI::ExistingFile);
    evl->add_flag("--oracle-gt", ea.oracle_gt, "score the ground truth against itself");
    evl->add_flag("--per-frame-max", ea.per_frame_max, "average per-frame maxima instead of maximising the mean curve");
    evl->add_option("--empty-score", ea.empty_score, "score of an empty-vs-empty comparison (1 or 0)");
    evl->add_option("--batch", ea.batch, "clips per forward pass")->check(CLI::PositiveNumber);

    InferArgs ia;
    auto* inf = app.add_subcommand("infer", "write probability maps for a directory of frames");
    inf->add_option("--ckpt", ia.ckpt, "checkpoint")->required();
    inf->add_option("--frames", ia.frames, "directory of PNG frames in temporal order")->required();
    inf->add_option("--out", ia.out, "output directory")->required();
    inf->add_option("--threshold", ia.threshold, "also write binary masks at this threshold");
    inf->add_option("--batch", ia.batch, "clips per forward pass")->check(CLI::PositiveNumber);

    GradcheckArgs ga;
    auto* gc = app.add_subcommand("gradcheck", "finite-difference check of every op and the tiny network");
    gc->add_option("--seed", ga.seed, "first seed");
    gc->add_option("--seeds", ga.seeds, "number of seeds")->check(CLI::PositiveNumber);
    gc->add_option("--eps", ga.eps, "central-difference step")->check(CLI::PositiveNumber);

    BenchArgs ba;
    auto* bench = app.add_subcommand("bench", "time inference per clip");
    bench->add_option("--ckpt", ba.ckpt, "checkpoint (default: freshly initialised model)");
    bench->add_option("--config", ba.config, "run config for a fresh model")->check(CLI::ExistingFile);
    bench->add_option("--variant", ba.variant, "variant for a fresh model");
    bench->add_option("--size", ba.size, "input size HxW");
    bench->add_option("--frames", ba.frames, "frames per clip")->check(CLI::PositiveNumber);
    bench->add_option("--iters", ba.iters, "timed iterations");
    bench->add_option("--warmup", ba.warmup, "untimed iterations");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return kUsage;
    }
    ta.has_seed = seed_opt->count() > 0;

    try {
        if (*synth) return cmd_synth(sa);
        if (*trn) return cmd_train(ta);
        if (*evl) return cmd_eval(ea);
        if (*inf) return cmd_infer(ia);
        if (*gc) return cmd_gradcheck(ga);
        if (*bench) return cmd_bench(ba);
    } catch (const IoError& e) {
        std::fprintf(stderr, "I/O error: %s\n", e.what());
        return kIo;
    } catch (const NumericError& e) {
        std::fprintf(stderr, "numeric failure: %s\n", e.what());
        return kNumeric;
    } catch (const CheckpointError& e) {
        std::fprintf(stderr, "checkpoint mismatch: %s\n", e.what());
        return kCheckpoint;
    } catch (const std::invalid_argument& e) {
        std::fprintf(stderr, "usage: %s\n", e.what());
        return kUsage;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kUnexpected;
    }
    return kUsage;
}
