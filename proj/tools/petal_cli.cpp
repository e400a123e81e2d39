// petal: data generation, gate calibration, fine-tuning and evaluation.
//
// Exit codes: 0 success, 1 usage or configuration error, 2 data error,
// 3 numeric failure.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>

#include "CLI11.hpp"
#include "petal/pipeline.hpp"

namespace fs = std::filesystem;
using namespace petal;

namespace {

struct Options {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::optional<std::string> out;
    bool force = false;
    std::string mode = "petalface";
    std::optional<int> epochs;
    std::optional<std::string> checkpoint;
    std::optional<std::string> backbone;
};

RunConfig resolve(const Options& o)
{
    RunConfig c = o.config.empty() ? parse_run_config("{}") : load_run_config(o.config);
    if (o.seed)
        c.set_seed(*o.seed);
    if (o.out)
        c.out = *o.out;
    if (o.epochs) {
        c.train.epochs = *o.epochs;
        c.train.warmup_epochs = std::min(c.train.warmup_epochs, std::max(0, c.train.epochs - 1));
    }
    if (o.backbone)
        c.backbone_weights = *o.backbone;
    c.validate();
    return c;
}

void write_text(const fs::path& p, const std::string& text)
{
    std::ofstream os(p, std::ios::binary);
    os << text;
    if (!os)
        throw InputError("cannot write '" + p.string() + "'");
}

fs::path prepare_out(const RunConfig& c)
{
    const fs::path out(c.out);
    fs::create_directories(out);
    write_text(out / "resolved_config.json", run_config_json(c) + "\n");
    return out;
}

fs::path manifest_path(const RunConfig& c)
{
    return c.manifest ? fs::path(*c.manifest) : fs::path(c.out) / "manifest.jsonl";
}

LabeledImages load(const RunConfig& c, const DatasetManifest& m, Split split)
{
    return load_split(m, manifest_path(c).parent_path(), split);
}

std::optional<GateCalibration> stored_calibration(const fs::path& out)
{
    const fs::path p = out / "calibration.txt";
    if (!fs::exists(p))
        return std::nullopt;
    return read_calibration(p);
}

int cmd_gen_data(const Options& o)
{
    RunConfig c = resolve(o);
    const fs::path out(c.out);
    if (fs::exists(out) && !fs::is_empty(out)) {
        if (!o.force)
            throw ConfigError("output directory '" + out.string() + "' is not empty (use --force to overwrite)");
        fs::remove_all(out / "images");
    }
    prepare_out(c);
    const GeneratedBenchmark b = generate_benchmark(c.data);
    write_benchmark(b, out);
    std::printf("manifest: %s\n", (out / "manifest.jsonl").string().c_str());
    std::printf("records: train=%zu gallery=%zu probe=%zu\n", b.manifest.count(Split::train),
                b.manifest.count(Split::gallery), b.manifest.count(Split::probe));
    std::printf("quality: gallery_mean=%.4f probe_mean=%.4f train_mean=%.4f gap=%.4f\n", b.quality.gallery_mean,
                b.quality.probe_mean, b.quality.train_mean, b.quality.gallery_mean - b.quality.probe_mean);
    return 0;
}

int cmd_calibrate(const Options& o)
{
    RunConfig c = resolve(o);
    const fs::path out = prepare_out(c);
    const DatasetManifest m = read_manifest(manifest_path(c));
    const QualityGate g = make_gate(c);
    const LabeledImages train = load_split(m, manifest_path(c).parent_path(), Split::train, nullptr, g.estimator->needs_pixels());
    if (train.size() == 0)
        throw InputError("calibration set is empty: no train records in '" + manifest_path(c).string() + "'");
    const GateCalibration cal = calibrate_gate(*g.estimator, train.images, c.gate.samples, c.seed);
    write_calibration(cal, out / "calibration.txt");
    std::printf("mu=%.9g sigma=%.9g t=%.9g l=%d estimator=%s\n", cal.mu, cal.sigma, cal.threshold, cal.sample_count,
                cal.estimator_name.c_str());
    return 0;
}

int cmd_pretrain(const Options& o)
{
    RunConfig c = resolve(o);
    const fs::path out = prepare_out(c);
    const GeneratedBenchmark pool = generate_benchmark(pretrain_pool_spec(c));
    TrainReport r;
    Backbone b = pretrain_backbone(c, pool, &std::cout, &r);
    write_backbone(save_backbone(b), out / "backbone.bin");
    write_text(out / "pretrain_report.json", train_report_json(r) + "\n");
    std::printf("backbone: %s\n", (out / "backbone.bin").string().c_str());
    return 0;
}

int cmd_finetune(const Options& o)
{
    RunConfig c = resolve(o);
    const auto mode = parse_train_mode(o.mode);
    if (!mode)
        throw ConfigError("unknown --mode '" + o.mode + "'");
    c.train.mode = *mode;
    const fs::path out = prepare_out(c);
    const DatasetManifest m = read_manifest(manifest_path(c));
    const LabeledImages train = load(c, m, Split::train);
    const auto cal = stored_calibration(out);
    if (*mode == TrainMode::petalface && !cal)
        throw InputError("no calibration at '" + (out / "calibration.txt").string() + "' (run calibrate first)");
    Model model = prepare_model(initial_backbone(c), *mode, c.injection, make_gate(c, cal), c.seed);
    MarginHead<float> head =
        make_head(c.loss, std::max(train.num_classes(), 1), c.backbone.feature_dim, derive_seed(c.seed, "head"));
    const TrainReport r = finetune(model, train, head, c.train, &std::cout);
    write_text(out / "train_report.json", train_report_json(r) + "\n");
    write_checkpoint(save_adapters(model, &head, train.identities), out / "adapters.ckpt");
    if (*mode == TrainMode::full_ft)
        write_backbone(save_backbone(model.backbone()), out / "backbone_ft.bin");
    std::printf("trainable=%ld total=%ld steps=%zu\n", static_cast<long>(r.trainable_params),
                static_cast<long>(r.total_params), r.loss.size());
    if (!r.max_grad.empty())
        std::printf("grad: step0_max=%.6g\n", r.max_grad.front());
    return 0;
}

int cmd_evaluate(const Options& o)
{
    RunConfig c = resolve(o);
    const fs::path out = prepare_out(c);
    const DatasetManifest m = read_manifest(manifest_path(c));
    const LabeledImages gallery = load(c, m, Split::gallery);
    const LabeledImages probe = load(c, m, c.eval.probe_split);
    InjectionConfig inj = c.injection;
    std::optional<AdapterCheckpoint> ckpt;
    if (o.checkpoint) {
        ckpt = read_checkpoint(*o.checkpoint);
        inj.mode = ckpt->injection.mode;
    } else {
        inj.mode = AdapterMode::none;
    }
    Model model = inject(initial_backbone(c), inj, make_gate(c), c.seed);
    if (ckpt)
        load_adapters(model, *ckpt);
    if (model.gated() && !model.gate()->calibration) {
        const auto cal = stored_calibration(out);
        if (!cal)
            throw InputError("twin-adapter checkpoint carries no calibration and none is stored in '" + c.out + "'");
        QualityGate g = *model.gate();
        g.calibration = cal;
        model.set_gate(std::move(g));
    }
    const EvalReport r = evaluate_model(model, gallery, probe, c.eval);
    write_text(out / "eval_report.json", eval_report_json(r) + "\n");
    const std::string table = eval_report_table(r);
    write_text(out / "eval_report.txt", table);
    std::cout << table;
    return 0;
}

int cmd_grad_probe(const Options& o)
{
    RunConfig c = resolve(o);
    const fs::path out = prepare_out(c);
    const DatasetManifest m = read_manifest(manifest_path(c));
    const LabeledImages train = load(c, m, Split::train);
    if (train.size() == 0)
        throw InputError("training split is empty");
    const std::vector<long> order = epoch_order(static_cast<long>(train.size()), c.seed, 0);
    std::vector<Image> batch;
    std::vector<int> labels;
    for (std::size_t i = 0; i < std::min(order.size(), static_cast<std::size_t>(c.train.batch_size)); ++i) {
        batch.push_back(train.images[static_cast<std::size_t>(order[i])]);
        labels.push_back(train.labels[static_cast<std::size_t>(order[i])]);
    }
    const auto head = make_head(c.loss, train.num_classes(), c.backbone.feature_dim, derive_seed(c.seed, "head"));
    const auto res = grad_probe(initial_backbone(c), batch, labels, std::optional<QualityGate>(make_gate(c, stored_calibration(out))),
                                head, c.injection, {TrainMode::petalface, TrainMode::full_ft}, c.seed);
    write_text(out / "grad_probe.json", grad_probe_json(res) + "\n");
    for (const auto& g : res)
        std::printf("grad mode=%s count=%ld max=%.6g p99=%.6g mean=%.6g\n", std::string(train_mode_name(g.mode)).c_str(),
                    g.count, g.max_abs, g.p99, g.mean_abs);
    return 0;
}

int cmd_param_count(const Options& o)
{
    RunConfig c = resolve(o);
    prepare_out(c);
    const Backbone b(c.backbone, derive_seed(c.seed, "backbone"));
    std::printf("%-20s %6s %12s %12s %9s\n", "preset", "rank", "trainable", "total", "percent");
    auto row = [&](const std::string& name, InjectionConfig inj) {
        const Model m = inject(b, inj, std::nullopt, c.seed);
        const ParamCount pc = m.count_trainable();
        std::printf("%-20s %6d %12ld %12ld %8.3f%%\n", name.c_str(), inj.rank, static_cast<long>(pc.trainable),
                    static_cast<long>(pc.total), 100.0 * static_cast<double>(pc.trainable) / static_cast<double>(pc.total));
    };
    row("config", c.injection);
    for (const char* p : {"recommended", "attention", "attention+feature", "attention+proj", "attention+mlp",
                          "attention+patch", "all"}) {
        InjectionConfig inj = InjectionConfig::preset(p);
        inj.rank = c.injection.rank;
        inj.mode = c.injection.mode;
        row(p, inj);
    }
    return 0;
}

} // namespace

int main(int argc, char** argv)
{
    CLI::App app{"petal: quality-gated low-rank adaptation on a toy vision transformer"};
    app.require_subcommand(1);
    Options o;
    app.add_option("--config", o.config, "run configuration (JSON)")->check(CLI::ExistingFile);
    app.add_option("--seed", o.seed, "run seed (overrides config)");
    app.add_option("--out", o.out, "output directory (overrides config)");
    app.add_flag("--force", o.force, "overwrite a non-empty output directory");

    auto* gen = app.add_subcommand("gen-data", "render the synthetic benchmark");
    auto* cal = app.add_subcommand("calibrate", "calibrate the quality gate on the train split");
    auto* pre = app.add_subcommand("pretrain", "pre-train the backbone on a clean identity pool");
    auto* ft = app.add_subcommand("finetune", "fine-tune on the train split");
    ft->add_option("--mode", o.mode, "petalface | single_lora | full_ft | frozen");
    ft->add_option("--epochs", o.epochs, "epochs (overrides config)");
    ft->add_option("--backbone", o.backbone, "base weights file");
    auto* ev = app.add_subcommand("evaluate", "evaluate gallery vs probe");
    ev->add_option("--checkpoint", o.checkpoint, "adapter checkpoint");
    ev->add_option("--backbone", o.backbone, "base weights file");
    auto* gp = app.add_subcommand("grad-probe", "first-iteration gradient magnitudes");
    gp->add_option("--backbone", o.backbone, "base weights file");
    auto* pc = app.add_subcommand("param-count", "trainable parameters per injection preset");
    for (auto* s : {gen, cal, pre, ft, ev, gp, pc})
        s->fallthrough();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? 0 : 1;
    }

    try {
        if (gen->parsed()) return cmd_gen_data(o);
        if (cal->parsed()) return cmd_calibrate(o);
        if (pre->parsed()) return cmd_pretrain(o);
        if (ft->parsed()) return cmd_finetune(o);
        if (ev->parsed()) return cmd_evaluate(o);
        if (gp->parsed()) return cmd_grad_probe(o);
        if (pc->parsed()) return cmd_param_count(o);
    } catch (const ConfigError& e) {
        std::fprintf(stderr, "config error: %s\n", e.what());
        return 1;
    } catch (const StateError& e) {
        std::fprintf(stderr, "state error: %s\n", e.what());
        return 1;
    } catch (const NumericError& e) {
        std::fprintf(stderr, "numeric error: %s\n", e.what());
        return 3;
    } catch (const GatingError& e) {
        std::fprintf(stderr, "gating error: %s\n", e.what());
        return 3;
    } catch (const Error& e) {
        std::fprintf(stderr, "data error: %s\n", e.what());
        return 2;
    } catch (const std::filesystem::filesystem_error& e) {
        std::fprintf(stderr, "data error: %s\n", e.what());
        return 2;
    }
    return 1;
}
