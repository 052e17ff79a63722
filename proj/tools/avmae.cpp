#include "avmae/masking.hpp"
#include "avmae/training.hpp"
#include "avmae/verify.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>

using namespace avmae;
namespace fs = std::filesystem;

namespace {

constexpr int exit_ok = 0;
constexpr int exit_failed = 1;
constexpr int exit_usage = 2;

// Thrown for bad flag values that CLI11 cannot see on its own.
struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct TrainFlags {
    std::string config, data, out, init;
    std::optional<std::uint64_t> seed;
    std::optional<long> steps;
};

void add_train_flags(CLI::App* cmd, TrainFlags& f)
{
    cmd->add_option("--config", f.config, "run configuration JSON (defaults: Tiny preset, stage settings)");
    cmd->add_option("--data", f.data, "dataset directory written by gen-data")->required();
    cmd->add_option("--out", f.out, "output directory (checkpoint.ckpt, metrics.jsonl)")->required();
    cmd->add_option("--init", f.init, "initial checkpoint");
    cmd->add_option("--seed", f.seed, "overrides train.seed");
    cmd->add_option("--steps", f.steps, "overrides the step budget");
}

int run_training(Stage stage, const TrainFlags& f)
{
    RunConfig rc;
    if (f.config.empty()) {
        rc.model = preset("Tiny");
        rc.train = train_defaults(stage);
    } else {
        rc = load_run_config(f.config, stage);
    }
    if (f.seed)
        rc.train.seed = *f.seed;
    if (f.steps)
        rc.train.steps = *f.steps;
    if (stage != Stage::pretrain && f.init.empty())
        throw UsageError(to_string(stage) + " requires --init CHECKPOINT");

    const Dataset data = read_dataset(f.data);
    if (stage != Stage::pretrain && data.labeled() && !rc.train.regression) {
        const int top = *std::max_element(data.labels.begin(), data.labels.end());
        rc.train.num_classes = std::max(rc.train.num_classes, top + 1);
    }

    fs::create_directories(f.out);
    StageRequest req;
    req.stage = stage;
    req.config = rc;
    req.data = &data;
    req.init_path = f.init;
    req.out_path = (fs::path(f.out) / "checkpoint.ckpt").string();
    req.metrics_path = (fs::path(f.out) / "metrics.jsonl").string();
    const long total = make_schedule(rc.train, data.size()).total;
    const long every = std::max<long>(1, total / 20);
    req.on_step = [&](const MetricRecord& r) {
        if (r.step % every == 0 || r.step == total) {
            std::printf("step %ld/%ld loss %.5f lr %.3g", r.step, total, r.loss, r.lr);
            if (r.accuracy)
                std::printf(" acc %.4f", *r.accuracy);
            std::printf("\n");
            std::fflush(stdout);
        }
        return true;
    };
    const StageResult res = run_stage(req);
    std::printf("%s: %zu steps in %.1f s, checkpoint %s\n", to_string(stage).c_str(), res.log.size(), res.seconds,
                req.out_path.c_str());
    return exit_ok;
}

std::array<int, 3> parse_grid(const std::string& s)
{
    std::array<int, 3> g{};
    char c1 = 0, c2 = 0;
    std::istringstream is(s);
    if (!(is >> g[0] >> c1 >> g[1] >> c2 >> g[2]) || c1 != ',' || c2 != ',' || !is.eof() || g[0] < 1 || g[1] < 1 || g[2] < 1)
        throw UsageError("--grid expects t,h,w with positive integers, got '" + s + "'");
    return g;
}

int maskdump(const std::string& type, const std::string& grid_text, double ratio, double encoder_ratio, std::uint64_t seed,
             bool pbm)
{
    const auto g = parse_grid(grid_text);
    const Grid3 grid{g[0], g[1], g[2]};
    Rng rng(seed);
    std::vector<bool> mask;
    std::optional<std::vector<bool>> targets;
    if (type == "tube") {
        mask = tube_mask(grid, ratio, rng);
    } else if (type == "random") {
        mask = random_mask(grid.size(), ratio, rng);
    } else {
        mask = tube_mask(grid, encoder_ratio, rng);
        DecoderMask d = running_cell_mask(grid, mask, ratio, rng);
        if (d.warning)
            std::fprintf(stderr, "warning: %s\n", d.warning->c_str());
        targets = std::move(d.targets);
    }
    if (pbm)
        std::cout << mask_pbm(grid, targets ? *targets : mask);
    else
        std::cout << mask_ascii(grid, mask, targets ? &*targets : nullptr);
    return exit_ok;
}

int check_grads(const std::string& module, double tolerance)
{
    bool ok = true;
    for (const auto& e : run_grad_suite(module, tolerance)) {
        ok = ok && e.report.pass;
        std::printf("%-4s %s/%s max_rel_err=%.3e\n", e.report.pass ? "ok" : "FAIL", e.module.c_str(), e.block.c_str(),
                    e.report.max_rel_error());
        if (!e.report.pass)
            std::printf("%s", e.report.summary().c_str());
    }
    std::printf("%s\n", ok ? "all gradient checks passed" : "gradient checks FAILED");
    return ok ? exit_ok : exit_failed;
}

int verify(const std::vector<std::string>& only)
{
    VerifyOptions opts;
    opts.progress = [](const std::string& s) { std::fprintf(stderr, "  %s\n", s.c_str()); };
    bool ok = true;
    for (const auto& id : criterion_ids()) {
        if (!only.empty() && std::find(only.begin(), only.end(), id) == only.end())
            continue;
        const CriterionResult r = run_criterion(id, opts);
        ok = ok && r.pass;
        std::printf("%s %s %s: %s (%.1f s)\n", r.pass ? "PASS" : "FAIL", r.id.c_str(), r.title.c_str(), r.detail.c_str(),
                    r.seconds);
        std::fflush(stdout);
    }
    return ok ? exit_ok : exit_failed;
}

} // namespace

int main(int argc, char** argv)
{
    CLI::App app{"Audio-visual masked autoencoder: training, data and verification tools", "avmae"};
    app.require_subcommand(1);

    TrainFlags pre_flags, post_flags, fine_flags;
    add_train_flags(app.add_subcommand("pretrain", "masked audio-visual pretraining"), pre_flags);
    add_train_flags(app.add_subcommand("posttrain", "supervised post-pretraining"), post_flags);
    add_train_flags(app.add_subcommand("finetune", "supervised fine-tuning"), fine_flags);

    auto* gen = app.add_subcommand("gen-data", "write a synthetic dataset");
    std::string task = "target", gen_out, gen_preset = "Tiny";
    long n = 64;
    std::uint64_t gen_seed = 0;
    gen->add_option("--task", task, "pretrain, post or target")->check(CLI::IsMember({"pretrain", "post", "target"}));
    gen->add_option("--n", n, "number of clips")->check(CLI::PositiveNumber);
    gen->add_option("--seed", gen_seed);
    gen->add_option("--out", gen_out, "output directory")->required();
    gen->add_option("--preset", gen_preset, "clip geometry")->check(CLI::IsMember({"B", "L", "H", "Tiny"}));

    auto* grads = app.add_subcommand("check-grads", "finite-difference gradient checks in double precision");
    std::string module = "all";
    double tolerance = 1e-4;
    std::vector<std::string> modules = {"all"};
    for (const auto& m : grad_modules())
        modules.push_back(m);
    grads->add_option("--module", module)->check(CLI::IsMember(modules));
    grads->add_option("--tolerance", tolerance)->check(CLI::PositiveNumber);

    auto* shapes = app.add_subcommand("shapes", "dimension trace and parameter count of a preset");
    std::string shape_preset = "B";
    shapes->add_option("--preset", shape_preset)->check(CLI::IsMember({"B", "L", "H", "Tiny"}));

    auto* dump = app.add_subcommand("maskdump", "render one mask");
    std::string mask_type = "tube", grid = "8,10,10";
    double ratio = 0.9, encoder_ratio = 0.9;
    std::uint64_t mask_seed = 0;
    bool pbm = false;
    dump->add_option("--type", mask_type)->check(CLI::IsMember({"tube", "random", "cell"}));
    dump->add_option("--grid", grid, "t,h,w");
    dump->add_option("--ratio", ratio, "mask ratio; the decoder ratio for cell");
    dump->add_option("--encoder-ratio", encoder_ratio, "tube ratio under the cell targets");
    dump->add_option("--seed", mask_seed);
    dump->add_flag("--pbm", pbm, "plain PBM instead of ASCII");

    auto* ver = app.add_subcommand("verify", "run the property suite");
    std::vector<std::string> only;
    ver->add_option("--only", only, "criterion ids, e.g. A1 A3")->delimiter(',');

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        std::cerr << '\n' << app.help();
        return exit_usage;
    }

    try {
        if (app.got_subcommand("pretrain"))
            return run_training(Stage::pretrain, pre_flags);
        if (app.got_subcommand("posttrain"))
            return run_training(Stage::post_pretrain, post_flags);
        if (app.got_subcommand("finetune"))
            return run_training(Stage::finetune, fine_flags);
        if (app.got_subcommand("gen-data")) {
            const SyntheticTask t = synthetic_task(task, gen_seed);
            write_dataset(gen_synthetic(preset(gen_preset), t, n), t, gen_out);
            std::printf("wrote %ld %s clips (%d classes) to %s\n", n, task.c_str(), t.classes(), gen_out.c_str());
            return exit_ok;
        }
        if (app.got_subcommand("check-grads"))
            return check_grads(module, tolerance);
        if (app.got_subcommand("shapes")) {
            std::cout << shapes_report(preset(shape_preset));
            return exit_ok;
        }
        if (app.got_subcommand("maskdump"))
            return maskdump(mask_type, grid, ratio, encoder_ratio, mask_seed, pbm);
        return verify(only);
    } catch (const UsageError& e) {
        std::cerr << "error: " << e.what() << "\n\n" << app.help();
        return exit_usage;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return exit_failed;
    }
}
