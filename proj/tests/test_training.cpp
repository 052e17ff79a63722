#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "test_util.hpp"

#include "avmae/iavcl.hpp"
#include "avmae/training.hpp"

#include <Eigen/Dense>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

using namespace avmae;
namespace fs = std::filesystem;

namespace {

struct Toy {
    using scalar_type = double;
    Param<double> w{3, 4, ParamKind::weight};
    Param<double> b{1, 4, ParamKind::vector};
    Param<double> stat{1, 4, ParamKind::buffer};

    Toy()
    {
        Rng rng(3);
        w.value = testutil::random_mat(3, 4, rng);
        b.value = testutil::random_mat(1, 4, rng);
        stat.value = Mat<double>::Ones(1, 4);
    }

    void visit(const std::string& prefix, const ParamVisitor<double>& fn)
    {
        fn(join_name(prefix, "w"), w);
        fn(join_name(prefix, "b"), b);
        fn(join_name(prefix, "stat"), stat);
    }
};

RunConfig tiny_run(Stage stage, long steps)
{
    RunConfig rc;
    rc.model = preset("Tiny");
    rc.train = train_defaults(stage);
    rc.train.batch = 4;
    rc.train.steps = steps;
    rc.train.base_lr = 0.1;
    return rc;
}

fs::path scratch_dir(const std::string& name)
{
    const fs::path p = fs::temp_directory_path() / ("avmae_test_training_" + name);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

std::string slurp(const fs::path& p)
{
    std::ifstream is(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

} // namespace

TEST_CASE("adamw zero gradients")
{
    Toy toy;
    const Mat<double> w0 = toy.w.value, b0 = toy.b.value;
    const auto params = param_list(toy);
    toy.w.g().setZero();
    toy.b.g().setZero();

    AdamW<double> opt;
    opt.step(params, 0.01, 0.0);
    CHECK(toy.w.value == w0);
    CHECK(toy.b.value == b0);

    opt.step(params, 0.01, 0.5);
    CHECK((toy.w.value - w0 * (1.0 - 0.01 * 0.5)).cwiseAbs().maxCoeff() < 1e-15);
    CHECK(toy.b.value == b0);
    CHECK(toy.stat.value == Mat<double>::Ones(1, 4));
}

TEST_CASE("adamw first step moves by lr against the gradient sign")
{
    Toy toy;
    const Mat<double> w0 = toy.w.value;
    Rng rng(8);
    toy.w.g() = testutil::random_mat(3, 4, rng);
    toy.b.g().setZero();
    AdamW<double> opt;
    opt.step(param_list(toy), 1e-3, 0.0);
    const Mat<double> expect = w0.array() - 1e-3 * toy.w.grad.array().sign();
    CHECK((toy.w.value - expect).cwiseAbs().maxCoeff() < 1e-9);
    CHECK(opt.steps() == 1);
}

TEST_CASE("adamw rejects non-finite gradients untouched")
{
    Toy toy;
    const Mat<double> w0 = toy.w.value;
    toy.w.g().setZero();
    toy.b.g().setZero();
    toy.b.g()(0, 2) = std::nan("");
    AdamW<double> opt;
    try {
        opt.step(param_list(toy), 0.01, 0.1);
        FAIL("expected NonFiniteError");
    } catch (const NonFiniteError& e) {
        CHECK(std::string(e.what()).find("b") != std::string::npos);
    }
    CHECK(toy.w.value == w0);
}

TEST_CASE("adamw solves a quadratic bowl")
{
    Toy toy;
    const auto params = param_list(toy);
    AdamW<double> opt;
    int steps = 0;
    for (; steps < 2000; ++steps) {
        if (std::sqrt(toy.w.value.squaredNorm() + toy.b.value.squaredNorm()) < 1e-3)
            break;
        toy.w.g() = toy.w.value;
        toy.b.g() = toy.b.value;
        opt.step(params, 1e-2, 0.0);
    }
    CHECK(steps < 2000);
}

TEST_CASE("layer scales per tensor")
{
    Toy toy;
    std::map<std::string, double> scale{{"w", 0.0}};
    const Mat<double> w0 = toy.w.value;
    Rng rng(4);
    toy.w.g() = testutil::random_mat(3, 4, rng);
    toy.b.g() = testutil::random_mat(1, 4, rng);
    const Mat<double> b0 = toy.b.value;
    AdamW<double> opt;
    opt.step(param_list(toy), 0.1, 0.0, &scale);
    CHECK(toy.w.value == w0);
    CHECK(toy.b.value != b0);
}

TEST_CASE("gradient clipping")
{
    Toy toy;
    toy.w.g().setConstant(1.0);
    toy.b.g().setConstant(1.0);
    const auto params = param_list(toy);
    CHECK(clip_grad_norm(params, 0.0) == doctest::Approx(4.0));
    CHECK(clip_grad_norm(params, 100.0) == doctest::Approx(4.0));
    CHECK(clip_grad_norm(params, 2.0) == doctest::Approx(4.0));
    CHECK(clip_grad_norm(params, 0.0) == doctest::Approx(2.0));
}

TEST_CASE("learning rate schedule")
{
    TrainConfig cfg;
    cfg.base_lr = 1e-3;
    cfg.batch = 64;
    cfg.epochs = 10;
    cfg.warmup_epochs = 2;
    cfg.min_lr = 1e-6;
    const Schedule s = make_schedule(cfg, 640);
    CHECK(s.peak == doctest::Approx(2.5e-4));
    CHECK(s.total == 100);
    CHECK(s.warmup == 20);

    CHECK(lr_at(0, s) == 0.0);
    CHECK(std::abs(lr_at(s.warmup, s) - s.peak) < 1e-12);
    CHECK(lr_at(10, s) == doctest::Approx(s.peak / 2));
    const long mid = s.warmup + (s.total - s.warmup) / 2;
    CHECK(std::abs(lr_at(mid, s) - (s.peak + s.floor) / 2) < 1e-9);
    CHECK(std::abs(lr_at(s.total, s) - s.floor) < 1e-12);
    CHECK(lr_at(s.total + 50, s) == s.floor);
    for (long t = s.warmup; t < s.total; ++t)
        CHECK(lr_at(t + 1, s) <= lr_at(t, s));

    cfg.steps = 37;
    CHECK(make_schedule(cfg, 640).total == 37);
}

TEST_CASE("layer-wise decay")
{
    CHECK(layer_depth("embed.video.proj.weight", 4) == 0);
    CHECK(layer_depth("video.encoder.region_tokens", 4) == 0);
    CHECK(layer_depth("video.encoder.layers.0.local_attn.qkv.weight", 4) == 1);
    CHECK(layer_depth("audio.encoder.layers.3.g2l_mlp.fc1.bias", 4) == 4);
    CHECK(layer_depth("head.proj.weight", 4) == 5);
    CHECK(layer_depth("iavcl.refine.weight", 4) == 5);

    RunConfig rc = tiny_run(Stage::finetune, 1);
    InitContext ctx(1, false);
    FinetuneModel<float> model(rc.model, 2, false, ctx);
    const auto params = param_list(model);
    const auto scales = layer_decay_scales(params, rc.model.encoder_depth, 0.75);
    bool any_embed = false;
    for (const auto& [name, p] : params) {
        const double s = scales.at(name);
        CHECK(s == doctest::Approx(std::pow(0.75, 5 - layer_depth(name, 4))));
        if (layer_depth(name, 4) == 0) {
            CHECK(s == doctest::Approx(std::pow(0.75, 5)));
            any_embed = true;
        }
    }
    CHECK(any_embed);
    for (const auto& [name, s] : layer_decay_scales(params, 4, 1.0))
        CHECK(s == 1.0);
}

TEST_CASE("synthetic data")
{
    const ModelConfig cfg = preset("Tiny");
    const SyntheticTask task = synthetic_task("post", 11);
    int l1 = -1, l2 = -1;
    CHECK(synthetic_clip(cfg, task, 5, &l1) == synthetic_clip(cfg, task, 5, &l2));
    CHECK(l1 == 5 % 3);
    CHECK(synthetic_clip(cfg, task, 5) != synthetic_clip(cfg, task, 6));
    CHECK(synthetic_clip(cfg, task, 5) != synthetic_clip(cfg, synthetic_task("post", 12), 5));
    CHECK_THROWS_AS(synthetic_task("nope", 0), ConfigError);

    // per-class mean video energy
    const Dataset d = gen_synthetic(cfg, synthetic_task("pretrain", 2), 60);
    std::vector<double> energy(6, 0.0);
    for (Index i = 0; i < d.size(); ++i) {
        double e = 0.0;
        for (float v : d.clips[static_cast<std::size_t>(i)].video)
            e += static_cast<double>(v) * v;
        energy[static_cast<std::size_t>(d.labels[static_cast<std::size_t>(i)])] += e / 10.0;
    }
    for (std::size_t a = 0; a < energy.size(); ++a)
        for (std::size_t b = a + 1; b < energy.size(); ++b)
            CHECK(std::abs(energy[a] - energy[b]) > 1e-3 * energy[a]);
}

TEST_CASE("noise-free two-class data is linearly separable")
{
    // ridge least squares on raw values in dual form, scored on held-out clips
    const ModelConfig cfg = preset("Tiny");
    auto features = [&](const Dataset& d) {
        const auto& c0 = d.clips.front();
        Eigen::MatrixXd x(d.size(), static_cast<Index>(c0.video.size() + c0.audio.size()));
        for (Index i = 0; i < d.size(); ++i) {
            const auto& c = d.clips[static_cast<std::size_t>(i)];
            Index k = 0;
            for (float v : c.video)
                x(i, k++) = v;
            for (float a : c.audio)
                x(i, k++) = a;
        }
        return x;
    };
    const Dataset train = gen_synthetic(cfg, synthetic_task("target", 1), 64);
    const Dataset test = gen_synthetic(cfg, synthetic_task("target", 2), 200);
    const Eigen::MatrixXd x = features(train), xt = features(test);
    Eigen::VectorXd y(train.size());
    for (Index i = 0; i < train.size(); ++i)
        y(i) = train.labels[static_cast<std::size_t>(i)] ? 1.0 : -1.0;
    const Eigen::MatrixXd k = x * x.transpose() + 1e-3 * Eigen::MatrixXd::Identity(train.size(), train.size());
    const Eigen::VectorXd alpha = k.ldlt().solve(y);
    const Eigen::VectorXd score = xt * (x.transpose() * alpha);
    int correct = 0;
    for (Index i = 0; i < test.size(); ++i)
        correct += (score(i) > 0) == (test.labels[static_cast<std::size_t>(i)] == 1);
    CHECK(correct >= 198);
}

TEST_CASE("dataset directory round trip")
{
    const fs::path dir = scratch_dir("data");
    const ModelConfig cfg = preset("Tiny");
    const SyntheticTask task = synthetic_task("target", 4);
    const Dataset d = gen_synthetic(cfg, task, 5);
    write_dataset(d, task, dir.string());
    const Dataset back = read_dataset(dir.string());
    CHECK(back.clips == d.clips);
    CHECK(back.labels == d.labels);
    fs::remove_all(dir);
}

TEST_CASE("parallel_for")
{
    std::vector<int> seen(100, 0);
    parallel_for(100, 4, [&](Index i, int) { seen[static_cast<std::size_t>(i)] += 1; });
    CHECK(std::all_of(seen.begin(), seen.end(), [](int v) { return v == 1; }));
    CHECK_THROWS_AS(parallel_for(10, 3, [](Index i, int) {
                        if (i == 7)
                            throw ShapeError("boom");
                    }),
                    ShapeError);
}

TEST_CASE("metrics line layout")
{
    MetricRecord r;
    r.step = 3;
    r.stage = Stage::finetune;
    r.loss = 0.5;
    r.accuracy = 0.75;
    const std::string line = to_jsonl(r);
    CHECK(line.rfind("{\"step\":3,\"stage\":\"finetune\",\"loss\":0.5,", 0) == 0);
    CHECK(line.find("\"accuracy\":0.75}") != std::string::npos);
    r.accuracy.reset();
    CHECK(to_jsonl(r).find("\"accuracy\":null") != std::string::npos);
}

TEST_CASE("stage runs are reproducible and thread-count invariant")
{
    const fs::path dir = scratch_dir("runs");
    const RunConfig rc = tiny_run(Stage::pretrain, 4);
    const Dataset d = gen_synthetic(rc.model, synthetic_task("pretrain", 3), 8);

    StageRequest r;
    r.stage = Stage::pretrain;
    r.config = rc;
    r.data = &d;
    r.threads = 1;
    r.out_path = (dir / "a.ckpt").string();
    r.metrics_path = (dir / "a.jsonl").string();
    const StageResult a = run_stage(r);
    r.threads = 3;
    r.out_path = (dir / "b.ckpt").string();
    r.metrics_path = (dir / "b.jsonl").string();
    const StageResult b = run_stage(r);

    CHECK(a.log.size() == 4);
    CHECK(a.log == b.log);
    CHECK(slurp(dir / "a.jsonl") == slurp(dir / "b.jsonl"));
    CHECK(slurp(dir / "a.ckpt") == slurp(dir / "b.ckpt"));

    r.config.train.seed = 99;
    CHECK(run_stage(r).log != a.log);

    // supervised continuation leaves its input untouched
    RunConfig fc = tiny_run(Stage::finetune, 3);
    const Dataset t = gen_synthetic(fc.model, synthetic_task("target", 5), 8);
    const std::string before = slurp(dir / "a.ckpt");
    StageRequest f;
    f.stage = Stage::finetune;
    f.config = fc;
    f.data = &t;
    f.init_path = (dir / "a.ckpt").string();
    f.out_path = (dir / "f.ckpt").string();
    const StageResult fr = run_stage(f);
    CHECK(slurp(dir / "a.ckpt") == before);
    CHECK(fr.log.back().accuracy.has_value());
    CHECK(evaluate_accuracy(load_checkpoint(f.out_path), t) == doctest::Approx(*fr.final_accuracy));
    fs::remove_all(dir);
}

TEST_CASE("supervised stages need an initial checkpoint")
{
    const RunConfig rc = tiny_run(Stage::finetune, 1);
    const Dataset d = gen_synthetic(rc.model, synthetic_task("target", 5), 4);
    StageRequest r;
    r.stage = Stage::finetune;
    r.config = rc;
    r.data = &d;
    CHECK_THROWS_AS(run_stage(r), Error);
    r.stage = Stage::post_pretrain;
    CHECK_THROWS_AS(run_stage(r), Error);
    r.allow_scratch = true;
    CHECK_NOTHROW(run_stage(r));

    Dataset unlabeled = d;
    unlabeled.labels.clear();
    r.data = &unlabeled;
    CHECK_THROWS_AS(run_stage(r), Error);
}

TEST_CASE("only the head is re-initialized between supervised stages")
{
    RunConfig pc = tiny_run(Stage::post_pretrain, 2);
    pc.train.num_classes = 3;
    const Dataset pd = gen_synthetic(pc.model, synthetic_task("post", 1), 6);
    StageRequest p;
    p.stage = Stage::post_pretrain;
    p.config = pc;
    p.data = &pd;
    p.allow_scratch = true;
    const Checkpoint post = run_stage(p).checkpoint;

    RunConfig fc = tiny_run(Stage::finetune, 1);
    fc.train.base_lr = 0.0;
    const Dataset fd = gen_synthetic(fc.model, synthetic_task("target", 1), 4);
    StageRequest f;
    f.stage = Stage::finetune;
    f.config = fc;
    f.data = &fd;
    f.init = &post;
    const Checkpoint out = run_stage(f).checkpoint;
    InitContext ctx(0, false);
    FinetuneModel<float> shape(fc.model, 2, false, ctx);
    std::set<std::string> buffers;
    for (const auto& [name, p] : param_list(shape))
        if (!p->trainable())
            buffers.insert(name);
    CHECK(!buffers.empty());
    for (const auto& e : out.entries) {
        const auto* prev = post.find(e.name);
        REQUIRE(prev);
        if (e.name.rfind("head.", 0) == 0) {
            CHECK(prev->value.rows() + prev->value.cols() != e.value.rows() + e.value.cols());
        } else if (!buffers.count(e.name)) {
            INFO(e.name);
            CHECK(prev->value == e.value);
        }
    }
}
