#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "oracle.hpp"
#include "test_util.hpp"

#include "avmae/iavcl.hpp"

#include <algorithm>

using namespace avmae;
using testutil::random_mat;
using testutil::weighted;

namespace {

ModelConfig small_config(int units = 2)
{
    ModelConfig c = preset("Tiny");
    c.encoder_dim = 8;
    c.encoder_heads = 2;
    c.encoder_depth = 3;
    c.skip_indices = {0, 2};
    c.mlp_ratio = 2;
    c.num_dier_units = units;
    return c;
}

std::vector<Mat<double>> random_snapshots(Index layers, Index k, Index c, Rng& rng)
{
    std::vector<Mat<double>> out;
    for (Index l = 0; l < layers; ++l)
        out.push_back(random_mat(k, c, rng));
    return out;
}

std::vector<oracle::Tab> tabs(const std::vector<Mat<double>>& v)
{
    std::vector<oracle::Tab> out;
    for (const auto& m : v)
        out.push_back(oracle::tab(m));
    return out;
}

RawClip random_clip(const ModelConfig& cfg, Rng& rng)
{
    RawClip c = make_clip(cfg.video_input, cfg.audio_input);
    for (auto& v : c.video)
        v = static_cast<float>(uniform01(rng));
    for (auto& a : c.audio)
        a = static_cast<float>(normal01(rng));
    return c;
}

} // namespace

TEST_CASE("layer weights start uniform and aggregate by layer")
{
    const ModelConfig cfg = small_config();
    InitContext ctx(1);
    Rng rng(2);
    Iavcl<double> m(cfg, ctx);
    const RowVec<double> w = layer_weights(m.layer_logits_audio);
    REQUIRE(w.cols() == 3);
    for (Index i = 0; i < 3; ++i)
        CHECK(w(i) == doctest::Approx(1.0 / 3.0).epsilon(1e-15));

    Param<double> logits = m.layer_logits_video;
    logits.value << 3.0, -1.0, 0.5;
    const RowVec<double> wv = layer_weights(logits);
    CHECK(wv.sum() == doctest::Approx(1.0).epsilon(1e-15));
    CHECK((wv.array() > 0.0).all());

    const auto a = random_snapshots(3, 4, 8, rng);
    const auto v = random_snapshots(3, 4, 8, rng);
    const Aggregated<double> g = aggregate_layers(a, v, w, wv);
    const oracle::Aggregate ref = oracle::aggregate(tabs(a), tabs(v), oracle::softmax(m.layer_logits_audio), oracle::softmax(logits));
    CHECK(oracle::max_abs_diff(g.joint, ref.joint) < 1e-14);
    CHECK(oracle::max_abs_diff(g.audio_mean, ref.audio_mean) < 1e-14);
    CHECK(oracle::max_abs_diff(g.video_mean, ref.video_mean) < 1e-14);

    const std::vector<Mat<double>> short_v(v.begin(), v.begin() + 2);
    CHECK_THROWS_AS(aggregate_layers(a, short_v, w, wv), ShapeError);
}

TEST_CASE("branches match the oracle")
{
    InitContext ctx(3);
    Rng rng(4);
    const Mat<double> a = random_mat(4, 8, rng);
    const Mat<double> v = random_mat(4, 8, rng);
    const Mat<double> j = random_mat(4, 8, rng);

    DierBranch<double> d(8, 2, ctx);
    testutil::jitter(d, rng);
    CHECK(oracle::max_abs_diff(d.forward(a, v), oracle::dier_branch(oracle::tab(a), oracle::tab(v), d)) < 1e-12);

    Refinement<double> r(8, ctx);
    testutil::jitter(r, rng);
    CHECK(oracle::max_abs_diff(r.forward(j, a, v, Mode::train), oracle::refinement(oracle::tab(j), oracle::tab(a), oracle::tab(v), r)) <
          1e-12);

    HafeBranch<double> h(8, 2, 2, ctx);
    testutil::jitter(h, rng);
    const auto units = random_snapshots(3, 4, 8, rng);
    CHECK(oracle::max_abs_diff(h.forward(units, j), oracle::hafe_branch(tabs(units), oracle::tab(j), h)) < 1e-12);
}

TEST_CASE("full module matches the oracle for 1, 2 and 4 units")
{
    Rng rng(5);
    for (int n : {1, 2, 4}) {
        CAPTURE(n);
        InitContext ctx(static_cast<std::uint64_t>(n));
        Iavcl<double> m(small_config(n), ctx);
        testutil::jitter(m, rng);
        const auto a = random_snapshots(3, 4, 8, rng);
        const auto v = random_snapshots(3, 4, 8, rng);
        const auto out = m.forward(a, v, Mode::train);
        const auto [ra, rv] = oracle::iavcl(tabs(a), tabs(v), m);
        CHECK(oracle::max_abs_diff(out.audio, ra) < 1e-11);
        CHECK(oracle::max_abs_diff(out.video, rv) < 1e-11);
    }
}

TEST_CASE("branch gradients")
{
    InitContext ctx(6);
    Rng rng(7);
    Mat<double> a = random_mat(4, 8, rng);
    Mat<double> v = random_mat(4, 8, rng);
    Mat<double> j = random_mat(4, 8, rng);
    const Mat<double> w = random_mat(4, 8, rng);

    SUBCASE("dense interaction")
    {
        DierBranch<double> d(8, 2, ctx);
        testutil::jitter(d, rng);
        DierBranch<double>::Cache c;
        d.forward(a, v, &c);
        const auto [da, dv] = d.backward(c, w);
        auto targets = parameter_targets(d);
        targets.push_back({"own", &a, da});
        targets.push_back({"other", &v, dv});
        testutil::require_pass(grad_check<double>([&] { return weighted(d.forward(a, v), w); }, targets));
    }
    SUBCASE("refinement")
    {
        Refinement<double> r(8, ctx);
        testutil::jitter(r, rng);
        Refinement<double>::Cache c;
        r.forward(j, a, v, Mode::train, &c);
        const auto g = r.backward(c, w);
        auto targets = parameter_targets(r);
        targets.push_back({"joint", &j, g.joint});
        targets.push_back({"audio", &a, g.audio});
        targets.push_back({"video", &v, g.video});
        testutil::require_pass(grad_check<double>([&] { return weighted(r.forward(j, a, v, Mode::train), w); }, targets));
    }
    SUBCASE("aggregation and feedback")
    {
        HafeBranch<double> h(8, 2, 2, ctx);
        testutil::jitter(h, rng);
        auto units = random_snapshots(3, 4, 8, rng);
        HafeBranch<double>::Cache c;
        h.forward(units, j, &c);
        const auto g = h.backward(c, w);
        auto targets = parameter_targets(h);
        targets.push_back({"joint", &j, g.joint});
        for (std::size_t l = 0; l < units.size(); ++l)
            targets.push_back({"unit" + std::to_string(l), &units[l], g.units[l]});
        testutil::require_pass(grad_check<double>([&] { return weighted(h.forward(units, j), w); }, targets));
    }
}

TEST_CASE("full module gradient")
{
    InitContext ctx(8);
    Rng rng(9);
    Iavcl<double> m(small_config(2), ctx);
    testutil::jitter(m, rng);
    auto a = random_snapshots(3, 4, 8, rng);
    auto v = random_snapshots(3, 4, 8, rng);
    const Mat<double> wa = random_mat(4, 8, rng);
    const Mat<double> wv = random_mat(4, 8, rng);
    auto objective = [&] {
        const auto o = m.forward(a, v, Mode::train);
        return weighted(o.audio, wa) + weighted(o.video, wv);
    };
    Iavcl<double>::Cache c;
    m.forward(a, v, Mode::train, &c);
    const auto g = m.backward(c, {wa, wv});
    auto targets = parameter_targets(m);
    for (std::size_t l = 0; l < a.size(); ++l) {
        targets.push_back({"audio" + std::to_string(l), &a[l], g.audio_snapshots[l]});
        targets.push_back({"video" + std::to_string(l), &v[l], g.video_snapshots[l]});
    }
    testutil::require_pass(grad_check<double>(objective, targets));
}

TEST_CASE("saturated gates select one path")
{
    InitContext ctx(10);
    Rng rng(11);
    DierBranch<double> d(8, 2, ctx);
    testutil::jitter(d, rng);
    d.gate_self.weight.value.setZero();
    d.gate_cross.weight.value.setZero();
    d.gate_self.bias.value.setConstant(60.0);
    d.gate_cross.bias.value.setConstant(-60.0);
    const Mat<double> a = random_mat(4, 8, rng);
    const Mat<double> v = random_mat(4, 8, rng);
    DierBranch<double>::Cache c;
    const Mat<double> y = d.forward(a, v, &c);
    CHECK((y - c.fs).cwiseAbs().maxCoeff() < 1e-12);
    // with only the self path open the other modality has no influence
    CHECK((d.forward(a, random_mat(4, 8, rng)) - y).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("refinement residuals agree on identical streams")
{
    InitContext ctx(12);
    Rng rng(13);
    Refinement<double> r(8, ctx);
    testutil::jitter(r, rng);
    const Mat<double> j = random_mat(4, 8, rng);
    const Mat<double> x = random_mat(4, 8, rng);
    Refinement<double>::Cache c;
    r.forward(j, x, x, Mode::train, &c);
    CHECK((c.residual_audio - c.residual_video).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("one refinement layer is shared by every unit")
{
    std::vector<Index> counts;
    for (int n : {1, 2, 4}) {
        InitContext ctx(0, false);
        Iavcl<float> m(small_config(n), ctx);
        counts.push_back(count_parameters(m));
        int refine_norms = 0;
        m.visit("", [&](const std::string& name, Param<float>&) { refine_norms += name.rfind("refine.norm.", 0) == 0; });
        CHECK(refine_norms == 2);
    }
    InitContext ctx(0, false);
    DierUnit<float> unit(8, 2, ctx);
    const Index per_unit = count_parameters(unit);
    CHECK(counts[1] - counts[0] == per_unit);
    CHECK(counts[2] - counts[0] == 3 * per_unit);
}

TEST_CASE("region order does not change the task output")
{
    InitContext ctx(14);
    Rng rng(15);
    Iavcl<double> m(small_config(2), ctx);
    testutil::jitter(m, rng);
    TaskHead<double> head(8, 3, false, ctx);
    const auto a = random_snapshots(3, 4, 8, rng);
    const auto v = random_snapshots(3, 4, 8, rng);
    Eigen::PermutationMatrix<Eigen::Dynamic> perm(4);
    perm.indices() << 2, 0, 3, 1;
    std::vector<Mat<double>> pa, pv;
    for (std::size_t l = 0; l < a.size(); ++l) {
        pa.push_back(perm * a[l]);
        pv.push_back(perm * v[l]);
    }
    const auto out = m.forward(a, v, Mode::train);
    const auto pout = m.forward(pa, pv, Mode::train);
    CHECK((Mat<double>(perm * out.audio) - pout.audio).cwiseAbs().maxCoeff() < 1e-12);
    CHECK((head.forward(out) - head.forward(pout)).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("task head")
{
    InitContext ctx(16);
    Rng rng(17);
    for (bool regress : {false, true}) {
        CAPTURE(regress);
        TaskHead<double> head(8, 3, regress, ctx);
        testutil::jitter(head, rng);
        IavclOutput<double> in{random_mat(4, 8, rng, 2.0), random_mat(5, 8, rng, 2.0)};
        const Mat<double> w = random_mat(1, 3, rng);

        RowVec<double> pooled(16);
        pooled << in.audio.colwise().mean(), in.video.colwise().mean();
        if (regress)
            pooled = pooled.array().tanh().matrix();
        const RowVec<double> expect = pooled * head.proj.weight.value + head.proj.bias.value;
        CHECK((head.forward(in) - expect).cwiseAbs().maxCoeff() < 1e-12);

        TaskHead<double>::Cache c;
        head.forward(in, &c);
        const auto g = head.backward(c, w);
        auto targets = parameter_targets(head);
        targets.push_back({"audio", &in.audio, g.audio});
        targets.push_back({"video", &in.video, g.video});
        testutil::require_pass(grad_check<double>([&] { return weighted(head.forward(in), w); }, targets));
    }
}

TEST_CASE("fine-tuning model")
{
    const ModelConfig cfg = small_config(2);
    InitContext ctx(18);
    Rng rng(19);
    FinetuneModel<double> model(cfg, 3, false, ctx);
    testutil::jitter(model, rng, 0.05);
    const RawClip clip = random_clip(cfg, rng);

    CHECK_THROWS_AS(model.predict(clip), StateError);

    const Mat<double> w = random_mat(1, 3, rng);
    zero_grads(model);
    const auto s = model.forward_sample(clip, Mode::train);
    CHECK(s.output.cols() == 3);
    model.backward_sample(s, w);
    auto targets = parameter_targets(model);
    // batch norm over four region rows is sharply curved
    GradCheckOptions fine;
    fine.epsilon = 1e-6;
    testutil::require_pass(
        grad_check<double>([&] { return weighted(model.forward_sample(clip, Mode::train).output, w); }, targets, fine));

    model.iavcl.update_running(s.iavcl);
    const RowVec<double> p = model.predict(clip);
    CHECK(p.allFinite());
    CHECK(p == model.predict(clip));

    std::vector<std::string> names;
    model.visit("", [&](const std::string& n, Param<double>&) { names.push_back(n); });
    for (std::string r : {"video.embed.", "video.encoder.", "audio.embed.", "audio.encoder.", "iavcl.", "head."})
        CHECK(std::any_of(names.begin(), names.end(), [&](const std::string& n) { return n.rfind(r, 0) == 0; }));
}
