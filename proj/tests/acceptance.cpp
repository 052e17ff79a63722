#include "oracle.hpp"

#include "avmae/iavcl.hpp"
#include "avmae/lgi_encoder.hpp"
#include "avmae/masking.hpp"
#include "avmae/pretrain_graph.hpp"
#include "avmae/verify.hpp"

#include <chrono>
#include <cstdio>
#include <cstring>

using namespace avmae;

namespace {

using S = double;

Mat<S> random_mat(Index r, Index c, Rng& rng)
{
    Mat<S> m(r, c);
    for (Index i = 0; i < m.size(); ++i)
        m.data()[i] = static_cast<S>(normal01(rng));
    return m;
}

// Zero-initialized projections would hide most of a block, so every trainable
// tensor gets a small random offset.
template <typename Block>
void perturb(Block& block, Rng& rng)
{
    block.visit("", [&](const std::string&, Param<S>& p) {
        if (!p.trainable() || !p.allocated())
            return;
        for (Index i = 0; i < p.value.size(); ++i)
            p.value.data()[i] += static_cast<S>(normal01(rng) * 0.1);
    });
}

std::vector<oracle::Tab> tabs(const std::vector<Mat<S>>& v)
{
    std::vector<oracle::Tab> out;
    for (const auto& m : v)
        out.push_back(oracle::tab(m));
    return out;
}

CriterionResult a10()
{
    const auto t0 = std::chrono::steady_clock::now();
    const ModelConfig cfg = preset("Tiny");
    const Index c = cfg.encoder_dim;
    const Index k = cfg.audio_regions();
    InitContext ctx(10);
    Rng rng(10);

    LgiLayer<S> local(c, cfg.encoder_heads, cfg.mlp_ratio, false, ctx);
    LgiLayer<S> global(c, cfg.encoder_heads, cfg.mlp_ratio, true, ctx);
    FusionBlock<S> fusion(c, cfg.fusion_heads, cfg.mlp_ratio, ctx);
    DierUnit<S> unit(c, cfg.encoder_heads, ctx);
    Refinement<S> refine(c, ctx);
    HafeBranch<S> hafe(c, cfg.encoder_heads, cfg.mlp_ratio, ctx);
    perturb(local, rng);
    perturb(global, rng);
    perturb(fusion, rng);
    perturb(unit, rng);
    perturb(refine, rng);
    perturb(hafe, rng);

    double lgi = 0.0, fus = 0.0, dier = 0.0, agg = 0.0;
    for (int trial = 0; trial < 20; ++trial) {
        const Modality m = trial % 2 ? Modality::audio : Modality::video;
        const Grid3 grid = m == Modality::video ? cfg.video_grid() : cfg.audio_grid();
        const Grid3 region = m == Modality::video ? cfg.video_region_grid() : cfg.audio_region_grid();
        const MaskPair mask = make_mask_pair(cfg, m, rng);
        const RegionPartition part = partition(grid, region, mask.visible());
        const LayerState<S> in{random_mat(part.tokens(), c, rng), random_mat(part.regions(), c, rng)};
        const LgiLayer<S>& layer = trial % 4 < 2 ? local : global;
        const LayerState<S> out = layer.forward(in, part);
        const oracle::LgiOut ref = oracle::lgi_layer(oracle::tab(in.locals), oracle::tab(in.regions), part.members, layer);
        lgi = std::max({lgi, oracle::max_abs_diff(out.locals, ref.locals), oracle::max_abs_diff(out.regions, ref.regions)});

        const Mat<S> v = random_mat(8, c, rng);
        const Mat<S> a = random_mat(3, c, rng);
        const auto f = fusion.forward({v, a});
        const auto [rv, ra] = oracle::fusion_block(oracle::tab(v), oracle::tab(a), fusion);
        fus = std::max({fus, oracle::max_abs_diff(f.video, rv), oracle::max_abs_diff(f.audio, ra)});

        const Mat<S> fa = random_mat(k, c, rng);
        const Mat<S> fv = random_mat(k, c, rng);
        const Mat<S> joint = random_mat(k, c, rng);
        const Mat<S> fa2 = unit.audio.forward(fa, fv);
        const Mat<S> fv2 = unit.video.forward(fv, fa);
        const Mat<S> j2 = refine.forward(joint, fa2, fv2, Mode::train);
        const oracle::Tab ra2 = oracle::dier_branch(oracle::tab(fa), oracle::tab(fv), unit.audio);
        const oracle::Tab rv2 = oracle::dier_branch(oracle::tab(fv), oracle::tab(fa), unit.video);
        const oracle::Tab rj2 = oracle::refinement(oracle::tab(joint), ra2, rv2, refine);
        dier = std::max({dier, oracle::max_abs_diff(fa2, ra2), oracle::max_abs_diff(fv2, rv2), oracle::max_abs_diff(j2, rj2)});

        const std::vector<Mat<S>> units = {random_mat(k, c, rng), random_mat(k, c, rng)};
        agg = std::max(agg, oracle::max_abs_diff(hafe.forward(units, joint), oracle::hafe_branch(tabs(units), oracle::tab(joint), hafe)));
    }

    CriterionResult r;
    r.id = "A10";
    r.title = "oracle equivalence";
    r.pass = std::max({lgi, fus, dier, agg}) <= 1e-5;
    char buf[256];
    std::snprintf(buf, sizeof buf, "20 Tiny inputs, max abs err lgi %.2e fusion %.2e dier %.2e hafe %.2e", lgi, fus, dier,
                  agg);
    r.detail = buf;
    r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return r;
}

} // namespace

int main(int argc, char** argv)
{
    VerifyOptions opts;
    if (argc > 1 && std::strcmp(argv[1], "-v") == 0)
        opts.progress = [](const std::string& s) { std::fprintf(stderr, "  %s\n", s.c_str()); };

    int failed = 0;
    auto report = [&](const CriterionResult& r) {
        failed += r.pass ? 0 : 1;
        std::printf("%s %s %s: %s (%.1f s)\n", r.pass ? "PASS" : "FAIL", r.id.c_str(), r.title.c_str(), r.detail.c_str(), r.seconds);
        std::fflush(stdout);
    };
    for (const auto& id : criterion_ids())
        report(run_criterion(id, opts));
    report(a10());
    std::printf("%d of %zu criteria failed\n", failed, criterion_ids().size() + 1);
    return failed == 0 ? 0 : 1;
}
