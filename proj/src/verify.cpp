#include "avmae/verify.hpp"

#include "avmae/iavcl.hpp"
#include "avmae/losses.hpp"
#include "avmae/pretrain_graph.hpp"
#include "avmae/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <map>
#include <sstream>

namespace avmae {

namespace {

using Clock = std::chrono::steady_clock;
using M = Mat<double>;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

M random_mat(Index r, Index c, Rng& rng, double scale = 1.0)
{
    M m(r, c);
    for (Index i = 0; i < m.size(); ++i)
        m.data()[i] = normal01(rng) * scale;
    return m;
}

double weighted(const M& y, const M& w) { return y.cwiseProduct(w).sum(); }

template <typename Block>
void jitter(Block& block, Rng& rng, double scale = 0.1)
{
    block.visit("", [&](const std::string&, Param<double>& p) {
        if (!p.trainable() || !p.allocated())
            return;
        for (Index i = 0; i < p.value.size(); ++i)
            p.value.data()[i] += normal01(rng) * scale;
    });
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

struct Suite {
    std::string module;
    GradCheckOptions opts;
    std::vector<GradSuiteEntry> out;

    void add(const std::string& block, const std::function<double()>& objective, std::vector<GradTarget<double>> targets,
             const GradCheckOptions* override_opts = nullptr)
    {
        GradCheckOptions o = override_opts ? *override_opts : opts;
        o.tolerance = opts.tolerance;
        out.push_back({module, block, grad_check<double>(objective, targets, o)});
    }
};

void core_blocks(Suite& s)
{
    const ModelConfig tiny = preset("Tiny");
    const Index c = tiny.encoder_dim, h = tiny.encoder_heads;
    InitContext ctx(1);
    Rng rng(2);
    {
        Linear<double> lin(c, c, ctx);
        LayerNorm<double> ln(c, ctx);
        jitter(ln, rng);
        M x = random_mat(6, c, rng);
        const M w = random_mat(6, c, rng);
        Linear<double>::Cache lc;
        LayerNorm<double>::Cache nc;
        ln.forward(lin.forward(x, &lc), &nc);
        const M dx = lin.backward(lc, ln.backward(nc, w));
        auto t = parameter_targets(lin, "linear");
        for (auto& e : parameter_targets(ln, "norm"))
            t.push_back(e);
        t.push_back({"input", &x, dx});
        s.add("linear+layer_norm", [&] { return weighted(ln.forward(lin.forward(x)), w); }, t);
    }
    {
        Attention<double> att(c, h, ctx);
        M q = random_mat(5, c, rng), kv = random_mat(9, c, rng);
        const M w = random_mat(5, c, rng);
        Attention<double>::Cache cc;
        att.forward(q, kv, &cc);
        auto [dq, dkv] = att.backward(cc, w);
        auto t = parameter_targets(att);
        t.push_back({"query", &q, dq});
        t.push_back({"kv", &kv, dkv});
        s.add("cross_attention", [&] { return weighted(att.forward(q, kv), w); }, t);

        zero_grads(att);
        Attention<double>::Cache sc;
        att.forward_self(q, &sc);
        const M dx = att.backward_self(sc, w);
        auto ts = parameter_targets(att);
        ts.push_back({"x", &q, dx});
        s.add("self_attention", [&] { return weighted(att.forward_self(q), w); }, ts);
    }
    {
        TransformerBlock<double> blk(c, h, tiny.mlp_ratio, ctx);
        jitter(blk, rng);
        M x = random_mat(7, c, rng);
        const M w = random_mat(7, c, rng);
        TransformerBlock<double>::Cache cc;
        blk.forward(x, &cc);
        const M dx = blk.backward(cc, w);
        auto t = parameter_targets(blk);
        t.push_back({"x", &x, dx});
        s.add("transformer_block", [&] { return weighted(blk.forward(x), w); }, t);
    }
    {
        ConvBnPrelu<double> blk(c, ctx);
        jitter(blk, rng);
        M x = random_mat(8, c, rng);
        const M w = random_mat(8, c, rng);
        for (Mode mode : {Mode::train, Mode::eval}) {
            if (mode == Mode::eval) {
                ConvBnPrelu<double>::Cache warm;
                blk.forward(random_mat(8, c, rng), Mode::train, &warm);
                blk.update_running(warm.stats);
            }
            zero_grads(blk);
            ConvBnPrelu<double>::Cache cc;
            blk.forward(x, mode, &cc);
            const M dx = blk.backward(cc, w);
            auto t = parameter_targets(blk);
            t.push_back({"x", &x, dx});
            s.add(mode == Mode::train ? "conv_bn_prelu.train" : "conv_bn_prelu.eval",
                  [&, mode] { return weighted(blk.forward(x, mode), w); }, t);
        }
    }
}

void embedding_blocks(Suite& s)
{
    const ModelConfig tiny = preset("Tiny");
    InitContext ctx(3);
    Rng rng(4);
    for (Modality m : {Modality::video, Modality::audio}) {
        PatchEmbed<double> pe(m, modality_grid(tiny, m), modality_patch_dim(tiny, m), tiny.encoder_dim, ctx);
        const Index n = modality_grid(tiny, m).size();
        const M patches = random_mat(n, modality_patch_dim(tiny, m), rng);
        const std::vector<Index> rows = {0, 2, n - 1};
        const M w = random_mat(3, tiny.encoder_dim, rng);
        PatchEmbed<double>::Cache cc;
        pe.forward(patches, rows, &cc);
        pe.backward(cc, w);
        s.add(std::string("patch_embed.") + to_string(m), [&] { return weighted(pe.forward(patches, rows), w); }, parameter_targets(pe));
    }
}

void lgi_blocks(Suite& s)
{
    const ModelConfig tiny = preset("Tiny");
    const Index c = tiny.encoder_dim;
    InitContext ctx(5);
    Rng rng(6);
    for (bool global : {false, true}) {
        LgiLayer<double> layer(c, tiny.encoder_heads, tiny.mlp_ratio, global, ctx);
        jitter(layer, rng);
        const MaskPair masks = make_mask_pair(tiny, Modality::video, rng);
        const auto rows = masks.visible();
        const RegionPartition part = partition(tiny.video_grid(), tiny.video_region_grid(), rows);
        const Index n = static_cast<Index>(rows.size()), k = tiny.video_regions();
        M locals = random_mat(n, c, rng), regions = random_mat(k, c, rng);
        const M wl = random_mat(n, c, rng), wr = random_mat(k, c, rng);
        LgiLayer<double>::Cache cc;
        layer.forward({locals, regions}, part, &cc);
        const LayerState<double> g = layer.backward(cc, part, {wl, wr});
        auto t = parameter_targets(layer);
        t.push_back({"locals", &locals, g.locals});
        t.push_back({"regions", &regions, g.regions});
        s.add(global ? "lgi_layer.global_stage4" : "lgi_layer.regional_stage4", [&] {
            const auto o = layer.forward({locals, regions}, part);
            return weighted(o.locals, wl) + weighted(o.regions, wr);
        }, t);
    }
    {
        LgiEncoder<double> enc(tiny, Modality::audio, ctx);
        jitter(enc, rng);
        const MaskPair masks = make_mask_pair(tiny, Modality::audio, rng);
        const auto rows = masks.visible();
        const Index n = static_cast<Index>(rows.size());
        M x = random_mat(n, c, rng);
        const auto out = enc.forward(x, rows);
        EncoderGrad<double> w;
        for (const auto& sn : out.snapshots)
            w.snapshots.push_back(random_mat(sn.rows(), sn.cols(), rng));
        w.locals = random_mat(n, c, rng);
        for (const auto& sk : out.skip_locals)
            w.skip_locals.push_back(random_mat(sk.rows(), sk.cols(), rng));
        for (std::size_t i = 0; i < out.pooled.size(); ++i)
            w.pooled.push_back(random_mat(1, c, rng));
        LgiEncoder<double>::Cache cc;
        enc.forward(x, rows, &cc);
        const M dx = enc.backward(cc, w);
        auto t = parameter_targets(enc);
        t.push_back({"tokens", &x, dx});
        s.add("encoder", [&] {
            const auto o = enc.forward(x, rows);
            double v = weighted(o.locals, w.locals);
            for (std::size_t i = 0; i < o.snapshots.size(); ++i)
                v += weighted(o.snapshots[i], w.snapshots[i]);
            for (std::size_t i = 0; i < o.skip_locals.size(); ++i)
                v += weighted(o.skip_locals[i], w.skip_locals[i]) + weighted(o.pooled[i], w.pooled[i]);
            return v;
        }, t);
    }
}

void pretrain_blocks(Suite& s)
{
    ModelConfig tiny = preset("Tiny");
    const Index c = tiny.encoder_dim;
    InitContext ctx(7);
    Rng rng(8);
    {
        FusionBlock<double> blk(c, tiny.fusion_heads, tiny.mlp_ratio, ctx);
        jitter(blk, rng);
        M v = random_mat(6, c, rng), a = random_mat(2, c, rng);
        const M wv = random_mat(6, c, rng), wa = random_mat(2, c, rng);
        FusionBlock<double>::Cache cc;
        blk.forward({v, a}, &cc);
        const auto g = blk.backward(cc, {wv, wa});
        auto t = parameter_targets(blk);
        t.push_back({"video", &v, g.video});
        t.push_back({"audio", &a, g.audio});
        s.add("fusion_block", [&] {
            const auto o = blk.forward({v, a});
            return weighted(o.video, wv) + weighted(o.audio, wa);
        }, t);
    }
    for (Modality m : {Modality::video, Modality::audio}) {
        Decoder<double> dec(tiny, m, ctx);
        jitter(dec, rng);
        const MaskPair masks = make_mask_pair(tiny, m, rng);
        const Index n = static_cast<Index>(masks.visible().size());
        M lat = random_mat(n, c, rng);
        std::vector<M> skips;
        for (std::size_t i = 0; i < tiny.skip_indices.size(); ++i)
            skips.push_back(random_mat(n, c, rng));
        const M pred = dec.forward(lat, masks, skips);
        const M w = random_mat(pred.rows(), pred.cols(), rng);
        Decoder<double>::Cache cc;
        dec.forward(lat, masks, skips, &cc);
        const DecoderGrad<double> g = dec.backward(cc, w);
        auto t = parameter_targets(dec);
        t.push_back({"latents", &lat, g.latents});
        for (std::size_t i = 0; i < skips.size(); ++i)
            t.push_back({"skip" + std::to_string(i), &skips[i], g.skip_locals[i]});
        s.add(std::string("decoder.") + to_string(m), [&] { return weighted(dec.forward(lat, masks, skips), w); }, t);
    }
    {
        // gentler temperature so the contrastive term is probed away from saturation
        tiny.contrastive_weight = 0.3;
        tiny.contrastive_temperature = 0.5;
        PretrainModel<double> model(tiny, ctx);
        jitter(model, rng, 0.05);
        std::vector<RawClip> clips;
        std::vector<MaskPair> vm, am;
        for (int i = 0; i < 3; ++i) {
            clips.push_back(random_clip(tiny, rng));
            vm.push_back(make_mask_pair(tiny, Modality::video, rng));
            am.push_back(make_mask_pair(tiny, Modality::audio, rng));
        }
        auto forward = [&] {
            std::vector<PretrainSample<double>> out;
            for (std::size_t i = 0; i < clips.size(); ++i)
                out.push_back(model.forward_sample(clips[i], vm[i], am[i]));
            return out;
        };
        zero_grads(model);
        const auto samples = forward();
        std::vector<std::vector<RowVec<double>>> dv, da;
        pretrain_losses(tiny, samples, &dv, &da);
        for (std::size_t i = 0; i < samples.size(); ++i)
            model.backward_sample(samples[i], 1.0 / 3.0, dv[i], da[i]);
        GradCheckOptions sparse = s.opts;
        sparse.max_probes = 6;
        s.add("pretrain_objective", [&] { return pretrain_losses(tiny, forward()).total; }, parameter_targets(model), &sparse);
    }
}

void loss_blocks(Suite& s)
{
    const ModelConfig tiny = preset("Tiny");
    Rng rng(9);
    {
        const MaskPair masks = make_mask_pair(tiny, Modality::video, rng);
        const Index n = tiny.video_grid().size(), d = tiny.video_patch_dim();
        const M targets = normalize_targets(random_mat(n, d, rng));
        M pred = random_mat(masks.target_count(), d, rng);
        std::vector<GradTarget<double>> t = {{"prediction", &pred, masked_mse(targets, pred, masks).grad}};
        s.add("masked_mse", [&] { return masked_mse(targets, pred, masks).value; }, t);
    }
    {
        M a = random_mat(6, tiny.encoder_dim, rng), v = random_mat(6, tiny.encoder_dim, rng);
        const auto cl = info_nce(a, v, tiny.contrastive_temperature);
        std::vector<GradTarget<double>> t = {{"audio", &a, cl.grad_audio}, {"video", &v, cl.grad_video}};
        s.add("info_nce", [&] { return info_nce(a, v, tiny.contrastive_temperature).value; }, t);
    }
    {
        M logits = random_mat(1, 7, rng, 2.0);
        std::vector<GradTarget<double>> t = {{"logits", &logits, cross_entropy_ls<double>(logits.row(0), 3, 0.1).grad}};
        s.add("cross_entropy", [&] { return cross_entropy_ls<double>(logits.row(0), 3, 0.1).value; }, t);
    }
    {
        M p = random_mat(2, 3, rng);
        const M y = random_mat(2, 3, rng);
        std::vector<GradTarget<double>> t = {{"prediction", &p, mse(p, y).grad}};
        s.add("mse", [&] { return mse(p, y).value; }, t);
    }
}

void iavcl_blocks(Suite& s)
{
    const ModelConfig tiny = preset("Tiny");
    const Index c = tiny.encoder_dim, k = tiny.video_regions();
    const Index layers = tiny.encoder_depth;
    InitContext ctx(10);
    Rng rng(11);
    M a = random_mat(k, c, rng), v = random_mat(k, c, rng), j = random_mat(k, c, rng);
    const M w = random_mat(k, c, rng);
    {
        DierBranch<double> d(c, tiny.encoder_heads, ctx);
        jitter(d, rng);
        DierBranch<double>::Cache cc;
        d.forward(a, v, &cc);
        const auto [da, dv] = d.backward(cc, w);
        auto t = parameter_targets(d);
        t.push_back({"own", &a, da});
        t.push_back({"other", &v, dv});
        s.add("dier_branch", [&] { return weighted(d.forward(a, v), w); }, t);
    }
    {
        Refinement<double> r(c, ctx);
        jitter(r, rng);
        Refinement<double>::Cache cc;
        r.forward(j, a, v, Mode::train, &cc);
        const auto g = r.backward(cc, w);
        auto t = parameter_targets(r);
        t.push_back({"joint", &j, g.joint});
        t.push_back({"audio", &a, g.audio});
        t.push_back({"video", &v, g.video});
        s.add("refinement", [&] { return weighted(r.forward(j, a, v, Mode::train), w); }, t);
    }
    {
        HafeBranch<double> hb(c, tiny.encoder_heads, tiny.mlp_ratio, ctx);
        jitter(hb, rng);
        std::vector<M> units;
        for (Index l = 0; l < layers; ++l)
            units.push_back(random_mat(k, c, rng));
        HafeBranch<double>::Cache cc;
        hb.forward(units, j, &cc);
        const auto g = hb.backward(cc, w);
        auto t = parameter_targets(hb);
        t.push_back({"joint", &j, g.joint});
        for (std::size_t l = 0; l < units.size(); ++l)
            t.push_back({"unit" + std::to_string(l), &units[l], g.units[l]});
        s.add("hafe_branch", [&] { return weighted(hb.forward(units, j), w); }, t);
    }
    {
        Iavcl<double> m(tiny, ctx);
        jitter(m, rng);
        std::vector<M> as, vs;
        for (Index l = 0; l < layers; ++l) {
            as.push_back(random_mat(k, c, rng));
            vs.push_back(random_mat(k, c, rng));
        }
        const M wa = random_mat(k, c, rng), wv = random_mat(k, c, rng);
        Iavcl<double>::Cache cc;
        m.forward(as, vs, Mode::train, &cc);
        const auto g = m.backward(cc, {wa, wv});
        auto t = parameter_targets(m);
        for (std::size_t l = 0; l < as.size(); ++l) {
            t.push_back({"audio" + std::to_string(l), &as[l], g.audio_snapshots[l]});
            t.push_back({"video" + std::to_string(l), &vs[l], g.video_snapshots[l]});
        }
        s.add("iavcl", [&] {
            const auto o = m.forward(as, vs, Mode::train);
            return weighted(o.audio, wa) + weighted(o.video, wv);
        }, t);
    }
    for (bool regress : {false, true}) {
        TaskHead<double> head(c, 3, regress, ctx);
        jitter(head, rng);
        IavclOutput<double> in{random_mat(k, c, rng, 2.0), random_mat(k, c, rng, 2.0)};
        const M wh = random_mat(1, 3, rng);
        TaskHead<double>::Cache cc;
        head.forward(in, &cc);
        const auto g = head.backward(cc, wh);
        auto t = parameter_targets(head);
        t.push_back({"audio", &in.audio, g.audio});
        t.push_back({"video", &in.video, g.video});
        s.add(regress ? "task_head.regression" : "task_head.classification", [&] { return weighted(head.forward(in), wh); }, t);
    }
    {
        FinetuneModel<double> model(tiny, 3, false, ctx);
        jitter(model, rng, 0.05);
        const RawClip clip = random_clip(tiny, rng);
        const M wo = random_mat(1, 3, rng);
        zero_grads(model);
        model.backward_sample(model.forward_sample(clip, Mode::train), wo);
        // batch norm over a handful of region rows is sharply curved
        GradCheckOptions fine = s.opts;
        fine.epsilon = 1e-6;
        fine.max_probes = 6;
        s.add("finetune_model", [&] { return weighted(model.forward_sample(clip, Mode::train).output, wo); },
              parameter_targets(model), &fine);
    }
}

} // namespace

const std::vector<std::string>& grad_modules()
{
    static const std::vector<std::string> names = {"core_numerics", "embedding", "lgi_encoder", "pretrain_graph", "losses", "iavcl"};
    return names;
}

std::vector<GradSuiteEntry> run_grad_suite(const std::string& module, double tolerance)
{
    const auto& names = grad_modules();
    if (module != "all" && std::find(names.begin(), names.end(), module) == names.end())
        throw ConfigError("unknown gradient module '" + module + "'");
    std::vector<GradSuiteEntry> out;
    for (const auto& name : names) {
        if (module != "all" && module != name)
            continue;
        Suite s;
        s.module = name;
        s.opts.tolerance = tolerance;
        s.opts.seed = 17;
        if (name == "core_numerics")
            core_blocks(s);
        else if (name == "embedding")
            embedding_blocks(s);
        else if (name == "lgi_encoder")
            lgi_blocks(s);
        else if (name == "pretrain_graph")
            pretrain_blocks(s);
        else if (name == "losses")
            loss_blocks(s);
        else
            iavcl_blocks(s);
        for (auto& e : s.out)
            out.push_back(std::move(e));
    }
    return out;
}

ParamBreakdown count_preset_parameters(const ModelConfig& cfg)
{
    InitContext ctx(0, false);
    PretrainModel<float> pre(cfg, ctx);
    Iavcl<float> iav(cfg, ctx);
    ParamBreakdown b;
    b.encoders = count_parameters(pre.video_embed) + count_parameters(pre.audio_embed) + count_parameters(pre.video_encoder) +
                 count_parameters(pre.audio_encoder);
    b.fusion = count_parameters(pre.fusion);
    b.decoders = count_parameters(pre.video_decoder) + count_parameters(pre.audio_decoder);
    b.iavcl = count_parameters(iav);
    return b;
}

std::string shapes_report(const ModelConfig& cfg)
{
    require_valid(cfg);
    std::ostringstream os;
    auto join = [](const std::vector<int>& v) {
        std::string s;
        for (std::size_t i = 0; i < v.size(); ++i)
            s += (i ? "," : "") + std::to_string(v[i]);
        return s;
    };
    const Grid3 vg = cfg.video_grid(), ag = cfg.audio_grid();
    os << "preset " << cfg.name << '\n';
    os << "encoder dim " << cfg.encoder_dim << " heads " << cfg.encoder_heads << " depth " << cfg.encoder_depth << " mlp "
       << cfg.encoder_dim * cfg.mlp_ratio << " skip " << join(cfg.skip_indices) << '\n';
    os << "decoder dim " << cfg.decoder_dim << " heads " << cfg.decoder_heads << " depth " << cfg.decoder_depth << '\n';
    os << "fusion heads " << cfg.fusion_heads << " depth " << cfg.fusion_depth << '\n';
    os << "iavcl units " << cfg.num_dier_units << " layers " << cfg.encoder_depth << '\n';

    for (Modality m : {Modality::video, Modality::audio}) {
        const bool video = m == Modality::video;
        const Grid3 g = video ? vg : ag;
        const Grid3 r = video ? cfg.video_region_grid() : cfg.audio_region_grid();
        const Index n = g.size();
        const double ratio = video ? cfg.video_mask_ratio : cfg.audio_mask_ratio;
        const double dratio = video ? cfg.video_decoder_ratio : cfg.audio_decoder_ratio;
        const Index masked = static_cast<Index>(round_half_up(ratio * static_cast<double>(n)));
        const Index visible = n - masked;
        const Index targets = decoder_target_count(n, dratio);
        const DecoderCost cost = decoder_attention_cost(cfg, m);
        const std::string name = to_string(m);
        if (video)
            os << name << " input " << cfg.video_input[0] << 'x' << cfg.video_input[1] << 'x' << cfg.video_input[2] << "x3 tubelet "
               << cfg.video_tubelet[0] << 'x' << cfg.video_tubelet[1] << 'x' << cfg.video_tubelet[2] << " patch_dim "
               << cfg.video_patch_dim() << '\n';
        else
            os << name << " input " << cfg.audio_input[0] << 'x' << cfg.audio_input[1] << " patch " << cfg.audio_patch[0] << 'x'
               << cfg.audio_patch[1] << " patch_dim " << cfg.audio_patch_dim() << '\n';
        os << name << " grid " << g.t << 'x' << g.h << 'x' << g.w << " tokens " << n << '\n';
        os << name << " regions " << r.t << 'x' << r.h << 'x' << r.w << " count " << (video ? cfg.video_regions() : cfg.audio_regions())
           << '\n';
        os << name << " encoder tokens " << visible << " of " << n << " (mask " << ratio << ")\n";
        os << name << " decoder targets " << targets << " sequence " << visible + targets << " (dual) " << n << " (full)\n";
        os << name << " decoder scores " << cost.dual << " (dual) " << cost.full << " (full)\n";
        os << name << " encoder out " << visible << 'x' << cfg.encoder_dim << " regions out "
           << (video ? cfg.video_regions() : cfg.audio_regions()) << 'x' << cfg.encoder_dim << '\n';
    }
    const ParamBreakdown b = count_preset_parameters(cfg);
    char line[160];
    std::snprintf(line, sizeof line, "params encoders %ld fusion %ld decoders %ld iavcl %ld total %ld (%.1fM)\n",
                  static_cast<long>(b.encoders), static_cast<long>(b.fusion), static_cast<long>(b.decoders),
                  static_cast<long>(b.iavcl), static_cast<long>(b.total()), static_cast<double>(b.total()) / 1e6);
    os << line;
    return os.str();
}

namespace {

struct Ctx {
    const VerifyOptions& opts;
    void say(const std::string& s) const
    {
        if (opts.progress)
            opts.progress(s);
    }
};

std::string fmt(const char* f, double a, double b = 0.0, double c = 0.0, double d = 0.0)
{
    char buf[256];
    std::snprintf(buf, sizeof buf, f, a, b, c, d);
    return buf;
}

RunConfig tiny_run(Stage stage, long steps, int batch, std::uint64_t seed)
{
    RunConfig rc;
    rc.model = preset("Tiny");
    rc.train = train_defaults(stage);
    rc.train.batch = batch;
    rc.train.steps = steps;
    rc.train.seed = seed;
    // short runs: warm up over the first 5% of steps at a peak near 3e-3
    rc.train.base_lr = 0.1;
    rc.train.warmup_epochs = rc.train.epochs * 0.05;
    return rc;
}

CriterionResult a1(const Ctx&)
{
    CriterionResult r;
    const ModelConfig b = preset("B");
    bool ok = true;
    Index vis_v = 0, vis_a = 0, tgt_v = 0, tgt_a = 0;
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        Rng rng(seed);
        const MaskPair v = make_mask_pair(b, Modality::video, rng);
        const MaskPair a = make_mask_pair(b, Modality::audio, rng);
        vis_v = static_cast<Index>(v.visible().size());
        vis_a = static_cast<Index>(a.visible().size());
        tgt_v = v.target_count();
        tgt_a = a.target_count();
        ok = ok && vis_v == 80 && vis_a == 24 && tgt_v == 400 && static_cast<Index>(v.encoder_mask.size()) == 800 &&
             static_cast<Index>(a.encoder_mask.size()) == 128;
    }
    r.pass = ok;
    r.detail = "video visible " + std::to_string(vis_v) + "/800, audio visible " + std::to_string(vis_a) +
               "/128, video targets " + std::to_string(tgt_v) + ", audio targets " + std::to_string(tgt_a);
    return r;
}

double pretrain_step_seconds(const ModelConfig& cfg, const std::vector<RawClip>& clips, int reps)
{
    InitContext ctx(3);
    PretrainModel<float> model(cfg, ctx);
    double best = 1e30;
    for (int rep = 0; rep < reps; ++rep) {
        const auto t0 = Clock::now();
        std::vector<PretrainSample<float>> samples;
        for (std::size_t i = 0; i < clips.size(); ++i) {
            Rng rng(derive_seed(11, static_cast<std::uint64_t>(rep), i));
            samples.push_back(model.forward_sample(clips[i], rng));
        }
        std::vector<std::vector<RowVec<float>>> dv, da;
        pretrain_losses(cfg, samples, &dv, &da);
        for (std::size_t i = 0; i < samples.size(); ++i)
            model.backward_sample(samples[i], 1.0f / static_cast<float>(samples.size()), dv[i], da[i]);
        best = std::min(best, seconds_since(t0));
    }
    return best;
}

CriterionResult a2(const Ctx& c)
{
    CriterionResult r;
    const DecoderCost cost = decoder_attention_cost(preset("B"), Modality::video);
    const double ratio = static_cast<double>(cost.dual) / static_cast<double>(cost.full);
    const bool exact = cost.dual == 480 * 480 && cost.full == 800 * 800 && ratio <= 0.36;

    const ModelConfig dual = preset("Tiny");
    // without the decoder mask every encoder-masked token is a target
    ModelConfig full = dual;
    Rng mrng(1);
    const MaskPair mv = make_mask_pair(dual, Modality::video, mrng);
    const MaskPair ma = make_mask_pair(dual, Modality::audio, mrng);
    full.video_decoder_ratio = 1.0 - static_cast<double>(mv.masked_count()) / static_cast<double>(dual.video_grid().size());
    full.audio_decoder_ratio = 1.0 - static_cast<double>(ma.masked_count()) / static_cast<double>(dual.audio_grid().size());
    const Dataset d = gen_synthetic(dual, synthetic_task("pretrain", 5), 8);
    c.say("A2: timing Tiny pretrain steps");
    double t_dual = 1e30, t_full = 1e30;
    for (int round = 0; round < 3; ++round) {
        t_dual = std::min(t_dual, pretrain_step_seconds(dual, d.clips, 5));
        t_full = std::min(t_full, pretrain_step_seconds(full, d.clips, 5));
    }
    r.pass = exact && t_dual < t_full;
    r.detail = "B video decoder scores " + std::to_string(cost.dual) + " vs " + std::to_string(cost.full) +
               fmt(" (%.4fx); Tiny step %.2f ms dual vs %.2f ms full", ratio, t_dual * 1e3, t_full * 1e3);
    return r;
}

CriterionResult a3(const Ctx& c)
{
    CriterionResult r;
    const auto t0 = Clock::now();
    double worst = 0.0;
    std::string worst_name;
    bool ok = true;
    std::size_t blocks = 0;
    for (const auto& m : grad_modules()) {
        c.say("A3: gradient checks for " + m);
        for (const auto& e : run_grad_suite(m, 1e-4)) {
            ++blocks;
            ok = ok && e.report.pass;
            if (e.report.max_rel_error() >= worst) {
                worst = e.report.max_rel_error();
                worst_name = e.module + "/" + e.block;
            }
        }
    }
    const double secs = seconds_since(t0);
    r.pass = ok && secs <= 300.0;
    r.detail = std::to_string(blocks) + " blocks, worst " + worst_name + fmt(" rel err %.2e, %.1f s", worst, secs);
    return r;
}

CriterionResult a4(const Ctx& c)
{
    CriterionResult r;
    const RunConfig rc = tiny_run(Stage::pretrain, 200, 8, 1);
    const Dataset d = gen_synthetic(rc.model, synthetic_task("pretrain", 3), 8);
    StageRequest req;
    req.stage = Stage::pretrain;
    req.config = rc;
    req.data = &d;
    req.threads = c.opts.threads;
    c.say("A4: 200 pretraining steps on 8 clips");
    const StageResult res = run_stage(req);
    const double at10 = res.log[9].loss;
    double tail = 0.0;
    for (std::size_t i = res.log.size() - 10; i < res.log.size(); ++i)
        tail += res.log[i].loss / 10.0;
    const double drop = 1.0 - tail / at10;

    // contrastive term of a fresh model on a batch of 16
    const ModelConfig tiny = preset("Tiny");
    InitContext ctx(derive_seed(1, 0x1417));
    PretrainModel<float> model(tiny, ctx);
    const Dataset big = gen_synthetic(tiny, synthetic_task("pretrain", 4), 16);
    const PretrainLosses<float> l = pretrain_forward(model, big.clips, 9);
    const double target = std::log(16.0);
    double worst = 0.0;
    for (float v : l.info_nce)
        worst = std::max(worst, std::abs(v - target) / target);

    r.pass = drop >= 0.5 && worst <= 0.15;
    r.detail = fmt("loss %.4f at step 10, %.4f over steps 191-200 (%.1f%% drop); ", at10, tail, 100.0 * drop) +
               fmt("InfoNCE at init within %.1f%% of ln 16", 100.0 * worst);
    return r;
}

CriterionResult a5(const Ctx& c)
{
    CriterionResult r;
    RunConfig rc = tiny_run(Stage::finetune, 300, 8, 1);
    rc.train.eval_every = 10;
    const Dataset d = gen_synthetic(rc.model, synthetic_task("target", 5), 64);
    StageRequest req;
    req.stage = Stage::finetune;
    req.config = rc;
    req.data = &d;
    req.allow_scratch = true;
    req.threads = c.opts.threads;
    req.target_accuracy = 0.95;
    req.stop_at_target = true;
    c.say("A5: fine-tuning from scratch on the noise-free 2-class task");
    const StageResult clean = run_stage(req);

    Dataset shuffled = gen_synthetic(rc.model, synthetic_task("target", 5), 256);
    Rng rng(9);
    shuffle(shuffled.labels, rng);
    req.data = &shuffled;
    req.stop_at_target = false;
    c.say("A5: fine-tuning on shuffled labels");
    const StageResult noise = run_stage(req);

    const bool reached = clean.steps_to_target.has_value();
    const double shuffled_acc = noise.final_accuracy.value_or(1.0);
    r.pass = reached && shuffled_acc <= 0.55;
    r.detail = (reached ? "95% train accuracy at step " + std::to_string(*clean.steps_to_target) : std::string("95% not reached")) +
               fmt("; shuffled labels end at %.1f%% after 300 steps", 100.0 * shuffled_acc);
    return r;
}

CriterionResult a6(const Ctx& c)
{
    CriterionResult r;
    const ModelConfig tiny = preset("Tiny");
    constexpr long budget = 150;
    std::vector<double> ratios;
    std::string runs;
    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
        c.say("A6: seed " + std::to_string(seed));
        const Dataset pre_data = gen_synthetic(tiny, synthetic_task("pretrain", 100 + seed), 64);
        StageRequest pre;
        pre.stage = Stage::pretrain;
        pre.config = tiny_run(Stage::pretrain, 200, 8, seed);
        pre.data = &pre_data;
        pre.threads = c.opts.threads;
        const Checkpoint pre_ckpt = run_stage(pre).checkpoint;

        const Dataset post_data = gen_synthetic(tiny, synthetic_task("post", 200 + seed), 96);
        StageRequest post;
        post.stage = Stage::post_pretrain;
        post.config = tiny_run(Stage::post_pretrain, 100, 8, seed);
        post.config.train.num_classes = 3;
        post.config.train.eval_every = 0;
        post.data = &post_data;
        post.init = &pre_ckpt;
        post.threads = c.opts.threads;
        const Checkpoint post_ckpt = run_stage(post).checkpoint;

        SyntheticTask target = synthetic_task("target", 300 + seed);
        target.noise = {1.5};
        const Dataset target_data = gen_synthetic(tiny, target, 128);
        auto steps_to_90 = [&](const Checkpoint* init) {
            StageRequest f;
            f.stage = Stage::finetune;
            f.config = tiny_run(Stage::finetune, budget, 8, seed);
            f.config.train.eval_every = 1;
            f.data = &target_data;
            f.init = init;
            f.allow_scratch = init == nullptr;
            f.stop_at_target = true;
            f.target_accuracy = 0.9;
            f.threads = c.opts.threads;
            const StageResult res = run_stage(f);
            return res.steps_to_target ? *res.steps_to_target : budget + 1;
        };
        const long psi = steps_to_90(&post_ckpt);
        const long scratch = steps_to_90(nullptr);
        ratios.push_back(static_cast<double>(psi) / static_cast<double>(scratch));
        runs += (runs.empty() ? "" : ", ") + std::to_string(psi) + "/" + std::to_string(scratch);
    }
    std::vector<double> sorted = ratios;
    std::sort(sorted.begin(), sorted.end());
    const double median = sorted[sorted.size() / 2];
    r.pass = median <= 0.5;
    r.detail = "steps to 90% (PSI/scratch) " + runs + fmt("; median ratio %.3f", median);
    return r;
}

CriterionResult a7(const Ctx&)
{
    CriterionResult r;
    const std::map<std::string, double> reference = {{"B", 169e6}, {"L", 303e6}, {"H", 521e6}};
    r.pass = true;
    for (const auto& [name, ref] : reference) {
        const double n = static_cast<double>(count_preset_parameters(preset(name)).total());
        const double dev = n / ref - 1.0;
        r.pass = r.pass && std::abs(dev) <= 0.15;
        r.detail += (r.detail.empty() ? "" : ", ") + name + fmt(" %.1fM (%+.1f%%)", n / 1e6, 100.0 * dev);
    }
    return r;
}

CriterionResult a8(const Ctx&)
{
    CriterionResult r;
    struct Row {
        std::string name;
        int dim, heads, depth, ddim, dheads, ddepth, fheads, fdepth;
        std::string skip;
    };
    const std::vector<Row> table = {
        {"B", 512, 8, 10, 384, 6, 4, 8, 2, "3,6,9"},
        {"L", 640, 10, 12, 512, 8, 4, 10, 2, "3,7,11"},
        {"H", 768, 12, 15, 640, 8, 4, 12, 2, "4,9,14"},
    };
    r.pass = true;
    for (const auto& row : table) {
        const std::string out = shapes_report(preset(row.name));
        const std::vector<std::string> want = {
            "encoder dim " + std::to_string(row.dim) + " heads " + std::to_string(row.heads) + " depth " + std::to_string(row.depth) +
                " mlp " + std::to_string(row.dim * 4) + " skip " + row.skip + "\n",
            "decoder dim " + std::to_string(row.ddim) + " heads " + std::to_string(row.dheads) + " depth " + std::to_string(row.ddepth) +
                "\n",
            "fusion heads " + std::to_string(row.fheads) + " depth " + std::to_string(row.fdepth) + "\n",
        };
        for (const auto& w : want)
            if (out.find(w) == std::string::npos) {
                r.pass = false;
                r.detail += row.name + " missing '" + w.substr(0, w.size() - 1) + "'; ";
            }
    }
    if (r.pass)
        r.detail = "B, L and H rows match (dims, heads, depths, skip indices)";
    return r;
}

std::string log_text(const StageResult& r)
{
    std::string out;
    for (const auto& m : r.log)
        out += to_jsonl(m) + "\n";
    return out;
}

CriterionResult a9(const Ctx& c)
{
    CriterionResult r;
    const RunConfig rc = tiny_run(Stage::pretrain, 6, 8, 4);
    const Dataset d = gen_synthetic(rc.model, synthetic_task("pretrain", 6), 16);
    auto run = [&](int threads) {
        StageRequest req;
        req.stage = Stage::pretrain;
        req.config = rc;
        req.data = &d;
        req.threads = threads;
        return run_stage(req);
    };
    c.say("A9: repeated and multi-threaded runs");
    const StageResult a = run(1);
    const StageResult b = run(1);
    const StageResult t = run(4);
    const std::string bytes = serialize_checkpoint(a.checkpoint);
    const bool same_logs = log_text(a) == log_text(b) && serialize_checkpoint(b.checkpoint) == bytes;
    const bool threads_same = log_text(a) == log_text(t) && serialize_checkpoint(t.checkpoint) == bytes;
    const bool round_trip = serialize_checkpoint(parse_checkpoint(bytes)) == bytes;

    r.pass = same_logs && threads_same && round_trip;
    r.detail = std::string("repeat logs ") + (same_logs ? "identical" : "DIFFER") + ", 1 vs 4 threads " +
               (threads_same ? "identical" : "DIFFER") + ", checkpoint round trip " + (round_trip ? "identical" : "DIFFERS");
    return r;
}

} // namespace

const std::vector<std::string>& criterion_ids()
{
    static const std::vector<std::string> ids = {"A1", "A2", "A3", "A4", "A5", "A6", "A7", "A8", "A9"};
    return ids;
}

CriterionResult run_criterion(const std::string& id, const VerifyOptions& opts)
{
    static const std::map<std::string, std::pair<std::string, CriterionResult (*)(const Ctx&)>> table = {
        {"A1", {"mask arithmetic", a1}},
        {"A2", {"decoder cost with dual masking", a2}},
        {"A3", {"gradient checks", a3}},
        {"A4", {"pretraining sanity", a4}},
        {"A5", {"fine-tuning sanity", a5}},
        {"A6", {"progressive training benefit", a6}},
        {"A7", {"parameter counts", a7}},
        {"A8", {"configuration table", a8}},
        {"A9", {"determinism and persistence", a9}},
    };
    const auto it = table.find(id);
    if (it == table.end())
        throw ConfigError("unknown criterion '" + id + "'");
    const Ctx c{opts};
    const auto t0 = Clock::now();
    CriterionResult r;
    try {
        r = it->second.second(c);
    } catch (const std::exception& e) {
        r.pass = false;
        r.detail = std::string("error: ") + e.what();
    }
    r.id = id;
    r.title = it->second.first;
    r.seconds = seconds_since(t0);
    return r;
}

} // namespace avmae
