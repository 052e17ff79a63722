#include "avmae/iavcl.hpp"

namespace avmae {

template <typename Scalar>
RowVec<Scalar> layer_weights(const Param<Scalar>& logits)
{
    const Mat<Scalar> p = softmax_rows(logits.value);
    return p.row(0);
}

template <typename Scalar>
Aggregated<Scalar> aggregate_layers(const std::vector<Mat<Scalar>>& audio_snapshots, const std::vector<Mat<Scalar>>& video_snapshots,
                                    const RowVec<Scalar>& audio_weights, const RowVec<Scalar>& video_weights)
{
    const auto n = audio_snapshots.size();
    if (n == 0 || video_snapshots.size() != n || static_cast<std::size_t>(audio_weights.cols()) != n ||
        static_cast<std::size_t>(video_weights.cols()) != n)
        throw ShapeError("aggregate_layers: snapshot count mismatch (" + std::to_string(audio_snapshots.size()) + " audio, " +
                         std::to_string(video_snapshots.size()) + " video, " + std::to_string(audio_weights.cols()) + " weights)");
    const Index k = audio_snapshots[0].rows();
    const Index c = audio_snapshots[0].cols();
    for (std::size_t l = 0; l < n; ++l)
        require_shape(audio_snapshots[l].rows() == k && audio_snapshots[l].cols() == c && video_snapshots[l].rows() == k &&
                          video_snapshots[l].cols() == c,
                      "aggregate_layers: snapshot " + std::to_string(l) + " shape");
    Aggregated<Scalar> out;
    out.joint = Mat<Scalar>::Zero(k, 2 * c);
    out.audio_mean = Mat<Scalar>::Zero(k, c);
    out.video_mean = Mat<Scalar>::Zero(k, c);
    for (std::size_t l = 0; l < n; ++l) {
        const auto li = static_cast<Index>(l);
        out.joint.leftCols(c) += audio_weights(li) * audio_snapshots[l];
        out.joint.rightCols(c) += video_weights(li) * video_snapshots[l];
        out.audio_mean += audio_snapshots[l];
        out.video_mean += video_snapshots[l];
    }
    out.audio_mean /= static_cast<Scalar>(n);
    out.video_mean /= static_cast<Scalar>(n);
    return out;
}

// ---------------------------------------------------------------- DiER branch

template <typename Scalar>
DierBranch<Scalar>::DierBranch(Index dim, Index heads, InitContext& ctx)
    : self_norm(dim, ctx), cross_norm_q(dim, ctx), cross_norm_kv(dim, ctx), self_attn(dim, heads, ctx), cross_attn(dim, heads, ctx),
      gate_self(2 * dim, dim, ctx), gate_cross(2 * dim, dim, ctx)
{
}

template <typename Scalar>
Mat<Scalar> DierBranch<Scalar>::forward(const Mat<Scalar>& own, const Mat<Scalar>& other, Cache* cache) const
{
    require_shape(own.rows() == other.rows() && own.cols() == other.cols(), "dier: modality shapes differ");
    Cache* c = cache;
    const Index d = own.cols();
    Mat<Scalar> fs = own + self_attn.forward_self(self_norm.forward(own, c ? &c->self_norm : nullptr), c ? &c->self_attn : nullptr);
    Mat<Scalar> fc = own + cross_attn.forward(cross_norm_q.forward(own, c ? &c->cross_norm_q : nullptr),
                                              cross_norm_kv.forward(other, c ? &c->cross_norm_kv : nullptr), c ? &c->cross_attn : nullptr);
    Mat<Scalar> sc(own.rows(), 2 * d);
    sc << fs, fc;
    Mat<Scalar> gs = sigmoid(gate_self.forward(sc, c ? &c->gate_self : nullptr));
    Mat<Scalar> gc = sigmoid(gate_cross.forward(sc, c ? &c->gate_cross : nullptr));
    Mat<Scalar> y = gs.cwiseProduct(fs) + gc.cwiseProduct(fc);
    if (cache) {
        cache->fs = std::move(fs);
        cache->fc = std::move(fc);
        cache->gs = std::move(gs);
        cache->gc = std::move(gc);
        cache->valid = true;
    }
    return y;
}

template <typename Scalar>
std::pair<Mat<Scalar>, Mat<Scalar>> DierBranch<Scalar>::backward(const Cache& cache, const Mat<Scalar>& dy)
{
    if (!cache.valid)
        throw StateError("dier: backward called before forward");
    const Index d = dy.cols();
    const Mat<Scalar> dzs = dy.cwiseProduct(cache.fs).cwiseProduct(cache.gs.cwiseProduct((Scalar(1) - cache.gs.array()).matrix()));
    const Mat<Scalar> dzc = dy.cwiseProduct(cache.fc).cwiseProduct(cache.gc.cwiseProduct((Scalar(1) - cache.gc.array()).matrix()));
    const Mat<Scalar> dsc = gate_self.backward(cache.gate_self, dzs) + gate_cross.backward(cache.gate_cross, dzc);
    const Mat<Scalar> dfs = dy.cwiseProduct(cache.gs) + dsc.leftCols(d);
    const Mat<Scalar> dfc = dy.cwiseProduct(cache.gc) + dsc.rightCols(d);

    Mat<Scalar> down = dfs + dfc + self_norm.backward(cache.self_norm, self_attn.backward_self(cache.self_attn, dfs));
    auto [dq, dkv] = cross_attn.backward(cache.cross_attn, dfc);
    down += cross_norm_q.backward(cache.cross_norm_q, dq);
    Mat<Scalar> dother = cross_norm_kv.backward(cache.cross_norm_kv, dkv);
    return {std::move(down), std::move(dother)};
}

template <typename Scalar>
void DierBranch<Scalar>::visit(const std::string& prefix, const ParamVisitor<Scalar>& f)
{
    self_norm.visit(join_name(prefix, "self_norm"), f);
    self_attn.visit(join_name(prefix, "self_attn"), f);
    cross_norm_q.visit(join_name(prefix, "cross_norm_q"), f);
    cross_norm_kv.visit(join_name(prefix, "cross_norm_kv"), f);
    cross_attn.visit(join_name(prefix, "cross_attn"), f);
    gate_self.visit(join_name(prefix, "gate_self"), f);
    gate_cross.visit(join_name(prefix, "gate_cross"), f);
}

// ---------------------------------------------------------------- refinement

template <typename Scalar>
Refinement<Scalar>::Refinement(Index dim, InitContext& ctx) : attn(dim, 1, ctx), conv(dim, ctx), norm(dim, ctx)
{
}

template <typename Scalar>
Mat<Scalar> Refinement<Scalar>::forward(const Mat<Scalar>& joint, const Mat<Scalar>& audio, const Mat<Scalar>& video, Mode mode,
                                        Cache* cache) const
{
    Cache* c = cache;
    Mat<Scalar> ra = conv.forward(attn.forward(joint, audio, c ? &c->attn_audio : nullptr), mode, c ? &c->conv_audio : nullptr);
    Mat<Scalar> rv = conv.forward(attn.forward(joint, video, c ? &c->attn_video : nullptr), mode, c ? &c->conv_video : nullptr);
    Mat<Scalar> y = norm.forward(joint + ra + rv, c ? &c->norm : nullptr);
    if (cache) {
        cache->residual_audio = std::move(ra);
        cache->residual_video = std::move(rv);
        cache->valid = true;
    }
    return y;
}

template <typename Scalar>
typename Refinement<Scalar>::Grad Refinement<Scalar>::backward(const Cache& cache, const Mat<Scalar>& dy)
{
    if (!cache.valid)
        throw StateError("refinement: backward called before forward");
    const Mat<Scalar> ds = norm.backward(cache.norm, dy);
    Grad g;
    g.joint = ds;
    auto [dqa, da] = attn.backward(cache.attn_audio, conv.backward(cache.conv_audio, ds));
    auto [dqv, dv] = attn.backward(cache.attn_video, conv.backward(cache.conv_video, ds));
    g.joint += dqa + dqv;
    g.audio = std::move(da);
    g.video = std::move(dv);
    return g;
}

template <typename Scalar>
void Refinement<Scalar>::visit(const std::string& prefix, const ParamVisitor<Scalar>& f)
{
    attn.visit(join_name(prefix, "attn"), f);
    conv.visit(join_name(prefix, "conv"), f);
    norm.visit(join_name(prefix, "norm"), f);
}

// ---------------------------------------------------------------- HAFE

template <typename Scalar>
HafeBranch<Scalar>::HafeBranch(Index dim, Index heads, Index mlp_ratio, InitContext& ctx)
    : unit_norm(dim, ctx), unit_ffn_norm(dim, ctx), unit_attn(dim, heads, ctx), unit_ffn(dim, dim * mlp_ratio, ctx), gate(dim, dim, ctx),
      fb_norm_q(dim, ctx), fb_norm_kv(dim, ctx), out_ffn_norm(dim, ctx), fb_attn(dim, heads, ctx), out_ffn(dim, dim * mlp_ratio, ctx)
{
}

template <typename Scalar>
Mat<Scalar> HafeBranch<Scalar>::forward(const std::vector<Mat<Scalar>>& units, const Mat<Scalar>& joint, Cache* cache) const
{
    if (units.empty())
        throw ShapeError("hafe: no unit outputs");
    const Index n = static_cast<Index>(units.size());
    const Index k = units[0].rows();
    const Index c = units[0].cols();
    for (const auto& u : units)
        require_shape(u.rows() == k && u.cols() == c, "hafe: unit output shapes differ");
    if (cache) {
        cache->unit_norm.assign(static_cast<std::size_t>(k), {});
        cache->unit_ffn_norm.assign(static_cast<std::size_t>(k), {});
        cache->unit_attn.assign(static_cast<std::size_t>(k), {});
        cache->unit_ffn.assign(static_cast<std::size_t>(k), {});
        cache->gate.assign(static_cast<std::size_t>(n), {});
        cache->gates.assign(static_cast<std::size_t>(n), {});
        cache->units = n;
        cache->tokens = k;
    }

    // attention across units, independently at every token position
    std::vector<Mat<Scalar>> gamma(static_cast<std::size_t>(n), Mat<Scalar>(k, c));
    for (Index t = 0; t < k; ++t) {
        const auto ts = static_cast<std::size_t>(t);
        Mat<Scalar> x(n, c);
        for (Index l = 0; l < n; ++l)
            x.row(l) = units[static_cast<std::size_t>(l)].row(t);
        Mat<Scalar> y = x + unit_attn.forward_self(unit_norm.forward(x, cache ? &cache->unit_norm[ts] : nullptr),
                                                   cache ? &cache->unit_attn[ts] : nullptr);
        y += unit_ffn.forward(unit_ffn_norm.forward(y, cache ? &cache->unit_ffn_norm[ts] : nullptr), cache ? &cache->unit_ffn[ts] : nullptr);
        for (Index l = 0; l < n; ++l)
            gamma[static_cast<std::size_t>(l)].row(t) = y.row(l);
    }

    Mat<Scalar> f3 = Mat<Scalar>::Zero(k, c);
    for (std::size_t l = 0; l < gamma.size(); ++l) {
        Mat<Scalar> g = sigmoid(gate.forward(gamma[l], cache ? &cache->gate[l] : nullptr));
        f3 += g.cwiseProduct(gamma[l]);
        if (cache)
            cache->gates[l] = std::move(g);
    }

    Mat<Scalar> f4 = f3 + fb_attn.forward(fb_norm_q.forward(f3, cache ? &cache->fb_norm_q : nullptr),
                                          fb_norm_kv.forward(joint, cache ? &cache->fb_norm_kv : nullptr), cache ? &cache->fb_attn : nullptr);
    f4 += out_ffn.forward(out_ffn_norm.forward(f4, cache ? &cache->out_ffn_norm : nullptr), cache ? &cache->out_ffn : nullptr);
    if (cache) {
        cache->gamma = std::move(gamma);
        cache->valid = true;
    }
    return f4;
}

template <typename Scalar>
typename HafeBranch<Scalar>::Grad HafeBranch<Scalar>::backward(const Cache& cache, const Mat<Scalar>& dy)
{
    if (!cache.valid)
        throw StateError("hafe: backward called before forward");
    const Index n = cache.units;
    const Index k = cache.tokens;
    const Index c = dy.cols();

    const Mat<Scalar> df4 = dy + out_ffn_norm.backward(cache.out_ffn_norm, out_ffn.backward(cache.out_ffn, dy));
    auto [dq, dkv] = fb_attn.backward(cache.fb_attn, df4);
    const Mat<Scalar> df3 = df4 + fb_norm_q.backward(cache.fb_norm_q, dq);
    Grad out;
    out.joint = fb_norm_kv.backward(cache.fb_norm_kv, dkv);

    std::vector<Mat<Scalar>> dgamma(static_cast<std::size_t>(n));
    for (std::size_t l = 0; l < dgamma.size(); ++l) {
        const Mat<Scalar>& g = cache.gates[l];
        const Mat<Scalar> dz = df3.cwiseProduct(cache.gamma[l]).cwiseProduct(g.cwiseProduct((Scalar(1) - g.array()).matrix()));
        dgamma[l] = df3.cwiseProduct(g) + gate.backward(cache.gate[l], dz);
    }

    out.units.assign(static_cast<std::size_t>(n), Mat<Scalar>(k, c));
    for (Index t = 0; t < k; ++t) {
        const auto ts = static_cast<std::size_t>(t);
        Mat<Scalar> dyt(n, c);
        for (Index l = 0; l < n; ++l)
            dyt.row(l) = dgamma[static_cast<std::size_t>(l)].row(t);
        dyt += unit_ffn_norm.backward(cache.unit_ffn_norm[ts], unit_ffn.backward(cache.unit_ffn[ts], dyt));
        const Mat<Scalar> dx = dyt + unit_norm.backward(cache.unit_norm[ts], unit_attn.backward_self(cache.unit_attn[ts], dyt));
        for (Index l = 0; l < n; ++l)
            out.units[static_cast<std::size_t>(l)].row(t) = dx.row(l);
    }
    return out;
}

template <typename Scalar>
void HafeBranch<Scalar>::visit(const std::string& prefix, const ParamVisitor<Scalar>& f)
{
    unit_norm.visit(join_name(prefix, "unit_norm"), f);
    unit_attn.visit(join_name(prefix, "unit_attn"), f);
    unit_ffn_norm.visit(join_name(prefix, "unit_ffn_norm"), f);
    unit_ffn.visit(join_name(prefix, "unit_ffn"), f);
    gate.visit(join_name(prefix, "gate"), f);
    fb_norm_q.visit(join_name(prefix, "feedback_norm_q"), f);
    fb_norm_kv.visit(join_name(prefix, "feedback_norm_kv"), f);
    fb_attn.visit(join_name(prefix, "feedback_attn"), f);
    out_ffn_norm.visit(join_name(prefix, "ffn_norm"), f);
    out_ffn.visit(join_name(prefix, "ffn"), f);
}

// ---------------------------------------------------------------- IAV-CL

template <typename Scalar>
Iavcl<Scalar>::Iavcl(const ModelConfig& cfg, InitContext& ctx)
    : layer_logits_audio(Param<Scalar>::zeros(1, cfg.encoder_depth, ParamKind::vector, ctx)),
      layer_logits_video(Param<Scalar>::zeros(1, cfg.encoder_depth, ParamKind::vector, ctx)),
      joint_proj(2 * cfg.encoder_dim, cfg.encoder_dim, ctx)
{
    if (cfg.num_dier_units < 1)
        throw ConfigError("iavcl: num_dier_units must be >= 1");
    for (int i = 0; i < cfg.num_dier_units; ++i)
        units.emplace_back(cfg.encoder_dim, cfg.encoder_heads, ctx);
    refine = Refinement<Scalar>(cfg.encoder_dim, ctx);
    hafe_audio = HafeBranch<Scalar>(cfg.encoder_dim, cfg.encoder_heads, cfg.mlp_ratio, ctx);
    hafe_video = HafeBranch<Scalar>(cfg.encoder_dim, cfg.encoder_heads, cfg.mlp_ratio, ctx);
}

template <typename Scalar>
IavclOutput<Scalar> Iavcl<Scalar>::forward(const std::vector<Mat<Scalar>>& audio_snapshots,
                                           const std::vector<Mat<Scalar>>& video_snapshots, Mode mode, Cache* cache) const
{
    require_shape(static_cast<Index>(audio_snapshots.size()) == layer_logits_audio.cols,
                  "iavcl: expected " + std::to_string(layer_logits_audio.cols) + " snapshots per modality, got " +
                      std::to_string(audio_snapshots.size()));
    Cache local;
    Cache& cc = cache ? *cache : local;
    cc.alpha_audio = layer_weights(layer_logits_audio);
    cc.alpha_video = layer_weights(layer_logits_video);
    cc.agg = aggregate_layers(audio_snapshots, video_snapshots, cc.alpha_audio, cc.alpha_video);
    cc.layers = static_cast<Index>(audio_snapshots.size());
    cc.units.assign(units.size(), {});
    if (cache) {
        cc.snapshots_audio = audio_snapshots;
        cc.snapshots_video = video_snapshots;
    }

    Mat<Scalar> joint = joint_proj.forward(cc.agg.joint, cache ? &cc.joint_proj : nullptr);
    Mat<Scalar> fa = cc.agg.audio_mean;
    Mat<Scalar> fv = cc.agg.video_mean;
    std::vector<Mat<Scalar>> kept_audio, kept_video;
    for (std::size_t i = 0; i < units.size(); ++i) {
        UnitCache* uc = cache ? &cc.units[i] : nullptr;
        Mat<Scalar> fa2 = units[i].audio.forward(fa, fv, uc ? &uc->audio : nullptr);
        Mat<Scalar> fv2 = units[i].video.forward(fv, fa, uc ? &uc->video : nullptr);
        joint = refine.forward(joint, fa2, fv2, mode, uc ? &uc->refine : nullptr);
        kept_audio.push_back(fa2);
        kept_video.push_back(fv2);
        fa = std::move(fa2);
        fv = std::move(fv2);
    }
    IavclOutput<Scalar> out;
    out.audio = hafe_audio.forward(kept_audio, joint, cache ? &cc.hafe_audio : nullptr);
    out.video = hafe_video.forward(kept_video, joint, cache ? &cc.hafe_video : nullptr);
    if (cache)
        cache->valid = true;
    return out;
}

template <typename Scalar>
typename Iavcl<Scalar>::Grad Iavcl<Scalar>::backward(const Cache& cache, const IavclOutput<Scalar>& grad)
{
    if (!cache.valid)
        throw StateError("iavcl: backward called before forward");
    const auto ha = hafe_audio.backward(cache.hafe_audio, grad.audio);
    const auto hv = hafe_video.backward(cache.hafe_video, grad.video);
    Mat<Scalar> djoint = ha.joint + hv.joint;

    // gradient flowing into F^2 of the unit being unwound, from later units
    Mat<Scalar> dfa = Mat<Scalar>::Zero(grad.audio.rows(), grad.audio.cols());
    Mat<Scalar> dfv = Mat<Scalar>::Zero(grad.video.rows(), grad.video.cols());
    for (std::size_t i = units.size(); i-- > 0;) {
        const UnitCache& uc = cache.units[i];
        const auto rg = refine.backward(uc.refine, djoint);
        djoint = rg.joint;
        const Mat<Scalar> dfa2 = dfa + ha.units[i] + rg.audio;
        const Mat<Scalar> dfv2 = dfv + hv.units[i] + rg.video;
        auto [da_own, dv_from_a] = units[i].audio.backward(uc.audio, dfa2);
        auto [dv_own, da_from_v] = units[i].video.backward(uc.video, dfv2);
        dfa = da_own + da_from_v;
        dfv = dv_own + dv_from_a;
    }

    const Mat<Scalar> dagg = joint_proj.backward(cache.joint_proj, djoint);
    const Index c = dfa.cols();
    const Mat<Scalar> dwa = dagg.leftCols(c);
    const Mat<Scalar> dwv = dagg.rightCols(c);
    const Scalar inv_n = Scalar(1) / static_cast<Scalar>(cache.layers);

    Grad out;
    RowVec<Scalar> dalpha_a(cache.layers), dalpha_v(cache.layers);
    out.audio_snapshots.assign(static_cast<std::size_t>(cache.layers), Mat<Scalar>());
    out.video_snapshots.assign(static_cast<std::size_t>(cache.layers), Mat<Scalar>());
    for (Index l = 0; l < cache.layers; ++l) {
        out.audio_snapshots[static_cast<std::size_t>(l)] = cache.alpha_audio(l) * dwa + inv_n * dfa;
        out.video_snapshots[static_cast<std::size_t>(l)] = cache.alpha_video(l) * dwv + inv_n * dfv;
        dalpha_a(l) = (dwa.cwiseProduct(cache.snapshots_audio[static_cast<std::size_t>(l)])).sum();
        dalpha_v(l) = (dwv.cwiseProduct(cache.snapshots_video[static_cast<std::size_t>(l)])).sum();
    }
    layer_logits_audio.g() += cache.alpha_audio.cwiseProduct((dalpha_a.array() - cache.alpha_audio.dot(dalpha_a)).matrix());
    layer_logits_video.g() += cache.alpha_video.cwiseProduct((dalpha_v.array() - cache.alpha_video.dot(dalpha_v)).matrix());
    return out;
}

template <typename Scalar>
void Iavcl<Scalar>::update_running(const Cache& cache)
{
    for (const auto& uc : cache.units) {
        refine.conv.update_running(uc.refine.conv_audio.stats);
        refine.conv.update_running(uc.refine.conv_video.stats);
    }
}

template <typename Scalar>
void Iavcl<Scalar>::visit(const std::string& prefix, const ParamVisitor<Scalar>& f)
{
    f(join_name(prefix, "layer_logits.audio"), layer_logits_audio);
    f(join_name(prefix, "layer_logits.video"), layer_logits_video);
    joint_proj.visit(join_name(prefix, "joint_proj"), f);
    for (std::size_t i = 0; i < units.size(); ++i)
        units[i].visit(join_name(prefix, "units." + std::to_string(i)), f);
    refine.visit(join_name(prefix, "refine"), f);
    hafe_audio.visit(join_name(prefix, "hafe.audio"), f);
    hafe_video.visit(join_name(prefix, "hafe.video"), f);
}

// ---------------------------------------------------------------- head

template <typename Scalar>
TaskHead<Scalar>::TaskHead(Index dim, Index outputs, bool regress, InitContext& ctx) : regression(regress), proj(2 * dim, outputs, ctx)
{
    if (outputs < 1)
        throw ConfigError("head: output dimension must be set");
}

template <typename Scalar>
RowVec<Scalar> TaskHead<Scalar>::forward(const IavclOutput<Scalar>& in, Cache* cache) const
{
    const Index c = in.audio.cols();
    Mat<Scalar> x(1, 2 * c);
    x.leftCols(c) = in.audio.colwise().mean();
    x.rightCols(c) = in.video.colwise().mean();
    if (regression)
        x = x.array().tanh().matrix();
    Mat<Scalar> y = proj.forward(x, cache ? &cache->proj : nullptr);
    if (cache) {
        cache->squashed = x.row(0);
        cache->audio_tokens = in.audio.rows();
        cache->video_tokens = in.video.rows();
        cache->valid = true;
    }
    return y.row(0);
}

template <typename Scalar>
IavclOutput<Scalar> TaskHead<Scalar>::backward(const Cache& cache, const RowVec<Scalar>& dy)
{
    if (!cache.valid)
        throw StateError("head: backward called before forward");
    Mat<Scalar> dx = proj.backward(cache.proj, Mat<Scalar>(dy));
    if (regression)
        dx = dx.cwiseProduct((Scalar(1) - cache.squashed.array().square()).matrix());
    const Index c = dx.cols() / 2;
    IavclOutput<Scalar> out;
    out.audio = dx.leftCols(c).replicate(cache.audio_tokens, 1) / static_cast<Scalar>(cache.audio_tokens);
    out.video = dx.rightCols(c).replicate(cache.video_tokens, 1) / static_cast<Scalar>(cache.video_tokens);
    return out;
}

template <typename Scalar>
void TaskHead<Scalar>::visit(const std::string& prefix, const ParamVisitor<Scalar>& f)
{
    proj.visit(join_name(prefix, "proj"), f);
}

// ---------------------------------------------------------------- model

template <typename Scalar>
FinetuneModel<Scalar>::FinetuneModel(const ModelConfig& config, Index outputs, bool regression, InitContext& ctx)
    : cfg(config),
      video_embed(Modality::video, config.video_grid(), config.video_patch_dim(), config.encoder_dim, ctx),
      audio_embed(Modality::audio, config.audio_grid(), config.audio_patch_dim(), config.encoder_dim, ctx),
      video_encoder(config, Modality::video, ctx), audio_encoder(config, Modality::audio, ctx), iavcl(config, ctx),
      head(config.encoder_dim, outputs, regression, ctx)
{
}

template <typename Scalar>
FinetuneSample<Scalar> FinetuneModel<Scalar>::forward_sample(const RawClip& clip, Mode mode, const DropPath& drop) const
{
    require_clip_geometry(clip, cfg);
    FinetuneSample<Scalar> s;
    const Grid3 vg = cfg.video_grid();
    const Grid3 ag = cfg.audio_grid();
    const auto vrows = iota_rows(vg.size());
    const auto arows = iota_rows(ag.size());
    const DropPath d = mode == Mode::train ? drop : DropPath{};
    const auto ve = video_encoder.forward(video_embed.forward(video_patches<Scalar>(clip, cfg), vrows, &s.video_embed), vrows,
                                          &s.video_encoder, d);
    const auto ae = audio_encoder.forward(audio_embed.forward(audio_patches<Scalar>(clip, cfg), arows, &s.audio_embed), arows,
                                          &s.audio_encoder, d);
    const auto fused = iavcl.forward(ae.snapshots, ve.snapshots, mode, &s.iavcl);
    s.output = head.forward(fused, &s.head);
    return s;
}

template <typename Scalar>
RowVec<Scalar> FinetuneModel<Scalar>::predict(const RawClip& clip) const
{
    require_clip_geometry(clip, cfg);
    const auto vrows = iota_rows(cfg.video_grid().size());
    const auto arows = iota_rows(cfg.audio_grid().size());
    const auto ve = video_encoder.forward(video_embed.forward(video_patches<Scalar>(clip, cfg), vrows), vrows);
    const auto ae = audio_encoder.forward(audio_embed.forward(audio_patches<Scalar>(clip, cfg), arows), arows);
    return head.forward(iavcl.forward(ae.snapshots, ve.snapshots, Mode::eval));
}

template <typename Scalar>
void FinetuneModel<Scalar>::backward_sample(const FinetuneSample<Scalar>& sample, const RowVec<Scalar>& doutput)
{
    const auto dfused = head.backward(sample.head, doutput);
    const auto dsnap = iavcl.backward(sample.iavcl, dfused);
    EncoderGrad<Scalar> gv;
    gv.snapshots = dsnap.video_snapshots;
    video_embed.backward(sample.video_embed, video_encoder.backward(sample.video_encoder, gv));
    EncoderGrad<Scalar> ga;
    ga.snapshots = dsnap.audio_snapshots;
    audio_embed.backward(sample.audio_embed, audio_encoder.backward(sample.audio_encoder, ga));
}

template <typename Scalar>
void FinetuneModel<Scalar>::visit(const std::string& prefix, const ParamVisitor<Scalar>& f)
{
    video_embed.visit(join_name(prefix, "video.embed"), f);
    video_encoder.visit(join_name(prefix, "video.encoder"), f);
    audio_embed.visit(join_name(prefix, "audio.embed"), f);
    audio_encoder.visit(join_name(prefix, "audio.encoder"), f);
    iavcl.visit(join_name(prefix, "iavcl"), f);
    head.visit(join_name(prefix, "head"), f);
}

#define AVMAE_INSTANTIATE(S)                                                                                              \
    template RowVec<S> layer_weights<S>(const Param<S>&);                                                                 \
    template Aggregated<S> aggregate_layers<S>(const std::vector<Mat<S>>&, const std::vector<Mat<S>>&, const RowVec<S>&, \
                                               const RowVec<S>&);                                                         \
    template struct DierBranch<S>;                                                                                        \
    template struct Refinement<S>;                                                                                        \
    template struct HafeBranch<S>;                                                                                        \
    template struct Iavcl<S>;                                                                                             \
    template struct TaskHead<S>;                                                                                          \
    template struct FinetuneModel<S>;

AVMAE_INSTANTIATE(float)
AVMAE_INSTANTIATE(double)

} // namespace avmae
