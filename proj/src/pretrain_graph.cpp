#include "avmae/pretrain_graph.hpp"

namespace avmae {

// ---------------------------------------------------------------- fusion

template <typename Scalar>
FusionBlock<Scalar>::FusionBlock(Index dim, Index heads, Index mlp_ratio, InitContext& ctx)
    : video_norm_q(dim, ctx), video_norm_kv(dim, ctx), audio_norm_q(dim, ctx), audio_norm_kv(dim, ctx),
      video_ffn_norm(dim, ctx), audio_ffn_norm(dim, ctx), video_attn(dim, heads, ctx), audio_attn(dim, heads, ctx),
      video_ffn(dim, dim * mlp_ratio, ctx), audio_ffn(dim, dim * mlp_ratio, ctx)
{
}

template <typename Scalar>
FusionState<Scalar> FusionBlock<Scalar>::forward(const FusionState<Scalar>& in, Cache* cache) const
{
    require_shape(in.video.cols() == in.audio.cols(), "fusion: channel mismatch " + shape_str(in.video) + " vs " + shape_str(in.audio));
    Cache* c = cache;
    // both directions read the previous state of the partner stream
    const Mat<Scalar> v1 = in.video + video_attn.forward(video_norm_q.forward(in.video, c ? &c->vq : nullptr),
                                                         video_norm_kv.forward(in.audio, c ? &c->vkv : nullptr),
                                                         c ? &c->v_attn : nullptr);
    const Mat<Scalar> a1 = in.audio + audio_attn.forward(audio_norm_q.forward(in.audio, c ? &c->aq : nullptr),
                                                         audio_norm_kv.forward(in.video, c ? &c->akv : nullptr),
                                                         c ? &c->a_attn : nullptr);
    FusionState<Scalar> out;
    out.video = v1 + video_ffn.forward(video_ffn_norm.forward(v1, c ? &c->vf : nullptr), c ? &c->v_ffn : nullptr);
    out.audio = a1 + audio_ffn.forward(audio_ffn_norm.forward(a1, c ? &c->af : nullptr), c ? &c->a_ffn : nullptr);
    if (cache)
        cache->valid = true;
    return out;
}

template <typename Scalar>
FusionState<Scalar> FusionBlock<Scalar>::backward(const Cache& cache, const FusionState<Scalar>& grad)
{
    if (!cache.valid)
        throw StateError("fusion: backward called before forward");
    const Mat<Scalar> dv1 = grad.video + video_ffn_norm.backward(cache.vf, video_ffn.backward(cache.v_ffn, grad.video));
    const Mat<Scalar> da1 = grad.audio + audio_ffn_norm.backward(cache.af, audio_ffn.backward(cache.a_ffn, grad.audio));

    FusionState<Scalar> din{dv1, da1};
    auto [dvq, dakv] = video_attn.backward(cache.v_attn, dv1);
    din.video += video_norm_q.backward(cache.vq, dvq);
    din.audio += video_norm_kv.backward(cache.vkv, dakv);
    auto [daq, dvkv] = audio_attn.backward(cache.a_attn, da1);
    din.audio += audio_norm_q.backward(cache.aq, daq);
    din.video += audio_norm_kv.backward(cache.akv, dvkv);
    return din;
}

template <typename Scalar>
void FusionBlock<Scalar>::visit(const std::string& prefix, const ParamVisitor<Scalar>& f)
{
    video_norm_q.visit(join_name(prefix, "video_norm_q"), f);
    video_norm_kv.visit(join_name(prefix, "video_norm_kv"), f);
    video_attn.visit(join_name(prefix, "video_attn"), f);
    video_ffn_norm.visit(join_name(prefix, "video_ffn_norm"), f);
    video_ffn.visit(join_name(prefix, "video_ffn"), f);
    audio_norm_q.visit(join_name(prefix, "audio_norm_q"), f);
    audio_norm_kv.visit(join_name(prefix, "audio_norm_kv"), f);
    audio_attn.visit(join_name(prefix, "audio_attn"), f);
    audio_ffn_norm.visit(join_name(prefix, "audio_ffn_norm"), f);
    audio_ffn.visit(join_name(prefix, "audio_ffn"), f);
}

template <typename Scalar>
FusionEncoder<Scalar>::FusionEncoder(const ModelConfig& cfg, InitContext& ctx)
{
    blocks.reserve(static_cast<std::size_t>(cfg.fusion_depth));
    for (int i = 0; i < cfg.fusion_depth; ++i)
        blocks.emplace_back(cfg.encoder_dim, cfg.fusion_heads, cfg.mlp_ratio, ctx);
}

template <typename Scalar>
FusionState<Scalar> FusionEncoder<Scalar>::forward(const Mat<Scalar>& video, const Mat<Scalar>& audio, Cache* cache) const
{
    if (cache)
        cache->blocks.assign(blocks.size(), {});
    FusionState<Scalar> s{video, audio};
    for (std::size_t i = 0; i < blocks.size(); ++i)
        s = blocks[i].forward(s, cache ? &cache->blocks[i] : nullptr);
    if (cache)
        cache->valid = true;
    return s;
}

template <typename Scalar>
FusionState<Scalar> FusionEncoder<Scalar>::backward(const Cache& cache, const FusionState<Scalar>& grad)
{
    if (!cache.valid)
        throw StateError("fusion: backward called before forward");
    FusionState<Scalar> g = grad;
    for (std::size_t i = blocks.size(); i-- > 0;)
        g = blocks[i].backward(cache.blocks[i], g);
    return g;
}

template <typename Scalar>
void FusionEncoder<Scalar>::visit(const std::string& prefix, const ParamVisitor<Scalar>& f)
{
    for (std::size_t i = 0; i < blocks.size(); ++i)
        blocks[i].visit(join_name(prefix, "blocks." + std::to_string(i)), f);
}

// ---------------------------------------------------------------- decoder

template <typename Scalar>
Decoder<Scalar>::Decoder(const ModelConfig& cfg, Modality m, InitContext& ctx)
    : in_proj(cfg.encoder_dim, cfg.decoder_dim, ctx),
      mask_token(Param<Scalar>::trunc_normal(1, cfg.encoder_dim, 0.02, ParamKind::vector, ctx))
{
    for (std::size_t j = 0; j < cfg.skip_indices.size(); ++j)
        skip_proj.emplace_back(cfg.encoder_dim, cfg.decoder_dim, ctx);
    for (int i = 0; i < cfg.decoder_depth; ++i)
        blocks.emplace_back(cfg.decoder_dim, cfg.decoder_heads, cfg.mlp_ratio, ctx);
    norm = LayerNorm<Scalar>(cfg.decoder_dim, ctx);
    head = Linear<Scalar>(cfg.decoder_dim, modality_patch_dim(cfg, m), ctx);
    if (ctx.allocate)
        pos = position_encoding<Scalar>(m, modality_grid(cfg, m), cfg.encoder_dim);
}

template <typename Scalar>
Mat<Scalar> Decoder<Scalar>::forward(const Mat<Scalar>& latents, const MaskPair& masks, const std::vector<Mat<Scalar>>& skip_locals,
                                     Cache* cache) const
{
    require_shape(skip_locals.size() == skip_proj.size(), "decoder: expected " + std::to_string(skip_proj.size()) +
                                                              " skip features, got " + std::to_string(skip_locals.size()));
    const Index nv = latents.rows();
    for (const auto& s : skip_locals)
        require_shape(s.rows() == nv && s.cols() == latents.cols(),
                      "decoder: skip feature " + shape_str(s) + " does not match latents " + shape_str(latents));

    const CombinedSeq<Scalar> comb = assemble_combined<Scalar>(latents, masks, mask_token.value, pos);
    const Index nt = comb.size() - nv;
    if (cache) {
        cache->skip_caches.assign(skip_proj.size(), {});
        cache->block_caches.assign(blocks.size(), {});
        cache->visible = nv;
        cache->targets = nt;
        cache->sequence = comb.size();
    }
    Mat<Scalar> h = in_proj.forward(comb.tokens, cache ? &cache->in_cache : nullptr);
    // mask-token rows get no skip contribution
    for (std::size_t j = 0; j < skip_proj.size(); ++j)
        h.topRows(nv) += skip_proj[j].forward(skip_locals[j], cache ? &cache->skip_caches[j] : nullptr);
    for (std::size_t i = 0; i < blocks.size(); ++i)
        h = blocks[i].forward(h, cache ? &cache->block_caches[i] : nullptr);
    const Mat<Scalar> tail = h.bottomRows(nt);
    Mat<Scalar> y = head.forward(norm.forward(tail, cache ? &cache->norm_cache : nullptr), cache ? &cache->head_cache : nullptr);
    if (cache)
        cache->valid = true;
    return y;
}

template <typename Scalar>
DecoderGrad<Scalar> Decoder<Scalar>::backward(const Cache& cache, const Mat<Scalar>& dpred)
{
    if (!cache.valid)
        throw StateError("decoder: backward called before forward");
    require_shape(dpred.rows() == cache.targets, "decoder: prediction gradient rows");
    Mat<Scalar> dh = Mat<Scalar>::Zero(cache.sequence, in_proj.out_features());
    dh.bottomRows(cache.targets) = norm.backward(cache.norm_cache, head.backward(cache.head_cache, dpred));
    for (std::size_t i = blocks.size(); i-- > 0;)
        dh = blocks[i].backward(cache.block_caches[i], dh);

    DecoderGrad<Scalar> out;
    const Mat<Scalar> dvis = dh.topRows(cache.visible);
    for (std::size_t j = 0; j < skip_proj.size(); ++j)
        out.skip_locals.push_back(skip_proj[j].backward(cache.skip_caches[j], dvis));
    const Mat<Scalar> dcomb = in_proj.backward(cache.in_cache, dh);
    out.latents = dcomb.topRows(cache.visible);
    mask_token.g() += dcomb.bottomRows(cache.targets).colwise().sum();
    return out;
}

template <typename Scalar>
void Decoder<Scalar>::visit(const std::string& prefix, const ParamVisitor<Scalar>& f)
{
    in_proj.visit(join_name(prefix, "in_proj"), f);
    f(join_name(prefix, "mask_token"), mask_token);
    for (std::size_t j = 0; j < skip_proj.size(); ++j)
        skip_proj[j].visit(join_name(prefix, "skip_proj." + std::to_string(j)), f);
    for (std::size_t i = 0; i < blocks.size(); ++i)
        blocks[i].visit(join_name(prefix, "blocks." + std::to_string(i)), f);
    norm.visit(join_name(prefix, "norm"), f);
    head.visit(join_name(prefix, "head"), f);
}

// ---------------------------------------------------------------- full model

template <typename Scalar>
PretrainModel<Scalar>::PretrainModel(const ModelConfig& config, InitContext& ctx)
    : cfg(config),
      video_embed(Modality::video, config.video_grid(), config.video_patch_dim(), config.encoder_dim, ctx),
      audio_embed(Modality::audio, config.audio_grid(), config.audio_patch_dim(), config.encoder_dim, ctx),
      video_encoder(config, Modality::video, ctx), audio_encoder(config, Modality::audio, ctx), fusion(config, ctx),
      video_decoder(config, Modality::video, ctx), audio_decoder(config, Modality::audio, ctx)
{
}

template <typename Scalar>
PretrainSample<Scalar> PretrainModel<Scalar>::forward_sample(const RawClip& clip, Rng& mask_rng, const DropPath& drop) const
{
    const MaskPair vm = make_mask_pair(cfg, Modality::video, mask_rng);
    const MaskPair am = make_mask_pair(cfg, Modality::audio, mask_rng);
    return forward_sample(clip, vm, am, drop);
}

template <typename Scalar>
PretrainSample<Scalar> PretrainModel<Scalar>::forward_sample(const RawClip& clip, const MaskPair& video_masks,
                                                             const MaskPair& audio_masks, const DropPath& drop) const
{
    require_clip_geometry(clip, cfg);
    PretrainSample<Scalar> s;
    auto encode = [&](typename PretrainSample<Scalar>::Stream& st, Modality m, const MaskPair& masks, const PatchEmbed<Scalar>& embed,
                      const LgiEncoder<Scalar>& encoder) {
        require_shape(masks.size() == modality_grid(cfg, m).size(), std::string("pretrain: ") + to_string(m) + " mask size");
        st.masks = masks;
        const Mat<Scalar> raw = patches<Scalar>(clip, cfg, m);
        st.targets = normalize_targets(raw);
        st.visible = masks.visible();
        const Mat<Scalar> tokens = embed.forward(raw, st.visible, &st.embed_cache);
        st.encoded = encoder.forward(tokens, st.visible, &st.encoder_cache, drop);
    };
    encode(s.video, Modality::video, video_masks, video_embed, video_encoder);
    encode(s.audio, Modality::audio, audio_masks, audio_embed, audio_encoder);

    s.fused = fusion.forward(s.video.encoded.locals, s.audio.encoded.locals, &s.fusion_cache);

    s.video.predictions = video_decoder.forward(s.fused.video, s.video.masks, s.video.encoded.skip_locals, &s.video.decoder_cache);
    s.audio.predictions = audio_decoder.forward(s.fused.audio, s.audio.masks, s.audio.encoded.skip_locals, &s.audio.decoder_cache);
    s.video.mse = masked_mse(s.video.targets, s.video.predictions, s.video.masks);
    s.audio.mse = masked_mse(s.audio.targets, s.audio.predictions, s.audio.masks);
    return s;
}

template <typename Scalar>
void PretrainModel<Scalar>::backward_sample(const PretrainSample<Scalar>& sample, Scalar mse_weight,
                                            const std::vector<RowVec<Scalar>>& d_pooled_video,
                                            const std::vector<RowVec<Scalar>>& d_pooled_audio)
{
    const DecoderGrad<Scalar> gv = video_decoder.backward(sample.video.decoder_cache, mse_weight * sample.video.mse.grad);
    const DecoderGrad<Scalar> ga = audio_decoder.backward(sample.audio.decoder_cache, mse_weight * sample.audio.mse.grad);
    const FusionState<Scalar> gf = fusion.backward(sample.fusion_cache, {gv.latents, ga.latents});

    EncoderGrad<Scalar> ev;
    ev.locals = gf.video;
    ev.skip_locals = gv.skip_locals;
    ev.pooled = d_pooled_video;
    video_embed.backward(sample.video.embed_cache, video_encoder.backward(sample.video.encoder_cache, ev));

    EncoderGrad<Scalar> ea;
    ea.locals = gf.audio;
    ea.skip_locals = ga.skip_locals;
    ea.pooled = d_pooled_audio;
    audio_embed.backward(sample.audio.embed_cache, audio_encoder.backward(sample.audio.encoder_cache, ea));
}

template <typename Scalar>
void PretrainModel<Scalar>::visit(const std::string& prefix, const ParamVisitor<Scalar>& f)
{
    video_embed.visit(join_name(prefix, "video.embed"), f);
    video_encoder.visit(join_name(prefix, "video.encoder"), f);
    audio_embed.visit(join_name(prefix, "audio.embed"), f);
    audio_encoder.visit(join_name(prefix, "audio.encoder"), f);
    fusion.visit(join_name(prefix, "fusion"), f);
    video_decoder.visit(join_name(prefix, "video.decoder"), f);
    audio_decoder.visit(join_name(prefix, "audio.decoder"), f);
}

template <typename Scalar>
PretrainLosses<Scalar> pretrain_losses(const ModelConfig& cfg, const std::vector<PretrainSample<Scalar>>& batch,
                                       std::vector<std::vector<RowVec<Scalar>>>* d_pooled_video,
                                       std::vector<std::vector<RowVec<Scalar>>>* d_pooled_audio)
{
    PretrainLosses<Scalar> out;
    const std::size_t b = batch.size();
    if (b == 0)
        throw ShapeError("pretrain_losses: empty batch");
    const Scalar inv_b = Scalar(1) / static_cast<Scalar>(b);
    for (const auto& s : batch) {
        out.mse_video += s.video.mse.value * inv_b;
        out.mse_audio += s.audio.mse.value * inv_b;
    }
    out.total = out.mse_video + out.mse_audio;

    const std::size_t k = cfg.skip_indices.size();
    const Scalar lambda = static_cast<Scalar>(cfg.contrastive_weight);
    if (d_pooled_video)
        d_pooled_video->assign(b, {});
    if (d_pooled_audio)
        d_pooled_audio->assign(b, {});
    if (b < 2) {
        if (cfg.contrastive_weight != 0.0 && k > 0)
            throw ShapeError("pretrain_losses: the contrastive term needs a batch of at least 2 clips");
        return out;
    }
    for (std::size_t j = 0; j < k; ++j) {
        Mat<Scalar> ea(static_cast<Index>(b), cfg.encoder_dim);
        Mat<Scalar> ev(static_cast<Index>(b), cfg.encoder_dim);
        for (std::size_t i = 0; i < b; ++i) {
            ea.row(static_cast<Index>(i)) = batch[i].audio.encoded.pooled[j];
            ev.row(static_cast<Index>(i)) = batch[i].video.encoded.pooled[j];
        }
        const ContrastiveLoss<Scalar> cl = info_nce(ea, ev, cfg.contrastive_temperature);
        out.info_nce.push_back(cl.value);
        out.total += lambda * cl.value;
        for (std::size_t i = 0; i < b; ++i) {
            if (d_pooled_video)
                (*d_pooled_video)[i].push_back(lambda * cl.grad_video.row(static_cast<Index>(i)));
            if (d_pooled_audio)
                (*d_pooled_audio)[i].push_back(lambda * cl.grad_audio.row(static_cast<Index>(i)));
        }
    }
    return out;
}

template <typename Scalar>
PretrainLosses<Scalar> pretrain_forward(const PretrainModel<Scalar>& model, const std::vector<RawClip>& clips, std::uint64_t seed)
{
    std::vector<PretrainSample<Scalar>> batch;
    batch.reserve(clips.size());
    for (std::size_t i = 0; i < clips.size(); ++i) {
        Rng rng(derive_seed(seed, i));
        batch.push_back(model.forward_sample(clips[i], rng));
    }
    return pretrain_losses(model.cfg, batch);
}

DecoderCost decoder_attention_cost(const ModelConfig& cfg, Modality m)
{
    const Index n = modality_grid(cfg, m).size();
    const double enc = m == Modality::video ? cfg.video_mask_ratio : cfg.audio_mask_ratio;
    const double dec = m == Modality::video ? cfg.video_decoder_ratio : cfg.audio_decoder_ratio;
    const Index masked = round_half_up(enc * static_cast<double>(n));
    const Index seq = (n - masked) + std::min(masked, decoder_target_count(n, dec));
    return {seq * seq, n * n};
}

#define AVMAE_INSTANTIATE(S)                                                                                         \
    template struct FusionBlock<S>;                                                                                  \
    template struct FusionEncoder<S>;                                                                                \
    template struct Decoder<S>;                                                                                      \
    template struct PretrainModel<S>;                                                                                \
    template PretrainLosses<S> pretrain_losses<S>(const ModelConfig&, const std::vector<PretrainSample<S>>&,          \
                                                  std::vector<std::vector<RowVec<S>>>*, std::vector<std::vector<RowVec<S>>>*); \
    template PretrainLosses<S> pretrain_forward<S>(const PretrainModel<S>&, const std::vector<RawClip>&, std::uint64_t);

AVMAE_INSTANTIATE(float)
AVMAE_INSTANTIATE(double)

} // namespace avmae
