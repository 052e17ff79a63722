#pragma once

#include "avmae/config.hpp"
#include "avmae/embedding.hpp"
#include "avmae/layers.hpp"
#include "avmae/lgi_encoder.hpp"
#include "avmae/losses.hpp"
#include "avmae/masking.hpp"

#include <vector>

namespace avmae {

template <typename Scalar>
struct FusionState {
    Mat<Scalar> video;  // audio-informed video tokens
    Mat<Scalar> audio;  // video-informed audio tokens
};

/// One cross-modal block: each stream queries the other's previous state
/// (pre-norm residual cross-attention), then its own FFN.
template <typename Scalar>
struct FusionBlock {
    using scalar_type = Scalar;
    struct Cache {
        typename LayerNorm<Scalar>::Cache vq, vkv, aq, akv, vf, af;
        typename Attention<Scalar>::Cache v_attn, a_attn;
        typename FeedForward<Scalar>::Cache v_ffn, a_ffn;
        bool valid = false;
    };

    LayerNorm<Scalar> video_norm_q, video_norm_kv, audio_norm_q, audio_norm_kv, video_ffn_norm, audio_ffn_norm;
    Attention<Scalar> video_attn, audio_attn;
    FeedForward<Scalar> video_ffn, audio_ffn;

    FusionBlock() = default;
    FusionBlock(Index dim, Index heads, Index mlp_ratio, InitContext& ctx);

    FusionState<Scalar> forward(const FusionState<Scalar>& in, Cache* cache = nullptr) const;
    FusionState<Scalar> backward(const Cache& cache, const FusionState<Scalar>& grad);
    void visit(const std::string& prefix, const ParamVisitor<Scalar>& f);
};

template <typename Scalar>
struct FusionEncoder {
    using scalar_type = Scalar;
    struct Cache {
        std::vector<typename FusionBlock<Scalar>::Cache> blocks;
        bool valid = false;
    };

    std::vector<FusionBlock<Scalar>> blocks;

    FusionEncoder() = default;
    FusionEncoder(const ModelConfig& cfg, InitContext& ctx);

    FusionState<Scalar> forward(const Mat<Scalar>& video, const Mat<Scalar>& audio, Cache* cache = nullptr) const;
    FusionState<Scalar> backward(const Cache& cache, const FusionState<Scalar>& grad);
    void visit(const std::string& prefix, const ParamVisitor<Scalar>& f);
};

/// Gradients a decoder hands back to the encoder side.
template <typename Scalar>
struct DecoderGrad {
    Mat<Scalar> latents;                   // [visible, C]
    std::vector<Mat<Scalar>> skip_locals;  // [visible, C] per skip layer
};

/// Narrow transformer decoder.  The combined sequence (visible latents and mask
/// tokens, both at encoder width with position encoding) is projected to the
/// decoder width, skip features are added at visible rows, and the head
/// predicts only the target rows.
template <typename Scalar>
struct Decoder {
    using scalar_type = Scalar;
    struct Cache {
        typename Linear<Scalar>::Cache in_cache;
        std::vector<typename Linear<Scalar>::Cache> skip_caches;
        std::vector<typename TransformerBlock<Scalar>::Cache> block_caches;
        typename LayerNorm<Scalar>::Cache norm_cache;
        typename Linear<Scalar>::Cache head_cache;
        Index visible = 0;
        Index targets = 0;
        Index sequence = 0;
        bool valid = false;
    };

    Linear<Scalar> in_proj;
    Param<Scalar> mask_token;  // [1, encoder_dim]
    std::vector<Linear<Scalar>> skip_proj;
    std::vector<TransformerBlock<Scalar>> blocks;
    LayerNorm<Scalar> norm;
    Linear<Scalar> head;
    Mat<Scalar> pos;  // [N, encoder_dim]

    Decoder() = default;
    Decoder(const ModelConfig& cfg, Modality m, InitContext& ctx);

    /// Predictions [targets, patch_dim] in ascending grid order.
    Mat<Scalar> forward(const Mat<Scalar>& latents, const MaskPair& masks, const std::vector<Mat<Scalar>>& skip_locals,
                        Cache* cache = nullptr) const;
    DecoderGrad<Scalar> backward(const Cache& cache, const Mat<Scalar>& dpred);
    void visit(const std::string& prefix, const ParamVisitor<Scalar>& f);
};

template <typename Scalar>
struct PretrainLosses {
    Scalar mse_audio = 0;
    Scalar mse_video = 0;
    std::vector<Scalar> info_nce;  // one per skip layer
    Scalar total = 0;
};

/// Everything one sample's forward pass records for its backward pass.
template <typename Scalar>
struct PretrainSample {
    struct Stream {
        MaskPair masks;
        Mat<Scalar> targets;  // all N normalized patches
        std::vector<Index> visible;
        typename PatchEmbed<Scalar>::Cache embed_cache;
        typename LgiEncoder<Scalar>::Cache encoder_cache;
        EncoderOutput<Scalar> encoded;
        typename Decoder<Scalar>::Cache decoder_cache;
        Mat<Scalar> predictions;
        LossValue<Scalar> mse;
    };
    Stream video, audio;
    typename FusionEncoder<Scalar>::Cache fusion_cache;
    FusionState<Scalar> fused;
};

/// Masked audio-visual autoencoder used for self-supervised pretraining.
template <typename Scalar>
struct PretrainModel {
    using scalar_type = Scalar;

    ModelConfig cfg;
    PatchEmbed<Scalar> video_embed, audio_embed;
    LgiEncoder<Scalar> video_encoder, audio_encoder;
    FusionEncoder<Scalar> fusion;
    Decoder<Scalar> video_decoder, audio_decoder;

    PretrainModel() = default;
    PretrainModel(const ModelConfig& config, InitContext& ctx);

    /// Masks, encodes, fuses and reconstructs one clip.  `mask_rng` draws the
    /// mask pair, `drop` controls residual-branch dropping in the encoders.
    PretrainSample<Scalar> forward_sample(const RawClip& clip, Rng& mask_rng, const DropPath& drop = {}) const;

    /// Same, with caller-supplied masks.
    PretrainSample<Scalar> forward_sample(const RawClip& clip, const MaskPair& video_masks, const MaskPair& audio_masks,
                                          const DropPath& drop = {}) const;

    /// Accumulates parameter gradients for one sample.  `mse_weight` scales
    /// both reconstruction terms; the pooled-feature gradients come from the
    /// batch contrastive loss and may be empty.
    void backward_sample(const PretrainSample<Scalar>& sample, Scalar mse_weight,
                         const std::vector<RowVec<Scalar>>& d_pooled_video, const std::vector<RowVec<Scalar>>& d_pooled_audio);

    void visit(const std::string& prefix, const ParamVisitor<Scalar>& f);
};

/// Batch losses: mean over samples of (L_mse^a + L_mse^v) plus
/// contrastive_weight * sum over skip layers of InfoNCE(e_a^k, e_v^k).
/// Fills per-sample pooled-feature gradients for backward_sample when the
/// output vectors are supplied.
template <typename Scalar>
PretrainLosses<Scalar> pretrain_losses(const ModelConfig& cfg, const std::vector<PretrainSample<Scalar>>& batch,
                                       std::vector<std::vector<RowVec<Scalar>>>* d_pooled_video = nullptr,
                                       std::vector<std::vector<RowVec<Scalar>>>* d_pooled_audio = nullptr);

/// Convenience: forward a batch with per-sample mask streams derived from
/// (seed, index) and return the loss components.
template <typename Scalar>
PretrainLosses<Scalar> pretrain_forward(const PretrainModel<Scalar>& model, const std::vector<RawClip>& clips, std::uint64_t seed);

/// Decoder attention score entries with and without the decoder mask.
struct DecoderCost {
    Index dual = 0;
    Index full = 0;
};
DecoderCost decoder_attention_cost(const ModelConfig& cfg, Modality m);

} // namespace avmae
