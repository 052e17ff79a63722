#pragma once

#include "avmae/config.hpp"
#include "avmae/embedding.hpp"
#include "avmae/layers.hpp"
#include "avmae/lgi_encoder.hpp"

#include <vector>

namespace avmae {

/// Softmax-normalized layer weights; non-negative and summing to one.
template <typename Scalar>
RowVec<Scalar> layer_weights(const Param<Scalar>& logits);

template <typename Scalar>
struct Aggregated {
    Mat<Scalar> joint;        // [K, 2C] = concat(sum_l a^a_l S^l_a, sum_l a^v_l S^l_v)
    Mat<Scalar> audio_mean;   // [K, C] mean over layers
    Mat<Scalar> video_mean;   // [K, C]
};

template <typename Scalar>
Aggregated<Scalar> aggregate_layers(const std::vector<Mat<Scalar>>& audio_snapshots, const std::vector<Mat<Scalar>>& video_snapshots,
                                    const RowVec<Scalar>& audio_weights, const RowVec<Scalar>& video_weights);

/// Dense-interaction half of a DiER unit for one modality: parallel self- and
/// cross-attention, fused by per-token, per-channel sigmoid gates.
template <typename Scalar>
struct DierBranch {
    using scalar_type = Scalar;
    struct Cache {
        typename LayerNorm<Scalar>::Cache self_norm, cross_norm_q, cross_norm_kv;
        typename Attention<Scalar>::Cache self_attn, cross_attn;
        typename Linear<Scalar>::Cache gate_self, gate_cross;
        Mat<Scalar> fs, fc, gs, gc;
        bool valid = false;
    };

    LayerNorm<Scalar> self_norm, cross_norm_q, cross_norm_kv;
    Attention<Scalar> self_attn, cross_attn;
    Linear<Scalar> gate_self, gate_cross;  // 2C -> C

    DierBranch() = default;
    DierBranch(Index dim, Index heads, InitContext& ctx);

    Mat<Scalar> forward(const Mat<Scalar>& own, const Mat<Scalar>& other, Cache* cache = nullptr) const;
    /// Returns {d_own, d_other}.
    std::pair<Mat<Scalar>, Mat<Scalar>> backward(const Cache& cache, const Mat<Scalar>& dy);
    void visit(const std::string& prefix, const ParamVisitor<Scalar>& f);
};

/// Evolutionary refinement, shared by every unit: R_m = ConvBnPrelu(SHCA(F_av, F2_m))
/// and F_av <- LN(F_av + R_a + R_v).
template <typename Scalar>
struct Refinement {
    using scalar_type = Scalar;
    struct Cache {
        typename Attention<Scalar>::Cache attn_audio, attn_video;
        typename ConvBnPrelu<Scalar>::Cache conv_audio, conv_video;
        typename LayerNorm<Scalar>::Cache norm;
        Mat<Scalar> residual_audio, residual_video;
        bool valid = false;
    };

    Attention<Scalar> attn;  // single head
    ConvBnPrelu<Scalar> conv;
    LayerNorm<Scalar> norm;

    Refinement() = default;
    Refinement(Index dim, InitContext& ctx);

    Mat<Scalar> forward(const Mat<Scalar>& joint, const Mat<Scalar>& audio, const Mat<Scalar>& video, Mode mode,
                        Cache* cache = nullptr) const;
    struct Grad {
        Mat<Scalar> joint, audio, video;
    };
    Grad backward(const Cache& cache, const Mat<Scalar>& dy);
    void visit(const std::string& prefix, const ParamVisitor<Scalar>& f);
};

template <typename Scalar>
struct DierUnit {
    using scalar_type = Scalar;
    DierBranch<Scalar> audio, video;

    DierUnit() = default;
    DierUnit(Index dim, Index heads, InitContext& ctx) : audio(dim, heads, ctx), video(dim, heads, ctx) {}
    void visit(const std::string& prefix, const ParamVisitor<Scalar>& f)
    {
        audio.visit(join_name(prefix, "audio"), f);
        video.visit(join_name(prefix, "video"), f);
    }
};

/// Hierarchical aggregation and feedback for one modality.
template <typename Scalar>
struct HafeBranch {
    using scalar_type = Scalar;
    struct Cache {
        std::vector<typename LayerNorm<Scalar>::Cache> unit_norm, unit_ffn_norm;
        std::vector<typename Attention<Scalar>::Cache> unit_attn;
        std::vector<typename FeedForward<Scalar>::Cache> unit_ffn;
        std::vector<typename Linear<Scalar>::Cache> gate;
        std::vector<Mat<Scalar>> gamma;  // per unit, [K, C]
        std::vector<Mat<Scalar>> gates;  // per unit, sigmoid outputs
        typename LayerNorm<Scalar>::Cache fb_norm_q, fb_norm_kv, out_ffn_norm;
        typename Attention<Scalar>::Cache fb_attn;
        typename FeedForward<Scalar>::Cache out_ffn;
        Index units = 0;
        Index tokens = 0;
        bool valid = false;
    };

    LayerNorm<Scalar> unit_norm, unit_ffn_norm;
    Attention<Scalar> unit_attn;
    FeedForward<Scalar> unit_ffn;
    Linear<Scalar> gate;  // C -> C, shared over units
    LayerNorm<Scalar> fb_norm_q, fb_norm_kv, out_ffn_norm;
    Attention<Scalar> fb_attn;
    FeedForward<Scalar> out_ffn;

    HafeBranch() = default;
    HafeBranch(Index dim, Index heads, Index mlp_ratio, InitContext& ctx);

    /// `units[i]` is the preserved output of unit i, [K, C] each.
    Mat<Scalar> forward(const std::vector<Mat<Scalar>>& units, const Mat<Scalar>& joint, Cache* cache = nullptr) const;
    struct Grad {
        std::vector<Mat<Scalar>> units;
        Mat<Scalar> joint;
    };
    Grad backward(const Cache& cache, const Mat<Scalar>& dy);
    void visit(const std::string& prefix, const ParamVisitor<Scalar>& f);
};

template <typename Scalar>
struct IavclOutput {
    Mat<Scalar> audio;  // F^4_a [K, C]
    Mat<Scalar> video;  // F^4_v [K, C]
};

/// The fine-tuning fusion module: layer-weight aggregation, stacked DiER units
/// with one shared refinement layer, and the HAFE layer.
template <typename Scalar>
struct Iavcl {
    using scalar_type = Scalar;
    struct UnitCache {
        typename DierBranch<Scalar>::Cache audio, video;
        typename Refinement<Scalar>::Cache refine;
    };
    struct Cache {
        Aggregated<Scalar> agg;
        std::vector<Mat<Scalar>> snapshots_audio, snapshots_video;
        RowVec<Scalar> alpha_audio, alpha_video;
        typename Linear<Scalar>::Cache joint_proj;
        std::vector<UnitCache> units;
        typename HafeBranch<Scalar>::Cache hafe_audio, hafe_video;
        Index layers = 0;
        bool valid = false;
    };

    Param<Scalar> layer_logits_audio, layer_logits_video;  // [1, N_l]
    Linear<Scalar> joint_proj;                             // 2C -> C
    std::vector<DierUnit<Scalar>> units;
    Refinement<Scalar> refine;
    HafeBranch<Scalar> hafe_audio, hafe_video;

    Iavcl() = default;
    Iavcl(const ModelConfig& cfg, InitContext& ctx);

    IavclOutput<Scalar> forward(const std::vector<Mat<Scalar>>& audio_snapshots, const std::vector<Mat<Scalar>>& video_snapshots,
                                Mode mode, Cache* cache = nullptr) const;
    struct Grad {
        std::vector<Mat<Scalar>> audio_snapshots, video_snapshots;
    };
    Grad backward(const Cache& cache, const IavclOutput<Scalar>& grad);

    /// Folds the batch statistics recorded in `cache` into the running estimates.
    void update_running(const Cache& cache);
    void visit(const std::string& prefix, const ParamVisitor<Scalar>& f);
};

/// Mean-pools both modalities, concatenates (audio, video) and applies a
/// linear map.  Regression heads squash the pooled feature with tanh first.
template <typename Scalar>
struct TaskHead {
    using scalar_type = Scalar;
    struct Cache {
        typename Linear<Scalar>::Cache proj;
        RowVec<Scalar> squashed;
        Index audio_tokens = 0;
        Index video_tokens = 0;
        bool valid = false;
    };

    bool regression = false;
    Linear<Scalar> proj;

    TaskHead() = default;
    TaskHead(Index dim, Index outputs, bool regress, InitContext& ctx);

    RowVec<Scalar> forward(const IavclOutput<Scalar>& in, Cache* cache = nullptr) const;
    IavclOutput<Scalar> backward(const Cache& cache, const RowVec<Scalar>& dy);
    void visit(const std::string& prefix, const ParamVisitor<Scalar>& f);
};

template <typename Scalar>
struct FinetuneSample {
    typename PatchEmbed<Scalar>::Cache video_embed, audio_embed;
    typename LgiEncoder<Scalar>::Cache video_encoder, audio_encoder;
    typename Iavcl<Scalar>::Cache iavcl;
    typename TaskHead<Scalar>::Cache head;
    RowVec<Scalar> output;
};

/// Encoders + IAV-CL + task head, used by both supervised stages.
template <typename Scalar>
struct FinetuneModel {
    using scalar_type = Scalar;

    ModelConfig cfg;
    PatchEmbed<Scalar> video_embed, audio_embed;
    LgiEncoder<Scalar> video_encoder, audio_encoder;
    Iavcl<Scalar> iavcl;
    TaskHead<Scalar> head;

    FinetuneModel() = default;
    FinetuneModel(const ModelConfig& config, Index outputs, bool regression, InitContext& ctx);

    FinetuneSample<Scalar> forward_sample(const RawClip& clip, Mode mode, const DropPath& drop = {}) const;
    RowVec<Scalar> predict(const RawClip& clip) const;
    void backward_sample(const FinetuneSample<Scalar>& sample, const RowVec<Scalar>& doutput);
    void visit(const std::string& prefix, const ParamVisitor<Scalar>& f);
};

} // namespace avmae
