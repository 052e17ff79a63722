#pragma once

#include "avmae/config.hpp"
#include "avmae/embedding.hpp"
#include "avmae/layers.hpp"

#include <array>
#include <vector>

namespace avmae {

/// Assignment of present tokens to the K regions that tile the token grid.
/// Under masking regions are ragged and may be empty.
struct RegionPartition {
    Grid3 grid;
    Grid3 region;
    std::vector<std::vector<Index>> members;  // rows of the token matrix, ascending

    Index regions() const { return static_cast<Index>(members.size()); }
    Index tokens() const;
};

/// `grid_indices[r]` is the flattened grid position of token row r.
RegionPartition partition(const Grid3& grid, const Grid3& region, const std::vector<Index>& grid_indices);

template <typename Scalar>
struct LayerState {
    Mat<Scalar> locals;   // [n, C]
    Mat<Scalar> regions;  // [K, C]
};

/// Residual-branch dropping.  Rate 0 (or no generator) is the identity; kept
/// branches are rescaled by 1 / (1 - rate).
struct DropPath {
    double rate = 0.0;
    Rng* rng = nullptr;

    bool active() const { return rate > 0.0 && rng != nullptr; }
    double draw() const;
};

/// One local-global interaction layer: intra-region self-attention with a
/// region token, inter-region self-attention over region tokens, local-to-
/// global and global-to-local cross-attention, then a shared FFN.
template <typename Scalar>
struct LgiLayer {
    using scalar_type = Scalar;
    static constexpr int branches = 6;

    struct Cache {
        std::vector<typename LayerNorm<Scalar>::Cache> norm1;
        std::vector<typename Attention<Scalar>::Cache> attn1;
        typename LayerNorm<Scalar>::Cache norm2;
        typename Attention<Scalar>::Cache attn2;
        std::vector<typename LayerNorm<Scalar>::Cache> norm3q;
        typename LayerNorm<Scalar>::Cache norm3kv;
        std::vector<typename Attention<Scalar>::Cache> attn3;
        typename LayerNorm<Scalar>::Cache norm4q;
        std::vector<typename LayerNorm<Scalar>::Cache> norm4kv;
        std::vector<typename Attention<Scalar>::Cache> attn4;
        typename LayerNorm<Scalar>::Cache norm5_locals, norm5_regions;
        typename FeedForward<Scalar>::Cache ffn_locals, ffn_regions;
        std::array<Scalar, branches> scale{};
        bool valid = false;
    };

    LayerNorm<Scalar> norm1, norm2, norm3q, norm3kv, norm4q, norm4kv, norm5;
    Attention<Scalar> attn1, attn2, attn3, attn4;
    FeedForward<Scalar> ffn;
    bool stage4_global = false;

    LgiLayer() = default;
    LgiLayer(Index dim, Index heads, Index mlp_ratio, bool global_stage4, InitContext& ctx);

    LayerState<Scalar> forward(const LayerState<Scalar>& state, const RegionPartition& part, Cache* cache = nullptr,
                               const DropPath& drop = {}) const;
    /// Returns {d_locals, d_regions} of the layer input.
    LayerState<Scalar> backward(const Cache& cache, const RegionPartition& part, const LayerState<Scalar>& grad);
    void visit(const std::string& prefix, const ParamVisitor<Scalar>& f);
};

template <typename Scalar>
struct EncoderOutput {
    std::vector<Mat<Scalar>> snapshots;    // region tokens after every layer, [K, C] each
    Mat<Scalar> locals;                    // final local tokens
    std::vector<Mat<Scalar>> skip_locals;  // local tokens after each skip layer
    std::vector<RowVec<Scalar>> pooled;    // mean region token at each skip layer
};

/// Upstream gradients for an EncoderOutput; empty members mean zero.
template <typename Scalar>
struct EncoderGrad {
    std::vector<Mat<Scalar>> snapshots;
    Mat<Scalar> locals;
    std::vector<Mat<Scalar>> skip_locals;
    std::vector<RowVec<Scalar>> pooled;
};

template <typename Scalar>
struct LgiEncoder {
    using scalar_type = Scalar;
    struct Cache {
        RegionPartition part;
        std::vector<typename LgiLayer<Scalar>::Cache> layers;
        Index tokens = 0;
        bool valid = false;
    };

    Grid3 grid;
    Grid3 region;
    std::vector<int> skip_indices;
    Param<Scalar> region_tokens;  // [K, C] initial region tokens
    std::vector<LgiLayer<Scalar>> layers;

    LgiEncoder() = default;
    LgiEncoder(const ModelConfig& cfg, Modality m, InitContext& ctx);

    Index regions() const { return region_tokens.rows; }
    Index dim() const { return region_tokens.cols; }

    /// `tokens` are embedded tokens at grid positions `grid_indices` (ascending).
    EncoderOutput<Scalar> forward(const Mat<Scalar>& tokens, const std::vector<Index>& grid_indices, Cache* cache = nullptr,
                                  const DropPath& drop = {}) const;
    /// Gradient w.r.t. the input tokens.
    Mat<Scalar> backward(const Cache& cache, const EncoderGrad<Scalar>& grad);
    void visit(const std::string& prefix, const ParamVisitor<Scalar>& f);
};

/// Attention score-matrix entries of stages I and II for one layer:
/// sum_i (|region_i| + 1)^2 + K^2.
Index lgi_score_entries(const RegionPartition& part);

} // namespace avmae
