#pragma once

#include "avmae/core.hpp"
#include "avmae/param.hpp"

#include <utility>
#include <vector>

namespace avmae {

// Every block follows the same contract: `forward` is const and, when handed a
// cache, records what `backward` needs.  `backward` accumulates parameter
// gradients into the block and returns the gradient w.r.t. its inputs.

template <typename Scalar>
Mat<Scalar> softmax_rows(const Mat<Scalar>& logits);

template <typename Scalar>
Mat<Scalar> gelu(const Mat<Scalar>& x);

template <typename Scalar>
Mat<Scalar> gelu_grad(const Mat<Scalar>& x);

template <typename Scalar>
Mat<Scalar> sigmoid(const Mat<Scalar>& x);

/// Gathers the given rows of `m` in order.
template <typename Scalar>
Mat<Scalar> gather_rows(const Mat<Scalar>& m, const std::vector<Index>& rows);

/// m.row(rows[i]) += src.row(i)
template <typename Scalar>
void scatter_add_rows(Mat<Scalar>& m, const std::vector<Index>& rows, const Mat<Scalar>& src);

template <typename Scalar>
struct Linear {
    using scalar_type = Scalar;
    struct Cache {
        Mat<Scalar> input;
        bool valid = false;
    };

    Param<Scalar> weight;  // [in, out]
    Param<Scalar> bias;    // [1, out]

    Linear() = default;
    Linear(Index in, Index out, InitContext& ctx);

    Index in_features() const { return weight.rows; }
    Index out_features() const { return weight.cols; }

    Mat<Scalar> forward(const Mat<Scalar>& x, Cache* cache = nullptr) const;
    Mat<Scalar> backward(const Cache& cache, const Mat<Scalar>& dy);
    void visit(const std::string& prefix, const ParamVisitor<Scalar>& f);
};

/// Row-wise layer normalization, epsilon 1e-6.
template <typename Scalar>
struct LayerNorm {
    using scalar_type = Scalar;
    static constexpr double eps = 1e-6;
    struct Cache {
        Mat<Scalar> normalized;
        Eigen::Matrix<Scalar, Eigen::Dynamic, 1> inv_std;
        bool valid = false;
    };

    Param<Scalar> scale;
    Param<Scalar> shift;

    LayerNorm() = default;
    LayerNorm(Index dim, InitContext& ctx);

    Mat<Scalar> forward(const Mat<Scalar>& x, Cache* cache = nullptr) const;
    Mat<Scalar> backward(const Cache& cache, const Mat<Scalar>& dy);
    void visit(const std::string& prefix, const ParamVisitor<Scalar>& f);
};

/// Multi-head scaled dot-product attention with separate query and key/value
/// inputs.  Self-attention is the special case `forward(x, x)`; with one head
/// this is the single-head cross-attention used by the refinement layer.
template <typename Scalar>
struct Attention {
    using scalar_type = Scalar;
    struct Cache {
        typename Linear<Scalar>::Cache q_cache, k_cache, v_cache, o_cache;
        Mat<Scalar> q, k, v;
        std::vector<Mat<Scalar>> probs;  // one [Tq, Tk] matrix per head
        bool valid = false;
    };

    Index heads = 1;
    Linear<Scalar> q_proj, k_proj, v_proj, o_proj;

    Attention() = default;
    Attention(Index dim, Index num_heads, InitContext& ctx);

    Index dim() const { return q_proj.in_features(); }
    Index head_dim() const { return dim() / heads; }

    Mat<Scalar> forward(const Mat<Scalar>& query, const Mat<Scalar>& kv, Cache* cache = nullptr) const;
    Mat<Scalar> forward_self(const Mat<Scalar>& x, Cache* cache = nullptr) const { return forward(x, x, cache); }

    /// Returns {d_query, d_kv}.
    std::pair<Mat<Scalar>, Mat<Scalar>> backward(const Cache& cache, const Mat<Scalar>& dy);
    Mat<Scalar> backward_self(const Cache& cache, const Mat<Scalar>& dy);
    void visit(const std::string& prefix, const ParamVisitor<Scalar>& f);
};

/// Two-layer MLP with GELU (erf form) in between.
template <typename Scalar>
struct FeedForward {
    using scalar_type = Scalar;
    struct Cache {
        typename Linear<Scalar>::Cache fc1_cache, fc2_cache;
        Mat<Scalar> pre_activation;
        bool valid = false;
    };

    Linear<Scalar> fc1, fc2;

    FeedForward() = default;
    FeedForward(Index dim, Index hidden, InitContext& ctx);

    Mat<Scalar> forward(const Mat<Scalar>& x, Cache* cache = nullptr) const;
    Mat<Scalar> backward(const Cache& cache, const Mat<Scalar>& dy);
    void visit(const std::string& prefix, const ParamVisitor<Scalar>& f);
};

enum class Mode : std::uint8_t { train, eval };

/// 1x1 convolution (a per-token linear map), batch normalization over the
/// token axis, and per-channel PReLU.
template <typename Scalar>
struct ConvBnPrelu {
    using scalar_type = Scalar;
    static constexpr double eps = 1e-5;
    static constexpr double momentum = 0.1;

    struct BatchStats {
        RowVec<Scalar> mean;
        RowVec<Scalar> var;  // biased
    };
    struct Cache {
        typename Linear<Scalar>::Cache conv_cache;
        Mat<Scalar> normalized;
        Mat<Scalar> pre_activation;
        RowVec<Scalar> inv_std;
        BatchStats stats;
        Mode mode = Mode::train;
        bool valid = false;
    };

    Linear<Scalar> conv;
    Param<Scalar> bn_scale, bn_shift;
    Param<Scalar> prelu_slope;
    Param<Scalar> running_mean, running_var;
    Param<Scalar> running_updates;  // [1,1] count; eval is refused while zero

    ConvBnPrelu() = default;
    ConvBnPrelu(Index dim, InitContext& ctx);

    Mat<Scalar> forward(const Mat<Scalar>& x, Mode mode, Cache* cache = nullptr) const;
    Mat<Scalar> backward(const Cache& cache, const Mat<Scalar>& dy);

    /// Folds one batch's statistics into the running estimates.  The first
    /// update adopts the batch statistics outright.
    void update_running(const BatchStats& stats);
    bool has_running_stats() const;
    void visit(const std::string& prefix, const ParamVisitor<Scalar>& f);
};

/// Pre-norm transformer block: x + MHSA(LN(x)), then + FFN(LN(.)).
template <typename Scalar>
struct TransformerBlock {
    using scalar_type = Scalar;
    struct Cache {
        typename LayerNorm<Scalar>::Cache norm1_cache, norm2_cache;
        typename Attention<Scalar>::Cache attn_cache;
        typename FeedForward<Scalar>::Cache ffn_cache;
        bool valid = false;
    };

    LayerNorm<Scalar> norm1, norm2;
    Attention<Scalar> attn;
    FeedForward<Scalar> ffn;

    TransformerBlock() = default;
    TransformerBlock(Index dim, Index heads, Index mlp_ratio, InitContext& ctx);

    Mat<Scalar> forward(const Mat<Scalar>& x, Cache* cache = nullptr) const;
    Mat<Scalar> backward(const Cache& cache, const Mat<Scalar>& dy);
    void visit(const std::string& prefix, const ParamVisitor<Scalar>& f);
};

} // namespace avmae
