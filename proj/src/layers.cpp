#include "avmae/layers.hpp"

namespace avmae {

namespace {

void require_cache(bool valid, const char* block)
{
    if (!valid)
        throw StateError(std::string(block) + ": backward called before forward");
}

} // namespace

template <typename Scalar>
Mat<Scalar> softmax_rows(const Mat<Scalar>& logits)
{
    Mat<Scalar> p(logits.rows(), logits.cols());
    for (Index r = 0; r < logits.rows(); ++r) {
        const Scalar m = logits.row(r).maxCoeff();
        p.row(r) = (logits.row(r).array() - m).exp().matrix();
        p.row(r) /= p.row(r).sum();
    }
    return p;
}

template <typename Scalar>
Mat<Scalar> gelu(const Mat<Scalar>& x)
{
    const Scalar inv_sqrt2 = Scalar(0.7071067811865476);
    return x.unaryExpr([&](Scalar v) { return Scalar(0.5) * v * (Scalar(1) + std::erf(v * inv_sqrt2)); });
}

template <typename Scalar>
Mat<Scalar> gelu_grad(const Mat<Scalar>& x)
{
    const Scalar inv_sqrt2 = Scalar(0.7071067811865476);
    const Scalar inv_sqrt2pi = Scalar(0.3989422804014327);
    return x.unaryExpr([&](Scalar v) {
        const Scalar cdf = Scalar(0.5) * (Scalar(1) + std::erf(v * inv_sqrt2));
        return cdf + v * inv_sqrt2pi * std::exp(Scalar(-0.5) * v * v);
    });
}

template <typename Scalar>
Mat<Scalar> sigmoid(const Mat<Scalar>& x)
{
    return x.unaryExpr([](Scalar v) { return Scalar(1) / (Scalar(1) + std::exp(-v)); });
}

template <typename Scalar>
Mat<Scalar> gather_rows(const Mat<Scalar>& m, const std::vector<Index>& rows)
{
    Mat<Scalar> out(static_cast<Index>(rows.size()), m.cols());
    for (std::size_t i = 0; i < rows.size(); ++i)
        out.row(static_cast<Index>(i)) = m.row(rows[i]);
    return out;
}

template <typename Scalar>
void scatter_add_rows(Mat<Scalar>& m, const std::vector<Index>& rows, const Mat<Scalar>& src)
{
    for (std::size_t i = 0; i < rows.size(); ++i)
        m.row(rows[i]) += src.row(static_cast<Index>(i));
}

// ---------------------------------------------------------------- Linear

template <typename Scalar>
Linear<Scalar>::Linear(Index in, Index out, InitContext& ctx)
    : weight(Param<Scalar>::xavier(in, out, ctx)),
      bias(Param<Scalar>::zeros(1, out, ParamKind::vector, ctx))
{
}

template <typename Scalar>
Mat<Scalar> Linear<Scalar>::forward(const Mat<Scalar>& x, Cache* cache) const
{
    require_shape(x.cols() == weight.rows,
                  "linear: input " + shape_str(x) + " vs weight " + shape_str(weight.rows, weight.cols));
    Mat<Scalar> y = x * weight.value;
    y.rowwise() += bias.value.row(0);
    if (cache) {
        cache->input = x;
        cache->valid = true;
    }
    return y;
}

template <typename Scalar>
Mat<Scalar> Linear<Scalar>::backward(const Cache& cache, const Mat<Scalar>& dy)
{
    require_cache(cache.valid, "linear");
    require_shape(dy.rows() == cache.input.rows() && dy.cols() == weight.cols, "linear: upstream gradient shape");
    weight.g().noalias() += cache.input.transpose() * dy;
    bias.g() += dy.colwise().sum();
    return dy * weight.value.transpose();
}

template <typename Scalar>
void Linear<Scalar>::visit(const std::string& prefix, const ParamVisitor<Scalar>& f)
{
    f(join_name(prefix, "weight"), weight);
    f(join_name(prefix, "bias"), bias);
}

// ---------------------------------------------------------------- LayerNorm

template <typename Scalar>
LayerNorm<Scalar>::LayerNorm(Index dim, InitContext& ctx)
    : scale(Param<Scalar>::constant(1, dim, ParamKind::vector, Scalar(1), ctx)),
      shift(Param<Scalar>::zeros(1, dim, ParamKind::vector, ctx))
{
}

template <typename Scalar>
Mat<Scalar> LayerNorm<Scalar>::forward(const Mat<Scalar>& x, Cache* cache) const
{
    require_shape(x.cols() == scale.cols, "layer_norm: channel mismatch " + shape_str(x));
    const Index n = x.rows();
    const Index c = x.cols();
    Mat<Scalar> xhat(n, c);
    Eigen::Matrix<Scalar, Eigen::Dynamic, 1> inv_std(n);
    for (Index r = 0; r < n; ++r) {
        const Scalar mean = x.row(r).mean();
        const auto centered = (x.row(r).array() - mean).eval();
        const Scalar var = centered.square().mean();
        inv_std(r) = Scalar(1) / std::sqrt(var + Scalar(eps));
        xhat.row(r) = (centered * inv_std(r)).matrix();
    }
    Mat<Scalar> y = (xhat.array().rowwise() * scale.value.row(0).array()).matrix();
    y.rowwise() += shift.value.row(0);
    if (cache) {
        cache->normalized = std::move(xhat);
        cache->inv_std = std::move(inv_std);
        cache->valid = true;
    }
    return y;
}

template <typename Scalar>
Mat<Scalar> LayerNorm<Scalar>::backward(const Cache& cache, const Mat<Scalar>& dy)
{
    require_cache(cache.valid, "layer_norm");
    const Mat<Scalar>& xhat = cache.normalized;
    require_shape(dy.rows() == xhat.rows() && dy.cols() == xhat.cols(), "layer_norm: upstream gradient shape");
    scale.g() += (dy.array() * xhat.array()).matrix().colwise().sum();
    shift.g() += dy.colwise().sum();

    const Scalar c = static_cast<Scalar>(xhat.cols());
    Mat<Scalar> dxhat = (dy.array().rowwise() * scale.value.row(0).array()).matrix();
    Mat<Scalar> dx(xhat.rows(), xhat.cols());
    for (Index r = 0; r < xhat.rows(); ++r) {
        const Scalar sum_d = dxhat.row(r).sum();
        const Scalar sum_dx = dxhat.row(r).dot(xhat.row(r));
        dx.row(r) = ((c * dxhat.row(r).array() - sum_d - xhat.row(r).array() * sum_dx) * (cache.inv_std(r) / c)).matrix();
    }
    return dx;
}

template <typename Scalar>
void LayerNorm<Scalar>::visit(const std::string& prefix, const ParamVisitor<Scalar>& f)
{
    f(join_name(prefix, "scale"), scale);
    f(join_name(prefix, "shift"), shift);
}

// ---------------------------------------------------------------- Attention

template <typename Scalar>
Attention<Scalar>::Attention(Index dim, Index num_heads, InitContext& ctx)
    : heads(num_heads),
      q_proj(dim, dim, ctx),
      k_proj(dim, dim, ctx),
      v_proj(dim, dim, ctx),
      o_proj(dim, dim, ctx)
{
    require_shape(num_heads > 0 && dim % num_heads == 0,
                  "attention: heads " + std::to_string(num_heads) + " do not divide channels " + std::to_string(dim));
}

template <typename Scalar>
Mat<Scalar> Attention<Scalar>::forward(const Mat<Scalar>& query, const Mat<Scalar>& kv, Cache* cache) const
{
    const Index c = dim();
    require_shape(query.cols() == c && kv.cols() == c,
                  "attention: channel mismatch query " + shape_str(query) + " kv " + shape_str(kv) + " dim " +
                      std::to_string(c));
    require_shape(query.rows() >= 1 && kv.rows() >= 1, "attention: empty query or key/value set");

    Cache local;
    Cache& cc = cache ? *cache : local;
    cc.q = q_proj.forward(query, cache ? &cc.q_cache : nullptr);
    cc.k = k_proj.forward(kv, cache ? &cc.k_cache : nullptr);
    cc.v = v_proj.forward(kv, cache ? &cc.v_cache : nullptr);

    const Index d = head_dim();
    const Scalar scale = Scalar(1) / std::sqrt(static_cast<Scalar>(d));
    Mat<Scalar> concat(query.rows(), c);
    cc.probs.assign(static_cast<std::size_t>(heads), Mat<Scalar>());
    for (Index h = 0; h < heads; ++h) {
        const Mat<Scalar> logits = (cc.q.middleCols(h * d, d) * cc.k.middleCols(h * d, d).transpose()) * scale;
        Mat<Scalar> p = softmax_rows(logits);
        concat.middleCols(h * d, d).noalias() = p * cc.v.middleCols(h * d, d);
        cc.probs[static_cast<std::size_t>(h)] = std::move(p);
    }
    Mat<Scalar> out = o_proj.forward(concat, cache ? &cc.o_cache : nullptr);
    if (cache)
        cache->valid = true;
    return out;
}

template <typename Scalar>
std::pair<Mat<Scalar>, Mat<Scalar>> Attention<Scalar>::backward(const Cache& cache, const Mat<Scalar>& dy)
{
    require_cache(cache.valid, "attention");
    const Index d = head_dim();
    const Scalar scale = Scalar(1) / std::sqrt(static_cast<Scalar>(d));
    const Mat<Scalar> dconcat = o_proj.backward(cache.o_cache, dy);

    Mat<Scalar> dq(cache.q.rows(), cache.q.cols());
    Mat<Scalar> dk(cache.k.rows(), cache.k.cols());
    Mat<Scalar> dv(cache.v.rows(), cache.v.cols());
    for (Index h = 0; h < heads; ++h) {
        const Mat<Scalar>& p = cache.probs[static_cast<std::size_t>(h)];
        const auto dout_h = dconcat.middleCols(h * d, d);
        dv.middleCols(h * d, d).noalias() = p.transpose() * dout_h;
        const Mat<Scalar> dp = dout_h * cache.v.middleCols(h * d, d).transpose();
        Mat<Scalar> dlogits = p.cwiseProduct(dp);
        const Eigen::Matrix<Scalar, Eigen::Dynamic, 1> row_dot = dlogits.rowwise().sum();
        dlogits -= (p.array().colwise() * row_dot.array()).matrix();
        dlogits *= scale;
        dq.middleCols(h * d, d).noalias() = dlogits * cache.k.middleCols(h * d, d);
        dk.middleCols(h * d, d).noalias() = dlogits.transpose() * cache.q.middleCols(h * d, d);
    }
    Mat<Scalar> dquery = q_proj.backward(cache.q_cache, dq);
    Mat<Scalar> dkv = k_proj.backward(cache.k_cache, dk);
    dkv += v_proj.backward(cache.v_cache, dv);
    return {std::move(dquery), std::move(dkv)};
}

template <typename Scalar>
Mat<Scalar> Attention<Scalar>::backward_self(const Cache& cache, const Mat<Scalar>& dy)
{
    auto [dq, dkv] = backward(cache, dy);
    return dq + dkv;
}

template <typename Scalar>
void Attention<Scalar>::visit(const std::string& prefix, const ParamVisitor<Scalar>& f)
{
    q_proj.visit(join_name(prefix, "q"), f);
    k_proj.visit(join_name(prefix, "k"), f);
    v_proj.visit(join_name(prefix, "v"), f);
    o_proj.visit(join_name(prefix, "o"), f);
}

// ---------------------------------------------------------------- FeedForward

template <typename Scalar>
FeedForward<Scalar>::FeedForward(Index dim, Index hidden, InitContext& ctx) : fc1(dim, hidden, ctx), fc2(hidden, dim, ctx)
{
}

template <typename Scalar>
Mat<Scalar> FeedForward<Scalar>::forward(const Mat<Scalar>& x, Cache* cache) const
{
    Mat<Scalar> h = fc1.forward(x, cache ? &cache->fc1_cache : nullptr);
    Mat<Scalar> y = fc2.forward(gelu(h), cache ? &cache->fc2_cache : nullptr);
    if (cache) {
        cache->pre_activation = std::move(h);
        cache->valid = true;
    }
    return y;
}

template <typename Scalar>
Mat<Scalar> FeedForward<Scalar>::backward(const Cache& cache, const Mat<Scalar>& dy)
{
    require_cache(cache.valid, "feed_forward");
    const Mat<Scalar> dact = fc2.backward(cache.fc2_cache, dy);
    const Mat<Scalar> dh = dact.cwiseProduct(gelu_grad(cache.pre_activation));
    return fc1.backward(cache.fc1_cache, dh);
}

template <typename Scalar>
void FeedForward<Scalar>::visit(const std::string& prefix, const ParamVisitor<Scalar>& f)
{
    fc1.visit(join_name(prefix, "fc1"), f);
    fc2.visit(join_name(prefix, "fc2"), f);
}

// ---------------------------------------------------------------- ConvBnPrelu

template <typename Scalar>
ConvBnPrelu<Scalar>::ConvBnPrelu(Index dim, InitContext& ctx)
    : conv(dim, dim, ctx),
      bn_scale(Param<Scalar>::constant(1, dim, ParamKind::vector, Scalar(1), ctx)),
      bn_shift(Param<Scalar>::zeros(1, dim, ParamKind::vector, ctx)),
      prelu_slope(Param<Scalar>::constant(1, dim, ParamKind::vector, Scalar(0.25), ctx)),
      running_mean(Param<Scalar>::zeros(1, dim, ParamKind::buffer, ctx)),
      running_var(Param<Scalar>::constant(1, dim, ParamKind::buffer, Scalar(1), ctx)),
      running_updates(Param<Scalar>::zeros(1, 1, ParamKind::buffer, ctx))
{
}

template <typename Scalar>
bool ConvBnPrelu<Scalar>::has_running_stats() const
{
    return running_updates.allocated() && running_updates.value(0, 0) > Scalar(0);
}

template <typename Scalar>
Mat<Scalar> ConvBnPrelu<Scalar>::forward(const Mat<Scalar>& x, Mode mode, Cache* cache) const
{
    require_shape(x.rows() >= 1, "conv_bn_prelu: empty input");
    Cache local;
    Cache& cc = cache ? *cache : local;
    const Mat<Scalar> z = conv.forward(x, cache ? &cc.conv_cache : nullptr);

    RowVec<Scalar> mean, var;
    if (mode == Mode::train) {
        mean = z.colwise().mean();
        var = (z.rowwise() - mean).array().square().matrix().colwise().mean();
    } else {
        if (!has_running_stats())
            throw StateError("conv_bn_prelu: eval mode before any running statistics were accumulated");
        mean = running_mean.value.row(0);
        var = running_var.value.row(0);
    }
    const RowVec<Scalar> inv_std = (var.array() + Scalar(eps)).rsqrt().matrix();
    Mat<Scalar> xhat = ((z.rowwise() - mean).array().rowwise() * inv_std.array()).matrix();
    Mat<Scalar> pre = (xhat.array().rowwise() * bn_scale.value.row(0).array()).matrix();
    pre.rowwise() += bn_shift.value.row(0);

    Mat<Scalar> y = pre;
    for (Index r = 0; r < y.rows(); ++r)
        for (Index c = 0; c < y.cols(); ++c)
            if (y(r, c) <= Scalar(0))
                y(r, c) *= prelu_slope.value(0, c);

    if (cache) {
        cc.normalized = std::move(xhat);
        cc.pre_activation = std::move(pre);
        cc.inv_std = inv_std;
        cc.stats = {mean, var};
        cc.mode = mode;
        cc.valid = true;
    }
    return y;
}

template <typename Scalar>
Mat<Scalar> ConvBnPrelu<Scalar>::backward(const Cache& cache, const Mat<Scalar>& dy)
{
    require_cache(cache.valid, "conv_bn_prelu");
    const Mat<Scalar>& pre = cache.pre_activation;
    Mat<Scalar> dpre = dy;
    RowVec<Scalar> dslope = RowVec<Scalar>::Zero(pre.cols());
    for (Index r = 0; r < pre.rows(); ++r)
        for (Index c = 0; c < pre.cols(); ++c)
            if (pre(r, c) <= Scalar(0)) {
                dslope(c) += dy(r, c) * pre(r, c);
                dpre(r, c) = dy(r, c) * prelu_slope.value(0, c);
            }
    prelu_slope.g() += dslope;

    const Mat<Scalar>& xhat = cache.normalized;
    bn_scale.g() += (dpre.array() * xhat.array()).matrix().colwise().sum();
    bn_shift.g() += dpre.colwise().sum();
    const Mat<Scalar> dxhat = (dpre.array().rowwise() * bn_scale.value.row(0).array()).matrix();

    Mat<Scalar> dz;
    if (cache.mode == Mode::train) {
        const Scalar n = static_cast<Scalar>(xhat.rows());
        const RowVec<Scalar> sum_d = dxhat.colwise().sum();
        const RowVec<Scalar> sum_dx = (dxhat.array() * xhat.array()).matrix().colwise().sum();
        dz = (n * dxhat.array()).matrix();
        dz.rowwise() -= sum_d;
        dz -= (xhat.array().rowwise() * sum_dx.array()).matrix();
        dz = (dz.array().rowwise() * (cache.inv_std.array() / n)).matrix();
    } else {
        dz = (dxhat.array().rowwise() * cache.inv_std.array()).matrix();
    }
    return conv.backward(cache.conv_cache, dz);
}

template <typename Scalar>
void ConvBnPrelu<Scalar>::update_running(const BatchStats& stats)
{
    if (!has_running_stats()) {
        running_mean.value.row(0) = stats.mean;
        running_var.value.row(0) = stats.var;
    } else {
        const Scalar m = Scalar(momentum);
        running_mean.value.row(0) = (Scalar(1) - m) * running_mean.value.row(0) + m * stats.mean;
        running_var.value.row(0) = (Scalar(1) - m) * running_var.value.row(0) + m * stats.var;
    }
    running_updates.value(0, 0) += Scalar(1);
}

template <typename Scalar>
void ConvBnPrelu<Scalar>::visit(const std::string& prefix, const ParamVisitor<Scalar>& f)
{
    conv.visit(join_name(prefix, "conv"), f);
    f(join_name(prefix, "bn_scale"), bn_scale);
    f(join_name(prefix, "bn_shift"), bn_shift);
    f(join_name(prefix, "prelu_slope"), prelu_slope);
    f(join_name(prefix, "running_mean"), running_mean);
    f(join_name(prefix, "running_var"), running_var);
    f(join_name(prefix, "running_updates"), running_updates);
}

// ---------------------------------------------------------------- TransformerBlock

template <typename Scalar>
TransformerBlock<Scalar>::TransformerBlock(Index dim, Index heads, Index mlp_ratio, InitContext& ctx)
    : norm1(dim, ctx), norm2(dim, ctx), attn(dim, heads, ctx), ffn(dim, dim * mlp_ratio, ctx)
{
}

template <typename Scalar>
Mat<Scalar> TransformerBlock<Scalar>::forward(const Mat<Scalar>& x, Cache* cache) const
{
    const Mat<Scalar> h = x + attn.forward_self(norm1.forward(x, cache ? &cache->norm1_cache : nullptr),
                                                cache ? &cache->attn_cache : nullptr);
    Mat<Scalar> y = h + ffn.forward(norm2.forward(h, cache ? &cache->norm2_cache : nullptr),
                                    cache ? &cache->ffn_cache : nullptr);
    if (cache)
        cache->valid = true;
    return y;
}

template <typename Scalar>
Mat<Scalar> TransformerBlock<Scalar>::backward(const Cache& cache, const Mat<Scalar>& dy)
{
    require_cache(cache.valid, "transformer_block");
    Mat<Scalar> dh = dy + norm2.backward(cache.norm2_cache, ffn.backward(cache.ffn_cache, dy));
    return dh + norm1.backward(cache.norm1_cache, attn.backward_self(cache.attn_cache, dh));
}

template <typename Scalar>
void TransformerBlock<Scalar>::visit(const std::string& prefix, const ParamVisitor<Scalar>& f)
{
    norm1.visit(join_name(prefix, "norm1"), f);
    attn.visit(join_name(prefix, "attn"), f);
    norm2.visit(join_name(prefix, "norm2"), f);
    ffn.visit(join_name(prefix, "ffn"), f);
}

#define AVMAE_INSTANTIATE(S)                                                        \
    template Mat<S> softmax_rows<S>(const Mat<S>&);                                 \
    template Mat<S> gelu<S>(const Mat<S>&);                                         \
    template Mat<S> gelu_grad<S>(const Mat<S>&);                                    \
    template Mat<S> sigmoid<S>(const Mat<S>&);                                      \
    template Mat<S> gather_rows<S>(const Mat<S>&, const std::vector<Index>&);       \
    template void scatter_add_rows<S>(Mat<S>&, const std::vector<Index>&, const Mat<S>&); \
    template struct Linear<S>;                                                      \
    template struct LayerNorm<S>;                                                   \
    template struct Attention<S>;                                                   \
    template struct FeedForward<S>;                                                 \
    template struct ConvBnPrelu<S>;                                                 \
    template struct TransformerBlock<S>;

AVMAE_INSTANTIATE(float)
AVMAE_INSTANTIATE(double)

} // namespace avmae
