#include "avmae/losses.hpp"

#include "avmae/layers.hpp"

namespace avmae {

template <typename Scalar>
LossValue<Scalar> masked_mse(const Mat<Scalar>& targets, const Mat<Scalar>& predictions, const MaskPair& masks)
{
    const auto tgt = masks.targets();
    require_shape(targets.rows() == masks.size(), "masked_mse: target table has " + std::to_string(targets.rows()) +
                                                      " rows for " + std::to_string(masks.size()) + " tokens");
    require_shape(predictions.rows() == static_cast<Index>(tgt.size()) && predictions.cols() == targets.cols(),
                  "masked_mse: predictions " + shape_str(predictions) + " for " + std::to_string(tgt.size()) + " targets");
    const Scalar norm = static_cast<Scalar>((1.0 - masks.decoder_ratio) * static_cast<double>(masks.size()) *
                                            static_cast<double>(targets.cols()));
    const Mat<Scalar> resid = predictions - gather_rows(targets, tgt);
    LossValue<Scalar> out;
    out.value = resid.squaredNorm() / norm;
    out.grad = (Scalar(2) / norm) * resid;
    return out;
}

template <typename Scalar>
ContrastiveLoss<Scalar> info_nce(const Mat<Scalar>& audio, const Mat<Scalar>& video, double temperature)
{
    require_shape(audio.rows() == video.rows() && audio.cols() == video.cols(), "info_nce: feature batch shapes differ");
    const Index b = audio.rows();
    if (b < 2)
        throw ShapeError("info_nce: batch size must be >= 2, got " + std::to_string(b));
    if (!(temperature > 0.0))
        throw Error("info_nce: temperature must be positive");

    const Scalar tiny = Scalar(1e-12);
    const Eigen::Matrix<Scalar, Eigen::Dynamic, 1> na = audio.rowwise().norm().cwiseMax(tiny);
    const Eigen::Matrix<Scalar, Eigen::Dynamic, 1> nv = video.rowwise().norm().cwiseMax(tiny);
    const Mat<Scalar> ah = (audio.array().colwise() / na.array()).matrix();
    const Mat<Scalar> vh = (video.array().colwise() / nv.array()).matrix();
    const Scalar inv_t = static_cast<Scalar>(1.0 / temperature);
    const Mat<Scalar> logits = (ah * vh.transpose()) * inv_t;

    const Mat<Scalar> p_rows = softmax_rows(logits);
    const Mat<Scalar> p_cols = softmax_rows(Mat<Scalar>(logits.transpose()));
    Scalar loss = 0;
    for (Index i = 0; i < b; ++i)
        loss -= std::log(std::max(p_rows(i, i), std::numeric_limits<Scalar>::min())) +
                std::log(std::max(p_cols(i, i), std::numeric_limits<Scalar>::min()));
    const Scalar bs = static_cast<Scalar>(b);
    loss /= Scalar(2) * bs;

    // d loss / d logits
    Mat<Scalar> dl = p_rows + Mat<Scalar>(p_cols.transpose());
    dl.diagonal().array() -= Scalar(2);
    dl /= Scalar(2) * bs;

    const Mat<Scalar> dah = (dl * vh) * inv_t;
    const Mat<Scalar> dvh = (dl.transpose() * ah) * inv_t;
    ContrastiveLoss<Scalar> out;
    out.value = loss;
    out.grad_audio.resize(b, audio.cols());
    out.grad_video.resize(b, video.cols());
    for (Index i = 0; i < b; ++i) {
        out.grad_audio.row(i) = (dah.row(i) - ah.row(i) * ah.row(i).dot(dah.row(i))) / na(i);
        out.grad_video.row(i) = (dvh.row(i) - vh.row(i) * vh.row(i).dot(dvh.row(i))) / nv(i);
    }
    return out;
}

template <typename Scalar>
LossValue<Scalar> cross_entropy_ls(const RowVec<Scalar>& logits, int label, double smoothing)
{
    const Index k = logits.cols();
    if (label < 0 || label >= k)
        throw ShapeError("cross_entropy: label " + std::to_string(label) + " outside [0, " + std::to_string(k) + ")");
    if (!(smoothing >= 0.0 && smoothing < 1.0))
        throw Error("cross_entropy: smoothing must lie in [0, 1)");
    const Scalar m = logits.maxCoeff();
    const Scalar lse = m + std::log((logits.array() - m).exp().sum());
    RowVec<Scalar> q = RowVec<Scalar>::Constant(k, static_cast<Scalar>(smoothing / static_cast<double>(k)));
    q(label) += static_cast<Scalar>(1.0 - smoothing);
    LossValue<Scalar> out;
    out.value = -(q.array() * (logits.array() - lse)).sum();
    out.grad = ((logits.array() - lse).exp() - q.array()).matrix();
    return out;
}

template <typename Scalar>
LossValue<Scalar> mse(const Mat<Scalar>& predictions, const Mat<Scalar>& targets)
{
    require_shape(predictions.rows() == targets.rows() && predictions.cols() == targets.cols(), "mse: shape mismatch");
    const Scalar n = static_cast<Scalar>(predictions.size());
    LossValue<Scalar> out;
    out.value = (predictions - targets).squaredNorm() / n;
    out.grad = (Scalar(2) / n) * (predictions - targets);
    return out;
}

#define AVMAE_INSTANTIATE(S)                                                                      \
    template LossValue<S> masked_mse<S>(const Mat<S>&, const Mat<S>&, const MaskPair&);           \
    template ContrastiveLoss<S> info_nce<S>(const Mat<S>&, const Mat<S>&, double);                \
    template LossValue<S> cross_entropy_ls<S>(const RowVec<S>&, int, double);                     \
    template LossValue<S> mse<S>(const Mat<S>&, const Mat<S>&);

AVMAE_INSTANTIATE(float)
AVMAE_INSTANTIATE(double)

} // namespace avmae
