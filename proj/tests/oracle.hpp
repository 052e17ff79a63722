#pragma once

// Straight-line reference implementations used only by the tests.  Plain
// nested loops over std::vector in double precision; parameters are read out
// of the library blocks, nothing else is shared with the library code paths.

#include "avmae/iavcl.hpp"
#include "avmae/lgi_encoder.hpp"
#include "avmae/pretrain_graph.hpp"

#include <cmath>
#include <vector>

namespace oracle {

using Tab = std::vector<std::vector<double>>;
using avmae::Index;
using avmae::Mat;

template <typename S>
Tab tab(const Mat<S>& m)
{
    Tab t(static_cast<std::size_t>(m.rows()), std::vector<double>(static_cast<std::size_t>(m.cols())));
    for (Index i = 0; i < m.rows(); ++i)
        for (Index j = 0; j < m.cols(); ++j)
            t[i][j] = static_cast<double>(m(i, j));
    return t;
}

inline double max_abs_diff(const Tab& a, const Tab& b)
{
    if (a.size() != b.size())
        return INFINITY;
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        if (a[i].size() != b[i].size())
            return INFINITY;
        for (std::size_t j = 0; j < a[i].size(); ++j)
            m = std::max(m, std::abs(a[i][j] - b[i][j]));
    }
    return m;
}

template <typename S>
double max_abs_diff(const Mat<S>& a, const Tab& b)
{
    return max_abs_diff(tab(a), b);
}

inline Tab zeros(std::size_t r, std::size_t c) { return Tab(r, std::vector<double>(c, 0.0)); }

inline Tab add(const Tab& a, const Tab& b)
{
    Tab y = a;
    for (std::size_t i = 0; i < y.size(); ++i)
        for (std::size_t j = 0; j < y[i].size(); ++j)
            y[i][j] += b[i][j];
    return y;
}

inline Tab rows_of(const Tab& x, const std::vector<Index>& rows)
{
    Tab y;
    for (Index r : rows)
        y.push_back(x[static_cast<std::size_t>(r)]);
    return y;
}

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

template <typename S>
Tab linear(const Tab& x, const avmae::Linear<S>& l)
{
    const auto in = static_cast<std::size_t>(l.weight.rows);
    const auto out = static_cast<std::size_t>(l.weight.cols);
    Tab y = zeros(x.size(), out);
    for (std::size_t i = 0; i < x.size(); ++i)
        for (std::size_t o = 0; o < out; ++o) {
            double s = static_cast<double>(l.bias.value(0, static_cast<Index>(o)));
            for (std::size_t j = 0; j < in; ++j)
                s += x[i][j] * static_cast<double>(l.weight.value(static_cast<Index>(j), static_cast<Index>(o)));
            y[i][o] = s;
        }
    return y;
}

template <typename S>
Tab layer_norm(const Tab& x, const avmae::LayerNorm<S>& ln)
{
    Tab y = x;
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double n = static_cast<double>(x[i].size());
        double mean = 0.0;
        for (double v : x[i])
            mean += v;
        mean /= n;
        double var = 0.0;
        for (double v : x[i])
            var += (v - mean) * (v - mean);
        var /= n;
        const double inv = 1.0 / std::sqrt(var + 1e-6);
        for (std::size_t j = 0; j < x[i].size(); ++j)
            y[i][j] = (x[i][j] - mean) * inv * static_cast<double>(ln.scale.value(0, static_cast<Index>(j))) +
                      static_cast<double>(ln.shift.value(0, static_cast<Index>(j)));
    }
    return y;
}

template <typename S>
Tab attention(const Tab& query, const Tab& kv, const avmae::Attention<S>& a)
{
    const Tab q = linear(query, a.q_proj);
    const Tab k = linear(kv, a.k_proj);
    const Tab v = linear(kv, a.v_proj);
    const std::size_t c = q[0].size();
    const std::size_t heads = static_cast<std::size_t>(a.heads);
    const std::size_t d = c / heads;
    Tab cat = zeros(q.size(), c);
    for (std::size_t h = 0; h < heads; ++h)
        for (std::size_t i = 0; i < q.size(); ++i) {
            std::vector<double> logit(k.size());
            double mx = -INFINITY;
            for (std::size_t j = 0; j < k.size(); ++j) {
                double s = 0.0;
                for (std::size_t e = 0; e < d; ++e)
                    s += q[i][h * d + e] * k[j][h * d + e];
                logit[j] = s / std::sqrt(static_cast<double>(d));
                mx = std::max(mx, logit[j]);
            }
            double z = 0.0;
            for (double& l : logit) {
                l = std::exp(l - mx);
                z += l;
            }
            for (std::size_t j = 0; j < k.size(); ++j)
                for (std::size_t e = 0; e < d; ++e)
                    cat[i][h * d + e] += logit[j] / z * v[j][h * d + e];
        }
    return linear(cat, a.o_proj);
}

template <typename S>
Tab feed_forward(const Tab& x, const avmae::FeedForward<S>& f)
{
    Tab h = linear(x, f.fc1);
    for (auto& row : h)
        for (double& v : row)
            v = 0.5 * v * (1.0 + std::erf(v / std::sqrt(2.0)));
    return linear(h, f.fc2);
}

// batch statistics over the rows
template <typename S>
Tab conv_bn_prelu(const Tab& x, const avmae::ConvBnPrelu<S>& b)
{
    Tab z = linear(x, b.conv);
    const std::size_t n = z.size();
    for (std::size_t c = 0; c < z[0].size(); ++c) {
        double mean = 0.0;
        for (std::size_t i = 0; i < n; ++i)
            mean += z[i][c];
        mean /= static_cast<double>(n);
        double var = 0.0;
        for (std::size_t i = 0; i < n; ++i)
            var += (z[i][c] - mean) * (z[i][c] - mean);
        var /= static_cast<double>(n);
        const auto ci = static_cast<Index>(c);
        for (std::size_t i = 0; i < n; ++i) {
            double v = (z[i][c] - mean) / std::sqrt(var + 1e-5) * static_cast<double>(b.bn_scale.value(0, ci)) +
                       static_cast<double>(b.bn_shift.value(0, ci));
            if (v <= 0.0)
                v *= static_cast<double>(b.prelu_slope.value(0, ci));
            z[i][c] = v;
        }
    }
    return z;
}

struct LgiOut {
    Tab locals;
    Tab regions;
};

template <typename S>
LgiOut lgi_layer(const Tab& locals, const Tab& regions, const std::vector<std::vector<Index>>& members, const avmae::LgiLayer<S>& L)
{
    const std::size_t k = regions.size();
    Tab x1 = locals;
    Tab s1 = regions;
    for (std::size_t i = 0; i < k; ++i) {
        Tab z{regions[i]};
        for (Index r : members[i])
            z.push_back(locals[static_cast<std::size_t>(r)]);
        const Tab o = add(z, attention(layer_norm(z, L.norm1), layer_norm(z, L.norm1), L.attn1));
        s1[i] = o[0];
        for (std::size_t r = 0; r < members[i].size(); ++r)
            x1[static_cast<std::size_t>(members[i][r])] = o[r + 1];
    }
    const Tab n2 = layer_norm(s1, L.norm2);
    const Tab s2 = add(s1, attention(n2, n2, L.attn2));

    Tab x2 = x1;
    for (std::size_t i = 0; i < k; ++i) {
        if (members[i].empty())
            continue;
        const Tab upd = attention(layer_norm(rows_of(x1, members[i]), L.norm3q), layer_norm(s2, L.norm3kv), L.attn3);
        for (std::size_t r = 0; r < members[i].size(); ++r)
            for (std::size_t c = 0; c < upd[r].size(); ++c)
                x2[static_cast<std::size_t>(members[i][r])][c] += upd[r][c];
    }

    Tab s3 = s2;
    const Tab s2q = layer_norm(s2, L.norm4q);
    if (L.stage4_global) {
        if (!x2.empty())
            s3 = add(s2, attention(s2q, layer_norm(x2, L.norm4kv), L.attn4));
    } else {
        for (std::size_t i = 0; i < k; ++i) {
            if (members[i].empty())
                continue;
            const Tab upd = attention(Tab{s2q[i]}, layer_norm(rows_of(x2, members[i]), L.norm4kv), L.attn4);
            for (std::size_t c = 0; c < upd[0].size(); ++c)
                s3[i][c] += upd[0][c];
        }
    }
    LgiOut out;
    out.locals = x2.empty() ? x2 : add(x2, feed_forward(layer_norm(x2, L.norm5), L.ffn));
    out.regions = add(s3, feed_forward(layer_norm(s3, L.norm5), L.ffn));
    return out;
}

template <typename S>
std::pair<Tab, Tab> fusion_block(const Tab& video, const Tab& audio, const avmae::FusionBlock<S>& b)
{
    const Tab v1 = add(video, attention(layer_norm(video, b.video_norm_q), layer_norm(audio, b.video_norm_kv), b.video_attn));
    const Tab a1 = add(audio, attention(layer_norm(audio, b.audio_norm_q), layer_norm(video, b.audio_norm_kv), b.audio_attn));
    return {add(v1, feed_forward(layer_norm(v1, b.video_ffn_norm), b.video_ffn)),
            add(a1, feed_forward(layer_norm(a1, b.audio_ffn_norm), b.audio_ffn))};
}

template <typename S>
Tab dier_branch(const Tab& own, const Tab& other, const avmae::DierBranch<S>& b)
{
    const Tab ns = layer_norm(own, b.self_norm);
    const Tab fs = add(own, attention(ns, ns, b.self_attn));
    const Tab fc = add(own, attention(layer_norm(own, b.cross_norm_q), layer_norm(other, b.cross_norm_kv), b.cross_attn));
    Tab sc = fs;
    for (std::size_t i = 0; i < sc.size(); ++i)
        sc[i].insert(sc[i].end(), fc[i].begin(), fc[i].end());
    const Tab zs = linear(sc, b.gate_self);
    const Tab zc = linear(sc, b.gate_cross);
    Tab y = fs;
    for (std::size_t i = 0; i < y.size(); ++i)
        for (std::size_t c = 0; c < y[i].size(); ++c)
            y[i][c] = sigmoid(zs[i][c]) * fs[i][c] + sigmoid(zc[i][c]) * fc[i][c];
    return y;
}

template <typename S>
Tab refinement(const Tab& joint, const Tab& audio, const Tab& video, const avmae::Refinement<S>& r)
{
    const Tab ra = conv_bn_prelu(attention(joint, audio, r.attn), r.conv);
    const Tab rv = conv_bn_prelu(attention(joint, video, r.attn), r.conv);
    return layer_norm(add(add(joint, ra), rv), r.norm);
}

template <typename S>
Tab hafe_branch(const std::vector<Tab>& units, const Tab& joint, const avmae::HafeBranch<S>& h)
{
    const std::size_t n = units.size();
    const std::size_t k = units[0].size();
    std::vector<Tab> gamma(n, Tab(k));
    for (std::size_t t = 0; t < k; ++t) {
        Tab x;
        for (std::size_t l = 0; l < n; ++l)
            x.push_back(units[l][t]);
        const Tab nx = layer_norm(x, h.unit_norm);
        Tab y = add(x, attention(nx, nx, h.unit_attn));
        y = add(y, feed_forward(layer_norm(y, h.unit_ffn_norm), h.unit_ffn));
        for (std::size_t l = 0; l < n; ++l)
            gamma[l][t] = y[l];
    }
    Tab f3 = zeros(k, units[0][0].size());
    for (std::size_t l = 0; l < n; ++l) {
        const Tab z = linear(gamma[l], h.gate);
        for (std::size_t t = 0; t < k; ++t)
            for (std::size_t c = 0; c < f3[t].size(); ++c)
                f3[t][c] += sigmoid(z[t][c]) * gamma[l][t][c];
    }
    Tab f4 = add(f3, attention(layer_norm(f3, h.fb_norm_q), layer_norm(joint, h.fb_norm_kv), h.fb_attn));
    return add(f4, feed_forward(layer_norm(f4, h.out_ffn_norm), h.out_ffn));
}

struct Aggregate {
    Tab joint, audio_mean, video_mean;
};

inline Aggregate aggregate(const std::vector<Tab>& audio, const std::vector<Tab>& video, const std::vector<double>& wa,
                           const std::vector<double>& wv)
{
    const std::size_t k = audio[0].size();
    const std::size_t c = audio[0][0].size();
    Aggregate g{zeros(k, 2 * c), zeros(k, c), zeros(k, c)};
    for (std::size_t l = 0; l < audio.size(); ++l)
        for (std::size_t i = 0; i < k; ++i)
            for (std::size_t j = 0; j < c; ++j) {
                g.joint[i][j] += wa[l] * audio[l][i][j];
                g.joint[i][c + j] += wv[l] * video[l][i][j];
                g.audio_mean[i][j] += audio[l][i][j] / static_cast<double>(audio.size());
                g.video_mean[i][j] += video[l][i][j] / static_cast<double>(video.size());
            }
    return g;
}

template <typename S>
std::vector<double> softmax(const avmae::Param<S>& logits)
{
    std::vector<double> w(static_cast<std::size_t>(logits.cols));
    double mx = -INFINITY;
    for (Index i = 0; i < logits.cols; ++i)
        mx = std::max(mx, static_cast<double>(logits.value(0, i)));
    double z = 0.0;
    for (Index i = 0; i < logits.cols; ++i)
        z += w[static_cast<std::size_t>(i)] = std::exp(static_cast<double>(logits.value(0, i)) - mx);
    for (double& v : w)
        v /= z;
    return w;
}

/// Full IAV-CL in train mode (batch statistics inside the refinement layer).
template <typename S>
std::pair<Tab, Tab> iavcl(const std::vector<Tab>& audio, const std::vector<Tab>& video, const avmae::Iavcl<S>& m)
{
    const Aggregate g = aggregate(audio, video, softmax(m.layer_logits_audio), softmax(m.layer_logits_video));
    Tab joint = linear(g.joint, m.joint_proj);
    Tab fa = g.audio_mean;
    Tab fv = g.video_mean;
    std::vector<Tab> ka, kv;
    for (const auto& u : m.units) {
        const Tab fa2 = dier_branch(fa, fv, u.audio);
        const Tab fv2 = dier_branch(fv, fa, u.video);
        joint = refinement(joint, fa2, fv2, m.refine);
        ka.push_back(fa2);
        kv.push_back(fv2);
        fa = fa2;
        fv = fv2;
    }
    return {hafe_branch(ka, joint, m.hafe_audio), hafe_branch(kv, joint, m.hafe_video)};
}

/// Decoder forward from the visible latents; `visible` and `targets` are
/// ascending grid indices.
template <typename S>
Tab decoder(const Tab& latents, const std::vector<Index>& visible, const std::vector<Index>& targets, const std::vector<Tab>& skips,
            const avmae::Decoder<S>& d)
{
    const Tab pos = tab(d.pos);
    Tab comb;
    for (std::size_t i = 0; i < visible.size(); ++i) {
        std::vector<double> row = latents[i];
        for (std::size_t c = 0; c < row.size(); ++c)
            row[c] += pos[static_cast<std::size_t>(visible[i])][c];
        comb.push_back(row);
    }
    for (Index t : targets) {
        std::vector<double> row(pos[0].size());
        for (std::size_t c = 0; c < row.size(); ++c)
            row[c] = static_cast<double>(d.mask_token.value(0, static_cast<Index>(c))) + pos[static_cast<std::size_t>(t)][c];
        comb.push_back(row);
    }
    Tab h = linear(comb, d.in_proj);
    for (std::size_t j = 0; j < skips.size(); ++j) {
        const Tab p = linear(skips[j], d.skip_proj[j]);
        for (std::size_t i = 0; i < visible.size(); ++i)
            for (std::size_t c = 0; c < p[i].size(); ++c)
                h[i][c] += p[i][c];
    }
    for (const auto& b : d.blocks) {
        const Tab n1 = layer_norm(h, b.norm1);
        h = add(h, attention(n1, n1, b.attn));
        h = add(h, feed_forward(layer_norm(h, b.norm2), b.ffn));
    }
    Tab tail(h.begin() + static_cast<std::ptrdiff_t>(visible.size()), h.end());
    return linear(layer_norm(tail, d.norm), d.head);
}

} // namespace oracle
