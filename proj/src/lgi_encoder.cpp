#include "avmae/lgi_encoder.hpp"

namespace avmae {

Index RegionPartition::tokens() const
{
    Index n = 0;
    for (const auto& m : members)
        n += static_cast<Index>(m.size());
    return n;
}

RegionPartition partition(const Grid3& grid, const Grid3& region, const std::vector<Index>& grid_indices)
{
    require_shape(region.t > 0 && region.h > 0 && region.w > 0 && grid.t % region.t == 0 && grid.h % region.h == 0 &&
                      grid.w % region.w == 0,
                  "partition: region (" + std::to_string(region.t) + "," + std::to_string(region.h) + "," +
                      std::to_string(region.w) + ") does not tile grid (" + std::to_string(grid.t) + "," +
                      std::to_string(grid.h) + "," + std::to_string(grid.w) + ")");
    const int rt = grid.t / region.t;
    const int rh = grid.h / region.h;
    const int rw = grid.w / region.w;
    RegionPartition part{grid, region, std::vector<std::vector<Index>>(static_cast<std::size_t>(rt * rh * rw))};
    Index prev = -1;
    for (std::size_t r = 0; r < grid_indices.size(); ++r) {
        const Index g = grid_indices[r];
        require_shape(g > prev && g < grid.size(), "partition: grid indices must be ascending and inside the grid");
        prev = g;
        const int w = static_cast<int>(g % grid.w);
        const int h = static_cast<int>((g / grid.w) % grid.h);
        const int t = static_cast<int>(g / (static_cast<Index>(grid.w) * grid.h));
        const int k = ((t / region.t) * rh + h / region.h) * rw + w / region.w;
        part.members[static_cast<std::size_t>(k)].push_back(static_cast<Index>(r));
    }
    return part;
}

Index lgi_score_entries(const RegionPartition& part)
{
    Index n = 0;
    for (const auto& m : part.members) {
        const Index len = static_cast<Index>(m.size()) + 1;
        n += len * len;
    }
    return n + part.regions() * part.regions();
}

double DropPath::draw() const
{
    if (!active())
        return 1.0;
    return uniform01(*rng) < rate ? 0.0 : 1.0 / (1.0 - rate);
}

template <typename Scalar>
LgiLayer<Scalar>::LgiLayer(Index dim, Index heads, Index mlp_ratio, bool global_stage4, InitContext& ctx)
    : norm1(dim, ctx),
      norm2(dim, ctx),
      norm3q(dim, ctx),
      norm3kv(dim, ctx),
      norm4q(dim, ctx),
      norm4kv(dim, ctx),
      norm5(dim, ctx),
      attn1(dim, heads, ctx),
      attn2(dim, heads, ctx),
      attn3(dim, heads, ctx),
      attn4(dim, heads, ctx),
      ffn(dim, dim * mlp_ratio, ctx),
      stage4_global(global_stage4)
{
}

template <typename Scalar>
LayerState<Scalar> LgiLayer<Scalar>::forward(const LayerState<Scalar>& state, const RegionPartition& part, Cache* cache,
                                             const DropPath& drop) const
{
    const Index k = part.regions();
    const Index c = state.regions.cols();
    require_shape(state.regions.rows() == k, "lgi_layer: " + std::to_string(state.regions.rows()) + " region tokens for " +
                                                 std::to_string(k) + " regions");
    require_shape(state.locals.rows() == part.tokens() && (state.locals.rows() == 0 || state.locals.cols() == c),
                  "lgi_layer: local tokens " + shape_str(state.locals) + " vs partition of " + std::to_string(part.tokens()));
    const std::size_t ks = static_cast<std::size_t>(k);

    Cache local_cache;
    Cache& cc = cache ? *cache : local_cache;
    const bool rec = cache != nullptr;
    for (auto& s : cc.scale)
        s = static_cast<Scalar>(drop.draw());
    cc.norm1.assign(ks, {});
    cc.attn1.assign(ks, {});
    cc.norm3q.assign(ks, {});
    cc.attn3.assign(ks, {});
    cc.norm4kv.assign(stage4_global ? 1 : ks, {});
    cc.attn4.assign(stage4_global ? 1 : ks, {});

    // Stage I: each region token attends jointly with its region's locals.
    Mat<Scalar> x1(state.locals.rows(), c);
    Mat<Scalar> s1(k, c);
    for (std::size_t i = 0; i < ks; ++i) {
        const auto& rows = part.members[i];
        Mat<Scalar> z(static_cast<Index>(rows.size()) + 1, c);
        z.row(0) = state.regions.row(static_cast<Index>(i));
        for (std::size_t r = 0; r < rows.size(); ++r)
            z.row(static_cast<Index>(r) + 1) = state.locals.row(rows[r]);
        const Mat<Scalar> zn = norm1.forward(z, rec ? &cc.norm1[i] : nullptr);
        const Mat<Scalar> out = z + cc.scale[0] * attn1.forward_self(zn, rec ? &cc.attn1[i] : nullptr);
        s1.row(static_cast<Index>(i)) = out.row(0);
        for (std::size_t r = 0; r < rows.size(); ++r)
            x1.row(rows[r]) = out.row(static_cast<Index>(r) + 1);
    }

    // Stage II: region tokens exchange information.
    const Mat<Scalar> s2 = s1 + cc.scale[1] * attn2.forward_self(norm2.forward(s1, rec ? &cc.norm2 : nullptr),
                                                                 rec ? &cc.attn2 : nullptr);

    // Stage III: locals read from all region tokens.
    Mat<Scalar> x2 = x1;
    const Mat<Scalar> s2kv = norm3kv.forward(s2, rec ? &cc.norm3kv : nullptr);
    for (std::size_t i = 0; i < ks; ++i) {
        const auto& rows = part.members[i];
        if (rows.empty())
            continue;
        const Mat<Scalar> xi = gather_rows(x1, rows);
        const Mat<Scalar> upd = attn3.forward(norm3q.forward(xi, rec ? &cc.norm3q[i] : nullptr), s2kv, rec ? &cc.attn3[i] : nullptr);
        for (std::size_t r = 0; r < rows.size(); ++r)
            x2.row(rows[r]) += cc.scale[2] * upd.row(static_cast<Index>(r));
    }

    // Stage IV: region tokens read back from locals.
    Mat<Scalar> s3 = s2;
    const Mat<Scalar> s2q = norm4q.forward(s2, rec ? &cc.norm4q : nullptr);
    if (stage4_global) {
        if (x2.rows() > 0)
            s3 += cc.scale[3] * attn4.forward(s2q, norm4kv.forward(x2, rec ? &cc.norm4kv[0] : nullptr), rec ? &cc.attn4[0] : nullptr);
    } else {
        for (std::size_t i = 0; i < ks; ++i) {
            const auto& rows = part.members[i];
            if (rows.empty())
                continue;
            const Mat<Scalar> kv = norm4kv.forward(gather_rows(x2, rows), rec ? &cc.norm4kv[i] : nullptr);
            const Mat<Scalar> q = s2q.row(static_cast<Index>(i));
            s3.row(static_cast<Index>(i)) += cc.scale[3] * attn4.forward(q, kv, rec ? &cc.attn4[i] : nullptr).row(0);
        }
    }

    LayerState<Scalar> out;
    out.locals = x2;
    if (x2.rows() > 0)
        out.locals += cc.scale[4] * ffn.forward(norm5.forward(x2, rec ? &cc.norm5_locals : nullptr), rec ? &cc.ffn_locals : nullptr);
    out.regions = s3 + cc.scale[5] * ffn.forward(norm5.forward(s3, rec ? &cc.norm5_regions : nullptr), rec ? &cc.ffn_regions : nullptr);
    if (cache)
        cache->valid = true;
    return out;
}

template <typename Scalar>
LayerState<Scalar> LgiLayer<Scalar>::backward(const Cache& cache, const RegionPartition& part, const LayerState<Scalar>& grad)
{
    if (!cache.valid)
        throw StateError("lgi_layer: backward called before forward");
    const Index k = part.regions();
    const std::size_t ks = static_cast<std::size_t>(k);
    const Index c = grad.regions.cols();
    const Index n = grad.locals.rows();

    // FFN
    Mat<Scalar> dx2 = grad.locals;
    if (n > 0)
        dx2 += norm5.backward(cache.norm5_locals, ffn.backward(cache.ffn_locals, cache.scale[4] * grad.locals));
    Mat<Scalar> ds3 = grad.regions + norm5.backward(cache.norm5_regions, ffn.backward(cache.ffn_regions, cache.scale[5] * grad.regions));

    // Stage IV
    Mat<Scalar> ds2 = ds3;
    Mat<Scalar> ds2q = Mat<Scalar>::Zero(k, c);
    if (stage4_global) {
        if (n > 0) {
            auto [dq, dkv] = attn4.backward(cache.attn4[0], cache.scale[3] * ds3);
            ds2q += dq;
            dx2 += norm4kv.backward(cache.norm4kv[0], dkv);
        }
    } else {
        for (std::size_t i = 0; i < ks; ++i) {
            const auto& rows = part.members[i];
            if (rows.empty())
                continue;
            const Mat<Scalar> dout = cache.scale[3] * ds3.row(static_cast<Index>(i));
            auto [dq, dkv] = attn4.backward(cache.attn4[i], dout);
            ds2q.row(static_cast<Index>(i)) += dq.row(0);
            scatter_add_rows(dx2, rows, norm4kv.backward(cache.norm4kv[i], dkv));
        }
    }
    ds2 += norm4q.backward(cache.norm4q, ds2q);

    // Stage III
    Mat<Scalar> dx1 = dx2;
    Mat<Scalar> ds2kv = Mat<Scalar>::Zero(k, c);
    for (std::size_t i = 0; i < ks; ++i) {
        const auto& rows = part.members[i];
        if (rows.empty())
            continue;
        const Mat<Scalar> dupd = cache.scale[2] * gather_rows(dx2, rows);
        auto [dq, dkv] = attn3.backward(cache.attn3[i], dupd);
        ds2kv += dkv;
        scatter_add_rows(dx1, rows, norm3q.backward(cache.norm3q[i], dq));
    }
    ds2 += norm3kv.backward(cache.norm3kv, ds2kv);

    // Stage II
    const Mat<Scalar> ds1 = ds2 + norm2.backward(cache.norm2, attn2.backward_self(cache.attn2, cache.scale[1] * ds2));

    // Stage I
    LayerState<Scalar> din;
    din.locals = Mat<Scalar>::Zero(n, c);
    din.regions = Mat<Scalar>::Zero(k, c);
    for (std::size_t i = 0; i < ks; ++i) {
        const auto& rows = part.members[i];
        Mat<Scalar> dz(static_cast<Index>(rows.size()) + 1, c);
        dz.row(0) = ds1.row(static_cast<Index>(i));
        for (std::size_t r = 0; r < rows.size(); ++r)
            dz.row(static_cast<Index>(r) + 1) = dx1.row(rows[r]);
        const Mat<Scalar> dzin = dz + norm1.backward(cache.norm1[i], attn1.backward_self(cache.attn1[i], cache.scale[0] * dz));
        din.regions.row(static_cast<Index>(i)) = dzin.row(0);
        for (std::size_t r = 0; r < rows.size(); ++r)
            din.locals.row(rows[r]) = dzin.row(static_cast<Index>(r) + 1);
    }
    return din;
}

template <typename Scalar>
void LgiLayer<Scalar>::visit(const std::string& prefix, const ParamVisitor<Scalar>& f)
{
    norm1.visit(join_name(prefix, "local_norm"), f);
    attn1.visit(join_name(prefix, "local_attn"), f);
    norm2.visit(join_name(prefix, "global_norm"), f);
    attn2.visit(join_name(prefix, "global_attn"), f);
    norm3q.visit(join_name(prefix, "l2g_norm_q"), f);
    norm3kv.visit(join_name(prefix, "l2g_norm_kv"), f);
    attn3.visit(join_name(prefix, "l2g_attn"), f);
    norm4q.visit(join_name(prefix, "g2l_norm_q"), f);
    norm4kv.visit(join_name(prefix, "g2l_norm_kv"), f);
    attn4.visit(join_name(prefix, "g2l_attn"), f);
    norm5.visit(join_name(prefix, "ffn_norm"), f);
    ffn.visit(join_name(prefix, "ffn"), f);
}

// ---------------------------------------------------------------- encoder

template <typename Scalar>
LgiEncoder<Scalar>::LgiEncoder(const ModelConfig& cfg, Modality m, InitContext& ctx)
    : grid(m == Modality::video ? cfg.video_grid() : cfg.audio_grid()),
      region(m == Modality::video ? cfg.video_region_grid() : cfg.audio_region_grid()),
      skip_indices(cfg.skip_indices)
{
    const Index k = m == Modality::video ? cfg.video_regions() : cfg.audio_regions();
    region_tokens = Param<Scalar>::trunc_normal(k, cfg.encoder_dim, 0.02, ParamKind::vector, ctx);
    layers.reserve(static_cast<std::size_t>(cfg.encoder_depth));
    for (int l = 0; l < cfg.encoder_depth; ++l)
        layers.emplace_back(cfg.encoder_dim, cfg.encoder_heads, cfg.mlp_ratio, cfg.stage4_global, ctx);
}

template <typename Scalar>
EncoderOutput<Scalar> LgiEncoder<Scalar>::forward(const Mat<Scalar>& tokens, const std::vector<Index>& grid_indices, Cache* cache,
                                                  const DropPath& drop) const
{
    require_shape(tokens.rows() == static_cast<Index>(grid_indices.size()), "lgi_encoder: token rows vs grid indices");
    require_shape(tokens.cols() == dim(), "lgi_encoder: channel mismatch " + shape_str(tokens));
    Cache local_cache;
    Cache& cc = cache ? *cache : local_cache;
    cc.part = partition(grid, region, grid_indices);
    cc.tokens = tokens.rows();
    if (cache)
        cc.layers.assign(layers.size(), {});

    EncoderOutput<Scalar> out;
    LayerState<Scalar> state{tokens, region_tokens.value};
    for (std::size_t l = 0; l < layers.size(); ++l) {
        state = layers[l].forward(state, cc.part, cache ? &cc.layers[l] : nullptr, drop);
        out.snapshots.push_back(state.regions);
        if (std::find(skip_indices.begin(), skip_indices.end(), static_cast<int>(l)) != skip_indices.end()) {
            out.skip_locals.push_back(state.locals);
            out.pooled.push_back(state.regions.colwise().mean());
        }
    }
    out.locals = std::move(state.locals);
    if (cache)
        cache->valid = true;
    return out;
}

template <typename Scalar>
Mat<Scalar> LgiEncoder<Scalar>::backward(const Cache& cache, const EncoderGrad<Scalar>& grad)
{
    if (!cache.valid)
        throw StateError("lgi_encoder: backward called before forward");
    const Index k = regions();
    const Index c = dim();
    LayerState<Scalar> g;
    g.locals = grad.locals.size() ? grad.locals : Mat<Scalar>::Zero(cache.tokens, c);
    g.regions = Mat<Scalar>::Zero(k, c);
    std::size_t skip = skip_indices.size();
    for (std::size_t l = layers.size(); l-- > 0;) {
        if (l < grad.snapshots.size() && grad.snapshots[l].size())
            g.regions += grad.snapshots[l];
        if (skip > 0 && skip_indices[skip - 1] == static_cast<int>(l)) {
            --skip;
            if (skip < grad.skip_locals.size() && grad.skip_locals[skip].size())
                g.locals += grad.skip_locals[skip];
            if (skip < grad.pooled.size() && grad.pooled[skip].size())
                g.regions.rowwise() += grad.pooled[skip] / static_cast<Scalar>(k);
        }
        g = layers[l].backward(cache.layers[l], cache.part, g);
    }
    region_tokens.g() += g.regions;
    return g.locals;
}

template <typename Scalar>
void LgiEncoder<Scalar>::visit(const std::string& prefix, const ParamVisitor<Scalar>& f)
{
    f(join_name(prefix, "region_tokens"), region_tokens);
    for (std::size_t l = 0; l < layers.size(); ++l)
        layers[l].visit(join_name(prefix, "layers." + std::to_string(l)), f);
}

template struct LgiLayer<float>;
template struct LgiLayer<double>;
template struct LgiEncoder<float>;
template struct LgiEncoder<double>;

} // namespace avmae
