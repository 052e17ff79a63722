#include "avmae/masking.hpp"

#include <algorithm>
#include <iostream>
#include <sstream>

namespace avmae {

Index round_half_up(double x)
{
    return static_cast<Index>(std::floor(x + 0.5 + 1e-9));
}

std::vector<Index> MaskPair::visible() const
{
    std::vector<Index> out;
    for (Index i = 0; i < size(); ++i)
        if (!encoder_mask[static_cast<std::size_t>(i)])
            out.push_back(i);
    return out;
}

std::vector<Index> MaskPair::targets() const
{
    std::vector<Index> out;
    for (Index i = 0; i < size(); ++i)
        if (decoder_targets[static_cast<std::size_t>(i)])
            out.push_back(i);
    return out;
}

Index MaskPair::masked_count() const
{
    return static_cast<Index>(std::count(encoder_mask.begin(), encoder_mask.end(), true));
}

Index MaskPair::target_count() const
{
    return static_cast<Index>(std::count(decoder_targets.begin(), decoder_targets.end(), true));
}

namespace {

void require_ratio(double ratio, const char* what)
{
    if (!(ratio > 0.0 && ratio < 1.0))
        throw MaskError(std::string(what) + ": ratio must lie in (0, 1), got " + std::to_string(ratio));
}

// Marks `count` random entries of `pool` in `mask`.
void mark_random(std::vector<bool>& mask, std::vector<Index> pool, Index count, Rng& rng)
{
    shuffle(pool, rng);
    for (Index i = 0; i < count; ++i)
        mask[static_cast<std::size_t>(pool[static_cast<std::size_t>(i)])] = true;
}

Index checked_mask_count(Index n, double ratio, const char* what)
{
    const Index masked = round_half_up(ratio * static_cast<double>(n));
    if (masked >= n)
        throw MaskError(std::string(what) + ": ratio " + std::to_string(ratio) + " leaves no visible position out of " +
                        std::to_string(n));
    if (masked < 1)
        throw MaskError(std::string(what) + ": ratio " + std::to_string(ratio) + " masks nothing out of " + std::to_string(n));
    return masked;
}

} // namespace

std::vector<bool> tube_mask(const Grid3& grid, double ratio, Rng& rng)
{
    require_ratio(ratio, "tube_mask");
    const Index spatial = static_cast<Index>(grid.h) * grid.w;
    const Index masked = checked_mask_count(spatial, ratio, "tube_mask");
    std::vector<bool> plane(static_cast<std::size_t>(spatial), false);
    std::vector<Index> pool(static_cast<std::size_t>(spatial));
    for (Index i = 0; i < spatial; ++i)
        pool[static_cast<std::size_t>(i)] = i;
    mark_random(plane, pool, masked, rng);

    std::vector<bool> mask;
    mask.reserve(static_cast<std::size_t>(spatial * grid.t));
    for (int t = 0; t < grid.t; ++t)
        mask.insert(mask.end(), plane.begin(), plane.end());
    return mask;
}

std::vector<bool> random_mask(Index n, double ratio, Rng& rng)
{
    require_ratio(ratio, "random_mask");
    const Index masked = checked_mask_count(n, ratio, "random_mask");
    std::vector<bool> mask(static_cast<std::size_t>(n), false);
    std::vector<Index> pool(static_cast<std::size_t>(n));
    for (Index i = 0; i < n; ++i)
        pool[static_cast<std::size_t>(i)] = i;
    mark_random(mask, pool, masked, rng);
    return mask;
}

Index decoder_target_count(Index n, double decoder_ratio)
{
    return std::max<Index>(1, round_half_up((1.0 - decoder_ratio) * static_cast<double>(n)));
}

std::vector<bool> running_cell_candidates(const Grid3& grid, int t, double decoder_ratio)
{
    require_ratio(decoder_ratio, "running_cell_mask");
    static constexpr int cycle[4][2] = {{0, 0}, {0, 1}, {1, 1}, {1, 0}};
    const Index per_cell = std::clamp<Index>(round_half_up((1.0 - decoder_ratio) * 4.0), 1, 4);
    std::vector<bool> plane(static_cast<std::size_t>(grid.h) * grid.w, false);
    for (int cy = 0; cy < grid.h; cy += 2)
        for (int cx = 0; cx < grid.w; cx += 2)
            for (Index j = 0; j < per_cell; ++j) {
                const int* off = cycle[(t + j) % 4];
                const int y = cy + off[0];
                const int x = cx + off[1];
                if (y < grid.h && x < grid.w)
                    plane[static_cast<std::size_t>(y * grid.w + x)] = true;
            }
    return plane;
}

namespace {

DecoderMask select_targets(const std::vector<bool>& encoder_mask, const std::vector<bool>& candidates, double decoder_ratio,
                           Rng& rng, const char* what)
{
    const Index n = static_cast<Index>(encoder_mask.size());
    Index wanted = decoder_target_count(n, decoder_ratio);
    const Index masked = static_cast<Index>(std::count(encoder_mask.begin(), encoder_mask.end(), true));
    DecoderMask out;
    if (wanted > masked) {
        out.warning = std::string(what) + ": requested " + std::to_string(wanted) + " targets but only " + std::to_string(masked) +
                      " tokens are encoder-masked; clamped";
        std::clog << "warning: " << *out.warning << '\n';
        wanted = masked;
    }
    std::vector<Index> hits, rest;
    for (Index i = 0; i < n; ++i) {
        if (!encoder_mask[static_cast<std::size_t>(i)])
            continue;
        (candidates[static_cast<std::size_t>(i)] ? hits : rest).push_back(i);
    }
    out.targets.assign(static_cast<std::size_t>(n), false);
    const Index hit_count = static_cast<Index>(hits.size());
    if (hit_count >= wanted) {
        mark_random(out.targets, hits, wanted, rng);
    } else {
        for (Index i : hits)
            out.targets[static_cast<std::size_t>(i)] = true;
        mark_random(out.targets, rest, wanted - hit_count, rng);
    }
    return out;
}

} // namespace

DecoderMask running_cell_mask(const Grid3& grid, const std::vector<bool>& encoder_mask, double decoder_ratio, Rng& rng)
{
    require_shape(static_cast<Index>(encoder_mask.size()) == grid.size(), "running_cell_mask: encoder mask size vs grid");
    std::vector<bool> candidates;
    candidates.reserve(encoder_mask.size());
    for (int t = 0; t < grid.t; ++t) {
        const auto plane = running_cell_candidates(grid, t, decoder_ratio);
        candidates.insert(candidates.end(), plane.begin(), plane.end());
    }
    return select_targets(encoder_mask, candidates, decoder_ratio, rng, "running_cell_mask");
}

DecoderMask random_decoder_mask(const std::vector<bool>& encoder_mask, double decoder_ratio, Rng& rng)
{
    require_ratio(decoder_ratio, "random_decoder_mask");
    const std::vector<bool> none(encoder_mask.size(), false);
    return select_targets(encoder_mask, none, decoder_ratio, rng, "random_decoder_mask");
}

MaskPair make_mask_pair(const ModelConfig& cfg, Modality m, Rng& rng)
{
    MaskPair p;
    if (m == Modality::video) {
        const Grid3 g = cfg.video_grid();
        p.encoder_ratio = cfg.video_mask_ratio;
        p.decoder_ratio = cfg.video_decoder_ratio;
        p.encoder_mask = tube_mask(g, p.encoder_ratio, rng);
        p.decoder_targets = running_cell_mask(g, p.encoder_mask, p.decoder_ratio, rng).targets;
    } else {
        const Grid3 g = cfg.audio_grid();
        p.encoder_ratio = cfg.audio_mask_ratio;
        p.decoder_ratio = cfg.audio_decoder_ratio;
        p.encoder_mask = random_mask(g.size(), p.encoder_ratio, rng);
        p.decoder_targets = random_decoder_mask(p.encoder_mask, p.decoder_ratio, rng).targets;
    }
    return p;
}

template <typename Scalar>
CombinedSeq<Scalar> assemble_combined(const Mat<Scalar>& latents, const MaskPair& masks, const RowVec<Scalar>& mask_token,
                                      const Mat<Scalar>& positions)
{
    const auto vis = masks.visible();
    const auto tgt = masks.targets();
    require_shape(latents.rows() == static_cast<Index>(vis.size()),
                  "assemble_combined: " + std::to_string(latents.rows()) + " latents for " + std::to_string(vis.size()) +
                      " visible tokens");
    require_shape(positions.rows() == masks.size() && positions.cols() == mask_token.cols() &&
                      (latents.rows() == 0 || latents.cols() == mask_token.cols()),
                  "assemble_combined: channel or position table mismatch");
    CombinedSeq<Scalar> out;
    out.visible_count = static_cast<Index>(vis.size());
    out.tokens.resize(static_cast<Index>(vis.size() + tgt.size()), mask_token.cols());
    Index row = 0;
    for (std::size_t i = 0; i < vis.size(); ++i, ++row) {
        out.tokens.row(row) = latents.row(static_cast<Index>(i)) + positions.row(vis[i]);
        out.original_index.push_back(vis[i]);
    }
    for (Index j : tgt) {
        out.tokens.row(row++) = mask_token + positions.row(j);
        out.original_index.push_back(j);
    }
    return out;
}

std::string mask_ascii(const Grid3& grid, const std::vector<bool>& encoder_mask, const std::vector<bool>* targets)
{
    std::ostringstream os;
    for (int t = 0; t < grid.t; ++t) {
        os << "t=" << t << '\n';
        for (int y = 0; y < grid.h; ++y) {
            for (int x = 0; x < grid.w; ++x) {
                const auto i = static_cast<std::size_t>((t * grid.h + y) * grid.w + x);
                char ch = encoder_mask[i] ? '#' : '.';
                if (targets && (*targets)[i])
                    ch = 'o';
                os << ch;
            }
            os << '\n';
        }
    }
    return os.str();
}

std::string mask_pbm(const Grid3& grid, const std::vector<bool>& mask)
{
    std::ostringstream os;
    const int width = grid.w * grid.t + (grid.t - 1);
    os << "P1\n" << width << ' ' << grid.h << '\n';
    for (int y = 0; y < grid.h; ++y) {
        for (int t = 0; t < grid.t; ++t) {
            if (t > 0)
                os << "0 ";
            for (int x = 0; x < grid.w; ++x)
                os << (mask[static_cast<std::size_t>((t * grid.h + y) * grid.w + x)] ? '1' : '0') << ' ';
        }
        os << '\n';
    }
    return os.str();
}

template CombinedSeq<float> assemble_combined<float>(const Mat<float>&, const MaskPair&, const RowVec<float>&, const Mat<float>&);
template CombinedSeq<double> assemble_combined<double>(const Mat<double>&, const MaskPair&, const RowVec<double>&,
                                                       const Mat<double>&);

} // namespace avmae
