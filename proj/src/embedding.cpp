#include "avmae/embedding.hpp"

#include <cstring>
#include <fstream>
#include <numeric>

namespace avmae {

namespace {

constexpr char clip_magic[8] = {'A', 'V', 'M', 'A', 'E', 'C', 'L', 'P'};
constexpr std::uint32_t clip_version = 1;
constexpr std::uint32_t dtype_f32 = 1;

void put_u32(std::ostream& os, std::uint32_t v)
{
    const unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                                static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
    os.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t get_u32(std::istream& is, const std::string& path)
{
    unsigned char b[4];
    if (!is.read(reinterpret_cast<char*>(b), 4))
        throw Error("clip file " + path + ": truncated header");
    return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
           (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

void put_f32s(std::ostream& os, const std::vector<float>& v)
{
    for (float f : v) {
        std::uint32_t u;
        std::memcpy(&u, &f, 4);
        put_u32(os, u);
    }
}

void get_f32s(std::istream& is, std::vector<float>& v, const std::string& path)
{
    std::vector<unsigned char> raw(v.size() * 4);
    if (!is.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size())))
        throw Error("clip file " + path + ": truncated payload");
    for (std::size_t i = 0; i < v.size(); ++i) {
        const unsigned char* b = raw.data() + 4 * i;
        const std::uint32_t u = static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
                                (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
        std::memcpy(&v[i], &u, 4);
    }
}

} // namespace

RawClip make_clip(const std::array<int, 3>& video_thw, const std::array<int, 2>& audio_tf)
{
    RawClip c;
    c.video_shape = {video_thw[0], video_thw[1], video_thw[2], 3};
    c.video.assign(static_cast<std::size_t>(video_thw[0]) * video_thw[1] * video_thw[2] * 3, 0.0f);
    c.audio_shape = audio_tf;
    c.audio.assign(static_cast<std::size_t>(audio_tf[0]) * audio_tf[1], 0.0f);
    return c;
}

void save_clip(const RawClip& clip, const std::string& path)
{
    std::ofstream os(path, std::ios::binary);
    if (!os)
        throw Error("cannot write clip file " + path);
    os.write(clip_magic, sizeof clip_magic);
    put_u32(os, clip_version);
    put_u32(os, dtype_f32);
    for (int d : clip.video_shape)
        put_u32(os, static_cast<std::uint32_t>(d));
    for (int d : clip.audio_shape)
        put_u32(os, static_cast<std::uint32_t>(d));
    put_f32s(os, clip.video);
    put_f32s(os, clip.audio);
    if (!os)
        throw Error("failed writing clip file " + path);
}

RawClip load_clip(const std::string& path)
{
    std::ifstream is(path, std::ios::binary);
    if (!is)
        throw Error("cannot open clip file " + path);
    char magic[8];
    if (!is.read(magic, 8) || std::memcmp(magic, clip_magic, 8) != 0)
        throw Error("clip file " + path + ": bad magic");
    if (get_u32(is, path) != clip_version)
        throw Error("clip file " + path + ": unsupported version");
    if (get_u32(is, path) != dtype_f32)
        throw Error("clip file " + path + ": unsupported dtype");
    RawClip c;
    for (int& d : c.video_shape)
        d = static_cast<int>(get_u32(is, path));
    for (int& d : c.audio_shape)
        d = static_cast<int>(get_u32(is, path));
    if (c.video_shape[3] != 3)
        throw Error("clip file " + path + ": video must have 3 channels");
    c.video.resize(static_cast<std::size_t>(c.video_shape[0]) * c.video_shape[1] * c.video_shape[2] * 3);
    c.audio.resize(static_cast<std::size_t>(c.audio_shape[0]) * c.audio_shape[1]);
    get_f32s(is, c.video, path);
    get_f32s(is, c.audio, path);
    return c;
}

std::vector<TokenCoord> grid_coords(const Grid3& grid)
{
    std::vector<TokenCoord> out;
    out.reserve(static_cast<std::size_t>(grid.size()));
    for (int t = 0; t < grid.t; ++t)
        for (int h = 0; h < grid.h; ++h)
            for (int w = 0; w < grid.w; ++w)
                out.push_back({t, h, w});
    return out;
}

Index flat_index(const Grid3& grid, const TokenCoord& c)
{
    return (static_cast<Index>(c.t) * grid.h + c.h) * grid.w + c.w;
}

std::vector<Index> iota_rows(Index n)
{
    std::vector<Index> v(static_cast<std::size_t>(n));
    std::iota(v.begin(), v.end(), Index{0});
    return v;
}

template <typename Scalar>
Mat<Scalar> position_encoding(Modality modality, const Grid3& grid, Index channels)
{
    const int axes = modality == Modality::video ? 3 : 2;
    const Index base = 2 * (channels / (2 * axes));
    const auto coords = grid_coords(grid);
    Mat<Scalar> pe(static_cast<Index>(coords.size()), channels);
    for (std::size_t n = 0; n < coords.size(); ++n) {
        const int vals[3] = {coords[n].t, coords[n].h, coords[n].w};
        Index col = 0;
        for (int a = 0; a < axes; ++a) {
            const Index group = a + 1 < axes ? base : channels - base * (axes - 1);
            const double pos = static_cast<double>(vals[axes == 3 ? a : a + 1]);
            for (Index j = 0; j < group; ++j, ++col) {
                const double freq = std::pow(10000.0, -static_cast<double>(2 * (j / 2)) / static_cast<double>(group));
                pe(static_cast<Index>(n), col) = static_cast<Scalar>(j % 2 == 0 ? std::sin(pos * freq) : std::cos(pos * freq));
            }
        }
    }
    return pe;
}

void require_clip_geometry(const RawClip& clip, const ModelConfig& cfg)
{
    const bool ok = clip.video_shape[0] == cfg.video_input[0] && clip.video_shape[1] == cfg.video_input[1] &&
                    clip.video_shape[2] == cfg.video_input[2] && clip.video_shape[3] == 3 &&
                    clip.audio_shape[0] == cfg.audio_input[0] && clip.audio_shape[1] == cfg.audio_input[1];
    if (!ok)
        throw ShapeError("clip geometry video " + std::to_string(clip.video_shape[0]) + "x" + std::to_string(clip.video_shape[1]) +
                         "x" + std::to_string(clip.video_shape[2]) + " audio " + std::to_string(clip.audio_shape[0]) + "x" +
                         std::to_string(clip.audio_shape[1]) + " does not match config '" + cfg.name + "'");
    const auto errs = validate(cfg, {clip.video_shape[0], clip.video_shape[1], clip.video_shape[2]}, clip.audio_shape);
    if (!errs.empty())
        throw ShapeError("clip geometry invalid: " + errs.front());
}

template <typename Scalar>
Mat<Scalar> video_patches(const RawClip& clip, const ModelConfig& cfg)
{
    require_clip_geometry(clip, cfg);
    const Grid3 g = cfg.video_grid();
    const int tt = cfg.video_tubelet[0];
    const int ph = cfg.video_tubelet[1];
    const int pw = cfg.video_tubelet[2];
    Mat<Scalar> out(g.size(), cfg.video_patch_dim());
    Index row = 0;
    for (const auto& c : grid_coords(g)) {
        Index col = 0;
        for (int dt = 0; dt < tt; ++dt)
            for (int dy = 0; dy < ph; ++dy)
                for (int dx = 0; dx < pw; ++dx)
                    for (int ch = 0; ch < 3; ++ch)
                        out(row, col++) = static_cast<Scalar>(clip.v(c.t * tt + dt, c.h * ph + dy, c.w * pw + dx, ch));
        ++row;
    }
    return out;
}

template <typename Scalar>
Mat<Scalar> audio_patches(const RawClip& clip, const ModelConfig& cfg)
{
    require_clip_geometry(clip, cfg);
    const Grid3 g = cfg.audio_grid();
    const int pt = cfg.audio_patch[0];
    const int pf = cfg.audio_patch[1];
    Mat<Scalar> out(g.size(), cfg.audio_patch_dim());
    Index row = 0;
    for (const auto& c : grid_coords(g)) {
        Index col = 0;
        for (int dt = 0; dt < pt; ++dt)
            for (int df = 0; df < pf; ++df)
                out(row, col++) = static_cast<Scalar>(clip.a(c.h * pt + dt, c.w * pf + df));
        ++row;
    }
    return out;
}

template <typename Scalar>
Mat<Scalar> normalize_targets(const Mat<Scalar>& patches)
{
    Mat<Scalar> out(patches.rows(), patches.cols());
    for (Index r = 0; r < patches.rows(); ++r) {
        const Scalar mean = patches.row(r).mean();
        const auto centered = (patches.row(r).array() - mean).eval();
        const Scalar var = centered.square().mean();
        out.row(r) = (centered / std::sqrt(var + Scalar(1e-6))).matrix();
    }
    return out;
}

template <typename Scalar>
PatchEmbed<Scalar>::PatchEmbed(Modality m, const Grid3& g, Index patch_dim, Index channels, InitContext& ctx)
    : modality(m), grid(g), proj(patch_dim, channels, ctx)
{
    if (ctx.allocate)
        pos = position_encoding<Scalar>(m, g, channels);
}

template <typename Scalar>
Mat<Scalar> PatchEmbed<Scalar>::forward(const Mat<Scalar>& all_patches, const std::vector<Index>& rows, Cache* cache) const
{
    require_shape(all_patches.rows() == grid.size(), "patch_embed: expected " + std::to_string(grid.size()) + " patches, got " +
                                                         std::to_string(all_patches.rows()));
    Mat<Scalar> y = proj.forward(gather_rows(all_patches, rows), cache ? &cache->proj_cache : nullptr);
    y += gather_rows(pos, rows);
    if (cache)
        cache->valid = true;
    return y;
}

template <typename Scalar>
void PatchEmbed<Scalar>::backward(const Cache& cache, const Mat<Scalar>& dy)
{
    if (!cache.valid)
        throw StateError("patch_embed: backward called before forward");
    proj.backward(cache.proj_cache, dy);
}

template <typename Scalar>
void PatchEmbed<Scalar>::visit(const std::string& prefix, const ParamVisitor<Scalar>& f)
{
    proj.visit(join_name(prefix, "proj"), f);
}

template <typename Scalar>
TokenSeq<Scalar> embed_video(const RawClip& clip, const ModelConfig& cfg, const PatchEmbed<Scalar>& embed)
{
    TokenSeq<Scalar> seq;
    seq.modality = Modality::video;
    seq.grid = cfg.video_grid();
    seq.coords = grid_coords(seq.grid);
    seq.tokens = embed.forward(video_patches<Scalar>(clip, cfg), iota_rows(seq.grid.size()));
    return seq;
}

template <typename Scalar>
TokenSeq<Scalar> embed_audio(const RawClip& clip, const ModelConfig& cfg, const PatchEmbed<Scalar>& embed)
{
    TokenSeq<Scalar> seq;
    seq.modality = Modality::audio;
    seq.grid = cfg.audio_grid();
    seq.coords = grid_coords(seq.grid);
    seq.tokens = embed.forward(audio_patches<Scalar>(clip, cfg), iota_rows(seq.grid.size()));
    return seq;
}

#define AVMAE_INSTANTIATE(S)                                                                               \
    template Mat<S> position_encoding<S>(Modality, const Grid3&, Index);                                   \
    template Mat<S> video_patches<S>(const RawClip&, const ModelConfig&);                                  \
    template Mat<S> audio_patches<S>(const RawClip&, const ModelConfig&);                                  \
    template Mat<S> normalize_targets<S>(const Mat<S>&);                                                   \
    template struct PatchEmbed<S>;                                                                         \
    template TokenSeq<S> embed_video<S>(const RawClip&, const ModelConfig&, const PatchEmbed<S>&);         \
    template TokenSeq<S> embed_audio<S>(const RawClip&, const ModelConfig&, const PatchEmbed<S>&);

AVMAE_INSTANTIATE(float)
AVMAE_INSTANTIATE(double)

} // namespace avmae
