#pragma once

#include "avmae/config.hpp"
#include "avmae/core.hpp"
#include "avmae/layers.hpp"

#include <array>
#include <string>
#include <vector>

namespace avmae {

enum class Modality : std::uint8_t { video, audio };

inline const char* to_string(Modality m) { return m == Modality::video ? "video" : "audio"; }

/// One raw audio-visual clip.  Video is (T, H, W, 3) in [0, 1]; audio is a
/// (T_a, F) log-mel style spectrogram.  Both row-major.
struct RawClip {
    std::array<int, 4> video_shape{};
    std::vector<float> video;
    std::array<int, 2> audio_shape{};
    std::vector<float> audio;

    float& v(int t, int y, int x, int c)
    {
        return video[static_cast<std::size_t>(((t * video_shape[1] + y) * video_shape[2] + x) * 3 + c)];
    }
    float v(int t, int y, int x, int c) const
    {
        return video[static_cast<std::size_t>(((t * video_shape[1] + y) * video_shape[2] + x) * 3 + c)];
    }
    float& a(int t, int f) { return audio[static_cast<std::size_t>(t * audio_shape[1] + f)]; }
    float a(int t, int f) const { return audio[static_cast<std::size_t>(t * audio_shape[1] + f)]; }

    bool operator==(const RawClip&) const = default;
};

RawClip make_clip(const std::array<int, 3>& video_thw, const std::array<int, 2>& audio_tf);

/// Clip file: 8-byte magic "AVMAECLP", u32 version, u32 dtype (1 = f32),
/// u32 x4 video dims, u32 x2 audio dims, then little-endian f32 video values
/// followed by audio values.
void save_clip(const RawClip& clip, const std::string& path);
RawClip load_clip(const std::string& path);

struct TokenCoord {
    int t = 0;
    int h = 0;
    int w = 0;
    bool operator==(const TokenCoord&) const = default;
};

/// Row-major (t, h, w) enumeration of a grid.
std::vector<TokenCoord> grid_coords(const Grid3& grid);
Index flat_index(const Grid3& grid, const TokenCoord& c);

template <typename Scalar>
struct TokenSeq {
    Modality modality = Modality::video;
    Grid3 grid;
    Mat<Scalar> tokens;               // [N, C]
    std::vector<TokenCoord> coords;   // one per row
};

/// Fixed sinusoidal encoding of grid coordinates.  Channels are split into one
/// group per axis (3 for video, 2 for audio); each group encodes its coordinate
/// with interleaved sin/cos at geometrically spaced frequencies.
template <typename Scalar>
Mat<Scalar> position_encoding(Modality modality, const Grid3& grid, Index channels);

/// Flattened tubelets [N_v, t*p*p*3], ordered (dt, dy, dx, channel) inside a row.
template <typename Scalar>
Mat<Scalar> video_patches(const RawClip& clip, const ModelConfig& cfg);

/// Flattened spectrogram patches [N_a, p*p], ordered (dt, df).
template <typename Scalar>
Mat<Scalar> audio_patches(const RawClip& clip, const ModelConfig& cfg);

template <typename Scalar>
Mat<Scalar> patches(const RawClip& clip, const ModelConfig& cfg, Modality m)
{
    return m == Modality::video ? video_patches<Scalar>(clip, cfg) : audio_patches<Scalar>(clip, cfg);
}

inline Grid3 modality_grid(const ModelConfig& cfg, Modality m) { return m == Modality::video ? cfg.video_grid() : cfg.audio_grid(); }
inline int modality_patch_dim(const ModelConfig& cfg, Modality m)
{
    return m == Modality::video ? cfg.video_patch_dim() : cfg.audio_patch_dim();
}

/// Per-patch standardization: zero mean, unit variance within each row
/// (epsilon 1e-6).  These are the reconstruction targets.
template <typename Scalar>
Mat<Scalar> normalize_targets(const Mat<Scalar>& patches);

/// Learned linear patch projection plus the fixed position encoding.
template <typename Scalar>
struct PatchEmbed {
    using scalar_type = Scalar;
    struct Cache {
        typename Linear<Scalar>::Cache proj_cache;
        bool valid = false;
    };

    Modality modality = Modality::video;
    Grid3 grid;
    Linear<Scalar> proj;
    Mat<Scalar> pos;  // [N, C], not a parameter

    PatchEmbed() = default;
    PatchEmbed(Modality m, const Grid3& g, Index patch_dim, Index channels, InitContext& ctx);

    /// Embeds the patches at `rows` (grid indices, ascending).  Returns [rows, C].
    Mat<Scalar> forward(const Mat<Scalar>& all_patches, const std::vector<Index>& rows, Cache* cache = nullptr) const;
    /// Gradient w.r.t. the projection only; patches are data.
    void backward(const Cache& cache, const Mat<Scalar>& dy);
    void visit(const std::string& prefix, const ParamVisitor<Scalar>& f);
};

/// Full (unmasked) embedding of a clip's video stream.
template <typename Scalar>
TokenSeq<Scalar> embed_video(const RawClip& clip, const ModelConfig& cfg, const PatchEmbed<Scalar>& embed);

template <typename Scalar>
TokenSeq<Scalar> embed_audio(const RawClip& clip, const ModelConfig& cfg, const PatchEmbed<Scalar>& embed);

/// Throws ShapeError unless the clip geometry matches `cfg`.
void require_clip_geometry(const RawClip& clip, const ModelConfig& cfg);

std::vector<Index> iota_rows(Index n);

} // namespace avmae
