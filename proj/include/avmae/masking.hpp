#pragma once

#include "avmae/config.hpp"
#include "avmae/core.hpp"
#include "avmae/embedding.hpp"

#include <optional>
#include <string>
#include <vector>

namespace avmae {

/// round(x) with halves rounded up; mask counts are exact, never sampled.
Index round_half_up(double x);

/// Encoder mask (true = hidden from the encoder) and decoder targets
/// (true = reconstructed).  Targets are always a subset of the encoder mask.
struct MaskPair {
    std::vector<bool> encoder_mask;
    std::vector<bool> decoder_targets;
    double encoder_ratio = 0.0;
    double decoder_ratio = 0.0;

    Index size() const { return static_cast<Index>(encoder_mask.size()); }
    std::vector<Index> visible() const;
    std::vector<Index> targets() const;
    Index masked_count() const;
    Index target_count() const;
};

class MaskError : public Error {
public:
    using Error::Error;
};

/// One spatial mask of round(ratio*h*w) positions replicated over all t.
std::vector<bool> tube_mask(const Grid3& grid, double ratio, Rng& rng);

/// Exactly round(ratio*n) positions, uniform without replacement.
std::vector<bool> random_mask(Index n, double ratio, Rng& rng);

struct DecoderMask {
    std::vector<bool> targets;
    std::optional<std::string> warning;  // set when the target count was clamped
};

/// Number of decoder targets for a grid of n tokens: round((1 - ratio) * n),
/// at least one.
Index decoder_target_count(Index n, double decoder_ratio);

/// Candidate positions of the running-cell pattern at temporal slot t: the
/// spatial grid is cut into 2x2 cells and, inside each cell, the
/// round((1-ratio)*4) positions starting at offset (t mod 4) along the cycle
/// (0,0) (0,1) (1,1) (1,0) are candidates.  Returned as an h*w spatial mask.
std::vector<bool> running_cell_candidates(const Grid3& grid, int t, double decoder_ratio);

/// Running-cell candidates intersected with the encoder mask, trimmed or
/// topped up at random from the remaining encoder-masked tokens so exactly
/// decoder_target_count() tokens are targeted.
DecoderMask running_cell_mask(const Grid3& grid, const std::vector<bool>& encoder_mask, double decoder_ratio, Rng& rng);

/// Uniformly chosen targets among the encoder-masked tokens.
DecoderMask random_decoder_mask(const std::vector<bool>& encoder_mask, double decoder_ratio, Rng& rng);

/// Video: tube encoder mask + running-cell targets.  Audio: random + random.
MaskPair make_mask_pair(const ModelConfig& cfg, Modality m, Rng& rng);

/// Decoder input for one modality: encoder-visible latents first, then one
/// mask token per decoder target.  Both carry the position encoding of the
/// grid position they stand for.
template <typename Scalar>
struct CombinedSeq {
    Mat<Scalar> tokens;
    std::vector<Index> original_index;  // grid index of every row
    Index visible_count = 0;

    Index size() const { return tokens.rows(); }
};

template <typename Scalar>
CombinedSeq<Scalar> assemble_combined(const Mat<Scalar>& latents, const MaskPair& masks, const RowVec<Scalar>& mask_token,
                                      const Mat<Scalar>& positions);

/// ASCII rendering: one block per temporal slot, '#' masked, '.' visible,
/// 'o' decoder target.
std::string mask_ascii(const Grid3& grid, const std::vector<bool>& encoder_mask, const std::vector<bool>* targets = nullptr);

/// Plain PBM (P1) with the temporal slots laid side by side, 1 = masked.
std::string mask_pbm(const Grid3& grid, const std::vector<bool>& mask);

} // namespace avmae
