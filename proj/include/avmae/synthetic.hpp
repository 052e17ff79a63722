#pragma once

#include "avmae/config.hpp"
#include "avmae/embedding.hpp"

#include <string>
#include <vector>

namespace avmae {

/// Generative recipe for labeled audio-visual clips.  Each class maps to one
/// pattern id; a pattern couples a bright block moving along a fixed direction
/// with a spectral ridge in a fixed frequency band.  Per-sample jitter (block
/// start, ridge phase) is drawn from (seed, index) and shared by both
/// modalities, so the audio of a clip determines its video.
struct SyntheticTask {
    std::string name = "custom";
    std::vector<int> patterns = {0, 1};  // class c uses patterns[c]
    std::vector<double> noise = {0.0};   // additive Gaussian std per source
    std::uint64_t seed = 0;

    int classes() const { return static_cast<int>(patterns.size()); }
};

inline constexpr int synthetic_pattern_count = 6;

/// Named tasks: "pretrain" (all patterns, noise free), "post" (three patterns
/// from two noise sources), "target" (two patterns, noise free).
SyntheticTask synthetic_task(const std::string& name, std::uint64_t seed);

struct Dataset {
    std::vector<RawClip> clips;
    std::vector<int> labels;  // empty for unlabeled data
    Index size() const { return static_cast<Index>(clips.size()); }
    bool labeled() const { return labels.size() == clips.size() && !clips.empty(); }
};

/// Clip `index` of `task`; the label is index % classes and the noise source
/// is (index / classes) % sources, so every source sees every class.
RawClip synthetic_clip(const ModelConfig& cfg, const SyntheticTask& task, Index index, int* label = nullptr);

Dataset gen_synthetic(const ModelConfig& cfg, const SyntheticTask& task, Index n);

/// Writes clip_NNNNN.bin files plus manifest.json ({"task", "classes",
/// "samples": [{"file", "label"}]}) into `dir`.
void write_dataset(const Dataset& data, const SyntheticTask& task, const std::string& dir);

/// Reads a directory written by write_dataset.
Dataset read_dataset(const std::string& dir);

} // namespace avmae
