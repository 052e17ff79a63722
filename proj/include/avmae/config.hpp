#pragma once

#include "avmae/core.hpp"

#include <array>
#include <optional>
#include <string>
#include <vector>

namespace avmae {

/// Token-grid geometry in (t, h, w).  Audio grids use t == 1.
struct Grid3 {
    int t = 1;
    int h = 1;
    int w = 1;

    int size() const { return t * h * w; }
    bool operator==(const Grid3&) const = default;
};

struct ModelConfig {
    std::string name = "custom";

    int encoder_dim = 0;
    int encoder_heads = 0;
    int encoder_depth = 0;
    int decoder_dim = 0;
    int decoder_heads = 0;
    int decoder_depth = 0;
    int fusion_heads = 0;
    int fusion_depth = 0;
    int mlp_ratio = 4;
    std::vector<int> skip_indices;

    std::array<int, 3> video_region{};   // (t, h, w) in tokens
    std::array<int, 2> audio_region{};   // (h, w) in tokens
    std::array<int, 3> video_tubelet{};  // (t, p, p)
    std::array<int, 2> audio_patch{};    // (p, p)
    std::array<int, 3> video_input{};    // (T, H, W); 3 colour channels implied
    std::array<int, 2> audio_input{};    // (T_a, F)

    double video_mask_ratio = 0.9;
    double audio_mask_ratio = 0.8125;
    double video_decoder_ratio = 0.5;
    double audio_decoder_ratio = 0.5;

    int num_dier_units = 2;
    double contrastive_temperature = 0.07;
    double contrastive_weight = 0.0025;
    bool stage4_global = false;  // stage IV keys/values: own region (false) or all locals (true)

    Grid3 video_grid() const;
    Grid3 audio_grid() const;
    Grid3 video_region_grid() const { return {video_region[0], video_region[1], video_region[2]}; }
    Grid3 audio_region_grid() const { return {1, audio_region[0], audio_region[1]}; }
    int video_regions() const;
    int audio_regions() const;
    int video_patch_dim() const { return video_tubelet[0] * video_tubelet[1] * video_tubelet[2] * 3; }
    int audio_patch_dim() const { return audio_patch[0] * audio_patch[1]; }

    bool operator==(const ModelConfig&) const = default;
};

enum class Stage { pretrain, post_pretrain, finetune };

std::string to_string(Stage s);
Stage stage_from_string(const std::string& s);

struct TrainConfig {
    double base_lr = 1.5e-4;
    double weight_decay = 0.05;
    double warmup_epochs = 20;
    double epochs = 200;
    int batch = 8;
    double layer_decay = 1.0;
    double label_smoothing = 0.0;
    double drop_path = 0.0;
    std::uint64_t seed = 0;
    Stage stage = Stage::pretrain;

    // Desk-scale extras.
    int steps = 0;  // total optimizer steps; 0 derives epochs * ceil(n / batch)
    double beta1 = 0.9;
    double beta2 = 0.95;
    double min_lr = 1e-6;
    double clip_grad = 0.0;  // global-norm clip; 0 disables
    int num_classes = 2;
    bool regression = false;
    int eval_every = 10;

    bool operator==(const TrainConfig&) const = default;
};

/// Stage defaults from the pretraining and fine-tuning settings tables.
TrainConfig train_defaults(Stage stage);

/// B, L, H or Tiny.
ModelConfig preset(const std::string& name);

/// Every violated constraint for this config on the given raw input geometry;
/// empty when valid.
std::vector<std::string> validate(const ModelConfig& cfg, const std::array<int, 3>& video_shape,
                                  const std::array<int, 2>& audio_shape);
std::vector<std::string> validate(const ModelConfig& cfg);

/// Throws ConfigError with every violation joined.
void require_valid(const ModelConfig& cfg);

class ConfigError : public Error {
public:
    using Error::Error;
};

/// Field-level differences, "field: a != b".
std::vector<std::string> diff(const ModelConfig& a, const ModelConfig& b);

std::string to_json(const ModelConfig& cfg);
std::string to_json(const TrainConfig& cfg);
ModelConfig model_config_from_json(const std::string& text);
TrainConfig train_config_from_json(const std::string& text);

/// A run configuration file: {"preset": name?, "model": {...}?, "train": {...}?}.
/// Model fields override the preset; unknown keys at any level are rejected.
struct RunConfig {
    ModelConfig model;
    TrainConfig train;
};
RunConfig load_run_config(const std::string& path, Stage stage);
RunConfig parse_run_config(const std::string& text, Stage stage);

} // namespace avmae
