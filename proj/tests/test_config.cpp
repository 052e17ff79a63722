#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "avmae/config.hpp"

#include <algorithm>

using namespace avmae;

namespace {

bool mentions(const std::vector<std::string>& errs, const std::string& needle)
{
    return std::any_of(errs.begin(), errs.end(), [&](const std::string& e) { return e.find(needle) != std::string::npos; });
}

} // namespace

TEST_CASE("presets reproduce the configuration table")
{
    struct Row {
        const char* name;
        int dim, heads, depth, ddim, dheads, ddepth, fheads, fdepth;
        std::vector<int> skip;
    };
    const std::vector<Row> rows = {
        {"B", 512, 8, 10, 384, 6, 4, 8, 2, {3, 6, 9}},
        {"L", 640, 10, 12, 512, 8, 4, 10, 2, {3, 7, 11}},
        {"H", 768, 12, 15, 640, 8, 4, 12, 2, {4, 9, 14}},
    };
    for (const auto& r : rows) {
        CAPTURE(r.name);
        const ModelConfig c = preset(r.name);
        CHECK(c.encoder_dim == r.dim);
        CHECK(c.encoder_heads == r.heads);
        CHECK(c.encoder_depth == r.depth);
        CHECK(c.decoder_dim == r.ddim);
        CHECK(c.decoder_heads == r.dheads);
        CHECK(c.decoder_depth == r.ddepth);
        CHECK(c.fusion_heads == r.fheads);
        CHECK(c.fusion_depth == r.fdepth);
        CHECK(c.skip_indices == r.skip);
        CHECK(c.video_tubelet == std::array<int, 3>{2, 16, 16});
        CHECK(c.audio_patch == std::array<int, 2>{16, 16});
        CHECK(c.num_dier_units == 2);
        CHECK(c.contrastive_temperature == 0.07);
        CHECK(c.contrastive_weight == 0.0025);
        CHECK(validate(c).empty());
        CHECK(c.video_regions() == 8);
        CHECK(c.audio_regions() == 8);
    }
}

TEST_CASE("B geometry")
{
    const ModelConfig b = preset("B");
    CHECK(b.video_grid() == Grid3{8, 10, 10});
    CHECK(b.audio_grid() == Grid3{1, 16, 8});
    CHECK(validate(b, {16, 150, 150}, {256, 128}).size() >= 1);
    CHECK(mentions(validate(b, {16, 150, 150}, {256, 128}), "video"));
}

TEST_CASE("Tiny is valid on its own geometry with equal region counts")
{
    const ModelConfig t = preset("Tiny");
    CHECK(validate(t, {8, 32, 32}, {32, 16}).empty());
    CHECK(t.video_regions() == 4);
    CHECK(t.audio_regions() == 4);
    CHECK_THROWS_AS(preset("XL"), ConfigError);
}

TEST_CASE("validation reports every violation")
{
    ModelConfig c = preset("Tiny");
    c.encoder_heads = 5;
    c.skip_indices = {3, 1, 9};
    c.num_dier_units = 0;
    const auto errs = validate(c);
    CHECK(errs.size() >= 3);
    CHECK(mentions(errs, "heads"));
    CHECK(mentions(errs, "skip"));
    CHECK(mentions(errs, "dier"));
    CHECK_THROWS_AS(require_valid(c), ConfigError);

    ModelConfig k = preset("Tiny");
    k.audio_region = {2, 2};
    CHECK(mentions(validate(k), "region"));
}

TEST_CASE("stage defaults follow the settings tables")
{
    const TrainConfig p = train_defaults(Stage::pretrain);
    CHECK(p.base_lr == 1.5e-4);
    CHECK(p.weight_decay == 0.05);
    CHECK(p.beta2 == 0.95);
    CHECK(p.warmup_epochs == 20);
    const TrainConfig f = train_defaults(Stage::finetune);
    CHECK(f.base_lr == 5e-4);
    CHECK(f.beta2 == 0.999);
    CHECK(f.layer_decay == 0.75);
    CHECK(f.label_smoothing == 0.1);
    CHECK(f.drop_path == 0.1);
    CHECK(train_defaults(Stage::post_pretrain).drop_path > f.drop_path);
    CHECK(stage_from_string(to_string(Stage::post_pretrain)) == Stage::post_pretrain);
}

TEST_CASE("json round trip, strict keys and field diff")
{
    const ModelConfig b = preset("B");
    CHECK(model_config_from_json(to_json(b)) == b);
    TrainConfig t = train_defaults(Stage::finetune);
    t.steps = 77;
    CHECK(train_config_from_json(to_json(t)) == t);
    CHECK_THROWS_AS(model_config_from_json(R"({"encoder_dims": 3})"), ConfigError);

    const auto d = diff(preset("Tiny"), b);
    CHECK(mentions(d, "encoder_dim"));
    CHECK(mentions(d, "skip_indices"));
    CHECK(diff(b, b).empty());
}

TEST_CASE("run config overrides the preset")
{
    const RunConfig rc = parse_run_config(R"({"preset": "Tiny", "model": {"num_dier_units": 3}, "train": {"batch": 4}})",
                                          Stage::finetune);
    CHECK(rc.model.num_dier_units == 3);
    CHECK(rc.model.encoder_dim == 32);
    CHECK(rc.train.batch == 4);
    CHECK(rc.train.base_lr == 5e-4);
    CHECK_THROWS_AS(parse_run_config(R"({"modle": {}})", Stage::pretrain), ConfigError);
}
