#include "avmae/config.hpp"

#include <json.hpp>

#include <fstream>
#include <functional>
#include <map>
#include <sstream>

namespace avmae {

using json = nlohmann::ordered_json;

Grid3 ModelConfig::video_grid() const
{
    return {video_input[0] / std::max(1, video_tubelet[0]), video_input[1] / std::max(1, video_tubelet[1]),
            video_input[2] / std::max(1, video_tubelet[2])};
}

Grid3 ModelConfig::audio_grid() const
{
    return {1, audio_input[0] / std::max(1, audio_patch[0]), audio_input[1] / std::max(1, audio_patch[1])};
}

int ModelConfig::video_regions() const
{
    const Grid3 g = video_grid();
    return (g.t / std::max(1, video_region[0])) * (g.h / std::max(1, video_region[1])) * (g.w / std::max(1, video_region[2]));
}

int ModelConfig::audio_regions() const
{
    const Grid3 g = audio_grid();
    return (g.h / std::max(1, audio_region[0])) * (g.w / std::max(1, audio_region[1]));
}

std::string to_string(Stage s)
{
    switch (s) {
    case Stage::pretrain: return "pretrain";
    case Stage::post_pretrain: return "post_pretrain";
    case Stage::finetune: return "finetune";
    }
    return "?";
}

Stage stage_from_string(const std::string& s)
{
    if (s == "pretrain")
        return Stage::pretrain;
    if (s == "post_pretrain")
        return Stage::post_pretrain;
    if (s == "finetune")
        return Stage::finetune;
    throw ConfigError("unknown stage '" + s + "'");
}

TrainConfig train_defaults(Stage stage)
{
    TrainConfig t;
    t.stage = stage;
    if (stage == Stage::pretrain)
        return t;
    t.base_lr = stage == Stage::post_pretrain ? 1e-3 : 5e-4;
    t.weight_decay = 0.05;
    t.warmup_epochs = 5;
    t.epochs = 100;
    t.beta1 = 0.9;
    t.beta2 = 0.999;
    t.layer_decay = 0.75;
    t.label_smoothing = 0.1;
    t.drop_path = stage == Stage::post_pretrain ? 0.15 : 0.1;
    return t;
}

ModelConfig preset(const std::string& name)
{
    ModelConfig c;
    c.name = name;
    c.video_region = {2, 5, 10};
    c.audio_region = {4, 4};
    c.video_tubelet = {2, 16, 16};
    c.audio_patch = {16, 16};
    c.video_input = {16, 160, 160};
    c.audio_input = {256, 128};
    c.fusion_depth = 2;
    c.decoder_depth = 4;
    c.num_dier_units = 2;
    if (name == "B") {
        c.encoder_dim = 512, c.encoder_heads = 8, c.encoder_depth = 10;
        c.decoder_dim = 384, c.decoder_heads = 6;
        c.fusion_heads = 8;
        c.skip_indices = {3, 6, 9};
    } else if (name == "L") {
        c.encoder_dim = 640, c.encoder_heads = 10, c.encoder_depth = 12;
        c.decoder_dim = 512, c.decoder_heads = 8;
        c.fusion_heads = 10;
        c.skip_indices = {3, 7, 11};
    } else if (name == "H") {
        c.encoder_dim = 768, c.encoder_heads = 12, c.encoder_depth = 15;
        c.decoder_dim = 640, c.decoder_heads = 8;
        c.fusion_heads = 12;
        c.skip_indices = {4, 9, 14};
    } else if (name == "Tiny") {
        c.encoder_dim = 32, c.encoder_heads = 4, c.encoder_depth = 4;
        c.decoder_dim = 16, c.decoder_heads = 2, c.decoder_depth = 1;
        c.fusion_heads = 4, c.fusion_depth = 1;
        c.skip_indices = {1, 3};
        // 4x4x4 video grid and 4x2 audio grid, both cut into K = 4 regions.
        c.video_region = {2, 4, 2};
        c.audio_region = {1, 2};
        c.video_tubelet = {2, 8, 8};
        c.audio_patch = {8, 8};
        c.video_input = {8, 32, 32};
        c.audio_input = {32, 16};
    } else {
        throw ConfigError("unknown preset '" + name + "' (expected B, L, H or Tiny)");
    }
    return c;
}

namespace {

void check_divides(std::vector<std::string>& errs, const std::string& what, int num, int den)
{
    if (den <= 0) {
        errs.push_back(what + ": divisor " + std::to_string(den) + " must be positive");
    } else if (num % den != 0) {
        std::ostringstream os;
        os << what << ": " << num << " is not divisible by " << den << " (grid " << static_cast<double>(num) / den
           << " not integral)";
        errs.push_back(os.str());
    }
}

void check_ratio(std::vector<std::string>& errs, const std::string& what, double r)
{
    if (!(r > 0.0 && r < 1.0))
        errs.push_back(what + " must lie in (0, 1), got " + std::to_string(r));
}

} // namespace

std::vector<std::string> validate(const ModelConfig& cfg, const std::array<int, 3>& video_shape,
                                  const std::array<int, 2>& audio_shape)
{
    std::vector<std::string> errs;
    check_divides(errs, "encoder_dim by encoder_heads", cfg.encoder_dim, cfg.encoder_heads);
    check_divides(errs, "decoder_dim by decoder_heads", cfg.decoder_dim, cfg.decoder_heads);
    check_divides(errs, "encoder_dim by fusion_heads", cfg.encoder_dim, cfg.fusion_heads);
    if (cfg.encoder_depth < 1)
        errs.push_back("encoder_depth must be >= 1");
    if (cfg.decoder_depth < 0 || cfg.fusion_depth < 0)
        errs.push_back("decoder_depth and fusion_depth must be >= 0");
    if (cfg.mlp_ratio < 1)
        errs.push_back("mlp_ratio must be >= 1");
    if (cfg.skip_indices.empty())
        errs.push_back("skip_indices must not be empty");
    for (std::size_t i = 0; i < cfg.skip_indices.size(); ++i) {
        const int s = cfg.skip_indices[i];
        if (s < 0 || s >= cfg.encoder_depth)
            errs.push_back("skip index " + std::to_string(s) + " outside [0, encoder_depth)");
        if (i > 0 && s <= cfg.skip_indices[i - 1])
            errs.push_back("skip_indices must be strictly increasing");
    }
    if (cfg.num_dier_units < 1)
        errs.push_back("num_dier_units must be >= 1");
    if (!(cfg.contrastive_temperature > 0.0))
        errs.push_back("contrastive_temperature must be > 0");
    if (cfg.contrastive_weight < 0.0)
        errs.push_back("contrastive_weight must be >= 0");
    check_ratio(errs, "video_mask_ratio", cfg.video_mask_ratio);
    check_ratio(errs, "audio_mask_ratio", cfg.audio_mask_ratio);
    check_ratio(errs, "video_decoder_ratio", cfg.video_decoder_ratio);
    check_ratio(errs, "audio_decoder_ratio", cfg.audio_decoder_ratio);

    check_divides(errs, "video T by tubelet t", video_shape[0], cfg.video_tubelet[0]);
    check_divides(errs, "video H by tubelet p", video_shape[1], cfg.video_tubelet[1]);
    check_divides(errs, "video W by tubelet p", video_shape[2], cfg.video_tubelet[2]);
    check_divides(errs, "audio T by patch p", audio_shape[0], cfg.audio_patch[0]);
    check_divides(errs, "audio F by patch p", audio_shape[1], cfg.audio_patch[1]);

    const bool video_grid_ok = cfg.video_tubelet[0] > 0 && cfg.video_tubelet[1] > 0 && cfg.video_tubelet[2] > 0 &&
                               video_shape[0] % cfg.video_tubelet[0] == 0 && video_shape[1] % cfg.video_tubelet[1] == 0 &&
                               video_shape[2] % cfg.video_tubelet[2] == 0;
    const bool audio_grid_ok = cfg.audio_patch[0] > 0 && cfg.audio_patch[1] > 0 && audio_shape[0] % cfg.audio_patch[0] == 0 &&
                               audio_shape[1] % cfg.audio_patch[1] == 0;
    int kv = -1;
    int ka = -1;
    if (video_grid_ok) {
        const int gt = video_shape[0] / cfg.video_tubelet[0];
        const int gh = video_shape[1] / cfg.video_tubelet[1];
        const int gw = video_shape[2] / cfg.video_tubelet[2];
        const std::size_t before = errs.size();
        check_divides(errs, "video grid t by region t", gt, cfg.video_region[0]);
        check_divides(errs, "video grid h by region h", gh, cfg.video_region[1]);
        check_divides(errs, "video grid w by region w", gw, cfg.video_region[2]);
        if (errs.size() == before)
            kv = (gt / cfg.video_region[0]) * (gh / cfg.video_region[1]) * (gw / cfg.video_region[2]);
    }
    if (audio_grid_ok) {
        const int gh = audio_shape[0] / cfg.audio_patch[0];
        const int gw = audio_shape[1] / cfg.audio_patch[1];
        const std::size_t before = errs.size();
        check_divides(errs, "audio grid h by region h", gh, cfg.audio_region[0]);
        check_divides(errs, "audio grid w by region w", gw, cfg.audio_region[1]);
        if (errs.size() == before)
            ka = (gh / cfg.audio_region[0]) * (gw / cfg.audio_region[1]);
    }
    if (kv > 0 && ka > 0 && kv != ka)
        errs.push_back("video regions K_v = " + std::to_string(kv) + " must equal audio regions K_a = " + std::to_string(ka));
    return errs;
}

std::vector<std::string> validate(const ModelConfig& cfg)
{
    return validate(cfg, cfg.video_input, cfg.audio_input);
}

void require_valid(const ModelConfig& cfg)
{
    const auto errs = validate(cfg);
    if (errs.empty())
        return;
    std::string msg = "invalid model config '" + cfg.name + "':";
    for (const auto& e : errs)
        msg += "\n  " + e;
    throw ConfigError(msg);
}

// ---------------------------------------------------------------- serialization

namespace {

template <typename T>
struct Field {
    std::function<json(const T&)> get;
    std::function<void(T&, const json&)> set;
};

template <typename T, typename M>
Field<T> field(M T::*member)
{
    return {[member](const T& c) { return json(c.*member); },
            [member](T& c, const json& j) { c.*member = j.template get<M>(); }};
}

const std::vector<std::pair<std::string, Field<ModelConfig>>>& model_fields()
{
    static const std::vector<std::pair<std::string, Field<ModelConfig>>> fields = {
        {"name", field(&ModelConfig::name)},
        {"encoder_dim", field(&ModelConfig::encoder_dim)},
        {"encoder_heads", field(&ModelConfig::encoder_heads)},
        {"encoder_depth", field(&ModelConfig::encoder_depth)},
        {"decoder_dim", field(&ModelConfig::decoder_dim)},
        {"decoder_heads", field(&ModelConfig::decoder_heads)},
        {"decoder_depth", field(&ModelConfig::decoder_depth)},
        {"fusion_heads", field(&ModelConfig::fusion_heads)},
        {"fusion_depth", field(&ModelConfig::fusion_depth)},
        {"mlp_ratio", field(&ModelConfig::mlp_ratio)},
        {"skip_indices", field(&ModelConfig::skip_indices)},
        {"video_region", field(&ModelConfig::video_region)},
        {"audio_region", field(&ModelConfig::audio_region)},
        {"video_tubelet", field(&ModelConfig::video_tubelet)},
        {"audio_patch", field(&ModelConfig::audio_patch)},
        {"video_input", field(&ModelConfig::video_input)},
        {"audio_input", field(&ModelConfig::audio_input)},
        {"video_mask_ratio", field(&ModelConfig::video_mask_ratio)},
        {"audio_mask_ratio", field(&ModelConfig::audio_mask_ratio)},
        {"video_decoder_ratio", field(&ModelConfig::video_decoder_ratio)},
        {"audio_decoder_ratio", field(&ModelConfig::audio_decoder_ratio)},
        {"num_dier_units", field(&ModelConfig::num_dier_units)},
        {"contrastive_temperature", field(&ModelConfig::contrastive_temperature)},
        {"contrastive_weight", field(&ModelConfig::contrastive_weight)},
        {"stage4_global", field(&ModelConfig::stage4_global)},
    };
    return fields;
}

const std::vector<std::pair<std::string, Field<TrainConfig>>>& train_fields()
{
    static const std::vector<std::pair<std::string, Field<TrainConfig>>> fields = {
        {"base_lr", field(&TrainConfig::base_lr)},
        {"weight_decay", field(&TrainConfig::weight_decay)},
        {"warmup_epochs", field(&TrainConfig::warmup_epochs)},
        {"epochs", field(&TrainConfig::epochs)},
        {"batch", field(&TrainConfig::batch)},
        {"layer_decay", field(&TrainConfig::layer_decay)},
        {"label_smoothing", field(&TrainConfig::label_smoothing)},
        {"drop_path", field(&TrainConfig::drop_path)},
        {"seed", field(&TrainConfig::seed)},
        {"stage",
         {[](const TrainConfig& c) { return json(to_string(c.stage)); },
          [](TrainConfig& c, const json& j) { c.stage = stage_from_string(j.get<std::string>()); }}},
        {"steps", field(&TrainConfig::steps)},
        {"beta1", field(&TrainConfig::beta1)},
        {"beta2", field(&TrainConfig::beta2)},
        {"min_lr", field(&TrainConfig::min_lr)},
        {"clip_grad", field(&TrainConfig::clip_grad)},
        {"num_classes", field(&TrainConfig::num_classes)},
        {"regression", field(&TrainConfig::regression)},
        {"eval_every", field(&TrainConfig::eval_every)},
    };
    return fields;
}

template <typename T>
json dump_fields(const T& cfg, const std::vector<std::pair<std::string, Field<T>>>& fields)
{
    json j = json::object();
    for (const auto& [key, f] : fields)
        j[key] = f.get(cfg);
    return j;
}

template <typename T>
void apply_fields(T& cfg, const json& j, const std::vector<std::pair<std::string, Field<T>>>& fields, const std::string& where)
{
    if (!j.is_object())
        throw ConfigError(where + ": expected an object");
    std::vector<std::string> unknown;
    for (auto it = j.begin(); it != j.end(); ++it) {
        auto match = std::find_if(fields.begin(), fields.end(), [&](const auto& p) { return p.first == it.key(); });
        if (match == fields.end()) {
            unknown.push_back(it.key());
            continue;
        }
        try {
            match->second.set(cfg, it.value());
        } catch (const json::exception& e) {
            throw ConfigError(where + "." + it.key() + ": " + e.what());
        }
    }
    if (!unknown.empty()) {
        std::string msg = where + ": unknown key(s)";
        for (const auto& k : unknown)
            msg += " '" + k + "'";
        throw ConfigError(msg);
    }
}

json parse_json(const std::string& text)
{
    try {
        return json::parse(text);
    } catch (const json::parse_error& e) {
        throw ConfigError(std::string("config parse error: ") + e.what());
    }
}

} // namespace

std::vector<std::string> diff(const ModelConfig& a, const ModelConfig& b)
{
    std::vector<std::string> out;
    for (const auto& [key, f] : model_fields()) {
        if (key == "name")
            continue;
        const json ja = f.get(a);
        const json jb = f.get(b);
        if (ja != jb)
            out.push_back(key + ": " + ja.dump() + " != " + jb.dump());
    }
    return out;
}

std::string to_json(const ModelConfig& cfg)
{
    return dump_fields(cfg, model_fields()).dump(2);
}

std::string to_json(const TrainConfig& cfg)
{
    return dump_fields(cfg, train_fields()).dump(2);
}

ModelConfig model_config_from_json(const std::string& text)
{
    ModelConfig cfg;
    apply_fields(cfg, parse_json(text), model_fields(), "model");
    return cfg;
}

TrainConfig train_config_from_json(const std::string& text)
{
    TrainConfig cfg;
    apply_fields(cfg, parse_json(text), train_fields(), "train");
    return cfg;
}

RunConfig parse_run_config(const std::string& text, Stage stage)
{
    const json j = parse_json(text);
    if (!j.is_object())
        throw ConfigError("config: expected an object at top level");
    for (auto it = j.begin(); it != j.end(); ++it)
        if (it.key() != "preset" && it.key() != "model" && it.key() != "train")
            throw ConfigError("config: unknown key '" + it.key() + "' (expected preset, model, train)");

    RunConfig rc;
    rc.model = preset(j.contains("preset") ? j["preset"].get<std::string>() : "Tiny");
    if (j.contains("model"))
        apply_fields(rc.model, j["model"], model_fields(), "model");
    rc.train = train_defaults(stage);
    if (j.contains("train"))
        apply_fields(rc.train, j["train"], train_fields(), "train");
    rc.train.stage = stage;
    require_valid(rc.model);
    return rc;
}

RunConfig load_run_config(const std::string& path, Stage stage)
{
    std::ifstream in(path);
    if (!in)
        throw ConfigError("cannot open config file " + path);
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_run_config(ss.str(), stage);
}

} // namespace avmae
