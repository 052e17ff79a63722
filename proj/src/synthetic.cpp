#include "avmae/synthetic.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

namespace avmae {

namespace fs = std::filesystem;

namespace {

constexpr int directions[synthetic_pattern_count][2] = {{0, 1}, {1, 0}, {1, 1}, {0, -1}, {-1, 0}, {-1, 1}};
// background grating, cycles per frame along (y, x)
constexpr int gratings[synthetic_pattern_count][2] = {{1, 0}, {0, 1}, {1, 1}, {2, 0}, {0, 2}, {2, 1}};
constexpr double two_pi = 6.283185307179586;

// Start coordinate so a block moving `travel` pixels along `dir` stays inside.
int draw_start(int free, int dir, int travel, Rng& rng)
{
    const int lo = dir < 0 ? travel : 0;
    const int hi = dir > 0 ? free - travel : free;
    return lo + static_cast<int>(uniform_index(rng, static_cast<std::size_t>(std::max(1, hi - lo + 1))));
}

} // namespace

SyntheticTask synthetic_task(const std::string& name, std::uint64_t seed)
{
    SyntheticTask t;
    t.name = name;
    t.seed = seed;
    if (name == "pretrain") {
        t.patterns = {0, 1, 2, 3, 4, 5};
        t.noise = {0.0};
    } else if (name == "post") {
        t.patterns = {0, 1, 2};
        t.noise = {0.0, 0.1};
    } else if (name == "target") {
        t.patterns = {0, 2};
        t.noise = {0.0};
    } else {
        throw ConfigError("unknown synthetic task '" + name + "' (pretrain, post, target)");
    }
    return t;
}

RawClip synthetic_clip(const ModelConfig& cfg, const SyntheticTask& task, Index index, int* label)
{
    if (task.patterns.empty() || task.noise.empty())
        throw ConfigError("synthetic task needs at least one pattern and one noise source");
    const int classes = task.classes();
    const int cls = static_cast<int>(index % classes);
    const int pattern = task.patterns[static_cast<std::size_t>(cls)];
    if (pattern < 0 || pattern >= synthetic_pattern_count)
        throw ConfigError("synthetic pattern id out of range: " + std::to_string(pattern));
    const double noise = task.noise[static_cast<std::size_t>((index / classes) % static_cast<Index>(task.noise.size()))];
    if (label)
        *label = cls;

    Rng rng(derive_seed(task.seed, static_cast<std::uint64_t>(index)));
    RawClip clip = make_clip(cfg.video_input, cfg.audio_input);
    const int T = cfg.video_input[0], H = cfg.video_input[1], W = cfg.video_input[2];
    const int block = std::max(2, std::min(H, W) / 4);
    const int step = std::max(1, (std::min(H, W) - block) / (2 * std::max(1, T - 1)));
    const int travel = step * (T - 1);
    const int dy = directions[pattern][0], dx = directions[pattern][1];
    const int y0 = draw_start(H - block, dy, travel, rng);
    const int x0 = draw_start(W - block, dx, travel, rng);

    const double bright = 0.5 + 0.1 * pattern;
    const double gy = gratings[pattern][0], gx = gratings[pattern][1];
    for (int t = 0; t < T; ++t)
        for (int y = 0; y < H; ++y)
            for (int x = 0; x < W; ++x) {
                const int by = y0 + dy * step * t, bx = x0 + dx * step * t;
                const bool inside = y >= by && y < by + block && x >= bx && x < bx + block;
                const double bg = 0.1 + 0.05 * std::sin(two_pi * (gy * y / H + gx * x / W));
                for (int c = 0; c < 3; ++c)
                    clip.v(t, y, x, c) = static_cast<float>(inside ? (c == pattern % 3 ? bright : 0.6 * bright) : bg);
            }

    // the ridge position and phase follow the block start; a second ridge half
    // the band away keeps every frequency patch informative
    const int Ta = cfg.audio_input[0], F = cfg.audio_input[1];
    const double band = static_cast<double>(F) / synthetic_pattern_count;
    const double jy = static_cast<double>(y0) / std::max(1, H - block);
    const double jx = static_cast<double>(x0) / std::max(1, W - block);
    const double centre = (pattern + 0.5) * band + (jy - 0.5) * 0.5 * band;
    const double width = std::max(0.5, F / 24.0);
    for (int t = 0; t < Ta; ++t) {
        const double amp = 1.0 + 0.5 * std::sin(two_pi * (2.0 * t / Ta + jx));
        for (int f = 0; f < F; ++f) {
            const double d = (f - centre) / width;
            const double d2 = (f - std::fmod(centre + F / 2.0, static_cast<double>(F))) / width;
            clip.a(t, f) = static_cast<float>(amp * (std::exp(-0.5 * d * d) + 0.5 * std::exp(-0.5 * d2 * d2)));
        }
    }

    if (noise > 0.0) {
        for (auto& v : clip.video)
            v += static_cast<float>(noise * normal01(rng));
        for (auto& a : clip.audio)
            a += static_cast<float>(noise * normal01(rng));
    }
    return clip;
}

Dataset gen_synthetic(const ModelConfig& cfg, const SyntheticTask& task, Index n)
{
    Dataset d;
    d.clips.reserve(static_cast<std::size_t>(n));
    d.labels.reserve(static_cast<std::size_t>(n));
    for (Index i = 0; i < n; ++i) {
        int label = 0;
        d.clips.push_back(synthetic_clip(cfg, task, i, &label));
        d.labels.push_back(label);
    }
    return d;
}

void write_dataset(const Dataset& data, const SyntheticTask& task, const std::string& dir)
{
    fs::create_directories(dir);
    nlohmann::ordered_json m;
    m["task"] = task.name;
    m["classes"] = task.classes();
    m["patterns"] = task.patterns;
    m["noise"] = task.noise;
    m["seed"] = task.seed;
    m["samples"] = nlohmann::ordered_json::array();
    for (Index i = 0; i < data.size(); ++i) {
        char file[32];
        std::snprintf(file, sizeof file, "clip_%05ld.bin", static_cast<long>(i));
        save_clip(data.clips[static_cast<std::size_t>(i)], (fs::path(dir) / file).string());
        nlohmann::ordered_json s;
        s["file"] = file;
        if (data.labeled())
            s["label"] = data.labels[static_cast<std::size_t>(i)];
        m["samples"].push_back(s);
    }
    std::ofstream os(fs::path(dir) / "manifest.json");
    os << m.dump(2) << '\n';
    if (!os)
        throw Error("cannot write manifest in " + dir);
}

Dataset read_dataset(const std::string& dir)
{
    const fs::path mpath = fs::path(dir) / "manifest.json";
    std::ifstream is(mpath);
    if (!is)
        throw Error("cannot open " + mpath.string());
    nlohmann::json m;
    try {
        m = nlohmann::json::parse(is);
    } catch (const nlohmann::json::exception& e) {
        throw Error("bad manifest " + mpath.string() + ": " + e.what());
    }
    Dataset d;
    bool labeled = true;
    for (const auto& s : m.at("samples")) {
        d.clips.push_back(load_clip((fs::path(dir) / s.at("file").get<std::string>()).string()));
        if (s.contains("label"))
            d.labels.push_back(s["label"].get<int>());
        else
            labeled = false;
    }
    if (!labeled)
        d.labels.clear();
    return d;
}

} // namespace avmae
