#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "test_util.hpp"

#include "avmae/checkpoint.hpp"
#include "avmae/iavcl.hpp"
#include "avmae/pretrain_graph.hpp"

#include <filesystem>
#include <fstream>

using namespace avmae;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name)
{
    const fs::path dir = fs::temp_directory_path() / "avmae_test_checkpoint";
    fs::create_directories(dir);
    return dir / name;
}

std::string slurp(const fs::path& p)
{
    std::ifstream is(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

void spit(const fs::path& p, const std::string& bytes)
{
    std::ofstream os(p, std::ios::binary | std::ios::trunc);
    os << bytes;
}

} // namespace

TEST_CASE("save load save is byte identical")
{
    const ModelConfig cfg = preset("Tiny");
    InitContext ctx(5);
    PretrainModel<float> model(cfg, ctx);
    const Checkpoint c = capture(model, cfg, Stage::pretrain, 0, false, 17);
    save_checkpoint(c, scratch("a.ckpt").string());
    const Checkpoint back = load_checkpoint(scratch("a.ckpt").string());
    save_checkpoint(back, scratch("b.ckpt").string());
    CHECK(slurp(scratch("a.ckpt")) == slurp(scratch("b.ckpt")));
    CHECK(back.step == 17);
    CHECK(back.stage == Stage::pretrain);
    REQUIRE(back.entries.size() == c.entries.size());
    for (std::size_t i = 0; i < c.entries.size(); ++i) {
        CHECK(back.entries[i].name == c.entries[i].name);
        CHECK(back.entries[i].value == c.entries[i].value);
    }

    InitContext other(6);
    PretrainModel<float> copy(cfg, other);
    const RestoreReport r = restore(back, param_list(copy), cfg);
    CHECK(r.missing.empty());
    CHECK(r.ignored.empty());
    CHECK(capture(copy, cfg, Stage::pretrain, 0, false, 17).entries.back().value == c.entries.back().value);
}

TEST_CASE("double models restore from float archives")
{
    const ModelConfig cfg = preset("Tiny");
    InitContext ctx(5);
    FinetuneModel<float> f(cfg, 2, false, ctx);
    const Checkpoint c = capture(f, cfg, Stage::finetune, 2);
    InitContext ctx2(9);
    FinetuneModel<double> d(cfg, 2, false, ctx2);
    const auto r = restore(c, param_list(d), cfg);
    CHECK(r.missing.empty());
    CHECK(d.head.proj.weight.value.cast<float>() == f.head.proj.weight.value);
}

TEST_CASE("truncated payload names the first damaged entry")
{
    const ModelConfig cfg = preset("Tiny");
    InitContext ctx(5);
    PretrainModel<float> model(cfg, ctx);
    const Checkpoint c = capture(model, cfg, Stage::pretrain);
    save_checkpoint(c, scratch("t.ckpt").string());
    const std::string bytes = slurp(scratch("t.ckpt"));

    // cut inside the third entry
    const auto& e = c.entries[2];
    const std::size_t payload_start = bytes.size() - c.entries.back().offset - static_cast<std::size_t>(c.entries.back().value.size()) * 4;
    spit(scratch("t.ckpt"), bytes.substr(0, payload_start + e.offset + 2));
    try {
        load_checkpoint(scratch("t.ckpt").string());
        FAIL("expected CheckpointError");
    } catch (const CheckpointError& err) {
        CHECK(std::string(err.what()).find("truncated at entry " + e.name) != std::string::npos);
    }

    spit(scratch("t.ckpt"), bytes.substr(0, 40));
    CHECK_THROWS_AS(load_checkpoint(scratch("t.ckpt").string()), CheckpointError);
    spit(scratch("t.ckpt"), bytes + "xx");
    CHECK_THROWS_AS(load_checkpoint(scratch("t.ckpt").string()), CheckpointError);
    CHECK_THROWS_AS(load_checkpoint(scratch("missing.ckpt").string()), CheckpointError);
}

TEST_CASE("config mismatch lists the differing fields")
{
    const ModelConfig tiny = preset("Tiny");
    InitContext ctx(5);
    FinetuneModel<float> model(tiny, 2, false, ctx);
    const Checkpoint c = capture(model, tiny, Stage::finetune, 2);

    const ModelConfig base = preset("B");
    InitContext shape_only(0, false);
    FinetuneModel<float> big(base, 2, false, shape_only);
    try {
        restore(c, param_list(big), base);
        FAIL("expected ConfigError");
    } catch (const ConfigError& e) {
        const std::string msg = e.what();
        CHECK(msg.find("encoder_dim") != std::string::npos);
        CHECK(msg.find("encoder_depth") != std::string::npos);
    }
}

TEST_CASE("shape mismatch on a shared name")
{
    const ModelConfig cfg = preset("Tiny");
    InitContext ctx(5);
    FinetuneModel<float> three(cfg, 3, false, ctx);
    FinetuneModel<float> two(cfg, 2, false, ctx);
    const Checkpoint c = capture(three, cfg, Stage::post_pretrain, 3);
    CHECK_THROWS_AS(restore(c, param_list(two), cfg), CheckpointError);
    const auto r = restore(c, param_list(two), cfg, {"head."});
    CHECK(!r.missing.empty());
    for (const auto& name : r.missing)
        CHECK(name.rfind("head.", 0) == 0);
}
