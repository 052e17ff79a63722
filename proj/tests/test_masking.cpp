#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "test_util.hpp"

#include "avmae/masking.hpp"

#include <numeric>
#include <set>

using namespace avmae;

namespace {

Index count(const std::vector<bool>& m) { return static_cast<Index>(std::count(m.begin(), m.end(), true)); }

bool subset(const std::vector<bool>& a, const std::vector<bool>& b)
{
    for (std::size_t i = 0; i < a.size(); ++i)
        if (a[i] && !b[i])
            return false;
    return true;
}

} // namespace

TEST_CASE("tube masks hide the same spatial positions at every time step")
{
    const ModelConfig b = preset("B");
    const Grid3 g = b.video_grid();
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        Rng rng(seed);
        const auto m = tube_mask(g, 0.9, rng);
        REQUIRE(static_cast<Index>(m.size()) == 800);
        CHECK(count(m) == 720);
        const Index plane = static_cast<Index>(g.h) * g.w;
        for (Index t = 1; t < g.t; ++t)
            for (Index s = 0; s < plane; ++s)
                CHECK(m[static_cast<std::size_t>(t * plane + s)] == m[static_cast<std::size_t>(s)]);
    }
}

TEST_CASE("audio masks use exact counts")
{
    Rng rng(1);
    CHECK(count(random_mask(128, 0.8125, rng)) == 104);
    CHECK(count(random_mask(128, 0.8, rng)) == 102);
    CHECK(round_half_up(2.5) == 3);
    CHECK(round_half_up(102.4) == 102);
}

TEST_CASE("degenerate ratios are refused")
{
    Rng rng(2);
    CHECK_THROWS_AS(random_mask(8, 1.0, rng), MaskError);
    CHECK_THROWS_AS(random_mask(8, 0.99, rng), MaskError);
    CHECK_THROWS_AS(random_mask(8, 0.01, rng), MaskError);
    CHECK_THROWS_AS(tube_mask({2, 2, 2}, 0.0, rng), MaskError);
}

TEST_CASE("decoder targets are an exact subset of the encoder mask")
{
    SUBCASE("B")
    {
        const ModelConfig b = preset("B");
        for (std::uint64_t seed = 0; seed < 10; ++seed) {
            Rng rng(seed);
            const MaskPair v = make_mask_pair(b, Modality::video, rng);
            CHECK(v.target_count() == 400);
            CHECK(subset(v.decoder_targets, v.encoder_mask));
            const MaskPair a = make_mask_pair(b, Modality::audio, rng);
            CHECK(a.masked_count() == 104);
            CHECK(a.target_count() == 64);
            CHECK(subset(a.decoder_targets, a.encoder_mask));
        }
    }
    SUBCASE("Tiny")
    {
        const ModelConfig t = preset("Tiny");
        Rng rng(3);
        const MaskPair v = make_mask_pair(t, Modality::video, rng);
        CHECK(v.target_count() == 32);
        CHECK(subset(v.decoder_targets, v.encoder_mask));
        CHECK(static_cast<Index>(v.visible().size()) + v.masked_count() == 64);
    }
}

TEST_CASE("running cells sweep every position over four time steps")
{
    const Grid3 g{8, 10, 10};
    for (int start = 0; start < 5; ++start) {
        std::vector<bool> covered(100, false);
        for (int t = start; t < start + 4; ++t) {
            const auto plane = running_cell_candidates(g, t, 0.5);
            CHECK(count(plane) == 50);
            for (std::size_t i = 0; i < plane.size(); ++i)
                covered[i] = covered[i] || plane[i];
        }
        CHECK(count(covered) == 100);
    }
}

TEST_CASE("targets clamp with a warning when the encoder hides too little")
{
    Rng rng(4);
    std::vector<bool> enc(16, false);
    enc[3] = enc[9] = true;
    const DecoderMask d = random_decoder_mask(enc, 0.5, rng);
    CHECK(count(d.targets) == 2);
    CHECK(d.warning.has_value());
}

TEST_CASE("combined sequence layout")
{
    const ModelConfig b = preset("B");
    Rng rng(5);
    const MaskPair v = make_mask_pair(b, Modality::video, rng);
    const Index c = 6;
    const Mat<double> pos = position_encoding<double>(Modality::video, b.video_grid(), c);
    const Mat<double> latents = testutil::random_mat(80, c, rng);
    RowVec<double> token = RowVec<double>::Constant(c, 0.5);
    const auto seq = assemble_combined(latents, v, token, pos);
    CHECK(seq.size() == 480);
    CHECK(seq.visible_count == 80);

    const auto visible = v.visible();
    const auto targets = v.targets();
    for (Index r = 0; r < 80; ++r) {
        CHECK(seq.original_index[static_cast<std::size_t>(r)] == visible[static_cast<std::size_t>(r)]);
        CHECK((seq.tokens.row(r) - latents.row(r) - pos.row(visible[static_cast<std::size_t>(r)])).cwiseAbs().maxCoeff() < 1e-15);
    }
    for (Index r = 0; r < 400; ++r) {
        const Index g = targets[static_cast<std::size_t>(r)];
        CHECK(seq.original_index[static_cast<std::size_t>(80 + r)] == g);
        CHECK((seq.tokens.row(80 + r) - token - pos.row(g)).cwiseAbs().maxCoeff() < 1e-15);
    }
    // no index repeats, and every row maps to a distinct grid position
    const std::set<Index> unique(seq.original_index.begin(), seq.original_index.end());
    CHECK(unique.size() == 480);
}

TEST_CASE("mask draws are seed-deterministic")
{
    const ModelConfig b = preset("B");
    Rng r1(42), r2(42), r3(43);
    const auto a = make_mask_pair(b, Modality::video, r1);
    const auto c = make_mask_pair(b, Modality::video, r2);
    const auto d = make_mask_pair(b, Modality::video, r3);
    CHECK(a.encoder_mask == c.encoder_mask);
    CHECK(a.decoder_targets == c.decoder_targets);
    CHECK(a.encoder_mask != d.encoder_mask);
}

TEST_CASE("each spatial position is masked uniformly often")
{
    // chi-square against the uniform expectation, 99 degrees of freedom
    const Grid3 g{8, 10, 10};
    const int draws = 2000;
    std::vector<double> hits(100, 0.0);
    Rng rng(6);
    for (int d = 0; d < draws; ++d) {
        const auto m = tube_mask(g, 0.9, rng);
        for (std::size_t s = 0; s < 100; ++s)
            hits[s] += m[s] ? 1.0 : 0.0;
    }
    const double expect = 0.9 * draws;
    double chi2 = 0.0;
    for (double h : hits)
        chi2 += (h - expect) * (h - expect) / (expect * 0.1);
    CHECK(chi2 < 148.2);  // 99.9th percentile of chi-square(99)
}

TEST_CASE("ascii rendering")
{
    const Grid3 g{1, 2, 2};
    const std::vector<bool> enc = {true, false, true, false};
    const std::vector<bool> tgt = {true, false, false, false};
    const std::string s = mask_ascii(g, enc, &tgt);
    CHECK(s.find('o') != std::string::npos);
    CHECK(s.find('#') != std::string::npos);
    CHECK(s.find('.') != std::string::npos);
    CHECK(mask_pbm(g, enc).rfind("P1", 0) == 0);
}
