#include <cmath>
#include <fstream>
#include <random>
#include <set>
#include <sstream>

#include "doctest.h"
#include "funet/data_io.hpp"

using namespace funet;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name)
{
    auto p = fs::temp_directory_path() / ("funet_test_" + name);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

std::string slurp(const fs::path& p)
{
    std::ifstream in(p, std::ios::binary);
    std::ostringstream s;
    s << in.rdbuf();
    return s.str();
}

// Independent rasterizer: implicit conic A x^2 + B xy + C y^2 <= 1 around the centre.
long conic_area(const Ellipse& e, int h, int w)
{
    const double c = std::cos(e.angle), s = std::sin(e.angle);
    const double a = c * c / (e.rx * e.rx) + s * s / (e.ry * e.ry);
    const double b = 2 * c * s * (1 / (e.rx * e.rx) - 1 / (e.ry * e.ry));
    const double d = s * s / (e.rx * e.rx) + c * c / (e.ry * e.ry);
    long n = 0;
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            const double dx = x + 0.5 - e.cx, dy = y + 0.5 - e.cy;
            n += a * dx * dx + b * dx * dy + d * dy * dy <= 1.0 + 1e-12;
        }
    return n;
}

}  // namespace

TEST_CASE("largest-remainder split")
{
    CHECK(split_counts(20, {0.65, 0.175, 0.175}) == std::array<int, 3>{13, 3, 4});
    CHECK(split_counts(20, {1, 0, 0}) == std::array<int, 3>{20, 0, 0});
    CHECK(split_counts(40, {0.65, 0.175, 0.175}) == std::array<int, 3>{26, 7, 7});
    for (int n = 0; n < 60; ++n) {
        const auto c = split_counts(n, {0.65, 0.175, 0.175});
        CHECK(c[0] + c[1] + c[2] == n);
    }
    CHECK_THROWS(split_counts(5, {0, 0, 0}));
    CHECK_THROWS(split_counts(5, {1, -1, 0}));
}

TEST_CASE("clip windows")
{
    CHECK(window_starts(12, 5, 5, true) == std::vector<int>{0, 5, 7});
    CHECK(window_starts(5, 5, 5, true) == std::vector<int>{0});
    CHECK(window_starts(10, 5, 5, true) == std::vector<int>{0, 5});
    CHECK(window_starts(7, 5, 1, false) == std::vector<int>{0, 1, 2});
    CHECK_THROWS_AS(window_starts(4, 5, 5, true), std::invalid_argument);
    for (int n = 5; n < 40; ++n) {
        std::vector<int> seen(n, 0);
        for (int s : window_starts(n, 5, 5, true))
            for (int t = 0; t < 5; ++t) ++seen[s + t];
        for (int v : seen) CHECK(v >= 1);
    }
}

TEST_CASE("resize and crop")
{
    std::mt19937_64 rng(3);
    std::uniform_real_distribution<float> u(0, 1);
    Image f(3, 9, 13), m(1, 9, 13);
    for (auto& v : f.data) v = u(rng);
    for (auto& v : m.data) v = u(rng) < 0.4f ? 1.0f : 0.0f;

    auto [f1, m1] = resize_pair(f, m, 9, 13);
    CHECK(f1 == f);
    CHECK(m1 == m);

    Image flat(3, 7, 5, 0.375f);
    for (auto v : crop_resize_bilinear(flat, 1, 1, 5, 3, 20, 11).data) CHECK(v == 0.375f);

    for (auto [h, w] : {std::pair{4, 4}, {17, 29}, {5, 31}, {30, 6}}) {
        auto [fr, mr] = resize_pair(f, m, h, w);
        CHECK(fr.height == h);
        CHECK(mr.width == w);
        for (auto v : mr.data) CHECK((v == 0.0f || v == 1.0f));
        for (auto v : crop_resize_nearest(m, 2, 3, 5, 7, h, w).data) CHECK((v == 0.0f || v == 1.0f));
    }
    CHECK(hflip(hflip(f)) == f);
    CHECK(hflip(f).at(1, 2, 0) == f.at(1, 2, 12));
    CHECK_THROWS(crop_resize_bilinear(f, 5, 0, 5, 13, 4, 4));
}

TEST_CASE("png round trips")
{
    const auto dir = scratch("png");
    std::mt19937_64 rng(4);
    std::uniform_int_distribution<int> level(0, 65535);
    Image g(1, 5, 7);
    for (auto& v : g.data) v = static_cast<float>(level(rng) / 65535.0);
    write_png(dir / "p16.png", g, 16);
    const auto back = read_png(dir / "p16.png", 1);
    for (std::size_t i = 0; i < g.data.size(); ++i) CHECK(std::abs(back.data[i] - g.data[i]) <= 1.0f / 65535);

    Image rgb(3, 4, 6);
    for (auto& v : rgb.data) v = static_cast<float>((level(rng) % 256) / 255.0);
    write_png(dir / "rgb.png", rgb);
    CHECK(read_png(dir / "rgb.png", 3) == rgb);
    // gray files are replicated to three channels
    const auto gray3 = read_png(dir / "p16.png", 3);
    CHECK(gray3.at(2, 3, 4) == back.at(0, 3, 4));

    Image mask(1, 3, 3);
    mask.data = {0, 1, 0, 1, 1, 0, 0, 0, 1};
    write_png(dir / "m.png", mask);
    CHECK(read_mask_png(dir / "m.png") == mask);

    std::ofstream(dir / "junk.png") << "not a png";
    CHECK_THROWS_AS(read_png(dir / "junk.png", 3), IoError);
    CHECK_THROWS_AS(read_png(dir / "missing.png", 3), IoError);
}

TEST_CASE("synthetic generator")
{
    SyntheticVideoSpec spec;
    spec.sequences = 4;
    spec.frames_per_sequence = 6;
    spec.height = 32;
    spec.width = 48;
    spec.seed = 9;
    const auto a = scratch("synth_a"), b = scratch("synth_b");
    const auto m = synth_generate(spec, a);
    synth_generate(spec, b);
    CHECK(m.sequences.size() == 4);
    std::size_t files = 0;
    for (const auto& e : fs::recursive_directory_iterator(a)) {
        if (!e.is_regular_file()) continue;
        ++files;
        CHECK(slurp(e.path()) == slurp(b / fs::relative(e.path(), a)));
    }
    CHECK(files == 4 * 6 * 2 + 1);

    // mask pixel counts equal an independent rasterization of the drawn ellipses
    for (int s = 0; s < 4; ++s) {
        for (int f = 0; f < 6; ++f) {
            const auto shapes = synth_ellipses(spec, s, f);
            REQUIRE(shapes.size() == 1);
            const auto mask = read_mask_png(fs::path(m.root) / m.sequences[s].masks[f]);
            long count = 0;
            for (auto v : mask.data) count += v == 1.0f;
            CHECK(count == conic_area(shapes[0], spec.height, spec.width));
            const auto& e = shapes[0];
            const double reach = std::max(e.rx, e.ry);
            CHECK(e.cx - reach >= 1);
            CHECK(e.cx + reach <= spec.width - 1);
        }
    }

    // zero noise and a static ellipse give identical frames
    auto still = spec;
    still.noise = 0;
    still.drift_min = still.drift_max = 0;
    still.deformation = 0;
    still.sequences = 1;
    const auto c = scratch("synth_still");
    const auto ms = synth_generate(still, c);
    for (int f = 1; f < 6; ++f) CHECK(slurp(c / ms.sequences[0].frames[f]) == slurp(c / ms.sequences[0].frames[0]));

    auto bad = spec;
    bad.radius_max = 0.6;
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
}

TEST_CASE("manifest loading and splits")
{
    SyntheticVideoSpec spec;
    spec.sequences = 20;
    spec.frames_per_sequence = 5;
    spec.height = 16;
    spec.width = 24;
    spec.radius_min = 0.15;
    spec.radius_max = 0.3;
    const auto dir = scratch("manifest");
    synth_generate(spec, dir);

    fs::remove(dir / "manifest.json");
    const auto m = load_manifest(dir, {0.65, 0.175, 0.175}, 3);
    CHECK(m.in_split(Split::Train).size() == 13);
    CHECK(m.in_split(Split::Val).size() == 3);
    CHECK(m.in_split(Split::Test).size() == 4);
    CHECK(m.frame_count(Split::Val) == 15);
    std::set<std::string> ids;
    for (const auto& s : m.sequences) CHECK(ids.insert(s.id).second);
    // reproducible from the seed, different for another seed
    const auto again = load_manifest(dir, {0.65, 0.175, 0.175}, 3);
    CHECK(to_json(again) == to_json(m));
    const auto other = load_manifest(dir, {0.65, 0.175, 0.175}, 4);
    CHECK(to_json(other) != to_json(m));
    CHECK(load_manifest(dir, {1, 0, 0}, 3).in_split(Split::Train).size() == 20);

    // serialised form round-trips
    write_manifest(dir / "m.json", m);
    const auto rt = read_manifest(dir / "m.json");
    CHECK(to_json(rt) == to_json(m));

    // frames are lexicographic, loaded masks binary
    CHECK(std::is_sorted(m.sequences[0].frames.begin(), m.sequences[0].frames.end()));
    const auto seqs = load_sequences(m, {Split::Val}, 8, 12);
    CHECK(seqs.size() == 3);
    for (const auto& s : seqs)
        for (const auto& mk : s.masks)
            for (auto v : mk.data) CHECK((v == 0.0f || v == 1.0f));
    const auto batch = make_batch(seqs, eval_windows(seqs, 5), 5);
    CHECK(batch.frames.shape() == Shape{3, 5, 3, 8, 12});
    CHECK(batch.masks.shape() == Shape{3, 5, 1, 8, 12});

    fs::remove(dir / "seq_004" / "masks" / "0003.png");
    CHECK_THROWS_AS(load_manifest(dir, {0.65, 0.175, 0.175}, 3), IoError);
    fs::remove_all(dir / "seq_004" / "masks");
    // an unlabeled sequence is fine unless it lands in train
    CHECK_THROWS_AS(load_manifest(dir, {1, 0, 0}, 3), IoError);
    CHECK_NOTHROW(load_manifest(dir, {0, 0, 1}, 3));
    CHECK_THROWS_AS(load_manifest(dir / "nope", {1, 0, 0}, 3), IoError);
}

TEST_CASE("foreground-only training windows")
{
    std::vector<LoadedSequence> seqs(1);
    for (int f = 0; f < 8; ++f) {
        seqs[0].frames.emplace_back(3, 2, 2);
        seqs[0].masks.emplace_back(1, 2, 2, f == 3 ? 0.0f : 1.0f);
    }
    CHECK(training_windows(seqs, 3, 1, false).size() == 6);
    const auto fg = training_windows(seqs, 3, 1, true);
    REQUIRE(fg.size() == 3);  // every window touching frame 3 is dropped
    CHECK(fg[0].start == 0);
    CHECK(fg[1].start == 4);
    CHECK(fg[2].start == 5);
}
