#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <random>
#include <set>

#include "vce/mnist_lines.hpp"

using namespace vce;
using namespace vce::mnist;

namespace {

std::filesystem::path temp_dir(const std::string& name) {
    const auto d = std::filesystem::temp_directory_path() / name;
    std::filesystem::create_directories(d);
    return d;
}

synth::Image canvas() { return synth::Image({1, 32, 32}); }

void paint(synth::Image& img, int r0, int r1, int c0, int c1, float v = 1.0f) {
    for (int r = r0; r < r1; ++r)
        for (int c = c0; c < c1; ++c) img[static_cast<std::size_t>(r * 32 + c)] = v;
}

void check_partition(const StrokeSplit& s) {
    std::set<int> seen;
    for (const auto& seg : s.segments)
        for (int p : seg) CHECK(seen.insert(p).second);
    std::set<int> ink;
    for (int p = 0; p < 1024; ++p)
        if (s.source[static_cast<std::size_t>(p)] > 0.0f) ink.insert(p);
    CHECK(seen == ink);
}

MnistSet from_synthetic(int per_class, std::uint64_t seed) {
    const auto split = synth::generate_split(synth::SynthConfig::defaults(), per_class, seed, 1);
    return {split.images, split.labels()};
}

}  // namespace

TEST_CASE("idx files load zero-padded to 32 x 32 and scaled to [0, 1]") {
    const auto dir = temp_dir("vce_idx_small");
    std::vector<std::uint8_t> px(5 * 28 * 28);
    std::mt19937 rng(1);
    for (auto& v : px) v = static_cast<std::uint8_t>(rng() % 256);
    write_idx_images(dir / "train-images-idx3-ubyte", px, 5, 28, 28);
    write_idx_labels(dir / "train-labels-idx1-ubyte", {3, 1, 4, 1, 5});
    const auto set = load_mnist(dir, "train");
    REQUIRE(set.images.shape() == Shape{5, 1, 32, 32});
    CHECK(set.labels == std::vector<int>{3, 1, 4, 1, 5});
    for (int i = 0; i < 5; ++i)
        for (int r = 0; r < 32; ++r)
            for (int c = 0; c < 32; ++c) {
                const float v = set.images[static_cast<std::size_t>(i) * 1024 + r * 32 + c];
                if (r < 2 || r >= 30 || c < 2 || c >= 30)
                    CHECK(v == 0.0f);
                else
                    CHECK(v == px[static_cast<std::size_t>(i) * 784 + (r - 2) * 28 + (c - 2)] / 255.0f);
            }
    std::filesystem::remove_all(dir);
}

TEST_CASE("a full-size 60,000-image idx file loads with every pixel in [0, 1]") {
    const auto dir = temp_dir("vce_idx_full");
    const int n = 60000;
    std::vector<std::uint8_t> px(static_cast<std::size_t>(n) * 784), labels(static_cast<std::size_t>(n));
    for (std::size_t k = 0; k < px.size(); ++k) px[k] = static_cast<std::uint8_t>((k * 2654435761u) >> 24);
    for (int i = 0; i < n; ++i) labels[i] = static_cast<std::uint8_t>(i % 10);
    write_idx_images(dir / "train-images-idx3-ubyte", px, n, 28, 28);
    write_idx_labels(dir / "train-labels-idx1-ubyte", labels);
    const auto set = load_mnist(dir, "train");
    CHECK(set.images.dim(0) == 60000);
    CHECK(set.labels.size() == 60000u);
    float lo = 1, hi = 0;
    for (float v : set.images.vec()) {
        lo = std::min(lo, v);
        hi = std::max(hi, v);
    }
    CHECK(lo >= 0.0f);
    CHECK(hi <= 1.0f);
    CHECK(hi == 1.0f);
    std::filesystem::remove_all(dir);
}

TEST_CASE("ingestion errors name the offending file") {
    const auto dir = temp_dir("vce_idx_bad");
    CHECK_THROWS_WITH(load_mnist(dir, "test"), doctest::Contains("t10k-images-idx3-ubyte"));
    write_idx_images(dir / "t10k-images-idx3-ubyte", std::vector<std::uint8_t>(2 * 784), 2, 28, 28);
    write_idx_labels(dir / "t10k-labels-idx1-ubyte", {1, 2, 3});
    CHECK_THROWS_WITH(load_mnist(dir, "test"), doctest::Contains("t10k-labels-idx1-ubyte"));
    {
        std::ofstream out(dir / "t10k-images-idx3-ubyte", std::ios::binary);
        out << "garbage";
    }
    CHECK_THROWS_WITH(load_mnist(dir, "test"), doctest::Contains("t10k-images-idx3-ubyte"));
    CHECK_THROWS_WITH(load_mnist(dir, "valid"), doctest::Contains("unknown split"));
    std::filesystem::remove_all(dir);
}

TEST_CASE("split_lines: blank image gives no segments") {
    CHECK(split_lines(canvas()).segments.empty());
}

TEST_CASE("split_lines: a single straight stroke is one segment") {
    auto h = canvas();
    paint(h, 14, 17, 6, 26);
    const auto sh = split_lines(h);
    CHECK(sh.segments.size() == 1);
    check_partition(sh);
    auto d = canvas();
    for (int k = 6; k < 26; ++k) paint(d, k, k + 2, k - 1, k + 2);
    const auto sd = split_lines(d);
    CHECK(sd.segments.size() == 1);
    check_partition(sd);
}

TEST_CASE("split_lines: two crossing strokes give two segments") {
    for (int w : {2, 3}) {
        CAPTURE(w);
        auto plus = canvas();
        paint(plus, 16 - w / 2, 16 - w / 2 + w, 5, 27);
        paint(plus, 5, 27, 16 - w / 2, 16 - w / 2 + w);
        const auto s = split_lines(plus);
        CHECK(s.segments.size() == 2);
        check_partition(s);
    }
}

TEST_CASE("split_lines: an L corner stays one segment, a T gives two") {
    auto l = canvas();
    paint(l, 6, 26, 8, 11);
    paint(l, 23, 26, 8, 26);
    CHECK(split_lines(l).segments.size() >= 1);
    auto t = canvas();
    paint(t, 6, 9, 5, 27);
    paint(t, 6, 27, 15, 18);
    const auto st = split_lines(t);
    CHECK(st.segments.size() == 2);
    check_partition(st);
}

TEST_CASE("split_lines is deterministic and partitions the ink of 1,000 digit-like images") {
    const auto set = from_synthetic(100, 5);
    for (int i = 0; i < set.images.dim(0); ++i) {
        const auto img = slice_rows(set.images, static_cast<std::size_t>(i), 1);
        const auto s = split_lines(img);
        CHECK(!s.segments.empty());
        check_partition(s);
        if (i % 100 == 0) CHECK(split_lines(img).segments == s.segments);
    }
}

TEST_CASE("mnist pairs: labels match the recomputed segment difference") {
    const auto set = from_synthetic(20, 6);
    const auto pairs = make_mnist_pairs(set, 400, 7);
    REQUIRE(pairs.size() == 400u);
    int positives = 0;
    for (std::size_t i = 0; i < pairs.size(); ++i) {
        const auto& p = pairs[i];
        const auto split = split_lines(slice_rows(set.images, p.seed, 1));
        CHECK(p.a.vec() == mask_segments(split, p.shown_a).vec());
        CHECK(p.b.vec() == mask_segments(split, p.shown_b).vec());
        CHECK(p.class_id == set.labels[p.seed]);
        // segments whose pixels differ between the two images
        int differing = 0;
        for (const auto& seg : split.segments) {
            bool diff = false;
            for (int px : seg) diff = diff || p.a[static_cast<std::size_t>(px)] != p.b[static_cast<std::size_t>(px)];
            differing += diff;
        }
        CHECK((p.label == 1) == (differing == 1));
        if (i % 4 == 2) CHECK(p.a.vec() == p.b.vec());
        if (i % 4 == 3 && split.segments.size() >= 2) CHECK(differing >= 2);
        positives += p.label;
    }
    CHECK(positives == 200);
}

TEST_CASE("mnist pairs: reproducible, empty request allowed") {
    const auto set = from_synthetic(2, 8);
    const auto a = make_mnist_pairs(set, 10, 3), b = make_mnist_pairs(set, 10, 3);
    for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i].a.vec() == b[i].a.vec());
    CHECK(make_mnist_pairs(set, 0, 3).empty());
    CHECK_THROWS(make_mnist_pairs(set, -1, 3));
}
