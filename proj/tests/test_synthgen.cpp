#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <set>

#include "vce/core/random.hpp"
#include "vce/synthgen.hpp"

using namespace vce;
using namespace vce::synth;

namespace {

int count_nonzero(const Image& img) {
    return static_cast<int>(std::count_if(img.vec().begin(), img.vec().end(), [](float v) { return v > 0; }));
}

double mean_abs_diff(const Image& a, const Image& b) {
    double s = 0;
    for (std::size_t i = 0; i < a.size(); ++i) s += std::abs(a[i] - b[i]);
    return s / static_cast<double>(a.size());
}

Image dilate_support(const Image& img) {
    Image out = blank_image();
    for (int r = 0; r < kImageSize; ++r)
        for (int c = 0; c < kImageSize; ++c) {
            bool any = false;
            for (int dr = -1; dr <= 1; ++dr)
                for (int dc = -1; dc <= 1; ++dc) {
                    const int rr = r + dr, cc = c + dc;
                    if (rr >= 0 && rr < kImageSize && cc >= 0 && cc < kImageSize &&
                        img[static_cast<std::size_t>(rr) * kImageSize + cc] > 0)
                        any = true;
                }
            out[static_cast<std::size_t>(r) * kImageSize + c] = any ? 1.0f : 0.0f;
        }
    return out;
}

}  // namespace

TEST_CASE("default config validates and has ten classes over eight lines") {
    const SynthConfig c = SynthConfig::defaults();
    CHECK_NOTHROW(c.validate());
    CHECK(c.lines.size() == 8);
    CHECK(c.classes.size() == 10);
    CHECK(c.classes[9].variants.size() == 2);
    std::set<unsigned long> seen;
    for (const auto& cls : c.classes)
        for (const auto& v : cls.variants) seen.insert(v.to_ulong());
    CHECK(seen.size() == 11);
}

TEST_CASE("rendering: empty set is blank, every line is visible, composition is a max") {
    const SynthConfig c = SynthConfig::defaults();
    CHECK(count_nonzero(render_base(ConceptSet{}, c.lines)) == 0);
    for (int i = 0; i < kNumConcepts; ++i) {
        ConceptSet s;
        s.set(i);
        CHECK(count_nonzero(render_base(s, c.lines)) >= 8);
    }
    const std::vector<int> pair{0, 7};
    const Image both = render_base(std::span<const int>(pair), c.lines);
    const Image a = render_base(ConceptSet().set(0), c.lines);
    const Image b = render_base(ConceptSet().set(7), c.lines);
    for (std::size_t k = 0; k < both.size(); ++k) CHECK(both[k] == std::max(a[k], b[k]));
    const std::vector<int> bad{8};
    CHECK_THROWS_AS(render_base(std::span<const int>(bad), c.lines), std::invalid_argument);
}

TEST_CASE("zero-strength noise with unit thickness is the identity") {
    const SynthConfig c = SynthConfig::defaults();
    NoiseParams p;
    p.distortion_strength = 0.0;
    p.thickness_min = p.thickness_max = 1.0;
    const Image base = render_base(ConceptSet("01011011"), c.lines);
    const Image out = apply_noise(base, p, 1234);
    for (std::size_t k = 0; k < base.size(); ++k) CHECK(out[k] == doctest::Approx(base[k]).epsilon(1e-6));
}

TEST_CASE("noise is deterministic in the seed") {
    const SynthConfig c = SynthConfig::defaults();
    const Image base = render_base(ConceptSet("00110101"), c.lines);
    const Image x = apply_noise(base, c.noise, 77), y = apply_noise(base, c.noise, 77);
    const Image z = apply_noise(base, c.noise, 78);
    CHECK(x.vec() == y.vec());
    CHECK(x.vec() != z.vec());
}

TEST_CASE("mean deviation from the base render grows with distortion strength") {
    const SynthConfig c = SynthConfig::defaults();
    NoiseParams p = c.noise;
    p.thickness_min = p.thickness_max = 1.0;
    std::vector<double> dev;
    for (double strength : {1.0, 2.0, 4.0}) {
        p.distortion_strength = strength;
        double total = 0;
        for (std::uint64_t s = 0; s < 100; ++s) {
            const auto& v = c.classes[s % 10].variants[0];
            const Image base = render_base(v, c.lines);
            total += mean_abs_diff(base, apply_noise(base, p, s));
        }
        dev.push_back(total / 100);
    }
    CHECK(dev[0] < dev[1]);
    CHECK(dev[1] < dev[2]);
}

TEST_CASE("thickness jitter thickens and thins") {
    const SynthConfig c = SynthConfig::defaults();
    const Image base = render_base(ConceptSet().set(3), c.lines);
    auto mass = [](const Image& im) {
        double s = 0;
        for (float v : im.vec()) s += v;
        return s;
    };
    CHECK(mass(adjust_thickness(base, 1.25)) > mass(base));
    CHECK(mass(adjust_thickness(base, 0.75)) < mass(base));
    CHECK(adjust_thickness(base, 1.0).vec() == base.vec());
}

TEST_CASE("dataset generation: counts, labels, empty splits") {
    const SynthConfig c = SynthConfig::defaults();
    const Dataset d = generate_dataset(c, {3, 1}, 5);
    CHECK(d.train.images.shape() == Shape{30, 1, 32, 32});
    CHECK(d.test.images.dim(0) == 10);
    const auto labels = d.train.labels();
    for (int k = 0; k < 10; ++k) CHECK(std::count(labels.begin(), labels.end(), k) == 3);
    for (float v : d.train.images.vec()) CHECK((v >= 0.0f && v <= 1.0f));

    const Dataset e = generate_dataset(c, {0, 0}, 5);
    CHECK(e.train.images.dim(0) == 0);
    CHECK(e.train.records.empty());
    CHECK(e.test.images.size() == 0);
}

TEST_CASE("split generation is reproducible") {
    const SynthConfig c = SynthConfig::defaults();
    const Split a = generate_split(c, 2, 9, 1), b = generate_split(c, 2, 9, 1);
    CHECK(a.images.vec() == b.images.vec());
    const Split other = generate_split(c, 2, 10, 1);
    CHECK(a.images.vec() != other.images.vec());
}

TEST_CASE("class 9 picks each variant about half the time") {
    const SynthConfig c = SynthConfig::defaults();
    int v0 = 0, total = 0;
    const Split s = generate_split(c, 1000, 3, 1);
    for (const auto& r : s.records)
        if (r.class_id == 9) {
            ++total;
            v0 += r.variant_id == 0;
        }
    CHECK(total == 1000);
    CHECK(std::abs(v0 / static_cast<double>(total) - 0.5) < 0.03);
}

TEST_CASE("change pair labels agree with the shown line sets") {
    const SynthConfig c = SynthConfig::defaults();
    const auto pairs = generate_change_pairs(c, 2000, 11);
    int negatives = 0, positives = 0;
    for (const auto& p : pairs) {
        const std::size_t diff = (p.shown_a ^ p.shown_b).count();
        const ConceptSet variant = c.classes[p.class_id].variants[p.variant_id];
        CHECK((p.shown_a & ~variant).none());
        CHECK((p.shown_b & ~variant).none());
        if (p.label == 1) {
            ++positives;
            CHECK(diff == 1);
        } else {
            ++negatives;
            CHECK(diff != 1);
        }
    }
    CHECK(positives == 1000);
    CHECK(negatives == 1000);
}

TEST_CASE("group pairs share the named concept; positive pairs differ in one") {
    const SynthConfig c = SynthConfig::defaults();
    for (const auto& p : generate_group_pairs(c, 200, 4)) {
        REQUIRE(p.shared_dim >= 0);
        CHECK(p.shown_a[p.shared_dim] == p.shown_b[p.shared_dim]);
    }
    for (const auto& p : generate_positive_pairs(c, 200, 4)) {
        CHECK(p.label == 1);
        CHECK((p.shown_a ^ p.shown_b).count() == 1);
    }
}

TEST_CASE("change pairs only differ near the changed lines") {
    const SynthConfig c = SynthConfig::defaults();
    for (const auto& p : generate_change_pairs(c, 100, 21)) {
        Image diff = blank_image();
        const Image ba = render_base(p.shown_a, c.lines), bb = render_base(p.shown_b, c.lines);
        for (std::size_t k = 0; k < diff.size(); ++k) diff[k] = std::abs(ba[k] - bb[k]);
        const Image mask = dilate_support(warp(diff, make_displacement(c.noise, p.seed)));
        for (std::size_t k = 0; k < diff.size(); ++k)
            if (mask[k] == 0.0f) CHECK(p.a[k] == p.b[k]);
    }
}

TEST_CASE("ground truth explanations enumerate all n! single-line orders") {
    const SynthConfig c = SynthConfig::defaults();
    const SyntheticDatapoint a = make_datapoint(c, 2, 0, 99);  // {0,2,3,4}
    const ConceptSet target("01100001");                     // {0,5,6}
    const std::size_t n = (a.concepts ^ target).count();
    REQUIRE(n == 5);
    const auto paths = ground_truth_concept_paths(a.concepts, target);
    CHECK(paths.size() == 120);
    std::set<std::vector<unsigned long>> distinct;
    for (const auto& path : paths) {
        REQUIRE(path.size() == n + 1);
        CHECK(path.front() == a.concepts);
        CHECK(path.back() == target);
        std::vector<unsigned long> key;
        for (std::size_t i = 1; i < path.size(); ++i) {
            CHECK((path[i] ^ path[i - 1]).count() == 1);
            key.push_back(path[i].to_ulong());
        }
        distinct.insert(key);
    }
    CHECK(distinct.size() == 120);

    const auto seqs = ground_truth_explanations(c, make_datapoint(c, 1, 0, 5), ConceptSet("00100101"));
    REQUIRE(seqs.size() == 1);  // {2,5} -> {0,2,5}
    CHECK(seqs[0].size() == 2);
}

TEST_CASE("on-disk round trip of splits and pairs") {
    const SynthConfig c = SynthConfig::defaults();
    const auto dir = std::filesystem::temp_directory_path() / "vce_synth_io";
    std::filesystem::remove_all(dir);
    const Split s = generate_split(c, 2, 1, 1);
    write_split(dir, "train", s);
    const Split r = read_split(dir, "train");
    CHECK(r.images.vec() == s.images.vec());
    REQUIRE(r.records.size() == s.records.size());
    for (std::size_t i = 0; i < r.records.size(); ++i) {
        CHECK(r.records[i].class_id == s.records[i].class_id);
        CHECK(r.records[i].concepts == s.records[i].concepts);
        CHECK(r.records[i].seed == s.records[i].seed);
    }
    const auto pairs = generate_group_pairs(c, 5, 2);
    write_pairs(dir, "pairs", pairs);
    const auto back = read_pairs(dir, "pairs");
    REQUIRE(back.size() == 5);
    for (std::size_t i = 0; i < 5; ++i) {
        CHECK(back[i].a.vec() == pairs[i].a.vec());
        CHECK(back[i].b.vec() == pairs[i].b.vec());
        CHECK(back[i].shared_dim == pairs[i].shared_dim);
        CHECK(back[i].label == pairs[i].label);
    }
    CHECK_THROWS_WITH_AS(read_tensor_file(dir / "missing.bin"), doctest::Contains("missing.bin"),
                         std::runtime_error);
    std::filesystem::remove_all(dir);
}

TEST_CASE("config json round trip and validation messages") {
    const SynthConfig c = SynthConfig::defaults();
    const SynthConfig back = config_from_json(to_json(c));
    CHECK(to_json(back) == to_json(c));
    SynthConfig bad = c;
    bad.lines[3].length = 2.0;
    CHECK_THROWS_WITH_AS(bad.validate(), doctest::Contains("line 3"), std::invalid_argument);
    bad = c;
    bad.classes[4].variants.clear();
    CHECK_THROWS_WITH_AS(bad.validate(), doctest::Contains("class 4"), std::invalid_argument);
}
