#include "vce/synthgen.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numbers>
#include <stdexcept>

#include "vce/core/random.hpp"

namespace vce::synth {

namespace {

constexpr std::uint64_t kStreamTrain = 1;
constexpr std::uint64_t kStreamTest = 2;
constexpr std::uint64_t kStreamDisplacement = 11;
constexpr std::uint64_t kStreamThickness = 12;

float& at(Image& img, int r, int c) { return img[static_cast<std::size_t>(r) * kImageSize + c]; }
float at(const Image& img, int r, int c) {
    return img[static_cast<std::size_t>(r) * kImageSize + c];
}

struct Segment {
    double r0, c0, r1, c1;
};

Segment segment_of(const LineSpec& l) {
    const double half = 0.5 * l.length * kImageSize;
    const double th = l.orientation_deg * std::numbers::pi / 180.0;
    const double cr = l.anchor_row * kImageSize, cc = l.anchor_col * kImageSize;
    return {cr - half * std::sin(th), cc - half * std::cos(th), cr + half * std::sin(th),
            cc + half * std::cos(th)};
}

double point_segment_distance(double pr, double pc, const Segment& s) {
    const double dr = s.r1 - s.r0, dc = s.c1 - s.c0;
    const double len2 = dr * dr + dc * dc;
    double t = len2 > 0 ? ((pr - s.r0) * dr + (pc - s.c0) * dc) / len2 : 0.0;
    t = std::clamp(t, 0.0, 1.0);
    const double qr = s.r0 + t * dr, qc = s.c0 + t * dc;
    return std::hypot(pr - qr, pc - qc);
}

void draw_line(Image& img, const LineSpec& l) {
    const Segment s = segment_of(l);
    for (int r = 0; r < kImageSize; ++r)
        for (int c = 0; c < kImageSize; ++c) {
            const double d = point_segment_distance(r + 0.5, c + 0.5, s);
            const double v = std::clamp(0.5 * l.thickness + 0.5 - d, 0.0, 1.0);
            at(img, r, c) = std::max(at(img, r, c), static_cast<float>(v));
        }
}

// Catmull-Rom weights for fractional offset t.
std::array<double, 4> cubic_weights(double t) {
    const double t2 = t * t, t3 = t2 * t;
    return {0.5 * (-t3 + 2 * t2 - t), 0.5 * (3 * t3 - 5 * t2 + 2), 0.5 * (-3 * t3 + 4 * t2 + t),
            0.5 * (t3 - t2)};
}

std::vector<float> upsample_bicubic(const std::vector<double>& grid, int g) {
    std::vector<float> out(kPixels);
    auto ctrl = [&](int i, int j) {
        i = std::clamp(i, 0, g - 1);
        j = std::clamp(j, 0, g - 1);
        return grid[static_cast<std::size_t>(i) * g + j];
    };
    const double span = static_cast<double>(g - 1) / (kImageSize - 1);
    for (int r = 0; r < kImageSize; ++r) {
        const double u = r * span;
        const int i = std::min(static_cast<int>(std::floor(u)), g - 2);
        const auto wr = cubic_weights(u - i);
        for (int c = 0; c < kImageSize; ++c) {
            const double v = c * span;
            const int j = std::min(static_cast<int>(std::floor(v)), g - 2);
            const auto wc = cubic_weights(v - j);
            double acc = 0.0;
            for (int a = 0; a < 4; ++a)
                for (int b = 0; b < 4; ++b) acc += wr[a] * wc[b] * ctrl(i - 1 + a, j - 1 + b);
            out[static_cast<std::size_t>(r) * kImageSize + c] = static_cast<float>(acc);
        }
    }
    return out;
}

Image morph3(const Image& img, bool dilate) {
    Image out = blank_image();
    for (int r = 0; r < kImageSize; ++r)
        for (int c = 0; c < kImageSize; ++c) {
            float v = dilate ? 0.0f : 1.0f;
            for (int dr = -1; dr <= 1; ++dr)
                for (int dc = -1; dc <= 1; ++dc) {
                    const int rr = r + dr, cc = c + dc;
                    const float s = (rr < 0 || rr >= kImageSize || cc < 0 || cc >= kImageSize)
                                        ? 0.0f
                                        : at(img, rr, cc);
                    v = dilate ? std::max(v, s) : std::min(v, s);
                }
            at(out, r, c) = v;
        }
    return out;
}

ConceptSet random_subset(const ConceptSet& of, Rng& rng) {
    ConceptSet s;
    std::bernoulli_distribution coin(0.5);
    for (int i = 0; i < kNumConcepts; ++i)
        if (of[i] && coin(rng)) s.set(i);
    return s;
}

std::pair<int, int> random_variant(const SynthConfig& config, Rng& rng) {
    std::uniform_int_distribution<int> cls(0, static_cast<int>(config.classes.size()) - 1);
    const int c = cls(rng);
    std::uniform_int_distribution<int> var(0, static_cast<int>(config.classes[c].variants.size()) - 1);
    return {c, var(rng)};
}

void put_u32(std::ostream& out, std::uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                          static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
    out.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t get_u32(std::istream& in) {
    unsigned char b[4];
    in.read(reinterpret_cast<char*>(b), 4);
    return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
           (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

nlohmann::json bits_json(const ConceptSet& s) {
    nlohmann::json arr = nlohmann::json::array();
    for (int i = 0; i < kNumConcepts; ++i) arr.push_back(s[i] ? 1 : 0);
    return arr;
}

ConceptSet bits_from_json(const nlohmann::json& j) {
    ConceptSet s;
    for (int i = 0; i < kNumConcepts && i < static_cast<int>(j.size()); ++i) s[i] = j[i].get<int>() != 0;
    return s;
}

}  // namespace

Image blank_image() { return Image({1, kImageSize, kImageSize}); }

SynthConfig SynthConfig::defaults() {
    SynthConfig c;
    // seven-segment style frame plus one diagonal
    c.lines = {
        {0, 0.0, 0.45, 0.20, 0.50, 2.0},   {1, 90.0, 0.30, 0.35, 0.28, 2.0},
        {2, 90.0, 0.30, 0.35, 0.72, 2.0},  {3, 0.0, 0.45, 0.50, 0.50, 2.0},
        {4, 90.0, 0.30, 0.65, 0.28, 2.0},  {5, 90.0, 0.30, 0.65, 0.72, 2.0},
        {6, 0.0, 0.45, 0.80, 0.50, 2.0},   {7, 126.3, 0.74, 0.50, 0.50, 2.0},
    };
    auto set = [](std::initializer_list<int> idx) {
        ConceptSet s;
        for (int i : idx) s.set(i);
        return s;
    };
    c.classes = {
        {0, {set({0, 1, 2})}},       {1, {set({2, 5})}},
        {2, {set({0, 2, 3, 4})}},    {3, {set({0, 7})}},
        {4, {set({1, 2, 3})}},       {5, {set({0, 1, 3, 5})}},
        {6, {set({1, 4, 6})}},       {7, {set({3, 5, 6})}},
        {8, {set({3, 4, 5, 6})}},
        // variant 0 shares lines with classes 7 and 8, variant 1 shares none
        {9, {set({4, 5, 6}), set({0, 2, 7})}},
    };
    return c;
}

void SynthConfig::validate() const {
    if (lines.size() != kNumConcepts)
        throw std::invalid_argument("synth config: expected 8 line specs, got " + std::to_string(lines.size()));
    for (std::size_t i = 0; i < lines.size(); ++i) {
        const LineSpec& l = lines[i];
        if (l.index != static_cast<int>(i))
            throw std::invalid_argument("synth config: line " + std::to_string(i) + " has index " +
                                        std::to_string(l.index));
        const Segment s = segment_of(l);
        const double m = 0.5 * l.thickness;
        for (double v : {s.r0, s.r1, s.c0, s.c1})
            if (v - m < 0.0 || v + m > kImageSize)
                throw std::invalid_argument("synth config: line " + std::to_string(i) + " leaves the canvas");
    }
    if (classes.empty()) throw std::invalid_argument("synth config: no classes");
    for (std::size_t c = 0; c < classes.size(); ++c) {
        if (classes[c].class_id != static_cast<int>(c))
            throw std::invalid_argument("synth config: class " + std::to_string(c) + " out of order");
        if (classes[c].variants.empty())
            throw std::invalid_argument("synth config: class " + std::to_string(c) + " has no variants");
        for (const auto& v : classes[c].variants)
            if (v.none())
                throw std::invalid_argument("synth config: class " + std::to_string(c) + " has an empty variant");
    }
    if (noise.distortion_grid < 2) throw std::invalid_argument("synth config: distortion grid must be >= 2");
    if (noise.distortion_strength < 0) throw std::invalid_argument("synth config: negative distortion strength");
    if (!(noise.thickness_min > 0) || noise.thickness_max < noise.thickness_min)
        throw std::invalid_argument("synth config: invalid thickness jitter range");
}

nlohmann::json to_json(const SynthConfig& config) {
    nlohmann::json j;
    for (const auto& l : config.lines)
        j["lines"].push_back({{"index", l.index}, {"orientation_deg", l.orientation_deg},
                              {"length", l.length}, {"anchor", {l.anchor_row, l.anchor_col}},
                              {"thickness", l.thickness}});
    for (const auto& c : config.classes) {
        nlohmann::json variants = nlohmann::json::array();
        for (const auto& v : c.variants) variants.push_back(concept_indices(v));
        j["classes"].push_back({{"class_id", c.class_id}, {"variants", variants}});
    }
    j["noise"] = {{"distortion_grid", config.noise.distortion_grid},
                  {"distortion_strength", config.noise.distortion_strength},
                  {"thickness_jitter", {config.noise.thickness_min, config.noise.thickness_max}}};
    return j;
}

SynthConfig config_from_json(const nlohmann::json& j) {
    SynthConfig c = SynthConfig::defaults();
    if (j.contains("lines")) {
        c.lines.clear();
        for (const auto& e : j.at("lines"))
            c.lines.push_back({e.at("index"), e.at("orientation_deg"), e.at("length"),
                               e.at("anchor")[0], e.at("anchor")[1], e.value("thickness", 2.0)});
    }
    if (j.contains("classes")) {
        c.classes.clear();
        for (const auto& e : j.at("classes")) {
            ClassSpec cs;
            cs.class_id = e.at("class_id");
            for (const auto& v : e.at("variants")) {
                const auto idx = v.get<std::vector<int>>();
                cs.variants.push_back(concept_set(idx));
            }
            c.classes.push_back(std::move(cs));
        }
    }
    if (j.contains("noise")) {
        const auto& n = j.at("noise");
        c.noise.distortion_grid = n.value("distortion_grid", c.noise.distortion_grid);
        c.noise.distortion_strength = n.value("distortion_strength", c.noise.distortion_strength);
        if (n.contains("thickness_jitter")) {
            c.noise.thickness_min = n.at("thickness_jitter")[0];
            c.noise.thickness_max = n.at("thickness_jitter")[1];
        }
    }
    c.validate();
    return c;
}

SynthConfig load_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open config " + path.string());
    return config_from_json(nlohmann::json::parse(in));
}

std::vector<int> concept_indices(const ConceptSet& set) {
    std::vector<int> out;
    for (int i = 0; i < kNumConcepts; ++i)
        if (set[i]) out.push_back(i);
    return out;
}

ConceptSet concept_set(std::span<const int> indices) {
    ConceptSet s;
    for (int i : indices) {
        if (i < 0 || i >= kNumConcepts)
            throw std::invalid_argument("concept index " + std::to_string(i) + " out of range 0..7");
        s.set(i);
    }
    return s;
}

Image render_base(const ConceptSet& lines, std::span<const LineSpec> specs) {
    Image img = blank_image();
    for (int i = 0; i < kNumConcepts; ++i)
        if (lines[i]) {
            if (i >= static_cast<int>(specs.size()))
                throw std::invalid_argument("line " + std::to_string(i) + " has no spec");
            draw_line(img, specs[i]);
        }
    return img;
}

Image render_base(std::span<const int> lines, std::span<const LineSpec> specs) {
    for (int i : lines)
        if (i < 0 || i >= static_cast<int>(specs.size()))
            throw std::invalid_argument("unknown line index " + std::to_string(i));
    return render_base(concept_set(lines), specs);
}

DisplacementField make_displacement(const NoiseParams& params, std::uint64_t seed) {
    const int g = params.distortion_grid;
    Rng rng(derive_seed(seed, kStreamDisplacement));
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    std::vector<double> gr(static_cast<std::size_t>(g) * g), gc(gr.size());
    for (std::size_t i = 0; i < gr.size(); ++i) {
        gr[i] = u(rng) * params.distortion_strength;
        gc[i] = u(rng) * params.distortion_strength;
    }
    return {upsample_bicubic(gr, g), upsample_bicubic(gc, g)};
}

Image warp(const Image& image, const DisplacementField& field) {
    Image out = blank_image();
    auto sample = [&](int r, int c) -> double {
        if (r < 0 || r >= kImageSize || c < 0 || c >= kImageSize) return 0.0;
        return at(image, r, c);
    };
    for (int r = 0; r < kImageSize; ++r)
        for (int c = 0; c < kImageSize; ++c) {
            const std::size_t k = static_cast<std::size_t>(r) * kImageSize + c;
            const double sr = r + static_cast<double>(field.d_row[k]);
            const double sc = c + static_cast<double>(field.d_col[k]);
            const int r0 = static_cast<int>(std::floor(sr)), c0 = static_cast<int>(std::floor(sc));
            const double fr = sr - r0, fc = sc - c0;
            double v = 0.0;
            if (fr < 1.0 && fc < 1.0) v += (1 - fr) * (1 - fc) * sample(r0, c0);
            if (fr > 0.0 && fc < 1.0) v += fr * (1 - fc) * sample(r0 + 1, c0);
            if (fr < 1.0 && fc > 0.0) v += (1 - fr) * fc * sample(r0, c0 + 1);
            if (fr > 0.0 && fc > 0.0) v += fr * fc * sample(r0 + 1, c0 + 1);
            out[k] = static_cast<float>(std::clamp(v, 0.0, 1.0));
        }
    return out;
}

Image adjust_thickness(const Image& image, double factor) {
    if (factor == 1.0) return image;
    const bool thicker = factor > 1.0;
    const float w = static_cast<float>(std::min(std::abs(factor - 1.0), 1.0));
    const Image m = morph3(image, thicker);
    Image out = image;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::clamp(image[i] + w * (m[i] - image[i]), 0.0f, 1.0f);
    return out;
}

double thickness_factor(const NoiseParams& params, std::uint64_t seed) {
    if (params.thickness_max == params.thickness_min) return params.thickness_min;
    Rng rng(derive_seed(seed, kStreamThickness));
    return std::uniform_real_distribution<double>(params.thickness_min, params.thickness_max)(rng);
}

Image apply_noise(const Image& image, const NoiseParams& params, std::uint64_t seed) {
    return adjust_thickness(warp(image, make_displacement(params, seed)), thickness_factor(params, seed));
}

Image render_concepts(const SynthConfig& config, const ConceptSet& concepts, std::uint64_t noise_seed) {
    return apply_noise(render_base(concepts, config.lines), config.noise, noise_seed);
}

SyntheticDatapoint make_datapoint(const SynthConfig& config, int class_id, int variant_id,
                                  std::uint64_t noise_seed) {
    const ConceptSet& concepts = config.classes.at(class_id).variants.at(variant_id);
    return {render_concepts(config, concepts, noise_seed), class_id, concepts, variant_id, noise_seed};
}

std::vector<int> Split::labels() const {
    std::vector<int> out;
    out.reserve(records.size());
    for (const auto& r : records) out.push_back(r.class_id);
    return out;
}

Split generate_split(const SynthConfig& config, int per_class, std::uint64_t seed, std::uint64_t stream) {
    if (per_class < 0) throw std::invalid_argument("per-class count must be non-negative");
    const int classes = static_cast<int>(config.classes.size());
    const int n = per_class * classes;
    Split split;
    split.images = Tensor<float>({n, 1, kImageSize, kImageSize});
    split.records.resize(static_cast<std::size_t>(n));
    // item i -> class i % classes; per-item seeds make the result independent of order
    for (int i = 0; i < n; ++i) {
        const int cls = i % classes;
        const std::uint64_t item_seed = derive_seed(seed, stream, static_cast<std::uint64_t>(i));
        Rng rng(item_seed);
        const int nv = static_cast<int>(config.classes[cls].variants.size());
        const int variant = std::uniform_int_distribution<int>(0, nv - 1)(rng);
        const std::uint64_t noise_seed = rng();
        SyntheticDatapoint dp = make_datapoint(config, cls, variant, noise_seed);
        std::copy(dp.image.vec().begin(), dp.image.vec().end(),
                  split.images.data() + static_cast<std::size_t>(i) * kPixels);
        split.records[i] = {cls, variant, dp.concepts, noise_seed};
    }
    return split;
}

Dataset generate_dataset(const SynthConfig& config, DatasetCounts counts, std::uint64_t seed) {
    config.validate();
    return {generate_split(config, counts.train_per_class, seed, kStreamTrain),
            generate_split(config, counts.test_per_class, seed, kStreamTest)};
}

ChangePair make_change_pair(const SynthConfig& config, const ConceptSet& variant, PairKind kind,
                            std::uint64_t seed) {
    if (kind == PairKind::positive && variant.none())
        throw std::invalid_argument("positive change pair requested on an empty variant");
    if (kind == PairKind::multi_change && variant.count() < 2) kind = PairKind::zero_change;
    Rng rng(seed);
    const ConceptSet shown_a = random_subset(variant, rng);
    ConceptSet flips;
    const std::vector<int> lines = concept_indices(variant);
    if (kind == PairKind::positive) {
        flips.set(lines[std::uniform_int_distribution<std::size_t>(0, lines.size() - 1)(rng)]);
    } else if (kind == PairKind::multi_change) {
        const int k = std::uniform_int_distribution<int>(2, static_cast<int>(lines.size()))(rng);
        std::vector<int> order = lines;
        std::shuffle(order.begin(), order.end(), rng);
        for (int i = 0; i < k; ++i) flips.set(order[i]);
    }
    const ConceptSet shown_b = shown_a ^ flips;
    const std::uint64_t noise_seed = rng();
    ChangePair p;
    p.a = render_concepts(config, shown_a, noise_seed);
    p.b = render_concepts(config, shown_b, noise_seed);
    p.label = kind == PairKind::positive ? 1 : 0;
    p.shown_a = shown_a;
    p.shown_b = shown_b;
    p.seed = noise_seed;
    return p;
}

std::vector<ChangePair> generate_change_pairs(const SynthConfig& config, int count, std::uint64_t seed) {
    std::vector<ChangePair> out;
    out.reserve(static_cast<std::size_t>(std::max(count, 0)));
    for (int i = 0; i < count; ++i) {
        Rng rng(derive_seed(seed, 21, static_cast<std::uint64_t>(i)));
        const auto [cls, var] = random_variant(config, rng);
        const PairKind kind = (i % 4 < 2) ? PairKind::positive
                              : (i % 4 == 2) ? PairKind::zero_change
                                             : PairKind::multi_change;
        ChangePair p = make_change_pair(config, config.classes[cls].variants[var], kind, rng());
        p.class_id = cls;
        p.variant_id = var;
        out.push_back(std::move(p));
    }
    return out;
}

std::vector<ChangePair> generate_group_pairs(const SynthConfig& config, int count, std::uint64_t seed) {
    std::vector<ChangePair> out;
    for (int i = 0; i < count; ++i) {
        Rng rng(derive_seed(seed, 22, static_cast<std::uint64_t>(i)));
        const int dim = std::uniform_int_distribution<int>(0, kNumConcepts - 1)(rng);
        const auto [ca, va] = random_variant(config, rng);
        const ConceptSet& sa = config.classes[ca].variants[va];
        int cb = 0, vb = 0;
        do {
            std::tie(cb, vb) = random_variant(config, rng);
        } while (config.classes[cb].variants[vb][dim] != sa[dim]);
        const ConceptSet& sb = config.classes[cb].variants[vb];
        ChangePair p;
        const std::uint64_t seed_a = rng(), seed_b = rng();
        p.a = render_concepts(config, sa, seed_a);
        p.b = render_concepts(config, sb, seed_b);
        p.shown_a = sa;
        p.shown_b = sb;
        p.label = (sa ^ sb).count() == 1 ? 1 : 0;
        p.class_id = ca;
        p.variant_id = va;
        p.seed = seed_a;
        p.shared_dim = dim;
        out.push_back(std::move(p));
    }
    return out;
}

std::vector<ChangePair> generate_positive_pairs(const SynthConfig& config, int count, std::uint64_t seed) {
    std::vector<ChangePair> out;
    for (int i = 0; i < count; ++i) {
        Rng rng(derive_seed(seed, 23, static_cast<std::uint64_t>(i)));
        const auto [cls, var] = random_variant(config, rng);
        ChangePair p = make_change_pair(config, config.classes[cls].variants[var], PairKind::positive, rng());
        p.class_id = cls;
        p.variant_id = var;
        out.push_back(std::move(p));
    }
    return out;
}

std::vector<std::vector<ConceptSet>> ground_truth_concept_paths(const ConceptSet& from, const ConceptSet& to) {
    std::vector<int> diff = concept_indices(from ^ to);
    std::vector<std::vector<ConceptSet>> paths;
    do {
        std::vector<ConceptSet> path{from};
        ConceptSet cur = from;
        for (int d : diff) {
            cur.flip(d);
            path.push_back(cur);
        }
        paths.push_back(std::move(path));
    } while (std::next_permutation(diff.begin(), diff.end()));
    return paths;
}

std::vector<std::vector<Image>> ground_truth_explanations(const SynthConfig& config,
                                                          const SyntheticDatapoint& a,
                                                          const ConceptSet& b_concepts) {
    std::vector<std::vector<Image>> out;
    for (const auto& path : ground_truth_concept_paths(a.concepts, b_concepts)) {
        std::vector<Image> seq;
        for (std::size_t i = 0; i < path.size(); ++i)
            seq.push_back(i == 0 ? a.image : render_concepts(config, path[i], a.noise_seed));
        out.push_back(std::move(seq));
    }
    return out;
}

void write_tensor_file(const std::filesystem::path& path, const Tensor<float>& images) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("write error: cannot open " + path.string());
    const int n = images.shape().empty() ? 0 : images.dim(0);
    put_u32(out, static_cast<std::uint32_t>(n));
    put_u32(out, kImageSize);
    put_u32(out, kImageSize);
    put_u32(out, 1);
    for (float v : images.span()) put_u32(out, std::bit_cast<std::uint32_t>(v));
    if (!out) throw std::runtime_error("write error: " + path.string());
}

Tensor<float> read_tensor_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("read error: cannot open " + path.string());
    const std::uint32_t n = get_u32(in), h = get_u32(in), w = get_u32(in), c = get_u32(in);
    if (!in || h != kImageSize || w != kImageSize || c != 1)
        throw std::runtime_error("read error: bad tensor header in " + path.string());
    Tensor<float> t({static_cast<int>(n), 1, kImageSize, kImageSize});
    for (auto& v : t.vec()) v = std::bit_cast<float>(get_u32(in));
    if (!in) throw std::runtime_error("read error: truncated tensor file " + path.string());
    return t;
}

nlohmann::json manifest_json(const std::vector<Record>& records, const std::string& split) {
    nlohmann::json j{{"format", "vce-manifest"}, {"version", 1}, {"split", split}};
    j["records"] = nlohmann::json::array();
    for (const auto& r : records)
        j["records"].push_back({{"class_id", r.class_id}, {"variant_id", r.variant_id},
                                {"concepts", bits_json(r.concepts)}, {"seed", r.seed}});
    return j;
}

std::vector<Record> records_from_manifest(const nlohmann::json& j) {
    std::vector<Record> out;
    for (const auto& e : j.at("records"))
        out.push_back({e.at("class_id"), e.at("variant_id"), bits_from_json(e.at("concepts")),
                       e.at("seed").get<std::uint64_t>()});
    return out;
}

namespace {

void write_json(const std::filesystem::path& path, const nlohmann::json& j) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("write error: cannot open " + path.string());
    out << j.dump(1) << '\n';
    if (!out) throw std::runtime_error("write error: " + path.string());
}

nlohmann::json read_json(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("read error: cannot open " + path.string());
    return nlohmann::json::parse(in);
}

}  // namespace

void write_split(const std::filesystem::path& dir, const std::string& name, const Split& split) {
    std::filesystem::create_directories(dir);
    write_tensor_file(dir / (name + ".bin"), split.images);
    write_json(dir / (name + ".json"), manifest_json(split.records, name));
}

Split read_split(const std::filesystem::path& dir, const std::string& name) {
    Split s;
    s.images = read_tensor_file(dir / (name + ".bin"));
    s.records = records_from_manifest(read_json(dir / (name + ".json")));
    if (static_cast<int>(s.records.size()) != s.images.dim(0))
        throw std::runtime_error("read error: manifest/tensor count mismatch in " + (dir / name).string());
    return s;
}

void write_pairs(const std::filesystem::path& dir, const std::string& name,
                 const std::vector<ChangePair>& pairs) {
    std::filesystem::create_directories(dir);
    const int n = static_cast<int>(pairs.size());
    Tensor<float> ta({n, 1, kImageSize, kImageSize}), tb({n, 1, kImageSize, kImageSize});
    nlohmann::json j{{"format", "vce-pairs"}, {"version", 1}};
    j["records"] = nlohmann::json::array();
    for (int i = 0; i < n; ++i) {
        const auto& p = pairs[i];
        std::copy(p.a.vec().begin(), p.a.vec().end(), ta.data() + static_cast<std::size_t>(i) * kPixels);
        std::copy(p.b.vec().begin(), p.b.vec().end(), tb.data() + static_cast<std::size_t>(i) * kPixels);
        j["records"].push_back({{"pair_label", p.label}, {"shown_a", bits_json(p.shown_a)},
                                {"shown_b", bits_json(p.shown_b)}, {"class_id", p.class_id},
                                {"variant_id", p.variant_id}, {"seed", p.seed},
                                {"shared_dim", p.shared_dim}});
    }
    write_tensor_file(dir / (name + "_a.bin"), ta);
    write_tensor_file(dir / (name + "_b.bin"), tb);
    write_json(dir / (name + ".json"), j);
}

std::vector<ChangePair> read_pairs(const std::filesystem::path& dir, const std::string& name) {
    const Tensor<float> ta = read_tensor_file(dir / (name + "_a.bin"));
    const Tensor<float> tb = read_tensor_file(dir / (name + "_b.bin"));
    const nlohmann::json j = read_json(dir / (name + ".json"));
    const auto& recs = j.at("records");
    if (static_cast<int>(recs.size()) != ta.dim(0) || ta.dim(0) != tb.dim(0))
        throw std::runtime_error("read error: pair count mismatch in " + (dir / name).string());
    std::vector<ChangePair> out;
    for (std::size_t i = 0; i < recs.size(); ++i) {
        ChangePair p;
        p.a = slice_rows(ta, i, 1);
        p.a.reshape({1, kImageSize, kImageSize});
        p.b = slice_rows(tb, i, 1);
        p.b.reshape({1, kImageSize, kImageSize});
        const auto& r = recs[i];
        p.label = r.at("pair_label");
        p.shown_a = bits_from_json(r.value("shown_a", nlohmann::json::array()));
        p.shown_b = bits_from_json(r.value("shown_b", nlohmann::json::array()));
        p.class_id = r.value("class_id", 0);
        p.variant_id = r.value("variant_id", 0);
        p.seed = r.value("seed", std::uint64_t{0});
        p.shared_dim = r.value("shared_dim", -1);
        out.push_back(std::move(p));
    }
    return out;
}

}  // namespace vce::synth
