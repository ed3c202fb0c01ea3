#include "vce/mnist_lines.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <numeric>
#include <stdexcept>

#include "vce/core/random.hpp"

namespace vce::mnist {

namespace {

constexpr int S = synth::kImageSize;

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("mnist: cannot open " + path.string());
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::uint32_t be32(const std::vector<std::uint8_t>& b, std::size_t at) {
    return (std::uint32_t{b[at]} << 24) | (std::uint32_t{b[at + 1]} << 16) | (std::uint32_t{b[at + 2]} << 8) |
           std::uint32_t{b[at + 3]};
}

void put_be32(std::ofstream& out, std::uint32_t v) {
    const char b[4] = {static_cast<char>(v >> 24), static_cast<char>(v >> 16), static_cast<char>(v >> 8),
                       static_cast<char>(v)};
    out.write(b, 4);
}

// Neighbours P2..P9 clockwise from north.
constexpr std::array<int, 8> kDr = {-1, -1, 0, 1, 1, 1, 0, -1};
constexpr std::array<int, 8> kDc = {0, 1, 1, 1, 0, -1, -1, -1};

bool on(const std::vector<std::uint8_t>& m, int r, int c) {
    return r >= 0 && r < S && c >= 0 && c < S && m[static_cast<std::size_t>(r * S + c)];
}

int transitions(const std::vector<std::uint8_t>& m, int r, int c) {
    int t = 0;
    for (int k = 0; k < 8; ++k) t += !on(m, r + kDr[k], c + kDc[k]) && on(m, r + kDr[(k + 1) % 8], c + kDc[(k + 1) % 8]);
    return t;
}

int neighbours(const std::vector<std::uint8_t>& m, int r, int c) {
    int n = 0;
    for (int k = 0; k < 8; ++k) n += on(m, r + kDr[k], c + kDc[k]);
    return n;
}

// 8-connected components of the set pixels; -1 elsewhere.
std::vector<int> components(const std::vector<std::uint8_t>& m, int* count) {
    std::vector<int> label(m.size(), -1);
    int next = 0;
    for (int p = 0; p < S * S; ++p) {
        if (!m[p] || label[p] >= 0) continue;
        std::vector<int> stack{p};
        label[p] = next;
        while (!stack.empty()) {
            const int q = stack.back();
            stack.pop_back();
            for (int k = 0; k < 8; ++k) {
                const int r = q / S + kDr[k], c = q % S + kDc[k];
                if (!on(m, r, c) || label[r * S + c] >= 0) continue;
                label[r * S + c] = next;
                stack.push_back(r * S + c);
            }
        }
        ++next;
    }
    *count = next;
    return label;
}

struct UnionFind {
    std::vector<int> parent;
    explicit UnionFind(int n) : parent(static_cast<std::size_t>(n)) { std::iota(parent.begin(), parent.end(), 0); }
    int find(int x) { return parent[x] == x ? x : parent[x] = find(parent[x]); }
    void join(int a, int b) {
        a = find(a);
        b = find(b);
        if (a != b) parent[std::max(a, b)] = std::min(a, b);
    }
};

}  // namespace

MnistSet load_idx(const std::filesystem::path& images_file, const std::filesystem::path& labels_file) {
    const auto img = read_file(images_file);
    if (img.size() < 16 || be32(img, 0) != 0x00000803)
        throw std::runtime_error("mnist: " + images_file.string() + " is not an idx3 image file");
    const std::uint32_t n = be32(img, 4), rows = be32(img, 8), cols = be32(img, 12);
    if (rows > static_cast<std::uint32_t>(S) || cols > static_cast<std::uint32_t>(S) || rows == 0 || cols == 0)
        throw std::runtime_error("mnist: " + images_file.string() + " has unsupported image size");
    if (img.size() != 16 + static_cast<std::size_t>(n) * rows * cols)
        throw std::runtime_error("mnist: " + images_file.string() + " is truncated or has trailing bytes");
    const auto lab = read_file(labels_file);
    if (lab.size() < 8 || be32(lab, 0) != 0x00000801)
        throw std::runtime_error("mnist: " + labels_file.string() + " is not an idx1 label file");
    if (be32(lab, 4) != n || lab.size() != 8 + static_cast<std::size_t>(n))
        throw std::runtime_error("mnist: " + labels_file.string() + " does not hold " + std::to_string(n) + " labels");

    MnistSet out;
    out.images = Tensor<float>({static_cast<int>(n), 1, S, S});
    const int top = (S - static_cast<int>(rows)) / 2, left = (S - static_cast<int>(cols)) / 2;
    for (std::uint32_t i = 0; i < n; ++i) {
        float* dst = out.images.data() + static_cast<std::size_t>(i) * S * S;
        const std::uint8_t* src = img.data() + 16 + static_cast<std::size_t>(i) * rows * cols;
        for (std::uint32_t r = 0; r < rows; ++r)
            for (std::uint32_t c = 0; c < cols; ++c)
                dst[(top + static_cast<int>(r)) * S + left + static_cast<int>(c)] = src[r * cols + c] / 255.0f;
        const int y = lab[8 + i];
        if (y > 9) throw std::runtime_error("mnist: " + labels_file.string() + " has label " + std::to_string(y));
        out.labels.push_back(y);
    }
    return out;
}

MnistSet load_mnist(const std::filesystem::path& dir, const std::string& split) {
    std::string prefix;
    if (split == "train")
        prefix = "train";
    else if (split == "test" || split == "t10k")
        prefix = "t10k";
    else
        throw std::invalid_argument("mnist: unknown split '" + split + "' (expected train or test)");
    return load_idx(dir / (prefix + "-images-idx3-ubyte"), dir / (prefix + "-labels-idx1-ubyte"));
}

void write_idx_images(const std::filesystem::path& path, const std::vector<std::uint8_t>& pixels, int count,
                      int rows, int cols) {
    if (pixels.size() != static_cast<std::size_t>(count) * rows * cols)
        throw std::invalid_argument("mnist: pixel count does not match the image dimensions");
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("mnist: cannot write " + path.string());
    for (std::uint32_t v : {0x00000803u, static_cast<std::uint32_t>(count), static_cast<std::uint32_t>(rows),
                            static_cast<std::uint32_t>(cols)})
        put_be32(out, v);
    out.write(reinterpret_cast<const char*>(pixels.data()), static_cast<std::streamsize>(pixels.size()));
}

void write_idx_labels(const std::filesystem::path& path, const std::vector<std::uint8_t>& labels) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("mnist: cannot write " + path.string());
    put_be32(out, 0x00000801u);
    put_be32(out, static_cast<std::uint32_t>(labels.size()));
    out.write(reinterpret_cast<const char*>(labels.data()), static_cast<std::streamsize>(labels.size()));
}

std::vector<std::uint8_t> skeletonize(std::vector<std::uint8_t> m) {
    if (m.size() != static_cast<std::size_t>(S * S)) throw std::invalid_argument("skeletonize: expects 32 x 32");
    for (bool changed = true; changed;) {
        changed = false;
        for (int pass = 0; pass < 2; ++pass) {
            std::vector<int> drop;
            for (int r = 0; r < S; ++r)
                for (int c = 0; c < S; ++c) {
                    if (!m[r * S + c]) continue;
                    const int b = neighbours(m, r, c);
                    if (b < 2 || b > 6 || transitions(m, r, c) != 1) continue;
                    const bool p2 = on(m, r - 1, c), p4 = on(m, r, c + 1), p6 = on(m, r + 1, c), p8 = on(m, r, c - 1);
                    const bool keep = pass == 0 ? (p2 && p4 && p6) || (p4 && p6 && p8)
                                                : (p2 && p4 && p8) || (p2 && p6 && p8);
                    if (!keep) drop.push_back(r * S + c);
                }
            for (int p : drop) m[p] = 0;
            changed = changed || !drop.empty();
        }
    }
    return m;
}

StrokeSplit split_lines(const synth::Image& image, const SplitParams& params) {
    if (image.size() != static_cast<std::size_t>(S * S)) throw std::invalid_argument("split_lines: expects 32 x 32");
    StrokeSplit out;
    out.source = image;
    std::vector<int> ink;
    std::vector<std::uint8_t> mask(S * S, 0);
    for (int p = 0; p < S * S; ++p) {
        if (image[p] > 0.0f) ink.push_back(p);
        mask[p] = image[p] >= params.binarize;
    }
    if (ink.empty()) return out;

    std::vector<std::uint8_t> skel = skeletonize(mask);
    // every ink blob keeps at least one skeleton pixel
    int n_blobs = 0;
    const auto blob = components(mask, &n_blobs);
    for (int b = 0; b < n_blobs; ++b) {
        double sr = 0, sc = 0;
        std::vector<int> px;
        bool has = false;
        for (int p = 0; p < S * S; ++p)
            if (blob[p] == b) {
                px.push_back(p);
                sr += p / S;
                sc += p % S;
                has = has || skel[p];
            }
        if (has) continue;
        sr /= static_cast<double>(px.size());
        sc /= static_cast<double>(px.size());
        const int best = *std::min_element(px.begin(), px.end(), [&](int a, int q) {
            return std::hypot(a / S - sr, a % S - sc) < std::hypot(q / S - sr, q % S - sc);
        });
        skel[best] = 1;
    }

    // junction regions: branch points plus their skeleton neighbours, so
    // arms leaving a junction are not connected to each other diagonally
    std::vector<std::uint8_t> junction(S * S, 0), branch_px(S * S, 0);
    for (int p = 0; p < S * S; ++p) {
        if (!skel[p] || transitions(skel, p / S, p % S) < 3) continue;
        junction[p] = 1;
        for (int k = 0; k < 8; ++k)
            if (on(skel, p / S + kDr[k], p % S + kDc[k])) junction[(p / S + kDr[k]) * S + p % S + kDc[k]] = 1;
    }
    for (int p = 0; p < S * S; ++p) branch_px[p] = skel[p] && !junction[p];
    int n_branches = 0, n_junctions = 0;
    const auto branch = components(branch_px, &n_branches);
    const auto cluster = components(junction, &n_junctions);

    std::vector<int> size(static_cast<std::size_t>(n_branches), 0);
    for (int p = 0; p < S * S; ++p)
        if (branch[p] >= 0) ++size[branch[p]];
    // branch -> adjacent junction clusters
    std::vector<std::vector<int>> touches(static_cast<std::size_t>(n_branches));
    for (int p = 0; p < S * S; ++p) {
        if (branch[p] < 0) continue;
        for (int k = 0; k < 8; ++k) {
            const int r = p / S + kDr[k], c = p % S + kDc[k];
            if (!on(junction, r, c)) continue;
            auto& t = touches[branch[p]];
            if (std::find(t.begin(), t.end(), cluster[r * S + c]) == t.end()) t.push_back(cluster[r * S + c]);
        }
    }

    // drop short end branches hanging off a junction
    std::vector<std::uint8_t> kept(static_cast<std::size_t>(n_branches), 1);
    int n_kept = n_branches;
    for (int b = 0; b < n_branches; ++b) {
        if (touches[b].size() == 1 && size[b] < params.min_spur && n_kept > 1) {
            kept[b] = 0;
            --n_kept;
        }
    }

    std::vector<std::array<double, 2>> centre(static_cast<std::size_t>(n_junctions), {0.0, 0.0});
    std::vector<int> csize(static_cast<std::size_t>(n_junctions), 0);
    for (int p = 0; p < S * S; ++p)
        if (cluster[p] >= 0) {
            centre[cluster[p]][0] += p / S;
            centre[cluster[p]][1] += p % S;
            ++csize[cluster[p]];
        }
    for (int j = 0; j < n_junctions; ++j) {
        centre[j][0] /= csize[j];
        centre[j][1] /= csize[j];
    }

    // outward direction of branch b at junction j: mean of its first pixels
    auto direction = [&](int b, int j) {
        std::vector<int> depth(S * S, -1), frontier;
        for (int p = 0; p < S * S; ++p) {
            if (branch[p] != b) continue;
            for (int k = 0; k < 8; ++k) {
                const int r = p / S + kDr[k], c = p % S + kDc[k];
                if (on(junction, r, c) && cluster[r * S + c] == j) {
                    depth[p] = 0;
                    frontier.push_back(p);
                    break;
                }
            }
        }
        double sr = 0, sc = 0;
        int n = 0;
        for (int d = 0; d < params.direction_depth && !frontier.empty(); ++d) {
            std::vector<int> next;
            for (int p : frontier) {
                sr += p / S;
                sc += p % S;
                ++n;
                for (int k = 0; k < 8; ++k) {
                    const int r = p / S + kDr[k], c = p % S + kDc[k];
                    if (r < 0 || r >= S || c < 0 || c >= S) continue;
                    const int q = r * S + c;
                    if (branch[q] == b && depth[q] < 0) {
                        depth[q] = d + 1;
                        next.push_back(q);
                    }
                }
            }
            frontier = std::move(next);
        }
        return std::array<double, 2>{sr / n - centre[j][0], sc / n - centre[j][1]};
    };

    UnionFind uf(n_branches);
    const double tol = std::cos((180.0 - params.merge_angle_deg) * M_PI / 180.0);
    for (int j = 0; j < n_junctions; ++j) {
        std::vector<int> arms;
        for (int b = 0; b < n_branches; ++b)
            if (kept[b] && std::find(touches[b].begin(), touches[b].end(), j) != touches[b].end()) arms.push_back(b);
        if (arms.size() == 2) {
            // no longer a branch point once spurs are gone
            uf.join(arms[0], arms[1]);
            continue;
        }
        struct Cand {
            double cosine;
            int a, b;
        };
        std::vector<Cand> cands;
        std::vector<std::array<double, 2>> dirs;
        for (int b : arms) dirs.push_back(direction(b, j));
        for (std::size_t x = 0; x < arms.size(); ++x)
            for (std::size_t y = x + 1; y < arms.size(); ++y) {
                const double nx = std::hypot(dirs[x][0], dirs[x][1]), ny = std::hypot(dirs[y][0], dirs[y][1]);
                if (nx == 0 || ny == 0) continue;
                const double cosine = (dirs[x][0] * dirs[y][0] + dirs[x][1] * dirs[y][1]) / (nx * ny);
                // opposite directions within the tolerance
                if (cosine <= tol) cands.push_back({cosine, arms[x], arms[y]});
            }
        std::sort(cands.begin(), cands.end(), [](const Cand& l, const Cand& r) {
            return l.cosine != r.cosine ? l.cosine < r.cosine : std::tie(l.a, l.b) < std::tie(r.a, r.b);
        });
        std::vector<int> used;
        for (const auto& c : cands) {
            if (std::find(used.begin(), used.end(), c.a) != used.end() ||
                std::find(used.begin(), used.end(), c.b) != used.end())
                continue;
            uf.join(c.a, c.b);
            used.push_back(c.a);
            used.push_back(c.b);
        }
    }

    // seeds: skeleton pixels of kept branches (or junction clusters when none)
    std::vector<int> seed_px, seed_group;
    for (int p = 0; p < S * S; ++p) {
        if (n_kept > 0 && branch[p] >= 0 && kept[branch[p]]) {
            seed_px.push_back(p);
            seed_group.push_back(uf.find(branch[p]));
        } else if (n_kept == 0 && cluster[p] >= 0) {
            seed_px.push_back(p);
            seed_group.push_back(n_branches + cluster[p]);
        }
    }
    // renumber groups by first seed pixel
    std::vector<int> order;
    for (int g : seed_group)
        if (std::find(order.begin(), order.end(), g) == order.end()) order.push_back(g);
    out.segments.resize(order.size());
    for (int p : ink) {
        int best = 0;
        int best_d = 1 << 30;
        for (std::size_t s = 0; s < seed_px.size(); ++s) {
            const int dr = p / S - seed_px[s] / S, dc = p % S - seed_px[s] % S;
            const int d = dr * dr + dc * dc;
            if (d < best_d) {
                best_d = d;
                best = static_cast<int>(s);
            }
        }
        const auto g = std::find(order.begin(), order.end(), seed_group[best]) - order.begin();
        out.segments[g].push_back(p);
    }
    return out;
}

synth::Image mask_segments(const StrokeSplit& split, const synth::ConceptSet& shown) {
    synth::Image img = split.source;
    for (std::size_t s = 0; s < split.segments.size(); ++s)
        if (s >= static_cast<std::size_t>(synth::kNumConcepts) || !shown[s])
            for (int p : split.segments[s]) img[static_cast<std::size_t>(p)] = 0.0f;
    return img;
}

std::vector<synth::ChangePair> make_mnist_pairs(const MnistSet& data, int n_pairs, std::uint64_t seed,
                                                const SplitParams& params) {
    if (n_pairs < 0) throw std::invalid_argument("mnist pairs: count must be >= 0");
    const int n = data.images.shape().empty() ? 0 : data.images.dim(0);
    if (n_pairs > 0 && n == 0) throw std::invalid_argument("mnist pairs: empty dataset");
    std::vector<synth::ChangePair> out;
    out.reserve(static_cast<std::size_t>(n_pairs));
    for (int i = 0; i < n_pairs; ++i) {
        Rng rng(derive_seed(seed, 31, static_cast<std::uint64_t>(i)));
        std::uniform_int_distribution<int> pick(0, n - 1);
        StrokeSplit split;
        int digit = 0;
        for (int attempt = 0;; ++attempt) {
            if (attempt == 1000) throw std::runtime_error("mnist pairs: no digit with 1 to 8 segments found");
            digit = pick(rng);
            split = split_lines(slice_rows(data.images, static_cast<std::size_t>(digit), 1), params);
            if (!split.segments.empty() && split.segments.size() <= static_cast<std::size_t>(synth::kNumConcepts))
                break;
        }
        const int k = static_cast<int>(split.segments.size());
        synth::PairKind kind = (i % 4 < 2) ? synth::PairKind::positive
                               : (i % 4 == 2) ? synth::PairKind::zero_change
                                              : synth::PairKind::multi_change;
        if (kind == synth::PairKind::multi_change && k < 2) kind = synth::PairKind::zero_change;
        synth::ConceptSet shown_a, flips;
        std::bernoulli_distribution coin(0.5);
        for (int s = 0; s < k; ++s)
            if (coin(rng)) shown_a.set(s);
        if (kind == synth::PairKind::positive) {
            flips.set(std::uniform_int_distribution<int>(0, k - 1)(rng));
        } else if (kind == synth::PairKind::multi_change) {
            const int m = std::uniform_int_distribution<int>(2, k)(rng);
            std::vector<int> idx(static_cast<std::size_t>(k));
            std::iota(idx.begin(), idx.end(), 0);
            std::shuffle(idx.begin(), idx.end(), rng);
            for (int s = 0; s < m; ++s) flips.set(idx[s]);
        }
        synth::ChangePair p;
        p.shown_a = shown_a;
        p.shown_b = shown_a ^ flips;
        p.a = mask_segments(split, p.shown_a);
        p.b = mask_segments(split, p.shown_b);
        p.label = kind == synth::PairKind::positive ? 1 : 0;
        p.class_id = data.labels[static_cast<std::size_t>(digit)];
        p.variant_id = -1;
        p.seed = static_cast<std::uint64_t>(digit);
        out.push_back(std::move(p));
    }
    return out;
}

}  // namespace vce::mnist
