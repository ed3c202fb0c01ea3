#include "vce/explain.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <stdexcept>

namespace vce::explain {

namespace {

Tensor<float> stack(const std::vector<synth::Image>& images) {
    if (images.empty()) return {};
    Shape shape{static_cast<int>(images.size())};
    for (int d : images.front().shape()) shape.push_back(d);
    std::vector<float> data;
    data.reserve(images.size() * images.front().size());
    for (const auto& im : images) data.insert(data.end(), im.vec().begin(), im.vec().end());
    return Tensor<float>(std::move(shape), std::move(data));
}

synth::Image row_image(const Tensor<float>& batch, std::size_t i) {
    Shape shape(batch.shape().begin() + 1, batch.shape().end());
    const std::size_t row = batch.row_size();
    return synth::Image(std::move(shape),
                        std::vector<float>(batch.data() + i * row, batch.data() + (i + 1) * row));
}

Tensor<float> rows_of(const std::vector<std::vector<float>>& rows) {
    const int w = rows.empty() ? 0 : static_cast<int>(rows.front().size());
    std::vector<float> data;
    for (const auto& r : rows) data.insert(data.end(), r.begin(), r.end());
    return Tensor<float>({static_cast<int>(rows.size()), w}, std::move(data));
}

void check_widths(std::span<const float> a, std::span<const float> b) {
    if (a.size() != b.size()) throw std::invalid_argument("interpolation: latent widths differ");
}

std::vector<float> row_of(const Tensor<float>& t, std::size_t i) {
    const std::size_t w = t.row_size();
    return std::vector<float>(t.data() + i * w, t.data() + (i + 1) * w);
}

}  // namespace

void GraphParams::validate() const {
    if (!(t > 0 && t <= 1)) throw std::invalid_argument("graph params: t must lie in (0, 1]");
    if (alpha_g < 0 || beta_g < 0 || gamma_g < 0) throw std::invalid_argument("graph params: weights must be >= 0");
    if (delta_min < 0 || significant < 0) throw std::invalid_argument("graph params: thresholds must be >= 0");
}

nlohmann::json to_json(const GraphParams& p) {
    return {{"t", p.t},
            {"alpha", p.alpha_g},
            {"beta", p.beta_g},
            {"gamma", p.gamma_g},
            {"delta_min", p.delta_min},
            {"significant_only", p.significant_only},
            {"significant", p.significant}};
}

GraphParams graph_params_from_json(const nlohmann::json& j) {
    GraphParams p;
    p.t = j.value("t", p.t);
    p.alpha_g = j.value("alpha", p.alpha_g);
    p.beta_g = j.value("beta", p.beta_g);
    p.gamma_g = j.value("gamma", p.gamma_g);
    p.delta_min = j.value("delta_min", p.delta_min);
    p.significant_only = j.value("significant_only", p.significant_only);
    p.significant = j.value("significant", p.significant);
    p.validate();
    return p;
}

std::string method_name(Method m) {
    switch (m) {
        case Method::sm: return "sm";
        case Method::dim: return "dim";
        case Method::graph: return "graph";
    }
    throw std::invalid_argument("unknown method");
}

Method parse_method(const std::string& name) {
    if (name == "sm") return Method::sm;
    if (name == "dim") return Method::dim;
    if (name == "graph") return Method::graph;
    throw std::invalid_argument("unknown method '" + name + "' (expected sm, dim or graph)");
}

std::vector<synth::Image> Explanation::sequence() const {
    std::vector<synth::Image> out{start};
    out.insert(out.end(), states.begin(), states.end());
    return out;
}

nlohmann::json Explanation::to_json() const {
    return {{"method", method_name(method)},
            {"latent_path", path.latents},
            {"changed_dims", path.changed},
            {"edge_costs", path.step_costs},
            {"total_cost", path.total_cost},
            {"mu_x", mu_x},
            {"exemplar", exemplar}};
}

ExemplarPool make_pool(model::DVAE<float>& model, const Tensor<float>& images) {
    ExemplarPool pool;
    pool.mu_y = model::encode_dataset(model, images).mu_y;
    pool.probs = model::class_probabilities(model, pool.mu_y);
    return pool;
}

std::size_t select_exemplar(std::span<const float> query, const ExemplarPool& pool, int target, double t) {
    const int n = pool.mu_y.shape().empty() ? 0 : pool.mu_y.dim(0);
    if (n == 0) throw std::invalid_argument("select_exemplar: empty pool");
    if (pool.mu_y.row_size() != query.size()) throw std::invalid_argument("select_exemplar: latent widths differ");
    const int classes = pool.probs.dim(1);
    if (target < 0 || target >= classes) throw std::invalid_argument("select_exemplar: target class out of range");
    std::size_t best = 0;
    double best_d = INFINITY;
    bool found = false;
    for (int i = 0; i < n; ++i) {
        if (!(pool.probs[static_cast<std::size_t>(i) * classes + target] > t)) continue;
        double d = 0;
        for (std::size_t k = 0; k < query.size(); ++k) {
            const double diff = static_cast<double>(query[k]) - pool.mu_y[i * query.size() + k];
            d += diff * diff;
        }
        if (!found || d < best_d) {
            best_d = d;
            best = static_cast<std::size_t>(i);
            found = true;
        }
    }
    if (!found)
        throw std::runtime_error("no exemplar: no datapoint of class " + std::to_string(target) +
                                 " has probability above " + std::to_string(t));
    return best;
}

int second_most_likely(std::span<const float> probs) {
    if (probs.size() < 2) throw std::invalid_argument("second_most_likely: needs at least two classes");
    std::vector<int> order(probs.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
    std::stable_sort(order.begin(), order.end(), [&](int l, int r) { return probs[l] > probs[r]; });
    return order[1];
}

LatentPath interp_smooth(std::span<const float> a, std::span<const float> b, int steps) {
    check_widths(a, b);
    if (steps < 1) throw std::invalid_argument("interp_smooth: steps must be positive");
    LatentPath p;
    p.latents.emplace_back(a.begin(), a.end());
    std::vector<int> moving;
    for (std::size_t i = 0; i < a.size(); ++i)
        if (a[i] != b[i]) moving.push_back(static_cast<int>(i));
    for (int k = 1; k <= steps; ++k) {
        const double f = static_cast<double>(k) / steps;
        std::vector<float> z(a.size());
        for (std::size_t i = 0; i < a.size(); ++i)
            z[i] = k == steps ? b[i] : static_cast<float>((1.0 - f) * a[i] + f * b[i]);
        p.latents.push_back(std::move(z));
        p.changed.push_back(moving);
    }
    return p;
}

LatentPath interp_dim(std::span<const float> a, std::span<const float> b, double thresh) {
    check_widths(a, b);
    LatentPath p;
    std::vector<float> z(a.begin(), a.end());
    p.latents.push_back(z);
    std::vector<int> minor, major;
    for (std::size_t i = 0; i < a.size(); ++i) {
        if (std::abs(static_cast<double>(a[i]) - b[i]) > thresh)
            major.push_back(static_cast<int>(i));
        else if (a[i] != b[i])
            minor.push_back(static_cast<int>(i));
    }
    if (!minor.empty()) {
        for (int i : minor) z[i] = b[i];
        p.latents.push_back(z);
        p.changed.push_back(minor);
    }
    for (int i : major) {
        z[i] = b[i];
        p.latents.push_back(z);
        p.changed.push_back({i});
    }
    return p;
}

std::vector<int> graph_dims(std::span<const float> a, std::span<const float> b, const GraphParams& params) {
    check_widths(a, b);
    const double cut = params.significant_only ? params.significant : params.delta_min;
    std::vector<int> dims;
    for (std::size_t i = 0; i < a.size(); ++i)
        if (std::abs(static_cast<double>(a[i]) - b[i]) > cut) dims.push_back(static_cast<int>(i));
    return dims;
}

double edge_weight(double d_prob, double cd_prob, int k, const GraphParams& params) {
    if (k < 1) throw std::invalid_argument("edge_weight: k must be >= 1");
    return (params.alpha_g * (1.0 - d_prob) + params.beta_g * (1.0 - cd_prob)) * std::pow(k, params.gamma_g);
}

std::vector<float> InterpGraph::node_latent(std::uint32_t mask) const {
    std::vector<float> z = a;
    for (std::size_t i = 0; i < dims.size(); ++i)
        if (mask >> i & 1u) z[dims[i]] = b[dims[i]];
    return z;
}

InterpGraph graph_skeleton(std::span<const float> a, std::span<const float> b, std::vector<int> dims) {
    check_widths(a, b);
    if (dims.size() > 16) throw std::invalid_argument("interpolation graph: too many dims (" +
                                                      std::to_string(dims.size()) + " > 16)");
    InterpGraph g;
    g.dims = std::move(dims);
    g.a.assign(a.begin(), a.end());
    g.b.assign(b.begin(), b.end());
    const std::uint32_t full = g.sink();
    for (std::uint32_t t = 1; t <= full && g.dims.size() > 0; ++t)
        // proper submasks of t, descending
        for (std::uint32_t s = (t - 1) & t;; s = (s - 1) & t) {
            g.edges.push_back({s, t, std::popcount(t & ~s), 0, 0, 0});
            if (s == 0) break;
        }
    return g;
}

InterpGraph build_interp_graph(std::span<const float> a, std::span<const float> b, const GraphScorer& scorer,
                               const GraphParams& params) {
    params.validate();
    InterpGraph g = graph_skeleton(a, b, graph_dims(a, b, params));
    if (g.edges.empty()) return g;
    std::vector<std::vector<float>> latents;
    for (std::uint32_t m = 0; m < g.node_count(); ++m) latents.push_back(g.node_latent(m));
    // each node decodes once; D and CD run on the cached images
    g.node_images = scorer.decode(rows_of(latents));
    const auto realism = scorer.realism(g.node_images);
    std::vector<std::size_t> from(g.edges.size()), to(g.edges.size());
    for (std::size_t e = 0; e < g.edges.size(); ++e) {
        from[e] = g.edges[e].from;
        to[e] = g.edges[e].to;
    }
    const auto change = scorer.change(g.node_images, from, to);
    for (std::size_t e = 0; e < g.edges.size(); ++e) {
        auto& ed = g.edges[e];
        ed.d_prob = realism[ed.to];
        ed.cd_prob = change[e];
        ed.weight = edge_weight(ed.d_prob, ed.cd_prob, ed.k, params);
    }
    return g;
}

GraphPath shortest_path(const InterpGraph& graph) {
    GraphPath out;
    const std::uint32_t full = graph.sink();
    if (full == 0) {
        out.nodes = {0};
        return out;
    }
    // outgoing edges per source node
    std::vector<std::vector<const GraphEdge*>> out_edges(graph.node_count());
    for (const auto& e : graph.edges) out_edges[e.from].push_back(&e);
    std::vector<double> cost(graph.node_count(), INFINITY);
    std::vector<std::uint32_t> next(graph.node_count(), 0);
    std::vector<double> step(graph.node_count(), 0);
    cost[full] = 0;
    for (std::uint32_t s = full; s-- > 0;) {
        for (const GraphEdge* e : out_edges[s]) {
            const double c = e->weight + cost[e->to];
            if (c < cost[s] || (c == cost[s] && e->to < next[s])) {
                cost[s] = c;
                next[s] = e->to;
                step[s] = e->weight;
            }
        }
    }
    out.total = cost[0];
    for (std::uint32_t s = 0; s != full; s = next[s]) {
        out.nodes.push_back(s);
        out.costs.push_back(step[s]);
    }
    out.nodes.push_back(full);
    return out;
}

LatentPath graph_latent_path(const InterpGraph& graph, const GraphPath& path) {
    LatentPath p;
    p.latents.push_back(graph.node_latent(path.nodes.front()));
    for (std::size_t i = 1; i < path.nodes.size(); ++i) {
        const std::uint32_t added = path.nodes[i] & ~path.nodes[i - 1];
        std::vector<int> dims;
        for (std::size_t k = 0; k < graph.dims.size(); ++k)
            if (added >> k & 1u) dims.push_back(graph.dims[k]);
        p.latents.push_back(graph.node_latent(path.nodes[i]));
        p.changed.push_back(std::move(dims));
    }
    p.step_costs = path.costs;
    p.total_cost = path.total;
    return p;
}

GraphScorer make_scorer(const ModelBundle& bundle, std::span<const float> mu_x) {
    GraphScorer s;
    std::vector<float> x(mu_x.begin(), mu_x.end());
    model::DVAE<float>* m = bundle.model;
    s.decode = [m, x](const Tensor<float>& z_y) {
        const int n = z_y.dim(0);
        Tensor<float> z_x({n, static_cast<int>(x.size())});
        for (int i = 0; i < n; ++i) std::copy(x.begin(), x.end(), z_x.data() + static_cast<std::size_t>(i) * x.size());
        return model::decode_latents(*m, z_y, z_x);
    };
    if (bundle.d) {
        model::Discriminator<float>* d = bundle.d;
        s.realism = [d](const Tensor<float>& images) { return model::d_predict(*d, images); };
    }
    if (bundle.cd) {
        model::CDModel<float>* cd = bundle.cd;
        s.change = [cd](const Tensor<float>& nodes, std::span<const std::size_t> from,
                        std::span<const std::size_t> to) {
            ag::NoGradGuard guard;
            const nn::RunContext ctx{nn::Mode::eval, nullptr, false};
            const auto z = model::encode_dataset(cd->backbone, nodes).mu_y;
            const auto lp = cd->log_probs_from_latents(ag::Var<float>::constant(gather_rows(z, from)),
                                                       ag::Var<float>::constant(gather_rows(z, to)), ctx);
            std::vector<float> out(from.size());
            for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::exp(lp.value()[i * 2 + 1]);
            return out;
        };
    }
    return s;
}

Explanation explain_latents(const ModelBundle& bundle, std::span<const float> mu_ya, std::span<const float> mu_yb,
                            std::span<const float> mu_xa, Method method, const GraphParams& params) {
    if (!bundle.model) throw std::invalid_argument("explain: model missing");
    check_widths(mu_ya, mu_yb);
    Explanation ex;
    ex.method = method;
    ex.mu_x.assign(mu_xa.begin(), mu_xa.end());
    const GraphScorer scorer = make_scorer(bundle, mu_xa);
    if (std::equal(mu_ya.begin(), mu_ya.end(), mu_yb.begin())) {
        ex.path.latents.emplace_back(mu_ya.begin(), mu_ya.end());
    } else if (method == Method::sm) {
        ex.path = interp_smooth(mu_ya, mu_yb);
    } else if (method == Method::dim) {
        ex.path = interp_dim(mu_ya, mu_yb, params.significant);
    } else {
        if (!bundle.cd || !bundle.d) throw std::invalid_argument("explain: graph method needs CD and D");
        const InterpGraph g = build_interp_graph(mu_ya, mu_yb, scorer, params);
        ex.path = graph_latent_path(g, shortest_path(g));
    }
    const Tensor<float> images = scorer.decode(rows_of(ex.path.latents));
    ex.start = row_image(images, 0);
    for (std::size_t i = 1; i < ex.path.latents.size(); ++i) ex.states.push_back(row_image(images, i));
    return ex;
}

Explanation explain_pair(const ModelBundle& bundle, const synth::Image& x_a, const synth::Image& x_b,
                         Method method, const GraphParams& params) {
    if (!bundle.model) throw std::invalid_argument("explain: model missing");
    const auto e = model::encode_dataset(*bundle.model, stack({x_a, x_b}));
    return explain_latents(bundle, row_of(e.mu_y, 0), row_of(e.mu_y, 1), row_of(e.mu_x, 0), method, params);
}

Explanation explain_query(const ModelBundle& bundle, const synth::Image& x_a, int target, const ExemplarPool& pool,
                          Method method, const GraphParams& params) {
    if (!bundle.model) throw std::invalid_argument("explain: model missing");
    const auto e = model::encode_dataset(*bundle.model, stack({x_a}));
    const auto mu_ya = row_of(e.mu_y, 0);
    if (target < 0) {
        const auto probs = model::class_probabilities(*bundle.model, e.mu_y);
        target = second_most_likely(probs.span());
    }
    const std::size_t idx = select_exemplar(mu_ya, pool, target, params.t);
    Explanation ex = explain_latents(bundle, mu_ya, row_of(pool.mu_y, idx), row_of(e.mu_x, 0), method, params);
    ex.exemplar = static_cast<int>(idx);
    return ex;
}

}  // namespace vce::explain
