#pragma once

// Contrastive explanations: exemplar selection and three ways of moving the
// class latent from a query to an exemplar (smooth, dimension-wise and the
// shortest path through the interpolation graph).

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "vce/model/conditioning.hpp"
#include "vce/synthgen.hpp"

namespace vce::explain {

struct GraphParams {
    double t = 0.95;          // exemplar class-probability threshold
    double alpha_g = 0.5;     // realism weight
    double beta_g = 1.0;      // change-quality weight
    double gamma_g = 1.0;     // exponent of the step-size normalization
    double delta_min = 1e-3;  // dims differing by more than this enter the graph
    bool significant_only = false;  // use |delta| > significant instead
    double significant = 1.0;

    void validate() const;
};

nlohmann::json to_json(const GraphParams& p);
GraphParams graph_params_from_json(const nlohmann::json& j);

enum class Method { sm, dim, graph };
std::string method_name(Method m);
Method parse_method(const std::string& name);

// Class-latent states from the query (entry 0) to the end of the
// explanation, with the dims switched at each step.
struct LatentPath {
    std::vector<std::vector<float>> latents;
    std::vector<std::vector<int>> changed;  // one entry per step
    std::vector<double> step_costs;         // graph edges only
    double total_cost = 0;

    std::size_t steps() const { return changed.size(); }
};

struct Explanation {
    Method method = Method::sm;
    LatentPath path;
    std::vector<float> mu_x;          // query's, shared by every state
    synth::Image start;               // decoded query latent
    std::vector<synth::Image> states; // one per step
    int exemplar = -1;                // pool index when selected

    // start followed by the states
    std::vector<synth::Image> sequence() const;
    nlohmann::json to_json() const;
};

// ---- exemplar selection -----------------------------------------------------

struct ExemplarPool {
    Tensor<float> mu_y;   // [N, n_y]
    Tensor<float> probs;  // [N, classes]
};

ExemplarPool make_pool(model::DVAE<float>& model, const Tensor<float>& images);

// Among pool entries with q(target | mu_y) > t, the one nearest to the query
// in squared distance; ties go to the lowest index.
std::size_t select_exemplar(std::span<const float> query_mu_y, const ExemplarPool& pool, int target, double t);

// Second most likely class of a probability row (ties to the lower class).
int second_most_likely(std::span<const float> probs);

// ---- interpolators ----------------------------------------------------------

// States at fractions k / steps, k = 1..steps.
LatentPath interp_smooth(std::span<const float> a, std::span<const float> b, int steps = 5);

// Dims with |a_i - b_i| <= thresh switch together first (skipped when all of
// them are equal), then each remaining dim in ascending order.
LatentPath interp_dim(std::span<const float> a, std::span<const float> b, double thresh = 1.0);

// Dims that enter the graph for a pair.
std::vector<int> graph_dims(std::span<const float> a, std::span<const float> b, const GraphParams& params);

// Probabilities the graph weights are built from. decode maps class latents
// [K, n_y] to images with the query's mu_x; realism gives p(real) per image;
// change gives p(good change) for the image pairs (nodes[from[e]], nodes[to[e]]).
struct GraphScorer {
    std::function<Tensor<float>(const Tensor<float>& z_y)> decode;
    std::function<std::vector<float>(const Tensor<float>& images)> realism;
    std::function<std::vector<float>(const Tensor<float>& nodes, std::span<const std::size_t> from,
                                     std::span<const std::size_t> to)>
        change;
};

double edge_weight(double d_prob, double cd_prob, int k, const GraphParams& params);

struct GraphEdge {
    std::uint32_t from = 0, to = 0;  // node masks over the graph dims
    int k = 0;                       // |to \ from|
    double d_prob = 0, cd_prob = 0, weight = 0;
};

// Node mask bit i stands for dims[i]; node 0 is the source, the full mask
// the sink. Edges are grouped by target node in ascending order.
struct InterpGraph {
    std::vector<int> dims;
    std::vector<float> a, b;
    std::vector<GraphEdge> edges;
    Tensor<float> node_images;  // [2^n, ...] decoded nodes, empty if unscored

    std::size_t node_count() const { return std::size_t{1} << dims.size(); }
    std::uint32_t sink() const { return static_cast<std::uint32_t>(node_count() - 1); }
    std::vector<float> node_latent(std::uint32_t mask) const;
};

// Graph structure with all weights 0.
InterpGraph graph_skeleton(std::span<const float> a, std::span<const float> b, std::vector<int> dims);

InterpGraph build_interp_graph(std::span<const float> a, std::span<const float> b, const GraphScorer& scorer,
                               const GraphParams& params);

struct GraphPath {
    std::vector<std::uint32_t> nodes;  // source to sink
    std::vector<double> costs;
    double total = 0;
};

// Minimum-weight source to sink path by backward relaxation over masks in
// descending order; among equal totals the lexicographically smallest node
// sequence wins.
GraphPath shortest_path(const InterpGraph& graph);

LatentPath graph_latent_path(const InterpGraph& graph, const GraphPath& path);

// ---- composition ------------------------------------------------------------

struct ModelBundle {
    model::DVAE<float>* model = nullptr;
    model::CDModel<float>* cd = nullptr;             // graph method
    model::Discriminator<float>* d = nullptr;        // graph method
};

GraphScorer make_scorer(const ModelBundle& bundle, std::span<const float> mu_x);

// Explanation between two images (x_b taken as the exemplar).
Explanation explain_pair(const ModelBundle& bundle, const synth::Image& x_a, const synth::Image& x_b,
                         Method method, const GraphParams& params = {});

// Explanation against a target class (-1 picks the query's second most
// likely class) with the exemplar selected from `pool`.
Explanation explain_query(const ModelBundle& bundle, const synth::Image& x_a, int target, const ExemplarPool& pool,
                          Method method, const GraphParams& params = {});

// Explanation between two known latent codes.
Explanation explain_latents(const ModelBundle& bundle, std::span<const float> mu_ya, std::span<const float> mu_yb,
                            std::span<const float> mu_xa, Method method, const GraphParams& params = {});

}  // namespace vce::explain
