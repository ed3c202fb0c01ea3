// Command-line front end: data generation, training, explanation,
// evaluation, grid search and plotting.

#include <CLI11.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "vce/harness.hpp"

using namespace vce;
namespace fs = std::filesystem;

namespace {

nlohmann::json read_json(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot read " + path.string());
    try {
        return nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
        throw std::runtime_error(path.string() + ": " + e.what());
    }
}

void write_json(const fs::path& path, const nlohmann::json& j) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << j.dump(2) << "\n";
}

std::vector<std::string> split_list(const std::string& s) {
    std::vector<std::string> out;
    std::stringstream ss(s);
    for (std::string item; std::getline(ss, item, ',');)
        if (!item.empty()) out.push_back(item);
    return out;
}

bool is_synthetic_dir(const fs::path& dir) { return fs::exists(dir / "test.json") || fs::exists(dir / "train.json"); }

int scaled(int base, double scale) { return std::max(1, static_cast<int>(std::lround(base * scale))); }

// ---- verbs -------------------------------------------------------------------------

struct GenData {
    std::string config, out;
    std::uint64_t seed = 1;
    double scale = 1.0;
    int pairs = -1;

    void run() const {
        const auto cfg = config.empty() ? synth::SynthConfig::defaults() : synth::load_config(config);
        const std::uint64_t s = harness::seed_from_env(seed);
        synth::DatasetCounts counts;
        counts.train_per_class = scaled(counts.train_per_class, scale);
        counts.test_per_class = scaled(counts.test_per_class, scale);
        const int n_pairs = pairs > 0 ? pairs : scaled(100000, scale);
        fs::create_directories(out);
        write_json(fs::path(out) / "config.json", synth::to_json(cfg));
        const auto data = synth::generate_dataset(cfg, counts, s);
        synth::write_split(out, "train", data.train);
        synth::write_split(out, "test", data.test);
        synth::write_pairs(out, "change", synth::generate_change_pairs(cfg, n_pairs, derive_seed(s, 71)));
        synth::write_pairs(out, "change_test", synth::generate_change_pairs(cfg, 1000, derive_seed(s, 72)));
        synth::write_pairs(out, "group", synth::generate_group_pairs(cfg, n_pairs, derive_seed(s, 73)));
        synth::write_pairs(out, "positive", synth::generate_positive_pairs(cfg, n_pairs, derive_seed(s, 74)));
        write_json(fs::path(out) / "validation_pairs.json",
                   metrics::eac_pairs_json(metrics::generate_eac_pairs(cfg, 90, derive_seed(s, 75))));
        write_json(fs::path(out) / "eval_pairs.json",
                   metrics::eac_pairs_json(metrics::generate_eac_pairs(cfg, 90, derive_seed(s, 76))));
        std::cout << "wrote " << data.train.records.size() << " train, " << data.test.records.size()
                  << " test datapoints and " << n_pairs << " pairs per supervision type to " << out << "\n";
    }
};

struct GenMnistPairs {
    std::string mnist, out, split = "train";
    int n = 10000;
    std::uint64_t seed = 1;

    void run() const {
        const auto data = mnist::load_mnist(mnist, split);
        const auto pairs = mnist::make_mnist_pairs(data, n, harness::seed_from_env(seed));
        synth::write_pairs(out, "pairs", pairs);
        std::cout << "wrote " << pairs.size() << " pairs to " << out << "\n";
    }
};

struct Train {
    std::string config, model, data, cd, out;
    std::int64_t steps = 0;
    double scale = 0;
    std::uint64_t seed = 0;

    void run() const {
        harness::ExperimentConfig c;
        if (!config.empty()) c = harness::load_experiment_config(config);
        if (!model.empty()) {
            const auto kind = model::parse_model_kind(model);
            if (kind != c.kind && (config.empty() || !read_json(config).contains("hyper_params")))
                c.hp = model::HyperParams::selected(kind);
            c.kind = kind;
        }
        if (!data.empty()) c.data_dir = data;
        if (!cd.empty()) c.cd_checkpoint = cd;
        if (steps > 0) c.steps = steps;
        if (scale > 0) c.scale = scale;
        if (seed > 0) c.seed = seed;
        c.seed = harness::seed_from_env(c.seed);
        c.validate();
        std::optional<model::CDModel<float>> cd_model;
        if (c.kind == model::ModelKind::vae_ce) {
            if (c.cd_checkpoint.empty()) throw std::invalid_argument("vae-ce needs a CD checkpoint (--cd)");
            cd_model = model::load_cd(c.cd_checkpoint);
        }
        const auto training = harness::load_training_data(c);
        const auto r = harness::train_model(
            c, training, cd_model ? &*cd_model : nullptr, out,
            [&](std::int64_t s, const model::StepReport& rep, model::ModelTrainer&) {
                if (s == 1 || s % c.log_every == 0)
                    std::cout << "step " << s << " total " << rep.total << " " << rep.dvae.to_json().dump() << "\n";
            });
        std::cout << "trained " << model::model_kind_name(c.kind) << " for " << r.steps << " steps -> " << out << "\n";
    }
};

harness::TrainingData cd_training_data(const fs::path& dir, const std::string& pairs_dir) {
    harness::TrainingData d;
    if (is_synthetic_dir(dir)) {
        const auto split = synth::read_split(dir, "train");
        d.images = split.images;
        d.labels = split.labels();
        d.pairs = synth::read_pairs(pairs_dir.empty() ? dir : fs::path(pairs_dir), pairs_dir.empty() ? "change" : "pairs");
    } else {
        if (pairs_dir.empty()) throw std::invalid_argument("mnist cd training needs --pairs (gen-mnist-pairs output)");
        const auto set = mnist::load_mnist(dir, "train");
        d.images = set.images;
        d.labels = set.labels;
        d.pairs = synth::read_pairs(pairs_dir, "pairs");
    }
    return d;
}

struct TrainCD {
    std::string config, data, pairs, out;
    std::int64_t steps = 0;
    std::uint64_t seed = 0;

    void run() const {
        harness::CDConfig c;
        if (!config.empty()) c = harness::cd_config_from_json(read_json(config));
        if (steps > 0) c.steps = steps;
        if (seed > 0) c.seed = seed;
        c.seed = harness::seed_from_env(c.seed);
        const auto d = cd_training_data(data, pairs);
        harness::train_cd(c, d, out, [&](std::int64_t s, const model::CDStepReport& rep) {
            if (s == 1 || s % c.log_every == 0)
                std::cout << "step " << s << " change_ce " << rep.change_ce << " change_acc " << rep.change_accuracy
                          << "\n";
        });
        std::cout << "trained CD for " << c.steps << " steps -> " << out << "\n";
    }
};

struct CDEval {
    std::string cd, dir, name = "change_test";

    void run() const {
        auto m = model::load_cd(cd);
        const auto pairs = synth::read_pairs(dir, name);
        if (pairs.empty()) throw std::invalid_argument("no pairs in " + dir + "/" + name);
        Shape shape{static_cast<int>(pairs.size())};
        for (int x : pairs[0].a.shape()) shape.push_back(x);
        Tensor<float> a(shape), b(shape);
        std::vector<int> labels;
        const std::size_t row = pairs[0].a.size();
        for (std::size_t i = 0; i < pairs.size(); ++i) {
            std::copy(pairs[i].a.vec().begin(), pairs[i].a.vec().end(), a.data() + i * row);
            std::copy(pairs[i].b.vec().begin(), pairs[i].b.vec().end(), b.data() + i * row);
            labels.push_back(pairs[i].label);
        }
        const double acc = model::cd_accuracy(m, a, b, labels);
        std::cout << nlohmann::json{{"pairs", pairs.size()}, {"accuracy", acc}}.dump() << "\n";
    }
};

struct Explain {
    std::string model_path, cd, d, data, split = "test", method = "graph", out;
    int index = 0, contrast = -1, target = -1;
    double t = 0.95;

    void run() const {
        auto loaded = harness::load_bundle(model_path, cd, d);
        const auto bundle = loaded.bundle();
        const auto m = explain::parse_method(method);
        Tensor<float> images;
        if (is_synthetic_dir(data))
            images = synth::read_split(data, split).images;
        else
            images = mnist::load_mnist(data, split).images;
        const int n = images.dim(0);
        if (index < 0 || index >= n) throw std::out_of_range("--index outside the split (size " + std::to_string(n) + ")");
        const auto query = slice_rows(images, index, 1);
        synth::Image q(Shape(query.shape().begin() + 1, query.shape().end()), query.vec());
        explain::Explanation e;
        if (contrast >= 0) {
            if (contrast >= n) throw std::out_of_range("--contrast outside the split");
            const auto c = slice_rows(images, contrast, 1);
            e = explain::explain_pair(bundle, q, synth::Image(q.shape(), c.vec()), m);
        } else {
            const auto pool = explain::make_pool(*bundle.model, images);
            explain::GraphParams gp;
            gp.t = t;
            e = explain::explain_query(bundle, q, target, pool, m, gp);
        }
        const fs::path prefix(out);
        if (prefix.has_parent_path()) fs::create_directories(prefix.parent_path());
        harness::write_png(prefix.string() + ".png", harness::explanation_strip(q, e.states));
        write_json(prefix.string() + ".json", e.to_json());
        std::cout << "explanation with " << e.states.size() << " states -> " << prefix.string() << ".png\n";
    }
};

struct Evaluate {
    std::string model_path, dataset, metrics = "eac,mig,rep", pairs, cd, d, methods = "sm,dim,graph", out;
    int queries = 200;

    void run() const {
        auto loaded = harness::load_bundle(model_path, cd, d);
        auto bundle = loaded.bundle();
        nlohmann::json report{{"version", metrics::kReportSchemaVersion},
                              {"model", model::model_kind_name(loaded.trained.kind)},
                              {"checkpoint", model_path}};
        const bool synthetic = is_synthetic_dir(dataset);
        for (const auto& metric : split_list(metrics)) {
            if (metric == "eac") {
                if (!synthetic) throw std::invalid_argument("eac needs the synthetic dataset");
                const auto cfg = harness::dataset_config(dataset);
                const fs::path pf = pairs.empty() ? fs::path(dataset) / "eval_pairs.json" : fs::path(pairs);
                const auto p = metrics::eac_pairs_from_json(cfg, read_json(pf));
                std::vector<explain::Method> ms;
                for (const auto& name : split_list(methods)) ms.push_back(explain::parse_method(name));
                const auto r = metrics::eac_report(bundle, cfg, p, ms);
                report.update(r.to_json());
            } else if (metric == "mig" || metric == "rep") {
                if (report.contains("mig")) continue;
                if (synthetic) {
                    const auto train = synth::read_split(dataset, "train");
                    const auto test = synth::read_split(dataset, "test");
                    const auto factors = metrics::concept_factors(test.records);
                    report.update(metrics::representation_report(*bundle.model, train.images, train.labels(),
                                                                 test.images, test.labels(), factors)
                                      .to_json());
                } else {
                    const auto test = mnist::load_mnist(dataset, "test");
                    const auto e = model::elbo_terms(*bundle.model, test.images);
                    const auto probs = model::class_probabilities(*bundle.model,
                                                                  model::encode_dataset(*bundle.model, test.images).mu_y);
                    std::vector<int> pred;
                    const int k = probs.dim(1);
                    for (int i = 0; i < probs.dim(0); ++i) {
                        const float* row = probs.data() + static_cast<std::size_t>(i) * k;
                        pred.push_back(static_cast<int>(std::max_element(row, row + k) - row));
                    }
                    report.update({{"rec", e.rec}, {"kl_y", e.kl_y}, {"kl_x", e.kl_x},
                                   {"acc", metrics::accuracy(pred, test.labels)}});
                }
            } else if (metric == "variant") {
                if (!synthetic) throw std::invalid_argument("variant needs the synthetic dataset");
                const auto test = synth::read_split(dataset, "test");
                report["variant"] = metrics::exemplar_variant_experiment(*bundle.model, test,
                                                                         harness::dataset_config(dataset), queries,
                                                                         0.95, harness::seed_from_env(1))
                                        .to_json();
            } else {
                throw std::invalid_argument("unknown metric '" + metric + "' (expected eac, mig, rep or variant)");
            }
        }
        write_json(out, report);
        std::cout << report.dump(2) << "\n";
    }
};

struct Grid {
    std::string config, grid, data, validation, cd, out;
    double scale = 0;

    void run() const {
        harness::ExperimentConfig base;
        if (!config.empty()) base = harness::load_experiment_config(config);
        if (!data.empty()) base.data_dir = data;
        if (scale > 0) base.scale = scale;
        base.seed = harness::seed_from_env(base.seed);
        const auto spec = grid.empty() ? harness::GridSpec::standard() : harness::grid_spec_from_json(read_json(grid));
        synth::SynthConfig cfg;
        base.kind = model::ModelKind::dvae;
        const auto training = harness::load_training_data(base, &cfg);
        const fs::path vf = validation.empty() ? fs::path(base.data_dir) / "validation_pairs.json" : fs::path(validation);
        const auto pairs = metrics::eac_pairs_from_json(cfg, read_json(vf));
        std::optional<model::CDModel<float>> cd_model;
        const std::string cd_path = cd.empty() ? base.cd_checkpoint : cd;
        if (!cd_path.empty()) cd_model = model::load_cd(cd_path);
        const auto r = harness::run_grid(spec, base, training, cfg, pairs, cd_model ? &*cd_model : nullptr, out);
        std::cout << nlohmann::json(r.to_json()["selected"]).dump(2) << "\n";
    }
};

struct Plot {
    std::string report, out;

    void run() const {
        const auto files = harness::emit_figures({}, read_json(report), out);
        for (const auto& f : files) std::cout << f.string() << "\n";
    }
};

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Contrastive explanations with disentangled VAEs"};
    app.require_subcommand(1);

    GenData gen;
    auto* g = app.add_subcommand("gen-data", "Generate the synthetic dataset and supervision pairs");
    g->add_option("--config", gen.config, "Synthetic dataset config (JSON); defaults when omitted");
    g->add_option("--out", gen.out, "Output directory")->required();
    g->add_option("--seed", gen.seed, "Seed");
    g->add_option("--scale", gen.scale, "Multiplier on datapoint and pair counts")->check(CLI::PositiveNumber);
    g->add_option("--pairs", gen.pairs, "Pairs per supervision type (default 100000 x scale)");
    g->callback([&] { gen.run(); });

    GenMnistPairs gm;
    auto* m = app.add_subcommand("gen-mnist-pairs", "Line-augmented MNIST change pairs");
    m->add_option("--mnist", gm.mnist, "Directory with the MNIST IDX files")->required();
    m->add_option("--out", gm.out, "Output directory")->required();
    m->add_option("--n", gm.n, "Number of pairs");
    m->add_option("--seed", gm.seed, "Seed");
    m->add_option("--split", gm.split, "train or test");
    m->callback([&] { gm.run(); });

    Train tr;
    auto* t = app.add_subcommand("train", "Train a model");
    t->add_option("--config", tr.config, "Experiment config (JSON)");
    t->add_option("--model", tr.model, "dvae, lvae, gvae, ada-gvae or vae-ce");
    t->add_option("--data", tr.data, "Dataset directory");
    t->add_option("--cd", tr.cd, "CD checkpoint (vae-ce)");
    t->add_option("--out", tr.out, "Checkpoint path")->required();
    t->add_option("--steps", tr.steps, "Step budget");
    t->add_option("--scale", tr.scale, "Multiplier on the step budget");
    t->add_option("--seed", tr.seed, "Seed");
    t->callback([&] { tr.run(); });

    TrainCD tc;
    auto* c = app.add_subcommand("train-cd", "Train the change discriminator");
    c->add_option("--config", tc.config, "CD config (JSON)");
    c->add_option("--data", tc.data, "Synthetic dataset or MNIST directory")->required();
    c->add_option("--pairs", tc.pairs, "Directory of gen-mnist-pairs output");
    c->add_option("--out", tc.out, "Checkpoint path")->required();
    c->add_option("--steps", tc.steps, "Step budget");
    c->add_option("--seed", tc.seed, "Seed");
    c->callback([&] { tc.run(); });

    CDEval ce;
    auto* cev = app.add_subcommand("cd-eval", "Pair accuracy of a CD checkpoint");
    cev->add_option("--cd", ce.cd, "CD checkpoint")->required();
    cev->add_option("--pairs", ce.dir, "Directory holding the pair files")->required();
    cev->add_option("--name", ce.name, "Pair file name");
    cev->callback([&] { ce.run(); });

    Explain ex;
    auto* e = app.add_subcommand("explain", "Explain one datapoint: PNG strip and JSON");
    e->add_option("--model", ex.model_path, "Model checkpoint")->required();
    e->add_option("--cd", ex.cd, "CD checkpoint (graph method)");
    e->add_option("--d", ex.d, "Realism discriminator (graph method)");
    e->add_option("--data", ex.data, "Dataset directory")->required();
    e->add_option("--split", ex.split, "Split");
    e->add_option("--index", ex.index, "Query index");
    e->add_option("--contrast", ex.contrast, "Contrast datapoint index; exemplar selection when omitted");
    e->add_option("--target", ex.target, "Target class; second most likely when omitted");
    e->add_option("--t", ex.t, "Exemplar probability threshold");
    e->add_option("--method", ex.method, "sm, dim or graph");
    e->add_option("--out", ex.out, "Output prefix")->required();
    e->callback([&] { ex.run(); });

    Evaluate ev;
    auto* v = app.add_subcommand("evaluate", "Metrics report");
    v->add_option("--model", ev.model_path, "Model checkpoint")->required();
    v->add_option("--dataset", ev.dataset, "Dataset directory")->required();
    v->add_option("--metrics", ev.metrics, "Comma list of eac, mig, rep, variant");
    v->add_option("--pairs", ev.pairs, "eac pair file");
    v->add_option("--cd", ev.cd, "CD checkpoint");
    v->add_option("--d", ev.d, "Realism discriminator");
    v->add_option("--methods", ev.methods, "Comma list of explanation methods");
    v->add_option("--queries", ev.queries, "Queries in the variant experiment");
    v->add_option("--out", ev.out, "Report path")->required();
    v->callback([&] { ev.run(); });

    Grid gr;
    auto* gd = app.add_subcommand("grid", "Hyperparameter grid with selection by eac");
    gd->add_option("--config", gr.config, "Base experiment config");
    gd->add_option("--grid", gr.grid, "Grid spec (JSON); the standard grid when omitted");
    gd->add_option("--data", gr.data, "Synthetic dataset directory");
    gd->add_option("--validation", gr.validation, "Validation pair file");
    gd->add_option("--cd", gr.cd, "CD checkpoint");
    gd->add_option("--scale", gr.scale, "Multiplier on the step budget");
    gd->add_option("--out", gr.out, "Output directory")->required();
    gd->callback([&] { gr.run(); });

    Plot pl;
    auto* p = app.add_subcommand("plot", "Figures from a report");
    p->add_option("--report", pl.report, "Report JSON")->required();
    p->add_option("--out", pl.out, "Output directory")->required();
    p->callback([&] { pl.run(); });

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& err) {
        return app.exit(err);
    } catch (const std::exception& err) {
        std::cerr << "error: " << err.what() << "\n";
        return 1;
    }
    return 0;
}
