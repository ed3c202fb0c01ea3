#include "vce/harness.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <map>
#include <numeric>
#include <stdexcept>

#include "vce/core/random.hpp"

namespace vce::harness {

namespace {

Tensor<float> gather_images(const std::vector<synth::ChangePair>& pairs, std::span<const std::size_t> idx, bool first) {
    if (idx.empty()) return {};
    const auto& proto = first ? pairs[idx[0]].a : pairs[idx[0]].b;
    Shape shape{static_cast<int>(idx.size())};
    for (int d : proto.shape()) shape.push_back(d);
    std::vector<float> data;
    data.reserve(idx.size() * proto.size());
    for (std::size_t i : idx) {
        const auto& im = first ? pairs[i].a : pairs[i].b;
        data.insert(data.end(), im.vec().begin(), im.vec().end());
    }
    return Tensor<float>(std::move(shape), std::move(data));
}

void write_json(const std::filesystem::path& path, const nlohmann::json& j) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << j.dump(2) << "\n";
}

std::filesystem::path with_suffix(const std::filesystem::path& p, const std::string& suffix) {
    return std::filesystem::path(p.string() + suffix);
}

double hp_value(const model::HyperParams& hp, const std::string& name) {
    if (name == "beta_y") return hp.beta_y;
    if (name == "beta_x") return hp.beta_x;
    if (name == "alpha") return hp.alpha;
    if (name == "alpha_d") return hp.alpha_d;
    if (name == "alpha_r") return hp.alpha_r;
    if (name == "alpha_p") return hp.alpha_p;
    throw std::invalid_argument("unknown hyperparameter '" + name + "'");
}

void set_hp(model::HyperParams& hp, const std::string& name, double v) {
    hp_value(hp, name);
    if (name == "beta_y") hp.beta_y = v;
    if (name == "beta_x") hp.beta_x = v;
    if (name == "alpha") hp.alpha = v;
    if (name == "alpha_d") hp.alpha_d = v;
    if (name == "alpha_r") hp.alpha_r = v;
    if (name == "alpha_p") hp.alpha_p = v;
}

nlohmann::json adam_json(const optim::AdamConfig& a) {
    return {{"learning_rate", a.learning_rate}, {"beta1", a.beta1}, {"beta2", a.beta2}, {"epsilon", a.epsilon}};
}

optim::AdamConfig adam_from_json(const nlohmann::json& j) {
    optim::AdamConfig a;
    a.learning_rate = j.value("learning_rate", a.learning_rate);
    a.beta1 = j.value("beta1", a.beta1);
    a.beta2 = j.value("beta2", a.beta2);
    a.epsilon = j.value("epsilon", a.epsilon);
    return a;
}

}  // namespace

// ---- config -----------------------------------------------------------------------

std::int64_t ExperimentConfig::effective_steps() const {
    return std::max<std::int64_t>(1, std::llround(static_cast<double>(steps) * scale));
}

void ExperimentConfig::validate() const {
    if (dataset != "synthetic" && dataset != "mnist")
        throw std::invalid_argument("config: dataset must be synthetic or mnist, got '" + dataset + "'");
    if (batch < 2) throw std::invalid_argument("config: batch must be >= 2");
    if (pair_batch < 1 || pair_pool < 1) throw std::invalid_argument("config: pair sizes must be positive");
    if (steps < 1 || !(scale > 0)) throw std::invalid_argument("config: step budget must be positive");
    if (log_every < 1) throw std::invalid_argument("config: log_every must be positive");
    architecture_for(arch);
    hp.dvae().validate();
}

nlohmann::json to_json(const ExperimentConfig& c) {
    return {{"model", model::model_kind_name(c.kind)},
            {"dataset", c.dataset},
            {"data_dir", c.data_dir},
            {"cd_checkpoint", c.cd_checkpoint},
            {"arch", c.arch},
            {"hyper_params", model::to_json(c.hp)},
            {"adam", adam_json(c.adam)},
            {"batch", c.batch},
            {"pair_batch", c.pair_batch},
            {"pair_pool", c.pair_pool},
            {"steps", c.steps},
            {"scale", c.scale},
            {"seed", c.seed},
            {"log_every", c.log_every},
            {"checkpoint_every", c.checkpoint_every},
            {"realism_steps", c.realism_steps}};
}

ExperimentConfig experiment_config_from_json(const nlohmann::json& j) {
    ExperimentConfig c;
    c.kind = model::parse_model_kind(j.value("model", model::model_kind_name(c.kind)));
    // selected values of the model type unless overridden
    c.hp = model::HyperParams::selected(c.kind);
    if (j.contains("hyper_params")) {
        const auto base = model::to_json(c.hp);
        auto merged = base;
        merged.update(j.at("hyper_params"));
        c.hp = model::hyper_params_from_json(merged);
    }
    c.dataset = j.value("dataset", c.dataset);
    c.data_dir = j.value("data_dir", c.data_dir);
    c.cd_checkpoint = j.value("cd_checkpoint", c.cd_checkpoint);
    c.arch = j.value("arch", c.arch);
    if (j.contains("adam")) c.adam = adam_from_json(j.at("adam"));
    c.batch = j.value("batch", c.batch);
    c.pair_batch = j.value("pair_batch", c.pair_batch);
    c.pair_pool = j.value("pair_pool", c.pair_pool);
    c.steps = j.value("steps", c.steps);
    c.scale = j.value("scale", c.scale);
    c.seed = j.value("seed", c.seed);
    c.log_every = j.value("log_every", c.log_every);
    c.checkpoint_every = j.value("checkpoint_every", c.checkpoint_every);
    c.realism_steps = j.value("realism_steps", c.realism_steps);
    c.validate();
    return c;
}

std::uint64_t seed_from_env(std::uint64_t fallback) {
    const char* s = std::getenv("VCE_SEED");
    if (!s || !*s) return fallback;
    char* end = nullptr;
    const unsigned long long v = std::strtoull(s, &end, 10);
    if (*end != '\0') throw std::invalid_argument(std::string("VCE_SEED is not an integer: '") + s + "'");
    return v;
}

ExperimentConfig load_experiment_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot read config " + path.string());
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw std::runtime_error("config " + path.string() + ": " + e.what());
    }
    ExperimentConfig c = experiment_config_from_json(j);
    c.seed = seed_from_env(c.seed);
    return c;
}

model::Architecture architecture_for(const std::string& name, int n_y, int n_x) {
    if (name == "standard") return model::Architecture::standard(n_y, n_x);
    if (name == "tiny") return model::Architecture::tiny(32, n_y, 2);
    if (name == "cd") return model::Architecture::change_discriminator();
    throw std::invalid_argument("unknown architecture '" + name + "' (expected standard, tiny or cd)");
}

// ---- data ------------------------------------------------------------------------

TrainingData synthetic_training_data(const synth::SynthConfig& config, const synth::Split& train,
                                     model::ModelKind kind, int pair_pool, std::uint64_t seed) {
    TrainingData d;
    d.images = train.images;
    d.labels = train.labels();
    d.dim_labels = metrics::concept_factors(train.records);
    if (kind == model::ModelKind::gvae)
        d.pairs = synth::generate_group_pairs(config, pair_pool, derive_seed(seed, 51));
    else if (kind == model::ModelKind::ada_gvae)
        d.pairs = synth::generate_positive_pairs(config, pair_pool, derive_seed(seed, 52));
    return d;
}

synth::SynthConfig dataset_config(const std::filesystem::path& data_dir) {
    const auto p = data_dir / "config.json";
    return std::filesystem::exists(p) ? synth::load_config(p) : synth::SynthConfig::defaults();
}

TrainingData load_training_data(const ExperimentConfig& c, synth::SynthConfig* synth_config) {
    if (c.data_dir.empty()) throw std::invalid_argument("config: data_dir is empty");
    if (c.dataset == "mnist") {
        if (c.kind == model::ModelKind::lvae || c.kind == model::ModelKind::gvae ||
            c.kind == model::ModelKind::ada_gvae)
            throw std::invalid_argument(model::model_kind_name(c.kind) + " needs concept supervision; mnist has none");
        const auto set = mnist::load_mnist(c.data_dir, "train");
        TrainingData d;
        d.images = set.images;
        d.labels = set.labels;
        return d;
    }
    const auto config = dataset_config(c.data_dir);
    if (synth_config) *synth_config = config;
    // pair files written by gen-data take precedence over an in-memory pool
    const std::string name = c.kind == model::ModelKind::gvae ? "group" : "positive";
    const bool paired = c.kind == model::ModelKind::gvae || c.kind == model::ModelKind::ada_gvae;
    const auto split = synth::read_split(c.data_dir, "train");
    if (paired && std::filesystem::exists(std::filesystem::path(c.data_dir) / (name + ".json"))) {
        auto d = synthetic_training_data(config, split, model::ModelKind::dvae, 0, c.seed);
        d.pairs = synth::read_pairs(c.data_dir, name);
        return d;
    }
    return synthetic_training_data(config, split, c.kind, c.pair_pool, c.seed);
}

BatchSampler::BatchSampler(const TrainingData& data, int batch, int pair_batch, std::uint64_t seed)
    : data_(data), batch_(batch), pair_batch_(pair_batch), rng_(derive_seed(seed, 53)) {
    if (data.labels.empty()) throw std::invalid_argument("batch sampler: no training data");
}

std::vector<std::size_t> BatchSampler::draw(std::vector<std::size_t>& order, std::size_t& cursor, std::size_t n,
                                            int count) {
    std::vector<std::size_t> out;
    while (static_cast<int>(out.size()) < count) {
        if (cursor >= order.size()) {
            order.resize(n);
            std::iota(order.begin(), order.end(), std::size_t{0});
            std::shuffle(order.begin(), order.end(), rng_);
            cursor = 0;
        }
        out.push_back(order[cursor++]);
    }
    return out;
}

model::TrainBatch BatchSampler::next(model::ModelKind kind) {
    model::TrainBatch b;
    const std::size_t n = data_.labels.size();
    const auto idx = draw(order_, cursor_, n, std::min<int>(batch_, static_cast<int>(n)));
    b.images = gather_rows(data_.images, std::span<const std::size_t>(idx));
    for (std::size_t i : idx) b.labels.push_back(data_.labels[i]);
    if (kind == model::ModelKind::lvae) {
        if (data_.dim_labels.empty()) throw std::invalid_argument("lvae: training data has no dimension labels");
        const std::size_t w = data_.dim_labels.size() / n;
        for (std::size_t i : idx)
            b.dim_labels.insert(b.dim_labels.end(), data_.dim_labels.begin() + i * w,
                                data_.dim_labels.begin() + (i + 1) * w);
    }
    if (kind == model::ModelKind::gvae || kind == model::ModelKind::ada_gvae) {
        if (data_.pairs.empty()) throw std::invalid_argument("pair training data is empty");
        const auto p = draw(pair_order_, pair_cursor_, data_.pairs.size(), pair_batch_);
        b.pair_a = gather_images(data_.pairs, p, true);
        b.pair_b = gather_images(data_.pairs, p, false);
        for (std::size_t i : p) b.shared_dim.push_back(data_.pairs[i].shared_dim);
    }
    return b;
}

// ---- training ----------------------------------------------------------------------

nlohmann::json curve_json(const std::vector<CurvePoint>& curve) {
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& p : curve)
        arr.push_back({{"step", p.step}, {"total", p.total}, {"rec", p.rec}, {"kl_y", p.kl_y}, {"kl_x", p.kl_x},
                       {"extra", p.extra}});
    return arr;
}

model::Discriminator<float> train_realism_discriminator(model::DVAE<float>& m, const Tensor<float>& images,
                                                        int steps, int batch, std::uint64_t seed) {
    const bool standard = m.arch().image_shape == Shape{1, 32, 32};
    model::Discriminator<float> d(standard ? model::realism_spec() : model::tiny_realism_spec(), m.arch().image_shape,
                                  derive_seed(seed, 54));
    optim::Adam<float> adam(d.parameters(), {});
    Rng rng(derive_seed(seed, 55));
    const int n = images.dim(0);
    std::uniform_int_distribution<int> pick(0, n - 1);
    for (int s = 0; s < steps; ++s) {
        std::vector<std::size_t> idx(static_cast<std::size_t>(std::min(batch, n)));
        for (auto& i : idx) i = static_cast<std::size_t>(pick(rng));
        const auto real = gather_rows(images, std::span<const std::size_t>(idx));
        const auto e = model::encode_dataset(m, real);
        const auto perm = model::derangement(idx.size(), rng);
        std::vector<std::size_t> other(perm.begin(), perm.end());
        Tensor<float> fake;
        {
            ag::NoGradGuard guard;
            const auto pair = model::build_mixed_pair(ag::Var<float>::constant(e.mu_y),
                                                      ag::Var<float>::constant(gather_rows(e.mu_y, std::span<const std::size_t>(other))),
                                                      rng);
            fake = model::decode_latents(m, pair.z_pa.value(), e.mu_x);
        }
        model::d_train_step(d, adam, real, fake, rng);
    }
    return d;
}

TrainResult train_model(const ExperimentConfig& c, const TrainingData& data, model::CDModel<float>* cd,
                        const std::filesystem::path& out, const StepHook& hook) {
    c.validate();
    TrainResult r;
    const auto arch = architecture_for(c.arch);
    r.trainer = std::make_unique<model::ModelTrainer>(c.kind, arch, c.hp, c.adam, c.seed, cd, c.pair_batch);
    BatchSampler sampler(data, c.batch, c.pair_batch, c.seed);
    const std::int64_t total = c.effective_steps();
    model::CheckpointMeta meta;
    meta.seed = c.seed;
    meta.extra["config"] = to_json(c);
    auto save = [&] {
        if (out.empty()) return;
        if (out.has_parent_path()) std::filesystem::create_directories(out.parent_path());
        r.trainer->save(out, meta);
    };
    for (std::int64_t s = 1; s <= total; ++s) {
        model::StepReport rep;
        try {
            rep = r.trainer->step(sampler.next(c.kind));
        } catch (const model::TrainingError&) {
            if (!out.empty()) write_json(with_suffix(out, ".curve.json"), curve_json(r.curve));
            throw;
        }
        if (s == 1 || s % c.log_every == 0 || s == total)
            r.curve.push_back({s, rep.total, rep.dvae.rec, rep.dvae.kl_y, rep.dvae.kl_x, rep.extra});
        if (hook) hook(s, rep, *r.trainer);
        if (c.checkpoint_every > 0 && s % c.checkpoint_every == 0 && s != total) save();
    }
    r.steps = total;
    if (c.kind != model::ModelKind::vae_ce && c.realism_steps > 0)
        r.realism = train_realism_discriminator(r.trainer->model(), data.images, c.realism_steps,
                                                std::min(c.batch, 64), c.seed);
    save();
    if (!out.empty()) {
        write_json(with_suffix(out, ".curve.json"), curve_json(r.curve));
        if (r.realism) model::save_discriminator(with_suffix(out, ".d"), *r.realism);
    }
    return r;
}

nlohmann::json to_json(const CDConfig& c) {
    return {{"arch", c.arch},          {"cd_params", model::to_json(c.params)}, {"adam", adam_json(c.adam)},
            {"batch", c.batch},        {"pair_batch", c.pair_batch},           {"steps", c.steps},
            {"seed", c.seed},          {"log_every", c.log_every}};
}

CDConfig cd_config_from_json(const nlohmann::json& j) {
    CDConfig c;
    c.arch = j.value("arch", c.arch);
    if (j.contains("cd_params")) c.params = model::cd_params_from_json(j.at("cd_params"));
    if (j.contains("adam")) c.adam = adam_from_json(j.at("adam"));
    c.batch = j.value("batch", c.batch);
    c.pair_batch = j.value("pair_batch", c.pair_batch);
    c.steps = j.value("steps", c.steps);
    c.seed = j.value("seed", c.seed);
    c.log_every = j.value("log_every", c.log_every);
    return c;
}

CDResult train_cd(const CDConfig& c, const TrainingData& data, const std::filesystem::path& out,
                  const std::function<void(std::int64_t, const model::CDStepReport&)>& hook) {
    if (data.pairs.empty()) throw std::invalid_argument("cd training: no change pairs");
    const auto arch = c.arch == "cd" ? model::Architecture::change_discriminator() : architecture_for(c.arch);
    CDResult r{model::CDModel<float>(arch, model::change_head_spec(), derive_seed(c.seed, 56)), {}};
    model::CDTrainer trainer(r.model, c.params, c.adam, c.seed);
    BatchSampler sampler(data, c.batch, c.pair_batch, c.seed);
    Rng rng(derive_seed(c.seed, 57));
    std::vector<std::size_t> order(data.pairs.size());
    std::size_t cursor = order.size();
    for (std::int64_t s = 1; s <= c.steps; ++s) {
        const auto b = sampler.next(model::ModelKind::dvae);
        std::vector<std::size_t> p;
        while (static_cast<int>(p.size()) < c.pair_batch) {
            if (cursor >= order.size()) {
                std::iota(order.begin(), order.end(), std::size_t{0});
                std::shuffle(order.begin(), order.end(), rng);
                cursor = 0;
            }
            p.push_back(order[cursor++]);
        }
        std::vector<int> labels;
        for (std::size_t i : p) labels.push_back(data.pairs[i].label);
        const auto rep = trainer.step(b.images, b.labels, gather_images(data.pairs, p, true),
                                      gather_images(data.pairs, p, false), labels);
        if (s == 1 || s % c.log_every == 0 || s == c.steps)
            r.curve.push_back({{"step", s},
                               {"primary", rep.primary.to_json()},
                               {"change_ce", rep.change_ce},
                               {"change_accuracy", rep.change_accuracy}});
        if (hook) hook(s, rep);
    }
    if (!out.empty()) {
        if (out.has_parent_path()) std::filesystem::create_directories(out.parent_path());
        model::CheckpointMeta meta;
        meta.seed = c.seed;
        meta.step = c.steps;
        meta.extra["config"] = to_json(c);
        model::save_cd(out, r.model, c.params, meta, &trainer.optimizer());
        write_json(with_suffix(out, ".curve.json"), r.curve);
    }
    return r;
}

// ---- bundles ------------------------------------------------------------------------

explain::ModelBundle LoadedBundle::bundle() {
    return {&trained.model, cd ? &*cd : nullptr, d ? &*d : nullptr};
}

LoadedBundle load_bundle(const std::filesystem::path& model_path, const std::filesystem::path& cd_path,
                         const std::filesystem::path& d_path) {
    LoadedBundle b{model::load_model(model_path), std::nullopt, std::nullopt};
    if (!cd_path.empty()) b.cd = model::load_cd(cd_path);
    if (!d_path.empty())
        b.d = model::load_discriminator(d_path);
    else if (b.trained.d)
        b.d = std::move(b.trained.d);
    else if (std::filesystem::exists(with_suffix(model_path, ".d")))
        b.d = model::load_discriminator(with_suffix(model_path, ".d"));
    return b;
}

// ---- grid ------------------------------------------------------------------------

GridSpec GridSpec::standard() {
    using model::ModelKind;
    GridSpec g;
    g.models = {
        {ModelKind::dvae, {{"beta_y", {2, 4}}, {"alpha", {5, 10, 15}}}},
        {ModelKind::lvae, {{"beta_y", {1, 2}}, {"alpha", {5, 7}}, {"alpha_d", {20, 25, 30}}}},
        {ModelKind::gvae, {{"beta_y", {1, 2, 4}}, {"alpha", {2, 4, 6}}}},
        {ModelKind::ada_gvae, {{"beta_y", {1, 2, 4}}, {"alpha", {1, 2, 4}}}},
        {ModelKind::vae_ce, {{"beta_y", {2, 4}}, {"alpha", {5, 7}}, {"alpha_p", {3, 5}}}},
    };
    g.runs = 4;
    return g;
}

std::vector<GridSpec::Configuration> GridSpec::configurations() const {
    std::vector<Configuration> out;
    for (const auto& m : models) {
        std::vector<model::HyperParams> acc{model::HyperParams{}};
        for (const auto& axis : m.axes) {
            if (axis.values.empty()) throw std::invalid_argument("grid: axis " + axis.name + " has no values");
            std::vector<model::HyperParams> next;
            for (const auto& hp : acc)
                for (double v : axis.values) {
                    auto h = hp;
                    set_hp(h, axis.name, v);
                    next.push_back(h);
                }
            acc = std::move(next);
        }
        for (const auto& hp : acc) out.push_back({m.kind, hp});
    }
    return out;
}

nlohmann::json to_json(const GridSpec& g) {
    nlohmann::json models = nlohmann::json::array();
    for (const auto& m : g.models) {
        nlohmann::json axes = nlohmann::json::object();
        for (const auto& a : m.axes) axes[a.name] = a.values;
        models.push_back({{"model", model::model_kind_name(m.kind)}, {"values", axes}});
    }
    return {{"runs", g.runs}, {"models", models}};
}

GridSpec grid_spec_from_json(const nlohmann::json& j) {
    GridSpec g;
    g.runs = j.value("runs", 4);
    if (g.runs < 1) throw std::invalid_argument("grid: runs must be positive");
    for (const auto& m : j.at("models")) {
        GridSpec::ModelGrid mg{model::parse_model_kind(m.at("model").get<std::string>()), {}};
        for (const auto& [name, values] : m.at("values").items()) {
            hp_value({}, name);
            mg.axes.push_back({name, values.get<std::vector<double>>()});
        }
        g.models.push_back(std::move(mg));
    }
    return g;
}

std::vector<GridSelection> select_configurations(const std::vector<GridEntry>& entries) {
    std::map<int, std::pair<double, int>> sums;  // config index -> (sum, count)
    std::map<int, const GridEntry*> first;
    for (const auto& e : entries) {
        first.emplace(e.config_index, &e);
        if (!e.ok) continue;
        auto& s = sums[e.config_index];
        s.first += e.score;
        ++s.second;
    }
    std::map<model::ModelKind, GridSelection> best;
    for (const auto& [idx, s] : sums) {
        const GridEntry& e = *first.at(idx);
        const double mean = s.first / s.second;
        auto it = best.find(e.kind);
        if (it == best.end() || mean < it->second.mean_score ||
            (mean == it->second.mean_score && idx < it->second.config_index))
            best[e.kind] = {e.kind, idx, e.hp, mean, s.second};
    }
    std::vector<GridSelection> out;
    for (const auto& [k, s] : best) out.push_back(s);
    return out;
}

nlohmann::json GridReport::to_json() const {
    nlohmann::json e = nlohmann::json::array(), s = nlohmann::json::array();
    for (const auto& x : entries)
        e.push_back({{"model", model::model_kind_name(x.kind)},
                     {"hyper_params", model::to_json(x.hp)},
                     {"config", x.config_index},
                     {"run", x.run},
                     {"ok", x.ok},
                     {"score", x.score},
                     {"error", x.error}});
    for (const auto& x : selected)
        s.push_back({{"model", model::model_kind_name(x.kind)},
                     {"config", x.config_index},
                     {"hyper_params", model::to_json(x.hp)},
                     {"mean_score", x.mean_score},
                     {"completed_runs", x.completed_runs}});
    return {{"version", metrics::kReportSchemaVersion}, {"entries", e}, {"selected", s}};
}

GridReport run_grid(const GridSpec& grid, const ExperimentConfig& base, const TrainingData& data,
                    const synth::SynthConfig& synth_config, const std::vector<metrics::EacPair>& validation,
                    model::CDModel<float>* cd, const std::filesystem::path& out_dir) {
    GridReport report;
    std::filesystem::create_directories(out_dir);
    const auto configs = grid.configurations();
    for (std::size_t ci = 0; ci < configs.size(); ++ci)
        for (int run = 0; run < grid.runs; ++run) {
            GridEntry e{configs[ci].kind, configs[ci].hp, static_cast<int>(ci), run, false, 0, {}};
            try {
                ExperimentConfig c = base;
                c.kind = e.kind;
                c.hp = e.hp;
                c.seed = derive_seed(base.seed, 60 + ci, static_cast<std::uint64_t>(run));
                const TrainingData* d = &data;
                TrainingData own;
                if ((c.kind == model::ModelKind::gvae || c.kind == model::ModelKind::ada_gvae) && data.pairs.empty()) {
                    own = data;
                    own.pairs = c.kind == model::ModelKind::gvae
                                    ? synth::generate_group_pairs(synth_config, c.pair_pool, derive_seed(c.seed, 51))
                                    : synth::generate_positive_pairs(synth_config, c.pair_pool, derive_seed(c.seed, 52));
                    d = &own;
                }
                const auto name = "config" + std::to_string(ci) + "_run" + std::to_string(run) + ".ckpt";
                auto r = train_model(c, *d, cd, out_dir / name);
                model::Discriminator<float>* dd = r.realism ? &*r.realism : r.trainer->discriminator();
                const explain::ModelBundle bundle{&r.trainer->model(), cd, dd};
                std::vector<explain::Method> methods{explain::Method::sm, explain::Method::dim};
                if (cd && dd) methods.push_back(explain::Method::graph);
                e.score = metrics::eac_report(bundle, synth_config, validation, methods).selection_score;
                e.ok = true;
            } catch (const std::exception& ex) {
                e.error = ex.what();
            }
            report.entries.push_back(e);
            write_json(out_dir / "grid_report.json", report.to_json());
        }
    report.selected = select_configurations(report.entries);
    write_json(out_dir / "grid_report.json", report.to_json());
    emit_figures({}, report.to_json(), out_dir);
    return report;
}

// ---- figures ---------------------------------------------------------------------------

void write_png(const std::filesystem::path& path, const Tensor<float>& gray) {
    if (gray.rank() != 2) throw std::invalid_argument("write_png: expects [H, W]");
    png_image img{};
    img.version = PNG_IMAGE_VERSION;
    img.width = static_cast<png_uint_32>(gray.dim(1));
    img.height = static_cast<png_uint_32>(gray.dim(0));
    img.format = PNG_FORMAT_GRAY;
    std::vector<png_byte> px(gray.size());
    for (std::size_t i = 0; i < px.size(); ++i)
        px[i] = static_cast<png_byte>(std::lround(std::clamp(gray[i], 0.0f, 1.0f) * 255.0f));
    if (!png_image_write_to_file(&img, path.string().c_str(), 0, px.data(), 0, nullptr))
        throw std::runtime_error("cannot write png " + path.string() + ": " + img.message);
}

Tensor<float> read_png(const std::filesystem::path& path) {
    png_image img{};
    img.version = PNG_IMAGE_VERSION;
    if (!png_image_begin_read_from_file(&img, path.string().c_str()))
        throw std::runtime_error("cannot read png " + path.string() + ": " + img.message);
    img.format = PNG_FORMAT_GRAY;
    std::vector<png_byte> px(PNG_IMAGE_SIZE(img));
    if (!png_image_finish_read(&img, nullptr, px.data(), 0, nullptr))
        throw std::runtime_error("cannot read png " + path.string() + ": " + img.message);
    Tensor<float> out({static_cast<int>(img.height), static_cast<int>(img.width)});
    for (std::size_t i = 0; i < px.size(); ++i) out[i] = px[i] / 255.0f;
    return out;
}

Tensor<float> explanation_strip(const synth::Image& query, const std::vector<synth::Image>& states) {
    const int h = query.dim(query.rank() - 2), w = query.dim(query.rank() - 1);
    const int tiles = 1 + static_cast<int>(states.size());
    Tensor<float> out({h, tiles * w});
    auto put = [&](const synth::Image& im, int tile) {
        for (int r = 0; r < h; ++r)
            for (int c = 0; c < w; ++c) out[static_cast<std::size_t>(r) * tiles * w + tile * w + c] = im[r * w + c];
    };
    put(query, 0);
    for (int r = 0; r < h; ++r)
        for (int c = 0; c < w; ++c)
            if (r == 0 || c == 0 || r == h - 1 || c == w - 1) out[static_cast<std::size_t>(r) * tiles * w + c] = 0.5f;
    for (std::size_t i = 0; i < states.size(); ++i) put(states[i], static_cast<int>(i) + 1);
    return out;
}

Tensor<float> bar_chart(const std::vector<double>& values) {
    const int n = static_cast<int>(values.size());
    const int width = std::max(1, n * (kBarWidth + kBarGap) + kBarGap);
    Tensor<float> out({kBarHeight + 2, width});
    double mx = 0;
    for (double v : values) mx = std::max(mx, v);
    for (int b = 0; b < n; ++b) {
        const int height = mx > 0 ? static_cast<int>(std::lround(std::max(values[b], 0.0) / mx * kBarHeight)) : 0;
        const int x0 = kBarGap + b * (kBarWidth + kBarGap);
        for (int r = 0; r < height; ++r)
            for (int c = 0; c < kBarWidth; ++c) out[static_cast<std::size_t>(kBarHeight + 1 - r) * width + x0 + c] = 1.0f;
    }
    return out;
}

std::vector<int> bar_heights(const Tensor<float>& chart, std::size_t bars) {
    const int width = chart.dim(1), rows = chart.dim(0);
    std::vector<int> out;
    for (std::size_t b = 0; b < bars; ++b) {
        const int x = kBarGap + static_cast<int>(b) * (kBarWidth + kBarGap) + kBarWidth / 2;
        int h = 0;
        for (int r = rows - 1; r >= 0 && chart[static_cast<std::size_t>(r) * width + x] > 0.5f; --r) ++h;
        out.push_back(h);
    }
    return out;
}

Tensor<float> scatter_plot(const std::vector<std::vector<double>>& groups) {
    const int n = static_cast<int>(groups.size());
    const int width = std::max(1, n * (kBarWidth + kBarGap) + kBarGap);
    Tensor<float> out({kBarHeight + 2, width});
    double lo = INFINITY, hi = -INFINITY;
    for (const auto& g : groups)
        for (double v : g) {
            lo = std::min(lo, v);
            hi = std::max(hi, v);
        }
    for (int b = 0; b < n; ++b)
        for (std::size_t k = 0; k < groups[b].size(); ++k) {
            const double f = hi > lo ? (groups[b][k] - lo) / (hi - lo) : 0.5;
            const int r = kBarHeight - static_cast<int>(std::lround(f * kBarHeight));
            const int c = kBarGap + b * (kBarWidth + kBarGap) + static_cast<int>(k % kBarWidth);
            out[static_cast<std::size_t>(r + 1) * width + c] = 1.0f;
        }
    return out;
}

std::vector<std::filesystem::path> emit_figures(const std::vector<FigureExplanation>& explanations,
                                                const nlohmann::json& report, const std::filesystem::path& out_dir) {
    std::vector<std::filesystem::path> files;
    const bool has_report = report.is_object() && (report.contains("methods") || report.contains("entries") ||
                                                   report.contains("mig"));
    if (explanations.empty() && !has_report) return files;
    std::filesystem::create_directories(out_dir);
    for (const auto& e : explanations) {
        const auto p = out_dir / (e.name + ".png");
        write_png(p, explanation_strip(e.query, e.explanation.states));
        files.push_back(p);
    }
    if (!has_report) return files;
    if (report.contains("methods")) {
        std::vector<double> v;
        for (const auto& [name, m] : report.at("methods").items()) v.push_back(m.at("mean").get<double>());
        const auto p = out_dir / "eac_means.png";
        write_png(p, bar_chart(v));
        files.push_back(p);
    }
    if (report.contains("mig")) {
        std::vector<double> v;
        for (const char* k : {"mig", "acc", "l_acc_y", "l_acc_x"}) v.push_back(report.at(k).get<double>());
        const auto p = out_dir / "representation.png";
        write_png(p, bar_chart(v));
        files.push_back(p);
    }
    if (report.contains("entries")) {
        std::map<int, std::vector<double>> by_config;
        for (const auto& e : report.at("entries"))
            if (e.at("ok").get<bool>()) by_config[e.at("config").get<int>()].push_back(e.at("score").get<double>());
        std::vector<std::vector<double>> groups;
        for (auto& [k, v] : by_config) groups.push_back(v);
        if (!groups.empty()) {
            const auto p = out_dir / "grid_runs.png";
            write_png(p, scatter_plot(groups));
            files.push_back(p);
        }
    }
    return files;
}

}  // namespace vce::harness
