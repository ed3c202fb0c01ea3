#include "vce/model/trainers.hpp"

#include <numeric>

namespace vce::model {

namespace {

const std::pair<ModelKind, const char*> kKindNames[] = {{ModelKind::dvae, "dvae"},
                                                        {ModelKind::lvae, "lvae"},
                                                        {ModelKind::gvae, "gvae"},
                                                        {ModelKind::ada_gvae, "ada-gvae"},
                                                        {ModelKind::vae_ce, "vae-ce"}};

std::vector<ag::Var<float>> main_optimizer_params(const DVAE<float>& m, const std::optional<LVAEHeads<float>>& l) {
    auto p = m.parameters();
    if (l)
        for (const auto& v : l->parameters()) p.push_back(v);
    return p;
}

LossBreakdown as_breakdown(double total) {
    LossBreakdown b;
    b.total = total;
    return b;
}

}  // namespace

std::string model_kind_name(ModelKind kind) {
    for (const auto& [k, n] : kKindNames)
        if (k == kind) return n;
    throw std::invalid_argument("unknown model kind");
}

ModelKind parse_model_kind(const std::string& name) {
    for (const auto& [k, n] : kKindNames)
        if (name == n) return k;
    throw std::invalid_argument("unknown model '" + name + "' (expected dvae, lvae, gvae, ada-gvae or vae-ce)");
}

HyperParams HyperParams::selected(ModelKind kind) {
    HyperParams p;
    switch (kind) {
        case ModelKind::dvae: p.beta_y = 2; p.alpha = 10; break;
        case ModelKind::lvae: p.beta_y = 1; p.alpha = 7; p.alpha_d = 20; break;
        case ModelKind::gvae: p.beta_y = 1; p.alpha = 6; break;
        case ModelKind::ada_gvae: p.beta_y = 1; p.alpha = 4; break;
        case ModelKind::vae_ce: p.beta_y = 2; p.alpha = 7; p.alpha_p = 3; break;
    }
    return p;
}

nlohmann::json to_json(const HyperParams& p) {
    return {{"beta_y", p.beta_y},   {"beta_x", p.beta_x},   {"alpha", p.alpha},
            {"alpha_d", p.alpha_d}, {"alpha_r", p.alpha_r}, {"alpha_p", p.alpha_p}};
}

HyperParams hyper_params_from_json(const nlohmann::json& j) {
    HyperParams p;
    p.beta_y = j.value("beta_y", p.beta_y);
    p.beta_x = j.value("beta_x", p.beta_x);
    p.alpha = j.value("alpha", p.alpha);
    p.alpha_d = j.value("alpha_d", p.alpha_d);
    p.alpha_r = j.value("alpha_r", p.alpha_r);
    p.alpha_p = j.value("alpha_p", p.alpha_p);
    return p;
}

ModelTrainer::ModelTrainer(ModelKind kind, Architecture arch, HyperParams hp, optim::AdamConfig adam,
                           std::uint64_t seed, CDModel<float>* cd, int conditioning_pairs)
    : kind_(kind), hp_(hp), model_(arch, seed), cd_(cd), conditioning_pairs_(conditioning_pairs), rng_(seed ^ 0x9e37ULL) {
    hp_.dvae().validate();
    if (kind_ == ModelKind::lvae) lvae_.emplace(arch.n_y, seed + 1);
    if (kind_ == ModelKind::vae_ce) {
        if (!cd_) throw std::invalid_argument("vae-ce: a trained change discriminator is required");
        if (cd_->backbone.arch().image_shape != arch.image_shape)
            throw std::invalid_argument("vae-ce: change discriminator image shape differs from the model's");
        if (conditioning_pairs_ < 1) throw std::invalid_argument("vae-ce: conditioning pair count must be positive");
        const bool standard = arch.image_shape == Shape{1, 32, 32};
        d_.emplace(standard ? realism_spec() : tiny_realism_spec(), arch.image_shape, seed + 2);
        d_adam_ = optim::Adam<float>(d_->parameters(), adam);
        cd_->set_trainable(false);
    }
    adam_ = optim::Adam<float>(main_optimizer_params(model_, lvae_), adam);
}

StepReport ModelTrainer::step(const TrainBatch& batch) {
    if (kind_ == ModelKind::vae_ce) return step_vae_ce(batch);
    const nn::RunContext ctx{nn::Mode::train, &rng_, true};
    const auto x = ag::Var<float>::constant(batch.images);
    const DVAEParams params = hp_.dvae();
    DVAEPass<float> pass = dvae_forward(model_, x, batch.labels, params, ctx, rng_);
    StepReport r;
    r.dvae = pass.values;
    r.total = pass.values.total;
    ag::Var<float> objective = pass.objective;

    if (kind_ == ModelKind::lvae) {
        auto t = lvae_terms(*lvae_, pass.z_y, batch.dim_labels, hp_.lvae(model_.arch().n_y), ctx);
        objective = ag::add(objective, t.objective);
        r.extra["dim_ce"] = t.dim_ce.item();
        r.extra["comp_ce"] = t.comp_ce.item();
        r.total += t.reported;
    } else if (kind_ == ModelKind::gvae || kind_ == ModelKind::ada_gvae) {
        const auto mode = kind_ == ModelKind::gvae ? PairAveraging::gvae : PairAveraging::ada_gvae;
        auto pp = pair_elbo_forward(model_, ag::Var<float>::constant(batch.pair_a), ag::Var<float>::constant(batch.pair_b),
                                    mode, batch.shared_dim, params, ctx, rng_);
        const double ratio = pass_ratio(2 * batch.pair_a.dim(0), batch.images.dim(0));
        objective = ag::add(objective, ag::scale(pp.objective, static_cast<float>(ratio)));
        r.extra["pair_kl_y"] = pp.kl_y.item();
        r.extra["pair_kl_x"] = pp.kl_x.item();
        r.extra["pair_rec"] = pp.rec.item();
        r.total += ratio * pp.objective.item();
    }
    if (!std::isfinite(r.total)) throw TrainingError(model_kind_name(kind_) + ": non-finite loss", r.dvae);
    objective.backward();
    adam_.step();
    check_finite(as_breakdown(r.total), adam_.params());
    ++steps_;
    return r;
}

StepReport ModelTrainer::step_vae_ce(const TrainBatch& batch) {
    const nn::RunContext ctx{nn::Mode::train, &rng_, true};
    const int n = batch.images.dim(0);
    if (n < 2) throw std::invalid_argument("vae-ce: batch needs at least two datapoints for pairs");
    DVAEPass<float> pass = dvae_forward(model_, ag::Var<float>::constant(batch.images), batch.labels, hp_.dvae(), ctx, rng_);

    // pairs (a, b) from a derangement of the batch; z_x from b only
    const auto perm = derangement(static_cast<std::size_t>(n), rng_);
    const int p = std::min(conditioning_pairs_, n);
    std::vector<std::size_t> ia(static_cast<std::size_t>(p)), ib(static_cast<std::size_t>(p));
    std::iota(ia.begin(), ia.end(), std::size_t{0});
    for (int i = 0; i < p; ++i) ib[i] = perm[static_cast<std::size_t>(i)];
    const auto z_ya = ag::gather_rows(pass.z_y, std::span<const std::size_t>(ia));
    const auto z_yb = ag::gather_rows(pass.z_y, std::span<const std::size_t>(ib));
    const auto z_x = ag::gather_rows(pass.z_x, std::span<const std::size_t>(ib));
    const auto pair = build_mixed_pair(z_ya, z_yb, rng_);
    const nn::RunContext synth_ctx{nn::Mode::train, &rng_, false};
    const auto x_p = model_.decode(ag::concat_rows(pair.z_pa, pair.z_pb), ag::concat_rows(z_x, z_x), synth_ctx);
    std::vector<std::size_t> first(static_cast<std::size_t>(p)), second(static_cast<std::size_t>(p));
    std::iota(first.begin(), first.end(), std::size_t{0});
    std::iota(second.begin(), second.end(), static_cast<std::size_t>(p));
    const auto x_pa = ag::gather_rows(x_p, std::span<const std::size_t>(first));
    const auto x_pb = ag::gather_rows(x_p, std::span<const std::size_t>(second));

    d_->set_trainable(false);
    const auto cond = conditioning_loss(x_pa, x_pb, pair, z_ya, z_yb, *d_, *cd_, hp_.cond(), rng_);
    d_->set_trainable(true);
    const double ratio = pass_ratio(2 * p, n);
    const auto objective = ag::add(pass.objective, ag::scale(cond.total, static_cast<float>(ratio)));

    StepReport r;
    r.dvae = pass.values;
    r.extra["realism"] = cond.realism.item();
    r.extra["change"] = cond.change.item();
    r.total = pass.values.total + ratio * cond.total.item();
    if (!std::isfinite(r.total)) throw TrainingError("vae-ce: non-finite loss", r.dvae);
    objective.backward();
    adam_.step();
    check_finite(as_breakdown(r.total), adam_.params());

    const auto d = d_train_step(*d_, d_adam_, batch.images, x_p.value(), rng_);
    r.extra["d_loss"] = d.loss;
    r.extra["d_accuracy"] = d.accuracy;
    ++steps_;
    return r;
}

void ModelTrainer::save(const std::filesystem::path& path, const CheckpointMeta& meta) {
    CheckpointMeta m = meta;
    m.kind = model_kind_name(kind_);
    m.step = steps_;
    m.extra["hyper_params"] = to_json(hp_);
    std::vector<nn::NamedTensor<float>> extra;
    if (lvae_)
        for (const auto& t : lvae_->state()) extra.push_back(t);
    if (d_) {
        m.extra["d_spec"] = nn::spec_to_json(d_->net.spec());
        for (const auto& t : d_->state()) extra.push_back(t);
    }
    save_dvae(path, model_, hp_.dvae(), m, &adam_, extra);
}

TrainedModel load_model(const std::filesystem::path& path) {
    LoadedDVAE loaded = load_dvae(path);
    TrainedModel out;
    out.kind = parse_model_kind(loaded.meta.kind);
    out.hp = hyper_params_from_json(loaded.meta.extra.value("hyper_params", nlohmann::json::object()));
    out.meta = loaded.meta;
    if (loaded.meta.extra.contains("d_spec")) {
        out.d.emplace(nn::spec_from_json(loaded.meta.extra.at("d_spec")), loaded.model.arch().image_shape, 0);
        restore_state(loaded.archive, out.d->state());
    }
    out.model = std::move(loaded.model);
    return out;
}

}  // namespace vce::model
