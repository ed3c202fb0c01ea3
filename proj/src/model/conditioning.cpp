#include "vce/model/conditioning.hpp"

#include <cmath>
#include <numeric>

namespace vce::model {

using nn::LayerSpec;

double pass_ratio(int pass_datapoints, int primary_datapoints) {
    if (primary_datapoints <= 0) throw std::invalid_argument("pass ratio: primary pass is empty");
    return static_cast<double>(pass_datapoints) / primary_datapoints;
}

nn::NetworkSpec change_head_spec() {
    return {LayerSpec::fc(50), LayerSpec::lrelu(), LayerSpec::bn(), LayerSpec::drop(0.3), LayerSpec::fc(2),
            LayerSpec::softmax_out()};
}

nn::NetworkSpec realism_spec() {
    return {LayerSpec::conv(4, 2, 32),  LayerSpec::lrelu(), LayerSpec::bn(), LayerSpec::drop(0.3),
            LayerSpec::conv(4, 1, 64),  LayerSpec::lrelu(), LayerSpec::bn(), LayerSpec::drop(0.3),
            LayerSpec::conv(4, 1, 128), LayerSpec::lrelu(), LayerSpec::bn(), LayerSpec::drop(0.3),
            LayerSpec::flatten_all(),   LayerSpec::fc(2),   LayerSpec::softmax_out()};
}

nn::NetworkSpec tiny_realism_spec() {
    return {LayerSpec::conv(3, 2, 2), LayerSpec::lrelu(), LayerSpec::bn(), LayerSpec::flatten_all(),
            LayerSpec::fc(2), LayerSpec::softmax_out()};
}

template <class T>
CDModel<T>::CDModel(Architecture backbone_arch, nn::NetworkSpec head_spec, std::uint64_t init_seed)
    : backbone(std::move(backbone_arch), init_seed) {
    std::mt19937_64 rng(init_seed ^ 0x5bd1e995ULL);
    head = nn::Sequential<T>("change", std::move(head_spec), {backbone.arch().n_y}, rng);
    if (head.output_shape() != Shape{2})
        throw std::invalid_argument("change head must output 2 classes, got " + shape_str(head.output_shape()));
}

template <class T>
ag::Var<T> CDModel<T>::log_probs_from_latents(const ag::Var<T>& z_a, const ag::Var<T>& z_b,
                                              const nn::RunContext& ctx) {
    return head.forward(ag::abs(ag::sub(z_a, z_b)), ctx);
}

template <class T>
ag::Var<T> CDModel<T>::log_probs(const ag::Var<T>& x_a, const ag::Var<T>& x_b, const nn::RunContext& ctx,
                                 std::mt19937_64* sample) {
    const auto qa = backbone.encode_y(x_a, ctx);
    const auto qb = backbone.encode_y(x_b, ctx);
    if (sample) return log_probs_from_latents(reparameterize(qa, *sample), reparameterize(qb, *sample), ctx);
    return log_probs_from_latents(qa.mean, qb.mean, ctx);
}

template <class T>
std::vector<ag::Var<T>> CDModel<T>::parameters() const {
    auto out = backbone.parameters();
    for (const auto& p : head.parameters()) out.push_back(p);
    return out;
}

template <class T>
std::vector<nn::NamedTensor<T>> CDModel<T>::state() {
    auto out = backbone.state();
    for (const auto& t : head.state()) out.push_back(t);
    return out;
}

template <class T>
void CDModel<T>::set_trainable(bool trainable) {
    for (auto& p : parameters()) p.set_requires_grad(trainable);
}

nlohmann::json to_json(const CDTrainParams& p) {
    return {{"beta_y", p.beta_y}, {"beta_x", p.beta_x}, {"alpha", p.alpha}, {"alpha_c", p.alpha_c}};
}

CDTrainParams cd_params_from_json(const nlohmann::json& j) {
    CDTrainParams p;
    p.beta_y = j.value("beta_y", p.beta_y);
    p.beta_x = j.value("beta_x", p.beta_x);
    p.alpha = j.value("alpha", p.alpha);
    p.alpha_c = j.value("alpha_c", p.alpha_c);
    return p;
}

namespace {

template <class T>
double accuracy_of(const Tensor<T>& log_probs, std::span<const int> labels) {
    const int n = log_probs.dim(0), k = log_probs.dim(1);
    if (n == 0) return 0.0;
    int hit = 0;
    for (int i = 0; i < n; ++i) {
        const T* row = log_probs.data() + static_cast<std::size_t>(i) * k;
        hit += static_cast<int>(std::max_element(row, row + k) - row) == labels[i];
    }
    return static_cast<double>(hit) / n;
}

}  // namespace

template <class T>
CDPairPass<T> cd_pair_forward(CDModel<T>& model, const ag::Var<T>& x_a, const ag::Var<T>& x_b,
                              std::span<const int> pair_labels, const CDTrainParams& params,
                              const nn::RunContext& ctx, std::mt19937_64& noise) {
    const int p = x_a.shape()[0];
    if (x_b.shape()[0] != p || static_cast<int>(pair_labels.size()) != p)
        throw std::invalid_argument("cd: pair members and labels must have equal counts");
    CDPairPass<T> out;
    // both members in one pass so batch statistics are shared
    out.elbo = dvae_forward(model.backbone, ag::concat_rows(x_a, x_b), {}, params.dvae(), ctx, noise);
    std::vector<int> first(static_cast<std::size_t>(p)), second(static_cast<std::size_t>(p));
    std::iota(first.begin(), first.end(), 0);
    std::iota(second.begin(), second.end(), p);
    std::vector<std::size_t> ra(first.begin(), first.end()), rb(second.begin(), second.end());
    const auto z_a = ag::gather_rows(out.elbo.z_y, std::span<const std::size_t>(ra));
    const auto z_b = ag::gather_rows(out.elbo.z_y, std::span<const std::size_t>(rb));
    const auto lp = model.log_probs_from_latents(z_a, z_b, ctx);
    out.change_ce = ag::mean(ag::nll_rows(lp, pair_labels));
    out.objective = ag::add(out.elbo.objective, ag::scale(out.change_ce, T(params.alpha_c)));
    out.accuracy = accuracy_of(lp.value(), pair_labels);
    return out;
}

CDTrainer::CDTrainer(CDModel<float>& model, CDTrainParams params, optim::AdamConfig adam, std::uint64_t seed)
    : model_(model), params_(params), adam_(model.parameters(), adam), rng_(seed) {}

CDStepReport CDTrainer::step(const Tensor<float>& images, std::span<const int> labels, const Tensor<float>& pair_a,
                             const Tensor<float>& pair_b, std::span<const int> pair_labels) {
    const nn::RunContext ctx{nn::Mode::train, &rng_, true};
    CDStepReport r;
    auto primary = dvae_forward(model_.backbone, ag::Var<float>::constant(images), labels, params_.dvae(), ctx, rng_);
    auto pair = cd_pair_forward(model_, ag::Var<float>::constant(pair_a), ag::Var<float>::constant(pair_b),
                                pair_labels, params_, ctx, rng_);
    const double ratio = pass_ratio(2 * pair_a.dim(0), images.dim(0));
    const auto objective = ag::add(primary.objective, ag::scale(pair.objective, static_cast<float>(ratio)));
    r.primary = primary.values;
    r.pair_elbo = pair.elbo.values;
    r.change_ce = pair.change_ce.item();
    r.change_accuracy = pair.accuracy;
    LossBreakdown check = r.primary;
    check.total += ratio * (r.pair_elbo.total + params_.alpha_c * r.change_ce);
    if (!check.finite()) throw TrainingError("cd: non-finite loss", check);
    objective.backward();
    adam_.step();
    check_finite(check, adam_.params());
    return r;
}

std::vector<float> cd_predict(CDModel<float>& model, const Tensor<float>& x_a, const Tensor<float>& x_b, int batch) {
    ag::NoGradGuard guard;
    const nn::RunContext ctx{nn::Mode::eval, nullptr, false};
    const int n = x_a.dim(0);
    if (x_b.dim(0) != n) throw std::invalid_argument("cd_predict: pair members differ in count");
    std::vector<float> out;
    out.reserve(static_cast<std::size_t>(n));
    for (int i = 0; i < n; i += batch) {
        const int m = std::min(batch, n - i);
        const auto lp = model.log_probs(ag::Var<float>::constant(slice_rows(x_a, i, m)),
                                        ag::Var<float>::constant(slice_rows(x_b, i, m)), ctx);
        for (int r = 0; r < m; ++r) out.push_back(std::exp(lp.value()[static_cast<std::size_t>(r) * 2 + 1]));
    }
    return out;
}

double cd_accuracy(CDModel<float>& model, const Tensor<float>& x_a, const Tensor<float>& x_b,
                   std::span<const int> labels) {
    const auto p = cd_predict(model, x_a, x_b);
    if (p.empty()) return 0.0;
    int hit = 0;
    for (std::size_t i = 0; i < p.size(); ++i) hit += (p[i] > 0.5f ? 1 : 0) == labels[i];
    return static_cast<double>(hit) / static_cast<double>(p.size());
}

void save_cd(const std::filesystem::path& path, CDModel<float>& model, const CDTrainParams& params,
             const CheckpointMeta& meta, optim::Adam<float>* optimizer) {
    CheckpointMeta m = meta;
    m.kind = "cd";
    m.extra["cd_params"] = to_json(params);
    m.extra["head"] = nn::spec_to_json(model.head.spec());
    save_dvae(path, model.backbone, params.dvae(), m, optimizer, model.head.state());
}

CDModel<float> load_cd(const std::filesystem::path& path, CDTrainParams* params, CheckpointMeta* meta) {
    LoadedDVAE loaded = load_dvae(path);
    if (loaded.meta.kind != "cd") throw std::runtime_error("checkpoint " + path.string() + " is not a cd model");
    CDModel<float> model(loaded.model.arch(), nn::spec_from_json(loaded.meta.extra.at("head")), 0);
    model.backbone = std::move(loaded.model);
    restore_state(loaded.archive, model.head.state());
    if (params) *params = cd_params_from_json(loaded.meta.extra.at("cd_params"));
    if (meta) *meta = loaded.meta;
    return model;
}

template <class T>
Discriminator<T>::Discriminator(nn::NetworkSpec spec, Shape image_shape, std::uint64_t init_seed) {
    std::mt19937_64 rng(init_seed);
    net = nn::Sequential<T>("realism", std::move(spec), std::move(image_shape), rng);
    if (net.output_shape() != Shape{2})
        throw std::invalid_argument("realism discriminator must output 2 classes, got " +
                                    shape_str(net.output_shape()));
}

DStepReport d_train_step(Discriminator<float>& d, optim::Adam<float>& adam, const Tensor<float>& real,
                         const Tensor<float>& fake, std::mt19937_64& rng) {
    const nn::RunContext ctx{nn::Mode::train, &rng, true};
    const auto x = ag::concat_rows(ag::Var<float>::constant(real), ag::Var<float>::constant(fake));
    std::vector<int> labels(static_cast<std::size_t>(real.dim(0)), 1);
    labels.resize(labels.size() + static_cast<std::size_t>(fake.dim(0)), 0);
    const auto lp = d.log_probs(x, ctx);
    const auto loss = ag::mean(ag::nll_rows(lp, std::span<const int>(labels)));
    DStepReport r{loss.item(), accuracy_of(lp.value(), std::span<const int>(labels))};
    if (!std::isfinite(r.loss)) throw std::runtime_error("realism discriminator: non-finite loss");
    adam.zero_grad();
    loss.backward();
    adam.step();
    return r;
}

std::vector<float> d_predict(Discriminator<float>& d, const Tensor<float>& images, int batch) {
    ag::NoGradGuard guard;
    const nn::RunContext ctx{nn::Mode::eval, nullptr, false};
    const int n = images.dim(0);
    std::vector<float> out;
    for (int i = 0; i < n; i += batch) {
        const int m = std::min(batch, n - i);
        const auto lp = d.log_probs(ag::Var<float>::constant(slice_rows(images, i, m)), ctx);
        for (int r = 0; r < m; ++r) out.push_back(std::exp(lp.value()[static_cast<std::size_t>(r) * 2 + 1]));
    }
    return out;
}

void save_discriminator(const std::filesystem::path& path, Discriminator<float>& d) {
    const Shape in = d.net.input_shape();
    write_archive(path, {{"kind", "realism"}, {"spec", nn::spec_to_json(d.net.spec())}, {"input_shape", in}},
                  d.state());
}

Discriminator<float> load_discriminator(const std::filesystem::path& path) {
    const Archive a = read_archive(path);
    if (a.header.value("kind", "") != "realism")
        throw std::runtime_error("checkpoint " + path.string() + " is not a realism discriminator");
    Discriminator<float> d(nn::spec_from_json(a.header.at("spec")), a.header.at("input_shape").get<Shape>(), 0);
    restore_state(a, d.state());
    return d;
}

template <class T>
MixedPair<T> build_mixed_pair(const ag::Var<T>& z_ya, const ag::Var<T>& z_yb, std::mt19937_64& rng) {
    if (z_ya.shape() != z_yb.shape() || z_ya.shape().size() != 2)
        throw std::invalid_argument("mixed pair: latents must be equal-shape [N, n_y]");
    const int n = z_ya.shape()[0], w = z_ya.shape()[1];
    MixedPair<T> p;
    p.mask_a = Tensor<T>({n, w});
    p.mask_b = Tensor<T>({n, w});
    std::uniform_int_distribution<int> pick(0, w - 1);
    std::bernoulli_distribution coin(0.5);
    for (int r = 0; r < n; ++r) {
        const int j = pick(rng);
        p.dim.push_back(j);
        for (int c = 0; c < w; ++c) {
            const std::size_t k = static_cast<std::size_t>(r) * w + c;
            const T from_a = coin(rng) ? T(1) : T(0);
            p.mask_a[k] = c == j ? T(1) : from_a;
            p.mask_b[k] = c == j ? T(0) : from_a;
        }
    }
    auto mix = [&](const Tensor<T>& m) {
        Tensor<T> inv(m.shape());
        for (std::size_t k = 0; k < m.size(); ++k) inv[k] = T(1) - m[k];
        return ag::add(ag::mul_const(z_ya, m), ag::mul_const(z_yb, inv));
    };
    p.z_pa = mix(p.mask_a);
    p.z_pb = mix(p.mask_b);
    return p;
}

nlohmann::json to_json(const CondParams& p) { return {{"alpha_r", p.alpha_r}, {"alpha_p", p.alpha_p}}; }

CondParams cond_params_from_json(const nlohmann::json& j) {
    CondParams p;
    p.alpha_r = j.value("alpha_r", p.alpha_r);
    p.alpha_p = j.value("alpha_p", p.alpha_p);
    return p;
}

template <class T>
ConditioningTerms<T> conditioning_loss(const ag::Var<T>& x_pa, const ag::Var<T>& x_pb, const MixedPair<T>& pair,
                                       const ag::Var<T>& z_ya, const ag::Var<T>& z_yb, Discriminator<T>& d,
                                       CDModel<T>& cd, const CondParams& params, std::mt19937_64& rng) {
    const int n = x_pa.shape()[0];
    const int n_y = pair.z_pa.shape()[1];
    const nn::RunContext d_ctx{nn::Mode::train, &rng, false};
    const nn::RunContext cd_ctx{nn::Mode::eval, nullptr, false};
    ConditioningTerms<T> t;

    const auto d_lp = d.log_probs(ag::concat_rows(x_pa, x_pb), d_ctx);
    const std::vector<int> real(static_cast<std::size_t>(2 * n), 1);
    // -log D(x_pa) - log D(x_pb), averaged over pairs
    t.realism = ag::scale(ag::sum(ag::nll_rows(d_lp, std::span<const int>(real))), T(1) / static_cast<T>(n));

    const auto num = ag::sum_rows(ag::abs(ag::sub(pair.z_pa, pair.z_pb)));
    const auto den = ag::sum_rows(ag::abs(ag::sub(z_ya, z_yb)));
    t.scale = ag::scale(ag::safe_div(num, den), static_cast<T>(n_y));
    const std::vector<int> good(static_cast<std::size_t>(n), 1);
    const auto cd_nll = ag::nll_rows(cd.log_probs(x_pa, x_pb, cd_ctx), std::span<const int>(good));
    t.change = ag::mean(ag::mul(t.scale, cd_nll));

    t.total = ag::add(ag::scale(t.realism, T(params.alpha_r)), ag::scale(t.change, T(params.alpha_p)));
    return t;
}

std::vector<std::size_t> derangement(std::size_t n, std::mt19937_64& rng) {
    std::vector<std::size_t> p(n);
    std::iota(p.begin(), p.end(), std::size_t{0});
    for (std::size_t i = n; i > 1; --i) {
        const std::size_t j = std::uniform_int_distribution<std::size_t>(0, i - 2)(rng);
        std::swap(p[i - 1], p[j]);
    }
    return p;
}

template class CDModel<float>;
template class CDModel<double>;
template class Discriminator<float>;
template class Discriminator<double>;
template CDPairPass<float> cd_pair_forward(CDModel<float>&, const ag::Var<float>&, const ag::Var<float>&,
                                           std::span<const int>, const CDTrainParams&, const nn::RunContext&,
                                           std::mt19937_64&);
template CDPairPass<double> cd_pair_forward(CDModel<double>&, const ag::Var<double>&, const ag::Var<double>&,
                                            std::span<const int>, const CDTrainParams&, const nn::RunContext&,
                                            std::mt19937_64&);
template MixedPair<float> build_mixed_pair(const ag::Var<float>&, const ag::Var<float>&, std::mt19937_64&);
template MixedPair<double> build_mixed_pair(const ag::Var<double>&, const ag::Var<double>&, std::mt19937_64&);
template ConditioningTerms<float> conditioning_loss(const ag::Var<float>&, const ag::Var<float>&,
                                                    const MixedPair<float>&, const ag::Var<float>&,
                                                    const ag::Var<float>&, Discriminator<float>&, CDModel<float>&,
                                                    const CondParams&, std::mt19937_64&);
template ConditioningTerms<double> conditioning_loss(const ag::Var<double>&, const ag::Var<double>&,
                                                     const MixedPair<double>&, const ag::Var<double>&,
                                                     const ag::Var<double>&, Discriminator<double>&,
                                                     CDModel<double>&, const CondParams&, std::mt19937_64&);

}  // namespace vce::model
