#include "vce/model/dvae.hpp"

#include <cmath>

namespace vce::model {

using nn::LayerSpec;

void DVAEParams::validate() const {
    if (beta_y < 0 || beta_x < 0 || alpha < 0)
        throw std::invalid_argument("dvae params: weights must be non-negative");
}

nlohmann::json to_json(const DVAEParams& p) {
    return {{"beta_y", p.beta_y}, {"beta_x", p.beta_x}, {"alpha", p.alpha}};
}

DVAEParams dvae_params_from_json(const nlohmann::json& j) {
    DVAEParams p;
    p.beta_y = j.value("beta_y", p.beta_y);
    p.beta_x = j.value("beta_x", p.beta_x);
    p.alpha = j.value("alpha", p.alpha);
    p.validate();
    return p;
}

Architecture Architecture::standard(int n_y, int n_x) {
    Architecture a;
    a.n_y = n_y;
    a.n_x = n_x;
    a.encoder_trunk = {LayerSpec::conv(4, 2, 32), LayerSpec::lrelu(), LayerSpec::bn(),
                       LayerSpec::conv(4, 1, 64), LayerSpec::lrelu(), LayerSpec::bn(),
                       LayerSpec::conv(4, 1, 128), LayerSpec::lrelu(), LayerSpec::bn(),
                       LayerSpec::flatten_all()};
    a.decoder = {LayerSpec::fc(32768),       LayerSpec::lrelu(), LayerSpec::reshape_to({128, 16, 16}),
                 LayerSpec::bn(),            LayerSpec::tconv(4, 1, 64), LayerSpec::lrelu(),
                 LayerSpec::bn(),            LayerSpec::tconv(4, 1, 32), LayerSpec::lrelu(),
                 LayerSpec::bn(),            LayerSpec::tconv(4, 2, 1),  LayerSpec::sigmoid_out()};
    a.classifier_y = {LayerSpec::fc(10), LayerSpec::softmax_out()};
    a.classifier_x = {LayerSpec::fc(50), LayerSpec::lrelu(), LayerSpec::bn(), LayerSpec::fc(10),
                      LayerSpec::softmax_out()};
    return a;
}

Architecture Architecture::change_discriminator() {
    Architecture a;
    a.n_y = 16;
    a.n_x = 16;
    a.encoder_trunk = {LayerSpec::conv(4, 2, 32), LayerSpec::lrelu(), LayerSpec::bn(),
                       LayerSpec::conv(4, 1, 128), LayerSpec::lrelu(), LayerSpec::bn(),
                       LayerSpec::flatten_all()};
    a.decoder = {LayerSpec::fc(32768),        LayerSpec::lrelu(), LayerSpec::reshape_to({128, 16, 16}),
                 LayerSpec::bn(),             LayerSpec::tconv(4, 1, 32), LayerSpec::lrelu(),
                 LayerSpec::bn(),             LayerSpec::tconv(4, 2, 1),  LayerSpec::sigmoid_out()};
    const nn::NetworkSpec head = {LayerSpec::fc(50), LayerSpec::lrelu(), LayerSpec::bn(), LayerSpec::fc(10),
                                  LayerSpec::softmax_out()};
    a.classifier_y = head;
    a.classifier_x = head;
    return a;
}

Architecture Architecture::tiny(int image_size, int n_y, int n_x) {
    if (image_size % 2 != 0) throw std::invalid_argument("tiny architecture needs an even image size");
    const int h = image_size / 2;
    Architecture a;
    a.image_shape = {1, image_size, image_size};
    a.n_y = n_y;
    a.n_x = n_x;
    a.encoder_trunk = {LayerSpec::conv(3, 2, 3), LayerSpec::lrelu(), LayerSpec::bn(), LayerSpec::flatten_all()};
    a.decoder = {LayerSpec::fc(3 * h * h), LayerSpec::lrelu(), LayerSpec::reshape_to({3, h, h}),
                 LayerSpec::bn(),          LayerSpec::tconv(3, 2, 1), LayerSpec::sigmoid_out()};
    a.classifier_y = {LayerSpec::fc(10), LayerSpec::softmax_out()};
    a.classifier_x = {LayerSpec::fc(5), LayerSpec::lrelu(), LayerSpec::bn(), LayerSpec::fc(10),
                      LayerSpec::softmax_out()};
    return a;
}

nlohmann::json to_json(const Architecture& a) {
    return {{"image_shape", a.image_shape},
            {"n_y", a.n_y},
            {"n_x", a.n_x},
            {"n_classes", a.n_classes},
            {"encoder_trunk", nn::spec_to_json(a.encoder_trunk)},
            {"decoder", nn::spec_to_json(a.decoder)},
            {"classifier_y", nn::spec_to_json(a.classifier_y)},
            {"classifier_x", nn::spec_to_json(a.classifier_x)}};
}

Architecture architecture_from_json(const nlohmann::json& j) {
    Architecture a;
    a.image_shape = j.at("image_shape").get<Shape>();
    a.n_y = j.at("n_y");
    a.n_x = j.at("n_x");
    a.n_classes = j.value("n_classes", 10);
    a.encoder_trunk = nn::spec_from_json(j.at("encoder_trunk"));
    a.decoder = nn::spec_from_json(j.at("decoder"));
    a.classifier_y = nn::spec_from_json(j.at("classifier_y"));
    a.classifier_x = nn::spec_from_json(j.at("classifier_x"));
    return a;
}

template <class T>
Encoder<T>::Encoder(const std::string& name, const nn::NetworkSpec& trunk, const Shape& input, int width,
                    std::mt19937_64& init_rng)
    : trunk_(name + ".trunk", trunk, input, init_rng) {
    if (trunk_.output_shape().size() != 1)
        throw std::invalid_argument(name + ": trunk must end flat, got " + shape_str(trunk_.output_shape()));
    mean_head_ = nn::Sequential<T>(name + ".mean", {LayerSpec::fc(width)}, trunk_.output_shape(), init_rng);
    logvar_head_ = nn::Sequential<T>(name + ".logvar", {LayerSpec::fc(width)}, trunk_.output_shape(), init_rng);
}

template <class T>
LatentGaussian<T> Encoder<T>::forward(const ag::Var<T>& x, const nn::RunContext& ctx) {
    const ag::Var<T> h = trunk_.forward(x, ctx);
    return {mean_head_.forward(h, ctx), logvar_head_.forward(h, ctx)};
}

template <class T>
std::vector<ag::Var<T>> Encoder<T>::parameters() const {
    std::vector<ag::Var<T>> out = trunk_.parameters();
    for (const auto* s : {&mean_head_, &logvar_head_})
        for (const auto& p : s->parameters()) out.push_back(p);
    return out;
}

template <class T>
std::vector<nn::NamedTensor<T>> Encoder<T>::state() {
    std::vector<nn::NamedTensor<T>> out = trunk_.state();
    for (auto* s : {&mean_head_, &logvar_head_})
        for (const auto& t : s->state()) out.push_back(t);
    return out;
}

template <class T>
DVAE<T>::DVAE(Architecture arch, std::uint64_t init_seed) : arch_(std::move(arch)) {
    std::mt19937_64 rng(init_seed);
    enc_y = Encoder<T>("enc_y", arch_.encoder_trunk, arch_.image_shape, arch_.n_y, rng);
    enc_x = Encoder<T>("enc_x", arch_.encoder_trunk, arch_.image_shape, arch_.n_x, rng);
    decoder = nn::Sequential<T>("decoder", arch_.decoder, {arch_.n_y + arch_.n_x}, rng);
    if (decoder.output_shape() != arch_.image_shape)
        throw std::invalid_argument("decoder: output " + shape_str(decoder.output_shape()) +
                                    " does not match image shape " + shape_str(arch_.image_shape));
    cls_y = nn::Sequential<T>("cls_y", arch_.classifier_y, {arch_.n_y}, rng);
    cls_x = nn::Sequential<T>("cls_x", arch_.classifier_x, {arch_.n_x}, rng);
    for (const auto* c : {&cls_y, &cls_x})
        if (c->output_shape() != Shape{arch_.n_classes})
            throw std::invalid_argument(c->name() + ": output " + shape_str(c->output_shape()) + " is not " +
                                        std::to_string(arch_.n_classes) + " classes");
}

template <class T>
ag::Var<T> DVAE<T>::decode(const ag::Var<T>& z_y, const ag::Var<T>& z_x, const nn::RunContext& ctx) {
    return decoder.forward(ag::concat_cols(z_y, z_x), ctx);
}

template <class T>
std::vector<ag::Var<T>> DVAE<T>::main_parameters() const {
    std::vector<ag::Var<T>> out = enc_y.parameters();
    for (const auto& p : enc_x.parameters()) out.push_back(p);
    for (const auto& p : decoder.parameters()) out.push_back(p);
    for (const auto& p : cls_y.parameters()) out.push_back(p);
    return out;
}

template <class T>
std::vector<ag::Var<T>> DVAE<T>::adversary_parameters() const {
    return cls_x.parameters();
}

template <class T>
std::vector<ag::Var<T>> DVAE<T>::parameters() const {
    std::vector<ag::Var<T>> out = main_parameters();
    for (const auto& p : adversary_parameters()) out.push_back(p);
    return out;
}

template <class T>
std::vector<nn::NamedTensor<T>> DVAE<T>::state() {
    std::vector<nn::NamedTensor<T>> out = enc_y.state();
    for (const auto& t : enc_x.state()) out.push_back(t);
    for (auto* s : {&decoder, &cls_y, &cls_x})
        for (const auto& t : s->state()) out.push_back(t);
    return out;
}

template <class T>
void DVAE<T>::set_trainable(bool trainable) {
    for (auto& p : parameters()) p.set_requires_grad(trainable);
}

template <class T>
ag::Var<T> kl_to_standard_normal(const LatentGaussian<T>& q) {
    const int n = q.mean.shape()[0];
    // 0.5 (mu^2 + sigma^2 - 1 - log sigma^2)
    ag::Var<T> terms = ag::add(ag::square(q.mean), ag::exp(q.logvar));
    terms = ag::sub(ag::add_scalar(terms, T(-1)), q.logvar);
    return ag::scale(ag::sum(terms), T(0.5) / static_cast<T>(n));
}

double kl_to_standard_normal(std::span<const double> mean, std::span<const double> sigma) {
    if (mean.size() != sigma.size()) throw std::invalid_argument("kl: mean and sigma widths differ");
    double kl = 0;
    for (std::size_t i = 0; i < mean.size(); ++i) {
        if (!(sigma[i] > 0)) throw std::invalid_argument("kl: sigma must be positive");
        const double s2 = sigma[i] * sigma[i];
        kl += 0.5 * (mean[i] * mean[i] + s2 - 1.0 - std::log(s2));
    }
    return kl;
}

template <class T>
ag::Var<T> reparameterize(const LatentGaussian<T>& q, std::mt19937_64& rng) {
    Tensor<T> eps(q.mean.shape());
    std::normal_distribution<double> normal(0.0, 1.0);
    for (auto& v : eps.vec()) v = static_cast<T>(normal(rng));
    return ag::add(q.mean, ag::mul_const(q.stddev(), eps));
}

template <class T>
ag::Var<T> reconstruction_error(const ag::Var<T>& x, const ag::Var<T>& recon) {
    const int n = x.shape()[0];
    return ag::scale(ag::sum(ag::square(ag::sub(recon, x))), T(1) / static_cast<T>(n));
}

bool LossBreakdown::finite() const {
    for (double v : {kl_y, kl_x, rec, cls_y, cls_x, total})
        if (!std::isfinite(v)) return false;
    return true;
}

nlohmann::json LossBreakdown::to_json() const {
    return {{"kl_y", kl_y}, {"kl_x", kl_x}, {"rec", rec}, {"cls_y", cls_y}, {"cls_x", cls_x}, {"total", total}};
}

template <class T>
DVAEPass<T> dvae_forward(DVAE<T>& model, const ag::Var<T>& x, std::span<const int> labels,
                         const DVAEParams& params, const nn::RunContext& ctx, std::mt19937_64& noise) {
    DVAEPass<T> p;
    p.q_y = model.encode_y(x, ctx);
    p.q_x = model.encode_x(x, ctx);
    p.z_y = reparameterize(p.q_y, noise);
    p.z_x = reparameterize(p.q_x, noise);
    p.recon = model.decode(p.z_y, p.z_x, ctx);
    p.kl_y = kl_to_standard_normal(p.q_y);
    p.kl_x = kl_to_standard_normal(p.q_x);
    p.rec = reconstruction_error(x, p.recon);

    ag::Var<T> obj = ag::add(ag::add(ag::scale(p.kl_y, T(params.beta_y)), ag::scale(p.kl_x, T(params.beta_x))), p.rec);
    p.values.kl_y = static_cast<double>(p.kl_y.item());
    p.values.kl_x = static_cast<double>(p.kl_x.item());
    p.values.rec = static_cast<double>(p.rec.item());
    p.values.total = params.beta_y * p.values.kl_y + params.beta_x * p.values.kl_x + p.values.rec;
    if (!labels.empty()) {
        if (labels.size() != static_cast<std::size_t>(x.shape()[0]))
            throw std::invalid_argument("dvae: label count does not match batch size");
        p.cls_y = ag::mean(ag::nll_rows(model.classify_y(p.z_y, ctx), labels));
        const ag::Var<T> reversed = ag::grad_reverse(p.z_x, T(params.alpha));
        p.cls_x = ag::mean(ag::nll_rows(model.classify_x(reversed, ctx), labels));
        obj = ag::add(ag::add(obj, ag::scale(p.cls_y, T(params.alpha))), p.cls_x);
        p.values.cls_y = static_cast<double>(p.cls_y.item());
        p.values.cls_x = static_cast<double>(p.cls_x.item());
        p.values.total += params.alpha * (p.values.cls_y - p.values.cls_x);
    }
    p.objective = obj;
    return p;
}

DVAETrainer::DVAETrainer(DVAE<float>& model, DVAEParams params, optim::AdamConfig adam, std::uint64_t seed)
    : model_(model), params_(params), adam_(model.parameters(), adam), rng_(seed) {
    params_.validate();
}

LossBreakdown DVAETrainer::step(const Tensor<float>& images, std::span<const int> labels) {
    const nn::RunContext ctx{nn::Mode::train, &rng_, true};
    const auto x = ag::Var<float>::constant(images);
    DVAEPass<float> pass = dvae_forward(model_, x, labels, params_, ctx, rng_);
    if (!pass.values.finite()) throw TrainingError("dvae: non-finite loss", pass.values);
    pass.objective.backward();
    adam_.step();
    check_finite(pass.values, adam_.params());
    return pass.values;
}

void check_finite(const LossBreakdown& b, const std::vector<ag::Var<float>>& params) {
    if (!b.finite()) throw TrainingError("non-finite loss", b);
    for (const auto& p : params)
        for (float v : p.value().vec())
            if (!std::isfinite(v)) throw TrainingError("non-finite parameter after update", b);
}

namespace {

const nn::RunContext kEval{nn::Mode::eval, nullptr, false};

void copy_rows(const Tensor<float>& src, Tensor<float>& dst, std::size_t row0) {
    std::copy(src.vec().begin(), src.vec().end(), dst.data() + row0 * dst.row_size());
}

}  // namespace

Embeddings encode_dataset(DVAE<float>& model, const Tensor<float>& images, int batch) {
    ag::NoGradGuard guard;
    const int n = images.shape().empty() ? 0 : images.dim(0);
    const auto& a = model.arch();
    Embeddings e{Tensor<float>({n, a.n_y}), Tensor<float>({n, a.n_x}), Tensor<float>({n, a.n_y}),
                 Tensor<float>({n, a.n_x})};
    for (int i = 0; i < n; i += batch) {
        const int m = std::min(batch, n - i);
        const auto x = ag::Var<float>::constant(slice_rows(images, i, m));
        const auto qy = model.encode_y(x, kEval);
        const auto qx = model.encode_x(x, kEval);
        copy_rows(qy.mean.value(), e.mu_y, i);
        copy_rows(qx.mean.value(), e.mu_x, i);
        copy_rows(qy.logvar.value(), e.logvar_y, i);
        copy_rows(qx.logvar.value(), e.logvar_x, i);
    }
    return e;
}

Tensor<float> decode_latents(DVAE<float>& model, const Tensor<float>& z_y, const Tensor<float>& z_x, int batch) {
    ag::NoGradGuard guard;
    const int n = z_y.dim(0);
    if (z_x.dim(0) != n) throw std::invalid_argument("decode: z_y and z_x row counts differ");
    Shape shape{n};
    for (int d : model.arch().image_shape) shape.push_back(d);
    Tensor<float> out(shape);
    for (int i = 0; i < n; i += batch) {
        const int m = std::min(batch, n - i);
        const auto r = model.decode(ag::Var<float>::constant(slice_rows(z_y, i, m)),
                                    ag::Var<float>::constant(slice_rows(z_x, i, m)), kEval);
        copy_rows(r.value(), out, i);
    }
    return out;
}

Tensor<float> class_probabilities(DVAE<float>& model, const Tensor<float>& mu_y, int batch) {
    ag::NoGradGuard guard;
    const int n = mu_y.dim(0);
    Tensor<float> out({n, model.arch().n_classes});
    for (int i = 0; i < n; i += batch) {
        const int m = std::min(batch, n - i);
        Tensor<float> lp = model.classify_y(ag::Var<float>::constant(slice_rows(mu_y, i, m)), kEval).value();
        for (auto& v : lp.vec()) v = std::exp(v);
        copy_rows(lp, out, i);
    }
    return out;
}

ElboTerms elbo_terms(DVAE<float>& model, const Tensor<float>& images, int batch) {
    ag::NoGradGuard guard;
    const int n = images.dim(0);
    ElboTerms t;
    for (int i = 0; i < n; i += batch) {
        const int m = std::min(batch, n - i);
        const auto x = ag::Var<float>::constant(slice_rows(images, i, m));
        const auto qy = model.encode_y(x, kEval);
        const auto qx = model.encode_x(x, kEval);
        const auto r = model.decode(qy.mean, qx.mean, kEval);
        t.rec += reconstruction_error(x, r).item() * m;
        t.kl_y += kl_to_standard_normal(qy).item() * m;
        t.kl_x += kl_to_standard_normal(qx).item() * m;
    }
    if (n > 0) {
        t.rec /= n;
        t.kl_y /= n;
        t.kl_x /= n;
    }
    return t;
}

void save_dvae(const std::filesystem::path& path, DVAE<float>& model, const DVAEParams& params,
               const CheckpointMeta& meta, optim::Adam<float>* optimizer,
               const std::vector<nn::NamedTensor<float>>& extra_tensors) {
    nlohmann::json header{{"kind", meta.kind},
                          {"step", meta.step},
                          {"seed", meta.seed},
                          {"extra", meta.extra},
                          {"params", to_json(params)},
                          {"architecture", to_json(model.arch())}};
    std::vector<nn::NamedTensor<float>> tensors = model.state();
    for (const auto& t : extra_tensors) tensors.push_back(t);
    if (optimizer) {
        header["adam"] = {{"steps", optimizer->steps()},
                          {"learning_rate", optimizer->config().learning_rate},
                          {"beta1", optimizer->config().beta1},
                          {"beta2", optimizer->config().beta2},
                          {"epsilon", optimizer->config().epsilon},
                          {"count", optimizer->first_moments().size()}};
        for (std::size_t k = 0; k < optimizer->first_moments().size(); ++k) {
            tensors.push_back({"adam.m." + std::to_string(k), &optimizer->first_moments()[k]});
            tensors.push_back({"adam.v." + std::to_string(k), &optimizer->second_moments()[k]});
        }
    }
    write_archive(path, header, tensors);
}

LoadedDVAE load_dvae(const std::filesystem::path& path) {
    LoadedDVAE out;
    out.archive = read_archive(path);
    const auto& h = out.archive.header;
    out.model = DVAE<float>(architecture_from_json(h.at("architecture")), 0);
    out.params = dvae_params_from_json(h.at("params"));
    out.meta.kind = h.value("kind", "dvae");
    out.meta.step = h.value("step", std::int64_t{0});
    out.meta.seed = h.value("seed", std::uint64_t{0});
    out.meta.extra = h.value("extra", nlohmann::json::object());
    restore_state(out.archive, out.model.state());
    return out;
}

void restore_optimizer(const Archive& archive, optim::Adam<float>& optimizer) {
    const auto& h = archive.header;
    if (!h.contains("adam")) throw std::runtime_error("checkpoint: no optimizer state");
    const std::size_t count = h["adam"].at("count");
    if (count != optimizer.first_moments().size())
        throw std::runtime_error("checkpoint: optimizer parameter count mismatch");
    for (std::size_t k = 0; k < count; ++k) {
        optimizer.first_moments()[k] = archive.at("adam.m." + std::to_string(k), optimizer.first_moments()[k].shape());
        optimizer.second_moments()[k] = archive.at("adam.v." + std::to_string(k), optimizer.second_moments()[k].shape());
    }
    optimizer.set_steps(h["adam"].at("steps"));
}

template class Encoder<float>;
template class Encoder<double>;
template class DVAE<float>;
template class DVAE<double>;
template ag::Var<float> kl_to_standard_normal(const LatentGaussian<float>&);
template ag::Var<double> kl_to_standard_normal(const LatentGaussian<double>&);
template ag::Var<float> reparameterize(const LatentGaussian<float>&, std::mt19937_64&);
template ag::Var<double> reparameterize(const LatentGaussian<double>&, std::mt19937_64&);
template ag::Var<float> reconstruction_error(const ag::Var<float>&, const ag::Var<float>&);
template ag::Var<double> reconstruction_error(const ag::Var<double>&, const ag::Var<double>&);
template DVAEPass<float> dvae_forward(DVAE<float>&, const ag::Var<float>&, std::span<const int>,
                                     const DVAEParams&, const nn::RunContext&, std::mt19937_64&);
template DVAEPass<double> dvae_forward(DVAE<double>&, const ag::Var<double>&, std::span<const int>,
                                       const DVAEParams&, const nn::RunContext&, std::mt19937_64&);

}  // namespace vce::model
