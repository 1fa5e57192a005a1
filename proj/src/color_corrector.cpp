#include "tsdiff/color_corrector.hpp"

#include "tsdiff/errors.hpp"
#include "tsdiff/rng.hpp"

#include <cmath>
#include <stdexcept>

namespace tsdiff {

std::size_t ColorCorrectorConfig::min_extent() const {
    std::size_t e = 1;
    for (std::size_t i = 0; i < cond_layers; ++i) e *= cond_stride;
    return e;
}

void ColorCorrectorConfig::validate() const {
    if (channels == 0 || width == 0 || cond_width == 0 || cond_layers == 0)
        throw std::invalid_argument("color corrector config: sizes must be positive");
    if (cond_width % 2) throw std::invalid_argument("color corrector config: cond_width must be even");
    if (cond_kernel != 1 && cond_kernel != 3) throw std::invalid_argument("color corrector config: kernel must be 1 or 3");
    if (cond_stride != 1 && cond_stride != 2) throw std::invalid_argument("color corrector config: stride must be 1 or 2");
}

namespace {

ColorCorrector::Layer make_layer(const std::string& name, Shape wshape, std::size_t fan_in, double gain, Rng& rng) {
    Tensor w(wshape);
    const double stddev = gain * std::sqrt(2.0 / static_cast<double>(fan_in));
    for (Scalar& v : w.values()) v = static_cast<Scalar>(stddev * rng.normal());
    return {ad::Parameter(name + ".weight", std::move(w)), ad::Parameter(name + ".bias", Tensor({wshape[0]}, 0.0f))};
}

// Near-identity 1x1 layer: copies the first min(out,in) channels, plus small noise.
ColorCorrector::Layer identity_layer(const std::string& name, std::size_t out, std::size_t in, Rng& rng) {
    Tensor w({out, in, 1, 1});
    for (std::size_t o = 0; o < out; ++o)
        for (std::size_t i = 0; i < in; ++i)
            w[o * in + i] = static_cast<Scalar>((o == i ? 1.0 : 0.0) + 0.01 * rng.normal());
    return {ad::Parameter(name + ".weight", std::move(w)), ad::Parameter(name + ".bias", Tensor({out}, 0.0f))};
}

ad::Var as_batch(ad::Graph& g, const Tensor& x, bool& squeezed) {
    squeezed = x.rank() == 3;
    if (x.rank() == 3) return g.constant(x.reshaped({1, x.dim(0), x.dim(1), x.dim(2)}));
    return g.constant(x);
}

} // namespace

ColorCorrector::ColorCorrector(ColorCorrectorConfig config, std::uint64_t seed) : config_(config) {
    config_.validate();
    Rng rng(seed);
    const std::size_t c = config_.channels, w = config_.width, cw = config_.cond_width, k = config_.cond_kernel;
    base_.push_back(identity_layer("base.0", w, c, rng));
    base_.push_back(identity_layer("base.1", w, w, rng));
    base_.push_back(identity_layer("base.2", c, w, rng));
    for (std::size_t i = 0; i < config_.cond_layers; ++i) {
        const std::size_t in = i == 0 ? c : cw;
        cond_.push_back(make_layer("cond." + std::to_string(i), {cw, in, k, k}, in * k * k, 1.0, rng));
    }
    gamma_head_ = make_layer("gamma", {w, cw}, cw, 0.05, rng);
    gamma_head_.bias.value() = Tensor({w}, 1.0f);
    nu_head_ = make_layer("nu", {w, cw}, cw, 0.05, rng);
}

template <class Self>
Modulation ColorCorrector::run_cond(Self& self, ad::Graph& g, ad::Var x, int t) {
    const auto& s = x.shape();
    const auto& cfg = self.config_;
    if (s.size() != 4 || s[1] != cfg.channels)
        throw ShapeError("color corrector: expected [N," + std::to_string(cfg.channels) + ",h,w], got " + to_string(s));
    if (s[2] < cfg.min_extent() || s[3] < cfg.min_extent())
        throw ShapeError("color corrector: input " + to_string(s) + " smaller than " + std::to_string(cfg.min_extent()) +
                         " pixels per side");
    ad::Var h = x;
    for (auto& layer : self.cond_)
        h = ad::relu(ad::conv2d(h, g.parameter(layer.weight), g.parameter(layer.bias), {cfg.cond_stride, ad::PadMode::zero}));
    ad::Var pooled = ad::add(ad::global_avg_pool(h), ad::sinusoidal_embed(g, t, cfg.cond_width, s[0]));
    return {ad::dense(pooled, g.parameter(self.gamma_head_.weight), g.parameter(self.gamma_head_.bias)),
            ad::dense(pooled, g.parameter(self.nu_head_.weight), g.parameter(self.nu_head_.bias))};
}

template <class Self>
ad::Var ColorCorrector::run_base(Self& self, ad::Graph& g, ad::Var x, ad::Var gamma, ad::Var nu) {
    const auto& s = x.shape();
    if (s.size() != 4 || s[1] != self.config_.channels)
        throw ShapeError("color corrector: expected [N," + std::to_string(self.config_.channels) + ",h,w], got " +
                         to_string(s));
    auto& b = self.base_;
    ad::Var h = ad::conv2d(x, g.parameter(b[0].weight), g.parameter(b[0].bias));
    h = ad::relu(ad::modulate(h, gamma, nu));
    h = ad::relu(ad::conv2d(h, g.parameter(b[1].weight), g.parameter(b[1].bias)));
    return ad::conv2d(h, g.parameter(b[2].weight), g.parameter(b[2].bias));
}

Modulation ColorCorrector::cond_features(ad::Graph& g, ad::Var x, int t) { return run_cond(*this, g, x, t); }
Modulation ColorCorrector::cond_features(ad::Graph& g, ad::Var x, int t) const { return run_cond(*this, g, x, t); }

ad::Var ColorCorrector::correct_with(ad::Graph& g, ad::Var x, ad::Var gamma, ad::Var nu) {
    return run_base(*this, g, x, gamma, nu);
}
ad::Var ColorCorrector::correct_with(ad::Graph& g, ad::Var x, ad::Var gamma, ad::Var nu) const {
    return run_base(*this, g, x, gamma, nu);
}

ad::Var ColorCorrector::correct(ad::Graph& g, ad::Var x, int t) {
    const Modulation m = cond_features(g, x, t);
    return correct_with(g, x, m.gamma, m.nu);
}
ad::Var ColorCorrector::correct(ad::Graph& g, ad::Var x, int t) const {
    const Modulation m = cond_features(g, x, t);
    return correct_with(g, x, m.gamma, m.nu);
}

Tensor ColorCorrector::correct(const Tensor& x, int t) const {
    ad::Graph g(ad::GradMode::disabled);
    bool squeezed = false;
    Tensor out = correct(g, as_batch(g, x, squeezed), t).value();
    return squeezed ? out.reshaped(x.shape()) : out;
}

std::pair<Tensor, Tensor> ColorCorrector::cond_features(const Tensor& x, int t) const {
    ad::Graph g(ad::GradMode::disabled);
    bool squeezed = false;
    const Modulation m = cond_features(g, as_batch(g, x, squeezed), t);
    return {m.gamma.value(), m.nu.value()};
}

std::vector<ad::Parameter*> ColorCorrector::parameters() {
    std::vector<ad::Parameter*> out;
    for (auto& l : base_) out.insert(out.end(), {&l.weight, &l.bias});
    for (auto& l : cond_) out.insert(out.end(), {&l.weight, &l.bias});
    out.insert(out.end(), {&gamma_head_.weight, &gamma_head_.bias, &nu_head_.weight, &nu_head_.bias});
    return out;
}

std::vector<const ad::Parameter*> ColorCorrector::parameters() const {
    auto params = const_cast<ColorCorrector*>(this)->parameters();
    return {params.begin(), params.end()};
}

std::map<std::string, Tensor> ColorCorrector::state() const {
    std::map<std::string, Tensor> out;
    for (const auto* p : parameters()) out.emplace(p->name(), p->value());
    return out;
}

ColorCorrector ColorCorrector::from_state(const ColorCorrectorConfig& config, const std::map<std::string, Tensor>& tensors,
                                          const std::string& prefix) {
    ColorCorrector cc(config, 0);
    for (auto* p : cc.parameters()) {
        const auto it = tensors.find(prefix + p->name());
        if (it == tensors.end()) throw DataError("color corrector state: missing tensor '" + prefix + p->name() + "'");
        if (it->second.shape() != p->value().shape())
            throw DataError("color corrector state: tensor '" + prefix + p->name() + "' has shape " +
                            to_string(it->second.shape()) + ", expected " + to_string(p->value().shape()));
        p->value() = it->second;
    }
    return cc;
}

} // namespace tsdiff
