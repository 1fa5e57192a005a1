#include "tsdiff/denoiser.hpp"

#include "tsdiff/errors.hpp"
#include "tsdiff/rng.hpp"

#include <cmath>
#include <stdexcept>

namespace tsdiff {

void DenoiserConfig::validate() const {
    if (image_channels == 0 || cond_channels == 0 || base_width == 0 || cameras == 0)
        throw std::invalid_argument("denoiser config: channel counts and camera count must be positive");
    if (time_dim < 2 || time_dim % 2) throw std::invalid_argument("denoiser config: time_dim must be even");
}

std::string_view to_string(DenoiserMode mode) {
    switch (mode) {
    case DenoiserMode::pretrain: return "pretrain";
    case DenoiserMode::aligned: return "aligned";
    case DenoiserMode::merged: return "merged";
    }
    return "?";
}

DenoiserMode parse_denoiser_mode(std::string_view text) {
    for (auto m : {DenoiserMode::pretrain, DenoiserMode::aligned, DenoiserMode::merged})
        if (to_string(m) == text) return m;
    throw DataError("unknown denoiser mode '" + std::string(text) + "'");
}

// ---------------------------------------------------------------------------
// structural reparameterization

Tensor cfi_tap_bias(const Tensor& cfi_bias, const Tensor& kernel) {
    const auto& ks = kernel.shape();
    if (ks.size() != 4 || cfi_bias.shape() != Shape{ks[1]})
        throw ShapeError("cfi_tap_bias: bias " + to_string(cfi_bias.shape()) + " vs kernel " + to_string(ks));
    const std::size_t cout = ks[0], cin = ks[1], taps = ks[2] * ks[3];
    Tensor out({cout, ks[2], ks[3]});
    for (std::size_t o = 0; o < cout; ++o)
        for (std::size_t tap = 0; tap < taps; ++tap) {
            double acc = 0.0;
            for (std::size_t c = 0; c < cin; ++c)
                acc += static_cast<double>(kernel[(o * cin + c) * taps + tap]) * cfi_bias[c];
            out[o * taps + tap] = static_cast<Scalar>(acc);
        }
    return out;
}

Tensor expand_bias_field(const Tensor& bias, const Tensor& tap_bias, std::size_t height, std::size_t width) {
    const auto& ts = tap_bias.shape();
    if (ts.size() != 3 || ts[1] != ts[2] || bias.shape() != Shape{ts[0]})
        throw ShapeError("expand_bias_field: bias " + to_string(bias.shape()) + " vs taps " + to_string(ts));
    const std::size_t cout = ts[0], k = ts[1];
    const auto pad = static_cast<std::ptrdiff_t>((k - 1) / 2);
    const auto H = static_cast<std::ptrdiff_t>(height), W = static_cast<std::ptrdiff_t>(width);
    Tensor field({cout, height, width});
    for (std::size_t o = 0; o < cout; ++o)
        for (std::ptrdiff_t y = 0; y < H; ++y)
            for (std::ptrdiff_t x = 0; x < W; ++x) {
                double acc = bias[o];
                for (std::size_t i = 0; i < k; ++i) {
                    const auto iy = y + static_cast<std::ptrdiff_t>(i) - pad;
                    if (iy < 0 || iy >= H) continue;
                    for (std::size_t j = 0; j < k; ++j) {
                        const auto ix = x + static_cast<std::ptrdiff_t>(j) - pad;
                        if (ix >= 0 && ix < W) acc += tap_bias[(o * k + i) * k + j];
                    }
                }
                field[(o * height + static_cast<std::size_t>(y)) * width + static_cast<std::size_t>(x)] =
                    static_cast<Scalar>(acc);
            }
    return field;
}

namespace {

Tensor scale_kernel_inputs(const Tensor& kernel, const Tensor& w) {
    const auto& ks = kernel.shape();
    if (ks.size() != 4 || w.shape() != Shape{ks[1]})
        throw ShapeError("merge: CFI weight " + to_string(w.shape()) + " vs kernel " + to_string(ks));
    Tensor out = kernel;
    const std::size_t taps = ks[2] * ks[3];
    for (std::size_t o = 0; o < ks[0]; ++o)
        for (std::size_t c = 0; c < ks[1]; ++c)
            for (std::size_t tap = 0; tap < taps; ++tap) out[(o * ks[1] + c) * taps + tap] *= w[c];
    return out;
}

} // namespace

MergedConv merge_cfi_conv(const Tensor& cfi_weight, const Tensor& cfi_bias, const Tensor& kernel,
                          const Tensor& bias, std::size_t height, std::size_t width, ad::PadMode pad) {
    if (pad != ad::PadMode::zero)
        throw std::invalid_argument("merge_cfi_conv: only zero-padded convolutions can absorb a CFI exactly");
    if (bias.shape() != Shape{kernel.dim(0)})
        throw ShapeError("merge_cfi_conv: bias " + to_string(bias.shape()) + " vs kernel " + to_string(kernel.shape()));
    return {scale_kernel_inputs(kernel, cfi_weight),
            expand_bias_field(bias, cfi_tap_bias(cfi_bias, kernel), height, width)};
}

Tensor apply_merged(const Tensor& x, const MergedConv& merged) {
    ad::Graph g(ad::GradMode::disabled);
    return ad::conv2d_field(g.constant(x), g.constant(merged.kernel), g.constant(Tensor({merged.kernel.dim(0)}, 0.0f)),
                            merged.bias_field)
        .value();
}

// ---------------------------------------------------------------------------
// model

namespace {

Tensor he_normal(Shape shape, std::size_t fan_in, double gain, Rng& rng) {
    Tensor t(std::move(shape));
    const double stddev = gain * std::sqrt(2.0 / static_cast<double>(fan_in));
    for (Scalar& v : t.values()) v = static_cast<Scalar>(stddev * rng.normal());
    return t;
}

CfiPathway identity_pathway(const std::string& prefix, std::size_t channels) {
    return {ad::Parameter(prefix + ".weight", Tensor({channels}, 1.0f)),
            ad::Parameter(prefix + ".bias", Tensor({channels}, 0.0f))};
}

} // namespace

DenoiserModel::DenoiserModel(DenoiserConfig config, std::uint64_t seed) : config_(config) {
    config_.validate();
    Rng rng(seed);
    const std::size_t w = config_.base_width, in = config_.image_channels + config_.cond_channels;
    struct Spec {
        const char* name;
        std::size_t cin, cout;
        bool time;
    };
    const Spec specs[] = {{"enc1", in, w, true},        {"enc2", w, w, false},  {"mid1", w, 2 * w, true},
                          {"mid2", 2 * w, 2 * w, false}, {"dec1", 3 * w, w, true}, {"dec2", w, w, false}};
    for (const auto& s : specs) {
        ConvBlock b;
        b.name = s.name;
        b.kernel = ad::Parameter(b.name + ".kernel", he_normal({s.cout, s.cin, 3, 3}, s.cin * 9, 1.0, rng));
        b.bias = ad::Parameter(b.name + ".bias", Tensor({s.cout}, 0.0f));
        for (std::size_t i = 1; i <= config_.cameras; ++i)
            b.pathways.push_back(identity_pathway(b.name + ".cfi." + std::to_string(i), s.cin));
        b.time_projection = s.time;
        if (s.time) {
            b.time_weight = ad::Parameter(b.name + ".time.weight",
                                          he_normal({s.cout, config_.time_dim}, config_.time_dim, 0.5, rng));
            b.time_bias = ad::Parameter(b.name + ".time.bias", Tensor({s.cout}, 0.0f));
        }
        blocks_.push_back(std::move(b));
    }
    time_weight_ = ad::Parameter("time.weight", he_normal({config_.time_dim, config_.time_dim}, config_.time_dim, 0.5, rng));
    time_bias_ = ad::Parameter("time.bias", Tensor({config_.time_dim}, 0.0f));
    out_kernel_ = ad::Parameter("out.kernel", he_normal({config_.image_channels, w, 1, 1}, w, 0.1, rng));
    out_bias_ = ad::Parameter("out.bias", Tensor({config_.image_channels}, 0.0f));
}

template <class Self>
ad::Var DenoiserModel::run(Self& self, ad::Graph& g, ad::Var x_t, ad::Var cond, int t, Route route) {
    const auto& xs = x_t.shape();
    if (xs.size() != 4 || xs[1] != self.config_.image_channels)
        throw ShapeError("denoiser: x_t must be [N," + std::to_string(self.config_.image_channels) + ",H,W], got " +
                         to_string(xs));
    const auto& cs = cond.shape();
    if (cs.size() != 4 || cs[0] != xs[0] || cs[1] != self.config_.cond_channels || cs[2] != xs[2] || cs[3] != xs[3])
        throw ShapeError("denoiser: condition " + to_string(cs) + " does not match x_t " + to_string(xs));
    if (xs[2] % 2 || xs[3] % 2) throw ShapeError("denoiser: spatial dims must be even, got " + to_string(xs));

    if (self.mode_ == DenoiserMode::pretrain) {
        if (route.kind() == Route::Kind::target)
            throw ModeError("denoiser: no target CFI before average_cfis(); route through a camera pathway");
        if (route.kind() == Route::Kind::camera && (route.index() < 1 || route.index() > self.config_.cameras))
            throw std::out_of_range("denoiser: camera " + std::to_string(route.index()) + " outside 1.." +
                                    std::to_string(self.config_.cameras));
    }

    const std::size_t batch = xs[0];
    ad::Var temb = ad::relu(ad::dense(ad::sinusoidal_embed(g, t, self.config_.time_dim, batch),
                                      g.parameter(self.time_weight_), g.parameter(self.time_bias_)));

    auto block = [&](auto& b, ad::Var x) {
        ad::Var y;
        if (self.mode_ == DenoiserMode::merged) {
            const Tensor border =
                expand_bias_field(Tensor({b.tap_bias.dim(0)}, 0.0f), b.tap_bias, x.shape()[2], x.shape()[3]);
            y = ad::conv2d_field(x, g.parameter(b.kernel), g.parameter(b.bias), border);
        } else {
            if (route.kind() != Route::Kind::bypass) {
                auto& path = self.mode_ == DenoiserMode::pretrain ? b.pathways[route.index() - 1] : *b.target;
                x = ad::channel_affine(x, g.parameter(path.weight), g.parameter(path.bias));
            }
            y = ad::conv2d(x, g.parameter(b.kernel), g.parameter(b.bias));
        }
        if (b.time_projection)
            y = ad::add_channel_bias(y, ad::dense(temb, g.parameter(b.time_weight), g.parameter(b.time_bias)));
        return ad::relu(y);
    };

    auto& bl = self.blocks_;
    ad::Var h = ad::concat_channels(x_t, cond);
    ad::Var skip = block(bl[1], block(bl[0], h));
    ad::Var mid = block(bl[3], block(bl[2], ad::avg_pool2(skip)));
    ad::Var up = ad::concat_channels(ad::upsample_nearest2(mid), skip);
    ad::Var dec = block(bl[5], block(bl[4], up));
    return ad::conv2d(dec, g.parameter(self.out_kernel_), g.parameter(self.out_bias_));
}

ad::Var DenoiserModel::forward(ad::Graph& g, ad::Var x_t, ad::Var cond, int t, Route route) {
    return run(*this, g, x_t, cond, t, route);
}

ad::Var DenoiserModel::forward(ad::Graph& g, ad::Var x_t, ad::Var cond, int t, Route route) const {
    return run(*this, g, x_t, cond, t, route);
}

Tensor DenoiserModel::predict(const Tensor& x_t, const Tensor& cond, int t, Route route) const {
    ad::Graph g(ad::GradMode::disabled);
    return forward(g, g.constant(x_t), g.constant(cond), t, route).value();
}

void DenoiserModel::average_cfis() {
    if (mode_ != DenoiserMode::pretrain)
        throw ModeError("average_cfis: model is already " + std::string(to_string(mode_)));
    for (auto& b : blocks_) {
        const std::size_t c = b.kernel.value().dim(1);
        CfiPathway target = identity_pathway(b.name + ".cfi_t", c);
        for (std::size_t ch = 0; ch < c; ++ch) {
            double sw = 0.0, sb = 0.0;
            for (const auto& p : b.pathways) {
                sw += p.weight.value()[ch];
                sb += p.bias.value()[ch];
            }
            const auto n = static_cast<double>(b.pathways.size());
            target.weight.value()[ch] = static_cast<Scalar>(sw / n);
            target.bias.value()[ch] = static_cast<Scalar>(sb / n);
        }
        b.target = std::move(target);
        b.pathways.clear();
    }
    mode_ = DenoiserMode::aligned;
}

void DenoiserModel::reparameterize() {
    if (mode_ != DenoiserMode::aligned)
        throw ModeError("reparameterize: requires an aligned model, this one is " + std::string(to_string(mode_)));
    for (auto& b : blocks_) {
        b.tap_bias = cfi_tap_bias(b.target->bias.value(), b.kernel.value());
        b.kernel.value() = scale_kernel_inputs(b.kernel.value(), b.target->weight.value());
        b.target.reset();
    }
    mode_ = DenoiserMode::merged;
}

void DenoiserModel::freeze_convs(bool frozen) {
    frozen_ = frozen;
    for (auto& b : blocks_) {
        b.kernel.set_frozen(frozen);
        b.bias.set_frozen(frozen);
        b.time_weight.set_frozen(frozen);
        b.time_bias.set_frozen(frozen);
    }
    time_weight_.set_frozen(frozen);
    time_bias_.set_frozen(frozen);
    out_kernel_.set_frozen(frozen);
    out_bias_.set_frozen(frozen);
}

std::vector<ad::Parameter*> DenoiserModel::parameters() {
    std::vector<ad::Parameter*> out;
    for (auto& b : blocks_) {
        out.push_back(&b.kernel);
        out.push_back(&b.bias);
        for (auto& p : b.pathways) {
            out.push_back(&p.weight);
            out.push_back(&p.bias);
        }
        if (b.target) {
            out.push_back(&b.target->weight);
            out.push_back(&b.target->bias);
        }
        if (b.time_projection) {
            out.push_back(&b.time_weight);
            out.push_back(&b.time_bias);
        }
    }
    out.insert(out.end(), {&time_weight_, &time_bias_, &out_kernel_, &out_bias_});
    return out;
}

std::vector<const ad::Parameter*> DenoiserModel::parameters() const {
    auto mutable_params = const_cast<DenoiserModel*>(this)->parameters();
    return {mutable_params.begin(), mutable_params.end()};
}

std::vector<ad::Parameter*> DenoiserModel::cfi_parameters() {
    std::vector<ad::Parameter*> out;
    for (auto& b : blocks_) {
        for (auto& p : b.pathways) out.insert(out.end(), {&p.weight, &p.bias});
        if (b.target) out.insert(out.end(), {&b.target->weight, &b.target->bias});
    }
    return out;
}

std::vector<ad::Parameter*> DenoiserModel::pathway_parameters(std::size_t camera) {
    if (mode_ != DenoiserMode::pretrain || camera < 1 || camera > config_.cameras)
        throw std::out_of_range("pathway_parameters: no pathway " + std::to_string(camera));
    std::vector<ad::Parameter*> out;
    for (auto& b : blocks_) out.insert(out.end(), {&b.pathways[camera - 1].weight, &b.pathways[camera - 1].bias});
    return out;
}

std::map<std::string, Tensor> DenoiserModel::state() const {
    std::map<std::string, Tensor> out;
    for (const auto* p : parameters()) out.emplace(p->name(), p->value());
    if (mode_ == DenoiserMode::merged)
        for (const auto& b : blocks_) out.emplace(b.name + ".tap_bias", b.tap_bias);
    return out;
}

DenoiserModel DenoiserModel::from_state(const DenoiserConfig& config, DenoiserMode mode,
                                        const std::map<std::string, Tensor>& tensors, const std::string& prefix) {
    DenoiserModel model(config, 0);
    if (mode != DenoiserMode::pretrain) model.average_cfis();
    if (mode == DenoiserMode::merged) {
        for (auto& b : model.blocks_) {
            b.tap_bias = Tensor({b.kernel.value().dim(0), 3, 3});
            b.target.reset();
        }
        model.mode_ = DenoiserMode::merged;
    }
    auto assign = [&](const std::string& name, Tensor& dst) {
        const auto it = tensors.find(prefix + name);
        if (it == tensors.end()) throw DataError("denoiser state: missing tensor '" + prefix + name + "'");
        if (it->second.shape() != dst.shape())
            throw DataError("denoiser state: tensor '" + prefix + name + "' has shape " +
                            to_string(it->second.shape()) + ", expected " + to_string(dst.shape()));
        dst = it->second;
    };
    for (auto* p : model.parameters()) assign(p->name(), p->value());
    if (mode == DenoiserMode::merged)
        for (auto& b : model.blocks_) assign(b.name + ".tap_bias", b.tap_bias);
    return model;
}

} // namespace tsdiff
