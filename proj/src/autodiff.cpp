#include "tsdiff/autodiff.hpp"

#include "tsdiff/errors.hpp"

#include <Eigen/Core>

#include <cmath>
#include <numbers>
#include <string>

namespace tsdiff::ad {

using RowMat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;

Parameter::Parameter(std::string name, Tensor value) : name_(std::move(name)), value_(std::move(value)) {}

void Parameter::zero_grad() {
    grad_ = Tensor();
    touched_ = false;
}

std::string_view op_name(Op op) {
    switch (op) {
    case Op::constant: return "constant";
    case Op::parameter: return "parameter";
    case Op::conv2d: return "conv2d";
    case Op::conv2d_field: return "conv2d_field";
    case Op::channel_affine: return "channel_affine";
    case Op::modulate: return "modulate";
    case Op::add_channel_bias: return "add_channel_bias";
    case Op::relu: return "relu";
    case Op::dense: return "dense";
    case Op::global_avg_pool: return "global_avg_pool";
    case Op::avg_pool2: return "avg_pool2";
    case Op::upsample_nearest2: return "upsample_nearest2";
    case Op::add: return "add";
    case Op::mul: return "mul";
    case Op::concat_channels: return "concat_channels";
    case Op::sum: return "sum";
    case Op::mse: return "mse";
    case Op::mean_abs_diff: return "mean_abs_diff";
    case Op::scale: return "scale";
    }
    return "unknown";
}

const Tensor& Var::value() const { return graph_->value(index_); }
const Tensor& Var::grad() const { return graph_->grad(index_); }

// ---------------------------------------------------------------------------
// Graph

Var Graph::constant(Tensor value) {
    nodes_.push_back(Node{Op::constant, std::move(value), {}, {}, {}, nullptr, false});
    return Var(this, nodes_.size() - 1);
}

Var Graph::parameter(Parameter& p) {
    if (mode_ == GradMode::disabled || p.frozen()) return constant(p.value());
    nodes_.push_back(Node{Op::parameter, p.value(), {}, {}, {}, &p, true});
    return Var(this, nodes_.size() - 1);
}

Var Graph::parameter(const Parameter& p) { return constant(p.value()); }

Var Graph::record(Op op, Tensor value, std::vector<std::size_t> inputs, Backward backward) {
    bool needs = false;
    if (mode_ == GradMode::enabled)
        for (auto i : inputs) needs = needs || nodes_[i].requires_grad;
    if (!needs) backward = nullptr;
    nodes_.push_back(Node{op, std::move(value), {}, std::move(inputs), std::move(backward), nullptr, needs});
    return Var(this, nodes_.size() - 1);
}

Tensor& Graph::grad_accumulator(std::size_t i) {
    Node& node = nodes_[i];
    if (node.grad.empty()) node.grad = Tensor(node.value.shape(), 0.0f);
    return node.grad;
}

std::size_t Graph::count(Op op) const {
    std::size_t n = 0;
    for (const auto& node : nodes_) n += node.op == op ? 1 : 0;
    return n;
}

void Graph::backward(Var loss) {
    if (loss.graph_ != this) throw std::invalid_argument("backward: loss belongs to a different graph");
    if (loss.value().size() != 1)
        throw ShapeError("backward: loss must be a scalar, got shape " + to_string(loss.value().shape()));
    visits_ = 0;
    for (auto& node : nodes_) node.grad = Tensor();
    if (!nodes_[loss.index_].requires_grad) return;
    grad_accumulator(loss.index_)[0] = 1.0f;
    for (std::size_t i = loss.index_ + 1; i-- > 0;) {
        Node& node = nodes_[i];
        if (!node.requires_grad || node.grad.empty()) continue;
        ++visits_;
        if (node.param) {
            Parameter& p = *node.param;
            if (p.grad_.empty()) p.grad_ = Tensor(p.value_.shape(), 0.0f);
            for (std::size_t k = 0; k < node.grad.size(); ++k) p.grad_[k] += node.grad[k];
            p.touched_ = true;
        } else if (node.backward) {
            node.backward(*this, i);
        }
    }
}

// ---------------------------------------------------------------------------
// helpers

namespace {

Graph& same_graph(std::initializer_list<Var> vars, const char* op) {
    Graph* g = nullptr;
    for (const Var& v : vars) {
        if (!v.valid()) throw std::invalid_argument(std::string(op) + ": uninitialized operand");
        if (g && &v.graph() != g) throw std::invalid_argument(std::string(op) + ": operands from different graphs");
        g = &v.graph();
    }
    return *g;
}

void require_rank(const Tensor& t, std::size_t rank, const char* op, const char* operand) {
    if (t.rank() != rank)
        throw ShapeError(std::string(op) + ": " + operand + " must have rank " + std::to_string(rank) + ", got shape " +
                         to_string(t.shape()));
}

[[noreturn]] void mismatch(const char* op, const std::string& detail) {
    throw ShapeError(std::string(op) + ": " + detail);
}

void accumulate(Tensor& dst, const Tensor& src) {
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

struct ConvGeom {
    std::size_t n, cin, h, w, cout, k, stride, pad, ho, wo;
    std::size_t patch() const { return cin * k * k; }
    std::size_t pixels() const { return ho * wo; }
    bool direct() const { return k == 1 && stride == 1; }
};

ConvGeom conv_geometry(const Tensor& x, const Tensor& kernel, ConvOptions opt, const char* op) {
    require_rank(x, 4, op, "input");
    require_rank(kernel, 4, op, "kernel");
    const auto& xs = x.shape();
    const auto& ks = kernel.shape();
    if (ks[2] != ks[3] || (ks[2] != 1 && ks[2] != 3))
        mismatch(op, "kernel must be 1x1 or 3x3, got shape " + to_string(ks));
    if (ks[1] != xs[1])
        mismatch(op, "kernel expects " + std::to_string(ks[1]) + " input channels, got " + std::to_string(xs[1]) +
                         " (input " + to_string(xs) + ", kernel " + to_string(ks) + ")");
    if (opt.stride != 1 && opt.stride != 2) mismatch(op, "stride must be 1 or 2");
    ConvGeom g{xs[0], xs[1], xs[2], xs[3], ks[0], ks[2], opt.stride, 0, 0, 0};
    g.pad = opt.pad == PadMode::zero ? (g.k - 1) / 2 : 0;
    if (g.h + 2 * g.pad < g.k || g.w + 2 * g.pad < g.k)
        mismatch(op, "input " + to_string(xs) + " smaller than kernel " + to_string(ks));
    g.ho = (g.h + 2 * g.pad - g.k) / g.stride + 1;
    g.wo = (g.w + 2 * g.pad - g.k) / g.stride + 1;
    return g;
}

void im2col(const Scalar* x, const ConvGeom& g, Scalar* cols) {
    const std::size_t pixels = g.pixels();
    for (std::size_t c = 0; c < g.cin; ++c)
        for (std::size_t ki = 0; ki < g.k; ++ki)
            for (std::size_t kj = 0; kj < g.k; ++kj) {
                Scalar* row = cols + ((c * g.k + ki) * g.k + kj) * pixels;
                const Scalar* plane = x + c * g.h * g.w;
                for (std::size_t oy = 0; oy < g.ho; ++oy) {
                    const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride + ki) - static_cast<std::ptrdiff_t>(g.pad);
                    Scalar* out = row + oy * g.wo;
                    if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.h)) {
                        for (std::size_t ox = 0; ox < g.wo; ++ox) out[ox] = 0.0f;
                        continue;
                    }
                    const Scalar* src = plane + static_cast<std::size_t>(iy) * g.w;
                    for (std::size_t ox = 0; ox < g.wo; ++ox) {
                        const auto ix =
                            static_cast<std::ptrdiff_t>(ox * g.stride + kj) - static_cast<std::ptrdiff_t>(g.pad);
                        out[ox] = (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.w)) ? 0.0f : src[ix];
                    }
                }
            }
}

void col2im(const Scalar* cols, const ConvGeom& g, Scalar* dx) {
    const std::size_t pixels = g.pixels();
    for (std::size_t c = 0; c < g.cin; ++c)
        for (std::size_t ki = 0; ki < g.k; ++ki)
            for (std::size_t kj = 0; kj < g.k; ++kj) {
                const Scalar* row = cols + ((c * g.k + ki) * g.k + kj) * pixels;
                Scalar* plane = dx + c * g.h * g.w;
                for (std::size_t oy = 0; oy < g.ho; ++oy) {
                    const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride + ki) - static_cast<std::ptrdiff_t>(g.pad);
                    if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.h)) continue;
                    Scalar* dst = plane + static_cast<std::size_t>(iy) * g.w;
                    const Scalar* in = row + oy * g.wo;
                    for (std::size_t ox = 0; ox < g.wo; ++ox) {
                        const auto ix =
                            static_cast<std::ptrdiff_t>(ox * g.stride + kj) - static_cast<std::ptrdiff_t>(g.pad);
                        if (ix >= 0 && ix < static_cast<std::ptrdiff_t>(g.w)) dst[ix] += in[ox];
                    }
                }
            }
}

// out[n] = K * cols(x[n]); no bias.
Tensor conv_forward(const Tensor& x, const Tensor& kernel, const ConvGeom& g) {
    Tensor out({g.n, g.cout, g.ho, g.wo}, 0.0f);
    ConstMatMap K(kernel.data(), static_cast<Eigen::Index>(g.cout), static_cast<Eigen::Index>(g.patch()));
    std::vector<Scalar> cols(g.direct() ? 0 : g.patch() * g.pixels());
    for (std::size_t n = 0; n < g.n; ++n) {
        const Scalar* xn = x.data() + n * g.cin * g.h * g.w;
        if (!g.direct()) im2col(xn, g, cols.data());
        const Scalar* src = g.direct() ? xn : cols.data();
        ConstMatMap C(src, static_cast<Eigen::Index>(g.patch()), static_cast<Eigen::Index>(g.pixels()));
        MatMap Y(out.data() + n * g.cout * g.pixels(), static_cast<Eigen::Index>(g.cout),
                 static_cast<Eigen::Index>(g.pixels()));
        Y.noalias() = K * C;
    }
    return out;
}

// Accumulates kernel and input gradients given dY.
void conv_backward(const Tensor& x, const Tensor& kernel, const Tensor& dy, const ConvGeom& g, Tensor* dkernel,
                   Tensor* dx) {
    ConstMatMap K(kernel.data(), static_cast<Eigen::Index>(g.cout), static_cast<Eigen::Index>(g.patch()));
    std::vector<Scalar> cols(g.direct() ? 0 : g.patch() * g.pixels());
    std::vector<Scalar> dcols(dx && !g.direct() ? g.patch() * g.pixels() : 0);
    for (std::size_t n = 0; n < g.n; ++n) {
        const Scalar* xn = x.data() + n * g.cin * g.h * g.w;
        ConstMatMap dY(dy.data() + n * g.cout * g.pixels(), static_cast<Eigen::Index>(g.cout),
                       static_cast<Eigen::Index>(g.pixels()));
        if (dkernel) {
            if (!g.direct()) im2col(xn, g, cols.data());
            const Scalar* src = g.direct() ? xn : cols.data();
            ConstMatMap C(src, static_cast<Eigen::Index>(g.patch()), static_cast<Eigen::Index>(g.pixels()));
            MatMap dK(dkernel->data(), static_cast<Eigen::Index>(g.cout), static_cast<Eigen::Index>(g.patch()));
            dK.noalias() += dY * C.transpose();
        }
        if (dx) {
            Scalar* dxn = dx->data() + n * g.cin * g.h * g.w;
            if (g.direct()) {
                MatMap dX(dxn, static_cast<Eigen::Index>(g.cin), static_cast<Eigen::Index>(g.pixels()));
                dX.noalias() += K.transpose() * dY;
            } else {
                MatMap dC(dcols.data(), static_cast<Eigen::Index>(g.patch()), static_cast<Eigen::Index>(g.pixels()));
                dC.noalias() = K.transpose() * dY;
                col2im(dcols.data(), g, dxn);
            }
        }
    }
}

void check_bias(const Tensor& bias, std::size_t cout, const char* op) {
    if (bias.rank() != 1 || bias.dim(0) != cout)
        mismatch(op, "bias must have shape [" + std::to_string(cout) + "], got " + to_string(bias.shape()));
}

} // namespace

// ---------------------------------------------------------------------------
// convolution

Tensor conv2d(const Tensor& x, const Tensor& kernel, const Tensor& bias, ConvOptions options) {
    const ConvGeom g = conv_geometry(x, kernel, options, "conv2d");
    check_bias(bias, g.cout, "conv2d");
    Tensor out = conv_forward(x, kernel, g);
    Scalar* p = out.data();
    for (std::size_t n = 0; n < g.n; ++n)
        for (std::size_t o = 0; o < g.cout; ++o)
            for (std::size_t i = 0; i < g.pixels(); ++i) *p++ += bias[o];
    return out;
}

Var conv2d(Var x, Var kernel, Var bias, ConvOptions options) {
    Graph& graph = same_graph({x, kernel, bias}, "conv2d");
    const ConvGeom g = conv_geometry(x.value(), kernel.value(), options, "conv2d");
    Tensor out = conv2d(x.value(), kernel.value(), bias.value(), options);
    const std::size_t xi = x.index(), ki = kernel.index(), bi = bias.index();
    return graph.record(Op::conv2d, std::move(out), {xi, ki, bi}, [=](Graph& gr, std::size_t self) {
        const Tensor& dy = gr.grad(self);
        Tensor* dk = gr.requires_grad(ki) ? &gr.grad_accumulator(ki) : nullptr;
        Tensor* dx = gr.requires_grad(xi) ? &gr.grad_accumulator(xi) : nullptr;
        if (dk || dx) conv_backward(gr.value(xi), gr.value(ki), dy, g, dk, dx);
        if (gr.requires_grad(bi)) {
            Tensor& db = gr.grad_accumulator(bi);
            for (std::size_t o = 0; o < g.cout; ++o) {
                double acc = 0.0;
                for (std::size_t n = 0; n < g.n; ++n) {
                    const Scalar* row = dy.data() + (n * g.cout + o) * g.pixels();
                    for (std::size_t i = 0; i < g.pixels(); ++i) acc += row[i];
                }
                db[o] += static_cast<Scalar>(acc);
            }
        }
    });
}

Var conv2d_field(Var x, Var kernel, Var bias, const Tensor& border) {
    Graph& graph = same_graph({x, kernel, bias}, "conv2d_field");
    const ConvGeom g = conv_geometry(x.value(), kernel.value(), {1, PadMode::zero}, "conv2d_field");
    if (bias.shape() != Shape{g.cout})
        mismatch("conv2d_field", "bias must have shape [" + std::to_string(g.cout) + "], got " + to_string(bias.shape()));
    const Shape expected{g.cout, g.ho, g.wo};
    if (border.shape() != expected)
        mismatch("conv2d_field", "border field must have shape " + to_string(expected) + ", got " +
                                     to_string(border.shape()));
    Tensor out = conv_forward(x.value(), kernel.value(), g);
    const Tensor& b = bias.value();
    const std::size_t plane = g.ho * g.wo;
    for (std::size_t n = 0; n < g.n; ++n)
        for (std::size_t o = 0; o < g.cout; ++o) {
            Scalar* dst = out.data() + (n * g.cout + o) * plane;
            const Scalar* src = border.data() + o * plane;
            for (std::size_t i = 0; i < plane; ++i) dst[i] += b[o] + src[i];
        }
    const std::size_t xi = x.index(), ki = kernel.index(), bi = bias.index();
    return graph.record(Op::conv2d_field, std::move(out), {xi, ki, bi}, [=](Graph& gr, std::size_t self) {
        const Tensor& dy = gr.grad(self);
        Tensor* dk = gr.requires_grad(ki) ? &gr.grad_accumulator(ki) : nullptr;
        Tensor* dx = gr.requires_grad(xi) ? &gr.grad_accumulator(xi) : nullptr;
        if (dk || dx) conv_backward(gr.value(xi), gr.value(ki), dy, g, dk, dx);
        if (gr.requires_grad(bi)) {
            Tensor& db = gr.grad_accumulator(bi);
            for (std::size_t o = 0; o < g.cout; ++o) {
                double acc = 0.0;
                for (std::size_t n = 0; n < g.n; ++n) {
                    const Scalar* d = dy.data() + (n * g.cout + o) * plane;
                    for (std::size_t i = 0; i < plane; ++i) acc += d[i];
                }
                db[o] += static_cast<Scalar>(acc);
            }
        }
    });
}

// ---------------------------------------------------------------------------
// per-channel transforms

Var channel_affine(Var x, Var w, Var b) {
    Graph& graph = same_graph({x, w, b}, "channel_affine");
    require_rank(x.value(), 4, "channel_affine", "input");
    const auto& s = x.shape();
    const std::size_t N = s[0], C = s[1], HW = s[2] * s[3];
    if (w.shape() != Shape{C} || b.shape() != Shape{C})
        mismatch("channel_affine", "expected w and b of shape [" + std::to_string(C) + "], got " +
                                       to_string(w.shape()) + " and " + to_string(b.shape()));
    Tensor out(s);
    const Tensor &xv = x.value(), &wv = w.value(), &bv = b.value();
    for (std::size_t n = 0; n < N; ++n)
        for (std::size_t c = 0; c < C; ++c) {
            const std::size_t base = (n * C + c) * HW;
            for (std::size_t i = 0; i < HW; ++i) out[base + i] = wv[c] * xv[base + i] + bv[c];
        }
    const std::size_t xi = x.index(), wi = w.index(), bi = b.index();
    return graph.record(Op::channel_affine, std::move(out), {xi, wi, bi}, [=](Graph& gr, std::size_t self) {
        const Tensor& dy = gr.grad(self);
        const Tensor& xv2 = gr.value(xi);
        const Tensor& wv2 = gr.value(wi);
        const bool gx = gr.requires_grad(xi), gw = gr.requires_grad(wi), gb = gr.requires_grad(bi);
        Tensor* dx = gx ? &gr.grad_accumulator(xi) : nullptr;
        for (std::size_t c = 0; c < C; ++c) {
            double sw = 0.0, sb = 0.0;
            for (std::size_t n = 0; n < N; ++n) {
                const std::size_t base = (n * C + c) * HW;
                for (std::size_t i = 0; i < HW; ++i) {
                    const Scalar d = dy[base + i];
                    sw += static_cast<double>(d) * xv2[base + i];
                    sb += d;
                    if (dx) (*dx)[base + i] += d * wv2[c];
                }
            }
            if (gw) gr.grad_accumulator(wi)[c] += static_cast<Scalar>(sw);
            if (gb) gr.grad_accumulator(bi)[c] += static_cast<Scalar>(sb);
        }
    });
}

Var modulate(Var x, Var gamma, Var nu) {
    Graph& graph = same_graph({x, gamma, nu}, "modulate");
    require_rank(x.value(), 4, "modulate", "input");
    const auto& s = x.shape();
    const std::size_t N = s[0], C = s[1], HW = s[2] * s[3];
    const Shape expected{N, C};
    if (gamma.shape() != expected || nu.shape() != expected)
        mismatch("modulate", "expected gamma and nu of shape " + to_string(expected) + ", got " +
                                 to_string(gamma.shape()) + " and " + to_string(nu.shape()));
    Tensor out(s);
    const Tensor &xv = x.value(), &gv = gamma.value(), &nv = nu.value();
    for (std::size_t nc = 0; nc < N * C; ++nc)
        for (std::size_t i = 0; i < HW; ++i) out[nc * HW + i] = gv[nc] * xv[nc * HW + i] + nv[nc];
    const std::size_t xi = x.index(), gi = gamma.index(), ni = nu.index();
    return graph.record(Op::modulate, std::move(out), {xi, gi, ni}, [=](Graph& gr, std::size_t self) {
        const Tensor& dy = gr.grad(self);
        const Tensor& xv2 = gr.value(xi);
        const Tensor& gv2 = gr.value(gi);
        Tensor* dx = gr.requires_grad(xi) ? &gr.grad_accumulator(xi) : nullptr;
        const bool gg = gr.requires_grad(gi), gn = gr.requires_grad(ni);
        for (std::size_t nc = 0; nc < N * C; ++nc) {
            double sg = 0.0, sn = 0.0;
            for (std::size_t i = 0; i < HW; ++i) {
                const Scalar d = dy[nc * HW + i];
                sg += static_cast<double>(d) * xv2[nc * HW + i];
                sn += d;
                if (dx) (*dx)[nc * HW + i] += d * gv2[nc];
            }
            if (gg) gr.grad_accumulator(gi)[nc] += static_cast<Scalar>(sg);
            if (gn) gr.grad_accumulator(ni)[nc] += static_cast<Scalar>(sn);
        }
    });
}

Var add_channel_bias(Var x, Var b) {
    Graph& graph = same_graph({x, b}, "add_channel_bias");
    require_rank(x.value(), 4, "add_channel_bias", "input");
    const auto& s = x.shape();
    const std::size_t N = s[0], C = s[1], HW = s[2] * s[3];
    if (b.shape() != Shape{N, C})
        mismatch("add_channel_bias", "expected bias of shape " + to_string(Shape{N, C}) + ", got " + to_string(b.shape()));
    Tensor out = x.value();
    const Tensor& bv = b.value();
    for (std::size_t nc = 0; nc < N * C; ++nc)
        for (std::size_t i = 0; i < HW; ++i) out[nc * HW + i] += bv[nc];
    const std::size_t xi = x.index(), bi = b.index();
    return graph.record(Op::add_channel_bias, std::move(out), {xi, bi}, [=](Graph& gr, std::size_t self) {
        const Tensor& dy = gr.grad(self);
        if (gr.requires_grad(xi)) accumulate(gr.grad_accumulator(xi), dy);
        if (gr.requires_grad(bi)) {
            Tensor& db = gr.grad_accumulator(bi);
            for (std::size_t nc = 0; nc < N * C; ++nc) {
                double acc = 0.0;
                for (std::size_t i = 0; i < HW; ++i) acc += dy[nc * HW + i];
                db[nc] += static_cast<Scalar>(acc);
            }
        }
    });
}

// ---------------------------------------------------------------------------
// pointwise / structural

Var relu(Var x) {
    Graph& graph = same_graph({x}, "relu");
    Tensor out = x.value();
    for (Scalar& v : out.values()) v = v > 0.0f ? v : 0.0f;
    const std::size_t xi = x.index();
    return graph.record(Op::relu, std::move(out), {xi}, [=](Graph& gr, std::size_t self) {
        const Tensor& dy = gr.grad(self);
        const Tensor& xv = gr.value(xi);
        Tensor& dx = gr.grad_accumulator(xi);
        for (std::size_t i = 0; i < dx.size(); ++i)
            if (xv[i] > 0.0f) dx[i] += dy[i];
    });
}

Var dense(Var x, Var weight, Var bias) {
    Graph& graph = same_graph({x, weight, bias}, "dense");
    require_rank(x.value(), 2, "dense", "input");
    require_rank(weight.value(), 2, "dense", "weight");
    const std::size_t N = x.shape()[0], In = x.shape()[1], Out = weight.shape()[0];
    if (weight.shape()[1] != In)
        mismatch("dense", "weight " + to_string(weight.shape()) + " does not accept input " + to_string(x.shape()));
    check_bias(bias.value(), Out, "dense");
    Tensor out({N, Out});
    {
        ConstMatMap X(x.value().data(), static_cast<Eigen::Index>(N), static_cast<Eigen::Index>(In));
        ConstMatMap Wm(weight.value().data(), static_cast<Eigen::Index>(Out), static_cast<Eigen::Index>(In));
        MatMap Y(out.data(), static_cast<Eigen::Index>(N), static_cast<Eigen::Index>(Out));
        Y.noalias() = X * Wm.transpose();
        for (std::size_t n = 0; n < N; ++n)
            for (std::size_t o = 0; o < Out; ++o) out[n * Out + o] += bias.value()[o];
    }
    const std::size_t xi = x.index(), wi = weight.index(), bi = bias.index();
    return graph.record(Op::dense, std::move(out), {xi, wi, bi}, [=](Graph& gr, std::size_t self) {
        ConstMatMap dY(gr.grad(self).data(), static_cast<Eigen::Index>(N), static_cast<Eigen::Index>(Out));
        if (gr.requires_grad(xi)) {
            ConstMatMap Wm(gr.value(wi).data(), static_cast<Eigen::Index>(Out), static_cast<Eigen::Index>(In));
            MatMap dX(gr.grad_accumulator(xi).data(), static_cast<Eigen::Index>(N), static_cast<Eigen::Index>(In));
            dX.noalias() += dY * Wm;
        }
        if (gr.requires_grad(wi)) {
            ConstMatMap X(gr.value(xi).data(), static_cast<Eigen::Index>(N), static_cast<Eigen::Index>(In));
            MatMap dW(gr.grad_accumulator(wi).data(), static_cast<Eigen::Index>(Out), static_cast<Eigen::Index>(In));
            dW.noalias() += dY.transpose() * X;
        }
        if (gr.requires_grad(bi)) {
            Tensor& db = gr.grad_accumulator(bi);
            for (std::size_t o = 0; o < Out; ++o) {
                double acc = 0.0;
                for (std::size_t n = 0; n < N; ++n) acc += dY(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(o));
                db[o] += static_cast<Scalar>(acc);
            }
        }
    });
}

Var global_avg_pool(Var x) {
    Graph& graph = same_graph({x}, "global_avg_pool");
    require_rank(x.value(), 4, "global_avg_pool", "input");
    const auto& s = x.shape();
    const std::size_t NC = s[0] * s[1], HW = s[2] * s[3];
    Tensor out({s[0], s[1]});
    for (std::size_t nc = 0; nc < NC; ++nc) {
        double acc = 0.0;
        for (std::size_t i = 0; i < HW; ++i) acc += x.value()[nc * HW + i];
        out[nc] = static_cast<Scalar>(acc / static_cast<double>(HW));
    }
    const std::size_t xi = x.index();
    return graph.record(Op::global_avg_pool, std::move(out), {xi}, [=](Graph& gr, std::size_t self) {
        const Tensor& dy = gr.grad(self);
        Tensor& dx = gr.grad_accumulator(xi);
        const Scalar inv = 1.0f / static_cast<Scalar>(HW);
        for (std::size_t nc = 0; nc < NC; ++nc)
            for (std::size_t i = 0; i < HW; ++i) dx[nc * HW + i] += dy[nc] * inv;
    });
}

Var avg_pool2(Var x) {
    Graph& graph = same_graph({x}, "avg_pool2");
    require_rank(x.value(), 4, "avg_pool2", "input");
    const auto& s = x.shape();
    if (s[2] % 2 || s[3] % 2) mismatch("avg_pool2", "spatial dims must be even, got " + to_string(s));
    const std::size_t NC = s[0] * s[1], H = s[2], W = s[3], Ho = H / 2, Wo = W / 2;
    Tensor out({s[0], s[1], Ho, Wo});
    const Tensor& xv = x.value();
    for (std::size_t nc = 0; nc < NC; ++nc)
        for (std::size_t y = 0; y < Ho; ++y)
            for (std::size_t xx = 0; xx < Wo; ++xx) {
                const Scalar* p = xv.data() + (nc * H + 2 * y) * W + 2 * xx;
                const double acc = static_cast<double>(p[0]) + p[1] + p[W] + p[W + 1];
                out[(nc * Ho + y) * Wo + xx] = static_cast<Scalar>(acc * 0.25);
            }
    const std::size_t xi = x.index();
    return graph.record(Op::avg_pool2, std::move(out), {xi}, [=](Graph& gr, std::size_t self) {
        const Tensor& dy = gr.grad(self);
        Tensor& dx = gr.grad_accumulator(xi);
        for (std::size_t nc = 0; nc < NC; ++nc)
            for (std::size_t y = 0; y < Ho; ++y)
                for (std::size_t xx = 0; xx < Wo; ++xx) {
                    const Scalar d = 0.25f * dy[(nc * Ho + y) * Wo + xx];
                    Scalar* p = dx.data() + (nc * H + 2 * y) * W + 2 * xx;
                    p[0] += d;
                    p[1] += d;
                    p[W] += d;
                    p[W + 1] += d;
                }
    });
}

Var upsample_nearest2(Var x) {
    Graph& graph = same_graph({x}, "upsample_nearest2");
    require_rank(x.value(), 4, "upsample_nearest2", "input");
    const auto& s = x.shape();
    const std::size_t NC = s[0] * s[1], H = s[2], W = s[3], Ho = 2 * H, Wo = 2 * W;
    Tensor out({s[0], s[1], Ho, Wo});
    const Tensor& xv = x.value();
    for (std::size_t nc = 0; nc < NC; ++nc)
        for (std::size_t y = 0; y < Ho; ++y)
            for (std::size_t xx = 0; xx < Wo; ++xx) out[(nc * Ho + y) * Wo + xx] = xv[(nc * H + y / 2) * W + xx / 2];
    const std::size_t xi = x.index();
    return graph.record(Op::upsample_nearest2, std::move(out), {xi}, [=](Graph& gr, std::size_t self) {
        const Tensor& dy = gr.grad(self);
        Tensor& dx = gr.grad_accumulator(xi);
        for (std::size_t nc = 0; nc < NC; ++nc)
            for (std::size_t y = 0; y < H; ++y)
                for (std::size_t xx = 0; xx < W; ++xx) {
                    const Scalar* p = dy.data() + (nc * Ho + 2 * y) * Wo + 2 * xx;
                    const double acc = static_cast<double>(p[0]) + p[1] + p[Wo] + p[Wo + 1];
                    dx[(nc * H + y) * W + xx] += static_cast<Scalar>(acc);
                }
    });
}

Var add(Var a, Var b) {
    Graph& graph = same_graph({a, b}, "add");
    if (a.shape() != b.shape())
        mismatch("add", "shape mismatch " + to_string(a.shape()) + " vs " + to_string(b.shape()));
    Tensor out = a.value();
    accumulate(out, b.value());
    const std::size_t ai = a.index(), bi = b.index();
    return graph.record(Op::add, std::move(out), {ai, bi}, [=](Graph& gr, std::size_t self) {
        const Tensor& dy = gr.grad(self);
        if (gr.requires_grad(ai)) accumulate(gr.grad_accumulator(ai), dy);
        if (gr.requires_grad(bi)) accumulate(gr.grad_accumulator(bi), dy);
    });
}

Var mul(Var a, Var b) {
    Graph& graph = same_graph({a, b}, "mul");
    if (a.shape() != b.shape())
        mismatch("mul", "shape mismatch " + to_string(a.shape()) + " vs " + to_string(b.shape()));
    Tensor out = a.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
    const std::size_t ai = a.index(), bi = b.index();
    return graph.record(Op::mul, std::move(out), {ai, bi}, [=](Graph& gr, std::size_t self) {
        const Tensor& dy = gr.grad(self);
        if (gr.requires_grad(ai)) {
            Tensor& da = gr.grad_accumulator(ai);
            for (std::size_t i = 0; i < da.size(); ++i) da[i] += dy[i] * gr.value(bi)[i];
        }
        if (gr.requires_grad(bi)) {
            Tensor& db = gr.grad_accumulator(bi);
            for (std::size_t i = 0; i < db.size(); ++i) db[i] += dy[i] * gr.value(ai)[i];
        }
    });
}

Var concat_channels(Var a, Var b) {
    Graph& graph = same_graph({a, b}, "concat_channels");
    require_rank(a.value(), 4, "concat_channels", "first operand");
    require_rank(b.value(), 4, "concat_channels", "second operand");
    const auto& sa = a.shape();
    const auto& sb = b.shape();
    if (sa[0] != sb[0] || sa[2] != sb[2] || sa[3] != sb[3])
        mismatch("concat_channels", "batch/spatial mismatch " + to_string(sa) + " vs " + to_string(sb));
    const std::size_t N = sa[0], Ca = sa[1], Cb = sb[1], HW = sa[2] * sa[3];
    Tensor out({N, Ca + Cb, sa[2], sa[3]});
    for (std::size_t n = 0; n < N; ++n) {
        std::copy_n(a.value().data() + n * Ca * HW, Ca * HW, out.data() + n * (Ca + Cb) * HW);
        std::copy_n(b.value().data() + n * Cb * HW, Cb * HW, out.data() + (n * (Ca + Cb) + Ca) * HW);
    }
    const std::size_t ai = a.index(), bi = b.index();
    return graph.record(Op::concat_channels, std::move(out), {ai, bi}, [=](Graph& gr, std::size_t self) {
        const Tensor& dy = gr.grad(self);
        for (std::size_t n = 0; n < N; ++n) {
            if (gr.requires_grad(ai)) {
                Scalar* da = gr.grad_accumulator(ai).data() + n * Ca * HW;
                const Scalar* src = dy.data() + n * (Ca + Cb) * HW;
                for (std::size_t i = 0; i < Ca * HW; ++i) da[i] += src[i];
            }
            if (gr.requires_grad(bi)) {
                Scalar* db = gr.grad_accumulator(bi).data() + n * Cb * HW;
                const Scalar* src = dy.data() + (n * (Ca + Cb) + Ca) * HW;
                for (std::size_t i = 0; i < Cb * HW; ++i) db[i] += src[i];
            }
        }
    });
}

// ---------------------------------------------------------------------------
// reductions

Var sum(Var x) {
    Graph& graph = same_graph({x}, "sum");
    double acc = 0.0;
    for (Scalar v : x.value().values()) acc += v;
    const std::size_t xi = x.index();
    return graph.record(Op::sum, Tensor::scalar(static_cast<Scalar>(acc)), {xi}, [=](Graph& gr, std::size_t self) {
        const Scalar d = gr.grad(self)[0];
        Tensor& dx = gr.grad_accumulator(xi);
        for (Scalar& v : dx.values()) v += d;
    });
}

Var mse(Var a, Var b) {
    Graph& graph = same_graph({a, b}, "mse");
    if (a.shape() != b.shape())
        mismatch("mse", "shape mismatch " + to_string(a.shape()) + " vs " + to_string(b.shape()));
    const std::size_t n = a.value().size();
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double d = static_cast<double>(a.value()[i]) - b.value()[i];
        acc += d * d;
    }
    const std::size_t ai = a.index(), bi = b.index();
    return graph.record(Op::mse, Tensor::scalar(static_cast<Scalar>(acc / static_cast<double>(n))), {ai, bi},
                        [=](Graph& gr, std::size_t self) {
                            const Scalar k = 2.0f * gr.grad(self)[0] / static_cast<Scalar>(n);
                            const Tensor& av = gr.value(ai);
                            const Tensor& bv = gr.value(bi);
                            Tensor* da = gr.requires_grad(ai) ? &gr.grad_accumulator(ai) : nullptr;
                            Tensor* db = gr.requires_grad(bi) ? &gr.grad_accumulator(bi) : nullptr;
                            for (std::size_t i = 0; i < n; ++i) {
                                const Scalar d = k * (av[i] - bv[i]);
                                if (da) (*da)[i] += d;
                                if (db) (*db)[i] -= d;
                            }
                        });
}

Var mean_abs_diff(Var a, Var b) {
    Graph& graph = same_graph({a, b}, "mean_abs_diff");
    if (a.shape() != b.shape())
        mismatch("mean_abs_diff", "shape mismatch " + to_string(a.shape()) + " vs " + to_string(b.shape()));
    const std::size_t n = a.value().size();
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i) acc += std::abs(static_cast<double>(a.value()[i]) - b.value()[i]);
    const std::size_t ai = a.index(), bi = b.index();
    return graph.record(Op::mean_abs_diff, Tensor::scalar(static_cast<Scalar>(acc / static_cast<double>(n))), {ai, bi},
                        [=](Graph& gr, std::size_t self) {
                            const Scalar k = gr.grad(self)[0] / static_cast<Scalar>(n);
                            const Tensor& av = gr.value(ai);
                            const Tensor& bv = gr.value(bi);
                            Tensor* da = gr.requires_grad(ai) ? &gr.grad_accumulator(ai) : nullptr;
                            Tensor* db = gr.requires_grad(bi) ? &gr.grad_accumulator(bi) : nullptr;
                            for (std::size_t i = 0; i < n; ++i) {
                                const Scalar diff = av[i] - bv[i];
                                const Scalar d = diff > 0.0f ? k : (diff < 0.0f ? -k : 0.0f);
                                if (da) (*da)[i] += d;
                                if (db) (*db)[i] -= d;
                            }
                        });
}

Var scale(Var x, Scalar factor) {
    Graph& graph = same_graph({x}, "scale");
    Tensor out = x.value();
    for (Scalar& v : out.values()) v *= factor;
    const std::size_t xi = x.index();
    return graph.record(Op::scale, std::move(out), {xi}, [=](Graph& gr, std::size_t self) {
        const Tensor& dy = gr.grad(self);
        Tensor& dx = gr.grad_accumulator(xi);
        for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += factor * dy[i];
    });
}

// ---------------------------------------------------------------------------
// embeddings

Tensor sinusoidal_embedding(double t, std::size_t dim, std::size_t batch) {
    if (dim < 2 || dim % 2) throw ShapeError("sinusoidal_embedding: dim must be even and >= 2");
    const std::size_t half = dim / 2;
    Tensor out({batch, dim});
    for (std::size_t i = 0; i < half; ++i) {
        const double freq = std::exp(-std::log(10000.0) * static_cast<double>(i) / static_cast<double>(half));
        const auto s = static_cast<Scalar>(std::sin(t * freq));
        const auto c = static_cast<Scalar>(std::cos(t * freq));
        for (std::size_t n = 0; n < batch; ++n) {
            out[n * dim + i] = s;
            out[n * dim + half + i] = c;
        }
    }
    return out;
}

Var sinusoidal_embed(Graph& g, double t, std::size_t dim, std::size_t batch) {
    return g.constant(sinusoidal_embedding(t, dim, batch));
}

} // namespace tsdiff::ad
