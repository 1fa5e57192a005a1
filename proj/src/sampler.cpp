#include "tsdiff/sampler.hpp"

#include "tsdiff/errors.hpp"

#include <png.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <thread>

namespace tsdiff {

Tensor reverse_process(const Tensor& cond, std::size_t image_channels, const DiffusionSchedule& sched,
                       const EpsPredictor& predict, const X0Corrector& correct, Rng& rng) {
    const auto& cs = cond.shape();
    if (cs.size() != 4) throw ShapeError("reverse_process: condition must be [N,C,H,W], got " + to_string(cs));
    const std::size_t top = sched.max_factor();
    if (cs[2] % top || cs[3] % top)
        throw ShapeError("reverse_process: resolution " + std::to_string(cs[2]) + "x" + std::to_string(cs[3]) +
                         " is not divisible by the largest downsampling factor " + std::to_string(top));

    const int T = sched.steps();
    Tensor x = rng.normal_tensor({cs[0], image_channels, cs[2] / top, cs[3] / top});
    Tensor cond_r = downsample(cond, top);
    std::size_t r = top;
    for (int t = T; t >= 1; --t) {
        if (sched.factor(t) != r) {
            r = sched.factor(t);
            cond_r = downsample(cond, r);
        }
        const Tensor eps_hat = predict(x, cond_r, t);
        require_same_shape(x, eps_hat, "reverse_process: predictor output");
        Tensor x0 = predict_x0(x, t, eps_hat, sched);
        for (Scalar& v : x0.values()) v = std::clamp(v, Scalar(0), Scalar(1));
        if (correct) x0 = correct(x0, t);

        const std::size_t r_prev = sched.factor(t - 1);
        Tensor z;
        if (r_prev != r) {
            const auto& s = x.shape();
            z = rng.normal_tensor({s[0], s[1], s[2] * r / r_prev, s[3] * r / r_prev});
        } else if (sched.sigma(t) > 0.0) {
            z = rng.normal_tensor(x.shape());
        } else {
            z = Tensor(x.shape(), 0.0f);
        }
        x = reverse_step(x, t, eps_hat, x0, z, sched);
    }
    for (Scalar& v : x.values()) v = std::clamp(v, Scalar(0), Scalar(1));
    return x;
}

PackedRaw enhance(const PackedRaw& noisy, double ratio, const DenoiserModel& model, const ColorCorrector* cc,
                  const DiffusionSchedule& sched, Rng& rng, Route route) {
    if (model.mode() == DenoiserMode::pretrain && route.kind() == Route::Kind::target)
        throw ModeError("enhance: a pretrain-mode model needs an explicit camera pathway");
    const auto& s = noisy.planes.shape();
    const std::size_t unit = 2 * sched.max_factor();
    if (s.size() != 3 || s[1] % unit || s[2] % unit)
        throw ShapeError("enhance: packed resolution " + to_string(s) + " must be divisible by " + std::to_string(unit));
    const Tensor cond = build_condition(amplify(noisy.planes, ratio));
    const Tensor cond4 = cond.reshaped({1, cond.dim(0), cond.dim(1), cond.dim(2)});

    EpsPredictor predict = [&](const Tensor& x_t, const Tensor& c, int t) { return model.predict(x_t, c, t, route); };
    X0Corrector correct;
    if (cc) correct = [cc](const Tensor& x0, int t) { return cc->correct(x0, t); };
    Tensor out = reverse_process(cond4, s[0], sched, predict, correct, rng);

    PackedRaw result{out.reshaped(s), noisy.meta};
    result.meta.exposure_ratio = 1.0;
    return result;
}

double psnr(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "psnr");
    double se = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double d = double(a[i]) - double(b[i]);
        se += d * d;
    }
    const double mse = se / static_cast<double>(a.size());
    if (mse == 0.0) return kPsnrCap;
    return std::min(kPsnrCap, 10.0 * std::log10(1.0 / mse));
}

double psnr(const PackedRaw& a, const PackedRaw& b) { return psnr(a.planes, b.planes); }

namespace {

constexpr std::size_t kWindow = 7;

// Summed-area table with a zero first row and column: (h+1) x (w+1).
std::vector<double> integral(const std::vector<double>& v, std::size_t h, std::size_t w) {
    std::vector<double> s((h + 1) * (w + 1), 0.0);
    for (std::size_t y = 0; y < h; ++y) {
        double row = 0.0;
        for (std::size_t x = 0; x < w; ++x) {
            row += v[y * w + x];
            s[(y + 1) * (w + 1) + x + 1] = s[y * (w + 1) + x + 1] + row;
        }
    }
    return s;
}

double ssim_plane(const Scalar* a, const Scalar* b, std::size_t h, std::size_t w) {
    const double c1 = 0.01 * 0.01, c2 = 0.03 * 0.03;
    const double np = kWindow * kWindow, cov_norm = np / (np - 1.0);
    std::vector<double> va(h * w), vb(h * w), aa(h * w), bb(h * w), ab(h * w);
    for (std::size_t i = 0; i < h * w; ++i) {
        va[i] = a[i];
        vb[i] = b[i];
        aa[i] = va[i] * va[i];
        bb[i] = vb[i] * vb[i];
        ab[i] = va[i] * vb[i];
    }
    const auto sa = integral(va, h, w), sb = integral(vb, h, w);
    const auto saa = integral(aa, h, w), sbb = integral(bb, h, w), sab = integral(ab, h, w);
    auto box = [&](const std::vector<double>& s, std::size_t y, std::size_t x) {
        const std::size_t W = w + 1, y1 = y + kWindow, x1 = x + kWindow;
        return (s[y1 * W + x1] - s[y * W + x1] - s[y1 * W + x] + s[y * W + x]) / np;
    };
    double total = 0.0;
    for (std::size_t y = 0; y + kWindow <= h; ++y)
        for (std::size_t x = 0; x + kWindow <= w; ++x) {
            const double ux = box(sa, y, x), uy = box(sb, y, x);
            const double vx = cov_norm * (box(saa, y, x) - ux * ux);
            const double vy = cov_norm * (box(sbb, y, x) - uy * uy);
            const double vxy = cov_norm * (box(sab, y, x) - ux * uy);
            total += ((2 * ux * uy + c1) * (2 * vxy + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
        }
    return total / static_cast<double>((h - kWindow + 1) * (w - kWindow + 1));
}

} // namespace

double ssim(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "ssim");
    if (a.rank() != 2 && a.rank() != 3) throw ShapeError("ssim: expected [H,W] or [C,H,W], got " + to_string(a.shape()));
    const std::size_t c = a.rank() == 3 ? a.dim(0) : 1, h = a.dim(a.rank() - 2), w = a.dim(a.rank() - 1);
    if (h < kWindow || w < kWindow)
        throw ShapeError("ssim: image " + to_string(a.shape()) + " is smaller than the 7x7 window");
    double total = 0.0;
    for (std::size_t ch = 0; ch < c; ++ch) total += ssim_plane(a.data() + ch * h * w, b.data() + ch * h * w, h, w);
    return total / static_cast<double>(c);
}

double ssim(const PackedRaw& a, const PackedRaw& b) { return ssim(a.planes, b.planes); }

double color_error(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "color_error");
    if (a.rank() != 3) throw ShapeError("color_error: expected [C,H,W], got " + to_string(a.shape()));
    const std::size_t c = a.dim(0), n = a.dim(1) * a.dim(2);
    double total = 0.0;
    for (std::size_t ch = 0; ch < c; ++ch) {
        double sa = 0.0, sb = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            sa += a[ch * n + i];
            sb += b[ch * n + i];
        }
        total += std::abs(sa - sb) / static_cast<double>(n);
    }
    return total / static_cast<double>(c);
}

namespace {

void mean_std(const std::vector<ImageScore>& v, double ImageScore::*field, double& mean, double& stddev) {
    double s = 0.0;
    for (const auto& x : v) s += x.*field;
    mean = s / static_cast<double>(v.size());
    double q = 0.0;
    for (const auto& x : v) q += (x.*field - mean) * (x.*field - mean);
    stddev = std::sqrt(q / static_cast<double>(v.size()));
}

} // namespace

EnhanceReport evaluate(const std::vector<EvalSample>& data, const DenoiserModel& model, const ColorCorrector& cc,
                       const DiffusionSchedule& sched, const EvalOptions& options) {
    if (data.empty()) throw DataError("evaluate: empty dataset");
    const auto start = std::chrono::steady_clock::now();
    EnhanceReport report;
    report.images.resize(data.size());
    std::vector<Tensor> outputs(data.size());

    auto run_one = [&](std::size_t i) {
        const EvalSample& s = data[i];
        Rng rng = Rng::stream(options.seed, i);
        const PackedRaw out =
            enhance(s.noisy, s.ratio, model, options.color_correction ? &cc : nullptr, sched, rng, options.route);
        const Tensor input = amplify(s.noisy.planes, s.ratio);
        ImageScore& score = report.images[i];
        score.name = s.name;
        score.psnr = psnr(out.planes, s.clean.planes);
        score.ssim = ssim(out.planes, s.clean.planes);
        score.color_error = color_error(out.planes, s.clean.planes);
        score.input_psnr = psnr(input, s.clean.planes);
        score.input_ssim = ssim(input, s.clean.planes);
        outputs[i] = out.planes;
    };

    const std::size_t threads = std::clamp<std::size_t>(options.threads, 1, data.size());
    if (threads == 1) {
        for (std::size_t i = 0; i < data.size(); ++i) run_one(i);
    } else {
        std::vector<std::thread> pool;
        std::vector<std::exception_ptr> errors(threads);
        for (std::size_t w = 0; w < threads; ++w)
            pool.emplace_back([&, w] {
                try {
                    for (std::size_t i = w; i < data.size(); i += threads) run_one(i);
                } catch (...) {
                    errors[w] = std::current_exception();
                }
            });
        for (auto& th : pool) th.join();
        for (auto& e : errors)
            if (e) std::rethrow_exception(e);
    }

    mean_std(report.images, &ImageScore::psnr, report.psnr_mean, report.psnr_std);
    mean_std(report.images, &ImageScore::ssim, report.ssim_mean, report.ssim_std);
    double unused = 0.0;
    mean_std(report.images, &ImageScore::color_error, report.color_error_mean, unused);
    mean_std(report.images, &ImageScore::input_psnr, report.input_psnr_mean, unused);
    report.runtime_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    if (options.outputs) *options.outputs = std::move(outputs);
    return report;
}

std::string format_report(const EnhanceReport& report) {
    std::string out;
    char buf[512];
    for (const auto& s : report.images) {
        std::snprintf(buf, sizeof buf,
                      "image name=%s psnr=%.6f ssim=%.6f color_error=%.6f input_psnr=%.6f input_ssim=%.6f\n",
                      s.name.c_str(), s.psnr, s.ssim, s.color_error, s.input_psnr, s.input_ssim);
        out += buf;
    }
    std::snprintf(buf, sizeof buf,
                  "summary count=%zu psnr_mean=%.6f psnr_std=%.6f ssim_mean=%.6f ssim_std=%.6f "
                  "color_error_mean=%.6f input_psnr_mean=%.6f\n",
                  report.images.size(), report.psnr_mean, report.psnr_std, report.ssim_mean, report.ssim_std,
                  report.color_error_mean, report.input_psnr_mean);
    out += buf;
    return out;
}

void write_preview(const Tensor& planes, const std::filesystem::path& path) {
    if (planes.rank() != 3 || planes.dim(0) != kPackedChannels)
        throw ShapeError("preview: expected [4,h,w] planes, got " + to_string(planes.shape()));
    const std::size_t h = planes.dim(1), w = planes.dim(2);
    std::vector<png_byte> rgb(h * w * 3);
    auto tone = [](double v) {
        return static_cast<png_byte>(std::lround(255.0 * std::pow(std::clamp(v, 0.0, 1.0), 1.0 / 2.2)));
    };
    for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x) {
            png_byte* px = &rgb[(y * w + x) * 3];
            px[0] = tone(planes.at(0, y, x));
            px[1] = tone(0.5 * (double(planes.at(1, y, x)) + double(planes.at(3, y, x))));
            px[2] = tone(planes.at(2, y, x));
        }

    std::FILE* fp = std::fopen(path.string().c_str(), "wb");
    if (!fp) throw DataError("preview: cannot write " + path.string());
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info || setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        std::fclose(fp);
        throw DataError("preview: libpng failed writing " + path.string());
    }
    png_init_io(png, fp);
    png_set_IHDR(png, info, static_cast<png_uint_32>(w), static_cast<png_uint_32>(h), 8, PNG_COLOR_TYPE_RGB,
                 PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    for (std::size_t y = 0; y < h; ++y) png_write_row(png, &rgb[y * w * 3]);
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
    std::fclose(fp);
}

} // namespace tsdiff
