#include "tsdiff/trainer.hpp"

#include "tsdiff/errors.hpp"

#include <algorithm>
#include <cmath>
#include <condition_variable>
#include <cstdio>
#include <deque>
#include <exception>
#include <mutex>
#include <thread>

namespace tsdiff {

void TrainConfig::validate() const {
    if (batch_size == 0) throw std::invalid_argument("train config: batch_size must be >= 1");
    if (crop % 4) throw std::invalid_argument("train config: crop must be divisible by 4");
    if (!(learning_rate > 0.0) || !std::isfinite(learning_rate) || !(align_learning_rate > 0.0) ||
        !std::isfinite(align_learning_rate))
        throw std::invalid_argument("train config: learning rate must be > 0");
    if (!(lambda_img >= 0.0)) throw std::invalid_argument("train config: lambda_img must be >= 0");
    if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0 && adam_eps > 0.0))
        throw std::invalid_argument("train config: need 0 <= beta < 1 and eps > 0");
    if (pretrain_iterations < 0 || align_iterations < 0)
        throw std::invalid_argument("train config: iteration counts must be >= 0");
    if (!std::is_sorted(milestones.begin(), milestones.end()))
        throw std::invalid_argument("train config: milestones must be ascending");
}

double TrainConfig::lr_at(int iteration) const {
    double lr = learning_rate;
    for (int m : milestones)
        if (iteration >= m) lr *= 0.5;
    return lr;
}

void Adam::step(const std::vector<ad::Parameter*>& params, double lr) {
    for (ad::Parameter* p : params) {
        if (p->frozen() || !p->touched()) continue;
        Slot& s = slots_[p->name()];
        if (s.m.empty()) {
            s.m = Tensor(p->value().shape(), 0.0f);
            s.v = Tensor(p->value().shape(), 0.0f);
        }
        ++s.steps;
        const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(s.steps));
        const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(s.steps));
        Tensor& w = p->value();
        const Tensor& g = p->grad();
        for (std::size_t i = 0; i < w.size(); ++i) {
            const double gi = g[i];
            const double m = beta1_ * s.m[i] + (1.0 - beta1_) * gi;
            const double v = beta2_ * s.v[i] + (1.0 - beta2_) * gi * gi;
            s.m[i] = static_cast<Scalar>(m);
            s.v[i] = static_cast<Scalar>(v);
            w[i] = static_cast<Scalar>(w[i] - lr * (m / c1) / (std::sqrt(v / c2) + eps_));
        }
    }
    for (ad::Parameter* p : params) p->zero_grad();
}

LossTerms diffusion_loss(ad::Var eps_hat, ad::Var eps, ad::Var x0_corrected, ad::Var x_rt0, double lambda_img) {
    if (!(lambda_img >= 0.0)) throw std::invalid_argument("loss: lambda_img must be >= 0");
    LossTerms terms;
    terms.eps = ad::mse(eps_hat, eps);
    terms.img = ad::mean_abs_diff(x0_corrected, x_rt0);
    terms.total = ad::add(terms.eps, ad::scale(terms.img, static_cast<Scalar>(lambda_img)));
    return terms;
}

double diffusion_loss(const Tensor& eps_hat, const Tensor& eps, const Tensor& x0_corrected, const Tensor& x_rt0,
                      double lambda_img) {
    require_same_shape(eps_hat, eps, "loss");
    require_same_shape(x0_corrected, x_rt0, "loss");
    if (!(lambda_img >= 0.0)) throw std::invalid_argument("loss: lambda_img must be >= 0");
    double se = 0.0, ae = 0.0;
    for (std::size_t i = 0; i < eps.size(); ++i) se += (double(eps_hat[i]) - eps[i]) * (double(eps_hat[i]) - eps[i]);
    for (std::size_t i = 0; i < x_rt0.size(); ++i) ae += std::abs(double(x0_corrected[i]) - x_rt0[i]);
    return se / static_cast<double>(eps.size()) + lambda_img * ae / static_cast<double>(x_rt0.size());
}

namespace {

Tensor stack(const std::vector<Tensor>& items) {
    const Shape& s = items.front().shape();
    Shape out_shape{items.size()};
    out_shape.insert(out_shape.end(), s.begin(), s.end());
    Tensor out(out_shape);
    const std::size_t n = items.front().size();
    for (std::size_t i = 0; i < items.size(); ++i) {
        if (items[i].shape() != s)
            throw ShapeError("batch: item " + std::to_string(i) + " has shape " + to_string(items[i].shape()) +
                             ", expected " + to_string(s));
        std::copy(items[i].data(), items[i].data() + n, out.data() + i * n);
    }
    return out;
}

Tensor clip01(Tensor x) {
    for (Scalar& v : x.values()) v = std::clamp(v, Scalar(0), Scalar(1));
    return x;
}

constexpr std::uint64_t kAlignStreamSalt = 0x616c69676e000000ULL;

} // namespace

TrainingBatch assemble_batch(const std::vector<Tensor>& clean, const std::vector<Tensor>& conditions, int t,
                             const DiffusionSchedule& sched, Rng& rng) {
    if (clean.empty()) throw std::invalid_argument("batch: no images");
    if (clean.size() != conditions.size()) throw std::invalid_argument("batch: images and conditions differ in count");
    const std::size_t r = sched.factor(t);
    std::vector<Tensor> x0s, conds;
    for (std::size_t i = 0; i < clean.size(); ++i) {
        const auto& s = clean[i].shape();
        if (s.size() != 3 || s[1] % (2 * sched.max_factor()) || s[2] % (2 * sched.max_factor()))
            throw ShapeError("batch: clean image " + to_string(s) + " must be [4,h,w] with h,w divisible by " +
                             std::to_string(2 * sched.max_factor()));
        x0s.push_back(downsample(clean[i], r));
        conds.push_back(downsample(conditions[i], r));
    }
    TrainingBatch b;
    b.t = t;
    b.x_rt0 = stack(x0s);
    b.cond = stack(conds);
    b.eps = rng.normal_tensor(b.x_rt0.shape());
    b.x_t = forward_sample(b.x_rt0, t, b.eps, sched);
    return b;
}

TrainingBatch make_pretrain_batch(const std::vector<PackedRaw>& clean, const NoiseSpace& space,
                                  const std::vector<VirtualCamera>& cameras, const DiffusionSchedule& sched, Rng& rng) {
    if (clean.empty()) throw std::invalid_argument("pretrain batch: empty batch");
    if (cameras.empty()) throw std::invalid_argument("pretrain batch: no virtual cameras");
    const auto i = static_cast<std::size_t>(rng.uniform_int(1, static_cast<std::int64_t>(cameras.size())));
    const VirtualCamera& cam = cameras[i - 1];
    std::vector<Tensor> x0s, conds;
    for (const PackedRaw& x0 : clean) {
        const NoiseParams params = sample_params(cam, space, rng);
        const PackedRaw noisy = synthesize(x0, params, rng);
        conds.push_back(build_condition(amplify(noisy.planes, params.ratio)));
        x0s.push_back(x0.planes);
    }
    const int t = static_cast<int>(rng.uniform_int(1, sched.steps()));
    TrainingBatch b = assemble_batch(x0s, conds, t, sched, rng);
    b.camera = cam.index;
    return b;
}

TrainingBatch make_align_batch(const std::vector<AlignPair>& pairs, const DiffusionSchedule& sched, Rng& rng) {
    if (pairs.empty()) throw std::invalid_argument("align batch: no pairs");
    std::vector<Tensor> x0s, conds;
    for (const AlignPair& p : pairs) {
        require_same_shape(p.noisy.planes, p.clean.planes, "align pair");
        conds.push_back(build_condition(amplify(p.noisy.planes, p.ratio)));
        x0s.push_back(p.clean.planes);
    }
    const int t = static_cast<int>(rng.uniform_int(1, sched.steps()));
    return assemble_batch(x0s, conds, t, sched, rng);
}

std::vector<PackedRaw> draw_scenes(const std::vector<PackedRaw>& corpus, const TrainConfig& cfg, Rng& rng) {
    if (corpus.empty()) throw std::invalid_argument("draw_scenes: empty corpus");
    std::vector<PackedRaw> out;
    for (std::size_t b = 0; b < cfg.batch_size; ++b) {
        const auto& scene = corpus[static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(corpus.size()) - 1))];
        out.push_back(cfg.crop ? crop_random(scene, cfg.crop, rng) : scene);
    }
    return out;
}

std::vector<AlignPair> draw_pairs(const std::vector<AlignPair>& pairs, const TrainConfig& cfg, Rng& rng) {
    if (pairs.empty()) throw std::invalid_argument("draw_pairs: no pairs");
    std::vector<AlignPair> out;
    for (std::size_t b = 0; b < cfg.batch_size; ++b) {
        const auto& p = pairs[static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(pairs.size()) - 1))];
        if (!cfg.crop) {
            out.push_back(p);
            continue;
        }
        const std::size_t size = std::min({cfg.crop, p.clean.height(), p.clean.width()});
        const auto y0 = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(p.clean.height() - size)));
        const auto x0 = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(p.clean.width() - size)));
        out.push_back({crop_at(p.noisy, size, y0, x0), crop_at(p.clean, size, y0, x0), p.ratio});
    }
    return out;
}

StepResult train_step(DenoiserModel& model, ColorCorrector& cc, Adam& opt, const TrainingBatch& batch,
                      const DiffusionSchedule& sched, double lambda_img, double lr, Route route) {
    ad::Graph g;
    ad::Var x_t = g.constant(batch.x_t);
    ad::Var eps_hat = model.forward(g, x_t, g.constant(batch.cond), batch.t, route);
    const Tensor x0 = clip01(predict_x0(batch.x_t, batch.t, eps_hat.value(), sched));
    ad::Var x0c = cc.correct(g, g.constant(x0), batch.t);
    const LossTerms loss = diffusion_loss(eps_hat, g.constant(batch.eps), x0c, g.constant(batch.x_rt0), lambda_img);

    StepResult r;
    r.loss = loss.total.value().item();
    r.eps_loss = loss.eps.value().item();
    r.img_loss = loss.img.value().item();
    r.t = batch.t;
    r.camera = batch.camera;
    r.lr = lr;
    if (!std::isfinite(r.loss)) throw NumericError("training diverged: non-finite loss at t=" + std::to_string(batch.t));

    g.backward(loss.total);
    std::vector<ad::Parameter*> params = model.parameters();
    for (ad::Parameter* p : cc.parameters()) params.push_back(p);
    opt.step(params, lr);
    return r;
}

StepResult pretrain_step(DenoiserModel& model, ColorCorrector& cc, Adam& opt, const std::vector<PackedRaw>& clean,
                         const DiffusionSchedule& sched, const NoiseSpace& space,
                         const std::vector<VirtualCamera>& cameras, double lambda_img, double lr, Rng& rng) {
    if (model.mode() != DenoiserMode::pretrain)
        throw ModeError("pretrain_step: model is " + std::string(to_string(model.mode())) + ", expected pretrain");
    if (cameras.size() != model.config().cameras)
        throw std::invalid_argument("pretrain_step: " + std::to_string(cameras.size()) + " virtual cameras for a model with " +
                                    std::to_string(model.config().cameras) + " pathways");
    const TrainingBatch batch = make_pretrain_batch(clean, space, cameras, sched, rng);
    return train_step(model, cc, opt, batch, sched, lambda_img, lr, Route::camera(batch.camera));
}

namespace {

void require_alignable(const DenoiserModel& model) {
    if (model.mode() != DenoiserMode::aligned)
        throw ModeError("align: model is " + std::string(to_string(model.mode())) +
                        "; aligning needs an averaged (aligned) model from a pretrain checkpoint");
    if (!model.convs_frozen()) throw ModeError("align: convolutions must be frozen before aligning");
}

} // namespace

StepResult align_step(DenoiserModel& model, ColorCorrector& cc, Adam& opt, const std::vector<AlignPair>& pairs,
                      const DiffusionSchedule& sched, double lambda_img, double lr, Rng& rng) {
    require_alignable(model);
    const TrainingBatch batch = make_align_batch(pairs, sched, rng);
    return train_step(model, cc, opt, batch, sched, lambda_img, lr, Route::target());
}

DiffusionSchedule CheckpointBundle::schedule(double eta) const {
    return DiffusionSchedule::build(schedule_steps, alpha_first, alpha_last, eta);
}

// ---------------------------------------------------------------------------
// training loops

namespace {

// Builds batches [first, last) on a worker thread into a bounded FIFO.
class BatchPrefetcher {
public:
    using Factory = std::function<TrainingBatch(int)>;

    BatchPrefetcher(Factory make, int first, int last, std::size_t capacity)
        : make_(std::move(make)), next_(first), last_(last), capacity_(capacity) {
        if (capacity_ > 0) worker_ = std::thread([this] { produce(); });
    }
    ~BatchPrefetcher() {
        {
            std::lock_guard lock(mutex_);
            stop_ = true;
        }
        cv_.notify_all();
        if (worker_.joinable()) worker_.join();
    }
    BatchPrefetcher(const BatchPrefetcher&) = delete;
    BatchPrefetcher& operator=(const BatchPrefetcher&) = delete;

    TrainingBatch next() {
        if (capacity_ == 0) return make_(next_++);
        std::unique_lock lock(mutex_);
        cv_.wait(lock, [this] { return !queue_.empty() || error_; });
        if (queue_.empty()) std::rethrow_exception(error_);
        TrainingBatch b = std::move(queue_.front());
        queue_.pop_front();
        cv_.notify_all();
        return b;
    }

private:
    void produce() {
        try {
            for (int k = next_; k < last_; ++k) {
                TrainingBatch b = make_(k);
                std::unique_lock lock(mutex_);
                cv_.wait(lock, [this] { return queue_.size() < capacity_ || stop_; });
                if (stop_) return;
                queue_.push_back(std::move(b));
                cv_.notify_all();
            }
        } catch (...) {
            std::lock_guard lock(mutex_);
            error_ = std::current_exception();
            cv_.notify_all();
        }
    }

    Factory make_;
    int next_, last_;
    std::size_t capacity_;
    std::thread worker_;
    std::mutex mutex_;
    std::condition_variable cv_;
    std::deque<TrainingBatch> queue_;
    std::exception_ptr error_;
    bool stop_ = false;
};

int stage_end(int start, int total, int stop_after) {
    return stop_after < 0 ? total : std::min(total, start + stop_after);
}

} // namespace

void run_pretraining(CheckpointBundle& bundle, const std::vector<PackedRaw>& corpus, const NoiseSpace& space,
                     const StepLogger& log, int stop_after) {
    if (bundle.model.mode() != DenoiserMode::pretrain)
        throw ModeError("pretrain: checkpoint is " + std::string(to_string(bundle.model.mode())) + ", expected pretrain");
    if (corpus.empty()) throw DataError("pretrain: empty scene corpus");
    const TrainConfig& cfg = bundle.train;
    cfg.validate();
    const DiffusionSchedule sched = bundle.schedule();
    const auto cameras = partition(space, bundle.model.config().cameras);
    const int end = stage_end(bundle.iteration, cfg.pretrain_iterations, stop_after);

    BatchPrefetcher prefetch(
        [&](int k) {
            Rng rng = Rng::stream(cfg.seed, static_cast<std::uint64_t>(k));
            return make_pretrain_batch(draw_scenes(corpus, cfg, rng), space, cameras, sched, rng);
        },
        bundle.iteration, end, cfg.prefetch);
    for (int k = bundle.iteration; k < end; ++k) {
        const TrainingBatch batch = prefetch.next();
        const StepResult r = train_step(bundle.model, bundle.cc, bundle.optimizer, batch, sched, cfg.lambda_img,
                                        cfg.lr_at(k), Route::camera(batch.camera));
        bundle.iteration = k + 1;
        if (log) log(bundle.iteration, r);
    }
}

void begin_aligning(CheckpointBundle& bundle) {
    if (bundle.model.mode() != DenoiserMode::pretrain)
        throw ModeError("align: checkpoint is " + std::string(to_string(bundle.model.mode())) +
                        "; start aligning from a pretrain checkpoint (or resume an aligned one)");
    bundle.model.average_cfis();
    bundle.model.freeze_convs(true);
    bundle.optimizer = Adam(bundle.train.beta1, bundle.train.beta2, bundle.train.adam_eps);
    bundle.iteration = 0;
}

void run_aligning(CheckpointBundle& bundle, const std::vector<AlignPair>& pairs, const StepLogger& log, int stop_after) {
    require_alignable(bundle.model);
    if (pairs.empty()) throw DataError("align: no (noisy, clean) pairs");
    const TrainConfig& cfg = bundle.train;
    cfg.validate();
    const DiffusionSchedule sched = bundle.schedule();
    const int end = stage_end(bundle.iteration, cfg.align_iterations, stop_after);

    BatchPrefetcher prefetch(
        [&](int k) {
            Rng rng = Rng::stream(cfg.seed ^ kAlignStreamSalt, static_cast<std::uint64_t>(k));
            return make_align_batch(draw_pairs(pairs, cfg, rng), sched, rng);
        },
        bundle.iteration, end, cfg.prefetch);
    for (int k = bundle.iteration; k < end; ++k) {
        const TrainingBatch batch = prefetch.next();
        const StepResult r = train_step(bundle.model, bundle.cc, bundle.optimizer, batch, sched, cfg.lambda_img,
                                        cfg.align_learning_rate, Route::target());
        bundle.iteration = k + 1;
        if (log) log(bundle.iteration, r);
    }
}

void reparameterize(CheckpointBundle& bundle) {
    if (bundle.model.mode() != DenoiserMode::aligned)
        throw ModeError("reparam: checkpoint is " + std::string(to_string(bundle.model.mode())) +
                        "; reparameterization needs an aligned checkpoint");
    bundle.model.reparameterize();
    bundle.optimizer = Adam(bundle.train.beta1, bundle.train.beta2, bundle.train.adam_eps);
}

std::string format_step(int iteration, const StepResult& r) {
    char buf[256];
    std::snprintf(buf, sizeof buf, "iter=%d loss=%.6g eps=%.6g img=%.6g lr=%.6g camera=%zu t=%d", iteration, r.loss,
                  r.eps_loss, r.img_loss, r.lr, r.camera, r.t);
    return buf;
}

} // namespace tsdiff
