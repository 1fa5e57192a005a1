#pragma once

// Pre-training over virtual cameras and aligning on real pairs: loss,
// Adam, batch construction, the prefetching training loops and checkpoints.

#include "tsdiff/color_corrector.hpp"
#include "tsdiff/denoiser.hpp"
#include "tsdiff/noisespace.hpp"
#include "tsdiff/schedule.hpp"

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <string>
#include <utility>
#include <vector>

namespace tsdiff {

struct TrainConfig {
    std::size_t batch_size = 8;
    std::size_t crop = 32;  // packed crop side; must be divisible by 4
    double learning_rate = 1e-3;
    std::vector<int> milestones = {1000, 1500};  // pretraining lr halves at each listed iteration
    double align_learning_rate = 1e-3;  // constant over the aligning stage
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    double lambda_img = 1.0;
    int pretrain_iterations = 2000;
    int align_iterations = 200;
    std::uint64_t seed = 0;
    std::size_t prefetch = 4;  // queued batches; 0 builds batches inline

    void validate() const;
    double lr_at(int iteration) const;
    friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

class Adam {
public:
    struct Slot {
        Tensor m;
        Tensor v;
        std::int64_t steps = 0;
    };

    Adam(double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8) : beta1_(beta1), beta2_(beta2), eps_(eps) {}

    /// Updates every parameter that is not frozen and was reached by the last
    /// backward pass, then clears all gradients.
    void step(const std::vector<ad::Parameter*>& params, double lr);

    std::map<std::string, Slot>& slots() noexcept { return slots_; }
    const std::map<std::string, Slot>& slots() const noexcept { return slots_; }
    double beta1() const noexcept { return beta1_; }
    double beta2() const noexcept { return beta2_; }
    double eps() const noexcept { return eps_; }

private:
    double beta1_, beta2_, eps_;
    std::map<std::string, Slot> slots_;
};

struct LossTerms {
    ad::Var total;
    ad::Var eps;  // mean((eps_hat - eps)^2)
    ad::Var img;  // mean|x0_corrected - x_rt0|
};

/// L = mean((eps_hat - eps)^2) + lambda_img * mean|x0_corrected - x_rt0|
LossTerms diffusion_loss(ad::Var eps_hat, ad::Var eps, ad::Var x0_corrected, ad::Var x_rt0, double lambda_img);
double diffusion_loss(const Tensor& eps_hat, const Tensor& eps, const Tensor& x0_corrected, const Tensor& x_rt0,
                      double lambda_img);

/// One training example set at a single step t (and thus a single resolution).
struct TrainingBatch {
    Tensor x_t;    // [N,4,h,w] at resolution 1/r_t
    Tensor cond;   // [N,10,h,w]
    Tensor eps;    // [N,4,h,w]
    Tensor x_rt0;  // [N,4,h,w]
    int t = 1;
    std::size_t camera = 0;  // virtual camera index; 0 for real pairs
};

struct AlignPair {
    PackedRaw noisy;  // unamplified short exposure
    PackedRaw clean;
    double ratio = 1.0;
};

/// Diffuses `x_rt0` to step t with fresh noise and stacks everything into a batch.
TrainingBatch assemble_batch(const std::vector<Tensor>& clean, const std::vector<Tensor>& conditions, int t,
                             const DiffusionSchedule& sched, Rng& rng);

/// Picks a virtual camera, synthesizes a noisy capture of every clean image
/// with parameters drawn from it, builds conditions and diffuses.
TrainingBatch make_pretrain_batch(const std::vector<PackedRaw>& clean, const NoiseSpace& space,
                                  const std::vector<VirtualCamera>& cameras, const DiffusionSchedule& sched, Rng& rng);
/// Conditions come from the real noisy captures; no synthesis.
TrainingBatch make_align_batch(const std::vector<AlignPair>& pairs, const DiffusionSchedule& sched, Rng& rng);

/// batch_size random crops drawn from the corpus.
std::vector<PackedRaw> draw_scenes(const std::vector<PackedRaw>& corpus, const TrainConfig& cfg, Rng& rng);
std::vector<AlignPair> draw_pairs(const std::vector<AlignPair>& pairs, const TrainConfig& cfg, Rng& rng);

struct StepResult {
    double loss = 0.0;
    double eps_loss = 0.0;
    double img_loss = 0.0;
    int t = 0;
    std::size_t camera = 0;
    double lr = 0.0;
};

/// Forward, loss, backward and one Adam step on every trainable parameter of
/// both networks. The clean estimate fed to the color corrector is built from
/// a detached eps_hat and clipped to [0,1].
StepResult train_step(DenoiserModel& model, ColorCorrector& cc, Adam& opt, const TrainingBatch& batch,
                      const DiffusionSchedule& sched, double lambda_img, double lr, Route route);

/// One pretraining iteration. Throws ModeError unless the model is in pretrain mode.
StepResult pretrain_step(DenoiserModel& model, ColorCorrector& cc, Adam& opt, const std::vector<PackedRaw>& clean,
                         const DiffusionSchedule& sched, const NoiseSpace& space,
                         const std::vector<VirtualCamera>& cameras, double lambda_img, double lr, Rng& rng);
/// One aligning iteration. Throws ModeError unless aligned with frozen convolutions.
StepResult align_step(DenoiserModel& model, ColorCorrector& cc, Adam& opt, const std::vector<AlignPair>& pairs,
                      const DiffusionSchedule& sched, double lambda_img, double lr, Rng& rng);

/// Model, color corrector, schedule and optimizer state of one training run.
struct CheckpointBundle {
    DenoiserModel model;
    ColorCorrector cc;
    int schedule_steps = 200;
    double alpha_first = 0.999999;
    double alpha_last = 0.9;
    TrainConfig train{};
    std::size_t scene_size = 0;  // packed side of the pretraining corpus, informational
    int iteration = 0;           // completed iterations of the current stage
    Adam optimizer{};
    std::vector<std::pair<std::string, std::string>> provenance{};  // effective run config

    DiffusionSchedule schedule(double eta = 0.0) const;
};

inline constexpr std::uint32_t kCheckpointSchema = 1;

std::vector<std::uint8_t> serialize_checkpoint(const CheckpointBundle& bundle);
CheckpointBundle deserialize_checkpoint(const std::vector<std::uint8_t>& bytes, const std::string& source = "<memory>");
void save_checkpoint(const CheckpointBundle& bundle, const std::filesystem::path& path);
CheckpointBundle load_checkpoint(const std::filesystem::path& path);

using StepLogger = std::function<void(int iteration, const StepResult&)>;

/// Runs pretrain iterations [bundle.iteration, train.pretrain_iterations).
/// Batch k is built from Rng::stream(seed, k) on a producer thread, so the
/// result depends only on (seed, config, data).
void run_pretraining(CheckpointBundle& bundle, const std::vector<PackedRaw>& corpus, const NoiseSpace& space,
                     const StepLogger& log = {}, int stop_after = -1);

/// pretrain -> aligned: averages CFIs, freezes convolutions, resets the
/// optimizer and the iteration counter.
void begin_aligning(CheckpointBundle& bundle);
void run_aligning(CheckpointBundle& bundle, const std::vector<AlignPair>& pairs, const StepLogger& log = {},
                  int stop_after = -1);

/// aligned -> merged.
void reparameterize(CheckpointBundle& bundle);

/// "iter=... loss=... eps=... img=... lr=... camera=... t=..."
std::string format_step(int iteration, const StepResult& r);

} // namespace tsdiff
