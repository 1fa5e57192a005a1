#pragma once

// Two-scale U-Net noise predictor. Every 3x3 convolution is preceded by a
// camera feature integration (CFI) module: one per-channel affine pathway per
// virtual camera during pre-training, a single averaged pathway after
// alignment, and nothing at all once merged into the convolutions.

#include "tsdiff/autodiff.hpp"

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace tsdiff {

struct DenoiserConfig {
    std::size_t image_channels = 4;
    std::size_t cond_channels = 10;
    std::size_t base_width = 32;  // the coarse scale uses twice this
    std::size_t time_dim = 64;
    std::size_t cameras = 5;

    void validate() const;
    friend bool operator==(const DenoiserConfig&, const DenoiserConfig&) = default;
};

enum class DenoiserMode { pretrain, aligned, merged };

std::string_view to_string(DenoiserMode mode);
DenoiserMode parse_denoiser_mode(std::string_view text);

/// Which CFI pathway a forward pass uses.
class Route {
public:
    enum class Kind { camera, target, bypass };

    /// Pathway of virtual camera `index` (1-based); pre-training only.
    static Route camera(std::size_t index) { return Route(Kind::camera, index); }
    /// The averaged target pathway (aligned mode); merged models ignore routing.
    static Route target() { return Route(Kind::target, 0); }
    /// Skip every CFI module.
    static Route bypass() { return Route(Kind::bypass, 0); }

    Kind kind() const noexcept { return kind_; }
    std::size_t index() const noexcept { return index_; }

private:
    Route(Kind kind, std::size_t index) : kind_(kind), index_(index) {}
    Kind kind_;
    std::size_t index_;
};

struct CfiPathway {
    ad::Parameter weight;  // [C], initialized to 1
    ad::Parameter bias;    // [C], initialized to 0
};

/// A convolution with its CFI affine folded in. Under zero padding the CFI
/// bias contributes only through the kernel taps that land inside the image,
/// so the bias varies along the 1-pixel border.
struct MergedConv {
    Tensor kernel;      // [Cout, Cin, k, k]
    Tensor bias_field;  // [Cout, H, W]
};

/// Per-tap bias contributions sum_cin K[o,cin,i,j] * b[cin]: [Cout, k, k].
Tensor cfi_tap_bias(const Tensor& cfi_bias, const Tensor& kernel);
/// bias[o] + sum over in-image taps of tap_bias[o,i,j], for an H x W input.
Tensor expand_bias_field(const Tensor& bias, const Tensor& tap_bias, std::size_t height, std::size_t width);

/// Folds channel_affine(w, b) into the following stride-1 convolution.
/// Throws std::invalid_argument for valid padding (the identity would not hold).
MergedConv merge_cfi_conv(const Tensor& cfi_weight, const Tensor& cfi_bias, const Tensor& kernel,
                          const Tensor& bias, std::size_t height, std::size_t width,
                          ad::PadMode pad = ad::PadMode::zero);

/// Output of conv2d(x) with a MergedConv.
Tensor apply_merged(const Tensor& x, const MergedConv& merged);

class DenoiserModel {
public:
    struct ConvBlock {
        std::string name;
        ad::Parameter kernel;  // [Cout, Cin, 3, 3]
        ad::Parameter bias;    // [Cout]
        std::vector<CfiPathway> pathways;
        std::optional<CfiPathway> target;
        Tensor tap_bias;  // merged mode only
        bool time_projection = false;
        ad::Parameter time_weight;
        ad::Parameter time_bias;
    };

    DenoiserModel(DenoiserConfig config, std::uint64_t seed);

    const DenoiserConfig& config() const noexcept { return config_; }
    DenoiserMode mode() const noexcept { return mode_; }

    /// eps_hat with the shape of x_t. x_t [N,4,H,W], cond [N,10,H,W], H and W divisible by 2.
    ad::Var forward(ad::Graph& g, ad::Var x_t, ad::Var cond, int t, Route route);
    /// Inference path: parameters enter as constants.
    ad::Var forward(ad::Graph& g, ad::Var x_t, ad::Var cond, int t, Route route) const;
    Tensor predict(const Tensor& x_t, const Tensor& cond, int t, Route route) const;

    /// pretrain -> aligned: the target pathway is the mean of all pathways.
    void average_cfis();
    /// aligned -> merged: fold every target CFI into its convolution.
    void reparameterize();
    /// Excludes every non-CFI denoiser parameter from gradient updates.
    void freeze_convs(bool frozen = true);
    bool convs_frozen() const noexcept { return frozen_; }

    std::vector<ConvBlock>& blocks() noexcept { return blocks_; }
    const std::vector<ConvBlock>& blocks() const noexcept { return blocks_; }

    std::vector<ad::Parameter*> parameters();
    std::vector<const ad::Parameter*> parameters() const;
    std::vector<ad::Parameter*> cfi_parameters();
    std::vector<ad::Parameter*> pathway_parameters(std::size_t camera);

    /// Named tensors describing the model in its current mode (parameters plus
    /// merged tap biases).
    std::map<std::string, Tensor> state() const;
    static DenoiserModel from_state(const DenoiserConfig& config, DenoiserMode mode,
                                    const std::map<std::string, Tensor>& tensors, const std::string& prefix = "");

private:
    template <class Self>
    static ad::Var run(Self& self, ad::Graph& g, ad::Var x_t, ad::Var cond, int t, Route route);

    DenoiserConfig config_;
    DenoiserMode mode_ = DenoiserMode::pretrain;
    bool frozen_ = false;
    std::vector<ConvBlock> blocks_;
    ad::Parameter time_weight_, time_bias_;
    ad::Parameter out_kernel_, out_bias_;
};

} // namespace tsdiff
