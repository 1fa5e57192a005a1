#pragma once

// Global color correction of the clean-image estimate. A per-pixel base
// network (1x1 convolutions) is modulated after its first layer by (gamma, nu)
// computed from global image statistics and the diffusion step.

#include "tsdiff/autodiff.hpp"

#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

namespace tsdiff {

struct ColorCorrectorConfig {
    std::size_t channels = 4;
    std::size_t width = 16;       // base hidden width == modulation width
    std::size_t cond_width = 16;  // conditional conv width == time embedding dim
    std::size_t cond_layers = 3;
    std::size_t cond_kernel = 3;  // 1 or 3
    std::size_t cond_stride = 2;  // 1 or 2

    /// Smallest spatial extent the conditional network accepts.
    std::size_t min_extent() const;
    void validate() const;
    friend bool operator==(const ColorCorrectorConfig&, const ColorCorrectorConfig&) = default;
};

struct Modulation {
    ad::Var gamma;  // [N, width]
    ad::Var nu;     // [N, width]
};

class ColorCorrector {
public:
    struct Layer {
        ad::Parameter weight;
        ad::Parameter bias;
    };

    /// Base network starts near the identity; the heads start near gamma=1, nu=0.
    ColorCorrector(ColorCorrectorConfig config, std::uint64_t seed);

    const ColorCorrectorConfig& config() const noexcept { return config_; }

    /// x [N,C,h,w] -> (gamma, nu). Throws ShapeError if h or w < min_extent().
    Modulation cond_features(ad::Graph& g, ad::Var x, int t);
    Modulation cond_features(ad::Graph& g, ad::Var x, int t) const;
    /// Base network with externally supplied modulation.
    ad::Var correct_with(ad::Graph& g, ad::Var x, ad::Var gamma, ad::Var nu);
    ad::Var correct_with(ad::Graph& g, ad::Var x, ad::Var gamma, ad::Var nu) const;
    ad::Var correct(ad::Graph& g, ad::Var x, int t);
    ad::Var correct(ad::Graph& g, ad::Var x, int t) const;

    /// Graph-free variants; rank-3 [C,h,w] or rank-4 inputs.
    Tensor correct(const Tensor& x, int t) const;
    std::pair<Tensor, Tensor> cond_features(const Tensor& x, int t) const;

    std::vector<Layer>& base() noexcept { return base_; }
    std::vector<Layer>& cond_convs() noexcept { return cond_; }
    Layer& gamma_head() noexcept { return gamma_head_; }
    Layer& nu_head() noexcept { return nu_head_; }

    std::vector<ad::Parameter*> parameters();
    std::vector<const ad::Parameter*> parameters() const;

    std::map<std::string, Tensor> state() const;
    static ColorCorrector from_state(const ColorCorrectorConfig& config, const std::map<std::string, Tensor>& tensors,
                                     const std::string& prefix = "");

private:
    template <class Self>
    static Modulation run_cond(Self& self, ad::Graph& g, ad::Var x, int t);
    template <class Self>
    static ad::Var run_base(Self& self, ad::Graph& g, ad::Var x, ad::Var gamma, ad::Var nu);

    ColorCorrectorConfig config_;
    std::vector<Layer> base_;
    std::vector<Layer> cond_;
    Layer gamma_head_, nu_head_;
};

} // namespace tsdiff
