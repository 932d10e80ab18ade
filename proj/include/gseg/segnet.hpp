#pragma once

// Deeply supervised, U-Net connected, rotation-equivariant FCN.
//
//   stem     Z2->G conv 3x3, BN, ReLU                          (full res)
//   stage s  [downsample], blocks_per_stage residual blocks    width base*2^s
//   decoder  per level: G-upsample x2, concat encoder skip, G-conv, BN, ReLU
//   heads    on the last three decoder outputs (full, 1/2, 1/4 res):
//            G-projection, 1x1 conv to one logit, nearest upsample to full res
//
// With group P1 every G-op reduces to its planar counterpart, which is how
// the plain twin is built.

#include <array>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "gseg/autograd.hpp"
#include "gseg/group.hpp"

namespace gseg {

enum class Downsample { pool, strided_conv };
enum class Fusion { weighted, main_only };

struct SegNetConfig {
  GroupSpec group = GroupSpec::p4m();
  int base_width = 8;
  int num_stages = 4;
  int blocks_per_stage = 2;
  Downsample downsample = Downsample::pool;
  std::array<double, 3> ds_weights{0.7, 0.2, 0.1};
  bool equivariant = true;
  Fusion fusion = Fusion::weighted;

  /// Throws gseg::Error when an invariant does not hold.
  void validate() const;

  GroupSpec effective_group() const { return equivariant ? group : GroupSpec::p1(); }

  /// Channels of stage 0. A plain net runs round(base_width * sqrt(|S|))
  /// channels, which matches the weight count of the G->G convolutions of
  /// the equivariant net with base_width channels.
  int effective_width() const;

  /// Same architecture with every G-op replaced by its P1 counterpart at a
  /// matched parameter budget.
  SegNetConfig plain_twin() const;

  /// Smallest input side length the net accepts (one halving per stage
  /// boundary).
  int size_multiple() const { return 1 << (num_stages - 1); }
};

enum class Mode { train, eval };

struct SegOutput {
  Var main;  // full resolution tap
  Var aux1;  // 1/2 resolution tap, upsampled
  Var aux2;  // 1/4 resolution tap, upsampled
};

class SegNet {
 public:
  SegNet(const SegNetConfig& config, std::uint64_t seed);

  const SegNetConfig& config() const { return config_; }

  /// image [B, 3, H, W] with H == W divisible by config().size_multiple().
  /// Mode::train uses batch statistics and updates the running ones.
  SegOutput forward(Tape& tape, Var image, Mode mode);

  std::vector<Parameter*> parameters();

  /// Every serialized tensor in a fixed order: learnable parameters and
  /// batch-norm running statistics.
  void visit_tensors(const std::function<void(const std::string&, Tensor&, bool learnable)>& fn);

  std::int64_t count_params() const;

  void zero_grad();

 private:
  struct ConvUnit {
    Parameter weight;
    std::optional<Parameter> bias;
    bool on_group = false;
    int stride = 1;
    int padding = 0;
  };
  struct NormUnit {
    Parameter gamma;
    Parameter beta;
    ops::BatchNormState state;
  };
  struct ResidualBlock {
    ConvUnit conv1;
    NormUnit bn1;
    ConvUnit conv2;
    NormUnit bn2;
    std::optional<ConvUnit> shortcut;
  };
  struct DecoderLevel {
    ConvUnit conv;
    NormUnit bn;
  };
  struct Head {
    Parameter weight;  // [1, K, 1, 1]
    Parameter bias;    // [1]
  };

  ConvUnit make_conv(const std::string& name, bool on_group, int in, int out, int kernel,
                     int stride, bool bias, Rng& rng) const;
  NormUnit make_norm(const std::string& name, int channels) const;
  Var apply(Tape& tape, ConvUnit& conv, Var x) const;
  Var apply(Tape& tape, NormUnit& norm, Var x, Mode mode) const;
  Var apply(Tape& tape, ResidualBlock& block, Var x, Mode mode) const;
  Var apply_head(Tape& tape, Head& head, Var x, int upsample) const;

  SegNetConfig config_;
  GroupSpec group_;
  ConvUnit stem_;
  NormUnit stem_norm_;
  std::vector<std::vector<ResidualBlock>> stages_;
  std::vector<DecoderLevel> decoder_;  // decoder_[s-1] maps stage s back to stage s-1
  std::array<Head, 3> heads_;
};

/// Sum of ds_weights[i] * bce(head_i, target).
Var deep_supervision_loss(const SegOutput& out, const Tensor& target,
                          const std::array<double, 3>& ds_weights);

/// Fused foreground probability [B, 1, H, W] per the config's Fusion mode.
Tensor fused_probability(const SegOutput& out, const SegNetConfig& config);

/// Binary mask: fused probability >= 0.5 maps to 1 (ties go to foreground).
Tensor threshold_mask(const Tensor& probability);

/// Eval-mode forward on a non-recording tape followed by thresholding.
Tensor predict(SegNet& net, const Tensor& image);

}  // namespace gseg
