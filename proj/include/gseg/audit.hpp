#pragma once

// Numerical audits: equivariance of every layer and of the assembled net,
// reduction to planar ops under the trivial group, and finite-difference
// checks of every backward rule.

#include <cstdint>
#include <string>
#include <vector>

#include "gseg/group.hpp"
#include "gseg/segnet.hpp"

namespace gseg {

struct CheckResult {
  std::string name;
  double max_error = 0.0;
  double tolerance = 0.0;

  bool passed() const { return max_error < tolerance; }
};

/// L(T_g x) vs T_g L(x) for gconv_z2_to_g, gconv_g_to_g, g_upsample,
/// g_projection, g_max_pool and g_batch_norm over every element of `group`,
/// stride 1 and same padding, on `trials` random inputs each.
std::vector<CheckResult> layer_equivariance_checks(GroupSpec group, int trials, double tolerance,
                                                   std::uint64_t seed);

/// Max abs deviation over all three logit maps between forward(T_g x) and
/// T_g forward(x), eval mode, batch-norm statistics and affine terms
/// randomized so they are exercised.
CheckResult network_equivariance_check(const SegNetConfig& config, int trials, int size,
                                       double tolerance, std::uint64_t seed);

/// Every G-layer under P1 against its planar counterpart.
std::vector<CheckResult> trivial_group_checks(int trials, double tolerance, std::uint64_t seed);

/// Central differences (eps 1e-5) over every differentiable op on small
/// random inputs.
std::vector<CheckResult> layer_gradient_checks(std::uint64_t seed, double tolerance = 1e-4);

/// Central differences through the whole net (train mode, deep-supervision
/// loss) w.r.t. every parameter tensor and the input image; at most
/// `coords_per_tensor` sampled coordinates per tensor.
CheckResult network_gradient_check(const SegNetConfig& config, int size, std::uint64_t seed,
                                   double tolerance = 1e-4, std::int64_t coords_per_tensor = 8);

/// Sets batch-norm affine terms, running statistics and head biases to
/// random non-trivial values.
void randomize_auxiliary_state(SegNet& net, Rng& rng);

}  // namespace gseg
