#pragma once

// Group convolutions and the feature-map transforms they commute with.
//
// Layouts:
//   planar feature map  [B, C, H, W]
//   G feature map       [B, K, |S|, H, W]   group axis indexes enumerate(group)
//   Z2->G weights       [K, C, k, k]
//   G->G weights        [K, C, |S|, k, k]
//
// For square inputs, stride 1 and same padding, every layer L here satisfies
// L(T_g x) == T_g L(x) with T_g the planar or regular transform below.

#include "gseg/autograd.hpp"
#include "gseg/group.hpp"

namespace gseg {

/// (T_g x)(p) = x(g^-1 p) on the last two (square) axes, rotating about the
/// grid center. Leading axes are carried along.
Tensor transform_feature_z2(StabilizerElement g, const Tensor& x);

/// Regular representation on a G feature map:
/// (T_g x)[b, k, h, p] = x[b, k, g^-1 h, g^-1 p].
Tensor transform_feature_g(StabilizerElement g, GroupSpec group, const Tensor& x);

/// [K, C, k, k] -> [K, |S|, C, k, k]; slice g holds the kernel moved by g.
Var expand_filter_z2(Var w, GroupSpec group);

/// [K, C, |S|, k, k] -> [K, |S|, C, |S|, k, k]; slice g holds the kernel
/// under the regular representation of g.
Var expand_filter_g(Var w, GroupSpec group);

Var gconv_z2_to_g(Var x, Var w, GroupSpec group, int stride, int padding,
                  ops::SizeRounding rounding = ops::SizeRounding::exact);

/// Realized as one planar conv over C*|S| input and K*|S| output channels
/// against the expanded filter bank.
Var gconv_g_to_g(Var x, Var w, GroupSpec group, int stride, int padding,
                 ops::SizeRounding rounding = ops::SizeRounding::exact);

Var g_upsample(Var x, int factor);

/// Mean over the group axis: [B, K, |S|, H, W] -> [B, K, H, W].
Var g_projection(Var x);

Var g_max_pool(Var x);

/// Statistics per channel K, pooled over batch, group and space.
Var g_batch_norm(Var x, Var gamma, Var beta, ops::BatchNormState* state, bool training,
                 bool update_running = true);

}  // namespace gseg
