#include "gseg/audit.hpp"

#include <algorithm>
#include <cmath>

#include "gseg/equivariant.hpp"
#include "gseg/error.hpp"

namespace gseg {

namespace {

Tensor eval(const std::function<Var(Tape&)>& f) {
  Tape tape(false);
  return f(tape).value();
}

int pick(Rng& rng, int lo, int hi) { return lo + static_cast<int>(rng.below(hi - lo + 1)); }

std::int64_t pick_even_side(Rng& rng) { return 2 * pick(rng, 2, 4); }

}  // namespace

std::vector<CheckResult> layer_equivariance_checks(GroupSpec group, int trials, double tolerance,
                                                   std::uint64_t seed) {
  Rng rng(seed);
  const auto elems = enumerate(group);
  const std::int64_t order = group.order();
  const std::string suffix = "[" + std::string(group.name()) + "]";
  CheckResult z2{"gconv_z2_to_g" + suffix, 0.0, tolerance};
  CheckResult gg{"gconv_g_to_g" + suffix, 0.0, tolerance};
  CheckResult up{"g_upsample" + suffix, 0.0, tolerance};
  CheckResult proj{"g_projection" + suffix, 0.0, tolerance};
  CheckResult pool{"g_max_pool" + suffix, 0.0, tolerance};
  CheckResult bn{"g_batch_norm" + suffix, 0.0, tolerance};

  for (int trial = 0; trial < trials; ++trial) {
    const std::int64_t b = pick(rng, 1, 2), c = pick(rng, 1, 3), k_out = pick(rng, 1, 3);
    const std::int64_t n = pick_even_side(rng);
    const int kernel = 2 * pick(rng, 0, 2) + 1;
    const int pad = kernel / 2;
    const Tensor planar = random_normal(Shape{b, c, n, n}, rng);
    const Tensor gmap = random_normal(Shape{b, c, order, n, n}, rng);
    const Tensor w_z2 = random_normal(Shape{k_out, c, kernel, kernel}, rng);
    const Tensor w_g = random_normal(Shape{k_out, c, order, kernel, kernel}, rng);
    const Tensor gamma = random_uniform(Shape{c}, rng, 0.5, 1.5);
    const Tensor beta = random_normal(Shape{c}, rng, 0.2);

    auto z2_layer = [&](const Tensor& x) {
      return eval([&](Tape& t) {
        return gconv_z2_to_g(t.constant(x), t.constant(w_z2), group, 1, pad);
      });
    };
    auto gg_layer = [&](const Tensor& x) {
      return eval([&](Tape& t) {
        return gconv_g_to_g(t.constant(x), t.constant(w_g), group, 1, pad);
      });
    };
    auto up_layer = [&](const Tensor& x) {
      return eval([&](Tape& t) { return g_upsample(t.constant(x), 2); });
    };
    auto proj_layer = [&](const Tensor& x) {
      return eval([&](Tape& t) { return g_projection(t.constant(x)); });
    };
    auto pool_layer = [&](const Tensor& x) {
      return eval([&](Tape& t) { return g_max_pool(t.constant(x)); });
    };
    auto bn_layer = [&](const Tensor& x) {
      return eval([&](Tape& t) {
        return g_batch_norm(t.constant(x), t.constant(gamma), t.constant(beta), nullptr, true);
      });
    };

    const Tensor z2_ref = z2_layer(planar);
    const Tensor gg_ref = gg_layer(gmap);
    const Tensor up_ref = up_layer(gmap);
    const Tensor proj_ref = proj_layer(gmap);
    const Tensor pool_ref = pool_layer(gmap);
    const Tensor bn_ref = bn_layer(gmap);
    for (const auto& g : elems) {
      const Tensor tg_planar = transform_feature_z2(g, planar);
      const Tensor tg_gmap = transform_feature_g(g, group, gmap);
      auto upd = [](CheckResult& r, double e) { r.max_error = std::max(r.max_error, e); };
      upd(z2, max_abs_diff(z2_layer(tg_planar), transform_feature_g(g, group, z2_ref)));
      upd(gg, max_abs_diff(gg_layer(tg_gmap), transform_feature_g(g, group, gg_ref)));
      upd(up, max_abs_diff(up_layer(tg_gmap), transform_feature_g(g, group, up_ref)));
      upd(proj, max_abs_diff(proj_layer(tg_gmap), transform_feature_z2(g, proj_ref)));
      upd(pool, max_abs_diff(pool_layer(tg_gmap), transform_feature_g(g, group, pool_ref)));
      upd(bn, max_abs_diff(bn_layer(tg_gmap), transform_feature_g(g, group, bn_ref)));
    }
  }
  return {z2, gg, up, proj, pool, bn};
}

void randomize_auxiliary_state(SegNet& net, Rng& rng) {
  net.visit_tensors([&](const std::string& name, Tensor& t, bool) {
    auto ends_with = [&](std::string_view s) { return name.ends_with(s); };
    if (ends_with(".gamma") || ends_with(".running_var")) {
      for (auto& v : t.data()) v = rng.uniform(0.5, 1.5);
    } else if (ends_with(".beta") || ends_with(".running_mean") || ends_with(".bias")) {
      for (auto& v : t.data()) v = 0.1 * rng.normal();
    }
  });
}

CheckResult network_equivariance_check(const SegNetConfig& config, int trials, int size,
                                       double tolerance, std::uint64_t seed) {
  Rng rng(seed);
  SegNet net(config, rng.next());
  randomize_auxiliary_state(net, rng);
  const GroupSpec group = config.effective_group();
  const auto elems = enumerate(group);
  const auto count = static_cast<std::int64_t>(elems.size());
  const std::int64_t image_size = 3 * static_cast<std::int64_t>(size) * size;
  const std::int64_t map_size = static_cast<std::int64_t>(size) * size;

  CheckResult result{"network[" + std::string(group.name()) + "," +
                         (config.downsample == Downsample::pool ? "pool" : "strided_conv") + "]",
                     0.0, tolerance};
  for (int trial = 0; trial < trials; ++trial) {
    const Tensor x = random_normal(Shape{1, 3, size, size}, rng);
    // One batch holding T_g x for every g; index 0 is the identity.
    Tensor batch(Shape{count, 3, size, size});
    for (std::int64_t i = 0; i < count; ++i) {
      const Tensor tx = transform_feature_z2(elems[i], x);
      std::copy_n(tx.ptr(), image_size, batch.ptr() + i * image_size);
    }
    Tape tape(false);
    const SegOutput out = net.forward(tape, tape.constant(batch), Mode::eval);
    for (const Var& head : {out.main, out.aux1, out.aux2}) {
      const Tensor& y = head.value();
      Tensor ref(Shape{1, 1, size, size});
      std::copy_n(y.ptr(), map_size, ref.ptr());
      for (std::int64_t i = 1; i < count; ++i) {
        const Tensor expected = transform_feature_z2(elems[i], ref);
        for (std::int64_t p = 0; p < map_size; ++p) {
          const double v = y[i * map_size + p];
          require(std::isfinite(v), ErrorKind::numeric, "network produced a non-finite logit");
          result.max_error = std::max(result.max_error, std::abs(v - expected[p]));
        }
      }
    }
  }
  return result;
}

std::vector<CheckResult> trivial_group_checks(int trials, double tolerance, std::uint64_t seed) {
  Rng rng(seed);
  const GroupSpec p1 = GroupSpec::p1();
  CheckResult z2{"gconv_z2_to_g[p1] vs conv2d", 0.0, tolerance};
  CheckResult gg{"gconv_g_to_g[p1] vs conv2d", 0.0, tolerance};
  CheckResult up{"g_upsample[p1] vs upsample_nearest", 0.0, tolerance};
  CheckResult proj{"g_projection[p1] vs identity", 0.0, tolerance};
  CheckResult pool{"g_max_pool[p1] vs max_pool2d", 0.0, tolerance};
  CheckResult bn{"g_batch_norm[p1] vs batch_norm", 0.0, tolerance};
  auto upd = [](CheckResult& r, const Tensor& a, const Tensor& b) {
    r.max_error = std::max(r.max_error, max_abs_diff(a, b));
  };

  for (int trial = 0; trial < trials; ++trial) {
    const std::int64_t b = pick(rng, 1, 2), c = pick(rng, 1, 3), k_out = pick(rng, 1, 3);
    const std::int64_t n = pick_even_side(rng);
    const int kernel = 2 * pick(rng, 0, 2) + 1;
    const int stride = pick(rng, 1, 2);
    const int pad = kernel / 2;
    const auto rounding = ops::SizeRounding::floor;
    const Tensor x = random_normal(Shape{b, c, n, n}, rng);
    const Tensor x5 = x.reshaped(Shape{b, c, 1, n, n});
    const Tensor w = random_normal(Shape{k_out, c, kernel, kernel}, rng);
    const Tensor w5 = w.reshaped(Shape{k_out, c, 1, kernel, kernel});
    const Tensor gamma = random_uniform(Shape{c}, rng, 0.5, 1.5);
    const Tensor beta = random_normal(Shape{c}, rng, 0.2);

    const Tensor plain_conv = eval([&](Tape& t) {
      return ops::conv2d(t.constant(x), t.constant(w), stride, pad, rounding);
    });
    const Shape ps = plain_conv.shape();
    const Shape lifted{ps[0], ps[1], 1, ps[2], ps[3]};
    upd(z2,
        eval([&](Tape& t) {
          return gconv_z2_to_g(t.constant(x), t.constant(w), p1, stride, pad, rounding);
        }),
        plain_conv.reshaped(lifted));
    upd(gg,
        eval([&](Tape& t) {
          return gconv_g_to_g(t.constant(x5), t.constant(w5), p1, stride, pad, rounding);
        }),
        plain_conv.reshaped(lifted));
    upd(up, eval([&](Tape& t) { return g_upsample(t.constant(x5), 2); }),
        eval([&](Tape& t) { return ops::upsample_nearest(t.constant(x), 2); })
            .reshaped(Shape{b, c, 1, 2 * n, 2 * n}));
    upd(proj, eval([&](Tape& t) { return g_projection(t.constant(x5)); }), x);
    upd(pool, eval([&](Tape& t) { return g_max_pool(t.constant(x5)); }),
        eval([&](Tape& t) { return ops::max_pool2d(t.constant(x)); })
            .reshaped(Shape{b, c, 1, n / 2, n / 2}));
    upd(bn,
        eval([&](Tape& t) {
          return g_batch_norm(t.constant(x5), t.constant(gamma), t.constant(beta), nullptr, true);
        }),
        eval([&](Tape& t) {
          return ops::batch_norm(t.constant(x), t.constant(gamma), t.constant(beta), nullptr, true);
        }).reshaped(Shape{b, c, 1, n, n}));
  }
  return {z2, gg, up, proj, pool, bn};
}

std::vector<CheckResult> layer_gradient_checks(std::uint64_t seed, double tolerance) {
  Rng rng(seed);
  std::vector<CheckResult> results;
  const GroupSpec p4m = GroupSpec::p4m();

  // Scalarize each op's output with a fixed random projection so every
  // output coordinate contributes a distinct weight.
  auto run = [&](const std::string& name, std::vector<Tensor> inputs,
                 std::function<Var(Tape&, std::span<const Var>)> op) {
    const Tensor probe_shape = [&] {
      Tape t(false);
      std::vector<Var> leaves;
      for (const auto& in : inputs) leaves.push_back(t.constant(in));
      return op(t, leaves).value();
    }();
    const Tensor projection = random_normal(probe_shape.shape(), rng);
    auto f = [&](Tape& t, std::span<const Var> leaves) {
      return ops::sum(ops::mul(op(t, leaves), t.constant(projection)));
    };
    results.push_back(CheckResult{name, finite_diff_check(f, std::move(inputs)), tolerance});
  };
  auto randn = [&](Shape s) { return random_normal(s, rng); };

  run("add", {randn({2, 3}), randn({2, 3})},
      [](Tape&, std::span<const Var> v) { return ops::add(v[0], v[1]); });
  run("sub", {randn({2, 3}), randn({2, 3})},
      [](Tape&, std::span<const Var> v) { return ops::sub(v[0], v[1]); });
  run("mul", {randn({2, 3}), randn({2, 3})},
      [](Tape&, std::span<const Var> v) { return ops::mul(v[0], v[1]); });
  run("relu", {randn({2, 8})}, [](Tape&, std::span<const Var> v) { return ops::relu(v[0]); });
  run("sigmoid", {randn({2, 8})},
      [](Tape&, std::span<const Var> v) { return ops::sigmoid(v[0]); });
  run("mean", {randn({3, 4})}, [](Tape&, std::span<const Var> v) { return ops::mean(v[0]); });
  run("concat_channels", {randn({2, 2, 4, 4}), randn({2, 3, 4, 4})},
      [](Tape&, std::span<const Var> v) { return ops::concat_channels(v[0], v[1]); });
  run("add_channel_bias", {randn({2, 3, 4, 4}), randn({3})},
      [](Tape&, std::span<const Var> v) { return ops::add_channel_bias(v[0], v[1]); });
  run("conv2d[s1,p1]", {randn({2, 2, 4, 4}), randn({3, 2, 3, 3})},
      [](Tape&, std::span<const Var> v) { return ops::conv2d(v[0], v[1], 1, 1); });
  run("conv2d[s2,p1,floor]", {randn({2, 2, 4, 4}), randn({3, 2, 3, 3})},
      [](Tape&, std::span<const Var> v) {
        return ops::conv2d(v[0], v[1], 2, 1, ops::SizeRounding::floor);
      });
  run("conv2d[s1,p0]", {randn({1, 2, 5, 5}), randn({2, 2, 3, 3})},
      [](Tape&, std::span<const Var> v) { return ops::conv2d(v[0], v[1], 1, 0); });
  run("max_pool2d", {randn({2, 2, 4, 4})},
      [](Tape&, std::span<const Var> v) { return ops::max_pool2d(v[0]); });
  run("upsample_nearest", {randn({2, 2, 4, 4})},
      [](Tape&, std::span<const Var> v) { return ops::upsample_nearest(v[0], 2); });
  run("bce_with_logits", {randn({2, 1, 4, 4})}, [&rng](Tape&, std::span<const Var> v) {
    Tensor target(v[0].shape());
    Rng local(7);
    for (auto& t : target.data()) t = static_cast<double>(local.below(2));
    (void)rng;
    return ops::bce_with_logits(v[0], target);
  });
  run("batch_norm[train]", {randn({2, 3, 4, 4}), random_uniform({3}, rng, 0.5, 1.5), randn({3})},
      [](Tape&, std::span<const Var> v) {
        return ops::batch_norm(v[0], v[1], v[2], nullptr, true);
      });
  auto eval_state = std::make_shared<ops::BatchNormState>(3);
  for (std::int64_t c = 0; c < 3; ++c) {
    eval_state->running_mean[c] = 0.1 * rng.normal();
    eval_state->running_var[c] = rng.uniform(0.5, 1.5);
  }
  run("batch_norm[eval]", {randn({2, 3, 4, 4}), random_uniform({3}, rng, 0.5, 1.5), randn({3})},
      [eval_state](Tape&, std::span<const Var> v) {
        return ops::batch_norm(v[0], v[1], v[2], eval_state.get(), false);
      });
  run("gconv_z2_to_g[p4m]", {randn({2, 2, 4, 4}), randn({2, 2, 3, 3})},
      [p4m](Tape&, std::span<const Var> v) { return gconv_z2_to_g(v[0], v[1], p4m, 1, 1); });
  run("gconv_g_to_g[p4m]", {randn({1, 2, 8, 4, 4}), randn({2, 2, 8, 3, 3})},
      [p4m](Tape&, std::span<const Var> v) { return gconv_g_to_g(v[0], v[1], p4m, 1, 1); });
  run("gconv_g_to_g[p4,s2]", {randn({1, 2, 4, 4, 4}), randn({2, 2, 4, 3, 3})},
      [](Tape&, std::span<const Var> v) {
        return gconv_g_to_g(v[0], v[1], GroupSpec::p4(), 2, 1, ops::SizeRounding::floor);
      });
  run("g_upsample", {randn({1, 2, 8, 4, 4})},
      [](Tape&, std::span<const Var> v) { return g_upsample(v[0], 2); });
  run("g_projection", {randn({1, 2, 8, 4, 4})},
      [](Tape&, std::span<const Var> v) { return g_projection(v[0]); });
  run("g_max_pool", {randn({1, 2, 8, 4, 4})},
      [](Tape&, std::span<const Var> v) { return g_max_pool(v[0]); });
  run("g_batch_norm[train]",
      {randn({2, 2, 8, 4, 4}), random_uniform({2}, rng, 0.5, 1.5), randn({2})},
      [](Tape&, std::span<const Var> v) {
        return g_batch_norm(v[0], v[1], v[2], nullptr, true);
      });
  return results;
}

CheckResult network_gradient_check(const SegNetConfig& config, int size, std::uint64_t seed,
                                   double tolerance, std::int64_t coords_per_tensor) {
  Rng rng(seed);
  SegNet net(config, rng.next());
  randomize_auxiliary_state(net, rng);
  Parameter image("image", random_normal(Shape{2, 3, size, size}, rng));
  Tensor target(Shape{2, 1, size, size});
  for (auto& t : target.data()) t = static_cast<double>(rng.below(2));

  std::vector<Parameter*> params = net.parameters();
  params.push_back(&image);
  auto f = [&](Tape& tape) {
    // Running statistics are not part of the function being differentiated.
    SegOutput out = net.forward(tape, tape.parameter(image), Mode::train);
    return deep_supervision_loss(out, target, config.ds_weights);
  };
  GradCheckOptions options;
  options.max_coords_per_tensor = coords_per_tensor;
  options.seed = rng.next();
  const double err = finite_diff_check(f, params, options);
  return CheckResult{"network[" + std::string(config.effective_group().name()) + ",width " +
                         std::to_string(config.effective_width()) + "," + std::to_string(size) +
                         "x" + std::to_string(size) + "]",
                     err, tolerance};
}

}  // namespace gseg
