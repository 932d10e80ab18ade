#include "gseg/autograd.hpp"

#include <algorithm>
#include <cmath>

#include "gseg/error.hpp"

namespace gseg {

const Tensor& Var::value() const { return tape_->value(*this); }
bool Var::requires_grad() const { return tape_->requires_grad(*this); }

const Tape::Node& Tape::node(Var v) const {
  require(v.tape_ == this && v.id_ < nodes_.size(), ErrorKind::invalid_argument,
          "variable does not belong to this tape");
  return nodes_[v.id_];
}

Tape::Node& Tape::node(Var v) {
  require(v.tape_ == this && v.id_ < nodes_.size(), ErrorKind::invalid_argument,
          "variable does not belong to this tape");
  return nodes_[v.id_];
}

Var Tape::constant(Tensor value) {
  nodes_.push_back(Node{std::move(value), {}, false, nullptr, {}});
  return Var(this, nodes_.size() - 1);
}

Var Tape::variable(Tensor value) {
  nodes_.push_back(Node{std::move(value), {}, recording_, nullptr, {}});
  return Var(this, nodes_.size() - 1);
}

Var Tape::parameter(Parameter& param) {
  nodes_.push_back(Node{param.value, {}, recording_, recording_ ? &param : nullptr, {}});
  return Var(this, nodes_.size() - 1);
}

Var Tape::record(Tensor value, std::span<const Var> inputs, BackwardFn backward) {
  bool needs = false;
  if (recording_)
    for (const Var& in : inputs) needs = needs || node(in).requires_grad;
  nodes_.push_back(Node{std::move(value), {}, needs, nullptr,
                        needs ? std::move(backward) : BackwardFn{}});
  return Var(this, nodes_.size() - 1);
}

Tensor& Tape::grad(Var v) {
  Node& n = node(v);
  if (n.grad.empty()) n.grad = Tensor(n.value.shape());
  return n.grad;
}

void Tape::backward(Var root) {
  require(recording_, ErrorKind::invalid_argument, "backward on a non-recording tape");
  Node& r = node(root);
  require(r.value.size() == 1, ErrorKind::shape,
          "backward root must be a scalar, got " + shape_string(r.value.shape()));
  if (!r.requires_grad) return;
  grad(root).fill(1.0);
  for (std::size_t i = root.id_ + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (n.grad.empty()) continue;
    if (n.backward) n.backward(*this, n.grad);
    if (n.param) n.param->grad.add_(n.grad);
  }
}

namespace ops {

namespace {

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  require(a.shape() == b.shape(), ErrorKind::shape,
          std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
              shape_string(b.shape()));
}

template <class F>
Tensor map(const Tensor& a, F f) {
  Tensor out(a.shape());
  const double* src = a.ptr();
  double* dst = out.ptr();
  for (std::int64_t i = 0; i < a.size(); ++i) dst[i] = f(src[i]);
  return out;
}

double stable_sigmoid(double z) {
  if (z >= 0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

}  // namespace

Var add(Var a, Var b) {
  require_same_shape(a.value(), b.value(), "add");
  Tensor out = a.value();
  out.add_(b.value());
  return a.tape().record(std::move(out), {a, b}, [a, b](Tape& t, const Tensor& g) {
    if (t.requires_grad(a)) t.grad(a).add_(g);
    if (t.requires_grad(b)) t.grad(b).add_(g);
  });
}

Var sub(Var a, Var b) {
  require_same_shape(a.value(), b.value(), "sub");
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  Tensor out(av.shape());
  for (std::int64_t i = 0; i < out.size(); ++i) out[i] = av[i] - bv[i];
  return a.tape().record(std::move(out), {a, b}, [a, b](Tape& t, const Tensor& g) {
    if (t.requires_grad(a)) t.grad(a).add_(g);
    if (t.requires_grad(b)) {
      Tensor& gb = t.grad(b);
      for (std::int64_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
    }
  });
}

Var mul(Var a, Var b) {
  require_same_shape(a.value(), b.value(), "mul");
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  Tensor out(av.shape());
  for (std::int64_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  return a.tape().record(std::move(out), {a, b}, [a, b](Tape& t, const Tensor& g) {
    const Tensor& av = t.value(a);
    const Tensor& bv = t.value(b);
    if (t.requires_grad(a)) {
      Tensor& ga = t.grad(a);
      for (std::int64_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv[i];
    }
    if (t.requires_grad(b)) {
      Tensor& gb = t.grad(b);
      for (std::int64_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av[i];
    }
  });
}

Var scale(Var a, double factor) {
  Tensor out = map(a.value(), [factor](double v) { return v * factor; });
  return a.tape().record(std::move(out), {a}, [a, factor](Tape& t, const Tensor& g) {
    Tensor& ga = t.grad(a);
    for (std::int64_t i = 0; i < g.size(); ++i) ga[i] += factor * g[i];
  });
}

Var relu(Var a) {
  Tensor out = map(a.value(), [](double v) { return v > 0.0 ? v : 0.0; });
  return a.tape().record(std::move(out), {a}, [a](Tape& t, const Tensor& g) {
    const Tensor& av = t.value(a);
    Tensor& ga = t.grad(a);
    for (std::int64_t i = 0; i < g.size(); ++i)
      if (av[i] > 0.0) ga[i] += g[i];
  });
}

Var sigmoid(Var a) {
  Tensor out = map(a.value(), stable_sigmoid);
  return a.tape().record(std::move(out), {a}, [a](Tape& t, const Tensor& g) {
    const Tensor& av = t.value(a);
    Tensor& ga = t.grad(a);
    for (std::int64_t i = 0; i < g.size(); ++i) {
      const double s = stable_sigmoid(av[i]);
      ga[i] += g[i] * s * (1.0 - s);
    }
  });
}

Var sum(Var a) {
  double total = 0.0;
  for (double v : a.value().data()) total += v;
  return a.tape().record(Tensor(Shape{1}, total), {a}, [a](Tape& t, const Tensor& g) {
    Tensor& ga = t.grad(a);
    for (auto& v : ga.data()) v += g[0];
  });
}

Var mean(Var a) { return scale(sum(a), 1.0 / static_cast<double>(a.value().size())); }

Var reshape(Var a, Shape shape) {
  Tensor out = a.value().reshaped(std::move(shape));
  return a.tape().record(std::move(out), {a}, [a](Tape& t, const Tensor& g) {
    Tensor& ga = t.grad(a);
    for (std::int64_t i = 0; i < g.size(); ++i) ga[i] += g[i];
  });
}

Var concat_channels(Var a, Var b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  require(av.rank() >= 2 && av.rank() == bv.rank(), ErrorKind::shape,
          "concat_channels: rank mismatch");
  for (int i = 0; i < av.rank(); ++i)
    require(i == 1 || av.dim(i) == bv.dim(i), ErrorKind::shape,
            "concat_channels: incompatible shapes " + shape_string(av.shape()) + " and " +
                shape_string(bv.shape()));
  Shape shape = av.shape();
  shape[1] += bv.dim(1);
  const std::int64_t batch = av.dim(0);
  const std::int64_t a_block = av.size() / batch;
  const std::int64_t b_block = bv.size() / batch;
  Tensor out(shape);
  for (std::int64_t n = 0; n < batch; ++n) {
    std::copy_n(av.ptr() + n * a_block, a_block, out.ptr() + n * (a_block + b_block));
    std::copy_n(bv.ptr() + n * b_block, b_block,
                out.ptr() + n * (a_block + b_block) + a_block);
  }
  return a.tape().record(std::move(out), {a, b},
                         [a, b, batch, a_block, b_block](Tape& t, const Tensor& g) {
    for (std::int64_t n = 0; n < batch; ++n) {
      const double* src = g.ptr() + n * (a_block + b_block);
      if (t.requires_grad(a)) {
        double* dst = t.grad(a).ptr() + n * a_block;
        for (std::int64_t i = 0; i < a_block; ++i) dst[i] += src[i];
      }
      if (t.requires_grad(b)) {
        double* dst = t.grad(b).ptr() + n * b_block;
        for (std::int64_t i = 0; i < b_block; ++i) dst[i] += src[a_block + i];
      }
    }
  });
}

Var gather(Var a, std::shared_ptr<const std::vector<std::int64_t>> source, Shape out_shape) {
  require(static_cast<std::int64_t>(source->size()) == num_elements(out_shape),
          ErrorKind::shape, "gather: index length does not match output shape");
  const Tensor& av = a.value();
  Tensor out(std::move(out_shape));
  const auto& idx = *source;
  for (std::size_t i = 0; i < idx.size(); ++i) {
    require(idx[i] >= 0 && idx[i] < av.size(), ErrorKind::shape, "gather: index out of range");
    out[static_cast<std::int64_t>(i)] = av[idx[i]];
  }
  return a.tape().record(std::move(out), {a}, [a, source](Tape& t, const Tensor& g) {
    Tensor& ga = t.grad(a);
    const auto& idx = *source;
    for (std::size_t i = 0; i < idx.size(); ++i) ga[idx[i]] += g[static_cast<std::int64_t>(i)];
  });
}

Var add_channel_bias(Var x, Var b) {
  const Tensor& xv = x.value();
  const Tensor& bv = b.value();
  require(xv.rank() >= 2 && bv.rank() == 1 && bv.dim(0) == xv.dim(1), ErrorKind::shape,
          "add_channel_bias: bias " + shape_string(bv.shape()) + " does not match " +
              shape_string(xv.shape()));
  const std::int64_t batch = xv.dim(0);
  const std::int64_t channels = xv.dim(1);
  const std::int64_t inner = xv.size() / (batch * channels);
  Tensor out = xv;
  for (std::int64_t n = 0; n < batch; ++n)
    for (std::int64_t c = 0; c < channels; ++c) {
      double* p = out.ptr() + (n * channels + c) * inner;
      for (std::int64_t i = 0; i < inner; ++i) p[i] += bv[c];
    }
  return x.tape().record(std::move(out), {x, b},
                         [x, b, batch, channels, inner](Tape& t, const Tensor& g) {
    if (t.requires_grad(x)) t.grad(x).add_(g);
    if (t.requires_grad(b)) {
      Tensor& gb = t.grad(b);
      for (std::int64_t n = 0; n < batch; ++n)
        for (std::int64_t c = 0; c < channels; ++c) {
          const double* p = g.ptr() + (n * channels + c) * inner;
          double s = 0.0;
          for (std::int64_t i = 0; i < inner; ++i) s += p[i];
          gb[c] += s;
        }
    }
  });
}

Var max_pool2d(Var x) {
  const Tensor& xv = x.value();
  require(xv.rank() >= 2, ErrorKind::shape, "max_pool2d: rank < 2");
  const std::int64_t h = xv.dim(xv.rank() - 2);
  const std::int64_t w = xv.dim(xv.rank() - 1);
  require(h % 2 == 0 && w % 2 == 0, ErrorKind::shape,
          "max_pool2d: spatial dims must be even, got " + shape_string(xv.shape()));
  Shape shape = xv.shape();
  shape[shape.size() - 2] = h / 2;
  shape[shape.size() - 1] = w / 2;
  Tensor out(shape);
  auto argmax = std::make_shared<std::vector<std::int64_t>>(static_cast<size_t>(out.size()));
  const std::int64_t planes = xv.size() / (h * w);
  const std::int64_t oh = h / 2, ow = w / 2;
  for (std::int64_t p = 0; p < planes; ++p) {
    const std::int64_t in_base = p * h * w;
    const std::int64_t out_base = p * oh * ow;
    for (std::int64_t i = 0; i < oh; ++i)
      for (std::int64_t j = 0; j < ow; ++j) {
        const std::int64_t cands[4] = {in_base + (2 * i) * w + 2 * j,
                                       in_base + (2 * i) * w + 2 * j + 1,
                                       in_base + (2 * i + 1) * w + 2 * j,
                                       in_base + (2 * i + 1) * w + 2 * j + 1};
        std::int64_t best = cands[0];
        for (int c = 1; c < 4; ++c)
          if (xv[cands[c]] > xv[best]) best = cands[c];
        out[out_base + i * ow + j] = xv[best];
        (*argmax)[static_cast<size_t>(out_base + i * ow + j)] = best;
      }
  }
  return x.tape().record(std::move(out), {x}, [x, argmax](Tape& t, const Tensor& g) {
    Tensor& gx = t.grad(x);
    for (std::size_t i = 0; i < argmax->size(); ++i)
      gx[(*argmax)[i]] += g[static_cast<std::int64_t>(i)];
  });
}

Var upsample_nearest(Var x, int factor) {
  const Tensor& xv = x.value();
  require(factor >= 1, ErrorKind::invalid_argument, "upsample_nearest: factor must be >= 1");
  require(xv.rank() >= 2, ErrorKind::shape, "upsample_nearest: rank < 2");
  const std::int64_t h = xv.dim(xv.rank() - 2);
  const std::int64_t w = xv.dim(xv.rank() - 1);
  const std::int64_t oh = h * factor, ow = w * factor;
  Shape shape = xv.shape();
  shape[shape.size() - 2] = oh;
  shape[shape.size() - 1] = ow;
  Tensor out(shape);
  const std::int64_t planes = xv.size() / (h * w);
  for (std::int64_t p = 0; p < planes; ++p) {
    const double* src = xv.ptr() + p * h * w;
    double* dst = out.ptr() + p * oh * ow;
    for (std::int64_t i = 0; i < oh; ++i)
      for (std::int64_t j = 0; j < ow; ++j) dst[i * ow + j] = src[(i / factor) * w + j / factor];
  }
  return x.tape().record(std::move(out), {x},
                         [x, factor, planes, h, w](Tape& t, const Tensor& g) {
    Tensor& gx = t.grad(x);
    const std::int64_t oh = h * factor, ow = w * factor;
    for (std::int64_t p = 0; p < planes; ++p) {
      const double* src = g.ptr() + p * oh * ow;
      double* dst = gx.ptr() + p * h * w;
      for (std::int64_t i = 0; i < oh; ++i)
        for (std::int64_t j = 0; j < ow; ++j) dst[(i / factor) * w + j / factor] += src[i * ow + j];
    }
  });
}

Var mean_axis(Var x, int axis) {
  const Tensor& xv = x.value();
  require(axis >= 0 && axis < xv.rank(), ErrorKind::shape, "mean_axis: axis out of range");
  std::int64_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= xv.dim(i);
  for (int i = axis + 1; i < xv.rank(); ++i) inner *= xv.dim(i);
  const std::int64_t n = xv.dim(axis);
  Shape shape = xv.shape();
  shape.erase(shape.begin() + axis);
  if (shape.empty()) shape = {1};
  Tensor out(shape);
  const double inv = 1.0 / static_cast<double>(n);
  for (std::int64_t o = 0; o < outer; ++o)
    for (std::int64_t i = 0; i < inner; ++i) {
      double s = 0.0;
      for (std::int64_t k = 0; k < n; ++k) s += xv[(o * n + k) * inner + i];
      out[o * inner + i] = s * inv;
    }
  return x.tape().record(std::move(out), {x}, [x, outer, inner, n, inv](Tape& t, const Tensor& g) {
    Tensor& gx = t.grad(x);
    for (std::int64_t o = 0; o < outer; ++o)
      for (std::int64_t k = 0; k < n; ++k)
        for (std::int64_t i = 0; i < inner; ++i)
          gx[(o * n + k) * inner + i] += g[o * inner + i] * inv;
  });
}

Var bce_with_logits(Var logits, const Tensor& target) {
  const Tensor& z = logits.value();
  require_same_shape(z, target, "bce_with_logits");
  for (double v : target.data())
    require(v == 0.0 || v == 1.0, ErrorKind::invalid_argument,
            "bce_with_logits: targets must be 0 or 1");
  double total = 0.0;
  for (std::int64_t i = 0; i < z.size(); ++i) {
    const double zi = z[i];
    total += std::max(zi, 0.0) - zi * target[i] + std::log1p(std::exp(-std::abs(zi)));
  }
  const double inv_n = 1.0 / static_cast<double>(z.size());
  auto tgt = std::make_shared<Tensor>(target);
  return logits.tape().record(Tensor(Shape{1}, total * inv_n), {logits},
                              [logits, tgt, inv_n](Tape& t, const Tensor& g) {
    const Tensor& z = t.value(logits);
    Tensor& gz = t.grad(logits);
    for (std::int64_t i = 0; i < z.size(); ++i)
      gz[i] += g[0] * (stable_sigmoid(z[i]) - (*tgt)[i]) * inv_n;
  });
}

Var batch_norm(Var x, Var gamma, Var beta, BatchNormState* state, bool training,
               bool update_running) {
  const Tensor& xv = x.value();
  require(xv.rank() >= 2, ErrorKind::shape, "batch_norm: rank < 2");
  const std::int64_t batch = xv.dim(0);
  const std::int64_t channels = xv.dim(1);
  const std::int64_t inner = xv.size() / (batch * channels);
  require(gamma.value().shape() == Shape{channels} && beta.value().shape() == Shape{channels},
          ErrorKind::shape, "batch_norm: affine parameters must have shape [C]");
  const double eps = state ? state->eps : 1e-5;
  const double count = static_cast<double>(batch * inner);

  std::vector<double> mean(static_cast<size_t>(channels)), var(static_cast<size_t>(channels));
  if (training) {
    for (std::int64_t c = 0; c < channels; ++c) {
      double s = 0.0;
      for (std::int64_t n = 0; n < batch; ++n) {
        const double* p = xv.ptr() + (n * channels + c) * inner;
        for (std::int64_t i = 0; i < inner; ++i) s += p[i];
      }
      const double m = s / count;
      double v = 0.0;
      for (std::int64_t n = 0; n < batch; ++n) {
        const double* p = xv.ptr() + (n * channels + c) * inner;
        for (std::int64_t i = 0; i < inner; ++i) v += (p[i] - m) * (p[i] - m);
      }
      mean[c] = m;
      var[c] = v / count;
    }
    if (state && update_running) {
      const double unbias = count > 1 ? count / (count - 1) : 1.0;
      for (std::int64_t c = 0; c < channels; ++c) {
        state->running_mean[c] =
            (1 - state->momentum) * state->running_mean[c] + state->momentum * mean[c];
        state->running_var[c] =
            (1 - state->momentum) * state->running_var[c] + state->momentum * var[c] * unbias;
      }
    }
  } else {
    require(state != nullptr, ErrorKind::invalid_argument,
            "batch_norm: inference mode needs running statistics");
    for (std::int64_t c = 0; c < channels; ++c) {
      mean[c] = state->running_mean[c];
      var[c] = state->running_var[c];
    }
  }

  auto inv_std = std::make_shared<std::vector<double>>(static_cast<size_t>(channels));
  for (std::int64_t c = 0; c < channels; ++c) (*inv_std)[c] = 1.0 / std::sqrt(var[c] + eps);

  // Normalized values are kept for the backward pass.
  auto xhat = std::make_shared<Tensor>(xv.shape());
  Tensor out(xv.shape());
  const Tensor& gv = gamma.value();
  const Tensor& bv = beta.value();
  for (std::int64_t n = 0; n < batch; ++n)
    for (std::int64_t c = 0; c < channels; ++c) {
      const std::int64_t base = (n * channels + c) * inner;
      for (std::int64_t i = 0; i < inner; ++i) {
        const double h = (xv[base + i] - mean[c]) * (*inv_std)[c];
        (*xhat)[base + i] = h;
        out[base + i] = gv[c] * h + bv[c];
      }
    }

  return x.tape().record(std::move(out), {x, gamma, beta},
                         [x, gamma, beta, xhat, inv_std, training, batch, channels, inner,
                          count](Tape& t, const Tensor& g) {
    const Tensor& gv = t.value(gamma);
    for (std::int64_t c = 0; c < channels; ++c) {
      double sum_g = 0.0, sum_gx = 0.0;
      for (std::int64_t n = 0; n < batch; ++n) {
        const std::int64_t base = (n * channels + c) * inner;
        for (std::int64_t i = 0; i < inner; ++i) {
          sum_g += g[base + i];
          sum_gx += g[base + i] * (*xhat)[base + i];
        }
      }
      if (t.requires_grad(gamma)) t.grad(gamma)[c] += sum_gx;
      if (t.requires_grad(beta)) t.grad(beta)[c] += sum_g;
      if (!t.requires_grad(x)) continue;
      Tensor& gx = t.grad(x);
      const double k = gv[c] * (*inv_std)[c];
      for (std::int64_t n = 0; n < batch; ++n) {
        const std::int64_t base = (n * channels + c) * inner;
        for (std::int64_t i = 0; i < inner; ++i) {
          if (training)
            gx[base + i] +=
                k * (g[base + i] - sum_g / count - (*xhat)[base + i] * sum_gx / count);
          else
            gx[base + i] += k * g[base + i];
        }
      }
    }
  });
}

}  // namespace ops

double finite_diff_check(const std::function<Var(Tape&)>& f,
                         std::span<Parameter* const> params,
                         const GradCheckOptions& options) {
  for (Parameter* p : params) p->zero_grad();
  {
    Tape tape;
    Var out = f(tape);
    require(out.value().size() == 1, ErrorKind::shape, "finite_diff_check: f must be scalar");
    require(std::isfinite(out.value()[0]), ErrorKind::numeric,
            "finite_diff_check: non-finite function value");
    tape.backward(out);
  }

  auto evaluate = [&f]() {
    Tape probe(false);
    const double v = f(probe).value()[0];
    require(std::isfinite(v), ErrorKind::numeric,
            "finite_diff_check: non-finite value at perturbed point");
    return v;
  };

  Rng rng(options.seed);
  const double eps = options.epsilon;
  double worst = 0.0;
  for (Parameter* p : params) {
    std::vector<std::int64_t> coords(static_cast<size_t>(p->value.size()));
    for (std::int64_t i = 0; i < p->value.size(); ++i) coords[static_cast<size_t>(i)] = i;
    if (options.max_coords_per_tensor > 0 &&
        static_cast<std::int64_t>(coords.size()) > options.max_coords_per_tensor) {
      rng.shuffle(coords);
      coords.resize(static_cast<size_t>(options.max_coords_per_tensor));
    }
    for (std::int64_t i : coords) {
      const double saved = p->value[i];
      p->value[i] = saved + eps;
      const double up = evaluate();
      p->value[i] = saved - eps;
      const double down = evaluate();
      p->value[i] = saved;
      const double numeric = (up - down) / (2 * eps);
      const double analytic = p->grad[i];
      require(std::isfinite(analytic), ErrorKind::numeric,
              "finite_diff_check: non-finite analytic gradient");
      const double err = std::abs(numeric - analytic) /
                         std::max({1.0, std::abs(numeric), std::abs(analytic)});
      worst = std::max(worst, err);
    }
  }
  return worst;
}

double finite_diff_check(const std::function<Var(Tape&, std::span<const Var>)>& f,
                         std::vector<Tensor> inputs, const GradCheckOptions& options) {
  std::vector<Parameter> storage;
  storage.reserve(inputs.size());
  for (size_t i = 0; i < inputs.size(); ++i)
    storage.emplace_back("input" + std::to_string(i), std::move(inputs[i]));
  std::vector<Parameter*> ptrs;
  for (auto& p : storage) ptrs.push_back(&p);
  auto wrapped = [&](Tape& tape) {
    std::vector<Var> leaves;
    for (auto& p : storage) leaves.push_back(tape.parameter(p));
    return f(tape, leaves);
  };
  return finite_diff_check(wrapped, ptrs, options);
}

}  // namespace gseg
