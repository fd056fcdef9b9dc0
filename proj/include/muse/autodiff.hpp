#pragma once

// Minimal reverse-mode tape over row-major Eigen matrices. Nodes are appended
// in evaluation order, so a single reverse sweep visits them topologically.
// Every op is templated on the scalar so the same network code runs in float
// for training/sampling and in double for finite-difference checks.

#include "muse/types.hpp"

#include <cmath>
#include <functional>
#include <vector>

namespace muse::ad {

struct Var {
  int id = -1;
  bool valid() const { return id >= 0; }
};

template <typename Scalar>
class Tape {
 public:
  using M = Mat<Scalar>;

  Var constant(M value) { return push(std::move(value), nullptr, false); }
  Var leaf(M value) { return push(std::move(value), nullptr, true); }
  // References external storage that must outlive the tape.
  Var constant_ref(const M& value) { return push(M(), &value, false); }
  Var leaf_ref(const M& value) { return push(M(), &value, true); }

  const M& value(Var v) const {
    const Node& n = nodes_[static_cast<std::size_t>(v.id)];
    return n.external ? *n.external : n.value;
  }
  bool requires_grad(Var v) const { return nodes_[static_cast<std::size_t>(v.id)].requires_grad; }

  // Gradient of the seeded output w.r.t. `v`; zeros if nothing reached it.
  M grad(Var v) const {
    const Node& n = nodes_[static_cast<std::size_t>(v.id)];
    if (n.grad.size() == 0) return M::Zero(value(v).rows(), value(v).cols());
    return n.grad;
  }

  // Appends an op result. `back` receives the output gradient and must call
  // accumulate() on the inputs that require it.
  Var record(M value, bool requires_grad, std::function<void(const M&)> back) {
    Var out = push(std::move(value), nullptr, requires_grad);
    if (requires_grad) nodes_.back().back = std::move(back);
    return out;
  }

  template <typename Expr>
  void accumulate(Var v, const Expr& g) {
    Node& n = nodes_[static_cast<std::size_t>(v.id)];
    if (!n.requires_grad) return;
    if (n.grad.size() == 0) {
      n.grad = g;
    } else {
      n.grad += g;
    }
  }

  void backward(Var out, const M& seed) {
    Node& root = nodes_[static_cast<std::size_t>(out.id)];
    if (seed.rows() != value(out).rows() || seed.cols() != value(out).cols()) {
      throw ShapeError("backward: seed shape mismatch");
    }
    root.grad = seed;
    for (int i = out.id; i >= 0; --i) {
      Node& n = nodes_[static_cast<std::size_t>(i)];
      if (!n.back || n.grad.size() == 0) continue;
      const M g = std::move(n.grad);
      n.grad = g;  // keep for inspection
      n.back(g);
    }
  }

  // Scalar (1x1) outputs.
  void backward(Var out) { backward(out, M::Constant(1, 1, Scalar(1))); }

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    M value;
    const M* external = nullptr;
    M grad;
    bool requires_grad = false;
    std::function<void(const M&)> back;
  };

  Var push(M value, const M* external, bool requires_grad) {
    Node n;
    n.value = std::move(value);
    n.external = external;
    n.requires_grad = requires_grad;
    nodes_.push_back(std::move(n));
    return Var{static_cast<int>(nodes_.size()) - 1};
  }

  std::vector<Node> nodes_;
};

// ---------------------------------------------------------------------------
// Elementwise and dense ops.

template <typename Scalar>
Var matmul(Tape<Scalar>& t, Var a, Var b) {
  using M = Mat<Scalar>;
  if (t.value(a).cols() != t.value(b).rows()) throw ShapeError("matmul: inner dimension mismatch");
  M out = t.value(a) * t.value(b);
  const bool rg = t.requires_grad(a) || t.requires_grad(b);
  return t.record(std::move(out), rg, [&t, a, b](const M& g) {
    if (t.requires_grad(a)) t.accumulate(a, g * t.value(b).transpose());
    if (t.requires_grad(b)) t.accumulate(b, t.value(a).transpose() * g);
  });
}

template <typename Scalar>
Var add(Tape<Scalar>& t, Var a, Var b) {
  using M = Mat<Scalar>;
  if (t.value(a).rows() != t.value(b).rows() || t.value(a).cols() != t.value(b).cols()) {
    throw ShapeError("add: shape mismatch");
  }
  M out = t.value(a) + t.value(b);
  return t.record(std::move(out), t.requires_grad(a) || t.requires_grad(b), [&t, a, b](const M& g) {
    t.accumulate(a, g);
    t.accumulate(b, g);
  });
}

template <typename Scalar>
Var sub(Tape<Scalar>& t, Var a, Var b) {
  using M = Mat<Scalar>;
  if (t.value(a).rows() != t.value(b).rows() || t.value(a).cols() != t.value(b).cols()) {
    throw ShapeError("sub: shape mismatch");
  }
  M out = t.value(a) - t.value(b);
  return t.record(std::move(out), t.requires_grad(a) || t.requires_grad(b), [&t, a, b](const M& g) {
    t.accumulate(a, g);
    t.accumulate(b, -g);
  });
}

// a * s_a + b * s_b with compile-time-free scalar weights.
template <typename Scalar>
Var axpby(Tape<Scalar>& t, Var a, Scalar sa, Var b, Scalar sb) {
  using M = Mat<Scalar>;
  if (t.value(a).rows() != t.value(b).rows() || t.value(a).cols() != t.value(b).cols()) {
    throw ShapeError("axpby: shape mismatch");
  }
  M out = sa * t.value(a) + sb * t.value(b);
  return t.record(std::move(out), t.requires_grad(a) || t.requires_grad(b),
                  [&t, a, b, sa, sb](const M& g) {
                    t.accumulate(a, sa * g);
                    t.accumulate(b, sb * g);
                  });
}

// Per-sample weighted sum: rows of sample i are wa[i] * a + wb[i] * b.
template <typename Scalar>
Var axpby_per_sample(Tape<Scalar>& t, Var a, std::vector<Scalar> wa, Var b, std::vector<Scalar> wb,
                     int rows_per_sample) {
  using M = Mat<Scalar>;
  const M& av = t.value(a);
  const M& bv = t.value(b);
  if (av.rows() != bv.rows() || av.cols() != bv.cols()) throw ShapeError("axpby_per_sample: shape mismatch");
  if (wa.size() != wb.size() || static_cast<Eigen::Index>(wa.size()) * rows_per_sample != av.rows()) {
    throw ShapeError("axpby_per_sample: weight count does not match the batch");
  }
  M out(av.rows(), av.cols());
  for (std::size_t i = 0; i < wa.size(); ++i) {
    const auto r0 = static_cast<Eigen::Index>(i) * rows_per_sample;
    out.middleRows(r0, rows_per_sample) =
        wa[i] * av.middleRows(r0, rows_per_sample) + wb[i] * bv.middleRows(r0, rows_per_sample);
  }
  return t.record(std::move(out), t.requires_grad(a) || t.requires_grad(b),
                  [&t, a, b, wa = std::move(wa), wb = std::move(wb), rows_per_sample](const M& g) {
                    M ga(g.rows(), g.cols()), gb(g.rows(), g.cols());
                    for (std::size_t i = 0; i < wa.size(); ++i) {
                      const auto r0 = static_cast<Eigen::Index>(i) * rows_per_sample;
                      ga.middleRows(r0, rows_per_sample) = wa[i] * g.middleRows(r0, rows_per_sample);
                      gb.middleRows(r0, rows_per_sample) = wb[i] * g.middleRows(r0, rows_per_sample);
                    }
                    t.accumulate(a, ga);
                    t.accumulate(b, gb);
                  });
}

template <typename Scalar>
Var scale(Tape<Scalar>& t, Var a, Scalar s) {
  using M = Mat<Scalar>;
  M out = s * t.value(a);
  return t.record(std::move(out), t.requires_grad(a), [&t, a, s](const M& g) { t.accumulate(a, s * g); });
}

// Adds a 1 x C row vector to every row.
template <typename Scalar>
Var add_row(Tape<Scalar>& t, Var a, Var bias) {
  using M = Mat<Scalar>;
  if (t.value(bias).rows() != 1 || t.value(bias).cols() != t.value(a).cols()) {
    throw ShapeError("add_row: bias must be 1 x cols");
  }
  M out = t.value(a).rowwise() + t.value(bias).row(0);
  return t.record(std::move(out), t.requires_grad(a) || t.requires_grad(bias), [&t, a, bias](const M& g) {
    t.accumulate(a, g);
    if (t.requires_grad(bias)) t.accumulate(bias, g.colwise().sum());
  });
}

template <typename Scalar>
Var silu(Tape<Scalar>& t, Var a) {
  using M = Mat<Scalar>;
  const M& x = t.value(a);
  M sig = (Scalar(1) + (-x.array()).exp()).inverse().matrix();
  M out = (x.array() * sig.array()).matrix();
  return t.record(std::move(out), t.requires_grad(a), [&t, a, sig = std::move(sig)](const M& g) {
    const auto& xv = t.value(a).array();
    t.accumulate(a, (g.array() * sig.array() * (Scalar(1) + xv * (Scalar(1) - sig.array()))).matrix());
  });
}

template <typename Scalar>
Var concat_cols(Tape<Scalar>& t, Var a, Var b) {
  using M = Mat<Scalar>;
  const M& av = t.value(a);
  const M& bv = t.value(b);
  if (av.rows() != bv.rows()) throw ShapeError("concat_cols: row mismatch");
  M out(av.rows(), av.cols() + bv.cols());
  out << av, bv;
  const auto ca = av.cols(), cb = bv.cols();
  return t.record(std::move(out), t.requires_grad(a) || t.requires_grad(b), [&t, a, b, ca, cb](const M& g) {
    if (t.requires_grad(a)) t.accumulate(a, g.leftCols(ca));
    if (t.requires_grad(b)) t.accumulate(b, g.rightCols(cb));
  });
}

template <typename Scalar>
Var concat_rows(Tape<Scalar>& t, Var a, Var b) {
  using M = Mat<Scalar>;
  const M& av = t.value(a);
  const M& bv = t.value(b);
  if (av.cols() != bv.cols()) throw ShapeError("concat_rows: column mismatch");
  M out(av.rows() + bv.rows(), av.cols());
  out << av, bv;
  const auto ra = av.rows(), rb = bv.rows();
  return t.record(std::move(out), t.requires_grad(a) || t.requires_grad(b), [&t, a, b, ra, rb](const M& g) {
    if (t.requires_grad(a)) t.accumulate(a, g.topRows(ra));
    if (t.requires_grad(b)) t.accumulate(b, g.bottomRows(rb));
  });
}

// Repeats the rows of `a` `times` times (stacked), e.g. to share one token
// block across a batch.
template <typename Scalar>
Var tile_rows(Tape<Scalar>& t, Var a, int times) {
  using M = Mat<Scalar>;
  const M& av = t.value(a);
  M out(av.rows() * times, av.cols());
  for (int i = 0; i < times; ++i) out.middleRows(i * av.rows(), av.rows()) = av;
  const auto r = av.rows();
  return t.record(std::move(out), t.requires_grad(a), [&t, a, times, r](const M& g) {
    M acc = g.topRows(r);
    for (int i = 1; i < times; ++i) acc += g.middleRows(i * r, r);
    t.accumulate(a, acc);
  });
}

// Rows of `table` selected by `ids` (embedding lookup).
template <typename Scalar>
Var gather_rows(Tape<Scalar>& t, Var table, std::vector<int> ids) {
  using M = Mat<Scalar>;
  const M& tv = t.value(table);
  M out(static_cast<Eigen::Index>(ids.size()), tv.cols());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || ids[i] >= tv.rows()) throw ShapeError("gather_rows: id out of range");
    out.row(static_cast<Eigen::Index>(i)) = tv.row(ids[i]);
  }
  return t.record(std::move(out), t.requires_grad(table), [&t, table, ids = std::move(ids)](const M& g) {
    M acc = M::Zero(t.value(table).rows(), t.value(table).cols());
    for (std::size_t i = 0; i < ids.size(); ++i) acc.row(ids[i]) += g.row(static_cast<Eigen::Index>(i));
    t.accumulate(table, acc);
  });
}

// Feature-wise modulation: rows of sample b are scaled by (1 + gamma_b) and
// shifted by beta_b, where [gamma | beta] is row b of `gb` (B x 2C).
template <typename Scalar>
Var film(Tape<Scalar>& t, Var x, Var gb, int rows_per_sample) {
  using M = Mat<Scalar>;
  const M& xv = t.value(x);
  const M& gv = t.value(gb);
  const auto c = xv.cols();
  const auto batch = gv.rows();
  if (gv.cols() != 2 * c || xv.rows() != batch * rows_per_sample) throw ShapeError("film: shape mismatch");
  M out(xv.rows(), c);
  for (Eigen::Index b = 0; b < batch; ++b) {
    const auto gamma = (gv.row(b).head(c).array() + Scalar(1)).matrix();
    out.middleRows(b * rows_per_sample, rows_per_sample) =
        (xv.middleRows(b * rows_per_sample, rows_per_sample).array().rowwise() * gamma.array()).rowwise() +
        gv.row(b).tail(c).array();
  }
  return t.record(std::move(out), t.requires_grad(x) || t.requires_grad(gb),
                  [&t, x, gb, rows_per_sample, c, batch](const M& g) {
                    const M& xv2 = t.value(x);
                    const M& gv2 = t.value(gb);
                    if (t.requires_grad(x)) {
                      M dx(xv2.rows(), c);
                      for (Eigen::Index b = 0; b < batch; ++b) {
                        const auto gamma = (gv2.row(b).head(c).array() + Scalar(1)).matrix();
                        dx.middleRows(b * rows_per_sample, rows_per_sample) =
                            (g.middleRows(b * rows_per_sample, rows_per_sample).array().rowwise() *
                             gamma.array())
                                .matrix();
                      }
                      t.accumulate(x, dx);
                    }
                    if (t.requires_grad(gb)) {
                      M dg(batch, 2 * c);
                      for (Eigen::Index b = 0; b < batch; ++b) {
                        const auto gs = g.middleRows(b * rows_per_sample, rows_per_sample);
                        const auto xs = xv2.middleRows(b * rows_per_sample, rows_per_sample);
                        dg.row(b).head(c) = (gs.array() * xs.array()).colwise().sum().matrix();
                        dg.row(b).tail(c) = gs.colwise().sum();
                      }
                      t.accumulate(gb, dg);
                    }
                  });
}

// Per-row layer normalisation with learned gain and bias (1 x C each).
template <typename Scalar>
Var layer_norm(Tape<Scalar>& t, Var x, Var gain, Var bias, Scalar epsilon = Scalar(1e-5)) {
  using M = Mat<Scalar>;
  const M& xv = t.value(x);
  const auto c = static_cast<Scalar>(xv.cols());
  Vec<Scalar> mean = xv.rowwise().sum() / c;
  M xc = xv.colwise() - mean;
  Vec<Scalar> inv_std = ((xc.array().square().rowwise().sum() / c) + epsilon).rsqrt().matrix();
  M xhat = (xc.array().colwise() * inv_std.array()).matrix();
  M out = (xhat.array().rowwise() * t.value(gain).row(0).array()).rowwise() + t.value(bias).row(0).array();
  const bool rg = t.requires_grad(x) || t.requires_grad(gain) || t.requires_grad(bias);
  return t.record(std::move(out), rg,
                  [&t, x, gain, bias, c, xhat = std::move(xhat), inv_std = std::move(inv_std)](const M& g) {
                    if (t.requires_grad(gain)) t.accumulate(gain, (g.array() * xhat.array()).colwise().sum().matrix());
                    if (t.requires_grad(bias)) t.accumulate(bias, g.colwise().sum());
                    if (t.requires_grad(x)) {
                      M dxhat = (g.array().rowwise() * t.value(gain).row(0).array()).matrix();
                      Vec<Scalar> m1 = dxhat.rowwise().sum() / c;
                      Vec<Scalar> m2 = (dxhat.array() * xhat.array()).rowwise().sum().matrix() / c;
                      M dx = ((dxhat.array().colwise() - m1.array()) - xhat.array().colwise() * m2.array())
                                 .colwise() *
                             inv_std.array();
                      t.accumulate(x, dx);
                    }
                  });
}

// ---------------------------------------------------------------------------
// Spatial ops on (B*H*W) x C feature maps.

struct ConvGeometry {
  int batch = 1;
  int height = 0;
  int width = 0;
  int kernel = 3;
  int stride = 1;
  int pad = 1;
  int out_height() const { return (height + 2 * pad - kernel) / stride + 1; }
  int out_width() const { return (width + 2 * pad - kernel) / stride + 1; }
};

namespace detail {

template <typename Scalar>
Mat<Scalar> im2col(const Mat<Scalar>& x, const ConvGeometry& g) {
  const auto cin = x.cols();
  const int oh = g.out_height(), ow = g.out_width();
  Mat<Scalar> cols(static_cast<Eigen::Index>(g.batch) * oh * ow, g.kernel * g.kernel * cin);
  for (int b = 0; b < g.batch; ++b) {
    for (int oy = 0; oy < oh; ++oy) {
      for (int ox = 0; ox < ow; ++ox) {
        const Eigen::Index r = (static_cast<Eigen::Index>(b) * oh + oy) * ow + ox;
        for (int ky = 0; ky < g.kernel; ++ky) {
          const int iy = oy * g.stride + ky - g.pad;
          for (int kx = 0; kx < g.kernel; ++kx) {
            const int ix = ox * g.stride + kx - g.pad;
            auto seg = cols.row(r).segment((ky * g.kernel + kx) * cin, cin);
            if (iy < 0 || iy >= g.height || ix < 0 || ix >= g.width) {
              seg.setZero();
            } else {
              seg = x.row((static_cast<Eigen::Index>(b) * g.height + iy) * g.width + ix);
            }
          }
        }
      }
    }
  }
  return cols;
}

template <typename Scalar>
Mat<Scalar> col2im(const Mat<Scalar>& cols, const ConvGeometry& g, Eigen::Index cin) {
  const int oh = g.out_height(), ow = g.out_width();
  Mat<Scalar> dx = Mat<Scalar>::Zero(static_cast<Eigen::Index>(g.batch) * g.height * g.width, cin);
  for (int b = 0; b < g.batch; ++b) {
    for (int oy = 0; oy < oh; ++oy) {
      for (int ox = 0; ox < ow; ++ox) {
        const Eigen::Index r = (static_cast<Eigen::Index>(b) * oh + oy) * ow + ox;
        for (int ky = 0; ky < g.kernel; ++ky) {
          const int iy = oy * g.stride + ky - g.pad;
          if (iy < 0 || iy >= g.height) continue;
          for (int kx = 0; kx < g.kernel; ++kx) {
            const int ix = ox * g.stride + kx - g.pad;
            if (ix < 0 || ix >= g.width) continue;
            dx.row((static_cast<Eigen::Index>(b) * g.height + iy) * g.width + ix) +=
                cols.row(r).segment((ky * g.kernel + kx) * cin, cin);
          }
        }
      }
    }
  }
  return dx;
}

}  // namespace detail

// Convolution with weights laid out as (k*k*Cin) x Cout and a 1 x Cout bias.
template <typename Scalar>
Var conv2d(Tape<Scalar>& t, Var x, Var weight, Var bias, const ConvGeometry& geom) {
  using M = Mat<Scalar>;
  const M& xv = t.value(x);
  const auto cin = xv.cols();
  if (xv.rows() != static_cast<Eigen::Index>(geom.batch) * geom.height * geom.width) {
    throw ShapeError("conv2d: input rows do not match geometry");
  }
  if (t.value(weight).rows() != geom.kernel * geom.kernel * cin) throw ShapeError("conv2d: weight shape mismatch");
  const bool pointwise = geom.kernel == 1 && geom.stride == 1 && geom.pad == 0;
  M cols = pointwise ? M() : detail::im2col(xv, geom);
  const M& in = pointwise ? xv : cols;
  M out = in * t.value(weight);
  out.rowwise() += t.value(bias).row(0);
  const bool rg = t.requires_grad(x) || t.requires_grad(weight) || t.requires_grad(bias);
  return t.record(std::move(out), rg, [&t, x, weight, bias, geom, cin, pointwise, cols = std::move(cols)](const M& g) {
    const M& in2 = pointwise ? t.value(x) : cols;
    if (t.requires_grad(weight)) t.accumulate(weight, in2.transpose() * g);
    if (t.requires_grad(bias)) t.accumulate(bias, g.colwise().sum());
    if (t.requires_grad(x)) {
      M dcols = g * t.value(weight).transpose();
      if (pointwise) {
        t.accumulate(x, dcols);
      } else {
        t.accumulate(x, detail::col2im(dcols, geom, cin));
      }
    }
  });
}

// Nearest-neighbour 2x upsampling.
template <typename Scalar>
Var upsample2x(Tape<Scalar>& t, Var x, int batch, int height, int width) {
  using M = Mat<Scalar>;
  const M& xv = t.value(x);
  const int oh = 2 * height, ow = 2 * width;
  M out(static_cast<Eigen::Index>(batch) * oh * ow, xv.cols());
  for (int b = 0; b < batch; ++b)
    for (int y = 0; y < oh; ++y)
      for (int xx = 0; xx < ow; ++xx)
        out.row((static_cast<Eigen::Index>(b) * oh + y) * ow + xx) =
            xv.row((static_cast<Eigen::Index>(b) * height + y / 2) * width + xx / 2);
  return t.record(std::move(out), t.requires_grad(x), [&t, x, batch, height, width](const M& g) {
    const int oh2 = 2 * height, ow2 = 2 * width;
    M dx = M::Zero(static_cast<Eigen::Index>(batch) * height * width, g.cols());
    for (int b = 0; b < batch; ++b)
      for (int y = 0; y < oh2; ++y)
        for (int xx = 0; xx < ow2; ++xx)
          dx.row((static_cast<Eigen::Index>(b) * height + y / 2) * width + xx / 2) +=
              g.row((static_cast<Eigen::Index>(b) * oh2 + y) * ow2 + xx);
    t.accumulate(x, dx);
  });
}

// Mean over each sample's `rows_per_sample` rows: (B*N) x C -> B x C.
template <typename Scalar>
Var mean_pool(Tape<Scalar>& t, Var x, int rows_per_sample) {
  using M = Mat<Scalar>;
  const M& xv = t.value(x);
  const auto batch = xv.rows() / rows_per_sample;
  M out(batch, xv.cols());
  for (Eigen::Index b = 0; b < batch; ++b)
    out.row(b) = xv.middleRows(b * rows_per_sample, rows_per_sample).colwise().mean();
  return t.record(std::move(out), t.requires_grad(x), [&t, x, rows_per_sample, batch](const M& g) {
    M dx(batch * rows_per_sample, g.cols());
    const Scalar inv = Scalar(1) / static_cast<Scalar>(rows_per_sample);
    for (Eigen::Index b = 0; b < batch; ++b)
      dx.middleRows(b * rows_per_sample, rows_per_sample).rowwise() = g.row(b) * inv;
    t.accumulate(x, dx);
  });
}

// Max over each sample's rows, per channel.
template <typename Scalar>
Var max_pool(Tape<Scalar>& t, Var x, int rows_per_sample) {
  using M = Mat<Scalar>;
  const M& xv = t.value(x);
  const auto batch = xv.rows() / rows_per_sample;
  M out(batch, xv.cols());
  std::vector<Eigen::Index> arg(static_cast<std::size_t>(batch * xv.cols()));
  for (Eigen::Index b = 0; b < batch; ++b) {
    for (Eigen::Index c = 0; c < xv.cols(); ++c) {
      Eigen::Index best = 0;
      out(b, c) = xv.col(c).segment(b * rows_per_sample, rows_per_sample).maxCoeff(&best);
      arg[static_cast<std::size_t>(b * xv.cols() + c)] = b * rows_per_sample + best;
    }
  }
  return t.record(std::move(out), t.requires_grad(x), [&t, x, arg = std::move(arg)](const M& g) {
    M dx = M::Zero(t.value(x).rows(), t.value(x).cols());
    for (Eigen::Index b = 0; b < g.rows(); ++b)
      for (Eigen::Index c = 0; c < g.cols(); ++c) dx(arg[static_cast<std::size_t>(b * g.cols() + c)], c) += g(b, c);
    t.accumulate(x, dx);
  });
}

// Scaled dot-product attention, independently per sample: queries (B*Nq) x d,
// keys/values (B*Nk) x d.
template <typename Scalar>
Var attention(Tape<Scalar>& t, Var q, Var k, Var v, int batch) {
  using M = Mat<Scalar>;
  const M& qv = t.value(q);
  const M& kv = t.value(k);
  const M& vv = t.value(v);
  const auto nq = qv.rows() / batch, nk = kv.rows() / batch;
  const Scalar inv_sqrt_d = Scalar(1) / std::sqrt(static_cast<Scalar>(qv.cols()));
  M probs(batch * nq, nk);
  M out(batch * nq, vv.cols());
  for (int b = 0; b < batch; ++b) {
    M s = (qv.middleRows(b * nq, nq) * kv.middleRows(b * nk, nk).transpose()) * inv_sqrt_d;
    Vec<Scalar> mx = s.rowwise().maxCoeff();
    s = (s.colwise() - mx).array().exp().matrix();
    Vec<Scalar> z = s.rowwise().sum();
    s = (s.array().colwise() / z.array()).matrix();
    out.middleRows(b * nq, nq) = s * vv.middleRows(b * nk, nk);
    probs.middleRows(b * nq, nq) = s;
  }
  const bool rg = t.requires_grad(q) || t.requires_grad(k) || t.requires_grad(v);
  return t.record(std::move(out), rg, [&t, q, k, v, batch, nq, nk, inv_sqrt_d, probs = std::move(probs)](const M& g) {
    const M& qv2 = t.value(q);
    const M& kv2 = t.value(k);
    const M& vv2 = t.value(v);
    M dq(qv2.rows(), qv2.cols()), dk(kv2.rows(), kv2.cols()), dv(vv2.rows(), vv2.cols());
    for (int b = 0; b < batch; ++b) {
      const auto p = probs.middleRows(b * nq, nq);
      const auto gb = g.middleRows(b * nq, nq);
      dv.middleRows(b * nk, nk) = p.transpose() * gb;
      M dp = gb * vv2.middleRows(b * nk, nk).transpose();
      Vec<Scalar> rs = (dp.array() * p.array()).rowwise().sum();
      M ds = ((dp.colwise() - rs).array() * p.array()).matrix() * inv_sqrt_d;
      dq.middleRows(b * nq, nq) = ds * kv2.middleRows(b * nk, nk);
      dk.middleRows(b * nk, nk) = ds.transpose() * qv2.middleRows(b * nq, nq);
    }
    t.accumulate(q, dq);
    t.accumulate(k, dk);
    t.accumulate(v, dv);
  });
}

// Reinterprets the row-major buffer with a new shape, e.g. flattening each
// sample's (N x C) block into one row of length N*C.
template <typename Scalar>
Var reshape(Tape<Scalar>& t, Var x, Eigen::Index rows, Eigen::Index cols) {
  using M = Mat<Scalar>;
  const M& xv = t.value(x);
  if (rows * cols != xv.size()) throw ShapeError("reshape: element count mismatch");
  M out = Eigen::Map<const M>(xv.data(), rows, cols);
  const auto r0 = xv.rows(), c0 = xv.cols();
  return t.record(std::move(out), t.requires_grad(x), [&t, x, r0, c0](const M& g) {
    t.accumulate(x, Eigen::Map<const M>(g.data(), r0, c0));
  });
}

template <typename Scalar>
Var transpose(Tape<Scalar>& t, Var x) {
  using M = Mat<Scalar>;
  M out = t.value(x).transpose();
  return t.record(std::move(out), t.requires_grad(x), [&t, x](const M& g) { t.accumulate(x, g.transpose()); });
}

// Per-sample block stacking: sample b of the result is [a_b; b_b], where a
// holds `batch` blocks of rows_a rows and b holds `batch` blocks of rows_b rows.
template <typename Scalar>
Var stack_blocks(Tape<Scalar>& t, Var a, Var b, int batch) {
  using M = Mat<Scalar>;
  const M& av = t.value(a);
  const M& bv = t.value(b);
  if (av.cols() != bv.cols() || av.rows() % batch != 0 || bv.rows() % batch != 0) {
    throw ShapeError("stack_blocks: shape mismatch");
  }
  const auto ra = av.rows() / batch, rb = bv.rows() / batch;
  M out(av.rows() + bv.rows(), av.cols());
  for (int i = 0; i < batch; ++i) {
    out.middleRows(i * (ra + rb), ra) = av.middleRows(i * ra, ra);
    out.middleRows(i * (ra + rb) + ra, rb) = bv.middleRows(i * rb, rb);
  }
  return t.record(std::move(out), t.requires_grad(a) || t.requires_grad(b), [&t, a, b, batch, ra, rb](const M& g) {
    if (t.requires_grad(a)) {
      M da(batch * ra, g.cols());
      for (int i = 0; i < batch; ++i) da.middleRows(i * ra, ra) = g.middleRows(i * (ra + rb), ra);
      t.accumulate(a, da);
    }
    if (t.requires_grad(b)) {
      M db(batch * rb, g.cols());
      for (int i = 0; i < batch; ++i) db.middleRows(i * rb, rb) = g.middleRows(i * (ra + rb) + ra, rb);
      t.accumulate(b, db);
    }
  });
}

// ---------------------------------------------------------------------------
// Heads and losses.

template <typename Scalar>
Var log_softmax(Tape<Scalar>& t, Var x) {
  using M = Mat<Scalar>;
  const M& xv = t.value(x);
  Vec<Scalar> mx = xv.rowwise().maxCoeff();
  M shifted = xv.colwise() - mx;
  Vec<Scalar> lse = shifted.array().exp().rowwise().sum().log().matrix();
  M out = shifted.colwise() - lse;
  return t.record(out, t.requires_grad(x), [&t, x, out](const M& g) {
    M sm = out.array().exp().matrix();
    Vec<Scalar> gs = g.rowwise().sum();
    t.accumulate(x, g - (sm.array().colwise() * gs.array()).matrix());
  });
}

template <typename Scalar>
Var l2_normalize_rows(Tape<Scalar>& t, Var x) {
  using M = Mat<Scalar>;
  const M& xv = t.value(x);
  Vec<Scalar> norm = xv.rowwise().norm().cwiseMax(Scalar(1e-12));
  M out = (xv.array().colwise() / norm.array()).matrix();
  return t.record(out, t.requires_grad(x), [&t, x, out, norm](const M& g) {
    Vec<Scalar> dot = (g.array() * out.array()).rowwise().sum();
    M dx = ((g - (out.array().colwise() * dot.array()).matrix()).array().colwise() / norm.array()).matrix();
    t.accumulate(x, dx);
  });
}

// mean((a - b)^2) as a 1x1 node.
template <typename Scalar>
Var mse(Tape<Scalar>& t, Var a, Var b) {
  using M = Mat<Scalar>;
  M diff = t.value(a) - t.value(b);
  const Scalar n = static_cast<Scalar>(diff.size());
  M out(1, 1);
  out(0, 0) = diff.squaredNorm() / n;
  return t.record(std::move(out), t.requires_grad(a) || t.requires_grad(b),
                  [&t, a, b, n, diff = std::move(diff)](const M& g) {
                    const Scalar s = Scalar(2) * g(0, 0) / n;
                    t.accumulate(a, s * diff);
                    t.accumulate(b, -s * diff);
                  });
}

// Mean negative log-likelihood of `labels` under row-wise log-probabilities.
template <typename Scalar>
Var nll(Tape<Scalar>& t, Var log_probs, std::vector<int> labels) {
  using M = Mat<Scalar>;
  const M& lp = t.value(log_probs);
  if (static_cast<Eigen::Index>(labels.size()) != lp.rows()) throw ShapeError("nll: label count mismatch");
  M out(1, 1);
  out(0, 0) = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) out(0, 0) -= lp(static_cast<Eigen::Index>(i), labels[i]);
  const Scalar n = static_cast<Scalar>(labels.size());
  out(0, 0) /= n;
  return t.record(std::move(out), t.requires_grad(log_probs), [&t, log_probs, n, labels = std::move(labels)](const M& g) {
    M d = M::Zero(t.value(log_probs).rows(), t.value(log_probs).cols());
    for (std::size_t i = 0; i < labels.size(); ++i) d(static_cast<Eigen::Index>(i), labels[i]) = -g(0, 0) / n;
    t.accumulate(log_probs, d);
  });
}

// -sum(targets .* log_probs) / rows, for row-stochastic soft targets.
template <typename Scalar>
Var soft_cross_entropy(Tape<Scalar>& t, Var log_probs, Mat<Scalar> targets) {
  using M = Mat<Scalar>;
  const M& lp = t.value(log_probs);
  if (lp.rows() != targets.rows() || lp.cols() != targets.cols()) throw ShapeError("soft_cross_entropy: shape mismatch");
  const Scalar n = static_cast<Scalar>(lp.rows());
  M out(1, 1);
  out(0, 0) = -(lp.array() * targets.array()).sum() / n;
  return t.record(std::move(out), t.requires_grad(log_probs), [&t, log_probs, n, targets = std::move(targets)](const M& g) {
    t.accumulate(log_probs, (-g(0, 0) / n) * targets);
  });
}

}  // namespace muse::ad
