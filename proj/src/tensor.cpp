#include "mvagg/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <set>
#include <utility>

namespace mvagg {

namespace {

void check(bool ok, const std::string& msg) {
  if (!ok) throw ShapeError(msg);
}

double stable_sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace

int64_t Tensor::checked_numel(const std::vector<int>& s) {
  int64_t n = 1;
  for (int d : s) {
    if (d < 0) throw ShapeError("tensor: negative extent in shape " + format_shape(s));
    n *= d;
  }
  return n;
}

Tensor::Tensor(std::vector<int> s, std::vector<float> d) : shape(std::move(s)), data(std::move(d)) {
  if (checked_numel(shape) != static_cast<int64_t>(data.size()))
    throw ShapeError("tensor: shape " + format_shape(shape) + " does not match data length " +
                     std::to_string(data.size()));
}

Tensor Tensor::full(std::vector<int> s, float v) {
  Tensor t(std::move(s));
  std::fill(t.data.begin(), t.data.end(), v);
  return t;
}

Tensor Tensor::scalar(float v) { return Tensor({1}, {v}); }

Tensor Tensor::uniform(std::vector<int> s, Rng& rng, float lo, float hi) {
  Tensor t(std::move(s));
  for (auto& v : t.data) v = static_cast<float>(rng.uniform(lo, hi));
  return t;
}

bool Tensor::all_finite() const {
  for (float v : data)
    if (!std::isfinite(v)) return false;
  return true;
}

bool Tensor::bit_equal(const Tensor& o) const {
  if (shape != o.shape) return false;
  return std::memcmp(data.data(), o.data.data(), data.size() * sizeof(float)) == 0;
}

float Tensor::at(std::initializer_list<int> idx) const {
  check(static_cast<int>(idx.size()) == ndim(), "tensor: index rank mismatch");
  int64_t off = 0;
  int i = 0;
  for (int v : idx) {
    check(v >= 0 && v < shape[i], "tensor: index out of bounds");
    off = off * shape[i] + v;
    ++i;
  }
  return data[static_cast<size_t>(off)];
}

float& Tensor::at(std::initializer_list<int> idx) {
  check(static_cast<int>(idx.size()) == ndim(), "tensor: index rank mismatch");
  int64_t off = 0;
  int i = 0;
  for (int v : idx) {
    check(v >= 0 && v < shape[i], "tensor: index out of bounds");
    off = off * shape[i] + v;
    ++i;
  }
  return data[static_cast<size_t>(off)];
}

// ---------------------------------------------------------------------------
// Tape basics

Var Tape::push(std::string op, std::vector<int> inputs, Tensor value, ForwardFn fwd,
               BackwardFn bwd) {
  Node n;
  n.op = std::move(op);
  n.inputs = std::move(inputs);
  n.value = std::move(value);
  n.fwd = std::move(fwd);
  n.bwd = std::move(bwd);
  nodes_.push_back(std::move(n));
  return Var{static_cast<int>(nodes_.size()) - 1};
}

const Tape::Node& Tape::node(Var v) const {
  if (!v.valid() || v.id >= static_cast<int>(nodes_.size()))
    throw Error("tape: invalid var handle");
  return nodes_[static_cast<size_t>(v.id)];
}

Var Tape::leaf(const std::string& name, Tensor value) {
  if (name.empty()) throw Error("tape: leaf name must not be empty");
  for (const auto& n : nodes_)
    if (n.name == name) throw Error("tape: duplicate leaf name '" + name + "'");
  Var v = push("leaf", {}, std::move(value), nullptr, nullptr);
  nodes_.back().name = name;
  return v;
}

Var Tape::constant(Tensor value) { return push("const", {}, std::move(value), nullptr, nullptr); }

const Tensor& Tape::value(Var v) const { return node(v).value; }

Var Tape::apply(std::string op, std::vector<Var> inputs, ForwardFn fwd, BackwardFn bwd) {
  std::vector<int> ids;
  std::vector<const Tensor*> vals;
  ids.reserve(inputs.size());
  vals.reserve(inputs.size());
  for (Var v : inputs) {
    ids.push_back(v.id);
    vals.push_back(&node(v).value);
  }
  Tensor out = fwd(vals);
  return push(std::move(op), std::move(ids), std::move(out), std::move(fwd), std::move(bwd));
}

bool Tape::replay_matches() const {
  for (const auto& n : nodes_) {
    if (!n.fwd) continue;
    std::vector<const Tensor*> vals;
    vals.reserve(n.inputs.size());
    for (int id : n.inputs) vals.push_back(&nodes_[static_cast<size_t>(id)].value);
    Tensor again = n.fwd(vals);
    if (!again.bit_equal(n.value)) return false;
  }
  return true;
}

GradMap Tape::backward(Var output, const Tensor& output_grad) const {
  const Node& out = node(output);
  if (!(output_grad.shape == out.value.shape))
    throw ShapeError("backward: output gradient shape " + format_shape(output_grad.shape) +
                     " does not match recorded output shape " + format_shape(out.value.shape));

  std::vector<Tensor> grads(nodes_.size());
  std::vector<char> touched(nodes_.size(), 0);
  grads[static_cast<size_t>(output.id)] = output_grad;
  touched[static_cast<size_t>(output.id)] = 1;

  for (int i = output.id; i >= 0; --i) {
    const Node& n = nodes_[static_cast<size_t>(i)];
    if (!touched[static_cast<size_t>(i)] || !n.bwd) continue;
    std::vector<const Tensor*> in_vals;
    std::vector<Tensor*> in_grads;
    in_vals.reserve(n.inputs.size());
    in_grads.reserve(n.inputs.size());
    for (int id : n.inputs) {
      const Node& src = nodes_[static_cast<size_t>(id)];
      if (!touched[static_cast<size_t>(id)]) {
        grads[static_cast<size_t>(id)] = Tensor(src.value.shape);
        touched[static_cast<size_t>(id)] = 1;
      }
      in_vals.push_back(&src.value);
      in_grads.push_back(&grads[static_cast<size_t>(id)]);
    }
    n.bwd(n.value, grads[static_cast<size_t>(i)], in_vals, in_grads);
  }

  GradMap out_map;
  for (size_t i = 0; i < nodes_.size(); ++i) {
    const Node& n = nodes_[i];
    if (n.name.empty()) continue;
    if (touched[i] && static_cast<int>(i) <= output.id)
      out_map[n.name] = std::move(grads[i]);
    else
      out_map[n.name] = Tensor(n.value.shape);
  }
  return out_map;
}

// ---------------------------------------------------------------------------
// Convolution kernels

Tensor conv2d_forward(const Tensor& x, const Tensor& k, const Tensor& b, int s, int p, int dil) {
  const int cin = x.shape[0], ih = x.shape[1], iw = x.shape[2];
  const int cout = k.shape[0], kh = k.shape[2], kw = k.shape[3];
  const int oh = (ih + 2 * p - ((kh - 1) * dil + 1)) / s + 1;
  const int ow = (iw + 2 * p - ((kw - 1) * dil + 1)) / s + 1;
  Tensor out({cout, oh, ow});

  parallel_for(cout, [&](int64_t lo, int64_t hi) {
    std::vector<double> acc(static_cast<size_t>(ow));
    for (int co = static_cast<int>(lo); co < static_cast<int>(hi); ++co) {
      const float* kbase = k.data.data() + static_cast<size_t>(co) * cin * kh * kw;
      const double bias = b.data[static_cast<size_t>(co)];
      for (int oy = 0; oy < oh; ++oy) {
        std::fill(acc.begin(), acc.end(), bias);
        for (int ci = 0; ci < cin; ++ci) {
          const float* plane = x.data.data() + static_cast<size_t>(ci) * ih * iw;
          const float* kslab = kbase + static_cast<size_t>(ci) * kh * kw;
          for (int ky = 0; ky < kh; ++ky) {
            const int iy = oy * s + ky * dil - p;
            if (iy < 0 || iy >= ih) continue;
            const float* row = plane + static_cast<size_t>(iy) * iw;
            for (int kx = 0; kx < kw; ++kx) {
              const double wv = kslab[ky * kw + kx];
              const int off = kx * dil - p;
              int lo_ox = off < 0 ? (-off + s - 1) / s : 0;
              int hi_ox = (iw - 1 - off) >= 0 ? (iw - 1 - off) / s : -1;
              if (hi_ox > ow - 1) hi_ox = ow - 1;
              if (s == 1) {
                const float* src = row + off;
                for (int ox = lo_ox; ox <= hi_ox; ++ox) acc[static_cast<size_t>(ox)] += wv * src[ox];
              } else {
                for (int ox = lo_ox; ox <= hi_ox; ++ox)
                  acc[static_cast<size_t>(ox)] += wv * row[ox * s + off];
              }
            }
          }
        }
        float* orow = out.data.data() + (static_cast<size_t>(co) * oh + oy) * ow;
        for (int ox = 0; ox < ow; ++ox) orow[ox] = static_cast<float>(acc[static_cast<size_t>(ox)]);
      }
    }
  });
  return out;
}

void conv2d_backward(const Tensor& x, const Tensor& k, const Tensor& gout, int s, int p, int dil,
                     Tensor* gx, Tensor* gk, Tensor* gb) {
  const int cin = x.shape[0], ih = x.shape[1], iw = x.shape[2];
  const int cout = k.shape[0], kh = k.shape[2], kw = k.shape[3];
  const int oh = gout.shape[1], ow = gout.shape[2];

  if (gb) {
    for (int co = 0; co < cout; ++co) {
      double acc = 0.0;
      const float* g = gout.data.data() + static_cast<size_t>(co) * oh * ow;
      for (int i = 0; i < oh * ow; ++i) acc += g[i];
      gb->data[static_cast<size_t>(co)] += static_cast<float>(acc);
    }
  }

  if (gk) {
    parallel_for(cout, [&](int64_t lo, int64_t hi) {
      for (int co = static_cast<int>(lo); co < static_cast<int>(hi); ++co) {
        const float* gplane = gout.data.data() + static_cast<size_t>(co) * oh * ow;
        float* kslab = gk->data.data() + static_cast<size_t>(co) * cin * kh * kw;
        for (int ci = 0; ci < cin; ++ci) {
          const float* xplane = x.data.data() + static_cast<size_t>(ci) * ih * iw;
          for (int ky = 0; ky < kh; ++ky) {
            for (int kx = 0; kx < kw; ++kx) {
              const int off = kx * dil - p;
              int lo_ox = off < 0 ? (-off + s - 1) / s : 0;
              int hi_ox = (iw - 1 - off) >= 0 ? (iw - 1 - off) / s : -1;
              if (hi_ox > ow - 1) hi_ox = ow - 1;
              double acc = 0.0;
              for (int oy = 0; oy < oh; ++oy) {
                const int iy = oy * s + ky * dil - p;
                if (iy < 0 || iy >= ih) continue;
                const float* grow = gplane + static_cast<size_t>(oy) * ow;
                const float* xrow = xplane + static_cast<size_t>(iy) * iw;
                if (s == 1) {
                  const float* src = xrow + off;
                  for (int ox = lo_ox; ox <= hi_ox; ++ox) acc += static_cast<double>(grow[ox]) * src[ox];
                } else {
                  for (int ox = lo_ox; ox <= hi_ox; ++ox)
                    acc += static_cast<double>(grow[ox]) * xrow[ox * s + off];
                }
              }
              kslab[(ci * kh + ky) * kw + kx] += static_cast<float>(acc);
            }
          }
        }
      }
    });
  }

  if (gx) {
    parallel_for(cin, [&](int64_t lo, int64_t hi) {
      std::vector<double> scratch(static_cast<size_t>(ih) * iw);
      for (int ci = static_cast<int>(lo); ci < static_cast<int>(hi); ++ci) {
        std::fill(scratch.begin(), scratch.end(), 0.0);
        for (int co = 0; co < cout; ++co) {
          const float* gplane = gout.data.data() + static_cast<size_t>(co) * oh * ow;
          const float* kslab =
              k.data.data() + (static_cast<size_t>(co) * cin + ci) * kh * kw;
          for (int ky = 0; ky < kh; ++ky) {
            for (int kx = 0; kx < kw; ++kx) {
              const double wv = kslab[ky * kw + kx];
              if (wv == 0.0) continue;
              const int off = kx * dil - p;
              int lo_ox = off < 0 ? (-off + s - 1) / s : 0;
              int hi_ox = (iw - 1 - off) >= 0 ? (iw - 1 - off) / s : -1;
              if (hi_ox > ow - 1) hi_ox = ow - 1;
              for (int oy = 0; oy < oh; ++oy) {
                const int iy = oy * s + ky * dil - p;
                if (iy < 0 || iy >= ih) continue;
                const float* grow = gplane + static_cast<size_t>(oy) * ow;
                double* srow = scratch.data() + static_cast<size_t>(iy) * iw;
                if (s == 1) {
                  double* dst = srow + off;
                  for (int ox = lo_ox; ox <= hi_ox; ++ox) dst[ox] += wv * grow[ox];
                } else {
                  for (int ox = lo_ox; ox <= hi_ox; ++ox) srow[ox * s + off] += wv * grow[ox];
                }
              }
            }
          }
        }
        float* dst = gx->data.data() + static_cast<size_t>(ci) * ih * iw;
        for (size_t i = 0; i < scratch.size(); ++i)
          dst[i] = static_cast<float>(static_cast<double>(dst[i]) + scratch[i]);
      }
    });
  }
}

Var Tape::conv2d(Var input, Var kernel, Var bias, int stride, int padding, int dilation) {
  const Tensor& x = value(input);
  const Tensor& k = value(kernel);
  const Tensor& b = value(bias);
  check(x.ndim() == 3, "conv2d: input must be [C,H,W], got " + format_shape(x.shape));
  check(k.ndim() == 4, "conv2d: kernel must be [Co,Ci,kh,kw], got " + format_shape(k.shape));
  check(b.ndim() == 1, "conv2d: bias must be [Co], got " + format_shape(b.shape));
  check(k.shape[1] == x.shape[0], "conv2d: kernel input channels (" + std::to_string(k.shape[1]) +
                                      ") != input channels (" + std::to_string(x.shape[0]) + ")");
  check(b.shape[0] == k.shape[0], "conv2d: bias length (" + std::to_string(b.shape[0]) +
                                      ") != output channels (" + std::to_string(k.shape[0]) + ")");
  check(k.shape[2] % 2 == 1 && k.shape[3] % 2 == 1, "conv2d: kernel extents must be odd, got " +
                                                        format_shape(k.shape));
  check(stride >= 1, "conv2d: stride must be >= 1");
  check(padding >= 0, "conv2d: padding must be >= 0");
  check(dilation >= 1, "conv2d: dilation must be >= 1");
  const int eff_h = (k.shape[2] - 1) * dilation + 1;
  const int eff_w = (k.shape[3] - 1) * dilation + 1;
  const int num_h = x.shape[1] + 2 * padding - eff_h;
  const int num_w = x.shape[2] + 2 * padding - eff_w;
  check(num_h >= 0 && num_h % stride == 0,
        "conv2d: height " + std::to_string(x.shape[1]) + " incompatible with kernel/stride/padding");
  check(num_w >= 0 && num_w % stride == 0,
        "conv2d: width " + std::to_string(x.shape[2]) + " incompatible with kernel/stride/padding");

  auto fwd = [stride, padding, dilation](const std::vector<const Tensor*>& in) {
    return conv2d_forward(*in[0], *in[1], *in[2], stride, padding, dilation);
  };
  auto bwd = [stride, padding, dilation](const Tensor&, const Tensor& og,
                                         const std::vector<const Tensor*>& in,
                                         std::vector<Tensor*>& gr) {
    conv2d_backward(*in[0], *in[1], og, stride, padding, dilation, gr[0], gr[1], gr[2]);
  };
  return apply("conv2d", {input, kernel, bias}, fwd, bwd);
}

// ---------------------------------------------------------------------------
// Linear / softmax / pooling

Var Tape::linear(Var input, Var weight, Var bias) {
  const Tensor& x = value(input);
  const Tensor& w = value(weight);
  const Tensor& b = value(bias);
  check(w.ndim() == 2, "linear: weight must be [Co,Ci], got " + format_shape(w.shape));
  check(b.ndim() == 1 && b.shape[0] == w.shape[0],
        "linear: bias length (" + format_shape(b.shape) + ") != output width (" +
            std::to_string(w.shape[0]) + ")");
  check(x.ndim() == 1 || x.ndim() == 2,
        "linear: input must be [Ci] or [B,Ci], got " + format_shape(x.shape));
  const int cin = x.shape[x.ndim() - 1];
  check(cin == w.shape[1], "linear: trailing input dimension (" + std::to_string(cin) +
                               ") != weight input width (" + std::to_string(w.shape[1]) + ")");

  auto fwd = [](const std::vector<const Tensor*>& in) {
    const Tensor& xx = *in[0];
    const Tensor& ww = *in[1];
    const Tensor& bb = *in[2];
    const int ci = ww.shape[1], co = ww.shape[0];
    const int rows = xx.ndim() == 1 ? 1 : xx.shape[0];
    Tensor out(xx.ndim() == 1 ? std::vector<int>{co} : std::vector<int>{rows, co});
    for (int r = 0; r < rows; ++r) {
      const float* xr = xx.data.data() + static_cast<size_t>(r) * ci;
      float* yr = out.data.data() + static_cast<size_t>(r) * co;
      for (int o = 0; o < co; ++o) {
        const float* wr = ww.data.data() + static_cast<size_t>(o) * ci;
        double acc = bb.data[static_cast<size_t>(o)];
        for (int i = 0; i < ci; ++i) acc += static_cast<double>(xr[i]) * wr[i];
        yr[o] = static_cast<float>(acc);
      }
    }
    return out;
  };
  auto bwd = [](const Tensor&, const Tensor& og, const std::vector<const Tensor*>& in,
                std::vector<Tensor*>& gr) {
    const Tensor& xx = *in[0];
    const Tensor& ww = *in[1];
    const int ci = ww.shape[1], co = ww.shape[0];
    const int rows = xx.ndim() == 1 ? 1 : xx.shape[0];
    Tensor* gx = gr[0];
    Tensor* gw = gr[1];
    Tensor* gb = gr[2];
    for (int r = 0; r < rows; ++r) {
      const float* gout = og.data.data() + static_cast<size_t>(r) * co;
      const float* xr = xx.data.data() + static_cast<size_t>(r) * ci;
      float* gxr = gx->data.data() + static_cast<size_t>(r) * ci;
      for (int i = 0; i < ci; ++i) {
        double acc = 0.0;
        for (int o = 0; o < co; ++o)
          acc += static_cast<double>(gout[o]) * ww.data[static_cast<size_t>(o) * ci + i];
        gxr[i] += static_cast<float>(acc);
      }
      for (int o = 0; o < co; ++o) {
        const double g = gout[o];
        float* gwr = gw->data.data() + static_cast<size_t>(o) * ci;
        for (int i = 0; i < ci; ++i) gwr[i] += static_cast<float>(g * xr[i]);
        gb->data[static_cast<size_t>(o)] += static_cast<float>(g);
      }
    }
  };
  return apply("linear", {input, weight, bias}, fwd, bwd);
}

Var Tape::softmax(Var input, int axis) {
  const Tensor& x = value(input);
  check(axis >= 0 && axis < x.ndim(),
        "softmax: axis " + std::to_string(axis) + " out of bounds for " + format_shape(x.shape));
  const int n = x.shape[axis];
  check(n > 0, "softmax: empty axis");
  int64_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= x.shape[i];
  for (int i = axis + 1; i < x.ndim(); ++i) inner *= x.shape[i];

  auto fwd = [n, outer, inner](const std::vector<const Tensor*>& in) {
    const Tensor& xx = *in[0];
    Tensor out(xx.shape);
    for (int64_t o = 0; o < outer; ++o) {
      for (int64_t i = 0; i < inner; ++i) {
        const float* src = xx.data.data() + (o * n) * inner + i;
        float* dst = out.data.data() + (o * n) * inner + i;
        double m = src[0];
        for (int j = 1; j < n; ++j) m = std::max(m, static_cast<double>(src[j * inner]));
        double sum = 0.0;
        for (int j = 0; j < n; ++j) sum += std::exp(static_cast<double>(src[j * inner]) - m);
        for (int j = 0; j < n; ++j)
          dst[j * inner] = static_cast<float>(std::exp(static_cast<double>(src[j * inner]) - m) / sum);
      }
    }
    return out;
  };
  auto bwd = [n, outer, inner](const Tensor& out, const Tensor& og,
                               const std::vector<const Tensor*>&, std::vector<Tensor*>& gr) {
    Tensor* gx = gr[0];
    for (int64_t o = 0; o < outer; ++o) {
      for (int64_t i = 0; i < inner; ++i) {
        const float* y = out.data.data() + (o * n) * inner + i;
        const float* g = og.data.data() + (o * n) * inner + i;
        float* d = gx->data.data() + (o * n) * inner + i;
        double dot = 0.0;
        for (int j = 0; j < n; ++j) dot += static_cast<double>(g[j * inner]) * y[j * inner];
        for (int j = 0; j < n; ++j)
          d[j * inner] += static_cast<float>(y[j * inner] * (static_cast<double>(g[j * inner]) - dot));
      }
    }
  };
  return apply("softmax", {input}, fwd, bwd);
}

Var Tape::pool_spatial(Var input, PoolMode mode) {
  const Tensor& x = value(input);
  check(x.ndim() == 3, "pool_spatial: input must be [C,H,W], got " + format_shape(x.shape));
  check(x.shape[1] >= 1 && x.shape[2] >= 1, "pool_spatial: empty spatial extent in " +
                                                format_shape(x.shape));
  const int c = x.shape[0], hw = x.shape[1] * x.shape[2];

  auto fwd = [c, hw, mode](const std::vector<const Tensor*>& in) {
    const Tensor& xx = *in[0];
    Tensor out({c});
    for (int ch = 0; ch < c; ++ch) {
      const float* p = xx.data.data() + static_cast<size_t>(ch) * hw;
      if (mode == PoolMode::max) {
        float m = p[0];
        for (int i = 1; i < hw; ++i) m = p[i] > m ? p[i] : m;
        out.data[static_cast<size_t>(ch)] = m;
      } else {
        double acc = 0.0;
        for (int i = 0; i < hw; ++i) acc += p[i];
        out.data[static_cast<size_t>(ch)] = static_cast<float>(acc / hw);
      }
    }
    return out;
  };
  auto bwd = [c, hw, mode](const Tensor&, const Tensor& og, const std::vector<const Tensor*>& in,
                           std::vector<Tensor*>& gr) {
    const Tensor& xx = *in[0];
    Tensor* gx = gr[0];
    for (int ch = 0; ch < c; ++ch) {
      const float* p = xx.data.data() + static_cast<size_t>(ch) * hw;
      float* d = gx->data.data() + static_cast<size_t>(ch) * hw;
      const float g = og.data[static_cast<size_t>(ch)];
      if (mode == PoolMode::max) {
        int best = 0;
        for (int i = 1; i < hw; ++i)
          if (p[i] > p[best]) best = i;  // ties: first scan-order hit wins
        d[best] += g;
      } else {
        const float gdiv = g / static_cast<float>(hw);
        for (int i = 0; i < hw; ++i) d[i] += gdiv;
      }
    }
  };
  return apply("pool_spatial", {input}, fwd, bwd);
}

Var Tape::pool_channel(Var input, PoolMode mode) {
  const Tensor& x = value(input);
  check(x.ndim() == 3, "pool_channel: input must be [C,H,W], got " + format_shape(x.shape));
  check(x.shape[0] >= 1, "pool_channel: empty channel extent in " + format_shape(x.shape));
  const int c = x.shape[0], h = x.shape[1], w = x.shape[2];
  const int hw = h * w;

  auto fwd = [c, h, w, hw, mode](const std::vector<const Tensor*>& in) {
    const Tensor& xx = *in[0];
    Tensor out({1, h, w});
    for (int i = 0; i < hw; ++i) {
      if (mode == PoolMode::max) {
        float m = xx.data[static_cast<size_t>(i)];
        for (int ch = 1; ch < c; ++ch) {
          float v = xx.data[static_cast<size_t>(ch) * hw + i];
          if (v > m) m = v;
        }
        out.data[static_cast<size_t>(i)] = m;
      } else {
        double acc = 0.0;
        for (int ch = 0; ch < c; ++ch) acc += xx.data[static_cast<size_t>(ch) * hw + i];
        out.data[static_cast<size_t>(i)] = static_cast<float>(acc / c);
      }
    }
    return out;
  };
  auto bwd = [c, hw, mode](const Tensor&, const Tensor& og, const std::vector<const Tensor*>& in,
                           std::vector<Tensor*>& gr) {
    const Tensor& xx = *in[0];
    Tensor* gx = gr[0];
    for (int i = 0; i < hw; ++i) {
      const float g = og.data[static_cast<size_t>(i)];
      if (mode == PoolMode::max) {
        int best = 0;
        for (int ch = 1; ch < c; ++ch)
          if (xx.data[static_cast<size_t>(ch) * hw + i] > xx.data[static_cast<size_t>(best) * hw + i])
            best = ch;
        gx->data[static_cast<size_t>(best) * hw + i] += g;
      } else {
        const float gdiv = g / static_cast<float>(c);
        for (int ch = 0; ch < c; ++ch) gx->data[static_cast<size_t>(ch) * hw + i] += gdiv;
      }
    }
  };
  return apply("pool_channel", {input}, fwd, bwd);
}

// ---------------------------------------------------------------------------
// Elementwise, broadcasting variants: same shape, [C,H,W]x[C], [C,H,W]x[1,H,W],
// and anything x [1].

namespace {

enum class Bcast { same, channel_vec, spatial_map, scalar, none };

Bcast classify(const std::vector<int>& a, const std::vector<int>& b) {
  if (a == b) return Bcast::same;
  if (b.size() == 1 && b[0] == 1) return Bcast::scalar;
  if (a.size() == 3 && b.size() == 1 && b[0] == a[0]) return Bcast::channel_vec;
  if (a.size() == 3 && b.size() == 3 && b[0] == 1 && b[1] == a[1] && b[2] == a[2])
    return Bcast::spatial_map;
  return Bcast::none;
}

}  // namespace

Var Tape::mul(Var a, Var b) {
  const Tensor& ta = value(a);
  const Tensor& tb = value(b);
  Bcast mode = classify(ta.shape, tb.shape);
  if (mode == Bcast::none) {
    Bcast swapped = classify(tb.shape, ta.shape);
    if (swapped != Bcast::none) return mul(b, a);
    throw ShapeError("mul: incompatible shapes " + format_shape(ta.shape) + " and " +
                     format_shape(tb.shape));
  }

  auto fwd = [mode](const std::vector<const Tensor*>& in) {
    const Tensor& x = *in[0];
    const Tensor& y = *in[1];
    Tensor out(x.shape);
    const int64_t n = x.numel();
    switch (mode) {
      case Bcast::same:
        for (int64_t i = 0; i < n; ++i) out.data[i] = x.data[i] * y.data[i];
        break;
      case Bcast::scalar: {
        const float s = y.data[0];
        for (int64_t i = 0; i < n; ++i) out.data[i] = x.data[i] * s;
        break;
      }
      case Bcast::channel_vec: {
        const int c = x.shape[0];
        const int64_t hw = n / c;
        for (int ch = 0; ch < c; ++ch) {
          const float s = y.data[static_cast<size_t>(ch)];
          for (int64_t i = 0; i < hw; ++i) out.data[ch * hw + i] = x.data[ch * hw + i] * s;
        }
        break;
      }
      case Bcast::spatial_map: {
        const int c = x.shape[0];
        const int64_t hw = n / c;
        for (int ch = 0; ch < c; ++ch)
          for (int64_t i = 0; i < hw; ++i) out.data[ch * hw + i] = x.data[ch * hw + i] * y.data[i];
        break;
      }
      default:
        break;
    }
    return out;
  };
  auto bwd = [mode](const Tensor&, const Tensor& og, const std::vector<const Tensor*>& in,
                    std::vector<Tensor*>& gr) {
    const Tensor& x = *in[0];
    const Tensor& y = *in[1];
    Tensor* gx = gr[0];
    Tensor* gy = gr[1];
    const int64_t n = x.numel();
    switch (mode) {
      case Bcast::same:
        for (int64_t i = 0; i < n; ++i) {
          gx->data[i] += og.data[i] * y.data[i];
          gy->data[i] += og.data[i] * x.data[i];
        }
        break;
      case Bcast::scalar: {
        const float s = y.data[0];
        double acc = 0.0;
        for (int64_t i = 0; i < n; ++i) {
          gx->data[i] += og.data[i] * s;
          acc += static_cast<double>(og.data[i]) * x.data[i];
        }
        gy->data[0] += static_cast<float>(acc);
        break;
      }
      case Bcast::channel_vec: {
        const int c = x.shape[0];
        const int64_t hw = n / c;
        for (int ch = 0; ch < c; ++ch) {
          const float s = y.data[static_cast<size_t>(ch)];
          double acc = 0.0;
          for (int64_t i = 0; i < hw; ++i) {
            gx->data[ch * hw + i] += og.data[ch * hw + i] * s;
            acc += static_cast<double>(og.data[ch * hw + i]) * x.data[ch * hw + i];
          }
          gy->data[static_cast<size_t>(ch)] += static_cast<float>(acc);
        }
        break;
      }
      case Bcast::spatial_map: {
        const int c = x.shape[0];
        const int64_t hw = n / c;
        std::vector<double> acc(static_cast<size_t>(hw), 0.0);
        for (int ch = 0; ch < c; ++ch)
          for (int64_t i = 0; i < hw; ++i) {
            gx->data[ch * hw + i] += og.data[ch * hw + i] * y.data[i];
            acc[static_cast<size_t>(i)] +=
                static_cast<double>(og.data[ch * hw + i]) * x.data[ch * hw + i];
          }
        for (int64_t i = 0; i < hw; ++i) gy->data[i] += static_cast<float>(acc[static_cast<size_t>(i)]);
        break;
      }
      default:
        break;
    }
  };
  return apply("mul", {a, b}, fwd, bwd);
}

Var Tape::add(Var a, Var b) {
  const Tensor& ta = value(a);
  const Tensor& tb = value(b);
  Bcast mode = classify(ta.shape, tb.shape);
  if (mode == Bcast::none) {
    Bcast swapped = classify(tb.shape, ta.shape);
    if (swapped != Bcast::none) return add(b, a);
    throw ShapeError("add: incompatible shapes " + format_shape(ta.shape) + " and " +
                     format_shape(tb.shape));
  }

  auto fwd = [mode](const std::vector<const Tensor*>& in) {
    const Tensor& x = *in[0];
    const Tensor& y = *in[1];
    Tensor out(x.shape);
    const int64_t n = x.numel();
    switch (mode) {
      case Bcast::same:
        for (int64_t i = 0; i < n; ++i) out.data[i] = x.data[i] + y.data[i];
        break;
      case Bcast::scalar:
        for (int64_t i = 0; i < n; ++i) out.data[i] = x.data[i] + y.data[0];
        break;
      case Bcast::channel_vec: {
        const int c = x.shape[0];
        const int64_t hw = n / c;
        for (int ch = 0; ch < c; ++ch)
          for (int64_t i = 0; i < hw; ++i)
            out.data[ch * hw + i] = x.data[ch * hw + i] + y.data[static_cast<size_t>(ch)];
        break;
      }
      case Bcast::spatial_map: {
        const int c = x.shape[0];
        const int64_t hw = n / c;
        for (int ch = 0; ch < c; ++ch)
          for (int64_t i = 0; i < hw; ++i) out.data[ch * hw + i] = x.data[ch * hw + i] + y.data[i];
        break;
      }
      default:
        break;
    }
    return out;
  };
  auto bwd = [mode](const Tensor&, const Tensor& og, const std::vector<const Tensor*>& in,
                    std::vector<Tensor*>& gr) {
    const Tensor& x = *in[0];
    Tensor* gx = gr[0];
    Tensor* gy = gr[1];
    const int64_t n = x.numel();
    for (int64_t i = 0; i < n; ++i) gx->data[i] += og.data[i];
    switch (mode) {
      case Bcast::same:
        for (int64_t i = 0; i < n; ++i) gy->data[i] += og.data[i];
        break;
      case Bcast::scalar: {
        double acc = 0.0;
        for (int64_t i = 0; i < n; ++i) acc += og.data[i];
        gy->data[0] += static_cast<float>(acc);
        break;
      }
      case Bcast::channel_vec: {
        const int c = x.shape[0];
        const int64_t hw = n / c;
        for (int ch = 0; ch < c; ++ch) {
          double acc = 0.0;
          for (int64_t i = 0; i < hw; ++i) acc += og.data[ch * hw + i];
          gy->data[static_cast<size_t>(ch)] += static_cast<float>(acc);
        }
        break;
      }
      case Bcast::spatial_map: {
        const int c = x.shape[0];
        const int64_t hw = n / c;
        for (int64_t i = 0; i < hw; ++i) {
          double acc = 0.0;
          for (int ch = 0; ch < c; ++ch) acc += og.data[ch * hw + i];
          gy->data[i] += static_cast<float>(acc);
        }
        break;
      }
      default:
        break;
    }
  };
  return apply("add", {a, b}, fwd, bwd);
}

Var Tape::sub(Var a, Var b) {
  const Tensor& ta = value(a);
  const Tensor& tb = value(b);
  check(ta.shape == tb.shape, "sub: incompatible shapes " + format_shape(ta.shape) + " and " +
                                  format_shape(tb.shape));
  auto fwd = [](const std::vector<const Tensor*>& in) {
    Tensor out(in[0]->shape);
    for (int64_t i = 0; i < out.numel(); ++i) out.data[i] = in[0]->data[i] - in[1]->data[i];
    return out;
  };
  auto bwd = [](const Tensor&, const Tensor& og, const std::vector<const Tensor*>&,
                std::vector<Tensor*>& gr) {
    for (int64_t i = 0; i < og.numel(); ++i) {
      gr[0]->data[i] += og.data[i];
      gr[1]->data[i] -= og.data[i];
    }
  };
  return apply("sub", {a, b}, fwd, bwd);
}

Var Tape::scale(Var a, float c) {
  auto fwd = [c](const std::vector<const Tensor*>& in) {
    Tensor out(in[0]->shape);
    for (int64_t i = 0; i < out.numel(); ++i) out.data[i] = in[0]->data[i] * c;
    return out;
  };
  auto bwd = [c](const Tensor&, const Tensor& og, const std::vector<const Tensor*>&,
                 std::vector<Tensor*>& gr) {
    for (int64_t i = 0; i < og.numel(); ++i) gr[0]->data[i] += og.data[i] * c;
  };
  return apply("scale", {a}, fwd, bwd);
}

Var Tape::concat(const std::vector<Var>& parts, int axis) {
  check(!parts.empty(), "concat: no inputs");
  const Tensor& first = value(parts[0]);
  check(axis >= 0 && axis < first.ndim(),
        "concat: axis " + std::to_string(axis) + " out of bounds for " + format_shape(first.shape));
  std::vector<int> out_shape = first.shape;
  for (size_t i = 1; i < parts.size(); ++i) {
    const Tensor& t = value(parts[i]);
    check(t.ndim() == first.ndim(), "concat: rank mismatch at input " + std::to_string(i));
    for (int d = 0; d < first.ndim(); ++d)
      if (d != axis)
        check(t.shape[d] == first.shape[d],
              "concat: extent mismatch on axis " + std::to_string(d) + " at input " +
                  std::to_string(i) + " (" + format_shape(t.shape) + " vs " +
                  format_shape(first.shape) + ")");
    out_shape[axis] += t.shape[axis];
  }

  int64_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= first.shape[i];
  for (int i = axis + 1; i < first.ndim(); ++i) inner *= first.shape[i];
  const int out_axis = out_shape[axis];

  auto fwd = [outer, inner, out_shape, out_axis, axis](const std::vector<const Tensor*>& in) {
    Tensor out(out_shape);
    int64_t offset = 0;
    for (const Tensor* t : in) {
      const int64_t ax = t->shape[static_cast<size_t>(axis)];
      for (int64_t o = 0; o < outer; ++o) {
        const float* src = t->data.data() + o * ax * inner;
        float* dst = out.data.data() + (o * out_axis + offset) * inner;
        std::memcpy(dst, src, static_cast<size_t>(ax * inner) * sizeof(float));
      }
      offset += ax;
    }
    return out;
  };
  auto bwd = [outer, inner, out_axis, axis](const Tensor&, const Tensor& og,
                                            const std::vector<const Tensor*>& in,
                                            std::vector<Tensor*>& gr) {
    int64_t offset = 0;
    for (size_t pi = 0; pi < in.size(); ++pi) {
      const int64_t ax = in[pi]->shape[static_cast<size_t>(axis)];
      for (int64_t o = 0; o < outer; ++o) {
        const float* src = og.data.data() + (o * out_axis + offset) * inner;
        float* dst = gr[pi]->data.data() + o * ax * inner;
        for (int64_t i = 0; i < ax * inner; ++i) dst[i] += src[i];
      }
      offset += ax;
    }
  };
  return apply("concat", parts, fwd, bwd);
}

Var Tape::relu(Var a) {
  auto fwd = [](const std::vector<const Tensor*>& in) {
    Tensor out(in[0]->shape);
    for (int64_t i = 0; i < out.numel(); ++i) out.data[i] = in[0]->data[i] > 0.0f ? in[0]->data[i] : 0.0f;
    return out;
  };
  auto bwd = [](const Tensor&, const Tensor& og, const std::vector<const Tensor*>& in,
                std::vector<Tensor*>& gr) {
    for (int64_t i = 0; i < og.numel(); ++i)
      if (in[0]->data[i] > 0.0f) gr[0]->data[i] += og.data[i];
  };
  return apply("relu", {a}, fwd, bwd);
}

Var Tape::sigmoid(Var a) {
  auto fwd = [](const std::vector<const Tensor*>& in) {
    Tensor out(in[0]->shape);
    for (int64_t i = 0; i < out.numel(); ++i)
      out.data[i] = static_cast<float>(stable_sigmoid(in[0]->data[i]));
    return out;
  };
  auto bwd = [](const Tensor& out, const Tensor& og, const std::vector<const Tensor*>&,
                std::vector<Tensor*>& gr) {
    for (int64_t i = 0; i < og.numel(); ++i) {
      const float y = out.data[i];
      gr[0]->data[i] += og.data[i] * y * (1.0f - y);
    }
  };
  return apply("sigmoid", {a}, fwd, bwd);
}

Var Tape::gather_channels(Var input, std::vector<int> indices) {
  const Tensor& x = value(input);
  check(x.ndim() == 3, "gather_channels: input must be [C,H,W], got " + format_shape(x.shape));
  const int c = x.shape[0];
  for (int idx : indices)
    check(idx >= 0 && idx < c,
          "gather_channels: channel index " + std::to_string(idx) + " out of range [0," +
              std::to_string(c) + ")");
  const int h = x.shape[1], w = x.shape[2];
  const int64_t hw = static_cast<int64_t>(h) * w;

  auto fwd = [indices, hw, h, w](const std::vector<const Tensor*>& in) {
    Tensor out({static_cast<int>(indices.size()), h, w});
    for (size_t j = 0; j < indices.size(); ++j)
      std::memcpy(out.data.data() + j * hw, in[0]->data.data() + static_cast<size_t>(indices[j]) * hw,
                  static_cast<size_t>(hw) * sizeof(float));
    return out;
  };
  auto bwd = [indices, hw](const Tensor&, const Tensor& og, const std::vector<const Tensor*>&,
                           std::vector<Tensor*>& gr) {
    for (size_t j = 0; j < indices.size(); ++j) {
      const float* src = og.data.data() + j * hw;
      float* dst = gr[0]->data.data() + static_cast<size_t>(indices[j]) * hw;
      for (int64_t i = 0; i < hw; ++i) dst[i] += src[i];
    }
  };
  return apply("gather_channels", {input}, fwd, bwd);
}

Var Tape::reshape(Var a, std::vector<int> new_shape) {
  const Tensor& x = value(a);
  check(Tensor::checked_numel(new_shape) == x.numel(),
        "reshape: cannot view " + format_shape(x.shape) + " as " + format_shape(new_shape));
  auto fwd = [new_shape](const std::vector<const Tensor*>& in) {
    return Tensor(new_shape, in[0]->data);
  };
  auto bwd = [](const Tensor&, const Tensor& og, const std::vector<const Tensor*>&,
                std::vector<Tensor*>& gr) {
    for (int64_t i = 0; i < og.numel(); ++i) gr[0]->data[i] += og.data[i];
  };
  return apply("reshape", {a}, fwd, bwd);
}

Var Tape::sum(Var a) {
  auto fwd = [](const std::vector<const Tensor*>& in) {
    double acc = 0.0;
    for (int64_t i = 0; i < in[0]->numel(); ++i) acc += in[0]->data[i];
    return Tensor::scalar(static_cast<float>(acc));
  };
  auto bwd = [](const Tensor&, const Tensor& og, const std::vector<const Tensor*>&,
                std::vector<Tensor*>& gr) {
    const float g = og.data[0];
    for (int64_t i = 0; i < gr[0]->numel(); ++i) gr[0]->data[i] += g;
  };
  return apply("sum", {a}, fwd, bwd);
}

Var Tape::mean(Var a) {
  const int64_t n = value(a).numel();
  check(n > 0, "mean: empty tensor");
  auto fwd = [n](const std::vector<const Tensor*>& in) {
    double acc = 0.0;
    for (int64_t i = 0; i < n; ++i) acc += in[0]->data[i];
    return Tensor::scalar(static_cast<float>(acc / static_cast<double>(n)));
  };
  auto bwd = [n](const Tensor&, const Tensor& og, const std::vector<const Tensor*>&,
                 std::vector<Tensor*>& gr) {
    const float g = og.data[0] / static_cast<float>(n);
    for (int64_t i = 0; i < n; ++i) gr[0]->data[i] += g;
  };
  return apply("mean", {a}, fwd, bwd);
}

}  // namespace mvagg
