#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "mvagg/common.hpp"

namespace mvagg {

// Dense row-major float32 tensor. Reductions inside operations accumulate
// in float64 before rounding back to storage precision.
struct Tensor {
  std::vector<int> shape;
  std::vector<float> data;

  Tensor() = default;
  explicit Tensor(std::vector<int> s)
      : shape(std::move(s)), data(static_cast<size_t>(checked_numel(shape)), 0.0f) {}
  Tensor(std::vector<int> s, std::vector<float> d);

  static Tensor zeros(std::vector<int> s) { return Tensor(std::move(s)); }
  static Tensor full(std::vector<int> s, float v);
  static Tensor scalar(float v);
  static Tensor uniform(std::vector<int> s, Rng& rng, float lo, float hi);

  int64_t numel() const { return static_cast<int64_t>(data.size()); }
  int ndim() const { return static_cast<int>(shape.size()); }
  bool same_shape(const Tensor& o) const { return shape == o.shape; }
  bool all_finite() const;
  bool bit_equal(const Tensor& o) const;

  float at(std::initializer_list<int> idx) const;
  float& at(std::initializer_list<int> idx);

  static int64_t checked_numel(const std::vector<int>& s);
};

enum class PoolMode { max, avg };

// Handle into a Tape node.
struct Var {
  int id = -1;
  bool valid() const { return id >= 0; }
};

using GradMap = std::map<std::string, Tensor>;

// Define-by-run reverse-mode tape. Every operation appends a node holding
// the computed value plus closures that can (a) replay the forward step
// from the saved inputs and (b) push an output gradient back to the input
// gradients. backward() walks nodes in reverse creation order, which is a
// valid topological order by construction.
class Tape {
 public:
  using ForwardFn = std::function<Tensor(const std::vector<const Tensor*>&)>;
  using BackwardFn =
      std::function<void(const Tensor& out_value, const Tensor& out_grad,
                         const std::vector<const Tensor*>& in_values,
                         const std::vector<Tensor*>& in_grads)>;

  // Named leaf (parameter or input); names must be unique per tape.
  Var leaf(const std::string& name, Tensor value);
  Var constant(Tensor value);

  Var conv2d(Var input, Var kernel, Var bias, int stride, int padding, int dilation = 1);
  Var linear(Var input, Var weight, Var bias);
  Var softmax(Var input, int axis);
  Var pool_spatial(Var input, PoolMode mode);  // [C,H,W] -> [C]
  Var pool_channel(Var input, PoolMode mode);  // [C,H,W] -> [1,H,W]
  Var mul(Var a, Var b);
  Var add(Var a, Var b);
  Var sub(Var a, Var b);
  Var scale(Var a, float c);
  Var concat(const std::vector<Var>& parts, int axis);
  Var relu(Var a);
  Var sigmoid(Var a);
  Var gather_channels(Var input, std::vector<int> indices);  // [C,H,W] -> [K,H,W]
  Var reshape(Var a, std::vector<int> new_shape);
  Var sum(Var a);   // -> [1]
  Var mean(Var a);  // -> [1]

  // Escape hatch for domain ops (grid warps, fused losses). fwd must be a
  // pure function of the inputs; it is kept for replay verification.
  Var apply(std::string op, std::vector<Var> inputs, ForwardFn fwd, BackwardFn bwd);

  const Tensor& value(Var v) const;
  int size() const { return static_cast<int>(nodes_.size()); }

  // Re-runs every recorded forward closure on its saved inputs and checks
  // the outputs match bit for bit.
  bool replay_matches() const;

  // Gradient of `output` w.r.t. every named leaf. Leaves not on the path
  // to `output` get zero tensors.
  GradMap backward(Var output, const Tensor& output_grad) const;

 private:
  struct Node {
    std::string name;  // empty unless named leaf
    std::string op;
    std::vector<int> inputs;
    Tensor value;
    ForwardFn fwd;
    BackwardFn bwd;
  };

  Var push(std::string op, std::vector<int> inputs, Tensor value, ForwardFn fwd, BackwardFn bwd);
  const Node& node(Var v) const;

  std::vector<Node> nodes_;
};

// Shared low-level kernels (also used by the tape closures).
Tensor conv2d_forward(const Tensor& x, const Tensor& k, const Tensor& b, int stride, int padding,
                      int dilation);
void conv2d_backward(const Tensor& x, const Tensor& k, const Tensor& out_grad, int stride,
                     int padding, int dilation, Tensor* gx, Tensor* gk, Tensor* gb);

}  // namespace mvagg
