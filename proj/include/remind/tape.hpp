#pragma once

#include <cstddef>
#include <cstdint>
#include <deque>
#include <functional>
#include <memory>
#include <vector>

#include "remind/tensor.hpp"

namespace remind {

class Tape;

// Handle to a node recorded on a Tape.
struct Var {
  Tape* tape = nullptr;
  std::size_t id = 0;

  const Tensor& value() const;
  const std::vector<std::size_t>& shape() const { return value().shape(); }
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }
};

// Reverse-mode tape. Nodes are appended in evaluation order; backward()
// replays adjoints in exactly the reverse order. The tape is rebuilt for
// every forward pass.
class Tape {
 public:
  using Backward = std::function<void(Tape&, std::size_t self)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor value);
  Var parameter(Tensor value);

  // Records an op result. `backward` is kept only when some parent needs a
  // gradient.
  Var record(Tensor value, std::initializer_list<Var> parents, Backward backward);
  Var record(Tensor value, const std::vector<Var>& parents, Backward backward);

  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  const Tensor& value(std::size_t id) const { return nodes_[id].value; }

  // Gradient buffer of a node, allocated (zeroed) on first access.
  Tensor& grad_buffer(std::size_t id);
  // Gradient after backward(); zeros if the node received none.
  Tensor grad(Var v) const;

  // Seeds d(root)/d(root) = 1 and propagates. Throws if root is not scalar.
  void backward(Var root);

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    Backward backward;
  };
  std::deque<Node> nodes_;
};

// Returns d(loss)/d(p) for each p. Runs backward on the tape that owns loss.
std::vector<Tensor> grad(Var loss, const std::vector<Var>& params);

namespace ops {

Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double c);
Var add_scalar(Var a, double c);
// a[N,D] + b[D] broadcast over rows
Var add_row(Var a, Var b);
// a[N,D] * g[D] broadcast over rows
Var mul_row(Var a, Var g);
// a * c with c a constant of the same shape
Var mul_const(Var a, const Tensor& c);

Var matmul(Var a, Var b);
Var transpose(Var a);

// Row softmax over the last extent of a rank-2 input. `mask` as in
// kernels::softmax_rows; null means every entry is allowed. Throws on
// non-finite input.
Var softmax_rows(Var x, std::shared_ptr<const std::vector<std::uint8_t>> mask = nullptr);

Var tanh(Var a);
// tanh approximation of GELU
Var gelu(Var a);
// x / sqrt(mean(x^2) + eps) per row
Var rms_norm(Var a, double eps = 1e-6);

Var concat_cols(const std::vector<Var>& parts);
Var concat_rows(const std::vector<Var>& parts);
Var slice_cols(Var a, std::size_t start, std::size_t width);
Var slice_rows(Var a, std::size_t start, std::size_t count);
Var gather_rows(Var a, std::vector<std::size_t> index);
// Same data, new shape of equal element count.
Var reshape(Var a, std::vector<std::size_t> shape);

// Rotates consecutive feature pairs (2b, 2b+1) of every head block of
// x[N, heads*2B] by angles[N, B]. Differentiable in both x and angles.
Var rotary(Var x, Var angles, std::size_t heads);

Var sum(Var a);
Var mean(Var a);

}  // namespace ops
}  // namespace remind
