#include "remind/tape.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

#include "remind/kernels.hpp"

namespace remind {

const Tensor& Var::value() const { return tape->value(id); }

Var Tape::constant(Tensor value) {
  nodes_.push_back(Node{std::move(value), {}, false, {}});
  return Var{this, nodes_.size() - 1};
}

Var Tape::parameter(Tensor value) {
  nodes_.push_back(Node{std::move(value), {}, true, {}});
  return Var{this, nodes_.size() - 1};
}

Var Tape::record(Tensor value, std::initializer_list<Var> parents, Backward backward) {
  bool needs = false;
  for (const Var& p : parents) needs = needs || nodes_[p.id].requires_grad;
  nodes_.push_back(Node{std::move(value), {}, needs, needs ? std::move(backward) : Backward{}});
  return Var{this, nodes_.size() - 1};
}

Var Tape::record(Tensor value, const std::vector<Var>& parents, Backward backward) {
  bool needs = false;
  for (const Var& p : parents) needs = needs || nodes_[p.id].requires_grad;
  nodes_.push_back(Node{std::move(value), {}, needs, needs ? std::move(backward) : Backward{}});
  return Var{this, nodes_.size() - 1};
}

Tensor& Tape::grad_buffer(std::size_t id) {
  Node& n = nodes_[id];
  if (n.grad.size() != n.value.size() || n.grad.shape() != n.value.shape())
    n.grad = Tensor(n.value.shape(), 0.0);
  return n.grad;
}

Tensor Tape::grad(Var v) const {
  const Node& n = nodes_[v.id];
  if (n.grad.shape() == n.value.shape() && n.grad.size() == n.value.size()) return n.grad;
  return Tensor(n.value.shape(), 0.0);
}

void Tape::backward(Var root) {
  if (root.tape != this) throw std::invalid_argument("backward: variable belongs to another tape");
  if (nodes_[root.id].value.size() != 1)
    throw std::invalid_argument("backward: loss is not scalar, shape " +
                                shape_string(nodes_[root.id].value.shape()));
  for (auto& n : nodes_) n.grad = Tensor();
  grad_buffer(root.id)[0] = 1.0;
  for (std::size_t i = root.id + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.backward || n.grad.size() == 0) continue;
    n.backward(*this, i);
  }
}

std::vector<Tensor> grad(Var loss, const std::vector<Var>& params) {
  loss.tape->backward(loss);
  std::vector<Tensor> out;
  out.reserve(params.size());
  for (const Var& p : params) out.push_back(loss.tape->grad(p));
  return out;
}

namespace ops {

namespace {

void require_same_shape(const Var& a, const Var& b, const char* op) {
  if (a.shape() != b.shape())
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_string(a.shape()) +
                                " vs " + shape_string(b.shape()));
}

void require_matrix(const Var& a, const char* op) {
  if (a.value().rank() != 2)
    throw std::invalid_argument(std::string(op) + ": expected a matrix, got " +
                                shape_string(a.shape()));
}

void accumulate(Tape& t, std::size_t id, const Tensor& g) {
  if (!t.requires_grad(id)) return;
  Tensor& dst = t.grad_buffer(id);
  for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
}

template <typename F>
Var unary_elementwise(Var a, F&& f, std::function<double(double x, double y)> dfdx) {
  Tensor out = a.value();
  for (double& v : out.storage()) v = f(v);
  const std::size_t aid = a.id;
  return a.tape->record(std::move(out), {a}, [aid, dfdx](Tape& t, std::size_t self) {
    if (!t.requires_grad(aid)) return;
    const Tensor& x = t.value(aid);
    const Tensor& y = t.value(self);
    const Tensor& g = t.grad_buffer(self);
    Tensor& dx = t.grad_buffer(aid);
    for (std::size_t i = 0; i < g.size(); ++i) dx[i] += g[i] * dfdx(x[i], y[i]);
  });
}

}  // namespace

Var add(Var a, Var b) {
  require_same_shape(a, b, "add");
  Tensor out = a.value();
  const Tensor& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  const std::size_t aid = a.id, bid = b.id;
  return a.tape->record(std::move(out), {a, b}, [aid, bid](Tape& t, std::size_t self) {
    Tensor g = t.grad_buffer(self);
    accumulate(t, aid, g);
    accumulate(t, bid, g);
  });
}

Var sub(Var a, Var b) {
  require_same_shape(a, b, "sub");
  Tensor out = a.value();
  const Tensor& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
  const std::size_t aid = a.id, bid = b.id;
  return a.tape->record(std::move(out), {a, b}, [aid, bid](Tape& t, std::size_t self) {
    Tensor g = t.grad_buffer(self);
    accumulate(t, aid, g);
    for (double& v : g.storage()) v = -v;
    accumulate(t, bid, g);
  });
}

Var mul(Var a, Var b) {
  require_same_shape(a, b, "mul");
  Tensor out = a.value();
  const Tensor& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  const std::size_t aid = a.id, bid = b.id;
  return a.tape->record(std::move(out), {a, b}, [aid, bid](Tape& t, std::size_t self) {
    const Tensor& g = t.grad_buffer(self);
    if (t.requires_grad(aid)) {
      const Tensor& bv = t.value(bid);
      Tensor& da = t.grad_buffer(aid);
      for (std::size_t i = 0; i < g.size(); ++i) da[i] += g[i] * bv[i];
    }
    if (t.requires_grad(bid)) {
      const Tensor& av = t.value(aid);
      Tensor& db = t.grad_buffer(bid);
      for (std::size_t i = 0; i < g.size(); ++i) db[i] += g[i] * av[i];
    }
  });
}

Var scale(Var a, double c) {
  Tensor out = a.value();
  for (double& v : out.storage()) v *= c;
  const std::size_t aid = a.id;
  return a.tape->record(std::move(out), {a}, [aid, c](Tape& t, std::size_t self) {
    if (!t.requires_grad(aid)) return;
    const Tensor& g = t.grad_buffer(self);
    Tensor& da = t.grad_buffer(aid);
    for (std::size_t i = 0; i < g.size(); ++i) da[i] += c * g[i];
  });
}

Var add_scalar(Var a, double c) {
  Tensor out = a.value();
  for (double& v : out.storage()) v += c;
  const std::size_t aid = a.id;
  return a.tape->record(std::move(out), {a}, [aid](Tape& t, std::size_t self) {
    accumulate(t, aid, t.grad_buffer(self));
  });
}

Var add_row(Var a, Var b) {
  require_matrix(a, "add_row");
  const std::size_t n = a.rows(), d = a.cols();
  if (b.value().size() != d)
    throw std::invalid_argument("add_row: bias length " + std::to_string(b.value().size()) +
                                " vs width " + std::to_string(d));
  Tensor out = a.value();
  const Tensor& bv = b.value();
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < d; ++c) out(r, c) += bv[c];
  const std::size_t aid = a.id, bid = b.id;
  return a.tape->record(std::move(out), {a, b}, [aid, bid, n, d](Tape& t, std::size_t self) {
    const Tensor& g = t.grad_buffer(self);
    accumulate(t, aid, g);
    if (t.requires_grad(bid)) {
      Tensor& db = t.grad_buffer(bid);
      for (std::size_t r = 0; r < n; ++r)
        for (std::size_t c = 0; c < d; ++c) db[c] += g[r * d + c];
    }
  });
}

Var mul_row(Var a, Var gvar) {
  require_matrix(a, "mul_row");
  const std::size_t n = a.rows(), d = a.cols();
  if (gvar.value().size() != d) throw std::invalid_argument("mul_row: gain length mismatch");
  Tensor out = a.value();
  const Tensor& gv = gvar.value();
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < d; ++c) out(r, c) *= gv[c];
  const std::size_t aid = a.id, gid = gvar.id;
  return a.tape->record(std::move(out), {a, gvar}, [aid, gid, n, d](Tape& t, std::size_t self) {
    const Tensor& g = t.grad_buffer(self);
    const Tensor& av = t.value(aid);
    const Tensor& gv = t.value(gid);
    if (t.requires_grad(aid)) {
      Tensor& da = t.grad_buffer(aid);
      for (std::size_t r = 0; r < n; ++r)
        for (std::size_t c = 0; c < d; ++c) da[r * d + c] += g[r * d + c] * gv[c];
    }
    if (t.requires_grad(gid)) {
      Tensor& dg = t.grad_buffer(gid);
      for (std::size_t r = 0; r < n; ++r)
        for (std::size_t c = 0; c < d; ++c) dg[c] += g[r * d + c] * av[r * d + c];
    }
  });
}

Var mul_const(Var a, const Tensor& c) {
  if (!a.value().same_shape(c)) throw std::invalid_argument("mul_const: shape mismatch");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= c[i];
  const std::size_t aid = a.id;
  return a.tape->record(std::move(out), {a}, [aid, c](Tape& t, std::size_t self) {
    if (!t.requires_grad(aid)) return;
    const Tensor& g = t.grad_buffer(self);
    Tensor& da = t.grad_buffer(aid);
    for (std::size_t i = 0; i < g.size(); ++i) da[i] += g[i] * c[i];
  });
}

Var matmul(Var a, Var b) {
  require_matrix(a, "matmul");
  require_matrix(b, "matmul");
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  if (b.rows() != k)
    throw std::invalid_argument("matmul: inner extents differ " + shape_string(a.shape()) +
                                " * " + shape_string(b.shape()));
  Tensor out({m, n});
  kernels::matmul(a.value().values(), b.value().values(), out.values(), m, k, n);
  const std::size_t aid = a.id, bid = b.id;
  return a.tape->record(std::move(out), {a, b}, [aid, bid, m, k, n](Tape& t, std::size_t self) {
    const Tensor& g = t.grad_buffer(self);
    if (t.requires_grad(aid))
      kernels::matmul_a_bt_acc(g.values(), t.value(bid).values(), t.grad_buffer(aid).values(),
                               m, n, k);
    if (t.requires_grad(bid))
      kernels::matmul_at_b_acc(t.value(aid).values(), g.values(), t.grad_buffer(bid).values(),
                               m, k, n);
  });
}

Var transpose(Var a) {
  require_matrix(a, "transpose");
  const std::size_t n = a.rows(), d = a.cols();
  Tensor out({d, n});
  const Tensor& av = a.value();
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < d; ++c) out(c, r) = av(r, c);
  const std::size_t aid = a.id;
  return a.tape->record(std::move(out), {a}, [aid, n, d](Tape& t, std::size_t self) {
    if (!t.requires_grad(aid)) return;
    const Tensor& g = t.grad_buffer(self);
    Tensor& da = t.grad_buffer(aid);
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t c = 0; c < d; ++c) da[r * d + c] += g[c * n + r];
  });
}

Var softmax_rows(Var x, std::shared_ptr<const std::vector<std::uint8_t>> mask) {
  require_matrix(x, "softmax_rows");
  const std::size_t rows = x.rows(), cols = x.cols();
  if (cols < 1) throw std::invalid_argument("softmax_rows: empty last extent");
  if (mask && mask->size() != rows * cols)
    throw std::invalid_argument("softmax_rows: mask size mismatch");
  const Tensor& xv = x.value();
  for (std::size_t i = 0; i < xv.size(); ++i) {
    if (mask && !(*mask)[i]) continue;
    if (!std::isfinite(xv[i])) throw std::domain_error("softmax_rows: non-finite input");
  }
  Tensor out({rows, cols});
  std::span<const std::uint8_t> mspan;
  if (mask) mspan = *mask;
  kernels::softmax_rows(xv.values(), mspan, out.values(), rows, cols);
  const std::size_t xid = x.id;
  return x.tape->record(std::move(out), {x}, [xid, rows, cols](Tape& t, std::size_t self) {
    if (!t.requires_grad(xid)) return;
    kernels::softmax_rows_backward(t.value(self).values(), t.grad_buffer(self).values(),
                                   t.grad_buffer(xid).values(), rows, cols);
  });
}

Var tanh(Var a) {
  return unary_elementwise(
      a, [](double x) { return std::tanh(x); }, [](double, double y) { return 1.0 - y * y; });
}

Var gelu(Var a) {
  constexpr double c = 0.7978845608028654;  // sqrt(2/pi)
  constexpr double k = 0.044715;
  return unary_elementwise(
      a,
      [](double x) { return 0.5 * x * (1.0 + std::tanh(c * (x + k * x * x * x))); },
      [](double x, double) {
        const double u = c * (x + k * x * x * x);
        const double th = std::tanh(u);
        const double du = c * (1.0 + 3.0 * k * x * x);
        return 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du;
      });
}

Var rms_norm(Var a, double eps) {
  require_matrix(a, "rms_norm");
  const std::size_t n = a.rows(), d = a.cols();
  Tensor out = a.value();
  std::vector<double> inv(n);
  for (std::size_t r = 0; r < n; ++r) {
    double ss = 0.0;
    for (std::size_t c = 0; c < d; ++c) ss += out(r, c) * out(r, c);
    inv[r] = 1.0 / std::sqrt(ss / static_cast<double>(d) + eps);
    for (std::size_t c = 0; c < d; ++c) out(r, c) *= inv[r];
  }
  const std::size_t aid = a.id;
  return a.tape->record(std::move(out), {a},
                        [aid, n, d, inv = std::move(inv)](Tape& t, std::size_t self) {
    if (!t.requires_grad(aid)) return;
    const Tensor& g = t.grad_buffer(self);
    const Tensor& y = t.value(self);
    Tensor& da = t.grad_buffer(aid);
    // dx = inv * (g - y * mean(g * y))
    for (std::size_t r = 0; r < n; ++r) {
      double gy = 0.0;
      for (std::size_t c = 0; c < d; ++c) gy += g[r * d + c] * y[r * d + c];
      gy /= static_cast<double>(d);
      for (std::size_t c = 0; c < d; ++c)
        da[r * d + c] += inv[r] * (g[r * d + c] - y[r * d + c] * gy);
    }
  });
}

Var concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_cols: no inputs");
  const std::size_t n = parts.front().rows();
  std::size_t total = 0;
  std::vector<std::size_t> widths;
  for (const Var& p : parts) {
    require_matrix(p, "concat_cols");
    if (p.rows() != n) throw std::invalid_argument("concat_cols: row count mismatch");
    widths.push_back(p.cols());
    total += p.cols();
  }
  Tensor out({n, total});
  std::size_t off = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const Tensor& pv = parts[k].value();
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t c = 0; c < widths[k]; ++c) out(r, off + c) = pv(r, c);
    off += widths[k];
  }
  std::vector<std::size_t> ids;
  for (const Var& p : parts) ids.push_back(p.id);
  return parts.front().tape->record(
      std::move(out), parts, [ids, widths, n, total](Tape& t, std::size_t self) {
        const Tensor& g = t.grad_buffer(self);
        std::size_t off = 0;
        for (std::size_t k = 0; k < ids.size(); ++k) {
          if (t.requires_grad(ids[k])) {
            Tensor& d = t.grad_buffer(ids[k]);
            for (std::size_t r = 0; r < n; ++r)
              for (std::size_t c = 0; c < widths[k]; ++c)
                d[r * widths[k] + c] += g[r * total + off + c];
          }
          off += widths[k];
        }
      });
}

Var concat_rows(const std::vector<Var>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_rows: no inputs");
  const std::size_t d = parts.front().cols();
  std::size_t total = 0;
  std::vector<std::size_t> counts;
  for (const Var& p : parts) {
    require_matrix(p, "concat_rows");
    if (p.cols() != d) throw std::invalid_argument("concat_rows: column count mismatch");
    counts.push_back(p.rows());
    total += p.rows();
  }
  std::vector<double> data;
  data.reserve(total * d);
  for (const Var& p : parts)
    data.insert(data.end(), p.value().storage().begin(), p.value().storage().end());
  std::vector<std::size_t> ids;
  for (const Var& p : parts) ids.push_back(p.id);
  return parts.front().tape->record(
      Tensor({total, d}, std::move(data)), parts, [ids, counts, d](Tape& t, std::size_t self) {
        const Tensor& g = t.grad_buffer(self);
        std::size_t off = 0;
        for (std::size_t k = 0; k < ids.size(); ++k) {
          const std::size_t len = counts[k] * d;
          if (t.requires_grad(ids[k])) {
            Tensor& dst = t.grad_buffer(ids[k]);
            for (std::size_t i = 0; i < len; ++i) dst[i] += g[off + i];
          }
          off += len;
        }
      });
}

Var slice_cols(Var a, std::size_t start, std::size_t width) {
  require_matrix(a, "slice_cols");
  const std::size_t n = a.rows(), d = a.cols();
  if (start + width > d) throw std::out_of_range("slice_cols: range exceeds width");
  Tensor out({n, width});
  const Tensor& av = a.value();
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < width; ++c) out(r, c) = av(r, start + c);
  const std::size_t aid = a.id;
  return a.tape->record(std::move(out), {a}, [aid, n, d, start, width](Tape& t, std::size_t self) {
    if (!t.requires_grad(aid)) return;
    const Tensor& g = t.grad_buffer(self);
    Tensor& da = t.grad_buffer(aid);
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t c = 0; c < width; ++c) da[r * d + start + c] += g[r * width + c];
  });
}

Var slice_rows(Var a, std::size_t start, std::size_t count) {
  require_matrix(a, "slice_rows");
  const std::size_t n = a.rows(), d = a.cols();
  if (start + count > n) throw std::out_of_range("slice_rows: range exceeds rows");
  const auto& src = a.value().storage();
  std::vector<double> data(src.begin() + static_cast<std::ptrdiff_t>(start * d),
                           src.begin() + static_cast<std::ptrdiff_t>((start + count) * d));
  const std::size_t aid = a.id;
  return a.tape->record(Tensor({count, d}, std::move(data)), {a},
                        [aid, d, start, count](Tape& t, std::size_t self) {
    if (!t.requires_grad(aid)) return;
    const Tensor& g = t.grad_buffer(self);
    Tensor& da = t.grad_buffer(aid);
    for (std::size_t i = 0; i < count * d; ++i) da[start * d + i] += g[i];
  });
}

Var gather_rows(Var a, std::vector<std::size_t> index) {
  require_matrix(a, "gather_rows");
  const std::size_t n = a.rows(), d = a.cols();
  Tensor out({index.size(), d});
  const Tensor& av = a.value();
  for (std::size_t r = 0; r < index.size(); ++r) {
    if (index[r] >= n) throw std::out_of_range("gather_rows: index out of range");
    for (std::size_t c = 0; c < d; ++c) out(r, c) = av(index[r], c);
  }
  const std::size_t aid = a.id;
  return a.tape->record(std::move(out), {a},
                        [aid, d, index = std::move(index)](Tape& t, std::size_t self) {
    if (!t.requires_grad(aid)) return;
    const Tensor& g = t.grad_buffer(self);
    Tensor& da = t.grad_buffer(aid);
    for (std::size_t r = 0; r < index.size(); ++r)
      for (std::size_t c = 0; c < d; ++c) da[index[r] * d + c] += g[r * d + c];
  });
}

Var reshape(Var a, std::vector<std::size_t> shape) {
  if (shape_numel(shape) != a.value().size())
    throw std::invalid_argument("reshape: " + shape_string(a.shape()) + " to " + shape_string(shape));
  const std::size_t aid = a.id;
  return a.tape->record(Tensor(std::move(shape), a.value().storage()), {a},
                        [aid](Tape& t, std::size_t self) {
    if (!t.requires_grad(aid)) return;
    const Tensor& g = t.grad_buffer(self);
    Tensor& da = t.grad_buffer(aid);
    for (std::size_t i = 0; i < g.size(); ++i) da[i] += g[i];
  });
}

Var rotary(Var x, Var angles, std::size_t heads) {
  require_matrix(x, "rotary");
  require_matrix(angles, "rotary");
  const std::size_t n = x.rows(), width = x.cols();
  if (heads == 0 || width % heads != 0)
    throw std::invalid_argument("rotary: width not divisible by head count");
  const std::size_t hd = width / heads;
  if (hd % 2 != 0) throw std::invalid_argument("rotary: odd feature dimension per head");
  const std::size_t bands = hd / 2;
  if (angles.rows() != n || angles.cols() != bands)
    throw std::invalid_argument("rotary: angle table " + shape_string(angles.shape()) +
                                " does not match " + std::to_string(n) + " rows x " +
                                std::to_string(bands) + " bands");
  const Tensor& xv = x.value();
  const Tensor& av = angles.value();
  Tensor out({n, width});
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t b = 0; b < bands; ++b) {
      const double cs = std::cos(av(r, b)), sn = std::sin(av(r, b));
      for (std::size_t h = 0; h < heads; ++h) {
        const std::size_t i0 = h * hd + 2 * b;
        const double x0 = xv(r, i0), x1 = xv(r, i0 + 1);
        out(r, i0) = cs * x0 - sn * x1;
        out(r, i0 + 1) = sn * x0 + cs * x1;
      }
    }
  }
  const std::size_t xid = x.id, aid = angles.id;
  return x.tape->record(std::move(out), {x, angles},
                        [xid, aid, n, heads, hd, bands](Tape& t, std::size_t self) {
    const Tensor& g = t.grad_buffer(self);
    const Tensor& xv = t.value(xid);
    const Tensor& av = t.value(aid);
    const Tensor& y = t.value(self);
    const bool need_x = t.requires_grad(xid), need_a = t.requires_grad(aid);
    Tensor* dx = need_x ? &t.grad_buffer(xid) : nullptr;
    Tensor* da = need_a ? &t.grad_buffer(aid) : nullptr;
    const std::size_t width = heads * hd;
    for (std::size_t r = 0; r < n; ++r) {
      for (std::size_t b = 0; b < bands; ++b) {
        const double cs = std::cos(av(r, b)), sn = std::sin(av(r, b));
        double dang = 0.0;
        for (std::size_t h = 0; h < heads; ++h) {
          const std::size_t i0 = r * width + h * hd + 2 * b;
          const double g0 = g[i0], g1 = g[i0 + 1];
          if (dx) {
            (*dx)[i0] += cs * g0 + sn * g1;
            (*dx)[i0 + 1] += -sn * g0 + cs * g1;
          }
          // d(y0)/d(angle) = -y1, d(y1)/d(angle) = y0
          dang += -g0 * y[i0 + 1] + g1 * y[i0];
        }
        if (da) (*da)[r * bands + b] += dang;
      }
    }
    (void)xv;
  });
}

Var sum(Var a) {
  double s = 0.0;
  for (double v : a.value().storage()) s += v;
  const std::size_t aid = a.id;
  return a.tape->record(Tensor::scalar(s), {a}, [aid](Tape& t, std::size_t self) {
    if (!t.requires_grad(aid)) return;
    const double g = t.grad_buffer(self)[0];
    for (double& v : t.grad_buffer(aid).storage()) v += g;
  });
}

Var mean(Var a) {
  const std::size_t n = a.value().size();
  if (n == 0) throw std::invalid_argument("mean: empty tensor");
  return scale(sum(a), 1.0 / static_cast<double>(n));
}

}  // namespace ops
}  // namespace remind
