#include "rala/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "rala/errors.hpp"
#include "rala/rng.hpp"

namespace rala::ad {
namespace la = rala::linalg;

std::string_view op_name(Op op) noexcept {
  switch (op) {
    case Op::leaf: return "leaf";
    case Op::constant: return "constant";
    case Op::matmul: return "matmul";
    case Op::transpose: return "transpose";
    case Op::add: return "add";
    case Op::sub: return "sub";
    case Op::scale: return "scale";
    case Op::hadamard: return "hadamard";
    case Op::add_bias: return "add_bias";
    case Op::scale_rows: return "scale_rows";
    case Op::div_rows: return "div_rows";
    case Op::softmax_rows: return "softmax_rows";
    case Op::kernel_elu1: return "kernel_elu1";
    case Op::relu: return "relu";
    case Op::tanh: return "tanh";
    case Op::gelu: return "gelu";
    case Op::mean_rows: return "mean_rows";
    case Op::layer_norm: return "layer_norm";
    case Op::slice_cols: return "slice_cols";
    case Op::concat_cols: return "concat_cols";
    case Op::depthwise_conv3x3: return "depthwise_conv3x3";
    case Op::im2col3x3: return "im2col3x3";
    case Op::cross_entropy: return "cross_entropy";
  }
  return "unknown";
}

const Matrix& Var::value() const { return tape_->value(id_); }

namespace {

Matrix cross_entropy_value(const Matrix& logits, const std::vector<std::size_t>& labels) {
  if (labels.size() != logits.rows()) {
    throw DimensionError("cross_entropy: " + std::to_string(labels.size()) + " labels for " +
                         logits.shape_string() + " logits");
  }
  double total = 0.0;
  for (std::size_t i = 0; i < logits.rows(); ++i) {
    auto row = logits.row(i);
    if (labels[i] >= row.size()) throw DimensionError("cross_entropy: label out of range");
    const double peak = *std::max_element(row.begin(), row.end());
    double z = 0.0;
    for (double v : row) z += std::exp(v - peak);
    total += std::log(z) + peak - row[labels[i]];
  }
  return Matrix(1, 1, total / static_cast<double>(logits.rows()));
}

Matrix column_sums(const Matrix& g) {
  Matrix out(1, g.cols());
  auto acc = out.row(0);
  for (std::size_t i = 0; i < g.rows(); ++i) {
    auto r = g.row(i);
    for (std::size_t j = 0; j < g.cols(); ++j) acc[j] += r[j];
  }
  return out;
}

Matrix row_dots(const Matrix& a, const Matrix& b) {
  Matrix out(a.rows(), 1);
  for (std::size_t i = 0; i < a.rows(); ++i) {
    double s = 0.0;
    auto x = a.row(i);
    auto y = b.row(i);
    for (std::size_t j = 0; j < x.size(); ++j) s += x[j] * y[j];
    out(i, 0) = s;
  }
  return out;
}

void accumulate(Matrix& into, const Matrix& g) {
  if (into.empty() && !g.empty()) {
    into = g;
    return;
  }
  auto dst = into.data();
  auto src = g.data();
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

}  // namespace

Matrix evaluate(Op op, const Attrs& attrs, std::span<const Matrix* const> in) {
  switch (op) {
    case Op::leaf:
    case Op::constant:
      throw ArgumentError("evaluate: inputs have no forward rule");
    case Op::matmul: return la::matmul(*in[0], *in[1]);
    case Op::transpose: return la::transpose(*in[0]);
    case Op::add: return la::add(*in[0], *in[1]);
    case Op::sub: return la::sub(*in[0], *in[1]);
    case Op::scale: return la::scale(*in[0], attrs.scalar);
    case Op::hadamard: return la::hadamard(*in[0], *in[1]);
    case Op::add_bias: return la::add_bias(*in[0], *in[1]);
    case Op::scale_rows: return la::scale_rows(*in[0], *in[1]);
    case Op::div_rows: return la::div_rows(*in[0], *in[1]);
    case Op::softmax_rows: return la::softmax_rows(*in[0]);
    case Op::kernel_elu1: return la::kernel_elu1(*in[0]);
    case Op::relu: return la::relu(*in[0]);
    case Op::tanh: return la::tanh_map(*in[0]);
    case Op::gelu: return la::gelu(*in[0]);
    case Op::mean_rows: return la::mean_rows(*in[0]);
    case Op::layer_norm: return la::layer_norm(*in[0], *in[1], *in[2]);
    case Op::slice_cols: return la::slice_cols(*in[0], attrs.a, attrs.b);
    case Op::concat_cols: {
      std::vector<Matrix> parts;
      parts.reserve(in.size());
      for (const Matrix* m : in) parts.push_back(*m);
      return la::concat_cols(parts);
    }
    case Op::depthwise_conv3x3:
      return la::depthwise_conv3x3(*in[0], attrs.a, attrs.b, *in[1], *in[2]);
    case Op::im2col3x3: return la::im2col3x3(*in[0], attrs.a, attrs.b, attrs.c);
    case Op::cross_entropy: return cross_entropy_value(*in[0], attrs.labels);
  }
  throw ArgumentError("evaluate: unknown op");
}

Var Tape::leaf(Matrix value) {
  leaf_ids_.push_back(nodes_.size());
  nodes_.push_back(Node{Op::leaf, {}, {}, std::move(value)});
  return Var(this, nodes_.size() - 1);
}

Var Tape::constant(Matrix value) {
  nodes_.push_back(Node{Op::constant, {}, {}, std::move(value)});
  return Var(this, nodes_.size() - 1);
}

Var Tape::record(Op op, std::vector<std::size_t> inputs, Attrs attrs) {
  std::vector<const Matrix*> values;
  values.reserve(inputs.size());
  for (std::size_t id : inputs) values.push_back(&nodes_.at(id).value);
  Matrix value;
  try {
    value = evaluate(op, attrs, values);
  } catch (const DimensionError& e) {
    std::string path = "node " + std::to_string(nodes_.size()) + " (" +
                       std::string(op_name(op)) + " <- [";
    for (std::size_t i = 0; i < inputs.size(); ++i) {
      if (i) path += ", ";
      path += std::to_string(inputs[i]) + ":" + std::string(op_name(nodes_[inputs[i]].op));
    }
    throw DimensionError(path + "]): " + e.what());
  }
  nodes_.push_back(Node{op, std::move(inputs), std::move(attrs), std::move(value)});
  return Var(this, nodes_.size() - 1);
}

bool Tape::replay_matches() const {
  for (const Node& node : nodes_) {
    if (node.op == Op::leaf || node.op == Op::constant) continue;
    std::vector<const Matrix*> values;
    for (std::size_t id : node.inputs) values.push_back(&nodes_[id].value);
    if (!(evaluate(node.op, node.attrs, values) == node.value)) return false;
  }
  return true;
}

std::vector<Matrix> Tape::backward(const Var& output, const Matrix& seed) const {
  if (output.tape() != this) throw ArgumentError("backward: output belongs to another tape");
  const Node& out_node = nodes_.at(output.id());
  if (!seed.same_shape(out_node.value)) {
    throw DimensionError("backward: seed " + seed.shape_string() + " does not match output " +
                         out_node.value.shape_string());
  }
  std::vector<Matrix> grads(output.id() + 1);
  grads[output.id()] = seed;

  for (std::size_t id = output.id() + 1; id-- > 0;) {
    const Matrix& g = grads[id];
    if (g.empty()) continue;
    const Node& node = nodes_[id];
    const auto& in = node.inputs;
    auto input = [&](std::size_t k) -> const Matrix& { return nodes_[in[k]].value; };
    auto push = [&](std::size_t k, const Matrix& contribution) {
      accumulate(grads[in[k]], contribution);
    };
    const Matrix& y = node.value;

    switch (node.op) {
      case Op::leaf:
      case Op::constant:
        break;
      case Op::matmul:
        push(0, la::matmul_nt(g, input(1)));
        push(1, la::matmul_tn(input(0), g));
        break;
      case Op::transpose:
        push(0, la::transpose(g));
        break;
      case Op::add:
        push(0, g);
        push(1, g);
        break;
      case Op::sub:
        push(0, g);
        push(1, la::scale(g, -1.0));
        break;
      case Op::scale:
        push(0, la::scale(g, node.attrs.scalar));
        break;
      case Op::hadamard:
        push(0, la::hadamard(g, input(1)));
        push(1, la::hadamard(g, input(0)));
        break;
      case Op::add_bias:
        push(0, g);
        push(1, column_sums(g));
        break;
      case Op::scale_rows:
        push(0, la::scale_rows(g, input(1)));
        push(1, row_dots(g, input(0)));
        break;
      case Op::div_rows: {
        const Matrix& d = input(1);
        push(0, la::div_rows(g, d));
        Matrix gd = row_dots(g, input(0));
        for (std::size_t i = 0; i < gd.rows(); ++i) gd(i, 0) = -gd(i, 0) / (d(i, 0) * d(i, 0));
        push(1, gd);
        break;
      }
      case Op::softmax_rows: {
        // Row-wise Jacobian-vector product: y * (g - <g, y>).
        Matrix dx(y.rows(), y.cols());
        for (std::size_t i = 0; i < y.rows(); ++i) {
          auto yr = y.row(i);
          auto gr = g.row(i);
          double inner = 0.0;
          for (std::size_t j = 0; j < yr.size(); ++j) inner += gr[j] * yr[j];
          auto dr = dx.row(i);
          for (std::size_t j = 0; j < yr.size(); ++j) dr[j] = yr[j] * (gr[j] - inner);
        }
        push(0, dx);
        break;
      }
      case Op::kernel_elu1: {
        const Matrix& x = input(0);
        Matrix dx = g;
        for (std::size_t i = 0; i < dx.size(); ++i)
          if (x.data()[i] <= 0.0) dx.data()[i] *= y.data()[i];
        push(0, dx);
        break;
      }
      case Op::relu: {
        const Matrix& x = input(0);
        Matrix dx = g;
        for (std::size_t i = 0; i < dx.size(); ++i)
          if (x.data()[i] <= 0.0) dx.data()[i] = 0.0;
        push(0, dx);
        break;
      }
      case Op::tanh: {
        Matrix dx = g;
        for (std::size_t i = 0; i < dx.size(); ++i) dx.data()[i] *= 1.0 - y.data()[i] * y.data()[i];
        push(0, dx);
        break;
      }
      case Op::gelu: {
        const Matrix& x = input(0);
        Matrix dx = g;
        for (std::size_t i = 0; i < dx.size(); ++i) {
          const double v = x.data()[i];
          const double cdf = 0.5 * (1.0 + std::erf(v * std::numbers::sqrt2 / 2.0));
          const double pdf = std::exp(-0.5 * v * v) * std::numbers::inv_sqrtpi / std::numbers::sqrt2;
          dx.data()[i] *= cdf + v * pdf;
        }
        push(0, dx);
        break;
      }
      case Op::mean_rows: {
        const Matrix& x = input(0);
        Matrix dx(x.rows(), x.cols());
        const double inv = 1.0 / static_cast<double>(x.rows());
        for (std::size_t i = 0; i < x.rows(); ++i)
          for (std::size_t j = 0; j < x.cols(); ++j) dx(i, j) = g(0, j) * inv;
        push(0, dx);
        break;
      }
      case Op::layer_norm: {
        const Matrix& x = input(0);
        const Matrix& gamma = input(1);
        const std::size_t c = x.cols();
        Matrix dx(x.rows(), c), dgamma(1, c), dbeta(1, c);
        std::vector<double> xhat(c), dxhat(c);
        for (std::size_t i = 0; i < x.rows(); ++i) {
          auto xr = x.row(i);
          auto gr = g.row(i);
          double mean = 0.0;
          for (double v : xr) mean += v;
          mean /= static_cast<double>(c);
          double var = 0.0;
          for (double v : xr) var += (v - mean) * (v - mean);
          var /= static_cast<double>(c);
          const double inv_std = 1.0 / std::sqrt(var + la::kLayerNormEps);
          double mean_d = 0.0, mean_dx = 0.0;
          for (std::size_t j = 0; j < c; ++j) {
            xhat[j] = (xr[j] - mean) * inv_std;
            dxhat[j] = gr[j] * gamma(0, j);
            dgamma(0, j) += gr[j] * xhat[j];
            dbeta(0, j) += gr[j];
            mean_d += dxhat[j];
            mean_dx += dxhat[j] * xhat[j];
          }
          mean_d /= static_cast<double>(c);
          mean_dx /= static_cast<double>(c);
          auto dr = dx.row(i);
          for (std::size_t j = 0; j < c; ++j)
            dr[j] = inv_std * (dxhat[j] - mean_d - xhat[j] * mean_dx);
        }
        push(0, dx);
        push(1, dgamma);
        push(2, dbeta);
        break;
      }
      case Op::slice_cols: {
        const Matrix& x = input(0);
        Matrix dx(x.rows(), x.cols());
        for (std::size_t i = 0; i < x.rows(); ++i)
          for (std::size_t j = 0; j < node.attrs.b; ++j) dx(i, node.attrs.a + j) = g(i, j);
        push(0, dx);
        break;
      }
      case Op::concat_cols: {
        std::size_t offset = 0;
        for (std::size_t k = 0; k < in.size(); ++k) {
          const std::size_t width = input(k).cols();
          push(k, la::slice_cols(g, offset, width));
          offset += width;
        }
        break;
      }
      case Op::depthwise_conv3x3: {
        const Matrix& x = input(0);
        const Matrix& w = input(1);
        const std::size_t height = node.attrs.a, width = node.attrs.b, c = x.cols();
        Matrix dx(x.rows(), c), dw(9, c);
        for (std::size_t yy = 0; yy < height; ++yy) {
          for (std::size_t xx = 0; xx < width; ++xx) {
            auto gr = g.row(yy * width + xx);
            for (int dy = -1; dy <= 1; ++dy) {
              const auto sy = static_cast<std::ptrdiff_t>(yy) + dy;
              if (sy < 0 || sy >= static_cast<std::ptrdiff_t>(height)) continue;
              for (int dxo = -1; dxo <= 1; ++dxo) {
                const auto sx = static_cast<std::ptrdiff_t>(xx) + dxo;
                if (sx < 0 || sx >= static_cast<std::ptrdiff_t>(width)) continue;
                const std::size_t src = static_cast<std::size_t>(sy) * width + static_cast<std::size_t>(sx);
                const std::size_t k = static_cast<std::size_t>((dy + 1) * 3 + (dxo + 1));
                auto xr = x.row(src);
                auto dxr = dx.row(src);
                auto wr = w.row(k);
                auto dwr = dw.row(k);
                for (std::size_t ch = 0; ch < c; ++ch) {
                  dxr[ch] += wr[ch] * gr[ch];
                  dwr[ch] += xr[ch] * gr[ch];
                }
              }
            }
          }
        }
        push(0, dx);
        push(1, dw);
        push(2, column_sums(g));
        break;
      }
      case Op::im2col3x3:
        push(0, la::col2im3x3(g, node.attrs.a, node.attrs.b, input(0).cols(), node.attrs.c));
        break;
      case Op::cross_entropy: {
        const Matrix& logits = input(0);
        Matrix dz = la::softmax_rows(logits);
        const double scale = g(0, 0) / static_cast<double>(logits.rows());
        for (std::size_t i = 0; i < logits.rows(); ++i) {
          dz(i, node.attrs.labels[i]) -= 1.0;
          for (double& v : dz.row(i)) v *= scale;
        }
        push(0, dz);
        break;
      }
    }
  }

  std::vector<Matrix> result;
  result.reserve(leaf_ids_.size());
  for (std::size_t id : leaf_ids_) {
    const Matrix& shape = nodes_[id].value;
    if (id < grads.size() && !grads[id].empty()) {
      result.push_back(std::move(grads[id]));
    } else {
      result.emplace_back(shape.rows(), shape.cols());
    }
  }
  return result;
}

namespace {

Tape& same_tape(const Var& a, const Var& b) {
  if (a.tape() != b.tape()) throw ArgumentError("operands recorded on different tapes");
  return *a.tape();
}

Var unary(Op op, const Var& a, Attrs attrs = {}) {
  return a.tape()->record(op, {a.id()}, std::move(attrs));
}

Var binary(Op op, const Var& a, const Var& b) {
  return same_tape(a, b).record(op, {a.id(), b.id()}, {});
}

}  // namespace

Var matmul(const Var& a, const Var& b) { return binary(Op::matmul, a, b); }
Var transpose(const Var& a) { return unary(Op::transpose, a); }
Var add(const Var& a, const Var& b) { return binary(Op::add, a, b); }
Var sub(const Var& a, const Var& b) { return binary(Op::sub, a, b); }
Var scale(const Var& a, double s) {
  Attrs attrs;
  attrs.scalar = s;
  return unary(Op::scale, a, std::move(attrs));
}
Var hadamard(const Var& a, const Var& b) { return binary(Op::hadamard, a, b); }
Var add_bias(const Var& a, const Var& bias) { return binary(Op::add_bias, a, bias); }
Var scale_rows(const Var& a, const Var& w) { return binary(Op::scale_rows, a, w); }
Var div_rows(const Var& a, const Var& d) { return binary(Op::div_rows, a, d); }
Var softmax_rows(const Var& a) { return unary(Op::softmax_rows, a); }
Var kernel_elu1(const Var& a) { return unary(Op::kernel_elu1, a); }
Var relu(const Var& a) { return unary(Op::relu, a); }
Var tanh_map(const Var& a) { return unary(Op::tanh, a); }
Var gelu(const Var& a) { return unary(Op::gelu, a); }
Var mean_rows(const Var& a) { return unary(Op::mean_rows, a); }

Var layer_norm(const Var& a, const Var& gamma, const Var& beta) {
  same_tape(a, gamma);
  same_tape(a, beta);
  return a.tape()->record(Op::layer_norm, {a.id(), gamma.id(), beta.id()}, {});
}

Var slice_cols(const Var& a, std::size_t begin, std::size_t count) {
  Attrs attrs;
  attrs.a = begin;
  attrs.b = count;
  return unary(Op::slice_cols, a, std::move(attrs));
}

Var concat_cols(std::span<const Var> parts) {
  if (parts.empty()) throw ArgumentError("concat_cols: no parts");
  std::vector<std::size_t> ids;
  for (const Var& p : parts) {
    same_tape(parts.front(), p);
    ids.push_back(p.id());
  }
  return parts.front().tape()->record(Op::concat_cols, std::move(ids), {});
}

Var depthwise_conv3x3(const Var& x, std::size_t height, std::size_t width, const Var& weights,
                      const Var& bias) {
  same_tape(x, weights);
  same_tape(x, bias);
  Attrs attrs;
  attrs.a = height;
  attrs.b = width;
  return x.tape()->record(Op::depthwise_conv3x3, {x.id(), weights.id(), bias.id()},
                          std::move(attrs));
}

Var im2col3x3(const Var& x, std::size_t height, std::size_t width, std::size_t stride) {
  Attrs attrs;
  attrs.a = height;
  attrs.b = width;
  attrs.c = stride;
  return unary(Op::im2col3x3, x, std::move(attrs));
}

Var cross_entropy(const Var& logits, std::vector<std::size_t> labels) {
  Attrs attrs;
  attrs.labels = std::move(labels);
  return unary(Op::cross_entropy, logits, std::move(attrs));
}

Recording forward(const Expr& expr, std::span<const Matrix> leaves) {
  Recording rec;
  rec.tape = std::make_unique<Tape>();
  std::vector<Var> vars;
  vars.reserve(leaves.size());
  for (const Matrix& m : leaves) vars.push_back(rec.tape->leaf(m));
  rec.output = expr(*rec.tape, vars);
  return rec;
}

std::vector<Matrix> backward(const Recording& rec, const Matrix& seed) {
  return rec.tape->backward(rec.output, seed);
}

GradCheckReport finite_diff_check(const Expr& expr, std::span<const Matrix> leaves, double h,
                                  std::uint64_t seed, std::string name) {
  if (!(h > 0.0 && h <= 1e-2)) {
    throw ArgumentError("finite_diff_check: step must lie in (0, 1e-2], got " + std::to_string(h));
  }
  const Recording base = forward(expr, leaves);
  CounterRng rng(seed, 0x5eed);
  const Matrix projection = rng.normal_matrix(base.value().rows(), base.value().cols());
  const std::vector<Matrix> analytic = backward(base, projection);

  auto objective = [&](std::span<const Matrix> inputs) {
    return la::dot(projection, forward(expr, inputs).value());
  };

  GradCheckReport report;
  report.op = std::move(name);
  report.step = h;
  for (const Matrix& m : leaves) report.shapes.push_back(m.shape_string());

  std::vector<Matrix> probe(leaves.begin(), leaves.end());
  for (std::size_t l = 0; l < probe.size(); ++l) {
    for (std::size_t e = 0; e < probe[l].size(); ++e) {
      const double original = probe[l].data()[e];
      probe[l].data()[e] = original + h;
      const double up = objective(probe);
      probe[l].data()[e] = original - h;
      const double down = objective(probe);
      probe[l].data()[e] = original;
      const double numeric = (up - down) / (2.0 * h);
      const double err =
          std::abs(analytic[l].data()[e] - numeric) / std::max(1.0, std::abs(numeric));
      report.max_rel_error = std::max(report.max_rel_error, err);
    }
  }
  return report;
}

}  // namespace rala::ad
