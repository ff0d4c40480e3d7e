#include "elsa/tensor.hpp"

#include "elsa/error.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <numbers>
#include <sstream>

namespace elsa {

namespace {

std::atomic<std::uint64_t> next_tensor_id{1};
thread_local Tape* current_tape = nullptr;

Index shape_product(const Shape& shape) {
  Index n = 1;
  for (Index d : shape) n *= d;
  return n;
}

void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                         shape_string(b.shape()));
  }
}

void accumulate_if(const Tensor& t, const Matrix& g) {
  if (t.requires_grad()) t.accumulate_grad(g);
}

}  // namespace

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

struct Tensor::Impl {
  Shape shape;
  Matrix data;
  bool requires_grad = false;
  std::optional<Matrix> grad;
  std::uint64_t id = next_tensor_id.fetch_add(1, std::memory_order_relaxed);
};

Tensor::Tensor(Matrix data, bool requires_grad) : impl_(std::make_shared<Impl>()) {
  impl_->shape = {data.rows(), data.cols()};
  impl_->data = std::move(data);
  impl_->requires_grad = requires_grad;
}

Tensor::Tensor(Shape shape, Matrix data, bool requires_grad) : impl_(std::make_shared<Impl>()) {
  if (shape_product(shape) != data.size()) {
    throw DimensionError("tensor shape " + shape_string(shape) + " does not match " +
                         std::to_string(data.size()) + " elements");
  }
  if (!shape.empty() && data.cols() != shape.back() && data.size() != 0) {
    throw DimensionError("tensor storage must fold leading dims into rows for shape " +
                         shape_string(shape));
  }
  impl_->shape = std::move(shape);
  impl_->data = std::move(data);
  impl_->requires_grad = requires_grad;
}

Tensor Tensor::zeros(Index rows, Index cols, bool requires_grad) {
  return Tensor(Matrix::Zero(rows, cols), requires_grad);
}

Tensor Tensor::scalar(double v) { return Tensor(Shape{}, Matrix::Constant(1, 1, v), false); }

const Shape& Tensor::shape() const { return impl_->shape; }
Index Tensor::rows() const { return impl_->data.rows(); }
Index Tensor::cols() const { return impl_->data.cols(); }
Index Tensor::numel() const { return impl_->data.size(); }
const Matrix& Tensor::value() const { return impl_->data; }
Matrix& Tensor::mutable_value() { return impl_->data; }

double Tensor::item() const {
  if (numel() != 1) throw ContractError("item() on tensor of shape " + shape_string(shape()));
  return impl_->data(0, 0);
}

bool Tensor::requires_grad() const { return impl_ && impl_->requires_grad; }

void Tensor::set_requires_grad(bool flag) {
  impl_->requires_grad = flag;
  if (!flag) impl_->grad.reset();
}

const std::optional<Matrix>& Tensor::grad() const { return impl_->grad; }

void Tensor::zero_grad() { impl_->grad.reset(); }

void Tensor::accumulate_grad(const Matrix& g) const {
  if (!impl_->requires_grad) return;
  if (impl_->grad) {
    *impl_->grad += g;
  } else {
    impl_->grad = g;
  }
}

Tensor Tensor::clone() const {
  if (!impl_) return {};
  return Tensor(impl_->shape, impl_->data, impl_->requires_grad);
}

std::uint64_t Tensor::id() const { return impl_ ? impl_->id : 0; }

// ---- tape -------------------------------------------------------------------

void Tape::record(std::string name, std::span<const Tensor> inputs, const Tensor& output,
                  BackwardFn backward) {
  Record r;
  r.name = std::move(name);
  r.input_ids.reserve(inputs.size());
  for (const auto& t : inputs) r.input_ids.push_back(t.id());
  r.output = output;
  r.backward = std::move(backward);
  records_.push_back(std::move(r));
}

void Tape::backward(const Tensor& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw ContractError("backward requires a scalar loss, got " +
                        (loss.defined() ? shape_string(loss.shape()) : std::string("undefined")));
  }
  const bool on_tape = std::any_of(records_.begin(), records_.end(),
                                   [&](const Record& r) { return r.output.id() == loss.id(); });
  if (!on_tape) throw ContractError("backward: loss was not produced on this tape");

  Tensor seed = loss;
  seed.accumulate_grad(Matrix::Ones(1, 1));
  for (auto it = records_.rbegin(); it != records_.rend(); ++it) {
    const auto& g = it->output.grad();
    if (g) it->backward(*g);
  }
}

TapeScope::TapeScope(Tape& tape) : previous_(current_tape) { current_tape = &tape; }
TapeScope::~TapeScope() { current_tape = previous_; }

NoTapeScope::NoTapeScope() : previous_(current_tape) { current_tape = nullptr; }
NoTapeScope::~NoTapeScope() { current_tape = previous_; }

Tape* active_tape() { return current_tape; }

void backward(const Tensor& loss) {
  Tape* tape = active_tape();
  if (!tape) throw ContractError("backward called with no active tape");
  tape->backward(loss);
}

Tensor make_result(const char* name, Shape shape, Matrix&& value, std::span<const Tensor> inputs,
                   BackwardFn backward) {
  Tape* tape = active_tape();
  const bool track =
      tape && std::any_of(inputs.begin(), inputs.end(), [](const Tensor& t) { return t.requires_grad(); });
  Tensor out(std::move(shape), std::move(value), track);
  if (track) tape->record(name, inputs, out, std::move(backward));
  return out;
}

// ---- core ops ---------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.cols() != b.rows()) {
    throw DimensionError("matmul: inner dimensions disagree for " + shape_string(a.shape()) + " x " +
                         shape_string(b.shape()));
  }
  Matrix out = a.value() * b.value();
  const Tensor in[] = {a, b};
  return make_result("matmul", {out.rows(), out.cols()}, std::move(out), in,
                     [a, b](const Matrix& g) {
                       if (a.requires_grad()) accumulate_if(a, g * b.value().transpose());
                       if (b.requires_grad()) accumulate_if(b, a.value().transpose() * g);
                     });
}

Tensor matmul_leading(const Tensor& a, const Tensor& b, Index rows, Index cols) {
  if (rows < 1 || cols < 1 || rows > b.rows() || cols > b.cols()) {
    throw DimensionError("matmul_leading: block " + std::to_string(rows) + "x" +
                         std::to_string(cols) + " outside " + shape_string(b.shape()));
  }
  if (a.cols() != rows) {
    throw DimensionError("matmul_leading: inner dimensions disagree for " + shape_string(a.shape()) +
                         " x " + std::to_string(rows) + "x" + std::to_string(cols));
  }
  Matrix out = a.value() * b.value().topLeftCorner(rows, cols);
  const Tensor in[] = {a, b};
  return make_result("matmul_leading", {out.rows(), out.cols()}, std::move(out), in,
                     [a, b, rows, cols](const Matrix& g) {
                       if (a.requires_grad()) {
                         accumulate_if(a, g * b.value().topLeftCorner(rows, cols).transpose());
                       }
                       if (b.requires_grad()) {
                         Matrix gb = Matrix::Zero(b.rows(), b.cols());
                         gb.topLeftCorner(rows, cols).noalias() = a.value().transpose() * g;
                         accumulate_if(b, gb);
                       }
                     });
}

Tensor leading_block(const Tensor& b, Index rows, Index cols) {
  if (rows < 1 || cols < 1 || rows > b.rows() || cols > b.cols()) {
    throw DimensionError("leading_block: block " + std::to_string(rows) + "x" +
                         std::to_string(cols) + " outside " + shape_string(b.shape()));
  }
  Matrix out = b.value().topLeftCorner(rows, cols);
  const Tensor in[] = {b};
  return make_result("leading_block", {rows, cols}, std::move(out), in,
                     [b, rows, cols](const Matrix& g) {
                       Matrix gb = Matrix::Zero(b.rows(), b.cols());
                       gb.topLeftCorner(rows, cols) = g;
                       accumulate_if(b, gb);
                     });
}

Tensor elementwise(Elementwise op, const Tensor& a, const Tensor& b) {
  switch (op) {
    case Elementwise::add: return add(a, b);
    case Elementwise::sub: return sub(a, b);
    case Elementwise::mul: return mul(a, b);
    case Elementwise::mask: return mask(a, b);
  }
  throw ContractError("unknown elementwise op");
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape("add", a, b);
  const Tensor in[] = {a, b};
  return make_result("add", a.shape(), a.value() + b.value(), in, [a, b](const Matrix& g) {
    accumulate_if(a, g);
    accumulate_if(b, g);
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape("sub", a, b);
  const Tensor in[] = {a, b};
  return make_result("sub", a.shape(), a.value() - b.value(), in, [a, b](const Matrix& g) {
    accumulate_if(a, g);
    if (b.requires_grad()) accumulate_if(b, -g);
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape("mul", a, b);
  const Tensor in[] = {a, b};
  return make_result("mul", a.shape(), a.value().cwiseProduct(b.value()), in,
                     [a, b](const Matrix& g) {
                       if (a.requires_grad()) accumulate_if(a, g.cwiseProduct(b.value()));
                       if (b.requires_grad()) accumulate_if(b, g.cwiseProduct(a.value()));
                     });
}

Tensor mask(const Tensor& a, const Tensor& m) {
  require_same_shape("mask", a, m);
  // The mask is a constant selector; it never receives gradient.
  const Matrix keep = (m.value().array() != 0.0).cast<double>().matrix();
  const Tensor in[] = {a};
  return make_result("mask", a.shape(), a.value().cwiseProduct(keep), in,
                     [a, keep](const Matrix& g) { accumulate_if(a, g.cwiseProduct(keep)); });
}

Tensor scale(const Tensor& a, double s) {
  const Tensor in[] = {a};
  return make_result("scale", a.shape(), a.value() * s, in,
                     [a, s](const Matrix& g) { accumulate_if(a, g * s); });
}

Tensor sum(const Tensor& a) {
  const Tensor in[] = {a};
  return make_result("sum", Shape{}, Matrix::Constant(1, 1, a.value().sum()), in,
                     [a](const Matrix& g) {
                       accumulate_if(a, Matrix::Constant(a.rows(), a.cols(), g(0, 0)));
                     });
}

Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_product(shape) != a.numel()) {
    throw DimensionError("reshape: " + shape_string(a.shape()) + " -> " + shape_string(shape));
  }
  const Index cols = shape.empty() ? 1 : shape.back();
  const Index rows = cols == 0 ? 0 : a.numel() / cols;
  Matrix out = Eigen::Map<const Matrix>(a.value().data(), rows, cols);
  const Tensor in[] = {a};
  return make_result("reshape", std::move(shape), std::move(out), in, [a](const Matrix& g) {
    accumulate_if(a, Eigen::Map<const Matrix>(g.data(), a.rows(), a.cols()));
  });
}

Tensor expand_rows(const Tensor& row, Index count) {
  if (row.rows() != 1) throw DimensionError("expand_rows: expected 1xn, got " + shape_string(row.shape()));
  Matrix out = row.value().replicate(count, 1);
  const Tensor in[] = {row};
  return make_result("expand_rows", {count, row.cols()}, std::move(out), in,
                     [row](const Matrix& g) { accumulate_if(row, g.colwise().sum()); });
}

// ---- nn ops -----------------------------------------------------------------

Tensor softmax(const Tensor& a) {
  Matrix p = a.value();
  for (Index r = 0; r < p.rows(); ++r) {
    auto row = p.row(r);
    row.array() -= row.maxCoeff();
    row = row.array().exp().matrix();
    row /= row.sum();
  }
  const Tensor in[] = {a};
  return make_result("softmax", a.shape(), Matrix(p), in, [a, p](const Matrix& g) {
    const Eigen::VectorXd dot = g.cwiseProduct(p).rowwise().sum();
    Matrix ga = p.cwiseProduct(g - dot.replicate(1, g.cols()));
    accumulate_if(a, ga);
  });
}

Tensor layer_norm(const Tensor& a, double eps) {
  if (!(eps > 0.0)) throw ValueError("layer_norm: eps must be positive");
  const Matrix& x = a.value();
  const Index n = x.cols();
  Matrix xhat(x.rows(), n);
  Eigen::VectorXd inv_std(x.rows());
  for (Index r = 0; r < x.rows(); ++r) {
    const double mean = x.row(r).mean();
    const double var = (x.row(r).array() - mean).square().mean();
    inv_std(r) = 1.0 / std::sqrt(var + eps);
    xhat.row(r) = (x.row(r).array() - mean) * inv_std(r);
  }
  const Tensor in[] = {a};
  return make_result("layer_norm", a.shape(), Matrix(xhat), in, [a, xhat, inv_std, n](const Matrix& g) {
    Matrix ga(g.rows(), g.cols());
    for (Index r = 0; r < g.rows(); ++r) {
      const double mean_g = g.row(r).mean();
      const double mean_gx = g.row(r).dot(xhat.row(r)) / static_cast<double>(n);
      ga.row(r) = inv_std(r) * (g.row(r).array() - mean_g - xhat.row(r).array() * mean_gx);
    }
    accumulate_if(a, ga);
  });
}

Tensor gelu(const Tensor& a) {
  const Matrix& x = a.value();
  Matrix y = x.unaryExpr([](double v) { return 0.5 * v * (1.0 + std::erf(v * std::numbers::sqrt2 / 2.0)); });
  const Tensor in[] = {a};
  return make_result("gelu", a.shape(), std::move(y), in, [a](const Matrix& g) {
    const Matrix d = a.value().unaryExpr([](double v) {
      const double cdf = 0.5 * (1.0 + std::erf(v * std::numbers::sqrt2 / 2.0));
      const double pdf = std::exp(-0.5 * v * v) * std::numbers::inv_sqrtpi / std::numbers::sqrt2;
      return cdf + v * pdf;
    });
    accumulate_if(a, g.cwiseProduct(d));
  });
}

Tensor embedding(std::span<const int> ids, const Tensor& table) {
  const Index n = static_cast<Index>(ids.size());
  Matrix out(n, table.cols());
  for (Index i = 0; i < n; ++i) {
    const int id = ids[static_cast<std::size_t>(i)];
    if (id < 0 || id >= table.rows()) {
      throw IndexError("embedding: id " + std::to_string(id) + " outside table of " +
                       std::to_string(table.rows()) + " rows");
    }
    out.row(i) = table.value().row(id);
  }
  std::vector<int> kept(ids.begin(), ids.end());
  const Tensor in[] = {table};
  return make_result("embedding", {n, table.cols()}, std::move(out), in,
                     [table, kept = std::move(kept)](const Matrix& g) {
                       Matrix gt = Matrix::Zero(table.rows(), table.cols());
                       for (std::size_t i = 0; i < kept.size(); ++i) {
                         gt.row(kept[i]) += g.row(static_cast<Index>(i));
                       }
                       accumulate_if(table, gt);
                     });
}

Tensor cross_entropy(const Tensor& logits, std::span<const int> labels) {
  const Matrix& z = logits.value();
  if (static_cast<Index>(labels.size()) != z.rows()) {
    throw DimensionError("cross_entropy: " + std::to_string(labels.size()) + " labels for " +
                         std::to_string(z.rows()) + " rows");
  }
  Matrix p(z.rows(), z.cols());
  double total = 0.0;
  Index count = 0;
  for (Index r = 0; r < z.rows(); ++r) {
    const int label = labels[static_cast<std::size_t>(r)];
    if (label == kIgnoreLabel) {
      p.row(r).setZero();
      continue;
    }
    if (label < 0 || label >= z.cols()) {
      throw IndexError("cross_entropy: label " + std::to_string(label) + " outside vocab of " +
                       std::to_string(z.cols()));
    }
    const double mx = z.row(r).maxCoeff();
    p.row(r) = (z.row(r).array() - mx).exp().matrix();
    const double denom = p.row(r).sum();
    p.row(r) /= denom;
    total += -(z(r, label) - mx - std::log(denom));
    ++count;
  }
  if (count == 0) throw ContractError("cross_entropy: no labelled tokens");
  const double inv = 1.0 / static_cast<double>(count);
  std::vector<int> kept(labels.begin(), labels.end());
  const Tensor in[] = {logits};
  return make_result("cross_entropy", Shape{}, Matrix::Constant(1, 1, total * inv), in,
                     [logits, p, inv, kept = std::move(kept)](const Matrix& g) {
                       Matrix gz = p;
                       for (std::size_t r = 0; r < kept.size(); ++r) {
                         if (kept[r] != kIgnoreLabel) gz(static_cast<Index>(r), kept[r]) -= 1.0;
                       }
                       accumulate_if(logits, gz * (inv * g(0, 0)));
                     });
}

Tensor causal_attention(const Tensor& q, const Tensor& k, const Tensor& v, Index batch, Index seq,
                        Index heads, Index head_dim) {
  const Index width = heads * head_dim;
  for (const Tensor* t : {&q, &k, &v}) {
    if (t->rows() != batch * seq || t->cols() != width) {
      throw DimensionError("causal_attention: expected " + std::to_string(batch * seq) + "x" +
                           std::to_string(width) + ", got " + shape_string(t->shape()));
    }
  }
  const double c = 1.0 / std::sqrt(static_cast<double>(head_dim));
  Matrix out = Matrix::Zero(batch * seq, width);
  // Attention probabilities per (batch, head), kept for the backward pass.
  std::vector<Matrix> probs(static_cast<std::size_t>(batch * heads));
  for (Index b = 0; b < batch; ++b) {
    for (Index h = 0; h < heads; ++h) {
      const auto Q = q.value().block(b * seq, h * head_dim, seq, head_dim);
      const auto K = k.value().block(b * seq, h * head_dim, seq, head_dim);
      const auto V = v.value().block(b * seq, h * head_dim, seq, head_dim);
      Matrix s = (Q * K.transpose()) * c;
      for (Index i = 0; i < seq; ++i) {
        const double mx = s.row(i).head(i + 1).maxCoeff();
        double denom = 0.0;
        for (Index j = 0; j <= i; ++j) {
          s(i, j) = std::exp(s(i, j) - mx);
          denom += s(i, j);
        }
        for (Index j = 0; j <= i; ++j) s(i, j) /= denom;
        for (Index j = i + 1; j < seq; ++j) s(i, j) = 0.0;
      }
      out.block(b * seq, h * head_dim, seq, head_dim).noalias() = s * V;
      probs[static_cast<std::size_t>(b * heads + h)] = std::move(s);
    }
  }
  const Tensor in[] = {q, k, v};
  return make_result(
      "causal_attention", {batch * seq, width}, std::move(out), in,
      [q, k, v, probs = std::move(probs), batch, seq, heads, head_dim, c](const Matrix& g) {
        Matrix gq = Matrix::Zero(q.rows(), q.cols());
        Matrix gk = Matrix::Zero(k.rows(), k.cols());
        Matrix gv = Matrix::Zero(v.rows(), v.cols());
        for (Index b = 0; b < batch; ++b) {
          for (Index h = 0; h < heads; ++h) {
            const Matrix& P = probs[static_cast<std::size_t>(b * heads + h)];
            const auto Q = q.value().block(b * seq, h * head_dim, seq, head_dim);
            const auto K = k.value().block(b * seq, h * head_dim, seq, head_dim);
            const auto V = v.value().block(b * seq, h * head_dim, seq, head_dim);
            const auto G = g.block(b * seq, h * head_dim, seq, head_dim);
            gv.block(b * seq, h * head_dim, seq, head_dim).noalias() = P.transpose() * G;
            const Matrix dP = G * V.transpose();
            const Eigen::VectorXd dot = dP.cwiseProduct(P).rowwise().sum();
            const Matrix dS = P.cwiseProduct(dP - dot.replicate(1, seq)) * c;
            gq.block(b * seq, h * head_dim, seq, head_dim).noalias() = dS * K;
            gk.block(b * seq, h * head_dim, seq, head_dim).noalias() = dS.transpose() * Q;
          }
        }
        accumulate_if(q, gq);
        accumulate_if(k, gk);
        accumulate_if(v, gv);
      });
}

}  // namespace elsa
