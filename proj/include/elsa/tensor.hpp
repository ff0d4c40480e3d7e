#pragma once

// Dense float64 tensors with a reverse-mode tape.
//
// Storage is always a row-major Eigen matrix: the last dimension of the shape
// maps to columns and all leading dimensions are folded into rows. Ops record
// onto the calling thread's active tape (see TapeScope) when at least one
// input requires a gradient; with no active tape they are plain arithmetic.

#include <Eigen/Core>

#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace elsa {

using Index = Eigen::Index;
using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Shape = std::vector<Index>;

std::string shape_string(const Shape& shape);

/// Shared handle to a tensor node. Copying a Tensor aliases the same storage;
/// use `clone()` for an independent copy.
class Tensor {
 public:
  Tensor() = default;
  /// 2-D tensor from a matrix.
  explicit Tensor(Matrix data, bool requires_grad = false);
  /// N-D tensor; `data` must have rows == product(shape[:-1]), cols == shape.back().
  Tensor(Shape shape, Matrix data, bool requires_grad = false);

  static Tensor zeros(Index rows, Index cols, bool requires_grad = false);
  static Tensor scalar(double v);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const;
  Index rows() const;
  Index cols() const;
  Index numel() const;

  const Matrix& value() const;
  /// In-place access for optimizers and initializers. Never call on a tensor
  /// that an unfinished tape still references as an op input.
  Matrix& mutable_value();

  double item() const;

  bool requires_grad() const;
  void set_requires_grad(bool flag);

  const std::optional<Matrix>& grad() const;
  void zero_grad();
  void accumulate_grad(const Matrix& g) const;

  Tensor clone() const;
  std::uint64_t id() const;

 private:
  struct Impl;
  std::shared_ptr<Impl> impl_;
};

using BackwardFn = std::function<void(const Matrix& grad_output)>;

/// Ordered record of differentiable ops. Confined to one thread.
class Tape {
 public:
  struct Record {
    std::string name;
    std::vector<std::uint64_t> input_ids;
    Tensor output;
    BackwardFn backward;
  };

  void record(std::string name, std::span<const Tensor> inputs, const Tensor& output,
              BackwardFn backward);

  /// Seeds d(loss)/d(loss) = 1 and replays every record once in reverse order.
  void backward(const Tensor& loss);

  std::size_t size() const { return records_.size(); }
  const std::vector<Record>& records() const { return records_; }
  void clear() { records_.clear(); }

 private:
  std::vector<Record> records_;
};

/// Activates a tape for the current thread for the lifetime of the scope.
class TapeScope {
 public:
  explicit TapeScope(Tape& tape);
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape* previous_;
};

/// Suspends recording on the current thread for the lifetime of the scope.
class NoTapeScope {
 public:
  NoTapeScope();
  ~NoTapeScope();
  NoTapeScope(const NoTapeScope&) = delete;
  NoTapeScope& operator=(const NoTapeScope&) = delete;

 private:
  Tape* previous_;
};

Tape* active_tape();

/// Runs backward on the active tape.
void backward(const Tensor& loss);

/// Builds an op result. When a tape is active and any input requires grad the
/// output is marked requires_grad and `backward` is recorded.
Tensor make_result(const char* name, Shape shape, Matrix&& value, std::span<const Tensor> inputs,
                   BackwardFn backward);

// ---- core ops ---------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b);

/// a · b[:rows, :cols] using a view on the leading block of b. Gradient for b
/// lands only in that block.
Tensor matmul_leading(const Tensor& a, const Tensor& b, Index rows, Index cols);

/// Leading block b[:rows, :cols] materialized as a new tensor.
Tensor leading_block(const Tensor& b, Index rows, Index cols);

enum class Elementwise { add, sub, mul, mask };
Tensor elementwise(Elementwise op, const Tensor& a, const Tensor& b);
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
/// a ⊙ m where m is a 0/1 matrix; masked positions get zero value and gradient.
Tensor mask(const Tensor& a, const Tensor& m);

Tensor scale(const Tensor& a, double s);
Tensor sum(const Tensor& a);
Tensor reshape(const Tensor& a, Shape shape);
/// Repeats a 1×n row `count` times.
Tensor expand_rows(const Tensor& row, Index count);

// ---- nn ops -----------------------------------------------------------------

inline constexpr double kLayerNormEps = 1e-5;

Tensor softmax(const Tensor& a);
Tensor layer_norm(const Tensor& a, double eps = kLayerNormEps);
Tensor gelu(const Tensor& a);
Tensor embedding(std::span<const int> ids, const Tensor& table);

/// Label value that cross_entropy skips.
inline constexpr int kIgnoreLabel = -1;
/// Mean token loss over labels != kIgnoreLabel.
Tensor cross_entropy(const Tensor& logits, std::span<const int> labels);

/// Multi-head causal self-attention over packed [batch·seq × heads·head_dim]
/// projections. Scores are scaled by 1/sqrt(head_dim).
Tensor causal_attention(const Tensor& q, const Tensor& k, const Tensor& v, Index batch,
                        Index seq, Index heads, Index head_dim);

}  // namespace elsa
