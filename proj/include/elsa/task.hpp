#pragma once

#include "elsa/tensor.hpp"

#include <cstdint>
#include <span>
#include <string_view>
#include <vector>

namespace elsa {

/// modular_add: y_t = (x_{t-1} + x_t) mod modulus for t >= 1.
/// copy:        y_t = x_{t-1} for t >= 1.
/// Position 0 carries no label in either task.
enum class TaskKind { modular_add, copy };

const char* to_string(TaskKind kind);
TaskKind parse_task_kind(std::string_view s);

struct TaskSpec {
  TaskKind kind = TaskKind::modular_add;
  Index vocab = 64;
  /// Tokens are drawn from [0, modulus); must be <= vocab.
  Index modulus = 16;
  Index seq_len = 8;
  Index train_size = 4096;
  Index val_size = 512;
  std::uint64_t seed = 1;
};

/// Token ids and labels for `batch` sequences of length `seq`, row-major.
struct TokenBatch {
  Index batch = 0;
  Index seq = 0;
  std::vector<int> ids;
  std::vector<int> labels;
};

/// A fixed set of sequences.
struct Split {
  Index seq_len = 0;
  std::vector<int> tokens;
  std::vector<int> labels;

  Index size() const { return seq_len == 0 ? 0 : static_cast<Index>(tokens.size()) / seq_len; }
  TokenBatch gather(std::span<const Index> rows) const;
  /// Contiguous rows [begin, end).
  TokenBatch range(Index begin, Index end) const;
  /// Number of labelled target tokens.
  Index target_count() const;
};

struct SyntheticTask {
  TaskSpec spec;
  Split train;
  Split val;

  /// Pure function of the spec; validation sequences never occur in train.
  static SyntheticTask generate(const TaskSpec& spec);
};

}  // namespace elsa
