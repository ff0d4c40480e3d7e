#include "elsa/task.hpp"

#include "elsa/error.hpp"
#include "elsa/rng.hpp"

#include <set>

namespace elsa {

const char* to_string(TaskKind kind) { return kind == TaskKind::modular_add ? "modular_add" : "copy"; }

TaskKind parse_task_kind(std::string_view s) {
  if (s == "modular_add") return TaskKind::modular_add;
  if (s == "copy") return TaskKind::copy;
  throw ConfigurationError("unknown task kind '" + std::string(s) + "'");
}

TokenBatch Split::gather(std::span<const Index> rows) const {
  TokenBatch b;
  b.batch = static_cast<Index>(rows.size());
  b.seq = seq_len;
  b.ids.reserve(rows.size() * static_cast<std::size_t>(seq_len));
  b.labels.reserve(b.ids.capacity());
  for (Index r : rows) {
    if (r < 0 || r >= size()) throw IndexError("split row " + std::to_string(r) + " out of range");
    const auto off = static_cast<std::size_t>(r * seq_len);
    b.ids.insert(b.ids.end(), tokens.begin() + off, tokens.begin() + off + seq_len);
    b.labels.insert(b.labels.end(), labels.begin() + off, labels.begin() + off + seq_len);
  }
  return b;
}

TokenBatch Split::range(Index begin, Index end) const {
  std::vector<Index> rows;
  for (Index r = begin; r < end; ++r) rows.push_back(r);
  return gather(rows);
}

Index Split::target_count() const {
  Index n = 0;
  for (int l : labels) n += l != kIgnoreLabel;
  return n;
}

namespace {

std::vector<int> draw_sequence(const TaskSpec& spec, RngStream& rng) {
  std::vector<int> seq(static_cast<std::size_t>(spec.seq_len));
  for (auto& t : seq) t = static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(spec.modulus)));
  return seq;
}

void append(Split& split, const TaskSpec& spec, const std::vector<int>& seq) {
  split.tokens.insert(split.tokens.end(), seq.begin(), seq.end());
  split.labels.push_back(kIgnoreLabel);
  for (std::size_t t = 1; t < seq.size(); ++t) {
    split.labels.push_back(spec.kind == TaskKind::modular_add
                               ? static_cast<int>((seq[t - 1] + seq[t]) % spec.modulus)
                               : seq[t - 1]);
  }
}

}  // namespace

SyntheticTask SyntheticTask::generate(const TaskSpec& spec) {
  if (spec.modulus < 2 || spec.modulus > spec.vocab) {
    throw ConfigurationError("task modulus must lie in [2, vocab]");
  }
  if (spec.seq_len < 2) throw ConfigurationError("task sequence length must be >= 2");
  if (spec.train_size < 1 || spec.val_size < 1) throw ConfigurationError("task splits must be nonempty");

  SyntheticTask task;
  task.spec = spec;
  task.train.seq_len = task.val.seq_len = spec.seq_len;

  std::set<std::vector<int>> seen;
  RngStream train_rng(spec.seed, streams::kTaskTrain);
  for (Index i = 0; i < spec.train_size; ++i) {
    auto seq = draw_sequence(spec, train_rng);
    seen.insert(seq);
    append(task.train, spec, seq);
  }
  RngStream val_rng(spec.seed, streams::kTaskVal);
  Index attempts = 0;
  while (task.val.size() < spec.val_size) {
    if (++attempts > 100 * spec.val_size) {
      throw ConfigurationError("task space too small for disjoint train/validation splits");
    }
    auto seq = draw_sequence(spec, val_rng);
    if (seen.insert(seq).second) append(task.val, spec, seq);
  }
  return task;
}

}  // namespace elsa
