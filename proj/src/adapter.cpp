#include "elsa/adapter.hpp"

#include "elsa/error.hpp"

#include <algorithm>
#include <sstream>

namespace elsa {

namespace {

std::string list_string(const std::vector<Index>& v) {
  std::ostringstream os;
  os << '{';
  for (std::size_t i = 0; i < v.size(); ++i) os << (i ? "," : "") << v[i];
  os << '}';
  return os.str();
}

void check_choices(const std::vector<Index>& choices, Index dim, const char* what) {
  if (!std::is_sorted(choices.begin(), choices.end()) ||
      std::adjacent_find(choices.begin(), choices.end()) != choices.end()) {
    throw ConfigurationError(std::string(what) + " choices must be strictly increasing: " +
                             list_string(choices));
  }
  if (!choices.empty() && (choices.front() < 1 || choices.back() > dim)) {
    throw ConfigurationError(std::string(what) + " choices " + list_string(choices) +
                             " must lie in [1, " + std::to_string(dim) + "]");
  }
}

bool allowed(Index value, Index full, const std::vector<Index>& choices, bool elastic) {
  if (value == full) return true;
  return elastic && std::find(choices.begin(), choices.end(), value) != choices.end();
}

}  // namespace

const char* to_string(ElasticMode mode) { return mode == ElasticMode::A ? "A" : "B"; }

ElasticMode parse_elastic_mode(std::string_view s) {
  if (s == "A") return ElasticMode::A;
  if (s == "B") return ElasticMode::B;
  throw ConfigurationError("unknown elastic mode '" + std::string(s) + "'");
}

ElasticAdapter ElasticAdapter::create(Index in_features, Index out_features,
                                      std::vector<Index> rank_choices, double alpha, RngStream& rng,
                                      ElasticMode mode, std::vector<Index> in_choices,
                                      std::vector<Index> out_choices) {
  if (rank_choices.empty()) throw ConfigurationError("adapter needs at least one rank choice");
  check_choices(rank_choices, std::min(in_features, out_features), "rank");
  if (mode == ElasticMode::A && (!in_choices.empty() || !out_choices.empty())) {
    throw ConfigurationError("Mode A adapters cannot declare channel choices");
  }
  check_choices(in_choices, in_features, "input width");
  check_choices(out_choices, out_features, "output width");

  ElasticAdapter ad;
  const Index r = rank_choices.back();
  Matrix l1(in_features, r);
  for (Index i = 0; i < l1.rows(); ++i)
    for (Index j = 0; j < l1.cols(); ++j) l1(i, j) = rng.normal(0.0, 0.02);
  ad.l1 = Tensor(std::move(l1), true);
  ad.l2 = Tensor::zeros(r, out_features, true);
  ad.alpha = alpha;
  ad.scale = alpha / static_cast<double>(r);
  ad.rank_choices = std::move(rank_choices);
  ad.in_choices = std::move(in_choices);
  ad.out_choices = std::move(out_choices);
  ad.mode = mode;
  return ad;
}

ElasticAdapter ElasticAdapter::clone() const {
  ElasticAdapter c = *this;
  c.l1 = l1.clone();
  c.l2 = l2.clone();
  return c;
}

void check_activation(const ElasticAdapter& ad, const LinearActivation& act, std::string_view where) {
  const auto fail = [&](const std::string& msg) {
    throw ConfigurationError(std::string(where) + ": " + msg);
  };
  if (std::find(ad.rank_choices.begin(), ad.rank_choices.end(), act.rank) == ad.rank_choices.end()) {
    fail("rank " + std::to_string(act.rank) + " not in " + list_string(ad.rank_choices));
  }
  const bool elastic = ad.mode == ElasticMode::B;
  if (!allowed(act.in, ad.in_features(), ad.in_choices, elastic)) {
    fail("input width " + std::to_string(act.in) + " not in " + list_string(ad.in_choices));
  }
  if (!allowed(act.out, ad.out_features(), ad.out_choices, elastic)) {
    fail("output width " + std::to_string(act.out) + " not in " + list_string(ad.out_choices));
  }
}

Tensor adapter_forward(const ElasticAdapter& ad, const Tensor& x, const LinearActivation& act) {
  check_activation(ad, act, "adapter");
  const Tensor low = matmul_leading(x, ad.l1, act.in, act.rank);
  return scale(matmul_leading(low, ad.l2, act.rank, act.out), ad.scale);
}

Tensor adapter_product(const ElasticAdapter& ad, const LinearActivation& act) {
  check_activation(ad, act, "adapter");
  const Tensor left = leading_block(ad.l1, act.in, act.rank);
  return scale(matmul_leading(left, ad.l2, act.rank, act.out), ad.scale);
}

}  // namespace elsa
