#include "elsa/config.hpp"

#include "elsa/error.hpp"
#include "elsa/schema_text.hpp"

#include <charconv>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <set>

namespace elsa {

using nlohmann::json;

const json& run_config_schema() {
  static const json schema = json::parse(generated::kRunConfigSchema);
  return schema;
}

namespace {

bool type_matches(const json& v, const std::string& type) {
  if (type == "object") return v.is_object();
  if (type == "array") return v.is_array();
  if (type == "string") return v.is_string();
  if (type == "boolean") return v.is_boolean();
  if (type == "integer") return v.is_number_integer() || (v.is_number_float() && std::floor(v.get<double>()) == v.get<double>());
  if (type == "number") return v.is_number();
  if (type == "null") return v.is_null();
  return false;
}

void validate_at(const json& v, const json& schema, const std::string& path) {
  const auto fail = [&path](const std::string& what) {
    throw SchemaError((path.empty() ? std::string("/") : path) + ": " + what);
  };
  if (auto it = schema.find("type"); it != schema.end() && !type_matches(v, it->get<std::string>())) {
    fail("expected " + it->get<std::string>() + ", found " + v.type_name());
  }
  if (auto it = schema.find("enum"); it != schema.end()) {
    bool found = false;
    for (const json& e : *it) found = found || e == v;
    if (!found) fail("value " + v.dump() + " is not one of " + it->dump());
  }
  if (v.is_number()) {
    const double x = v.get<double>();
    if (auto it = schema.find("minimum"); it != schema.end() && x < it->get<double>()) {
      fail("value " + v.dump() + " is below minimum " + it->dump());
    }
    if (auto it = schema.find("maximum"); it != schema.end() && x > it->get<double>()) {
      fail("value " + v.dump() + " exceeds maximum " + it->dump());
    }
    if (auto it = schema.find("exclusiveMinimum"); it != schema.end() && x <= it->get<double>()) {
      fail("value " + v.dump() + " must be greater than " + it->dump());
    }
    if (auto it = schema.find("exclusiveMaximum"); it != schema.end() && x >= it->get<double>()) {
      fail("value " + v.dump() + " must be less than " + it->dump());
    }
  }
  if (v.is_object()) {
    const json props = schema.value("properties", json::object());
    const bool closed = schema.contains("additionalProperties") && schema["additionalProperties"] == false;
    for (const auto& key : schema.value("required", json::array())) {
      if (!v.contains(key.get<std::string>())) fail("missing required key '" + key.get<std::string>() + "'");
    }
    for (auto it = v.begin(); it != v.end(); ++it) {
      if (props.contains(it.key())) {
        validate_at(it.value(), props[it.key()], path + "/" + it.key());
      } else if (closed) {
        fail("unknown key '" + it.key() + "'");
      }
    }
  }
  if (v.is_array()) {
    if (auto it = schema.find("minItems"); it != schema.end() && v.size() < it->get<std::size_t>()) {
      fail("expected at least " + it->dump() + " items");
    }
    if (schema.value("uniqueItems", false)) {
      std::set<std::string> seen;
      for (const json& e : v) {
        if (!seen.insert(e.dump()).second) fail("duplicate item " + e.dump());
      }
    }
    if (auto it = schema.find("items"); it != schema.end()) {
      for (std::size_t i = 0; i < v.size(); ++i) validate_at(v[i], *it, path + "/" + std::to_string(i));
    }
  }
}

template <class T>
T get_or(const json& section, const char* key, T fallback) {
  return section.contains(key) ? section.at(key).get<T>() : fallback;
}

const char* granularity_name(Granularity g) { return g == Granularity::global ? "global" : "per_output"; }
const char* metric_name(PruneMetric m) { return m == PruneMetric::magnitude ? "magnitude" : "wanda"; }

}  // namespace

void validate_schema(const json& doc, const json& schema) { validate_at(doc, schema, ""); }

RunConfig parse_run_config(const json& doc) {
  validate_schema(doc, run_config_schema());
  RunConfig c;
  const json empty = json::object();
  const auto section = [&](const char* key) -> const json& { return doc.contains(key) ? doc.at(key) : empty; };
  c.seed = get_or<std::uint64_t>(doc, "seed", 0);

  const json& m = section("model");
  c.model.vocab = get_or<Index>(m, "vocab", c.model.vocab);
  c.model.width = get_or<Index>(m, "width", c.model.width);
  c.model.heads = get_or<Index>(m, "heads", c.model.heads);
  c.model.mlp = get_or<Index>(m, "mlp", c.model.mlp);
  c.model.depth = get_or<Index>(m, "depth", c.model.depth);
  c.model.max_seq = get_or<Index>(m, "max_seq", c.model.max_seq);

  const json& t = section("task");
  c.task.kind = parse_task_kind(get_or<std::string>(t, "kind", to_string(c.task.kind)));
  c.task.vocab = c.model.vocab;
  c.task.modulus = get_or<Index>(t, "modulus", c.task.modulus);
  c.task.seq_len = get_or<Index>(t, "seq_len", c.task.seq_len);
  c.task.train_size = get_or<Index>(t, "train_size", c.task.train_size);
  c.task.val_size = get_or<Index>(t, "val_size", c.task.val_size);
  c.task.seed = get_or<std::uint64_t>(t, "seed", c.task.seed);
  if (c.task.modulus > c.model.vocab) throw SchemaError("/task/modulus: exceeds model vocab");
  if (c.task.seq_len > c.model.max_seq) throw SchemaError("/task/seq_len: exceeds model max_seq");

  const json& p = section("pretrain");
  c.pretrain.steps = get_or<std::size_t>(p, "steps", 1500);
  c.pretrain.batch_size = get_or<Index>(p, "batch_size", 32);
  c.pretrain.lr = get_or<double>(p, "lr", 3e-3);

  const json& s = section("supernet");
  c.stages.supernet_mode = get_or<std::string>(s, "mode", "nls");
  c.supernet.mode = c.stages.supernet_mode == "lonas" ? ElasticMode::B : ElasticMode::A;
  c.supernet.targets = get_or<std::vector<std::string>>(s, "targets", c.supernet.targets);
  c.supernet.rank_choices = get_or<std::vector<Index>>(s, "rank_choices", c.supernet.rank_choices);
  c.supernet.alpha = get_or<double>(s, "alpha", c.supernet.alpha);
  const Index h = c.model.heads, w = c.model.mlp;
  const std::vector<Index> default_heads = h >= 3 ? std::vector<Index>{h / 2, (h + h / 2 + 1) / 2, h}
                                                  : std::vector<Index>{h};
  const std::vector<Index> default_mlp = w >= 3 ? std::vector<Index>{w / 2, (w + w / 2 + 1) / 2, w}
                                                : std::vector<Index>{w};
  c.supernet.head_choices = get_or<std::vector<Index>>(s, "head_choices", default_heads);
  c.supernet.mlp_choices = get_or<std::vector<Index>>(s, "mlp_choices", default_mlp);
  if (c.supernet.mode == ElasticMode::A) {
    c.supernet.head_choices.clear();
    c.supernet.mlp_choices.clear();
  }

  const json& tr = section("train");
  c.train.steps = get_or<std::size_t>(tr, "steps", 1000);
  c.train.batch_size = get_or<Index>(tr, "batch_size", 32);
  c.train.lr = get_or<double>(tr, "lr", 3e-3);
  c.stages.sampler.kind =
      get_or<std::string>(tr, "sampler", "uniform") == "max" ? GenomeSampler::Kind::max : GenomeSampler::Kind::uniform;
  c.stages.sampler.warmup_max_steps = get_or<std::size_t>(tr, "warmup_max_steps", 0);

  const json& cm = section("compression");
  c.compression.metric = parse_prune_metric(get_or<std::string>(cm, "metric", "wanda"));
  c.compression.sparsity = get_or<double>(cm, "sparsity", 0.5);
  c.compression.granularity = parse_granularity(get_or<std::string>(cm, "granularity", "per_output"));
  c.compression.bits = get_or<int>(cm, "bits", 4);
  c.compression.calib_sequences = get_or<Index>(cm, "calib_sequences", 128);

  c.stages.merge_mode = parse_merge_mode(get_or<std::string>(section("merge"), "mode", "sparsepeft"));

  const json& se = section("search");
  c.search.population = get_or<std::size_t>(se, "population", 50);
  c.search.generations = get_or<std::size_t>(se, "generations", 30);
  c.search.crossover_prob = get_or<double>(se, "crossover_prob", 0.9);
  c.search.mutation_prob = get_or<double>(se, "mutation_prob", 0.0);
  c.search.threads = get_or<unsigned>(se, "threads", 1);

  c.stages.latency_repeats = get_or<std::size_t>(section("eval"), "latency_repeats", 7);
  c.search.seed = c.seed;
  return c;
}

json RunConfig::effective() const {
  return {
      {"seed", seed},
      {"model",
       {{"vocab", model.vocab},
        {"width", model.width},
        {"heads", model.heads},
        {"mlp", model.mlp},
        {"depth", model.depth},
        {"max_seq", model.max_seq}}},
      {"task",
       {{"kind", to_string(task.kind)},
        {"modulus", task.modulus},
        {"seq_len", task.seq_len},
        {"train_size", task.train_size},
        {"val_size", task.val_size},
        {"seed", task.seed}}},
      {"pretrain", {{"steps", pretrain.steps}, {"batch_size", pretrain.batch_size}, {"lr", pretrain.lr}}},
      {"supernet",
       {{"mode", stages.supernet_mode},
        {"targets", supernet.targets},
        {"rank_choices", supernet.rank_choices},
        {"alpha", supernet.alpha},
        {"head_choices", supernet.head_choices},
        {"mlp_choices", supernet.mlp_choices}}},
      {"train",
       {{"steps", train.steps},
        {"batch_size", train.batch_size},
        {"lr", train.lr},
        {"sampler", stages.sampler.kind == GenomeSampler::Kind::max ? "max" : "uniform"},
        {"warmup_max_steps", stages.sampler.warmup_max_steps}}},
      {"compression",
       {{"metric", metric_name(compression.metric)},
        {"sparsity", compression.sparsity},
        {"granularity", granularity_name(compression.granularity)},
        {"bits", compression.bits},
        {"calib_sequences", compression.calib_sequences}}},
      {"merge", {{"mode", to_string(stages.merge_mode)}}},
      {"search",
       {{"population", search.population},
        {"generations", search.generations},
        {"crossover_prob", search.crossover_prob},
        {"mutation_prob", search.mutation_prob},
        {"threads", search.threads}}},
      {"eval", {{"latency_repeats", stages.latency_repeats}}},
  };
}

std::string fnv1a_hex(std::string_view text) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : text) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

std::string RunConfig::hash() const {
  // Thread count does not change results, so it stays out of the hash.
  json e = effective();
  e["search"].erase("threads");
  return fnv1a_hex(e.dump());
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ArtifactError("cannot open config '" + path.string() + "'");
  json doc;
  try {
    doc = json::parse(in);
  } catch (const json::exception& e) {
    throw SchemaError("config '" + path.string() + "' is not valid JSON: " + e.what());
  }
  RunConfig cfg = parse_run_config(doc);
  if (const char* env = std::getenv("ELSA_SEED"); env && *env) {
    std::uint64_t seed = 0;
    const char* end = env + std::char_traits<char>::length(env);
    const auto [ptr, ec] = std::from_chars(env, end, seed);
    if (ec != std::errc{} || ptr != end) throw SchemaError(std::string("ELSA_SEED is not an unsigned integer: ") + env);
    cfg.seed = seed;
    cfg.search.seed = seed;
  }
  return cfg;
}

}  // namespace elsa
