#include "elsa/pipeline.hpp"

#include "elsa/checkpoint.hpp"
#include "elsa/error.hpp"
#include "elsa/extract.hpp"
#include "elsa/merge.hpp"
#include "elsa/metrics.hpp"
#include "elsa/stages.hpp"

#include <CLI11.hpp>

#include <chrono>
#include <ctime>
#include <fstream>
#include <iostream>
#include <numeric>
#include <sstream>

namespace elsa {

using nlohmann::json;

namespace {

using Clock = std::chrono::steady_clock;

std::string utc_now() {
  const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ArtifactError("cannot write '" + path.string() + "'");
  out << text;
}

void require(const std::filesystem::path& p, const char* flag) {
  if (p.empty()) throw ConfigurationError(std::string("missing required ") + flag);
}

/// Collects results and timing for one command, then writes the report.
class Report {
 public:
  Report(const char* command, const RunConfig& cfg, const StageIO& io)
      : command_(command), start_(Clock::now()), started_at_(utc_now()) {
    doc_ = {{"command", command},
            {"argv", io.argv},
            {"config_hash", cfg.hash()},
            {"seed", cfg.seed},
            {"results", json::object()}};
  }
  json& results() { return doc_["results"]; }
  json& timing() { return timing_; }

  json finish(const std::filesystem::path& path) {
    timing_["started_at"] = started_at_;
    timing_["elapsed_seconds"] = std::chrono::duration<double>(Clock::now() - start_).count();
    doc_["timing"] = timing_;
    write_text(path, doc_.dump(2) + "\n");
    return doc_;
  }

 private:
  std::string command_;
  Clock::time_point start_;
  std::string started_at_;
  json doc_;
  json timing_ = json::object();
};

std::filesystem::path report_path(const StageIO& io) {
  if (!io.report.empty()) return io.report;
  return io.out.string() + ".report.json";
}

json stamp(json metadata, const char* command, const RunConfig& cfg) {
  if (!metadata.is_object()) metadata = json::object();
  if (!metadata.contains("lineage")) metadata["lineage"] = json::array();
  metadata["lineage"].push_back({{"command", command}, {"config_hash", cfg.hash()}, {"seed", cfg.seed}});
  if (!metadata.contains("compression")) metadata["compression"] = json::object();
  return metadata;
}

json eval_json(const EvalResult& r) {
  return {{"loss", r.loss}, {"accuracy", r.accuracy}, {"targets", r.targets}};
}

json cost_json(const Cost& c) { return {{"params", c.params}, {"macs", c.macs}}; }

SubnetGenome choose_genome(const TinyTransformer& model, const StageIO& io) {
  if (io.heuristic && !io.genome.empty()) throw ConfigurationError("--genome and --heuristic are exclusive");
  if (io.heuristic) return heuristic_midpoint(model.space);
  if (!io.genome.empty()) {
    SubnetGenome g = SubnetGenome::parse(io.genome);
    model.space.check(g);
    return g;
  }
  return model.space.max_genome();
}

bool is_elastic(const TinyTransformer& model) {
  for (const LayerSpace& ls : model.space.layers) {
    if (ls.rank_choices.size() != 1 || !ls.width_group.empty()) return true;
  }
  return false;
}

}  // namespace

json cmd_pretrain(const RunConfig& cfg, const StageIO& io) {
  require(io.out, "--out");
  Report report("pretrain", cfg, io);
  const SyntheticTask task = SyntheticTask::generate(cfg.task);
  RngStream init(cfg.seed, streams::kInit);
  TinyTransformer model = TinyTransformer::init(cfg.model, init);
  const TrainLog log = pretrain_base(model, task, cfg.pretrain, cfg.seed);
  json& r = report.results();
  r["steps"] = log.losses.size();
  if (!log.losses.empty()) {
    r["first_loss"] = log.losses.front();
    r["final_loss"] = log.losses.back();
  }
  r["val"] = eval_json(evaluate(model, task.val));
  r["params"] = count_params(model).total;
  json meta = stamp(json::object(), "pretrain", cfg);
  meta["task"] = cfg.effective()["task"];
  save_checkpoint(io.out, model, meta);
  return report.finish(report_path(io));
}

json cmd_prune(const RunConfig& cfg, const StageIO& io) {
  require(io.in, "--in");
  require(io.out, "--out");
  Report report("prune", cfg, io);
  Artifact a = load_checkpoint(io.in);
  if (a.model.has_adapters()) {
    throw IncompatibleModeError("prune expects a base model without adapters; prune before fine-tuning");
  }
  const SyntheticTask task = SyntheticTask::generate(cfg.task);
  json& r = report.results();
  r["val_before"] = eval_json(evaluate(a.model, task.val));
  PruneSpec spec;
  spec.metric = cfg.compression.metric;
  spec.sparsity = cfg.compression.sparsity;
  spec.granularity = cfg.compression.granularity;
  spec.calib_sequences = cfg.compression.calib_sequences;
  const auto records = prune_model(a.model, task.train, spec);
  json layers = json::array();
  Index zeros = 0, total = 0;
  for (const LayerPruneRecord& rec : records) {
    layers.push_back({{"layer", rec.layer_id},
                      {"zero_fraction", rec.zero_fraction},
                      {"nonzero", rec.nonzero},
                      {"total", rec.total}});
    zeros += rec.total - rec.nonzero;
    total += rec.total;
  }
  r["layers"] = layers;
  r["linear_zero_fraction"] = total ? static_cast<double>(zeros) / static_cast<double>(total) : 0.0;
  r["val_after"] = eval_json(evaluate(a.model, task.val));
  const ParamCount pc = count_params(a.model);
  r["params"] = {{"total", pc.total}, {"nonzero", pc.nonzero}};
  json meta = stamp(a.metadata, "prune", cfg);
  meta["compression"]["sparsity"] = spec.sparsity;
  meta["compression"]["metric"] = cfg.effective()["compression"]["metric"];
  meta["compression"]["granularity"] = cfg.effective()["compression"]["granularity"];
  save_checkpoint(io.out, a.model, meta);
  return report.finish(report_path(io));
}

json cmd_quantize(const RunConfig& cfg, const StageIO& io) {
  require(io.in, "--in");
  require(io.out, "--out");
  Report report("quantize", cfg, io);
  Artifact a = load_checkpoint(io.in);
  const auto records = quantize_model(a.model, cfg.compression.bits);
  json layers = json::array();
  for (const LayerQuantRecord& rec : records) {
    layers.push_back({{"layer", rec.layer_id},
                      {"bits", rec.bits},
                      {"min_scale", rec.min_scale},
                      {"max_scale", rec.max_scale},
                      {"degenerate_columns", rec.degenerate_columns}});
  }
  const SyntheticTask task = SyntheticTask::generate(cfg.task);
  json& r = report.results();
  r["layers"] = layers;
  r["val_quantized"] = eval_json(evaluate(a.model, task.val));
  json meta = stamp(a.metadata, "quantize", cfg);
  meta["compression"]["bits"] = cfg.compression.bits;
  save_checkpoint(io.out, a.model, meta);
  return report.finish(report_path(io));
}

json cmd_train(const RunConfig& cfg, const StageIO& io) {
  require(io.in, "--in");
  require(io.out, "--out");
  Report report("train", cfg, io);
  Artifact a = load_checkpoint(io.in);
  TinyTransformer& model = a.model;
  json& r = report.results();
  if (!model.has_adapters()) {
    RngStream rng(cfg.seed, streams::kAdapterInit);
    attach_supernet(model, cfg.supernet, cfg.stages.merge_mode != MergeMode::vanilla, rng);
    r["attached"] = {{"mode", cfg.stages.supernet_mode}, {"targets", cfg.supernet.targets}};
  }
  const SyntheticTask task = SyntheticTask::generate(cfg.task);
  const TrainLog log = train_adapters(model, task, cfg.train, cfg.stages.sampler, cfg.seed);
  r["steps"] = log.losses.size();
  if (!log.losses.empty()) {
    const std::size_t tail = std::min<std::size_t>(50, log.losses.size());
    r["first_loss"] = log.losses.front();
    r["final_loss"] = log.losses.back();
    r["tail_mean_loss"] =
        std::accumulate(log.losses.end() - static_cast<std::ptrdiff_t>(tail), log.losses.end(), 0.0) /
        static_cast<double>(tail);
  }
  r["space_size"] = model.space.space_size();
  const SubnetGenome mid = heuristic_midpoint(model.space);
  r["val_max"] = eval_json(evaluate(model, task.val));
  r["val_midpoint"] = eval_json(evaluate(model, task.val, &mid));
  r["midpoint"] = mid.key();
  json meta = stamp(a.metadata, "train", cfg);
  meta["supernet_mode"] = cfg.stages.supernet_mode;
  save_checkpoint(io.out, model, meta);
  return report.finish(report_path(io));
}

json cmd_search(const RunConfig& cfg, const StageIO& io) {
  require(io.in, "--in");
  require(io.out, "--out");
  Report report("search", cfg, io);
  Artifact a = load_checkpoint(io.in);
  const TinyTransformer& model = a.model;
  if (!model.has_adapters()) throw IncompatibleModeError("search needs a trained supernet with adapters");
  const SyntheticTask task = SyntheticTask::generate(cfg.task);
  const Evaluator evaluator = make_model_evaluator(model, task.val, cfg.task.seq_len);
  EvaluationCache cache;
  const ParetoArchive init = initialize_archive(model.space, evaluator, cfg.search, cache);
  const ParetoArchive archive = evolve(init, model.space, evaluator, cfg.search, cache);
  const SubnetGenome mid_genome = heuristic_midpoint(model.space);
  const SubnetGenome max_genome = model.space.max_genome();
  cache.evaluate({mid_genome, max_genome}, evaluator, 1);
  const auto as_individual = [&cache](const SubnetGenome& g) {
    const auto f = cache.get(g);
    if (!f) throw SearchSpaceError("genome " + g.key() + " is infeasible");
    return Individual{g, *f, 1, 0.0};
  };
  const Individual midpoint = as_individual(mid_genome);
  const Individual maximum = as_individual(max_genome);
  const std::vector<Individual> front = first_front(archive.population);

  const std::filesystem::path dir =
      io.out_dir.empty() ? (io.out.has_parent_path() ? io.out.parent_path() : std::filesystem::path(".")) : io.out_dir;
  std::ostringstream gens, front_csv, svg;
  write_generations_csv(gens, archive);
  write_front_csv(front_csv, front);
  write_front_svg(svg, cache.feasible(), front, midpoint);
  write_text(dir / "generations.csv", gens.str());
  write_text(dir / "pareto_front.csv", front_csv.str());
  write_text(dir / "pareto.svg", svg.str());

  const auto point = [](const Individual& ind) {
    return json{{"genome", ind.genome.key()},
                {"accuracy", ind.fitness.accuracy},
                {"params", ind.fitness.cost.params},
                {"macs", ind.fitness.cost.macs}};
  };
  json& r = report.results();
  json front_json = json::array();
  for (const Individual& ind : front) front_json.push_back(point(ind));
  const Objectives reference = {0.0, 1.05 * static_cast<double>(maximum.fitness.cost.macs)};
  json hv = json::array();
  for (const GenerationRecord& rec : archive.history) {
    std::vector<Objectives> pts;
    for (const Individual& ind : first_front(rec.population)) pts.push_back(ind.fitness.objectives);
    hv.push_back(hypervolume_2d(pts, reference));
  }
  r["front"] = front_json;
  r["midpoint"] = point(midpoint);
  r["max_genome"] = point(maximum);
  r["hypervolume"] = hv;
  r["hypervolume_reference"] = reference;
  r["generations"] = archive.generation;
  r["evaluations"] = cache.evaluations();
  r["infeasible"] = cache.infeasible_log();
  r["space_size"] = model.space.space_size();
  r["files"] = {"generations.csv", "pareto_front.csv", "pareto.svg"};
  json meta = stamp(a.metadata, "search", cfg);
  meta["search"] = {{"front", front_json}, {"midpoint", point(midpoint)}};
  save_checkpoint(io.out, model, meta);
  return report.finish(report_path(io));
}

json cmd_extract(const RunConfig& cfg, const StageIO& io) {
  require(io.in, "--in");
  require(io.out, "--out");
  Report report("extract", cfg, io);
  Artifact a = load_checkpoint(io.in);
  const SubnetGenome g = choose_genome(a.model, io);
  const TinyTransformer sub = extract_subnet(a.model, g);
  const SyntheticTask task = SyntheticTask::generate(cfg.task);
  json& r = report.results();
  r["genome"] = g.key();
  r["heuristic"] = io.heuristic;
  r["cost_max"] = cost_json(cost(a.model, nullptr, cfg.task.seq_len));
  r["cost_subnet"] = cost_json(cost(sub, nullptr, cfg.task.seq_len));
  r["params"] = count_params(sub).total;
  r["val_supernet"] = eval_json(evaluate(a.model, task.val, &g));
  r["val_subnet"] = eval_json(evaluate(sub, task.val));
  json meta = stamp(a.metadata, "extract", cfg);
  meta["genome"] = g.key();
  save_checkpoint(io.out, sub, meta);
  return report.finish(report_path(io));
}

json cmd_merge(const RunConfig& cfg, const StageIO& io) {
  require(io.in, "--in");
  require(io.out, "--out");
  Report report("merge", cfg, io);
  Artifact a = load_checkpoint(io.in);
  if (!a.model.has_adapters()) throw IncompatibleModeError("merge needs a model with adapters");
  const MergeMode mode = io.merge_mode.value_or(cfg.stages.merge_mode);
  json& r = report.results();
  TinyTransformer model = std::move(a.model);
  if (is_elastic(model) || !io.genome.empty() || io.heuristic) {
    const SubnetGenome g = choose_genome(model, io);
    r["genome"] = g.key();
    model = extract_subnet(model, g);
  }
  const SyntheticTask task = SyntheticTask::generate(cfg.task);
  r["val_before"] = eval_json(evaluate(model, task.val));
  const MergeReport mr = merge_model(model, mode, cfg.seed);
  json layers = json::array();
  bool preserved = true;
  for (const LayerMergeRecord& rec : mr.layers) {
    layers.push_back({{"layer", rec.layer_id},
                      {"max_deviation", rec.max_deviation},
                      {"sparsity_before", rec.sparsity_before},
                      {"sparsity_after", rec.sparsity_after},
                      {"precision", rec.precision},
                      {"pattern_preserved", rec.pattern_preserved}});
    preserved = preserved && rec.pattern_preserved;
  }
  r["mode"] = to_string(mode);
  r["layers"] = layers;
  r["max_deviation"] = mr.max_deviation();
  r["pattern_preserved"] = preserved;
  r["val_after"] = eval_json(evaluate(model, task.val));
  const ParamCount pc = count_params(model);
  r["params"] = {{"total", pc.total}, {"nonzero", pc.nonzero}};
  json meta = stamp(a.metadata, "merge", cfg);
  meta["compression"]["merge_mode"] = to_string(mode);
  save_checkpoint(io.out, model, meta);
  return report.finish(report_path(io));
}

json cmd_eval(const RunConfig& cfg, const StageIO& io) {
  require(io.in, "--in");
  Report report("eval", cfg, io);
  const std::vector<std::uint8_t> bytes = read_file(io.in);
  const Checkpoint raw = Checkpoint::parse(bytes);
  const Artifact a = deserialize_checkpoint(bytes);
  const TinyTransformer& model = a.model;
  const SyntheticTask task = SyntheticTask::generate(cfg.task);
  json& r = report.results();
  const EvalResult max_eval = evaluate(model, task.val);
  r["val"] = eval_json(max_eval);
  const ParamCount from_ckpt = count_params(raw);
  const Cost c = cost(model, nullptr, cfg.task.seq_len);
  r["params"] = {{"total", from_ckpt.total},
                 {"nonzero", from_ckpt.nonzero},
                 {"closed_form", c.params},
                 {"sparsity", from_ckpt.total ? 1.0 - static_cast<double>(from_ckpt.nonzero) /
                                                          static_cast<double>(from_ckpt.total)
                                              : 0.0}};
  r["macs"] = c.macs;
  Index zeros = 0, total = 0;
  json layers = json::array();
  for (const AdaptedLinear* l : model.linears()) {
    const Index z = static_cast<Index>((l->weight.value().array() == 0.0).count());
    layers.push_back({{"layer", l->layer_id}, {"zero_fraction", zero_fraction(l->weight.value())}});
    zeros += z;
    total += l->weight.value().size();
  }
  r["linear_layers"] = layers;
  r["linear_zero_fraction"] = total ? static_cast<double>(zeros) / static_cast<double>(total) : 0.0;
  r["chance_accuracy"] = 1.0 / static_cast<double>(cfg.task.modulus);
  if (is_elastic(model)) {
    const SubnetGenome mid = heuristic_midpoint(model.space);
    const EvalResult mid_eval = evaluate(model, task.val, &mid);
    r["midpoint"] = {{"genome", mid.key()},
                     {"val", eval_json(mid_eval)},
                     {"cost", cost_json(cost(model, &mid, cfg.task.seq_len))},
                     {"relative_score", max_eval.accuracy > 0 ? relative_score(mid_eval.accuracy, max_eval.accuracy)
                                                              : 0.0}};
  }
  r["metadata"] = a.metadata;

  const TokenBatch batch = task.val.range(0, std::min<Index>(64, task.val.size()));
  const LatencyResult lat = bench_latency(model, batch, cfg.stages.latency_repeats);
  report.timing()["median_latency_seconds"] = lat.median_seconds;
  report.timing()["latency_samples"] = lat.samples;
  if (!io.table.empty()) {
    EfficiencyReport row;
    row.name = io.in.filename().string();
    row.total_params = from_ckpt.total;
    row.nonzero_params = from_ckpt.nonzero;
    row.macs = c.macs;
    row.median_latency = lat.median_seconds;
    row.score = max_eval.accuracy;
    row.relative_score = 100.0;
    write_text(io.table, render_table({row}, TableFormat::markdown));
  }
  StageIO eio = io;
  if (eio.report.empty()) eio.report = io.in.string() + ".eval.json";
  return report.finish(eio.report);
}

int exit_code_for(const std::string& kind) {
  if (kind == "usage_error") return 64;
  if (kind == "schema_error") return 65;
  if (kind == "artifact_error") return 66;
  if (kind == "incompatible_mode_error") return 67;
  if (kind == "configuration_error") return 68;
  if (kind == "divergence_error") return 69;
  return 70;
}

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Elastic low-rank adapters with weight-sharing search on a tiny transformer", "elsa"};
  app.require_subcommand(1);
  std::filesystem::path config_path;
  StageIO io;
  std::string mode;
  for (int i = 0; i < argc; ++i) io.argv.emplace_back(argv[i]);

  const auto add_common = [&](CLI::App* sub, bool needs_in, bool needs_out) {
    sub->add_option("--config", config_path, "Run configuration (JSON)")->required();
    auto* in = sub->add_option("--in", io.in, "Input checkpoint");
    if (needs_in) in->required();
    auto* o = sub->add_option("--out", io.out, "Output checkpoint");
    if (needs_out) o->required();
    sub->add_option("--report", io.report, "Report path");
  };
  CLI::App* pretrain = app.add_subcommand("pretrain", "Train a fresh base model on the task");
  add_common(pretrain, false, true);
  CLI::App* prune = app.add_subcommand("prune", "Prune base weights (wanda or magnitude)");
  add_common(prune, true, true);
  CLI::App* quantize = app.add_subcommand("quantize", "Calibrate per-column quantization parameters");
  add_common(quantize, true, true);
  CLI::App* train = app.add_subcommand("train", "Attach and train elastic adapters (nls or lonas)");
  add_common(train, true, true);
  CLI::App* search = app.add_subcommand("search", "NSGA-II search over sub-adapter configurations");
  add_common(search, true, true);
  search->add_option("--out-dir", io.out_dir, "Directory for CSV and SVG outputs");
  CLI::App* extract = app.add_subcommand("extract", "Extract a static sub-network");
  add_common(extract, true, true);
  CLI::App* merge = app.add_subcommand("merge", "Merge adapters into base weights");
  add_common(merge, true, true);
  merge->add_option("--mode", mode, "vanilla | sparsepeft | qa")
      ->check(CLI::IsMember({"vanilla", "sparsepeft", "qa"}));
  for (CLI::App* sub : {extract, merge}) {
    sub->add_option("--genome", io.genome, "Genome key such as 1-0-2");
    sub->add_flag("--heuristic", io.heuristic, "Use the midpoint of every elastic dimension");
  }
  CLI::App* eval = app.add_subcommand("eval", "Accuracy, parameter and MAC report for a checkpoint");
  add_common(eval, true, false);
  eval->add_option("--table", io.table, "Write a markdown efficiency table");
  CLI::App* schema = app.add_subcommand("schema", "Print the run configuration schema");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::ParseError& e) {
    err << json{{"error", "usage_error"}, {"message", e.what()}}.dump() << "\n";
    return exit_code_for("usage_error");
  }

  try {
    if (schema->parsed()) {
      out << run_config_schema().dump(2) << "\n";
      return 0;
    }
    const RunConfig cfg = load_run_config(config_path);
    if (!mode.empty()) io.merge_mode = parse_merge_mode(mode);
    json report;
    if (pretrain->parsed()) report = cmd_pretrain(cfg, io);
    else if (prune->parsed()) report = cmd_prune(cfg, io);
    else if (quantize->parsed()) report = cmd_quantize(cfg, io);
    else if (train->parsed()) report = cmd_train(cfg, io);
    else if (search->parsed()) report = cmd_search(cfg, io);
    else if (extract->parsed()) report = cmd_extract(cfg, io);
    else if (merge->parsed()) report = cmd_merge(cfg, io);
    else if (eval->parsed()) report = cmd_eval(cfg, io);
    out << report["results"].dump(2) << "\n";
    return 0;
  } catch (const Error& e) {
    err << json{{"error", e.kind()}, {"message", e.what()}}.dump() << "\n";
    return exit_code_for(e.kind());
  } catch (const std::exception& e) {
    err << json{{"error", "internal_error"}, {"message", e.what()}}.dump() << "\n";
    return exit_code_for("internal_error");
  }
}

}  // namespace elsa
