// blocklora: train, merge, analyze and evaluate blockwise LoRA adapters.
//
// Exit codes: 0 success, 1 verification failure, 2 data/compatibility
// error, 3 numeric divergence, 64 usage error.

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "blocklora/benchmark.hpp"
#include "blocklora/block_allocation.hpp"
#include "blocklora/diagnostics.hpp"
#include "blocklora/errors.hpp"
#include "blocklora/merge.hpp"
#include "blocklora/model_io.hpp"
#include "blocklora/trainer.hpp"
#include "blocklora/verify.hpp"

namespace fs = std::filesystem;
using nlohmann::ordered_json;
using namespace blocklora;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitVerifyFailed = 1;
constexpr int kExitData = 2;
constexpr int kExitDiverged = 3;
constexpr int kExitUsage = 64;

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

std::uint64_t default_seed() {
  if (const char* env = std::getenv("BLOCKLORA_SEED")) {
    try {
      return std::stoull(env);
    } catch (const std::exception&) {
      throw UsageError(std::string("BLOCKLORA_SEED is not an unsigned integer: ") + env);
    }
  }
  return 0;
}

void emit(const std::string& text, const std::string& out_path) {
  if (out_path.empty()) {
    std::cout << text << std::endl;
  } else {
    write_file_bytes(out_path, text + "\n");
  }
}

struct BaseOptions {
  std::optional<std::uint64_t> seed;
  std::size_t input = 16;
  std::size_t hidden = 64;
  std::size_t output = 16;
  std::string out = "base.blt";
};

int run_base(const BaseOptions& o) {
  const BaseModel base = make_base_model(o.seed.value_or(default_seed()), {o.input, o.hidden, o.output});
  write_base(base, o.out);
  ordered_json line{{"base", o.out}, {"signature", base.signature()}};
  std::cout << line.dump() << std::endl;
  return kExitOk;
}

struct TrainOptions {
  std::string base;
  std::uint64_t concept_seed = 1000;
  double perturbation_norm = 1.0;
  std::size_t concept_rank = 1;
  std::size_t rank = 4;
  double lambda = 0.1;
  double lr = 0.05;
  std::size_t steps = 2000;
  std::size_t batch = 32;
  std::optional<std::uint64_t> seed;
  std::size_t slot = 0;
  std::size_t capacity = 15;
  bool standard = false;
  std::string out;
};

int run_train(const TrainOptions& o) {
  if (!(o.lambda >= 0.0 && o.lambda < 1.0)) {
    throw UsageError("--lambda must lie in [0, 1), got " + std::to_string(o.lambda));
  }
  if (!(o.lr > 0.0) || o.steps == 0 || o.batch == 0 || o.rank == 0) {
    throw UsageError("--lr, --steps, --batch and --rank must be positive");
  }
  const BaseModel base = read_base(o.base);
  const ConceptTask task = generate_concept(o.concept_seed, base, o.perturbation_norm, o.concept_rank);

  TrainConfig config;
  config.rank = o.rank;
  config.erasure_rate = o.lambda;
  config.learning_rate = o.lr;
  config.steps = o.steps;
  config.batch_size = o.batch;
  config.seed = o.seed.value_or(default_seed());
  if (!o.standard) {
    BlockAllocation allocation(o.capacity);
    for (const auto& [id, rows] : base.layer_rows()) allocation.add_layer(id, rows);
    config.row_blocks = allocation.allocate_slot(o.slot);
  }

  const LoRAAdapter trained = train_adapter(base, task, config);
  const std::string out = o.out.empty() ? task.concept_name + ".blt" : o.out;
  const std::string bytes = encode_adapter(trained);
  write_file_bytes(out, bytes);

  // Report metrics of the adapter as stored (f32), not the in-memory f64 copy.
  const LoRAAdapter stored = decode_adapter(bytes);
  const AdapterResidual residual(stored);
  ordered_json line;
  line["concept"] = stored.concept_name;
  line["train_mse"] = mean_squared_error(forward(base, residual, task.train_inputs), task.train_targets);
  line["test_mse"] = concept_test_mse(base, residual, task);
  line["blockwise"] = !o.standard;
  ordered_json blocks = ordered_json::object();
  for (const auto& [id, layer] : stored.layers) blocks[id] = layer.row_block;
  line["row_blocks"] = std::move(blocks);
  line["out"] = out;
  std::cout << line.dump() << std::endl;
  return kExitOk;
}

struct MergeOptions {
  std::string base;
  std::vector<std::string> adapters;
  std::vector<double> alphas;
  bool normalize = false;
  std::string out = "merged.blt";
};

int run_merge(const MergeOptions& o) {
  if (!o.alphas.empty() && o.alphas.size() != o.adapters.size()) {
    throw UsageError("--alphas has " + std::to_string(o.alphas.size()) + " values for " +
                     std::to_string(o.adapters.size()) + " adapters");
  }
  const BaseModel base = read_base(o.base);
  std::vector<std::shared_ptr<const LoRAAdapter>> adapters;
  for (const auto& path : o.adapters) {
    adapters.push_back(std::make_shared<const LoRAAdapter>(read_adapter(path)));
  }
  const MergeSpec spec =
      o.alphas.empty() ? MergeSpec::uniform(adapters)
                       : MergeSpec::weighted(adapters, o.alphas,
                                             o.normalize ? Normalization::renormalize
                                                         : Normalization::strict);

  const auto start = std::chrono::steady_clock::now();
  const MergedModel merged = merge_weighted(spec, base.signature());
  const double ms =
      std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
  write_merged(merged, o.out);

  ordered_json line;
  line["merge_ms"] = ms;
  line["adapters"] = merged.provenance.size();
  ordered_json alphas = ordered_json::array();
  for (const auto& p : merged.provenance) alphas.push_back(p.alpha);
  line["alphas"] = std::move(alphas);
  line["disjoint"] = validate_disjointness(merged.provenance).empty();
  line["out"] = o.out;
  std::cout << line.dump() << std::endl;
  return kExitOk;
}

struct AnalyzeOptions {
  std::vector<std::string> adapters;
  std::string format = "json";
  std::string out;
};

int run_analyze(const AnalyzeOptions& o) {
  if (o.adapters.size() < 2) {
    throw UsageError("analyze needs at least 2 adapters, got " + std::to_string(o.adapters.size()));
  }
  std::vector<LoRAAdapter> adapters;
  for (const auto& path : o.adapters) adapters.push_back(read_adapter(path));
  std::vector<const LoRAAdapter*> ptrs;
  for (const auto& a : adapters) ptrs.push_back(&a);
  const DiagnosticsReport report = build_report(ptrs);
  emit(o.format == "text" ? report.to_text() : report.to_json(), o.out);
  return kExitOk;
}

struct EvalOptions {
  std::string base;
  std::string merged;
  std::string tasks;
  std::string format = "json";
};

std::vector<ConceptTask> load_tasks(const std::string& path, const BaseModel& base) {
  ordered_json doc;
  try {
    doc = ordered_json::parse(read_file_bytes(path));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("task spec '" + path + "' is not valid JSON: " + e.what());
  }
  std::vector<ConceptTask> tasks;
  try {
    const double default_norm = doc.value("perturbation_norm", 1.0);
    const std::size_t default_rank = doc.value("rank", std::size_t{1});
    for (const auto& entry : doc.at("tasks")) {
      if (entry.is_number_unsigned()) {
        tasks.push_back(generate_concept(entry.get<std::uint64_t>(), base, default_norm, default_rank));
      } else {
        tasks.push_back(generate_concept(entry.at("concept_seed").get<std::uint64_t>(), base,
                                         entry.value("perturbation_norm", default_norm),
                                         entry.value("rank", default_rank)));
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("task spec '" + path + "' is malformed: " + e.what());
  }
  return tasks;
}

int run_eval(const EvalOptions& o) {
  const BaseModel base = read_base(o.base);
  const MergedModel merged = read_merged(o.merged);
  const EvalResult result = evaluate_merge(base, merged, load_tasks(o.tasks, base));
  std::cout << (o.format == "text" ? result.to_text() : result.to_json()) << std::endl;
  return kExitOk;
}

struct VerifyCliOptions {
  std::size_t steps = 300;
  std::string format = "json";
};

int run_verify(const VerifyCliOptions& o) {
  VerifyOptions options;
  options.train_steps = o.steps;
  const auto results = run_verification(options);
  std::vector<std::string> failed;
  for (const auto& r : results) {
    if (o.format == "text") {
      std::cout << (r.passed ? "[PASS] " : "[FAIL] ") << r.name << " (" << r.seconds << " s) "
                << r.detail << '\n';
    } else {
      ordered_json line{{"suite", r.name}, {"passed", r.passed}, {"seconds", r.seconds},
                        {"detail", r.detail}};
      std::cout << line.dump() << '\n';
    }
    if (!r.passed) failed.push_back(r.name);
  }
  std::cout.flush();
  if (!failed.empty()) {
    std::cerr << "failed invariants:";
    for (const auto& f : failed) std::cerr << ' ' << f;
    std::cerr << std::endl;
    return kExitVerifyFailed;
  }
  return kExitOk;
}

struct DemoOptions {
  std::string out_dir = "demo";
  std::size_t steps = 2000;
};

int run_demo(const DemoOptions& o) {
  fs::create_directories(o.out_dir);
  const fs::path dir(o.out_dir);
  BenchmarkConfig config;
  config.train.steps = o.steps;
  const Benchmark bench = make_benchmark(config);
  write_base(bench.base, dir / "base.blt");

  const auto blockwise = train_blockwise_adapters(bench);
  const auto standard = train_standard_adapters(bench);
  fs::create_directories(dir / "blockwise");
  fs::create_directories(dir / "standard");
  for (std::size_t i = 0; i < blockwise.size(); ++i) {
    write_adapter(blockwise[i], dir / "blockwise" / (blockwise[i].concept_name + ".blt"));
    write_adapter(standard[i], dir / "standard" / (standard[i].concept_name + ".blt"));
  }

  auto report_of = [](const std::vector<LoRAAdapter>& adapters, std::size_t count) {
    std::vector<const LoRAAdapter*> ptrs;
    for (std::size_t i = 0; i < count; ++i) ptrs.push_back(&adapters[i]);
    return build_report(ptrs);
  };
  const DiagnosticsReport standard_report = report_of(standard, std::min<std::size_t>(10, standard.size()));
  const DiagnosticsReport blockwise_report = report_of(blockwise, blockwise.size());
  write_file_bytes(dir / "standard_report.json", standard_report.to_json() + "\n");
  write_file_bytes(dir / "blockwise_report.json", blockwise_report.to_json() + "\n");

  auto timed_merge = [&](const std::vector<LoRAAdapter>& adapters, const fs::path& path) {
    std::vector<std::shared_ptr<const LoRAAdapter>> shared;
    for (const auto& a : adapters) shared.push_back(std::make_shared<const LoRAAdapter>(a));
    const auto start = std::chrono::steady_clock::now();
    const MergedModel merged = merge_weighted(MergeSpec::uniform(shared), bench.base.signature());
    const double ms =
        std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
    write_merged(merged, path);
    return ms;
  };
  const double blockwise_ms = timed_merge(blockwise, dir / "blockwise_merged.blt");
  const double standard_ms = timed_merge(standard, dir / "standard_merged.blt");

  const auto blockwise_curve = identity_error_curve(bench, blockwise);
  const auto standard_curve = identity_error_curve(bench, standard);

  ordered_json summary;
  summary["concepts"] = bench.tasks.size();
  summary["base_signature"] = bench.base.signature();
  summary["merge_ms"] = {{"blockwise", blockwise_ms}, {"standard", standard_ms}};
  ordered_json conflicts = ordered_json::array();
  for (const auto& [k, f] : standard_report.sign_conflict_curve) {
    conflicts.push_back({{"k", k}, {"standard", f}, {"blockwise", blockwise_report.sign_conflict_curve.at(k)}});
  }
  summary["sign_conflicts"] = std::move(conflicts);
  ordered_json curve = ordered_json::array();
  for (std::size_t n = 0; n < blockwise_curve.size(); ++n) {
    curve.push_back({{"n", n + 1}, {"blockwise", blockwise_curve[n]}, {"standard", standard_curve[n]}});
  }
  summary["identity_error"] = std::move(curve);
  write_file_bytes(dir / "summary.json", summary.dump(2) + "\n");
  std::cout << summary.dump() << std::endl;
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Blockwise LoRA adapters: disjoint row blocks, erasure training, instant merging"};
  app.require_subcommand(1);

  BaseOptions base_opts;
  auto* base_cmd = app.add_subcommand("base", "Write a seeded base model file");
  base_cmd->add_option("--seed", base_opts.seed, "Base seed (default: BLOCKLORA_SEED or 0)");
  base_cmd->add_option("--input", base_opts.input, "Input dimension")->check(CLI::PositiveNumber);
  base_cmd->add_option("--hidden", base_opts.hidden, "Hidden dimension")->check(CLI::PositiveNumber);
  base_cmd->add_option("--output", base_opts.output, "Output dimension")->check(CLI::PositiveNumber);
  base_cmd->add_option("--out", base_opts.out, "Output path");

  TrainOptions train_opts;
  auto* train_cmd = app.add_subcommand("train", "Train one adapter on a synthetic concept");
  train_cmd->add_option("--base", train_opts.base, "Base model file")->required();
  train_cmd->add_option("--concept-seed", train_opts.concept_seed, "Concept task seed");
  train_cmd->add_option("--perturbation-norm", train_opts.perturbation_norm,
                        "Frobenius norm of the concept's target perturbation");
  train_cmd->add_option("--concept-rank", train_opts.concept_rank, "Rank of the target perturbation");
  train_cmd->add_option("--rank", train_opts.rank, "Adapter rank");
  train_cmd->add_option("--lambda", train_opts.lambda, "Erasure rate in [0, 1)");
  train_cmd->add_option("--lr", train_opts.lr, "SGD learning rate");
  train_cmd->add_option("--steps", train_opts.steps, "SGD steps");
  train_cmd->add_option("--batch", train_opts.batch, "Batch size");
  train_cmd->add_option("--seed", train_opts.seed, "Training seed (default: BLOCKLORA_SEED or 0)");
  train_cmd->add_option("--slot", train_opts.slot, "Block slot, 0-indexed");
  train_cmd->add_option("--capacity", train_opts.capacity, "Number of block slots K");
  train_cmd->add_flag("--standard", train_opts.standard, "Full-row adapter (no row block)");
  train_cmd->add_option("--out", train_opts.out, "Adapter output path");

  MergeOptions merge_opts;
  auto* merge_cmd = app.add_subcommand("merge", "Weighted merge of adapters into one residual");
  merge_cmd->add_option("--base", merge_opts.base, "Base model file")->required();
  merge_cmd->add_option("--adapters", merge_opts.adapters, "Adapter files")->required();
  merge_cmd->add_option("--alphas", merge_opts.alphas, "Coefficients (default 1/n each)");
  merge_cmd->add_flag("--normalize", merge_opts.normalize, "Rescale --alphas to sum to 1");
  merge_cmd->add_option("--out", merge_opts.out, "Merged model output path");

  AnalyzeOptions analyze_opts;
  auto* analyze_cmd = app.add_subcommand("analyze", "Cosine similarity and sign-conflict report");
  analyze_cmd->add_option("--adapters", analyze_opts.adapters, "Adapter files")->required();
  analyze_cmd->add_option("--format", analyze_opts.format, "json or text")
      ->check(CLI::IsMember({"json", "text"}));
  analyze_cmd->add_option("--out", analyze_opts.out, "Write the report here instead of stdout");

  EvalOptions eval_opts;
  auto* eval_cmd = app.add_subcommand("eval", "Identity error and prior drift of a merged model");
  eval_cmd->add_option("--base", eval_opts.base, "Base model file")->required();
  eval_cmd->add_option("--merged", eval_opts.merged, "Merged model file")->required();
  eval_cmd->add_option("--tasks", eval_opts.tasks, "Task spec JSON")->required();
  eval_cmd->add_option("--format", eval_opts.format, "json or text")
      ->check(CLI::IsMember({"json", "text"}));

  VerifyCliOptions verify_opts;
  auto* verify_cmd = app.add_subcommand("verify", "Run the built-in invariant suites");
  verify_cmd->add_option("--steps", verify_opts.steps, "Training steps for the adapter suites")
      ->check(CLI::PositiveNumber);
  verify_cmd->add_option("--format", verify_opts.format, "json or text")
      ->check(CLI::IsMember({"json", "text"}));

  DemoOptions demo_opts;
  auto* demo_cmd = app.add_subcommand("demo", "Run the 15-concept experiment end to end");
  demo_cmd->add_option("--out-dir", demo_opts.out_dir, "Output directory");
  demo_cmd->add_option("--steps", demo_opts.steps, "Training steps per adapter")
      ->check(CLI::PositiveNumber);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitUsage;
  }

  try {
    if (*base_cmd) return run_base(base_opts);
    if (*train_cmd) return run_train(train_opts);
    if (*merge_cmd) return run_merge(merge_opts);
    if (*analyze_cmd) return run_analyze(analyze_opts);
    if (*eval_cmd) return run_eval(eval_opts);
    if (*verify_cmd) return run_verify(verify_opts);
    if (*demo_cmd) return run_demo(demo_opts);
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << std::endl;
    return kExitUsage;
  } catch (const ConstraintError& e) {
    std::cerr << "usage error: " << e.what() << std::endl;
    return kExitUsage;
  } catch (const ArityError& e) {
    std::cerr << "usage error: " << e.what() << std::endl;
    return kExitUsage;
  } catch (const TrainingError& e) {
    std::cerr << "diverged: " << e.what() << std::endl;
    return kExitDiverged;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << std::endl;
    return kExitData;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << std::endl;
    return kExitData;
  }
  return kExitUsage;
}
