#include "blocklora/benchmark.hpp"

#include <memory>

#include "blocklora/block_allocation.hpp"
#include "blocklora/errors.hpp"
#include "blocklora/merge.hpp"

namespace blocklora {

namespace {

std::size_t resolve_count(const Benchmark& bench, std::size_t count) {
  if (count == 0) return bench.tasks.size();
  if (count > bench.tasks.size()) {
    throw PreconditionError("requested " + std::to_string(count) + " adapters but the benchmark has " +
                            std::to_string(bench.tasks.size()) + " concepts");
  }
  return count;
}

}  // namespace

Benchmark make_benchmark(const BenchmarkConfig& config) {
  Benchmark bench{config, make_base_model(config.base_seed, config.dims), {}};
  bench.tasks.reserve(config.concepts);
  for (std::size_t i = 0; i < config.concepts; ++i) {
    bench.tasks.push_back(generate_concept(config.first_concept_seed + i, bench.base,
                                           config.perturbation_norm, config.concept_rank));
  }
  return bench;
}

std::vector<LoRAAdapter> train_standard_adapters(const Benchmark& bench, std::size_t count) {
  count = resolve_count(bench, count);
  std::vector<LoRAAdapter> adapters;
  adapters.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    TrainConfig cfg = bench.config.train;
    cfg.seed = bench.config.train.seed + i;
    cfg.erasure_rate = bench.config.standard_erasure_rate;
    cfg.row_blocks.reset();
    adapters.push_back(train_adapter(bench.base, bench.tasks[i], cfg));
  }
  return adapters;
}

std::vector<LoRAAdapter> train_blockwise_adapters(const Benchmark& bench, std::size_t count) {
  count = resolve_count(bench, count);
  BlockAllocation allocation(bench.tasks.size());
  for (const auto& [id, rows] : bench.base.layer_rows()) allocation.add_layer(id, rows);

  std::vector<LoRAAdapter> adapters;
  adapters.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    TrainConfig cfg = bench.config.train;
    cfg.seed = bench.config.train.seed + i;
    cfg.row_blocks = allocation.allocate_slot(i);
    adapters.push_back(train_adapter(bench.base, bench.tasks[i], cfg));
  }
  return adapters;
}

std::vector<double> identity_error_curve(const Benchmark& bench,
                                         const std::vector<LoRAAdapter>& adapters) {
  std::vector<std::shared_ptr<const LoRAAdapter>> shared;
  for (const auto& a : adapters) shared.push_back(std::make_shared<const LoRAAdapter>(a));

  std::vector<double> curve;
  for (std::size_t n = 1; n <= adapters.size(); ++n) {
    std::vector<std::shared_ptr<const LoRAAdapter>> subset(shared.begin(), shared.begin() + n);
    const MergedModel merged = merge_weighted(MergeSpec::uniform(subset), bench.base.signature());
    std::vector<ConceptTask> tasks(bench.tasks.begin(), bench.tasks.begin() + n);
    curve.push_back(evaluate_merge(bench.base, merged, tasks).mean_identity_error);
  }
  return curve;
}

}  // namespace blocklora
