#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include "blocklora/base_model.hpp"
#include "blocklora/trainer.hpp"

namespace blocklora {

/// The bundled synthetic experiment: one base network, `concepts` concept
/// tasks with consecutive seeds, and recipes for training the blockwise and
/// standard adapter collections on them.
struct BenchmarkConfig {
  std::uint64_t base_seed = 7;
  ModelDims dims{};
  std::size_t concepts = 15;
  std::uint64_t first_concept_seed = 1000;
  double perturbation_norm = 1.0;
  std::size_t concept_rank = 1;
  /// Shared hyperparameters. The per-concept training seed is
  /// train.seed + concept index.
  TrainConfig train{};
  /// Erasure rate of the standard (plain LoRA) baseline collection.
  double standard_erasure_rate = 0.0;
};

struct Benchmark {
  BenchmarkConfig config;
  BaseModel base;
  std::vector<ConceptTask> tasks;
};

Benchmark make_benchmark(const BenchmarkConfig& config = {});

/// Full-row adapters trained on the first `count` concepts (all if 0).
std::vector<LoRAAdapter> train_standard_adapters(const Benchmark& bench, std::size_t count = 0);

/// Adapters on disjoint row blocks of a capacity-`concepts` allocation,
/// concept i in slot i, trained with the configured erasure rate.
std::vector<LoRAAdapter> train_blockwise_adapters(const Benchmark& bench, std::size_t count = 0);

/// Mean identity error of a uniform merge of the first n adapters,
/// evaluated on the first n concepts, for n = 1..adapters.size().
std::vector<double> identity_error_curve(const Benchmark& bench,
                                         const std::vector<LoRAAdapter>& adapters);

}  // namespace blocklora
