#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "blocklora/adapter.hpp"
#include "blocklora/base_model.hpp"
#include "blocklora/merge.hpp"
#include "blocklora/tensor.hpp"

namespace blocklora {

/// Source of the additive residual for each patched layer. `residual`
/// returns nullopt for layers it does not patch.
class ResidualProvider {
 public:
  virtual ~ResidualProvider() = default;
  virtual std::optional<Matrix> residual(const std::string& layer_id, const Matrix& x) const = 0;
};

class NoResidual final : public ResidualProvider {
 public:
  std::optional<Matrix> residual(const std::string&, const Matrix&) const override {
    return std::nullopt;
  }
};

/// Low-rank path: (M . B)(A x) without materializing the dense residual.
class AdapterResidual final : public ResidualProvider {
 public:
  explicit AdapterResidual(const LoRAAdapter& adapter) : adapter_(adapter) {}
  std::optional<Matrix> residual(const std::string& layer_id, const Matrix& x) const override;

 private:
  const LoRAAdapter& adapter_;
};

/// Dense per-layer residual matrices (merged models, target perturbations).
class DenseResidual final : public ResidualProvider {
 public:
  explicit DenseResidual(const std::map<std::string, Matrix>& layers) : layers_(layers) {}
  std::optional<Matrix> residual(const std::string& layer_id, const Matrix& x) const override;

 private:
  const std::map<std::string, Matrix>& layers_;
};

/// Network output for x (input x batch). With masks, each layer's residual
/// rows are scaled by that layer's keep vector; the base path is never
/// masked.
Matrix forward(const BaseModel& base, const ResidualProvider& residuals, const Matrix& x);
Matrix forward(const BaseModel& base, const ResidualProvider& residuals, const Matrix& x,
               const ErasureMask& masks);

struct LayerGradients {
  Matrix b;
  Matrix a;
};

struct Gradients {
  std::map<std::string, LayerGradients> layers;
  double loss = 0.0;
};

/// Gradients of loss = (1/batch) * sum_j |y_j - t_j|^2 with respect to B and
/// A of every adapter layer. Rows of grad B outside the row block are zero.
Gradients backward(const BaseModel& base, const LoRAAdapter& adapter, const Matrix& x,
                   const Matrix& target);
Gradients backward(const BaseModel& base, const LoRAAdapter& adapter, const Matrix& x,
                   const Matrix& target, const ErasureMask& masks);

/// Loss value only; same definition as backward().
double batch_loss(const BaseModel& base, const LoRAAdapter& adapter, const Matrix& x,
                  const Matrix& target, const ErasureMask* masks = nullptr);

/// Synthetic concept: inputs ~ Normal(mean, I), targets produced by the base
/// network with a fixed low-rank perturbation added to both layers.
struct ConceptTask {
  std::string concept_name;
  std::uint64_t seed = 0;
  double perturbation_norm = 0.0;
  std::size_t rank = 0;
  Matrix mean;                                // input x 1, |mean| = 2
  std::map<std::string, Matrix> perturbation; // per layer, Frobenius norm = perturbation_norm
  Matrix train_inputs;
  Matrix train_targets;
  Matrix test_inputs;
  Matrix test_targets;
  Matrix prior_inputs;  // Normal(0, I)
};

struct ConceptSizes {
  std::size_t train = 256;
  std::size_t test = 256;
  std::size_t prior = 256;
};

std::string concept_name_for_seed(std::uint64_t seed);

ConceptTask generate_concept(std::uint64_t seed, const BaseModel& base, double perturbation_norm,
                             std::size_t rank, ConceptSizes sizes = {});

struct TrainConfig {
  std::size_t rank = 4;
  double erasure_rate = 0.1;
  double learning_rate = 0.05;
  std::size_t steps = 2000;
  std::size_t batch_size = 32;
  std::uint64_t seed = 0;
  /// Blockwise when set: the allocated rows per layer. Full rows otherwise.
  std::optional<std::map<std::string, RowBlock>> row_blocks;

  void validate() const;
};

using StepObserver = std::function<void(std::size_t step, double loss)>;

/// Plain SGD from A ~ N(0, 1/n), B = 0, with a fresh erasure mask sampled
/// every step. Throws TrainingError if the loss stops being finite.
LoRAAdapter train_adapter(const BaseModel& base, const ConceptTask& task, const TrainConfig& config,
                          const StepObserver& observer = {});

/// Element-wise MSE of base + residuals on the task's held-out set.
double concept_test_mse(const BaseModel& base, const ResidualProvider& residuals,
                        const ConceptTask& task);

/// Mean over the prior inputs of |f(x) - f_base(x)|^2.
double prior_drift(const BaseModel& base, const ResidualProvider& residuals,
                   const ConceptTask& task);

struct ConceptEval {
  std::string concept_name;
  double identity_error = 0.0;
  double prior_drift = 0.0;
  bool in_merge = false;
};

struct EvalResult {
  std::vector<ConceptEval> concepts;
  std::size_t merge_size = 0;
  double mean_identity_error = 0.0;
  double mean_prior_drift = 0.0;

  std::string to_json() const;
  std::string to_text() const;
};

/// Evaluates every task against base + merged residual. Each concept in
/// the merge provenance must have a task (LookupError otherwise).
EvalResult evaluate_merge(const BaseModel& base, const MergedModel& merged,
                          const std::vector<ConceptTask>& tasks);

}  // namespace blocklora
