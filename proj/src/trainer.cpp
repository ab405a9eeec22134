#include "blocklora/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <sstream>

#include <json.hpp>

#include "blocklora/errors.hpp"
#include "blocklora/rng.hpp"

namespace blocklora {

namespace {

Matrix apply_mask(Matrix residual, const ErasureMask* masks, const std::string& layer_id) {
  if (masks == nullptr) return residual;
  return scale_rows(residual, masks->for_layer(layer_id));
}

Matrix forward_impl(const BaseModel& base, const ResidualProvider& residuals, const Matrix& x,
                    const ErasureMask* masks) {
  if (x.rows() != base.w1.cols()) {
    throw ShapeError("forward: base expects " + std::to_string(base.w1.cols()) +
                     " input rows, got x " + x.shape_string());
  }
  Matrix pre = add_column(matmul(base.w1, x), base.b1);
  if (auto r = residuals.residual(kHiddenLayer, x)) {
    pre = add(pre, apply_mask(std::move(*r), masks, kHiddenLayer));
  }
  const Matrix hidden = tanh(pre);
  Matrix out = add_column(matmul(base.w2, hidden), base.b2);
  if (auto r = residuals.residual(kOutputLayer, hidden)) {
    out = add(out, apply_mask(std::move(*r), masks, kOutputLayer));
  }
  return out;
}

// B with rows outside the block forced to zero: the M . B factor.
Matrix masked_b(const LoRALayer& layer) {
  Matrix out(layer.b.rows(), layer.b.cols());
  for (std::size_t p : layer.row_block) {
    auto src = layer.b.row(p);
    std::copy(src.begin(), src.end(), out.row(p).begin());
  }
  return out;
}

Matrix keep_block_rows(const Matrix& m, const RowBlock& block) {
  Matrix out(m.rows(), m.cols());
  for (std::size_t p : block) {
    auto src = m.row(p);
    std::copy(src.begin(), src.end(), out.row(p).begin());
  }
  return out;
}

Matrix ones_column(std::size_t rows) { return Matrix::ones(rows, 1); }

// Intermediate values of one patched affine layer: h = W in + c + keep . (MB)(A in).
struct PatchedLayerTrace {
  const LoRALayer* layer = nullptr;
  Matrix keep;  // m x 1
  std::optional<Matrix> projected;  // A in, r x batch
  std::optional<Matrix> mb;         // M . B
};

PatchedLayerTrace trace_layer(const LoRAAdapter& adapter, const std::string& id, const Matrix& in,
                              std::size_t rows, const ErasureMask* masks) {
  PatchedLayerTrace t{nullptr, masks ? masks->for_layer(id) : ones_column(rows), std::nullopt,
                      std::nullopt};
  if (t.keep.rows() != rows || t.keep.cols() != 1) {
    throw ShapeError("erasure mask for layer '" + id + "' has shape " + t.keep.shape_string() +
                     ", expected (" + std::to_string(rows) + "x1)");
  }
  auto it = adapter.layers.find(id);
  if (it == adapter.layers.end()) return t;
  t.layer = &it->second;
  if (t.layer->in_cols() != in.rows() || t.layer->out_rows() != rows) {
    throw ShapeError("adapter layer '" + id + "' has shape (" + std::to_string(rows) + "x" +
                     std::to_string(in.rows()) + ") expected, got B " +
                     t.layer->b.shape_string() + " A " + t.layer->a.shape_string());
  }
  t.projected = matmul(t.layer->a, in);
  t.mb = masked_b(*t.layer);
  return t;
}

Matrix residual_out(const PatchedLayerTrace& t) {
  return scale_rows(matmul(*t.mb, *t.projected), t.keep);
}

// Gradients of one patched layer given dL/dh (m x batch) and its input.
LayerGradients layer_gradients(const PatchedLayerTrace& t, const Matrix& grad_out,
                               const Matrix& in) {
  const Matrix masked = scale_rows(grad_out, t.keep);
  return {keep_block_rows(matmul(masked, transpose(*t.projected)), t.layer->row_block),
          matmul(matmul(transpose(*t.mb), masked), transpose(in))};
}

Matrix column_slice(const Matrix& m, const std::vector<std::size_t>& columns) {
  Matrix out(m.rows(), columns.size());
  for (std::size_t i = 0; i < m.rows(); ++i)
    for (std::size_t j = 0; j < columns.size(); ++j) out(i, j) = m(i, columns[j]);
  return out;
}

Gradients backward_impl(const BaseModel& base, const LoRAAdapter& adapter, const Matrix& x,
                        const Matrix& target, const ErasureMask* masks) {
  if (x.rows() != base.w1.cols()) {
    throw ShapeError("backward: base expects " + std::to_string(base.w1.cols()) +
                     " input rows, got x " + x.shape_string());
  }
  if (target.rows() != base.w2.rows() || target.cols() != x.cols()) {
    throw ShapeError("backward: target " + target.shape_string() + " does not match output (" +
                     std::to_string(base.w2.rows()) + "x" + std::to_string(x.cols()) + ")");
  }
  const double batch = static_cast<double>(x.cols());

  const PatchedLayerTrace first = trace_layer(adapter, kHiddenLayer, x, base.w1.rows(), masks);
  Matrix pre = add_column(matmul(base.w1, x), base.b1);
  if (first.layer) pre = add(pre, residual_out(first));
  const Matrix hidden = tanh(pre);

  const PatchedLayerTrace second =
      trace_layer(adapter, kOutputLayer, hidden, base.w2.rows(), masks);
  Matrix out = add_column(matmul(base.w2, hidden), base.b2);
  if (second.layer) out = add(out, residual_out(second));

  const Matrix diff = subtract(out, target);
  Gradients grads;
  grads.loss = flatten_dot(diff, diff) / batch;

  const Matrix grad_out = scale(diff, 2.0 / batch);
  Matrix grad_hidden = matmul(transpose(base.w2), grad_out);
  if (second.layer) {
    grads.layers.emplace(kOutputLayer, layer_gradients(second, grad_out, hidden));
    // d hidden through the residual path: A^T (MB)^T (keep . g).
    const Matrix masked = scale_rows(grad_out, second.keep);
    grad_hidden =
        add(grad_hidden, matmul(transpose(second.layer->a), matmul(transpose(*second.mb), masked)));
  }
  if (first.layer) {
    Matrix grad_pre = grad_hidden;
    auto g = grad_pre.data();
    auto h = hidden.data();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] *= 1.0 - h[i] * h[i];
    grads.layers.emplace(kHiddenLayer, layer_gradients(first, grad_pre, x));
  }
  return grads;
}

Matrix scaled_low_rank(RngState& rng, std::size_t rows, std::size_t cols, std::size_t rank,
                       double norm) {
  const Matrix product = matmul(sample_normal(rng, rows, rank), sample_normal(rng, rank, cols));
  const double current = frobenius_norm(product);
  if (norm == 0.0 || current == 0.0) return Matrix(rows, cols);
  return scale(product, norm / current);
}

Matrix shifted_normal(RngState rng, const Matrix& mean, std::size_t count) {
  Matrix out = sample_normal(rng, mean.rows(), count);
  return add_column(out, mean);
}

}  // namespace

std::optional<Matrix> AdapterResidual::residual(const std::string& layer_id,
                                                const Matrix& x) const {
  auto it = adapter_.layers.find(layer_id);
  if (it == adapter_.layers.end()) return std::nullopt;
  return forward_residual(it->second, x);
}

std::optional<Matrix> DenseResidual::residual(const std::string& layer_id, const Matrix& x) const {
  auto it = layers_.find(layer_id);
  if (it == layers_.end()) return std::nullopt;
  return matmul(it->second, x);
}

Matrix forward(const BaseModel& base, const ResidualProvider& residuals, const Matrix& x) {
  return forward_impl(base, residuals, x, nullptr);
}

Matrix forward(const BaseModel& base, const ResidualProvider& residuals, const Matrix& x,
               const ErasureMask& masks) {
  return forward_impl(base, residuals, x, &masks);
}

Gradients backward(const BaseModel& base, const LoRAAdapter& adapter, const Matrix& x,
                   const Matrix& target) {
  return backward_impl(base, adapter, x, target, nullptr);
}

Gradients backward(const BaseModel& base, const LoRAAdapter& adapter, const Matrix& x,
                   const Matrix& target, const ErasureMask& masks) {
  return backward_impl(base, adapter, x, target, &masks);
}

double batch_loss(const BaseModel& base, const LoRAAdapter& adapter, const Matrix& x,
                  const Matrix& target, const ErasureMask* masks) {
  const Matrix diff = subtract(forward_impl(base, AdapterResidual(adapter), x, masks), target);
  return flatten_dot(diff, diff) / static_cast<double>(x.cols());
}

std::string concept_name_for_seed(std::uint64_t seed) {
  return "concept-" + std::to_string(seed);
}

ConceptTask generate_concept(std::uint64_t seed, const BaseModel& base, double perturbation_norm,
                             std::size_t rank, ConceptSizes sizes) {
  if (!(perturbation_norm >= 0.0) || !std::isfinite(perturbation_norm)) {
    throw DomainError("perturbation norm must be finite and nonnegative");
  }
  for (const auto& [id, shape] : base.layer_shapes()) {
    const std::size_t budget = std::min(shape.first, shape.second) / 2;
    if (rank == 0 || rank > budget) {
      throw PreconditionError("concept rank " + std::to_string(rank) +
                              " outside the adapter rank budget [1, " + std::to_string(budget) +
                              "] of layer '" + id + "'");
    }
  }
  RngState root(seed);
  RngState mean_rng = root.fork(1);
  Matrix mean = sample_normal(mean_rng, base.w1.cols(), 1);
  mean = scale(mean, 2.0 / frobenius_norm(mean));

  RngState perturb = root.fork(2);
  std::map<std::string, Matrix> perturbation;
  for (const auto& [id, shape] : base.layer_shapes()) {
    perturbation.emplace(
        id, scaled_low_rank(perturb, shape.first, shape.second, rank, perturbation_norm));
  }

  const DenseResidual target(perturbation);
  Matrix train_inputs = shifted_normal(root.fork(3), mean, sizes.train);
  Matrix test_inputs = shifted_normal(root.fork(4), mean, sizes.test);
  Matrix train_targets = forward(base, target, train_inputs);
  Matrix test_targets = forward(base, target, test_inputs);
  Matrix prior_inputs = shifted_normal(root.fork(5), Matrix(base.w1.cols(), 1), sizes.prior);

  ConceptTask task{concept_name_for_seed(seed), seed,
                   perturbation_norm,           rank,
                   std::move(mean),             std::move(perturbation),
                   std::move(train_inputs),     std::move(train_targets),
                   std::move(test_inputs),      std::move(test_targets),
                   std::move(prior_inputs)};
  return task;
}

void TrainConfig::validate() const {
  validate_erasure_rate(erasure_rate);
  if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) {
    throw DomainError("learning rate must be positive");
  }
  if (steps == 0) throw DomainError("steps must be positive");
  if (batch_size == 0) throw DomainError("batch size must be positive");
  if (rank == 0) throw DomainError("rank must be positive");
}

LoRAAdapter train_adapter(const BaseModel& base, const ConceptTask& task, const TrainConfig& config,
                          const StepObserver& observer) {
  config.validate();
  if (task.train_inputs.rows() != base.w1.cols() ||
      task.train_targets.rows() != base.w2.rows()) {
    throw ShapeError("concept task '" + task.concept_name + "' does not match the base model");
  }

  RngState root(config.seed);
  RngState init = root.fork(1);
  RngState batches = root.fork(2);
  RngState erasure = root.fork(3);

  LoRAAdapter adapter;
  adapter.concept_name = task.concept_name;
  adapter.erasure_rate = config.erasure_rate;
  adapter.training_seed = config.seed;
  adapter.base_signature = base.signature();
  for (const auto& [id, shape] : base.layer_shapes()) {
    RowBlock block = full_rows(shape.first);
    if (config.row_blocks) {
      auto it = config.row_blocks->find(id);
      if (it == config.row_blocks->end()) {
        throw PreconditionError("blockwise training has no row block for layer '" + id + "'");
      }
      block = it->second;
    }
    adapter.layers.emplace(id, init_layer(init, id, shape.first, shape.second, config.rank,
                                          std::move(block)));
  }

  const auto layer_rows = base.layer_rows();
  const std::size_t available = task.train_inputs.cols();
  std::vector<std::size_t> columns(config.batch_size);
  for (std::size_t step = 0; step < config.steps; ++step) {
    try {
      for (auto& c : columns) c = batches.below(available);
      const Matrix x = column_slice(task.train_inputs, columns);
      const Matrix t = column_slice(task.train_targets, columns);
      const ErasureMask mask = sample_erasure_mask(erasure, layer_rows, config.erasure_rate);
      const Gradients grads = backward(base, adapter, x, t, mask);
      if (!std::isfinite(grads.loss)) {
        throw TrainingError("training diverged: loss is not finite at step " +
                                std::to_string(step),
                            step);
      }
      if (observer) observer(step, grads.loss);
      for (auto& [id, layer] : adapter.layers) {
        const LayerGradients& g = grads.layers.at(id);
        layer.b = subtract(layer.b, scale(g.b, config.learning_rate));
        layer.a = subtract(layer.a, scale(g.a, config.learning_rate));
      }
    } catch (const DomainError& e) {
      throw TrainingError("training diverged at step " + std::to_string(step) + ": " + e.what(),
                          step);
    }
  }

  adapter.final_train_mse =
      mean_squared_error(forward(base, AdapterResidual(adapter), task.train_inputs),
                         task.train_targets);
  return adapter;
}

double concept_test_mse(const BaseModel& base, const ResidualProvider& residuals,
                        const ConceptTask& task) {
  return mean_squared_error(forward(base, residuals, task.test_inputs), task.test_targets);
}

double prior_drift(const BaseModel& base, const ResidualProvider& residuals,
                   const ConceptTask& task) {
  const Matrix diff = subtract(forward(base, residuals, task.prior_inputs),
                               forward(base, NoResidual{}, task.prior_inputs));
  return flatten_dot(diff, diff) / static_cast<double>(diff.cols());
}

EvalResult evaluate_merge(const BaseModel& base, const MergedModel& merged,
                          const std::vector<ConceptTask>& tasks) {
  if (!merged.layers.empty() && merged.base_signature != base.signature()) {
    throw CompatibilityError("merged model was built for base " + merged.base_signature +
                             ", evaluating against " + base.signature());
  }
  for (const auto& entry : merged.provenance) {
    const bool found = std::any_of(tasks.begin(), tasks.end(), [&](const ConceptTask& t) {
      return t.concept_name == entry.concept_name;
    });
    if (!found) throw LookupError("no task supplied for merged concept '" + entry.concept_name + "'");
  }

  const DenseResidual residuals(merged.layers);
  EvalResult result;
  result.merge_size = merged.provenance.size();
  for (const ConceptTask& task : tasks) {
    ConceptEval e;
    e.concept_name = task.concept_name;
    e.identity_error = concept_test_mse(base, residuals, task);
    e.prior_drift = prior_drift(base, residuals, task);
    e.in_merge = std::any_of(merged.provenance.begin(), merged.provenance.end(),
                             [&](const ProvenanceEntry& p) { return p.concept_name == task.concept_name; });
    result.mean_identity_error += e.identity_error;
    result.mean_prior_drift += e.prior_drift;
    result.concepts.push_back(std::move(e));
  }
  if (!tasks.empty()) {
    result.mean_identity_error /= static_cast<double>(tasks.size());
    result.mean_prior_drift /= static_cast<double>(tasks.size());
  }
  return result;
}

std::string EvalResult::to_json() const {
  nlohmann::ordered_json doc;
  doc["merge_size"] = merge_size;
  doc["mean_identity_error"] = mean_identity_error;
  doc["mean_prior_drift"] = mean_prior_drift;
  auto records = nlohmann::ordered_json::array();
  for (const auto& c : concepts) {
    records.push_back({{"concept", c.concept_name},
                       {"in_merge", c.in_merge},
                       {"identity_error", c.identity_error},
                       {"prior_drift", c.prior_drift}});
  }
  doc["concepts"] = std::move(records);
  return doc.dump();
}

std::string EvalResult::to_text() const {
  std::ostringstream out;
  out << "merge size: " << merge_size << '\n';
  out << std::left << std::setw(24) << "concept" << std::setw(10) << "merged" << std::right
      << std::setw(16) << "identity_err" << std::setw(16) << "prior_drift" << '\n';
  out << std::scientific << std::setprecision(4);
  for (const auto& c : concepts) {
    out << std::left << std::setw(24) << c.concept_name << std::setw(10)
        << (c.in_merge ? "yes" : "no") << std::right << std::setw(16) << c.identity_error
        << std::setw(16) << c.prior_drift << '\n';
  }
  out << std::left << std::setw(34) << "mean" << std::right << std::setw(16)
      << mean_identity_error << std::setw(16) << mean_prior_drift << '\n';
  return out.str();
}

}  // namespace blocklora
