#pragma once

#include <cstddef>
#include <map>
#include <string>
#include <vector>

#include "blocklora/adapter.hpp"

namespace blocklora {

/// flatten_dot(dW_a, dW_b) / (|dW_a|_F |dW_b|_F), or 0 when either residual
/// is identically zero.
double cosine_similarity(const LoRAAdapter& a, const LoRAAdapter& b, const std::string& layer_id);

/// Fraction of positions in `layer_id` where some pair of adapters holds
/// nonzero residual entries of opposite sign. Exact zeros never conflict.
double sign_conflict_fraction(const std::vector<const LoRAAdapter*>& adapters,
                              const std::string& layer_id);
/// Same rule pooled over every position of every layer.
double sign_conflict_fraction(const std::vector<const LoRAAdapter*>& adapters);

struct DiagnosticsReport {
  std::vector<std::string> adapter_names;
  /// layer id -> N x N cosine matrix, row-major.
  std::map<std::string, std::vector<std::vector<double>>> layer_cosines;
  /// N x N layer-averaged cosine.
  std::vector<std::vector<double>> mean_cosine;
  /// k -> pooled conflict fraction over the first k adapters, k = 2..N.
  std::map<std::size_t, double> sign_conflict_curve;
  /// layer id -> (k -> fraction).
  std::map<std::string, std::map<std::size_t, double>> layer_sign_conflict_curves;
  std::string generated_at;  // ISO-8601 UTC

  /// Stable-keyed JSON document (see docs/report_schema.md).
  std::string to_json() const;
  /// Aligned columns for terminal display.
  std::string to_text() const;
};

DiagnosticsReport build_report(const std::vector<const LoRAAdapter*>& adapters);

}  // namespace blocklora
