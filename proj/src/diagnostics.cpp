#include "blocklora/diagnostics.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <ctime>
#include <iomanip>
#include <sstream>

#include <json.hpp>

#include "blocklora/errors.hpp"

namespace blocklora {

namespace {

const LoRALayer& checked_layer(const LoRAAdapter& adapter, const std::string& layer_id) {
  auto it = adapter.layers.find(layer_id);
  if (it == adapter.layers.end()) {
    throw CompatibilityError("adapter '" + adapter.concept_name + "' does not patch layer '" +
                             layer_id + "'");
  }
  return it->second;
}

double cosine_of(const Matrix& a, const Matrix& b) {
  const double na = frobenius_norm(a);
  const double nb = frobenius_norm(b);
  if (na == 0.0 || nb == 0.0) return 0.0;
  return std::clamp(flatten_dot(a, b) / (na * nb), -1.0, 1.0);
}

// Tracks, per position, whether any adapter so far was positive / negative.
class ConflictTracker {
 public:
  explicit ConflictTracker(std::size_t positions) : positive_(positions), negative_(positions) {}

  void add(const Matrix& delta) {
    auto v = delta.data();
    for (std::size_t i = 0; i < v.size(); ++i) {
      if (v[i] > 0.0) positive_[i] = 1;
      if (v[i] < 0.0) negative_[i] = 1;
    }
  }

  std::size_t conflicts() const {
    std::size_t n = 0;
    for (std::size_t i = 0; i < positive_.size(); ++i) n += positive_[i] & negative_[i];
    return n;
  }

  std::size_t positions() const { return positive_.size(); }

 private:
  std::vector<unsigned char> positive_;
  std::vector<unsigned char> negative_;
};

void require_same_layers(const std::vector<const LoRAAdapter*>& adapters) {
  const LoRAAdapter& ref = *adapters.front();
  for (const LoRAAdapter* adapter : adapters) {
    if (adapter->layers.size() != ref.layers.size()) {
      throw CompatibilityError("adapter '" + adapter->concept_name +
                               "' patches a different set of layers than '" + ref.concept_name +
                               "'");
    }
    for (const auto& [id, layer] : ref.layers) {
      const LoRALayer& other = checked_layer(*adapter, id);
      if (other.out_rows() != layer.out_rows() || other.in_cols() != layer.in_cols()) {
        throw CompatibilityError("layer '" + id + "' shape differs between '" + ref.concept_name +
                                 "' and '" + adapter->concept_name + "'");
      }
    }
  }
}

std::vector<Matrix> deltas_for(const std::vector<const LoRAAdapter*>& adapters,
                               const std::string& layer_id) {
  std::vector<Matrix> deltas;
  deltas.reserve(adapters.size());
  for (const LoRAAdapter* adapter : adapters)
    deltas.push_back(delta_weight(checked_layer(*adapter, layer_id)));
  for (const Matrix& d : deltas) {
    if (!d.same_shape(deltas.front())) {
      throw CompatibilityError("layer '" + layer_id + "': residual shapes differ " +
                               d.shape_string() + " vs " + deltas.front().shape_string());
    }
  }
  return deltas;
}

void require_arity(const std::vector<const LoRAAdapter*>& adapters) {
  if (adapters.size() < 2) {
    throw ArityError("sign conflicts need at least 2 adapters, got " +
                     std::to_string(adapters.size()));
  }
}

std::string utc_timestamp() {
  const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  std::ostringstream out;
  out << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return out.str();
}

}  // namespace

double cosine_similarity(const LoRAAdapter& a, const LoRAAdapter& b, const std::string& layer_id) {
  const LoRALayer& la = checked_layer(a, layer_id);
  const LoRALayer& lb = checked_layer(b, layer_id);
  if (la.out_rows() != lb.out_rows() || la.in_cols() != lb.in_cols()) {
    throw CompatibilityError("layer '" + layer_id + "': shapes differ between '" + a.concept_name +
                             "' and '" + b.concept_name + "'");
  }
  return cosine_of(delta_weight(la), delta_weight(lb));
}

double sign_conflict_fraction(const std::vector<const LoRAAdapter*>& adapters,
                              const std::string& layer_id) {
  require_arity(adapters);
  const auto deltas = deltas_for(adapters, layer_id);
  ConflictTracker tracker(deltas.front().size());
  for (const Matrix& d : deltas) tracker.add(d);
  return static_cast<double>(tracker.conflicts()) / static_cast<double>(tracker.positions());
}

double sign_conflict_fraction(const std::vector<const LoRAAdapter*>& adapters) {
  require_arity(adapters);
  require_same_layers(adapters);
  std::size_t conflicts = 0;
  std::size_t positions = 0;
  for (const auto& [id, layer] : adapters.front()->layers) {
    const auto deltas = deltas_for(adapters, id);
    ConflictTracker tracker(deltas.front().size());
    for (const Matrix& d : deltas) tracker.add(d);
    conflicts += tracker.conflicts();
    positions += tracker.positions();
  }
  if (positions == 0) return 0.0;
  return static_cast<double>(conflicts) / static_cast<double>(positions);
}

DiagnosticsReport build_report(const std::vector<const LoRAAdapter*>& adapters) {
  require_arity(adapters);
  require_same_layers(adapters);
  const std::size_t n = adapters.size();

  DiagnosticsReport report;
  report.generated_at = utc_timestamp();
  for (const LoRAAdapter* adapter : adapters) report.adapter_names.push_back(adapter->concept_name);
  report.mean_cosine.assign(n, std::vector<double>(n, 0.0));

  std::vector<std::size_t> pooled_conflicts(n + 1, 0);
  std::size_t pooled_positions = 0;
  const std::size_t layer_count = adapters.front()->layers.size();

  for (const auto& [id, layer] : adapters.front()->layers) {
    const auto deltas = deltas_for(adapters, id);

    std::vector<std::vector<double>> cos(n, std::vector<double>(n, 0.0));
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = i; j < n; ++j) {
        const double c = cosine_of(deltas[i], deltas[j]);
        cos[i][j] = c;
        cos[j][i] = c;
      }
    }
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) report.mean_cosine[i][j] += cos[i][j];
    report.layer_cosines.emplace(id, std::move(cos));

    ConflictTracker tracker(deltas.front().size());
    auto& curve = report.layer_sign_conflict_curves[id];
    for (std::size_t k = 1; k <= n; ++k) {
      tracker.add(deltas[k - 1]);
      if (k < 2) continue;
      const std::size_t c = tracker.conflicts();
      curve[k] = static_cast<double>(c) / static_cast<double>(tracker.positions());
      pooled_conflicts[k] += c;
    }
    pooled_positions += tracker.positions();
  }

  if (layer_count > 0) {
    for (auto& row : report.mean_cosine)
      for (double& v : row) v /= static_cast<double>(layer_count);
  }
  for (std::size_t k = 2; k <= n; ++k) {
    report.sign_conflict_curve[k] =
        pooled_positions == 0
            ? 0.0
            : static_cast<double>(pooled_conflicts[k]) / static_cast<double>(pooled_positions);
  }
  return report;
}

std::string DiagnosticsReport::to_json() const {
  using nlohmann::ordered_json;
  ordered_json doc;
  doc["format"] = "blocklora.diagnostics";
  doc["format_version"] = 1;
  doc["adapters"] = adapter_names;
  doc["generated_at"] = generated_at;
  ordered_json layers = ordered_json::object();
  for (const auto& [id, cos] : layer_cosines) {
    ordered_json layer;
    layer["cosine"] = cos;
    ordered_json curve = ordered_json::array();
    for (const auto& [k, f] : layer_sign_conflict_curves.at(id))
      curve.push_back({{"k", k}, {"fraction", f}});
    layer["sign_conflict_curve"] = std::move(curve);
    layers[id] = std::move(layer);
  }
  doc["layers"] = std::move(layers);
  doc["mean_cosine"] = mean_cosine;
  ordered_json curve = ordered_json::array();
  for (const auto& [k, f] : sign_conflict_curve) curve.push_back({{"k", k}, {"fraction", f}});
  doc["sign_conflict_curve"] = std::move(curve);
  return doc.dump();
}

std::string DiagnosticsReport::to_text() const {
  std::ostringstream out;
  out << "adapters: " << adapter_names.size() << "  generated: " << generated_at << "\n\n";
  out << "layer-averaged cosine similarity\n";
  std::size_t width = 8;
  for (const auto& name : adapter_names) width = std::max(width, name.size() + 2);
  out << std::setw(static_cast<int>(width)) << "";
  for (const auto& name : adapter_names) out << std::setw(static_cast<int>(width)) << name;
  out << '\n';
  out << std::fixed << std::setprecision(4);
  for (std::size_t i = 0; i < adapter_names.size(); ++i) {
    out << std::setw(static_cast<int>(width)) << adapter_names[i];
    for (double v : mean_cosine[i]) out << std::setw(static_cast<int>(width)) << v;
    out << '\n';
  }
  out << "\nsign conflicts (first k adapters)\n";
  out << std::setw(6) << "k" << std::setw(12) << "pooled";
  for (const auto& [id, curve] : layer_sign_conflict_curves) {
    out << std::setw(static_cast<int>(std::max<std::size_t>(12, id.size() + 2))) << id;
  }
  out << '\n';
  for (const auto& [k, f] : sign_conflict_curve) {
    out << std::setw(6) << k << std::setw(12) << f;
    for (const auto& [id, curve] : layer_sign_conflict_curves) {
      out << std::setw(static_cast<int>(std::max<std::size_t>(12, id.size() + 2))) << curve.at(k);
    }
    out << '\n';
  }
  return out.str();
}

}  // namespace blocklora
