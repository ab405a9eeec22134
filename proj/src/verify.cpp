#include "blocklora/verify.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <functional>
#include <memory>
#include <sstream>
#include <unistd.h>

#include "blocklora/adapter.hpp"
#include "blocklora/benchmark.hpp"
#include "blocklora/diagnostics.hpp"
#include "blocklora/errors.hpp"
#include "blocklora/merge.hpp"
#include "blocklora/model_io.hpp"
#include "blocklora/rng.hpp"
#include "blocklora/trainer.hpp"

namespace blocklora {

namespace {

constexpr std::size_t kConcepts = 15;

SuiteResult timed(const std::string& name, const std::function<std::string()>& body) {
  const auto start = std::chrono::steady_clock::now();
  SuiteResult result{name, false, "", 0.0};
  try {
    const std::string failure = body();
    result.passed = failure.empty();
    result.detail = failure.empty() ? "ok" : failure;
  } catch (const std::exception& e) {
    result.detail = std::string("exception: ") + e.what();
  }
  result.seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return result;
}

std::vector<LoRAAdapter> blockwise_collection(const VerifyOptions& options) {
  BenchmarkConfig config;
  config.concepts = kConcepts;
  config.train.steps = options.train_steps;
  return train_blockwise_adapters(make_benchmark(config));
}

std::string check_orthogonality(const std::vector<LoRAAdapter>& adapters) {
  std::vector<const LoRAAdapter*> ptrs;
  for (const auto& a : adapters) ptrs.push_back(&a);
  const DiagnosticsReport report = build_report(ptrs);
  for (const auto& [id, cos] : report.layer_cosines) {
    for (std::size_t i = 0; i < cos.size(); ++i) {
      for (std::size_t j = 0; j < cos.size(); ++j) {
        if (i != j && cos[i][j] != 0.0) {
          std::ostringstream out;
          out << "layer " << id << ": cosine(" << i << "," << j << ") = " << cos[i][j];
          return out.str();
        }
      }
    }
  }
  for (const auto& [k, f] : report.sign_conflict_curve) {
    if (f != 0.0) return "sign conflict fraction " + std::to_string(f) + " at k=" + std::to_string(k);
  }
  return "";
}

std::string check_recoverability(const std::vector<LoRAAdapter>& adapters) {
  std::vector<std::shared_ptr<const LoRAAdapter>> shared;
  for (const auto& a : adapters) shared.push_back(std::make_shared<const LoRAAdapter>(a));
  const MergeSpec spec = MergeSpec::uniform(shared);
  const MergedModel merged = merge_weighted(spec);
  const double alpha = spec.entries.front().alpha;
  for (const auto& adapter : adapters) {
    const auto slice = extract_concept_slice(merged, adapter.concept_name);
    for (const auto& [id, layer] : adapter.layers) {
      if (!(slice.at(id) == scale(delta_weight(layer), alpha))) {
        return "slice of " + adapter.concept_name + " on " + id + " differs from alpha * dW";
      }
    }
  }
  return "";
}

LoRALayer random_layer(RngState& rng, const std::string& id, std::size_t m, std::size_t n,
                       std::size_t r, RowBlock block) {
  LoRALayer layer = init_layer(rng, id, m, n, r, std::move(block));
  for (std::size_t p : layer.row_block)
    for (double& v : layer.b.row(p)) v = rng.normal();
  return layer;
}

std::filesystem::path scratch_directory(const VerifyOptions& options) {
  if (!options.scratch_dir.empty()) return options.scratch_dir;
  return std::filesystem::temp_directory_path() /
         ("blocklora-verify-" + std::to_string(static_cast<long long>(::getpid())));
}

template <typename Error, typename Fn>
bool throws(Fn&& fn) {
  try {
    fn();
  } catch (const Error&) {
    return true;
  } catch (...) {
    return false;
  }
  return false;
}

bool f32_equal(const Matrix& decoded, const Matrix& original) {
  if (!decoded.same_shape(original)) return false;
  auto d = decoded.data();
  auto o = original.data();
  for (std::size_t i = 0; i < d.size(); ++i) {
    if (d[i] != static_cast<double>(static_cast<float>(o[i]))) return false;
  }
  return true;
}

}  // namespace

SuiteResult verify_orthogonality(const VerifyOptions& options) {
  return timed("orthogonality", [&] { return check_orthogonality(blockwise_collection(options)); });
}

SuiteResult verify_recoverability(const VerifyOptions& options) {
  return timed("recoverability", [&] { return check_recoverability(blockwise_collection(options)); });
}

SuiteResult verify_erasure_statistics() {
  return timed("erasure-statistics", []() -> std::string {
    RngState rng(20240611);
    for (double lambda : {0.1, 0.3, 0.5}) {
      const Matrix keep = sample_bernoulli_vector(rng, 100000, 1.0 - lambda);
      double kept = 0.0;
      for (double v : keep.data()) kept += v;
      const double rate = kept / 100000.0;
      if (std::abs(rate - (1.0 - lambda)) > 0.02) {
        return "keep rate " + std::to_string(rate) + " for lambda " + std::to_string(lambda);
      }

      const LoRALayer layer = random_layer(rng, "probe", 32, 24, 4, full_rows(32));
      const Matrix x = sample_normal(rng, 24, 3);
      Matrix mean(32, 3);
      const std::map<std::string, std::size_t> dims{{"probe", 32}};
      constexpr int kDraws = 10000;
      for (int i = 0; i < kDraws; ++i) {
        mean = add(mean, forward_residual(layer, x, sample_erasure_mask(rng, dims, lambda)));
      }
      mean = scale(mean, 1.0 / kDraws);
      const Matrix expected = scale(matmul(delta_weight(layer), x), 1.0 - lambda);
      const double rel = frobenius_norm(subtract(mean, expected)) / frobenius_norm(expected);
      if (rel > 0.02) {
        return "masked residual mean off by " + std::to_string(rel) + " for lambda " +
               std::to_string(lambda);
      }
    }
    return "";
  });
}

SuiteResult verify_gradients() {
  return timed("gradient-check", []() -> std::string {
    constexpr std::size_t kDim = 8;
    constexpr std::size_t kRank = 2;
    constexpr std::size_t kBatch = 4;
    constexpr double kStep = 1e-5;
    RngState rng(777);
    for (int instance = 0; instance < 20; ++instance) {
      const BaseModel base = make_base_model(9000 + instance, {kDim, kDim, kDim});
      LoRAAdapter adapter;
      adapter.concept_name = "probe";
      // Alternate full-row and blockwise instances.
      const bool blockwise = instance % 2 == 1;
      for (const std::string& id : {kHiddenLayer, kOutputLayer}) {
        RowBlock block = blockwise ? RowBlock{1, 2, 5} : full_rows(kDim);
        adapter.layers.emplace(id, random_layer(rng, id, kDim, kDim, kRank, std::move(block)));
      }
      const Matrix x = sample_normal(rng, kDim, kBatch);
      const Matrix target = sample_normal(rng, kDim, kBatch);
      const ErasureMask mask = sample_erasure_mask(rng, base.layer_rows(), 0.3);
      const Gradients grads = backward(base, adapter, x, target, mask);

      for (auto& [id, layer] : adapter.layers) {
        for (int which = 0; which < 2; ++which) {
          Matrix& param = which == 0 ? layer.b : layer.a;
          const Matrix& analytic = which == 0 ? grads.layers.at(id).b : grads.layers.at(id).a;
          for (std::size_t i = 0; i < param.size(); ++i) {
            const double saved = param.data()[i];
            param.data()[i] = saved + kStep;
            const double up = batch_loss(base, adapter, x, target, &mask);
            param.data()[i] = saved - kStep;
            const double down = batch_loss(base, adapter, x, target, &mask);
            param.data()[i] = saved;
            const double numeric = (up - down) / (2.0 * kStep);
            const double a = analytic.data()[i];
            const double rel =
                std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 1e-6});
            if (rel > 1e-4) {
              std::ostringstream out;
              out << "instance " << instance << " layer " << id << (which == 0 ? " B" : " A")
                  << "[" << i << "]: analytic " << a << " vs numeric " << numeric;
              return out.str();
            }
          }
        }
      }
    }
    return "";
  });
}

SuiteResult verify_serialization(const VerifyOptions& options) {
  return timed("serialization", [&]() -> std::string {
    const auto dir = scratch_directory(options);
    std::filesystem::create_directories(dir);

    RngState rng(31337);
    LoRAAdapter adapter;
    adapter.concept_name = "roundtrip";
    adapter.erasure_rate = 0.1;
    adapter.training_seed = 0xDEADBEEFCAFEULL;
    adapter.base_signature = "0123456789abcdef";
    adapter.final_train_mse = 1.0 / 3.0;
    adapter.layers.emplace("fc1", random_layer(rng, "fc1", 12, 8, 2, {4, 5, 6}));
    adapter.layers.emplace("fc2", random_layer(rng, "fc2", 8, 12, 2, {0, 1}));

    const auto adapter_path = dir / "adapter.blt";
    write_adapter(adapter, adapter_path);
    const LoRAAdapter loaded = read_adapter(adapter_path);
    if (loaded.concept_name != adapter.concept_name || loaded.erasure_rate != adapter.erasure_rate ||
        loaded.training_seed != adapter.training_seed ||
        loaded.base_signature != adapter.base_signature ||
        loaded.final_train_mse != adapter.final_train_mse) {
      return "adapter metadata changed in round trip";
    }
    for (const auto& [id, layer] : adapter.layers) {
      const LoRALayer& other = loaded.layer(id);
      if (!f32_equal(other.b, layer.b) || !f32_equal(other.a, layer.a) ||
          other.row_block != layer.row_block) {
        return "adapter layer " + id + " changed in round trip";
      }
    }
    if (encode_adapter(loaded) != read_file_bytes(adapter_path)) {
      return "re-encoding a loaded adapter is not byte-identical";
    }

    std::vector<std::shared_ptr<const LoRAAdapter>> one{std::make_shared<const LoRAAdapter>(loaded)};
    const MergedModel merged = merge_weighted(MergeSpec::uniform(one));
    const auto merged_path = dir / "merged.blt";
    write_merged(merged, merged_path);
    const MergedModel merged_back = read_merged(merged_path);
    if (merged_back.provenance != merged.provenance ||
        merged_back.base_signature != merged.base_signature) {
      return "merged provenance changed in round trip";
    }
    for (const auto& [id, residual] : merged.layers) {
      if (!f32_equal(merged_back.layers.at(id), residual)) return "merged residual " + id + " changed";
    }

    const std::string good = read_file_bytes(adapter_path);
    std::string bad_magic = good;
    bad_magic[0] = 'X';
    if (!throws<FormatError>([&] { decode_adapter(bad_magic); })) return "bad magic not rejected";
    if (!throws<CorruptionError>([&] { decode_adapter(good.substr(0, good.size() - 5)); })) {
      return "truncated payload not rejected";
    }
    if (!throws<FormatError>([&] { read_adapter(merged_path); })) {
      return "merged file accepted as adapter";
    }
    LoRAAdapter tampered = adapter;
    tampered.layers.at("fc1").b(0, 0) = 0.5;  // row 0 is outside {4, 5, 6}
    if (!throws<IntegrityError>([&] { decode_adapter(encode_adapter(tampered)); })) {
      return "row-support violation not rejected";
    }

    std::filesystem::remove_all(dir);
    return "";
  });
}

std::vector<SuiteResult> run_verification(const VerifyOptions& options) {
  std::vector<SuiteResult> results;
  std::vector<LoRAAdapter> adapters;
  SuiteResult training = timed("orthogonality", [&] {
    adapters = blockwise_collection(options);
    return check_orthogonality(adapters);
  });
  results.push_back(training);
  results.push_back(timed("recoverability", [&]() -> std::string {
    if (adapters.size() != kConcepts) return "blockwise adapters unavailable";
    return check_recoverability(adapters);
  }));
  results.push_back(verify_erasure_statistics());
  results.push_back(verify_gradients());
  results.push_back(verify_serialization(options));
  return results;
}

}  // namespace blocklora
