#pragma once

#include <cstddef>
#include <filesystem>
#include <string>
#include <vector>

namespace blocklora {

struct SuiteResult {
  std::string name;
  bool passed = false;
  std::string detail;
  double seconds = 0.0;
};

struct VerifyOptions {
  /// SGD steps for the adapters trained by the orthogonality and
  /// recoverability suites; disjointness does not depend on convergence.
  std::size_t train_steps = 300;
  /// Where the serialization suite writes its files. Defaults to a
  /// subdirectory of the system temp directory.
  std::filesystem::path scratch_dir;
};

/// Zero cosine and zero sign conflicts across 15 blockwise adapters.
SuiteResult verify_orthogonality(const VerifyOptions& options = {});
/// Slices of a 15-way uniform disjoint merge equal (1/15) dW bit for bit.
SuiteResult verify_recoverability(const VerifyOptions& options = {});
/// Keep rates and masked-residual expectation for lambda in {0.1, 0.3, 0.5}.
SuiteResult verify_erasure_statistics();
/// Analytic B/A gradients against central finite differences.
SuiteResult verify_gradients();
/// Round trips and corrupted-file rejection.
SuiteResult verify_serialization(const VerifyOptions& options = {});

std::vector<SuiteResult> run_verification(const VerifyOptions& options = {});

}  // namespace blocklora
