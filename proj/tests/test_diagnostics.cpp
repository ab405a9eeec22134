#include <doctest.h>

#include <json.hpp>

#include "blocklora/adapter.hpp"
#include "blocklora/block_allocation.hpp"
#include "blocklora/diagnostics.hpp"
#include "blocklora/errors.hpp"
#include "blocklora/rng.hpp"
#include "oracles.hpp"

using namespace blocklora;

namespace {

LoRAAdapter dense_adapter(RngState& rng, const std::string& name, std::size_t m = 10, std::size_t n = 8) {
  LoRAAdapter adapter;
  adapter.concept_name = name;
  LoRALayer layer = init_layer(rng, "L", m, n, 2, full_rows(m));
  layer.b = sample_normal(rng, m, 2);
  adapter.layers.emplace("L", std::move(layer));
  return adapter;
}

// Rank-1 residual u v^T with Gaussian u and v.
LoRAAdapter random_sign_adapter(RngState& rng, std::size_t m, std::size_t n) {
  LoRAAdapter adapter;
  adapter.concept_name = "rs";
  LoRALayer layer = init_layer(rng, "L", m, n, 1, full_rows(m));
  layer.b = sample_normal(rng, m, 1);
  layer.a = sample_normal(rng, 1, n);
  adapter.layers.emplace("L", std::move(layer));
  return adapter;
}

LoRAAdapter scaled(const LoRAAdapter& a, double c) {
  LoRAAdapter copy = a;
  for (auto& [id, layer] : copy.layers) layer.b = scale(layer.b, c);
  return copy;
}

std::vector<const LoRAAdapter*> pointers(const std::vector<LoRAAdapter>& adapters) {
  std::vector<const LoRAAdapter*> out;
  for (const auto& a : adapters) out.push_back(&a);
  return out;
}

}  // namespace

TEST_CASE("cosine_similarity") {
  RngState rng(1);
  const LoRAAdapter a = dense_adapter(rng, "a");
  const LoRAAdapter b = dense_adapter(rng, "b");
  CHECK(cosine_similarity(a, a, "L") == doctest::Approx(1.0).epsilon(1e-14));

  const double expected = oracle::cosine(oracle::to_dense(delta_weight(a.layer("L"))),
                                         oracle::to_dense(delta_weight(b.layer("L"))));
  CHECK(std::abs(cosine_similarity(a, b, "L") - expected) <= 1e-12);
  CHECK(cosine_similarity(a, b, "L") == cosine_similarity(b, a, "L"));

  LoRAAdapter zero = a;
  zero.layers.at("L").b = Matrix::zeros(10, 2);
  CHECK(cosine_similarity(a, zero, "L") == 0.0);

  const LoRAAdapter wide = dense_adapter(rng, "w", 10, 9);
  CHECK_THROWS_AS(cosine_similarity(a, wide, "L"), CompatibilityError);
  CHECK_THROWS_AS(cosine_similarity(a, b, "missing"), CompatibilityError);
}

TEST_CASE("disjoint blockwise pair is exactly orthogonal and conflict free") {
  RngState rng(2);
  LoRAAdapter a = dense_adapter(rng, "a");
  LoRAAdapter b = dense_adapter(rng, "b");
  a.layers.at("L").row_block = {0, 1, 2};
  b.layers.at("L").row_block = {5, 6};
  for (std::size_t p = 0; p < 10; ++p) {
    if (p > 2) a.layers.at("L").b(p, 0) = a.layers.at("L").b(p, 1) = 0.0;
    if (p != 5 && p != 6) b.layers.at("L").b(p, 0) = b.layers.at("L").b(p, 1) = 0.0;
  }
  CHECK(cosine_similarity(a, b, "L") == 0.0);
  CHECK(sign_conflict_fraction({&a, &b}, "L") == 0.0);
}

TEST_CASE("sign_conflict_fraction") {
  RngState rng(3);
  const LoRAAdapter a = dense_adapter(rng, "a");
  CHECK(sign_conflict_fraction({&a, &a}, "L") == 0.0);

  const LoRAAdapter neg = scaled(a, -1.0);
  CHECK(sign_conflict_fraction({&a, &neg}, "L") == 1.0);
  CHECK(sign_conflict_fraction({&a, &neg}) == 1.0);
  CHECK_THROWS_AS(sign_conflict_fraction({&a}, "L"), ArityError);
  CHECK_THROWS_AS(sign_conflict_fraction({}), ArityError);

  SUBCASE("exact zeros never conflict") {
    LoRAAdapter half = neg;
    for (std::size_t p = 0; p < 5; ++p) half.layers.at("L").b(p, 0) = half.layers.at("L").b(p, 1) = 0.0;
    CHECK(sign_conflict_fraction({&a, &half}, "L") == doctest::Approx(0.5));
  }
}

TEST_CASE("random signs follow 1 - 2^(1-k)") {
  RngState rng(4);
  std::vector<LoRAAdapter> adapters;
  for (int i = 0; i < 10; ++i) adapters.push_back(random_sign_adapter(rng, 100, 100));
  for (std::size_t k = 2; k <= 10; ++k) {
    std::vector<const LoRAAdapter*> prefix;
    for (std::size_t i = 0; i < k; ++i) prefix.push_back(&adapters[i]);
    const double fraction = sign_conflict_fraction(prefix, "L");
    // sign(u_p v_q) is a fair coin at each position, independent across
    // adapters, which is all the closed form needs.
    CHECK(std::abs(fraction - oracle::random_sign_conflict(k)) <= 0.02);
  }
}

TEST_CASE("diagnostics are scale invariant") {
  RngState rng(5);
  std::vector<LoRAAdapter> adapters;
  for (int i = 0; i < 4; ++i) adapters.push_back(dense_adapter(rng, "a" + std::to_string(i)));
  const DiagnosticsReport before = build_report(pointers(adapters));
  adapters[1] = scaled(adapters[1], 3.7);
  const DiagnosticsReport after = build_report(pointers(adapters));
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 4; ++j)
      CHECK(std::abs(before.layer_cosines.at("L")[i][j] - after.layer_cosines.at("L")[i][j]) <= 1e-12);
  CHECK(before.sign_conflict_curve == after.sign_conflict_curve);
}

TEST_CASE("conflict curve is non-decreasing and defined for k = 2..N") {
  RngState rng(6);
  std::vector<LoRAAdapter> adapters;
  for (int i = 0; i < 8; ++i) adapters.push_back(dense_adapter(rng, "a" + std::to_string(i)));
  const DiagnosticsReport report = build_report(pointers(adapters));
  REQUIRE(report.sign_conflict_curve.size() == 7);
  double previous = 0.0;
  for (std::size_t k = 2; k <= 8; ++k) {
    const double f = report.sign_conflict_curve.at(k);
    CHECK(f >= previous);
    CHECK(f <= 1.0);
    previous = f;
  }
}

TEST_CASE("build_report") {
  RngState rng(7);
  SUBCASE("two identical adapters") {
    const LoRAAdapter a = dense_adapter(rng, "a");
    const DiagnosticsReport report = build_report({&a, &a});
    for (const auto& row : report.layer_cosines.at("L"))
      for (double c : row) CHECK(c == doctest::Approx(1.0).epsilon(1e-14));
    CHECK(report.adapter_names == std::vector<std::string>{"a", "a"});
  }
  SUBCASE("full disjoint blockwise set") {
    BlockAllocation alloc(5);
    alloc.add_layer("L", 10);
    std::vector<LoRAAdapter> adapters;
    for (std::size_t i = 0; i < 5; ++i) {
      LoRAAdapter adapter;
      adapter.concept_name = "b" + std::to_string(i);
      LoRALayer layer = init_layer(rng, "L", 10, 8, 2, alloc.allocate_block(i, "L"));
      for (std::size_t p : layer.row_block)
        for (double& v : layer.b.row(p)) v = rng.normal();
      adapter.layers.emplace("L", std::move(layer));
      adapters.push_back(std::move(adapter));
    }
    const DiagnosticsReport report = build_report(pointers(adapters));
    for (std::size_t i = 0; i < 5; ++i)
      for (std::size_t j = 0; j < 5; ++j) {
        if (i == j) {
          CHECK(report.layer_cosines.at("L")[i][j] == doctest::Approx(1.0));
        } else {
          CHECK(report.layer_cosines.at("L")[i][j] == 0.0);
          CHECK(report.mean_cosine[i][j] == 0.0);
        }
      }
    for (const auto& [k, f] : report.sign_conflict_curve) CHECK(f == 0.0);
  }
  SUBCASE("fewer than two adapters") {
    const LoRAAdapter a = dense_adapter(rng, "a");
    CHECK_THROWS_AS(build_report({&a}), ArityError);
  }
  SUBCASE("mismatched layer sets") {
    const LoRAAdapter a = dense_adapter(rng, "a");
    LoRAAdapter b = dense_adapter(rng, "b");
    b.layers.emplace("extra", init_layer(rng, "extra", 4, 4, 1, full_rows(4)));
    CHECK_THROWS_AS(build_report({&a, &b}), CompatibilityError);
  }
}

TEST_CASE("report JSON uses the documented field names") {
  RngState rng(8);
  const LoRAAdapter a = dense_adapter(rng, "a");
  const LoRAAdapter b = dense_adapter(rng, "b");
  const auto doc = nlohmann::json::parse(build_report({&a, &b}).to_json());
  CHECK(doc.at("format") == "blocklora.diagnostics");
  CHECK(doc.at("adapters") == nlohmann::json::array({"a", "b"}));
  CHECK(doc.at("layers").at("L").at("cosine").size() == 2);
  CHECK(doc.at("layers").at("L").at("sign_conflict_curve").at(0).at("k") == 2);
  CHECK(doc.at("sign_conflict_curve").at(0).at("fraction").is_number());
  CHECK(doc.at("mean_cosine").size() == 2);
  CHECK(doc.at("generated_at").get<std::string>().back() == 'Z');
}
