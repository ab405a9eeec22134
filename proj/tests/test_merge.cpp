#include <doctest.h>

#include <chrono>
#include <memory>

#include "blocklora/adapter.hpp"
#include "blocklora/block_allocation.hpp"
#include "blocklora/errors.hpp"
#include "blocklora/merge.hpp"
#include "blocklora/rng.hpp"
#include "oracles.hpp"

using namespace blocklora;

namespace {

using Shared = std::shared_ptr<const LoRAAdapter>;

// Adapter on two layers ("up" 30x6, "down" 15x12) with random B rows inside
// the given blocks.
Shared make_adapter(RngState& rng, const std::string& name, const RowBlock& up, const RowBlock& down,
                    const std::string& signature = "sig") {
  auto adapter = std::make_shared<LoRAAdapter>();
  adapter->concept_name = name;
  adapter->base_signature = signature;
  for (const auto& [id, m, n, block] :
       {std::tuple{std::string("up"), 30, 6, up}, std::tuple{std::string("down"), 15, 12, down}}) {
    LoRALayer layer = init_layer(rng, id, m, n, 2, block);
    for (std::size_t p : layer.row_block)
      for (double& v : layer.b.row(p)) v = rng.normal();
    adapter->layers.emplace(id, std::move(layer));
  }
  return adapter;
}

Shared negated(const LoRAAdapter& source) {
  auto copy = std::make_shared<LoRAAdapter>(source);
  copy->concept_name = source.concept_name + "-neg";
  for (auto& [id, layer] : copy->layers) layer.b = scale(layer.b, -1.0);
  return copy;
}

std::vector<Shared> disjoint_collection(RngState& rng, std::size_t count) {
  BlockAllocation alloc(count);
  alloc.add_layer("up", 30);
  alloc.add_layer("down", 15);
  std::vector<Shared> out;
  for (std::size_t i = 0; i < count; ++i) {
    const auto blocks = alloc.allocate_slot(i);
    out.push_back(make_adapter(rng, "c" + std::to_string(i), blocks.at("up"), blocks.at("down")));
  }
  return out;
}

double relative_gap(const Matrix& a, const Matrix& b) {
  return frobenius_norm(subtract(a, b)) / std::max(frobenius_norm(a), 1e-300);
}

}  // namespace

TEST_CASE("single adapter with alpha 1 reproduces its delta exactly") {
  RngState rng(1);
  const Shared a = make_adapter(rng, "a", full_rows(30), full_rows(15));
  const MergedModel merged = merge_weighted(MergeSpec::uniform({a}));
  for (const auto& [id, layer] : a->layers) CHECK(merged.layers.at(id) == delta_weight(layer));
  REQUIRE(merged.provenance.size() == 1);
  CHECK(merged.provenance[0].alpha == 1.0);
  CHECK(merged.provenance[0].row_blocks.at("up") == full_rows(30));
  CHECK(merged.base_signature == "sig");
}

TEST_CASE("opposite adapters cancel") {
  RngState rng(2);
  const Shared a = make_adapter(rng, "a", full_rows(30), full_rows(15));
  const MergedModel merged = merge_weighted(MergeSpec::weighted({a, negated(*a)}, {0.5, 0.5}));
  CHECK(merged.layers.at("up") == Matrix::zeros(30, 6));
  CHECK(merged.layers.at("down") == Matrix::zeros(15, 12));
}

TEST_CASE("three blockwise adapters: rows in each block equal a third of that delta") {
  RngState rng(3);
  const auto adapters = disjoint_collection(rng, 3);
  const MergedModel merged = merge_weighted(MergeSpec::uniform(adapters));
  for (const auto& adapter : adapters) {
    for (const auto& [id, layer] : adapter->layers) {
      const Matrix expected = scale(delta_weight(layer), 1.0 / 3.0);
      for (std::size_t p : layer.row_block)
        for (std::size_t q = 0; q < expected.cols(); ++q) CHECK(merged.layers.at(id)(p, q) == expected(p, q));
    }
  }
}

TEST_CASE("merge coefficient validation") {
  RngState rng(4);
  const auto adapters = disjoint_collection(rng, 2);
  CHECK_THROWS_AS(merge_weighted(MergeSpec::weighted(adapters, {0.5, 0.6})), ConstraintError);
  CHECK_THROWS_AS(merge_weighted(MergeSpec::weighted(adapters, {1.5, -0.5})), ConstraintError);
  CHECK_THROWS_AS(MergeSpec::weighted(adapters, {1.0}), ConstraintError);
  CHECK_THROWS_AS(merge_weighted(MergeSpec{}), ArityError);
  CHECK_NOTHROW(merge_weighted(MergeSpec::weighted(adapters, {0.5, 0.5 + 5e-10})));

  const MergedModel renormalized =
      merge_weighted(MergeSpec::weighted(adapters, {1.0, 3.0}, Normalization::renormalize));
  CHECK(renormalized.provenance[0].alpha == doctest::Approx(0.25));
  CHECK(renormalized.provenance[1].alpha == doctest::Approx(0.75));
}

TEST_CASE("merge rejects incompatible adapters") {
  RngState rng(5);
  const Shared a = make_adapter(rng, "a", full_rows(30), full_rows(15));
  const Shared other_base = make_adapter(rng, "b", full_rows(30), full_rows(15), "other");
  CHECK_THROWS_AS(merge_weighted(MergeSpec::uniform({a, other_base})), CompatibilityError);
  CHECK_THROWS_AS(merge_weighted(MergeSpec::uniform({a}), "different"), CompatibilityError);

  auto missing_layer = std::make_shared<LoRAAdapter>(*a);
  missing_layer->layers.erase("down");
  CHECK_THROWS_AS(merge_weighted(MergeSpec::uniform({a, missing_layer})), CompatibilityError);

  auto reshaped = std::make_shared<LoRAAdapter>(*a);
  reshaped->layers.at("up") = init_layer(rng, "up", 30, 8, 2, full_rows(30));
  CHECK_THROWS_AS(merge_weighted(MergeSpec::uniform({a, reshaped})), CompatibilityError);
}

TEST_CASE("merge is invariant to entry order") {
  RngState rng(6);
  SUBCASE("disjoint: bit-exact") {
    const auto adapters = disjoint_collection(rng, 5);
    const std::vector<double> alphas{0.1, 0.2, 0.3, 0.25, 0.15};
    const MergedModel forward = merge_weighted(MergeSpec::weighted(adapters, alphas));
    std::vector<Shared> reversed(adapters.rbegin(), adapters.rend());
    const MergedModel backward =
        merge_weighted(MergeSpec::weighted(reversed, std::vector<double>(alphas.rbegin(), alphas.rend())));
    CHECK(forward.layers == backward.layers);
  }
  SUBCASE("dense: within 1e-12") {
    std::vector<Shared> adapters;
    for (int i = 0; i < 5; ++i) adapters.push_back(make_adapter(rng, "d" + std::to_string(i), full_rows(30), full_rows(15)));
    const MergedModel forward = merge_weighted(MergeSpec::uniform(adapters));
    std::vector<Shared> shuffled{adapters[3], adapters[0], adapters[4], adapters[1], adapters[2]};
    const MergedModel other = merge_weighted(MergeSpec::uniform(shuffled));
    for (const auto& [id, m] : forward.layers) CHECK(relative_gap(m, other.layers.at(id)) <= 1e-12);
  }
}

TEST_CASE("merge is linear in the coefficients") {
  RngState rng(7);
  std::vector<Shared> adapters;
  for (int i = 0; i < 3; ++i) adapters.push_back(make_adapter(rng, "d" + std::to_string(i), full_rows(30), full_rows(15)));
  const std::vector<double> alpha{0.2, 0.3, 0.5};
  const std::vector<double> beta{0.6, 0.1, 0.3};
  std::vector<double> sum(3);
  for (int i = 0; i < 3; ++i) sum[i] = (alpha[i] + beta[i]) / 2.0;
  const MergedModel ma = merge_weighted(MergeSpec::weighted(adapters, alpha));
  const MergedModel mb = merge_weighted(MergeSpec::weighted(adapters, beta));
  const MergedModel ms = merge_weighted(MergeSpec::weighted(adapters, sum));
  for (const auto& [id, m] : ms.layers) {
    const Matrix combined = scale(add(ma.layers.at(id), mb.layers.at(id)), 0.5);
    CHECK(relative_gap(m, combined) <= 1e-12);
  }
}

TEST_CASE("validate_disjointness") {
  RngState rng(8);
  SUBCASE("adapters from one allocation") {
    const auto adapters = disjoint_collection(rng, 3);
    CHECK(validate_disjointness(MergeSpec::uniform(adapters)).empty());
  }
  SUBCASE("shared row 5") {
    const Shared a = make_adapter(rng, "a", {4, 5}, {0});
    const Shared b = make_adapter(rng, "b", {5, 6}, {1});
    const auto report = validate_disjointness(MergeSpec::uniform({a, b}));
    REQUIRE(report.size() == 1);
    CHECK(report[0] == RowOverlap{"up", 0, 1, {5}});
  }
  SUBCASE("15 adapters of a K=15 allocation agree with brute force") {
    BlockAllocation alloc(15);
    alloc.add_layer("up", 64);
    alloc.add_layer("down", 16);
    std::vector<Shared> adapters;
    std::map<std::string, std::vector<std::vector<std::size_t>>> per_layer;
    for (std::size_t i = 0; i < 15; ++i) {
      const auto blocks = alloc.allocate_slot(i);
      auto adapter = std::make_shared<LoRAAdapter>();
      adapter->concept_name = "c" + std::to_string(i);
      adapter->layers.emplace("up", init_layer(rng, "up", 64, 16, 2, blocks.at("up")));
      adapter->layers.emplace("down", init_layer(rng, "down", 16, 64, 2, blocks.at("down")));
      for (const auto& [id, block] : blocks) per_layer[id].push_back(block);
      adapters.push_back(adapter);
    }
    CHECK(validate_disjointness(MergeSpec::uniform(adapters)).empty());
    for (const auto& [id, sets] : per_layer) CHECK(oracle::intersecting_pairs(sets).empty());
  }
  SUBCASE("standard adapters overlap everywhere") {
    const Shared a = make_adapter(rng, "a", full_rows(30), full_rows(15));
    const Shared b = make_adapter(rng, "b", full_rows(30), full_rows(15));
    CHECK(validate_disjointness(MergeSpec::uniform({a, b})).size() == 2);
  }
}

TEST_CASE("extract_concept_slice") {
  RngState rng(9);
  const auto adapters = disjoint_collection(rng, 15);
  const MergedModel merged = merge_weighted(MergeSpec::uniform(adapters));
  for (const auto& adapter : adapters) {
    const auto slice = extract_concept_slice(merged, adapter->concept_name);
    for (const auto& [id, layer] : adapter->layers) {
      CHECK(slice.at(id) == scale(delta_weight(layer), 1.0 / 15.0));
    }
  }
  CHECK_THROWS_AS(extract_concept_slice(merged, "unknown"), LookupError);

  const Shared a = make_adapter(rng, "a", {0, 1}, {0});
  const Shared b = make_adapter(rng, "b", {1, 2}, {1});
  const MergedModel overlapping = merge_weighted(MergeSpec::uniform({a, b}));
  CHECK_THROWS_AS(extract_concept_slice(overlapping, "a"), PreconditionError);
}

TEST_CASE("slice complement rows are zero") {
  RngState rng(10);
  const auto adapters = disjoint_collection(rng, 3);
  const MergedModel merged = merge_weighted(MergeSpec::uniform(adapters));
  const auto slice = extract_concept_slice(merged, "c1");
  const RowBlock& rows = adapters[1]->layer("up").row_block;
  for (std::size_t p = 0; p < 30; ++p) {
    if (std::find(rows.begin(), rows.end(), p) != rows.end()) continue;
    for (std::size_t q = 0; q < 6; ++q) CHECK(slice.at("up")(p, q) == 0.0);
  }
}

TEST_CASE("merging 15 adapters over ~1e6 residual parameters is fast") {
  RngState rng(11);
  std::vector<Shared> adapters;
  BlockAllocation alloc(15);
  alloc.add_layer("big1", 720);
  alloc.add_layer("big2", 720);
  for (std::size_t i = 0; i < 15; ++i) {
    const auto blocks = alloc.allocate_slot(i);
    auto adapter = std::make_shared<LoRAAdapter>();
    adapter->concept_name = "c" + std::to_string(i);
    for (const auto& [id, block] : blocks) {
      LoRALayer layer = init_layer(rng, id, 720, 690, 8, block);
      for (std::size_t p : layer.row_block)
        for (double& v : layer.b.row(p)) v = rng.normal();
      adapter->layers.emplace(id, std::move(layer));
    }
    adapters.push_back(adapter);
  }
  const auto start = std::chrono::steady_clock::now();
  const MergedModel merged = merge_weighted(MergeSpec::uniform(adapters));
  const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  CHECK(merged.layers.at("big1").size() + merged.layers.at("big2").size() <= 1'000'000);
  CHECK(seconds < 1.0);
}
