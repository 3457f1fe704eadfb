#include <cmath>

#include "doctest.h"
#include "hwids/hwcost.hpp"
#include "hwids/trees.hpp"
#include "oracles.hpp"

using namespace hwids;
using namespace hwids::trees;

namespace {

dataio::Dataset make(const std::vector<std::vector<double>>& rows, const std::vector<int>& labels, int classes) {
  dataio::Dataset d;
  d.features = Matrix(rows.size(), rows.front().size());
  for (std::size_t r = 0; r < rows.size(); ++r) {
    for (std::size_t c = 0; c < rows[r].size(); ++c) d.features(r, c) = rows[r][c];
  }
  for (std::size_t c = 0; c < rows.front().size(); ++c) d.feature_names.push_back("f" + std::to_string(c));
  for (int k = 0; k < classes; ++k) d.class_names.push_back(std::to_string(k));
  d.labels = labels;
  return d;
}

dataio::Dataset xor_data(int copies) {
  std::vector<std::vector<double>> rows;
  std::vector<int> labels;
  for (int i = 0; i < copies; ++i) {
    for (int a = 0; a < 2; ++a) {
      for (int b = 0; b < 2; ++b) {
        rows.push_back({double(a), double(b)});
        labels.push_back(a ^ b);
      }
    }
  }
  return make(rows, labels, 2);
}

double accuracy(const Ensemble& m, const dataio::Dataset& d) {
  std::size_t ok = 0;
  for (std::size_t r = 0; r < d.rows(); ++r) ok += predict_class(m, d.features.row(r)) == d.labels[r];
  return double(ok) / double(d.rows());
}

Tree leaf(float value) {
  Tree t;
  t.nodes.resize(1);
  t.nodes[0].value = value;
  return t;
}

/// Full depth-2 tree on feature 0 / feature 1 with leaf values 0..3.
Tree perfect_depth2() {
  Tree t;
  t.nodes.resize(7);
  auto split = [&](int id, int f, float thr, int l, int r) {
    t.nodes[id].is_leaf = false;
    t.nodes[id].feature = f;
    t.nodes[id].threshold = thr;
    t.nodes[id].left = l;
    t.nodes[id].right = r;
  };
  split(0, 0, 0.5f, 1, 2);
  split(1, 1, 0.5f, 3, 4);
  split(2, 1, 0.5f, 5, 6);
  for (int i = 3; i < 7; ++i) t.nodes[i].value = float(i - 3);
  return t;
}

HyperParams params(Family f, int trees, int depth, int min_child) {
  HyperParams hp;
  hp.family = f;
  hp.n_trees = trees;
  hp.max_depth = depth;
  hp.min_child_size = min_child;
  return hp;
}

}  // namespace

TEST_CASE("random forest learns XOR") {
  const auto d = xor_data(10);
  const auto m = train(d, params(Family::RandomForest, 10, 2, 1), 3);
  CHECK(m.trees.size() == 10);
  CHECK(accuracy(m, xor_data(1)) == 1.0);
}

TEST_CASE("single-class data predicts that class") {
  const auto d = make({{0.1}, {0.5}, {0.9}}, {0, 0, 0}, 1);
  for (Family f : {Family::RandomForest, Family::GbdtLeafwise, Family::GbdtLevelwise}) {
    const auto m = train(d, params(f, 3, 3, 1), 1);
    CHECK(predict_class(m, std::vector<double>{0.3}) == 0);
  }
}

TEST_CASE("training is deterministic per seed") {
  const auto s = oracle::tree_dataset(300, 5, 3, 3, 0.05, 12);
  for (Family f : {Family::RandomForest, Family::GbdtLeafwise, Family::GbdtLevelwise}) {
    auto hp = params(f, 5, 4, 3);
    hp.colsample = 0.6;
    hp.subsample = 0.8;
    hp.num_leaves = 8;
    const auto a = train(s.data, hp, 77);
    const auto b = train(s.data, hp, 77);
    CHECK(a == b);
    const auto c = train(s.data, hp, 78);
    CHECK_FALSE(a == c);
  }
}

TEST_CASE("boosting fits a separable 20-point set") {
  std::vector<std::vector<double>> rows;
  std::vector<int> labels;
  for (int i = 0; i < 20; ++i) {
    const double x = i / 19.0;
    const double y = ((i * 7) % 20) / 19.0;
    rows.push_back({x, y});
    labels.push_back(x + 0.3 * y > 0.6 ? 1 : 0);
  }
  const auto d = make(rows, labels, 2);
  for (Family f : {Family::GbdtLevelwise, Family::GbdtLeafwise}) {
    auto hp = params(f, 10, 3, 1);
    hp.num_leaves = 8;
    CHECK(accuracy(train(d, hp, 5), d) == 1.0);
  }
}

TEST_CASE("boosting grows one tree per class per round") {
  const auto s = oracle::tree_dataset(200, 4, 3, 2, 0.0, 2);
  const auto m = train(s.data, params(Family::GbdtLevelwise, 2, 3, 5), 1);
  CHECK(m.trees.size() == 6);
  for (std::size_t t = 0; t < m.trees.size(); ++t) CHECK(m.trees[t].class_tag == int(t % 3));
}

TEST_CASE("leaf-wise growth respects num_leaves") {
  const auto s = oracle::tree_dataset(800, 6, 4, 4, 0.1, 3);
  auto hp = params(Family::GbdtLeafwise, 5, 30, 5);
  hp.num_leaves = 8;
  const auto m = train(s.data, hp, 9);
  for (const auto& t : m.trees) CHECK(t.leaf_count() <= 8);
}

TEST_CASE("depth and leaf support limits hold") {
  const auto s = oracle::tree_dataset(600, 6, 4, 4, 0.1, 4);
  for (Family f : {Family::RandomForest, Family::GbdtLeafwise, Family::GbdtLevelwise}) {
    auto hp = params(f, 6, 5, 20);
    hp.num_leaves = 16;
    const auto m = train(s.data, hp, 4);
    for (const auto& t : m.trees) {
      CHECK(t.depth() <= 5);
      for (const auto& n : t.nodes) {
        if (n.is_leaf) CHECK(n.support >= 20.0);
      }
    }
  }
}

TEST_CASE("boosting log-loss does not increase across rounds") {
  const auto s = oracle::tree_dataset(500, 5, 3, 3, 0.1, 5);
  for (Family f : {Family::GbdtLeafwise, Family::GbdtLevelwise}) {
    auto hp = params(f, 15, 4, 5);
    hp.num_leaves = 8;
    const auto m = train(s.data, hp, 1);
    double prev = gbdt_log_loss(m, s.data, 0);
    CHECK(prev == doctest::Approx(std::log(3.0)));
    for (int r = 1; r <= 15; ++r) {
      const double cur = gbdt_log_loss(m, s.data, r);
      CHECK(cur <= prev + 1e-12);
      prev = cur;
    }
  }
}

TEST_CASE("split ties go to the lowest feature index") {
  // Features 0 and 1 are identical, so both give the same best split.
  const auto d = make({{0.1, 0.1}, {0.2, 0.2}, {0.8, 0.8}, {0.9, 0.9}}, {0, 0, 1, 1}, 2);
  const auto m = train(d, params(Family::RandomForest, 1, 1, 1), 0);
  // Bootstrap could still drop rows, so use boosting without subsampling too.
  const auto g = train(d, params(Family::GbdtLevelwise, 1, 1, 1), 0);
  for (const auto& t : g.trees) {
    REQUIRE_FALSE(t.nodes[0].is_leaf);
    CHECK(t.nodes[0].feature == 0);
  }
  if (!m.trees[0].nodes[0].is_leaf) CHECK(m.trees[0].nodes[0].feature == 0);
}

TEST_CASE("forest vote shares") {
  Ensemble m;
  m.family = Family::RandomForest;
  m.n_classes = 4;
  m.n_features = 1;
  m.trees = {leaf(3)};
  const std::vector<double> x{0.0};
  CHECK(predict_ensemble(m, x) == std::vector<double>{0, 0, 0, 1});

  m.n_classes = 2;
  m.trees = {leaf(0), leaf(0), leaf(1)};
  const auto p = predict_ensemble(m, x);
  CHECK(p[0] == doctest::Approx(2.0 / 3.0));
  CHECK(p[1] == doctest::Approx(1.0 / 3.0));
}

TEST_CASE("boosting with zero leaves is uniform") {
  Ensemble m;
  m.family = Family::GbdtLevelwise;
  m.n_classes = 3;
  m.n_features = 1;
  for (int c = 0; c < 3; ++c) {
    auto t = leaf(0);
    t.class_tag = c;
    m.trees.push_back(t);
  }
  for (double v : predict_ensemble(m, std::vector<double>{0.5})) CHECK(v == doctest::Approx(1.0 / 3.0));
}

TEST_CASE("comparison counts") {
  Ensemble m;
  m.family = Family::RandomForest;
  m.n_classes = 4;
  m.n_features = 2;
  m.trees = {leaf(1)};
  CHECK(count_comparisons(m, std::vector<double>{0, 0}) == 0);
  m.trees = {perfect_depth2()};
  CHECK(count_comparisons(m, std::vector<double>{0.7, 0.2}) == 2);
  CHECK(predict_class(m, std::vector<double>{0.7, 0.2}) == 2);
  CHECK(m.trees[0].depth() == 2);
  CHECK(m.trees[0].leaf_count() == 4);
}

TEST_CASE("comparisons never exceed the Ops estimate") {
  Rng rng(21);
  for (int e = 0; e < 20; ++e) {
    const auto m = oracle::random_ensemble(rng, 10, 6, 5, 3);
    const auto ops = hwcost::profile_tree_ensemble(m).compute;
    std::vector<double> x(5);
    for (int i = 0; i < 200; ++i) {
      for (auto& v : x) v = uniform01(rng);
      CHECK(static_cast<std::uint64_t>(count_comparisons(m, x)) <= ops);
    }
  }
}

TEST_CASE("thresholds route exactly like the stored float") {
  // Adjacent float values: the split must still separate both rows.
  const auto d = make({{1.0}, {1.0000001}}, {0, 1}, 2);
  const auto m = train(d, params(Family::GbdtLevelwise, 3, 1, 1), 0);
  CHECK(accuracy(m, d) == 1.0);
}

TEST_CASE("keep_going stops training and marks the ensemble") {
  const auto s = oracle::tree_dataset(200, 4, 2, 2, 0.0, 6);
  TrainControl control;
  control.keep_going = [](const Ensemble& e) { return e.trees.size() < 3; };
  const auto m = train(s.data, params(Family::RandomForest, 10, 3, 1), 1, control);
  CHECK(m.truncated);
  CHECK(m.trees.size() == 3);
}

TEST_CASE("hyperparameter validation") {
  auto hp = params(Family::RandomForest, -1, 3, 1);
  CHECK_THROWS_AS(hp.validate(), ConfigError);
  hp = params(Family::RandomForest, 2, 3, 0);
  CHECK_THROWS_AS(hp.validate(), ConfigError);
  hp = params(Family::RandomForest, 2, 3, 1);
  hp.colsample = 0.0;
  CHECK_THROWS_AS(hp.validate(), ConfigError);
  CHECK_THROWS_AS(family_from_string("xgb"), ConfigError);
  CHECK(family_from_string(to_string(Family::GbdtLeafwise)) == Family::GbdtLeafwise);
}

TEST_CASE("hyperparameter JSON round trip") {
  auto hp = params(Family::GbdtLeafwise, 50, 10, 20);
  hp.num_leaves = 32;
  hp.colsample = 0.8;
  const nlohmann::json j = hp;
  CHECK(j.get<HyperParams>() == hp);
}
