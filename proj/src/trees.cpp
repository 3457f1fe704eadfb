#include "hwids/trees.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <limits>
#include <numeric>

namespace hwids::trees {

std::string to_string(Family f) {
  switch (f) {
    case Family::RandomForest: return "rf";
    case Family::GbdtLeafwise: return "gbdt-leafwise";
    case Family::GbdtLevelwise: return "gbdt-levelwise";
  }
  return "?";
}

Family family_from_string(const std::string& s) {
  if (s == "rf" || s == "random-forest") return Family::RandomForest;
  if (s == "gbdt-leafwise" || s == "lightgbm") return Family::GbdtLeafwise;
  if (s == "gbdt-levelwise" || s == "xgboost") return Family::GbdtLevelwise;
  throw ConfigError("unknown tree family '" + s + "'");
}

void HyperParams::validate() const {
  if (n_trees < 0) throw ConfigError("n_trees must be >= 0");
  if (max_depth < 0) throw ConfigError("max_depth must be >= 0");
  if (min_child_size < 1) throw ConfigError("min_child_size must be >= 1");
  if (!(colsample > 0.0 && colsample <= 1.0)) throw ConfigError("colsample must lie in (0, 1]");
  if (!(subsample > 0.0 && subsample <= 1.0)) throw ConfigError("subsample must lie in (0, 1]");
  if (family == Family::GbdtLeafwise && num_leaves < 2) throw ConfigError("num_leaves must be >= 2");
  if (family != Family::RandomForest && !(learning_rate > 0.0)) throw ConfigError("learning_rate must be positive");
  if (l2_reg < 0.0) throw ConfigError("l2_reg must be >= 0");
}

void to_json(nlohmann::json& j, const HyperParams& hp) {
  j = nlohmann::json{{"family", to_string(hp.family)},
                     {"n_trees", hp.n_trees},
                     {"max_depth", hp.max_depth},
                     {"min_child_size", hp.min_child_size},
                     {"colsample", hp.colsample},
                     {"subsample", hp.subsample}};
  if (hp.family == Family::GbdtLeafwise) j["num_leaves"] = hp.num_leaves;
  if (hp.family != Family::RandomForest) {
    j["learning_rate"] = hp.learning_rate;
    j["l2_reg"] = hp.l2_reg;
  }
}

void from_json(const nlohmann::json& j, HyperParams& hp) {
  hp = HyperParams{};
  hp.family = family_from_string(j.at("family").get<std::string>());
  hp.n_trees = j.value("n_trees", hp.n_trees);
  hp.max_depth = j.value("max_depth", hp.max_depth);
  hp.min_child_size = j.value("min_child_size", hp.min_child_size);
  hp.colsample = j.value("colsample", hp.colsample);
  hp.subsample = j.value("subsample", hp.subsample);
  hp.num_leaves = j.value("num_leaves", hp.num_leaves);
  hp.learning_rate = j.value("learning_rate", hp.learning_rate);
  hp.l2_reg = j.value("l2_reg", hp.l2_reg);
}

int Tree::depth() const {
  if (nodes.empty()) return 0;
  int best = 0;
  std::vector<std::pair<int, int>> stack{{0, 0}};
  while (!stack.empty()) {
    auto [id, d] = stack.back();
    stack.pop_back();
    const Node& n = nodes[static_cast<std::size_t>(id)];
    if (n.is_leaf) {
      best = std::max(best, d);
    } else {
      stack.emplace_back(n.left, d + 1);
      stack.emplace_back(n.right, d + 1);
    }
  }
  return best;
}

int Tree::leaf_count() const {
  return static_cast<int>(std::count_if(nodes.begin(), nodes.end(), [](const Node& n) { return n.is_leaf; }));
}

std::pair<const Node*, int> Tree::route(std::span<const double> x) const {
  const Node* n = &nodes.front();
  int comparisons = 0;
  while (!n->is_leaf) {
    ++comparisons;
    const bool left = static_cast<float>(x[static_cast<std::size_t>(n->feature)]) <= n->threshold;
    n = &nodes[static_cast<std::size_t>(left ? n->left : n->right)];
  }
  return {n, comparisons};
}

int Ensemble::max_depth() const {
  int d = 0;
  for (const auto& t : trees) d = std::max(d, t.depth());
  return d;
}

std::size_t Ensemble::node_count() const {
  std::size_t n = 0;
  for (const auto& t : trees) n += t.nodes.size();
  return n;
}

namespace {

// Column-major float copy of the training features plus, per feature, all
// row ids ordered by (value, row).
struct ColumnStore {
  std::size_t n_rows = 0;
  std::size_t n_features = 0;
  std::vector<float> values;
  std::vector<std::vector<std::uint32_t>> presorted;

  explicit ColumnStore(const dataio::Dataset& d) : n_rows(d.rows()), n_features(d.dim()) {
    values.resize(n_rows * n_features);
    for (std::size_t r = 0; r < n_rows; ++r) {
      for (std::size_t f = 0; f < n_features; ++f) values[f * n_rows + r] = static_cast<float>(d.features(r, f));
    }
    presorted.resize(n_features);
    for (std::size_t f = 0; f < n_features; ++f) {
      auto& order = presorted[f];
      order.resize(n_rows);
      std::iota(order.begin(), order.end(), 0u);
      const float* col = &values[f * n_rows];
      std::stable_sort(order.begin(), order.end(), [col](std::uint32_t a, std::uint32_t b) { return col[a] < col[b]; });
    }
  }

  float at(std::size_t f, std::size_t r) const { return values[f * n_rows + r]; }
};

struct Split {
  bool valid = false;
  int feature = -1;
  float threshold = 0.0f;
  double gain = -std::numeric_limits<double>::infinity();
};

// Gini criterion over weighted class counts. Sums of squared counts are kept
// incrementally so each scan step is O(1).
struct GiniCriterion {
  std::span<const int> labels;
  int n_classes;

  struct Stats {
    std::vector<double> counts;
    double weight = 0.0;
    double sumsq = 0.0;
  };

  Stats make_stats(std::span<const std::uint32_t> rows, std::span<const double> w) const {
    Stats s;
    s.counts.assign(static_cast<std::size_t>(n_classes), 0.0);
    for (auto r : rows) {
      s.counts[static_cast<std::size_t>(labels[r])] += w[r];
      s.weight += w[r];
    }
    for (double c : s.counts) s.sumsq += c * c;
    return s;
  }

  struct Scanner {
    const GiniCriterion* crit;
    const Stats* total;
    std::vector<double> left;
    double left_w = 0.0, left_sumsq = 0.0, right_sumsq = 0.0;

    Scanner(const GiniCriterion* c, const Stats* t)
        : crit(c), total(t), left(t->counts.size(), 0.0), right_sumsq(t->sumsq) {}

    void move_left(std::uint32_t r, double w) {
      const auto c = static_cast<std::size_t>(crit->labels[r]);
      const double rc = total->counts[c] - left[c];
      left_sumsq += 2.0 * left[c] * w + w * w;
      right_sumsq += -2.0 * rc * w + w * w;
      left[c] += w;
      left_w += w;
    }
    double left_weight() const { return left_w; }
    double gain() const {
      const double right_w = total->weight - left_w;
      return left_sumsq / left_w + right_sumsq / right_w - total->sumsq / total->weight;
    }
  };

  // Impure nodes may split even at zero impurity decrease (XOR-like layouts
  // need a zero-gain first cut).
  bool accept(const Stats& s, const Split& best) const {
    return best.valid && s.sumsq < s.weight * s.weight;
  }

  float leaf_value(const Stats& s) const {
    std::size_t best = 0;
    for (std::size_t c = 1; c < s.counts.size(); ++c) {
      if (s.counts[c] > s.counts[best]) best = c;
    }
    return static_cast<float>(best);
  }
};

// Second-order boosting criterion over gradient/hessian sums.
struct GradientCriterion {
  std::span<const double> grad;
  std::span<const double> hess;
  double l2;
  double learning_rate;

  struct Stats {
    double g = 0.0, h = 0.0, weight = 0.0;
  };

  Stats make_stats(std::span<const std::uint32_t> rows, std::span<const double> w) const {
    Stats s;
    for (auto r : rows) {
      s.g += w[r] * grad[r];
      s.h += w[r] * hess[r];
      s.weight += w[r];
    }
    return s;
  }

  struct Scanner {
    const GradientCriterion* crit;
    const Stats* total;
    double g = 0.0, h = 0.0, w = 0.0;

    Scanner(const GradientCriterion* c, const Stats* t) : crit(c), total(t) {}

    void move_left(std::uint32_t r, double weight) {
      g += weight * crit->grad[r];
      h += weight * crit->hess[r];
      w += weight;
    }
    double left_weight() const { return w; }
    double gain() const {
      const double l = crit->l2;
      const double gr = total->g - g, hr = total->h - h;
      return g * g / (h + l) + gr * gr / (hr + l) - total->g * total->g / (total->h + l);
    }
  };

  bool accept(const Stats&, const Split& best) const { return best.valid && best.gain > 1e-12; }

  float leaf_value(const Stats& s) const { return static_cast<float>(-s.g / (s.h + l2) * learning_rate); }
};

enum class Growth { LevelWise, LeafWise };

struct GrowLimits {
  int max_depth = 0;
  int max_leaves = std::numeric_limits<int>::max();
  double min_child = 1.0;
  Growth growth = Growth::LevelWise;
  // Features examined at each split: a fresh random subset of this size
  // (forest) or the fixed `tree_features` list (boosting).
  std::size_t per_split_features = 0;
  std::vector<std::size_t> tree_features;
};

template <class Criterion>
class Grower {
 public:
  using Stats = typename Criterion::Stats;

  Grower(const ColumnStore& cols, const Criterion& crit, const GrowLimits& limits, Rng& rng)
      : cols_(cols), crit_(crit), limits_(limits), rng_(rng), go_left_(cols.n_rows, 0) {
    // Sorted row lists are only kept for features that can be scanned.
    if (limits.tree_features.empty()) {
      active_.resize(cols.n_features);
      std::iota(active_.begin(), active_.end(), 0);
    } else {
      active_ = limits.tree_features;
    }
  }

  Tree grow(std::span<const double> weights) {
    weights_ = weights;
    Tree tree;
    Pending root;
    root.node = 0;
    root.depth = 0;
    root.sorted.resize(cols_.n_features);
    for (std::size_t f : active_) {
      auto& list = root.sorted[f];
      list.reserve(cols_.n_rows);
      for (auto r : cols_.presorted[f]) {
        if (weights[r] > 0.0) list.push_back(r);
      }
    }
    const auto& any = active_.empty() ? all_rows_with_weight() : root.sorted[active_.front()];
    root.stats = crit_.make_stats(any, weights);
    tree.nodes.push_back(make_leaf(root.stats));

    if (limits_.growth == Growth::LevelWise) {
      grow_level_wise(tree, std::move(root));
    } else {
      grow_leaf_wise(tree, std::move(root));
    }
    return tree;
  }

 private:
  struct Pending {
    int node = 0;
    int depth = 0;
    std::vector<std::vector<std::uint32_t>> sorted;
    Stats stats;
    Split best;
  };

  std::vector<std::uint32_t> all_rows_with_weight() const {
    std::vector<std::uint32_t> rows;
    for (std::size_t r = 0; r < cols_.n_rows; ++r) {
      if (weights_[r] > 0.0) rows.push_back(static_cast<std::uint32_t>(r));
    }
    return rows;
  }

  Node make_leaf(const Stats& s) const {
    Node n;
    n.is_leaf = true;
    n.value = crit_.leaf_value(s);
    n.support = s.weight;
    return n;
  }

  std::vector<std::size_t> candidate_features() {
    if (!limits_.tree_features.empty()) return limits_.tree_features;
    std::vector<std::size_t> all(cols_.n_features);
    std::iota(all.begin(), all.end(), 0);
    const std::size_t m = std::min(limits_.per_split_features, all.size());
    if (m >= all.size()) return all;
    // Partial Fisher-Yates, then ascending order so ties favor the lowest index.
    for (std::size_t i = 0; i < m; ++i) {
      const auto j = static_cast<std::size_t>(uniform_int(rng_, static_cast<std::int64_t>(i),
                                                          static_cast<std::int64_t>(all.size()) - 1));
      std::swap(all[i], all[j]);
    }
    all.resize(m);
    std::sort(all.begin(), all.end());
    return all;
  }

  void find_split(Pending& p) {
    p.best = Split{};
    if (p.depth >= limits_.max_depth) return;
    if (p.stats.weight < 2.0 * limits_.min_child) return;
    for (std::size_t f : candidate_features()) {
      const auto& list = p.sorted[f];
      typename Criterion::Scanner scan(&crit_, &p.stats);
      for (std::size_t i = 0; i + 1 < list.size(); ++i) {
        const auto r = list[i];
        scan.move_left(r, weights_[r]);
        const float v = cols_.at(f, r);
        const float next = cols_.at(f, list[i + 1]);
        if (!(v < next)) continue;
        const double lw = scan.left_weight();
        if (lw < limits_.min_child || p.stats.weight - lw < limits_.min_child) continue;
        const double gain = scan.gain();
        if (gain > p.best.gain) {
          float thr = v + (next - v) * 0.5f;
          if (!(thr < next)) thr = v;
          p.best = Split{true, static_cast<int>(f), thr, gain};
        }
      }
    }
    if (!crit_.accept(p.stats, p.best)) p.best.valid = false;
  }

  // Turns p's node into an internal node and returns its two children.
  std::pair<Pending, Pending> split(Tree& tree, Pending& p) {
    const auto f = static_cast<std::size_t>(p.best.feature);
    std::size_t n_left = 0;
    for (auto r : p.sorted[f]) {
      go_left_[r] = cols_.at(f, r) <= p.best.threshold ? 1 : 0;
      n_left += go_left_[r];
    }
    const std::size_t n_right = p.sorted[f].size() - n_left;

    Pending left, right;
    left.depth = right.depth = p.depth + 1;
    left.sorted.resize(cols_.n_features);
    right.sorted.resize(cols_.n_features);
    for (std::size_t g : active_) {
      auto& src = p.sorted[g];
      left.sorted[g].reserve(n_left);
      right.sorted[g].reserve(n_right);
      for (auto r : src) (go_left_[r] ? left.sorted[g] : right.sorted[g]).push_back(r);
      std::vector<std::uint32_t>().swap(src);
    }
    left.stats = crit_.make_stats(left.sorted[f], weights_);
    right.stats = crit_.make_stats(right.sorted[f], weights_);

    left.node = static_cast<int>(tree.nodes.size());
    right.node = left.node + 1;
    tree.nodes.push_back(make_leaf(left.stats));
    tree.nodes.push_back(make_leaf(right.stats));
    Node& parent = tree.nodes[static_cast<std::size_t>(p.node)];
    parent.is_leaf = false;
    parent.feature = p.best.feature;
    parent.threshold = p.best.threshold;
    parent.left = left.node;
    parent.right = right.node;
    return {std::move(left), std::move(right)};
  }

  void grow_level_wise(Tree& tree, Pending root) {
    std::deque<Pending> queue;
    queue.push_back(std::move(root));
    while (!queue.empty()) {
      Pending p = std::move(queue.front());
      queue.pop_front();
      find_split(p);
      if (!p.best.valid) continue;
      auto [l, r] = split(tree, p);
      queue.push_back(std::move(l));
      queue.push_back(std::move(r));
    }
  }

  void grow_leaf_wise(Tree& tree, Pending root) {
    std::vector<Pending> open;
    find_split(root);
    open.push_back(std::move(root));
    int leaves = 1;
    while (leaves < limits_.max_leaves) {
      std::size_t pick = open.size();
      for (std::size_t i = 0; i < open.size(); ++i) {
        if (!open[i].best.valid) continue;
        if (pick == open.size() || open[i].best.gain > open[pick].best.gain ||
            (open[i].best.gain == open[pick].best.gain && open[i].node < open[pick].node)) {
          pick = i;
        }
      }
      if (pick == open.size()) break;
      Pending p = std::move(open[pick]);
      open.erase(open.begin() + static_cast<std::ptrdiff_t>(pick));
      auto [l, r] = split(tree, p);
      find_split(l);
      find_split(r);
      open.push_back(std::move(l));
      open.push_back(std::move(r));
      ++leaves;
    }
  }

  const ColumnStore& cols_;
  const Criterion& crit_;
  const GrowLimits& limits_;
  Rng& rng_;
  std::span<const double> weights_;
  std::vector<std::uint8_t> go_left_;
  std::vector<std::size_t> active_;
};

void check_training_set(const dataio::Dataset& d) {
  if (d.rows() == 0) throw DataError("training set is empty");
  if (d.n_classes() < 1) throw DataError("training set has no classes");
  if (d.rows() > std::numeric_limits<std::uint32_t>::max()) throw DataError("training set too large");
  for (int y : d.labels) {
    if (y < 0 || y >= d.n_classes()) throw DataError("training label out of range");
  }
}

std::size_t ceil_fraction(double frac, std::size_t n) {
  return std::max<std::size_t>(1, static_cast<std::size_t>(std::ceil(frac * static_cast<double>(n) - 1e-9)));
}

std::size_t round_fraction(double frac, std::size_t n) {
  return std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(frac * static_cast<double>(n))));
}

void softmax_inplace(std::span<double> z) {
  const double m = *std::max_element(z.begin(), z.end());
  double sum = 0.0;
  for (double& v : z) {
    v = std::exp(v - m);
    sum += v;
  }
  for (double& v : z) v /= sum;
}

}  // namespace

Ensemble train_random_forest(const dataio::Dataset& train, const HyperParams& hp, std::uint64_t seed,
                             const TrainControl& control) {
  if (hp.family != Family::RandomForest) throw ConfigError("train_random_forest requires the rf family");
  hp.validate();
  check_training_set(train);

  const ColumnStore cols(train);
  Ensemble m;
  m.family = Family::RandomForest;
  m.n_classes = train.n_classes();
  m.n_features = static_cast<int>(train.dim());

  GiniCriterion crit{train.labels, train.n_classes()};
  GrowLimits limits;
  limits.max_depth = hp.max_depth;
  limits.min_child = hp.min_child_size;
  limits.growth = Growth::LevelWise;
  limits.per_split_features = ceil_fraction(hp.colsample, train.dim());

  const std::size_t draws = round_fraction(hp.subsample, train.rows());
  std::vector<double> weights(train.rows());
  for (int t = 0; t < hp.n_trees; ++t) {
    Rng rng(derive_seed(seed, {static_cast<std::uint64_t>(t)}));
    std::fill(weights.begin(), weights.end(), 0.0);
    for (std::size_t i = 0; i < draws; ++i) {
      weights[static_cast<std::size_t>(uniform_int(rng, 0, static_cast<std::int64_t>(train.rows()) - 1))] += 1.0;
    }
    Grower<GiniCriterion> grower(cols, crit, limits, rng);
    m.trees.push_back(grower.grow(weights));
    if (control.keep_going && t + 1 < hp.n_trees && !control.keep_going(m)) {
      m.truncated = true;
      break;
    }
  }
  return m;
}

Ensemble train_gbdt(const dataio::Dataset& train, const HyperParams& hp, std::uint64_t seed,
                    const TrainControl& control) {
  if (hp.family == Family::RandomForest) throw ConfigError("train_gbdt requires a boosting family");
  hp.validate();
  check_training_set(train);

  const ColumnStore cols(train);
  const std::size_t n = train.rows();
  const int k = train.n_classes();
  const auto ku = static_cast<std::size_t>(k);
  Ensemble m;
  m.family = hp.family;
  m.n_classes = k;
  m.n_features = static_cast<int>(train.dim());

  // Diagonal softmax Hessian scaled by K/(K-1), as in common multiclass boosters.
  const double hess_scale = k > 1 ? static_cast<double>(k) / static_cast<double>(k - 1) : 1.0;
  std::vector<double> scores(n * ku, 0.0), probs(n * ku), grad(n), hess(n), weights(n);
  const std::size_t sample_rows = round_fraction(hp.subsample, n);
  const std::size_t tree_cols = ceil_fraction(hp.colsample, train.dim());

  GrowLimits limits;
  limits.max_depth = hp.max_depth;
  limits.min_child = hp.min_child_size;
  limits.growth = hp.family == Family::GbdtLeafwise ? Growth::LeafWise : Growth::LevelWise;
  if (hp.family == Family::GbdtLeafwise) limits.max_leaves = hp.num_leaves;

  std::vector<std::size_t> row_order(n), feature_order(train.dim());
  for (int round = 0; round < hp.n_trees; ++round) {
    for (std::size_t r = 0; r < n; ++r) {
      std::copy_n(&scores[r * ku], ku, &probs[r * ku]);
      softmax_inplace(std::span(&probs[r * ku], ku));
    }
    for (int c = 0; c < k; ++c) {
      const auto cu = static_cast<std::size_t>(c);
      Rng rng(derive_seed(seed, {static_cast<std::uint64_t>(round), cu}));
      for (std::size_t r = 0; r < n; ++r) {
        const double p = probs[r * ku + cu];
        grad[r] = p - (train.labels[r] == c ? 1.0 : 0.0);
        hess[r] = std::max(hess_scale * p * (1.0 - p), 1e-16);
      }

      // Per-tree row sample without replacement.
      if (sample_rows >= n) {
        std::fill(weights.begin(), weights.end(), 1.0);
      } else {
        std::iota(row_order.begin(), row_order.end(), 0);
        std::fill(weights.begin(), weights.end(), 0.0);
        for (std::size_t i = 0; i < sample_rows; ++i) {
          const auto j = static_cast<std::size_t>(
              uniform_int(rng, static_cast<std::int64_t>(i), static_cast<std::int64_t>(n) - 1));
          std::swap(row_order[i], row_order[j]);
          weights[row_order[i]] = 1.0;
        }
      }

      // Per-tree column sample.
      std::iota(feature_order.begin(), feature_order.end(), 0);
      for (std::size_t i = 0; i < tree_cols; ++i) {
        const auto j = static_cast<std::size_t>(
            uniform_int(rng, static_cast<std::int64_t>(i), static_cast<std::int64_t>(feature_order.size()) - 1));
        std::swap(feature_order[i], feature_order[j]);
      }
      limits.tree_features.assign(feature_order.begin(), feature_order.begin() + static_cast<std::ptrdiff_t>(tree_cols));
      std::sort(limits.tree_features.begin(), limits.tree_features.end());

      GradientCriterion crit{grad, hess, hp.l2_reg, hp.learning_rate};
      Grower<GradientCriterion> grower(cols, crit, limits, rng);
      Tree tree = grower.grow(weights);
      tree.class_tag = c;
      for (std::size_t r = 0; r < n; ++r) {
        scores[r * ku + cu] += tree.route(train.features.row(r)).first->value;
      }
      m.trees.push_back(std::move(tree));
    }
    if (control.keep_going && round + 1 < hp.n_trees && !control.keep_going(m)) {
      m.truncated = true;
      break;
    }
  }
  return m;
}

Ensemble train(const dataio::Dataset& data, const HyperParams& hp, std::uint64_t seed, const TrainControl& control) {
  return hp.family == Family::RandomForest ? train_random_forest(data, hp, seed, control)
                                           : train_gbdt(data, hp, seed, control);
}

std::vector<double> predict_ensemble(const Ensemble& m, std::span<const double> x) {
  if (x.size() != static_cast<std::size_t>(m.n_features)) {
    throw ShapeError("ensemble expects " + std::to_string(m.n_features) + " features, got " + std::to_string(x.size()));
  }
  const auto k = static_cast<std::size_t>(m.n_classes);
  std::vector<double> out(k, 0.0);
  if (k == 0) return out;
  if (m.family == Family::RandomForest) {
    if (m.trees.empty()) {
      std::fill(out.begin(), out.end(), 1.0 / static_cast<double>(k));
      return out;
    }
    for (const auto& t : m.trees) out[static_cast<std::size_t>(t.route(x).first->value)] += 1.0;
    for (double& v : out) v /= static_cast<double>(m.trees.size());
    return out;
  }
  for (const auto& t : m.trees) out[static_cast<std::size_t>(t.class_tag)] += t.route(x).first->value;
  softmax_inplace(out);
  return out;
}

int predict_class(const Ensemble& m, std::span<const double> x) {
  const auto p = predict_ensemble(m, x);
  return static_cast<int>(std::max_element(p.begin(), p.end()) - p.begin());
}

long long count_comparisons(const Ensemble& m, std::span<const double> x) {
  if (x.size() != static_cast<std::size_t>(m.n_features)) throw ShapeError("count_comparisons: dimension mismatch");
  long long total = 0;
  for (const auto& t : m.trees) total += t.route(x).second;
  return total;
}

double gbdt_log_loss(const Ensemble& m, const dataio::Dataset& data, int rounds) {
  const auto k = static_cast<std::size_t>(m.n_classes);
  const std::size_t used = std::min(m.trees.size(), static_cast<std::size_t>(rounds) * k);
  double loss = 0.0;
  std::vector<double> z(k);
  for (std::size_t r = 0; r < data.rows(); ++r) {
    std::fill(z.begin(), z.end(), 0.0);
    for (std::size_t t = 0; t < used; ++t) {
      const auto& tree = m.trees[t];
      z[static_cast<std::size_t>(tree.class_tag)] += tree.route(data.features.row(r)).first->value;
    }
    softmax_inplace(z);
    loss -= std::log(std::max(z[static_cast<std::size_t>(data.labels[r])], 1e-300));
  }
  return data.rows() ? loss / static_cast<double>(data.rows()) : 0.0;
}

}  // namespace hwids::trees
