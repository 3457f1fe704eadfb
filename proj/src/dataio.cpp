#include "hwids/dataio.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <numeric>
#include <set>
#include <sstream>
#include <unordered_map>
#include <unordered_set>

namespace hwids::dataio {

namespace {

std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  if (s.size() >= 2 && s.front() == '"' && s.back() == '"') s = s.substr(1, s.size() - 2);
  return s;
}

std::vector<std::string_view> split_line(std::string_view line) {
  std::vector<std::string_view> cells;
  std::size_t start = 0;
  for (std::size_t i = 0; i <= line.size(); ++i) {
    if (i == line.size() || line[i] == ',') {
      cells.push_back(trim(line.substr(start, i - start)));
      start = i + 1;
    }
  }
  return cells;
}

bool is_missing(std::string_view cell) { return cell.empty() || cell == "NaN" || cell == "nan"; }

std::optional<double> parse_number(std::string_view cell) {
  double v = 0.0;
  const char* first = cell.data();
  const char* last = cell.data() + cell.size();
  if (first != last && *first == '+') ++first;
  auto [ptr, ec] = std::from_chars(first, last, v);
  if (ec != std::errc() || ptr != last) return std::nullopt;
  return v;
}

bool all_integers(const std::vector<std::string>& names) {
  for (const auto& n : names) {
    if (n.empty()) return false;
    long long v = 0;
    auto [ptr, ec] = std::from_chars(n.data(), n.data() + n.size(), v);
    if (ec != std::errc() || ptr != n.data() + n.size()) return false;
  }
  return true;
}

}  // namespace

std::vector<std::string> sort_class_names(std::vector<std::string> names) {
  if (all_integers(names)) {
    std::sort(names.begin(), names.end(),
              [](const std::string& a, const std::string& b) { return std::stoll(a) < std::stoll(b); });
  } else {
    std::sort(names.begin(), names.end());
  }
  return names;
}

Dataset Dataset::subset(std::span<const std::size_t> indices) const {
  Dataset out;
  out.feature_names = feature_names;
  out.class_names = class_names;
  out.features = Matrix(indices.size(), dim());
  out.labels.reserve(indices.size());
  for (std::size_t i = 0; i < indices.size(); ++i) {
    const auto src = features.row(indices[i]);
    std::copy(src.begin(), src.end(), out.features.row(i).begin());
    out.labels.push_back(labels[indices[i]]);
  }
  return out;
}

std::vector<std::size_t> Dataset::class_counts() const {
  std::vector<std::size_t> counts(class_names.size(), 0);
  for (int y : labels) {
    if (y >= 0 && y < n_classes()) ++counts[static_cast<std::size_t>(y)];
  }
  return counts;
}

void ScalerParams::apply(std::span<const double> raw, std::span<double> out) const {
  if (raw.size() != mins.size() || out.size() != mins.size()) {
    throw ShapeError("scaler expects " + std::to_string(mins.size()) + " features, got " + std::to_string(raw.size()));
  }
  for (std::size_t c = 0; c < raw.size(); ++c) {
    const double range = maxs[c] - mins[c];
    if (!(range > 0.0)) {
      out[c] = 0.0;
      continue;
    }
    out[c] = std::clamp((raw[c] - mins[c]) / range, 0.0, 1.0);
  }
}

std::vector<double> ScalerParams::apply(std::span<const double> raw) const {
  std::vector<double> out(raw.size());
  apply(raw, out);
  return out;
}

void to_json(nlohmann::json& j, const ScalerParams& s) {
  j = nlohmann::json{{"feature_names", s.feature_names}, {"mins", s.mins}, {"maxs", s.maxs}};
}

void from_json(const nlohmann::json& j, ScalerParams& s) {
  j.at("feature_names").get_to(s.feature_names);
  j.at("mins").get_to(s.mins);
  j.at("maxs").get_to(s.maxs);
  if (s.mins.size() != s.feature_names.size() || s.maxs.size() != s.feature_names.size()) {
    throw DataError("scaler parameters: feature_names, mins and maxs must have equal length");
  }
  for (std::size_t c = 0; c < s.mins.size(); ++c) {
    if (s.mins[c] > s.maxs[c]) throw DataError("scaler parameters: min > max for " + s.feature_names[c]);
  }
}

void save_scaler(const ScalerParams& s, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << nlohmann::json(s).dump(2) << '\n';
}

ScalerParams load_scaler(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read " + path.string());
  try {
    return nlohmann::json::parse(in).get<ScalerParams>();
  } catch (const nlohmann::json::exception& e) {
    throw DataError("invalid scaler file " + path.string() + ": " + e.what());
  }
}

std::vector<std::size_t> FoldPlan::test_rows(int f) const {
  std::vector<std::size_t> rows;
  for (std::size_t i = 0; i < assignments.size(); ++i) {
    if (assignments[i] == f) rows.push_back(i);
  }
  return rows;
}

std::vector<std::size_t> FoldPlan::train_rows(int f) const {
  std::vector<std::size_t> rows;
  for (std::size_t i = 0; i < assignments.size(); ++i) {
    if (assignments[i] != f) rows.push_back(i);
  }
  return rows;
}

Dataset parse_csv(std::istream& in, const std::string& label_column, const LoadOptions& options) {
  std::string line;
  if (!std::getline(in, line)) throw DataError("CSV is empty: header row missing");
  if (line.size() >= 3 && static_cast<unsigned char>(line[0]) == 0xEF) line.erase(0, 3);  // UTF-8 BOM

  const auto header = split_line(line);
  std::set<std::string_view> seen;
  std::optional<std::size_t> label_idx;
  Dataset d;
  for (std::size_t c = 0; c < header.size(); ++c) {
    if (!seen.insert(header[c]).second) throw DataError("duplicated column name '" + std::string(header[c]) + "'");
    if (header[c] == label_column) {
      label_idx = c;
    } else {
      d.feature_names.emplace_back(header[c]);
    }
  }
  if (!label_idx) throw DataError("label column '" + label_column + "' not found in header");

  std::vector<double> values;
  std::vector<std::string> raw_labels;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    const auto cells = split_line(line);
    if (cells.size() != header.size()) {
      throw DataError("row " + std::to_string(line_no) + ": expected " + std::to_string(header.size()) +
                      " fields, found " + std::to_string(cells.size()));
    }
    for (std::size_t c = 0; c < cells.size(); ++c) {
      if (c == *label_idx) {
        raw_labels.emplace_back(is_missing(cells[c]) ? std::string() : std::string(cells[c]));
        continue;
      }
      if (is_missing(cells[c])) {
        values.push_back(std::numeric_limits<double>::quiet_NaN());
        continue;
      }
      const auto v = parse_number(cells[c]);
      if (!v) {
        throw DataError("row " + std::to_string(line_no) + ", column '" + std::string(header[c]) +
                        "': not a number: '" + std::string(cells[c]) + "'");
      }
      values.push_back(*v);
    }
  }

  if (options.class_names) {
    d.class_names = *options.class_names;
  } else {
    std::set<std::string> distinct;
    for (const auto& l : raw_labels) {
      if (!l.empty()) distinct.insert(l);
    }
    d.class_names = sort_class_names({distinct.begin(), distinct.end()});
  }
  std::unordered_map<std::string, int> class_ids;
  for (std::size_t i = 0; i < d.class_names.size(); ++i) class_ids.emplace(d.class_names[i], static_cast<int>(i));

  d.labels.reserve(raw_labels.size());
  for (std::size_t r = 0; r < raw_labels.size(); ++r) {
    if (raw_labels[r].empty()) {
      d.labels.push_back(-1);
      continue;
    }
    const auto it = class_ids.find(raw_labels[r]);
    if (it == class_ids.end()) throw DataError("row " + std::to_string(r + 2) + ": unknown class '" + raw_labels[r] + "'");
    d.labels.push_back(it->second);
  }
  d.features.rows = raw_labels.size();
  d.features.cols = d.feature_names.size();
  d.features.data = std::move(values);
  return d;
}

Dataset load_csv(const std::filesystem::path& path, const std::string& label_column, const LoadOptions& options) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  return parse_csv(in, label_column, options);
}

void write_csv(const Dataset& d, const std::filesystem::path& path, const std::string& label_column) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  for (const auto& name : d.feature_names) out << name << ',';
  out << label_column << '\n';
  for (std::size_t r = 0; r < d.rows(); ++r) {
    for (double v : d.features.row(r)) {
      if (!std::isnan(v)) out << format_g(v);
      out << ',';
    }
    const int y = d.labels[r];
    if (y >= 0) out << d.class_names[static_cast<std::size_t>(y)];
    out << '\n';
  }
}

Dataset clean(const Dataset& d) {
  std::vector<std::size_t> keep;
  std::unordered_set<std::string> seen;
  std::string key(d.dim() * sizeof(double) + sizeof(int), '\0');
  for (std::size_t r = 0; r < d.rows(); ++r) {
    const auto row = d.features.row(r);
    const int label = d.labels[r];
    if (label < 0 || label >= d.n_classes()) continue;
    if (std::any_of(row.begin(), row.end(), [](double v) { return std::isnan(v); })) continue;
    std::memcpy(key.data(), row.data(), row.size_bytes());
    std::memcpy(key.data() + row.size_bytes(), &label, sizeof(int));
    if (!seen.insert(key).second) continue;
    keep.push_back(r);
  }
  if (keep.empty()) throw DataError("no rows remain after cleaning");
  return d.subset(keep);
}

std::pair<Dataset, ScalerParams> minmax_scale(const Dataset& d) {
  ScalerParams s;
  s.feature_names = d.feature_names;
  s.mins.assign(d.dim(), std::numeric_limits<double>::infinity());
  s.maxs.assign(d.dim(), -std::numeric_limits<double>::infinity());
  for (std::size_t r = 0; r < d.rows(); ++r) {
    const auto row = d.features.row(r);
    for (std::size_t c = 0; c < d.dim(); ++c) {
      s.mins[c] = std::min(s.mins[c], row[c]);
      s.maxs[c] = std::max(s.maxs[c], row[c]);
    }
  }
  if (d.rows() == 0) {
    std::fill(s.mins.begin(), s.mins.end(), 0.0);
    std::fill(s.maxs.begin(), s.maxs.end(), 0.0);
  }
  return {apply_scaler(d, s), s};
}

Dataset apply_scaler(const Dataset& d, const ScalerParams& s) {
  if (s.mins.size() != d.dim()) throw ShapeError("scaler/dataset feature count mismatch");
  Dataset out = d;
  for (std::size_t r = 0; r < d.rows(); ++r) s.apply(d.features.row(r), out.features.row(r));
  return out;
}

namespace {

std::vector<std::vector<std::size_t>> rows_by_class(const Dataset& d) {
  std::vector<std::vector<std::size_t>> by_class(static_cast<std::size_t>(d.n_classes()));
  for (std::size_t r = 0; r < d.rows(); ++r) {
    const int y = d.labels[r];
    if (y < 0 || y >= d.n_classes()) throw DataError("label out of range at row " + std::to_string(r));
    by_class[static_cast<std::size_t>(y)].push_back(r);
  }
  return by_class;
}

}  // namespace

std::pair<std::vector<std::size_t>, std::vector<std::size_t>> stratified_split_indices(const Dataset& d,
                                                                                       double holdout_frac,
                                                                                       std::uint64_t seed) {
  if (!(holdout_frac > 0.0 && holdout_frac < 1.0)) throw ConfigError("holdout fraction must lie in (0, 1)");
  auto by_class = rows_by_class(d);
  for (std::size_t c = 0; c < by_class.size(); ++c) {
    if (by_class[c].size() == 1) {
      throw DataError("class '" + d.class_names[c] + "' has a single row; stratified split needs at least 2");
    }
  }

  // Largest-remainder allocation of round(N * frac) validation rows.
  std::vector<std::size_t> quota(by_class.size());
  std::vector<std::pair<double, std::size_t>> remainders;
  double total_exact = 0.0;
  std::size_t allocated = 0;
  for (std::size_t c = 0; c < by_class.size(); ++c) {
    const double exact = static_cast<double>(by_class[c].size()) * holdout_frac;
    total_exact += exact;
    quota[c] = static_cast<std::size_t>(std::floor(exact));
    allocated += quota[c];
    remainders.emplace_back(exact - std::floor(exact), c);
  }
  std::stable_sort(remainders.begin(), remainders.end(),
                   [](const auto& a, const auto& b) { return a.first > b.first; });
  auto target = static_cast<std::size_t>(std::llround(total_exact));
  for (const auto& [rem, c] : remainders) {
    if (allocated >= target) break;
    if (rem <= 0.0) break;
    ++quota[c];
    ++allocated;
  }

  std::vector<std::size_t> train, val;
  for (std::size_t c = 0; c < by_class.size(); ++c) {
    auto& rows = by_class[c];
    if (rows.empty()) continue;
    Rng rng(derive_seed(seed, {c}));
    shuffle(std::span(rows), rng);
    const std::size_t n_val = std::min(quota[c], rows.size() - 1);
    val.insert(val.end(), rows.begin(), rows.begin() + static_cast<std::ptrdiff_t>(n_val));
    train.insert(train.end(), rows.begin() + static_cast<std::ptrdiff_t>(n_val), rows.end());
  }
  std::sort(train.begin(), train.end());
  std::sort(val.begin(), val.end());
  return {train, val};
}

std::pair<Dataset, Dataset> stratified_split(const Dataset& d, double holdout_frac, std::uint64_t seed) {
  const auto [train, val] = stratified_split_indices(d, holdout_frac, seed);
  return {d.subset(train), d.subset(val)};
}

FoldPlan stratified_kfold(const Dataset& d, int k, std::uint64_t seed) {
  if (k < 2) throw ConfigError("k-fold requires k >= 2");
  auto by_class = rows_by_class(d);
  for (std::size_t c = 0; c < by_class.size(); ++c) {
    if (!by_class[c].empty() && by_class[c].size() < static_cast<std::size_t>(k)) {
      throw DataError("class '" + d.class_names[c] + "' has " + std::to_string(by_class[c].size()) +
                      " rows, fewer than k=" + std::to_string(k));
    }
  }
  FoldPlan plan;
  plan.k = k;
  plan.assignments.assign(d.rows(), -1);
  // Round-robin dealing continues across classes so fold sizes stay within one.
  std::size_t dealer = 0;
  for (std::size_t c = 0; c < by_class.size(); ++c) {
    auto& rows = by_class[c];
    Rng rng(derive_seed(seed, {c}));
    shuffle(std::span(rows), rng);
    for (std::size_t r : rows) plan.assignments[r] = static_cast<int>(dealer++ % static_cast<std::size_t>(k));
  }
  return plan;
}

Matrix one_hot(std::span<const int> labels, int n_classes) {
  if (n_classes < 1) throw ConfigError("one_hot: n_classes must be positive");
  Matrix m(labels.size(), static_cast<std::size_t>(n_classes));
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || labels[i] >= n_classes) {
      throw DataError("one_hot: label " + std::to_string(labels[i]) + " outside [0, " + std::to_string(n_classes) + ")");
    }
    m(i, static_cast<std::size_t>(labels[i])) = 1.0;
  }
  return m;
}

Dataset remap_classes(const Dataset& d, const std::map<std::string, std::string>& mapping) {
  std::set<std::string> targets;
  for (const auto& name : d.class_names) {
    const auto it = mapping.find(name);
    if (it == mapping.end()) throw DataError("class mapping has no entry for '" + name + "'");
    targets.insert(it->second);
  }
  Dataset out = d;
  out.class_names = sort_class_names({targets.begin(), targets.end()});
  std::unordered_map<std::string, int> ids;
  for (std::size_t i = 0; i < out.class_names.size(); ++i) ids.emplace(out.class_names[i], static_cast<int>(i));
  for (auto& y : out.labels) {
    if (y >= 0) y = ids.at(mapping.at(d.class_names[static_cast<std::size_t>(y)]));
  }
  return out;
}

std::map<std::string, std::string> default_class_mapping(int target_classes) {
  static const std::map<std::string, std::string> six = {
      {"Normal", "Normal"},
      {"DDoS_UDP", "DoS"},
      {"DDoS_ICMP", "DoS"},
      {"DDoS_TCP", "DoS"},
      {"DDoS_HTTP", "DoS"},
      {"SQL_injection", "Injection"},
      {"XSS", "Injection"},
      {"Uploading", "Injection"},
      {"Backdoor", "Malware"},
      {"Password", "Malware"},
      {"Ransomware", "Malware"},
      {"Port_Scanning", "Reconnaissance"},
      {"Vulnerability_scanner", "Reconnaissance"},
      {"Fingerprinting", "Reconnaissance"},
      {"MITM", "MITM"},
  };
  if (target_classes == 6) return six;
  if (target_classes == 2) {
    std::map<std::string, std::string> two;
    for (const auto& [from, to] : six) two.emplace(from, to == "Normal" ? "Normal" : "Attack");
    return two;
  }
  if (target_classes == 15) {
    std::map<std::string, std::string> identity;
    for (const auto& [from, to] : six) identity.emplace(from, from);
    return identity;
  }
  throw ConfigError("no built-in class mapping for " + std::to_string(target_classes) + " classes");
}

}  // namespace hwids::dataio
