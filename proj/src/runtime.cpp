#include "hwids/runtime.hpp"

#include <zlib.h>

#include <algorithm>
#include <bit>
#include <chrono>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <set>

#include "hwids/metrics.hpp"

namespace hwids::runtime {

namespace {

using Clock = std::chrono::steady_clock;

double ms_between(Clock::time_point a, Clock::time_point b) {
  return std::chrono::duration<double, std::milli>(b - a).count();
}

ModelKind kind_of(trees::Family f) {
  switch (f) {
    case trees::Family::RandomForest: return ModelKind::RandomForest;
    case trees::Family::GbdtLeafwise: return ModelKind::GbdtLeafwise;
    default: return ModelKind::GbdtLevelwise;
  }
}

void check_features(const dataio::ScalerParams& s, std::size_t expected) {
  if (s.feature_names.size() != expected) {
    throw ShapeError("model expects " + std::to_string(expected) + " features but " +
                     std::to_string(s.feature_names.size()) + " feature names were given");
  }
  if (!s.mins.empty() && (s.mins.size() != expected || s.maxs.size() != expected)) {
    throw ShapeError("scaler width does not match the model");
  }
}

// Little-endian writer/reader over a byte buffer.
class Writer {
 public:
  void u8(std::uint8_t v) { out.push_back(v); }
  void u16(std::uint16_t v) {
    for (int i = 0; i < 2; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void i32(std::int32_t v) { u32(static_cast<std::uint32_t>(v)); }
  void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
  void bytes(const std::string& s) { out.insert(out.end(), s.begin(), s.end()); }

  std::vector<std::uint8_t> out;
};

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> data) : data_(data) {}

  std::uint8_t u8() { return take(1)[0]; }
  std::uint16_t u16() {
    const auto* p = take(2);
    return static_cast<std::uint16_t>(p[0] | p[1] << 8);
  }
  std::uint32_t u32() {
    const auto* p = take(4);
    return static_cast<std::uint32_t>(p[0]) | static_cast<std::uint32_t>(p[1]) << 8 |
           static_cast<std::uint32_t>(p[2]) << 16 | static_cast<std::uint32_t>(p[3]) << 24;
  }
  std::int32_t i32() { return static_cast<std::int32_t>(u32()); }
  float f32() { return std::bit_cast<float>(u32()); }
  std::string bytes(std::size_t n) {
    const auto* p = take(n);
    return std::string(reinterpret_cast<const char*>(p), n);
  }
  std::size_t remaining() const { return data_.size() - pos_; }

 private:
  const std::uint8_t* take(std::size_t n) {
    if (n > remaining()) throw ModelFormatError(FormatErrorKind::Corrupt, "model payload ends inside a record");
    const auto* p = data_.data() + pos_;
    pos_ += n;
    return p;
  }

  std::span<const std::uint8_t> data_;
  std::size_t pos_ = 0;
};

constexpr std::uint16_t kNoFeature = 0xFFFF;
constexpr std::uint32_t kNoChild = 0xFFFFFFFF;

void write_trees(Writer& w, const trees::Ensemble& e) {
  w.u32(static_cast<std::uint32_t>(e.n_classes));
  w.u32(static_cast<std::uint32_t>(e.n_features));
  w.u32(static_cast<std::uint32_t>(e.trees.size()));
  for (const auto& t : e.trees) {
    w.u32(static_cast<std::uint32_t>(t.nodes.size()));
    w.i32(t.class_tag);
    for (const auto& n : t.nodes) {
      w.u16(n.is_leaf ? kNoFeature : static_cast<std::uint16_t>(n.feature));
      w.u16(n.is_leaf ? 1 : 0);
      w.f32(n.is_leaf ? n.value : n.threshold);
      w.u32(n.is_leaf ? kNoChild : static_cast<std::uint32_t>(n.left));
      w.u32(n.is_leaf ? kNoChild : static_cast<std::uint32_t>(n.right));
    }
  }
}

ModelFormatError corrupt(const std::string& what) { return ModelFormatError(FormatErrorKind::Corrupt, what); }

trees::Ensemble read_trees(Reader& r, ModelKind kind) {
  trees::Ensemble e;
  e.family = kind == ModelKind::RandomForest   ? trees::Family::RandomForest
             : kind == ModelKind::GbdtLeafwise ? trees::Family::GbdtLeafwise
                                               : trees::Family::GbdtLevelwise;
  e.n_classes = static_cast<int>(r.u32());
  e.n_features = static_cast<int>(r.u32());
  const std::uint32_t n_trees = r.u32();
  if (e.n_classes < 1 || e.n_features < 1) throw corrupt("tree model with no classes or features");
  // Each tree needs at least a header and one node.
  if (n_trees > r.remaining() / 24) throw corrupt("tree count exceeds payload size");
  e.trees.resize(n_trees);
  for (std::uint32_t t = 0; t < n_trees; ++t) {
    auto& tree = e.trees[t];
    const std::uint32_t count = r.u32();
    tree.class_tag = r.i32();
    if (count == 0 || count > r.remaining() / 16) throw corrupt("tree " + std::to_string(t) + ": bad node count");
    if (tree.class_tag < -1 || tree.class_tag >= e.n_classes) {
      throw corrupt("tree " + std::to_string(t) + ": class tag out of range");
    }
    tree.nodes.resize(count);
    for (std::uint32_t i = 0; i < count; ++i) {
      auto& n = tree.nodes[i];
      const std::uint16_t feature = r.u16();
      const std::uint16_t leaf = r.u16();
      const float v = r.f32();
      const std::uint32_t left = r.u32();
      const std::uint32_t right = r.u32();
      const std::string where = "tree " + std::to_string(t) + " node " + std::to_string(i);
      if (leaf > 1) throw corrupt(where + ": bad leaf flag");
      n.is_leaf = leaf == 1;
      if (n.is_leaf) {
        n.value = v;
        if (e.family == trees::Family::RandomForest && (v < 0 || v >= static_cast<float>(e.n_classes) ||
                                                        v != std::floor(v))) {
          throw corrupt(where + ": leaf class out of range");
        }
      } else {
        // Children always follow their parent, which also rules out cycles.
        if (feature >= e.n_features || left <= i || right <= i || left >= count || right >= count) {
          throw corrupt(where + ": feature or child index out of range");
        }
        n.feature = feature;
        n.threshold = v;
        n.left = static_cast<std::int32_t>(left);
        n.right = static_cast<std::int32_t>(right);
      }
    }
  }
  return e;
}

std::uint32_t crc32_of(std::span<const std::uint8_t> data) {
  uLong crc = crc32(0L, Z_NULL, 0);
  // zlib takes uInt lengths; feed in chunks.
  std::size_t pos = 0;
  while (pos < data.size()) {
    const auto chunk = static_cast<uInt>(std::min<std::size_t>(data.size() - pos, 1u << 30));
    crc = crc32(crc, data.data() + pos, chunk);
    pos += chunk;
  }
  return static_cast<std::uint32_t>(crc);
}

}  // namespace

std::string to_string(ModelKind k) {
  switch (k) {
    case ModelKind::RandomForest: return "rf";
    case ModelKind::GbdtLeafwise: return "gbdt-leafwise";
    case ModelKind::GbdtLevelwise: return "gbdt-levelwise";
    case ModelKind::Cnn: return "cnn";
  }
  return "unknown";
}

std::vector<double> ModelArtifact::predict_proba_scaled(std::span<const double> x) const {
  if (x.size() != n_features()) {
    throw ShapeError("input has " + std::to_string(x.size()) + " features, model expects " +
                     std::to_string(n_features()));
  }
  if (const auto* e = std::get_if<trees::Ensemble>(&model)) return trees::predict_ensemble(*e, x);
  return cnn::predict_proba(std::get<cnn::Model>(model), x);
}

std::vector<double> ModelArtifact::predict_proba(std::span<const double> raw) const {
  if (scaler.mins.empty()) return predict_proba_scaled(raw);
  if (raw.size() != n_features()) {
    throw ShapeError("input has " + std::to_string(raw.size()) + " features, model expects " +
                     std::to_string(n_features()));
  }
  return predict_proba_scaled(scaler.apply(raw));
}

int ModelArtifact::predict(std::span<const double> raw) const {
  return static_cast<int>(argmax(predict_proba(raw)));
}

ModelArtifact make_artifact(trees::Ensemble model, dataio::ScalerParams scaler, std::vector<std::string> class_names,
                            nlohmann::json descriptor) {
  check_features(scaler, static_cast<std::size_t>(model.n_features));
  if (class_names.size() != static_cast<std::size_t>(model.n_classes)) throw ShapeError("class name count mismatch");
  ModelArtifact a;
  a.kind = kind_of(model.family);
  a.profile = hwcost::profile_tree_ensemble(model);
  a.scaler = std::move(scaler);
  a.class_names = std::move(class_names);
  a.descriptor = std::move(descriptor);
  a.model = std::move(model);
  return a;
}

ModelArtifact make_artifact(cnn::Model model, dataio::ScalerParams scaler, std::vector<std::string> class_names,
                            nlohmann::json descriptor) {
  check_features(scaler, static_cast<std::size_t>(model.arch.input_len));
  if (class_names.size() != static_cast<std::size_t>(model.arch.n_classes)) {
    throw ShapeError("class name count mismatch");
  }
  ModelArtifact a;
  a.kind = ModelKind::Cnn;
  a.profile = hwcost::profile_cnn(model.arch);
  a.scaler = std::move(scaler);
  a.class_names = std::move(class_names);
  a.descriptor = std::move(descriptor);
  a.model = std::move(model);
  return a;
}

std::vector<std::uint8_t> serialize(const ModelArtifact& a) {
  nlohmann::json meta{{"features", a.scaler.feature_names},
                      {"scaler_min", a.scaler.mins},
                      {"scaler_max", a.scaler.maxs},
                      {"classes", a.class_names},
                      {"profile", a.profile},
                      {"descriptor", a.descriptor}};
  Writer body;
  if (const auto* e = std::get_if<trees::Ensemble>(&a.model)) {
    const std::string m = meta.dump();
    body.u32(static_cast<std::uint32_t>(m.size()));
    body.bytes(m);
    write_trees(body, *e);
  } else {
    const auto& model = std::get<cnn::Model>(a.model);
    meta["arch"] = model.arch;
    const std::string m = meta.dump();
    body.u32(static_cast<std::uint32_t>(m.size()));
    body.bytes(m);
    const auto flat = model.flatten();
    body.u32(static_cast<std::uint32_t>(flat.size()));
    for (float v : flat) body.f32(v);
  }

  Writer out;
  out.bytes(std::string(kMagic, 4));
  out.u16(kFormatVersion);
  out.u8(static_cast<std::uint8_t>(a.kind));
  out.u32(crc32_of(body.out));
  out.u32(static_cast<std::uint32_t>(body.out.size()));
  out.out.insert(out.out.end(), body.out.begin(), body.out.end());
  return out.out;
}

ModelArtifact deserialize(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kMagic, 4) != 0) {
    throw ModelFormatError(FormatErrorKind::BadMagic, "not a model file (bad magic)");
  }
  if (bytes.size() < kHeaderBytes) throw ModelFormatError(FormatErrorKind::Truncated, "model file truncated in header");
  Reader header(bytes.subspan(4, kHeaderBytes - 4));
  const std::uint16_t version = header.u16();
  if (version != kFormatVersion) {
    throw ModelFormatError(FormatErrorKind::UnsupportedVersion,
                           "unsupported model format version " + std::to_string(version) + " (reader supports " +
                               std::to_string(kFormatVersion) + ")");
  }
  const std::uint8_t kind = header.u8();
  const std::uint32_t crc = header.u32();
  const std::uint32_t length = header.u32();
  const auto payload = bytes.subspan(kHeaderBytes);
  if (payload.size() < length) {
    throw ModelFormatError(FormatErrorKind::Truncated, "model payload truncated: expected " + std::to_string(length) +
                                                           " bytes, found " + std::to_string(payload.size()));
  }
  if (payload.size() > length) throw corrupt("trailing bytes after model payload");
  if (crc32_of(payload) != crc) throw ModelFormatError(FormatErrorKind::ChecksumMismatch, "model checksum mismatch");
  if (kind > static_cast<std::uint8_t>(ModelKind::Cnn)) throw corrupt("unknown model kind " + std::to_string(kind));

  Reader r(payload);
  const std::uint32_t meta_len = r.u32();
  if (meta_len > r.remaining()) throw corrupt("metadata length exceeds payload");
  nlohmann::json meta;
  ModelArtifact a;
  a.kind = static_cast<ModelKind>(kind);
  try {
    meta = nlohmann::json::parse(r.bytes(meta_len));
    meta.at("features").get_to(a.scaler.feature_names);
    meta.at("scaler_min").get_to(a.scaler.mins);
    meta.at("scaler_max").get_to(a.scaler.maxs);
    meta.at("classes").get_to(a.class_names);
    meta.at("profile").get_to(a.profile);
    a.descriptor = meta.at("descriptor");
  } catch (const nlohmann::json::exception& e) {
    throw corrupt(std::string("bad model metadata: ") + e.what());
  }

  if (a.kind == ModelKind::Cnn) {
    cnn::Arch arch;
    try {
      meta.at("arch").get_to(arch);
      cnn::shape_trace(arch);
    } catch (const std::exception& e) {
      throw corrupt(std::string("bad architecture: ") + e.what());
    }
    const std::uint32_t count = r.u32();
    if (count != hwcost::cnn_parameter_count(arch)) {
      throw corrupt("parameter count " + std::to_string(count) + " does not match the architecture");
    }
    if (r.remaining() != static_cast<std::size_t>(count) * 4) throw corrupt("parameter block size mismatch");
    std::vector<float> flat(count);
    for (auto& v : flat) v = r.f32();
    cnn::Model m = cnn::init_model(arch, 0);
    m.unflatten(flat);
    a.model = std::move(m);
  } else {
    a.model = read_trees(r, a.kind);
    if (r.remaining() != 0) throw corrupt("trailing bytes after tree data");
  }

  try {
    if (const auto* e = std::get_if<trees::Ensemble>(&a.model)) {
      check_features(a.scaler, static_cast<std::size_t>(e->n_features));
      if (a.class_names.size() != static_cast<std::size_t>(e->n_classes)) throw ShapeError("class name count mismatch");
    } else {
      const auto& m = std::get<cnn::Model>(a.model);
      check_features(a.scaler, static_cast<std::size_t>(m.arch.input_len));
      if (a.class_names.size() != static_cast<std::size_t>(m.arch.n_classes)) {
        throw ShapeError("class name count mismatch");
      }
    }
  } catch (const ShapeError& e) {
    throw corrupt(e.what());
  }
  return a;
}

void save_model(const ModelArtifact& a, const std::filesystem::path& path) {
  const auto bytes = serialize(a);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed for " + path.string());
}

ModelArtifact load_model(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return deserialize(bytes);
}

// ---------------------------------------------------------------------------

LatencyStats benchmark_latency(const std::function<void(std::span<const double>)>& predict, const Matrix& inputs,
                               std::size_t runs) {
  if (runs < kMinBenchRuns) {
    throw ConfigError("benchmark needs at least " + std::to_string(kMinBenchRuns) + " runs, got " +
                      std::to_string(runs));
  }
  if (inputs.rows == 0) throw ConfigError("benchmark needs at least one input row");
  std::vector<double> times;
  times.reserve(runs);
  for (std::size_t i = 0; i < runs + kWarmupRuns; ++i) {
    const auto row = inputs.row(i % inputs.rows);
    const auto start = Clock::now();
    predict(row);
    const auto stop = Clock::now();
    if (i >= kWarmupRuns) times.push_back(ms_between(start, stop));
  }
  LatencyStats s;
  s.runs = runs;
  double sum = 0.0;
  for (double t : times) sum += t;
  s.mean_ms = sum / static_cast<double>(runs);
  std::sort(times.begin(), times.end());
  // Nearest-rank percentiles.
  auto pct = [&](double p) {
    const auto rank = static_cast<std::size_t>(std::ceil(p / 100.0 * static_cast<double>(runs)));
    return times[std::clamp<std::size_t>(rank, 1, runs) - 1];
  };
  s.p50_ms = pct(50);
  s.p95_ms = pct(95);
  return s;
}

LatencyStats benchmark_latency(const ModelArtifact& a, const Matrix& inputs, std::size_t runs) {
  volatile double sink = 0.0;
  return benchmark_latency([&](std::span<const double> x) { sink = a.predict_proba(x)[0]; }, inputs, runs);
}

BenchResult energy_report(double latency_ms, double current_mA, double voltage_V) {
  LatencyStats l;
  l.mean_ms = l.p50_ms = l.p95_ms = latency_ms;
  return energy_report(l, current_mA, voltage_V);
}

BenchResult energy_report(const LatencyStats& latency, double current_mA, double voltage_V) {
  if (!(latency.mean_ms >= 0) || !(current_mA >= 0) || !(voltage_V >= 0)) {
    throw ConfigError("latency, current and voltage must be non-negative");
  }
  BenchResult b;
  b.latency = latency;
  b.current_mA = current_mA;
  b.voltage_V = voltage_V;
  b.power_mW = current_mA * voltage_V;
  b.energy_mJ = b.power_mW * latency.mean_ms / 1000.0;
  return b;
}

void to_json(nlohmann::json& j, const BenchResult& b) {
  j = nlohmann::json{
      {"latency_ms", {{"mean", b.latency.mean_ms}, {"p50", b.latency.p50_ms}, {"p95", b.latency.p95_ms}}},
      {"runs", b.latency.runs},
      {"current_mA", b.current_mA},
      {"voltage_V", b.voltage_V},
      {"power_mW", b.power_mW},
      {"energy_mJ", b.energy_mJ}};
}

// ---------------------------------------------------------------------------

nlohmann::json to_json(const PredictionRecord& r, bool timings) {
  nlohmann::json j{{"flow", r.key},
                   {"first_us", r.first_us},
                   {"packets", r.packets},
                   {"class_id", r.class_id},
                   {"class", r.class_name},
                   {"probability", r.probability}};
  if (timings) {
    j["extract_ms"] = r.extract_ms;
    j["infer_ms"] = r.infer_ms;
    j["total_ms"] = r.total_ms;
  }
  return j;
}

std::vector<std::size_t> match_schema(const std::vector<std::string>& model_features,
                                      const std::vector<std::string>& schema) {
  const std::set<std::string> have(schema.begin(), schema.end());
  const std::set<std::string> want(model_features.begin(), model_features.end());
  std::vector<std::string> missing, extra;
  std::set_difference(want.begin(), want.end(), have.begin(), have.end(), std::back_inserter(missing));
  std::set_difference(have.begin(), have.end(), want.begin(), want.end(), std::back_inserter(extra));
  if (!missing.empty() || !extra.empty()) {
    auto join = [](const std::vector<std::string>& v) {
      std::string s;
      for (const auto& x : v) s += (s.empty() ? "" : ", ") + x;
      return "[" + s + "]";
    };
    throw ConfigError("feature schema mismatch: missing " + join(missing) + ", extra " + join(extra));
  }
  std::vector<std::size_t> positions;
  for (const auto& name : model_features) {
    positions.push_back(static_cast<std::size_t>(std::find(schema.begin(), schema.end(), name) - schema.begin()));
  }
  return positions;
}

StreamSummary classify_stream(const ModelArtifact& a, flowext::PacketSource& source,
                              const flowext::FeatureSchema& schema,
                              const std::function<void(const PredictionRecord&)>& emit,
                              std::uint64_t idle_timeout_us) {
  const auto positions = match_schema(a.feature_names(), schema.names());
  flowext::FlowTable table(idle_timeout_us);
  StreamSummary summary;
  std::vector<double> ordered(positions.size());

  auto classify = [&](const flowext::FlowRecord& flow) {
    const auto t0 = Clock::now();
    const auto features = flowext::extract_features(flow, schema);
    for (std::size_t i = 0; i < positions.size(); ++i) ordered[i] = features[positions[i]];
    const auto t1 = Clock::now();
    const auto proba = a.predict_proba(ordered);
    const auto t2 = Clock::now();
    PredictionRecord rec;
    rec.key = flow.key;
    rec.first_us = flow.first_us;
    rec.packets = flow.packet_count;
    rec.class_id = static_cast<int>(argmax(proba));
    rec.class_name = a.class_names[static_cast<std::size_t>(rec.class_id)];
    rec.probability = proba[static_cast<std::size_t>(rec.class_id)];
    rec.extract_ms = ms_between(t0, t1);
    rec.infer_ms = ms_between(t1, t2);
    rec.total_ms = ms_between(t0, t2);
    ++summary.flows;
    emit(rec);
  };

  while (auto ev = source.next()) {
    for (const auto& flow : table.update(*ev)) classify(flow);
  }
  for (const auto& flow : table.flush()) classify(flow);
  summary.stats = source.stats();
  return summary;
}

}  // namespace hwids::runtime
