#include <algorithm>
#include <chrono>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <thread>

#include "doctest.h"
#include "hwids/runtime.hpp"
#include "oracles.hpp"

using namespace hwids;
using namespace hwids::runtime;

namespace {

const std::string kFixtures = HWIDS_FIXTURE_DIR;

// Bitwise CRC-32 (reflected, polynomial 0xEDB88320).
std::uint32_t crc32_ref(const std::uint8_t* p, std::size_t n) {
  std::uint32_t c = 0xFFFFFFFFu;
  for (std::size_t i = 0; i < n; ++i) {
    c ^= p[i];
    for (int k = 0; k < 8; ++k) c = (c >> 1) ^ (0xEDB88320u & (0u - (c & 1u)));
  }
  return ~c;
}

std::uint32_t read_u32(const std::vector<std::uint8_t>& b, std::size_t at) {
  return std::uint32_t(b[at]) | std::uint32_t(b[at + 1]) << 8 | std::uint32_t(b[at + 2]) << 16 |
         std::uint32_t(b[at + 3]) << 24;
}

void write_u32(std::vector<std::uint8_t>& b, std::size_t at, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) b[at + static_cast<std::size_t>(i)] = static_cast<std::uint8_t>(v >> (8 * i));
}

void reseal(std::vector<std::uint8_t>& b) { write_u32(b, 7, crc32_ref(b.data() + 15, b.size() - 15)); }

struct Fixture {
  dataio::Dataset raw;
  dataio::Dataset scaled;
  dataio::ScalerParams scaler;
};

const Fixture& fixture() {
  static const Fixture f = [] {
    Fixture x;
    x.raw = oracle::tree_dataset(400, 6, 3, 3, 0.05, 5).data;
    for (auto& v : x.raw.features.data) v = v * 100.0 - 20.0;  // make scaling matter
    auto [s, p] = dataio::minmax_scale(x.raw);
    x.scaled = std::move(s);
    x.scaler = std::move(p);
    return x;
  }();
  return f;
}

ModelArtifact tree_artifact(trees::Family family) {
  const auto& f = fixture();
  trees::HyperParams hp;
  hp.family = family;
  hp.n_trees = 8;
  hp.max_depth = 5;
  hp.min_child_size = 3;
  hp.num_leaves = 12;
  hp.colsample = 0.8;
  auto m = trees::train(f.scaled, hp, 3);
  return make_artifact(std::move(m), f.scaler, f.scaled.class_names, nlohmann::json{{"type", "tree"}});
}

ModelArtifact cnn_artifact() {
  const auto& f = fixture();
  cnn::Arch a;
  a.input_len = 6;
  a.n_classes = 3;
  cnn::Block b;
  b.filters = 8;
  b.pool = cnn::PoolKind::Max;
  a.blocks = {b};
  cnn::TrainConfig cfg;
  cfg.max_epochs = 3;
  cfg.batch_size = 64;
  auto [m, h] = cnn::train(cnn::init_model(a, 2), f.scaled, f.scaled, cfg);
  return make_artifact(std::move(m), f.scaler, f.scaled.class_names, nlohmann::json{{"type", "cnn"}});
}

std::vector<ModelArtifact> every_kind() {
  return {tree_artifact(trees::Family::RandomForest), tree_artifact(trees::Family::GbdtLeafwise),
          tree_artifact(trees::Family::GbdtLevelwise), cnn_artifact()};
}

Matrix random_inputs(std::size_t rows, std::size_t width, std::uint64_t seed) {
  Rng rng(seed);
  Matrix m(rows, width);
  for (auto& v : m.data) v = uniform_real(rng, -30.0, 90.0);
  return m;
}

FormatErrorKind error_kind(const std::vector<std::uint8_t>& bytes) {
  try {
    deserialize(bytes);
  } catch (const ModelFormatError& e) {
    return e.kind();
  }
  FAIL("deserialize accepted damaged bytes");
  return FormatErrorKind::Corrupt;
}

ModelArtifact stream_model(std::vector<std::string> features) {
  cnn::Arch a;
  a.input_len = static_cast<int>(features.size());
  a.n_classes = 2;
  cnn::Block b;
  b.filters = 4;
  a.blocks = {b};
  dataio::ScalerParams s;
  s.feature_names = std::move(features);
  return make_artifact(cnn::init_model(a, 9), s, {"Attack", "Normal"});
}

}  // namespace

TEST_CASE("serialization round trip is exact for every model kind") {
  const auto inputs = random_inputs(100, 6, 1);
  for (const auto& a : every_kind()) {
    CAPTURE(to_string(a.kind));
    const auto bytes = serialize(a);
    CHECK(bytes.size() > kHeaderBytes);
    CHECK(read_u32(bytes, 7) == crc32_ref(bytes.data() + 15, bytes.size() - 15));
    const auto b = deserialize(bytes);
    CHECK(b.kind == a.kind);
    CHECK(b.scaler == a.scaler);
    CHECK(b.class_names == a.class_names);
    CHECK(b.profile == a.profile);
    CHECK(b.descriptor == a.descriptor);
    CHECK(serialize(b) == bytes);
    for (std::size_t r = 0; r < inputs.rows; ++r) {
      CHECK(a.predict_proba(inputs.row(r)) == b.predict_proba(inputs.row(r)));
      CHECK(a.predict(inputs.row(r)) == b.predict(inputs.row(r)));
    }
  }
}

TEST_CASE("save and load through a file") {
  const auto a = tree_artifact(trees::Family::GbdtLeafwise);
  const auto path = std::filesystem::temp_directory_path() / "hwids_runtime_test.hams";
  save_model(a, path);
  const auto b = load_model(path);
  std::filesystem::remove(path);
  CHECK(serialize(b) == serialize(a));
  CHECK_THROWS_AS(load_model("/nonexistent/model.hams"), IoError);
}

TEST_CASE("artifact profile comes from the cost model") {
  const auto t = tree_artifact(trees::Family::RandomForest);
  CHECK(t.profile == hwcost::profile_tree_ensemble(std::get<trees::Ensemble>(t.model)));
  const auto c = cnn_artifact();
  CHECK(c.profile == hwcost::profile_cnn(std::get<cnn::Model>(c.model).arch));
}

TEST_CASE("damaged files are rejected with the right error kind") {
  for (const auto& a : every_kind()) {
    CAPTURE(to_string(a.kind));
    const auto good = serialize(a);

    auto bad = good;
    bad[0] = 'X';
    CHECK(error_kind(bad) == FormatErrorKind::BadMagic);

    bad = good;
    bad[4] = 2;
    CHECK(error_kind(bad) == FormatErrorKind::UnsupportedVersion);

    bad.assign(good.begin(), good.end() - 1);
    CHECK(error_kind(bad) == FormatErrorKind::Truncated);
    bad.assign(good.begin(), good.begin() + 10);
    CHECK(error_kind(bad) == FormatErrorKind::Truncated);

    bad = good;
    bad[good.size() / 2 + 8] ^= 0x40;
    CHECK(error_kind(bad) == FormatErrorKind::ChecksumMismatch);

    // Well-formed header and checksum around an impossible body.
    bad = good;
    const std::size_t body = 15 + 4 + read_u32(good, 15);
    write_u32(bad, body, a.kind == ModelKind::Cnn ? 7u : 0u);
    reseal(bad);
    CHECK(error_kind(bad) == FormatErrorKind::Corrupt);

    bad = good;
    bad[6] = 9;  // model kind
    CHECK(error_kind(bad) == FormatErrorKind::Corrupt);
  }
}

TEST_CASE("tree child indices must point forward") {
  auto a = tree_artifact(trees::Family::RandomForest);
  auto& e = std::get<trees::Ensemble>(a.model);
  REQUIRE_FALSE(e.trees[0].nodes[0].is_leaf);
  e.trees[0].nodes[0].left = 0;
  CHECK(error_kind(serialize(a)) == FormatErrorKind::Corrupt);
}

TEST_CASE("predictions check input width") {
  const auto a = tree_artifact(trees::Family::RandomForest);
  const std::vector<double> short_row(5, 0.0);
  CHECK_THROWS_AS(a.predict(short_row), ShapeError);
}

TEST_CASE("energy arithmetic reproduces the on-device table") {
  struct Row {
    double latency, current, voltage, energy;
  };
  for (const Row r : {Row{70, 65, 5, 22.75}, Row{27, 50, 5, 6.75}, Row{22, 50, 5, 5.50}, Row{300, 55, 5, 82.50}}) {
    const auto b = energy_report(r.latency, r.current, r.voltage);
    CHECK(std::abs(b.energy_mJ - r.energy) <= 0.005);
    CHECK(b.power_mW == doctest::Approx(r.current * r.voltage));
  }
  CHECK_THROWS_AS(energy_report(-1.0, 10.0), ConfigError);
  const nlohmann::json j = energy_report(70, 65, 5);
  CHECK(j.at("energy_mJ").get<double>() == doctest::Approx(22.75));
  CHECK(j.at("latency_ms").contains("p95"));
}

TEST_CASE("benchmark needs at least 30 runs") {
  const Matrix inputs = random_inputs(3, 6, 2);
  auto noop = [](std::span<const double>) {};
  CHECK_THROWS_AS(benchmark_latency(noop, inputs, 29), ConfigError);
  CHECK_THROWS_AS(benchmark_latency(noop, Matrix(0, 6), 30), ConfigError);
  const auto s = benchmark_latency(noop, inputs, 30);
  CHECK(s.runs == 30);
}

TEST_CASE("steady workload gives a tight latency distribution") {
  const Matrix inputs = random_inputs(4, 6, 3);
  std::size_t calls = 0;
  auto sleepy = [&](std::span<const double>) {
    ++calls;
    const auto until = std::chrono::steady_clock::now() + std::chrono::microseconds(300);
    while (std::chrono::steady_clock::now() < until) {
    }
  };
  const auto s = benchmark_latency(sleepy, inputs, 40);
  CHECK(calls == 40 + kWarmupRuns);
  CHECK(s.p50_ms >= 0.3);
  CHECK(s.p95_ms >= s.p50_ms);
  CHECK(s.p95_ms / s.p50_ms <= 3.0);
  CHECK(s.mean_ms > 0.0);

  const auto m = benchmark_latency(tree_artifact(trees::Family::GbdtLevelwise), inputs, 30);
  CHECK(m.runs == 30);
}

TEST_CASE("schema matching by name") {
  const std::vector<std::string> schema{"a", "b", "c"};
  CHECK(match_schema({"c", "a", "b"}, schema) == std::vector<std::size_t>{2, 0, 1});
  try {
    match_schema({"a", "b", "z"}, schema);
    FAIL("expected an error");
  } catch (const ConfigError& e) {
    const std::string what = e.what();
    CHECK(what.find("missing [z]") != std::string::npos);
    CHECK(what.find("extra [c]") != std::string::npos);
  }
}

TEST_CASE("stream classification of the fixture capture") {
  const auto schema = flowext::FeatureSchema::default_schema();
  const auto model = stream_model(schema.names());
  auto run = [&](const flowext::FeatureSchema& s) {
    flowext::PcapReplaySource src(kFixtures + "/flows.pcap");
    std::vector<PredictionRecord> out;
    const auto summary = classify_stream(model, src, s, [&](const PredictionRecord& r) { out.push_back(r); });
    CHECK(summary.flows == out.size());
    CHECK(summary.stats.records == 18);
    return out;
  };
  const auto a = run(schema);
  const auto b = run(schema);
  REQUIRE(a.size() == 6);
  std::uint64_t packets = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(to_json(a[i], false) == to_json(b[i], false));
    CHECK_FALSE(to_json(a[i], false).contains("total_ms"));
    CHECK(a[i].total_ms >= a[i].infer_ms);
    packets += a[i].packets;
  }
  CHECK(packets == 14);

  // The same features in another order give the same predictions.
  auto names = schema.names();
  std::reverse(names.begin(), names.end());
  const auto c = run(flowext::FeatureSchema(names));
  REQUIRE(c.size() == a.size());
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(c[i].probability == a[i].probability);

  auto fewer = schema.names();
  fewer.back() = "bytes_per_s";
  flowext::PcapReplaySource src(kFixtures + "/flows.pcap");
  try {
    classify_stream(model, src, flowext::FeatureSchema(fewer), [](const PredictionRecord&) {});
    FAIL("expected a schema mismatch");
  } catch (const ConfigError& e) {
    const std::string what = e.what();
    CHECK(what.find("icmp_seq") != std::string::npos);
    CHECK(what.find("bytes_per_s") != std::string::npos);
  }
}

TEST_CASE("empty capture classifies nothing") {
  const auto path = std::filesystem::temp_directory_path() / "hwids_empty.pcap";
  {
    std::ifstream in(kFixtures + "/flows.pcap", std::ios::binary);
    std::vector<char> header(24);
    in.read(header.data(), 24);
    std::ofstream out(path, std::ios::binary);
    out.write(header.data(), 24);
  }
  const auto schema = flowext::FeatureSchema::default_schema();
  flowext::PcapReplaySource src(path);
  std::size_t n = 0;
  const auto summary = classify_stream(stream_model(schema.names()), src, schema, [&](const PredictionRecord&) { ++n; });
  std::filesystem::remove(path);
  CHECK(n == 0);
  CHECK(summary.flows == 0);
  CHECK(summary.stats.records == 0);
}
