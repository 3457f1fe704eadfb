#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include "doctest.h"
#include "hwids/dataio.hpp"
#include "hwids/flowext.hpp"

using namespace hwids;
using namespace hwids::flowext;

namespace {

const std::string kFixtures = HWIDS_FIXTURE_DIR;

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

FlowExtraction extract_file(const std::string& name, std::uint64_t timeout = 60'000'000) {
  std::ifstream in(kFixtures + "/" + name, std::ios::binary);
  REQUIRE(in);
  return extract_flows(in, timeout);
}

PacketEvent tcp(std::uint64_t ts, std::uint32_t len, std::uint8_t flags = kAck, std::uint16_t window = 1000) {
  PacketEvent p;
  p.ts_us = ts;
  p.src_ip = 0x0A000001;
  p.dst_ip = 0x0A000002;
  p.src_port = 1234;
  p.dst_port = 80;
  p.protocol = kProtoTcp;
  p.total_len = len;
  p.header_len = 40;
  p.tcp_flags = flags;
  p.tcp_window = window;
  return p;
}

double feature(const FlowRecord& r, const std::string& name) {
  return extract_features(r, FeatureSchema({name})).front();
}

}  // namespace

TEST_CASE("fixture replay reproduces the golden CSV byte for byte") {
  const auto ex = extract_file("flows.pcap");
  std::ostringstream out;
  write_feature_csv(out, ex.flows, FeatureSchema::default_schema());
  CHECK(out.str() == slurp(kFixtures + "/flows_golden.csv"));
}

TEST_CASE("byte order and timestamp resolution do not change the events") {
  const auto le = parse_pcap(std::filesystem::path(kFixtures + "/flows.pcap"));
  const auto be = parse_pcap(std::filesystem::path(kFixtures + "/flows_be.pcap"));
  const auto ns = parse_pcap(std::filesystem::path(kFixtures + "/flows_ns.pcap"));
  CHECK(le.events == be.events);
  CHECK(le.events == ns.events);
  CHECK(le.events.size() == 14);
}

TEST_CASE("parse counters and packet conservation") {
  const auto ex = extract_file("flows.pcap");
  CHECK(ex.stats.records == 18);
  CHECK(ex.stats.parsed == 14);
  CHECK(ex.stats.skipped_non_ipv4 == 2);
  CHECK(ex.stats.skipped_protocol == 1);
  CHECK(ex.stats.skipped_truncated == 1);
  CHECK(ex.stats.parsed + ex.stats.skipped() == ex.stats.records);
  std::uint64_t packets = 0;
  for (const auto& f : ex.flows) packets += f.packet_count;
  CHECK(packets == ex.stats.parsed);
  CHECK(ex.flows.size() == 6);
}

TEST_CASE("a shorter idle timeout splits more flows but conserves packets") {
  const auto ex = extract_file("flows.pcap", 500'000);
  std::uint64_t packets = 0;
  for (const auto& f : ex.flows) packets += f.packet_count;
  CHECK(packets == 14);
  CHECK(ex.flows.size() > 6);
}

TEST_CASE("bad captures") {
  std::istringstream junk(std::string(24, 'x'));
  CHECK_THROWS_AS(PcapReader{junk}, DataError);
  std::istringstream empty("");
  CHECK_THROWS_AS(PcapReader{empty}, DataError);
  CHECK_THROWS_AS(parse_pcap(std::filesystem::path("/nonexistent.pcap")), IoError);
}

TEST_CASE("flow keys are directional 5-tuples") {
  auto a = tcp(0, 60);
  auto b = a;
  std::swap(b.src_ip, b.dst_ip);
  std::swap(b.src_port, b.dst_port);
  CHECK_FALSE(flow_key(a) == flow_key(b));
  auto c = a;
  c.src_port = 1235;
  CHECK_FALSE(flow_key(a) == flow_key(c));
  auto d = a;
  d.protocol = kProtoUdp;
  CHECK_FALSE(flow_key(a) == flow_key(d));
  CHECK(to_string(flow_key(a)) == "10.0.0.1:1234->10.0.0.2:80/6");
  PacketEvent icmp;
  icmp.protocol = kProtoIcmp;
  CHECK(flow_key(icmp).src_port == 0);
  CHECK(flow_key(icmp).dst_port == 0);
}

TEST_CASE("two packets of 100 and 200 bytes") {
  FlowTable t;
  t.update(tcp(1'000'000, 100));
  t.update(tcp(1'500'000, 200));
  const auto flows = t.flush();
  REQUIRE(flows.size() == 1);
  const auto& f = flows[0];
  CHECK(f.packet_count == 2);
  CHECK(f.byte_count == 300);
  CHECK(feature(f, "len_mean") == 150.0);
  CHECK(feature(f, "len_std") == 50.0);
  CHECK(feature(f, "len_min") == 100.0);
  CHECK(feature(f, "len_max") == 200.0);
  CHECK(feature(f, "duration") == 0.5);
  CHECK(feature(f, "iat_mean") == 0.5);
  CHECK(feature(f, "pkts_per_s") == 4.0);
}

TEST_CASE("single-packet flow has zero duration and rates") {
  FlowTable t;
  t.update(tcp(5, 60));
  const auto f = t.flush().front();
  CHECK(feature(f, "duration") == 0.0);
  CHECK(feature(f, "pkts_per_s") == 0.0);
  CHECK(feature(f, "iat_std") == 0.0);
  CHECK(feature(f, "len_std") == 0.0);
}

TEST_CASE("idle timeout is strict") {
  FlowTable t(60'000'000);
  CHECK(t.update(tcp(0, 60)).empty());
  CHECK(t.update(tcp(60'000'000, 60)).empty());  // exactly the timeout: same flow
  const auto sealed = t.update(tcp(120'000'001, 60));
  REQUIRE(sealed.size() == 1);
  CHECK(sealed[0].packet_count == 2);
  CHECK(t.open_flows() == 1);
  CHECK(t.flush().front().packet_count == 1);
}

TEST_CASE("idle flows of other keys are sealed by later traffic") {
  FlowTable t(1'000'000);
  auto other = tcp(0, 60);
  other.src_port = 9;
  t.update(other);
  t.update(tcp(500'000, 60));
  auto sealed = t.update(tcp(1'200'000, 60));
  REQUIRE(sealed.size() == 1);
  CHECK(sealed[0].key.src_port == 9);
  CHECK(t.open_flows() == 1);
}

TEST_CASE("late packets are clamped to the newest timestamp") {
  FlowTable t;
  t.update(tcp(2'000'000, 60));
  auto late = tcp(1'000'000, 60);
  late.src_port = 7;
  t.update(late);
  CHECK(t.clock_us() == 2'000'000);
  const auto f = t.snapshot(flow_key(late));
  REQUIRE(f.has_value());
  CHECK(f->first_us == 2'000'000);
}

TEST_CASE("streaming standard deviation matches a two-pass computation") {
  Rng rng(31);
  FlowTable t;
  std::vector<double> lens, gaps;
  std::uint64_t ts = 0;
  for (int i = 0; i < 500; ++i) {
    const auto len = static_cast<std::uint32_t>(uniform_int(rng, 40, 1500));
    const auto gap = static_cast<std::uint64_t>(uniform_int(rng, 1, 200000));
    if (i > 0) {
      ts += gap;
      gaps.push_back(static_cast<double>(gap) / 1e6);
    }
    lens.push_back(len);
    t.update(tcp(ts, len));
  }
  const auto f = t.flush().front();
  auto two_pass = [](const std::vector<double>& v) {
    const double mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
    double ss = 0;
    for (double x : v) ss += (x - mean) * (x - mean);
    return std::make_pair(mean, std::sqrt(ss / static_cast<double>(v.size())));
  };
  const auto [lm, ls] = two_pass(lens);
  const auto [im, is] = two_pass(gaps);
  CHECK(feature(f, "len_mean") == doctest::Approx(lm).epsilon(1e-9));
  CHECK(feature(f, "len_std") == doctest::Approx(ls).epsilon(1e-6));
  CHECK(feature(f, "iat_mean") == doctest::Approx(im).epsilon(1e-9));
  CHECK(feature(f, "iat_std") == doctest::Approx(is).epsilon(1e-6));
}

TEST_CASE("TCP flag counters and window statistics") {
  FlowTable t;
  t.update(tcp(0, 60, kSyn, 100));
  t.update(tcp(1, 60, kSyn | kAck, 300));
  t.update(tcp(2, 60, kAck | kPsh | kFin, 200));
  t.update(tcp(3, 60, kRst, 400));
  const auto f = t.flush().front();
  CHECK(feature(f, "syn_count") == 2);
  CHECK(feature(f, "ack_count") == 2);
  CHECK(feature(f, "fin_count") == 1);
  CHECK(feature(f, "rst_count") == 1);
  CHECK(feature(f, "psh_count") == 1);
  CHECK(feature(f, "flags_or") == (kSyn | kAck | kPsh | kFin | kRst));
  CHECK(feature(f, "win_min") == 100);
  CHECK(feature(f, "win_max") == 400);
  CHECK(feature(f, "win_mean") == 250);
}

TEST_CASE("UDP flows have zero TCP features") {
  FlowTable t;
  auto p = tcp(0, 80, 0, 0);
  p.protocol = kProtoUdp;
  p.header_len = 28;
  t.update(p);
  p.ts_us = 10;
  t.update(p);
  const auto f = t.flush().front();
  for (const char* name : {"syn_count", "ack_count", "fin_count", "rst_count", "psh_count", "flags_or", "win_min",
                           "win_max", "win_mean", "icmp_type", "icmp_seq"}) {
    CAPTURE(name);
    CHECK(feature(f, name) == 0.0);
  }
  CHECK(feature(f, "protocol") == 17);
}

TEST_CASE("feature schema") {
  CHECK(FeatureSchema::default_schema().size() == 24);
  CHECK(FeatureSchema::default_schema().names().front() == "duration");
  CHECK_THROWS_AS(FeatureSchema({"duration", "nope"}), ConfigError);
  CHECK_THROWS_AS(FeatureSchema({"duration", "duration"}), ConfigError);
  const auto a = FeatureSchema::from_json(nlohmann::json::parse(R"(["pkt_count","bytes_per_s"])"));
  const auto b = FeatureSchema::from_json(nlohmann::json::parse(R"({"features":["pkt_count","bytes_per_s"]})"));
  CHECK(a.names() == b.names());
  const auto schema = FeatureSchema::default_schema();
  const auto known = FeatureSchema::known_features();
  for (const auto& n : schema.names()) {
    CHECK(std::find(known.begin(), known.end(), n) != known.end());
  }
}

TEST_CASE("custom schema order is respected in the CSV") {
  FlowTable t;
  t.update(tcp(0, 100));
  t.update(tcp(250'000, 200));
  std::ostringstream out;
  write_feature_csv(out, t.flush(), FeatureSchema({"byte_count", "bytes_per_s", "hdr_len_mean"}), "Normal", "Attack_type");
  CHECK(out.str() == "byte_count,bytes_per_s,hdr_len_mean,Attack_type\n300,1200,40,Normal\n");
}

TEST_CASE("feature CSV loads back as a dataset") {
  const auto ex = extract_file("flows.pcap");
  std::ostringstream out;
  write_feature_csv(out, ex.flows, FeatureSchema::default_schema());
  std::istringstream in(out.str());
  const auto d = dataio::parse_csv(in, "label");
  CHECK(d.rows() == 6);
  CHECK(d.dim() == 24);
  CHECK(d.class_names == std::vector<std::string>{"unlabeled"});
}

TEST_CASE("replay source yields the same packets") {
  PcapReplaySource src(kFixtures + "/flows.pcap");
  std::size_t n = 0;
  while (src.next()) ++n;
  CHECK(n == 14);
  CHECK(src.stats().records == 18);
}
