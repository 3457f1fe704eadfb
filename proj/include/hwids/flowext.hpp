#pragma once

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <istream>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "hwids/common.hpp"
#include "json.hpp"

namespace hwids::flowext {

// IP protocol numbers handled by the parser.
inline constexpr std::uint8_t kProtoIcmp = 1;
inline constexpr std::uint8_t kProtoTcp = 6;
inline constexpr std::uint8_t kProtoUdp = 17;

// TCP flag bits.
inline constexpr std::uint8_t kFin = 0x01;
inline constexpr std::uint8_t kSyn = 0x02;
inline constexpr std::uint8_t kRst = 0x04;
inline constexpr std::uint8_t kPsh = 0x08;
inline constexpr std::uint8_t kAck = 0x10;

/// One parsed IPv4 packet. Addresses are host-order integers.
struct PacketEvent {
  std::uint64_t ts_us = 0;
  std::uint32_t src_ip = 0;
  std::uint32_t dst_ip = 0;
  std::uint16_t src_port = 0;  // 0 for ICMP
  std::uint16_t dst_port = 0;
  std::uint8_t protocol = 0;
  std::uint32_t total_len = 0;   // IPv4 total length
  std::uint32_t header_len = 0;  // IPv4 + transport header bytes
  std::uint8_t tcp_flags = 0;
  std::uint16_t tcp_window = 0;
  std::uint8_t icmp_type = 0;
  std::uint16_t icmp_seq = 0;  // network byte order in the packet

  bool operator==(const PacketEvent&) const = default;
};

std::string ip_to_string(std::uint32_t ip);

struct ParseStats {
  std::uint64_t records = 0;          // pcap records read
  std::uint64_t parsed = 0;           // events produced
  std::uint64_t skipped_non_ipv4 = 0; // ARP, IPv6, other ethertypes
  std::uint64_t skipped_protocol = 0; // IPv4 but not TCP/UDP/ICMP, or non-first fragments
  std::uint64_t skipped_truncated = 0;

  std::uint64_t skipped() const { return skipped_non_ipv4 + skipped_protocol + skipped_truncated; }
};

void to_json(nlohmann::json& j, const ParseStats& s);

/// Streaming reader for classic pcap (both byte orders, micro- and
/// nanosecond magic) with Ethernet link type and optional 802.1Q tags.
class PcapReader {
 public:
  /// Reads the global header. Throws DataError on bad magic or link type.
  explicit PcapReader(std::istream& in);

  /// Next parseable packet; std::nullopt at end of file.
  std::optional<PacketEvent> next();
  const ParseStats& stats() const { return stats_; }

 private:
  std::istream& in_;
  bool swapped_ = false;
  bool nanos_ = false;
  std::uint32_t snaplen_ = 0;
  ParseStats stats_;
  std::vector<std::uint8_t> buf_;
};

/// Decodes one Ethernet frame. Returns nullopt (and bumps the matching
/// counter) when the frame is not a usable IPv4 TCP/UDP/ICMP packet.
std::optional<PacketEvent> decode_frame(const std::uint8_t* data, std::size_t len, std::uint64_t ts_us,
                                        ParseStats& stats);

struct PcapContents {
  std::vector<PacketEvent> events;
  ParseStats stats;
};

PcapContents parse_pcap(std::istream& in);
PcapContents parse_pcap(const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// Flows

/// Directed 5-tuple.
struct FlowKey {
  std::uint32_t src_ip = 0;
  std::uint32_t dst_ip = 0;
  std::uint16_t src_port = 0;
  std::uint16_t dst_port = 0;
  std::uint8_t protocol = 0;

  auto operator<=>(const FlowKey&) const = default;
};

FlowKey flow_key(const PacketEvent& p);
std::string to_string(const FlowKey& k);
void to_json(nlohmann::json& j, const FlowKey& k);

/// Streaming per-flow counters; nothing per-packet is retained.
struct FlowRecord {
  FlowKey key;
  std::uint64_t first_us = 0;
  std::uint64_t last_us = 0;
  std::uint64_t packet_count = 0;
  std::uint64_t byte_count = 0;
  std::uint64_t syn = 0, ack = 0, fin = 0, rst = 0, psh = 0;
  std::uint8_t flags_or = 0;
  double len_min = 0, len_max = 0, len_sum = 0, len_sumsq = 0;
  double iat_sum = 0, iat_sumsq = 0;  // microseconds
  std::uint64_t iat_count = 0;
  std::uint64_t tcp_packets = 0;
  double win_min = 0, win_max = 0, win_sum = 0;
  double hdr_sum = 0;
  std::uint8_t icmp_type = 0;
  std::uint16_t icmp_seq = 0;

  void add(const PacketEvent& p);
};

/// Unidirectional flow table with idle-timeout expiry. Flows idle for
/// strictly more than the timeout are sealed when a later packet arrives.
class FlowTable {
 public:
  explicit FlowTable(std::uint64_t idle_timeout_us = 60'000'000) : timeout_us_(idle_timeout_us) {}

  /// Adds a packet and returns the flows sealed by it, ordered by
  /// (last timestamp, key). A packet older than the newest one seen is
  /// treated as arriving at the newest timestamp.
  std::vector<FlowRecord> update(PacketEvent p);

  /// Seals every open flow, ordered by (first timestamp, key).
  std::vector<FlowRecord> flush();

  std::optional<FlowRecord> snapshot(const FlowKey& k) const;
  std::size_t open_flows() const { return flows_.size(); }
  std::uint64_t clock_us() const { return clock_us_; }

 private:
  std::uint64_t timeout_us_;
  std::uint64_t clock_us_ = 0;
  bool started_ = false;
  std::map<FlowKey, FlowRecord> flows_;
  std::set<std::pair<std::uint64_t, FlowKey>> by_last_;
};

// ---------------------------------------------------------------------------
// Features

/// Ordered feature names, each bound to a known extraction formula.
class FeatureSchema {
 public:
  /// Throws ConfigError on unknown or duplicate names.
  explicit FeatureSchema(std::vector<std::string> names);

  static FeatureSchema default_schema();
  /// Names every formula this build knows.
  static std::vector<std::string> known_features();

  /// Accepts {"features": [...]} or a bare array.
  static FeatureSchema from_json(const nlohmann::json& j);
  static FeatureSchema load(const std::filesystem::path& path);

  const std::vector<std::string>& names() const { return names_; }
  std::size_t size() const { return names_.size(); }

 private:
  std::vector<std::string> names_;
  std::vector<int> formulas_;

  friend std::vector<double> extract_features(const FlowRecord& r, const FeatureSchema& s);
};

/// Values in schema order. Durations and inter-arrival times in seconds;
/// standard deviations use population variance.
std::vector<double> extract_features(const FlowRecord& r, const FeatureSchema& s);

/// Replays a pcap through a flow table and returns every flow, sealed ones
/// first in sealing order, then the remainder at end of capture.
struct FlowExtraction {
  std::vector<FlowRecord> flows;
  ParseStats stats;
};

FlowExtraction extract_flows(std::istream& pcap, std::uint64_t idle_timeout_us = 60'000'000);

/// Feature CSV readable by dataio::load_csv: schema columns plus a label
/// column carrying `label` for every flow. Rows are sorted by
/// (first timestamp, key). Numbers are written with %.10g.
void write_feature_csv(std::ostream& out, const std::vector<FlowRecord>& flows, const FeatureSchema& schema,
                       const std::string& label = "unlabeled", const std::string& label_column = "label");

// ---------------------------------------------------------------------------
// Packet sources

/// Capture adapter interface; live capture drivers implement the same shape.
class PacketSource {
 public:
  virtual ~PacketSource() = default;
  /// Blocks until the next packet is due; nullopt when the source is exhausted.
  virtual std::optional<PacketEvent> next() = 0;
  virtual ParseStats stats() const = 0;
};

/// Replays a pcap file. speed = 0 replays as fast as possible; speed = 1
/// reproduces the original inter-packet gaps; speed = 2 halves them.
class PcapReplaySource : public PacketSource {
 public:
  explicit PcapReplaySource(const std::filesystem::path& path, double speed = 0.0);

  std::optional<PacketEvent> next() override;
  ParseStats stats() const override { return reader_->stats(); }

 private:
  std::ifstream file_;
  std::unique_ptr<PcapReader> reader_;
  double speed_;
  std::optional<std::uint64_t> first_ts_;
  std::chrono::steady_clock::time_point start_;
};

}  // namespace hwids::flowext
