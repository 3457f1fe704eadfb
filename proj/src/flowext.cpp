#include "hwids/flowext.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <thread>
#include <unordered_map>

namespace hwids::flowext {

namespace {

constexpr std::uint32_t kMagicMicros = 0xA1B2C3D4;
constexpr std::uint32_t kMagicNanos = 0xA1B23C4D;
constexpr std::uint32_t kLinkEthernet = 1;
constexpr std::uint32_t kMaxRecordBytes = 262144;

std::uint32_t bswap32(std::uint32_t v) {
  return (v >> 24) | ((v >> 8) & 0xFF00u) | ((v << 8) & 0xFF0000u) | (v << 24);
}

std::uint32_t read_le32(const std::uint8_t* p) {
  return static_cast<std::uint32_t>(p[0]) | static_cast<std::uint32_t>(p[1]) << 8 |
         static_cast<std::uint32_t>(p[2]) << 16 | static_cast<std::uint32_t>(p[3]) << 24;
}

std::uint16_t be16(const std::uint8_t* p) { return static_cast<std::uint16_t>(p[0] << 8 | p[1]); }

std::uint32_t be32(const std::uint8_t* p) {
  return static_cast<std::uint32_t>(p[0]) << 24 | static_cast<std::uint32_t>(p[1]) << 16 |
         static_cast<std::uint32_t>(p[2]) << 8 | static_cast<std::uint32_t>(p[3]);
}

}  // namespace

std::string ip_to_string(std::uint32_t ip) {
  return std::to_string(ip >> 24) + "." + std::to_string((ip >> 16) & 0xFF) + "." +
         std::to_string((ip >> 8) & 0xFF) + "." + std::to_string(ip & 0xFF);
}

void to_json(nlohmann::json& j, const ParseStats& s) {
  j = nlohmann::json{{"records", s.records},
                     {"parsed", s.parsed},
                     {"skipped_non_ipv4", s.skipped_non_ipv4},
                     {"skipped_protocol", s.skipped_protocol},
                     {"skipped_truncated", s.skipped_truncated}};
}

PcapReader::PcapReader(std::istream& in) : in_(in) {
  std::uint8_t hdr[24];
  if (!in_.read(reinterpret_cast<char*>(hdr), sizeof hdr)) throw DataError("pcap: file shorter than global header");
  const std::uint32_t magic = read_le32(hdr);
  if (magic == kMagicMicros || magic == kMagicNanos) {
    swapped_ = false;
    nanos_ = magic == kMagicNanos;
  } else if (bswap32(magic) == kMagicMicros || bswap32(magic) == kMagicNanos) {
    swapped_ = true;
    nanos_ = bswap32(magic) == kMagicNanos;
  } else {
    char text[16];
    std::snprintf(text, sizeof text, "0x%08X", magic);
    throw DataError(std::string("pcap: bad magic ") + text);
  }
  auto field = [&](int offset) {
    const std::uint32_t v = read_le32(hdr + offset);
    return swapped_ ? bswap32(v) : v;
  };
  snaplen_ = field(16);
  const std::uint32_t link = field(20);
  if (link != kLinkEthernet) throw DataError("pcap: unsupported link type " + std::to_string(link));
}

std::optional<PacketEvent> PcapReader::next() {
  for (;;) {
    std::uint8_t rec[16];
    in_.read(reinterpret_cast<char*>(rec), sizeof rec);
    if (in_.gcount() == 0) return std::nullopt;
    ++stats_.records;
    if (in_.gcount() < static_cast<std::streamsize>(sizeof rec)) {
      ++stats_.skipped_truncated;
      return std::nullopt;
    }
    auto field = [&](int offset) {
      const std::uint32_t v = read_le32(rec + offset);
      return swapped_ ? bswap32(v) : v;
    };
    const std::uint64_t sec = field(0);
    const std::uint64_t frac = field(4);
    const std::uint32_t incl = field(8);
    if (incl > kMaxRecordBytes) {
      // A corrupt length leaves no way to find the next record.
      ++stats_.skipped_truncated;
      return std::nullopt;
    }
    buf_.resize(incl);
    in_.read(reinterpret_cast<char*>(buf_.data()), incl);
    if (in_.gcount() < static_cast<std::streamsize>(incl)) {
      ++stats_.skipped_truncated;
      return std::nullopt;
    }
    const std::uint64_t ts = sec * 1'000'000 + (nanos_ ? frac / 1000 : frac);
    if (auto ev = decode_frame(buf_.data(), buf_.size(), ts, stats_)) {
      ++stats_.parsed;
      return ev;
    }
  }
}

std::optional<PacketEvent> decode_frame(const std::uint8_t* data, std::size_t len, std::uint64_t ts_us,
                                        ParseStats& stats) {
  if (len < 14) {
    ++stats.skipped_truncated;
    return std::nullopt;
  }
  std::size_t off = 12;
  std::uint16_t ethertype = be16(data + off);
  off += 2;
  while (ethertype == 0x8100 || ethertype == 0x88A8) {
    if (len < off + 4) {
      ++stats.skipped_truncated;
      return std::nullopt;
    }
    ethertype = be16(data + off + 2);
    off += 4;
  }
  if (ethertype != 0x0800) {
    ++stats.skipped_non_ipv4;
    return std::nullopt;
  }
  if (len < off + 20) {
    ++stats.skipped_truncated;
    return std::nullopt;
  }
  const std::uint8_t* ip = data + off;
  if ((ip[0] >> 4) != 4) {
    ++stats.skipped_non_ipv4;
    return std::nullopt;
  }
  const std::size_t ihl = static_cast<std::size_t>(ip[0] & 0x0F) * 4;
  if (ihl < 20 || len < off + ihl) {
    ++stats.skipped_truncated;
    return std::nullopt;
  }
  PacketEvent ev;
  ev.ts_us = ts_us;
  ev.total_len = be16(ip + 2);
  ev.protocol = ip[9];
  ev.src_ip = be32(ip + 12);
  ev.dst_ip = be32(ip + 16);
  const bool later_fragment = (be16(ip + 6) & 0x1FFF) != 0;
  if (later_fragment || (ev.protocol != kProtoTcp && ev.protocol != kProtoUdp && ev.protocol != kProtoIcmp)) {
    ++stats.skipped_protocol;
    return std::nullopt;
  }
  const std::uint8_t* l4 = ip + ihl;
  const std::size_t avail = len - off - ihl;
  std::size_t l4_len = 0;
  switch (ev.protocol) {
    case kProtoTcp: {
      if (avail < 20) break;
      l4_len = static_cast<std::size_t>(l4[12] >> 4) * 4;
      if (l4_len < 20 || avail < l4_len) {
        l4_len = 0;
        break;
      }
      ev.src_port = be16(l4);
      ev.dst_port = be16(l4 + 2);
      ev.tcp_flags = l4[13];
      ev.tcp_window = be16(l4 + 14);
      break;
    }
    case kProtoUdp:
      if (avail < 8) break;
      l4_len = 8;
      ev.src_port = be16(l4);
      ev.dst_port = be16(l4 + 2);
      break;
    default:
      if (avail < 8) break;
      l4_len = 8;
      ev.icmp_type = l4[0];
      ev.icmp_seq = be16(l4 + 6);
      break;
  }
  if (l4_len == 0) {
    ++stats.skipped_truncated;
    return std::nullopt;
  }
  ev.header_len = static_cast<std::uint32_t>(ihl + l4_len);
  if (ev.total_len < ev.header_len) {
    ++stats.skipped_truncated;
    return std::nullopt;
  }
  return ev;
}

PcapContents parse_pcap(std::istream& in) {
  PcapReader reader(in);
  PcapContents out;
  while (auto ev = reader.next()) out.events.push_back(*ev);
  out.stats = reader.stats();
  return out;
}

PcapContents parse_pcap(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return parse_pcap(in);
}

// ---------------------------------------------------------------------------

FlowKey flow_key(const PacketEvent& p) { return FlowKey{p.src_ip, p.dst_ip, p.src_port, p.dst_port, p.protocol}; }

std::string to_string(const FlowKey& k) {
  return ip_to_string(k.src_ip) + ":" + std::to_string(k.src_port) + "->" + ip_to_string(k.dst_ip) + ":" +
         std::to_string(k.dst_port) + "/" + std::to_string(k.protocol);
}

void to_json(nlohmann::json& j, const FlowKey& k) {
  j = nlohmann::json{{"src_ip", ip_to_string(k.src_ip)},
                     {"dst_ip", ip_to_string(k.dst_ip)},
                     {"src_port", k.src_port},
                     {"dst_port", k.dst_port},
                     {"protocol", k.protocol}};
}

void FlowRecord::add(const PacketEvent& p) {
  const double len = p.total_len;
  if (packet_count == 0) {
    key = flow_key(p);
    first_us = last_us = p.ts_us;
    len_min = len_max = len;
  } else {
    const double iat = static_cast<double>(p.ts_us - last_us);
    iat_sum += iat;
    iat_sumsq += iat * iat;
    ++iat_count;
    last_us = p.ts_us;
    len_min = std::min(len_min, len);
    len_max = std::max(len_max, len);
  }
  ++packet_count;
  byte_count += p.total_len;
  len_sum += len;
  len_sumsq += len * len;
  hdr_sum += p.header_len;
  if (p.protocol == kProtoTcp) {
    const double w = p.tcp_window;
    if (tcp_packets == 0) {
      win_min = win_max = w;
    } else {
      win_min = std::min(win_min, w);
      win_max = std::max(win_max, w);
    }
    win_sum += w;
    ++tcp_packets;
    flags_or |= p.tcp_flags;
    syn += (p.tcp_flags & kSyn) != 0;
    ack += (p.tcp_flags & kAck) != 0;
    fin += (p.tcp_flags & kFin) != 0;
    rst += (p.tcp_flags & kRst) != 0;
    psh += (p.tcp_flags & kPsh) != 0;
  } else if (p.protocol == kProtoIcmp) {
    icmp_type = p.icmp_type;
    icmp_seq = p.icmp_seq;
  }
}

std::vector<FlowRecord> FlowTable::update(PacketEvent p) {
  if (started_ && p.ts_us < clock_us_) p.ts_us = clock_us_;
  started_ = true;
  clock_us_ = p.ts_us;

  std::vector<FlowRecord> sealed;
  while (!by_last_.empty() && clock_us_ - by_last_.begin()->first > timeout_us_) {
    const FlowKey k = by_last_.begin()->second;
    by_last_.erase(by_last_.begin());
    auto it = flows_.find(k);
    sealed.push_back(it->second);
    flows_.erase(it);
  }

  const FlowKey k = flow_key(p);
  auto [it, inserted] = flows_.try_emplace(k);
  if (!inserted) by_last_.erase({it->second.last_us, k});
  it->second.add(p);
  by_last_.insert({it->second.last_us, k});
  return sealed;
}

std::vector<FlowRecord> FlowTable::flush() {
  std::vector<FlowRecord> out;
  out.reserve(flows_.size());
  for (auto& [k, r] : flows_) out.push_back(r);
  std::stable_sort(out.begin(), out.end(), [](const FlowRecord& a, const FlowRecord& b) {
    return std::tie(a.first_us, a.key) < std::tie(b.first_us, b.key);
  });
  flows_.clear();
  by_last_.clear();
  return out;
}

std::optional<FlowRecord> FlowTable::snapshot(const FlowKey& k) const {
  auto it = flows_.find(k);
  if (it == flows_.end()) return std::nullopt;
  return it->second;
}

// ---------------------------------------------------------------------------

namespace {

enum Formula : int {
  kDuration,
  kPktCount,
  kByteCount,
  kLenMin,
  kLenMax,
  kLenMean,
  kLenStd,
  kIatMean,
  kIatStd,
  kPktsPerS,
  kProtocol,
  kSrcPort,
  kDstPort,
  kSynCount,
  kAckCount,
  kFinCount,
  kRstCount,
  kPshCount,
  kFlagsOr,
  kWinMin,
  kWinMax,
  kWinMean,
  kIcmpType,
  kIcmpSeq,
  kBytesPerS,
  kHdrLenMean,
  kFormulaCount
};

const char* const kFormulaNames[kFormulaCount] = {
    "duration", "pkt_count", "byte_count", "len_min",   "len_max",   "len_mean",  "len_std",
    "iat_mean", "iat_std",   "pkts_per_s", "protocol",  "src_port",  "dst_port",  "syn_count",
    "ack_count", "fin_count", "rst_count", "psh_count", "flags_or",  "win_min",   "win_max",
    "win_mean", "icmp_type", "icmp_seq",   "bytes_per_s", "hdr_len_mean"};

constexpr int kDefaultSchemaSize = 24;

double pop_std(double sum, double sumsq, double n) {
  if (n <= 0) return 0.0;
  const double mean = sum / n;
  return std::sqrt(std::max(0.0, sumsq / n - mean * mean));
}

double evaluate(int formula, const FlowRecord& r) {
  const double n = static_cast<double>(r.packet_count);
  const double duration = static_cast<double>(r.last_us - r.first_us) / 1e6;
  switch (formula) {
    case kDuration: return duration;
    case kPktCount: return n;
    case kByteCount: return static_cast<double>(r.byte_count);
    case kLenMin: return r.len_min;
    case kLenMax: return r.len_max;
    case kLenMean: return n > 0 ? r.len_sum / n : 0.0;
    case kLenStd: return pop_std(r.len_sum, r.len_sumsq, n);
    case kIatMean: return r.iat_count ? r.iat_sum / static_cast<double>(r.iat_count) / 1e6 : 0.0;
    case kIatStd: return pop_std(r.iat_sum, r.iat_sumsq, static_cast<double>(r.iat_count)) / 1e6;
    case kPktsPerS: return duration > 0 ? n / duration : 0.0;
    case kProtocol: return r.key.protocol;
    case kSrcPort: return r.key.src_port;
    case kDstPort: return r.key.dst_port;
    case kSynCount: return static_cast<double>(r.syn);
    case kAckCount: return static_cast<double>(r.ack);
    case kFinCount: return static_cast<double>(r.fin);
    case kRstCount: return static_cast<double>(r.rst);
    case kPshCount: return static_cast<double>(r.psh);
    case kFlagsOr: return r.flags_or;
    case kWinMin: return r.win_min;
    case kWinMax: return r.win_max;
    case kWinMean: return r.tcp_packets ? r.win_sum / static_cast<double>(r.tcp_packets) : 0.0;
    case kIcmpType: return r.icmp_type;
    case kIcmpSeq: return r.icmp_seq;
    case kBytesPerS: return duration > 0 ? static_cast<double>(r.byte_count) / duration : 0.0;
    case kHdrLenMean: return n > 0 ? r.hdr_sum / n : 0.0;
    default: return 0.0;
  }
}

}  // namespace

FeatureSchema::FeatureSchema(std::vector<std::string> names) : names_(std::move(names)) {
  if (names_.empty()) throw ConfigError("feature schema is empty");
  std::set<std::string> seen;
  for (const auto& name : names_) {
    if (!seen.insert(name).second) throw ConfigError("feature schema: duplicate feature '" + name + "'");
    const auto* it = std::find(std::begin(kFormulaNames), std::end(kFormulaNames), name);
    if (it == std::end(kFormulaNames)) throw ConfigError("feature schema: unknown feature '" + name + "'");
    formulas_.push_back(static_cast<int>(it - std::begin(kFormulaNames)));
  }
}

FeatureSchema FeatureSchema::default_schema() {
  return FeatureSchema(std::vector<std::string>(kFormulaNames, kFormulaNames + kDefaultSchemaSize));
}

std::vector<std::string> FeatureSchema::known_features() {
  return std::vector<std::string>(std::begin(kFormulaNames), std::end(kFormulaNames));
}

FeatureSchema FeatureSchema::from_json(const nlohmann::json& j) {
  const auto& list = j.is_object() ? j.at("features") : j;
  if (!list.is_array()) throw ConfigError("feature schema must be an array of names");
  return FeatureSchema(list.get<std::vector<std::string>>());
}

FeatureSchema FeatureSchema::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("feature schema " + path.string() + ": " + e.what());
  }
  return from_json(j);
}

std::vector<double> extract_features(const FlowRecord& r, const FeatureSchema& s) {
  std::vector<double> out;
  out.reserve(s.formulas_.size());
  for (int f : s.formulas_) out.push_back(evaluate(f, r));
  return out;
}

FlowExtraction extract_flows(std::istream& pcap, std::uint64_t idle_timeout_us) {
  PcapReader reader(pcap);
  FlowTable table(idle_timeout_us);
  FlowExtraction out;
  while (auto ev = reader.next()) {
    auto sealed = table.update(*ev);
    out.flows.insert(out.flows.end(), sealed.begin(), sealed.end());
  }
  auto rest = table.flush();
  out.flows.insert(out.flows.end(), rest.begin(), rest.end());
  out.stats = reader.stats();
  return out;
}

void write_feature_csv(std::ostream& out, const std::vector<FlowRecord>& flows, const FeatureSchema& schema,
                       const std::string& label, const std::string& label_column) {
  std::vector<const FlowRecord*> order;
  for (const auto& f : flows) order.push_back(&f);
  std::stable_sort(order.begin(), order.end(), [](const FlowRecord* a, const FlowRecord* b) {
    return std::tie(a->first_us, a->key) < std::tie(b->first_us, b->key);
  });
  for (const auto& name : schema.names()) out << name << ',';
  out << label_column << '\n';
  for (const auto* f : order) {
    for (double v : extract_features(*f, schema)) out << format_g(v, 10) << ',';
    out << label << '\n';
  }
}

// ---------------------------------------------------------------------------

PcapReplaySource::PcapReplaySource(const std::filesystem::path& path, double speed)
    : file_(path, std::ios::binary), speed_(speed) {
  if (!file_) throw IoError("cannot open " + path.string());
  if (speed < 0) throw ConfigError("replay speed must be >= 0");
  reader_ = std::make_unique<PcapReader>(file_);
}

std::optional<PacketEvent> PcapReplaySource::next() {
  auto ev = reader_->next();
  if (!ev || speed_ <= 0) return ev;
  if (!first_ts_) {
    first_ts_ = ev->ts_us;
    start_ = std::chrono::steady_clock::now();
    return ev;
  }
  const double offset_us = static_cast<double>(ev->ts_us > *first_ts_ ? ev->ts_us - *first_ts_ : 0) / speed_;
  std::this_thread::sleep_until(start_ + std::chrono::microseconds(static_cast<std::int64_t>(offset_us)));
  return ev;
}

}  // namespace hwids::flowext
