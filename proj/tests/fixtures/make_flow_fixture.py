#!/usr/bin/env python3
"""Builds flows.pcap (and a byte-swapped copy) from hand-specified packets and
writes the expected feature CSV computed directly from the packet list.

Run from this directory:  python3 make_flow_fixture.py
"""
import math
import struct

ETH_IPV4 = 0x0800


def ip(a):
    return struct.unpack("!I", bytes(int(x) for x in a.split(".")))[0]


def eth(ethertype, vlan=None):
    dst = bytes.fromhex("020000000002")
    src = bytes.fromhex("020000000001")
    if vlan is None:
        return dst + src + struct.pack("!H", ethertype)
    return dst + src + struct.pack("!HHH", 0x8100, vlan, ethertype)


def ipv4(src, dst, proto, l4):
    total = 20 + len(l4)
    hdr = struct.pack("!BBHHHBBH4s4s", 0x45, 0, total, 1, 0, 64, proto, 0,
                      struct.pack("!I", ip(src)), struct.pack("!I", ip(dst)))
    return hdr + l4


def tcp(sport, dport, flags, window, payload):
    return struct.pack("!HHIIBBHHH", sport, dport, 1, 0, 5 << 4, flags, window, 0, 0) + b"x" * payload


def udp(sport, dport, payload):
    return struct.pack("!HHHH", sport, dport, 8 + payload, 0) + b"u" * payload


def icmp(typ, seq, payload):
    return struct.pack("!BBHHH", typ, 0, 0, 0x1234, seq) + b"i" * payload


FIN, SYN, RST, PSH, ACK = 0x01, 0x02, 0x04, 0x08, 0x10
T0 = 1_700_000_000

# (timestamp_us, frame bytes, decoded packet or None)
packets = []


def add(ts, frame, pkt=None):
    packets.append((ts, frame, pkt))


def add_tcp(ts, src, sp, dst, dp, flags, win, payload, vlan=None):
    l4 = tcp(sp, dp, flags, win, payload)
    add(ts, eth(ETH_IPV4, vlan) + ipv4(src, dst, 6, l4),
        dict(src=src, dst=dst, sp=sp, dp=dp, proto=6, length=40 + payload, hdr=40, flags=flags, win=win))


def add_udp(ts, src, sp, dst, dp, payload, vlan=None):
    l4 = udp(sp, dp, payload)
    add(ts, eth(ETH_IPV4, vlan) + ipv4(src, dst, 17, l4),
        dict(src=src, dst=dst, sp=sp, dp=dp, proto=17, length=28 + payload, hdr=28))


def add_icmp(ts, src, dst, typ, seq, payload):
    l4 = icmp(typ, seq, payload)
    add(ts, eth(ETH_IPV4) + ipv4(src, dst, 1, l4),
        dict(src=src, dst=dst, sp=0, dp=0, proto=1, length=28 + payload, hdr=28, icmp_type=typ, icmp_seq=seq))


us = lambda s: int(round((T0 + s) * 1_000_000))

# TCP handshake plus data, client -> server and server -> client directions.
add_tcp(us(0.000000), "10.0.0.1", 40000, "10.0.0.2", 80, SYN, 64240, 0)
add_tcp(us(0.010000), "10.0.0.2", 80, "10.0.0.1", 40000, SYN | ACK, 65160, 0)
add_tcp(us(0.020000), "10.0.0.1", 40000, "10.0.0.2", 80, ACK, 502, 0)
add_tcp(us(0.050000), "10.0.0.1", 40000, "10.0.0.2", 80, ACK | PSH, 502, 120)
add_tcp(us(0.090000), "10.0.0.2", 80, "10.0.0.1", 40000, ACK | PSH, 509, 1000)
# ARP request: not IPv4.
add(us(0.100000), eth(0x0806) + bytes(28))
# UDP over an 802.1Q tag.
add_udp(us(0.150000), "10.0.0.3", 5353, "10.0.0.4", 53, 30, vlan=10)
add_tcp(us(0.160000), "10.0.0.1", 40000, "10.0.0.2", 80, FIN | ACK, 502, 0)
# ICMP echo requests.
add_icmp(us(0.200000), "10.0.0.5", "10.0.0.6", 8, 7, 56)
add_icmp(us(1.200000), "10.0.0.5", "10.0.0.6", 8, 8, 56)
# IPv6 frame: not IPv4.
add(us(1.300000), eth(0x86DD) + bytes(40))
# IPv4 GRE: unsupported protocol.
add(us(1.400000), eth(ETH_IPV4) + ipv4("10.0.0.7", "10.0.0.8", 47, bytes(8)))
# TCP frame cut inside the TCP header.
cut = eth(ETH_IPV4) + ipv4("10.0.0.9", "10.0.0.10", 6, tcp(1, 2, SYN, 1, 0))
add(us(1.500000), cut[:14 + 20 + 10])
add_icmp(us(2.200000), "10.0.0.5", "10.0.0.6", 8, 9, 56)
# Same UDP key 70 s later: the earlier flow is idle > 60 s and gets sealed.
add_udp(us(70.150000), "10.0.0.3", 5353, "10.0.0.4", 53, 44, vlan=10)
# Out-of-order timestamp: clamped to the newest seen (70.15 s).
add_tcp(us(70.100000), "10.0.0.1", 40001, "10.0.0.2", 443, SYN, 64240, 0)
add_udp(us(70.400000), "10.0.0.3", 5353, "10.0.0.4", 53, 12, vlan=10)
add_tcp(us(71.000000), "10.0.0.1", 40001, "10.0.0.2", 443, RST, 0, 0)


def pcap_bytes(endian, nanos=False):
    magic = 0xA1B23C4D if nanos else 0xA1B2C3D4
    out = struct.pack(endian + "IHHiIII", magic, 2, 4, 0, 0, 65535, 1)
    for ts, frame, _ in packets:
        sec, frac = divmod(ts, 1_000_000)
        if nanos:
            frac *= 1000
        out += struct.pack(endian + "IIII", sec, frac, len(frame), len(frame)) + frame
    return out


# --- expected flows -------------------------------------------------------

TIMEOUT = 60_000_000
SCHEMA = ["duration", "pkt_count", "byte_count", "len_min", "len_max", "len_mean", "len_std", "iat_mean",
          "iat_std", "pkts_per_s", "protocol", "src_port", "dst_port", "syn_count", "ack_count", "fin_count",
          "rst_count", "psh_count", "flags_or", "win_min", "win_max", "win_mean", "icmp_type", "icmp_seq"]


def pstd(xs):
    if not xs:
        return 0.0
    m = sum(xs) / len(xs)
    return math.sqrt(sum((x - m) ** 2 for x in xs) / len(xs))


def group_flows():
    """Returns lists of (timestamp, packet) per flow, in the order flows open."""
    clock = None
    open_flows = {}
    done = []
    for ts, _, pkt in packets:
        if pkt is None:
            continue
        clock = ts if clock is None else max(clock, ts)
        for key in [k for k, v in open_flows.items() if clock - v[-1][0] > TIMEOUT]:
            done.append(open_flows.pop(key))
        key = (ip(pkt["src"]), ip(pkt["dst"]), pkt["sp"], pkt["dp"], pkt["proto"])
        open_flows.setdefault(key, []).append((clock, pkt))
    done.extend(open_flows.values())
    return done


def features(flow):
    ts = [t for t, _ in flow]
    ps = [p for _, p in flow]
    lens = [p["length"] for p in ps]
    iats = [b - a for a, b in zip(ts, ts[1:])]
    duration = (ts[-1] - ts[0]) / 1e6
    tcp_ps = [p for p in ps if p["proto"] == 6]
    wins = [p["win"] for p in tcp_ps]
    icmp_ps = [p for p in ps if p["proto"] == 1]
    flag = lambda bit: sum(1 for p in tcp_ps if p["flags"] & bit)
    flags_or = 0
    for p in tcp_ps:
        flags_or |= p["flags"]
    n = len(ps)
    return {
        "duration": duration,
        "pkt_count": n,
        "byte_count": sum(lens),
        "len_min": min(lens),
        "len_max": max(lens),
        "len_mean": sum(lens) / n,
        "len_std": pstd(lens),
        "iat_mean": (sum(iats) / len(iats) / 1e6) if iats else 0.0,
        "iat_std": pstd(iats) / 1e6,
        "pkts_per_s": n / duration if duration > 0 else 0.0,
        "protocol": ps[0]["proto"],
        "src_port": ps[0]["sp"],
        "dst_port": ps[0]["dp"],
        "syn_count": flag(SYN),
        "ack_count": flag(ACK),
        "fin_count": flag(FIN),
        "rst_count": flag(RST),
        "psh_count": flag(PSH),
        "flags_or": flags_or,
        "win_min": min(wins) if wins else 0,
        "win_max": max(wins) if wins else 0,
        "win_mean": sum(wins) / len(wins) if wins else 0.0,
        "icmp_type": icmp_ps[-1]["icmp_type"] if icmp_ps else 0,
        "icmp_seq": icmp_ps[-1]["icmp_seq"] if icmp_ps else 0,
    }


def main():
    with open("flows.pcap", "wb") as f:
        f.write(pcap_bytes("<"))
    with open("flows_be.pcap", "wb") as f:
        f.write(pcap_bytes(">"))
    with open("flows_ns.pcap", "wb") as f:
        f.write(pcap_bytes("<", nanos=True))

    flows = group_flows()
    key = lambda fl: (fl[0][0], ip(fl[0][1]["src"]), ip(fl[0][1]["dst"]), fl[0][1]["sp"], fl[0][1]["dp"],
                      fl[0][1]["proto"])
    flows.sort(key=key)
    with open("flows_golden.csv", "w", newline="") as f:
        f.write(",".join(SCHEMA) + ",label\n")
        for fl in flows:
            feats = features(fl)
            f.write(",".join("%.10g" % feats[name] for name in SCHEMA) + ",unlabeled\n")
    parsed = sum(1 for _, _, p in packets if p is not None)
    print(f"{len(packets)} records, {parsed} parsed, {len(flows)} flows")


if __name__ == "__main__":
    main()
