#include "hwids/hwcost.hpp"

#include <algorithm>
#include <limits>

namespace hwids::hwcost {

Budget Budget::unbounded() {
  constexpr auto inf = std::numeric_limits<std::uint64_t>::max();
  return Budget{inf, inf, inf};
}

void to_json(nlohmann::json& j, const Profile& p) {
  j = nlohmann::json{{"flash_bytes", p.flash_bytes},
                     {"ram_bytes", p.ram_bytes},
                     {"compute", p.compute},
                     {"compute_unit", p.unit == ComputeUnit::Ops ? "Ops" : "FLOPs"}};
}

void from_json(const nlohmann::json& j, Profile& p) {
  j.at("flash_bytes").get_to(p.flash_bytes);
  j.at("ram_bytes").get_to(p.ram_bytes);
  j.at("compute").get_to(p.compute);
  p.unit = j.at("compute_unit").get<std::string>() == "FLOPs" ? ComputeUnit::Flops : ComputeUnit::Ops;
}

void to_json(nlohmann::json& j, const Budget& b) {
  j = nlohmann::json{{"flash_max", b.flash_max}, {"ram_max", b.ram_max}, {"compute_max", b.compute_max}};
}

Profile profile_tree_ensemble(const trees::Ensemble& m) {
  Profile p;
  p.unit = ComputeUnit::Ops;
  std::uint64_t max_depth = 0;
  for (const auto& t : m.trees) {
    const auto depth = static_cast<std::uint64_t>(t.depth());
    p.flash_bytes += t.nodes.size() * kTreeNodeBytes + kTreeHeaderBytes;
    p.compute += depth + 1;
    max_depth = std::max(max_depth, depth);
  }
  p.ram_bytes = max_depth * kTraversalFrameBytes + static_cast<std::uint64_t>(m.n_classes) * kScalarBytes +
                static_cast<std::uint64_t>(m.n_features) * kScalarBytes + kTreeFixedStateBytes;
  return p;
}

std::uint64_t cnn_parameter_count(const cnn::Arch& arch) {
  const auto trace = cnn::shape_trace(arch);
  std::uint64_t params = 0;
  std::uint64_t channels = 1;
  std::uint64_t flat = static_cast<std::uint64_t>(arch.input_len);
  std::size_t b = 0;
  for (const auto& layer : trace) {
    if (layer.kind == "conv") {
      const auto c_out = static_cast<std::uint64_t>(layer.channels);
      const auto k = static_cast<std::uint64_t>(arch.blocks[b++].kernel);
      params += k * channels * c_out + c_out + 4 * c_out;
      channels = c_out;
    }
    if (layer.kind == "conv" || layer.kind == "pool") {
      flat = static_cast<std::uint64_t>(layer.length) * static_cast<std::uint64_t>(layer.channels);
    }
  }
  params += (flat + 1) * static_cast<std::uint64_t>(arch.n_classes);
  return params;
}

Profile profile_cnn(const cnn::Arch& arch) {
  const auto trace = cnn::shape_trace(arch);
  Profile p;
  p.unit = ComputeUnit::Flops;

  std::uint64_t flops = 0;
  // Activation sizes in execution order, for the ping-pong RAM estimate.
  std::vector<std::uint64_t> activations{static_cast<std::uint64_t>(arch.input_len)};
  std::uint64_t channels = 1;
  std::uint64_t current = static_cast<std::uint64_t>(arch.input_len);
  for (std::size_t i = 1; i < trace.size(); ++i) {
    const auto& layer = trace[i];
    const auto len = static_cast<std::uint64_t>(layer.length);
    const auto ch = static_cast<std::uint64_t>(layer.channels);
    const auto elems = len * ch;
    if (layer.kind == "conv") {
      const auto k = static_cast<std::uint64_t>(arch.blocks[static_cast<std::size_t>(layer.block)].kernel);
      flops += elems * (2 * k * channels + 1);  // convolution
      flops += 2 * elems;                       // batch norm scale + shift
      flops += elems;                           // ReLU
      activations.insert(activations.end(), {elems, elems, elems});
      channels = ch;
    } else if (layer.kind == "pool") {
      const auto size = static_cast<std::uint64_t>(arch.blocks[static_cast<std::size_t>(layer.block)].pool_size);
      flops += size * elems;
      activations.push_back(elems);
    } else if (layer.kind == "dense") {
      const auto out = static_cast<std::uint64_t>(arch.n_classes);
      flops += 2 * current * out + out;
      flops += 5 * out;  // softmax
      activations.insert(activations.end(), {out, out});
    }
    if (layer.kind != "dense") current = elems;
  }
  std::uint64_t peak = 0;
  for (std::size_t i = 1; i < activations.size(); ++i) peak = std::max(peak, activations[i - 1] + activations[i]);

  p.compute = flops;
  p.flash_bytes = kScalarBytes * cnn_parameter_count(arch);
  p.ram_bytes = kScalarBytes * peak;
  return p;
}

Verdict check_budget(const Profile& p, const Budget& b) {
  Verdict v;
  v.flash_ok = p.flash_bytes <= b.flash_max;
  v.ram_ok = p.ram_bytes <= b.ram_max;
  v.compute_ok = p.compute <= b.compute_max;
  v.feasible = v.flash_ok && v.ram_ok && v.compute_ok;
  v.flash_slack = static_cast<double>(b.flash_max) - static_cast<double>(p.flash_bytes);
  v.ram_slack = static_cast<double>(b.ram_max) - static_cast<double>(p.ram_bytes);
  v.compute_slack = static_cast<double>(b.compute_max) - static_cast<double>(p.compute);
  return v;
}

}  // namespace hwids::hwcost
