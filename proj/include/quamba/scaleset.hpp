#pragma once

#include <cstdint>
#include <cstdio>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <variant>

#include <nlohmann/json.hpp>

#include "quamba/error.hpp"
#include "quamba/quant.hpp"

namespace quamba {

inline std::string scheme_name(const QuantScheme& s) {
  struct {
    std::string operator()(const StaticSymmetricMax&) const { return "static_symmetric_max"; }
    std::string operator()(const StaticSymmetricPercentile&) const { return "static_symmetric_percentile"; }
    std::string operator()(const DynamicSymmetricMax&) const { return "dynamic_symmetric_max"; }
    std::string operator()(const StaticLog2&) const { return "static_log2"; }
    std::string operator()(const StaticAsymmetricPercentile&) const { return "static_asymmetric_percentile"; }
  } visitor;
  return std::visit(visitor, s);
}

inline std::optional<double> scheme_percentile(const QuantScheme& s) {
  if (const auto* a = std::get_if<StaticSymmetricPercentile>(&s)) return a->p;
  if (const auto* b = std::get_if<StaticAsymmetricPercentile>(&s)) return b->p;
  return std::nullopt;
}

inline QuantScheme parse_scheme(std::string_view name, std::optional<double> p) {
  auto need_p = [&]() {
    if (!p) throw Error("scheme '" + std::string(name) + "' requires a percentile");
    check_percentile(*p);
    return *p;
  };
  if (name == "static_symmetric_max") return StaticSymmetricMax{};
  if (name == "static_symmetric_percentile") return StaticSymmetricPercentile{need_p()};
  if (name == "dynamic_symmetric_max") return DynamicSymmetricMax{};
  if (name == "static_log2") return StaticLog2{};
  if (name == "static_asymmetric_percentile") return StaticAsymmetricPercentile{need_p()};
  throw Error("unknown quantization scheme '" + std::string(name) + "'");
}

struct ScaleEntry {
  double scale = 1.0;
  std::int32_t zero_point = 0;
  QuantScheme scheme = StaticSymmetricMax{};
};

// Named static scales, keyed "<layer>.<site>" (e.g. "layers.0.x"). Weight
// scales use the weight name ("layers.0.in_proj").
struct ScaleSet {
  static constexpr int kVersion = 1;
  int bits = kDefaultBits;
  std::map<std::string, ScaleEntry> sites;

  bool contains(const std::string& name) const { return sites.count(name) != 0; }

  const ScaleEntry& at(const std::string& name) const {
    auto it = sites.find(name);
    if (it == sites.end()) throw Error("scale set has no entry for site '" + name + "'");
    return it->second;
  }

  void set(const std::string& name, ScaleEntry e) {
    if (!(e.scale > 0.0)) throw Error("scale for site '" + name + "' must be positive");
    if (is_symmetric(e.scheme) && e.zero_point != 0) {
      throw Error("symmetric scale for site '" + name + "' has a nonzero zero point");
    }
    sites[name] = std::move(e);
  }

  friend bool operator==(const ScaleSet& a, const ScaleSet& b) {
    if (a.bits != b.bits || a.sites.size() != b.sites.size()) return false;
    for (const auto& [k, v] : a.sites) {
      auto it = b.sites.find(k);
      if (it == b.sites.end() || it->second.scale != v.scale || it->second.zero_point != v.zero_point ||
          scheme_name(it->second.scheme) != scheme_name(v.scheme) ||
          scheme_percentile(it->second.scheme) != scheme_percentile(v.scheme)) {
        return false;
      }
    }
    return true;
  }
};

namespace detail {

inline std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline std::string json_string(std::string_view s) { return nlohmann::json(std::string(s)).dump(); }

}  // namespace detail

// Keys sorted lexicographically, reals printed with 17 significant digits.
inline std::string to_json(const ScaleSet& set) {
  std::ostringstream os;
  os << "{\n  \"bit_width\": " << set.bits << ",\n  \"sites\": {";
  bool first = true;
  for (const auto& [name, e] : set.sites) {
    os << (first ? "\n" : ",\n");
    first = false;
    const auto p = scheme_percentile(e.scheme);
    os << "    " << detail::json_string(name) << ": {\"p\": "
       << (p ? detail::format_double(*p) : std::string("null"))
       << ", \"scale\": " << detail::format_double(e.scale)
       << ", \"scheme\": " << detail::json_string(scheme_name(e.scheme))
       << ", \"zero_point\": " << e.zero_point << "}";
  }
  os << (first ? "},\n" : "\n  },\n") << "  \"version\": " << ScaleSet::kVersion << "\n}\n";
  return os.str();
}

inline ScaleSet scaleset_from_json(const nlohmann::json& j) {
  try {
    if (j.at("version").get<int>() != ScaleSet::kVersion) throw Error("unsupported scale set version");
    ScaleSet set;
    set.bits = j.at("bit_width").get<int>();
    for (const auto& [name, e] : j.at("sites").items()) {
      std::optional<double> p;
      if (e.contains("p") && !e.at("p").is_null()) p = e.at("p").get<double>();
      set.set(name, ScaleEntry{e.at("scale").get<double>(), e.at("zero_point").get<std::int32_t>(),
                               parse_scheme(e.at("scheme").get<std::string>(), p)});
    }
    return set;
  } catch (const nlohmann::json::exception& ex) {
    throw Error(std::string("malformed scale set: ") + ex.what());
  }
}

inline ScaleSet parse_scaleset(std::string_view text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& ex) {
    throw Error(std::string("malformed scale set: ") + ex.what());
  }
  return scaleset_from_json(j);
}

inline void save_scaleset(const ScaleSet& set, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot open '" + path + "' for writing");
  out << to_json(set);
}

inline ScaleSet load_scaleset(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open scale set '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_scaleset(ss.str());
}

}  // namespace quamba
