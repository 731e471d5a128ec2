#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "minpart/common.hpp"
#include "minpart/nets.hpp"
#include "minpart/serialize.hpp"

namespace minpart {

/// Checkpoint file layout: a 4-byte little-endian header length, the JSON
/// header (net specs, segment layouts, free-form meta), then one flat
/// little-endian float64 array per entry, each in segment order.
struct CheckpointEntry {
  std::string name;
  NetSpec spec;
  ParamVector params;
};

struct Checkpoint {
  std::vector<CheckpointEntry> entries;
  Json meta;

  const CheckpointEntry& entry(const std::string& name) const {
    for (const auto& e : entries)
      if (e.name == name) return e;
    throw ConfigError("checkpoint has no entry named '" + name + "'");
  }
  bool has_entry(const std::string& name) const {
    for (const auto& e : entries)
      if (e.name == name) return true;
    return false;
  }
};

namespace detail {

inline void write_u32_le(std::ostream& out, std::uint32_t v) {
  unsigned char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xffu);
  out.write(reinterpret_cast<const char*>(b), 4);
}

inline std::uint32_t read_u32_le(std::istream& in) {
  unsigned char b[4];
  in.read(reinterpret_cast<char*>(b), 4);
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
  return v;
}

inline void write_f64_le(std::ostream& out, double d) {
  std::uint64_t bits;
  std::memcpy(&bits, &d, 8);
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>((bits >> (8 * i)) & 0xffu);
  out.write(reinterpret_cast<const char*>(b), 8);
}

inline double read_f64_le(std::istream& in) {
  unsigned char b[8];
  in.read(reinterpret_cast<char*>(b), 8);
  std::uint64_t bits = 0;
  for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  double d;
  std::memcpy(&d, &bits, 8);
  return d;
}

}  // namespace detail

inline void save_checkpoint(const std::string& path,
                            const std::vector<CheckpointEntry>& entries,
                            const Json& meta = Json::object()) {
  Json header;
  header["format_version"] = 1;
  header["meta"] = meta;
  header["entries"] = Json::array();
  for (const auto& e : entries) {
    Json je;
    je["name"] = e.name;
    je["spec"] = net_spec_to_json(e.spec);
    je["count"] = e.params.size();
    Json segs = Json::array();
    for (const auto& s : e.params.segments)
      segs.push_back(Json{{"name", s.name}, {"rows", s.rows}, {"cols", s.cols}});
    je["segments"] = segs;
    header["entries"].push_back(je);
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ParseError("cannot write checkpoint " + path);
  const std::string hs = header.dump();
  detail::write_u32_le(out, static_cast<std::uint32_t>(hs.size()));
  out.write(hs.data(), static_cast<std::streamsize>(hs.size()));
  for (const auto& e : entries)
    for (double v : e.params.values) detail::write_f64_le(out, v);
  if (!out) throw ParseError("short write to checkpoint " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ParseError("cannot open checkpoint " + path);
  const std::uint32_t hlen = detail::read_u32_le(in);
  std::string hs(hlen, '\0');
  in.read(hs.data(), static_cast<std::streamsize>(hlen));
  if (!in) throw ParseError("truncated checkpoint header in " + path);
  Json header;
  try {
    header = Json::parse(hs);
  } catch (const std::exception& e) {
    throw ParseError("bad checkpoint header in " + path + ": " + e.what());
  }
  Checkpoint ck;
  ck.meta = header.value("meta", Json::object());
  for (const auto& je : header.at("entries")) {
    CheckpointEntry e;
    e.name = je.at("name").get<std::string>();
    e.spec = net_spec_from_json(je.at("spec"));
    e.params = make_params(e.spec);
    if (e.params.size() != je.at("count").get<std::size_t>())
      throw ParseError("checkpoint entry '" + e.name + "' has unexpected size");
    for (double& v : e.params.values) v = detail::read_f64_le(in);
    ck.entries.push_back(std::move(e));
  }
  if (!in) throw ParseError("truncated checkpoint payload in " + path);
  return ck;
}

}  // namespace minpart
