#pragma once

#include <cstdio>
#include <string>

#include "json.hpp"

#include "minpart/common.hpp"
#include "minpart/data.hpp"
#include "minpart/energy.hpp"
#include "minpart/nets.hpp"
#include "minpart/spaces.hpp"
#include "minpart/training.hpp"

namespace minpart {

using Json = nlohmann::json;

inline NetKind net_kind_from_string(const std::string& s) {
  if (s == "linear") return NetKind::Linear;
  if (s == "mlp") return NetKind::MLP;
  if (s == "resnet") return NetKind::ResNet;
  if (s == "icnn") return NetKind::ICNN;
  if (s == "per_example_table") return NetKind::PerExampleTable;
  throw ConfigError("unknown net kind '" + s + "'");
}

inline Activation activation_from_string(const std::string& s) {
  if (s == "relu") return Activation::Relu;
  if (s == "softplus") return Activation::Softplus;
  throw ConfigError("unknown activation '" + s + "'");
}

inline SpaceKind space_kind_from_string(const std::string& s) {
  if (s == "binary_vectors") return SpaceKind::BinaryVectors;
  if (s == "permutation_vectors") return SpaceKind::PermutationVectors;
  if (s == "permutation_matrices") return SpaceKind::PermutationMatrices;
  throw ConfigError("unknown space kind '" + s + "'");
}

inline CouplingKind coupling_kind_from_string(const std::string& s) {
  if (s == "bilinear") return CouplingKind::Bilinear;
  if (s == "linear_quadratic") return CouplingKind::LinearQuadratic;
  throw ConfigError("unknown coupling '" + s + "'");
}

inline LossKind loss_kind_from_string(const std::string& s) {
  if (s == "minmin_kl") return LossKind::MinMinKL;
  if (s == "minmin_sparsemax") return LossKind::MinMinSparsemax;
  if (s == "exact_mle") return LossKind::ExactMle;
  if (s == "mcmc") return LossKind::Mcmc;
  if (s == "minmax") return LossKind::MinMax;
  if (s == "gfy") return LossKind::Gfy;
  throw ConfigError("unknown loss '" + s + "'");
}

inline Json net_spec_to_json(const NetSpec& spec) {
  Json j;
  j["kind"] = to_string(spec.kind);
  j["input_dim"] = spec.input_dim;
  j["output_dim"] = spec.output_dim;
  j["hidden_dims"] = spec.hidden_dims;
  j["activation"] = to_string(spec.activation);
  j["table_size"] = spec.table_size;
  return j;
}

inline NetSpec net_spec_from_json(const Json& j) {
  NetSpec spec;
  spec.kind = net_kind_from_string(j.at("kind").get<std::string>());
  spec.input_dim = j.value("input_dim", 0);
  spec.output_dim = j.value("output_dim", 0);
  spec.hidden_dims = j.value("hidden_dims", std::vector<int>{});
  spec.activation = activation_from_string(j.value("activation", std::string("relu")));
  spec.table_size = j.value("table_size", 0);
  return spec;
}

inline Json space_to_json(const OutputSpace& s) {
  return Json{{"kind", to_string(s.kind)}, {"k", s.k}};
}

inline OutputSpace space_from_json(const Json& j) {
  return OutputSpace{space_kind_from_string(j.at("kind").get<std::string>()),
                     j.at("k").get<int>()};
}

inline Json coupling_to_json(const Coupling& c) {
  return Json{{"kind", to_string(c.kind)}, {"k", c.k}, {"rank", c.rank}};
}

inline Coupling coupling_from_json(const Json& j) {
  return Coupling{coupling_kind_from_string(j.at("kind").get<std::string>()),
                  j.at("k").get<int>(), j.value("rank", 0)};
}

inline Json standardization_to_json(const Standardization& st) {
  return Json{{"mean", st.mean}, {"scale", st.scale}};
}

inline Standardization standardization_from_json(const Json& j) {
  Standardization st;
  st.mean = j.at("mean").get<std::vector<double>>();
  st.scale = j.at("scale").get<std::vector<double>>();
  return st;
}

/// Stable 64-bit FNV-1a digest of the canonical (sorted-key) JSON dump.
inline std::string json_digest(const Json& j) {
  const std::string dump = j.dump();
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : dump) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace minpart
