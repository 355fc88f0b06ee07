// SPDX-License-Identifier: Apache-2.0
#include "hptr/model_config.hpp"

#include <fstream>
#include <set>
#include <sstream>

#include "json.hpp"

#include "hptr/error.hpp"

namespace hptr {

using nlohmann::json;

const char* topology_name(Topology t) {
  switch (t) {
    case Topology::kLowerTri: return "lower_tri";
    case Topology::kDiag: return "diag";
    case Topology::kFull: return "full";
    case Topology::kDiagFull: return "diag_full";
  }
  return "lower_tri";
}

Topology parse_topology(const std::string& name) {
  if (name == "lower_tri") return Topology::kLowerTri;
  if (name == "diag") return Topology::kDiag;
  if (name == "full") return Topology::kFull;
  if (name == "diag_full") return Topology::kDiagFull;
  throw ParseError("unknown topology '" + name + "'");
}

ModelConfig ModelConfig::tiny() {
  ModelConfig c;
  c.dim = 16;
  c.heads = 2;
  c.ff_dim = 32;
  c.k = 8;
  c.layers = {1, 1, 1, 1, 1, 1, 1};
  c.t_f = 4;
  return c;
}

ModelConfig ModelConfig::bench() {
  ModelConfig c;
  c.dim = 64;
  c.heads = 4;
  c.ff_dim = 256;
  return c;
}

void ModelConfig::validate() const {
  auto fail = [](const std::string& msg) { throw ContractError("model config: " + msg); };
  if (dim == 0 || dim % 2 != 0) fail("dim must be even and positive");
  if (heads == 0 || dim % heads != 0) fail("heads must divide dim");
  if (ff_dim == 0) fail("ff_dim must be positive");
  if (!(dropout >= 0.0 && dropout < 1.0)) fail("dropout must be in [0, 1)");
  if (!(omega > 0.0)) fail("omega must be positive");
  if (pe_exponent_sign != 1 && pe_exponent_sign != -1) fail("pe_exponent_sign must be +1 or -1");
  if (k == 0 || gamma_tl == 0 || gamma_ag == 0 || gamma_ac == 0) {
    fail("neighbor counts must be positive");
  }
  if (n_anchors == 0) fail("n_anchors must be positive");
  if (t_f <= 0 || agent_types <= 0 || c_mp <= 0 || c_tl <= 0) {
    fail("t_f, agent_types, c_mp and c_tl must be positive");
  }
  const LayerCounts& l = layers;
  for (int n : {l.intra_mp, l.intra_tl, l.intra_ag, l.enhance_tl, l.enhance_ag, l.all2all,
                l.ac2all}) {
    if (n <= 0) fail("layer counts must be positive");
  }
}

EncodingConfig ModelConfig::encoding() const {
  EncodingConfig e;
  e.dim = static_cast<int>(dim);
  e.omega = omega;
  e.pe_exponent_sign = pe_exponent_sign;
  return e;
}

AttentionOptions ModelConfig::attention() const {
  AttentionOptions o;
  o.heads = heads;
  o.per_head_scaling = per_head_scaling;
  return o;
}

std::string model_config_to_json(const ModelConfig& c) {
  json j = {{"dim", c.dim},
            {"heads", c.heads},
            {"ff_dim", c.ff_dim},
            {"dropout", c.dropout},
            {"omega", c.omega},
            {"pe_exponent_sign", c.pe_exponent_sign},
            {"per_head_scaling", c.per_head_scaling},
            {"k", c.k},
            {"gamma_tl", c.gamma_tl},
            {"gamma_ag", c.gamma_ag},
            {"gamma_ac", c.gamma_ac},
            {"n_anchors", c.n_anchors},
            {"topology", topology_name(c.topology)},
            {"t_f", c.t_f},
            {"agent_types", c.agent_types},
            {"c_mp", c.c_mp},
            {"c_tl", c.c_tl},
            {"anchor_init_scale", c.anchor_init_scale}};
  j["layers"] = {{"intra_mp", c.layers.intra_mp},     {"intra_tl", c.layers.intra_tl},
                 {"intra_ag", c.layers.intra_ag},     {"enhance_tl", c.layers.enhance_tl},
                 {"enhance_ag", c.layers.enhance_ag}, {"all2all", c.layers.all2all},
                 {"ac2all", c.layers.ac2all}};
  return j.dump(2);
}

namespace {

template <typename V>
void read(const json& j, const char* key, V& out, std::set<std::string>& seen,
          const std::string& prefix = "") {
  if (!j.contains(key)) return;
  seen.insert(key);
  try {
    out = j.at(key).get<V>();
  } catch (const json::exception&) {
    throw ParseError("config field " + prefix + key + ": wrong type");
  }
}

void reject_unknown(const json& j, const std::set<std::string>& seen, const std::string& prefix) {
  for (const auto& item : j.items()) {
    if (!seen.count(item.key())) throw ParseError("config field " + prefix + item.key() + ": unknown");
  }
}

}  // namespace

ModelConfig model_config_from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ParseError(std::string("config is not valid JSON: ") + e.what());
  }
  if (!j.is_object()) throw ParseError("config must be a JSON object");
  ModelConfig c;
  std::set<std::string> seen;
  read(j, "dim", c.dim, seen);
  read(j, "heads", c.heads, seen);
  read(j, "ff_dim", c.ff_dim, seen);
  read(j, "dropout", c.dropout, seen);
  read(j, "omega", c.omega, seen);
  read(j, "pe_exponent_sign", c.pe_exponent_sign, seen);
  read(j, "per_head_scaling", c.per_head_scaling, seen);
  read(j, "k", c.k, seen);
  read(j, "gamma_tl", c.gamma_tl, seen);
  read(j, "gamma_ag", c.gamma_ag, seen);
  read(j, "gamma_ac", c.gamma_ac, seen);
  read(j, "n_anchors", c.n_anchors, seen);
  read(j, "t_f", c.t_f, seen);
  read(j, "agent_types", c.agent_types, seen);
  read(j, "c_mp", c.c_mp, seen);
  read(j, "c_tl", c.c_tl, seen);
  read(j, "anchor_init_scale", c.anchor_init_scale, seen);
  std::string topo = topology_name(c.topology);
  read(j, "topology", topo, seen);
  c.topology = parse_topology(topo);
  if (j.contains("layers")) {
    seen.insert("layers");
    const json& l = j.at("layers");
    std::set<std::string> lseen;
    read(l, "intra_mp", c.layers.intra_mp, lseen, "layers.");
    read(l, "intra_tl", c.layers.intra_tl, lseen, "layers.");
    read(l, "intra_ag", c.layers.intra_ag, lseen, "layers.");
    read(l, "enhance_tl", c.layers.enhance_tl, lseen, "layers.");
    read(l, "enhance_ag", c.layers.enhance_ag, lseen, "layers.");
    read(l, "all2all", c.layers.all2all, lseen, "layers.");
    read(l, "ac2all", c.layers.ac2all, lseen, "layers.");
    reject_unknown(l, lseen, "layers.");
  }
  reject_unknown(j, seen, "");
  c.validate();
  return c;
}

ModelConfig load_model_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open config file " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return model_config_from_json(buf.str());
}

void save_model_config(const std::filesystem::path& path, const ModelConfig& cfg) {
  std::ofstream out(path);
  if (!out) throw Error("cannot open " + path.string() + " for writing");
  out << model_config_to_json(cfg) << '\n';
}

}  // namespace hptr
