// SPDX-License-Identifier: Apache-2.0
#include "vitptq/model_io.hpp"

#include <cmath>
#include <fstream>
#include <map>
#include <set>

#include "vitptq/errors.hpp"
#include "vitptq/rng.hpp"
#include "vitptq/train.hpp"

namespace vitptq::io {

namespace {

using nlohmann::json;

const char* const kModelKeys[] = {"kind", "architecture", "quantization"};

std::size_t get_size(const json& j, const char* key) {
  if (!j.contains(key) || !j[key].is_number_unsigned()) {
    throw FormatError(std::string("architecture field '") + key + "' must be a non-negative integer");
  }
  return j[key].get<std::size_t>();
}

std::string softmax_kind_name(SoftmaxQuantKind k) {
  switch (k) {
    case SoftmaxQuantKind::dfq:
      return "dfq";
    case SoftmaxQuantKind::uniform:
      return "uniform";
    case SoftmaxQuantKind::log2:
      return "log2";
  }
  return "dfq";
}

SoftmaxQuantKind softmax_kind_from(const std::string& s) {
  if (s == "dfq") return SoftmaxQuantKind::dfq;
  if (s == "uniform") return SoftmaxQuantKind::uniform;
  if (s == "log2") return SoftmaxQuantKind::log2;
  throw FormatError("unknown softmax quantizer kind '" + s + "'");
}

json softmax_to_json(const SoftmaxQuantizer& q) {
  json j = {{"kind", softmax_kind_name(q.kind)}, {"bits", q.bits}};
  if (q.kind == SoftmaxQuantKind::dfq) {
    j["interval"] = {q.interval.lower(), q.interval.upper()};
  } else {
    j["qparams"] = qparams_to_json(q.fixed);
  }
  return j;
}

SoftmaxQuantizer softmax_from_json(const json& j) {
  if (!j.is_object() || !j.contains("kind") || !j["kind"].is_string() || !j.contains("bits") ||
      !j["bits"].is_number_integer()) {
    throw FormatError("malformed softmax quantizer entry");
  }
  SoftmaxQuantizer q;
  q.kind = softmax_kind_from(j["kind"].get<std::string>());
  q.bits = j["bits"].get<int>();
  if (q.bits < 2 || q.bits > 16) throw FormatError("softmax quantizer bits out of range");
  if (q.kind == SoftmaxQuantKind::dfq) {
    const json& itv = j.value("interval", json());
    if (!itv.is_array() || itv.size() != 2 || !itv[0].is_number() || !itv[1].is_number()) {
      throw FormatError("dfq softmax quantizer needs a two-element interval");
    }
    const double lo = itv[0].get<double>(), hi = itv[1].get<double>();
    if (!(lo >= 0.0 && lo < hi && hi <= 1.0)) throw FormatError("dfq interval must satisfy 0 <= b1 < b2 <= 1");
    q.interval = quant::FocusInterval(lo, hi);
  } else {
    if (!j.contains("qparams")) throw FormatError("softmax quantizer needs qparams");
    q.fixed = qparams_from_json(j["qparams"]);
  }
  return q;
}

std::vector<LinearLayer*> mutable_linears(ModelGraph& g) {
  std::vector<LinearLayer*> out{&g.embed};
  for (auto& b : g.blocks)
    for (LinearLayer* l : b.linears()) out.push_back(l);
  out.push_back(&g.head);
  return out;
}

void fill(Tensor& dst, const StoredTensor& src) {
  if (dst.shape() != src.shape) {
    throw FormatError("tensor '" + src.name + "' has shape " + shape_str(src.shape) + ", expected " +
                      shape_str(dst.shape()));
  }
  auto d = dst.mutable_data();
  for (std::size_t i = 0; i < d.size(); ++i) d[i] = static_cast<double>(src.values[i]);
}

}  // namespace

json config_to_json(const ModelConfig& c) {
  return {{"image_size", c.image_size},
          {"patch_size", c.patch_size},
          {"channels", c.channels},
          {"num_classes", c.num_classes},
          {"dim", c.dim},
          {"depth", c.depth},
          {"heads", c.heads},
          {"mlp_dim", c.mlp_dim},
          {"tokens", c.tokens()},
          {"pooling", c.pooling == Pooling::cls ? "cls" : "mean"},
          {"gelu", c.gelu == ops::GeluKind::erf ? "erf" : "tanh"},
          {"ln_eps", c.ln_eps}};
}

ModelConfig config_from_json(const json& j) {
  if (!j.is_object()) throw FormatError("architecture metadata must be an object");
  static const std::set<std::string> known = {"image_size", "patch_size", "channels", "num_classes",
                                              "dim",        "depth",      "heads",    "mlp_dim",
                                              "tokens",     "pooling",    "gelu",     "ln_eps"};
  for (const auto& [k, v] : j.items()) {
    if (!known.contains(k)) throw FormatError("unknown architecture field '" + k + "'");
  }
  ModelConfig c;
  c.image_size = get_size(j, "image_size");
  c.patch_size = get_size(j, "patch_size");
  c.channels = get_size(j, "channels");
  c.num_classes = get_size(j, "num_classes");
  c.dim = get_size(j, "dim");
  c.depth = get_size(j, "depth");
  c.heads = get_size(j, "heads");
  c.mlp_dim = get_size(j, "mlp_dim");
  const std::string pooling = j.value("pooling", "mean");
  if (pooling != "mean" && pooling != "cls") throw FormatError("pooling must be 'mean' or 'cls'");
  c.pooling = pooling == "cls" ? Pooling::cls : Pooling::mean;
  const std::string gelu = j.value("gelu", "tanh");
  if (gelu != "tanh" && gelu != "erf") throw FormatError("gelu must be 'tanh' or 'erf'");
  c.gelu = gelu == "erf" ? ops::GeluKind::erf : ops::GeluKind::tanh;
  if (j.contains("ln_eps")) {
    if (!j["ln_eps"].is_number()) throw FormatError("ln_eps must be a number");
    c.ln_eps = j["ln_eps"].get<double>();
  }
  try {
    c.validate();
  } catch (const ContractError& e) {
    throw FormatError(std::string("inconsistent architecture: ") + e.what());
  }
  if (j.contains("tokens") && get_size(j, "tokens") != c.tokens()) {
    throw FormatError("architecture token count does not match the patch configuration");
  }
  return c;
}

json qparams_to_json(const quant::QuantParams& p) {
  return {{"bits", p.bits},
          {"granularity", p.granularity == quant::Granularity::per_channel ? "per_channel" : "per_tensor"},
          {"axis", p.axis},
          {"scale", p.scale},
          {"zero_point", p.zero_point}};
}

quant::QuantParams qparams_from_json(const json& j) {
  if (!j.is_object()) throw FormatError("quantizer parameters must be an object");
  quant::QuantParams p;
  try {
    p.bits = j.at("bits").get<int>();
    const std::string g = j.at("granularity").get<std::string>();
    if (g != "per_tensor" && g != "per_channel") throw FormatError("unknown granularity '" + g + "'");
    p.granularity = g == "per_channel" ? quant::Granularity::per_channel : quant::Granularity::per_tensor;
    p.axis = j.at("axis").get<std::size_t>();
    p.scale = j.at("scale").get<std::vector<double>>();
    p.zero_point = j.at("zero_point").get<std::vector<std::int64_t>>();
  } catch (const json::exception& e) {
    throw FormatError(std::string("malformed quantizer parameters: ") + e.what());
  }
  if (p.scale.size() != p.zero_point.size() || p.scale.empty()) {
    throw FormatError("quantizer scale and zero_point must be non-empty and of equal length");
  }
  try {
    p.validate();
  } catch (const ContractError& e) {
    throw FormatError(std::string("invalid quantizer parameters: ") + e.what());
  }
  return p;
}

bool is_quantized(const ModelGraph& g) {
  for (const LinearLayer* l : g.all_linears())
    if (l->weight_qp || l->input_qp || l->adapter) return true;
  for (const auto& b : g.blocks)
    if (b.softmax_q) return true;
  return false;
}

Container model_to_container(const ModelGraph& g, const json& extra) {
  Container c;
  if (!extra.is_object()) throw ContractError("extra manifest data must be an object");
  for (const auto& [k, v] : extra.items()) {
    for (const char* reserved : kModelKeys)
      if (k == reserved) throw ContractError("extra manifest key '" + k + "' is reserved");
    c.meta[k] = v;
  }
  c.meta["kind"] = "model";
  c.meta["architecture"] = config_to_json(g.config);
  if (is_quantized(g)) {
    json layers = json::object();
    for (const LinearLayer* l : g.all_linears()) {
      json e = json::object();
      if (l->weight_qp) e["weight_qp"] = qparams_to_json(*l->weight_qp);
      if (l->input_qp) e["input_qp"] = qparams_to_json(*l->input_qp);
      e["adapter_rank"] = l->adapter ? l->adapter->rank() : 0;
      layers[l->name] = std::move(e);
    }
    json softmax = json::array();
    for (const auto& b : g.blocks) softmax.push_back(b.softmax_q ? softmax_to_json(*b.softmax_q) : json());
    c.meta["quantization"] = {{"layers", std::move(layers)}, {"softmax", std::move(softmax)}};
  }
  for (const auto& [name, t] : g.named_tensors()) c.add(name, t);
  return c;
}

ModelGraph model_from_container(const Container& c) {
  if (c.meta.value("kind", "") != "model") throw FormatError("container does not hold a model");
  if (!c.meta.contains("architecture")) throw FormatError("model container has no architecture metadata");
  const ModelConfig cfg = config_from_json(c.meta["architecture"]);
  Rng rng(0);
  ModelGraph g = ModelGraph::init(cfg, rng);

  if (c.meta.contains("quantization")) {
    const json& q = c.meta["quantization"];
    if (!q.is_object() || !q.contains("layers") || !q["layers"].is_object()) {
      throw FormatError("malformed quantization metadata");
    }
    const json& layers = q["layers"];
    for (LinearLayer* l : mutable_linears(g)) {
      if (!layers.contains(l->name)) continue;
      const json& e = layers[l->name];
      if (!e.is_object()) throw FormatError("quantization entry for '" + l->name + "' is not an object");
      try {
        if (e.contains("weight_qp")) {
          l->weight_qp = qparams_from_json(e["weight_qp"]);
          l->weight_qp->check_shape(l->weight.shape());
        }
        if (e.contains("input_qp")) {
          l->input_qp = qparams_from_json(e["input_qp"]);
          if (l->input_qp->granularity == quant::Granularity::per_channel &&
              l->input_qp->channels() != l->in_features()) {
            throw FormatError("input quantizer channel count does not match the layer");
          }
        }
      } catch (const DimensionError& err) {
        throw FormatError("quantizer of '" + l->name + "': " + err.what());
      } catch (const FormatError& err) {
        throw FormatError("quantizer of '" + l->name + "': " + err.what());
      }
      const std::size_t rank = e.value("adapter_rank", std::size_t{0});
      if (rank > 0) {
        lowrank::LowRankAdapter a;
        a.down = Tensor::zeros({l->in_features(), rank});
        a.up = Tensor::zeros({rank, l->out_features()});
        a.down.set_requires_grad(true);
        a.up.set_requires_grad(true);
        l->adapter = std::move(a);
      }
    }
    for (const auto& [name, e] : layers.items()) {
      bool found = false;
      for (const LinearLayer* l : g.all_linears()) found = found || l->name == name;
      if (!found) throw FormatError("quantization metadata names unknown layer '" + name + "'");
    }
    if (q.contains("softmax")) {
      const json& sm = q["softmax"];
      if (!sm.is_array() || sm.size() != g.blocks.size()) {
        throw FormatError("softmax quantizer list must have one entry per block");
      }
      for (std::size_t i = 0; i < g.blocks.size(); ++i) {
        if (!sm[i].is_null()) g.blocks[i].softmax_q = softmax_from_json(sm[i]);
      }
    }
  }

  auto named = g.named_tensors();
  std::set<std::string> expected;
  for (auto& [name, t] : named) {
    expected.insert(name);
    const StoredTensor* s = c.find(name);
    if (!s) throw FormatError("model container is missing tensor '" + name + "'");
    fill(t, *s);
  }
  for (const auto& s : c.tensors) {
    if (!expected.contains(s.name)) throw FormatError("model container has unexpected tensor '" + s.name + "'");
  }
  return g;
}

void save_model(const ModelGraph& g, const std::filesystem::path& path, const json& extra) {
  save_container(model_to_container(g, extra), path);
}

ModelGraph load_model(const std::filesystem::path& path) {
  const Container c = load_container(path);
  try {
    return model_from_container(c);
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

ModelGraph round_trip(const ModelGraph& g) { return model_from_container(decode(encode(model_to_container(g)))); }

Container dataset_to_container(const Dataset& d) {
  if (d.images.rank() != 4 || d.images.dim(0) != d.size()) {
    throw DimensionError("dataset images must be [n, C, H, W] with one label per image");
  }
  Container c;
  c.meta["kind"] = "dataset";
  c.meta["num_classes"] = d.num_classes;
  c.add("images", d.images);
  std::vector<double> labels(d.labels.begin(), d.labels.end());
  c.add("labels", Tensor({d.size()}, std::move(labels)));
  return c;
}

Dataset dataset_from_container(const Container& c) {
  if (c.meta.value("kind", "") != "dataset") throw FormatError("container does not hold a dataset");
  if (!c.meta.contains("num_classes") || !c.meta["num_classes"].is_number_unsigned()) {
    throw FormatError("dataset container has no num_classes");
  }
  Dataset d;
  d.num_classes = c.meta["num_classes"].get<std::size_t>();
  const StoredTensor& images = c.at("images");
  const StoredTensor& labels = c.at("labels");
  if (images.shape.size() != 4) throw FormatError("dataset images must be [n, C, H, W]");
  if (labels.shape.size() != 1 || labels.shape[0] != images.shape[0]) {
    throw FormatError("dataset labels must be [n] with one label per image");
  }
  d.images = images.to_tensor();
  d.labels.reserve(labels.values.size());
  for (float v : labels.values) {
    if (!(v >= 0.0f) || v != std::floor(v) || static_cast<std::size_t>(v) >= d.num_classes) {
      throw FormatError("dataset label out of range");
    }
    d.labels.push_back(static_cast<std::size_t>(v));
  }
  return d;
}

void save_dataset(const Dataset& d, const std::filesystem::path& path) {
  save_container(dataset_to_container(d), path);
}

Dataset load_dataset(const std::filesystem::path& path) {
  const Container c = load_container(path);
  try {
    return dataset_from_container(c);
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

ReferenceCheck check_reference(const ModelGraph& g, const std::filesystem::path& sidecar) {
  std::ifstream in(sidecar);
  if (!in) throw std::runtime_error("cannot open " + sidecar.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw FormatError(sidecar.string() + ": " + e.what());
  }
  if (!j.is_object() || !j.contains("images") || !j["images"].is_string() || !j.contains("logits") ||
      !j["logits"].is_array()) {
    throw FormatError(sidecar.string() + ": reference sidecar needs 'images' and 'logits'");
  }
  ReferenceCheck r;
  if (j.contains("tolerance")) r.tolerance = j["tolerance"].get<double>();
  const Dataset data = load_dataset(sidecar.parent_path() / j["images"].get<std::string>());
  const json& ref = j["logits"];
  if (ref.size() != data.size()) throw FormatError("reference logits and images disagree on the sample count");
  const Tensor logits = predict_logits(g, data.images, Mode::fp);
  const std::size_t k = logits.dim(1);
  auto v = logits.data();
  for (std::size_t i = 0; i < ref.size(); ++i) {
    if (!ref[i].is_array() || ref[i].size() != k) throw FormatError("reference logits row has the wrong length");
    for (std::size_t c = 0; c < k; ++c) {
      const double d = std::abs(v[i * k + c] - ref[i][c].get<double>());
      r.max_abs_diff = std::isfinite(d) ? std::max(r.max_abs_diff, d) : HUGE_VAL;
    }
  }
  r.samples = ref.size();
  return r;
}

}  // namespace vitptq::io
