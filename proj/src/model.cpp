// SPDX-License-Identifier: Apache-2.0
#include "vitptq/model.hpp"

#include <cmath>

#include "vitptq/errors.hpp"

namespace vitptq {

namespace {

// Per-channel activation parameters always address the last axis of
// whatever rank the activation arrives in.
quant::QuantParams for_activation(const quant::QuantParams& qp, const Tensor& x) {
  if (qp.granularity != quant::Granularity::per_channel) return qp;
  quant::QuantParams p = qp;
  p.axis = x.rank() - 1;
  return p;
}

void observe(const Observer* observer, std::string_view site, const Tensor& value) {
  if (observer && *observer) (*observer)(site, value);
}

Tensor as_batch(const Tensor& x, std::size_t dim, bool& squeezed) {
  squeezed = false;
  if (x.rank() == 2) {
    squeezed = true;
    if (x.dim(1) != dim) throw DimensionError("block input " + shape_str(x.shape()) + " does not have width " + std::to_string(dim));
    return ops::reshape(x, {1, x.dim(0), x.dim(1)});
  }
  if (x.rank() != 3 || x.dim(2) != dim) {
    throw DimensionError("block input " + shape_str(x.shape()) + " is not [B, T, " + std::to_string(dim) + "]");
  }
  return x;
}

LinearLayer make_linear(std::string name, std::size_t in, std::size_t out, Rng& rng) {
  LinearLayer l;
  l.name = std::move(name);
  l.weight = Tensor::randn({in, out}, rng, 1.0 / std::sqrt(static_cast<double>(in)));
  l.weight.set_requires_grad(true);
  l.bias = Tensor::zeros({out});
  l.bias->set_requires_grad(true);
  return l;
}

LayerNormParams make_norm(std::size_t d) {
  LayerNormParams p{Tensor::ones({d}), Tensor::zeros({d})};
  p.gamma.set_requires_grad(true);
  p.beta.set_requires_grad(true);
  return p;
}

Tensor copy_param(const Tensor& t) {
  Tensor c = t.detach();
  if (t.requires_grad()) c.set_requires_grad(true);
  return c;
}

LinearLayer clone_linear(const LinearLayer& l) {
  LinearLayer c;
  c.name = l.name;
  c.weight = copy_param(l.weight);
  if (l.bias) c.bias = copy_param(*l.bias);
  if (l.adapter) c.adapter = lowrank::LowRankAdapter{copy_param(l.adapter->down), copy_param(l.adapter->up)};
  if (l.search) {
    lowrank::RankSearchState st = *l.search;
    st.alpha = copy_param(l.search->alpha);
    for (auto& a : st.adapters) a = lowrank::LowRankAdapter{copy_param(a.down), copy_param(a.up)};
    c.search = std::move(st);
  }
  c.weight_qp = l.weight_qp;
  c.input_qp = l.input_qp;
  return c;
}

LayerNormParams clone_norm(const LayerNormParams& p) { return {copy_param(p.gamma), copy_param(p.beta)}; }

void push_linear(std::vector<std::pair<std::string, Tensor>>& out, const LinearLayer& l) {
  out.emplace_back(l.name + ".weight", l.weight);
  if (l.bias) out.emplace_back(l.name + ".bias", *l.bias);
  if (l.adapter) {
    out.emplace_back(l.name + ".adapter.down", l.adapter->down);
    out.emplace_back(l.name + ".adapter.up", l.adapter->up);
  }
}

}  // namespace

Tensor LinearLayer::effective_weight() const { return adapter ? ops::add(weight, adapter->delta()) : weight; }

Tensor LinearLayer::forward(const Tensor& x, Mode mode) const {
  if (x.rank() < 1 || x.shape().back() != in_features()) {
    throw DimensionError(name + ": input " + shape_str(x.shape()) + " does not match weight " + shape_str(weight.shape()));
  }
  const bool quantize = mode == Mode::quant;
  if (quantize && (adapter || search) && (!weight_qp || !input_qp)) {
    throw StateError(name + ": low-rank compensation requires calibrated weight and input quantizers");
  }
  Tensor xq = (quantize && input_qp) ? quant::fake_quant(x, for_activation(*input_qp, x)) : x;
  Tensor y;
  if (search) {
    Tensor w = (quantize && weight_qp) ? quant::fake_quant(weight, *weight_qp) : weight;
    y = ops::add(ops::matmul(xq, w), lowrank::mixed_correction(xq, *search));
  } else {
    Tensor w = effective_weight();
    if (quantize && weight_qp) w = quant::fake_quant(w, *weight_qp);
    y = ops::matmul(xq, w);
  }
  if (bias) y = ops::add(y, *bias);
  return y;
}

Tensor SoftmaxQuantizer::apply(const Tensor& probs) const {
  switch (kind) {
    case SoftmaxQuantKind::dfq:
      return quant::dfq_quant(probs, interval, bits);
    case SoftmaxQuantKind::uniform:
      return quant::fake_quant(probs, fixed);
    case SoftmaxQuantKind::log2:
      return quant::fake_quant_log2(probs, fixed);
  }
  throw ContractError("unknown softmax quantizer kind");
}

Tensor mhsa_forward(const Tensor& x_in, const TransformerBlock& blk, Mode mode, const Observer* observer) {
  bool squeezed = false;
  const std::size_t d = blk.dim();
  Tensor x = as_batch(x_in, d, squeezed);
  const std::size_t dh = blk.head_dim;
  if (blk.qkv.in_features() != d || blk.qkv.out_features() != 3 * d || blk.proj.in_features() != d ||
      blk.proj.out_features() != d) {
    throw DimensionError("attention weights do not chain for width " + std::to_string(d));
  }

  observe(observer, "qkv.in", x);
  const Tensor qkv = blk.qkv.forward(x, mode);
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  std::vector<Tensor> heads;
  heads.reserve(blk.heads);
  for (std::size_t h = 0; h < blk.heads; ++h) {
    const Tensor q = ops::slice(qkv, 2, h * dh, dh);
    const Tensor k = ops::slice(qkv, 2, d + h * dh, dh);
    const Tensor v = ops::slice(qkv, 2, 2 * d + h * dh, dh);
    Tensor probs = ops::softmax(ops::scale(ops::matmul(q, ops::transpose(k)), inv_sqrt), 2);
    observe(observer, "softmax", probs);
    if (mode == Mode::quant && blk.softmax_q) probs = blk.softmax_q->apply(probs);
    heads.push_back(ops::matmul(probs, v));
  }
  const Tensor cat = heads.size() == 1 ? heads.front() : ops::concat(heads, 2);
  observe(observer, "proj.in", cat);
  Tensor out = blk.proj.forward(cat, mode);
  if (squeezed) out = ops::reshape(out, {out.dim(1), out.dim(2)});
  return out;
}

Tensor block_forward(const Tensor& x_in, const TransformerBlock& blk, Mode mode, const Observer* observer) {
  bool squeezed = false;
  Tensor x = as_batch(x_in, blk.dim(), squeezed);
  const Tensor attn = mhsa_forward(ops::layernorm(x, blk.ln1.gamma, blk.ln1.beta, blk.ln_eps), blk, mode, observer);
  const Tensor mid = ops::add(x, attn);
  const Tensor h = ops::layernorm(mid, blk.ln2.gamma, blk.ln2.beta, blk.ln_eps);
  observe(observer, "fc1.in", h);
  const Tensor act = ops::gelu(blk.fc1.forward(h, mode), blk.gelu);
  observe(observer, "fc2.in", act);
  Tensor out = ops::add(mid, blk.fc2.forward(act, mode));
  if (squeezed) out = ops::reshape(out, {out.dim(1), out.dim(2)});
  return out;
}

void ModelConfig::validate() const {
  if (image_size == 0 || patch_size == 0 || image_size % patch_size != 0) {
    throw ContractError("image_size must be a positive multiple of patch_size");
  }
  if (channels == 0 || num_classes == 0 || dim == 0 || depth == 0 || heads == 0 || mlp_dim == 0) {
    throw ContractError("model dimensions must be positive");
  }
  if (dim % heads != 0) throw ContractError("dim must be divisible by heads");
  if (!(ln_eps > 0.0)) throw ContractError("ln_eps must be positive");
}

ModelConfig ModelConfig::unit_toy() { return ModelConfig{}; }

ModelConfig ModelConfig::integration_toy() {
  ModelConfig c;
  c.image_size = 32;
  c.patch_size = 4;
  c.dim = 64;
  c.depth = 4;
  c.heads = 4;
  c.mlp_dim = 256;
  return c;
}

ModelGraph ModelGraph::init(const ModelConfig& config, Rng& rng) {
  config.validate();
  ModelGraph g;
  g.config = config;
  const std::size_t d = config.dim;
  g.embed = make_linear("embed", config.patch_dim(), d, rng);
  g.pos_embed = Tensor::randn({config.tokens(), d}, rng, 0.02);
  g.pos_embed.set_requires_grad(true);
  if (config.pooling == Pooling::cls) {
    g.cls_token = Tensor::randn({1, d}, rng, 0.02);
    g.cls_token->set_requires_grad(true);
  }
  for (std::size_t i = 0; i < config.depth; ++i) {
    const std::string p = "blocks." + std::to_string(i) + ".";
    TransformerBlock b;
    b.heads = config.heads;
    b.head_dim = d / config.heads;
    b.ln_eps = config.ln_eps;
    b.gelu = config.gelu;
    b.ln1 = make_norm(d);
    b.qkv = make_linear(p + "qkv", d, 3 * d, rng);
    b.proj = make_linear(p + "proj", d, d, rng);
    b.ln2 = make_norm(d);
    b.fc1 = make_linear(p + "fc1", d, config.mlp_dim, rng);
    b.fc2 = make_linear(p + "fc2", config.mlp_dim, d, rng);
    g.blocks.push_back(std::move(b));
  }
  g.norm = make_norm(d);
  g.head = make_linear("head", d, config.num_classes, rng);
  return g;
}

std::vector<std::pair<std::string, Tensor>> ModelGraph::named_tensors() const {
  std::vector<std::pair<std::string, Tensor>> out;
  push_linear(out, embed);
  out.emplace_back("pos_embed", pos_embed);
  if (cls_token) out.emplace_back("cls_token", *cls_token);
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    const auto& b = blocks[i];
    const std::string p = "blocks." + std::to_string(i) + ".";
    out.emplace_back(p + "ln1.gamma", b.ln1.gamma);
    out.emplace_back(p + "ln1.beta", b.ln1.beta);
    push_linear(out, b.qkv);
    push_linear(out, b.proj);
    out.emplace_back(p + "ln2.gamma", b.ln2.gamma);
    out.emplace_back(p + "ln2.beta", b.ln2.beta);
    push_linear(out, b.fc1);
    push_linear(out, b.fc2);
  }
  out.emplace_back("norm.gamma", norm.gamma);
  out.emplace_back("norm.beta", norm.beta);
  push_linear(out, head);
  return out;
}

std::vector<Tensor> ModelGraph::parameters() const {
  std::vector<Tensor> p;
  for (auto& [name, t] : named_tensors()) {
    if (name.find(".adapter.") == std::string::npos) p.push_back(t);
  }
  return p;
}

ModelGraph ModelGraph::clone() const {
  ModelGraph g;
  g.config = config;
  g.embed = clone_linear(embed);
  g.pos_embed = copy_param(pos_embed);
  if (cls_token) g.cls_token = copy_param(*cls_token);
  for (const auto& b : blocks) {
    TransformerBlock c;
    c.heads = b.heads;
    c.head_dim = b.head_dim;
    c.ln_eps = b.ln_eps;
    c.gelu = b.gelu;
    c.ln1 = clone_norm(b.ln1);
    c.qkv = clone_linear(b.qkv);
    c.proj = clone_linear(b.proj);
    c.ln2 = clone_norm(b.ln2);
    c.fc1 = clone_linear(b.fc1);
    c.fc2 = clone_linear(b.fc2);
    if (b.softmax_q) {
      c.softmax_q = *b.softmax_q;
      c.softmax_q->interval = b.softmax_q->interval.copy();
    }
    g.blocks.push_back(std::move(c));
  }
  g.norm = clone_norm(norm);
  g.head = clone_linear(head);
  return g;
}

std::vector<const LinearLayer*> ModelGraph::all_linears() const {
  std::vector<const LinearLayer*> out{&embed};
  for (const auto& b : blocks)
    for (const LinearLayer* l : b.linears()) out.push_back(l);
  out.push_back(&head);
  return out;
}

Tensor patchify(const Tensor& images, const ModelConfig& config) {
  const Shape expected{config.channels, config.image_size, config.image_size};
  if (images.rank() != 4 || !std::equal(expected.begin(), expected.end(), images.shape().begin() + 1)) {
    throw DimensionError("images " + shape_str(images.shape()) + " do not match [B, " + std::to_string(config.channels) +
                         ", " + std::to_string(config.image_size) + ", " + std::to_string(config.image_size) + "]");
  }
  const std::size_t batch = images.dim(0);
  const std::size_t c = config.channels;
  const std::size_t s = config.image_size;
  const std::size_t p = config.patch_size;
  const std::size_t grid = config.grid();
  const std::size_t pd = config.patch_dim();
  auto in = images.data();
  std::vector<double> out(batch * grid * grid * pd);
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t gy = 0; gy < grid; ++gy)
      for (std::size_t gx = 0; gx < grid; ++gx) {
        double* dst = out.data() + ((b * grid + gy) * grid + gx) * pd;
        for (std::size_t ch = 0; ch < c; ++ch)
          for (std::size_t i = 0; i < p; ++i)
            for (std::size_t j = 0; j < p; ++j)
              dst[(ch * p + i) * p + j] = in[((b * c + ch) * s + gy * p + i) * s + gx * p + j];
      }
  return Tensor({batch, grid * grid, pd}, std::move(out));
}

Tensor embed_forward(const Tensor& images, const ModelGraph& g, Mode mode) {
  const Tensor patches = patchify(images, g.config);
  Tensor x = g.embed.forward(patches, mode);
  if (g.cls_token) {
    const Tensor cls = ops::reshape(*g.cls_token, {1, 1, g.config.dim});
    std::vector<Tensor> rows;
    rows.reserve(images.dim(0));
    for (std::size_t b = 0; b < images.dim(0); ++b) rows.push_back(cls);
    const Tensor cls_b = rows.size() == 1 ? rows.front() : ops::concat(rows, 0);
    x = ops::concat({cls_b, x}, 1);
  }
  return ops::add(x, g.pos_embed);
}

Tensor head_forward(const Tensor& x, const ModelGraph& g, Mode mode) {
  const Tensor n = ops::layernorm(x, g.norm.gamma, g.norm.beta, g.config.ln_eps);
  Tensor pooled;
  if (g.config.pooling == Pooling::cls) {
    pooled = ops::reshape(ops::slice(n, 1, 0, 1), {x.dim(0), x.dim(2)});
  } else {
    pooled = ops::mean_axis(n, 1);
  }
  return g.head.forward(pooled, mode);
}

Tensor model_forward(const Tensor& images, const ModelGraph& g, Mode mode) {
  Tensor x = embed_forward(images, g, mode);
  for (const auto& b : g.blocks) x = block_forward(x, b, mode);
  return head_forward(x, g, mode);
}

Tensor gather_rows(const Tensor& t, std::span<const std::size_t> rows) {
  if (rows.empty()) throw ContractError("gather_rows with no rows");
  const std::size_t n = t.dim(0);
  const std::size_t per = t.numel() / n;
  auto in = t.data();
  std::vector<double> out(rows.size() * per);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= n) throw DimensionError("row index out of range");
    std::copy_n(in.begin() + rows[i] * per, per, out.begin() + i * per);
  }
  Shape s = t.shape();
  s[0] = rows.size();
  return Tensor(std::move(s), std::move(out));
}

BlockIO capture_block_io(const ModelGraph& fp, const ModelGraph& quantized, const Tensor& images, std::size_t index,
                         std::size_t chunk) {
  if (index >= fp.blocks.size() || index >= quantized.blocks.size()) {
    throw ContractError("block index " + std::to_string(index) + " out of range");
  }
  NoGradGuard guard;
  const std::size_t n = images.dim(0);
  std::vector<Tensor> ins, fps, tgts;
  for (std::size_t start = 0; start < n; start += chunk) {
    std::vector<std::size_t> rows;
    for (std::size_t i = start; i < std::min(n, start + chunk); ++i) rows.push_back(i);
    const Tensor batch = gather_rows(images, rows);
    Tensor xq = embed_forward(batch, quantized, Mode::quant);
    Tensor xf = embed_forward(batch, fp, Mode::fp);
    for (std::size_t l = 0; l < index; ++l) {
      xq = block_forward(xq, quantized.blocks[l], Mode::quant);
      xf = block_forward(xf, fp.blocks[l], Mode::fp);
    }
    tgts.push_back(block_forward(xf, fp.blocks[index], Mode::fp));
    ins.push_back(std::move(xq));
    fps.push_back(std::move(xf));
  }
  auto join = [](const std::vector<Tensor>& parts) { return parts.size() == 1 ? parts.front().detach() : ops::concat(parts, 0); };
  return BlockIO{join(ins), join(fps), join(tgts)};
}

}  // namespace vitptq
