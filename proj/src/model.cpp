#include "dreamrec/model.hpp"

#include <cmath>
#include <numbers>

#include "dreamrec/checkpoint.hpp"
#include "dreamrec/rng.hpp"

namespace dreamrec {

using num::Graph;
using num::Parameter;
using num::ParameterSet;
using num::Tensor;
using num::Var;

void ModelConfig::validate() const {
  if (num_items < 1) throw ContractError("model: num_items must be >= 1");
  if (dim < 2) throw ContractError("model: dim must be >= 2");
  if (window < 1) throw ContractError("model: window must be >= 1");
  if (layers < 1) throw ContractError("model: at least one encoder layer is required");
  if (heads < 1 || dim % heads != 0) throw ContractError("model: heads must divide dim");
  if (ffn_mult < 1 || hidden_mult < 1) throw ContractError("model: width multipliers must be >= 1");
  if (!(embedding_init_std > 0.0)) throw ContractError("model: embedding_init_std must be positive");
}

template <typename Real>
Tensor<Real> init_uniform(num::Shape shape, double bound, std::uint64_t seed,
                          const std::string& name) {
  Tensor<Real> t(std::move(shape));
  Rng rng = Rng::stream(seed, StreamPurpose::kInit, num::fnv1a64(name), 0);
  for (auto& v : t.values()) v = static_cast<Real>((2.0 * rng.uniform() - 1.0) * bound);
  return t;
}

template <typename Real>
Tensor<Real> init_normal(num::Shape shape, double stddev, std::uint64_t seed,
                         const std::string& name) {
  Tensor<Real> t(std::move(shape));
  Rng rng = Rng::stream(seed, StreamPurpose::kInit, num::fnv1a64(name), 0);
  for (auto& v : t.values()) v = static_cast<Real>(rng.normal() * stddev);
  return t;
}

namespace {

// Registers weight [in, out] and bias [out] with the usual 1/sqrt(fan_in) bound.
template <typename Real>
std::pair<Parameter<Real>*, Parameter<Real>*> add_linear(ParameterSet<Real>& params,
                                                         const std::string& name, std::size_t in,
                                                         std::size_t out, std::uint64_t seed) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(in));
  auto& w = params.add(name + ".weight",
                       init_uniform<Real>({in, out}, bound, seed, name + ".weight"));
  auto& b = params.add(name + ".bias", init_uniform<Real>({out}, bound, seed, name + ".bias"));
  return {&w, &b};
}

template <typename Real>
std::pair<Parameter<Real>*, Parameter<Real>*> add_norm(ParameterSet<Real>& params,
                                                       const std::string& name, std::size_t dim) {
  auto& g = params.add(name + ".gamma", Tensor<Real>::filled({dim}, Real(1)));
  auto& b = params.add(name + ".beta", Tensor<Real>({dim}));
  return {&g, &b};
}

}  // namespace

// ---------------------------------------------------------------------------
// Item embeddings

template <typename Real>
ItemEmbeddingTable<Real>::ItemEmbeddingTable(ParameterSet<Real>& params, const std::string& name,
                                             std::size_t num_items, std::size_t dim,
                                             double init_std, std::uint64_t seed)
    : table_(&params.add(name, init_normal<Real>({num_items + 1, dim}, init_std, seed, name))),
      num_items_(num_items),
      dim_(dim) {}

template <typename Real>
Var ItemEmbeddingTable<Real>::lookup(Graph<Real>& g, std::span<const ItemIndex> ids) const {
  std::vector<std::size_t> rows(ids.size());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] > num_items_) {
      throw ContractError("item id " + std::to_string(ids[i]) + " outside [0, " +
                          std::to_string(num_items_) + "]");
    }
    rows[i] = ids[i];
  }
  return g.gather_rows(g.parameter(*table_), std::move(rows));
}

template <typename Real>
std::span<const Real> ItemEmbeddingTable<Real>::row(ItemIndex id) const {
  if (id > num_items_) throw ContractError("item id out of range");
  return table_->value.row(id);
}

template <typename Real>
EmbeddedHistory embed_sequences(Graph<Real>& g, const ItemEmbeddingTable<Real>& table,
                                std::span<const ItemIndex> histories, std::size_t window) {
  if (window == 0 || histories.size() % window != 0) {
    throw ContractError("embed_sequences: " + std::to_string(histories.size()) +
                        " ids do not form windows of length " + std::to_string(window));
  }
  EmbeddedHistory out;
  out.rows = table.lookup(g, histories);
  out.batch = histories.size() / window;
  out.window = window;
  out.padding.resize(histories.size());
  for (std::size_t i = 0; i < histories.size(); ++i) {
    out.padding[i] = histories[i] == kPaddingItem ? 1 : 0;
  }
  return out;
}

num::Mask attention_mask(std::span<const std::uint8_t> padding, std::size_t batch,
                         std::size_t window) {
  if (padding.size() != batch * window) throw ContractError("attention_mask: size mismatch");
  auto mask = std::make_shared<std::vector<std::uint8_t>>(batch * window * window, 1);
  for (std::size_t b = 0; b < batch; ++b) {
    const std::uint8_t* pad = padding.data() + b * window;
    for (std::size_t i = 0; i < window; ++i) {
      std::uint8_t* row = mask->data() + (b * window + i) * window;
      bool any = false;
      for (std::size_t j = 0; j <= i; ++j) {
        if (!pad[j]) {
          row[j] = 0;
          any = true;
        }
      }
      if (!any) row[i] = 0;
    }
  }
  return mask;
}

std::vector<std::size_t> pooling_positions(std::span<const std::uint8_t> padding,
                                           std::size_t batch, std::size_t window) {
  std::vector<std::size_t> out(batch, window - 1);
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t j = window; j-- > 0;) {
      if (!padding[b * window + j]) {
        out[b] = j;
        break;
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Guidance encoder

template <typename Real>
GuidanceEncoder<Real>::GuidanceEncoder(ParameterSet<Real>& params, const std::string& prefix,
                                       const ModelConfig& config, std::uint64_t seed)
    : dim_(config.dim), window_(config.window), heads_(config.heads) {
  const std::size_t d = config.dim;
  const std::string pos_name = prefix + ".positions";
  positions_ = &params.add(pos_name, init_normal<Real>({config.window, d}, 0.02, seed, pos_name));
  for (std::size_t l = 0; l < config.layers; ++l) {
    const std::string p = prefix + ".block" + std::to_string(l);
    Block blk{};
    std::tie(blk.ln1.gamma, blk.ln1.beta) = add_norm(params, p + ".ln1", d);
    std::tie(blk.qkv.weight, blk.qkv.bias) = add_linear(params, p + ".qkv", d, 3 * d, seed);
    std::tie(blk.proj.weight, blk.proj.bias) = add_linear(params, p + ".proj", d, d, seed);
    std::tie(blk.ln2.gamma, blk.ln2.beta) = add_norm(params, p + ".ln2", d);
    std::tie(blk.ffn_in.weight, blk.ffn_in.bias) =
        add_linear(params, p + ".ffn_in", d, config.ffn_mult * d, seed);
    std::tie(blk.ffn_out.weight, blk.ffn_out.bias) =
        add_linear(params, p + ".ffn_out", config.ffn_mult * d, d, seed);
    blocks_.push_back(blk);
  }
  std::tie(final_norm_.gamma, final_norm_.beta) = add_norm(params, prefix + ".final_ln", d);
  const std::string phi_name = prefix + ".dummy";
  phi_ = &params.add(phi_name, init_normal<Real>({d}, 1.0, seed, phi_name));
}

template <typename Real>
Var GuidanceEncoder<Real>::encode(Graph<Real>& g, const EmbeddedHistory& history) const {
  const std::size_t B = history.batch, L = history.window, d = dim_;
  if (L != window_) {
    throw ContractError("encoder expects windows of length " + std::to_string(window_) +
                        ", got " + std::to_string(L));
  }
  if (g.shape(history.rows) != num::Shape{B * L, d}) {
    throw ContractError("encoder input has shape " + num::shape_string(g.shape(history.rows)));
  }
  calls_->fetch_add(1);

  std::vector<std::size_t> pos_rows(B * L);
  for (std::size_t i = 0; i < B * L; ++i) pos_rows[i] = i % L;
  Var x = g.add(history.rows, g.gather_rows(g.parameter(*positions_), std::move(pos_rows)));

  const num::Mask mask = attention_mask(history.padding, B, L);
  const std::size_t dh = d / heads_;
  const Real scale = Real(1) / std::sqrt(static_cast<Real>(dh));
  auto linear = [&g](const Linear& layer, Var in) {
    return g.add_bias(g.matmul(in, g.parameter(*layer.weight)), g.parameter(*layer.bias));
  };
  auto norm = [&g](const Norm& n, Var in) {
    return g.layer_norm(in, g.parameter(*n.gamma), g.parameter(*n.beta));
  };

  for (const Block& blk : blocks_) {
    Var qkv = linear(blk.qkv, norm(blk.ln1, x));
    std::vector<Var> heads;
    heads.reserve(heads_);
    for (std::size_t h = 0; h < heads_; ++h) {
      Var q = g.reshape(g.slice_cols(qkv, h * dh, (h + 1) * dh), {B, L, dh});
      Var k = g.reshape(g.slice_cols(qkv, d + h * dh, d + (h + 1) * dh), {B, L, dh});
      Var v = g.reshape(g.slice_cols(qkv, 2 * d + h * dh, 2 * d + (h + 1) * dh), {B, L, dh});
      Var scores = g.scale(g.batch_matmul(q, k, /*transpose_b=*/true), scale);
      Var attn = g.softmax(scores, mask);
      heads.push_back(g.reshape(g.batch_matmul(attn, v), {B * L, dh}));
    }
    x = g.add(x, linear(blk.proj, g.concat(heads, 1)));
    Var ff = linear(blk.ffn_out, g.activation(linear(blk.ffn_in, norm(blk.ln2, x)),
                                              num::Activation::kGelu));
    x = g.add(x, ff);
  }
  x = norm(final_norm_, x);

  const auto pool = pooling_positions(history.padding, B, L);
  std::vector<std::size_t> rows(B);
  for (std::size_t b = 0; b < B; ++b) rows[b] = b * L + pool[b];
  return g.gather_rows(x, std::move(rows));
}

template <typename Real>
Var GuidanceEncoder<Real>::dummy(Graph<Real>& g) const {
  return g.reshape(g.parameter(*phi_), {1, dim_});
}

// ---------------------------------------------------------------------------
// Denoiser

template <typename Real>
Tensor<Real> step_features(std::span<const int> steps, std::size_t dim) {
  Tensor<Real> out({steps.size(), dim});
  const std::size_t half = dim / 2;
  for (std::size_t r = 0; r < steps.size(); ++r) {
    const double t = static_cast<double>(steps[r]);
    for (std::size_t i = 0; i < half; ++i) {
      const double freq =
          std::exp(-std::log(10000.0) * static_cast<double>(i) / static_cast<double>(half));
      out[r * dim + i] = static_cast<Real>(std::sin(t * freq));
      out[r * dim + half + i] = static_cast<Real>(std::cos(t * freq));
    }
  }
  return out;
}

template <typename Real>
Denoiser<Real>::Denoiser(ParameterSet<Real>& params, const std::string& prefix,
                         const ModelConfig& config, std::uint64_t seed)
    : dim_(config.dim) {
  const std::size_t d = config.dim, h = config.hidden_mult * config.dim;
  std::tie(step_proj_.weight, step_proj_.bias) = add_linear(params, prefix + ".step", d, d, seed);
  std::tie(in_.weight, in_.bias) = add_linear(params, prefix + ".in", 3 * d, h, seed);
  std::tie(mid_.weight, mid_.bias) = add_linear(params, prefix + ".mid", h, h, seed);
  std::tie(out_.weight, out_.bias) = add_linear(params, prefix + ".out", h, d, seed);
}

template <typename Real>
Var Denoiser<Real>::apply(Graph<Real>& g, const Linear& layer, Var x) const {
  return g.add_bias(g.matmul(x, g.parameter(*layer.weight)), g.parameter(*layer.bias));
}

template <typename Real>
Var Denoiser<Real>::predict(Graph<Real>& g, Var xt, Var guidance,
                            std::span<const int> steps) const {
  const num::Shape expected{steps.size(), dim_};
  if (g.shape(xt) != expected || g.shape(guidance) != expected) {
    throw ContractError("denoiser: x_t " + num::shape_string(g.shape(xt)) + " and guidance " +
                        num::shape_string(g.shape(guidance)) + " must both be " +
                        num::shape_string(expected));
  }
  for (int t : steps) {
    if (t < 1) throw ContractError("denoiser: step " + std::to_string(t) + " is below 1");
  }
  const auto silu = num::Activation::kSilu;
  Var temb = g.activation(apply(g, step_proj_, g.constant(step_features<Real>(steps, dim_))), silu);
  const Var parts[] = {xt, guidance, temb};
  Var h = g.activation(apply(g, in_, g.concat(parts, 1)), silu);
  h = g.activation(apply(g, mid_, h), silu);
  return apply(g, out_, h);
}

// ---------------------------------------------------------------------------
// Full model

template <typename Real>
DreamRecModel<Real>::DreamRecModel(const ModelConfig& config, std::uint64_t seed)
    : config_((config.validate(), config)),
      items_(params_, "items", config.num_items, config.dim, config.embedding_init_std, seed),
      encoder_(params_, "encoder", config, seed),
      denoiser_(params_, "denoiser", config, seed) {}

template <typename Real>
Var DreamRecModel<Real>::guidance(Graph<Real>& g, std::span<const ItemIndex> histories) const {
  return encoder_.encode(g, embed_sequences(g, items_, histories, config_.window));
}

template <typename Real>
Tensor<Real> DreamRecModel<Real>::encode_history(std::span<const ItemIndex> history) const {
  Graph<Real> g(num::GradMode::kDisabled);
  return g.value(guidance(g, history)).reshaped({config_.dim});
}

template <typename Real>
Tensor<Real> DreamRecModel<Real>::denoise(const Tensor<Real>& xt, const Tensor<Real>& c,
                                          int step) const {
  Graph<Real> g(num::GradMode::kDisabled);
  const int steps[] = {step};
  Var out = denoiser_.predict(g, g.constant(xt.reshaped({1, config_.dim})),
                              g.constant(c.reshaped({1, config_.dim})), steps);
  return g.value(out).reshaped({config_.dim});
}

template class ItemEmbeddingTable<float>;
template class ItemEmbeddingTable<double>;
template class GuidanceEncoder<float>;
template class GuidanceEncoder<double>;
template class Denoiser<float>;
template class Denoiser<double>;
template class DreamRecModel<float>;
template class DreamRecModel<double>;
template EmbeddedHistory embed_sequences(Graph<float>&, const ItemEmbeddingTable<float>&,
                                         std::span<const ItemIndex>, std::size_t);
template EmbeddedHistory embed_sequences(Graph<double>&, const ItemEmbeddingTable<double>&,
                                         std::span<const ItemIndex>, std::size_t);
template Tensor<float> step_features(std::span<const int>, std::size_t);
template Tensor<double> step_features(std::span<const int>, std::size_t);
template Tensor<float> init_uniform(num::Shape, double, std::uint64_t, const std::string&);
template Tensor<double> init_uniform(num::Shape, double, std::uint64_t, const std::string&);
template Tensor<float> init_normal(num::Shape, double, std::uint64_t, const std::string&);
template Tensor<double> init_normal(num::Shape, double, std::uint64_t, const std::string&);

}  // namespace dreamrec
