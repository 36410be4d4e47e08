#pragma once

#include <atomic>
#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "dreamrec/autodiff.hpp"
#include "dreamrec/types.hpp"

namespace dreamrec {

struct ModelConfig {
  std::size_t num_items = 0;
  std::size_t dim = 64;
  std::size_t window = 10;
  std::size_t heads = 2;
  std::size_t layers = 1;
  /// Feed-forward width of the encoder, as a multiple of dim.
  std::size_t ffn_mult = 4;
  /// Hidden width of the denoiser MLP, as a multiple of dim.
  std::size_t hidden_mult = 4;
  double embedding_init_std = 1.0;

  void validate() const;
};

/// Item embeddings, one row per item plus row 0 for padding.
template <typename Real>
class ItemEmbeddingTable {
 public:
  ItemEmbeddingTable(num::ParameterSet<Real>& params, const std::string& name,
                     std::size_t num_items, std::size_t dim, double init_std, std::uint64_t seed);

  /// Rows for the given ids, [ids.size(), dim]. Ids must lie in [0, num_items].
  num::Var lookup(num::Graph<Real>& g, std::span<const ItemIndex> ids) const;

  std::size_t num_items() const noexcept { return num_items_; }
  std::size_t dim() const noexcept { return dim_; }
  num::Parameter<Real>& weights() const noexcept { return *table_; }
  std::span<const Real> row(ItemIndex id) const;

 private:
  num::Parameter<Real>* table_;
  std::size_t num_items_;
  std::size_t dim_;
};

/// A batch of embedded history windows laid out as [batch * window, dim].
struct EmbeddedHistory {
  num::Var rows;
  /// 1 where the position holds the padding token, batch * window entries.
  std::vector<std::uint8_t> padding;
  std::size_t batch = 0;
  std::size_t window = 0;
};

template <typename Real>
EmbeddedHistory embed_sequences(num::Graph<Real>& g, const ItemEmbeddingTable<Real>& table,
                                std::span<const ItemIndex> histories, std::size_t window);

/// Causal self-attention over each window with padded keys masked out. A
/// query that would see no key at all (an all-padding prefix) attends to
/// itself instead, which keeps every row finite. Shape [batch, window, window].
num::Mask attention_mask(std::span<const std::uint8_t> padding, std::size_t batch,
                         std::size_t window);

/// Index of the last non-padding position of each window (the last position
/// when the window is all padding).
std::vector<std::size_t> pooling_positions(std::span<const std::uint8_t> padding,
                                           std::size_t batch, std::size_t window);

/// Pre-norm Transformer encoder mapping a history window to a guidance
/// vector, plus the learned dummy guidance used for unconditional passes.
template <typename Real>
class GuidanceEncoder {
 public:
  GuidanceEncoder(num::ParameterSet<Real>& params, const std::string& prefix,
                  const ModelConfig& config, std::uint64_t seed);

  /// Guidance vectors [batch, dim], read at each window's pooling position.
  num::Var encode(num::Graph<Real>& g, const EmbeddedHistory& history) const;

  /// The dummy guidance as a [1, dim] row.
  num::Var dummy(num::Graph<Real>& g) const;
  num::Parameter<Real>& dummy_parameter() const noexcept { return *phi_; }

  /// Number of encode() calls so far (each call may cover a whole batch).
  std::size_t encode_calls() const noexcept { return calls_->load(); }

 private:
  struct Linear {
    num::Parameter<Real>* weight;
    num::Parameter<Real>* bias;
  };
  struct Norm {
    num::Parameter<Real>* gamma;
    num::Parameter<Real>* beta;
  };
  struct Block {
    Norm ln1;
    Linear qkv;
    Linear proj;
    Norm ln2;
    Linear ffn_in;
    Linear ffn_out;
  };

  std::size_t dim_;
  std::size_t window_;
  std::size_t heads_;
  num::Parameter<Real>* positions_;
  std::vector<Block> blocks_;
  Norm final_norm_;
  num::Parameter<Real>* phi_;
  std::unique_ptr<std::atomic<std::size_t>> calls_ = std::make_unique<std::atomic<std::size_t>>(0);
};

/// Sinusoidal features of diffusion steps, [steps.size(), dim].
template <typename Real>
num::Tensor<Real> step_features(std::span<const int> steps, std::size_t dim);

/// MLP f(x_t, c, t) predicting the clean target embedding.
template <typename Real>
class Denoiser {
 public:
  Denoiser(num::ParameterSet<Real>& params, const std::string& prefix, const ModelConfig& config,
           std::uint64_t seed);

  /// xt and guidance are [batch, dim]; one step index per row.
  num::Var predict(num::Graph<Real>& g, num::Var xt, num::Var guidance,
                   std::span<const int> steps) const;

 private:
  struct Linear {
    num::Parameter<Real>* weight;
    num::Parameter<Real>* bias;
  };
  num::Var apply(num::Graph<Real>& g, const Linear& layer, num::Var x) const;

  std::size_t dim_;
  Linear step_proj_;
  Linear in_;
  Linear mid_;
  Linear out_;
};

/// The full generative recommender: item table, guidance encoder, denoiser.
template <typename Real>
class DreamRecModel {
 public:
  DreamRecModel(const ModelConfig& config, std::uint64_t seed);

  const ModelConfig& config() const noexcept { return config_; }
  num::ParameterSet<Real>& parameters() noexcept { return params_; }
  const num::ParameterSet<Real>& parameters() const noexcept { return params_; }
  const ItemEmbeddingTable<Real>& items() const noexcept { return items_; }
  const GuidanceEncoder<Real>& encoder() const noexcept { return encoder_; }
  const Denoiser<Real>& denoiser() const noexcept { return denoiser_; }

  /// Guidance vectors for flattened history windows, [batch, dim].
  num::Var guidance(num::Graph<Real>& g, std::span<const ItemIndex> histories) const;

  /// Single-window conveniences evaluated without gradient tracking.
  num::Tensor<Real> encode_history(std::span<const ItemIndex> history) const;
  num::Tensor<Real> denoise(const num::Tensor<Real>& xt, const num::Tensor<Real>& guidance,
                            int step) const;
  num::Tensor<Real> dummy_guidance() const { return encoder_.dummy_parameter().value; }

 private:
  ModelConfig config_;
  num::ParameterSet<Real> params_;
  ItemEmbeddingTable<Real> items_;
  GuidanceEncoder<Real> encoder_;
  Denoiser<Real> denoiser_;
};

using Model = DreamRecModel<float>;

/// Deterministic initial value for a named parameter.
template <typename Real>
num::Tensor<Real> init_uniform(num::Shape shape, double bound, std::uint64_t seed,
                               const std::string& name);
template <typename Real>
num::Tensor<Real> init_normal(num::Shape shape, double stddev, std::uint64_t seed,
                              const std::string& name);

}  // namespace dreamrec
