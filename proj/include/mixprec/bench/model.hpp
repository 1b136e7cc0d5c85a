#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string>

#include "mixprec/bench/config.hpp"
#include "mixprec/ops.hpp"
#include "mixprec/precision.hpp"
#include "mixprec/tree.hpp"

namespace mixprec::bench {

namespace detail {

inline Tree dense(std::mt19937_64& rng, std::size_t in, std::size_t out) {
  std::normal_distribution<float> normal(0.0f, 1.0f / std::sqrt(static_cast<float>(in)));
  std::vector<float> w(in * out);
  for (auto& v : w) v = normal(rng);
  return Tree::mapping({{"w", Tensor(Shape{in, out}, DType::F32, std::move(w))},
                        {"b", Tensor::zeros({out})}});
}

inline Tensor apply_dense(const Tree& layer, const Tensor& x) {
  return matmul(x, layer.at("w").tensor()) + layer.at("b").tensor();
}

}  // namespace detail

/// Deterministic f32 parameters for the configured model.
///
/// MLP: {layers: [{w, b}, ...]} with widths feature_dim, hidden_dim, num_classes.
/// Attention: {block: {layer_norm, dense_qs, dense_ks, dense_vs, dense_o}, head}
/// where the four projections are feature_dim x feature_dim.
inline Tree build_model(const ModelSpec& spec, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  if (spec.kind == ModelKind::Mlp) {
    std::vector<std::size_t> widths{spec.feature_dim};
    if (spec.hidden_dim > 0) widths.push_back(spec.hidden_dim);
    widths.push_back(spec.num_classes);
    Tree layers = Tree::sequence();
    for (std::size_t i = 0; i + 1 < widths.size(); ++i) {
      layers.push_back(detail::dense(rng, widths[i], widths[i + 1]));
    }
    return Tree::mapping({{"layers", std::move(layers)}});
  }
  if (spec.num_heads == 0 || spec.feature_dim % spec.num_heads != 0) {
    throw ConfigError("build_model: feature_dim must be divisible by num_heads");
  }
  const std::size_t f = spec.feature_dim;
  Tree block = Tree::mapping({
      {"layer_norm", Tree::mapping({{"gain", Tensor::full({f}, 1.0f)}, {"bias", Tensor::zeros({f})}})},
      {"dense_qs", detail::dense(rng, f, f)},
      {"dense_ks", detail::dense(rng, f, f)},
      {"dense_vs", detail::dense(rng, f, f)},
      {"dense_o", detail::dense(rng, f, f)},
  });
  return Tree::mapping({{"block", std::move(block)}, {"head", detail::dense(rng, f, spec.num_classes)}});
}

/// Multi-head self-attention with a residual connection over x: [B, S, F].
/// Layernorm and softmax run as full-precision islands.
inline Tensor attention_block(const Tree& block, const Tensor& x, std::size_t num_heads) {
  const DType dtype = x.dtype();
  const std::size_t batch = x.shape()[0];
  const std::size_t seq = x.shape()[1];
  const std::size_t features = x.shape()[2];
  const std::size_t head_dim = features / num_heads;

  const Tree& ln = block.at("layer_norm");
  const Tensor normed = force_full_precision(
      [](const Tensor& a, const Tensor& g, const Tensor& b) { return layernorm(a, g, b); },
      dtype)(x, ln.at("gain").tensor(), ln.at("bias").tensor());

  auto split_heads = [&](const Tensor& t) {
    return transpose(reshape(t, {batch, seq, num_heads, head_dim}), {0, 2, 1, 3});
  };
  const Tensor qs = split_heads(detail::apply_dense(block.at("dense_qs"), normed));
  const Tensor ks = split_heads(detail::apply_dense(block.at("dense_ks"), normed));
  const Tensor vs = split_heads(detail::apply_dense(block.at("dense_vs"), normed));

  Tensor scores = matmul(qs, transpose(ks, {0, 1, 3, 2})) / std::sqrt(static_cast<double>(head_dim));
  scores = force_full_precision([](const Tensor& s) { return softmax(s, -1); }, scores.dtype())(scores);
  const Tensor heads = matmul(scores, vs);
  const Tensor merged = reshape(transpose(heads, {0, 2, 1, 3}), {batch, seq, features});
  return detail::apply_dense(block.at("dense_o"), merged) + x;
}

/// Class logits for a batch of inputs.
inline Tensor forward(const ModelSpec& spec, const Tree& params, const Tensor& x) {
  if (spec.kind == ModelKind::Mlp) {
    Tensor h = x;
    const auto& layers = params.at("layers").items();
    for (std::size_t i = 0; i < layers.size(); ++i) {
      h = detail::apply_dense(layers[i], h);
      if (i + 1 < layers.size()) h = gelu(h);
    }
    return h;
  }
  const Tensor out = attention_block(params.at("block"), x, spec.num_heads);
  return detail::apply_dense(params.at("head"), mean(out, 1));
}

/// Mean cross-entropy over args = {x, y}; the loss itself is computed in f32.
inline auto loss_function(const ModelSpec& spec) {
  return [spec](const Tree& params, const Tree& args) {
    const Tensor logits = forward(spec, params, args.at("x").tensor());
    return force_full_precision(
        [](const Tensor& l, const Tensor& y) { return cross_entropy(l, y); },
        DType::F32)(logits, args.at("y").tensor());
  };
}

}  // namespace mixprec::bench
