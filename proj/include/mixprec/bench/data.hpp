#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <set>
#include <vector>

#include "mixprec/bench/config.hpp"
#include "mixprec/tree.hpp"

namespace mixprec::bench {

/// Distance between the cluster centres of the two-class task.
inline constexpr float kClusterSeparation = 6.0f;

/// Cluster centres: one sign pattern per class, scaled so that the centres of
/// opposite patterns lie kClusterSeparation apart. Two classes always use
/// opposite patterns.
inline std::vector<std::vector<float>> cluster_centres(std::uint64_t seed, const ModelSpec& spec) {
  const std::size_t d = spec.feature_dim;
  const float half = kClusterSeparation / (2.0f * std::sqrt(static_cast<float>(d)));
  std::mt19937_64 rng(seed ^ 0x9E3779B97F4A7C15ull);
  std::vector<std::vector<float>> centres;
  std::set<std::vector<float>> seen;
  const std::size_t distinct = d < 63 ? (std::size_t{1} << d) : SIZE_MAX;
  while (centres.size() < spec.num_classes) {
    std::vector<float> c(d);
    if (spec.num_classes == 2 && centres.size() == 1) {
      for (std::size_t i = 0; i < d; ++i) c[i] = -centres[0][i];
    } else {
      for (auto& v : c) v = (rng() & 1) ? half : -half;
    }
    if (seen.insert(c).second || seen.size() >= distinct) centres.push_back(std::move(c));
  }
  return centres;
}

/// A deterministic batch {x, y}. x is f32 with shape [B, F] for the MLP and
/// [B, S, F] for the attention model (every token of an example is drawn
/// around the example's centre); y is i32 [B] in [0, num_classes).
/// `stream` selects an independent batch from the same task.
inline Tree synth_data(std::uint64_t seed, std::size_t batch_size, const ModelSpec& spec,
                       std::uint64_t stream = 0) {
  if (batch_size == 0 || spec.num_classes == 0 || spec.feature_dim == 0) {
    throw ConfigError("synth_data: sizes must be positive");
  }
  const auto centres = cluster_centres(seed, spec);
  std::seed_seq seq{seed, stream, std::uint64_t{0x5eed}};
  std::mt19937_64 rng(seq);
  std::uniform_int_distribution<std::size_t> label(0, spec.num_classes - 1);
  std::normal_distribution<float> noise(0.0f, 1.0f);

  const std::size_t tokens = spec.kind == ModelKind::Attention ? spec.seq_len : 1;
  const std::size_t d = spec.feature_dim;
  std::vector<float> x(batch_size * tokens * d);
  std::vector<float> y(batch_size);
  for (std::size_t b = 0; b < batch_size; ++b) {
    const std::size_t c = label(rng);
    y[b] = static_cast<float>(c);
    for (std::size_t t = 0; t < tokens; ++t) {
      for (std::size_t i = 0; i < d; ++i) x[(b * tokens + t) * d + i] = centres[c][i] + noise(rng);
    }
  }
  Shape shape = spec.kind == ModelKind::Attention ? Shape{batch_size, tokens, d} : Shape{batch_size, d};
  return Tree::mapping({{"x", Tensor(std::move(shape), DType::F32, std::move(x))},
                        {"y", Tensor(Shape{batch_size}, DType::I32, std::move(y))}});
}

}  // namespace mixprec::bench
