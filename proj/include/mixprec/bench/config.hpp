#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>

#include "mixprec/numerics.hpp"

namespace mixprec::bench {

/// Raised for a RunConfig that cannot be run.
class ConfigError : public std::invalid_argument {
public:
  using std::invalid_argument::invalid_argument;
};

enum class ModelKind { Mlp, Attention };
enum class Precision { F32, F16, BF16 };

inline std::optional<Precision> parse_precision(std::string_view s) {
  if (s == "f32") return Precision::F32;
  if (s == "f16") return Precision::F16;
  if (s == "bf16") return Precision::BF16;
  return std::nullopt;
}

inline std::optional<ModelKind> parse_model(std::string_view s) {
  if (s == "mlp") return ModelKind::Mlp;
  if (s == "attention") return ModelKind::Attention;
  return std::nullopt;
}

/// Compute dtype of the forward and backward passes.
inline DType compute_dtype(Precision p) {
  switch (p) {
    case Precision::F16:
      return DType::F16;
    case Precision::BF16:
      return DType::BF16;
    case Precision::F32:
      break;
  }
  return DType::F32;
}

struct ModelSpec {
  ModelKind kind = ModelKind::Mlp;
  std::size_t feature_dim = 8;   // input width; also the attention model width
  std::size_t hidden_dim = 32;   // MLP hidden width (0 means no hidden layer)
  std::size_t num_heads = 4;     // attention only
  std::size_t seq_len = 8;       // attention only: tokens per example
  std::size_t num_classes = 2;
};

struct RunConfig {
  Precision precision = Precision::F32;
  std::int64_t steps = 500;
  std::size_t batch_size = 32;
  ModelSpec model;
  std::uint64_t seed = 0;
  float learning_rate = 1e-2f;
  bool adam = true;
  float loss_scale_init = 32768.0f;
  int growth_interval = 2000;
  float growth_factor = 2.0f;
  float backoff_factor = 0.5f;
  std::string out;  // CSV path; empty means no file
  bool debug_checksums = false;
  bool record_wall_time = false;

  void validate() const {
    auto positive = [](bool ok, const char* what) {
      if (!ok) throw ConfigError(std::string(what) + " must be positive");
    };
    positive(steps > 0, "steps");
    positive(batch_size > 0, "batch-size");
    positive(model.feature_dim > 0, "feature-dim");
    positive(model.num_classes >= 2, "num-classes - 1");
    positive(learning_rate > 0.0f && std::isfinite(learning_rate), "lr");
    positive(growth_interval > 0, "growth-interval");
    if (model.kind == ModelKind::Attention) {
      positive(model.num_heads > 0, "num-heads");
      positive(model.seq_len > 0, "seq-len");
      if (model.feature_dim % model.num_heads != 0) {
        throw ConfigError("feature-dim " + std::to_string(model.feature_dim) +
                          " is not divisible by num-heads " + std::to_string(model.num_heads));
      }
    }
    if (!(loss_scale_init >= 1.0f) || !std::isfinite(loss_scale_init)) {
      throw ConfigError("loss-scale-init must be finite and at least 1");
    }
    if (!(growth_factor > 1.0f) || !std::isfinite(growth_factor)) {
      throw ConfigError("growth-factor must be finite and greater than 1");
    }
    if (!(backoff_factor > 0.0f && backoff_factor < 1.0f)) {
      throw ConfigError("backoff-factor must lie strictly between 0 and 1");
    }
  }
};

}  // namespace mixprec::bench
