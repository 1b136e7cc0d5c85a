#pragma once

#include <chrono>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

#include "mixprec/bench/config.hpp"
#include "mixprec/bench/data.hpp"
#include "mixprec/bench/model.hpp"
#include "mixprec/optim.hpp"
#include "mixprec/precision.hpp"

namespace mixprec::bench {

/// Raised when the output CSV cannot be written.
class OutputError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

struct StepRecord {
  std::int64_t step = 0;
  float loss = 0.0f;
  float scale = 1.0f;  // loss scale used for this step
  bool grads_finite = true;
  std::size_t activation_bytes = 0;
  double wall_time_s = 0.0;
  std::uint64_t param_checksum = 0;  // of the master weights after the step
};

struct RunResult {
  std::vector<StepRecord> records;
  Tree initial_params;
  Tree final_params;
  LossScaling final_scaling;
  float eval_accuracy = 0.0f;
  float eval_loss = 0.0f;
};

/// FNV-1a over the bit patterns of every float tensor leaf, in tree order.
inline std::uint64_t checksum(const Tree& params) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (const auto& [path, t] : float_leaves(params)) {
    for (float v : t.data()) {
      std::uint32_t bits = 0;
      std::memcpy(&bits, &v, sizeof bits);
      for (int i = 0; i < 4; ++i) {
        h ^= (bits >> (8 * i)) & 0xFFu;
        h *= 0x100000001b3ull;
      }
    }
  }
  return h;
}

/// Size of the held-out set used for the final accuracy.
inline constexpr std::size_t kEvalExamples = 2048;

namespace detail {

/// Held-out loss and accuracy, evaluated at the run's compute precision.
inline std::pair<float, float> evaluate(const RunConfig& config, const Tree& params) {
  const DType dtype = compute_dtype(config.precision);
  const Tree batch = synth_data(config.seed, kEvalExamples, config.model, ~std::uint64_t{0});
  const Tree p = cast_tree(params, dtype);
  const Tree args = cast_tree(batch, dtype);
  const Tensor logits = forward(config.model, p, args.at("x").tensor());
  const Tensor loss = loss_function(config.model)(p, args);
  const auto labels = batch.at("y").tensor().data();
  const std::size_t classes = config.model.num_classes;
  std::size_t correct = 0;
  for (std::size_t b = 0; b < labels.size(); ++b) {
    std::size_t best = 0;
    for (std::size_t c = 1; c < classes; ++c) {
      if (logits[b * classes + c] > logits[b * classes + best]) best = c;
    }
    correct += best == static_cast<std::size_t>(labels[b]);
  }
  return {loss.item(), static_cast<float>(correct) / static_cast<float>(labels.size())};
}

}  // namespace detail

/// Runs the training loop: mixed or full-precision gradient, gated optimizer
/// update, one record per step. Master weights stay f32 throughout.
inline RunResult train(const RunConfig& config) {
  config.validate();
  if (config.precision != Precision::F32) set_half_precision(compute_dtype(config.precision));
  const bool mixed = config.precision != Precision::F32;

  LossScaling scaling;
  scaling.scale = config.loss_scale_init;
  scaling.growth_interval = config.growth_interval;
  scaling.growth_factor = config.growth_factor;
  scaling.backoff_factor = config.backoff_factor;

  RunResult result;
  Tree params = build_model(config.model, config.seed);
  result.initial_params = params;
  OptimizerState opt = config.adam ? adam_init(params, config.learning_rate)
                                   : sgd_init(params, config.learning_rate);
  const auto loss = loss_function(config.model);

  result.records.reserve(static_cast<std::size_t>(config.steps));
  for (std::int64_t step = 0; step < config.steps; ++step) {
    const auto start = std::chrono::steady_clock::now();
    const Tree batch = synth_data(config.seed, config.batch_size, config.model,
                                  static_cast<std::uint64_t>(step));
    StepRecord rec;
    rec.step = step;
    rec.scale = scaling.scale;
    // The transform holds its scaling by value, so it is made per step.
    GradResult g = filter_value_and_grad(loss, scaling, mixed)(params, batch);
    std::tie(params, opt) = optimizer_update(params, opt, g.grads, g.grads_finite);
    rec.loss = g.value->item();
    rec.grads_finite = g.grads_finite;
    rec.activation_bytes = g.activation_bytes;
    if (config.debug_checksums) rec.param_checksum = checksum(params);
    if (config.record_wall_time) {
      rec.wall_time_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    }
    scaling = g.scaling;
    result.records.push_back(rec);
  }
  result.final_params = params;
  result.final_scaling = scaling;
  std::tie(result.eval_loss, result.eval_accuracy) = detail::evaluate(config, params);
  return result;
}

inline void write_csv(std::ostream& out, const std::vector<StepRecord>& records, bool checksums) {
  out << "step,loss,scale,grads_finite,activation_bytes,wall_time_s";
  if (checksums) out << ",param_checksum";
  out << '\n';
  char buf[64];
  for (const auto& r : records) {
    out << r.step << ',';
    std::snprintf(buf, sizeof buf, "%.9g", static_cast<double>(r.loss));
    out << buf << ',';
    std::snprintf(buf, sizeof buf, "%.9g", static_cast<double>(r.scale));
    out << buf << ',' << (r.grads_finite ? 1 : 0) << ',' << r.activation_bytes << ',';
    std::snprintf(buf, sizeof buf, "%.6f", r.wall_time_s);
    out << buf;
    if (checksums) {
      std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(r.param_checksum));
      out << ',' << buf;
    }
    out << '\n';
  }
}

inline void write_csv(const std::string& path, const std::vector<StepRecord>& records, bool checksums) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw OutputError("cannot open " + path + " for writing");
  write_csv(out, records, checksums);
  out.flush();
  if (!out) throw OutputError("failed while writing " + path);
}

}  // namespace mixprec::bench
