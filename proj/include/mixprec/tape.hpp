#pragma once

#include <atomic>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "mixprec/tensor.hpp"

namespace mixprec::autodiff {

/// Forward computation of a primitive over fully materialized inputs.
using Kernel = std::function<Tensor(std::span<const Tensor> inputs)>;

/// Vector-Jacobian product of a primitive. Returns one cotangent per input,
/// shaped like that input; the tape casts each to its input's dtype. An empty
/// optional means "no contribution".
using Vjp = std::function<std::vector<std::optional<Tensor>>(
    std::span<const Tensor> inputs, const Tensor& output, const Tensor& cotangent)>;

/// Ordered record of primitive applications for one differentiation.
///
/// Nodes are appended as operations execute, so every input reference
/// precedes its consumer. Leaves are the differentiated parameters.
class Tape {
public:
  struct Node {
    std::string op;
    // Per input: the producing node on this tape, or nullopt for a constant.
    std::vector<std::optional<std::size_t>> sources;
    std::vector<Tensor> inputs;  // detached values saved for the backward rule
    Tensor output;               // detached recorded value
    Kernel kernel;
    Vjp vjp;

    bool is_leaf() const noexcept { return !kernel; }
  };

  Tape() : id_(next_id()) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  std::uint64_t id() const noexcept { return id_; }
  const std::vector<Node>& nodes() const noexcept { return nodes_; }

  /// Registers a differentiable input and returns it tracked by this tape.
  Tensor add_leaf(const Tensor& value) {
    Node node;
    node.op = "leaf";
    node.output = value.detached();
    nodes_.push_back(std::move(node));
    return value.with_ref({id_, nodes_.size() - 1});
  }

  bool tracks(const Tensor& t) const noexcept {
    return t.tape_ref().tape == id_ && t.tape_ref().node < nodes_.size();
  }

  Tensor record(std::string op, std::span<const Tensor> inputs, const Tensor& output,
                Kernel kernel, Vjp vjp) {
    Node node;
    node.op = std::move(op);
    node.sources.reserve(inputs.size());
    node.inputs.reserve(inputs.size());
    for (const auto& in : inputs) {
      node.sources.push_back(tracks(in) ? std::optional<std::size_t>(in.tape_ref().node)
                                        : std::nullopt);
      node.inputs.push_back(in.detached());
    }
    node.output = output.detached();
    node.kernel = std::move(kernel);
    node.vjp = std::move(vjp);
    nodes_.push_back(std::move(node));
    return output.with_ref({id_, nodes_.size() - 1});
  }

  /// Total analytic bytes of every recorded intermediate (leaves excluded).
  std::size_t activation_bytes() const noexcept {
    std::size_t total = 0;
    for (const auto& node : nodes_) {
      if (!node.is_leaf()) total += bytes_of(node.output);
    }
    return total;
  }

  /// Re-executes the recorded primitives from the given leaf values (in leaf
  /// registration order) and returns every node's value.
  std::vector<Tensor> replay(std::span<const Tensor> leaf_values) const;

  /// Propagates `seed` from node `root` back to every leaf. The result is
  /// indexed by node; leaves not reached hold nullopt.
  std::vector<std::optional<Tensor>> backward(std::size_t root, const Tensor& seed) const;

private:
  static std::uint64_t next_id() noexcept {
    static std::atomic<std::uint64_t> counter{0};
    return ++counter;
  }

  std::uint64_t id_;
  std::vector<Node> nodes_;
};

namespace detail {
inline Tape*& active_tape() noexcept {
  thread_local Tape* tape = nullptr;
  return tape;
}
}  // namespace detail

/// Makes `tape` the recording target on this thread for the scope's lifetime.
class RecordingScope {
public:
  explicit RecordingScope(Tape* tape) noexcept : previous_(detail::active_tape()) {
    detail::active_tape() = tape;
  }
  ~RecordingScope() { detail::active_tape() = previous_; }
  RecordingScope(const RecordingScope&) = delete;
  RecordingScope& operator=(const RecordingScope&) = delete;

private:
  Tape* previous_;
};

/// Runs `kernel` on the inputs and, when any input is tracked by the active
/// tape, records the application so it can be differentiated.
inline Tensor apply(std::string op, std::vector<Tensor> inputs, Kernel kernel, Vjp vjp) {
  Tensor out = kernel(inputs);
  Tape* tape = detail::active_tape();
  if (tape == nullptr) return out;
  bool tracked = false;
  for (const auto& in : inputs) tracked = tracked || tape->tracks(in);
  if (!tracked) return out;
  return tape->record(std::move(op), inputs, out, std::move(kernel), std::move(vjp));
}

}  // namespace mixprec::autodiff
