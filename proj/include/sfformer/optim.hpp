#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "sfformer/tensor.hpp"

namespace sff::ad {

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

struct AdamConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double weight_decay = 0.0;  // decoupled
};

struct AdamState {
  AdamConfig config;
  std::vector<std::vector<double>> first_moment;
  std::vector<std::vector<double>> second_moment;
  std::uint64_t step = 0;
};

AdamState make_adam_state(std::span<const NamedTensor> params, const AdamConfig& config);

// p <- p - lr*wd*p, then the bias-corrected Adam update from the current
// gradients. A parameter without an accumulated gradient is treated as
// having a zero gradient. Throws on a non-finite gradient, naming the
// parameter; parameters are left untouched in that case.
void adam_step(std::span<const NamedTensor> params, AdamState& state);

void zero_grad(std::span<const NamedTensor> params);

// Versioned binary: "SFCK", u32 version, u32 count, then per tensor
// u32 name length, name, u32 rank, u64 dims, float64 payload.
std::vector<std::uint8_t> write_checkpoint(std::span<const NamedTensor> params);
std::vector<NamedTensor> parse_checkpoint(std::span<const std::uint8_t> bytes);
// Copies checkpoint values into existing parameters, matched by name and shape.
void load_checkpoint_into(std::span<const NamedTensor> params, std::span<const NamedTensor> saved);

}  // namespace sff::ad
