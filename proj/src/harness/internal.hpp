#pragma once

#include <cstdint>

#include "nem/harness.hpp"
#include "nem/rng.hpp"

namespace nem::detail {

inline NemModel<float> make_model(const ExperimentConfig& cfg) {
  return NemModel<float>(cfg.variant, cfg.network_spec(), cfg.pixel_model());
}

/// Seed of sample i in evaluation repetition r. Repetition 0 is the one used
/// for validation losses during training.
inline std::uint64_t eval_sample_seed(const ExperimentConfig& cfg, std::size_t r, std::size_t i) {
  return derive_seed(cfg.seed, {stream::kEval, r, i});
}

}  // namespace nem::detail
