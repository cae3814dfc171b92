#pragma once

// Central finite-difference oracle for the nn engine. Test-only: it uses
// nothing but forward passes, so it is independent of the backprop path.

#include <cmath>
#include <cstdint>
#include <vector>

#include "cyclefed/nn.hpp"
#include "cyclefed/rng.hpp"

namespace cyclefed::oracle {

struct ParamRange {
  std::size_t begin = 0;
  std::size_t bias_begin = 0;  // biases occupy [bias_begin, end)
  std::size_t end = 0;
};

// Parameter ranges of every layer that owns parameters, in layer order.
inline std::vector<ParamRange> param_ranges(const nn::ModelSpec& spec) {
  std::vector<ParamRange> out;
  nn::ModelSpec prefix = spec;
  std::size_t prev = 0;
  for (std::size_t i = 1; i <= spec.layers.size(); ++i) {
    prefix.layers.assign(spec.layers.begin(), spec.layers.begin() + i);
    const std::size_t count = prefix.param_count();
    if (count > prev)
      out.push_back({prev, count - static_cast<std::size_t>(spec.layers[i - 1].size),
                     count});
    prev = count;
  }
  return out;
}

struct GradCheckReport {
  std::size_t checked = 0;
  std::size_t skipped_at_kink = 0;
  std::size_t failures = 0;
  double max_rel_error = 0.0;
  std::vector<std::size_t> layer_coverage;  // coordinates checked per layer
};

// Checks `per_layer` random coordinates in every parameterized layer
// (half weights, half biases where the layer has both). Coordinates whose
// +-step perturbation changes the ReLU / pooling pattern sit on a kink of
// the piecewise-smooth loss and are replaced by fresh draws.
inline GradCheckReport check_gradient(const nn::ModelState<double>& model,
                                      const nn::Batch<double>& batch,
                                      std::uint64_t dropout_seed,
                                      std::size_t per_layer, double step,
                                      double tolerance, std::uint64_t seed) {
  nn::Network<double> net(model.spec);
  std::vector<double> analytic(net.param_count());
  net.gradient(model.params, batch, dropout_seed, analytic);
  net.forward(model.params, batch, nn::Mode::train, dropout_seed);
  const std::uint64_t base_signature = net.activation_signature();

  GradCheckReport report;
  Rng rng(seed);
  std::vector<double> params = model.params;
  const auto ranges = param_ranges(model.spec);
  for (const auto& r : ranges) {
    std::size_t done = 0;
    std::size_t attempts = 0;
    while (done < per_layer && attempts < per_layer * 20) {
      ++attempts;
      const bool bias = done % 2 == 1;
      const std::size_t lo = bias ? r.bias_begin : r.begin;
      const std::size_t hi = bias ? r.end : r.bias_begin;
      const std::size_t i = lo + rng.below(hi - lo);
      const double saved = params[i];
      params[i] = saved + step;
      const double up =
          net.forward(params, batch, nn::Mode::train, dropout_seed).loss;
      const bool up_same = net.activation_signature() == base_signature;
      params[i] = saved - step;
      const double down =
          net.forward(params, batch, nn::Mode::train, dropout_seed).loss;
      const bool down_same = net.activation_signature() == base_signature;
      params[i] = saved;
      if (!up_same || !down_same) {
        ++report.skipped_at_kink;
        continue;
      }
      const double numeric = (up - down) / (2.0 * step);
      const double rel =
          std::abs(analytic[i] - numeric) / (std::abs(analytic[i]) + 1e-8);
      report.max_rel_error = std::max(report.max_rel_error, rel);
      if (!(rel < tolerance)) ++report.failures;
      ++report.checked;
      ++done;
    }
    report.layer_coverage.push_back(done);
  }
  return report;
}

}  // namespace cyclefed::oracle
