#pragma once

// Binary model checkpoints: magic "CYFDCKPT", u32 version, u32 bytes per
// parameter, u64 parameter count, u32 architecture-id length, the id, then
// the raw little-endian parameters.

#include <filesystem>
#include <stdexcept>
#include <variant>

#include "cyclefed/nn.hpp"

namespace cyclefed::nn {

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

using AnyModel = std::variant<ModelState<float>, ModelState<double>>;

template <class Real>
void save_checkpoint(const std::filesystem::path& path,
                     const ModelState<Real>& model);

AnyModel load_checkpoint(const std::filesystem::path& path);

/// Loads and converts to the requested precision.
template <class Real>
ModelState<Real> load_checkpoint_as(const std::filesystem::path& path);

}  // namespace cyclefed::nn
