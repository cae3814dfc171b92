#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "cyclefed/nn.hpp"

namespace cyclefed::data {

enum class Split { train, test };
enum class Source { mnist, synthetic };

std::string_view to_string(Split s);
std::string_view to_string(Source s);

/// Grayscale images in [0, 1], row-major, one channel.
struct LabeledDataset {
  int rows = 28;
  int cols = 28;
  int classes = 10;
  Split split = Split::train;
  Source source = Source::synthetic;
  std::vector<float> pixels;
  std::vector<std::uint8_t> labels;

  std::size_t size() const { return labels.size(); }
  std::size_t image_size() const {
    return static_cast<std::size_t>(rows) * cols;
  }
  std::span<const float> image(std::size_t i) const {
    return std::span<const float>(pixels).subspan(i * image_size(),
                                                  image_size());
  }
  std::vector<std::size_t> label_histogram() const;
};

class IdxError : public std::runtime_error {
 public:
  enum class Kind { io, bad_magic, dimension_mismatch, truncated };
  IdxError(Kind kind, const std::string& what)
      : std::runtime_error(what), kind_(kind) {}
  Kind kind() const { return kind_; }

 private:
  Kind kind_;
};

/// Reads an IDX image file (magic 0x00000803) and label file (magic
/// 0x00000801), raw or gzip-compressed. Pixels are scaled by 1/255.
LabeledDataset load_idx(const std::filesystem::path& images,
                        const std::filesystem::path& labels,
                        Split split = Split::train);

/// Locates the four standard MNIST files (optionally with a .gz suffix)
/// under `dir` and loads the requested split.
LabeledDataset load_mnist(const std::filesystem::path& dir, Split split);

/// Value of CYCLEFED_DATA_DIR, or "data" when unset.
std::filesystem::path default_data_dir();

struct SynthOptions {
  double noise = 0.45;  // per-pixel Gaussian noise std
  double jitter = 0.75;  // per-sample stroke displacement std, in pixels
};

/// Each class is a template of a few Gaussian strokes. A sample redraws the
/// template with displaced strokes and random stroke intensity, then adds
/// pixel noise; values are clamped to [0, 1]. Templates depend only on
/// (classes, seed), so the train and test splits generated with the same
/// seed share them.
LabeledDataset synth_dataset(int classes, int per_class, std::uint64_t seed,
                             Split split = Split::train,
                             const SynthOptions& options = {});

/// Class-stratified random subset keeping `fraction` of each class.
LabeledDataset subsample(const LabeledDataset& data, double fraction,
                         std::uint64_t seed);

template <class Real>
nn::Batch<Real> make_batch(const LabeledDataset& data,
                           std::span<const std::size_t> indices);

/// Eval-mode metrics of `model` on data[indices], streamed in chunks.
template <class Real>
nn::Evaluation evaluate_on(const nn::ModelState<Real>& model,
                           const LabeledDataset& data,
                           std::span<const std::size_t> indices,
                           std::size_t chunk = 256);

}  // namespace cyclefed::data
