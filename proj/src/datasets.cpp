#include "cyclefed/datasets.hpp"

#include <zlib.h>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdlib>
#include <memory>

#include "cyclefed/rng.hpp"

namespace cyclefed::data {

namespace {

constexpr std::uint32_t kImageMagic = 0x00000803;
constexpr std::uint32_t kLabelMagic = 0x00000801;

constexpr int kStrokesPerTemplate = 4;

std::vector<unsigned char> read_maybe_gzipped(const std::filesystem::path& p) {
  if (!std::filesystem::exists(p))
    throw IdxError(IdxError::Kind::io, "no such file: " + p.string());
  // gzread passes non-gzip input through unchanged, so one reader covers
  // both forms.
  std::unique_ptr<gzFile_s, decltype(&gzclose)> f(gzopen(p.c_str(), "rb"),
                                                   &gzclose);
  if (!f) throw IdxError(IdxError::Kind::io, "cannot open " + p.string());
  std::vector<unsigned char> out;
  std::array<unsigned char, 1 << 16> buf;
  for (;;) {
    const int n = gzread(f.get(), buf.data(), static_cast<unsigned>(buf.size()));
    if (n < 0)
      throw IdxError(IdxError::Kind::truncated,
                     "corrupt compressed stream in " + p.string());
    if (n == 0) break;
    out.insert(out.end(), buf.begin(), buf.begin() + n);
  }
  return out;
}

std::uint32_t read_be32(const std::vector<unsigned char>& bytes,
                        std::size_t offset, const std::filesystem::path& p) {
  if (bytes.size() < offset + 4)
    throw IdxError(IdxError::Kind::truncated,
                   "truncated IDX header in " + p.string());
  return (std::uint32_t{bytes[offset]} << 24) |
         (std::uint32_t{bytes[offset + 1]} << 16) |
         (std::uint32_t{bytes[offset + 2]} << 8) |
         std::uint32_t{bytes[offset + 3]};
}

std::filesystem::path find_file(const std::filesystem::path& dir,
                                const std::vector<std::string>& names) {
  for (const auto& n : names)
    for (const char* suffix : {"", ".gz"}) {
      auto candidate = dir / (n + suffix);
      if (std::filesystem::exists(candidate)) return candidate;
    }
  throw IdxError(IdxError::Kind::io,
                 "MNIST file " + names.front() + " not found under " +
                     dir.string());
}

}  // namespace

std::string_view to_string(Split s) {
  return s == Split::train ? "train" : "test";
}

std::string_view to_string(Source s) {
  return s == Source::mnist ? "mnist" : "synthetic";
}

std::vector<std::size_t> LabeledDataset::label_histogram() const {
  std::vector<std::size_t> h(classes, 0);
  for (auto y : labels) ++h.at(y);
  return h;
}

LabeledDataset load_idx(const std::filesystem::path& images,
                        const std::filesystem::path& labels, Split split) {
  const auto ib = read_maybe_gzipped(images);
  const auto lb = read_maybe_gzipped(labels);

  if (read_be32(ib, 0, images) != kImageMagic)
    throw IdxError(IdxError::Kind::bad_magic,
                   "wrong magic for images: " + images.string());
  if (read_be32(lb, 0, labels) != kLabelMagic)
    throw IdxError(IdxError::Kind::bad_magic,
                   "wrong magic for labels: " + labels.string());

  const std::size_t n_images = read_be32(ib, 4, images);
  const std::size_t rows = read_be32(ib, 8, images);
  const std::size_t cols = read_be32(ib, 12, images);
  const std::size_t n_labels = read_be32(lb, 4, labels);
  if (n_images != n_labels)
    throw IdxError(IdxError::Kind::dimension_mismatch,
                   "image count " + std::to_string(n_images) +
                       " does not match label count " +
                       std::to_string(n_labels));
  if (rows == 0 || cols == 0)
    throw IdxError(IdxError::Kind::dimension_mismatch, "zero image dimension");
  if (ib.size() < 16 + n_images * rows * cols)
    throw IdxError(IdxError::Kind::truncated,
                   "truncated image data in " + images.string());
  if (lb.size() < 8 + n_labels)
    throw IdxError(IdxError::Kind::truncated,
                   "truncated label data in " + labels.string());

  LabeledDataset d;
  d.rows = static_cast<int>(rows);
  d.cols = static_cast<int>(cols);
  d.split = split;
  d.source = Source::mnist;
  d.pixels.resize(n_images * rows * cols);
  for (std::size_t i = 0; i < d.pixels.size(); ++i)
    d.pixels[i] = static_cast<float>(ib[16 + i]) / 255.0f;
  d.labels.assign(lb.begin() + 8, lb.begin() + 8 + n_labels);
  int max_label = 0;
  for (auto y : d.labels) max_label = std::max<int>(max_label, y);
  d.classes = std::max(10, max_label + 1);
  return d;
}

LabeledDataset load_mnist(const std::filesystem::path& dir, Split split) {
  const bool train = split == Split::train;
  const auto images = find_file(
      dir, {train ? "train-images-idx3-ubyte" : "t10k-images-idx3-ubyte",
            train ? "train-images.idx3-ubyte" : "t10k-images.idx3-ubyte"});
  const auto labels = find_file(
      dir, {train ? "train-labels-idx1-ubyte" : "t10k-labels-idx1-ubyte",
            train ? "train-labels.idx1-ubyte" : "t10k-labels.idx1-ubyte"});
  return load_idx(images, labels, split);
}

std::filesystem::path default_data_dir() {
  if (const char* env = std::getenv("CYCLEFED_DATA_DIR"); env && *env)
    return env;
  return "data";
}

LabeledDataset synth_dataset(int classes, int per_class, std::uint64_t seed,
                             Split split, const SynthOptions& options) {
  if (classes < 2) throw std::invalid_argument("synth_dataset: classes < 2");
  if (per_class < 1) throw std::invalid_argument("synth_dataset: per_class < 1");
  if (!(options.noise >= 0.0) || !(options.jitter >= 0.0))
    throw std::invalid_argument("synth_dataset: negative noise or jitter");
  LabeledDataset d;
  d.classes = classes;
  d.split = split;
  d.source = Source::synthetic;
  const std::size_t pixels = d.image_size();

  struct Stroke {
    double cy, cx, sigma;
  };
  std::vector<Stroke> strokes;
  Rng trng(derive_seed(seed, Stream::synth, 0, static_cast<std::uint64_t>(classes)));
  for (int c = 0; c < classes * kStrokesPerTemplate; ++c) {
    const double cy = 5.0 + 18.0 * trng.uniform();
    const double cx = 5.0 + 18.0 * trng.uniform();
    strokes.push_back({cy, cx, 1.5 + 2.0 * trng.uniform()});
  }

  const std::size_t n = static_cast<std::size_t>(classes) * per_class;
  d.pixels.assign(n * pixels, 0.0f);
  d.labels.resize(n);
  Rng nrng(derive_seed(seed, Stream::synth, split == Split::train ? 1 : 2));
  std::vector<double> img(pixels);
  for (std::size_t i = 0; i < n; ++i) {
    const int c = static_cast<int>(i % classes);
    d.labels[i] = static_cast<std::uint8_t>(c);
    std::fill(img.begin(), img.end(), 0.0);
    for (int k = 0; k < kStrokesPerTemplate; ++k) {
      const Stroke& s = strokes[c * kStrokesPerTemplate + k];
      const double cy = s.cy + options.jitter * nrng.normal();
      const double cx = s.cx + options.jitter * nrng.normal();
      const double amp = options.jitter > 0.0 ? 0.6 + 0.4 * nrng.uniform() : 1.0;
      const double inv = 1.0 / (2 * s.sigma * s.sigma);
      for (int y = 0; y < d.rows; ++y)
        for (int x = 0; x < d.cols; ++x) {
          const double r2 = (y - cy) * (y - cy) + (x - cx) * (x - cx);
          img[y * d.cols + x] += amp * std::exp(-r2 * inv);
        }
    }
    float* out = d.pixels.data() + i * pixels;
    for (std::size_t j = 0; j < pixels; ++j) {
      const double v = std::min(img[j], 1.0) + options.noise * nrng.normal();
      out[j] = static_cast<float>(std::clamp(v, 0.0, 1.0));
    }
  }
  return d;
}

LabeledDataset subsample(const LabeledDataset& data, double fraction,
                         std::uint64_t seed) {
  if (!(fraction > 0.0 && fraction <= 1.0))
    throw std::invalid_argument("subsample: fraction must lie in (0, 1]");
  std::vector<std::vector<std::size_t>> by_class(data.classes);
  for (std::size_t i = 0; i < data.size(); ++i) by_class[data.labels[i]].push_back(i);
  Rng rng(seed);
  std::vector<std::size_t> keep;
  for (auto& idx : by_class) {
    rng.shuffle(std::span<std::size_t>(idx));
    const auto k = static_cast<std::size_t>(std::llround(fraction * idx.size()));
    keep.insert(keep.end(), idx.begin(), idx.begin() + k);
  }
  std::sort(keep.begin(), keep.end());
  LabeledDataset out = data;
  out.pixels.resize(keep.size() * data.image_size());
  out.labels.resize(keep.size());
  for (std::size_t i = 0; i < keep.size(); ++i) {
    const auto img = data.image(keep[i]);
    std::copy(img.begin(), img.end(), out.pixels.begin() + i * data.image_size());
    out.labels[i] = data.labels[keep[i]];
  }
  return out;
}

template <class Real>
nn::Batch<Real> make_batch(const LabeledDataset& data,
                           std::span<const std::size_t> indices) {
  nn::Batch<Real> b;
  const std::size_t px = data.image_size();
  b.inputs = nn::Tensor<Real>({indices.size(), static_cast<std::size_t>(data.rows),
                               static_cast<std::size_t>(data.cols), 1});
  b.labels.resize(indices.size());
  for (std::size_t i = 0; i < indices.size(); ++i) {
    const auto img = data.image(indices[i]);
    std::copy(img.begin(), img.end(), b.inputs.data.begin() + i * px);
    b.labels[i] = data.labels[indices[i]];
  }
  return b;
}

template <class Real>
nn::Evaluation evaluate_on(const nn::ModelState<Real>& model,
                           const LabeledDataset& data,
                           std::span<const std::size_t> indices,
                           std::size_t chunk) {
  nn::Evaluator<Real> ev(model);
  for (std::size_t start = 0; start < indices.size(); start += chunk) {
    const auto n = std::min(chunk, indices.size() - start);
    ev.add(make_batch<Real>(data, indices.subspan(start, n)));
  }
  return ev.result();
}

template nn::Batch<float> make_batch<float>(const LabeledDataset&,
                                            std::span<const std::size_t>);
template nn::Batch<double> make_batch<double>(const LabeledDataset&,
                                              std::span<const std::size_t>);
template nn::Evaluation evaluate_on<float>(const nn::ModelState<float>&,
                                           const LabeledDataset&,
                                           std::span<const std::size_t>,
                                           std::size_t);
template nn::Evaluation evaluate_on<double>(const nn::ModelState<double>&,
                                            const LabeledDataset&,
                                            std::span<const std::size_t>,
                                            std::size_t);

}  // namespace cyclefed::data
