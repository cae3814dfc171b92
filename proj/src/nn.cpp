#include "cyclefed/nn.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "cyclefed/rng.hpp"

namespace cyclefed::nn {

namespace {

// Register tile of the blocked kernels: kRows rows of C by kCols columns.
constexpr std::size_t kRows = 4;
template <class Real>
constexpr std::size_t kCols = 256 / sizeof(Real);

// acc[r][:] += sum over q of a(r, q) * b(q, :), q in [0, depth), in order.
// a(r, q) = a[r * a_row + q * a_step]; b(q, :) starts at b + q * n.
template <class Real>
inline void tile(std::size_t depth, const Real* __restrict a, std::size_t a_row,
                 std::size_t a_step, const Real* __restrict b, std::size_t n,
                 Real* __restrict c, std::size_t c_row) {
  constexpr std::size_t W = kCols<Real>;
  Real acc[kRows][W];
  for (std::size_t r = 0; r < kRows; ++r)
    for (std::size_t j = 0; j < W; ++j) acc[r][j] = c[r * c_row + j];
  for (std::size_t q = 0; q < depth; ++q) {
    const Real* brow = b + q * n;
    for (std::size_t r = 0; r < kRows; ++r) {
      const Real v = a[r * a_row + q * a_step];
      for (std::size_t j = 0; j < W; ++j) acc[r][j] += v * brow[j];
    }
  }
  for (std::size_t r = 0; r < kRows; ++r)
    for (std::size_t j = 0; j < W; ++j) c[r * c_row + j] = acc[r][j];
}

// C[m x n] += A[m x k] * B[k x n]
template <class Real>
void gemm_nn(std::size_t m, std::size_t n, std::size_t k,
             const Real* __restrict a, const Real* __restrict b,
             Real* __restrict c) {
  constexpr std::size_t W = kCols<Real>;
  const std::size_t n_tiled = n - n % W;
  const std::size_t m_tiled = n_tiled ? m - m % kRows : 0;
  for (std::size_t i = 0; i < m_tiled; i += kRows)
    for (std::size_t j = 0; j < n_tiled; j += W)
      tile(k, a + i * k, k, 1, b + j, n, c + i * n + j, n);
  for (std::size_t i = 0; i < m; ++i) {
    const std::size_t j0 = i < m_tiled ? n_tiled : 0;
    if (j0 == n) continue;
    Real* crow = c + i * n;
    const Real* arow = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const Real v = arow[p];
      if (v == Real(0)) continue;
      const Real* brow = b + p * n;
      for (std::size_t j = j0; j < n; ++j) crow[j] += v * brow[j];
    }
  }
}

// C[k x n] += A[m x k]^T * B[m x n]
template <class Real>
void gemm_tn(std::size_t m, std::size_t n, std::size_t k,
             const Real* __restrict a, const Real* __restrict b,
             Real* __restrict c) {
  constexpr std::size_t W = kCols<Real>;
  const std::size_t n_tiled = n - n % W;
  const std::size_t k_tiled = n_tiled ? k - k % kRows : 0;
  for (std::size_t p = 0; p < k_tiled; p += kRows)
    for (std::size_t j = 0; j < n_tiled; j += W)
      tile(m, a + p, 1, k, b + j, n, c + p * n + j, n);
  for (std::size_t i = 0; i < m; ++i) {
    const Real* arow = a + i * k;
    const Real* brow = b + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const std::size_t j0 = p < k_tiled ? n_tiled : 0;
      if (j0 == n) continue;
      const Real v = arow[p];
      if (v == Real(0)) continue;
      Real* crow = c + p * n;
      for (std::size_t j = j0; j < n; ++j) crow[j] += v * brow[j];
    }
  }
}

// C[m x k] = A[m x n] * B[k x n]^T, via a transposed copy of B.
template <class Real>
void gemm_nt(std::size_t m, std::size_t n, std::size_t k,
             const Real* __restrict a, const Real* __restrict b,
             Real* __restrict c) {
  thread_local std::vector<Real> bt;
  bt.resize(n * k);
  for (std::size_t p = 0; p < k; ++p)
    for (std::size_t j = 0; j < n; ++j) bt[j * k + p] = b[p * n + j];
  std::fill_n(c, m * k, Real(0));
  gemm_nn(m, k, n, a, bt.data(), c);
}

// One row per output pixel, (ky, kx, channel) along the row.
template <class Real>
void im2col(const Real* in, const Shape3& s, int kernel, Real* cols) {
  const int oh = s.height - kernel + 1;
  const int ow = s.width - kernel + 1;
  const std::size_t c = s.channels;
  Real* dst = cols;
  for (int y = 0; y < oh; ++y)
    for (int x = 0; x < ow; ++x)
      for (int ky = 0; ky < kernel; ++ky) {
        const Real* src = in + ((y + ky) * s.width + x) * c;
        std::copy_n(src, kernel * c, dst);
        dst += kernel * c;
      }
}

template <class Real>
void col2im_add(const Real* cols, const Shape3& s, int kernel, Real* in) {
  const int oh = s.height - kernel + 1;
  const int ow = s.width - kernel + 1;
  const std::size_t c = s.channels;
  const Real* src = cols;
  for (int y = 0; y < oh; ++y)
    for (int x = 0; x < ow; ++x)
      for (int ky = 0; ky < kernel; ++ky) {
        Real* dst = in + ((y + ky) * s.width + x) * c;
        for (std::size_t j = 0; j < kernel * c; ++j) dst[j] += src[j];
        src += kernel * c;
      }
}

struct PlannedLayer {
  Shape3 out;
  std::size_t weights = 0;
  std::size_t biases = 0;
};

PlannedLayer plan_layer(const LayerSpec& l, const Shape3& in) {
  PlannedLayer p;
  switch (l.kind) {
    case LayerKind::conv:
      if (l.kernel < 1 || l.size < 1 || in.height < l.kernel ||
          in.width < l.kernel)
        throw ShapeError("convolution does not fit its input");
      p.out = {in.height - l.kernel + 1, in.width - l.kernel + 1, l.size};
      p.weights = static_cast<std::size_t>(l.kernel) * l.kernel *
                  in.channels * l.size;
      p.biases = l.size;
      break;
    case LayerKind::maxpool:
      if (l.size < 1 || in.height < l.size || in.width < l.size)
        throw ShapeError("pooling window does not fit its input");
      p.out = {in.height / l.size, in.width / l.size, in.channels};
      break;
    case LayerKind::dropout:
      if (!(l.dropout >= 0.0 && l.dropout < 1.0))
        throw ShapeError("dropout probability must lie in [0, 1)");
      p.out = in;
      break;
    case LayerKind::dense:
      if (l.size < 1) throw ShapeError("dense layer needs units");
      p.out = {1, 1, l.size};
      p.weights = in.size() * l.size;
      p.biases = l.size;
      break;
  }
  return p;
}

}  // namespace

std::string_view to_string(Precision p) {
  return p == Precision::f32 ? "f32" : "f64";
}

Precision parse_precision(std::string_view text) {
  if (text == "f32") return Precision::f32;
  if (text == "f64") return Precision::f64;
  throw std::invalid_argument("precision must be f32 or f64, got '" +
                              std::string(text) + "'");
}

std::size_t ModelSpec::param_count() const {
  Shape3 shape = input;
  std::size_t total = 0;
  for (const auto& l : layers) {
    const auto p = plan_layer(l, shape);
    total += p.weights + p.biases;
    shape = p.out;
  }
  return total;
}

ModelSpec make_spec(std::string_view arch) {
  ModelSpec spec;
  spec.arch = std::string(arch);
  spec.input = {28, 28, 1};
  spec.classes = 10;
  if (arch == "paper-cnn") {
    spec.layers = {LayerSpec::conv(32, 3), LayerSpec::conv(64, 3),
                   LayerSpec::maxpool(2),  LayerSpec::drop(0.25),
                   LayerSpec::dense(128, true), LayerSpec::drop(0.5),
                   LayerSpec::dense(10, false)};
  } else if (arch == "mlp-small") {
    spec.layers = {LayerSpec::dense(128, true), LayerSpec::dense(10, false)};
  } else {
    throw std::invalid_argument("unknown architecture '" + std::string(arch) +
                                "'");
  }
  return spec;
}

std::vector<std::string> registered_architectures() {
  return {"paper-cnn", "mlp-small"};
}

template <class Real>
Tensor<Real>::Tensor(std::vector<std::size_t> dims) : shape(std::move(dims)) {
  const std::size_t n = std::accumulate(shape.begin(), shape.end(),
                                        std::size_t{1}, std::multiplies<>());
  data.assign(n, Real(0));
}

template <class Real>
std::size_t Tensor<Real>::row_size() const {
  if (shape.empty()) return 0;
  return std::accumulate(shape.begin() + 1, shape.end(), std::size_t{1},
                         std::multiplies<>());
}

template <class Real>
ModelState<Real> build_model(const ModelSpec& spec, std::uint64_t init_seed) {
  ModelState<Real> model{spec, std::vector<Real>(spec.param_count(), Real(0))};
  Rng rng(init_seed);
  Shape3 shape = spec.input;
  std::size_t offset = 0;
  for (const auto& l : spec.layers) {
    const auto p = plan_layer(l, shape);
    if (p.weights > 0) {
      const std::size_t fan_in =
          l.kind == LayerKind::conv
              ? static_cast<std::size_t>(l.kernel) * l.kernel * shape.channels
              : shape.size();
      const double scale = std::sqrt(2.0 / static_cast<double>(fan_in));
      for (std::size_t i = 0; i < p.weights; ++i)
        model.params[offset + i] = static_cast<Real>(rng.normal() * scale);
    }
    offset += p.weights + p.biases;
    shape = p.out;
  }
  return model;
}

template <class Real>
Network<Real>::Network(ModelSpec spec) : spec_(std::move(spec)) {
  Shape3 shape = spec_.input;
  std::size_t offset = 0;
  for (const auto& l : spec_.layers) {
    const auto p = plan_layer(l, shape);
    Layer layer{l, shape, p.out, offset, p.weights, offset + p.weights,
                p.biases};
    offset += p.weights + p.biases;
    layers_.push_back(layer);
    shape = p.out;
  }
  if (layers_.empty() || layers_.back().spec.kind != LayerKind::dense ||
      static_cast<int>(shape.size()) != spec_.classes)
    throw ShapeError("final layer must be dense with one unit per class");
  param_count_ = offset;
  acts_.resize(layers_.size() + 1);
  pool_argmax_.resize(layers_.size());
  dropout_scale_.resize(layers_.size());
}

template <class Real>
void Network<Real>::check_batch(const Batch<Real>& batch) const {
  const auto& shape = batch.inputs.shape;
  const Shape3& in = spec_.input;
  const bool ok = shape.size() == 4 &&
                  shape[1] == static_cast<std::size_t>(in.height) &&
                  shape[2] == static_cast<std::size_t>(in.width) &&
                  shape[3] == static_cast<std::size_t>(in.channels) &&
                  shape[0] == batch.labels.size() &&
                  batch.inputs.data.size() == shape[0] * in.size();
  if (!ok) throw ShapeError("batch shape does not match model input");
  if (batch.labels.empty()) throw ShapeError("empty batch");
  for (int y : batch.labels)
    if (y < 0 || y >= spec_.classes)
      throw ShapeError("label out of range for model");
}

template <class Real>
double Network<Real>::run_forward(std::span<const Real> params,
                                  const Batch<Real>& batch, Mode mode,
                                  std::uint64_t dropout_seed) {
  if (params.size() != param_count_)
    throw ShapeError("parameter vector length does not match model");
  check_batch(batch);
  batch_ = batch.size();
  const std::size_t b = batch_;
  acts_[0].assign(batch.inputs.data.begin(), batch.inputs.data.end());

  for (std::size_t li = 0; li < layers_.size(); ++li) {
    const Layer& L = layers_[li];
    const std::vector<Real>& in = acts_[li];
    std::vector<Real>& out = acts_[li + 1];
    const std::size_t in_size = L.in.size();
    const std::size_t out_size = L.out.size();
    out.resize(b * out_size);

    switch (L.spec.kind) {
      case LayerKind::conv: {
        const std::size_t k = L.spec.kernel;
        const std::size_t pixels =
            static_cast<std::size_t>(L.out.height) * L.out.width;
        const std::size_t depth = k * k * L.in.channels;
        const std::size_t filters = L.out.channels;
        const Real* w = params.data() + L.weight_offset;
        const Real* bias = params.data() + L.bias_offset;
        columns_.resize(pixels * depth);
        for (std::size_t s = 0; s < b; ++s) {
          Real* o = out.data() + s * out_size;
          for (std::size_t p = 0; p < pixels; ++p)
            std::copy_n(bias, filters, o + p * filters);
          im2col(in.data() + s * in_size, L.in, L.spec.kernel,
                 columns_.data());
          gemm_nn(pixels, filters, depth, columns_.data(), w, o);
        }
        break;
      }
      case LayerKind::dense: {
        const std::size_t units = out_size;
        const Real* bias = params.data() + L.bias_offset;
        for (std::size_t s = 0; s < b; ++s)
          std::copy_n(bias, units, out.data() + s * units);
        gemm_nn(b, units, in_size, in.data(), params.data() + L.weight_offset,
                out.data());
        break;
      }
      case LayerKind::maxpool: {
        const int win = L.spec.size;
        const std::size_t c = L.in.channels;
        auto& argmax = pool_argmax_[li];
        argmax.resize(b * out_size);
        for (std::size_t s = 0; s < b; ++s) {
          const std::size_t base = s * in_size;
          for (int y = 0; y < L.out.height; ++y)
            for (int x = 0; x < L.out.width; ++x)
              for (std::size_t ch = 0; ch < c; ++ch) {
                std::size_t best = base + ((y * win) * L.in.width + x * win) * c + ch;
                for (int dy = 0; dy < win; ++dy)
                  for (int dx = 0; dx < win; ++dx) {
                    const std::size_t idx =
                        base + ((y * win + dy) * L.in.width + x * win + dx) * c + ch;
                    if (in[idx] > in[best]) best = idx;
                  }
                const std::size_t o =
                    s * out_size + (y * L.out.width + x) * c + ch;
                out[o] = in[best];
                argmax[o] = static_cast<std::uint32_t>(best);
              }
        }
        break;
      }
      case LayerKind::dropout: {
        auto& scale = dropout_scale_[li];
        if (mode == Mode::eval || L.spec.dropout == 0.0) {
          scale.clear();
          std::copy(in.begin(), in.end(), out.begin());
          break;
        }
        const double p = L.spec.dropout;
        const Real keep_scale = static_cast<Real>(1.0 / (1.0 - p));
        const std::uint64_t layer_seed =
            derive_seed(dropout_seed, Stream::dropout, li);
        scale.resize(b * out_size);
        for (std::size_t j = 0; j < scale.size(); ++j) {
          const double u =
              static_cast<double>(mix64(layer_seed + j) >> 11) * 0x1.0p-53;
          scale[j] = u < p ? Real(0) : keep_scale;
          out[j] = in[j] * scale[j];
        }
        break;
      }
    }
    if (L.spec.relu)
      for (auto& v : out) v = v > Real(0) ? v : Real(0);
  }

  // Fused log-sum-exp softmax cross-entropy.
  const std::size_t classes = spec_.classes;
  const std::vector<Real>& logits = acts_.back();
  probs_.resize(b * classes);
  double total = 0.0;
  for (std::size_t s = 0; s < b; ++s) {
    const Real* z = logits.data() + s * classes;
    double zmax = z[0];
    for (std::size_t j = 1; j < classes; ++j) zmax = std::max<double>(zmax, z[j]);
    double sum = 0.0;
    for (std::size_t j = 0; j < classes; ++j) sum += std::exp(z[j] - zmax);
    const double lse = zmax + std::log(sum);
    for (std::size_t j = 0; j < classes; ++j)
      probs_[s * classes + j] = static_cast<Real>(std::exp(z[j] - lse));
    total += lse - z[batch.labels[s]];
  }
  return total / static_cast<double>(b);
}

template <class Real>
ForwardResult<Real> Network<Real>::forward(std::span<const Real> params,
                                           const Batch<Real>& batch, Mode mode,
                                           std::uint64_t dropout_seed) {
  ForwardResult<Real> result;
  result.loss = run_forward(params, batch, mode, dropout_seed);
  result.logits.shape = {batch_, static_cast<std::size_t>(spec_.classes)};
  result.logits.data = acts_.back();
  if (!std::isfinite(result.loss))
    throw DivergenceError("non-finite loss in forward pass");
  return result;
}

template <class Real>
std::vector<int> Network<Real>::predict(std::span<const Real> params,
                                        const Batch<Real>& batch,
                                        double* mean_loss) {
  const double loss = run_forward(params, batch, Mode::eval, 0);
  if (mean_loss) *mean_loss = loss;
  const std::size_t classes = spec_.classes;
  std::vector<int> out(batch_);
  for (std::size_t s = 0; s < batch_; ++s) {
    const Real* z = acts_.back().data() + s * classes;
    int best = 0;
    for (std::size_t j = 1; j < classes; ++j)
      if (z[j] > z[best]) best = static_cast<int>(j);
    out[s] = best;
  }
  return out;
}

template <class Real>
double Network<Real>::gradient(std::span<const Real> params,
                               const Batch<Real>& batch,
                               std::uint64_t dropout_seed,
                               std::span<Real> grad) {
  if (grad.size() != param_count_)
    throw ShapeError("gradient buffer length does not match model");
  const double loss = run_forward(params, batch, Mode::train, dropout_seed);
  if (!std::isfinite(loss))
    throw DivergenceError("non-finite loss in training pass");
  std::fill(grad.begin(), grad.end(), Real(0));

  const std::size_t b = batch_;
  const std::size_t classes = spec_.classes;
  const Real inv_b = Real(1) / static_cast<Real>(b);
  delta_.assign(probs_.begin(), probs_.end());
  for (std::size_t s = 0; s < b; ++s)
    delta_[s * classes + batch.labels[s]] -= Real(1);
  for (auto& d : delta_) d *= inv_b;

  for (std::size_t li = layers_.size(); li-- > 0;) {
    const Layer& L = layers_[li];
    const std::vector<Real>& in = acts_[li];
    const std::vector<Real>& out = acts_[li + 1];
    const std::size_t in_size = L.in.size();
    const std::size_t out_size = L.out.size();
    const bool need_input_grad = li > 0;

    if (L.spec.relu)
      for (std::size_t j = 0; j < delta_.size(); ++j)
        if (!(out[j] > Real(0))) delta_[j] = Real(0);

    switch (L.spec.kind) {
      case LayerKind::dense: {
        const std::size_t units = out_size;
        Real* dw = grad.data() + L.weight_offset;
        Real* db = grad.data() + L.bias_offset;
        gemm_tn(b, units, in_size, in.data(), delta_.data(), dw);
        for (std::size_t s = 0; s < b; ++s)
          for (std::size_t j = 0; j < units; ++j) db[j] += delta_[s * units + j];
        if (need_input_grad) {
          delta_next_.resize(b * in_size);
          gemm_nt(b, units, in_size, delta_.data(),
                  params.data() + L.weight_offset, delta_next_.data());
        }
        break;
      }
      case LayerKind::conv: {
        const std::size_t k = L.spec.kernel;
        const std::size_t pixels =
            static_cast<std::size_t>(L.out.height) * L.out.width;
        const std::size_t depth = k * k * L.in.channels;
        const std::size_t filters = L.out.channels;
        Real* dw = grad.data() + L.weight_offset;
        Real* db = grad.data() + L.bias_offset;
        const Real* w = params.data() + L.weight_offset;
        columns_.resize(pixels * depth);
        if (need_input_grad) {
          delta_next_.assign(b * in_size, Real(0));
          column_grad_.resize(pixels * depth);
        }
        for (std::size_t s = 0; s < b; ++s) {
          const Real* d = delta_.data() + s * out_size;
          im2col(in.data() + s * in_size, L.in, L.spec.kernel,
                 columns_.data());
          gemm_tn(pixels, filters, depth, columns_.data(), d, dw);
          for (std::size_t p = 0; p < pixels; ++p)
            for (std::size_t f = 0; f < filters; ++f) db[f] += d[p * filters + f];
          if (need_input_grad) {
            gemm_nt(pixels, filters, depth, d, w, column_grad_.data());
            col2im_add(column_grad_.data(), L.in, L.spec.kernel,
                       delta_next_.data() + s * in_size);
          }
        }
        break;
      }
      case LayerKind::maxpool: {
        if (!need_input_grad) break;
        delta_next_.assign(b * in_size, Real(0));
        const auto& argmax = pool_argmax_[li];
        for (std::size_t j = 0; j < delta_.size(); ++j)
          delta_next_[argmax[j]] += delta_[j];
        break;
      }
      case LayerKind::dropout: {
        if (!need_input_grad) break;
        const auto& scale = dropout_scale_[li];
        delta_next_.resize(delta_.size());
        if (scale.empty())
          std::copy(delta_.begin(), delta_.end(), delta_next_.begin());
        else
          for (std::size_t j = 0; j < delta_.size(); ++j)
            delta_next_[j] = delta_[j] * scale[j];
        break;
      }
    }
    if (need_input_grad) std::swap(delta_, delta_next_);
  }
  return loss;
}

template <class Real>
std::uint64_t Network<Real>::activation_signature() const {
  std::uint64_t h = mix64(batch_);
  for (std::size_t li = 0; li < layers_.size(); ++li) {
    const Layer& L = layers_[li];
    if (L.spec.relu) {
      std::uint64_t word = 0;
      const auto& out = acts_[li + 1];
      for (std::size_t j = 0; j < out.size(); ++j) {
        word = (word << 1) | (out[j] > Real(0) ? 1u : 0u);
        if (j % 64 == 63) {
          h = mix64(h ^ word);
          word = 0;
        }
      }
      h = mix64(h ^ word);
    }
    if (L.spec.kind == LayerKind::maxpool)
      for (auto idx : pool_argmax_[li]) h = mix64(h ^ idx);
  }
  return h;
}

template <class Real>
ForwardResult<Real> forward(const ModelState<Real>& model,
                            const Batch<Real>& batch, Mode mode,
                            std::uint64_t dropout_seed) {
  Network<Real> net(model.spec);
  return net.forward(model.params, batch, mode, dropout_seed);
}

template <class Real>
std::vector<Real> backward(const ModelState<Real>& model,
                           const Batch<Real>& batch,
                           std::uint64_t dropout_seed) {
  Network<Real> net(model.spec);
  std::vector<Real> grad(net.param_count());
  net.gradient(model.params, batch, dropout_seed, grad);
  return grad;
}

template <class Real>
void sgd_step(ModelState<Real>& model, OptimizerState<Real>& opt,
              std::type_identity_t<std::span<const Real>> gradient) {
  if (gradient.size() != model.params.size() ||
      opt.velocity.size() != model.params.size())
    throw ShapeError("sgd_step: length mismatch");
  const Real beta = static_cast<Real>(opt.momentum);
  const Real lr = static_cast<Real>(opt.learning_rate);
  Real* __restrict v = opt.velocity.data();
  Real* __restrict w = model.params.data();
  const Real* __restrict g = gradient.data();
  const std::size_t n = model.params.size();
  for (std::size_t i = 0; i < n; ++i) {
    v[i] = beta * v[i] + g[i];
    w[i] -= lr * v[i];
  }
}

std::int64_t ConfusionMatrix::total() const {
  return std::accumulate(counts.begin(), counts.end(), std::int64_t{0});
}

std::int64_t ConfusionMatrix::trace() const {
  std::int64_t t = 0;
  for (int i = 0; i < classes; ++i) t += at(i, i);
  return t;
}

std::int64_t ConfusionMatrix::row_sum(int truth) const {
  std::int64_t t = 0;
  for (int j = 0; j < classes; ++j) t += at(truth, j);
  return t;
}

template <class Real>
Evaluator<Real>::Evaluator(const ModelState<Real>& model)
    : model_(model), network_(model.spec), confusion_(model.spec.classes) {}

template <class Real>
void Evaluator<Real>::add(const Batch<Real>& batch) {
  double loss = 0.0;
  const auto predictions = network_.predict(model_.params, batch, &loss);
  loss_sum_ += loss * static_cast<double>(batch.size());
  for (std::size_t s = 0; s < batch.size(); ++s)
    ++confusion_.at(batch.labels[s], predictions[s]);
  seen_ += static_cast<std::int64_t>(batch.size());
}

template <class Real>
Evaluation Evaluator<Real>::result() const {
  if (seen_ == 0) throw std::invalid_argument("evaluate: empty data stream");
  Evaluation e;
  e.confusion = confusion_;
  e.accuracy = static_cast<double>(confusion_.trace()) / static_cast<double>(seen_);
  e.mean_loss = loss_sum_ / static_cast<double>(seen_);
  return e;
}

template <class Real>
Evaluation evaluate(const ModelState<Real>& model,
                    std::span<const Batch<Real>> batches) {
  Evaluator<Real> ev(model);
  for (const auto& b : batches) ev.add(b);
  return ev.result();
}

#define CYCLEFED_INSTANTIATE(Real)                                           \
  template struct Tensor<Real>;                                              \
  template class Network<Real>;                                              \
  template class Evaluator<Real>;                                            \
  template ModelState<Real> build_model<Real>(const ModelSpec&,              \
                                              std::uint64_t);                \
  template ForwardResult<Real> forward<Real>(const ModelState<Real>&,        \
                                             const Batch<Real>&, Mode,       \
                                             std::uint64_t);                 \
  template std::vector<Real> backward<Real>(const ModelState<Real>&,         \
                                            const Batch<Real>&,              \
                                            std::uint64_t);                  \
  template void sgd_step<Real>(ModelState<Real>&, OptimizerState<Real>&,     \
                               std::type_identity_t<std::span<const Real>>); \
  template Evaluation evaluate<Real>(const ModelState<Real>&,                \
                                     std::span<const Batch<Real>>);

CYCLEFED_INSTANTIATE(float)
CYCLEFED_INSTANTIATE(double)

#undef CYCLEFED_INSTANTIATE

}  // namespace cyclefed::nn
