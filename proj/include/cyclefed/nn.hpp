#pragma once

// Feed-forward network engine over a flat parameter vector: valid 3x3
// convolution, 2x2 max pooling, inverted dropout, dense layers with
// optional fused ReLU, and a fused softmax cross-entropy head.
//
// Parameters are laid out layer by layer, weights first then biases.
// Convolution weights are stored as [kh][kw][in_channels][out_channels],
// dense weights as [inputs][outputs]. Activations are NHWC.

#include <cstddef>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <type_traits>
#include <vector>

namespace cyclefed::nn {

enum class Precision { f32, f64 };

std::string_view to_string(Precision p);
Precision parse_precision(std::string_view text);

enum class LayerKind { conv, maxpool, dropout, dense };

struct LayerSpec {
  LayerKind kind = LayerKind::dense;
  int size = 0;          // output channels (conv), units (dense), window (pool)
  int kernel = 0;        // conv only
  double dropout = 0.0;  // drop probability, dropout only
  bool relu = false;     // fused activation on conv/dense output

  static LayerSpec conv(int channels, int kernel, bool relu = true) {
    return {LayerKind::conv, channels, kernel, 0.0, relu};
  }
  static LayerSpec maxpool(int window) {
    return {LayerKind::maxpool, window, 0, 0.0, false};
  }
  static LayerSpec drop(double p) {
    return {LayerKind::dropout, 0, 0, p, false};
  }
  static LayerSpec dense(int units, bool relu) {
    return {LayerKind::dense, units, 0, 0.0, relu};
  }
};

struct Shape3 {
  int height = 0;
  int width = 0;
  int channels = 0;

  std::size_t size() const {
    return static_cast<std::size_t>(height) * width * channels;
  }
  friend bool operator==(const Shape3&, const Shape3&) = default;
};

struct ModelSpec {
  std::string arch;
  std::vector<LayerSpec> layers;
  Shape3 input;
  int classes = 0;

  /// Throws std::invalid_argument if the layer list is not realizable on
  /// the input shape.
  std::size_t param_count() const;
};

/// Registered architectures: "paper-cnn" and "mlp-small".
ModelSpec make_spec(std::string_view arch);
std::vector<std::string> registered_architectures();

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Raised when the loss of a forward pass is not finite.
class DivergenceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

template <class Real>
struct Tensor {
  std::vector<std::size_t> shape;
  std::vector<Real> data;

  Tensor() = default;
  explicit Tensor(std::vector<std::size_t> dims);

  std::size_t size() const { return data.size(); }
  std::size_t rows() const { return shape.empty() ? 0 : shape.front(); }
  /// Elements per leading-dimension row.
  std::size_t row_size() const;
  std::span<const Real> row(std::size_t i) const {
    return std::span<const Real>(data).subspan(i * row_size(), row_size());
  }
  std::span<Real> row(std::size_t i) {
    return std::span<Real>(data).subspan(i * row_size(), row_size());
  }
};

template <class Real>
struct Batch {
  Tensor<Real> inputs;  // [b, height, width, channels]
  std::vector<int> labels;

  std::size_t size() const { return labels.size(); }
};

template <class Real>
struct ModelState {
  ModelSpec spec;
  std::vector<Real> params;

  std::size_t param_count() const { return params.size(); }
};

template <class Real>
struct OptimizerState {
  double learning_rate = 0.01;
  double momentum = 0.5;
  std::vector<Real> velocity;

  OptimizerState() = default;
  OptimizerState(double lr, double beta, std::size_t params)
      : learning_rate(lr), momentum(beta), velocity(params, Real(0)) {}
};

enum class Mode { train, eval };

template <class Real>
struct ForwardResult {
  Tensor<Real> logits;  // [b, classes]
  double loss = 0.0;    // mean cross-entropy
};

/// Fan-in scaled normal weights (std = sqrt(2 / fan_in)), zero biases.
template <class Real>
ModelState<Real> build_model(const ModelSpec& spec, std::uint64_t init_seed);

/// Compiled layer plan plus reusable activation buffers. One instance per
/// thread; the parameters are passed in on every call and never stored.
template <class Real>
class Network {
 public:
  explicit Network(ModelSpec spec);

  const ModelSpec& spec() const { return spec_; }
  std::size_t param_count() const { return param_count_; }

  ForwardResult<Real> forward(std::span<const Real> params,
                              const Batch<Real>& batch, Mode mode,
                              std::uint64_t dropout_seed);

  /// Train-mode forward plus backprop of the mean loss. Writes into `grad`
  /// (overwritten, not accumulated) and returns the mean loss.
  double gradient(std::span<const Real> params, const Batch<Real>& batch,
                  std::uint64_t dropout_seed, std::span<Real> grad);

  /// Argmax predictions of an eval-mode pass; ties go to the lowest class.
  /// Optionally reports the mean loss of the same pass (may be non-finite).
  std::vector<int> predict(std::span<const Real> params,
                           const Batch<Real>& batch,
                           double* mean_loss = nullptr);

  /// Hash of the ReLU on/off pattern and pooling argmax positions of the
  /// most recent forward pass. Two passes with equal signatures lie in the
  /// same piecewise-smooth region of the loss.
  std::uint64_t activation_signature() const;

 private:
  struct Layer {
    LayerSpec spec;
    Shape3 in;
    Shape3 out;
    std::size_t weight_offset = 0;
    std::size_t weight_count = 0;
    std::size_t bias_offset = 0;
    std::size_t bias_count = 0;
  };

  double run_forward(std::span<const Real> params, const Batch<Real>& batch,
                     Mode mode, std::uint64_t dropout_seed);
  void check_batch(const Batch<Real>& batch) const;

  ModelSpec spec_;
  std::vector<Layer> layers_;
  std::size_t param_count_ = 0;
  std::size_t batch_ = 0;

  // acts_[i] is the input of layer i; acts_.back() holds the logits.
  std::vector<std::vector<Real>> acts_;
  std::vector<std::vector<std::uint32_t>> pool_argmax_;
  std::vector<std::vector<Real>> dropout_scale_;
  std::vector<Real> columns_;
  std::vector<Real> column_grad_;
  std::vector<Real> delta_;
  std::vector<Real> delta_next_;
  std::vector<Real> probs_;
};

template <class Real>
ForwardResult<Real> forward(const ModelState<Real>& model,
                            const Batch<Real>& batch, Mode mode,
                            std::uint64_t dropout_seed);

/// Gradient of the mean train-mode loss with respect to the parameters.
template <class Real>
std::vector<Real> backward(const ModelState<Real>& model,
                           const Batch<Real>& batch,
                           std::uint64_t dropout_seed);

/// Classical momentum: v <- beta * v + g; w <- w - lr * v.
template <class Real>
void sgd_step(ModelState<Real>& model, OptimizerState<Real>& opt,
              std::type_identity_t<std::span<const Real>> gradient);

struct ConfusionMatrix {
  int classes = 0;
  std::vector<std::int64_t> counts;  // row-major [true][predicted]

  ConfusionMatrix() = default;
  explicit ConfusionMatrix(int n)
      : classes(n), counts(static_cast<std::size_t>(n) * n, 0) {}

  std::int64_t& at(int truth, int predicted) {
    return counts[static_cast<std::size_t>(truth) * classes + predicted];
  }
  std::int64_t at(int truth, int predicted) const {
    return counts[static_cast<std::size_t>(truth) * classes + predicted];
  }
  std::int64_t total() const;
  std::int64_t trace() const;
  std::int64_t row_sum(int truth) const;
};

struct Evaluation {
  double accuracy = 0.0;
  double mean_loss = 0.0;
  ConfusionMatrix confusion;
};

/// Streaming eval-mode metrics: feed batches one at a time, then read the
/// result. Never mutates the model it was constructed with.
template <class Real>
class Evaluator {
 public:
  explicit Evaluator(const ModelState<Real>& model);

  void add(const Batch<Real>& batch);
  std::int64_t seen() const { return seen_; }
  /// Throws std::invalid_argument if no samples were added.
  Evaluation result() const;

 private:
  const ModelState<Real>& model_;
  Network<Real> network_;
  ConfusionMatrix confusion_;
  double loss_sum_ = 0.0;
  std::int64_t seen_ = 0;
};

/// Eval-mode metrics over a stream of batches. Throws std::invalid_argument
/// on an empty stream.
template <class Real>
Evaluation evaluate(const ModelState<Real>& model,
                    std::span<const Batch<Real>> batches);

}  // namespace cyclefed::nn
