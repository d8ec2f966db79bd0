#ifndef VOLNET_NETWORK_HPP
#define VOLNET_NETWORK_HPP

#include <memory>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include "volnet/arch.hpp"
#include "volnet/layers.hpp"
#include "volnet/tensor.hpp"

namespace volnet {

enum class ParamRole { weight, bias, gamma, beta, running_mean, running_var };

inline bool is_trainable(ParamRole role) { return role != ParamRole::running_mean && role != ParamRole::running_var; }

// Handle onto one tensor owned by a layer. Running statistics have no gradient.
template <typename Scalar>
struct ParameterRef {
  std::string name;
  ParamRole role = ParamRole::weight;
  Tensor<Scalar>* value = nullptr;
  Tensor<Scalar>* grad = nullptr;
  Index fan_in = 0;
  Index fan_out = 0;

  bool trainable() const { return is_trainable(role); }
};

template <typename Scalar>
struct NamedTensor {
  std::string name;
  Tensor<Scalar> tensor;

  bool operator==(const NamedTensor&) const = default;
};

// Every tensor of a network (trainable and running statistics) in a fixed order.
template <typename Scalar>
using ParameterStore = std::vector<NamedTensor<Scalar>>;

template <typename To, typename From>
ParameterStore<To> cast_store(const ParameterStore<From>& store) {
  ParameterStore<To> out;
  out.reserve(store.size());
  for (const auto& entry : store) out.push_back({entry.name, entry.tensor.template cast<To>()});
  return out;
}

template <typename Scalar>
struct ForwardContext {
  Mode mode = Mode::infer;
  std::mt19937_64* rng = nullptr;
  BatchNormOptions batchnorm;
};

namespace nn {

template <typename Scalar>
class Layer {
 public:
  virtual ~Layer() = default;
  virtual Tensor<Scalar> forward(const Tensor<Scalar>& x, ForwardContext<Scalar>& ctx) = 0;
  virtual Tensor<Scalar> backward(const Tensor<Scalar>& grad) = 0;
  virtual void collect(std::vector<ParameterRef<Scalar>>&) {}
};

template <typename Scalar>
class ConvLayer final : public Layer<Scalar> {
 public:
  ConvLayer(std::string name, Index c_in, Index c_out, Index kernel)
      : name_(std::move(name)),
        params_{Tensor<Scalar>({c_out, c_in, kernel, kernel, kernel}), Tensor<Scalar>({c_out})},
        grads_{Tensor<Scalar>(params_.weights.shape()), Tensor<Scalar>(params_.biases.shape())},
        kernel_(kernel) {}

  Tensor<Scalar> forward(const Tensor<Scalar>& x, ForwardContext<Scalar>&) override {
    input_ = x;
    return conv3d_forward_batch(x, params_, Padding::same);
  }

  Tensor<Scalar> backward(const Tensor<Scalar>& grad) override {
    ConvBackward<Scalar> result = conv3d_backward_batch(input_, params_, grad, Padding::same);
    grads_ = std::move(result.grads);
    input_ = {};
    return std::move(result.grad_input);
  }

  void collect(std::vector<ParameterRef<Scalar>>& out) override {
    const Index k3 = kernel_ * kernel_ * kernel_;
    const Index c_out = params_.weights.dim(0), c_in = params_.weights.dim(1);
    out.push_back({name_ + ".weight", ParamRole::weight, &params_.weights, &grads_.weights, c_in * k3, c_out * k3});
    out.push_back({name_ + ".bias", ParamRole::bias, &params_.biases, &grads_.biases});
  }

 private:
  std::string name_;
  ConvParams<Scalar> params_;
  ConvGrads<Scalar> grads_;
  Index kernel_;
  Tensor<Scalar> input_;
};

template <typename Scalar>
class BatchNormLayer final : public Layer<Scalar> {
 public:
  BatchNormLayer(std::string name, Index channels)
      : name_(std::move(name)), params_(channels), grad_gamma_({channels}), grad_beta_({channels}) {}

  Tensor<Scalar> forward(const Tensor<Scalar>& x, ForwardContext<Scalar>& ctx) override {
    return batchnorm3d(x, params_, ctx.mode, ctx.batchnorm, &cache_);
  }

  Tensor<Scalar> backward(const Tensor<Scalar>& grad) override {
    BatchNormBackward<Scalar> result = batchnorm3d_backward(cache_, params_, grad);
    grad_gamma_ = std::move(result.grad_gamma);
    grad_beta_ = std::move(result.grad_beta);
    cache_ = {};
    return std::move(result.grad_input);
  }

  void collect(std::vector<ParameterRef<Scalar>>& out) override {
    out.push_back({name_ + ".gamma", ParamRole::gamma, &params_.gamma, &grad_gamma_});
    out.push_back({name_ + ".beta", ParamRole::beta, &params_.beta, &grad_beta_});
    out.push_back({name_ + ".running_mean", ParamRole::running_mean, &params_.running_mean, nullptr});
    out.push_back({name_ + ".running_var", ParamRole::running_var, &params_.running_var, nullptr});
  }

 private:
  std::string name_;
  BatchNormParams<Scalar> params_;
  Tensor<Scalar> grad_gamma_, grad_beta_;
  BatchNormCache<Scalar> cache_;
};

template <typename Scalar>
class ReluLayer final : public Layer<Scalar> {
 public:
  Tensor<Scalar> forward(const Tensor<Scalar>& x, ForwardContext<Scalar>&) override {
    input_ = x;
    return relu(x);
  }
  Tensor<Scalar> backward(const Tensor<Scalar>& grad) override {
    Tensor<Scalar> out = relu_backward(input_, grad);
    input_ = {};
    return out;
  }

 private:
  Tensor<Scalar> input_;
};

template <typename Scalar>
class MaxPoolLayer final : public Layer<Scalar> {
 public:
  MaxPoolLayer(Index pool, Index stride) : pool_(pool), stride_(stride) {}

  Tensor<Scalar> forward(const Tensor<Scalar>& x, ForwardContext<Scalar>&) override {
    MaxPoolResult<Scalar> result = maxpool3d(x, pool_, stride_, Padding::same);
    input_shape_ = x.shape();
    argmax_ = std::move(result.argmax);
    return std::move(result.output);
  }
  Tensor<Scalar> backward(const Tensor<Scalar>& grad) override {
    return maxpool3d_backward(argmax_, input_shape_, grad);
  }

 private:
  Index pool_, stride_;
  Shape input_shape_;
  std::vector<Index> argmax_;
};

template <typename Scalar>
class GlobalAvgPoolLayer final : public Layer<Scalar> {
 public:
  Tensor<Scalar> forward(const Tensor<Scalar>& x, ForwardContext<Scalar>&) override {
    input_shape_ = x.shape();
    return avgpool3d_global(x);
  }
  Tensor<Scalar> backward(const Tensor<Scalar>& grad) override {
    return avgpool3d_global_backward(input_shape_, grad);
  }

 private:
  Shape input_shape_;
};

template <typename Scalar>
class FlattenLayer final : public Layer<Scalar> {
 public:
  Tensor<Scalar> forward(const Tensor<Scalar>& x, ForwardContext<Scalar>&) override {
    input_shape_ = x.shape();
    return x.reshaped({x.dim(0), x.size() / x.dim(0)});
  }
  Tensor<Scalar> backward(const Tensor<Scalar>& grad) override { return grad.reshaped(input_shape_); }

 private:
  Shape input_shape_;
};

template <typename Scalar>
class DropoutLayer final : public Layer<Scalar> {
 public:
  explicit DropoutLayer(double keep_prob) : keep_prob_(keep_prob) {}

  Tensor<Scalar> forward(const Tensor<Scalar>& x, ForwardContext<Scalar>& ctx) override {
    std::mt19937_64 unused(0);
    if (ctx.mode == Mode::train && keep_prob_ < 1.0 && ctx.rng == nullptr)
      fail(ErrorCode::InvalidConfig, "train-mode dropout needs a random stream");
    DropoutResult<Scalar> result = dropout(x, keep_prob_, ctx.mode, ctx.rng != nullptr ? *ctx.rng : unused);
    mask_ = std::move(result.mask);
    return std::move(result.output);
  }
  Tensor<Scalar> backward(const Tensor<Scalar>& grad) override { return dropout_backward(mask_, grad); }

 private:
  double keep_prob_;
  Tensor<Scalar> mask_;
};

template <typename Scalar>
class DenseLayer final : public Layer<Scalar> {
 public:
  DenseLayer(std::string name, Index f_in, Index f_out)
      : name_(std::move(name)),
        params_{Tensor<Scalar>({f_out, f_in}), Tensor<Scalar>({f_out})},
        grad_w_(params_.weights.shape()),
        grad_b_(params_.biases.shape()) {}

  Tensor<Scalar> forward(const Tensor<Scalar>& x, ForwardContext<Scalar>&) override {
    input_ = x;
    return dense(x, params_);
  }
  Tensor<Scalar> backward(const Tensor<Scalar>& grad) override {
    DenseBackward<Scalar> result = dense_backward(input_, params_, grad);
    grad_w_ = std::move(result.grad_weights);
    grad_b_ = std::move(result.grad_biases);
    return std::move(result.grad_input);
  }
  void collect(std::vector<ParameterRef<Scalar>>& out) override {
    const Index f_out = params_.weights.dim(0), f_in = params_.weights.dim(1);
    out.push_back({name_ + ".weight", ParamRole::weight, &params_.weights, &grad_w_, f_in, f_out});
    out.push_back({name_ + ".bias", ParamRole::bias, &params_.biases, &grad_b_});
  }

 private:
  std::string name_;
  DenseParams<Scalar> params_;
  Tensor<Scalar> grad_w_, grad_b_;
  Tensor<Scalar> input_;
};

template <typename Scalar>
class SequenceLayer final : public Layer<Scalar> {
 public:
  void add(std::unique_ptr<Layer<Scalar>> layer) { layers_.push_back(std::move(layer)); }

  Tensor<Scalar> forward(const Tensor<Scalar>& x, ForwardContext<Scalar>& ctx) override {
    Tensor<Scalar> h = x;
    for (auto& layer : layers_) h = layer->forward(h, ctx);
    return h;
  }
  Tensor<Scalar> backward(const Tensor<Scalar>& grad) override {
    Tensor<Scalar> g = grad;
    for (auto it = layers_.rbegin(); it != layers_.rend(); ++it) g = (*it)->backward(g);
    return g;
  }
  void collect(std::vector<ParameterRef<Scalar>>& out) override {
    for (auto& layer : layers_) layer->collect(out);
  }

 private:
  std::vector<std::unique_ptr<Layer<Scalar>>> layers_;
};

// Four parallel bands over the same input, concatenated along channels.
template <typename Scalar>
class InceptionLayer final : public Layer<Scalar> {
 public:
  explicit InceptionLayer(std::vector<std::unique_ptr<SequenceLayer<Scalar>>> bands) : bands_(std::move(bands)) {}

  Tensor<Scalar> forward(const Tensor<Scalar>& x, ForwardContext<Scalar>& ctx) override {
    std::vector<Tensor<Scalar>> outs;
    widths_.clear();
    for (auto& band : bands_) {
      outs.push_back(band->forward(x, ctx));
      widths_.push_back(outs.back().dim(1));
    }
    return concat(std::span<const Tensor<Scalar>>(outs), 1);
  }

  Tensor<Scalar> backward(const Tensor<Scalar>& grad) override {
    Tensor<Scalar> total;
    Index begin = 0;
    for (std::size_t b = 0; b < bands_.size(); ++b) {
      Tensor<Scalar> g = bands_[b]->backward(slice(grad, 1, begin, widths_[b]));
      begin += widths_[b];
      if (total.empty()) {
        total = std::move(g);
      } else {
        total.vec() += g.vec();
      }
    }
    return total;
  }

  void collect(std::vector<ParameterRef<Scalar>>& out) override {
    for (auto& band : bands_) band->collect(out);
  }

 private:
  std::vector<std::unique_ptr<SequenceLayer<Scalar>>> bands_;
  std::vector<Index> widths_;
};

}  // namespace nn

// Executes a NetworkSpec: one pipeline per input ROI, late fusion by
// concatenation, then the tail. Owns every parameter tensor.
template <typename Scalar>
class Network {
 public:
  explicit Network(NetworkSpec spec) : spec_(std::move(spec)) {
    validate(spec_);
    for (const auto& pipeline : spec_.pipelines) {
      auto seq = std::make_unique<nn::SequenceLayer<Scalar>>();
      Shape shape = pipeline.input_shape;
      for (std::size_t i = 0; i < pipeline.blocks.size(); ++i)
        shape = append(*seq, pipeline.input + ".block" + std::to_string(i), shape, pipeline.blocks[i]);
      widths_.push_back(shape[0]);
      pipelines_.push_back(std::move(seq));
    }
    Shape shape{std::accumulate(widths_.begin(), widths_.end(), Index{0})};
    tail_ = std::make_unique<nn::SequenceLayer<Scalar>>();
    for (std::size_t i = 0; i < spec_.tail.size(); ++i) {
      const BlockSpec& block = spec_.tail[i];
      if (std::holds_alternative<Concat>(block) || std::holds_alternative<Softmax>(block)) continue;
      shape = append(*tail_, "fusion." + std::to_string(i) + "." + block_kind(block), shape, block);
    }
    for (auto& p : pipelines_) p->collect(params_);
    tail_->collect(params_);
  }

  Network(const Network&) = delete;
  Network& operator=(const Network&) = delete;
  Network(Network&&) noexcept = default;
  Network& operator=(Network&&) noexcept = default;

  const NetworkSpec& spec() const { return spec_; }
  const std::vector<ParameterRef<Scalar>>& parameters() const { return params_; }
  BatchNormOptions& batchnorm_options() { return batchnorm_; }

  // Element count over trainable tensors, taken from the allocated storage.
  Index trainable_parameter_count() const {
    Index total = 0;
    for (const auto& p : params_)
      if (p.trainable()) total += p.value->size();
    return total;
  }

  // inputs[i]: [N, C, D, H, W] for pipeline i. Returns [N, K] pre-softmax scores.
  Tensor<Scalar> forward_logits(std::span<const Tensor<Scalar>> inputs, Mode mode, std::mt19937_64* rng = nullptr) {
    if (inputs.size() != pipelines_.size())
      fail(ErrorCode::ShapeMismatch, "expected " + std::to_string(pipelines_.size()) + " pipeline inputs");
    const Index n = inputs.front().rank() == 5 ? inputs.front().dim(0) : 0;
    ForwardContext<Scalar> ctx{mode, rng, batchnorm_};
    std::vector<Tensor<Scalar>> features;
    for (std::size_t i = 0; i < inputs.size(); ++i) {
      Shape expected{n};
      expected.insert(expected.end(), spec_.pipelines[i].input_shape.begin(), spec_.pipelines[i].input_shape.end());
      if (inputs[i].shape() != expected)
        fail(ErrorCode::ShapeMismatch, spec_.pipelines[i].input + " input " + shape_string(inputs[i].shape()) +
                                           ", expected " + shape_string(expected));
      features.push_back(pipelines_[i]->forward(inputs[i], ctx));
    }
    Tensor<Scalar> fused = concat(std::span<const Tensor<Scalar>>(features), 1);
    Tensor<Scalar> logits = tail_->forward(fused, ctx);
    last_mode_ = mode;
    has_forward_ = true;
    return logits;
  }

  Tensor<Scalar> forward(std::span<const Tensor<Scalar>> inputs, Mode mode, std::mt19937_64* rng = nullptr) {
    return softmax(forward_logits(inputs, mode, rng));
  }

  // Back-propagates d(loss)/d(logits) through the last train-mode forward pass.
  // Parameter gradients are overwritten; returns gradients w.r.t. each input.
  std::vector<Tensor<Scalar>> backward(const Tensor<Scalar>& grad_logits) {
    if (!has_forward_) fail(ErrorCode::InvalidMode, "backward without a forward pass");
    if (last_mode_ != Mode::train) fail(ErrorCode::InvalidMode, "backward after an inference-mode forward pass");
    has_forward_ = false;
    Tensor<Scalar> grad = tail_->backward(grad_logits);
    std::vector<Tensor<Scalar>> input_grads;
    Index begin = 0;
    for (std::size_t i = 0; i < pipelines_.size(); ++i) {
      input_grads.push_back(pipelines_[i]->backward(slice(grad, 1, begin, widths_[i])));
      begin += widths_[i];
    }
    return input_grads;
  }

  ParameterStore<Scalar> snapshot() const {
    ParameterStore<Scalar> store;
    store.reserve(params_.size());
    for (const auto& p : params_) store.push_back({p.name, *p.value});
    return store;
  }

  void restore(const ParameterStore<Scalar>& store) {
    if (store.size() != params_.size())
      fail(ErrorCode::ShapeMismatch, "parameter store holds " + std::to_string(store.size()) + " tensors, network " +
                                         std::to_string(params_.size()));
    for (std::size_t i = 0; i < params_.size(); ++i) {
      if (store[i].name != params_[i].name || store[i].tensor.shape() != params_[i].value->shape())
        fail(ErrorCode::ShapeMismatch, "parameter " + store[i].name + " does not match " + params_[i].name);
    }
    for (std::size_t i = 0; i < params_.size(); ++i) *params_[i].value = store[i].tensor;
  }

 private:
  using Seq = nn::SequenceLayer<Scalar>;

  static void conv_unit(Seq& seq, const std::string& name, Index c_in, Index c_out, Index kernel) {
    seq.add(std::make_unique<nn::ConvLayer<Scalar>>(name + ".conv", c_in, c_out, kernel));
    seq.add(std::make_unique<nn::BatchNormLayer<Scalar>>(name + ".bn", c_out));
    seq.add(std::make_unique<nn::ReluLayer<Scalar>>());
  }

  static Shape pooled(const Shape& in, Index pool, Index stride) {
    Shape out{in[0]};
    for (int a = 1; a <= 3; ++a) out.push_back(window_geometry(in[a], pool, stride, Padding::same).out);
    return out;
  }

  static Shape append(Seq& seq, const std::string& name, const Shape& in, const BlockSpec& block) {
    if (const auto* c = std::get_if<ConvBlock>(&block)) {
      conv_unit(seq, name, in[0], c->filters, c->kernel);
      return {c->filters, in[1], in[2], in[3]};
    }
    if (const auto* c = std::get_if<InceptionBlock>(&block)) {
      std::vector<std::unique_ptr<Seq>> bands;
      for (int b = 0; b < 4; ++b) bands.push_back(std::make_unique<Seq>());
      conv_unit(*bands[0], name + ".band1.reduce", in[0], c->bottleneck, 1);
      conv_unit(*bands[0], name + ".band1.conv_a", c->bottleneck, c->bands[0], 3);
      conv_unit(*bands[0], name + ".band1.conv_b", c->bands[0], c->bands[0], 3);
      conv_unit(*bands[1], name + ".band2.reduce", in[0], c->bottleneck, 1);
      conv_unit(*bands[1], name + ".band2.conv", c->bottleneck, c->bands[1], 3);
      bands[2]->add(std::make_unique<nn::MaxPoolLayer<Scalar>>(3, 1));
      conv_unit(*bands[2], name + ".band3.proj", in[0], c->bands[2], 1);
      conv_unit(*bands[3], name + ".band4.proj", in[0], c->bands[3], 1);
      seq.add(std::make_unique<nn::InceptionLayer<Scalar>>(std::move(bands)));
      return {c->out_channels(), in[1], in[2], in[3]};
    }
    if (const auto* c = std::get_if<MaxPool>(&block)) {
      seq.add(std::make_unique<nn::MaxPoolLayer<Scalar>>(c->pool, c->stride));
      return pooled(in, c->pool, c->stride);
    }
    if (std::holds_alternative<GlobalAvgPool>(block)) {
      seq.add(std::make_unique<nn::GlobalAvgPoolLayer<Scalar>>());
      return {in[0]};
    }
    if (std::holds_alternative<Flatten>(block)) {
      seq.add(std::make_unique<nn::FlattenLayer<Scalar>>());
      return {shape_size(in)};
    }
    if (const auto* c = std::get_if<Dropout>(&block)) {
      seq.add(std::make_unique<nn::DropoutLayer<Scalar>>(c->keep_prob));
      return in;
    }
    if (const auto* c = std::get_if<Dense>(&block)) {
      seq.add(std::make_unique<nn::DenseLayer<Scalar>>(name, in[0], c->units));
      return {c->units};
    }
    if (std::holds_alternative<Relu>(block)) {
      seq.add(std::make_unique<nn::ReluLayer<Scalar>>());
      return in;
    }
    fail(ErrorCode::InvalidConfig, "block " + block_kind(block) + " cannot be executed at " + name);
  }

  NetworkSpec spec_;
  std::vector<std::unique_ptr<Seq>> pipelines_;
  std::vector<Index> widths_;
  std::unique_ptr<Seq> tail_;
  std::vector<ParameterRef<Scalar>> params_;
  BatchNormOptions batchnorm_;
  Mode last_mode_ = Mode::infer;
  bool has_forward_ = false;
};

// Index of the largest entry per row; ties resolve to the lowest index.
template <typename Scalar>
std::vector<int> argmax_rows(const Tensor<Scalar>& probs) {
  const Index k = probs.shape().back();
  const Index n = probs.size() / k;
  std::vector<int> out(std::size_t(n), 0);
  for (Index i = 0; i < n; ++i) {
    int best = 0;
    for (Index j = 1; j < k; ++j)
      if (probs[i * k + j] > probs[i * k + best]) best = int(j);
    out[std::size_t(i)] = best;
  }
  return out;
}

}  // namespace volnet

#endif  // VOLNET_NETWORK_HPP
