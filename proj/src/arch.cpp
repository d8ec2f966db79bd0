#include "volnet/arch.hpp"

#include <algorithm>
#include <set>

#include "volnet/error.hpp"
#include "volnet/layers.hpp"

namespace volnet {

namespace {

template <class... Ts>
struct overloaded : Ts... {
  using Ts::operator()...;
};
template <class... Ts>
overloaded(Ts...) -> overloaded<Ts...>;

const std::vector<std::string> kAllRois{"smri_l", "smri_r", "dti_l", "dti_r"};

void check_inputs(const std::vector<std::string>& inputs) {
  const std::set<std::string> given(inputs.begin(), inputs.end());
  const std::set<std::string> smri{"smri_l", "smri_r"};
  const std::set<std::string> dti{"dti_l", "dti_r"};
  const std::set<std::string> all(kAllRois.begin(), kAllRois.end());
  if (given.size() != inputs.size() || (given != smri && given != dti && given != all))
    fail(ErrorCode::InvalidConfig,
         "pipeline inputs must be smri_l+smri_r, dti_l+dti_r or all four ROIs");
}

Index conv_params(Index c_in, Index c_out, Index kernel) { return c_out * c_in * kernel * kernel * kernel + c_out; }

// Shape propagation with per-layer parameter accounting.
struct Describer {
  std::vector<LayerInfo> layers;

  void add(std::string name, std::string kind, Shape shape, Index params = 0) {
    layers.push_back({std::move(name), std::move(kind), std::move(shape), params});
  }

  // conv + batch-norm + ReLU
  Shape conv_unit(const std::string& prefix, const Shape& in, int kernel, int filters) {
    const Shape out{filters, in[1], in[2], in[3]};
    add(prefix + ".conv", "conv3d", out, conv_params(in[0], filters, kernel));
    add(prefix + ".bn", "batchnorm3d", out, 2 * Index(filters));
    add(prefix + ".relu", "relu", out);
    return out;
  }

  Shape pool(const std::string& name, const Shape& in, int p, int q) {
    Shape out{in[0]};
    for (int a = 1; a <= 3; ++a) out.push_back(window_geometry(in[a], p, q, Padding::same).out);
    add(name, "maxpool3d", out);
    return out;
  }

  Shape block(const std::string& prefix, const Shape& in, const BlockSpec& b) {
    return std::visit(
        overloaded{
            [&](const ConvBlock& c) { return conv_unit(prefix, in, c.kernel, c.filters); },
            [&](const InceptionBlock& c) {
              if (in[0] != c.in_channels)
                fail(ErrorCode::ShapeMismatch, prefix + " expects " + std::to_string(c.in_channels) + " channels");
              Shape s = conv_unit(prefix + ".band1.reduce", in, 1, c.bottleneck);
              s = conv_unit(prefix + ".band1.conv_a", s, 3, c.bands[0]);
              conv_unit(prefix + ".band1.conv_b", s, 3, c.bands[0]);
              s = conv_unit(prefix + ".band2.reduce", in, 1, c.bottleneck);
              conv_unit(prefix + ".band2.conv", s, 3, c.bands[1]);
              s = pool(prefix + ".band3.pool", in, 3, 1);
              conv_unit(prefix + ".band3.proj", s, 1, c.bands[2]);
              conv_unit(prefix + ".band4.proj", in, 1, c.bands[3]);
              const Shape out{c.out_channels(), in[1], in[2], in[3]};
              add(prefix + ".concat", "concat", out);
              return out;
            },
            [&](const MaxPool& c) { return pool(prefix, in, c.pool, c.stride); },
            [&](const GlobalAvgPool&) {
              const Shape out{in[0]};
              add(prefix, "global_avgpool", out);
              return out;
            },
            [&](const Flatten&) {
              const Shape out{shape_size(in)};
              add(prefix, "flatten", out);
              return out;
            },
            [&](const Dropout&) {
              add(prefix, "dropout", in);
              return in;
            },
            [&](const Dense& c) {
              if (in.size() != 1) fail(ErrorCode::InvalidConfig, prefix + ": dense needs a vector input");
              const Shape out{c.units};
              add(prefix, "dense", out, Index(c.units) * in[0] + c.units);
              return out;
            },
            [&](const Relu&) {
              add(prefix, "relu", in);
              return in;
            },
            [&](const Softmax&) {
              add(prefix, "softmax", in);
              return in;
            },
            [&](const Concat&) -> Shape { fail(ErrorCode::InvalidConfig, "concat is only valid at the fusion tail"); },
        },
        b);
  }
};

bool same_blocks(const std::vector<BlockSpec>& a, const std::vector<BlockSpec>& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i].index() != b[i].index()) return false;
    const bool equal = std::visit(
        overloaded{
            [&](const ConvBlock& x) {
              const auto& y = std::get<ConvBlock>(b[i]);
              return x.kernel == y.kernel && x.filters == y.filters;
            },
            [&](const InceptionBlock& x) {
              const auto& y = std::get<InceptionBlock>(b[i]);
              return x.in_channels == y.in_channels && x.bottleneck == y.bottleneck && x.bands == y.bands;
            },
            [&](const MaxPool& x) {
              const auto& y = std::get<MaxPool>(b[i]);
              return x.pool == y.pool && x.stride == y.stride;
            },
            [&](const Dropout& x) { return x.keep_prob == std::get<Dropout>(b[i]).keep_prob; },
            [&](const Dense& x) { return x.units == std::get<Dense>(b[i]).units; },
            [](const auto&) { return true; },
        },
        a[i]);
    if (!equal) return false;
  }
  return true;
}

}  // namespace

std::string block_kind(const BlockSpec& block) {
  static const char* names[] = {"conv_block", "inception_block", "maxpool", "global_avgpool", "flatten",
                                "concat",     "dropout",         "dense",   "relu",           "softmax"};
  return names[block.index()];
}

ChannelPlan channel_rule(int n) {
  if (n < 4) fail(ErrorCode::InvalidConfig, "inception block needs at least 4 input channels");
  ChannelPlan plan;
  plan.total = (3 * n + 1) / 2;  // round(1.5 n), halves rounded up
  const int base = plan.total / 4;
  plan.bands = {base, base, base, base};
  const int order[] = {1, 0, 2};
  for (int r = 0; r < plan.total - 4 * base; ++r) ++plan.bands[std::size_t(order[r])];
  return plan;
}

int bottleneck_width(int n) { return std::max(4, n / 2); }

ConvBlock build_conv_block(int kernel, int filters) {
  if (kernel < 1 || kernel % 2 == 0) fail(ErrorCode::InvalidConfig, "conv block kernel must be odd");
  if (filters < 1) fail(ErrorCode::InvalidConfig, "conv block needs at least one filter");
  return {kernel, filters};
}

InceptionBlock build_inception_block(int in_channels) {
  const ChannelPlan plan = channel_rule(in_channels);
  return {in_channels, bottleneck_width(in_channels), plan.bands};
}

std::vector<BlockSpec> build_pipeline(const Shape& input_shape, int f0) {
  if (input_shape.size() != 4 || input_shape[0] < 1)
    fail(ErrorCode::InvalidConfig, "pipeline input must be [C, D, H, W]");
  if (input_shape[1] != input_shape[2] || input_shape[2] != input_shape[3])
    fail(ErrorCode::InvalidConfig, "pipeline input must be cubic");
  if (input_shape[1] < (Index{1} << kPipelineStages))
    fail(ErrorCode::InvalidConfig, "input extent " + std::to_string(input_shape[1]) + " too small for " +
                                       std::to_string(kPipelineStages) + " halvings");
  if (f0 < 4) fail(ErrorCode::InvalidConfig, "f0 must be at least 4");
  std::vector<BlockSpec> blocks{build_conv_block(3, f0)};
  int channels = f0;
  for (int stage = 0; stage < kPipelineStages; ++stage) {
    const InceptionBlock inception = build_inception_block(channels);
    channels = inception.out_channels();
    blocks.emplace_back(inception);
    blocks.emplace_back(MaxPool{3, 2});
  }
  blocks.emplace_back(GlobalAvgPool{});
  return blocks;
}

NetworkSpec build_fusion_network(const std::vector<std::string>& inputs, int f0, int classes, double keep_prob,
                                 const Shape& input_shape) {
  check_inputs(inputs);
  if (classes < 2) fail(ErrorCode::InvalidConfig, "at least two classes required");
  if (!(keep_prob > 0.0 && keep_prob <= 1.0)) fail(ErrorCode::InvalidConfig, "keep probability must lie in (0, 1]");
  NetworkSpec spec;
  spec.name = "proposed";
  spec.classes = classes;
  const std::vector<BlockSpec> blocks = build_pipeline(input_shape, f0);
  for (const auto& input : inputs) spec.pipelines.push_back({input, input_shape, blocks});
  spec.tail = {Concat{}, Dropout{keep_prob}, Dense{classes}, Softmax{}};
  validate(spec);
  return spec;
}

NetworkSpec build_alexnet_baseline(const std::vector<std::string>& inputs, int g0, int classes, double keep_prob,
                                   int hidden, int conv_blocks, const Shape& input_shape) {
  check_inputs(inputs);
  if (conv_blocks != kPipelineStages)
    fail(ErrorCode::InvalidConfig, "baseline must have exactly " + std::to_string(kPipelineStages) + " conv blocks");
  if (g0 < 1 || hidden < 1) fail(ErrorCode::InvalidConfig, "baseline widths must be positive");
  if (classes < 2) fail(ErrorCode::InvalidConfig, "at least two classes required");
  if (!(keep_prob > 0.0 && keep_prob <= 1.0)) fail(ErrorCode::InvalidConfig, "keep probability must lie in (0, 1]");
  if (input_shape.size() != 4 || input_shape[1] < (Index{1} << kPipelineStages))
    fail(ErrorCode::InvalidConfig, "baseline input too small for " + std::to_string(kPipelineStages) + " halvings");
  NetworkSpec spec;
  spec.name = "alexnet";
  spec.classes = classes;
  std::vector<BlockSpec> blocks;
  for (int stage = 0; stage < conv_blocks; ++stage) {
    blocks.emplace_back(build_conv_block(3, g0 << stage));
    blocks.emplace_back(MaxPool{3, 2});
  }
  blocks.emplace_back(Flatten{});
  for (const auto& input : inputs) spec.pipelines.push_back({input, input_shape, blocks});
  spec.tail = {Concat{}, Dropout{keep_prob}, Dense{hidden}, Relu{}, Dense{classes}, Softmax{}};
  validate(spec);
  return spec;
}

void validate(const NetworkSpec& spec) {
  if (spec.pipelines.empty()) fail(ErrorCode::InvalidConfig, "network has no pipelines");
  if (spec.classes < 2) fail(ErrorCode::InvalidConfig, "at least two classes required");
  std::set<std::string> names;
  for (const auto& p : spec.pipelines) {
    if (!names.insert(p.input).second) fail(ErrorCode::InvalidConfig, "duplicate pipeline input " + p.input);
    if (p.blocks.empty()) fail(ErrorCode::InvalidConfig, "empty pipeline " + p.input);
    if (!std::holds_alternative<GlobalAvgPool>(p.blocks.back()) && !std::holds_alternative<Flatten>(p.blocks.back()))
      fail(ErrorCode::InvalidConfig, "pipeline " + p.input + " must end in global average pooling or flatten");
    for (const auto& b : p.blocks)
      if (std::holds_alternative<Concat>(b) || std::holds_alternative<Softmax>(b))
        fail(ErrorCode::InvalidConfig, "concat/softmax are only valid in the fusion tail");
    if (!same_blocks(p.blocks, spec.pipelines.front().blocks) || p.input_shape != spec.pipelines.front().input_shape)
      fail(ErrorCode::InvalidConfig, "pipelines must be structurally identical");
  }
  const auto& tail = spec.tail;
  if (tail.size() < 3 || !std::holds_alternative<Concat>(tail.front()) ||
      !std::holds_alternative<Softmax>(tail.back()) || !std::holds_alternative<Dense>(tail[tail.size() - 2]) ||
      std::get<Dense>(tail[tail.size() - 2]).units != spec.classes)
    fail(ErrorCode::InvalidConfig, "fusion tail must be concat ... dense(K) -> softmax");
  for (std::size_t i = 1; i + 1 < tail.size(); ++i)
    if (!std::holds_alternative<Dropout>(tail[i]) && !std::holds_alternative<Dense>(tail[i]) &&
        !std::holds_alternative<Relu>(tail[i]))
      fail(ErrorCode::InvalidConfig, "fusion tail may hold only dropout, dense and relu layers");
  describe(spec);  // shape propagation throws on inconsistent channels
}

std::vector<LayerInfo> describe(const NetworkSpec& spec) {
  Describer d;
  Index fused = 0;
  for (const auto& p : spec.pipelines) {
    check_shape(p.input_shape);
    if (p.input_shape.size() != 4) fail(ErrorCode::InvalidConfig, "pipeline input must be [C, D, H, W]");
    d.add(p.input + ".input", "input", p.input_shape);
    Shape shape = p.input_shape;
    for (std::size_t i = 0; i < p.blocks.size(); ++i)
      shape = d.block(p.input + ".block" + std::to_string(i), shape, p.blocks[i]);
    if (shape.size() != 1) fail(ErrorCode::InvalidConfig, "pipeline " + p.input + " does not end in a vector");
    fused += shape[0];
  }
  Shape shape{fused};
  for (std::size_t i = 0; i < spec.tail.size(); ++i) {
    const std::string name = "fusion." + std::to_string(i) + "." + block_kind(spec.tail[i]);
    if (std::holds_alternative<Concat>(spec.tail[i])) {
      d.add(name, "concat", shape);
    } else {
      shape = d.block(name, shape, spec.tail[i]);
    }
  }
  return std::move(d.layers);
}

ParamReport count_parameters(const NetworkSpec& spec) {
  ParamReport report;
  for (const auto& layer : describe(spec)) {
    report.per_layer.emplace_back(layer.name, layer.params);
    report.total += layer.params;
  }
  return report;
}

nlohmann::json architecture_json(const NetworkSpec& spec) {
  nlohmann::json layers = nlohmann::json::array();
  Index total = 0;
  for (const auto& layer : describe(spec)) {
    layers.push_back({{"name", layer.name}, {"kind", layer.kind}, {"shape", layer.output_shape},
                      {"params", layer.params}});
    total += layer.params;
  }
  std::vector<std::string> inputs;
  for (const auto& p : spec.pipelines) inputs.push_back(p.input);
  return {{"network", spec.name}, {"classes", spec.classes}, {"inputs", inputs},
          {"layers", layers},     {"total_params", total}};
}

const std::vector<std::string>& preset_names() {
  static const std::vector<std::string> names{"proposed-4roi",     "proposed-2roi-smri", "proposed-2roi-dti",
                                              "alexnet-4roi",      "alexnet-2roi-smri",  "alexnet-2roi-dti"};
  return names;
}

std::vector<std::string> preset_inputs(const std::string& preset) {
  if (preset.ends_with("-4roi")) return kAllRois;
  if (preset.ends_with("-2roi-smri")) return {"smri_l", "smri_r"};
  if (preset.ends_with("-2roi-dti")) return {"dti_l", "dti_r"};
  fail(ErrorCode::InvalidConfig, "unknown preset '" + preset + "'");
}

NetworkSpec make_preset(const std::string& preset, const PresetOptions& options) {
  if (std::find(preset_names().begin(), preset_names().end(), preset) == preset_names().end())
    fail(ErrorCode::InvalidConfig, "unknown preset '" + preset + "'");
  const auto inputs = preset_inputs(preset);
  NetworkSpec spec =
      preset.starts_with("proposed")
          ? build_fusion_network(inputs, options.width, options.classes, options.keep_prob)
          : build_alexnet_baseline(inputs, options.width, options.classes, options.keep_prob, options.hidden);
  spec.name = preset;
  return spec;
}

}  // namespace volnet
