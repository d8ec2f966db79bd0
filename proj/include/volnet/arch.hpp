#ifndef VOLNET_ARCH_HPP
#define VOLNET_ARCH_HPP

#include <array>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include "json.hpp"
#include "volnet/tensor.hpp"

namespace volnet {

// Building blocks. Every convolution inside a ConvBlock or an InceptionBlock
// is followed by batch-norm and ReLU; every pooling uses 'same' padding.
struct ConvBlock {
  int kernel = 3;
  int filters = 1;
};

struct InceptionBlock {
  int in_channels = 4;
  int bottleneck = 4;               // width of the leading 1x1x1 convs in bands 1-3
  std::array<int, 4> bands{};       // output widths of the four bands
  int out_channels() const { return bands[0] + bands[1] + bands[2] + bands[3]; }
};

struct MaxPool {
  int pool = 3;
  int stride = 2;
};

struct GlobalAvgPool {};
struct Flatten {};
struct Concat {};
struct Dropout {
  double keep_prob = 0.5;
};
struct Dense {
  int units = 2;
};
struct Relu {};
struct Softmax {};

using BlockSpec =
    std::variant<ConvBlock, InceptionBlock, MaxPool, GlobalAvgPool, Flatten, Concat, Dropout, Dense, Relu, Softmax>;

std::string block_kind(const BlockSpec& block);

struct Pipeline {
  std::string input;   // ROI name, e.g. "smri_l"
  Shape input_shape;   // [C, D, H, W]
  std::vector<BlockSpec> blocks;
};

struct NetworkSpec {
  std::string name;
  std::vector<Pipeline> pipelines;
  std::vector<BlockSpec> tail;   // starts with Concat, ends with Dense(K), Softmax
  int classes = 2;
};

// Inception widths for an n-channel input: round(1.5 n) outputs split into
// four near-equal bands, the remainder going to band 2, then 1, then 3.
struct ChannelPlan {
  int total = 0;
  std::array<int, 4> bands{};
};

ChannelPlan channel_rule(int n);
int bottleneck_width(int n);

inline const Shape kRoiShape{1, 29, 29, 29};
inline constexpr int kPipelineStages = 4;

ConvBlock build_conv_block(int kernel, int filters);
InceptionBlock build_inception_block(int in_channels);
std::vector<BlockSpec> build_pipeline(const Shape& input_shape, int f0);
NetworkSpec build_fusion_network(const std::vector<std::string>& inputs, int f0, int classes, double keep_prob,
                                 const Shape& input_shape = kRoiShape);
NetworkSpec build_alexnet_baseline(const std::vector<std::string>& inputs, int g0, int classes, double keep_prob,
                                   int hidden = 64, int conv_blocks = kPipelineStages,
                                   const Shape& input_shape = kRoiShape);

// Structural checks shared by the builders and the executor.
void validate(const NetworkSpec& spec);

// One primitive layer after expanding blocks; shapes are per sample.
struct LayerInfo {
  std::string name;
  std::string kind;
  Shape output_shape;
  Index params = 0;
};

std::vector<LayerInfo> describe(const NetworkSpec& spec);

struct ParamReport {
  std::vector<std::pair<std::string, Index>> per_layer;
  Index total = 0;
};

ParamReport count_parameters(const NetworkSpec& spec);

nlohmann::json architecture_json(const NetworkSpec& spec);

// Named configurations exposed on the command line.
struct PresetOptions {
  int width = 8;         // f0 for proposed presets, g0 for baselines
  int hidden = 64;       // baseline hidden dense width
  double keep_prob = 0.5;
  int classes = 2;
};

const std::vector<std::string>& preset_names();
std::vector<std::string> preset_inputs(const std::string& preset);
NetworkSpec make_preset(const std::string& preset, const PresetOptions& options = {});

}  // namespace volnet

#endif  // VOLNET_ARCH_HPP
