#ifndef VOLNET_EVAL_HPP
#define VOLNET_EVAL_HPP

#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "json.hpp"
#include "volnet/data.hpp"
#include "volnet/network.hpp"

namespace volnet {

// Rows are true classes, columns predicted classes.
struct ConfusionMatrix {
  Eigen::Matrix<Index, Eigen::Dynamic, Eigen::Dynamic> counts;
  std::vector<std::string> classes;

  Index total() const { return counts.sum(); }
};

ConfusionMatrix confusion(std::span<const int> predictions, std::span<const int> labels, int classes,
                          std::vector<std::string> names = {});

// Undefined (zero denominator) metrics are empty rather than 0.
struct Metrics {
  double accuracy = 0.0;
  std::optional<double> sensitivity;
  std::optional<double> specificity;
};

// Sensitivity and specificity are only computed for 2x2 matrices.
Metrics metrics(const ConfusionMatrix& cm, int positive_class = 0);
double balanced_accuracy(const ConfusionMatrix& cm);

inline constexpr double kDefaultTheta = 1.96;

// Normal-approximation half width theta * sqrt(v (1 - v) / n).
double confidence_interval(double value, Index n, double theta = kDefaultTheta);

struct Interval {
  double lower = 0.0;
  double upper = 0.0;
};

// Wilson score interval, for comparison with the normal approximation.
Interval wilson_interval(double value, Index n, double theta = kDefaultTheta);

struct MetricWithCI {
  std::optional<double> value;
  std::optional<double> half_width;
  Index n = 0;
  double theta = kDefaultTheta;
};

MetricWithCI with_ci(std::optional<double> value, Index n, double theta = kDefaultTheta);

struct Predictions {
  TensorF probabilities;  // [N,K]
  std::vector<int> labels;
  std::vector<int> predicted;
  double loss = 0.0;  // mean cross-entropy
  double accuracy = 0.0;
};

// Infer-mode forward over center crops, `chunk` subjects at a time.
Predictions predict(Network<float>& net, VolumeCache& cache, const std::vector<std::string>& ids,
                    const std::vector<Label>& labels, Index chunk = 16);

struct EvalReport {
  Task task = Task::AD_NC;
  std::string preset;
  std::string subset;
  Index n = 0;
  double loss = 0.0;
  ConfusionMatrix confusion;
  MetricWithCI accuracy;
  std::optional<MetricWithCI> sensitivity;  // binary tasks only
  std::optional<MetricWithCI> specificity;
};

EvalReport make_report(const Predictions& predictions, Task task, const std::string& preset,
                       const std::string& subset, double theta = kDefaultTheta);
EvalReport evaluate(Network<float>& net, VolumeCache& cache, const std::vector<std::string>& ids, Task task,
                    const std::string& subset = "test", double theta = kDefaultTheta);

nlohmann::json report_to_json(const EvalReport& report);
// "accuracy 0.933 ±0.089 | sensitivity ... | specificity ..." with 3 decimals.
std::string summary_line(const EvalReport& report);
std::string summary_csv_header();
std::string summary_csv_row(const EvalReport& report);

}  // namespace volnet

#endif
