#include "volnet/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

#include "volnet/error.hpp"

namespace volnet {

ConfusionMatrix confusion(std::span<const int> predictions, std::span<const int> labels, int classes,
                          std::vector<std::string> names) {
  if (classes < 1) fail(ErrorCode::InvalidConfig, "confusion needs at least one class");
  if (predictions.size() != labels.size())
    fail(ErrorCode::ShapeMismatch, "predictions and labels differ in length");
  if (!names.empty() && int(names.size()) != classes) fail(ErrorCode::InvalidConfig, "class name count mismatch");
  ConfusionMatrix cm;
  cm.counts.setZero(classes, classes);
  cm.classes = std::move(names);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || labels[i] >= classes || predictions[i] < 0 || predictions[i] >= classes)
      fail(ErrorCode::InvalidLabel, "class index out of range at sample " + std::to_string(i));
    ++cm.counts(labels[i], predictions[i]);
  }
  return cm;
}

Metrics metrics(const ConfusionMatrix& cm, int positive_class) {
  const Index k = cm.counts.rows();
  if (positive_class < 0 || positive_class >= k) fail(ErrorCode::InvalidLabel, "positive class out of range");
  Metrics m;
  const Index total = cm.total();
  if (total == 0) fail(ErrorCode::InsufficientSubjects, "empty confusion matrix");
  m.accuracy = double(cm.counts.trace()) / double(total);
  if (k == 2) {
    const int p = positive_class, q = 1 - positive_class;
    const Index tp = cm.counts(p, p), fn = cm.counts(p, q), tn = cm.counts(q, q), fp = cm.counts(q, p);
    if (tp + fn > 0) m.sensitivity = double(tp) / double(tp + fn);
    if (tn + fp > 0) m.specificity = double(tn) / double(tn + fp);
  }
  return m;
}

double balanced_accuracy(const ConfusionMatrix& cm) {
  double sum = 0.0;
  Index present = 0;
  for (Index r = 0; r < cm.counts.rows(); ++r) {
    const Index row = cm.counts.row(r).sum();
    if (row == 0) continue;
    sum += double(cm.counts(r, r)) / double(row);
    ++present;
  }
  if (present == 0) fail(ErrorCode::InsufficientSubjects, "empty confusion matrix");
  return sum / double(present);
}

namespace {

void check_interval_args(double value, Index n, double theta) {
  if (n < 1) fail(ErrorCode::InvalidSampleCount, "sample count must be at least 1");
  if (!(value >= 0.0 && value <= 1.0)) fail(ErrorCode::InvalidConfig, "value must lie in [0, 1]");
  if (!(theta > 0.0) || !std::isfinite(theta)) fail(ErrorCode::InvalidConfig, "theta must be positive");
}

}  // namespace

double confidence_interval(double value, Index n, double theta) {
  check_interval_args(value, n, theta);
  return theta * std::sqrt(value * (1.0 - value) / double(n));
}

Interval wilson_interval(double value, Index n, double theta) {
  check_interval_args(value, n, theta);
  const double nn = double(n), z2 = theta * theta;
  const double denom = 1.0 + z2 / nn;
  const double center = (value + z2 / (2.0 * nn)) / denom;
  const double half = theta * std::sqrt(value * (1.0 - value) / nn + z2 / (4.0 * nn * nn)) / denom;
  return {center - half, center + half};
}

MetricWithCI with_ci(std::optional<double> value, Index n, double theta) {
  MetricWithCI m;
  m.value = value;
  m.n = n;
  m.theta = theta;
  if (value) m.half_width = confidence_interval(*value, n, theta);
  return m;
}

Predictions predict(Network<float>& net, VolumeCache& cache, const std::vector<std::string>& ids,
                    const std::vector<Label>& labels, Index chunk) {
  if (ids.empty()) fail(ErrorCode::InsufficientSubjects, "cannot evaluate an empty subset");
  if (chunk < 1) fail(ErrorCode::InvalidConfig, "chunk must be positive");
  const Index k = Index(labels.size());
  std::vector<std::string> columns;
  for (const auto& p : net.spec().pipelines) columns.push_back(p.input);

  Predictions out;
  out.probabilities = TensorF({Index(ids.size()), k});
  double loss = 0.0;
  Index correct = 0;
  for (std::size_t begin = 0; begin < ids.size(); begin += std::size_t(chunk)) {
    const std::size_t end = std::min(ids.size(), begin + std::size_t(chunk));
    const std::vector<std::string> part(ids.begin() + std::ptrdiff_t(begin), ids.begin() + std::ptrdiff_t(end));
    const Batch batch = fixed_batch(part, cache, columns, labels);
    const TensorF probs = net.forward(batch.inputs, Mode::infer);
    if (probs.dim(1) != k) fail(ErrorCode::ShapeMismatch, "network class count differs from the task");
    const auto pred = argmax_rows(probs);
    for (std::size_t i = 0; i < part.size(); ++i) {
      const Index row = Index(begin + i);
      for (Index c = 0; c < k; ++c) out.probabilities.at({row, c}) = probs.at({Index(i), c});
      const int label = batch.labels[i];
      const double p = std::max(double(probs.at({Index(i), Index(label)})), kProbabilityFloor);
      loss -= std::log(p);
      out.labels.push_back(label);
      out.predicted.push_back(int(pred[i]));
      correct += pred[i] == label;
    }
  }
  out.loss = loss / double(ids.size());
  out.accuracy = double(correct) / double(ids.size());
  return out;
}

EvalReport make_report(const Predictions& predictions, Task task, const std::string& preset,
                       const std::string& subset, double theta) {
  const auto labels = task_labels(task);
  std::vector<std::string> names;
  for (Label l : labels) names.emplace_back(to_string(l));
  EvalReport r;
  r.task = task;
  r.preset = preset;
  r.subset = subset;
  r.n = Index(predictions.labels.size());
  r.loss = predictions.loss;
  r.confusion = confusion(predictions.predicted, predictions.labels, int(labels.size()), names);
  const Metrics m = metrics(r.confusion, 0);
  r.accuracy = with_ci(m.accuracy, r.n, theta);
  if (labels.size() == 2) {
    r.sensitivity = with_ci(m.sensitivity, r.n, theta);
    r.specificity = with_ci(m.specificity, r.n, theta);
  }
  return r;
}

EvalReport evaluate(Network<float>& net, VolumeCache& cache, const std::vector<std::string>& ids, Task task,
                    const std::string& subset, double theta) {
  return make_report(predict(net, cache, ids, task_labels(task)), task, net.spec().name, subset, theta);
}

namespace {

nlohmann::json metric_json(const MetricWithCI& m) {
  nlohmann::json j;
  j["value"] = m.value ? nlohmann::json(*m.value) : nlohmann::json(nullptr);
  j["ci"] = m.half_width ? nlohmann::json(*m.half_width) : nlohmann::json(nullptr);
  return j;
}

std::string fixed3(std::optional<double> v) {
  if (!v) return "undefined";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3f", *v);
  return buf;
}

}  // namespace

nlohmann::json report_to_json(const EvalReport& r) {
  nlohmann::json confusion = nlohmann::json::array();
  for (Index i = 0; i < r.confusion.counts.rows(); ++i) {
    nlohmann::json row = nlohmann::json::array();
    for (Index j = 0; j < r.confusion.counts.cols(); ++j) row.push_back(r.confusion.counts(i, j));
    confusion.push_back(row);
  }
  nlohmann::json m{{"accuracy", metric_json(r.accuracy)}};
  if (r.sensitivity) m["sensitivity"] = metric_json(*r.sensitivity);
  if (r.specificity) m["specificity"] = metric_json(*r.specificity);
  return {{"task", std::string(to_string(r.task))},
          {"preset", r.preset},
          {"subset", r.subset},
          {"n", r.n},
          {"classes", r.confusion.classes},
          {"loss", r.loss},
          {"theta", r.accuracy.theta},
          {"confusion", confusion},
          {"metrics", m}};
}

std::string summary_line(const EvalReport& r) {
  auto part = [](const char* name, const MetricWithCI& m) {
    return std::string(name) + " " + fixed3(m.value) + (m.half_width ? " ±" + fixed3(m.half_width) : "");
  };
  std::string line = std::string(to_string(r.task)) + " " + r.preset + " " + r.subset + " n=" + std::to_string(r.n) +
                     " | " + part("accuracy", r.accuracy);
  if (r.sensitivity) line += " | " + part("sensitivity", *r.sensitivity);
  if (r.specificity) line += " | " + part("specificity", *r.specificity);
  return line;
}

std::string summary_csv_header() {
  return "task,preset,subset,n,loss,accuracy,accuracy_ci,sensitivity,sensitivity_ci,specificity,specificity_ci";
}

std::string summary_csv_row(const EvalReport& r) {
  auto num = [](std::optional<double> v) {
    if (!v) return std::string();
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", *v);
    return std::string(buf);
  };
  auto metric = [&](const std::optional<MetricWithCI>& m) {
    return m ? num(m->value) + "," + num(m->half_width) : std::string(",");
  };
  return std::string(to_string(r.task)) + "," + r.preset + "," + r.subset + "," + std::to_string(r.n) + "," +
         num(r.loss) + "," + metric(r.accuracy) + "," + metric(r.sensitivity) + "," + metric(r.specificity);
}

}  // namespace volnet
