#include "volnet/train.hpp"

#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <set>
#include <sstream>

#include "volnet/arch.hpp"
#include "volnet/error.hpp"

namespace volnet {

namespace fs = std::filesystem;

// ---------------------------------------------------------------- config

void validate(const TrainConfig& c) {
  auto require = [](bool ok, const char* what) {
    if (!ok) fail(ErrorCode::InvalidConfig, what);
  };
  require(c.tau >= 1, "tau must be >= 1");
  require(c.eta >= 1, "eta must be >= 1");
  require(c.eta0 >= 1, "eta0 must be >= 1");
  require(c.lr0 >= 0.0 && std::isfinite(c.lr0), "lr0 must be finite and >= 0");
  require(c.max_epochs >= 0, "max_epochs must be >= 0");
  require(c.plateau_factor > 0.0 && c.plateau_factor < 1.0, "plateau_factor must lie in (0, 1)");
  require(c.patience >= 1, "patience must be >= 1");
  require(c.min_delta >= 0.0 && std::isfinite(c.min_delta), "min_delta must be >= 0");
  require(c.lr_min >= 0.0 && std::isfinite(c.lr_min), "lr_min must be >= 0");
  require(c.rho >= 0.0 && c.rho < 1.0, "rho must lie in [0, 1)");
  require(c.epsilon > 0.0, "epsilon must be positive");
  require(c.keep_prob > 0.0 && c.keep_prob <= 1.0, "keep_prob must lie in (0, 1]");
  require(c.width >= 4, "width must be >= 4");
  require(c.hidden >= 1, "hidden must be >= 1");
  const auto& names = preset_names();
  require(std::find(names.begin(), names.end(), c.preset) != names.end(), "unknown preset");
}

nlohmann::json config_to_json(const TrainConfig& c) {
  return {{"task", std::string(to_string(c.task))},
          {"preset", c.preset},
          {"width", c.width},
          {"hidden", c.hidden},
          {"keep_prob", c.keep_prob},
          {"tau", c.tau},
          {"eta", c.eta},
          {"eta0", c.eta0},
          {"lr0", c.lr0},
          {"max_epochs", c.max_epochs},
          {"plateau_factor", c.plateau_factor},
          {"patience", c.patience},
          {"min_delta", c.min_delta},
          {"lr_min", c.lr_min},
          {"rho", c.rho},
          {"epsilon", c.epsilon},
          {"plateau_monitor", c.monitor == PlateauMonitor::validation ? "validation" : "test"},
          {"seed", c.seed}};
}

TrainConfig config_from_json(const nlohmann::json& doc) {
  if (!doc.is_object()) fail(ErrorCode::InvalidConfig, "configuration must be a JSON object");
  TrainConfig c;
  const auto known = config_to_json(c);
  for (const auto& [key, value] : doc.items())
    if (!known.contains(key)) fail(ErrorCode::InvalidConfig, "unknown configuration key '" + key + "'");
  try {
    auto get = [&](const char* key, auto& field) {
      if (doc.contains(key)) field = doc.at(key).get<std::remove_reference_t<decltype(field)>>();
    };
    if (doc.contains("task")) c.task = parse_task(doc.at("task").get<std::string>());
    get("preset", c.preset);
    get("width", c.width);
    get("hidden", c.hidden);
    get("keep_prob", c.keep_prob);
    get("tau", c.tau);
    get("eta", c.eta);
    get("eta0", c.eta0);
    get("lr0", c.lr0);
    get("max_epochs", c.max_epochs);
    get("plateau_factor", c.plateau_factor);
    get("patience", c.patience);
    get("min_delta", c.min_delta);
    get("lr_min", c.lr_min);
    get("rho", c.rho);
    get("epsilon", c.epsilon);
    get("seed", c.seed);
    if (doc.contains("plateau_monitor")) {
      const auto m = doc.at("plateau_monitor").get<std::string>();
      if (m == "validation") c.monitor = PlateauMonitor::validation;
      else if (m == "test") c.monitor = PlateauMonitor::test;
      else fail(ErrorCode::InvalidConfig, "plateau_monitor must be 'validation' or 'test'");
    }
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::InvalidConfig, std::string("bad configuration value: ") + e.what());
  }
  validate(c);
  return c;
}

std::string config_digest(const TrainConfig& config) {
  auto doc = config_to_json(config);
  doc.erase("max_epochs");
  std::uint64_t h = 0xCBF29CE484222325ull;
  for (unsigned char ch : doc.dump()) h = (h ^ ch) * 0x100000001B3ull;
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

NetworkSpec network_for(const TrainConfig& config) {
  validate(config);
  return make_preset(config.preset,
                     {config.width, config.hidden, config.keep_prob, int(task_labels(config.task).size())});
}

// ---------------------------------------------------------------- optimizer

void xavier_init(Network<float>& net, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  for (const auto& p : net.parameters()) {
    TensorF& t = *p.value;
    switch (p.role) {
      case ParamRole::weight: {
        const double a = std::sqrt(6.0 / double(p.fan_in + p.fan_out));
        std::uniform_real_distribution<double> u(-a, a);
        for (Index i = 0; i < t.size(); ++i) {
          float w = float(u(rng));
          // Rounding to float must not land on the open bound.
          if (std::abs(double(w)) >= a) w = std::nextafter(w, 0.0f);
          t[i] = w;
        }
        break;
      }
      case ParamRole::gamma:
      case ParamRole::running_var: t.vec().setOnes(); break;
      default: t.set_zero();
    }
  }
}

double scale_lr(double lr0, Index eta0, Index eta) {
  if (!(lr0 >= 0.0) || eta0 < 1 || eta < 1) fail(ErrorCode::InvalidConfig, "scale_lr arguments must be positive");
  return lr0 * double(eta0) / double(eta);
}

OptimizerState make_optimizer_state(const Network<float>& net) {
  OptimizerState state;
  for (const auto& p : net.parameters())
    if (p.trainable()) state.mean_square.emplace_back(p.value->shape());
  return state;
}

void rmsprop_step(const std::vector<ParameterRef<float>>& params, OptimizerState& state, double lr, double rho,
                  double epsilon) {
  std::size_t k = 0;
  for (const auto& p : params) {
    if (!p.trainable()) continue;
    if (k >= state.mean_square.size() || state.mean_square[k].shape() != p.value->shape() ||
        p.grad->shape() != p.value->shape())
      fail(ErrorCode::ShapeMismatch, "optimizer state does not match parameter " + p.name);
    if (!all_finite(*p.grad)) fail(ErrorCode::NumericError, "non-finite gradient in " + p.name);
    ++k;
  }
  if (k != state.mean_square.size()) fail(ErrorCode::ShapeMismatch, "optimizer state has extra tensors");
  k = 0;
  for (const auto& p : params) {
    if (!p.trainable()) continue;
    TensorF& s = state.mean_square[k++];
    TensorF& theta = *p.value;
    const TensorF& g = *p.grad;
    for (Index i = 0; i < theta.size(); ++i) {
      const double gi = g[i];
      const double si = rho * double(s[i]) + (1.0 - rho) * gi * gi;
      s[i] = float(si);
      theta[i] = float(double(theta[i]) - lr * gi / (std::sqrt(si) + epsilon));
    }
  }
}

// ---------------------------------------------------------------- scheduler

PlateauScheduler::PlateauScheduler(double lr, double factor, int patience, double min_delta, double lr_min)
    : lr_(lr), factor_(factor), min_delta_(min_delta), lr_min_(lr_min), patience_(patience) {
  if (!(factor > 0.0 && factor < 1.0) || patience < 1 || min_delta < 0.0 || lr_min < 0.0 || !(lr >= 0.0))
    fail(ErrorCode::InvalidConfig, "bad plateau scheduler settings");
}

double PlateauScheduler::step(double loss) {
  if (!std::isfinite(loss)) fail(ErrorCode::NumericError, "monitored loss is not finite");
  if (best_ - loss >= min_delta_ || std::isinf(best_)) {
    best_ = loss;
    bad_epochs_ = 0;
  } else if (++bad_epochs_ >= patience_) {
    if (lr_ > lr_min_) lr_ = std::max(lr_ * factor_, lr_min_);
    bad_epochs_ = 0;
  }
  return lr_;
}

nlohmann::json PlateauScheduler::state() const {
  return {{"lr", lr_}, {"best", std::isinf(best_) ? nlohmann::json(nullptr) : nlohmann::json(best_)},
          {"bad_epochs", bad_epochs_}};
}

void PlateauScheduler::load_state(const nlohmann::json& state) {
  try {
    lr_ = state.at("lr").get<double>();
    best_ = state.at("best").is_null() ? std::numeric_limits<double>::infinity() : state.at("best").get<double>();
    bad_epochs_ = state.at("bad_epochs").get<int>();
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::FormatError, std::string("bad scheduler state: ") + e.what());
  }
}

// ---------------------------------------------------------------- history

namespace {

std::string number(double v) {
  if (std::isnan(v)) return "nan";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

nlohmann::json finite_or_null(double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr); }

double from_nullable(const nlohmann::json& v) { return v.is_null() ? std::nan("") : v.get<double>(); }

}  // namespace

std::string history_csv(const TrainHistory& history) {
  std::string out = "epoch,train_loss,train_acc,val_loss,val_acc,test_loss,test_acc,lr\n";
  for (const auto& e : history.epochs)
    out += std::to_string(e.epoch) + "," + number(e.train_loss) + "," + number(e.train_acc) + "," +
           number(e.val_loss) + "," + number(e.val_acc) + "," + number(e.test_loss) + "," + number(e.test_acc) + "," +
           number(e.lr) + "\n";
  return out;
}

nlohmann::json history_to_json(const TrainHistory& history) {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& e : history.epochs)
    rows.push_back({{"epoch", e.epoch},
                    {"train_loss", finite_or_null(e.train_loss)},
                    {"train_acc", finite_or_null(e.train_acc)},
                    {"val_loss", finite_or_null(e.val_loss)},
                    {"val_acc", finite_or_null(e.val_acc)},
                    {"test_loss", finite_or_null(e.test_loss)},
                    {"test_acc", finite_or_null(e.test_acc)},
                    {"lr", e.lr},
                    {"iterations", e.iterations}});
  return rows;
}

TrainHistory history_from_json(const nlohmann::json& doc) {
  TrainHistory h;
  try {
    for (const auto& row : doc) {
      EpochRecord e;
      e.epoch = row.at("epoch").get<int>();
      e.train_loss = from_nullable(row.at("train_loss"));
      e.train_acc = from_nullable(row.at("train_acc"));
      e.val_loss = from_nullable(row.at("val_loss"));
      e.val_acc = from_nullable(row.at("val_acc"));
      e.test_loss = from_nullable(row.at("test_loss"));
      e.test_acc = from_nullable(row.at("test_acc"));
      e.lr = row.at("lr").get<double>();
      e.iterations = row.at("iterations").get<Index>();
      h.epochs.push_back(e);
    }
  } catch (const nlohmann::json::exception& ex) {
    fail(ErrorCode::FormatError, std::string("bad history: ") + ex.what());
  }
  return h;
}

// ---------------------------------------------------------------- checkpoints

namespace {

constexpr std::string_view kCheckpointMagic = "VCKPT1\n";

template <typename T>
void put(std::string& out, T value) {
  unsigned char bytes[sizeof(T)];
  for (std::size_t i = 0; i < sizeof(T); ++i) bytes[i] = static_cast<unsigned char>(value >> (8 * i));
  out.append(reinterpret_cast<const char*>(bytes), sizeof(T));
}

template <typename T>
T take(std::string_view& in) {
  if (in.size() < sizeof(T)) fail(ErrorCode::FormatError, "truncated checkpoint");
  T value = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) value |= T(static_cast<unsigned char>(in[i])) << (8 * i);
  in.remove_prefix(sizeof(T));
  return value;
}

void put_tensor(std::string& out, const std::string& name, const TensorF& t) {
  const std::string blob = encode_volume(t);
  put<std::uint32_t>(out, std::uint32_t(name.size()));
  out += name;
  put<std::uint64_t>(out, std::uint64_t(blob.size()));
  out += blob;
}

}  // namespace

void save_checkpoint(const fs::path& path, const TrainConfig& config, const TrainState& state) {
  nlohmann::json meta{{"format", "volnet-checkpoint-1"},
                      {"preset", config.preset},
                      {"task", std::string(to_string(config.task))},
                      {"epoch", state.epoch},
                      {"config_digest", config_digest(config)},
                      {"config", config_to_json(config)},
                      {"scheduler", state.scheduler},
                      {"history", history_to_json(state.history)},
                      {"best_epoch", state.best_epoch},
                      {"best_loss", finite_or_null(state.best_loss)}};
  std::string out(kCheckpointMagic);
  out += meta.dump();
  out += '\0';
  std::size_t k = 0;
  for (const auto& p : state.params) put_tensor(out, "params/" + p.name, p.tensor);
  for (const auto& s : state.optimizer.mean_square) put_tensor(out, "opt/" + std::to_string(k++), s);
  for (const auto& p : state.best) put_tensor(out, "best/" + p.name, p.tensor);

  // Write then rename so an interrupted save never leaves a torn checkpoint.
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) fail(ErrorCode::IoError, "cannot write " + tmp.string());
    f.write(out.data(), std::streamsize(out.size()));
    if (!f) fail(ErrorCode::IoError, "cannot write " + tmp.string());
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) fail(ErrorCode::IoError, "cannot write " + path.string() + ": " + ec.message());
}

Checkpoint load_checkpoint(const fs::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) fail(ErrorCode::IoError, "cannot open " + path.string());
  std::ostringstream buffer;
  buffer << f.rdbuf();
  const std::string bytes = buffer.str();
  std::string_view in(bytes);
  const std::string where = path.string() + ": ";
  if (!in.starts_with(kCheckpointMagic)) fail(ErrorCode::FormatError, where + "not a checkpoint");
  in.remove_prefix(kCheckpointMagic.size());
  const auto nul = in.find('\0');
  if (nul == std::string_view::npos) fail(ErrorCode::FormatError, where + "unterminated metadata");
  Checkpoint cp;
  try {
    cp.meta = nlohmann::json::parse(in.substr(0, nul));
    if (cp.meta.at("format") != "volnet-checkpoint-1") fail(ErrorCode::FormatError, where + "unknown version");
    cp.state.epoch = cp.meta.at("epoch").get<int>();
    cp.state.scheduler = cp.meta.at("scheduler");
    cp.state.history = history_from_json(cp.meta.at("history"));
    cp.state.best_epoch = cp.meta.at("best_epoch").get<int>();
    const auto& best = cp.meta.at("best_loss");
    cp.state.best_loss = best.is_null() ? std::numeric_limits<double>::infinity() : best.get<double>();
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::FormatError, where + e.what());
  }
  in.remove_prefix(nul + 1);
  while (!in.empty()) {
    const auto name_len = take<std::uint32_t>(in);
    if (in.size() < name_len) fail(ErrorCode::FormatError, where + "truncated tensor name");
    const std::string name(in.substr(0, name_len));
    in.remove_prefix(name_len);
    const auto blob_len = take<std::uint64_t>(in);
    if (in.size() < blob_len) fail(ErrorCode::FormatError, where + "truncated tensor " + name);
    TensorF t = decode_volume(in.substr(0, blob_len));
    in.remove_prefix(blob_len);
    if (name.starts_with("params/")) cp.state.params.push_back({name.substr(7), std::move(t)});
    else if (name.starts_with("best/")) cp.state.best.push_back({name.substr(5), std::move(t)});
    else if (name.starts_with("opt/")) cp.state.optimizer.mean_square.push_back(std::move(t));
    else fail(ErrorCode::FormatError, where + "unexpected tensor " + name);
  }
  return cp;
}

Checkpoint load_checkpoint(const fs::path& path, const Network<float>& net) {
  Checkpoint cp = load_checkpoint(path);
  const std::string where = path.string() + ": ";
  if (cp.meta.value("preset", "") != net.spec().name)
    fail(ErrorCode::FormatError, where + "checkpoint is for preset '" + cp.meta.value("preset", "") + "', not '" +
                                     net.spec().name + "'");
  const auto expected = net.snapshot();
  auto matches = [&](const ParameterStore<float>& store) {
    if (store.size() != expected.size()) return false;
    for (std::size_t i = 0; i < store.size(); ++i)
      if (store[i].name != expected[i].name || store[i].tensor.shape() != expected[i].tensor.shape()) return false;
    return true;
  };
  if (!matches(cp.state.params) || !matches(cp.state.best))
    fail(ErrorCode::FormatError, where + "tensors do not match the network");
  std::size_t k = 0;
  for (const auto& p : net.parameters()) {
    if (!p.trainable()) continue;
    if (k >= cp.state.optimizer.mean_square.size() || cp.state.optimizer.mean_square[k].shape() != p.value->shape())
      fail(ErrorCode::FormatError, where + "optimizer state does not match the network");
    ++k;
  }
  if (k != cp.state.optimizer.mean_square.size()) fail(ErrorCode::FormatError, where + "extra optimizer tensors");
  return cp;
}

TrainConfig checkpoint_config(const Checkpoint& checkpoint) {
  try {
    return config_from_json(checkpoint.meta.at("config"));
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::FormatError, std::string("checkpoint has no configuration: ") + e.what());
  }
}

// ---------------------------------------------------------------- loop

TrainResult train_loop(const TrainConfig& config, const Manifest& manifest, const DatasetSplit& split,
                       const TrainHooks& hooks, const TrainState* resume) {
  validate(config);
  const auto labels = task_labels(config.task);
  Network<float> net(network_for(config));
  std::vector<std::string> columns;
  for (const auto& p : net.spec().pipelines) columns.push_back(p.input);
  check_split(split, manifest);
  for (const auto& part : {"train", "validation", "test"})
    for (const auto& id : split.subset(part, labels))
      for (const auto& c : columns)
        if (!manifest.subject(id).volumes.contains(c))
          fail(ErrorCode::InvalidConfig, "subject '" + id + "' has no " + c + " volume for preset " + config.preset);

  VolumeCache cache(manifest);
  PlateauScheduler scheduler(scale_lr(config.lr0, config.eta0, config.eta), config.plateau_factor, config.patience,
                             config.min_delta, config.lr_min);
  TrainState state;
  if (resume) {
    state = *resume;
    net.restore(state.params);
    scheduler.load_state(state.scheduler);
  } else {
    xavier_init(net, derive_seed(config.seed, "init"));
    state.params = net.snapshot();
    state.best = state.params;
    state.optimizer = make_optimizer_state(net);
    state.scheduler = scheduler.state();
  }
  const std::vector<std::string> test_ids = split.subset("test", labels);
  auto log = [&](const std::string& line) {
    if (hooks.log) hooks.log(line);
  };

  for (int e = state.epoch; e < config.max_epochs; ++e) {
    const std::string tag = "/" + std::to_string(e);
    const DatasetSplit current = epoch_split(split, config.seed, e);
    const BalancedSampler sampler = make_sampler(current, labels);
    const auto train_ids = current.subset("train", labels);
    const auto validation_ids = current.subset("validation", labels);
    const EpochPlan plan = epoch_plan(Index(train_ids.size()), config.tau, config.eta);
    if (plan.iterations < 1)
      fail(ErrorCode::InvalidConfig, std::to_string(plan.images) + " augmented images per epoch do not fill one batch of " +
                                         std::to_string(config.eta));
    std::mt19937_64 batch_rng(derive_seed(config.seed, "batch" + tag));
    std::mt19937_64 dropout_rng(derive_seed(config.seed, "dropout" + tag));
    const double lr = scheduler.lr();

    double loss_sum = 0.0;
    Index correct = 0, seen = 0;
    for (Index it = 0; it < plan.iterations; ++it) {
      const std::string where = "epoch " + std::to_string(e + 1) + " iteration " + std::to_string(it + 1);
      const Batch batch = balanced_batch(sampler, cache, columns, config.eta, batch_rng);
      const TensorF probs = net.forward(batch.inputs, Mode::train, &dropout_rng);
      const auto ce = cross_entropy(probs, batch.one_hot);
      if (!std::isfinite(ce.loss)) fail(ErrorCode::NumericError, where + ": non-finite loss");
      net.backward(ce.grad_logits);
      try {
        rmsprop_step(net.parameters(), state.optimizer, lr, config.rho, config.epsilon);
      } catch (const Error& err) {
        fail(err.code(), where + ": " + err.what());
      }
      loss_sum += ce.loss * double(config.eta);
      const auto pred = argmax_rows(probs);
      for (std::size_t i = 0; i < pred.size(); ++i) correct += pred[i] == batch.labels[i];
      seen += config.eta;
    }

    EpochRecord rec;
    rec.epoch = e + 1;
    rec.lr = lr;
    rec.iterations = plan.iterations;
    rec.train_loss = seen ? loss_sum / double(seen) : std::nan("");
    rec.train_acc = seen ? double(correct) / double(seen) : std::nan("");
    rec.val_loss = rec.val_acc = std::nan("");
    if (!validation_ids.empty()) {
      const auto v = predict(net, cache, validation_ids, labels);
      rec.val_loss = v.loss;
      rec.val_acc = v.accuracy;
    }
    const auto t = predict(net, cache, test_ids, labels);
    rec.test_loss = t.loss;
    rec.test_acc = t.accuracy;

    // With no validation subjects the training loss stands in.
    const double selection = std::isnan(rec.val_loss) ? rec.train_loss : rec.val_loss;
    const double monitored = config.monitor == PlateauMonitor::test ? rec.test_loss : selection;
    if (!std::isfinite(selection) || !std::isfinite(monitored))
      fail(ErrorCode::NumericError, "epoch " + std::to_string(e + 1) + ": non-finite loss");
    scheduler.step(monitored);

    const bool improved = selection < state.best_loss;
    state.epoch = e + 1;
    state.params = net.snapshot();
    state.scheduler = scheduler.state();
    state.history.epochs.push_back(rec);
    if (improved) {
      state.best = state.params;
      state.best_loss = selection;
      state.best_epoch = e + 1;
    }
    char line[256];
    std::snprintf(line, sizeof line,
                  "epoch %d/%d  train %.4f/%.3f  val %.4f/%.3f  test %.4f/%.3f  lr %.3g%s", rec.epoch,
                  config.max_epochs, rec.train_loss, rec.train_acc, rec.val_loss, rec.val_acc, rec.test_loss,
                  rec.test_acc, rec.lr, improved ? "  *" : "");
    log(line);
    if (hooks.on_epoch) hooks.on_epoch(state, improved);
  }

  TrainResult result;
  result.best = state.best;
  result.best_epoch = state.best_epoch;
  result.history = state.history;
  result.final_state = std::move(state);
  return result;
}

}  // namespace volnet
