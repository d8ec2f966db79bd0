#include "volnet/data.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <set>
#include <sstream>

#include "volnet/error.hpp"

namespace volnet {

namespace fs = std::filesystem;

std::string_view to_string(Label label) {
  switch (label) {
    case Label::AD: return "AD";
    case Label::MCI: return "MCI";
    case Label::NC: return "NC";
  }
  return "?";
}

Label parse_label(std::string_view text) {
  if (text == "AD") return Label::AD;
  if (text == "MCI") return Label::MCI;
  if (text == "NC") return Label::NC;
  fail(ErrorCode::InvalidLabel, "unknown label '" + std::string(text) + "'");
}

std::string_view to_string(Task task) {
  switch (task) {
    case Task::AD_NC: return "AD_NC";
    case Task::AD_MCI: return "AD_MCI";
    case Task::MCI_NC: return "MCI_NC";
    case Task::AD_MCI_NC: return "AD_MCI_NC";
  }
  return "?";
}

Task parse_task(std::string_view text) {
  for (Task t : {Task::AD_NC, Task::AD_MCI, Task::MCI_NC, Task::AD_MCI_NC})
    if (to_string(t) == text) return t;
  fail(ErrorCode::InvalidConfig, "unknown task '" + std::string(text) + "'");
}

std::vector<Label> task_labels(Task task) {
  switch (task) {
    case Task::AD_NC: return {Label::AD, Label::NC};
    case Task::AD_MCI: return {Label::AD, Label::MCI};
    case Task::MCI_NC: return {Label::MCI, Label::NC};
    case Task::AD_MCI_NC: return {Label::AD, Label::MCI, Label::NC};
  }
  return {};
}

// ---------------------------------------------------------------- manifest

const SubjectRecord& Manifest::subject(const std::string& id) const {
  for (const auto& s : subjects)
    if (s.id == id) return s;
  fail(ErrorCode::InvalidConfig, "subject '" + id + "' not in manifest");
}

std::map<Label, std::vector<std::string>> Manifest::ids_by_label() const {
  std::map<Label, std::vector<std::string>> out;
  for (const auto& s : subjects) out[s.label].push_back(s.id);
  for (auto& [label, ids] : out) std::sort(ids.begin(), ids.end());
  return out;
}

namespace {

constexpr std::string_view kManifestHeader = "subject_id,label,smri_l,smri_r,dti_l,dti_r";

std::vector<std::string> split_fields(std::string_view line) {
  std::vector<std::string> fields;
  std::size_t start = 0;
  while (true) {
    const auto comma = line.find(',', start);
    fields.emplace_back(line.substr(start, comma - start));
    if (comma == std::string_view::npos) break;
    start = comma + 1;
  }
  return fields;
}

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorCode::IoError, "cannot open " + path.string());
  std::ostringstream buffer;
  buffer << in.rdbuf();
  if (in.bad()) fail(ErrorCode::IoError, "cannot read " + path.string());
  return buffer.str();
}

void write_file(const fs::path& path, std::string_view bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(ErrorCode::IoError, "cannot write " + path.string());
  out.write(bytes.data(), std::streamsize(bytes.size()));
  out.close();
  if (!out) fail(ErrorCode::IoError, "cannot write " + path.string());
}

}  // namespace

Manifest parse_manifest(std::string_view text, const fs::path& base_dir) {
  Manifest manifest;
  std::set<std::string> seen;
  std::size_t line_no = 0, pos = 0;
  bool header = true;
  while (pos < text.size()) {
    auto end = text.find('\n', pos);
    if (end == std::string_view::npos) end = text.size();
    std::string_view line = text.substr(pos, end - pos);
    pos = end + 1;
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    if (header) {
      if (line.starts_with("\xEF\xBB\xBF")) line.remove_prefix(3);
      if (line != kManifestHeader)
        fail(ErrorCode::ParseError, "manifest header must be '" + std::string(kManifestHeader) + "'");
      header = false;
      continue;
    }
    if (line.empty()) continue;
    const auto fields = split_fields(line);
    const std::string where = "manifest line " + std::to_string(line_no);
    if (fields.size() != 6) fail(ErrorCode::ParseError, where + ": expected 6 fields");
    if (fields[0].empty()) fail(ErrorCode::ParseError, where + ": empty subject_id");
    SubjectRecord record;
    record.id = fields[0];
    record.label = parse_label(fields[1]);
    for (std::size_t c = 0; c < kVolumeColumns.size(); ++c) {
      if (fields[c + 2].empty()) continue;
      const fs::path p(fields[c + 2]);
      record.volumes[kVolumeColumns[c]] = p.is_absolute() ? p : base_dir / p;
    }
    if (!seen.insert(record.id).second) fail(ErrorCode::DuplicateSubject, where + ": duplicate '" + record.id + "'");
    manifest.subjects.push_back(std::move(record));
  }
  if (header) fail(ErrorCode::ParseError, "manifest is empty");
  return manifest;
}

Manifest load_manifest(const fs::path& path) {
  Manifest manifest = parse_manifest(read_file(path), path.parent_path());
  manifest.path = path;
  return manifest;
}

void write_manifest(const Manifest& manifest, const fs::path& path) {
  std::string text(kManifestHeader);
  text += '\n';
  const fs::path base = path.parent_path();
  for (const auto& s : manifest.subjects) {
    text += s.id + "," + std::string(to_string(s.label));
    for (const auto& column : kVolumeColumns) {
      text += ',';
      if (auto it = s.volumes.find(column); it != s.volumes.end()) {
        // Relative only when the volume lives under the manifest's directory.
        const fs::path rel = it->second.lexically_relative(base);
        const bool inside = !rel.empty() && *rel.begin() != "..";
        text += (inside ? rel : it->second).generic_string();
      }
    }
    text += '\n';
  }
  write_file(path, text);
}

void require_volumes(const Manifest& manifest, const std::vector<std::string>& columns) {
  for (const auto& s : manifest.subjects)
    for (const auto& c : columns)
      if (!s.volumes.contains(c)) fail(ErrorCode::InvalidConfig, "subject '" + s.id + "' has no " + c + " volume");
}

// ---------------------------------------------------------------- vvol

namespace {

constexpr std::string_view kVolumeMagic = "VVOL1\n";

std::uint32_t to_little(std::uint32_t v) {
  if constexpr (std::endian::native == std::endian::big)
    return (v >> 24) | ((v >> 8) & 0xFF00u) | ((v << 8) & 0xFF0000u) | (v << 24);
  return v;
}

}  // namespace

std::string encode_volume(const TensorF& volume) {
  const nlohmann::json header{{"shape", volume.shape()}, {"dtype", "f32le"}};
  std::string out(kVolumeMagic);
  out += header.dump();
  out += '\n';
  out += '\0';
  const std::size_t start = out.size();
  out.resize(start + std::size_t(volume.size()) * 4);
  for (Index i = 0; i < volume.size(); ++i) {
    const std::uint32_t bits = to_little(std::bit_cast<std::uint32_t>(volume[i]));
    std::memcpy(out.data() + start + std::size_t(i) * 4, &bits, 4);
  }
  return out;
}

TensorF decode_volume(std::string_view bytes) {
  if (!bytes.starts_with(kVolumeMagic)) fail(ErrorCode::FormatError, "bad vvol magic");
  bytes.remove_prefix(kVolumeMagic.size());
  const auto nul = bytes.find('\0');
  if (nul == std::string_view::npos) fail(ErrorCode::FormatError, "vvol header is not terminated");
  Shape shape;
  try {
    const auto header = nlohmann::json::parse(bytes.substr(0, nul));
    if (header.at("dtype") != "f32le") fail(ErrorCode::FormatError, "unsupported vvol dtype");
    shape = header.at("shape").get<Shape>();
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::FormatError, std::string("bad vvol header: ") + e.what());
  }
  if (shape.empty() || std::any_of(shape.begin(), shape.end(), [](Index e) { return e <= 0; }))
    fail(ErrorCode::FormatError, "bad vvol shape [" + shape_string(shape) + "]");
  bytes.remove_prefix(nul + 1);
  const Index count = shape_size(shape);
  if (Index(bytes.size()) != count * 4)
    fail(ErrorCode::FormatError, "vvol payload holds " + std::to_string(bytes.size()) + " bytes, shape [" +
                                     shape_string(shape) + "] needs " + std::to_string(count * 4));
  TensorF out(shape);
  for (Index i = 0; i < count; ++i) {
    std::uint32_t bits;
    std::memcpy(&bits, bytes.data() + i * 4, 4);
    out[i] = std::bit_cast<float>(to_little(bits));
  }
  return out;
}

void write_volume(const fs::path& path, const TensorF& volume) { write_file(path, encode_volume(volume)); }

TensorF read_volume(const fs::path& path) {
  try {
    return decode_volume(read_file(path));
  } catch (const Error& e) {
    if (e.code() == ErrorCode::FormatError) fail(ErrorCode::FormatError, path.string() + ": " + e.what());
    throw;
  }
}

// ---------------------------------------------------------------- seeds

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ull * (stream + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

std::uint64_t derive_seed(std::uint64_t seed, std::string_view role) {
  std::uint64_t h = 0xCBF29CE484222325ull;  // FNV-1a
  for (unsigned char c : role) h = (h ^ c) * 0x100000001B3ull;
  return derive_seed(seed, h);
}

// ---------------------------------------------------------------- splits

namespace {

void shuffle_ids(std::vector<std::string>& ids, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::shuffle(ids.begin(), ids.end(), rng);
}

void partition_train_val(ClassSplit& cls, std::vector<std::string> pool, std::uint64_t seed) {
  std::sort(pool.begin(), pool.end());
  shuffle_ids(pool, seed);
  const std::size_t val = pool.size() / 10;
  cls.validation.assign(pool.begin(), pool.begin() + std::ptrdiff_t(val));
  cls.train.assign(pool.begin() + std::ptrdiff_t(val), pool.end());
  std::sort(cls.validation.begin(), cls.validation.end());
  std::sort(cls.train.begin(), cls.train.end());
}

std::uint64_t class_seed(std::uint64_t seed, std::string_view role, Label label) {
  return derive_seed(seed, std::string(role) + "/" + std::string(to_string(label)));
}

}  // namespace

std::vector<std::string> DatasetSplit::subset(std::string_view name, const std::vector<Label>& labels) const {
  std::vector<std::string> out;
  for (Label label : labels) {
    const auto it = classes.find(label);
    if (it == classes.end()) fail(ErrorCode::InsufficientSubjects, "split has no " + std::string(to_string(label)));
    const ClassSplit& c = it->second;
    const std::vector<std::string>* part = nullptr;
    if (name == "train") part = &c.train;
    else if (name == "validation" || name == "val") part = &c.validation;
    else if (name == "test") part = &c.test;
    else fail(ErrorCode::InvalidConfig, "unknown subset '" + std::string(name) + "'");
    out.insert(out.end(), part->begin(), part->end());
  }
  return out;
}

DatasetSplit split_dataset(const Manifest& manifest, std::uint64_t seed) {
  DatasetSplit split;
  for (auto [label, ids] : manifest.ids_by_label()) {
    if (Index(ids.size()) <= kTestPerClass)
      fail(ErrorCode::InsufficientSubjects, "class " + std::string(to_string(label)) + " has " +
                                                std::to_string(ids.size()) + " subjects, need at least 16");
    shuffle_ids(ids, class_seed(seed, "test", label));
    ClassSplit& cls = split.classes[label];
    cls.test.assign(ids.begin(), ids.begin() + kTestPerClass);
    std::sort(cls.test.begin(), cls.test.end());
    partition_train_val(cls, {ids.begin() + kTestPerClass, ids.end()}, class_seed(seed, "trainval", label));
  }
  return split;
}

DatasetSplit reshuffle_train_val(const DatasetSplit& split, std::uint64_t seed) {
  DatasetSplit out = split;
  for (auto& [label, cls] : out.classes) {
    std::vector<std::string> pool = cls.train;
    pool.insert(pool.end(), cls.validation.begin(), cls.validation.end());
    partition_train_val(cls, std::move(pool), class_seed(seed, "trainval", label));
  }
  return out;
}

DatasetSplit epoch_split(const DatasetSplit& initial, std::uint64_t seed, int epoch) {
  return epoch == 0 ? initial : reshuffle_train_val(initial, seed + std::uint64_t(epoch));
}

nlohmann::json split_to_json(const DatasetSplit& split) {
  nlohmann::json classes = nlohmann::json::object();
  for (const auto& [label, cls] : split.classes)
    classes[std::string(to_string(label))] = {{"train", cls.train}, {"validation", cls.validation}, {"test", cls.test}};
  return {{"format", "volnet-split-1"}, {"classes", classes}};
}

DatasetSplit split_from_json(const nlohmann::json& doc) {
  DatasetSplit split;
  try {
    if (doc.at("format") != "volnet-split-1") fail(ErrorCode::FormatError, "unknown split format");
    std::set<std::string> seen;
    for (const auto& [name, cls] : doc.at("classes").items()) {
      Label label;
      try {
        label = parse_label(name);
      } catch (const Error&) {
        fail(ErrorCode::FormatError, "split names unknown class '" + name + "'");
      }
      ClassSplit& c = split.classes[label];
      c.train = cls.at("train").get<std::vector<std::string>>();
      c.validation = cls.at("validation").get<std::vector<std::string>>();
      c.test = cls.at("test").get<std::vector<std::string>>();
      for (const auto* part : {&c.train, &c.validation, &c.test})
        for (const auto& id : *part)
          if (!seen.insert(id).second) fail(ErrorCode::FormatError, "subject '" + id + "' appears twice in split");
    }
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::FormatError, std::string("bad split document: ") + e.what());
  }
  return split;
}

void save_split(const DatasetSplit& split, const fs::path& path) { write_file(path, split_to_json(split).dump(2) + "\n"); }

DatasetSplit load_split(const fs::path& path) {
  const std::string text = read_file(path);
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::FormatError, path.string() + ": " + e.what());
  }
  return split_from_json(doc);
}

void check_split(const DatasetSplit& split, const Manifest& manifest) {
  std::map<std::string, Label> labels;
  for (const auto& s : manifest.subjects) labels[s.id] = s.label;
  for (const auto& [label, cls] : split.classes)
    for (const auto* part : {&cls.train, &cls.validation, &cls.test})
      for (const auto& id : *part) {
        const auto it = labels.find(id);
        if (it == labels.end()) fail(ErrorCode::InvalidConfig, "split subject '" + id + "' not in manifest");
        if (it->second != label) fail(ErrorCode::InvalidConfig, "split subject '" + id + "' has a different label");
      }
}

// ---------------------------------------------------------------- augmentation

Shift draw_shift(std::mt19937_64& rng) {
  std::uniform_int_distribution<Index> d(-kRoiMargin, kRoiMargin);
  Shift s;
  for (auto& v : s.d) v = d(rng);
  return s;
}

TensorF augment_shift(const TensorF& padded, const Shift& shift) {
  if (padded.shape() != Shape{1, kPaddedExtent, kPaddedExtent, kPaddedExtent})
    fail(ErrorCode::InvalidShape, "padded ROI must be [1,33,33,33], got [" + shape_string(padded.shape()) + "]");
  for (Index v : shift.d)
    if (v < -kRoiMargin || v > kRoiMargin) fail(ErrorCode::CropOutOfBounds, "shift exceeds the ROI margin");
  return crop(padded, {0, kRoiMargin + shift.d[0], kRoiMargin + shift.d[1], kRoiMargin + shift.d[2]},
              {1, kRoiExtent, kRoiExtent, kRoiExtent});
}

TensorF augment_shift(const TensorF& padded, std::mt19937_64& rng) { return augment_shift(padded, draw_shift(rng)); }

TensorF center_crop(const TensorF& padded) { return augment_shift(padded, Shift{}); }

const TensorF& VolumeCache::get(const std::string& subject, const std::string& column) {
  const std::string key = subject + "\n" + column;
  if (auto it = volumes_.find(key); it != volumes_.end()) return it->second;
  const auto& record = manifest_->subject(subject);
  const auto path = record.volumes.find(column);
  if (path == record.volumes.end()) fail(ErrorCode::InvalidConfig, "subject '" + subject + "' has no " + column);
  TensorF volume = read_volume(path->second);
  if (volume.shape() != Shape{1, kPaddedExtent, kPaddedExtent, kPaddedExtent})
    fail(ErrorCode::FormatError, path->second.string() + ": expected shape [1,33,33,33]");
  if (!all_finite(volume)) fail(ErrorCode::FormatError, path->second.string() + ": non-finite voxel");
  return volumes_.emplace(key, std::move(volume)).first->second;
}

BalancedSampler::BalancedSampler(std::vector<std::vector<std::string>> ids_per_class) : ids_(std::move(ids_per_class)) {
  if (ids_.empty()) fail(ErrorCode::InsufficientSubjects, "no classes to sample");
  for (std::size_t k = 0; k < ids_.size(); ++k)
    if (ids_[k].empty()) fail(ErrorCode::InsufficientSubjects, "class " + std::to_string(k) + " has no subjects");
}

std::pair<int, const std::string*> BalancedSampler::draw(std::mt19937_64& rng) const {
  const int k = std::uniform_int_distribution<int>(0, int(ids_.size()) - 1)(rng);
  const auto& ids = ids_[std::size_t(k)];
  const auto i = std::uniform_int_distribution<std::size_t>(0, ids.size() - 1)(rng);
  return {k, &ids[i]};
}

BalancedSampler make_sampler(const DatasetSplit& split, const std::vector<Label>& labels) {
  std::vector<std::vector<std::string>> ids;
  for (Label label : labels) ids.push_back(split.subset("train", {label}));
  return BalancedSampler(std::move(ids));
}

namespace {

Batch empty_batch(Index n, std::size_t columns, Index classes) {
  Batch batch;
  for (std::size_t c = 0; c < columns; ++c) batch.inputs.emplace_back(Shape{n, 1, kRoiExtent, kRoiExtent, kRoiExtent});
  batch.one_hot = TensorF({n, classes});
  return batch;
}

void place(Batch& batch, Index row, std::size_t column, const TensorF& roi) {
  auto& dst = batch.inputs[column];
  std::copy_n(roi.data(), roi.size(), dst.data() + row * roi.size());
}

}  // namespace

Batch balanced_batch(const BalancedSampler& sampler, VolumeCache& cache, const std::vector<std::string>& columns,
                     Index eta, std::mt19937_64& rng) {
  if (eta < 1) fail(ErrorCode::InvalidConfig, "batch size must be positive");
  Batch batch = empty_batch(eta, columns.size(), sampler.classes());
  for (Index n = 0; n < eta; ++n) {
    const auto [k, id] = sampler.draw(rng);
    const Shift shift = draw_shift(rng);
    for (std::size_t c = 0; c < columns.size(); ++c) place(batch, n, c, augment_shift(cache.get(*id, columns[c]), shift));
    batch.one_hot.at({n, Index(k)}) = 1.0f;
    batch.labels.push_back(k);
  }
  return batch;
}

Batch fixed_batch(const std::vector<std::string>& ids, VolumeCache& cache, const std::vector<std::string>& columns,
                  const std::vector<Label>& labels) {
  if (ids.empty()) fail(ErrorCode::InsufficientSubjects, "empty subject list");
  Batch batch = empty_batch(Index(ids.size()), columns.size(), Index(labels.size()));
  for (std::size_t n = 0; n < ids.size(); ++n) {
    const Label label = cache.manifest().subject(ids[n]).label;
    const auto k = std::find(labels.begin(), labels.end(), label) - labels.begin();
    if (k == Index(labels.size()))
      fail(ErrorCode::InvalidLabel, "subject '" + ids[n] + "' is " + std::string(to_string(label)) + ", not in task");
    for (std::size_t c = 0; c < columns.size(); ++c) place(batch, Index(n), c, center_crop(cache.get(ids[n], columns[c])));
    batch.one_hot.at({Index(n), Index(k)}) = 1.0f;
    batch.labels.push_back(int(k));
  }
  return batch;
}

EpochPlan epoch_plan(Index train_subjects, Index tau, Index eta) {
  if (train_subjects < 1 || tau < 1 || eta < 1) fail(ErrorCode::InvalidConfig, "epoch_plan arguments must be positive");
  const Index images = tau * train_subjects;
  return {images, images / eta};
}

// ---------------------------------------------------------------- phantoms

std::vector<PhantomClass> default_phantom_classes(int count) {
  if (count == 2) return {{Label::AD, 6.0, 1.2}, {Label::NC, 9.0, 0.6}};
  if (count == 3) return {{Label::AD, 6.0, 1.2}, {Label::MCI, 7.5, 0.9}, {Label::NC, 9.0, 0.6}};
  fail(ErrorCode::InvalidConfig, "phantom class count must be 2 or 3");
}

TensorF phantom_volume(double radius, double boundary_width, const std::array<double, 3>& center_offset,
                       bool second_modality) {
  const Index n = kPaddedExtent;
  // Slightly anisotropic, like a hippocampus elongated along one axis.
  const std::array<double, 3> axes{1.15 * radius, radius, 0.85 * radius};
  const double mid = double(n - 1) / 2.0;
  TensorF out({1, n, n, n});
  Index i = 0;
  for (Index z = 0; z < n; ++z)
    for (Index y = 0; y < n; ++y)
      for (Index x = 0; x < n; ++x, ++i) {
        const double dz = (double(z) - mid - center_offset[0]) / axes[0];
        const double dy = (double(y) - mid - center_offset[1]) / axes[1];
        const double dx = (double(x) - mid - center_offset[2]) / axes[2];
        const double rho = std::sqrt(dz * dz + dy * dy + dx * dx);
        // Signed distance to the surface, approximately in voxels.
        const double inside = 1.0 / (1.0 + std::exp((rho - 1.0) * radius / boundary_width));
        out[i] = float(second_modality ? 1.0 - 0.8 * inside : inside);
      }
  return out;
}

Manifest generate_phantoms(const PhantomConfig& config, const fs::path& out_dir) {
  if (config.classes.size() < 2) fail(ErrorCode::InvalidConfig, "phantoms need at least 2 classes");
  if (config.per_class <= kTestPerClass) fail(ErrorCode::InvalidConfig, "phantoms need at least 16 subjects per class");
  if (!(config.noise >= 0.0) || !std::isfinite(config.noise)) fail(ErrorCode::InvalidConfig, "noise must be >= 0");
  std::error_code ec;
  fs::create_directories(out_dir / "volumes", ec);
  if (ec) fail(ErrorCode::IoError, "cannot create " + (out_dir / "volumes").string() + ": " + ec.message());

  Manifest manifest;
  manifest.path = out_dir / "manifest.csv";
  std::uint64_t stream = 0;
  for (const auto& cls : config.classes) {
    for (Index s = 0; s < config.per_class; ++s, ++stream) {
      char id[32];
      std::snprintf(id, sizeof id, "%s_%03d", std::string(to_string(cls.label)).c_str(), int(s));
      SubjectRecord record{id, cls.label, {}};
      std::mt19937_64 rng(derive_seed(config.seed, stream));
      std::uniform_real_distribution<double> radius_jitter(-config.radius_jitter, config.radius_jitter);
      std::uniform_real_distribution<double> center_jitter(-config.center_jitter, config.center_jitter);
      std::normal_distribution<double> noise(0.0, 1.0);
      for (int side = 0; side < 2; ++side) {
        const double radius = cls.radius + radius_jitter(rng);
        const std::array<double, 3> center{center_jitter(rng), center_jitter(rng), center_jitter(rng)};
        for (int modality = 0; modality < 2; ++modality) {
          TensorF volume = phantom_volume(radius, cls.boundary_width, center, modality == 1);
          if (config.noise > 0.0)
            for (Index i = 0; i < volume.size(); ++i) volume[i] += float(config.noise * noise(rng));
          const std::string& column = kVolumeColumns[std::size_t(2 * modality + side)];
          const fs::path path = out_dir / "volumes" / (std::string(id) + "_" + column + ".vvol");
          write_volume(path, volume);
          record.volumes[column] = path;
        }
      }
      manifest.subjects.push_back(std::move(record));
    }
  }
  write_manifest(manifest, manifest.path);
  return manifest;
}

}  // namespace volnet
