#ifndef VOLNET_DATA_HPP
#define VOLNET_DATA_HPP

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <random>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "json.hpp"

#include "volnet/tensor.hpp"

namespace volnet {

enum class Label { AD, MCI, NC };

std::string_view to_string(Label label);
Label parse_label(std::string_view text);  // InvalidLabel

// Classification tasks; the first label of each is the positive class.
enum class Task { AD_NC, AD_MCI, MCI_NC, AD_MCI_NC };

std::string_view to_string(Task task);
Task parse_task(std::string_view text);  // InvalidConfig
std::vector<Label> task_labels(Task task);

// Volume column names, identical to the pipeline input names of the presets.
inline const std::array<std::string, 4> kVolumeColumns{"smri_l", "smri_r", "dti_l", "dti_r"};

// Stored ROIs carry a 2-voxel margin around the 29^3 network window.
inline constexpr Index kRoiMargin = 2;
inline constexpr Index kRoiExtent = 29;
inline constexpr Index kPaddedExtent = kRoiExtent + 2 * kRoiMargin;

struct SubjectRecord {
  std::string id;
  Label label = Label::NC;
  std::map<std::string, std::filesystem::path> volumes;  // column -> resolved path
};

struct Manifest {
  std::filesystem::path path;
  std::vector<SubjectRecord> subjects;

  const SubjectRecord& subject(const std::string& id) const;  // InvalidConfig if absent
  std::map<Label, std::vector<std::string>> ids_by_label() const;
};

Manifest load_manifest(const std::filesystem::path& path);
Manifest parse_manifest(std::string_view text, const std::filesystem::path& base_dir);
void write_manifest(const Manifest& manifest, const std::filesystem::path& path);

// Throws InvalidConfig naming the first subject lacking one of `columns`.
void require_volumes(const Manifest& manifest, const std::vector<std::string>& columns);

// vvol: "VVOL1\n", a JSON header line, '\0', row-major little-endian f32.
std::string encode_volume(const TensorF& volume);
TensorF decode_volume(std::string_view bytes);
void write_volume(const std::filesystem::path& path, const TensorF& volume);
TensorF read_volume(const std::filesystem::path& path);

// Mixes a master seed with a stream tag so independent random streams never
// share state (splitmix64 finalizer).
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream);
std::uint64_t derive_seed(std::uint64_t seed, std::string_view role);

struct ClassSplit {
  std::vector<std::string> train, validation, test;
};

struct DatasetSplit {
  std::map<Label, ClassSplit> classes;

  std::vector<std::string> subset(std::string_view name, const std::vector<Label>& labels) const;  // InvalidConfig
};

inline constexpr Index kTestPerClass = 15;

DatasetSplit split_dataset(const Manifest& manifest, std::uint64_t seed);
DatasetSplit reshuffle_train_val(const DatasetSplit& split, std::uint64_t seed);
// Split in force during `epoch`: the initial one for epoch 0, then a fresh
// train/validation partition seeded by seed + epoch.
DatasetSplit epoch_split(const DatasetSplit& initial, std::uint64_t seed, int epoch);

nlohmann::json split_to_json(const DatasetSplit& split);
DatasetSplit split_from_json(const nlohmann::json& doc);  // FormatError
void save_split(const DatasetSplit& split, const std::filesystem::path& path);
DatasetSplit load_split(const std::filesystem::path& path);
// Every subject of the split exists in the manifest with the recorded label.
void check_split(const DatasetSplit& split, const Manifest& manifest);

struct Shift {
  std::array<Index, 3> d{0, 0, 0};  // (dz, dy, dx), each in [-margin, margin]
};

Shift draw_shift(std::mt19937_64& rng);
TensorF augment_shift(const TensorF& padded, const Shift& shift);
TensorF augment_shift(const TensorF& padded, std::mt19937_64& rng);
TensorF center_crop(const TensorF& padded);

// Loads each padded ROI once and keeps it in memory.
class VolumeCache {
 public:
  explicit VolumeCache(const Manifest& manifest) : manifest_(&manifest) {}

  const TensorF& get(const std::string& subject, const std::string& column);
  const Manifest& manifest() const { return *manifest_; }

 private:
  const Manifest* manifest_;
  std::unordered_map<std::string, TensorF> volumes_;
};

struct Batch {
  std::vector<TensorF> inputs;  // per column, [N,1,29,29,29]
  TensorF one_hot;              // [N,K]
  std::vector<int> labels;      // class index within the task
};

// Uniform class, then uniform subject of that class.
class BalancedSampler {
 public:
  explicit BalancedSampler(std::vector<std::vector<std::string>> ids_per_class);  // InsufficientSubjects

  std::pair<int, const std::string*> draw(std::mt19937_64& rng) const;
  int classes() const { return int(ids_.size()); }

 private:
  std::vector<std::vector<std::string>> ids_;
};

BalancedSampler make_sampler(const DatasetSplit& split, const std::vector<Label>& labels);

// `eta` balanced draws; the ROIs of one draw share a single shift.
Batch balanced_batch(const BalancedSampler& sampler, VolumeCache& cache, const std::vector<std::string>& columns,
                     Index eta, std::mt19937_64& rng);

// Center crops of the given subjects in order.
Batch fixed_batch(const std::vector<std::string>& ids, VolumeCache& cache, const std::vector<std::string>& columns,
                  const std::vector<Label>& labels);

struct EpochPlan {
  Index images = 0;
  Index iterations = 0;
  bool operator==(const EpochPlan&) const = default;
};

EpochPlan epoch_plan(Index train_subjects, Index tau, Index eta);

struct PhantomClass {
  Label label;
  double radius;          // voxels, before jitter
  double boundary_width;  // sigmoid width of the ellipsoid surface, voxels
};

struct PhantomConfig {
  std::vector<PhantomClass> classes;
  Index per_class = 40;
  std::uint64_t seed = 7;
  double noise = 0.1;
  double radius_jitter = 0.75;
  double center_jitter = 1.0;
};

// Class geometry used by the synth command: AD smallest and blurriest,
// NC largest and sharpest, MCI between. `count` is 2 (AD, NC) or 3.
std::vector<PhantomClass> default_phantom_classes(int count);

TensorF phantom_volume(double radius, double boundary_width, const std::array<double, 3>& center_offset,
                       bool second_modality);
Manifest generate_phantoms(const PhantomConfig& config, const std::filesystem::path& out_dir);

}  // namespace volnet

#endif
