#include <cmath>
#include <cstring>
#include <limits>
#include <set>

#include "doctest.h"
#include "test_util.hpp"
#include "volnet/data.hpp"

using namespace volnet;
using test::TempDir;

namespace {

Manifest manifest_with(const std::map<Label, int>& sizes) {
  Manifest m;
  for (const auto& [label, n] : sizes)
    for (int i = 0; i < n; ++i) m.subjects.push_back({std::string(to_string(label)) + "_" + std::to_string(i), label, {}});
  return m;
}

std::set<std::string> as_set(const std::vector<std::string>& v) { return {v.begin(), v.end()}; }

void check_split_invariants(const DatasetSplit& split, const Manifest& manifest) {
  for (const auto& [label, ids] : manifest.ids_by_label()) {
    const ClassSplit& c = split.classes.at(label);
    const Index r = Index(ids.size()) - 15;
    CHECK(Index(c.test.size()) == 15);
    CHECK(Index(c.validation.size()) == r / 10);
    CHECK(Index(c.train.size()) == r - r / 10);
    std::set<std::string> all;
    for (const auto* part : {&c.train, &c.validation, &c.test})
      for (const auto& id : *part) CHECK(all.insert(id).second);
    CHECK(all == as_set(ids));
  }
}

// Chi-square statistic against a uniform expectation.
double chi_square(const std::vector<Index>& counts) {
  double total = 0.0;
  for (Index c : counts) total += double(c);
  const double expected = total / double(counts.size());
  double stat = 0.0;
  for (Index c : counts) stat += (double(c) - expected) * (double(c) - expected) / expected;
  return stat;
}

}  // namespace

TEST_CASE("load_manifest") {
  TempDir dir("manifest");
  const std::string header = "subject_id,label,smri_l,smri_r,dti_l,dti_r\n";
  test::spit(dir / "ok.csv", header +
                                 "s1,AD,a/l.vvol,a/r.vvol,a/dl.vvol,a/dr.vvol\r\n"
                                 "s2,NC,b.vvol,c.vvol,,\n"
                                 "s3,MCI,/abs/x.vvol,y.vvol,z.vvol,w.vvol\n");
  const auto m = load_manifest(dir / "ok.csv");
  REQUIRE(m.subjects.size() == 3);
  CHECK(m.subjects[0].label == Label::AD);
  CHECK(m.subjects[0].volumes.at("smri_l") == dir / "a/l.vvol");
  CHECK(m.subjects[1].volumes.size() == 2);
  CHECK(m.subjects[2].volumes.at("smri_l") == "/abs/x.vvol");
  CHECK_THROWS_CODE(require_volumes(m, {"dti_l"}), ErrorCode::InvalidConfig);
  require_volumes(m, {"smri_l", "smri_r"});

  test::spit(dir / "dup.csv", header + "s1,AD,a,b,c,d\ns1,NC,a,b,c,d\n");
  CHECK_THROWS_CODE(load_manifest(dir / "dup.csv"), ErrorCode::DuplicateSubject);
  test::spit(dir / "label.csv", header + "s1,ADX,a,b,c,d\n");
  CHECK_THROWS_CODE(load_manifest(dir / "label.csv"), ErrorCode::InvalidLabel);
  test::spit(dir / "short.csv", header + "s1,AD,a,b\n");
  CHECK_THROWS_CODE(load_manifest(dir / "short.csv"), ErrorCode::ParseError);
  test::spit(dir / "head.csv", "id,label\ns1,AD\n");
  CHECK_THROWS_CODE(load_manifest(dir / "head.csv"), ErrorCode::ParseError);
  CHECK_THROWS_CODE(load_manifest(dir / "missing.csv"), ErrorCode::IoError);

  write_manifest(m, dir / "again.csv");
  const auto again = load_manifest(dir / "again.csv");
  REQUIRE(again.subjects.size() == 3);
  for (std::size_t i = 0; i < 3; ++i) {
    CHECK(again.subjects[i].id == m.subjects[i].id);
    CHECK(again.subjects[i].volumes == m.subjects[i].volumes);
  }
}

TEST_CASE("vvol round trip is bit exact") {
  TempDir dir("vvol");
  std::mt19937_64 rng(11);
  std::uniform_int_distribution<Index> extent(1, 9), rank(1, 5);
  for (int trial = 0; trial < 100; ++trial) {
    Shape shape(std::size_t(rank(rng)));
    for (auto& e : shape) e = extent(rng);
    TensorF t = test::random_tensor<float>(shape, rng, 10.0);
    if (trial == 0) t[0] = -0.0f;
    if (trial == 1) t[0] = std::numeric_limits<float>::denorm_min();
    write_volume(dir / "v.vvol", t);
    const TensorF back = read_volume(dir / "v.vvol");
    REQUIRE(back.shape() == t.shape());
    CHECK(std::memcmp(back.data(), t.data(), std::size_t(t.size()) * 4) == 0);
  }
  const TensorF big = test::random_tensor<float>({1, 33, 33, 33}, rng);
  write_volume(dir / "big.vvol", big);
  CHECK(read_volume(dir / "big.vvol") == big);
}

TEST_CASE("vvol layout and corruption") {
  const TensorF t({2}, {1.0f, -2.0f});
  const std::string bytes = encode_volume(t);
  const std::string header = "VVOL1\n{\"dtype\":\"f32le\",\"shape\":[2]}\n";
  REQUIRE(bytes.size() == header.size() + 1 + 8);
  CHECK(bytes.substr(0, header.size()) == header);
  CHECK(bytes[header.size()] == '\0');
  // 1.0f little-endian is 00 00 80 3F.
  CHECK(bytes.substr(header.size() + 1, 4) == std::string("\x00\x00\x80\x3F", 4));

  std::string bad = bytes;
  bad[0] = 'X';
  CHECK_THROWS_CODE(decode_volume(bad), ErrorCode::FormatError);
  CHECK_THROWS_CODE(decode_volume(bytes.substr(0, bytes.size() - 1)), ErrorCode::FormatError);
  CHECK_THROWS_CODE(decode_volume(bytes + "x"), ErrorCode::FormatError);
  CHECK_THROWS_CODE(decode_volume("VVOL1\n{\"shape\":[2],\"dtype\":\"f64le\"}\n" + std::string(1, '\0')),
                    ErrorCode::FormatError);
  CHECK_THROWS_CODE(decode_volume("VVOL1\n{\"shape\":[0],\"dtype\":\"f32le\"}\n" + std::string(1, '\0')),
                    ErrorCode::FormatError);
  CHECK_THROWS_CODE(decode_volume("VVOL1\n{\"shape\":[2],"), ErrorCode::FormatError);

  // A header without the trailing newline is still accepted.
  const std::string compact = "VVOL1\n{\"shape\":[1],\"dtype\":\"f32le\"}" + std::string(1, '\0') +
                              std::string("\x00\x00\x80\x3F", 4);
  CHECK(decode_volume(compact) == TensorF({1}, {1.0f}));

  TempDir dir("vvol-short");
  const TensorF volume({1, 33, 33, 33});
  const std::string full = encode_volume(volume);
  test::spit(dir / "short.vvol", full.substr(0, full.size() - 100));
  CHECK_THROWS_CODE(read_volume(dir / "short.vvol"), ErrorCode::FormatError);
}

TEST_CASE("split_dataset reproduces the class size table") {
  const auto m = manifest_with({{Label::AD, 53}, {Label::MCI, 228}, {Label::NC, 250}});
  const auto split = split_dataset(m, 42);
  const std::map<Label, std::array<std::size_t, 3>> expected{
      {Label::AD, {35, 3, 15}}, {Label::MCI, {192, 21, 15}}, {Label::NC, {212, 23, 15}}};
  for (const auto& [label, sizes] : expected) {
    const auto& c = split.classes.at(label);
    CHECK(std::array<std::size_t, 3>{c.train.size(), c.validation.size(), c.test.size()} == sizes);
  }
  check_split_invariants(split, m);

  const auto again = split_dataset(m, 42);
  CHECK(split_to_json(again) == split_to_json(split));
  const auto other = split_dataset(m, 43);
  CHECK(other.classes.at(Label::NC).test != split.classes.at(Label::NC).test);
  check_split_invariants(other, m);
}

TEST_CASE("split_dataset boundaries and property over random sizes") {
  const auto sixteen = split_dataset(manifest_with({{Label::AD, 16}, {Label::NC, 16}}), 1);
  CHECK(sixteen.classes.at(Label::AD).test.size() == 15);
  CHECK(sixteen.classes.at(Label::AD).validation.empty());
  CHECK(sixteen.classes.at(Label::AD).train.size() == 1);
  CHECK_THROWS_CODE(split_dataset(manifest_with({{Label::AD, 15}, {Label::NC, 30}}), 1), ErrorCode::InsufficientSubjects);

  std::mt19937_64 rng(5);
  std::uniform_int_distribution<int> size(16, 300);
  for (int trial = 0; trial < 50; ++trial) {
    const auto m = manifest_with({{Label::AD, size(rng)}, {Label::MCI, size(rng)}, {Label::NC, size(rng)}});
    check_split_invariants(split_dataset(m, std::uint64_t(trial)), m);
  }
}

TEST_CASE("reshuffle_train_val keeps the test set and the partition sizes") {
  const auto m = manifest_with({{Label::AD, 53}, {Label::MCI, 228}, {Label::NC, 250}});
  const auto split = split_dataset(m, 3);
  bool any_moved = false;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto next = reshuffle_train_val(split, seed);
    check_split_invariants(next, m);
    for (const auto& [label, c] : split.classes) {
      const auto& n = next.classes.at(label);
      CHECK(n.test == c.test);
      CHECK(n.train.size() == c.train.size());
      auto before = as_set(c.train), after = as_set(n.train);
      before.insert(c.validation.begin(), c.validation.end());
      after.insert(n.validation.begin(), n.validation.end());
      CHECK(before == after);
      any_moved = any_moved || n.validation != c.validation;
    }
  }
  CHECK(any_moved);
  CHECK(split_to_json(epoch_split(split, 3, 0)) == split_to_json(split));
  CHECK(split_to_json(epoch_split(split, 3, 4)) == split_to_json(reshuffle_train_val(split, 7)));
}

TEST_CASE("split json round trip and validation") {
  TempDir dir("split");
  const auto m = manifest_with({{Label::AD, 20}, {Label::NC, 25}});
  const auto split = split_dataset(m, 9);
  save_split(split, dir / "split.json");
  const auto back = load_split(dir / "split.json");
  CHECK(split_to_json(back) == split_to_json(split));
  check_split(back, m);
  CHECK(back.subset("test", {Label::AD, Label::NC}).size() == 30);
  CHECK_THROWS_CODE(back.subset("foo", {Label::AD}), ErrorCode::InvalidConfig);
  CHECK_THROWS_CODE(back.subset("test", {Label::MCI}), ErrorCode::InsufficientSubjects);

  auto doc = split_to_json(split);
  doc["classes"]["NC"]["test"].push_back(doc["classes"]["AD"]["train"][0]);
  CHECK_THROWS_CODE(split_from_json(doc), ErrorCode::FormatError);
  test::spit(dir / "broken.json", "{");
  CHECK_THROWS_CODE(load_split(dir / "broken.json"), ErrorCode::FormatError);

  const auto smaller = manifest_with({{Label::AD, 19}, {Label::NC, 25}});
  CHECK_THROWS_CODE(check_split(split, smaller), ErrorCode::InvalidConfig);
}

TEST_CASE("augment_shift is an exact crop") {
  std::mt19937_64 rng(21);
  const TensorF padded = test::random_tensor<float>({1, 33, 33, 33}, rng);
  const TensorF center = center_crop(padded);
  REQUIRE(center.shape() == Shape{1, 29, 29, 29});
  for (Index z = 0; z < 29; ++z)
    for (Index y = 0; y < 29; ++y)
      for (Index x = 0; x < 29; ++x) REQUIRE(center.at({0, z, y, x}) == padded.at({0, z + 2, y + 2, x + 2}));

  for (int trial = 0; trial < 200; ++trial) {
    const Shift s = draw_shift(rng);
    const TensorF out = augment_shift(padded, s);
    const Index oz = 2 + s.d[0], oy = 2 + s.d[1], ox = 2 + s.d[2];
    bool same = true;
    for (Index z = 0; z < 29; ++z)
      for (Index y = 0; y < 29; ++y)
        for (Index x = 0; x < 29; ++x) same = same && out.at({0, z, y, x}) == padded.at({0, z + oz, y + oy, x + ox});
    CHECK(same);
  }
  CHECK_THROWS_CODE(augment_shift(padded, Shift{{3, 0, 0}}), ErrorCode::CropOutOfBounds);
  CHECK_THROWS_CODE(center_crop(TensorF({1, 29, 29, 29})), ErrorCode::InvalidShape);
}

TEST_CASE("shift offsets are bounded and uniform") {
  std::mt19937_64 rng(8);
  for (int i = 0; i < 10000; ++i)
    for (Index d : draw_shift(rng).d) REQUIRE((d + 2 >= 0 && d + 2 <= 4));
  std::array<std::array<Index, 5>, 3> counts{};
  const int draws = 100000;
  for (int i = 0; i < draws; ++i) {
    const Shift s = draw_shift(rng);
    for (int a = 0; a < 3; ++a) ++counts[a][std::size_t(s.d[a] + 2)];
  }
  for (const auto& axis : counts)
    for (Index c : axis) CHECK(std::abs(double(c) / draws - 0.2) <= 0.02);
}

TEST_CASE("balanced sampler equalizes class frequencies") {
  std::mt19937_64 rng(13);
  {
    const BalancedSampler binary({{"a0", "a1", "a2"}, std::vector<std::string>(40, "b")});
    std::vector<Index> counts(2);
    for (int i = 0; i < 10000; ++i) ++counts[std::size_t(binary.draw(rng).first)];
    for (Index c : counts) CHECK((c / 10000.0 >= 0.48 && c / 10000.0 <= 0.52));
  }
  const auto m = manifest_with({{Label::AD, 35}, {Label::MCI, 192}, {Label::NC, 212}});
  DatasetSplit split;
  for (const auto& [label, ids] : m.ids_by_label()) split.classes[label].train = ids;
  const auto sampler = make_sampler(split, {Label::AD, Label::MCI, Label::NC});
  std::vector<Index> counts(3);
  std::map<std::string, Index> per_subject;
  for (int i = 0; i < 100000; ++i) {
    const auto [k, id] = sampler.draw(rng);
    ++counts[std::size_t(k)];
    ++per_subject[*id];
  }
  for (Index c : counts) CHECK(std::abs(c / 100000.0 - 1.0 / 3.0) <= 0.01);
  // Chi-square critical value for 2 degrees of freedom at alpha 0.01 is -2 ln(0.01).
  CHECK(chi_square(counts) < -2.0 * std::log(0.01));
  // Within a class subjects are uniform: every AD subject is seen about 1/105 of the time.
  for (int i = 0; i < 35; ++i) CHECK(per_subject["AD_" + std::to_string(i)] > 600);

  CHECK_THROWS_CODE(BalancedSampler({{"a"}, {}}), ErrorCode::InsufficientSubjects);
}

TEST_CASE("balanced_batch shares one shift across the ROIs of a draw") {
  TempDir dir("batch");
  Manifest m;
  m.path = dir / "manifest.csv";
  // Voxel value encodes (column, z, y, x) so the crop offset can be read back.
  for (int s = 0; s < 4; ++s) {
    SubjectRecord r{"s" + std::to_string(s), s < 2 ? Label::AD : Label::NC, {}};
    for (std::size_t c = 0; c < 4; ++c) {
      TensorF v({1, 33, 33, 33});
      for (Index i = 0; i < v.size(); ++i) v[i] = float(Index(c) * 100000 + i);
      const auto path = dir / (r.id + kVolumeColumns[c] + ".vvol");
      write_volume(path, v);
      r.volumes[kVolumeColumns[c]] = path;
    }
    m.subjects.push_back(r);
  }
  DatasetSplit split;
  split.classes[Label::AD].train = {"s0", "s1"};
  split.classes[Label::NC].train = {"s2", "s3"};
  VolumeCache cache(m);
  std::mt19937_64 rng(3);
  const std::vector<std::string> columns(kVolumeColumns.begin(), kVolumeColumns.end());
  const Batch batch = balanced_batch(make_sampler(split, {Label::AD, Label::NC}), cache, columns, 15, rng);
  REQUIRE(batch.inputs.size() == 4);
  CHECK(batch.inputs[0].shape() == Shape{15, 1, 29, 29, 29});
  CHECK(batch.one_hot.shape() == Shape{15, 2});
  const Index roi = 29 * 29 * 29;
  for (Index n = 0; n < 15; ++n) {
    const float first = batch.inputs[0][n * roi];
    for (std::size_t c = 1; c < 4; ++c) CHECK(batch.inputs[c][n * roi] - first == float(c) * 100000.0f);
    CHECK(batch.one_hot.at({n, Index(batch.labels[std::size_t(n)])}) == 1.0f);
  }

  const Batch fixed = fixed_batch({"s2", "s0"}, cache, columns, {Label::AD, Label::NC});
  CHECK(fixed.labels == std::vector<int>{1, 0});
  CHECK(fixed.inputs[0][0] == float((2 * 33 + 2) * 33 + 2));
  CHECK_THROWS_CODE(fixed_batch({"s0"}, cache, columns, {Label::MCI, Label::NC}), ErrorCode::InvalidLabel);
  CHECK_THROWS_CODE(fixed_batch({}, cache, columns, {Label::AD, Label::NC}), ErrorCode::InsufficientSubjects);
}

TEST_CASE("epoch_plan") {
  CHECK(epoch_plan(439, 5, 15) == EpochPlan{2195, 146});
  CHECK(epoch_plan(1, 1, 1) == EpochPlan{1, 1});
  CHECK(epoch_plan(100, 5, 15) == EpochPlan{500, 33});
  CHECK_THROWS_CODE(epoch_plan(0, 5, 15), ErrorCode::InvalidConfig);
}

TEST_CASE("task labels put the progressed class first") {
  CHECK(task_labels(Task::AD_NC) == std::vector<Label>{Label::AD, Label::NC});
  CHECK(task_labels(Task::MCI_NC) == std::vector<Label>{Label::MCI, Label::NC});
  CHECK(task_labels(parse_task("AD_MCI_NC")).size() == 3);
  CHECK_THROWS_CODE(parse_task("AD"), ErrorCode::InvalidConfig);
  CHECK_THROWS_CODE(parse_label("ADX"), ErrorCode::InvalidLabel);
}

TEST_CASE("phantoms are deterministic and class-separable") {
  TempDir a("phantom-a"), b("phantom-b");
  PhantomConfig config{default_phantom_classes(2), 16, 5, 0.1};
  const auto ma = generate_phantoms(config, a.path());
  generate_phantoms(config, b.path());
  REQUIRE(ma.subjects.size() == 32);
  for (const auto& s : ma.subjects) {
    REQUIRE(s.volumes.size() == 4);
    for (const auto& [column, path] : s.volumes)
      CHECK(test::slurp(path) == test::slurp(b.path() / path.lexically_relative(a.path())));
  }
  CHECK(test::slurp(a / "manifest.csv") == test::slurp(b / "manifest.csv"));
  const auto loaded = load_manifest(a / "manifest.csv");
  CHECK(loaded.subjects.size() == 32);
  CHECK(read_volume(loaded.subjects[0].volumes.at("dti_r")).shape() == Shape{1, 33, 33, 33});

  // Without noise the mean intensity of each modality separates the classes.
  TempDir clean("phantom-clean");
  config.noise = 0.0;
  const auto mc = generate_phantoms(config, clean.path());
  double ad_max = -1e9, nc_min = 1e9, ad_min2 = 1e9, nc_max2 = -1e9;
  for (const auto& s : mc.subjects) {
    const double m1 = read_volume(s.volumes.at("smri_l")).vec().cast<double>().mean();
    const double m2 = read_volume(s.volumes.at("dti_l")).vec().cast<double>().mean();
    if (s.label == Label::AD) {
      ad_max = std::max(ad_max, m1);
      ad_min2 = std::min(ad_min2, m2);
    } else {
      nc_min = std::min(nc_min, m1);
      nc_max2 = std::max(nc_max2, m2);
    }
  }
  CHECK(ad_max < nc_min);
  CHECK(nc_max2 < ad_min2);  // the second modality is anticorrelated

  config.per_class = 10;
  CHECK_THROWS_CODE(generate_phantoms(config, clean.path()), ErrorCode::InvalidConfig);
  config.per_class = 16;
  test::spit(clean / "file", "x");
  CHECK_THROWS_CODE(generate_phantoms(config, clean / "file" / "sub"), ErrorCode::IoError);
  CHECK_THROWS_CODE(default_phantom_classes(4), ErrorCode::InvalidConfig);
}
