#include <sstream>

#include "doctest.h"
#include "json.hpp"
#include "test_util.hpp"
#include "volnet/cli.hpp"
#include "volnet/data.hpp"

using namespace volnet;
using test::TempDir;

namespace {

struct Run {
  int code = -1;
  std::string out, err;
};

Run volnet_cli(std::vector<std::string> args) {
  args.insert(args.begin(), "volnet");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  Run r;
  r.code = run_cli(int(argv.size()), argv.data(), out, err);
  r.out = out.str();
  r.err = err.str();
  return r;
}

bool contains(const std::string& haystack, const std::string& needle) {
  return haystack.find(needle) != std::string::npos;
}

std::map<std::string, std::string> tree(const std::filesystem::path& root) {
  std::map<std::string, std::string> files;
  for (const auto& e : std::filesystem::recursive_directory_iterator(root))
    if (e.is_regular_file()) files[std::filesystem::relative(e.path(), root).string()] = test::slurp(e.path());
  return files;
}

Index total_from_text(const std::string& text) {
  const auto at = text.find("total parameters ");
  REQUIRE(at != std::string::npos);
  return std::stoll(text.substr(at + 17));
}

void write_config(const std::filesystem::path& path, const nlohmann::json& doc) { test::spit(path, doc.dump()); }

nlohmann::json small_run(const std::string& manifest) {
  return {{"manifest", manifest}, {"preset", "alexnet-2roi-smri"}, {"width", 4}, {"hidden", 8},
          {"tau", 1},             {"eta", 5},                      {"eta0", 5},  {"max_epochs", 1}, {"seed", 3}};
}

}  // namespace

TEST_CASE("cli ci") {
  Run r = volnet_cli({"ci", "--value", "0.933", "--n", "30"});
  CHECK(r.code == 0);
  CHECK(r.out == "0.933 ±0.089 [0.844, 1.022]\n");
  CHECK(contains(volnet_cli({"ci", "--value", "0.689", "--n", "45"}).out, "±0.135"));
  CHECK(contains(volnet_cli({"ci", "--value", "1.0", "--n", "30"}).out, "±0.000"));
  CHECK(contains(volnet_cli({"ci", "--value", "0.5", "--n", "30", "--theta", "2.576"}).out, "±0.235"));
  CHECK(volnet_cli({"ci", "--value", "1.5", "--n", "30"}).code == 2);
  CHECK(volnet_cli({"ci", "--value", "0.5", "--n", "0"}).code == 2);
  CHECK(volnet_cli({"ci", "--value", "0.5"}).code == 2);
  CHECK(volnet_cli({"ci", "--value", "abc", "--n", "3"}).code == 2);
}

TEST_CASE("cli usage errors") {
  CHECK(volnet_cli({}).code == 2);
  CHECK(volnet_cli({"frobnicate"}).code == 2);
  CHECK(volnet_cli({"--help"}).code == 0);
}

TEST_CASE("cli inspect") {
  const Run both = volnet_cli({"inspect", "--preset", "proposed-4roi", "--preset", "alexnet-4roi"});
  CHECK(both.code == 0);
  const auto at = both.out.find("ratio alexnet-4roi / proposed-4roi = ");
  REQUIRE(at != std::string::npos);
  CHECK(std::stod(both.out.substr(at + 37)) >= 5.0);

  const Run four = volnet_cli({"inspect", "--preset", "proposed-4roi"});
  const Run two = volnet_cli({"inspect", "--preset", "proposed-2roi-smri"});
  CHECK(total_from_text(two.out) < total_from_text(four.out));
  CHECK(contains(four.out, "29x29x29"));

  const Run json = volnet_cli({"inspect", "--preset", "proposed-4roi", "--json"});
  CHECK(json.code == 0);
  const auto doc = nlohmann::json::parse(json.out);
  CHECK(doc.at("networks").at(0).at("total_params").get<Index>() == total_from_text(four.out));

  const Run wide = volnet_cli({"inspect", "--preset", "proposed-4roi", "--f0", "16"});
  CHECK(total_from_text(wide.out) > total_from_text(four.out));

  CHECK(volnet_cli({"inspect", "--preset", "resnet"}).code == 2);
  CHECK(volnet_cli({"inspect", "--preset", "proposed-4roi", "--f0", "2"}).code == 2);
}

TEST_CASE("cli synth") {
  TempDir dir("cli-synth");
  const Run a = volnet_cli({"synth", "--out", (dir / "a").string(), "--per-class", "16", "--seed", "5"});
  CHECK(a.code == 0);
  CHECK(contains(a.out, "AD 16"));
  CHECK(contains(a.out, "NC 16"));
  const auto files = tree(dir / "a");
  Index volumes = 0;
  for (const auto& [name, bytes] : files) volumes += name.ends_with(".vvol");
  CHECK(volumes == 2 * 16 * 4);
  CHECK(files.contains("manifest.csv"));

  CHECK(volnet_cli({"synth", "--out", (dir / "b").string(), "--per-class", "16", "--seed", "5"}).code == 0);
  CHECK(tree(dir / "b") == files);
  CHECK(volnet_cli({"synth", "--out", (dir / "c").string(), "--per-class", "16", "--seed", "6"}).code == 0);
  CHECK(tree(dir / "c") != files);

  CHECK(volnet_cli({"synth", "--out", (dir / "d").string(), "--per-class", "10"}).code == 2);
  CHECK(volnet_cli({"synth", "--out", (dir / "d").string(), "--classes", "4"}).code == 2);
  CHECK(volnet_cli({"synth"}).code == 2);
  test::spit(dir / "file", "x");
  CHECK(volnet_cli({"synth", "--out", (dir / "file" / "sub").string(), "--per-class", "16"}).code == 3);
}

TEST_CASE("cli train, resume and eval") {
  TempDir dir("cli-train");
  REQUIRE(volnet_cli({"synth", "--out", (dir / "data").string(), "--per-class", "20"}).code == 0);
  const std::string manifest = (dir / "data" / "manifest.csv").string();

  SUBCASE("configuration and input errors") {
    auto tiny = small_run(manifest);
    tiny["eta"] = 100;
    write_config(dir / "tiny.json", tiny);
    CHECK(volnet_cli({"train", "--config", (dir / "tiny.json").string(), "--out", (dir / "o").string()}).code == 2);

    write_config(dir / "missing.json", small_run((dir / "nowhere.csv").string()));
    const Run missing = volnet_cli({"train", "--config", (dir / "missing.json").string(), "--out", (dir / "o").string()});
    CHECK(missing.code == 3);
    CHECK(contains(missing.err, "nowhere.csv"));

    auto unknown = small_run(manifest);
    unknown["learning_rate"] = 0.1;
    write_config(dir / "unknown.json", unknown);
    CHECK(volnet_cli({"train", "--config", (dir / "unknown.json").string(), "--out", (dir / "o").string()}).code == 2);

    test::spit(dir / "broken.json", "{\"manifest\": ");
    CHECK(volnet_cli({"train", "--config", (dir / "broken.json").string(), "--out", (dir / "o").string()}).code == 2);
    CHECK(volnet_cli({"train", "--config", (dir / "absent.json").string(), "--out", (dir / "o").string()}).code == 3);
  }

  SUBCASE("artifacts, frozen split, resume and eval") {
    // Relative manifest paths resolve against the configuration file.
    write_config(dir / "run.json", small_run("data/manifest.csv"));
    const Run first = volnet_cli({"train", "--config", (dir / "run.json").string(), "--out", (dir / "out").string()});
    REQUIRE_MESSAGE(first.code == 0, first.err);
    for (const char* name : {"best.ckpt", "last.ckpt", "history.csv", "report.json", "split.json", "summary.csv"})
      CHECK(std::filesystem::exists(dir / "out" / name));
    CHECK(std::filesystem::exists(dir / "data" / "split.json"));
    CHECK(contains(first.out, "froze split"));
    CHECK(contains(first.out, "AD_NC alexnet-2roi-smri test n=30 | accuracy "));
    const auto report = nlohmann::json::parse(test::slurp(dir / "out" / "report.json"));
    CHECK(report.at("n") == 30);
    CHECK(report.at("metrics").contains("sensitivity"));

    // A second run reuses the frozen split and reproduces every artifact.
    const Run second = volnet_cli({"train", "--config", (dir / "run.json").string(), "--out", (dir / "again").string()});
    REQUIRE(second.code == 0);
    CHECK(contains(second.out, "using frozen split"));
    for (const char* name : {"history.csv", "report.json", "split.json", "best.ckpt"})
      CHECK(test::slurp(dir / "out" / name) == test::slurp(dir / "again" / name));

    // Resume with a larger epoch budget equals a two-epoch run.
    auto two = small_run("data/manifest.csv");
    two["max_epochs"] = 2;
    write_config(dir / "two.json", two);
    const Run resumed = volnet_cli({"train", "--config", (dir / "two.json").string(), "--out", (dir / "out").string(),
                                    "--resume", (dir / "out" / "last.ckpt").string()});
    REQUIRE_MESSAGE(resumed.code == 0, resumed.err);
    CHECK(contains(resumed.out, "resuming after epoch 1"));
    REQUIRE(volnet_cli({"train", "--config", (dir / "two.json").string(), "--out", (dir / "fresh").string()}).code == 0);
    CHECK(test::slurp(dir / "out" / "history.csv") == test::slurp(dir / "fresh" / "history.csv"));
    CHECK(test::slurp(dir / "out" / "report.json") == test::slurp(dir / "fresh" / "report.json"));

    auto reseeded = two;
    reseeded["seed"] = 4;
    write_config(dir / "reseeded.json", reseeded);
    CHECK(volnet_cli({"train", "--config", (dir / "reseeded.json").string(), "--out", (dir / "x").string(),
                      "--resume", (dir / "out" / "last.ckpt").string()})
              .code == 2);

    const std::vector<std::string> eval{"eval",       "--checkpoint", (dir / "fresh" / "best.ckpt").string(),
                                        "--manifest", manifest,       "--split",
                                        (dir / "fresh" / "split.json").string()};
    const Run e1 = volnet_cli(eval);
    REQUIRE_MESSAGE(e1.code == 0, e1.err);
    CHECK(e1.out == volnet_cli(eval).out);
    const auto e1_json = nlohmann::json::parse(e1.out.substr(0, e1.out.rfind("}") + 1));
    CHECK(e1_json.at("metrics") == nlohmann::json::parse(test::slurp(dir / "fresh" / "report.json")).at("metrics"));

    auto with = [&](std::vector<std::string> extra) {
      auto args = eval;
      args.insert(args.end(), extra.begin(), extra.end());
      return volnet_cli(args);
    };
    const Run train_subset = with({"--subset", "train", "--out", (dir / "train_report.json").string()});
    CHECK(train_subset.code == 0);
    CHECK(nlohmann::json::parse(test::slurp(dir / "train_report.json")).at("subset") == "train");
    CHECK(with({"--subset", "foo"}).code == 2);

    const std::string bytes = test::slurp(dir / "fresh" / "best.ckpt");
    test::spit(dir / "bad.ckpt", bytes.substr(0, bytes.size() / 2));
    auto bad = eval;
    bad[2] = (dir / "bad.ckpt").string();
    CHECK(volnet_cli(bad).code == 2);
    bad[2] = (dir / "nothing.ckpt").string();
    CHECK(volnet_cli(bad).code == 3);
  }
}
