#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>

#include "lfm/experiment.hpp"

using namespace lfm;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

fs::path fresh_dir(const std::string& name) {
  fs::path p = fs::temp_directory_path() / ("lfm_test_" + name);
  fs::remove_all(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

json small_discretization() {
  return {{"kind", "discretization-sweep"},
          {"seeds", {1, 2}},
          {"target", {{"atoms", {{0.5}}}}},
          {"horizon", 0.9},
          {"eval_samples", 64},
          {"discretization", {{"step_counts", {8, 16, 32}}}}};
}

json small_training() {
  return {{"kind", "train-latent"},
          {"seeds", {3}},
          {"target", {{"atoms", {{0.2}, {0.8}}}}},
          {"n", 32},
          {"eval_samples", 32},
          {"eval_mc", 200},
          {"training", {{"epochs", 3}, {"batch_size", 16}, {"lipschitz_pairs", 2}, {"eval_mc", 50}}}};
}

int run_cli(const std::string& args) {
  const int status = std::system((std::string(LFM_CLI_PATH) + " " + args + " > /dev/null 2>&1").c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

}  // namespace

TEST(GitBlobHash, MatchesGitForKnownContents) {
  // printf 'hello\n' | git hash-object --stdin
  EXPECT_EQ(git_blob_sha1("hello\n"), "ce013625030ba8dba906f756967f9e9ca394464a");
  EXPECT_EQ(git_blob_sha1(""), "e69de29bb2d1d6434b8b29ae775ad8c2e48c5391");
}

TEST(ConfigParse, ResolvedConfigRoundTrips) {
  const ExperimentConfig c = parse_config(small_training());
  const json resolved = to_json(c);
  EXPECT_EQ(to_json(parse_config(resolved)), resolved);
  EXPECT_EQ(resolved.at("training").at("epochs"), 3);
  EXPECT_EQ(resolved.at("d"), 1);
}

TEST(ConfigParse, FieldLevelMessages) {
  auto message = [](json j) {
    try {
      parse_config(j);
    } catch (const ConfigError& e) {
      return std::string(e.what());
    }
    return std::string("no error");
  };
  json j = small_training();
  j["training"]["epochs"] = -1;
  EXPECT_EQ(message(j).rfind("training.epochs:", 0), 0u) << message(j);
  j = small_training();
  j["horizon"] = 1.2;
  EXPECT_EQ(message(j).rfind("horizon:", 0), 0u);
  j = small_training();
  j.erase("target");
  EXPECT_EQ(message(j).rfind("target:", 0), 0u);
  j = small_training();
  j["flow_network"] = {{"layers", 2}, {"depth", 3}};
  EXPECT_EQ(message(j).rfind("flow_network.depth: unknown field", 0), 0u);
  j = small_training();
  j["d"] = 2;
  EXPECT_EQ(message(j).rfind("d:", 0), 0u);
}

TEST(ConfigParse, SeedsMustBeExplicit) {
  json j = small_training();
  j.erase("seeds");
  EXPECT_THROW(parse_config(j), ConfigError);
  j["seeds"] = json::array();
  EXPECT_THROW(parse_config(j), ConfigError);
  j["seeds"] = 7;
  EXPECT_EQ(parse_config(j).seeds, std::vector<std::uint64_t>{7});
}

TEST(ConfigParse, UnknownKindIsDistinguished) {
  json j = small_training();
  j["kind"] = "teleport";
  EXPECT_THROW(parse_config(j), UnknownKindError);
}

TEST(ConfigParse, EndToEndChecksAmbientDimension) {
  json j{{"kind", "end-to-end"}, {"seeds", {1}}, {"data", "curve"}, {"D", 8}};
  EXPECT_THROW(parse_config(j), ConfigError);
  j["D"] = 4;
  EXPECT_NO_THROW(parse_config(j));
  j["data"] = "sphere";
  EXPECT_THROW(parse_config(j), ConfigError);
}

TEST(ConfigParse, RateSweepNeedsValidAxisAndTwoValues) {
  json j = small_discretization();
  j["kind"] = "rate-sweep";
  j["sweep"] = {{"base", "discretization-sweep"}, {"axis", "n"}, {"values", {1, 2}}};
  EXPECT_THROW(parse_config(j), ConfigError);
  j["sweep"]["axis"] = "steps";
  j["sweep"]["values"] = {8};
  EXPECT_THROW(parse_config(j), ConfigError);
  j["sweep"]["values"] = {8, 16};
  EXPECT_NO_THROW(parse_config(j));
}

TEST(Run, ManifestListsEveryArtifactWithMatchingHash) {
  const fs::path out = fresh_dir("manifest");
  const RunOutcome r = run_experiment(parse_config(small_training()), out);
  ASSERT_EQ(r.exit_code, kExitOk) << r.error;
  EXPECT_TRUE(verify_manifest(out).empty());
  const json m = json::parse(slurp(out / "manifest.json"));
  EXPECT_EQ(m.at("status"), "complete");
  EXPECT_EQ(m.at("library").at("name"), kLibraryName);
  EXPECT_FALSE(m.at("noise_qualified").get<bool>());
  EXPECT_TRUE(fs::exists(out / "metrics/summary.csv"));
  EXPECT_TRUE(fs::exists(out / "metrics/training_seed3.csv"));
  EXPECT_TRUE(fs::exists(out / "checkpoints/velocity_seed3.json"));

  std::ofstream(out / "metrics/summary.csv", std::ios::app) << "tampered\n";
  EXPECT_EQ(verify_manifest(out).size(), 1u);
}

TEST(Run, RerunIsByteIdentical) {
  const ExperimentConfig cfg = parse_config(small_training());
  const fs::path a = fresh_dir("rerun_a"), b = fresh_dir("rerun_b");
  ASSERT_EQ(run_experiment(cfg, a).exit_code, kExitOk);
  ASSERT_EQ(run_experiment(cfg, b).exit_code, kExitOk);
  for (const auto& entry : fs::recursive_directory_iterator(a / "metrics")) {
    if (!entry.is_regular_file()) continue;
    const fs::path rel = fs::relative(entry.path(), a);
    EXPECT_EQ(slurp(entry.path()), slurp(b / rel)) << rel;
  }
}

TEST(Run, CsvUsesSeventeenDigitsAndHeader) {
  const fs::path out = fresh_dir("csv");
  ASSERT_EQ(run_experiment(parse_config(small_discretization()), out).exit_code, kExitOk);
  std::ifstream in(out / "metrics/discretization.csv");
  std::string header, row;
  std::getline(in, header);
  std::getline(in, row);
  EXPECT_EQ(header, "seed,steps,max_step,coupling_w2,exact_w2");
  // The first Euler step, 0.9 / 8 up to rounding, printed with 17 significant digits.
  EXPECT_EQ(row.rfind("1,8,0.11250000000000004,", 0), 0u) << row;
}

TEST(Run, DivergenceLeavesPartialManifest) {
  json j = small_training();
  j["training"]["learning_rate"] = 1e300;
  const fs::path out = fresh_dir("diverge");
  const RunOutcome r = run_experiment(parse_config(j), out);
  EXPECT_EQ(r.exit_code, kExitRuntimeFailure);
  EXPECT_TRUE(r.partial);
  const json m = json::parse(slurp(out / "manifest.json"));
  EXPECT_EQ(m.at("status"), "partial");
  EXPECT_TRUE(m.contains("error"));
  EXPECT_TRUE(verify_manifest(out).empty());
}

TEST(Sweep, StepsOnSingleAtomHasSlopeNearMinusOne) {
  const fs::path out = fresh_dir("sweep_steps");
  const ExperimentConfig cfg = parse_config(small_discretization());
  ASSERT_EQ(run_sweep(cfg, SweepAxis::Steps, {8, 16, 32, 64, 128}, out).exit_code, kExitOk);
  std::ifstream in(out / "metrics/sweep.csv");
  std::string line;
  std::getline(in, line);
  EXPECT_EQ(line, "axis,value,seed,quantity,metric,stderr,slope");
  std::size_t rows = 0;
  while (std::getline(in, line)) {
    ++rows;
    const double slope = std::stod(line.substr(line.rfind(',') + 1));
    EXPECT_GE(slope, -1.3);
    EXPECT_LE(slope, -0.7);
  }
  EXPECT_EQ(rows, 5u * 2u * 2u);  // values x seeds x quantities
  EXPECT_TRUE(json::parse(slurp(out / "manifest.json")).at("noise_qualified").get<bool>());
}

TEST(Sweep, RejectsFewerThanTwoValuesAndInvalidAxes) {
  const ExperimentConfig cfg = parse_config(small_discretization());
  const fs::path out = fresh_dir("sweep_bad");
  EXPECT_THROW(run_sweep(cfg, SweepAxis::Steps, {8}, out), ConfigError);
  EXPECT_THROW(run_sweep(cfg, SweepAxis::N, {8, 16}, out), ConfigError);
  EXPECT_THROW(run_sweep(cfg, SweepAxis::Steps, {8, 2.5}, out), ConfigError);
  EXPECT_FALSE(fs::exists(out));
}

TEST(Sweep, SingleSeedIsNotNoiseQualified) {
  json j = small_discretization();
  j["seeds"] = {4};
  const fs::path out = fresh_dir("sweep_single");
  ASSERT_EQ(run_sweep(parse_config(j), SweepAxis::Horizon, {0.8, 0.9}, out).exit_code, kExitOk);
  EXPECT_FALSE(json::parse(slurp(out / "manifest.json")).at("noise_qualified").get<bool>());
}

TEST(Cli, UnknownKindExitsTwoWithoutFiles) {
  const fs::path dir = fresh_dir("cli_unknown");
  fs::create_directories(dir);
  std::ofstream(dir / "cfg.json") << R"({"kind": "teleport", "seeds": [1]})";
  EXPECT_EQ(run_cli("run " + (dir / "cfg.json").string() + " --out " + (dir / "out").string()), 2);
  EXPECT_FALSE(fs::exists(dir / "out"));
}

TEST(Cli, InvalidConfigExitsNonzeroWithoutFiles) {
  const fs::path dir = fresh_dir("cli_invalid");
  fs::create_directories(dir);
  std::ofstream(dir / "cfg.json") << R"({"kind": "train-latent", "seeds": [1]})";
  EXPECT_EQ(run_cli("run " + (dir / "cfg.json").string() + " --out " + (dir / "out").string()), 1);
  EXPECT_FALSE(fs::exists(dir / "out"));
}

TEST(Cli, RunAndSweepWriteManifests) {
  const fs::path dir = fresh_dir("cli_ok");
  fs::create_directories(dir);
  std::ofstream(dir / "cfg.json") << small_discretization().dump();
  EXPECT_EQ(run_cli("run " + (dir / "cfg.json").string() + " --out " + (dir / "run").string()), 0);
  EXPECT_TRUE(verify_manifest(dir / "run").empty());
  EXPECT_EQ(run_cli("sweep " + (dir / "cfg.json").string() + " --axis steps --values 8,16 --out " +
                    (dir / "sweep").string()),
            0);
  EXPECT_TRUE(fs::exists(dir / "sweep/metrics/sweep.csv"));
  EXPECT_NE(run_cli("sweep " + (dir / "cfg.json").string() + " --axis steps --values 8 --out " +
                    (dir / "sweep1").string()),
            0);
}
