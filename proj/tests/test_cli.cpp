/*
 * Copyright 2026 The stable_ndde Authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <sstream>
#include <string>

#include <gtest/gtest.h>
#include <sys/wait.h>

#include "stable_ndde/cli.hpp"

namespace fs = std::filesystem;
using stable_ndde::cli::run;
using nlohmann::json;

namespace {

class CliTest : public ::testing::Test {
protected:
  fs::path dir;

  void SetUp() override {
    const auto* info = ::testing::UnitTest::GetInstance()->current_test_info();
    dir = fs::temp_directory_path() / ("stable_ndde_cli_" + std::string(info->name()));
    fs::remove_all(dir);
    fs::create_directories(dir);
  }
  void TearDown() override { fs::remove_all(dir); }

  fs::path write_config(const std::string& name, const json& j) const {
    const auto p = dir / name;
    std::ofstream(p) << j.dump(1);
    return p;
  }

  /// Runs the installed binary; returns its exit status.
  int exec(const std::string& args, const std::string& tag = "run") const {
    const std::string cmd = std::string(STABLE_NDDE_CLI_PATH) + " " + args + " > " + (dir / (tag + ".out")).string() +
                            " 2> " + (dir / (tag + ".err")).string();
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  }

  std::string slurp(const fs::path& p) const {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
  }
};

json tiny_ndde() {
  return {{"experiment", "ndde"},
          {"system", "oscillator"},
          {"seed", 3},
          {"data",
           {{"initial_conditions", {{1.0, 0.0}}},
            {"horizon", 2.0},
            {"observations", 21},
            {"noise_std", 0.05},
            {"history_length", 0.5},
            {"solver_step", 0.01}}},
          {"test_data", {{"initial_conditions", {{0.0, 1.0}}}, {"horizon", 2.0}, {"observations", 21}, {"history_length", 0.5}}},
          {"model", {{"tau", 0.2}, {"K", 2}, {"hidden", {6, 6}}, {"output_scale", 0.5}}},
          {"train", {{"iterations", 4}, {"solver_step", 0.05}}}};
}

json tiny_feedback() {
  return {{"experiment", "feedback"},
          {"system", "inverted-pendulum"},
          {"seed", 1},
          {"system_params", {{"mass", 0.15}, {"length", 0.5}}},
          {"feedback", {{"delay", 0.03}, {"r_weight", 0.1}}},
          {"razumikhin", {{"tau_V", 0.01}, {"K_V", 5}, {"alpha", 1.0}, {"q", 1.5}}},
          {"lrf", {{"hidden", {6, 6}}}},
          {"train", {{"iterations", 3}, {"lrf_batch", 16}, {"histories_per_iteration", 2}, {"stab_horizon", 0.5},
                     {"solver_step", 0.005}, {"lr", {{"kind", "exponential"}, {"start", 0.05}, {"end", 1e-3}}}}},
          {"check", {{"histories", 3}, {"horizon", 0.5}, {"check_step", 0.01}}}};
}

} // namespace

TEST_F(CliTest, MissingCommandIsUserError) { EXPECT_EQ(exec(""), 1); }

TEST_F(CliTest, UnknownFlagPrintsUsageAndExitsOne) {
  const auto cfg = write_config("c.json", tiny_ndde());
  EXPECT_EQ(exec("generate-data --config " + cfg.string() + " --bogus 1"), 1);
  const std::string err = slurp(dir / "run.err");
  EXPECT_NE(err.find("--bogus"), std::string::npos);
  EXPECT_NE(err.find("Usage"), std::string::npos);
}

TEST_F(CliTest, HelpExitsZero) { EXPECT_EQ(exec("--help"), 0); }

TEST_F(CliTest, MissingConfigFileIsUserError) {
  EXPECT_EQ(exec("generate-data --config " + (dir / "nope.json").string()), 1);
}

TEST_F(CliTest, MalformedConfigIsUserError) {
  std::ofstream(dir / "bad.json") << "{ not json";
  EXPECT_EQ(exec("generate-data --config " + (dir / "bad.json").string() + " --out " + (dir / "o").string()), 1);
}

TEST_F(CliTest, UnknownSystemIsUserError) {
  const auto cfg = write_config("c.json", tiny_ndde());
  EXPECT_EQ(exec("generate-data --config " + cfg.string() + " --system warp-drive --out " + (dir / "o").string()), 1);
}

TEST_F(CliTest, GenerateDataIsByteIdenticalForEqualSeeds) {
  const auto cfg = write_config("c.json", tiny_ndde());
  ASSERT_EQ(exec("generate-data --config " + cfg.string() + " --seed 11 --out " + (dir / "a").string()), 0);
  ASSERT_EQ(exec("generate-data --config " + cfg.string() + " --seed 11 --out " + (dir / "b").string()), 0);
  int files = 0;
  for (const auto& e : fs::recursive_directory_iterator(dir / "a")) {
    if (!e.is_regular_file()) continue;
    const auto rel = fs::relative(e.path(), dir / "a");
    ASSERT_TRUE(fs::exists(dir / "b" / rel)) << rel;
    EXPECT_EQ(slurp(e.path()), slurp(dir / "b" / rel)) << rel;
    ++files;
  }
  EXPECT_EQ(files, 4); // manifest + one trajectory, for train and test
}

TEST_F(CliTest, SeedOverrideChangesNoise) {
  const auto cfg = write_config("c.json", tiny_ndde());
  std::ostringstream out, err;
  ASSERT_EQ(run({"generate-data", "--config", cfg.string(), "--seed", "1", "--out", (dir / "a").string()}, out, err), 0);
  ASSERT_EQ(run({"generate-data", "--config", cfg.string(), "--seed", "2", "--out", (dir / "b").string()}, out, err), 0);
  EXPECT_NE(slurp(dir / "a" / "dataset" / "traj_000.csv"), slurp(dir / "b" / "dataset" / "traj_000.csv"));
}

TEST_F(CliTest, DatasetCsvHasHeaderAndRows) {
  const auto cfg = write_config("c.json", tiny_ndde());
  std::ostringstream out, err;
  ASSERT_EQ(run({"generate-data", "--config", cfg.string(), "--out", dir.string()}, out, err), 0);
  const auto ds = stable_ndde::load_dataset(dir / "dataset");
  ASSERT_EQ(ds.size(), 1u);
  EXPECT_EQ(ds.trajectories[0].prediction.size(), 21);
  EXPECT_GT(ds.trajectories[0].history.size(), 0);
  std::ifstream in(dir / "dataset" / "traj_000.csv");
  std::string header;
  std::getline(in, header);
  EXPECT_EQ(header, "t,y1");
  const json manifest = stable_ndde::read_json_file(dir / "dataset" / "manifest.json");
  EXPECT_DOUBLE_EQ(manifest.at("noise_std").get<double>(), 0.05);
  EXPECT_EQ(manifest.at("trajectories")[0].at("split"), "train");
}

TEST_F(CliTest, SystemOverrideChangesDimension) {
  json j = tiny_ndde();
  j["data"]["initial_conditions"] = {{2.0, 2.0}};
  j.erase("test_data");
  const auto cfg = write_config("c.json", j);
  std::ostringstream out, err;
  ASSERT_EQ(run({"generate-data", "--config", cfg.string(), "--system", "lotka-volterra", "--out", dir.string()}, out, err), 0)
      << err.str();
  const auto ds = stable_ndde::load_dataset(dir / "dataset");
  EXPECT_EQ(ds.dim, 1); // prey only
  EXPECT_GT(ds.trajectories[0].prediction.values.minCoeff(), 0.0);
}

TEST_F(CliTest, FitGpWritesInterpolants) {
  const auto cfg = write_config("c.json", tiny_ndde());
  std::ostringstream out, err;
  ASSERT_EQ(run({"fit-gp", "--config", cfg.string(), "--out", dir.string()}, out, err), 0) << err.str();
  const json gp = stable_ndde::read_json_file(dir / "gp" / "train.json");
  ASSERT_EQ(gp.size(), 1u);
  EXPECT_TRUE(gp[0].contains("initial"));
  EXPECT_TRUE(fs::exists(dir / "gp" / "test.json"));
  EXPECT_TRUE(fs::exists(dir / "gp" / "train_traj_000.csv"));
}

TEST_F(CliTest, TrainEvaluateExportPlots) {
  const auto cfg = write_config("c.json", tiny_ndde());
  std::ostringstream out, err;
  ASSERT_EQ(run({"train-ndde", "--config", cfg.string(), "--out", dir.string()}, out, err), 0) << err.str();
  EXPECT_TRUE(fs::exists(dir / "model" / "ndde_final.json"));
  ASSERT_EQ(run({"evaluate", "--config", cfg.string(), "--out", dir.string()}, out, err), 0) << err.str();
  const json metrics = stable_ndde::read_json_file(dir / "metrics.json");
  EXPECT_TRUE(metrics.at("train_mse").is_number());
  EXPECT_TRUE(metrics.at("test_mse").is_number());
  EXPECT_TRUE(fs::exists(dir / "predictions" / "train_traj_000.csv"));
  ASSERT_EQ(run({"export-plots", "--config", cfg.string(), "--out", dir.string()}, out, err), 0) << err.str();

  std::ifstream in(dir / "plots" / "loss_curve.csv");
  std::string line;
  std::getline(in, line);
  EXPECT_EQ(line, "iteration,train_loss,lrf_loss,lr");
  int rows = 0;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    EXPECT_EQ(std::count(line.begin(), line.end(), ','), 3);
    EXPECT_EQ(line.substr(0, line.find(',')), std::to_string(rows));
    ++rows;
  }
  EXPECT_EQ(rows, 4);
}

TEST_F(CliTest, TrainStableNddeWritesBothNetworks) {
  json j = tiny_ndde();
  j["experiment"] = "stable-ndde";
  j["razumikhin"] = {{"tau_V", 0.2}, {"K_V", 3}, {"alpha", 0.01}, {"q", 1.01}};
  j["lrf"] = {{"hidden", {6, 6}}};
  j["train"]["lrf_batch"] = 8;
  j["train"]["histories_per_iteration"] = 2;
  j["train"]["stab_horizon"] = 1.0;
  j["train"]["iterations"] = 2;
  j["check"] = {{"histories", 2}, {"horizon", 1.0}};
  const auto cfg = write_config("c.json", j);
  std::ostringstream out, err;
  ASSERT_EQ(run({"train-stable-ndde", "--config", cfg.string(), "--out", dir.string()}, out, err), 0) << err.str();
  EXPECT_TRUE(fs::exists(dir / "model" / "ndde_final.json"));
  EXPECT_TRUE(fs::exists(dir / "model" / "lrf_final.json"));
  ASSERT_EQ(run({"certify", "--config", cfg.string(), "--out", dir.string()}, out, err), 0) << err.str();
  const json rep = stable_ndde::read_json_file(dir / "certificate.json");
  EXPECT_EQ(rep.at("residuals").size(), 2u);
}

TEST_F(CliTest, FeedbackCertifyReportsResidual) {
  const auto cfg = write_config("c.json", tiny_feedback());
  std::ostringstream out, err;
  ASSERT_EQ(run({"train-feedback", "--config", cfg.string(), "--out", dir.string()}, out, err), 0) << err.str();
  const json policy = stable_ndde::read_json_file(dir / "model" / "policy_final.json");
  EXPECT_EQ(policy.at("gains").size(), 2u);
  EXPECT_DOUBLE_EQ(policy.at("delay").get<double>(), 0.03);
  ASSERT_EQ(run({"certify", "--config", cfg.string(), "--out", dir.string()}, out, err), 0) << err.str();
  const json rep = stable_ndde::read_json_file(dir / "certificate.json");
  EXPECT_TRUE(rep.at("max_residual").is_number());
  EXPECT_GE(rep.at("max_residual").get<double>(), 0.0);
  EXPECT_EQ(rep.at("residuals").size(), 3u);
  EXPECT_DOUBLE_EQ(rep.at("q").get<double>(), 1.5);
  ASSERT_EQ(run({"evaluate", "--config", cfg.string(), "--out", dir.string()}, out, err), 0) << err.str();
  EXPECT_EQ(stable_ndde::read_json_file(dir / "metrics.json").at("closed_loop_final_ratio").size(), 3u);
}

TEST_F(CliTest, CertifyWithoutLrfIsUserError) {
  const auto cfg = write_config("c.json", tiny_ndde());
  EXPECT_EQ(exec("certify --config " + cfg.string() + " --out " + dir.string()), 1);
}

TEST_F(CliTest, EvaluateWithoutCheckpointIsUserError) {
  const auto cfg = write_config("c.json", tiny_ndde());
  EXPECT_EQ(exec("evaluate --config " + cfg.string() + " --out " + dir.string()), 1);
}

TEST_F(CliTest, ExperimentMismatchIsUserError) {
  const auto cfg = write_config("c.json", tiny_ndde());
  EXPECT_EQ(exec("train-feedback --config " + cfg.string() + " --out " + dir.string()), 1);
}

TEST_F(CliTest, DivergentTrainingExitsTwo) {
  json j = tiny_ndde();
  j["model"]["output_scale"] = 200.0;
  j["train"]["divergence_bound"] = 1.5;
  const auto cfg = write_config("c.json", j);
  EXPECT_EQ(exec("train-ndde --config " + cfg.string() + " --out " + dir.string()), 2);
  EXPECT_TRUE(stable_ndde::read_json_file(dir / "metrics.json").at("aborted").get<bool>());
}

TEST_F(CliTest, InvalidHyperparameterIsUserError) {
  json j = tiny_ndde();
  j["train"]["iterations"] = -1;
  const auto cfg = write_config("c.json", j);
  EXPECT_EQ(exec("train-ndde --config " + cfg.string() + " --out " + dir.string()), 1);
}

TEST_F(CliTest, ShippedConfigsParse) {
  int count = 0;
  for (const auto& e : fs::directory_iterator(STABLE_NDDE_CONFIG_DIR)) {
    if (e.path().extension() != ".json") continue;
    EXPECT_NO_THROW(stable_ndde::cli::parse_config(stable_ndde::read_json_file(e.path()))) << e.path();
    ++count;
  }
  EXPECT_GE(count, 6);
}
