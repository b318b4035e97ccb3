#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>

#include "json.hpp"
#include "lqmfg/manifest.hpp"

namespace fs = std::filesystem;

namespace {

struct CliRun {
  int code = -1;
  std::string output;  // stdout and stderr
};

CliRun run_cli(const std::string& args, const std::string& env = "") {
  const std::string cmd = env + (env.empty() ? "" : " ") + "'" LQMFG_CLI_PATH "' " + args + " 2>&1";
  CliRun r;
  FILE* pipe = popen(cmd.c_str(), "r");
  if (pipe == nullptr) return r;
  char buf[4096];
  while (std::fgets(buf, sizeof buf, pipe) != nullptr) r.output += buf;
  const int status = pclose(pipe);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

fs::path fresh_dir(const std::string& name) {
  const fs::path d = fs::temp_directory_path() / ("lqmfg_cli_" + name + "_" + std::to_string(::getpid()));
  fs::remove_all(d);
  return d;
}

}  // namespace

TEST(Cli, MissingConfigIsAParseError) {
  const CliRun r = run_cli("--config /nonexistent/model.json solve-leader");
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.output.find("ParseError"), std::string::npos) << r.output;
}

TEST(Cli, UnknownSubcommandOptionIsAUsageError) {
  EXPECT_EQ(run_cli("simulate --mode bogus").code, 2);
}

TEST(Cli, ValidateTable1) {
  const CliRun r = run_cli("--config '" LQMFG_TABLE1_CONFIG "' validate");
  EXPECT_EQ(r.code, 0) << r.output;
  EXPECT_NE(r.output.find("all assumptions hold"), std::string::npos);
}

TEST(Cli, GammaBelowCriticalLevelReportsEscape) {
  const fs::path out = fresh_dir("escape");
  const CliRun r = run_cli("--config '" LQMFG_TABLE1_CONFIG "' --out '" + out.string() + "' solve-leader --gamma 1104.68");
  EXPECT_EQ(r.code, 1) << r.output;
  EXPECT_NE(r.output.find("Escape"), std::string::npos) << r.output;
  fs::remove_all(out);
}

TEST(Cli, EnvironmentOverridesFlags) {
  const CliRun r = run_cli("--config '" LQMFG_TABLE1_CONFIG "' validate", "LQMFG_CONFIG=/nonexistent/model.json");
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.output.find("ParseError"), std::string::npos) << r.output;
}

TEST(Cli, ManifestDigestsAreRecomputable) {
  const fs::path out = fresh_dir("manifest");
  const CliRun r = run_cli("--config '" LQMFG_TABLE1_CONFIG "' --out '" + out.string() + "' solve-leader");
  ASSERT_TRUE(fs::exists(out / "manifest.json")) << r.output;
  std::ifstream in(out / "manifest.json");
  const auto m = nlohmann::json::parse(in);
  EXPECT_EQ(m.at("subcommand"), "solve-leader");
  EXPECT_EQ(m.at("config_sha256"), lqmfg::sha256_hex(lqmfg::read_file((out / "config.json").string())));
  EXPECT_TRUE(m.at("status") == "OK" || m.at("status") == "FAILED");
  ASSERT_FALSE(m.at("outputs").empty());
  for (const auto& name : m.at("outputs")) EXPECT_TRUE(fs::exists(out / name.get<std::string>())) << name;
  fs::remove_all(out);
}
