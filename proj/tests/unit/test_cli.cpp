#include <gtest/gtest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <sys/wait.h>

#include "relikit/io.hpp"
#include "relikit/sim.hpp"

using namespace relikit;
namespace fs = std::filesystem;

namespace {

struct Run {
  int code;
  std::string out;
};

Run run(const std::string& args) {
  const std::string cmd = std::string(RELIKIT_CLI_PATH) + " " + args + " 2>/dev/null";
  FILE* pipe = popen(cmd.c_str(), "r");
  std::string out;
  char buf[4096];
  std::size_t n;
  while ((n = fread(buf, 1, sizeof buf, pipe)) > 0) out.append(buf, n);
  int status = pclose(pipe);
  return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, out};
}

fs::path scratch(const std::string& name) {
  auto p = fs::temp_directory_path() / "relikit_cli_test" / name;
  fs::remove_all(p);
  fs::create_directories(p.parent_path());
  return p;
}

fs::path write_file(const fs::path& p, const std::string& text) {
  std::ofstream(p) << text;
  return p;
}

}  // namespace

TEST(Cli, PrintConfigDefaults) {
  auto r = run("print-config fit");
  ASSERT_EQ(r.code, 0);
  auto j = Json::parse(r.out);
  EXPECT_EQ(j["sampler"]["niters"], 2000);
  EXPECT_EQ(j["sampler"]["nwarmup"], 200);
  EXPECT_EQ(j["sampler"]["nchains"], 2);
  EXPECT_EQ(j["spec"]["fixed_eff_intercept"], true);
  EXPECT_EQ(j["spec"]["gamma_a"], 3.0);
  EXPECT_EQ(j["spec"]["gamma_b"], 1.5);
  EXPECT_EQ(j["spec"]["beta_a"], 5.0);
  EXPECT_EQ(j["spec"]["beta_b"], 5.0);
}

TEST(Cli, PaperScaleFlag) {
  auto r = run("study --paper-scale --print-config --seed 3");
  ASSERT_EQ(r.code, 0);
  auto j = Json::parse(r.out);
  for (const auto& s : j["scenarios"]) {
    EXPECT_EQ(s["n_replicates"], 148);
    EXPECT_EQ(s["true_kappa_reps"], 10000);
  }
  auto d = Json::parse(run("study --print-config --seed 3").out);
  EXPECT_EQ(d["scenarios"][0]["n_replicates"], 30);
  EXPECT_EQ(d["scenarios"][0]["true_kappa_reps"], 2000);
}

TEST(Cli, MissingModelIsUsageError) {
  auto dir = scratch("nomodel");
  fs::create_directories(dir);
  auto data = write_file(dir / "d.csv", "subject,rater,time,y\n1,a,1,0\n1,b,1,1\n2,a,1,1\n2,b,1,1\n");
  EXPECT_EQ(run("fit " + data.string() + " -o " + (dir / "out").string()).code, 1);
  EXPECT_EQ(run("fit --model bin " + (dir / "missing.csv").string() + " -o " + (dir / "o").string()).code, 1);
  EXPECT_EQ(run("bogus").code, 1);
}

TEST(Cli, KappaPassthrough) {
  auto dir = scratch("kappa");
  fs::create_directories(dir);
  // Two raters, one time: interrater Conger equals Cohen.
  auto a = write_file(dir / "a.csv",
                      "subject,rater,time,y\n1,a,1,1\n1,b,1,1\n2,a,1,0\n2,b,1,1\n3,a,1,0\n3,b,1,0\n"
                      "4,a,1,1\n4,b,1,0\n5,a,1,1\n5,b,1,1\n");
  auto conger = Json::parse(run("kappa " + a.string()).out);
  auto cohen = Json::parse(run("kappa --method cohen " + a.string()).out);
  EXPECT_NEAR(conger["kappa"].get<double>(), cohen["kappa"].get<double>(), 1e-14);
  std::vector<int> x{1, 0, 0, 1, 1}, y{1, 1, 0, 0, 1};
  EXPECT_NEAR(cohen["kappa"].get<double>(), cohen_kappa(x, y).kappa, 1e-14);

  // Perfect agreement.
  auto b = write_file(dir / "b.csv", "subject,rater,time,y\n1,a,1,1\n1,b,1,1\n2,a,1,0\n2,b,1,0\n");
  for (const char* m : {"cohen", "scott", "fleiss", "conger"})
    EXPECT_EQ(Json::parse(run(std::string("kappa --method ") + m + " " + b.string()).out)["kappa"], 1.0);

  // Constant ratings: chance agreement is one.
  auto c = write_file(dir / "c.csv", "subject,rater,time,y\n1,a,1,1\n1,b,1,1\n2,a,1,1\n2,b,1,1\n");
  EXPECT_EQ(run("kappa " + c.string()).code, 2);
}

TEST(Cli, FitFullyNestedWritesOutputs) {
  auto dir = scratch("fit");
  auto table = simulate_dataset(ModelKind::FN, reference_parameters(DatasetReference::gait, ModelKind::FN),
                                {12, 3, 2}, Link::logit, 4);
  fs::create_directories(dir);
  write_csv(table, dir / "data.csv");
  auto r = run("fit --model bfn --cov-R common --cov-T common " + (dir / "data.csv").string() + " -o " +
               (dir / "out").string() + " --niters 150 --nwarmup 100 --seed 7 --ppk-draws 50");
  ASSERT_EQ(r.code, 0);
  for (const char* f : {"draws.csv", "diagnostics.json", "summary.csv", "summary.json", "ppkappa.json", "manifest.json"})
    EXPECT_TRUE(fs::exists(dir / "out" / f)) << f;
  std::ifstream in(dir / "out" / "summary.csv");
  std::string text((std::istreambuf_iterator<char>(in)), {});
  EXPECT_NE(text.find("rho_R"), std::string::npos);
  EXPECT_NE(text.find("rho_T"), std::string::npos);
  EXPECT_NE(text.find("LOOIC"), std::string::npos);
  auto m = read_json_file(dir / "out" / "manifest.json");
  EXPECT_EQ(m["seed"], 7);
  EXPECT_EQ(m["command"], "fit");
  EXPECT_TRUE(m.contains("inputs"));

  auto rep = run("report " + (dir / "out").string());
  EXPECT_EQ(rep.code, 0);
  EXPECT_NE(rep.out.find("LOOIC"), std::string::npos);
}

TEST(Cli, LooCompareSelectsSmallest) {
  auto r = run("loo --compare BIN=720.89 --compare BPN=720.44 --compare BFN=741.02");
  ASSERT_EQ(r.code, 0);
  EXPECT_EQ(Json::parse(r.out)["selected"], "BPN");
  auto t = run("loo --compare BIN=500 --compare BPN=500");
  EXPECT_EQ(Json::parse(t.out)["selected"], "BIN");
  EXPECT_EQ(run("loo --compare BIN=500").code, 1);
}

TEST(Cli, SimulateIsReproducible) {
  auto dir = scratch("sim");
  ASSERT_EQ(run("simulate --reference radiograph --sim-kind fn --seed 9 -o " + (dir / "a").string()).code, 0);
  ASSERT_EQ(run("simulate --reference radiograph --sim-kind fn --seed 9 -o " + (dir / "b").string()).code, 0);
  EXPECT_EQ(sha256_file(dir / "a" / "data.csv"), sha256_file(dir / "b" / "data.csv"));
  auto m = read_json_file(dir / "a" / "manifest.json");
  EXPECT_EQ(m["seed"], 9);
  // Without --seed one is drawn and recorded.
  ASSERT_EQ(run("simulate -o " + (dir / "c").string()).code, 0);
  EXPECT_TRUE(read_json_file(dir / "c" / "manifest.json")["seed"].is_number_unsigned());
}

TEST(Cli, StudyRefusesExistingCheckpointWithoutResume) {
  auto dir = scratch("study");
  const std::string base = "study --replicates 1 --true-kappa-reps 10 --niters 100 --nwarmup 100 --ppk-draws 20 "
                           "--seed 2 -o " + dir.string();
  auto cfg = write_file(fs::temp_directory_path() / "relikit_cli_test" / "study.json",
                        R"({"reference": "gait", "scenarios": [{"sim_kind": "IN", "dims": {"I": 8, "J": 3, "K": 2}}]})");
  ASSERT_EQ(run(base + " --config " + cfg.string()).code, 0);
  auto sel = dir / "selection.csv";
  ASSERT_TRUE(fs::exists(sel));
  EXPECT_EQ(run(base + " --config " + cfg.string()).code, 1);
  EXPECT_EQ(run(base + " --config " + cfg.string() + " --resume").code, 0);
}
