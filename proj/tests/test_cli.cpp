#include <gtest/gtest.h>

#include <sys/wait.h>

#include <fstream>
#include <sstream>

#include "fixtures.hpp"
#include "qtk/commands.hpp"
#include "structure_oracles.hpp"

using namespace qtk;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("qtk_test_cli_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

int run(const std::string& args) {
  const std::string cmd = std::string(QTK_CLI_PATH) + " " + args + " --quiet 2>/dev/null";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

std::string corpus_arg() { return "--corpus " + (testfx::source_dir() / "data" / "corpus.txt").string(); }
std::string fixture_arg(const std::string& name) {
  return (testfx::source_dir() / "fixtures" / (name + ".qtk")).string();
}

}  // namespace

TEST(Cli, MakeFixtureIsDeterministic) {
  const fs::path d = scratch("mkfix");
  ASSERT_EQ(run("make-fixture --preset tiny --out " + (d / "a.qtk").string() + " " + corpus_arg()), 0);
  ASSERT_EQ(run("make-fixture --preset tiny --out " + (d / "b.qtk").string() + " " + corpus_arg()), 0);
  const std::string a = slurp(d / "a.qtk");
  EXPECT_FALSE(a.empty());
  EXPECT_EQ(a, slurp(d / "b.qtk"));
  ASSERT_EQ(run("make-fixture --preset tiny --fixture-seed 99 --out " + (d / "c.qtk").string() + " " + corpus_arg()), 0);
  EXPECT_NE(a, slurp(d / "c.qtk"));
}

TEST(Cli, MissingInputsFailWithoutArtifacts) {
  const fs::path d = scratch("missing");
  EXPECT_EQ(run("eval --model " + fixture_arg("explore3") + " --corpus /nonexistent/corpus.txt --out-dir " +
                d.string()),
            int(ErrorKind::missing_file));
  EXPECT_EQ(run("eval --model /nonexistent.qtk " + corpus_arg() + " --out-dir " + d.string()),
            int(ErrorKind::missing_file));
  EXPECT_TRUE(fs::is_empty(d));
}

TEST(Cli, ValidationFailuresHaveDistinctCodes) {
  const fs::path d = scratch("codes");
  const std::string base = " --model " + fixture_arg("explore3") + " " + corpus_arg() + " --out-dir " + d.string();
  EXPECT_EQ(run("explore --strategy sideways" + base), int(ErrorKind::invalid_argument));
  EXPECT_EQ(run("explore --bogus-flag" + base), int(ErrorKind::invalid_argument));
  std::ofstream(d / "plan.json") << "{\"blocks_removed\": \"one\"}";
  EXPECT_EQ(run("compress --plan " + (d / "plan.json").string() + base), int(ErrorKind::malformed_input));
  fs::remove(d / "plan.json");
  EXPECT_EQ(run("compress --remove-blocks 0,1,2" + base), int(ErrorKind::constraint_violation));
  // 5^8 assignments over the 6-block target exceed the exhaustive cap.
  EXPECT_EQ(run("explore --strategy exhaustive --precisions 2,3,4,8,16 --model " + fixture_arg("target") + " " +
                corpus_arg() + " --out-dir " + d.string()),
            int(ErrorKind::constraint_violation));
  EXPECT_TRUE(fs::is_empty(d));
}

TEST(Cli, ExploreThreeBlockGridAndReproducibility) {
  const fs::path a = scratch("explore_a"), b = scratch("explore_b");
  const std::string args = "explore --model " + fixture_arg("explore3") + " " + corpus_arg() +
                           " --blocks transformer --precisions 4,8,16 --out-dir ";
  ASSERT_EQ(run(args + a.string()), 0);
  ASSERT_EQ(run(args + b.string()), 0);
  for (const char* f : {"pareto.json", "pareto.csv"}) EXPECT_EQ(slurp(a / f), slurp(b / f)) << f;

  std::istringstream csv(slurp(a / "pareto.csv"));
  std::string line;
  std::getline(csv, line);
  EXPECT_EQ(line, "assignment,memory_bytes,memory_saving,metric,on_front");
  std::vector<ParetoPoint> pts;
  std::vector<bool> flagged;
  const auto j = nlohmann::json::parse(slurp(a / "pareto.json"));
  const Model& m = testfx::fixture("explore3");
  std::vector<std::size_t> dff(m.blocks.size(), m.config.d_ff);
  for (const auto& p : j["points"]) {
    ParetoPoint q;
    q.memory_bytes = p["memory_bytes"];
    q.metric = p["metric"];
    pts.push_back(q);
    flagged.push_back(p["on_front"]);
    EXPECT_EQ(q.memory_bytes, oracle::memory_bytes(m.config, dff, PrecisionAssignment::parse(p["assignment"])));
  }
  std::size_t rows = 0;
  while (std::getline(csv, line)) ++rows;
  EXPECT_EQ(rows, 27u);
  ASSERT_EQ(pts.size(), 27u);
  const auto front = oracle::pareto_front(pts);
  for (std::size_t i = 0; i < pts.size(); ++i)
    EXPECT_EQ(flagged[i], std::find(front.begin(), front.end(), i) != front.end()) << "point " << i;
  EXPECT_EQ(j["front"].size(), front.size());
}

TEST(Cli, DecodeAndCompressArtifacts) {
  const fs::path d = scratch("decode");
  ASSERT_EQ(run("decode --mode speculative --model " + fixture_arg("target") + " --draft " + fixture_arg("draft") +
                " " + corpus_arg() + " --prompts 5 --steps 32 --out-dir " + d.string()),
            0);
  const auto j = nlohmann::json::parse(slurp(d / "decode.json"));
  EXPECT_EQ(j["matches_target_greedy"], 5);
  ASSERT_EQ(run("compress --model " + fixture_arg("explore3") + " " + corpus_arg() +
                " --remove-blocks 1 --eval-seqs 4 --out " + (d / "small.qtk").string() + " --out-dir " + d.string()),
            0);
  const auto c = nlohmann::json::parse(slurp(d / "compress.json"));
  EXPECT_LT(c["mac_ratio"].get<double>(), 1.0);
  EXPECT_EQ(load_checkpoint(d / "small.qtk").blocks.size(), 2u);
}
