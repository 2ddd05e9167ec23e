#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <sys/wait.h>

#include "ctnmt/experiment.hpp"

using namespace ctnmt;
namespace fs = std::filesystem;

namespace {

Json tiny_json() {
  return Json::parse(R"({
    "task": {"train_pairs": 80, "valid_pairs": 10, "test_pairs": 10, "mono_sentences": 120, "vocab_size": 20},
    "nmt": {"num_layers": 1, "d_model": 16, "num_heads": 2, "d_ff": 32, "dropout": 0.1},
    "teacher": {"num_layers": 2, "num_heads": 2, "d_ff": 32, "pretrain_steps": 20, "batch_tokens": 128},
    "train": {"steps": 12, "batch_tokens": 120, "log_every": 4, "valid_every": 6, "drift_every": 6,
              "probe_sentences": 5},
    "decode": {"beam": 2, "max_extra": 3},
    "seed": 3
  })");
}

std::string scratch(const std::string& name) {
  auto dir = fs::temp_directory_path() / "ctnmt_test_cli";
  fs::create_directories(dir);
  return (dir / name).string();
}

std::shared_ptr<TeacherLm<float>> tiny_teacher(const ExperimentConfig& cfg, const PreparedData& data) {
  auto t = std::make_shared<TeacherLm<float>>(teacher_config_for(cfg, data.src_vocab), 5);
  pretrain_teacher(*t, prepare_mono(cfg.task, data.src_vocab), 6);
  return t;
}

int run_cli(const std::string& args) {
  const std::string cmd = std::string(CTNMT_CLI_PATH) + " " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

void write_file(const std::string& path, const std::string& text) { std::ofstream(path) << text; }

std::string read_file(const std::string& path) {
  std::ifstream in(path);
  std::stringstream s;
  s << in.rdbuf();
  return s.str();
}

}  // namespace

TEST(Config, UnknownKeysRejected) {
  auto j = tiny_json();
  j["nmt"]["d_modle"] = 16;
  EXPECT_THROW(config_from_json(j), ConfigError);
  auto k = tiny_json();
  k["learning_rate"] = 1.0;
  EXPECT_THROW(config_from_json(k), ConfigError);
  auto w = tiny_json();
  w["nmt"]["d_model"] = "sixteen";
  EXPECT_THROW(config_from_json(w), ConfigError);
}

TEST(Config, RoundTripThroughJson) {
  auto cfg = config_from_json(tiny_json());
  EXPECT_EQ(cfg.teacher.d_model, 16u);
  auto again = config_from_json(config_to_json(cfg));
  EXPECT_EQ(config_to_json(again), config_to_json(cfg));
  EXPECT_THROW(read_json_file(scratch("absent.json")), ConfigError);
}

TEST(Config, InvalidValuesRejected) {
  auto j = tiny_json();
  j["fusion"]["alpha"] = 1.5;
  EXPECT_THROW(config_from_json(j), ConfigError);
  auto k = tiny_json();
  k["fusion"]["lm_regime"] = "fast";
  EXPECT_THROW(config_from_json(k), ConfigError);
  auto m = tiny_json();
  m["nmt"]["num_heads"] = 3;
  EXPECT_THROW(config_from_json(m), ConfigError);
}

class CheckpointTest : public ::testing::Test {
 protected:
  void SetUp() override {
    auto j = tiny_json();
    j["fusion"]["strategy"] = "ad,ds,sched";
    cfg = config_from_json(j);
    data = prepare_data(cfg.task);
    teacher = tiny_teacher(cfg, data);
  }
  ExperimentConfig cfg;
  PreparedData data;
  std::shared_ptr<TeacherLm<float>> teacher;
};

TEST_F(CheckpointTest, SaveLoadSaveIsByteIdentical) {
  Trainer tr(cfg, data, teacher.get());
  for (int i = 0; i < 3; ++i) tr.step();
  const auto path = scratch("a.ckpt");
  write_checkpoint(path, tr.checkpoint());
  auto ck = read_checkpoint(path);
  Trainer other(cfg, data, teacher.get());
  other.restore(ck);
  EXPECT_EQ(serialize_checkpoint(other.checkpoint()), serialize_checkpoint(tr.checkpoint()));
  EXPECT_EQ(serialize_checkpoint(ck), serialize_checkpoint(tr.checkpoint()));
}

TEST_F(CheckpointTest, ShapeMismatchLoadsNothing) {
  Trainer tr(cfg, data, teacher.get());
  tr.step();
  auto ck = tr.checkpoint();
  Trainer fresh(cfg, data, teacher.get());
  const auto before = serialize_checkpoint(fresh.checkpoint());
  auto& last = ck.tensors[ck.tensors.size() / 2];
  ASSERT_GE(last.shape.size(), 1u);
  last.shape.push_back(1);
  EXPECT_THROW(fresh.restore(ck), CheckpointError);
  EXPECT_EQ(serialize_checkpoint(fresh.checkpoint()), before);
  auto missing = tr.checkpoint();
  missing.tensors.erase(missing.tensors.begin() + 1);
  EXPECT_THROW(fresh.restore(missing), CheckpointError);
  EXPECT_EQ(serialize_checkpoint(fresh.checkpoint()), before);
}

TEST_F(CheckpointTest, TruncatedOrCorruptRejected) {
  Trainer tr(cfg, data, teacher.get());
  auto bytes = serialize_checkpoint(tr.checkpoint());
  for (std::size_t cut : {std::size_t{3}, bytes.size() / 2, bytes.size() - 1}) {
    std::vector<char> part(bytes.begin(), bytes.begin() + static_cast<std::ptrdiff_t>(cut));
    EXPECT_THROW(parse_checkpoint(part, "cut"), CheckpointError) << cut;
  }
  auto bad = bytes;
  bad[0] = 'X';
  EXPECT_THROW(parse_checkpoint(bad, "magic"), CheckpointError);
  auto extra = bytes;
  extra.push_back('!');
  EXPECT_THROW(parse_checkpoint(extra, "extra"), CheckpointError);
  EXPECT_THROW(read_checkpoint(scratch("none.ckpt")), CheckpointError);
}

TEST_F(CheckpointTest, ResumeContinuesTheSameTrajectory) {
  Trainer a(cfg, data, teacher.get());
  for (int i = 0; i < 5; ++i) a.step();
  auto ck = parse_checkpoint(serialize_checkpoint(a.checkpoint()), "mem");
  const double peek = a.peek_next_loss();
  const auto next = a.step();
  EXPECT_NEAR(peek, next.loss, 1e-6);

  Trainer b(cfg, data, teacher.get());
  b.restore(ck);
  EXPECT_EQ(b.steps_done(), 5u);
  EXPECT_NEAR(b.peek_next_loss(), next.loss, 1e-6);
  const auto resumed = b.step();
  EXPECT_NEAR(resumed.loss, next.loss, 1e-6);
  for (int i = 0; i < 3; ++i) EXPECT_NEAR(b.step().loss, a.step().loss, 1e-6);
}

TEST_F(CheckpointTest, VocabularyMismatchIsDataError) {
  Trainer tr(cfg, data, teacher.get());
  auto ck = tr.checkpoint();
  ck.tgt_vocab_hash ^= 1;
  EXPECT_THROW(tr.restore(ck), DataError);
  ck.kind = "teacher";
  EXPECT_THROW(tr.restore(ck), CheckpointError);
}

TEST(Determinism, SameSeedSameMetrics) {
  auto cfg = config_from_json(tiny_json());
  auto data = prepare_data(cfg.task);
  std::vector<std::string> logs;
  for (int run = 0; run < 2; ++run) {
    Trainer tr(cfg, data, nullptr);
    std::string lines;
    for (int i = 0; i < 8; ++i) {
      auto j = tr.step().to_json();
      j.erase("wall_time");
      lines += j.dump() + "\n";
    }
    logs.push_back(lines);
  }
  EXPECT_EQ(logs[0], logs[1]);
}

TEST(Grid, DataSizeSweepHasSixCells) {
  Json g;
  g["base"] = tiny_json();
  g["axes"] = {{"strategy", {"none", "ad"}}, {"train_pairs", {1000, 5000, 25000}}, {"seed", {1, 2, 3}}};
  auto grid = grid_from_json(g);
  auto cells = expand_grid(grid);
  ASSERT_EQ(cells.size(), 6u);
  std::set<std::pair<std::string, std::size_t>> seen;
  for (const auto& c : cells) seen.insert({c.strategy, c.train_pairs});
  EXPECT_EQ(seen.size(), 6u);
  EXPECT_EQ(grid.axes.seeds.size(), 3u);
  const auto cell_cfg = config_from_json(detail::cell_config_json(grid, cells[1], 2));
  EXPECT_EQ(cell_cfg.seed, 2u);
  EXPECT_EQ(cell_cfg.task.train_pairs, cells[1].train_pairs);
}

TEST(Grid, LmRateAndLayerLayouts) {
  Json g;
  g["base"] = tiny_json();
  g["axes"] = {{"strategy", {"ad,ds,sched", "ad"}}, {"lm_regime", {"0", "0.01", "1"}}};
  EXPECT_EQ(expand_grid(grid_from_json(g)).size(), 6u);
  Json h;
  h["base"] = tiny_json();
  h["axes"] = {{"strategy", {"ad"}}, {"teacher_tap_layer", {1, 2}}};
  auto cells = expand_grid(grid_from_json(h));
  ASSERT_EQ(cells.size(), 2u);
  EXPECT_EQ(cells[1].teacher_layer, 2);
  Json bad = h;
  bad["axes"]["depth"] = {1};
  EXPECT_THROW(grid_from_json(bad), ConfigError);
}

TEST(Grid, RunsEveryCellAndSeed) {
  Json g;
  g["base"] = tiny_json();
  g["base"]["train"]["steps"] = 4;
  g["axes"] = {{"strategy", {"none", "ad"}}, {"seed", {1, 2}}};
  auto result = run_grid(grid_from_json(g));
  EXPECT_EQ(result.runs.size(), 4u);
  EXPECT_EQ(result.failures(), 0u);
  ASSERT_EQ(result.summaries.size(), 2u);
  EXPECT_EQ(result.summaries[0].runs, 2u);
  EXPECT_FALSE(result.summaries[0].drift_mean.has_value());
  std::ostringstream table;
  write_results_table(table, result.summaries);
  EXPECT_NE(table.str().find("ad"), std::string::npos);
}

TEST(Grid, SampleConfigsParse) {
  std::size_t grids = 0;
  for (const auto& entry : std::filesystem::directory_iterator(CTNMT_CONFIG_DIR)) {
    if (entry.path().extension() != ".json") continue;
    const Json j = read_json_file(entry.path().string());
    SCOPED_TRACE(entry.path().filename().string());
    if (!j.contains("base")) {
      EXPECT_NO_THROW(config_from_json(j));
      continue;
    }
    ++grids;
    const auto grid = grid_from_json(j);
    for (const auto& c : expand_grid(grid)) EXPECT_NO_THROW(config_from_json(detail::cell_config_json(grid, c, 1)));
  }
  EXPECT_GE(grids, 4u);
}

TEST(Cli, ExitCodes) {
  EXPECT_EQ(run_cli("--help"), 0);
  EXPECT_EQ(run_cli(""), 2);
  EXPECT_EQ(run_cli("bogus"), 2);
  EXPECT_EQ(run_cli("train --config " + scratch("missing.json")), 2);
  write_file(scratch("unknown.json"), R"({"nmt": {"layers": 2}})");
  EXPECT_EQ(run_cli("train --config " + scratch("unknown.json")), 2);
  write_file(scratch("h.txt"), "a b c d\n");
  write_file(scratch("r.txt"), "a b c d\nx y\n");
  EXPECT_EQ(run_cli("evaluate --hyp " + scratch("h.txt") + " --ref " + scratch("r.txt")), 3);
  EXPECT_EQ(run_cli("evaluate --hyp " + scratch("h.txt") + " --ref " + scratch("h.txt")), 0);
  write_file(scratch("junk.ckpt"), "not a checkpoint");
  EXPECT_EQ(run_cli("translate --model " + scratch("junk.ckpt") + " --vocab-dir " + scratch("") + " --input " +
                    scratch("h.txt") + " --output " + scratch("o.txt")),
            3);
}

TEST(Cli, TrainThenTranslate) {
  const auto out = scratch("run");
  fs::remove_all(out);
  auto j = tiny_json();
  j["out"] = out;
  write_file(scratch("train.json"), j.dump());
  ASSERT_EQ(run_cli("train --config " + scratch("train.json")), 0);
  ASSERT_TRUE(fs::exists(out + "/last.ckpt"));
  EXPECT_FALSE(read_file(out + "/metrics.jsonl").empty());

  write_file(scratch("empty.txt"), "");
  ASSERT_EQ(run_cli("translate --model " + out + "/last.ckpt --input " + scratch("empty.txt") + " --output " +
                    scratch("empty.out")),
            0);
  EXPECT_EQ(read_file(scratch("empty.out")), "");

  write_file(scratch("src.txt"), "\n");
  ASSERT_EQ(run_cli("translate --model " + out + "/last.ckpt --input " + scratch("src.txt") + " --output " +
                    scratch("src.out") + " --beam 2"),
            0);
  EXPECT_EQ(read_file(scratch("src.out")), "\n");

  auto bytes = read_file(out + "/last.ckpt");
  write_file(out + "/cut.ckpt", bytes.substr(0, bytes.size() / 2));
  EXPECT_EQ(run_cli("translate --model " + out + "/cut.ckpt --input " + scratch("src.txt") + " --output " +
                    scratch("x.out")),
            3);
  EXPECT_EQ(run_cli("train --config " + scratch("train.json") + " --strategy ad"), 2);
}
