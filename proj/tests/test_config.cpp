#include <filesystem>
#include <unistd.h>

#include <gtest/gtest.h>

#include "cosod/config.hpp"

using namespace cosod;
namespace fs = std::filesystem;

namespace {

fs::path write_temp(const std::string& text) {
  const fs::path p = fs::temp_directory_path() / ("cosod_config_" + std::to_string(::getpid()) + ".txt");
  write_file(p, text);
  return p;
}

}  // namespace

TEST(Config, DefaultsAreTheToyValues) {
  const RunConfig c = load_run_config(std::nullopt, {}, nullptr);
  EXPECT_EQ(c.train.lr, 1e-4);
  EXPECT_EQ(c.train.beta1, 0.9);
  EXPECT_EQ(c.train.beta2, 0.99);
  EXPECT_EQ(c.train.group_size, 4);
  EXPECT_EQ(c.train.aux_size, 4);
  EXPECT_EQ(c.train.epochs, 20);
  EXPECT_EQ(c.model.input_h, 64);
  EXPECT_EQ(c.model.d, 64);
  EXPECT_EQ(c.train.lr_schedule, LrSchedule::kConstant);
  EXPECT_NO_THROW(c.validate());
}

TEST(Config, FlagBeatsFileBeatsEnvironment) {
  const fs::path file = write_temp("# comment\n[train]\nlr = 0.002\nseed = 7\n\n[synth]\nn_groups = 5\n");
  RunConfig c = load_run_config(std::nullopt, {}, "11");
  EXPECT_EQ(c.train.seed, 11u);
  EXPECT_EQ(c.synth.seed, 11u);

  c = load_run_config(file, {}, "11");
  EXPECT_EQ(c.train.seed, 7u);
  EXPECT_EQ(c.synth.seed, 11u);
  EXPECT_EQ(c.train.lr, 0.002);
  EXPECT_EQ(c.synth.n_groups, 5);

  c = load_run_config(file, {"train.seed=3", "train.lr=0.5"}, "11");
  EXPECT_EQ(c.train.seed, 3u);
  EXPECT_EQ(c.train.lr, 0.5);
  fs::remove(file);
}

TEST(Config, UnknownKeysAreNamed) {
  RunConfig c;
  try {
    apply_override(c, "train.learning_rate=1");
    FAIL() << "accepted an unknown key";
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("learning_rate"), std::string::npos);
  }
  const fs::path file = write_temp("[nosuch]\nx = 1\n");
  EXPECT_THROW(load_run_config(file, {}, nullptr), ConfigError);
  fs::remove(file);
}

TEST(Config, MalformedValuesAreRejected) {
  RunConfig c;
  EXPECT_THROW(apply_override(c, "train.lr=fast"), ConfigError);
  EXPECT_THROW(apply_override(c, "train.epochs=2.5"), ConfigError);
  EXPECT_THROW(apply_override(c, "model.pe_in_tgl=maybe"), ConfigError);
  EXPECT_THROW(apply_override(c, "train.lr"), ConfigError);
  EXPECT_THROW(apply_override(c, "train.lr_schedule=linear"), ConfigError);
  EXPECT_THROW(load_run_config(std::nullopt, {}, "-3"), ConfigError);
}

TEST(Config, ScheduleKey) {
  RunConfig c;
  apply_override(c, "train.lr_schedule=cosine");
  EXPECT_EQ(c.train.lr_schedule, LrSchedule::kCosine);
  EXPECT_EQ(get_setting(c, "train", "lr_schedule"), "cosine");
}

TEST(Config, RenderRoundTrips) {
  RunConfig c;
  apply_override(c, "train.lr=0.00123");
  apply_override(c, "model.pe_in_tgl=true");
  apply_override(c, "train.lr_schedule=cosine");
  apply_override(c, "synth.noise_level=0.05");
  const std::string text = render_config(c);
  RunConfig back;
  apply_config_text(back, text);
  EXPECT_EQ(render_config(back), text);
  EXPECT_EQ(back.train.lr, 0.00123);
  EXPECT_TRUE(back.model.pe_in_tgl);
  for (const auto& k : config_schema()) EXPECT_EQ(get_setting(back, k.section, k.key), get_setting(c, k.section, k.key));
}

TEST(Config, ValidationCatchesInconsistentModels) {
  RunConfig c;
  apply_override(c, "model.heads=3");
  EXPECT_THROW(c.validate(), ConfigError);
}
