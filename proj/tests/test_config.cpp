#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <string>

#include "apa/config.hpp"

using namespace apa;

namespace {

std::string temp_path(const std::string& name) {
  return (std::filesystem::temp_directory_path() / ("apa_test_config_" + name)).string();
}

std::string error_of(const std::string& text) {
  try {
    parse_run_config(text);
  } catch (const ConfigError& e) {
    return e.what();
  }
  return "";
}

}  // namespace

TEST(Config, EmptyDocumentGivesDefaults) {
  const RunConfig c = parse_run_config("");
  const RunConfig d = default_run_config();
  EXPECT_EQ(run_config_to_json(c), run_config_to_json([&] {
              RunConfig v = d;
              validate_run_config(v);
              return v;
            }()));
  EXPECT_EQ(c.train.loss, LossKind::apa_n);
  EXPECT_EQ(c.train.beta, 0.1);
  EXPECT_EQ(c.train.tau, 0.75);
  EXPECT_EQ(c.train.temperature, 0.05);
  EXPECT_EQ(c.train.sgd.momentum, 0.8);
  EXPECT_EQ(c.train.sgd.weight_decay, 5e-4);
  EXPECT_EQ(c.train.losses.apa_u.epsilon, 30.0);
  EXPECT_EQ(c.train.losses.apa_u.xi, 10.0);
  EXPECT_EQ(c.train.losses.apa_n.epsilon, 1.0);
  EXPECT_EQ(c.train.losses.apa_n.xi, 1.0);
  EXPECT_EQ(c.train.shape.input_dim, c.task.input_dim);
  EXPECT_EQ(c.train.shape.classes, c.task.classes);
  EXPECT_EQ(c.setting, Setting::source_free);
}

TEST(Config, SectionsSetFields) {
  const RunConfig c = parse_run_config(
      "seed: 9\n"
      "setting: standard\n"
      "data:\n"
      "  classes: 5\n"
      "  input_dim: 10\n"
      "  rotation_planes: interleaved\n"
      "model:\n"
      "  hidden: [32, 16]\n"
      "  bottleneck: 12\n"
      "train:\n"
      "  loss: vat\n"
      "  beta: 0.2\n"
      "  freeze_classifier: true\n"
      "perturb:\n"
      "  apa_n_eps: 0.5\n"
      "  topk: 3\n"
      "probe:\n"
      "  shrink_eps: [2, 4]\n"
      "sweep:\n"
      "  beta: [0.1]\n");
  EXPECT_EQ(c.train.seed, 9u);
  EXPECT_EQ(c.task.seed, 9u);
  EXPECT_EQ(c.setting, Setting::standard);
  EXPECT_EQ(c.task.classes, 5u);
  EXPECT_EQ(c.train.shape.classes, 5u);
  EXPECT_EQ(c.train.shape.input_dim, 10u);
  EXPECT_EQ(c.task.shift.planes, RotationPlanes::interleaved);
  EXPECT_EQ(c.train.shape.hidden, (std::vector<std::size_t>{32, 16}));
  EXPECT_EQ(c.train.shape.bottleneck, 12u);
  EXPECT_EQ(c.train.loss, LossKind::vat);
  EXPECT_EQ(c.train.beta, 0.2);
  EXPECT_TRUE(c.train.freeze_classifier);
  EXPECT_EQ(c.train.losses.apa_n.epsilon, 0.5);
  EXPECT_EQ(c.train.losses.topk, 3u);
  EXPECT_EQ(c.probe.shrink_eps, (std::vector<double>{2, 4}));
  EXPECT_EQ(c.sweep.beta, (std::vector<double>{0.1}));
}

TEST(Config, UnknownKeysAreRejectedWithLine) {
  EXPECT_EQ(error_of("train:\n  beta: 0.1\n  betta: 0.2\n"), "line 3: unknown key 'train.betta'");
  EXPECT_EQ(error_of("seed: 1\nmodle:\n  hidden: [4]\n"), "line 2: unknown key 'modle'");
}

TEST(Config, MalformedValuesReportTheirLine) {
  EXPECT_EQ(error_of("train:\n  beta: lots\n"), "line 2: bad value 'lots' for 'train.beta'");
  EXPECT_NE(error_of("train:\n  loss: apa-x\n").find("line 2: unknown loss"), std::string::npos);
  EXPECT_NE(error_of("model:\n  hidden: 4\n").find("line 2:"), std::string::npos);
  EXPECT_NE(error_of("train:\n  batch_size: -3\n").find("line 2:"), std::string::npos);
  EXPECT_NE(error_of("setting: both\n").find("line 1:"), std::string::npos);
  // A syntax error is anchored too.
  EXPECT_NE(error_of("train:\n  beta: [0.1\n").find("line "), std::string::npos);
  EXPECT_NE(error_of("- a\n- b\n").find("line 1"), std::string::npos);
}

TEST(Config, CrossFieldChecksAreConfigErrors) {
  EXPECT_NE(error_of("train:\n  tau: 1.5\n").find("tau"), std::string::npos);
  EXPECT_NE(error_of("perturb:\n  topk: 9\n").find("topk"), std::string::npos);
  EXPECT_NE(error_of("data:\n  classes: 1\n").find("classes"), std::string::npos);
}

TEST(Config, EchoReloadsToTheSameConfig) {
  const RunConfig c = parse_run_config("seed: 4\ntrain:\n  loss: apa-u\nprobe:\n  warmup: 7\n");
  const auto j = run_config_to_json(c);
  const RunConfig back = parse_run_config(j.dump(2));
  EXPECT_EQ(run_config_to_json(back), j);
}

TEST(Config, LoadPrefixesPath) {
  const std::string p = temp_path("bad.yaml");
  std::ofstream(p) << "seed: 1\nbogus: 2\n";
  try {
    load_run_config(p);
    FAIL() << "expected an error";
  } catch (const ConfigError& e) {
    EXPECT_EQ(std::string(e.what()), p + ": line 2: unknown key 'bogus'");
  }
  EXPECT_THROW(load_run_config(temp_path("missing.yaml")), std::runtime_error);
}
