#include "gbert/config.hpp"

#include <gtest/gtest.h>

#include <cstdio>
#include <fstream>
#include <string>

#include "gbert/error.hpp"

namespace {

using gbert::Precision;
using gbert::RunConfig;

TEST(Config, DefaultsMatchContract) {
  const RunConfig c;
  EXPECT_EQ(c.d0, 75u);
  EXPECT_EQ(c.gat_heads, 4u);
  EXPECT_EQ(c.hidden, 300u);
  EXPECT_EQ(c.ffn, 300u);
  EXPECT_EQ(c.layers, 2u);
  EXPECT_EQ(c.enc_heads, 4u);
  EXPECT_DOUBLE_EQ(c.lr, 5e-4);
  EXPECT_DOUBLE_EQ(c.mask_rate, 0.15);
  EXPECT_DOUBLE_EQ(c.threshold, 0.3);
  EXPECT_EQ(c.pretrain_epochs, 5u);
  EXPECT_EQ(c.finetune_epochs, 5u);
  EXPECT_EQ(c.cycles, 15u);
  EXPECT_EQ(c.batch, 64u);
  EXPECT_EQ(c.precision, Precision::kFp64);
  EXPECT_FALSE(c.no_graph);
  EXPECT_FALSE(c.no_pretrain);
  EXPECT_FALSE(c.freeze_encoder);
  EXPECT_NO_THROW(gbert::validate_run_config(c));
}

TEST(Config, ApplyKeyCoversEveryRenderedKey) {
  RunConfig c;
  // Round-trip: render, reparse every line, render again, compare bytes.
  const std::string text = gbert::render_config(c);
  RunConfig reparsed;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    const auto eq = line.find('=');
    ASSERT_NE(eq, std::string::npos) << line;
    std::string key = line.substr(0, eq);
    std::string value = line.substr(eq + 1);
    key.erase(key.find_last_not_of(' ') + 1);
    value.erase(0, value.find_first_not_of(' '));
    gbert::apply_key(reparsed, key, value);
  }
  EXPECT_EQ(gbert::render_config(reparsed), text);
}

TEST(Config, FileParsingAndOverrides) {
  const std::string path = testing::TempDir() + "config_test.cfg";
  {
    std::ofstream out(path);
    out << "# comment line\n";
    out << "\n";
    out << "hidden = 8\n";
    out << "  gat_heads=2  \n";
    out << "lr = 0.01\n";
    out << "no_graph = true\n";
    out << "precision = fp32\n";
  }
  RunConfig c = gbert::load_config(path);
  EXPECT_EQ(c.hidden, 8u);
  EXPECT_EQ(c.gat_heads, 2u);
  EXPECT_DOUBLE_EQ(c.lr, 0.01);
  EXPECT_TRUE(c.no_graph);
  EXPECT_EQ(c.precision, Precision::kFp32);
  EXPECT_EQ(c.d0, 75u);  // untouched keys keep defaults

  gbert::apply_key(c, "hidden", "16");  // CLI-style override wins
  EXPECT_EQ(c.hidden, 16u);
  std::remove(path.c_str());
}

TEST(Config, RejectsMalformedInput) {
  RunConfig c;
  EXPECT_THROW(gbert::apply_key(c, "not_a_key", "1"), gbert::ValidationError);
  EXPECT_THROW(gbert::apply_key(c, "hidden", "abc"), gbert::ValidationError);
  EXPECT_THROW(gbert::apply_key(c, "hidden", "-3"), gbert::ValidationError);
  EXPECT_THROW(gbert::apply_key(c, "lr", "fast"), gbert::ValidationError);
  EXPECT_THROW(gbert::apply_key(c, "no_graph", "maybe"), gbert::ValidationError);
  EXPECT_THROW(gbert::apply_key(c, "precision", "fp16"), gbert::ValidationError);

  const std::string path = testing::TempDir() + "config_bad.cfg";
  {
    std::ofstream out(path);
    out << "hidden 8\n";
  }
  EXPECT_THROW(gbert::load_config(path), gbert::ValidationError);
  std::remove(path.c_str());
  EXPECT_THROW(gbert::load_config(testing::TempDir() + "no_such.cfg"), gbert::ValidationError);
}

TEST(Config, ValidationCatchesBadCombinations) {
  RunConfig c;
  c.hidden = 10;
  c.gat_heads = 4;
  EXPECT_THROW(gbert::validate_run_config(c), gbert::ValidationError);
  c = RunConfig{};
  c.mask_rate = 1.0;
  EXPECT_THROW(gbert::validate_run_config(c), gbert::ValidationError);
  c = RunConfig{};
  c.threshold = 1.5;
  EXPECT_THROW(gbert::validate_run_config(c), gbert::ValidationError);
  c = RunConfig{};
  c.lr = 0.0;
  EXPECT_THROW(gbert::validate_run_config(c), gbert::ValidationError);
  c = RunConfig{};
  c.batch = 0;
  EXPECT_THROW(gbert::validate_run_config(c), gbert::ValidationError);
}

TEST(Config, FingerprintTracksContentOnly) {
  RunConfig a;
  RunConfig b;
  EXPECT_EQ(gbert::config_fingerprint(a), gbert::config_fingerprint(b));
  EXPECT_EQ(gbert::config_fingerprint(a).size(), 16u);
  b.seed = 2;
  EXPECT_NE(gbert::config_fingerprint(a), gbert::config_fingerprint(b));
}

TEST(Config, SaveLoadRoundTrip) {
  RunConfig c;
  c.records = "corpus/records.jsonl";
  c.hidden = 12;
  c.gat_heads = 3;
  c.seed = 99;
  c.no_pretrain = true;
  c.lr = 1.25e-3;
  const std::string path = testing::TempDir() + "config_roundtrip.cfg";
  gbert::save_config(path, c);
  const RunConfig loaded = gbert::load_config(path);
  EXPECT_EQ(gbert::render_config(loaded), gbert::render_config(c));
  EXPECT_EQ(gbert::config_fingerprint(loaded), gbert::config_fingerprint(c));
  std::remove(path.c_str());
}

}  // namespace
