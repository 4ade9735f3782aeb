#include <gtest/gtest.h>

#include "infinisim/flat_config.hpp"

using namespace infinisim;

TEST(ConfigNumber, SeparatorsAndSuffixes) {
  EXPECT_EQ(parse_config_number("25_600"), 25600.0);
  EXPECT_EQ(parse_config_number("32G"), 32e9);
  EXPECT_EQ(parse_config_number("1.5T"), 1.5e12);
  EXPECT_EQ(parse_config_number("12K"), 12e3);
  EXPECT_EQ(parse_config_number("3M"), 3e6);
  EXPECT_EQ(parse_config_number("1e-8"), 1e-8);
  EXPECT_EQ(parse_config_number("-2"), -2.0);
  for (const char* bad : {"", "G", "12x", "1.2.3", "_", "inf", "nan", "12GG"}) {
    EXPECT_THROW(parse_config_number(bad), DomainError) << bad;
  }
}

TEST(FlatConfig, SectionsCommentsAndWhitespace) {
  const auto c = FlatConfig::parse(
      "# header\n"
      "[model]\n"
      "  nl = 4   # blocks\n"
      "hd=1_024\n"
      "\n"
      "[ cluster ]\n"
      "nodes = 2\n"
      "[run]\n");
  EXPECT_EQ(c.get_int("model", "nl", 0), 4);
  EXPECT_EQ(c.get_int("model", "hd", 0), 1024);
  EXPECT_EQ(c.get_int("cluster", "nodes", 0), 2);
  EXPECT_TRUE(c.has_section("run"));
  EXPECT_TRUE(c.section_empty("run"));
  EXPECT_FALSE(c.has("model", "seq"));
  EXPECT_EQ(c.get_number("model", "seq", 7.0), 7.0);
  EXPECT_EQ(c.get_string("model", "act", "relu"), "relu");
}

TEST(FlatConfig, DiagnosticsCarryLineNumbers) {
  auto line_of = [](const std::string& text) {
    try {
      FlatConfig::parse(text);
    } catch (const ConfigError& e) {
      return e.line();
    }
    return -1;
  };
  EXPECT_EQ(line_of("[model]\nnl = 1\nnl = 2\n"), 3);
  EXPECT_EQ(line_of("nl = 1\n"), 1);
  EXPECT_EQ(line_of("[model]\n\njust words\n"), 3);
  EXPECT_EQ(line_of("[gpu]\n"), 1);
  EXPECT_EQ(line_of("[model\n"), 1);
  EXPECT_EQ(line_of("[model]\n= 3\n"), 2);
  EXPECT_EQ(line_of("[model]\nnl =\n"), 2);
  const auto c = FlatConfig::parse("[model]\nnl = 1\nhd = big\n");
  try {
    c.get_number("model", "hd");
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_EQ(e.line(), 3);
    EXPECT_NE(std::string(e.what()).find("hd"), std::string::npos);
  }
  EXPECT_THROW(FlatConfig::parse("[model]\nnl = 1.5\n").get_int("model", "nl", 0), ConfigError);
}

TEST(FlatConfig, UnknownKeysNamed) {
  const auto c = FlatConfig::parse("[model]\nnl = 2\nhd = 64\nwidth = 3\n");
  try {
    model_config_from(c);
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("width"), std::string::npos);
    EXPECT_EQ(e.line(), 4);
  }
  EXPECT_THROW(cluster_config_from(FlatConfig::parse("[cluster]\ngpus = 3\n")), ConfigError);
  EXPECT_THROW(validate_config_keys(FlatConfig::parse("[run]\nlearning_rate = 3\n")), ConfigError);
  EXPECT_NO_THROW(validate_config_keys(FlatConfig::parse("[model]\nlayer12.tiles = 3\n")));
  EXPECT_THROW(validate_config_keys(FlatConfig::parse("[model]\nlayer.tiles = 3\n")), ConfigError);
}

TEST(ModelConfigFrom, TransformerAndDefaults) {
  const auto m = model_config_from(FlatConfig::parse("[model]\nnl = 128\nhd = 25_600\nheads = 256\n"));
  EXPECT_EQ(m.nl, 128);
  EXPECT_EQ(m.hd, 25600);
  EXPECT_EQ(m.attn_heads, 256);
  EXPECT_EQ(m.seq, 1024);
  EXPECT_EQ(m.bsz, 1.0);
  EXPECT_EQ(m.ci, 1);
  EXPECT_THROW(model_config_from(FlatConfig::parse("[model]\n")), ConfigError);
  EXPECT_THROW(model_config_from(FlatConfig::parse("[cluster]\nnodes = 1\n")), ConfigError);
  EXPECT_THROW(model_config_from(FlatConfig::parse("[model]\nnl = 2\n")), ConfigError);
  EXPECT_THROW(model_config_from(FlatConfig::parse("[model]\nnl = 0\nhd = 8\n")), ConfigError);
}

TEST(ClusterConfigFrom, OverridesOnlyGivenKeys) {
  const auto c = cluster_config_from(FlatConfig::parse("[cluster]\nnodes = 4\npcie_bw = 16G\n"));
  const ClusterConfig d;
  EXPECT_EQ(c.nodes, 4);
  EXPECT_EQ(c.pcie_bw_per_device, 16e9);
  EXPECT_EQ(c.devices_per_node, d.devices_per_node);
  EXPECT_EQ(c.device_mem_bytes, d.device_mem_bytes);
  EXPECT_EQ(c.nvme_bw_per_node, d.nvme_bw_per_node);
  EXPECT_THROW(cluster_config_from(FlatConfig::parse("[cluster]\nnodes = 0\n")), ConfigError);
}

TEST(ModelSpecFrom, LayersTiesAndTiles) {
  const auto s = model_spec_from(FlatConfig::parse(
      "[model]\nlayers = 3\nseed = 5\n"
      "layer0.in = 8\nlayer0.out = 16\nlayer0.act = relu\nlayer0.tiles = 4\n"
      "layer1.in = 16\nlayer1.out = 16\nlayer1.act = gelu\n"
      "layer2.in = 16\nlayer2.out = 16\n"
      "tied = 1:2\n"));
  ASSERT_EQ(s.layers.size(), 3u);
  EXPECT_EQ(s.layers[0].tiles, 4u);
  EXPECT_EQ(s.layers[0].activation, Activation::Relu);
  EXPECT_EQ(s.layers[1].activation, Activation::GeluApprox);
  EXPECT_EQ(s.layers[2].activation, Activation::Identity);
  ASSERT_EQ(s.tied_pairs.size(), 1u);
  EXPECT_EQ(s.tied_pairs[0], (std::pair<std::size_t, std::size_t>{1, 2}));
  EXPECT_EQ(s.seed, 5u);
  EXPECT_THROW(model_spec_from(FlatConfig::parse("[model]\nlayers = 1\nlayer0.in = 2\n")), ConfigError);
  EXPECT_THROW(model_spec_from(FlatConfig::parse("[model]\nlayers = 0\n")), ConfigError);
  EXPECT_THROW(model_spec_from(FlatConfig::parse("[model]\nlayers = 1\nlayer0.in = 2\nlayer0.out = 2\nlayer0.act = tanh\n")),
               ConfigError);
  EXPECT_THROW(model_spec_from(FlatConfig::parse("[model]\nlayers = 2\nlayer0.in = 2\nlayer0.out = 3\n"
                                                 "layer1.in = 2\nlayer1.out = 2\n")),
               ConfigError);
  EXPECT_THROW(model_spec_from(FlatConfig::parse("[model]\nlayers = 1\nlayer0.in = 2\nlayer0.out = 2\ntied = 1-2\n")),
               ConfigError);
}

TEST(FlatConfig, ShippedSamplesParse) {
  const std::string dir = INFINISIM_CONFIG_DIR;
  EXPECT_EQ(param_count(model_config_from(FlatConfig::load(dir + "/gpt_1t.cfg"))), 12ull * 128 * 25600 * 25600);
  EXPECT_NO_THROW(model_config_from(FlatConfig::load(dir + "/gpt_100b.cfg")));
  const auto c = cluster_config_from(FlatConfig::load(dir + "/dgx2_1node.cfg"));
  const ClusterConfig d;
  EXPECT_EQ(c.host_mem_bytes_per_node, d.host_mem_bytes_per_node);
  EXPECT_EQ(c.peak_tp_per_device, d.peak_tp_per_device);
  EXPECT_EQ(cluster_config_from(FlatConfig::load(dir + "/dgx2_32node.cfg")).nodes, 32);
  EXPECT_EQ(model_spec_from(FlatConfig::load(dir + "/toy_3layer.cfg")).layers.size(), 3u);
  EXPECT_EQ(model_spec_from(FlatConfig::load(dir + "/toy_tied_tiled.cfg")).tied_pairs.size(), 1u);
  EXPECT_THROW(FlatConfig::load(dir + "/does_not_exist.cfg"), ConfigError);
}
