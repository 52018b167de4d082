#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "dcm/autograd/ops.hpp"
#include "dcm/common/error.hpp"
#include "dcm/net/network.hpp"
#include "../support/random_tensors.hpp"

namespace dcm::net {
namespace {

using D = ag::Tensor<double>;
using dcm::testing::random_tensor;

// Trainable scalars of a stage list, counted from the block definitions.
std::size_t count_stage_params(std::size_t c_in, const std::vector<StageSpec>& stages) {
  std::size_t n = 0;
  for (const auto& s : stages) {
    for (std::size_t b = 0; b < s.blocks; ++b) {
      const bool strided = b == 0 && s.downsample;
      n += c_in * s.channels * 9 + 2 * s.channels;
      n += s.channels * s.channels * 9 + 2 * s.channels;
      if (s.block == BlockType::Residual && (strided || c_in != s.channels)) {
        n += c_in * s.channels + 2 * s.channels;
      }
      c_in = s.channels;
    }
  }
  return n;
}

std::size_t count_backbone_params(const BackboneSpec& s) {
  return s.in_channels * s.stem_channels * 9 + 2 * s.stem_channels +
         count_stage_params(s.stem_channels, s.stages) +
         s.stages.back().channels * s.num_classes + s.num_classes;
}

BackboneSpec all_downsampling() {
  BackboneSpec s;
  s.name = "three";
  s.stem_channels = 4;
  s.stages = {{BlockType::Residual, 1, 4, true},
              {BlockType::Plain, 1, 6, true},
              {BlockType::Residual, 2, 8, true}};
  return s;
}

void expect_same(const std::vector<D>& a, const std::vector<D>& b) {
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    ASSERT_EQ(a[i].shape(), b[i].shape());
    for (std::size_t j = 0; j < a[i].numel(); ++j) {
      ASSERT_EQ(a[i].values()[j], b[i].values()[j]) << "output " << i << " element " << j;
    }
  }
}

TEST(Spec, TinyResParameterCounts) {
  const auto net8 = build_backbone<float>(tinyres8(), 1);
  EXPECT_EQ(net8.parameter_count(), count_backbone_params(tinyres8()));
  EXPECT_EQ(net8.parameter_count(), 78042u);
  const auto net14 = build_backbone<float>(tinyres14(), 1);
  EXPECT_EQ(net14.parameter_count(), count_backbone_params(tinyres14()));
  EXPECT_GT(net14.parameter_count(), 600000u);
  EXPECT_LT(net14.parameter_count(), 800000u);
}

TEST(Spec, AttachmentPoints) {
  EXPECT_EQ(attachment_points(all_downsampling()), (std::vector<std::size_t>{0, 1, 2}));
  EXPECT_EQ(attachment_points(tinyres8()), (std::vector<std::size_t>{1, 2}));
}

TEST(Spec, InvalidSpecListsEveryProblem) {
  BackboneSpec s = tinyres8();
  for (auto& st : s.stages) st.downsample = false;
  s.stages[0].channels = 0;
  try {
    build_backbone<double>(s, 1);
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    ASSERT_EQ(e.problems().size(), 2u);
    EXPECT_NE(std::string(e.what()).find("downsample"), std::string::npos);
    EXPECT_NE(std::string(e.what()).find("stages[0].channels"), std::string::npos);
  }
}

TEST(Spec, DefaultHeadIsWiderAndShallower) {
  const auto h = head_spec_for(tinyres14(), 1, HeadStyle::Default);
  ASSERT_EQ(h.stages.size(), 2u);
  EXPECT_EQ(h.stages[0].channels, 128u);
  EXPECT_EQ(h.stages[1].channels, 256u);
  EXPECT_EQ(h.stages[0].blocks, 1u);
  EXPECT_EQ(h.downsample_count(), 2u);
  EXPECT_EQ(head_spec_for(tinyres14(), 1, HeadStyle::Narrow).stages[0].channels, 64u);
  EXPECT_TRUE(head_spec_for(tinyres14(), 2, HeadStyle::Apfc).stages.empty());
  EXPECT_THROW(head_spec_for(tinyres14(), 0, HeadStyle::Default), ConfigError);
}

TEST(Build, SameSeedIsBitIdentical) {
  const auto a = build_backbone<float>(tinyres8(), 42).tensors();
  const auto b = build_backbone<float>(tinyres8(), 42).tensors();
  const auto c = build_backbone<float>(tinyres8(), 43).tensors();
  ASSERT_EQ(a.size(), b.size());
  bool differs = false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].name, b[i].name);
    EXPECT_TRUE(std::equal(a[i].tensor.values().begin(), a[i].tensor.values().end(),
                           b[i].tensor.values().begin()));
    differs = differs || !std::equal(a[i].tensor.values().begin(), a[i].tensor.values().end(),
                                     c[i].tensor.values().begin());
  }
  EXPECT_TRUE(differs);
}

TEST(Forward, LogitShapeAndInputCheck) {
  Engine eng(1);
  auto net = build_backbone<double>(tinyres8(), 1);
  EXPECT_EQ(net.forward(random_tensor<double>({3, 3, 8, 8}, eng), true).shape(),
            ag::Shape({3, 10}));
  EXPECT_THROW(net.forward(random_tensor<double>({3, 1, 8, 8}, eng), true), ShapeError);
}

TEST(Attach, TwoHeadsGiveThreeClassifiers) {
  Engine eng(2);
  auto net = attach_heads(build_backbone<double>(tinyres8(), 1), {1, 2}, HeadStyle::Default, 9);
  EXPECT_EQ(net.num_aux(), 2u);
  const auto out = net.forward_all_heads(random_tensor<double>({4, 3, 8, 8}, eng), true);
  ASSERT_EQ(out.size(), 3u);
  for (const auto& o : out) EXPECT_EQ(o.shape(), ag::Shape({4, 10}));
}

TEST(Attach, EmptyLocationsLeaveNetUnchanged) {
  Engine eng(3);
  auto bare = build_backbone<double>(tinyres8(), 1);
  auto same = attach_heads(bare.clone(), {}, HeadStyle::Default, 9);
  EXPECT_EQ(same.num_aux(), 0u);
  auto x = random_tensor<double>({2, 3, 8, 8}, eng);
  expect_same(bare.forward_all_heads(x, false), same.forward_all_heads(x, false));
  expect_same(same.forward_all_heads(x, false), {same.forward(x, false)});
}

TEST(Attach, RejectsDuplicateAndNonBoundaryLocations) {
  auto net = build_backbone<double>(tinyres8(), 1);
  EXPECT_THROW(attach_heads(net, {1, 1}, HeadStyle::Default, 1), ConfigError);
  EXPECT_THROW(attach_heads(net, {0}, HeadStyle::Default, 1), ConfigError);
  EXPECT_THROW(attach_heads(net, {3}, HeadStyle::Default, 1), ConfigError);
  auto one = attach_heads(net, {2}, HeadStyle::Default, 1);
  EXPECT_THROW(attach_heads(one, {2}, HeadStyle::Default, 1), ConfigError);
}

TEST(Attach, EveryHeadPathHasBackboneDownsamplingCount) {
  Engine eng(4);
  for (const auto& spec : {tinyres8(), tinyres14(), all_downsampling()}) {
    for (auto style : {HeadStyle::Default, HeadStyle::Narrow}) {
      auto net = attach_heads(build_backbone<double>(spec, 1), attachment_points(spec), style, 5);
      const auto out = net.forward_all_heads(random_tensor<double>({2, 3, 16, 16}, eng), true);
      ASSERT_EQ(out.size(), attachment_points(spec).size() + 1);
      for (const auto& o : out) {
        EXPECT_EQ(ag::downsampling_depth(o), spec.downsample_count()) << spec.name;
      }
    }
  }
}

TEST(Attach, OrderOfLocationsDoesNotMatter) {
  Engine eng(5);
  auto bare = build_backbone<double>(all_downsampling(), 1);
  auto a = attach_heads(bare.clone(), {2, 0, 1}, HeadStyle::Default, 7);
  auto b = attach_heads(bare.clone(), {0, 1, 2}, HeadStyle::Default, 7);
  auto c = attach_heads(attach_heads(bare.clone(), {1}, HeadStyle::Default, 7), {2, 0},
                        HeadStyle::Default, 7);
  auto x = random_tensor<double>({2, 3, 16, 16}, eng);
  expect_same(a.forward_all_heads(x, false), b.forward_all_heads(x, false));
  expect_same(a.forward_all_heads(x, false), c.forward_all_heads(x, false));
}

TEST(Attach, TrunkRunsOnceForAllHeads) {
  Engine eng(6);
  auto net = attach_heads(build_backbone<double>(tinyres8(), 1), {1, 2}, HeadStyle::Default, 1);
  auto x = random_tensor<double>({2, 3, 8, 8}, eng);
  ag::reset_op_count();
  net.forward(x, false);
  const std::size_t single = ag::op_count();
  ag::reset_op_count();
  net.forward_all_heads(x, false);
  const std::size_t all = ag::op_count();
  EXPECT_LT(all, 3 * single);
  EXPECT_GT(all, single);
}

TEST(Attach, ApfcHeadIsPoolAndLinearOnly) {
  Engine eng(7);
  auto bare = build_backbone<double>(tinyres8(), 1);
  auto net = attach_heads(bare, {1, 2}, HeadStyle::Apfc, 1);
  EXPECT_EQ(net.parameter_count() - bare.parameter_count(),
            (16 * 16 * 10 + 10) + (32 * 16 * 10 + 10));
  const auto out = net.forward_all_heads(random_tensor<double>({2, 3, 8, 8}, eng), true);
  for (const auto& o : out) EXPECT_EQ(o.shape(), ag::Shape({2, 10}));
}

TEST(Export, ExcludesAuxiliaryHeads) {
  auto bare = build_backbone<float>(tinyres8(), 1);
  auto net = attach_heads(bare, {1, 2}, HeadStyle::Default, 1);
  EXPECT_GT(net.parameter_count(), bare.parameter_count());
  const auto m1 = net.export_backbone();
  const auto m0 = bare.export_backbone();
  EXPECT_EQ(m1.parameter_count(), m0.parameter_count());
  EXPECT_EQ(m1.parameter_count(), bare.parameter_count());
  ASSERT_EQ(m1.entries.size(), m0.entries.size());
  for (std::size_t i = 0; i < m0.entries.size(); ++i) {
    EXPECT_EQ(m1.entries[i].name, m0.entries[i].name);
    EXPECT_EQ(m1.entries[i].shape, m0.entries[i].shape);
  }
}

TEST(Export, ImportReproducesDefaultLogits) {
  Engine eng(8);
  auto net = attach_heads(build_backbone<double>(tinyres8(), 1), {1, 2}, HeadStyle::Default, 1);
  // Move the running statistics away from their initial values.
  net.forward_all_heads(random_tensor<double>({4, 3, 8, 8}, eng), true);
  auto fresh = build_backbone<double>(tinyres8(), 99);
  fresh.import_backbone(net.export_backbone());
  auto x = random_tensor<double>({3, 3, 8, 8}, eng);
  expect_same({net.forward_all_heads(x, false).back()}, {fresh.forward(x, false)});
}

TEST(Export, FileRoundTripIsExactInSinglePrecision) {
  Engine eng(9);
  auto net = build_backbone<float>(tinyres8(), 3);
  net.forward(random_tensor<float>({4, 3, 8, 8}, eng), true);
  const auto path = std::filesystem::temp_directory_path() / "dcm_test_manifest.bin";
  write_manifest(net.export_backbone(), path);
  auto fresh = build_backbone<float>(tinyres8(), 4);
  fresh.import_backbone(read_manifest(path));
  auto x = random_tensor<float>({2, 3, 8, 8}, eng);
  const auto a = net.forward(x, false);
  const auto b = fresh.forward(x, false);
  EXPECT_TRUE(std::equal(a.values().begin(), a.values().end(), b.values().begin()));

  // Truncation is reported with the file name.
  const auto size = std::filesystem::file_size(path);
  std::filesystem::resize_file(path, size - 3);
  try {
    read_manifest(path);
    FAIL() << "expected DataError";
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("dcm_test_manifest.bin"), std::string::npos);
  }
  std::filesystem::remove(path);
}

TEST(Export, MismatchedManifestIsRejected) {
  auto m = build_backbone<float>(tinyres14(), 1).export_backbone();
  auto net = build_backbone<float>(tinyres8(), 1);
  EXPECT_THROW(net.import_backbone(m), DataError);
}

TEST(Export, AttachingHeadsPreservesDefaultClassifier) {
  Engine eng(10);
  auto bare = build_backbone<double>(tinyres8(), 1);
  auto x = random_tensor<double>({2, 3, 8, 8}, eng);
  const auto before = bare.forward(x, false);
  auto net = attach_heads(bare.clone(), {1, 2}, HeadStyle::Narrow, 4);
  expect_same({before}, {net.forward_all_heads(x, false).back()});
}

TEST(Clone, SharesNoStorage) {
  auto net = build_backbone<double>(tinyres8(), 1);
  auto copy = net.clone();
  copy.parameters()[0].mutable_values()[0] += 1.0;
  EXPECT_NE(copy.parameters()[0].values()[0], net.parameters()[0].values()[0]);
}

}  // namespace
}  // namespace dcm::net
