#pragma once

// Declarative backbone and head descriptions.
//
// A backbone is a 3x3 stem followed by S stages. Attachment location k
// (0 <= k < S) means "after stage k", where location 0 is the stem output.
// A location is a valid down-sampling boundary when stage k+1 downsamples;
// a head placed there rebuilds stages k+1..S, so it crosses the same
// down-sampling layers as the trunk does on its way to the default
// classifier.

#include <cstddef>
#include <string>
#include <string_view>
#include <vector>

namespace dcm::net {

enum class BlockType { Plain, Residual };

struct StageSpec {
  BlockType block = BlockType::Residual;
  std::size_t blocks = 1;
  std::size_t channels = 16;
  bool downsample = false;
};

struct BackboneSpec {
  std::string name = "custom";
  std::size_t in_channels = 3;
  std::size_t stem_channels = 16;
  std::vector<StageSpec> stages;
  std::size_t num_classes = 10;

  /// Every violated invariant, empty if valid.
  std::vector<std::string> problems() const;
  /// Throws ConfigError listing problems().
  void validate() const;

  std::size_t downsample_count() const;
  /// Channels of the feature map at location k.
  std::size_t channels_at(std::size_t location) const;
};

/// Stem 3x3x16, residual stages 16/32/64 with one block each; stages 2 and 3 downsample.
BackboneSpec tinyres8(std::size_t num_classes = 10, std::size_t in_channels = 3);
/// Two blocks per stage at widths 32/64/128.
BackboneSpec tinyres14(std::size_t num_classes = 10, std::size_t in_channels = 3);
/// "tinyres8" or "tinyres14"; throws ConfigError otherwise.
BackboneSpec backbone_preset(std::string_view name, std::size_t num_classes = 10,
                             std::size_t in_channels = 3);

/// Candidate attachment locations, ascending.
std::vector<std::size_t> attachment_points(const BackboneSpec& spec);
bool is_attachment_point(const BackboneSpec& spec, std::size_t location);

enum class HeadStyle {
  Default,  // later stages at twice the width, half the blocks (at least one)
  Narrow,   // later stages at the backbone width, half the blocks
  Apfc,     // 4x4 average pool + fully connected layer only
};

std::string_view to_string(HeadStyle style);
HeadStyle parse_head_style(std::string_view text);
std::string_view to_string(BlockType type);

struct HeadSpec {
  HeadStyle style = HeadStyle::Default;
  std::size_t location = 0;
  std::size_t in_channels = 0;
  std::vector<StageSpec> stages;  // empty for Apfc
  std::size_t num_classes = 10;

  std::size_t downsample_count() const;
};

/// Head for `location`; throws ConfigError when it is not an attachment point.
HeadSpec head_spec_for(const BackboneSpec& spec, std::size_t location, HeadStyle style);

}  // namespace dcm::net
