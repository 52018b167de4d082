#include "dcm/net/spec.hpp"

#include <fmt/format.h>
#include <fmt/ranges.h>

#include <algorithm>

#include "dcm/common/error.hpp"

namespace dcm::net {

std::vector<std::string> BackboneSpec::problems() const {
  std::vector<std::string> out;
  if (in_channels == 0) out.push_back("in_channels must be positive");
  if (stem_channels == 0) out.push_back("stem_channels must be positive");
  if (num_classes < 2) out.push_back("num_classes must be at least 2");
  if (stages.empty()) out.push_back("at least one stage is required");
  for (std::size_t i = 0; i < stages.size(); ++i) {
    if (stages[i].channels == 0) out.push_back(fmt::format("stages[{}].channels must be positive", i));
    if (stages[i].blocks == 0) out.push_back(fmt::format("stages[{}].blocks must be at least 1", i));
  }
  if (!stages.empty() && downsample_count() == 0) {
    out.push_back("at least one stage must downsample");
  }
  return out;
}

void BackboneSpec::validate() const {
  auto p = problems();
  if (!p.empty()) {
    for (auto& s : p) s = fmt::format("backbone '{}': {}", name, s);
    throw ConfigError(std::move(p));
  }
}

std::size_t BackboneSpec::downsample_count() const {
  return static_cast<std::size_t>(
      std::count_if(stages.begin(), stages.end(), [](const StageSpec& s) { return s.downsample; }));
}

std::size_t BackboneSpec::channels_at(std::size_t location) const {
  if (location > stages.size()) {
    throw ConfigError({fmt::format("location {} beyond the {} stages of '{}'", location,
                                   stages.size(), name)});
  }
  return location == 0 ? stem_channels : stages[location - 1].channels;
}

BackboneSpec tinyres8(std::size_t num_classes, std::size_t in_channels) {
  BackboneSpec s;
  s.name = "tinyres8";
  s.in_channels = in_channels;
  s.stem_channels = 16;
  s.stages = {{BlockType::Residual, 1, 16, false},
              {BlockType::Residual, 1, 32, true},
              {BlockType::Residual, 1, 64, true}};
  s.num_classes = num_classes;
  return s;
}

BackboneSpec tinyres14(std::size_t num_classes, std::size_t in_channels) {
  BackboneSpec s;
  s.name = "tinyres14";
  s.in_channels = in_channels;
  s.stem_channels = 32;
  s.stages = {{BlockType::Residual, 2, 32, false},
              {BlockType::Residual, 2, 64, true},
              {BlockType::Residual, 2, 128, true}};
  s.num_classes = num_classes;
  return s;
}

BackboneSpec backbone_preset(std::string_view name, std::size_t num_classes,
                             std::size_t in_channels) {
  if (name == "tinyres8") return tinyres8(num_classes, in_channels);
  if (name == "tinyres14") return tinyres14(num_classes, in_channels);
  throw ConfigError({fmt::format("unknown backbone '{}' (expected tinyres8 or tinyres14)", name)});
}

std::vector<std::size_t> attachment_points(const BackboneSpec& spec) {
  std::vector<std::size_t> out;
  for (std::size_t k = 0; k < spec.stages.size(); ++k) {
    if (spec.stages[k].downsample) out.push_back(k);
  }
  return out;
}

bool is_attachment_point(const BackboneSpec& spec, std::size_t location) {
  return location < spec.stages.size() && spec.stages[location].downsample;
}

std::string_view to_string(HeadStyle style) {
  switch (style) {
    case HeadStyle::Default: return "default";
    case HeadStyle::Narrow: return "narrow";
    case HeadStyle::Apfc: return "apfc";
  }
  return "?";
}

HeadStyle parse_head_style(std::string_view text) {
  if (text == "default") return HeadStyle::Default;
  if (text == "narrow") return HeadStyle::Narrow;
  if (text == "apfc") return HeadStyle::Apfc;
  throw ConfigError({fmt::format("unknown head style '{}' (expected default, narrow or apfc)", text)});
}

std::string_view to_string(BlockType type) {
  return type == BlockType::Plain ? "plain" : "residual";
}

std::size_t HeadSpec::downsample_count() const {
  return static_cast<std::size_t>(
      std::count_if(stages.begin(), stages.end(), [](const StageSpec& s) { return s.downsample; }));
}

HeadSpec head_spec_for(const BackboneSpec& spec, std::size_t location, HeadStyle style) {
  if (!is_attachment_point(spec, location)) {
    throw ConfigError({fmt::format(
        "location {} of '{}' is not a down-sampling boundary (valid: {})", location, spec.name,
        fmt::join(attachment_points(spec), ", "))});
  }
  HeadSpec h;
  h.style = style;
  h.location = location;
  h.in_channels = spec.channels_at(location);
  h.num_classes = spec.num_classes;
  if (style == HeadStyle::Apfc) return h;
  const std::size_t widen = style == HeadStyle::Default ? 2 : 1;
  for (std::size_t j = location; j < spec.stages.size(); ++j) {
    StageSpec s = spec.stages[j];
    s.channels *= widen;
    s.blocks = std::max<std::size_t>(1, s.blocks / 2);
    h.stages.push_back(s);
  }
  return h;
}

}  // namespace dcm::net
