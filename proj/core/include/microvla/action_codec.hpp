#pragma once

#include <array>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace microvla {

// 7-DoF end-effector delta. Translations in [-1, 1], rotations in [-pi, pi],
// gripper is exactly 0 or 1.
struct ActionVector {
  double dx = 0, dy = 0, dz = 0;
  double roll = 0, pitch = 0, yaw = 0;
  int gripper = 0;

  void validate() const;
  bool operator==(const ActionVector&) const = default;
};

// Short-horizon action sequence.
struct ActionChunk {
  std::vector<ActionVector> actions;

  std::size_t horizon() const { return actions.size(); }
  void validate(std::size_t max_horizon = 4) const;
  bool operator==(const ActionChunk&) const = default;
};

enum class ActionComponent : std::uint8_t { Dx, Dy, Dz, Roll, Pitch, Yaw, Gripper };

constexpr std::array<ActionComponent, 7> kDefaultComponentOrder = {
    ActionComponent::Dx,   ActionComponent::Dy,    ActionComponent::Dz,  ActionComponent::Roll,
    ActionComponent::Pitch, ActionComponent::Yaw,  ActionComponent::Gripper};

double component_value(const ActionVector& a, ActionComponent c);
void set_component(ActionVector& a, ActionComponent c, double v);

// String tokenizer configuration. Tokens are spelled as vocabulary entries:
// digits / "." / "-" are single-character tokens shared with text, the two
// separators are dedicated tokens.
struct CodecConfig {
  int decimals = 4;
  std::array<ActionComponent, 7> component_order = kDefaultComponentOrder;
  std::string component_separator = "<sep>";
  std::string action_separator = "<asep>";

  void validate() const;
};

// Uniform-bin baseline tokenizer; each component maps to one of num_bins
// dedicated tokens.
struct BinCodecConfig {
  int num_bins = 256;
  double translation_min = -1.0, translation_max = 1.0;
  double rotation_min = -3.14159265358979323846, rotation_max = 3.14159265358979323846;

  void validate() const;
  double range_min(ActionComponent c) const;
  double range_max(ActionComponent c) const;
};

// Parse failure; `position` is the index of the offending token.
class CodecError : public std::runtime_error {
 public:
  CodecError(const std::string& msg, std::size_t position)
      : std::runtime_error(msg), position_(position) {}
  std::size_t position() const { return position_; }

 private:
  std::size_t position_ = 0;
};

// Round half away from zero to `decimals` fractional digits.
double quantize(double value, int decimals);

ActionVector quantize_action(const ActionVector& a, int decimals);
ActionChunk quantize_chunk(const ActionChunk& c, int decimals);

// One scalar -> character tokens: optional "-", one integer digit, ".",
// exactly `decimals` fraction digits. Requires |value| < 10 after quantization.
std::vector<std::string> encode_scalar(double value, const CodecConfig& config);

// Exact left inverse of encode_scalar on quantized values. Throws CodecError
// on any grammar violation; negative zero normalizes to zero.
double decode_scalar(const std::vector<std::string>& tokens, const CodecConfig& config);

std::vector<std::string> encode_chunk(const ActionChunk& chunk, const CodecConfig& config);
ActionChunk decode_chunk(const std::vector<std::string>& tokens, const CodecConfig& config);

// Bin baseline: 7 bin indices in component order / exact inverse to centers.
// Gripper decodes by thresholding the bin center at 0.5 so it stays binary.
std::vector<std::int32_t> bin_encode(const ActionVector& a, const BinCodecConfig& config);
ActionVector bin_decode(const std::vector<std::int32_t>& ids, const BinCodecConfig& config);

struct QuantizationErrorReport {
  double string_analytic_max = 0;
  double string_measured_max = 0;
  double string_measured_mean = 0;
  double bin_analytic_max = 0;
  double bin_measured_max = 0;
  double bin_measured_mean = 0;
};

// Dense sweep over the translation range comparing both codecs' round-trip
// error against their analytic bounds.
QuantizationErrorReport quantization_error_report(const CodecConfig& string_config,
                                                  const BinCodecConfig& bin_config);

}  // namespace microvla
