#include "microvla/action_codec.hpp"

#include <algorithm>
#include <cmath>

namespace microvla {

namespace {

constexpr double kPi = 3.14159265358979323846;

bool is_digit_token(const std::string& t) {
  return t.size() == 1 && t[0] >= '0' && t[0] <= '9';
}

double pow10i(int n) {
  double p = 1;
  for (int i = 0; i < n; ++i) p *= 10.0;
  return p;
}

}  // namespace

void ActionVector::validate() const {
  const auto in = [](double v, double lo, double hi) {
    return std::isfinite(v) && v >= lo && v <= hi;
  };
  if (!in(dx, -1, 1) || !in(dy, -1, 1) || !in(dz, -1, 1)) {
    throw std::invalid_argument("action translation out of [-1, 1]");
  }
  if (!in(roll, -kPi, kPi) || !in(pitch, -kPi, kPi) || !in(yaw, -kPi, kPi)) {
    throw std::invalid_argument("action rotation out of [-pi, pi]");
  }
  if (gripper != 0 && gripper != 1) {
    throw std::invalid_argument("gripper must be exactly 0 or 1");
  }
}

void ActionChunk::validate(std::size_t max_horizon) const {
  if (actions.empty() || actions.size() > max_horizon) {
    throw std::invalid_argument("chunk horizon " + std::to_string(actions.size()) +
                                " outside [1, " + std::to_string(max_horizon) + "]");
  }
  for (const auto& a : actions) a.validate();
}

double component_value(const ActionVector& a, ActionComponent c) {
  switch (c) {
    case ActionComponent::Dx: return a.dx;
    case ActionComponent::Dy: return a.dy;
    case ActionComponent::Dz: return a.dz;
    case ActionComponent::Roll: return a.roll;
    case ActionComponent::Pitch: return a.pitch;
    case ActionComponent::Yaw: return a.yaw;
    case ActionComponent::Gripper: return a.gripper;
  }
  throw std::logic_error("bad component");
}

void set_component(ActionVector& a, ActionComponent c, double v) {
  switch (c) {
    case ActionComponent::Dx: a.dx = v; return;
    case ActionComponent::Dy: a.dy = v; return;
    case ActionComponent::Dz: a.dz = v; return;
    case ActionComponent::Roll: a.roll = v; return;
    case ActionComponent::Pitch: a.pitch = v; return;
    case ActionComponent::Yaw: a.yaw = v; return;
    case ActionComponent::Gripper: a.gripper = static_cast<int>(v); return;
  }
  throw std::logic_error("bad component");
}

void CodecConfig::validate() const {
  if (decimals < 1) throw std::invalid_argument("decimals must be >= 1");
  std::array<int, 7> seen{};
  for (auto c : component_order) seen[static_cast<std::size_t>(c)]++;
  for (int n : seen) {
    if (n != 1) throw std::invalid_argument("component_order must be a permutation of all 7 fields");
  }
  if (component_separator.empty() || action_separator.empty() ||
      component_separator == action_separator) {
    throw std::invalid_argument("separators must be distinct and nonempty");
  }
}

void BinCodecConfig::validate() const {
  if (num_bins < 2) throw std::invalid_argument("num_bins must be >= 2");
  if (translation_min >= translation_max || rotation_min >= rotation_max) {
    throw std::invalid_argument("bin codec range min must be < max");
  }
}

double BinCodecConfig::range_min(ActionComponent c) const {
  switch (c) {
    case ActionComponent::Roll:
    case ActionComponent::Pitch:
    case ActionComponent::Yaw: return rotation_min;
    case ActionComponent::Gripper: return 0.0;
    default: return translation_min;
  }
}

double BinCodecConfig::range_max(ActionComponent c) const {
  switch (c) {
    case ActionComponent::Roll:
    case ActionComponent::Pitch:
    case ActionComponent::Yaw: return rotation_max;
    case ActionComponent::Gripper: return 1.0;
    default: return translation_max;
  }
}

double quantize(double value, int decimals) {
  if (!std::isfinite(value)) throw std::invalid_argument("quantize: value must be finite");
  const double p = pow10i(decimals);
  return std::round(value * p) / p;
}

namespace {

// Rounding can push a value just past its range bound (pi rounds up to
// 3.1416 at 4 decimals); clamp to the outermost quantized value inside.
double quantize_in_range(double v, int decimals, double lo, double hi) {
  const double p = pow10i(decimals);
  const double q = quantize(v, decimals);
  return std::clamp(q, std::ceil(lo * p) / p, std::floor(hi * p) / p);
}

}  // namespace

ActionVector quantize_action(const ActionVector& a, int decimals) {
  ActionVector q = a;
  q.dx = quantize_in_range(a.dx, decimals, -1, 1);
  q.dy = quantize_in_range(a.dy, decimals, -1, 1);
  q.dz = quantize_in_range(a.dz, decimals, -1, 1);
  q.roll = quantize_in_range(a.roll, decimals, -kPi, kPi);
  q.pitch = quantize_in_range(a.pitch, decimals, -kPi, kPi);
  q.yaw = quantize_in_range(a.yaw, decimals, -kPi, kPi);
  return q;
}

ActionChunk quantize_chunk(const ActionChunk& c, int decimals) {
  ActionChunk out;
  out.actions.reserve(c.actions.size());
  for (const auto& a : c.actions) out.actions.push_back(quantize_action(a, decimals));
  return out;
}

std::vector<std::string> encode_scalar(double value, const CodecConfig& config) {
  if (!std::isfinite(value)) throw std::invalid_argument("encode_scalar: value must be finite");
  const double q = quantize(value, config.decimals);
  if (std::abs(q) >= 10.0) {
    throw std::invalid_argument("encode_scalar: |" + std::to_string(q) +
                                "| >= 10 cannot be rendered with one integer digit");
  }
  const double p = pow10i(config.decimals);
  long long n = std::llround(std::abs(q) * p);
  std::vector<std::string> tokens;
  if (q < 0.0 && n != 0) tokens.push_back("-");
  const long long ip = n / static_cast<long long>(p);
  tokens.push_back(std::string(1, static_cast<char>('0' + ip)));
  tokens.push_back(".");
  long long frac = n % static_cast<long long>(p);
  std::string digits(static_cast<std::size_t>(config.decimals), '0');
  for (int i = config.decimals - 1; i >= 0; --i) {
    digits[static_cast<std::size_t>(i)] = static_cast<char>('0' + frac % 10);
    frac /= 10;
  }
  for (char d : digits) tokens.push_back(std::string(1, d));
  return tokens;
}

double decode_scalar(const std::vector<std::string>& tokens, const CodecConfig& config) {
  const std::size_t expect_unsigned = static_cast<std::size_t>(config.decimals) + 2;
  std::size_t pos = 0;
  double sign = 1.0;
  if (!tokens.empty() && tokens[0] == "-") {
    sign = -1.0;
    pos = 1;
  }
  if (tokens.size() - pos != expect_unsigned) {
    throw CodecError("scalar token count " + std::to_string(tokens.size()) + " does not match sign? d '.' d{" +
                         std::to_string(config.decimals) + "} grammar",
                     tokens.size());
  }
  if (!is_digit_token(tokens[pos])) {
    throw CodecError("expected integer digit, got '" + tokens[pos] + "'", pos);
  }
  const int ip = tokens[pos][0] - '0';
  ++pos;
  if (tokens[pos] != ".") {
    throw CodecError("expected '.', got '" + tokens[pos] + "'", pos);
  }
  ++pos;
  long long frac = 0;
  for (int i = 0; i < config.decimals; ++i, ++pos) {
    if (!is_digit_token(tokens[pos])) {
      throw CodecError("expected fraction digit, got '" + tokens[pos] + "'", pos);
    }
    frac = frac * 10 + (tokens[pos][0] - '0');
  }
  const double p = pow10i(config.decimals);
  const long long n = static_cast<long long>(ip) * static_cast<long long>(p) + frac;
  if (n == 0) return 0.0;  // "-0.000..." normalizes to zero
  return sign * (static_cast<double>(n) / p);
}

std::vector<std::string> encode_chunk(const ActionChunk& chunk, const CodecConfig& config) {
  config.validate();
  chunk.validate(chunk.actions.size());
  std::vector<std::string> out;
  for (std::size_t ai = 0; ai < chunk.actions.size(); ++ai) {
    if (ai) out.push_back(config.action_separator);
    const ActionVector& a = chunk.actions[ai];
    for (std::size_t ci = 0; ci < config.component_order.size(); ++ci) {
      if (ci) out.push_back(config.component_separator);
      const ActionComponent c = config.component_order[ci];
      if (c == ActionComponent::Gripper) {
        out.push_back(a.gripper ? "1" : "0");
      } else {
        const auto scalar = encode_scalar(component_value(a, c), config);
        out.insert(out.end(), scalar.begin(), scalar.end());
      }
    }
  }
  return out;
}

ActionChunk decode_chunk(const std::vector<std::string>& tokens, const CodecConfig& config) {
  config.validate();
  // Split on separators, tracking original positions for error reporting.
  std::vector<std::vector<std::pair<std::string, std::size_t>>> actions(1);
  std::vector<std::vector<std::size_t>> comp_breaks(1);
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (tokens[i] == config.action_separator) {
      actions.emplace_back();
      comp_breaks.emplace_back();
    } else if (tokens[i] == config.component_separator) {
      comp_breaks.back().push_back(actions.back().size());
    } else {
      actions.back().emplace_back(tokens[i], i);
    }
  }

  ActionChunk chunk;
  for (std::size_t ai = 0; ai < actions.size(); ++ai) {
    // Re-split this action's tokens into component groups.
    std::vector<std::vector<std::pair<std::string, std::size_t>>> groups;
    std::size_t start = 0;
    for (std::size_t b : comp_breaks[ai]) {
      groups.emplace_back(actions[ai].begin() + static_cast<std::ptrdiff_t>(start),
                          actions[ai].begin() + static_cast<std::ptrdiff_t>(b));
      start = b;
    }
    groups.emplace_back(actions[ai].begin() + static_cast<std::ptrdiff_t>(start), actions[ai].end());
    if (groups.size() != config.component_order.size()) {
      const std::size_t where = actions[ai].empty() ? 0 : actions[ai].front().second;
      throw CodecError("action " + std::to_string(ai) + " has " + std::to_string(groups.size()) +
                           " components, expected " + std::to_string(config.component_order.size()),
                       where);
    }
    ActionVector a;
    for (std::size_t ci = 0; ci < groups.size(); ++ci) {
      const auto& g = groups[ci];
      const ActionComponent c = config.component_order[ci];
      const std::size_t where = g.empty() ? (ci ? groups[ci - 1].back().second + 1 : 0) : g.front().second;
      if (c == ActionComponent::Gripper) {
        if (g.size() != 1 || (g[0].first != "0" && g[0].first != "1")) {
          throw CodecError("gripper must be a single '0' or '1' token", where);
        }
        a.gripper = g[0].first == "1" ? 1 : 0;
      } else {
        std::vector<std::string> scalar_tokens;
        scalar_tokens.reserve(g.size());
        for (const auto& [tok, _] : g) scalar_tokens.push_back(tok);
        try {
          set_component(a, c, decode_scalar(scalar_tokens, config));
        } catch (const CodecError& e) {
          const std::size_t at = e.position() < g.size() ? g[e.position()].second : where;
          throw CodecError(std::string(e.what()) + " (component " + std::to_string(ci) + ")", at);
        }
      }
    }
    chunk.actions.push_back(a);
  }
  return chunk;
}

std::vector<std::int32_t> bin_encode(const ActionVector& a, const BinCodecConfig& config) {
  config.validate();
  std::vector<std::int32_t> ids;
  ids.reserve(7);
  for (ActionComponent c : kDefaultComponentOrder) {
    const double v = component_value(a, c);
    const double lo = config.range_min(c), hi = config.range_max(c);
    if (!(v >= lo && v <= hi)) {
      throw std::invalid_argument("bin_encode: component value " + std::to_string(v) +
                                  " outside [" + std::to_string(lo) + ", " + std::to_string(hi) + "]");
    }
    auto b = static_cast<std::int64_t>(std::floor((v - lo) / (hi - lo) * config.num_bins));
    b = std::clamp<std::int64_t>(b, 0, config.num_bins - 1);
    ids.push_back(static_cast<std::int32_t>(b));
  }
  return ids;
}

ActionVector bin_decode(const std::vector<std::int32_t>& ids, const BinCodecConfig& config) {
  config.validate();
  if (ids.size() != 7) {
    throw CodecError("bin decode expects 7 ids, got " + std::to_string(ids.size()), ids.size());
  }
  ActionVector a;
  for (std::size_t i = 0; i < 7; ++i) {
    const std::int32_t b = ids[i];
    if (b < 0 || b >= config.num_bins) {
      throw CodecError("bin id " + std::to_string(b) + " outside [0, " +
                           std::to_string(config.num_bins) + ")",
                       i);
    }
    const ActionComponent c = kDefaultComponentOrder[i];
    const double lo = config.range_min(c), hi = config.range_max(c);
    const double center = lo + (static_cast<double>(b) + 0.5) * (hi - lo) / config.num_bins;
    if (c == ActionComponent::Gripper) {
      a.gripper = center >= 0.5 ? 1 : 0;
    } else {
      set_component(a, c, center);
    }
  }
  return a;
}

QuantizationErrorReport quantization_error_report(const CodecConfig& string_config,
                                                  const BinCodecConfig& bin_config) {
  string_config.validate();
  bin_config.validate();
  QuantizationErrorReport r;
  r.string_analytic_max = 0.5 / pow10i(string_config.decimals);
  r.bin_analytic_max =
      0.5 * (bin_config.translation_max - bin_config.translation_min) / bin_config.num_bins;

  const double lo = bin_config.translation_min, hi = bin_config.translation_max;
  const int steps = 160000;
  double ssum = 0, bsum = 0;
  for (int i = 0; i <= steps; ++i) {
    const double v = lo + (hi - lo) * static_cast<double>(i) / steps;
    const double sq = quantize(v, string_config.decimals);
    const double serr = std::abs(sq - v);
    r.string_measured_max = std::max(r.string_measured_max, serr);
    ssum += serr;

    ActionVector a;
    a.dx = v;
    const auto ids = bin_encode(a, bin_config);
    const double bd = bin_decode(ids, bin_config).dx;
    const double berr = std::abs(bd - v);
    r.bin_measured_max = std::max(r.bin_measured_max, berr);
    bsum += berr;
  }
  r.string_measured_mean = ssum / (steps + 1);
  r.bin_measured_mean = bsum / (steps + 1);
  return r;
}

}  // namespace microvla
