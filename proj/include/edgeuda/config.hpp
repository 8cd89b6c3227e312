#pragma once

// Plain-text `key = value` training configuration. Blank lines and lines
// starting with '#' are ignored. Required keys must all be present; optional
// keys fall back to TrainConfig defaults. Unknown keys are rejected.

#include <algorithm>
#include <array>
#include <charconv>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "edgeuda/trainer.hpp"

namespace edgeuda {

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

inline double parse_double(const std::string& key, const std::string& v) {
  std::size_t pos = 0;
  double d = 0;
  try {
    d = std::stod(v, &pos);
  } catch (const std::exception&) {
    pos = 0;
  }
  if (pos != v.size() || v.empty()) throw ConfigError("config key '" + key + "': expected a number, got '" + v + "'");
  return d;
}

inline std::uint64_t parse_uint(const std::string& key, const std::string& v) {
  std::uint64_t u = 0;
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), u);
  if (ec != std::errc() || p != v.data() + v.size())
    throw ConfigError("config key '" + key + "': expected a non-negative integer, got '" + v + "'");
  return u;
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError("config key '" + key + "': expected true|false, got '" + v + "'");
}

template <std::size_t N>
std::array<std::size_t, N> parse_widths(const std::string& key, const std::string& v) {
  std::array<std::size_t, N> out{};
  std::istringstream is(v);
  std::string tok;
  std::size_t i = 0;
  while (std::getline(is, tok, ',')) {
    if (i == N) throw ConfigError("config key '" + key + "': expected " + std::to_string(N) + " widths");
    out[i++] = parse_uint(key, trim(tok));
  }
  if (i != N) throw ConfigError("config key '" + key + "': expected " + std::to_string(N) + " widths");
  return out;
}

template <std::size_t N>
std::string join_widths(const std::array<std::size_t, N>& a) {
  std::string s;
  for (std::size_t i = 0; i < N; ++i) s += (i ? "," : "") + std::to_string(a[i]);
  return s;
}

inline std::string num(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

struct ConfigKey {
  const char* name;
  bool required;
  const char* help;
  std::function<void(TrainConfig&, const std::string&)> set;
  std::function<std::string(const TrainConfig&)> get;
};

inline const std::vector<ConfigKey>& config_keys() {
  using C = TrainConfig;
  using S = const std::string&;
  static const std::vector<ConfigKey> keys = {
      {"lr_nets", true, "learning rate of contour net, encoder and decoder",
       [](C& c, S v) { c.lr_nets = parse_double("lr_nets", v); }, [](const C& c) { return num(c.lr_nets); }},
      {"lr_disc", true, "learning rate of both discriminators",
       [](C& c, S v) { c.lr_disc = parse_double("lr_disc", v); }, [](const C& c) { return num(c.lr_disc); }},
      {"momentum", true, "SGD momentum", [](C& c, S v) { c.momentum = parse_double("momentum", v); },
       [](const C& c) { return num(c.momentum); }},
      {"alpha", true, "edge-map adversarial weight", [](C& c, S v) { c.weights.alpha = parse_double("alpha", v); },
       [](const C& c) { return num(c.weights.alpha); }},
      {"beta", true, "feature adversarial weight", [](C& c, S v) { c.weights.beta = parse_double("beta", v); },
       [](const C& c) { return num(c.weights.beta); }},
      {"lambda", true, "self-entropy weight", [](C& c, S v) { c.weights.lambda = parse_double("lambda", v); },
       [](const C& c) { return num(c.weights.lambda); }},
      {"steps", true, "total training steps", [](C& c, S v) { c.steps = parse_uint("steps", v); },
       [](const C& c) { return std::to_string(c.steps); }},
      {"batch", true, "images per domain per step", [](C& c, S v) { c.batch = parse_uint("batch", v); },
       [](const C& c) { return std::to_string(c.batch); }},
      {"seed", true, "experiment seed (data, init, sampling)", [](C& c, S v) { c.seed = parse_uint("seed", v); },
       [](const C& c) { return std::to_string(c.seed); }},
      {"use_edge_adv", true, "train the edge-map discriminator and its generator term",
       [](C& c, S v) { c.use_edge_adv = parse_bool("use_edge_adv", v); },
       [](const C& c) { return std::string(c.use_edge_adv ? "true" : "false"); }},
      {"use_feat_adv", true, "train the feature discriminator and its generator term",
       [](C& c, S v) { c.use_feat_adv = parse_bool("use_feat_adv", v); },
       [](const C& c) { return std::string(c.use_feat_adv ? "true" : "false"); }},
      {"use_entropy", true, "add target self-entropy to encoder and decoder objectives",
       [](C& c, S v) { c.use_entropy = parse_bool("use_entropy", v); },
       [](const C& c) { return std::string(c.use_entropy ? "true" : "false"); }},
      {"use_edge_conditioning", true, "feed predicted edge maps to the segmentation net (zeros otherwise)",
       [](C& c, S v) { c.use_edge_conditioning = parse_bool("use_edge_conditioning", v); },
       [](const C& c) { return std::string(c.use_edge_conditioning ? "true" : "false"); }},
      {"eval_every", true, "evaluation interval in steps (0 = only at the end)",
       [](C& c, S v) { c.eval_every = parse_uint("eval_every", v); },
       [](const C& c) { return std::to_string(c.eval_every); }},
      {"non_saturating", false, "generator term -log sigmoid(z_t) (true) or literal negated discriminator loss",
       [](C& c, S v) { c.non_saturating = parse_bool("non_saturating", v); },
       [](const C& c) { return std::string(c.non_saturating ? "true" : "false"); }},
      {"entropy_both_domains", false, "apply self-entropy to source predictions as well",
       [](C& c, S v) { c.entropy_both_domains = parse_bool("entropy_both_domains", v); },
       [](const C& c) { return std::string(c.entropy_both_domains ? "true" : "false"); }},
      {"detach_edges", false, "stop segmentation gradients at the predicted edge map",
       [](C& c, S v) { c.detach_edges = parse_bool("detach_edges", v); },
       [](const C& c) { return std::string(c.detach_edges ? "true" : "false"); }},
      {"train_pool", false, "training phantoms per domain", [](C& c, S v) { c.train_pool = parse_uint("train_pool", v); },
       [](const C& c) { return std::to_string(c.train_pool); }},
      {"eval_pool", false, "held-out phantoms per domain", [](C& c, S v) { c.eval_pool = parse_uint("eval_pool", v); },
       [](const C& c) { return std::to_string(c.eval_pool); }},
      {"hd_percentile", false, "Hausdorff percentile (100 = classical, 95 = HD95)",
       [](C& c, S v) { c.hd_percentile = parse_double("hd_percentile", v); },
       [](const C& c) { return num(c.hd_percentile); }},
      {"image_size", false, "phantom side length (multiple of 8, >= 32)",
       [](C& c, S v) { c.arch.image_size = c.data.image_size = parse_uint("image_size", v); },
       [](const C& c) { return std::to_string(c.arch.image_size); }},
      {"tumor_probability", false, "probability a phantom carries a tumor",
       [](C& c, S v) { c.data.tumor_probability = parse_double("tumor_probability", v); },
       [](const C& c) { return num(c.data.tumor_probability); }},
      {"noise_std", false, "rendering noise stddev (both modalities)",
       [](C& c, S v) { c.data.source.noise_std = c.data.target.noise_std = parse_double("noise_std", v); },
       [](const C& c) { return num(c.data.source.noise_std); }},
      {"bias_amplitude", false, "multiplicative bias-field amplitude (both modalities)",
       [](C& c, S v) { c.data.source.bias_amplitude = c.data.target.bias_amplitude = parse_double("bias_amplitude", v); },
       [](const C& c) { return num(c.data.source.bias_amplitude); }},
      {"canny_sigma", false, "Canny Gaussian sigma",
       [](C& c, S v) { c.data.canny.gaussian_sigma = parse_double("canny_sigma", v); },
       [](const C& c) { return num(c.data.canny.gaussian_sigma); }},
      {"canny_kernel", false, "Canny Gaussian kernel size (odd)",
       [](C& c, S v) { c.data.canny.kernel_size = static_cast<int>(parse_uint("canny_kernel", v)); },
       [](const C& c) { return std::to_string(c.data.canny.kernel_size); }},
      {"canny_low", false, "Canny low threshold (fraction of max gradient)",
       [](C& c, S v) { c.data.canny.low_threshold = parse_double("canny_low", v); },
       [](const C& c) { return num(c.data.canny.low_threshold); }},
      {"canny_high", false, "Canny high threshold (fraction of max gradient)",
       [](C& c, S v) { c.data.canny.high_threshold = parse_double("canny_high", v); },
       [](const C& c) { return num(c.data.canny.high_threshold); }},
      {"contour_width", false, "contour net base width",
       [](C& c, S v) { c.arch.contour_width = parse_uint("contour_width", v); },
       [](const C& c) { return std::to_string(c.arch.contour_width); }},
      {"encoder_widths", false, "encoder widths: stem,down1,down2,down3 (last = feature width)",
       [](C& c, S v) { c.arch.encoder_widths = parse_widths<4>("encoder_widths", v); },
       [](const C& c) { return join_widths(c.arch.encoder_widths); }},
      {"decoder_widths", false, "decoder widths: up1,up2,up3",
       [](C& c, S v) { c.arch.decoder_widths = parse_widths<3>("decoder_widths", v); },
       [](const C& c) { return join_widths(c.arch.decoder_widths); }},
      {"edge_disc_widths", false, "edge discriminator conv widths (4)",
       [](C& c, S v) { c.arch.edge_disc_widths = parse_widths<4>("edge_disc_widths", v); },
       [](const C& c) { return join_widths(c.arch.edge_disc_widths); }},
      {"feat_disc_widths", false, "feature discriminator conv widths (3)",
       [](C& c, S v) { c.arch.feat_disc_widths = parse_widths<3>("feat_disc_widths", v); },
       [](const C& c) { return join_widths(c.arch.feat_disc_widths); }},
  };
  return keys;
}

}  // namespace detail

inline TrainConfig parse_config(std::istream& is) {
  TrainConfig cfg;
  std::set<std::string> seen;
  std::string line;
  std::size_t lineno = 0;
  const auto& keys = detail::config_keys();
  while (std::getline(is, line)) {
    ++lineno;
    const std::string t = detail::trim(line);
    if (t.empty() || t[0] == '#') continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos) throw ConfigError("config line " + std::to_string(lineno) + ": expected key = value");
    const std::string key = detail::trim(t.substr(0, eq)), value = detail::trim(t.substr(eq + 1));
    const auto it = std::find_if(keys.begin(), keys.end(), [&](const auto& k) { return key == k.name; });
    if (it == keys.end()) throw ConfigError("config line " + std::to_string(lineno) + ": unknown key '" + key + "'");
    if (!seen.insert(key).second) throw ConfigError("config key '" + key + "' given twice");
    it->set(cfg, value);
  }
  for (const auto& k : keys)
    if (k.required && !seen.count(k.name)) throw ConfigError(std::string("missing config key '") + k.name + "'");
  cfg.validate();
  return cfg;
}

inline TrainConfig parse_config(const std::string& text) {
  std::istringstream is(text);
  return parse_config(is);
}

inline TrainConfig load_config(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open config file " + path);
  return parse_config(is);
}

/// Every key with its current value; parse_config(config_text(c)) == c.
inline std::string config_text(const TrainConfig& cfg) {
  std::ostringstream os;
  for (const auto& k : detail::config_keys()) os << k.name << " = " << k.get(cfg) << '\n';
  return os.str();
}

/// Documentation block for --help.
inline std::string config_help() {
  std::ostringstream os;
  os << "Config file keys (key = value, '#' comments):\n";
  for (const auto& k : detail::config_keys())
    os << "  " << k.name << (k.required ? " (required)" : "") << ": " << k.help << '\n';
  return os.str();
}

}  // namespace edgeuda
