#pragma once

// RunConfig: every training hyperparameter, readable from and writable to a flat
// `key = value` text file. Keys are listed (with defaults) by config_keys().

#include <array>
#include <charconv>
#include <cstdint>
#include <fstream>
#include <functional>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include "dstcs/core.hpp"
#include "dstcs/losses.hpp"
#include "dstcs/models.hpp"
#include "dstcs/optim.hpp"

namespace dstcs {

enum class EvalModel { student1, student2, teacher };

struct RunConfig {
  long iterations = 30000;
  int batch_size = 16;
  int labeled_per_batch = 8;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  double lr = 0.01;
  LrSchedule schedule = LrSchedule::polynomial;
  double poly_power = 0.9;
  LossWeights loss{};
  bool nw_dice = true;
  NWDiceConfig nw{};
  double ema_decay = 0.99;
  double noise = 0.2;
  double rotation_deg = 15.0;
  bool flip = true;
  bool epis = true;
  int patch_size = 16;
  int base_width = 16;
  int embed_dim = 32;
  int heads = 4;
  double dropout = 0.1;
  double labeled_ratio = 0.2;
  std::uint64_t split_seed = 0;
  std::uint64_t seed = 0;
  long eval_every = 500;
  long checkpoint_every = 5000;
  EvalModel eval_model = EvalModel::student1;
  double spacing = 1.0;

  int unlabeled_per_batch() const noexcept { return batch_size - labeled_per_batch; }

  ModelConfig model_config(int input_size) const {
    return {input_size, base_width, embed_dim, heads, dropout, seed};
  }

  void validate() const {
    auto fail = [](const std::string& m) { throw ConfigError(m); };
    if (iterations < 0) fail("iterations must be non-negative");
    if (batch_size < 1 || labeled_per_batch < 1 || labeled_per_batch > batch_size)
      fail("need 1 <= labeled_per_batch <= batch_size");
    if (!(lr > 0)) fail("lr must be positive");
    if (momentum < 0 || momentum >= 1) fail("momentum must lie in [0, 1)");
    if (weight_decay < 0) fail("weight_decay must be non-negative");
    if (loss.alpha < 0 || loss.beta < 0 || loss.gamma < 0 || loss.mu < 0) fail("loss weights must be non-negative");
    if (!(loss.tau > 0)) fail("loss.tau must be positive");
    nw.validate();
    if (ema_decay < 0 || ema_decay > 1) fail("ema.decay must lie in [0, 1]");
    if (noise < 0) fail("augment.noise must be non-negative");
    if (patch_size < 1) fail("augment.patch_size must be positive");
    if (!(labeled_ratio > 0 && labeled_ratio <= 1)) fail("data.labeled_ratio must lie in (0, 1]");
    if (eval_every < 1 || checkpoint_every < 1) fail("eval_every and checkpoint_every must be positive");
    if (!(spacing > 0)) fail("eval.spacing must be positive");
    model_config(8).validate();
  }
};

namespace detail {

// shortest text that parses back to the same double
inline std::string fmt_double(double v) {
  char buf[32];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

inline double parse_double(const std::string& key, const std::string& v) {
  try {
    std::size_t pos = 0;
    const double d = std::stod(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return d;
  } catch (const std::logic_error&) {
    throw ConfigError("invalid number '" + v + "' for key '" + key + "'");
  }
}

inline long parse_long(const std::string& key, const std::string& v) {
  try {
    std::size_t pos = 0;
    const long d = std::stol(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return d;
  } catch (const std::logic_error&) {
    throw ConfigError("invalid integer '" + v + "' for key '" + key + "'");
  }
}

inline std::uint64_t parse_u64(const std::string& key, const std::string& v) {
  try {
    std::size_t pos = 0;
    const auto d = std::stoull(v, &pos);
    if (pos != v.size() || v.starts_with('-')) throw std::invalid_argument(v);
    return d;
  } catch (const std::logic_error&) {
    throw ConfigError("invalid unsigned integer '" + v + "' for key '" + key + "'");
  }
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "on") return true;
  if (v == "false" || v == "0" || v == "off") return false;
  throw ConfigError("invalid boolean '" + v + "' for key '" + key + "'");
}

inline std::array<double, kNumClasses> parse_weights(const std::string& key, std::string v) {
  if (v.size() >= 2 && v.front() == '[' && v.back() == ']') v = v.substr(1, v.size() - 2);
  std::array<double, kNumClasses> out{};
  std::istringstream is(v);
  std::string tok;
  int i = 0;
  while (std::getline(is, tok, ',')) {
    if (i >= kNumClasses) throw ConfigError("key '" + key + "' expects exactly 3 comma-separated weights");
    out[i++] = parse_double(key, tok);
  }
  if (i != kNumClasses) throw ConfigError("key '" + key + "' expects exactly 3 comma-separated weights");
  return out;
}

inline std::string fmt_weights(const std::array<double, kNumClasses>& w) {
  return fmt_double(w[0]) + ',' + fmt_double(w[1]) + ',' + fmt_double(w[2]);
}

}  // namespace detail

struct ConfigKey {
  std::string name;
  std::string help;
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&)> set;
};

inline const std::vector<ConfigKey>& config_keys() {
  using namespace detail;
  static const std::vector<ConfigKey> keys = [] {
    std::vector<ConfigKey> k;
    auto dbl = [&](std::string name, std::string help, double RunConfig::*m) {
      k.push_back({name, std::move(help), [m](const RunConfig& c) { return fmt_double(c.*m); },
                   [m, name](RunConfig& c, const std::string& v) { c.*m = parse_double(name, v); }});
    };
    auto lng = [&](std::string name, std::string help, long RunConfig::*m) {
      k.push_back({name, std::move(help), [m](const RunConfig& c) { return std::to_string(c.*m); },
                   [m, name](RunConfig& c, const std::string& v) { c.*m = parse_long(name, v); }});
    };
    auto num = [&](std::string name, std::string help, int RunConfig::*m) {
      k.push_back({name, std::move(help), [m](const RunConfig& c) { return std::to_string(c.*m); },
                   [m, name](RunConfig& c, const std::string& v) { c.*m = static_cast<int>(parse_long(name, v)); }});
    };
    auto u64 = [&](std::string name, std::string help, std::uint64_t RunConfig::*m) {
      k.push_back({name, std::move(help), [m](const RunConfig& c) { return std::to_string(c.*m); },
                   [m, name](RunConfig& c, const std::string& v) { c.*m = parse_u64(name, v); }});
    };
    auto flag = [&](std::string name, std::string help, bool RunConfig::*m) {
      k.push_back({name, std::move(help), [m](const RunConfig& c) { return std::string(c.*m ? "true" : "false"); },
                   [m, name](RunConfig& c, const std::string& v) { c.*m = parse_bool(name, v); }});
    };
    auto loss = [&](std::string name, std::string help, double LossWeights::*m) {
      k.push_back({name, std::move(help), [m](const RunConfig& c) { return fmt_double(c.loss.*m); },
                   [m, name](RunConfig& c, const std::string& v) { c.loss.*m = parse_double(name, v); }});
    };

    lng("iterations", "training iterations", &RunConfig::iterations);
    num("batch_size", "images per iteration", &RunConfig::batch_size);
    num("labeled_per_batch", "labeled images per iteration", &RunConfig::labeled_per_batch);
    dbl("optim.lr", "initial learning rate", &RunConfig::lr);
    dbl("optim.momentum", "SGD momentum", &RunConfig::momentum);
    dbl("optim.weight_decay", "SGD weight decay", &RunConfig::weight_decay);
    k.push_back({"optim.schedule", "learning-rate schedule: poly | constant",
                 [](const RunConfig& c) { return std::string(c.schedule == LrSchedule::polynomial ? "poly" : "constant"); },
                 [](RunConfig& c, const std::string& v) {
                   if (v == "poly") c.schedule = LrSchedule::polynomial;
                   else if (v == "constant") c.schedule = LrSchedule::constant;
                   else throw ConfigError("optim.schedule must be 'poly' or 'constant'");
                 }});
    dbl("optim.poly_power", "polynomial decay exponent", &RunConfig::poly_power);
    loss("loss.alpha", "weight of hard pseudo-label cross supervision", &LossWeights::alpha);
    loss("loss.beta", "weight of sharpened soft pseudo-label consistency", &LossWeights::beta);
    loss("loss.gamma", "weight of classifier determinacy disparity", &LossWeights::gamma);
    loss("loss.mu", "weight of teacher consistency", &LossWeights::mu);
    loss("loss.tau", "sharpening temperature", &LossWeights::tau);
    flag("loss.nw_dice", "use neighborhood weighted Dice inside the supervised and hard pseudo-label terms", &RunConfig::nw_dice);
    k.push_back({"nw.radius", "NW-Dice maximum neighborhood radius",
                 [](const RunConfig& c) { return std::to_string(c.nw.radius); },
                 [](RunConfig& c, const std::string& v) { c.nw.radius = static_cast<int>(parse_long("nw.radius", v)); }});
    k.push_back({"nw.class_weights", "NW-Dice class weights (background,PS,FH)",
                 [](const RunConfig& c) { return fmt_weights(c.nw.class_weights); },
                 [](RunConfig& c, const std::string& v) { c.nw.class_weights = parse_weights("nw.class_weights", v); }});
    dbl("ema.decay", "teacher EMA decay", &RunConfig::ema_decay);
    dbl("augment.noise", "uniform input noise magnitude", &RunConfig::noise);
    dbl("augment.rotation", "maximum rotation in degrees", &RunConfig::rotation_deg);
    flag("augment.flip", "random horizontal flip", &RunConfig::flip);
    flag("augment.epis", "edge-patch in-situ restoration for student1 inputs", &RunConfig::epis);
    num("augment.patch_size", "EPIS grid patch size in pixels", &RunConfig::patch_size);
    num("model.base_width", "channel width of the first encoder level", &RunConfig::base_width);
    num("model.embed_dim", "token width of the attention student", &RunConfig::embed_dim);
    num("model.heads", "attention heads", &RunConfig::heads);
    dbl("model.dropout", "decoder dropout rate", &RunConfig::dropout);
    dbl("data.labeled_ratio", "fraction of training images with labels", &RunConfig::labeled_ratio);
    u64("data.split_seed", "seed of the train/val/test split", &RunConfig::split_seed);
    u64("seed", "initialization and augmentation seed", &RunConfig::seed);
    lng("eval_every", "validation interval in iterations", &RunConfig::eval_every);
    lng("checkpoint_every", "checkpoint interval in iterations", &RunConfig::checkpoint_every);
    k.push_back({"eval.model", "network evaluated: student1 | student2 | teacher",
                 [](const RunConfig& c) {
                   return std::string(c.eval_model == EvalModel::student1   ? "student1"
                                      : c.eval_model == EvalModel::student2 ? "student2"
                                                                            : "teacher");
                 },
                 [](RunConfig& c, const std::string& v) {
                   if (v == "student1") c.eval_model = EvalModel::student1;
                   else if (v == "student2") c.eval_model = EvalModel::student2;
                   else if (v == "teacher") c.eval_model = EvalModel::teacher;
                   else throw ConfigError("eval.model must be student1, student2 or teacher");
                 }});
    dbl("eval.spacing", "pixel spacing multiplier for distances", &RunConfig::spacing);
    return k;
  }();
  return keys;
}

inline void set_config_value(RunConfig& cfg, const std::string& key, const std::string& value) {
  for (const auto& k : config_keys())
    if (k.name == key) return k.set(cfg, value);
  throw ConfigError("unknown config key '" + key + "'");
}

/// `key = value` lines, one per key, in config_keys() order.
inline std::string to_text(const RunConfig& cfg) {
  std::ostringstream os;
  for (const auto& k : config_keys()) os << k.name << " = " << k.get(cfg) << '\n';
  return os.str();
}

inline RunConfig parse_config(const std::string& text, RunConfig base = {}) {
  std::istringstream is(text);
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    const auto first = line.find_first_not_of(" \t\r");
    if (first == std::string::npos) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("config line " + std::to_string(lineno) + ": expected 'key = value'");
    auto trim = [](std::string s) {
      const auto b = s.find_first_not_of(" \t\r"), e = s.find_last_not_of(" \t\r");
      return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
    };
    set_config_value(base, trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
  return base;
}

inline RunConfig load_config(const std::string& path, RunConfig base = {}) {
  std::ifstream in(path);
  if (!in) throw Error("cannot read config file '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str(), std::move(base));
}

/// Scaled-down settings for a single desk-side CPU: 32x32 phantoms, narrow networks.
inline RunConfig desk_preset() {
  RunConfig c;
  c.iterations = 2000;
  c.eval_every = 200;
  c.checkpoint_every = 500;
  c.patch_size = 8;
  c.base_width = 8;
  c.embed_dim = 32;
  c.heads = 4;
  return c;
}

}  // namespace dstcs
