#pragma once

// Hyperparameter records and their JSON form. Unknown keys are rejected so
// a typo in a config file cannot silently fall back to a default.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <set>
#include <sstream>
#include <string>

#include "json.hpp"

#include "daefuse/error.hpp"

namespace daefuse {

using json = nlohmann::json;

inline constexpr const char* kVersion = "0.3.0";

struct NetworkConfig {
  int base_channels = 32;  // shallow width; high/low branches get half each
  int se_blocks = 2;
  int dhe_blocks = 2;
  int dle_blocks = 2;
  int dle_heads = 4;
  int dle_token_patch = 8;
  int disc_layers = 3;
  std::uint64_t weight_init_seed = 7;

  int shallow_channels() const { return base_channels; }
  int branch_channels() const { return base_channels / 2; }
  int embedding_channels() const { return base_channels; }

  void validate() const {
    if (base_channels < 2 || base_channels % 2 != 0) {
      fail(ErrorKind::ConfigError, "network.base_channels must be even and >= 2");
    }
    if (se_blocks < 1 || dhe_blocks < 1 || dle_blocks < 1 || dle_heads < 1 || dle_token_patch < 1 ||
        disc_layers < 1) {
      fail(ErrorKind::ConfigError, "network block/head/patch counts must be >= 1");
    }
    if (branch_channels() % dle_heads != 0) {
      fail(ErrorKind::ConfigError, "network.dle_heads must divide base_channels/2");
    }
  }
};

/// Cross-modality attention. The per-head key width is
/// (channels / heads) * token_patch^2, see `head_dim`.
struct AttentionConfig {
  int heads = 1;
  int token_patch = 8;
  bool residual = false;  // false: attended embedding replaces the input

  int head_dim(int channels) const { return channels / heads * token_patch * token_patch; }

  void validate(int channels) const {
    if (heads < 1 || token_patch < 1) fail(ErrorKind::ConfigError, "attention heads/token_patch must be >= 1");
    if (channels % heads != 0) fail(ErrorKind::ConfigError, "attention.heads must divide embedding channels");
  }
};

struct LossWeights {
  double lambda_adv = 0.1;
  double sigma = 0.5;
  double gamma_text = 1.0;
  double gamma_int = 1.0;
  double gamma_temp = 0.5;
  double epsilon_cc = 1.01;

  void validate() const {
    if (!(sigma >= 0.0 && sigma <= 1.0)) fail(ErrorKind::ConfigError, "loss.sigma must lie in [0,1]");
    if (!(epsilon_cc > 1.0)) fail(ErrorKind::ConfigError, "loss.epsilon_cc must exceed 1");
  }
};

struct TrainingConfig {
  int phase1_epochs = 80;
  int phase2_epochs = 140;
  double lr_ae = 1e-4;
  double lr_disc = 1e-4;
  double lr_decay_factor = 0.5;
  int lr_decay_every = 20;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double rmsprop_alpha = 0.99;
  double optimizer_eps = 1e-8;
  int crop_size = 128;
  int batch_size = 16;
  int checkpoint_every = 10;
  std::uint64_t seed = 0;

  // ablation switches
  bool adversarial_phase1 = true;
  bool adversarial_phase2 = true;
  bool cross_attention = true;

  bool freeze_encoders = false;
  double feature_ema_tau = 0.0;

  LossWeights loss;
  NetworkConfig network;
  AttentionConfig attention;

  /// Spatial sizes fed to the network must be multiples of this.
  int spatial_multiple() const { return std::lcm(network.dle_token_patch, attention.token_patch); }

  void validate() const {
    network.validate();
    attention.validate(network.embedding_channels());
    loss.validate();
    if (phase1_epochs < 1 || phase2_epochs < 1) fail(ErrorKind::ConfigError, "epochs must be >= 1");
    if (!(lr_ae > 0.0) || !(lr_disc > 0.0)) fail(ErrorKind::ConfigError, "learning rates must be > 0");
    if (!(lr_decay_factor > 0.0) || lr_decay_every < 1) fail(ErrorKind::ConfigError, "invalid lr decay");
    if (batch_size < 1) fail(ErrorKind::ConfigError, "batch_size must be >= 1");
    if (checkpoint_every < 1) fail(ErrorKind::ConfigError, "checkpoint_every must be >= 1");
    if (crop_size < spatial_multiple() || crop_size % spatial_multiple() != 0) {
      fail(ErrorKind::ConfigError, "crop_size must be a positive multiple of the token patch sizes (" +
                                       std::to_string(spatial_multiple()) + ")");
    }
    if (!(feature_ema_tau >= 0.0 && feature_ema_tau < 1.0)) {
      fail(ErrorKind::ConfigError, "feature_ema_tau must lie in [0,1)");
    }
  }
};

// ---------------------------------------------------------------------------
// JSON

namespace detail {

inline void reject_unknown(const json& j, std::initializer_list<const char*> known, const std::string& where) {
  if (!j.is_object()) fail(ErrorKind::ConfigError, where + " must be an object");
  std::set<std::string> allowed(known.begin(), known.end());
  for (const auto& [key, value] : j.items()) {
    if (!allowed.count(key)) fail(ErrorKind::ConfigError, "unknown key '" + key + "' in " + where);
  }
}

template <class T>
void read_opt(const json& j, const char* key, T& out) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const json::exception& e) {
    fail(ErrorKind::ConfigError, std::string("bad value for '") + key + "': " + e.what());
  }
}

}  // namespace detail

inline void to_json(json& j, const NetworkConfig& c) {
  j = json{{"base_channels", c.base_channels}, {"se_blocks", c.se_blocks},
           {"dhe_blocks", c.dhe_blocks},       {"dle_blocks", c.dle_blocks},
           {"dle_heads", c.dle_heads},         {"dle_token_patch", c.dle_token_patch},
           {"disc_layers", c.disc_layers},     {"weight_init_seed", c.weight_init_seed}};
}

inline void from_json(const json& j, NetworkConfig& c) {
  detail::reject_unknown(j,
                         {"base_channels", "se_blocks", "dhe_blocks", "dle_blocks", "dle_heads",
                          "dle_token_patch", "disc_layers", "weight_init_seed"},
                         "network");
  detail::read_opt(j, "base_channels", c.base_channels);
  detail::read_opt(j, "se_blocks", c.se_blocks);
  detail::read_opt(j, "dhe_blocks", c.dhe_blocks);
  detail::read_opt(j, "dle_blocks", c.dle_blocks);
  detail::read_opt(j, "dle_heads", c.dle_heads);
  detail::read_opt(j, "dle_token_patch", c.dle_token_patch);
  detail::read_opt(j, "disc_layers", c.disc_layers);
  detail::read_opt(j, "weight_init_seed", c.weight_init_seed);
}

inline void to_json(json& j, const AttentionConfig& c) {
  j = json{{"heads", c.heads}, {"token_patch", c.token_patch}, {"residual", c.residual}};
}

inline void from_json(const json& j, AttentionConfig& c) {
  detail::reject_unknown(j, {"heads", "token_patch", "residual"}, "attention");
  detail::read_opt(j, "heads", c.heads);
  detail::read_opt(j, "token_patch", c.token_patch);
  detail::read_opt(j, "residual", c.residual);
}

inline void to_json(json& j, const LossWeights& c) {
  j = json{{"lambda_adv", c.lambda_adv}, {"sigma", c.sigma},         {"gamma_text", c.gamma_text},
           {"gamma_int", c.gamma_int},   {"gamma_temp", c.gamma_temp}, {"epsilon_cc", c.epsilon_cc}};
}

inline void from_json(const json& j, LossWeights& c) {
  detail::reject_unknown(j, {"lambda_adv", "sigma", "gamma_text", "gamma_int", "gamma_temp", "epsilon_cc"},
                         "loss");
  detail::read_opt(j, "lambda_adv", c.lambda_adv);
  detail::read_opt(j, "sigma", c.sigma);
  detail::read_opt(j, "gamma_text", c.gamma_text);
  detail::read_opt(j, "gamma_int", c.gamma_int);
  detail::read_opt(j, "gamma_temp", c.gamma_temp);
  detail::read_opt(j, "epsilon_cc", c.epsilon_cc);
}

inline void to_json(json& j, const TrainingConfig& c) {
  j = json{{"phase1_epochs", c.phase1_epochs},
           {"phase2_epochs", c.phase2_epochs},
           {"lr_ae", c.lr_ae},
           {"lr_disc", c.lr_disc},
           {"lr_decay_factor", c.lr_decay_factor},
           {"lr_decay_every", c.lr_decay_every},
           {"adam_beta1", c.adam_beta1},
           {"adam_beta2", c.adam_beta2},
           {"rmsprop_alpha", c.rmsprop_alpha},
           {"optimizer_eps", c.optimizer_eps},
           {"crop_size", c.crop_size},
           {"batch_size", c.batch_size},
           {"checkpoint_every", c.checkpoint_every},
           {"seed", c.seed},
           {"adversarial_phase1", c.adversarial_phase1},
           {"adversarial_phase2", c.adversarial_phase2},
           {"cross_attention", c.cross_attention},
           {"freeze_encoders", c.freeze_encoders},
           {"feature_ema_tau", c.feature_ema_tau},
           {"loss", c.loss},
           {"network", c.network},
           {"attention", c.attention}};
}

inline void from_json(const json& j, TrainingConfig& c) {
  detail::reject_unknown(
      j,
      {"phase1_epochs", "phase2_epochs", "lr_ae", "lr_disc", "lr_decay_factor", "lr_decay_every", "adam_beta1",
       "adam_beta2", "rmsprop_alpha", "optimizer_eps", "crop_size", "batch_size", "checkpoint_every", "seed",
       "adversarial_phase1", "adversarial_phase2", "cross_attention", "freeze_encoders", "feature_ema_tau",
       "loss", "network", "attention"},
      "config");
  detail::read_opt(j, "phase1_epochs", c.phase1_epochs);
  detail::read_opt(j, "phase2_epochs", c.phase2_epochs);
  detail::read_opt(j, "lr_ae", c.lr_ae);
  detail::read_opt(j, "lr_disc", c.lr_disc);
  detail::read_opt(j, "lr_decay_factor", c.lr_decay_factor);
  detail::read_opt(j, "lr_decay_every", c.lr_decay_every);
  detail::read_opt(j, "adam_beta1", c.adam_beta1);
  detail::read_opt(j, "adam_beta2", c.adam_beta2);
  detail::read_opt(j, "rmsprop_alpha", c.rmsprop_alpha);
  detail::read_opt(j, "optimizer_eps", c.optimizer_eps);
  detail::read_opt(j, "crop_size", c.crop_size);
  detail::read_opt(j, "batch_size", c.batch_size);
  detail::read_opt(j, "checkpoint_every", c.checkpoint_every);
  detail::read_opt(j, "seed", c.seed);
  detail::read_opt(j, "adversarial_phase1", c.adversarial_phase1);
  detail::read_opt(j, "adversarial_phase2", c.adversarial_phase2);
  detail::read_opt(j, "cross_attention", c.cross_attention);
  detail::read_opt(j, "freeze_encoders", c.freeze_encoders);
  detail::read_opt(j, "feature_ema_tau", c.feature_ema_tau);
  detail::read_opt(j, "loss", c.loss);
  detail::read_opt(j, "network", c.network);
  detail::read_opt(j, "attention", c.attention);
}

/// FNV-1a over the canonical (sorted-key) JSON dump.
inline std::string config_hash(const TrainingConfig& c) {
  const std::string text = json(c).dump();
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char ch : text) {
    h ^= ch;
    h *= 1099511628211ULL;
  }
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << h;
  return os.str();
}

inline TrainingConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorKind::NotFound, "cannot open config " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    fail(ErrorKind::ConfigError, "config " + path.string() + " is not valid JSON: " + e.what());
  }
  TrainingConfig c = j.get<TrainingConfig>();
  c.validate();
  return c;
}

}  // namespace daefuse
