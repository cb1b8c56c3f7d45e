#pragma once

// Two-phase optimization and inference.
//
// Phase one trains the shared encoders and the reconstruction decoder against
// the two discriminators; cross-attention weights are never touched. Phase two
// starts from a phase-one model, warm-starts the fusion stem and trains the
// fusion path against the same discriminators, now shown fused images.
//
// Every step updates the discriminators first (RMSProp, autoencoder output
// detached), then the autoencoder (Adam, discriminators frozen). The
// discriminators always see real and fake images normalized as one batch, in
// both updates; only the discriminator update advances the running statistics.

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "daefuse/checkpoint.hpp"
#include "daefuse/config.hpp"
#include "daefuse/data.hpp"
#include "daefuse/error.hpp"
#include "daefuse/fusion.hpp"
#include "daefuse/image.hpp"
#include "daefuse/losses.hpp"
#include "daefuse/networks.hpp"
#include "daefuse/optim.hpp"

namespace daefuse {

// ---------------------------------------------------------------------------
// Log

struct StepRecord {
  std::int64_t step = 0;
  int epoch = 0;
  int phase = 1;
  double lr_ae = 0.0;
  double lr_disc = 0.0;
  std::map<std::string, double> losses;
  std::map<std::string, double> scores;
  std::string fusion;  // "cross-attention", "concatenation", or empty in phase one

  friend bool operator==(const StepRecord&, const StepRecord&) = default;
};

inline void to_json(json& j, const StepRecord& r) {
  j = json{{"step", r.step},     {"epoch", r.epoch},   {"phase", r.phase}, {"lr_ae", r.lr_ae},
           {"lr_disc", r.lr_disc}, {"losses", r.losses}, {"scores", r.scores}};
  if (!r.fusion.empty()) j["fusion"] = r.fusion;
}

inline void from_json(const json& j, StepRecord& r) {
  r.step = j.at("step").get<std::int64_t>();
  r.epoch = j.at("epoch").get<int>();
  r.phase = j.at("phase").get<int>();
  r.lr_ae = j.at("lr_ae").get<double>();
  r.lr_disc = j.at("lr_disc").get<double>();
  r.losses = j.at("losses").get<std::map<std::string, double>>();
  r.scores = j.at("scores").get<std::map<std::string, double>>();
  r.fusion = j.value("fusion", std::string{});
}

/// Ordered step records; serialized as one JSON object per line.
class TrainingLog {
 public:
  void append(StepRecord r) {
    if (!records_.empty() && r.step <= records_.back().step) {
      fail(ErrorKind::ConfigError, "log steps must increase: " + std::to_string(r.step) + " after " +
                                       std::to_string(records_.back().step));
    }
    records_.push_back(std::move(r));
  }

  const std::vector<StepRecord>& records() const { return records_; }
  std::size_t size() const { return records_.size(); }
  bool empty() const { return records_.empty(); }

  std::string to_jsonl() const {
    std::string out;
    for (const auto& r : records_) out += json(r).dump() + "\n";
    return out;
  }

  static TrainingLog from_jsonl(std::istream& in) {
    TrainingLog log;
    std::string line;
    while (std::getline(in, line)) {
      if (!line.empty()) log.append(json::parse(line).get<StepRecord>());
    }
    return log;
  }

  static TrainingLog read(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) fail(ErrorKind::NotFound, "cannot open log " + path.string());
    return from_jsonl(in);
  }

  friend bool operator==(const TrainingLog&, const TrainingLog&) = default;

 private:
  std::vector<StepRecord> records_;
};

// ---------------------------------------------------------------------------
// Trainer state

/// Everything needed to continue a run bit-exactly.
struct TrainerState {
  TrainingConfig config;
  ModelParameters model;
  OptimizerState ae_optimizer;
  OptimizerState disc_optimizer;
  int phase = 1;
  int epoch = 0;           // next epoch to run within `phase`
  std::int64_t step = 0;   // steps completed over the whole run
};

inline TrainerState start_training(const TrainingConfig& config) {
  config.validate();
  TrainerState s;
  s.config = config;
  s.model = init_model(config.network, config.attention);
  s.model.cross_attention = config.cross_attention;
  return s;
}

inline Archive to_archive(const TrainerState& s) {
  Archive a;
  store_model(a, s.model, config_hash(s.config));
  a.manifest["training"] = {{"phase", s.phase}, {"epoch", s.epoch}, {"step", s.step}, {"config", s.config}};
  store_optimizer(a, "ae", s.ae_optimizer);
  store_optimizer(a, "disc", s.disc_optimizer);
  return a;
}

inline TrainerState from_archive(const Archive& a) {
  if (!a.manifest.contains("training")) {
    fail(ErrorKind::UnsupportedFormat, "checkpoint holds no training state (model-only archive)");
  }
  TrainerState s;
  const json& t = a.manifest["training"];
  s.config = t.at("config").get<TrainingConfig>();
  s.phase = t.at("phase").get<int>();
  s.epoch = t.at("epoch").get<int>();
  s.step = t.at("step").get<std::int64_t>();
  s.model = load_model(a);
  s.ae_optimizer = load_optimizer(a, "ae");
  s.disc_optimizer = load_optimizer(a, "disc");
  return s;
}

inline void save_checkpoint(const std::filesystem::path& path, const TrainerState& s) {
  write_archive(path, to_archive(s));
}

inline TrainerState load_checkpoint(const std::filesystem::path& path) { return from_archive(read_archive(path)); }

namespace detail {

inline const std::vector<std::string>& discriminator_prefixes() {
  static const std::vector<std::string> p{"dm1/", "dm2/"};
  return p;
}

inline std::vector<std::string> autoencoder_prefixes(const TrainerState& s) {
  if (s.phase == 1) return {"se/", "dhe/", "dle/", "rd/"};
  std::vector<std::string> p;
  if (!s.config.freeze_encoders) p = {"se/", "dhe/", "dle/"};
  p.push_back("rd/");
  if (s.model.cross_attention) p.push_back("xattn/");
  return p;
}

// Gradients are recorded only for trainable tensors under `prefixes`.
inline void enable_grads(ParameterStore& store, const std::vector<std::string>& prefixes) {
  store.set_requires_grad("", false);
  for (const auto& p : prefixes) store.set_requires_grad(p, true);
}

inline double mean_of(const Tensor& t) {
  double total = 0.0;
  for (double v : t.values()) total += v;
  return total / static_cast<double>(t.size());
}

inline void adam_step(TrainerState& s, const std::vector<std::string>& names, double lr) {
  const TrainingConfig& c = s.config;
  Adam opt(names, c.adam_beta1, c.adam_beta2, c.optimizer_eps);
  opt.set_state(std::move(s.ae_optimizer));
  opt.step(s.model.store, lr);
  s.ae_optimizer = opt.state();
}

inline void rmsprop_step(TrainerState& s, const std::vector<std::string>& names, double lr) {
  RMSProp opt(names, s.config.rmsprop_alpha, s.config.optimizer_eps);
  opt.set_state(std::move(s.disc_optimizer));
  opt.step(s.model.store, lr);
  s.disc_optimizer = opt.state();
}

inline void require_finite_model(const TrainerState& s) {
  if (!s.model.store.all_finite()) fail(ErrorKind::NumericalError, "parameters became non-finite");
}

// Scores real and fake images in one training-mode batch so that both sides
// share normalization statistics; returns {real scores, fake scores}.
inline std::pair<Tensor, Tensor> score_jointly(ModelParameters& m, const Tensor& real, const Tensor& fake,
                                               Discriminator which, bool update_stats) {
  const Tensor scores =
      discriminate(m, concat({real, fake}, 0), which, Mode::Train, update_stats ? &m.store : nullptr);
  const int n = real.dim(0);
  return {slice(scores, 0, 0, n), slice(scores, 0, n, fake.dim(0))};
}

// One discriminator update against (real, fake) pairs for both blocks.
inline void discriminator_update(TrainerState& s, const Tensor& real_a, const Tensor& fake_a, const Tensor& real_b,
                                 const Tensor& fake_b, double lr, StepRecord& rec) {
  enable_grads(s.model.store, discriminator_prefixes());
  ModelParameters& m = s.model;
  const auto [r1, f1] = score_jointly(m, real_a, fake_a, Discriminator::DM1, true);
  const auto [r2, f2] = score_jointly(m, real_b, fake_b, Discriminator::DM2, true);
  const Tensor l1 = adversarial_loss_disc_phase1(r1, f1);
  const Tensor l2 = adversarial_loss_disc_phase1(r2, f2);
  const Tensor total = l1 + l2;
  require_finite_loss(total, "discriminator loss");
  total.backward();
  rmsprop_step(s, m.store.trainable_names(discriminator_prefixes()), lr);
  rec.losses["disc_dm1"] = l1.item();
  rec.losses["disc_dm2"] = l2.item();
  rec.scores["dm1_real"] = mean_of(r1);
  rec.scores["dm1_fake"] = mean_of(f1);
  rec.scores["dm2_real"] = mean_of(r2);
  rec.scores["dm2_fake"] = mean_of(f2);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Steps

/// One phase-one step: discriminators, then encoders + reconstruction decoder.
inline StepRecord phase1_step(TrainerState& s, const PatchBatch& batch) {
  if (s.phase != 1 || s.model.phase_tag > 1) {
    fail(ErrorKind::PhaseOrderError, "phase-one step on a model that already entered phase two");
  }
  const TrainingConfig& c = s.config;
  ModelParameters& m = s.model;
  StepRecord rec;
  rec.phase = 1;
  rec.epoch = s.epoch;
  rec.lr_ae = lr_schedule(s.epoch, c.lr_ae, c.lr_decay_factor, c.lr_decay_every);
  rec.lr_disc = lr_schedule(s.epoch, c.lr_disc, c.lr_decay_factor, c.lr_decay_every);

  const Tensor a = to_tensor(batch.patches_a);
  const Tensor b = to_tensor(batch.patches_b);

  if (c.adversarial_phase1) {
    Tensor rec_a, rec_b;
    {
      NoGradGuard no_grad;
      rec_a = decode(m, encode(m, a).combined);
      rec_b = decode(m, encode(m, b).combined);
    }
    detail::discriminator_update(s, a, rec_a, b, rec_b, rec.lr_disc, rec);
  }

  const auto ae_prefixes = detail::autoencoder_prefixes(s);
  detail::enable_grads(m.store, ae_prefixes);
  const FeatureEmbedding emb_a = encode(m, a);
  const FeatureEmbedding emb_b = encode(m, b);
  const Tensor rec_a = decode(m, emb_a.combined);
  const Tensor rec_b = decode(m, emb_b.combined);
  const Tensor content = content_loss(a, rec_a) + content_loss(b, rec_b);
  Tensor corr;
  try {
    corr = correlation_decomposition_loss(emb_a, emb_b, c.loss);
  } catch (const Error& e) {
    if (e.kind() != ErrorKind::DegenerateInput) throw;
    corr = Tensor::scalar(0.0);  // constant branch maps carry no correlation signal
  }
  Tensor adv;
  if (c.adversarial_phase1) {
    adv = adversarial_loss_ae_phase1(detail::score_jointly(m, a, rec_a, Discriminator::DM1, false).second,
                                     detail::score_jointly(m, b, rec_b, Discriminator::DM2, false).second);
    rec.losses["adversarial_ae"] = adv.item();
  }
  const Tensor total = phase1_ae_loss(adv, corr, content, c.loss);
  total.backward();
  detail::adam_step(s, m.store.trainable_names(ae_prefixes), rec.lr_ae);
  m.store.clear_grads();
  detail::require_finite_model(s);

  rec.losses["content"] = content.item();
  rec.losses["correlation"] = corr.item();
  rec.losses["ae_total"] = total.item();
  m.phase_tag = 1;
  rec.step = ++s.step;
  return rec;
}

/// Switches a finished phase-one state into phase two.
inline void begin_phase2(TrainerState& s) {
  if (s.model.phase_tag != 1) {
    fail(ErrorKind::PhaseOrderError, "phase two requires a phase-one trained model (phase_tag " +
                                         std::to_string(s.model.phase_tag) + ")");
  }
  init_fusion_stem_from_reconstruction(s.model);
  s.ae_optimizer = {};
  s.disc_optimizer = {};
  s.phase = 2;
  s.epoch = 0;
}

/// One phase-two step. The temporal term is formed only when the batch
/// carries predecessor frames; their fused output is a constant target.
inline StepRecord phase2_step(TrainerState& s, const PatchBatch& batch, ForwardStats* stats = nullptr) {
  if (s.phase != 2 || s.model.phase_tag < 1) {
    fail(ErrorKind::PhaseOrderError, "phase-two step needs a model initialized from phase one");
  }
  const TrainingConfig& c = s.config;
  ModelParameters& m = s.model;
  const FusionOptions options{m.cross_attention};
  StepRecord rec;
  rec.phase = 2;
  rec.epoch = s.epoch;
  rec.fusion = m.cross_attention ? "cross-attention" : "concatenation";
  rec.lr_ae = lr_schedule(s.epoch, c.lr_ae, c.lr_decay_factor, c.lr_decay_every);
  rec.lr_disc = lr_schedule(s.epoch, c.lr_disc, c.lr_decay_factor, c.lr_decay_every);

  const Tensor a = to_tensor(batch.patches_a);
  const Tensor b = to_tensor(batch.patches_b);
  Tensor prev_fused;
  if (!batch.prev_a.empty()) {
    NoGradGuard no_grad;
    prev_fused = fuse_images(m, to_tensor(batch.prev_a), to_tensor(batch.prev_b), options);
  }

  if (c.adversarial_phase2) {
    Tensor fused;
    {
      NoGradGuard no_grad;
      fused = fuse_images(m, a, b, options);
    }
    detail::discriminator_update(s, a, fused, b, fused, rec.lr_disc, rec);
  }

  const auto ae_prefixes = detail::autoencoder_prefixes(s);
  detail::enable_grads(m.store, ae_prefixes);
  const Tensor fused = fuse_images(m, a, b, options, stats);
  Phase2Components parts;
  if (c.adversarial_phase2) {
    parts.adversarial =
        adversarial_loss_phase2_ae(detail::score_jointly(m, a, fused, Discriminator::DM1, false).second,
                                   detail::score_jointly(m, b, fused, Discriminator::DM2, false).second);
    rec.losses["adversarial_ae"] = parts.adversarial.item();
  }
  parts.text = text_loss(fused, a, b);
  parts.intensity = intensity_loss(fused, a, b);
  if (prev_fused.defined()) {
    parts.temporal = temporal_consistency_loss(fused, prev_fused);
    rec.losses["temporal"] = parts.temporal.item();
  }
  const Tensor total = phase2_total_loss(parts, c.loss);
  total.backward();
  detail::adam_step(s, m.store.trainable_names(ae_prefixes), rec.lr_ae);
  m.store.clear_grads();
  detail::require_finite_model(s);

  rec.losses["text"] = parts.text.item();
  rec.losses["intensity"] = parts.intensity.item();
  rec.losses["ae_total"] = total.item();
  m.phase_tag = 2;
  rec.step = ++s.step;
  return rec;
}

// ---------------------------------------------------------------------------
// Runs

struct TrainOptions {
  std::filesystem::path out_dir;  // empty: nothing is written
  std::function<void(const StepRecord&)> on_step = {};
};

struct TrainResult {
  TrainerState state;
  TrainingLog log;  // records produced by this invocation
};

/// Seed of one epoch's shuffle/crop stream; independent of earlier epochs so
/// a resumed run sees the same batches.
inline std::uint64_t epoch_seed(std::uint64_t seed, int phase, int epoch) {
  return detail::mix_seed(seed, "epoch/" + std::to_string(phase) + "/" + std::to_string(epoch));
}

inline std::filesystem::path periodic_checkpoint_name(int phase, int epoch) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "ckpt_phase%d_epoch%03d.ckpt", phase, epoch);
  return buf;
}

/// Runs (or continues) both phases to completion.
inline TrainResult run_training(TrainerState s, const TrainingSet& data, const TrainOptions& options = {}) {
  s.config.validate();
  if (data.size() == 0) fail(ErrorKind::EmptyDataset, "training set is empty");
  const bool write = !options.out_dir.empty();
  std::ofstream log_file;
  if (write) {
    std::filesystem::create_directories(options.out_dir);
    const bool fresh = s.step == 0;
    log_file.open(options.out_dir / "train_log.jsonl", fresh ? std::ios::trunc : std::ios::app);
    if (!log_file) fail(ErrorKind::IOError, "cannot write training log in " + options.out_dir.string());
  }
  std::string last_good = "none";
  TrainResult result;
  const BatchSpec spec{s.config.crop_size, s.config.batch_size};

  while (s.phase <= 2) {
    const int epochs = s.phase == 1 ? s.config.phase1_epochs : s.config.phase2_epochs;
    if (s.epoch >= epochs) {
      if (s.phase == 1) {
        begin_phase2(s);
        continue;
      }
      break;
    }
    for (; s.epoch < epochs;) {
      std::mt19937_64 rng(epoch_seed(s.config.seed, s.phase, s.epoch));
      for (const PatchBatch& batch : make_batches(data, spec, rng)) {
        StepRecord rec;
        try {
          rec = s.phase == 1 ? phase1_step(s, batch) : phase2_step(s, batch);
        } catch (const Error& e) {
          if (e.kind() != ErrorKind::NumericalError) throw;
          fail(ErrorKind::NumericalError, std::string(e.what()) + " at step " + std::to_string(s.step + 1) +
                                              "; last good checkpoint: " + last_good);
        }
        if (write) log_file << json(rec).dump() << "\n" << std::flush;
        if (options.on_step) options.on_step(rec);
        result.log.append(std::move(rec));
      }
      ++s.epoch;
      if (write && s.epoch % s.config.checkpoint_every == 0 && s.epoch < epochs) {
        const auto path = options.out_dir / periodic_checkpoint_name(s.phase, s.epoch);
        save_checkpoint(path, s);
        last_good = path.string();
      }
    }
    if (write) {
      const auto path = options.out_dir / (s.phase == 1 ? "phase1.ckpt" : "phase2.ckpt");
      save_checkpoint(path, s);
      last_good = path.string();
    }
  }
  result.state = std::move(s);
  return result;
}

inline TrainResult train(const TrainingSet& data, const TrainingConfig& config, const TrainOptions& options = {}) {
  return run_training(start_training(config), data, options);
}

inline TrainResult train(const std::vector<ImagePair>& pairs, const TrainingConfig& config,
                         const TrainOptions& options = {}) {
  return train(TrainingSet::from_pairs(pairs), config, options);
}

inline TrainResult resume(const std::filesystem::path& checkpoint, const TrainingSet& data,
                          const TrainOptions& options = {}) {
  return run_training(load_checkpoint(checkpoint), data, options);
}

// ---------------------------------------------------------------------------
// Inference

namespace detail {

inline void require_fusion_model(const ModelParameters& m) {
  if (m.phase_tag != 2) {
    fail(ErrorKind::PhaseOrderError, "fusion needs a phase-two checkpoint (phase_tag " +
                                         std::to_string(m.phase_tag) + ")");
  }
}

inline int fusion_multiple(const ModelParameters& m) {
  return std::lcm(m.network.dle_token_patch, m.attention.token_patch);
}

inline int round_up(int v, int multiple) { return (v + multiple - 1) / multiple * multiple; }

struct Padding {
  int top = 0, left = 0, height = 0, width = 0;
};

inline std::pair<ImagePair, Padding> pad_for_network(const ModelParameters& m, const ImagePair& pair) {
  const int k = fusion_multiple(m);
  const int h = round_up(pair.height(), k), w = round_up(pair.width(), k);
  const Padding pad{(h - pair.height()) / 2, (w - pair.width()) / 2, pair.height(), pair.width()};
  return {ImagePair(pair.a.pad_reflect_to(h, w), pair.b.pad_reflect_to(h, w)), pad};
}

}  // namespace detail

/// Full-resolution fusion of one registered pair. Sizes that are not a
/// multiple of the token patches are reflect-padded and cropped back.
inline Image fuse_pair(const ModelParameters& m, const ImagePair& pair, ForwardStats* stats = nullptr) {
  detail::require_fusion_model(m);
  const auto [padded, pad] = detail::pad_for_network(m, pair);
  NoGradGuard no_grad;
  const Tensor fused = fuse_images(m, to_tensor(padded.a), to_tensor(padded.b), {m.cross_attention}, stats);
  return to_image(fused, 0, pair.a.source_id()).crop(pad.top, pad.left, pad.height, pad.width);
}

/// Autoencoder round trip of one image at full resolution, padded and cropped
/// like fuse_pair. Works on any checkpoint phase.
inline Image reconstruct_image(const ModelParameters& m, const Image& image) {
  const int k = detail::fusion_multiple(m);
  const int h = detail::round_up(image.height(), k), w = detail::round_up(image.width(), k);
  NoGradGuard no_grad;
  const Tensor out = decode(m, encode(m, to_tensor(image.pad_reflect_to(h, w))).combined);
  return to_image(out, 0, image.source_id())
      .crop((h - image.height()) / 2, (w - image.width()) / 2, image.height(), image.width());
}

/// Frame-by-frame fusion. With tau > 0 the shallow features of each modality
/// are smoothed as s_t <- tau * s_{t-1} + (1 - tau) * s_t before the deep
/// encoders.
inline std::vector<Image> fuse_video(const ModelParameters& m, const VideoSequence& seq, double tau = 0.0) {
  detail::require_fusion_model(m);
  if (!(tau >= 0.0 && tau < 1.0)) fail(ErrorKind::ConfigError, "feature EMA tau must lie in [0,1)");
  NoGradGuard no_grad;
  std::vector<Image> out;
  out.reserve(seq.size());
  Tensor ema_a, ema_b;
  for (const ImagePair& frame : seq.frames) {
    const auto [padded, pad] = detail::pad_for_network(m, frame);
    Tensor sa = shallow_encode(m, to_tensor(padded.a));
    Tensor sb = shallow_encode(m, to_tensor(padded.b));
    if (tau > 0.0 && ema_a.defined()) {
      sa = tau * ema_a + (1.0 - tau) * sa;
      sb = tau * ema_b + (1.0 - tau) * sb;
    }
    ema_a = sa;
    ema_b = sb;
    const Tensor fused = fuse(m, encode_from_shallow(m, sa), encode_from_shallow(m, sb), {m.cross_attention});
    out.push_back(to_image(fused, 0, frame.a.source_id()).crop(pad.top, pad.left, pad.height, pad.width));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Ablations

inline const std::vector<std::string>& ablation_presets() {
  static const std::vector<std::string> p{"no-disc-p1", "no-disc-p2", "no-cross-attn"};
  return p;
}

inline TrainingConfig ablate(const std::string& preset, TrainingConfig config) {
  if (preset == "no-disc-p1") {
    config.adversarial_phase1 = false;
  } else if (preset == "no-disc-p2") {
    config.adversarial_phase2 = false;
  } else if (preset == "no-cross-attn") {
    config.cross_attention = false;
  } else {
    fail(ErrorKind::UsageError, "unknown ablation preset '" + preset + "'");
  }
  return config;
}

}  // namespace daefuse
