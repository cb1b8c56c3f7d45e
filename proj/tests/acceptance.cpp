// Acceptance run: one PASS/FAIL line per criterion. Exit status is the number
// of failed criteria. Tolerances are pinned below.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <iostream>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "gradient_suite.hpp"
#include "oracles.hpp"

using namespace daefuse;
namespace fs = std::filesystem;

namespace {

constexpr double kGradientTolerance = 1e-4;
constexpr double kGradientSeconds = 60.0;
constexpr double kZeroTolerance = 1e-6;
constexpr double kHandTolerance = 1e-4;
constexpr double kHistogramTolerance = 1e-10;
constexpr double kSsimIdentityTolerance = 1e-12;
constexpr double kQabfIdentityFloor = 0.98;
constexpr double kSoftmaxRowTolerance = 1e-6;
constexpr double kAttentionHandTolerance = 1e-3;
constexpr double kAttentionOracleTolerance = 1e-12;
constexpr double kContentDropFraction = 0.5;
constexpr int kContentDropSteps = 200;
constexpr int kPhase2Steps = 300;
constexpr double kInformationSlack = 0.05;
constexpr double kToySeconds = 600.0;
constexpr double kTemporalZeroTolerance = 1e-12;

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return buf;
}

/// Collects sub-check outcomes of one criterion.
class Checks {
 public:
  void expect(bool ok, const std::string& what) {
    if (!ok) failures_.push_back(what);
  }
  void note(const std::string& s) { notes_.push_back(s); }
  bool ok() const { return failures_.empty(); }
  std::string summary() const {
    std::string out;
    for (const auto& n : notes_) out += (out.empty() ? "" : "; ") + n;
    for (const auto& f : failures_) out += (out.empty() ? "failed: " : "; failed: ") + f;
    return out;
  }

 private:
  std::vector<std::string> notes_;
  std::vector<std::string> failures_;
};

int failed = 0;

void report(int id, const std::string& name, const std::function<void(Checks&)>& body) {
  const auto t0 = Clock::now();
  Checks c;
  try {
    body(c);
  } catch (const std::exception& e) {
    c.expect(false, std::string("exception: ") + e.what());
  }
  if (!c.ok()) ++failed;
  std::cout << (c.ok() ? "PASS" : "FAIL") << " criterion " << id << " " << name << " (" << fmt(seconds_since(t0))
            << " s): " << c.summary() << std::endl;
}

Tensor fill(double v, int h = 1, int w = 1) { return Tensor::full({1, 1, h, w}, v); }

bool bitwise_equal(const Tensor& x, const Tensor& y) {
  return x.dims() == y.dims() && std::equal(x.values().begin(), x.values().end(), y.values().begin());
}

double mean_abs_diff(const Image& x, const Image& y) {
  double s = 0.0;
  for (std::size_t i = 0; i < x.pixels().size(); ++i) s += std::abs(x.pixels()[i] - y.pixels()[i]);
  return s / static_cast<double>(x.pixels().size());
}

std::set<std::string> keys_of(const StepRecord& r) {
  std::set<std::string> k;
  for (const auto& [name, v] : r.losses) k.insert(name);
  return k;
}

std::string joined(const std::set<std::string>& s) {
  std::string out;
  for (const auto& k : s) out += (out.empty() ? "" : ",") + k;
  return "{" + out + "}";
}

// ---------------------------------------------------------------------------
// Toy configuration shared by the training criteria

TrainingConfig toy_config() {
  TrainingConfig c;
  c.network.base_channels = 16;
  c.network.dle_heads = 2;
  c.crop_size = 32;
  c.batch_size = 4;
  c.lr_ae = c.lr_disc = 1e-3;
  c.phase1_epochs = 25;  // 8 steps per epoch over 32 pairs: 200 steps
  c.phase2_epochs = 38;  // 304 steps
  return c;
}

std::vector<ImagePair> toy_pairs() { return synthetic::blob_pairs(32, 1); }
ImagePair held_out_pair() { return synthetic::blob_pairs(1, 999).front(); }

struct ToyRun {
  TrainResult result;
  std::string report;  // metric report of the held-out pair
  double seconds = 0.0;
};

ToyRun toy_run(const fs::path& out_dir) {
  const auto t0 = Clock::now();
  TrainOptions o;
  o.out_dir = out_dir;
  ToyRun run{train(toy_pairs(), toy_config(), o), {}, 0.0};
  run.seconds = seconds_since(t0);
  const ImagePair held = held_out_pair();
  run.report =
      report_json(summarize({evaluate_triple(fuse_pair(run.result.state.model, held), held.a, held.b, "held_out")}))
          .dump();
  return run;
}

fs::path scratch_dir() {
  const fs::path p = fs::temp_directory_path() / "daefuse_acceptance";
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

// ---------------------------------------------------------------------------
// Criteria

void gradients(Checks& c) {
  const auto t0 = Clock::now();
  const auto results = gradient_suite::run();
  const double elapsed = seconds_since(t0);
  double worst = 0.0;
  std::string worst_op;
  for (const auto& r : results) {
    if (!(r.relative_error < kGradientTolerance)) c.expect(false, r.op + " rel err " + fmt(r.relative_error));
    if (r.relative_error > worst) worst = r.relative_error, worst_op = r.op;
  }
  c.note(std::to_string(results.size()) + " ops, worst " + worst_op + " " + fmt(worst) + " < " +
         fmt(kGradientTolerance));
  c.expect(elapsed < kGradientSeconds, "runtime " + fmt(elapsed) + " s");
}

void zero_identity(Checks& c) {
  std::mt19937_64 rng(5);
  const Tensor x = oracle::random_tensor({2, 1, 16, 16}, rng, 0.0, 1.0);
  const double content = content_loss(x, x).item();
  c.expect(std::abs(content) <= kZeroTolerance, "content(x,x) = " + fmt(content));

  const Tensor a = oracle::random_tensor({1, 1, 16, 16}, rng, 0.0, 1.0);
  const Tensor b = oracle::random_tensor({1, 1, 16, 16}, rng, 0.0, 1.0);
  const double intensity = intensity_loss(maximum(a, b), a, b).item();
  c.expect(std::abs(intensity) <= kZeroTolerance, "intensity(max(a,b)) = " + fmt(intensity));
  const double text = text_loss(a, a, 0.5 * a).item();
  c.expect(std::abs(text) <= kZeroTolerance, "text(a, a, a/2) = " + fmt(text));
  const double temporal = temporal_consistency_loss(a, a).item();
  c.expect(std::abs(temporal) <= kZeroTolerance, "temporal(static) = " + fmt(temporal));

  const Tensor h = oracle::random_tensor({1, 4, 8, 8}, rng), l = oracle::random_tensor({1, 4, 8, 8}, rng);
  const double corr = correlation_decomposition_loss(h, h, l, l, LossWeights{}.epsilon_cc).item();
  c.expect(std::abs(corr - 1.0 / 2.01) <= kHandTolerance, "correlation loss " + fmt(corr));

  struct Hand {
    const char* name;
    double got, expected;
  };
  const Hand hand[] = {
      {"ae1(0.5,0.5)", adversarial_loss_ae_phase1(fill(0.5), fill(0.5)).item(), -1.3863},
      {"ae1(0.9,0.1)", adversarial_loss_ae_phase1(fill(0.9), fill(0.1)).item(), -2.4079},
      {"disc1(0.5,0.5)", adversarial_loss_disc_phase1(fill(0.5), fill(0.5)).item(), 1.3863},
      {"disc1(0.3,0.8)", adversarial_loss_disc_phase1(fill(0.3), fill(0.8)).item(), 2.8134},
      {"ae2(0.5,0.5)", adversarial_loss_phase2_ae(fill(0.5), fill(0.5)).item(), -1.3863},
      {"dm2(0.99,0.01)", adversarial_loss_phase2_dm(fill(0.99), fill(0.01)).item(), 0.0201},
  };
  for (const auto& v : hand) {
    c.expect(std::abs(v.got - v.expected) <= kHandTolerance,
             std::string(v.name) + " = " + fmt(v.got) + " want " + fmt(v.expected));
  }
  c.note("content " + fmt(content) + ", intensity " + fmt(intensity) + ", text " + fmt(text) + ", corr " +
         fmt(corr) + ", 6 adversarial substitutions");
}

void metric_oracles(Checks& c) {
  std::mt19937_64 rng(17);
  double en_err = 0.0, mi_err = 0.0;
  for (int i = 0; i < 50; ++i) {
    const Image x = oracle::random_quantized(8, 8, rng);
    const Image y = oracle::random_quantized(8, 8, rng, 16);
    en_err = std::max(en_err, std::abs(entropy(x) - oracle::brute_entropy(x)));
    mi_err = std::max(mi_err, std::abs(mutual_information(x, x, y) - oracle::brute_mi(x, x) - oracle::brute_mi(x, y)));
  }
  c.expect(en_err <= kHistogramTolerance, "EN error " + fmt(en_err));
  c.expect(mi_err <= kHistogramTolerance, "MI error " + fmt(mi_err));

  const Image x = oracle::random_image(16, 16, rng);
  const double s = ssim(x, x);
  c.expect(std::abs(s - 1.0) <= kSsimIdentityTolerance, "SSIM(x,x) = " + fmt(s));
  const double q = qabf(x, x, x);
  c.expect(q >= kQabfIdentityFloor, "Qabf(x,x,x) = " + fmt(q));

  int violations = 0;
  for (int i = 0; i < 200; ++i) {
    const Image f = oracle::random_image(16, 16, rng), a = oracle::random_image(16, 16, rng),
                b = oracle::random_image(16, 16, rng);
    const double en = entropy(f), qa = qabf(f, a, b), sc = scd(f, a, b), ss = ssim(f, a);
    if (!(en >= 0 && en <= 8)) ++violations;
    if (!(qa >= 0 && qa <= 1)) ++violations;
    if (!(sc >= -2 && sc <= 2)) ++violations;
    if (!(ss >= -1 && ss <= 1)) ++violations;
  }
  c.expect(violations == 0, std::to_string(violations) + " range violations");
  c.note("EN err " + fmt(en_err) + ", MI err " + fmt(mi_err) + ", SSIM(x,x) " + fmt(s) + ", Qabf(x,x,x) " + fmt(q) +
         ", 200 triples in range");
}

void attention(Checks& c) {
  std::mt19937_64 rng(23);
  auto weight = [&](int ch) {
    Tensor w = oracle::random_tensor({ch, ch, 1, 1}, rng);
    w.set_requires_grad(false);
    return w;
  };
  auto map = [&](Dims d) {
    Tensor t = oracle::random_tensor(d, rng);
    t.set_requires_grad(false);
    return t;
  };

  // Row sums on a multi-head, multi-token case.
  const int ch = 8;
  const Tensor q = map({2, ch, 8, 8}), kv = map({2, ch, 8, 8});
  const CrossAttentionWeights w{weight(ch), weight(ch), weight(ch)};
  const AttentionResult multi = cross_attention(q, kv, w, {.heads = 2, .token_patch = 2});
  const Dims wd = multi.weights.dims();
  double row_err = 0.0;
  for (int n = 0; n < wd[0]; ++n)
    for (int h = 0; h < wd[1]; ++h)
      for (int r = 0; r < wd[2]; ++r) {
        double sum = 0.0;
        for (int k = 0; k < wd[3]; ++k) sum += multi.weights.at(n, h, r, k);
        row_err = std::max(row_err, std::abs(sum - 1.0));
      }
  c.expect(row_err <= kSoftmaxRowTolerance, "row sum error " + fmt(row_err));

  // Singleton token: output is the value projection exactly.
  const Tensor q1 = map({1, 4, 4, 4}), kv1 = map({1, 4, 4, 4});
  const CrossAttentionWeights w1{weight(4), weight(4), weight(4)};
  const AttentionResult single = cross_attention(q1, kv1, w1, {.heads = 1, .token_patch = 4});
  c.expect(single.weights.values()[0] == 1.0, "singleton weight " + fmt(single.weights.values()[0]));
  c.expect(bitwise_equal(single.output, conv2d(kv1, w1.wv, Tensor(), 1, 0, 0)), "singleton output is not W_v V");

  // Two-token hand example.
  Tensor hand_w;
  const Tensor hand = scaled_dot_attention(Tensor({1, 1, 2, 1}, {1, 0}), Tensor({1, 1, 2, 1}, {1, 0}),
                                           Tensor({1, 1, 2, 1}, {2, 4}), &hand_w);
  c.expect(std::abs(hand.values()[0] - 2.538) <= kAttentionHandTolerance, "hand output " + fmt(hand.values()[0]));

  // Single head against a literal matrix computation.
  const Tensor q2 = map({1, 4, 4, 4}), kv2 = map({1, 4, 4, 4});
  const CrossAttentionWeights w2{weight(4), weight(4), weight(4)};
  const AttentionResult lit = cross_attention(q2, kv2, w2, {.heads = 1, .token_patch = 2});
  const auto Q = oracle::tokens_of(oracle::project(q2, w2.wq), 2);
  const auto K = oracle::tokens_of(oracle::project(kv2, w2.wk), 2);
  const auto V = oracle::tokens_of(oracle::project(kv2, w2.wv), 2);
  const auto expected = oracle::attention(Q, K, V);
  const auto got = oracle::tokens_of(lit.output, 2);
  double lit_err = 0.0;
  for (std::size_t r = 0; r < expected.size(); ++r)
    for (std::size_t k = 0; k < expected[r].size(); ++k) lit_err = std::max(lit_err, std::abs(expected[r][k] - got[r][k]));
  c.expect(lit_err <= kAttentionOracleTolerance, "literal oracle error " + fmt(lit_err));
  c.note("row sum err " + fmt(row_err) + ", singleton exact, hand " + fmt(hand.values()[0]) + ", literal err " +
         fmt(lit_err));
}

void shapes(Checks& c) {
  TrainingConfig cfg;
  cfg.network.base_channels = 8;
  cfg.network.dle_heads = 2;
  cfg.network.se_blocks = cfg.network.dhe_blocks = cfg.network.dle_blocks = 1;
  cfg.crop_size = 16;
  cfg.batch_size = 2;
  cfg.phase1_epochs = cfg.phase2_epochs = 1;
  TrainerState s = start_training(cfg);

  for (int size : {16, 32, 128, 130}) {
    std::mt19937_64 rng(static_cast<std::uint64_t>(size));
    const Image img = oracle::random_image(size, size, rng);
    const Image rec = reconstruct_image(s.model, img);
    c.expect(rec.height() == size && rec.width() == size, "round trip at " + std::to_string(size));
  }

  const ParameterStore before = s.model.store;
  const TrainingSet set = TrainingSet::from_pairs(synthetic::blob_pairs(2, 4, {.size = 16, .blobs = 3, .noise_sd = 0.03}));
  std::mt19937_64 rng(9);
  const auto batches = make_batches(set, {cfg.crop_size, cfg.batch_size}, rng);
  for (int i = 0; i < 3; ++i) phase1_step(s, batches.front());
  int attention_tensors = 0;
  for (const auto& [name, e] : s.model.store.entries()) {
    if (name.rfind("xattn/", 0) != 0) continue;
    ++attention_tensors;
    c.expect(bitwise_equal(e.tensor, before.get(name)), name + " changed in phase one");
  }
  c.expect(attention_tensors > 0, "no cross-attention tensors");

  const std::string bytes = encode_archive(to_archive(s));
  const std::string again = encode_archive(to_archive(from_archive(decode_archive(bytes))));
  c.expect(bytes == again, "checkpoint bytes differ after a round trip");
  c.note("sizes 16/32/128/130 preserved, " + std::to_string(attention_tensors) +
         " attention tensors unchanged after 3 phase-one steps, checkpoint " + std::to_string(bytes.size()) +
         " bytes round trip");
}

void toy_training(Checks& c, const ToyRun& run) {
  std::vector<double> content;
  int phase2 = 0;
  bool finite = true;
  for (const auto& r : run.result.log.records()) {
    if (r.phase == 1) content.push_back(r.losses.at("content"));
    if (r.phase == 2) {
      ++phase2;
      for (const auto& [k, v] : r.losses) finite = finite && std::isfinite(v);
    }
  }
  c.expect(static_cast<int>(content.size()) >= kContentDropSteps, "only " + std::to_string(content.size()) +
                                                                       " phase-one steps");
  // Last epoch within the first 200 steps, averaged to smooth batch noise.
  const int per_epoch = static_cast<int>(toy_pairs().size()) / toy_config().batch_size;
  double late = 0.0;
  for (int i = kContentDropSteps - per_epoch; i < kContentDropSteps; ++i) late += content.at(i) / per_epoch;
  c.expect(late <= kContentDropFraction * content.front(),
           "content " + fmt(content.front()) + " -> " + fmt(late));
  c.expect(phase2 >= kPhase2Steps, "only " + std::to_string(phase2) + " phase-two steps");
  c.expect(finite, "non-finite phase-two loss");

  const ImagePair held = held_out_pair();
  const Image f = fuse_pair(run.result.state.model, held);
  const double sf_f = spatial_frequency(f), sf_t = (1 - kInformationSlack) * std::max(spatial_frequency(held.a),
                                                                                        spatial_frequency(held.b));
  const double en_f = entropy(f), en_t = (1 - kInformationSlack) * std::max(entropy(held.a), entropy(held.b));
  c.expect(sf_f >= sf_t, "SF " + fmt(sf_f) + " < " + fmt(sf_t));
  c.expect(en_f >= en_t, "EN " + fmt(en_f) + " < " + fmt(en_t));
  c.expect(run.seconds < kToySeconds, "runtime " + fmt(run.seconds) + " s");
  c.note("content " + fmt(content.front()) + " -> " + fmt(late) + ", " + std::to_string(phase2) +
         " finite phase-two steps, SF " + fmt(sf_f) + " vs " + fmt(sf_t) + ", EN " + fmt(en_f) + " vs " + fmt(en_t) +
         ", training " + fmt(run.seconds) + " s");
}

double mean_frame_l1(const std::vector<Image>& frames) {
  double s = 0.0;
  for (std::size_t t = 1; t < frames.size(); ++t) s += mean_abs_diff(frames[t], frames[t - 1]);
  return s / static_cast<double>(frames.size() - 1);
}

void temporal(Checks& c, const ToyRun& run, const fs::path& phase1_ckpt) {
  const auto still = fuse_video(run.result.state.model, synthetic::static_video(5, 31));
  double worst = 0.0;
  for (std::size_t t = 1; t < still.size(); ++t)
    worst = std::max(worst, temporal_consistency_loss(to_tensor(still[t]), to_tensor(still[t - 1])).item());
  c.expect(worst <= kTemporalZeroTolerance, "static temporal loss " + fmt(worst));

  // Phase two on a translating clip from one shared phase-one model.
  const VideoSequence clip = synthetic::translating_video(9, 41, 1.0);
  const TrainingSet set = TrainingSet::from_video(clip);
  auto branch = [&](double gamma) {
    TrainerState s = load_checkpoint(phase1_ckpt);
    s.config.loss.gamma_temp = gamma;
    s.config.phase2_epochs = 40;
    return mean_frame_l1(fuse_video(run_training(std::move(s), set).state.model, clip));
  };
  const double with = branch(0.5), without = branch(0.0);
  c.expect(with <= without, "frame L1 " + fmt(with) + " (0.5) > " + fmt(without) + " (0)");
  c.note("static max " + fmt(worst) + ", frame L1 " + fmt(with) + " with temporal term vs " + fmt(without) +
         " without");
}

void ablation_structure(Checks& c) {
  TrainingConfig cfg;
  cfg.network.base_channels = 8;
  cfg.network.dle_heads = 2;
  cfg.network.se_blocks = cfg.network.dhe_blocks = cfg.network.dle_blocks = 1;
  cfg.crop_size = 16;
  cfg.batch_size = 2;
  cfg.phase1_epochs = cfg.phase2_epochs = 2;
  const auto pairs = synthetic::blob_pairs(4, 2, {.size = 16, .blobs = 3, .noise_sd = 0.03});

  const std::set<std::string> disc{"disc_dm1", "disc_dm2"};
  const std::set<std::string> p1_core{"ae_total", "content", "correlation"};
  const std::set<std::string> p2_core{"ae_total", "intensity", "text"};
  auto with = [](std::set<std::string> s, const std::set<std::string>& extra) {
    s.insert(extra.begin(), extra.end());
    return s;
  };
  const std::set<std::string> adv = with(disc, {"adversarial_ae"});
  struct Expected {
    std::string preset;
    std::set<std::string> phase1, phase2;
    std::string fusion;
  };
  const std::vector<Expected> expected{
      {"baseline", with(p1_core, adv), with(p2_core, adv), "cross-attention"},
      {"no-disc-p1", p1_core, with(p2_core, adv), "cross-attention"},
      {"no-disc-p2", with(p1_core, adv), p2_core, "cross-attention"},
      {"no-cross-attn", with(p1_core, adv), with(p2_core, adv), "concatenation"},
  };
  std::size_t records = 0;
  for (const auto& e : expected) {
    const TrainingConfig pc = e.preset == "baseline" ? cfg : ablate(e.preset, cfg);
    const TrainResult r = train(pairs, pc);
    for (const auto& rec : r.log.records()) {
      ++records;
      const auto& want = rec.phase == 1 ? e.phase1 : e.phase2;
      if (keys_of(rec) != want) {
        c.expect(false, e.preset + " step " + std::to_string(rec.step) + " logged " + joined(keys_of(rec)) +
                            " want " + joined(want));
        return;
      }
      if (rec.phase == 2) c.expect(rec.fusion == e.fusion, e.preset + " fusion " + rec.fusion);
    }
    if (e.preset == "no-cross-attn") {
      ForwardStats stats;
      fuse_pair(r.state.model, pairs.front(), &stats);
      c.expect(stats.attention_weight_reads == 0,
               "concatenation fusion read " + std::to_string(stats.attention_weight_reads) + " attention weights");
    }
  }
  c.note(std::to_string(records) + " records across baseline and 3 presets match their term sets");
}

void determinism(Checks& c, const ToyRun& first, const fs::path& dir) {
  const ToyRun second = toy_run(dir);
  const auto& a = first.result.log.records();
  const auto& b = second.result.log.records();
  c.expect(a.size() == b.size(), "log lengths " + std::to_string(a.size()) + " vs " + std::to_string(b.size()));
  std::size_t first_diff = a.size();
  for (std::size_t i = 0; i < std::min(a.size(), b.size()); ++i) {
    if (!(a[i] == b[i])) {
      first_diff = i;
      break;
    }
  }
  c.expect(first_diff == a.size(), "logs diverge at record " + std::to_string(first_diff));
  c.expect(first.report == second.report, "held-out metric reports differ");
  c.expect(first.result.state.model.store == second.result.state.model.store, "final parameters differ");
  c.note(std::to_string(a.size()) + " identical records, identical held-out report and parameters");
}

}  // namespace

int main() {
  const fs::path scratch = scratch_dir();
  report(1, "gradient suite", gradients);
  report(2, "analytic zero/identity suite", zero_identity);
  report(3, "metric oracle suite", metric_oracles);
  report(4, "attention suite", attention);
  report(5, "architecture shape suite", shapes);

  ToyRun toy;
  report(6, "toy training smoke", [&](Checks& c) {
    toy = toy_run(scratch / "run1");
    toy_training(c, toy);
  });
  report(7, "temporal suite", [&](Checks& c) { temporal(c, toy, scratch / "run1" / "phase1.ckpt"); });
  report(8, "ablation structure", ablation_structure);
  report(9, "determinism", [&](Checks& c) { determinism(c, toy, scratch / "run2"); });

  fs::remove_all(scratch);
  std::cout << (failed == 0 ? "all criteria passed" : std::to_string(failed) + " criteria failed") << std::endl;
  return failed;
}
