#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>

#include "selpred/synth.hpp"
#include "test_support.hpp"

using selpred::AugmentSpec;
using selpred::Matrix;
using selpred::Rng;
using selpred::SynthSpec;
using test_support::TempDir;

TEST_CASE("generate_dataset is deterministic and split 60/20/20") {
  SynthSpec spec;
  spec.seed = 7;
  const auto a = selpred::generate_dataset(spec);
  const auto b = selpred::generate_dataset(spec);
  CHECK(a.features == b.features);
  CHECK(a.labels == b.labels);
  CHECK(a.splits.train == b.splits.train);
  CHECK(a.splits.calibration == b.splits.calibration);

  CHECK(a.features.rows == 1000);
  CHECK(a.splits.train.size() == 600);
  CHECK(a.splits.calibration.size() == 200);
  CHECK(a.splits.evaluation.size() == 200);

  // Stratified: every class contributes equally to each split.
  std::vector<int> per_class(5, 0);
  for (std::size_t idx : a.splits.train) ++per_class[a.labels[idx]];
  for (int c : per_class) CHECK(c == 120);

  SynthSpec other = spec;
  other.seed = 8;
  CHECK_FALSE(selpred::generate_dataset(other).features == a.features);
}

TEST_CASE("vanishing cluster noise makes nearest-center classification perfect") {
  SynthSpec spec;
  spec.samples_per_class = 20;
  spec.cluster_std = 1e-9;
  spec.seed = 3;
  const auto ds = selpred::generate_dataset(spec);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < ds.features.rows; ++i) {
    double best = 1e300;
    int best_k = -1;
    for (int k = 0; k < spec.n_classes; ++k) {
      double d2 = 0.0;
      for (std::size_t j = 0; j < spec.input_dim; ++j) {
        const double d = ds.features(i, j) - ds.class_centers[k](0, j);
        d2 += d * d;
      }
      if (d2 < best) {
        best = d2;
        best_k = k;
      }
    }
    if (best_k == ds.labels[i]) ++correct;
  }
  CHECK(correct == ds.features.rows);
}

TEST_CASE("identity augmentation returns the input twice") {
  AugmentSpec aug;
  aug.noise_std = 0.0;
  aug.mask_prob = 0.0;
  aug.shuffle_blocks = 1;
  Rng rng(5);
  const std::vector<double> x{1, 2, 3, 4};
  const auto [v1, v2] = selpred::make_views(x, aug, rng);
  CHECK(v1 == x);
  CHECK(v2 == x);
}

TEST_CASE("masking scales the expected view toward (1-p) x") {
  AugmentSpec aug;
  aug.noise_std = 0.0;
  aug.mask_prob = 0.3;
  aug.shuffle_blocks = 1;
  Rng rng(11);
  const std::vector<double> x(8, 2.0);
  double sum = 0.0;
  const int draws = 10000;
  for (int t = 0; t < draws; ++t) {
    const auto [v1, v2] = selpred::make_views(x, aug, rng);
    for (double v : v1) sum += v;
    for (double v : v2) sum += v;
  }
  const double mean = sum / (2.0 * draws * 8.0);
  // Per-coordinate sd is 2*sqrt(p(1-p)); 3 sigma of the pooled mean.
  const double sigma = 2.0 * std::sqrt(0.3 * 0.7) / std::sqrt(2.0 * draws * 8.0);
  CHECK(std::abs(mean - 0.7 * 2.0) < 3.0 * sigma);
}

TEST_CASE("block shuffling permutes contiguous blocks") {
  AugmentSpec aug;
  aug.noise_std = 0.0;
  aug.mask_prob = 0.0;
  aug.shuffle_blocks = 4;
  Rng rng(13);
  const std::vector<double> x{10, 11, 20, 21, 30, 31, 40, 41};
  bool saw_nonidentity = false;
  for (int t = 0; t < 50; ++t) {
    const auto [v1, v2] = selpred::make_views(x, aug, rng);
    for (const auto& v : {v1, v2}) {
      auto sorted_v = v;
      auto sorted_x = x;
      std::sort(sorted_v.begin(), sorted_v.end());
      std::sort(sorted_x.begin(), sorted_x.end());
      CHECK(sorted_v == sorted_x);  // multiset preserved
      // Each output 2-block must be one of the input 2-blocks, in order.
      for (std::size_t b = 0; b < 4; ++b) {
        const double lo = v[2 * b];
        CHECK(v[2 * b + 1] == lo + 1.0);
      }
      if (v != x) saw_nonidentity = true;
    }
  }
  CHECK(saw_nonidentity);
}

TEST_CASE("augment spec validation") {
  AugmentSpec aug;
  aug.mask_prob = 1.0;
  Rng rng(1);
  CHECK_THROWS_AS(selpred::make_views(std::vector<double>{1.0}, aug, rng),
                  selpred::ValidationError);
}

namespace {

selpred::PretrainConfig small_pretrain(std::size_t epochs, std::size_t every) {
  selpred::PretrainConfig cfg;
  cfg.embed_dim = 4;
  cfg.epochs = epochs;
  cfg.checkpoint_every = every;
  cfg.lr = 1e-3;
  cfg.seed = 5;
  return cfg;
}

Matrix small_features(std::size_t n, std::size_t d, std::uint64_t seed) {
  Rng rng(seed);
  return test_support::random_matrix(n, d, rng);
}

}  // namespace

TEST_CASE("pretrain checkpoint schedule") {
  const Matrix feats = small_features(24, 6, 1);
  selpred::LossParams params;
  AugmentSpec aug;

  const auto cks =
      selpred::pretrain(feats, selpred::LossId::Sicova, params, aug,
                        small_pretrain(100, 10));
  REQUIRE(cks.size() == 10);
  for (std::size_t i = 0; i < 10; ++i) CHECK(cks[i].pretrain_epoch == 10 * (i + 1));

  // A final epoch off the regular schedule is checkpointed too.
  const auto odd = selpred::pretrain(feats, selpred::LossId::Sicova, params, aug,
                                     small_pretrain(25, 10));
  REQUIRE(odd.size() == 3);
  CHECK(odd.back().pretrain_epoch == 25);
}

TEST_CASE("zero learning rate freezes the encoder") {
  const Matrix feats = small_features(24, 6, 2);
  selpred::LossParams params;
  AugmentSpec aug;
  auto cfg = small_pretrain(30, 10);
  cfg.lr = 0.0;
  const auto cks = selpred::pretrain(feats, selpred::LossId::Sicova, params, aug, cfg);
  REQUIRE(cks.size() == 3);
  CHECK(cks[0].encoder_weights == cks[1].encoder_weights);
  CHECK(cks[0].encoder_weights == cks[2].encoder_weights);
}

TEST_CASE("pretraining reduces the sicova loss on the default-style setup") {
  SynthSpec spec;
  spec.samples_per_class = 30;
  spec.input_dim = 16;
  spec.seed = 9;
  const auto ds = selpred::generate_dataset(spec);
  selpred::LossParams params;
  AugmentSpec aug;
  aug.noise_std = 0.25;
  auto cfg = small_pretrain(60, 10);
  cfg.lr = 2e-3;
  const auto cks =
      selpred::pretrain(ds.features, selpred::LossId::Sicova, params, aug, cfg);
  CHECK(cks.back().pretrain_loss.total < cks.front().pretrain_loss.total);
}

TEST_CASE("pretraining diverges loudly at huge learning rates") {
  const Matrix feats = small_features(16, 6, 3);
  selpred::LossParams params;
  AugmentSpec aug;
  auto cfg = small_pretrain(50, 10);
  cfg.lr = 1e14;
  try {
    selpred::pretrain(feats, selpred::LossId::Sicova, params, aug, cfg);
    FAIL("expected DivergenceError");
  } catch (const selpred::DivergenceError& e) {
    CHECK(e.epoch() >= 1);
    CHECK(std::string(e.what()).find("epoch") != std::string::npos);
  }
}

TEST_CASE("encoder chain-rule gradient matches finite differences") {
  Rng rng(29);
  const Matrix v1 = test_support::random_matrix(16, 6, rng);
  const Matrix v2 = test_support::random_matrix(16, 6, rng);
  Matrix w = test_support::random_matrix(6, 4, rng, 0.5);
  selpred::LossParams params;

  for (const auto id : {selpred::LossId::Sicova, selpred::LossId::Triplet}) {
    const auto [value, dw] = selpred::encoder_step_gradient(w, v1, v2, id, params);
    (void)value;
    const double h = 1e-5;
    double worst = 0.0;
    for (std::size_t t = 0; t < w.data.size(); ++t) {
      const double orig = w.data[t];
      w.data[t] = orig + h;
      const double fp =
          selpred::loss_value(id, selpred::matmul(v1, w), selpred::matmul(v2, w),
                              params);
      w.data[t] = orig - h;
      const double fm =
          selpred::loss_value(id, selpred::matmul(v1, w), selpred::matmul(v2, w),
                              params);
      w.data[t] = orig;
      const double numeric = (fp - fm) / (2.0 * h);
      const double denom = std::max({std::abs(dw.data[t]), std::abs(numeric), 1e-8});
      worst = std::max(worst, std::abs(dw.data[t] - numeric) / denom);
    }
    CHECK(worst < 1e-5);
  }
}

TEST_CASE("finetune_head is a pure function of the checkpoint") {
  SynthSpec spec;
  spec.samples_per_class = 20;
  spec.input_dim = 8;
  spec.seed = 4;
  const auto ds = selpred::generate_dataset(spec);
  Rng rng(31);
  selpred::Checkpoint ckpt{40, test_support::random_matrix(8, 4, rng, 0.3), {}};
  selpred::HeadConfig head;
  head.epochs = 50;

  const auto a = selpred::finetune_head(ckpt, ds.features, ds.labels, ds.splits,
                                        spec.n_classes, head);
  const auto b = selpred::finetune_head(ckpt, ds.features, ds.labels, ds.splits,
                                        spec.n_classes, head);
  CHECK(a.train.logits == b.train.logits);
  CHECK(a.calibration.logits == b.calibration.logits);
  CHECK(a.evaluation.logits == b.evaluation.logits);
}

TEST_CASE("the head fits separable data to full training accuracy") {
  SynthSpec spec;
  spec.samples_per_class = 20;
  spec.input_dim = 8;
  spec.cluster_std = 1e-3;
  spec.class_center_spacing = 5.0;
  spec.seed = 6;
  const auto ds = selpred::generate_dataset(spec);
  // Identity-ish encoder: first 4 input dims pass through.
  Matrix w(8, 4);
  for (std::size_t j = 0; j < 4; ++j) w(j, j) = 1.0;
  selpred::Checkpoint ckpt{10, w, {}};
  selpred::HeadConfig head;
  head.epochs = 500;
  head.lr = 0.5;
  const auto rec = selpred::finetune_head(ckpt, ds.features, ds.labels, ds.splits,
                                          spec.n_classes, head);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < rec.train.size(); ++i)
    if (static_cast<int>(selpred::argmax_row(rec.train.logits, i)) ==
        rec.train.labels[i])
      ++correct;
  CHECK(correct == rec.train.size());
}

TEST_CASE("zero head learning rate leaves uniform logits") {
  SynthSpec spec;
  spec.samples_per_class = 10;
  spec.input_dim = 8;
  spec.seed = 8;
  const auto ds = selpred::generate_dataset(spec);
  Rng rng(37);
  selpred::Checkpoint ckpt{10, test_support::random_matrix(8, 4, rng), {}};
  selpred::HeadConfig head;
  head.epochs = 20;
  head.lr = 0.0;
  const auto rec = selpred::finetune_head(ckpt, ds.features, ds.labels, ds.splits,
                                          spec.n_classes, head);
  for (double v : rec.evaluation.logits.data) CHECK(v == 0.0);
}

namespace {

selpred::ExperimentConfig tiny_experiment(const std::filesystem::path& out) {
  selpred::ExperimentConfig cfg;
  cfg.run_id = "tiny";
  cfg.seed = 1;
  cfg.synth.n_classes = 3;
  cfg.synth.samples_per_class = 30;
  cfg.synth.input_dim = 8;
  cfg.pretrain.embed_dim = 4;
  cfg.pretrain.epochs = 20;
  cfg.pretrain.checkpoint_every = 10;
  cfg.pretrain.lr = 2e-3;
  cfg.head.epochs = 80;
  cfg.augment.noise_std = 0.2;
  cfg.out_dir = out;
  return cfg;
}

}  // namespace

TEST_CASE("run_experiment writes one summary row per checkpoint, twice the same") {
  TempDir dir("experiment");
  const auto cfg1 = tiny_experiment(dir.path / "r1");
  const auto cfg2 = tiny_experiment(dir.path / "r2");
  const auto r1 = selpred::run_experiment(cfg1);
  const auto r2 = selpred::run_experiment(cfg2, /*jobs=*/3);

  CHECK(r1.per_checkpoint.size() == 2);
  CHECK(r1.summary.size() == 2);

  for (const char* rel :
       {"results/summary.csv", "results/rank.csv", "results/risk_coverage.svg",
        "manifest.json", "records/ep-20/eval-logits.csv",
        "checkpoints/ep-10.ckpt"}) {
    CAPTURE(rel);
    CHECK(test_support::read_file(dir.path / "r1" / rel) ==
          test_support::read_file(dir.path / "r2" / rel));
    CHECK(!test_support::read_file(dir.path / "r1" / rel).empty());
  }

  // The emitted manifest loads and reproduces the same ranking.
  const auto manifest = selpred::read_manifest(dir.path / "r1" / "manifest.json");
  REQUIRE(manifest.checkpoints.size() == 2);
  std::vector<selpred::CheckpointEval> recs;
  for (const auto& e : manifest.checkpoints)
    recs.push_back(selpred::load_checkpoint_eval(manifest, e));
  const auto ranking = selpred::rank_checkpoints(recs, manifest.target_coverage);
  REQUIRE(ranking.ranking.size() == r1.ranking.ranking.size());
  for (std::size_t i = 0; i < ranking.ranking.size(); ++i)
    CHECK(ranking.ranking[i].checkpoint_id ==
          r1.ranking.ranking[i].checkpoint_id);
}

TEST_CASE("a full-coverage target reproduces the unabstained metrics") {
  TempDir dir("fullcov");
  auto cfg = tiny_experiment(dir.path / "r");
  cfg.target_coverage = 1.0;
  const auto result = selpred::run_experiment(cfg);
  for (const auto& rc : result.per_checkpoint) {
    CHECK(rc.operating_point.point.threshold == 0.0);
    CHECK(rc.operating_point.point.coverage == 1.0);
  }
}

TEST_CASE("load_experiment_config applies defaults and validates") {
  TempDir dir("config");
  {
    std::ofstream out(dir.path / "c.json");
    out << R"({"run_id": "x", "out_dir": ")" << (dir.path / "out").string()
        << R"(", "pretrain": {"epochs": 30, "checkpoint_every": 15}})";
  }
  const auto cfg = selpred::load_experiment_config(dir.path / "c.json");
  CHECK(cfg.run_id == "x");
  CHECK(cfg.synth.n_classes == 5);       // default
  CHECK(cfg.pretrain.epochs == 30);      // overridden
  CHECK(cfg.target_coverage == 0.70);    // default
  cfg.validate();

  CHECK_THROWS_AS(selpred::load_experiment_config(dir.path / "missing.json"),
                  selpred::ValidationError);

  {
    std::ofstream out(dir.path / "bad.json");
    out << "{nope";
  }
  CHECK_THROWS_AS(selpred::load_experiment_config(dir.path / "bad.json"),
                  selpred::ParseError);
}
