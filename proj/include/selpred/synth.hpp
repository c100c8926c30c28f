#pragma once

#include <atomic>
#include <cmath>
#include <cstdint>
#include <exception>
#include <filesystem>
#include <mutex>
#include <span>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include <json.hpp>

#include "selpred/io.hpp"
#include "selpred/losses.hpp"
#include "selpred/matrix.hpp"
#include "selpred/report.hpp"
#include "selpred/rng.hpp"
#include "selpred/selective.hpp"

namespace selpred {

/// Synthetic ordinal dataset: class centers equally spaced along one line
/// through the input space, isotropic Gaussian clusters around them.
struct SynthSpec {
  int n_classes = 5;
  std::size_t samples_per_class = 200;
  std::size_t input_dim = 32;
  double class_center_spacing = 2.0;
  double cluster_std = 1.0;
  std::uint64_t seed = 0;

  void validate() const {
    if (n_classes < 2) throw ValidationError("synth: n_classes must be >= 2");
    if (samples_per_class == 0)
      throw ValidationError("synth: samples_per_class must be >= 1");
    if (input_dim == 0) throw ValidationError("synth: input_dim must be >= 1");
    if (!(class_center_spacing > 0))
      throw ValidationError("synth: class_center_spacing must be positive");
    if (!(cluster_std > 0))
      throw ValidationError("synth: cluster_std must be positive");
  }
};

/// Vector-level view augmentations: additive Gaussian noise, random
/// coordinate masking, and a random permutation of contiguous coordinate
/// blocks (the vector analogue of patch shuffling).
struct AugmentSpec {
  double noise_std = 0.1;
  double mask_prob = 0.1;
  std::size_t shuffle_blocks = 1;

  void validate() const {
    if (noise_std < 0) throw ValidationError("augment: noise_std must be >= 0");
    if (mask_prob < 0 || mask_prob >= 1)
      throw ValidationError("augment: mask_prob must lie in [0, 1)");
    if (shuffle_blocks == 0)
      throw ValidationError("augment: shuffle_blocks must be >= 1");
  }
};

struct SplitIndices {
  std::vector<std::size_t> train, calibration, evaluation;
};

struct Dataset {
  Matrix features;          // (K * samples_per_class) x input_dim
  std::vector<int> labels;  // class-major order
  SplitIndices splits;      // stratified 60/20/20
  std::vector<Matrix> class_centers;  // 1 x input_dim each, for diagnostics
};

/// Deterministic per seed: same spec gives bitwise-identical features/splits.
inline Dataset generate_dataset(const SynthSpec& spec) {
  spec.validate();
  const Rng root(spec.seed);

  // Unit direction of the severity line.
  std::vector<double> direction(spec.input_dim);
  {
    Rng dir_rng = root.split(0xD17);
    double norm2 = 0.0;
    for (auto& v : direction) {
      v = dir_rng.normal();
      norm2 += v * v;
    }
    const double inv = 1.0 / std::sqrt(norm2);
    for (auto& v : direction) v *= inv;
  }

  const std::size_t n = static_cast<std::size_t>(spec.n_classes) * spec.samples_per_class;
  Dataset ds;
  ds.features = Matrix(n, spec.input_dim);
  ds.labels.resize(n);
  const double half = (spec.n_classes - 1) / 2.0;
  for (int k = 0; k < spec.n_classes; ++k) {
    const double offset = (k - half) * spec.class_center_spacing;
    Matrix center(1, spec.input_dim);
    for (std::size_t j = 0; j < spec.input_dim; ++j)
      center(0, j) = offset * direction[j];
    ds.class_centers.push_back(center);
    Rng cls_rng = root.split(0x1000 + static_cast<std::uint64_t>(k));
    for (std::size_t s = 0; s < spec.samples_per_class; ++s) {
      const std::size_t row = static_cast<std::size_t>(k) * spec.samples_per_class + s;
      ds.labels[row] = k;
      for (std::size_t j = 0; j < spec.input_dim; ++j)
        ds.features(row, j) = center(0, j) + spec.cluster_std * cls_rng.normal();
    }
  }

  // Stratified 60/20/20 split, shuffled within each class.
  for (int k = 0; k < spec.n_classes; ++k) {
    std::vector<std::size_t> idx(spec.samples_per_class);
    for (std::size_t s = 0; s < idx.size(); ++s)
      idx[s] = static_cast<std::size_t>(k) * spec.samples_per_class + s;
    Rng split_rng = root.split(0x2000 + static_cast<std::uint64_t>(k));
    split_rng.shuffle(idx);
    const std::size_t n_train = spec.samples_per_class * 6 / 10;
    const std::size_t n_cal = spec.samples_per_class * 2 / 10;
    for (std::size_t s = 0; s < idx.size(); ++s) {
      if (s < n_train)
        ds.splits.train.push_back(idx[s]);
      else if (s < n_train + n_cal)
        ds.splits.calibration.push_back(idx[s]);
      else
        ds.splits.evaluation.push_back(idx[s]);
    }
  }
  return ds;
}

/// Two independent stochastic views of one input vector.
inline std::pair<std::vector<double>, std::vector<double>> make_views(
    std::span<const double> x, const AugmentSpec& aug, Rng& rng) {
  aug.validate();
  auto one_view = [&]() {
    std::vector<double> v(x.begin(), x.end());
    if (aug.noise_std > 0)
      for (auto& e : v) e += aug.noise_std * rng.normal();
    if (aug.mask_prob > 0)
      for (auto& e : v)
        if (rng.uniform() < aug.mask_prob) e = 0.0;
    if (aug.shuffle_blocks > 1) {
      const std::size_t d = v.size(), b = aug.shuffle_blocks;
      std::vector<std::size_t> order(b);
      for (std::size_t i = 0; i < b; ++i) order[i] = i;
      rng.shuffle(order);
      std::vector<double> shuffled;
      shuffled.reserve(d);
      for (std::size_t blk : order) {
        const std::size_t lo = blk * d / b, hi = (blk + 1) * d / b;
        shuffled.insert(shuffled.end(), v.begin() + lo, v.begin() + hi);
      }
      v = std::move(shuffled);
    }
    return v;
  };
  auto v1 = one_view();
  auto v2 = one_view();
  return {std::move(v1), std::move(v2)};
}

/// One saved pretraining state. For the triplet loss only the breakdown's
/// total field is populated.
struct Checkpoint {
  std::size_t pretrain_epoch = 0;
  Matrix encoder_weights;  // input_dim x embed_dim
  LossBreakdown pretrain_loss;
};

struct PretrainConfig {
  std::size_t embed_dim = 8;
  std::size_t epochs = 200;
  std::size_t checkpoint_every = 20;
  double lr = 1e-3;
  std::size_t batch = 0;  // 0 = full batch
  std::uint64_t seed = 0;

  void validate() const {
    if (embed_dim == 0) throw ValidationError("pretrain: embed_dim must be >= 1");
    if (checkpoint_every == 0 || epochs < checkpoint_every)
      throw ValidationError("pretrain: need epochs >= checkpoint_every >= 1");
    if (!(lr >= 0)) throw ValidationError("pretrain: lr must be non-negative");
  }
};

/// Loss and encoder-weight gradient of one batch through the linear encoder:
/// z = v1 W, z' = v2 W, dW = v1^T dz + v2^T dz'.
inline std::pair<double, Matrix> encoder_step_gradient(
    const Matrix& weights, const Matrix& v1, const Matrix& v2, LossId loss_id,
    const LossParams& params) {
  const Matrix z = matmul(v1, weights);
  const Matrix zp = matmul(v2, weights);
  const double value = loss_value(loss_id, z, zp, params);
  const GradPair g = loss_gradient(loss_id, z, zp, params);
  Matrix dw = matmul(v1, g.d_z, /*transpose_a=*/true);
  const Matrix dw2 = matmul(v2, g.d_zp, /*transpose_a=*/true);
  for (std::size_t t = 0; t < dw.data.size(); ++t) dw.data[t] += dw2.data[t];
  return {value, std::move(dw)};
}

/// Gradient-descent pretraining of the linear encoder on augmented views.
/// Checkpoints at every multiple of checkpoint_every plus the final epoch.
inline std::vector<Checkpoint> pretrain(const Matrix& features, LossId loss_id,
                                        const LossParams& params,
                                        const AugmentSpec& aug,
                                        const PretrainConfig& cfg) {
  cfg.validate();
  aug.validate();
  if (features.rows < 2)
    throw DimensionError("pretrain: needs at least 2 samples");

  const Rng root(cfg.seed);
  Matrix w(features.cols, cfg.embed_dim);
  {
    Rng init_rng = root.split(0x11717);
    const double scale = 1.0 / std::sqrt(static_cast<double>(features.cols));
    for (auto& v : w.data) v = scale * init_rng.normal();
  }

  const std::size_t n = features.rows;
  const std::size_t batch = (cfg.batch == 0 || cfg.batch > n) ? n : cfg.batch;
  std::vector<Checkpoint> checkpoints;

  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    Rng order_rng = root.split(0x0BD0000 + epoch);
    Rng view_rng = root.split(0x71E0000 + epoch);
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    if (batch < n) order_rng.shuffle(order);

    LossBreakdown epoch_loss;
    std::size_t n_batches = 0;
    for (std::size_t start = 0; start < n; start += batch) {
      const std::size_t stop = std::min(start + batch, n);
      const std::size_t bsize = stop - start;
      if (bsize < 2) continue;  // a stray single-sample batch has no loss
      Matrix v1(bsize, features.cols), v2(bsize, features.cols);
      for (std::size_t r = 0; r < bsize; ++r) {
        auto [a, b] = make_views(features.row(order[start + r]), aug, view_rng);
        for (std::size_t j = 0; j < features.cols; ++j) {
          v1(r, j) = a[j];
          v2(r, j) = b[j];
        }
      }
      double value = 0.0;
      if (loss_id == LossId::Sicova) {
        // Track the component breakdown alongside the gradient step.
        const Matrix z = matmul(v1, w);
        const Matrix zp = matmul(v2, w);
        const LossBreakdown b = sicova_loss(z, zp, params.sicova);
        value = b.total;
        epoch_loss.var_z += b.var_z;
        epoch_loss.var_zp += b.var_zp;
        epoch_loss.cov_z += b.cov_z;
        epoch_loss.cov_zp += b.cov_zp;
        epoch_loss.inv += b.inv;
        epoch_loss.corr += b.corr;
        const GradPair g = sicova_gradient(z, zp, params.sicova);
        Matrix dw = matmul(v1, g.d_z, /*transpose_a=*/true);
        const Matrix dw2 = matmul(v2, g.d_zp, /*transpose_a=*/true);
        for (std::size_t t = 0; t < dw.data.size(); ++t)
          w.data[t] -= cfg.lr * (dw.data[t] + dw2.data[t]);
      } else {
        auto [v, dw] = encoder_step_gradient(w, v1, v2, loss_id, params);
        value = v;
        for (std::size_t t = 0; t < w.data.size(); ++t)
          w.data[t] -= cfg.lr * dw.data[t];
      }
      if (!std::isfinite(value))
        throw DivergenceError(
            "pretraining diverged (non-finite loss) at epoch " +
                std::to_string(epoch),
            epoch);
      epoch_loss.total += value;
      ++n_batches;
    }
    if (n_batches > 1) {
      const double inv = 1.0 / static_cast<double>(n_batches);
      epoch_loss.var_z *= inv;
      epoch_loss.var_zp *= inv;
      epoch_loss.cov_z *= inv;
      epoch_loss.cov_zp *= inv;
      epoch_loss.inv *= inv;
      epoch_loss.corr *= inv;
      epoch_loss.total *= inv;
    }
    if (!w.all_finite())
      throw DivergenceError(
          "pretraining diverged (non-finite weights) at epoch " +
              std::to_string(epoch),
          epoch);
    if (epoch % cfg.checkpoint_every == 0 || epoch == cfg.epochs) {
      checkpoints.push_back({epoch, w, epoch_loss});
    }
  }
  return checkpoints;
}

struct HeadConfig {
  std::size_t epochs = 500;
  double lr = 0.5;
  std::uint64_t seed = 0;

  void validate() const {
    if (epochs == 0) throw ValidationError("head: epochs must be >= 1");
    if (!(lr >= 0)) throw ValidationError("head: lr must be non-negative");
  }
};

/// Logits for all three splits of one fine-tuned checkpoint.
struct CheckpointRecord {
  std::string checkpoint_id;
  std::size_t pretrain_epoch = 0;
  LogitsSet train, calibration, evaluation;
};

namespace detail {

inline Matrix gather_rows(const Matrix& m, const std::vector<std::size_t>& idx) {
  Matrix out(idx.size(), m.cols);
  for (std::size_t r = 0; r < idx.size(); ++r)
    for (std::size_t j = 0; j < m.cols; ++j) out(r, j) = m(idx[r], j);
  return out;
}

inline std::vector<int> gather_labels(const std::vector<int>& labels,
                                      const std::vector<std::size_t>& idx) {
  std::vector<int> out(idx.size());
  for (std::size_t r = 0; r < idx.size(); ++r) out[r] = labels[idx[r]];
  return out;
}

}  // namespace detail

/// Freeze the encoder, train a zero-initialized multinomial-logistic head on
/// the train split by full-batch gradient descent on cross-entropy, and emit
/// logits for all three splits. Fully deterministic given its inputs.
inline CheckpointRecord finetune_head(const Checkpoint& ckpt,
                                      const Matrix& features,
                                      const std::vector<int>& labels,
                                      const SplitIndices& splits, int n_classes,
                                      const HeadConfig& cfg) {
  cfg.validate();
  if (splits.train.empty())
    throw ValidationError("finetune_head: empty train split");
  const std::size_t embed = ckpt.encoder_weights.cols;
  const Matrix all_embeddings = matmul(features, ckpt.encoder_weights);

  const Matrix e_train = detail::gather_rows(all_embeddings, splits.train);
  const auto y_train = detail::gather_labels(labels, splits.train);
  const std::size_t n = e_train.rows;
  const std::size_t k = static_cast<std::size_t>(n_classes);

  Matrix head(embed, k);           // zero init: uniform starting probabilities
  std::vector<double> bias(k, 0.0);

  Matrix logits(n, k);
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    // logits = e_train * head + bias
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < k; ++j) {
        double acc = bias[j];
        for (std::size_t t = 0; t < embed; ++t)
          acc += e_train(i, t) * head(t, j);
        logits(i, j) = acc;
      }
    if (!logits.all_finite())
      throw DivergenceError(
          "head training diverged (non-finite logits) at epoch " +
              std::to_string(epoch),
          epoch);
    // dLogits = (softmax - onehot) / n
    Matrix dlogits = softmax_probs(logits, 1.0);
    for (std::size_t i = 0; i < n; ++i)
      dlogits(i, static_cast<std::size_t>(y_train[i])) -= 1.0;
    for (double& v : dlogits.data) v /= static_cast<double>(n);
    const Matrix dhead = matmul(e_train, dlogits, /*transpose_a=*/true);
    for (std::size_t t = 0; t < head.data.size(); ++t)
      head.data[t] -= cfg.lr * dhead.data[t];
    for (std::size_t j = 0; j < k; ++j) {
      double acc = 0.0;
      for (std::size_t i = 0; i < n; ++i) acc += dlogits(i, j);
      bias[j] -= cfg.lr * acc;
    }
  }

  auto emit = [&](const std::vector<std::size_t>& idx) {
    const Matrix e = detail::gather_rows(all_embeddings, idx);
    Matrix out(e.rows, k);
    for (std::size_t i = 0; i < e.rows; ++i)
      for (std::size_t j = 0; j < k; ++j) {
        double acc = bias[j];
        for (std::size_t t = 0; t < embed; ++t) acc += e(i, t) * head(t, j);
        out(i, j) = acc;
      }
    return LogitsSet{std::move(out), detail::gather_labels(labels, idx), n_classes};
  };

  CheckpointRecord rec;
  rec.checkpoint_id = "ep-" + std::to_string(ckpt.pretrain_epoch);
  rec.pretrain_epoch = ckpt.pretrain_epoch;
  rec.train = emit(splits.train);
  rec.calibration = emit(splits.calibration);
  rec.evaluation = emit(splits.evaluation);
  return rec;
}

/// Declarative experiment configuration (see README for the file format).
struct ExperimentConfig {
  std::string run_id = "run";
  std::uint64_t seed = 0;
  LossId loss_id = LossId::Sicova;
  LossParams loss_params;
  SynthSpec synth;
  AugmentSpec augment;
  PretrainConfig pretrain;
  HeadConfig head;
  double target_coverage = 0.70;
  double grid_step = 0.01;
  MacroF1Policy macro_f1_policy = MacroF1Policy::ExcludeAbsent;
  std::filesystem::path out_dir;

  void validate() const {
    synth.validate();
    augment.validate();
    pretrain.validate();
    head.validate();
    if (!(target_coverage > 0) || target_coverage > 1)
      throw ValidationError("config: target_coverage must lie in (0, 1]");
    if (!(grid_step > 0) || grid_step > 1)
      throw ValidationError("config: grid_step must lie in (0, 1]");
    if (out_dir.empty()) throw ValidationError("config: out_dir is required");
  }
};

namespace detail {

template <typename T>
void maybe_get(const nlohmann::json& j, const char* key, T& out) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const nlohmann::json::exception&) {
    throw ValidationError(std::string("config: key '") + key +
                          "' has the wrong type");
  }
}

}  // namespace detail

/// Load a config file (JSON). Unknown keys are ignored.
inline ExperimentConfig load_experiment_config(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot open config: " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError("config is not valid JSON: " + std::string(e.what()));
  }

  ExperimentConfig cfg;
  detail::maybe_get(j, "run_id", cfg.run_id);
  detail::maybe_get(j, "seed", cfg.seed);
  detail::maybe_get(j, "target_coverage", cfg.target_coverage);
  detail::maybe_get(j, "grid_step", cfg.grid_step);
  std::string out_dir;
  detail::maybe_get(j, "out_dir", out_dir);
  cfg.out_dir = out_dir;
  std::string policy = "exclude_absent";
  detail::maybe_get(j, "macro_f1_policy", policy);
  if (policy == "exclude_absent")
    cfg.macro_f1_policy = MacroF1Policy::ExcludeAbsent;
  else if (policy == "include_absent_as_zero")
    cfg.macro_f1_policy = MacroF1Policy::IncludeAbsentAsZero;
  else
    throw ValidationError("config: unknown macro_f1_policy '" + policy + "'");

  if (j.contains("loss")) {
    const auto& lj = j.at("loss");
    std::string id = "sicova";
    detail::maybe_get(lj, "id", id);
    cfg.loss_id = parse_loss_id(id);
    detail::maybe_get(lj, "lambda_intra", cfg.loss_params.sicova.lambda_intra);
    detail::maybe_get(lj, "lambda_inv", cfg.loss_params.sicova.lambda_inv);
    detail::maybe_get(lj, "lambda_corr", cfg.loss_params.sicova.lambda_corr);
    detail::maybe_get(lj, "gamma", cfg.loss_params.sicova.gamma);
    detail::maybe_get(lj, "eps_var", cfg.loss_params.sicova.eps_var);
    detail::maybe_get(lj, "eps_norm", cfg.loss_params.sicova.eps_norm);
    detail::maybe_get(lj, "margin", cfg.loss_params.triplet.margin);
    detail::maybe_get(lj, "symmetric", cfg.loss_params.triplet.symmetric);
  }
  if (j.contains("synth")) {
    const auto& sj = j.at("synth");
    detail::maybe_get(sj, "n_classes", cfg.synth.n_classes);
    detail::maybe_get(sj, "samples_per_class", cfg.synth.samples_per_class);
    detail::maybe_get(sj, "input_dim", cfg.synth.input_dim);
    detail::maybe_get(sj, "class_center_spacing", cfg.synth.class_center_spacing);
    detail::maybe_get(sj, "cluster_std", cfg.synth.cluster_std);
  }
  if (j.contains("augment")) {
    const auto& aj = j.at("augment");
    detail::maybe_get(aj, "noise_std", cfg.augment.noise_std);
    detail::maybe_get(aj, "mask_prob", cfg.augment.mask_prob);
    detail::maybe_get(aj, "shuffle_blocks", cfg.augment.shuffle_blocks);
  }
  if (j.contains("pretrain")) {
    const auto& pj = j.at("pretrain");
    detail::maybe_get(pj, "embed_dim", cfg.pretrain.embed_dim);
    detail::maybe_get(pj, "epochs", cfg.pretrain.epochs);
    detail::maybe_get(pj, "checkpoint_every", cfg.pretrain.checkpoint_every);
    detail::maybe_get(pj, "lr", cfg.pretrain.lr);
    detail::maybe_get(pj, "batch", cfg.pretrain.batch);
  }
  if (j.contains("head")) {
    const auto& hj = j.at("head");
    detail::maybe_get(hj, "epochs", cfg.head.epochs);
    detail::maybe_get(hj, "lr", cfg.head.lr);
  }
  return cfg;
}

struct ExperimentResult {
  std::vector<RankedCheckpoint> per_checkpoint;  // epoch order
  RankingResult ranking;
  std::vector<SummaryRow> summary;  // rank order
  std::filesystem::path out_dir;
};

/// Full protocol: generate data, pretrain with checkpoints, fine-tune a head
/// per checkpoint under identical settings, calibrate each on the calibration
/// split, sweep thresholds on the evaluation split, and write every artifact
/// (checkpoints, logits, manifest, summary, ranking, plot) under out_dir.
/// Byte-deterministic for a fixed config, regardless of the job count.
inline ExperimentResult run_experiment(const ExperimentConfig& cfg,
                                       unsigned jobs = 1) {
  cfg.validate();
  const std::filesystem::path out = cfg.out_dir;
  std::filesystem::create_directories(out / "checkpoints");
  std::filesystem::create_directories(out / "records");
  std::filesystem::create_directories(out / "results");

  SynthSpec synth = cfg.synth;
  synth.seed = cfg.seed;
  const Dataset ds = generate_dataset(synth);

  PretrainConfig pre = cfg.pretrain;
  pre.seed = Rng(cfg.seed).split(0x9E7).seed();
  const Matrix train_features = detail::gather_rows(ds.features, ds.splits.train);
  const std::vector<Checkpoint> checkpoints =
      pretrain(train_features, cfg.loss_id, cfg.loss_params, cfg.augment, pre);

  // Labels per split are identical across checkpoints; write them once.
  write_labels(out / "records" / "train-labels.csv",
               detail::gather_labels(ds.labels, ds.splits.train));
  write_labels(out / "records" / "cal-labels.csv",
               detail::gather_labels(ds.labels, ds.splits.calibration));
  write_labels(out / "records" / "eval-labels.csv",
               detail::gather_labels(ds.labels, ds.splits.evaluation));

  // Fine-tune and evaluate each checkpoint; parallel across checkpoints.
  std::vector<CheckpointRecord> records(checkpoints.size());
  std::vector<RankedCheckpoint> evaluated(checkpoints.size());
  const std::vector<double> grid = make_threshold_grid(cfg.grid_step);
  std::atomic<std::size_t> next{0};
  std::atomic<bool> failed{false};
  std::exception_ptr first_error;
  std::mutex error_mutex;
  auto worker = [&]() {
    while (true) {
      const std::size_t i = next.fetch_add(1);
      if (i >= checkpoints.size() || failed.load()) break;
      try {
        HeadConfig head = cfg.head;
        head.seed = Rng(cfg.seed).split(0xF17E + checkpoints[i].pretrain_epoch).seed();
        CheckpointRecord rec = finetune_head(checkpoints[i], ds.features,
                                             ds.labels, ds.splits,
                                             cfg.synth.n_classes, head);
        const auto dir = out / "records" / rec.checkpoint_id;
        write_checkpoint(out / "checkpoints" / (rec.checkpoint_id + ".ckpt"),
                         checkpoints[i].encoder_weights);
        write_logits(dir / "train-logits.csv", rec.train.logits);
        write_logits(dir / "cal-logits.csv", rec.calibration.logits);
        write_logits(dir / "eval-logits.csv", rec.evaluation.logits);
        evaluated[i] = evaluate_checkpoint(
            {rec.checkpoint_id, rec.pretrain_epoch, rec.calibration,
             rec.evaluation},
            cfg.target_coverage, grid, cfg.macro_f1_policy);
        records[i] = std::move(rec);
      } catch (...) {
        std::lock_guard<std::mutex> lock(error_mutex);
        if (!first_error) first_error = std::current_exception();
        failed.store(true);
      }
    }
  };
  const unsigned n_workers =
      std::max(1u, std::min<unsigned>(jobs, static_cast<unsigned>(checkpoints.size())));
  if (n_workers <= 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (unsigned t = 0; t < n_workers; ++t) pool.emplace_back(worker);
    for (auto& th : pool) th.join();
  }
  if (first_error) std::rethrow_exception(first_error);

  // Manifest ties the run directory to the calibrate/sweep/rank/report tools.
  {
    nlohmann::json mj;
    mj["run_id"] = cfg.run_id;
    mj["n_classes"] = cfg.synth.n_classes;
    mj["target_coverage"] = cfg.target_coverage;
    mj["checkpoints"] = nlohmann::json::array();
    for (const auto& rec : records) {
      nlohmann::json cj;
      cj["id"] = rec.checkpoint_id;
      cj["pretrain_epoch"] = rec.pretrain_epoch;
      cj["cal_logits"] = "records/" + rec.checkpoint_id + "/cal-logits.csv";
      cj["cal_labels"] = "records/cal-labels.csv";
      cj["eval_logits"] = "records/" + rec.checkpoint_id + "/eval-logits.csv";
      cj["eval_labels"] = "records/eval-labels.csv";
      mj["checkpoints"].push_back(cj);
    }
    auto mout = detail::open_out(out / "manifest.json");
    mout << mj.dump(2) << '\n';
  }

  ExperimentResult result;
  result.out_dir = out;
  result.per_checkpoint = evaluated;
  result.ranking = rank_evaluated(evaluated);

  const std::string method = cfg.loss_id == LossId::Sicova ? "sicova" : "triplet";
  for (const auto& rc : result.ranking.ranking) {
    const auto& pt = rc.operating_point.point;
    result.summary.push_back({method, rc.checkpoint_id, rc.pretrain_epoch,
                              pt.coverage, pt.sel_accuracy, pt.sel_macro_f1,
                              pt.sel_qwk});
  }
  emit_summary_table(out / "results" / "summary.csv", result.summary);
  write_rank_csv(out / "results" / "rank.csv", result.ranking);

  std::vector<PlotSeries> series;
  for (const auto& rc : result.per_checkpoint) {
    std::size_t op_index = 0;
    for (std::size_t i = 0; i < rc.curve.size(); ++i)
      if (rc.curve[i].threshold == rc.operating_point.point.threshold) {
        op_index = i;
        break;
      }
    series.push_back({rc.checkpoint_id, rc.curve, op_index});
  }
  emit_risk_coverage_plot(out / "results" / "risk_coverage.svg", series);
  return result;
}

}  // namespace selpred
